"""Smoke test for the nlslab Python extension.

Build first, then run:

    cargo build --release -p nlslab-py --features extension-module
    python3 python/smoke_test.py

The script loads target/release/libnlslab.so (or a module already on sys.path).
"""

import cmath
import importlib.machinery
import importlib.util
import json
import math
import pathlib
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parents[1]


def load():
    try:
        import nlslab  # noqa: F401

        return nlslab
    except ImportError:
        pass
    for name in ("libnlslab.so", "libnlslab.dylib", "nlslab.pyd"):
        path = ROOT / "target" / "release" / name
        if path.exists():
            loader = importlib.machinery.ExtensionFileLoader("nlslab", str(path))
            spec = importlib.util.spec_from_file_location("nlslab", path, loader=loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit("nlslab extension not found; build it with cargo first")


def close(a, b, tol):
    return abs(a - b) <= tol * max(1.0, abs(b))


def main():
    nl = load()
    print("nlslab", nl.__version__)

    params = nl.ModelParams(5, 1.3, 4, tol=1e-12)
    u = nl.sample(7, 0, 1.3, 4)
    assert u.n_ambient == 4 and len(u) == 9
    assert nl.FourierState.from_bytes(u.to_bytes()) == u

    # Conservation along the flow.
    v = nl.evolve(u, 0.3, params)
    assert close(nl.mass(v), nl.mass(u), 1e-10)
    assert close(nl.hamiltonian(v, params), nl.hamiltonian(u, params), 1e-9)
    back = nl.evolve(v, -0.3, params)
    assert max(abs(a - b) for a, b in zip(back.coeffs(), u.coeffs())) < 1e-8

    # Gauge covariance.
    phase = cmath.exp(0.4j)
    rotated = nl.FourierState([phase * c for c in u.coeffs()])
    w = nl.evolve(rotated, 0.3, params)
    assert max(abs(a - phase * b) for a, b in zip(w.coeffs(), v.coeffs())) < 1e-8

    # Normal-form identity and the density relation.
    check = nl.normal_form_identity_check(u, params)
    assert check["relative_error"] < 1e-6, check
    t = 0.1
    delta_r = nl.energy_correction(nl.evolve(u, -t, params), params) - nl.energy_correction(u, params)
    lhs = nl.log_density_f(u, t, params)
    rhs = nl.log_density_g(u, t, params) - delta_r
    assert close(lhs, rhs, 1e-9), (lhs, rhs)
    assert close(
        nl.modified_energy(u, params),
        0.5 * u.sobolev_norm(1.3) ** 2 + nl.energy_correction(u, params),
        1e-9,
    )

    m, tt, n = nl.multilinear_forms(nl.sample(3, 0, 1.3, 2), nl.ModelParams(5, 1.3, 2))
    assert all(math.isfinite(abs(z)) for z in (m, tt, n))

    # Scans.
    assert abs(nl.sp_threshold(5) - 1.2807764) < 1e-6
    omega = nl.omega_lower_bound_scan(5, 8)
    assert not omega["violated"] and omega["extremal_value"] > 0
    assert not nl.remark_scan(5, 8)["violated"]

    # Transport at t = 0 is exact.
    battery = nl.transport_battery(params, [0.0], 11, 50, modes=["plain", "cutoff"])
    assert all(r["z_score"] == 0.0 for r in battery["reports"])

    # CLI entry point writes provenance-tagged artifacts.
    with tempfile.TemporaryDirectory() as out:
        assert nl.run_cli(["resonance", "--K", "6", "--out", out]) == 0
        doc = json.loads((pathlib.Path(out) / "resonance.json").read_text())
        assert doc["provenance"]["config"]["K"] == 6
        assert nl.run_cli(["sample", "--p", "4"]) == 2

    try:
        nl.ModelParams(4, 1.3, 4)
    except ValueError:
        pass
    else:
        raise AssertionError("even p accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
