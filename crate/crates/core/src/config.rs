//! Flat, typed run configuration (TOML subset: `key = value` lines, `#` comments).
//!
//! Unknown keys and duplicate keys are rejected; diagnostics name the line and key.
//! Command-line flags are merged over file values with [`RunConfig::merge`].

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::sampler::{CutoffSpec, EnsembleSpec, RNG_ID};
use crate::spectral::ModelParams;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(rename = "N", skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub linear_diagnostic: Option<bool>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(rename = "N_ambient", skip_serializing_if = "Option::is_none")]
    pub n_ambient: Option<usize>,

    /// Cutoff radius; defaults to twice the ensemble median of `𝓔_N` where a cutoff is used.
    #[serde(rename = "R", skip_serializing_if = "Option::is_none")]
    pub cutoff_radius: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cutoff: Option<bool>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emit_json: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emit_csv: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emit_binary: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,

    /// Binary state file used as initial datum by `evolve`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    #[serde(rename = "T", skip_serializing_if = "Option::is_none")]
    pub t_final: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoints: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub times: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub modes: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observables: Option<Vec<String>>,
    #[serde(rename = "M_grid", skip_serializing_if = "Option::is_none")]
    pub m_grid: Option<Vec<f64>>,
    #[serde(rename = "N_list", skip_serializing_if = "Option::is_none")]
    pub n_list: Option<Vec<usize>>,
    #[serde(rename = "M_ref", skip_serializing_if = "Option::is_none")]
    pub m_ref: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q_list: Option<Vec<f64>>,
    #[serde(rename = "T_checkpoints", skip_serializing_if = "Option::is_none")]
    pub t_checkpoints: Option<Vec<f64>>,
    #[serde(rename = "K", skip_serializing_if = "Option::is_none")]
    pub k: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scans: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_dyad: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trials: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub permutations: Option<usize>,
}

macro_rules! merge_fields {
    ($dst:ident, $src:ident; $($f:ident),* $(,)?) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl RunConfig {
    /// Values set in `over` replace those in `self`.
    pub fn merge(&mut self, over: &RunConfig) {
        merge_fields!(self, over;
            command, p, s, sigma, n, grid_size, dt, tol, max_steps, linear_diagnostic,
            seed, samples, n_ambient, cutoff_radius, cutoff, output_dir, emit_json, emit_csv,
            emit_binary, threads, input, t_final, checkpoints, times, modes, observables, m_grid,
            n_list, m_ref, q, q_list, t_checkpoints, k, scans, max_dyad, trials, permutations);
    }

    /// Model parameters with defaults `p = 5`, `s = 1.3`, `N = default_n` for unset keys.
    pub fn model_params(&self, default_n: usize) -> Result<ModelParams> {
        let mut params = ModelParams::new(self.p.unwrap_or(5), self.s.unwrap_or(1.3), self.n.unwrap_or(default_n))?;
        if let Some(v) = self.sigma {
            params.sigma = v;
        }
        if let Some(v) = self.grid_size {
            params.grid_size = v;
        }
        if let Some(v) = self.dt {
            params.dt = v;
        }
        if let Some(v) = self.tol {
            params.tol = v;
        }
        if let Some(v) = self.max_steps {
            params.max_steps = v;
        }
        if let Some(v) = self.linear_diagnostic {
            params.linear_diagnostic = v;
        }
        params.validate()?;
        Ok(params)
    }

    /// Ensemble with `N_ambient` defaulting to `default_ambient`.
    pub fn ensemble(&self, default_samples: usize, default_ambient: usize) -> Result<EnsembleSpec> {
        EnsembleSpec::new(
            self.seed.unwrap_or(0),
            self.samples.unwrap_or(default_samples),
            self.s.unwrap_or(1.3),
            self.n_ambient.unwrap_or(default_ambient),
        )
    }

    /// Cutoff with an explicit radius, if one is configured.
    pub fn explicit_cutoff(&self, params: &ModelParams) -> Result<Option<CutoffSpec>> {
        self.cutoff_radius
            .map(|r| CutoffSpec::new(r, params.n, params.s))
            .transpose()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parses configuration text; errors carry the line number and the offending key.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    toml::from_str(text).map_err(|e| {
        let (line_no, key) = match e.span() {
            Some(span) => {
                let line_no = text[..span.start].matches('\n').count() + 1;
                let line = text.lines().nth(line_no - 1).unwrap_or("");
                let key = line.split('=').next().unwrap_or("").trim().to_string();
                (line_no, key)
            }
            None => (0, String::new()),
        };
        Error::Config(format!("line {line_no}, key `{key}`: {}", e.message()))
    })
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn save_config(config: &RunConfig, path: &Path) -> Result<()> {
    std::fs::write(path, config.to_toml()?)?;
    Ok(())
}

/// Block embedded in every output artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub code_version: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub rng_id: String,
    pub config: RunConfig,
}

impl Provenance {
    pub fn new(config: &RunConfig) -> Self {
        Provenance {
            code_version: crate::CODE_VERSION.to_string(),
            config_hash: config.hash(),
            master_seed: config.seed.unwrap_or(0),
            rng_id: RNG_ID.to_string(),
            config: config.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_valid() {
        assert_eq!(parse_config("").unwrap(), RunConfig::default());
        assert_eq!(parse_config("# only a comment\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn duplicate_key_is_named() {
        let err = parse_config("p = 5\ns = 1.3\np = 7\n").unwrap_err().to_string();
        assert!(err.contains("`p`"), "{err}");
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn unknown_key_rejected() {
        let err = parse_config("p = 5\nsigmaa = 0.7\n").unwrap_err().to_string();
        assert!(err.contains("sigmaa"), "{err}");
    }

    #[test]
    fn type_mismatch_names_key() {
        let err = parse_config("N = \"eight\"\n").unwrap_err().to_string();
        assert!(err.contains("`N`") && err.contains("line 1"), "{err}");
    }

    #[test]
    fn merge_overrides() {
        let mut a = parse_config("p = 5\nN = 4\n").unwrap();
        let b = RunConfig { n: Some(8), ..Default::default() };
        a.merge(&b);
        assert_eq!((a.p, a.n), (Some(5), Some(8)));
    }

    #[test]
    fn hash_tracks_content() {
        let a = parse_config("p = 5\n").unwrap();
        let b = parse_config("p = 7\n").unwrap();
        assert_eq!(a.hash(), parse_config("p = 5 # same\n").unwrap().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
