//! Run configuration: one TOML file, overridden by command-line flags.
//!
//! Every random sub-task takes its seed from the global `seed` through
//! `derive_seed(seed, tag)` with the tags `"sampling"`, `"cca"`, `"embed"`,
//! `"synth"` and `"perturb/<file name>"`; seeds written inside sections are
//! ignored.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use layerprobe::cca::{CcaOptions, CcaProtocol};
use layerprobe::embed::EmbedConfig;
use layerprobe::perturb::PerturbConfig;
use layerprobe::pooling::SamplingPolicy;
use layerprobe::probes::LambdaPolicy;
use layerprobe::prosody::ProsodyConfig;
use layerprobe::rng::derive_seed;
use layerprobe::synth::SynthConfig;
use layerprobe::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_root: PathBuf,
    pub seed: u64,
    /// Accents to report separately; empty means the manifest's list.
    pub accents: Vec<String>,
    /// Speaker to probe fold; empty means one speaker per accent per fold.
    pub speaker_folds: BTreeMap<String, usize>,
    pub pool: PoolSection,
    pub sampling: SamplingPolicy,
    pub cca: CcaSection,
    pub probe: ProbeSection,
    pub prosody: ProsodyConfig,
    pub embed: EmbedConfig,
    pub perturb: PerturbConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_root: PathBuf::from("."),
            seed: 0,
            accents: Vec::new(),
            speaker_folds: BTreeMap::new(),
            pool: PoolSection::default(),
            sampling: SamplingPolicy::default(),
            cca: CcaSection::default(),
            probe: ProbeSection::default(),
            prosody: ProsodyConfig::default(),
            embed: EmbedConfig::default(),
            perturb: PerturbConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolSection {
    /// Alignment labels that are not speech units (silence, noise).
    pub skip_labels: Vec<String>,
}

impl Default for PoolSection {
    fn default() -> Self {
        Self {
            skip_labels: ["", "sil", "sp", "spn"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CcaSection {
    pub folds: usize,
    pub eval_folds: usize,
    pub stratify: bool,
    pub ridge_eps: f64,
    pub rank_tol: f64,
}

impl Default for CcaSection {
    fn default() -> Self {
        let p = CcaProtocol::default();
        Self {
            folds: p.folds,
            eval_folds: p.eval_folds,
            stratify: p.stratify,
            ridge_eps: p.options.ridge_eps,
            rank_tol: p.options.rank_tol,
        }
    }
}

/// `lambda = "auto"` or a non-negative number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaSetting {
    Named(String),
    Value(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub folds: usize,
    pub lambda: LambdaSetting,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            folds: 4,
            lambda: LambdaSetting::Named("auto".into()),
        }
    }
}

impl ProbeSection {
    pub fn lambda_policy(&self) -> Result<LambdaPolicy> {
        match &self.lambda {
            LambdaSetting::Named(s) if s == "auto" => Ok(LambdaPolicy::Auto),
            LambdaSetting::Value(v) if *v >= 0.0 && v.is_finite() => Ok(LambdaPolicy::Fixed(*v)),
            other => Err(Error::invalid(format!(
                "probe.lambda must be \"auto\" or >= 0, got {other:?}"
            ))),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Applies the derived sub-seeds and checks every section.
    pub fn finalize(mut self) -> Result<Self> {
        self.sampling.seed = derive_seed(self.seed, "sampling");
        self.embed.seed = derive_seed(self.seed, "embed");
        self.synth.seed = derive_seed(self.seed, "synth");
        self.sampling.validate()?;
        self.prosody.validate()?;
        self.perturb.validate()?;
        self.probe.lambda_policy()?;
        if self.probe.folds < 2 {
            return Err(Error::invalid("probe.folds must be at least 2"));
        }
        Ok(self)
    }

    pub fn cca_protocol(&self) -> CcaProtocol {
        CcaProtocol {
            folds: self.cca.folds,
            eval_folds: self.cca.eval_folds,
            seed: derive_seed(self.seed, "cca"),
            stratify: self.cca.stratify,
            options: CcaOptions {
                ridge_eps: self.cca.ridge_eps,
                rank_tol: self.cca.rank_tol,
            },
        }
    }

    pub fn perturb_seed(&self, file_name: &str) -> u64 {
        derive_seed(self.seed, &format!("perturb/{file_name}"))
    }

    pub fn root(&self) -> &Path {
        &self.dataset_root
    }

    /// The effective configuration as JSON, for report sidecars.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_partial_toml_and_derives_seeds() {
        let c: RunConfig = toml::from_str(
            r#"
            dataset_root = "data"
            seed = 7
            [cca]
            eval_folds = 2
            [probe]
            lambda = 0.01
            [sampling]
            per_phoneme_per_speaker = 50
            "#,
        )
        .unwrap();
        let c = c.finalize().unwrap();
        assert_eq!(c.cca.folds, 10);
        assert_eq!(c.cca_protocol().eval_folds, 2);
        assert_eq!(c.probe.lambda_policy().unwrap(), LambdaPolicy::Fixed(0.01));
        assert_eq!(c.sampling.per_phoneme_per_speaker, 50);
        assert_eq!(c.sampling.seed, derive_seed(7, "sampling"));
        assert_ne!(c.sampling.seed, c.embed.seed);
    }

    #[test]
    fn rejects_typos_and_bad_lambda() {
        assert!(toml::from_str::<RunConfig>("sed = 3").is_err());
        let c: RunConfig = toml::from_str("[probe]\nlambda = \"big\"").unwrap();
        assert!(c.finalize().is_err());
    }
}
