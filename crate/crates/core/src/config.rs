//! Top-level run configuration: every tunable in one JSON document, with a
//! content hash that is stamped into all outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controller::{ImpedanceParams, TactileController};
use crate::error::{Error, Result};
use crate::eval::{default_suite, EvalContext, SuiteConfig, EFFICIENCY_COUNTS};
use crate::expert::ExpertConfig;
use crate::hand::HandGeometry;
use crate::policy::PolicyConfig;
use crate::sim::SimParams;

/// Environment variable naming a config file when `--config` is absent.
pub const CONFIG_ENV: &str = "DEXTAC_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfigs {
    pub ablation: SuiteConfig,
    pub zero_shot: SuiteConfig,
    pub data_efficiency: SuiteConfig,
    pub purely_tactile: SuiteConfig,
    /// Demonstrations per size for each data-efficiency checkpoint.
    pub efficiency_counts: Vec<usize>,
}

impl Default for SuiteConfigs {
    fn default() -> Self {
        let get = |n| default_suite(n).expect("built-in suite");
        Self {
            ablation: get("ablation"),
            zero_shot: get("zero-shot"),
            data_efficiency: get("data-efficiency"),
            purely_tactile: get("purely-tactile"),
            efficiency_counts: EFFICIENCY_COUNTS.to_vec(),
        }
    }
}

impl SuiteConfigs {
    pub fn get(&self, suite: &str) -> Option<&SuiteConfig> {
        match suite {
            "ablation" => Some(&self.ablation),
            "zero-shot" => Some(&self.zero_shot),
            "data-efficiency" => Some(&self.data_efficiency),
            "purely-tactile" => Some(&self.purely_tactile),
            _ => None,
        }
    }

    fn all_mut(&mut self) -> [&mut SuiteConfig; 4] {
        [
            &mut self.ablation,
            &mut self.zero_shot,
            &mut self.data_efficiency,
            &mut self.purely_tactile,
        ]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: HandGeometry,
    pub impedance: ImpedanceParams,
    pub sim: SimParams,
    pub expert: ExpertConfig,
    pub policy: PolicyConfig,
    pub suites: SuiteConfigs,
}

impl RunConfig {
    /// Reads `path`, or the file named by `DEXTAC_CONFIG`, or falls back to
    /// the defaults. The result is validated.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let path: Option<PathBuf> = path.map(Path::to_path_buf).or_else(|| {
            std::env::var_os(CONFIG_ENV)
                .filter(|v| !v.is_empty())
                .map(PathBuf::from)
        });
        let config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(&p)
                    .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", p.display())))?;
                Self::from_json(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Applies a run seed to every seeded component. Each component keeps
    /// its own named substreams, so sharing the value does not correlate
    /// them.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.policy.seed = seed;
        for s in self.suites.all_mut() {
            s.seed = seed;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.impedance.validate()?;
        self.sim.validate()?;
        self.expert.validate()?;
        self.policy.validate()?;
        for s in [
            &self.suites.ablation,
            &self.suites.zero_shot,
            &self.suites.data_efficiency,
            &self.suites.purely_tactile,
        ] {
            s.validate()?;
            for &size in &s.sizes {
                self.sim.syringe(size)?;
            }
        }
        let counts = &self.suites.efficiency_counts;
        if counts.is_empty() || counts[0] == 0 || counts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "suites.efficiency_counts must be positive and strictly increasing".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn controller(&self) -> Result<TactileController> {
        TactileController::new(self.geometry.clone(), self.impedance.clone())
    }

    pub fn eval_context(&self) -> Result<EvalContext> {
        Ok(EvalContext {
            sim: self.sim.clone(),
            controller: self.controller()?,
        })
    }
}
