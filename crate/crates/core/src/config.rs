//! Experiment configuration documents (JSON).
//!
//! ```json
//! {
//!   "model": { "kind": "sensornet", "params": { "n_queue": 20 } },
//!   "policy": { "kind": "threshold", "threshold": 3 },
//!   "watermark": { "beta": 0.05, "nu": "inverted" },
//!   "attack": { "kind": "virtual_system", "onset": 0 },
//!   "detector": { "c": 15, "M": 10, "window": 500 },
//!   "run": { "horizon": 10000, "replicates": 1000, "seed": 1, "out": "out" }
//! }
//! ```
//!
//! Every section is optional and defaults to the sensornet study.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{
    matrix_attack, null_attack, predictive_resampling_attack, virtual_system_attack, AttackMatrix, AttackStrategy,
    PosteriorMode,
};
use crate::detector::{DetectorConfig, OffSupportPolicy, ReferenceModel};
use crate::error::{Error, Result};
use crate::linalg::RowMatrix;
use crate::mdp::{CostFunction, DiscountFactor, Policy, TransitionKernel};
use crate::sensornet::{self, PowerModelParams};
use crate::watermark::{mix_policy, WatermarkSpec};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub policy: PolicySection,
    pub watermark: WatermarkSection,
    pub attack: AttackSection,
    pub detector: DetectorSection,
    pub run: RunSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSection {
    Sensornet {
        #[serde(default)]
        params: PowerModelParams,
    },
    Explicit {
        n_states: usize,
        n_actions: usize,
        /// `n_states * n_actions` rows of length `n_states`, row `i * m + j`.
        kernel: Vec<Vec<f64>>,
        /// `n_states` rows of length `n_actions`.
        cost: Vec<Vec<f64>>,
        alpha: f64,
        #[serde(default)]
        initial_state: usize,
    },
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection::Sensornet {
            params: PowerModelParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySection {
    Threshold {
        threshold: usize,
    },
    /// Best deterministic threshold over the inclusive range.
    OptimalThreshold {
        min: usize,
        max: usize,
    },
    Explicit {
        rows: Vec<Vec<f64>>,
    },
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection::Threshold { threshold: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuSpec {
    /// All mass on the actions the base policy does not prefer.
    Inverted,
    Uniform,
    #[serde(untagged)]
    Explicit(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WatermarkSection {
    pub beta: f64,
    pub beta_grid: Vec<f64>,
    pub nu: NuSpec,
}

impl Default for WatermarkSection {
    fn default() -> Self {
        Self {
            beta: 0.05,
            beta_grid: vec![0.0, 0.01, 0.02, 0.05, 0.1, 0.2],
            nu: NuSpec::Inverted,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    #[default]
    Null,
    Matrix,
    Predictive,
    VirtualSystem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub kind: AttackKind,
    /// Rows `prev * n + next` of length `n`; required for `matrix`.
    pub phi: Option<Vec<Vec<f64>>>,
    /// First attacked step; ignored for `null`.
    pub onset: Option<usize>,
    pub posterior: PosteriorMode,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            kind: AttackKind::Null,
            phi: None,
            onset: Some(0),
            posterior: PosteriorMode::Sample,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    /// Node mode only (sensornet).
    Node,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    /// `null` disables the threshold.
    pub c: Option<f64>,
    #[serde(rename = "M")]
    pub min_segment: usize,
    /// `null` keeps every candidate.
    pub window: Option<usize>,
    pub off_support: OffSupportPolicy,
    /// Defaults to `node` for sensornet and `full` otherwise.
    pub projection: Option<Projection>,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            c: Some(15.0),
            min_segment: 10,
            window: Some(500),
            off_support: OffSupportPolicy::ImmediateAlarm,
            projection: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Transitions observed per replicate.
    pub horizon: usize,
    pub replicates: usize,
    pub seed: u64,
    pub out: PathBuf,
    /// Replicate used by single-run commands.
    pub trace_replicate: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            horizon: 10_000,
            replicates: 1_000,
            seed: 1,
            out: PathBuf::from("out"),
            trace_replicate: 0,
        }
    }
}

fn config_err(field: &str, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {e}"))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(&path.display().to_string(), e))?;
        Self::from_json(&text)
    }

    /// Validates the document and builds every model object it names.
    pub fn resolve(&self) -> Result<Experiment> {
        let (kernel, cost, alpha, initial_state, sensor) = match &self.model {
            ModelSection::Sensornet { params } => {
                let (k, c) = sensornet::build_model(params).map_err(|e| config_err("model.params", e))?;
                let a = params.discount().map_err(|e| config_err("model.params.alpha", e))?;
                (k, c, a, sensornet::INITIAL_STATE, Some(*params))
            }
            ModelSection::Explicit {
                n_states,
                n_actions,
                kernel,
                cost,
                alpha,
                initial_state,
            } => {
                let k = TransitionKernel::from_rows(*n_states, *n_actions, kernel)
                    .map_err(|e| config_err("model.kernel", e))?;
                let c = CostFunction::from_rows(cost).map_err(|e| config_err("model.cost", e))?;
                if c.matrix().rows() != *n_states || c.matrix().cols() != *n_actions {
                    return Err(config_err("model.cost", format!("expected {n_states}x{n_actions}")));
                }
                let a = DiscountFactor::new(*alpha).map_err(|e| config_err("model.alpha", e))?;
                if *initial_state >= *n_states {
                    return Err(config_err(
                        "model.initial_state",
                        format!("{initial_state} >= {n_states}"),
                    ));
                }
                (k, c, a, *initial_state, None)
            }
        };
        let (n, m) = (kernel.n_states(), kernel.n_actions());

        let base = match (&self.policy, &sensor) {
            (PolicySection::Threshold { threshold }, Some(p)) => {
                sensornet::threshold_policy(p, *threshold, 0.0).map_err(|e| config_err("policy.threshold", e))?
            }
            (PolicySection::OptimalThreshold { min, max }, Some(p)) => {
                if min > max {
                    return Err(config_err("policy", "empty threshold range"));
                }
                let best = sensornet::find_optimal_threshold(p, *min..=*max)
                    .map_err(|e| config_err("policy", e))?
                    .best;
                sensornet::threshold_policy(p, best, 0.0).map_err(|e| config_err("policy", e))?
            }
            (PolicySection::Explicit { rows }, _) => {
                let g = Policy::from_rows(rows).map_err(|e| config_err("policy.rows", e))?;
                if g.n_states() != n || g.n_actions() != m {
                    return Err(config_err("policy.rows", format!("expected {n}x{m}")));
                }
                g
            }
            (_, None) => return Err(config_err("policy.kind", "threshold policies need the sensornet model")),
        };

        let nu = match &self.watermark.nu {
            NuSpec::Inverted => inverted(&base),
            NuSpec::Uniform => Policy::uniform(n, m),
            NuSpec::Explicit(rows) => {
                let g = Policy::from_rows(rows).map_err(|e| config_err("watermark.nu", e))?;
                if g.n_states() != n || g.n_actions() != m {
                    return Err(config_err("watermark.nu", format!("expected {n}x{m}")));
                }
                g
            }
        };
        for &b in std::iter::once(&self.watermark.beta).chain(&self.watermark.beta_grid) {
            if !(0.0..=1.0).contains(&b) {
                return Err(config_err("watermark.beta", format!("{b} not in [0, 1]")));
            }
        }

        let phi = match (self.attack.kind, &self.attack.phi) {
            (AttackKind::Matrix, Some(rows)) => {
                Some(AttackMatrix::from_rows(n, rows).map_err(|e| config_err("attack.phi", e))?)
            }
            (AttackKind::Matrix, None) => return Err(config_err("attack.phi", "required for matrix attacks")),
            _ => None,
        };
        let onset = match self.attack.kind {
            AttackKind::Null => None,
            _ => self.attack.onset,
        };

        let c = self.detector.c.unwrap_or(f64::INFINITY);
        let detector = DetectorConfig {
            threshold: c,
            min_segment: self.detector.min_segment,
            window: self.detector.window,
            off_support: self.detector.off_support,
        };
        detector.validate().map_err(|e| config_err("detector", e))?;
        let projection = self.detector.projection.unwrap_or(if sensor.is_some() {
            Projection::Node
        } else {
            Projection::Full
        });
        let (reference, node_block) = match (projection, &sensor) {
            (Projection::Node, Some(p)) => (
                ReferenceModel::from_kernel(&sensornet::node_kernel(p).map_err(|e| config_err("model.params", e))?),
                Some(p.n_queue + 1),
            ),
            (Projection::Node, None) => {
                return Err(config_err(
                    "detector.projection",
                    "node projection needs the sensornet model",
                ))
            }
            (Projection::Full, _) => (ReferenceModel::from_kernel(&kernel), None),
        };

        let run = &self.run;
        if run.replicates == 0 {
            return Err(config_err("run.replicates", "must be >= 1"));
        }
        if run.horizon <= detector.min_segment + 1 {
            return Err(config_err(
                "run.horizon",
                format!("{} must exceed M + 1 = {}", run.horizon, detector.min_segment + 1),
            ));
        }

        Ok(Experiment {
            kernel,
            cost,
            alpha,
            initial_state,
            sensor,
            base,
            nu,
            beta: self.watermark.beta,
            beta_grid: self.watermark.beta_grid.clone(),
            attack_kind: self.attack.kind,
            phi,
            posterior: self.attack.posterior,
            onset,
            detector,
            reference,
            node_block,
            horizon: run.horizon,
            replicates: run.replicates,
            seed: run.seed,
            out: run.out.clone(),
            trace_replicate: run.trace_replicate,
        })
    }
}

/// Uniform over the actions outside the argmax of each row.
fn inverted(policy: &Policy) -> Policy {
    let m = policy.n_actions();
    let probs = RowMatrix::from_fn(policy.n_states(), m, |s, a| {
        if m == 1 {
            return 1.0;
        }
        let row = policy.row(s);
        let best = (0..m).fold(0, |b, j| if row[j] > row[b] { j } else { b });
        if a == best {
            0.0
        } else {
            1.0 / (m - 1) as f64
        }
    });
    Policy::new(probs).expect("rows sum to one")
}

/// A validated configuration with every model object built.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub kernel: TransitionKernel,
    pub cost: CostFunction,
    pub alpha: DiscountFactor,
    pub initial_state: usize,
    pub sensor: Option<PowerModelParams>,
    pub base: Policy,
    pub nu: Policy,
    pub beta: f64,
    pub beta_grid: Vec<f64>,
    pub attack_kind: AttackKind,
    pub phi: Option<AttackMatrix>,
    pub posterior: PosteriorMode,
    pub onset: Option<usize>,
    pub detector: DetectorConfig,
    pub reference: ReferenceModel,
    /// Observation block size for the node projection.
    pub node_block: Option<usize>,
    pub horizon: usize,
    pub replicates: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub trace_replicate: u64,
}

impl Experiment {
    pub fn deployed_policy(&self, beta: f64) -> Result<Policy> {
        mix_policy(&self.base, &WatermarkSpec::new(self.nu.clone(), beta)?)
    }

    /// Attack against the closed loop running `policy`.
    pub fn attack(&self, policy: &Policy) -> Result<AttackStrategy> {
        Ok(match self.attack_kind {
            AttackKind::Null => null_attack(),
            AttackKind::Matrix => matrix_attack(self.phi.clone().expect("checked at resolve")),
            AttackKind::Predictive => predictive_resampling_attack(&self.kernel, policy, self.posterior)?,
            AttackKind::VirtualSystem => virtual_system_attack(&self.kernel, policy)?,
        })
    }

    /// Maps a reported state to the detector's observation alphabet.
    #[inline]
    pub fn project(&self, y: usize) -> usize {
        match self.node_block {
            Some(b) => y / b,
            None => y,
        }
    }
}
