//! Scenario files: a TOML schema mirroring the module structure, strict
//! validation that names the offending key, and emission for round-trips.

use crate::agents::{
    AgentsError, GridSpec, LeaderExosystem, ManipulatorParams, UncertaintyBounds,
};
use crate::controller::{ControlLaw, ControlMode, ControllerError, RobustConfig};
use crate::network::{has_root_spanning_tree, Digraph, Edge, LaplacianBundle};
use crate::numerics::OddRational;
use crate::observer::ObserverGains;
use crate::sim::{AgentSetup, Scenario};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid `{key}`: {constraint}")]
    Validation { key: String, constraint: String },
    #[error("controller gains are not certified: {0}")]
    Uncertified(ControllerError),
}

fn invalid(key: &str, constraint: impl Into<String>) -> ConfigError {
    ConfigError::Validation {
        key: key.to_string(),
        constraint: constraint.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    /// `[from, to, weight]` triples; node 0 is the leader
    pub edges: Vec<(usize, usize, f64)>,
    /// optional diagonal override for the scaling matrix D (verified
    /// against the >= 2 criterion, never trusted silently)
    #[serde(rename = "D_diag", skip_serializing_if = "Option::is_none")]
    pub d_diag: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeaderSpec {
    pub s: Vec<Vec<f64>>,
    pub e: Vec<Vec<f64>>,
    pub eta_init: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserverSpec {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub a: OddRational,
    pub b: OddRational,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSpec {
    pub alpha: OddRational,
    pub beta: OddRational,
    pub gamma1: f64,
    pub gamma2: f64,
    pub k1: f64,
    pub k2: f64,
    pub kappa: f64,
    #[serde(default = "default_mode")]
    pub mode: ModeSpec,
    #[serde(default)]
    pub allow_uncertified: bool,
    /// boundary-layer radius for the switching term; 0 keeps the exact
    /// switch the domination lemma assumes
    #[serde(default)]
    pub u1_smooth_radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeSpec {
    Fixed,
    Finite,
}

fn default_mode() -> ModeSpec {
    ModeSpec::Fixed
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsSpec {
    pub gravity: f64,
    pub theta_ranges: [[f64; 2]; 6],
    #[serde(default = "default_enforce")]
    pub enforce_theta_ranges: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
}

fn default_enforce() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub theta: [f64; 6],
    pub q_init: Vec<f64>,
    pub qdot_init: Vec<f64>,
    pub eta_init: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSpec {
    pub step: f64,
    pub horizon: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record_stride: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub seed: u64,
    pub graph: GraphSpec,
    pub leader: LeaderSpec,
    pub observer: ObserverSpec,
    pub controller: ControllerSpec,
    pub bounds: UncertaintyBounds,
    pub dynamics: DynamicsSpec,
    pub agents: Vec<AgentSpec>,
    pub integrator: IntegratorSpec,
}

fn default_tolerance() -> f64 {
    1e-3
}

impl ScenarioSpec {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario spec serializes")
    }

    /// Apply the mode reduction (finite mode zeroes c3, gamma2, k2) and
    /// assemble the validated runtime scenario.
    pub fn build(&self) -> Result<Scenario, ConfigError> {
        if !(self.tolerance > 0.0) {
            return Err(invalid("tolerance", "must be positive"));
        }
        let step = self.integrator.step;
        if !(step > 0.0) {
            return Err(invalid("integrator.step", "must be positive"));
        }
        if !(self.integrator.horizon > step) {
            return Err(invalid("integrator.horizon", "must exceed the step"));
        }

        let n_followers = self.agents.len();
        if n_followers == 0 {
            return Err(invalid("agents", "need at least one [[agents]] block"));
        }
        let edges: Vec<Edge> = self
            .graph
            .edges
            .iter()
            .map(|&(from, to, weight)| Edge { from, to, weight })
            .collect();
        let graph = Digraph::new(n_followers, edges)
            .map_err(|e| invalid("graph.edges", e.to_string()))?;
        if !has_root_spanning_tree(&graph) {
            return Err(invalid(
                "graph.edges",
                "must contain a spanning tree rooted at node 0",
            ));
        }
        let bundle = LaplacianBundle::build(&graph, 1e-9, self.graph.d_diag.as_deref())
            .map_err(|e| invalid("graph.D_diag", e.to_string()))?;

        let n = self.leader.s.len();
        let s = matrix_from_rows(&self.leader.s, "leader.s")?;
        if s.nrows() != s.ncols() {
            return Err(invalid("leader.s", "must be square"));
        }
        let e = matrix_from_rows(&self.leader.e, "leader.e")?;
        if e.ncols() != n {
            return Err(invalid("leader.e", format!("must have {n} columns")));
        }
        if self.leader.eta_init.len() != n {
            return Err(invalid("leader.eta_init", format!("must have {n} entries")));
        }
        let leader = LeaderExosystem::new(
            s.clone(),
            e.clone(),
            DVector::from_column_slice(&self.leader.eta_init),
        )
        .map_err(|err| invalid("leader", err.to_string()))?;

        let mode = self.controller.mode;
        let mut obs_gains = ObserverGains {
            c1: self.observer.c1,
            c2: self.observer.c2,
            c3: self.observer.c3,
            a: self.observer.a,
            b: self.observer.b,
        };
        let (mut gamma2, mut k2) = (self.controller.gamma2, self.controller.k2);
        if mode == ModeSpec::Finite {
            obs_gains.c3 = 0.0;
            gamma2 = 0.0;
            k2 = 0.0;
        }
        obs_gains
            .validate(crate::observer::d_kron_s_norm(&bundle.d, &s))
            .map_err(|e| invalid("observer", e.to_string()))?;

        self.bounds
            .validate()
            .map_err(|e: AgentsError| invalid("bounds", e.to_string()))?;
        let rc = RobustConfig {
            kappa: self.controller.kappa,
            bounds: self.bounds,
            u1_smooth_radius: self.controller.u1_smooth_radius,
        };
        let law = ControlLaw::new(
            self.controller.alpha,
            self.controller.beta,
            self.controller.gamma1,
            gamma2,
            self.controller.k1,
            k2,
            match mode {
                ModeSpec::Fixed => ControlMode::Fixed,
                ModeSpec::Finite => ControlMode::Finite,
            },
            rc,
            &e,
            &s,
            self.controller.allow_uncertified,
        )
        .map_err(|err| match err {
            ControllerError::UncertifiedGains { .. } => ConfigError::Uncertified(err),
            other => invalid("controller", other.to_string()),
        })?;

        let m = e.nrows();
        let mut agents = Vec::with_capacity(n_followers);
        for (idx, a) in self.agents.iter().enumerate() {
            let key = format!("agents[{idx}]");
            if a.q_init.len() != m || a.qdot_init.len() != m {
                return Err(invalid(
                    &format!("{key}.q_init"),
                    format!("must have {m} entries"),
                ));
            }
            if a.eta_init.len() != n {
                return Err(invalid(
                    &format!("{key}.eta_init"),
                    format!("must have {n} entries"),
                ));
            }
            if a.theta.iter().any(|&t| !(t > 0.0)) {
                return Err(invalid(&format!("{key}.theta"), "must be positive"));
            }
            if self.dynamics.enforce_theta_ranges {
                for (j, (&t, r)) in a.theta.iter().zip(&self.dynamics.theta_ranges).enumerate() {
                    if t < r[0] || t > r[1] {
                        return Err(invalid(
                            &format!("{key}.theta[{j}]"),
                            format!("{t} outside configured range [{}, {}]", r[0], r[1]),
                        ));
                    }
                }
            }
            agents.push(AgentSetup {
                params: ManipulatorParams {
                    theta: a.theta,
                    gravity: self.dynamics.gravity,
                },
                q_init: DVector::from_column_slice(&a.q_init),
                qdot_init: DVector::from_column_slice(&a.qdot_init),
                eta_init: DVector::from_column_slice(&a.eta_init),
            });
        }

        let steps = (self.integrator.horizon / step).round() as usize;
        let record_stride = self
            .integrator
            .record_stride
            .unwrap_or_else(|| (steps / 4000).max(1));

        Ok(Scenario {
            graph,
            bundle,
            leader,
            agents,
            obs_gains,
            law,
            step,
            horizon: self.integrator.horizon,
            record_stride,
            tolerance: self.tolerance,
            seed: self.seed,
        })
    }
}

fn matrix_from_rows(rows: &[Vec<f64>], key: &str) -> Result<DMatrix<f64>, ConfigError> {
    if rows.is_empty() {
        return Err(invalid(key, "must be a nonempty matrix"));
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(invalid(key, "rows must be nonempty and equally long"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

/// The six-manipulator scenario with every published parameter.
pub const PAPER_EXAMPLE: &str = include_str!("../scenarios/paper_example.toml");
/// Observer sweep scenario used for the fixed-versus-finite settling study.
pub const MC_SWEEP: &str = include_str!("../scenarios/mc_sweep.toml");

pub fn builtin_scenario(name: &str) -> Option<&'static str> {
    match name {
        "paper_example" => Some(PAPER_EXAMPLE),
        "mc_sweep" => Some(MC_SWEEP),
        _ => None,
    }
}

/// Load a scenario from a file path or a builtin name.
pub fn load_scenario(path_or_name: &str) -> Result<ScenarioSpec, ConfigError> {
    if Path::new(path_or_name).exists() {
        let text = std::fs::read_to_string(path_or_name).map_err(|source| ConfigError::Io {
            path: path_or_name.to_string(),
            source,
        })?;
        return ScenarioSpec::from_toml(&text);
    }
    match builtin_scenario(path_or_name) {
        Some(text) => ScenarioSpec::from_toml(text),
        None => Err(ConfigError::Io {
            path: path_or_name.to_string(),
            source: std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "not a file and not a bundled scenario (expected \
                 `paper_example` or `mc_sweep`)",
            ),
        }),
    }
}
