//! Distributed fixed-time observers and robust fixed-time synchronization
//! controllers for networked uncertain Euler-Lagrange systems.
//!
//! The crate is organized around the closed loop it simulates:
//!
//! * [`network`] — directed topology, Laplacian, and the diagonal scaling
//!   the stability analysis needs;
//! * [`numerics`] — odd-ratio exponents, sign-preserving powers, and the
//!   power-inequality oracles;
//! * [`agents`] — leader exosystem, two-link manipulator dynamics, and the
//!   uncertainty-envelope certification grid;
//! * [`observer`] — distributed leader-state estimation with fixed-time or
//!   finite-time settling guarantees;
//! * [`controller`] — the gain-selection ledger and the robust
//!   domination-plus-backstepping torque law;
//! * [`sim`] — fixed-step closed-loop integration, settling detection, and
//!   Monte-Carlo sweeps;
//! * [`config`] / [`cli`] — scenario files and the command-line front end.

pub mod agents;
pub mod cli;
pub mod config;
pub mod controller;
pub mod network;
pub mod numerics;
pub mod observer;
pub mod sim;

pub use agents::{
    certify_bounds, leader_flow, manipulator_accel, BoundsCertificate, GridSpec,
    LeaderExosystem, ManipulatorParams, UncertaintyBounds,
};
pub use config::{load_scenario, ScenarioSpec};
pub use controller::{
    build_ledger, check_gains, domination_slack, epsilon_var, torque, u1_term, u2_term,
    zeta_var, ControlLaw, ControlMode, GainLedger, GainSlacks, RobustConfig,
};
pub use network::{
    compute_scaling_d, has_root_spanning_tree, laplacian, verify_scaling, Digraph, Edge,
    LaplacianBundle,
};
pub use numerics::{
    norms, oracle_lemma1, oracle_lemma2, oracle_lemma3, sigpow, spow, NormSet, OddRational,
};
pub use observer::{
    finite_time_settling_bound, innovation, lyapunov_v, observer_constants, observer_rhs,
    ObserverConstants, ObserverGains,
};
pub use sim::{
    detect_settling, monte_carlo, rk4_step, run_closed_loop, run_observer_only, spearman,
    McOptions, McReport, Scenario, SettlingReport, SimError, Trajectory,
};
