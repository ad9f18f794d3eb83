//! Distributed estimation of the leader state: per-agent innovation from
//! in-neighbor relative information, the observer vector field, the
//! settling-time constants of its stability analysis, and the Lyapunov
//! diagnostic evaluated along simulated runs.

use crate::network::Digraph;
use crate::numerics::{sigpow, OddRational};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ObserverError {
    #[error("agent {0} has no in-neighbors; its innovation is undefined")]
    IsolatedAgent(usize),
    #[error("gain condition violated: {0}")]
    GainConditionViolated(String),
    #[error("stacked estimate vector has wrong shape: {0}")]
    ShapeMismatch(String),
}

/// Observer gains. c3 = 0 selects the finite-time variant, in which case b
/// is unused.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObserverGains {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub a: OddRational,
    pub b: OddRational,
}

impl ObserverGains {
    pub fn is_finite_time(&self) -> bool {
        self.c3 == 0.0
    }

    /// Check the standing hypotheses: 0 < a < 1, c2 > 0, c3 >= 0,
    /// c1 > ||D (x) S||, and b > 1/a whenever the fixed-time term is active.
    pub fn validate(&self, d_kron_s_norm: f64) -> Result<(), ObserverError> {
        let a = self.a.value();
        if !(a > 0.0 && a < 1.0) {
            return Err(ObserverError::GainConditionViolated(format!(
                "a = {} must lie in (0, 1)",
                self.a
            )));
        }
        if !(self.c2 > 0.0) {
            return Err(ObserverError::GainConditionViolated(format!(
                "c2 = {} must be positive",
                self.c2
            )));
        }
        if self.c3 < 0.0 {
            return Err(ObserverError::GainConditionViolated(format!(
                "c3 = {} must be nonnegative",
                self.c3
            )));
        }
        if !(self.c1 > d_kron_s_norm) {
            return Err(ObserverError::GainConditionViolated(format!(
                "c1 = {} must exceed ||D (x) S|| = {d_kron_s_norm}",
                self.c1
            )));
        }
        if self.c3 > 0.0 && !(self.b.value() > 1.0 / a) {
            return Err(ObserverError::GainConditionViolated(format!(
                "b = {} must exceed 1/a = {}",
                self.b,
                1.0 / a
            )));
        }
        Ok(())
    }
}

/// Weighted disagreement y_i = sum_j a_ij (eta_i - eta_j) over the
/// in-neighbors of agent i. `eta_all[0]` is the leader state; the function
/// only reads the entries the topology grants agent i.
pub fn innovation(
    i: usize,
    eta_all: &[DVector<f64>],
    g: &Digraph,
) -> Result<DVector<f64>, ObserverError> {
    if i == 0 || i > g.n_followers() {
        return Err(ObserverError::ShapeMismatch(format!(
            "agent id {i} out of range 1..={}",
            g.n_followers()
        )));
    }
    if eta_all.len() != g.n_followers() + 1 {
        return Err(ObserverError::ShapeMismatch(format!(
            "expected {} stacked estimates, got {}",
            g.n_followers() + 1,
            eta_all.len()
        )));
    }
    let neighbors = g.in_neighbors(i);
    if neighbors.is_empty() {
        return Err(ObserverError::IsolatedAgent(i));
    }
    let mut y = DVector::zeros(eta_all[i].len());
    for &(j, w) in neighbors {
        y += w * (&eta_all[i] - &eta_all[j]);
    }
    Ok(y)
}

/// Observer vector field: S eta_i - c1 y_i - c2 sig^a(y_i) - c3 sig^b(y_i).
/// With c3 = 0 this is exactly the finite-time reduction.
pub fn observer_rhs(
    eta_i: &DVector<f64>,
    y_i: &DVector<f64>,
    gains: &ObserverGains,
    s: &DMatrix<f64>,
) -> DVector<f64> {
    let mut out = s * eta_i - gains.c1 * y_i;
    out -= gains.c2 * sigpow(y_i, gains.a.value()).expect("validated exponent");
    if gains.c3 > 0.0 {
        out -= gains.c3 * sigpow(y_i, gains.b.value()).expect("validated exponent");
    }
    out
}

/// Spectral norm of D (x) S for diagonal D: max d_i times the largest
/// singular value of S.
pub fn d_kron_s_norm(d: &DVector<f64>, s: &DMatrix<f64>) -> f64 {
    let smax = s
        .clone()
        .svd(false, false)
        .singular_values
        .max();
    d.max() * smax
}

/// The constants extracted from the fixed-time stability analysis, plus the
/// settling-time bound they certify.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObserverConstants {
    pub c_hat1: f64,
    pub c_hat2: f64,
    pub c_hat3: f64,
    pub t1_star: f64,
    pub d_max: f64,
    pub d_kron_s_norm: f64,
}

/// Evaluate the proof constants for the fixed-time observer on a network
/// with state dimension n and N followers.
///
///   c_hat1 = min{ (c1^2 - ||D x S||^2)/2, c2^2/2, c3^2 / (2 (nN)^{b-1}) }
///   c_hat2 = max{ (c1 d/2)^e2 (nN)^{1-e2}, (c2 d/(1+a))^e2 (nN)^{1-a},
///                 (c3 d/(1+b))^e2 },          e2 = 2a/(1+a), d = d_max
///   c_hat3 = max{ (c1 d/2)^e3, (c2 d/(1+a))^e3, (c3 d/(1+b))^e3 }
///             * (3nN)^{(b-1)/(b+1)},          e3 = 2b/(1+b)
///   T1*    = 4 c_hat2 (a+1) / (c_hat1 (1-a)) + 4 c_hat3 (b+1) / (c_hat1 (b-1))
pub fn observer_constants(
    gains: &ObserverGains,
    d: &DVector<f64>,
    s: &DMatrix<f64>,
    n: usize,
    n_followers: usize,
) -> Result<ObserverConstants, ObserverError> {
    let ds = d_kron_s_norm(d, s);
    gains.validate(ds)?;
    if !(gains.c3 > 0.0) {
        return Err(ObserverError::GainConditionViolated(
            "fixed-time constants need c3 > 0; use finite_time_settling_bound instead".into(),
        ));
    }
    let (a, b) = (gains.a.value(), gains.b.value());
    let nn = (n * n_followers) as f64;
    let d_max = d.max();

    let c_hat1 = ((gains.c1 * gains.c1 - ds * ds) / 2.0)
        .min(gains.c2 * gains.c2 / 2.0)
        .min(gains.c3 * gains.c3 / (2.0 * nn.powf(b - 1.0)));

    let e2 = 2.0 * a / (1.0 + a);
    let c_hat2 = ((gains.c1 * d_max / 2.0).powf(e2) * nn.powf(1.0 - e2))
        .max((gains.c2 * d_max / (1.0 + a)).powf(e2) * nn.powf(1.0 - a))
        .max((gains.c3 * d_max / (1.0 + b)).powf(e2));

    let e3 = 2.0 * b / (1.0 + b);
    let c_hat3 = (gains.c1 * d_max / 2.0)
        .powf(e3)
        .max((gains.c2 * d_max / (1.0 + a)).powf(e3))
        .max((gains.c3 * d_max / (1.0 + b)).powf(e3))
        * (3.0 * nn).powf((b - 1.0) / (b + 1.0));

    let t1_star = 4.0 * c_hat2 * (a + 1.0) / (c_hat1 * (1.0 - a))
        + 4.0 * c_hat3 * (b + 1.0) / (c_hat1 * (b - 1.0));

    Ok(ObserverConstants {
        c_hat1,
        c_hat2,
        c_hat3,
        t1_star,
        d_max,
        d_kron_s_norm: ds,
    })
}

/// State-dependent settling bound of the finite-time variant (c3 = 0):
///   T1_bar(y(0)) <= 3 c_hat2 (a+1) V(y(0))^{1 - 2a/(1+a)} / (c_hat1 (1-a))
/// with the c3 terms dropped from c_hat1 and c_hat2.
pub fn finite_time_settling_bound(
    gains: &ObserverGains,
    d: &DVector<f64>,
    s: &DMatrix<f64>,
    n: usize,
    n_followers: usize,
    v_initial: f64,
) -> Result<f64, ObserverError> {
    let ds = d_kron_s_norm(d, s);
    gains.validate(ds)?;
    if gains.c3 != 0.0 {
        return Err(ObserverError::GainConditionViolated(
            "finite-time bound applies to c3 = 0".into(),
        ));
    }
    let a = gains.a.value();
    let nn = (n * n_followers) as f64;
    let d_max = d.max();
    let c_hat1 = ((gains.c1 * gains.c1 - ds * ds) / 2.0).min(gains.c2 * gains.c2 / 2.0);
    let e2 = 2.0 * a / (1.0 + a);
    let c_hat2 = ((gains.c1 * d_max / 2.0).powf(e2) * nn.powf(1.0 - e2))
        .max((gains.c2 * d_max / (1.0 + a)).powf(e2) * nn.powf(1.0 - a));
    Ok(3.0 * c_hat2 * (a + 1.0) * v_initial.powf(1.0 - e2) / (c_hat1 * (1.0 - a)))
}

/// Lyapunov function of the stacked innovation:
///   V(y) = sum_i d_i ( c2 ||y_i^{1+a}||_1 / (1+a) + c3 ||y_i^{1+b}||_1 / (1+b) )
///        + (c1/2) y^T (D (x) I) y.
/// Zero exactly at consensus, positive elsewhere; non-increasing along
/// observer trajectories until settling.
pub fn lyapunov_v(y_per_agent: &[DVector<f64>], gains: &ObserverGains, d: &DVector<f64>) -> f64 {
    let (a, b) = (gains.a.value(), gains.b.value());
    let mut v = 0.0;
    for (i, y) in y_per_agent.iter().enumerate() {
        let di = d[i];
        let p1: f64 = y.iter().map(|x| x.abs().powf(1.0 + a)).sum();
        v += di * gains.c2 * p1 / (1.0 + a);
        if gains.c3 > 0.0 {
            let p2: f64 = y.iter().map(|x| x.abs().powf(1.0 + b)).sum();
            v += di * gains.c3 * p2 / (1.0 + b);
        }
        v += 0.5 * gains.c1 * di * y.norm_squared();
    }
    v
}
