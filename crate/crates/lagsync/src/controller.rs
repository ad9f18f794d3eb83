//! Robust synchronization controller: the explicit gain-selection ledger,
//! the discontinuous domination term u1, the fixed-time backstepping term
//! u2, torque assembly, and the slack oracle for the domination lemma.

use crate::agents::{ManipulatorParams, UncertaintyBounds};
use crate::numerics::{sigpow, OddRational};
use nalgebra::{DMatrix, DVector, Vector2};
use num_rational::Ratio;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ControllerError {
    #[error("invalid exponents: {0}")]
    InvalidExponents(String),
    #[error(
        "gains fail their selection inequalities (slacks: gamma1 {gamma1:.3e}, \
         gamma2 {gamma2:.3e}, k1 {k1:.3e}, k2 {k2:.3e}); pass allow_uncertified to proceed"
    )]
    UncertifiedGains {
        gamma1: f64,
        gamma2: f64,
        k1: f64,
        k2: f64,
    },
    #[error("invalid controller configuration: {0}")]
    InvalidConfig(String),
}

fn validate_exponents(alpha: OddRational, beta: OddRational) -> Result<(), ControllerError> {
    let a = alpha.value();
    if !(a > 0.5 && a < 1.0) {
        return Err(ControllerError::InvalidExponents(format!(
            "alpha = {alpha} must lie in (1/2, 1)"
        )));
    }
    if !(beta.value() > 1.0) {
        return Err(ControllerError::InvalidExponents(format!(
            "beta = {beta} must exceed 1"
        )));
    }
    Ok(())
}

/// The four exponent offsets of the selection procedure, kept exact:
/// p1 = 0, p2 = beta - alpha, p3 = beta/alpha - beta + alpha - 1,
/// p4 = beta/alpha - 1.
pub fn exponent_offsets(alpha: OddRational, beta: OddRational) -> [Ratio<i64>; 4] {
    let a = alpha.ratio();
    let b = beta.ratio();
    let one = Ratio::from_integer(1);
    [
        Ratio::from_integer(0),
        b - a,
        b / a - b + a - one,
        b / a - one,
    ]
}

/// The scalar bound functions of the selection procedure. l3 and l4 depend
/// on the gamma pair, so they are only available once gammas are chosen.
struct BoundFns {
    alpha: f64,
    beta: f64,
    two1a: f64,
    /// common factor (2 - alpha) 2^{1-alpha} carried by the ell-variants
    co: f64,
}

impl BoundFns {
    fn new(alpha: f64, beta: f64) -> Self {
        let two1a = 2f64.powf(1.0 - alpha);
        Self {
            alpha,
            beta,
            two1a,
            co: (2.0 - alpha) * two1a,
        }
    }

    fn l1(&self, p: f64) -> f64 {
        self.two1a * p / (p + 1.0 + self.alpha) + (p + self.alpha) / (p + self.alpha + 1.0)
    }

    fn l2(&self, p: f64) -> f64 {
        (p + self.beta) / (p + self.beta + 1.0)
    }

    fn l3(&self, p: f64, lam: f64, gamma1: f64) -> f64 {
        self.two1a * (1.0 + self.alpha) / (p + 1.0 + self.alpha)
            * lam.powf((p + self.alpha + 1.0) / (1.0 + self.alpha))
            + (lam * gamma1).powf(p + self.alpha + 1.0) / (p + self.alpha + 1.0)
    }

    fn l4(&self, p: f64, lam: f64, gamma2: f64) -> f64 {
        (lam * gamma2).powf(p + self.beta + 1.0) / (p + self.beta + 1.0)
    }

    fn ell1(&self, p: f64) -> f64 {
        self.co * self.l1(p)
    }

    fn ell2(&self, p: f64) -> f64 {
        self.co * self.l2(p)
    }

    fn ell3(&self, p: f64, lam: f64, gamma1: f64) -> f64 {
        self.co * self.l3(p, lam, gamma1)
    }

    fn ell4(&self, p: f64, lam: f64, gamma2: f64) -> f64 {
        self.co * self.l4(p, lam, gamma2)
    }
}

/// Strict lower bounds the gamma pair must clear, together with L1.
fn gamma_lower_bounds(alpha: f64, beta: f64, p: &[f64; 4]) -> (f64, f64, f64) {
    let f = BoundFns::new(alpha, beta);
    let l1_cap = f.ell2(p[1]).max(f.ell1(p[2]));
    let boa = beta / alpha;
    let g1 = (f.two1a / (1.0 + alpha) + f.ell1(p[0]) + 2.0 * l1_cap)
        .max(f.two1a * boa / (boa + alpha) + f.ell2(p[2]) + f.ell1(p[3]));
    let g2 = (f.ell2(p[3]) + 2.0 * l1_cap).max(f.ell2(p[0]) + f.ell1(p[1]));
    (g1, g2, l1_cap)
}

/// lambda_1..lambda_4 derived from a chosen gamma pair.
fn lambdas(alpha: f64, beta: f64, gamma1: f64, gamma2: f64) -> [f64; 4] {
    let ia = 1.0 / alpha;
    [
        gamma1.powf(ia),
        gamma1.powf(ia - 1.0) * gamma2 * beta / alpha,
        gamma1 * gamma2.powf(ia - 1.0),
        gamma2.powf(ia) * beta / alpha,
    ]
}

/// Strict lower bounds for the k pair given gammas, together with L2.
fn k_lower_bounds(
    alpha: f64,
    beta: f64,
    p: &[f64; 4],
    gamma1: f64,
    gamma2: f64,
    lam: &[f64; 4],
) -> (f64, f64, f64) {
    let f = BoundFns::new(alpha, beta);
    let boa = beta / alpha;
    let l2_cap = (f.two1a * alpha / (boa + alpha)
        + f.ell4(p[2], lam[2], gamma2)
        + f.ell3(p[3], lam[3], gamma1))
    .max(f.ell4(p[0], lam[0], gamma2) + f.ell3(p[1], lam[1], gamma1))
    .max(f.ell4(p[1], lam[1], gamma2))
    .max(f.ell3(p[2], lam[2], gamma1));
    let k1 = f.two1a * alpha / (alpha + 1.0) + f.ell3(p[0], lam[0], gamma1) + 4.0 * l2_cap;
    let k2 = f.ell4(p[3], lam[3], gamma2) + 4.0 * l2_cap;
    (k1, k2, l2_cap)
}

/// Signed slack of each strict selection inequality (value minus its lower
/// bound); all positive iff the gains are certified.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GainSlacks {
    pub gamma1: f64,
    pub gamma2: f64,
    pub k1: f64,
    pub k2: f64,
}

impl GainSlacks {
    pub fn all_positive(&self) -> bool {
        self.gamma1 > 0.0 && self.gamma2 > 0.0 && self.k1 > 0.0 && self.k2 > 0.0
    }
}

/// Every constant the selection procedure produces, with the slack record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainLedger {
    pub alpha: OddRational,
    pub beta: OddRational,
    /// exact p offsets rendered as "num/den"
    pub p_exact: [String; 4],
    #[serde(skip)]
    pub p: [Ratio<i64>; 4],
    pub l1_cap: f64,
    pub gamma1_lower: f64,
    pub gamma2_lower: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub lambda: [f64; 4],
    pub l2_cap: f64,
    pub k1_lower: f64,
    pub k2_lower: f64,
    pub k1: f64,
    pub k2: f64,
    pub slacks: GainSlacks,
    pub certified: bool,
}

/// Run the complete selection procedure, placing gamma and k at
/// (1 + margin) times their strict lower bounds.
pub fn build_ledger(
    alpha: OddRational,
    beta: OddRational,
    margin: f64,
) -> Result<GainLedger, ControllerError> {
    validate_exponents(alpha, beta)?;
    if !(margin > 0.0) {
        return Err(ControllerError::InvalidConfig(format!(
            "margin must be positive, got {margin}"
        )));
    }
    let p_exact = exponent_offsets(alpha, beta);
    let p = p_exact.map(|r| ratio_to_f64(r));
    let (a, b) = (alpha.value(), beta.value());
    let (g1_lb, g2_lb, l1_cap) = gamma_lower_bounds(a, b, &p);
    let gamma1 = g1_lb * (1.0 + margin);
    let gamma2 = g2_lb * (1.0 + margin);
    let lam = lambdas(a, b, gamma1, gamma2);
    let (k1_lb, k2_lb, l2_cap) = k_lower_bounds(a, b, &p, gamma1, gamma2, &lam);
    let k1 = k1_lb * (1.0 + margin);
    let k2 = k2_lb * (1.0 + margin);
    let slacks = GainSlacks {
        gamma1: gamma1 - g1_lb,
        gamma2: gamma2 - g2_lb,
        k1: k1 - k1_lb,
        k2: k2 - k2_lb,
    };
    Ok(GainLedger {
        alpha,
        beta,
        p_exact: p_exact.map(|r| format!("{}/{}", r.numer(), r.denom())),
        p: p_exact,
        l1_cap,
        gamma1_lower: g1_lb,
        gamma2_lower: g2_lb,
        gamma1,
        gamma2,
        lambda: lam,
        l2_cap,
        k1_lower: k1_lb,
        k2_lower: k2_lb,
        k1,
        k2,
        slacks,
        certified: slacks.all_positive(),
    })
}

/// Evaluate the selection inequalities for externally supplied gains.
pub fn check_gains(
    alpha: OddRational,
    beta: OddRational,
    gamma1: f64,
    gamma2: f64,
    k1: f64,
    k2: f64,
) -> Result<GainLedger, ControllerError> {
    validate_exponents(alpha, beta)?;
    let p_exact = exponent_offsets(alpha, beta);
    let p = p_exact.map(ratio_to_f64);
    let (a, b) = (alpha.value(), beta.value());
    let (g1_lb, g2_lb, l1_cap) = gamma_lower_bounds(a, b, &p);
    let lam = lambdas(a, b, gamma1, gamma2);
    let (k1_lb, k2_lb, l2_cap) = k_lower_bounds(a, b, &p, gamma1, gamma2, &lam);
    let slacks = GainSlacks {
        gamma1: gamma1 - g1_lb,
        gamma2: gamma2 - g2_lb,
        k1: k1 - k1_lb,
        k2: k2 - k2_lb,
    };
    Ok(GainLedger {
        alpha,
        beta,
        p_exact: p_exact.map(|r| format!("{}/{}", r.numer(), r.denom())),
        p: p_exact,
        l1_cap,
        gamma1_lower: g1_lb,
        gamma2_lower: g2_lb,
        gamma1,
        gamma2,
        lambda: lam,
        l2_cap,
        k1_lower: k1_lb,
        k2_lower: k2_lb,
        k1,
        k2,
        slacks,
        certified: slacks.all_positive(),
    })
}

fn ratio_to_f64(r: Ratio<i64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Gain floors of the reduced finite-time controller (k2 = gamma2 = 0):
/// returns (gamma1 floor, k1 floor as a function of the chosen gamma1).
pub fn finite_time_gain_slacks(
    alpha: OddRational,
    gamma1: f64,
    k1: f64,
) -> Result<GainSlacks, ControllerError> {
    let a = alpha.value();
    if !(a > 0.5 && a < 1.0) {
        return Err(ControllerError::InvalidExponents(format!(
            "alpha = {alpha} must lie in (1/2, 1)"
        )));
    }
    let two1a = 2f64.powf(1.0 - a);
    let g1_lb = two1a / (1.0 + a) + a * (2.0 - a) * two1a / (1.0 + a);
    let k1_lb = gamma1.powf(1.0 + 1.0 / a)
        * (two1a * a / (1.0 + a)
            + (2.0 - a) * two1a / gamma1 * (two1a + gamma1 / (1.0 + a)));
    // gamma2 and k2 are absent from the reduced design; report unbounded
    // slack so only the two live inequalities decide certification
    Ok(GainSlacks {
        gamma1: gamma1 - g1_lb,
        gamma2: f64::INFINITY,
        k1: k1 - k1_lb,
        k2: f64::INFINITY,
    })
}

/// Uncertainty-facing part of the control law: the switching gain kappa and
/// the envelope it dominates. A positive `u1_smooth_radius` replaces the
/// exact switch by a linear boundary layer in zeta of that radius; the
/// domination lemma is stated for the exact switch, so the layer is off by
/// default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustConfig {
    pub kappa: f64,
    pub bounds: UncertaintyBounds,
    pub u1_smooth_radius: f64,
}

impl RobustConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        if !(self.kappa >= 1.0) {
            return Err(ControllerError::InvalidConfig(format!(
                "kappa = {} must be >= 1",
                self.kappa
            )));
        }
        if self.u1_smooth_radius < 0.0 {
            return Err(ControllerError::InvalidConfig(
                "u1_smooth_radius must be nonnegative".into(),
            ));
        }
        self.bounds
            .validate()
            .map_err(|e| ControllerError::InvalidConfig(e.to_string()))?;
        let eps = self.bounds.epsilon();
        if !(eps > 0.0 && eps < 1.0) {
            return Err(ControllerError::InvalidConfig(format!(
                "epsilon = {eps} must lie in (0, 1)"
            )));
        }
        Ok(())
    }

    pub fn epsilon(&self) -> f64 {
        self.bounds.epsilon()
    }

    pub fn m_hat(&self) -> f64 {
        self.bounds.m_hat()
    }
}

/// Backstepping variable
///   epsilon = v_bar^{1/alpha} + (gamma1 q_bar^alpha + gamma2 q_bar^beta)^{1/alpha},
/// all powers sign-preserving and element-wise.
pub fn epsilon_var(
    q_bar: &DVector<f64>,
    v_bar: &DVector<f64>,
    gamma1: f64,
    gamma2: f64,
    alpha: OddRational,
    beta: OddRational,
) -> DVector<f64> {
    let a = alpha.value();
    let inner = gamma1 * sigpow(q_bar, a).expect("alpha > 0")
        + gamma2 * sigpow(q_bar, beta.value()).expect("beta > 0");
    sigpow(v_bar, 1.0 / a).expect("1/alpha > 0") + sigpow(&inner, 1.0 / a).expect("1/alpha > 0")
}

/// Nominal stabilizing term
///   u2 = -k1 eps^{2 alpha - 1} - k2 eps^{beta/alpha + beta + alpha - 2} + E S S eta_i.
/// With k2 = 0 (and gamma2 = 0 upstream) this is the finite-time reduction.
pub fn u2_term(
    eps: &DVector<f64>,
    eta_i: &DVector<f64>,
    k1: f64,
    k2: f64,
    alpha: OddRational,
    beta: OddRational,
    ess: &DMatrix<f64>,
) -> DVector<f64> {
    let a = alpha.ratio();
    let b = beta.ratio();
    let one = Ratio::from_integer(1);
    let two = Ratio::from_integer(2);
    let e1 = ratio_to_f64(two * a - one);
    let mut out = ess * eta_i - k1 * sigpow(eps, e1).expect("2 alpha - 1 > 0");
    if k2 != 0.0 {
        let e2 = ratio_to_f64(b / a + b + a - two);
        out -= k2 * sigpow(eps, e2).expect("exponent > 0");
    }
    out
}

/// zeta = eps^{2 - alpha}, the direction the domination term switches on.
pub fn zeta_var(eps: &DVector<f64>, alpha: OddRational) -> DVector<f64> {
    sigpow(eps, 2.0 - alpha.value()).expect("2 - alpha > 0")
}

/// Robust domination term
///   u1 = -(kappa / (1 - eps)) (zeta/||zeta||) (eps ||u2|| + f(v)),  zeta != 0
/// and 0 at zeta = 0. The magnitude depends on zeta only through its
/// direction. With a positive smoothing radius r the unit vector is
/// replaced by zeta/r inside ||zeta|| < r.
pub fn u1_term(
    zeta: &DVector<f64>,
    u2: &DVector<f64>,
    v_i: &DVector<f64>,
    rc: &RobustConfig,
) -> DVector<f64> {
    let nz = zeta.norm();
    if nz == 0.0 {
        return DVector::zeros(zeta.len());
    }
    let eps = rc.epsilon();
    let mag = rc.kappa / (1.0 - eps) * (eps * u2.norm() + rc.bounds.f_of_v(v_i.norm_squared()));
    let denom = if rc.u1_smooth_radius > 0.0 && nz < rc.u1_smooth_radius {
        rc.u1_smooth_radius
    } else {
        nz
    };
    zeta * (-mag / denom)
}

/// tau = M_hat (u1 + u2) with the scalar nominal inertia.
pub fn torque(u1: &DVector<f64>, u2: &DVector<f64>, rc: &RobustConfig) -> DVector<f64> {
    rc.m_hat() * (u1 + u2)
}

/// zeta^T Z with Z = u1 + (M^{-1} M_hat - I)(u1 + u2) + F evaluated on the
/// true plant; the domination lemma asserts this is never positive. The
/// exact switch is used regardless of any smoothing radius, matching the
/// lemma's hypotheses.
pub fn domination_slack(
    q: &Vector2<f64>,
    v: &Vector2<f64>,
    eps: &DVector<f64>,
    u2: &DVector<f64>,
    params: &ManipulatorParams,
    rc: &RobustConfig,
    alpha: OddRational,
) -> f64 {
    let zeta = zeta_var(eps, alpha);
    let exact = RobustConfig {
        u1_smooth_radius: 0.0,
        ..*rc
    };
    let u1 = u1_term(&zeta, u2, &DVector::from_column_slice(v.as_slice()), &exact);
    let m = params.inertia(q);
    let cqd = params.coriolis(q, v) * v;
    let g = params.gravity_torque(q);
    let f_true = -m.lu().solve(&(cqd + g)).expect("inertia invertible");
    let u_sum = Vector2::new(u1[0] + u2[0], u1[1] + u2[1]);
    let m_inv_mhat_usum = m.lu().solve(&(rc.m_hat() * u_sum)).expect("inertia invertible");
    let z0 = m_inv_mhat_usum - u_sum + f_true;
    let z = Vector2::new(u1[0] + z0[0], u1[1] + z0[1]);
    zeta[0] * z[0] + zeta[1] * z[1]
}

/// Which variant of the control law runs: the fixed-time design or its
/// finite-time reduction (k2 = gamma2 = 0, certified against the reduced
/// gain floors).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlMode {
    Fixed,
    Finite,
}

/// Full per-agent control law, assembled once and evaluated every step.
#[derive(Debug, Clone)]
pub struct ControlLaw {
    pub alpha: OddRational,
    pub beta: OddRational,
    pub gamma1: f64,
    pub gamma2: f64,
    pub k1: f64,
    pub k2: f64,
    pub rc: RobustConfig,
    /// E S S, the feedforward map applied to the local estimate
    pub ess: DMatrix<f64>,
}

impl ControlLaw {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        alpha: OddRational,
        beta: OddRational,
        gamma1: f64,
        gamma2: f64,
        k1: f64,
        k2: f64,
        mode: ControlMode,
        rc: RobustConfig,
        e: &DMatrix<f64>,
        s: &DMatrix<f64>,
        allow_uncertified: bool,
    ) -> Result<Self, ControllerError> {
        validate_exponents(alpha, beta)?;
        rc.validate()?;
        let (gamma2, k2) = match mode {
            ControlMode::Fixed => (gamma2, k2),
            ControlMode::Finite => {
                if gamma2 != 0.0 || k2 != 0.0 {
                    return Err(ControllerError::InvalidConfig(
                        "finite mode requires gamma2 = 0 and k2 = 0".into(),
                    ));
                }
                (0.0, 0.0)
            }
        };
        let slacks = match mode {
            ControlMode::Fixed => {
                check_gains(alpha, beta, gamma1, gamma2, k1, k2)?.slacks
            }
            ControlMode::Finite => finite_time_gain_slacks(alpha, gamma1, k1)?,
        };
        if !slacks.all_positive() && !allow_uncertified {
            return Err(ControllerError::UncertifiedGains {
                gamma1: slacks.gamma1,
                gamma2: slacks.gamma2,
                k1: slacks.k1,
                k2: slacks.k2,
            });
        }
        Ok(Self {
            alpha,
            beta,
            gamma1,
            gamma2,
            k1,
            k2,
            rc,
            ess: e * s * s,
        })
    }

    /// Torque for one agent from its local quantities only: its own state,
    /// its own estimate, and its own observer derivative.
    pub fn tau(
        &self,
        q: &DVector<f64>,
        v: &DVector<f64>,
        eta_i: &DVector<f64>,
        eta_i_dot: &DVector<f64>,
        e: &DMatrix<f64>,
    ) -> DVector<f64> {
        let q_bar = q - e * eta_i;
        let v_bar = v - e * eta_i_dot;
        let eps = epsilon_var(&q_bar, &v_bar, self.gamma1, self.gamma2, self.alpha, self.beta);
        let u2 = u2_term(&eps, eta_i, self.k1, self.k2, self.alpha, self.beta, &self.ess);
        let zeta = zeta_var(&eps, self.alpha);
        let u1 = u1_term(&zeta, &u2, v, &self.rc);
        torque(&u1, &u2, &self.rc)
    }
}
