//! Constant ledger and existence/uniqueness gates.
//!
//! All quantities that involve e^{K C1^2} are handled in natural-log space
//! through the identity e^{K C1^2} = (C1 C3)^{-2}; plain arithmetic overflows
//! for inputs that actually satisfy the existence gate (ln C6 runs near 800
//! there). The three window-size terms are compared against lambda in log
//! space for the same reason.
//!
//! Notation used throughout: p = C1*C3, L = -2 ln p, P = C1*C2 + C4,
//! m(dT) = 1/L + P^2 dT / (2(L - 1)). Then
//!   K        = L / C1^2,
//!   beta     = C1^2 C3 / 2,
//!   alpha    = P C1^2 / (2(L - 1)),
//!   ln C6    = L + 2 ln C1 + ln m(dT),
//!   R        = 2 C6,
//! and the window terms of the delta search are
//!   t1 = 2 P sqrt(dT),
//!   t2 = 2 C2 sqrt(dT) sqrt(R)  with ln t2 = 1.5 ln 2 + ln C2 + ln C1
//!                                         + (ln dT + L + ln m)/2,
//!   t3 = 2 C3 sqrt(R)           with ln t3 = 1.5 ln 2 + (ln m)/2.
//! The C1, C3 factors cancel out of t3 entirely, which is what makes the
//! search overflow-free.

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::problem::ProblemSpec;

const ALPHA_FLOOR: f64 = 1e-300;
const LN2: f64 = std::f64::consts::LN_2;

/// Serialize possibly-infinite log-space values as "inf" / "-inf" strings so
/// they survive JSON (which has no infinities) without becoming nulls.
fn ser_xreal<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

fn ser_opt_xreal<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        None => s.serialize_none(),
        Some(x) => ser_xreal(x, s),
    }
}

/// Every constant from the existence construction plus the gate verdicts.
/// Fields suffixed `_log` hold natural logarithms and may be infinite.
#[derive(Debug, Clone, Serialize)]
pub struct ConstantLedger {
    #[serde(rename = "K", serialize_with = "ser_xreal")]
    pub k_const: f64,
    /// K * C1^2 = -2 ln(C1 C3), the exponent of e^{K C1^2}.
    #[serde(serialize_with = "ser_xreal")]
    pub e_kc1sq_log: f64,
    pub beta: f64,
    pub alpha: f64,
    #[serde(serialize_with = "ser_opt_xreal")]
    pub c6_log: Option<f64>,
    #[serde(serialize_with = "ser_opt_xreal")]
    pub r_log: Option<f64>,
    pub delta: Option<f64>,
    pub lambda: Option<f64>,
    pub windows: Option<u32>,
    #[serde(serialize_with = "ser_opt_xreal")]
    pub tilde_r_log: Option<f64>,
    /// 4 lambda / (1 - 5 lambda), below 1 exactly when lambda < 1/9.
    pub contraction_factor: Option<f64>,
    /// 2 (C1 C2 + C4) sqrt(delta T).
    pub term_drift: Option<f64>,
    /// 2 C2 sqrt(delta T) sqrt(R).
    #[serde(serialize_with = "ser_opt_xreal")]
    pub term_y: Option<f64>,
    /// 2 C3 sqrt(R).
    #[serde(serialize_with = "ser_opt_xreal")]
    pub term_z: Option<f64>,
    #[serde(serialize_with = "ser_opt_xreal")]
    pub binding_term: Option<f64>,
    /// C1 C3 < e^{-1/2}.
    pub prop_gate: bool,
    /// C1 C3 < e^{-324}, the horizon-free sufficient condition.
    pub e324_gate: bool,
    pub existence_gate: bool,
    pub uniqueness_gate: bool,
    pub forced_delta: bool,
}

impl ConstantLedger {
    /// C6 as a plain float; +inf when the construction degenerates (C3 = 0).
    pub fn c6(&self) -> Option<f64> {
        self.c6_log.map(f64::exp)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ledger always serializes")
    }
}

/// Search-grid configuration. The lambda grid is geometric on
/// [lambda_min, lambda_max] (inside (0, 1/9)); the delta grid is dyadic
/// {m / denominator : 1 <= m < denominator}.
#[derive(Debug, Clone)]
pub struct CertifyOptions {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub lambda_points: usize,
    pub delta_denominator: u32,
    pub forced_delta: Option<f64>,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        CertifyOptions {
            lambda_min: 1e-4,
            lambda_max: 0.1,
            lambda_points: 64,
            delta_denominator: 1024,
            forced_delta: None,
        }
    }
}

impl CertifyOptions {
    pub fn lambda_grid(&self) -> Vec<f64> {
        let n = self.lambda_points.max(1);
        (0..n)
            .map(|i| {
                if n == 1 {
                    self.lambda_max
                } else {
                    let frac = (n - 1 - i) as f64 / (n - 1) as f64;
                    self.lambda_max * (self.lambda_min / self.lambda_max).powf(frac)
                }
            })
            .collect()
    }
}

#[inline]
fn ln_product(c1: f64, c3: f64) -> f64 {
    // ln(C1 C3) without underflow: the product itself can denormalize to 0
    // for inputs the gates must still rank correctly.
    c1.ln() + c3.ln()
}

/// K = -(2 / C1^2) ln(C1 C3); requires the proposition gate C1 C3 < e^{-1/2}.
pub fn compute_k_constant(c1: f64, c3: f64) -> Result<f64> {
    if !(c1 > 0.0) || !(c3 > 0.0) {
        return Err(Error::Config("compute_K needs C1 > 0 and C3 > 0".into()));
    }
    let lnp = ln_product(c1, c3);
    if !(lnp < -0.5) {
        return Err(Error::PropositionGate { product: c1 * c3 });
    }
    let big_l = -2.0 * lnp;
    // K - C3^2 e^{K C1^2} > 0 reduces in log space to ln L > 0.
    debug_assert!(big_l.ln() > 0.0);
    Ok(big_l / (c1 * c1))
}

/// beta = 1 / (2 C3 e^{K C1^2}) = C1^2 C3 / 2; the second form is the
/// log-safe identity.
pub fn compute_beta(c1: f64, c3: f64, _k_const: f64) -> f64 {
    c1 * c1 * c3 / 2.0
}

/// Minimal alpha satisfying 2K - C3/beta - (C1 C2 + C4)/alpha >= 0, i.e.
/// alpha = (C1 C2 + C4) / (2K - C3/beta). When the numerator is zero a tiny
/// floor is returned; alpha only ever appears multiplied by C1 C2 + C4, so
/// the floor is inert.
pub fn compute_alpha(c1: f64, c2: f64, c3: f64, c4: f64, k_const: f64, beta: f64) -> Result<f64> {
    let denom = 2.0 * k_const - c3 / beta;
    if !(denom > 0.0) {
        return Err(Error::PropositionGate { product: c1 * c3 });
    }
    let p = c1 * c2 + c4;
    let alpha = p / denom;
    Ok(if alpha > 0.0 { alpha } else { ALPHA_FLOOR })
}

/// ln C6 with C6 = e^{K C1^2} [ 1/K + alpha (C1 C2 + C4) dT ]. Strictly
/// increasing in dT.
pub fn compute_c6_log(
    c1: f64,
    c2: f64,
    _c3: f64,
    c4: f64,
    alpha: f64,
    k_const: f64,
    delta_t: f64,
) -> f64 {
    let p = c1 * c2 + c4;
    let drift_part = if p == 0.0 { 0.0 } else { alpha * p * delta_t };
    k_const * c1 * c1 + (1.0 / k_const + drift_part).ln()
}

/// The three window-size terms as (t1, ln t2, ln t3) for one delta, using
/// the scale-free forms from the module header. Infinite values encode the
/// degenerate boundaries (C1 = 0 or C3 = 0) by their exact limits.
fn window_terms_log(c1: f64, c2: f64, c3: f64, c4: f64, delta_t: f64) -> (f64, f64, f64) {
    let p = c1 * c2 + c4;
    let t1 = 2.0 * p * delta_t.sqrt();

    let ln_m = if c1 == 0.0 || c3 == 0.0 {
        f64::NEG_INFINITY
    } else {
        let big_l = -2.0 * ln_product(c1, c3);
        (1.0 / big_l + p * p * delta_t / (2.0 * (big_l - 1.0))).ln()
    };
    let ln_t3 = if c3 == 0.0 {
        f64::NEG_INFINITY
    } else {
        1.5 * LN2 + 0.5 * ln_m
    };
    let ln_t2 = if c2 == 0.0 || c1 == 0.0 {
        f64::NEG_INFINITY
    } else if c3 == 0.0 {
        // R diverges with the canonical K choice as C3 -> 0, so the
        // y-difference term cannot be made small.
        f64::INFINITY
    } else {
        let big_l = -2.0 * ln_product(c1, c3);
        1.5 * LN2 + c2.ln() + c1.ln() + 0.5 * (delta_t.ln() + big_l + ln_m)
    };
    (t1, ln_t2, ln_t3)
}

/// The delta-independent floor of the z-term: 2 C3 sqrt(2 C6(0+)) =
/// 2 / sqrt(-ln(C1 C3)). Feasibility at any delta requires this to be
/// strictly below lambda.
pub fn z_term_limit(c1: f64, c3: f64) -> f64 {
    if c1 == 0.0 || c3 == 0.0 {
        return 0.0;
    }
    let big_l = -2.0 * ln_product(c1, c3);
    if big_l <= 0.0 {
        return f64::INFINITY;
    }
    (1.5 * LN2 - 0.5 * big_l.ln()).exp()
}

fn delta_feasible(c1: f64, c2: f64, c3: f64, c4: f64, delta_t: f64, lambda: f64) -> bool {
    let (t1, ln_t2, ln_t3) = window_terms_log(c1, c2, c3, c4, delta_t);
    let ln_lambda = lambda.ln();
    t1 <= lambda && ln_t2 <= ln_lambda && ln_t3 <= ln_lambda
}

/// Largest dyadic delta = m/denominator with
/// max(t1, t2, t3)(delta) <= lambda; windows = ceil(1/delta). All three
/// terms are nondecreasing in delta, so the scan from the top is exact.
pub fn search_delta(
    c1: f64,
    c2: f64,
    c3: f64,
    c4: f64,
    lambda: f64,
    horizon: f64,
    denominator: u32,
) -> Result<(f64, u32)> {
    let limit = z_term_limit(c1, c3);
    if !(limit < lambda) {
        return Err(Error::DeltaInfeasible { lambda, limit });
    }
    for m in (1..denominator).rev() {
        let delta = m as f64 / denominator as f64;
        if delta_feasible(c1, c2, c3, c4, delta * horizon, lambda) {
            let windows = (denominator + m - 1) / m;
            return Ok((delta, windows));
        }
    }
    Err(Error::DeltaInfeasible { lambda, limit })
}

fn windows_for(delta: f64) -> u32 {
    // ceil(1/delta) with a one-part-in-1e9 backoff so forced deltas like
    // 1/3 do not round up through floating point.
    ((1.0 / delta) - 1e-9).ceil().max(1.0) as u32
}

/// Run the full certificate. Deterministic in (spec, options).
pub fn certify_with(spec: &ProblemSpec, opts: &CertifyOptions) -> Result<ConstantLedger> {
    spec.validate()?;
    if let Some(delta) = opts.forced_delta {
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(Error::Config(format!("forced delta {delta} outside (0, 1]")));
        }
    }
    let (c1, c2, c3, c4) = (spec.c1, spec.c2, spec.c3, spec.c4);
    let horizon = spec.horizon;
    let lnp = ln_product(c1, c3);
    let prop_gate = lnp < -0.5;
    let e324_gate = lnp < -324.0;

    // Headline constants. The degenerate boundaries C1 = 0 and C3 = 0 get
    // their exact limiting values so the ledger never holds NaNs.
    let (k_const, e_kc1sq_log, beta, alpha) = if c1 > 0.0 && c3 > 0.0 {
        if prop_gate {
            let k = compute_k_constant(c1, c3)?;
            let beta = compute_beta(c1, c3, k);
            let alpha = compute_alpha(c1, c2, c3, c4, k, beta)?;
            (k, -2.0 * lnp, beta, alpha)
        } else {
            (f64::NAN, -2.0 * lnp, f64::NAN, f64::NAN)
        }
    } else {
        (f64::INFINITY, f64::INFINITY, 0.0, ALPHA_FLOOR)
    };

    // Existence: scan the lambda grid, each with its largest feasible delta,
    // and keep the pair minimizing sqrt(windows) * lambda (the uniqueness
    // score); ties resolve to the smaller lambda.
    let mut best: Option<(f64, f64, u32, f64)> = None; // (lambda, delta, windows, score)
    if prop_gate {
        for lambda in opts.lambda_grid() {
            if let Ok((delta, windows)) =
                search_delta(c1, c2, c3, c4, lambda, horizon, opts.delta_denominator)
            {
                let score = (windows as f64).sqrt() * lambda;
                let better = match &best {
                    None => true,
                    Some((bl, _, _, bs)) => score < *bs || (score == *bs && lambda < *bl),
                };
                if better {
                    best = Some((lambda, delta, windows, score));
                }
            }
        }
    }
    let existence_gate = best.is_some();

    let selected_lambda = best.as_ref().map(|b| b.0);
    let delta = opts.forced_delta.or(best.as_ref().map(|b| b.1));
    let windows = match (opts.forced_delta, &best) {
        (Some(fd), _) => Some(windows_for(fd)),
        (None, Some((_, _, w, _))) => Some(*w),
        (None, None) => None,
    };

    // Delta-dependent block.
    let mut c6_log = None;
    let mut r_log = None;
    let mut tilde_r_log = None;
    let mut term_drift = None;
    let mut term_y = None;
    let mut term_z = None;
    let mut binding_term = None;
    if let (Some(dl), Some(w)) = (delta, windows) {
        let dt = dl * horizon;
        let log_c6 = if c1 == 0.0 {
            f64::NEG_INFINITY
        } else if c3 == 0.0 {
            f64::INFINITY
        } else if prop_gate {
            let (_, _, ln_t3) = window_terms_log(c1, c2, c3, c4, dt);
            // Recover ln C6 from ln t3 = 1.5 ln2 + (ln m)/2 and
            // ln C6 = L + 2 ln C1 + ln m.
            let ln_m = 2.0 * (ln_t3 - 1.5 * LN2);
            -2.0 * lnp + 2.0 * c1.ln() + ln_m
        } else {
            f64::NAN
        };
        if !log_c6.is_nan() {
            c6_log = Some(log_c6);
            r_log = Some(LN2 + log_c6);
            tilde_r_log = Some((w as f64).ln() + LN2 + log_c6);
            let (t1, ln_t2, ln_t3) = window_terms_log(c1, c2, c3, c4, dt);
            term_drift = Some(t1);
            term_y = Some(ln_t2.exp());
            term_z = Some(ln_t3.exp());
            binding_term = Some(t1.max(ln_t2.exp()).max(ln_t3.exp()));
        }
    }

    let uniqueness_gate = match (selected_lambda, windows) {
        (Some(l), Some(w)) => existence_gate && (w as f64).sqrt() * l < 1.0 / 9.0,
        _ => false,
    };
    let contraction_factor = selected_lambda.map(|l| 4.0 * l / (1.0 - 5.0 * l));

    Ok(ConstantLedger {
        k_const,
        e_kc1sq_log,
        beta,
        alpha,
        c6_log,
        r_log,
        delta,
        lambda: selected_lambda,
        windows,
        tilde_r_log,
        contraction_factor,
        term_drift,
        term_y,
        term_z,
        binding_term,
        prop_gate,
        e324_gate,
        existence_gate,
        uniqueness_gate,
        forced_delta: opts.forced_delta.is_some(),
    })
}

pub fn certify(spec: &ProblemSpec) -> Result<ConstantLedger> {
    certify_with(spec, &CertifyOptions::default())
}
