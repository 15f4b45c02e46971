//! Independent reference solutions: Gaussian closed forms for driver-free
//! and constant-driver problems, and a brute-force recombining binomial tree
//! for anything one-dimensional.
//!
//! These never share code with the Monte Carlo solver; they exist to catch
//! its mistakes.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::problem::{GeneratorSpec, ProblemSpec, TerminalSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TrigKind {
    Cos,
    Sin,
}

/// (Y, Z) for f = 0, xi = trig(W_T), d = k = 1:
///   cos: Y = e^{-(T-t)/2} cos w,  Z = -e^{-(T-t)/2} sin w,
///   sin: Y = e^{-(T-t)/2} sin w,  Z =  e^{-(T-t)/2} cos w.
pub fn heat_kernel_oracle(t: f64, w: f64, horizon: f64, kind: TrigKind) -> (f64, f64) {
    let scale = (-(horizon - t) / 2.0).exp();
    match kind {
        TrigKind::Cos => (scale * w.cos(), -scale * w.sin()),
        TrigKind::Sin => (scale * w.sin(), scale * w.cos()),
    }
}

/// (Y, Z) for f = c constant, d = k = 1: the measure change shifts the
/// terminal state by -c (T - t), so
///   Y(t, w) = e^{-(T-t)/2} trig(w - c (T - t)) and Z is its w-derivative.
pub fn constant_drift_oracle(t: f64, w: f64, horizon: f64, c: f64, kind: TrigKind) -> (f64, f64) {
    let tau = horizon - t;
    let scale = (-tau / 2.0).exp();
    let arg = w - c * tau;
    match kind {
        TrigKind::Cos => (scale * arg.cos(), -scale * arg.sin()),
        TrigKind::Sin => (scale * arg.sin(), scale * arg.cos()),
    }
}

/// Full backward-induction lattice for d = k = 1.
#[derive(Debug, Clone)]
pub struct TreeSolution {
    pub y0: f64,
    pub z0: f64,
    pub n_steps: usize,
    /// y[i] has i + 1 nodes at level i (time i * dt).
    pub y: Vec<Vec<f64>>,
    /// z[i] has i + 1 nodes, defined for i < n_steps.
    pub z: Vec<Vec<f64>>,
}

const TREE_MAX_INNER: usize = 50;
const TREE_INNER_TOL: f64 = 1e-12;
const TREE_DAMPING: f64 = 0.5;

/// Recombining binomial tree with +-sqrt(dt) moves. Each node solves the
/// implicit equation y = (y_up + y_down)/2 - dt * z * f(y, z) with
/// z = (y_up - y_down) / (2 sqrt(dt)) by damped fixed-point iteration; z is
/// constant within a node, so only the y argument of f iterates.
pub fn tree_oracle(spec: &ProblemSpec, n_steps: usize) -> Result<TreeSolution> {
    spec.validate()?;
    if spec.d != 1 || spec.k != 1 {
        return Err(Error::Config("tree oracle needs d = k = 1".into()));
    }
    if n_steps == 0 {
        return Err(Error::Config("tree oracle needs n_steps >= 1".into()));
    }
    let dt = spec.horizon / n_steps as f64;
    let sqrt_dt = dt.sqrt();

    let mut y = vec![Vec::new(); n_steps + 1];
    let mut z = vec![Vec::new(); n_steps];

    // Terminal layer: node j at level i sits at state (2j - i) sqrt(dt).
    y[n_steps] = (0..=n_steps)
        .map(|j| {
            let w = (2.0 * j as f64 - n_steps as f64) * sqrt_dt;
            let mut out = [0.0];
            spec.terminal.evaluate_into(&[w], spec.c1, &mut out);
            out[0]
        })
        .collect();

    let mut f_buf = [0.0];
    for i in (0..n_steps).rev() {
        let next = std::mem::take(&mut y[i + 1]);
        let mut level = vec![0.0; i + 1];
        let mut z_level = vec![0.0; i + 1];
        for j in 0..=i {
            let up = next[j + 1];
            let down = next[j];
            let avg = 0.5 * (up + down);
            let zj = (up - down) / (2.0 * sqrt_dt);
            let mut yj = avg;
            let mut converged = false;
            for _ in 0..TREE_MAX_INNER {
                spec.generator.evaluate_into(&[yj], &[zj], &mut f_buf);
                let proposal = avg - dt * zj * f_buf[0];
                let step = proposal - yj;
                yj += TREE_DAMPING * step;
                if step.abs() <= TREE_INNER_TOL {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(Error::TreeNode {
                    level: i,
                    node: j,
                    iters: TREE_MAX_INNER,
                });
            }
            level[j] = yj;
            z_level[j] = zj;
        }
        y[i + 1] = next;
        y[i] = level;
        z[i] = z_level;
    }

    Ok(TreeSolution {
        y0: y[0][0],
        z0: z[0][0],
        n_steps,
        y,
        z,
    })
}

/// Closed-form oracle matching a problem, when one exists.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum ClosedFormOracle {
    HeatKernel { kind: TrigKind, scale: f64 },
    ConstantDrift { kind: TrigKind, scale: f64, c: f64 },
}

impl ClosedFormOracle {
    pub fn name(&self) -> &'static str {
        match self {
            ClosedFormOracle::HeatKernel { kind: TrigKind::Cos, .. } => "heat-kernel-cos",
            ClosedFormOracle::HeatKernel { kind: TrigKind::Sin, .. } => "heat-kernel-sin",
            ClosedFormOracle::ConstantDrift { kind: TrigKind::Cos, .. } => "constant-drift-cos",
            ClosedFormOracle::ConstantDrift { kind: TrigKind::Sin, .. } => "constant-drift-sin",
        }
    }

    pub fn evaluate(&self, t: f64, w: f64, horizon: f64) -> (f64, f64) {
        match self {
            ClosedFormOracle::HeatKernel { kind, scale } => {
                let (y, z) = heat_kernel_oracle(t, w, horizon, *kind);
                (scale * y, scale * z)
            }
            ClosedFormOracle::ConstantDrift { kind, scale, c } => {
                let (y, z) = constant_drift_oracle(t, w, horizon, *c, *kind);
                (scale * y, scale * z)
            }
        }
    }
}

/// Look for a registered closed form for this problem: d = k = 1, trig
/// terminal, zero or constant generator.
pub fn detect_closed_form(spec: &ProblemSpec) -> Option<ClosedFormOracle> {
    if spec.d != 1 || spec.k != 1 {
        return None;
    }
    let (kind, scale) = match &spec.terminal {
        TerminalSpec::CosineOfFirstCoordinate { scale } => (TrigKind::Cos, *scale),
        TerminalSpec::SineOfFirstCoordinate { scale } => (TrigKind::Sin, *scale),
        _ => return None,
    };
    match &spec.generator {
        GeneratorSpec::Zero => Some(ClosedFormOracle::HeatKernel { kind, scale }),
        GeneratorSpec::Constant { c } => Some(ClosedFormOracle::ConstantDrift {
            kind,
            scale,
            c: c[0],
        }),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos_spec(generator: GeneratorSpec, c2: f64, c3: f64, c4: f64) -> ProblemSpec {
        ProblemSpec {
            d: 1,
            k: 1,
            horizon: 1.0,
            c1: 1.0,
            c2,
            c3,
            c4,
            terminal: TerminalSpec::CosineOfFirstCoordinate { scale: 1.0 },
            generator,
        }
    }

    #[test]
    fn heat_kernel_hand_values() {
        let (y, z) = heat_kernel_oracle(0.0, 0.0, 1.0, TrigKind::Cos);
        assert!((y - 0.606531).abs() < 1e-6);
        assert_eq!(z, -0.0);
        let (y, z) = heat_kernel_oracle(1.0, 0.3, 1.0, TrigKind::Cos);
        assert_eq!(y, 0.3_f64.cos());
        assert_eq!(z, -(0.3_f64.sin()));
        let (y, z) = heat_kernel_oracle(0.0, std::f64::consts::FRAC_PI_2, 1.0, TrigKind::Cos);
        assert!(y.abs() < 1e-16);
        assert!((z + 0.606531).abs() < 1e-6);
    }

    #[test]
    fn constant_drift_reduces_to_heat_kernel_at_zero_drift() {
        for kind in [TrigKind::Cos, TrigKind::Sin] {
            for (t, w) in [(0.0, 0.0), (0.3, -1.2), (0.9, 2.5)] {
                let a = heat_kernel_oracle(t, w, 1.0, kind);
                let b = constant_drift_oracle(t, w, 1.0, 0.0, kind);
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn constant_drift_hand_value() {
        let (y, _) = constant_drift_oracle(0.0, 0.0, 1.0, 1.0, TrigKind::Cos);
        let want = (-0.5_f64).exp() * 1.0_f64.cos();
        assert!((y - want).abs() < 1e-15);
        assert!((y - 0.3277).abs() < 1e-4);
        let (y_t, _) = constant_drift_oracle(1.0, 0.7, 1.0, 1.0, TrigKind::Cos);
        assert_eq!(y_t, 0.7_f64.cos());
    }

    #[test]
    fn tree_converges_to_heat_kernel() {
        let spec = cos_spec(GeneratorSpec::Zero, 0.0, 0.0, 0.0);
        let sol = tree_oracle(&spec, 2000).unwrap();
        let want = (-0.5_f64).exp();
        assert!((sol.y0 - want).abs() <= 0.001, "tree y0 {}", sol.y0);
        // Monotone refinement of the error.
        let mut last = f64::INFINITY;
        for n in [125, 250, 500, 1000, 2000] {
            let err = (tree_oracle(&spec, n).unwrap().y0 - want).abs();
            assert!(err <= last + 1e-12, "error not decreasing at n = {n}");
            last = err;
        }
    }

    #[test]
    fn tree_constant_terminal_is_exact_and_z_free() {
        let spec = ProblemSpec {
            terminal: TerminalSpec::Constant { v: vec![0.5] },
            c1: 0.5,
            ..cos_spec(GeneratorSpec::TanhOfY { c: vec![1.0] }, 1.0, 0.0, 0.0)
        };
        let sol = tree_oracle(&spec, 64).unwrap();
        assert_eq!(sol.y0, 0.5);
        assert!(sol.y.iter().flatten().all(|&v| v == 0.5));
        assert!(sol.z.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn tree_tanh_self_consistency() {
        let spec = cos_spec(GeneratorSpec::TanhOfY { c: vec![1.0] }, 1.0, 0.0, 0.0);
        let a = tree_oracle(&spec, 500).unwrap().y0;
        let b = tree_oracle(&spec, 1000).unwrap().y0;
        assert!((a - b).abs() <= 2e-3, "500 vs 1000: {a} vs {b}");
    }

    #[test]
    fn detect_closed_forms() {
        let spec = cos_spec(GeneratorSpec::Zero, 0.0, 0.0, 0.0);
        assert_eq!(
            detect_closed_form(&spec).map(|o| o.name()),
            Some("heat-kernel-cos")
        );
        let spec2 = cos_spec(GeneratorSpec::Constant { c: vec![1.0] }, 0.0, 0.0, 1.0);
        assert_eq!(
            detect_closed_form(&spec2).map(|o| o.name()),
            Some("constant-drift-cos")
        );
        let spec3 = cos_spec(GeneratorSpec::TanhOfY { c: vec![1.0] }, 1.0, 0.0, 0.0);
        assert!(detect_closed_form(&spec3).is_none());
    }
}
