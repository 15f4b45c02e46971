//! The fixed-point map Phi(Y, Z) = (Y~, Z~) on one time window, its
//! iteration, and the contraction probe.
//!
//! Girsanov mode follows the measure-change construction directly: driver
//! values from the current iterate feed a stochastic-exponential weight per
//! path, Y~ at each grid time is the weighted regression of the terminal
//! value on the state (the discrete conditional expectation under the new
//! measure), and Z~ comes from weighted conditional covariation against the
//! drift-corrected increments dW + f dt.
//!
//! Frozen-driver mode discretizes the same window equation backwards under
//! the original measure: with the driver frozen at the current iterate,
//!   y_i = fit[ y_{i+1} - dt * z~_i f(Y_i, Z_i) ],  z~_i = covariation fit,
//! the sign coming from integrating dY~ = Z~ f dt + Z~ dW backwards from
//! the terminal slice. The two modes are independent discretizations of one
//! operator and must agree to statistical tolerance; that agreement is one
//! of the standing cross-checks.

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, ArrayView2};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::paths::{stochastic_exponential_weights, PathEnsemble};
use crate::problem::{GeneratorSpec, ProblemSpec};
use crate::regression::{
    bmo_norm_sq_from_table, build_design_table, extract_z_design, fit_design, y_sup_distance,
    z_diff_norm_sq_table, z_norm_sq_table, Basis, BasisSpec, DesignTable, NormEstimate,
    ProcessApprox, TerminalMap,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhiMode {
    Girsanov,
    FrozenDriver,
}

impl PhiMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PhiMode::Girsanov => "girsanov",
            PhiMode::FrozenDriver => "frozen-driver",
        }
    }
}

impl std::str::FromStr for PhiMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "girsanov" => Ok(PhiMode::Girsanov),
            "frozen-driver" => Ok(PhiMode::FrozenDriver),
            other => Err(Error::Config(format!(
                "unknown mode {other:?}; expected girsanov or frozen-driver"
            ))),
        }
    }
}

/// Side information from one application of Phi.
#[derive(Debug, Clone, Serialize)]
pub struct PhiStats {
    pub weight_mean: f64,
    pub weight_se: f64,
    pub clip_events: u64,
    pub clip_warning: bool,
    /// Start-slice value and its standard error (meaningful when the window
    /// begins at time 0, where the state is degenerate).
    pub y0: Vec<f64>,
    pub y0_se: Vec<f64>,
}

/// Driver values f(Y_i, Z_i) of the current iterate at the left endpoint of
/// every step, [n, steps, k].
fn driver_values(
    current: &ProcessApprox,
    spec: &ProblemSpec,
    ensemble: &PathEnsemble,
    designs: &DesignTable,
) -> Result<Array3<f64>> {
    if matches!(spec.generator, GeneratorSpec::Table { .. }) {
        return Err(Error::InvalidProblem(
            "table generators are validate-only".into(),
        ));
    }
    let n = ensemble.n_paths;
    let steps = ensemble.grid.steps;
    let k = ensemble.k;
    let mut out = Array3::zeros((n, steps, k));
    let mut f_buf = vec![0.0; k];
    for i in 0..steps {
        let y = current.eval_y_design(i, &designs.per_step[i]);
        let z = current.eval_z_design(i, &designs.per_step[i]);
        for p in 0..n {
            spec.generator.evaluate_into(
                y.row(p).as_slice().expect("row-major"),
                z.row(p).as_slice().expect("row-major"),
                &mut f_buf,
            );
            for (c, v) in f_buf.iter().enumerate() {
                out[[p, i, c]] = *v;
            }
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: "phi_step",
            detail: "driver values".into(),
        });
    }
    Ok(out)
}

/// Weighted-mean start value with a ratio-estimator standard error. The
/// weight total is accumulated in the same sequential order as the
/// numerators so that bitwise-constant targets yield the constant exactly.
fn start_slice_stats(targets: ArrayView2<'_, f64>, weights: Option<&Array1<f64>>) -> (Vec<f64>, Vec<f64>) {
    let n = targets.nrows();
    let d = targets.ncols();
    let wsum: f64 = weights.map_or(n as f64, |w| w.iter().fold(0.0, |a, b| a + b));
    let mut means = vec![0.0; d];
    for c in 0..d {
        let mut acc = 0.0;
        for p in 0..n {
            let w = weights.map_or(1.0, |ws| ws[p]);
            acc += w * targets[[p, c]];
        }
        means[c] = acc / wsum;
    }
    let mut ses = vec![0.0; d];
    for c in 0..d {
        let mut acc = 0.0;
        for p in 0..n {
            let w = weights.map_or(1.0, |ws| ws[p]);
            let r = w * (targets[[p, c]] - means[c]);
            acc += r * r;
        }
        ses[c] = acc.sqrt() / wsum;
    }
    (means, ses)
}

const CLIP_WARNING_FRACTION: f64 = 0.01;

/// One application of Phi with a prebuilt design table.
pub fn phi_step_with(
    current: &ProcessApprox,
    spec: &ProblemSpec,
    ensemble: &PathEnsemble,
    designs: &DesignTable,
    mode: PhiMode,
) -> Result<(ProcessApprox, PhiStats)> {
    let n = ensemble.n_paths;
    let steps = ensemble.grid.steps;
    let dt = ensemble.dt();
    let d = current.d;
    let k = current.k;

    let drivers = driver_values(current, spec, ensemble, designs)?;
    let xi = current.terminal.evaluate_batch(ensemble.states_at(steps));

    let mut next = ProcessApprox {
        grid: ensemble.grid,
        d,
        k,
        basis: current.basis.clone(),
        y_coeffs: Vec::with_capacity(steps),
        z_coeffs: vec![Array2::zeros((0, 0)); steps],
        z_se: vec![Array2::zeros((0, 0)); steps],
        clip_bound: current.clip_bound,
        terminal: current.terminal.clone(),
    };

    let stats;
    match mode {
        PhiMode::Girsanov => {
            let (weights, clip_events) =
                stochastic_exponential_weights(ensemble, drivers.view())?;
            let (y0, y0_se) = start_slice_stats(xi.view(), Some(&weights));
            let (wmean, wse) = crate::paths::weight_mean_se(&weights);
            stats = PhiStats {
                weight_mean: wmean,
                weight_se: wse,
                clip_events,
                clip_warning: clip_events as f64 > CLIP_WARNING_FRACTION * n as f64,
                y0,
                y0_se,
            };
            // Y~ at every grid time: weighted regression of xi on the state.
            for i in 0..steps {
                let fit = fit_design(&designs.per_step[i], xi.view(), Some(weights.view()))?;
                next.y_coeffs.push(fit.coeffs);
            }
            // Z~ from drift-corrected covariation under the same weights.
            let mut incr_q = Array2::zeros((n, k));
            for i in 0..steps {
                let y_next = if i + 1 == steps {
                    xi.clone()
                } else {
                    next.eval_y_design(i + 1, &designs.per_step[i + 1])
                };
                for p in 0..n {
                    for c in 0..k {
                        incr_q[[p, c]] =
                            ensemble.increments[[p, i, c]] + drivers[[p, i, c]] * dt;
                    }
                }
                let fit = extract_z_design(
                    &designs.per_step[i],
                    y_next.view(),
                    incr_q.view(),
                    dt,
                    Some(weights.view()),
                )?;
                next.z_coeffs[i] = fit.coeffs;
                next.z_se[i] = fit.se;
            }
        }
        PhiMode::FrozenDriver => {
            let mut y_next = xi.clone();
            let mut y_coeffs_rev = Vec::with_capacity(steps);
            let mut targets = Array2::zeros((n, d));
            let mut start_targets = None;
            for i in (0..steps).rev() {
                let zfit = extract_z_design(
                    &designs.per_step[i],
                    y_next.view(),
                    ensemble.increments.index_axis(ndarray::Axis(1), i),
                    dt,
                    None,
                )?;
                let z_vals = designs.per_step[i].dot(&zfit.coeffs);
                for p in 0..n {
                    for r in 0..d {
                        let mut drift = 0.0;
                        for c in 0..k {
                            drift += z_vals[[p, r * k + c]] * drivers[[p, i, c]];
                        }
                        targets[[p, r]] = y_next[[p, r]] - dt * drift;
                    }
                }
                let yfit = fit_design(&designs.per_step[i], targets.view(), None)?;
                next.z_coeffs[i] = zfit.coeffs;
                next.z_se[i] = zfit.se;
                if i == 0 {
                    start_targets = Some(targets.clone());
                }
                // Evaluate the just-fitted slice (clipped) for the next
                // backward step.
                y_next = designs.per_step[i].dot(&yfit.coeffs);
                for mut row in y_next.rows_mut() {
                    crate::problem::clip_to_ball(
                        row.as_slice_mut().expect("row-major"),
                        next.clip_bound,
                    );
                }
                y_coeffs_rev.push(yfit.coeffs);
            }
            y_coeffs_rev.reverse();
            next.y_coeffs = y_coeffs_rev;
            let (y0, y0_se) = start_slice_stats(
                start_targets.expect("steps >= 1").view(),
                None,
            );
            stats = PhiStats {
                weight_mean: 1.0,
                weight_se: 0.0,
                clip_events: 0,
                clip_warning: false,
                y0,
                y0_se,
            };
        }
    }
    Ok((next, stats))
}

/// One application of Phi, building the design table on the fly.
pub fn phi_step(
    current: &ProcessApprox,
    spec: &ProblemSpec,
    ensemble: &PathEnsemble,
    mode: PhiMode,
) -> Result<(ProcessApprox, PhiStats)> {
    let designs = build_design_table(&current.basis, ensemble);
    phi_step_with(current, spec, ensemble, &designs, mode)
}

/// Initial iterate: Y constant at the clipped ensemble mean of the terminal
/// value, Z = 0. Lies in the bounded ball crossed with any BMO ball.
pub fn initial_iterate(
    spec: &ProblemSpec,
    ensemble: &PathEnsemble,
    basis: Basis,
    terminal: Arc<TerminalMap>,
) -> ProcessApprox {
    let xi = terminal.evaluate_batch(ensemble.states_at(ensemble.grid.steps));
    let n = ensemble.n_paths as f64;
    let mut mean: Vec<f64> = (0..spec.d).map(|c| xi.column(c).sum() / n).collect();
    crate::problem::clip_to_ball(&mut mean, spec.c1);
    ProcessApprox::constant(
        ensemble.grid,
        spec.d,
        spec.k,
        basis,
        terminal,
        spec.c1,
        &mean,
    )
}

/// Per-iteration convergence record. `ratio` is the successive-distance
/// ratio (NaN on the first iteration).
#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub dist_y: f64,
    pub dist_z: f64,
    pub ratio: f64,
    pub clip_events: u64,
    pub weight_mean: f64,
    pub weight_se: f64,
    pub z_bmo_sq: f64,
    pub z_bmo_sq_se: f64,
    pub prop_bound_ok: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceTrace {
    pub records: Vec<IterationRecord>,
    pub converged: bool,
    /// Distances failed to decrease for three consecutive iterations.
    pub no_contraction: bool,
    pub y0: Vec<f64>,
    pub y0_se: Vec<f64>,
    pub clip_total: u64,
}

impl ConvergenceTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,dist_y,dist_z,ratio,clip_events\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.iter, r.dist_y, r.dist_z, r.ratio, r.clip_events
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct IterateParams {
    pub mode: PhiMode,
    pub max_iter: usize,
    pub tol: f64,
    pub basis: BasisSpec,
    /// ln C6 from the ledger, when available: enables the per-iteration
    /// norm-bound flag.
    pub c6_log: Option<f64>,
}

impl Default for IterateParams {
    fn default() -> Self {
        IterateParams {
            mode: PhiMode::Girsanov,
            max_iter: 25,
            tol: 1e-6,
            basis: BasisSpec::default(),
            c6_log: None,
        }
    }
}

/// True iff the after-norm obeys the window bound
/// |Z~|_B^2 <= C6 + |Z|_B^2 / 2 within statistical tolerance.
pub fn check_prop_bound(z_before: &NormEstimate, z_after: &NormEstimate, c6_log: f64) -> bool {
    let c6 = c6_log.exp();
    let tol = 3.0 * (z_after.se * z_after.se + 0.25 * z_before.se * z_before.se).sqrt() + 1e-9;
    z_after.value <= c6 + 0.5 * z_before.value + tol
}

/// Iterate Phi from the canonical initial iterate until the successive
/// distance dist_y + dist_z falls below `tol`, the iteration budget runs
/// out, or distances stop decreasing for three consecutive iterations (the
/// "no empirical contraction" verdict, which is a result, not an error).
pub fn iterate(
    spec: &ProblemSpec,
    ensemble: &PathEnsemble,
    terminal: Arc<TerminalMap>,
    params: &IterateParams,
) -> Result<(ProcessApprox, ConvergenceTrace)> {
    if params.max_iter < 1 {
        return Err(Error::Config("max_iter must be >= 1".into()));
    }
    if !(params.tol > 0.0) {
        return Err(Error::Config("tol must be > 0".into()));
    }
    let basis = Basis::new(params.basis, spec.k, Some(terminal.clone()))?;
    let designs = build_design_table(&basis, ensemble);
    let mut current = initial_iterate(spec, ensemble, basis, terminal);
    let mut z_before = NormEstimate {
        value: 0.0,
        se: 0.0,
        argmax_step: 0,
    };

    let mut trace = ConvergenceTrace {
        records: Vec::new(),
        converged: false,
        no_contraction: false,
        y0: vec![0.0; spec.d],
        y0_se: vec![0.0; spec.d],
        clip_total: 0,
    };
    let mut prev_total = f64::NAN;
    let mut non_decreasing_run = 0;

    for it in 1..=params.max_iter {
        let (next, stats) = phi_step_with(&current, spec, ensemble, &designs, params.mode)?;
        let dist_y = y_sup_distance(&next, &current, ensemble, &designs);
        let diff = z_diff_norm_sq_table(&next, &current, ensemble, &designs);
        let dist_z = bmo_norm_sq_from_table(&diff, ensemble.dt(), &designs)?
            .value
            .sqrt();
        let z_table = z_norm_sq_table(&next, ensemble, &designs);
        let z_after = bmo_norm_sq_from_table(&z_table, ensemble.dt(), &designs)?;
        let total = dist_y + dist_z;
        let ratio = total / prev_total; // NaN on the first iteration
        trace.records.push(IterationRecord {
            iter: it,
            dist_y,
            dist_z,
            ratio,
            clip_events: stats.clip_events,
            weight_mean: stats.weight_mean,
            weight_se: stats.weight_se,
            z_bmo_sq: z_after.value,
            z_bmo_sq_se: z_after.se,
            prop_bound_ok: params
                .c6_log
                .map(|c6| check_prop_bound(&z_before, &z_after, c6)),
        });
        trace.clip_total += stats.clip_events;
        trace.y0 = stats.y0;
        trace.y0_se = stats.y0_se;
        current = next;
        z_before = z_after;

        if total <= params.tol {
            trace.converged = true;
            break;
        }
        if !prev_total.is_nan() && total >= prev_total {
            non_decreasing_run += 1;
            if non_decreasing_run >= 3 {
                trace.no_contraction = true;
                break;
            }
        } else {
            non_decreasing_run = 0;
        }
        prev_total = total;
    }
    Ok((current, trace))
}

/// Apply Phi to two starts and return the contraction ratio
/// (|dY~| + |dZ~|) / (|dY| + |dZ|); identical starts give 0 by convention.
pub fn contraction_probe(
    spec: &ProblemSpec,
    ensemble: &PathEnsemble,
    start_a: &ProcessApprox,
    start_b: &ProcessApprox,
    mode: PhiMode,
) -> Result<f64> {
    let designs = build_design_table(&start_a.basis, ensemble);
    let dy = y_sup_distance(start_a, start_b, ensemble, &designs);
    let dz_table = z_diff_norm_sq_table(start_a, start_b, ensemble, &designs);
    let dz = bmo_norm_sq_from_table(&dz_table, ensemble.dt(), &designs)?
        .value
        .sqrt();
    let before = dy + dz;
    if before == 0.0 {
        return Ok(0.0);
    }
    let (image_a, _) = phi_step_with(start_a, spec, ensemble, &designs, mode)?;
    let (image_b, _) = phi_step_with(start_b, spec, ensemble, &designs, mode)?;
    let dy_after = y_sup_distance(&image_a, &image_b, ensemble, &designs);
    let dz_after_table = z_diff_norm_sq_table(&image_a, &image_b, ensemble, &designs);
    let dz_after = bmo_norm_sq_from_table(&dz_after_table, ensemble.dt(), &designs)?
        .value
        .sqrt();
    Ok((dy_after + dz_after) / before)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::{generate_ensemble, TimeGrid};
    use crate::problem::TerminalSpec;

    fn cos_problem(generator: GeneratorSpec, c2: f64, c3: f64, c4: f64) -> ProblemSpec {
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

    fn setup(
        spec: &ProblemSpec,
        n_paths: usize,
        steps: usize,
        seed: u64,
    ) -> (PathEnsemble, Arc<TerminalMap>) {
        let grid = TimeGrid::new(0.0, spec.horizon, steps).unwrap();
        let e = generate_ensemble(grid, n_paths, spec.k, seed).unwrap();
        let term = Arc::new(TerminalMap::Spec {
            spec: spec.terminal.clone(),
            d: spec.d,
            clip: spec.c1,
        });
        (e, term)
    }

    #[test]
    fn constant_terminal_maps_to_itself_exactly() {
        // E_Q[v | F_t] = v under every measure; the fit short-circuits to
        // the exact constant, making dist_y identically zero.
        let spec = ProblemSpec {
            terminal: TerminalSpec::Constant { v: vec![0.5] },
            c1: 0.5,
            ..cos_problem(GeneratorSpec::Constant { c: vec![1.0] }, 0.0, 0.0, 1.0)
        };
        let (e, term) = setup(&spec, 2_000, 10, 3);
        let basis = Basis::new(BasisSpec::default(), 1, Some(term.clone())).unwrap();
        let start = initial_iterate(&spec, &e, basis, term);
        assert_eq!(start.y_coeffs[0][[0, 0]], 0.5);
        let (next, _) = phi_step(&start, &spec, &e, PhiMode::Girsanov).unwrap();
        let designs = build_design_table(&next.basis, &e);
        assert_eq!(y_sup_distance(&next, &start, &e, &designs), 0.0);
        // Z~ coefficients vanish to statistical tolerance.
        for i in 0..10 {
            for j in 0..next.basis.size() {
                let c = next.z_coeffs[i][[j, 0]];
                let se = next.z_se[i][[j, 0]];
                assert!(c.abs() <= 3.0 * se + 1e-12, "z coef {c} se {se}");
            }
        }
    }

    #[test]
    fn zero_driver_phi_recovers_heat_kernel_start_value() {
        let spec = cos_problem(GeneratorSpec::Zero, 0.0, 0.0, 0.0);
        let (e, term) = setup(&spec, 20_000, 20, 7);
        let basis = Basis::new(BasisSpec::default(), 1, Some(term.clone())).unwrap();
        let start = initial_iterate(&spec, &e, basis, term);
        let (_, stats) = phi_step(&start, &spec, &e, PhiMode::Girsanov).unwrap();
        let want = (-0.5_f64).exp();
        assert!(
            (stats.y0[0] - want).abs() <= 3.0 * stats.y0_se[0],
            "y0 {} se {}",
            stats.y0[0],
            stats.y0_se[0]
        );
    }

    #[test]
    fn constant_driver_phi_matches_shifted_heat_kernel() {
        let spec = cos_problem(GeneratorSpec::Constant { c: vec![1.0] }, 0.0, 0.0, 1.0);
        let (e, term) = setup(&spec, 40_000, 25, 11);
        let basis = Basis::new(BasisSpec::default(), 1, Some(term.clone())).unwrap();
        let start = initial_iterate(&spec, &e, basis, term);
        let want = (-0.5_f64).exp() * 1.0_f64.cos();
        for mode in [PhiMode::Girsanov, PhiMode::FrozenDriver] {
            let (_, stats) = phi_step(&start, &spec, &e, mode).unwrap();
            let tol = (3.0 * stats.y0_se[0]).max(0.01);
            assert!(
                (stats.y0[0] - want).abs() <= tol,
                "{mode:?}: y0 {} want {want} tol {tol}",
                stats.y0[0]
            );
        }
    }

    #[test]
    fn zero_driver_iteration_converges_immediately() {
        // Phi does not depend on the iterate when f = 0, so the second
        // application reproduces the first bit-for-bit.
        let spec = cos_problem(GeneratorSpec::Zero, 0.0, 0.0, 0.0);
        let (e, term) = setup(&spec, 4_000, 10, 13);
        let params = IterateParams::default();
        let (_, trace) = iterate(&spec, &e, term, &params).unwrap();
        assert!(trace.converged);
        assert_eq!(trace.records.len(), 2);
        assert_eq!(trace.records[1].dist_y, 0.0);
        assert_eq!(trace.records[1].dist_z, 0.0);
    }

    #[test]
    fn constant_terminal_iteration_flags_exact_y_distance() {
        let spec = ProblemSpec {
            terminal: TerminalSpec::Constant { v: vec![0.5] },
            c1: 0.5,
            ..cos_problem(GeneratorSpec::TanhOfY { c: vec![1.0] }, 1.0, 0.0, 0.0)
        };
        let (e, term) = setup(&spec, 2_000, 8, 17);
        let (_, trace) = iterate(&spec, &e, term, &IterateParams::default()).unwrap();
        assert!(trace.converged);
        assert_eq!(trace.records[0].dist_y, 0.0);
    }

    #[test]
    fn tanh_problem_contracts_empirically() {
        let spec = cos_problem(GeneratorSpec::TanhOfY { c: vec![1.0] }, 1.0, 0.0, 0.0);
        let (e, term) = setup(&spec, 10_000, 20, 19);
        let (_, trace) = iterate(&spec, &e, term, &IterateParams::default()).unwrap();
        assert!(trace.converged, "trace: {:?}", trace.records.len());
        for r in trace.records.iter().skip(1) {
            assert!(
                r.ratio < 1.0,
                "distance ratio {} at iter {} not contracting",
                r.ratio,
                r.iter
            );
        }
    }

    #[test]
    fn modes_agree_on_the_tanh_problem() {
        let spec = cos_problem(GeneratorSpec::TanhOfY { c: vec![1.0] }, 1.0, 0.0, 0.0);
        let (e, term) = setup(&spec, 20_000, 25, 23);
        let mut y0 = Vec::new();
        let mut se = Vec::new();
        for mode in [PhiMode::Girsanov, PhiMode::FrozenDriver] {
            let params = IterateParams {
                mode,
                ..IterateParams::default()
            };
            let (_, trace) = iterate(&spec, &e, term.clone(), &params).unwrap();
            assert!(trace.converged);
            y0.push(trace.y0[0]);
            se.push(trace.y0_se[0]);
        }
        let tol = (6.0 * (se[0] * se[0] + se[1] * se[1]).sqrt()).max(0.02);
        assert!(
            (y0[0] - y0[1]).abs() <= tol,
            "girsanov {} vs frozen {} tol {tol}",
            y0[0],
            y0[1]
        );
    }

    #[test]
    fn terminal_slice_is_exact_every_step() {
        let spec = cos_problem(GeneratorSpec::TanhOfY { c: vec![1.0] }, 1.0, 0.0, 0.0);
        let (e, term) = setup(&spec, 2_000, 6, 29);
        let basis = Basis::new(BasisSpec::default(), 1, Some(term.clone())).unwrap();
        let start = initial_iterate(&spec, &e, basis, term.clone());
        let (next, _) = phi_step(&start, &spec, &e, PhiMode::Girsanov).unwrap();
        // Terminal evaluation goes through the exact map, c1-clipped.
        let xi_a = next.eval_y_batch(6, e.states_at(6));
        let xi_b = term.evaluate_batch(e.states_at(6));
        assert_eq!(xi_a, xi_b);
        for p in 0..e.n_paths {
            let nsq: f64 = xi_a.row(p).iter().map(|v| v * v).sum();
            assert!(nsq <= spec.c1 * spec.c1);
        }
    }

    #[test]
    fn boundedness_holds_after_every_phi_application() {
        let spec = cos_problem(GeneratorSpec::TanhOfY { c: vec![1.5] }, 1.5, 0.0, 0.0);
        let (e, term) = setup(&spec, 3_000, 10, 31);
        let basis = Basis::new(BasisSpec::default(), 1, Some(term.clone())).unwrap();
        let mut current = initial_iterate(&spec, &e, basis, term);
        for _ in 0..3 {
            let (next, _) = phi_step(&current, &spec, &e, PhiMode::FrozenDriver).unwrap();
            for i in 0..10 {
                let y = next.eval_y_batch(i, e.states_at(i));
                for p in 0..e.n_paths {
                    let nsq: f64 = y.row(p).iter().map(|v| v * v).sum();
                    assert!(nsq <= spec.c1 * spec.c1 + 0.0, "unclipped value escaped");
                }
            }
            current = next;
        }
    }

    #[test]
    fn zero_generator_phi_is_idempotent_up_to_noise() {
        let spec = cos_problem(GeneratorSpec::Zero, 0.0, 0.0, 0.0);
        let (e, term) = setup(&spec, 4_000, 10, 37);
        let (_, trace) = iterate(&spec, &e, term, &IterateParams::default()).unwrap();
        // dist between iterates 2 and 3 would also be zero; iterate stops at
        // 2 because the distance is already zero there.
        assert!(trace.records[1].dist_y + trace.records[1].dist_z == 0.0);
    }

    #[test]
    fn probe_returns_zero_for_identical_and_constant_image_starts() {
        let spec = cos_problem(GeneratorSpec::Zero, 0.0, 0.0, 0.0);
        let (e, term) = setup(&spec, 3_000, 8, 41);
        let basis = Basis::new(BasisSpec::default(), 1, Some(term.clone())).unwrap();
        let a = initial_iterate(&spec, &e, basis.clone(), term.clone());
        assert_eq!(contraction_probe(&spec, &e, &a, &a, PhiMode::Girsanov).unwrap(), 0.0);
        // Distinct starts, but f = 0 makes the image independent of them.
        let mut b = a.clone();
        for i in 0..8 {
            b.y_coeffs[i][[0, 0]] = 0.1;
            b.z_coeffs[i][[0, 0]] = 0.2;
        }
        let ratio = contraction_probe(&spec, &e, &a, &b, PhiMode::Girsanov).unwrap();
        assert_eq!(ratio, 0.0, "Phi image must not depend on the start");
    }

    #[test]
    fn trace_csv_has_the_contract_columns() {
        let spec = cos_problem(GeneratorSpec::Zero, 0.0, 0.0, 0.0);
        let (e, term) = setup(&spec, 2_000, 5, 43);
        let (_, trace) = iterate(&spec, &e, term, &IterateParams::default()).unwrap();
        let csv = trace.to_csv();
        assert!(csv.starts_with("iter,dist_y,dist_z,ratio,clip_events\n"));
        assert_eq!(csv.lines().count(), trace.records.len() + 1);
    }
}
