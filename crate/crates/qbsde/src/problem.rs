//! Problem instances: dY = Z f(Y,Z) dt + Z dW with bounded terminal value.
//!
//! Terminal values and generators are closed finite families rather than
//! user-supplied code, so the declared constants C1..C4 can be audited. The
//! one escape hatch is the `table` generator kind, which carries claimed
//! evaluations and is accepted only by constant validation, never by the
//! solver or the certificate.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{standard_normal, uniform, Stream};

/// Radial clip onto the ball of radius `radius`. Comparison is done on
/// squared norms so values already inside the ball pass through untouched
/// bit-for-bit; after rescaling, the norm is re-checked and nudged down by
/// an ulp at a time until the bound holds exactly (rescaling alone can
/// overshoot by one rounding step).
pub fn clip_to_ball(x: &mut [f64], radius: f64) -> bool {
    let norm_sq: f64 = x.iter().map(|v| v * v).sum();
    let r_sq = radius * radius;
    if norm_sq <= r_sq {
        return false;
    }
    let scale = radius / norm_sq.sqrt();
    for v in x.iter_mut() {
        *v *= scale;
    }
    loop {
        let nsq: f64 = x.iter().map(|v| v * v).sum();
        if nsq <= r_sq {
            return true;
        }
        for v in x.iter_mut() {
            *v *= 1.0 - f64::EPSILON;
        }
    }
}

/// Terminal value as a measurable function of the terminal Brownian state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TerminalSpec {
    /// Constant vector in R^d.
    Constant { v: Vec<f64> },
    /// (scale * cos(w_1), 0, ..., 0).
    CosineOfFirstCoordinate { scale: f64 },
    /// (scale * sin(w_1), 0, ..., 0).
    SineOfFirstCoordinate { scale: f64 },
    /// Component i is a univariate polynomial in w_1 with the listed
    /// coefficients (ascending degree); the vector is radially clipped.
    ClippedPolynomial {
        coefficients: Vec<Vec<f64>>,
        clip_radius: f64,
    },
}

impl TerminalSpec {
    /// Evaluate xi(w_T) into `out` (length d). The result is clipped to the
    /// ball of radius `c1`, so the bound holds exactly for every input.
    pub fn evaluate_into(&self, w_terminal: &[f64], c1: f64, out: &mut [f64]) {
        out.fill(0.0);
        match self {
            TerminalSpec::Constant { v } => out.copy_from_slice(v),
            TerminalSpec::CosineOfFirstCoordinate { scale } => {
                out[0] = scale * w_terminal[0].cos();
            }
            TerminalSpec::SineOfFirstCoordinate { scale } => {
                out[0] = scale * w_terminal[0].sin();
            }
            TerminalSpec::ClippedPolynomial {
                coefficients,
                clip_radius,
            } => {
                let w = w_terminal[0];
                for (i, poly) in coefficients.iter().enumerate() {
                    let mut acc = 0.0;
                    for &c in poly.iter().rev() {
                        acc = acc * w + c;
                    }
                    out[i] = acc;
                }
                clip_to_ball(out, *clip_radius);
            }
        }
        clip_to_ball(out, c1);
    }

    pub fn evaluate(&self, w_terminal: &[f64], d: usize, c1: f64) -> Result<Vec<f64>> {
        if w_terminal.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "evaluate_terminal",
                detail: format!("w_T = {w_terminal:?}"),
            });
        }
        let mut out = vec![0.0; d];
        self.evaluate_into(w_terminal, c1, &mut out);
        Ok(out)
    }

    fn validate(&self, d: usize, c1: f64) -> Result<()> {
        match self {
            TerminalSpec::Constant { v } => {
                if v.len() != d {
                    return Err(Error::InvalidProblem(format!(
                        "terminal constant has {} components, d = {d}",
                        v.len()
                    )));
                }
            }
            TerminalSpec::CosineOfFirstCoordinate { scale }
            | TerminalSpec::SineOfFirstCoordinate { scale } => {
                if !scale.is_finite() || scale.abs() > c1 {
                    return Err(Error::InvalidProblem(format!(
                        "terminal scale {scale} exceeds C1 = {c1}"
                    )));
                }
            }
            TerminalSpec::ClippedPolynomial {
                coefficients,
                clip_radius,
            } => {
                if coefficients.len() != d {
                    return Err(Error::InvalidProblem(format!(
                        "terminal polynomial has {} components, d = {d}",
                        coefficients.len()
                    )));
                }
                if !clip_radius.is_finite() || *clip_radius < 0.0 || *clip_radius > c1 {
                    return Err(Error::InvalidProblem(format!(
                        "clip radius {clip_radius} outside [0, C1 = {c1}]"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One claimed generator evaluation for the validate-only table kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub y: Vec<f64>,
    pub z: Vec<Vec<f64>>,
    pub f: Vec<f64>,
}

/// Generator f: R^d x R^{d x k} -> R^k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GeneratorSpec {
    Zero,
    Constant { c: Vec<f64> },
    /// f(y, z) = c * tanh(y_1).
    TanhOfY { c: Vec<f64> },
    /// f(y, z) = clip(A y + B vec(z)); A is k x d, B is k x (d*k) acting on
    /// the row-major flattening of z.
    ClippedLinear {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        clip_radius: f64,
    },
    /// Claimed evaluations; accepted by `validate_constants` only.
    Table { rows: Vec<TableRow> },
}

impl GeneratorSpec {
    /// Hot-path evaluation; inputs are assumed finite (the public
    /// [`GeneratorSpec::evaluate`] checks them).
    pub fn evaluate_into(&self, y: &[f64], z: &[f64], out: &mut [f64]) {
        match self {
            GeneratorSpec::Zero => out.fill(0.0),
            GeneratorSpec::Constant { c } => out.copy_from_slice(c),
            GeneratorSpec::TanhOfY { c } => {
                let t = y[0].tanh();
                for (o, ci) in out.iter_mut().zip(c) {
                    *o = ci * t;
                }
            }
            GeneratorSpec::ClippedLinear { a, b, clip_radius } => {
                for (j, out_j) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (ai, yi) in a[j].iter().zip(y) {
                        acc += ai * yi;
                    }
                    for (bi, zi) in b[j].iter().zip(z) {
                        acc += bi * zi;
                    }
                    *out_j = acc;
                }
                clip_to_ball(out, *clip_radius);
            }
            GeneratorSpec::Table { .. } => out.fill(f64::NAN),
        }
    }

    /// Evaluate f(y, z); `z` is d x k. Table generators are rejected here:
    /// they exist only to be validated.
    pub fn evaluate(&self, y: &[f64], z: ArrayView2<'_, f64>, k: usize) -> Result<Vec<f64>> {
        if matches!(self, GeneratorSpec::Table { .. }) {
            return Err(Error::InvalidProblem(
                "table generators are validate-only".into(),
            ));
        }
        if y.iter().any(|v| !v.is_finite()) || z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "evaluate_generator",
                detail: format!("y = {y:?}"),
            });
        }
        let z_flat: Vec<f64> = z.iter().copied().collect();
        let mut out = vec![0.0; k];
        self.evaluate_into(y, &z_flat, &mut out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "evaluate_generator",
                detail: "generator produced a non-finite value".into(),
            });
        }
        Ok(out)
    }

    /// The tightest constants (C2, C3, C4) that dominate this generator;
    /// these are what `validate_constants` certifies.
    pub fn documented_constants(&self) -> (f64, f64, f64) {
        fn frob(m: &[Vec<f64>]) -> f64 {
            m.iter()
                .flat_map(|r| r.iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        }
        match self {
            GeneratorSpec::Zero => (0.0, 0.0, 0.0),
            GeneratorSpec::Constant { c } => {
                (0.0, 0.0, c.iter().map(|v| v * v).sum::<f64>().sqrt())
            }
            GeneratorSpec::TanhOfY { c } => {
                (c.iter().map(|v| v * v).sum::<f64>().sqrt(), 0.0, 0.0)
            }
            GeneratorSpec::ClippedLinear { a, b, .. } => (frob(a), frob(b), 0.0),
            GeneratorSpec::Table { .. } => (f64::NAN, f64::NAN, f64::NAN),
        }
    }

    fn validate(&self, d: usize, k: usize) -> Result<()> {
        let check = |name: &str, m: &[Vec<f64>], rows: usize, cols: usize| -> Result<()> {
            if m.len() != rows || m.iter().any(|r| r.len() != cols) {
                return Err(Error::InvalidProblem(format!(
                    "generator matrix {name} must be {rows} x {cols}"
                )));
            }
            Ok(())
        };
        match self {
            GeneratorSpec::Zero => {}
            GeneratorSpec::Constant { c } | GeneratorSpec::TanhOfY { c } => {
                if c.len() != k {
                    return Err(Error::InvalidProblem(format!(
                        "generator vector has {} components, k = {k}",
                        c.len()
                    )));
                }
            }
            GeneratorSpec::ClippedLinear { a, b, clip_radius } => {
                check("a", a, k, d)?;
                check("b", b, k, d * k)?;
                if !clip_radius.is_finite() || *clip_radius < 0.0 {
                    return Err(Error::InvalidProblem("negative generator clip".into()));
                }
            }
            GeneratorSpec::Table { rows } => {
                for row in rows {
                    if row.y.len() != d || row.f.len() != k || row.z.len() != d
                        || row.z.iter().any(|r| r.len() != k)
                    {
                        return Err(Error::InvalidProblem(
                            "table row dimensions do not match (d, k)".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// A full problem instance. JSON field names are part of the external
/// contract: {"d","k","T","C1","C2","C3","C4","terminal","generator"}.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub d: usize,
    pub k: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "C1")]
    pub c1: f64,
    #[serde(rename = "C2")]
    pub c2: f64,
    #[serde(rename = "C3")]
    pub c3: f64,
    #[serde(rename = "C4")]
    pub c4: f64,
    pub terminal: TerminalSpec,
    pub generator: GeneratorSpec,
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d < 1 || self.k < 1 {
            return Err(Error::InvalidProblem("d and k must be >= 1".into()));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::InvalidProblem("T must be positive".into()));
        }
        for (name, v) in [
            ("C1", self.c1),
            ("C2", self.c2),
            ("C3", self.c3),
            ("C4", self.c4),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidProblem(format!("{name} must be >= 0")));
            }
        }
        self.terminal.validate(self.d, self.c1)?;
        self.generator.validate(self.d, self.k)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ProblemSpec = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("problem specs always serialize")
    }
}

/// Worst observed witnesses from empirical constant validation.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub n_samples: usize,
    pub seed: u64,
    pub max_lipschitz_ratio: f64,
    pub lipschitz_pass: bool,
    pub lipschitz_witness: Option<(Vec<f64>, Vec<f64>)>,
    pub max_growth_excess: f64,
    pub growth_pass: bool,
    pub growth_witness: Option<Vec<f64>>,
    pub pass: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Sample y uniformly in the ball of radius 2*C1 (the region the solver
/// visits, with margin) and z with standard normal entries.
fn sample_point(spec: &ProblemSpec, seed: u64, idx: u64) -> (Vec<f64>, Vec<f64>) {
    let d = spec.d;
    let k = spec.k;
    let mut y = vec![0.0; d];
    for (j, yj) in y.iter_mut().enumerate() {
        *yj = standard_normal(seed, Stream::ValidationY, idx, 0, j as u64);
    }
    let g = norm(&y);
    let u = uniform(seed, Stream::ValidationY, idx, 1, 0);
    let radius = 2.0 * spec.c1 * u.powf(1.0 / d as f64);
    let scale = if g > 0.0 { radius / g } else { 0.0 };
    for yj in y.iter_mut() {
        *yj *= scale;
    }
    let mut z = vec![0.0; d * k];
    for (j, zj) in z.iter_mut().enumerate() {
        *zj = standard_normal(seed, Stream::ValidationZ, idx, 0, j as u64);
    }
    (y, z)
}

/// Empirically check the Lipschitz and linear-growth assumptions against the
/// declared C2, C3, C4 with zero tolerance: the declared constants must
/// dominate every sample.
pub fn validate_constants(spec: &ProblemSpec, n_samples: usize, seed: u64) -> Result<ValidationReport> {
    if n_samples < 2 {
        return Err(Error::Config("validation needs n_samples >= 2".into()));
    }
    let k = spec.k;
    let (c2, c3, c4) = (spec.c2, spec.c3, spec.c4);

    let points: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = match &spec.generator {
        GeneratorSpec::Table { rows } => rows
            .iter()
            .map(|r| {
                let z: Vec<f64> = r.z.iter().flat_map(|row| row.iter().copied()).collect();
                (r.y.clone(), z, r.f.clone())
            })
            .collect(),
        g => (0..n_samples as u64)
            .map(|i| {
                let (y, z) = sample_point(spec, seed, i);
                let mut f = vec![0.0; k];
                g.evaluate_into(&y, &z, &mut f);
                (y, z, f)
            })
            .collect(),
    };
    if points.len() < 2 {
        return Err(Error::Config("table must have at least 2 rows".into()));
    }

    let mut max_ratio = 0.0_f64;
    let mut lip_witness = None;
    let n = points.len();
    for i in 0..n - 1 {
        // Pair each sample with the next one; independent draws, full cover.
        let (y1, z1, f1) = &points[i];
        let (y2, z2, f2) = &points[i + 1];
        let df: Vec<f64> = f1.iter().zip(f2).map(|(a, b)| a - b).collect();
        let dy: Vec<f64> = y1.iter().zip(y2).map(|(a, b)| a - b).collect();
        let dz: Vec<f64> = z1.iter().zip(z2).map(|(a, b)| a - b).collect();
        let denom = c2 * norm(&dy) + c3 * norm(&dz);
        let num = norm(&df);
        let ratio = if num == 0.0 {
            0.0
        } else if denom == 0.0 {
            f64::INFINITY
        } else {
            num / denom
        };
        if ratio > max_ratio {
            max_ratio = ratio;
            lip_witness = Some((y1.clone(), y2.clone()));
        }
    }

    let mut max_excess = f64::NEG_INFINITY;
    let mut growth_witness = None;
    for (y, z, f) in &points {
        let excess = norm(f) - (c2 * norm(y) + c3 * norm(z) + c4);
        if excess > max_excess {
            max_excess = excess;
            growth_witness = Some(y.clone());
        }
    }

    let lipschitz_pass = max_ratio <= 1.0;
    let growth_pass = max_excess <= 0.0;
    Ok(ValidationReport {
        n_samples: n,
        seed,
        max_lipschitz_ratio: max_ratio,
        lipschitz_pass,
        lipschitz_witness: if lipschitz_pass { None } else { lip_witness },
        max_growth_excess: max_excess,
        growth_pass,
        growth_witness: if growth_pass { None } else { growth_witness },
        pass: lipschitz_pass && growth_pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn base_spec(generator: GeneratorSpec, c2: f64, c3: f64, c4: f64) -> ProblemSpec {
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
    fn zero_generator_is_zero() {
        let g = GeneratorSpec::Zero;
        let z = Array2::zeros((1, 1));
        assert_eq!(g.evaluate(&[0.3], z.view(), 1).unwrap(), vec![0.0]);
    }

    #[test]
    fn constant_generator_is_constant() {
        let g = GeneratorSpec::Constant { c: vec![1.0] };
        let z = Array2::from_elem((1, 1), 5.0);
        assert_eq!(g.evaluate(&[-2.0], z.view(), 1).unwrap(), vec![1.0]);
    }

    #[test]
    fn tanh_generator_matches_hand_value() {
        let g = GeneratorSpec::TanhOfY { c: vec![1.0] };
        let z = Array2::from_elem((1, 1), 9.0);
        let f = g.evaluate(&[0.5], z.view(), 1).unwrap();
        assert!((f[0] - 0.462117).abs() < 1e-6, "f = {}", f[0]);
    }

    #[test]
    fn generator_rejects_non_finite_input() {
        let g = GeneratorSpec::Zero;
        let z = Array2::zeros((1, 1));
        assert!(g.evaluate(&[f64::NAN], z.view(), 1).is_err());
    }

    #[test]
    fn constant_terminal_evaluates_verbatim() {
        let t = TerminalSpec::Constant { v: vec![0.3, -0.4] };
        let got = t.evaluate(&[7.0], 2, 0.6).unwrap();
        assert_eq!(got, vec![0.3, -0.4]);
    }

    #[test]
    fn cosine_terminal_at_origin() {
        let t = TerminalSpec::CosineOfFirstCoordinate { scale: 1.0 };
        let got = t.evaluate(&[0.0, 3.0], 3, 1.0).unwrap();
        assert_eq!(got, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn polynomial_terminal_clips_radially() {
        // Raw value (2.5, 0) has norm 2.5; clip radius 1 rescales to norm 1.
        let t = TerminalSpec::ClippedPolynomial {
            coefficients: vec![vec![2.5], vec![0.0]],
            clip_radius: 1.0,
        };
        let got = t.evaluate(&[0.0], 2, 1.0).unwrap();
        let n = norm(&got);
        assert!((n - 1.0).abs() < 1e-15, "norm {n}");
    }

    #[test]
    fn terminal_bound_holds_exactly_over_many_states() {
        let c1 = 0.7;
        let kinds = [
            TerminalSpec::CosineOfFirstCoordinate { scale: 0.7 },
            TerminalSpec::SineOfFirstCoordinate { scale: 0.7 },
            TerminalSpec::ClippedPolynomial {
                coefficients: vec![vec![0.0, 1.0, 0.5], vec![0.3]],
                clip_radius: 0.7,
            },
            TerminalSpec::Constant { v: vec![0.7, 0.0] },
        ];
        let mut out = [0.0; 2];
        for kind in &kinds {
            for i in 0..1_000_000u64 {
                let w = [3.0 * standard_normal(11, Stream::ValidationY, i, 9, 0)];
                kind.evaluate_into(&w, c1, &mut out);
                let nsq: f64 = out.iter().map(|v| v * v).sum();
                assert!(nsq <= c1 * c1, "norm^2 {nsq} exceeds C1^2 at state {w:?}");
            }
        }
    }

    #[test]
    fn validate_zero_generator_with_zero_constants() {
        let spec = base_spec(GeneratorSpec::Zero, 0.0, 0.0, 0.0);
        let r = validate_constants(&spec, 1000, 5).unwrap();
        assert!(r.pass);
        assert_eq!(r.max_lipschitz_ratio, 0.0);
    }

    #[test]
    fn validate_constant_generator_growth() {
        let spec = base_spec(GeneratorSpec::Constant { c: vec![1.0] }, 0.0, 0.0, 1.0);
        let r = validate_constants(&spec, 1000, 5).unwrap();
        assert!(r.pass, "excess {}", r.max_growth_excess);
    }

    #[test]
    fn validate_catches_understated_lipschitz_constant() {
        // tanh has unit slope at the origin, so C2 = 0.5 must fail with a
        // witness pair near y = 0. Small C1 keeps samples near the origin.
        let mut spec = base_spec(GeneratorSpec::TanhOfY { c: vec![1.0] }, 0.5, 0.0, 0.0);
        spec.c1 = 0.05;
        let r = validate_constants(&spec, 5000, 5).unwrap();
        assert!(!r.lipschitz_pass);
        assert!(r.lipschitz_witness.is_some());
    }

    #[test]
    fn documented_constants_pass_at_several_seeds() {
        let gens = [
            GeneratorSpec::Zero,
            GeneratorSpec::Constant { c: vec![0.4, -0.3] },
            GeneratorSpec::TanhOfY { c: vec![1.0, 2.0] },
            GeneratorSpec::ClippedLinear {
                a: vec![vec![0.5, 0.1], vec![0.0, -0.2]],
                b: vec![vec![0.1; 4], vec![0.05; 4]],
                clip_radius: 3.0,
            },
        ];
        for g in gens {
            let (c2, c3, c4) = g.documented_constants();
            let spec = ProblemSpec {
                d: 2,
                k: 2,
                horizon: 1.0,
                c1: 1.0,
                c2,
                c3,
                c4,
                terminal: TerminalSpec::Constant { v: vec![1.0, 0.0] },
                generator: g,
            };
            for seed in [0, 1, 99] {
                let r = validate_constants(&spec, 4000, seed).unwrap();
                assert!(
                    r.pass,
                    "generator {:?} failed: ratio {} excess {}",
                    spec.generator, r.max_lipschitz_ratio, r.max_growth_excess
                );
            }
        }
    }

    #[test]
    fn table_generator_is_validate_only() {
        let rows = vec![
            TableRow { y: vec![0.0], z: vec![vec![0.0]], f: vec![0.0] },
            TableRow { y: vec![1.0], z: vec![vec![0.0]], f: vec![0.5] },
        ];
        let g = GeneratorSpec::Table { rows };
        let z = Array2::zeros((1, 1));
        assert!(g.evaluate(&[0.0], z.view(), 1).is_err());
        let spec = base_spec(g, 0.5, 0.0, 0.0);
        let r = validate_constants(&spec, 10, 0).unwrap();
        assert!(r.pass);
    }

    #[test]
    fn json_round_trip_uses_contract_field_names() {
        let spec = base_spec(GeneratorSpec::Zero, 0.0, 0.0, 0.0);
        let text = spec.to_json();
        for field in ["\"d\"", "\"k\"", "\"T\"", "\"C1\"", "\"C2\"", "\"C3\"", "\"C4\"",
                      "\"terminal\"", "\"generator\""] {
            assert!(text.contains(field), "missing {field} in {text}");
        }
        let back = ProblemSpec::from_json(&text).unwrap();
        assert_eq!(back.terminal, spec.terminal);
    }

    #[test]
    fn missing_field_error_names_the_field() {
        let text = r#"{"d":1,"k":1,"T":1.0,"C1":1.0,"C2":0.0,"C4":0.0,
                       "terminal":{"kind":"constant","v":[1.0]},
                       "generator":{"kind":"zero"}}"#;
        let err = ProblemSpec::from_json(text).unwrap_err();
        assert!(err.to_string().contains("C3"), "got: {err}");
    }
}
