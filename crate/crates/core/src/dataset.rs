//! Supervised data `(x, y)`, the input measure, and the measuring function.
//!
//! The input measure is realized as an empirical uniform measure over the
//! stored samples, so every expectation over inputs becomes an arithmetic
//! mean over the dataset.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::activation::ActivationFamily;
use crate::continuum::{forward_oie, DepthGrid, ParamPathEnsemble};
use crate::error::{Error, Result};
use crate::init::InitConfig;

/// Affine measuring function `g(z) = w . z + c` with `|w| > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasuringFunction {
    w: Vec<f64>,
    c: f64,
}

impl MeasuringFunction {
    pub fn new(w: Vec<f64>, c: f64) -> Result<Self> {
        if w.is_empty() || w.iter().any(|v| !v.is_finite()) || !c.is_finite() {
            return Err(Error::contract("measuring function needs finite w and c"));
        }
        let norm2: f64 = w.iter().map(|v| v * v).sum();
        if norm2 <= 0.0 {
            return Err(Error::contract("measuring function needs |w| > 0"));
        }
        Ok(MeasuringFunction { w, c })
    }

    /// `w = (1, ..., 1) / sqrt(d)`, `c = 0`.
    pub fn normalized_sum(d: usize) -> Result<Self> {
        let s = (d as f64).sqrt();
        Self::new(vec![1.0 / s; d], 0.0)
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn eval(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.w.len() {
            return Err(Error::contract(format!(
                "g expects dimension {}, got {}",
                self.w.len(),
                z.len()
            )));
        }
        Ok(self.eval_unchecked(z))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, z: &[f64]) -> f64 {
        self.w.iter().zip(z).fold(self.c, |acc, (w, x)| acc + w * x)
    }

    /// Gradient of `g`, constant in `z`.
    pub fn grad(&self) -> &[f64] {
        &self.w
    }
}

/// How labels are produced by [`generate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    /// `y = c` for every sample.
    Constant(f64),
    /// `y(x) = sin(pi * sum_j x_j / sqrt(d))`.
    Trig,
    /// Labels produced by a hidden ResNet drawn from the seed: a t-constant
    /// 8-particle ensemble in the difference family with tau = 1, read out by
    /// the normalized-sum measuring function at depth 1.
    TeacherNet,
}

const TEACHER_WIDTH: usize = 8;
const TEACHER_DEPTH_INTERVALS: usize = 64;

/// Finite sample set with all inputs in a ball around the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    d: usize,
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl Dataset {
    pub fn new(d: usize, xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if d == 0 || ys.is_empty() || xs.len() != ys.len() * d {
            return Err(Error::contract("dataset needs n >= 1 samples of dimension d"));
        }
        if xs.iter().chain(ys.iter()).any(|v| !v.is_finite()) {
            return Err(Error::contract("dataset entries must be finite"));
        }
        Ok(Dataset { d, xs, ys })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction requires n >= 1
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.xs[i * self.d..(i + 1) * self.d]
    }

    pub fn y(&self, i: usize) -> f64 {
        self.ys[i]
    }

    /// Tightest ball radius containing every input.
    pub fn radius(&self) -> f64 {
        (0..self.len())
            .map(|i| self.x(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Replace every label with `g(x_i)`, which makes the identity network
    /// interpolate the data exactly.
    pub fn with_labels_from(&self, g: &MeasuringFunction) -> Result<Dataset> {
        let ys = (0..self.len())
            .map(|i| g.eval(self.x(i)))
            .collect::<Result<Vec<f64>>>()?;
        Dataset::new(self.d, self.xs.clone(), ys)
    }
}

/// Draw `n` inputs uniformly from the ball of radius `r` and label them by
/// `rule`. Deterministic given `seed`.
pub fn generate(seed: u64, n: usize, d: usize, r: f64, rule: LabelRule) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::contract("dataset generation needs n >= 1"));
    }
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::contract("dataset generation needs radius > 0"));
    }
    if d == 0 {
        return Err(Error::contract("dataset generation needs d >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n * d);
    for _ in 0..n {
        xs.extend(sample_ball(&mut rng, d, r));
    }

    let ys = match rule {
        LabelRule::Constant(c) => vec![c; n],
        LabelRule::Trig => (0..n)
            .map(|i| {
                let s: f64 = xs[i * d..(i + 1) * d].iter().sum();
                (std::f64::consts::PI * s / (d as f64).sqrt()).sin()
            })
            .collect(),
        LabelRule::TeacherNet => {
            let (ens, g, family, grid) = teacher_net(&mut rng, d)?;
            (0..n)
                .map(|i| {
                    let z = forward_oie(&ens, &family, &xs[i * d..(i + 1) * d], &grid)?;
                    let terminal = &z[grid.n_intervals() * d..];
                    g.eval(terminal)
                })
                .collect::<Result<Vec<f64>>>()?
        }
    };
    Dataset::new(d, xs, ys)
}

/// The hidden network behind [`LabelRule::TeacherNet`], reconstructible from
/// the same RNG state. Exposed for tests that re-run the teacher forward pass.
pub fn teacher_net(
    rng: &mut ChaCha8Rng,
    d: usize,
) -> Result<(ParamPathEnsemble, MeasuringFunction, ActivationFamily, DepthGrid)> {
    let family = ActivationFamily::difference(d)?;
    let init = InitConfig::default();
    let k = family.param_len();
    let particles: Vec<Vec<f64>> = (0..TEACHER_WIDTH).map(|_| init.sample(rng, k)).collect();
    let grid = DepthGrid::new(TEACHER_DEPTH_INTERVALS)?;
    let ens = ParamPathEnsemble::t_constant(&grid, &particles, k)?;
    let g = MeasuringFunction::normalized_sum(d)?;
    Ok((ens, g, family, grid))
}

fn sample_ball(rng: &mut impl Rng, d: usize, r: f64) -> Vec<f64> {
    // Direction from a normalized Gaussian, radius from r * U^(1/d).
    let mut v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return vec![0.0; d];
    }
    let u: f64 = rng.gen::<f64>();
    let scale = r * u.powf(1.0 / d as f64) / norm;
    for x in &mut v {
        *x *= scale;
    }
    v
}

/// Write `header x0,...,x{d-1},y` and one row per sample, full precision.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for j in 0..ds.d {
        write!(out, "x{j},").unwrap();
    }
    out.push_str("y\n");
    for i in 0..ds.len() {
        for v in ds.x(i) {
            write!(out, "{v},").unwrap();
        }
        writeln!(out, "{}", ds.y(i)).unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        row: 1,
        msg: "empty dataset".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 2 || cols.last() != Some(&"y") {
        return Err(Error::Parse { row: 1, msg: "expected header x0,...,y".into() });
    }
    let d = cols.len() - 1;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut rows = 0usize;
    for (idx, line) in lines {
        let row = idx + 1; // 1-based, counting the header line
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != d + 1 {
            return Err(Error::Parse {
                row,
                msg: format!("expected {} columns, found {}", d + 1, fields.len()),
            });
        }
        for f in &fields[..d] {
            xs.push(parse_field(f, row)?);
        }
        ys.push(parse_field(fields[d], row)?);
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Parse { row: 1, msg: "empty dataset".into() });
    }
    Dataset::new(d, xs, ys)
}

fn parse_field(s: &str, row: usize) -> Result<f64> {
    s.parse::<f64>().map_err(|_| Error::Parse {
        row,
        msg: format!("not a number: {s:?}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g_examples() {
        let g = MeasuringFunction::new(vec![1.0, 0.0], 0.0).unwrap();
        assert_eq!(g.eval(&[3.0, 5.0]).unwrap(), 3.0);
        assert_eq!(g.grad(), &[1.0, 0.0]);

        let g = MeasuringFunction::new(vec![0.6, 0.8], 0.5).unwrap();
        assert!((g.eval(&[1.0, 1.0]).unwrap() - 1.9).abs() < 1e-15);
    }

    #[test]
    fn g_rejects_zero_weight() {
        assert!(MeasuringFunction::new(vec![0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn constant_rule_and_determinism() {
        let a = generate(3, 10, 2, 1.5, LabelRule::Constant(0.0)).unwrap();
        let b = generate(3, 10, 2, 1.5, LabelRule::Constant(0.0)).unwrap();
        assert_eq!(a, b);
        assert!((0..a.len()).all(|i| a.y(i) == 0.0));
    }

    #[test]
    fn generated_inputs_stay_in_ball() {
        let ds = generate(9, 10_000, 3, 2.0, LabelRule::Trig).unwrap();
        assert!(ds.radius() <= 2.0);
    }

    #[test]
    fn bad_generation_args_are_contract_violations() {
        assert!(generate(0, 0, 2, 1.0, LabelRule::Trig).is_err());
        assert!(generate(0, 4, 2, 0.0, LabelRule::Trig).is_err());
    }

    #[test]
    fn teacher_labels_recompute_from_seed() {
        let seed = 17;
        let n = 5;
        let d = 2;
        let ds = generate(seed, n, d, 1.0, LabelRule::TeacherNet).unwrap();

        // Re-derive the teacher by replaying the generator's RNG stream: the
        // inputs consume (d normals + 1 uniform) per sample first.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        for _ in 0..n {
            xs.extend(sample_ball(&mut rng, d, 1.0));
        }
        let (ens, g, family, grid) = teacher_net(&mut rng, d).unwrap();
        for i in 0..n {
            assert_eq!(&xs[i * d..(i + 1) * d], ds.x(i));
            let z = forward_oie(&ens, &family, ds.x(i), &grid).unwrap();
            let y = g.eval(&z[grid.n_intervals() * d..]).unwrap();
            assert_eq!(y, ds.y(i));
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let ds = generate(5, 23, 3, 1.0, LabelRule::Trig).unwrap();
        save_csv(&ds, &path).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn csv_errors_name_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "x0,x1,y\n1.0,2.0,3.0\n1.0,2.0\n").unwrap();
        match load_csv(&path) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected parse error, got {other:?}"),
        }

        std::fs::write(&path, "").unwrap();
        match load_csv(&path) {
            Err(Error::Parse { msg, .. }) => assert!(msg.contains("empty dataset")),
            other => panic!("expected empty-dataset error, got {other:?}"),
        }

        std::fs::write(&path, "x0,y\n").unwrap();
        match load_csv(&path) {
            Err(Error::Parse { msg, .. }) => assert!(msg.contains("empty dataset")),
            other => panic!("expected empty-dataset error, got {other:?}"),
        }
    }

    proptest::proptest! {
        #[test]
        fn g_is_affine(
            z1 in proptest::collection::vec(-5.0f64..5.0, 3),
            z2 in proptest::collection::vec(-5.0f64..5.0, 3),
            alpha in 0.0f64..1.0,
        ) {
            let g = MeasuringFunction::new(vec![0.3, -1.2, 0.7], 0.4).unwrap();
            let mix: Vec<f64> = z1.iter().zip(&z2)
                .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
                .collect();
            let lhs = g.eval(&mix).unwrap();
            let rhs = alpha * g.eval(&z1).unwrap() + (1.0 - alpha) * g.eval(&z2).unwrap();
            proptest::prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
