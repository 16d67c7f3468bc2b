//! Empirical-measure utilities: exact and sliced Wasserstein-2 distances,
//! the path metrics `d1` and `d2`, second moments, and the limit-admissibility
//! diagnostics.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::continuum::ParamPathEnsemble;
use crate::error::{Error, Result};

/// Largest cloud size handled by the exact assignment solver. Beyond this,
/// callers should switch to [`w2_sliced`].
pub const W2_EXACT_MAX_PARTICLES: usize = 256;

/// An equal-weight particle cloud in `R^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    k: usize,
    points: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(k: usize, points: Vec<f64>) -> Result<Self> {
        if k == 0 || points.is_empty() || points.len() % k != 0 {
            return Err(Error::contract("cloud needs M >= 1 points of dimension k"));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("cloud coordinates must be finite"));
        }
        Ok(EmpiricalMeasure { k, points })
    }

    /// The parameter cloud of an ensemble at one depth node.
    pub fn from_node(ens: &ParamPathEnsemble, j: usize) -> Self {
        EmpiricalMeasure { k: ens.param_len(), points: ens.node_cloud(j).to_vec() }
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        false // construction requires M >= 1
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.k..(i + 1) * self.k]
    }
}

fn check_pair(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<()> {
    if a.k != b.k {
        return Err(Error::contract("clouds live in different dimensions"));
    }
    if a.len() != b.len() {
        return Err(Error::contract("clouds have different particle counts"));
    }
    Ok(())
}

fn squared_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exact Wasserstein-2 distance between two equal-weight clouds: the square
/// root of the mean matched squared distance under the optimal assignment.
pub fn w2_exact(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    check_pair(a, b)?;
    let m = a.len();
    if m > W2_EXACT_MAX_PARTICLES {
        return Err(Error::contract(format!(
            "w2_exact handles at most {W2_EXACT_MAX_PARTICLES} particles, got {m}; use w2_sliced"
        )));
    }
    let mut cost = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            cost[i * m + j] = squared_dist(a.point(i), b.point(j));
        }
    }
    let assignment = solve_assignment(&cost, m);
    // canonical summation order makes the value independent of which cloud
    // came first
    let mut matched: Vec<f64> = (0..m).map(|j| cost[(assignment[j]) * m + j]).collect();
    matched.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok((matched.iter().sum::<f64>() / m as f64).sqrt())
}

/// Minimum-cost perfect assignment on a square cost matrix via the O(n^3)
/// potential (Hungarian) method. Returns `row_of_col`.
fn solve_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    // 1-based arrays; p[j] is the row matched to column j, 0 meaning none.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=n).map(|j| p[j] - 1).collect()
}

/// Sliced Wasserstein-2 surrogate: RMS over random unit directions of the
/// one-dimensional (sorted-coordinate) W2 distance. Deterministic per seed.
pub fn w2_sliced(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    n_projections: usize,
    seed: u64,
) -> Result<f64> {
    check_pair(a, b)?;
    if n_projections == 0 {
        return Err(Error::contract("sliced W2 needs at least one projection"));
    }
    let m = a.len();
    let k = a.k;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pa = vec![0.0; m];
    let mut pb = vec![0.0; m];
    let mut acc = 0.0;
    for _ in 0..n_projections {
        let mut dir: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm: f64 = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            dir[0] = 1.0;
        } else {
            for x in &mut dir {
                *x /= norm;
            }
        }
        for i in 0..m {
            pa[i] = a.point(i).iter().zip(&dir).map(|(x, w)| x * w).sum();
            pb[i] = b.point(i).iter().zip(&dir).map(|(x, w)| x * w).sum();
        }
        pa.sort_by(|x, y| x.partial_cmp(y).unwrap());
        pb.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let w2_sq: f64 =
            pa.iter().zip(&pb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / m as f64;
        acc += w2_sq;
    }
    Ok((acc / n_projections as f64).sqrt())
}

/// `d1 = sup_t W2(rho_1(., t), rho_2(., t))`, evaluated over the depth nodes.
pub fn d1(a: &ParamPathEnsemble, b: &ParamPathEnsemble) -> Result<f64> {
    if a.n_nodes() != b.n_nodes() {
        return Err(Error::contract("ensembles discretize different depth grids"));
    }
    let mut worst = 0.0f64;
    for j in 0..a.n_nodes() {
        let w = w2_exact(&EmpiricalMeasure::from_node(a, j), &EmpiricalMeasure::from_node(b, j))?;
        worst = worst.max(w);
    }
    Ok(worst)
}

/// Diagnostic `d2`: max over stored pseudo-time snapshots of `d1`. Flows keep
/// finitely many snapshots, so this bounds the true sup from below.
pub fn d2(a: &[ParamPathEnsemble], b: &[ParamPathEnsemble]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::contract("snapshot lists must be nonempty with equal length"));
    }
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        worst = worst.max(d1(x, y)?);
    }
    Ok(worst)
}

/// `(1/M) sum_m |theta_m(t_j)|^2` at one depth node.
pub fn second_moment_at_node(ens: &ParamPathEnsemble, j: usize) -> f64 {
    ens.node_second_moment(j)
}

/// Trapezoid value of `(1/M) sum_m int_0^1 |theta_m(t)|^2 dt`.
pub fn second_moment_integrated(ens: &ParamPathEnsemble) -> f64 {
    ens.second_moment_integral()
}

/// Raw values of the two limit-admissibility quantities; thresholds are left
/// to the experiment configs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmissibilityReport {
    /// `sup_t (1/M) sum_m |theta_m(t)|^2` over the depth nodes.
    pub sup_second_moment: f64,
    /// `(1/M) sum_l sum_m int_{l/L}^{(l+1)/L} |theta_m(t) - theta_m(l/L)|^2 dt`.
    pub path_increment: f64,
    pub l_used: usize,
    /// Set when `L >= N_t`, i.e. the windows fall below the grid resolution.
    pub sub_node_resolution: bool,
}

/// Evaluate the admissibility quantities for a given layer count `L`. The
/// increment integral runs over the merged grid of depth nodes and window
/// boundaries `l/L` with the trapezoid rule, so `L` need not divide `N_t`.
pub fn admissibility_report(ens: &ParamPathEnsemble, l: usize) -> Result<AdmissibilityReport> {
    if l == 0 {
        return Err(Error::contract("admissibility report needs L >= 1"));
    }
    let n_t = ens.n_intervals();
    let (width, k) = (ens.width(), ens.param_len());

    let sup_second_moment =
        (0..ens.n_nodes()).map(|j| ens.node_second_moment(j)).fold(0.0, f64::max);

    let mut ref_cloud = vec![0.0; width * k];
    let mut buf = vec![0.0; k];
    let inv_m = 1.0 / width as f64;
    // mean squared deviation of the cloud at time t from the window reference
    let phi = |t: f64, reference: &[f64], buf: &mut [f64]| -> f64 {
        let mut acc = 0.0;
        for m in 0..width {
            ens.theta_at(t, m, buf);
            acc += squared_dist(buf, &reference[m * k..(m + 1) * k]);
        }
        acc * inv_m
    };

    let mut increment = 0.0;
    for w in 0..l {
        let a = w as f64 / l as f64;
        let b = (w + 1) as f64 / l as f64;
        for m in 0..width {
            ens.theta_at(a, m, &mut buf);
            ref_cloud[m * k..(m + 1) * k].copy_from_slice(&buf);
        }
        // merged breakpoints: window ends plus interior depth nodes
        let first_node = (a * n_t as f64).floor() as usize + 1;
        let mut prev_t = a;
        let mut prev_phi = 0.0; // phi(a) = 0 by construction
        let mut node = first_node;
        while (node as f64) / (n_t as f64) < b - 1e-15 {
            let t = node as f64 / n_t as f64;
            let val = phi(t, &ref_cloud, &mut buf);
            increment += 0.5 * (t - prev_t) * (prev_phi + val);
            prev_t = t;
            prev_phi = val;
            node += 1;
        }
        let val = phi(b, &ref_cloud, &mut buf);
        increment += 0.5 * (b - prev_t) * (prev_phi + val);
    }

    Ok(AdmissibilityReport {
        sup_second_moment,
        path_increment: increment,
        l_used: l,
        sub_node_resolution: l >= n_t,
    })
}

/// Write a bare particle cloud as `c0..c{k-1}` rows.
pub fn save_cloud_csv(cloud: &EmpiricalMeasure, path: &Path) -> Result<()> {
    let mut out = String::new();
    for c in 0..cloud.k {
        if c > 0 {
            out.push(',');
        }
        write!(out, "c{c}").unwrap();
    }
    out.push('\n');
    for i in 0..cloud.len() {
        for (c, v) in cloud.point(i).iter().enumerate() {
            if c > 0 {
                out.push(',');
            }
            write!(out, "{v}").unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_cloud_csv(path: &Path) -> Result<EmpiricalMeasure> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) =
        lines.next().ok_or(Error::Parse { row: 1, msg: "empty cloud file".into() })?;
    let k = header.split(',').count();
    let mut points = Vec::new();
    let mut any = false;
    for (idx, line) in lines {
        let row = idx + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != k {
            return Err(Error::Parse {
                row,
                msg: format!("expected {k} columns, found {}", fields.len()),
            });
        }
        for f in fields {
            points.push(f.parse::<f64>().map_err(|_| Error::Parse {
                row,
                msg: format!("not a number: {f:?}"),
            })?);
        }
        any = true;
    }
    if !any {
        return Err(Error::Parse { row: 1, msg: "empty cloud file".into() });
    }
    EmpiricalMeasure::new(k, points)
}
