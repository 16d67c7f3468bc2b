//! The finite model: an `L`-layer, width-`M` ResNet with forward recursion
//! `z_{l+1} = z_l + (1/(ML)) sum_m f(z_l, theta_{l,m})`, its quadratic cost,
//! the discrete adjoint iteration, and the per-parameter gradient.
//!
//! Index convention for the adjoint: `p(l) = dE_x/dZ(l+1)`, so the terminal
//! condition sits at `p(L-1)` and the backward step at layer `l` uses
//! `(Z(l+1), theta_{l+1,m})`. Correctness of this convention is pinned by the
//! finite-difference tests, not by the index typography.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::{ActivationFamily, FamilyKind};
use crate::dataset::{Dataset, MeasuringFunction};
use crate::error::{Error, Result};
use crate::init::InitConfig;

/// The `L x M` parameter table of the finite ResNet. Entry `(l, m)` is the
/// parameter vector of column `m` in layer `l`, stored layer-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrid {
    layers: usize,
    width: usize,
    k: usize,
    values: Vec<f64>,
}

impl ParamGrid {
    pub fn new(layers: usize, width: usize, k: usize, values: Vec<f64>) -> Result<Self> {
        if layers == 0 || width == 0 || k == 0 {
            return Err(Error::contract("parameter grid needs L >= 1, M >= 1, k >= 1"));
        }
        if values.len() != layers * width * k {
            return Err(Error::contract(format!(
                "parameter grid expects {} values, got {}",
                layers * width * k,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("parameter grid entries must be finite"));
        }
        Ok(ParamGrid { layers, width, k, values })
    }

    pub fn zeros(layers: usize, width: usize, family: &ActivationFamily) -> Result<Self> {
        Self::new(layers, width, family.param_len(), vec![0.0; layers * width * family.param_len()])
    }

    /// Every layer gets the same `M` columns: the depth-constant grid induced
    /// by t-constant particle paths.
    pub fn from_columns(layers: usize, columns: &[Vec<f64>], k: usize) -> Result<Self> {
        if columns.is_empty() || columns.iter().any(|c| c.len() != k) {
            return Err(Error::contract("columns must be nonempty with length k"));
        }
        let width = columns.len();
        let mut values = Vec::with_capacity(layers * width * k);
        for _ in 0..layers {
            for c in columns {
                values.extend_from_slice(c);
            }
        }
        Self::new(layers, width, k, values)
    }

    /// Independent draws from the initialization distribution for every
    /// `(l, m)` entry.
    pub fn sample(
        layers: usize,
        width: usize,
        family: &ActivationFamily,
        init: &InitConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let k = family.param_len();
        let mut values = Vec::with_capacity(layers * width * k);
        for _ in 0..layers * width {
            values.extend(init.sample(rng, k));
        }
        Self::new(layers, width, k, values)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn param_len(&self) -> usize {
        self.k
    }

    /// Parameter vector at layer `l` (0-based), column `m` (0-based).
    pub fn theta(&self, l: usize, m: usize) -> &[f64] {
        let at = (l * self.width + m) * self.k;
        &self.values[at..at + self.k]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `(1/(LM)) sum_{l,m} |theta_{l,m}|^2`, the regularizer's second-moment
    /// term.
    pub fn mean_squared_norm(&self) -> f64 {
        let sum: f64 = self.values.iter().map(|v| v * v).sum();
        sum / (self.layers * self.width) as f64
    }
}

/// Per-sample state path `Z(0..=L)` and adjoint path `p(0..L)`.
#[derive(Debug, Clone)]
pub struct DiscreteTrajectory {
    layers: usize,
    dim: usize,
    z: Vec<f64>,
    p: Vec<f64>,
}

impl DiscreteTrajectory {
    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn z_at(&self, l: usize) -> &[f64] {
        &self.z[l * self.dim..(l + 1) * self.dim]
    }

    /// `p(l) = dE_x/dZ(l+1)`, valid after [`adjoint_backward`].
    pub fn p_at(&self, l: usize) -> &[f64] {
        &self.p[l * self.dim..(l + 1) * self.dim]
    }
}

/// Run the forward recursion from input `x`. Fails with the layer index if a
/// state stops being finite.
pub fn forward(
    grid: &ParamGrid,
    family: &ActivationFamily,
    x: &[f64],
) -> Result<DiscreteTrajectory> {
    let d = family.d;
    if x.len() != d {
        return Err(Error::contract(format!("input has dimension {}, family expects {d}", x.len())));
    }
    if grid.k != family.param_len() {
        return Err(Error::contract("parameter grid k does not match family"));
    }
    let (layers, width) = (grid.layers, grid.width);
    let scale = 1.0 / (width * layers) as f64;
    let mut z = vec![0.0; (layers + 1) * d];
    z[..d].copy_from_slice(x);
    for l in 0..layers {
        let (prev, rest) = z.split_at_mut((l + 1) * d);
        let cur = &prev[l * d..];
        let next = &mut rest[..d];
        next.copy_from_slice(cur);
        for m in 0..width {
            family.add_f_scaled(cur, grid.theta(l, m), scale, next);
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "forward state", index: l + 1 });
        }
    }
    Ok(DiscreteTrajectory { layers, dim: d, z, p: vec![0.0; layers * d] })
}

/// Continue the recursion from state `z0` sitting at layer `l0`. Used by the
/// finite-difference oracles for the adjoint.
#[cfg(test)]
fn forward_from(
    grid: &ParamGrid,
    family: &ActivationFamily,
    l0: usize,
    z0: &[f64],
) -> Result<Vec<f64>> {
    let d = family.d;
    let scale = 1.0 / (grid.width * grid.layers) as f64;
    let mut cur = z0.to_vec();
    let mut next = vec![0.0; d];
    for l in l0..grid.layers {
        next.copy_from_slice(&cur);
        for m in 0..grid.width {
            family.add_f_scaled(&cur, grid.theta(l, m), scale, &mut next);
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "forward state", index: l + 1 });
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(cur)
}

/// Fill the adjoint path: `p(L-1) = (g(Z(L)) - y) grad g`, then
/// `p(l)' = p(l+1)' (I + (1/(ML)) sum_m df/dz(Z(l+1), theta_{l+1,m}))`.
pub fn adjoint_backward(
    grid: &ParamGrid,
    family: &ActivationFamily,
    g: &MeasuringFunction,
    traj: &mut DiscreteTrajectory,
    y: f64,
) -> Result<()> {
    let d = family.d;
    if g.dim() != d {
        return Err(Error::contract("measuring function dimension mismatch"));
    }
    let layers = grid.layers;
    let scale = 1.0 / (grid.width * layers) as f64;
    let terminal = traj.z_at(layers).to_vec();
    let residual = g.eval_unchecked(&terminal) - y;
    {
        let last = &mut traj.p[(layers - 1) * d..layers * d];
        for (out, w) in last.iter_mut().zip(g.grad()) {
            *out = residual * w;
        }
    }
    for l in (0..layers.saturating_sub(1)).rev() {
        let z_next = traj.z_at(l + 1).to_vec();
        let (head, tail) = traj.p.split_at_mut((l + 1) * d);
        let p_next = &tail[..d];
        let p_cur = &mut head[l * d..];
        p_cur.copy_from_slice(p_next);
        for m in 0..grid.width {
            family.add_vjp_z(&z_next, grid.theta(l + 1, m), p_next, scale, p_cur);
        }
        if p_cur.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "adjoint state", index: l });
        }
    }
    Ok(())
}

/// `E = mean_i 1/2 (g(Z(L;x_i)) - y_i)^2`.
pub fn loss(
    grid: &ParamGrid,
    family: &ActivationFamily,
    g: &MeasuringFunction,
    ds: &Dataset,
) -> Result<f64> {
    let per_sample: Vec<f64> = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let traj = forward(grid, family, ds.x(i))?;
            let r = g.eval_unchecked(traj.z_at(grid.layers)) - ds.y(i);
            Ok(0.5 * r * r)
        })
        .collect::<Result<_>>()?;
    Ok(per_sample.iter().sum::<f64>() / ds.len() as f64)
}

/// `E_s = E + e^{-s} (1/(ML)) sum |theta|^2`. Pseudo-time `s` must be
/// nonnegative (`+inf` turns the regularizer off).
pub fn loss_regularized(
    grid: &ParamGrid,
    family: &ActivationFamily,
    g: &MeasuringFunction,
    ds: &Dataset,
    s: f64,
) -> Result<f64> {
    if s < 0.0 || s.is_nan() {
        return Err(Error::contract("pseudo-time s must be nonnegative"));
    }
    Ok(loss(grid, family, g, ds)? + (-s).exp() * grid.mean_squared_norm())
}

/// `dE/dtheta_{l,m} = (1/(ML)) mean_i [ (df/dtheta)' p ]`, in the layout of
/// [`ParamGrid::values`].
pub fn grad(
    grid: &ParamGrid,
    family: &ActivationFamily,
    g: &MeasuringFunction,
    ds: &Dataset,
) -> Result<Vec<f64>> {
    let (mut table, _) = mean_vjp_and_loss(grid, family, g, ds)?;
    let scale = 1.0 / (grid.layers * grid.width) as f64;
    for v in &mut table {
        *v *= scale;
    }
    Ok(table)
}

/// The sample mean `mean_i [ (df/dtheta)' p ]` per `(l, m)` — which equals
/// `ML grad E` — together with the loss `E` from the same forward sweeps.
/// This is the drift the gradient flow integrates, so the flow driver calls
/// this directly.
pub(crate) fn mean_vjp_and_loss(
    grid: &ParamGrid,
    family: &ActivationFamily,
    g: &MeasuringFunction,
    ds: &Dataset,
) -> Result<(Vec<f64>, f64)> {
    let n = ds.len();
    let trajectories: Vec<DiscreteTrajectory> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut traj = forward(grid, family, ds.x(i))?;
            adjoint_backward(grid, family, g, &mut traj, ds.y(i))?;
            Ok(traj)
        })
        .collect::<Result<_>>()?;

    let e = trajectories
        .iter()
        .enumerate()
        .map(|(i, traj)| {
            let r = g.eval_unchecked(traj.z_at(grid.layers)) - ds.y(i);
            0.5 * r * r
        })
        .sum::<f64>()
        / n as f64;

    let (width, k) = (grid.width, grid.k);
    let mut table = vec![0.0; grid.layers * width * k];
    let inv_n = 1.0 / n as f64;
    table
        .par_chunks_mut(width * k)
        .enumerate()
        .for_each(|(l, row)| {
            for m in 0..width {
                let acc = &mut row[m * k..(m + 1) * k];
                let theta = grid.theta(l, m);
                for traj in &trajectories {
                    family.add_vjp_theta(traj.z_at(l), theta, traj.p_at(l), inv_n, acc);
                }
            }
        });
    Ok((table, e))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSidecar {
    #[serde(rename = "L")]
    layers: usize,
    #[serde(rename = "M")]
    width: usize,
    k: usize,
    family: FamilyKind,
    tau: f64,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Write the grid as `l,m,c0..c{k-1}` rows (`l` 0-based, `m` 1-based) plus a
/// JSON sidecar `{L, M, k, family, tau}` next to it.
pub fn save_grid_csv(
    grid: &ParamGrid,
    family: &ActivationFamily,
    path: &Path,
) -> Result<()> {
    let mut out = String::from("l,m");
    for c in 0..grid.k {
        write!(out, ",c{c}").unwrap();
    }
    out.push('\n');
    for l in 0..grid.layers {
        for m in 0..grid.width {
            write!(out, "{l},{}", m + 1).unwrap();
            for v in grid.theta(l, m) {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    let sidecar = GridSidecar {
        layers: grid.layers,
        width: grid.width,
        k: grid.k,
        family: family.kind,
        tau: family.tau,
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_grid_csv(path: &Path) -> Result<(ParamGrid, ActivationFamily)> {
    let sidecar: GridSidecar =
        serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    let d = match sidecar.family {
        FamilyKind::DifferenceForm => {
            // k = 2d^2 + 2d
            (0..=sidecar.k)
                .find(|d| 2 * d * d + 2 * d == sidecar.k)
                .ok_or_else(|| Error::contract(format!("no state dimension gives k = {}", sidecar.k)))?
        }
        FamilyKind::ConventionalForm => {
            if sidecar.k % 2 != 1 {
                return Err(Error::contract(format!("conventional family needs odd k, got {}", sidecar.k)));
            }
            (sidecar.k - 1) / 2
        }
    };
    let family = ActivationFamily::new(sidecar.family, d, sidecar.tau)?;

    let text = std::fs::read_to_string(path)?;
    let mut values = vec![f64::NAN; sidecar.layers * sidecar.width * sidecar.k];
    let mut seen = 0usize;
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 || line.trim().is_empty() {
            continue;
        }
        let row = idx + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != sidecar.k + 2 {
            return Err(Error::Parse {
                row,
                msg: format!("expected {} columns, found {}", sidecar.k + 2, fields.len()),
            });
        }
        let l: usize = fields[0]
            .parse()
            .map_err(|_| Error::Parse { row, msg: "bad layer index".into() })?;
        let m: usize = fields[1]
            .parse()
            .map_err(|_| Error::Parse { row, msg: "bad column index".into() })?;
        if l >= sidecar.layers || m == 0 || m > sidecar.width {
            return Err(Error::Parse { row, msg: format!("index ({l},{m}) out of range") });
        }
        let at = (l * sidecar.width + (m - 1)) * sidecar.k;
        for (c, f) in fields[2..].iter().enumerate() {
            values[at + c] = f
                .parse()
                .map_err(|_| Error::Parse { row, msg: format!("not a number: {f:?}") })?;
        }
        seen += 1;
    }
    if seen != sidecar.layers * sidecar.width {
        return Err(Error::Parse {
            row: text.lines().count(),
            msg: format!("expected {} rows, found {seen}", sidecar.layers * sidecar.width),
        });
    }
    Ok((ParamGrid::new(sidecar.layers, sidecar.width, sidecar.k, values)?, family))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, LabelRule};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn g_id() -> MeasuringFunction {
        MeasuringFunction::new(vec![1.0], 0.0).unwrap()
    }

    #[test]
    fn zero_grid_is_identity_network() {
        let fam = ActivationFamily::difference(2).unwrap();
        let grid = ParamGrid::zeros(4, 3, &fam).unwrap();
        let traj = forward(&grid, &fam, &[0.7, -0.2]).unwrap();
        for l in 0..=4 {
            assert_eq!(traj.z_at(l), &[0.7, -0.2]);
        }
    }

    #[test]
    fn single_layer_derived_value() {
        // L=1, M=1, d=1, theta=(1,0,0,0), x=1: Z(1) = 1 + sp(1) - sp(0)
        let fam = ActivationFamily::difference(1).unwrap();
        let grid = ParamGrid::new(1, 1, 4, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let traj = forward(&grid, &fam, &[1.0]).unwrap();
        let expected = 1.0 + ((1.0f64.exp() + 1.0).ln() - 2.0f64.ln());
        assert!((traj.z_at(1)[0] - expected).abs() < 1e-15);
        assert!((traj.z_at(1)[0] - 1.62011).abs() < 1e-5);
    }

    #[test]
    fn duplicating_columns_leaves_forward_unchanged() {
        let fam = ActivationFamily::difference(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let init = InitConfig::default();
        let grid = ParamGrid::sample(3, 2, &fam, &init, &mut rng).unwrap();
        let mut doubled = Vec::new();
        for l in 0..3 {
            for _ in 0..2 {
                for m in 0..2 {
                    doubled.extend_from_slice(grid.theta(l, m));
                }
            }
        }
        // interleave copies so each layer has columns [a, b, a, b]
        let grid2 = ParamGrid::new(3, 4, grid.param_len(), doubled).unwrap();
        let x = [0.3, 0.9];
        let t1 = forward(&grid, &fam, &x).unwrap();
        let t2 = forward(&grid2, &fam, &x).unwrap();
        for l in 0..=3 {
            for (a, b) in t1.z_at(l).iter().zip(t2.z_at(l)) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn loss_examples() {
        let fam = ActivationFamily::difference(1).unwrap();
        let grid = ParamGrid::zeros(2, 2, &fam).unwrap();
        let ds = Dataset::new(1, vec![1.0], vec![0.0]).unwrap();
        assert!((loss(&grid, &fam, &g_id(), &ds).unwrap() - 0.5).abs() < 1e-15);

        let ds2 = Dataset::new(1, vec![1.0, 2.0], vec![0.0, 0.0]).unwrap();
        assert!((loss(&grid, &fam, &g_id(), &ds2).unwrap() - 1.25).abs() < 1e-15);

        // teacher labels with the teacher grid interpolate exactly
        let ds3 = Dataset::new(1, vec![1.0, -0.5], vec![1.0, -0.5]).unwrap();
        assert_eq!(loss(&grid, &fam, &g_id(), &ds3).unwrap(), 0.0);
    }

    #[test]
    fn regularized_loss_examples() {
        let fam = ActivationFamily::difference(1).unwrap();
        let ds = Dataset::new(1, vec![1.0], vec![0.0]).unwrap();
        let zero = ParamGrid::zeros(1, 1, &fam).unwrap();
        let e = loss(&zero, &fam, &g_id(), &ds).unwrap();
        for s in [0.0, 1.0, 17.5] {
            assert_eq!(loss_regularized(&zero, &fam, &g_id(), &ds, s).unwrap(), e);
        }

        // |theta|^2 = 4, L = M = 1, s = 0, E = 0.5 -> E_s = 4.5
        let grid = ParamGrid::new(1, 1, 4, vec![2.0, 0.0, 0.0, 0.0]).unwrap();
        let e0 = loss(&grid, &fam, &g_id(), &ds).unwrap();
        let es = loss_regularized(&grid, &fam, &g_id(), &ds, 0.0).unwrap();
        assert!((es - (e0 + 4.0)).abs() < 1e-15);

        // the exponential factor kills the regularizer at large s
        let e40 = loss_regularized(&grid, &fam, &g_id(), &ds, 40.0).unwrap();
        assert!((e40 - e0).abs() < 1e-16 * 4.0);

        assert!(loss_regularized(&grid, &fam, &g_id(), &ds, -1.0).is_err());
    }

    #[test]
    fn adjoint_constant_for_identity_dynamics() {
        // zero network, g = w . x: p(l) = (w.x - y) w at every layer
        let fam = ActivationFamily::difference(2).unwrap();
        let grid = ParamGrid::zeros(5, 2, &fam).unwrap();
        let g = MeasuringFunction::new(vec![0.4, -1.1], 0.0).unwrap();
        let x = [1.0, 2.0];
        let y = 0.3;
        let mut traj = forward(&grid, &fam, &x).unwrap();
        adjoint_backward(&grid, &fam, &g, &mut traj, y).unwrap();
        let r = 0.4 * 1.0 - 1.1 * 2.0 - y;
        for l in 0..5 {
            assert!((traj.p_at(l)[0] - r * 0.4).abs() < 1e-15);
            assert!((traj.p_at(l)[1] - r * (-1.1)).abs() < 1e-15);
        }
    }

    #[test]
    fn adjoint_vanishes_at_interpolation() {
        let fam = ActivationFamily::difference(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let grid = ParamGrid::sample(3, 2, &fam, &InitConfig::default(), &mut rng).unwrap();
        let x = [0.8];
        let traj = forward(&grid, &fam, &x).unwrap();
        let y = g_id().eval(traj.z_at(3)).unwrap();
        let mut traj = traj;
        adjoint_backward(&grid, &fam, &g_id(), &mut traj, y).unwrap();
        for l in 0..3 {
            assert_eq!(traj.p_at(l), &[0.0]);
        }
    }

    #[test]
    fn adjoint_matches_finite_difference_of_downstream_loss() {
        // p(0) = dE_x/dZ(1): perturb Z(1) and rerun the truncated forward.
        let d = 2;
        let fam = ActivationFamily::difference(d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let grid = ParamGrid::sample(3, 2, &fam, &InitConfig::default(), &mut rng).unwrap();
        let g = MeasuringFunction::new(vec![0.7, 0.3], 0.1).unwrap();
        let x = [0.4, -0.9];
        let y = 0.25;
        let mut traj = forward(&grid, &fam, &x).unwrap();
        adjoint_backward(&grid, &fam, &g, &mut traj, y).unwrap();

        let h = 1e-6;
        let z1 = traj.z_at(1).to_vec();
        for c in 0..d {
            let mut zp = z1.clone();
            let mut zm = z1.clone();
            zp[c] += h;
            zm[c] -= h;
            let ep = {
                let t = forward_from(&grid, &fam, 1, &zp).unwrap();
                let r = g.eval(&t).unwrap() - y;
                0.5 * r * r
            };
            let em = {
                let t = forward_from(&grid, &fam, 1, &zm).unwrap();
                let r = g.eval(&t).unwrap() - y;
                0.5 * r * r
            };
            let fd = (ep - em) / (2.0 * h);
            let a = traj.p_at(0)[c];
            assert!(
                (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6) < 1e-6,
                "coordinate {c}: adjoint {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn gradient_is_zero_at_interpolation_and_matches_fd() {
        let d = 2;
        let fam = ActivationFamily::difference(d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let grid = ParamGrid::sample(3, 2, &fam, &InitConfig::default(), &mut rng).unwrap();
        let g = MeasuringFunction::normalized_sum(d).unwrap();
        let ds = generate(5, 3, d, 1.0, LabelRule::Trig).unwrap();

        // interpolating labels -> zero gradient
        let mut interp_ys = Vec::new();
        for i in 0..ds.len() {
            let t = forward(&grid, &fam, ds.x(i)).unwrap();
            interp_ys.push(g.eval(t.z_at(3)).unwrap());
        }
        let interp = Dataset::new(d, (0..ds.len()).flat_map(|i| ds.x(i).to_vec()).collect(), interp_ys).unwrap();
        assert!(grad(&grid, &fam, &g, &interp).unwrap().iter().all(|&v| v == 0.0));

        // single-sample FD on every coordinate
        let one = Dataset::new(d, ds.x(0).to_vec(), vec![ds.y(0)]).unwrap();
        let table = grad(&grid, &fam, &g, &one).unwrap();
        let h = 1e-5;
        for c in 0..table.len() {
            let mut gp = grid.clone();
            gp.values_mut()[c] += h;
            let mut gm = grid.clone();
            gm.values_mut()[c] -= h;
            let fd = (loss(&gp, &fam, &g, &one).unwrap() - loss(&gm, &fam, &g, &one).unwrap())
                / (2.0 * h);
            let a = table[c];
            assert!(
                (a - fd).abs() / a.abs().max(fd.abs()).max(1e-5) < 1e-6,
                "coordinate {c}: grad {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn duplicated_columns_share_gradient_entries() {
        let d = 1;
        let fam = ActivationFamily::difference(d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let col: Vec<f64> = InitConfig::default().sample(&mut rng, 4);
        let grid = ParamGrid::from_columns(2, &[col.clone(), col.clone()], 4).unwrap();
        let ds = generate(6, 4, d, 1.0, LabelRule::Trig).unwrap();
        let table = grad(&grid, &fam, &g_id(), &ds).unwrap();
        for l in 0..2 {
            let a = &table[(l * 2) * 4..(l * 2) * 4 + 4];
            let b = &table[(l * 2 + 1) * 4..(l * 2 + 1) * 4 + 4];
            assert_eq!(a, b);
        }
    }

    #[test]
    fn permutation_of_columns_is_invariant() {
        let d = 2;
        let fam = ActivationFamily::difference(d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let grid = ParamGrid::sample(3, 3, &fam, &InitConfig::default(), &mut rng).unwrap();
        // swap columns 0 and 2 in every layer
        let mut perm = grid.clone();
        let k = grid.param_len();
        for l in 0..3 {
            let base = l * 3 * k;
            let (a, b) = (base, base + 2 * k);
            for c in 0..k {
                perm.values_mut().swap(a + c, b + c);
            }
        }
        let g = MeasuringFunction::normalized_sum(d).unwrap();
        let ds = generate(7, 4, d, 1.0, LabelRule::Trig).unwrap();
        // permutation reorders the in-layer summation, so agreement is up to
        // floating-point reassociation
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0);
        let e1 = loss(&grid, &fam, &g, &ds).unwrap();
        let e2 = loss(&perm, &fam, &g, &ds).unwrap();
        assert!(close(e1, e2));
        let t1 = grad(&grid, &fam, &g, &ds).unwrap();
        let t2 = grad(&perm, &fam, &g, &ds).unwrap();
        let block = |t: &[f64], l: usize, m: usize| t[l * 3 * k + m * k..l * 3 * k + (m + 1) * k].to_vec();
        for l in 0..3 {
            for (a, b) in [(0, 2), (2, 0), (1, 1)] {
                for (x, y) in block(&t1, l, a).iter().zip(block(&t2, l, b)) {
                    assert!(close(*x, y));
                }
            }
        }
    }

    #[test]
    fn terminal_state_bounded_in_second_moment_budget() {
        // grids with (1/(LM)) sum |theta|^2 <= B keep |Z(L;x)| finite, and the
        // envelope grows with B.
        let d = 2;
        let fam = ActivationFamily::difference(d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = [0.5, -0.5];
        let mut sup = Vec::new();
        for budget in [0.5, 2.0, 8.0] {
            let mut worst: f64 = 0.0;
            for _ in 0..100 {
                let mut grid =
                    ParamGrid::sample(4, 3, &fam, &InitConfig::default(), &mut rng).unwrap();
                let cur = grid.mean_squared_norm();
                let scale = (budget / cur).sqrt();
                for v in grid.values_mut() {
                    *v *= scale;
                }
                let traj = forward(&grid, &fam, &x).unwrap();
                let norm = traj.z_at(4).iter().map(|v| v * v).sum::<f64>().sqrt();
                worst = worst.max(norm);
            }
            assert!(worst.is_finite());
            sup.push(worst);
        }
        assert!(sup[0] <= sup[1] && sup[1] <= sup[2]);
    }

    #[test]
    fn grid_csv_round_trip() {
        let fam = ActivationFamily::new(FamilyKind::ConventionalForm, 2, 0.7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let grid = ParamGrid::sample(3, 2, &fam, &InitConfig::default(), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.csv");
        save_grid_csv(&grid, &fam, &path).unwrap();
        let (back, fam2) = load_grid_csv(&path).unwrap();
        assert_eq!(grid, back);
        assert_eq!(fam, fam2);
    }
}
