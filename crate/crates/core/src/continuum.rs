//! The continuous-depth model. Depth is a time variable `t` on `[0, 1]`; the
//! forward dynamics are `dz/dt = (1/M) sum_m f(z, theta_m(t))`, the empirical
//! instance of the mean-field integral equation. The adjoint solves the
//! backward ODE `dp'/dt = -p' (1/M) sum_m df/dz`, and the per-particle
//! functional gradient assembles `mean_x[(df/dtheta)' p] + 2 e^{-s} theta`,
//! which is the gradient of the first variation of the regularized cost at
//! the particle's location (and `M` times the per-particle Frechet
//! derivative).
//!
//! Discretization: classical RK4 on a uniform depth grid. Particle paths are
//! piecewise-linear in `t`; within one RK4 step the path data is linear, so
//! the integrator keeps its full order. The backward pass needs states
//! between nodes and rebuilds them with cubic Hermite interpolation from the
//! stored node states and slopes, which preserves fourth-order accuracy.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::{ActivationFamily, FamilyKind};
use crate::dataset::{Dataset, MeasuringFunction};
use crate::error::{Error, Result};
use crate::init::InitConfig;

/// Uniform depth grid `t_j = j / N_t`, `j = 0..=N_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DepthGrid {
    n_intervals: usize,
}

impl DepthGrid {
    pub fn new(n_intervals: usize) -> Result<Self> {
        if n_intervals == 0 {
            return Err(Error::contract("depth grid needs at least one interval"));
        }
        Ok(DepthGrid { n_intervals })
    }

    pub fn n_intervals(&self) -> usize {
        self.n_intervals
    }

    pub fn n_nodes(&self) -> usize {
        self.n_intervals + 1
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.n_intervals as f64
    }

    pub fn t(&self, j: usize) -> f64 {
        j as f64 / self.n_intervals as f64
    }
}

/// `M` particle paths `theta_m(t)` sampled at the depth nodes, interpreted as
/// piecewise-linear in `t`. Node `j` holds the cloud of the empirical
/// parameter measure at depth `t_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamPathEnsemble {
    n_nodes: usize,
    width: usize,
    k: usize,
    values: Vec<f64>, // node-major: values[(j * width + m) * k ..][..k]
}

impl ParamPathEnsemble {
    pub fn new(n_nodes: usize, width: usize, k: usize, values: Vec<f64>) -> Result<Self> {
        if n_nodes < 2 || width == 0 || k == 0 {
            return Err(Error::contract("ensemble needs >= 2 nodes, M >= 1, k >= 1"));
        }
        if values.len() != n_nodes * width * k {
            return Err(Error::contract(format!(
                "ensemble expects {} values, got {}",
                n_nodes * width * k,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("ensemble entries must be finite"));
        }
        Ok(ParamPathEnsemble { n_nodes, width, k, values })
    }

    pub fn zeros(grid: &DepthGrid, width: usize, k: usize) -> Result<Self> {
        Self::new(grid.n_nodes(), width, k, vec![0.0; grid.n_nodes() * width * k])
    }

    /// Paths constant in `t`: node `j` repeats the given particles.
    pub fn t_constant(grid: &DepthGrid, particles: &[Vec<f64>], k: usize) -> Result<Self> {
        if particles.is_empty() || particles.iter().any(|p| p.len() != k) {
            return Err(Error::contract("particles must be nonempty with length k"));
        }
        let width = particles.len();
        let mut values = Vec::with_capacity(grid.n_nodes() * width * k);
        for _ in 0..grid.n_nodes() {
            for p in particles {
                values.extend_from_slice(p);
            }
        }
        Self::new(grid.n_nodes(), width, k, values)
    }

    /// Fresh i.i.d. t-constant particles from the initialization
    /// distribution.
    pub fn sample_t_constant(
        grid: &DepthGrid,
        width: usize,
        family: &ActivationFamily,
        init: &InitConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let k = family.param_len();
        let particles: Vec<Vec<f64>> = (0..width).map(|_| init.sample(rng, k)).collect();
        Self::t_constant(grid, &particles, k)
    }

    /// Build node values from a function of `(node index, particle index)`.
    pub fn from_fn(
        grid: &DepthGrid,
        width: usize,
        k: usize,
        mut f: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(grid.n_nodes() * width * k);
        for j in 0..grid.n_nodes() {
            for m in 0..width {
                let v = f(j, m);
                if v.len() != k {
                    return Err(Error::contract("path function returned wrong length"));
                }
                values.extend_from_slice(&v);
            }
        }
        Self::new(grid.n_nodes(), width, k, values)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_intervals(&self) -> usize {
        self.n_nodes - 1
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn param_len(&self) -> usize {
        self.k
    }

    pub fn theta(&self, j: usize, m: usize) -> &[f64] {
        let at = (j * self.width + m) * self.k;
        &self.values[at..at + self.k]
    }

    /// All particles at node `j`, as one contiguous `M * k` slice.
    pub fn node_cloud(&self, j: usize) -> &[f64] {
        &self.values[j * self.width * self.k..(j + 1) * self.width * self.k]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Piecewise-linear evaluation of particle `m` at depth `t` in `[0, 1]`.
    pub fn theta_at(&self, t: f64, m: usize, out: &mut [f64]) {
        let n = self.n_nodes - 1;
        let tt = (t.clamp(0.0, 1.0)) * n as f64;
        let j = (tt.floor() as usize).min(n - 1);
        let alpha = tt - j as f64;
        let a = self.theta(j, m);
        let b = self.theta(j + 1, m);
        for c in 0..self.k {
            out[c] = (1.0 - alpha) * a[c] + alpha * b[c];
        }
    }

    /// `(1/M) sum_m |theta_m(t_j)|^2`.
    pub fn node_second_moment(&self, j: usize) -> f64 {
        let cloud = self.node_cloud(j);
        cloud.iter().map(|v| v * v).sum::<f64>() / self.width as f64
    }

    /// Trapezoid-rule value of `(1/M) sum_m int_0^1 |theta_m(t)|^2 dt` on the
    /// depth grid — the second-moment term of the regularized cost.
    pub fn second_moment_integral(&self) -> f64 {
        let n = self.n_nodes - 1;
        let dt = 1.0 / n as f64;
        let mut acc = 0.5 * (self.node_second_moment(0) + self.node_second_moment(n));
        for j in 1..n {
            acc += self.node_second_moment(j);
        }
        acc * dt
    }

    fn check_family(&self, family: &ActivationFamily) -> Result<()> {
        if self.k != family.param_len() {
            return Err(Error::contract("ensemble k does not match family"));
        }
        Ok(())
    }

    fn check_grid(&self, grid: &DepthGrid) -> Result<()> {
        if grid.n_nodes() != self.n_nodes {
            return Err(Error::contract(format!(
                "depth grid has {} nodes, ensemble stores {}",
                grid.n_nodes(),
                self.n_nodes
            )));
        }
        Ok(())
    }
}

#[inline]
fn drift(family: &ActivationFamily, z: &[f64], cloud: &[f64], k: usize, out: &mut [f64]) {
    out.fill(0.0);
    let m = cloud.len() / k;
    let inv = 1.0 / m as f64;
    for theta in cloud.chunks_exact(k) {
        family.add_f_scaled(z, theta, inv, out);
    }
}

#[inline]
fn adjoint_rhs(family: &ActivationFamily, p: &[f64], z: &[f64], cloud: &[f64], k: usize, out: &mut [f64]) {
    out.fill(0.0);
    let m = cloud.len() / k;
    let inv = -1.0 / m as f64;
    for theta in cloud.chunks_exact(k) {
        family.add_vjp_z(z, theta, p, inv, out);
    }
}

fn mid_cloud(ens: &ParamPathEnsemble, j: usize, buf: &mut [f64]) {
    let a = ens.node_cloud(j);
    let b = ens.node_cloud(j + 1);
    for (o, (x, y)) in buf.iter_mut().zip(a.iter().zip(b)) {
        *o = 0.5 * (x + y);
    }
}

/// Integrate the forward dynamics from `x`; returns the state path at the
/// depth nodes, flat `(N_t + 1) * d`.
pub fn forward_oie(
    ens: &ParamPathEnsemble,
    family: &ActivationFamily,
    x: &[f64],
    grid: &DepthGrid,
) -> Result<Vec<f64>> {
    ens.check_family(family)?;
    ens.check_grid(grid)?;
    let d = family.d;
    if x.len() != d {
        return Err(Error::contract(format!("input has dimension {}, family expects {d}", x.len())));
    }
    let n = grid.n_intervals();
    let h = grid.dt();
    let k = ens.k;
    let mut path = vec![0.0; (n + 1) * d];
    path[..d].copy_from_slice(x);
    let mut mid = vec![0.0; ens.width * k];
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut tmp = vec![0.0; d];
    for j in 0..n {
        mid_cloud(ens, j, &mut mid);
        let (head, tail) = path.split_at_mut((j + 1) * d);
        let z = &head[j * d..];
        let next = &mut tail[..d];

        drift(family, z, ens.node_cloud(j), k, &mut k1);
        for c in 0..d {
            tmp[c] = z[c] + 0.5 * h * k1[c];
        }
        drift(family, &tmp, &mid, k, &mut k2);
        for c in 0..d {
            tmp[c] = z[c] + 0.5 * h * k2[c];
        }
        drift(family, &tmp, &mid, k, &mut k3);
        for c in 0..d {
            tmp[c] = z[c] + h * k3[c];
        }
        drift(family, &tmp, ens.node_cloud(j + 1), k, &mut k4);
        for c in 0..d {
            next[c] = z[c] + h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "forward state", index: j + 1 });
        }
    }
    Ok(path)
}

/// Integrate the adjoint ODE backward from `t = 1` on the same grid; returns
/// the adjoint path at the depth nodes, flat `(N_t + 1) * d`.
pub fn adjoint_oie(
    ens: &ParamPathEnsemble,
    family: &ActivationFamily,
    g: &MeasuringFunction,
    z_path: &[f64],
    y: f64,
    grid: &DepthGrid,
) -> Result<Vec<f64>> {
    ens.check_family(family)?;
    ens.check_grid(grid)?;
    let d = family.d;
    if g.dim() != d {
        return Err(Error::contract("measuring function dimension mismatch"));
    }
    let n = grid.n_intervals();
    if z_path.len() != (n + 1) * d {
        return Err(Error::contract("state path length does not match grid"));
    }
    let h = grid.dt();
    let k = ens.k;

    // Node slopes for Hermite interpolation of z between nodes.
    let mut f_nodes = vec![0.0; (n + 1) * d];
    for j in 0..=n {
        let (zs, fs) = (&z_path[j * d..(j + 1) * d], &mut f_nodes[j * d..(j + 1) * d]);
        drift(family, zs, ens.node_cloud(j), k, fs);
    }

    let mut p_path = vec![0.0; (n + 1) * d];
    let residual = g.eval_unchecked(&z_path[n * d..]) - y;
    for (o, w) in p_path[n * d..].iter_mut().zip(g.grad()) {
        *o = residual * w;
    }

    let mut mid = vec![0.0; ens.width * k];
    let mut z_mid = vec![0.0; d];
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut tmp = vec![0.0; d];
    for j in (0..n).rev() {
        mid_cloud(ens, j, &mut mid);
        let z_lo = &z_path[j * d..(j + 1) * d];
        let z_hi = &z_path[(j + 1) * d..(j + 2) * d];
        let f_lo = &f_nodes[j * d..(j + 1) * d];
        let f_hi = &f_nodes[(j + 1) * d..(j + 2) * d];
        for c in 0..d {
            z_mid[c] = 0.5 * (z_lo[c] + z_hi[c]) + h / 8.0 * (f_lo[c] - f_hi[c]);
        }
        let (head, tail) = p_path.split_at_mut((j + 1) * d);
        let p_hi = &tail[..d];
        let p_lo = &mut head[j * d..];

        adjoint_rhs(family, p_hi, z_hi, ens.node_cloud(j + 1), k, &mut k1);
        for c in 0..d {
            tmp[c] = p_hi[c] - 0.5 * h * k1[c];
        }
        adjoint_rhs(family, &tmp, &z_mid, &mid, k, &mut k2);
        for c in 0..d {
            tmp[c] = p_hi[c] - 0.5 * h * k2[c];
        }
        adjoint_rhs(family, &tmp, &z_mid, &mid, k, &mut k3);
        for c in 0..d {
            tmp[c] = p_hi[c] - h * k3[c];
        }
        adjoint_rhs(family, &tmp, z_lo, ens.node_cloud(j), k, &mut k4);
        for c in 0..d {
            p_lo[c] = p_hi[c] - h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
        }
        if p_lo.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "adjoint state", index: j });
        }
    }
    Ok(p_path)
}

/// `E = mean_i 1/2 (g(Z(1;x_i)) - y_i)^2`.
pub fn loss_continuum(
    ens: &ParamPathEnsemble,
    family: &ActivationFamily,
    g: &MeasuringFunction,
    ds: &Dataset,
    grid: &DepthGrid,
) -> Result<f64> {
    let d = family.d;
    let per_sample: Vec<f64> = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let z = forward_oie(ens, family, ds.x(i), grid)?;
            let r = g.eval_unchecked(&z[grid.n_intervals() * d..]) - ds.y(i);
            Ok(0.5 * r * r)
        })
        .collect::<Result<_>>()?;
    Ok(per_sample.iter().sum::<f64>() / ds.len() as f64)
}

/// `E_s = E + e^{-s} (1/M) sum_m int_0^1 |theta_m|^2 dt` (trapezoid rule).
pub fn loss_regularized_continuum(
    ens: &ParamPathEnsemble,
    family: &ActivationFamily,
    g: &MeasuringFunction,
    ds: &Dataset,
    s: f64,
    grid: &DepthGrid,
) -> Result<f64> {
    if s < 0.0 || s.is_nan() {
        return Err(Error::contract("pseudo-time s must be nonnegative"));
    }
    Ok(loss_continuum(ens, family, g, ds, grid)? + (-s).exp() * ens.second_moment_integral())
}

/// The per-particle functional gradient table `G_m(t_j)`, same shape and
/// layout as the ensemble values, together with the loss `E` computed from
/// the same sweeps.
pub(crate) fn functional_grad_and_loss(
    ens: &ParamPathEnsemble,
    family: &ActivationFamily,
    g: &MeasuringFunction,
    ds: &Dataset,
    s: f64,
    grid: &DepthGrid,
) -> Result<(Vec<f64>, f64)> {
    if s < 0.0 || s.is_nan() {
        return Err(Error::contract("pseudo-time s must be nonnegative"));
    }
    ens.check_family(family)?;
    ens.check_grid(grid)?;
    let d = family.d;
    let n = ds.len();
    let paths: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let z = forward_oie(ens, family, ds.x(i), grid)?;
            let p = adjoint_oie(ens, family, g, &z, ds.y(i), grid)?;
            Ok((z, p))
        })
        .collect::<Result<_>>()?;

    let e = paths
        .iter()
        .enumerate()
        .map(|(i, (z, _))| {
            let r = g.eval_unchecked(&z[grid.n_intervals() * d..]) - ds.y(i);
            0.5 * r * r
        })
        .sum::<f64>()
        / n as f64;

    let (width, k) = (ens.width, ens.k);
    let reg = 2.0 * (-s).exp();
    let inv_n = 1.0 / n as f64;
    let mut table = vec![0.0; ens.n_nodes * width * k];
    table
        .par_chunks_mut(width * k)
        .enumerate()
        .for_each(|(j, row)| {
            for m in 0..width {
                let acc = &mut row[m * k..(m + 1) * k];
                let theta = ens.theta(j, m);
                for (z, p) in &paths {
                    family.add_vjp_theta(
                        &z[j * d..(j + 1) * d],
                        theta,
                        &p[j * d..(j + 1) * d],
                        inv_n,
                        acc,
                    );
                }
                for (a, t) in acc.iter_mut().zip(theta) {
                    *a += reg * t;
                }
            }
        });
    Ok((table, e))
}

/// `G_m(t_j) = mean_i[(df/dtheta)' p] + 2 e^{-s} theta_m(t_j)`, flat in the
/// ensemble's layout.
pub fn functional_grad(
    ens: &ParamPathEnsemble,
    family: &ActivationFamily,
    g: &MeasuringFunction,
    ds: &Dataset,
    s: f64,
    grid: &DepthGrid,
) -> Result<Vec<f64>> {
    Ok(functional_grad_and_loss(ens, family, g, ds, s, grid)?.0)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleSidecar {
    #[serde(rename = "N_t")]
    n_intervals: usize,
    #[serde(rename = "M")]
    width: usize,
    k: usize,
    family: FamilyKind,
    tau: f64,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Write the ensemble as `j,m,c0..c{k-1}` rows (`j` node index, `m` 1-based)
/// plus a JSON sidecar `{N_t, M, k, family, tau}`.
pub fn save_ensemble_csv(
    ens: &ParamPathEnsemble,
    family: &ActivationFamily,
    path: &Path,
) -> Result<()> {
    let mut out = String::from("j,m");
    for c in 0..ens.k {
        write!(out, ",c{c}").unwrap();
    }
    out.push('\n');
    for j in 0..ens.n_nodes {
        for m in 0..ens.width {
            write!(out, "{j},{}", m + 1).unwrap();
            for v in ens.theta(j, m) {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    let sidecar = EnsembleSidecar {
        n_intervals: ens.n_intervals(),
        width: ens.width,
        k: ens.k,
        family: family.kind,
        tau: family.tau,
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_ensemble_csv(path: &Path) -> Result<(ParamPathEnsemble, ActivationFamily)> {
    let sidecar: EnsembleSidecar =
        serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    let d = match sidecar.family {
        FamilyKind::DifferenceForm => (0..=sidecar.k)
            .find(|d| 2 * d * d + 2 * d == sidecar.k)
            .ok_or_else(|| Error::contract(format!("no state dimension gives k = {}", sidecar.k)))?,
        FamilyKind::ConventionalForm => {
            if sidecar.k % 2 != 1 {
                return Err(Error::contract(format!(
                    "conventional family needs odd k, got {}",
                    sidecar.k
                )));
            }
            (sidecar.k - 1) / 2
        }
    };
    let family = ActivationFamily::new(sidecar.family, d, sidecar.tau)?;
    let n_nodes = sidecar.n_intervals + 1;

    let text = std::fs::read_to_string(path)?;
    let mut values = vec![f64::NAN; n_nodes * sidecar.width * sidecar.k];
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
        let j: usize = fields[0]
            .parse()
            .map_err(|_| Error::Parse { row, msg: "bad node index".into() })?;
        let m: usize = fields[1]
            .parse()
            .map_err(|_| Error::Parse { row, msg: "bad particle index".into() })?;
        if j >= n_nodes || m == 0 || m > sidecar.width {
            return Err(Error::Parse { row, msg: format!("index ({j},{m}) out of range") });
        }
        let at = (j * sidecar.width + (m - 1)) * sidecar.k;
        for (c, f) in fields[2..].iter().enumerate() {
            values[at + c] = f
                .parse()
                .map_err(|_| Error::Parse { row, msg: format!("not a number: {f:?}") })?;
        }
        seen += 1;
    }
    if seen != n_nodes * sidecar.width {
        return Err(Error::Parse {
            row: text.lines().count(),
            msg: format!("expected {} rows, found {seen}", n_nodes * sidecar.width),
        });
    }
    Ok((ParamPathEnsemble::new(n_nodes, sidecar.width, sidecar.k, values)?, family))
}
