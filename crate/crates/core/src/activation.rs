//! The parametric residual map `f(z, theta)` and its Jacobians.
//!
//! Two families are provided. The difference form
//! `f = sigma(theta1 z + theta2) - sigma(theta3 z + theta4)` (the default)
//! and the conventional form `f = U sigma(W'z + b)`. In both, `sigma` is a
//! smoothed ReLU: `sigma(u) = tau * ln(1 + exp(u / tau))`, which is C2 with
//! `0 < sigma' < 1`, so every Jacobian below is well defined everywhere.
//!
//! Parameter layout is frozen so that parameter tables written by one build
//! load identically in another:
//! - difference form: `[theta1 (d*d, row-major), theta2 (d), theta3 (d*d,
//!   row-major), theta4 (d)]`, so `k = 2d^2 + 2d`;
//! - conventional form: `[W (d), U (d), b (1)]`, so `k = 2d + 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which parametric family the residual map belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    DifferenceForm,
    ConventionalForm,
}

/// A fully specified residual-map family: kind, state dimension, and the
/// smoothing width of the regularized ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationFamily {
    pub kind: FamilyKind,
    pub d: usize,
    pub tau: f64,
}

impl ActivationFamily {
    pub fn new(kind: FamilyKind, d: usize, tau: f64) -> Result<Self> {
        if d == 0 {
            return Err(Error::contract("state dimension d must be positive"));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::contract(format!(
                "smoothing width tau must be positive and finite, got {tau}"
            )));
        }
        Ok(ActivationFamily { kind, d, tau })
    }

    /// Default family for a given state dimension: difference form, tau = 1.
    pub fn difference(d: usize) -> Result<Self> {
        Self::new(FamilyKind::DifferenceForm, d, 1.0)
    }

    pub fn conventional(d: usize) -> Result<Self> {
        Self::new(FamilyKind::ConventionalForm, d, 1.0)
    }

    /// Parameter count `k` determined by `(kind, d)`.
    pub fn param_len(&self) -> usize {
        match self.kind {
            FamilyKind::DifferenceForm => 2 * self.d * self.d + 2 * self.d,
            FamilyKind::ConventionalForm => 2 * self.d + 1,
        }
    }

    fn check_dims(&self, z: &[f64], theta: &[f64]) -> Result<()> {
        if z.len() != self.d {
            return Err(Error::contract(format!(
                "state has dimension {}, family expects {}",
                z.len(),
                self.d
            )));
        }
        if theta.len() != self.param_len() {
            return Err(Error::contract(format!(
                "parameter vector has length {}, family expects {}",
                theta.len(),
                self.param_len()
            )));
        }
        Ok(())
    }

    /// `f(z, theta)`.
    pub fn eval_f(&self, z: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(z, theta)?;
        let mut out = vec![0.0; self.d];
        self.add_f_scaled(z, theta, 1.0, &mut out);
        Ok(out)
    }

    /// `df/dz` as a row-major `d x d` matrix.
    pub fn jac_z(&self, z: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(z, theta)?;
        let d = self.d;
        let mut out = vec![0.0; d * d];
        match self.kind {
            FamilyKind::DifferenceForm => {
                let (t1, t2, t3, t4) = split_difference(theta, d);
                for i in 0..d {
                    let su = sigma_prime(affine(&t1[i * d..(i + 1) * d], z, t2[i]), self.tau);
                    let sv = sigma_prime(affine(&t3[i * d..(i + 1) * d], z, t4[i]), self.tau);
                    for j in 0..d {
                        out[i * d + j] = su * t1[i * d + j] - sv * t3[i * d + j];
                    }
                }
            }
            FamilyKind::ConventionalForm => {
                let (w, u, b) = split_conventional(theta, d);
                let sp = sigma_prime(affine(w, z, b), self.tau);
                for i in 0..d {
                    for j in 0..d {
                        out[i * d + j] = u[i] * sp * w[j];
                    }
                }
            }
        }
        Ok(out)
    }

    /// `df/dtheta` as a row-major `d x k` matrix, columns in the frozen
    /// parameter layout order.
    pub fn jac_theta(&self, z: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(z, theta)?;
        let d = self.d;
        let k = self.param_len();
        let mut out = vec![0.0; d * k];
        match self.kind {
            FamilyKind::DifferenceForm => {
                let (t1, t2, t3, t4) = split_difference(theta, d);
                let dd = d * d;
                for i in 0..d {
                    let su = sigma_prime(affine(&t1[i * d..(i + 1) * d], z, t2[i]), self.tau);
                    let sv = sigma_prime(affine(&t3[i * d..(i + 1) * d], z, t4[i]), self.tau);
                    let row = &mut out[i * k..(i + 1) * k];
                    for b in 0..d {
                        row[i * d + b] = su * z[b]; // theta1[i,b]
                        row[dd + d + i * d + b] = -sv * z[b]; // theta3[i,b]
                    }
                    row[dd + i] = su; // theta2[i]
                    row[dd + d + dd + i] = -sv; // theta4[i]
                }
            }
            FamilyKind::ConventionalForm => {
                let (w, u, b) = split_conventional(theta, d);
                let a = affine(w, z, b);
                let s = sigma(a, self.tau);
                let sp = sigma_prime(a, self.tau);
                for i in 0..d {
                    let row = &mut out[i * k..(i + 1) * k];
                    for j in 0..d {
                        row[j] = u[i] * sp * z[j]; // W[j]
                    }
                    row[d + i] = s; // U[i]
                    row[2 * d] = u[i] * sp; // b
                }
            }
        }
        Ok(out)
    }

    /// `acc += scale * f(z, theta)`. Hot path for the integrators; dimensions
    /// are the caller's responsibility.
    pub(crate) fn add_f_scaled(&self, z: &[f64], theta: &[f64], scale: f64, acc: &mut [f64]) {
        let d = self.d;
        debug_assert_eq!(z.len(), d);
        debug_assert_eq!(theta.len(), self.param_len());
        debug_assert_eq!(acc.len(), d);
        match self.kind {
            FamilyKind::DifferenceForm => {
                let (t1, t2, t3, t4) = split_difference(theta, d);
                for i in 0..d {
                    let u = affine(&t1[i * d..(i + 1) * d], z, t2[i]);
                    let v = affine(&t3[i * d..(i + 1) * d], z, t4[i]);
                    acc[i] += scale * (sigma(u, self.tau) - sigma(v, self.tau));
                }
            }
            FamilyKind::ConventionalForm => {
                let (w, u, b) = split_conventional(theta, d);
                let s = sigma(affine(w, z, b), self.tau);
                for i in 0..d {
                    acc[i] += scale * u[i] * s;
                }
            }
        }
    }

    /// `acc += scale * p' df/dz` (a length-`d` row vector).
    pub(crate) fn add_vjp_z(&self, z: &[f64], theta: &[f64], p: &[f64], scale: f64, acc: &mut [f64]) {
        let d = self.d;
        debug_assert_eq!(acc.len(), d);
        match self.kind {
            FamilyKind::DifferenceForm => {
                let (t1, t2, t3, t4) = split_difference(theta, d);
                for i in 0..d {
                    let su = sigma_prime(affine(&t1[i * d..(i + 1) * d], z, t2[i]), self.tau);
                    let sv = sigma_prime(affine(&t3[i * d..(i + 1) * d], z, t4[i]), self.tau);
                    let c = scale * p[i];
                    for j in 0..d {
                        acc[j] += c * (su * t1[i * d + j] - sv * t3[i * d + j]);
                    }
                }
            }
            FamilyKind::ConventionalForm => {
                let (w, u, b) = split_conventional(theta, d);
                let sp = sigma_prime(affine(w, z, b), self.tau);
                let pu: f64 = p.iter().zip(u).map(|(a, b)| a * b).sum();
                let c = scale * pu * sp;
                for j in 0..d {
                    acc[j] += c * w[j];
                }
            }
        }
    }

    /// `acc += scale * p' df/dtheta` (a length-`k` row vector).
    pub(crate) fn add_vjp_theta(
        &self,
        z: &[f64],
        theta: &[f64],
        p: &[f64],
        scale: f64,
        acc: &mut [f64],
    ) {
        let d = self.d;
        debug_assert_eq!(acc.len(), self.param_len());
        match self.kind {
            FamilyKind::DifferenceForm => {
                let (t1, t2, t3, t4) = split_difference(theta, d);
                let dd = d * d;
                for i in 0..d {
                    let su = sigma_prime(affine(&t1[i * d..(i + 1) * d], z, t2[i]), self.tau);
                    let sv = sigma_prime(affine(&t3[i * d..(i + 1) * d], z, t4[i]), self.tau);
                    let cu = scale * p[i] * su;
                    let cv = scale * p[i] * sv;
                    for b in 0..d {
                        acc[i * d + b] += cu * z[b];
                        acc[dd + d + i * d + b] -= cv * z[b];
                    }
                    acc[dd + i] += cu;
                    acc[dd + d + dd + i] -= cv;
                }
            }
            FamilyKind::ConventionalForm => {
                let (w, u, b) = split_conventional(theta, d);
                let a = affine(w, z, b);
                let s = sigma(a, self.tau);
                let sp = sigma_prime(a, self.tau);
                let pu: f64 = p.iter().zip(u).map(|(x, y)| x * y).sum();
                for j in 0..d {
                    acc[j] += scale * pu * sp * z[j];
                    acc[d + j] += scale * p[j] * s;
                }
                acc[2 * d] += scale * pu * sp;
            }
        }
    }
}

fn split_difference(theta: &[f64], d: usize) -> (&[f64], &[f64], &[f64], &[f64]) {
    let dd = d * d;
    (
        &theta[..dd],
        &theta[dd..dd + d],
        &theta[dd + d..2 * dd + d],
        &theta[2 * dd + d..],
    )
}

fn split_conventional(theta: &[f64], d: usize) -> (&[f64], &[f64], f64) {
    (&theta[..d], &theta[d..2 * d], theta[2 * d])
}

#[inline]
fn affine(row: &[f64], z: &[f64], b: f64) -> f64 {
    row.iter().zip(z).fold(b, |acc, (r, x)| acc + r * x)
}

/// Smoothed ReLU, overflow-stable: `tau * ln(1 + exp(u/tau))`.
#[inline]
pub fn sigma(u: f64, tau: f64) -> f64 {
    let x = u / tau;
    tau * (x.max(0.0) + (-x.abs()).exp().ln_1p())
}

/// `d sigma / du = logistic(u / tau)`, in (0, 1).
#[inline]
pub fn sigma_prime(u: f64, tau: f64) -> f64 {
    let x = u / tau;
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
    }

    /// Central finite difference of `f` with respect to `x`, one column per
    /// coordinate of `x`.
    fn fd_jacobian(
        f: impl Fn(&[f64]) -> Vec<f64>,
        x: &[f64],
        h: f64,
        out_dim: usize,
    ) -> Vec<f64> {
        let n = x.len();
        let mut jac = vec![0.0; out_dim * n];
        for c in 0..n {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[c] += h;
            xm[c] -= h;
            let fp = f(&xp);
            let fm = f(&xm);
            for r in 0..out_dim {
                jac[r * n + c] = (fp[r] - fm[r]) / (2.0 * h);
            }
        }
        jac
    }

    fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_params_difference_form_is_zero() {
        let fam = ActivationFamily::difference(1).unwrap();
        let f = fam.eval_f(&[3.7], &[0.0; 4]).unwrap();
        assert_eq!(f, vec![0.0]);
    }

    #[test]
    fn zero_output_weight_conventional_form_is_zero() {
        let fam = ActivationFamily::conventional(1).unwrap();
        // layout [W, U, b]; U = 0
        let f = fam.eval_f(&[2.5], &[1.3, 0.0, -0.4]).unwrap();
        assert_eq!(f, vec![0.0]);
    }

    #[test]
    fn difference_form_matches_softplus_difference() {
        // d=1, theta1=1, others 0, z=1: f = sp(1) - sp(0)
        let fam = ActivationFamily::difference(1).unwrap();
        let f = fam.eval_f(&[1.0], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let expected = (1.0f64.exp() + 1.0).ln() - 2.0f64.ln();
        assert!((f[0] - expected).abs() < 1e-15);
        assert!((expected - 0.62011).abs() < 1e-5);
    }

    #[test]
    fn jac_z_at_zero_params_is_zero() {
        let fam = ActivationFamily::difference(2).unwrap();
        let jac = fam.jac_z(&[0.3, -1.2], &vec![0.0; fam.param_len()]).unwrap();
        assert!(jac.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn jac_z_derived_value() {
        // d=1, theta1=1, others 0, z=0, tau=1: sigma'(0) * 1 = 0.5
        let fam = ActivationFamily::difference(1).unwrap();
        let jac = fam.jac_z(&[0.0], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((jac[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn jac_theta_bias_block_at_zero() {
        // z=0, theta=0: column for theta2[i] has sigma'(0)=0.5 on the diagonal.
        let d = 2;
        let fam = ActivationFamily::difference(d).unwrap();
        let k = fam.param_len();
        let jac = fam.jac_theta(&[0.0; 2], &vec![0.0; k]).unwrap();
        let dd = d * d;
        for i in 0..d {
            for a in 0..d {
                let got = jac[i * k + dd + a];
                let want = if i == a { 0.5 } else { 0.0 };
                assert!((got - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn conventional_u_block_is_diag_sigma() {
        let d = 2;
        let fam = ActivationFamily::conventional(d).unwrap();
        let theta = [0.3, -0.7, 1.1, 0.2, 0.5]; // W, U, b
        let z = [0.9, -0.1];
        let k = fam.param_len();
        let jac = fam.jac_theta(&z, &theta).unwrap();
        let a = 0.3 * 0.9 + (-0.7) * (-0.1) + 0.5;
        let s = sigma(a, 1.0);
        for i in 0..d {
            for j in 0..d {
                let got = jac[i * k + d + j];
                let want = if i == j { s } else { 0.0 };
                assert!((got - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..100 {
            let d = rng.gen_range(1..=3);
            let fam = if trial % 2 == 0 {
                ActivationFamily::new(FamilyKind::DifferenceForm, d, rng.gen_range(0.5..2.0))
                    .unwrap()
            } else {
                ActivationFamily::new(FamilyKind::ConventionalForm, d, rng.gen_range(0.5..2.0))
                    .unwrap()
            };
            let k = fam.param_len();
            let z = rand_vec(&mut rng, d, 2.0);
            let theta = rand_vec(&mut rng, k, 2.0);

            let jz = fam.jac_z(&z, &theta).unwrap();
            let fd_z = fd_jacobian(|zz| fam.eval_f(zz, &theta).unwrap(), &z, 1e-6, d);
            assert!(
                max_rel_err(&jz, &fd_z, 1e-6) < 1e-5,
                "jac_z mismatch on trial {trial}"
            );

            let jt = fam.jac_theta(&z, &theta).unwrap();
            let fd_t = fd_jacobian(|tt| fam.eval_f(&z, tt).unwrap(), &theta, 1e-6, d);
            assert!(
                max_rel_err(&jt, &fd_t, 1e-6) < 1e-5,
                "jac_theta mismatch on trial {trial}"
            );
        }
    }

    #[test]
    fn growth_bound_constant_is_stable() {
        // |f(z,theta)| <= C (|theta|+1)(|z|+1): the measured C over the first
        // half of the probes bounds the second half up to a small factor.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fam = ActivationFamily::difference(2).unwrap();
        let k = fam.param_len();
        let measure = |rng: &mut ChaCha8Rng, n: usize| -> f64 {
            let mut c: f64 = 0.0;
            for _ in 0..n {
                let z = rand_vec(rng, 2, 5.0);
                let theta = rand_vec(rng, k, 5.0);
                let f = fam.eval_f(&z, &theta).unwrap();
                let fn2 = f.iter().map(|v| v * v).sum::<f64>().sqrt();
                let tn = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
                let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                c = c.max(fn2 / ((tn + 1.0) * (zn + 1.0)));
            }
            c
        };
        let c1 = measure(&mut rng, 5_000);
        let c2 = measure(&mut rng, 5_000);
        assert!(c1.is_finite() && c2.is_finite());
        assert!(c2 <= 1.5 * c1, "growth constant drifted: {c1} -> {c2}");
    }

    #[test]
    fn dimension_mismatch_is_contract_violation() {
        let fam = ActivationFamily::difference(2).unwrap();
        assert!(fam.eval_f(&[1.0], &vec![0.0; fam.param_len()]).is_err());
        assert!(fam.eval_f(&[1.0, 2.0], &[0.0; 3]).is_err());
        assert!(ActivationFamily::new(FamilyKind::DifferenceForm, 0, 1.0).is_err());
        assert!(ActivationFamily::new(FamilyKind::DifferenceForm, 1, -1.0).is_err());
    }

    proptest::proptest! {
        // theta1 = theta3 and theta2 = theta4 cancel exactly, for f and for
        // both Jacobians.
        #[test]
        fn symmetric_difference_params_cancel(
            a in proptest::collection::vec(-3.0f64..3.0, 4),
            b in proptest::collection::vec(-3.0f64..3.0, 2),
            z in proptest::collection::vec(-3.0f64..3.0, 2),
        ) {
            let fam = ActivationFamily::difference(2).unwrap();
            let mut theta = Vec::with_capacity(fam.param_len());
            theta.extend_from_slice(&a);
            theta.extend_from_slice(&b);
            theta.extend_from_slice(&a);
            theta.extend_from_slice(&b);
            let f = fam.eval_f(&z, &theta).unwrap();
            proptest::prop_assert!(f.iter().all(|&v| v == 0.0));
            let jz = fam.jac_z(&z, &theta).unwrap();
            proptest::prop_assert!(jz.iter().all(|&v| v == 0.0));
        }
    }
}
