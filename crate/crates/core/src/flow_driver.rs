//! Pseudo-time integration of the two regularized gradient flows. The
//! finite grid follows `dTheta/ds = -ML grad E - 2 e^{-s} Theta`; the
//! particle ensemble follows `dtheta_m/ds = -G_m` with `G_m` the per-particle
//! functional gradient (data term plus `2 e^{-s} theta_m`). Both flows record
//! an energy trace that the audit checks for monotonicity of `E_s`.
//!
//! The exponential factor is evaluated at the step's left endpoint for Euler
//! and at the stage times for RK4. Monotonicity violations are flagged in the
//! trace rather than aborting: the decay statement is continuous-time, and a
//! discrete step can overshoot.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::activation::ActivationFamily;
use crate::continuum::{functional_grad_and_loss, DepthGrid, ParamPathEnsemble};
use crate::dataset::{Dataset, MeasuringFunction};
use crate::error::{Error, Result};
use crate::resnet_discrete::{mean_vjp_and_loss, ParamGrid};

/// Slack used for the in-flight uptick flags recorded by the flows. The
/// post-hoc [`energy_audit`] takes the slack as an argument instead.
pub const DEFAULT_AUDIT_SLACK: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    Euler,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    /// Pseudo-time step.
    pub h_s: f64,
    pub steps: usize,
    #[serde(default = "default_integrator")]
    pub integrator: Integrator,
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_integrator() -> Integrator {
    Integrator::Euler
}

fn default_snapshot_every() -> usize {
    1
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.h_s > 0.0 && self.h_s.is_finite()) {
            return Err(Error::contract("flow step h_s must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::contract("flow needs at least one step"));
        }
        if self.snapshot_every == 0 {
            return Err(Error::contract("snapshot_every must be at least 1"));
        }
        Ok(())
    }
}

/// One snapshot of a flow: pseudo-time, losses, the model's second-moment
/// term, the norm of the drift at this state, and wall time since the
/// previous snapshot. `wall_ms` is diagnostic only and excluded from
/// [`FlowTrace::digest`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub s: f64,
    pub e: f64,
    pub e_s: f64,
    pub second_moment: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlowTrace {
    rows: Vec<TraceRow>,
    upticks: Vec<usize>,
}

impl FlowTrace {
    pub fn rows(&self) -> &[TraceRow] {
        &self.rows
    }

    /// Row indices where `E_s` rose beyond [`DEFAULT_AUDIT_SLACK`] relative
    /// to the previous row.
    pub fn upticks(&self) -> &[usize] {
        &self.upticks
    }

    fn push(&mut self, row: TraceRow) -> Result<()> {
        if !(row.e.is_finite() && row.e_s.is_finite() && row.grad_norm.is_finite()) {
            return Err(Error::NonFinite { context: "flow trace", index: self.rows.len() });
        }
        if let Some(prev) = self.rows.last() {
            if row.s <= prev.s {
                return Err(Error::contract(format!(
                    "trace rows must have strictly increasing s: {} after {}",
                    row.s, prev.s
                )));
            }
            if row.e_s > prev.e_s + DEFAULT_AUDIT_SLACK {
                self.upticks.push(self.rows.len());
            }
        }
        self.rows.push(row);
        Ok(())
    }

    /// Hash of the deterministic columns; reruns of the same configuration
    /// produce the same digest.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for r in &self.rows {
            hasher.update(
                format!("{},{},{},{},{}\n", r.s, r.e, r.e_s, r.second_moment, r.grad_norm)
                    .as_bytes(),
            );
        }
        hex::encode(hasher.finalize())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("s,E,E_s,second_moment,grad_norm,wall_ms\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.s, r.e, r.e_s, r.second_moment, r.grad_norm, r.wall_ms
            )
            .unwrap();
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<FlowTrace> {
        let text = std::fs::read_to_string(path)?;
        let mut trace = FlowTrace::default();
        for (idx, line) in text.lines().enumerate() {
            if idx == 0 || line.trim().is_empty() {
                continue;
            }
            let row = idx + 1;
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 6 {
                return Err(Error::Parse {
                    row,
                    msg: format!("expected 6 columns, found {}", fields.len()),
                });
            }
            let mut vals = [0.0; 6];
            for (slot, f) in vals.iter_mut().zip(&fields) {
                *slot = f.parse::<f64>().map_err(|_| Error::Parse {
                    row,
                    msg: format!("not a number: {f:?}"),
                })?;
            }
            trace.push(TraceRow {
                s: vals[0],
                e: vals[1],
                e_s: vals[2],
                second_moment: vals[3],
                grad_norm: vals[4],
                wall_ms: vals[5],
            })?;
        }
        if trace.rows.is_empty() {
            return Err(Error::Parse { row: 1, msg: "empty trace".into() });
        }
        Ok(trace)
    }
}

/// A consecutive pair where `E_s` increased beyond the audit slack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditViolation {
    /// Index of the later row.
    pub row: usize,
    pub s: f64,
    /// `E_s(row) - E_s(row - 1)`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub slack: f64,
    pub violations: Vec<AuditViolation>,
}

impl AuditReport {
    pub fn pass(&self) -> bool {
        self.violations.is_empty()
    }
}

/// List every consecutive pair with `E_s(k+1) > E_s(k) + slack`.
pub fn energy_audit(trace: &FlowTrace, slack: f64) -> AuditReport {
    let mut violations = Vec::new();
    for (i, pair) in trace.rows.windows(2).enumerate() {
        let delta = pair[1].e_s - pair[0].e_s;
        if delta > slack {
            violations.push(AuditViolation { row: i + 1, s: pair[1].s, delta });
        }
    }
    AuditReport { slack, violations }
}

fn frobenius(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Shared driver: integrates `d values / ds = -drift(values, s)` and records
/// the trace. `drift` returns the full drift table together with the loss `E`
/// evaluated at the same state; `second_moment` is the model's regularizer
/// term, so `E_s = E + e^{-s} * second_moment`.
fn run_flow(
    cfg: &FlowConfig,
    mut values: Vec<f64>,
    mut drift: impl FnMut(&[f64], f64) -> Result<(Vec<f64>, f64)>,
    mut second_moment: impl FnMut(&[f64]) -> f64,
) -> Result<(Vec<f64>, FlowTrace)> {
    cfg.validate()?;
    let h = cfg.h_s;
    let mut trace = FlowTrace::default();
    let mut clock = Instant::now();
    let mut record =
        |trace: &mut FlowTrace, values: &[f64], s: f64, d: &[f64], e: f64, clock: &mut Instant| {
            let sm = second_moment(values);
            let wall_ms = clock.elapsed().as_secs_f64() * 1e3;
            *clock = Instant::now();
            trace.push(TraceRow {
                s,
                e,
                e_s: e + (-s).exp() * sm,
                second_moment: sm,
                grad_norm: frobenius(d),
                wall_ms,
            })
        };

    for step in 0..cfg.steps {
        let s = step as f64 * h;
        let (d1, e) = drift(&values, s)?;
        if step % cfg.snapshot_every == 0 {
            record(&mut trace, &values, s, &d1, e, &mut clock)?;
        }
        match cfg.integrator {
            Integrator::Euler => {
                for (v, d) in values.iter_mut().zip(&d1) {
                    *v -= h * d;
                }
            }
            Integrator::Rk4 => {
                let mut stage = values.clone();
                for (v, d) in stage.iter_mut().zip(&d1) {
                    *v -= 0.5 * h * d;
                }
                let (d2, _) = drift(&stage, s + 0.5 * h)?;
                stage.copy_from_slice(&values);
                for (v, d) in stage.iter_mut().zip(&d2) {
                    *v -= 0.5 * h * d;
                }
                let (d3, _) = drift(&stage, s + 0.5 * h)?;
                stage.copy_from_slice(&values);
                for (v, d) in stage.iter_mut().zip(&d3) {
                    *v -= h * d;
                }
                let (d4, _) = drift(&stage, s + h)?;
                for (i, v) in values.iter_mut().enumerate() {
                    *v -= h / 6.0 * (d1[i] + 2.0 * d2[i] + 2.0 * d3[i] + d4[i]);
                }
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "flow parameters", index: step });
        }
    }
    let s_end = cfg.steps as f64 * h;
    let (d_end, e_end) = drift(&values, s_end)?;
    record(&mut trace, &values, s_end, &d_end, e_end, &mut clock)?;
    Ok((values, trace))
}

/// Integrate the finite-grid flow from `grid`; returns the final grid and
/// the trace. Deterministic for fixed inputs.
pub fn flow_discrete(
    grid: &ParamGrid,
    family: &ActivationFamily,
    g: &MeasuringFunction,
    ds: &Dataset,
    cfg: &FlowConfig,
) -> Result<(ParamGrid, FlowTrace)> {
    let mut scratch = grid.clone();
    let lm = (grid.layers() * grid.width()) as f64;
    let drift = |values: &[f64], s: f64| -> Result<(Vec<f64>, f64)> {
        scratch.values_mut().copy_from_slice(values);
        let (mut table, e) = mean_vjp_and_loss(&scratch, family, g, ds)?;
        let reg = 2.0 * (-s).exp();
        for (t, v) in table.iter_mut().zip(values) {
            *t += reg * v;
        }
        Ok((table, e))
    };
    let second_moment = |values: &[f64]| values.iter().map(|v| v * v).sum::<f64>() / lm;
    let (values, trace) = run_flow(cfg, grid.values().to_vec(), drift, second_moment)?;
    Ok((ParamGrid::new(grid.layers(), grid.width(), grid.param_len(), values)?, trace))
}

/// Integrate the particle-ensemble flow from `ens` on `depth_grid`.
pub fn flow_continuum(
    ens: &ParamPathEnsemble,
    family: &ActivationFamily,
    g: &MeasuringFunction,
    ds: &Dataset,
    depth_grid: &DepthGrid,
    cfg: &FlowConfig,
) -> Result<(ParamPathEnsemble, FlowTrace)> {
    let mut scratch = ens.clone();
    let drift = |values: &[f64], s: f64| -> Result<(Vec<f64>, f64)> {
        scratch.values_mut().copy_from_slice(values);
        functional_grad_and_loss(&scratch, family, g, ds, s, depth_grid)
    };
    let mut scratch_sm = ens.clone();
    let second_moment = |values: &[f64]| {
        scratch_sm.values_mut().copy_from_slice(values);
        scratch_sm.second_moment_integral()
    };
    let (values, trace) = run_flow(cfg, ens.values().to_vec(), drift, second_moment)?;
    Ok((
        ParamPathEnsemble::new(ens.n_nodes(), ens.width(), ens.param_len(), values)?,
        trace,
    ))
}
