//! Command implementations. Every command validates its inputs, dispatches
//! to the library, writes its artifacts under the output directory, and
//! returns the process exit code: 0 pass, 1 quantitative-verdict fail,
//! 2 usage/config error, 3 numeric abort.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use resnet_lab_core::continuum::{self, DepthGrid, ParamPathEnsemble};
use resnet_lab_core::dataset::Dataset;
use resnet_lab_core::error::Result;
use resnet_lab_core::experiments::{self, ExperimentEnv, SweepPoint, SweepResult};
use resnet_lab_core::flow_driver::{self, FlowTrace};
use resnet_lab_core::manifest::{dataset_checksum, RunManifest};
use resnet_lab_core::measure;
use resnet_lab_core::resnet_discrete::{self, ParamGrid};

use crate::config::RunConfig;

pub const EXIT_PASS: i32 = 0;
pub const EXIT_VERDICT_FAIL: i32 = 1;
pub const EXIT_CONFIG_ERROR: i32 = 2;
pub const EXIT_NUMERIC_ABORT: i32 = 3;

pub struct CommandContext<'a> {
    pub cfg: &'a RunConfig,
    pub config_bytes: &'a [u8],
    pub out_dir: &'a Path,
}

impl CommandContext<'_> {
    fn manifest(&self, command: &str, ds: &Dataset) -> RunManifest {
        let mut m = RunManifest::new(command, self.config_bytes, self.cfg.seed);
        m.versions.insert("resnet-lab".to_string(), env!("CARGO_PKG_VERSION").to_string());
        m.dataset_sha256 = Some(dataset_checksum(ds));
        m
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

fn write_manifest(ctx: &CommandContext, mut manifest: RunManifest, outputs: &[&str]) -> Result<()> {
    manifest.outputs = outputs.iter().map(|s| s.to_string()).collect();
    manifest.save(&ctx.path("manifest.json"))?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Raw sweep points plus the fit, in a form gnuplot plots directly with
/// `set logscale xy`.
fn write_loglog_dat(path: &Path, result: &SweepResult, label: &str) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "# {label}").unwrap();
    writeln!(
        out,
        "# fitted slope {} (ci {} .. {}), R^2 {}",
        result.fitted_slope, result.slope_ci.0, result.slope_ci.1, result.r_squared
    )
    .unwrap();
    writeln!(out, "# axis metric").unwrap();
    for p in &result.points {
        writeln!(out, "{} {}", p.value, p.metric).unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_points_csv(path: &Path, header: &str, rows: &[Vec<f64>]) -> Result<()> {
    let mut out = String::from(header);
    out.push('\n');
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn train_discrete(ctx: &CommandContext) -> Result<i32> {
    let family = ctx.cfg.family()?;
    let g = ctx.cfg.measuring()?;
    let ds = ctx.cfg.dataset()?;
    let flow = ctx.cfg.flow()?;
    let model = ctx.cfg.model()?;
    let layers = model
        .layers
        .ok_or_else(|| resnet_lab_core::Error::contract("train-discrete needs model.layers"))?;

    let mut rng = seeded(ctx.cfg.seed);
    let k = family.param_len();
    let columns: Vec<Vec<f64>> =
        (0..model.width).map(|_| ctx.cfg.init.sample(&mut rng, k)).collect();
    let grid = ParamGrid::from_columns(layers, &columns, k)?;
    let (final_grid, trace) = flow_driver::flow_discrete(&grid, &family, &g, &ds, flow)?;

    resnet_discrete::save_grid_csv(&final_grid, &family, &ctx.path("final_grid.csv"))?;
    trace.save_csv(&ctx.path("trace.csv"))?;
    let mut manifest = ctx.manifest("train-discrete", &ds);
    manifest.trace_digest = Some(trace.digest());
    write_manifest(ctx, manifest, &["final_grid.csv", "final_grid.json", "trace.csv"])?;

    let last = trace.rows().last().unwrap();
    println!("train-discrete: final E = {:.6e}, E_s = {:.6e} at s = {}", last.e, last.e_s, last.s);
    Ok(EXIT_PASS)
}

pub fn train_continuum(ctx: &CommandContext) -> Result<i32> {
    let family = ctx.cfg.family()?;
    let g = ctx.cfg.measuring()?;
    let ds = ctx.cfg.dataset()?;
    let flow = ctx.cfg.flow()?;
    let model = ctx.cfg.model()?;
    let n_t = model
        .n_t
        .ok_or_else(|| resnet_lab_core::Error::contract("train-continuum needs model.n_t"))?;

    let grid = DepthGrid::new(n_t)?;
    let mut rng = seeded(ctx.cfg.seed);
    let ens =
        ParamPathEnsemble::sample_t_constant(&grid, model.width, &family, &ctx.cfg.init, &mut rng)?;
    let (final_ens, trace) = flow_driver::flow_continuum(&ens, &family, &g, &ds, &grid, flow)?;

    continuum::save_ensemble_csv(&final_ens, &family, &ctx.path("final_ensemble.csv"))?;
    trace.save_csv(&ctx.path("trace.csv"))?;
    let mut manifest = ctx.manifest("train-continuum", &ds);
    manifest.trace_digest = Some(trace.digest());
    write_manifest(ctx, manifest, &["final_ensemble.csv", "final_ensemble.json", "trace.csv"])?;

    let last = trace.rows().last().unwrap();
    println!("train-continuum: final E = {:.6e}, E_s = {:.6e} at s = {}", last.e, last.e_s, last.s);
    Ok(EXIT_PASS)
}

pub fn sweep_depth(ctx: &CommandContext) -> Result<i32> {
    let family = ctx.cfg.family()?;
    let g = ctx.cfg.measuring()?;
    let ds = ctx.cfg.dataset()?;
    let flow = ctx.cfg.flow()?;
    let sweep_cfg = ctx
        .cfg
        .depth_sweep
        .as_ref()
        .ok_or_else(|| resnet_lab_core::Error::contract("config needs a depth_sweep section"))?;

    let env = ExperimentEnv { family: &family, g: &g, ds: &ds, init: &ctx.cfg.init };
    let report = experiments::depth_sweep(
        &env,
        flow,
        sweep_cfg.width,
        &sweep_cfg.l_values,
        sweep_cfg.n_t_ref,
        ctx.cfg.seed,
    )?;

    let rows: Vec<Vec<f64>> =
        report.sweep.points.iter().map(|p| vec![p.value, p.metric]).collect();
    write_points_csv(&ctx.path("results.csv"), "L,abs_error", &rows)?;
    write_loglog_dat(&ctx.path("loglog.dat"), &report.sweep, "depth sweep |E_L - E_ref| vs L")?;
    write_json(&ctx.path("report.json"), &report)?;
    write_manifest(
        ctx,
        ctx.manifest("sweep-depth", &ds),
        &["results.csv", "loglog.dat", "report.json"],
    )?;

    let pass = report.sweep.fitted_slope >= sweep_cfg.slope_lo
        && report.sweep.fitted_slope <= sweep_cfg.slope_hi
        && report.sweep.r_squared >= sweep_cfg.min_r2;
    println!(
        "sweep-depth: slope = {:.3} (want [{}, {}]), R^2 = {:.3} (want >= {}): {}",
        report.sweep.fitted_slope,
        sweep_cfg.slope_lo,
        sweep_cfg.slope_hi,
        report.sweep.r_squared,
        sweep_cfg.min_r2,
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(if pass { EXIT_PASS } else { EXIT_VERDICT_FAIL })
}

pub fn sweep_width(ctx: &CommandContext) -> Result<i32> {
    let family = ctx.cfg.family()?;
    let g = ctx.cfg.measuring()?;
    let ds = ctx.cfg.dataset()?;
    let flow = ctx.cfg.flow()?;
    let sweep_cfg = ctx
        .cfg
        .width_sweep
        .as_ref()
        .ok_or_else(|| resnet_lab_core::Error::contract("config needs a width_sweep section"))?;

    let env = ExperimentEnv { family: &family, g: &g, ds: &ds, init: &ctx.cfg.init };
    let report = experiments::width_sweep(
        &env,
        flow,
        &sweep_cfg.m_values,
        sweep_cfg.n_seeds,
        sweep_cfg.n_t,
        sweep_cfg.m_ref,
        ctx.cfg.seed,
    )?;

    let rows: Vec<Vec<f64>> = report
        .sweep
        .points
        .iter()
        .zip(&report.mean_per_width)
        .zip(&report.mean_errors)
        .map(|((p, (_, mean)), err): ((&SweepPoint, &(usize, f64)), &SweepPoint)| {
            vec![p.value, p.metric, *mean, err.metric]
        })
        .collect();
    write_points_csv(&ctx.path("results.csv"), "M,std_E,mean_E,abs_error_vs_ref", &rows)?;
    write_loglog_dat(&ctx.path("loglog.dat"), &report.sweep, "width sweep std(E) vs M")?;
    write_json(&ctx.path("report.json"), &report)?;
    write_manifest(
        ctx,
        ctx.manifest("sweep-width", &ds),
        &["results.csv", "loglog.dat", "report.json"],
    )?;

    let want = (sweep_cfg.slope_center - sweep_cfg.slope_tol,
        sweep_cfg.slope_center + sweep_cfg.slope_tol);
    let pass = report.sweep.fitted_slope >= want.0
        && report.sweep.fitted_slope <= want.1
        && report.sweep.r_squared >= sweep_cfg.min_r2;
    if report.self_reference {
        println!(
            "sweep-width: note: M_ref = {} is the largest width; its error point is the sampling noise floor",
            report.m_ref
        );
    }
    println!(
        "sweep-width: std slope = {:.3} (want [{:.2}, {:.2}]), R^2 = {:.3} (want >= {}): {}",
        report.sweep.fitted_slope,
        want.0,
        want.1,
        report.sweep.r_squared,
        sweep_cfg.min_r2,
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(if pass { EXIT_PASS } else { EXIT_VERDICT_FAIL })
}

pub fn zero_loss(ctx: &CommandContext) -> Result<i32> {
    let family = ctx.cfg.family()?;
    let g = ctx.cfg.measuring()?;
    let ds = ctx.cfg.dataset()?;
    let flow = ctx.cfg.flow()?;
    let zl = ctx.cfg.zero_loss.unwrap_or(crate::config::ZeroLossConfig {
        width: 32,
        n_t: 32,
        threshold: 1e-2,
        monotone_after: 100,
    });

    let env = ExperimentEnv { family: &family, g: &g, ds: &ds, init: &ctx.cfg.init };
    let (trace, report) = experiments::zero_loss_run(
        &env,
        flow,
        zl.width,
        zl.n_t,
        zl.threshold,
        zl.monotone_after,
        ctx.cfg.seed,
    )?;

    trace.save_csv(&ctx.path("trace.csv"))?;
    write_json(&ctx.path("report.json"), &report)?;
    let mut manifest = ctx.manifest("zero-loss", &ds);
    manifest.trace_digest = Some(trace.digest());
    write_manifest(ctx, manifest, &["trace.csv", "report.json"])?;

    println!(
        "zero-loss: final E = {:.6e} (threshold {:.1e}): {}; monotone after step {}: {}",
        report.final_e,
        report.threshold,
        if report.pass_threshold { "PASS" } else { "FAIL" },
        report.monotone_after_steps,
        if report.pass_monotone { "PASS" } else { "FAIL" }
    );
    Ok(if report.verdict() { EXIT_PASS } else { EXIT_VERDICT_FAIL })
}

pub fn gradcheck(ctx: &CommandContext) -> Result<i32> {
    let gc = ctx.cfg.gradcheck.unwrap_or_default();
    let report = experiments::gradcheck_suite(&gc)?;
    let ds = ctx.cfg.dataset()?;
    write_json(&ctx.path("report.json"), &report)?;
    write_manifest(ctx, ctx.manifest("gradcheck", &ds), &["report.json"])?;
    println!(
        "gradcheck: discrete max rel = {:.3e} (tol {:.1e}), continuum max rel = {:.3e} (tol {:.1e}): {}",
        report.discrete_max_rel,
        report.discrete_tol,
        report.continuum_max_rel,
        report.continuum_tol,
        if report.pass() { "PASS" } else { "FAIL" }
    );
    Ok(if report.pass() { EXIT_PASS } else { EXIT_VERDICT_FAIL })
}

pub fn energy_audit(trace_path: &Path, slack: f64) -> Result<i32> {
    let trace = FlowTrace::load_csv(trace_path)?;
    let report = flow_driver::energy_audit(&trace, slack);
    if report.pass() {
        println!("energy-audit: {} rows, zero upticks beyond slack {:.1e}: PASS", trace.rows().len(), slack);
        Ok(EXIT_PASS)
    } else {
        println!(
            "energy-audit: {} violations beyond slack {:.1e}: FAIL",
            report.violations.len(),
            slack
        );
        for v in report.violations.iter().take(10) {
            println!("  row {} (s = {}): delta E_s = {:.3e}", v.row, v.s, v.delta);
        }
        Ok(EXIT_VERDICT_FAIL)
    }
}

pub fn w2(file_a: &Path, file_b: &Path, sliced: Option<usize>, seed: u64) -> Result<i32> {
    let a = measure::load_cloud_csv(file_a)?;
    let b = measure::load_cloud_csv(file_b)?;
    let value = match sliced {
        Some(n_projections) => measure::w2_sliced(&a, &b, n_projections, seed)?,
        None => measure::w2_exact(&a, &b)?,
    };
    println!("{value:?}");
    Ok(EXIT_PASS)
}

use resnet_lab_core::init::seeded_rng as seeded;
