//! Experiment runners behind the CLI: one entry point per subcommand, rate
//! tables with log-log slope fits, and artifact plumbing (CSV + JSON
//! manifest, each stamped with the config hash).
//!
//! Determinism contract: every CSV artifact is byte-identical across reruns
//! with the same config and seed. Wall-clock runtimes are therefore reported
//! only in the JSON manifest, never in CSV.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

use crate::config::ExperimentConfig;
use crate::error::{MfgError, Result};
use crate::grid::{GridField, GridMeasure};
use crate::kernel::DerivativeKernel;
use crate::master;
use crate::mfg::{solve_mfg, MfgSolution};
use crate::nash;
use crate::nash_sym::solve_nash_symmetric;
use crate::particle::{self, ChaosReport, ParticleCfg};
use crate::potential::PotentialProblem;
use crate::snapshot;
use crate::tree::{self, TreeCfg};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Rate tables and slope fitting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RateRow {
    pub n: usize,
    pub error: f64,
    pub stderr: f64,
    pub runtime_s: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RateTable {
    pub rows: Vec<RateRow>,
}

#[derive(Debug, Clone, Copy)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope from the least-squares residuals.
    pub stderr: f64,
}

/// Outcome of a slope fit: either a fit or an explicit degenerate marker
/// (all errors at the noise floor, e.g. the trivial model).
#[derive(Debug, Clone, Copy)]
pub enum SlopeOutcome {
    Fit(SlopeFit),
    Degenerate,
}

const DEGENERATE_FLOOR: f64 = 1e-13;

impl RateTable {
    pub fn push(&mut self, n: usize, error: f64, stderr: f64, runtime_s: f64) {
        self.rows.push(RateRow { n, error, stderr, runtime_s });
    }

    /// CSV artifact; runtimes are deliberately excluded (see module docs).
    pub fn csv(&self) -> String {
        let mut s = String::from("n,error,stderr\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:.17e},{:.17e}\n", r.n, r.error, r.stderr));
        }
        s
    }

    pub fn fit(&self) -> Result<SlopeOutcome> {
        if self.rows.iter().all(|r| r.error.abs() <= DEGENERATE_FLOOR) {
            return Ok(SlopeOutcome::Degenerate);
        }
        fit_slope(self).map(SlopeOutcome::Fit)
    }
}

/// Least squares of `log error` on `log n`; needs at least three rows with
/// strictly positive errors.
pub fn fit_slope(table: &RateTable) -> Result<SlopeFit> {
    let pts: Vec<(f64, f64)> = table
        .rows
        .iter()
        .filter(|r| r.error > 0.0)
        .map(|r| ((r.n as f64).ln(), r.error.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(MfgError::InvalidInput(
            "slope fit needs at least three positive error rows".into(),
        ));
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(MfgError::InvalidInput("slope fit needs distinct n values".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let dof = (pts.len() as f64 - 2.0).max(1.0);
    let ss_res: f64 = pts
        .iter()
        .map(|p| (p.1 - (intercept + slope * p.0)).powi(2))
        .sum();
    let stderr = (ss_res / dof / sxx).sqrt();
    Ok(SlopeFit { slope, intercept, stderr })
}

// ---------------------------------------------------------------------------
// Run context and artifact plumbing
// ---------------------------------------------------------------------------

pub struct RunContext {
    pub cfg: ExperimentConfig,
    pub out_dir: PathBuf,
    pub hash: String,
}

fn io_err(e: std::io::Error) -> MfgError {
    MfgError::Io(e)
}

impl RunContext {
    pub fn new(cfg: ExperimentConfig, out_dir: impl Into<PathBuf>) -> Result<Self> {
        let out_dir = out_dir.into();
        std::fs::create_dir_all(&out_dir).map_err(io_err)?;
        let hash = cfg.hash();
        Ok(RunContext { cfg, out_dir, hash })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn write_text(&self, name: &str, content: &str) -> Result<()> {
        std::fs::write(self.path(name), content).map_err(io_err)
    }

    /// Every CSV artifact opens with a comment line carrying the config hash.
    fn write_csv(&self, name: &str, body: &str) -> Result<()> {
        self.write_text(name, &format!("# config_hash={}\n{body}", self.hash))
    }

    fn write_field(&self, name: &str, field: &GridField) -> Result<()> {
        snapshot::write_field(&self.path(&format!("{name}.bin")), field)?;
        self.write_csv(&format!("{name}.csv"), &snapshot::field_csv(field))
    }

    fn write_manifest(&self, subcommand: &str, extra: serde_json::Value) -> Result<()> {
        let mut doc = json!({
            "schema_version": crate::config::SCHEMA_VERSION,
            "subcommand": subcommand,
            "config_hash": self.hash,
            "seed": self.cfg.experiment.seed,
        });
        if let (Some(base), Some(add)) = (doc.as_object_mut(), extra.as_object()) {
            for (k, v) in add {
                base.insert(k.clone(), v.clone());
            }
        }
        let text = serde_json::to_string_pretty(&doc)
            .map_err(|e| MfgError::Config(format!("manifest serialization: {e}")))?;
        self.write_text("manifest.json", &text)
    }
}

/// Dispatch a subcommand by name. Unknown names are a config error (exit 2).
pub fn run(subcommand: &str, ctx: &RunContext) -> Result<()> {
    match subcommand {
        "solve-mfg" => run_solve_mfg(ctx),
        "kernel" => run_kernel(ctx),
        "residual" => run_residual(ctx),
        "flow" => run_flow(ctx),
        "nash" => run_nash(ctx),
        "converge" => run_converge(ctx),
        "project" => run_project(ctx),
        "chaos" => run_chaos(ctx),
        "tree" => run_tree(ctx),
        "potential" => run_potential(ctx),
        other => Err(MfgError::Config(format!("unknown subcommand '{other}'"))),
    }
}

fn solve_base(ctx: &RunContext) -> Result<MfgSolution> {
    let model = ctx.cfg.build_model()?;
    let time = ctx.cfg.time_grid()?;
    let m0 = ctx.cfg.m0()?;
    solve_mfg(&model, time, &m0, ctx.cfg.picard())
}

fn fmt_vec(values: &[f64]) -> Vec<serde_json::Value> {
    values.iter().map(|v| json!(v)).collect()
}

// ---------------------------------------------------------------------------
// Subcommand runners
// ---------------------------------------------------------------------------

pub fn run_solve_mfg(ctx: &RunContext) -> Result<()> {
    let t = Instant::now();
    let sol = solve_base(ctx)?;
    let s = sol.time.steps();
    ctx.write_field("u_t0", &sol.u[0])?;
    ctx.write_field("u_terminal", &sol.u[s])?;
    ctx.write_field("m_t0", &sol.m[0].as_field())?;
    ctx.write_field("m_terminal", &sol.m[s].as_field())?;
    ctx.write_manifest(
        "solve-mfg",
        json!({
            "sweeps": sol.sweeps,
            "gap_history": fmt_vec(&sol.gap_history),
            "max_clipped_mass": sol.max_clipped_mass,
            "runtime_s": t.elapsed().as_secs_f64(),
        }),
    )
}

pub fn run_kernel(ctx: &RunContext) -> Result<()> {
    let t = Instant::now();
    let model = ctx.cfg.build_model()?;
    let time = ctx.cfg.time_grid()?;
    let m0 = ctx.cfg.m0()?;
    let kernel = DerivativeKernel::compute(&model, time, &m0, ctx.cfg.picard())?;
    let grid = model.grid();
    let n = grid.len();
    let mut matrix = vec![0.0; n * n];
    let mut csv = String::from("ix,iy,value\n");
    for ix in 0..n {
        for iy in 0..n {
            let v = kernel.at(ix, iy);
            matrix[ix * n + iy] = v;
            csv.push_str(&format!("{ix},{iy},{v:.17e}\n"));
        }
    }
    snapshot::write_tensor(&ctx.path("kernel.bin"), n, 2, &matrix)?;
    ctx.write_csv("kernel.csv", &csv)?;
    ctx.write_manifest(
        "kernel",
        json!({
            "sup_norm": kernel.sup_norm(),
            "normalization_defect": kernel.normalization_defect(),
            "runtime_s": t.elapsed().as_secs_f64(),
        }),
    )
}

fn sample_measures(ctx: &RunContext, count: usize) -> Result<Vec<GridMeasure>> {
    let grid = ctx.cfg.grid()?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.experiment.seed);
    (0..count)
        .map(|_| {
            let c1: f64 = rng.gen();
            let c2: f64 = rng.gen();
            let w1: f64 = rng.gen_range(0.08..0.3);
            let w2: f64 = rng.gen_range(0.08..0.3);
            let a: f64 = rng.gen_range(0.2..0.8);
            GridMeasure::from_fn(grid, |x| {
                let bump = |c: f64, w: f64| {
                    let mut s = 0.0;
                    for k in -3i32..=3 {
                        let d = x[0] - c + k as f64;
                        s += (-d * d / (2.0 * w * w)).exp();
                    }
                    s / w
                };
                a * bump(c1, w1) + (1.0 - a) * bump(c2, w2)
            })
        })
        .collect()
}

pub fn run_residual(ctx: &RunContext) -> Result<()> {
    let t = Instant::now();
    let model = ctx.cfg.build_model()?;
    let e = &ctx.cfg.experiment;
    let steps = ctx.cfg.numerics.s;
    let dt = (e.t_end - e.t0) / steps as f64;
    let measures = sample_measures(ctx, 5)?;
    let mut csv = String::from("sample,t,max_abs,mean_abs\n");
    let mut max_abs = Vec::new();
    for (i, m) in measures.iter().enumerate() {
        // stagger sample times along the grid, keeping dt constant so the
        // centered time difference stays grid-aligned
        let skip = (i * steps / (2 * measures.len())).min(steps.saturating_sub(8));
        let ti = e.t0 + skip as f64 * dt;
        let report = master::master_residual(
            &model,
            ti,
            e.t_end,
            steps - skip,
            m,
            ctx.cfg.picard(),
            dt,
        )?;
        csv.push_str(&format!(
            "{i},{ti:.17e},{:.17e},{:.17e}\n",
            report.max_abs, report.mean_abs
        ));
        max_abs.push(report.max_abs);
    }
    ctx.write_csv("residual.csv", &csv)?;
    ctx.write_manifest(
        "residual",
        json!({
            "max_abs": fmt_vec(&max_abs),
            "steps": steps,
            "runtime_s": t.elapsed().as_secs_f64(),
        }),
    )
}

pub fn run_flow(ctx: &RunContext) -> Result<()> {
    let t = Instant::now();
    let model = ctx.cfg.build_model()?;
    let time = ctx.cfg.time_grid()?;
    let m0 = ctx.cfg.m0()?;
    let dt = time.dt();
    let mut csv = String::from("h_step,gap\n");
    let mut gaps = Vec::new();
    for mult in [1usize, 2, 4] {
        let h = dt * mult as f64;
        let gap = master::flow_consistency(&model, time, &m0, h, None, ctx.cfg.picard())?;
        csv.push_str(&format!("{h:.17e},{gap:.17e}\n"));
        gaps.push(gap);
    }
    ctx.write_csv("flow.csv", &csv)?;
    ctx.write_manifest(
        "flow",
        json!({
            "gaps": fmt_vec(&gaps),
            "dt": dt,
            "runtime_s": t.elapsed().as_secs_f64(),
        }),
    )
}

/// Mean Nash-vs-master error over a deterministic set of sample tuples.
fn nash_error_for(ctx: &RunContext, n_players: usize) -> Result<(f64, f64)> {
    let model = ctx.cfg.build_model()?;
    let time = ctx.cfg.time_grid()?;
    let cfg = nash::NashCfg { time, beta: ctx.cfg.model.beta, store_path: false };
    let start = Instant::now();
    let tensor = nash::solve_nash(&model, n_players, &cfg)?;
    let runtime = start.elapsed().as_secs_f64();
    let grid = model.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.experiment.seed ^ 0x5eed);
    let tuples: Vec<Vec<usize>> = (0..3)
        .map(|_| (0..n_players).map(|_| rng.gen_range(0..grid.len())).collect())
        .collect();
    let errs = nash::nash_vs_master_error(&tensor, &model, &tuples, ctx.cfg.picard())?;
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    Ok((mean, runtime))
}

pub fn run_nash(ctx: &RunContext) -> Result<()> {
    let t = Instant::now();
    let mut table = RateTable::default();
    for &n in &ctx.cfg.experiment.n_list {
        let (err, runtime) = nash_error_for(ctx, n)?;
        table.push(n, err, 0.0, runtime);
    }
    ctx.write_csv("nash.csv", &table.csv())?;
    ctx.write_manifest(
        "nash",
        json!({
            "n_list": ctx.cfg.experiment.n_list,
            "errors": table.rows.iter().map(|r| json!(r.error)).collect::<Vec<_>>(),
            "cell_runtimes_s": table.rows.iter().map(|r| json!(r.runtime_s)).collect::<Vec<_>>(),
            "runtime_s": t.elapsed().as_secs_f64(),
        }),
    )
}

pub fn run_converge(ctx: &RunContext) -> Result<()> {
    let t = Instant::now();
    let mut table = RateTable::default();
    for &n in &ctx.cfg.experiment.n_list {
        let (err, runtime) = nash_error_for(ctx, n)?;
        table.push(n, err, 0.0, runtime);
    }
    ctx.write_csv("rate.csv", &table.csv())?;
    let fit = table.fit()?;
    let slope_record = match fit {
        SlopeOutcome::Degenerate => json!({ "status": "degenerate" }),
        SlopeOutcome::Fit(f) => json!({
            "status": "fit",
            "slope": f.slope,
            "intercept": f.intercept,
            "stderr": f.stderr,
        }),
    };
    ctx.write_manifest(
        "converge",
        json!({
            "n_list": ctx.cfg.experiment.n_list,
            "slope_fit": slope_record,
            "runtime_s": t.elapsed().as_secs_f64(),
        }),
    )
}

pub fn run_project(ctx: &RunContext) -> Result<()> {
    let t = Instant::now();
    let model = ctx.cfg.build_model()?;
    let time = ctx.cfg.time_grid()?;
    let grid = model.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.experiment.seed ^ 0x9e37);
    let mut csv = String::from("n,max_residual\n");
    let mut maxima = Vec::new();
    for &n in &ctx.cfg.experiment.n_list {
        let mut worst: f64 = 0.0;
        for _ in 0..3 {
            let tuple: Vec<usize> = (0..n).map(|_| rng.gen_range(0..grid.len())).collect();
            let r = nash::residual_of_projection(&model, time, &tuple, 0, 1, ctx.cfg.picard())?;
            worst = worst.max(r.abs());
        }
        csv.push_str(&format!("{n},{worst:.17e}\n"));
        maxima.push(worst);
    }
    ctx.write_csv("project.csv", &csv)?;
    ctx.write_manifest(
        "project",
        json!({
            "n_list": ctx.cfg.experiment.n_list,
            "max_residuals": fmt_vec(&maxima),
            "runtime_s": t.elapsed().as_secs_f64(),
        }),
    )
}

pub fn run_chaos(ctx: &RunContext) -> Result<()> {
    let t = Instant::now();
    let model = ctx.cfg.build_model()?;
    let time = ctx.cfg.time_grid()?;
    let m0 = ctx.cfg.m0()?;
    let mfg = solve_mfg(&model, time, &m0, ctx.cfg.picard())?;
    let mut pcfg = ParticleCfg::new(ctx.cfg.experiment.n_mc, ctx.cfg.experiment.seed);
    pcfg.dt_sde_cap = ctx.cfg.numerics.dt_sde;
    let mut points = Vec::new();
    for &n in &ctx.cfg.experiment.n_list {
        let nash_sol = solve_nash_symmetric(&model, n, time)?;
        points.push(particle::simulate_pair(&model, &nash_sol, &mfg, &pcfg)?);
    }
    let report = ChaosReport { points };
    let mut csv = String::from("n,estimate,stderr\n");
    for p in &report.points {
        csv.push_str(&format!(
            "{},{:.17e},{:.17e}\n",
            p.n_players, p.pathwise_gap.mean, p.pathwise_gap.stderr
        ));
    }
    ctx.write_csv("chaos.csv", &csv)?;
    let slope = report.slope();
    ctx.write_manifest(
        "chaos",
        json!({
            "n_list": ctx.cfg.experiment.n_list,
            "n_mc": ctx.cfg.experiment.n_mc,
            "slope_fit": match slope {
                Ok(s) => json!({ "status": "fit", "slope": s }),
                Err(_) => json!({ "status": "degenerate" }),
            },
            "runtime_s": t.elapsed().as_secs_f64(),
        }),
    )
}

pub fn run_tree(ctx: &RunContext) -> Result<()> {
    let t = Instant::now();
    let model = ctx.cfg.build_model()?;
    let m0 = ctx.cfg.m0()?;
    let e = &ctx.cfg.experiment;
    let tcfg = TreeCfg::new(ctx.cfg.numerics.k, ctx.cfg.numerics.substeps, ctx.cfg.model.beta);
    let sol = tree::solve_tree(&model, e.t0, e.t_end, &m0, &tcfg, ctx.cfg.picard())?;
    let n_interior = sol.u.len();
    let n_nodes = n_interior + sol.leaf_values.len();
    let mut nodes = Vec::new();
    for id in 0..n_nodes {
        ctx.write_field(&format!("node_{id:03}_u"), sol.node_value(id))?;
        if id < n_interior {
            ctx.write_field(&format!("node_{id:03}_m"), &sol.m[id][0].as_field())?;
        }
        nodes.push(json!({
            "id": id,
            "level": sol.tree.level_of(id),
            "parent": if id == 0 { serde_json::Value::Null } else { json!((id - 1) / 2) },
            "shift": sol.tree.shift(id),
            "interior": id < n_interior,
        }));
    }
    let topology = serde_json::to_string_pretty(&json!({
        "config_hash": ctx.hash,
        "levels": tcfg.levels,
        "substeps": tcfg.substeps,
        "beta": tcfg.beta,
        "nodes": nodes,
    }))
    .map_err(|e| MfgError::Config(format!("topology serialization: {e}")))?;
    ctx.write_text("topology.json", &topology)?;
    ctx.write_manifest(
        "tree",
        json!({
            "sweeps": sol.sweeps,
            "gap_history": fmt_vec(&sol.gap_history),
            "branch_defect": sol.branch_defect(),
            "runtime_s": t.elapsed().as_secs_f64(),
        }),
    )
}

pub fn run_potential(ctx: &RunContext) -> Result<()> {
    let t = Instant::now();
    let model = ctx.cfg.build_model()?;
    let problem = PotentialProblem::new(model)?;
    let time = ctx.cfg.time_grid()?;
    let m0 = ctx.cfg.m0()?;
    let sol = solve_mfg(problem.model(), time, &m0, ctx.cfg.picard())?;
    let mfg_cost = problem.mfg_cost(&sol)?;
    let duality = problem.duality_value(&sol);
    let amplitude = 0.05;
    let gaps = problem.optimality_gaps(&sol, 20, amplitude, ctx.cfg.experiment.seed)?;
    let mut csv = String::from("perturbation,gap\n");
    for (i, g) in gaps.iter().enumerate() {
        csv.push_str(&format!("{i},{g:.17e}\n"));
    }
    ctx.write_csv("potential.csv", &csv)?;
    ctx.write_manifest(
        "potential",
        json!({
            "mfg_cost": mfg_cost,
            "duality_value": duality,
            "amplitude": amplitude,
            "min_gap": gaps.iter().cloned().fold(f64::INFINITY, f64::min),
            "runtime_s": t.elapsed().as_secs_f64(),
        }),
    )
}

// ---------------------------------------------------------------------------

/// Collect the CSV artifacts under a run directory (sorted; used by the
/// determinism checks).
pub fn csv_artifacts(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err)? {
        let p = entry.map_err(io_err)?.path();
        if p.extension().is_some_and(|e| e == "csv") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}
