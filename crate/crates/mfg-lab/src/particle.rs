//! Coupled particle simulations for propagation of chaos: the N-player
//! optimal trajectories `Y` (Nash feedback) against the McKean-Vlasov
//! trajectories `X~` (mean-field feedback `Du(t, .)`), driven by identical
//! initial draws and Brownian increments so the pathwise gap isolates the
//! feedback difference.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{MfgError, Result};
use crate::grid::{deposit, gradient, Grid, GridField, TimeGrid};
use crate::mfg::MfgSolution;
use crate::model::Model;
use crate::nash::NashTensor;
use crate::nash_sym::SymmetricNash;
use crate::wasserstein::wasserstein1;

/// Anything that can serve Nash feedback `D_{x_i} v^{N,i}` along paths:
/// the tensor solver for small N, the exchangeability-reduced solver for
/// larger N.
pub trait FeedbackSource: Sync {
    fn n_players(&self) -> usize;
    fn grid(&self) -> Grid;
    fn time(&self) -> TimeGrid;
    /// Own position continuous, companions at grid cells; own-first order.
    fn own_feedback(&self, s: usize, x_own: f64, other_cells: &[usize]) -> Result<f64>;
}

impl FeedbackSource for NashTensor {
    fn n_players(&self) -> usize {
        self.n_players()
    }
    fn grid(&self) -> Grid {
        self.grid()
    }
    fn time(&self) -> TimeGrid {
        self.time()
    }
    fn own_feedback(&self, s: usize, x_own: f64, other_cells: &[usize]) -> Result<f64> {
        self.feedback_interp(s, x_own, other_cells)
    }
}

impl FeedbackSource for SymmetricNash {
    fn n_players(&self) -> usize {
        self.n_players()
    }
    fn grid(&self) -> Grid {
        self.grid()
    }
    fn time(&self) -> TimeGrid {
        self.time()
    }
    fn own_feedback(&self, s: usize, x_own: f64, other_cells: &[usize]) -> Result<f64> {
        self.feedback_interp(s, x_own, other_cells)
    }
}

/// Monte-Carlo estimate with a one-standard-error bar.
#[derive(Debug, Clone, Copy)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
}

fn mc_estimate(samples: &[f64]) -> McEstimate {
    let n = samples.len() as f64;
    // compensated summation keeps the aggregation order-independent in value
    let mean = kahan_sum(samples.iter().copied()) / n;
    let var = if samples.len() > 1 {
        kahan_sum(samples.iter().map(|s| (s - mean) * (s - mean))) / (n - 1.0)
    } else {
        0.0
    };
    McEstimate { mean, stderr: (var / n).sqrt() }
}

fn kahan_sum(it: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in it {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// One N-value of the chaos experiment.
#[derive(Debug, Clone, Copy)]
pub struct ChaosPoint {
    pub n_players: usize,
    /// `E[mean_i sup_t |Y_i - X~_i|]` (torus distance).
    pub pathwise_gap: McEstimate,
    /// `E[sup_t d1(empirical(X~_t), m_t)]`.
    pub law_gap: McEstimate,
    /// `E[d1(empirical(X~_{t0}), m_0)]`: the pure-sampling baseline.
    pub law_gap_t0: McEstimate,
}

/// Collected chaos experiment across N values.
#[derive(Debug, Clone, Default)]
pub struct ChaosReport {
    pub points: Vec<ChaosPoint>,
}

impl ChaosReport {
    /// Least-squares slope of `log(pathwise gap)` against `log N`.
    pub fn slope(&self) -> Result<f64> {
        fit_loglog(
            self.points.iter().map(|p| (p.n_players as f64, p.pathwise_gap.mean)),
        )
    }
}

/// Least-squares slope of `log y` on `log x`; needs >= 3 positive points.
pub fn fit_loglog(points: impl Iterator<Item = (f64, f64)>) -> Result<f64> {
    let pts: Vec<(f64, f64)> = points.collect();
    if pts.len() < 3 || pts.iter().any(|(x, y)| *x <= 0.0 || *y <= 0.0) {
        return Err(MfgError::InvalidInput(
            "slope fit needs at least three positive points".into(),
        ));
    }
    let logs: Vec<(f64, f64)> = pts.iter().map(|(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>();
    let sxx = logs.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum::<f64>();
    Ok(sxy / sxx)
}

/// Configuration of one chaos simulation cell.
#[derive(Debug, Clone, Copy)]
pub struct ParticleCfg {
    pub n_mc: usize,
    pub seed: u64,
    /// Upper cap on the SDE step; the default is `min(dt, h / (2 L_H))`,
    /// subdivided so that PDE levels are hit exactly.
    pub dt_sde_cap: Option<f64>,
}

impl ParticleCfg {
    pub fn new(n_mc: usize, seed: u64) -> Self {
        ParticleCfg { n_mc, seed, dt_sde_cap: None }
    }
}

/// Draws a continuous initial position from the piecewise-constant density.
fn sample_position(m0: &crate::grid::GridMeasure, rng: &mut ChaCha8Rng) -> f64 {
    let grid = m0.grid();
    let h = grid.spacing();
    let node = m0.sample_node(rng.gen::<f64>());
    let jitter: f64 = rng.gen::<f64>() - 0.5;
    (node as f64 * h + jitter * h).rem_euclid(1.0)
}

struct EnsembleStats {
    pathwise_sup: f64,
    law_sup: f64,
    law_t0: f64,
}

fn run_ensemble(
    model: &Model,
    nash: &dyn FeedbackSource,
    mfg: &MfgSolution,
    du: &[GridField],
    sub: usize,
    dt_sde: f64,
    seed: u64,
) -> Result<EnsembleStats> {
    let grid = nash.grid();
    let n = nash.n_players();
    let steps = nash.time().steps();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m0 = &mfg.m[0];

    let mut y: Vec<f64> = (0..n).map(|_| sample_position(m0, &mut rng)).collect();
    let mut xt: Vec<f64> = y.clone();
    let ham = &model.hamiltonian;
    let mut pathwise = vec![0.0f64; n];
    let dist = |a: f64, b: f64| -> f64 {
        let d = (a - b).rem_euclid(1.0);
        d.min(1.0 - d)
    };
    let empirical = |pos: &[f64]| -> Result<crate::grid::GridMeasure> {
        let pts: Vec<[f64; 2]> = pos.iter().map(|&x| [x, 0.0]).collect();
        let w = vec![1.0 / pos.len() as f64; pos.len()];
        deposit(grid, &pts, &w)
    };

    let law_t0 = wasserstein1(&empirical(&xt)?, m0)?;
    let mut law_sup = law_t0;

    let sqrt2dt = (2.0 * dt_sde).sqrt();
    let mut cells = vec![0usize; n - 1];
    for s in 0..steps {
        for _ in 0..sub {
            // Nash drifts at the current Y configuration
            let y_cells: Vec<usize> = y
                .iter()
                .map(|&x| {
                    let m = grid.points_per_axis();
                    ((x.rem_euclid(1.0) / grid.spacing()).round() as usize) % m
                })
                .collect();
            let mut drift_y = vec![0.0f64; n];
            for i in 0..n {
                let mut w = 0;
                for (j, &c) in y_cells.iter().enumerate() {
                    if j != i {
                        cells[w] = c;
                        w += 1;
                    }
                }
                let fb = nash.own_feedback(s, y[i], &cells)?;
                drift_y[i] = -ham.grad_p([y[i], 0.0], [fb, 0.0])[0];
            }
            for i in 0..n {
                let noise: f64 = rng.sample(StandardNormal);
                let dx_mfg = du[s].interp([xt[i], 0.0]);
                let drift_x = -ham.grad_p([xt[i], 0.0], [dx_mfg, 0.0])[0];
                y[i] = (y[i] + dt_sde * drift_y[i] + sqrt2dt * noise).rem_euclid(1.0);
                xt[i] = (xt[i] + dt_sde * drift_x + sqrt2dt * noise).rem_euclid(1.0);
                pathwise[i] = pathwise[i].max(dist(y[i], xt[i]));
            }
        }
        law_sup = law_sup.max(wasserstein1(&empirical(&xt)?, &mfg.m[s + 1])?);
    }

    Ok(EnsembleStats {
        pathwise_sup: pathwise.iter().sum::<f64>() / n as f64,
        law_sup,
        law_t0,
    })
}

/// Simulates the coupled pair of systems and aggregates the chaos
/// statistics for one N.
pub fn simulate_pair(
    model: &Model,
    nash: &dyn FeedbackSource,
    mfg: &MfgSolution,
    cfg: &ParticleCfg,
) -> Result<ChaosPoint> {
    let grid = nash.grid();
    if grid != model.grid() || grid != mfg.u[0].grid() {
        return Err(MfgError::ShapeMismatch("model, Nash and MFG grids differ".into()));
    }
    let time = nash.time();
    if (time.t0() - mfg.time.t0()).abs() > 1e-12
        || (time.t_end() - mfg.time.t_end()).abs() > 1e-12
        || time.steps() != mfg.time.steps()
    {
        return Err(MfgError::ShapeMismatch("Nash and MFG time grids differ".into()));
    }
    if cfg.n_mc == 0 {
        return Err(MfgError::InvalidInput("need at least one MC ensemble".into()));
    }
    let h = grid.spacing();
    let lip = model.hamiltonian.lipschitz_bound();
    let dt = time.dt();
    let default_cap = if lip > 0.0 { (h / (2.0 * lip)).min(dt) } else { dt };
    let cap = cfg.dt_sde_cap.unwrap_or(default_cap);
    if cap <= 0.0 || cap * lip > h {
        return Err(MfgError::CflViolation { ratio: cap * lip / h });
    }
    let sub = (dt / cap).ceil().max(1.0) as usize;
    let dt_sde = dt / sub as f64;

    let du: Vec<GridField> = mfg.u.iter().map(|u| gradient(u).comp(0).clone()).collect();

    let stats: Vec<EnsembleStats> = (0..cfg.n_mc)
        .into_par_iter()
        .map(|e| {
            run_ensemble(
                model,
                nash,
                mfg,
                &du,
                sub,
                dt_sde,
                cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(e as u64 + 1)),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let path: Vec<f64> = stats.iter().map(|s| s.pathwise_sup).collect();
    let law: Vec<f64> = stats.iter().map(|s| s.law_sup).collect();
    let law0: Vec<f64> = stats.iter().map(|s| s.law_t0).collect();
    Ok(ChaosPoint {
        n_players: nash.n_players(),
        pathwise_gap: mc_estimate(&path),
        law_gap: mc_estimate(&law),
        law_gap_t0: mc_estimate(&law0),
    })
}

/// Law-of-large-numbers gap of the McKean-Vlasov system alone:
/// `E[sup_t d1(empirical(X~_t), m_t)]` for `n_particles` independent
/// particles following `Du(t, .)`.
pub fn empirical_law_gap(
    model: &Model,
    mfg: &MfgSolution,
    n_particles: usize,
    cfg: &ParticleCfg,
) -> Result<(McEstimate, McEstimate)> {
    let grid = mfg.u[0].grid();
    if n_particles == 0 || cfg.n_mc == 0 {
        return Err(MfgError::InvalidInput("need particles and MC ensembles".into()));
    }
    let time = mfg.time;
    let h = grid.spacing();
    let lip = model.hamiltonian.lipschitz_bound();
    let dt = time.dt();
    let default_cap = if lip > 0.0 { (h / (2.0 * lip)).min(dt) } else { dt };
    let cap = cfg.dt_sde_cap.unwrap_or(default_cap);
    let sub = (dt / cap).ceil().max(1.0) as usize;
    let dt_sde = dt / sub as f64;
    let du: Vec<GridField> = mfg.u.iter().map(|u| gradient(u).comp(0).clone()).collect();
    let ham = &model.hamiltonian;

    let runs: Vec<(f64, f64)> = (0..cfg.n_mc)
        .into_par_iter()
        .map(|e| -> Result<(f64, f64)> {
            let mut rng = ChaCha8Rng::seed_from_u64(
                cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(e as u64 + 1)),
            );
            let mut xt: Vec<f64> =
                (0..n_particles).map(|_| sample_position(&mfg.m[0], &mut rng)).collect();
            let empirical = |pos: &[f64]| -> Result<crate::grid::GridMeasure> {
                let pts: Vec<[f64; 2]> = pos.iter().map(|&x| [x, 0.0]).collect();
                let w = vec![1.0 / pos.len() as f64; pos.len()];
                deposit(grid, &pts, &w)
            };
            let t0_gap = wasserstein1(&empirical(&xt)?, &mfg.m[0])?;
            let mut sup = t0_gap;
            let sqrt2dt = (2.0 * dt_sde).sqrt();
            for s in 0..time.steps() {
                for _ in 0..sub {
                    for x in xt.iter_mut() {
                        let p = du[s].interp([*x, 0.0]);
                        let drift = -ham.grad_p([*x, 0.0], [p, 0.0])[0];
                        let noise: f64 = rng.sample(StandardNormal);
                        *x = (*x + dt_sde * drift + sqrt2dt * noise).rem_euclid(1.0);
                    }
                }
                sup = sup.max(wasserstein1(&empirical(&xt)?, &mfg.m[s + 1])?);
            }
            Ok((sup, t0_gap))
        })
        .collect::<Result<Vec<_>>>()?;

    let sups: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let t0s: Vec<f64> = runs.iter().map(|r| r.1).collect();
    Ok((mc_estimate(&sups), mc_estimate(&t0s)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridMeasure;
    use crate::mfg::{solve_mfg, PicardParams};
    use crate::model::Model;
    use crate::nash_sym::solve_nash_symmetric;

    const TAU: f64 = 2.0 * std::f64::consts::PI;

    fn bump(grid: Grid) -> GridMeasure {
        GridMeasure::from_fn(grid, |x| 1.0 + 0.5 * (TAU * x[0]).cos()).unwrap()
    }

    #[test]
    fn trivial_model_couples_exactly() {
        let grid = Grid::new(1, 8).unwrap();
        let model = Model::trivial(grid).unwrap();
        let time = TimeGrid::new(0.0, 0.25, 8).unwrap();
        let mfg = solve_mfg(&model, time, &bump(grid), PicardParams::default()).unwrap();
        let nash = solve_nash_symmetric(&model, 4, time).unwrap();
        let point = simulate_pair(&model, &nash, &mfg, &ParticleCfg::new(20, 5)).unwrap();
        assert_eq!(point.pathwise_gap.mean, 0.0, "trivial drifts must couple bitwise");
        assert_eq!(point.pathwise_gap.stderr, 0.0);
    }

    #[test]
    fn same_seed_reproduces_statistics() {
        let grid = Grid::new(1, 8).unwrap();
        let model = Model::default_monotone(grid, 0.1, 0.1, 0.15).unwrap();
        let time = TimeGrid::new(0.0, 0.25, 8).unwrap();
        let mfg = solve_mfg(&model, time, &bump(grid), PicardParams::default()).unwrap();
        let nash = solve_nash_symmetric(&model, 3, time).unwrap();
        let a = simulate_pair(&model, &nash, &mfg, &ParticleCfg::new(10, 42)).unwrap();
        let b = simulate_pair(&model, &nash, &mfg, &ParticleCfg::new(10, 42)).unwrap();
        assert_eq!(a.pathwise_gap.mean, b.pathwise_gap.mean);
        assert_eq!(a.law_gap.mean, b.law_gap.mean);
        let c = simulate_pair(&model, &nash, &mfg, &ParticleCfg::new(10, 43)).unwrap();
        assert_ne!(a.pathwise_gap.mean, c.pathwise_gap.mean);
    }

    #[test]
    fn tensor_and_reduced_feedback_sources_agree_statistically() {
        use crate::nash::{solve_nash, NashCfg};
        let grid = Grid::new(1, 8).unwrap();
        let model = Model::default_monotone(grid, 0.1, 0.1, 0.15).unwrap();
        let time = TimeGrid::new(0.0, 0.25, 16).unwrap();
        let mfg = solve_mfg(&model, time, &bump(grid), PicardParams::default()).unwrap();
        let reduced = solve_nash_symmetric(&model, 3, time).unwrap();
        let tensor =
            solve_nash(&model, 3, &NashCfg { time, beta: 0.0, store_path: true }).unwrap();
        let cfg = ParticleCfg::new(40, 9);
        let a = simulate_pair(&model, &reduced, &mfg, &cfg).unwrap();
        let b = simulate_pair(&model, &tensor, &mfg, &cfg).unwrap();
        let tol = 3.0 * (a.pathwise_gap.stderr + b.pathwise_gap.stderr) + 0.02;
        assert!(
            (a.pathwise_gap.mean - b.pathwise_gap.mean).abs() < tol,
            "feedback sources disagree: {} vs {}",
            a.pathwise_gap.mean,
            b.pathwise_gap.mean
        );
    }

    #[test]
    fn halving_dt_sde_stays_within_an_error_bar() {
        let grid = Grid::new(1, 8).unwrap();
        let model = Model::default_monotone(grid, 0.1, 0.1, 0.15).unwrap();
        let time = TimeGrid::new(0.0, 0.25, 8).unwrap();
        let mfg = solve_mfg(&model, time, &bump(grid), PicardParams::default()).unwrap();
        let nash = solve_nash_symmetric(&model, 4, time).unwrap();
        let run = |div: f64| {
            let cfg = ParticleCfg { n_mc: 100, seed: 17, dt_sde_cap: Some(time.dt() / div) };
            simulate_pair(&model, &nash, &mfg, &cfg).unwrap().pathwise_gap
        };
        // the Euler bias is first order: successive refinements shrink it,
        // and once resolved a further halving stays within one error bar
        let e1 = run(1.0);
        let e4 = run(4.0);
        let e8 = run(8.0);
        assert!(
            (e1.mean - e4.mean).abs() > (e4.mean - e8.mean).abs(),
            "no first-order decay: {} {} {}",
            e1.mean,
            e4.mean,
            e8.mean
        );
        let tol = e4.stderr + e8.stderr;
        assert!(
            (e4.mean - e8.mean).abs() <= tol,
            "dt_sde sensitivity at resolved steps: {} vs {} (tol {tol})",
            e4.mean,
            e8.mean
        );
    }

    #[test]
    fn law_gap_matches_static_sampling_at_t0_and_shrinks_with_n() {
        let grid = Grid::new(1, 16).unwrap();
        let model = Model::default_monotone(grid, 0.1, 0.1, 0.15).unwrap();
        let time = TimeGrid::new(0.0, 0.25, 8).unwrap();
        let m0 = bump(grid);
        let mfg = solve_mfg(&model, time, &m0, PicardParams::default()).unwrap();
        let cfg = ParticleCfg::new(60, 23);
        let (sup8, t08) = empirical_law_gap(&model, &mfg, 8, &cfg).unwrap();
        let (sup64, t064) = empirical_law_gap(&model, &mfg, 64, &cfg).unwrap();
        assert!(sup64.mean < sup8.mean, "law gap not shrinking: {} {}", sup8.mean, sup64.mean);

        // static oracle: E d1(empirical of k iid draws, m0), same sampler
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let static_mean = |k: usize, rng: &mut ChaCha8Rng| -> f64 {
            let runs: Vec<f64> = (0..60)
                .map(|_| {
                    let pos: Vec<[f64; 2]> =
                        (0..k).map(|_| [sample_position(&m0, rng), 0.0]).collect();
                    let w = vec![1.0 / k as f64; k];
                    wasserstein1(&deposit(grid, &pos, &w).unwrap(), &m0).unwrap()
                })
                .collect();
            runs.iter().sum::<f64>() / runs.len() as f64
        };
        let oracle = static_mean(8, &mut rng);
        assert!(
            (t08.mean - oracle).abs() < 4.0 * t08.stderr.max(1e-3) + 0.02,
            "t0 law gap {} vs static sampling oracle {oracle}",
            t08.mean
        );
        assert!(t064.mean < t08.mean, "t0 sampling rate not improving in N");
    }

    #[test]
    fn slope_fit_recovers_exact_power_laws() {
        let pts = [(2.0, 1.0), (4.0, 0.5), (8.0, 0.25)];
        let s = fit_loglog(pts.iter().copied()).unwrap();
        assert!((s + 1.0).abs() < 1e-12, "slope {s}");
        let pts2 = [(2.0, 8.0), (4.0, 2.0), (8.0, 0.5)];
        let s2 = fit_loglog(pts2.iter().copied()).unwrap();
        assert!((s2 + 2.0).abs() < 1e-12, "slope {s2}");
        assert!(fit_loglog([(1.0, 1.0), (2.0, 0.5)].iter().copied()).is_err());
    }
}
