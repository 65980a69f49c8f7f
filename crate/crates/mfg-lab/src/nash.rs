//! N-player Nash system on tensor-product grids (one spatial dimension per
//! player). One exchangeable field is solved -- player 1's value on the
//! M^N grid -- and every other player's field is read off by coordinate
//! swaps. Diffusion, including the common-noise cross term, is applied by
//! the exact joint Fourier symbol; Hamiltonian and cross-drift terms are
//! explicit from the previous backward level.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;

use crate::error::{MfgError, Result};
use crate::grid::{gradient, laplacian_fd, Grid, GridField, GridMeasure, TimeGrid};
use crate::kernel::DerivativeKernel;
use crate::master::evaluate_u;
use crate::mfg::PicardParams;
use crate::model::Model;

const TAU_SQ4: f64 = 4.0 * std::f64::consts::PI * std::f64::consts::PI;
const BLOW_UP: f64 = 1e6;
/// Hard cap on doubles per tensor field.
const TENSOR_BUDGET: usize = 1 << 24;
/// Cap on doubles for a full time-resolved tensor path.
const PATH_BUDGET: usize = 1 << 26;

/// Empirical measure of a node tuple, optionally excluding one index:
/// `m^{N,i}_x = 1/(N-1) sum_{j != i} delta_{x_j}` (or `1/N sum_j` when no
/// index is excluded).
#[derive(Debug, Clone)]
pub struct EmpiricalMeasure {
    tuple: Vec<usize>,
    excluded: Option<usize>,
}

impl EmpiricalMeasure {
    pub fn new(tuple: Vec<usize>, excluded: Option<usize>) -> Result<Self> {
        if let Some(i) = excluded {
            if i >= tuple.len() {
                return Err(MfgError::InvalidInput("excluded index out of range".into()));
            }
            if tuple.len() < 2 {
                return Err(MfgError::InvalidInput(
                    "need at least two players to exclude one".into(),
                ));
            }
        } else if tuple.is_empty() {
            return Err(MfgError::InvalidInput("empty tuple".into()));
        }
        Ok(EmpiricalMeasure { tuple, excluded })
    }

    /// Deposits the weighted Dirac columns on the grid.
    pub fn measure(&self, grid: Grid) -> Result<GridMeasure> {
        let count = self.tuple.len() - usize::from(self.excluded.is_some());
        let w = 1.0 / count as f64;
        let height = w / grid.cell_volume();
        let mut density = vec![0.0; grid.len()];
        for (j, &node) in self.tuple.iter().enumerate() {
            if Some(j) == self.excluded {
                continue;
            }
            if node >= grid.len() {
                return Err(MfgError::InvalidInput("tuple node out of range".into()));
            }
            density[node] += height;
        }
        Ok(GridMeasure::from_density(grid, density)?.0)
    }
}

/// Configuration of one Nash-system solve.
#[derive(Debug, Clone, Copy)]
pub struct NashCfg {
    pub time: TimeGrid,
    pub beta: f64,
    /// Keep every backward level (needed by the particle simulations); when
    /// false only the `t0` and terminal slices are retained.
    pub store_path: bool,
}

/// Solution of the N-player system: player 1's tensor field plus the
/// exchangeability maps giving every other player.
#[derive(Debug, Clone)]
pub struct NashTensor {
    n_players: usize,
    grid: Grid,
    time: TimeGrid,
    beta: f64,
    store_path: bool,
    /// Stored levels of `v^{N,1}`: all `S+1` of them when `store_path`,
    /// otherwise `[v(t0), v(T)]`.
    levels: Vec<Vec<f64>>,
    feedback_sup: f64,
}

/// Index arithmetic on the flat M^N tensor; axis 0 (player 1) is the
/// slowest-varying digit.
#[derive(Debug, Clone, Copy)]
struct TensorIndex {
    m: usize,
    n: usize,
}

impl TensorIndex {
    fn len(&self) -> usize {
        self.m.pow(self.n as u32)
    }

    fn stride(&self, axis: usize) -> usize {
        self.m.pow((self.n - 1 - axis) as u32)
    }

    fn digits(&self, mut idx: usize, out: &mut [usize]) {
        for a in (0..self.n).rev() {
            out[a] = idx % self.m;
            idx /= self.m;
        }
    }

    fn from_digits(&self, digits: &[usize]) -> usize {
        digits.iter().fold(0, |acc, &d| acc * self.m + d)
    }

    /// Index with digits at `a` and `b` exchanged.
    fn swap(&self, idx: usize, a: usize, b: usize) -> usize {
        if a == b {
            return idx;
        }
        let sa = self.stride(a);
        let sb = self.stride(b);
        let da = (idx / sa) % self.m;
        let db = (idx / sb) % self.m;
        (idx as isize + (db as isize - da as isize) * sa as isize
            + (da as isize - db as isize) * sb as isize) as usize
    }

    /// Index shifted by `step` (±1) along `axis`, wrapping periodically.
    fn shifted(&self, idx: usize, axis: usize, step: isize) -> usize {
        let s = self.stride(axis);
        let d = (idx / s) % self.m;
        let nd = (d as isize + step).rem_euclid(self.m as isize) as usize;
        idx + nd * s - d * s
    }
}

/// In-place N-axis FFT of a complex tensor with `m` points per axis.
fn fft_tensor(buf: &mut [Complex64], m: usize, n_axes: usize, inverse: bool) {
    for axis in 0..n_axes {
        let stride = m.pow((n_axes - 1 - axis) as u32);
        let block = stride * m;
        buf.par_chunks_mut(block).for_each(|chunk| {
            let fft = crate::spectral::plan(m, inverse);
            if stride == 1 {
                fft.process(chunk);
            } else {
                let mut col = vec![Complex64::default(); m];
                for off in 0..stride {
                    for i in 0..m {
                        col[i] = chunk[off + i * stride];
                    }
                    fft.process(&mut col);
                    for i in 0..m {
                        chunk[off + i * stride] = col[i];
                    }
                }
            }
        });
    }
}

/// Exact propagator of `sum_j Lap_j + beta sum_{j,k} Tr D2_{jk}` over `dt`,
/// via the joint symbol `exp(-4 pi^2 (sum |k_j|^2 + beta |sum k_j|^2) dt)`.
fn diffuse_tensor(values: &mut [f64], ti: TensorIndex, beta: f64, dt: f64) {
    let mut buf: Vec<Complex64> =
        values.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    fft_tensor(&mut buf, ti.m, ti.n, false);
    buf.par_iter_mut().enumerate().for_each(|(idx, c)| {
        let mut digits = [0usize; 8];
        ti.digits(idx, &mut digits[..ti.n]);
        let mut sum_sq = 0.0;
        let mut sum = 0.0;
        for &d in &digits[..ti.n] {
            let f = crate::spectral::freq(d, ti.m) as f64;
            sum_sq += f * f;
            sum += f;
        }
        *c *= (-TAU_SQ4 * (sum_sq + beta * sum * sum) * dt).exp();
    });
    fft_tensor(&mut buf, ti.m, ti.n, true);
    let scale = 1.0 / ti.len() as f64;
    values
        .par_iter_mut()
        .zip(buf.par_iter())
        .for_each(|(v, c)| *v = c.re * scale);
}

fn own_gradient_sup(values: &[f64], ti: TensorIndex, inv2h: f64) -> f64 {
    values
        .par_iter()
        .enumerate()
        .map(|(idx, _)| {
            let up = values[ti.shifted(idx, 0, 1)];
            let dn = values[ti.shifted(idx, 0, -1)];
            ((up - dn) * inv2h).abs()
        })
        .reduce(|| 0.0, f64::max)
}

/// Backward solve of the N-player Nash system. Player 1's field is computed;
/// the scheme is symmetric in the remaining axes, so all players follow by
/// coordinate swaps.
pub fn solve_nash(model: &Model, n_players: usize, cfg: &NashCfg) -> Result<NashTensor> {
    let grid = model.grid();
    if grid.dim() != 1 {
        return Err(MfgError::Capability(
            "the Nash tensor solver supports one spatial dimension per player".into(),
        ));
    }
    if n_players < 2 {
        return Err(MfgError::InvalidInput("need at least two players".into()));
    }
    if cfg.beta < 0.0 || !cfg.beta.is_finite() {
        return Err(MfgError::InvalidInput("beta must be a nonnegative real".into()));
    }
    let m = grid.points_per_axis();
    let tensor_len = (m as f64).powi(n_players as i32);
    if tensor_len > TENSOR_BUDGET as f64 {
        return Err(MfgError::Budget(format!(
            "tensor field needs {tensor_len:.3e} doubles, budget is {TENSOR_BUDGET}"
        )));
    }
    let steps = cfg.time.steps();
    if cfg.store_path && tensor_len * (steps + 1) as f64 > PATH_BUDGET as f64 {
        return Err(MfgError::Budget(format!(
            "time-resolved tensor path needs {:.3e} doubles, budget is {PATH_BUDGET}",
            tensor_len * (steps + 1) as f64
        )));
    }
    let psi_f = model.running.pair_kernel().ok_or_else(|| {
        MfgError::Capability("Nash solver needs a linear running coupling (pair kernel)".into())
    })?;
    let psi_g = model.terminal.pair_kernel().ok_or_else(|| {
        MfgError::Capability("Nash solver needs a linear terminal coupling (pair kernel)".into())
    })?;
    let h = grid.spacing();
    let dt = cfg.time.dt();
    let lip = model.hamiltonian.lipschitz_bound();
    let cfl = dt * lip / h;
    if cfl > 1.0 {
        return Err(MfgError::CflViolation { ratio: cfl });
    }

    let ti = TensorIndex { m, n: n_players };
    let len = ti.len();
    let inv2h = 0.5 / h;
    let w = 1.0 / (n_players - 1) as f64;
    let psi_f = psi_f.values().to_vec();
    let psi_g = psi_g.values().to_vec();
    let ham = model.hamiltonian;

    // terminal slice: v(T, x) = G(x_1, m^{N,1}_x), exact for Dirac columns
    let terminal: Vec<f64> = (0..len)
        .into_par_iter()
        .map(|idx| {
            let mut digits = [0usize; 8];
            ti.digits(idx, &mut digits[..n_players]);
            let k0 = digits[0];
            digits[1..n_players]
                .iter()
                .map(|&kj| psi_g[(k0 + m - kj) % m])
                .sum::<f64>()
                * w
        })
        .collect();

    let mut levels: Vec<Vec<f64>> = Vec::new();
    let mut cur = terminal.clone();
    if cfg.store_path {
        levels.push(cur.clone());
    }
    let mut feedback_sup = own_gradient_sup(&cur, ti, inv2h);

    for _s in (0..steps).rev() {
        let prev = &cur;
        let mut next: Vec<f64> = (0..len)
            .into_par_iter()
            .map(|idx| {
                let mut digits = [0usize; 8];
                ti.digits(idx, &mut digits[..n_players]);
                let k0 = digits[0];
                let x0 = [k0 as f64 * h, 0.0];
                // running cost from the empirical measure of the others
                let mut force = 0.0;
                // own gradient (player 1's momentum)
                let d0 = (prev[ti.shifted(idx, 0, 1)] - prev[ti.shifted(idx, 0, -1)]) * inv2h;
                // cross-drift: sum over the other players of
                // DpH(x_j, D_{x_j} v^{N,j}) . D_{x_j} v^{N,1}
                let mut cross = 0.0;
                for a in 1..n_players {
                    let ka = digits[a];
                    force += psi_f[(k0 + m - ka) % m];
                    let da =
                        (prev[ti.shifted(idx, a, 1)] - prev[ti.shifted(idx, a, -1)]) * inv2h;
                    // player a's own gradient at this tuple = player 1's own
                    // gradient at the swapped tuple (exchangeability)
                    let sw = ti.swap(idx, 0, a);
                    let ga =
                        (prev[ti.shifted(sw, 0, 1)] - prev[ti.shifted(sw, 0, -1)]) * inv2h;
                    let xa = [ka as f64 * h, 0.0];
                    cross += ham.grad_p(xa, [ga, 0.0])[0] * da;
                }
                force *= w;
                prev[idx] + dt * (force - ham.value(x0, [d0, 0.0]) - cross)
            })
            .collect();
        diffuse_tensor(&mut next, ti, cfg.beta, dt);
        let sup = next.par_iter().fold(|| 0.0f64, |a, v| a.max(v.abs())).reduce(|| 0.0, f64::max);
        if !sup.is_finite() || sup > BLOW_UP {
            return Err(MfgError::Divergence(format!(
                "Nash backward sweep blow-up: sup |v| = {sup:.3e}"
            )));
        }
        feedback_sup = feedback_sup.max(own_gradient_sup(&next, ti, inv2h));
        cur = next;
        if cfg.store_path {
            levels.push(cur.clone());
        }
    }

    if cfg.store_path {
        levels.reverse(); // stored terminal-first during the sweep
    } else {
        levels = vec![cur, terminal];
    }
    if !feedback_sup.is_finite() {
        return Err(MfgError::Divergence("non-finite Nash feedback".into()));
    }
    Ok(NashTensor {
        n_players,
        grid,
        time: cfg.time,
        beta: cfg.beta,
        store_path: cfg.store_path,
        levels,
        feedback_sup,
    })
}

impl NashTensor {
    pub fn n_players(&self) -> usize {
        self.n_players
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn time(&self) -> TimeGrid {
        self.time
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Largest |D_{x_i} v^{N,i}| seen over all stored levels.
    pub fn feedback_sup(&self) -> f64 {
        self.feedback_sup
    }

    fn ti(&self) -> TensorIndex {
        TensorIndex { m: self.grid.points_per_axis(), n: self.n_players }
    }

    fn level(&self, s: usize) -> Result<&[f64]> {
        if self.store_path {
            self.levels
                .get(s)
                .map(Vec::as_slice)
                .ok_or_else(|| MfgError::InvalidInput("time level out of range".into()))
        } else if s == 0 {
            Ok(&self.levels[0])
        } else if s == self.time.steps() {
            Ok(&self.levels[1])
        } else {
            Err(MfgError::InvalidInput(
                "interior time levels were not stored (store_path = false)".into(),
            ))
        }
    }

    /// `v^{N,i}(t_s, x)` for a node tuple `x`; player `i` is zero-based.
    pub fn value(&self, i: usize, s: usize, tuple: &[usize]) -> Result<f64> {
        let ti = self.ti();
        if tuple.len() != self.n_players || i >= self.n_players {
            return Err(MfgError::InvalidInput("bad player tuple".into()));
        }
        let idx = ti.swap(ti.from_digits(tuple), 0, i);
        Ok(self.level(s)?[idx])
    }

    /// Own-momentum feedback `D_{x_i} v^{N,i}(t_s, x)` by central difference.
    pub fn feedback(&self, i: usize, s: usize, tuple: &[usize]) -> Result<f64> {
        let ti = self.ti();
        if tuple.len() != self.n_players || i >= self.n_players {
            return Err(MfgError::InvalidInput("bad player tuple".into()));
        }
        let idx = ti.swap(ti.from_digits(tuple), 0, i);
        let level = self.level(s)?;
        let inv2h = 0.5 / self.grid.spacing();
        Ok((level[ti.shifted(idx, 0, 1)] - level[ti.shifted(idx, 0, -1)]) * inv2h)
    }

    /// Feedback with the own position continuous (linear interpolation along
    /// the own axis) and the other players at given grid cells; own-first
    /// ordering, so this is player 1's feedback by exchangeability.
    pub fn feedback_interp(&self, s: usize, x_own: f64, other_cells: &[usize]) -> Result<f64> {
        if other_cells.len() != self.n_players - 1 {
            return Err(MfgError::InvalidInput("bad companion count".into()));
        }
        let m = self.grid.points_per_axis();
        let h = self.grid.spacing();
        let xw = x_own.rem_euclid(1.0) / h;
        let k = (xw.floor() as usize).min(m - 1);
        let frac = xw - k as f64;
        let mut tuple = Vec::with_capacity(self.n_players);
        tuple.push(k);
        tuple.extend_from_slice(other_cells);
        let a = self.feedback(0, s, &tuple)?;
        tuple[0] = (k + 1) % m;
        let b = self.feedback(0, s, &tuple)?;
        Ok((1.0 - frac) * a + frac * b)
    }

    /// Nearest grid node of a continuous position.
    pub fn nearest_cell(&self, x: f64) -> usize {
        let m = self.grid.points_per_axis();
        ((x.rem_euclid(1.0) / self.grid.spacing()).round() as usize) % m
    }

    /// Worst asymmetry of `v^{N,1}` under swapping two non-own axes; zero up
    /// to FFT round-off by construction.
    pub fn exchangeability_defect(&self, samples: usize, seed: u64) -> Result<f64> {
        if self.n_players < 3 {
            return Ok(0.0);
        }
        let ti = self.ti();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let level = self.level(0)?;
        let mut worst = 0.0f64;
        for _ in 0..samples {
            let idx = rng.gen_range(0..ti.len());
            let a = rng.gen_range(1..self.n_players);
            let b = rng.gen_range(1..self.n_players);
            worst = worst.max((level[idx] - level[ti.swap(idx, a, b)]).abs());
        }
        Ok(worst)
    }
}

/// Per-tuple averaged gap `(1/N) sum_i |v^{N,i}(t0,x) - U(t0, x_i, m^N_x)|`
/// with the full empirical measure `m^N_x`.
pub fn nash_vs_master_error(
    tensor: &NashTensor,
    model: &Model,
    tuples: &[Vec<usize>],
    params: PicardParams,
) -> Result<Vec<f64>> {
    let grid = tensor.grid();
    let time = tensor.time();
    let n = tensor.n_players();
    let mut gaps = Vec::with_capacity(tuples.len());
    for tuple in tuples {
        let emp = EmpiricalMeasure::new(tuple.clone(), None)?.measure(grid)?;
        let u = evaluate_u(model, time.t0(), time.t_end(), time.steps(), &emp, params)?;
        let mut acc = 0.0;
        for i in 0..n {
            acc += (tensor.value(i, 0, tuple)? - u.values()[tuple[i]]).abs();
        }
        gaps.push(acc / n as f64);
    }
    Ok(gaps)
}

/// Residual of the projection `u^{N,i}(t,x) = U(t, x_i, m^{N,i}_x)` in the
/// Nash system, assembled from the master evaluator and the derivative
/// kernel at the sampled empirical measure. Signed; the `C/N` law concerns
/// its absolute value.
pub fn residual_of_projection(
    model: &Model,
    time: TimeGrid,
    tuple: &[usize],
    i: usize,
    fd_steps: usize,
    params: PicardParams,
) -> Result<f64> {
    let grid = model.grid();
    let n = tuple.len();
    if n < 2 || i >= n {
        return Err(MfgError::InvalidInput("bad player tuple".into()));
    }
    let steps = time.steps();
    if fd_steps == 0 || fd_steps >= steps {
        return Err(MfgError::InvalidInput(
            "time-derivative stencil must satisfy 0 < fd_steps < steps".into(),
        ));
    }
    let (t0, t_end, dt) = (time.t0(), time.t_end(), time.dt());
    let w = 1.0 / (n - 1) as f64;
    let ki = tuple[i];
    let xi = grid.node(ki);

    let m_i = EmpiricalMeasure::new(tuple.to_vec(), Some(i))?.measure(grid)?;
    let u0 = evaluate_u(model, t0, t_end, steps, &m_i, params)?;
    let du0 = gradient(&u0);
    let lap0 = laplacian_fd(&u0);

    // -dU/dt at (t0, x_i, m^{N,i}) by a centered difference in the start time
    let eps = fd_steps as f64 * dt;
    let u_p = evaluate_u(model, t0 + eps, t_end, steps - fd_steps, &m_i, params)?;
    let u_m = evaluate_u(model, t0 - eps, t_end, steps + fd_steps, &m_i, params)?;
    let dt_u = (u_p.values()[ki] - u_m.values()[ki]) / (2.0 * eps);

    // kernel terms: D_m U and div_y D_m U at the base measure
    let kernel = DerivativeKernel::compute(model, time, &m_i, params)?;
    let n_nodes = grid.len();
    let dmu = kernel.dy(0);
    let divy = kernel.div_y_dy();

    // cross-drift momenta: each player j uses U at its own empirical measure
    let mut cross = 0.0;
    let mut divy_sum = 0.0;
    for (j, &kj) in tuple.iter().enumerate() {
        if j == i {
            continue;
        }
        let m_j = EmpiricalMeasure::new(tuple.to_vec(), Some(j))?.measure(grid)?;
        let u_j = evaluate_u(model, t0, t_end, steps, &m_j, params)?;
        let p_j = gradient(&u_j).at(kj);
        let b_j = model.hamiltonian.grad_p(grid.node(kj), p_j);
        cross += b_j[0] * w * dmu[ki * n_nodes + kj];
        divy_sum += divy[ki * n_nodes + kj];
    }

    let f = model.running.evaluate(&m_i);
    let residual = -dt_u - (lap0.values()[ki] + w * divy_sum)
        + model.hamiltonian.value(xi, du0.at(ki))
        + cross
        - f.values()[ki];
    Ok(residual)
}

/// Monte-Carlo average of `v^{N,1}(t0, x, others ~ m0 i.i.d.)` per node,
/// with its L1(m0) distance to `U(t0, ., m0)`.
#[derive(Debug, Clone)]
pub struct ProjectionAverage {
    pub w: GridField,
    pub l1_distance: f64,
}

pub fn averaged_projection_w(
    tensor: &NashTensor,
    model: &Model,
    m0: &GridMeasure,
    mc_samples: usize,
    seed: u64,
    params: PicardParams,
) -> Result<ProjectionAverage> {
    let grid = tensor.grid();
    if m0.grid() != grid {
        return Err(MfgError::ShapeMismatch("measure grid differs from tensor grid".into()));
    }
    if mc_samples == 0 {
        return Err(MfgError::InvalidInput("need at least one MC sample".into()));
    }
    let n = tensor.n_players();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0; grid.len()];
    let mut tuple = vec![0usize; n];
    for _ in 0..mc_samples {
        for slot in tuple.iter_mut().skip(1) {
            *slot = m0.sample_node(rng.gen::<f64>());
        }
        for (node, a) in acc.iter_mut().enumerate() {
            tuple[0] = node;
            *a += tensor.value(0, 0, &tuple)?;
        }
    }
    let inv = 1.0 / mc_samples as f64;
    let w = GridField::from_values(grid, acc.into_iter().map(|a| a * inv).collect())?;
    let time = tensor.time();
    let u = evaluate_u(model, time.t0(), time.t_end(), time.steps(), m0, params)?;
    let vol = grid.cell_volume();
    let l1 = w
        .values()
        .iter()
        .zip(u.values())
        .zip(m0.density())
        .map(|((a, b), d)| (a - b).abs() * d)
        .sum::<f64>()
        * vol;
    Ok(ProjectionAverage { w, l1_distance: l1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Coupling, Hamiltonian, HamiltonianKind, Phi};
    use crate::spectral;

    fn cfg(t_end: f64, steps: usize) -> NashCfg {
        NashCfg { time: TimeGrid::new(0.0, t_end, steps).unwrap(), beta: 0.0, store_path: true }
    }

    fn default_model(grid: Grid) -> Model {
        Model::default_monotone(grid, 0.1, 0.1, 0.15).unwrap()
    }

    #[test]
    fn trivial_model_gives_zero_fields() {
        let grid = Grid::new(1, 8).unwrap();
        let model = Model::trivial(grid).unwrap();
        let sol = solve_nash(&model, 3, &cfg(0.25, 8)).unwrap();
        for level in &sol.levels {
            assert!(level.iter().all(|v| v.abs() < 1e-12));
        }
        assert!(sol.feedback_sup() < 1e-12);
    }

    #[test]
    fn budget_is_enforced() {
        let grid = Grid::new(1, 16).unwrap();
        let model = default_model(grid);
        let err = solve_nash(&model, 7, &cfg(0.25, 8)).unwrap_err();
        assert!(matches!(err, MfgError::Budget(_)), "{err}");
    }

    #[test]
    fn terminal_slice_is_exact() {
        let grid = Grid::new(1, 16).unwrap();
        let model = default_model(grid);
        let sol = solve_nash(&model, 3, &cfg(0.25, 8)).unwrap();
        let s = sol.time.steps();
        for tuple in [[2usize, 5, 11], [0, 0, 0], [7, 3, 3]] {
            let emp = EmpiricalMeasure::new(tuple[1..].to_vec().into_iter().collect(), None)
                .unwrap()
                .measure(grid)
                .unwrap();
            let g = model.terminal.evaluate(&emp);
            let got = sol.value(0, s, &tuple).unwrap();
            assert!(
                (got - g.values()[tuple[0]]).abs() < 1e-12,
                "terminal mismatch {got} vs {}",
                g.values()[tuple[0]]
            );
        }
    }

    #[test]
    fn two_player_no_control_matches_duhamel_oracle() {
        // H constant: v solves a linear heat equation with source
        // psi_F(x1 - x2) and terminal psi_G(x1 - x2); in the difference
        // variable the exact solution is a diagonal Fourier expression.
        let grid = Grid::new(1, 16).unwrap();
        let model = Model {
            hamiltonian: Hamiltonian::new(HamiltonianKind::Constant { c: 0.0 }, 0.0).unwrap(),
            running: Coupling::new(grid, 0.12, Phi::Linear(1.0)).unwrap(),
            terminal: Coupling::new(grid, 0.18, Phi::Linear(1.0)).unwrap(),
        };
        let t_end = 0.25;
        let oracle = {
            let psi_f = model.running.pair_kernel().unwrap();
            let psi_g = model.terminal.pair_kernel().unwrap();
            let mut fg = spectral::forward(&psi_g);
            let ff = spectral::forward(&psi_f);
            let m = grid.points_per_axis();
            for (k, c) in fg.iter_mut().enumerate() {
                let f = spectral::freq(k, m) as f64;
                // Lap_{x1} + Lap_{x2} acts as 2 d^2/dz^2 on functions of
                // z = x1 - x2
                let lam = 2.0 * TAU_SQ4 * f * f;
                *c = if lam == 0.0 {
                    *c + ff[k] * t_end
                } else {
                    *c * (-lam * t_end).exp() + ff[k] * (1.0 - (-lam * t_end).exp()) / lam
                };
            }
            spectral::inverse(fg, grid)
        };
        let err_for = |steps: usize| -> f64 {
            let sol = solve_nash(&model, 2, &cfg(t_end, steps)).unwrap();
            let m = grid.points_per_axis();
            let mut worst = 0.0f64;
            for a in 0..m {
                for b in 0..m {
                    let v = sol.value(0, 0, &[a, b]).unwrap();
                    worst = worst.max((v - oracle.values()[(a + m - b) % m]).abs());
                }
            }
            worst
        };
        let e16 = err_for(16);
        let e32 = err_for(32);
        assert!(e16 < 0.05, "Duhamel defect {e16}");
        // first order in dt
        assert!(e32 < 0.7 * e16, "no dt improvement: {e16} -> {e32}");
    }

    #[test]
    fn fields_are_exchangeable() {
        let grid = Grid::new(1, 8).unwrap();
        let model = default_model(grid);
        let sol = solve_nash(&model, 3, &cfg(0.25, 16)).unwrap();
        let defect = sol.exchangeability_defect(200, 7).unwrap();
        assert!(defect < 1e-10, "exchangeability defect {defect}");
        // reading player 2's field through the swap map agrees with reading
        // player 1's at the swapped tuple
        let a = sol.value(1, 0, &[3, 6, 1]).unwrap();
        let b = sol.value(0, 0, &[6, 3, 1]).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn common_noise_vanishes_continuously() {
        let grid = Grid::new(1, 8).unwrap();
        let model = default_model(grid);
        let time = TimeGrid::new(0.0, 0.25, 16).unwrap();
        let solve_b = |beta: f64| {
            solve_nash(&model, 2, &NashCfg { time, beta, store_path: false }).unwrap()
        };
        let base = solve_b(0.0);
        let diff = |other: &NashTensor| {
            base.levels[0]
                .iter()
                .zip(&other.levels[0])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let d_hi = diff(&solve_b(1e-2));
        let d_lo = diff(&solve_b(1e-3));
        assert!(d_hi > 0.0 && d_hi < 0.1, "beta perturbation too large: {d_hi}");
        // O(beta) continuity: a tenth of the beta gives at least 3x less
        assert!(d_lo < d_hi / 3.0, "beta continuity {d_hi} -> {d_lo}");
    }

    #[test]
    fn master_gap_shrinks_with_more_players() {
        let grid = Grid::new(1, 16).unwrap();
        let model = default_model(grid);
        let time = TimeGrid::new(0.0, 0.25, 16).unwrap();
        let params = PicardParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mean_gap = |n: usize, rng: &mut ChaCha8Rng| -> f64 {
            let sol =
                solve_nash(&model, n, &NashCfg { time, beta: 0.0, store_path: false }).unwrap();
            let tuples: Vec<Vec<usize>> = (0..3)
                .map(|_| (0..n).map(|_| rng.gen_range(0..grid.len())).collect())
                .collect();
            let gaps = nash_vs_master_error(&sol, &model, &tuples, params).unwrap();
            gaps.iter().sum::<f64>() / gaps.len() as f64
        };
        let g2 = mean_gap(2, &mut rng);
        let g4 = mean_gap(4, &mut rng);
        assert!(g4 < g2, "gap not decreasing: N=2 {g2}, N=4 {g4}");
    }

    #[test]
    fn excluded_vs_full_empirical_measure_is_a_small_perturbation() {
        use crate::wasserstein::wasserstein1;
        let grid = Grid::new(1, 16).unwrap();
        let model = default_model(grid);
        let time = TimeGrid::new(0.0, 0.25, 16).unwrap();
        let params = PicardParams::default();
        let tuple = vec![2usize, 7, 9, 13];
        let full = EmpiricalMeasure::new(tuple.clone(), None).unwrap().measure(grid).unwrap();
        let part = EmpiricalMeasure::new(tuple, Some(0)).unwrap().measure(grid).unwrap();
        let d1 = wasserstein1(&full, &part).unwrap();
        let uf = evaluate_u(&model, 0.0, 0.25, time.steps(), &full, params).unwrap();
        let up = evaluate_u(&model, 0.0, 0.25, time.steps(), &part, params).unwrap();
        let gap = uf.sub(&up).sup_norm();
        assert!(d1 <= 2.0 / 4.0 + 1e-12, "d1 between empiricals too large: {d1}");
        assert!(gap <= 5.0 * d1 + 1e-9, "U gap {gap} not Lipschitz-bounded by d1 {d1}");
    }

    #[test]
    fn projection_residual_trivial_and_symmetric() {
        let grid = Grid::new(1, 16).unwrap();
        let time = TimeGrid::new(0.1, 0.35, 16).unwrap();
        let params = PicardParams::default();
        let trivial = Model::trivial(grid).unwrap();
        let r0 = residual_of_projection(&trivial, time, &[3, 8, 12], 0, 2, params).unwrap();
        assert!(r0.abs() < 1e-8, "trivial projection residual {r0}");

        let model = default_model(grid);
        let r1 = residual_of_projection(&model, time, &[3, 8, 12], 0, 2, params).unwrap();
        let r2 = residual_of_projection(&model, time, &[3, 12, 8], 0, 2, params).unwrap();
        assert!(
            (r1 - r2).abs() < 1e-10,
            "residual not symmetric in the non-i coordinates: {r1} vs {r2}"
        );
        assert!(r1.abs() < 5.0, "residual unexpectedly large: {r1}");
    }

    #[test]
    fn averaged_projection_trivial_and_mc_variance() {
        let grid = Grid::new(1, 8).unwrap();
        let m0 = GridMeasure::from_fn(grid, |x| {
            1.0 + 0.5 * (2.0 * std::f64::consts::PI * x[0]).cos()
        })
        .unwrap();
        let params = PicardParams::default();
        let trivial = Model::trivial(grid).unwrap();
        let sol = solve_nash(&trivial, 3, &cfg(0.25, 8)).unwrap();
        let avg = averaged_projection_w(&sol, &trivial, &m0, 50, 3, params).unwrap();
        assert!(avg.l1_distance < 1e-12, "trivial projection distance {}", avg.l1_distance);

        // MC error bar shrinks like 1/sqrt(samples) on the default model
        let model = default_model(grid);
        let sol = solve_nash(&model, 3, &cfg(0.25, 16)).unwrap();
        let spread = |mc: usize| -> f64 {
            let runs: Vec<f64> = (0..6)
                .map(|s| {
                    averaged_projection_w(&sol, &model, &m0, mc, 100 + s, params)
                        .unwrap()
                        .l1_distance
                })
                .collect();
            let mean = runs.iter().sum::<f64>() / runs.len() as f64;
            (runs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (runs.len() - 1) as f64)
                .sqrt()
        };
        let s1 = spread(100);
        let s4 = spread(400);
        assert!(
            s4 < s1,
            "quadrupling MC samples did not shrink the spread: {s1} -> {s4}"
        );
    }
}
