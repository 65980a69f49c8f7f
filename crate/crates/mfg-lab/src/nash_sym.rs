//! Exchangeability-reduced Nash solver. The N-player value `v^{N,1}` is
//! symmetric in the other players' coordinates, so it is a function of the
//! own position and of the *multiset* of the others' positions. On a grid
//! with M nodes the multiset is a count vector summing to N-1, shrinking
//! the state space from M^N to M * C(N-2+M, M-1) and making N = 16
//! reachable where the tensor grid is not.
//!
//! The scheme is a fine-step explicit discretization (monotone stencil):
//! own-axis Laplacian and gradient by central differences, the others'
//! Laplacians and the cross-drift by single-particle moves on the count
//! vector, sources and feedbacks frozen at the previous (later) time level.
//! Idiosyncratic noise only (beta = 0); the common-noise case lives in the
//! scenario-tree module.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{MfgError, Result};
use crate::grid::{Grid, TimeGrid};
use crate::model::Model;

const BLOW_UP: f64 = 1e6;
/// Hard cap on doubles per reduced field.
const STATE_BUDGET: usize = 1 << 24;

/// Multiset combinatorics: all count vectors of `r` particles over `m` cells
/// in lexicographic order, with O(1) single-particle move transitions.
#[derive(Debug, Clone)]
struct CountSpace {
    m: usize,
    n_states: usize,
    /// Flattened count vectors, `n_states * m` entries.
    counts: Vec<u8>,
    /// `move_to[(q * m + from) * m + to]` = state after moving one particle
    /// from `from` to `to`; `u32::MAX` when `from` is empty.
    move_to: Vec<u32>,
}

impl CountSpace {
    fn new(m: usize, r: usize) -> Result<Self> {
        if r > u8::MAX as usize {
            return Err(MfgError::Budget("too many particles per count cell".into()));
        }
        let mut counts: Vec<u8> = Vec::new();
        let mut cur = vec![0u8; m];
        enumerate_counts(&mut cur, 0, r, &mut counts);
        let n_states = counts.len() / m;
        let mut rank: HashMap<Vec<u8>, u32> = HashMap::with_capacity(n_states);
        for q in 0..n_states {
            rank.insert(counts[q * m..(q + 1) * m].to_vec(), q as u32);
        }
        let move_to: Vec<u32> = (0..n_states)
            .into_par_iter()
            .flat_map_iter(|q| {
                let base = &counts[q * m..(q + 1) * m];
                let mut out = vec![u32::MAX; m * m];
                let mut probe = base.to_vec();
                for from in 0..m {
                    if base[from] == 0 {
                        continue;
                    }
                    for to in 0..m {
                        if to == from {
                            out[from * m + to] = q as u32;
                            continue;
                        }
                        probe[from] -= 1;
                        probe[to] += 1;
                        out[from * m + to] = rank[&probe];
                        probe[from] += 1;
                        probe[to] -= 1;
                    }
                }
                out
            })
            .collect();
        Ok(CountSpace { m, n_states, counts, move_to })
    }

    #[inline]
    fn counts_of(&self, q: usize) -> &[u8] {
        &self.counts[q * self.m..(q + 1) * self.m]
    }

    #[inline]
    fn moved(&self, q: usize, from: usize, to: usize) -> usize {
        self.move_to[(q * self.m + from) * self.m + to] as usize
    }

    fn rank_cells(&self, cells: &[usize]) -> Result<usize> {
        let mut probe = vec![0u8; self.m];
        for &c in cells {
            if c >= self.m {
                return Err(MfgError::InvalidInput("cell out of range".into()));
            }
            probe[c] += 1;
        }
        // binary search over the lexicographically ordered table
        let mut lo = 0usize;
        let mut hi = self.n_states;
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.counts_of(mid) < probe.as_slice() {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        if lo < self.n_states && self.counts_of(lo) == probe.as_slice() {
            Ok(lo)
        } else {
            Err(MfgError::InvalidInput("count vector has the wrong particle total".into()))
        }
    }
}

fn enumerate_counts(cur: &mut [u8], cell: usize, remaining: usize, out: &mut Vec<u8>) {
    if cell + 1 == cur.len() {
        cur[cell] = remaining as u8;
        out.extend_from_slice(cur);
        return;
    }
    for v in 0..=remaining {
        cur[cell] = v as u8;
        enumerate_counts(cur, cell + 1, remaining - v, out);
    }
    cur[cell] = 0;
}

/// Reduced N-player Nash solution: own-gradient feedback stored at every
/// coarse time level plus the full value slice at `t0`.
#[derive(Debug)]
pub struct SymmetricNash {
    grid: Grid,
    time: TimeGrid,
    n_players: usize,
    space: CountSpace,
    /// Own-axis central-difference feedback `D_{x_1} v^{N,1}` per coarse
    /// level; layout `own_cell * n_states + q`.
    feedback: Vec<Vec<f64>>,
    /// Value slice at `t0`, same layout.
    value0: Vec<f64>,
}

/// Backward solve of the reduced system with fine explicit substeps chosen
/// for monotone stability of the full stencil.
pub fn solve_nash_symmetric(
    model: &Model,
    n_players: usize,
    time: TimeGrid,
) -> Result<SymmetricNash> {
    let grid = model.grid();
    if grid.dim() != 1 {
        return Err(MfgError::Capability(
            "the reduced Nash solver supports one spatial dimension per player".into(),
        ));
    }
    if n_players < 2 {
        return Err(MfgError::InvalidInput("need at least two players".into()));
    }
    let psi_f = model.running.pair_kernel().ok_or_else(|| {
        MfgError::Capability("reduced Nash solver needs a linear running coupling".into())
    })?;
    let psi_g = model.terminal.pair_kernel().ok_or_else(|| {
        MfgError::Capability("reduced Nash solver needs a linear terminal coupling".into())
    })?;
    let m = grid.points_per_axis();
    let r = n_players - 1;
    // C(r + m - 1, m - 1) count states, checked before enumerating anything
    let predicted = (1..m).fold(1.0f64, |acc, j| acc * (r + j) as f64 / j as f64);
    if predicted * m as f64 > STATE_BUDGET as f64 {
        return Err(MfgError::Budget(format!(
            "reduced field needs {:.3e} doubles, budget is {STATE_BUDGET}",
            predicted * m as f64
        )));
    }
    let space = CountSpace::new(m, r)?;
    let n_states = space.n_states;
    let len = m * n_states;

    let h = grid.spacing();
    let inv_h2 = 1.0 / (h * h);
    let inv2h = 0.5 / h;
    let ham = model.hamiltonian;
    let lip = ham.lipschitz_bound();
    let psi_f = psi_f.values().to_vec();
    let psi_g = psi_g.values().to_vec();
    let wr = 1.0 / r as f64;

    // monotone-stencil step bound: diffusion of N particles plus the
    // advective parts, with a safety factor
    let diff_rate = 2.0 * inv_h2 * n_players as f64;
    let adv_rate = lip / h * n_players as f64;
    let dt_stable = 0.8 / (diff_rate + adv_rate);
    let dt = time.dt();
    let sub = (dt / dt_stable).ceil().max(1.0) as usize;
    let dt_f = dt / sub as f64;

    // terminal condition, exact for node-aligned Dirac columns
    let mut v: Vec<f64> = (0..len)
        .into_par_iter()
        .map(|idx| {
            let (k, q) = (idx / n_states, idx % n_states);
            space
                .counts_of(q)
                .iter()
                .enumerate()
                .map(|(c, &nc)| nc as f64 * psi_g[(k + m - c) % m])
                .sum::<f64>()
                * wr
        })
        .collect();

    let feedback_of = |v: &[f64]| -> Vec<f64> {
        (0..len)
            .into_par_iter()
            .map(|idx| {
                let (k, q) = (idx / n_states, idx % n_states);
                let up = v[((k + 1) % m) * n_states + q];
                let dn = v[((k + m - 1) % m) * n_states + q];
                (up - dn) * inv2h
            })
            .collect()
    };

    let steps = time.steps();
    let mut feedback: Vec<Vec<f64>> = vec![Vec::new(); steps + 1];
    feedback[steps] = feedback_of(&v);

    for s in (0..steps).rev() {
        for _ in 0..sub {
            let prev = &v;
            let next: Vec<f64> = (0..len)
                .into_par_iter()
                .map(|idx| {
                    let (k, q) = (idx / n_states, idx % n_states);
                    let here = prev[idx];
                    let up = prev[((k + 1) % m) * n_states + q];
                    let dn = prev[((k + m - 1) % m) * n_states + q];
                    let lap = (up + dn - 2.0 * here) * inv_h2;
                    let d0 = (up - dn) * inv2h;
                    let xk = [k as f64 * h, 0.0];
                    let mut force = 0.0;
                    let mut others = 0.0;
                    for (c, &nc) in space.counts_of(q).iter().enumerate() {
                        if nc == 0 {
                            continue;
                        }
                        let ncf = nc as f64;
                        force += ncf * psi_f[(k + m - c) % m];
                        let q_up = space.moved(q, c, (c + 1) % m);
                        let q_dn = space.moved(q, c, (c + m - 1) % m);
                        let v_up = prev[k * n_states + q_up];
                        let v_dn = prev[k * n_states + q_dn];
                        // player-at-c's own feedback: swap own and c
                        let q_sw = space.moved(q, c, k);
                        let g_c = (prev[((c + 1) % m) * n_states + q_sw]
                            - prev[((c + m - 1) % m) * n_states + q_sw])
                            * inv2h;
                        let b_c = ham.grad_p([c as f64 * h, 0.0], [g_c, 0.0])[0];
                        others += ncf
                            * ((v_up + v_dn - 2.0 * here) * inv_h2
                                - b_c * (v_up - v_dn) * inv2h);
                    }
                    force *= wr;
                    here + dt_f * (lap + others - ham.value(xk, [d0, 0.0]) + force)
                })
                .collect();
            let sup = next.par_iter().fold(|| 0.0f64, |a, x| a.max(x.abs())).reduce(|| 0.0, f64::max);
            if !sup.is_finite() || sup > BLOW_UP {
                return Err(MfgError::Divergence(format!(
                    "reduced Nash sweep blow-up: sup |v| = {sup:.3e}"
                )));
            }
            v = next;
        }
        feedback[s] = feedback_of(&v);
    }

    Ok(SymmetricNash { grid, time, n_players, space, feedback, value0: v })
}

impl SymmetricNash {
    pub fn n_players(&self) -> usize {
        self.n_players
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn time(&self) -> TimeGrid {
        self.time
    }

    pub fn n_states(&self) -> usize {
        self.space.n_states
    }

    /// Value `v^{N,1}(t0, x)` at a node tuple (own first).
    pub fn value_t0(&self, tuple: &[usize]) -> Result<f64> {
        if tuple.len() != self.n_players {
            return Err(MfgError::InvalidInput("bad player tuple".into()));
        }
        let q = self.space.rank_cells(&tuple[1..])?;
        Ok(self.value0[tuple[0] * self.space.n_states + q])
    }

    /// Feedback `D_{x_1} v^{N,1}(t_s, x_own, others)` with the own position
    /// continuous (linear interpolation between nodes) and the others
    /// projected to their nearest nodes.
    pub fn feedback_interp(&self, s: usize, x_own: f64, other_cells: &[usize]) -> Result<f64> {
        if s >= self.feedback.len() {
            return Err(MfgError::InvalidInput("time level out of range".into()));
        }
        if other_cells.len() != self.n_players - 1 {
            return Err(MfgError::InvalidInput("bad companion count".into()));
        }
        let q = self.space.rank_cells(other_cells)?;
        let m = self.grid.points_per_axis();
        let h = self.grid.spacing();
        let xw = x_own.rem_euclid(1.0) / h;
        let k = (xw.floor() as usize).min(m - 1);
        let frac = xw - k as f64;
        let ns = self.space.n_states;
        let fb = &self.feedback[s];
        Ok((1.0 - frac) * fb[k * ns + q] + frac * fb[((k + 1) % m) * ns + q])
    }

    /// Nearest grid node of a continuous position.
    pub fn nearest_cell(&self, x: f64) -> usize {
        let m = self.grid.points_per_axis();
        ((x.rem_euclid(1.0) / self.grid.spacing()).round() as usize) % m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nash::{solve_nash, NashCfg};

    fn default_model(grid: Grid) -> Model {
        Model::default_monotone(grid, 0.1, 0.1, 0.15).unwrap()
    }

    #[test]
    fn count_space_moves_are_consistent() {
        let cs = CountSpace::new(5, 3).unwrap();
        assert_eq!(cs.n_states, 35); // C(3+4,4)
        for q in 0..cs.n_states {
            let counts = cs.counts_of(q).to_vec();
            for from in 0..5 {
                if counts[from] == 0 {
                    continue;
                }
                for to in 0..5 {
                    let q2 = cs.moved(q, from, to);
                    let back = cs.moved(q2, to, from);
                    assert_eq!(back, q, "move not invertible");
                }
            }
            // rank round-trip
            let mut cells = Vec::new();
            for (c, &nc) in counts.iter().enumerate() {
                for _ in 0..nc {
                    cells.push(c);
                }
            }
            assert_eq!(cs.rank_cells(&cells).unwrap(), q);
        }
    }

    #[test]
    fn trivial_model_gives_zero() {
        let grid = Grid::new(1, 8).unwrap();
        let model = Model::trivial(grid).unwrap();
        let time = TimeGrid::new(0.0, 0.25, 8).unwrap();
        let sol = solve_nash_symmetric(&model, 4, time).unwrap();
        assert!(sol.value0.iter().all(|v| v.abs() < 1e-12));
        assert!(sol.feedback.iter().flatten().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn matches_tensor_solver_on_small_systems() {
        // The two discretizations differ at O(dt) (the tensor scheme freezes
        // sources over a whole coarse step, the reduced one substeps), so the
        // oracle is the shared continuum limit: the gap must shrink linearly
        // under dt-refinement and be small in absolute terms.
        let grid = Grid::new(1, 8).unwrap();
        let model = default_model(grid);
        let m = grid.points_per_axis();
        let gap = |n: usize, steps: usize| -> f64 {
            let time = TimeGrid::new(0.0, 0.25, steps).unwrap();
            let reduced = solve_nash_symmetric(&model, n, time).unwrap();
            let tensor =
                solve_nash(&model, n, &NashCfg { time, beta: 0.0, store_path: false }).unwrap();
            let mut worst = 0.0f64;
            let mut tuple = vec![0usize; n];
            for flat in 0..m.pow(n as u32) {
                let mut rem = flat;
                for slot in tuple.iter_mut().rev() {
                    *slot = rem % m;
                    rem /= m;
                }
                let a = reduced.value_t0(&tuple).unwrap();
                let b = tensor.value(0, 0, &tuple).unwrap();
                worst = worst.max((a - b).abs());
            }
            worst
        };
        let g16 = gap(2, 16);
        let g32 = gap(2, 32);
        let g64 = gap(2, 64);
        assert!(g16 < 0.1, "reduced/tensor gap too large: {g16}");
        assert!(g32 < 0.65 * g16 && g64 < 0.65 * g32, "gap not O(dt): {g16} {g32} {g64}");
        let g3 = gap(3, 32);
        assert!(g3 < 0.05, "three-player reduced/tensor gap {g3}");
    }

    #[test]
    fn feedback_interpolation_is_consistent_at_nodes() {
        let grid = Grid::new(1, 8).unwrap();
        let model = default_model(grid);
        let time = TimeGrid::new(0.0, 0.25, 8).unwrap();
        let sol = solve_nash_symmetric(&model, 3, time).unwrap();
        let others = [2usize, 5];
        let q = sol.space.rank_cells(&others).unwrap();
        let k = 4usize;
        let node_val = sol.feedback[0][k * sol.space.n_states + q];
        let interp = sol.feedback_interp(0, k as f64 * grid.spacing(), &others).unwrap();
        assert!((node_val - interp).abs() < 1e-15);
        assert!(sol.feedback_interp(0, 0.999, &others).unwrap().is_finite());
    }

    #[test]
    fn budget_is_enforced() {
        let grid = Grid::new(1, 32).unwrap();
        let model = default_model(grid);
        let time = TimeGrid::new(0.0, 0.25, 8).unwrap();
        let err = solve_nash_symmetric(&model, 16, time).unwrap_err();
        assert!(matches!(err, MfgError::Budget(_)), "{err}");
    }
}
