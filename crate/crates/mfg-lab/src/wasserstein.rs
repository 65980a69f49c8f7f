//! Wasserstein-1 (Monge-Kantorovich) distance between grid measures.
//!
//! On the circle the distance is computed exactly from the CDF difference:
//! `W1 = min_c sum_k |F_1(k) - F_2(k) - c| h`, the minimizer being a median.
//! In two dimensions the exact transportation linear program is solved with
//! the transportation simplex; this is only allowed on small grids.

use std::collections::HashMap;

use crate::error::{MfgError, Result};
use crate::grid::GridMeasure;

/// Largest per-axis resolution accepted for the exact 2-d transport LP.
pub const MAX_LP_POINTS_PER_AXIS: usize = 24;

pub fn wasserstein1(m1: &GridMeasure, m2: &GridMeasure) -> Result<f64> {
    if m1.grid() != m2.grid() {
        return Err(MfgError::ShapeMismatch("measures live on different grids".into()));
    }
    match m1.grid().dim() {
        1 => Ok(circle_w1(m1, m2)),
        _ => {
            let m = m1.grid().points_per_axis();
            if m > MAX_LP_POINTS_PER_AXIS {
                return Err(MfgError::Capability(format!(
                    "exact 2-d transport limited to M <= {MAX_LP_POINTS_PER_AXIS}, got M = {m}"
                )));
            }
            transport_lp(m1, m2)
        }
    }
}

fn circle_w1(m1: &GridMeasure, m2: &GridMeasure) -> f64 {
    let g = m1.grid();
    let h = g.spacing();
    let mut cdf_diff = Vec::with_capacity(g.len());
    let mut acc = 0.0;
    for i in 0..g.len() {
        acc += (m1.density()[i] - m2.density()[i]) * h;
        cdf_diff.push(acc);
    }
    // all terms carry the same weight h, so the optimal offset is a median
    let mut sorted = cdf_diff.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let c = sorted[sorted.len() / 2];
    cdf_diff.iter().map(|f| (f - c).abs()).sum::<f64>() * h
}

/// Exact discrete optimal transport by the transportation simplex (MODI).
fn transport_lp(m1: &GridMeasure, m2: &GridMeasure) -> Result<f64> {
    let g = m1.grid();
    let vol = g.cell_volume();

    // shared mass stays in place at zero cost (the ground cost is a metric)
    let mut supply = Vec::new();
    let mut demand = Vec::new();
    for i in 0..g.len() {
        let a = m1.density()[i] * vol;
        let b = m2.density()[i] * vol;
        let shared = a.min(b);
        let (s, d) = (a - shared, b - shared);
        if s > 1e-15 {
            supply.push((i, s));
        }
        if d > 1e-15 {
            demand.push((i, d));
        }
    }
    if supply.is_empty() || demand.is_empty() {
        return Ok(0.0);
    }
    let total_s: f64 = supply.iter().map(|(_, s)| s).sum();
    let total_d: f64 = demand.iter().map(|(_, d)| d).sum();
    let rescale = total_s / total_d;
    for (_, d) in &mut demand {
        *d *= rescale;
    }

    let n = supply.len();
    let k = demand.len();
    let cost = |i: usize, j: usize| -> f64 {
        g.torus_distance(g.node(supply[i].0), g.node(demand[j].0))
    };

    // tiny supply perturbation keeps the basis nondegenerate
    let eps = total_s * 1e-13;
    let mut a: Vec<f64> = supply.iter().map(|(_, s)| *s).collect();
    let mut b: Vec<f64> = demand.iter().map(|(_, d)| *d).collect();
    for (i, ai) in a.iter_mut().enumerate() {
        *ai += eps * (i + 1) as f64;
    }
    b[k - 1] += eps * (n * (n + 1) / 2) as f64;

    // northwest-corner initial basis
    let mut flow: HashMap<(usize, usize), f64> = HashMap::new();
    let mut basis: Vec<(usize, usize)> = Vec::with_capacity(n + k - 1);
    {
        let (mut i, mut j) = (0, 0);
        let mut rem_a = a[0];
        let mut rem_b = b[0];
        loop {
            let f = rem_a.min(rem_b);
            flow.insert((i, j), f);
            basis.push((i, j));
            rem_a -= f;
            rem_b -= f;
            if i == n - 1 && j == k - 1 {
                break;
            }
            if rem_a <= rem_b && i < n - 1 {
                i += 1;
                rem_a = a[i];
            } else {
                j += 1;
                rem_b = b[j];
            }
        }
    }

    let max_pivots = 40 * (n + k) * (n + k).max(32);
    for _ in 0..max_pivots {
        // dual potentials from the basis tree: u_i + v_j = c_ij on basic cells
        let mut u = vec![f64::NAN; n];
        let mut v = vec![f64::NAN; k];
        u[0] = 0.0;
        let mut stack = vec![(0usize, true)]; // (node, is_source)
        let mut adj_s: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut adj_d: Vec<Vec<usize>> = vec![Vec::new(); k];
        for &(i, j) in &basis {
            adj_s[i].push(j);
            adj_d[j].push(i);
        }
        while let Some((node, is_source)) = stack.pop() {
            if is_source {
                for &j in &adj_s[node] {
                    if v[j].is_nan() {
                        v[j] = cost(node, j) - u[node];
                        stack.push((j, false));
                    }
                }
            } else {
                for &i in &adj_d[node] {
                    if u[i].is_nan() {
                        u[i] = cost(i, node) - v[node];
                        stack.push((i, true));
                    }
                }
            }
        }
        if u.iter().any(|x| x.is_nan()) || v.iter().any(|x| x.is_nan()) {
            return Err(MfgError::Divergence("transport basis lost connectivity".into()));
        }

        // entering cell: most negative reduced cost
        let mut best = (0usize, 0usize, -1e-11);
        for i in 0..n {
            for j in 0..k {
                let rc = cost(i, j) - u[i] - v[j];
                if rc < best.2 {
                    best = (i, j, rc);
                }
            }
        }
        if best.2 >= -1e-11 {
            let value: f64 = basis.iter().map(|&(i, j)| flow[&(i, j)] * cost(i, j)).sum();
            return Ok(value);
        }
        let (ei, ej, _) = best;

        // cycle: unique basis-tree path from source ei to sink ej
        let path = tree_path(&basis, n, k, ei, ej)
            .ok_or_else(|| MfgError::Divergence("transport pivot found no cycle".into()))?;
        // path alternates (i0,j1),(i1,j1),(i1,j2),... starting at ei, ending at ej;
        // adding (ei,ej) closes the cycle. Odd-position arcs lose flow.
        let mut theta = f64::INFINITY;
        let mut leave = None;
        for (pos, arc) in path.iter().enumerate() {
            if pos % 2 == 0 {
                let f = flow[arc];
                if f < theta {
                    theta = f;
                    leave = Some(*arc);
                }
            }
        }
        let leave = leave.unwrap();
        for (pos, arc) in path.iter().enumerate() {
            let delta = if pos % 2 == 0 { -theta } else { theta };
            *flow.get_mut(arc).unwrap() += delta;
        }
        flow.insert((ei, ej), theta);
        basis.retain(|arc| *arc != leave);
        flow.remove(&leave);
        basis.push((ei, ej));
    }
    Err(MfgError::Divergence("transportation simplex exceeded pivot budget".into()))
}

/// Path of basic arcs from source `si` to sink `tj` through the basis tree,
/// starting with an arc out of `si`.
fn tree_path(
    basis: &[(usize, usize)],
    n: usize,
    k: usize,
    si: usize,
    tj: usize,
) -> Option<Vec<(usize, usize)>> {
    let mut adj_s: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut adj_d: Vec<Vec<usize>> = vec![Vec::new(); k];
    for &(i, j) in basis {
        adj_s[i].push(j);
        adj_d[j].push(i);
    }
    // DFS over the bipartite tree
    fn dfs(
        adj_s: &[Vec<usize>],
        adj_d: &[Vec<usize>],
        at_source: bool,
        node: usize,
        from: Option<(usize, usize)>,
        tj: usize,
        path: &mut Vec<(usize, usize)>,
    ) -> bool {
        if at_source {
            for &j in &adj_s[node] {
                if from == Some((node, j)) {
                    continue;
                }
                path.push((node, j));
                if j == tj
                    || dfs(adj_s, adj_d, false, j, Some((node, j)), tj, path)
                {
                    return true;
                }
                path.pop();
            }
        } else {
            for &i in &adj_d[node] {
                if from == Some((i, node)) {
                    continue;
                }
                path.push((i, node));
                if dfs(adj_s, adj_d, true, i, Some((i, node)), tj, path) {
                    return true;
                }
                path.pop();
            }
        }
        false
    }
    let mut path = Vec::new();
    if dfs(&adj_s, &adj_d, true, si, None, tj, &mut path) {
        Some(path)
    } else {
        None
    }
}
