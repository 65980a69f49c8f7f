//! The master equation seen through its characteristics: `U(t0, x, m0)` is
//! `u(t0, x)` from the MFG system started at `(t0, m0)`. This module checks
//! that the numerically assembled `U` satisfies the first-order master PDE
//!
//! `-dU/dt - Lap_x U + H(x, D_x U) - int div_y[D_m U] dm
//!    + int D_m U(t,y,m,y) . D_p H(y, D_x U(t,y,m)) dm = F(x, m)`
//!
//! together with its flat-derivative expansion and the semigroup (flow)
//! property along the measure path.

use crate::error::{MfgError, Result};
use crate::grid::{deposit, gradient, laplacian_fd, GridField, GridMeasure, TimeGrid, VectorField};
use crate::kernel::DerivativeKernel;
use crate::mfg::{solve_mfg, PicardParams};
use crate::model::Model;
use crate::wasserstein::wasserstein1;

/// `U(t0, ., m0)` by solving the MFG system on `[t0, T]` with `steps` levels.
/// `t0 == t_end` returns the terminal condition `G(., m0)` directly.
pub fn evaluate_u(
    model: &Model,
    t0: f64,
    t_end: f64,
    steps: usize,
    m0: &GridMeasure,
    params: PicardParams,
) -> Result<GridField> {
    if t0 == t_end {
        return Ok(model.terminal.evaluate(m0));
    }
    let time = TimeGrid::new(t0, t_end, steps)?;
    Ok(solve_mfg(model, time, m0, params)?.u[0].clone())
}

/// Assembled terms and residual of the master equation at one `(t, m)`.
#[derive(Debug, Clone)]
pub struct MasterResidualReport {
    pub residual: GridField,
    pub max_abs: f64,
    pub mean_abs: f64,
    pub fd_eps: f64,
    pub steps: usize,
}

/// Evaluates every term of the master PDE at `(t, m)` on the grid nodes.
/// `dU/dt` is a centered time difference with half-width `fd_eps` (must be a
/// multiple of `dt`); the measure derivatives come from the kernel.
pub fn master_residual(
    model: &Model,
    t: f64,
    t_end: f64,
    steps: usize,
    m: &GridMeasure,
    params: PicardParams,
    fd_eps: f64,
) -> Result<MasterResidualReport> {
    let grid = model.grid();
    let time = TimeGrid::new(t, t_end, steps)?;
    let dt = time.dt();
    let k_steps = (fd_eps / dt).round() as i64;
    if k_steps < 1 || (fd_eps - k_steps as f64 * dt).abs() > 1e-12 {
        return Err(MfgError::InvalidInput(format!(
            "fd_eps {fd_eps} must be a positive multiple of dt {dt}"
        )));
    }
    if steps as i64 - k_steps < 4 {
        return Err(MfgError::InvalidInput("fd_eps too close to the horizon".into()));
    }

    let base = solve_mfg(model, time, m, params)?;
    let u = &base.u[0];
    let kernel = DerivativeKernel::from_base(model, &base, params)?;

    // dU/dt at fixed m, centered, same dt on both sides
    let u_minus = evaluate_u(
        model,
        t - fd_eps,
        t_end,
        (steps as i64 + k_steps) as usize,
        m,
        params,
    )?;
    let u_plus = evaluate_u(
        model,
        t + fd_eps,
        t_end,
        (steps as i64 - k_steps) as usize,
        m,
        params,
    )?;
    let dudt = u_plus.sub(&u_minus).scaled(0.5 / fd_eps);

    let lap = laplacian_fd(u);
    let du = gradient(u);
    let force = model.running.evaluate(m);
    let vol = grid.cell_volume();
    let n = grid.len();

    // int div_y [D_m U](x, y) dm(y), one value per x node
    let lap_y = kernel.div_y_dy();
    let div_term: Vec<f64> = (0..n)
        .map(|i| {
            lap_y[i * n..(i + 1) * n]
                .iter()
                .zip(m.density())
                .map(|(v, d)| v * d)
                .sum::<f64>()
                * vol
        })
        .collect();

    // int D_m U(t, y, m, y) . D_p H(y, D_x U(t, y, m)) dm(y): x-independent
    let dy: Vec<Vec<f64>> = (0..grid.dim()).map(|ax| kernel.dy(ax)).collect();
    let transport: f64 = (0..n)
        .map(|j| {
            let p = model.hamiltonian.grad_p(grid.node(j), du.at(j));
            let mut dot = 0.0;
            for (ax, dk) in dy.iter().enumerate() {
                dot += dk[j * n + j] * p[ax];
            }
            dot * m.density()[j]
        })
        .sum::<f64>()
        * vol;

    let mut residual = GridField::zeros(grid);
    for i in 0..n {
        let x = grid.node(i);
        let h_val = model.hamiltonian.value(x, du.at(i));
        residual.values_mut()[i] = -dudt.values()[i] - lap.values()[i] + h_val - div_term[i]
            + transport
            - force.values()[i];
    }
    let max_abs = residual.sup_norm();
    let mean_abs =
        residual.values().iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    if !max_abs.is_finite() {
        return Err(MfgError::Divergence("master residual non-finite".into()));
    }
    Ok(MasterResidualReport { residual, max_abs, mean_abs, fd_eps, steps })
}

/// Second-order Taylor remainder quotient
/// `|U(m1) - U(m0) - <K(m0), m1 - m0>|_inf / d1(m0, m1)^2`.
/// Returns 0 when the measures coincide.
pub fn taylor_check(
    model: &Model,
    time: TimeGrid,
    m0: &GridMeasure,
    m1: &GridMeasure,
    params: PicardParams,
) -> Result<f64> {
    let d1 = wasserstein1(m0, m1)?;
    if d1 == 0.0 {
        return Ok(0.0);
    }
    let base = solve_mfg(model, time, m0, params)?;
    let kernel = DerivativeKernel::from_base(model, &base, params)?;
    let u1 = solve_mfg(model, time, m1, params)?.u[0].clone();
    let pairing = kernel.apply(&m1.as_field().sub(&m0.as_field()))?;
    let remainder = u1.sub(&base.u[0]).sub(&pairing).sup_norm();
    Ok(remainder / (d1 * d1))
}

/// Semigroup defect of the characteristics: solve at `(t0, m0)`, restart a
/// fresh solve at `t0 + h_step` from the intermediate density, and compare
/// the two value fields there. `h_step` must be a multiple of `dt`;
/// `steps_sub` controls the restarted discretization (defaults to the same
/// number of steps over the shorter interval, hence a finer `dt`).
pub fn flow_consistency(
    model: &Model,
    time: TimeGrid,
    m0: &GridMeasure,
    h_step: f64,
    steps_sub: Option<usize>,
    params: PicardParams,
) -> Result<f64> {
    if h_step == 0.0 {
        return Ok(0.0);
    }
    let dt = time.dt();
    let k = (h_step / dt).round() as usize;
    if k == 0 || (h_step - k as f64 * dt).abs() > 1e-12 {
        return Err(MfgError::InvalidInput(format!(
            "h_step {h_step} must be a positive multiple of dt {dt}"
        )));
    }
    if time.time(k) + 1e-12 >= time.t_end() {
        return Err(MfgError::InvalidInput("h_step reaches the horizon".into()));
    }
    let full = solve_mfg(model, time, m0, params)?;
    let t_mid = time.time(k);
    let sub_time = TimeGrid::new(t_mid, time.t_end(), steps_sub.unwrap_or(time.steps()))?;
    let restarted = solve_mfg(model, sub_time, &full.m[k], params)?;
    Ok(full.u[k].sub(&restarted.u[0]).sup_norm())
}

/// Push-forward derivative check (intrinsic derivative as a vector field):
/// compares `[U((id + h phi)#m0) - U(m0)] / h` with the kernel quadrature
/// `int d_y K(x, y) . phi(y) dm0(y)`; returns the sup mismatch.
pub fn vector_field_derivative_check(
    model: &Model,
    time: TimeGrid,
    m0: &GridMeasure,
    phi: &VectorField,
    h: f64,
    params: PicardParams,
) -> Result<f64> {
    let grid = model.grid();
    if h == 0.0 {
        return Ok(0.0);
    }
    let base = solve_mfg(model, time, m0, params)?;
    let kernel = DerivativeKernel::from_base(model, &base, params)?;
    let n = grid.len();
    let vol = grid.cell_volume();

    // (id + h phi)#m0 by semi-Lagrangian re-deposition of the cell masses
    let points: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let x = grid.node(i);
            let p = phi.at(i);
            [x[0] + h * p[0], x[1] + h * p[1]]
        })
        .collect();
    let weights: Vec<f64> = m0.density().iter().map(|d| d * vol).collect();
    let pushed = deposit(grid, &points, &weights)?;
    let fd = evaluate_u(model, time.t0(), time.t_end(), time.steps(), &pushed, params)?
        .sub(&base.u[0])
        .scaled(1.0 / h);

    // kernel quadrature int d_yK(x,y) . phi(y) dm0(y)
    let dy: Vec<Vec<f64>> = (0..grid.dim()).map(|ax| kernel.dy(ax)).collect();
    let quad = GridField::from_values(
        grid,
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let p = phi.at(j);
                        let mut dot = 0.0;
                        for (ax, dk) in dy.iter().enumerate() {
                            dot += dk[i * n + j] * p[ax];
                        }
                        dot * m0.density()[j]
                    })
                    .sum::<f64>()
                    * vol
            })
            .collect(),
    )?;
    Ok(fd.sub(&quad).sup_norm())
}

/// Finite-difference slice of the second flat derivative:
/// `[K(t0, m0 + eps mu) - K(t0, m0)] / eps` as a flattened `[x][y]` table.
/// `mu` must carry zero mass so the perturbed measure stays a probability.
pub fn second_kernel_fd(
    model: &Model,
    time: TimeGrid,
    m0: &GridMeasure,
    mu: &GridField,
    eps: f64,
    params: PicardParams,
) -> Result<Vec<f64>> {
    let grid = model.grid();
    let n = grid.len();
    if mu.integral().abs() > 1e-9 {
        return Err(MfgError::InvalidInput("second-derivative direction must have zero mass".into()));
    }
    if mu.sup_norm() == 0.0 {
        return Ok(vec![0.0; n * n]);
    }
    let k0 = DerivativeKernel::compute(model, time, m0, params)?;
    let density: Vec<f64> = m0
        .density()
        .iter()
        .zip(mu.values())
        .map(|(d, u)| d + eps * u)
        .collect();
    let m_eps = GridMeasure::from_density(grid, density)?.0;
    let k1 = DerivativeKernel::compute(model, time, &m_eps, params)?;
    Ok((0..n * n)
        .map(|idx| (k1.at(idx / n, idx % n) - k0.at(idx / n, idx % n)) / eps)
        .collect())
}
