//! The forward-backward MFG system and its linearization.
//!
//! Backward HJB `-du/dt - Lap u + H(x,Du) = F(x,m(t))`, `u(T) = G(x,m(T))`,
//! coupled to the forward Fokker-Planck equation
//! `dm/dt - Lap m - div(m D_p H(x,Du)) = 0`, `m(t0) = m0`.
//!
//! Time stepping splits exact spectral diffusion from an explicit upwind
//! transport / semi-implicit Hamiltonian step; the coupling is resolved by a
//! damped Picard iteration on the density path.

use crate::error::{MfgError, Result};
use crate::grid::{
    div_central, div_upwind_flux, gradient, GridField, GridMeasure, TimeGrid, VectorField,
};
use crate::model::{Hamiltonian, Model};
use crate::spectral::heat_step;

/// Damped fixed-point controls shared by all coupled solves.
#[derive(Debug, Clone, Copy)]
pub struct PicardParams {
    /// Damping weight on the fresh iterate; `1.0` is undamped.
    pub theta: f64,
    /// Convergence threshold on the sup-norm path gap.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for PicardParams {
    fn default() -> Self {
        PicardParams { theta: 0.5, tol: 1e-9, max_sweeps: 500 }
    }
}

impl PicardParams {
    pub fn with_tol(tol: f64) -> Self {
        PicardParams { tol, ..Default::default() }
    }
}

/// Converged discrete MFG equilibrium: value and density at every time level.
#[derive(Debug, Clone)]
pub struct MfgSolution {
    pub time: TimeGrid,
    /// `steps + 1` value fields, `u[s]` at `t0 + s dt`.
    pub u: Vec<GridField>,
    /// `steps + 1` densities.
    pub m: Vec<GridMeasure>,
    pub sweeps: usize,
    pub gap_history: Vec<f64>,
    /// Largest mass clipped by any single renormalization during the final
    /// forward pass; a positivity diagnostic.
    pub max_clipped_mass: f64,
}

impl MfgSolution {
    /// Equilibrium feedback drift `D_p H(x, Du(s,x))` at time level `s`.
    pub fn drift(&self, model: &Model, s: usize) -> VectorField {
        drift_field(&model.hamiltonian, &self.u[s])
    }
}

/// `x -> D_p H(x, Du(x))` as a vector field.
pub fn drift_field(h: &Hamiltonian, u: &GridField) -> VectorField {
    let g = u.grid();
    let du = gradient(u);
    let mut comps = vec![GridField::zeros(g); g.dim()];
    for i in 0..g.len() {
        let p = du.at(i);
        let d = h.grad_p(g.node(i), p);
        for (ax, c) in comps.iter_mut().enumerate() {
            c.values_mut()[i] = d[ax];
        }
    }
    VectorField::new(comps).expect("drift components match grid dim")
}

fn check_cfl(time: TimeGrid, grid_h: f64, lip: f64) -> Result<()> {
    let ratio = time.dt() * lip / grid_h;
    if ratio > 1.0 {
        return Err(MfgError::CflViolation { ratio });
    }
    Ok(())
}

/// One backward HJB sweep along a frozen density path.
/// `m_path` must hold `steps + 1` measures; the terminal datum is
/// `G(., m_path[S])`.
pub fn solve_hjb_path(model: &Model, time: TimeGrid, m_path: &[GridMeasure]) -> Result<Vec<GridField>> {
    if m_path.len() != time.steps() + 1 {
        return Err(MfgError::ShapeMismatch(format!(
            "density path has {} levels, time grid needs {}",
            m_path.len(),
            time.steps() + 1
        )));
    }
    let terminal = model.terminal.evaluate(&m_path[time.steps()]);
    let forces: Vec<GridField> = m_path.iter().map(|m| model.running.evaluate(m)).collect();
    hjb_sweep(&model.hamiltonian, time, &forces, terminal)
}

/// Backward HJB sweep with an explicit terminal field (used by restriction
/// and consistency checks).
pub fn solve_hjb_path_with_terminal(
    model: &Model,
    time: TimeGrid,
    m_path: &[GridMeasure],
    terminal: GridField,
) -> Result<Vec<GridField>> {
    let forces: Vec<GridField> = m_path.iter().map(|m| model.running.evaluate(m)).collect();
    hjb_sweep(&model.hamiltonian, time, &forces, terminal)
}

/// Core backward sweep for `-du/dt - Lap u + H(x,Du) = force(t,x)`:
/// `u[s] = heat_step(u[s+1] + dt (force[s+1] - H(x, Du[s+1])), dt)` with the
/// gradient taken from the previous time level (semi-implicit).
pub fn hjb_sweep(
    h: &Hamiltonian,
    time: TimeGrid,
    forces: &[GridField],
    terminal: GridField,
) -> Result<Vec<GridField>> {
    let grid = terminal.grid();
    let dt = time.dt();
    let steps = time.steps();
    if forces.len() != steps + 1 {
        return Err(MfgError::ShapeMismatch(format!(
            "force path has {} levels, time grid needs {}",
            forces.len(),
            steps + 1
        )));
    }
    let mut u = vec![GridField::zeros(grid); steps + 1];
    u[steps] = terminal;
    for s in (0..steps).rev() {
        let du = gradient(&u[s + 1]);
        let mut pre = u[s + 1].clone();
        for i in 0..grid.len() {
            let x = grid.node(i);
            pre.values_mut()[i] += dt * (forces[s + 1].values()[i] - h.value(x, du.at(i)));
        }
        u[s] = heat_step(&pre, dt);
        if u[s].sup_norm() > 1e6 {
            return Err(MfgError::Divergence(format!(
                "value function blew up at time level {s} (sup {:.3e})",
                u[s].sup_norm()
            )));
        }
    }
    Ok(u)
}

/// One forward Fokker-Planck sweep along a frozen value path.
/// Returns the density path and the largest clipped mass.
pub fn solve_fp_path(
    model: &Model,
    time: TimeGrid,
    m0: &GridMeasure,
    u_path: &[GridField],
) -> Result<(Vec<GridMeasure>, f64)> {
    check_cfl(time, model.grid().spacing(), model.hamiltonian.lipschitz_bound())?;
    let drifts: Vec<VectorField> = u_path[..time.steps()]
        .iter()
        .map(|u| drift_field(&model.hamiltonian, u))
        .collect();
    solve_fp_drift(time, m0, &drifts)
}

/// Forward Fokker-Planck sweep along an explicit drift path (`steps` vector
/// fields, one per interval): upwind transport then exact diffusion.
pub fn solve_fp_drift(
    time: TimeGrid,
    m0: &GridMeasure,
    drifts: &[VectorField],
) -> Result<(Vec<GridMeasure>, f64)> {
    let grid = m0.grid();
    let steps = time.steps();
    if drifts.len() != steps {
        return Err(MfgError::ShapeMismatch(format!(
            "drift path has {} levels, time grid needs {steps}",
            drifts.len()
        )));
    }
    let max_b = drifts.iter().map(VectorField::max_norm).fold(0.0, f64::max);
    check_cfl(time, grid.spacing(), max_b)?;
    let dt = time.dt();
    let mut m = Vec::with_capacity(steps + 1);
    m.push(m0.clone());
    let mut worst_clip = 0.0f64;
    for s in 0..steps {
        let b = &drifts[s];
        let flux = div_upwind_flux(m[s].density(), b)?;
        let mut density: Vec<f64> = m[s]
            .density()
            .iter()
            .zip(flux.values())
            .map(|(d, f)| d + dt * f)
            .collect();
        let diffused = heat_step(&GridField::from_values(grid, std::mem::take(&mut density))?, dt);
        let (next, clipped) = GridMeasure::from_density(grid, diffused.values().to_vec())?;
        worst_clip = worst_clip.max(clipped);
        m.push(next);
    }
    Ok((m, worst_clip))
}

fn path_gap(a: &[GridMeasure], b: &[GridMeasure]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.as_field().sub(&y.as_field()).sup_norm())
        .fold(0.0, f64::max)
}

/// Solves the coupled MFG system by damped Picard iteration on the density
/// path, starting from the drift-free heat flow of `m0`.
pub fn solve_mfg(
    model: &Model,
    time: TimeGrid,
    m0: &GridMeasure,
    params: PicardParams,
) -> Result<MfgSolution> {
    let grid = model.grid();
    if grid != m0.grid() {
        return Err(MfgError::ShapeMismatch("initial measure grid differs from model grid".into()));
    }
    check_cfl(time, grid.spacing(), model.hamiltonian.lipschitz_bound())?;
    let dt = time.dt();
    let steps = time.steps();

    // initial guess: pure diffusion of m0 (exact for the decoupled system)
    let mut m_path = Vec::with_capacity(steps + 1);
    m_path.push(m0.clone());
    for s in 0..steps {
        let diffused = heat_step(&m_path[s].as_field(), dt);
        m_path.push(GridMeasure::from_density(grid, diffused.values().to_vec())?.0);
    }

    let mut gap_history = Vec::new();
    for sweep in 1..=params.max_sweeps {
        let u_path = solve_hjb_path(model, time, &m_path)?;
        let (m_new, _) = solve_fp_path(model, time, m0, &u_path)?;
        let gap = path_gap(&m_new, &m_path);
        gap_history.push(gap);
        if gap < params.tol {
            // recompute the final forward pass so (u, m) is self-consistent
            let u_final = solve_hjb_path(model, time, &m_new)?;
            let (m_final, clipped) = solve_fp_path(model, time, m0, &u_final)?;
            return Ok(MfgSolution {
                time,
                u: u_final,
                m: m_final,
                sweeps: sweep,
                gap_history,
                max_clipped_mass: clipped,
            });
        }
        if !gap.is_finite() {
            return Err(MfgError::Divergence(format!("picard gap became non-finite at sweep {sweep}")));
        }
        for (old, new) in m_path.iter_mut().zip(m_new) {
            *old = old.mix(&new, params.theta);
        }
    }
    let gap = *gap_history.last().unwrap_or(&f64::INFINITY);
    Err(MfgError::NonConvergence { iterations: params.max_sweeps, gap, gap_history })
}

/// Solution of the linearized MFG system around a base equilibrium.
#[derive(Debug, Clone)]
pub struct LinearizedSolution {
    pub v: Vec<GridField>,
    /// Signed zero-mass perturbation densities.
    pub mu: Vec<GridField>,
    pub sweeps: usize,
}

/// Solves the system obtained by differentiating the MFG system along a
/// perturbation of the initial measure:
///
/// `-dv/dt - Lap v + D_p H(x,Du).Dv = dF/dm(x,m(t))(mu(t))`
/// `dmu/dt - Lap mu - div(mu D_p H(x,Du)) - div(m D2_pp H(x,Du) Dv) = 0`
///
/// with `v(T) = dG/dm(x,m(T))(mu(T))` and `mu(t0) = mu0` (zero total mass).
pub fn solve_linearized(
    model: &Model,
    base: &MfgSolution,
    mu0: &GridField,
    params: PicardParams,
) -> Result<LinearizedSolution> {
    let grid = model.grid();
    if mu0.grid() != grid {
        return Err(MfgError::ShapeMismatch("perturbation grid differs from model grid".into()));
    }
    let time = base.time;
    let dt = time.dt();
    let steps = time.steps();
    let drifts: Vec<VectorField> =
        base.u.iter().map(|u| drift_field(&model.hamiltonian, u)).collect();

    // forward sweep of mu given a frozen v-path (empty slice means Dv = 0)
    let forward = |v_path: &[GridField]| -> Result<Vec<GridField>> {
        let mut mu = Vec::with_capacity(steps + 1);
        mu.push(mu0.clone());
        for s in 0..steps {
            let transport = div_upwind_flux(mu[s].values(), &drifts[s])?;
            let mut stepped = mu[s].clone();
            stepped.axpy(dt, &transport);
            if !v_path.is_empty() {
                let dv = gradient(&v_path[s]);
                let mut comps = vec![GridField::zeros(grid); grid.dim()];
                for i in 0..grid.len() {
                    let hess = model
                        .hamiltonian
                        .hess_p(grid.node(i), gradient_at(&base.u[s], i));
                    let dvi = dv.at(i);
                    let mval = base.m[s].density()[i];
                    for (ax, c) in comps.iter_mut().enumerate() {
                        c.values_mut()[i] = mval * (hess[ax][0] * dvi[0] + hess[ax][1] * dvi[1]);
                    }
                }
                let extra = div_central(&VectorField::new(comps)?);
                stepped.axpy(dt, &extra);
            }
            mu.push(heat_step(&stepped, dt));
        }
        Ok(mu)
    };

    // backward sweep of v given a frozen mu-path; mirrors hjb_sweep so that
    // (v, mu) is the exact derivative of the discrete forward-backward map
    let backward = |mu_path: &[GridField]| -> Result<Vec<GridField>> {
        let mut v = vec![GridField::zeros(grid); steps + 1];
        v[steps] = model.terminal.flat_derivative_apply(&base.m[steps], &mu_path[steps]);
        for s in (0..steps).rev() {
            let dv = gradient(&v[s + 1]);
            let rhs = model.running.flat_derivative_apply(&base.m[s + 1], &mu_path[s + 1]);
            let mut pre = v[s + 1].clone();
            for i in 0..grid.len() {
                let b = drifts[s + 1].at(i);
                let dvi = dv.at(i);
                pre.values_mut()[i] +=
                    dt * (rhs.values()[i] - (b[0] * dvi[0] + b[1] * dvi[1]));
            }
            v[s] = heat_step(&pre, dt);
        }
        Ok(v)
    };

    let mut mu_path = forward(&[])?;
    for sweep in 1..=params.max_sweeps {
        let v_path = backward(&mu_path)?;
        let mu_new = forward(&v_path)?;
        let gap = mu_new
            .iter()
            .zip(&mu_path)
            .map(|(a, b)| a.sub(b).sup_norm())
            .fold(0.0, f64::max);
        if gap < params.tol {
            return Ok(LinearizedSolution { v: v_path, mu: mu_new, sweeps: sweep });
        }
        if !gap.is_finite() {
            return Err(MfgError::Divergence(format!(
                "linearized picard gap became non-finite at sweep {sweep}"
            )));
        }
        for (old, new) in mu_path.iter_mut().zip(mu_new) {
            *old = old.scaled(1.0 - params.theta).add(&new.scaled(params.theta));
        }
    }
    Err(MfgError::NonConvergence {
        iterations: params.max_sweeps,
        gap: f64::NAN,
        gap_history: Vec::new(),
    })
}

fn gradient_at(u: &GridField, i: usize) -> [f64; 2] {
    let g = u.grid();
    let inv2h = 0.5 / g.spacing();
    let mut p = [0.0, 0.0];
    for ax in 0..g.dim() {
        p[ax] = (u.values()[g.shifted(i, ax, 1)] - u.values()[g.shifted(i, ax, -1)]) * inv2h;
    }
    p
}
