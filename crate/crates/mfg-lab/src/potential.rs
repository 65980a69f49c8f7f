//! Potential (variational) structure: when `F` and `G` derive from potentials
//! `Fcal`, `Gcal`, the MFG equilibrium minimizes the control cost
//!
//! `J(m, a) = int int H*(x, a(t,x)) m(t,dx) dt + int Fcal(m(t)) dt + Gcal(m(T))`
//!
//! over drifts `a` steering the Fokker-Planck equation
//! `dm/dt - Lap m - div(a m) = 0`. The minimizing pair is
//! `(m, D_p H(., Du))` from the MFG system, and the value function
//! `Ucal(t0, m0)` of this control problem solves an HJB equation in the space
//! of measures whose residual is checked here.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{MfgError, Result};
use crate::grid::{
    div_upwind_flux, laplacian_fd, gradient, GridField, GridMeasure, TimeGrid, VectorField,
};
use crate::mfg::{drift_field, solve_fp_drift, solve_mfg, MfgSolution, PicardParams};
use crate::model::Model;
use crate::spectral::heat_step;

/// How far a candidate `(m, a)` pair may violate the discrete FP constraint.
pub const CONSTRAINT_TOL: f64 = 1e-8;

/// A model whose couplings derive from potentials, plus the cost machinery.
#[derive(Debug, Clone)]
pub struct PotentialProblem {
    model: Model,
}

impl PotentialProblem {
    /// Wraps a model after verifying the flat-derivative consistency
    /// `F = d Fcal / dm` (and likewise for `G`) by finite differences.
    pub fn new(model: Model) -> Result<Self> {
        let grid = model.grid();
        let m = GridMeasure::from_fn(grid, |x| {
            1.0 + 0.3 * (2.0 * std::f64::consts::PI * x[0]).sin()
        })?;
        let mu = GridField::from_fn(grid, |x| (4.0 * std::f64::consts::PI * x[0]).cos());
        let eps = 1e-5;
        for coupling in [&model.running, &model.terminal] {
            let density: Vec<f64> = m
                .density()
                .iter()
                .zip(mu.values())
                .map(|(d, u)| d + eps * u)
                .collect();
            let m_eps = GridMeasure::from_density(grid, density)?.0;
            let fd = (coupling.potential(&m_eps) - coupling.potential(&m)) / eps;
            let pairing = coupling
                .evaluate(&m)
                .values()
                .iter()
                .zip(mu.values())
                .map(|(f, u)| f * u)
                .sum::<f64>()
                * grid.cell_volume();
            if (fd - pairing).abs() > 1e-4 {
                return Err(MfgError::Constraint(format!(
                    "coupling is not the flat derivative of its potential (defect {:.3e})",
                    (fd - pairing).abs()
                )));
            }
        }
        Ok(PotentialProblem { model })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// Running potential `Fcal(m)`.
    pub fn fcal(&self, m: &GridMeasure) -> f64 {
        self.model.running.potential(m)
    }

    /// Terminal potential `Gcal(m)`.
    pub fn gcal(&self, m: &GridMeasure) -> f64 {
        self.model.terminal.potential(m)
    }

    /// Cost of an admissible pair: `m_path` has `steps+1` levels, `alpha`
    /// one drift per interval. The pair must reproduce the discrete FP
    /// stepping within `CONSTRAINT_TOL`; `H*` must be finite wherever the
    /// density is positive.
    pub fn control_cost(
        &self,
        time: TimeGrid,
        m_path: &[GridMeasure],
        alpha: &[VectorField],
    ) -> Result<f64> {
        let grid = self.model.grid();
        let steps = time.steps();
        if m_path.len() != steps + 1 || alpha.len() != steps {
            return Err(MfgError::ShapeMismatch(
                "control pair does not match the time grid".into(),
            ));
        }
        let dt = time.dt();
        // discrete FP constraint: each level reproduces the stepping scheme
        for s in 0..steps {
            let flux = div_upwind_flux(m_path[s].density(), &alpha[s])?;
            let density: Vec<f64> = m_path[s]
                .density()
                .iter()
                .zip(flux.values())
                .map(|(d, f)| d + dt * f)
                .collect();
            let diffused = heat_step(&GridField::from_values(grid, density)?, dt);
            let stepped = GridMeasure::from_density(grid, diffused.values().to_vec())?.0;
            let defect = stepped.as_field().sub(&m_path[s + 1].as_field()).sup_norm();
            if defect > CONSTRAINT_TOL {
                return Err(MfgError::Constraint(format!(
                    "FP constraint violated at step {s}: residual {defect:.3e}"
                )));
            }
        }
        let vol = grid.cell_volume();
        let mut cost = 0.0;
        for s in 0..steps {
            let mut kinetic = 0.0;
            for i in 0..grid.len() {
                let d = m_path[s].density()[i];
                if d <= 0.0 {
                    continue;
                }
                let x = grid.node(i);
                let a = alpha[s].at(i);
                let hstar = self.model.hamiltonian.legendre(x, a).ok_or_else(|| {
                    MfgError::Constraint(format!(
                        "control leaves the domain of H* at node {i} (|a| = {:.3})",
                        (a[0] * a[0] + a[1] * a[1]).sqrt()
                    ))
                })?;
                kinetic += hstar * d;
            }
            cost += dt * (kinetic * vol + self.fcal(&m_path[s]));
        }
        cost += self.gcal(&m_path[steps]);
        Ok(cost)
    }

    /// The equilibrium control `a_s = D_p H(., Du_s)` of a converged solution.
    pub fn mfg_control(&self, sol: &MfgSolution) -> Vec<VectorField> {
        sol.u[..sol.time.steps()]
            .iter()
            .map(|u| drift_field(&self.model.hamiltonian, u))
            .collect()
    }

    /// Cost of the MFG pair itself.
    pub fn mfg_cost(&self, sol: &MfgSolution) -> Result<f64> {
        self.control_cost(sol.time, &sol.m, &self.mfg_control(sol))
    }

    /// Independent value of the minimizer from the verification identity:
    /// `J = int u(t0) dm0 - int G dm_T - int int F dm dt + int Fcal dt + Gcal(m_T)`.
    pub fn duality_value(&self, sol: &MfgSolution) -> f64 {
        let grid = self.model.grid();
        let vol = grid.cell_volume();
        let steps = sol.time.steps();
        let dt = sol.time.dt();
        let pair = |f: &GridField, m: &GridMeasure| -> f64 {
            f.values()
                .iter()
                .zip(m.density())
                .map(|(a, b)| a * b)
                .sum::<f64>()
                * vol
        };
        let mut value = pair(&sol.u[0], &sol.m[0]);
        value -= pair(&self.model.terminal.evaluate(&sol.m[steps]), &sol.m[steps]);
        for s in 0..steps {
            value -= dt * pair(&self.model.running.evaluate(&sol.m[s]), &sol.m[s]);
            value += dt * self.fcal(&sol.m[s]);
        }
        value += self.gcal(&sol.m[steps]);
        value
    }

    /// Cost gaps `J(perturbed) - J(MFG)` for random smooth drift
    /// perturbations of the given amplitude; nonnegative gaps certify
    /// minimality.
    pub fn optimality_gaps(
        &self,
        sol: &MfgSolution,
        n_perturbations: usize,
        amplitude: f64,
        seed: u64,
    ) -> Result<Vec<f64>> {
        let grid = self.model.grid();
        let base_alpha = self.mfg_control(sol);
        let base_cost = self.control_cost(sol.time, &sol.m, &base_alpha)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gaps = Vec::with_capacity(n_perturbations);
        for _ in 0..n_perturbations {
            let zeta = random_smooth_field(grid, &mut rng);
            let alpha: Vec<VectorField> = base_alpha
                .iter()
                .map(|a| {
                    let comps = a
                        .comps()
                        .iter()
                        .zip(zeta.comps())
                        .map(|(c, z)| c.add(&z.scaled(amplitude)))
                        .collect();
                    VectorField::new(comps)
                })
                .collect::<Result<_>>()?;
            let (m_path, _) = solve_fp_drift(sol.time, &sol.m[0], &alpha)?;
            gaps.push(self.control_cost(sol.time, &m_path, &alpha)? - base_cost);
        }
        Ok(gaps)
    }

    /// Control value `Ucal(t0, m0)`: cost of the MFG pair on `[t0, T]`.
    pub fn value(
        &self,
        t0: f64,
        t_end: f64,
        steps: usize,
        m0: &GridMeasure,
        params: PicardParams,
    ) -> Result<f64> {
        if t0 == t_end {
            return Ok(self.gcal(m0));
        }
        let time = TimeGrid::new(t0, t_end, steps)?;
        let sol = solve_mfg(&self.model, time, m0, params)?;
        self.mfg_cost(&sol)
    }

    /// Residual of the HJB equation in the space of measures at `(t, m)`:
    /// `-dUcal/dt + int H(y, D_x U) dm - int div_y[D_x U] dm - Fcal(m)`
    /// using `D_m Ucal = D_x U` and a centered time difference of width
    /// `fd_eps` (a multiple of `dt`).
    pub fn hjb_measure_residual(
        &self,
        t: f64,
        t_end: f64,
        steps: usize,
        m: &GridMeasure,
        params: PicardParams,
        fd_eps: f64,
    ) -> Result<f64> {
        let grid = self.model.grid();
        let time = TimeGrid::new(t, t_end, steps)?;
        let dt = time.dt();
        let k = (fd_eps / dt).round() as i64;
        if k < 1 || (fd_eps - k as f64 * dt).abs() > 1e-12 {
            return Err(MfgError::InvalidInput(format!(
                "fd_eps {fd_eps} must be a positive multiple of dt {dt}"
            )));
        }
        if steps as i64 - k < 4 {
            return Err(MfgError::InvalidInput("fd_eps too close to the horizon".into()));
        }
        let sol = solve_mfg(&self.model, time, m, params)?;
        let v_minus = self.value(t - fd_eps, t_end, (steps as i64 + k) as usize, m, params)?;
        let v_plus = self.value(t + fd_eps, t_end, (steps as i64 - k) as usize, m, params)?;
        let dvdt = (v_plus - v_minus) / (2.0 * fd_eps);

        let u = &sol.u[0];
        let du = gradient(u);
        let lap = laplacian_fd(u);
        let vol = grid.cell_volume();
        let mut hamilton = 0.0;
        let mut diffusion = 0.0;
        for i in 0..grid.len() {
            let d = m.density()[i];
            hamilton += self.model.hamiltonian.value(grid.node(i), du.at(i)) * d;
            diffusion += lap.values()[i] * d;
        }
        let residual = -dvdt + hamilton * vol - diffusion * vol - self.fcal(m);
        if !residual.is_finite() {
            return Err(MfgError::Divergence("measure-HJB residual non-finite".into()));
        }
        Ok(residual.abs())
    }
}

/// Random smooth unit-bounded vector field: a few low-frequency harmonics
/// per axis, normalized to sup norm 1.
pub fn random_smooth_field(grid: crate::grid::Grid, rng: &mut ChaCha8Rng) -> VectorField {
    let tau = 2.0 * std::f64::consts::PI;
    let comps = (0..grid.dim())
        .map(|_| {
            let coeffs: Vec<(f64, f64, f64)> = (1..=3)
                .map(|k| (k as f64, rng.gen_range(-1.0..1.0), rng.gen_range(0.0..tau)))
                .collect();
            let mut f = GridField::from_fn(grid, |x| {
                coeffs
                    .iter()
                    .map(|(k, a, phase)| a * (tau * k * (x[0] + x[1]) + phase).cos())
                    .sum()
            });
            let sup = f.sup_norm();
            if sup > 0.0 {
                for v in f.values_mut() {
                    *v /= sup;
                }
            }
            f
        })
        .collect();
    VectorField::new(comps).expect("one component per axis")
}
