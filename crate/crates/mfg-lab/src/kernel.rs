//! Measure-derivative kernel `K(t0, x, m0, y)`: the flat derivative of the
//! value of the MFG system with respect to its initial measure, assembled
//! column by column from linearized solves with Dirac initial perturbations,
//! then shifted so that `<K(x,.), m0> = 0` for every `x`.

use rayon::prelude::*;

use crate::error::{MfgError, Result};
use crate::grid::{Grid, GridField, GridMeasure, TimeGrid};
use crate::mfg::{solve_linearized, solve_mfg, MfgSolution, PicardParams};
use crate::model::Model;

#[derive(Debug, Clone)]
pub struct DerivativeKernel {
    grid: Grid,
    t0: f64,
    m0: GridMeasure,
    /// Row-major `[x-node][y-node]`.
    k: Vec<f64>,
}

impl DerivativeKernel {
    /// Solves the MFG at `(t0, m0)` and differentiates it: column `j` is
    /// `v(t0, .)` from the linearized system with `mu0` the grid Dirac at
    /// node `j`, followed by the per-`x` normalization shift.
    pub fn compute(
        model: &Model,
        time: TimeGrid,
        m0: &GridMeasure,
        params: PicardParams,
    ) -> Result<Self> {
        let base = solve_mfg(model, time, m0, params)?;
        Self::from_base(model, &base, params)
    }

    /// Same, reusing an already-converged base solution.
    pub fn from_base(model: &Model, base: &MfgSolution, params: PicardParams) -> Result<Self> {
        let grid = model.grid();
        let n = grid.len();
        let columns: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|j| -> Result<Vec<f64>> {
                let mu0 = GridMeasure::dirac(grid, j).as_field();
                let lin = solve_linearized(model, base, &mu0, params)?;
                Ok(lin.v[0].values().to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        let mut k = vec![0.0; n * n];
        for (j, col) in columns.iter().enumerate() {
            for i in 0..n {
                k[i * n + j] = col[i];
            }
        }
        // enforce <K(x,.), m0> = 0 row by row
        let vol = grid.cell_volume();
        for i in 0..n {
            let row = &mut k[i * n..(i + 1) * n];
            let mean: f64 =
                row.iter().zip(base.m[0].density()).map(|(v, d)| v * d).sum::<f64>() * vol;
            for v in row.iter_mut() {
                *v -= mean;
            }
        }
        if !k.iter().all(|v| v.is_finite()) {
            return Err(MfgError::Divergence("kernel has non-finite entries".into()));
        }
        Ok(DerivativeKernel { grid, t0: base.time.t0(), m0: base.m[0].clone(), k })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn base_measure(&self) -> &GridMeasure {
        &self.m0
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.k[x * self.grid.len() + y]
    }

    pub fn sup_norm(&self) -> f64 {
        self.k.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    /// Largest violation of `<K(x,.), m0> = 0` over all rows.
    pub fn normalization_defect(&self) -> f64 {
        let n = self.grid.len();
        let vol = self.grid.cell_volume();
        (0..n)
            .map(|i| {
                self.k[i * n..(i + 1) * n]
                    .iter()
                    .zip(self.m0.density())
                    .map(|(v, d)| v * d)
                    .sum::<f64>()
                    * vol
            })
            .fold(0.0, |a: f64, v: f64| a.max(v.abs()))
    }

    /// Pairing `x -> <K(x,.), mu>` against a signed density.
    pub fn apply(&self, mu: &GridField) -> Result<GridField> {
        if mu.grid() != self.grid {
            return Err(MfgError::ShapeMismatch("kernel/perturbation grids differ".into()));
        }
        let n = self.grid.len();
        let vol = self.grid.cell_volume();
        let values = (0..n)
            .map(|i| {
                self.k[i * n..(i + 1) * n]
                    .iter()
                    .zip(mu.values())
                    .map(|(v, d)| v * d)
                    .sum::<f64>()
                    * vol
            })
            .collect();
        GridField::from_values(self.grid, values)
    }

    /// Central difference in the `y` slot along `axis`:
    /// the intrinsic derivative `D_m U(t0, x, m0, y)`.
    pub fn dy(&self, axis: usize) -> Vec<f64> {
        let n = self.grid.len();
        let inv2h = 0.5 / self.grid.spacing();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let jp = self.grid.shifted(j, axis, 1);
                let jm = self.grid.shifted(j, axis, -1);
                out[i * n + j] = (self.at(i, jp) - self.at(i, jm)) * inv2h;
            }
        }
        out
    }

    /// `y`-Laplacian of the kernel: `div_y [D_m U](t0, x, m0, y)`.
    pub fn div_y_dy(&self) -> Vec<f64> {
        let n = self.grid.len();
        let inv_h2 = 1.0 / (self.grid.spacing() * self.grid.spacing());
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for axis in 0..self.grid.dim() {
                    let jp = self.grid.shifted(j, axis, 1);
                    let jm = self.grid.shifted(j, axis, -1);
                    acc += (self.at(i, jp) + self.at(i, jm) - 2.0 * self.at(i, j)) * inv_h2;
                }
                out[i * n + j] = acc;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TAU: f64 = 2.0 * std::f64::consts::PI;

    fn bump(grid: Grid) -> GridMeasure {
        GridMeasure::from_fn(grid, |x| 1.0 + 0.5 * (TAU * x[0]).cos()).unwrap()
    }

    #[test]
    fn trivial_model_kernel_vanishes() {
        let grid = Grid::new(1, 16).unwrap();
        let model = Model::trivial(grid).unwrap();
        let time = TimeGrid::new(0.0, 0.25, 16).unwrap();
        let k =
            DerivativeKernel::compute(&model, time, &bump(grid), PicardParams::default()).unwrap();
        assert!(k.sup_norm() < 1e-12, "trivial kernel sup {}", k.sup_norm());
    }

    #[test]
    fn normalization_holds_by_construction() {
        let grid = Grid::new(1, 24).unwrap();
        let model = Model::default_monotone(grid, 0.1, 0.1, 0.15).unwrap();
        let time = TimeGrid::new(0.0, 0.4, 32).unwrap();
        let k =
            DerivativeKernel::compute(&model, time, &bump(grid), PicardParams::default()).unwrap();
        assert!(k.normalization_defect() < 1e-12);
    }

    #[test]
    fn kernel_pairing_matches_finite_differences_of_the_value() {
        // [U(t0, m0 + eps (m1 - m0)) - U(t0, m0)] / eps vs <K, m1 - m0>
        let grid = Grid::new(1, 32).unwrap();
        let model = Model::default_monotone(grid, 0.1, 0.1, 0.15).unwrap();
        let time = TimeGrid::new(0.0, 0.4, 32).unwrap();
        let m0 = bump(grid);
        let m1 = GridMeasure::from_fn(grid, |x| 1.0 + 0.5 * (TAU * (x[0] + 0.37)).sin()).unwrap();
        let p = PicardParams::with_tol(1e-11);
        let base = solve_mfg(&model, time, &m0, p).unwrap();
        let kernel = DerivativeKernel::from_base(&model, &base, p).unwrap();
        let dir = m1.as_field().sub(&m0.as_field());
        let pairing = kernel.apply(&dir).unwrap();
        let err = |eps: f64| -> f64 {
            let m_eps = m0.mix(&m1, eps);
            let sol = solve_mfg(&model, time, &m_eps, p).unwrap();
            sol.u[0].sub(&base.u[0]).scaled(1.0 / eps).sub(&pairing).sup_norm()
        };
        let e1 = err(0.2);
        let e2 = err(0.1);
        assert!(e1 < 0.05, "kernel FD defect {e1}");
        // O(eps) remainder: halving eps halves the defect within factor 3
        assert!(e2 < e1 / 2.0 * 3.0 && e2 > e1 / 2.0 / 3.0, "errors {e1} {e2}");
    }

    #[test]
    fn kernel_is_stable_under_grid_refinement() {
        // K at M and 2M agree on common nodes within O(h)
        let time = TimeGrid::new(0.0, 0.4, 32).unwrap();
        let p = PicardParams::default();
        let kernels: Vec<DerivativeKernel> = [16usize, 32]
            .iter()
            .map(|m| {
                let grid = Grid::new(1, *m).unwrap();
                let model = Model::default_monotone(grid, 0.1, 0.1, 0.15).unwrap();
                DerivativeKernel::compute(&model, time, &bump(grid), p).unwrap()
            })
            .collect();
        let coarse = &kernels[0];
        let fine = &kernels[1];
        let mut worst = 0.0f64;
        for i in 0..coarse.grid().len() {
            for j in 0..coarse.grid().len() {
                worst = worst.max((coarse.at(i, j) - fine.at(2 * i, 2 * j)).abs());
            }
        }
        let h = coarse.grid().spacing();
        let scale = fine.sup_norm().max(1.0);
        assert!(worst <= 5.0 * scale * h, "kernel refinement drift {worst}, scale {scale}");
    }

    #[test]
    fn kernel_y_gradient_is_lipschitz_in_the_base_measure() {
        use crate::wasserstein::wasserstein1;
        let grid = Grid::new(1, 24).unwrap();
        let model = Model::default_monotone(grid, 0.1, 0.1, 0.15).unwrap();
        let time = TimeGrid::new(0.0, 0.4, 32).unwrap();
        let p = PicardParams::default();
        let measures: Vec<GridMeasure> = (0..4)
            .map(|q| {
                GridMeasure::from_fn(grid, |x| {
                    1.0 + 0.4 * (TAU * (x[0] + 0.13 * q as f64)).cos()
                })
                .unwrap()
            })
            .collect();
        let grads: Vec<Vec<f64>> = measures
            .iter()
            .map(|m| DerivativeKernel::compute(&model, time, m, p).unwrap().dy(0))
            .collect();
        let mut quotients = Vec::new();
        for a in 0..measures.len() {
            for b in (a + 1)..measures.len() {
                let d1 = wasserstein1(&measures[a], &measures[b]).unwrap();
                let sup = grads[a]
                    .iter()
                    .zip(&grads[b])
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max);
                quotients.push(sup / d1);
            }
        }
        let worst = quotients.iter().fold(0.0f64, |a, v| a.max(*v));
        assert!(worst < 50.0, "D_mU measure-Lipschitz quotient {worst}");
    }
}
