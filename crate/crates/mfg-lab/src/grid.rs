//! Periodic grids on the unit torus and the fields/measures living on them.
//!
//! A `Grid` covers `[0,1)^dim` (dim 1 or 2) with `m` nodes per axis and
//! spacing `h = 1/m`. Node `k` sits at coordinate `k*h`; all indexing wraps
//! modulo `m`, so fields are periodic by construction with no ghost layer.

use crate::error::{MfgError, Result};

pub const MIN_POINTS_PER_AXIS: usize = 8;

/// Uniform discretization of the torus `T^dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    dim: usize,
    m: usize,
}

impl Grid {
    pub fn new(dim: usize, m: usize) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(MfgError::InvalidInput(format!("grid dim must be 1 or 2, got {dim}")));
        }
        if m < MIN_POINTS_PER_AXIS {
            return Err(MfgError::InvalidInput(format!(
                "need at least {MIN_POINTS_PER_AXIS} points per axis, got {m}"
            )));
        }
        Ok(Grid { dim, m })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points_per_axis(&self) -> usize {
        self.m
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.m as f64
    }

    /// Cell volume `h^dim`.
    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    pub fn len(&self) -> usize {
        self.m.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn wrap(&self, i: isize) -> usize {
        i.rem_euclid(self.m as isize) as usize
    }

    /// Linear index from per-axis indices (axis 0 major).
    #[inline]
    pub fn index(&self, ix: &[usize]) -> usize {
        debug_assert_eq!(ix.len(), self.dim);
        match self.dim {
            1 => ix[0] % self.m,
            _ => (ix[0] % self.m) * self.m + ix[1] % self.m,
        }
    }

    /// Per-axis indices from a linear index.
    #[inline]
    pub fn unindex(&self, idx: usize) -> [usize; 2] {
        match self.dim {
            1 => [idx, 0],
            _ => [idx / self.m, idx % self.m],
        }
    }

    /// Neighbour of `idx` shifted by `offset` nodes along `axis`, wrapped.
    #[inline]
    pub fn shifted(&self, idx: usize, axis: usize, offset: isize) -> usize {
        let mut ix = self.unindex(idx);
        ix[axis] = self.wrap(ix[axis] as isize + offset);
        self.index(&ix[..self.dim])
    }

    /// Coordinate of node `idx` in `[0,1)^dim`.
    #[inline]
    pub fn node(&self, idx: usize) -> [f64; 2] {
        let h = self.spacing();
        let ix = self.unindex(idx);
        [ix[0] as f64 * h, ix[1] as f64 * h]
    }

    /// Shortest-arc distance between two points of the torus.
    pub fn torus_distance(&self, a: [f64; 2], b: [f64; 2]) -> f64 {
        let mut s = 0.0;
        for ax in 0..self.dim {
            let d = (a[ax] - b[ax]).rem_euclid(1.0);
            let d = d.min(1.0 - d);
            s += d * d;
        }
        s.sqrt()
    }
}

/// Wrap a point of `R^dim` onto `[0,1)^dim`.
pub fn wrap_point(x: [f64; 2]) -> [f64; 2] {
    [x[0].rem_euclid(1.0), x[1].rem_euclid(1.0)]
}

/// Periodic scalar field on a `Grid`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    grid: Grid,
    values: Vec<f64>,
}

impl GridField {
    pub fn zeros(grid: Grid) -> Self {
        GridField { grid, values: vec![0.0; grid.len()] }
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        GridField { grid, values: vec![c; grid.len()] }
    }

    pub fn from_values(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(MfgError::ShapeMismatch(format!(
                "field has {} values, grid needs {}",
                values.len(),
                grid.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(MfgError::InvalidInput("field values must be finite".into()));
        }
        Ok(GridField { grid, values })
    }

    /// Sample a function at the grid nodes.
    pub fn from_fn(grid: Grid, f: impl Fn([f64; 2]) -> f64) -> Self {
        let values = (0..grid.len()).map(|i| f(grid.node(i))).collect();
        GridField { grid, values }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    /// Grid mean `(1/M^dim) sum f_k`.
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Quadrature `sum f_k h^dim`.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    pub fn scaled(&self, c: f64) -> Self {
        GridField { grid: self.grid, values: self.values.iter().map(|v| c * v).collect() }
    }

    pub fn axpy(&mut self, a: f64, other: &GridField) {
        debug_assert_eq!(self.grid, other.grid);
        for (v, w) in self.values.iter_mut().zip(&other.values) {
            *v += a * w;
        }
    }

    pub fn add(&self, other: &GridField) -> Self {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    pub fn sub(&self, other: &GridField) -> Self {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    /// Multilinear periodic interpolation; exact at the nodes.
    pub fn interp(&self, x: [f64; 2]) -> f64 {
        let g = self.grid;
        let m = g.points_per_axis() as f64;
        match g.dim() {
            1 => {
                let s = x[0].rem_euclid(1.0) * m;
                let i0 = s.floor() as isize;
                let w = s - i0 as f64;
                let a = self.values[g.wrap(i0)];
                let b = self.values[g.wrap(i0 + 1)];
                a * (1.0 - w) + b * w
            }
            _ => {
                let s0 = x[0].rem_euclid(1.0) * m;
                let s1 = x[1].rem_euclid(1.0) * m;
                let i0 = s0.floor() as isize;
                let i1 = s1.floor() as isize;
                let w0 = s0 - i0 as f64;
                let w1 = s1 - i1 as f64;
                let (a0, a1) = (g.wrap(i0), g.wrap(i0 + 1));
                let (b0, b1) = (g.wrap(i1), g.wrap(i1 + 1));
                let mm = g.points_per_axis();
                let v00 = self.values[a0 * mm + b0];
                let v01 = self.values[a0 * mm + b1];
                let v10 = self.values[a1 * mm + b0];
                let v11 = self.values[a1 * mm + b1];
                v00 * (1.0 - w0) * (1.0 - w1)
                    + v01 * (1.0 - w0) * w1
                    + v10 * w0 * (1.0 - w1)
                    + v11 * w0 * w1
            }
        }
    }
}

/// One `GridField` per axis.
#[derive(Debug, Clone)]
pub struct VectorField {
    comps: Vec<GridField>,
}

impl VectorField {
    pub fn new(comps: Vec<GridField>) -> Result<Self> {
        if comps.is_empty() || comps.len() != comps[0].grid().dim() {
            return Err(MfgError::ShapeMismatch("vector field needs one component per axis".into()));
        }
        Ok(VectorField { comps })
    }

    pub fn zeros(grid: Grid) -> Self {
        VectorField { comps: (0..grid.dim()).map(|_| GridField::zeros(grid)).collect() }
    }

    pub fn grid(&self) -> Grid {
        self.comps[0].grid()
    }

    pub fn comp(&self, axis: usize) -> &GridField {
        &self.comps[axis]
    }

    pub fn comps(&self) -> &[GridField] {
        &self.comps
    }

    pub fn at(&self, idx: usize) -> [f64; 2] {
        let mut p = [0.0, 0.0];
        for (ax, c) in self.comps.iter().enumerate() {
            p[ax] = c.values()[idx];
        }
        p
    }

    pub fn interp(&self, x: [f64; 2]) -> [f64; 2] {
        let mut p = [0.0, 0.0];
        for (ax, c) in self.comps.iter().enumerate() {
            p[ax] = c.interp(x);
        }
        p
    }

    pub fn max_norm(&self) -> f64 {
        (0..self.grid().len()).fold(0.0f64, |acc, i| {
            let p = self.at(i);
            acc.max((p[0] * p[0] + p[1] * p[1]).sqrt())
        })
    }
}

/// Probability density on a `Grid`: nonnegative, unit mass under `h^dim` quadrature.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMeasure {
    grid: Grid,
    density: Vec<f64>,
}

pub const MASS_TOL: f64 = 1e-12;

impl GridMeasure {
    pub fn uniform(grid: Grid) -> Self {
        GridMeasure { grid, density: vec![1.0; grid.len()] }
    }

    /// Builds a measure from a raw density, clipping negatives and
    /// renormalizing to unit mass. Returns the clipped mass as a diagnostic.
    pub fn from_density(grid: Grid, density: Vec<f64>) -> Result<(Self, f64)> {
        if density.len() != grid.len() {
            return Err(MfgError::ShapeMismatch(format!(
                "density has {} values, grid needs {}",
                density.len(),
                grid.len()
            )));
        }
        if !density.iter().all(|v| v.is_finite()) {
            return Err(MfgError::InvalidInput("density must be finite".into()));
        }
        let mut meas = GridMeasure { grid, density };
        let clipped = meas.renormalize()?;
        Ok((meas, clipped))
    }

    /// Unnormalized sample of a nonnegative function, then renormalized.
    pub fn from_fn(grid: Grid, f: impl Fn([f64; 2]) -> f64) -> Result<Self> {
        let density: Vec<f64> = (0..grid.len()).map(|i| f(grid.node(i))).collect();
        Ok(Self::from_density(grid, density)?.0)
    }

    /// Grid Dirac: unit mass concentrated on one node (height `1/h^dim`).
    pub fn dirac(grid: Grid, idx: usize) -> Self {
        let mut density = vec![0.0; grid.len()];
        density[idx] = 1.0 / grid.cell_volume();
        GridMeasure { grid, density }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn total_mass(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.grid.cell_volume()
    }

    pub fn as_field(&self) -> GridField {
        GridField { grid: self.grid, values: self.density.clone() }
    }

    /// Clips negative densities at 0 and rescales to unit mass.
    /// Returns the total clipped (negative) mass.
    pub fn renormalize(&mut self) -> Result<f64> {
        let vol = self.grid.cell_volume();
        let mut clipped = 0.0;
        for v in &mut self.density {
            if *v < 0.0 {
                clipped += -*v * vol;
                *v = 0.0;
            }
        }
        let mass = self.total_mass();
        if mass <= 0.0 {
            return Err(MfgError::InvalidInput("measure has no positive mass".into()));
        }
        let inv = 1.0 / mass;
        for v in &mut self.density {
            *v *= inv;
        }
        Ok(clipped)
    }

    /// Linear combination `(1-t)*self + t*other`, both probability measures.
    /// Inverse-CDF sample of a node index from a uniform draw `u` in `[0,1)`;
    /// deterministic given `u`, for reproducible Monte-Carlo.
    pub fn sample_node(&self, u: f64) -> usize {
        let vol = self.grid.cell_volume();
        let target = u.clamp(0.0, 1.0) * self.total_mass();
        let mut acc = 0.0;
        for (i, d) in self.density.iter().enumerate() {
            acc += d * vol;
            if acc >= target {
                return i;
            }
        }
        self.density.len() - 1
    }

    pub fn mix(&self, other: &GridMeasure, t: f64) -> GridMeasure {
        let density = self
            .density
            .iter()
            .zip(&other.density)
            .map(|(a, b)| (1.0 - t) * a + t * b)
            .collect();
        GridMeasure { grid: self.grid, density }
    }

    /// Center of mass on the circle (dim 1), computed via the angular mean.
    pub fn circular_mean(&self) -> f64 {
        let vol = self.grid.cell_volume();
        let (mut s, mut c) = (0.0, 0.0);
        for (i, d) in self.density.iter().enumerate() {
            let x = self.grid.node(i)[0];
            s += d * vol * (2.0 * std::f64::consts::PI * x).sin();
            c += d * vol * (2.0 * std::f64::consts::PI * x).cos();
        }
        (s.atan2(c) / (2.0 * std::f64::consts::PI)).rem_euclid(1.0)
    }
}

/// Central-difference gradient, wrapped: `(f_{k+1} - f_{k-1}) / 2h` per axis.
pub fn gradient(f: &GridField) -> VectorField {
    let g = f.grid();
    let inv2h = 0.5 / g.spacing();
    let comps = (0..g.dim())
        .map(|axis| {
            let values = (0..g.len())
                .map(|i| {
                    let plus = f.values()[g.shifted(i, axis, 1)];
                    let minus = f.values()[g.shifted(i, axis, -1)];
                    (plus - minus) * inv2h
                })
                .collect();
            GridField { grid: g, values }
        })
        .collect();
    VectorField { comps }
}

/// Central-difference Laplacian, wrapped.
pub fn laplacian_fd(f: &GridField) -> GridField {
    let g = f.grid();
    let inv_h2 = 1.0 / (g.spacing() * g.spacing());
    let values = (0..g.len())
        .map(|i| {
            let mut acc = 0.0;
            for axis in 0..g.dim() {
                let plus = f.values()[g.shifted(i, axis, 1)];
                let minus = f.values()[g.shifted(i, axis, -1)];
                acc += (plus + minus - 2.0 * f.values()[i]) * inv_h2;
            }
            acc
        })
        .collect();
    GridField { grid: g, values }
}

/// Conservative first-order upwind discretization of `div(m b)`.
///
/// The face flux between nodes `i` and `i+1` takes the density from the side
/// the mass is flowing *out of* under the particle velocity `-b`, so that the
/// explicit Fokker-Planck step `m <- m + dt * div_upwind_flux(m, b)` keeps
/// densities nonnegative whenever `dt * max|b| <= h`. The output telescopes
/// to zero over the grid.
pub fn div_upwind_flux(density: &[f64], b: &VectorField) -> Result<GridField> {
    let g = b.grid();
    if density.len() != g.len() {
        return Err(MfgError::ShapeMismatch("density/drift shapes differ".into()));
    }
    let inv_h = 1.0 / g.spacing();
    let mut out = vec![0.0; g.len()];
    for axis in 0..g.dim() {
        let bv = b.comp(axis).values();
        for i in 0..g.len() {
            let ip = g.shifted(i, axis, 1);
            let im = g.shifted(i, axis, -1);
            // face i+1/2
            let bf_p = 0.5 * (bv[i] + bv[ip]);
            let flux_p = bf_p.min(0.0) * density[i] + bf_p.max(0.0) * density[ip];
            // face i-1/2
            let bf_m = 0.5 * (bv[im] + bv[i]);
            let flux_m = bf_m.min(0.0) * density[im] + bf_m.max(0.0) * density[i];
            out[i] += (flux_p - flux_m) * inv_h;
        }
    }
    Ok(GridField { grid: g, values: out })
}

/// Conservative central divergence of a vector field `q`:
/// `(q_{k+1} - q_{k-1}) / 2h` summed over axes; telescopes to zero.
pub fn div_central(q: &VectorField) -> GridField {
    let g = q.grid();
    let inv2h = 0.5 / g.spacing();
    let values = (0..g.len())
        .map(|i| {
            let mut acc = 0.0;
            for axis in 0..g.dim() {
                let plus = q.comp(axis).values()[g.shifted(i, axis, 1)];
                let minus = q.comp(axis).values()[g.shifted(i, axis, -1)];
                acc += (plus - minus) * inv2h;
            }
            acc
        })
        .collect();
    GridField { grid: g, values }
}

/// Linear splatting of weighted points onto the grid (adjoint of `interp`).
pub fn deposit(grid: Grid, points: &[[f64; 2]], weights: &[f64]) -> Result<GridMeasure> {
    if points.is_empty() {
        return Err(MfgError::InvalidInput("deposit needs at least one point".into()));
    }
    if points.len() != weights.len() {
        return Err(MfgError::ShapeMismatch("points/weights lengths differ".into()));
    }
    if weights.iter().any(|w| *w < 0.0) {
        return Err(MfgError::InvalidInput("deposit weights must be nonnegative".into()));
    }
    let wsum: f64 = weights.iter().sum();
    if (wsum - 1.0).abs() > 1e-9 {
        return Err(MfgError::InvalidInput(format!("deposit weights must sum to 1, got {wsum}")));
    }
    let m = grid.points_per_axis() as f64;
    let inv_vol = 1.0 / grid.cell_volume();
    let mut density = vec![0.0; grid.len()];
    for (p, w) in points.iter().zip(weights) {
        match grid.dim() {
            1 => {
                let s = p[0].rem_euclid(1.0) * m;
                let i0 = s.floor() as isize;
                let frac = s - i0 as f64;
                density[grid.wrap(i0)] += w * (1.0 - frac) * inv_vol;
                density[grid.wrap(i0 + 1)] += w * frac * inv_vol;
            }
            _ => {
                let s0 = p[0].rem_euclid(1.0) * m;
                let s1 = p[1].rem_euclid(1.0) * m;
                let i0 = s0.floor() as isize;
                let i1 = s1.floor() as isize;
                let w0 = s0 - i0 as f64;
                let w1 = s1 - i1 as f64;
                let mm = grid.points_per_axis();
                let (a0, a1) = (grid.wrap(i0), grid.wrap(i0 + 1));
                let (b0, b1) = (grid.wrap(i1), grid.wrap(i1 + 1));
                density[a0 * mm + b0] += w * (1.0 - w0) * (1.0 - w1) * inv_vol;
                density[a0 * mm + b1] += w * (1.0 - w0) * w1 * inv_vol;
                density[a1 * mm + b0] += w * w0 * (1.0 - w1) * inv_vol;
                density[a1 * mm + b1] += w * w0 * w1 * inv_vol;
            }
        }
    }
    let (meas, _) = GridMeasure::from_density(grid, density)?;
    Ok(meas)
}

/// Uniform time discretization of `[t0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    t_end: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, steps: usize) -> Result<Self> {
        if !(t0 < t_end) {
            return Err(MfgError::InvalidInput(format!("need t0 < T, got t0={t0}, T={t_end}")));
        }
        if steps < 4 {
            return Err(MfgError::InvalidInput(format!("need at least 4 time steps, got {steps}")));
        }
        Ok(TimeGrid { t0, t_end, steps })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.steps as f64
    }

    pub fn time(&self, s: usize) -> f64 {
        self.t0 + s as f64 * self.dt()
    }
}
