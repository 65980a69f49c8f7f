//! Model data: Hamiltonians with their derivatives and convex conjugates,
//! smoothed couplings `F`, `G` with flat derivatives, and the potential pair
//! `(F_pot, G_pot)` for the optimal-control formulation.

use crate::error::{MfgError, Result};
use crate::grid::{Grid, GridField, GridMeasure};
use crate::spectral::convolve;

const TAU: f64 = 2.0 * std::f64::consts::PI;

/// Choice of Hamiltonian. Both variants are globally Lipschitz in `p` and
/// carry an optional spatial modulation `eps * cos(2 pi x_1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HamiltonianKind {
    /// `H(x,p) = sqrt(1+|p|^2) - 1 + eps cos(2 pi x_1)`; gradient bound 1.
    SqrtLipschitz,
    /// Quadratic for `|p| <= r`, linearized beyond; gradient bound `r`.
    TruncatedQuadratic { r: f64 },
    /// `H = c` with no `p` dependence; degenerate instance for diagnostics.
    Constant { c: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct Hamiltonian {
    kind: HamiltonianKind,
    eps: f64,
}

#[inline]
fn norm2(p: [f64; 2]) -> f64 {
    p[0] * p[0] + p[1] * p[1]
}

impl Hamiltonian {
    pub fn new(kind: HamiltonianKind, eps: f64) -> Result<Self> {
        if let HamiltonianKind::TruncatedQuadratic { r } = kind {
            if r <= 0.0 {
                return Err(MfgError::InvalidInput("truncation radius must be positive".into()));
            }
        }
        Ok(Hamiltonian { kind, eps })
    }

    pub fn default_sqrt(eps: f64) -> Self {
        Hamiltonian { kind: HamiltonianKind::SqrtLipschitz, eps }
    }

    pub fn kind(&self) -> HamiltonianKind {
        self.kind
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    fn spatial(&self, x: [f64; 2]) -> f64 {
        self.eps * (TAU * x[0]).cos()
    }

    pub fn value(&self, x: [f64; 2], p: [f64; 2]) -> f64 {
        let p2 = norm2(p);
        let base = match self.kind {
            HamiltonianKind::SqrtLipschitz => (1.0 + p2).sqrt() - 1.0,
            HamiltonianKind::TruncatedQuadratic { r } => {
                let pn = p2.sqrt();
                if pn <= r {
                    0.5 * p2
                } else {
                    r * pn - 0.5 * r * r
                }
            }
            HamiltonianKind::Constant { c } => c,
        };
        base + self.spatial(x)
    }

    pub fn grad_p(&self, _x: [f64; 2], p: [f64; 2]) -> [f64; 2] {
        match self.kind {
            HamiltonianKind::SqrtLipschitz => {
                let s = 1.0 / (1.0 + norm2(p)).sqrt();
                [p[0] * s, p[1] * s]
            }
            HamiltonianKind::TruncatedQuadratic { r } => {
                let pn = norm2(p).sqrt();
                if pn <= r {
                    p
                } else {
                    let s = r / pn;
                    [p[0] * s, p[1] * s]
                }
            }
            HamiltonianKind::Constant { .. } => [0.0, 0.0],
        }
    }

    /// Hessian in `p`; symmetric positive semidefinite.
    pub fn hess_p(&self, _x: [f64; 2], p: [f64; 2]) -> [[f64; 2]; 2] {
        match self.kind {
            HamiltonianKind::SqrtLipschitz => {
                let q = 1.0 + norm2(p);
                let s = q.powf(-1.5);
                [
                    [(q - p[0] * p[0]) * s, -p[0] * p[1] * s],
                    [-p[0] * p[1] * s, (q - p[1] * p[1]) * s],
                ]
            }
            HamiltonianKind::TruncatedQuadratic { r } => {
                let pn = norm2(p).sqrt();
                if pn <= r {
                    [[1.0, 0.0], [0.0, 1.0]]
                } else {
                    let s = r / pn;
                    let (e0, e1) = (p[0] / pn, p[1] / pn);
                    [
                        [s * (1.0 - e0 * e0), -s * e0 * e1],
                        [-s * e0 * e1, s * (1.0 - e1 * e1)],
                    ]
                }
            }
            HamiltonianKind::Constant { .. } => [[0.0, 0.0], [0.0, 0.0]],
        }
    }

    /// Convex conjugate `H*(x,a) = sup_p (a.p - H(x,p))`; `None` outside the
    /// domain.
    pub fn legendre(&self, x: [f64; 2], alpha: [f64; 2]) -> Option<f64> {
        let a2 = norm2(alpha);
        let base = match self.kind {
            HamiltonianKind::SqrtLipschitz => {
                if a2 >= 1.0 {
                    return None;
                }
                1.0 - (1.0 - a2).sqrt()
            }
            HamiltonianKind::TruncatedQuadratic { r } => {
                if a2.sqrt() > r {
                    return None;
                }
                0.5 * a2
            }
            HamiltonianKind::Constant { c } => {
                if a2 > 0.0 {
                    return None;
                }
                -c
            }
        };
        Some(base - self.spatial(x))
    }

    /// Global bound on `|D_p H|`.
    pub fn lipschitz_bound(&self) -> f64 {
        match self.kind {
            HamiltonianKind::SqrtLipschitz => 1.0,
            HamiltonianKind::TruncatedQuadratic { r } => r,
            HamiltonianKind::Constant { .. } => 0.0,
        }
    }
}

/// Pointwise profile applied to the smoothed density inside a coupling.
/// `Linear(1.0)` is the default; negative slopes break monotonicity and are
/// only meant for failure diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Phi {
    Linear(f64),
    /// `theta + theta^3 / 3`, nondecreasing with derivative `1 + theta^2`.
    Cubic,
}

impl Phi {
    pub fn apply(&self, theta: f64) -> f64 {
        match self {
            Phi::Linear(s) => s * theta,
            Phi::Cubic => theta + theta * theta * theta / 3.0,
        }
    }

    pub fn derivative(&self, theta: f64) -> f64 {
        match self {
            Phi::Linear(s) => *s,
            Phi::Cubic => 1.0 + theta * theta,
        }
    }

    /// Antiderivative with `Psi(0) = 0`; potential of the coupling.
    pub fn antiderivative(&self, theta: f64) -> f64 {
        match self {
            Phi::Linear(s) => 0.5 * s * theta * theta,
            Phi::Cubic => 0.5 * theta * theta + theta.powi(4) / 12.0,
        }
    }

    pub fn is_monotone(&self) -> bool {
        match self {
            Phi::Linear(s) => *s >= 0.0,
            Phi::Cubic => true,
        }
    }
}

/// Smoothed coupling `F(x,m) = integral Phi((rho*m)(z)) rho(x-z) dz` built
/// from an even smoothing kernel `rho` (wrapped Gaussian).
#[derive(Debug, Clone)]
pub struct Coupling {
    rho: GridField,
    rho_rho: GridField,
    phi: Phi,
    sigma: f64,
}

impl Coupling {
    pub fn new(grid: Grid, sigma: f64, phi: Phi) -> Result<Self> {
        if sigma <= 0.0 {
            return Err(MfgError::InvalidInput("kernel width must be positive".into()));
        }
        let rho = wrapped_gaussian(grid, sigma);
        let rho_rho = convolve(&rho, &rho);
        Ok(Coupling { rho, rho_rho, phi, sigma })
    }

    pub fn grid(&self) -> Grid {
        self.rho.grid()
    }

    pub fn phi(&self) -> Phi {
        self.phi
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn rho(&self) -> &GridField {
        &self.rho
    }

    /// `rho * rho`; for linear profiles this is the measure-independent
    /// flat-derivative kernel `dF/dm(x,y) = slope * (rho*rho)(x-y)`.
    pub fn rho_rho(&self) -> &GridField {
        &self.rho_rho
    }

    /// Pairwise kernel `psi` with `F(x, emp(y_1..y_k)) = (1/k) sum psi(x - y_j)`;
    /// available exactly when the profile is linear.
    pub fn pair_kernel(&self) -> Option<GridField> {
        match self.phi {
            Phi::Linear(s) => Some(self.rho_rho.scaled(s)),
            _ => None,
        }
    }

    pub fn evaluate(&self, m: &GridMeasure) -> GridField {
        match self.phi {
            Phi::Linear(s) => convolve(&self.rho_rho, &m.as_field()).scaled(s),
            _ => {
                let smoothed = convolve(&self.rho, &m.as_field());
                let pointwise = GridField::from_values(
                    self.grid(),
                    smoothed.values().iter().map(|t| self.phi.apply(*t)).collect(),
                )
                .expect("finite");
                convolve(&self.rho, &pointwise)
            }
        }
    }

    /// Applies the flat derivative: `x -> integral dF/dm(x, m, y) mu(y) dy`
    /// for a signed perturbation density `mu`.
    pub fn flat_derivative_apply(&self, m: &GridMeasure, mu: &GridField) -> GridField {
        match self.phi {
            Phi::Linear(s) => convolve(&self.rho_rho, mu).scaled(s),
            _ => {
                let smoothed_m = convolve(&self.rho, &m.as_field());
                let smoothed_mu = convolve(&self.rho, mu);
                let pointwise = GridField::from_values(
                    self.grid(),
                    smoothed_m
                        .values()
                        .iter()
                        .zip(smoothed_mu.values())
                        .map(|(t, w)| self.phi.derivative(*t) * w)
                        .collect(),
                )
                .expect("finite");
                convolve(&self.rho, &pointwise)
            }
        }
    }

    /// Potential `Pot(m) = integral Psi((rho*m)(z)) dz` with
    /// `dPot/dm = F` (the kernel is even).
    pub fn potential(&self, m: &GridMeasure) -> f64 {
        let smoothed = convolve(&self.rho, &m.as_field());
        smoothed.values().iter().map(|t| self.phi.antiderivative(*t)).sum::<f64>()
            * self.grid().cell_volume()
    }
}

/// Wrapped Gaussian of width `sigma`, truncated at `5 sigma` and renormalized
/// to unit integral; even on the grid by construction.
fn wrapped_gaussian(grid: Grid, sigma: f64) -> GridField {
    let cutoff = 5.0 * sigma;
    let mut f = GridField::from_fn(grid, |x| {
        let mut v = 1.0;
        for ax in 0..grid.dim() {
            let d = x[ax].rem_euclid(1.0);
            let d = d.min(1.0 - d);
            if d > cutoff {
                return 0.0;
            }
            let mut acc = 0.0;
            // periodic images inside the truncation window
            for j in -1..=1 {
                let y = x[ax] + j as f64;
                if y.abs() <= cutoff {
                    acc += (-0.5 * (y / sigma).powi(2)).exp();
                }
            }
            v *= acc;
        }
        v
    });
    let total = f.integral();
    let inv = 1.0 / total;
    for v in f.values_mut() {
        *v *= inv;
    }
    f
}

/// Lasry-Lions monotonicity gap `integral (F(.,m) - F(.,m2)) d(m - m2)`.
pub fn monotonicity_gap(coupling: &Coupling, m: &GridMeasure, m2: &GridMeasure) -> Result<f64> {
    if m.grid() != m2.grid() {
        return Err(MfgError::ShapeMismatch("measures live on different grids".into()));
    }
    let df = coupling.evaluate(m).sub(&coupling.evaluate(m2));
    let vol = m.grid().cell_volume();
    Ok(df
        .values()
        .iter()
        .zip(m.density().iter().zip(m2.density()))
        .map(|(f, (a, b))| f * (a - b))
        .sum::<f64>()
        * vol)
}

/// Bundled model data for one experiment: Hamiltonian plus running and
/// terminal couplings.
#[derive(Debug, Clone)]
pub struct Model {
    pub hamiltonian: Hamiltonian,
    pub running: Coupling,
    pub terminal: Coupling,
}

impl Model {
    /// Default monotone model: Lipschitz Hamiltonian, identity profiles,
    /// Gaussian smoothing of widths `sigma` and `sigma_g`.
    pub fn default_monotone(grid: Grid, eps: f64, sigma: f64, sigma_g: f64) -> Result<Self> {
        Ok(Model {
            hamiltonian: Hamiltonian::default_sqrt(eps),
            running: Coupling::new(grid, sigma, Phi::Linear(1.0))?,
            terminal: Coupling::new(grid, sigma_g, Phi::Linear(1.0))?,
        })
    }

    /// Trivial model: `F = G = 0`, `H(x,0) = 0`; the MFG system decouples.
    pub fn trivial(grid: Grid) -> Result<Self> {
        Ok(Model {
            hamiltonian: Hamiltonian::default_sqrt(0.0),
            running: Coupling::new(grid, 0.1, Phi::Linear(0.0))?,
            terminal: Coupling::new(grid, 0.1, Phi::Linear(0.0))?,
        })
    }

    pub fn grid(&self) -> Grid {
        self.running.grid()
    }

    pub fn is_monotone(&self) -> bool {
        self.running.phi().is_monotone() && self.terminal.phi().is_monotone()
    }
}
