//! Spectral operators on torus grids: exact heat propagation, periodic
//! convolution and exact fractional shifts, all through the FFT.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::grid::{Grid, GridField};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Cached FFT plan for a bare length; used by the tensor-grid solver whose
/// arrays are not `GridField`s.
pub(crate) fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

/// Signed frequency of mode `i` on an `m`-point axis.
#[inline]
pub fn freq(i: usize, m: usize) -> i64 {
    if i <= m / 2 {
        i as i64
    } else {
        i as i64 - m as i64
    }
}

/// Forward DFT of a real field, axis by axis.
pub fn forward(f: &GridField) -> Vec<Complex64> {
    let g = f.grid();
    let mut buf: Vec<Complex64> =
        f.values().iter().map(|v| Complex64::new(*v, 0.0)).collect();
    fft_axes(&mut buf, g, false);
    buf
}

/// Inverse DFT back to a real field (imaginary parts discarded after scaling).
pub fn inverse(mut buf: Vec<Complex64>, g: Grid) -> GridField {
    fft_axes(&mut buf, g, true);
    let scale = 1.0 / g.len() as f64;
    let values = buf.iter().map(|c| c.re * scale).collect();
    GridField::from_values(g, values).expect("inverse FFT produced non-finite values")
}

fn fft_axes(buf: &mut [Complex64], g: Grid, inv: bool) {
    let m = g.points_per_axis();
    let fft = plan(m, inv);
    match g.dim() {
        1 => fft.process(buf),
        _ => {
            // axis 1 (contiguous rows)
            for row in buf.chunks_exact_mut(m) {
                fft.process(row);
            }
            // axis 0 (strided columns)
            let mut col = vec![Complex64::default(); m];
            for j in 0..m {
                for i in 0..m {
                    col[i] = buf[i * m + j];
                }
                fft.process(&mut col);
                for i in 0..m {
                    buf[i * m + j] = col[i];
                }
            }
        }
    }
}

/// Applies a diagonal Fourier multiplier `symbol(k)` where `k` are the signed
/// integer frequencies of the mode.
pub fn apply_symbol(f: &GridField, symbol: impl Fn([i64; 2]) -> Complex64) -> GridField {
    let g = f.grid();
    let m = g.points_per_axis();
    let mut buf = forward(f);
    match g.dim() {
        1 => {
            for (i, c) in buf.iter_mut().enumerate() {
                *c *= symbol([freq(i, m), 0]);
            }
        }
        _ => {
            for i in 0..m {
                for j in 0..m {
                    buf[i * m + j] *= symbol([freq(i, m), freq(j, m)]);
                }
            }
        }
    }
    inverse(buf, g)
}

/// Exact spectral heat propagator `e^{nu_dt * Laplacian}`: multiplies mode `k`
/// by `e^{-4 pi^2 |k|^2 nu_dt}`. The zero mode is untouched, so the grid mean
/// is preserved exactly.
pub fn heat_step(f: &GridField, nu_dt: f64) -> GridField {
    if nu_dt == 0.0 {
        return f.clone();
    }
    let four_pi2 = 4.0 * std::f64::consts::PI * std::f64::consts::PI;
    apply_symbol(f, |k| {
        let k2 = (k[0] * k[0] + k[1] * k[1]) as f64;
        Complex64::new((-four_pi2 * k2 * nu_dt).exp(), 0.0)
    })
}

/// Spectral Laplacian.
pub fn laplacian(f: &GridField) -> GridField {
    let four_pi2 = 4.0 * std::f64::consts::PI * std::f64::consts::PI;
    apply_symbol(f, |k| {
        let k2 = (k[0] * k[0] + k[1] * k[1]) as f64;
        Complex64::new(-four_pi2 * k2, 0.0)
    })
}

/// Periodic convolution `(f * g)(x) = sum_y f(y) g(x - y) h^dim`.
pub fn convolve(f: &GridField, g_field: &GridField) -> GridField {
    let g = f.grid();
    assert_eq!(g, g_field.grid(), "convolution needs matching grids");
    let fa = forward(f);
    let fb = forward(g_field);
    let vol = g.cell_volume();
    let buf: Vec<Complex64> = fa.iter().zip(&fb).map(|(a, b)| a * b * vol).collect();
    inverse(buf, g)
}

/// Exact translation `x -> f(x + s)` through the Fourier phase.
pub fn shift(f: &GridField, s: [f64; 2]) -> GridField {
    if s[0] == 0.0 && s[1] == 0.0 {
        return f.clone();
    }
    let tau = 2.0 * std::f64::consts::PI;
    apply_symbol(f, |k| {
        let phase = tau * (k[0] as f64 * s[0] + k[1] as f64 * s[1]);
        Complex64::new(phase.cos(), phase.sin())
    })
}
