//! Fourier collocation utilities on periodic grids.
//!
//! Profiles live on `N_x` equispaced points of `[0,1)`; large simulation
//! domains are `W` whole periods with the same per-period resolution.
//! Fourier coefficients follow the convention `u(x) = Σ_j c_j e^{2πi j x/L}`
//! with `c_j = (1/N) Σ_i u(x_i) e^{-2πi j x_i/L}`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANS: RefCell<HashMap<(usize, bool), Arc<dyn Fft<f64>>>> =
        RefCell::new(HashMap::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|p| {
        p.borrow_mut()
            .entry((n, inverse))
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                if inverse {
                    planner.plan_fft_inverse(n)
                } else {
                    planner.plan_fft_forward(n)
                }
            })
            .clone()
    })
}

/// Forward FFT, normalized so that the output holds Fourier coefficients
/// `c_j` (divided by `N`), in FFT order (`j = 0,1,…,N/2-1,-N/2,…,-1`).
pub fn fft(values: &[Complex64]) -> Vec<Complex64> {
    let n = values.len();
    let mut buf = values.to_vec();
    plan(n, false).process(&mut buf);
    let scale = 1.0 / n as f64;
    for v in &mut buf {
        *v *= scale;
    }
    buf
}

/// Inverse of [`fft`]: synthesizes grid values from coefficients in FFT order.
pub fn ifft(coeffs: &[Complex64]) -> Vec<Complex64> {
    let n = coeffs.len();
    let mut buf = coeffs.to_vec();
    plan(n, true).process(&mut buf);
    buf
}

/// Integer mode numbers in FFT order for a length-`n` transform.
pub fn modes(n: usize) -> Vec<i64> {
    (0..n)
        .map(|i| {
            if i <= (n - 1) / 2 {
                i as i64
            } else {
                i as i64 - n as i64
            }
        })
        .collect()
}

/// Equispaced grid points of `[0, length)`.
pub fn points(n: usize, length: f64) -> Array1<f64> {
    Array1::from_iter((0..n).map(|i| length * i as f64 / n as f64))
}

fn to_complex(u: ArrayView1<'_, f64>) -> Vec<Complex64> {
    u.iter().map(|&x| Complex64::new(x, 0.0)).collect()
}

/// Spectral derivative of given order on a periodic domain of given length.
pub fn deriv(u: ArrayView1<'_, f64>, order: u32, length: f64) -> Array1<f64> {
    let n = u.len();
    let mut c = fft(&to_complex(u));
    let ms = modes(n);
    for (cj, &m) in c.iter_mut().zip(&ms) {
        let base = Complex64::new(0.0, 2.0 * std::f64::consts::PI * m as f64 / length);
        // Zero the unpaired Nyquist mode on odd derivatives (standard choice).
        if n % 2 == 0 && m == -(n as i64) / 2 && order % 2 == 1 {
            *cj = Complex64::new(0.0, 0.0);
        } else {
            *cj *= base.powu(order);
        }
    }
    Array1::from_iter(ifft(&c).into_iter().map(|z| z.re))
}

/// Row-wise spectral derivative of an `n × N` multi-component field.
pub fn deriv_rows(u: ArrayView2<'_, f64>, order: u32, length: f64) -> Array2<f64> {
    let mut out = Array2::zeros(u.raw_dim());
    for (i, row) in u.outer_iter().enumerate() {
        out.row_mut(i).assign(&deriv(row, order, length));
    }
    out
}

/// Applies a Fourier multiplier `symbol(2π m / length)` to a real field,
/// returning the real part of the result.
pub fn apply_symbol<F>(u: ArrayView1<'_, f64>, length: f64, symbol: F) -> Array1<f64>
where
    F: Fn(f64) -> Complex64,
{
    let n = u.len();
    let mut c = fft(&to_complex(u));
    for (cj, &m) in c.iter_mut().zip(&modes(n)) {
        *cj *= symbol(2.0 * std::f64::consts::PI * m as f64 / length);
    }
    Array1::from_iter(ifft(&c).into_iter().map(|z| z.re))
}

/// Complex-field variant of [`apply_symbol`].
pub fn apply_symbol_complex<F>(u: &[Complex64], length: f64, symbol: F) -> Vec<Complex64>
where
    F: Fn(f64) -> Complex64,
{
    let n = u.len();
    let mut c = fft(u);
    for (cj, &m) in c.iter_mut().zip(&modes(n)) {
        *cj *= symbol(2.0 * std::f64::consts::PI * m as f64 / length);
    }
    ifft(&c)
}

/// Dense spectral differentiation matrix of the given order on `[0,length)`.
pub fn deriv_matrix(n: usize, order: u32, length: f64) -> Array2<f64> {
    let mut d = Array2::zeros((n, n));
    let mut e = Array1::zeros(n);
    for j in 0..n {
        e.fill(0.0);
        e[j] = 1.0;
        d.column_mut(j).assign(&deriv(e.view(), order, length));
    }
    d
}

/// Mean value over the periodic domain (plain average: the grid is uniform,
/// so this is the spectrally exact quadrature).
pub fn mean(u: ArrayView1<'_, f64>) -> f64 {
    u.sum() / u.len() as f64
}

/// `L²([0,length])`-type inner product per unit length: `(1/N) Σ u_i v_i`.
pub fn inner(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> f64 {
    assert_eq!(u.len(), v.len());
    u.iter().zip(v.iter()).map(|(a, b)| a * b).sum::<f64>() / u.len() as f64
}

/// Multi-component inner product: sum of per-row [`inner`] values.
pub fn inner_rows(u: ArrayView2<'_, f64>, v: ArrayView2<'_, f64>) -> f64 {
    assert_eq!(u.dim(), v.dim());
    u.outer_iter()
        .zip(v.outer_iter())
        .map(|(a, b)| inner(a.view(), b.view()))
        .sum()
}

/// Trigonometric (spectrally exact) interpolation of a periodic grid function
/// at an arbitrary point.
pub fn interp(u: ArrayView1<'_, f64>, x: f64, length: f64) -> f64 {
    let n = u.len();
    let c = fft(&to_complex(u));
    let ms = modes(n);
    let mut acc = Complex64::new(0.0, 0.0);
    for (cj, &m) in c.iter().zip(&ms) {
        if n % 2 == 0 && m == -(n as i64) / 2 {
            // Split the Nyquist coefficient symmetrically so the interpolant is real.
            let w = 2.0 * std::f64::consts::PI * m as f64 * x / length;
            acc += cj * w.cos();
        } else {
            let w = 2.0 * std::f64::consts::PI * m as f64 * x / length;
            acc += cj * Complex64::new(0.0, w).exp();
        }
    }
    acc.re
}

/// Interpolates every component of an `n × N` field at one point.
pub fn interp_rows(u: ArrayView2<'_, f64>, x: f64, length: f64) -> Array1<f64> {
    Array1::from_iter(u.outer_iter().map(|row| interp(row, x, length)))
}

/// Resamples a periodic grid function onto `m` points via Fourier padding or
/// truncation.
pub fn resample(u: ArrayView1<'_, f64>, m: usize) -> Array1<f64> {
    let n = u.len();
    let c = fft(&to_complex(u));
    let ms_in = modes(n);
    let mut cm = vec![Complex64::new(0.0, 0.0); m];
    let ms_out = modes(m);
    let mut index: HashMap<i64, usize> = HashMap::new();
    for (i, &mm) in ms_out.iter().enumerate() {
        index.insert(mm, i);
    }
    for (cj, &mm) in c.iter().zip(&ms_in) {
        if let Some(&i) = index.get(&mm) {
            cm[i] = *cj;
        }
    }
    Array1::from_iter(ifft(&cm).into_iter().map(|z| z.re))
}

/// Fraction of spectral energy in the top third of the mode range — the
/// resolution diagnostic used by state/profile invariants.
pub fn tail_fraction(u: ArrayView1<'_, f64>) -> f64 {
    let n = u.len();
    let c = fft(&to_complex(u));
    let ms = modes(n);
    let cut = (n as i64 / 2) * 2 / 3;
    let total: f64 = c.iter().map(|z| z.norm_sqr()).sum();
    if total == 0.0 {
        return 0.0;
    }
    let tail: f64 = c
        .iter()
        .zip(&ms)
        .filter(|(_, &m)| m.abs() >= cut.max(1))
        .map(|(z, _)| z.norm_sqr())
        .sum();
    tail / total
}

/// Truncated Fourier coefficients `c_j`, `j = -n_f..n_f`, of a real periodic
/// grid function (period taken as the full grid). Indices beyond the grid
/// resolution are zero-padded.
pub fn coeffs_window(u: ArrayView1<'_, f64>, n_f: usize) -> Vec<Complex64> {
    let n = u.len();
    let c = fft(&to_complex(u));
    let mut out = vec![Complex64::new(0.0, 0.0); 2 * n_f + 1];
    for (i, &m) in modes(n).iter().enumerate() {
        if m.unsigned_abs() as usize <= n_f {
            out[(m + n_f as i64) as usize] = c[i];
        }
    }
    out
}

/// Lp norm over the domain, with the uniform-grid quadrature weight.
pub fn lp_norm(u: ArrayView1<'_, f64>, p: f64, length: f64) -> f64 {
    let h = length / u.len() as f64;
    if p.is_infinite() {
        u.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
    } else {
        (u.iter().map(|&x| x.abs().powf(p)).sum::<f64>() * h).powf(1.0 / p)
    }
}

/// Row-stacked Lp norm of a multi-component field (Euclidean across
/// components, Lp along the domain).
pub fn lp_norm_rows(u: ArrayView2<'_, f64>, p: f64, length: f64) -> f64 {
    let n = u.ncols();
    let h = length / n as f64;
    let point = |i: usize| -> f64 {
        u.column(i).iter().map(|&x| x * x).sum::<f64>().sqrt()
    };
    if p.is_infinite() {
        (0..n).fold(0.0f64, |m, i| m.max(point(i)))
    } else {
        ((0..n).map(|i| point(i).powf(p)).sum::<f64>() * h).powf(1.0 / p)
    }
}
