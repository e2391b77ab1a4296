//! Spectral-utility oracles: derivatives, interpolation, norms.

use approx::assert_abs_diff_eq;
use ndarray::Array1;
use num_complex::Complex64;
use proptest::prelude::*;
use wavekit_core::grid;

fn sample(n: usize, f: impl Fn(f64) -> f64) -> Array1<f64> {
    grid::points(n, 1.0).mapv(f)
}

#[test]
fn deriv_of_trig() {
    let n = 64;
    let tau = 2.0 * std::f64::consts::PI;
    let u = sample(n, |x| (tau * x).sin() + 0.3 * (3.0 * tau * x).cos());
    let du = grid::deriv(u.view(), 1, 1.0);
    let exact = sample(n, |x| tau * (tau * x).cos() - 0.9 * tau * (3.0 * tau * x).sin());
    for i in 0..n {
        assert_abs_diff_eq!(du[i], exact[i], epsilon = 1e-10);
    }
    let d2 = grid::deriv(u.view(), 2, 1.0);
    let exact2 = sample(n, |x| {
        -tau * tau * (tau * x).sin() - 0.3 * 9.0 * tau * tau * (3.0 * tau * x).cos()
    });
    for i in 0..n {
        assert_abs_diff_eq!(d2[i], exact2[i], epsilon = 1e-8);
    }
}

#[test]
fn deriv_matrix_matches_deriv() {
    let n = 32;
    let u = sample(n, |x| (-(x - 0.5) * (x - 0.5) * 40.0).exp());
    let d = grid::deriv_matrix(n, 1, 1.0);
    let via_matrix = d.dot(&u);
    let via_fft = grid::deriv(u.view(), 1, 1.0);
    for i in 0..n {
        assert_abs_diff_eq!(via_matrix[i], via_fft[i], epsilon = 1e-11);
    }
}

#[test]
fn interp_reproduces_grid_and_midpoints() {
    let n = 64;
    let tau = 2.0 * std::f64::consts::PI;
    let u = sample(n, |x| (tau * x).sin().exp());
    for i in [0usize, 7, 31] {
        let x = i as f64 / n as f64;
        assert_abs_diff_eq!(grid::interp(u.view(), x, 1.0), u[i], epsilon = 1e-11);
    }
    // Periodicity: interpolation at 0 and 1 coincides.
    assert_abs_diff_eq!(
        grid::interp(u.view(), 0.0, 1.0),
        grid::interp(u.view(), 1.0, 1.0),
        epsilon = 1e-11
    );
    let x = 0.23456;
    assert_abs_diff_eq!(
        grid::interp(u.view(), x, 1.0),
        (tau * x).sin().exp(),
        epsilon = 1e-9
    );
}

#[test]
fn resample_round_trip() {
    let n = 32;
    let u = sample(n, |x| (2.0 * std::f64::consts::PI * x).cos() + 0.1);
    let up = grid::resample(u.view(), 64);
    let back = grid::resample(up.view(), 32);
    for i in 0..n {
        assert_abs_diff_eq!(back[i], u[i], epsilon = 1e-12);
    }
}

#[test]
fn lp_norms_of_known_function() {
    let n = 4096;
    // One full period of sin on [0,1): L¹ = 2/π, L² = 1/√2, L^∞ = 1.
    let u = sample(n, |x| (2.0 * std::f64::consts::PI * x).sin());
    assert_abs_diff_eq!(
        grid::lp_norm(u.view(), 1.0, 1.0),
        2.0 / std::f64::consts::PI,
        epsilon = 1e-6
    );
    assert_abs_diff_eq!(
        grid::lp_norm(u.view(), 2.0, 1.0),
        std::f64::consts::FRAC_1_SQRT_2,
        epsilon = 1e-6
    );
    assert_abs_diff_eq!(grid::lp_norm(u.view(), f64::INFINITY, 1.0), 1.0, epsilon = 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn fft_round_trip(vals in prop::collection::vec(-10.0f64..10.0, 32)) {
        let cx: Vec<Complex64> = vals.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        let back = grid::ifft(&grid::fft(&cx));
        for (a, b) in back.iter().zip(&cx) {
            prop_assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn parseval_on_grid(vals in prop::collection::vec(-10.0f64..10.0, 64)) {
        let cx: Vec<Complex64> = vals.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        let c = grid::fft(&cx);
        let grid_energy: f64 = vals.iter().map(|x| x * x).sum::<f64>() / 64.0;
        let coef_energy: f64 = c.iter().map(|z| z.norm_sqr()).sum();
        prop_assert!((grid_energy - coef_energy).abs() < 1e-10 * (1.0 + grid_energy));
    }

    #[test]
    fn deriv_kills_constants(c in -5.0f64..5.0) {
        let u = Array1::from_elem(32, c);
        let du = grid::deriv(u.view(), 1, 1.0);
        prop_assert!(du.iter().all(|&x| x.abs() < 1e-12));
    }
}
