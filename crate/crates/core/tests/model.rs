//! Registry-level oracles: flux/derivative values, linear symbols, and
//! structural invariants of the builtin models.

use std::collections::BTreeMap;

use approx::assert_abs_diff_eq;
use ndarray::{array, Array1};
use proptest::prelude::*;
use wavekit_core::model::{fd_jacobian, ModelSpec};

fn builtin(name: &str) -> ModelSpec {
    ModelSpec::builtin(name, &BTreeMap::new()).unwrap()
}

#[test]
fn burgers_flux_value() {
    let m = builtin("burgers");
    let f = m.evaluate_flux(array![3.0].view()).unwrap();
    assert_abs_diff_eq!(f[0], 4.5, epsilon = 1e-15);
}

#[test]
fn viscoelastic_flux_value() {
    // σ(τ) = 1/τ at (τ,u) = (1,2): flux (−u, −σ(τ)) = (−2, −1).
    let m = builtin("viscoelasticity");
    let f = m.evaluate_flux(array![1.0, 2.0].view()).unwrap();
    assert_abs_diff_eq!(f[0], -2.0, epsilon = 1e-15);
    assert_abs_diff_eq!(f[1], -1.0, epsilon = 1e-15);
}

#[test]
fn ks_flux_value() {
    let m = builtin("kuramoto_sivashinsky");
    let f = m.evaluate_flux(array![-2.0].view()).unwrap();
    assert_abs_diff_eq!(f[0], 2.0, epsilon = 1e-15);
}

#[test]
fn burgers_flux_derivatives() {
    let m = builtin("burgers");
    let j = m.flux_jacobian(array![3.0].view()).unwrap();
    assert_abs_diff_eq!(j[[0, 0]], 3.0, epsilon = 1e-15);
    let h = m.flux_hessian(array![-1.7].view()).unwrap();
    assert_abs_diff_eq!(h[0][[0, 0]], 1.0, epsilon = 1e-9);
}

#[test]
fn viscoelastic_flux_jacobian_value() {
    // Hand-derived: d(−u,−τ⁻¹) at (2,0) is [[0,−1],[1/4,0]].
    let m = builtin("viscoelasticity");
    let u = array![2.0, 0.0];
    let j = m.flux_jacobian(u.view()).unwrap();
    assert_abs_diff_eq!(j[[0, 0]], 0.0, epsilon = 1e-15);
    assert_abs_diff_eq!(j[[0, 1]], -1.0, epsilon = 1e-15);
    assert_abs_diff_eq!(j[[1, 0]], 0.25, epsilon = 1e-15);
    assert_abs_diff_eq!(j[[1, 1]], 0.0, epsilon = 1e-15);
}

#[test]
fn ks_linear_symbol_at_one() {
    // Growth rate ξ² − ξ⁴ vanishes at ξ = 1.
    let m = builtin("kuramoto_sivashinsky");
    let s = m.linear_symbol(array![0.0].view(), 1.0).unwrap();
    assert_abs_diff_eq!(s[[0, 0]].re, 0.0, epsilon = 1e-14);
    let s = m.linear_symbol(array![0.0].view(), 0.5).unwrap();
    assert_abs_diff_eq!(s[[0, 0]].re, 0.25 - 0.0625, epsilon = 1e-14);
}

#[test]
fn heat_linear_symbol() {
    let m = builtin("heat");
    let s = m.linear_symbol(array![0.0].view(), 2.0).unwrap();
    assert_abs_diff_eq!(s[[0, 0]].re, -4.0, epsilon = 1e-14);
    assert_abs_diff_eq!(s[[0, 0]].im, 0.0, epsilon = 1e-14);
}

#[test]
fn benard_marangoni_v_component_symbol() {
    // v-component about the zero state: −ξ² + iξ (and −ξ² − iξ for w).
    let m = builtin("benard_marangoni");
    let zero = Array1::zeros(3);
    for &xi in &[0.3, 1.0, 2.5] {
        let s = m.linear_symbol(zero.view(), xi).unwrap();
        assert_abs_diff_eq!(s[[1, 1]].re, -xi * xi, epsilon = 1e-13);
        assert_abs_diff_eq!(s[[1, 1]].im, xi, epsilon = 1e-13);
        assert_abs_diff_eq!(s[[2, 2]].re, -xi * xi, epsilon = 1e-13);
        assert_abs_diff_eq!(s[[2, 2]].im, -xi, epsilon = 1e-13);
    }
}

#[test]
fn symbol_at_zero_is_source_jacobian_only() {
    for name in ["burgers", "kuramoto_sivashinsky", "swift_hohenberg", "benard_marangoni"] {
        let m = builtin(name);
        let u0 = Array1::from_elem(m.n, 0.1);
        let s = m.linear_symbol(u0.view(), 0.0).unwrap();
        let dg = m.source_jacobian(u0.view()).unwrap();
        for i in 0..m.n {
            for j in 0..m.n {
                let p0 = if i == j {
                    m.linear_op_at(i, num_complex::Complex64::new(0.0, 0.0)).re
                } else {
                    0.0
                };
                assert_abs_diff_eq!(s[[i, j]].re, -dg[[i, j]] - p0, epsilon = 1e-12);
                assert_abs_diff_eq!(s[[i, j]].im, 0.0, epsilon = 1e-12);
            }
        }
    }
}

#[test]
fn saint_venant_reserved() {
    let err = ModelSpec::builtin("saint_venant", &BTreeMap::new()).unwrap_err();
    assert!(err.to_string().contains("unsupported-structure"));
}

#[test]
fn unknown_model_rejected() {
    assert!(ModelSpec::builtin("kdv", &BTreeMap::new()).is_err());
}

#[test]
fn wellposedness_screen_all_builtins() {
    for name in [
        "heat",
        "burgers",
        "viscoelasticity",
        "kuramoto_sivashinsky",
        "swift_hohenberg",
        "benard_marangoni",
    ] {
        let m = builtin(name);
        let u0 = Array1::from_elem(m.n, 0.5);
        // Large-wavenumber decay: the principal part must dominate.
        let worst = m.symbol_screen(u0.view(), 200.0, 40).unwrap();
        assert!(worst < 0.0, "{name}: symbol screen max Re = {worst}");
    }
}

#[test]
fn dimension_mismatch_rejected() {
    let m = builtin("burgers");
    assert!(m.evaluate_flux(array![1.0, 2.0].view()).is_err());
    assert!(m.evaluate_flux(array![f64::NAN].view()).is_err());
}

fn state_strategy(n: usize, lo: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..3.0f64, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn analytic_jacobians_match_fd_viscoelasticity(u in state_strategy(2, 0.5)) {
        let m = builtin("viscoelasticity");
        let u = Array1::from(u);
        let ja = m.flux_jacobian(u.view()).unwrap();
        let jf = fd_jacobian(u.view(), |v| m.evaluate_flux(v).unwrap());
        for i in 0..2 {
            for j in 0..2 {
                let scale = 1.0f64.max(ja[[i,j]].abs());
                prop_assert!((ja[[i,j]] - jf[[i,j]]).abs() <= 1e-6 * scale);
            }
        }
    }

    #[test]
    fn analytic_jacobians_match_fd_bm(u in state_strategy(3, -3.0)) {
        let m = builtin("benard_marangoni");
        let u = Array1::from(u);
        let ja = m.flux_jacobian(u.view()).unwrap();
        let jf = fd_jacobian(u.view(), |v| m.evaluate_flux(v).unwrap());
        let ga = m.source_jacobian(u.view()).unwrap();
        let gf = fd_jacobian(u.view(), |v| m.evaluate_source(v).unwrap());
        for i in 0..3 {
            for j in 0..3 {
                prop_assert!((ja[[i,j]] - jf[[i,j]]).abs() <= 1e-6 * (1.0f64.max(ja[[i,j]].abs())));
                prop_assert!((ga[[i,j]] - gf[[i,j]]).abs() <= 1e-5 * (1.0f64.max(ga[[i,j]].abs())));
            }
        }
    }

    #[test]
    fn source_vanishes_on_conserved_components(u in state_strategy(3, -3.0)) {
        for name in ["burgers", "viscoelasticity", "kuramoto_sivashinsky", "benard_marangoni"] {
            let m = builtin(name);
            let state = Array1::from(u[..m.n].to_vec());
            if state.iter().any(|x| !x.is_finite() || (name == "viscoelasticity" && state[0] <= 0.1)) {
                continue;
            }
            let g = m.evaluate_source(state.view()).unwrap();
            for (i, &cons) in m.conserved.iter().enumerate() {
                if cons {
                    prop_assert_eq!(g[i], 0.0);
                }
            }
            // Divergence form also requires a zero constant term in P.
            for (i, &cons) in m.conserved.iter().enumerate() {
                if cons {
                    prop_assert_eq!(m.linear_op_at(i, num_complex::Complex64::new(0.0, 0.0)).re, 0.0);
                }
            }
        }
    }
}
