//! Spectral-engine oracles: Fourier-multiplier constant states, kernel and
//! symmetry identities, stability verdicts across the model zoo, critical
//! dual bases, and the multi-period propagator with its slow/fast splitting.

use std::collections::BTreeMap;

use approx::assert_abs_diff_eq;
use ndarray::{Array1, Array2};
use num_complex::Complex64;
use proptest::prelude::*;

use wavekit_core::bloch::*;
use wavekit_core::grid;
use wavekit_core::linalg::eigvals_complex;
use wavekit_core::model::ModelSpec;
use wavekit_core::profile::{
    adjoint_null, continue_family, family_derivatives, normalize_parametrization,
    DerivativeMethod, SolveOptions, WaveFamily, WaveProfile,
};
use wavekit_core::seeds;

const TAU: f64 = 2.0 * std::f64::consts::PI;

fn builtin(name: &str) -> ModelSpec {
    ModelSpec::builtin(name, &BTreeMap::new()).unwrap()
}

/// Symmetric ξ-grid over [−w, w] containing 0.
fn xi_grid(w: f64, half: usize) -> Vec<f64> {
    (-(half as i64)..=(half as i64))
        .map(|i| w * i as f64 / half as f64)
        .collect()
}

fn ks_wave() -> (ModelSpec, WaveProfile) {
    let m = builtin("kuramoto_sivashinsky");
    let w = seeds::kuramoto_sivashinsky_anchor(&m, 64, 0.8).unwrap();
    (m, w)
}

fn ks_family() -> (ModelSpec, WaveFamily) {
    let (m, w) = ks_wave();
    let opts = SolveOptions {
        tol: 1e-10,
        max_iter: 60,
    };
    let mut fam = continue_family(&m, &w, &[1e-3, 1e-3], &[2, 2], &opts).unwrap();
    family_derivatives(&m, &mut fam, DerivativeMethod::Variational).unwrap();
    adjoint_null(&m, &mut fam).unwrap();
    normalize_parametrization(&mut fam).unwrap();
    (m, fam)
}

fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
}

// --- Assembly oracles ---------------------------------------------------------

#[test]
fn constant_state_matches_fourier_multiplier() {
    // Scalar constant state: the operator diagonalizes mode by mode with
    // eigenvalues −k̄²θ² + ik̄(c̄ − a)θ, θ = 2πj + ξ.
    let m = builtin("burgers");
    let u = Array2::from_elem((1, 32), 0.3);
    let w = WaveProfile::guess(&m, u, 0.5, 0.1);
    let n_f = 8;
    let xi = 0.7;
    let op = assemble_bloch(&m, &w, xi, n_f).unwrap();
    let ev = eigvals_complex(&op.matrix).unwrap();
    for j in -(n_f as i64)..=(n_f as i64) {
        let th = TAU * j as f64 + xi;
        let pred = Complex64::new(-0.25 * th * th, 0.5 * (0.1 - 0.3) * th);
        let gap = ev.iter().map(|z| (z - pred).norm()).fold(f64::MAX, f64::min);
        assert!(gap <= 1e-10, "mode {j}: gap {gap:.2e}");
    }
}

#[test]
fn profile_derivative_lies_in_zero_kernel() {
    let (m, w) = ks_wave();
    let op0 = assemble_bloch(&m, &w, 0.0, 15).unwrap();
    let upc = field_to_coeffs(w.u_prime().view(), 15);
    let r = op0.matrix.dot(&upc);
    let norm = r.iter().fold(0.0f64, |a, z| a.max(z.norm()));
    assert!(norm <= 1e-8, "|L₀Ū′| = {norm:.2e}");
}

#[test]
fn spectra_conjugate_under_xi_reflection() {
    let (m, w) = ks_wave();
    let evp = eigvals_complex(&assemble_bloch(&m, &w, 0.3, 15).unwrap().matrix).unwrap();
    let evm = eigvals_complex(&assemble_bloch(&m, &w, -0.3, 15).unwrap().matrix).unwrap();
    for z in &evp {
        let zc = z.conj();
        let gap = evm.iter().map(|y| (y - zc).norm()).fold(f64::MAX, f64::min);
        assert!(
            gap <= 1e-10 * z.norm().max(1.0),
            "conjugation gap {gap:.2e} at λ = {z}"
        );
    }
}

#[test]
fn eigenvalues_converge_under_mode_doubling() {
    let (m, w) = ks_wave();
    let e1 = eigvals_complex(&assemble_bloch(&m, &w, 0.4, 12).unwrap().matrix).unwrap();
    let e2 = eigvals_complex(&assemble_bloch(&m, &w, 0.4, 24).unwrap().matrix).unwrap();
    for z in e1.iter().filter(|z| z.re.abs() <= 50.0) {
        let gap = e2.iter().map(|y| (y - z).norm()).fold(f64::MAX, f64::min);
        assert!(gap <= 1e-8, "eigenvalue moved by {gap:.2e}");
    }
}

// --- Stability verdicts across the model zoo -----------------------------------

#[test]
fn heat_constant_state_is_exactly_parabolic() {
    let m = builtin("heat");
    let w = seeds::default_anchor(&m, 32).unwrap();
    let gx = xi_grid(3.0, 12);
    let mut spec = spectrum(&m, &w, &gx, 8, None).unwrap();
    // Every retained eigenvalue sits on a parabola Re λ = −θ², Im λ = 0.
    for (g, &xi) in spec.xi_grid.iter().enumerate() {
        for z in &spec.eigenvalues[g] {
            assert!(z.im.abs() <= 1e-10);
            let gap = (-(8i64)..=8)
                .map(|j| {
                    let th = TAU * j as f64 + xi;
                    (z.re + th * th).abs()
                })
                .fold(f64::MAX, f64::min);
            assert!(gap <= 1e-9, "off-parabola eigenvalue {z} at ξ = {xi}");
        }
    }
    let rep = check_diffusive_stability(&m, &w, &spec, 8, None).unwrap();
    assert!(rep.passes);
    assert_eq!(rep.zero_count, 1);
    assert_abs_diff_eq!(rep.theta, 1.0, epsilon = 1e-12);
    let fits = fit_critical_expansion(&mut spec, 0.51).unwrap();
    assert_eq!(fits.len(), 1);
    assert_abs_diff_eq!(fits[0].a, 0.0, epsilon = 1e-12);
    assert_abs_diff_eq!(fits[0].b, 1.0, epsilon = 1e-10);
}

#[test]
fn swift_hohenberg_transport_coefficient_vanishes() {
    // Standing rolls carry no phase transport: the critical curve through
    // the origin fits with a = 0.
    let m = builtin("swift_hohenberg");
    let w = seeds::default_anchor(&m, 128).unwrap();
    let gx = xi_grid(3.0, 12);
    let mut spec = spectrum(&m, &w, &gx, 24, None).unwrap();
    let rep = check_diffusive_stability(&m, &w, &spec, 24, None).unwrap();
    assert!(rep.passes);
    assert_eq!(spec.n_crit, 1);
    let fits = fit_critical_expansion(&mut spec, 0.51).unwrap();
    assert!(fits[0].a.abs() <= 1e-8, "a = {:.3e}", fits[0].a);
    assert!(fits[0].b > 0.0);
}

#[test]
fn ks_stable_band_wave_passes_all_checks() {
    let (m, w) = ks_wave();
    let gx = xi_grid(3.1, 24);
    let mut spec = spectrum(&m, &w, &gx, 15, None).unwrap();
    let rep = check_diffusive_stability(&m, &w, &spec, 15, None).unwrap();
    assert!(rep.d1 && rep.d2 && rep.d3, "report: {rep:?}");
    assert_eq!(rep.zero_count, 2);
    // A single height-two chain over Ū′ when the speed varies with the mean.
    assert_eq!(rep.jordan_rank, 1);
    let fits = fit_critical_expansion(&mut spec, 0.35).unwrap();
    assert_eq!(fits.len(), 2);
    for f in &fits {
        // Transport coefficients are real up to contamination 1e-6·|a|.
        assert!(f.a_imag.abs() <= 1e-6 * f.a.abs().max(1e-12), "{f:?}");
        // Curvatures dominate the fitted margin.
        assert!(w.k * w.k * f.b >= rep.theta, "{f:?}");
    }
}

#[test]
fn ks_outside_band_fails_growth_check() {
    let m = builtin("kuramoto_sivashinsky");
    let w = seeds::kuramoto_sivashinsky_anchor(&m, 64, 0.65).unwrap();
    let gx = xi_grid(3.0, 24);
    let spec = spectrum(&m, &w, &gx, 15, None).unwrap();
    let rep = check_diffusive_stability(&m, &w, &spec, 15, None).unwrap();
    assert!(!rep.d1);
    assert!(rep.max_re_offcritical > 0.0);
}

#[test]
fn scalar_constant_state_fails_zero_count() {
    // A constant state of a conservation law has one curve through the
    // origin where a genuine wave carries two.
    let m = builtin("burgers");
    let w = seeds::default_anchor(&m, 32).unwrap();
    let gx = xi_grid(3.0, 12);
    let spec = spectrum(&m, &w, &gx, 8, None).unwrap();
    let rep = check_diffusive_stability(&m, &w, &spec, 8, None).unwrap();
    assert!(!rep.d3);
    assert_eq!(rep.zero_count, 1);
    assert_eq!(rep.expected_zero_count, 2);
}

#[test]
fn viscoelastic_zero_group_is_semisimple() {
    // The wave is standing (speed independent of the means), so the zero
    // group of L₀ carries no Jordan chain.
    let m = builtin("viscoelasticity");
    let w = seeds::default_anchor(&m, 64).unwrap();
    let gx = xi_grid(3.0, 12);
    let spec = spectrum(&m, &w, &gx, 20, None).unwrap();
    let rep = check_diffusive_stability(&m, &w, &spec, 20, None).unwrap();
    assert_eq!(rep.zero_count, 3);
    assert_eq!(rep.jordan_rank, 0);
}

// --- Critical dual bases --------------------------------------------------------

#[test]
fn critical_bases_anchor_duality_and_pairings() {
    let (m, fam) = ks_family();
    let w = &fam.anchor;
    let n_f = 15;
    let gx = xi_grid(0.06, 6);
    let cb = critical_bases(&m, &fam, &gx, n_f, None).unwrap();

    // ξ = 0 right anchors are exactly (∂_MŪ, Ū′).
    let i0 = cb.index_of(0.0).unwrap();
    let upc = field_to_coeffs(w.u_prime().view(), n_f);
    let gap = (&cb.right[i0].column(cb.n_c).to_owned() - &upc)
        .iter()
        .fold(0.0f64, |a, z| a.max(z.norm()));
    assert!(gap == 0.0);
    let dmc = field_to_coeffs(fam.du_dm[0].view(), n_f);
    let gap = (&cb.right[i0].column(0).to_owned() - &dmc)
        .iter()
        .fold(0.0f64, |a, z| a.max(z.norm()));
    assert!(gap == 0.0);

    let g = cb.index_of(0.05).unwrap();
    // Exact duality of the continued bases.
    for i in 0..=cb.n_c {
        for j in 0..=cb.n_c {
            let v = coeff_inner(
                &cb.left[g].column(i).to_owned(),
                &cb.right[g].column(j).to_owned(),
            );
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((v - Complex64::new(want, 0.0)).norm() <= 1e-10);
        }
    }
    // Scaled pairing of the slow eigenfunctions.
    let phi = cb.phi(g);
    let phit = cb.phi_tilde(g);
    let ikx = Complex64::new(0.0, w.k * cb.xi_grid[g]);
    for i in 0..=cb.n_c {
        for j in 0..=cb.n_c {
            let v = coeff_inner(&phit.column(i).to_owned(), &phi.column(j).to_owned());
            let want = if i == j { ikx } else { Complex64::new(0.0, 0.0) };
            assert!((v - want).norm() <= 1e-8);
        }
    }
    // φ_j are genuine eigenfunctions of the assembled operator.
    let op = assemble_bloch(&m, w, cb.xi_grid[g], n_f).unwrap();
    for j in 0..=cb.n_c {
        let lphi = op.matrix.dot(&phi.column(j).to_owned());
        let r = &lphi - &phi.column(j).mapv(|z| z * cb.lambda[g][j]);
        let norm = r.iter().fold(0.0f64, |a, z| a.max(z.norm()));
        assert!(norm <= 1e-10, "eigenfunction residual {norm:.2e}");
    }
}

#[test]
fn basis_xi_derivative_matches_k_derivative() {
    let (m, fam) = ks_family();
    let n_f = 15;
    let gx = xi_grid(0.06, 6);
    let cb = critical_bases(&m, &fam, &gx, n_f, None).unwrap();
    let duk = field_to_coeffs(fam.du_dk.as_ref().unwrap().view(), n_f)
        .mapv(|z| z * Complex64::new(0.0, fam.anchor.k));
    let gap = (&cb.dxi_q_last - &duk)
        .iter()
        .fold(0.0f64, |a, z| a.max(z.norm()));
    assert!(gap <= 1e-6, "∂_ξ q gap {gap:.2e}");
}

#[test]
fn characteristic_speeds_match_curve_fits() {
    let (m, fam) = ks_family();
    let n_f = 15;
    let cb = critical_bases(&m, &fam, &xi_grid(0.06, 6), n_f, None).unwrap();
    let gx = xi_grid(3.1, 24);
    let mut spec = spectrum(&m, &fam.anchor, &gx, n_f, None).unwrap();
    let fits = fit_critical_expansion(&mut spec, 0.35).unwrap();
    // Same speeds from the scaled reduced matrix and from curve fitting.
    let mut fitted: Vec<f64> = fits.iter().map(|f| f.a).collect();
    let mut speeds = cb.a.clone();
    fitted.sort_by(|x, y| x.partial_cmp(y).unwrap());
    speeds.sort_by(|x, y| x.partial_cmp(y).unwrap());
    for (s, f) in speeds.iter().zip(fitted.iter()) {
        assert!((s - f).abs() <= 1e-5 * f.abs().max(1.0), "{s} vs {f}");
    }
    // The dual eigenvector matrices honor their duality.
    let prod = cb.v_left.t().mapv(|z| z.conj()).dot(&cb.v_right);
    for i in 0..=cb.n_c {
        for j in 0..=cb.n_c {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((prod[[i, j]] - Complex64::new(want, 0.0)).norm() <= 1e-10);
        }
    }
}

// --- Multi-period propagation -----------------------------------------------------

fn gaussian_field(periods: usize, samples_per: usize, width: f64) -> Array2<f64> {
    let nxb = periods * samples_per;
    let mut g = Array2::zeros((1, nxb));
    for p in 0..nxb {
        let x = p as f64 * periods as f64 / nxb as f64 - periods as f64 / 2.0;
        g[[0, p]] = (-x * x / (2.0 * width * width)).exp();
    }
    g
}

#[test]
fn transform_roundtrip_and_isometry() {
    let g = gaussian_field(16, 48, 1.0);
    let bt = bloch_transform(g.view(), 16, 15).unwrap();
    let back = bloch_synthesis(&bt);
    assert!(max_abs(&(&back - &g)) <= 1e-10);
    // Norm identity between the line and the decomposition.
    let h = 16.0 / g.ncols() as f64;
    let direct = (g.iter().map(|&x| x * x).sum::<f64>() * h).sqrt();
    assert!((bt.norm_l2() - direct).abs() <= 1e-10);
}

#[test]
fn propagation_at_zero_time_is_identity() {
    let (m, w) = ks_wave();
    let g = gaussian_field(16, 48, 1.0);
    let out = propagate_linear(&m, &w, g.view(), 16, 0.0, 15).unwrap();
    assert!(max_abs(&(&out - &g)) <= 1e-10);
}

#[test]
fn odd_sample_count_is_rejected() {
    let (m, w) = ks_wave();
    let g = Array2::zeros((1, 100));
    let err = propagate_linear(&m, &w, g.view(), 16, 1.0, 15).unwrap_err();
    assert!(err.to_string().starts_with("domain-not-commensurate"));
}

#[test]
fn propagation_matches_direct_time_integration() {
    // Independent oracle: exponential integrator on the big domain with the
    // stiff symbol handled exactly and the variable coefficient explicit.
    let (m, w) = ks_wave();
    let n_f = 15;
    let k = w.k;
    let c = w.c;
    let periods = 32usize;
    let samples = 48usize;
    let nxb = periods * samples;
    let g = gaussian_field(periods, samples, 0.87);

    let ubar = grid::resample(w.u.row(0), samples);
    let ubig: Vec<f64> = (0..nxb).map(|p| ubar[p % samples]).collect();
    let theta: Vec<f64> = (0..nxb)
        .map(|j| {
            let js = if j <= nxb / 2 {
                j as i64
            } else {
                j as i64 - nxb as i64
            };
            TAU * js as f64 / periods as f64
        })
        .collect();
    let sym: Vec<Complex64> = theta
        .iter()
        .map(|&th| {
            let z = Complex64::new(0.0, k * th);
            -(z * z + z * z * z * z) + Complex64::new(0.0, c * k * th)
        })
        .collect();
    let nvar = |u: &Vec<Complex64>| -> Vec<Complex64> {
        let uphys = grid::ifft(u);
        let prod: Vec<Complex64> = uphys
            .iter()
            .zip(ubig.iter())
            .map(|(z, &ub)| z * ub)
            .collect();
        let mut phat = grid::fft(&prod);
        for (j, v) in phat.iter_mut().enumerate() {
            *v *= Complex64::new(0.0, -k * theta[j]);
        }
        phat
    };
    let t_end = 5.0;
    let dt = 2e-4f64;
    let steps = (t_end / dt).round() as usize;
    let e_full: Vec<Complex64> = sym.iter().map(|s| (s * dt).exp()).collect();
    let e_half: Vec<Complex64> = sym.iter().map(|s| (s * dt / 2.0).exp()).collect();
    let row: Vec<Complex64> = g.row(0).iter().map(|&x| Complex64::new(x, 0.0)).collect();
    let mut uhat = grid::fft(&row);
    for _ in 0..steps {
        let n0 = nvar(&uhat);
        let mid: Vec<Complex64> = (0..nxb)
            .map(|j| e_half[j] * (uhat[j] + dt / 2.0 * n0[j]))
            .collect();
        let nmid = nvar(&mid);
        uhat = (0..nxb)
            .map(|j| e_full[j] * uhat[j] + dt * e_half[j] * nmid[j])
            .collect();
    }
    let oracle: Vec<f64> = grid::ifft(&uhat).iter().map(|z| z.re).collect();

    let out = propagate_linear(&m, &w, g.view(), periods, t_end, n_f).unwrap();
    let scale = oracle.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
    let gap = oracle
        .iter()
        .zip(out.row(0).iter())
        .map(|(&a, &b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(gap / scale <= 1e-6, "relative gap {:.2e}", gap / scale);
}

// --- Propagator splitting ---------------------------------------------------------

#[test]
fn split_components_reconstruct_full_propagator() {
    let (m, fam) = ks_family();
    let n_f = 15;
    let periods = 16usize;
    let samples = 48usize;
    let g = gaussian_field(periods, samples, 1.0);
    let t = 3.0;
    let full = propagate_linear(&m, &fam.anchor, g.view(), periods, t, n_f).unwrap();

    let sp = split_propagator(&m, &fam, g.view(), periods, t, n_f, SplitMode::TwoTerm, None)
        .unwrap();
    assert!(sp.mean.is_none());
    let rec = &sp.principal + &sp.residual;
    assert!(max_abs(&(&rec - &full)) <= 1e-10);

    let spr = split_propagator(&m, &fam, g.view(), periods, t, n_f, SplitMode::Refined, None)
        .unwrap();
    let rec = &spr.principal + spr.mean.as_ref().unwrap() + &spr.residual;
    assert!(max_abs(&(&rec - &full)) <= 1e-10);

    // Two-term principal part is the profile derivative times the scalar
    // phase channel.
    let nxb = periods * samples;
    let upb = grid::resample(fam.anchor.u_prime().row(0), samples);
    let phase = sp.s_p.row(sp.s_p.nrows() - 1);
    for p in 0..nxb {
        let want = upb[p % samples] * phase[p];
        assert!((sp.principal[[0, p]] - want).abs() <= 1e-10);
    }
    // The phase channel has Fourier support inside the cutoff.
    let row: Vec<Complex64> = phase.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    let hat = grid::fft(&row);
    let cut = (sp.xi0 / (TAU / periods as f64)).ceil() as i64;
    for (j, z) in hat.iter().enumerate() {
        let js = if j <= nxb / 2 {
            j as i64
        } else {
            j as i64 - nxb as i64
        };
        if js.abs() > cut {
            assert!(z.norm() <= 1e-12, "phase content {:.2e} at mode {js}", z.norm());
        }
    }
}

#[test]
fn phase_channel_decay_rate() {
    // For mean-free localized data the differentiated phase channel decays
    // like (1+t)^(−3/4) in L² once the diffusive scale dominates the cutoff.
    let (m, fam) = ks_family();
    let n_f = 15;
    let periods = 256usize;
    let samples = 48usize;
    let nxb = periods * samples;
    let sig = 0.4f64;
    let mut g = Array2::<f64>::zeros((1, nxb));
    for p in 0..nxb {
        let x = p as f64 * periods as f64 / nxb as f64 - periods as f64 / 2.0;
        g[[0, p]] = -(x / (sig * sig)) * (-x * x / (2.0 * sig * sig)).exp();
    }
    let mut logs: Vec<(f64, f64)> = Vec::new();
    for &t in &[2048.0f64, 4096.0, 8192.0, 16384.0] {
        let sp = split_propagator(&m, &fam, g.view(), periods, t, n_f, SplitMode::TwoTerm, None)
            .unwrap();
        let phase = sp.s_p.row(sp.s_p.nrows() - 1).to_owned();
        let dphase = grid::deriv_rows(
            phase.broadcast((1, nxb)).unwrap(),
            1,
            periods as f64,
        );
        let h = periods as f64 / nxb as f64;
        let l2 = (dphase.iter().map(|&x| x * x).sum::<f64>() * h).sqrt();
        logs.push(((1.0 + t).ln(), l2.ln()));
    }
    let n = logs.len() as f64;
    let sx: f64 = logs.iter().map(|p| p.0).sum();
    let sy: f64 = logs.iter().map(|p| p.1).sum();
    let sxx: f64 = logs.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = logs.iter().map(|p| p.0 * p.1).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    assert!(
        (slope + 0.75).abs() <= 0.1,
        "measured decay exponent {slope:.4}"
    );
}

// --- Properties -------------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn transform_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, seed in 0u64..1000) {
        let periods = 8usize;
        let samples = 16usize;
        let nxb = periods * samples;
        let mut rng = seed;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng >> 33) as f64 / (1u64 << 31) as f64 - 1.0
        };
        let f = Array2::from_shape_fn((1, nxb), |_| next());
        let g = Array2::from_shape_fn((1, nxb), |_| next());
        let combo = f.mapv(|x| a * x) + &g.mapv(|x| b * x);
        let bf = bloch_transform(f.view(), periods, 7).unwrap();
        let bg = bloch_transform(g.view(), periods, 7).unwrap();
        let bc = bloch_transform(combo.view(), periods, 7).unwrap();
        for m in 0..periods {
            let lin = bf.coeffs[m].mapv(|z| z * a) + &bg.coeffs[m].mapv(|z| z * b);
            let gap = (&bc.coeffs[m] - &lin).iter().fold(0.0f64, |acc, z| acc.max(z.norm()));
            prop_assert!(gap <= 1e-12);
        }
    }

    #[test]
    fn band_limited_round_trip(seed in 0u64..1000) {
        // Data with per-period modes inside the window survive the
        // transform exactly.
        let periods = 8usize;
        let samples = 16usize;
        let n_f = 7usize;
        let nxb = periods * samples;
        let mut rng = seed;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng >> 33) as f64 / (1u64 << 31) as f64 - 1.0
        };
        let mut g = Array2::zeros((1, nxb));
        for h in 1..=(n_f * periods / 2) {
            let (ca, cb) = (next(), next());
            for p in 0..nxb {
                let x = p as f64 / nxb as f64;
                g[[0, p]] += ca * (TAU * h as f64 * x).cos() + cb * (TAU * h as f64 * x).sin();
            }
        }
        let bt = bloch_transform(g.view(), periods, n_f).unwrap();
        let back = bloch_synthesis(&bt);
        let scale = max_abs(&g).max(1.0);
        prop_assert!(max_abs(&(&back - &g)) <= 1e-10 * scale);
    }
}
