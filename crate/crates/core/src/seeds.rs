//! Anchor-wave construction for the built-in models.
//!
//! Each builder produces a converged [`WaveProfile`] near the model's
//! primary bifurcation (or on its stable band) from a closed-form initial
//! guess, encapsulating the seeding strategy that works for that family:
//!
//! * `swift_hohenberg` / `benard_marangoni`: direct Newton from the
//!   weakly-nonlinear cosine `2ε/√3·cos(2πx)` at the critical wavenumber.
//! * `kuramoto_sivashinsky`: direct Newton from `2.5·sin(2πx)` at the
//!   requested wavenumber; the cellular branch is strongly attracting on
//!   `K = 2πk ∈ [0.77, 0.95]`.
//! * `viscoelasticity`: an amplitude-continuation ladder from the
//!   bifurcation point, because the branch is steep in wavenumber there.
//! * `constant_state`: the trivial wave of any model, with the speed pinned
//!   to the characteristic for scalar fluxes.

use ndarray::{Array1, Array2};

use crate::error::CoreError;
use crate::grid;
use crate::model::ModelSpec;
use crate::profile::{
    solve_profile, solve_profile_amplitude, Constraint, SolveOptions, WaveProfile,
};

const TAU: f64 = 2.0 * std::f64::consts::PI;

/// Single-harmonic guess `u_comp = mean + amp·cos(2πx)` (or sin), zeros
/// elsewhere.
pub fn harmonic_guess(
    model: &ModelSpec,
    nx: usize,
    comp: usize,
    mean: f64,
    amp: f64,
    use_sin: bool,
    k: f64,
    c: f64,
) -> WaveProfile {
    let x = grid::points(nx, 1.0);
    let mut u = Array2::zeros((model.n, nx));
    for i in 0..nx {
        let phase = TAU * x[i];
        u[[comp, i]] = mean + amp * if use_sin { phase.sin() } else { phase.cos() };
    }
    WaveProfile::guess(model, u, k, c)
}

/// Mean levels used by the anchor builders: zero except for the
/// viscoelastic strain, which sits at the reference stretch 1.
fn anchor_means(model: &ModelSpec) -> Array1<f64> {
    let n_c = model.n_conserved();
    let mut m = Array1::zeros(n_c);
    if model.name == "viscoelasticity" {
        m[0] = 1.0;
    }
    m
}

/// Newton settings shared by the anchor builders. The tolerance sits just
/// above the roundoff floor of fourth-order operators on fine grids.
fn anchor_opts() -> SolveOptions {
    SolveOptions { tol: 2e-10, max_iter: 80 }
}

/// Swift–Hohenberg roll at onset: `2ε/√3·cos(2πx)`, `k = 1/2π`, `c = 0`,
/// where `ε = √r`.
pub fn swift_hohenberg_anchor(model: &ModelSpec, nx: usize) -> Result<WaveProfile, CoreError> {
    let r = *model.params.get("r").unwrap_or(&0.04);
    let eps = r.max(0.0).sqrt();
    let guess = harmonic_guess(model, nx, 0, 0.0, 2.0 * eps / 3f64.sqrt(), false, 1.0 / TAU, 0.0);
    solve_profile(model, &guess, &Constraint::Mean(anchor_means(model)), &anchor_opts())
}

/// Bénard–Marangoni roll at onset: same cosine recipe on the first
/// component with the conserved components at rest.
pub fn benard_marangoni_anchor(model: &ModelSpec, nx: usize) -> Result<WaveProfile, CoreError> {
    let eps = *model.params.get("epsilon").unwrap_or(&0.05);
    let guess = harmonic_guess(model, nx, 0, 0.0, 2.0 * eps / 3f64.sqrt(), false, 1.0 / TAU, 0.0);
    solve_profile(model, &guess, &Constraint::Mean(anchor_means(model)), &anchor_opts())
}

/// Kuramoto–Sivashinsky cell at wavenumber `K = 2πk`. The stable band is
/// roughly `K ∈ [0.77, 0.84]`; the seed converges on `[0.77, 0.95]`.
///
/// The Newton tolerance is above the default: the residual of the O(5)
/// amplitude wave bottoms out near `3e-11` from roundoff in the fourth
/// derivative.
pub fn kuramoto_sivashinsky_anchor(
    model: &ModelSpec,
    nx: usize,
    big_k: f64,
) -> Result<WaveProfile, CoreError> {
    let guess = harmonic_guess(model, nx, 0, 0.0, 2.5, true, big_k / TAU, 0.0);
    let opts = anchor_opts();
    solve_profile(model, &guess, &Constraint::Mean(anchor_means(model)), &opts)
}

/// Viscoelastic wave grown by amplitude continuation from the bifurcation
/// at stretch 1, wavenumber `1/(2πε)`. `target_amp` is the cosine
/// coefficient of the strain component; values up to ~0.3 are reachable.
pub fn viscoelasticity_anchor(
    model: &ModelSpec,
    nx: usize,
    target_amp: f64,
) -> Result<WaveProfile, CoreError> {
    let eps = *model.params.get("eps1").unwrap_or(&1.0);
    let kb = 1.0 / (TAU * eps);
    let opts = anchor_opts();
    let constraint = Constraint::Mean(anchor_means(model));
    let mut a = (0.02f64).min(target_amp);
    let guess = harmonic_guess(model, nx, 0, 1.0, a, false, kb, 0.0);
    let mut cur = solve_profile_amplitude(model, &guess, &constraint, 0, a, &opts)?;
    let mut da = 0.02f64;
    while a < target_amp {
        let at = (a + da).min(target_amp);
        match solve_profile_amplitude(model, &cur, &constraint, 0, at, &opts) {
            Ok(w) => {
                cur = w;
                a = at;
                da = (da * 1.5).min(0.1);
            }
            Err(e) => {
                da *= 0.5;
                if da < 1e-5 {
                    return Err(CoreError::NewtonDiverged(format!(
                        "amplitude ladder stalled at {a:.4} toward {target_amp}: {e}"
                    )));
                }
            }
        }
    }
    Ok(cur)
}

/// Constant state with the given conserved means (a trivial wave).
pub fn constant_state(
    model: &ModelSpec,
    nx: usize,
    means: &Array1<f64>,
    k: f64,
) -> Result<WaveProfile, CoreError> {
    let cons = model.conserved_indices();
    if means.len() != cons.len() {
        return Err(CoreError::DimensionMismatch(
            "one mean per conserved component required".into(),
        ));
    }
    let mut u = Array2::zeros((model.n, nx));
    for (ci, &i) in cons.iter().enumerate() {
        u.row_mut(i).fill(means[ci]);
    }
    let c0 = if model.n == 1 {
        model.flux_jacobian(u.column(0))?[[0, 0]]
    } else {
        0.0
    };
    let guess = WaveProfile::guess(model, u, k, c0);
    solve_profile(model, &guess, &Constraint::Mean(means.clone()), &anchor_opts())
}

/// Default anchor wave for a built-in model, used by the command-line
/// pipelines when no explicit seed is configured.
pub fn default_anchor(model: &ModelSpec, nx: usize) -> Result<WaveProfile, CoreError> {
    match model.name.as_str() {
        "swift_hohenberg" => swift_hohenberg_anchor(model, nx),
        "benard_marangoni" => benard_marangoni_anchor(model, nx),
        "kuramoto_sivashinsky" => kuramoto_sivashinsky_anchor(model, nx, 0.8),
        "viscoelasticity" => viscoelasticity_anchor(model, nx, 0.25),
        "burgers" => constant_state(model, nx, &Array1::from(vec![0.3]), 0.5),
        "heat" => constant_state(model, nx, &Array1::from(vec![]), 1.0),
        other => Err(CoreError::UnknownModel(other.into())),
    }
}
