//! Periodic traveling-wave profiles and locally parametrized wave families.
//!
//! Profiles are computed in the co-moving, period-rescaled frame: a wave of
//! wavenumber `k` and speed `c` is a 1-periodic state `U` on `[0,1)` solving
//!
//! `k (f(U) − c U)' + g(U) + P(k∂) U − k² (B(U) U')' = 0`.
//!
//! The solver is Fourier collocation with a bordered Newton iteration: grid
//! values plus the speed are unknowns, conserved components carry mean
//! constraints, and the translation degeneracy is fixed by the phase
//! condition `⟨U − U_ref, U_ref'⟩ = 0`. Families are natural-parameter
//! continuations over a tensor `(M, k)` patch with all nodes sharing the
//! anchor's phase gauge, so centered differences across the patch and the
//! variational (bordered linear solve) route measure derivatives in the same
//! gauge.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::grid;
use crate::linalg::solve_real;
use crate::model::{ModelRef, ModelSpec};

/// One converged periodic traveling wave on the unit-period grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WaveProfile {
    pub model: ModelRef,
    /// Grid values, `n × N_x`, on equispaced points of `[0,1)`.
    pub u: Array2<f64>,
    /// Wavenumber (inverse un-scaled period).
    pub k: f64,
    /// Wave speed.
    pub c: f64,
    /// Means of the conserved components.
    pub m: Array1<f64>,
    /// Integration constants `q = cM − ⟨f⟩` of the conserved components.
    pub q: Array1<f64>,
    /// Max-norm of the profile-equation residual at acceptance.
    pub residual_norm: f64,
}

impl WaveProfile {
    /// Builds an (unconverged) guess from grid values.
    pub fn guess(model: &ModelSpec, u: Array2<f64>, k: f64, c: f64) -> WaveProfile {
        let m = conserved_means(model, u.view());
        WaveProfile {
            model: model.reference(),
            u,
            k,
            c,
            m,
            q: Array1::zeros(model.n_conserved()),
            residual_norm: f64::INFINITY,
        }
    }

    pub fn nx(&self) -> usize {
        self.u.ncols()
    }

    pub fn n(&self) -> usize {
        self.u.nrows()
    }

    /// Spectral derivative `U'` of the profile.
    pub fn u_prime(&self) -> Array2<f64> {
        grid::deriv_rows(self.u.view(), 1, 1.0)
    }

    /// Peak-to-peak amplitude over all components.
    pub fn amplitude(&self) -> f64 {
        self.u
            .outer_iter()
            .map(|row| {
                row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x))
                    - row.iter().fold(f64::INFINITY, |a, &x| a.min(x))
            })
            .fold(0.0, f64::max)
    }

    /// Mean flux `⟨f(U)⟩` over the period.
    pub fn mean_flux(&self, model: &ModelSpec) -> Result<Array1<f64>, CoreError> {
        let fx = pointwise_flux(model, self.u.view())?;
        Ok(Array1::from_iter(
            fx.outer_iter().map(|row| grid::mean(row.view())),
        ))
    }
}

/// Mean constraint alternatives for [`solve_profile`].
#[derive(Debug, Clone)]
pub enum Constraint {
    /// Fix the conserved-component means to the given values.
    Mean(Array1<f64>),
    /// Fix the integration constants `q = cM − ⟨f⟩` instead.
    Q(Array1<f64>),
}

fn conserved_means(model: &ModelSpec, u: ArrayView2<'_, f64>) -> Array1<f64> {
    Array1::from_iter(
        model
            .conserved_indices()
            .into_iter()
            .map(|i| grid::mean(u.row(i))),
    )
}

fn pointwise_flux(model: &ModelSpec, u: ArrayView2<'_, f64>) -> Result<Array2<f64>, CoreError> {
    let (n, nx) = u.dim();
    let mut out = Array2::zeros((n, nx));
    for x in 0..nx {
        let f = model.evaluate_flux(u.column(x))?;
        out.column_mut(x).assign(&f);
    }
    Ok(out)
}

fn pointwise_source(model: &ModelSpec, u: ArrayView2<'_, f64>) -> Result<Array2<f64>, CoreError> {
    let (n, nx) = u.dim();
    let mut out = Array2::zeros((n, nx));
    for x in 0..nx {
        let g = model.evaluate_source(u.column(x))?;
        out.column_mut(x).assign(&g);
    }
    Ok(out)
}

/// Steady profile-equation residual `k(f−cU)' + g + P(k∂)U − k²(B U')'`,
/// evaluated pseudospectrally; `n × N_x`.
pub fn profile_residual(
    model: &ModelSpec,
    u: ArrayView2<'_, f64>,
    k: f64,
    c: f64,
) -> Result<Array2<f64>, CoreError> {
    let (n, nx) = u.dim();
    let f = pointwise_flux(model, u)?;
    let conv = &f - &u.mapv(|x| c * x);
    let mut r = grid::deriv_rows(conv.view(), 1, 1.0).mapv(|x| k * x);
    r += &pointwise_source(model, u)?;
    for i in 0..n {
        for (order, &p) in model.linear_op[i].iter().enumerate() {
            if p != 0.0 {
                if order == 0 {
                    r.row_mut(i).scaled_add(p, &u.row(i));
                } else {
                    let d = grid::deriv(u.row(i), order as u32, 1.0);
                    r.row_mut(i).scaled_add(p * k.powi(order as i32), &d);
                }
            }
        }
    }
    // Viscous part −k²(B(U)U')'. With constant B this is applied as a
    // spectral second derivative so the Nyquist mode stays controlled
    // (composing two first derivatives would annihilate it and leave a
    // spurious discrete kernel direction).
    if let Some(b) = &model.constant_viscosity {
        let upp = grid::deriv_rows(u, 2, 1.0);
        let mut w = Array2::zeros((n, nx));
        for x in 0..nx {
            w.column_mut(x).assign(&b.dot(&upp.column(x)));
        }
        r -= &w.mapv(|x| k * k * x);
    } else {
        let up = grid::deriv_rows(u, 1, 1.0);
        let mut w = Array2::zeros((n, nx));
        for x in 0..nx {
            let b = model.evaluate_viscosity(u.column(x))?;
            w.column_mut(x).assign(&b.dot(&up.column(x)));
        }
        r -= &grid::deriv_rows(w.view(), 1, 1.0).mapv(|x| k * k * x);
    }
    Ok(r)
}

/// Explicit k-derivative of the residual at fixed `(U, c)`. Applied at a
/// converged profile this equals `−L⁽¹⁾U'` (the first Bloch expansion
/// operator acting on the translation mode).
pub fn residual_dk(
    model: &ModelSpec,
    u: ArrayView2<'_, f64>,
    k: f64,
    c: f64,
) -> Result<Array2<f64>, CoreError> {
    let (n, nx) = u.dim();
    let f = pointwise_flux(model, u)?;
    let conv = &f - &u.mapv(|x| c * x);
    let mut r = grid::deriv_rows(conv.view(), 1, 1.0);
    for i in 0..n {
        for (order, &p) in model.linear_op[i].iter().enumerate() {
            if p != 0.0 && order > 0 {
                let d = grid::deriv(u.row(i), order as u32, 1.0);
                r.row_mut(i)
                    .scaled_add(p * order as f64 * k.powi(order as i32 - 1), &d);
            }
        }
    }
    if let Some(b) = &model.constant_viscosity {
        let upp = grid::deriv_rows(u, 2, 1.0);
        let mut w = Array2::zeros((n, nx));
        for x in 0..nx {
            w.column_mut(x).assign(&b.dot(&upp.column(x)));
        }
        r -= &w.mapv(|x| 2.0 * k * x);
    } else {
        let up = grid::deriv_rows(u, 1, 1.0);
        let mut w = Array2::zeros((n, nx));
        for x in 0..nx {
            let b = model.evaluate_viscosity(u.column(x))?;
            w.column_mut(x).assign(&b.dot(&up.column(x)));
        }
        r -= &grid::deriv_rows(w.view(), 1, 1.0).mapv(|x| 2.0 * k * x);
    }
    Ok(r)
}

/// Dense Jacobian of the grid residual with respect to the grid values;
/// equals `−L₀` in the discrete collocation basis. Exact for constant
/// viscosity; models with state-dependent `B` additionally get the
/// `(dB(U)·)U'` linearization term.
pub fn residual_jacobian_u(
    model: &ModelSpec,
    u: ArrayView2<'_, f64>,
    k: f64,
    c: f64,
) -> Result<Array2<f64>, CoreError> {
    let (n, nx) = u.dim();
    let d1 = grid::deriv_matrix(nx, 1, 1.0);
    let mut jac = Array2::zeros((n * nx, n * nx));

    // Pointwise coefficient samples.
    let mut df = vec![Array2::zeros((n, n)); nx];
    let mut dg = vec![Array2::zeros((n, n)); nx];
    let mut bb = vec![Array2::zeros((n, n)); nx];
    for x in 0..nx {
        df[x] = model.flux_jacobian(u.column(x))?;
        dg[x] = model.source_jacobian(u.column(x))?;
        bb[x] = model.evaluate_viscosity(u.column(x))?;
    }
    // dB(U)[·]U' multiplier for quasilinear viscosity (zero when B constant).
    let up = grid::deriv_rows(u, 1, 1.0);
    let mut db_up: Option<Vec<Array2<f64>>> = None;
    if model.constant_viscosity.is_none() {
        let mut out = vec![Array2::zeros((n, n)); nx];
        for x in 0..nx {
            let ux = u.column(x).to_owned();
            let norm = ux.iter().map(|v| v * v).sum::<f64>().sqrt();
            let h = 1e-5 * (1.0 + norm);
            for j in 0..n {
                let mut upj = ux.clone();
                let mut umj = ux.clone();
                upj[j] += h;
                umj[j] -= h;
                let dbj = (model.evaluate_viscosity(upj.view())?
                    - model.evaluate_viscosity(umj.view())?)
                    / (2.0 * h);
                let col = dbj.dot(&up.column(x));
                for i in 0..n {
                    out[x][[i, j]] += col[i];
                }
            }
        }
        db_up = Some(out);
    }

    for i in 0..n {
        for j in 0..n {
            let mut block = Array2::zeros((nx, nx));
            // k D diag(df_ij − c δ_ij)
            for col in 0..nx {
                let coef = k * (df[col][[i, j]] - if i == j { c } else { 0.0 });
                if coef != 0.0 {
                    for row in 0..nx {
                        block[[row, col]] += coef * d1[[row, col]];
                    }
                }
            }
            // diag(dg_ij)
            for x in 0..nx {
                block[[x, x]] += dg[x][[i, j]];
            }
            // Viscous block: −k² B_ij D² for constant viscosity (spectral
            // second derivative, matching the residual), otherwise
            // −k² D (diag(B_ij) D + diag((dB·)U')_ij).
            if let Some(b) = &model.constant_viscosity {
                if b[[i, j]] != 0.0 {
                    let d2 = grid::deriv_matrix(nx, 2, 1.0);
                    block.scaled_add(-k * k * b[[i, j]], &d2);
                }
            } else {
                let mut inner = Array2::zeros((nx, nx));
                for row in 0..nx {
                    let bij = bb[row][[i, j]];
                    if bij != 0.0 {
                        for col in 0..nx {
                            inner[[row, col]] += bij * d1[[row, col]];
                        }
                    }
                    if let Some(dbu) = &db_up {
                        inner[[row, row]] += dbu[row][[i, j]];
                    }
                }
                if inner.iter().any(|&x| x != 0.0) {
                    block.scaled_add(-k * k, &d1.dot(&inner));
                }
            }
            // δ_ij P_i(kD)
            if i == j {
                for (order, &p) in model.linear_op[i].iter().enumerate() {
                    if p != 0.0 {
                        if order == 0 {
                            for x in 0..nx {
                                block[[x, x]] += p;
                            }
                        } else {
                            let dm = grid::deriv_matrix(nx, order as u32, 1.0);
                            block.scaled_add(p * k.powi(order as i32), &dm);
                        }
                    }
                }
            }
            jac.slice_mut(s![i * nx..(i + 1) * nx, j * nx..(j + 1) * nx])
                .assign(&block);
        }
    }
    Ok(jac)
}


fn unflatten(v: ArrayView1<'_, f64>, n: usize, nx: usize) -> Array2<f64> {
    Array2::from_shape_vec((n, nx), v.to_vec()).unwrap()
}

/// Options shared by the profile solvers.
#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-11,
            max_iter: 40,
        }
    }
}

/// Newton solve at fixed `k`, with the phase referenced to `phase_ref`
/// (pass the guess itself for a fresh solve).
pub fn solve_profile_ref(
    model: &ModelSpec,
    guess: &WaveProfile,
    phase_ref: &WaveProfile,
    constraint: &Constraint,
    opts: &SolveOptions,
) -> Result<WaveProfile, CoreError> {
    let n = model.n;
    let nx = guess.nx();
    if guess.n() != n {
        return Err(CoreError::DimensionMismatch(
            "guess has wrong component count".into(),
        ));
    }
    let k = guess.k;
    let cons_idx = model.conserved_indices();
    let n_c = cons_idx.len();
    let ref_prime = phase_ref.u_prime();
    let ref_prime_norm = grid::lp_norm_rows(ref_prime.view(), 2.0, 1.0);
    let constant_profile = ref_prime_norm < 1e-10;

    let mut u = guess.u.clone();
    let mut c = guess.c;
    let mut last_res = f64::INFINITY;
    let mut grew = 0usize;

    for _iter in 0..opts.max_iter {
        let r = profile_residual(model, u.view(), k, c)?;
        let res_norm = r.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
        // Assemble the bordered system F(z) = 0, z = (U, c).
        let dim = n * nx + 1;
        let mut rhs = Array1::zeros(dim);
        let mut full_res = res_norm;

        // Residual rows with conserved-component constraints folded in as
        // rank-one additions (their plain means vanish identically).
        let means = conserved_means(model, u.view());
        let mflux = Array1::from_iter(
            pointwise_flux(model, u.view())?
                .outer_iter()
                .map(|row| grid::mean(row.view())),
        );
        let mut cons_gap = Array1::zeros(n_c);
        for (ci, &i) in cons_idx.iter().enumerate() {
            cons_gap[ci] = match constraint {
                Constraint::Mean(m) => means[ci] - m[ci],
                Constraint::Q(qt) => c * means[ci] - mflux[i] - qt[ci],
            };
            full_res = full_res.max(cons_gap[ci].abs());
        }
        // Phase gap.
        let phase_gap = if constant_profile {
            if n == 1 {
                // Constant-state convention: pin the speed to the
                // characteristic df(M) (translation degeneracy; see module
                // docs).
                c - model.flux_jacobian(u.column(0))?[[0, 0]]
            } else {
                0.0
            }
        } else {
            grid::inner_rows(
                (&u - &phase_ref.u).view(),
                ref_prime.view(),
            )
        };
        full_res = full_res.max(phase_gap.abs());

        if full_res <= opts.tol {
            let means = conserved_means(model, u.view());
            let q = Array1::from_iter(
                cons_idx
                    .iter()
                    .enumerate()
                    .map(|(ci, &i)| c * means[ci] - mflux[i]),
            );
            return Ok(WaveProfile {
                model: model.reference(),
                u,
                k,
                c,
                m: means,
                q,
                residual_norm: res_norm,
            });
        }
        if !full_res.is_finite() || (full_res > 4.0 * last_res && full_res > 1e3 * opts.tol) {
            grew += 1;
            if grew >= 2 || !full_res.is_finite() {
                return Err(CoreError::NewtonDiverged(format!(
                    "residual grew to {full_res:.3e}"
                )));
            }
        } else {
            grew = 0;
        }
        last_res = full_res.min(last_res);

        // Jacobian.
        let mut jac = Array2::zeros((dim, dim));
        let ju = residual_jacobian_u(model, u.view(), k, c)?;
        jac.slice_mut(s![..n * nx, ..n * nx]).assign(&ju);
        // ∂R/∂c = −k U'.
        let uprime = grid::deriv_rows(u.view(), 1, 1.0);
        for i in 0..n {
            for x in 0..nx {
                jac[[i * nx + x, n * nx]] = -k * uprime[[i, x]];
            }
        }
        // Constraint rank-one additions on conserved rows.
        for (ci, &i) in cons_idx.iter().enumerate() {
            match constraint {
                Constraint::Mean(_) => {
                    for x in 0..nx {
                        for y in 0..nx {
                            jac[[i * nx + x, i * nx + y]] += 1.0 / nx as f64;
                        }
                    }
                }
                Constraint::Q(_) => {
                    // q_i = c⟨U_i⟩ − ⟨f_i⟩:  ∂/∂U_j(y) = (cδ_ij − df_ij(y))/nx, ∂/∂c = ⟨U_i⟩.
                    for y in 0..nx {
                        let dfy = model.flux_jacobian(u.column(y))?;
                        for j in 0..n {
                            let val = (if i == j { c } else { 0.0 } - dfy[[i, j]]) / nx as f64;
                            for x in 0..nx {
                                jac[[i * nx + x, j * nx + y]] += val;
                            }
                        }
                    }
                    for x in 0..nx {
                        jac[[i * nx + x, n * nx]] += means[ci];
                    }
                }
            }
        }
        // Phase row.
        if constant_profile {
            if n == 1 {
                let d2f = model.flux_hessian(u.column(0))?[0][[0, 0]];
                for y in 0..nx {
                    jac[[n * nx, y]] = -d2f / nx as f64;
                }
                jac[[n * nx, n * nx]] = 1.0;
            } else {
                jac[[n * nx, n * nx]] = 1.0;
            }
        } else {
            for i in 0..n {
                for x in 0..nx {
                    jac[[n * nx, i * nx + x]] = ref_prime[[i, x]] / nx as f64;
                }
            }
        }

        // Right-hand side = −F.
        for i in 0..n {
            for x in 0..nx {
                rhs[i * nx + x] = -r[[i, x]];
            }
        }
        for (ci, &i) in cons_idx.iter().enumerate() {
            for x in 0..nx {
                rhs[i * nx + x] -= cons_gap[ci];
            }
        }
        rhs[n * nx] = -phase_gap;

        let step = solve_real(&jac, &rhs).map_err(|e| {
            CoreError::SingularJacobian(format!("bordered profile system: {e}"))
        })?;
        if step.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::SingularJacobian(
                "bordered profile system produced non-finite step".into(),
            ));
        }
        let du = unflatten(step.slice(s![..n * nx]), n, nx);
        // Backtracking: accept the largest damping factor that does not
        // increase the raw residual (full steps near the solution).
        let mut lambda = 1.0;
        for _ in 0..5 {
            let ut = &u + &du.mapv(|x| lambda * x);
            let ct = c + lambda * step[n * nx];
            let rt = profile_residual(model, ut.view(), k, ct)?;
            let rt_norm = rt.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
            if rt_norm.is_finite() && (rt_norm < res_norm || res_norm <= opts.tol) {
                break;
            }
            lambda *= 0.5;
        }
        u += &du.mapv(|x| lambda * x);
        c += lambda * step[n * nx];
    }
    Err(CoreError::NewtonDiverged(format!(
        "no convergence in {} iterations (residual {last_res:.3e})",
        opts.max_iter
    )))
}

/// Newton solve of the profile equation at fixed wavenumber. The phase is
/// referenced to the guess.
pub fn solve_profile(
    model: &ModelSpec,
    guess: &WaveProfile,
    constraint: &Constraint,
    opts: &SolveOptions,
) -> Result<WaveProfile, CoreError> {
    solve_profile_ref(model, guess, &guess.clone(), constraint, opts)
}

/// Amplitude-constrained variant used to seed oscillatory families near a
/// bifurcation point: the wavenumber joins the unknowns and the amplitude of
/// the chosen Fourier mode of one component is prescribed instead.
pub fn solve_profile_amplitude(
    model: &ModelSpec,
    guess: &WaveProfile,
    constraint: &Constraint,
    component: usize,
    amplitude: f64,
    opts: &SolveOptions,
) -> Result<WaveProfile, CoreError> {
    let n = model.n;
    let nx = guess.nx();
    let cons_idx = model.conserved_indices();
    let n_c = cons_idx.len();
    let tau = 2.0 * std::f64::consts::PI;
    let cosx = grid::points(nx, 1.0).mapv(|x| (tau * x).cos());
    let ref_prime = guess.u_prime();

    let mut u = guess.u.clone();
    let mut c = guess.c;
    let mut k = guess.k;
    let mut last_res = f64::INFINITY;

    for _ in 0..opts.max_iter {
        let r = profile_residual(model, u.view(), k, c)?;
        let means = conserved_means(model, u.view());
        let mut full_res = r.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
        let mut cons_gap = Array1::zeros(n_c);
        if let Constraint::Mean(m) = constraint {
            for ci in 0..n_c {
                cons_gap[ci] = means[ci] - m[ci];
                full_res = full_res.max(cons_gap[ci].abs());
            }
        } else {
            return Err(CoreError::UnsupportedStructure(
                "amplitude-constrained seeding requires a mean constraint".into(),
            ));
        }
        let phase_gap = grid::inner_rows((&u - &guess.u).view(), ref_prime.view());
        // Amplitude condition: 2⟨U_comp, cos(2πx)⟩ = amplitude.
        let amp_gap = 2.0 * grid::inner(u.row(component), cosx.view()) - amplitude;
        full_res = full_res.max(phase_gap.abs()).max(amp_gap.abs());

        if full_res <= opts.tol {
            let mflux = Array1::from_iter(
                pointwise_flux(model, u.view())?
                    .outer_iter()
                    .map(|row| grid::mean(row.view())),
            );
            let q = Array1::from_iter(
                cons_idx
                    .iter()
                    .enumerate()
                    .map(|(ci, &i)| c * means[ci] - mflux[i]),
            );
            let res_norm = r.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
            return Ok(WaveProfile {
                model: model.reference(),
                u,
                k,
                c,
                m: means,
                q,
                residual_norm: res_norm,
            });
        }
        if !full_res.is_finite() || (full_res > 4.0 * last_res && full_res > 1e3 * opts.tol) {
            return Err(CoreError::NewtonDiverged(format!(
                "amplitude-constrained solve: residual grew to {full_res:.3e}"
            )));
        }
        last_res = full_res.min(last_res);

        let dim = n * nx + 2;
        let mut jac = Array2::zeros((dim, dim));
        let ju = residual_jacobian_u(model, u.view(), k, c)?;
        jac.slice_mut(s![..n * nx, ..n * nx]).assign(&ju);
        let uprime = grid::deriv_rows(u.view(), 1, 1.0);
        let rk = residual_dk(model, u.view(), k, c)?;
        for i in 0..n {
            for x in 0..nx {
                jac[[i * nx + x, n * nx]] = -k * uprime[[i, x]];
                jac[[i * nx + x, n * nx + 1]] = rk[[i, x]];
            }
        }
        for &i in &cons_idx {
            for x in 0..nx {
                for y in 0..nx {
                    jac[[i * nx + x, i * nx + y]] += 1.0 / nx as f64;
                }
            }
        }
        for i in 0..n {
            for x in 0..nx {
                jac[[n * nx, i * nx + x]] = ref_prime[[i, x]] / nx as f64;
                jac[[n * nx + 1, i * nx + x]] =
                    if i == component { 2.0 * cosx[x] / nx as f64 } else { 0.0 };
            }
        }

        let mut rhs = Array1::zeros(dim);
        for i in 0..n {
            for x in 0..nx {
                rhs[i * nx + x] = -r[[i, x]];
            }
        }
        for (ci, &i) in cons_idx.iter().enumerate() {
            for x in 0..nx {
                rhs[i * nx + x] -= cons_gap[ci];
            }
        }
        rhs[n * nx] = -phase_gap;
        rhs[n * nx + 1] = -amp_gap;

        let step = solve_real(&jac, &rhs).map_err(|e| {
            CoreError::SingularJacobian(format!("amplitude-bordered system: {e}"))
        })?;
        let du = unflatten(step.slice(s![..n * nx]), n, nx);
        let res_now = r.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
        let mut lambda = 1.0;
        for _ in 0..5 {
            let ut = &u + &du.mapv(|x| lambda * x);
            let ct = c + lambda * step[n * nx];
            let kt = k + lambda * step[n * nx + 1];
            if kt > 0.0 {
                let rt = profile_residual(model, ut.view(), kt, ct)?;
                let rt_norm = rt.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
                if rt_norm.is_finite() && (rt_norm < res_now || res_now <= opts.tol) {
                    break;
                }
            }
            lambda *= 0.5;
        }
        u += &du.mapv(|x| lambda * x);
        c += lambda * step[n * nx];
        k += lambda * step[n * nx + 1];
        if k <= 0.0 {
            return Err(CoreError::NewtonDiverged("wavenumber left (0,∞)".into()));
        }
    }
    Err(CoreError::NewtonDiverged(
        "amplitude-constrained solve did not converge".into(),
    ))
}

/// A locally parametrized patch of waves around an anchor, with derivative
/// data. Axes are the conserved means (in component order) followed by the
/// wavenumber; the reaction-diffusion case (no conserved components) is a
/// `k`-only family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WaveFamily {
    pub model: ModelRef,
    pub anchor: WaveProfile,
    /// Parameter steps per axis (n_c mean steps, then δk).
    pub deltas: Vec<f64>,
    /// Half-widths per axis; axis a has `2*half_widths[a]+1` nodes.
    pub half_widths: Vec<usize>,
    /// Profiles in row-major order over the tensor grid.
    pub profiles: Vec<WaveProfile>,
    /// ∂U/∂M_j at the anchor, one `n × N_x` array per conserved component.
    pub du_dm: Vec<Array2<f64>>,
    /// ∂U/∂k at the anchor.
    pub du_dk: Option<Array2<f64>>,
    pub dc_dm: Array1<f64>,
    pub dc_dk: f64,
    /// Adjoint generalized null function ū^adj.
    pub u_adj: Option<Array2<f64>>,
    /// True once the `⟨ū^adj, ∂_k U⟩ = 0` gauge has been applied.
    pub normalized: bool,
}

impl WaveFamily {
    pub fn n_axes(&self) -> usize {
        self.half_widths.len()
    }

    fn strides(&self) -> Vec<usize> {
        let dims: Vec<usize> = self.half_widths.iter().map(|&h| 2 * h + 1).collect();
        let mut strides = vec![1usize; dims.len()];
        for a in (0..dims.len().saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * dims[a + 1];
        }
        strides
    }

    /// Profile at integer offsets from the anchor (each in `[-h, h]`).
    pub fn profile_at(&self, offsets: &[i64]) -> &WaveProfile {
        assert_eq!(offsets.len(), self.n_axes());
        let strides = self.strides();
        let mut idx = 0usize;
        for (a, &off) in offsets.iter().enumerate() {
            let h = self.half_widths[a] as i64;
            assert!(off.abs() <= h, "offset outside patch");
            idx += ((off + h) as usize) * strides[a];
        }
        &self.profiles[idx]
    }

    /// Tabulated speed at integer offsets.
    pub fn c_at(&self, offsets: &[i64]) -> f64 {
        self.profile_at(offsets).c
    }

    /// Centered second difference of `c` along two axes.
    pub fn d2c(&self, axis_a: usize, axis_b: usize) -> f64 {
        let na = self.n_axes();
        let zero = vec![0i64; na];
        if axis_a == axis_b {
            let mut p = zero.clone();
            let mut m = zero.clone();
            p[axis_a] = 1;
            m[axis_a] = -1;
            (self.c_at(&p) - 2.0 * self.c_at(&zero) + self.c_at(&m))
                / (self.deltas[axis_a] * self.deltas[axis_a])
        } else {
            let mut pp = zero.clone();
            let mut pm = zero.clone();
            let mut mp = zero.clone();
            let mut mm = zero;
            pp[axis_a] = 1;
            pp[axis_b] = 1;
            pm[axis_a] = 1;
            pm[axis_b] = -1;
            mp[axis_a] = -1;
            mp[axis_b] = 1;
            mm[axis_a] = -1;
            mm[axis_b] = -1;
            (self.c_at(&pp) - self.c_at(&pm) - self.c_at(&mp) + self.c_at(&mm))
                / (4.0 * self.deltas[axis_a] * self.deltas[axis_b])
        }
    }
}

/// Natural-parameter continuation over the `(M, k)` tensor patch. Every node
/// is seeded from its nearest converged neighbor (walking outward from the
/// anchor) and solved in the anchor's phase gauge; failures retry with up to
/// four step halvings along the seeding direction before reporting a fold.
pub fn continue_family(
    model: &ModelSpec,
    anchor: &WaveProfile,
    deltas: &[f64],
    half_widths: &[usize],
    opts: &SolveOptions,
) -> Result<WaveFamily, CoreError> {
    let n_c = model.n_conserved();
    if deltas.len() != n_c + 1 || half_widths.len() != n_c + 1 {
        return Err(CoreError::DimensionMismatch(format!(
            "expected {} patch axes (n_c + k), got {}/{}",
            n_c + 1,
            deltas.len(),
            half_widths.len()
        )));
    }
    let dims: Vec<usize> = half_widths.iter().map(|&h| 2 * h + 1).collect();
    let total: usize = dims.iter().product();
    let mut profiles: Vec<Option<WaveProfile>> = vec![None; total];

    let mut strides = vec![1usize; dims.len()];
    for a in (0..dims.len().saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * dims[a + 1];
    }
    let lin = |offs: &[i64]| -> usize {
        offs.iter()
            .enumerate()
            .map(|(a, &o)| ((o + half_widths[a] as i64) as usize) * strides[a])
            .sum()
    };

    let center = vec![0i64; dims.len()];
    profiles[lin(&center)] = Some(anchor.clone());

    // Enumerate offsets sorted by L1 distance from the center so each node
    // has a converged neighbor one step inward.
    let mut all_offsets: Vec<Vec<i64>> = Vec::with_capacity(total);
    {
        let mut off = vec![0i64; dims.len()];
        fn rec(a: usize, dims: &[usize], hw: &[usize], off: &mut Vec<i64>, out: &mut Vec<Vec<i64>>) {
            if a == dims.len() {
                out.push(off.clone());
                return;
            }
            for o in -(hw[a] as i64)..=(hw[a] as i64) {
                off[a] = o;
                rec(a + 1, dims, hw, off, out);
            }
        }
        rec(0, &dims, half_widths, &mut off, &mut all_offsets);
    }
    all_offsets.sort_by_key(|o| o.iter().map(|x| x.abs()).sum::<i64>());

    for offs in &all_offsets {
        if profiles[lin(offs)].is_some() {
            continue;
        }
        // Nearest converged neighbor: step one toward the center along the
        // axis with the largest offset.
        let mut seed_offs = offs.clone();
        let a_max = (0..offs.len())
            .max_by_key(|&a| offs[a].abs())
            .unwrap();
        seed_offs[a_max] -= offs[a_max].signum();
        let seed = profiles[lin(&seed_offs)]
            .as_ref()
            .expect("seed node converged before target")
            .clone();

        // Target parameters.
        let target_m = Array1::from_iter(
            (0..n_c).map(|j| anchor.m[j] + offs[j] as f64 * deltas[j]),
        );
        let target_k = anchor.k + offs[n_c] as f64 * deltas[n_c];

        let solved = solve_node(model, &seed, anchor, &target_m, target_k, opts, 0)?;
        profiles[lin(offs)] = Some(solved);
    }

    let profiles: Vec<WaveProfile> = profiles.into_iter().map(|p| p.unwrap()).collect();
    Ok(WaveFamily {
        model: model.reference(),
        anchor: anchor.clone(),
        deltas: deltas.to_vec(),
        half_widths: half_widths.to_vec(),
        profiles,
        du_dm: Vec::new(),
        du_dk: None,
        dc_dm: Array1::zeros(n_c),
        dc_dk: 0.0,
        u_adj: None,
        normalized: false,
    })
}

fn solve_node(
    model: &ModelSpec,
    seed: &WaveProfile,
    phase_ref: &WaveProfile,
    target_m: &Array1<f64>,
    target_k: f64,
    opts: &SolveOptions,
    depth: usize,
) -> Result<WaveProfile, CoreError> {
    let mut guess = seed.clone();
    guess.k = target_k;
    let attempt = solve_profile_ref(
        model,
        &guess,
        phase_ref,
        &Constraint::Mean(target_m.clone()),
        opts,
    );
    match attempt {
        Ok(p) => Ok(p),
        Err(CoreError::NewtonDiverged(_)) | Err(CoreError::SingularJacobian(_)) if depth < 4 => {
            // Step halving: insert a midpoint solve along the seeding segment.
            let mid_m = (&seed.m + target_m) / 2.0;
            let mid_k = (seed.k + target_k) / 2.0;
            let mid = solve_node(model, seed, phase_ref, &mid_m, mid_k, opts, depth + 1)?;
            solve_node(model, &mid, phase_ref, target_m, target_k, opts, depth + 1)
        }
        Err(CoreError::NewtonDiverged(e)) => Err(CoreError::FoldDetected(format!(
            "continuation failed after step halving at M={target_m}, k={target_k}: {e}"
        ))),
        Err(e) => Err(e),
    }
}

/// Derivative computation method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivativeMethod {
    /// Bordered linear solves of the variational equations.
    Variational,
    /// Centered differences across the patch.
    FiniteDifference,
}

/// Fills the derivative fields of a family (in place) by the requested
/// method. Both methods measure derivatives in the anchor's phase gauge and
/// agree to the patch truncation error.
pub fn family_derivatives(
    model: &ModelSpec,
    family: &mut WaveFamily,
    method: DerivativeMethod,
) -> Result<(), CoreError> {
    let n_c = model.n_conserved();
    let na = family.n_axes();
    let anchor = &family.anchor;
    let n = anchor.n();
    let nx = anchor.nx();

    match method {
        DerivativeMethod::FiniteDifference => {
            let mut du_dm = Vec::with_capacity(n_c);
            let mut dc_dm = Array1::zeros(n_c);
            let zero = vec![0i64; na];
            for j in 0..n_c {
                let mut p = zero.clone();
                let mut m = zero.clone();
                p[j] = 1;
                m[j] = -1;
                let up = &family.profile_at(&p).u;
                let um = &family.profile_at(&m).u;
                du_dm.push((up - um) / (2.0 * family.deltas[j]));
                dc_dm[j] = (family.c_at(&p) - family.c_at(&m)) / (2.0 * family.deltas[j]);
            }
            let mut p = zero.clone();
            let mut m = zero;
            p[na - 1] = 1;
            m[na - 1] = -1;
            let du_dk =
                (&family.profile_at(&p).u - &family.profile_at(&m).u) / (2.0 * family.deltas[na - 1]);
            let dc_dk =
                (family.c_at(&p) - family.c_at(&m)) / (2.0 * family.deltas[na - 1]);
            family.du_dm = du_dm;
            family.du_dk = Some(du_dk);
            family.dc_dm = dc_dm;
            family.dc_dk = dc_dk;
        }
        DerivativeMethod::Variational => {
            // Differentiating the profile equation: J_U v − k U' γ = −rhs with
            // J_U = −L₀, plus mean constraints and the anchor phase gauge.
            let ju = residual_jacobian_u(model, anchor.u.view(), anchor.k, anchor.c)?;
            let uprime = anchor.u_prime();
            let cons_idx = model.conserved_indices();
            let dim = n * nx + 1;
            let mut sys = Array2::zeros((dim, dim));
            sys.slice_mut(s![..n * nx, ..n * nx]).assign(&ju);
            for &i in &cons_idx {
                for x in 0..nx {
                    for y in 0..nx {
                        sys[[i * nx + x, i * nx + y]] += 1.0 / nx as f64;
                    }
                }
            }
            for i in 0..n {
                for x in 0..nx {
                    sys[[i * nx + x, n * nx]] = -anchor.k * uprime[[i, x]];
                    sys[[n * nx, i * nx + x]] = uprime[[i, x]] / nx as f64;
                }
            }
            // Constant-profile convention (see the Newton solver): the phase
            // row degenerates, so pin the speed to the characteristic for a
            // scalar flux and freeze it otherwise.
            if grid::lp_norm_rows(uprime.view(), 2.0, 1.0) < 1e-10 {
                if n == 1 {
                    let d2f = model.flux_hessian(anchor.u.column(0))?[0][[0, 0]];
                    for y in 0..nx {
                        sys[[n * nx, y]] = -d2f / nx as f64;
                    }
                }
                sys[[n * nx, n * nx]] = 1.0;
            }
            let solve = |rhs_field: &Array2<f64>, mean_target: &Array1<f64>| {
                let mut rhs = Array1::zeros(dim);
                for i in 0..n {
                    for x in 0..nx {
                        rhs[i * nx + x] = -rhs_field[[i, x]];
                    }
                }
                for (ci, &i) in cons_idx.iter().enumerate() {
                    for x in 0..nx {
                        rhs[i * nx + x] += mean_target[ci];
                    }
                }
                solve_real(&sys, &rhs).map_err(|e| {
                    CoreError::KernelDimensionMismatch(format!(
                        "variational bordered system inconsistent: {e}"
                    ))
                })
            };

            let zero_field = Array2::zeros((n, nx));
            let mut du_dm = Vec::with_capacity(n_c);
            let mut dc_dm = Array1::zeros(n_c);
            for j in 0..n_c {
                let mut target = Array1::zeros(n_c);
                target[j] = 1.0;
                let sol = solve(&zero_field, &target)?;
                du_dm.push(unflatten(sol.slice(s![..n * nx]), n, nx));
                dc_dm[j] = sol[n * nx];
            }
            let rk = residual_dk(model, anchor.u.view(), anchor.k, anchor.c)?;
            let sol = solve(&rk, &Array1::zeros(n_c))?;
            family.du_dm = du_dm;
            family.du_dk = Some(unflatten(sol.slice(s![..n * nx]), n, nx));
            family.dc_dm = dc_dm;
            family.dc_dk = sol[n * nx];
        }
    }
    family.normalized = false;
    Ok(())
}

/// Solves for the adjoint generalized null function ū^adj of `L₀*`, with the
/// pairings `⟨ū^adj, ∂_M Ū⟩ = 0`, `⟨ū^adj, Ū'⟩ = 1`. Requires
/// [`family_derivatives`] to have run.
pub fn adjoint_null(model: &ModelSpec, family: &mut WaveFamily) -> Result<(), CoreError> {
    if family.du_dk.is_none() {
        return Err(CoreError::KernelDimensionMismatch(
            "family derivatives must be computed before the adjoint solve".into(),
        ));
    }
    let anchor = &family.anchor;
    let n = anchor.n();
    let nx = anchor.nx();
    let n_c = model.n_conserved();
    let cons_idx = model.conserved_indices();
    if grid::lp_norm_rows(anchor.u_prime().view(), 2.0, 1.0) < 1e-10 {
        return Err(CoreError::AdjointKernelTooLarge(
            "constant profile: the pairing ⟨ū^adj, Ū'⟩ = 1 is unattainable".into(),
        ));
    }
    // L₀* = −J_Uᵀ in the uniform-grid inner product.
    let ju = residual_jacobian_u(model, anchor.u.view(), anchor.k, anchor.c)?;
    let l0_adj = ju.t().mapv(|x| -x);
    let uprime = anchor.u_prime();

    // L₀* w = −k Σ_l ∂_{M_l}c · e_l, bordered with the span of the zero group
    // of L₀ (Ū' and ∂_M Ū) as compensating columns and the two pairing
    // families as rows.
    let dim = n * nx + n_c + 1;
    let mut sys = Array2::zeros((dim, dim));
    sys.slice_mut(s![..n * nx, ..n * nx]).assign(&l0_adj);
    let mut z_cols: Vec<Array2<f64>> = vec![uprime.clone()];
    for j in 0..n_c {
        z_cols.push(family.du_dm[j].clone());
    }
    for (m, z) in z_cols.iter().enumerate() {
        for i in 0..n {
            for x in 0..nx {
                sys[[i * nx + x, n * nx + m]] = z[[i, x]];
                // Pairing rows: ⟨Ū', w⟩ and ⟨∂_{M_j}Ū, w⟩.
                sys[[n * nx + m, i * nx + x]] = z[[i, x]] / nx as f64;
            }
        }
    }
    let mut rhs = Array1::zeros(dim);
    for (ci, &i) in cons_idx.iter().enumerate() {
        for x in 0..nx {
            rhs[i * nx + x] = -anchor.k * family.dc_dm[ci];
        }
    }
    rhs[n * nx] = 1.0; // ⟨Ū', w⟩ row target
    let sol = solve_real(&sys, &rhs).map_err(|e| {
        CoreError::AdjointKernelTooLarge(format!("bordered adjoint system singular: {e}"))
    })?;
    let w = unflatten(sol.slice(s![..n * nx]), n, nx);
    // The compensating multipliers must vanish if the discrete zero group has
    // the expected dimension.
    let mu_norm = sol
        .slice(s![n * nx..])
        .iter()
        .fold(0.0f64, |a, &x| a.max(x.abs()));
    if mu_norm > 1e-6 {
        return Err(CoreError::AdjointKernelTooLarge(format!(
            "adjoint solve needed nonzero compensators (|μ| = {mu_norm:.3e})"
        )));
    }
    family.u_adj = Some(w);
    family.normalized = false;
    Ok(())
}

/// Applies the parametrization normalization: replaces `∂_k U` by
/// `∂_k U + α Ū'` with `α = −⟨ū^adj, ∂_k U⟩`, so that `⟨ū^adj, ∂_k U⟩ = 0`.
pub fn normalize_parametrization(family: &mut WaveFamily) -> Result<(), CoreError> {
    let (du_dk, u_adj) = match (&family.du_dk, &family.u_adj) {
        (Some(d), Some(a)) => (d.clone(), a.clone()),
        _ => {
            return Err(CoreError::KernelDimensionMismatch(
                "normalize_parametrization requires derivatives and ū^adj".into(),
            ))
        }
    };
    let alpha = -grid::inner_rows(u_adj.view(), du_dk.view());
    let uprime = family.anchor.u_prime();
    family.du_dk = Some(&du_dk + &uprime.mapv(|x| alpha * x));
    family.normalized = true;
    Ok(())
}

/// Mean of each row of an `n × N_x` field restricted to conserved components.
pub fn conserved_row_means(model: &ModelSpec, field: ArrayView2<'_, f64>) -> Array1<f64> {
    Array1::from_iter(
        model
            .conserved_indices()
            .into_iter()
            .map(|i| grid::mean(field.row(i))),
    )
}
