//! Slow modulation (Whitham) systems extracted from a wave family.
//!
//! The large-time dynamics near a diffusively stable wave reduce to a
//! small system of conservation laws for the local conserved means `M` and
//! wavenumber `κ`. This module tabulates the averaged maps `F` and
//! `ω = −κc` over the family patch, assembles the first-order matrix
//! `A_* = ∂(F − c̄M, −ω − c̄κ)` with its characteristic speeds and dual
//! eigenbases, produces second-order diffusion blocks by bordered solves
//! (for semilinear second-order conservation laws) or from fitted spectral
//! curvatures, forms the quadratic flux coefficients including the
//! change-of-variables correction in the conserved rows, classifies the
//! phase coupling of the wave, and builds the modulation initial data
//! `(M_W0, κ_W0, Ψ_0)` from a perturbed wave field.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::bloch::CriticalFit;
use crate::error::CoreError;
use crate::grid;
use crate::linalg::{dual_eigen_real, solve_real};
use crate::model::{ModelRef, ModelSpec};
use crate::profile::{residual_jacobian_u, WaveFamily, WaveProfile};

/// Phase-coupling class of a wave family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Coupling {
    /// The speed varies with the conserved means.
    Generic,
    /// `∂_M c = 0`: the wavenumber equation decouples at linear order.
    LinearlyDecoupled,
    /// `∂_M c = 0` and `∂²_M c = 0`.
    QuadraticallyDecoupled,
}

/// Classification verdict with the measured evidence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CouplingReport {
    pub coupling: Coupling,
    /// Max-norm of `∂_M c` at the anchor.
    pub dmc: f64,
    /// Max-norm of the `M`-block of the speed Hessian.
    pub d2mc: f64,
    /// Absolute threshold used (relative tolerance × speed scale).
    pub threshold: f64,
    /// True when an exact model symmetry forces the decoupling, overriding
    /// the numerical thresholds.
    pub analytic: bool,
}

/// Averaged maps tabulated on the family patch, in the family's node order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AveragedMaps {
    pub deltas: Vec<f64>,
    pub half_widths: Vec<usize>,
    /// Mean total flux of the conserved components per node.
    pub f: Vec<Array1<f64>>,
    /// Time frequency `ω = −k c` per node.
    pub omega: Vec<f64>,
    /// Wave speed per node.
    pub c: Vec<f64>,
}

impl AveragedMaps {
    fn n_axes(&self) -> usize {
        self.half_widths.len()
    }

    fn idx(&self, offsets: &[i64]) -> usize {
        assert_eq!(offsets.len(), self.n_axes());
        let mut idx = 0usize;
        for (a, &off) in offsets.iter().enumerate() {
            let h = self.half_widths[a] as i64;
            assert!(off.abs() <= h, "offset outside patch");
            idx = idx * (2 * self.half_widths[a] + 1) + (off + h) as usize;
        }
        idx
    }

    pub fn f_at(&self, offsets: &[i64]) -> &Array1<f64> {
        &self.f[self.idx(offsets)]
    }

    pub fn omega_at(&self, offsets: &[i64]) -> f64 {
        self.omega[self.idx(offsets)]
    }

    /// First difference of `F` along one patch axis: fourth-order when two
    /// nodes per side are available, centered second-order otherwise.
    pub fn d1_f(&self, axis: usize) -> Array1<f64> {
        self.d1(axis, |off| self.f_at(off).clone())
    }

    pub fn d1_omega(&self, axis: usize) -> f64 {
        self.d1(axis, |off| Array1::from_elem(1, self.omega_at(off)))[0]
    }

    fn d1<G>(&self, axis: usize, get: G) -> Array1<f64>
    where
        G: Fn(&[i64]) -> Array1<f64>,
    {
        let (p, m) = self.step_offsets(axis);
        let h = self.deltas[axis];
        if self.half_widths[axis] >= 2 {
            let mut p2 = p.clone();
            let mut m2 = m.clone();
            p2[axis] = 2;
            m2[axis] = -2;
            ((get(&p) - get(&m)) * 8.0 - (get(&p2) - get(&m2))) / (12.0 * h)
        } else {
            (get(&p) - get(&m)) / (2.0 * h)
        }
    }

    /// Centered second difference of `F` along a pair of axes.
    pub fn d2_f(&self, a: usize, b: usize) -> Array1<f64> {
        self.d2(a, b, |off| self.f_at(off).clone())
    }

    pub fn d2_omega(&self, a: usize, b: usize) -> f64 {
        self.d2(a, b, |off| {
            Array1::from_elem(1, self.omega_at(off))
        })[0]
    }

    fn step_offsets(&self, axis: usize) -> (Vec<i64>, Vec<i64>) {
        let mut p = vec![0i64; self.n_axes()];
        let mut m = vec![0i64; self.n_axes()];
        p[axis] = 1;
        m[axis] = -1;
        (p, m)
    }

    fn d2<G>(&self, a: usize, b: usize, get: G) -> Array1<f64>
    where
        G: Fn(&[i64]) -> Array1<f64>,
    {
        let na = self.n_axes();
        let zero = vec![0i64; na];
        if a == b {
            let (p, m) = self.step_offsets(a);
            (get(&p) - get(&zero) * 2.0 + get(&m)) / (self.deltas[a] * self.deltas[a])
        } else {
            let mut pp = zero.clone();
            let mut pm = zero.clone();
            let mut mp = zero.clone();
            let mut mm = zero;
            pp[a] = 1;
            pp[b] = 1;
            pm[a] = 1;
            pm[b] = -1;
            mp[a] = -1;
            mp[b] = 1;
            mm[a] = -1;
            mm[b] = -1;
            (get(&pp) - get(&pm) - get(&mp) + get(&mm)) / (4.0 * self.deltas[a] * self.deltas[b])
        }
    }
}

/// First-order part of the modulation system.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FirstOrder {
    /// `∂(F − c̄M, −ω − c̄κ) / ∂(M, κ)` at the anchor.
    pub a_star: Array2<f64>,
    /// Characteristic speeds (eigenvalues of `a_star`), ascending.
    pub a: Vec<f64>,
    /// Largest imaginary part discarded when realifying the spectrum.
    pub a_imag_max: f64,
    /// Right eigenvectors as columns.
    pub v_right: Array2<f64>,
    /// Left eigenvectors as rows, `v_left · v_right = Id`.
    pub v_left: Array2<f64>,
}

/// Which derivation produced the diffusion blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiffusionRoute {
    /// Cell-problem solves with the speed coupled to the means.
    Coupled,
    /// Cell-problem solves specialized to `∂_M c = 0`.
    Decoupled,
    /// Trivial constant-state diffusion.
    ConstantState,
}

/// Second-order diffusion blocks of the modulation system.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffusionBlocks {
    /// `(n_c+1)²` matrix, rows ordered `(M, κ)`.
    pub d: Array2<f64>,
    pub route: DiffusionRoute,
    /// Max-norm of the bordered-solve multipliers (solvability check).
    pub multiplier_norm: f64,
}

/// The assembled modulation system data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WhithamData {
    pub model: ModelRef,
    pub m: Array1<f64>,
    pub k: f64,
    pub c: f64,
    pub n_c: usize,
    pub maps: AveragedMaps,
    pub first_order: FirstOrder,
    /// Effective diagonal diffusion per characteristic field, matching the
    /// order of `first_order.a`.
    pub b: Vec<f64>,
    /// Where `b` came from: `"averaged-blocks"` or `"spectral-fit"`.
    pub b_provenance: String,
    /// `V diag(b) Ṽ`: the canonical diffusion matrix.
    pub b_tilde: Array2<f64>,
    /// Raw diffusion blocks when the cell-problem route ran.
    pub d_blocks: Option<DiffusionBlocks>,
    /// Quadratic flux coefficients: one symmetric `(n_c+1)²` matrix per
    /// equation, rows ordered `(M, κ)`.
    pub gamma_star: Vec<Array2<f64>>,
    pub coupling: CouplingReport,
}

/// Modulation initial data `(M_W0, κ_W0, Ψ_0)` on the big domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModulationInitialData {
    /// Conserved-mean fields, `n_c × N`.
    pub m_w0: Array2<f64>,
    /// Local wavenumber `k̄ ∂_x Ψ_0`.
    pub kappa_w0: Array1<f64>,
    /// Inverse phase `Ψ_0 = (Id − h_0)⁻¹` (grid values, period units).
    pub psi_w0: Array1<f64>,
    /// Removed global phase shift.
    pub psi_infinity: f64,
}

/// Tabulates the averaged flux `F`, frequency `ω = −k c`, and speed over
/// the family patch. The mean flux of a conserved component includes the
/// viscous correction `−k⟨(B(U)U')_l⟩`, which vanishes for constant `B`.
pub fn averaged_maps(model: &ModelSpec, family: &WaveFamily) -> Result<AveragedMaps, CoreError> {
    let cons = model.conserved_indices();
    let mut f = Vec::with_capacity(family.profiles.len());
    let mut omega = Vec::with_capacity(family.profiles.len());
    let mut c = Vec::with_capacity(family.profiles.len());
    for w in &family.profiles {
        let fx = w.mean_flux(model)?;
        let mut fl = Array1::from_iter(cons.iter().map(|&i| fx[i]));
        if model.constant_viscosity.is_none() {
            let up = w.u_prime();
            let mut corr = Array1::zeros(model.n);
            for x in 0..w.nx() {
                let b = model.evaluate_viscosity(w.u.column(x))?;
                corr += &b.dot(&up.column(x).to_owned());
            }
            corr /= w.nx() as f64;
            for (l, &i) in cons.iter().enumerate() {
                fl[l] -= w.k * corr[i];
            }
        }
        f.push(fl);
        omega.push(-w.k * w.c);
        c.push(w.c);
    }
    Ok(AveragedMaps {
        deltas: family.deltas.clone(),
        half_widths: family.half_widths.clone(),
        f,
        omega,
        c,
    })
}

/// First-order matrix `A_*`, characteristic speeds, and dual eigenbases,
/// all by centered differences on the patch.
pub fn first_order_matrix(
    family: &WaveFamily,
    maps: &AveragedMaps,
) -> Result<FirstOrder, CoreError> {
    let n_axes = maps.n_axes();
    let n_c = n_axes - 1;
    if maps.half_widths.iter().any(|&h| h < 1) {
        return Err(CoreError::PatchTooSmall(
            "first-order matrix needs at least one node per side".into(),
        ));
    }
    let cbar = family.anchor.c;
    let mut a_star = Array2::zeros((n_axes, n_axes));
    for axis in 0..n_axes {
        let df = maps.d1_f(axis);
        for l in 0..n_c {
            a_star[[l, axis]] = df[l] - if axis == l { cbar } else { 0.0 };
        }
        a_star[[n_c, axis]] =
            -maps.d1_omega(axis) - if axis == n_c { cbar } else { 0.0 };
    }
    let (lam, v, _) = dual_eigen_real(&a_star).map_err(|e| {
        CoreError::NonDiagonalizable(format!("characteristic decomposition failed: {e}"))
    })?;
    let scale = lam.iter().fold(1.0f64, |s, z| s.max(z.norm()));
    let a_imag_max = lam.iter().fold(0.0f64, |s, z| s.max(z.im.abs()));
    if a_imag_max > 1e-8 * scale {
        return Err(CoreError::NonstrictHyperbolic(format!(
            "complex characteristic speeds (max imaginary part {a_imag_max:.3e})"
        )));
    }
    for i in 0..n_axes {
        for j in (i + 1)..n_axes {
            if (lam[i] - lam[j]).norm() <= 1e-8 * scale {
                return Err(CoreError::NonDiagonalizable(format!(
                    "characteristic speeds collide: {} ≈ {}",
                    lam[i].re, lam[j].re
                )));
            }
        }
    }
    // Realify: rotate each eigenvector's largest entry onto the real axis,
    // then rebuild the left basis in real arithmetic so duality is exact.
    let mut v_right = Array2::zeros((n_axes, n_axes));
    for j in 0..n_axes {
        let col = v.column(j);
        let lead = col
            .iter()
            .cloned()
            .max_by(|x, y| x.norm().partial_cmp(&y.norm()).unwrap())
            .unwrap();
        let phase = lead / lead.norm();
        for i in 0..n_axes {
            v_right[[i, j]] = (col[i] / phase).re;
        }
    }
    let id: Array2<f64> = Array2::eye(n_axes);
    let mut v_left = Array2::zeros((n_axes, n_axes));
    let vt = v_right.t().to_owned();
    for i in 0..n_axes {
        let row = solve_real(&vt, &id.row(i).to_owned())?;
        v_left.row_mut(i).assign(&row);
    }
    Ok(FirstOrder {
        a_star,
        a: lam.iter().map(|z| z.re).collect(),
        a_imag_max,
        v_right,
        v_left,
    })
}

/// Exact model symmetries that force phase decoupling regardless of the
/// measured derivatives. The Lagrangian viscoelastic system is invariant
/// under shifts of the velocity mean and material rescaling, which pin the
/// speed of its standing waves to zero identically.
fn analytic_decoupling(model: &ModelSpec) -> bool {
    model.name == "viscoelasticity"
}

/// Classifies the phase coupling from the speed derivatives at the anchor.
/// `tol` is relative to the speed scale over the patch; default `1e-6`.
pub fn classify_coupling(
    model: &ModelSpec,
    family: &WaveFamily,
    tol: Option<f64>,
) -> CouplingReport {
    let n_c = model.n_conserved();
    let rel = tol.unwrap_or(1e-6);
    if n_c == 0 {
        // No conserved means exist: nothing for the phase to couple to.
        return CouplingReport {
            coupling: Coupling::QuadraticallyDecoupled,
            dmc: 0.0,
            d2mc: 0.0,
            threshold: 0.0,
            analytic: true,
        };
    }
    let scale = family
        .profiles
        .iter()
        .fold(1.0f64, |s, w| s.max(w.c.abs()));
    let threshold = rel * scale;
    let dmc = family
        .dc_dm
        .iter()
        .fold(0.0f64, |s, &x| s.max(x.abs()));
    let mut d2mc = 0.0f64;
    for a in 0..n_c {
        for b in 0..n_c {
            d2mc = d2mc.max(family.d2c(a, b).abs());
        }
    }
    let analytic = analytic_decoupling(model);
    let coupling = if analytic || (dmc <= threshold && d2mc <= threshold / family.deltas[0]) {
        Coupling::QuadraticallyDecoupled
    } else if dmc <= threshold {
        Coupling::LinearlyDecoupled
    } else {
        Coupling::Generic
    };
    CouplingReport {
        coupling,
        dmc,
        d2mc,
        threshold,
        analytic,
    }
}

/// `L⁽¹⁾ v = 2k B v' − df(U) v + c v`, the first ξ-expansion coefficient of
/// the linearization of a second-order semilinear conservation law.
fn apply_l1(
    model: &ModelSpec,
    w: &WaveProfile,
    b: &Array2<f64>,
    v: ArrayView2<'_, f64>,
) -> Result<Array2<f64>, CoreError> {
    let vp = grid::deriv_rows(v, 1, 1.0);
    let mut out = b.dot(&vp) * (2.0 * w.k);
    for x in 0..w.nx() {
        let df = model.flux_jacobian(w.u.column(x))?;
        let col = df.dot(&v.column(x).to_owned());
        for i in 0..model.n {
            out[[i, x]] += -col[i] + w.c * v[[i, x]];
        }
    }
    Ok(out)
}

fn flatten(v: ArrayView2<'_, f64>) -> Array1<f64> {
    Array1::from_iter(v.iter().cloned())
}

fn unflatten(v: ArrayView1<'_, f64>, n: usize, nx: usize) -> Array2<f64> {
    Array2::from_shape_vec((n, nx), v.to_vec()).unwrap()
}

/// Mean `⟨df(U) v⟩` restricted to the conserved rows.
fn mean_df_v(
    model: &ModelSpec,
    w: &WaveProfile,
    v: ArrayView2<'_, f64>,
) -> Result<Array1<f64>, CoreError> {
    let cons = model.conserved_indices();
    let mut acc = Array1::zeros(model.n);
    for x in 0..w.nx() {
        let df = model.flux_jacobian(w.u.column(x))?;
        acc += &df.dot(&v.column(x).to_owned());
    }
    acc /= w.nx() as f64;
    Ok(Array1::from_iter(cons.iter().map(|&i| acc[i])))
}

/// Second-order diffusion blocks by cell-problem solves. Supported for
/// semilinear conservation laws with constant viscosity and no source or
/// polynomial operator; other structures fall back to the fitted spectral
/// curvatures (see [`whitham_data`]).
pub fn second_order_conservative(
    model: &ModelSpec,
    family: &WaveFamily,
) -> Result<DiffusionBlocks, CoreError> {
    let n = model.n;
    let n_c = model.n_conserved();
    let dim = n_c + 1;
    if model.has_source()
        || model.linear_op.iter().any(|p| p.iter().any(|&x| x != 0.0))
    {
        return Err(CoreError::UnsupportedStructure(
            "diffusion blocks need a pure second-order conservation law".into(),
        ));
    }
    let b = model.constant_viscosity.clone().ok_or_else(|| {
        CoreError::UnsupportedStructure(
            "diffusion blocks need a constant viscosity matrix".into(),
        )
    })?;
    let w = &family.anchor;
    if w.amplitude() <= 1e-10 {
        // Constant state: the cell problems are trivial and the averaged
        // viscosity passes straight through (scalar models only).
        if n != 1 {
            return Err(CoreError::UnsupportedStructure(
                "constant-state diffusion blocks are scalar-only".into(),
            ));
        }
        return Ok(DiffusionBlocks {
            d: Array2::eye(dim) * b[[0, 0]],
            route: DiffusionRoute::ConstantState,
            multiplier_norm: 0.0,
        });
    }
    if model.conserved_indices().len() != n {
        return Err(CoreError::UnsupportedStructure(
            "cell-problem diffusion blocks need every component conserved".into(),
        ));
    }
    let u_adj = family.u_adj.as_ref().ok_or_else(|| {
        CoreError::UnsupportedStructure("adjoint null data required".into())
    })?;
    let du_dk = family.du_dk.as_ref().ok_or_else(|| {
        CoreError::UnsupportedStructure("wavenumber derivative required".into())
    })?;
    if !family.normalized {
        return Err(CoreError::UnsupportedStructure(
            "normalized parametrization required".into(),
        ));
    }
    let nx = w.nx();
    let nn = n * nx;
    let up = w.u_prime();
    let decoupled = classify_coupling(model, family, None).coupling != Coupling::Generic;

    // First derivatives of the averaged flux via the variational fields.
    let dmf: Vec<Array1<f64>> = family
        .du_dm
        .iter()
        .map(|d| mean_df_v(model, w, d.view()))
        .collect::<Result<_, _>>()?;
    let dkf = mean_df_v(model, w, du_dk.view())?;

    // Bordered operator: −(residual Jacobian) with adjoint-kernel border
    // columns and kernel-pinning constraint rows.
    let jac = residual_jacobian_u(model, w.u.view(), w.k, w.c)?;
    let mut big = Array2::zeros((nn + dim, nn + dim));
    for i in 0..nn {
        for j in 0..nn {
            big[[i, j]] = -jac[[i, j]];
        }
    }
    for l in 0..n_c {
        // Border column: the constant unit field of component l.
        for x in 0..nx {
            big[[l * nx + x, nn + l]] = 1.0;
        }
        // Constraint row: zero mean of component l.
        for x in 0..nx {
            big[[nn + l, l * nx + x]] = 1.0 / nx as f64;
        }
    }
    // In the coupled case the profile derivative lies in the range (the
    // zero group carries a Jordan chain over it) and the last border
    // column must close the chain instead of duplicating a range
    // direction; in the decoupled case ū^adj spans the missing co-range.
    let last_col = if decoupled {
        flatten(u_adj.view())
    } else {
        flatten(up.view())
    };
    let adj_flat = flatten(u_adj.view());
    for i in 0..nn {
        big[[i, nn + n_c]] = last_col[i];
        big[[nn + n_c, i]] = adj_flat[i] / nx as f64;
    }

    let solve_cell = |rhs: &Array2<f64>| -> Result<(Array2<f64>, f64), CoreError> {
        let mut full = Array1::zeros(nn + dim);
        full.slice_mut(ndarray::s![0..nn]).assign(&flatten(rhs.view()));
        let sol = solve_real(&big, &full).map_err(|e| {
            CoreError::BorderedSingular(format!("cell problem solve failed: {e}"))
        })?;
        let g = unflatten(sol.slice(ndarray::s![0..nn]), n, nx);
        let mut mult = sol
            .slice(ndarray::s![nn..nn + n_c])
            .iter()
            .fold(0.0f64, |s, &x| s.max(x.abs()));
        if decoupled {
            mult = mult.max(sol[nn + n_c].abs());
        }
        Ok((g, mult))
    };

    let mut d = Array2::zeros((dim, dim));
    let mut multiplier_norm = 0.0f64;

    // Mean-flux cell problems, one per conserved mean.
    for l in 0..n_c {
        let mut rhs = -apply_l1(model, w, &b, family.du_dm[l].view())?;
        for j in 0..n_c {
            // (∂_M F − c Id)_{j,l}: row j of the averaged-flux Jacobian.
            let coef = dmf[l][j] - if j == l { w.c } else { 0.0 };
            rhs -= &(&family.du_dm[j] * coef);
        }
        if decoupled {
            let pair = grid::inner_rows(
                u_adj.view(),
                apply_l1(model, w, &b, family.du_dm[l].view())?.view(),
            );
            rhs += &(&up * pair);
            d[[n_c, l]] = pair;
        } else {
            rhs -= &(du_dk * (w.k * family.dc_dm[l]));
        }
        let (g, mult) = solve_cell(&rhs)?;
        multiplier_norm = multiplier_norm.max(mult);
        let dfg = mean_df_v(model, w, g.view())?;
        for i in 0..n_c {
            d[[i, l]] = b[[i, l]] - dfg[i];
        }
    }

    // Wavenumber cell problem.
    {
        let mut rhs = -apply_l1(model, w, &b, du_dk.view())?;
        for j in 0..n_c {
            rhs -= &(&family.du_dm[j] * dkf[j]);
        }
        rhs -= &(du_dk * (w.k * family.dc_dk));
        if decoupled {
            let pair = grid::inner_rows(
                u_adj.view(),
                apply_l1(model, w, &b, du_dk.view())?.view(),
            );
            rhs += &(&up * pair);
            d[[n_c, n_c]] =
                grid::inner_rows(u_adj.view(), b.dot(&up).view()) + pair;
        } else {
            rhs -= &b.dot(&up);
        }
        let (g, mult) = solve_cell(&rhs)?;
        multiplier_norm = multiplier_norm.max(mult);
        let dfg = mean_df_v(model, w, g.view())?;
        for i in 0..n_c {
            d[[i, n_c]] = -dfg[i];
        }
    }

    Ok(DiffusionBlocks {
        d,
        route: if decoupled {
            DiffusionRoute::Decoupled
        } else {
            DiffusionRoute::Coupled
        },
        multiplier_norm,
    })
}

/// Quadratic flux coefficients of the modulation system in the wave-adapted
/// frame: one symmetric matrix per equation so that the flux reads
/// `½ wᵀ Γ w` with `w = (M, κ)`. The conserved rows carry the correction
/// from the implicit phase change of variables; the wavenumber row is the
/// bare frequency Hessian.
pub fn quadratic_coefficients(
    family: &WaveFamily,
    maps: &AveragedMaps,
) -> Result<Vec<Array2<f64>>, CoreError> {
    let n_axes = maps.n_axes();
    let n_c = n_axes - 1;
    if maps.half_widths.iter().any(|&h| h < 1) {
        return Err(CoreError::PatchTooSmall(
            "quadratic coefficients need at least one node per side".into(),
        ));
    }
    let kb = family.anchor.k;
    let cb = family.anchor.c;
    let d1f: Vec<Array1<f64>> = (0..n_axes).map(|a| maps.d1_f(a)).collect();
    let mut dc = Array1::zeros(n_axes);
    for l in 0..n_c {
        dc[l] = family.dc_dm[l];
    }
    dc[n_c] = family.dc_dk;

    let mut gamma = Vec::with_capacity(n_axes);
    for l in 0..n_c {
        let mut g = Array2::zeros((n_axes, n_axes));
        for a in 0..n_axes {
            let d2 = maps.d2_f(a, a);
            g[[a, a]] = kb * d2[l];
            for bx in (a + 1)..n_axes {
                let d2 = maps.d2_f(a, bx);
                g[[a, bx]] = kb * d2[l];
                g[[bx, a]] = kb * d2[l];
            }
        }
        // Change-of-variables correction, symmetrized: the κ-slot of one
        // argument multiplies the centered flux of the other, minus the
        // speed variation times the mean.
        let mut q = Array2::<f64>::zeros((n_axes, n_axes));
        for bx in 0..n_axes {
            q[[n_c, bx]] += d1f[bx][l] - if bx == l { cb } else { 0.0 };
            q[[bx, l]] -= kb * dc[bx];
        }
        let qt = q.t().to_owned();
        gamma.push(g + &q + &qt);
    }
    let mut gk = Array2::zeros((n_axes, n_axes));
    for a in 0..n_axes {
        for bx in a..n_axes {
            let v = kb * maps.d2_omega(a, bx);
            gk[[a, bx]] = v;
            gk[[bx, a]] = v;
        }
    }
    gamma.push(gk);
    Ok(gamma)
}

/// Assembles the full modulation data. Diffusion entries come from the
/// cell-problem route when the model structure supports it, otherwise from
/// the fitted spectral curvatures (`fits` matched to the characteristic
/// speeds by nearest `a`).
pub fn whitham_data(
    model: &ModelSpec,
    family: &WaveFamily,
    fits: Option<&[CriticalFit]>,
) -> Result<WhithamData, CoreError> {
    let maps = averaged_maps(model, family)?;
    let first_order = first_order_matrix(family, &maps)?;
    let coupling = classify_coupling(model, family, None);
    let gamma_star = quadratic_coefficients(family, &maps)?;
    let dim = first_order.a.len();

    let (b, b_provenance, d_blocks) = match second_order_conservative(model, family) {
        Ok(blocks) => {
            let mut b = Vec::with_capacity(dim);
            for j in 0..dim {
                let lj = first_order.v_left.row(j);
                let rj = first_order.v_right.column(j);
                b.push(lj.dot(&blocks.d.dot(&rj.to_owned())));
            }
            (b, "averaged-blocks".to_string(), Some(blocks))
        }
        Err(CoreError::UnsupportedStructure(_)) => {
            let fits = fits.ok_or_else(|| {
                CoreError::UnsupportedStructure(
                    "no cell-problem route for this model and no spectral fits given".into(),
                )
            })?;
            if fits.len() != dim {
                return Err(CoreError::DimensionMismatch(format!(
                    "{} spectral fits for {} characteristic fields",
                    fits.len(),
                    dim
                )));
            }
            let mut used = vec![false; dim];
            let mut b = vec![0.0; dim];
            for (j, &aj) in first_order.a.iter().enumerate() {
                let (best, _) = fits
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !used[*i])
                    .map(|(i, f)| (i, (f.a - aj).abs()))
                    .min_by(|x, y| x.1.partial_cmp(&y.1).unwrap())
                    .unwrap();
                used[best] = true;
                b[j] = fits[best].b;
            }
            (b, "spectral-fit".to_string(), None)
        }
        Err(e) => return Err(e),
    };

    let mut b_tilde = Array2::zeros((dim, dim));
    for j in 0..dim {
        let rj = first_order.v_right.column(j);
        let lj = first_order.v_left.row(j);
        for p in 0..dim {
            for q in 0..dim {
                b_tilde[[p, q]] += b[j] * rj[p] * lj[q];
            }
        }
    }

    let w = &family.anchor;
    Ok(WhithamData {
        model: w.model.clone(),
        m: w.m.clone(),
        k: w.k,
        c: w.c,
        n_c: dim - 1,
        maps,
        first_order,
        b,
        b_provenance,
        b_tilde,
        d_blocks,
        gamma_star,
        coupling,
    })
}

/// Pointwise inverse of `Id − psi` on a periodic domain of the given
/// length: returns `Psi` with `Psi(x) − psi(Psi(x)) = x` at the grid
/// points. Requires `‖∂_x psi‖_∞ < 1`.
pub fn invert_phase(
    psi: ArrayView1<'_, f64>,
    length: f64,
    tol: f64,
) -> Result<Array1<f64>, CoreError> {
    let nx = psi.len();
    let dpsi = grid::deriv(psi, 1, length);
    let slope = dpsi.iter().fold(0.0f64, |s, &x| s.max(x.abs()));
    if slope >= 1.0 {
        return Err(CoreError::PhaseNotInvertible(format!(
            "‖∂x psi‖_∞ = {slope:.3} ≥ 1"
        )));
    }
    let mut out = Array1::zeros(nx);
    let h = length / nx as f64;
    for p in 0..nx {
        let x = p as f64 * h;
        let mut y = x + grid::interp(psi, x, length);
        let mut converged = false;
        for _ in 0..60 {
            let r = y - grid::interp(psi, y, length) - x;
            if r.abs() <= tol {
                converged = true;
                break;
            }
            y -= r / (1.0 - grid::interp(dpsi.view(), y, length));
        }
        if !converged {
            return Err(CoreError::PhaseNotInvertible(format!(
                "phase inversion stalled at x = {x:.4}"
            )));
        }
        out[p] = y;
    }
    Ok(out)
}

/// Builds the modulation initial data from a perturbed wave field `u0` and
/// a phase offset `h0` on a big domain of `periods` fundamental cells
/// (coordinates in period units). The global phase shift
/// `(h0(start) + h0(end))/2` is removed first.
pub fn whitham_initial_data(
    model: &ModelSpec,
    u0: ArrayView2<'_, f64>,
    h0: ArrayView1<'_, f64>,
    profile: &WaveProfile,
    periods: usize,
) -> Result<ModulationInitialData, CoreError> {
    let nxb = u0.ncols();
    if h0.len() != nxb || u0.nrows() != model.n {
        return Err(CoreError::DimensionMismatch(
            "u0 and h0 must share the big grid".into(),
        ));
    }
    let length = periods as f64;
    let psi_infinity = 0.5 * (h0[0] + h0[nxb - 1]);
    let h = h0.mapv(|x| x - psi_infinity);
    let psi_w0 = invert_phase(h.view(), length, 1e-12)?;
    // Ψ − Id is periodic; differentiate the deviation spectrally.
    let hgrid = length / nxb as f64;
    let dev = Array1::from_iter((0..nxb).map(|p| psi_w0[p] - p as f64 * hgrid));
    let dpsi = grid::deriv(dev.view(), 1, length).mapv(|x| x + 1.0);
    let kappa_w0 = dpsi.mapv(|x| profile.k * x);

    let cons = model.conserved_indices();
    let mut m_w0 = Array2::zeros((cons.len(), nxb));
    for p in 0..nxb {
        // The wave profile is 1-periodic in the period-unit coordinate.
        let upsi = grid::interp_rows(profile.u.view(), psi_w0[p].rem_euclid(1.0), 1.0);
        for (l, &i) in cons.iter().enumerate() {
            let dev_u = u0[[i, p]] - upsi[i];
            let stretch = (1.0 / dpsi[p] - 1.0) * (upsi[i] - profile.m[l]);
            m_w0[[l, p]] = profile.m[l] + dev_u + stretch;
        }
    }
    Ok(ModulationInitialData {
        m_w0,
        kappa_w0,
        psi_w0,
        psi_infinity,
    })
}
