//! Model registry: the 1-D evolution systems under study.
//!
//! Every model is an instance of
//! `u_t + ∂_x f(u) + g(u) + P(∂_x) u = ∂_x (B(u) ∂_x u)`
//! with state `u ∈ R^n`, flux `f`, source `g`, a per-component
//! constant-coefficient polynomial operator `P` of order ≤ 4, and a
//! (possibly state-dependent) viscosity matrix `B`. Components whose
//! equations are in divergence form carry a conserved-mask flag; the slow
//! modulation variables are built from exactly those components.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::CoreError;

type VecFn = Arc<dyn Fn(ArrayView1<'_, f64>) -> Array1<f64> + Send + Sync>;
type MatFn = Arc<dyn Fn(ArrayView1<'_, f64>) -> Array2<f64> + Send + Sync>;

/// Immutable description of one evolution system. Evaluation methods are
/// pure; a registered model may be shared freely across threads.
#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    /// Component count n.
    pub n: usize,
    flux: VecFn,
    flux_jac: Option<MatFn>,
    source: Option<VecFn>,
    source_jac: Option<MatFn>,
    /// Per-component coefficients `[p_0, …, p_4]` of `P(∂_x)`.
    pub linear_op: Vec<Vec<f64>>,
    viscosity: MatFn,
    /// Fast path when `B` does not depend on the state.
    pub constant_viscosity: Option<Array2<f64>>,
    /// Marks components whose equations are in divergence form.
    pub conserved: Vec<bool>,
    pub params: BTreeMap<String, f64>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("params", &self.params)
            .finish()
    }
}

/// Serializable handle (name + parameters) used in manifests and containers.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelRef {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl ModelSpec {
    /// Looks up a builtin model by name, applying parameter overrides.
    pub fn builtin(name: &str, params: &BTreeMap<String, f64>) -> Result<ModelSpec, CoreError> {
        let get = |key: &str, default: f64| params.get(key).copied().unwrap_or(default);
        match name {
            "heat" => Ok(ModelSpec {
                name: name.into(),
                n: 1,
                flux: Arc::new(|_u| Array1::zeros(1)),
                flux_jac: Some(Arc::new(|_u| Array2::zeros((1, 1)))),
                source: None,
                source_jac: None,
                linear_op: vec![vec![]],
                viscosity: Arc::new(|_u| Array2::eye(1)),
                constant_viscosity: Some(Array2::eye(1)),
                // Reaction-diffusion convention: a single critical mode,
                // no conserved parameters.
                conserved: vec![false],
                params: params.clone(),
            }),
            "burgers" => Ok(ModelSpec {
                name: name.into(),
                n: 1,
                flux: Arc::new(|u| Array1::from_elem(1, 0.5 * u[0] * u[0])),
                flux_jac: Some(Arc::new(|u| Array2::from_elem((1, 1), u[0]))),
                source: None,
                source_jac: None,
                linear_op: vec![vec![]],
                viscosity: Arc::new(|_u| Array2::eye(1)),
                constant_viscosity: Some(Array2::eye(1)),
                conserved: vec![true],
                params: params.clone(),
            }),
            "viscoelasticity" => {
                // τ_t − u_x = ε₁ τ_xx, u_t − σ(τ)_x = ε₂ u_xx, flux (−u, −σ(τ)),
                // with the power law σ(τ) = τ^p (default p = −1).
                let eps1 = get("eps1", 1.0);
                let eps2 = get("eps2", 1.0);
                let p = get("sigma_power", -1.0);
                let b = Array2::from_diag(&Array1::from(vec![eps1, eps2]));
                let bc = b.clone();
                Ok(ModelSpec {
                    name: name.into(),
                    n: 2,
                    flux: Arc::new(move |u| Array1::from(vec![-u[1], -u[0].powf(p)])),
                    flux_jac: Some(Arc::new(move |u| {
                        let mut j = Array2::zeros((2, 2));
                        j[[0, 1]] = -1.0;
                        j[[1, 0]] = -p * u[0].powf(p - 1.0);
                        j
                    })),
                    source: None,
                    source_jac: None,
                    linear_op: vec![vec![], vec![]],
                    viscosity: Arc::new(move |_u| bc.clone()),
                    constant_viscosity: Some(b),
                    conserved: vec![true, true],
                    params: params.clone(),
                })
            }
            "kuramoto_sivashinsky" => Ok(ModelSpec {
                // u_t + u u_x + u_xx + u_xxxx = 0: P = ∂² + ∂⁴, no viscosity block.
                name: name.into(),
                n: 1,
                flux: Arc::new(|u| Array1::from_elem(1, 0.5 * u[0] * u[0])),
                flux_jac: Some(Arc::new(|u| Array2::from_elem((1, 1), u[0]))),
                source: None,
                source_jac: None,
                linear_op: vec![vec![0.0, 0.0, 1.0, 0.0, 1.0]],
                viscosity: Arc::new(|_u| Array2::zeros((1, 1))),
                constant_viscosity: Some(Array2::zeros((1, 1))),
                conserved: vec![true],
                params: params.clone(),
            }),
            "swift_hohenberg" => {
                // u_t + (1+∂²)² u − r u + u³ = 0.
                let r = get("r", 0.04);
                Ok(ModelSpec {
                    name: name.into(),
                    n: 1,
                    flux: Arc::new(|_u| Array1::zeros(1)),
                    flux_jac: Some(Arc::new(|_u| Array2::zeros((1, 1)))),
                    source: Some(Arc::new(move |u| {
                        Array1::from_elem(1, -r * u[0] + u[0].powi(3))
                    })),
                    source_jac: Some(Arc::new(move |u| {
                        Array2::from_elem((1, 1), -r + 3.0 * u[0] * u[0])
                    })),
                    linear_op: vec![vec![1.0, 0.0, 2.0, 0.0, 1.0]],
                    viscosity: Arc::new(|_u| Array2::zeros((1, 1))),
                    constant_viscosity: Some(Array2::zeros((1, 1))),
                    conserved: vec![false],
                    params: params.clone(),
                })
            }
            "benard_marangoni" => {
                // Pattern component u coupled to two counter-propagating
                // conserved modes:
                //   u_t + (1+∂²)² u − ε² u + u³ = 0,
                //   v_t + ∂_x(u v − v) = v_xx,
                //   w_t + ∂_x(u w + w) = w_xx.
                // The gradient coupling γ u (v_x + w_x) of the full model is
                // outside the registry's flux/source structure; only γ = 0 is
                // runnable.
                let eps = get("epsilon", 0.05);
                let gamma = get("gamma", 0.0);
                if gamma != 0.0 {
                    return Err(CoreError::UnsupportedStructure(
                        "benard_marangoni: gradient coupling gamma != 0 is not runnable".into(),
                    ));
                }
                let b = Array2::from_diag(&Array1::from(vec![0.0, 1.0, 1.0]));
                let bc = b.clone();
                Ok(ModelSpec {
                    name: name.into(),
                    n: 3,
                    flux: Arc::new(|u| {
                        Array1::from(vec![0.0, u[0] * u[1] - u[1], u[0] * u[2] + u[2]])
                    }),
                    flux_jac: Some(Arc::new(|u| {
                        let mut j = Array2::zeros((3, 3));
                        j[[1, 0]] = u[1];
                        j[[1, 1]] = u[0] - 1.0;
                        j[[2, 0]] = u[2];
                        j[[2, 2]] = u[0] + 1.0;
                        j
                    })),
                    source: Some(Arc::new(move |u| {
                        Array1::from(vec![-eps * eps * u[0] + u[0].powi(3), 0.0, 0.0])
                    })),
                    source_jac: Some(Arc::new(move |u| {
                        let mut j = Array2::zeros((3, 3));
                        j[[0, 0]] = -eps * eps + 3.0 * u[0] * u[0];
                        j
                    })),
                    linear_op: vec![vec![1.0, 0.0, 2.0, 0.0, 1.0], vec![], vec![]],
                    viscosity: Arc::new(move |_u| bc.clone()),
                    constant_viscosity: Some(b),
                    conserved: vec![false, true, true],
                    params: params.clone(),
                })
            }
            "saint_venant" => Err(CoreError::UnsupportedStructure(
                "saint_venant: degenerate diffusion needs partially-parabolic machinery; \
                 the name is reserved but not runnable"
                    .into(),
            )),
            other => Err(CoreError::UnknownModel(other.into())),
        }
    }

    /// Serializable reference for manifests.
    pub fn reference(&self) -> ModelRef {
        ModelRef {
            name: self.name.clone(),
            params: self.params.clone(),
        }
    }

    /// Number of conserved components n_c.
    pub fn n_conserved(&self) -> usize {
        self.conserved.iter().filter(|&&c| c).count()
    }

    /// Indices of conserved components.
    pub fn conserved_indices(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| self.conserved[i]).collect()
    }

    fn check_dim(&self, u: ArrayView1<'_, f64>) -> Result<(), CoreError> {
        if u.len() != self.n {
            return Err(CoreError::DimensionMismatch(format!(
                "model {} has n={}, got state of length {}",
                self.name,
                self.n,
                u.len()
            )));
        }
        if u.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::DimensionMismatch(format!(
                "non-finite state passed to model {}",
                self.name
            )));
        }
        Ok(())
    }

    /// Flux f(u).
    pub fn evaluate_flux(&self, u: ArrayView1<'_, f64>) -> Result<Array1<f64>, CoreError> {
        self.check_dim(u)?;
        Ok((self.flux)(u))
    }

    /// Flux Jacobian df(u): analytic if registered, otherwise central
    /// differences with step `1e-5·(1+|u|)`.
    pub fn flux_jacobian(&self, u: ArrayView1<'_, f64>) -> Result<Array2<f64>, CoreError> {
        self.check_dim(u)?;
        if let Some(jac) = &self.flux_jac {
            return Ok(jac(u));
        }
        let f = self.flux.clone();
        Ok(fd_jacobian(u, |v| f(v)))
    }

    /// Flux Hessian d²f(u) as one symmetric n×n matrix per flux component
    /// (central differences of the Jacobian).
    pub fn flux_hessian(&self, u: ArrayView1<'_, f64>) -> Result<Vec<Array2<f64>>, CoreError> {
        self.check_dim(u)?;
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let h = 1e-5 * (1.0 + norm);
        let mut out = vec![Array2::zeros((self.n, self.n)); self.n];
        for d in 0..self.n {
            let mut up = u.to_owned();
            let mut um = u.to_owned();
            up[d] += h;
            um[d] -= h;
            let jp = self.flux_jacobian(up.view())?;
            let jm = self.flux_jacobian(um.view())?;
            let col = (jp - jm) / (2.0 * h);
            for i in 0..self.n {
                for j in 0..self.n {
                    out[i][[j, d]] = col[[i, j]];
                }
            }
        }
        // Symmetrize: mixed partials commute for the smooth fluxes we register.
        for m in &mut out {
            let t = m.t().to_owned();
            *m = (&*m + &t) / 2.0;
        }
        Ok(out)
    }

    /// True when a source term is registered.
    pub fn has_source(&self) -> bool {
        self.source.is_some()
    }

    /// Source g(u); identically zero when none is registered.
    pub fn evaluate_source(&self, u: ArrayView1<'_, f64>) -> Result<Array1<f64>, CoreError> {
        self.check_dim(u)?;
        Ok(match &self.source {
            Some(g) => g(u),
            None => Array1::zeros(self.n),
        })
    }

    /// Source Jacobian dg(u).
    pub fn source_jacobian(&self, u: ArrayView1<'_, f64>) -> Result<Array2<f64>, CoreError> {
        self.check_dim(u)?;
        if let Some(jac) = &self.source_jac {
            return Ok(jac(u));
        }
        match &self.source {
            Some(g) => {
                let g = g.clone();
                Ok(fd_jacobian(u, |v| g(v)))
            }
            None => Ok(Array2::zeros((self.n, self.n))),
        }
    }

    /// Viscosity matrix B(u).
    pub fn evaluate_viscosity(&self, u: ArrayView1<'_, f64>) -> Result<Array2<f64>, CoreError> {
        self.check_dim(u)?;
        Ok((self.viscosity)(u))
    }

    /// Evaluates the polynomial `P_c(z)` of one component at a complex point.
    pub fn linear_op_at(&self, component: usize, z: Complex64) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        let mut pow = Complex64::new(1.0, 0.0);
        for &coef in &self.linear_op[component] {
            acc += coef * pow;
            pow *= z;
        }
        acc
    }

    /// Fourier symbol of the linearization about a constant state `u0`:
    /// `λ-generator(ξ) = −iξ df(u0) − dg(u0) − diag(P_c(iξ)) − ξ² B(u0)`.
    pub fn linear_symbol(
        &self,
        u0: ArrayView1<'_, f64>,
        xi: f64,
    ) -> Result<Array2<Complex64>, CoreError> {
        self.check_dim(u0)?;
        let df = self.flux_jacobian(u0)?;
        let dg = self.source_jacobian(u0)?;
        let b = self.evaluate_viscosity(u0)?;
        let ixi = Complex64::new(0.0, xi);
        let mut sym = Array2::from_elem((self.n, self.n), Complex64::new(0.0, 0.0));
        for i in 0..self.n {
            for j in 0..self.n {
                sym[[i, j]] = -ixi * df[[i, j]] - dg[[i, j]] - xi * xi * b[[i, j]];
            }
            sym[[i, i]] -= self.linear_op_at(i, ixi);
        }
        Ok(sym)
    }

    /// Well-posedness screen: largest real part of the symbol's eigenvalues
    /// over a wavenumber grid, which must stay bounded above (and go to −∞)
    /// for large |ξ|.
    pub fn symbol_screen(
        &self,
        u0: ArrayView1<'_, f64>,
        xi_max: f64,
        points: usize,
    ) -> Result<f64, CoreError> {
        let mut worst = f64::NEG_INFINITY;
        for i in 1..=points {
            let xi = xi_max * i as f64 / points as f64;
            let sym = self.linear_symbol(u0, xi)?;
            for lam in crate::linalg::eigvals_complex(&sym)? {
                worst = worst.max(lam.re);
            }
        }
        Ok(worst)
    }
}

/// Central-difference Jacobian with the registry's standard step.
pub fn fd_jacobian<F>(u: ArrayView1<'_, f64>, f: F) -> Array2<f64>
where
    F: Fn(ArrayView1<'_, f64>) -> Array1<f64>,
{
    let n = u.len();
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let h = 1e-5 * (1.0 + norm);
    let f0 = f(u);
    let m = f0.len();
    let mut jac = Array2::zeros((m, n));
    for j in 0..n {
        let mut up = u.to_owned();
        let mut um = u.to_owned();
        up[j] += h;
        um[j] -= h;
        let col = (f(up.view()) - f(um.view())) / (2.0 * h);
        jac.column_mut(j).assign(&col);
    }
    jac
}
