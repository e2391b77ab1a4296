//! Diffusion-wave toolkit for conservation laws near constant states:
//! closed-form Burgers/heat self-similar waves, quadratic and decoupled
//! quadratic approximants with their characteristic data, linear
//! superpositions of scalar diffusion waves, and asymptotic-equivalence
//! gap measurement between trajectories.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::CoreError;
use crate::evolve::{decay_rate, lp_norm, QuadraticCoefficients, Trajectory};
use crate::linalg::{dual_eigen_real, solve_real};
use crate::model::ModelSpec;

/// A system `∂_t w + ∂_x f(w) = ∂_x(B(w) ∂_x w)` expanded to second order
/// around a constant state `w_*`, together with the characteristic data of
/// its linearization: speeds, dual eigenbases, effective scalar diffusion
/// and self-interaction coefficients, and the decoupled projections.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstantStateSystem {
    /// Expansion state.
    pub w_star: Array1<f64>,
    /// Flux Jacobian at `w_star`.
    pub a_star: Array2<f64>,
    /// Viscosity matrix at `w_star`.
    pub b_star: Array2<f64>,
    /// Flux Hessian at `w_star`: one symmetric matrix per equation.
    pub gamma_star: Vec<Array2<f64>>,
    /// Right eigenvectors of `a_star` as columns.
    pub r_star: Array2<f64>,
    /// Left eigenvectors as rows, `l_star · r_star = Id`.
    pub l_star: Array2<f64>,
    /// Characteristic speeds, ascending.
    pub a: Vec<f64>,
    /// Effective scalar diffusion rates `l_j B r_j`, all positive.
    pub b: Vec<f64>,
    /// Scalar self-interaction coefficients `l_j Γ(r_j, r_j)`.
    pub gamma: Vec<f64>,
    /// Decoupled quadratic flux: keeps only the diagonal characteristic
    /// self-interactions, `l_j Γ̃(r_j, r_j) = γ_j` and `l_i Γ̃(r_j, r_j) = 0`
    /// for `i ≠ j`.
    pub gamma_tilde: Vec<Array2<f64>>,
    /// Diagonalized diffusion `R diag(b) L`.
    pub b_tilde: Array2<f64>,
}

impl ConstantStateSystem {
    /// Build the characteristic data from the raw expansion coefficients.
    pub fn new(
        w_star: Array1<f64>,
        a_star: Array2<f64>,
        b_star: Array2<f64>,
        gamma_star: Vec<Array2<f64>>,
    ) -> Result<Self, CoreError> {
        let n = w_star.len();
        if a_star.dim() != (n, n)
            || b_star.dim() != (n, n)
            || gamma_star.len() != n
            || gamma_star.iter().any(|g| g.dim() != (n, n))
        {
            return Err(CoreError::DimensionMismatch(
                "constant-state coefficients must all be n×n".into(),
            ));
        }
        let (lam, v, _) = dual_eigen_real(&a_star).map_err(|e| {
            CoreError::NonstrictHyperbolic(format!(
                "nonstrict-hyperbolic: characteristic decomposition failed: {e}"
            ))
        })?;
        let scale = lam.iter().fold(1.0f64, |s, z| s.max(z.norm()));
        let imag = lam.iter().fold(0.0f64, |s, z| s.max(z.im.abs()));
        if imag > 1e-8 * scale {
            return Err(CoreError::NonstrictHyperbolic(format!(
                "nonstrict-hyperbolic: complex speeds (max imaginary part {imag:.3e})"
            )));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if (lam[i] - lam[j]).norm() <= 1e-8 * scale {
                    return Err(CoreError::NonstrictHyperbolic(format!(
                        "nonstrict-hyperbolic: speeds collide: {} ≈ {}",
                        lam[i].re, lam[j].re
                    )));
                }
            }
        }
        // Realify the eigenbasis: rotate each column's largest entry onto
        // the real axis, then rebuild the left basis so duality is exact.
        let mut r_star = Array2::zeros((n, n));
        for j in 0..n {
            let col = v.column(j);
            let lead = col
                .iter()
                .cloned()
                .max_by(|x, y| x.norm().partial_cmp(&y.norm()).unwrap())
                .unwrap();
            let phase = lead / lead.norm();
            for i in 0..n {
                r_star[[i, j]] = (col[i] / phase).re;
            }
        }
        let id: Array2<f64> = Array2::eye(n);
        let mut l_star = Array2::zeros((n, n));
        let rt = r_star.t().to_owned();
        for i in 0..n {
            let row = solve_real(&rt, &id.row(i).to_owned())?;
            l_star.row_mut(i).assign(&row);
        }

        let a: Vec<f64> = lam.iter().map(|z| z.re).collect();
        let mut b = Vec::with_capacity(n);
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..n {
                for q in 0..n {
                    s += l_star[[j, p]] * b_star[[p, q]] * r_star[[q, j]];
                }
            }
            b.push(s);
        }
        if b.iter().any(|&x| x <= 0.0) {
            return Err(CoreError::Nonparabolic(format!(
                "nonparabolic: effective diffusion rates {b:?} are not all positive"
            )));
        }
        let quad = |g: &Array2<f64>, r: ArrayView1<'_, f64>| -> f64 {
            let mut s = 0.0;
            for p in 0..n {
                for q in 0..n {
                    s += r[p] * g[[p, q]] * r[q];
                }
            }
            s
        };
        let gamma: Vec<f64> = (0..n)
            .map(|j| {
                let mut s = 0.0;
                for i in 0..n {
                    s += l_star[[j, i]] * quad(&gamma_star[i], r_star.column(j));
                }
                s
            })
            .collect();
        // Γ̃ keeps only the diagonal characteristic self-interactions:
        // component i of Γ̃(w, w) is Σ_m R[i,m] γ_m (l_m·w)².
        let mut gamma_tilde = vec![Array2::<f64>::zeros((n, n)); n];
        for i in 0..n {
            for m in 0..n {
                let c = r_star[[i, m]] * gamma[m];
                for p in 0..n {
                    for q in 0..n {
                        gamma_tilde[i][[p, q]] += c * l_star[[m, p]] * l_star[[m, q]];
                    }
                }
            }
        }
        let mut b_tilde = Array2::<f64>::zeros((n, n));
        for p in 0..n {
            for q in 0..n {
                let mut s = 0.0;
                for j in 0..n {
                    s += r_star[[p, j]] * b[j] * l_star[[j, q]];
                }
                b_tilde[[p, q]] = s;
            }
        }
        Ok(ConstantStateSystem {
            w_star,
            a_star,
            b_star,
            gamma_star,
            r_star,
            l_star,
            a,
            b,
            gamma,
            gamma_tilde,
            b_tilde,
        })
    }

    /// Expand a pure hyperbolic–parabolic model (no source term, no
    /// constant-coefficient linear operator) around a constant state.
    pub fn from_model(model: &ModelSpec, w_star: ArrayView1<'_, f64>) -> Result<Self, CoreError> {
        if model.has_source() {
            return Err(CoreError::UnsupportedStructure(
                "constant-state expansion needs a model without source terms".into(),
            ));
        }
        for i in 0..model.n {
            for z in [
                num_complex::Complex64::new(0.0, 1.0),
                num_complex::Complex64::new(0.0, 0.5),
            ] {
                if model.linear_op_at(i, z).norm() > 0.0 {
                    return Err(CoreError::UnsupportedStructure(
                        "constant-state expansion needs a model without linear operators".into(),
                    ));
                }
            }
        }
        let a_star = model.flux_jacobian(w_star)?;
        let gamma_star = model.flux_hessian(w_star)?;
        let b_star = model.evaluate_viscosity(w_star)?;
        Self::new(w_star.to_owned(), a_star, b_star, gamma_star)
    }

    /// Number of components.
    pub fn n(&self) -> usize {
        self.w_star.len()
    }
}

/// Self-similar diffusion wave of the scalar Burgers equation
/// `θ_t + γ (θ²/2)_x = θ_xx` launched from the point mass `mass·δ`,
/// evaluated by the Hopf–Cole closed form (heat kernel when `γ = 0`).
pub fn burgers_diffusion_wave(
    gamma: f64,
    mass: f64,
    x: ArrayView1<'_, f64>,
    t: f64,
) -> Result<Array1<f64>, CoreError> {
    if !(t > 0.0) {
        return Err(CoreError::UnsupportedStructure(format!(
            "diffusion wave needs t > 0, got {t}"
        )));
    }
    let s = (4.0 * t).sqrt();
    let kernel = |x: f64| (-x * x / (4.0 * t)).exp() / (std::f64::consts::PI * 4.0 * t).sqrt();
    if gamma == 0.0 {
        return Ok(Array1::from_iter(x.iter().map(|&x| mass * kernel(x))));
    }
    // Hopf–Cole: with α = γ·mass/2 the potential e^{−(γ/2)∫θ} evolves by
    // the heat flow of a step, so
    //   θ = (2/γ)(1 − e^{−α}) G / [e^{−α} + (1 − e^{−α}) N],
    // G the heat kernel and N = erfc(x/√(4t))/2.
    let alpha = 0.5 * gamma * mass;
    let jump = -(-alpha).exp_m1(); // 1 − e^{−α}, stable for small α
    let floor = (-alpha).exp();
    Ok(Array1::from_iter(x.iter().map(|&x| {
        let n = 0.5 * erfc(x / s);
        (2.0 / gamma) * jump * kernel(x) / (floor + jump * n)
    })))
}

/// Resolve the quadratic and decoupled-quadratic approximants of a
/// constant-state system as integrable coefficient sets (advection scale
/// `k = 1`), in that order.
pub fn build_approximants(
    sys: &ConstantStateSystem,
) -> (QuadraticCoefficients, QuadraticCoefficients) {
    let base = QuadraticCoefficients {
        k: 1.0,
        a_star: sys.a_star.clone(),
        a: sys.a.clone(),
        v_right: sys.r_star.clone(),
        v_left: sys.l_star.clone(),
        gamma: sys.gamma_star.clone(),
        b: sys.b.clone(),
        b_tilde: sys.b_tilde.clone(),
    };
    let mut decoupled = base.clone();
    decoupled.gamma = sys.gamma_tilde.clone();
    (base, decoupled)
}

/// Superposition of scalar diffusion waves along the characteristic
/// directions,
///   `w_* + Σ_j θ_j(x − a_j(1+t), b_j(1+t)) r_j`,
/// where θ_j carries the rescaled nonlinearity `γ_j / b_j` and the point
/// mass `l_j·m0`. The far field is exactly `w_*`.
pub fn diffusion_wave_superposition(
    sys: &ConstantStateSystem,
    m0: ArrayView1<'_, f64>,
    x: ArrayView1<'_, f64>,
    t: f64,
) -> Result<Array2<f64>, CoreError> {
    let n = sys.n();
    if m0.len() != n {
        return Err(CoreError::DimensionMismatch(
            "mass vector length must match the system size".into(),
        ));
    }
    if t < 0.0 {
        return Err(CoreError::UnsupportedStructure(format!(
            "superposition needs t ≥ 0, got {t}"
        )));
    }
    let nx = x.len();
    let mut u = Array2::<f64>::zeros((n, nx));
    for i in 0..n {
        u.row_mut(i).fill(sys.w_star[i]);
    }
    for j in 0..n {
        let mj: f64 = (0..n).map(|i| sys.l_star[[j, i]] * m0[i]).sum();
        let shift = sys.a[j] * (1.0 + t);
        let xs = Array1::from_iter(x.iter().map(|&x| x - shift));
        let theta = burgers_diffusion_wave(
            sys.gamma[j] / sys.b[j],
            mj,
            xs.view(),
            sys.b[j] * (1.0 + t),
        )?;
        for i in 0..n {
            for p in 0..nx {
                u[[i, p]] += theta[p] * sys.r_star[[i, j]];
            }
        }
    }
    Ok(u)
}

/// Per-time `L^p` gap between two trajectories, with a log-log decay fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquivalenceGap {
    pub times: Vec<f64>,
    /// `L^p` norm of the pointwise Euclidean difference per snapshot.
    pub gap: Vec<f64>,
    /// Fitted `(exponent, stderr)` of `gap ~ (1+t)^exponent` over the
    /// positive-time snapshots; absent when the fit is degenerate.
    pub exponent: Option<(f64, f64)>,
}

/// Measure the asymptotic-equivalence gap between two trajectories on the
/// same grid and time ladder. Rows beyond the common count are ignored, so
/// auxiliary phase rows carried by modulation trajectories do not need to
/// be stripped first.
pub fn equivalence_gap(
    traj_a: &Trajectory,
    traj_b: &Trajectory,
    p: f64,
) -> Result<EquivalenceGap, CoreError> {
    if traj_a.periods != traj_b.periods
        || traj_a.snapshots[0].ncols() != traj_b.snapshots[0].ncols()
    {
        return Err(CoreError::DimensionMismatch(
            "trajectories live on different grids".into(),
        ));
    }
    if traj_a.times.len() != traj_b.times.len()
        || traj_a
            .times
            .iter()
            .zip(&traj_b.times)
            .any(|(s, t)| (s - t).abs() > 1e-9 * (1.0 + t.abs()))
    {
        return Err(CoreError::DimensionMismatch(
            "trajectories carry different time ladders".into(),
        ));
    }
    let rows = traj_a.snapshots[0].nrows().min(traj_b.snapshots[0].nrows());
    let nx = traj_a.snapshots[0].ncols();
    let dx = traj_a.periods as f64 / nx as f64;
    let gap: Vec<f64> = traj_a
        .snapshots
        .iter()
        .zip(&traj_b.snapshots)
        .map(|(sa, sb)| {
            let point = Array1::from_iter((0..nx).map(|p| {
                (0..rows)
                    .map(|i| {
                        let d = sa[[i, p]] - sb[[i, p]];
                        d * d
                    })
                    .sum::<f64>()
                    .sqrt()
            }));
            lp_norm(point.view(), p, dx)
        })
        .collect();
    let positive: Vec<f64> = traj_a.times.iter().copied().filter(|&t| t > 0.0).collect();
    let exponent = match (positive.first(), positive.last()) {
        (Some(&lo), Some(&hi)) if hi > lo => {
            decay_rate(&traj_a.times, &gap, (lo, hi)).ok()
        }
        _ => None,
    };
    Ok(EquivalenceGap {
        times: traj_a.times.clone(),
        gap,
        exponent,
    })
}

/// Convert an absolute-field trajectory into deviations from `w_star`, so
/// it can be gap-measured against approximant trajectories.
pub fn deviation_trajectory(
    traj: &Trajectory,
    w_star: ArrayView1<'_, f64>,
) -> Result<Trajectory, CoreError> {
    let n = w_star.len();
    if traj.snapshots[0].nrows() != n {
        return Err(CoreError::DimensionMismatch(
            "snapshot rows must match the constant state".into(),
        ));
    }
    let snapshots = traj
        .snapshots
        .iter()
        .map(|s| {
            let mut d = s.clone();
            for i in 0..n {
                d.row_mut(i).mapv_inplace(|x| x - w_star[i]);
            }
            d
        })
        .collect();
    Ok(Trajectory {
        periods: traj.periods,
        times: traj.times.clone(),
        snapshots,
    })
}
