//! Time integration on large periodic domains: the full PDE (IMEX
//! pseudospectral), the modulation systems, modulated initial data,
//! least-squares extraction of modulation fields from trajectories, and
//! decay-rate measurement.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::grid;
use crate::model::ModelSpec;
use crate::profile::{WaveFamily, WaveProfile};
use crate::whitham::{invert_phase, whitham_initial_data, WhithamData};

const TAU: f64 = std::f64::consts::TAU;

/// State of the full PDE on a torus of `periods` whole wave periods,
/// tabulated in period units (the domain has length `periods`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldState {
    pub periods: usize,
    /// Reference wavenumber: the PDE is integrated in the profile scaling
    /// `u_t + k(f(u) − c u)_x + P(k∂_x)u + g(u) = k²(B(u)u_x)_x`.
    pub k: f64,
    /// Fields, `n × (periods · samples)`.
    pub u: Array2<f64>,
    pub t: f64,
}

impl FieldState {
    pub fn samples_per_period(&self) -> usize {
        self.u.ncols() / self.periods
    }

    pub fn length(&self) -> f64 {
        self.periods as f64
    }

    /// Fraction of spectral energy in the top quarter of the mode range;
    /// a smooth, resolved state keeps this tiny.
    pub fn tail_fraction(&self) -> f64 {
        let n = self.u.ncols();
        let mut tail = 0.0;
        let mut total = 0.0;
        for r in 0..self.u.nrows() {
            let vals: Vec<Complex64> = self
                .u
                .row(r)
                .iter()
                .map(|&v| Complex64::new(v, 0.0))
                .collect();
            let co = grid::fft(&vals);
            for (j, z) in co.iter().enumerate() {
                let m = if j <= n / 2 { j } else { n - j };
                let e = z.norm_sqr();
                if m > 0 {
                    total += e;
                    if m >= 3 * (n / 2) / 4 {
                        tail += e;
                    }
                }
            }
        }
        if total == 0.0 {
            0.0
        } else {
            tail / total
        }
    }
}

/// Integration frame: lab, or co-moving at speed `c` (period units per
/// unit time after the wavenumber scaling, i.e. the profile speed).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Frame {
    Lab,
    CoMoving(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PdeOptions {
    pub frame: Frame,
    /// Steps between stored snapshots; 0 stores only the endpoints.
    pub save_every: usize,
    /// Sup-norm ceiling beyond which integration aborts.
    pub ceiling: f64,
}

impl Default for PdeOptions {
    fn default() -> Self {
        PdeOptions {
            frame: Frame::Lab,
            save_every: 0,
            ceiling: 1e4,
        }
    }
}

/// Stored trajectory: snapshots of an `n_rows × N` field at save times.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub periods: usize,
    pub times: Vec<f64>,
    pub snapshots: Vec<Array2<f64>>,
}

impl Trajectory {
    pub fn last(&self) -> &Array2<f64> {
        self.snapshots.last().unwrap()
    }

    /// `L^p` norm series of a diagnostic extracted per snapshot.
    pub fn norm_series<F>(&self, p: f64, diag: F) -> Vec<f64>
    where
        F: Fn(&Array2<f64>) -> Array1<f64>,
    {
        let dx = self.periods as f64 / self.snapshots[0].ncols() as f64;
        self.snapshots
            .iter()
            .map(|s| lp_norm(diag(s).view(), p, dx))
            .collect()
    }
}

/// `L^p` norm with grid weight `dx`; `p = f64::INFINITY` gives the sup norm.
pub fn lp_norm(v: ArrayView1<'_, f64>, p: f64, dx: f64) -> f64 {
    if p.is_infinite() {
        v.iter().fold(0.0f64, |s, &x| s.max(x.abs()))
    } else if (p - 1.0).abs() < 1e-14 {
        v.iter().map(|&x| x.abs()).sum::<f64>() * dx
    } else if (p - 2.0).abs() < 1e-14 {
        (v.iter().map(|&x| x * x).sum::<f64>() * dx).sqrt()
    } else {
        (v.iter().map(|&x| x.abs().powf(p)).sum::<f64>() * dx).powf(1.0 / p)
    }
}

fn to_hat(row: ArrayView1<'_, f64>) -> Vec<Complex64> {
    let vals: Vec<Complex64> = row.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    grid::fft(&vals)
}

fn from_hat(hat: &[Complex64]) -> Array1<f64> {
    Array1::from(grid::ifft(hat).iter().map(|z| z.re).collect::<Vec<f64>>())
}

/// Integrate the PDE with a second-order Lawson scheme: the constant-
/// coefficient linear part (dispersion `P`, frame advection, and the
/// diagonal of the constant viscosity) is applied through its exact
/// Fourier factor; flux divergence, source, and any state-dependent or
/// off-diagonal viscous remainder go through an explicit midpoint stage.
pub fn integrate_pde(
    model: &ModelSpec,
    state: &FieldState,
    t_end: f64,
    dt: f64,
    opts: &PdeOptions,
) -> Result<Trajectory, CoreError> {
    let n = model.n;
    if state.u.nrows() != n {
        return Err(CoreError::DimensionMismatch(format!(
            "field has {} rows for an {}-component model",
            state.u.nrows(),
            n
        )));
    }
    let nx = state.u.ncols();
    let length = state.length();
    let k = state.k;
    let c = match opts.frame {
        Frame::Lab => 0.0,
        Frame::CoMoving(c) => c,
    };

    // Reference viscosity handled implicitly: the diagonal of B at the
    // spatial mean state (exact split for the constant diagonal builtins).
    let mean_state = Array1::from_shape_fn(n, |i| grid::mean(state.u.row(i)));
    let b_ref = match &model.constant_viscosity {
        Some(b) => b.clone(),
        None => model.evaluate_viscosity(mean_state.view())?,
    };
    let b_diag: Vec<f64> = (0..n).map(|i| b_ref[[i, i]]).collect();
    let needs_visc_remainder = model.constant_viscosity.is_none()
        || (0..n).any(|i| (0..n).any(|j| i != j && b_ref[[i, j]] != 0.0));

    let theta: Vec<f64> = (0..nx)
        .map(|j| {
            let js = if j <= nx / 2 {
                j as i64
            } else {
                j as i64 - nx as i64
            };
            TAU * js as f64 / length
        })
        .collect();
    // Exact factors exp(s dt) and exp(s dt/2) per component and mode.
    let mut e_full = vec![vec![Complex64::new(0.0, 0.0); nx]; n];
    let mut e_half = vec![vec![Complex64::new(0.0, 0.0); nx]; n];
    for i in 0..n {
        for (j, &th) in theta.iter().enumerate() {
            let z = Complex64::new(0.0, k * th);
            let s = -model.linear_op_at(i, z) + Complex64::new(0.0, c * k * th)
                - Complex64::new(k * k * th * th * b_diag[i], 0.0);
            e_full[i][j] = (s * dt).exp();
            e_half[i][j] = (s * dt / 2.0).exp();
        }
    }

    let nonlin = |uhat: &Vec<Vec<Complex64>>| -> Result<Vec<Vec<Complex64>>, CoreError> {
        let mut uphys = Array2::<f64>::zeros((n, nx));
        for i in 0..n {
            uphys.row_mut(i).assign(&from_hat(&uhat[i]));
        }
        let mut rhs = Array2::<f64>::zeros((n, nx));
        let mut flux = Array2::<f64>::zeros((n, nx));
        for p in 0..nx {
            let f = model.evaluate_flux(uphys.column(p))?;
            for i in 0..n {
                flux[[i, p]] = f[i];
            }
            if model.has_source() {
                let g = model.evaluate_source(uphys.column(p))?;
                for i in 0..n {
                    rhs[[i, p]] -= g[i];
                }
            }
        }
        if needs_visc_remainder {
            let ux = grid::deriv_rows(uphys.view(), 1, length);
            let mut rem = Array2::<f64>::zeros((n, nx));
            for p in 0..nx {
                let b = match &model.constant_viscosity {
                    Some(b) => b.clone(),
                    None => model.evaluate_viscosity(uphys.column(p))?,
                };
                for i in 0..n {
                    for j in 0..n {
                        let coeff = if i == j { b[[i, j]] - b_diag[i] } else { b[[i, j]] };
                        rem[[i, p]] += coeff * ux[[j, p]];
                    }
                }
            }
            let drem = grid::deriv_rows(rem.view(), 1, length);
            rhs += &(&drem * (k * k));
        }
        let dflux = grid::deriv_rows(flux.view(), 1, length);
        rhs -= &(&dflux * k);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            out.push(to_hat(rhs.row(i)));
        }
        Ok(out)
    };

    let steps = (t_end / dt).round().max(1.0) as usize;
    let mut uhat: Vec<Vec<Complex64>> = (0..n).map(|i| to_hat(state.u.row(i))).collect();
    let mut traj = Trajectory {
        periods: state.periods,
        times: vec![state.t],
        snapshots: vec![state.u.clone()],
    };
    let snapshot = |uhat: &Vec<Vec<Complex64>>| -> Array2<f64> {
        let mut s = Array2::<f64>::zeros((n, nx));
        for i in 0..n {
            s.row_mut(i).assign(&from_hat(&uhat[i]));
        }
        s
    };
    for step in 1..=steps {
        let n0 = nonlin(&uhat)?;
        let mut mid = vec![vec![Complex64::new(0.0, 0.0); nx]; n];
        for i in 0..n {
            for j in 0..nx {
                mid[i][j] = e_half[i][j] * (uhat[i][j] + dt / 2.0 * n0[i][j]);
            }
        }
        let nmid = nonlin(&mid)?;
        for i in 0..n {
            for j in 0..nx {
                uhat[i][j] = e_full[i][j] * uhat[i][j] + dt * e_half[i][j] * nmid[i][j];
            }
        }
        let store = (opts.save_every > 0 && step % opts.save_every == 0) || step == steps;
        if store || step % 64 == 0 {
            let s = snapshot(&uhat);
            let peak = s.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
            if !peak.is_finite() || peak > opts.ceiling {
                return Err(CoreError::BlowUp(format!(
                    "sup norm {peak:.3e} exceeded ceiling {:.3e} at t = {:.4}",
                    opts.ceiling,
                    state.t + step as f64 * dt
                )));
            }
            if store {
                traj.times.push(state.t + step as f64 * dt);
                traj.snapshots.push(s);
            }
        }
    }
    Ok(traj)
}

/// Modulated initial data `ũ₀ = (Ū + d₀)∘Ψ₀` with `Ψ₀ = (Id − h₀)⁻¹`,
/// sampled by trigonometric interpolation.
pub fn modulated_initial_data(
    profile: &WaveProfile,
    h0: ArrayView1<'_, f64>,
    d0: ArrayView2<'_, f64>,
    periods: usize,
) -> Result<FieldState, CoreError> {
    let n = profile.u.nrows();
    let nx = h0.len();
    if d0.nrows() != n || d0.ncols() != nx {
        return Err(CoreError::DimensionMismatch(
            "deviation field shape must match (components, phase grid)".into(),
        ));
    }
    let length = periods as f64;
    let psi = invert_phase(h0, length, 1e-12)?;
    let mut u = Array2::<f64>::zeros((n, nx));
    for p in 0..nx {
        let y = psi[p];
        for i in 0..n {
            u[[i, p]] = grid::interp(profile.u.row(i), y, 1.0) + grid::interp(d0.row(i), y, length);
        }
    }
    Ok(FieldState {
        periods,
        k: profile.k,
        u,
        t: 0.0,
    })
}

/// Which modulation system to integrate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModulationSystem {
    /// First-order Whitham flux (quadratic resolution of the averaged
    /// maps), no diffusion — hyperbolic prediction only.
    FirstOrder,
    /// Quadratic approximant with effective diffusion.
    Quadratic,
    /// Characteristic-decoupled quadratic approximant: independent scalar
    /// Burgers equations in the characteristic coordinates.
    Decoupled,
}

/// Coefficients of a constant-coefficient quadratic system
/// `∂_t w + k A ∂_x w + ∂_x(½ wᵀΓw) = k² B̃ ∂²_x w`
/// with the characteristic frame `(V, Ṽ)` of `A` carried along.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuadraticCoefficients {
    /// Length scale multiplying the advection and diffusion terms.
    pub k: f64,
    /// Advection matrix `A`.
    pub a_star: Array2<f64>,
    /// Eigenvalues of `A`, ascending.
    pub a: Vec<f64>,
    /// Right eigenvectors of `A` as columns.
    pub v_right: Array2<f64>,
    /// Left eigenvectors of `A` as rows, `v_left · v_right = Id`.
    pub v_left: Array2<f64>,
    /// Quadratic flux: one symmetric matrix per equation.
    pub gamma: Vec<Array2<f64>>,
    /// Diagonal diffusion rates in the characteristic frame.
    pub b: Vec<f64>,
    /// `V diag(b) Ṽ`: the diffusion matrix in the physical frame.
    pub b_tilde: Array2<f64>,
}

impl From<&WhithamData> for QuadraticCoefficients {
    fn from(data: &WhithamData) -> Self {
        let fo = &data.first_order;
        QuadraticCoefficients {
            k: data.k,
            a_star: fo.a_star.clone(),
            a: fo.a.clone(),
            v_right: fo.v_right.clone(),
            v_left: fo.v_left.clone(),
            gamma: data.gamma_star.clone(),
            b: data.b.clone(),
            b_tilde: data.b_tilde.clone(),
        }
    }
}

/// Integrate a modulation system for the deviation `w = (M − M̄, κ − k̄)`.
/// Snapshot rows are the `n_c + 1` deviation components followed by the
/// phase increment `ψ`, integrated alongside from the κ-row flux with
/// `ψ(·, 0) = 0`, so that `κ(t) − κ(0) = k̄ ∂_x ψ(t)` and the full phase
/// offset is `ψ(t)` plus whatever offset the initial data carried.
pub fn integrate_modulation(
    data: &WhithamData,
    system: ModulationSystem,
    w0: ArrayView2<'_, f64>,
    periods: usize,
    t_end: f64,
    dt: f64,
    opts: &PdeOptions,
) -> Result<Trajectory, CoreError> {
    integrate_quadratic(
        &QuadraticCoefficients::from(data),
        system,
        w0,
        periods,
        t_end,
        dt,
        opts,
    )
}

/// Integrate a constant-coefficient quadratic system with a Lawson
/// midpoint scheme: exact advection/diffusion factors, explicit quadratic
/// flux. The final snapshot row is the phase increment driven by the
/// last-row flux, `ψ_t = −flux / k`.
pub fn integrate_quadratic(
    coeffs: &QuadraticCoefficients,
    system: ModulationSystem,
    w0: ArrayView2<'_, f64>,
    periods: usize,
    t_end: f64,
    dt: f64,
    opts: &PdeOptions,
) -> Result<Trajectory, CoreError> {
    let nc1 = coeffs.a.len();
    if w0.nrows() != nc1 {
        return Err(CoreError::DimensionMismatch(format!(
            "deviation field has {} rows, modulation system has {nc1}",
            w0.nrows()
        )));
    }
    if system != ModulationSystem::FirstOrder {
        if coeffs.b.iter().any(|&b| b <= 0.0) {
            return Err(CoreError::Nonparabolic(format!(
                "effective diffusion rates {:?} are not all positive",
                coeffs.b
            )));
        }
    }
    let nx = w0.ncols();
    let length = periods as f64;
    let k = coeffs.k;

    // Characteristic data for the decoupled route.
    let gamma_char: Vec<f64> = (0..nc1)
        .map(|j| {
            let r = coeffs.v_right.column(j);
            let l = coeffs.v_left.row(j);
            let mut g = 0.0;
            for i in 0..nc1 {
                let mut q = 0.0;
                for a in 0..nc1 {
                    for b in 0..nc1 {
                        q += r[a] * coeffs.gamma[i][[a, b]] * r[b];
                    }
                }
                g += l[i] * q;
            }
            g
        })
        .collect();

    let theta: Vec<f64> = (0..nx)
        .map(|j| {
            let js = if j <= nx / 2 {
                j as i64
            } else {
                j as i64 - nx as i64
            };
            TAU * js as f64 / length
        })
        .collect();

    // Fields in the integrated coordinates: characteristic scalars for the
    // decoupled system, conserved/wavenumber deviations otherwise.
    let decoupled = system == ModulationSystem::Decoupled;
    let mut z0 = Array2::<f64>::zeros((nc1, nx));
    if decoupled {
        for p in 0..nx {
            for j in 0..nc1 {
                let mut s = 0.0;
                for i in 0..nc1 {
                    s += coeffs.v_left[[j, i]] * w0[[i, p]];
                }
                z0[[j, p]] = s;
            }
        }
    } else {
        z0.assign(&w0);
    }

    // Exact linear factors: advection (and diffusion for the viscous
    // systems). Decoupled: diagonal in characteristic coordinates.
    // Quadratic/first-order: advection diagonalized through (V, Ṽ).
    let rates: Vec<(f64, f64)> = (0..nc1)
        .map(|j| {
            let b = match system {
                ModulationSystem::FirstOrder => 0.0,
                _ => coeffs.b[j],
            };
            (coeffs.a[j], b)
        })
        .collect();
    let apply_linear = |z: &mut Array2<Complex64>, half: bool| {
        let f = if half { 0.5 } else { 1.0 };
        if decoupled {
            for j in 0..nc1 {
                let (a, b) = rates[j];
                for p in 0..nx {
                    let th = theta[p];
                    let s = Complex64::new(-k * k * th * th * b, -k * a * th);
                    z[[j, p]] *= (s * dt * f).exp();
                }
            }
        } else {
            // Transform to characteristic coordinates, apply, transform back.
            for p in 0..nx {
                let th = theta[p];
                let mut zc = vec![Complex64::new(0.0, 0.0); nc1];
                for j in 0..nc1 {
                    for i in 0..nc1 {
                        zc[j] += coeffs.v_left[[j, i]] * z[[i, p]];
                    }
                }
                for j in 0..nc1 {
                    let (a, b) = rates[j];
                    let s = Complex64::new(-k * k * th * th * b, -k * a * th);
                    zc[j] *= (s * dt * f).exp();
                }
                for i in 0..nc1 {
                    let mut s = Complex64::new(0.0, 0.0);
                    for j in 0..nc1 {
                        s += coeffs.v_right[[i, j]] * zc[j];
                    }
                    z[[i, p]] = s;
                }
            }
        }
    };

    // Quadratic flux in physical space (already includes the k̄ scalings
    // carried by Γ; the decoupled system uses the scalar γ_j).
    let quad_flux = |z: &Array2<f64>| -> Array2<f64> {
        let mut flux = Array2::<f64>::zeros((nc1, nx));
        if decoupled {
            for j in 0..nc1 {
                for p in 0..nx {
                    flux[[j, p]] = 0.5 * gamma_char[j] * z[[j, p]] * z[[j, p]];
                }
            }
        } else {
            for p in 0..nx {
                for i in 0..nc1 {
                    let mut q = 0.0;
                    for a in 0..nc1 {
                        for b in 0..nc1 {
                            q += z[[a, p]] * coeffs.gamma[i][[a, b]] * z[[b, p]];
                        }
                    }
                    flux[[i, p]] = 0.5 * q;
                }
            }
        }
        flux
    };

    let steps = (t_end / dt).round().max(1.0) as usize;
    let mut zhat = Array2::<Complex64>::zeros((nc1, nx));
    for j in 0..nc1 {
        let h = to_hat(z0.row(j));
        for p in 0..nx {
            zhat[[j, p]] = h[p];
        }
    }
    let mut psi = Array1::<f64>::zeros(nx);

    let phys = |zhat: &Array2<Complex64>| -> Array2<f64> {
        let mut z = Array2::<f64>::zeros((nc1, nx));
        for j in 0..nc1 {
            let row: Vec<Complex64> = (0..nx).map(|p| zhat[[j, p]]).collect();
            z.row_mut(j).assign(&from_hat(&row));
        }
        z
    };
    // Deviations in conserved/wavenumber coordinates, for ψ and storage.
    let to_w = |z: &Array2<f64>| -> Array2<f64> {
        if !decoupled {
            return z.clone();
        }
        let mut w = Array2::<f64>::zeros((nc1, nx));
        for p in 0..nx {
            for i in 0..nc1 {
                let mut s = 0.0;
                for j in 0..nc1 {
                    s += coeffs.v_right[[i, j]] * z[[j, p]];
                }
                w[[i, p]] = s;
            }
        }
        w
    };
    // κ-row flux of the integrated system, for phase recovery
    // ψ_t = −flux_κ / k̄. The decoupled system reconstructs it from its own
    // characteristic scalars so that κ − κ(0) = k̄ ∂_x ψ holds exactly.
    let krow = nc1 - 1;
    let kappa_flux = |z: &Array2<f64>, w: &Array2<f64>| -> Array1<f64> {
        let mut fl = Array1::<f64>::zeros(nx);
        if decoupled {
            let zx = grid::deriv_rows(z.view(), 1, length);
            for p in 0..nx {
                let mut s = 0.0;
                for j in 0..nc1 {
                    let zj = z[[j, p]];
                    s += coeffs.v_right[[krow, j]]
                        * (k * coeffs.a[j] * zj + 0.5 * gamma_char[j] * zj * zj
                            - k * k * coeffs.b[j] * zx[[j, p]]);
                }
                fl[p] = s;
            }
            return fl;
        }
        for p in 0..nx {
            let mut s = 0.0;
            for j in 0..nc1 {
                s += k * coeffs.a_star[[krow, j]] * w[[j, p]];
            }
            let mut q = 0.0;
            for a in 0..nc1 {
                for b in 0..nc1 {
                    q += w[[a, p]] * coeffs.gamma[krow][[a, b]] * w[[b, p]];
                }
            }
            s += 0.5 * q;
            fl[p] = s;
        }
        if system != ModulationSystem::FirstOrder {
            let wx = grid::deriv_rows(w.view(), 1, length);
            for p in 0..nx {
                let mut d = 0.0;
                for j in 0..nc1 {
                    d += coeffs.b_tilde[[krow, j]] * wx[[j, p]];
                }
                fl[p] -= k * k * d;
            }
        }
        fl
    };

    let store_state = |zhat: &Array2<Complex64>, psi: &Array1<f64>| -> Array2<f64> {
        let w = to_w(&phys(zhat));
        let mut s = Array2::<f64>::zeros((nc1 + 1, nx));
        for i in 0..nc1 {
            s.row_mut(i).assign(&w.row(i));
        }
        s.row_mut(nc1).assign(psi);
        s
    };

    let mut traj = Trajectory {
        periods,
        times: vec![0.0],
        snapshots: vec![store_state(&zhat, &psi)],
    };
    for step in 1..=steps {
        // Lawson midpoint on the quadratic flux divergence; ψ by midpoint.
        let z_phys = phys(&zhat);
        let n0 = {
            let fl = quad_flux(&z_phys);
            let d = grid::deriv_rows(fl.view(), 1, length);
            d
        };
        let mut mid = zhat.clone();
        for j in 0..nc1 {
            let h = to_hat(n0.row(j));
            for p in 0..nx {
                mid[[j, p]] -= dt / 2.0 * h[p];
            }
        }
        apply_linear(&mut mid, true);
        let mid_phys = phys(&mid);
        let nmid = {
            let fl = quad_flux(&mid_phys);
            grid::deriv_rows(fl.view(), 1, length)
        };
        apply_linear(&mut zhat, false);
        // e_half · (dt · nonlinearity at midpoint), added in spectral space.
        let mut nh = Array2::<Complex64>::zeros((nc1, nx));
        for j in 0..nc1 {
            let h = to_hat(nmid.row(j));
            for p in 0..nx {
                nh[[j, p]] = h[p];
            }
        }
        apply_linear(&mut nh, true);
        for j in 0..nc1 {
            for p in 0..nx {
                zhat[[j, p]] -= dt * nh[[j, p]];
            }
        }
        let w_mid = to_w(&mid_phys);
        let fl = kappa_flux(&mid_phys, &w_mid);
        for p in 0..nx {
            psi[p] -= dt * fl[p] / k;
        }

        let store = (opts.save_every > 0 && step % opts.save_every == 0) || step == steps;
        if store || step % 64 == 0 {
            let s = store_state(&zhat, &psi);
            let peak = s.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
            if !peak.is_finite() || peak > opts.ceiling {
                return Err(CoreError::BlowUp(format!(
                    "modulation sup norm {peak:.3e} exceeded ceiling at step {step}"
                )));
            }
            if store {
                traj.times.push(step as f64 * dt);
                traj.snapshots.push(s);
            }
        }
    }
    Ok(traj)
}

/// Modulation fields recovered from a snapshot by overlapping windowed fits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModulationFields {
    /// Window centers, period units.
    pub centers: Array1<f64>,
    /// Phase offset ψ at each center (`Ψ = Id + ψ`).
    pub psi: Array1<f64>,
    /// Conserved means at each center, `n_c × n_windows`.
    pub m: Array2<f64>,
    /// Local wavenumber `k̄ ∂_x Ψ` from the fitted phase.
    pub kappa: Array1<f64>,
    /// Per-window wavenumber estimate from the shape fit (diagnostic).
    pub kappa_window: Array1<f64>,
    /// `max |κ_window − κ|` — consistency of the two wavenumber readings.
    pub consistency: f64,
}

/// Fit `(ψ, M, κ)` on windows of one period with 50% overlap: in each
/// window the data is matched to the first-order family expansion
/// `U^{M,k}(ψ + (κ/k̄)(x − x_c))` by Gauss–Newton, with the phase seeded
/// from the previous window and unwrapped along x.
pub fn extract_modulation(
    state: &FieldState,
    family: &WaveFamily,
) -> Result<ModulationFields, CoreError> {
    let anchor = &family.anchor;
    let n = anchor.u.nrows();
    let n_c = family.du_dm.len();
    let nx = state.u.ncols();
    let length = state.length();
    let k = anchor.k;
    let n_w = 2 * state.periods;
    let du_dk = family
        .du_dk
        .as_ref()
        .ok_or_else(|| CoreError::UnsupportedStructure("family lacks ∂_k data".into()))?;
    let ubar_x = grid::deriv_rows(anchor.u.view(), 1, 1.0);

    let mut centers = Array1::<f64>::zeros(n_w);
    let mut psi = Array1::<f64>::zeros(n_w);
    let mut m = Array2::<f64>::zeros((n_c, n_w));
    let mut kappa_window = Array1::<f64>::zeros(n_w);

    let npar = 2 + n_c;
    let mut guess = vec![0.0f64; npar]; // (ψ, dm…, dk)
    for wdx in 0..n_w {
        let xc = 0.5 * wdx as f64;
        centers[wdx] = xc;
        // Window grid points within half a period of the center.
        let pts: Vec<usize> = (0..nx)
            .filter(|&p| {
                let mut d = (p as f64 * length / nx as f64 - xc).rem_euclid(length);
                if d > length / 2.0 {
                    d -= length;
                }
                d.abs() <= 0.5
            })
            .collect();
        let mut par = guess.clone();
        for _ in 0..20 {
            // Residuals and Jacobian of the window model.
            let mut jtj = Array2::<f64>::zeros((npar, npar));
            let mut jtr = Array1::<f64>::zeros(npar);
            let mut sq = 0.0;
            for &p in &pts {
                let x = p as f64 * length / nx as f64;
                let mut dxc = (x - xc).rem_euclid(length);
                if dxc > length / 2.0 {
                    dxc -= length;
                }
                let y = xc + par[0] + (1.0 + par[npar - 1] / k) * dxc;
                for i in 0..n {
                    let base = grid::interp(anchor.u.row(i), y, 1.0);
                    let slope = grid::interp(ubar_x.row(i), y, 1.0);
                    let mut model = base;
                    let mut jac = vec![0.0f64; npar];
                    jac[0] = slope;
                    for l in 0..n_c {
                        model += par[1 + l] * grid::interp(family.du_dm[l].row(i), y, 1.0);
                        jac[1 + l] = grid::interp(family.du_dm[l].row(i), y, 1.0);
                    }
                    model += par[npar - 1] * grid::interp(du_dk.row(i), y, 1.0);
                    jac[npar - 1] = grid::interp(du_dk.row(i), y, 1.0) + slope * dxc / k;
                    let r = state.u[[i, p]] - model;
                    sq += r * r;
                    for a in 0..npar {
                        jtr[a] += jac[a] * r;
                        for b in 0..npar {
                            jtj[[a, b]] += jac[a] * jac[b];
                        }
                    }
                }
            }
            let step = crate::linalg::solve_real(&jtj, &jtr).map_err(|e| {
                CoreError::FitIllConditioned(format!("window at x = {xc:.3}: {e}"))
            })?;
            let mut done = true;
            for a in 0..npar {
                par[a] += step[a];
                if step[a].abs() > 1e-12 {
                    done = false;
                }
            }
            let _ = sq;
            if done {
                break;
            }
        }
        // Patch containment: the fitted deviations must stay within (a
        // modest extension of) the tabulated family patch.
        for l in 0..n_c {
            let lim = 2.0 * family.deltas[l] * family.half_widths[l] as f64 + 1e-9;
            if par[1 + l].abs() > lim.max(1e-6) {
                return Err(CoreError::FitOutOfPatch(format!(
                    "window at x = {xc:.3}: conserved deviation {:.3e} beyond patch {lim:.3e}",
                    par[1 + l]
                )));
            }
        }
        let klim = 2.0
            * family.deltas[family.deltas.len() - 1]
            * family.half_widths[family.half_widths.len() - 1] as f64
            + 1e-9;
        if par[npar - 1].abs() > klim.max(1e-6) {
            return Err(CoreError::FitOutOfPatch(format!(
                "window at x = {xc:.3}: wavenumber deviation {:.3e} beyond patch {klim:.3e}",
                par[npar - 1]
            )));
        }
        psi[wdx] = par[0];
        for l in 0..n_c {
            m[[l, wdx]] = anchor.m[l] + par[1 + l];
        }
        kappa_window[wdx] = k + par[npar - 1];
        guess = par;
    }

    // κ from the fitted phase: spectral derivative on the center grid.
    let dpsi = grid::deriv(psi.view(), 1, length);
    let kappa = Array1::from_shape_fn(n_w, |j| k * (1.0 + dpsi[j]));
    let consistency = (0..n_w)
        .map(|j| (kappa_window[j] - kappa[j]).abs())
        .fold(0.0f64, f64::max);
    Ok(ModulationFields {
        centers,
        psi,
        m,
        kappa,
        kappa_window,
        consistency,
    })
}

/// Log-log decay fit: slope and standard error of `ln v` against
/// `ln(1 + t)` over the requested time window.
pub fn decay_rate(
    times: &[f64],
    values: &[f64],
    window: (f64, f64),
) -> Result<(f64, f64), CoreError> {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(&t, &v)| t >= window.0 && t <= window.1 && v > 0.0)
        .map(|(&t, &v)| ((1.0 + t).ln(), v.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(CoreError::FitIllConditioned(format!(
            "{} usable points in the rate window [{}, {}]",
            pts.len(),
            window.0,
            window.1
        )));
    }
    let nn = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / nn;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / nn;
    let sxx = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum::<f64>();
    let sxy = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>();
    if sxx <= 0.0 {
        return Err(CoreError::FitIllConditioned(
            "degenerate time window".into(),
        ));
    }
    let slope = sxy / sxx;
    let resid: f64 = pts
        .iter()
        .map(|p| {
            let e = p.1 - my - slope * (p.0 - mx);
            e * e
        })
        .sum();
    let dof = (pts.len().max(3) - 2) as f64;
    let stderr = (resid / dof / sxx).sqrt();
    Ok((slope, stderr))
}

/// Gap series between extracted PDE modulation fields and the modulation
/// system launched from the matched initial data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub times: Vec<f64>,
    pub gap_m: Vec<f64>,
    pub gap_kappa: Vec<f64>,
    pub signal_m: Vec<f64>,
    pub signal_kappa: Vec<f64>,
    /// Fitted L² exponents over the rate window, when the series allow it.
    pub gap_exponent: Option<(f64, f64)>,
    pub signal_exponent: Option<(f64, f64)>,
    pub consistency: f64,
}

/// Compare a PDE trajectory against the quadratic modulation prediction:
/// extract `(M, κ)` from each snapshot, launch the modulation system from
/// the Theorem-style initial data built out of `(u₀, h₀)`, and report L²
/// gap and signal series plus fitted exponents.
pub fn compare_to_whitham(
    model: &ModelSpec,
    traj: &Trajectory,
    family: &WaveFamily,
    data: &WhithamData,
    h0: ArrayView1<'_, f64>,
    dt: f64,
    rate_window: (f64, f64),
) -> Result<ComparisonReport, CoreError> {
    let anchor = &family.anchor;
    let periods = traj.periods;
    let nc1 = data.n_c + 1;
    let length = periods as f64;
    let u0 = &traj.snapshots[0];
    let mid = whitham_initial_data(model, u0.view(), h0, anchor, periods)?;
    let nx = u0.ncols();
    let mut w0 = Array2::<f64>::zeros((nc1, nx));
    for l in 0..data.n_c {
        for p in 0..nx {
            w0[[l, p]] = mid.m_w0[[l, p]] - anchor.m[l];
        }
    }
    for p in 0..nx {
        w0[[nc1 - 1, p]] = mid.kappa_w0[p] - anchor.k;
    }

    let mut gap_m = Vec::with_capacity(traj.times.len());
    let mut gap_kappa = Vec::with_capacity(traj.times.len());
    let mut signal_m = Vec::with_capacity(traj.times.len());
    let mut signal_kappa = Vec::with_capacity(traj.times.len());
    let mut consistency = 0.0f64;
    let n_w = 2 * periods;
    let dxw = length / n_w as f64;

    for (idx, t) in traj.times.iter().enumerate() {
        let state = FieldState {
            periods,
            k: anchor.k,
            u: traj.snapshots[idx].clone(),
            t: *t,
        };
        let fields = extract_modulation(&state, family)?;
        consistency = consistency.max(fields.consistency);

        // Modulation prediction at the same time, sampled at the centers.
        let wt = if *t > 0.0 {
            let mt = integrate_modulation(
                data,
                ModulationSystem::Quadratic,
                w0.view(),
                periods,
                *t,
                dt,
                &PdeOptions::default(),
            )?;
            mt.last().clone()
        } else {
            let mut s = Array2::<f64>::zeros((nc1 + 1, nx));
            for i in 0..nc1 {
                s.row_mut(i).assign(&w0.row(i));
            }
            s
        };

        let mut gm = Array1::<f64>::zeros(n_w);
        let mut gk = Array1::<f64>::zeros(n_w);
        let mut sm = Array1::<f64>::zeros(n_w);
        let mut sk = Array1::<f64>::zeros(n_w);
        for j in 0..n_w {
            let xc = fields.centers[j];
            for l in 0..data.n_c {
                let pred = grid::interp(wt.row(l), xc, length);
                let fit = fields.m[[l, j]] - anchor.m[l];
                gm[j] += (fit - pred) * (fit - pred);
                sm[j] += fit * fit;
            }
            gm[j] = gm[j].sqrt();
            sm[j] = sm[j].sqrt();
            let predk = grid::interp(wt.row(nc1 - 1), xc, length);
            let fitk = fields.kappa[j] - anchor.k;
            gk[j] = (fitk - predk).abs();
            sk[j] = fitk.abs();
        }
        gap_m.push(lp_norm(gm.view(), 2.0, dxw));
        gap_kappa.push(lp_norm(gk.view(), 2.0, dxw));
        signal_m.push(lp_norm(sm.view(), 2.0, dxw));
        signal_kappa.push(lp_norm(sk.view(), 2.0, dxw));
    }

    let joint = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| (x * x + y * y).sqrt()).collect()
    };
    let gap_total = joint(&gap_m, &gap_kappa);
    let sig_total = joint(&signal_m, &signal_kappa);
    let gap_exponent = decay_rate(&traj.times, &gap_total, rate_window).ok();
    let signal_exponent = decay_rate(&traj.times, &sig_total, rate_window).ok();
    Ok(ComparisonReport {
        times: traj.times.clone(),
        gap_m,
        gap_kappa,
        signal_m,
        signal_kappa,
        gap_exponent,
        signal_exponent,
        consistency,
    })
}
