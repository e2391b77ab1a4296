use ndarray::{Array1, Array2};
use std::collections::BTreeMap;
use wavekit_core::diffwave::*;
use wavekit_core::evolve::*;
use wavekit_core::grid;
use wavekit_core::model::ModelSpec;

fn ve3() -> ModelSpec {
    let mut p = BTreeMap::new();
    p.insert("sigma_power".to_string(), 3.0);
    ModelSpec::builtin("viscoelasticity", &p).unwrap()
}

#[test]
fn probe_constant_state() {
    let m = ve3();
    let w = Array1::from(vec![1.0, 0.0]);
    let sys = ConstantStateSystem::from_model(&m, w.view()).unwrap();
    println!("a = {:?}", sys.a);
    println!("b = {:?}", sys.b);
    println!("gamma = {:?}", sys.gamma);
    println!("r = {:?}", sys.r_star);
    println!("l = {:?}", sys.l_star);
    println!("b_tilde = {:?}", sys.b_tilde);
    // L·R residual
    let mut max = 0.0f64;
    for i in 0..2 {
        for j in 0..2 {
            let mut s = 0.0;
            for p in 0..2 {
                s += sys.l_star[[i, p]] * sys.r_star[[p, j]];
            }
            let t = if i == j { 1.0 } else { 0.0 };
            max = max.max((s - t).abs());
        }
    }
    println!("LR residual {max:.3e}");
}

#[test]
fn probe_hopf_cole() {
    // residual of theta_t + gamma (theta^2/2)_x - theta_xx at t=1
    for (gamma, mass) in [(2.0, 1.0), (-5.0, -2.0), (5.0, 2.0), (0.3, -1.5)] {
        let n = 2048;
        let l = 80.0;
        let x = Array1::from_iter((0..n).map(|p| -l / 2.0 + l * p as f64 / n as f64));
        let t = 1.0;
        let h = 1e-4;
        let th = burgers_diffusion_wave(gamma, mass, x.view(), t).unwrap();
        let thp = burgers_diffusion_wave(gamma, mass, x.view(), t + h).unwrap();
        let thm = burgers_diffusion_wave(gamma, mass, x.view(), t - h).unwrap();
        let tx = grid::deriv(th.view(), 1, l);
        let txx = grid::deriv(th.view(), 2, l);
        let mut res = 0.0f64;
        for p in 0..n {
            let dt = (thp[p] - thm[p]) / (2.0 * h);
            res = res.max((dt + gamma * th[p] * tx[p] - txx[p]).abs());
        }
        let dx = l / n as f64;
        let im: f64 = th.iter().sum::<f64>() * dx;
        println!("gamma {gamma} mass {mass}: residual {res:.3e} mass err {:.3e}", (im - mass).abs());
    }
}

#[test]
fn probe_superposition_vs_decoupled() {
    let m = ve3();
    let w = Array1::from(vec![1.0, 0.0]);
    let sys = ConstantStateSystem::from_model(&m, w.view()).unwrap();
    let (_, dec) = build_approximants(&sys);

    let periods = 512usize;
    let nx = 4096usize;
    let xc = 256.0;
    let sig = 0.5;
    let m0 = Array1::from(vec![0.02, 0.01]);
    // Gaussian of unit integral times m0
    let mut w0 = Array2::<f64>::zeros((2, nx));
    for p in 0..nx {
        let x = p as f64 * periods as f64 / nx as f64 - xc;
        let g = (-x * x / (2.0 * sig * sig)).exp() / (sig * (2.0 * std::f64::consts::PI).sqrt());
        for i in 0..2 {
            w0[[i, p]] = m0[i] * g;
        }
    }
    let opts = PdeOptions { save_every: 500, ..Default::default() };
    let t0 = std::time::Instant::now();
    let traj = integrate_quadratic(&dec, ModulationSystem::Quadratic, w0.view(), periods, 100.0, 0.02, &opts).unwrap();
    println!("decoupled integration {:?}", t0.elapsed());
    let x = Array1::from_iter((0..nx).map(|p| p as f64 * periods as f64 / nx as f64 - xc));
    let mut times = vec![];
    let mut gaps = vec![];
    let mut signals = vec![];
    let dx = periods as f64 / nx as f64;
    for (ti, snap) in traj.times.iter().zip(&traj.snapshots) {
        if *ti < 5.0 {
            continue;
        }
        let sup = diffusion_wave_superposition(&sys, m0.view(), x.view(), *ti).unwrap();
        let mut g = 0.0;
        let mut s = 0.0;
        for p in 0..nx {
            let mut d2 = 0.0;
            let mut v2 = 0.0;
            for i in 0..2 {
                let d = snap[[i, p]] - (sup[[i, p]] - sys.w_star[i]);
                d2 += d * d;
                v2 += snap[[i, p]] * snap[[i, p]];
            }
            g += d2.sqrt() * dx;
            s += v2.sqrt() * dx;
        }
        times.push(*ti);
        gaps.push(g);
        signals.push(s);
    }
    let (ge, gse) = decay_rate(&times, &gaps, (10.0, 100.0)).unwrap();
    let (se, _) = decay_rate(&times, &signals, (10.0, 100.0)).unwrap();
    println!("L1 gap exponent {ge:.4} ± {gse:.4}, signal exponent {se:.4}");
    println!("gap[first] {:.3e} gap[last] {:.3e} sig[last] {:.3e}", gaps[0], gaps.last().unwrap(), signals.last().unwrap());
}

#[test]
fn probe_nonlinear_margins() {
    let m = ve3();
    let wstar = Array1::from(vec![1.0, 0.0]);
    let sys = ConstantStateSystem::from_model(&m, wstar.view()).unwrap();
    let (quad, dec) = build_approximants(&sys);

    let periods = 512usize;
    let nx = 4096usize;
    let xc = 256.0;
    let sig = 0.5;
    let m0 = Array1::from(vec![0.02, 0.01]);
    let mut w0 = Array2::<f64>::zeros((2, nx));
    for p in 0..nx {
        let x = p as f64 * periods as f64 / nx as f64 - xc;
        let g = (-x * x / (2.0 * sig * sig)).exp() / (sig * (2.0 * std::f64::consts::PI).sqrt());
        for i in 0..2 {
            w0[[i, p]] = m0[i] * g;
        }
    }
    let opts = PdeOptions { save_every: 250, ..Default::default() };
    let dt = 0.02;
    let tend = 100.0;
    // full nonlinear
    let mut u0 = w0.clone();
    for i in 0..2 {
        u0.row_mut(i).mapv_inplace(|x| x + wstar[i]);
    }
    let state = FieldState { periods, k: 1.0, u: u0, t: 0.0 };
    let t0 = std::time::Instant::now();
    let full = integrate_pde(&m, &state, tend, dt, &opts).unwrap();
    println!("pde {:?}", t0.elapsed());
    let full_dev = deviation_trajectory(&full, wstar.view()).unwrap();
    let tq = integrate_quadratic(&quad, ModulationSystem::Quadratic, w0.view(), periods, tend, dt, &opts).unwrap();
    let td = integrate_quadratic(&dec, ModulationSystem::Quadratic, w0.view(), periods, tend, dt, &opts).unwrap();
    let gq = equivalence_gap(&full_dev, &tq, 2.0).unwrap();
    let gd = equivalence_gap(&full_dev, &td, 2.0).unwrap();
    let sig2: Vec<f64> = full_dev.norm_series(2.0, |s| {
        Array1::from_iter((0..s.ncols()).map(|p| (s[[0, p]].powi(2) + s[[1, p]].powi(2)).sqrt()))
    });
    let (se, _) = decay_rate(&full_dev.times, &sig2, (10.0, tend)).unwrap();
    let (qe, _) = decay_rate(&gq.times, &gq.gap, (10.0, tend)).unwrap();
    let (de, _) = decay_rate(&gd.times, &gd.gap, (10.0, tend)).unwrap();
    println!("signal L2 exponent {se:.4}");
    println!("gap vs quadratic: exponent {qe:.4}, margin {:.4}", se - qe);
    println!("gap vs decoupled: exponent {de:.4}, margin {:.4}", se - de);
    println!("gap sizes at end: quad {:.3e} dec {:.3e} sig {:.3e}", gq.gap.last().unwrap(), gd.gap.last().unwrap(), sig2.last().unwrap());
}

#[test]
fn probe_forced_transport() {
    // k_t + (F k)_x = k_xx, F the Burgers wave, k0 a dipole.
    let periods = 512usize;
    let nx = 4096usize;
    let l = periods as f64;
    let dx = l / nx as f64;
    let xc = 256.0;
    let mut k = Array1::<f64>::zeros(nx);
    for p in 0..nx {
        let x = p as f64 * dx - xc;
        k[p] = -x * (-x * x / 2.0).exp(); // derivative of a Gaussian
    }
    let dt = 0.02;
    let steps = 5000;
    let theta: Vec<f64> = (0..nx)
        .map(|j| {
            let js = if j <= nx / 2 { j as i64 } else { j as i64 - nx as i64 };
            std::f64::consts::TAU * js as f64 / l
        })
        .collect();
    let xg = Array1::from_iter((0..nx).map(|p| p as f64 * dx - xc));
    let mut times = vec![];
    let mut norms = vec![];
    use num_complex::Complex64;
    let cx = |v: &[f64]| -> Vec<Complex64> { v.iter().map(|&x| Complex64::new(x, 0.0)).collect() };
    let re = |v: &[Complex64]| -> Vec<f64> { v.iter().map(|z| z.re).collect() };
    let mut khat = grid::fft(&cx(k.as_slice().unwrap()));
    let half: Vec<f64> = theta.iter().map(|&th| (-th * th * dt / 2.0).exp()).collect();
    for step in 0..steps {
        let t = step as f64 * dt;
        // midpoint Lawson
        let kp = re(&grid::ifft(&khat));
        let f = burgers_diffusion_wave(1.0, 1.0, xg.view(), 1.0 + t).unwrap();
        let fk: Vec<Complex64> = (0..nx).map(|p| Complex64::new(f[p] * kp[p], 0.0)).collect();
        let mut n0 = grid::fft(&fk);
        for p in 0..nx {
            n0[p] *= Complex64::new(0.0, theta[p]);
        }
        let mut mid = khat.clone();
        for p in 0..nx {
            mid[p] = (mid[p] - dt / 2.0 * n0[p]) * half[p];
        }
        let km = re(&grid::ifft(&mid));
        let fm = burgers_diffusion_wave(1.0, 1.0, xg.view(), 1.0 + t + dt / 2.0).unwrap();
        let fkm: Vec<Complex64> = (0..nx).map(|p| Complex64::new(fm[p] * km[p], 0.0)).collect();
        let mut nm = grid::fft(&fkm);
        for p in 0..nx {
            nm[p] *= Complex64::new(0.0, theta[p]) * half[p];
        }
        for p in 0..nx {
            khat[p] = khat[p] * half[p] * half[p] - dt * nm[p];
        }
        if (step + 1) % 250 == 0 {
            let kp = Array1::from(re(&grid::ifft(&khat)));
            times.push((step + 1) as f64 * dt);
            norms.push(lp_norm(kp.view(), 2.0, dx));
        }
    }
    let (e, se) = decay_rate(&times, &norms, (10.0, 100.0)).unwrap();
    println!("forced transport L2 exponent {e:.4} ± {se:.4}");
}
