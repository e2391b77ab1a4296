//! Dense linear-algebra helpers shared by the spectral and modulation layers.

use ndarray::{Array1, Array2};
use ndarray_linalg::{Eig, OperationNorm, Solve};
use num_complex::Complex64;

use crate::error::CoreError;

/// Eigenvalues and (column) eigenvectors of a dense complex matrix.
pub fn eig_complex(
    a: &Array2<Complex64>,
) -> Result<(Array1<Complex64>, Array2<Complex64>), CoreError> {
    a.eig()
        .map_err(|e| CoreError::Linalg(format!("complex eigensolve failed: {e}")))
}

/// Eigenvalues only.
pub fn eigvals_complex(a: &Array2<Complex64>) -> Result<Vec<Complex64>, CoreError> {
    Ok(eig_complex(a)?.0.to_vec())
}

/// Solves a dense complex linear system.
pub fn solve_complex(
    a: &Array2<Complex64>,
    b: &Array1<Complex64>,
) -> Result<Array1<Complex64>, CoreError> {
    a.solve(b)
        .map_err(|e| CoreError::Linalg(format!("complex solve failed: {e}")))
}

/// Solves a dense real linear system.
pub fn solve_real(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>, CoreError> {
    a.solve(b)
        .map_err(|e| CoreError::Linalg(format!("real solve failed: {e}")))
}

/// Matrix exponential by Padé(13) with scaling and squaring (Higham 2005).
/// Chosen over eigendecomposition because the Bloch operators are defective
/// at ξ=0 whenever the critical group carries a Jordan block.
pub fn expm(a: &Array2<Complex64>) -> Result<Array2<Complex64>, CoreError> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let norm = a.opnorm_one().unwrap_or(0.0);
    let theta13 = 5.371920351148152;
    let mut s = 0u32;
    if norm > theta13 {
        s = (norm / theta13).log2().ceil() as u32;
    }
    let scale = Complex64::new(0.5f64.powi(s as i32), 0.0);
    let a = a.mapv(|z| z * scale);

    const B: [f64; 14] = [
        64764752532480000.0,
        32382376266240000.0,
        7771770303897600.0,
        1187353796428800.0,
        129060195264000.0,
        10559470521600.0,
        670442572800.0,
        33522128640.0,
        1323241920.0,
        40840800.0,
        960960.0,
        16380.0,
        182.0,
        1.0,
    ];
    let id: Array2<Complex64> = Array2::eye(n);
    let a2 = a.dot(&a);
    let a4 = a2.dot(&a2);
    let a6 = a2.dot(&a4);
    let u_inner = a6.mapv(|z| z * B[13])
        + a4.mapv(|z| z * B[11])
        + a2.mapv(|z| z * B[9]);
    let u = a.dot(
        &(a6.dot(&u_inner)
            + a6.mapv(|z| z * B[7])
            + a4.mapv(|z| z * B[5])
            + a2.mapv(|z| z * B[3])
            + id.mapv(|z| z * B[1])),
    );
    let v_inner = a6.mapv(|z| z * B[12]) + a4.mapv(|z| z * B[10]) + a2.mapv(|z| z * B[8]);
    let v = a6.dot(&v_inner)
        + a6.mapv(|z| z * B[6])
        + a4.mapv(|z| z * B[4])
        + a2.mapv(|z| z * B[2])
        + id.mapv(|z| z * B[0]);

    let lhs = &v - &u;
    let rhs = &v + &u;
    // Solve (V-U) X = (V+U) column by column.
    let mut x = Array2::zeros((n, n));
    for j in 0..n {
        let col = solve_complex(&lhs, &rhs.column(j).to_owned())?;
        x.column_mut(j).assign(&col);
    }
    for _ in 0..s {
        x = x.dot(&x);
    }
    Ok(x)
}

/// Right/left dual eigen-bases of a small real matrix with (numerically)
/// simple spectrum: returns eigenvalues sorted by real part, right
/// eigenvectors as columns of `R`, left eigenvectors as rows of `L`, with
/// `L R = Id`.
pub fn dual_eigen_real(
    a: &Array2<f64>,
) -> Result<(Vec<Complex64>, Array2<Complex64>, Array2<Complex64>), CoreError> {
    let ac = a.mapv(|x| Complex64::new(x, 0.0));
    let (vals, vecs) = eig_complex(&ac)?;
    let n = a.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        (vals[i].re, vals[i].im)
            .partial_cmp(&(vals[j].re, vals[j].im))
            .unwrap()
    });
    let mut lam = Vec::with_capacity(n);
    let mut r = Array2::zeros((n, n));
    for (col, &i) in order.iter().enumerate() {
        lam.push(vals[i]);
        r.column_mut(col).assign(&vecs.column(i));
    }
    // Separation check ((H3)-style strictness is the caller's concern; here we
    // only reject outright collisions that break the dual normalization).
    for i in 0..n {
        for j in (i + 1)..n {
            if (lam[i] - lam[j]).norm() < 1e-12 * (1.0 + lam[i].norm()) {
                return Err(CoreError::Linalg(
                    "repeated eigenvalue: dual basis not defined".into(),
                ));
            }
        }
    }
    // Left basis = inverse of the right basis (rows), giving L R = Id exactly.
    let id: Array2<Complex64> = Array2::eye(n);
    let mut l = Array2::zeros((n, n));
    for j in 0..n {
        let col = solve_complex(&r, &id.column(j).to_owned())?;
        l.column_mut(j).assign(&col);
    }
    Ok((lam, r, l))
}
