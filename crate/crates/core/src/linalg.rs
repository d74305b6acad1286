//! Small dense row-major helpers for D×D symmetric matrices.

/// Relative pivot threshold for the symmetric factorization.
pub const PIVOT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FactorError {
    /// A pivot came out negative: the matrix is indefinite.
    Indefinite { index: usize, pivot: f64 },
    /// A pivot is within tolerance of zero.
    Singular { index: usize, pivot: f64 },
}

/// Lower Cholesky factor L with a = L Lᵀ.
pub fn cholesky(a: &[f64], d: usize) -> Result<Vec<f64>, FactorError> {
    let scale = (0..d).map(|i| a[i * d + i].abs()).fold(1.0f64, f64::max);
    let tol = PIVOT_TOL * scale;
    let mut l = vec![0.0; d * d];
    for j in 0..d {
        let mut s = a[j * d + j];
        for k in 0..j {
            s -= l[j * d + k] * l[j * d + k];
        }
        if s.abs() <= tol || s.is_nan() {
            return Err(FactorError::Singular { index: j, pivot: s });
        }
        if s < 0.0 {
            return Err(FactorError::Indefinite { index: j, pivot: s });
        }
        let ljj = s.sqrt();
        l[j * d + j] = ljj;
        for i in j + 1..d {
            let mut t = a[i * d + j];
            for k in 0..j {
                t -= l[i * d + k] * l[j * d + k];
            }
            l[i * d + j] = t / ljj;
        }
    }
    Ok(l)
}

/// Inverse of a symmetric positive-definite matrix from its Cholesky factor.
pub fn spd_inverse(l: &[f64], d: usize) -> Vec<f64> {
    // columns of L^{-1}
    let mut linv = vec![0.0; d * d];
    for col in 0..d {
        for i in 0..d {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                s -= l[i * d + k] * linv[k * d + col];
            }
            linv[i * d + col] = s / l[i * d + i];
        }
    }
    let mut inv = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in i.max(j)..d {
                s += linv[k * d + i] * linv[k * d + j];
            }
            inv[i * d + j] = s;
        }
    }
    inv
}

pub fn cholesky_det(l: &[f64], d: usize) -> f64 {
    (0..d).map(|i| l[i * d + i]).product::<f64>().powi(2)
}

/// Solves Lᵀ x = z (back substitution), overwriting z with x.
pub fn solve_upper_transposed_in_place(l: &[f64], d: usize, z: &mut [f64]) {
    for i in (0..d).rev() {
        let mut s = z[i];
        for k in i + 1..d {
            s -= l[k * d + i] * z[k];
        }
        z[i] = s / l[i * d + i];
    }
}
