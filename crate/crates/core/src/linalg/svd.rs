use super::{dot, LinalgError, Matrix, Shape};

/// Sweep cap for the Jacobi iteration.
pub const MAX_SWEEPS: usize = 100;

/// Pairs whose normalized inner product is below this are treated as orthogonal.
const OFF_DIAGONAL_TOL: f64 = 1e-12;

/// Singular values at or below `RANK_TOL * sigma_max` get canonical left vectors.
const RANK_TOL: f64 = 1e-12;

/// Thin singular value decomposition `a = w * diag(sigma) * v^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub w: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut ws = self.w.clone();
        for i in 0..ws.rows() {
            for (j, s) in self.sigma.iter().enumerate() {
                let x = ws.get(i, j) * s;
                ws.set(i, j, x);
            }
        }
        ws.matmul(&self.v.transpose()).expect("thin SVD factors are conformable")
    }
}

/// Thin SVD by one-sided (Hestenes) Jacobi rotations.
///
/// Singular values come back sorted nonincreasing. Left vectors belonging to
/// (numerically) zero singular values are filled in by orthogonalizing the
/// canonical vectors e_1, e_2, ... against the resolved ones, so the output
/// is a deterministic function of the input.
pub fn thin_svd(a: &Matrix) -> Result<SvdResult, LinalgError> {
    if a.rows() >= a.cols() {
        tall_svd(a)
    } else {
        let t = tall_svd(&a.transpose())?;
        Ok(SvdResult {
            w: t.v,
            sigma: t.sigma,
            v: t.w,
        })
    }
}

fn tall_svd(a: &Matrix) -> Result<SvdResult, LinalgError> {
    let m = a.rows();
    let n = a.cols();
    // Column-major working copies so rotations touch contiguous memory.
    let mut u: Vec<Vec<f64>> = a.columns();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let alpha = dot(&u[p], &u[p]);
                let beta = dot(&u[q], &u[q]);
                let gamma = dot(&u[p], &u[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= OFF_DIAGONAL_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut u, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LinalgError::NoConvergence { sweeps: MAX_SWEEPS });
    }

    let norms: Vec<f64> = u.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps ties in column order.
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).expect("finite norms"));
    let sigma_max = order.first().map_or(0.0, |&i| norms[i]);
    let cutoff = RANK_TOL * sigma_max;

    let mut w_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut v_cols = Vec::with_capacity(n);
    let mut pending = 0;
    for &j in &order {
        let s = norms[j];
        if s > cutoff && s > 0.0 {
            w_cols.push(u[j].iter().map(|x| x / s).collect());
            sigma.push(s);
        } else {
            pending += 1;
            sigma.push(0.0);
        }
        v_cols.push(v[j].clone());
    }
    for _ in 0..pending {
        let next = canonical_completion(&w_cols, m);
        w_cols.push(next);
    }

    Ok(SvdResult {
        w: Matrix::from_columns(m, &w_cols)?,
        sigma,
        v: Matrix::from_columns(n, &v_cols)?,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// First canonical vector whose residual against `existing` is comfortably
/// nonzero, orthogonalized twice and normalized. Some e_i always has residual
/// norm at least `1/sqrt(m)` while fewer than `m` columns are resolved.
fn canonical_completion(existing: &[Vec<f64>], m: usize) -> Vec<f64> {
    let threshold = 0.5 / (m as f64).sqrt();
    for i in 0..m {
        let mut e = vec![0.0; m];
        e[i] = 1.0;
        for _ in 0..2 {
            for q in existing {
                let proj = dot(q, &e);
                for (x, y) in e.iter_mut().zip(q) {
                    *x -= proj * y;
                }
            }
        }
        let r = dot(&e, &e).sqrt();
        if r > threshold {
            e.iter_mut().for_each(|x| *x /= r);
            return e;
        }
    }
    unreachable!("fewer than m orthonormal columns always leave a canonical residual")
}

/// Nearest matrix with orthonormal columns in Frobenius norm: `w * v^T`.
pub fn nearest_orthogonal(a: &Matrix) -> Result<Matrix, LinalgError> {
    if a.rows() < a.cols() {
        return Err(LinalgError::WideMatrix {
            shape: Shape(a.rows(), a.cols()),
        });
    }
    let svd = thin_svd(a)?;
    svd.w.matmul(&svd.v.transpose())
}
