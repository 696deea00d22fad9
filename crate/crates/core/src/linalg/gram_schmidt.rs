use rand::Rng;
use rand_distr::StandardNormal;

use super::{dot, LinalgError, Matrix};

/// Redraw budget for degenerate Gaussian candidates.
pub const MAX_REDRAWS: usize = 100;

const BASIS_TOL: f64 = 1e-8;
const MIN_RESIDUAL: f64 = 1e-6;

/// Max absolute entry of `m^T m - I`.
pub fn orthonormality_error(m: &Matrix) -> f64 {
    m.gram().max_abs_diff(&Matrix::identity(m.cols()))
}

/// Appends `count` orthonormal columns to `basis`.
///
/// Each candidate is a standard Gaussian draw, orthogonalized by two passes of
/// modified Gram-Schmidt against every column accepted so far. The existing
/// columns are copied through untouched.
pub fn gram_schmidt_extend<R: Rng + ?Sized>(
    basis: &Matrix,
    count: usize,
    rng: &mut R,
) -> Result<Matrix, LinalgError> {
    let d = basis.rows();
    let k = basis.cols();
    if k + count > d {
        return Err(LinalgError::DimensionTooSmall {
            required: k + count,
            available: d,
        });
    }
    let deviation = orthonormality_error(basis);
    if deviation > BASIS_TOL {
        return Err(LinalgError::NotOrthonormal { deviation });
    }

    let mut columns = basis.columns();
    for _ in 0..count {
        let mut accepted = None;
        for _ in 0..MAX_REDRAWS {
            let mut cand: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            for _ in 0..2 {
                for q in &columns {
                    let proj = dot(q, &cand);
                    cand.iter_mut().zip(q).for_each(|(x, y)| *x -= proj * y);
                }
            }
            let r = dot(&cand, &cand).sqrt();
            if r >= MIN_RESIDUAL {
                cand.iter_mut().for_each(|x| *x /= r);
                accepted = Some(cand);
                break;
            }
        }
        match accepted {
            Some(c) => columns.push(c),
            None => {
                return Err(LinalgError::DegenerateDraws {
                    redraws: MAX_REDRAWS,
                })
            }
        }
    }

    let mut out = Matrix::zeros(d, k + count);
    for i in 0..d {
        let row = out.row_mut(i);
        row[..k].copy_from_slice(basis.row(i));
        for (j, c) in columns.iter().enumerate().skip(k) {
            row[j] = c[i];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn extends_single_canonical_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e1 = Matrix::from_rows(&[[1.0], [0.0], [0.0]]).unwrap();
        let out = gram_schmidt_extend(&e1, 1, &mut rng).unwrap();
        assert_eq!(out.column(0), vec![1.0, 0.0, 0.0]);
        assert!(orthonormality_error(&out) < 1e-10);
    }

    #[test]
    fn fresh_basis_from_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = gram_schmidt_extend(&Matrix::zeros(3, 0), 3, &mut rng).unwrap();
        assert_eq!(out.cols(), 3);
        assert!(orthonormality_error(&out) < 1e-10);
    }

    #[test]
    fn random_basis_extension() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = gram_schmidt_extend(&Matrix::zeros(8, 0), 3, &mut rng).unwrap();
        let out = gram_schmidt_extend(&base, 2, &mut rng).unwrap();
        assert_eq!(out.cols(), 5);
        assert!(orthonormality_error(&out) < 1e-10);
        for j in 0..3 {
            for i in 0..8 {
                assert_eq!(out.get(i, j).to_bits(), base.get(i, j).to_bits());
            }
        }
    }

    #[test]
    fn too_many_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let err = gram_schmidt_extend(&Matrix::identity(3), 1, &mut rng).unwrap_err();
        assert!(err.to_string().contains("feature dimension too small for expansion"));
    }

    #[test]
    fn rejects_non_orthonormal_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = Matrix::from_rows(&[[1.0, 1.0], [0.0, 1.0], [0.0, 0.0]]).unwrap();
        assert!(matches!(
            gram_schmidt_extend(&b, 1, &mut rng),
            Err(LinalgError::NotOrthonormal { .. })
        ));
    }

    #[test]
    fn same_seed_same_output() {
        let a = gram_schmidt_extend(&Matrix::zeros(6, 0), 4, &mut ChaCha8Rng::seed_from_u64(8));
        let b = gram_schmidt_extend(&Matrix::zeros(6, 0), 4, &mut ChaCha8Rng::seed_from_u64(8));
        assert_eq!(a.unwrap(), b.unwrap());
    }
}
