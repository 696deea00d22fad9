//! Simplex equiangular tight frames.
//!
//! An ETF with `K` vertices in `R^d` is built from a `d x K` matrix `U` with
//! orthonormal columns as `sqrt(K/(K-1)) * U * (I_K - 11^T/K)`. Every vertex
//! then has unit norm and every pair of distinct vertices has inner product
//! `-1/(K-1)`. The target keeps `U` around so it can later be grown by
//! appending orthonormal columns without touching the old ones.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    gram_schmidt_extend, matrix_from_csv, matrix_to_csv, nearest_orthogonal, orthonormality_error,
    thin_svd, Matrix,
};

const BASIS_TOL: f64 = 1e-8;

/// Relative singular-value floor below which centered means count as rank deficient.
const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct EtfTarget {
    vertices: Matrix,
    basis: Matrix,
    class_map: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtfDiagnostics {
    pub max_norm_deviation: f64,
    pub max_angle_deviation: f64,
    pub is_valid: bool,
}

/// Result of fitting an ETF to empirical class means.
#[derive(Debug, Clone)]
pub struct EtfFit {
    pub target: EtfTarget,
    /// Centered means had rank below `K - 1`; the fit is then not unique.
    pub rank_deficient: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct EtfHeader {
    dim: usize,
    num_classes: usize,
    class_map: Vec<usize>,
}

fn etf_scale(k: usize) -> f64 {
    (k as f64 / (k as f64 - 1.0)).sqrt()
}

fn check_labels(labels: &[usize]) -> Result<()> {
    let mut seen = HashSet::with_capacity(labels.len());
    for &l in labels {
        if !seen.insert(l) {
            return Err(Error::DuplicateLabel { label: l });
        }
    }
    Ok(())
}

fn vertices_from_basis(basis: &Matrix) -> Matrix {
    let k = basis.cols();
    basis
        .matmul(&Matrix::centering(k))
        .expect("basis and centering are conformable")
        .scale(etf_scale(k))
}

/// Builds the ETF generated by an orthonormal `d x K` basis.
pub fn construct_etf(basis: &Matrix, class_labels: &[usize]) -> Result<EtfTarget> {
    let (d, k) = (basis.rows(), basis.cols());
    if k < 2 {
        return Err(Error::TooFewClasses { classes: k });
    }
    if d < k {
        return Err(Error::DimensionBelowClasses { dim: d, classes: k });
    }
    if class_labels.len() != k {
        return Err(Error::Shape(format!(
            "{} labels for {k} basis columns",
            class_labels.len()
        )));
    }
    check_labels(class_labels)?;
    let deviation = orthonormality_error(basis);
    if deviation > BASIS_TOL {
        return Err(crate::linalg::LinalgError::NotOrthonormal { deviation }.into());
    }
    Ok(EtfTarget {
        vertices: vertices_from_basis(basis),
        basis: basis.clone(),
        class_map: class_labels.to_vec(),
    })
}

/// Closest ETF (Frobenius) to the `d x K` matrix of class means.
///
/// The centered, rescaled means are projected onto the set of matrices with
/// orthonormal columns through their SVD, and the result is used as the
/// generating basis.
pub fn nearest_etf(class_means: &Matrix, class_labels: &[usize]) -> Result<EtfFit> {
    let (d, k) = (class_means.rows(), class_means.cols());
    if k < 2 {
        return Err(Error::TooFewClasses { classes: k });
    }
    if d < k {
        return Err(Error::DimensionBelowClasses { dim: d, classes: k });
    }
    let centered = class_means
        .matmul(&Matrix::centering(k))?
        .scale(((k as f64 - 1.0) / k as f64).sqrt());
    let sigma = thin_svd(&centered)?.sigma;
    let floor = RANK_TOL * sigma[0].max(f64::MIN_POSITIVE);
    let rank = sigma.iter().filter(|&&s| s > floor).count();
    let q = nearest_orthogonal(&centered)?;
    Ok(EtfFit {
        target: construct_etf(&q, class_labels)?,
        rank_deficient: rank < k - 1,
    })
}

/// Grows `prev` by one vertex per new label, keeping the old basis columns
/// and appending freshly orthogonalized ones.
pub fn expand_etf<R: Rng + ?Sized>(
    prev: &EtfTarget,
    new_class_labels: &[usize],
    rng: &mut R,
) -> Result<EtfTarget> {
    if new_class_labels.is_empty() {
        return Err(Error::Shape("expansion needs at least one new class".into()));
    }
    let mut labels = prev.class_map.clone();
    labels.extend_from_slice(new_class_labels);
    check_labels(&labels)?;
    let basis = gram_schmidt_extend(&prev.basis, new_class_labels.len(), rng)?;
    construct_etf(&basis, &labels)
}

/// Norm and equiangularity deviations of arbitrary column vertices.
pub fn verify_vertices(vertices: &Matrix, tol: f64) -> EtfDiagnostics {
    let k = vertices.cols();
    let gram = vertices.gram();
    let target = if k > 1 { -1.0 / (k as f64 - 1.0) } else { 0.0 };
    let mut max_norm_deviation: f64 = 0.0;
    let mut max_angle_deviation: f64 = 0.0;
    for i in 0..k {
        max_norm_deviation = max_norm_deviation.max((gram.get(i, i).sqrt() - 1.0).abs());
        for j in i + 1..k {
            max_angle_deviation = max_angle_deviation.max((gram.get(i, j) - target).abs());
        }
    }
    EtfDiagnostics {
        max_norm_deviation,
        max_angle_deviation,
        is_valid: max_norm_deviation < tol && max_angle_deviation < tol,
    }
}

pub fn verify_etf(e: &EtfTarget, tol: f64) -> EtfDiagnostics {
    verify_vertices(&e.vertices, tol)
}

impl EtfTarget {
    /// Assembles a target from stored parts without checking ETF geometry;
    /// use [`verify_etf`] for that. Shapes and the class map are checked.
    pub fn from_parts(vertices: Matrix, basis: Matrix, class_map: Vec<usize>) -> Result<Self> {
        if vertices.shape() != basis.shape() {
            return Err(Error::Shape(format!(
                "vertices {} vs basis {}",
                vertices.shape(),
                basis.shape()
            )));
        }
        if class_map.len() != vertices.cols() {
            return Err(Error::Shape(format!(
                "class map has {} entries for {} vertices",
                class_map.len(),
                vertices.cols()
            )));
        }
        check_labels(&class_map)?;
        Ok(Self {
            vertices,
            basis,
            class_map,
        })
    }

    pub fn dim(&self) -> usize {
        self.vertices.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.vertices.cols()
    }

    pub fn vertices(&self) -> &Matrix {
        &self.vertices
    }

    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    pub fn class_map(&self) -> &[usize] {
        &self.class_map
    }

    pub fn column_of(&self, label: usize) -> Result<usize> {
        self.class_map
            .iter()
            .position(|&l| l == label)
            .ok_or(Error::UnknownLabel { label })
    }

    pub fn vertex(&self, column: usize) -> Vec<f64> {
        self.vertices.column(column)
    }

    /// Vertex of a class label.
    pub fn vertex_of(&self, label: usize) -> Result<Vec<f64>> {
        Ok(self.vertex(self.column_of(label)?))
    }

    /// Writes `vertices.csv`, `basis.csv` and `header.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = EtfHeader {
            dim: self.dim(),
            num_classes: self.num_classes(),
            class_map: self.class_map.clone(),
        };
        let header_path = dir.join("header.json");
        let json = serde_json::to_string_pretty(&header).map_err(|e| Error::json(&header_path, e))?;
        fs::write(&header_path, json).map_err(|e| Error::io(&header_path, e))?;
        for (name, m) in [("vertices.csv", &self.vertices), ("basis.csv", &self.basis)] {
            let p = dir.join(name);
            fs::write(&p, matrix_to_csv(m)).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let header_path = dir.join("header.json");
        let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
        let header: EtfHeader =
            serde_json::from_str(&text).map_err(|e| Error::json(&header_path, e))?;
        let read = |name: &str| -> Result<Matrix> {
            let p = dir.join(name);
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            Ok(matrix_from_csv(&text)?)
        };
        let vertices = read("vertices.csv")?;
        let basis = read("basis.csv")?;
        if vertices.rows() != header.dim || vertices.cols() != header.num_classes {
            return Err(Error::Shape(format!(
                "header declares {}x{}, vertices are {}",
                header.dim,
                header.num_classes,
                vertices.shape()
            )));
        }
        Self::from_parts(vertices, basis, header.class_map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_basis(d: usize, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
        gram_schmidt_extend(&Matrix::zeros(d, 0), k, rng).unwrap()
    }

    fn labels(k: usize) -> Vec<usize> {
        (0..k).collect()
    }

    #[test]
    fn two_class_identity_basis() {
        let e = construct_etf(&Matrix::identity(2), &[0, 1]).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let expected = Matrix::from_rows(&[[h, -h], [-h, h]]).unwrap();
        assert!(e.vertices().max_abs_diff(&expected) < 1e-15);
        let ip = crate::linalg::dot(&e.vertex(0), &e.vertex(1));
        assert!((ip + 1.0).abs() < 1e-15);
    }

    #[test]
    fn three_classes_in_four_dims() {
        let basis = Matrix::identity(4).leading_columns(3);
        let e = construct_etf(&basis, &[5, 6, 7]).unwrap();
        let g = e.vertices().gram();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!((g.get(i, j) + 0.5).abs() < 1e-10);
                }
            }
        }
        assert_eq!(e.column_of(6).unwrap(), 1);
    }

    #[test]
    fn construction_errors() {
        assert!(matches!(
            construct_etf(&Matrix::identity(3).leading_columns(1), &[0]),
            Err(Error::TooFewClasses { classes: 1 })
        ));
        let skew = Matrix::from_rows(&[[1.0, 1.0], [0.0, 1.0]]).unwrap();
        let msg = construct_etf(&skew, &[0, 1]).unwrap_err().to_string();
        assert!(msg.contains("Gram deviation"), "{msg}");
        assert!(matches!(
            construct_etf(&Matrix::identity(2), &[3, 3]),
            Err(Error::DuplicateLabel { label: 3 })
        ));
    }

    #[test]
    fn nearest_etf_two_by_two_by_hand() {
        let fit = nearest_etf(&Matrix::identity(2), &[0, 1]).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let expected = Matrix::from_rows(&[[h, -h], [-h, h]]).unwrap();
        assert!(fit.target.vertices().max_abs_diff(&expected) < 1e-12);
        // Brute force over every 2D two-vertex ETF: e1 = (cos t, sin t), e2 = -e1.
        let mut best = f64::INFINITY;
        for i in 0..100_000 {
            let t = i as f64 * std::f64::consts::TAU / 100_000.0;
            let (c, s) = (t.cos(), t.sin());
            let cand = Matrix::from_rows(&[[c, -c], [s, -s]]).unwrap();
            best = best.min(Matrix::identity(2).sub(&cand).unwrap().frobenius_norm());
        }
        let ours = Matrix::identity(2)
            .sub(fit.target.vertices())
            .unwrap()
            .frobenius_norm();
        assert!(ours <= best + 1e-9);
    }

    #[test]
    fn nearest_etf_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = construct_etf(&random_basis(6, 4, &mut rng), &labels(4)).unwrap();
        let fit = nearest_etf(e.vertices(), &labels(4)).unwrap();
        assert!(!fit.rank_deficient);
        assert!(fit.target.vertices().sub(e.vertices()).unwrap().frobenius_norm() < 1e-7);
    }

    #[test]
    fn nearest_etf_beats_random_etfs() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let means = Matrix::new(3, 3, (0..9).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let fit = nearest_etf(&means, &labels(3)).unwrap();
        let ours = means.sub(fit.target.vertices()).unwrap().frobenius_norm();
        for _ in 0..10_000 {
            let cand = construct_etf(&random_basis(3, 3, &mut rng), &labels(3)).unwrap();
            let dist = means.sub(cand.vertices()).unwrap().frobenius_norm();
            assert!(ours <= dist + 1e-6);
        }
    }

    #[test]
    fn rank_deficient_means_flagged() {
        // All columns identical: centering leaves nothing.
        let means = Matrix::from_rows(&[[1.0, 1.0, 1.0], [2.0, 2.0, 2.0], [0.0, 0.0, 0.0]]).unwrap();
        let fit = nearest_etf(&means, &labels(3)).unwrap();
        assert!(fit.rank_deficient);
        assert!(verify_etf(&fit.target, 1e-8).is_valid);
    }

    #[test]
    fn expansion_keeps_basis_and_equiangularity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let prev = construct_etf(&random_basis(4, 2, &mut rng), &[0, 1]).unwrap();
        let next = expand_etf(&prev, &[2], &mut rng).unwrap();
        assert_eq!(next.num_classes(), 3);
        assert_eq!(next.class_map(), &[0, 1, 2]);
        let g = next.vertices().gram();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!((g.get(i, j) + 0.5).abs() < 1e-7);
                }
            }
        }
        for i in 0..4 {
            for j in 0..2 {
                assert_eq!(next.basis().get(i, j).to_bits(), prev.basis().get(i, j).to_bits());
            }
        }
    }

    #[test]
    fn expansion_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let prev = construct_etf(&random_basis(3, 2, &mut rng), &[0, 1]).unwrap();
        let msg = expand_etf(&prev, &[2, 3], &mut rng).unwrap_err().to_string();
        assert!(msg.contains("feature dimension too small for expansion") && msg.contains('4'));
        assert!(matches!(
            expand_etf(&prev, &[1], &mut rng),
            Err(Error::DuplicateLabel { label: 1 })
        ));
    }

    #[test]
    fn expansion_shifts_old_vertices_less_than_a_fresh_etf() {
        let mut expanded_shift = 0.0;
        let mut fresh_shift = 0.0;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let prev = construct_etf(&random_basis(4, 2, &mut rng), &[0, 1]).unwrap();
            let next = expand_etf(&prev, &[2], &mut rng).unwrap();
            let fresh = construct_etf(&random_basis(4, 3, &mut rng), &[0, 1, 2]).unwrap();
            for k in 0..2 {
                let old = prev.vertex(k);
                let dist = |v: Vec<f64>| {
                    v.iter().zip(&old).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
                };
                expanded_shift += dist(next.vertex(k)) / 200.0;
                fresh_shift += dist(fresh.vertex(k)) / 200.0;
            }
        }
        assert!(expanded_shift < fresh_shift, "{expanded_shift} vs {fresh_shift}");
    }

    #[test]
    fn verify_flags_scaled_and_perturbed_vertices() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let e = construct_etf(&random_basis(3, 3, &mut rng), &labels(3)).unwrap();
        assert!(verify_etf(&e, 1e-6).is_valid);

        let scaled = EtfTarget::from_parts(e.vertices().scale(2.0), e.basis().clone(), labels(3)).unwrap();
        let diag = verify_etf(&scaled, 1e-6);
        assert!((diag.max_norm_deviation - 1.0).abs() < 1e-12);
        assert!(!diag.is_valid);

        let mut v = e.vertices().clone();
        let dir: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
        let n = crate::linalg::norm(&dir);
        for i in 0..3 {
            let x = v.get(i, 0) + 0.01 * dir[i] / n;
            v.set(i, 0, x);
        }
        let diag = verify_vertices(&v, 1e-4);
        assert!(!diag.is_valid);
        assert!(diag.max_norm_deviation >= 0.0 && diag.max_angle_deviation >= 0.0);
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let e = construct_etf(&random_basis(5, 3, &mut rng), &[4, 1, 9]).unwrap();
        e.save(dir.path()).unwrap();
        assert_eq!(EtfTarget::load(dir.path()).unwrap(), e);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn constructed_etfs_verify(k in 2usize..=32, extra in 0usize..=32, seed: u64) {
            let d = (k + extra).min(64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = construct_etf(&random_basis(d, k, &mut rng), &labels(k)).unwrap();
            prop_assert!(verify_etf(&e, 1e-6).is_valid);
        }

        #[test]
        fn nearest_etf_is_idempotent(d in 3usize..8, k in 2usize..4, seed: u64) {
            prop_assume!(d >= k);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let means = Matrix::new(d, k, (0..d * k).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
            let once = nearest_etf(&means, &labels(k)).unwrap().target;
            let twice = nearest_etf(once.vertices(), &labels(k)).unwrap().target;
            prop_assert!(twice.vertices().sub(once.vertices()).unwrap().frobenius_norm() < 1e-7);
        }

        #[test]
        fn expansions_stay_valid(k in 2usize..10, m in 1usize..6, extra in 0usize..4, seed: u64) {
            let d = k + m + extra;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let prev = construct_etf(&random_basis(d, k, &mut rng), &labels(k)).unwrap();
            let new: Vec<usize> = (k..k + m).collect();
            let next = expand_etf(&prev, &new, &mut rng).unwrap();
            prop_assert!(verify_etf(&next, 1e-6).is_valid);
            prop_assert_eq!(next.basis().leading_columns(k), prev.basis().clone());
        }
    }
}
