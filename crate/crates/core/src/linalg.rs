//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigen-decomposition of a symmetric matrix with eigenvalues in descending
/// order and eigenvectors as the matching columns.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// `U diag(values) Uᵀ`, symmetrised.
pub fn recompose(vectors: &DMatrix<f64>, values: &[f64]) -> DMatrix<f64> {
    let mut scaled = vectors.clone();
    for (j, &v) in values.iter().enumerate() {
        scaled.column_mut(j).scale_mut(v);
    }
    symmetrize(&(scaled * vectors.transpose()))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Principal square root of a symmetric PSD matrix. Eigenvalues below
/// `-tol * max_eigenvalue` are rejected; smaller negative noise is clamped.
pub fn sqrt_psd(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let (values, vectors) = sym_eigen_desc(m);
    let top = values.first().copied().unwrap_or(0.0).max(0.0);
    let mut roots = Vec::with_capacity(values.len());
    for &v in &values {
        if v < -tol * top.max(f64::MIN_POSITIVE) {
            return Err(Error::NegativeEigenvalue(v));
        }
        roots.push(v.max(0.0).sqrt());
    }
    Ok(recompose(&vectors, &roots))
}

/// Inverse and log-determinant of a symmetric positive definite matrix.
pub fn spd_inverse_logdet(m: &DMatrix<f64>) -> Option<(DMatrix<f64>, f64)> {
    let chol = m.clone().cholesky()?;
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let inv = symmetrize(&chol.inverse());
    Some((inv, log_det))
}

/// Row-major copy of a point set, used by the distance-heavy loops.
#[derive(Debug, Clone)]
pub struct Rows {
    data: Vec<f64>,
    dim: usize,
    len: usize,
}

impl Rows {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let (len, dim) = m.shape();
        let mut data = Vec::with_capacity(len * dim);
        for i in 0..len {
            data.extend(m.row(i).iter());
        }
        Self { data, dim, len }
    }

    /// Rows of `m` mapped through `x -> L x`.
    pub fn transformed(m: &DMatrix<f64>, l: &DMatrix<f64>) -> Self {
        Self::from_matrix(&(m * l.transpose()))
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Applies `L` to a single point.
pub fn apply(l: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    let v = l * DVector::from_column_slice(x);
    v.as_slice().to_vec()
}

/// Median with the two middle values averaged for even lengths.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Median squared Euclidean distance over distinct pairs of rows. When there
/// are more than `max_pairs` pairs, `max_pairs` pairs are drawn uniformly
/// (with replacement) using `seed`.
pub fn median_pairwise_sq_dist(rows: &Rows, max_pairs: usize, seed: u64) -> Option<f64> {
    use rand::{Rng, SeedableRng};
    let n = rows.len();
    if n < 2 {
        return None;
    }
    let total = n * (n - 1) / 2;
    let mut dists = Vec::with_capacity(total.min(max_pairs));
    if total <= max_pairs {
        for i in 0..n {
            for j in (i + 1)..n {
                dists.push(sq_dist(rows.row(i), rows.row(j)));
            }
        }
    } else {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        while dists.len() < max_pairs {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i != j {
                dists.push(sq_dist(rows.row(i), rows.row(j)));
            }
        }
    }
    median(&mut dists)
}

pub(crate) mod matrix_serde {
    //! Serialises a `DMatrix` as a list of rows.
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows())
            .map(|i| m.row(i).iter().copied().collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
    }
}

pub(crate) mod vector_serde {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}
