//! Latent-direction discovery and application.
//!
//! Two deterministic ways to find a semantic direction in style space:
//! principal components of a sampled code corpus (unsupervised), and the
//! normalized difference of class means for a binary attribute (a hyperplane
//! normal). Directions are unit vectors, optionally restricted to a subset of
//! style rows when applied.

use crate::toygen::LatentCode;
use crate::{shape_err, Error, Result};
use ndarray::{ArrayD, IxDyn};
use tapegrad::Scalar;

/// A unit direction in style space.
pub struct EditDirection<S: Scalar> {
    pub vector: ArrayD<S>,
    /// Rows the direction applies to; `None` means all rows.
    pub row_mask: Option<Vec<usize>>,
    pub label: String,
}

impl<S: Scalar> EditDirection<S> {
    /// Normalize `vector` to unit length and wrap it.
    pub fn from_vector(
        vector: ArrayD<S>,
        row_mask: Option<Vec<usize>>,
        label: &str,
    ) -> Result<Self> {
        if vector.ndim() != 1 {
            return Err(shape_err("edit direction", "[d]", vector.shape()));
        }
        let norm = vector.iter().map(|v| *v * *v).sum::<S>().sqrt();
        if norm.to_f64_lossy() < 1e-12 {
            return Err(Error::Degenerate("zero-norm direction".into()));
        }
        Ok(EditDirection {
            vector: vector.mapv(|v| v / norm),
            row_mask,
            label: label.to_string(),
        })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    /// The K×d additive delta `alpha · direction` on the masked rows.
    pub fn row_delta(&self, num_rows: usize, alpha: S) -> Result<ArrayD<S>> {
        let d = self.dim();
        let mut delta = ArrayD::zeros(IxDyn(&[num_rows, d]));
        let rows: Vec<usize> = match &self.row_mask {
            Some(m) => {
                if let Some(bad) = m.iter().find(|r| **r >= num_rows) {
                    return Err(Error::Config(format!("row {bad} outside 0..{num_rows}")));
                }
                m.clone()
            }
            None => (0..num_rows).collect(),
        };
        for r in rows {
            for c in 0..d {
                delta[[r, c]] = alpha * self.vector[[c]];
            }
        }
        Ok(delta)
    }
}

/// Move `w` by `alpha` along the direction on its masked rows.
pub fn apply_direction<S: Scalar>(
    w: &LatentCode<S>,
    dir: &EditDirection<S>,
    alpha: S,
) -> Result<LatentCode<S>> {
    if w.ndim() != 2 || w.shape()[1] != dir.dim() {
        return Err(shape_err("apply_direction", ["K", "d"], w.shape()));
    }
    let delta = dir.row_delta(w.shape()[0], alpha)?;
    Ok(w + &delta)
}

/// Top-k principal directions of a mean-centered N×d corpus, with their
/// explained-variance ratios, in descending eigenvalue order.
pub fn pca_directions<S: Scalar>(
    corpus: &ArrayD<S>,
    k: usize,
) -> Result<Vec<(EditDirection<S>, f64)>> {
    let (n, d) = corpus_dims(corpus)?;
    if k == 0 || k > d {
        return Err(Error::Config(format!("k = {k} outside 1..={d}")));
    }
    // covariance in f64 for a stable symmetric eigensolve
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| corpus[[i, j]].to_f64_lossy()).sum::<f64>() / n as f64)
        .collect();
    let mut cov = nalgebra::DMatrix::<f64>::zeros(d, d);
    for i in 0..n {
        for a in 0..d {
            let va = corpus[[i, a]].to_f64_lossy() - mean[a];
            for bcol in a..d {
                let vb = corpus[[i, bcol]].to_f64_lossy() - mean[bcol];
                cov[(a, bcol)] += va * vb;
            }
        }
    }
    for a in 0..d {
        for bcol in 0..a {
            cov[(a, bcol)] = cov[(bcol, a)];
        }
    }
    cov /= (n - 1) as f64;
    let total: f64 = (0..d).map(|i| cov[(i, i)]).sum();
    if total < 1e-18 {
        return Err(Error::Degenerate("corpus has zero variance".into()));
    }
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|a, b| {
        eig.eigenvalues[*b]
            .partial_cmp(&eig.eigenvalues[*a])
            .unwrap()
            .then(a.cmp(b))
    });
    let mut out = Vec::with_capacity(k);
    for (rank, &idx) in order.iter().take(k).enumerate() {
        let mut v: Vec<f64> = (0..d).map(|r| eig.eigenvectors[(r, idx)]).collect();
        // fix the sign so the largest-magnitude entry is positive
        let lead = (0..d)
            .max_by(|a, b| v[*a].abs().partial_cmp(&v[*b].abs()).unwrap())
            .unwrap();
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        let vector = ArrayD::from_shape_vec(IxDyn(&[d]), v.iter().map(|x| S::lit(*x)).collect())
            .unwrap();
        let ratio = (eig.eigenvalues[idx] / total).max(0.0);
        out.push((
            EditDirection::from_vector(vector, None, &format!("pca{rank}"))?,
            ratio,
        ));
    }
    Ok(out)
}

/// Unit normal of the class-mean hyperplane: mean(positive) − mean(negative),
/// normalized.
pub fn hyperplane_direction<S: Scalar>(
    corpus: &ArrayD<S>,
    labels: &[bool],
) -> Result<EditDirection<S>> {
    let (n, d) = corpus_dims(corpus)?;
    if labels.len() != n {
        return Err(Error::Config(format!(
            "{} labels for {n} corpus rows",
            labels.len()
        )));
    }
    let npos = labels.iter().filter(|l| **l).count();
    if npos == 0 || npos == n {
        return Err(Error::Degenerate("both classes must be non-empty".into()));
    }
    let mut diff = vec![0.0f64; d];
    for (i, &lab) in labels.iter().enumerate() {
        let wgt = if lab {
            1.0 / npos as f64
        } else {
            -1.0 / (n - npos) as f64
        };
        for (j, dj) in diff.iter_mut().enumerate() {
            *dj += wgt * corpus[[i, j]].to_f64_lossy();
        }
    }
    let vector =
        ArrayD::from_shape_vec(IxDyn(&[d]), diff.iter().map(|x| S::lit(*x)).collect()).unwrap();
    EditDirection::from_vector(vector, None, "hyperplane")
}

fn corpus_dims<S: Scalar>(corpus: &ArrayD<S>) -> Result<(usize, usize)> {
    if corpus.ndim() != 2 || corpus.shape()[0] < 2 {
        return Err(shape_err("code corpus", "[N>=2, d]", corpus.shape()));
    }
    Ok((corpus.shape()[0], corpus.shape()[1]))
}
