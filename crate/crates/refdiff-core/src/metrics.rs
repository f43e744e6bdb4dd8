//! Evaluation math: exact-match text scoring and a Fréchet distance between
//! Gaussian fits of feature sets.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tensor::{matmul, Scalar, Tensor};

/// Corpus-level text scores. Precision, recall, and F1 are micro-averaged
/// over all images; both accuracy conventions are reported because the
/// benchmark literature does not pin one down.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TextScore {
    /// Fraction of images whose keywords were all matched.
    pub accuracy_image: f64,
    /// Fraction of keywords matched across the corpus (word-level accuracy).
    pub accuracy_word: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub images: usize,
    pub keywords: usize,
    pub detections: usize,
    pub matched: usize,
}

/// Score detected transcripts against per-image keywords.
///
/// A detection counts iff it is string-equal to a keyword of the same image
/// that no earlier detection already claimed, which makes the match count
/// the multiset intersection size: permuting either list changes nothing.
pub fn score_text(keywords: &[Vec<String>], detections: &[Vec<String>]) -> Result<TextScore> {
    if keywords.len() != detections.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} keyword lists vs {} detection lists",
            keywords.len(),
            detections.len()
        )));
    }
    let mut matched = 0usize;
    let mut total_kw = 0usize;
    let mut total_det = 0usize;
    let mut full_images = 0usize;
    for (kws, dets) in keywords.iter().zip(detections) {
        if kws.is_empty() {
            return Err(CoreError::InvalidConfig(
                "every evaluated image needs at least one keyword".into(),
            ));
        }
        let mut pool: BTreeMap<&str, usize> = BTreeMap::new();
        for kw in kws {
            *pool.entry(kw.as_str()).or_insert(0) += 1;
        }
        let mut hit = 0usize;
        for det in dets {
            if let Some(n) = pool.get_mut(det.as_str()) {
                if *n > 0 {
                    *n -= 1;
                    hit += 1;
                }
            }
        }
        matched += hit;
        total_kw += kws.len();
        total_det += dets.len();
        if hit == kws.len() {
            full_images += 1;
        }
    }
    let images = keywords.len();
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(matched, total_det);
    let recall = ratio(matched, total_kw);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(TextScore {
        accuracy_image: ratio(full_images, images),
        accuracy_word: recall,
        precision,
        recall,
        f1,
        images,
        keywords: total_kw,
        detections: total_det,
        matched,
    })
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors in columns, so
/// `a = v diag(w) v^T`.
pub fn jacobi_eigh<T: Scalar>(a: &Tensor<T>) -> Result<(Vec<T>, Tensor<T>)> {
    let [n, m] = a.shape() else {
        return Err(CoreError::ShapeMismatch(format!(
            "expected square matrix, got {:?}",
            a.shape()
        )));
    };
    let (n, m) = (*n, *m);
    if n != m {
        return Err(CoreError::ShapeMismatch(format!("matrix is {n}x{m}")));
    }
    let mut mat = a.data().to_vec();
    let mut v = vec![T::zero(); n * n];
    for i in 0..n {
        v[i * n + i] = T::one();
    }
    let tol = T::epsilon() * T::from_f64(n as f64);
    for _sweep in 0..100 {
        let mut off = T::zero();
        for p in 0..n {
            for q in p + 1..n {
                off = off + mat[p * n + q] * mat[p * n + q];
            }
        }
        let scale = (0..n).fold(T::zero(), |acc, i| acc + mat[i * n + i] * mat[i * n + i]);
        if off.sqrt() <= tol * (scale.sqrt() + T::one()) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = mat[p * n + q];
                if apq == T::zero() {
                    continue;
                }
                let app = mat[p * n + p];
                let aqq = mat[q * n + q];
                let tau = (aqq - app) / (T::from_f64(2.0) * apq);
                let t = {
                    let sign = if tau >= T::zero() { T::one() } else { -T::one() };
                    sign / (tau.abs() + (T::one() + tau * tau).sqrt())
                };
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = mat[k * n + p];
                    let akq = mat[k * n + q];
                    mat[k * n + p] = c * akp - s * akq;
                    mat[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = mat[p * n + k];
                    let aqk = mat[q * n + k];
                    mat[p * n + k] = c * apk - s * aqk;
                    mat[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigvals: Vec<T> = (0..n).map(|i| mat[i * n + i]).collect();
    Ok((eigvals, Tensor::from_vec(&[n, n], v)?))
}

/// Symmetric positive-semidefinite square root; negative eigenvalues from
/// numerical noise are clamped to zero.
pub fn sym_sqrt<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (w, v) = jacobi_eigh(a)?;
    let n = w.len();
    let mut out = vec![T::zero(); n * n];
    for k in 0..n {
        let lam = if w[k] > T::zero() { w[k].sqrt() } else { T::zero() };
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = out[i * n + j] + lam * v.data()[i * n + k] * v.data()[j * n + k];
            }
        }
    }
    Tensor::from_vec(&[n, n], out)
}

fn moments<T: Scalar>(rows: &Tensor<T>) -> Result<(Vec<T>, Tensor<T>)> {
    let [n, d] = rows.shape() else {
        return Err(CoreError::ShapeMismatch(format!(
            "feature set must be (n, d), got {:?}",
            rows.shape()
        )));
    };
    let (n, d) = (*n, *d);
    if n < 2 {
        return Err(CoreError::InvalidConfig(
            "need at least two feature vectors per side".into(),
        ));
    }
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut mean = vec![T::zero(); d];
    for i in 0..n {
        for j in 0..d {
            mean[j] = mean[j] + rows.data()[i * d + j] * inv_n;
        }
    }
    // Unbiased covariance, regularized so starved sets stay invertible.
    let inv_nm1 = T::from_f64(1.0 / (n - 1) as f64);
    let mut cov = vec![T::zero(); d * d];
    for i in 0..n {
        for a in 0..d {
            let da = rows.data()[i * d + a] - mean[a];
            for b in a..d {
                let db = rows.data()[i * d + b] - mean[b];
                cov[a * d + b] = cov[a * d + b] + da * db * inv_nm1;
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            cov[a * d + b] = cov[b * d + a];
        }
        cov[a * d + a] = cov[a * d + a] + T::from_f64(1e-6);
    }
    Ok((mean, Tensor::from_vec(&[d, d], cov)?))
}

/// Fréchet distance between Gaussian fits of two feature sets, each `(n, d)`
/// with samples in rows:
/// `|mu_r - mu_g|^2 + tr(S_r + S_g - 2 (S_r S_g)^{1/2})`.
///
/// The cross term uses the symmetrized product
/// `S_r^{1/2} S_g S_r^{1/2}`, whose square-root trace equals the trace of
/// `(S_r S_g)^{1/2}`. The result is clamped at zero.
pub fn fid_proxy<T: Scalar>(real: &Tensor<T>, generated: &Tensor<T>) -> Result<T> {
    let (mu_r, cov_r) = moments(real)?;
    let (mu_g, cov_g) = moments(generated)?;
    if mu_r.len() != mu_g.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "feature dims differ: {} vs {}",
            mu_r.len(),
            mu_g.len()
        )));
    }
    let d = mu_r.len();
    let mut dist = T::zero();
    for j in 0..d {
        let delta = mu_r[j] - mu_g[j];
        dist = dist + delta * delta;
    }
    for j in 0..d {
        dist = dist + cov_r.data()[j * d + j] + cov_g.data()[j * d + j];
    }
    let root_r = sym_sqrt(&cov_r)?;
    let inner = matmul(&matmul(&root_r, &cov_g)?, &root_r)?;
    // Symmetrize before the eigensolver; the product carries tiny asymmetry.
    let mut sym = inner.data().to_vec();
    for a in 0..d {
        for b in a + 1..d {
            let avg = (sym[a * d + b] + sym[b * d + a]) * T::from_f64(0.5);
            sym[a * d + b] = avg;
            sym[b * d + a] = avg;
        }
    }
    let (w, _) = jacobi_eigh(&Tensor::from_vec(&[d, d], sym)?)?;
    for lam in w {
        let lam = if lam > T::zero() { lam.sqrt() } else { T::zero() };
        dist = dist - T::from_f64(2.0) * lam;
    }
    Ok(if dist > T::zero() { dist } else { T::zero() })
}
