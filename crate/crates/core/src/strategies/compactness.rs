//! Cluster compactness of an embedding set: mean within-class cosine
//! distance over mean between-centroid cosine distance, plus a 2-D PCA
//! projection for plotting.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::dot;

/// Below this the between-centroid distance counts as zero.
const INTER_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompactnessReport {
    /// Mean cosine distance over all same-class pairs.
    pub intra: f64,
    /// Mean cosine distance over all pairs of class centroids.
    pub inter: f64,
    pub ratio: f64,
    /// `(x, y, label)` per input embedding.
    pub projection_2d: Vec<(f64, f64, usize)>,
    pub projection_method: &'static str,
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    1.0 - dot(a, b) / (na * nb).max(f64::MIN_POSITIVE)
}

pub fn compactness_report(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<CompactnessReport> {
    if embeddings.len() != labels.len() {
        return Err(Error::shape("compactness", &[embeddings.len()], &[labels.len()]));
    }
    let mut by_class: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    for (e, &y) in embeddings.iter().zip(labels) {
        by_class.entry(y).or_default().push(e);
    }
    if by_class.len() < 2 {
        return Err(Error::UndefinedRatio(format!(
            "need at least 2 classes, found {}",
            by_class.len()
        )));
    }

    let (mut intra_sum, mut intra_pairs) = (0.0, 0usize);
    for members in by_class.values() {
        for i in 0..members.len() {
            for j in i + 1..members.len() {
                intra_sum += cosine_distance(members[i], members[j]);
                intra_pairs += 1;
            }
        }
    }
    if intra_pairs == 0 {
        return Err(Error::UndefinedRatio("no class has two samples".into()));
    }
    let intra = intra_sum / intra_pairs as f64;

    let centroids: Vec<Vec<f64>> = by_class
        .values()
        .map(|m| {
            let mut c = vec![0.0; m[0].len()];
            for v in m {
                c.iter_mut().zip(v.iter()).for_each(|(a, b)| *a += b);
            }
            c.iter_mut().for_each(|a| *a /= m.len() as f64);
            c
        })
        .collect();
    let (mut inter_sum, mut inter_pairs) = (0.0, 0usize);
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            inter_sum += cosine_distance(&centroids[i], &centroids[j]);
            inter_pairs += 1;
        }
    }
    let inter = inter_sum / inter_pairs as f64;
    if inter < INTER_FLOOR {
        return Err(Error::UndefinedRatio(format!(
            "between-centroid distance {inter:e} is zero"
        )));
    }

    let projection_2d = pca_2d(embeddings)?
        .into_iter()
        .zip(labels)
        .map(|((x, y), &l)| (x, y, l))
        .collect();
    Ok(CompactnessReport {
        intra,
        inter,
        ratio: intra / inter,
        projection_2d,
        projection_method: "pca",
    })
}

/// Coordinates along the top two principal components. Each component's
/// sign is fixed so that its largest-magnitude entry is positive.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
    let n = points.len();
    let d = points.first().map_or(0, Vec::len);
    if n == 0 || d == 0 {
        return Err(Error::data("PCA needs at least one non-empty point"));
    }
    let x = DMatrix::from_fn(n, d, |i, j| points[i][j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axis = |k: usize| -> Vec<f64> {
        let Some(&col) = order.get(k) else {
            return vec![0.0; d];
        };
        let mut v: Vec<f64> = eig.eigenvectors.column(col).iter().copied().collect();
        let pivot = v.iter().copied().fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
        if pivot < 0.0 {
            v.iter_mut().for_each(|a| *a = -*a);
        }
        v
    };
    let (a0, a1) = (axis(0), axis(1));
    Ok((0..n)
        .map(|i| {
            let row: Vec<f64> = centered.row(i).iter().copied().collect();
            (dot(&row, &a0), dot(&row, &a1))
        })
        .collect())
}
