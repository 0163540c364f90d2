//! PCA projection of embeddings with per-label cluster statistics.

use serde::{Deserialize, Serialize};

use crate::linalg::{distance, dot, norm, symmetric_eigen};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtlasPoint {
    pub label: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub label: String,
    pub count: usize,
    /// Mean silhouette of the label's members; absent with a single label.
    pub silhouette: Option<f64>,
    /// Mean Euclidean distance of members to their centroid, in the original
    /// embedding space.
    pub centroid_spread: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtlasReport {
    pub points: Vec<AtlasPoint>,
    pub components: [Vec<f64>; 2],
    pub explained_variance: [f64; 2],
    pub silhouette: Option<f64>,
    pub labels: Vec<LabelStats>,
}

impl AtlasReport {
    pub fn label(&self, name: &str) -> Option<&LabelStats> {
        self.labels.iter().find(|l| l.label == name)
    }
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        return 1.0;
    }
    1.0 - dot(a, b) / d
}

/// Label names in first-appearance order.
fn label_order(labels: &[&str]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for l in labels {
        if !out.iter().any(|o| o == l) {
            out.push(l.to_string());
        }
    }
    out
}

/// Per-point silhouette values under cosine distance, or `None` when fewer
/// than two labels are present. Members of singleton labels score 0.
pub fn silhouette_values(vectors: &[Vec<f64>], labels: &[&str]) -> Option<Vec<f64>> {
    let names = label_order(labels);
    if names.len() < 2 {
        return None;
    }
    let n = vectors.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut sums = vec![0.0; names.len()];
        let mut counts = vec![0usize; names.len()];
        for j in 0..n {
            if i == j {
                continue;
            }
            let g = names.iter().position(|l| l == labels[j]).expect("known label");
            sums[g] += cosine_distance(&vectors[i], &vectors[j]);
            counts[g] += 1;
        }
        let own = names.iter().position(|l| l == labels[i]).expect("known label");
        if counts[own] == 0 {
            out.push(0.0);
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..names.len())
            .filter(|&g| g != own && counts[g] > 0)
            .map(|g| sums[g] / counts[g] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        out.push(if m > 0.0 { (b - a) / m } else { 0.0 });
    }
    Some(out)
}

pub fn centroid(vectors: &[&Vec<f64>]) -> Vec<f64> {
    let d = vectors.first().map_or(0, |v| v.len());
    let mut c = vec![0.0; d];
    for v in vectors {
        for (a, b) in c.iter_mut().zip(v.iter()) {
            *a += b;
        }
    }
    c.iter_mut().for_each(|x| *x /= vectors.len().max(1) as f64);
    c
}

/// Centers the embeddings, projects them on the top two principal
/// components and summarizes each label's cluster.
pub fn embedding_atlas(items: &[(String, Vec<f64>)]) -> Result<AtlasReport> {
    if items.len() < 2 {
        return Err(Error::Degenerate("need at least two embeddings".into()));
    }
    let d = items[0].1.len();
    if d == 0 || items.iter().any(|(_, v)| v.len() != d) {
        return Err(Error::Degenerate("embeddings must share a positive dimension".into()));
    }
    let n = items.len();
    let vectors: Vec<Vec<f64>> = items.iter().map(|(_, v)| v.clone()).collect();
    let all: Vec<&Vec<f64>> = vectors.iter().collect();
    let mean = centroid(&all);
    let centered: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(a, b)| a - b).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for c in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += c[i] * c[j] / n as f64;
            }
        }
    }
    let (values, vectors_pc) = symmetric_eigen(&cov, d);
    let scale = vectors.iter().map(|v| norm(v)).fold(0.0, f64::max).max(1.0);
    if values[0] <= 1e-24 * scale * scale {
        return Err(Error::Degenerate("all embeddings are identical".into()));
    }
    let pc0 = vectors_pc[0].clone();
    let pc1 = if d > 1 { vectors_pc[1].clone() } else { vec![0.0] };
    let points = items
        .iter()
        .zip(&centered)
        .map(|((label, _), c)| AtlasPoint {
            label: label.clone(),
            x: dot(c, &pc0),
            y: dot(c, &pc1),
        })
        .collect();
    let labels: Vec<&str> = items.iter().map(|(l, _)| l.as_str()).collect();
    let sil = silhouette_values(&vectors, &labels);
    let names = label_order(&labels);
    let stats = names
        .iter()
        .map(|name| {
            let idx: Vec<usize> = (0..n).filter(|&i| labels[i] == name).collect();
            let members: Vec<&Vec<f64>> = idx.iter().map(|&i| &vectors[i]).collect();
            let c = centroid(&members);
            LabelStats {
                label: name.clone(),
                count: idx.len(),
                silhouette: sil
                    .as_ref()
                    .map(|s| idx.iter().map(|&i| s[i]).sum::<f64>() / idx.len() as f64),
                centroid_spread: members.iter().map(|v| distance(v, &c)).sum::<f64>() / idx.len() as f64,
            }
        })
        .collect();
    Ok(AtlasReport {
        points,
        components: [pc0, pc1],
        explained_variance: [values[0], values.get(1).copied().unwrap_or(0.0)],
        silhouette: sil.map(|s| s.iter().sum::<f64>() / n as f64),
        labels: stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use proptest::prelude::*;

    fn labeled(label: &str, v: Vec<f64>) -> (String, Vec<f64>) {
        (label.to_string(), v)
    }

    #[test]
    fn planar_embeddings_keep_their_distances() {
        let mut rng = Stream::new(1);
        let u = rng.normals(16);
        let w = rng.normals(16);
        let items: Vec<(String, Vec<f64>)> = (0..12)
            .map(|i| {
                let (a, b) = (rng.normal() * 3.0, rng.normal());
                let v = (0..16).map(|k| 0.5 + a * u[k] + b * w[k]).collect();
                labeled(if i % 2 == 0 { "p" } else { "q" }, v)
            })
            .collect();
        let atlas = embedding_atlas(&items).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                let orig = distance(&items[i].1, &items[j].1);
                let (p, q) = (&atlas.points[i], &atlas.points[j]);
                let proj = ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt();
                assert!((orig - proj).abs() < 1e-9, "{orig} {proj}");
            }
        }
    }

    #[test]
    fn components_are_orthonormal() {
        let mut rng = Stream::new(2);
        let items: Vec<_> = (0..20).map(|i| labeled(&format!("l{}", i % 3), rng.normals(16))).collect();
        let atlas = embedding_atlas(&items).unwrap();
        let [a, b] = &atlas.components;
        assert!((norm(a) - 1.0).abs() < 1e-9);
        assert!((norm(b) - 1.0).abs() < 1e-9);
        assert!(dot(a, b).abs() < 1e-9);
        assert!(atlas.explained_variance[0] >= atlas.explained_variance[1]);
    }

    #[test]
    fn separated_clusters_score_near_one() {
        let mut rng = Stream::new(3);
        let ca = rng.normals(16);
        let cb: Vec<f64> = ca.iter().map(|x| -x).collect();
        let mut items = Vec::new();
        for _ in 0..10 {
            items.push(labeled("a", ca.iter().map(|x| x + 0.01 * rng.normal()).collect()));
            items.push(labeled("b", cb.iter().map(|x| x + 0.01 * rng.normal()).collect()));
        }
        let atlas = embedding_atlas(&items).unwrap();
        assert!(atlas.silhouette.unwrap() > 0.9);
        assert_eq!(atlas.labels.len(), 2);
        assert!(atlas.labels.iter().all(|l| l.count == 10 && l.centroid_spread < 0.1));
    }

    #[test]
    fn single_label_has_no_silhouette() {
        let items = vec![labeled("x", vec![1.0, 0.0]), labeled("x", vec![0.0, 1.0])];
        let atlas = embedding_atlas(&items).unwrap();
        assert_eq!(atlas.silhouette, None);
        assert_eq!(atlas.points.len(), 2);
        assert_eq!(atlas.labels[0].silhouette, None);
    }

    #[test]
    fn identical_embeddings_are_degenerate() {
        let items = vec![labeled("x", vec![1.0; 4]), labeled("y", vec![1.0; 4])];
        assert!(matches!(embedding_atlas(&items), Err(Error::Degenerate(_))));
        assert!(embedding_atlas(&items[..1]).is_err());
    }

    fn brute_force(vectors: &[Vec<f64>], labels: &[&str]) -> Vec<f64> {
        let n = vectors.len();
        let mut names: Vec<&str> = Vec::new();
        for l in labels {
            if !names.contains(l) {
                names.push(l);
            }
        }
        let mut dist = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                dist[i][j] = cosine_distance(&vectors[i], &vectors[j]);
            }
        }
        (0..n)
            .map(|i| {
                let mean_to = |name: &str| {
                    let (mut s, mut c) = (0.0, 0usize);
                    for j in 0..n {
                        if j != i && labels[j] == name {
                            s += dist[i][j];
                            c += 1;
                        }
                    }
                    (c > 0).then(|| s / c as f64)
                };
                match mean_to(labels[i]) {
                    None => 0.0,
                    Some(a) => {
                        let b = names
                            .iter()
                            .filter(|&&m| m != labels[i])
                            .filter_map(|m| mean_to(m))
                            .fold(f64::INFINITY, f64::min);
                        let m = a.max(b);
                        if m > 0.0 {
                            (b - a) / m
                        } else {
                            0.0
                        }
                    }
                }
            })
            .collect()
    }

    proptest! {
        #[test]
        fn silhouette_matches_brute_force(seed in 0u64..1000, n in 2usize..50, k in 2usize..5) {
            let mut rng = Stream::new(seed);
            let vectors: Vec<Vec<f64>> = (0..n).map(|_| rng.normals(4)).collect();
            let names = ["a", "b", "c", "d", "e"];
            let labels: Vec<&str> = (0..n).map(|i| names[(i * 7 + rng.below(k)) % k]).collect();
            let got = silhouette_values(&vectors, &labels);
            let distinct = labels.iter().collect::<std::collections::HashSet<_>>().len();
            if distinct < 2 {
                prop_assert!(got.is_none());
            } else {
                prop_assert_eq!(got.unwrap(), brute_force(&vectors, &labels));
            }
        }
    }
}
