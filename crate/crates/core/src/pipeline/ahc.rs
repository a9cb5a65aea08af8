//! Agglomerative clustering with centroid linkage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// `1 − cos`; centroids are re-normalised after averaging.
    Cosine,
    Euclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    /// Merging continues while the closest centroid pair is within this distance.
    pub threshold: f64,
    pub min_cluster_size: usize,
    pub metric: Metric,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            threshold: 0.7,
            min_cluster_size: 1,
            metric: Metric::Cosine,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) {
            return Err(Error::Config(format!("cluster threshold {} must be > 0", self.threshold)));
        }
        if self.min_cluster_size == 0 {
            return Err(Error::Config("min_cluster_size must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn distance(metric: Metric, a: &[f64], b: &[f64]) -> f64 {
    match metric {
        Metric::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            1.0 - dot / (na * nb)
        }
        Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
    }
}

fn centroid(metric: Metric, points: &[Vec<f64>], members: &[usize]) -> Vec<f64> {
    let d = points[members[0]].len();
    let mut c = vec![0.0; d];
    for &m in members {
        for (ci, x) in c.iter_mut().zip(&points[m]) {
            *ci += x;
        }
    }
    c.iter_mut().for_each(|x| *x /= members.len() as f64);
    if metric == Metric::Cosine {
        let n = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            c.iter_mut().for_each(|x| *x /= n);
        }
    }
    c
}

/// Merge phase only: clusters as sorted member lists, ordered by smallest member.
pub fn merge_clusters(points: &[Vec<f64>], threshold: f64, metric: Metric) -> Vec<Vec<usize>> {
    let mut clusters: Vec<Vec<usize>> = (0..points.len()).map(|i| vec![i]).collect();
    let mut cents: Vec<Vec<f64>> = clusters.iter().map(|m| centroid(metric, points, m)).collect();
    while clusters.len() > 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let d = distance(metric, &cents[i], &cents[j]);
                if best.map_or(true, |(bd, _, _)| d < bd) {
                    best = Some((d, i, j));
                }
            }
        }
        let (d, i, j) = best.expect("at least one pair");
        if d > threshold {
            break;
        }
        let moved = clusters.remove(j);
        cents.remove(j);
        clusters[i].extend(moved);
        clusters[i].sort_unstable();
        cents[i] = centroid(metric, points, &clusters[i]);
    }
    clusters
}

/// Cluster id per input, contiguous from 0 in order of first appearance.
///
/// After merging, clusters smaller than `min_cluster_size` are dissolved and
/// their members join the nearest surviving centroid. If no cluster reaches the
/// minimum size, the merge result is kept as is.
pub fn ahc_cluster(points: &[Vec<f64>], cfg: &ClusterConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    if points.is_empty() {
        return Err(Error::Data("no embeddings to cluster".into()));
    }
    let d = points[0].len();
    if d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(Error::Data("embeddings must share a positive dimension".into()));
    }
    let clusters = merge_clusters(points, cfg.threshold, cfg.metric);
    let mut raw = vec![0usize; points.len()];
    let (keep, drop): (Vec<_>, Vec<_>) = clusters
        .iter()
        .enumerate()
        .partition(|(_, m)| m.len() >= cfg.min_cluster_size);
    for (c, members) in clusters.iter().enumerate() {
        for &m in members {
            raw[m] = c;
        }
    }
    if !keep.is_empty() {
        let cents: Vec<(usize, Vec<f64>)> = keep
            .iter()
            .map(|(c, m)| (*c, centroid(cfg.metric, points, m)))
            .collect();
        for (_, members) in &drop {
            for &m in members.iter() {
                let (c, _) = cents
                    .iter()
                    .map(|(c, v)| (*c, distance(cfg.metric, &points[m], v)))
                    .fold(None, |acc: Option<(usize, f64)>, (c, dist)| match acc {
                        Some((_, bd)) if bd <= dist => acc,
                        _ => Some((c, dist)),
                    })
                    .expect("a surviving cluster");
                raw[m] = c;
            }
        }
    }
    Ok(relabel_by_first_appearance(&raw))
}

pub fn relabel_by_first_appearance(raw: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    raw.iter()
        .map(|&r| {
            let next = map.len();
            *map.entry(r).or_insert(next)
        })
        .collect()
}
