//! Average-linkage agglomerative clustering under cosine similarity.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("clustering needs at least 2 points, got {0}")]
    TooFew(usize),
    #[error("point {index} has dimension {got}, expected {expected}")]
    Dimension { index: usize, expected: usize, got: usize },
    #[error("threshold must not be NaN")]
    Threshold,
}

/// Cosine similarity; zero vectors are dissimilar to everything.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

/// Clusters `points`, repeatedly merging the pair of clusters with the
/// highest average pairwise cosine similarity while it is at least
/// `threshold`. Ties go to the pair whose clusters contain the lowest point
/// indices. Labels are numbered densely in order of first appearance.
pub fn pseudo_label(points: &[Vec<f64>], threshold: f64) -> Result<Vec<usize>, ClusterError> {
    let n = points.len();
    if n < 2 {
        return Err(ClusterError::TooFew(n));
    }
    if threshold.is_nan() {
        return Err(ClusterError::Threshold);
    }
    let dim = points[0].len();
    for (i, p) in points.iter().enumerate() {
        if p.len() != dim {
            return Err(ClusterError::Dimension {
                index: i,
                expected: dim,
                got: p.len(),
            });
        }
    }

    // Slot i always holds the cluster whose smallest member is i.
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s = cosine(&points[i], &points[j]);
            sim[i * n + j] = s;
            sim[j * n + i] = s;
        }
    }
    let mut size = vec![1usize; n];
    let mut alive = vec![true; n];
    let mut owner: Vec<usize> = (0..n).collect();

    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            if !alive[i] {
                continue;
            }
            for j in i + 1..n {
                if !alive[j] {
                    continue;
                }
                let s = sim[i * n + j];
                if best.is_none_or(|(b, _, _)| s > b) {
                    best = Some((s, i, j));
                }
            }
        }
        let Some((s, i, j)) = best else { break };
        if s < threshold {
            break;
        }
        // Lance-Williams update for average linkage.
        let (si, sj) = (size[i] as f64, size[j] as f64);
        for k in 0..n {
            if alive[k] && k != i && k != j {
                let v = (si * sim[i * n + k] + sj * sim[j * n + k]) / (si + sj);
                sim[i * n + k] = v;
                sim[k * n + i] = v;
            }
        }
        size[i] += size[j];
        alive[j] = false;
        for o in owner.iter_mut() {
            if *o == j {
                *o = i;
            }
        }
    }

    Ok(renumber(&owner))
}

/// Maps arbitrary cluster ids to 0, 1, ... in order of first appearance.
pub fn renumber(ids: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    ids.iter()
        .map(|id| {
            let next = map.len();
            *map.entry(*id).or_insert(next)
        })
        .collect()
}
