//! Reference implementations written without the crate's algorithms: brute
//! force over edge sequences, direct cosine, plain counting, a full
//! confusion matrix.

use std::collections::{BTreeMap, BTreeSet};

/// `(source, relation, target)` triple.
pub type Triple = (String, String, String);

/// Every simple path of 1..=max_hops edges from `start` to `end`, found by
/// testing every edge sequence of each length.
pub fn brute_force_paths(edges: &[Triple], start: &str, end: &str, max_hops: usize) -> BTreeSet<Vec<Triple>> {
    let edges: Vec<Triple> = edges.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let mut found = BTreeSet::new();
    if edges.is_empty() {
        return found;
    }
    for len in 1..=max_hops {
        let mut idx = vec![0usize; len];
        'seq: loop {
            let seq: Vec<&Triple> = idx.iter().map(|&i| &edges[i]).collect();
            let chains = seq.windows(2).all(|w| w[0].2 == w[1].0);
            if chains && seq[0].0 == start && seq[len - 1].2 == end {
                let mut nodes: Vec<&str> = vec![seq[0].0.as_str()];
                nodes.extend(seq.iter().map(|e| e.2.as_str()));
                let distinct: BTreeSet<&str> = nodes.iter().copied().collect();
                if distinct.len() == nodes.len() {
                    found.insert(seq.into_iter().cloned().collect());
                }
            }
            // Odometer increment over edge indices.
            for pos in (0..len).rev() {
                idx[pos] += 1;
                if idx[pos] < edges.len() {
                    continue 'seq;
                }
                idx[pos] = 0;
            }
            break;
        }
    }
    found
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Full sort by descending score then ascending id, truncated to `k`.
pub fn sort_top(scored: &[(String, f64)], k: usize) -> Vec<(String, f64)> {
    let mut all = scored.to_vec();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// `(hits, total)` for a 0/1 indicator vector.
pub fn count_ratio(hits: &[bool]) -> (usize, usize) {
    (hits.iter().filter(|h| **h).count(), hits.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f05: f64,
}

/// Support-weighted averages from an explicit confusion matrix, in percent.
pub fn confusion_matrix_scores(pairs: &[(&str, &str)]) -> WeightedScores {
    let labels: BTreeSet<&str> = pairs.iter().flat_map(|(t, p)| [*t, *p]).collect();
    let mut matrix: BTreeMap<(&str, &str), f64> = BTreeMap::new();
    for (t, p) in pairs {
        *matrix.entry((t, p)).or_default() += 1.0;
    }
    let cell = |t: &str, p: &str| matrix.get(&(t, p)).copied().unwrap_or(0.0);
    let n = pairs.len() as f64;
    let (mut wp, mut wr, mut wf1, mut wf05) = (0.0, 0.0, 0.0, 0.0);
    for &c in &labels {
        let row: f64 = labels.iter().map(|&p| cell(c, p)).sum();
        let col: f64 = labels.iter().map(|&t| cell(t, c)).sum();
        let diag = cell(c, c);
        let p = if col > 0.0 { diag / col } else { 0.0 };
        let r = if row > 0.0 { diag / row } else { 0.0 };
        let f = |beta: f64| {
            let b2 = beta * beta;
            if p + r == 0.0 {
                0.0
            } else {
                (1.0 + b2) * p * r / (b2 * p + r)
            }
        };
        let w = row / n;
        wp += w * p;
        wr += w * r;
        wf1 += w * f(1.0);
        wf05 += w * f(0.5);
    }
    WeightedScores {
        precision: 100.0 * wp,
        recall: 100.0 * wr,
        f1: 100.0 * wf1,
        f05: 100.0 * wf05,
    }
}
