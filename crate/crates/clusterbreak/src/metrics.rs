//! Clustering evaluation: NMI, ARI, ACC via optimal assignment, confusion
//! tables, and the cluster-to-class mapping used to read off agreements.
//!
//! Conventions (fixed across the whole crate so tables are internally
//! consistent): natural-log entropies, NMI normalized by the arithmetic mean
//! of the two entropies, zero-entropy NMI is 0 unless both partitions are a
//! single identical cluster (then 1), argmax mapping by maximum agreement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Joint counts of (predicted cluster, ground-truth class).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
    pub n: u64,
}

impl ContingencyTable {
    pub fn from_labels(pred: &[usize], truth: &[usize]) -> Result<ContingencyTable> {
        if pred.len() != truth.len() {
            return Err(Error::shape(
                format!("{} labels", pred.len()),
                format!("{} labels", truth.len()),
            ));
        }
        if pred.is_empty() {
            return Err(Error::invalid("labels", "need at least one sample"));
        }
        let k_pred = pred.iter().max().unwrap() + 1;
        let k_true = truth.iter().max().unwrap() + 1;
        let mut counts = vec![vec![0u64; k_true]; k_pred];
        for (&p, &t) in pred.iter().zip(truth.iter()) {
            counts[p][t] += 1;
        }
        Ok(ContingencyTable {
            counts,
            n: pred.len() as u64,
        })
    }

    pub fn k_pred(&self) -> usize {
        self.counts.len()
    }

    pub fn k_true(&self) -> usize {
        self.counts.first().map_or(0, |r| r.len())
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        let mut sums = vec![0u64; self.k_true()];
        for row in &self.counts {
            for (j, &v) in row.iter().enumerate() {
                sums[j] += v;
            }
        }
        sums
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.counts {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Injective map from predicted cluster index to ground-truth class index.
/// Surplus clusters (when k_pred > k_true) keep their own index and never
/// count as agreements.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterMapping {
    pub assignment: Vec<usize>,
    pub k_true: usize,
}

impl ClusterMapping {
    pub fn maps_to_class(&self, pred_cluster: usize) -> Option<usize> {
        let class = self.assignment[pred_cluster];
        (class < self.k_true).then_some(class)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nmi: f64,
    pub ari: f64,
    pub acc: f64,
    pub confusion: ContingencyTable,
    pub mapping: ClusterMapping,
}

fn entropy(counts: &[u64], n: u64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with arithmetic-mean normalization.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = ContingencyTable::from_labels(pred, truth)?;
    let n = table.n;
    let rows = table.row_sums();
    let cols = table.col_sums();
    let h_pred = entropy(&rows, n);
    let h_true = entropy(&cols, n);
    if h_pred == 0.0 || h_true == 0.0 {
        // single-cluster convention
        return Ok(if h_pred == 0.0 && h_true == 0.0 { 1.0 } else { 0.0 });
    }
    let mut mi = 0.0;
    for (i, row) in table.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let pij = c as f64 / n as f64;
            let pi = rows[i] as f64 / n as f64;
            let pj = cols[j] as f64 / n as f64;
            mi += pij * (pij / (pi * pj)).ln();
        }
    }
    Ok((mi / (0.5 * (h_pred + h_true))).clamp(0.0, 1.0))
}

fn comb2(x: u64) -> f64 {
    (x as f64) * (x as f64 - 1.0) / 2.0
}

/// Adjusted Rand index from the contingency table.
pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() < 2 {
        return Err(Error::invalid("labels", "ARI needs at least two samples"));
    }
    let table = ContingencyTable::from_labels(pred, truth)?;
    let sum_ij: f64 = table.counts.iter().flatten().map(|&c| comb2(c)).sum();
    let sum_a: f64 = table.row_sums().iter().map(|&c| comb2(c)).sum();
    let sum_b: f64 = table.col_sums().iter().map(|&c| comb2(c)).sum();
    let total = comb2(table.n);
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    if (max_index - expected).abs() < 1e-12 {
        // both partitions trivial; identical by convention
        return Ok(1.0);
    }
    Ok((sum_ij - expected) / (max_index - expected))
}

/// Minimum-cost assignment on a square matrix (potentials method).
/// Returns for each row its assigned column.
fn hungarian_min(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row matched to column j (1-based)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Unsupervised accuracy: best agreement over injective cluster-to-class
/// mappings, solved by optimal assignment on the contingency table.
pub fn acc(pred: &[usize], truth: &[usize]) -> Result<(f64, ClusterMapping)> {
    let table = ContingencyTable::from_labels(pred, truth)?;
    let (kp, kt) = (table.k_pred(), table.k_true());
    if kp > 64 || kt > 64 {
        return Err(Error::invalid("k", "ACC supports up to 64 clusters/classes"));
    }
    let m = kp.max(kt);
    // minimize negated agreement counts on the padded square matrix
    let mut cost = vec![vec![0.0f64; m]; m];
    for i in 0..kp {
        for j in 0..kt {
            cost[i][j] = -(table.counts[i][j] as f64);
        }
    }
    let row_to_col = hungarian_min(&cost);
    let mut agreements = 0u64;
    let mut assignment = vec![0usize; kp];
    for i in 0..kp {
        let col = row_to_col[i];
        if col < kt {
            assignment[i] = col;
            agreements += table.counts[i][col];
        } else {
            // surplus cluster: identity padding, counts as errors
            assignment[i] = i;
        }
    }
    Ok((
        agreements as f64 / table.n as f64,
        ClusterMapping {
            assignment,
            k_true: kt,
        },
    ))
}

/// Contingency table with rows reordered by the mapping so agreements fall on
/// the diagonal.
pub fn confusion(pred: &[usize], truth: &[usize], mapping: &ClusterMapping) -> Result<ContingencyTable> {
    let table = ContingencyTable::from_labels(pred, truth)?;
    let kp = table.k_pred();
    let kt = table.k_true();
    let mut order: Vec<usize> = (0..kp).collect();
    // mapped clusters sorted by their class, surplus clusters after
    order.sort_by_key(|&i| match mapping.assignment.get(i) {
        Some(&c) if c < kt => (0, c),
        _ => (1, i),
    });
    let counts = order.into_iter().map(|i| table.counts[i].clone()).collect();
    Ok(ContingencyTable { counts, n: table.n })
}

/// Bundles NMI, ARI, ACC, and the mapped confusion table.
pub fn report(pred: &[usize], truth: &[usize]) -> Result<MetricsReport> {
    let nmi_v = nmi(pred, truth)?;
    let ari_v = ari(pred, truth)?;
    let (acc_v, mapping) = acc(pred, truth)?;
    let confusion = confusion(pred, truth, &mapping)?;
    Ok(MetricsReport {
        nmi: nmi_v,
        ari: ari_v,
        acc: acc_v,
        confusion,
        mapping,
    })
}

/// Brute-force ACC over all injective mappings; test oracle, exponential in k.
pub fn acc_brute_force(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = ContingencyTable::from_labels(pred, truth)?;
    let (kp, kt) = (table.k_pred(), table.k_true());
    let m = kp.max(kt);
    let mut cols: Vec<usize> = (0..m).collect();
    let mut best = 0u64;
    permute(&mut cols, 0, &mut |perm| {
        let mut agree = 0u64;
        for i in 0..kp {
            let j = perm[i];
            if j < kt {
                agree += table.counts[i][j];
            }
        }
        best = best.max(agree);
    });
    Ok(best as f64 / table.n as f64)
}

fn permute(items: &mut Vec<usize>, start: usize, visit: &mut impl FnMut(&[usize])) {
    if start == items.len() {
        visit(items);
        return;
    }
    for i in start..items.len() {
        items.swap(start, i);
        permute(items, start + 1, visit);
        items.swap(start, i);
    }
}
