use crate::error::{Error, Result};

/// Counts of (true label, predicted cluster) pairs and their row-normalised
/// frequencies. Rows are true labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<usize>>,
    pub normalized: Vec<Vec<f64>>,
    /// True labels that never occur; their normalised rows are all zero.
    pub empty_rows: Vec<usize>,
}

impl ContingencyTable {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// Largest normalised entry of each row.
    pub fn row_max(&self) -> Vec<f64> {
        self.normalized.iter().map(|r| r.iter().copied().fold(0.0, f64::max)).collect()
    }
}

fn check_pair(truth: &[usize], pred: &[usize]) -> Result<()> {
    if truth.is_empty() {
        return Err(Error::Contract("contingency of an empty labelling".into()));
    }
    if truth.len() != pred.len() {
        return Err(Error::Contract(format!("{} labels against {} assignments", truth.len(), pred.len())));
    }
    Ok(())
}

/// Table sized by the largest label and cluster index present.
pub fn contingency(truth: &[usize], pred: &[usize]) -> Result<ContingencyTable> {
    check_pair(truth, pred)?;
    let rows = truth.iter().max().map_or(0, |m| m + 1);
    let cols = pred.iter().max().map_or(0, |m| m + 1);
    contingency_sized(truth, pred, rows, cols)
}

/// Table with a fixed shape, e.g. `K × K` even when some cluster is unused.
pub fn contingency_sized(truth: &[usize], pred: &[usize], rows: usize, cols: usize) -> Result<ContingencyTable> {
    check_pair(truth, pred)?;
    let mut counts = vec![vec![0usize; cols]; rows];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= rows || p >= cols {
            return Err(Error::Index(format!("pair ({t}, {p}) outside a {rows}x{cols} table")));
        }
        counts[t][p] += 1;
    }
    let mut empty_rows = Vec::new();
    let normalized = counts
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total: usize = row.iter().sum();
            if total == 0 {
                empty_rows.push(i);
                vec![0.0; cols]
            } else {
                row.iter().map(|&c| c as f64 / total as f64).collect()
            }
        })
        .collect();
    Ok(ContingencyTable { counts, normalized, empty_rows })
}

/// Best one-to-one matching of clusters to labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterMatch {
    pub accuracy: f64,
    /// `mapping[cluster]` is the label the cluster is matched to.
    pub mapping: Vec<usize>,
}

const MAX_BRUTE_FORCE: usize = 8;

/// Accuracy under the best permutation of cluster indices, found by trying
/// all of them. Both label sets are padded to the same size `K ≤ 8`.
pub fn cluster_accuracy(truth: &[usize], pred: &[usize]) -> Result<ClusterMatch> {
    check_pair(truth, pred)?;
    let k = truth.iter().chain(pred).max().map_or(0, |m| m + 1);
    if k > MAX_BRUTE_FORCE {
        return Err(Error::Unsupported(format!("{k} clusters; permutation search handles at most {MAX_BRUTE_FORCE}")));
    }
    let table = contingency_sized(truth, pred, k, k)?;
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = (0usize, perm.clone());
    permute(&mut perm, 0, &mut |p| {
        let hits: usize = (0..k).map(|c| table.counts[p[c]][c]).sum();
        if hits > best.0 {
            best = (hits, p.to_vec());
        }
    });
    Ok(ClusterMatch { accuracy: best.0 as f64 / truth.len() as f64, mapping: best.1 })
}

/// Visits every permutation of `p[start..]`, identity first.
fn permute(p: &mut Vec<usize>, start: usize, visit: &mut impl FnMut(&[usize])) {
    if start == p.len() {
        visit(p);
        return;
    }
    for i in start..p.len() {
        p.swap(start, i);
        permute(p, start + 1, visit);
        p.swap(start, i);
    }
}
