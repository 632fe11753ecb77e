//! Synthetic generators, the MNIST loader and minibatching.

mod mnist;
mod synthetic;

use std::io::Write;
use std::path::Path;

pub use mnist::{load_mnist_idx, logit_transform, read_idx_images, read_idx_labels, MnistOptions, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use synthetic::{gen_pinwheel, gen_pinwheel_with, gen_two_circles, PinwheelParams};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Points with optional integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub points: Tensor,
    pub labels: Option<Vec<usize>>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(name: impl Into<String>, points: Tensor, labels: Option<Vec<usize>>, num_classes: usize) -> Result<Self> {
        let (n, _) = points.dims2()?;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Contract(format!("{} labels for {n} points", l.len())));
            }
            if let Some(&bad) = l.iter().find(|&&v| v >= num_classes) {
                return Err(Error::Index(format!("label {bad} with {num_classes} classes")));
            }
        }
        Ok(LabeledDataset { name: name.into(), points, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.shape()[1]
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels.as_deref().ok_or_else(|| Error::Contract(format!("dataset `{}` has no labels", self.name)))
    }

    /// Rows `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let points = self.points.select_rows(idx);
        let labels = self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect());
        Ok(LabeledDataset { name: self.name.clone(), points, labels, num_classes: self.num_classes })
    }

    /// Shuffled minibatches covering every point exactly once.
    pub fn minibatches(&self, batch_size: usize, seed: u64) -> Result<Vec<LabeledDataset>> {
        minibatch_indices(self.len(), batch_size, &mut rng::seeded(seed))?.iter().map(|idx| self.subset(idx)).collect()
    }

    /// CSV with header `x0,..,x{D-1},label`; the label column is empty for
    /// unlabeled data.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).chain(["label".to_string()]).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for r in 0..self.len() {
            for v in self.points.row(r) {
                out.push_str(&format!("{v},"));
            }
            if let Some(l) = &self.labels {
                out.push_str(&l[r].to_string());
            }
            out.push('\n');
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

/// Index batches of one epoch: a full shuffle cut into `batch_size` chunks,
/// the last one possibly shorter.
pub fn minibatch_indices(n: usize, batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    let perm = rng::permutation(rng, n);
    Ok(perm.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_sizes() {
        let b = minibatch_indices(10, 4, &mut rng::seeded(0)).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let b = minibatch_indices(10, 40, &mut rng::seeded(0)).unwrap();
        assert_eq!(b.len(), 1);
        let mut all = b[0].clone();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(minibatch_indices(3, 0, &mut rng::seeded(0)).is_err());
    }

    #[test]
    fn dataset_validation() {
        assert!(LabeledDataset::new("x", Tensor::zeros([2, 2]), Some(vec![0]), 1).is_err());
        assert!(LabeledDataset::new("x", Tensor::zeros([2, 2]), Some(vec![0, 2]), 2).is_err());
        assert!(LabeledDataset::new("x", Tensor::zeros([2, 2]), None, 0).is_ok());
    }

    #[test]
    fn csv_layout() {
        let d = LabeledDataset::new("t", Tensor::from_rows(&[vec![1.0, 2.5], vec![-3.0, 0.0]]).unwrap(), Some(vec![1, 0]), 2)
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        d.write_csv(&p).unwrap();
        assert_eq!(std::fs::read_to_string(p).unwrap(), "x0,x1,label\n1,2.5,1\n-3,0,0\n");
    }
}
