use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{keyed, Stream};
use crate::tensor::{norm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    All,
    Train,
    Val,
}

/// `N × input_dim` feature rows with optional integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    input_dim: usize,
    values: Vec<f64>,
    labels: Option<Vec<u32>>,
    split: Split,
}

impl Dataset {
    pub fn new(input_dim: usize, values: Vec<f64>, labels: Option<Vec<u32>>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Dimension("input_dim must be positive".into()));
        }
        if !values.len().is_multiple_of(input_dim) {
            return Err(Error::Dimension(format!(
                "{} values do not form rows of width {input_dim}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite feature at flat index {i}")));
        }
        let n = values.len() / input_dim;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Labels(format!("{} labels for {n} rows", l.len())));
            }
        }
        Ok(Self {
            input_dim,
            values,
            labels,
            split: Split::All,
        })
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.input_dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// The selected rows as a `idx.len() × input_dim` tensor.
    pub fn rows(&self, idx: &[usize]) -> Tensor {
        let mut v = Vec::with_capacity(idx.len() * self.input_dim);
        for &i in idx {
            v.extend_from_slice(self.row(i));
        }
        Tensor::matrix(idx.len(), self.input_dim, v)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.len(), self.input_dim, self.values.clone())
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn require_labels(&self) -> Result<&[u32]> {
        self.labels()
            .ok_or_else(|| Error::Labels("dataset has no labels".into()))
    }

    /// `max(label) + 1`, or 0 without labels.
    pub fn num_classes(&self) -> usize {
        self.labels()
            .and_then(|l| l.iter().max())
            .map_or(0, |&m| m as usize + 1)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            input_dim: self.input_dim,
            values: self.rows(idx).into_values(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            split: self.split,
        }
    }
}

/// Gaussian blobs around random centers on the sphere of radius `class_sep`.
///
/// Row `i` belongs to class `i % classes`, so classes are balanced.
pub fn gen_blobs(n: usize, dim: usize, classes: usize, class_sep: f64, noise: f64, seed: u64) -> Result<Dataset> {
    if classes == 0 || classes > n || dim < 2 {
        return Err(Error::InvalidParameter(format!(
            "gen_blobs needs 1 <= classes <= n and dim >= 2 (n={n}, dim={dim}, classes={classes})"
        )));
    }
    if !(noise >= 0.0 && noise.is_finite() && class_sep.is_finite()) {
        return Err(Error::InvalidParameter(format!("noise {noise}, class_sep {class_sep}")));
    }
    let mut rng = keyed(seed, Stream::Blobs, 0, 0);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| loop {
            let c: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = norm(&c);
            if n > 1e-9 {
                break c.iter().map(|v| v / n * class_sep).collect();
            }
        })
        .collect();
    let mut values = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    let eps = Normal::new(0.0, noise).expect("validated noise");
    for i in 0..n {
        let c = i % classes;
        let mut rng = keyed(seed, Stream::Blobs, 1, i as u64);
        values.extend(
            centers[c]
                .iter()
                .map(|&m| m + if noise > 0.0 { eps.sample(&mut rng) } else { 0.0 }),
        );
        labels.push(c as u32);
    }
    Dataset::new(dim, values, Some(labels))
}

/// Stratified split: `round(val_fraction · n_c)` rows of each class go to
/// validation. Both halves keep ascending index order.
pub fn split_stratified(data: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..=1.0).contains(&val_fraction) {
        return Err(Error::InvalidParameter(format!("val_fraction {val_fraction}")));
    }
    let labels = data.require_labels()?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes()];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let mut val = Vec::new();
    for (c, members) in by_class.iter_mut().enumerate() {
        let mut rng = keyed(seed, Stream::Split, c as u64, 0);
        members.shuffle(&mut rng);
        let take = (val_fraction * members.len() as f64).round() as usize;
        val.extend_from_slice(&members[..take]);
    }
    val.sort_unstable();
    let mut in_val = vec![false; data.len()];
    val.iter().for_each(|&i| in_val[i] = true);
    let train: Vec<usize> = (0..data.len()).filter(|&i| !in_val[i]).collect();
    Ok((
        data.subset(&train).with_split(Split::Train),
        data.subset(&val).with_split(Split::Val),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_classes_are_constant() {
        let d = gen_blobs(30, 4, 3, 2.0, 0.0, 1).unwrap();
        let labels = d.labels().unwrap();
        for i in 0..30 {
            for j in 0..30 {
                if labels[i] == labels[j] {
                    assert_eq!(d.row(i), d.row(j));
                }
            }
        }
    }

    #[test]
    fn single_class() {
        let d = gen_blobs(10, 3, 1, 1.0, 0.5, 2).unwrap();
        assert!(d.labels().unwrap().iter().all(|&l| l == 0));
        assert_eq!(d.num_classes(), 1);
    }

    #[test]
    fn balanced_and_deterministic() {
        let a = gen_blobs(100, 5, 4, 3.0, 1.0, 9).unwrap();
        assert_eq!(a, gen_blobs(100, 5, 4, 3.0, 1.0, 9).unwrap());
        assert_ne!(a, gen_blobs(100, 5, 4, 3.0, 1.0, 10).unwrap());
        let mut counts = [0; 4];
        a.labels().unwrap().iter().for_each(|&l| counts[l as usize] += 1);
        assert_eq!(counts, [25; 4]);
    }

    #[test]
    fn well_separated_blobs_are_nearest_neighbor_separable() {
        let d = gen_blobs(600, 8, 6, 10.0, 0.3, 4).unwrap();
        let labels = d.labels().unwrap();
        let mut correct = 0;
        for i in 0..d.len() {
            let mut best = (f64::INFINITY, 0);
            for j in (0..d.len()).filter(|&j| j != i) {
                let dist: f64 = d.row(i).iter().zip(d.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best.0 {
                    best = (dist, j);
                }
            }
            correct += usize::from(labels[best.1] == labels[i]);
        }
        assert!(correct as f64 / d.len() as f64 > 0.99);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(gen_blobs(3, 4, 5, 1.0, 0.1, 0).is_err());
        assert!(gen_blobs(10, 1, 2, 1.0, 0.1, 0).is_err());
        assert!(Dataset::new(2, vec![1.0, 2.0, 3.0], None).is_err());
        assert!(Dataset::new(2, vec![1.0, 2.0], Some(vec![0, 1])).is_err());
        assert!(Dataset::new(1, vec![f64::NAN], None).is_err());
    }

    #[test]
    fn stratified_split_partitions_rows() {
        let d = gen_blobs(100, 3, 4, 2.0, 0.5, 3).unwrap();
        let (tr, va) = split_stratified(&d, 0.2, 7).unwrap();
        assert_eq!((tr.len(), va.len()), (80, 20));
        let mut counts = [0; 4];
        va.labels().unwrap().iter().for_each(|&l| counts[l as usize] += 1);
        assert_eq!(counts, [5; 4]);
        assert_eq!(tr.split(), Split::Train);
    }
}
