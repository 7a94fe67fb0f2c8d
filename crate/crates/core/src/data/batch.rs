use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::augment::{augment, AugmentPolicy};
use super::Dataset;

#[derive(Clone, Debug)]
pub struct Batch {
    /// `[n, C, H, W]`.
    pub x: Tensor,
    pub labels: Vec<usize>,
    /// Record indices in the source dataset.
    pub indices: Vec<usize>,
}

/// Ordered batch stream over one pass of a dataset.
pub struct Minibatches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    normalize: bool,
    policy: AugmentPolicy,
    rng: ChaCha8Rng,
}

/// One seeded, shuffled pass. The final partial batch is kept.
pub fn minibatches<'a>(
    ds: &'a Dataset,
    batch_size: usize,
    seed: u64,
    normalize: bool,
    policy: &AugmentPolicy,
) -> Result<Minibatches<'a>> {
    let mut it = Minibatches::sequential(ds, batch_size, normalize)?;
    it.rng = ChaCha8Rng::seed_from_u64(seed);
    it.order.shuffle(&mut it.rng);
    it.policy = *policy;
    Ok(it)
}

impl<'a> Minibatches<'a> {
    /// Unshuffled, unaugmented pass in record order.
    pub fn sequential(ds: &'a Dataset, batch_size: usize, normalize: bool) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Param("batch size must be at least 1".into()));
        }
        if ds.is_empty() {
            return Err(Error::Param("dataset is empty".into()));
        }
        Ok(Self {
            ds,
            order: (0..ds.len()).collect(),
            pos: 0,
            batch_size,
            normalize,
            policy: AugmentPolicy::disabled(),
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for Minibatches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;

        let dims = self.ds.dims();
        let [c, h, w] = dims;
        let plane = h * w;
        let hdr = self.ds.header();
        let mut data = Vec::with_capacity(indices.len() * c * plane);
        for &i in &indices {
            let img = augment(self.ds.image(i), dims, &self.policy, &mut self.rng);
            for ch in 0..c {
                let (m, s) = (hdr.mean[ch], hdr.std[ch]);
                data.extend(img[ch * plane..(ch + 1) * plane].iter().map(|&p| {
                    let v = p as f32 / 255.0;
                    if self.normalize {
                        (v - m) / s
                    } else {
                        v
                    }
                }));
            }
        }
        let labels = indices.iter().map(|&i| self.ds.label(i)).collect();
        Some(Batch {
            x: Tensor::new(&[indices.len(), c, h, w], data).expect("batch dims"),
            labels,
            indices,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(n: usize) -> Dataset {
        let pixels = (0..n * 3 * 4 * 4).map(|i| (i * 13 % 256) as u8).collect();
        Dataset::new([3, 4, 4], 2, (0..n).map(|i| (i % 2) as u16).collect(), pixels).unwrap()
    }

    #[test]
    fn partial_batch_kept() {
        let d = ds(10);
        let sizes: Vec<usize> = minibatches(&d, 4, 1, true, &AugmentPolicy::disabled())
            .unwrap()
            .map(|b| b.labels.len())
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn seeded_order_and_full_coverage() {
        let d = ds(37);
        let order = |seed| -> Vec<usize> {
            minibatches(&d, 5, seed, false, &AugmentPolicy::disabled())
                .unwrap()
                .flat_map(|b| b.indices)
                .collect()
        };
        assert_eq!(order(3), order(3));
        assert_ne!(order(3), order(4));
        let mut all = order(3);
        all.sort();
        assert_eq!(all, (0..37).collect::<Vec<_>>());
    }

    #[test]
    fn empty_dataset_and_zero_batch_rejected() {
        let d = Dataset::with_stats([3, 4, 4], 2, vec![], vec![], vec![0.5; 3], vec![0.25; 3]).unwrap();
        assert!(minibatches(&d, 4, 0, true, &AugmentPolicy::disabled()).is_err());
        assert!(Minibatches::sequential(&ds(3), 0, true).is_err());
    }
}
