//! Identity- and modality-balanced mini-batch sampling.

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::dataset::{DatasetManifest, Modality};
use crate::error::{Error, Result};

/// Record indices for one optimization step.
///
/// `visible[i]` and `infrared[i]` both belong to `labels[i]`. With `K` images
/// per identity the `K` entries of one identity are contiguous.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiniBatch {
    pub visible: Vec<usize>,
    pub infrared: Vec<usize>,
    pub labels: Vec<usize>,
}

impl MiniBatch {
    /// Number of samples per modality.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Draws `identities` distinct train identities and `per_identity` images of
/// each modality for every one of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSampler {
    pub identities: usize,
    pub per_identity: usize,
}

impl BatchSampler {
    pub fn new(identities: usize, per_identity: usize) -> Result<Self> {
        if identities == 0 || per_identity == 0 {
            return Err(Error::Config("batch identities and K must be at least 1".into()));
        }
        Ok(Self {
            identities,
            per_identity,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, manifest: &DatasetManifest, rng: &mut R) -> Result<MiniBatch> {
        let available = manifest.num_identities();
        if self.identities > available {
            return Err(Error::Config(format!(
                "batch needs {} identities but the train split has {available}",
                self.identities
            )));
        }
        let mut ids = index::sample(rng, available, self.identities).into_vec();
        // Sorting keeps the batch layout independent of draw order.
        ids.sort_unstable();
        let k = self.per_identity;
        let mut batch = MiniBatch {
            visible: Vec::with_capacity(ids.len() * k),
            infrared: Vec::with_capacity(ids.len() * k),
            labels: Vec::with_capacity(ids.len() * k),
        };
        for &label in &ids {
            for (modality, out) in [
                (Modality::Visible, &mut batch.visible),
                (Modality::Infrared, &mut batch.infrared),
            ] {
                let pool = manifest.train_records_of(label, modality);
                if pool.len() >= k {
                    out.extend(pool.choose_multiple(rng, k).copied());
                } else {
                    out.extend((0..k).map(|_| pool[rng.gen_range(0..pool.len())]));
                }
            }
            batch.labels.extend(std::iter::repeat_n(label, k));
        }
        Ok(batch)
    }

    /// Total images in one batch (both modalities).
    pub fn images_per_batch(&self) -> usize {
        2 * self.identities * self.per_identity
    }

    /// Batches needed to cover the train split once in expectation.
    pub fn batches_per_epoch(&self, manifest: &DatasetManifest) -> usize {
        manifest.num_train_records().div_ceil(self.images_per_batch()).max(1)
    }
}

/// One-image-per-modality batch of `n` identities.
pub fn sample_batch<R: Rng + ?Sized>(manifest: &DatasetManifest, n: usize, rng: &mut R) -> Result<MiniBatch> {
    BatchSampler::new(n, 1)?.sample(manifest, rng)
}
