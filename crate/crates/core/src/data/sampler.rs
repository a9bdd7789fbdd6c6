use rand::Rng;

use super::{ClassManifest, DataError, FeatureRecord, Result};
use crate::losses::{Tuple, TuplePair};

/// Draws pairs of records from different classes.
///
/// `p` is uniform over all records; `q` is uniform over the records of every
/// class other than `p`'s.
#[derive(Debug, Clone)]
pub struct PairSampler<'d> {
    records: &'d [FeatureRecord],
    manifest: &'d ClassManifest,
    by_class: Vec<Vec<usize>>,
}

impl<'d> PairSampler<'d> {
    pub fn new(records: &'d [FeatureRecord], manifest: &'d ClassManifest) -> Result<Self> {
        let mut by_class = vec![Vec::new(); manifest.len()];
        for (i, r) in records.iter().enumerate() {
            let slot = by_class
                .get_mut(r.class_id as usize)
                .ok_or(DataError::UnknownClass {
                    split: "sample",
                    record: i,
                    class_id: r.class_id,
                    n_classes: manifest.len(),
                })?;
            slot.push(i);
        }
        let distinct = by_class.iter().filter(|v| !v.is_empty()).count();
        if distinct < 2 {
            return Err(DataError::TooFewClasses { found: distinct });
        }
        Ok(Self {
            records,
            manifest,
            by_class,
        })
    }

    /// Record indices `(p, q)` of one pair.
    pub fn sample_indices<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let p = rng.random_range(0..self.records.len());
        let cp = self.records[p].class_id as usize;
        let mut k = rng.random_range(0..self.records.len() - self.by_class[cp].len());
        for (c, members) in self.by_class.iter().enumerate() {
            if c == cp {
                continue;
            }
            if k < members.len() {
                return (p, members[k]);
            }
            k -= members.len();
        }
        unreachable!("k is below the number of records outside class {cp}")
    }

    fn tuple(&self, i: usize) -> Tuple<'d> {
        let r = &self.records[i];
        Tuple {
            audio: &r.audio,
            video: &r.video,
            text: self.manifest.text(r.class_id).expect("class validated in new"),
            class_id: r.class_id,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<TuplePair<'d>>> {
        if batch_size == 0 {
            return Err(DataError::EmptyBatch);
        }
        Ok((0..batch_size)
            .map(|_| {
                let (p, q) = self.sample_indices(rng);
                TuplePair {
                    p: self.tuple(p),
                    q: self.tuple(q),
                }
            })
            .collect())
    }
}

pub fn sample_pairs<'d, R: Rng + ?Sized>(
    records: &'d [FeatureRecord],
    manifest: &'d ClassManifest,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<TuplePair<'d>>> {
    PairSampler::new(records, manifest)?.sample(batch_size, rng)
}
