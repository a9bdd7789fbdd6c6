//! Synthetic multi-modal data in which the label text feature linearly
//! determines both modalities.
//!
//! Each class gets a prototype on the unit sphere in the text space. Audio
//! and video features are `A p + n` and `B p + n` for fixed Gaussian maps
//! `A`, `B` shared by all classes and isotropic Gaussian noise `n`. Feature
//! values are rounded to `f32` so that a save/load cycle is lossless.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{ClassInfo, ClassManifest, DataError, Dataset, FeatureDims, FeatureRecord, Result, SplitSet};
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub n_seen: usize,
    pub n_unseen: usize,
    pub per_class: usize,
    pub dims: FeatureDims,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_seen: 8,
            n_unseen: 4,
            per_class: 50,
            dims: FeatureDims::default(),
            noise_sigma: 0.1,
            seed: 7,
        }
    }
}

/// The modality maps used by the generator.
#[derive(Debug, Clone)]
pub struct SyntheticMaps {
    /// `audio_dim x text_dim`.
    pub audio: DenseMatrix,
    /// `video_dim x text_dim`.
    pub video: DenseMatrix,
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_seen < 2 {
            problems.push(format!("n_seen must be >= 2, got {}", self.n_seen));
        }
        if self.n_unseen < 1 {
            problems.push(format!("n_unseen must be >= 1, got {}", self.n_unseen));
        }
        if self.per_class < 2 {
            problems.push(format!("per_class must be >= 2, got {}", self.per_class));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            problems.push(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        let d = self.dims;
        if d.audio == 0 || d.video == 0 || d.text == 0 {
            problems.push(format!("all dims must be >= 1, got {d:?}"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(DataError::InvalidArgs(problems.join("; ")))
        }
    }

    /// Train/val/test counts for one seen class.
    pub fn seen_split_counts(&self) -> (usize, usize, usize) {
        let n = self.per_class;
        let train = (7 * n / 10).max(1);
        let val = n / 10;
        (train, val, n - train - val)
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    DenseMatrix::from_vec(rows, cols, data).expect("finite gaussian draws")
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn apply(map: &DenseMatrix, p: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..map.rows())
        .map(|i| {
            let clean: f64 = map.row(i).iter().zip(p).map(|(a, b)| a * b).sum();
            let z: f64 = StandardNormal.sample(rng);
            (clean + sigma * z) as f32 as f64
        })
        .collect()
}

pub fn gen_synthetic_with_maps(cfg: &SyntheticConfig) -> Result<(Dataset, SyntheticMaps)> {
    cfg.validate()?;
    let FeatureDims { audio, video, text } = cfg.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let maps = SyntheticMaps {
        audio: gaussian_matrix(&mut rng, audio, text),
        video: gaussian_matrix(&mut rng, video, text),
    };
    let n_classes = cfg.n_seen + cfg.n_unseen;
    let classes: Vec<ClassInfo> = (0..n_classes)
        .map(|i| ClassInfo {
            id: i as u32,
            name: format!("class_{i:02}"),
            seen: i < cfg.n_seen,
            text: unit_vector(&mut rng, text),
        })
        .collect();

    let (n_train, n_val, _) = cfg.seen_split_counts();
    let mut splits = SplitSet::default();
    for c in &classes {
        for k in 0..cfg.per_class {
            let record = FeatureRecord {
                class_id: c.id,
                audio: apply(&maps.audio, &c.text, cfg.noise_sigma, &mut rng),
                video: apply(&maps.video, &c.text, cfg.noise_sigma, &mut rng),
            };
            let split = if !c.seen || k >= n_train + n_val {
                &mut splits.test
            } else if k < n_train {
                &mut splits.train
            } else {
                &mut splits.validation
            };
            split.push(record);
        }
    }
    let manifest = ClassManifest::new(classes)?;
    Ok((Dataset::new(manifest, splits, audio, video)?, maps))
}

pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    gen_synthetic_with_maps(cfg).map(|(d, _)| d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn small(seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            n_seen: 3,
            n_unseen: 2,
            per_class: 10,
            dims: FeatureDims {
                audio: 12,
                video: 9,
                text: 5,
            },
            noise_sigma: 0.1,
            seed,
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = gen_synthetic(&small(3)).unwrap();
        let b = gen_synthetic(&small(3)).unwrap();
        let c = gen_synthetic(&small(4)).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn splits_follow_ratios_and_keep_unseen_out_of_train() {
        let d = gen_synthetic(&small(1)).unwrap();
        assert_eq!(d.splits.train.len(), 3 * 7);
        assert_eq!(d.splits.validation.len(), 3);
        assert_eq!(d.splits.test.len(), 3 * 2 + 2 * 10);
        assert!(d.splits.train.iter().all(|r| d.manifest.is_seen(r.class_id)));
        assert!(d.splits.validation.iter().all(|r| d.manifest.is_seen(r.class_id)));
        for c in d.manifest.classes() {
            let norm: f64 = c.text.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_noise_gives_identical_records_per_class() {
        let cfg = SyntheticConfig {
            noise_sigma: 0.0,
            ..small(2)
        };
        let d = gen_synthetic(&cfg).unwrap();
        let all: Vec<&FeatureRecord> = d.splits.iter().flat_map(|(_, r)| r.iter()).collect();
        for c in 0..5u32 {
            let members: Vec<_> = all.iter().filter(|r| r.class_id == c).collect();
            assert_eq!(members.len(), 10);
            for m in &members {
                assert_eq!(m.audio, members[0].audio);
                assert_eq!(m.video, members[0].video);
            }
        }
    }

    #[test]
    fn features_are_f32_representable() {
        let d = gen_synthetic(&small(5)).unwrap();
        for r in &d.splits.train {
            assert!(r.audio.iter().chain(&r.video).all(|&v| v as f32 as f64 == v));
        }
    }

    #[test]
    fn pseudo_inverse_recovers_prototypes() {
        let cfg = SyntheticConfig {
            n_seen: 4,
            n_unseen: 2,
            per_class: 50,
            dims: FeatureDims {
                audio: 64,
                video: 48,
                text: 16,
            },
            noise_sigma: 0.01,
            seed: 11,
        };
        let (d, maps) = gen_synthetic_with_maps(&cfg).unwrap();
        let a = DMatrix::from_row_slice(maps.audio.rows(), maps.audio.cols(), maps.audio.data());
        let pinv = a.clone().pseudo_inverse(1e-12).unwrap();
        let all: Vec<&FeatureRecord> = d.splits.iter().flat_map(|(_, r)| r.iter()).collect();
        for c in d.manifest.classes() {
            let members: Vec<_> = all.iter().filter(|r| r.class_id == c.id).collect();
            let mut mean = vec![0.0; 64];
            for m in &members {
                for (acc, v) in mean.iter_mut().zip(&m.audio) {
                    *acc += v / members.len() as f64;
                }
            }
            let rec = &pinv * nalgebra::DVector::from_vec(mean);
            let proto = nalgebra::DVector::from_vec(c.text.clone());
            let cos = rec.dot(&proto) / (rec.norm() * proto.norm());
            assert!(cos > 0.99, "class {}: cosine {cos}", c.id);
        }
    }

    #[test]
    fn invalid_counts_are_rejected() {
        for cfg in [
            SyntheticConfig { n_seen: 1, ..small(0) },
            SyntheticConfig { n_unseen: 0, ..small(0) },
            SyntheticConfig { per_class: 1, ..small(0) },
            SyntheticConfig { noise_sigma: -0.5, ..small(0) },
        ] {
            assert!(matches!(gen_synthetic(&cfg), Err(DataError::InvalidArgs(_))));
        }
    }
}
