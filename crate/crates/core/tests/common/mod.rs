//! Brute-force oracles shared by the oracle tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeMap;

use avgzsl_core::data::{ClassInfo, ClassManifest, FeatureRecord};
use avgzsl_core::eval::{
    average_precision, class_text_embeddings, gzsl_retrieval_eval, harmonic_mean, retrieve, ModalityCondition,
};
use avgzsl_core::losses::{total_loss, LossConfig, LossTerm, Tuple, TuplePair};
use avgzsl_core::model::{init_params, ArchitectureSpec, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Precision at each relevant position, by explicit counting.
pub fn brute_ap(rel: &[bool]) -> Option<f64> {
    let positions: Vec<usize> = (0..rel.len()).filter(|&k| rel[k]).collect();
    if positions.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for &k in &positions {
        let mut hits = 0;
        for &r in &rel[..=k] {
            if r {
                hits += 1;
            }
        }
        sum += hits as f64 / (k + 1) as f64;
    }
    Some(100.0 * sum / positions.len() as f64)
}

pub fn arch() -> ArchitectureSpec {
    ArchitectureSpec {
        dim_audio_in: 5,
        dim_video_in: 4,
        dim_text_in: 3,
        embed_dim: 3,
        decoder_out_dim: 3,
        hidden_audio: 6,
        hidden_video: 6,
        hidden_decoder: 4,
    }
}

pub fn manifest(rng: &mut ChaCha8Rng, n_seen: usize, n_unseen: usize) -> ClassManifest {
    ClassManifest::new(
        (0..n_seen + n_unseen)
            .map(|i| ClassInfo {
                id: i as u32,
                name: format!("c{i}"),
                seen: i < n_seen,
                text: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect(),
    )
    .unwrap()
}

pub fn gallery(rng: &mut ChaCha8Rng, n: usize, n_classes: u32) -> Vec<FeatureRecord> {
    (0..n)
        .map(|_| FeatureRecord {
            class_id: rng.random_range(0..n_classes),
            // Coarse grid values make exact distance ties likely.
            audio: (0..5).map(|_| rng.random_range(-2..=2) as f64 / 2.0).collect(),
            video: (0..4).map(|_| rng.random_range(-2..=2) as f64 / 2.0).collect(),
        })
        .collect()
}

pub fn sq(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / u.len() as f64
}

fn oracle_distance(p: &ModelParams, r: &FeatureRecord, t: &[f64], cond: ModalityCondition) -> f64 {
    let da = sq(&p.embed_audio(&r.audio).unwrap(), t);
    let dv = sq(&p.embed_video(&r.video).unwrap(), t);
    match cond {
        ModalityCondition::AudioOnly => da,
        ModalityCondition::VideoOnly => dv,
        ModalityCondition::Both => (da + dv) / 2.0,
    }
}

pub fn brute_rank(p: &ModelParams, m: &ClassManifest, g: &[FeatureRecord], c: u32, cond: ModalityCondition) -> Vec<usize> {
    let t = p.embed_text(m.text(c).unwrap()).unwrap();
    let d: Vec<f64> = g.iter().map(|r| oracle_distance(p, r, &t, cond)).collect();
    // Selection sort: repeatedly take the smallest remaining distance,
    // lowest index first.
    let mut left: Vec<usize> = (0..g.len()).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for k in 1..left.len() {
            if d[left[k]] < d[left[best]] {
                best = k;
            }
        }
        out.push(left.remove(best));
    }
    out
}

fn hinge(pos: f64, neg: f64, m: f64) -> f64 {
    (pos - neg + m).max(0.0)
}

/// Every term written out per pair through the single-vector forward path,
/// then averaged over the batch. Disabled terms are zero.
pub fn loop_loss(batch: &[TuplePair<'_>], p: &ModelParams, cfg: &LossConfig) -> [f64; 7] {
    let m = cfg.margin;
    let mut sums = [0.0; 7];
    for pair in batch {
        let a_p = p.embed_audio(pair.p.audio).unwrap();
        let a_q = p.embed_audio(pair.q.audio).unwrap();
        let v_p = p.embed_video(pair.p.video).unwrap();
        let v_q = p.embed_video(pair.q.video).unwrap();
        let t_p = p.embed_text(pair.p.text).unwrap();
        let t_q = p.embed_text(pair.q.text).unwrap();
        let dec = |e: &[f64]| p.decode(e).unwrap();
        let (r_t, r_a, r_v, r_aq, r_vq) = (dec(&t_p), dec(&a_p), dec(&v_p), dec(&a_q), dec(&v_q));
        let x = pair.p.text;
        let terms = [
            sq(&r_t, x) + sq(&r_a, x) + sq(&r_v, x),
            hinge(sq(&r_t, &r_a), sq(&r_t, &r_aq), m),
            hinge(sq(&r_t, &r_v), sq(&r_t, &r_vq), m),
            hinge(sq(&a_p, &t_p), sq(&a_q, &t_p), m),
            hinge(sq(&t_p, &a_p), sq(&t_q, &a_p), m),
            hinge(sq(&v_p, &t_p), sq(&v_q, &t_p), m),
            hinge(sq(&t_p, &v_p), sq(&t_q, &v_p), m),
        ];
        for (s, t) in sums.iter_mut().zip(terms) {
            *s += t;
        }
    }
    let mut out = [0.0; 7];
    for (k, term) in LossTerm::ALL.iter().enumerate() {
        if cfg.is_enabled(*term) {
            out[k] = sums[k] / batch.len() as f64;
        }
    }
    out
}

pub type Owned = (Vec<f64>, Vec<f64>, Vec<f64>, u32);

pub fn view(x: &Owned) -> Tuple<'_> {
    Tuple {
        audio: &x.0,
        video: &x.1,
        text: &x.2,
        class_id: x.3,
    }
}

fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn check_average_precision_exhaustive(max_len: usize) -> usize {
    let mut checked = 0;
    for len in 0..=max_len {
        for bits in 0u32..(1 << len) {
            let rel: Vec<bool> = (0..len).map(|i| bits & (1 << i) != 0).collect();
            match brute_ap(&rel) {
                None => assert!(average_precision(&rel).is_err(), "{rel:?} should have no AP"),
                Some(want) => {
                    let got = average_precision(&rel).unwrap();
                    assert!((got - want).abs() < 1e-9, "{rel:?}: {got} vs {want}");
                }
            }
            checked += 1;
        }
    }
    checked
}

pub fn check_retrieve_against_sort(n_galleries: u64, max_records: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for g_idx in 0..n_galleries {
        let m = manifest(&mut rng, 3, 2);
        let p = init_params(arch(), g_idx).unwrap();
        let n = rng.random_range(1..=max_records);
        let g = gallery(&mut rng, n, 5);
        let cond = ModalityCondition::ALL[g_idx as usize % 3];
        let c = rng.random_range(0..5);
        assert_eq!(
            retrieve(&p, &m, &g, c, cond).unwrap(),
            brute_rank(&p, &m, &g, c, cond),
            "gallery {g_idx}"
        );
    }
}

pub fn check_retrieval_report(rounds: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for round in 0..rounds {
        let m = manifest(&mut rng, 2, 1);
        let p = init_params(arch(), 100 + round).unwrap();
        let g = gallery(&mut rng, 12, 3);
        for cond in ModalityCondition::ALL {
            let report = gzsl_retrieval_eval(&p, &m, &g, cond).unwrap();
            let mut per_class = BTreeMap::new();
            for c in 0..3u32 {
                let order = brute_rank(&p, &m, &g, c, cond);
                let rel: Vec<bool> = order.iter().map(|&i| g[i].class_id == c).collect();
                if let Some(ap) = brute_ap(&rel) {
                    per_class.insert(c, ap);
                }
            }
            let mean = |seen: bool| {
                let v: Vec<f64> = per_class
                    .iter()
                    .filter(|(c, _)| m.is_seen(**c) == seen)
                    .map(|(_, v)| *v)
                    .collect();
                if v.is_empty() {
                    0.0
                } else {
                    v.iter().sum::<f64>() / v.len() as f64
                }
            };
            let (s, u) = (mean(true), mean(false));
            assert_eq!(report.per_class.len(), per_class.len());
            for (c, v) in &per_class {
                assert!((report.per_class[c] - v).abs() < 1e-9);
            }
            assert!((report.seen - s).abs() < 1e-9);
            assert!((report.unseen - u).abs() < 1e-9);
            assert!((report.hm - harmonic_mean(s, u)).abs() < 1e-9);
            if s > 0.0 && u > 0.0 {
                assert!(report.hm >= s.min(u) - 1e-9 && report.hm <= s.max(u) + 1e-9);
            }
        }
    }
}

/// Largest absolute gap between `total_loss` and the per-pair loop over
/// random batches, masks and margins.
pub fn total_loss_loop_gap(rounds: u64) -> f64 {
    let arch = arch();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for round in 0..rounds {
        let p = init_params(arch, round).unwrap();
        let n = rng.random_range(1..=16);
        let owned: Vec<[Owned; 2]> = (0..n)
            .map(|_| {
                let c: u32 = rng.random_range(0..4);
                [c, (c + rng.random_range(1..4)) % 4]
                    .map(|id| (normal(&mut rng, 5), normal(&mut rng, 4), normal(&mut rng, 3), id))
            })
            .collect();
        let batch: Vec<TuplePair<'_>> = owned
            .iter()
            .map(|[a, b]| TuplePair::new(view(a), view(b)).unwrap())
            .collect();
        let mut cfg = LossConfig {
            margin: rng.random_range(0.0..2.0),
            ..Default::default()
        };
        for term in LossTerm::ALL {
            cfg.set(term, rng.random_bool(0.7));
        }
        let want = loop_loss(&batch, &p, &cfg);
        let (total, report) = total_loss(&batch, &p, &cfg).unwrap();
        for (k, term) in LossTerm::ALL.iter().enumerate() {
            worst = worst.max((report.term(*term) - want[k]).abs());
        }
        worst = worst.max((total - want.iter().sum::<f64>()).abs());
    }
    worst
}

pub fn check_class_text_embeddings() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let m = manifest(&mut rng, 4, 3);
    let p = init_params(arch(), 3).unwrap();
    let e = class_text_embeddings(&p, &m).unwrap();
    assert_eq!(e.shape(), (7, 3));
    let w = &p.layers()[4].weight;
    let b = &p.layers()[4].bias;
    for (i, c) in m.classes().iter().enumerate() {
        for r in 0..3 {
            let mut acc = b[r];
            for k in 0..3 {
                acc += w.get(r, k) * c.text[k];
            }
            assert!((e.get(i, r) - acc).abs() < 1e-12);
        }
    }
}
