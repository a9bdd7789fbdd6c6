//! Finite-difference check of the taped total-loss gradient over every
//! parameter, for each single-term toggle and for all terms on.
//!
//! The reference loss is re-implemented here as a per-pair loop in
//! double-double arithmetic. In plain `f64` the central difference of a loss
//! of order one carries roundoff near `1e-16 / eps`, which at `eps = 1e-5`
//! swamps coordinates whose true gradient is around `1e-9`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::losses::{total_loss_and_grad, LossConfig, LossError, LossTerm, Tuple, TuplePair};
use crate::model::{init_params, ArchitectureSpec, ModelParams};
use crate::tensor::{distance_divisor, relative_error};
use twofloat::TwoFloat;

pub const GRAD_CHECK_EPS: f64 = 1e-5;
pub const GRAD_CHECK_TOL: f64 = 1e-4;

/// Label and loss config of every checked toggle configuration.
pub fn toggle_configs() -> Vec<(String, LossConfig)> {
    let mut out: Vec<(String, LossConfig)> = LossTerm::ALL
        .iter()
        .map(|&t| (format!("only-{}", t.name()), LossConfig::only(t)))
        .collect();
    out.push(("all".to_string(), LossConfig::default()));
    out
}

/// Small architecture that keeps the full finite-difference sweep cheap.
pub fn check_arch() -> ArchitectureSpec {
    ArchitectureSpec {
        dim_audio_in: 6,
        dim_video_in: 5,
        dim_text_in: 4,
        embed_dim: 3,
        decoder_out_dim: 4,
        hidden_audio: 5,
        hidden_video: 5,
        hidden_decoder: 5,
    }
}

#[derive(Debug, Clone)]
struct OwnedTuple {
    audio: Vec<f64>,
    video: Vec<f64>,
    text: Vec<f64>,
    class_id: u32,
}

impl OwnedTuple {
    fn view(&self) -> Tuple<'_> {
        Tuple {
            audio: &self.audio,
            video: &self.video,
            text: &self.text,
            class_id: self.class_id,
        }
    }
}

/// Owned feature vectors of one random batch.
#[derive(Debug, Clone)]
pub struct RandomBatch {
    rows: Vec<[OwnedTuple; 2]>,
}

impl RandomBatch {
    pub fn new<R: Rng + ?Sized>(arch: &ArchitectureSpec, pairs: usize, n_classes: u32, rng: &mut R) -> Self {
        let vec = |n: usize, rng: &mut R| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(rng)).collect() };
        let rows = (0..pairs)
            .map(|_| {
                let cp = rng.random_range(0..n_classes);
                let cq = (cp + rng.random_range(1..n_classes)) % n_classes;
                [cp, cq].map(|class_id| OwnedTuple {
                    audio: vec(arch.dim_audio_in, rng),
                    video: vec(arch.dim_video_in, rng),
                    text: vec(arch.dim_text_in, rng),
                    class_id,
                })
            })
            .collect();
        Self { rows }
    }

    pub fn pairs(&self) -> Vec<TuplePair<'_>> {
        self.rows
            .iter()
            .map(|[p, q]| TuplePair {
                p: p.view(),
                q: q.view(),
            })
            .collect()
    }
}

/// Initialized weights with random biases, so bias paths are exercised away
/// from zero.
pub fn random_params<R: Rng + ?Sized>(arch: ArchitectureSpec, rng: &mut R) -> ModelParams {
    let mut p = init_params(arch, rng.random()).expect("valid arch");
    for l in p.layers_mut() {
        for b in &mut l.bias {
            *b = 0.1 * Distribution::<f64>::sample(&StandardNormal, rng);
        }
    }
    p
}

type Dd = TwoFloat;

fn dd(v: &[f64]) -> Vec<Dd> {
    v.iter().map(|&x| Dd::from(x)).collect()
}

/// Views of the seven layers inside a flat parameter vector.
struct DdNet<'a> {
    layers: Vec<(&'a [Dd], &'a [Dd], usize)>,
}

impl<'a> DdNet<'a> {
    fn new(arch: &ArchitectureSpec, flat: &'a [Dd]) -> Self {
        let mut off = 0;
        let layers = arch
            .layer_shapes()
            .iter()
            .map(|&(in_dim, out_dim)| {
                let w = &flat[off..off + out_dim * in_dim];
                let b = &flat[off + out_dim * in_dim..off + out_dim * in_dim + out_dim];
                off += out_dim * in_dim + out_dim;
                (w, b, in_dim)
            })
            .collect();
        Self { layers }
    }

    fn affine(&self, i: usize, x: &[Dd]) -> Vec<Dd> {
        let (w, b, in_dim) = self.layers[i];
        b.iter()
            .enumerate()
            .map(|(r, &bias)| {
                let mut acc = bias;
                for (k, &xk) in x.iter().enumerate() {
                    acc += w[r * in_dim + k] * xk;
                }
                acc
            })
            .collect()
    }

    fn mlp(&self, first: usize, x: &[Dd]) -> Vec<Dd> {
        let h: Vec<Dd> = self
            .affine(first, x)
            .into_iter()
            .map(|v| if v > Dd::from(0.0) { v } else { Dd::from(0.0) })
            .collect();
        self.affine(first + 1, &h)
    }
}

fn dd_distance(u: &[Dd], v: &[Dd]) -> Dd {
    let mut acc = Dd::from(0.0);
    for (a, b) in u.iter().zip(v) {
        let d = *a - *b;
        acc += d * d;
    }
    acc / distance_divisor(u.len())
}

fn dd_hinge(pos: Dd, neg: Dd, margin: f64) -> Dd {
    (pos - neg + margin).max(Dd::from(0.0))
}

/// Batch-mean total loss from a flat parameter vector, pair by pair.
fn reference_total_loss(arch: &ArchitectureSpec, flat: &[Dd], batch: &[TuplePair<'_>], config: &LossConfig) -> Dd {
    let net = DdNet::new(arch, flat);
    let m = config.margin;
    let mut sums = [Dd::from(0.0); 7];
    for pair in batch {
        let a_p = net.mlp(0, &dd(pair.p.audio));
        let a_q = net.mlp(0, &dd(pair.q.audio));
        let v_p = net.mlp(2, &dd(pair.p.video));
        let v_q = net.mlp(2, &dd(pair.q.video));
        let t_p = net.affine(4, &dd(pair.p.text));
        let t_q = net.affine(4, &dd(pair.q.text));
        let x_t = dd(pair.p.text);
        let (r_t, r_a, r_v) = (net.mlp(5, &t_p), net.mlp(5, &a_p), net.mlp(5, &v_p));
        let (r_aq, r_vq) = (net.mlp(5, &a_q), net.mlp(5, &v_q));
        let terms = [
            dd_distance(&r_t, &x_t) + dd_distance(&r_a, &x_t) + dd_distance(&r_v, &x_t),
            dd_hinge(dd_distance(&r_t, &r_a), dd_distance(&r_t, &r_aq), m),
            dd_hinge(dd_distance(&r_t, &r_v), dd_distance(&r_t, &r_vq), m),
            dd_hinge(dd_distance(&a_p, &t_p), dd_distance(&a_q, &t_p), m),
            dd_hinge(dd_distance(&t_p, &a_p), dd_distance(&t_q, &a_p), m),
            dd_hinge(dd_distance(&v_p, &t_p), dd_distance(&v_q, &t_p), m),
            dd_hinge(dd_distance(&t_p, &v_p), dd_distance(&t_q, &v_p), m),
        ];
        for (s, t) in sums.iter_mut().zip(terms) {
            *s += t;
        }
    }
    let mut total = Dd::from(0.0);
    for (term, s) in LossTerm::ALL.iter().zip(sums) {
        if config.is_enabled(*term) {
            total += s / batch.len() as f64;
        }
    }
    total
}

/// Central differences of the double-double reference loss.
pub fn reference_gradient(batch: &[TuplePair<'_>], params: &ModelParams, config: &LossConfig, eps: f64) -> Vec<f64> {
    let mut flat = dd(&params.to_flat());
    (0..flat.len())
        .map(|i| {
            let orig = flat[i];
            flat[i] = orig + eps;
            let up = reference_total_loss(&params.arch, &flat, batch, config);
            flat[i] = orig - eps;
            let down = reference_total_loss(&params.arch, &flat, batch, config);
            flat[i] = orig;
            f64::from((up - down) / (2.0 * eps))
        })
        .collect()
}

/// Max relative error between the taped gradient and central differences
/// over all parameters.
pub fn max_relative_error(
    batch: &[TuplePair<'_>],
    params: &ModelParams,
    config: &LossConfig,
    eps: f64,
) -> Result<f64, LossError> {
    let (_, grads) = total_loss_and_grad(batch, params, config)?;
    let analytic = grads.to_flat();
    let numeric = reference_gradient(batch, params, config, eps);
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, b)| relative_error(*a, *b))
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    pub label: String,
    pub max_rel_err: f64,
}

/// Checks every toggle configuration on `n_batches` random batches of
/// `pairs` pairs each.
pub fn run_grad_check(seed: u64, n_batches: usize, pairs: usize) -> Result<Vec<GradCheckRow>, LossError> {
    let arch = check_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tasks: Vec<(ModelParams, RandomBatch)> = (0..n_batches)
        .map(|_| (random_params(arch, &mut rng), RandomBatch::new(&arch, pairs, 4, &mut rng)))
        .collect();
    toggle_configs()
        .into_iter()
        .map(|(label, cfg)| {
            let mut worst: f64 = 0.0;
            for (params, batch) in &tasks {
                worst = worst.max(max_relative_error(&batch.pairs(), params, &cfg, GRAD_CHECK_EPS)?);
            }
            Ok(GradCheckRow {
                label,
                max_rel_err: worst,
            })
        })
        .collect()
}
