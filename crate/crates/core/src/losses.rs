//! Cross-modal decoder loss, composite triplet loss and their sum.
//!
//! Every term is defined on a pair of tuples `(p, q)` from different classes.
//! Batch losses average each term over the pairs of the batch; the group sums
//! `l_cmd`, `l_ct` and `total` are formed from those averages.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::model::{ModelError, ModelParams, ModelTape};
use crate::tensor::{self, DenseMatrix, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("distance between vectors of length {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("loss over an empty batch")]
    EmptyBatch,
    #[error("pair {index} has both tuples in class {class_id}")]
    SameClass { index: usize, class_id: u32 },
    #[error("margin must be finite and >= 0, got {0}")]
    BadMargin(f64),
    #[error("{term} became non-finite")]
    NonFinite { term: &'static str },
}

impl From<tensor::TensorError> for LossError {
    fn from(e: tensor::TensorError) -> Self {
        LossError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, LossError>;

/// One multi-modal training tuple, borrowed from the dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tuple<'a> {
    pub audio: &'a [f64],
    pub video: &'a [f64],
    pub text: &'a [f64],
    pub class_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TuplePair<'a> {
    pub p: Tuple<'a>,
    pub q: Tuple<'a>,
}

impl<'a> TuplePair<'a> {
    pub fn new(p: Tuple<'a>, q: Tuple<'a>) -> Result<Self> {
        if p.class_id == q.class_id {
            return Err(LossError::SameClass {
                index: 0,
                class_id: p.class_id,
            });
        }
        Ok(Self { p, q })
    }

    /// The pair with the roles of `p` and `q` exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            p: self.q,
            q: self.p,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossTerm {
    Rec,
    Cta,
    Ctv,
    Ta,
    At,
    Tv,
    Vt,
}

impl LossTerm {
    pub const ALL: [LossTerm; 7] = [
        LossTerm::Rec,
        LossTerm::Cta,
        LossTerm::Ctv,
        LossTerm::Ta,
        LossTerm::At,
        LossTerm::Tv,
        LossTerm::Vt,
    ];

    /// Field name in [`LossReport::fields`].
    pub fn report_name(self) -> &'static str {
        match self {
            LossTerm::Rec => "l_rec",
            LossTerm::Cta => "l_cta",
            LossTerm::Ctv => "l_ctv",
            LossTerm::Ta => "l_ta",
            LossTerm::At => "l_at",
            LossTerm::Tv => "l_tv",
            LossTerm::Vt => "l_vt",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Rec => "rec",
            LossTerm::Cta => "cta",
            LossTerm::Ctv => "ctv",
            LossTerm::Ta => "ta",
            LossTerm::At => "at",
            LossTerm::Tv => "tv",
            LossTerm::Vt => "vt",
        }
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossTerm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        LossTerm::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown loss term {s:?} (expected rec|cta|ctv|ta|at|tv|vt)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub margin: f64,
    pub use_rec: bool,
    pub use_cta: bool,
    pub use_ctv: bool,
    pub use_ta: bool,
    pub use_at: bool,
    pub use_tv: bool,
    pub use_vt: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            use_rec: true,
            use_cta: true,
            use_ctv: true,
            use_ta: true,
            use_at: true,
            use_tv: true,
            use_vt: true,
        }
    }
}

impl LossConfig {
    pub fn all_off() -> Self {
        let mut c = Self::default();
        for t in LossTerm::ALL {
            c.set(t, false);
        }
        c
    }

    pub fn only(term: LossTerm) -> Self {
        let mut c = Self::all_off();
        c.set(term, true);
        c
    }

    pub fn without(mut self, term: LossTerm) -> Self {
        self.set(term, false);
        self
    }

    pub fn is_enabled(&self, term: LossTerm) -> bool {
        match term {
            LossTerm::Rec => self.use_rec,
            LossTerm::Cta => self.use_cta,
            LossTerm::Ctv => self.use_ctv,
            LossTerm::Ta => self.use_ta,
            LossTerm::At => self.use_at,
            LossTerm::Tv => self.use_tv,
            LossTerm::Vt => self.use_vt,
        }
    }

    pub fn set(&mut self, term: LossTerm, on: bool) {
        let slot = match term {
            LossTerm::Rec => &mut self.use_rec,
            LossTerm::Cta => &mut self.use_cta,
            LossTerm::Ctv => &mut self.use_ctv,
            LossTerm::Ta => &mut self.use_ta,
            LossTerm::At => &mut self.use_at,
            LossTerm::Tv => &mut self.use_tv,
            LossTerm::Vt => &mut self.use_vt,
        };
        *slot = on;
    }

    pub fn any_enabled(&self) -> bool {
        LossTerm::ALL.iter().any(|t| self.is_enabled(*t))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(LossError::BadMargin(self.margin));
        }
        Ok(())
    }
}

/// Batch-mean value of every loss term. Disabled terms are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub l_rec: f64,
    pub l_cta: f64,
    pub l_ctv: f64,
    pub l_cmd: f64,
    pub l_ta: f64,
    pub l_at: f64,
    pub l_tv: f64,
    pub l_vt: f64,
    pub l_ct: f64,
    pub total: f64,
}

impl LossReport {
    /// Fills the group sums from the individual terms.
    pub fn from_terms(rec: f64, cta: f64, ctv: f64, ta: f64, at: f64, tv: f64, vt: f64) -> Self {
        let l_cmd = rec + cta + ctv;
        let l_ct = tv + vt + ta + at;
        Self {
            l_rec: rec,
            l_cta: cta,
            l_ctv: ctv,
            l_cmd,
            l_ta: ta,
            l_at: at,
            l_tv: tv,
            l_vt: vt,
            l_ct,
            total: l_cmd + l_ct,
        }
    }

    pub fn term(&self, t: LossTerm) -> f64 {
        match t {
            LossTerm::Rec => self.l_rec,
            LossTerm::Cta => self.l_cta,
            LossTerm::Ctv => self.l_ctv,
            LossTerm::Ta => self.l_ta,
            LossTerm::At => self.l_at,
            LossTerm::Tv => self.l_tv,
            LossTerm::Vt => self.l_vt,
        }
    }

    /// Name/value pairs in log order.
    pub fn fields(&self) -> [(&'static str, f64); 10] {
        [
            ("l_rec", self.l_rec),
            ("l_cta", self.l_cta),
            ("l_ctv", self.l_ctv),
            ("l_cmd", self.l_cmd),
            ("l_ta", self.l_ta),
            ("l_at", self.l_at),
            ("l_tv", self.l_tv),
            ("l_vt", self.l_vt),
            ("l_ct", self.l_ct),
            ("total", self.total),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.fields().iter().all(|(_, v)| v.is_finite())
    }
}

/// Squared-error distance, reduced over coordinates by
/// [`tensor::DISTANCE_REDUCTION`].
pub fn mse_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(LossError::LengthMismatch(u.len(), v.len()));
    }
    let sum: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / tensor::distance_divisor(u.len()))
}

/// `max(0, d_pos - d_neg + margin)`.
pub fn triplet_hinge(d_pos: f64, d_neg: f64, margin: f64) -> f64 {
    (d_pos - d_neg + margin).max(0.0)
}

/// Untaped embeddings and reconstructions of one pair.
struct PairForward {
    a_p: Vec<f64>,
    a_q: Vec<f64>,
    v_p: Vec<f64>,
    v_q: Vec<f64>,
    t_p: Vec<f64>,
    t_q: Vec<f64>,
}

impl PairForward {
    fn new(pair: &TuplePair<'_>, params: &ModelParams) -> Result<Self> {
        Ok(Self {
            a_p: params.embed_audio(pair.p.audio)?,
            a_q: params.embed_audio(pair.q.audio)?,
            v_p: params.embed_video(pair.p.video)?,
            v_q: params.embed_video(pair.q.video)?,
            t_p: params.embed_text(pair.p.text)?,
            t_q: params.embed_text(pair.q.text)?,
        })
    }
}

pub fn loss_rec(pair: &TuplePair<'_>, params: &ModelParams) -> Result<f64> {
    let f = PairForward::new(pair, params)?;
    let target = pair.p.text;
    Ok(mse_distance(&params.decode(&f.t_p)?, target)?
        + mse_distance(&params.decode(&f.a_p)?, target)?
        + mse_distance(&params.decode(&f.v_p)?, target)?)
}

/// Reconstruction triplet with the text-decoded anchor; `x^t_p` does not
/// enter the expression.
pub fn loss_cta(pair: &TuplePair<'_>, params: &ModelParams, margin: f64) -> Result<f64> {
    let f = PairForward::new(pair, params)?;
    let anchor = params.decode(&f.t_p)?;
    Ok(triplet_hinge(
        mse_distance(&anchor, &params.decode(&f.a_p)?)?,
        mse_distance(&anchor, &params.decode(&f.a_q)?)?,
        margin,
    ))
}

pub fn loss_ctv(pair: &TuplePair<'_>, params: &ModelParams, margin: f64) -> Result<f64> {
    let f = PairForward::new(pair, params)?;
    let anchor = params.decode(&f.t_p)?;
    Ok(triplet_hinge(
        mse_distance(&anchor, &params.decode(&f.v_p)?)?,
        mse_distance(&anchor, &params.decode(&f.v_q)?)?,
        margin,
    ))
}

pub fn loss_ta(pair: &TuplePair<'_>, params: &ModelParams, margin: f64) -> Result<f64> {
    let f = PairForward::new(pair, params)?;
    Ok(triplet_hinge(
        mse_distance(&f.a_p, &f.t_p)?,
        mse_distance(&f.a_q, &f.t_p)?,
        margin,
    ))
}

pub fn loss_at(pair: &TuplePair<'_>, params: &ModelParams, margin: f64) -> Result<f64> {
    let f = PairForward::new(pair, params)?;
    Ok(triplet_hinge(
        mse_distance(&f.t_p, &f.a_p)?,
        mse_distance(&f.t_q, &f.a_p)?,
        margin,
    ))
}

pub fn loss_tv(pair: &TuplePair<'_>, params: &ModelParams, margin: f64) -> Result<f64> {
    let f = PairForward::new(pair, params)?;
    Ok(triplet_hinge(
        mse_distance(&f.v_p, &f.t_p)?,
        mse_distance(&f.v_q, &f.t_p)?,
        margin,
    ))
}

pub fn loss_vt(pair: &TuplePair<'_>, params: &ModelParams, margin: f64) -> Result<f64> {
    let f = PairForward::new(pair, params)?;
    Ok(triplet_hinge(
        mse_distance(&f.t_p, &f.v_p)?,
        mse_distance(&f.t_q, &f.v_p)?,
        margin,
    ))
}

fn term_value(term: LossTerm, pair: &TuplePair<'_>, params: &ModelParams, margin: f64) -> Result<f64> {
    match term {
        LossTerm::Rec => loss_rec(pair, params),
        LossTerm::Cta => loss_cta(pair, params, margin),
        LossTerm::Ctv => loss_ctv(pair, params, margin),
        LossTerm::Ta => loss_ta(pair, params, margin),
        LossTerm::At => loss_at(pair, params, margin),
        LossTerm::Tv => loss_tv(pair, params, margin),
        LossTerm::Vt => loss_vt(pair, params, margin),
    }
}

fn enabled_sum(terms: &[LossTerm], pair: &TuplePair<'_>, params: &ModelParams, config: &LossConfig) -> Result<f64> {
    let mut acc = 0.0;
    for &t in terms {
        if config.is_enabled(t) {
            acc += term_value(t, pair, params, config.margin)?;
        }
    }
    Ok(acc)
}

/// Sum of the enabled reconstruction-side terms for one pair.
pub fn loss_cmd(pair: &TuplePair<'_>, params: &ModelParams, config: &LossConfig) -> Result<f64> {
    enabled_sum(&[LossTerm::Rec, LossTerm::Cta, LossTerm::Ctv], pair, params, config)
}

/// Sum of the enabled composite triplet terms for one pair.
pub fn loss_ct(pair: &TuplePair<'_>, params: &ModelParams, config: &LossConfig) -> Result<f64> {
    enabled_sum(
        &[LossTerm::Tv, LossTerm::Vt, LossTerm::Ta, LossTerm::At],
        pair,
        params,
        config,
    )
}

fn validate_batch(batch: &[TuplePair<'_>]) -> Result<()> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    for (index, pair) in batch.iter().enumerate() {
        if pair.p.class_id == pair.q.class_id {
            return Err(LossError::SameClass {
                index,
                class_id: pair.p.class_id,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Side {
    P,
    Q,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Slot {
    AudioIn(Side),
    VideoIn(Side),
    TextIn(Side),
    Audio(Side),
    Video(Side),
    Text(Side),
    DecAudio(Side),
    DecVideo(Side),
    DecText(Side),
}

/// Records batch embeddings on demand so that disabled terms never touch the
/// networks they would otherwise use.
struct BatchGraph<'m, 'p, 'b, 'a> {
    mt: &'m mut ModelTape<'p>,
    batch: &'b [TuplePair<'a>],
    cache: HashMap<Slot, Var>,
}

impl<'a> BatchGraph<'_, '_, '_, 'a> {
    fn stack(&self, side: Side, pick: impl Fn(&Tuple<'a>) -> &'a [f64]) -> Result<DenseMatrix> {
        let rows: Vec<&[f64]> = self
            .batch
            .iter()
            .map(|pair| match side {
                Side::P => pick(&pair.p),
                Side::Q => pick(&pair.q),
            })
            .collect();
        Ok(DenseMatrix::from_rows(&rows)?)
    }

    fn get(&mut self, slot: Slot) -> Result<Var> {
        if let Some(v) = self.cache.get(&slot) {
            return Ok(*v);
        }
        let var = match slot {
            Slot::AudioIn(s) => {
                let m = self.stack(s, |t| t.audio)?;
                self.mt.input(m)
            }
            Slot::VideoIn(s) => {
                let m = self.stack(s, |t| t.video)?;
                self.mt.input(m)
            }
            Slot::TextIn(s) => {
                let m = self.stack(s, |t| t.text)?;
                self.mt.input(m)
            }
            Slot::Audio(s) => {
                let x = self.get(Slot::AudioIn(s))?;
                self.mt.embed_audio(x)?
            }
            Slot::Video(s) => {
                let x = self.get(Slot::VideoIn(s))?;
                self.mt.embed_video(x)?
            }
            Slot::Text(s) => {
                let x = self.get(Slot::TextIn(s))?;
                self.mt.embed_text(x)?
            }
            Slot::DecAudio(s) => {
                let e = self.get(Slot::Audio(s))?;
                self.mt.decode(e)?
            }
            Slot::DecVideo(s) => {
                let e = self.get(Slot::Video(s))?;
                self.mt.decode(e)?
            }
            Slot::DecText(s) => {
                let e = self.get(Slot::Text(s))?;
                self.mt.decode(e)?
            }
        };
        self.cache.insert(slot, var);
        Ok(var)
    }

    fn dist(&mut self, a: Slot, b: Slot) -> Result<Var> {
        let (a, b) = (self.get(a)?, self.get(b)?);
        Ok(self.mt.tape.row_distance(a, b)?)
    }

    fn triplet(&mut self, anchor: Slot, pos: Slot, neg_anchor: Slot, neg: Slot, margin: f64) -> Result<Var> {
        let dp = self.dist(anchor, pos)?;
        let dn = self.dist(neg_anchor, neg)?;
        let h = self.mt.tape.hinge(dp, dn, margin)?;
        Ok(self.mt.tape.mean(h)?)
    }

    fn term(&mut self, term: LossTerm, margin: f64) -> Result<Var> {
        use Side::{P, Q};
        use Slot::*;
        match term {
            LossTerm::Rec => {
                let r1 = self.dist(DecText(P), TextIn(P))?;
                let r2 = self.dist(DecAudio(P), TextIn(P))?;
                let r3 = self.dist(DecVideo(P), TextIn(P))?;
                let s = self.mt.tape.add(r1, r2)?;
                let s = self.mt.tape.add(s, r3)?;
                Ok(self.mt.tape.mean(s)?)
            }
            LossTerm::Cta => self.triplet(DecText(P), DecAudio(P), DecText(P), DecAudio(Q), margin),
            LossTerm::Ctv => self.triplet(DecText(P), DecVideo(P), DecText(P), DecVideo(Q), margin),
            LossTerm::Ta => self.triplet(Audio(P), Text(P), Audio(Q), Text(P), margin),
            LossTerm::At => self.triplet(Text(P), Audio(P), Text(Q), Audio(P), margin),
            LossTerm::Tv => self.triplet(Video(P), Text(P), Video(Q), Text(P), margin),
            LossTerm::Vt => self.triplet(Text(P), Video(P), Text(Q), Video(P), margin),
        }
    }
}

/// Records the batch total loss on `mt` and returns its scalar node.
///
/// If no term is enabled the result is a constant zero leaf.
pub fn record_total_loss(
    mt: &mut ModelTape<'_>,
    batch: &[TuplePair<'_>],
    config: &LossConfig,
) -> Result<(Var, LossReport)> {
    config.validate()?;
    validate_batch(batch)?;
    let mut g = BatchGraph {
        mt,
        batch,
        cache: HashMap::new(),
    };
    let mut values = [0.0; 7];
    let mut vars: [Option<Var>; 7] = [None; 7];
    for (i, term) in LossTerm::ALL.into_iter().enumerate() {
        if config.is_enabled(term) {
            let v = g.term(term, config.margin).map_err(|e| match e {
                LossError::Model(ModelError::Tensor(tensor::TensorError::NonFinite { .. })) => {
                    LossError::NonFinite { term: term.report_name() }
                }
                other => other,
            })?;
            values[i] = g.mt.tape.scalar(v).expect("mean is scalar");
            vars[i] = Some(v);
        }
    }
    let [rec, cta, ctv, ta, at, tv, vt] = values;
    let report = LossReport::from_terms(rec, cta, ctv, ta, at, tv, vt);

    // Same association order as `LossReport::from_terms`.
    let tape = &mut g.mt.tape;
    let mut sum = |order: &[usize]| -> Result<Option<Var>> {
        let mut acc: Option<Var> = None;
        for &i in order {
            if let Some(v) = vars[i] {
                acc = Some(match acc {
                    Some(a) => tape.add(a, v)?,
                    None => v,
                });
            }
        }
        Ok(acc)
    };
    let cmd = sum(&[0, 1, 2])?;
    let ct = sum(&[5, 6, 3, 4])?;
    let total = match (cmd, ct) {
        (Some(a), Some(b)) => tape.add(a, b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => tape.input(DenseMatrix::scalar(0.0)?),
    };
    debug_assert_eq!(tape.scalar(total), Some(report.total));
    Ok((total, report))
}

/// Batch-mean total loss and its report.
pub fn total_loss(batch: &[TuplePair<'_>], params: &ModelParams, config: &LossConfig) -> Result<(f64, LossReport)> {
    let mut mt = ModelTape::new(params);
    let (_, report) = record_total_loss(&mut mt, batch, config)?;
    Ok((report.total, report))
}

/// Batch-mean total loss together with its gradient for every parameter.
pub fn total_loss_and_grad(
    batch: &[TuplePair<'_>],
    params: &ModelParams,
    config: &LossConfig,
) -> Result<(LossReport, ModelParams)> {
    let mut mt = ModelTape::new(params);
    let (out, report) = record_total_loss(&mut mt, batch, config)?;
    let grads = mt.backward(out)?;
    Ok((report, grads))
}
