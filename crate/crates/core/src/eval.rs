//! Nearest-class-text classification and text-to-modality retrieval over seen
//! and unseen classes, with per-class accuracy / average precision and the
//! seen/unseen harmonic mean.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::data::{ClassManifest, FeatureRecord};
use crate::losses::mse_distance;
use crate::model::{ModelError, ModelParams};
use crate::tensor::DenseMatrix;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("condition {condition} needs the {modality} modality, which the query lacks")]
    MissingModality {
        condition: ModalityCondition,
        modality: &'static str,
    },
    #[error("average precision needs at least one relevant item")]
    NoRelevant,
    #[error("{0} predictions for {1} ground-truth labels")]
    LengthMismatch(usize, usize),
    #[error("class {0} is not in the manifest")]
    UnknownClass(u32),
    #[error("empty gallery")]
    EmptyGallery,
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("embedding file line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl From<crate::tensor::TensorError> for EvalError {
    fn from(e: crate::tensor::TensorError) -> Self {
        EvalError::Model(e.into())
    }
}

impl From<crate::losses::LossError> for EvalError {
    fn from(e: crate::losses::LossError) -> Self {
        match e {
            crate::losses::LossError::Model(m) => EvalError::Model(m),
            other => EvalError::Parse {
                line: 0,
                message: other.to_string(),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModalityCondition {
    AudioOnly,
    VideoOnly,
    Both,
}

impl ModalityCondition {
    pub const ALL: [ModalityCondition; 3] = [Self::AudioOnly, Self::VideoOnly, Self::Both];

    pub fn name(self) -> &'static str {
        match self {
            Self::AudioOnly => "audio",
            Self::VideoOnly => "video",
            Self::Both => "both",
        }
    }

    fn needs_audio(self) -> bool {
        !matches!(self, Self::VideoOnly)
    }

    fn needs_video(self) -> bool {
        !matches!(self, Self::AudioOnly)
    }
}

impl fmt::Display for ModalityCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModalityCondition {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "audio" => Ok(Self::AudioOnly),
            "video" => Ok(Self::VideoOnly),
            "both" => Ok(Self::Both),
            other => Err(format!("unknown modality {other:?} (expected audio|video|both)")),
        }
    }
}

/// A query with whichever modalities are available.
#[derive(Debug, Clone, Copy, Default)]
pub struct Query<'a> {
    pub audio: Option<&'a [f64]>,
    pub video: Option<&'a [f64]>,
}

impl<'a> From<&'a FeatureRecord> for Query<'a> {
    fn from(r: &'a FeatureRecord) -> Self {
        Self {
            audio: Some(&r.audio),
            video: Some(&r.video),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    AveragePrecision,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "acc",
            Metric::AveragePrecision => "ap",
        }
    }
}

pub fn harmonic_mean(seen: f64, unseen: f64) -> f64 {
    if seen + unseen > 0.0 {
        2.0 * unseen * seen / (unseen + seen)
    } else {
        0.0
    }
}

/// Per-class metric values (percent) with seen/unseen means and their
/// harmonic mean.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub condition: ModalityCondition,
    pub metric: Metric,
    pub per_class: BTreeMap<u32, f64>,
    /// Classes with no evaluation samples, excluded from the means.
    pub absent: Vec<u32>,
    pub seen: f64,
    pub unseen: f64,
    pub hm: f64,
}

impl EvalReport {
    fn from_per_class(
        condition: ModalityCondition,
        metric: Metric,
        per_class: BTreeMap<u32, f64>,
        manifest: &ClassManifest,
    ) -> Self {
        let absent: Vec<u32> = (0..manifest.len() as u32)
            .filter(|c| !per_class.contains_key(c))
            .collect();
        if !absent.is_empty() {
            log::warn!("classes without evaluation samples excluded from means: {absent:?}");
        }
        let mean_of = |seen: bool| {
            let vals: Vec<f64> = per_class
                .iter()
                .filter(|(c, _)| manifest.is_seen(**c) == seen)
                .map(|(_, v)| *v)
                .collect();
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        };
        let (seen, unseen) = (mean_of(true), mean_of(false));
        Self {
            condition,
            metric,
            per_class,
            absent,
            seen,
            unseen,
            hm: harmonic_mean(seen, unseen),
        }
    }

    /// Unweighted mean over every evaluated class.
    pub fn overall_mean(&self) -> f64 {
        if self.per_class.is_empty() {
            return 0.0;
        }
        self.per_class.values().sum::<f64>() / self.per_class.len() as f64
    }

    pub fn summary_line(&self) -> String {
        format!("S={:.2} U={:.2} HM={:.2}", self.seen, self.unseen, self.hm)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (c, v) in &self.per_class {
            writeln!(w, "class={c} metric={v:.4}")?;
        }
        writeln!(w, "{}", self.summary_line())
    }
}

/// Row `i` is the text embedding of class `i`.
pub fn class_text_embeddings(params: &ModelParams, manifest: &ClassManifest) -> Result<DenseMatrix> {
    let rows: Vec<&[f64]> = manifest.classes().iter().map(|c| c.text.as_slice()).collect();
    Ok(params.embed_text_batch(&DenseMatrix::from_rows(&rows)?)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub class_id: u32,
    /// Fused distance to every class, indexed by class id.
    pub distances: Vec<f64>,
}

fn require(condition: ModalityCondition, audio: bool, video: bool) -> Result<()> {
    if condition.needs_audio() && !audio {
        return Err(EvalError::MissingModality {
            condition,
            modality: "audio",
        });
    }
    if condition.needs_video() && !video {
        return Err(EvalError::MissingModality {
            condition,
            modality: "video",
        });
    }
    Ok(())
}

fn fused(d_a: Option<f64>, d_v: Option<f64>, condition: ModalityCondition) -> f64 {
    match condition {
        ModalityCondition::AudioOnly => d_a.expect("checked"),
        ModalityCondition::VideoOnly => d_v.expect("checked"),
        ModalityCondition::Both => (d_a.expect("checked") + d_v.expect("checked")) / 2.0,
    }
}

fn argmin_lowest(distances: &[f64]) -> usize {
    let mut best = 0;
    for (i, d) in distances.iter().enumerate().skip(1) {
        if *d < distances[best] {
            best = i;
        }
    }
    best
}

/// Classifies from already-computed query embeddings. Ties go to the lowest
/// class id.
pub fn classify_embeddings(
    class_embeddings: &DenseMatrix,
    audio: Option<&[f64]>,
    video: Option<&[f64]>,
    condition: ModalityCondition,
) -> Result<Classification> {
    require(condition, audio.is_some(), video.is_some())?;
    let mut distances = Vec::with_capacity(class_embeddings.rows());
    for c in 0..class_embeddings.rows() {
        let t = class_embeddings.row(c);
        let d_a = condition
            .needs_audio()
            .then(|| mse_distance(audio.expect("checked"), t))
            .transpose()?;
        let d_v = condition
            .needs_video()
            .then(|| mse_distance(video.expect("checked"), t))
            .transpose()?;
        distances.push(fused(d_a, d_v, condition));
    }
    if distances.is_empty() {
        return Err(EvalError::UnknownClass(0));
    }
    Ok(Classification {
        class_id: argmin_lowest(&distances) as u32,
        distances,
    })
}

pub fn classify(
    params: &ModelParams,
    manifest: &ClassManifest,
    query: Query<'_>,
    condition: ModalityCondition,
) -> Result<Classification> {
    require(condition, query.audio.is_some(), query.video.is_some())?;
    let classes = class_text_embeddings(params, manifest)?;
    let a = match (condition.needs_audio(), query.audio) {
        (true, Some(x)) => Some(params.embed_audio(x)?),
        _ => None,
    };
    let v = match (condition.needs_video(), query.video) {
        (true, Some(x)) => Some(params.embed_video(x)?),
        _ => None,
    };
    classify_embeddings(&classes, a.as_deref(), v.as_deref(), condition)
}

/// Audio and video embeddings of a record set, computed in one batch each.
#[derive(Debug, Clone)]
pub struct RecordEmbeddings {
    pub audio: DenseMatrix,
    pub video: DenseMatrix,
}

impl RecordEmbeddings {
    pub fn compute(params: &ModelParams, records: &[FeatureRecord]) -> Result<Self> {
        let audio: Vec<&[f64]> = records.iter().map(|r| r.audio.as_slice()).collect();
        let video: Vec<&[f64]> = records.iter().map(|r| r.video.as_slice()).collect();
        let (xa, xv) = if records.is_empty() {
            (
                DenseMatrix::zeros(0, params.arch.dim_audio_in),
                DenseMatrix::zeros(0, params.arch.dim_video_in),
            )
        } else {
            (DenseMatrix::from_rows(&audio)?, DenseMatrix::from_rows(&video)?)
        };
        Ok(Self {
            audio: params.embed_audio_batch(&xa)?,
            video: params.embed_video_batch(&xv)?,
        })
    }

    pub fn len(&self) -> usize {
        self.audio.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn distance(&self, i: usize, target: &[f64], condition: ModalityCondition) -> Result<f64> {
        let d_a = condition
            .needs_audio()
            .then(|| mse_distance(self.audio.row(i), target))
            .transpose()?;
        let d_v = condition
            .needs_video()
            .then(|| mse_distance(self.video.row(i), target))
            .transpose()?;
        Ok(fused(d_a, d_v, condition))
    }
}

/// Predicted class of every record.
pub fn classify_records(
    params: &ModelParams,
    manifest: &ClassManifest,
    records: &[FeatureRecord],
    condition: ModalityCondition,
) -> Result<Vec<u32>> {
    let classes = class_text_embeddings(params, manifest)?;
    let emb = RecordEmbeddings::compute(params, records)?;
    (0..records.len())
        .map(|i| {
            classify_embeddings(
                &classes,
                Some(emb.audio.row(i)),
                Some(emb.video.row(i)),
                condition,
            )
            .map(|c| c.class_id)
        })
        .collect()
}

/// Per-class accuracy in percent, averaged separately over seen and unseen
/// classes present in `ground_truth`.
pub fn mean_class_accuracy(
    predictions: &[u32],
    ground_truth: &[u32],
    manifest: &ClassManifest,
    condition: ModalityCondition,
) -> Result<EvalReport> {
    if predictions.len() != ground_truth.len() {
        return Err(EvalError::LengthMismatch(predictions.len(), ground_truth.len()));
    }
    let mut tally: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (&p, &t) in predictions.iter().zip(ground_truth) {
        if manifest.get(t).is_none() {
            return Err(EvalError::UnknownClass(t));
        }
        let e = tally.entry(t).or_default();
        e.1 += 1;
        if p == t {
            e.0 += 1;
        }
    }
    let per_class = tally
        .into_iter()
        .map(|(c, (ok, n))| (c, 100.0 * ok as f64 / n as f64))
        .collect();
    Ok(EvalReport::from_per_class(condition, Metric::Accuracy, per_class, manifest))
}

/// Classifies every record and reports mean class accuracy.
pub fn eval_classification(
    params: &ModelParams,
    manifest: &ClassManifest,
    records: &[FeatureRecord],
    condition: ModalityCondition,
) -> Result<EvalReport> {
    let predictions = classify_records(params, manifest, records, condition)?;
    let truth: Vec<u32> = records.iter().map(|r| r.class_id).collect();
    mean_class_accuracy(&predictions, &truth, manifest, condition)
}

/// Gallery indices sorted by ascending distance to `query_class`'s text
/// embedding; ties keep index order.
pub fn rank_gallery(
    gallery: &RecordEmbeddings,
    class_embedding: &[f64],
    condition: ModalityCondition,
) -> Result<Vec<usize>> {
    if gallery.is_empty() {
        return Err(EvalError::EmptyGallery);
    }
    let d = (0..gallery.len())
        .map(|i| gallery.distance(i, class_embedding, condition))
        .collect::<Result<Vec<f64>>>()?;
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&i, &j| d[i].total_cmp(&d[j]).then(i.cmp(&j)));
    Ok(order)
}

pub fn retrieve(
    params: &ModelParams,
    manifest: &ClassManifest,
    gallery: &[FeatureRecord],
    query_class: u32,
    condition: ModalityCondition,
) -> Result<Vec<usize>> {
    let text = manifest.text(query_class).ok_or(EvalError::UnknownClass(query_class))?;
    let t = params.embed_text(text)?;
    rank_gallery(&RecordEmbeddings::compute(params, gallery)?, &t, condition)
}

/// Non-interpolated average precision in percent: the mean over relevant
/// positions `k` of the precision within the top `k`.
pub fn average_precision(relevant: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in relevant.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(EvalError::NoRelevant);
    }
    Ok(100.0 * sum / hits as f64)
}

/// Retrieves the gallery for every class and reports per-class AP. Classes
/// with no gallery records are excluded.
pub fn gzsl_retrieval_eval(
    params: &ModelParams,
    manifest: &ClassManifest,
    gallery: &[FeatureRecord],
    condition: ModalityCondition,
) -> Result<EvalReport> {
    let classes = class_text_embeddings(params, manifest)?;
    let emb = RecordEmbeddings::compute(params, gallery)?;
    let mut per_class = BTreeMap::new();
    for c in 0..manifest.len() as u32 {
        if !gallery.iter().any(|r| r.class_id == c) {
            continue;
        }
        let order = rank_gallery(&emb, classes.row(c as usize), condition)?;
        let relevance: Vec<bool> = order.iter().map(|&i| gallery[i].class_id == c).collect();
        per_class.insert(c, average_precision(&relevance)?);
    }
    Ok(EvalReport::from_per_class(
        condition,
        Metric::AveragePrecision,
        per_class,
        manifest,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingKind {
    Audio,
    Video,
    Text,
}

impl EmbeddingKind {
    fn tag(self) -> &'static str {
        match self {
            EmbeddingKind::Audio => "a",
            EmbeddingKind::Video => "v",
            EmbeddingKind::Text => "t",
        }
    }
}

/// One line of an embedding export.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub kind: EmbeddingKind,
    pub class_id: u32,
    /// `None` for class text embeddings.
    pub record: Option<usize>,
    pub values: Vec<f64>,
}

/// Writes `a` and `v` lines for every record, then one `t` line per class.
pub fn write_embeddings<W: Write>(
    params: &ModelParams,
    records: &[FeatureRecord],
    manifest: &ClassManifest,
    mut w: W,
) -> Result<()> {
    let emb = RecordEmbeddings::compute(params, records)?;
    let classes = class_text_embeddings(params, manifest)?;
    let mut line = |kind: EmbeddingKind, class_id: u32, record: Option<usize>, values: &[f64]| {
        let idx = record.map_or_else(|| "-1".to_string(), |i| i.to_string());
        let vals: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}\t{class_id}\t{idx}\t{}", kind.tag(), vals.join(" "))
    };
    for (i, r) in records.iter().enumerate() {
        line(EmbeddingKind::Audio, r.class_id, Some(i), emb.audio.row(i))?;
        line(EmbeddingKind::Video, r.class_id, Some(i), emb.video.row(i))?;
    }
    for c in manifest.classes() {
        line(EmbeddingKind::Text, c.id, None, classes.row(c.id as usize))?;
    }
    Ok(())
}

pub fn export_embeddings(
    params: &ModelParams,
    records: &[FeatureRecord],
    manifest: &ClassManifest,
    path: &Path,
) -> Result<()> {
    crate::io_util::atomic_write(path, |w| write_embeddings(params, records, manifest, w))
}

pub fn parse_embeddings<R: BufRead>(r: R) -> Result<Vec<EmbeddingRow>> {
    let mut rows = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let bad = |message: String| EvalError::Parse { line: i + 1, message };
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 4 {
            return Err(bad(format!("expected 4 fields, got {}", parts.len())));
        }
        let kind = match parts[0] {
            "a" => EmbeddingKind::Audio,
            "v" => EmbeddingKind::Video,
            "t" => EmbeddingKind::Text,
            k => return Err(bad(format!("unknown kind {k:?}"))),
        };
        let class_id = parts[1].parse().map_err(|_| bad(format!("bad class id {:?}", parts[1])))?;
        let record = match parts[2] {
            "-1" => None,
            s => Some(s.parse().map_err(|_| bad(format!("bad record index {s:?}")))?),
        };
        let values = parts[3]
            .split(' ')
            .map(|s| s.parse().map_err(|_| bad(format!("bad real {s:?}"))))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(EmbeddingRow {
            kind,
            class_id,
            record,
            values,
        });
    }
    Ok(rows)
}
