//! Loss-term ablation grid: the full model plus one row per dropped term.

use std::fmt::Write as _;
use std::thread;

use crate::data::Dataset;
use crate::eval::{eval_classification, EvalReport, ModalityCondition};
use crate::losses::LossTerm;
use crate::model::{ArchitectureSpec, ModelParams};
use crate::train::{train, Result, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationRow {
    Full,
    Drop(LossTerm),
}

impl AblationRow {
    /// Decoder-loss drops, then triplet drops, then the full model.
    pub fn grid() -> [AblationRow; 8] {
        use LossTerm::*;
        [
            AblationRow::Drop(Rec),
            AblationRow::Drop(Cta),
            AblationRow::Drop(Ctv),
            AblationRow::Drop(Ta),
            AblationRow::Drop(At),
            AblationRow::Drop(Tv),
            AblationRow::Drop(Vt),
            AblationRow::Full,
        ]
    }

    pub fn label(self) -> String {
        match self {
            AblationRow::Full => "full".to_string(),
            AblationRow::Drop(t) => format!("-{}", t.name()),
        }
    }

    pub fn config(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        if let AblationRow::Drop(t) = self {
            cfg.loss.set(t, false);
        }
        cfg
    }
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub row: AblationRow,
    pub params: ModelParams,
    pub report: EvalReport,
}

/// Trains and evaluates one configuration on the test split.
pub fn run_single(
    dataset: &Dataset,
    arch: ArchitectureSpec,
    config: &TrainConfig,
    condition: ModalityCondition,
) -> Result<(ModelParams, EvalReport)> {
    let (params, _) = train(dataset, arch, config)?;
    let report = eval_classification(&params, &dataset.manifest, &dataset.splits.test, condition)?;
    Ok((params, report))
}

/// Runs every row of the grid with the base config's seed. With
/// `parallel`, rows run on scoped threads; results are identical either way.
pub fn ablate(
    dataset: &Dataset,
    arch: ArchitectureSpec,
    base: &TrainConfig,
    condition: ModalityCondition,
    parallel: bool,
) -> Result<Vec<AblationResult>> {
    let rows = AblationRow::grid();
    let run = |row: AblationRow| {
        run_single(dataset, arch, &row.config(base), condition).map(|(params, report)| AblationResult {
            row,
            params,
            report,
        })
    };
    if parallel {
        thread::scope(|s| {
            let handles: Vec<_> = rows.iter().map(|&row| s.spawn(move || run(row))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("ablation worker panicked"))
                .collect()
        })
    } else {
        rows.into_iter().map(run).collect()
    }
}

pub fn format_table(results: &[AblationResult]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<8} {:>7} {:>7} {:>7}", "row", "S", "U", "HM");
    for r in results {
        let _ = writeln!(
            out,
            "{:<8} {:>7.2} {:>7.2} {:>7.2}",
            r.row.label(),
            r.report.seen,
            r.report.unseen,
            r.report.hm
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, FeatureDims, SyntheticConfig};

    fn small_data(seed: u64) -> Dataset {
        gen_synthetic(&SyntheticConfig {
            n_seen: 3,
            n_unseen: 2,
            per_class: 10,
            dims: FeatureDims {
                audio: 8,
                video: 6,
                text: 4,
            },
            noise_sigma: 0.1,
            seed,
        })
        .unwrap()
    }

    fn small_arch() -> ArchitectureSpec {
        ArchitectureSpec {
            dim_audio_in: 8,
            dim_video_in: 6,
            dim_text_in: 4,
            embed_dim: 3,
            decoder_out_dim: 4,
            hidden_audio: 8,
            hidden_video: 8,
            hidden_decoder: 8,
        }
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn grid_has_eight_distinct_rows() {
        let g = AblationRow::grid();
        assert_eq!(g.len(), 8);
        for (i, a) in g.iter().enumerate() {
            for b in &g[i + 1..] {
                assert_ne!(a, b);
            }
        }
        let base = cfg();
        assert_eq!(AblationRow::Full.config(&base), base);
        assert!(!AblationRow::Drop(LossTerm::Tv).config(&base).loss.use_tv);
    }

    #[test]
    fn full_row_matches_standalone_and_parallel_matches_serial() {
        let d = small_data(1);
        let serial = ablate(&d, small_arch(), &cfg(), ModalityCondition::Both, false).unwrap();
        let parallel = ablate(&d, small_arch(), &cfg(), ModalityCondition::Both, true).unwrap();
        assert_eq!(serial.len(), 8);
        for (a, b) in serial.iter().zip(&parallel) {
            assert!(a.params.bit_eq(&b.params));
            assert_eq!(a.report, b.report);
        }
        let (p, r) = run_single(&d, small_arch(), &cfg(), ModalityCondition::Both).unwrap();
        let full = serial.last().unwrap();
        assert_eq!(full.row, AblationRow::Full);
        assert!(full.params.bit_eq(&p));
        assert_eq!(full.report, r);
    }

    #[test]
    fn table_has_header_and_rows() {
        let d = small_data(2);
        let results = ablate(&d, small_arch(), &cfg(), ModalityCondition::AudioOnly, true).unwrap();
        let table = format_table(&results);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 9);
        assert!(lines[1].starts_with("-rec "));
        assert!(lines[8].starts_with("full "));
        let width = lines[0].len();
        assert!(lines.iter().all(|l| l.len() == width));
    }
}
