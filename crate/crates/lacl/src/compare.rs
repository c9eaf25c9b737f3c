//! The three-arm comparison: train `lacl`, `lacl-no-qrs`, and
//! `moco-baseline` under identical data, splits, seeds, and budgets, then
//! score each with the same linear probe on held-out lesion patches. The
//! output is a side-by-side table — one row per mode, one column per metric
//! — plus the per-seed numbers behind the means.

use std::path::Path;

use crate::config::{Config, Mode};
use crate::data::{Split, SplitAssignment, SyntheticDataset};
use crate::error::Result;
use crate::eval::{extract_features, linear_probe, EvaluationReport};
use crate::model::ModelParams;
use crate::trainer::Trainer;

/// One trained-and-probed arm of the comparison.
#[derive(Clone, Debug)]
pub struct ArmResult {
    pub mode: Mode,
    pub seed: u64,
    pub accuracy: f64,
    pub macro_auc: f64,
    pub macro_f1: f64,
}

/// Everything the comparison emits, ready to render as a table.
#[derive(Clone, Debug)]
pub struct ComparisonReport {
    pub dataset_fingerprint: String,
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmResult>,
}

impl ComparisonReport {
    fn arm_values(&self, mode: Mode, pick: impl Fn(&ArmResult) -> f64) -> Vec<f64> {
        self.arms
            .iter()
            .filter(|a| a.mode == mode)
            .map(pick)
            .collect()
    }

    /// Mean (accuracy, macro-AUC, macro-F1) over this mode's seeds.
    pub fn means(&self, mode: Mode) -> (f64, f64, f64) {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        (
            mean(&self.arm_values(mode, |a| a.accuracy)),
            mean(&self.arm_values(mode, |a| a.macro_auc)),
            mean(&self.arm_values(mode, |a| a.macro_f1)),
        )
    }

    pub fn macro_f1_by_seed(&self, mode: Mode) -> Vec<(u64, f64)> {
        self.arms
            .iter()
            .filter(|a| a.mode == mode)
            .map(|a| (a.seed, a.macro_f1))
            .collect()
    }

    /// The side-by-side table: three mode rows by three metric columns,
    /// means over seeds, with the per-seed macro-F1 values appended.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("# comparison\n");
        out.push_str(&format!("dataset = {}\n", self.dataset_fingerprint));
        out.push_str(&format!(
            "seeds = {}\n",
            self.seeds
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(",")
        ));
        out.push_str(&format!(
            "{:<16} {:>10} {:>10} {:>10}\n",
            "mode", "accuracy", "macro_auc", "macro_f1"
        ));
        for mode in Mode::ALL {
            let (acc, auc, f1) = self.means(mode);
            out.push_str(&format!(
                "{:<16} {acc:>10.6} {auc:>10.6} {f1:>10.6}\n",
                mode.to_string()
            ));
        }
        out.push_str("per-seed macro_f1:\n");
        for mode in Mode::ALL {
            let per_seed = self
                .macro_f1_by_seed(mode)
                .iter()
                .map(|(s, f)| format!("seed{s}={f:.6}"))
                .collect::<Vec<_>>()
                .join(" ");
            out.push_str(&format!("{:<16} {per_seed}\n", mode.to_string()));
        }
        out
    }
}

/// Backbone features and pseudo-labels of one split's lesion patches.
pub fn lesion_features(
    dataset: &SyntheticDataset,
    split: &SplitAssignment,
    params: &ModelParams,
    which: Split,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let idx: Vec<usize> = split
        .patch_indices(dataset, which)
        .into_iter()
        .filter(|&p| dataset.lesion[p])
        .collect();
    let patches: Vec<Vec<f64>> = idx.iter().map(|&p| dataset.patches[p].clone()).collect();
    let labels = idx.iter().map(|&p| dataset.pseudo_label(p)).collect();
    Ok((extract_features(params, &patches)?, labels))
}

/// One bag per slide of the split: backbone features of every patch on the
/// slide, labeled with the slide's class.
pub fn slide_bags(
    dataset: &SyntheticDataset,
    split: &SplitAssignment,
    params: &ModelParams,
    which: Split,
) -> Result<Vec<crate::eval::Bag>> {
    split
        .slides_in(which)
        .into_iter()
        .map(|slide| {
            let patches: Vec<Vec<f64>> = dataset
                .patches_of_slide(slide)
                .map(|p| dataset.patches[p].clone())
                .collect();
            Ok(crate::eval::Bag {
                features: extract_features(params, &patches)?,
                label: dataset.slide_labels[slide],
            })
        })
        .collect()
}

/// Linear-probe the backbone on lesion patches: fit on the training split,
/// report on the held-out test split, pseudo-labels as targets.
pub fn lesion_probe(
    dataset: &SyntheticDataset,
    split: &SplitAssignment,
    params: &ModelParams,
    config: &Config,
) -> Result<EvaluationReport> {
    let (train_x, train_y) = lesion_features(dataset, split, params, Split::Train)?;
    let (test_x, test_y) = lesion_features(dataset, split, params, Split::Test)?;
    let mut report = linear_probe(&train_x, &train_y, &test_x, &test_y, &config.eval)?;
    report.config_fingerprint = config.fingerprint();
    Ok(report)
}

/// Train one arm to completion in `out_dir` and probe its final weights.
pub fn train_and_probe(
    dataset: &SyntheticDataset,
    split: &SplitAssignment,
    base_config: &Config,
    mode: Mode,
    seed: u64,
    out_dir: &Path,
) -> Result<ArmResult> {
    let mut config = base_config.clone();
    config.run.mode = mode;
    config.run.seed = seed;
    let mut trainer = Trainer::new(dataset, split, &config)?;
    trainer.run(out_dir)?;
    let report = lesion_probe(dataset, split, &trainer.state.params_q, &config)?;
    log::info!(
        "arm {mode} seed {seed}: accuracy {:.4}, macro-F1 {:.4}",
        report.accuracy,
        report.macro_f1
    );
    Ok(ArmResult {
        mode,
        seed,
        accuracy: report.accuracy,
        macro_auc: report.macro_auc,
        macro_f1: report.macro_f1,
    })
}

/// The full grid: every mode × every seed, identical budgets throughout.
/// Arm directories are named `<mode>-seed<seed>` under `out_dir`.
pub fn run_comparison(
    dataset: &SyntheticDataset,
    split: &SplitAssignment,
    base_config: &Config,
    seeds: &[u64],
    dataset_fingerprint: &str,
    out_dir: &Path,
) -> Result<ComparisonReport> {
    let mut arms = Vec::with_capacity(seeds.len() * Mode::ALL.len());
    for &seed in seeds {
        for mode in Mode::ALL {
            let arm_dir = out_dir.join(format!("{mode}-seed{seed}"));
            arms.push(train_and_probe(
                dataset,
                split,
                base_config,
                mode,
                seed,
                &arm_dir,
            )?);
        }
    }
    Ok(ComparisonReport {
        dataset_fingerprint: dataset_fingerprint.to_string(),
        seeds: seeds.to_vec(),
        arms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_patient_level, DatasetParams};

    fn small_setup() -> (SyntheticDataset, SplitAssignment, Config) {
        let mut config = Config::default();
        config.run.seed = 5;
        config.model.input_dim = 8;
        config.model.hidden_dim = 16;
        config.model.backbone_dim = 6;
        config.model.proj_hidden_dim = 16;
        config.model.contrast_dim = 4;
        config.data.num_classes = 3;
        config.data.slides_per_class = 5;
        config.data.patches_per_slide = 8;
        config.train.epochs = 1;
        config.train.batch_size = 16;
        config.train.queue_capacity = 48;
        config.eval.probe_epochs = 40;
        let params = DatasetParams::from_config(&config);
        let dataset = SyntheticDataset::generate(params).unwrap();
        let split = split_patient_level(&dataset, config.data.split_ratios, 5).unwrap();
        (dataset, split, config)
    }

    #[test]
    fn comparison_table_has_three_rows_and_three_metric_columns() {
        let (dataset, split, config) = small_setup();
        let dir = tempfile::tempdir().unwrap();
        let report =
            run_comparison(&dataset, &split, &config, &[5], "fp0123", dir.path()).unwrap();
        assert_eq!(report.arms.len(), 3);
        let text = report.render();
        let table_rows: Vec<&str> = text
            .lines()
            .filter(|l| {
                Mode::ALL
                    .iter()
                    .any(|m| l.starts_with(&m.to_string()))
            })
            .collect();
        // three rows in the means table, three more in the per-seed block
        assert_eq!(table_rows.len(), 6);
        assert!(text.contains("accuracy"));
        assert!(text.contains("macro_auc"));
        assert!(text.contains("macro_f1"));
        assert!(text.contains("dataset = fp0123"));
    }

    #[test]
    fn arm_directories_are_created_per_mode_and_seed() {
        let (dataset, split, config) = small_setup();
        let dir = tempfile::tempdir().unwrap();
        run_comparison(&dataset, &split, &config, &[5], "fp", dir.path()).unwrap();
        for mode in Mode::ALL {
            let arm = dir.path().join(format!("{mode}-seed5"));
            assert!(arm.join("checkpoint_final.ckpt").exists(), "{arm:?}");
            assert!(arm.join("metrics.log").exists());
        }
    }

    #[test]
    fn means_average_over_seeds() {
        let report = ComparisonReport {
            dataset_fingerprint: "fp".into(),
            seeds: vec![1, 2],
            arms: vec![
                ArmResult {
                    mode: Mode::Lacl,
                    seed: 1,
                    accuracy: 0.8,
                    macro_auc: 0.9,
                    macro_f1: 0.7,
                },
                ArmResult {
                    mode: Mode::Lacl,
                    seed: 2,
                    accuracy: 0.6,
                    macro_auc: 0.7,
                    macro_f1: 0.5,
                },
            ],
        };
        let (acc, auc, f1) = report.means(Mode::Lacl);
        assert!((acc - 0.7).abs() < 1e-12);
        assert!((auc - 0.8).abs() < 1e-12);
        assert!((f1 - 0.6).abs() < 1e-12);
        assert_eq!(report.macro_f1_by_seed(Mode::Lacl).len(), 2);
    }
}
