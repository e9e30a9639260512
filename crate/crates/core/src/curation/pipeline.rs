//! Whole-system orchestration.
//!
//! `run_pipeline` writes into its output directory:
//!
//! * `data/` with the synthetic benchmark, unless the config names a manifest;
//! * `classifier.wsn`, `segmenter-initial.wsn` and, when fine-tuning runs,
//!   `segmenter-finetuned.wsn`;
//! * `curation-report.txt` (see [`super::report`]);
//! * `metrics.txt`: `webseg-metrics<TAB>1`, then one `key<TAB>value` line
//!   per metric in a fixed order. Reals are printed with six decimals, and
//!   the fine-tuned mIoU reads `absent` when fine-tuning is disabled.

use std::fmt::Write;
use std::path::Path;

use super::config::{FinetuneMode, PipelineConfig};
use super::eval::{attention_ablation, evaluate_segmenter, tag_purity, Ablation};
use super::filter::filter_cascade;
use super::finetune::{attention_pseudo_masks, build_finetune_set, PseudoLabelParams};
use super::report::{CurationReport, Purity, StageReport};
use crate::convnet::{checkpoint, train_segmenter, Network, TrainSchedule};
use crate::dataset::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::io;
use crate::pseudo_label::{MeanIou, PseudoMask};
use crate::seed::sub_seed;
use crate::synth::{synth_generate, SynthSpec};
use crate::tensor::{FeatureMap, LabelImage};

const METRICS_TAG: &str = "webseg-metrics";
const METRICS_VERSION: u32 = 1;

/// Everything `run_pipeline` produced, in memory.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub manifest: DatasetManifest,
    pub classifier: Network,
    pub initial: Network,
    pub finetuned: Option<Network>,
    pub report: CurationReport,
    pub ablation: Ablation,
    pub initial_miou: MeanIou,
    pub finetuned_miou: Option<MeanIou>,
    pub metrics: String,
}

/// Sub-seeds of the root config seed, one per random consumer.
pub fn stage_seed(root: u64, stage: &str) -> u64 {
    sub_seed(root, stage)
}

fn with_seed(schedule: &TrainSchedule, seed: u64) -> TrainSchedule {
    TrainSchedule { seed, ..schedule.clone() }
}

/// Loads the configured manifest or generates the synthetic benchmark under
/// `out_dir/data`.
pub fn prepare_dataset(config: &PipelineConfig, out_dir: &Path) -> Result<DatasetManifest> {
    match &config.manifest {
        Some(path) => DatasetManifest::load(path),
        None => {
            let spec = SynthSpec {
                seed: stage_seed(config.seed, "synth"),
                ..config.synth.clone()
            };
            synth_generate(&spec, &out_dir.join("data"))
        }
    }
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } | Error::DataExhausted { .. } => e,
        other => other.in_stage(name),
    })
}

fn mask_stats(masks: &[PseudoMask]) -> (f64, f64) {
    let (mut fg, mut ig, mut total) = (0usize, 0usize, 0usize);
    for m in masks {
        let (f, i, b) = m.counts();
        fg += f;
        ig += i;
        total += f + i + b;
    }
    if total == 0 {
        (0.0, 0.0)
    } else {
        (fg as f64 / total as f64, ig as f64 / total as f64)
    }
}

pub fn run_pipeline(config: &PipelineConfig, out_dir: &Path) -> Result<PipelineOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest = stage("dataset", prepare_dataset(config, out_dir))?;
    let k = manifest.class_count();
    let with_truth = manifest.records().iter().all(|r| r.has_truth());
    let params = PseudoLabelParams {
        segments: crate::pseudo_label::SegmentParams {
            seed: stage_seed(config.seed, "segments"),
            ..config.pseudo.segments
        },
        ..config.pseudo
    };

    let train = stage("load", manifest.load_split(Split::AttentionTrain))?;
    let train_count = train.len();
    log::info!("filter cascade over {train_count} images");
    let cascade = stage(
        "filter-cascade",
        filter_cascade(
            train,
            k,
            &with_seed(&config.classifier, stage_seed(config.seed, "classifier-batches")),
            stage_seed(config.seed, "classifier-init"),
        ),
    )?;
    let mut report = CurationReport { stages: cascade.stages };
    let classifier = cascade.classifier;
    let kept = cascade.kept;

    log::info!("pseudo ground truth for {} images", kept.len());
    let pseudo = stage("pseudo-gt", attention_pseudo_masks(&classifier, &kept, &params))?;
    let (pseudo_fg, pseudo_ignore) = mask_stats(&pseudo);
    let initial_data: Vec<(&FeatureMap, &LabelImage)> =
        kept.iter().zip(&pseudo).map(|(s, m)| (&s.image, &m.mask)).collect();
    let seg0 = stage(
        "train-segmenter",
        classifier.segmenter_from_classifier(stage_seed(config.seed, "segmenter-init")),
    )?;
    log::info!("training initial segmenter");
    let initial = stage(
        "train-segmenter",
        train_segmenter(
            seg0,
            &initial_data,
            &with_seed(&config.segmenter, stage_seed(config.seed, "segmenter-batches")),
        ),
    )?;

    let mut finetuned = None;
    let mut accepted_counts = Vec::new();
    let mut pool_count = 0;
    if config.finetune_enabled {
        let pool = stage("load", manifest.load_split(Split::FinetunePool))?;
        pool_count = pool.len();
        let mut current = initial.clone();
        for round in 0..config.finetune_rounds {
            log::info!("fine-tuning round {}", round + 1);
            let (examples, mut gate_report) = stage(
                "finetune-gate",
                build_finetune_set(&pool, &current, &classifier, config.mu, &params),
            )?;
            gate_report.stage = format!("finetune-gate-{}", round + 1);
            report.stages.push(gate_report);
            accepted_counts.push(examples.len());
            if examples.is_empty() {
                continue;
            }
            let mut data: Vec<(&FeatureMap, &LabelImage)> = examples
                .iter()
                .map(|e| (&pool[e.position].image, &e.mask.mask))
                .collect();
            if config.finetune_mode == FinetuneMode::Augment {
                data.extend(initial_data.iter().copied());
            }
            current = stage(
                "finetune",
                train_segmenter(
                    current,
                    &data,
                    &with_seed(&config.finetune, stage_seed(config.seed, &format!("finetune-batches/{round}"))),
                ),
            )?;
        }
        finetuned = Some(current);
    }

    // Evaluation: the only part that reads ground truth.
    if with_truth {
        let filter_stages = report.stages.iter_mut().filter(|s| s.stage.starts_with("filter-"));
        for s in filter_stages {
            let input: Vec<usize> = s.decisions.iter().map(|d| d.index).collect();
            let purity = Purity {
                input: stage("eval", tag_purity(&manifest, &input))?,
                retained: stage("eval", tag_purity(&manifest, &s.kept_indices()))?,
            };
            s.purity = Some(purity);
        }
    }
    let eval = stage("load", manifest.load_split(Split::Eval))?;
    log::info!("evaluating on {} images", eval.len());
    let initial_miou = stage("eval", evaluate_segmenter(&manifest, &eval, &initial))?;
    let finetuned_miou = match &finetuned {
        Some(net) => Some(stage("eval", evaluate_segmenter(&manifest, &eval, net))?),
        None => None,
    };
    let ablation = stage(
        "eval",
        attention_ablation(&manifest, &eval, &classifier, &params, config.ablation_threshold),
    )?;

    let mut m = format!("{METRICS_TAG}\t{METRICS_VERSION}\n");
    let mut line = |key: &str, value: String| writeln!(m, "{key}\t{value}").expect("string write");
    line("seed", config.seed.to_string());
    line("classes", k.to_string());
    line("attention_train", train_count.to_string());
    for s in report.stages.iter().filter(|s| s.stage.starts_with("filter-")) {
        line(&format!("{}.input", s.stage), s.input.to_string());
        line(&format!("{}.kept", s.stage), s.kept.to_string());
        line(&format!("{}.dropped", s.stage), s.dropped.to_string());
    }
    let filters: Vec<&StageReport> = report.stages.iter().filter(|s| s.stage.starts_with("filter-")).collect();
    if let (Some(first), Some(last)) = (filters.first().and_then(|s| s.purity), filters.last().and_then(|s| s.purity)) {
        line("purity.input", format!("{:.6}", first.input));
        line("purity.retained", format!("{:.6}", last.retained));
    } else {
        line("purity.input", "absent".into());
        line("purity.retained", "absent".into());
    }
    line("pseudo_gt.images", pseudo.len().to_string());
    line("pseudo_gt.foreground_fraction", format!("{pseudo_fg:.6}"));
    line("pseudo_gt.ignore_fraction", format!("{pseudo_ignore:.6}"));
    line("finetune.enabled", config.finetune_enabled.to_string());
    line("finetune.pool", pool_count.to_string());
    for (r, n) in accepted_counts.iter().enumerate() {
        line(&format!("finetune.round{}.accepted", r + 1), n.to_string());
    }
    line("ablation.forward_only", format!("{:.6}", ablation.forward_only));
    line("ablation.backward_only", format!("{:.6}", ablation.backward_only));
    line("ablation.fused", format!("{:.6}", ablation.fused));
    line("ablation.fused_smoothed", format!("{:.6}", ablation.fused_smoothed));
    line("ablation.trimap", format!("{:.6}", ablation.trimap));
    line("miou.initial", format!("{:.6}", initial_miou.mean));
    line(
        "miou.finetuned",
        finetuned_miou.as_ref().map_or("absent".into(), |x| format!("{:.6}", x.mean)),
    );
    let per_class = |x: &MeanIou| {
        x.per_class
            .iter()
            .map(|c| c.map_or("-".into(), |v| format!("{v:.6}")))
            .collect::<Vec<String>>()
            .join(",")
    };
    line("miou.initial.per_class", per_class(&initial_miou));
    line(
        "miou.finetuned.per_class",
        finetuned_miou.as_ref().map_or("absent".into(), per_class),
    );

    stage("write", checkpoint::save(&classifier, &out_dir.join("classifier.wsn")))?;
    stage("write", checkpoint::save(&initial, &out_dir.join("segmenter-initial.wsn")))?;
    if let Some(net) = &finetuned {
        stage("write", checkpoint::save(net, &out_dir.join("segmenter-finetuned.wsn")))?;
    }
    stage("write", io::write_text(&out_dir.join("curation-report.txt"), &report.to_text(&manifest)))?;
    stage("write", io::write_text(&out_dir.join("metrics.txt"), &m))?;

    Ok(PipelineOutcome {
        manifest,
        classifier,
        initial,
        finetuned,
        report,
        ablation,
        initial_miou,
        finetuned_miou,
        metrics: m,
    })
}
