//! `webseg`: pseudo-label and segmentation pipeline driver.
//!
//! Every subcommand wraps one pipeline operation. Settings come from an
//! optional `--config` file, then `--seed`, the threshold flags and
//! repeated `--set key=value` overrides, applied in that order.
//!
//! Exit status: 0 on success, 2 for usage errors (bad flags, missing
//! inputs), 1 for any other failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use webseg::attention::class_attention;
use webseg::convnet::{checkpoint, train_classifier, train_segmenter, Network};
use webseg::curation::eval::load_truths;
use webseg::curation::{
    attention_pseudo_masks, build_finetune_set, filter_cascade, filter_stage, run_pipeline, CurationReport,
    FilterRule, PipelineConfig,
};
use webseg::dataset::{DatasetManifest, PairEntry, PairList, Record, Split};
use webseg::pseudo_label::{mean_iou, Provenance};
use webseg::synth::{synth_generate, SynthSpec};
use webseg::{io, seed, Error};

#[derive(Parser)]
#[command(name = "webseg", version, about = "Pixel-wise pseudo labels from noisily tagged images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Settings {
    /// Pipeline config file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Trimap foreground threshold.
    #[arg(long)]
    delta_upper: Option<f64>,
    /// Trimap background threshold.
    #[arg(long)]
    delta_lower: Option<f64>,
    /// Fine-tuning gate threshold.
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    lambda_forward: Option<f64>,
    #[arg(long)]
    lambda_backward: Option<f64>,
    /// Any config key, e.g. `--set classifier.iterations=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Settings {
    fn resolve(&self) -> anyhow::Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        let flags = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("trimap.upper", self.delta_upper.map(|v| v.to_string())),
            ("trimap.lower", self.delta_lower.map(|v| v.to_string())),
            ("gate.mu", self.mu.map(|v| v.to_string())),
            ("attention.lambda_forward", self.lambda_forward.map(|v| v.to_string())),
            ("attention.lambda_backward", self.lambda_backward.map(|v| v.to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v).map_err(as_usage)?;
            }
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            cfg.set(k.trim(), v).map_err(as_usage)?;
        }
        cfg.validate().map_err(as_usage)?;
        Ok(cfg)
    }
}

/// Bad flag values are usage errors, not configuration failures.
fn as_usage(e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Usage(m),
        other => other,
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic noisily tagged benchmark.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
    /// Train a classifier on one split's images and tags.
    TrainClassifier {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "attention-train")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
    /// Run the three-round filter cascade, or one rule with a given
    /// classifier.
    Filter {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "attention-train")]
        split: String,
        /// Output directory for the kept manifest, report and classifier.
        #[arg(long)]
        out: PathBuf,
        /// Apply only this rule (1, 2 or 3) with `--classifier`.
        #[arg(long, requires = "classifier")]
        rule: Option<u8>,
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[command(flatten)]
        settings: Settings,
    },
    /// Write the forward, both excitation and fused maps for one image.
    Attention {
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long = "class")]
        class_id: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
    /// Trimap pseudo masks from attention for every image of a split.
    PseudoGt {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long, default_value = "attention-train")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write indexed-color copies for inspection.
        #[arg(long)]
        palette: bool,
        #[command(flatten)]
        settings: Settings,
    },
    /// Train a segmenter on an image/mask pair list.
    TrainSeg {
        #[arg(long)]
        pairs: PathBuf,
        /// Classifier whose trunk initializes the segmenter.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
    /// Gate the fine-tuning pool and fine-tune the segmenter on the result.
    Finetune {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        segmenter: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long, default_value = "finetune-pool")]
        split: String,
        /// Output directory for masks, pairs, report and model.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
    /// mIoU of prediction masks against ground truth, matched by file name,
    /// or of a segmenter on a manifest's eval split.
    Eval {
        #[arg(long, conflicts_with_all = ["segmenter", "manifest"], requires = "gt")]
        pred: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, requires = "manifest")]
        segmenter: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Number of foreground classes; inferred from the masks if absent.
        #[arg(long)]
        classes: Option<usize>,
    },
    /// The whole pipeline: data, cascade, pseudo labels, segmenter,
    /// fine-tuning and evaluation.
    RunAll {
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Write the effective config to this path and exit.
        #[arg(long)]
        dump_config: Option<PathBuf>,
        #[command(flatten)]
        settings: Settings,
    },
}

fn split_arg(s: &str) -> anyhow::Result<Split> {
    Split::parse(s).ok_or_else(|| Error::Usage(format!("unknown split '{s}'")).into())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::SynthData { out, settings } => {
            let cfg = settings.resolve()?;
            let spec = SynthSpec {
                seed: cfg.seed,
                ..cfg.synth
            };
            let m = synth_generate(&spec, &out)?;
            println!("wrote {} records to {}", m.len(), out.join("manifest.tsv").display());
        }
        Command::TrainClassifier {
            manifest,
            split,
            out,
            settings,
        } => {
            let cfg = settings.resolve()?;
            let m = DatasetManifest::load(&manifest)?;
            let samples = m.load_split(split_arg(&split)?)?;
            let channels = samples.first().map_or(3, |s| s.image.channels());
            let data: Vec<_> = samples.iter().map(|s| (&s.image, s.tag as usize)).collect();
            let net = Network::reference_classifier(channels, m.class_count(), seed::sub_seed(cfg.seed, "classifier-init"));
            let schedule = webseg::convnet::TrainSchedule {
                seed: seed::sub_seed(cfg.seed, "classifier-batches"),
                ..cfg.classifier
            };
            let net = train_classifier(net, &data, &schedule).map_err(|e| e.in_stage("train-classifier"))?;
            checkpoint::save(&net, &out)?;
            println!("trained on {} images, saved {}", samples.len(), out.display());
        }
        Command::Filter {
            manifest,
            split,
            out,
            rule,
            classifier,
            settings,
        } => {
            let cfg = settings.resolve()?;
            let m = DatasetManifest::load(&manifest)?;
            let samples = m.load_split(split_arg(&split)?)?;
            let (kept, report, net) = match (rule, classifier) {
                (Some(n), Some(path)) => {
                    let rule = FilterRule::from_number(n)
                        .ok_or_else(|| Error::Usage(format!("rule must be 1, 2 or 3, got {n}")))?;
                    let net = checkpoint::load(&path)?;
                    let (kept, stage) = filter_stage(&samples, &net, rule).map_err(|e| e.in_stage("filter"))?;
                    (kept, CurationReport { stages: vec![stage] }, None)
                }
                _ => {
                    let schedule = webseg::convnet::TrainSchedule {
                        seed: seed::sub_seed(cfg.seed, "classifier-batches"),
                        ..cfg.classifier
                    };
                    let outcome = filter_cascade(
                        samples,
                        m.class_count(),
                        &schedule,
                        seed::sub_seed(cfg.seed, "classifier-init"),
                    )?;
                    let report = CurationReport { stages: outcome.stages };
                    (outcome.kept, report, Some(outcome.classifier))
                }
            };
            let indices: Vec<usize> = kept.iter().map(|s| s.index).collect();
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let records = indices
                .iter()
                .map(|&i| {
                    let r = &m.records()[i];
                    Record::new(absolute(&m.image_path(i)), r.tag, r.split, None)
                })
                .collect();
            let rel = DatasetManifest::new(&out, m.class_count(), records)?;
            rel.save(&out.join("kept.tsv"))?;
            std::fs::write(out.join("curation-report.txt"), report.to_text(&m))?;
            if let Some(net) = net {
                checkpoint::save(&net, &out.join("classifier.wsn"))?;
            }
            println!("kept {} of {} images", indices.len(), report.stages[0].input);
        }
        Command::Attention {
            classifier,
            image,
            class_id,
            out,
            settings,
        } => {
            let cfg = settings.resolve()?;
            let net = checkpoint::load(&classifier)?;
            let img = io::load_image(&image)?;
            let b = class_attention(
                &net,
                &img,
                class_id,
                cfg.pseudo.lambda_forward,
                cfg.pseudo.lambda_backward,
            )
            .map_err(|e| e.in_stage("attention"))?;
            for (name, map) in [
                ("forward", &b.forward.map),
                ("backward-shallow", &b.shallow.map),
                ("backward-deep", &b.deep.map),
                ("fused", &b.fused.map),
            ] {
                io::save_map_grayscale(&out.join(format!("{name}.png")), map)?;
                io::save_map(&out.join(format!("{name}.map")), map)?;
            }
            println!("wrote attention maps to {}", out.display());
        }
        Command::PseudoGt {
            manifest,
            classifier,
            split,
            out,
            palette,
            settings,
        } => {
            let cfg = settings.resolve()?;
            let m = DatasetManifest::load(&manifest)?;
            let net = checkpoint::load(&classifier)?;
            let samples = m.load_split(split_arg(&split)?)?;
            let params = pipeline_params(&cfg);
            let masks = attention_pseudo_masks(&net, &samples, &params).map_err(|e| e.in_stage("pseudo-gt"))?;
            let mut entries = Vec::with_capacity(samples.len());
            for (s, mask) in samples.iter().zip(&masks) {
                let name = file_name(&m, s.index);
                let rel = PathBuf::from("masks").join(&name);
                io::save_mask(&out.join(&rel), &mask.mask)?;
                if palette {
                    io::save_mask_palette(&out.join("palette").join(&name), &mask.mask)?;
                }
                entries.push(PairEntry {
                    image: absolute(&m.image_path(s.index)),
                    mask: rel,
                    tag: s.tag,
                    provenance: mask.provenance,
                });
            }
            PairList {
                root: out.clone(),
                entries,
            }
            .save(&out.join("pairs.tsv"))?;
            println!("wrote {} pseudo masks to {}", masks.len(), out.display());
        }
        Command::TrainSeg {
            pairs,
            init,
            out,
            settings,
        } => {
            let cfg = settings.resolve()?;
            let list = PairList::load(&pairs)?;
            let data = list.load_examples()?;
            let (channels, classes) = match &init {
                Some(_) => (0, 0),
                None => {
                    let c = data.first().map_or(3, |(img, _)| img.channels());
                    let k = list.entries.iter().map(|e| e.tag as usize).max().unwrap_or(1).max(cfg.synth.class_count);
                    (c, k)
                }
            };
            let init_seed = seed::sub_seed(cfg.seed, "segmenter-init");
            let net = match init {
                Some(path) => checkpoint::load(&path)?.segmenter_from_classifier(init_seed)?,
                None => Network::reference_segmenter(channels, classes, init_seed),
            };
            let schedule = webseg::convnet::TrainSchedule {
                seed: seed::sub_seed(cfg.seed, "segmenter-batches"),
                ..cfg.segmenter
            };
            let net = train_segmenter(net, &data, &schedule).map_err(|e| e.in_stage("train-seg"))?;
            checkpoint::save(&net, &out)?;
            println!("trained on {} pairs, saved {}", data.len(), out.display());
        }
        Command::Finetune {
            manifest,
            segmenter,
            classifier,
            split,
            out,
            settings,
        } => {
            let cfg = settings.resolve()?;
            let m = DatasetManifest::load(&manifest)?;
            let seg = checkpoint::load(&segmenter)?;
            let cls = checkpoint::load(&classifier)?;
            let pool = m.load_split(split_arg(&split)?)?;
            let params = pipeline_params(&cfg);
            let (examples, stage) = build_finetune_set(&pool, &seg, &cls, cfg.mu, &params)
                .map_err(|e| e.in_stage("finetune-gate"))?;
            let mut entries = Vec::with_capacity(examples.len());
            for e in &examples {
                let s = &pool[e.position];
                let rel = PathBuf::from("masks").join(file_name(&m, s.index));
                io::save_mask(&out.join(&rel), &e.mask.mask)?;
                entries.push(PairEntry {
                    image: absolute(&m.image_path(s.index)),
                    mask: rel,
                    tag: s.tag,
                    provenance: Provenance::FineTune,
                });
            }
            PairList {
                root: out.clone(),
                entries,
            }
            .save(&out.join("pairs.tsv"))?;
            std::fs::write(
                out.join("curation-report.txt"),
                CurationReport { stages: vec![stage] }.to_text(&m),
            )?;
            let tuned = if examples.is_empty() {
                seg
            } else {
                let data: Vec<_> = examples.iter().map(|e| (&pool[e.position].image, &e.mask.mask)).collect();
                let schedule = webseg::convnet::TrainSchedule {
                    seed: seed::sub_seed(cfg.seed, "finetune-batches/0"),
                    ..cfg.finetune
                };
                train_segmenter(seg, &data, &schedule).map_err(|e| e.in_stage("finetune"))?
            };
            checkpoint::save(&tuned, &out.join("segmenter-finetuned.wsn"))?;
            println!("accepted {} of {} pool images", examples.len(), pool.len());
        }
        Command::Eval {
            pred,
            gt,
            segmenter,
            manifest,
            classes,
        } => {
            let (preds, truths, k_from_data) = match (pred, gt, segmenter, manifest) {
                (Some(pred), Some(gt), None, None) => {
                    let (preds, truths) = load_mask_dirs(&pred, &gt)?;
                    let k = max_label(&preds).max(max_label(&truths));
                    (preds, truths, k)
                }
                (None, None, Some(seg), Some(man)) => {
                    let net = checkpoint::load(&seg)?;
                    let m = DatasetManifest::load(&man)?;
                    let idx = m.indices(Split::Eval);
                    let samples = m.load_samples(&idx)?;
                    let preds = samples
                        .iter()
                        .map(|s| net.predict_mask(&s.image))
                        .collect::<webseg::Result<Vec<_>>>()?;
                    let truths = load_truths(&m, &idx)?;
                    (preds, truths, m.class_count())
                }
                _ => return Err(Error::Usage("eval needs --pred and --gt, or --segmenter and --manifest".into()).into()),
            };
            let k = classes.unwrap_or(k_from_data);
            let r = mean_iou(&preds, &truths, k)?;
            println!("miou\t{:.6}", r.mean);
            for (c, v) in r.per_class.iter().enumerate() {
                println!("class{c}\t{}", v.map_or("-".into(), |v| format!("{v:.6}")));
            }
        }
        Command::RunAll {
            out,
            dump_config,
            settings,
        } => {
            let cfg = settings.resolve()?;
            if let Some(path) = dump_config {
                std::fs::write(&path, cfg.to_text()).with_context(|| format!("writing {}", path.display()))?;
                return Ok(());
            }
            let outcome = run_pipeline(&cfg, &out)?;
            print!("{}", outcome.metrics);
        }
    }
    Ok(())
}

fn pipeline_params(cfg: &PipelineConfig) -> webseg::curation::PseudoLabelParams {
    let mut p = cfg.pseudo;
    p.segments.seed = seed::sub_seed(cfg.seed, "segments");
    p
}

fn absolute(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

fn file_name(m: &DatasetManifest, index: usize) -> String {
    let stem = m.records()[index]
        .image
        .file_stem()
        .map_or_else(|| index.to_string(), |s| s.to_string_lossy().into_owned());
    format!("{stem}.png")
}

fn max_label(masks: &[webseg::LabelImage]) -> usize {
    masks
        .iter()
        .flat_map(|m| m.labels().iter())
        .filter(|&&c| c != webseg::IGNORE)
        .max()
        .map_or(0, |&c| c as usize)
}

fn load_mask_dirs(pred: &Path, gt: &Path) -> anyhow::Result<(Vec<webseg::LabelImage>, Vec<webseg::LabelImage>)> {
    let mut names: Vec<_> = std::fs::read_dir(pred)
        .map_err(|e| Error::Usage(format!("cannot read {}: {e}", pred.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name())
        .filter(|n| {
            let n = n.to_string_lossy().to_ascii_lowercase();
            n.ends_with(".png") || n.ends_with(".pgm")
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Usage(format!("no mask files in {}", pred.display())).into());
    }
    let mut preds = Vec::with_capacity(names.len());
    let mut truths = Vec::with_capacity(names.len());
    for n in names {
        preds.push(io::load_mask(&pred.join(&n))?);
        let g = gt.join(&n);
        if !g.exists() {
            return Err(Error::Usage(format!("no ground truth {}", g.display())).into());
        }
        truths.push(io::load_mask(&g)?);
    }
    Ok((preds, truths))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let mut inner = err.downcast_ref::<Error>();
    while let Some(Error::Stage { source, .. }) = inner {
        inner = Some(source);
    }
    match inner {
        Some(Error::Usage(_)) => 2,
        Some(Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("webseg: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
