use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vislang::bench::{bench, BenchReport};
use vislang::checkpoint::Checkpoint;
use vislang::config::TrainConfig;
use vislang::data::{self, CaptionedImage, SplitSizes};
use vislang::downstream::{
    eval_retrieval, finetune_classify, finetune_retrieval, inspect_vd, ClassifyExample, ClassifyMode,
};
use vislang::fdsuite::run_suite;
use vislang::trainer::{model_checkpoint, model_from_checkpoint, pretrain};
use vislang::{Error, Result};

#[derive(Parser)]
#[command(name = "vislang", version, about = "Vision-language pre-training with a visual dictionary")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Checkpoint to read (or resume from, for pretrain).
    #[arg(long, global = true)]
    ckpt: Option<PathBuf>,
    /// Dataset root with train/val/test splits.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic scene dataset.
    GenData {
        #[arg(long, default_value_t = 1000)]
        train: usize,
        #[arg(long, default_value_t = 100)]
        val: usize,
        #[arg(long, default_value_t = 200)]
        test: usize,
    },
    /// Pre-train on the train split.
    Pretrain,
    /// Fine-tune a pre-trained checkpoint on a downstream task.
    Finetune {
        #[arg(long, value_enum, default_value_t = Task::Retrieval)]
        task: Task,
        /// Feed quantized embeddings instead of raw encoder features.
        #[arg(long)]
        use_vd: Option<bool>,
        /// Paired-task samples to draw.
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
    },
    /// Retrieval recall on a split.
    Eval {
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        use_vd: Option<bool>,
    },
    /// Dump image patches per codebook index.
    InspectVd {
        #[arg(long)]
        index: Option<usize>,
        #[arg(long, default_value_t = 8)]
        top: usize,
        #[arg(long, default_value_t = 32)]
        max_patches: usize,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Per-stage inference latency and sequence-length arithmetic.
    Bench {
        #[arg(long, default_value_t = 20)]
        runs: usize,
        /// Report the sequence length for this `HxW` input instead of timing.
        #[arg(long)]
        resolution: Option<String>,
    },
    /// Finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        configs: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Retrieval,
    ColorQa,
    Paired,
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Usage(format!("--{flag} is required")))
}

fn load_config(common: &Common, fallback: Option<&str>) -> Result<TrainConfig> {
    let mut cfg = match (&common.config, fallback) {
        (Some(p), _) => TrainConfig::parse(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        (None, Some(text)) => TrainConfig::parse(text)?,
        (None, None) => TrainConfig::toy(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_split(common: &Common, split: &str) -> Result<Vec<CaptionedImage>> {
    data::load(&data::split_dir(need(&common.data, "data")?, split))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn out_dir(common: &Common) -> Result<&Path> {
    let out = need(&common.out, "out")?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    Ok(out)
}

fn parse_resolution(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Usage(format!("resolution must look like 600x1000, got {s:?}"));
    let (h, w) = s.split_once('x').ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

/// Exit code of a failed numeric check.
const NUMERIC_ABORT: u8 = 3;

fn run(cli: Cli) -> Result<u8> {
    let common = &cli.common;
    match cli.command {
        Command::GenData { train, val, test } => {
            let out = out_dir(common)?;
            let seed = common.seed.unwrap_or(0);
            for (name, split) in data::generate_splits(seed, SplitSizes { train, val, test })? {
                data::save(&split, &data::split_dir(out, name))?;
                println!("{name}\t{}", split.len());
            }
        }
        Command::Pretrain => {
            let data = load_split(common, "train")?;
            let out = out_dir(common)?;
            let resume = common.ckpt.as_deref();
            let cfg = load_config(common, None)?;
            let summary = pretrain(cfg, data, out, resume)?;
            if let Some(last) = summary.history.last() {
                println!("{}", vislang::trainer::CSV_HEADER);
                println!("{}", last.csv_row());
            }
        }
        Command::Finetune {
            task,
            use_vd,
            samples,
            batch,
        } => {
            let ck = Checkpoint::load(need(&common.ckpt, "ckpt")?)?;
            let mut cfg = load_config(common, Some(&ck.config))?;
            if let Some(v) = use_vd {
                cfg.ft_use_vd = v;
            }
            let mut model = model_from_checkpoint(&ck)?;
            let train = load_split(common, "train")?;
            let out = out_dir(common)?;
            let losses = match task {
                Task::Retrieval => {
                    let n = cfg.ft_train_images.min(train.len());
                    let losses = finetune_retrieval(&mut model, &cfg, &train[..n])?;
                    let test = load_split(common, "test")?;
                    write(&out.join("retrieval.tsv"), &eval_retrieval(&model, &test, cfg.ft_use_vd)?.to_tsv())?;
                    losses
                }
                Task::ColorQa | Task::Paired => {
                    let (examples, mode, n_classes) = classify_examples(task, &train, samples, cfg.seed)?;
                    let (head, losses) = finetune_classify(&mut model, &cfg, &train, &examples, mode, n_classes, batch)?;
                    let acc = head.accuracy(&model, &train, &examples, cfg.ft_use_vd)?;
                    write(&out.join("classify.tsv"), &format!("metric\tvalue\ntrain_accuracy\t{acc:.4}\n"))?;
                    losses
                }
            };
            let mut log = String::from("epoch,loss\n");
            for (e, l) in losses.iter().enumerate() {
                log.push_str(&format!("{e},{l}\n"));
            }
            write(&out.join("finetune.csv"), &log)?;
            model_checkpoint(&model, &cfg).save(&out.join("finetuned.ckpt"))?;
            print!("{log}");
        }
        Command::Eval { split, use_vd } => {
            let ck = Checkpoint::load(need(&common.ckpt, "ckpt")?)?;
            let cfg = load_config(common, Some(&ck.config))?;
            let model = model_from_checkpoint(&ck)?;
            let set = load_split(common, &split)?;
            let report = eval_retrieval(&model, &set, use_vd.unwrap_or(cfg.ft_use_vd))?;
            let tsv = report.to_tsv();
            if let Some(out) = &common.out {
                fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
                write(&out.join("eval.tsv"), &tsv)?;
            }
            print!("{tsv}");
        }
        Command::InspectVd {
            index,
            top,
            max_patches,
            split,
        } => {
            let ck = Checkpoint::load(need(&common.ckpt, "ckpt")?)?;
            let model = model_from_checkpoint(&ck)?;
            let set = load_split(common, &split)?;
            let out = out_dir(common)?;
            for s in inspect_vd(&model, &set, index, top, max_patches, out)? {
                let dom = s.dominant.map_or("background", |c| c.name());
                println!("{}\t{}\t{}\t{:.3}\t{dom}", s.index, s.count, s.patches, s.purity);
            }
        }
        Command::Bench { runs, resolution } => {
            let report = match resolution {
                Some(r) => {
                    let (h, w) = parse_resolution(&r)?;
                    let cfg = load_config(common, None)?;
                    BenchReport::layout(h, w, cfg.s, cfg.max_len)
                }
                None => {
                    let ck = Checkpoint::load(need(&common.ckpt, "ckpt")?)?;
                    let model = model_from_checkpoint(&ck)?;
                    let image = match &common.data {
                        Some(_) => load_split(common, "test")?
                            .into_iter()
                            .next()
                            .ok_or_else(|| Error::Data("test split is empty".into()))?
                            .image,
                        None => data::generate(0, 0, 1)?.remove(0).image,
                    };
                    bench(&model, &image, runs)?
                }
            };
            print!("{}", report.to_tsv());
        }
        Command::Gradcheck { configs } => {
            let report = run_suite(configs, common.seed.unwrap_or(0))?;
            print!("{}", report.to_tsv());
            println!("seconds\t{:.1}", report.seconds);
            if !report.passed() {
                eprintln!("error: gradient check failed");
                return Ok(NUMERIC_ABORT);
            }
        }
    }
    Ok(0)
}

fn classify_examples(
    task: Task,
    train: &[CaptionedImage],
    samples: usize,
    seed: u64,
) -> Result<(Vec<ClassifyExample>, ClassifyMode, usize)> {
    match task {
        Task::ColorQa => {
            let ex = data::color_questions(train)
                .into_iter()
                .map(|q| ClassifyExample {
                    images: vec![q.image],
                    text: q.question,
                    label: q.answer,
                })
                .collect();
            Ok((ex, ClassifyMode::Single, data::Color::ALL.len()))
        }
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ex = data::paired_samples(train, samples, &mut rng)?
                .into_iter()
                .map(|p| ClassifyExample {
                    images: vec![p.left, p.right],
                    text: p.caption,
                    label: p.label,
                })
                .collect();
            Ok((ex, ClassifyMode::Paired, 4))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
