//! `stf`: synthesize data, train, evaluate, fuse, export focus, transfer.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stf_core::checkpoint::Checkpoint;
use stf_core::config::ConfigMap;
use stf_core::data::{generate_synthetic, Dataset, DatasetManifest, Split, SyntheticSpec};
use stf_core::focus::{grad_cam, project_focus};
use stf_core::train::{evaluate, train, transfer_head, MetricsRecord, TrainConfig, FOCUS_MODULE, METRICS_HEADER};
use stf_core::{Model, NetworkConfig, Result, SkeletonGraph, StfError, Tape};

#[derive(Parser, Debug)]
#[command(name = "stf", version, about = "Spatio-temporal focus graph networks for skeleton actions")]
struct Cli {
    /// key=value configuration file; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Keep this stratified fraction of the training split.
    #[arg(long, global = true)]
    subsample_fraction: Option<f64>,
    /// Extra key=value overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset from a spec file.
    Synth,
    /// Train the baseline and the focus-guided branches.
    Train {
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate one checkpoint, or several fused by probability averaging.
    Eval {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Write fused per-sequence probabilities of several checkpoints.
    Fuse {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Export focus maps of listed sequences as CSV and SVG.
    Focus {
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Sequence names (file stems); every sequence of the split when empty.
        sequences: Vec<String>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = FOCUS_MODULE)]
        module: usize,
        /// Class to explain; the predicted class when omitted.
        #[arg(long)]
        class: Option<usize>,
        /// Resample to input resolution before export.
        #[arg(long)]
        input_resolution: bool,
    },
    /// Replace the classifier head and train it on a new dataset.
    Transfer {
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

/// Config file, then dedicated flags, then `--set` overrides.
fn load_config(cli: &Cli) -> Result<ConfigMap> {
    let mut c = match &cli.config {
        Some(p) => ConfigMap::load(p)?,
        None => ConfigMap::new(),
    };
    if let Some(s) = cli.seed {
        c.set("seed", s);
    }
    if let Some(p) = cli.subsample_fraction {
        c.set("data.subsample_fraction", p);
    }
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| StfError::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        c.set(k.trim(), v.trim());
    }
    Ok(c)
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| StfError::Io { path: dir.clone(), source: e })?;
    Ok(dir)
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_data(manifest_path: &Path) -> Result<(DatasetManifest, Dataset, SkeletonGraph)> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let base = base_dir(manifest_path);
    let graph = match &manifest.graph {
        Some(g) => SkeletonGraph::load(&base.join(g))?,
        None => SkeletonGraph::default_skeleton(),
    };
    let dataset = Dataset::load(&manifest, &base)?;
    Ok((manifest, dataset, graph))
}

fn print_progress(r: &MetricsRecord) {
    let iou = r.focus_iou.map(|v| format!(" iou={v:.3}")).unwrap_or_default();
    let ce = r.losses[0].map(|v| format!(" ce={v:.4}")).unwrap_or_default();
    eprintln!(
        "phase {} {:<8} epoch {:>3} {:<5} top1={:.4}{ce}{iou} masked={:.4} ({:.1}s)",
        r.phase,
        r.branch,
        r.epoch,
        r.split.as_str(),
        r.top1,
        r.masked_prob,
        r.seconds
    );
}

fn load_models(paths: &[PathBuf]) -> Result<Vec<Model>> {
    paths.iter().map(|p| Checkpoint::load(p).map(|c| c.model)).collect()
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Synth => {
            let spec = SyntheticSpec::from_config(&cfg, None)?;
            let data = generate_synthetic(
                &spec,
                cfg.parsed_or("train_per_class", 200)?,
                cfg.parsed_or("test_per_class", 100)?,
                cfg.parsed_or("seed", 7)?,
            )?;
            let path = data.write(&spec, &out_dir(&cli)?)?;
            println!("{}", path.display());
        }
        Command::Train { data } => {
            let (manifest, dataset, graph) = load_data(data)?;
            let mut net = NetworkConfig::from_config(&cfg)?;
            net.classes = manifest.classes;
            let tc = TrainConfig::from_config(&cfg)?;
            let out = out_dir(&cli)?;
            let mut used = cfg.clone();
            used.merge(&net.to_config());
            used.merge(&tc.to_config());
            let p = out.join("train.cfg");
            std::fs::write(&p, used.to_text()).map_err(|e| StfError::Io { path: p, source: e })?;
            let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
            let model = Model::init(net, graph, &mut rng)?;
            let result = train(model, &dataset, &tc, Some(&out), &mut print_progress)?;
            if let Some(last) = result.records.last() {
                println!("{METRICS_HEADER}\n{}", last.to_csv());
            }
        }
        Command::Eval {
            checkpoints,
            data,
            split,
        } => {
            let (_, dataset, _) = load_data(data)?;
            let models = load_models(checkpoints)?;
            let refs: Vec<&Model> = models.iter().collect();
            let threshold = cfg.parsed_or("eval.iou_threshold", 0.5)?;
            let r = evaluate(&refs, &dataset.split(*split), threshold, cfg.parsed_or("train.threads", 0)?)?;
            println!("split={} samples={}", split.as_str(), r.predictions.len());
            println!("top1={}", r.top1);
            let per: Vec<String> = r.per_class.iter().map(|v| v.to_string()).collect();
            println!("per_class={}", per.join(";"));
            if let Some(iou) = r.focus_iou {
                println!("focus_iou={iou}");
            }
            println!("masked_prob={}", r.masked_prob);
        }
        Command::Fuse {
            checkpoints,
            data,
            split,
        } => {
            let (manifest, dataset, _) = load_data(data)?;
            let models = load_models(checkpoints)?;
            let refs: Vec<&Model> = models.iter().collect();
            let samples = dataset.split(*split);
            let r = evaluate(&refs, &samples, cfg.parsed_or("eval.iou_threshold", 0.5)?, cfg.parsed_or("train.threads", 0)?)?;
            let names: Vec<String> = manifest
                .entries
                .iter()
                .filter(|e| e.split == *split)
                .map(|e| e.path.file_stem().unwrap_or_default().to_string_lossy().into_owned())
                .collect();
            let mut text = String::from("sequence,label,predicted,probs\n");
            for (((name, s), p), probs) in names.iter().zip(&samples).zip(&r.predictions).zip(&r.probs) {
                let probs: Vec<String> = probs.iter().map(|v| v.to_string()).collect();
                text.push_str(&format!("{name},{},{p},{}\n", s.seq.label, probs.join(";")));
            }
            let path = out_dir(&cli)?.join("fused.csv");
            std::fs::write(&path, text).map_err(|e| StfError::Io { path: path.clone(), source: e })?;
            println!("top1={} -> {}", r.top1, path.display());
        }
        Command::Focus {
            checkpoint,
            data,
            sequences,
            split,
            module,
            class,
            input_resolution,
        } => {
            let (manifest, dataset, _) = load_data(data)?;
            let model = Checkpoint::load(checkpoint)?.model;
            let out = out_dir(&cli)?;
            let mut written = 0;
            for (entry, sample) in manifest.entries.iter().zip(&dataset.samples) {
                let name = entry.path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                let wanted = if sequences.is_empty() {
                    entry.split == *split
                } else {
                    sequences.contains(&name)
                };
                if !wanted {
                    continue;
                }
                let mut tape = Tape::new();
                let bound = model.bind_with(&mut tape, |_| false);
                let x = tape.leaf(sample.seq.data.clone());
                let trace = model.forward(&mut tape, &bound, x)?;
                let y = class.unwrap_or_else(|| trace.predicted(&tape));
                let mut q = grad_cam(&mut tape, &trace, *module, y)?;
                if *input_resolution {
                    q = project_focus(&q, sample.seq.frames())?;
                }
                q.write_csv(&out.join(format!("{name}.focus.csv")))?;
                q.write_svg(&out.join(format!("{name}.focus.svg")))?;
                written += 1;
            }
            if written == 0 {
                return Err(StfError::InvalidArgument("no matching sequences".into()));
            }
            println!("wrote {written} focus maps to {}", out.display());
        }
        Command::Transfer { checkpoint, data } => {
            let (manifest, dataset, _) = load_data(data)?;
            let source = Checkpoint::load(checkpoint)?.model;
            let tc = TrainConfig::from_config(&cfg)?;
            let out = out_dir(&cli)?;
            let (_, records) = transfer_head(&source, manifest.classes, &dataset, &tc, Some(&out), &mut print_progress)?;
            if let Some(last) = records.last() {
                println!("{METRICS_HEADER}\n{}", last.to_csv());
            }
        }
    }
    Ok(())
}
