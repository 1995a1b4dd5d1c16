use std::fs;
use std::path::{Path, PathBuf};

use nvk_core::checkpoint;
use nvk_core::data::dataset::{
    stratified_split, LabeledDataset, Split, SplitManifest, SplitRatios,
};
use nvk_core::data::{image, synth};
use nvk_core::dino::trainer::backbone_weights;
use nvk_core::dino::{DinoState, Trainer};
use nvk_core::eval::{
    evaluate, finetune, linear_probe, positive_class, write_epoch_metrics, Classifier,
    LabeledImages, Mode, ProbeOutcome, Results, TaskData,
};
use nvk_core::viz::{attention_overlay, OverlayStyle};
use nvk_core::{par, rng, Error, ParamStore, Result};

use crate::config::{RunConfig, RESOLVED_NAME};
use crate::manifest::RunManifest;
use crate::{
    Cli, Command, DataArgs, EvaluateArgs, PretrainArgs, SplitArgs, SynthArgs, TaskArgs,
    VisualizeArgs,
};

/// Classifier checkpoint written by finetune and probe.
pub const MODEL_NAME: &str = "model.nvk";
pub const RESULTS_NAME: &str = "results.json";
pub const METRICS_NAME: &str = "metrics.csv";
pub const SPLITS_NAME: &str = "splits.csv";

pub fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    if let Some(w) = g.workers {
        if !par::set_workers(w) {
            log::warn!("--workers {w} ignored: worker pool already initialized");
        }
    }
    let ckpt = match &cli.command {
        Command::Finetune(a) | Command::Probe(a) => a.ckpt.as_deref(),
        Command::Evaluate(a) => Some(a.ckpt.as_path()),
        Command::Visualize(a) => Some(a.ckpt.as_path()),
        Command::Pretrain(a) => a.resume.as_deref(),
        Command::Split(_) | Command::SynthData(_) => None,
    };
    let mut cfg = RunConfig::resolve(g.config.as_deref(), ckpt)?;
    if let Some(seed) = g.seed {
        cfg.set_seed(seed);
    }
    fs::create_dir_all(&g.out).map_err(|e| Error::io(&g.out, e))?;
    let out = g.out.as_path();
    match cli.command {
        Command::Pretrain(a) => pretrain(cfg, &a, out),
        Command::Finetune(a) => train_task(cfg, Mode::Finetune, &a, out),
        Command::Probe(a) => train_task(cfg, Mode::LinearProbe, &a, out),
        Command::Evaluate(a) => evaluate_cmd(cfg, &a, out),
        Command::Visualize(a) => visualize(cfg, &a, out),
        Command::Split(a) => split(cfg, &a, out),
        Command::SynthData(a) => synth_data(cfg, &a, out),
    }
}

/// Saves the resolved config and writes the run manifest over `artifacts`.
fn finish(
    command: &str,
    cfg: &RunConfig,
    seed: u64,
    out: &Path,
    artifacts: Vec<PathBuf>,
) -> Result<()> {
    let resolved = out.join(RESOLVED_NAME);
    fs::write(&resolved, cfg.to_toml()?).map_err(|e| Error::io(&resolved, e))?;
    let mut manifest = RunManifest::new(command, cfg.hash()?, seed);
    manifest.add_all(out, artifacts)?;
    manifest.add(out, &resolved)?;
    let path = manifest.write(out)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn pretrain(mut cfg: RunConfig, args: &PretrainArgs, out: &Path) -> Result<()> {
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    let model = cfg.model()?.clone();
    let list = args
        .images
        .clone()
        .or_else(|| cfg.data.images.clone())
        .ok_or_else(|| Error::Config("pretraining needs --images or data.images".into()))?;
    let paths = synth::read_image_list(&list)?;
    log::info!("loading {} images from {}", paths.len(), list.display());
    let images = paths.iter().map(image::load).collect::<Result<Vec<_>>>()?;

    let mut state = match (&args.resume, &args.init) {
        (Some(path), _) => DinoState::from_checkpoint(
            &checkpoint::load(path)?,
            model,
            cfg.head.clone(),
            &cfg.train,
        )?,
        (None, Some(path)) => {
            let weights = backbone_weights(&checkpoint::load(path)?, &model)?;
            DinoState::from_student(model, cfg.head.clone(), weights, &cfg.train)?
        }
        (None, None) => DinoState::init(model, cfg.head.clone(), &cfg.train)?,
    };
    let mut trainer = Trainer::new(&cfg.train, &images)?;
    let mut artifacts = trainer.run(&mut state, out)?;
    artifacts.push(out.join("train_log.csv"));
    artifacts.push(out.join("epochs.csv"));
    let seed = cfg.train.seed;
    finish("pretrain", &cfg, seed, out, artifacts)
}

struct Labeled {
    dataset: LabeledDataset,
    splits: SplitManifest,
    task: String,
}

/// Resolves labels, splits and task from flags then config. Missing splits are
/// generated with the default ratios and saved into `out`.
fn labeled_data(
    cfg: &RunConfig,
    args: &DataArgs,
    out: &Path,
) -> Result<(Labeled, Option<PathBuf>)> {
    let labels = args
        .labels
        .clone()
        .or_else(|| cfg.data.labels.clone())
        .ok_or_else(|| Error::Config("needs --labels or data.labels".into()))?;
    let dataset = LabeledDataset::read_manifest(&labels)?;
    let task = match args.task.clone().or_else(|| cfg.data.task.clone()) {
        Some(t) => t,
        None if dataset.alphabets.len() == 1 => {
            dataset.alphabets.keys().next().cloned().unwrap_or_default()
        }
        None => return Err(Error::Config("needs --task or data.task".into())),
    };
    let (splits, written) = match args.splits.clone().or_else(|| cfg.data.splits.clone()) {
        Some(path) => (SplitManifest::read(&path)?, None),
        None => {
            let m = stratified_split(&dataset, &task, &SplitRatios::DEFAULT, cfg.eval.seed)?;
            let path = out.join(SPLITS_NAME);
            m.write(&path)?;
            (m, Some(path))
        }
    };
    Ok((
        Labeled {
            dataset,
            splits,
            task,
        },
        written,
    ))
}

fn train_task(mut cfg: RunConfig, mode: Mode, args: &TaskArgs, out: &Path) -> Result<()> {
    cfg.eval.mode = mode;
    if let Some(e) = args.epochs {
        cfg.eval.epochs = e;
    }
    if let Some(v) = args.voting {
        cfg.eval.voting = v;
    }
    let model = cfg.model()?.clone();
    let (labeled, split_file) = labeled_data(&cfg, &args.data, out)?;
    let data = TaskData::load(&labeled.dataset, &labeled.splits, &labeled.task)?;
    let store = match &args.ckpt {
        Some(p) => checkpoint::load(p)?,
        None => {
            log::warn!("no --ckpt given; starting from a random backbone");
            model.init(&mut rng::seeded(rng::derive_seed(cfg.eval.seed, 0xB0)))?
        }
    };
    let outcome: ProbeOutcome = match mode {
        Mode::Finetune => finetune(&model, &store, &data, &cfg.eval)?,
        Mode::LinearProbe => linear_probe(&model, &store, &data, &cfg.eval)?,
    };
    let mut params = match mode {
        Mode::Finetune => ParamStore::new(),
        Mode::LinearProbe => backbone_weights(&store, &model)?,
    };
    params.extend(outcome.params);
    let model_path = out.join(MODEL_NAME);
    checkpoint::save(&params, &model_path)?;

    let metrics = out.join(METRICS_NAME);
    write_epoch_metrics(&metrics, &outcome.history)?;
    let ckpt_name = args
        .ckpt
        .as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default();
    let results = Results::new(
        &labeled.task,
        mode.as_str(),
        &outcome.report,
        cfg.eval.seed,
        &ckpt_name,
    );
    let results_path = out.join(RESULTS_NAME);
    results.write(&results_path)?;
    log::info!(
        "{} {}: test acc {:.4}, bacc {:.4}, f1 {:.4}",
        mode.as_str(),
        labeled.task,
        results.acc,
        results.bacc,
        results.f1
    );
    let mut artifacts = vec![model_path, metrics, results_path];
    artifacts.extend(split_file);
    let seed = cfg.eval.seed;
    finish(mode.as_str(), &cfg, seed, out, artifacts)
}

fn evaluate_cmd(mut cfg: RunConfig, args: &EvaluateArgs, out: &Path) -> Result<()> {
    if let Some(v) = args.voting {
        cfg.eval.voting = v;
    }
    let model = cfg.model()?.clone();
    let (labeled, split_file) = labeled_data(&cfg, &args.data, out)?;
    let test = LabeledImages::load(
        &labeled.dataset,
        &labeled.splits,
        &labeled.task,
        Split::Test,
    )?;
    if test.is_empty() {
        return Err(Error::Contract(format!(
            "no test images labeled for {}",
            labeled.task
        )));
    }
    let positive = positive_class(labeled.dataset.alphabet(&labeled.task)?);
    let classifier = Classifier::new(model, checkpoint::load(&args.ckpt)?)?;
    let report = evaluate(&classifier, &test, cfg.eval.voting, cfg.eval.crop, positive)?;
    let results = Results::new(
        &labeled.task,
        &cfg.eval.voting.to_string(),
        &report,
        cfg.eval.seed,
        &args.ckpt.display().to_string(),
    );
    let results_path = out.join(RESULTS_NAME);
    results.write(&results_path)?;
    log::info!(
        "{} ({}): acc {:.4}, bacc {:.4}, f1 {:.4}",
        labeled.task,
        cfg.eval.voting,
        results.acc,
        results.bacc,
        results.f1
    );
    let mut artifacts = vec![results_path];
    artifacts.extend(split_file);
    let seed = cfg.eval.seed;
    finish("evaluate", &cfg, seed, out, artifacts)
}

fn visualize(cfg: RunConfig, args: &VisualizeArgs, out: &Path) -> Result<()> {
    let model = cfg.model()?.clone();
    let params = backbone_weights(&checkpoint::load(&args.ckpt)?, &model)?;
    let img = image::load(&args.image)?;
    let overlay = attention_overlay(&model, &params, &img, args.layer, args.q)?;
    let stem = args
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let written = overlay.write(out, &stem, &OverlayStyle::default())?;
    log::info!(
        "layer {} overlay written to {}",
        overlay.layer,
        written[0].display()
    );
    finish("visualize", &cfg, cfg.eval.seed, out, written.to_vec())
}

fn split(cfg: RunConfig, args: &SplitArgs, out: &Path) -> Result<()> {
    let ratios = SplitRatios::parse(&args.ratios)?;
    let dataset = match args.labels.clone().or_else(|| cfg.data.labels.clone()) {
        Some(path) => LabeledDataset::read_manifest(&path)?,
        None => synth::benchmark_dataset(&args.task)?,
    };
    let seed = cfg.eval.seed;
    let m = stratified_split(&dataset, &args.task, &ratios, seed)?;
    let path = out.join(SPLITS_NAME);
    m.write(&path)?;
    let counts = Split::ALL.map(|s| format!("{s} {}", m.count(s)));
    log::info!("{}: {}", args.task, counts.join(", "));
    finish("split", &cfg, seed, out, vec![path])
}

fn synth_data(cfg: RunConfig, args: &SynthArgs, out: &Path) -> Result<()> {
    let spec = synth::CorpusSpec {
        kind: args.kind,
        count: args.count,
        size: args.size,
        positive_rate: args.positive_rate,
        seed: cfg.eval.seed,
    };
    let ds = synth::write_corpus(out, &spec)?;
    let mut artifacts: Vec<PathBuf> = ds.records.iter().map(|r| out.join(&r.path)).collect();
    for list in ["labels.csv", "images.csv"] {
        if out.join(list).exists() {
            artifacts.push(out.join(list));
        }
    }
    log::info!("wrote {} images to {}", ds.len(), out.display());
    finish("synth-data", &cfg, spec.seed, out, artifacts)
}
