use std::path::{Path, PathBuf};

use clap::Args;
use tas_core::config::RunConfig;
use tas_core::data::{
    labels_to_text, load_checkpoint, load_features, load_labels, load_probabilities,
    load_transcript, save_labels, save_probabilities, synth_generate, ClassMap, Dataset, Video,
};
use tas_core::metrics::{CorpusMetrics, MetricReport};
use tas_core::model::Model;
use tas_core::trainer::{align_probabilities, evaluate, predict, LogProgress};
use tas_core::{Error, Result};

use crate::ConfigArgs;

fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    let mut run = RunConfig::preset(&args.preset)?;
    if let Some(path) = &args.config {
        run.apply_file(path)?;
    }
    for o in &args.overrides {
        run.set_override(o)?;
    }
    if let Some(seed) = args.seed {
        run.set("train.seed", &seed.to_string())?;
        run.set("synth.seed", &seed.to_string())?;
    }
    Ok(run)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io(path, e))
}

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn report_text(report: &MetricReport, fallbacks: Option<usize>) -> String {
    let mut s = report.to_text();
    s.push('\n');
    s.push_str(&report.to_key_values());
    if let Some(n) = fallbacks {
        s.push_str(&format!("fallbacks={n}\n"));
    }
    s
}

pub fn synth(args: &ConfigArgs, out: Option<PathBuf>) -> Result<()> {
    let run = resolve(args)?;
    run.synth.validate()?;
    let root = out.unwrap_or_else(|| run.data.root.clone());
    let data = synth_generate(&run.synth)?.to_dataset()?;
    data.write(&root)?;
    log::info!(
        "wrote {} train and {} val videos to {}",
        data.train.len(),
        data.val.len(),
        root.display()
    );
    Ok(())
}

pub fn train(args: &ConfigArgs, data_root: Option<PathBuf>, out: &Path) -> Result<()> {
    let mut run = resolve(args)?;
    if let Some(root) = data_root {
        run.set("data.root", &root.display().to_string())?;
    }
    let data = Dataset::load(&run.data.root, run.data.strict_lengths)?;
    if !run.was_set("model.num_classes") {
        run.set("model.num_classes", &data.num_classes().to_string())?;
    }
    if let (false, Some(d)) = (run.was_set("model.feature_dim"), data.feature_dim()) {
        run.set("model.feature_dim", &d.to_string())?;
    }
    run.validate()?;
    std::fs::create_dir_all(out).map_err(|e| io(out, e))?;
    write(&out.join("config.txt"), &run.to_text())?;
    data.classes.save(&out.join("mapping.txt"))?;

    let mut model = Model::<f32>::new(run.model.clone(), run.train.seed)?;
    let state = tas_core::trainer::train(&mut model, &data, &run, Some(out), &mut LogProgress)?;
    if let Some(best) = &state.best_accuracy {
        log::info!(
            "best validation accuracy {:.2} at phase-1 epoch {}",
            best.value,
            best.epoch
        );
    }
    if let Some(best) = &state.best_edit {
        log::info!(
            "best transcript Edit {:.2} at phase-2 epoch {}",
            best.value,
            best.epoch
        );
    }
    let eval = evaluate(&model, &data.val, true, run.data.ignore_class)?;
    let text = report_text(&eval.report, Some(eval.fallbacks));
    write(&out.join("eval_val.txt"), &text)?;
    print!("{text}");
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint directory to score on a dataset split.
    #[arg(long, conflicts_with_all = ["pred", "gt"])]
    checkpoint: Option<PathBuf>,
    /// Dataset root (default: the checkpoint's data.root).
    #[arg(long, requires = "checkpoint")]
    data: Option<PathBuf>,
    #[arg(long, default_value = "val", requires = "checkpoint")]
    split: String,
    /// Score Viterbi-fused labels instead of raw argmax frames.
    #[arg(long, requires = "checkpoint")]
    viterbi: bool,
    /// Write each video's scored labels to `<dir>/<id>.txt`.
    #[arg(long, requires = "checkpoint")]
    labels_dir: Option<PathBuf>,
    /// Predicted label files (repeatable, paired in order with `--gt`).
    #[arg(long, requires_all = ["gt", "mapping"])]
    pred: Vec<PathBuf>,
    #[arg(long)]
    gt: Vec<PathBuf>,
    /// Class map for label-file mode (checkpoint mode reads the dataset's).
    #[arg(long)]
    mapping: Option<PathBuf>,
    /// Class id excluded from scoring.
    #[arg(long)]
    ignore_class: Option<usize>,
    /// Report file (default in checkpoint mode: `<checkpoint>/eval_<split>[_viterbi].txt`).
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let (text, default_out) = match &args.checkpoint {
        Some(ckpt) => eval_checkpoint(args, ckpt)?,
        None => (eval_files(args)?, None),
    };
    print!("{text}");
    if let Some(path) = args.out.clone().or(default_out) {
        write(&path, &text)?;
    }
    Ok(())
}

fn eval_checkpoint(args: &EvalArgs, ckpt: &Path) -> Result<(String, Option<PathBuf>)> {
    let (model, meta) = load_checkpoint::<f32>(ckpt)?;
    let lookup = |key: &str| {
        meta.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.clone())
    };
    let root = match &args.data {
        Some(root) => root.clone(),
        None => lookup("data.root")
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config("checkpoint has no data.root; pass --data".into()))?,
    };
    let strict = lookup("data.strict_lengths").is_none_or(|v| v == "true");
    let data = Dataset::load(&root, strict)?;
    let videos: &[Video] = match args.split.as_str() {
        "train" => &data.train,
        "val" => &data.val,
        other => {
            return Err(Error::Config(format!(
                "unknown split {other:?}; expected train or val"
            )))
        }
    };
    let ignore = match args.ignore_class {
        Some(c) => Some(c),
        None => lookup("data.ignore_class").and_then(|v| v.parse().ok()),
    };
    let eval = evaluate(&model, videos, args.viterbi, ignore)?;
    if let Some(dir) = &args.labels_dir {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        for p in &eval.predictions {
            let labels = if args.viterbi {
                &p.fused_labels
            } else {
                &p.raw_labels
            };
            save_labels(&dir.join(format!("{}.txt", p.id)), labels, &data.classes)?;
        }
    }
    let mut text = report_text(&eval.report, args.viterbi.then_some(eval.fallbacks));
    text.push_str(&format!("transcript_edit={}\n", eval.transcript_edit));
    let suffix = if args.viterbi { "_viterbi" } else { "" };
    Ok((
        text,
        Some(ckpt.join(format!("eval_{}{suffix}.txt", args.split))),
    ))
}

fn eval_files(args: &EvalArgs) -> Result<String> {
    let Some(mapping) = &args.mapping else {
        return Err(Error::Config(
            "eval needs --checkpoint or --pred/--gt/--mapping".into(),
        ));
    };
    if args.pred.is_empty() || args.pred.len() != args.gt.len() {
        return Err(Error::Config(format!(
            "--pred and --gt must pair up ({} vs {} files)",
            args.pred.len(),
            args.gt.len()
        )));
    }
    let classes = ClassMap::load(mapping)?;
    let mut corpus = CorpusMetrics::new(args.ignore_class);
    for (p, g) in args.pred.iter().zip(&args.gt) {
        let pred = load_labels(p, &classes)?;
        let gt = load_labels(g, &classes)?;
        if pred.len() != gt.len() {
            return Err(Error::LengthMismatch {
                path: p.clone(),
                labels: pred.len(),
                frames: gt.len(),
            });
        }
        corpus.add_video(&pred, &gt)?;
    }
    Ok(report_text(&corpus.report(), None))
}

pub fn align(probs: &Path, transcript: &Path, mapping: &Path, out: &Path) -> Result<()> {
    let classes = ClassMap::load(mapping)?;
    let p = load_probabilities(probs)?;
    if p.cols() != classes.len() {
        return Err(Error::Parse {
            path: probs.to_path_buf(),
            line: 1,
            msg: format!(
                "{} columns but the class map has {} classes",
                p.cols(),
                classes.len()
            ),
        });
    }
    let t = load_transcript(transcript, &classes)?;
    let labels = align_probabilities(&p, &t).map_err(|e| match e {
        Error::EmptyTranscript => Error::Parse {
            path: transcript.to_path_buf(),
            line: 1,
            msg: "empty transcript".into(),
        },
        other => other,
    })?;
    write(out, &labels_to_text(&labels, &classes))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn infer(checkpoint: &Path, features: &Path, mapping: &Path, prefix: &Path) -> Result<()> {
    let (model, _) = load_checkpoint::<f32>(checkpoint)?;
    let classes = ClassMap::load(mapping)?;
    if classes.len() != model.config.num_classes {
        return Err(Error::Incompatible(format!(
            "class map has {} classes, checkpoint {}",
            classes.len(),
            model.config.num_classes
        )));
    }
    let x = load_features(features)?;
    let id = features
        .file_stem()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let pred = predict(&model, &id, &x)?;
    if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    save_probabilities(&with_suffix(prefix, ".probs.txt"), &pred.probabilities)?;
    let names: Vec<&str> = pred.transcript.iter().map(|&c| classes.name(c)).collect();
    write(
        &with_suffix(prefix, ".transcript.txt"),
        &(names.join("\n") + "\n"),
    )?;
    save_labels(
        &with_suffix(prefix, ".labels.txt"),
        &pred.fused_labels,
        &classes,
    )?;
    if !pred.end_found {
        log::warn!("{id}: no End token decoded");
    }
    if pred.fell_back {
        log::warn!("{id}: alignment fell back to raw frame labels");
    }
    log::info!(
        "{id}: {} frames, {} transcript entries",
        x.rows(),
        pred.transcript.len()
    );
    Ok(())
}
