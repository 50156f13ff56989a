//! Two-phase decoupled training and evaluation.

use std::path::{Path, PathBuf};

use crate::alignment::{collapse, floored_log_probs, viterbi_align};
use crate::config::RunConfig;
use crate::data::{save_checkpoint, CheckpointMeta, Dataset, Video};
use crate::error::{Error, Result};
use crate::metrics::{edit_score, CorpusMetrics, MetricReport};
use crate::model::{decode_transcript, CoarseTranscript, Model};
use crate::objectives::{
    add_gaussian_noise, categorical_label_smooth, loss_total, temporal_label_smooth, LossWeights,
};
use crate::rng::SplitMix64;
use crate::tensor::{adam_step, AdamConfig, AdamState, Scalar, Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Only 1 is supported: videos have different lengths.
    pub batch_size: usize,
    pub loss_weight_identification: f64,
    pub loss_weight_reasoning: f64,
    /// Phase-1 epochs that query the reasoning decoder with ground-truth transcripts.
    pub warmup_epochs: usize,
    pub seed: u64,
    /// Validate every this many epochs (the final epoch is always validated).
    pub eval_every: usize,
    /// Stop a phase after this many validations without improvement; 0 disables.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_phase1: 200,
            epochs_phase2: 100,
            lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 1,
            loss_weight_identification: 0.9,
            loss_weight_reasoning: 0.1,
            warmup_epochs: 50,
            seed: 0,
            eval_every: 1,
            patience: 50,
        }
    }
}

impl TrainConfig {
    /// Desk-scale schedule for the synthetic preset.
    pub fn synthetic() -> Self {
        Self {
            seed: 7,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size != 1 {
            return Err(Error::Config(format!(
                "batch_size must be 1, got {}",
                self.batch_size
            )));
        }
        if self.warmup_epochs > self.epochs_phase1 {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds epochs_phase1 {}",
                self.warmup_epochs, self.epochs_phase1
            )));
        }
        if !(self.lr > 0.0) || self.eval_every == 0 {
            return Err(Error::Config("lr and eval_every must be positive".into()));
        }
        if self.loss_weight_identification < 0.0 || self.loss_weight_reasoning < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Validation scores after one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1 or 2; epoch 0 of phase 2 is the evaluation before any update.
    pub phase: u8,
    pub epoch: usize,
    pub report: MetricReport,
    /// Mean Edit of decoded transcripts against ground-truth transcripts.
    pub transcript_edit: f64,
    /// Mean training losses over the epoch (NaN when no step was taken).
    pub loss_identification: f64,
    pub loss_reasoning: f64,
}

pub const HISTORY_HEADER: &str =
    "phase,epoch,accuracy,edit,f1_10,f1_25,f1_50,transcript_edit,loss_i,loss_t";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let f1 = |t: f64| self.report.f1_at(t);
        format!(
            "{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.6},{:.6}",
            self.phase,
            self.epoch,
            self.report.accuracy,
            self.report.edit,
            f1(0.10),
            f1(0.25),
            f1(0.50),
            self.transcript_edit,
            self.loss_identification,
            self.loss_reasoning
        )
    }
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// A selected checkpoint: the parameter values and where they were saved.
#[derive(Debug, Clone)]
pub struct BestRecord<F> {
    pub epoch: usize,
    pub value: f64,
    pub params: Vec<Tensor<F>>,
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainState<F> {
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub adam: AdamState<F>,
    pub rng: SplitMix64,
    pub best_accuracy: Option<BestRecord<F>>,
    pub best_edit: Option<BestRecord<F>>,
    pub history: Vec<EpochRecord>,
}

impl<F: Scalar> TrainState<F> {
    pub fn new(seed: u64) -> Self {
        Self {
            phase1_epochs: 0,
            phase2_epochs: 0,
            adam: AdamState::new(),
            // decorrelate from the model initialization stream, which uses the same seed
            rng: SplitMix64::new(seed ^ 0x5452_4149_4E00_0000),
            best_accuracy: None,
            best_edit: None,
            history: Vec::new(),
        }
    }
}

/// What one training step did, for instrumentation.
#[derive(Debug)]
pub struct StepInfo<'a> {
    pub phase: u8,
    pub epoch: usize,
    pub video: &'a str,
    pub noise_weight: f64,
    pub gt_transcript: &'a [usize],
    pub query: &'a CoarseTranscript,
    pub used_gt_query: bool,
    pub loss_identification: f64,
    pub loss_reasoning: f64,
}

pub trait TrainObserver {
    fn on_step(&mut self, _info: &StepInfo<'_>) {}
    fn on_epoch(&mut self, _record: &EpochRecord) {}
}

/// Observer that ignores everything.
pub struct Silent;

impl TrainObserver for Silent {}

/// Observer that logs each validation at info level.
pub struct LogProgress;

impl TrainObserver for LogProgress {
    fn on_epoch(&mut self, r: &EpochRecord) {
        log::info!(
            "phase {} epoch {}: acc {:.2} edit {:.2} F1@50 {:.2} transcript-edit {:.2} loss_i {:.4} loss_t {:.4}",
            r.phase,
            r.epoch,
            r.report.accuracy,
            r.report.edit,
            r.report.f1_at(0.5),
            r.transcript_edit,
            r.loss_identification,
            r.loss_reasoning
        );
    }
}

fn snapshot<F: Scalar>(model: &Model<F>) -> Vec<Tensor<F>> {
    model
        .params
        .ids()
        .map(|id| model.params.value(id).clone())
        .collect()
}

/// Copies a snapshot's values back into the model.
pub fn restore<F: Scalar>(model: &mut Model<F>, params: &[Tensor<F>]) {
    let ids: Vec<_> = model.params.ids().collect();
    assert_eq!(ids.len(), params.len(), "snapshot from a different model");
    for (id, t) in ids.into_iter().zip(params) {
        model
            .params
            .value_mut(id)
            .data_mut()
            .copy_from_slice(t.data());
    }
}

fn adam_config(cfg: &TrainConfig) -> AdamConfig {
    AdamConfig {
        lr: cfg.lr,
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
    }
}

fn ground_truth_transcript<F: Scalar>(
    model: &Model<F>,
    labels: &[usize],
    id: &str,
) -> Result<CoarseTranscript> {
    let ids = collapse(labels);
    CoarseTranscript::new(
        ids,
        model.config.num_classes,
        model.config.max_transcript_len,
    )
    .map_err(|e| match e {
        Error::TranscriptTooLong { len, max } => Error::Config(format!(
            "video {id}: transcript needs {len} slots but max_transcript_len is {max}"
        )),
        other => other,
    })
}

fn check_dataset<F: Scalar>(model: &Model<F>, data: &Dataset) -> Result<()> {
    if data.num_classes() != model.config.num_classes {
        return Err(Error::Incompatible(format!(
            "dataset has {} classes, model {}",
            data.num_classes(),
            model.config.num_classes
        )));
    }
    if let Some(d) = data.feature_dim() {
        if d != model.config.feature_dim {
            return Err(Error::Incompatible(format!(
                "dataset features are {d}-d, model expects {}",
                model.config.feature_dim
            )));
        }
    }
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config(
            "training needs nonempty train and val splits".into(),
        ));
    }
    for v in data.videos() {
        ground_truth_transcript(model, &v.labels, &v.id)?;
    }
    Ok(())
}

fn finite_or_abort(step: usize, video: &str, li: f64, lt: f64) -> Result<()> {
    if li.is_finite() && lt.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step,
            video: video.to_string(),
            loss_i: li,
            loss_t: lt,
        })
    }
}

fn save_best<F: Scalar>(
    model: &Model<F>,
    run: &RunConfig,
    out: Option<&Path>,
    name: &str,
    phase: &str,
    epoch: usize,
    metric: (&str, f64),
) -> Result<Option<PathBuf>> {
    let Some(out) = out else { return Ok(None) };
    let dir = out.join(name);
    let meta = CheckpointMeta {
        seed: run.train.seed,
        phase: phase.to_string(),
        extra: vec![
            ("epoch".into(), epoch.to_string()),
            (metric.0.into(), metric.1.to_string()),
        ],
        config: run
            .entries()
            .into_iter()
            .map(|(s, k, v)| (format!("{s}.{k}"), v))
            .collect(),
    };
    save_checkpoint(&dir, model, &meta)?;
    Ok(Some(dir))
}

fn write_history(out: Option<&Path>, history: &[EpochRecord]) -> Result<()> {
    if let Some(out) = out {
        let path = out.join("history.csv");
        std::fs::write(&path, history_csv(history)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn shuffled(n: usize, rng: &mut SplitMix64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.below(i + 1));
    }
    order
}

fn features_as<F: Scalar>(v: &Video) -> Tensor<F> {
    v.features.cast()
}

/// Joint training of identification and reasoning.
///
/// Each step adds `noise.weight_phase1` Gaussian noise to the features,
/// queries the reasoning decoder with the ground-truth transcript during the
/// first `warmup_epochs` epochs and with the coarse transcript afterwards,
/// and takes one Adam step on the weighted loss. After each validation the
/// parameters with the highest frame accuracy are kept (and saved under
/// `out/best_accuracy` when `out` is given). On return the model holds the
/// best-accuracy parameters.
pub fn train_phase1<F: Scalar>(
    model: &mut Model<F>,
    data: &Dataset,
    run: &RunConfig,
    state: &mut TrainState<F>,
    out: Option<&Path>,
    observer: &mut dyn TrainObserver,
) -> Result<()> {
    let cfg = &run.train;
    cfg.validate()?;
    run.smoothing.validate()?;
    run.noise.validate()?;
    check_dataset(model, data)?;
    model.freeze_identification(false);
    let adam = adam_config(cfg);
    let weights = LossWeights {
        identification: cfg.loss_weight_identification,
        reasoning: cfg.loss_weight_reasoning,
    };
    let (classes, sm) = (model.config.num_classes, &run.smoothing);
    let mut stale = 0;
    while state.phase1_epochs < cfg.epochs_phase1 {
        let epoch = state.phase1_epochs + 1;
        let warmup = state.phase1_epochs < cfg.warmup_epochs;
        let (mut sum_i, mut sum_t) = (0.0, 0.0);
        for &vi in &shuffled(data.train.len(), &mut state.rng) {
            let video = &data.train[vi];
            let gt = ground_truth_transcript(model, &video.labels, &video.id)?;
            let noisy = add_gaussian_noise(
                &features_as::<F>(video),
                run.noise.weight_phase1,
                &mut state.rng,
            );
            let mut tape = Tape::training(state.rng.fork());
            let x = tape.constant(noisy);
            let ident = model.forward_identification(&mut tape, x)?;
            let query = if warmup {
                gt.clone()
            } else {
                model.coarse_transcript(tape.value(ident.frame_logits))?
            };
            let keys = model.reasoning_keys(&ident);
            let slots = model.reason(&mut tape, keys, &query, None)?;
            let smoothed = temporal_label_smooth(&video.labels, sm.tls_eps, &mut state.rng);
            let frame_targets = categorical_label_smooth::<F>(&smoothed, sm.cls_alpha_i, classes)?;
            let slot_targets =
                categorical_label_smooth::<F>(&gt.slot_labels(), sm.cls_alpha_t, classes + 1)?;
            let losses = loss_total(
                &mut tape,
                ident.frame_logits,
                &frame_targets,
                slots,
                &slot_targets,
                weights,
            )?;
            let li = tape.value(losses.identification).data()[0].to_f64();
            let lt = tape.value(losses.reasoning).data()[0].to_f64();
            finite_or_abort(state.adam.step as usize + 1, &video.id, li, lt)?;
            observer.on_step(&StepInfo {
                phase: 1,
                epoch,
                video: &video.id,
                noise_weight: run.noise.weight_phase1,
                gt_transcript: gt.ids(),
                query: &query,
                used_gt_query: warmup,
                loss_identification: li,
                loss_reasoning: lt,
            });
            tape.backward(losses.total)?;
            model.params.zero_grad();
            model.params.accumulate(&tape);
            adam_step(&mut model.params, &mut state.adam, &adam)?;
            sum_i += li;
            sum_t += lt;
        }
        model.params.zero_grad();
        state.phase1_epochs = epoch;
        if !epoch.is_multiple_of(cfg.eval_every) && epoch != cfg.epochs_phase1 {
            continue;
        }
        let eval = evaluate(model, &data.val, false, run.data.ignore_class)?;
        let record = EpochRecord {
            phase: 1,
            epoch,
            report: eval.report.clone(),
            transcript_edit: eval.transcript_edit,
            loss_identification: mean(sum_i, data.train.len()),
            loss_reasoning: mean(sum_t, data.train.len()),
        };
        observer.on_epoch(&record);
        state.history.push(record);
        write_history(out, &state.history)?;
        let acc = eval.report.accuracy;
        if state.best_accuracy.as_ref().is_none_or(|b| acc > b.value) {
            let dir = save_best(
                model,
                run,
                out,
                "best_accuracy",
                "phase1",
                epoch,
                ("accuracy", acc),
            )?;
            state.best_accuracy = Some(BestRecord {
                epoch,
                value: acc,
                params: snapshot(model),
                dir,
            });
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience > 0 && stale >= cfg.patience {
                log::info!("phase 1 early stop at epoch {epoch}");
                break;
            }
        }
    }
    if let Some(best) = &state.best_accuracy {
        restore(model, &best.params);
    }
    Ok(())
}

/// Reasoning-only fine-tuning with identification frozen.
///
/// Queries are coarse transcripts recomputed from features noised at
/// `noise.weight_phase2` on every step. Validation Edit is measured on
/// decoded transcripts; the pre-training state is recorded as epoch 0 so
/// the selected Edit never falls below the phase-1 model's. On return the
/// model holds the best-Edit parameters and identification stays frozen.
pub fn train_phase2<F: Scalar>(
    model: &mut Model<F>,
    data: &Dataset,
    run: &RunConfig,
    state: &mut TrainState<F>,
    out: Option<&Path>,
    observer: &mut dyn TrainObserver,
) -> Result<()> {
    let cfg = &run.train;
    cfg.validate()?;
    run.smoothing.validate()?;
    run.noise.validate()?;
    check_dataset(model, data)?;
    model.freeze_identification(true);
    let adam = adam_config(cfg);
    let classes = model.config.num_classes;

    if state.best_edit.is_none() {
        let eval = evaluate(model, &data.val, true, run.data.ignore_class)?;
        let record = EpochRecord {
            phase: 2,
            epoch: 0,
            report: eval.report.clone(),
            transcript_edit: eval.transcript_edit,
            loss_identification: f64::NAN,
            loss_reasoning: f64::NAN,
        };
        observer.on_epoch(&record);
        state.history.push(record);
        let dir = save_best(
            model,
            run,
            out,
            "best_edit",
            "phase2",
            0,
            ("transcript_edit", eval.transcript_edit),
        )?;
        state.best_edit = Some(BestRecord {
            epoch: 0,
            value: eval.transcript_edit,
            params: snapshot(model),
            dir,
        });
        // moments from phase 1 describe a different objective
        state.adam = AdamState::new();
    }

    let mut stale = 0;
    while state.phase2_epochs < cfg.epochs_phase2 {
        let epoch = state.phase2_epochs + 1;
        let mut sum_t = 0.0;
        for &vi in &shuffled(data.train.len(), &mut state.rng) {
            let video = &data.train[vi];
            let gt = ground_truth_transcript(model, &video.labels, &video.id)?;
            let noisy = add_gaussian_noise(
                &features_as::<F>(video),
                run.noise.weight_phase2,
                &mut state.rng,
            );
            let mut tape = Tape::training(state.rng.fork());
            let x = tape.constant(noisy);
            let ident = model.forward_identification(&mut tape, x)?;
            let query = model.coarse_transcript(tape.value(ident.frame_logits))?;
            let keys = model.reasoning_keys(&ident);
            let slots = model.reason(&mut tape, keys, &query, None)?;
            let slot_targets = categorical_label_smooth::<F>(
                &gt.slot_labels(),
                run.smoothing.cls_alpha_t,
                classes + 1,
            )?;
            let supervised = tape.slice_rows(slots, 0, slot_targets.rows())?;
            let loss = tape.cross_entropy_soft(supervised, &slot_targets)?;
            let lt = tape.value(loss).data()[0].to_f64();
            finite_or_abort(state.adam.step as usize + 1, &video.id, 0.0, lt)?;
            observer.on_step(&StepInfo {
                phase: 2,
                epoch,
                video: &video.id,
                noise_weight: run.noise.weight_phase2,
                gt_transcript: gt.ids(),
                query: &query,
                used_gt_query: false,
                loss_identification: f64::NAN,
                loss_reasoning: lt,
            });
            tape.backward(loss)?;
            model.params.zero_grad();
            model.params.accumulate(&tape);
            adam_step(&mut model.params, &mut state.adam, &adam)?;
            sum_t += lt;
        }
        model.params.zero_grad();
        state.phase2_epochs = epoch;
        if !epoch.is_multiple_of(cfg.eval_every) && epoch != cfg.epochs_phase2 {
            continue;
        }
        let eval = evaluate(model, &data.val, true, run.data.ignore_class)?;
        let record = EpochRecord {
            phase: 2,
            epoch,
            report: eval.report.clone(),
            transcript_edit: eval.transcript_edit,
            loss_identification: f64::NAN,
            loss_reasoning: mean(sum_t, data.train.len()),
        };
        observer.on_epoch(&record);
        state.history.push(record);
        write_history(out, &state.history)?;
        let edit = eval.transcript_edit;
        if state.best_edit.as_ref().is_none_or(|b| edit > b.value) {
            let dir = save_best(
                model,
                run,
                out,
                "best_edit",
                "phase2",
                epoch,
                ("transcript_edit", edit),
            )?;
            state.best_edit = Some(BestRecord {
                epoch,
                value: edit,
                params: snapshot(model),
                dir,
            });
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience > 0 && stale >= cfg.patience {
                log::info!("phase 2 early stop at epoch {epoch}");
                break;
            }
        }
    }
    write_history(out, &state.history)?;
    if let Some(best) = &state.best_edit {
        restore(model, &best.params);
    }
    Ok(())
}

/// Per-video inference output.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoPrediction {
    pub id: String,
    /// T×C softmax of the upsampled frame logits.
    pub probabilities: Tensor<f32>,
    /// Decoded transcript (before any fallback).
    pub transcript: Vec<usize>,
    pub end_found: bool,
    /// Frame-wise argmax.
    pub raw_labels: Vec<usize>,
    /// Viterbi-aligned labels, or the raw labels when alignment fell back.
    pub fused_labels: Vec<usize>,
    pub fell_back: bool,
}

/// Runs the full inference pipeline on one feature sequence.
///
/// Alignment falls back to the raw argmax when the decoded transcript is
/// empty or has more entries than there are frames.
pub fn predict<F: Scalar>(
    model: &Model<F>,
    id: &str,
    features: &Tensor<f32>,
) -> Result<VideoPrediction> {
    let mut tape = Tape::<F>::new();
    let x = tape.constant(features.cast());
    let ident = model.forward_identification(&mut tape, x)?;
    let logits = tape.value(ident.frame_logits).clone();
    let query = model.coarse_transcript(&logits)?;
    let keys = model.reasoning_keys(&ident);
    let slots = model.reason(&mut tape, keys, &query, None)?;
    let decoded = decode_transcript(tape.value(slots))?;
    let p = tape.softmax_lastdim(ident.frame_logits)?;
    let probabilities: Tensor<f32> = tape.value(p).cast();
    let raw_labels = probabilities.argmax_rows();
    let (fused_labels, fell_back) = match align_probabilities(&probabilities, &decoded.ids) {
        Ok(labels) => (labels, false),
        Err(Error::EmptyTranscript | Error::Infeasible { .. }) => (raw_labels.clone(), true),
        Err(e) => return Err(e),
    };
    Ok(VideoPrediction {
        id: id.to_string(),
        probabilities,
        transcript: decoded.ids,
        end_found: decoded.end_found,
        raw_labels,
        fused_labels,
        fell_back,
    })
}

/// Viterbi alignment of a transcript to frame probabilities (floored logs).
pub fn align_probabilities(
    probabilities: &Tensor<f32>,
    transcript: &[usize],
) -> Result<Vec<usize>> {
    Ok(viterbi_align(&floored_log_probs(probabilities), transcript)?.frame_labels)
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricReport,
    pub transcript_edit: f64,
    /// Videos whose alignment fell back to raw frames (only counted with Viterbi).
    pub fallbacks: usize,
    pub predictions: Vec<VideoPrediction>,
}

/// Scores a split, with Viterbi fusion (`use_viterbi`) or raw argmax frames.
pub fn evaluate<F: Scalar>(
    model: &Model<F>,
    videos: &[Video],
    use_viterbi: bool,
    ignore_class: Option<usize>,
) -> Result<Evaluation> {
    let mut corpus = CorpusMetrics::new(ignore_class);
    let (mut edit_sum, mut fallbacks) = (0.0, 0);
    let mut predictions = Vec::with_capacity(videos.len());
    for v in videos {
        let pred = predict(model, &v.id, &v.features)?;
        if pred.probabilities.rows() != v.labels.len() {
            return Err(Error::LengthMismatch {
                path: PathBuf::from(&v.id),
                labels: v.labels.len(),
                frames: pred.probabilities.rows(),
            });
        }
        let frames = if use_viterbi {
            fallbacks += usize::from(pred.fell_back);
            &pred.fused_labels
        } else {
            &pred.raw_labels
        };
        corpus.add_video(frames, &v.labels)?;
        edit_sum += edit_score(&pred.transcript, &collapse(&v.labels));
        predictions.push(pred);
    }
    if use_viterbi && fallbacks > 0 {
        log::warn!(
            "{fallbacks} of {} videos fell back to raw frame labels",
            videos.len()
        );
    }
    Ok(Evaluation {
        report: corpus.report(),
        transcript_edit: mean(edit_sum, videos.len()),
        fallbacks,
        predictions,
    })
}

/// Runs both phases from a fresh state.
pub fn train<F: Scalar>(
    model: &mut Model<F>,
    data: &Dataset,
    run: &RunConfig,
    out: Option<&Path>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainState<F>> {
    let mut state = TrainState::new(run.train.seed);
    train_phase1(model, data, run, &mut state, out, observer)?;
    train_phase2(model, data, run, &mut state, out, observer)?;
    Ok(state)
}
