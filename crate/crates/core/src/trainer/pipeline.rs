use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{evaluate, gamma_l1, lr_at, student_step, Discriminator, MetricsRecord, MetricsSink, Objective, PipelineConfig, Schedule, Sgd, Toggles};
use crate::data::{sample_minibatch, BatchRequest, LabeledDataset, Normalization, UnlabeledDataset};
use crate::error::{Error, Result};
use crate::model::{global_threshold, prune, Checkpoint, Model, PruneReport, RngState};

/// Everything a training stage reads besides the networks.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub labeled: &'a LabeledDataset,
    pub unlabeled: Option<&'a UnlabeledDataset>,
    /// Held-out set used only for reporting accuracy.
    pub test: Option<&'a LabeledDataset>,
    pub normalization: &'a Normalization,
}

impl TrainData<'_> {
    /// Weight of the labeled term in the discriminator loss.
    fn balance(&self, config: &PipelineConfig) -> f64 {
        config.discriminator_balance.unwrap_or_else(|| match self.unlabeled {
            Some(u) if !u.is_empty() => u.len() as f64 / self.labeled.len().max(1) as f64,
            _ => 1.0,
        })
    }
}

struct Stage {
    name: &'static str,
    iterations: usize,
    base_lr: f64,
    schedule: Schedule,
    objective: Objective,
    batch_labeled: usize,
    batch_unlabeled: usize,
    /// ChaCha stream id, so stages draw independent sequences.
    stream: u64,
    /// Iteration offset for metrics.
    start: usize,
}

fn run_stage(
    mut model: Model,
    teacher: Option<&Model>,
    data: TrainData<'_>,
    config: &PipelineConfig,
    stage: Stage,
    sink: &mut MetricsSink,
) -> Result<(Model, ChaCha8Rng)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stage.stream);
    let obj = stage.objective;
    let unlabeled = data.unlabeled.filter(|u| !u.is_empty() && stage.batch_unlabeled > 0 && obj.uses_unlabeled());
    let schedule = stage.schedule.resolve(unlabeled.is_some());
    let teacher = match (obj.needs_teacher(), teacher) {
        (false, _) => None,
        (true, Some(t)) => Some((t, obj.weights.tau, config.confidence_temperature())),
        (true, None) => return Err(Error::Config("distillation is enabled but no teacher was given".into())),
    };
    let mut discriminator = match (obj.adversarial(), unlabeled) {
        (true, Some(_)) => {
            let seed = config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stage.stream;
            Some(Discriminator::new(&model.feature_shape(), seed, config.momentum)?)
        }
        _ => None,
    };
    let mut opt = Sgd::new(&model, config.momentum, config.weight_decay);
    let request = BatchRequest {
        labeled_size: stage.batch_labeled,
        unlabeled_size: if unlabeled.is_some() { stage.batch_unlabeled } else { 0 },
        augment: config.augment,
        normalization: data.normalization,
        teacher,
    };
    for it in 0..stage.iterations {
        let lr = lr_at(it, stage.iterations, stage.base_lr, schedule);
        let batch = sample_minibatch(data.labeled, unlabeled, &request, &mut rng)?;
        let out = student_step(&mut model, &mut opt, &batch, &obj, discriminator.as_mut(), lr, config.lr_discriminator)
            .map_err(|e| match e {
                Error::Numeric { term, detail } => {
                    Error::Numeric { term, detail: format!("{detail} (stage {}, iteration {it}, lr {lr})", stage.name) }
                }
                other => other,
            })?;
        let last = it + 1 == stage.iterations;
        let eval_now = data.test.is_some() && (last || (config.eval_every > 0 && (it + 1) % config.eval_every == 0));
        if last || eval_now || (config.log_every > 0 && it % config.log_every == 0) {
            let accuracy = match (eval_now, data.test) {
                (true, Some(t)) => Some(evaluate(&model, t, data.normalization)?),
                _ => None,
            };
            sink.push(MetricsRecord {
                stage: stage.name.into(),
                iteration: stage.start + it,
                lr,
                parts: out.parts,
                total: out.total,
                gamma_l1: gamma_l1(&model),
                discriminator: out.discriminator,
                accuracy,
            })?;
        }
    }
    sink.flush()?;
    Ok((model, rng))
}

/// Sparse retraining of `model` (normally a copy of the teacher) on the
/// full objective including the L1 term.
pub fn sparse_retrain(
    model: Model,
    teacher: Option<&Model>,
    data: TrainData<'_>,
    config: &PipelineConfig,
    sink: &mut MetricsSink,
) -> Result<Model> {
    let stage = Stage {
        name: "sparse",
        iterations: config.iterations_sparse,
        base_lr: config.lr_sparse,
        schedule: config.lr_schedule,
        objective: Objective::new(config, config.weights.lambda, data.balance(config)),
        batch_labeled: config.batch_labeled,
        batch_unlabeled: config.batch_unlabeled,
        stream: 1,
        start: 0,
    };
    Ok(run_stage(model, teacher, data, config, stage, sink)?.0)
}

/// Fine-tunes a pruned model. The L1 term is always off; with
/// `finetune_supervision_only` every auxiliary term is off as well.
pub fn finetune(
    model: Model,
    teacher: Option<&Model>,
    data: TrainData<'_>,
    config: &PipelineConfig,
    sink: &mut MetricsSink,
) -> Result<(Model, ChaCha8Rng)> {
    let objective =
        if config.finetune_supervision_only { Objective::supervised() } else { Objective::new(config, 0.0, data.balance(config)) };
    let stage = Stage {
        name: "finetune",
        iterations: config.finetune_iterations(),
        base_lr: config.lr_finetune,
        schedule: config.lr_schedule,
        objective,
        batch_labeled: config.batch_labeled,
        batch_unlabeled: config.batch_unlabeled,
        stream: 2,
        start: config.iterations_sparse,
    };
    run_stage(model, teacher, data, config, stage, sink)
}

/// Supervised training of a network from scratch on the labeled set.
pub fn train_teacher(model: Model, data: TrainData<'_>, config: &PipelineConfig, sink: &mut MetricsSink) -> Result<Model> {
    let stage = Stage {
        name: "teacher",
        iterations: config.teacher_iterations,
        base_lr: config.teacher_lr,
        schedule: Schedule::HalvesDrop01,
        objective: Objective::supervised(),
        batch_labeled: config.teacher_batch,
        batch_unlabeled: 0,
        stream: 3,
        start: 0,
    };
    Ok(run_stage(model, None, data, config, stage, sink)?.0)
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub sparse: Model,
    pub report: PruneReport,
    pub pruned: Model,
    pub checkpoint: Checkpoint,
    pub teacher_accuracy: Option<f64>,
    pub sparse_accuracy: Option<f64>,
    pub pruned_accuracy: Option<f64>,
    pub final_accuracy: Option<f64>,
}

impl PipelineOutcome {
    pub fn final_model(&self) -> &Model {
        &self.checkpoint.model
    }

    /// `key=value` summary block.
    pub fn summary(&self) -> String {
        let acc = |a: Option<f64>| a.map_or("none".to_string(), |v| v.to_string());
        let mut s = String::from("# summary\n");
        s.push_str(&format!("teacher_accuracy={}\n", acc(self.teacher_accuracy)));
        s.push_str(&format!("sparse_accuracy={}\n", acc(self.sparse_accuracy)));
        s.push_str(&format!("pruned_accuracy={}\n", acc(self.pruned_accuracy)));
        s.push_str(&format!("final_accuracy={}\n", acc(self.final_accuracy)));
        s.push_str(&self.report.key_values());
        s
    }
}

/// Sparse retraining from the teacher, global-threshold pruning, then
/// fine-tuning.
pub fn run_pipeline(teacher: &Model, data: TrainData<'_>, config: &PipelineConfig, sink: &mut MetricsSink) -> Result<PipelineOutcome> {
    config.validate()?;
    let acc = |m: &Model| data.test.map(|t| evaluate(m, t, data.normalization)).transpose();
    let sparse = sparse_retrain(teacher.clone(), Some(teacher), data, config, sink)?;
    let threshold = global_threshold(&sparse.collect_gamma()?, config.prune_fraction)?;
    let (pruned, report) = prune(&sparse, &threshold, config.keep_one_guard)?;
    let (tuned, rng) = finetune(pruned.clone(), Some(teacher), data, config, sink)?;
    let checkpoint = Checkpoint {
        model: tuned,
        iteration: (config.iterations_sparse + config.finetune_iterations()) as u64,
        rng: Some(RngState::capture(&rng)),
    };
    let outcome = PipelineOutcome {
        teacher_accuracy: acc(teacher)?,
        sparse_accuracy: acc(&sparse)?,
        pruned_accuracy: acc(&pruned)?,
        final_accuracy: acc(&checkpoint.model)?,
        sparse,
        report,
        pruned,
        checkpoint,
    };
    sink.summary(&outcome.summary())?;
    sink.flush()?;
    Ok(outcome)
}

#[derive(Clone, Debug)]
pub struct AblationCell {
    pub toggles: Toggles,
    pub metrics_path: PathBuf,
    pub final_accuracy: Option<f64>,
}

/// Runs the pipeline once per on/off combination of the four auxiliary
/// components, writing `metrics_<cell>.txt` into `out_dir` for each.
pub fn run_ablation(
    teacher: &Model,
    data: TrainData<'_>,
    config: &PipelineConfig,
    out_dir: &Path,
    force: bool,
) -> Result<Vec<AblationCell>> {
    let cells = Toggles::grid();
    let paths: Vec<PathBuf> = cells.iter().map(|t| out_dir.join(format!("metrics_{}.txt", t.label()))).collect();
    if !force {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::AlreadyExists,
                format!("{} exists (pass --force to overwrite)", p.display()),
            )));
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let mut out = Vec::with_capacity(cells.len());
    for (toggles, path) in cells.into_iter().zip(paths) {
        let cfg = PipelineConfig { toggles, ..config.clone() };
        let mut sink = MetricsSink::to_file(&path)?;
        let outcome = run_pipeline(teacher, data, &cfg, &mut sink)?;
        out.push(AblationCell { toggles, metrics_path: path, final_accuracy: outcome.final_accuracy });
    }
    Ok(out)
}
