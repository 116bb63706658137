use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::SynthParams;
use crate::error::{Error, Result};
use crate::losses::LossWeights;

/// Piecewise-constant learning-rate schedules.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// x0.1 at 1/2 and 3/4 of the run.
    HalvesDrop01,
    /// x0.3 at 40%, 70% and 90% of the run.
    MilestonesDrop03,
    /// The first when no unlabeled data is used, the second otherwise.
    Auto,
    Constant,
}

impl Schedule {
    fn drops(self) -> (&'static [f64], f64) {
        match self {
            Schedule::HalvesDrop01 => (&[0.5, 0.75], 0.1),
            Schedule::MilestonesDrop03 => (&[0.4, 0.7, 0.9], 0.3),
            Schedule::Auto | Schedule::Constant => (&[], 1.0),
        }
    }

    pub fn resolve(self, uses_unlabeled: bool) -> Self {
        match (self, uses_unlabeled) {
            (Schedule::Auto, false) => Schedule::HalvesDrop01,
            (Schedule::Auto, true) => Schedule::MilestonesDrop03,
            (s, _) => s,
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "halves-drop-0.1" => Ok(Schedule::HalvesDrop01),
            "milestones-40-70-90-drop-0.3" | "milestones-drop-0.3" => Ok(Schedule::MilestonesDrop03),
            "auto" => Ok(Schedule::Auto),
            "constant" => Ok(Schedule::Constant),
            _ => Err(Error::Config(format!("unknown lr_schedule `{s}`"))),
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::HalvesDrop01 => "halves-drop-0.1",
            Schedule::MilestonesDrop03 => "milestones-40-70-90-drop-0.3",
            Schedule::Auto => "auto",
            Schedule::Constant => "constant",
        })
    }
}

/// `ceil(fraction * total)` with products that land within rounding noise
/// of an integer taken as that integer.
fn boundary(fraction: f64, total: usize) -> usize {
    let x = fraction * total as f64;
    if (x - x.round()).abs() < 1e-9 {
        x.round() as usize
    } else {
        x.ceil() as usize
    }
}

/// Learning rate at `iteration` of a `total`-iteration run.
pub fn lr_at(iteration: usize, total: usize, base: f64, schedule: Schedule) -> f64 {
    let (fractions, factor) = schedule.drops();
    let drops = fractions.iter().filter(|&&f| iteration >= boundary(f, total)).count();
    base * factor.powi(drops as i32)
}

/// Which auxiliary objective terms take part in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Toggles {
    pub distillation: bool,
    pub confidence_weighting: bool,
    pub adversarial: bool,
    pub rademacher: bool,
}

impl Toggles {
    pub const ALL: Self = Self { distillation: true, confidence_weighting: true, adversarial: true, rademacher: true };
    pub const NONE: Self = Self { distillation: false, confidence_weighting: false, adversarial: false, rademacher: false };

    /// Short cell name such as `d1c0a1r0`.
    pub fn label(&self) -> String {
        let b = |v: bool| if v { 1 } else { 0 };
        format!("d{}c{}a{}r{}", b(self.distillation), b(self.confidence_weighting), b(self.adversarial), b(self.rademacher))
    }

    /// All 16 on/off combinations, all-off first.
    pub fn grid() -> Vec<Self> {
        (0..16u8)
            .map(|m| Self {
                distillation: m & 8 != 0,
                confidence_weighting: m & 4 != 0,
                adversarial: m & 2 != 0,
                rademacher: m & 1 != 0,
            })
            .collect()
    }
}

/// Every knob of the three-stage pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub weights: LossWeights,
    pub prune_fraction: f64,
    pub iterations_sparse: usize,
    /// `None` means half of `iterations_sparse`.
    pub iterations_finetune: Option<usize>,
    pub lr_sparse: f64,
    pub lr_finetune: f64,
    pub lr_discriminator: f64,
    pub lr_schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub seed: u64,
    pub toggles: Toggles,
    pub distill_on_labeled: bool,
    pub literal_eq10_aligner: bool,
    pub finetune_supervision_only: bool,
    pub augment: bool,
    pub keep_one_guard: bool,
    /// Temperature for the confidence weights; `None` reuses `tau`.
    pub confidence_tau: Option<f64>,
    /// Weight of the labeled term in the discriminator loss; `None` means
    /// the pool-size ratio `N^u / N^l`.
    pub discriminator_balance: Option<f64>,
    pub metrics_path: Option<PathBuf>,
    pub log_every: usize,
    /// Evaluate on the test set every this many iterations (0 = never
    /// during training).
    pub eval_every: usize,
    /// Normalization constants; `None` computes them from the labeled set.
    pub norm_mean: Option<Vec<f64>>,
    pub norm_std: Option<Vec<f64>>,
    pub teacher_iterations: usize,
    pub teacher_lr: f64,
    pub teacher_batch: usize,
    pub teacher_widths: Vec<usize>,
    pub synth: SynthParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            prune_fraction: 0.7,
            iterations_sparse: 15_000,
            iterations_finetune: None,
            lr_sparse: 0.003,
            lr_finetune: 0.001,
            lr_discriminator: 0.001,
            lr_schedule: Schedule::Auto,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_labeled: 32,
            batch_unlabeled: 32,
            seed: 0,
            toggles: Toggles::ALL,
            distill_on_labeled: true,
            literal_eq10_aligner: false,
            finetune_supervision_only: false,
            augment: true,
            keep_one_guard: true,
            confidence_tau: None,
            discriminator_balance: None,
            metrics_path: None,
            log_every: 50,
            eval_every: 0,
            norm_mean: None,
            norm_std: None,
            teacher_iterations: 3000,
            teacher_lr: 0.05,
            teacher_batch: 64,
            teacher_widths: vec![8, 16, 32],
            synth: SynthParams::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{value}`"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn optional<T>(value: &str, f: impl FnOnce(&str) -> Result<T>) -> Result<Option<T>> {
    if value == "none" || value.is_empty() {
        Ok(None)
    } else {
        f(value).map(Some)
    }
}

impl PipelineConfig {
    pub const KEYS: &'static [&'static str] = &[
        "lambda",
        "alpha",
        "beta",
        "eta",
        "tau",
        "prune_fraction",
        "iterations_sparse",
        "iterations_finetune",
        "lr_sparse",
        "lr_finetune",
        "lr_discriminator",
        "lr_schedule",
        "momentum",
        "weight_decay",
        "batch_labeled",
        "batch_unlabeled",
        "seed",
        "distillation",
        "confidence_weighting",
        "adversarial",
        "rademacher",
        "distill_on_labeled",
        "literal_eq10_aligner",
        "finetune_supervision_only",
        "augment",
        "keep_one_guard",
        "confidence_tau",
        "discriminator_balance",
        "metrics_path",
        "log_every",
        "eval_every",
        "norm_mean",
        "norm_std",
        "teacher_iterations",
        "teacher_lr",
        "teacher_batch",
        "teacher_widths",
        "synth_classes",
        "synth_labeled",
        "synth_unlabeled",
        "synth_test",
        "synth_bias_shift",
        "synth_noise",
    ];

    /// Sets one field from its textual form. Unknown keys and unparsable
    /// values are [`Error::Config`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "lambda" => self.weights.lambda = parse(key, v)?,
            "alpha" => self.weights.alpha = parse(key, v)?,
            "beta" => self.weights.beta = parse(key, v)?,
            "eta" => self.weights.eta = parse(key, v)?,
            "tau" => self.weights.tau = parse(key, v)?,
            "prune_fraction" => self.prune_fraction = parse(key, v)?,
            "iterations_sparse" => self.iterations_sparse = parse(key, v)?,
            "iterations_finetune" => self.iterations_finetune = optional(v, |s| parse(key, s))?,
            "lr_sparse" => self.lr_sparse = parse(key, v)?,
            "lr_finetune" => self.lr_finetune = parse(key, v)?,
            "lr_discriminator" => self.lr_discriminator = parse(key, v)?,
            "lr_schedule" => self.lr_schedule = v.parse()?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "batch_labeled" => self.batch_labeled = parse(key, v)?,
            "batch_unlabeled" => self.batch_unlabeled = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "distillation" => self.toggles.distillation = parse_bool(key, v)?,
            "confidence_weighting" => self.toggles.confidence_weighting = parse_bool(key, v)?,
            "adversarial" => self.toggles.adversarial = parse_bool(key, v)?,
            "rademacher" => self.toggles.rademacher = parse_bool(key, v)?,
            "distill_on_labeled" => self.distill_on_labeled = parse_bool(key, v)?,
            "literal_eq10_aligner" => self.literal_eq10_aligner = parse_bool(key, v)?,
            "finetune_supervision_only" => self.finetune_supervision_only = parse_bool(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "keep_one_guard" => self.keep_one_guard = parse_bool(key, v)?,
            "confidence_tau" => self.confidence_tau = optional(v, |s| parse(key, s))?,
            "discriminator_balance" => self.discriminator_balance = optional(v, |s| parse(key, s))?,
            "metrics_path" => self.metrics_path = optional(v, |s| Ok(PathBuf::from(s)))?,
            "log_every" => self.log_every = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "norm_mean" => self.norm_mean = optional(v, |s| parse_list(key, s))?,
            "norm_std" => self.norm_std = optional(v, |s| parse_list(key, s))?,
            "teacher_iterations" => self.teacher_iterations = parse(key, v)?,
            "teacher_lr" => self.teacher_lr = parse(key, v)?,
            "teacher_batch" => self.teacher_batch = parse(key, v)?,
            "teacher_widths" => self.teacher_widths = parse_list(key, v)?,
            "synth_classes" => self.synth.classes = parse(key, v)?,
            "synth_labeled" => self.synth.n_labeled = parse(key, v)?,
            "synth_unlabeled" => self.synth.n_unlabeled = parse(key, v)?,
            "synth_test" => self.synth.n_test = parse(key, v)?,
            "synth_bias_shift" => self.synth.bias_shift = parse(key, v)?,
            "synth_noise" => self.synth.noise = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..1.0).contains(&self.prune_fraction) {
            return bad(format!("prune_fraction must lie in [0,1), got {}", self.prune_fraction));
        }
        if self.iterations_sparse == 0 || self.iterations_finetune == Some(0) || self.teacher_iterations == 0 {
            return bad("iteration counts must be at least 1".into());
        }
        for (name, v) in [
            ("lr_sparse", self.lr_sparse),
            ("lr_finetune", self.lr_finetune),
            ("lr_discriminator", self.lr_discriminator),
            ("teacher_lr", self.teacher_lr),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0,1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_labeled == 0 || self.teacher_batch == 0 {
            return bad("labeled batch sizes must be at least 1".into());
        }
        if let Some(t) = self.confidence_tau {
            if !(t > 0.0) || !t.is_finite() {
                return bad(format!("confidence_tau must be > 0, got {t}"));
            }
        }
        if let Some(b) = self.discriminator_balance {
            if !(b > 0.0) || !b.is_finite() {
                return bad(format!("discriminator_balance must be > 0, got {b}"));
            }
        }
        match (&self.norm_mean, &self.norm_std) {
            (None, None) => {}
            (Some(m), Some(s)) if m.len() == s.len() && s.iter().all(|&v| v > 0.0) => {}
            _ => return bad("norm_mean and norm_std must be given together with positive std".into()),
        }
        if self.teacher_widths.is_empty() || self.teacher_widths.contains(&0) {
            return bad("teacher_widths must list positive channel counts".into());
        }
        if !(0.0..=1.0).contains(&self.synth.bias_shift) || !(self.synth.noise >= 0.0) {
            return bad("synth_bias_shift must lie in [0,1] and synth_noise must be >= 0".into());
        }
        Ok(())
    }

    pub fn finetune_iterations(&self) -> usize {
        self.iterations_finetune.unwrap_or((self.iterations_sparse / 2).max(1))
    }

    pub fn confidence_temperature(&self) -> f64 {
        self.confidence_tau.unwrap_or(self.weights.tau)
    }

    /// `key = value` lines that [`PipelineConfig::set`] reads back.
    pub fn to_config_text(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let w = &self.weights;
        let t = &self.toggles;
        let pairs: Vec<(&str, String)> = vec![
            ("lambda", w.lambda.to_string()),
            ("alpha", w.alpha.to_string()),
            ("beta", w.beta.to_string()),
            ("eta", w.eta.to_string()),
            ("tau", w.tau.to_string()),
            ("prune_fraction", self.prune_fraction.to_string()),
            ("iterations_sparse", self.iterations_sparse.to_string()),
            ("iterations_finetune", opt(self.iterations_finetune.map(|v| v.to_string()))),
            ("lr_sparse", self.lr_sparse.to_string()),
            ("lr_finetune", self.lr_finetune.to_string()),
            ("lr_discriminator", self.lr_discriminator.to_string()),
            ("lr_schedule", self.lr_schedule.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("batch_labeled", self.batch_labeled.to_string()),
            ("batch_unlabeled", self.batch_unlabeled.to_string()),
            ("seed", self.seed.to_string()),
            ("distillation", t.distillation.to_string()),
            ("confidence_weighting", t.confidence_weighting.to_string()),
            ("adversarial", t.adversarial.to_string()),
            ("rademacher", t.rademacher.to_string()),
            ("distill_on_labeled", self.distill_on_labeled.to_string()),
            ("literal_eq10_aligner", self.literal_eq10_aligner.to_string()),
            ("finetune_supervision_only", self.finetune_supervision_only.to_string()),
            ("augment", self.augment.to_string()),
            ("keep_one_guard", self.keep_one_guard.to_string()),
            ("confidence_tau", opt(self.confidence_tau.map(|v| v.to_string()))),
            ("discriminator_balance", opt(self.discriminator_balance.map(|v| v.to_string()))),
            ("metrics_path", opt(self.metrics_path.as_ref().map(|p| p.display().to_string()))),
            ("log_every", self.log_every.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("norm_mean", opt(self.norm_mean.as_deref().map(list))),
            ("norm_std", opt(self.norm_std.as_deref().map(list))),
            ("teacher_iterations", self.teacher_iterations.to_string()),
            ("teacher_lr", self.teacher_lr.to_string()),
            ("teacher_batch", self.teacher_batch.to_string()),
            (
                "teacher_widths",
                self.teacher_widths.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
            ),
            ("synth_classes", self.synth.classes.to_string()),
            ("synth_labeled", self.synth.n_labeled.to_string()),
            ("synth_unlabeled", self.synth.n_unlabeled.to_string()),
            ("synth_test", self.synth.n_test.to_string()),
            ("synth_bias_shift", self.synth.bias_shift.to_string()),
            ("synth_noise", self.synth.noise.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
