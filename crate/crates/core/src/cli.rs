//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 config
//! error. Failures print one `error category=<Category> ...` line on
//! stderr.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{
    load_cifar10, load_tensor_file, synth_generate, unlabeled_from_tensor, write_cifar10, write_tensor_file,
    LabeledDataset, Normalization, UnlabeledDataset,
};
use crate::error::{Error, Result};
use crate::model::{self, build, conv_stack_spec, global_threshold, prune, Checkpoint, Model};
use crate::trainer::{
    evaluate, finetune, run_ablation, run_pipeline, sparse_retrain, train_teacher, MetricsSink, PipelineConfig,
    TrainData,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "chanprune", version, about = "Prune CNN channels with few labels and many unlabeled images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sparse retraining of a teacher checkpoint on the full objective.
    TrainSparse(Common),
    /// Global-threshold pruning of a sparse checkpoint.
    Prune(Common),
    /// Fine-tune a pruned checkpoint.
    Finetune(Common),
    /// Test-set accuracy of a checkpoint.
    Eval(Common),
    /// train-sparse, prune, finetune and eval in one run.
    Pipeline(Common),
    /// Write the synthetic shape dataset into a directory.
    SynthData(Common),
    /// Run the pipeline for every on/off combination of the four
    /// auxiliary losses.
    Ablate(Common),
    /// Supervised training of a fresh teacher network.
    TrainTeacher(Common),
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input checkpoint.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Output checkpoint or directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Labeled images in CIFAR-10 binary format.
    #[arg(long)]
    pub data_labeled: Option<PathBuf>,
    /// Unlabeled images as a CFTD tensor or CIFAR-10 binary file.
    #[arg(long)]
    pub data_unlabeled: Option<PathBuf>,
    /// Labeled test images in CIFAR-10 binary format.
    #[arg(long)]
    pub data_test: Option<PathBuf>,
    /// Teacher checkpoint used for distillation by `finetune`.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Config override, applied after the file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
    /// Shorthand for `--override seed=N`, applied last.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Reads a `key = value` config file (`#` starts a comment), then applies
/// `overrides` in order and validates the result.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<PipelineConfig> {
    let mut config = PipelineConfig::default();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{}:{}: expected `key = value`", path.display(), n + 1)))?;
            config.set(k.trim(), v.trim())?;
        }
    }
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
        config.set(k.trim(), v.trim())?;
    }
    config.validate()?;
    Ok(config)
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn parse_and_run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            if code == EXIT_USAGE {
                let msg = e.to_string();
                let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
                eprintln!("error category=UsageError {first}");
            } else {
                let _ = e.print();
            }
            return code;
        }
    };
    let mut stdout = std::io::stdout().lock();
    match run(cli, &mut stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = if matches!(e, Error::Config(_)) { EXIT_CONFIG } else { EXIT_RUNTIME };
            let detail = e.to_string().replace('\n', " ");
            eprintln!("error category={} {detail}", e.category());
            code
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::SynthData(a) => synth_data(&a, out),
        Command::TrainTeacher(a) => teacher(&a, out),
        Command::TrainSparse(a) => train_sparse(&a, out),
        Command::Prune(a) => prune_cmd(&a, out),
        Command::Finetune(a) => finetune_cmd(&a, out),
        Command::Eval(a) => eval(&a, out),
        Command::Pipeline(a) => pipeline(&a, out),
        Command::Ablate(a) => ablate(&a, out),
    }
}

fn config_of(a: &Common) -> Result<PipelineConfig> {
    let mut overrides = a.overrides.clone();
    if let Some(s) = a.seed {
        overrides.push(format!("seed={s}"));
    }
    load_config(a.config.as_deref(), &overrides)
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("--{flag} is required for this command")))
}

fn existing<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    let p = required(p, flag)?;
    if !p.exists() {
        return Err(Error::Config(format!("--{flag} {} does not exist", p.display())));
    }
    Ok(p)
}

fn existing_opt<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<Option<&'a Path>> {
    p.as_ref().map(|_| existing(p, flag)).transpose()
}

/// Fails unless `path` may be written: it must not exist (or `force` is
/// set) and its parent directory must exist.
fn writable(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::AlreadyExists,
            format!("{} exists (pass --force to overwrite)", path.display()),
        )));
    }
    match path.parent() {
        Some(d) if !d.as_os_str().is_empty() && !d.is_dir() => {
            Err(Error::Config(format!("output directory {} does not exist", d.display())))
        }
        _ => Ok(()),
    }
}

fn output<'a>(a: &'a Common) -> Result<&'a Path> {
    let p = required(&a.out, "out")?;
    writable(p, a.force)?;
    Ok(p)
}

fn load_labeled(path: &Path, model: Option<&Model>) -> Result<LabeledDataset> {
    let d = load_cifar10(path)?;
    if let Some(m) = model {
        if d.image_shape() != m.input_shape() {
            return Err(Error::Data(format!(
                "{}: images are {:?} but the network expects {:?}",
                path.display(),
                d.image_shape(),
                m.input_shape()
            )));
        }
    }
    Ok(d)
}

/// CFTD tensors are resized to the network input; anything else is read as
/// CIFAR-10 with the labels dropped.
fn load_unlabeled(path: &Path, hw: (usize, usize)) -> Result<UnlabeledDataset> {
    let head = std::fs::read(path)?;
    if head.starts_with(b"CFTD") {
        load_tensor_file(path, Some(hw))
    } else {
        unlabeled_from_tensor(load_cifar10(path)?.images, Some(hw))
    }
}

fn normalization(config: &PipelineConfig, labeled: Option<&LabeledDataset>) -> Result<Normalization> {
    match (&config.norm_mean, &config.norm_std, labeled) {
        (Some(m), Some(s), _) => Normalization::new(m.clone(), s.clone()),
        (_, _, Some(l)) => Normalization::compute(&l.images),
        _ => Err(Error::Config("normalization needs --data-labeled or norm_mean/norm_std in the config".into())),
    }
}

fn metrics_sink(config: &PipelineConfig, default: Option<PathBuf>, force: bool) -> Result<MetricsSink> {
    match config.metrics_path.clone().or(default) {
        Some(p) => {
            writable(&p, force)?;
            MetricsSink::to_file(&p)
        }
        None => Ok(MetricsSink::memory()),
    }
}

fn load_model(path: &Path) -> Result<Checkpoint> {
    model::load(path)
}

/// Everything the training commands read.
struct Inputs {
    labeled: LabeledDataset,
    unlabeled: Option<UnlabeledDataset>,
    test: Option<LabeledDataset>,
    normalization: Normalization,
}

impl Inputs {
    fn load(a: &Common, config: &PipelineConfig, model: &Model) -> Result<Self> {
        let labeled_path = existing(&a.data_labeled, "data-labeled")?;
        let unlabeled_path = existing_opt(&a.data_unlabeled, "data-unlabeled")?;
        let test_path = existing_opt(&a.data_test, "data-test")?;
        let [_, h, w] = model.input_shape();
        let labeled = load_labeled(labeled_path, Some(model))?;
        let unlabeled = unlabeled_path.map(|p| load_unlabeled(p, (h, w))).transpose()?;
        let test = test_path.map(|p| load_labeled(p, Some(model))).transpose()?;
        let normalization = normalization(config, Some(&labeled))?;
        Ok(Self { labeled, unlabeled, test, normalization })
    }

    fn data(&self) -> TrainData<'_> {
        TrainData {
            labeled: &self.labeled,
            unlabeled: self.unlabeled.as_ref(),
            test: self.test.as_ref(),
            normalization: &self.normalization,
        }
    }
}

fn synth_data(a: &Common, out: &mut dyn Write) -> Result<()> {
    let config = config_of(a)?;
    let dir = required(&a.out, "out")?;
    let files = [dir.join("labeled.bin"), dir.join("unlabeled.cftd"), dir.join("test.bin")];
    if let Some(f) = files.iter().find(|f| f.exists() && !a.force) {
        writable(f, false)?;
    }
    let data = synth_generate(config.seed, &config.synth)?;
    std::fs::create_dir_all(dir)?;
    write_cifar10(&files[0], &data.labeled)?;
    write_tensor_file(&files[1], &data.unlabeled.images)?;
    write_cifar10(&files[2], &data.test)?;
    writeln!(out, "labeled={} unlabeled={} test={}", data.labeled.len(), data.unlabeled.len(), data.test.len())?;
    for f in &files {
        writeln!(out, "wrote {}", f.display())?;
    }
    Ok(())
}

fn teacher(a: &Common, out: &mut dyn Write) -> Result<()> {
    let config = config_of(a)?;
    let dest = output(a)?;
    let labeled = load_labeled(existing(&a.data_labeled, "data-labeled")?, None)?;
    let test = existing_opt(&a.data_test, "data-test")?.map(|p| load_labeled(p, None)).transpose()?;
    let normalization = normalization(&config, Some(&labeled))?;
    let spec = conv_stack_spec(labeled.image_shape(), &config.teacher_widths, labeled.classes);
    let init = build(&spec, config.seed)?;
    let data = TrainData { labeled: &labeled, unlabeled: None, test: test.as_ref(), normalization: &normalization };
    let mut sink = metrics_sink(&config, None, a.force)?;
    let trained = train_teacher(init, data, &config, &mut sink)?;
    model::save(&Checkpoint { model: trained.clone(), iteration: config.teacher_iterations as u64, rng: None }, dest)?;
    if let Some(t) = &test {
        writeln!(out, "accuracy={}", evaluate(&trained, t, &normalization)?)?;
    }
    writeln!(out, "wrote {}", dest.display())?;
    Ok(())
}

fn train_sparse(a: &Common, out: &mut dyn Write) -> Result<()> {
    let config = config_of(a)?;
    let src = existing(&a.input, "in")?;
    let dest = output(a)?;
    let teacher = load_model(src)?.model;
    let inputs = Inputs::load(a, &config, &teacher)?;
    let mut sink = metrics_sink(&config, None, a.force)?;
    let sparse = sparse_retrain(teacher.clone(), Some(&teacher), inputs.data(), &config, &mut sink)?;
    model::save(&Checkpoint { model: sparse, iteration: config.iterations_sparse as u64, rng: None }, dest)?;
    writeln!(out, "wrote {}", dest.display())?;
    Ok(())
}

fn prune_cmd(a: &Common, out: &mut dyn Write) -> Result<()> {
    let config = config_of(a)?;
    let src = existing(&a.input, "in")?;
    let dest = output(a)?;
    let ck = load_model(src)?;
    let threshold = global_threshold(&ck.model.collect_gamma()?, config.prune_fraction)?;
    let (pruned, report) = prune(&ck.model, &threshold, config.keep_one_guard)?;
    model::save(&Checkpoint { model: pruned, iteration: ck.iteration, rng: None }, dest)?;
    write!(out, "{}", report.table())?;
    write!(out, "{}", report.key_values())?;
    writeln!(out, "wrote {}", dest.display())?;
    Ok(())
}

fn finetune_cmd(a: &Common, out: &mut dyn Write) -> Result<()> {
    let config = config_of(a)?;
    let src = existing(&a.input, "in")?;
    let teacher_path = existing_opt(&a.teacher, "teacher")?;
    let dest = output(a)?;
    let ck = load_model(src)?;
    let teacher = teacher_path.map(|p| load_model(p).map(|c| c.model)).transpose()?;
    let inputs = Inputs::load(a, &config, &ck.model)?;
    let mut sink = metrics_sink(&config, None, a.force)?;
    let (tuned, rng) = finetune(ck.model, teacher.as_ref(), inputs.data(), &config, &mut sink)?;
    let iteration = ck.iteration + config.finetune_iterations() as u64;
    model::save(&Checkpoint { model: tuned, iteration, rng: Some(model::RngState::capture(&rng)) }, dest)?;
    writeln!(out, "wrote {}", dest.display())?;
    Ok(())
}

fn eval(a: &Common, out: &mut dyn Write) -> Result<()> {
    let config = config_of(a)?;
    let src = existing(&a.input, "in")?;
    let test_path = existing(&a.data_test, "data-test")?;
    let labeled_path = existing_opt(&a.data_labeled, "data-labeled")?;
    let ck = load_model(src)?;
    let test = load_labeled(test_path, Some(&ck.model))?;
    let labeled = labeled_path.map(|p| load_labeled(p, Some(&ck.model))).transpose()?;
    let normalization = normalization(&config, labeled.as_ref())?;
    writeln!(out, "accuracy={}", evaluate(&ck.model, &test, &normalization)?)?;
    Ok(())
}

fn pipeline(a: &Common, out: &mut dyn Write) -> Result<()> {
    let config = config_of(a)?;
    let src = existing(&a.input, "in")?;
    let dest = output(a)?;
    let teacher = load_model(src)?.model;
    let inputs = Inputs::load(a, &config, &teacher)?;
    let mut name = dest.as_os_str().to_owned();
    name.push(".report");
    let mut sink = metrics_sink(&config, Some(PathBuf::from(name)), a.force)?;
    let outcome = run_pipeline(&teacher, inputs.data(), &config, &mut sink)?;
    model::save(&outcome.checkpoint, dest)?;
    write!(out, "{}", outcome.report.table())?;
    write!(out, "{}", outcome.summary())?;
    writeln!(out, "wrote {}", dest.display())?;
    Ok(())
}

fn ablate(a: &Common, out: &mut dyn Write) -> Result<()> {
    let config = config_of(a)?;
    let src = existing(&a.input, "in")?;
    let dir = required(&a.out, "out")?;
    let teacher = load_model(src)?.model;
    let inputs = Inputs::load(a, &config, &teacher)?;
    let cells = run_ablation(&teacher, inputs.data(), &config, dir, a.force)?;
    for c in cells {
        let acc = c.final_accuracy.map_or("none".to_string(), |v| v.to_string());
        writeln!(out, "cell={} final_accuracy={acc} metrics={}", c.toggles.label(), c.metrics_path.display())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "# nothing\n\n").unwrap();
        assert_eq!(load_config(Some(&p), &[]).unwrap(), PipelineConfig::default());
    }

    #[test]
    fn overrides_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "tau = 3  # file value\nalpha=0.5\n").unwrap();
        let c = load_config(Some(&p), &["tau=5".into()]).unwrap();
        assert_eq!(c.weights.tau, 5.0);
        assert_eq!(c.weights.alpha, 0.5);
    }

    #[test]
    fn config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "alpha = -1\n").unwrap();
        assert!(matches!(load_config(Some(&p), &[]), Err(Error::Config(_))));
        std::fs::write(&p, "no_such_key = 1\n").unwrap();
        let e = load_config(Some(&p), &[]).unwrap_err();
        assert!(e.to_string().contains("no_such_key"));
        std::fs::write(&p, "momentum = fast\n").unwrap();
        assert!(matches!(load_config(Some(&p), &[]), Err(Error::Config(_))));
        assert!(matches!(load_config(None, &["lambda".into()]), Err(Error::Config(_))));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(parse_and_run(["chanprune", "eval", "--bogus"]), EXIT_USAGE);
        assert_eq!(parse_and_run(["chanprune"]), EXIT_USAGE);
        assert_eq!(parse_and_run(["chanprune", "eval", "--override", "alpha=-1"]), EXIT_CONFIG);
        assert_eq!(parse_and_run(["chanprune", "prune", "--in", "/nonexistent/x.ck", "--out", "y"]), EXIT_CONFIG);
    }
}
