//! The `msattn` command line: data generation, training, evaluation,
//! gradient checks, sweeps and charts.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::attention::Variant;
use crate::data::{gen_dataset, parse_sources, GeneratorConfig, SourceSpec, Split, SplitDataset};
use crate::encoder::Width;
use crate::error::{Error, Result};
use crate::localize::{dump_regions, hit_rates, write_regions_csv};
use crate::metrics::write_report_csv;
use crate::model::{ModelKind, ModelSpec, Network};
use crate::report::{chart_from_csv, merge, render_svg};
use crate::train::{
    cache_dir_from_env, capacity_sweep, neighborhood_sweep, window_sweep, write_capacity_csv, write_neighborhood_csv,
    write_window_csv, Checkpoint, Pipeline, TrainConfig,
};
use crate::verify::{full_suite, negative_control};
use crate::write_atomic;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Name of the run record written into every output directory.
pub const RUN_RECORD: &str = "run.txt";

#[derive(Debug, Parser)]
#[command(name = "msattn", version, about = "Multisource instance-attention classifier toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multisource dataset.
    GenData(GenDataArgs),
    /// Train a model, including every model it is initialized from.
    Train(TrainArgs),
    /// Evaluate a trained model on one split.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Sweep region size, model width or neighborhood size.
    Sweep(SweepArgs),
    /// Render result CSVs as a grouped bar chart.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub difficulty: f64,
    /// `default` or a file with one source record per line.
    #[arg(long, default_value = "default")]
    pub sources: String,
    /// Samples of the most frequent class.
    #[arg(long, default_value_t = 300)]
    pub base_count: usize,
    /// Largest to smallest class ratio.
    #[arg(long, default_value_t = 10.0)]
    pub imbalance: f64,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

/// Hyperparameters shared by `train` and `sweep`.
#[derive(Debug, Args, Clone)]
pub struct TrainingFlags {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub l2: f64,
    #[arg(long, default_value_t = 100)]
    pub batch: usize,
    /// Epochs without validation improvement before the learning rate drops.
    #[arg(long, default_value_t = 200)]
    pub patience: usize,
    #[arg(long, default_value_t = 100_000)]
    pub max_epochs: usize,
    /// Largest augmentation shift as a fraction of the image side.
    #[arg(long, default_value_t = 0.2)]
    pub shift: f64,
    /// Base convolution width before scaling.
    #[arg(long, default_value_t = Width::default().kernels)]
    pub kernels: usize,
    /// Base feature width before scaling.
    #[arg(long, default_value_t = Width::default().features)]
    pub features: usize,
    /// Multiplies every dropout probability.
    #[arg(long, default_value_t = 1.0)]
    pub dropout_scale: f64,
    /// Checkpoint cache; defaults to $MSATTN_CACHE_DIR, then DATA/cache.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub verbose: bool,
}

impl TrainingFlags {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            l2: self.l2,
            batch: self.batch,
            patience: self.patience,
            max_epochs: self.max_epochs,
            seed: self.seed,
            shift_frac: self.shift,
            verbose: self.verbose,
            ..TrainConfig::default()
        }
    }

    fn width(&self) -> Width {
        Width {
            kernels: self.kernels,
            features: self.features,
        }
    }

    fn cache_dir(&self, data: &Path) -> PathBuf {
        self.cache
            .clone()
            .or_else(cache_dir_from_env)
            .unwrap_or_else(|| data.join("cache"))
    }

    fn pipeline<'a>(&self, data: &'a SplitDataset, data_dir: &Path) -> Result<Pipeline<'a>> {
        let config = self.config();
        config.validate()?;
        Ok(Pipeline::new(data, config)
            .with_width(self.width())
            .with_dropout_scale(self.dropout_scale)
            .with_cache(Some(self.cache_dir(data_dir))))
    }

    fn record(&self, r: &mut RunRecord) {
        r.config("lr", self.lr);
        r.config("l2", self.l2);
        r.config("batch", self.batch);
        r.config("patience", self.patience);
        r.config("max_epochs", self.max_epochs);
        r.config("shift", self.shift);
        r.config("kernels", self.kernels);
        r.config("features", self.features);
        r.config("dropout_scale", self.dropout_scale);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Full,
    ClsOnly,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// baseline, attention, ext1, ext2, ext3 or ext4.
    #[arg(long)]
    pub model: String,
    /// Input sources in order, reference first for fusion models.
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    pub source: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub scale: usize,
    #[arg(long, value_enum, default_value_t = VariantArg::Full)]
    pub variant: VariantArg,
    /// Region size for single-source attention models.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub training: TrainingFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Write region-score grids for the first K samples.
    #[arg(long, default_value_t = 0)]
    pub dump_regions: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also run a check with a deliberately wrong backward rule, which
    /// must be reported as a failure.
    #[arg(long)]
    pub negative_control: bool,
    /// Optional directory for a CSV report and run record.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    Window,
    Capacity,
    Neighborhood,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub kind: SweepKind,
    #[arg(long)]
    pub data: PathBuf,
    /// Model for capacity sweeps.
    #[arg(long, default_value = "ext3")]
    pub model: String,
    /// Sources: all model inputs for capacity sweeps, the swept source
    /// otherwise.
    #[arg(long, value_delimiter = ',', num_args = 1.., default_value = "a")]
    pub source: Vec<String>,
    #[arg(long, value_delimiter = ',', num_args = 1.., default_value = "1,2,3")]
    pub scales: Vec<usize>,
    #[arg(long, value_delimiter = ',', num_args = 1.., default_value = "2,3,4,5,6,7,8,9,10")]
    pub windows: Vec<usize>,
    #[arg(long, value_delimiter = ',', num_args = 1.., default_value = "12,16,20,24,28")]
    pub sides: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub training: TrainingFlags,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long = "in", num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub title: Option<String>,
    /// Category column; picked automatically when absent.
    #[arg(long)]
    pub x: Option<String>,
    /// Value columns; every accuracy column when absent.
    #[arg(long, value_delimiter = ',')]
    pub y: Vec<String>,
}

/// Provenance written next to every set of artifacts.
#[derive(Debug, Default)]
pub struct RunRecord {
    pub command: String,
    pub seed: Option<u64>,
    pub dataset_hash: Option<String>,
    pub config: Vec<(String, String)>,
    pub outputs: Vec<PathBuf>,
    pub results: Vec<(String, String)>,
    pub seconds: f64,
}

impl RunRecord {
    fn new(argv: &[OsString]) -> Self {
        Self {
            command: argv.iter().map(|a| quote(&a.to_string_lossy())).collect::<Vec<_>>().join(" "),
            ..Self::default()
        }
    }

    fn config(&mut self, k: &str, v: impl ToString) {
        self.config.push((k.to_string(), v.to_string()));
    }

    fn result(&mut self, k: &str, v: impl ToString) {
        self.results.push((k.to_string(), v.to_string()));
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "command: {}", self.command).unwrap();
        writeln!(s, "version: {}", env!("CARGO_PKG_VERSION")).unwrap();
        if let Some(seed) = self.seed {
            writeln!(s, "seed: {seed}").unwrap();
        }
        if let Some(h) = &self.dataset_hash {
            writeln!(s, "dataset_hash: {h}").unwrap();
        }
        for (k, v) in &self.config {
            writeln!(s, "config.{k}: {v}").unwrap();
        }
        for p in &self.outputs {
            writeln!(s, "output: {}", p.display()).unwrap();
        }
        for (k, v) in &self.results {
            writeln!(s, "result.{k}: {v}").unwrap();
        }
        writeln!(s, "duration_s: {:.3}", self.seconds).unwrap();
        s
    }

    fn write(&mut self, dir: &Path, started: Instant) -> Result<()> {
        self.seconds = started.elapsed().as_secs_f64();
        write_atomic(&dir.join(RUN_RECORD), self.to_text().as_bytes())
    }
}

fn quote(s: &str) -> String {
    if !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || "-_./=,:".contains(c)) {
        s.to_string()
    } else {
        format!("'{}'", s.replace('\'', r"'\''"))
    }
}

/// Errors that should exit with a usage code rather than a data code.
#[derive(Debug)]
struct Usage(String);

enum Failure {
    Usage(String),
    Lib(Error),
    /// Already reported; carries the exit code.
    Reported(i32),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<Usage> for Failure {
    fn from(u: Usage) -> Self {
        Failure::Usage(u.0)
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Maps a library error to an exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        _ if e.is_numerical() => EXIT_NUMERICAL,
        Error::Config(_) | Error::InvalidParameter(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run(argv: Vec<OsString>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let started = Instant::now();
    let mut record = RunRecord::new(&argv);
    let outcome = match cli.command {
        Command::GenData(a) => gen_data(a, &mut record, started),
        Command::Train(a) => train(a, &mut record, started),
        Command::Eval(a) => eval(a, &mut record, started),
        Command::Gradcheck(a) => gradcheck(a, &mut record, started),
        Command::Sweep(a) => sweep(a, &mut record, started),
        Command::Report(a) => report(a),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
        Err(Failure::Reported(code)) => code,
    }
}

/// Creates `dir`, refusing a non-empty one unless `force` is set.
fn prepare_out(dir: &Path, force: bool) -> CmdResult {
    if let Ok(mut entries) = std::fs::read_dir(dir) {
        if entries.next().is_some() && !force {
            return Err(Usage(format!("{} is not empty; pass --force to overwrite", dir.display())).into());
        }
    } else if dir.exists() {
        return Err(Usage(format!("{} exists and is not a directory", dir.display())).into());
    }
    std::fs::create_dir_all(dir).map_err(Error::from)?;
    Ok(())
}

fn load_data(dir: &Path) -> Result<SplitDataset> {
    SplitDataset::load(dir).map_err(|e| match e {
        Error::Missing(m) => Error::Missing(m),
        Error::Io(io) => Error::Missing(format!("dataset {}: {io}", dir.display())),
        other => other,
    })
}

fn gen_data(a: GenDataArgs, record: &mut RunRecord, started: Instant) -> CmdResult {
    let sources = if a.sources == "default" {
        SourceSpec::defaults()
    } else {
        let text = std::fs::read_to_string(&a.sources)
            .map_err(|e| Error::Missing(format!("sources file {}: {e}", a.sources)))?;
        parse_sources(&text)?
    };
    let config = GeneratorConfig {
        base_count: a.base_count,
        imbalance: a.imbalance,
        difficulty: a.difficulty,
        ..GeneratorConfig::new(sources, a.classes, a.seed)
    };
    config.validate()?;
    prepare_out(&a.out, a.force)?;
    let data = gen_dataset(&config)?;
    data.save(&a.out)?;
    record.seed = Some(a.seed);
    record.dataset_hash = Some(data.content_hash());
    record.config("classes", a.classes);
    record.config("difficulty", a.difficulty);
    record.config("base_count", a.base_count);
    record.config("imbalance", a.imbalance);
    record.config("sources", &a.sources);
    for split in Split::ALL {
        record.outputs.push(a.out.join(format!("{}.msws", split.as_str())));
        record.result(&format!("{}_samples", split.as_str()), data.get(split).len());
    }
    record.outputs.push(a.out.join("manifest.txt"));
    record.write(&a.out, started)?;
    println!(
        "wrote {} samples ({} train, {} val, {} test) to {}",
        data.train.len() + data.val.len() + data.test.len(),
        data.train.len(),
        data.val.len(),
        data.test.len(),
        a.out.display()
    );
    Ok(())
}

/// Files written by `train` and read by `eval`.
const MODEL_SPEC: &str = "model.txt";
const CHECKPOINT: &str = "checkpoint.msck";
const TRAINED: &str = "trained.txt";

fn train(a: TrainArgs, record: &mut RunRecord, started: Instant) -> CmdResult {
    let kind = ModelKind::parse(&a.model).map_err(|_| {
        Usage(format!(
            "unknown model `{}`; expected baseline, attention, ext1, ext2, ext3 or ext4",
            a.model
        ))
    })?;
    let data = load_data(&a.data)?;
    let mut p = a.training.pipeline(&data, &a.data)?;
    let names: Vec<&str> = a.source.iter().map(String::as_str).collect();
    let mut spec = p.spec(kind, &names, a.scale)?;
    if a.variant == VariantArg::ClsOnly {
        spec.variant = Variant::ClsOnly;
    }
    if let Some(w) = a.window {
        if kind != ModelKind::Attention {
            return Err(Usage("--window applies to attention models only".into()).into());
        }
        spec.sources[0].window = w;
    }
    spec.validate()?;
    prepare_out(&a.out, a.force)?;
    let m = p.run(&spec)?;
    let val = m.evaluate(&data, Split::Val)?;
    let test = m.evaluate(&data, Split::Test)?;

    write_atomic(&a.out.join(MODEL_SPEC), spec.to_text().as_bytes())?;
    m.checkpoint().save(&a.out.join(CHECKPOINT))?;
    write_atomic(&a.out.join("history.csv"), m.history.to_csv_string().as_bytes())?;
    let trained = format!("dataset_hash: {}\nconfig_hash: {:016x}\n", p.data_hash(), m.hash);
    write_atomic(&a.out.join(TRAINED), trained.as_bytes())?;
    let mut init = csv::Writer::from_writer(Vec::new());
    init.write_record(["target", "source", "from_prefix", "to_prefix", "params", "frozen"])
        .map_err(Error::from)?;
    for r in &p.log {
        init.write_record([
            r.target.as_str(),
            r.source.as_str(),
            r.from_prefix.as_str(),
            r.to_prefix.as_str(),
            &r.params.len().to_string(),
            if r.frozen { "1" } else { "0" },
        ])
        .map_err(Error::from)?;
    }
    let init = init.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(&a.out.join("init.csv"), &init)?;

    record.seed = Some(a.training.seed);
    record.dataset_hash = Some(p.data_hash().to_string());
    record.config("model", kind.as_str());
    record.config("sources", a.source.join(","));
    record.config("scale", a.scale);
    a.training.record(record);
    for f in [MODEL_SPEC, CHECKPOINT, "history.csv", TRAINED, "init.csv"] {
        record.outputs.push(a.out.join(f));
    }
    record.result("trainings_run", p.runs);
    record.result("best_epoch", m.best_epoch);
    record.result("params", m.store.param_count());
    record.result("val_normalized_accuracy", format!("{:.6}", val.normalized_accuracy));
    record.result("test_normalized_accuracy", format!("{:.6}", test.normalized_accuracy));
    record.write(&a.out, started)?;
    if p.runs == 0 {
        println!("cache hit: {} (no training needed)", m.label());
    }
    println!(
        "{}: {} params, val {:.4}, test {:.4}",
        m.label(),
        m.store.param_count(),
        val.normalized_accuracy,
        test.normalized_accuracy
    );
    Ok(())
}

fn read_field(text: &str, key: &str) -> Result<String> {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(": ")))
        .map(str::to_string)
        .ok_or_else(|| Error::format(format!("missing `{key}`")))
}

fn eval(a: EvalArgs, record: &mut RunRecord, started: Instant) -> CmdResult {
    let split = Split::parse(&a.split).map_err(|_| Usage(format!("unknown split `{}`", a.split)))?;
    let read = |f: &str| {
        std::fs::read_to_string(a.model.join(f))
            .map_err(|e| Error::Missing(format!("{}: {e}", a.model.join(f).display())))
    };
    let spec = ModelSpec::parse(&read(MODEL_SPEC)?)?;
    let trained = read(TRAINED)?;
    let expected_data = read_field(&trained, "dataset_hash")?;
    let config_hash = u64::from_str_radix(&read_field(&trained, "config_hash")?, 16)
        .map_err(|_| Error::format("bad config_hash"))?;
    let data = load_data(&a.data)?;
    let data_hash = data.content_hash();
    if data_hash != expected_data {
        return Err(Error::format(format!(
            "dataset hash mismatch: model was trained on {expected_data}, {} has {data_hash}",
            a.data.display()
        ))
        .into());
    }
    let ck = Checkpoint::load(&a.model.join(CHECKPOINT), Some(config_hash))?;
    let mut store = crate::tensor::ParamStore::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let net = Network::build(&spec, &mut store, &mut rng)?;
    ck.apply(&mut store)?;
    let sources = crate::train::source_indices(&spec, &data)?;
    let set = data.get(split);
    let ev = crate::train::evaluate(&net, &store, set, &sources)?;

    prepare_out(&a.out, a.force)?;
    let mut buf = Vec::new();
    write_report_csv(&ev.confusion, &mut buf)?;
    write_atomic(&a.out.join("metrics.csv"), &buf)?;
    let mut buf = Vec::new();
    ev.confusion.write_csv(&mut buf)?;
    write_atomic(&a.out.join("confusion.csv"), &buf)?;
    record.outputs.push(a.out.join("metrics.csv"));
    record.outputs.push(a.out.join("confusion.csv"));

    record.dataset_hash = Some(data_hash);
    record.config("model", a.model.display());
    record.config("split", split.as_str());
    record.result("normalized_accuracy", format!("{:.6}", ev.normalized_accuracy));
    match ev.kappa {
        Some(k) => record.result("kappa", format!("{k:.6}")),
        None => record.result("kappa", "undefined"),
    }
    println!("normalized accuracy {:.4}", ev.normalized_accuracy);
    if let Some(k) = ev.kappa {
        println!("kappa {k:.4}");
    }

    if !net.heads().is_empty() {
        let all: Vec<usize> = (0..set.len()).collect();
        let dumps = dump_regions(&net, &store, set, &sources, &all)?;
        let mut loc = csv::Writer::from_writer(Vec::new());
        loc.write_record(["source", "hit_rate", "samples"]).map_err(Error::from)?;
        for (src, rate) in hit_rates(&dumps) {
            println!("localization hit rate ({src}) {rate:.4}");
            record.result(&format!("localization_hit_rate.{src}"), format!("{rate:.6}"));
            loc.write_record([src, format!("{rate:.6}"), set.len().to_string()])
                .map_err(Error::from)?;
        }
        let loc = loc.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        write_atomic(&a.out.join("localization.csv"), &loc)?;
        record.outputs.push(a.out.join("localization.csv"));
        if a.dump_regions > 0 {
            let k = a.dump_regions.min(set.len());
            let heads = net.heads().len();
            let mut buf = Vec::new();
            write_regions_csv(&dumps[..k * heads], &mut buf)?;
            write_atomic(&a.out.join("regions.csv"), &buf)?;
            record.outputs.push(a.out.join("regions.csv"));
        }
    } else if a.dump_regions > 0 {
        return Err(Usage("--dump-regions needs a model with attention branches".into()).into());
    }
    record.write(&a.out, started)?;
    Ok(())
}

fn gradcheck(a: GradcheckArgs, record: &mut RunRecord, started: Instant) -> CmdResult {
    let mut checks = full_suite(a.seed)?;
    if a.negative_control {
        checks.push(negative_control(a.seed)?);
    }
    let mut failed = 0;
    let mut csv_out = csv::Writer::from_writer(Vec::new());
    csv_out
        .write_record(["check", "seed", "entries", "max_rel_err", "tolerance", "passed"])
        .map_err(Error::from)?;
    for c in &checks {
        let status = if c.passed() { "ok" } else { "FAIL" };
        println!("{status:>4}  {:<26} seed {} entries {:>5} max rel err {:.3e}", c.name, c.seed, c.checked, c.max_rel_err);
        if !c.passed() {
            failed += 1;
            eprintln!(
                "tolerance breach: {} (seed {}) max relative error {:.3e} > {:.0e}",
                c.name, c.seed, c.max_rel_err, c.tolerance
            );
        }
        csv_out
            .write_record([
                c.name.clone(),
                c.seed.to_string(),
                c.checked.to_string(),
                format!("{:.6e}", c.max_rel_err),
                format!("{:e}", c.tolerance),
                (c.passed() as u8).to_string(),
            ])
            .map_err(Error::from)?;
    }
    println!("{} checks, {} failed, {:.2}s", checks.len(), failed, started.elapsed().as_secs_f64());
    if let Some(out) = &a.out {
        prepare_out(out, a.force)?;
        let bytes = csv_out.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        write_atomic(&out.join("gradcheck.csv"), &bytes)?;
        record.seed = Some(a.seed);
        record.outputs.push(out.join("gradcheck.csv"));
        record.result("checks", checks.len());
        record.result("failed", failed);
        record.write(out, started)?;
    }
    if failed > 0 {
        return Err(Failure::Reported(EXIT_NUMERICAL));
    }
    Ok(())
}

fn sweep(a: SweepArgs, record: &mut RunRecord, started: Instant) -> CmdResult {
    let data = load_data(&a.data)?;
    let names: Vec<&str> = a.source.iter().map(String::as_str).collect();
    prepare_out(&a.out, a.force)?;
    let mut buf = Vec::new();
    let mut p = a.training.pipeline(&data, &a.data)?;
    match a.kind {
        SweepKind::Capacity => {
            let kind = ModelKind::parse(&a.model).map_err(|_| Usage(format!("unknown model `{}`", a.model)))?;
            let rows = capacity_sweep(&mut p, kind, &names, &a.scales)?;
            for r in &rows {
                println!("scale {}: {} params, test {:.4}", r.scale, r.params, r.test_accuracy);
            }
            write_capacity_csv(&rows, &mut buf)?;
            record.config("model", kind.as_str());
            record.config("scales", join(&a.scales));
        }
        SweepKind::Window => {
            let [source] = names.as_slice() else {
                return Err(Usage("window sweeps take exactly one --source".into()).into());
            };
            let rows = window_sweep(&mut p, source, &a.windows)?;
            for r in &rows {
                match r.test_accuracy {
                    Some(t) => println!("window {}: {} regions, test {:.4}", r.window, r.regions, t),
                    None => println!("window {}: {}", r.window, r.note),
                }
            }
            write_window_csv(&rows, &mut buf)?;
            record.config("windows", join(&a.windows));
        }
        SweepKind::Neighborhood => {
            let [source] = names.as_slice() else {
                return Err(Usage("neighborhood sweeps take exactly one --source".into()).into());
            };
            let m = &data.manifest;
            let generator = GeneratorConfig {
                base_count: m.base_count,
                imbalance: m.imbalance,
                difficulty: m.difficulty,
                ..GeneratorConfig::new(m.sources.clone(), m.classes, m.seed)
            };
            let config = a.training.config();
            config.validate()?;
            let rows = neighborhood_sweep(&generator, source, &a.sides, &config, a.training.width())?;
            for r in &rows {
                println!(
                    "side {}: {} regions, baseline {:.4}, attention {:.4}",
                    r.neighborhood, r.regions, r.baseline_accuracy, r.attention_accuracy
                );
            }
            write_neighborhood_csv(&rows, &mut buf)?;
            record.config("sides", join(&a.sides));
        }
    }
    write_atomic(&a.out.join("sweep.csv"), &buf)?;
    record.seed = Some(a.training.seed);
    record.dataset_hash = Some(p.data_hash().to_string());
    record.config("kind", format!("{:?}", a.kind).to_lowercase());
    record.config("sources", a.source.join(","));
    a.training.record(record);
    record.outputs.push(a.out.join("sweep.csv"));
    record.write(&a.out, started)?;
    Ok(())
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn report(a: ReportArgs) -> CmdResult {
    let y: Vec<&str> = a.y.iter().map(String::as_str).collect();
    let charts = a
        .inputs
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Missing(format!("{}: {e}", p.display())))?;
            let title = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            chart_from_csv(&title, &text, a.x.as_deref(), &y)
        })
        .collect::<Result<Vec<_>>>()?;
    let title = a.title.clone().unwrap_or_else(|| charts[0].title.clone());
    let chart = merge(&title, charts)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
    }
    write_atomic(&a.out, render_svg(&chart).as_bytes())?;
    println!("wrote {}", a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<OsString> {
        s.split_whitespace().map(OsString::from).collect()
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(argv("msattn")), EXIT_USAGE);
        assert_eq!(run(argv("msattn frobnicate")), EXIT_USAGE);
        assert_eq!(run(argv("msattn train --data x")), EXIT_USAGE);
        assert_eq!(run(argv("msattn --help")), EXIT_OK);
    }

    #[test]
    fn missing_dataset_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let cmd = format!(
            "msattn train --data {} --model baseline --source ref --out {}",
            dir.path().join("nope").display(),
            dir.path().join("out").display()
        );
        assert_eq!(run(argv(&cmd)), EXIT_DATA);
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::UndefinedKappa), EXIT_NUMERICAL);
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::format("x")), EXIT_DATA);
        assert_eq!(exit_code(&Error::HashMismatch { expected: 1, found: 2 }), EXIT_DATA);
    }

    #[test]
    fn record_text_lists_everything() {
        let mut r = RunRecord::new(&argv("msattn gen-data --out d"));
        r.seed = Some(4);
        r.config("classes", 10);
        r.outputs.push("d/train.msws".into());
        r.result("n", 3);
        let t = r.to_text();
        assert!(t.starts_with("command: msattn gen-data --out d\n"));
        for needle in ["seed: 4", "config.classes: 10", "output: d/train.msws", "result.n: 3", "duration_s:"] {
            assert!(t.contains(needle), "{t}");
        }
        assert_eq!(quote("a b"), "'a b'");
    }
}
