//! Command-line front end.
//!
//! Settings resolve in three layers: built-in defaults, then a flat
//! `key = value` file given with `--config`, then command-line flags. Every
//! command writes the resolved settings to `config.resolved` in its output
//! directory. Results go to stdout as `key=value` lines; diagnostics go to
//! stderr.
//!
//! Exit codes: 0 success, 2 bad arguments or configuration, 3 I/O or file
//! format failure, 4 pipeline failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::Error;
use crate::imgvol::load_volume;
use crate::nn::{load_model, save_model};
use crate::patches::{save_patches, Split, SplitAssignment};
use crate::phantom::{plan_corpus, write_corpus, PhantomParams};
use crate::pipeline::{
    build_datasets, evaluate, evaluate_subjects, extract_corpus, infer_damage_map, metrics_csv,
    save_damage_map, split_indices, sweep_patch_size, train_on_corpus, assign_splits, CorpusDir,
    TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_PIPELINE: i32 = 4;

pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const MODEL_FILE: &str = "model.fpcnn";
pub const SPLITS_FILE: &str = "splits.csv";

#[derive(Parser, Debug)]
#[command(name = "fibromap", version, about = "Myocardial damage maps from cine MR texture")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Flat `key = value` settings file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<String>,
    /// Output directory
    #[arg(long)]
    out: Option<String>,
    /// Worker threads for inference (0 = all cores)
    #[arg(long)]
    threads: Option<String>,
}

#[derive(Args, Debug, Default)]
struct DataArgs {
    /// Corpus directory with manifest.csv
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    patch_size: Option<String>,
    #[arg(long)]
    stride: Option<String>,
    /// Train,val,test subject fractions
    #[arg(long)]
    fractions: Option<String>,
}

#[derive(Args, Debug, Default)]
struct TrainArgs {
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    learning_rate: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    max_epochs: Option<String>,
    #[arg(long)]
    patience: Option<String>,
    /// on|off
    #[arg(long)]
    augment: Option<String>,
    /// on|off
    #[arg(long)]
    position: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic cohort
    PhantomGen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        subjects: Option<String>,
        #[arg(long)]
        lesioned: Option<String>,
        #[arg(long)]
        slices: Option<String>,
    },
    /// Split, extract, balance and normalize patches
    Extract {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train a classifier
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Evaluate a trained model on one split
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<String>,
        /// train|val|test
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        threshold: Option<String>,
        /// Also score subjects from dense maps (on|off)
        #[arg(long)]
        subjects: Option<String>,
    },
    /// Train one model per patch size
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Comma-separated odd sizes
        #[arg(long)]
        sizes: Option<String>,
        /// Balanced inventory below which a size is flagged
        #[arg(long)]
        min_balanced: Option<String>,
    },
    /// Dense damage map and lesion decision for one subject
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        cine: Option<String>,
        #[arg(long)]
        myo: Option<String>,
        #[arg(long)]
        threshold: Option<String>,
        /// File name stem of the written map
        #[arg(long)]
        stem: Option<String>,
    },
}

const COMMON_KEYS: &[(&str, &str)] = &[("seed", "1"), ("out", "."), ("threads", "1")];
const DATA_KEYS: &[(&str, &str)] = &[
    ("data", ""),
    ("patch_size", "11"),
    ("stride", "auto"),
    ("fractions", "0.72,0.14,0.14"),
];
const TRAIN_KEYS: &[(&str, &str)] = &[
    ("channels", "8,16"),
    ("hidden", "32"),
    ("learning_rate", "0.001"),
    ("batch_size", "64"),
    ("max_epochs", "100"),
    ("patience", "20"),
    ("augment", "on"),
    ("position", "on"),
];

/// A command failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. }
            | Error::MalformedHeader { .. }
            | Error::DataLength { .. }
            | Error::BadVersion(_) => EXIT_IO,
            _ => EXIT_PIPELINE,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Resolved flat settings for one command.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    fn resolve(
        tables: &[&[(&str, &str)]],
        file: Option<&Path>,
        flags: &[(&str, &Option<String>)],
    ) -> CliResult<Self> {
        let mut values = BTreeMap::new();
        for table in tables {
            for (k, v) in *table {
                values.insert(k.to_string(), v.to_string());
            }
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError {
                code: EXIT_IO,
                message: format!("cannot read config {}: {e}", path.display()),
            })?;
            for (k, v) in parse_config(&text)? {
                if !values.contains_key(&k) {
                    return Err(CliError::usage(format!(
                        "unknown key `{k}` in {}",
                        path.display()
                    )));
                }
                values.insert(k, v);
            }
        }
        for (k, v) in flags {
            if let Some(v) = v {
                values.insert(k.to_string(), v.clone());
            }
        }
        Ok(RunConfig { values })
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map_or("", String::as_str)
    }

    fn required(&self, key: &str) -> CliResult<&str> {
        match self.get(key) {
            "" => Err(CliError::usage(format!("`{key}` is required"))),
            v => Ok(v),
        }
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> CliResult<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| CliError::usage(format!("bad value `{v}` for `{key}`")))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> CliResult<Vec<T>> {
        self.get(key)
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| CliError::usage(format!("bad list `{}` for `{key}`", self.get(key))))
            })
            .collect()
    }

    fn switch(&self, key: &str) -> CliResult<bool> {
        match self.get(key) {
            "on" | "true" | "1" => Ok(true),
            "off" | "false" | "0" => Ok(false),
            v => Err(CliError::usage(format!("`{key}` must be on or off, got `{v}`"))),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    fn out_dir(&self) -> CliResult<PathBuf> {
        let dir = PathBuf::from(self.get("out"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    fn write_resolved(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    fn train_config(&self) -> CliResult<TrainConfig> {
        let fractions: Vec<f64> = self.list("fractions")?;
        let fractions: [f64; 3] = fractions
            .try_into()
            .map_err(|_| CliError::usage("`fractions` needs three values"))?;
        let channels: Vec<usize> = self.list("channels")?;
        let channels: [usize; 2] = channels
            .try_into()
            .map_err(|_| CliError::usage("`channels` needs two values"))?;
        let stride = match self.get("stride") {
            "auto" | "" => None,
            _ => Some(self.parse("stride")?),
        };
        let cfg = TrainConfig {
            patch_size: self.parse("patch_size")?,
            stride,
            fractions,
            channels,
            hidden: self.parse("hidden")?,
            learning_rate: self.parse("learning_rate")?,
            batch_size: self.parse("batch_size")?,
            max_epochs: self.parse("max_epochs")?,
            patience: self.parse("patience")?,
            augment: self.switch("augment")?,
            position_features: self.switch("position")?,
            seed: self.parse("seed")?,
        };
        cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(cfg)
    }

    /// Data and split settings only, for commands that do not train.
    fn data_config(&self) -> CliResult<TrainConfig> {
        let mut full = self.clone();
        for (k, v) in TRAIN_KEYS {
            full.values.entry(k.to_string()).or_insert_with(|| v.to_string());
        }
        full.train_config()
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> CliResult<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("line {}: expected `key = value`", n + 1)))?;
        let k = k.trim().to_string();
        if out.iter().any(|(seen, _)| *seen == k) {
            return Err(CliError::usage(format!("line {}: duplicate key `{k}`", n + 1)));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

/// Runs one command line and returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if code == EXIT_OK {
                let _ = write!(stdout, "{text}");
            } else {
                let _ = write!(stderr, "{text}");
            }
            return code;
        }
    };
    let mut lines = Vec::new();
    match dispatch(cli.command, &mut lines) {
        Ok(()) => {
            for (k, v) in lines {
                let _ = writeln!(stdout, "{k}={v}");
            }
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {}", e.message);
            e.code
        }
    }
}

type Lines = Vec<(String, String)>;

fn emit(lines: &mut Lines, key: impl Into<String>, value: impl ToString) {
    lines.push((key.into(), value.to_string()));
}

fn set_threads(cfg: &RunConfig) -> CliResult<()> {
    let n: usize = cfg.parse("threads")?;
    // the global pool can only be built once per process; later calls keep it
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(command: Command, lines: &mut Lines) -> CliResult<()> {
    match command {
        Command::PhantomGen {
            common,
            subjects,
            lesioned,
            slices,
        } => {
            let defaults = PhantomParams::default();
            let phantom_keys = [
                ("subjects", "75".to_string()),
                ("lesioned", "35".to_string()),
                ("slices", defaults.dims[2].to_string()),
            ];
            let table: Vec<(&str, &str)> = phantom_keys.iter().map(|(k, v)| (*k, v.as_str())).collect();
            let cfg = RunConfig::resolve(
                &[COMMON_KEYS, &table],
                common.config.as_deref(),
                &[
                    ("seed", &common.seed),
                    ("out", &common.out),
                    ("threads", &common.threads),
                    ("subjects", &subjects),
                    ("lesioned", &lesioned),
                    ("slices", &slices),
                ],
            )?;
            cmd_phantom_gen(&cfg, lines)
        }
        Command::Extract { common, data } => {
            let cfg = RunConfig::resolve(
                &[COMMON_KEYS, DATA_KEYS],
                common.config.as_deref(),
                &[common_flags(&common), data_flags(&data)].concat(),
            )?;
            cmd_extract(&cfg, lines)
        }
        Command::Train {
            common,
            data,
            train,
        } => {
            let cfg = RunConfig::resolve(
                &[COMMON_KEYS, DATA_KEYS, TRAIN_KEYS],
                common.config.as_deref(),
                &[common_flags(&common), data_flags(&data), train_flags(&train)].concat(),
            )?;
            cmd_train(&cfg, lines)
        }
        Command::Eval {
            common,
            model,
            split,
            threshold,
            subjects,
        } => {
            let cfg = RunConfig::resolve(
                &[
                    COMMON_KEYS,
                    &[
                        ("model", ""),
                        ("split", "test"),
                        ("threshold", "0.5"),
                        ("subjects", "on"),
                    ],
                ],
                common.config.as_deref(),
                &[
                    common_flags(&common),
                    vec![
                        ("model", &model),
                        ("split", &split),
                        ("threshold", &threshold),
                        ("subjects", &subjects),
                    ],
                ]
                .concat(),
            )?;
            cmd_eval(&cfg, lines)
        }
        Command::Sweep {
            common,
            data,
            train,
            sizes,
            min_balanced,
        } => {
            let cfg = RunConfig::resolve(
                &[
                    COMMON_KEYS,
                    DATA_KEYS,
                    TRAIN_KEYS,
                    &[("sizes", "5,7,9,11"), ("min_balanced", "1000")],
                ],
                common.config.as_deref(),
                &[
                    common_flags(&common),
                    data_flags(&data),
                    train_flags(&train),
                    vec![("sizes", &sizes), ("min_balanced", &min_balanced)],
                ]
                .concat(),
            )?;
            cmd_sweep(&cfg, lines)
        }
        Command::Predict {
            common,
            model,
            cine,
            myo,
            threshold,
            stem,
        } => {
            let cfg = RunConfig::resolve(
                &[
                    COMMON_KEYS,
                    &[
                        ("model", ""),
                        ("cine", ""),
                        ("myo", ""),
                        ("threshold", "0.5"),
                        ("stem", "damage"),
                    ],
                ],
                common.config.as_deref(),
                &[
                    common_flags(&common),
                    vec![
                        ("model", &model),
                        ("cine", &cine),
                        ("myo", &myo),
                        ("threshold", &threshold),
                        ("stem", &stem),
                    ],
                ]
                .concat(),
            )?;
            cmd_predict(&cfg, lines)
        }
    }
}

fn common_flags(c: &Common) -> Vec<(&'static str, &Option<String>)> {
    vec![("seed", &c.seed), ("out", &c.out), ("threads", &c.threads)]
}

fn data_flags(d: &DataArgs) -> Vec<(&'static str, &Option<String>)> {
    vec![
        ("data", &d.data),
        ("patch_size", &d.patch_size),
        ("stride", &d.stride),
        ("fractions", &d.fractions),
    ]
}

fn train_flags(t: &TrainArgs) -> Vec<(&'static str, &Option<String>)> {
    vec![
        ("channels", &t.channels),
        ("hidden", &t.hidden),
        ("learning_rate", &t.learning_rate),
        ("batch_size", &t.batch_size),
        ("max_epochs", &t.max_epochs),
        ("patience", &t.patience),
        ("augment", &t.augment),
        ("position", &t.position),
    ]
}

fn cmd_phantom_gen(cfg: &RunConfig, lines: &mut Lines) -> CliResult<()> {
    set_threads(cfg)?;
    let seed: u64 = cfg.parse("seed")?;
    let n: usize = cfg.parse("subjects")?;
    let n_les: usize = cfg.parse("lesioned")?;
    let slices: usize = cfg.parse("slices")?;
    if n == 0 {
        return Err(CliError::usage("`subjects` must be >= 1"));
    }
    if n_les > n {
        return Err(CliError::usage("`lesioned` cannot exceed `subjects`"));
    }
    if slices == 0 {
        return Err(CliError::usage("`slices` must be >= 1"));
    }
    let mut params = PhantomParams::for_master_seed(seed);
    params.dims[2] = slices;
    let plans = plan_corpus(n, n_les, &params)?;
    let dir = cfg.out_dir()?;
    write_corpus(&plans, &dir)?;
    cfg.write_resolved(&dir)?;
    emit(lines, "subjects", n);
    emit(lines, "lesioned", n_les);
    emit(lines, "volumes", 3 * n);
    emit(lines, "manifest", dir.join("manifest.csv").display());
    Ok(())
}

fn open_corpus(cfg: &RunConfig) -> CliResult<CorpusDir> {
    Ok(CorpusDir::open(cfg.required("data")?)?)
}

fn cmd_extract(cfg: &RunConfig, lines: &mut Lines) -> CliResult<()> {
    set_threads(cfg)?;
    let tc = cfg.data_config()?;
    let source = open_corpus(cfg)?;
    let corpus = extract_corpus(&source, tc.patch_size, tc.stride())?;
    let assignment = assign_splits(&corpus.subjects, tc.fractions, tc.seed)?;
    let ds = build_datasets(&corpus, &assignment, tc.seed)?;
    let dir = cfg.out_dir()?;
    write_text(&dir.join(SPLITS_FILE), &assignment.to_csv())?;
    emit(lines, "patches", corpus.total());
    for split in [Split::Train, Split::Val, Split::Test] {
        let d = ds.get(split);
        save_patches(d, dir.join(format!("patches_{split}.bin")))?;
        emit(lines, format!("{split}_patches"), d.len());
    }
    emit(lines, "norm_lo", ds.norm.lo);
    emit(lines, "norm_hi", ds.norm.hi);
    cfg.write_resolved(&dir)?;
    Ok(())
}

fn cmd_train(cfg: &RunConfig, lines: &mut Lines) -> CliResult<()> {
    set_threads(cfg)?;
    let tc = cfg.train_config()?;
    let source = open_corpus(cfg)?;
    let corpus = extract_corpus(&source, tc.patch_size, tc.stride())?;
    let run = train_on_corpus(&corpus, &tc)?;
    let dir = cfg.out_dir()?;
    let model_path = dir.join(MODEL_FILE);
    save_model(&run.outcome.model, &model_path)?;
    write_text(&dir.join("metrics.csv"), &metrics_csv(&run.outcome.history))?;
    write_text(&dir.join(SPLITS_FILE), &run.datasets.assignment.to_csv())?;
    cfg.write_resolved(&dir)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        emit(lines, format!("{split}_patches"), run.datasets.get(split).len());
    }
    emit(lines, "best_epoch", run.outcome.best_epoch);
    emit(lines, "epochs_run", run.outcome.epochs_run);
    emit(lines, "val_accuracy", run.outcome.best_val.accuracy);
    emit(lines, "model", model_path.display());
    Ok(())
}

/// Settings stored next to a model by `train`.
fn training_settings(model_path: &Path) -> CliResult<RunConfig> {
    let dir = model_path.parent().unwrap_or(Path::new("."));
    let path = dir.join(RESOLVED_CONFIG);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let values = parse_config(&text)?.into_iter().collect();
    Ok(RunConfig { values })
}

fn cmd_eval(cfg: &RunConfig, lines: &mut Lines) -> CliResult<()> {
    set_threads(cfg)?;
    let split: Split = cfg
        .get("split")
        .parse()
        .map_err(|_| CliError::usage(format!("bad split `{}`", cfg.get("split"))))?;
    let threshold: f64 = cfg.parse("threshold")?;
    let score_subjects = cfg.switch("subjects")?;
    let model_path = PathBuf::from(cfg.required("model")?);
    let model = load_model(&model_path)?;
    let trained = training_settings(&model_path)?;
    let tc = trained.train_config()?;
    if tc.model_spec() != model.spec {
        return Err(Error::FingerprintMismatch {
            expected: tc.model_spec().fingerprint(),
            found: model.fingerprint(),
        }
        .into());
    }
    let splits_path = model_path
        .parent()
        .unwrap_or(Path::new("."))
        .join(SPLITS_FILE);
    let text = std::fs::read_to_string(&splits_path).map_err(|e| Error::io(&splits_path, e))?;
    let assignment = SplitAssignment::from_csv(&text, tc.fractions, tc.seed)?;
    let source = open_corpus(&trained)?;
    let corpus = extract_corpus(&source, tc.patch_size, tc.stride())?;
    let ds = build_datasets(&corpus, &assignment, tc.seed)?;
    let m = evaluate(&model, ds.get(split))?;
    emit(lines, format!("{split}_accuracy"), m.accuracy);
    emit(lines, format!("{split}_loss"), m.loss);
    emit(lines, format!("{split}_patches"), m.n);
    emit(lines, format!("{split}_tp"), m.true_pos);
    emit(lines, format!("{split}_tn"), m.true_neg);
    emit(lines, format!("{split}_fp"), m.false_pos);
    emit(lines, format!("{split}_fn"), m.false_neg);
    if score_subjects {
        let idx = split_indices(&source, &assignment, split);
        let results = evaluate_subjects(&source, &idx, &model, threshold)?;
        let correct = results.iter().filter(|r| r.correct()).count();
        emit(lines, format!("{split}_subjects"), results.len());
        emit(
            lines,
            format!("{split}_subject_accuracy"),
            correct as f64 / results.len().max(1) as f64,
        );
    }
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig, lines: &mut Lines) -> CliResult<()> {
    set_threads(cfg)?;
    let tc = cfg.train_config()?;
    let sizes: Vec<usize> = cfg.list("sizes")?;
    if let Some(p) = sizes.iter().find(|p| *p % 2 == 0 || **p == 0) {
        return Err(CliError::usage(format!("patch size {p} is not odd")));
    }
    let min_balanced: usize = cfg.parse("min_balanced")?;
    let source = open_corpus(cfg)?;
    let result = sweep_patch_size(&source, &sizes, &tc, min_balanced)?;
    let dir = cfg.out_dir()?;
    write_text(&dir.join("sweep.csv"), &result.to_csv())?;
    cfg.write_resolved(&dir)?;
    for r in &result.rows {
        emit(lines, format!("p{}_val_accuracy", r.patch_size), r.val_accuracy);
        emit(lines, format!("p{}_patches", r.patch_size), r.patch_count);
    }
    if let Some(best) = result.best() {
        emit(lines, "best_patch_size", best.patch_size);
    }
    Ok(())
}

fn cmd_predict(cfg: &RunConfig, lines: &mut Lines) -> CliResult<()> {
    set_threads(cfg)?;
    let threshold: f64 = cfg.parse("threshold")?;
    let model = load_model(cfg.required("model")?)?;
    let cine = load_volume(cfg.required("cine")?)?;
    let myo = load_volume(cfg.required("myo")?)?;
    let map = infer_damage_map(&model, &cine, &myo, threshold)?;
    let dir = cfg.out_dir()?;
    let path = save_damage_map(&map, &dir, cfg.get("stem"))?;
    cfg.write_resolved(&dir)?;
    emit(lines, "mean_score", map.mean_score);
    emit(
        lines,
        "decision",
        if map.decision { "positive" } else { "negative" },
    );
    emit(lines, "map", path.display());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}
