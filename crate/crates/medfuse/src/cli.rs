//! Command-line verbs. `run` returns the process exit code:
//! 0 success, 1 usage error, 2 data or format error, 3 numeric failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use medfuse_core::data::{stratified_split, synth_generate, LabelSchema, LabeledRecord, SynthConfig};
use medfuse_core::gradcheck::{check_module, CheckModule};
use medfuse_core::modality::{Modality, ModalitySet};
use medfuse_core::train::{self, direction, EvalOptions, RunConfig};

use crate::error::{Error, FormatError, Result};
use crate::mmeb::{read_mmeb, write_mmeb, MmebFile};
use crate::mmwt::{read_mmwt, write_mmwt, LoadedCheckpoint};
use crate::{config, report};

#[derive(Debug, Parser)]
#[command(name = "medfuse", version, about = "Gated multimodal fusion over precomputed embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired-modality cohort.
    Synth(SynthArgs),
    /// Stratified train/val/test split of a dataset.
    Split(SplitArgs),
    /// Train a model for one task.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a metric report.
    Eval(EvalArgs),
    /// Rank gallery records for each query with a retrieval checkpoint.
    Retrieve(RetrieveArgs),
    /// Export per-block attention masses.
    Attn(AttnArgs),
    /// Compare analytic and central-difference gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 600)]
    pub n: usize,
    /// Feature dimension d.
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Tokens per modality L.
    #[arg(long, default_value_t = 4)]
    pub tokens: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Latent dimension k (at most d).
    #[arg(long, default_value_t = 6)]
    pub latent: usize,
    /// Observation noise standard deviation.
    #[arg(long, default_value_t = 0.5)]
    pub sigma: f64,
    /// Gain on latent coordinates a modality does not own.
    #[arg(long, default_value_t = 0.1)]
    pub attenuation: f64,
    /// Probability that a record is censored.
    #[arg(long, default_value_t = 0.3)]
    pub censoring: f64,
    /// Label schema written to the file.
    #[arg(long, default_value = "diagnosis", value_parser = parse_schema)]
    pub schema: LabelSchema,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// train:val:test proportions.
    #[arg(long, default_value = "5:1:1")]
    pub ratio: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Writes PREFIX.train.mmeb, PREFIX.val.mmeb and PREFIX.test.mmeb.
    #[arg(long)]
    pub out_prefix: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// diagnosis, prognosis or retrieval.
    #[arg(long, value_parser = parse_schema)]
    pub task: LabelSchema,
    #[arg(long)]
    pub data: PathBuf,
    /// Validation set. Without it a stratified seventh of --data is held out.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Config file of `key = value` lines; task defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the history lines to this file.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Override a config key, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Override the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint trained with the same resolved config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Modalities visible at evaluation, e.g. `ts`.
    #[arg(long, default_value = "tsm", value_parser = parse_modalities)]
    pub modalities: ModalitySet,
    /// Bootstrap resamples; the checkpoint's setting when absent.
    #[arg(long)]
    pub resamples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_modality)]
    pub query: Modality,
    #[arg(long, value_parser = parse_modality)]
    pub gallery: Modality,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
}

#[derive(Debug, Args)]
pub struct AttnArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// all, fusion, guidance, response or losses.
    #[arg(long, default_value = "all")]
    pub module: String,
    #[arg(long, default_value_t = 11)]
    pub seed: u64,
}

fn parse_schema(s: &str) -> std::result::Result<LabelSchema, String> {
    s.parse().map_err(|_| format!("`{}` is not one of diagnosis, prognosis, retrieval", s))
}

fn parse_modalities(s: &str) -> std::result::Result<ModalitySet, String> {
    ModalitySet::parse(s).ok_or_else(|| format!("`{}` is not a modality set", s))
}

fn parse_modality(s: &str) -> std::result::Result<Modality, String> {
    Modality::parse(s).ok_or_else(|| format!("`{}` is not lab, ecg or echo", s))
}

pub fn exit_code(e: &Error) -> i32 {
    use medfuse_core::Error as Core;
    match e {
        Error::Usage(_) | Error::Config(_) => 1,
        Error::Io { .. } | Error::Format { .. } => 2,
        Error::GradCheck(_) => 3,
        Error::Core(c) => match c {
            Core::NonFinite { .. }
            | Core::NonFiniteLoss(_)
            | Core::DivisionByZero { .. }
            | Core::DegenerateEmbedding
            | Core::RetryCapExceeded(_)
            | Core::Undefined(_) => 3,
            _ => 2,
        },
    }
}

/// Parse `argv` (including the program name) and run the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            exit_code(&e)
        }
    }
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Attn(a) => attn(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn format_err(path: &Path, source: FormatError) -> Error {
    Error::Format {
        path: path.into(),
        source,
    }
}

pub fn load_dataset(path: &Path) -> Result<MmebFile> {
    read_mmeb(&read_bytes(path)?).map_err(|e| format_err(path, e))
}

pub fn save_dataset(path: &Path, file: &MmebFile) -> Result<()> {
    let bytes = write_mmeb(file).map_err(|e| format_err(path, e))?;
    write_bytes(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    read_mmwt(&read_bytes(path)?).map_err(|e| format_err(path, e))
}

fn require_schema(file: &MmebFile, task: LabelSchema, path: &Path) -> Result<()> {
    if file.schema != task {
        return Err(medfuse_core::Error::SchemaMismatch {
            task: task.name(),
            detail: format!("{} holds {} records", path.display(), file.schema),
        }
        .into());
    }
    Ok(())
}

fn strata(records: &[LabeledRecord], schema: LabelSchema) -> Vec<i64> {
    records
        .iter()
        .map(|r| match schema {
            LabelSchema::Diagnosis => r.class.unwrap_or(-1) as i64,
            LabelSchema::Prognosis => r.survival.map_or(-1, |s| s.event as i64),
            LabelSchema::Retrieval => 0,
        })
        .collect()
}

fn subset_file(file: &MmebFile, idx: &[usize]) -> MmebFile {
    MmebFile {
        records: idx.iter().map(|&i| file.records[i].clone()).collect(),
        ..file.clone()
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n: a.n,
        latent_dim: a.latent,
        feature_dim: a.dim,
        token_len: a.tokens,
        noise_sigma: a.sigma,
        attenuation: a.attenuation,
        censoring: a.censoring,
        seed: a.seed,
    };
    eprintln!("synth: {:?} schema={}", cfg, a.schema);
    let records = synth_generate(&cfg)?.into_iter().map(|r| r.strip_to(a.schema)).collect();
    let file = MmebFile::from_records(a.schema, records).map_err(|e| format_err(&a.out, e))?;
    save_dataset(&a.out, &file)
}

fn parse_ratio(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = s
        .split(':')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Usage(format!("ratio `{}` is not of the form a:b:c", s)))?;
    match parts[..] {
        [a, b, c] if a > 0 && a + b + c > 0 => Ok([a, b, c]),
        _ => Err(Error::Usage(format!("ratio `{}` needs three parts with a positive first", s))),
    }
}

fn split(a: SplitArgs) -> Result<()> {
    let ratio = parse_ratio(&a.ratio)?;
    eprintln!("split: ratio={:?} seed={}", ratio, a.seed);
    let file = load_dataset(&a.input)?;
    let s = stratified_split(&strata(&file.records, file.schema), ratio, a.seed)?;
    for (part, idx) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
        let mut path = a.out_prefix.clone().into_os_string();
        path.push(format!(".{}.mmeb", part));
        save_dataset(Path::new(&path), &subset_file(&file, idx))?;
        eprintln!("split: {} {} records", part, idx.len());
    }
    Ok(())
}

/// Resolve the run configuration from the train flags.
pub fn resolve_config(a: &TrainArgs) -> Result<RunConfig> {
    let text = match &a.config {
        Some(p) => Some(String::from_utf8(read_bytes(p)?).map_err(|_| Error::Usage(format!("{} is not UTF-8", p.display())))?),
        None => None,
    };
    Ok(config::resolve(Some(a.task), text.as_deref(), &a.set, a.seed)?)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a)?;
    eprint!("{}", config::to_text(&cfg).lines().map(|l| format!("# {}\n", l)).collect::<String>());

    let data = load_dataset(&a.data)?;
    require_schema(&data, cfg.task, &a.data)?;
    let (train_recs, val_recs) = match &a.val {
        Some(p) => {
            let v = load_dataset(p)?;
            require_schema(&v, cfg.task, p)?;
            (data.records, v.records)
        }
        None => {
            let s = stratified_split(&strata(&data.records, data.schema), [6, 1, 0], cfg.seed)?;
            let pick = |idx: &[usize]| idx.iter().map(|&i| data.records[i].clone()).collect::<Vec<_>>();
            (pick(&s.train), pick(&s.val))
        }
    };

    let resume = match &a.resume {
        Some(p) => {
            let loaded = load_checkpoint(p)?;
            loaded.check_resume(&cfg).map_err(|e| format_err(p, e))?;
            Some(loaded.checkpoint.params)
        }
        None => None,
    };

    let mut history_out = Vec::new();
    let stdout = std::io::stdout();
    let outcome = train::train_task_from(&cfg, resume.as_ref(), &train_recs, &val_recs, |_, h, _| {
        let line = report::history_line(h);
        let _ = writeln!(stdout.lock(), "{}", line);
        history_out.push(line);
        false
    })?;
    if let Some(p) = &a.history {
        write_lines(p, &history_out)?;
    }
    eprintln!(
        "train: best step {:?}, best validation metric {:?}, stopped early: {}",
        outcome.best_step, outcome.best_metric, outcome.stopped_early
    );
    write_bytes(&a.out, &write_mmwt(&outcome.checkpoint))
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?.checkpoint;
    let data = load_dataset(&a.data)?;
    require_schema(&data, ckpt.config.task, &a.data)?;
    let mut opts = EvalOptions::from_config(&ckpt.config);
    opts.subset = a.modalities;
    if let Some(r) = a.resamples {
        opts.resamples = r;
    }
    eprintln!(
        "eval: task={} modalities={} resamples={} seed={}",
        ckpt.config.task, opts.subset, opts.resamples, opts.seed
    );
    let rep = train::evaluate_task(&ckpt, &data.records, &opts)?;
    let lines = report::eval_lines(&rep, &opts.subset.tag());
    for m in &rep.metrics {
        eprintln!("eval: {} = {:.4}", m.name, m.point);
    }
    write_lines(&a.report, &lines)
}

fn retrieve(a: RetrieveArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?.checkpoint;
    if ckpt.config.task != LabelSchema::Retrieval {
        return Err(medfuse_core::Error::SchemaMismatch {
            task: ckpt.config.task.name(),
            detail: "retrieve needs a retrieval checkpoint".into(),
        }
        .into());
    }
    if a.query == a.gallery {
        return Err(Error::Usage("query and gallery modalities must differ".into()));
    }
    let data = load_dataset(&a.data)?;
    let model = ckpt.model()?;
    let q = model.embeddings(&ckpt.params, &data.records, a.query)?;
    let g = model.embeddings(&ckpt.params, &data.records, a.gallery)?;
    let dir = direction(a.query, a.gallery);
    eprintln!("retrieve: {} over {} records, top {}", dir, data.records.len(), a.top);
    let mut lines = Vec::with_capacity(data.records.len());
    for i in 0..q.rows() {
        let qi = q.row_slice(i);
        let mut scored: Vec<(usize, f64)> = (0..g.rows())
            .map(|j| (j, qi.iter().zip(g.row_slice(j)).map(|(x, y)| x * y).sum()))
            .collect();
        scored.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        let ranked: Vec<(String, f64)> = scored
            .iter()
            .take(a.top)
            .map(|&(j, s)| (data.records[j].id.clone(), s))
            .collect();
        lines.push(report::retrieval_line(&data.records[i].id, &dir, &ranked));
    }
    write_lines(&a.out, &lines)
}

fn attn(a: AttnArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?.checkpoint;
    let data = load_dataset(&a.data)?;
    eprintln!("attn: task={} records={}", ckpt.config.task, data.records.len());
    let summary = train::export_attention(&ckpt, &data.records)?;
    write_lines(&a.out, &report::attention_lines(&summary))
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let modules = CheckModule::parse_list(&a.module).map_err(|e| Error::Usage(e.to_string()))?;
    eprintln!("gradcheck: modules={} seed={}", a.module, a.seed);
    let mut failed = Vec::new();
    let mut worst = 0.0f64;
    for m in modules {
        let r = check_module(m, a.seed)?;
        println!("{}", report::gradcheck_line(&r));
        worst = worst.max(r.max_rel_err());
        if !r.passed() {
            failed.push(m.name());
        }
    }
    println!("max relative error {:.3e}", worst);
    if !failed.is_empty() {
        return Err(Error::GradCheck(format!("{} above tolerance", failed.join(", "))));
    }
    Ok(())
}
