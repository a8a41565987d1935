use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use tcfusion::attribution::{
    attribute_dataset, feature_names, map_tokens_to_categories, shap_confidence_intervals, CategoryLexicon,
};
use tcfusion::harness::{
    cross_validate, emit_report, markdown_table, report_from_csv, report_from_json, run_transfer,
    train, transfer_markdown, version_string, write_checkpoint, EvaluationReport, ReportFormat, RunConfig,
};
use tcfusion::synth::{generate_dataset, read_jsonl, write_jsonl, ContextTag, ScenarioConfig, SequenceSample};
use tcfusion::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "tcfusion", version, about = "Temporal context fusion experiments")]
struct Cli {
    /// JSON config: a scenario for `synth`, a run config otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset as JSON lines.
    Synth {
        #[arg(long)]
        n_samples: Option<usize>,
    },
    /// Train one model on all selected samples and write a checkpoint.
    Train(DataArgs),
    /// Cross-validate and write an evaluation report.
    Cv {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Train on each context, test on the others.
    Transfer {
        #[command(flatten)]
        data: DataArgs,
        /// Contexts to cross; defaults to every context present in the data.
        #[arg(long, value_delimiter = ',')]
        contexts: Vec<ContextTag>,
    },
    /// Gradient x input attributions with fold confidence intervals.
    Attribute {
        #[command(flatten)]
        data: DataArgs,
        /// `word<TAB>category` lexicon used with `--tokens`.
        #[arg(long, requires = "tokens")]
        lexicon: Option<PathBuf>,
        /// Whitespace-separated words to map onto lexicon categories.
        #[arg(long, requires = "lexicon")]
        tokens: Option<PathBuf>,
    },
    /// Convert saved reports (JSON or CSV) to another format.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Markdown)]
        format: Format,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    /// JSON-lines datasets; replaces the config's `data` list.
    #[arg(long)]
    data: Vec<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Json,
    Csv,
    Markdown,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Json => ReportFormat::Json,
            Format::Csv => ReportFormat::Csv,
            Format::Markdown => ReportFormat::Markdown,
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.display().to_string(), source: e }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(v)? + "\n"))
}

fn run_config(cli: &Cli, data: &DataArgs) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if !data.data.is_empty() {
        cfg.data = data.data.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(cfg: &RunConfig) -> Result<Vec<SequenceSample>> {
    if cfg.data.is_empty() {
        return Err(Error::Config("no datasets given (use --data or the config's data list)".into()));
    }
    let mut all = Vec::new();
    for p in &cfg.data {
        all.extend(read_jsonl(p)?);
    }
    Ok(all)
}

fn run(cli: &Cli) -> Result<Value> {
    std::fs::create_dir_all(&cli.out).map_err(|e| io_err(&cli.out, e))?;
    let out = &cli.out;
    match &cli.command {
        Command::Synth { n_samples } => {
            let mut sc: ScenarioConfig = match &cli.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
                    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
                None => ScenarioConfig::default(),
            };
            if let Some(s) = cli.seed {
                sc.seed = s;
            }
            if let Some(n) = n_samples {
                sc.n_samples = *n;
            }
            let data = generate_dataset(&sc)?;
            write_jsonl(&out.join("data.jsonl"), &data)?;
            Ok(json!({ "config": sc, "files": ["data.jsonl"] }))
        }
        Command::Train(args) => {
            let cfg = run_config(cli, args)?;
            let data = load_data(&cfg)?;
            let selected = cfg.select(&data);
            let outcome = train(&cfg, &selected)?;
            write_checkpoint(&out.join("model.cfus"), &outcome.model, &cfg)?;
            let mut w = csv::Writer::from_path(out.join("curve.csv"))?;
            w.write_record(["epoch", "total", "task_fused", "task_audio", "task_text", "l_co"])?;
            for r in &outcome.curve {
                let l = &r.loss;
                w.write_record(
                    [r.epoch as f64, l.total, l.task_fused, l.task_audio, l.task_text, l.l_co].map(|x| x.to_string()),
                )?;
            }
            w.flush().map_err(|e| io_err(&out.join("curve.csv"), e))?;
            Ok(json!({ "config": cfg, "files": ["model.cfus", "curve.csv"] }))
        }
        Command::Cv { data, format } => {
            let cfg = run_config(cli, data)?;
            let run = cross_validate(&cfg, &load_data(&cfg)?)?;
            let files = emit_report(&run.report, (*format).into(), out)?;
            for (f, m) in run.models.iter().enumerate() {
                write_checkpoint(&out.join(format!("fold{f}.cfus")), m, &cfg)?;
            }
            Ok(json!({ "config": cfg, "files": file_names(&files) }))
        }
        Command::Transfer { data, contexts } => {
            let cfg = run_config(cli, data)?;
            let samples = load_data(&cfg)?;
            let contexts = if contexts.is_empty() {
                ContextTag::ALL.into_iter().filter(|c| samples.iter().any(|s| s.context_tag == *c)).collect()
            } else {
                contexts.clone()
            };
            let m = run_transfer(&cfg, &samples, &contexts)?;
            write_json(&out.join("transfer.json"), &m)?;
            write(&out.join("transfer.md"), &transfer_markdown(&m))?;
            Ok(json!({ "config": cfg, "files": ["transfer.json", "transfer.md"] }))
        }
        Command::Attribute { data, lexicon, tokens } => {
            let cfg = run_config(cli, data)?;
            let samples = load_data(&cfg)?;
            let run = cross_validate(&cfg, &samples)?;
            let by_id: std::collections::HashMap<&str, &SequenceSample> =
                samples.iter().map(|s| (s.id.as_str(), s)).collect();
            let mut per_fold = Vec::new();
            for (model, fold) in run.models.iter().zip(&run.report.folds) {
                let test: Vec<SequenceSample> = fold.test_ids.iter().map(|id| by_id[id.as_str()].clone()).collect();
                per_fold.push(attribute_dataset(model, &model.prepare_all(&test)?)?);
            }
            let names = feature_names(&run.models[0]);
            let n = run.report.folds.iter().map(|f| f.test_ids.len()).sum();
            let report = shap_confidence_intervals(names, &per_fold, n)?;
            write_json(&out.join("attribution.json"), &report)?;
            let mut files = vec!["attribution.json".to_string()];
            if let (Some(l), Some(t)) = (lexicon, tokens) {
                let lex = CategoryLexicon::load(l)?;
                let text = std::fs::read_to_string(t).map_err(|e| io_err(t, e))?;
                let words: Vec<&str> = text.split_whitespace().collect();
                let cats = map_tokens_to_categories(&words, &lex)?;
                let mut w = csv::Writer::from_path(out.join("categories.csv"))?;
                w.write_record(["token", "category"])?;
                for (word, c) in words.iter().zip(&cats) {
                    w.write_record([*word, c.as_str()])?;
                }
                w.flush().map_err(|e| io_err(&out.join("categories.csv"), e))?;
                files.push("categories.csv".into());
            }
            Ok(json!({ "config": cfg, "files": files }))
        }
        Command::Report { inputs, format } => {
            let reports = inputs.iter().map(|p| load_report(p)).collect::<Result<Vec<_>>>()?;
            let files = match (format, reports.as_slice()) {
                (Format::Markdown, _) => {
                    write(&out.join("report.md"), &markdown_table(&reports)?)?;
                    vec!["report.md".to_string()]
                }
                (_, [single]) => file_names(&emit_report(single, (*format).into(), out)?),
                _ => return Err(Error::Config("json and csv output take exactly one input report".into())),
            };
            Ok(json!({ "inputs": inputs, "files": files }))
        }
    }
}

fn load_report(path: &Path) -> Result<EvaluationReport> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => report_from_csv(&text),
        _ => report_from_json(&text),
    }
}

fn file_names(paths: &[PathBuf]) -> Vec<String> {
    paths.iter().filter_map(|p| p.file_name()).map(|n| n.to_string_lossy().into_owned()).collect()
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth { .. } => "synth",
        Command::Train(_) => "train",
        Command::Cv { .. } => "cv",
        Command::Transfer { .. } => "transfer",
        Command::Attribute { .. } => "attribute",
        Command::Report { .. } => "report",
    }
}

fn fail(kind: &str, message: String) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::from(if kind == "usage" { 2 } else { 1 })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim().to_string()),
    };
    let start = Instant::now();
    match run(&cli) {
        Ok(mut echo) => {
            echo["command"] = json!(command_name(&cli.command));
            echo["version"] = json!(version_string());
            echo["wall_clock_seconds"] = json!(start.elapsed().as_secs_f64());
            let path = cli.out.join("run.json");
            match write_json(&path, &echo) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(e.kind(), e.to_string()),
            }
        }
        Err(e) => {
            log::debug!("{e:?}");
            fail(e.kind(), e.to_string())
        }
    }
}
