use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use nrs_core::corpus::{
    generate_synthetic, load_dataset, save_dataset, split_dataset, Candidate, Conversation, CorpusError, DatasetManifest,
    Utterance,
};
use nrs_core::embed::Featurizer;
use nrs_core::model::{init_params, save_checkpoint, CheckpointMeta, ScorerParams};
use nrs_core::select::{
    evaluate_oracle, evaluate_rollout, CosineCqr, CosineQr, EvalReport, NrsSelector, ResponseSelector, ScoredCandidate,
    SelectError,
};
use nrs_core::train::{EpochLog, TrainError, Trainer};
use nrs_serve::{ServeError, ServiceConfig, SelectResponse, Snapshot};

use crate::config::RunConfig;
use crate::{Baseline, CliError, HistoryArg, SplitName};

fn runtime(context: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{context}: {e}"))
}

fn corpus_error(e: CorpusError) -> CliError {
    match e {
        CorpusError::Io(e) => CliError::Runtime(e.to_string()),
        CorpusError::Config(m) | CorpusError::Ratios(m) => CliError::Config(m),
        other => CliError::Data(other.to_string()),
    }
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::EmptyTrainSet | TrainError::NoCandidates { .. } | TrainError::MissingAgent { .. } => {
            CliError::Data(e.to_string())
        }
        TrainError::Plan(m) => CliError::Config(m),
        other => CliError::Runtime(other.to_string()),
    }
}

fn select_error(e: SelectError) -> CliError {
    match e {
        SelectError::Unlabeled { .. } | SelectError::NoCandidates => CliError::Data(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}

fn serve_error(e: ServeError) -> CliError {
    match e {
        ServeError::Config(m) => CliError::Config(m),
        ServeError::Checkpoint { .. } => CliError::Data(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}

fn required(flag: Option<PathBuf>, from_config: &Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    flag.or_else(|| from_config.clone())
        .ok_or_else(|| CliError::Usage(format!("--{name} is required (flag or config key \"{name}\")")))
}

fn load_data(path: &Path) -> Result<Vec<Conversation>, CliError> {
    if !path.is_file() {
        return Err(CliError::Config(format!("dataset {} does not exist", path.display())));
    }
    let convs = load_dataset(path).map_err(corpus_error)?;
    for c in &convs {
        c.validate().map_err(corpus_error)?;
    }
    Ok(convs)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| runtime("serializing", e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| runtime(&format!("writing {}", path.display()), e))
}

fn print_json(value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| runtime("serializing", e))?;
    println!("{text}");
    Ok(())
}

pub fn manifest_path(data: &Path) -> PathBuf {
    data.with_extension("manifest.json")
}

pub fn gen_data(config: Option<&Path>, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let seed = seed.unwrap_or(cfg.seed);
    let out = required(out, &cfg.out, "out")?;
    let convs = generate_synthetic(&cfg.generator, seed).map_err(corpus_error)?;
    save_dataset(&out, &convs).map_err(|e| runtime(&format!("writing {}", out.display()), e))?;
    let manifest = json!({
        "seed": seed,
        "generator": cfg.generator,
        "dataset": DatasetManifest::from_dataset(&convs),
    });
    write_json(&manifest_path(&out), &manifest)?;
    log::info!("wrote {} conversations to {}", convs.len(), out.display());
    Ok(())
}

pub fn checkpoint_path(out: &Path, suffix: &str) -> PathBuf {
    out.join(format!("model.{suffix}"))
}

fn write_log(path: &Path, logs: &[EpochLog]) -> Result<(), CliError> {
    let mut buf = Vec::new();
    for l in logs {
        serde_json::to_writer(&mut buf, l).map_err(|e| runtime("serializing log", e))?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| runtime(&format!("writing {}", path.display()), e))
}

pub fn train(
    config: Option<&Path>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    skip: &[String],
) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.plan.seed = cfg.seed;
    cfg.validate()?;
    let (mut skip_conv, mut skip_ss) = (false, false);
    for s in skip {
        match s.trim() {
            "conv" => skip_conv = true,
            "ss" => skip_ss = true,
            other => return Err(CliError::Usage(format!("unknown phase {other:?} in --skip-phases (expected conv, ss)"))),
        }
    }
    let data = required(data, &cfg.data, "data")?;
    let out = required(out, &cfg.out, "out")?;
    let convs = load_data(&data)?;
    let splits = split_dataset(&convs, cfg.split, cfg.seed).map_err(corpus_error)?;
    let provider = cfg.provider.build().map_err(|e| CliError::Config(e.to_string()))?;
    let window = cfg.plan.window;
    let fz = Featurizer::new(provider, cfg.pooling, window);
    let mut params = init_params(fz.input_dim(), cfg.model.hidden, cfg.model.blocks, cfg.seed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    fs::create_dir_all(&out).map_err(|e| runtime(&format!("creating {}", out.display()), e))?;

    let mut meta = CheckpointMeta::for_params(&params, cfg.provider.dim(), window, cfg.pooling, cfg.seed);
    meta.provider = Some(cfg.provider.clone());
    let log_path = out.join("train_log.jsonl");
    let save = |params: &ScorerParams, meta: &CheckpointMeta, suffix: &str| {
        let path = checkpoint_path(&out, suffix);
        save_checkpoint(&path, params, meta).map_err(|e| runtime(&format!("writing {}", path.display()), e))
    };

    let mut trainer = Trainer::new(&fz, &params, cfg.plan.clone(), cfg.schedule, cfg.adam).map_err(train_error)?;
    trainer
        .train_utterance_phase(&mut params, &splits.train, &splits.valid)
        .map_err(train_error)?;
    meta.phases.push("utterance".into());
    save(&params, &meta, "utt")?;
    write_log(&log_path, trainer.logs())?;

    if !skip_conv {
        trainer
            .train_conversation_phase(&mut params, &splits.train, &splits.valid)
            .map_err(train_error)?;
        meta.phases.push("conversation".into());
        save(&params, &meta, "conv")?;
        write_log(&log_path, trainer.logs())?;
    }
    if !skip_ss {
        trainer
            .train_scheduled_sampling_phase(&mut params, &splits.train, &splits.valid)
            .map_err(train_error)?;
        meta.phases.push("scheduled_sampling".into());
        save(&params, &meta, "ss")?;
        write_log(&log_path, trainer.logs())?;
    }
    Ok(())
}

/// Loads a checkpoint with its provider, preferring the one recorded in it.
fn load_snapshot(checkpoint: &Path, cfg: Option<&RunConfig>) -> Result<Snapshot, CliError> {
    let mut service = ServiceConfig {
        listen: "127.0.0.1:0".into(),
        checkpoint: checkpoint.to_path_buf(),
        provider: None,
        agents: Vec::new(),
        max_history: None,
    };
    match Snapshot::load(&service) {
        Err(ServeError::Config(m)) if m.contains("provider") => {
            service.provider = cfg.map(|c| c.provider.clone());
            Snapshot::load(&service).map_err(serve_error)
        }
        other => other.map_err(serve_error),
    }
}

pub struct EvalArgs {
    pub config: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub baseline: Option<Baseline>,
    pub data: Option<PathBuf>,
    pub split: SplitName,
    pub seed: Option<u64>,
    pub history: HistoryArg,
    pub compare: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub records: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Comparison {
    pub against: String,
    pub accuracy: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub significant: bool,
}

#[derive(Debug, Serialize)]
struct EvalOutput<'a> {
    #[serde(flatten)]
    report: &'a EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    comparison: Option<&'a Comparison>,
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let data = required(args.data, &cfg.data, "data")?;
    let convs = load_data(&data)?;
    let split = match args.split {
        SplitName::All => convs,
        name => {
            let s = split_dataset(&convs, cfg.split, cfg.seed).map_err(corpus_error)?;
            match name {
                SplitName::Train => s.train,
                SplitName::Valid => s.valid,
                _ => s.test,
            }
        }
    };

    let snapshot;
    let baseline_selector: Box<dyn ResponseSelector + '_>;
    let (selector, window): (&dyn ResponseSelector, usize) = match (&args.checkpoint, args.baseline) {
        (Some(path), _) => {
            snapshot = load_snapshot(path, Some(&cfg))?;
            let sel = NrsSelector::new(&snapshot.featurizer, &snapshot.params).map_err(select_error)?;
            baseline_selector = Box::new(sel);
            (baseline_selector.as_ref(), snapshot.meta.window)
        }
        (None, Some(kind)) => {
            let provider = cfg.provider.build().map_err(|e| CliError::Config(e.to_string()))?;
            baseline_selector = match kind {
                Baseline::Qr => Box::new(CosineQr { provider }),
                Baseline::Cqr => Box::new(CosineCqr { provider }),
            };
            (baseline_selector.as_ref(), cfg.plan.window)
        }
        (None, None) => return Err(CliError::Usage("one of --checkpoint or --baseline is required".into())),
    };

    let mut report = match args.history {
        HistoryArg::Oracle => evaluate_oracle(selector, &split, window),
        HistoryArg::Rollout => evaluate_rollout(selector, &split, window),
    }
    .map_err(select_error)?;

    let comparison = match &args.compare {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
            let other: EvalReport =
                serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            Some(Comparison {
                significant: report.significantly_differs(&other),
                against: other.selector,
                accuracy: other.accuracy,
                ci_lower: other.ci_lower,
                ci_upper: other.ci_upper,
            })
        }
        None => None,
    };

    let records = std::mem::take(&mut report.records);
    print_json(&EvalOutput {
        report: &report,
        comparison: comparison.as_ref(),
    })?;
    if let Some(out) = &args.out {
        if args.records {
            report.records = records;
        }
        write_json(
            out,
            &EvalOutput {
                report: &report,
                comparison: comparison.as_ref(),
            },
        )?;
    }
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn select(
    config: Option<&Path>,
    checkpoint: &Path,
    history: Option<&Path>,
    query: &str,
    candidates: &Path,
) -> Result<(), CliError> {
    let cfg = match config {
        Some(p) => Some(RunConfig::load(Some(p))?),
        None => None,
    };
    let history: Vec<Utterance> = match history {
        Some(p) => read_json(p)?,
        None => Vec::new(),
    };
    let candidates: Vec<Candidate> = read_json(candidates)?;
    if candidates.is_empty() {
        return Err(CliError::Data("candidate list is empty".into()));
    }
    let snap = load_snapshot(checkpoint, cfg.as_ref())?;
    let (index, scores) = snap
        .score(&history, snap.meta.window, query, &candidates)
        .map_err(select_error)?;
    let response = SelectResponse {
        selected: candidates[index].clone(),
        scores: candidates
            .iter()
            .zip(scores)
            .map(|(c, score)| ScoredCandidate {
                agent: c.agent_id.clone(),
                score,
            })
            .collect(),
        failed: None,
    };
    print_json(&response)?;
    std::io::stdout().flush().map_err(|e| runtime("stdout", e))
}

pub fn serve(config: &Path, listen: Option<String>, checkpoint: Option<PathBuf>) -> Result<(), CliError> {
    let mut service: ServiceConfig = read_json(config).map_err(|e| match e {
        CliError::Data(m) => CliError::Config(m),
        other => other,
    })?;
    if let Some(l) = listen {
        service.listen = l;
    }
    if let Some(c) = checkpoint {
        service.checkpoint = c;
    }
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| runtime("starting runtime", e))?;
    rt.block_on(nrs_serve::run(service)).map_err(serve_error)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_sits_next_to_data() {
        assert_eq!(manifest_path(Path::new("out/data.jsonl")), PathBuf::from("out/data.manifest.json"));
        assert_eq!(checkpoint_path(Path::new("m"), "ss"), PathBuf::from("m/model.ss"));
    }

    #[test]
    fn error_classes() {
        assert_eq!(train_error(TrainError::EmptyTrainSet).exit_code(), 2);
        assert_eq!(train_error(TrainError::Plan("x".into())).exit_code(), 1);
        assert_eq!(select_error(SelectError::NoCandidates).exit_code(), 2);
        assert_eq!(serve_error(ServeError::Config("x".into())).exit_code(), 1);
    }
}
