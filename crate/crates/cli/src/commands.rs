//! One function per subcommand. Every command writes its artifacts into
//! `--out`; outputs depend only on inputs, flags and seed.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::Serialize;
use seqrec_core::data::{
    compute_stats, load_match_file, parse_matches, plot_data, preprocess, read_heroes, read_items, save_dataset,
    split_chronological, validate_split_representativeness, write_plot_csv, Dataset, DatasetStats, InvalidMatch,
    LineError, ParseMode, PlotSeries, PreprocessReport, RepresentativenessReport, SplitSpec, MATCHES_FILE,
};
use seqrec_core::eval::{compare_reports, evaluate, evaluate_scorer, EvalConfig, EvalReport, OracleScorer};
use seqrec_core::hpo::{run_search, SearchConfig};
use seqrec_core::models::{
    load_checkpoint, save_checkpoint, Activation, GruConfig, MlpConfig, ModelConfig, ModelKind, NarmConfig,
    TransformerConfig,
};
use seqrec_core::synth::{generate, Oracle, SynthSpec};
use seqrec_core::training::{train, TrainConfig, TrainError};

use crate::args::{
    ActivationArg, Command, EvalArgs, IngestArgs, ModelArgs, OptimArgs, PlotArgs, ReportArgs, SearchArgs, SeriesArg,
    SplitArgs, StatsArgs, SynthArgs, TrainArgs,
};
use crate::error::CliError;

/// Paths written and a one-line summary.
#[derive(Debug, Default)]
pub struct CommandResult {
    pub artifacts: Vec<PathBuf>,
    pub summary: String,
}

#[derive(Serialize)]
struct Invocation<'a> {
    command: &'a str,
    args: &'a [String],
    seed: u64,
    version: &'a str,
}

pub fn dispatch(cmd: &Command, argv: &[String]) -> Result<CommandResult, CliError> {
    let common = cmd.common();
    std::fs::create_dir_all(&common.out)?;
    let invocation = Invocation {
        command: cmd.name(),
        args: argv,
        seed: common.seed,
        version: env!("CARGO_PKG_VERSION"),
    };
    let inv_path = common.out.join("invocation.json");
    write_json(&inv_path, &invocation)?;
    let mut result = match cmd {
        Command::Ingest(a) => ingest(a),
        Command::Stats(a) => stats(a),
        Command::Split(a) => split(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Search(a) => search(a),
        Command::Plotdata(a) => plotdata(a),
        Command::Report(a) => report(a),
    }?;
    result.artifacts.insert(0, inv_path);
    Ok(result)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load(dir: &Path, file: &str) -> Result<Dataset, CliError> {
    Ok(load_match_file(dir, file, ParseMode::Strict)?.dataset)
}

// ------------------------------------------------------------------ data

#[derive(Serialize)]
struct IngestReport<'a> {
    source: String,
    matches: usize,
    sessions: usize,
    malformed: &'a [LineError],
    invalid: &'a [InvalidMatch],
}

fn ingest(a: &IngestArgs) -> Result<CommandResult, CliError> {
    let items = read_items(open(&a.items)?)?;
    let heroes = read_heroes(open(&a.heroes)?)?;
    let mode = if a.lenient { ParseMode::Lenient } else { ParseMode::Strict };
    let outcome = parse_matches(BufReader::new(open(&a.matches)?), &items, &heroes, mode)?;
    let out = &a.common.out;
    save_dataset(&outcome.dataset, out, MATCHES_FILE)?;
    let report_path = out.join("ingest_report.json");
    write_json(
        &report_path,
        &IngestReport {
            source: a.matches.display().to_string(),
            matches: outcome.dataset.matches.len(),
            sessions: outcome.dataset.n_sessions(),
            malformed: &outcome.malformed,
            invalid: &outcome.invalid,
        },
    )?;
    Ok(CommandResult {
        artifacts: vec![out.join(MATCHES_FILE), report_path],
        summary: format!(
            "ingested {} matches ({} malformed lines skipped, {} invalid matches)",
            outcome.dataset.matches.len(),
            outcome.malformed.len(),
            outcome.invalid.len()
        ),
    })
}

#[derive(Serialize)]
struct StatsReport {
    pre_filter: DatasetStats,
    preprocess: Option<PreprocessReport>,
    post_filter: Option<DatasetStats>,
}

fn stats(a: &StatsArgs) -> Result<CommandResult, CliError> {
    let d = load(&a.data.data, &a.data.file)?;
    let pre_filter = compute_stats(&d)?;
    let (preprocess, post_filter) = match preprocess(&d, &a.pre.mode, a.pre.trim) {
        Ok((p, rep)) => (Some(rep), Some(compute_stats(&p)?)),
        Err(seqrec_core::data::DataError::Empty(_)) => (None, None),
        Err(e) => return Err(e.into()),
    };
    let path = a.common.out.join("stats.json");
    let summary = format!(
        "{} matches pre-filter, {} post-filter",
        pre_filter.n_matches,
        post_filter.as_ref().map_or(0, |s| s.n_matches)
    );
    write_json(
        &path,
        &StatsReport {
            pre_filter,
            preprocess,
            post_filter,
        },
    )?;
    Ok(CommandResult {
        artifacts: vec![path],
        summary,
    })
}

#[derive(Serialize)]
struct SplitPart {
    file: String,
    matches: usize,
    sessions: usize,
    first_start_time: i64,
    last_start_time: i64,
    representativeness: RepresentativenessReport,
}

#[derive(Serialize)]
struct SplitReport {
    preprocess: Option<PreprocessReport>,
    matches: usize,
    /// Match indices where validation and test begin.
    boundaries: [usize; 2],
    parts: Vec<SplitPart>,
}

fn split(a: &SplitArgs) -> Result<CommandResult, CliError> {
    let raw = load(&a.data.data, &a.data.file)?;
    let (d, pre) = if a.no_preprocess {
        (raw, None)
    } else {
        let (p, rep) = preprocess(&raw, &a.pre.mode, a.pre.trim)?;
        (p, Some(rep))
    };
    let spec = SplitSpec::from_fractions(a.train, a.val, a.test).map_err(|e| CliError::Usage(e.to_string()))?;
    let (tr, va, te) = split_chronological(&d, &spec)?;
    let out = &a.common.out;
    let mut parts = Vec::new();
    let mut artifacts = Vec::new();
    for (file, part) in [("train.jsonl", &tr), ("val.jsonl", &va), ("test.jsonl", &te)] {
        save_dataset(part, out, file)?;
        artifacts.push(out.join(file));
        parts.push(SplitPart {
            file: file.into(),
            matches: part.matches.len(),
            sessions: part.n_sessions(),
            first_start_time: part.matches[0].start_time,
            last_start_time: part.matches[part.matches.len() - 1].start_time,
            representativeness: validate_split_representativeness(&d, part)?,
        });
    }
    let report = SplitReport {
        preprocess: pre,
        matches: d.matches.len(),
        boundaries: [tr.matches.len(), tr.matches.len() + va.matches.len()],
        parts,
    };
    let path = out.join("split_report.json");
    write_json(&path, &report)?;
    artifacts.push(path);
    Ok(CommandResult {
        artifacts,
        summary: format!(
            "split {} matches into {}/{}/{}",
            d.matches.len(),
            tr.matches.len(),
            va.matches.len(),
            te.matches.len()
        ),
    })
}

fn synth(a: &SynthArgs) -> Result<CommandResult, CliError> {
    let spec = SynthSpec {
        n_matches: a.matches,
        n_items: a.items,
        n_heroes: a.heroes,
        transition_sharpness: a.sharpness,
        consumable_rate: a.consumable_rate,
        mean_ls: a.mean_ls,
        std_ls: a.std_ls,
        mean_duration_s: a.mean_duration,
        std_duration_s: a.std_duration,
        second_order: a.second_order,
        no_repeat: a.no_repeat,
        seed: a.common.seed,
    };
    let corpus = generate(&spec)?;
    let out = &a.common.out;
    save_dataset(&corpus.dataset, out, MATCHES_FILE)?;
    let (oracle, spec_path) = (out.join("oracle.json"), out.join("synth_spec.json"));
    write_json(&oracle, &corpus.oracle)?;
    write_json(&spec_path, &spec)?;
    Ok(CommandResult {
        artifacts: vec![out.join(MATCHES_FILE), oracle, spec_path],
        summary: format!(
            "generated {} matches, {} sessions",
            corpus.dataset.matches.len(),
            corpus.dataset.n_sessions()
        ),
    })
}

// ---------------------------------------------------------------- models

/// Architecture used when a flag is left unset.
fn default_config(kind: ModelKind) -> ModelConfig {
    let tf = |heads, layers, head_size, activation| TransformerConfig {
        heads,
        layers,
        head_size,
        dropout: 0.1,
        activation,
    };
    match kind {
        ModelKind::Pop => ModelConfig::Pop,
        ModelKind::Markov => ModelConfig::Markov,
        ModelKind::Lr => ModelConfig::Lr,
        ModelKind::Mlp => ModelConfig::Mlp(MlpConfig { hidden: 256, layers: 3 }),
        ModelKind::Gru => ModelConfig::Gru(GruConfig {
            emb: 64,
            cell: 128,
            layers: 2,
            dropout: 0.1,
        }),
        ModelKind::Narm => ModelConfig::Narm(NarmConfig {
            emb: 32,
            enc: 80,
            layers: 1,
            ctx_dropout: 0.2,
            emb_dropout: 0.15,
        }),
        ModelKind::Sasrec => ModelConfig::Sasrec(tf(7, 4, 13, Activation::Tanh)),
        ModelKind::Bert4rec => ModelConfig::Bert4rec(tf(7, 5, 17, Activation::Relu)),
    }
}

pub fn model_config(a: &ModelArgs) -> Result<ModelConfig, CliError> {
    let given = [
        ("hidden", a.hidden.is_some()),
        ("layers", a.layers.is_some()),
        ("emb", a.emb.is_some()),
        ("cell", a.cell.is_some()),
        ("enc", a.enc.is_some()),
        ("heads", a.heads.is_some()),
        ("head-size", a.head_size.is_some()),
        ("dropout", a.dropout.is_some()),
        ("ctx-dropout", a.ctx_dropout.is_some()),
        ("emb-dropout", a.emb_dropout.is_some()),
        ("activation", a.activation.is_some()),
    ];
    let allowed: &[&str] = match a.model {
        ModelKind::Pop | ModelKind::Markov | ModelKind::Lr => &[],
        ModelKind::Mlp => &["hidden", "layers"],
        ModelKind::Gru => &["emb", "cell", "layers", "dropout"],
        ModelKind::Narm => &["emb", "enc", "layers", "ctx-dropout", "emb-dropout"],
        ModelKind::Sasrec | ModelKind::Bert4rec => &["heads", "layers", "head-size", "dropout", "activation"],
    };
    if let Some((flag, _)) = given.iter().find(|(f, set)| *set && !allowed.contains(f)) {
        return Err(CliError::Usage(format!("--{flag} does not apply to model {}", a.model)));
    }
    let mut c = default_config(a.model);
    match &mut c {
        ModelConfig::Pop | ModelConfig::Markov | ModelConfig::Lr => {}
        ModelConfig::Mlp(m) => {
            m.hidden = a.hidden.unwrap_or(m.hidden);
            m.layers = a.layers.unwrap_or(m.layers);
        }
        ModelConfig::Gru(g) => {
            g.emb = a.emb.unwrap_or(g.emb);
            g.cell = a.cell.unwrap_or(g.cell);
            g.layers = a.layers.unwrap_or(g.layers);
            g.dropout = a.dropout.unwrap_or(g.dropout);
        }
        ModelConfig::Narm(n) => {
            n.emb = a.emb.unwrap_or(n.emb);
            n.enc = a.enc.unwrap_or(n.enc);
            n.layers = a.layers.unwrap_or(n.layers);
            n.ctx_dropout = a.ctx_dropout.unwrap_or(n.ctx_dropout);
            n.emb_dropout = a.emb_dropout.unwrap_or(n.emb_dropout);
        }
        ModelConfig::Sasrec(t) | ModelConfig::Bert4rec(t) => {
            t.heads = a.heads.unwrap_or(t.heads);
            t.layers = a.layers.unwrap_or(t.layers);
            t.head_size = a.head_size.unwrap_or(t.head_size);
            t.dropout = a.dropout.unwrap_or(t.dropout);
            if let Some(act) = a.activation {
                t.activation = match act {
                    ActivationArg::Relu => Activation::Relu,
                    ActivationArg::Tanh => Activation::Tanh,
                };
            }
        }
    }
    c.validate()?;
    Ok(c)
}

fn train_config(o: &OptimArgs, seed: u64) -> Result<TrainConfig, CliError> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        lr: o.lr.unwrap_or(d.lr),
        max_epochs: o.epochs.unwrap_or(d.max_epochs),
        // an explicit short run keeps the default patience within bounds
        patience: o.patience.unwrap_or(d.patience.min(o.epochs.unwrap_or(d.max_epochs))),
        batch_size: o.batch_size.unwrap_or(d.batch_size),
        warmup_steps: o.warmup.unwrap_or(d.warmup_steps),
        mask_prob: o.mask_prob.unwrap_or(d.mask_prob),
        l_max: o.l_max.or(d.l_max),
        seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: &TrainArgs) -> Result<CommandResult, CliError> {
    let model = model_config(&a.model)?;
    let cfg = train_config(&a.optim, a.common.seed)?;
    let tr = load(&a.files.data, &a.files.train_file)?;
    let va = load(&a.files.data, &a.files.val_file)?;
    let out = &a.common.out;
    let manifest_path = out.join("manifest.json");
    match train(&model, &cfg, &tr, &va) {
        Ok((ranker, mut manifest)) => {
            let ckpt = out.join("model.ckpt");
            save_checkpoint(&ranker, &ckpt)?;
            manifest.checkpoint_path = Some(ckpt.display().to_string());
            write_json(&manifest_path, &manifest)?;
            let best = manifest.val_recall_at_3.get(manifest.best_epoch.saturating_sub(1)).copied();
            Ok(CommandResult {
                artifacts: vec![ckpt, manifest_path],
                summary: format!(
                    "trained {} for {} epochs; best validation Recall@3 {:.4} at epoch {}",
                    model.kind(),
                    manifest.stopping_epoch,
                    best.unwrap_or(0.0),
                    manifest.best_epoch
                ),
            })
        }
        Err(TrainError::Diverged(manifest)) => {
            write_json(&manifest_path, &manifest)?;
            Err(CliError::Diverged(format!(
                "training diverged in epoch {}; manifest written to {}",
                manifest.diverged_at_epoch.unwrap_or(0),
                manifest_path.display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

fn eval(a: &EvalArgs) -> Result<CommandResult, CliError> {
    let cfg = EvalConfig {
        ks: a.k.clone(),
        l_max: a.l_max,
    };
    let d = load(&a.data, &a.split_file)?;
    let report = match (&a.checkpoint, &a.oracle) {
        (Some(ckpt), _) => {
            let ranker = load_checkpoint(ckpt).map_err(|e| CliError::Data(format!("{}: {e}", ckpt.display())))?;
            evaluate(&ranker, &d, &cfg)?
        }
        (None, Some(path)) => {
            let oracle: Oracle = serde_json::from_reader(BufReader::new(open(path)?))?;
            evaluate_scorer(&OracleScorer::new(&oracle)?, "oracle", &d, &cfg)?
        }
        (None, None) => return Err(CliError::Usage("--checkpoint or --oracle is required".into())),
    };
    let path = a.common.out.join("eval_report.json");
    write_json(&path, &report)?;
    let metrics: Vec<String> = report
        .metrics
        .iter()
        .map(|m| format!("rec@{k} {:.4} ndcg@{k} {:.4}", m.recall, m.ndcg, k = m.k))
        .collect();
    Ok(CommandResult {
        artifacts: vec![path],
        summary: format!("{} on {} events: {}", report.model, report.events, metrics.join(", ")),
    })
}

fn search(a: &SearchArgs) -> Result<CommandResult, CliError> {
    let cfg = SearchConfig {
        trials: a.trials,
        master_seed: a.common.seed,
        train: train_config(&a.optim, a.common.seed)?,
        eval: EvalConfig::default(),
        jobs: a.jobs,
    };
    let tr = load(&a.files.data, &a.files.train_file)?;
    let va = load(&a.files.data, &a.files.val_file)?;
    let te = load(&a.files.data, &a.test_file)?;
    let mut outcome = run_search(a.model, &cfg, &tr, &va, &te)?;
    let out = &a.common.out;
    let ckpt = out.join("best.ckpt");
    save_checkpoint(&outcome.best_ranker, &ckpt)?;
    let best = outcome.summary.best_trial;
    outcome.summary.trials[best].manifest.checkpoint_path = Some(ckpt.display().to_string());

    let trial_dir = out.join("trials");
    std::fs::create_dir_all(&trial_dir)?;
    let mut artifacts = vec![ckpt];
    for t in &outcome.summary.trials {
        let p = trial_dir.join(format!("trial_{:03}.json", t.id));
        write_json(&p, &t.manifest)?;
        artifacts.push(p);
    }
    let summary_path = out.join("search_summary.json");
    write_json(&summary_path, &outcome.summary)?;
    artifacts.push(summary_path);
    let b = outcome.best();
    Ok(CommandResult {
        artifacts,
        summary: format!(
            "best of {} trials: #{} (validation Recall@3 {:.4}); test Recall@3 {:.4}",
            outcome.summary.trials.len(),
            b.id,
            b.val_recall_at_3.unwrap_or(0.0),
            outcome.summary.test_metrics.recall(3).unwrap_or(0.0)
        ),
    })
}

// ------------------------------------------------------------- artifacts

fn plotdata(a: &PlotArgs) -> Result<CommandResult, CliError> {
    let d = load(&a.data.data, &a.data.file)?;
    let (series, name) = match a.series {
        SeriesArg::ItemPurchaseTime => {
            let item = a
                .item
                .ok_or_else(|| CliError::Usage("--item is required for item-purchase-time".into()))?;
            (PlotSeries::ItemPurchaseTime(item), format!("item_purchase_time_{item}"))
        }
        SeriesArg::MatchDuration => (PlotSeries::MatchDuration, "match_duration".into()),
        SeriesArg::SessionLength => (PlotSeries::SessionLength, "session_length".into()),
    };
    let rows = plot_data(&d, series, a.bin, a.window)?;
    let path = a.common.out.join(format!("plot_{name}.csv"));
    let file = File::create(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    write_plot_csv(&rows, BufWriter::new(file))?;
    Ok(CommandResult {
        summary: format!("{} bins written", rows.len()),
        artifacts: vec![path],
    })
}

fn report(a: &ReportArgs) -> Result<CommandResult, CliError> {
    let reports: Vec<EvalReport> = a
        .reports
        .iter()
        .map(|p| Ok(serde_json::from_reader(BufReader::new(open(p)?))?))
        .collect::<Result<_, CliError>>()?;
    let out = &a.common.out;
    let board = out.join("leaderboard.csv");
    std::fs::write(&board, compare_reports(&reports)?)?;
    let mut artifacts = vec![board];
    if !a.plots.is_empty() {
        let dir = out.join("plots");
        std::fs::create_dir_all(&dir)?;
        for p in &a.plots {
            let name = p
                .file_name()
                .ok_or_else(|| CliError::Usage(format!("{} is not a file", p.display())))?;
            let target = dir.join(name);
            if artifacts.contains(&target) {
                return Err(CliError::Usage(format!("two plot files named {}", name.to_string_lossy())));
            }
            let bytes = std::fs::read(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            std::fs::write(&target, bytes)?;
            artifacts.push(target);
        }
    }
    Ok(CommandResult {
        summary: format!("leaderboard of {} reports, {} plot files", reports.len(), a.plots.len()),
        artifacts,
    })
}
