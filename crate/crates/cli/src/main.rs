//! Command-line driver: dataset generation, training, evaluation, K x m
//! sweeps, gradient checking, and graph export for single questions.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use graphvqa_core::adam::Adam;
use graphvqa_core::data::{gen_synthetic, load_dataset, save_dataset, Dataset, SynthConfig};
use graphvqa_core::error::Error;
use graphvqa_core::export::GraphExport;
use graphvqa_core::gradcheck::{check_model, Mutation};
use graphvqa_core::model::{Mode, Model, ModelConfig, Pathway};
use graphvqa_core::trainer::{
    append_jsonl, evaluate, load_checkpoint, train, TrainConfig,
};

/// Environment variable holding the default configuration path.
const CONFIG_ENV: &str = "GRAPHVQA_CONFIG";

#[derive(Parser)]
#[command(name = "graphvqa", version, about = "Question-conditioned graph VQA experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration; falls back to $GRAPHVQA_CONFIG.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the output/run directory from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the image pathway: graph, knn, or attention.
    #[arg(long, value_name = "PATHWAY")]
    model: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset declared in the config.
    Gen(ConfigArgs),
    /// Train a model; writes checkpoint, JSONL log, and manifest to the run dir.
    Train {
        #[command(flatten)]
        common: ConfigArgs,
        /// Resume from the run dir's checkpoint instead of starting fresh.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on a dataset; prints a JSON result.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (scenes.bin, questions.txt, vocab.txt).
        #[arg(long)]
        data: PathBuf,
        /// Evaluate the held-out split only (default: full dataset).
        #[arg(long)]
        holdout: bool,
    },
    /// Train and evaluate over a K x m grid; emits a TSV table.
    Sweep {
        #[command(flatten)]
        common: ConfigArgs,
        /// Comma-separated kernel counts.
        #[arg(long, default_value = "2,4,8")]
        ks: String,
        /// Comma-separated neighborhood sizes.
        #[arg(long, default_value = "2,4,8")]
        ms: String,
    },
    /// Export the learned graph for one question as JSON (and optionally DOT).
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Question id from questions.txt.
        #[arg(long)]
        question: u64,
        /// Output JSON path.
        #[arg(long)]
        out: PathBuf,
        /// Optional Graphviz DOT output path.
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Finite-difference check of the full backward pass.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        /// Corrupt gradients to demonstrate detection: sign-flip.
        #[arg(long, default_value = "none")]
        mutate: String,
        /// Pathway to check: graph, knn, or attention.
        #[arg(long, default_value = "graph")]
        model: String,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSection {
    out_dir: PathBuf,
    seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    run: RunSection,
    model: ModelConfig,
    train: TrainConfig,
    data: SynthConfig,
}

impl RunConfig {
    fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    fn apply_overrides(&mut self, args: &ConfigArgs) -> Result<(), CliError> {
        if let Some(out) = &args.out {
            self.run.out_dir = out.clone();
        }
        if let Some(seed) = args.seed {
            self.run.seed = seed;
            self.train.seed = seed;
        }
        if let Some(p) = &args.model {
            self.model.pathway = p
                .parse::<Pathway>()
                .map_err(|e| CliError::Usage(e.to_string()))?;
        }
        Ok(())
    }
}

enum CliError {
    /// Bad flags or configuration: exit code 1.
    Usage(String),
    /// Failure during compute or IO: exit code 2.
    Runtime(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Input(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn config_path(args: &ConfigArgs) -> Result<PathBuf, CliError> {
    if let Some(p) = &args.config {
        return Ok(p.clone());
    }
    if let Ok(p) = std::env::var(CONFIG_ENV) {
        return Ok(PathBuf::from(p));
    }
    Err(CliError::Usage(format!(
        "no configuration given: pass --config or set {CONFIG_ENV}"
    )))
}

fn load_run_config(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&config_path(args)?)?;
    cfg.apply_overrides(args)?;
    cfg.data.seed = cfg.run.seed;
    Ok(cfg)
}

fn dataset_dir(cfg: &RunConfig) -> PathBuf {
    cfg.run.out_dir.join("dataset")
}

fn ensure_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let dir = dataset_dir(cfg);
    if dir.join("scenes.bin").exists() {
        return Ok(load_dataset(&dir)?);
    }
    let synth = gen_synthetic(&cfg.data)?;
    save_dataset(&dir, &synth.dataset)?;
    Ok(synth.dataset)
}

/// Deterministic split: every fifth scene's questions are held out.
fn split_indices(ds: &Dataset) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (i, item) in ds.items.iter().enumerate() {
        if item.scene % 5 == 4 {
            eval.push(i);
        } else {
            train.push(i);
        }
    }
    (train, eval)
}

fn write_manifest(cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.run.out_dir)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let manifest = serde_json::json!({
        "command": command,
        "config": cfg,
        "version": env!("CARGO_PKG_VERSION"),
    });
    std::fs::write(
        cfg.run.out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?,
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(())
}

fn cmd_gen(args: &ConfigArgs) -> Result<(), CliError> {
    let cfg = load_run_config(args)?;
    write_manifest(&cfg, "gen")?;
    let dir = dataset_dir(&cfg);
    let synth = gen_synthetic(&cfg.data)?;
    save_dataset(&dir, &synth.dataset)?;
    println!(
        "wrote {} scenes, {} questions to {}",
        synth.dataset.scenes.len(),
        synth.dataset.items.len(),
        dir.display()
    );
    Ok(())
}

fn build_model(cfg: &RunConfig, ds: &Dataset) -> Result<Model, CliError> {
    let mut mc = cfg.model.clone();
    if mc.classes == 0 {
        mc.classes = ds.answer_vocab.len();
    }
    Ok(Model::new(mc, &ds.question_vocab, cfg.run.seed)?)
}

fn cmd_train(args: &ConfigArgs, resume: bool) -> Result<(), CliError> {
    let cfg = load_run_config(args)?;
    write_manifest(&cfg, "train")?;
    let ds = ensure_dataset(&cfg)?;
    let (train_idx, eval_idx) = split_indices(&ds);
    let ckpt = cfg.run.out_dir.join("model.ckpt");
    let log = cfg.run.out_dir.join("train.jsonl");

    let (mut model, mut adam, start_epoch) = if resume {
        let loaded = load_checkpoint(&ckpt)?;
        (loaded.model, loaded.adam, loaded.epoch)
    } else {
        if log.exists() {
            std::fs::remove_file(&log).map_err(|e| CliError::Runtime(e.to_string()))?;
        }
        let model = build_model(&cfg, &ds)?;
        let adam = Adam::new(cfg.train.adam, &model.set)?;
        (model, adam, 0)
    };

    let records = train(
        &mut model,
        &mut adam,
        &ds,
        &train_idx,
        &eval_idx,
        &cfg.train,
        start_epoch,
        Some(&ckpt),
        |rec| {
            let _ = append_jsonl(&log, rec);
            eprintln!(
                "epoch {:>3}  lr {:.2e}  loss {:.4}  acc {:.4}",
                rec.epoch, rec.lr, rec.train_loss, rec.eval_overall
            );
        },
    )?;
    if let Some(last) = records.last() {
        println!(
            "{}",
            serde_json::to_string(last).map_err(|e| CliError::Runtime(e.to_string()))?
        );
    }
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, holdout: bool) -> Result<(), CliError> {
    let loaded = load_checkpoint(checkpoint)?;
    let ds = load_dataset(data)?;
    let indices = if holdout {
        split_indices(&ds).1
    } else {
        (0..ds.items.len()).collect()
    };
    let result = evaluate(&loaded.model, &ds, &indices)?;
    let out = serde_json::json!({
        "overall": result.overall,
        "per_type": result.per_type,
        "n": result.n,
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&out).map_err(|e| CliError::Runtime(e.to_string()))?
    );
    Ok(())
}

fn parse_grid(s: &str, what: &str) -> Result<Vec<usize>, CliError> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|e| CliError::Usage(format!("bad {what} value {p:?}: {e}")))
        })
        .collect()
}

fn cmd_sweep(args: &ConfigArgs, ks: &str, ms: &str) -> Result<(), CliError> {
    let cfg = load_run_config(args)?;
    write_manifest(&cfg, "sweep")?;
    let ks = parse_grid(ks, "K")?;
    let ms = parse_grid(ms, "m")?;
    let ds = ensure_dataset(&cfg)?;
    let (train_idx, eval_idx) = split_indices(&ds);
    let cell_dir = cfg.run.out_dir.join("sweep");
    std::fs::create_dir_all(&cell_dir).map_err(|e| CliError::Runtime(e.to_string()))?;

    let mut rows: Vec<serde_json::Value> = Vec::new();
    for &k in &ks {
        for &m in &ms {
            let cell = cell_dir.join(format!("k{k}_m{m}.json"));
            if cell.exists() {
                let text =
                    std::fs::read_to_string(&cell).map_err(|e| CliError::Runtime(e.to_string()))?;
                let row: serde_json::Value = serde_json::from_str(&text)
                    .map_err(|e| CliError::Runtime(format!("bad cell {}: {e}", cell.display())))?;
                rows.push(row);
                eprintln!("k={k} m={m}: cached");
                continue;
            }
            let mut run = cfg.clone();
            run.model.k = k;
            run.model.m = m;
            // keep each hidden width divisible by the kernel count
            for dh in run.model.d_h.iter_mut() {
                *dh = (*dh).div_ceil(k) * k;
            }
            let mut model = build_model(&run, &ds)?;
            let mut adam = Adam::new(run.train.adam, &model.set)?;
            train(
                &mut model,
                &mut adam,
                &ds,
                &train_idx,
                &eval_idx,
                &run.train,
                0,
                None,
                |_| {},
            )?;
            let result = evaluate(&model, &ds, &eval_idx)?;
            let row = serde_json::json!({
                "k": k,
                "m": m,
                "overall": result.overall,
                "per_type": result.per_type,
            });
            std::fs::write(
                &cell,
                serde_json::to_string_pretty(&row).map_err(|e| CliError::Runtime(e.to_string()))?,
            )
            .map_err(|e| CliError::Runtime(e.to_string()))?;
            eprintln!("k={k} m={m}: overall {:.4}", result.overall);
            rows.push(row);
        }
    }

    println!("k\tm\toverall\tyesno\tnumber\tother");
    for row in &rows {
        let pt = &row["per_type"];
        let col = |t: &str| pt.get(t).and_then(|v| v.as_f64()).unwrap_or(f64::NAN);
        println!(
            "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            row["k"],
            row["m"],
            row["overall"].as_f64().unwrap_or(f64::NAN),
            col("yesno"),
            col("number"),
            col("other")
        );
    }
    Ok(())
}

fn cmd_explain(
    checkpoint: &Path,
    data: &Path,
    question: u64,
    out: &Path,
    dot: Option<&Path>,
) -> Result<(), CliError> {
    let loaded = load_checkpoint(checkpoint)?;
    let ds = load_dataset(data)?;
    let item = ds
        .items
        .iter()
        .find(|q| q.id == question)
        .ok_or_else(|| CliError::Usage(format!("unknown question id {question}")))?;
    let scene = &ds.scenes[item.scene];
    let v = scene.model_features();
    let token_ids = loaded.model.embed.lookup(&item.tokens);
    let (logits, trace) = loaded
        .model
        .forward(&v, &scene.boxes, &token_ids, Mode::Eval, true)?;
    let trace = trace.expect("trace requested");
    let graph = trace.graph().ok_or_else(|| {
        CliError::Usage("explain requires a graph pathway (graph or knn)".into())
    })?;
    let best = logits
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, &s)| (ds.answer_vocab[i].clone(), s));
    let export = GraphExport::from_graph(
        graph,
        &scene.boxes,
        scene.image_id,
        &item.tokens.join(" "),
        best,
    )?;
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    std::fs::write(out, export.to_json()?).map_err(|e| CliError::Runtime(e.to_string()))?;
    if let Some(dot_path) = dot {
        std::fs::write(dot_path, export.to_dot()).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_gradcheck(seed: Option<u64>, mutate: &str, model: &str) -> Result<(), CliError> {
    let mutation: Mutation = mutate.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    let pathway: Pathway = model.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    let mut cfg = ModelConfig::tiny();
    cfg.pathway = pathway;
    let report = check_model(&cfg, seed.unwrap_or(11), mutation)?;
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Runtime("gradient check failed".into()))
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train { common, resume } => cmd_train(common, *resume),
        Command::Eval {
            checkpoint,
            data,
            holdout,
        } => cmd_eval(checkpoint, data, *holdout),
        Command::Sweep { common, ks, ms } => cmd_sweep(common, ks, ms),
        Command::Explain {
            checkpoint,
            data,
            question,
            out,
            dot,
        } => cmd_explain(checkpoint, data, *question, out, dot.as_deref()),
        Command::Gradcheck { seed, mutate, model } => cmd_gradcheck(*seed, mutate, model),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            // bad flags are usage errors: exit 1, not clap's default 2
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
