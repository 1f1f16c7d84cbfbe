use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ivg::guidance::GuidanceConfig;
use ivg::harness::{
    decode_eval, emit_report, run_best_beta, run_grid, speed_profile, write_generations, ArtifactDir, EvalSet,
    ExperimentReport, MethodId, PipelineConfig, ReportFormat,
};
use ivg::synth::SynthTaskSpec;
use ivg::training::TrainConfig;

/// Value-guided decoding over tabular language models: build a synthetic
/// task, train the value functions, decode and report.
#[derive(Parser)]
#[command(name = "ivg", version)]
struct Cli {
    /// Directory holding the task and model files.
    #[arg(long, global = true, default_value = ".")]
    dir: PathBuf,
    /// Pipeline config (JSON). Defaults to the built-in config for the task
    /// found in `--dir`, or the sentiment task.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a synthetic task: spec, base model, preference pairs, eval prompts.
    MakeTask(MakeTask),
    /// Supervised fine-tuning of the reference model.
    TrainSft(TrainArgs),
    /// DPO tuning against the SFT model.
    TrainDpo(TrainArgs),
    /// Bradley-Terry sequence reward model.
    TrainRm(TrainArgs),
    /// FUDGE prefix scorer regressed on reward-model scores.
    TrainFudge(TrainArgs),
    /// Decode every eval prompt once and write the responses.
    Gen(Gen),
    /// Evaluate one method over seeds (best β for token-guided methods).
    Run(Run),
    /// Evaluate the 3x3 token x chunk value-function grid.
    Grid(Run),
    /// One seed of every named method, for forward-pass and timing profiles.
    Speed(Run),
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskKind {
    Sentiment,
    Context,
}

#[derive(Args)]
struct MakeTask {
    /// Start from the default spec of this task instead of the config's.
    #[arg(long, value_enum)]
    task: Option<TaskKind>,
    /// Task spec file (JSON); overrides `--task`.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    eval_prompts: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Table order (SFT, DPO: language-model order; FUDGE: value order) or
    /// n-gram order of the reward model.
    #[arg(long)]
    order: Option<usize>,
    /// β of the DPO objective.
    #[arg(long)]
    dpo_beta: Option<f64>,
}

#[derive(Args, Clone)]
struct DecodeArgs {
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    top_p: Option<f64>,
    /// Beam width.
    #[arg(long = "W")]
    w: Option<usize>,
    /// Successors per beam state.
    #[arg(long = "K")]
    k: Option<usize>,
    /// Chunk length.
    #[arg(long = "L")]
    l: Option<usize>,
    /// Best-of-N samples (grid runs default to W*K).
    #[arg(long = "N")]
    n: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Evaluate only the first this many eval prompts.
    #[arg(long)]
    prompts: Option<usize>,
}

#[derive(Args)]
struct Gen {
    /// base, bon_i, bon_e, eft_i, eft_e, cbs_i, cbs_e, ivg, or token/chunk
    /// (none|implicit|explicit each).
    #[arg(long)]
    method: MethodId,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    decode: DecodeArgs,
    /// Output file; defaults to `<dir>/generations_<method>.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Run {
    /// Method to run (`run` only).
    #[arg(long)]
    method: Option<MethodId>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated β grid for token-guided methods; `--beta` fixes one.
    #[arg(long, value_delimiter = ',')]
    betas: Option<Vec<f64>>,
    #[command(flatten)]
    decode: DecodeArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    /// csv or jsonl; defaults to the extension of `--out`, else csv.
    #[arg(long)]
    format: Option<ReportFormat>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<ivg::Error>() {
        Some(ivg::Error::Config(_) | ivg::Error::Input(_) | ivg::Error::EmptyDataset(_)) => 2,
        Some(ivg::Error::Json(_)) => 2,
        Some(ivg::Error::MissingArtifact(_)) => 3,
        Some(ivg::Error::Invariant(_) | ivg::Error::Sampler(_)) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| ivg::Error::Config(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| ivg::Error::Config(format!("{}: {e}", path.display())))?
        }
        None => {
            let task_file = cli.dir.join(ArtifactDir::TASK);
            if task_file.is_file() {
                PipelineConfig::for_task(SynthTaskSpec::load(task_file)?)
            } else {
                PipelineConfig::default_sentiment()
            }
        }
    };
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    let art = ArtifactDir::new(&cli.dir);
    match &cli.command {
        Command::MakeTask(a) => make_task(&art, &cfg, a),
        Command::TrainSft(a) => {
            override_train(&mut cfg.sft, a);
            if let Some(o) = a.order {
                cfg.lm_order = o;
            }
            cfg.validate()?;
            let m = art.train_sft(&cfg)?;
            println!("wrote {} ({} contexts)", art.path(ArtifactDir::SFT).display(), m.num_entries());
            Ok(())
        }
        Command::TrainDpo(a) => {
            override_train(&mut cfg.dpo, a);
            cfg.validate()?;
            let m = art.train_dpo(&cfg)?;
            println!("wrote {} ({} contexts)", art.path(ArtifactDir::DPO).display(), m.num_entries());
            Ok(())
        }
        Command::TrainRm(a) => {
            override_train(&mut cfg.reward, a);
            if let Some(o) = a.order {
                cfg.reward_ngram_order = o;
            }
            cfg.validate()?;
            let m = art.train_reward(&cfg)?;
            println!("wrote {} ({} n-gram weights)", art.path(ArtifactDir::REWARD).display(), m.num_entries());
            Ok(())
        }
        Command::TrainFudge(a) => {
            override_train(&mut cfg.fudge, a);
            if let Some(o) = a.order {
                cfg.value_order = o;
            }
            cfg.validate()?;
            let m = art.train_fudge(&cfg)?;
            println!("wrote {} ({} prefix values)", art.path(ArtifactDir::FUDGE).display(), m.num_entries());
            Ok(())
        }
        Command::Gen(a) => gen(&art, &cfg, a),
        Command::Run(a) => {
            let method = a.method.ok_or_else(|| ivg::Error::Config("run needs --method".into()))?;
            let (eval, decode, seeds, betas) = run_inputs(&art, &cfg, a, false)?;
            let models = art.models()?;
            let report = run_best_beta(method, &eval, &models, &decode, &seeds, &betas)?;
            let default = format!("report_{}.csv", file_stem(method));
            write_reports(&art, a, &default, std::slice::from_ref(&report))
        }
        Command::Grid(a) => {
            let (eval, decode, seeds, betas) = run_inputs(&art, &cfg, a, true)?;
            let grid = run_grid(&eval, &art.models()?, &decode, &seeds, &betas)?;
            let reports: Vec<ExperimentReport> = grid.reports().cloned().collect();
            write_reports(&art, a, "grid.csv", &reports)
        }
        Command::Speed(a) => {
            let (eval, decode, seeds, _) = run_inputs(&art, &cfg, a, true)?;
            let reports = speed_profile(&eval, &art.models()?, &decode, seeds[0])?;
            write_reports(&art, a, "speed.csv", &reports)
        }
    }
}

fn make_task(art: &ArtifactDir, cfg: &PipelineConfig, a: &MakeTask) -> Result<()> {
    let mut spec = match (&a.spec, a.task) {
        (Some(path), _) => SynthTaskSpec::load(path)?,
        (None, Some(TaskKind::Sentiment)) => SynthTaskSpec::default_sentiment(),
        (None, Some(TaskKind::Context)) => SynthTaskSpec::default_context(),
        (None, None) => cfg.task.clone(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.pairs {
        spec.n_train_pairs = n;
    }
    if let Some(n) = a.eval_prompts {
        spec.n_eval_prompts = n;
    }
    let task = art.make_task(&spec)?;
    println!(
        "wrote task to {}: {} training pairs, {} eval prompts",
        art.root().display(),
        task.train_pairs.len(),
        task.eval_prompts.len()
    );
    Ok(())
}

fn override_train(t: &mut TrainConfig, a: &TrainArgs) {
    if let Some(x) = a.lr {
        t.learning_rate = x;
    }
    if let Some(x) = a.epochs {
        t.epochs = x;
    }
    if let Some(x) = a.batch_size {
        t.batch_size = x;
    }
    if let Some(x) = a.seed {
        t.seed = x;
    }
    if let Some(x) = a.dpo_beta {
        t.dpo_beta = x;
    }
}

fn decode_config(base: &GuidanceConfig, a: &DecodeArgs, budget_matched: bool) -> Result<GuidanceConfig> {
    let mut c = base.clone();
    if let Some(x) = a.beta {
        c.beta = x;
    }
    if let Some(x) = a.temperature {
        c.temperature = x;
    }
    if a.top_k.is_some() {
        c.top_k = a.top_k;
    }
    if a.top_p.is_some() {
        c.top_p = a.top_p;
    }
    if let Some(x) = a.w {
        c.beam_width = x;
    }
    if let Some(x) = a.k {
        c.successors = x;
    }
    if let Some(x) = a.l {
        c.chunk_len = x;
    }
    if let Some(x) = a.max_len {
        c.max_len = x;
    }
    c.num_samples = match a.n {
        Some(n) => n,
        None if budget_matched => c.beam_width * c.successors,
        None => c.num_samples,
    };
    c.validate()?;
    Ok(c)
}

fn eval_set(art: &ArtifactDir, limit: Option<usize>) -> Result<EvalSet> {
    let mut eval = art.eval_set()?;
    if let Some(n) = limit {
        eval.prompts.truncate(n);
    }
    Ok(eval)
}

fn gen(art: &ArtifactDir, cfg: &PipelineConfig, a: &Gen) -> Result<()> {
    let decode = decode_config(&cfg.decode, &a.decode, false)?;
    let eval = eval_set(art, a.decode.prompts)?;
    let records = decode_eval(a.method, &eval, &art.models()?, &decode, a.seed)?;
    let out = a.out.clone().unwrap_or_else(|| art.path(&format!("generations_{}.jsonl", file_stem(a.method))));
    write_generations(&out, &records).with_context(|| format!("writing {}", out.display()))?;
    let n = records.len().max(1) as f64;
    let mean = records.iter().map(|r| r.gold_reward).sum::<f64>() / n;
    let counts: ivg::guidance::ForwardPassCounter = records.iter().map(|r| r.fwd_counts).sum();
    println!(
        "{}: {} responses, mean gold {mean:.4}; evaluations base {} tuned {} ref {} scorer {}; wrote {}",
        a.method.name(),
        records.len(),
        counts.base,
        counts.tuned,
        counts.reference,
        counts.scorer,
        out.display()
    );
    Ok(())
}

fn file_stem(m: MethodId) -> String {
    m.name().replace(['/', '+'], "_")
}

type RunInputs = (EvalSet, GuidanceConfig, Vec<u64>, Vec<f64>);

fn run_inputs(art: &ArtifactDir, cfg: &PipelineConfig, a: &Run, budget_matched: bool) -> Result<RunInputs> {
    let decode = decode_config(&cfg.decode, &a.decode, budget_matched)?;
    let seeds = a.seeds.clone().unwrap_or_else(|| cfg.seeds.clone());
    if seeds.is_empty() {
        return Err(ivg::Error::Config("at least one seed is required".into()).into());
    }
    let betas = match (&a.betas, a.decode.beta) {
        (Some(b), _) => b.clone(),
        (None, Some(b)) => vec![b],
        (None, None) => cfg.betas.clone(),
    };
    Ok((eval_set(art, a.decode.prompts)?, decode, seeds, betas))
}

fn write_reports(art: &ArtifactDir, a: &Run, default_name: &str, reports: &[ExperimentReport]) -> Result<()> {
    let out = a.out.clone().unwrap_or_else(|| art.path(default_name));
    let format = match a.format {
        Some(f) => f,
        None => format_from_extension(&out),
    };
    emit_report(reports, &out, format)?;
    println!(
        "{:<22} {:>6} {:>10} {:>9} {:>10} {:>10} {:>10} {:>10}",
        "method", "beta", "mean_gold", "stderr", "base", "tuned", "ref", "scorer"
    );
    for r in reports {
        let c = r.fwd_totals;
        println!(
            "{:<22} {:>6} {:>10.4} {:>9.4} {:>10} {:>10} {:>10} {:>10}",
            r.method.name(),
            r.beta,
            r.mean_gold,
            r.std_err,
            c.base,
            c.tuned,
            c.reference,
            c.scorer
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn format_from_extension(path: &Path) -> ReportFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") => ReportFormat::JsonLines,
        _ => ReportFormat::Csv,
    }
}
