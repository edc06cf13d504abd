mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mse2d::checkpoint::Checkpoint;
use mse2d::data::{self, RunQrels, StsPair};
use mse2d::eval::{self, EvalSet, RetrievalSet, SweepOptions, SweepResult, DEFAULT_CUTOFF};
use mse2d::gradcheck;
use mse2d::objectives::{ObjectiveKind, TeacherSide, Variants};
use mse2d::synth::{synth_sts, SynthConfig};
use mse2d::{Pooling, TrainConfig, Vocab};

use manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "mse2d", version, about = "Train and evaluate 2D Matryoshka sentence embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic retrieval task and STS pair file.
    Synth(SynthArgs),
    /// Train an encoder and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate one (layer, dim) operating point.
    Eval(EvalArgs),
    /// Evaluate a layer x dim grid.
    Sweep(SweepArgs),
    /// Finite-difference check of every objective's gradients.
    Gradcheck(GradcheckArgs),
    /// Re-run the command recorded in a manifest.
    Rerun { manifest: PathBuf },
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "MSE2D_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 512)]
    vocab_size: usize,
    #[arg(long, default_value_t = 2000)]
    docs: usize,
    #[arg(long, default_value_t = 500)]
    train: usize,
    #[arg(long, default_value_t = 100)]
    eval: usize,
    #[arg(long, default_value_t = 200)]
    sts_pairs: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TeacherArg {
    Complete,
    Truncated,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PoolingArg {
    Mean,
    FirstToken,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON-lines file of {"query", "positive"} pairs.
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Checkpoint path to write.
    #[arg(long)]
    out: PathBuf,
    /// Base configuration (JSON); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    objective: Option<ObjectiveKind>,
    /// Ascending prefix dims, e.g. 8,16,32,64.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    #[arg(long)]
    target_dim: Option<usize>,
    /// Comma list of score, full-dim, fix-doc.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    temp: Option<f64>,
    #[arg(long, value_enum)]
    teacher: Option<TeacherArg>,
    #[arg(long, env = "MSE2D_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    #[arg(long, value_enum)]
    pooling: Option<PoolingArg>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Sts,
    Retrieval,
}

#[derive(Args, Debug)]
struct EvalData {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, value_enum)]
    task: TaskArg,
    /// STS pairs (JSON-lines s1, s2, score).
    #[arg(long, required_if_eq("task", "sts"))]
    pairs: Option<PathBuf>,
    #[arg(long, required_if_eq("task", "retrieval"))]
    corpus: Option<PathBuf>,
    #[arg(long, required_if_eq("task", "retrieval"))]
    queries: Option<PathBuf>,
    #[arg(long, required_if_eq("task", "retrieval"))]
    qrels: Option<PathBuf>,
    /// Score every query cell against last-layer, full-dim documents.
    #[arg(long)]
    fix_doc: bool,
    #[arg(long, default_value_t = DEFAULT_CUTOFF)]
    cutoff: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: EvalData,
    #[arg(long)]
    layer: usize,
    #[arg(long)]
    dim: usize,
    /// CSV output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    data: EvalData,
    #[arg(long, value_delimiter = ',', required = true)]
    layers: Vec<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    dims: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also print one layer x dim markdown table per metric.
    #[arg(long)]
    markdown: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let argv: Vec<String> = std::env::args().collect();
    match run(Cli::parse_from(&argv), &argv) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli, argv: &[String]) -> Result<ExitCode> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a, argv),
        Command::Train(a) => cmd_train(a, argv),
        Command::Eval(a) => cmd_eval(a, argv),
        Command::Sweep(a) => cmd_sweep(a, argv),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Rerun { manifest } => {
            let m = RunManifest::load(&manifest)?;
            let argv = m.command_line.clone();
            let cli = Cli::try_parse_from(&argv).context("manifest command line does not parse")?;
            if matches!(cli.command, Command::Rerun { .. }) {
                bail!("refusing to rerun a rerun");
            }
            run(cli, &argv)
        }
    }
}

fn cmd_synth(a: SynthArgs, argv: &[String]) -> Result<ExitCode> {
    let cfg = SynthConfig {
        vocab_size: a.vocab_size,
        n_docs: a.docs,
        n_train: a.train,
        n_eval: a.eval,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let d = cfg.generate()?;
    let sts = synth_sts(a.vocab_size, a.sts_pairs, a.seed)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let p = |n: &str| a.out.join(n);
    d.vocab.save(&p("vocab.txt"))?;
    data::write_jsonl(&p("train.jsonl"), &d.train)?;
    data::write_jsonl(&p("corpus.jsonl"), &d.eval.corpus)?;
    data::write_jsonl(&p("queries.jsonl"), &d.eval.queries)?;
    d.eval.qrels.save(&p("qrels.tsv"))?;
    data::write_jsonl(&p("sts.jsonl"), &sts)?;
    RunManifest::new(argv, &cfg, a.seed, &[])?.write(&p("manifest.json"))?;
    println!("wrote synthetic task to {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn parse_variants(list: &[String]) -> Result<Variants> {
    let mut v = Variants::default();
    for s in list.iter().map(|s| s.trim()).filter(|s| !s.is_empty()) {
        match s {
            "score" => v.score = true,
            "full-dim" => v.full_dim = true,
            "fix-doc" => v.fix_doc = true,
            other => bail!("unknown variant {other:?} (expected score, full-dim, fix-doc)"),
        }
    }
    Ok(v)
}

fn resolve_train_config(a: &TrainArgs, vocab: &Vocab) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => {
            let mut c = TrainConfig::default();
            c.encoder.vocab_size = vocab.len();
            c
        }
    };
    let o = &mut cfg.objective;
    if let Some(k) = a.objective {
        o.kind = k;
    }
    if let Some(d) = &a.dims {
        o.dims = d.clone();
    }
    if let Some(k) = a.target_dim {
        o.target_dim = k;
    }
    if let Some(v) = &a.variants {
        o.variants = parse_variants(v)?;
    }
    // An explicit dim list for V2 trains every listed dim.
    if a.dims.is_some() && o.kind == ObjectiveKind::V2 {
        o.variants.multi_dim = true;
    }
    macro_rules! set {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src {
                $dst = v;
            }
        };
    }
    set!(o.lambda, a.lambda);
    set!(o.alpha, a.alpha);
    set!(o.beta, a.beta);
    set!(o.temperature, a.temp);
    if let Some(t) = a.teacher {
        o.teacher = match t {
            TeacherArg::Complete => TeacherSide::Complete,
            TeacherArg::Truncated => TeacherSide::Truncated,
        };
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
        cfg.objective.seed = s;
    }
    set!(cfg.steps, a.steps);
    set!(cfg.batch_size, a.batch);
    set!(cfg.learning_rate, a.lr);
    let e = &mut cfg.encoder;
    set!(e.d_model, a.d_model);
    set!(e.n_layers, a.layers);
    set!(e.n_heads, a.heads);
    set!(e.d_ff, a.d_ff);
    set!(e.max_seq_len, a.max_seq_len);
    if let Some(p) = a.pooling {
        e.pooling = match p {
            PoolingArg::Mean => Pooling::Mean,
            PoolingArg::FirstToken => Pooling::FirstToken,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs, argv: &[String]) -> Result<ExitCode> {
    let vocab = Vocab::load(&a.vocab)?;
    let mut cfg = resolve_train_config(&a, &vocab)?;
    cfg.checkpoint_dir = a.out.parent().map(Path::to_path_buf);
    let pairs: Vec<data::TrainPair> = data::read_jsonl(&a.train)?;
    log::info!(
        "training {} on {} pairs for {} steps",
        cfg.objective.label(),
        pairs.len(),
        cfg.steps
    );
    let run = mse2d::train(&cfg, &pairs, &vocab)?;
    run.checkpoint.save(&a.out)?;
    let mut inputs = vec![a.train.clone(), a.vocab.clone()];
    inputs.extend(a.config.clone());
    RunManifest::new(argv, &cfg, cfg.seed, &inputs)?.write(&manifest::path_for(&a.out))?;
    println!(
        "wrote {} (loss {:.6} -> {:.6})",
        a.out.display(),
        run.losses.first().copied().unwrap_or(f64::NAN),
        run.checkpoint.final_loss
    );
    Ok(ExitCode::SUCCESS)
}

struct Loaded {
    ckpt: Checkpoint,
    vocab: Vocab,
    set: EvalSet,
    inputs: Vec<PathBuf>,
}

fn load_eval(d: &EvalData) -> Result<Loaded> {
    let ckpt = Checkpoint::load(&d.checkpoint).with_context(|| format!("loading {}", d.checkpoint.display()))?;
    let vocab = Vocab::load(&d.vocab)?;
    let mut inputs = vec![d.checkpoint.clone(), d.vocab.clone()];
    let set = match d.task {
        TaskArg::Sts => {
            if d.fix_doc {
                bail!("--fix-doc applies to retrieval only");
            }
            let p = d.pairs.as_ref().context("--pairs is required for sts")?;
            let pairs: Vec<StsPair> = data::read_jsonl(p)?;
            inputs.push(p.clone());
            EvalSet::Sts(pairs)
        }
        TaskArg::Retrieval => {
            let (c, q, r) = match (&d.corpus, &d.queries, &d.qrels) {
                (Some(c), Some(q), Some(r)) => (c, q, r),
                _ => bail!("retrieval needs --corpus, --queries and --qrels"),
            };
            let set = RetrievalSet {
                corpus: data::read_texts(c)?,
                queries: data::read_texts(q)?,
                qrels: RunQrels::load(r)?,
            };
            inputs.extend([c.clone(), q.clone(), r.clone()]);
            EvalSet::Retrieval(set)
        }
    };
    Ok(Loaded {
        ckpt,
        vocab,
        set,
        inputs,
    })
}

fn run_sweep(l: &Loaded, d: &EvalData, layers: Vec<usize>, dims: Vec<usize>) -> Result<(SweepResult, SweepOptions)> {
    let opts = SweepOptions {
        layers,
        dims,
        fix_doc: d.fix_doc,
        objective: l.ckpt.train.objective.label(),
        seed: l.ckpt.train.seed,
        cutoff: d.cutoff,
    };
    Ok((eval::sweep(&l.ckpt, &l.vocab, &l.set, &opts)?, opts))
}

#[derive(serde::Serialize)]
struct EvalRecord<'a> {
    task: &'a str,
    layers: &'a [usize],
    dims: &'a [usize],
    fix_doc: bool,
    cutoff: usize,
    objective: &'a str,
}

fn emit(result: &SweepResult, out: Option<&Path>, argv: &[String], l: &Loaded, opts: &SweepOptions, task: TaskArg) -> Result<()> {
    let csv = result.to_csv();
    match out {
        Some(p) => {
            std::fs::write(p, &csv).with_context(|| format!("writing {}", p.display()))?;
            let record = EvalRecord {
                task: if task == TaskArg::Sts { "sts" } else { "retrieval" },
                layers: &opts.layers,
                dims: &opts.dims,
                fix_doc: opts.fix_doc,
                cutoff: opts.cutoff,
                objective: &opts.objective,
            };
            RunManifest::new(argv, &record, opts.seed, &l.inputs)?.write(&manifest::path_for(p))?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs, argv: &[String]) -> Result<ExitCode> {
    let l = load_eval(&a.data)?;
    let (result, opts) = run_sweep(&l, &a.data, vec![a.layer], vec![a.dim])?;
    for r in &result.rows {
        eprintln!("{} @ (layer {}, dim {}) = {:.6}", r.metric, r.layer, r.dim, r.value);
    }
    emit(&result, a.out.as_deref(), argv, &l, &opts, a.data.task)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(a: SweepArgs, argv: &[String]) -> Result<ExitCode> {
    let l = load_eval(&a.data)?;
    let (result, opts) = run_sweep(&l, &a.data, a.layers.clone(), a.dims.clone())?;
    emit(&result, a.out.as_deref(), argv, &l, &opts, a.data.task)?;
    if a.markdown {
        if a.out.is_none() {
            println!();
        }
        print!("{}", result.to_markdown());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    if a.seeds.is_empty() {
        bail!("need at least one seed");
    }
    let rows = gradcheck::run_suite(&a.seeds, a.inject_fault.as_deref())?;
    let mut failed = 0;
    for (name, _) in gradcheck::objective_cases() {
        let mine: Vec<_> = rows.iter().filter(|r| r.objective == name).collect();
        let worst = mine.iter().map(|r| r.report.max_rel_error).fold(0.0, f64::max);
        let ok = mine.iter().all(|r| r.passed());
        failed += usize::from(!ok);
        println!(
            "{:<12} max rel error {:.3e} over {} seeds  {}",
            name,
            worst,
            mine.len(),
            if ok { "PASS" } else { "FAIL" }
        );
    }
    if failed > 0 {
        println!("{failed} objective(s) above {:e}", gradcheck::SUITE_TOLERANCE);
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}
