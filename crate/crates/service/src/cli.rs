//! Command line interface.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refinpaint_core::corpus::manifest_to_jsonl;
use refinpaint_core::engine::{refinpaint, EngineConfig, Trace};
use refinpaint_core::eval::{
    compare_single_pass_vs_refinpaint, masking_ratio_sweep, render_comparison, render_sweep, sweep_spearman,
};
use refinpaint_core::midi::{parse_smf, write_smf};
use refinpaint_core::models::{Evaluator, Feedback, Inpainter, ModelConfig, Network};
use refinpaint_core::remi::{encode, TokenSeq};
use refinpaint_core::train::{read_checkpoint, train_evaluator, train_feedback, train_inpainter, write_checkpoint};
use refinpaint_core::corpus::generate_toy_corpus;

use crate::api::{router, AppState};
use crate::config::{self, Checkpoints, EvalFile, ServiceConfig, TrainFile};
use crate::data::{self, Splits};
use crate::piece::{self, Fragment};
use crate::session::{Models, SessionStore};

#[derive(Debug, Parser)]
#[command(name = "refinpaint", version, about = "Feedback-guided iterative music inpainting")]
pub struct Cli {
    /// Overrides the seed of whatever the command samples.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the REMI tokens of a MIDI file, one per line.
    Tokenize {
        midi: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Corpus utilities.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Train one of the three models.
    Train {
        #[arg(value_enum)]
        model: ModelKind,
        #[arg(long)]
        config: PathBuf,
    },
    /// Refine bars of a MIDI file.
    Run(RunArgs),
    /// Evaluation reports.
    Eval {
        #[arg(value_enum)]
        report: Report,
        #[arg(long)]
        config: PathBuf,
    },
    /// Serve the session API.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        state_dir: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum CorpusCommand {
    /// Write the split manifest of a MIDI directory as JSON lines.
    Build {
        dir: PathBuf,
        /// Defaults to `<dir>/manifest.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write generated toy pieces as MIDI files.
    Toy {
        dir: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Inpainter,
    Feedback,
    Evaluator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Report {
    Sweep,
    Compare,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub midi: PathBuf,
    /// Inclusive bar range, 0-based: `a..b`.
    #[arg(long)]
    pub bars: String,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Fragment tokens kept per iteration, overriding the schedule.
    #[arg(long)]
    pub keep: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Checkpoints and engine defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub inpainter: Option<PathBuf>,
    #[arg(long)]
    pub feedback: Option<PathBuf>,
    /// Output MIDI; defaults to `<midi stem>.refined.mid`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Trace JSON; defaults to `<midi stem>.trace.json`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug)]
pub enum Failure {
    /// Bad invocation; exit code 1.
    Usage(String),
    /// The command failed; exit code 2.
    Runtime(String),
}

fn rt<E: std::fmt::Display>(context: impl std::fmt::Display) -> impl FnOnce(E) -> Failure {
    move |e| Failure::Runtime(format!("{context}: {e}"))
}

pub fn parse_bars(s: &str) -> Result<(usize, usize), Failure> {
    let usage = || Failure::Usage(format!("--bars expects a..b, got {s:?}"));
    let (a, b) = s.split_once("..").ok_or_else(usage)?;
    let a: usize = a.trim().parse().map_err(|_| usage())?;
    let b: usize = b.trim().parse().map_err(|_| usage())?;
    if a > b {
        return Err(usage());
    }
    Ok((a, b))
}

pub fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Tokenize { midi, out } => tokenize(&midi, out.as_deref()),
        Command::Corpus(CorpusCommand::Build { dir, out }) => corpus_build(&dir, out),
        Command::Corpus(CorpusCommand::Toy { dir, count }) => corpus_toy(&dir, count, cli.seed.unwrap_or(0)),
        Command::Train { model, config } => train(model, &config, cli.seed),
        Command::Run(args) => run(args, cli.seed),
        Command::Eval { report, config } => eval(report, &config, cli.seed),
        Command::Serve {
            port,
            state_dir,
            config,
        } => serve(port, state_dir, config, cli.seed),
    }
}

fn read_score(path: &Path) -> Result<refinpaint_core::midi::Score, Failure> {
    let bytes = fs::read(path).map_err(rt(path.display()))?;
    parse_smf(&bytes).map_err(rt(path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(rt(parent.display()))?;
    }
    fs::write(path, bytes).map_err(rt(path.display()))
}

fn tokenize(midi: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let dump = encode(&read_score(midi)?).dump();
    match out {
        Some(p) => write_file(p, dump.as_bytes()),
        None => {
            print!("{dump}");
            Ok(())
        }
    }
}

fn corpus_build(dir: &Path, out: Option<PathBuf>) -> Result<(), Failure> {
    let records = refinpaint_core::corpus::build_manifest(dir).map_err(rt(dir.display()))?;
    let records: Vec<_> = records.into_iter().map(|(r, _)| r).collect();
    let out = out.unwrap_or_else(|| dir.join("manifest.jsonl"));
    write_file(&out, manifest_to_jsonl(&records).as_bytes())?;
    println!("{} files -> {}", records.len(), out.display());
    Ok(())
}

fn corpus_toy(dir: &Path, count: usize, seed: u64) -> Result<(), Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (i, score) in generate_toy_corpus(count, &mut rng).iter().enumerate() {
        write_file(&dir.join(format!("toy-{i:05}.mid")), &write_smf(score))?;
    }
    println!("{count} pieces -> {}", dir.display());
    Ok(())
}

fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    config::load(path).map_err(|e| Failure::Runtime(e.to_string()))
}

fn load_splits(spec: &config::CorpusSpec, config_path: &Path) -> Result<Splits, Failure> {
    let mut spec = spec.clone();
    spec.dir = spec.dir.map(|d| config::resolve(config_path, &d));
    let splits = data::load(&spec).map_err(rt("corpus"))?;
    log::info!(
        "corpus: {} train, {} val, {} test",
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    Ok(splits)
}

fn checkpoint<M: Network>(path: Option<&PathBuf>, what: &str) -> Result<M, Failure> {
    let path = path.ok_or_else(|| Failure::Runtime(format!("no {what} checkpoint configured")))?;
    read_checkpoint(path).map_err(rt(path.display()))
}

fn train(kind: ModelKind, config_path: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let mut file: TrainFile = load_config(config_path)?;
    if let Some(s) = seed {
        file.train.seed = s;
        file.init_seed = s;
    }
    file.train.out_dir = file.train.out_dir.map(|d| config::resolve(config_path, &d));
    let out = config::resolve(config_path, &file.out);
    let splits = load_splits(&file.corpus, config_path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(file.init_seed);
    let model_config = |desk: ModelConfig| file.model.clone().unwrap_or(desk);
    let report = match kind {
        ModelKind::Inpainter => {
            let mut m = Inpainter::build(model_config(ModelConfig::desk_inpainter()), &mut rng).map_err(rt("model"))?;
            let r = train_inpainter(&mut m, &splits.train, &splits.val, &file.train).map_err(rt("training"))?;
            write_checkpoint(&m, &out).map_err(rt(out.display()))?;
            r
        }
        ModelKind::Feedback => {
            let inp_path = file.inpainter.as_ref().map(|p| config::resolve(config_path, p));
            let inpainter: Inpainter = checkpoint(inp_path.as_ref(), "inpainter")?;
            let mut m = Feedback::build(model_config(ModelConfig::desk_feedback()), &mut rng).map_err(rt("model"))?;
            let r = train_feedback(&mut m, &inpainter, &splits.train, &splits.val, &file.train)
                .map_err(rt("training"))?;
            write_checkpoint(&m, &out).map_err(rt(out.display()))?;
            r
        }
        ModelKind::Evaluator => {
            let mut m = Evaluator::build(model_config(ModelConfig::desk_evaluator()), &mut rng).map_err(rt("model"))?;
            let r = train_evaluator(&mut m, &splits.train, &splits.val, &file.train).map_err(rt("training"))?;
            write_checkpoint(&m, &out).map_err(rt(out.display()))?;
            r
        }
    };
    println!(
        "{} steps, final loss {:.4}, validation {}",
        report.losses.len(),
        report.losses.last().copied().unwrap_or(f64::NAN),
        report.final_val_loss.map_or("-".to_string(), |v| format!("{v:.4}"))
    );
    println!("checkpoint -> {}", out.display());
    Ok(())
}

fn service_config(path: Option<&Path>) -> Result<(ServiceConfig, Checkpoints), Failure> {
    match path {
        Some(p) => {
            let c: ServiceConfig = load_config(p)?;
            let ckpts = c.checkpoints.resolved(p);
            Ok((c, ckpts))
        }
        None => Ok((ServiceConfig::default(), Checkpoints::default())),
    }
}

fn default_output(midi: &Path, suffix: &str) -> PathBuf {
    let stem = midi.file_stem().map_or("output".into(), |s| s.to_string_lossy().into_owned());
    midi.with_file_name(format!("{stem}.{suffix}"))
}

fn run(args: RunArgs, seed: Option<u64>) -> Result<(), Failure> {
    let (a, b) = parse_bars(&args.bars)?;
    let (service, mut ckpts) = service_config(args.config.as_deref())?;
    ckpts.inpainter = args.inpainter.or(ckpts.inpainter);
    ckpts.feedback = args.feedback.or(ckpts.feedback);
    let mut engine: EngineConfig = service.engine.engine_config();
    if let Some(t) = args.iterations {
        engine.iterations = t;
    }
    if let Some(t) = args.temperature {
        engine.temperature = t;
    }
    if let Some(s) = seed {
        engine.seed = s;
    }
    engine.keep_override = args.keep;
    engine.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let inpainter: Inpainter = checkpoint(ckpts.inpainter.as_ref(), "inpainter")?;
    let feedback: Feedback = checkpoint(ckpts.feedback.as_ref(), "feedback")?;
    let tokens = encode(&read_score(&args.midi)?);
    let max_len = inpainter.config().max_len.min(feedback.config().max_len);
    let fragment = Fragment::select(&tokens.tokens, a, b, max_len).map_err(rt("--bars"))?;
    let window = fragment.window(&tokens);
    let m_u = fragment.mask();
    let output = refinpaint(&window, &m_u, &inpainter, &feedback, &engine, None).map_err(rt("refinement"))?;
    for r in &output.records {
        println!("iteration {:>2}  GFS {:.4}  regenerated {}", r.index, r.gfs, r.regenerated.count());
    }
    println!("selected iteration {}", output.selected);
    let out = args.out.unwrap_or_else(|| default_output(&args.midi, "refined.mid"));
    let trace_path = args.trace.unwrap_or_else(|| default_output(&args.midi, "trace.json"));
    let score = piece::render_score(&tokens, &fragment, &output.selected_record().tokens);
    write_file(&out, &write_smf(&score))?;
    write_file(&trace_path, Trace::new(&engine, &m_u, &output).to_json().as_bytes())?;
    println!("midi -> {}\ntrace -> {}", out.display(), trace_path.display());
    Ok(())
}

fn pick_test_set(splits: Splits) -> Vec<TokenSeq> {
    [splits.test, splits.val, splits.train]
        .into_iter()
        .find(|s| !s.is_empty())
        .unwrap_or_default()
}

fn eval(report: Report, config_path: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let mut file: EvalFile = load_config(config_path)?;
    if let Some(s) = seed {
        file.sweep.seed = s;
        file.compare.seed = s;
    }
    let ckpts = file.checkpoints.resolved(config_path);
    let test = pick_test_set(load_splits(&file.corpus, config_path)?);
    let inpainter: Inpainter = checkpoint(ckpts.inpainter.as_ref(), "inpainter")?;
    let json = match report {
        Report::Sweep => {
            let rows = masking_ratio_sweep(&inpainter, &test, &file.sweep).map_err(rt("sweep"))?;
            print!("{}", render_sweep(&rows));
            println!("Spearman(ratio, NLL) = {:.4}", sweep_spearman(&rows));
            serde_json::to_string_pretty(&rows).expect("rows serialize")
        }
        Report::Compare => {
            let feedback: Feedback = checkpoint(ckpts.feedback.as_ref(), "feedback")?;
            let evaluator: Evaluator = checkpoint(ckpts.evaluator.as_ref(), "evaluator")?;
            let r = compare_single_pass_vs_refinpaint(&inpainter, &feedback, &evaluator, &test, &file.compare)
                .map_err(rt("comparison"))?;
            print!("{}", render_comparison(&r.rows));
            r.to_json()
        }
    };
    if let Some(out) = file.out {
        let out = config::resolve(config_path, &out);
        write_file(&out, json.as_bytes())?;
        println!("report -> {}", out.display());
    }
    Ok(())
}

fn serve(port: Option<u16>, state_dir: Option<PathBuf>, config: Option<PathBuf>, seed: Option<u64>) -> Result<(), Failure> {
    let (service, ckpts) = service_config(config.as_deref())?;
    let mut engine = service.engine.engine_config();
    if let Some(s) = seed {
        engine.seed = s;
    }
    engine.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let state_dir = match (state_dir, &config) {
        (Some(d), _) => d,
        (None, Some(c)) => config::resolve(c, &service.server.state_dir),
        (None, None) => service.server.state_dir.clone(),
    };
    let port = port.unwrap_or(service.server.port);
    let models = Models {
        inpainter: checkpoint(ckpts.inpainter.as_ref(), "inpainter")?,
        feedback: checkpoint(ckpts.feedback.as_ref(), "feedback")?,
    };
    let store = SessionStore::open(&state_dir).map_err(rt(state_dir.display()))?;
    let app = Arc::new(AppState::new(models, engine, store));
    let runtime = tokio::runtime::Runtime::new().map_err(rt("runtime"))?;
    runtime.block_on(async move {
        let addr = SocketAddr::from(([0, 0, 0, 0], port));
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(rt(addr))?;
        log::info!("listening on {addr}, state in {}", state_dir.display());
        axum::serve(listener, router(app)).await.map_err(rt("server"))
    })
}
