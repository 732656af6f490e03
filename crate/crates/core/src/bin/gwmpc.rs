use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use gwmpc::dataset::{read_dataset, write_dataset};
use gwmpc::grounding::{build_oracle_encoder, generate_pretraining_corpus, pretrain_encoder, GroundedEncoder, PretrainConfig};
use gwmpc::gwm::{train_gwm, GwmConfig, GwmKind, GwmModel, GwmTrainConfig};
use gwmpc::harness::{ablation_sweep, evaluate_suite, write_report_csv, write_report_jsonl, Components, SuiteBundle, SweepParam};
use gwmpc::mpc::{PlanMode, Planner, PlannerConfig, PromptMode};
use gwmpc::vocab::{Split, Vocabulary};
use gwmpc::wiser::{collect_demos, generate_suite, BenchConfig};
use gwmpc::world::{render, Action, Sprite};

// glibc malloc fragments badly under the short-lived tensor churn of
// evaluation (RSS reached several GB); mimalloc stays flat.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "gwmpc", about = "Grounded world-model MPC benchmark tools")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the train and test task suites.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect expert demonstrations on the train suite.
    Demos {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long, default_value_t = 6)]
        per_task: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also dump PPM frames.
        #[arg(long)]
        frames: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastively pretrain the learned encoder.
    Pretrain {
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = 40_000)]
        n: usize,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 12)]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a world model on a demonstration dataset.
    TrainWm {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        enc: EncoderArgs,
        #[arg(long, default_value = "rendered")]
        kind: String,
        #[arg(long, default_value_t = 12)]
        horizon: usize,
        #[arg(long, default_value_t = 4)]
        keyframes: usize,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate one split and write a CSV report.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        report: PathBuf,
    },
    /// Sweep one planner parameter over both splits.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long, default_value_t = 100)]
        wm_epochs: usize,
        /// CSV path; a JSON-lines summary is written next to it.
        #[arg(long)]
        report: PathBuf,
    },
    /// Run one task and dump its trace and frames.
    Trace {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        task: u32,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EncoderArgs {
    /// Encoder checkpoint, or `oracle` for the symbolic encoder.
    #[arg(long)]
    encoder: String,
    /// Vocabulary for the oracle encoder; defaults to the standard one.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    suite: PathBuf,
    /// Demonstration dataset; defaults to `<suite>/demos`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    enc: EncoderArgs,
    #[arg(long)]
    wm: Option<PathBuf>,
    #[arg(long, default_value = "gwm")]
    mode: String,
    /// Planner settings as key=value lines.
    #[arg(long)]
    planner: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load_vocab(path: Option<&Path>) -> Result<Vocabulary> {
    match path {
        None => Ok(Vocabulary::standard()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn load_encoder(a: &EncoderArgs) -> Result<GroundedEncoder> {
    if a.encoder == "oracle" {
        let v = load_vocab(a.vocab.as_deref())?;
        return Ok(build_oracle_encoder(&v, &v.render_config())?);
    }
    GroundedEncoder::load(Path::new(&a.encoder)).with_context(|| format!("loading encoder {}", a.encoder))
}

fn parse_split(s: &str) -> Result<Split> {
    Ok(Split::parse(s)?)
}

fn planner_config(run: &RunArgs) -> Result<PlannerConfig> {
    let mut cfg = PlannerConfig { mode: PlanMode::parse(&run.mode)?, ..PlannerConfig::default() };
    if let Some(p) = &run.planner {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        for (k, v) in gwmpc::parse_key_values(&text)? {
            let bad = || anyhow::anyhow!("planner config {k}: bad value {v:?}");
            match k.as_str() {
                "n" => cfg.n = v.parse().map_err(|_| bad())?,
                "horizon" => cfg.horizon = v.parse().map_err(|_| bad())?,
                "keyframes" => cfg.keyframes = v.parse().map_err(|_| bad())?,
                "replan_interval" => cfg.replan_interval = v.parse().map_err(|_| bad())?,
                "temperature" => cfg.temperature = v.parse().map_err(|_| bad())?,
                "episode_cap" => cfg.episode_cap = v.parse().map_err(|_| bad())?,
                "prompts" => {
                    cfg.prompts = match v.as_str() {
                        "decomposed" => PromptMode::Decomposed,
                        "whole" => PromptMode::Whole,
                        _ => return Err(bad()),
                    }
                }
                "proposal_sprite" => {
                    cfg.proposal_sprite = match v.as_str() {
                        "ring" => Sprite::Ring,
                        "cross" => Sprite::Cross,
                        _ => return Err(bad()),
                    }
                }
                other => bail!("unknown planner key {other:?}"),
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Loaded {
    bundle: SuiteBundle,
    enc: GroundedEncoder,
    ds: gwmpc::wiser::DemoDataset,
    gwm: Option<GwmModel>,
    cfg: PlannerConfig,
}

fn load_run(run: &RunArgs) -> Result<Loaded> {
    let bundle = SuiteBundle::load(&run.suite).with_context(|| format!("loading suite {}", run.suite.display()))?;
    let data = run.data.clone().unwrap_or_else(|| run.suite.join("demos"));
    let ds = read_dataset(&data).with_context(|| format!("loading demos {}", data.display()))?;
    ds.verify(&bundle.train)?;
    let enc = load_encoder(&run.enc)?;
    let gwm = match &run.wm {
        Some(p) => Some(GwmModel::load(p, &enc).with_context(|| format!("loading world model {}", p.display()))?),
        None => None,
    };
    let cfg = planner_config(run)?;
    if cfg.mode == PlanMode::Gwm && gwm.is_none() {
        bail!("mode gwm needs --wm");
    }
    Ok(Loaded { bundle, enc, ds, gwm, cfg })
}

fn print_json(v: &serde_json::Value) {
    println!("{v}");
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Gen { config, seed, out } => {
            let bench = match config {
                Some(p) => BenchConfig::parse(&fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?,
                None => BenchConfig::default(),
            };
            let vocab = Vocabulary::standard();
            let (train, test) = generate_suite(&bench, &vocab, seed)?;
            let report = gwmpc::wiser::validate_split(&train, &test);
            if !report.passed() {
                bail!("generated suites fail validation: {:?}", report.failures);
            }
            let bundle = SuiteBundle { bench, vocab, train, test };
            bundle.save(&out)?;
            print_json(&serde_json::json!({
                "train_tasks": bundle.train.tasks.len(),
                "test_tasks": bundle.test.tasks.len(),
                "train_hash": bundle.train.hash(),
                "test_hash": bundle.test.hash(),
            }));
        }
        Cmd::Demos { suite, per_task, seed, frames, out } => {
            let bundle = SuiteBundle::load(&suite)?;
            let ds = collect_demos(&bundle.train, per_task, seed)?;
            let cfg = bundle.vocab.render_config();
            write_dataset(&ds, &out, frames.then_some(&cfg))?;
            print_json(&serde_json::json!({ "trajectories": ds.trajectories.len(), "transitions": ds.transitions() }));
        }
        Cmd::Pretrain { vocab, n, epochs, horizon, seed, out } => {
            let v = load_vocab(vocab.as_deref())?;
            let corpus = generate_pretraining_corpus(&v, n, horizon, seed)?;
            let cfg = PretrainConfig { epochs, seed, ..PretrainConfig::default() };
            let (enc, report) = pretrain_encoder(&v, &corpus, &cfg)?;
            enc.save(&out)?;
            print_json(&serde_json::json!({
                "encoder_hash": enc.hash(),
                "seconds": report.seconds,
                "final_loss": report.epoch_loss.last(),
                "retrieval": report.retrieval,
                "passes_gate": report.retrieval.passes_gate(),
            }));
        }
        Cmd::TrainWm { data, enc, kind, horizon, keyframes, epochs, seed, out } => {
            let ds = read_dataset(&data)?;
            let enc = load_encoder(&enc)?;
            let cfg = GwmConfig { kind: GwmKind::parse(&kind)?, horizon, keyframes, ..GwmConfig::default() };
            let model = GwmModel::new(cfg, &enc, seed)?;
            let hyper = GwmTrainConfig { epochs, seed, ..GwmTrainConfig::default() };
            let (model, curve) = train_gwm(&model, &ds, &enc, &hyper)?;
            model.save(&out)?;
            print_json(&serde_json::json!({ "gwm_hash": model.hash(), "loss_curve": curve }));
        }
        Cmd::Eval { run, split, report } => {
            let l = load_run(&run)?;
            let suite = l.bundle.split(parse_split(&split)?);
            let table = evaluate_suite(suite, &l.cfg, &l.enc, &l.ds, l.gwm.as_ref(), run.seed)?;
            write_report_csv(&[&table], &report)?;
            let m = table.means();
            print_json(&serde_json::json!({
                "split": split,
                "mode": table.mode.name(),
                "grasp": m.grasp,
                "reach": m.reach,
                "success": m.success,
                "errors": table.errors(),
                "config_hash": table.config_hash,
                "encoder_hash": table.encoder_hash,
                "gwm_hash": table.gwm_hash,
            }));
        }
        Cmd::Ablate { run, param, values, wm_epochs, report } => {
            let l = load_run(&run)?;
            let c = Components {
                train: &l.bundle.train,
                test: &l.bundle.test,
                enc: &l.enc,
                ds: &l.ds,
                gwm: l.gwm.as_ref(),
                gwm_train: GwmTrainConfig { epochs: wm_epochs, ..GwmTrainConfig::default() },
                seed: run.seed,
            };
            let sweep = ablation_sweep(SweepParam::parse(&param)?, &values, &l.cfg, &c)?;
            let tables: Vec<_> = sweep.points.iter().flat_map(|p| [&p.train, &p.test]).collect();
            write_report_csv(&tables, &report)?;
            let summary: Vec<_> = sweep
                .points
                .iter()
                .map(|p| {
                    serde_json::json!({
                        "param": param,
                        "value": p.value,
                        "train_success": p.train.success(),
                        "test_success": p.test.success(),
                    })
                })
                .collect();
            write_report_jsonl(&summary, &report.with_extension("jsonl"))?;
            for s in &summary {
                print_json(s);
            }
            print_json(&serde_json::json!({
                "short_horizon_degrades": sweep.short_horizon_degrades,
                "keyframe_starvation_degrades": sweep.keyframe_starvation_degrades,
            }));
        }
        Cmd::Trace { run, split, task, out } => {
            let l = load_run(&run)?;
            let suite = l.bundle.split(parse_split(&split)?);
            let spec = suite.task(task).with_context(|| format!("no task {task} in the {split} split"))?;
            let planner = Planner::new(l.cfg.clone(), &l.enc, &l.ds, l.gwm.as_ref())?;
            let trace = planner.run_episode(spec, gwmpc::harness::episode_seed(run.seed, spec))?;
            fs::create_dir_all(out.join("frames"))?;
            let mut w = BufWriter::new(fs::File::create(out.join("trace.jsonl"))?);
            trace.write_jsonl(&mut w)?;
            w.flush()?;
            let cfg = l.enc.render_config();
            let mut state = trace.initial.clone();
            for i in 0..=trace.actions.len() {
                let mut f = BufWriter::new(fs::File::create(out.join(format!("frames/f{i:03}.ppm")))?);
                render(&state, cfg).write_ppm(&mut f)?;
                if let Some(&a) = trace.actions.get(i) {
                    state = gwmpc::world::step(&state, Action::from_index(a).context("bad action in trace")?);
                }
            }
            print_json(&serde_json::json!({
                "task": trace.task,
                "steps": trace.actions.len(),
                "replans": trace.replans.len(),
                "outcome": trace.outcome,
            }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": format!("{e:#}") }));
            ExitCode::FAILURE
        }
    }
}
