//! Suite evaluation, hyperparameter sweeps, reports, and on-disk layout of
//! generated suites.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::grounding::GroundedEncoder;
use crate::gwm::{train_gwm, GwmModel, GwmTrainConfig};
use crate::mpc::{EpisodeTrace, PlanMode, Planner, PlannerConfig, PromptMode};
use crate::vocab::{Split, Vocabulary};
use crate::wiser::{collect_demos_for, half_task_ids, BenchConfig, DemoDataset, TaskSpec, TaskSuite};
use crate::Error;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task_id: u32,
    pub category: usize,
    pub split: Split,
    pub grasp: u8,
    pub reach: u8,
    pub success: u8,
    /// Set when the episode raised an error; the row then counts as a failure.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub split: Split,
    pub mode: PlanMode,
    pub config_hash: String,
    pub encoder_hash: String,
    pub gwm_hash: Option<String>,
    pub seed: u64,
    pub rows: Vec<TaskRow>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Means {
    pub grasp: f64,
    pub reach: f64,
    pub success: f64,
}

impl MetricsTable {
    pub fn means(&self) -> Means {
        let n = self.rows.len().max(1) as f64;
        let avg = |f: fn(&TaskRow) -> u8| self.rows.iter().map(|r| f64::from(f(r))).sum::<f64>() / n;
        Means { grasp: avg(|r| r.grasp), reach: avg(|r| r.reach), success: avg(|r| r.success) }
    }

    pub fn success(&self) -> f64 {
        self.means().success
    }

    pub fn errors(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }
}

/// Per-episode seed derived from the run seed and the task identity.
pub fn episode_seed(seed: u64, task: &TaskSpec) -> u64 {
    let split = match task.split {
        Split::Train => 0,
        Split::Test => 1,
    };
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (split << 32 | u64::from(task.id))
}

/// Runs every task of `suite` once; results come back in task order
/// regardless of `parallel`.
pub fn run_suite(planner: &Planner, suite: &TaskSuite, seed: u64, parallel: bool) -> Vec<Result<EpisodeTrace, Error>> {
    let run = |t: &TaskSpec| planner.run_episode(t, episode_seed(seed, t));
    if parallel {
        suite.tasks.par_iter().map(run).collect()
    } else {
        suite.tasks.iter().map(run).collect()
    }
}

pub fn table_from_traces(
    planner: &Planner,
    suite: &TaskSuite,
    seed: u64,
    encoder_hash: &str,
    gwm: Option<&GwmModel>,
    traces: &[Result<EpisodeTrace, Error>],
) -> MetricsTable {
    let rows = suite
        .tasks
        .iter()
        .zip(traces)
        .map(|(t, r)| {
            let (outcome, error) = match r {
                Ok(tr) => (tr.outcome, None),
                Err(e) => (Default::default(), Some(e.to_string())),
            };
            TaskRow {
                task_id: t.id,
                category: t.category,
                split: t.split,
                grasp: outcome.grasp,
                reach: outcome.reach,
                success: outcome.success,
                error,
            }
        })
        .collect();
    let cfg = planner.config();
    MetricsTable {
        split: suite.split,
        mode: cfg.mode,
        config_hash: cfg.hash(),
        encoder_hash: encoder_hash.to_string(),
        gwm_hash: gwm.filter(|_| cfg.mode == PlanMode::Gwm).map(GwmModel::hash),
        seed,
        rows,
    }
}

/// Evaluates every task of `suite` once under `cfg`.
pub fn evaluate_suite(
    suite: &TaskSuite,
    cfg: &PlannerConfig,
    enc: &GroundedEncoder,
    ds: &DemoDataset,
    gwm: Option<&GwmModel>,
    seed: u64,
) -> Result<MetricsTable, Error> {
    let planner = Planner::new(cfg.clone(), enc, ds, gwm)?;
    let traces = run_suite(&planner, suite, seed, true);
    Ok(table_from_traces(&planner, suite, seed, &enc.hash(), gwm, &traces))
}

/// Chi-square goodness of fit of `counts` against the uniform distribution.
/// Returns (statistic, p-value).
pub fn chi_square_uniform(counts: &[u64]) -> Result<(f64, f64), Error> {
    let total: u64 = counts.iter().sum();
    if counts.len() < 2 || total == 0 {
        return Err(Error::Precondition("chi-square needs at least two bins and one observation".into()));
    }
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).map_err(|e| Error::Precondition(e.to_string()))?;
    Ok((stat, 1.0 - dist.cdf(stat)))
}

/// Counts of the selected candidate rank over replans that offered `n` candidates.
pub fn selection_counts(traces: &[EpisodeTrace], n: usize) -> Vec<u64> {
    let mut counts = vec![0u64; n];
    for r in traces.iter().flat_map(|t| &t.replans).filter(|r| r.candidates.len() == n) {
        counts[r.selected] += 1;
    }
    counts
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    ReplanInterval,
    Horizon,
    Keyframes,
    Mode,
    DatasetFraction,
    Prompts,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self, Error> {
        match s {
            "replan_interval" => Ok(Self::ReplanInterval),
            "horizon" => Ok(Self::Horizon),
            "keyframes" => Ok(Self::Keyframes),
            "mode" => Ok(Self::Mode),
            "dataset_fraction" => Ok(Self::DatasetFraction),
            "prompts" => Ok(Self::Prompts),
            other => Err(Error::Config(format!("unknown sweep parameter {other:?}"))),
        }
    }
}

/// Everything a sweep needs besides the planner config.
pub struct Components<'a> {
    pub train: &'a TaskSuite,
    pub test: &'a TaskSuite,
    pub enc: &'a GroundedEncoder,
    pub ds: &'a DemoDataset,
    pub gwm: Option<&'a GwmModel>,
    /// Used to retrain the world model when a sweep changes its data or shape.
    pub gwm_train: GwmTrainConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: String,
    pub train: MetricsTable,
    pub test: MetricsTable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub param: SweepParam,
    pub points: Vec<SweepPoint>,
    /// Shortest horizon scores more than 0.05 below the default horizon on test.
    pub short_horizon_degrades: Option<bool>,
    /// Fewest keyframes scores more than 0.05 below the default keyframes on test.
    pub keyframe_starvation_degrades: Option<bool>,
}

fn apply(param: SweepParam, value: &str, base: &PlannerConfig) -> Result<PlannerConfig, Error> {
    let mut cfg = base.clone();
    let num = || value.parse::<usize>().map_err(|_| Error::Config(format!("bad {param:?} value {value:?}")));
    match param {
        SweepParam::ReplanInterval => cfg.replan_interval = num()?,
        SweepParam::Horizon => {
            cfg.horizon = num()?;
            cfg.replan_interval = cfg.replan_interval.min(cfg.horizon);
        }
        SweepParam::Keyframes => cfg.keyframes = num()?,
        SweepParam::Mode => cfg.mode = PlanMode::parse(value)?,
        SweepParam::Prompts => {
            cfg.prompts = match value {
                "decomposed" => PromptMode::Decomposed,
                "whole" => PromptMode::Whole,
                other => return Err(Error::Config(format!("unknown prompt mode {other:?}"))),
            }
        }
        SweepParam::DatasetFraction => match value {
            "1" | "1.0" | "0.5" => {}
            other => return Err(Error::Config(format!("dataset_fraction must be 1 or 0.5, got {other:?}"))),
        },
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The single-demonstration dataset over the first half of the categories.
pub fn half_dataset(train: &TaskSuite, seed: u64) -> Result<DemoDataset, Error> {
    collect_demos_for(train, &half_task_ids(train), 1, seed)
}

/// One train and one test table per value. Every value is validated before any run.
pub fn ablation_sweep(
    param: SweepParam,
    values: &[String],
    base: &PlannerConfig,
    c: &Components,
) -> Result<SweepReport, Error> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let cfgs = values.iter().map(|v| apply(param, v, base)).collect::<Result<Vec<_>, _>>()?;
    let mut points = Vec::with_capacity(values.len());
    for (value, cfg) in values.iter().zip(cfgs) {
        let half;
        let ds = if param == SweepParam::DatasetFraction && value.starts_with("0.5") {
            half = half_dataset(c.train, c.seed)?;
            &half
        } else {
            c.ds
        };
        let retrained;
        let gwm = match c.gwm {
            Some(m) if cfg.mode == PlanMode::Gwm => {
                let shape_changed = m.config().horizon != cfg.horizon || m.config().keyframes != cfg.keyframes;
                if shape_changed || !std::ptr::eq(ds, c.ds) {
                    let mut mc = m.config().clone();
                    mc.horizon = cfg.horizon;
                    mc.keyframes = cfg.keyframes;
                    let fresh = GwmModel::new(mc, c.enc, c.gwm_train.seed)?;
                    retrained = train_gwm(&fresh, ds, c.enc, &c.gwm_train)?.0;
                    Some(&retrained)
                } else {
                    Some(m)
                }
            }
            other => other,
        };
        points.push(SweepPoint {
            value: value.clone(),
            train: evaluate_suite(c.train, &cfg, c.enc, ds, gwm, c.seed)?,
            test: evaluate_suite(c.test, &cfg, c.enc, ds, gwm, c.seed)?,
        });
    }
    let flag = |p: SweepParam, default: usize| -> Option<bool> {
        if param != p {
            return None;
        }
        let at = |v: usize| points.iter().find(|pt| pt.value == v.to_string()).map(|pt| pt.test.success());
        let smallest = values.iter().filter_map(|v| v.parse::<usize>().ok()).min()?;
        Some(at(smallest)? < at(default)? - 0.05)
    };
    Ok(SweepReport {
        param,
        short_horizon_degrades: flag(SweepParam::Horizon, base.horizon),
        keyframe_starvation_degrades: flag(SweepParam::Keyframes, base.keyframes),
        points,
    })
}

const CSV_HEADER: [&str; 6] = ["task_id", "category", "split", "grasp", "reach", "success"];

/// CSV with one row per task followed by one `mean` row per split.
pub fn write_report_csv(tables: &[&MetricsTable], path: &Path) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for t in tables {
        for r in &t.rows {
            w.write_record([
                r.task_id.to_string(),
                r.category.to_string(),
                r.split.name().to_string(),
                r.grasp.to_string(),
                r.reach.to_string(),
                r.success.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    for t in tables.iter().filter(|t| !t.rows.is_empty()) {
        let m = t.means();
        w.write_record([
            "mean".to_string(),
            String::new(),
            t.split.name().to_string(),
            format!("{:.6}", m.grasp),
            format!("{:.6}", m.reach),
            format!("{:.6}", m.success),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Structured-text form: one JSON object per line.
pub fn write_report_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<(), Error> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it).expect("report serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format { offset: 0, reason: format!("{other:?}") },
    }
}

/// Files `gen` writes: the benchmark config, the vocabulary and both suites.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteBundle {
    pub bench: BenchConfig,
    pub vocab: Vocabulary,
    pub train: TaskSuite,
    pub test: TaskSuite,
}

impl SuiteBundle {
    pub fn save(&self, dir: &Path) -> Result<(), Error> {
        std::fs::create_dir_all(dir)?;
        fn write<T: Serialize>(path: &Path, v: &T) -> Result<(), Error> {
            std::fs::write(path, serde_json::to_string_pretty(v).expect("value serializes"))?;
            Ok(())
        }
        write(&dir.join("vocab.json"), &self.vocab)?;
        write(&dir.join("bench.json"), &self.bench)?;
        write(&dir.join("train.json"), &self.train)?;
        write(&dir.join("test.json"), &self.test)
    }

    pub fn load(dir: &Path) -> Result<Self, Error> {
        fn read<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Error> {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Format { offset: 0, reason: format!("{}: {e}", path.display()) })
        }
        Ok(Self {
            vocab: read(&dir.join("vocab.json"))?,
            bench: read(&dir.join("bench.json"))?,
            train: read(&dir.join("train.json"))?,
            test: read(&dir.join("test.json"))?,
        })
    }

    pub fn split(&self, split: Split) -> &TaskSuite {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grounding::build_oracle_encoder;
    use crate::wiser::{collect_demos, generate_suite};

    #[test]
    fn chi_square_matches_known_values() {
        let (s, p) = chi_square_uniform(&[10, 10, 10, 10]).unwrap();
        assert_eq!(s, 0.0);
        assert!((p - 1.0).abs() < 1e-12);
        let (s, p) = chi_square_uniform(&[30, 10]).unwrap();
        assert!((s - 10.0).abs() < 1e-12);
        assert!((p - 0.001565).abs() < 1e-5, "{p}");
        assert!(chi_square_uniform(&[3]).is_err());
    }

    #[test]
    fn parallel_and_sequential_agree_and_reports_are_stable() {
        let v = Vocabulary::standard();
        let enc = build_oracle_encoder(&v, &v.render_config()).unwrap();
        let (train, _) = generate_suite(&BenchConfig { categories: 2 }, &v, 3).unwrap();
        let ds = collect_demos(&train, 1, 0).unwrap();
        for mode in [PlanMode::Random, PlanMode::Gt] {
            let cfg = PlannerConfig { mode, ..PlannerConfig::default() };
            let planner = Planner::new(cfg, &enc, &ds, None).unwrap();
            let a = run_suite(&planner, &train, 5, true);
            let b = run_suite(&planner, &train, 5, false);
            let strip = |v: Vec<Result<EpisodeTrace, Error>>| v.into_iter().map(Result::unwrap).collect::<Vec<_>>();
            assert_eq!(strip(a), strip(b));
        }
        let cfg = PlannerConfig { mode: PlanMode::Gt, ..PlannerConfig::default() };
        let table = evaluate_suite(&train, &cfg, &enc, &ds, None, 5).unwrap();
        assert_eq!(table.rows.len(), 24);
        assert_eq!(table.success(), 1.0);
        let m = table.means();
        assert!(m.success <= m.grasp.min(m.reach));

        let dir = tempfile::tempdir().unwrap();
        let (p1, p2, p3) = (dir.path().join("a.csv"), dir.path().join("b.csv"), dir.path().join("e.csv"));
        write_report_csv(&[&table], &p1).unwrap();
        write_report_csv(&[&table], &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let mut r = csv::Reader::from_path(&p1).unwrap();
        let recs: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
        assert_eq!(recs.len(), 25);
        for (rec, row) in recs.iter().zip(&table.rows) {
            assert_eq!(rec[0].parse::<u32>().unwrap(), row.task_id);
            assert_eq!(rec[1].parse::<usize>().unwrap(), row.category);
            assert_eq!(&rec[2], row.split.name());
            assert_eq!(rec[5].parse::<u8>().unwrap(), row.success);
        }
        let empty = MetricsTable { rows: Vec::new(), ..table.clone() };
        write_report_csv(&[&empty], &p3).unwrap();
        assert_eq!(std::fs::read_to_string(&p3).unwrap().trim(), CSV_HEADER.join(","));
    }

    #[test]
    fn sweeps_reject_bad_values_before_running() {
        let v = Vocabulary::standard();
        let enc = build_oracle_encoder(&v, &v.render_config()).unwrap();
        let (train, test) = generate_suite(&BenchConfig { categories: 1 }, &v, 3).unwrap();
        let ds = collect_demos(&train, 1, 0).unwrap();
        let c = Components { train: &train, test: &test, enc: &enc, ds: &ds, gwm: None, gwm_train: Default::default(), seed: 0 };
        let base = PlannerConfig { mode: PlanMode::Gt, ..PlannerConfig::default() };
        let bad = ablation_sweep(SweepParam::ReplanInterval, &["2".into(), "13".into()], &base, &c);
        assert!(bad.is_err());
        let ok = ablation_sweep(SweepParam::ReplanInterval, &["2".into(), "4".into(), "6".into()], &base, &c).unwrap();
        assert_eq!(ok.points.len(), 3);
    }

    #[test]
    fn bundles_round_trip() {
        let v = Vocabulary::standard();
        let bench = BenchConfig { categories: 2 };
        let (train, test) = generate_suite(&bench, &v, 1).unwrap();
        let b = SuiteBundle { bench, vocab: v, train, test };
        let dir = tempfile::tempdir().unwrap();
        b.save(dir.path()).unwrap();
        assert_eq!(SuiteBundle::load(dir.path()).unwrap(), b);
    }
}
