//! The planner: retrieve candidate chunks near the current proprio state,
//! embed each candidate's future, score futures against instruction goals,
//! execute a prefix of the winner, repeat.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grounding::{cosine, GroundedEncoder};
use crate::gwm::{gt_future, predict_future, render_action_tokens, GwmModel, PredictionInput};
use crate::knn::{Candidate, ProprioIndex};
use crate::vocab::{tokenize, SYSTEM_PROMPT};
use crate::wiser::{DemoDataset, TaskSpec};
use crate::world::{keyframe_indices, render, Action, EpisodeOutcome, Image, Proprio, Rollout, Sprite, WorldState, EPISODE_CAP};
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PlanMode {
    /// Futures predicted by the world model.
    Gwm,
    /// Futures from the true simulator.
    Gt,
    /// Current frame plus action tokens, no prediction.
    NoWm,
    /// Uniform choice among the candidates.
    Random,
}

impl PlanMode {
    pub fn parse(s: &str) -> Result<Self, Error> {
        match s {
            "gwm" => Ok(Self::Gwm),
            "gt" => Ok(Self::Gt),
            "no_wm" | "no-wm" => Ok(Self::NoWm),
            "random" => Ok(Self::Random),
            other => Err(Error::Config(format!("unknown planner mode {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Gwm => "gwm",
            Self::Gt => "gt",
            Self::NoWm => "no_wm",
            Self::Random => "random",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptMode {
    /// Separate pick and place goals, switched by grasp state.
    Decomposed,
    /// One goal from the full instruction.
    Whole,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub n: usize,
    pub horizon: usize,
    pub keyframes: usize,
    pub replan_interval: usize,
    pub temperature: f64,
    pub mode: PlanMode,
    pub prompts: PromptMode,
    /// Sprite used when rendering candidate actions into tokens.
    pub proposal_sprite: Sprite,
    pub episode_cap: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            n: 12,
            horizon: 12,
            keyframes: 4,
            replan_interval: 4,
            temperature: 1.0,
            mode: PlanMode::Gwm,
            prompts: PromptMode::Decomposed,
            proposal_sprite: Sprite::Ring,
            episode_cap: EPISODE_CAP,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.n == 0 {
            return Err(Error::Config("N must be at least 1".into()));
        }
        if self.replan_interval == 0 || self.replan_interval > self.horizon {
            return Err(Error::Config(format!(
                "replan interval {} must be in 1..={}",
                self.replan_interval, self.horizon
            )));
        }
        keyframe_indices(self.horizon, self.keyframes).map_err(|e| Error::Config(e.to_string()))?;
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.episode_cap == 0 {
            return Err(Error::Config("episode cap must be positive".into()));
        }
        Ok(())
    }

    /// Stable identifier of every field, for report metadata.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(&Sha256::digest(serde_json::to_vec(self).expect("config serializes"))[..8])
    }
}

/// Splits a task instruction into pick and place prompts; `None` when it
/// does not follow the task template.
pub fn decompose_instruction(instruction: &str) -> Option<(String, String)> {
    let rest = instruction.trim().strip_prefix("pick up the ")?;
    let (x, y) = rest.split_once(" and place it onto the ")?;
    let (x, y) = (x.trim(), y.trim());
    if tokenize(x).is_empty() || tokenize(y).is_empty() || y.contains(" and place it onto the ") {
        return None;
    }
    Some((crate::vocab::pick_prompt(x), crate::vocab::place_prompt(y)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Goals {
    Decomposed { pick: Vec<f64>, place: Vec<f64> },
    Whole(Vec<f64>),
}

fn with_system(prompt: &str) -> String {
    format!("{SYSTEM_PROMPT} {prompt}")
}

/// Goal embeddings in the context of the reset frame `o0` and current frame `ot`.
/// Instructions that do not decompose fall back to a single whole goal.
pub fn build_goal_embeddings(
    enc: &GroundedEncoder,
    instruction: &str,
    o0: &Image,
    ot: &Image,
    mode: PromptMode,
) -> Result<Goals, Error> {
    let context = [o0.clone(), ot.clone()];
    if mode == PromptMode::Decomposed {
        if let Some((pick, place)) = decompose_instruction(instruction) {
            return Ok(Goals::Decomposed {
                pick: enc.encode_instruction(&with_system(&pick), &context)?,
                place: enc.encode_instruction(&with_system(&place), &context)?,
            });
        }
    }
    Ok(Goals::Whole(enc.encode_instruction(&with_system(instruction), &context)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub pick_cos: Vec<f64>,
    pub place_cos: Vec<f64>,
    pub sigma_pick: Vec<f64>,
    pub sigma_place: Vec<f64>,
    /// The σ vector the selection used.
    pub selected: Vec<f64>,
}

/// Cosines to each goal, softmax per goal over candidates, then the grasp
/// switch and argmax (earliest rank wins ties).
pub fn score_candidates(
    z_list: &[Vec<f64>],
    goals: &Goals,
    grasped: bool,
    temperature: f64,
) -> Result<(CandidateScore, usize), Error> {
    if z_list.is_empty() {
        return Err(Error::Precondition("no candidates to score".into()));
    }
    let cos_to = |g: &[f64]| z_list.iter().map(|z| cosine(z, g)).collect::<Result<Vec<_>, _>>();
    let (pick_cos, place_cos) = match goals {
        Goals::Decomposed { pick, place } => (cos_to(pick)?, cos_to(place)?),
        Goals::Whole(g) => {
            let c = cos_to(g)?;
            (c.clone(), c)
        }
    };
    let sigma_pick = diffmath::softmax(&pick_cos, temperature)?;
    let sigma_place = diffmath::softmax(&place_cos, temperature)?;
    let selected = if grasped { sigma_place.clone() } else { sigma_pick.clone() };
    let best = (0..selected.len()).fold(0, |b, i| if selected[i] > selected[b] { i } else { b });
    Ok((CandidateScore { pick_cos, place_cos, sigma_pick, sigma_place, selected }, best))
}

/// One candidate as recorded in a trace.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateRef {
    pub traj: u32,
    pub step: u32,
    pub distance: i32,
    /// Action indices.
    pub chunk: Vec<u8>,
}

impl From<&Candidate> for CandidateRef {
    fn from(c: &Candidate) -> Self {
        Self { traj: c.traj, step: c.step, distance: c.distance, chunk: c.chunk.iter().map(|a| a.index()).collect() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplanRecord {
    /// Actions executed before this replan.
    pub at_step: usize,
    pub state: WorldState,
    pub grasped: bool,
    pub candidates: Vec<CandidateRef>,
    /// Absent in random mode.
    pub score: Option<CandidateScore>,
    pub selected: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub task: String,
    pub mode: PlanMode,
    pub seed: u64,
    pub config_hash: String,
    pub encoder_hash: String,
    pub gwm_hash: Option<String>,
    pub initial: WorldState,
    pub replans: Vec<ReplanRecord>,
    /// Every executed action index, in order.
    pub actions: Vec<u8>,
    pub outcome: EpisodeOutcome,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TraceLine {
    Episode {
        task: String,
        mode: PlanMode,
        seed: u64,
        config_hash: String,
        encoder_hash: String,
        gwm_hash: Option<String>,
        initial: WorldState,
    },
    Replan(ReplanRecord),
    End { actions: Vec<u8>, outcome: EpisodeOutcome },
}

impl EpisodeTrace {
    /// Line-delimited JSON: an episode header, one line per replan, an end line.
    pub fn write_jsonl(&self, out: &mut impl Write) -> Result<(), Error> {
        let header = TraceLine::Episode {
            task: self.task.clone(),
            mode: self.mode,
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            encoder_hash: self.encoder_hash.clone(),
            gwm_hash: self.gwm_hash.clone(),
            initial: self.initial.clone(),
        };
        let json = |l: &TraceLine| serde_json::to_string(l).expect("trace line serializes");
        writeln!(out, "{}", json(&header))?;
        for r in &self.replans {
            writeln!(out, "{}", json(&TraceLine::Replan(r.clone())))?;
        }
        writeln!(out, "{}", json(&TraceLine::End { actions: self.actions.clone(), outcome: self.outcome }))?;
        Ok(())
    }

    pub fn read_jsonl(input: &mut impl BufRead) -> Result<Self, Error> {
        let mut trace: Option<Self> = None;
        let mut offset = 0u64;
        let mut ended = false;
        for line in input.lines() {
            let line = line?;
            let bad = |reason: String| Error::Format { offset, reason };
            let parsed: TraceLine = serde_json::from_str(&line).map_err(|e| bad(format!("trace line: {e}")))?;
            match (parsed, trace.as_mut()) {
                (TraceLine::Episode { task, mode, seed, config_hash, encoder_hash, gwm_hash, initial }, None) => {
                    trace = Some(Self {
                        task,
                        mode,
                        seed,
                        config_hash,
                        encoder_hash,
                        gwm_hash,
                        initial,
                        replans: Vec::new(),
                        actions: Vec::new(),
                        outcome: EpisodeOutcome::default(),
                    });
                }
                (TraceLine::Replan(r), Some(t)) if !ended => t.replans.push(r),
                (TraceLine::End { actions, outcome }, Some(t)) if !ended => {
                    t.actions = actions;
                    t.outcome = outcome;
                    ended = true;
                }
                _ => return Err(bad("trace lines out of order".into())),
            }
            offset += line.len() as u64 + 1;
        }
        match trace {
            Some(t) if ended => Ok(t),
            _ => Err(Error::Format { offset, reason: "trace is missing its header or end line".into() }),
        }
    }
}

/// Re-executes a trace's actions from its initial state and checks every
/// recorded replan state and the final outcome.
pub fn replay(trace: &EpisodeTrace, task: &TaskSpec) -> Result<EpisodeOutcome, Error> {
    if trace.initial != task.initial_state() {
        return Err(Error::Replay(format!("trace starts from a different state than task {}", task.label())));
    }
    let mut roll = Rollout::new(trace.initial.clone());
    let mut replans = trace.replans.iter().peekable();
    for (i, &ai) in trace.actions.iter().enumerate() {
        while let Some(r) = replans.next_if(|r| r.at_step == i) {
            if r.state != roll.state {
                return Err(Error::Replay(format!("state at replan step {i} differs")));
            }
        }
        roll.apply(Action::from_index(ai).ok_or_else(|| Error::Replay(format!("bad action index {ai}")))?);
    }
    if replans.next().is_some() {
        return Err(Error::Replay("replan recorded after the last action".into()));
    }
    let outcome = roll.outcome(task.goal);
    if outcome != trace.outcome {
        return Err(Error::Replay(format!("replayed outcome {outcome:?} differs from recorded {:?}", trace.outcome)));
    }
    Ok(outcome)
}

/// Immutable planning components shared by every episode.
pub struct Planner<'a> {
    cfg: PlannerConfig,
    enc: &'a GroundedEncoder,
    ds: &'a DemoDataset,
    index: ProprioIndex,
    gwm: Option<&'a GwmModel>,
}

impl<'a> Planner<'a> {
    pub fn new(cfg: PlannerConfig, enc: &'a GroundedEncoder, ds: &'a DemoDataset, gwm: Option<&'a GwmModel>) -> Result<Self, Error> {
        cfg.validate()?;
        if cfg.mode == PlanMode::Gwm {
            let m = gwm.ok_or_else(|| Error::Precondition("gwm mode needs a world model".into()))?;
            m.check_encoder(enc)?;
            if m.config().horizon != cfg.horizon || m.config().keyframes != cfg.keyframes {
                return Err(Error::Config(format!(
                    "world model expects c={} K={}, planner uses c={} K={}",
                    m.config().horizon,
                    m.config().keyframes,
                    cfg.horizon,
                    cfg.keyframes
                )));
            }
        }
        let index = ProprioIndex::build(ds, cfg.horizon)?;
        Ok(Self { cfg, enc, ds, index, gwm })
    }

    pub fn config(&self) -> &PlannerConfig {
        &self.cfg
    }

    pub fn propose(&self, at: Proprio) -> Result<Vec<Candidate>, Error> {
        self.index.query(self.ds, at, self.cfg.n)
    }

    /// Future embedding of each candidate under the configured mode.
    fn candidate_embeddings(&self, state: &WorldState, current: &[f64], cands: &[Candidate]) -> Result<Vec<Vec<f64>>, Error> {
        let (enc, k) = (self.enc, self.cfg.keyframes);
        cands
            .iter()
            .map(|c| {
                let frames = match self.cfg.mode {
                    PlanMode::Gt => gt_future(state, &c.chunk, k, enc)?,
                    PlanMode::NoWm => {
                        let mut f = vec![current.to_vec()];
                        f.extend(render_action_tokens(state, &c.chunk, k, enc, self.cfg.proposal_sprite)?);
                        f
                    }
                    PlanMode::Gwm => {
                        let m = self.gwm.expect("checked at construction");
                        let tokens = m.tokenize_actions(state, &c.chunk, enc, self.cfg.proposal_sprite)?;
                        predict_future(m, &PredictionInput { current: current.to_vec(), tokens })?
                    }
                    PlanMode::Random => unreachable!("random mode does not embed"),
                };
                enc.backbone_embed(&frames, None)
            })
            .collect()
    }

    /// One replanning event: propose, embed, score, select.
    pub fn plan_step(&self, state: &WorldState, o0: &Image, instruction: &str, rng: &mut ChaCha8Rng) -> Result<ReplanRecord, Error> {
        let cands = self.propose(state.proprio())?;
        let grasped = state.held.is_some();
        let (score, selected) = if self.cfg.mode == PlanMode::Random {
            (None, rng.random_range(0..cands.len()))
        } else {
            let ot = render(state, self.enc.render_config());
            let current = self.enc.encode_frame(&ot)?;
            let goals = build_goal_embeddings(self.enc, instruction, o0, &ot, self.cfg.prompts)?;
            let z = self.candidate_embeddings(state, &current, &cands)?;
            let (s, i) = score_candidates(&z, &goals, grasped, self.cfg.temperature)?;
            (Some(s), i)
        };
        Ok(ReplanRecord {
            at_step: 0,
            state: state.clone(),
            grasped,
            candidates: cands.iter().map(CandidateRef::from).collect(),
            score,
            selected,
        })
    }

    /// Closed-loop episode until success or the step cap.
    pub fn run_episode(&self, task: &TaskSpec, seed: u64) -> Result<EpisodeTrace, Error> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut roll = Rollout::new(task.initial_state());
        let o0 = render(&roll.state, self.enc.render_config());
        let mut replans = Vec::new();
        let mut done = false;
        while !done && roll.actions.len() < self.cfg.episode_cap {
            let mut rec = self.plan_step(&roll.state, &o0, &task.instruction, &mut rng)?;
            rec.at_step = roll.actions.len();
            let chunk = &rec.candidates[rec.selected].chunk;
            for &ai in &chunk[..self.cfg.replan_interval] {
                roll.apply(Action::from_index(ai).expect("recorded from a valid action"));
                if roll.outcome(task.goal).success == 1 || roll.actions.len() >= self.cfg.episode_cap {
                    done = roll.outcome(task.goal).success == 1;
                    break;
                }
            }
            replans.push(rec);
        }
        Ok(EpisodeTrace {
            task: task.label(),
            mode: self.cfg.mode,
            seed,
            config_hash: self.cfg.hash(),
            encoder_hash: self.enc.hash(),
            gwm_hash: self.gwm.filter(|_| self.cfg.mode == PlanMode::Gwm).map(GwmModel::hash),
            initial: task.initial_state(),
            replans,
            actions: roll.actions.iter().map(|a| a.index()).collect(),
            outcome: roll.outcome(task.goal),
        })
    }
}

/// Convenience wrapper building a one-off [`Planner`].
pub fn run_episode(
    task: &TaskSpec,
    cfg: &PlannerConfig,
    enc: &GroundedEncoder,
    ds: &DemoDataset,
    gwm: Option<&GwmModel>,
    seed: u64,
) -> Result<EpisodeTrace, Error> {
    Planner::new(cfg.clone(), enc, ds, gwm)?.run_episode(task, seed)
}
