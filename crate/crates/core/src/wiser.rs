//! Benchmark construction: categories, paired train/test scenes, the 12
//! tasks per scene, split validation and demonstration collection.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::vocab::{cube_ref, instruction, mark_ref, CubeStyle, MarkStyle, Split, Vocabulary, GLYPHS_PER_SPLIT};
use crate::world::{
    expert_policy, make_scene, Action, Goal, Proprio, ResetMode, Rollout, SceneSpec, SlotColor, SlotGlyph, WorldState,
    NUM_CUBES, NUM_MARKS,
};
use crate::Error;

pub const TASKS_PER_SCENE: usize = NUM_CUBES * NUM_MARKS;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub categories: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { categories: 24 }
    }
}

impl BenchConfig {
    /// Reads `key=value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, Error> {
        let mut cfg = Self::default();
        for (key, value) in crate::parse_key_values(text)? {
            match key.as_str() {
                "categories" => {
                    cfg.categories = value.parse().map_err(|_| Error::Config(format!("categories: bad value {value:?}")))?
                }
                other => return Err(Error::Config(format!("unknown bench key {other:?}"))),
            }
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    /// Index within the split's suite: category * 12 + cube slot * 3 + mark slot.
    pub id: u32,
    pub split: Split,
    pub category: usize,
    pub scene: SceneSpec,
    pub goal: Goal,
    pub cube_style: CubeStyle,
    pub mark_style: MarkStyle,
    pub cube_ref: String,
    pub mark_ref: String,
    pub instruction: String,
}

impl TaskSpec {
    pub fn label(&self) -> String {
        format!("{}-{:03}", self.split.name(), self.id)
    }

    pub fn cube_slot(&self) -> usize {
        self.scene.cubes[self.goal.cube].slot
    }

    pub fn mark_slot(&self) -> usize {
        self.scene.marks[self.goal.mark].slot
    }

    pub fn initial_state(&self) -> WorldState {
        make_scene(&self.scene, 0, ResetMode::Evaluation).expect("suite scenes are valid")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSuite {
    pub split: Split,
    pub seed: u64,
    pub category_names: Vec<String>,
    pub scenes: Vec<SceneSpec>,
    pub tasks: Vec<TaskSpec>,
}

impl TaskSuite {
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("suite serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }

    pub fn task(&self, id: u32) -> Option<&TaskSpec> {
        self.tasks.get(id as usize)
    }
}

/// Builds category-aligned train and test suites.
///
/// Within a category both splits share the slot permutation of cubes and
/// marks, so the 12 required motions coincide; colors, glyphs and referring
/// styles come from disjoint pools.
pub fn generate_suite(cfg: &BenchConfig, vocab: &Vocabulary, seed: u64) -> Result<(TaskSuite, TaskSuite), Error> {
    let have = vocab.categories.len();
    if cfg.categories > have {
        return Err(Error::Vocab(format!(
            "{} categories requested but the vocabulary has {have}; short by {} glyph words",
            cfg.categories,
            (cfg.categories - have) * 2 * GLYPHS_PER_SPLIT
        )));
    }
    if cfg.categories == 0 {
        return Err(Error::Config("at least one category is required".into()));
    }
    for split in [Split::Train, Split::Test] {
        let n = vocab.colors_for(split).len();
        if n < NUM_CUBES {
            return Err(Error::Vocab(format!("{} split has {n} colors, short by {}", split.name(), NUM_CUBES - n)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut suites = [Split::Train, Split::Test].map(|split| TaskSuite {
        split,
        seed,
        category_names: Vec::new(),
        scenes: Vec::new(),
        tasks: Vec::new(),
    });
    for cat in 0..cfg.categories {
        let mut cube_perm: Vec<usize> = (0..NUM_CUBES).collect();
        cube_perm.shuffle(&mut rng);
        let mut mark_perm: Vec<usize> = (0..NUM_MARKS).collect();
        mark_perm.shuffle(&mut rng);
        for suite in suites.iter_mut() {
            let split = suite.split;
            let mut pool = vocab.colors_for(split);
            pool.shuffle(&mut rng);
            let glyphs = vocab.glyphs_for(cat, split);
            let scene = SceneSpec {
                cubes: (0..NUM_CUBES).map(|i| SlotColor { slot: cube_perm[i], color: pool[i] }).collect(),
                marks: (0..NUM_MARKS).map(|j| SlotGlyph { slot: mark_perm[j], glyph: glyphs[j] }).collect(),
            };
            let cube_styles = CubeStyle::for_split(split);
            let mark_styles = MarkStyle::for_split(split);
            let mut scene_tasks = Vec::with_capacity(TASKS_PER_SCENE);
            for cube_slot in 0..NUM_CUBES {
                for mark_slot in 0..NUM_MARKS {
                    let cube = scene.cubes.iter().position(|c| c.slot == cube_slot).expect("slot filled");
                    let mark = scene.marks.iter().position(|m| m.slot == mark_slot).expect("slot filled");
                    let cube_style = cube_styles[rng.random_range(0..2)];
                    let mark_style = mark_styles[rng.random_range(0..2)];
                    let x = cube_ref(cube_style, vocab, scene.cubes[cube].color, cube_slot);
                    let y = mark_ref(mark_style, vocab, scene.marks[mark].glyph, mark_slot);
                    scene_tasks.push(TaskSpec {
                        id: (cat * TASKS_PER_SCENE + cube_slot * NUM_MARKS + mark_slot) as u32,
                        split,
                        category: cat,
                        scene: scene.clone(),
                        goal: Goal { cube, mark },
                        cube_style,
                        mark_style,
                        instruction: instruction(&x, &y),
                        cube_ref: x,
                        mark_ref: y,
                    });
                }
            }
            suite.category_names.push(vocab.categories[cat].name.clone());
            suite.scenes.push(scene);
            suite.tasks.extend(scene_tasks);
        }
    }
    let [train, test] = suites;
    Ok((train, test))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: usize,
    pub failures: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn check(&mut self, ok: bool, msg: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            self.failures.push(msg());
        }
    }
}

fn styles_of(tasks: &[&TaskSpec]) -> (BTreeSet<CubeStyle>, BTreeSet<MarkStyle>) {
    (tasks.iter().map(|t| t.cube_style).collect(), tasks.iter().map(|t| t.mark_style).collect())
}

/// Disjointness of attributes and styles plus per-category motion equality.
pub fn validate_split(train: &TaskSuite, test: &TaskSuite) -> ValidationReport {
    let mut r = ValidationReport::default();
    r.check(train.split == Split::Train && test.split == Split::Test, || "suites have the wrong split labels".into());
    r.check(train.scenes.len() == test.scenes.len(), || {
        format!("category count differs: {} vs {}", train.scenes.len(), test.scenes.len())
    });
    let colors = |s: &TaskSuite| -> BTreeSet<u8> { s.scenes.iter().flat_map(|sc| sc.cubes.iter().map(|c| c.color)).collect() };
    let glyphs = |s: &TaskSuite| -> BTreeSet<u16> { s.scenes.iter().flat_map(|sc| sc.marks.iter().map(|m| m.glyph)).collect() };
    let shared_colors: Vec<_> = colors(train).intersection(&colors(test)).copied().collect();
    r.check(shared_colors.is_empty(), || format!("colors used in both splits: {shared_colors:?}"));
    let shared_glyphs: Vec<_> = glyphs(train).intersection(&glyphs(test)).copied().collect();
    r.check(shared_glyphs.is_empty(), || format!("glyphs used in both splits: {shared_glyphs:?}"));
    let all_train: Vec<&TaskSpec> = train.tasks.iter().collect();
    let all_test: Vec<&TaskSpec> = test.tasks.iter().collect();
    let (tc, tm) = styles_of(&all_train);
    let (sc, sm) = styles_of(&all_test);
    r.check(tc.is_disjoint(&sc), || format!("cube referring styles shared: {:?}", tc.intersection(&sc).collect::<Vec<_>>()));
    r.check(tm.is_disjoint(&sm), || format!("mark referring styles shared: {:?}", tm.intersection(&sm).collect::<Vec<_>>()));
    for suite in [train, test] {
        r.check(suite.tasks.len() == suite.scenes.len() * TASKS_PER_SCENE, || {
            format!("{} suite has {} tasks for {} scenes", suite.split.name(), suite.tasks.len(), suite.scenes.len())
        });
        for t in &suite.tasks {
            r.check(t.scene.validate().is_ok(), || format!("{} has an invalid scene", t.label()));
        }
    }
    for cat in 0..train.scenes.len().min(test.scenes.len()) {
        let motions = |s: &TaskSuite| -> BTreeSet<(usize, usize)> {
            s.tasks.iter().filter(|t| t.category == cat).map(|t| (t.cube_slot(), t.mark_slot())).collect()
        };
        let (a, b) = (motions(train), motions(test));
        r.check(a == b && a.len() == TASKS_PER_SCENE, || format!("category {cat}: motion sets differ"));
        // Same slot geometry: each (cube slot, mark slot) task sits at the same
        // suite position in both splits, with cubes and marks in the same slots.
        let geometry = |s: &TaskSuite| -> Vec<(usize, usize)> {
            s.tasks.iter().filter(|t| t.category == cat).map(|t| (t.cube_slot(), t.mark_slot())).collect()
        };
        r.check(geometry(train) == geometry(test), || format!("category {cat}: task geometry differs"));
        let slot_layout = |s: &TaskSuite| -> Option<(Vec<usize>, Vec<usize>)> {
            s.scenes.get(cat).map(|sc| (sc.cubes.iter().map(|c| c.slot).collect(), sc.marks.iter().map(|m| m.slot).collect()))
        };
        r.check(slot_layout(train) == slot_layout(test), || format!("category {cat}: slot permutation differs"));
    }
    r
}

/// One recorded expert demonstration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub id: u32,
    pub task: u32,
    pub category: u32,
    pub instruction: String,
    pub scene: SceneSpec,
    /// Proprio before each action, plus the final one: `actions.len() + 1` entries.
    pub proprio: Vec<Proprio>,
    pub actions: Vec<Action>,
    /// Whether PPM frames were written next to the record.
    pub frames: bool,
}

impl TrajectoryRecord {
    pub fn initial_state(&self) -> WorldState {
        let mut s = make_scene(&self.scene, 0, ResetMode::Evaluation).expect("recorded scene is valid");
        s.agent = self.proprio[0].cell;
        s.gripper = self.proprio[0].gripper;
        s
    }

    /// World states before each action plus the final state.
    pub fn states(&self) -> Vec<WorldState> {
        let mut s = self.initial_state();
        let mut out = Vec::with_capacity(self.actions.len() + 1);
        out.push(s.clone());
        for a in &self.actions {
            s = crate::world::step(&s, *a);
            out.push(s.clone());
        }
        out
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// `c` actions starting at `step`, padded with no-ops past the end.
    pub fn chunk(&self, step: usize, c: usize) -> Vec<Action> {
        (step..step + c).map(|i| self.actions.get(i).copied().unwrap_or(Action::NOOP)).collect()
    }

    pub fn frame_path(&self, step: usize) -> String {
        format!("frames/t{:05}_{step:03}.ppm", self.id)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoDataset {
    pub suite_hash: String,
    pub seed: u64,
    pub per_task: usize,
    pub trajectories: Vec<TrajectoryRecord>,
}

impl DemoDataset {
    pub fn transitions(&self) -> usize {
        self.trajectories.iter().map(TrajectoryRecord::len).sum()
    }

    /// Replays every trajectory and checks it reaches success and matches its proprio record.
    pub fn verify(&self, suite: &TaskSuite) -> Result<(), Error> {
        for t in &self.trajectories {
            let task = suite
                .task(t.task)
                .ok_or_else(|| Error::Precondition(format!("trajectory {} names unknown task {}", t.id, t.task)))?;
            let mut r = Rollout::new(t.initial_state());
            for (i, a) in t.actions.iter().enumerate() {
                if r.state.proprio() != t.proprio[i] {
                    return Err(Error::Replay(format!("trajectory {} diverges at step {i}", t.id)));
                }
                r.apply(*a);
            }
            if r.outcome(task.goal).success != 1 {
                return Err(Error::Replay(format!("trajectory {} does not succeed", t.id)));
            }
        }
        Ok(())
    }
}

/// Expert rollouts from jittered starts for every task in `suite`.
pub fn collect_demos(suite: &TaskSuite, per_task: usize, seed: u64) -> Result<DemoDataset, Error> {
    let ids: Vec<u32> = suite.tasks.iter().map(|t| t.id).collect();
    collect_demos_for(suite, &ids, per_task, seed)
}

/// Expert rollouts for the listed tasks only.
pub fn collect_demos_for(suite: &TaskSuite, task_ids: &[u32], per_task: usize, seed: u64) -> Result<DemoDataset, Error> {
    if per_task == 0 {
        return Err(Error::Precondition("per_task must be at least 1".into()));
    }
    let mut trajectories = Vec::with_capacity(task_ids.len() * per_task);
    for &id in task_ids {
        let task = suite.task(id).ok_or_else(|| Error::Precondition(format!("unknown task {id}")))?;
        for rep in 0..per_task {
            let episode_seed = seed ^ ((id as u64) << 20) ^ (rep as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let s0 = make_scene(&task.scene, episode_seed, ResetMode::DemoCollection)?;
            let actions = expert_policy(&s0, task.goal)?;
            let mut r = Rollout::new(s0);
            let mut proprio = vec![r.state.proprio()];
            for a in &actions {
                r.apply(*a);
                proprio.push(r.state.proprio());
            }
            if r.outcome(task.goal).success != 1 {
                return Err(Error::Replay(format!("expert failed on task {}", task.label())));
            }
            trajectories.push(TrajectoryRecord {
                id: trajectories.len() as u32,
                task: id,
                category: task.category as u32,
                instruction: task.instruction.clone(),
                scene: task.scene.clone(),
                proprio,
                actions,
                frames: false,
            });
        }
    }
    Ok(DemoDataset { suite_hash: suite.hash(), seed, per_task, trajectories })
}

/// Task ids of the first half of the categories: the single-demo ablation set.
pub fn half_task_ids(suite: &TaskSuite) -> Vec<u32> {
    let half = suite.scenes.len() / 2;
    suite.tasks.iter().filter(|t| t.category < half).map(|t| t.id).collect()
}
