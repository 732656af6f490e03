//! Captioned agent-behavior clips for contrastive pretraining.
//!
//! Scenes are drawn over the full vocabulary, including attributes and
//! referring styles the benchmark reserves for its test split, and are
//! independent of any benchmark suite.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::vocab::{
    cube_ref, instruction, mark_ref, pick_prompt, place_prompt, CubeStyle, MarkStyle, Vocabulary, GLYPHS_PER_CATEGORY,
    SYSTEM_PROMPT,
};
use crate::world::{
    expert_policy, keyframe_states, make_scene, render, step, Action, Cell, Goal, Image, RenderConfig, ResetMode, SceneSpec,
    Sprite, WorldState, CUBE_ROW, GRID_H, GRID_W, NUM_CUBES, NUM_MARKS,
};
use crate::Error;

pub(crate) const CUBE_STYLES: [CubeStyle; 4] = [CubeStyle::ColorCube, CubeStyle::FromLeft, CubeStyle::ColoredObject, CubeStyle::FromRight];
pub(crate) const MARK_STYLES: [MarkStyle; 4] = [MarkStyle::WordMark, MarkStyle::Side, MarkStyle::Picture, MarkStyle::Compass];

/// Probability that a clip is drawn with the alternate agent sprite.
const ALT_SPRITE_RATE: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ItemKind {
    /// Caption names a cube; the clip grasps it.
    Pick,
    /// Caption names a mark; the clip carries a held cube onto it.
    Place,
    /// Caption is a full instruction; the clip is the whole expert episode.
    Whole,
}

/// One captioned clip. Frames are rendered on demand.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusItem {
    pub kind: ItemKind,
    /// Items of one group share a scene and differ in target.
    pub group: u32,
    pub caption: String,
    /// State at reset, shown as the first context frame.
    pub reset: WorldState,
    /// State the clip starts from, shown as the second context frame.
    pub start: WorldState,
    pub actions: Vec<Action>,
    pub sprite: Sprite,
}

impl CorpusItem {
    pub fn context(&self, cfg: &RenderConfig) -> Vec<Image> {
        let cfg = cfg.with_sprite(self.sprite);
        vec![render(&self.reset, &cfg), render(&self.start, &cfg)]
    }

    /// Full observations at `k` evenly spaced keyframes of the clip.
    pub fn video(&self, cfg: &RenderConfig, k: usize) -> Result<Vec<Image>, Error> {
        let cfg = cfg.with_sprite(self.sprite);
        Ok(keyframe_states(&self.start, &self.actions, k)?.iter().map(|s| render(s, &cfg)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub seed: u64,
    pub horizon: usize,
    pub items: Vec<CorpusItem>,
}

pub(crate) fn random_scene(vocab: &Vocabulary, rng: &mut ChaCha8Rng) -> SceneSpec {
    let mut colors: Vec<u8> = (0..vocab.colors.len() as u8).collect();
    colors.shuffle(rng);
    let cat = rng.random_range(0..vocab.categories.len());
    let mut glyphs: Vec<u16> = (0..GLYPHS_PER_CATEGORY).map(|w| (cat * GLYPHS_PER_CATEGORY + w) as u16).collect();
    glyphs.shuffle(rng);
    SceneSpec::in_slot_order([colors[0], colors[1], colors[2], colors[3]], [glyphs[0], glyphs[1], glyphs[2]])
}

pub(crate) fn caption(prompt: &str) -> String {
    format!("{SYSTEM_PROMPT} {prompt}")
}

pub(crate) fn chunk_of(plan: &[Action], horizon: usize) -> Vec<Action> {
    let mut c: Vec<Action> = plan.iter().copied().take(horizon).collect();
    c.resize(horizon, Action::NOOP);
    c
}

/// Caption of a clip that sets the held cube down away from every mark.
const RELEASE_PROMPT: &str = "place the grasped object on the table";

/// Walks the held cube to a random free cell off the marks and opens there.
fn release_off_mark(start: &WorldState, horizon: usize, rng: &mut ChaCha8Rng) -> Option<Vec<Action>> {
    let taken = |c: Cell| start.marks.iter().any(|m| m.cell == c) || start.cubes.iter().any(|k| k.cell == c && k.cell != start.agent);
    let mut at = start.agent;
    let to = loop {
        let c = Cell::new(rng.random_range(0..GRID_W), rng.random_range(CUBE_ROW..GRID_H));
        if !taken(c) {
            break c;
        }
    };
    let mut out = Vec::new();
    while at != to {
        let dx = (to.x - at.x).signum() as i8;
        let dy = if dx == 0 { (to.y - at.y).signum() as i8 } else { 0 };
        out.push(Action::moving(dx, dy));
        at = Cell::new(at.x + i32::from(dx), at.y + i32::from(dy));
        if out.len() >= horizon {
            return None;
        }
    }
    out.push(Action::OPEN);
    Some(chunk_of(&out, horizon))
}

pub(crate) fn run(s: &WorldState, actions: &[Action]) -> WorldState {
    actions.iter().fold(s.clone(), |s, a| step(&s, *a))
}

/// `n` captioned clips over the full vocabulary, with `horizon`-step clips
/// for pick and place captions.
pub fn generate_pretraining_corpus(vocab: &Vocabulary, n: usize, horizon: usize, seed: u64) -> Result<Corpus, Error> {
    if n == 0 {
        return Err(Error::Precondition("corpus size must be at least 1".into()));
    }
    if horizon < 2 {
        return Err(Error::Precondition("corpus clips need a horizon of at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(n + NUM_CUBES);
    let mut group = 0u32;
    while items.len() < n {
        let scene = random_scene(vocab, &mut rng);
        let reset = make_scene(&scene, rng.random(), ResetMode::Evaluation)?;
        let sprite = if rng.random_bool(ALT_SPRITE_RATE) { Sprite::Cross } else { Sprite::Ring };
        let colors = scene.colors_by_slot();
        let glyphs = scene.glyphs_by_slot();
        let cube_text = |rng: &mut ChaCha8Rng, i: usize| {
            let style = *CUBE_STYLES.choose(rng).expect("styles exist");
            cube_ref(style, vocab, colors[i], i)
        };
        let mark_text = |rng: &mut ChaCha8Rng, j: usize| {
            let style = *MARK_STYLES.choose(rng).expect("styles exist");
            mark_ref(style, vocab, glyphs[j], j)
        };
        let item = |kind, caption, start: &WorldState, actions| CorpusItem {
            kind,
            group,
            caption,
            reset: reset.clone(),
            start: start.clone(),
            actions,
            sprite,
        };
        match rng.random_range(0..10) {
            0..=3 => {
                // Open gripper somewhere above the cube row; clips that cannot
                // grasp early enough to be visible are skipped.
                let mut start = reset.clone();
                if rng.random_bool(0.5) {
                    start.agent = Cell::new(rng.random_range(0..GRID_W), rng.random_range(0..=CUBE_ROW));
                }
                for i in 0..NUM_CUBES {
                    let plan = expert_policy(&start, Goal { cube: i, mark: rng.random_range(0..NUM_MARKS) })?;
                    let grasp_at = plan.iter().position(|a| *a == Action::CLOSE).expect("expert grasps");
                    if grasp_at + 3 > horizon {
                        continue;
                    }
                    let text = caption(&pick_prompt(&cube_text(&mut rng, i)));
                    items.push(item(ItemKind::Pick, text, &start, chunk_of(&plan, horizon)));
                }
            }
            4..=7 => {
                // Holding cube i somewhere along an expert carry; clips that run
                // past the horizon show partial progress toward their mark.
                let i = rng.random_range(0..NUM_CUBES);
                let plan = expert_policy(&reset, Goal { cube: i, mark: rng.random_range(0..NUM_MARKS) })?;
                let grasp_at = plan.iter().position(|a| *a == Action::CLOSE).expect("expert grasps");
                let carry = plan.len() - grasp_at - 2;
                let start = run(&reset, &plan[..=grasp_at + rng.random_range(0..=carry.min(horizon))]);
                for j in 0..NUM_MARKS {
                    let plan = expert_policy(&start, Goal { cube: i, mark: j })?;
                    let text = caption(&place_prompt(&mark_text(&mut rng, j)));
                    items.push(item(ItemKind::Place, text, &start, chunk_of(&plan, horizon)));
                }
                if let Some(actions) = release_off_mark(&start, horizon, &mut rng) {
                    items.push(item(ItemKind::Place, caption(RELEASE_PROMPT), &start, actions));
                }
            }
            _ => {
                let mut tasks: Vec<(usize, usize)> = (0..NUM_CUBES).flat_map(|i| (0..NUM_MARKS).map(move |j| (i, j))).collect();
                tasks.shuffle(&mut rng);
                for &(i, j) in &tasks[..NUM_CUBES] {
                    let plan = expert_policy(&reset, Goal { cube: i, mark: j })?;
                    let text = caption(&instruction(&cube_text(&mut rng, i), &mark_text(&mut rng, j)));
                    items.push(item(ItemKind::Whole, text, &reset, plan));
                }
            }
        }
        group += 1;
    }
    items.truncate(n);
    Ok(Corpus { seed, horizon, items })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::tokenize;
    use std::collections::BTreeSet;

    #[test]
    fn deterministic_and_covers_the_vocabulary() {
        let v = Vocabulary::standard();
        let a = generate_pretraining_corpus(&v, 8000, 12, 5).unwrap();
        assert_eq!(a, generate_pretraining_corpus(&v, 8000, 12, 5).unwrap());
        assert_eq!(a.items.len(), 8000);
        let words: BTreeSet<String> = a.items.iter().flat_map(|it| tokenize(&it.caption)).collect();
        for c in &v.colors {
            assert!(words.contains(&c.name), "{}", c.name);
        }
        for cat in &v.categories {
            for w in &cat.words {
                assert!(words.contains(w), "{w}");
            }
        }
        assert!(generate_pretraining_corpus(&v, 0, 12, 5).is_err());
    }

    #[test]
    fn clips_show_what_captions_say() {
        let v = Vocabulary::standard();
        let corpus = generate_pretraining_corpus(&v, 400, 12, 9).unwrap();
        for it in &corpus.items {
            let end = run(&it.start, &it.actions);
            match it.kind {
                ItemKind::Pick => {
                    let mut s = it.start.clone();
                    let grasped = it.actions.iter().any(|a| {
                        s = step(&s, *a);
                        s.held.is_some()
                    });
                    assert!(grasped);
                }
                ItemKind::Place if tokenize(&it.caption) == tokenize(&caption(RELEASE_PROMPT)) => {
                    assert!(end.held.is_none());
                    assert!(end.marks.iter().all(|m| m.cell != end.agent));
                }
                ItemKind::Place => {
                    // Either delivered or still carrying toward the mark.
                    assert!(end.held.is_some() || end.marks.iter().any(|m| m.cell == end.agent));
                }
                ItemKind::Whole => {
                    assert!(end.held.is_none());
                    assert!(end.marks.iter().any(|m| m.cell == end.agent));
                }
            }
        }
    }
}
