//! Caption-to-clip retrieval on fresh scenes, the quality gate for an encoder.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::vocab::{cube_ref, instruction, mark_ref, pick_prompt, place_prompt};
use crate::world::{expert_policy, keyframe_states, make_scene, render, Action, Goal, ResetMode, NUM_CUBES, NUM_MARKS};
use crate::Error;

use super::corpus::{caption, chunk_of, random_scene, run, CUBE_STYLES, MARK_STYLES};
use super::{cosine, GroundedEncoder};

/// Retrieval accuracy below which a learned encoder is not used for planning.
pub const RETRIEVAL_GATE: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct RetrievalReport {
    pub scenes: usize,
    /// Full instruction to whole-episode clip, 12-way within a scene.
    pub whole_top1: f64,
    /// Pick prompt to chunk clip, 4-way.
    pub pick_top1: f64,
    /// Place prompt to chunk clip, 3-way.
    pub place_top1: f64,
    /// Mean cosine of matched instruction/clip pairs.
    pub matched_cos: f64,
    /// Mean cosine of mismatched pairs within a scene.
    pub mismatched_cos: f64,
}

impl RetrievalReport {
    pub fn passes_gate(&self) -> bool {
        self.whole_top1 >= RETRIEVAL_GATE
    }
}

/// Counts queries whose best-scoring clip is their own; returns (hits, matched cos sum, mismatched cos sum, mismatched count).
fn score(queries: &[Vec<f64>], clips: &[Vec<f64>]) -> Result<(usize, f64, f64, usize), Error> {
    let mut hits = 0;
    let (mut matched, mut mismatched, mut n_mis) = (0.0, 0.0, 0);
    for (i, q) in queries.iter().enumerate() {
        let sims = clips.iter().map(|c| cosine(q, c)).collect::<Result<Vec<_>, _>>()?;
        let best = (0..sims.len()).fold(0, |b, j| if sims[j] > sims[b] { j } else { b });
        hits += usize::from(best == i);
        for (j, s) in sims.iter().enumerate() {
            if j == i {
                matched += s;
            } else {
                mismatched += s;
                n_mis += 1;
            }
        }
    }
    Ok((hits, matched, mismatched, n_mis))
}

/// Evaluates `enc` on `scenes` fresh scenes drawn over the full vocabulary.
pub fn retrieval_eval(enc: &GroundedEncoder, scenes: usize, horizon: usize, k: usize, seed: u64) -> Result<RetrievalReport, Error> {
    if scenes == 0 {
        return Err(Error::Precondition("retrieval needs at least one scene".into()));
    }
    let vocab = enc.vocab();
    let cfg = enc.render_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clip = |start: &crate::world::WorldState, actions: &[Action]| -> Result<Vec<f64>, Error> {
        let frames: Vec<_> = keyframe_states(start, actions, k)?.iter().map(|s| render(s, cfg)).collect();
        enc.backbone_embed(&enc.encode_frames(&frames)?, None)
    };
    let (mut whole, mut pick, mut place) = (0, 0, 0);
    let (mut matched, mut mismatched, mut n_matched, mut n_mis) = (0.0, 0.0, 0, 0);
    for _ in 0..scenes {
        let scene = random_scene(vocab, &mut rng);
        let reset = make_scene(&scene, rng.random(), ResetMode::Evaluation)?;
        let colors = scene.colors_by_slot();
        let glyphs = scene.glyphs_by_slot();
        let o0 = render(&reset, cfg);
        let cube_text = |rng: &mut ChaCha8Rng, i: usize| cube_ref(*CUBE_STYLES.choose(rng).expect("styles"), vocab, colors[i], i);
        let mark_text = |rng: &mut ChaCha8Rng, j: usize| mark_ref(*MARK_STYLES.choose(rng).expect("styles"), vocab, glyphs[j], j);

        let (mut qs, mut cs) = (Vec::new(), Vec::new());
        for i in 0..NUM_CUBES {
            for j in 0..NUM_MARKS {
                let plan = expert_policy(&reset, Goal { cube: i, mark: j })?;
                cs.push(clip(&reset, &plan)?);
                let text = caption(&instruction(&cube_text(&mut rng, i), &mark_text(&mut rng, j)));
                qs.push(enc.encode_instruction(&text, &[o0.clone(), o0.clone()])?);
            }
        }
        let (h, m, mm, nm) = score(&qs, &cs)?;
        whole += h;
        matched += m;
        mismatched += mm;
        n_matched += qs.len();
        n_mis += nm;

        let (mut qs, mut cs) = (Vec::new(), Vec::new());
        for i in 0..NUM_CUBES {
            let plan = expert_policy(&reset, Goal { cube: i, mark: rng.random_range(0..NUM_MARKS) })?;
            cs.push(clip(&reset, &chunk_of(&plan, horizon))?);
            let text = caption(&pick_prompt(&cube_text(&mut rng, i)));
            qs.push(enc.encode_instruction(&text, &[o0.clone(), o0.clone()])?);
        }
        pick += score(&qs, &cs)?.0;

        let i = rng.random_range(0..NUM_CUBES);
        let plan = expert_policy(&reset, Goal { cube: i, mark: 0 })?;
        let grasp_at = plan.iter().position(|a| *a == Action::CLOSE).expect("expert grasps");
        let start = run(&reset, &plan[..=grasp_at]);
        let ot = render(&start, cfg);
        let (mut qs, mut cs) = (Vec::new(), Vec::new());
        for j in 0..NUM_MARKS {
            let plan = expert_policy(&start, Goal { cube: i, mark: j })?;
            cs.push(clip(&start, &chunk_of(&plan, horizon))?);
            let text = caption(&place_prompt(&mark_text(&mut rng, j)));
            qs.push(enc.encode_instruction(&text, &[o0.clone(), ot.clone()])?);
        }
        place += score(&qs, &cs)?.0;
    }
    let n = scenes as f64;
    Ok(RetrievalReport {
        scenes,
        whole_top1: whole as f64 / (n * (NUM_CUBES * NUM_MARKS) as f64),
        pick_top1: pick as f64 / (n * NUM_CUBES as f64),
        place_top1: place as f64 / (n * NUM_MARKS as f64),
        matched_cos: matched / n_matched as f64,
        mismatched_cos: mismatched / n_mis.max(1) as f64,
    })
}
