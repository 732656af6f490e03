//! Exact encoder: decodes rasters back to symbols and emits a fixed
//! compositional code, and grounds prompts by parsing them.

use std::collections::HashMap;

use crate::vocab::{parse_prompt, CubeTarget, MarkTarget, PromptIntent, Vocabulary};
use crate::world::{
    ring_pixels, Cell, Gripper, Image, RenderConfig, WorldState, AGENT_CLOSED, AGENT_OPEN, BACKGROUND, CELL_PX,
    CUBE_COLS, CUBE_ROW, GRID_H, GRID_W, HELD_MARGIN, INK, MARK_COLS, MARK_ROW, NUM_CUBES, NUM_MARKS, BLANK,
};
use crate::Error;

use super::{normalize, EMBED_DIM, FEATURE_DIM};

/// Everything a rendered frame shows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Symbols {
    pub agent: Option<(Cell, Gripper)>,
    pub held_color: Option<u8>,
    /// Resting cubes, sorted by cell.
    pub cubes: Vec<(Cell, u8)>,
    /// Marks, sorted by cell.
    pub marks: Vec<(Cell, u16)>,
}

impl Symbols {
    pub fn of_state(s: &WorldState) -> Self {
        let mut cubes: Vec<(Cell, u8)> =
            (0..NUM_CUBES).filter(|&i| s.held != Some(i)).map(|i| (s.cubes[i].cell, s.cubes[i].color)).collect();
        cubes.sort();
        let mut marks: Vec<(Cell, u16)> = s.marks.iter().map(|m| (m.cell, m.glyph)).collect();
        marks.sort();
        Self { agent: Some((s.agent, s.gripper)), held_color: s.held.map(|h| s.cubes[h].color), cubes, marks }
    }
}

fn ring_code(img: &Image, cell: Cell) -> Option<u32> {
    let mut code = 0;
    for (i, &(r, c)) in ring_pixels().iter().enumerate() {
        match img.cell_pixel(cell, r, c) {
            INK => code |= 1 << i,
            BLANK => {}
            _ => return None,
        }
    }
    Some(code)
}

fn glyph_ring(bits: u64) -> u32 {
    ring_pixels().iter().enumerate().fold(0, |acc, (i, &(r, c))| acc | ((((bits >> (r * 8 + c)) & 1) as u32) << i))
}

/// Inverts [`crate::world::render`] cell by cell.
pub fn decode(img: &Image, cfg: &RenderConfig) -> Result<Symbols, Error> {
    let rings: HashMap<u32, u16> = cfg.glyphs.iter().enumerate().map(|(g, &bits)| (glyph_ring(bits), g as u16)).collect();
    let color_of = |px: [u8; 3]| cfg.palette.iter().position(|&p| p == px).map(|c| c as u8);
    let mut out = Symbols { agent: None, held_color: None, cubes: Vec::new(), marks: Vec::new() };
    for y in 0..GRID_H {
        for x in 0..GRID_W {
            let cell = Cell::new(x, y);
            let corner = img.cell_pixel(cell, 0, 0);
            if corner != BACKGROUND {
                let code = ring_code(img, cell).ok_or_else(|| Error::Precondition(format!("cell {cell:?} has a broken mark border")))?;
                let glyph = rings
                    .get(&code)
                    .ok_or_else(|| Error::Precondition(format!("cell {cell:?} shows an unknown glyph")))?;
                out.marks.push((cell, *glyph));
            }
            let resting = color_of(img.cell_pixel(cell, 1, 1));
            if let Some(c) = resting {
                out.cubes.push((cell, c));
            }
            let mut agent = None;
            let mut inner = None;
            for r in HELD_MARGIN..CELL_PX - HELD_MARGIN {
                for c in HELD_MARGIN..CELL_PX - HELD_MARGIN {
                    match img.cell_pixel(cell, r, c) {
                        AGENT_OPEN => agent = Some(Gripper::Open),
                        AGENT_CLOSED => agent = Some(Gripper::Closed),
                        px => inner = inner.or(color_of(px)),
                    }
                }
            }
            if let Some(g) = agent {
                if out.agent.replace((cell, g)).is_some() {
                    return Err(Error::Precondition("frame shows two agents".into()));
                }
                if g == Gripper::Closed && inner.is_some() && inner != resting {
                    out.held_color = inner;
                }
            }
        }
    }
    out.cubes.sort();
    out.marks.sort();
    Ok(out)
}

// Code layout.
const X0: usize = 0;
const Y0: usize = X0 + GRID_W as usize;
const GRIP: usize = Y0 + GRID_H as usize;
const HELD0: usize = GRIP + 1;
const COLORS: usize = 16;
const SLOT0: usize = HELD0 + COLORS;
const MARK0: usize = SLOT0 + NUM_CUBES;
const OCC0: usize = MARK0 + NUM_MARKS;
const STRAY: usize = OCC0 + NUM_MARKS;
const GLYPH_SCALE: f64 = 256.0;
const _: () = assert!(STRAY < FEATURE_DIM);

/// Fixed compositional code: agent position one-hots, gripper flag, held
/// color one-hot, per-slot cube colors, per-slot mark glyphs, and per-mark
/// resting cube colors.
pub(crate) fn code(sym: &Symbols) -> Vec<f64> {
    let mut f = vec![0.0; FEATURE_DIM];
    if let Some((cell, g)) = sym.agent {
        f[X0 + cell.x as usize] = 1.0;
        f[Y0 + cell.y as usize] = 1.0;
        f[GRIP] = f64::from(u8::from(g == Gripper::Closed));
    }
    if let Some(c) = sym.held_color {
        f[HELD0 + c as usize] = 1.0;
    }
    let mut stray = 0;
    for &(cell, color) in &sym.cubes {
        let v = (color as f64 + 1.0) / COLORS as f64;
        if let Some(k) = (cell.y == CUBE_ROW).then(|| CUBE_COLS.iter().position(|&x| x == cell.x)).flatten() {
            f[SLOT0 + k] = v;
        } else if let Some(j) = (cell.y == MARK_ROW).then(|| MARK_COLS.iter().position(|&x| x == cell.x)).flatten() {
            f[OCC0 + j] = v;
        } else {
            stray += 1;
        }
    }
    f[STRAY] = stray as f64 / NUM_CUBES as f64;
    for &(cell, glyph) in &sym.marks {
        if let Some(j) = (cell.y == MARK_ROW).then(|| MARK_COLS.iter().position(|&x| x == cell.x)).flatten() {
            f[MARK0 + j] = (glyph as f64 + 1.0) / GLYPH_SCALE;
        }
    }
    f
}

fn read_color(v: f64) -> Option<u8> {
    let c = (v * COLORS as f64).round() - 1.0;
    (0.0..COLORS as f64).contains(&c).then_some(c as u8)
}

fn read_glyph(v: f64) -> Option<u16> {
    let g = (v * GLYPH_SCALE).round() - 1.0;
    (g >= 0.0).then_some(g as u16)
}

const PLACE0: usize = COLORS;
const NULL: usize = EMBED_DIM - 1;
const NULL_WEIGHT: f64 = 0.25;
const HEADING_WEIGHT: f64 = 0.5;

/// Joint embedding layout: held/placed cube color block, mark slot block,
/// and a constant component so no embedding is the zero vector.
pub(crate) fn embed(vocab: &Vocabulary, frames: &[Vec<f64>], text: Option<&str>) -> Vec<f64> {
    let mut z = vec![0.0; EMBED_DIM];
    z[NULL] = NULL_WEIGHT;
    match text {
        Some(t) => ground_prompt(vocab, frames.first(), t, &mut z),
        None => describe_video(frames, &mut z),
    }
    normalize(z)
}

fn ground_prompt(vocab: &Vocabulary, layout: Option<&Vec<f64>>, text: &str, z: &mut [f64]) {
    let (cube, mark) = match parse_prompt(vocab, text) {
        Some(PromptIntent::Pick(c)) => (Some(c), None),
        Some(PromptIntent::Place(m)) => (None, Some(m)),
        Some(PromptIntent::Whole(c, m)) => (Some(c), Some(m)),
        None => (None, None),
    };
    let color = match cube {
        Some(CubeTarget::Color(c)) => Some(c),
        Some(CubeTarget::Slot(k)) => layout.and_then(|f| read_color(f[SLOT0 + k])),
        None => None,
    };
    let slot = match mark {
        Some(MarkTarget::Slot(j)) => Some(j),
        Some(MarkTarget::Glyph(g)) => layout.and_then(|f| (0..NUM_MARKS).find(|&j| read_glyph(f[MARK0 + j]) == Some(g))),
        None => None,
    };
    if let Some(c) = color.filter(|&c| (c as usize) < COLORS) {
        z[c as usize] = 1.0;
    }
    if let Some(j) = slot {
        z[PLACE0 + j] = 1.0;
    }
}

fn describe_video(frames: &[Vec<f64>], z: &mut [f64]) {
    let n = frames.len() as f64;
    for f in frames {
        for c in 0..COLORS {
            z[c] += f[HELD0 + c].max(0.0) / n;
        }
        for j in 0..NUM_MARKS {
            if let Some(c) = read_color(f[OCC0 + j]) {
                z[c as usize] += 1.0 / n;
            }
        }
    }
    let Some(last) = frames.last() else { return };
    let mut placed = false;
    for j in 0..NUM_MARKS {
        if read_color(last[OCC0 + j]).is_some() {
            z[PLACE0 + j] = 1.0;
            placed = true;
        }
    }
    let holding: f64 = last[HELD0..HELD0 + COLORS].iter().sum();
    if !placed && holding > 0.5 {
        let x = (0..GRID_W as usize).max_by(|&a, &b| last[X0 + a].total_cmp(&last[X0 + b])).expect("grid has columns") as i32;
        let best = MARK_COLS.iter().map(|c| (c - x).abs()).min().expect("marks exist");
        let near: Vec<usize> = (0..NUM_MARKS).filter(|&j| (MARK_COLS[j] - x).abs() == best).collect();
        for &j in &near {
            z[PLACE0 + j] = HEADING_WEIGHT / near.len() as f64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{make_scene, render, step, Action, ResetMode, SceneSpec, Sprite};
    use rand::{Rng, SeedableRng};

    #[test]
    fn decode_inverts_render_on_random_states() {
        let vocab = Vocabulary::standard();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let actions = Action::all();
        for sprite in [Sprite::Ring, Sprite::Cross] {
            let cfg = vocab.render_config().with_sprite(sprite);
            for trial in 0..200 {
                let mut colors: Vec<u8> = (0..16).collect();
                let mut glyphs: Vec<u16> = (0..144).collect();
                let (c, g) = (rand::seq::SliceRandom::partial_shuffle(&mut colors[..], &mut rng, 4).0.to_vec(), {
                    rand::seq::SliceRandom::partial_shuffle(&mut glyphs[..], &mut rng, 3).0.to_vec()
                });
                let scene = SceneSpec::in_slot_order([c[0], c[1], c[2], c[3]], [g[0], g[1], g[2]]);
                let mut s = make_scene(&scene, trial, ResetMode::DemoCollection).unwrap();
                for _ in 0..rng.random_range(0..40) {
                    s = step(&s, actions[rng.random_range(0..actions.len())]);
                    assert_eq!(decode(&render(&s, &cfg), &cfg).unwrap(), Symbols::of_state(&s));
                }
            }
        }
    }

    #[test]
    fn agent_moves_touch_only_the_position_block() {
        let vocab = Vocabulary::standard();
        let cfg = vocab.render_config();
        let s = make_scene(&SceneSpec::in_slot_order([0, 2, 4, 6], [0, 1, 2]), 0, ResetMode::Evaluation).unwrap();
        let t = step(&s, Action::moving(1, 1));
        let (a, b) = (code(&decode(&render(&s, &cfg), &cfg).unwrap()), code(&decode(&render(&t, &cfg), &cfg).unwrap()));
        for i in 0..FEATURE_DIM {
            if a[i] != b[i] {
                assert!(i < GRIP, "dim {i} changed");
            }
        }
        assert_ne!(a, b);
    }
}
