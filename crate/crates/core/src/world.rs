//! Deterministic gridworld: state, transitions, rasterization, the scripted
//! expert and outcome detection.

use std::fmt;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::Error;

pub const GRID_W: i32 = 12;
pub const GRID_H: i32 = 9;
pub const CELL_PX: usize = 8;
pub const IMG_W: usize = GRID_W as usize * CELL_PX;
pub const IMG_H: usize = GRID_H as usize * CELL_PX;

pub const RETRACT: Cell = Cell { x: 6, y: 2 };
pub const CUBE_ROW: i32 = 3;
pub const CUBE_COLS: [i32; 4] = [3, 5, 7, 9];
pub const MARK_ROW: i32 = 7;
pub const MARK_COLS: [i32; 3] = [2, 6, 10];
/// Row every loaded expert path travels along before turning toward its mark.
pub const TRUNK_ROW: i32 = MARK_ROW - 1;
pub const EPISODE_CAP: usize = 60;
pub const NUM_CUBES: usize = 4;
pub const NUM_MARKS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    pub fn in_bounds(self) -> bool {
        (0..GRID_W).contains(&self.x) && (0..GRID_H).contains(&self.y)
    }

    pub fn dist2(self, other: Cell) -> i32 {
        let (dx, dy) = (self.x - other.x, self.y - other.y);
        dx * dx + dy * dy
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gripper {
    Open,
    Closed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GripperCmd {
    Open,
    Close,
    Hold,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Action {
    pub dx: i8,
    pub dy: i8,
    pub grip: GripperCmd,
}

impl Action {
    pub const NOOP: Action = Action { dx: 0, dy: 0, grip: GripperCmd::Hold };
    pub const CLOSE: Action = Action { dx: 0, dy: 0, grip: GripperCmd::Close };
    pub const OPEN: Action = Action { dx: 0, dy: 0, grip: GripperCmd::Open };

    pub fn moving(dx: i8, dy: i8) -> Self {
        Self { dx, dy, grip: GripperCmd::Hold }
    }

    /// All 27 actions in index order.
    pub fn all() -> Vec<Action> {
        (0..27).map(|i| Self::from_index(i).expect("index below 27")).collect()
    }

    pub fn index(self) -> u8 {
        let g = match self.grip {
            GripperCmd::Open => 0,
            GripperCmd::Close => 1,
            GripperCmd::Hold => 2,
        };
        ((self.dx + 1) as u8) * 9 + ((self.dy + 1) as u8) * 3 + g
    }

    pub fn from_index(i: u8) -> Option<Self> {
        if i >= 27 {
            return None;
        }
        let grip = match i % 3 {
            0 => GripperCmd::Open,
            1 => GripperCmd::Close,
            _ => GripperCmd::Hold,
        };
        Some(Self { dx: (i / 9) as i8 - 1, dy: ((i / 3) % 3) as i8 - 1, grip })
    }

    pub fn is_valid(self) -> bool {
        (-1..=1).contains(&self.dx) && (-1..=1).contains(&self.dy)
    }

    pub fn moves(self) -> bool {
        self.dx != 0 || self.dy != 0
    }

    /// Numeric form used for raw-action conditioning: (dx, dy, gripper) with
    /// open = -1, hold = 0, close = +1.
    pub fn as_numbers(self) -> [f64; 3] {
        let g = match self.grip {
            GripperCmd::Open => -1.0,
            GripperCmd::Hold => 0.0,
            GripperCmd::Close => 1.0,
        };
        [self.dx as f64, self.dy as f64, g]
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let g = match self.grip {
            GripperCmd::Open => "open",
            GripperCmd::Close => "close",
            GripperCmd::Hold => "hold",
        };
        write!(f, "({},{},{g})", self.dx, self.dy)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cube {
    pub cell: Cell,
    pub color: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mark {
    pub cell: Cell,
    pub glyph: u16,
}

/// Agent cell plus gripper flag: the proprioceptive part of the state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Proprio {
    pub cell: Cell,
    pub gripper: Gripper,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WorldState {
    pub agent: Cell,
    pub gripper: Gripper,
    pub held: Option<usize>,
    pub cubes: [Cube; NUM_CUBES],
    pub marks: [Mark; NUM_MARKS],
    pub step_count: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SlotColor {
    pub slot: usize,
    pub color: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SlotGlyph {
    pub slot: usize,
    pub glyph: u16,
}

/// Scene layout: cube `i` sits in `cubes[i].slot`, mark `j` in `marks[j].slot`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub cubes: Vec<SlotColor>,
    pub marks: Vec<SlotGlyph>,
}

impl SceneSpec {
    /// Cube `i` in slot `i`, mark `j` in slot `j`.
    pub fn in_slot_order(colors: [u8; NUM_CUBES], glyphs: [u16; NUM_MARKS]) -> Self {
        Self {
            cubes: colors.iter().enumerate().map(|(slot, &color)| SlotColor { slot, color }).collect(),
            marks: glyphs.iter().enumerate().map(|(slot, &glyph)| SlotGlyph { slot, glyph }).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.cubes.len() != NUM_CUBES || self.marks.len() != NUM_MARKS {
            return Err(Error::Scene(format!(
                "need {NUM_CUBES} cubes and {NUM_MARKS} marks, got {} and {}",
                self.cubes.len(),
                self.marks.len()
            )));
        }
        let mut cube_slots = [false; NUM_CUBES];
        for c in &self.cubes {
            if c.slot >= NUM_CUBES || std::mem::replace(&mut cube_slots[c.slot], true) {
                return Err(Error::Scene(format!("cube slot {} invalid or duplicated", c.slot)));
            }
        }
        let mut mark_slots = [false; NUM_MARKS];
        for m in &self.marks {
            if m.slot >= NUM_MARKS || std::mem::replace(&mut mark_slots[m.slot], true) {
                return Err(Error::Scene(format!("mark slot {} invalid or duplicated", m.slot)));
            }
        }
        Ok(())
    }

    /// Color of the cube in each slot, left to right.
    pub fn colors_by_slot(&self) -> [u8; NUM_CUBES] {
        let mut out = [0; NUM_CUBES];
        for c in &self.cubes {
            out[c.slot] = c.color;
        }
        out
    }

    pub fn glyphs_by_slot(&self) -> [u16; NUM_MARKS] {
        let mut out = [0; NUM_MARKS];
        for m in &self.marks {
            out[m.slot] = m.glyph;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResetMode {
    /// Agent starts exactly at the retract cell.
    Evaluation,
    /// Agent start jittered to the retract cell or one of its 4 neighbors.
    DemoCollection,
}

pub fn make_scene(scene: &SceneSpec, seed: u64, mode: ResetMode) -> Result<WorldState, Error> {
    scene.validate()?;
    let agent = match mode {
        ResetMode::Evaluation => RETRACT,
        ResetMode::DemoCollection => {
            const OFFSETS: [(i32, i32); 5] = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)];
            let (dx, dy) = OFFSETS[ChaCha8Rng::seed_from_u64(seed).random_range(0..OFFSETS.len())];
            Cell::new(RETRACT.x + dx, RETRACT.y + dy)
        }
    };
    let cube = |c: &SlotColor| Cube { cell: Cell::new(CUBE_COLS[c.slot], CUBE_ROW), color: c.color };
    let mark = |m: &SlotGlyph| Mark { cell: Cell::new(MARK_COLS[m.slot], MARK_ROW), glyph: m.glyph };
    Ok(WorldState {
        agent,
        gripper: Gripper::Open,
        held: None,
        cubes: [cube(&scene.cubes[0]), cube(&scene.cubes[1]), cube(&scene.cubes[2]), cube(&scene.cubes[3])],
        marks: [mark(&scene.marks[0]), mark(&scene.marks[1]), mark(&scene.marks[2])],
        step_count: 0,
    })
}

impl WorldState {
    pub fn proprio(&self) -> Proprio {
        Proprio { cell: self.agent, gripper: self.gripper }
    }

    /// Index of a cube resting (not held) at `cell`.
    pub fn resting_cube_at(&self, cell: Cell) -> Option<usize> {
        (0..NUM_CUBES).find(|&i| self.held != Some(i) && self.cubes[i].cell == cell)
    }

    pub fn mark_at(&self, cell: Cell) -> Option<usize> {
        self.marks.iter().position(|m| m.cell == cell)
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        if !self.agent.in_bounds() {
            return Err(format!("agent out of bounds at {:?}", self.agent));
        }
        for (i, c) in self.cubes.iter().enumerate() {
            if !c.cell.in_bounds() {
                return Err(format!("cube {i} out of bounds"));
            }
            if self.held == Some(i) && c.cell != self.agent {
                return Err(format!("held cube {i} not under agent"));
            }
            for (j, d) in self.cubes.iter().enumerate().skip(i + 1) {
                if c.cell == d.cell && self.held != Some(i) && self.held != Some(j) {
                    return Err(format!("cubes {i} and {j} share a cell"));
                }
            }
        }
        for (i, m) in self.marks.iter().enumerate() {
            if m.cell.y != MARK_ROW || self.marks[i + 1..].iter().any(|n| n.cell == m.cell) {
                return Err(format!("mark {i} misplaced"));
            }
        }
        Ok(())
    }
}

/// One transition. Movement happens first, then the gripper command acts at
/// the new cell. Effects that cannot apply are no-ops.
pub fn step(state: &WorldState, action: Action) -> WorldState {
    let mut s = state.clone();
    s.step_count += 1;
    s.agent = Cell::new(
        (s.agent.x + action.dx as i32).clamp(0, GRID_W - 1),
        (s.agent.y + action.dy as i32).clamp(0, GRID_H - 1),
    );
    if let Some(h) = s.held {
        s.cubes[h].cell = s.agent;
    }
    match action.grip {
        GripperCmd::Hold => {}
        GripperCmd::Close => {
            if s.held.is_none() {
                s.held = s.resting_cube_at(s.agent);
            }
            s.gripper = Gripper::Closed;
        }
        GripperCmd::Open => match s.held {
            // Refuse to stack: the whole command is ignored.
            Some(_) if s.resting_cube_at(s.agent).is_some() => {}
            _ => {
                s.held = None;
                s.gripper = Gripper::Open;
            }
        },
    }
    s
}

/// Agent-only kinematics: position clipping and gripper flag, no objects.
pub fn step_kinematics(p: Proprio, action: Action) -> Proprio {
    let cell = Cell::new(
        (p.cell.x + action.dx as i32).clamp(0, GRID_W - 1),
        (p.cell.y + action.dy as i32).clamp(0, GRID_H - 1),
    );
    let gripper = match action.grip {
        GripperCmd::Hold => p.gripper,
        GripperCmd::Close => Gripper::Closed,
        GripperCmd::Open => Gripper::Open,
    };
    Proprio { cell, gripper }
}

/// Post-action step indices (1-based) of `k` evenly spaced keyframes over `c` actions.
pub fn keyframe_indices(c: usize, k: usize) -> Result<Vec<usize>, Error> {
    if k == 0 || k > c {
        return Err(Error::Precondition(format!("keyframes {k} must be in 1..={c}")));
    }
    // round(i*c/k) with halves rounded up
    Ok((1..=k).map(|i| (2 * i * c + k) / (2 * k)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub grasp: u8,
    pub reach: u8,
    pub success: u8,
}

/// Target of one pick-and-place episode, as far as the simulator cares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Goal {
    pub cube: usize,
    pub mark: usize,
}

/// Running record of an episode sufficient to score it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rollout {
    pub state: WorldState,
    pub ever_held: [bool; NUM_CUBES],
    pub last_action: Option<Action>,
    pub actions: Vec<Action>,
}

impl Rollout {
    pub fn new(state: WorldState) -> Self {
        let mut ever_held = [false; NUM_CUBES];
        if let Some(h) = state.held {
            ever_held[h] = true;
        }
        Self { state, ever_held, last_action: None, actions: Vec::new() }
    }

    pub fn apply(&mut self, action: Action) {
        self.state = step(&self.state, action);
        if let Some(h) = self.state.held {
            self.ever_held[h] = true;
        }
        self.last_action = Some(action);
        self.actions.push(action);
    }

    pub fn outcome(&self, goal: Goal) -> EpisodeOutcome {
        outcome(&self.state, &self.ever_held, self.last_action, goal)
    }
}

/// Grasp: target cube held at some step. Reach: agent stopped on the target
/// mark (final action did not move). Success additionally needs the target
/// cube resting on that mark.
pub fn outcome(final_state: &WorldState, ever_held: &[bool; NUM_CUBES], last: Option<Action>, goal: Goal) -> EpisodeOutcome {
    let mark_cell = final_state.marks[goal.mark].cell;
    let grasp = ever_held[goal.cube];
    let reach = final_state.agent == mark_cell && last.is_some_and(|a| !a.moves());
    let deposited = final_state.held != Some(goal.cube) && final_state.cubes[goal.cube].cell == mark_cell;
    let success = grasp && reach && deposited;
    EpisodeOutcome { grasp: grasp as u8, reach: reach as u8, success: success as u8 }
}

fn walk(from: Cell, to: Cell, horizontal_first: bool, out: &mut Vec<Action>) -> Cell {
    let mut at = from;
    let horiz = |at: &mut Cell, out: &mut Vec<Action>| {
        while at.x != to.x {
            let dx = (to.x - at.x).signum() as i8;
            out.push(Action::moving(dx, 0));
            at.x += dx as i32;
        }
    };
    let vert = |at: &mut Cell, out: &mut Vec<Action>| {
        while at.y != to.y {
            let dy = (to.y - at.y).signum() as i8;
            out.push(Action::moving(0, dy));
            at.y += dy as i32;
        }
    };
    if horizontal_first {
        horiz(&mut at, out);
        vert(&mut at, out);
    } else {
        vert(&mut at, out);
        horiz(&mut at, out);
    }
    at
}

/// Scripted expert: Manhattan path to the target cube (horizontal leg first),
/// close, down to the trunk row, across to the mark column, onto the mark, open.
pub fn expert_policy(state: &WorldState, goal: Goal) -> Result<Vec<Action>, Error> {
    if goal.cube >= NUM_CUBES || goal.mark >= NUM_MARKS {
        return Err(Error::Precondition(format!("goal {goal:?} names an absent cube or mark")));
    }
    let mut out = Vec::new();
    let mut at = state.agent;
    if state.held != Some(goal.cube) {
        if state.held.is_some() {
            return Err(Error::Precondition("expert cannot start while holding another cube".into()));
        }
        at = walk(at, state.cubes[goal.cube].cell, true, &mut out);
        out.push(Action::CLOSE);
    }
    let mark = state.marks[goal.mark].cell;
    if at != mark {
        if at.y != TRUNK_ROW && at.x != mark.x {
            at = walk(at, Cell::new(at.x, TRUNK_ROW), false, &mut out);
        }
        walk(at, mark, true, &mut out);
    }
    out.push(Action::OPEN);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Rendering

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sprite {
    /// Hollow square: the embodiment all models train with.
    Ring,
    /// Diagonal cross: the swapped embodiment.
    Cross,
}

impl Sprite {
    /// Pixel mask inside the 4x4 agent box, row-major.
    pub fn mask(self) -> [bool; 16] {
        let mut m = [false; 16];
        for r in 0..4 {
            for c in 0..4 {
                m[r * 4 + c] = match self {
                    Sprite::Ring => r == 0 || r == 3 || c == 0 || c == 3,
                    Sprite::Cross => r == c || r + c == 3,
                };
            }
        }
        m
    }
}

pub const BACKGROUND: [u8; 3] = [28, 28, 32];
pub const BLANK: [u8; 3] = [236, 236, 228];
pub const INK: [u8; 3] = [12, 12, 12];
pub const AGENT_OPEN: [u8; 3] = [160, 160, 160];
pub const AGENT_CLOSED: [u8; 3] = [96, 96, 96];

/// Pixel margins of the nested squares drawn inside a cell.
pub const RESTING_MARGIN: usize = 1;
pub const HELD_MARGIN: usize = 2;

/// 16 saturated hues, 22.5 degrees apart.
pub fn standard_palette() -> Vec<[u8; 3]> {
    (0..16)
        .map(|i| {
            let h = i as f64 * 22.5;
            let (s, v) = (0.85, 0.92);
            let c = v * s;
            let hp = h / 60.0;
            let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
            let (r, g, b) = match hp as u32 {
                0 => (c, x, 0.0),
                1 => (x, c, 0.0),
                2 => (0.0, c, x),
                3 => (0.0, x, c),
                4 => (x, 0.0, c),
                _ => (c, 0.0, x),
            };
            let m = v - c;
            let q = |u: f64| ((u + m) * 255.0).round() as u8;
            [q(r), q(g), q(b)]
        })
        .collect()
}

const RING: [(usize, usize); 28] = {
    let mut out = [(0, 0); 28];
    let mut n = 0;
    let mut r = 0;
    while r < 8 {
        let mut c = 0;
        while c < 8 {
            if r == 0 || r == 7 || c == 0 || c == 7 {
                out[n] = (r, c);
                n += 1;
            }
            c += 1;
        }
        r += 1;
    }
    out
};

/// Border pixels of a cell, the part of a glyph a resting cube leaves visible.
pub fn ring_pixels() -> &'static [(usize, usize); 28] {
    &RING
}

fn ring_code(bits: u64) -> u32 {
    RING.iter().enumerate().fold(0, |acc, (i, &(r, c))| acc | ((((bits >> (r * 8 + c)) & 1) as u32) << i))
}

/// `n` deterministic 8x8 glyph bitmaps with pairwise-distinct border rings.
///
/// Each ring has between 10 and 18 ink pixels so glyphs never look like
/// blank cell, and rings differ from each other in at least 4 pixels.
pub fn standard_glyphs(n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x61_7a_67_6c);
    let mut out: Vec<u64> = Vec::with_capacity(n);
    while out.len() < n {
        let bits: u64 = rng.random();
        let ring = ring_code(bits);
        let ink = ring.count_ones();
        if !(10..=18).contains(&ink) || bits.count_ones() < 20 || bits.count_ones() > 44 {
            continue;
        }
        if out.iter().any(|&g| (ring_code(g) ^ ring).count_ones() < 4) {
            continue;
        }
        out.push(bits);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RenderConfig {
    pub cell_px: usize,
    pub palette: Vec<[u8; 3]>,
    pub glyphs: Vec<u64>,
    pub sprite: Sprite,
}

impl RenderConfig {
    pub fn standard(glyph_count: usize) -> Self {
        Self { cell_px: CELL_PX, palette: standard_palette(), glyphs: standard_glyphs(glyph_count), sprite: Sprite::Ring }
    }

    pub fn with_sprite(&self, sprite: Sprite) -> Self {
        Self { sprite, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.cell_px != CELL_PX {
            return Err(Error::Precondition(format!("cell size {} unsupported", self.cell_px)));
        }
        let reserved = [BACKGROUND, BLANK, INK, AGENT_OPEN, AGENT_CLOSED];
        for (i, c) in self.palette.iter().enumerate() {
            if reserved.contains(c) || self.palette[..i].contains(c) {
                return Err(Error::Precondition(format!("palette entry {i} is not distinct")));
            }
        }
        for (i, g) in self.glyphs.iter().enumerate() {
            if self.glyphs[..i].iter().any(|h| ring_code(*h) == ring_code(*g)) {
                return Err(Error::Precondition(format!("glyph {i} ring is not distinct")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl fmt::Debug for Image {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Image({}x{})", self.width, self.height)
    }
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Pixel at offset (`r`, `c`) inside grid cell `cell`.
    pub fn cell_pixel(&self, cell: Cell, r: usize, c: usize) -> [u8; 3] {
        self.pixel(cell.x as usize * CELL_PX + c, cell.y as usize * CELL_PX + r)
    }

    fn fill_box(&mut self, cell: Cell, margin: usize, rgb: [u8; 3]) {
        for r in margin..CELL_PX - margin {
            for c in margin..CELL_PX - margin {
                self.set(cell.x as usize * CELL_PX + c, cell.y as usize * CELL_PX + r, rgb);
            }
        }
    }

    pub fn write_ppm(&self, out: &mut impl Write) -> std::io::Result<()> {
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        out.write_all(&self.data)
    }

    pub fn read_ppm(input: &mut impl BufRead) -> Result<Self, Error> {
        let mut header = Vec::new();
        let mut fields = Vec::new();
        while fields.len() < 4 {
            header.clear();
            if input.read_until(b'\n', &mut header)? == 0 {
                return Err(Error::Format { offset: 0, reason: "truncated PPM header".into() });
            }
            let line = String::from_utf8_lossy(&header);
            let line = line.split('#').next().unwrap_or("");
            fields.extend(line.split_whitespace().map(str::to_string));
        }
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(Error::Format { offset: 0, reason: "not an 8-bit P6 image".into() });
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format { offset: 0, reason: format!("bad dimension {s}") });
        let (width, height) = (parse(&fields[1])?, parse(&fields[2])?);
        let mut data = vec![0; width * height * 3];
        input.read_exact(&mut data)?;
        Ok(Self { width, height, data })
    }
}

fn draw_agent(img: &mut Image, p: Proprio, sprite: Sprite) {
    let color = match p.gripper {
        Gripper::Open => AGENT_OPEN,
        Gripper::Closed => AGENT_CLOSED,
    };
    for (i, on) in sprite.mask().iter().enumerate() {
        if *on {
            let (r, c) = (HELD_MARGIN + i / 4, HELD_MARGIN + i % 4);
            img.set(p.cell.x as usize * CELL_PX + c, p.cell.y as usize * CELL_PX + r, color);
        }
    }
}

/// Full observation. Layers per cell: mark glyph, resting cube (inner 6x6),
/// held cube (inner 4x4), agent sprite.
pub fn render(state: &WorldState, cfg: &RenderConfig) -> Image {
    let mut img = Image::filled(IMG_W, IMG_H, BACKGROUND);
    for m in &state.marks {
        let bits = cfg.glyphs[m.glyph as usize];
        for r in 0..CELL_PX {
            for c in 0..CELL_PX {
                let ink = (bits >> (r * 8 + c)) & 1 == 1;
                img.set(m.cell.x as usize * CELL_PX + c, m.cell.y as usize * CELL_PX + r, if ink { INK } else { BLANK });
            }
        }
    }
    for (i, cube) in state.cubes.iter().enumerate() {
        if state.held != Some(i) {
            img.fill_box(cube.cell, RESTING_MARGIN, cfg.palette[cube.color as usize]);
        }
    }
    if let Some(h) = state.held {
        img.fill_box(state.agent, HELD_MARGIN, cfg.palette[state.cubes[h].color as usize]);
    }
    draw_agent(&mut img, state.proprio(), cfg.sprite);
    img
}

/// Agent-only render of one kinematic pose.
pub fn render_agent(p: Proprio, cfg: &RenderConfig) -> Image {
    let mut img = Image::filled(IMG_W, IMG_H, BACKGROUND);
    draw_agent(&mut img, p, cfg.sprite);
    img
}

/// Renders the agent alone at `k` keyframes of `chunk`, ignoring every object.
pub fn render_agent_frames(state: &WorldState, chunk: &[Action], k: usize, cfg: &RenderConfig) -> Result<Vec<Image>, Error> {
    Ok(agent_keyframe_poses(state.proprio(), chunk, k)?.into_iter().map(|p| render_agent(p, cfg)).collect())
}

pub fn agent_keyframe_poses(start: Proprio, chunk: &[Action], k: usize) -> Result<Vec<Proprio>, Error> {
    let idx = keyframe_indices(chunk.len(), k)?;
    let mut p = start;
    let mut poses = Vec::with_capacity(chunk.len());
    for a in chunk {
        p = step_kinematics(p, *a);
        poses.push(p);
    }
    Ok(idx.iter().map(|&i| poses[i - 1]).collect())
}

/// True simulator states at the keyframes of `chunk`.
pub fn keyframe_states(state: &WorldState, chunk: &[Action], k: usize) -> Result<Vec<WorldState>, Error> {
    let idx = keyframe_indices(chunk.len(), k)?;
    let mut s = state.clone();
    let mut states = Vec::with_capacity(chunk.len());
    for a in chunk {
        s = step(&s, *a);
        states.push(s.clone());
    }
    Ok(idx.iter().map(|&i| states[i - 1].clone()).collect())
}
