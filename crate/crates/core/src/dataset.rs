//! On-disk demonstration datasets.
//!
//! A dataset directory holds `manifest.jsonl` (one header line, then one line
//! per trajectory), a binary record per trajectory under `traj/`, and
//! optionally PPM frames under `frames/`.
//!
//! Trajectory record layout, little-endian:
//!
//! ```text
//! magic "GWMTRJ1\0"
//! u32 id, u32 task, u32 category, u8 frames flag
//! u32 instruction length, instruction bytes (UTF-8)
//! 4 x (u8 slot, u8 color), 3 x (u8 slot, u16 glyph)
//! u32 transition count n
//! n x (u8 x, u8 y, u8 gripper, u8 action index, u16 step, u16 zero)
//! final proprio: u8 x, u8 y, u8 gripper, u8 zero
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::wiser::{DemoDataset, TrajectoryRecord};
use crate::world::{render, Action, Cell, Gripper, Proprio, RenderConfig, SceneSpec, SlotColor, SlotGlyph, NUM_CUBES, NUM_MARKS};
use crate::Error;

const TRAJ_MAGIC: &[u8; 8] = b"GWMTRJ1\0";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestHeader {
    format: String,
    suite_hash: String,
    seed: u64,
    per_task: usize,
    trajectories: usize,
    transitions: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: u32,
    task: u32,
    file: String,
}

fn traj_file(id: u32) -> String {
    format!("traj/t{id:05}.bin")
}

fn gripper_byte(g: Gripper) -> u8 {
    match g {
        Gripper::Open => 0,
        Gripper::Closed => 1,
    }
}

pub fn encode_trajectory(t: &TrajectoryRecord) -> Vec<u8> {
    let mut b = Vec::with_capacity(64 + t.instruction.len() + 8 * t.actions.len());
    b.extend_from_slice(TRAJ_MAGIC);
    b.extend_from_slice(&t.id.to_le_bytes());
    b.extend_from_slice(&t.task.to_le_bytes());
    b.extend_from_slice(&t.category.to_le_bytes());
    b.push(u8::from(t.frames));
    b.extend_from_slice(&(t.instruction.len() as u32).to_le_bytes());
    b.extend_from_slice(t.instruction.as_bytes());
    for c in &t.scene.cubes {
        b.push(c.slot as u8);
        b.push(c.color);
    }
    for m in &t.scene.marks {
        b.push(m.slot as u8);
        b.extend_from_slice(&m.glyph.to_le_bytes());
    }
    b.extend_from_slice(&(t.actions.len() as u32).to_le_bytes());
    for (i, a) in t.actions.iter().enumerate() {
        let p = t.proprio[i];
        b.extend_from_slice(&[p.cell.x as u8, p.cell.y as u8, gripper_byte(p.gripper), a.index()]);
        b.extend_from_slice(&(i as u16).to_le_bytes());
        b.extend_from_slice(&[0, 0]);
    }
    let last = t.proprio[t.actions.len()];
    b.extend_from_slice(&[last.cell.x as u8, last.cell.y as u8, gripper_byte(last.gripper), 0]);
    b
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Format { offset: self.pos as u64, reason: reason.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], Error> {
        if self.pos + n > self.buf.len() {
            return Err(self.err(format!("truncated: need {n} more bytes, {} left", self.buf.len() - self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, Error> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, Error> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, Error> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn proprio(&mut self) -> Result<Proprio, Error> {
        let (x, y, g) = (self.u8()?, self.u8()?, self.u8()?);
        let gripper = match g {
            0 => Gripper::Open,
            1 => Gripper::Closed,
            other => return Err(Error::Format { offset: self.pos as u64 - 1, reason: format!("bad gripper byte {other}") }),
        };
        let cell = Cell::new(x as i32, y as i32);
        if !cell.in_bounds() {
            return Err(Error::Format { offset: self.pos as u64 - 3, reason: format!("cell {cell:?} out of bounds") });
        }
        Ok(Proprio { cell, gripper })
    }
}

pub fn decode_trajectory(buf: &[u8]) -> Result<TrajectoryRecord, Error> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != TRAJ_MAGIC {
        return Err(Error::Format { offset: 0, reason: "bad trajectory magic".into() });
    }
    let id = c.u32()?;
    let task = c.u32()?;
    let category = c.u32()?;
    let frames = match c.u8()? {
        0 => false,
        1 => true,
        other => return Err(Error::Format { offset: c.pos as u64 - 1, reason: format!("bad frames flag {other}") }),
    };
    let len = c.u32()? as usize;
    let at = c.pos;
    let instruction = String::from_utf8(c.take(len)?.to_vec())
        .map_err(|_| Error::Format { offset: at as u64, reason: "instruction is not UTF-8".into() })?;
    let mut cubes = Vec::with_capacity(NUM_CUBES);
    for _ in 0..NUM_CUBES {
        cubes.push(SlotColor { slot: c.u8()? as usize, color: c.u8()? });
    }
    let mut marks = Vec::with_capacity(NUM_MARKS);
    for _ in 0..NUM_MARKS {
        marks.push(SlotGlyph { slot: c.u8()? as usize, glyph: c.u16()? });
    }
    let scene = SceneSpec { cubes, marks };
    scene.validate().map_err(|e| Error::Format { offset: c.pos as u64, reason: e.to_string() })?;
    let n = c.u32()? as usize;
    if n > 10_000 {
        return Err(c.err(format!("implausible transition count {n}")));
    }
    let mut proprio = Vec::with_capacity(n + 1);
    let mut actions = Vec::with_capacity(n);
    for i in 0..n {
        proprio.push(c.proprio()?);
        let ai = c.u8()?;
        actions.push(Action::from_index(ai).ok_or_else(|| c.err(format!("bad action index {ai}")))?);
        let step = c.u16()?;
        if step as usize != i {
            return Err(c.err(format!("transition {i} records step {step}")));
        }
        c.take(2)?;
    }
    proprio.push(c.proprio()?);
    c.take(1)?;
    if c.pos != buf.len() {
        return Err(c.err("trailing bytes"));
    }
    Ok(TrajectoryRecord { id, task, category, instruction, scene, proprio, actions, frames })
}

/// Writes the dataset directory; with `frames`, every observation is also dumped as PPM.
pub fn write_dataset(ds: &DemoDataset, dir: &Path, frames: Option<&RenderConfig>) -> Result<(), Error> {
    fs::create_dir_all(dir.join("traj"))?;
    if frames.is_some() {
        fs::create_dir_all(dir.join("frames"))?;
    }
    let mut manifest = BufWriter::new(fs::File::create(dir.join("manifest.jsonl"))?);
    let header = ManifestHeader {
        format: "gwm-demos-1".into(),
        suite_hash: ds.suite_hash.clone(),
        seed: ds.seed,
        per_task: ds.per_task,
        trajectories: ds.trajectories.len(),
        transitions: ds.transitions(),
    };
    writeln!(manifest, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for t in &ds.trajectories {
        let mut t = t.clone();
        if let Some(cfg) = frames {
            t.frames = true;
            for (i, s) in t.states().iter().enumerate() {
                let mut f = BufWriter::new(fs::File::create(dir.join(t.frame_path(i)))?);
                render(s, cfg).write_ppm(&mut f)?;
            }
        }
        let file = traj_file(t.id);
        fs::write(dir.join(&file), encode_trajectory(&t))?;
        let entry = ManifestEntry { id: t.id, task: t.task, file };
        writeln!(manifest, "{}", serde_json::to_string(&entry).expect("entry serializes"))?;
    }
    manifest.flush()?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<DemoDataset, Error> {
    let manifest = BufReader::new(fs::File::open(dir.join("manifest.jsonl"))?);
    let mut lines = manifest.lines();
    let first = lines.next().ok_or_else(|| Error::Format { offset: 0, reason: "empty manifest".into() })??;
    let header: ManifestHeader =
        serde_json::from_str(&first).map_err(|e| Error::Format { offset: 0, reason: format!("manifest header: {e}") })?;
    if header.format != "gwm-demos-1" {
        return Err(Error::Format { offset: 0, reason: format!("unknown dataset format {:?}", header.format) });
    }
    let mut trajectories = Vec::with_capacity(header.trajectories);
    let mut offset = first.len() as u64 + 1;
    for line in lines {
        let line = line?;
        let entry: ManifestEntry =
            serde_json::from_str(&line).map_err(|e| Error::Format { offset, reason: format!("manifest entry: {e}") })?;
        offset += line.len() as u64 + 1;
        let bytes = fs::read(dir.join(&entry.file))?;
        let t = decode_trajectory(&bytes).map_err(|e| match e {
            Error::Format { offset, reason } => Error::Format { offset, reason: format!("{}: {reason}", entry.file) },
            other => other,
        })?;
        if t.id != entry.id || t.task != entry.task {
            return Err(Error::Format { offset, reason: format!("{} does not match its manifest entry", entry.file) });
        }
        trajectories.push(t);
    }
    if trajectories.len() != header.trajectories {
        return Err(Error::Format {
            offset,
            reason: format!("manifest lists {} trajectories, header says {}", trajectories.len(), header.trajectories),
        });
    }
    Ok(DemoDataset { suite_hash: header.suite_hash, seed: header.seed, per_task: header.per_task, trajectories })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::Vocabulary;
    use crate::wiser::{collect_demos_for, generate_suite, BenchConfig};

    fn small() -> DemoDataset {
        let (train, _) = generate_suite(&BenchConfig { categories: 2 }, &Vocabulary::standard(), 5).unwrap();
        collect_demos_for(&train, &[0, 7, 13, 23], 2, 9).unwrap()
    }

    #[test]
    fn record_round_trip_and_truncation() {
        let ds = small();
        for t in &ds.trajectories {
            let bytes = encode_trajectory(t);
            assert_eq!(&decode_trajectory(&bytes).unwrap(), t);
            match decode_trajectory(&bytes[..bytes.len() - 3]) {
                Err(Error::Format { offset, .. }) => assert!(offset > 0),
                other => panic!("expected format error, got {other:?}"),
            }
        }
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small();
        write_dataset(&ds, dir.path(), None).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), ds);
        let empty = DemoDataset::default();
        let dir2 = tempfile::tempdir().unwrap();
        write_dataset(&empty, dir2.path(), None).unwrap();
        assert_eq!(read_dataset(dir2.path()).unwrap(), empty);
    }
}
