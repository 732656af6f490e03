//! Grounded world-model MPC on a pick-and-place gridworld benchmark.

pub mod dataset;
pub mod grounding;
pub mod gwm;
pub mod harness;
pub mod knn;
pub mod mpc;
pub mod vocab;
pub mod wiser;
pub mod world;

use diffmath::DiffError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid scene: {0}")]
    Scene(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("bad config: {0}")]
    Config(String),
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("replay mismatch: {0}")]
    Replay(String),
    #[error("malformed data at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parses `key=value` lines. Blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>, Error> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
