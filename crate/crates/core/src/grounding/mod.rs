//! The frozen vision-language embedding space: a frame featurizer mapping
//! observations to feature vectors, and a backbone fusing feature sequences
//! and text into unit-norm joint embeddings.
//!
//! Two builds share one interface: an oracle that inverts the renderer
//! exactly, and a learned encoder pretrained contrastively on a synthetic
//! captioned-video corpus.

mod corpus;
mod learned;
mod oracle;
mod retrieval;

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::vocab::{tokenize, Vocabulary};
use crate::world::{Image, RenderConfig, IMG_H, IMG_W};
use crate::Error;

pub use corpus::{generate_pretraining_corpus, Corpus, CorpusItem, ItemKind};
pub use learned::{pretrain_encoder, PretrainConfig, PretrainReport};
pub use retrieval::{retrieval_eval, RetrievalReport};
pub use oracle::{decode, Symbols};

/// Per-frame feature dimensionality.
pub const FEATURE_DIM: usize = 64;
/// Joint embedding dimensionality.
pub const EMBED_DIM: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderKind {
    Oracle,
    Learned,
}

#[derive(Clone, Debug, PartialEq)]
enum Build {
    Oracle,
    Learned(learned::LearnedNets),
}

/// A frozen encoder. No method takes `&mut self`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundedEncoder {
    vocab: Vocabulary,
    render: RenderConfig,
    tokens: Vec<String>,
    temperature: f64,
    build: Build,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    kind: EncoderKind,
    feature_dim: usize,
    embed_dim: usize,
    temperature: f64,
    vocab: Vocabulary,
    render: RenderConfig,
}

const CHECKPOINT_FORMAT: &str = "gwm-encoder-1";

pub fn build_oracle_encoder(vocab: &Vocabulary, render: &RenderConfig) -> Result<GroundedEncoder, Error> {
    vocab.validate(render)?;
    render.validate()?;
    Ok(GroundedEncoder {
        vocab: vocab.clone(),
        render: render.clone(),
        tokens: vocab.tokens(),
        temperature: 0.0,
        build: Build::Oracle,
    })
}

impl GroundedEncoder {
    pub(crate) fn learned(vocab: &Vocabulary, render: &RenderConfig, temperature: f64, nets: learned::LearnedNets) -> Self {
        Self { vocab: vocab.clone(), render: render.clone(), tokens: vocab.tokens(), temperature, build: Build::Learned(nets) }
    }

    pub fn kind(&self) -> EncoderKind {
        match self.build {
            Build::Oracle => EncoderKind::Oracle,
            Build::Learned(_) => EncoderKind::Learned,
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn render_config(&self) -> &RenderConfig {
        &self.render
    }

    /// Contrastive temperature used at pretraining; zero for the oracle.
    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Token ids for `text`, failing on the first out-of-vocabulary token.
    pub fn token_ids(&self, text: &str) -> Result<Vec<usize>, Error> {
        let toks = tokenize(text);
        let unknown: Vec<&String> = toks.iter().filter(|t| self.tokens.binary_search(t).is_err()).collect();
        if !unknown.is_empty() {
            return Err(Error::Vocab(format!("unknown tokens {unknown:?}")));
        }
        Ok(toks.iter().map(|t| self.tokens.binary_search(t).expect("checked above")).collect())
    }

    fn check_image(img: &Image) -> Result<(), Error> {
        if img.width != IMG_W || img.height != IMG_H || img.data.len() != IMG_W * IMG_H * 3 {
            return Err(Error::Precondition(format!(
                "expected a {IMG_W}x{IMG_H} image, got {}x{}",
                img.width, img.height
            )));
        }
        Ok(())
    }

    pub fn encode_frame(&self, img: &Image) -> Result<Vec<f64>, Error> {
        Ok(self.encode_frames(std::slice::from_ref(img))?.pop().expect("one frame in, one out"))
    }

    /// Batched [`encode_frame`](Self::encode_frame).
    pub fn encode_frames(&self, imgs: &[Image]) -> Result<Vec<Vec<f64>>, Error> {
        for img in imgs {
            Self::check_image(img)?;
        }
        match &self.build {
            Build::Oracle => imgs.iter().map(|img| Ok(oracle::code(&decode(img, &self.render)?))).collect(),
            Build::Learned(nets) => nets.encode_frames(imgs),
        }
    }

    /// Fuses a feature sequence and optional text into a unit-norm embedding.
    ///
    /// Predicted features are accepted exactly like encoded ones.
    pub fn backbone_embed(&self, frames: &[Vec<f64>], text: Option<&str>) -> Result<Vec<f64>, Error> {
        let text = text.filter(|t| !tokenize(t).is_empty());
        if frames.is_empty() && text.is_none() {
            return Err(Error::Precondition("backbone needs frames or text".into()));
        }
        if let Some(f) = frames.iter().find(|f| f.len() != FEATURE_DIM || f.iter().any(|v| !v.is_finite())) {
            return Err(Error::Precondition(format!("frame feature must be {FEATURE_DIM} finite values, got {}", f.len())));
        }
        let ids = text.map(|t| self.token_ids(t)).transpose()?;
        let z = match &self.build {
            Build::Oracle => oracle::embed(&self.vocab, frames, text),
            Build::Learned(nets) => nets.embed(frames, ids.as_deref())?,
        };
        Ok(z)
    }

    /// Goal embedding for `prompt` in the context of `context` frames.
    pub fn encode_instruction(&self, prompt: &str, context: &[Image]) -> Result<Vec<f64>, Error> {
        if tokenize(prompt).is_empty() {
            return Err(Error::Precondition("empty prompt".into()));
        }
        self.token_ids(prompt)?;
        let frames = self.encode_frames(context)?;
        self.backbone_embed(&frames, Some(prompt))
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<(), Error> {
        let header = Header {
            format: CHECKPOINT_FORMAT.into(),
            kind: self.kind(),
            feature_dim: FEATURE_DIM,
            embed_dim: EMBED_DIM,
            temperature: self.temperature,
            vocab: self.vocab.clone(),
            render: self.render.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        if let Build::Learned(nets) = &self.build {
            nets.write_to(out)?;
        }
        Ok(())
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self, Error> {
        let mut r = BufReader::new(input);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: Header = serde_json::from_str(line.trim_end())
            .map_err(|e| Error::Format { offset: 0, reason: format!("encoder header: {e}") })?;
        if header.format != CHECKPOINT_FORMAT || header.feature_dim != FEATURE_DIM || header.embed_dim != EMBED_DIM {
            return Err(Error::Format { offset: 0, reason: "encoder header does not match this build".into() });
        }
        let enc = match header.kind {
            EncoderKind::Oracle => build_oracle_encoder(&header.vocab, &header.render)?,
            EncoderKind::Learned => {
                let nets = learned::LearnedNets::read_from(&mut r, header.vocab.tokens().len())?;
                Self::learned(&header.vocab, &header.render, header.temperature, nets)
            }
        };
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format { offset: line.len() as u64, reason: "trailing bytes after encoder".into() });
        }
        Ok(enc)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory cannot fail");
        out
    }

    /// Hex prefix of the SHA-256 of the serialized encoder.
    pub fn hash(&self) -> String {
        hex::encode(&Sha256::digest(self.to_bytes())[..8])
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Self::read_from(&mut std::fs::File::open(path)?)
    }

    /// Learned parts, for gradient checks and diagnostics.
    pub fn networks(&self) -> Vec<&diffmath::Network> {
        match &self.build {
            Build::Oracle => Vec::new(),
            Build::Learned(nets) => nets.networks(),
        }
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, Error> {
    if a.len() != b.len() {
        return Err(Error::Precondition(format!("cosine of {}- and {}-dim vectors", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Precondition("cosine of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub(crate) fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{pick_prompt, SYSTEM_PROMPT};

    #[test]
    fn cosine_contract() {
        let a = [0.3, -1.2, 2.0];
        assert!((cosine(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        let scaled: Vec<f64> = a.iter().map(|v| v * 7.5).collect();
        let b = [1.0, 0.5, -0.25];
        assert!((cosine(&scaled, &b).unwrap() - cosine(&a, &b).unwrap()).abs() < 1e-12);
        assert!(cosine(&[0.0, 0.0], &b[..2]).is_err());
        assert!(cosine(&a, &b[..2]).is_err());
    }

    #[test]
    fn unknown_tokens_are_listed() {
        let v = Vocabulary::standard();
        let enc = build_oracle_encoder(&v, &v.render_config()).unwrap();
        let err = enc.encode_instruction("pick up the plaid cube", &[]).unwrap_err().to_string();
        assert!(err.contains("plaid"), "{err}");
        assert!(enc.encode_instruction(&format!("{SYSTEM_PROMPT} {}", pick_prompt("red cube")), &[]).is_ok());
    }

    #[test]
    fn oracle_checkpoint_round_trips() {
        let v = Vocabulary::standard();
        let enc = build_oracle_encoder(&v, &v.render_config()).unwrap();
        let bytes = enc.to_bytes();
        let back = GroundedEncoder::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, enc);
        assert_eq!(back.hash(), enc.hash());
    }
}
