//! Grounded world model: predicts the encoder features of future keyframes
//! from the current frame's features and tokenized actions. Trained with MSE
//! against features of the true future; instructions are never read.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use diffmath::{build_network, read_network, write_network, Activation, Network, NetworkSpec, OptConfig, OptState, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::grounding::{GroundedEncoder, FEATURE_DIM};
use crate::wiser::DemoDataset;
use crate::world::{
    agent_keyframe_poses, keyframe_indices, keyframe_states, render, render_agent, Action, Proprio, Sprite, WorldState,
};
use crate::Error;

/// Per-keyframe feature vectors.
pub type FeatureSequence = Vec<Vec<f64>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GwmKind {
    /// Actions enter as encoder features of agent-only renders.
    Rendered,
    /// Actions enter as numbers through a learned projection.
    Raw,
}

impl GwmKind {
    pub fn parse(s: &str) -> Result<Self, Error> {
        match s {
            "rendered" => Ok(Self::Rendered),
            "raw" => Ok(Self::Raw),
            other => Err(Error::Config(format!("unknown world-model kind {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Rendered => "rendered",
            Self::Raw => "raw",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GwmConfig {
    pub kind: GwmKind,
    pub horizon: usize,
    pub keyframes: usize,
    pub hidden: Vec<usize>,
}

impl Default for GwmConfig {
    fn default() -> Self {
        Self { kind: GwmKind::Rendered, horizon: 12, keyframes: 4, hidden: vec![256, 256, 256] }
    }
}

impl GwmConfig {
    pub fn validate(&self) -> Result<(), Error> {
        keyframe_indices(self.horizon, self.keyframes)?;
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    fn trunk_spec(&self) -> NetworkSpec {
        NetworkSpec::mlp((1 + self.keyframes) * FEATURE_DIM, &self.hidden, self.keyframes * FEATURE_DIM, Activation::Gelu)
    }

    fn head_spec(&self) -> NetworkSpec {
        NetworkSpec::mlp(self.horizon * 3, &[], self.keyframes * FEATURE_DIM, Activation::Gelu)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GwmModel {
    config: GwmConfig,
    encoder_hash: String,
    trunk: Network,
    /// Raw kind only: flattened numeric chunk to K action tokens.
    head: Option<Network>,
}

/// Current-frame feature plus K action tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionInput {
    pub current: Vec<f64>,
    pub tokens: FeatureSequence,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    config: GwmConfig,
    feature_dim: usize,
    encoder_hash: String,
}

const CHECKPOINT_FORMAT: &str = "gwm-model-1";

impl GwmModel {
    pub fn new(config: GwmConfig, enc: &GroundedEncoder, seed: u64) -> Result<Self, Error> {
        config.validate()?;
        let trunk = build_network(&config.trunk_spec(), seed)?;
        let head = match config.kind {
            GwmKind::Rendered => None,
            GwmKind::Raw => Some(build_network(&config.head_spec(), seed.wrapping_add(1))?),
        };
        Ok(Self { config, encoder_hash: enc.hash(), trunk, head })
    }

    pub fn config(&self) -> &GwmConfig {
        &self.config
    }

    pub fn kind(&self) -> GwmKind {
        self.config.kind
    }

    /// Hash of the encoder this model was built for.
    pub fn encoder_hash(&self) -> &str {
        &self.encoder_hash
    }

    pub fn networks(&self) -> Vec<&Network> {
        std::iter::once(&self.trunk).chain(self.head.as_ref()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.networks().iter().map(|n| n.param_count()).sum()
    }

    pub fn check_encoder(&self, enc: &GroundedEncoder) -> Result<(), Error> {
        let h = enc.hash();
        if h != self.encoder_hash {
            return Err(Error::Precondition(format!(
                "world model was trained against encoder {} but encoder {h} was supplied",
                self.encoder_hash
            )));
        }
        Ok(())
    }

    /// Action tokens for `chunk` from `state`: agent-only renders for the
    /// rendered kind, the learned head for the raw kind.
    pub fn tokenize_actions(
        &self,
        state: &WorldState,
        chunk: &[Action],
        enc: &GroundedEncoder,
        sprite: Sprite,
    ) -> Result<FeatureSequence, Error> {
        self.check_chunk(chunk)?;
        match self.config.kind {
            GwmKind::Rendered => render_action_tokens(state, chunk, self.config.keyframes, enc, sprite),
            GwmKind::Raw => self.raw_tokens(chunk),
        }
    }

    fn check_chunk(&self, chunk: &[Action]) -> Result<(), Error> {
        if chunk.len() != self.config.horizon {
            return Err(Error::Precondition(format!(
                "chunk has {} actions, model horizon is {}",
                chunk.len(),
                self.config.horizon
            )));
        }
        Ok(())
    }

    fn raw_tokens(&self, chunk: &[Action]) -> Result<FeatureSequence, Error> {
        let head = self.head.as_ref().ok_or_else(|| Error::Precondition("rendered-kind model has no action head".into()))?;
        let out = head.forward(&Tensor::matrix(1, chunk.len() * 3, raw_numbers(chunk))?)?;
        Ok(out.data().chunks(FEATURE_DIM).map(<[f64]>::to_vec).collect())
    }

    pub fn hash(&self) -> String {
        hex::encode(&Sha256::digest(self.to_bytes())[..8])
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<(), Error> {
        let header = Header {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            feature_dim: FEATURE_DIM,
            encoder_hash: self.encoder_hash.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        for net in self.networks() {
            write_network(net, out)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory cannot fail");
        out
    }

    /// Reads a checkpoint and checks it was trained against `enc`.
    pub fn read_from(input: &mut impl Read, enc: &GroundedEncoder) -> Result<Self, Error> {
        let mut r = BufReader::new(input);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: Header = serde_json::from_str(line.trim_end())
            .map_err(|e| Error::Format { offset: 0, reason: format!("world-model header: {e}") })?;
        if header.format != CHECKPOINT_FORMAT || header.feature_dim != FEATURE_DIM {
            return Err(Error::Format { offset: 0, reason: "world-model header does not match this build".into() });
        }
        header.config.validate()?;
        let trunk = read_network(&mut r)?;
        if trunk.spec() != &header.config.trunk_spec() {
            return Err(Error::Format { offset: line.len() as u64, reason: "world-model trunk has an unexpected shape".into() });
        }
        let head = match header.config.kind {
            GwmKind::Rendered => None,
            GwmKind::Raw => {
                let h = read_network(&mut r)?;
                if h.spec() != &header.config.head_spec() {
                    return Err(Error::Format { offset: line.len() as u64, reason: "action head has an unexpected shape".into() });
                }
                Some(h)
            }
        };
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format { offset: line.len() as u64, reason: "trailing bytes after world model".into() });
        }
        let model = Self { config: header.config, encoder_hash: header.encoder_hash, trunk, head };
        model.check_encoder(enc)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, enc: &GroundedEncoder) -> Result<Self, Error> {
        Self::read_from(&mut std::fs::File::open(path)?, enc)
    }
}

fn raw_numbers(chunk: &[Action]) -> Vec<f64> {
    chunk.iter().flat_map(|a| a.as_numbers()).collect()
}

/// Encoder features of the agent drawn alone at the chunk's keyframes. No learned parameters besides the encoder's.
pub fn render_action_tokens(
    state: &WorldState,
    chunk: &[Action],
    k: usize,
    enc: &GroundedEncoder,
    sprite: Sprite,
) -> Result<FeatureSequence, Error> {
    let cfg = enc.render_config().with_sprite(sprite);
    let frames: Vec<_> = agent_keyframe_poses(state.proprio(), chunk, k)?.into_iter().map(|p| render_agent(p, &cfg)).collect();
    enc.encode_frames(&frames)
}

/// Features of the true simulator future at the chunk's keyframes.
pub fn gt_future(state: &WorldState, chunk: &[Action], k: usize, enc: &GroundedEncoder) -> Result<FeatureSequence, Error> {
    let cfg = enc.render_config();
    let frames: Vec<_> = keyframe_states(state, chunk, k)?.iter().map(|s| render(s, cfg)).collect();
    enc.encode_frames(&frames)
}

fn trunk_input(input: &PredictionInput, k: usize) -> Result<Vec<f64>, Error> {
    if input.tokens.len() != k {
        return Err(Error::Precondition(format!("model expects {k} action tokens, got {}", input.tokens.len())));
    }
    let mut x = Vec::with_capacity((1 + k) * FEATURE_DIM);
    for f in std::iter::once(&input.current).chain(&input.tokens) {
        if f.len() != FEATURE_DIM {
            return Err(Error::Precondition(format!("feature vectors must have {FEATURE_DIM} values, got {}", f.len())));
        }
        x.extend_from_slice(f);
    }
    Ok(x)
}

/// Predicted keyframe features: the current feature plus a learned residual per keyframe.
pub fn predict_future(model: &GwmModel, input: &PredictionInput) -> Result<FeatureSequence, Error> {
    let k = model.config.keyframes;
    let x = trunk_input(input, k)?;
    let delta = model.trunk.forward(&Tensor::matrix(1, x.len(), x)?)?;
    Ok(delta
        .data()
        .chunks(FEATURE_DIM)
        .map(|d| d.iter().zip(&input.current).map(|(a, b)| a + b).collect())
        .collect())
}

/// Prediction for a raw-kind model straight from the numeric chunk.
pub fn predict_future_raw_actions(
    model: &GwmModel,
    enc: &GroundedEncoder,
    state: &WorldState,
    chunk: &[Action],
) -> Result<FeatureSequence, Error> {
    if model.kind() != GwmKind::Raw {
        return Err(Error::Precondition("raw-action prediction needs a raw-kind world model".into()));
    }
    model.check_chunk(chunk)?;
    let current = enc.encode_frame(&render(state, enc.render_config()))?;
    predict_future(model, &PredictionInput { current, tokens: model.raw_tokens(chunk)? })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GwmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for GwmTrainConfig {
    fn default() -> Self {
        Self { epochs: 100, batch_size: 128, lr: 1e-3, weight_decay: 0.01, seed: 0 }
    }
}

/// Precomputed training pairs: indices into shared feature tables.
struct Samples {
    /// Features of every demo state, trajectory by trajectory.
    frames: Vec<Vec<f64>>,
    /// Agent-only token features keyed by pose.
    poses: HashMap<Proprio, usize>,
    pose_features: Vec<Vec<f64>>,
    /// (current frame, target frames, token poses, raw numbers) per sample.
    items: Vec<(usize, Vec<usize>, Vec<usize>, Vec<f64>)>,
}

fn build_samples(ds: &DemoDataset, enc: &GroundedEncoder, cfg: &GwmConfig) -> Result<Samples, Error> {
    let idx = keyframe_indices(cfg.horizon, cfg.keyframes)?;
    let render_cfg = enc.render_config();
    let mut images = Vec::new();
    let mut items = Vec::new();
    let mut poses: HashMap<Proprio, usize> = HashMap::new();
    let mut pose_list = Vec::new();
    for t in &ds.trajectories {
        let base = images.len();
        let states = t.states();
        images.extend(states.iter().map(|s| render(s, render_cfg)));
        for step in 0..t.len() {
            let chunk = t.chunk(step, cfg.horizon);
            let targets = idx.iter().map(|&i| base + (step + i).min(t.len())).collect();
            let mut token_ids = Vec::with_capacity(idx.len());
            for p in agent_keyframe_poses(t.proprio[step], &chunk, cfg.keyframes)? {
                let next = poses.len();
                token_ids.push(*poses.entry(p).or_insert_with(|| {
                    pose_list.push(p);
                    next
                }));
            }
            items.push((base + step, targets, token_ids, raw_numbers(&chunk)));
        }
    }
    let frames = enc.encode_frames(&images)?;
    let agent_cfg = render_cfg.with_sprite(Sprite::Ring);
    let pose_images: Vec<_> = pose_list.iter().map(|p| render_agent(*p, &agent_cfg)).collect();
    let pose_features = enc.encode_frames(&pose_images)?;
    Ok(Samples { frames, poses, pose_features, items })
}

/// Trains `model` on every transition of `ds` with features from the frozen `enc`.
/// Returns the model and the mean loss of each epoch.
pub fn train_gwm(
    model: &GwmModel,
    ds: &DemoDataset,
    enc: &GroundedEncoder,
    hyper: &GwmTrainConfig,
) -> Result<(GwmModel, Vec<f64>), Error> {
    model.check_encoder(enc)?;
    if ds.transitions() == 0 {
        return Err(Error::Precondition("world-model training needs at least one transition".into()));
    }
    if hyper.epochs == 0 || hyper.batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be positive".into()));
    }
    let cfg = &model.config;
    let samples = build_samples(ds, enc, cfg)?;
    debug_assert_eq!(samples.poses.len(), samples.pose_features.len());
    let k = cfg.keyframes;
    let n = samples.items.len();
    let steps = n.div_ceil(hyper.batch_size) * hyper.epochs;
    let opt_cfg = OptConfig {
        lr: hyper.lr,
        weight_decay: hyper.weight_decay,
        max_steps: steps as u64,
        min_lr: hyper.lr * 0.02,
        beta2: 0.99,
        ..OptConfig::default()
    };
    let mut out = model.clone();
    let mut trunk_opt = OptState::new(opt_cfg, out.trunk.params())?;
    let mut head_opt = out.head.as_ref().map(|h| OptState::new(opt_cfg, h.params())).transpose()?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(hyper.epochs);
    let mut step = 0usize;
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for batch in order.chunks(hyper.batch_size) {
            let b = batch.len();
            let mut current = Vec::with_capacity(b * FEATURE_DIM);
            let mut tokens = Vec::with_capacity(b * k * FEATURE_DIM);
            let mut raw = Vec::with_capacity(b * cfg.horizon * 3);
            let mut target = Vec::with_capacity(b * k * FEATURE_DIM);
            let mut residual_base = Vec::with_capacity(b * k * FEATURE_DIM);
            for &i in batch {
                let (cur, tgt, tok, nums) = &samples.items[i];
                current.extend_from_slice(&samples.frames[*cur]);
                for &p in tok {
                    tokens.extend_from_slice(&samples.pose_features[p]);
                }
                raw.extend_from_slice(nums);
                for &t in tgt {
                    target.extend_from_slice(&samples.frames[t]);
                    residual_base.extend_from_slice(&samples.frames[*cur]);
                }
            }
            let mut tape = Tape::new();
            let tv = out.trunk.bind(&mut tape);
            let hv = out.head.as_ref().map(|h| h.bind(&mut tape));
            let cur = tape.leaf(Tensor::matrix(b, FEATURE_DIM, current)?);
            let tok = match (&out.head, &hv) {
                (Some(h), Some(hv)) => {
                    let r = tape.leaf(Tensor::matrix(b, cfg.horizon * 3, raw)?);
                    h.forward_on_tape(&mut tape, hv, r)?
                }
                _ => tape.leaf(Tensor::matrix(b, k * FEATURE_DIM, tokens)?),
            };
            let x = tape.concat_cols(&[cur, tok])?;
            let delta = out.trunk.forward_on_tape(&mut tape, &tv, x)?;
            let base = tape.leaf(Tensor::matrix(b, k * FEATURE_DIM, residual_base)?);
            let pred = tape.add(delta, base)?;
            let tgt = tape.leaf(Tensor::matrix(b, k * FEATURE_DIM, target)?);
            let loss = tape.mse(pred, tgt)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Precondition(format!("world-model loss became {value} at step {step}")));
            }
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = out.trunk.params().iter().zip(&tv).map(|(p, v)| grads.get_or_zeros(*v, p.shape())).collect();
            trunk_opt.update(out.trunk.params_mut(), &g)?;
            if let (Some(h), Some(hv), Some(opt)) = (out.head.as_mut(), hv, head_opt.as_mut()) {
                let g: Vec<Tensor> = h.params().iter().zip(&hv).map(|(p, v)| grads.get_or_zeros(*v, p.shape())).collect();
                opt.update(h.params_mut(), &g)?;
            }
            total += value * b as f64;
            count += b;
            step += 1;
        }
        curve.push(total / count as f64);
    }
    for net in [Some(&mut out.trunk), out.head.as_mut()].into_iter().flatten() {
        net.quantize_f32();
    }
    Ok((out, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grounding::build_oracle_encoder;
    use crate::vocab::Vocabulary;
    use crate::wiser::{collect_demos_for, generate_suite, BenchConfig};

    fn setup() -> (GroundedEncoder, DemoDataset) {
        let v = Vocabulary::standard();
        let enc = build_oracle_encoder(&v, &v.render_config()).unwrap();
        let (train, _) = generate_suite(&BenchConfig { categories: 2 }, &v, 1).unwrap();
        let ids: Vec<u32> = (0..24).collect();
        (enc, collect_demos_for(&train, &ids, 2, 3).unwrap())
    }

    #[test]
    fn shapes_and_token_contracts() {
        let (enc, ds) = setup();
        let s = ds.trajectories[0].initial_state();
        let chunk = ds.trajectories[0].chunk(0, 12);
        let a = GwmModel::new(GwmConfig::default(), &enc, 1).unwrap();
        let b = GwmModel::new(GwmConfig::default(), &enc, 2).unwrap();
        let ta = a.tokenize_actions(&s, &chunk, &enc, Sprite::Ring).unwrap();
        assert_eq!(ta, b.tokenize_actions(&s, &chunk, &enc, Sprite::Ring).unwrap());
        assert_eq!(ta.len(), 4);
        let still = a.tokenize_actions(&s, &[Action::NOOP; 12], &enc, Sprite::Ring).unwrap();
        assert!(still.iter().all(|t| t == &still[0]));
        let gt = gt_future(&s, &[Action::NOOP; 12], 4, &enc).unwrap();
        let now = enc.encode_frame(&render(&s, enc.render_config())).unwrap();
        assert!(gt.iter().all(|f| f == &now));
        let input = PredictionInput { current: now.clone(), tokens: ta };
        let p = predict_future(&a, &input).unwrap();
        assert_eq!(p, predict_future(&a, &input).unwrap());
        assert_eq!((p.len(), p[0].len()), (gt.len(), gt[0].len()));
        assert!(render_action_tokens(&s, &chunk[..3], 4, &enc, Sprite::Ring).is_err());

        let raw = GwmModel::new(GwmConfig { kind: GwmKind::Raw, ..GwmConfig::default() }, &enc, 1).unwrap();
        assert!(raw.param_count() > a.param_count());
        let pr = predict_future_raw_actions(&raw, &enc, &s, &chunk).unwrap();
        assert_eq!((pr.len(), pr[0].len()), (4, FEATURE_DIM));
        assert_eq!(pr, predict_future_raw_actions(&raw, &enc, &s, &chunk).unwrap());
        assert!(predict_future_raw_actions(&a, &enc, &s, &chunk).is_err());
    }

    #[test]
    fn training_lowers_loss_ignores_language_and_round_trips() {
        let (enc, ds) = setup();
        let before = enc.to_bytes();
        let model = GwmModel::new(GwmConfig::default(), &enc, 5).unwrap();
        let hyper = GwmTrainConfig { epochs: 4, ..GwmTrainConfig::default() };
        let (trained, curve) = train_gwm(&model, &ds, &enc, &hyper).unwrap();
        assert!(curve.last().unwrap() < &curve[0], "{curve:?}");
        assert_eq!(enc.to_bytes(), before);

        let mut poisoned = ds.clone();
        for t in &mut poisoned.trajectories {
            t.instruction = "\u{0}poison\u{0}".into();
        }
        let (again, curve2) = train_gwm(&model, &poisoned, &enc, &hyper).unwrap();
        assert_eq!(again.to_bytes(), trained.to_bytes());
        assert_eq!(curve, curve2);

        let back = GwmModel::read_from(&mut trained.to_bytes().as_slice(), &enc).unwrap();
        assert_eq!(back, trained);
    }

    #[test]
    fn checkpoint_rejects_a_different_encoder() {
        let (enc, _) = setup();
        let model = GwmModel::new(GwmConfig::default(), &enc, 5).unwrap();
        let mut v = Vocabulary::standard();
        v.colors.swap(0, 1);
        let other = build_oracle_encoder(&v, &v.render_config()).unwrap();
        assert_ne!(other.hash(), enc.hash());
        let err = GwmModel::read_from(&mut model.to_bytes().as_slice(), &other).unwrap_err();
        assert!(err.to_string().contains("trained against"), "{err}");
    }
}
