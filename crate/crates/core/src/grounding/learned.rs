//! Learned encoder: a shared per-cell patch MLP, a linear readout over the
//! cell grid, a bag-of-words text embedder, and an MLP backbone, trained with
//! a symmetric contrastive loss between clips and their captions.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::time::Instant;

use diffmath::{
    build_network, contrastive_on_tape, read_network, write_network, Activation, Network, NetworkSpec, OptConfig, OptState,
    Tape, Tensor, Var,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::vocab::{tokenize, Vocabulary};
use crate::world::{Image, CELL_PX, GRID_H, GRID_W, IMG_W};
use crate::Error;

use super::corpus::Corpus;
use super::retrieval::{retrieval_eval, RetrievalReport};
use super::{GroundedEncoder, EMBED_DIM, FEATURE_DIM};

pub(crate) const PATCH_LEN: usize = CELL_PX * CELL_PX * 3;
const PATCH_HIDDEN: usize = 48;
const CELL_DIM: usize = 12;
const CELLS: usize = (GRID_W * GRID_H) as usize;
const BACKBONE_HIDDEN: usize = 256;
/// Images per forward pass at inference.
const ENCODE_BATCH: usize = 256;

fn specs(vocab_len: usize) -> [NetworkSpec; 4] {
    [
        NetworkSpec::mlp(PATCH_LEN, &[PATCH_HIDDEN], CELL_DIM, Activation::Gelu),
        NetworkSpec::mlp(CELLS * CELL_DIM, &[], FEATURE_DIM, Activation::Gelu),
        NetworkSpec::mlp(vocab_len, &[], FEATURE_DIM, Activation::Gelu),
        NetworkSpec::mlp(2 * FEATURE_DIM, &[BACKBONE_HIDDEN], EMBED_DIM, Activation::Gelu),
    ]
}

fn patches_of(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(CELLS * PATCH_LEN);
    for cy in 0..GRID_H as usize {
        for cx in 0..GRID_W as usize {
            for r in 0..CELL_PX {
                let px = (cy * CELL_PX + r) * IMG_W + cx * CELL_PX;
                out.extend_from_slice(&img.data[px * 3..(px + CELL_PX) * 3]);
            }
        }
    }
    out
}

/// Deduplicated cell patches; images are stored as rows of this table.
#[derive(Default)]
struct PatchTable {
    index: HashMap<Vec<u8>, u32>,
    data: Vec<u8>,
}

impl PatchTable {
    fn intern(&mut self, img: &Image) -> Vec<u32> {
        patches_of(img)
            .chunks(PATCH_LEN)
            .map(|p| {
                let next = self.index.len() as u32;
                *self.index.entry(p.to_vec()).or_insert_with(|| {
                    self.data.extend_from_slice(p);
                    next
                })
            })
            .collect()
    }

    fn rows(&self, ids: &[u32]) -> Tensor {
        let mut data = Vec::with_capacity(ids.len() * PATCH_LEN);
        for &id in ids {
            let at = id as usize * PATCH_LEN;
            data.extend(self.data[at..at + PATCH_LEN].iter().map(|&b| f64::from(b) / 255.0));
        }
        Tensor::matrix(ids.len(), PATCH_LEN, data).expect("patch rows are well formed")
    }
}

/// Local row numbers for a batch of images, so each distinct patch goes through the MLP once.
fn localize(images: &[&[u32]]) -> (Vec<u32>, Vec<usize>) {
    let mut local: HashMap<u32, usize> = HashMap::new();
    let mut uniq = Vec::new();
    let mut cells = Vec::with_capacity(images.len() * CELLS);
    for img in images {
        for &id in *img {
            let row = *local.entry(id).or_insert_with(|| {
                uniq.push(id);
                uniq.len() - 1
            });
            cells.push(row);
        }
    }
    (uniq, cells)
}

struct Bound {
    patch: Vec<Var>,
    readout: Vec<Var>,
    text: Vec<Var>,
    backbone: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct LearnedNets {
    patch: Network,
    readout: Network,
    text: Network,
    backbone: Network,
}

impl LearnedNets {
    pub(crate) fn init(vocab_len: usize, seed: u64) -> Result<Self, Error> {
        let [p, r, t, b] = specs(vocab_len);
        Ok(Self {
            patch: build_network(&p, seed)?,
            readout: build_network(&r, seed.wrapping_add(1))?,
            text: build_network(&t, seed.wrapping_add(2))?,
            backbone: build_network(&b, seed.wrapping_add(3))?,
        })
    }

    pub(crate) fn networks(&self) -> Vec<&Network> {
        vec![&self.patch, &self.readout, &self.text, &self.backbone]
    }

    fn networks_mut(&mut self) -> [&mut Network; 4] {
        [&mut self.patch, &mut self.readout, &mut self.text, &mut self.backbone]
    }

    fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            patch: self.patch.bind(tape),
            readout: self.readout.bind(tape),
            text: self.text.bind(tape),
            backbone: self.backbone.bind(tape),
        }
    }

    /// Features for images whose cells are rows of `patches`, listed image by image.
    fn frames_on_tape(&self, tape: &mut Tape, b: &Bound, patches: Tensor, cells: &[usize]) -> Result<Var, Error> {
        let p = tape.leaf(patches);
        let phi = self.patch.forward_on_tape(tape, &b.patch, p)?;
        let g = tape.gather_rows(phi, cells)?;
        let x = tape.reshape(g, vec![cells.len() / CELLS, CELLS * CELL_DIM])?;
        Ok(self.readout.forward_on_tape(tape, &b.readout, x)?)
    }

    /// Mean token embedding plus bias, one row per segment.
    fn text_on_tape(&self, tape: &mut Tape, b: &Bound, ids: &[usize], seg: &[usize], n: usize) -> Result<Var, Error> {
        let rows = tape.gather_rows(b.text[0], ids)?;
        let pooled = tape.segment_mean(rows, seg, n)?;
        Ok(tape.add_row(pooled, b.text[1])?)
    }

    fn embed_on_tape(&self, tape: &mut Tape, b: &Bound, input: Var) -> Result<Var, Error> {
        let h = self.backbone.forward_on_tape(tape, &b.backbone, input)?;
        Ok(tape.l2_normalize_rows(h)?)
    }

    pub(crate) fn encode_frames(&self, imgs: &[Image]) -> Result<Vec<Vec<f64>>, Error> {
        let mut out = Vec::with_capacity(imgs.len());
        for batch in imgs.chunks(ENCODE_BATCH) {
            let mut table = PatchTable::default();
            let ids: Vec<Vec<u32>> = batch.iter().map(|img| table.intern(img)).collect();
            let cells: Vec<usize> = ids.iter().flatten().map(|&id| id as usize).collect();
            let all: Vec<u32> = (0..table.index.len() as u32).collect();
            let mut tape = Tape::new();
            let b = self.bind(&mut tape);
            let f = self.frames_on_tape(&mut tape, &b, table.rows(&all), &cells)?;
            let v = tape.value(f);
            if !v.is_finite() {
                return Err(diffmath::DiffError::NonFinite("frame features".into()).into());
            }
            out.extend((0..v.rows()).map(|r| v.row(r).to_vec()));
        }
        Ok(out)
    }

    pub(crate) fn embed(&self, frames: &[Vec<f64>], ids: Option<&[usize]>) -> Result<Vec<f64>, Error> {
        let mut x = vec![0.0; 2 * FEATURE_DIM];
        for f in frames {
            for (xi, v) in x[..FEATURE_DIM].iter_mut().zip(f) {
                *xi += v / frames.len() as f64;
            }
        }
        if let Some(ids) = ids.filter(|ids| !ids.is_empty()) {
            let [w, bias] = self.text.params() else { unreachable!("linear layer has a weight and a bias") };
            for &id in ids {
                for (xi, v) in x[FEATURE_DIM..].iter_mut().zip(w.row(id)) {
                    *xi += v / ids.len() as f64;
                }
            }
            for (xi, v) in x[FEATURE_DIM..].iter_mut().zip(bias.data()) {
                *xi += v;
            }
        }
        let h = self.backbone.forward(&Tensor::matrix(1, 2 * FEATURE_DIM, x)?)?;
        let n = h.norm();
        if !(n > 0.0) {
            return Err(Error::Precondition("backbone produced a zero embedding".into()));
        }
        Ok(h.data().iter().map(|v| v / n).collect())
    }

    pub(crate) fn write_to(&self, out: &mut impl Write) -> Result<(), Error> {
        for net in self.networks() {
            write_network(net, out)?;
        }
        Ok(())
    }

    pub(crate) fn read_from(input: &mut impl Read, vocab_len: usize) -> Result<Self, Error> {
        let mut nets = Vec::with_capacity(4);
        for (i, spec) in specs(vocab_len).iter().enumerate() {
            let net = read_network(input)?;
            if net.spec() != spec {
                return Err(Error::Format { offset: 0, reason: format!("encoder network {i} has an unexpected shape") });
            }
            nets.push(net);
        }
        let [patch, readout, text, backbone]: [Network; 4] = nets.try_into().expect("four networks read");
        Ok(Self { patch, readout, text, backbone })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    /// Keyframes per clip; match the planner's K.
    pub keyframes: usize,
    pub seed: u64,
    /// Fresh scenes for the retrieval report after training.
    pub eval_scenes: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 64,
            lr: 2e-3,
            weight_decay: 1e-4,
            temperature: 0.07,
            keyframes: 4,
            seed: 0,
            eval_scenes: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub items: usize,
    pub steps: u64,
    /// Mean contrastive loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub seconds: f64,
    pub retrieval: RetrievalReport,
}

struct Prepared {
    table: PatchTable,
    video: Vec<Vec<u32>>,
    context: Vec<Vec<u32>>,
    tokens: Vec<Vec<usize>>,
}

fn prepare(vocab: &Vocabulary, corpus: &Corpus, k: usize) -> Result<Prepared, Error> {
    let cfg = vocab.render_config();
    let sorted = vocab.tokens();
    let mut p = Prepared { table: PatchTable::default(), video: Vec::new(), context: Vec::new(), tokens: Vec::new() };
    for it in &corpus.items {
        let mut v = Vec::with_capacity(k * CELLS);
        for img in it.video(&cfg, k)? {
            v.extend(p.table.intern(&img));
        }
        let mut c = Vec::with_capacity(2 * CELLS);
        for img in it.context(&cfg) {
            c.extend(p.table.intern(&img));
        }
        let ids = tokenize(&it.caption)
            .iter()
            .map(|t| sorted.binary_search(t).map_err(|_| Error::Vocab(format!("corpus token {t:?} is not in the vocabulary"))))
            .collect::<Result<Vec<_>, _>>()?;
        if ids.is_empty() {
            return Err(Error::Precondition("corpus item has an empty caption".into()));
        }
        p.video.push(v);
        p.context.push(c);
        p.tokens.push(ids);
    }
    Ok(p)
}

/// Groups in random order with each group's items kept together, so batches
/// hold same-scene hard negatives.
fn epoch_order(corpus: &Corpus, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, it) in corpus.items.iter().enumerate() {
        match groups.last_mut() {
            Some(g) if corpus.items[g[0]].group == it.group => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups.shuffle(rng);
    groups.concat()
}

fn train_step(nets: &LearnedNets, p: &Prepared, batch: &[usize], k: usize, temperature: f64) -> Result<(f64, Vec<Vec<Tensor>>), Error> {
    let bsz = batch.len();
    let images: Vec<&[u32]> = batch
        .iter()
        .flat_map(|&i| p.video[i].chunks(CELLS))
        .chain(batch.iter().flat_map(|&i| p.context[i].chunks(CELLS)))
        .collect();
    let (uniq, cells) = localize(&images);
    let mut seg: Vec<usize> = (0..bsz).flat_map(|b| std::iter::repeat_n(b, k)).collect();
    seg.extend((0..bsz).flat_map(|b| std::iter::repeat_n(bsz + b, 2)));
    let ids: Vec<usize> = batch.iter().flat_map(|&i| p.tokens[i].iter().copied()).collect();
    let tseg: Vec<usize> = batch.iter().enumerate().flat_map(|(b, &i)| std::iter::repeat_n(b, p.tokens[i].len())).collect();

    let mut tape = Tape::new();
    let b = nets.bind(&mut tape);
    let f = nets.frames_on_tape(&mut tape, &b, p.table.rows(&uniq), &cells)?;
    let pooled = tape.segment_mean(f, &seg, 2 * bsz)?;
    let vid = tape.gather_rows(pooled, &(0..bsz).collect::<Vec<_>>())?;
    let ctx = tape.gather_rows(pooled, &(bsz..2 * bsz).collect::<Vec<_>>())?;
    let text = nets.text_on_tape(&mut tape, &b, &ids, &tseg, bsz)?;
    let zeros = tape.leaf(Tensor::zeros(&[bsz, FEATURE_DIM]));
    let vin = tape.concat_cols(&[vid, zeros])?;
    let qin = tape.concat_cols(&[ctx, text])?;
    let zv = nets.embed_on_tape(&mut tape, &b, vin)?;
    let zq = nets.embed_on_tape(&mut tape, &b, qin)?;
    let loss = contrastive_on_tape(&mut tape, zv, zq, temperature)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let grads = tape.backward(loss)?;
    let per_net = [(&nets.patch, &b.patch), (&nets.readout, &b.readout), (&nets.text, &b.text), (&nets.backbone, &b.backbone)]
        .iter()
        .map(|(net, vars)| net.params().iter().zip(vars.iter()).map(|(p, v)| grads.get_or_zeros(*v, p.shape())).collect())
        .collect();
    Ok((value, per_net))
}

/// Trains a fresh learned encoder on `corpus` and reports held-out retrieval.
pub fn pretrain_encoder(
    vocab: &Vocabulary,
    corpus: &Corpus,
    cfg: &PretrainConfig,
) -> Result<(GroundedEncoder, PretrainReport), Error> {
    if cfg.batch_size < 2 || cfg.epochs == 0 || cfg.keyframes == 0 {
        return Err(Error::Config("pretraining needs batch_size >= 2, epochs >= 1 and keyframes >= 1".into()));
    }
    if corpus.items.len() < cfg.batch_size {
        return Err(Error::Precondition(format!(
            "corpus has {} items, fewer than one batch of {}",
            corpus.items.len(),
            cfg.batch_size
        )));
    }
    let started = Instant::now();
    let render = vocab.render_config();
    let prepared = prepare(vocab, corpus, cfg.keyframes)?;
    let mut nets = LearnedNets::init(vocab.tokens().len(), cfg.seed)?;
    let steps_per_epoch = corpus.items.len() / cfg.batch_size;
    let opt_cfg = OptConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        max_steps: (steps_per_epoch * cfg.epochs) as u64,
        min_lr: cfg.lr * 0.02,
        beta2: 0.99,
        ..OptConfig::default()
    };
    let mut opts: Vec<OptState> =
        nets.networks().iter().map(|n| OptState::new(opt_cfg, n.params())).collect::<Result<_, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        let order = epoch_order(corpus, &mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for batch in order.chunks_exact(cfg.batch_size) {
            let (loss, grads) = train_step(&nets, &prepared, batch, cfg.keyframes, cfg.temperature)?;
            if !loss.is_finite() {
                return Err(Error::Precondition(format!("contrastive loss became {loss} at step {step}")));
            }
            for ((net, opt), g) in nets.networks_mut().into_iter().zip(opts.iter_mut()).zip(grads) {
                opt.update(net.params_mut(), &g)?;
            }
            total += loss;
            count += 1;
            step += 1;
        }
        epoch_loss.push(total / count as f64);
    }
    for net in nets.networks_mut() {
        net.quantize_f32();
    }
    let enc = GroundedEncoder::learned(vocab, &render, cfg.temperature, nets);
    let retrieval = retrieval_eval(&enc, cfg.eval_scenes, corpus.horizon, cfg.keyframes, cfg.seed ^ 0x5eed)?;
    let report = PretrainReport {
        items: corpus.items.len(),
        steps: step,
        epoch_loss,
        seconds: started.elapsed().as_secs_f64(),
        retrieval,
    };
    Ok((enc, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grounding::generate_pretraining_corpus;
    use crate::world::{make_scene, render, ResetMode, SceneSpec};

    #[test]
    fn patches_tile_the_image() {
        let v = Vocabulary::standard();
        let s = make_scene(&SceneSpec::in_slot_order([1, 3, 5, 7], [0, 4, 8]), 2, ResetMode::Evaluation).unwrap();
        let img = render(&s, &v.render_config());
        let p = patches_of(&img);
        assert_eq!(p.len(), img.data.len());
        let mut sorted_a = p.clone();
        let mut sorted_b = img.data.clone();
        sorted_a.sort_unstable();
        sorted_b.sort_unstable();
        assert_eq!(sorted_a, sorted_b);
        let mut table = PatchTable::default();
        let ids = table.intern(&img);
        assert!(table.index.len() < CELLS);
        assert_eq!(table.rows(&ids[..1]).data()[0], f64::from(img.data[0]) / 255.0);
    }

    #[test]
    fn batched_and_single_frame_encoding_agree() {
        let v = Vocabulary::standard();
        let nets = LearnedNets::init(v.tokens().len(), 4).unwrap();
        let corpus = generate_pretraining_corpus(&v, 6, 12, 1).unwrap();
        let imgs: Vec<Image> = corpus.items.iter().flat_map(|it| it.context(&v.render_config())).collect();
        let all = nets.encode_frames(&imgs).unwrap();
        for (img, f) in imgs.iter().zip(&all) {
            let one = nets.encode_frames(std::slice::from_ref(img)).unwrap();
            for (a, b) in one[0].iter().zip(f) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn short_pretraining_lowers_the_loss_and_round_trips() {
        let v = Vocabulary::standard();
        let corpus = generate_pretraining_corpus(&v, 512, 12, 3).unwrap();
        let cfg = PretrainConfig { epochs: 3, batch_size: 32, eval_scenes: 4, ..PretrainConfig::default() };
        let (enc, report) = pretrain_encoder(&v, &corpus, &cfg).unwrap();
        assert_eq!(report.epoch_loss.len(), 3);
        assert!(report.epoch_loss[2] < report.epoch_loss[0], "{:?}", report.epoch_loss);
        let back = GroundedEncoder::read_from(&mut enc.to_bytes().as_slice()).unwrap();
        assert_eq!(back, enc);
        assert_eq!(back.hash(), enc.hash());
    }
}
