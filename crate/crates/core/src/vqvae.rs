//! Stage-1 motion autoencoder with a discrete codebook.
//!
//! Frames are embedded per frame, mixed by transformer blocks, snapped to the
//! nearest codebook row and decoded back to 53-dim animation frames.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, SplitName};
use crate::error::{config_err, shape_err, Error, Result};
use crate::flame::FRAME_DIM;
use crate::motion::MotionSequence;
use crate::numerics::nn::positional_encoding;
use crate::numerics::{Grads, Graph, Linear, ParamStore, Tensor, TransformerBlock, Var};
use crate::train::{fit, Objective, TrainConfig, TrainLog};
use crate::{rng_for, Scalar};

pub const CODEBOOK: &str = "vq.codebook";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqConfig {
    /// Latent channels `C`.
    pub channels: usize,
    /// Codebook entries `N`.
    pub codes: usize,
    pub heads: usize,
    /// Transformer blocks in each of encoder and decoder.
    pub blocks: usize,
    /// Commitment weight.
    pub beta: f64,
    /// Add a sinusoidal position table to encoder and decoder inputs.
    pub positional: bool,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            codes: 256,
            heads: 4,
            blocks: 2,
            beta: 0.25,
            positional: true,
        }
    }
}

impl VqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.codes < 2 {
            return Err(config_err!("codebook needs at least 2 entries"));
        }
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(config_err!(
                "{} channels not divisible by {} heads",
                self.channels,
                self.heads
            ));
        }
        if !(self.beta >= 0.0) {
            return Err(config_err!("beta must be non-negative"));
        }
        Ok(())
    }
}

/// `N × C` matrix of codes.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<S> {
    codes: Tensor<S>,
}

impl<S: Scalar> Codebook<S> {
    pub fn new(codes: Tensor<S>) -> Result<Self> {
        if codes.dims().len() != 2 {
            return Err(shape_err!("codebook must be a matrix, got {:?}", codes.dims()));
        }
        if codes.rows() == 0 {
            return Err(Error::Input("empty codebook".into()));
        }
        if !codes.is_finite() {
            return Err(Error::Input("codebook has non-finite entries".into()));
        }
        Ok(Self { codes })
    }

    pub fn len(&self) -> usize {
        self.codes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.rows() == 0
    }

    pub fn channels(&self) -> usize {
        self.codes.cols()
    }

    pub fn codes(&self) -> &Tensor<S> {
        &self.codes
    }

    pub fn code(&self, k: usize) -> &[S] {
        self.codes.row(k)
    }

    /// Squared distances from `z` to every code.
    pub fn distances(&self, z: &[S]) -> Vec<S> {
        (0..self.len())
            .map(|k| {
                self.code(k)
                    .iter()
                    .zip(z)
                    .map(|(&c, &x)| (x - c) * (x - c))
                    .sum::<S>()
            })
            .collect()
    }

    /// Index of the nearest code; ties go to the lowest index.
    pub fn nearest(&self, z: &[S]) -> usize {
        let mut best = 0;
        let mut best_d = S::infinity();
        for (k, d) in self.distances(z).into_iter().enumerate() {
            if d < best_d {
                best = k;
                best_d = d;
            }
        }
        best
    }

    /// Per-row nearest codes of a `T × C` latent.
    pub fn quantize(&self, z: &Tensor<S>) -> Result<Quantized<S>> {
        if z.cols() != self.channels() {
            return Err(shape_err!(
                "latent width {} vs codebook width {}",
                z.cols(),
                self.channels()
            ));
        }
        let indices: Vec<usize> = (0..z.rows()).map(|t| self.nearest(z.row(t))).collect();
        let codes = self.lookup(&indices)?;
        Ok(Quantized { indices, codes })
    }

    pub fn lookup(&self, indices: &[usize]) -> Result<Tensor<S>> {
        let mut data = Vec::with_capacity(indices.len() * self.channels());
        for &i in indices {
            if i >= self.len() {
                return Err(shape_err!("code index {i} out of {}", self.len()));
            }
            data.extend_from_slice(self.code(i));
        }
        Tensor::matrix(indices.len(), self.channels(), data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Quantized<S> {
    pub indices: Vec<usize>,
    /// `T × C` selected code rows.
    pub codes: Tensor<S>,
}

/// `T × C` latents with optional code indices.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    pub latents: Tensor<f32>,
    pub indices: Option<Vec<usize>>,
}

/// Graph nodes of one stage-1 loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Loss {
    pub total: Var,
    pub recon: Var,
    pub codebook: Var,
    pub commit: Var,
}

/// Encoder, codebook and decoder with parameter names under `vq.`.
#[derive(Clone, Debug)]
pub struct VqVae {
    pub cfg: VqConfig,
    enc_in: Linear,
    enc: Vec<TransformerBlock>,
    dec: Vec<TransformerBlock>,
    dec_out: Linear,
}

impl VqVae {
    pub fn new(cfg: VqConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let blocks = |side: &str| -> Result<Vec<TransformerBlock>> {
            (0..cfg.blocks)
                .map(|i| TransformerBlock::new(&format!("vq.{side}.block{i}"), c, cfg.heads))
                .collect()
        };
        Ok(Self {
            enc_in: Linear::new("vq.enc.in", FRAME_DIM, c),
            enc: blocks("enc")?,
            dec: blocks("dec")?,
            dec_out: Linear::new("vq.dec.out", c, FRAME_DIM),
            cfg,
        })
    }

    pub fn init<S: Scalar, R: Rng>(&self, ps: &mut ParamStore<S>, rng: &mut R) -> Result<()> {
        self.enc_in.init(ps, rng)?;
        for b in self.enc.iter().chain(&self.dec) {
            b.init(ps, rng)?;
        }
        self.dec_out.init(ps, rng)?;
        let bound = 1.0 / (self.cfg.channels as f64).sqrt();
        ps.insert_range(CODEBOOK, &[self.cfg.codes, self.cfg.channels], bound, rng)
    }

    pub fn codebook<S: Scalar>(&self, ps: &ParamStore<S>) -> Result<Codebook<S>> {
        let t = ps
            .get(CODEBOOK)
            .ok_or_else(|| Error::State(format!("missing parameter '{CODEBOOK}'")))?;
        if t.dims() != [self.cfg.codes, self.cfg.channels] {
            return Err(shape_err!("codebook shape {:?} does not match config", t.dims()));
        }
        Codebook::new(t.clone())
    }

    fn with_position<S: Scalar>(&self, g: &mut Graph<S>, h: Var) -> Result<Var> {
        if !self.cfg.positional {
            return Ok(h);
        }
        let t = g.value(h).rows();
        let pe = g.input(positional_encoding(t, self.cfg.channels))?;
        g.add(h, pe)
    }

    /// `T × 53 → T × C`.
    pub fn encode_graph<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: Var) -> Result<Var> {
        if g.value(x).rows() == 0 {
            return Err(Error::Input("cannot encode an empty sequence".into()));
        }
        let mut h = self.enc_in.forward(g, ps, x)?;
        h = self.with_position(g, h)?;
        for b in &self.enc {
            h = b.forward(g, ps, h)?;
        }
        Ok(h)
    }

    /// `T × C → T × 53`.
    pub fn decode_graph<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, z: Var) -> Result<Var> {
        if g.value(z).rows() == 0 {
            return Err(Error::Input("cannot decode an empty sequence".into()));
        }
        let mut h = self.with_position(g, z)?;
        for b in &self.dec {
            h = b.forward(g, ps, h)?;
        }
        self.dec_out.forward(g, ps, h)
    }

    /// Straight-through quantization of `z`. Returns `(z + sg(z_q − z), z_q,
    /// indices)`; indices are taken from a detached copy of `z` so replayed
    /// evaluations select the same codes.
    pub fn quantize_graph<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        z: Var,
    ) -> Result<(Var, Var, Vec<usize>)> {
        let book_var = g.param(ps, CODEBOOK)?;
        let book = Codebook::new(g.value(book_var).clone())?;
        let zs = g.stop_gradient(z)?;
        let indices = book.quantize(g.value(zs))?.indices;
        let zq = g.gather_rows(book_var, &indices)?;
        let diff = g.sub(zq, z)?;
        let diff = g.stop_gradient(diff)?;
        let st = g.add(z, diff)?;
        Ok((st, zq, indices))
    }

    /// Reconstruction, codebook and weighted commitment terms on one sequence.
    pub fn stage1_loss<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        x: &Tensor<S>,
    ) -> Result<Stage1Loss> {
        if x.cols() != FRAME_DIM {
            return Err(shape_err!("motion width {} is not {FRAME_DIM}", x.cols()));
        }
        let xv = g.input(x.clone())?;
        let z = self.encode_graph(g, ps, xv)?;
        let (st, zq, _) = self.quantize_graph(g, ps, z)?;
        let recon_x = self.decode_graph(g, ps, st)?;
        let recon = g.mse(recon_x, xv)?;
        let z_sg = g.stop_gradient(z)?;
        let codebook = g.mse(z_sg, zq)?;
        let zq_sg = g.stop_gradient(zq)?;
        let commit = g.mse(z, zq_sg)?;
        let weighted = g.scale(commit, S::of(self.cfg.beta))?;
        let total = g.add(recon, codebook)?;
        let total = g.add(total, weighted)?;
        Ok(Stage1Loss {
            total,
            recon,
            codebook,
            commit,
        })
    }

    pub fn encode(&self, ps: &ParamStore<f32>, x: &MotionSequence) -> Result<LatentSequence> {
        let mut g = Graph::new();
        let xv = g.input(x.to_tensor())?;
        let z = self.encode_graph(&mut g, ps, xv)?;
        Ok(LatentSequence {
            latents: g.value(z).clone(),
            indices: None,
        })
    }

    pub fn quantize(&self, ps: &ParamStore<f32>, z: &LatentSequence) -> Result<LatentSequence> {
        let q = self.codebook(ps)?.quantize(&z.latents)?;
        Ok(LatentSequence {
            latents: q.codes,
            indices: Some(q.indices),
        })
    }

    pub fn decode(&self, ps: &ParamStore<f32>, zq: &LatentSequence) -> Result<MotionSequence> {
        let mut g = Graph::new();
        let z = g.input(zq.latents.clone())?;
        let x = self.decode_graph(&mut g, ps, z)?;
        MotionSequence::from_tensor(g.value(x))
    }

    pub fn reconstruct(&self, ps: &ParamStore<f32>, x: &MotionSequence) -> Result<MotionSequence> {
        let z = self.encode(ps, x)?;
        self.decode(ps, &self.quantize(ps, &z)?)
    }

    /// Fraction of codebook entries selected at least once over `seqs`.
    pub fn code_usage(&self, ps: &ParamStore<f32>, seqs: &[&MotionSequence]) -> Result<f64> {
        let mut used = vec![false; self.cfg.codes];
        for s in seqs {
            let q = self.quantize(ps, &self.encode(ps, s)?)?;
            for i in q.indices.unwrap_or_default() {
                used[i] = true;
            }
        }
        Ok(used.iter().filter(|&&u| u).count() as f64 / used.len() as f64)
    }

    /// Stage-1 parameters of `ps`, keyed by name.
    pub fn tensors<S: Scalar>(ps: &ParamStore<S>) -> BTreeMap<String, Tensor<S>> {
        ps.subset("vq.").into_values()
    }
}

/// Stage-1 objective over motion sequences.
pub struct Stage1Objective<'a> {
    pub model: &'a VqVae,
    pub train: Vec<Tensor<f32>>,
    pub val: Vec<Tensor<f32>>,
}

impl Stage1Objective<'_> {
    fn loss(&self, ps: &ParamStore<f32>, x: &Tensor<f32>, grads: bool) -> Result<(f64, Option<Grads<f32>>)> {
        let mut g = Graph::new();
        let l = self.model.stage1_loss(&mut g, ps, x)?;
        let value = g.value(l.total).item() as f64;
        let grads = if grads { Some(g.backward(l.total)?) } else { None };
        Ok((value, grads))
    }
}

impl Objective for Stage1Objective<'_> {
    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn val_len(&self) -> usize {
        self.val.len()
    }

    fn train_step(&self, ps: &ParamStore<f32>, item: usize) -> Result<(f64, Grads<f32>)> {
        let (l, g) = self.loss(ps, &self.train[item], true)?;
        Ok((l, g.expect("gradients requested")))
    }

    fn train_loss(&self, ps: &ParamStore<f32>, item: usize) -> Result<f64> {
        Ok(self.loss(ps, &self.train[item], false)?.0)
    }

    fn val_loss(&self, ps: &ParamStore<f32>, item: usize) -> Result<f64> {
        Ok(self.loss(ps, &self.val[item], false)?.0)
    }
}

/// Initializes a fresh stage-1 model from `seed` and trains it on the train
/// split, early-stopping on the validation split.
pub fn train_stage1(
    corpus: &Corpus,
    cfg: &VqConfig,
    train: &TrainConfig,
) -> Result<(VqVae, ParamStore<f32>, TrainLog)> {
    let model = VqVae::new(cfg.clone())?;
    let mut ps = ParamStore::new();
    model.init(&mut ps, &mut rng_for(train.seed, 0x5747_0001))?;
    let seqs = |split: SplitName| -> Vec<Tensor<f32>> {
        corpus.items_in(split).iter().map(|i| i.motion_gt.to_tensor()).collect()
    };
    let obj = Stage1Objective {
        model: &model,
        train: seqs(SplitName::Train),
        val: seqs(SplitName::Val),
    };
    let log = fit(&obj, &mut ps, train, "stage1")?;
    Ok((model, ps, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::GradCheck;
    use crate::rng_for;

    fn book(rows: &[[f64; 2]]) -> Codebook<f64> {
        let data = rows.iter().flatten().copied().collect();
        Codebook::new(Tensor::matrix(rows.len(), 2, data).unwrap()).unwrap()
    }

    #[test]
    fn quantize_examples() {
        let b = book(&[[0.0, 0.0], [1.0, 1.0]]);
        let q = b.quantize(&Tensor::from_rows(&[vec![0.9, 0.9]]).unwrap()).unwrap();
        assert_eq!(q.indices, vec![1]);
        assert_eq!(q.codes.data(), &[1.0, 1.0]);
        let exact = b.quantize(&Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap()).unwrap();
        assert_eq!(exact.indices, vec![1]);
        let tie = b.quantize(&Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap()).unwrap();
        assert_eq!(tie.indices, vec![0]);
    }

    #[test]
    fn empty_codebook_and_width_mismatch() {
        assert!(Codebook::<f64>::new(Tensor::zeros(&[0, 2])).is_err());
        let b = book(&[[0.0, 0.0], [1.0, 1.0]]);
        assert!(b.quantize(&Tensor::zeros(&[1, 3])).is_err());
    }

    fn tiny_cfg() -> VqConfig {
        VqConfig {
            channels: 4,
            codes: 6,
            heads: 2,
            blocks: 1,
            ..VqConfig::default()
        }
    }

    fn motion(t: usize, seed: u64) -> Tensor<f64> {
        let mut rng = rng_for(seed, 3);
        let data = (0..t * FRAME_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::matrix(t, FRAME_DIM, data).unwrap()
    }

    #[test]
    fn shapes_and_determinism() {
        let vq = VqVae::new(tiny_cfg()).unwrap();
        let mut ps = ParamStore::<f32>::new();
        vq.init(&mut ps, &mut rng_for(1, 0)).unwrap();
        for t in [1, 5] {
            let x = MotionSequence::from_tensor(&motion(t, t as u64)).unwrap();
            let z = vq.encode(&ps, &x).unwrap();
            assert_eq!(z.latents.dims(), &[t, 4]);
            assert_eq!(z, vq.encode(&ps, &x).unwrap());
            let r = vq.reconstruct(&ps, &x).unwrap();
            assert_eq!(r.frames, t);
        }
    }

    #[test]
    fn perfect_autoencoder_has_zero_loss() {
        let cfg = VqConfig {
            channels: FRAME_DIM,
            codes: 3,
            heads: 1,
            blocks: 0,
            positional: false,
            ..VqConfig::default()
        };
        let vq = VqVae::new(cfg).unwrap();
        let x = motion(3, 9);
        let mut eye = vec![0.0; FRAME_DIM * FRAME_DIM];
        (0..FRAME_DIM).for_each(|i| eye[i * FRAME_DIM + i] = 1.0);
        let mut ps = ParamStore::<f64>::new();
        for name in ["vq.enc.in", "vq.dec.out"] {
            ps.insert(format!("{name}.w"), Tensor::new(vec![FRAME_DIM, FRAME_DIM], eye.clone()).unwrap())
                .unwrap();
            ps.insert(format!("{name}.b"), Tensor::zeros(&[FRAME_DIM])).unwrap();
        }
        ps.insert(CODEBOOK, x.clone()).unwrap();
        let mut g = Graph::new();
        let l = vq.stage1_loss(&mut g, &ps, &x).unwrap();
        for v in [l.total, l.recon, l.codebook, l.commit] {
            assert_eq!(g.value(v).item(), 0.0);
        }
    }

    #[test]
    fn components_are_additive_and_beta_zero_drops_commitment() {
        let x = motion(4, 2);
        let mut ps = ParamStore::<f64>::new();
        VqVae::new(tiny_cfg()).unwrap().init(&mut ps, &mut rng_for(2, 0)).unwrap();
        for beta in [0.25, 0.0] {
            let vq = VqVae::new(VqConfig { beta, ..tiny_cfg() }).unwrap();
            let mut g = Graph::new();
            let l = vq.stage1_loss(&mut g, &ps, &x).unwrap();
            let parts = g.value(l.recon).item() + g.value(l.codebook).item() + beta * g.value(l.commit).item();
            assert!((g.value(l.total).item() - parts).abs() < 1e-12);
            assert!(g.value(l.commit).item() > 0.0);
        }
    }

    #[test]
    fn straight_through_reaches_the_encoder() {
        let vq = VqVae::new(tiny_cfg()).unwrap();
        let mut ps = ParamStore::<f64>::new();
        vq.init(&mut ps, &mut rng_for(4, 0)).unwrap();
        let x = motion(3, 4);

        let mut g = Graph::new();
        let l = vq.stage1_loss(&mut g, &ps, &x).unwrap();
        let grads = g.backward(l.recon).unwrap();
        let w = grads.param("vq.enc.in.w").unwrap();
        assert!(w.data().iter().any(|&v| v != 0.0));

        let mut g = Graph::new();
        let xv = g.input(x.clone()).unwrap();
        let z = vq.encode_graph(&mut g, &ps, xv).unwrap();
        let (_, zq, _) = vq.quantize_graph(&mut g, &ps, z).unwrap();
        let blocked = g.stop_gradient(zq).unwrap();
        let r = vq.decode_graph(&mut g, &ps, blocked).unwrap();
        let recon = g.mse(r, xv).unwrap();
        let grads = g.backward(recon).unwrap();
        assert!(grads.param("vq.enc.in.w").map_or(true, |w| w.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn stage1_loss_gradients_match_finite_differences() {
        let vq = VqVae::new(tiny_cfg()).unwrap();
        let mut ps = ParamStore::<f64>::new();
        vq.init(&mut ps, &mut rng_for(5, 0)).unwrap();
        let x = motion(3, 5);
        let report = GradCheck::default()
            .run(&ps, |g, p| Ok(vq.stage1_loss(g, p, &x)?.total))
            .unwrap();
        assert!(report.passed(), "{:?}", report.violations.first());
    }
}
