//! Speech-aware identity-emotion encoder, stage-2 training and sampling.
//!
//! The encoder maps aligned motion features, emotion features and a neutral
//! face shape to `T × C` latents in the frozen stage-1 space. Generation
//! snaps each latent frame to a codebook row, either the nearest one or a
//! draw from a softmax over negative squared distances, and decodes with the
//! frozen stage-1 decoder.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusItem, SplitName};
use crate::error::{config_err, shape_err, Error, Result};
use crate::features::IdentityEncoder;
use crate::flame::NeutralShape;
use crate::hifb::{style_vector, GateFusion, Hifb, HifbConfig, StyleModulator, StyleVectorFusion, XAttnFusion};
use crate::motion::MotionSequence;
use crate::numerics::{checkpoint, Grads, Graph, Linear, ParamStore, Tensor, Var};
use crate::train::{fit, Objective, TrainConfig, TrainLog};
use crate::vqvae::{Codebook, VqConfig, VqVae};
use crate::{rng_for, Scalar};

/// Weight of the frame-difference term of the stage-2 loss.
pub const VELOCITY_WEIGHT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    StyleVector,
    Gate,
    XattnLate,
    Hifb,
}

/// Which conditioning streams reach the encoder. Disabled streams are
/// replaced by zeros at the same width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Representation {
    NoStyle,
    EmotionOnly,
    EmotionIdentity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SieConfig {
    /// Width of both feature streams.
    pub feature_dim: usize,
    pub d_id: usize,
    pub id_hidden: usize,
    pub fusion: FusionMode,
    pub representation: Representation,
    pub hifb: HifbConfig,
}

impl Default for SieConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            d_id: 32,
            id_hidden: 128,
            fusion: FusionMode::Hifb,
            representation: Representation::EmotionIdentity,
            hifb: HifbConfig::default(),
        }
    }
}

impl SieConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.d_id == 0 || self.id_hidden == 0 {
            return Err(config_err!("feature_dim, d_id and id_hidden must be positive"));
        }
        if self.representation == Representation::NoStyle && self.fusion != FusionMode::StyleVector {
            return Err(config_err!("{:?} fusion needs an emotion stream", self.fusion));
        }
        self.hifb.validate()
    }
}

/// Encoder inputs for one utterance. There is no label anywhere: emotion
/// comes only from features and identity only from the neutral shape.
#[derive(Clone, Debug, PartialEq)]
pub struct SieInput<S> {
    /// `T × d` motion features at the animation rate.
    pub motion: Tensor<S>,
    /// `T × d` emotion features at the animation rate.
    pub emotion: Tensor<S>,
    pub shape: NeutralShape,
}

impl<S: Scalar> SieInput<S> {
    pub fn from_item(item: &CorpusItem, shape: &NeutralShape) -> Result<Self> {
        let (m, e) = item.aligned_features()?;
        Ok(Self {
            motion: m.to_tensor(),
            emotion: e.to_tensor(),
            shape: shape.clone(),
        })
    }

    pub fn frames(&self) -> usize {
        self.motion.rows()
    }
}

/// Counts of conditioning-stream reads made by an encoder.
#[derive(Debug, Default)]
pub struct AccessCounters {
    emotion: AtomicU64,
    identity: AtomicU64,
}

impl AccessCounters {
    /// Emotion feature reads.
    pub fn emotion(&self) -> u64 {
        self.emotion.load(Ordering::Relaxed)
    }

    /// Identity embedding evaluations.
    pub fn identity(&self) -> u64 {
        self.identity.load(Ordering::Relaxed)
    }
}

#[derive(Clone, Debug)]
enum FusionNet {
    StyleVector(StyleVectorFusion),
    Gate(StyleModulator, GateFusion),
    XattnLate(StyleModulator, XAttnFusion),
    Hifb(StyleModulator, Hifb),
}

/// Encoder with parameters under `sie.`.
#[derive(Debug)]
pub struct SieEncoder {
    pub cfg: SieConfig,
    pub latent_dim: usize,
    identity: IdentityEncoder,
    fusion: FusionNet,
    head: Linear,
    counters: AccessCounters,
}

impl SieEncoder {
    pub fn new(cfg: SieConfig, latent_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let (dm, d_id, h) = (cfg.feature_dim, cfg.d_id, cfg.hifb.clone());
        let modulator = || StyleModulator::new("sie.mod", dm, dm, d_id, h.d);
        let fusion = match cfg.fusion {
            FusionMode::StyleVector => {
                FusionNet::StyleVector(StyleVectorFusion::new("sie.style_vector", h.clone(), dm, dm, d_id)?)
            }
            FusionMode::Gate => FusionNet::Gate(modulator(), GateFusion::new("sie.gate", h.clone())?),
            FusionMode::XattnLate => FusionNet::XattnLate(modulator(), XAttnFusion::new("sie.xattn", h.clone())?),
            FusionMode::Hifb => FusionNet::Hifb(modulator(), Hifb::new("sie.hifb", h.clone())?),
        };
        Ok(Self {
            identity: IdentityEncoder::new("sie.id", cfg.id_hidden, d_id),
            head: Linear::new("sie.head", h.d, latent_dim),
            fusion,
            latent_dim,
            cfg,
            counters: AccessCounters::default(),
        })
    }

    pub fn init<S: Scalar, R: Rng>(&self, ps: &mut ParamStore<S>, rng: &mut R) -> Result<()> {
        self.identity.init(ps, rng)?;
        match &self.fusion {
            FusionNet::StyleVector(f) => f.init(ps, rng)?,
            FusionNet::Gate(m, f) => {
                m.init(ps, rng)?;
                f.init(ps, rng)?
            }
            FusionNet::XattnLate(m, f) => {
                m.init(ps, rng)?;
                f.init(ps, rng)?
            }
            FusionNet::Hifb(m, f) => {
                m.init(ps, rng)?;
                f.init(ps, rng)?
            }
        }
        self.head.init(ps, rng)
    }

    pub fn counters(&self) -> &AccessCounters {
        &self.counters
    }

    fn z_id<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, shape: &NeutralShape) -> Result<Var> {
        let x = match self.cfg.representation {
            Representation::NoStyle => return g.input(Tensor::zeros(&[1, self.cfg.d_id])),
            Representation::EmotionOnly => IdentityEncoder::shape_input(&NeutralShape::zeros()),
            Representation::EmotionIdentity => IdentityEncoder::shape_input(shape),
        };
        self.counters.identity.fetch_add(1, Ordering::Relaxed);
        let x = g.input(x)?;
        self.identity.forward(g, ps, x)
    }

    fn emotion<S: Scalar>(&self, g: &mut Graph<S>, input: &SieInput<S>) -> Result<Var> {
        if self.cfg.representation == Representation::NoStyle {
            return g.input(Tensor::zeros(&[input.frames(), self.cfg.feature_dim]));
        }
        self.counters.emotion.fetch_add(1, Ordering::Relaxed);
        g.input(input.emotion.clone())
    }

    /// Pre-quantization latents, `T × C`.
    pub fn forward_graph<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, input: &SieInput<S>) -> Result<Var> {
        let t = input.frames();
        if t == 0 {
            return Err(Error::Input("empty feature sequence".into()));
        }
        let d = self.cfg.feature_dim;
        if input.motion.cols() != d || input.emotion.cols() != d {
            return Err(shape_err!(
                "feature widths ({}, {}) do not match configured {d}",
                input.motion.cols(),
                input.emotion.cols()
            ));
        }
        if input.emotion.rows() != t {
            return Err(shape_err!("motion features have {t} frames, emotion {}", input.emotion.rows()));
        }
        let m = g.input(input.motion.clone())?;
        let e = self.emotion(g, input)?;
        let z = self.z_id(g, ps, &input.shape)?;
        let fused = match &self.fusion {
            FusionNet::StyleVector(f) => {
                let s = style_vector(g, e, z)?;
                f.forward(g, ps, m, s)?
            }
            FusionNet::Gate(modu, f) => {
                let (mt, et) = modu.forward(g, ps, m, e, z)?;
                f.forward(g, ps, mt, et)?
            }
            FusionNet::XattnLate(modu, f) => {
                let (mt, et) = modu.forward(g, ps, m, e, z)?;
                f.forward(g, ps, mt, et)?
            }
            FusionNet::Hifb(modu, f) => {
                let (mt, et) = modu.forward(g, ps, m, e, z)?;
                f.forward(g, ps, mt, et)?
            }
        };
        self.head.forward(g, ps, fused)
    }

    pub fn forward(&self, ps: &ParamStore<f32>, input: &SieInput<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let z = self.forward_graph(&mut g, ps, input)?;
        Ok(g.value(z).clone())
    }
}

/// Stage-2 loss on one item: decoder-space MSE plus weighted MSE of frame
/// differences, through the frozen quantizer and decoder.
pub fn stage2_loss<S: Scalar>(
    g: &mut Graph<S>,
    vq: &VqVae,
    vq_ps: &ParamStore<S>,
    sie: &SieEncoder,
    sie_ps: &ParamStore<S>,
    input: &SieInput<S>,
    target: &Tensor<S>,
) -> Result<Var> {
    if target.rows() != input.frames() {
        return Err(shape_err!(
            "target has {} frames, features {}",
            target.rows(),
            input.frames()
        ));
    }
    let z = sie.forward_graph(g, sie_ps, input)?;
    let (st, _, _) = vq.quantize_graph(g, vq_ps, z)?;
    let x = vq.decode_graph(g, vq_ps, st)?;
    let y = g.input(target.clone())?;
    let loss = g.mse(x, y)?;
    let t = target.rows();
    if t < 2 {
        return Ok(loss);
    }
    let vel = |g: &mut Graph<S>, a: Var| -> Result<Var> {
        let late = g.slice_rows(a, 1, t)?;
        let early = g.slice_rows(a, 0, t - 1)?;
        g.sub(late, early)
    };
    let vx = vel(g, x)?;
    let vy = vel(g, y)?;
    let v = g.mse(vx, vy)?;
    let v = g.scale(v, S::of(VELOCITY_WEIGHT))?;
    g.add(loss, v)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            samples: 10,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(config_err!("temperature must be finite and non-negative"));
        }
        if self.samples == 0 {
            return Err(config_err!("sample count must be at least 1"));
        }
        Ok(())
    }
}

/// Code index per latent row: the nearest code when `temperature == 0`,
/// otherwise a draw from `softmax(−d² / temperature)`.
pub fn sample_indices<R: Rng>(
    book: &Codebook<f32>,
    z: &Tensor<f32>,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if !(temperature >= 0.0) {
        return Err(config_err!("temperature must be non-negative"));
    }
    if z.cols() != book.channels() {
        return Err(shape_err!("latent width {} vs codebook {}", z.cols(), book.channels()));
    }
    (0..z.rows())
        .map(|t| {
            if temperature == 0.0 {
                return Ok(book.nearest(z.row(t)));
            }
            let d: Vec<f64> = book.distances(z.row(t)).iter().map(|&x| x as f64).collect();
            let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
            let w: Vec<f64> = d.iter().map(|&x| (-(x - lo) / temperature).exp()).collect();
            let dist = WeightedIndex::new(&w).map_err(|e| Error::NonFinite(format!("sampling weights: {e}")))?;
            Ok(dist.sample(rng))
        })
        .collect()
}

/// Frozen stage-1 model and trained encoder, ready for generation.
pub struct Pipeline {
    pub vq: VqVae,
    pub vq_params: ParamStore<f32>,
    pub sie: SieEncoder,
    pub sie_params: ParamStore<f32>,
}

impl Pipeline {
    /// `n` decoded samples; sample `k` draws from stream `k` of `seed`.
    pub fn generate(&self, input: &SieInput<f32>, sampler: &SamplerConfig) -> Result<Vec<MotionSequence>> {
        sampler.validate()?;
        let z = self.sie.forward(&self.sie_params, input)?;
        let book = self.vq.codebook(&self.vq_params)?;
        (0..sampler.samples)
            .map(|k| {
                let mut rng = rng_for(sampler.seed, k as u64);
                let idx = sample_indices(&book, &z, sampler.temperature, &mut rng)?;
                let latents = book.lookup(&idx)?;
                self.vq.decode(
                    &self.vq_params,
                    &crate::vqvae::LatentSequence {
                        latents,
                        indices: Some(idx),
                    },
                )
            })
            .collect()
    }

    /// All parameters, stage 1 then stage 2, for one checkpoint file.
    pub fn tensors(&self) -> BTreeMap<String, Tensor<f32>> {
        let mut out = self.vq_params.values().clone();
        out.extend(self.sie_params.values().clone());
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.tensors())
    }

    /// Splits a combined checkpoint into frozen stage-1 and stage-2 stores.
    pub fn from_tensors(
        vq: VqVae,
        sie: SieEncoder,
        tensors: BTreeMap<String, Tensor<f32>>,
    ) -> Result<Self> {
        let (mut a, mut b) = (BTreeMap::new(), BTreeMap::new());
        for (k, v) in tensors {
            if k.starts_with("vq.") {
                a.insert(k, v);
            } else if k.starts_with("sie.") {
                b.insert(k, v);
            } else {
                return Err(Error::Integrity(format!("unexpected checkpoint tensor '{k}'")));
            }
        }
        let vq_params = ParamStore::frozen(a);
        let sie_params = ParamStore::frozen(b);
        check_params(&vq_params, |p| vq.init(p, &mut rng_for(0, 0)), "stage-1")?;
        check_params(&sie_params, |p| sie.init(p, &mut rng_for(0, 0)), "stage-2")?;
        Ok(Self {
            vq,
            vq_params,
            sie,
            sie_params,
        })
    }
}

/// Frozen stage-1 model from a checkpoint holding only `vq.` tensors.
pub fn load_stage1(cfg: &VqConfig, path: &Path) -> Result<(VqVae, ParamStore<f32>)> {
    let vq = VqVae::new(cfg.clone())?;
    let ps = ParamStore::frozen(checkpoint::load(path)?);
    check_params(&ps, |p| vq.init(p, &mut rng_for(0, 0)), "stage-1")?;
    Ok((vq, ps))
}

/// Pipeline from a combined checkpoint written by [`Pipeline::save`].
pub fn load_pipeline(vq: &VqConfig, sie: &SieConfig, path: &Path) -> Result<Pipeline> {
    let tensors = checkpoint::load(path)?;
    Pipeline::from_tensors(VqVae::new(vq.clone())?, SieEncoder::new(sie.clone(), vq.channels)?, tensors)
}

/// Verifies `loaded` holds exactly the names and shapes `init` would create.
pub fn check_params(
    loaded: &ParamStore<f32>,
    init: impl FnOnce(&mut ParamStore<f32>) -> Result<()>,
    what: &str,
) -> Result<()> {
    let mut expect = ParamStore::new();
    init(&mut expect)?;
    for (name, t) in expect.iter() {
        match loaded.get(name) {
            Some(v) if v.dims() == t.dims() => {}
            Some(v) => {
                return Err(Error::Integrity(format!(
                    "{what} tensor '{name}' has shape {:?}, expected {:?}",
                    v.dims(),
                    t.dims()
                )))
            }
            None => return Err(Error::Integrity(format!("{what} checkpoint lacks '{name}'"))),
        }
    }
    if loaded.len() != expect.len() {
        return Err(Error::Integrity(format!("{what} checkpoint has unexpected tensors")));
    }
    Ok(())
}

/// One prepared stage-2 example.
#[derive(Clone, Debug)]
pub struct Stage2Example {
    pub input: SieInput<f32>,
    pub target: Tensor<f32>,
}

impl Stage2Example {
    pub fn from_item(item: &CorpusItem, shape: &NeutralShape) -> Result<Self> {
        Ok(Self {
            input: SieInput::from_item(item, shape)?,
            target: item.motion_gt.to_tensor(),
        })
    }
}

pub struct Stage2Objective<'a> {
    pub vq: &'a VqVae,
    pub vq_params: &'a ParamStore<f32>,
    pub sie: &'a SieEncoder,
    pub train: Vec<Stage2Example>,
    pub val: Vec<Stage2Example>,
}

impl Stage2Objective<'_> {
    fn eval(&self, ps: &ParamStore<f32>, ex: &Stage2Example, grads: bool) -> Result<(f64, Option<Grads<f32>>)> {
        let mut g = Graph::new();
        let l = stage2_loss(&mut g, self.vq, self.vq_params, self.sie, ps, &ex.input, &ex.target)?;
        let v = g.value(l).item() as f64;
        Ok((v, if grads { Some(g.backward(l)?) } else { None }))
    }
}

impl Objective for Stage2Objective<'_> {
    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn val_len(&self) -> usize {
        self.val.len()
    }

    fn train_step(&self, ps: &ParamStore<f32>, item: usize) -> Result<(f64, Grads<f32>)> {
        let (l, g) = self.eval(ps, &self.train[item], true)?;
        Ok((l, g.expect("gradients requested")))
    }

    fn train_loss(&self, ps: &ParamStore<f32>, item: usize) -> Result<f64> {
        Ok(self.eval(ps, &self.train[item], false)?.0)
    }

    fn val_loss(&self, ps: &ParamStore<f32>, item: usize) -> Result<f64> {
        Ok(self.eval(ps, &self.val[item], false)?.0)
    }
}

pub fn examples(corpus: &Corpus, split: SplitName) -> Result<Vec<Stage2Example>> {
    corpus
        .items_in(split)
        .into_iter()
        .map(|it| {
            let shape = corpus
                .subject(it.subject)
                .ok_or_else(|| Error::Integrity(format!("item {} has unknown subject", it.key)))?;
            Stage2Example::from_item(it, &shape.shape)
        })
        .collect()
}

/// Trains a fresh encoder against a frozen stage-1 model.
pub fn train_stage2(
    corpus: &Corpus,
    vq: VqVae,
    vq_params: ParamStore<f32>,
    cfg: &SieConfig,
    train: &TrainConfig,
) -> Result<(Pipeline, TrainLog)> {
    let sie = SieEncoder::new(cfg.clone(), vq.cfg.channels)?;
    let mut ps = ParamStore::new();
    sie.init(&mut ps, &mut rng_for(train.seed, 0x5747_0002))?;
    let frozen = ParamStore::frozen(vq_params.into_values());
    let obj = Stage2Objective {
        vq: &vq,
        vq_params: &frozen,
        sie: &sie,
        train: examples(corpus, SplitName::Train)?,
        val: examples(corpus, SplitName::Val)?,
    };
    let log = fit(&obj, &mut ps, train, "stage2")?;
    drop(obj);
    Ok((
        Pipeline {
            vq,
            vq_params: frozen,
            sie,
            sie_params: ps,
        },
        log,
    ))
}
