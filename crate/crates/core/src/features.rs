//! Input streams of the encoder: frame-level motion and emotion features
//! and the identity embedding of a neutral face.
//!
//! Pretrained speech extractors sit behind [`FeatureProvider`]. The
//! synthetic providers here project the latents of an
//! [`AudioTrackLatent`] through fixed seeded maps and add seeded noise.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::binio::{read_file, Reader, Writer};
use crate::corpus::{AudioTrackLatent, ARTICULATION_DIM, EMOTION_CLASSES};
use crate::error::{config_err, shape_err, Error, Result};
use crate::flame::{NeutralShape, N_SHAPE};
use crate::numerics::{Graph, Linear, ParamStore, Tensor, Var};
use crate::{rng_for, Scalar};

pub const FEATURE_RATE_HZ: u32 = 50;
pub const MOTION_FPS: u32 = 25;

const FEATURE_MAGIC: &[u8; 4] = b"LSFF";
const SHAPE_MAGIC: &[u8; 4] = b"LSFS";

/// Standard deviation of the additive provider noise.
pub const PROVIDER_NOISE: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StreamTag {
    Motion,
    Emotion,
}

impl StreamTag {
    fn code(self) -> u8 {
        match self {
            StreamTag::Motion => 0,
            StreamTag::Emotion => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(StreamTag::Motion),
            1 => Ok(StreamTag::Emotion),
            _ => Err(Error::Format(format!("feature file: unknown stream tag {c}"))),
        }
    }
}

/// `T × d` frame-level features sampled at `rate_hz`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub rate_hz: u32,
    pub stream: StreamTag,
    pub frames: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(rate_hz: u32, stream: StreamTag, frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if rate_hz == 0 {
            return Err(config_err!("feature rate must be positive"));
        }
        if data.len() != frames * dim {
            return Err(shape_err!("feature block {frames}x{dim} has {} values", data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("feature sequence has non-finite values".into()));
        }
        Ok(Self {
            rate_hz,
            stream,
            frames,
            dim,
            data,
        })
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::matrix(
            self.frames,
            self.dim,
            self.data.iter().map(|&v| S::of(v as f64)).collect(),
        )
        .expect("consistent feature block")
    }

    /// Same-shape sequence of zeros. Reads only the dimensions.
    pub fn zeros_like(&self) -> Self {
        Self {
            data: vec![0.0; self.data.len()],
            ..self.clone()
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer::with_header(FEATURE_MAGIC);
        w.u32(self.rate_hz);
        w.u8(self.stream.code());
        w.usize(self.frames)?;
        w.usize(self.dim)?;
        w.f32s(self.data.iter().copied());
        Ok(w.finish())
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::open(buf, FEATURE_MAGIC, "feature file")?;
        let rate = r.u32()?;
        let stream = StreamTag::from_code(r.u8()?)?;
        let frames = r.usize()?;
        let dim = r.usize()?;
        let data = r.f32s(frames * dim)?;
        r.finish()?;
        Self::new(rate, stream, frames, dim, data).map_err(|e| Error::Format(format!("feature file: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}

pub fn encode_shape(shape: &NeutralShape) -> Vec<u8> {
    let mut w = Writer::with_header(SHAPE_MAGIC);
    w.f32s(shape.params().iter().copied());
    w.finish()
}

pub fn decode_shape(buf: &[u8]) -> Result<NeutralShape> {
    let mut r = Reader::open(buf, SHAPE_MAGIC, "neutral shape file")?;
    let params = r.f32s(N_SHAPE)?;
    r.finish()?;
    NeutralShape::new(params)
}

pub fn save_shape(path: &Path, shape: &NeutralShape) -> Result<()> {
    std::fs::write(path, encode_shape(shape))?;
    Ok(())
}

pub fn load_shape(path: &Path) -> Result<NeutralShape> {
    decode_shape(&read_file(path)?)
}

/// Averages non-overlapping windows of `rate_hz / fps` frames. A trailing
/// partial window is dropped.
pub fn align_to_fps(f: &FeatureSequence, fps: u32) -> Result<FeatureSequence> {
    if fps == 0 || f.rate_hz % fps != 0 {
        return Err(config_err!("feature rate {} Hz is not a multiple of {fps} fps", f.rate_hz));
    }
    let k = (f.rate_hz / fps) as usize;
    let frames = f.frames / k;
    let mut data = Vec::with_capacity(frames * f.dim);
    for t in 0..frames {
        for j in 0..f.dim {
            let s: f64 = (0..k).map(|i| f.data[(t * k + i) * f.dim + j] as f64).sum();
            data.push((s / k as f64) as f32);
        }
    }
    FeatureSequence::new(fps, f.stream, frames, f.dim, data)
}

/// Source of frame-level features for one stream.
pub trait FeatureProvider {
    fn stream(&self) -> StreamTag;
    fn dim(&self) -> usize;
    fn extract(&self, track: &AudioTrackLatent) -> Result<FeatureSequence>;
}

/// Fixed seeded linear read-out of a latent time series plus noise.
#[derive(Clone, Debug)]
pub struct SyntheticProvider {
    stream: StreamTag,
    seed: u64,
    dim: usize,
    projection: Vec<f64>,
    latent_dim: usize,
}

impl SyntheticProvider {
    fn build(stream: StreamTag, seed: u64, dim: usize, latent_dim: usize) -> Self {
        let salt = match stream {
            StreamTag::Motion => 0x4D4F,
            StreamTag::Emotion => 0x454D,
        };
        let mut rng = rng_for(seed, salt);
        let scale = 1.0 / (latent_dim as f64).sqrt();
        let projection = (0..dim * latent_dim)
            .map(|_| scale * standard_normal(&mut rng))
            .collect();
        Self {
            stream,
            seed,
            dim,
            projection,
            latent_dim,
        }
    }

    /// Stand-in for a speech emotion model.
    pub fn emotion(seed: u64, dim: usize) -> Self {
        Self::build(StreamTag::Emotion, seed, dim, EMOTION_CLASSES)
    }

    /// Stand-in for a speech content model.
    pub fn motion(seed: u64, dim: usize) -> Self {
        Self::build(StreamTag::Motion, seed, dim, ARTICULATION_DIM)
    }
}

impl FeatureProvider for SyntheticProvider {
    fn stream(&self) -> StreamTag {
        self.stream
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, track: &AudioTrackLatent) -> Result<FeatureSequence> {
        track.validate()?;
        let frames = track.frames_at(FEATURE_RATE_HZ);
        let noise_stream = (track.id << 1) | u64::from(self.stream.code());
        let mut noise = rng_for(self.seed ^ 0x5EED_0000, noise_stream);
        let mut data = Vec::with_capacity(frames * self.dim);
        let mut latent = vec![0.0; self.latent_dim];
        for k in 0..frames {
            let t = k as f64 / FEATURE_RATE_HZ as f64;
            match self.stream {
                StreamTag::Motion => track.articulation_at(t, &mut latent),
                StreamTag::Emotion => track.emotion_at(t, &mut latent),
            }
            for row in self.projection.chunks(self.latent_dim) {
                let s: f64 = row.iter().zip(&latent).map(|(p, l)| p * l).sum();
                data.push((s + PROVIDER_NOISE * standard_normal(&mut noise)) as f32);
            }
        }
        FeatureSequence::new(FEATURE_RATE_HZ, self.stream, frames, self.dim, data)
    }
}

pub fn emotion_features(track: &AudioTrackLatent, seed: u64, dim: usize) -> Result<FeatureSequence> {
    SyntheticProvider::emotion(seed, dim).extract(track)
}

pub fn motion_features(track: &AudioTrackLatent, seed: u64, dim: usize) -> Result<FeatureSequence> {
    SyntheticProvider::motion(seed, dim).extract(track)
}

/// Identity code computed from neutral shape parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityEmbedding {
    vector: Vec<f32>,
}

impl IdentityEmbedding {
    pub fn vector(&self) -> &[f32] {
        &self.vector
    }
}

/// Two-layer MLP `300 → hidden → d_id` with ReLU between.
#[derive(Clone, Debug)]
pub struct IdentityEncoder {
    pub l1: Linear,
    pub l2: Linear,
}

impl IdentityEncoder {
    pub fn new(prefix: &str, hidden: usize, out: usize) -> Self {
        Self {
            l1: Linear::new(format!("{prefix}.l1"), N_SHAPE, hidden),
            l2: Linear::new(format!("{prefix}.l2"), hidden, out),
        }
    }

    pub fn init<S: Scalar, R: Rng>(&self, ps: &mut ParamStore<S>, rng: &mut R) -> Result<()> {
        self.l1.init(ps, rng)?;
        self.l2.init(ps, rng)
    }

    /// `1 × d_id` embedding node.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, shape: Var) -> Result<Var> {
        let h = self.l1.forward(g, ps, shape)?;
        let h = g.relu(h)?;
        self.l2.forward(g, ps, h)
    }

    pub fn shape_input<S: Scalar>(shape: &NeutralShape) -> Tensor<S> {
        Tensor::matrix(1, N_SHAPE, shape.params().iter().map(|&v| S::of(v as f64)).collect())
            .expect("shape row")
    }

    pub fn encode(&self, shape: &NeutralShape, ps: &ParamStore<f32>) -> Result<IdentityEmbedding> {
        let mut g = Graph::new();
        let x = g.input(Self::shape_input(shape))?;
        let z = self.forward(&mut g, ps, x)?;
        Ok(IdentityEmbedding {
            vector: g.value(z).data().to_vec(),
        })
    }
}

pub(crate) fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_track, Intensity};

    fn track(emotion: usize) -> AudioTrackLatent {
        synth_track(11, 40, emotion, Intensity::Medium)
    }

    #[test]
    fn providers_are_deterministic_with_expected_shape() {
        let t = track(3);
        let a = emotion_features(&t, 5, 16).unwrap();
        let b = emotion_features(&t, 5, 16).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.frames, a.dim, a.rate_hz), (80, 16, 50));
        let m = motion_features(&t, 5, 16).unwrap();
        assert_eq!(m, motion_features(&t, 5, 16).unwrap());
        assert_eq!(m.frames, 80);
    }

    #[test]
    fn emotion_latent_changes_every_emotion_frame_but_no_motion_frame() {
        let a = track(2);
        let mut b = a.clone();
        b.emotion.mixture.rotate_left(3);
        let (ea, eb) = (emotion_features(&a, 1, 16).unwrap(), emotion_features(&b, 1, 16).unwrap());
        for t in 0..ea.frames {
            let diff: f32 = ea.row(t).iter().zip(eb.row(t)).map(|(x, y)| (x - y).abs()).sum();
            assert!(diff > 0.0, "frame {t} unchanged");
        }
        assert_eq!(motion_features(&a, 1, 16).unwrap(), motion_features(&b, 1, 16).unwrap());
    }

    #[test]
    fn align_pairs_average_and_drop_trailing_frame() {
        let f = FeatureSequence::new(50, StreamTag::Motion, 5, 1, vec![1., 3., 5., 7., 9.]).unwrap();
        let a = align_to_fps(&f, 25).unwrap();
        assert_eq!(a.data, vec![2.0, 6.0]);
        assert_eq!(a.rate_hz, 25);

        let c = FeatureSequence::new(50, StreamTag::Emotion, 100, 2, vec![0.5; 200]).unwrap();
        let ac = align_to_fps(&c, 25).unwrap();
        assert_eq!(ac.frames, 50);
        assert!(ac.data.iter().all(|&v| v == 0.5));

        assert!(matches!(align_to_fps(&f, 30), Err(Error::Config(_))));
    }

    #[test]
    fn identity_of_zero_shape_with_zero_biases_is_zero() {
        let enc = IdentityEncoder::new("id", 16, 8);
        let mut ps = ParamStore::new();
        enc.init(&mut ps, &mut rng_for(1, 1)).unwrap();
        let z = enc.encode(&NeutralShape::zeros(), &ps).unwrap();
        assert!(z.vector().iter().all(|&v| v == 0.0));
        let shape = NeutralShape::new((0..N_SHAPE).map(|i| (i as f32 * 0.1).sin()).collect()).unwrap();
        assert_eq!(enc.encode(&shape, &ps).unwrap(), enc.encode(&shape, &ps).unwrap());
    }

    #[test]
    fn missing_identity_params_is_a_state_error() {
        let enc = IdentityEncoder::new("id", 16, 8);
        let ps = ParamStore::new();
        assert!(matches!(enc.encode(&NeutralShape::zeros(), &ps), Err(Error::State(_))));
    }

    #[test]
    fn files_round_trip() {
        let f = emotion_features(&track(1), 2, 8).unwrap();
        assert_eq!(FeatureSequence::decode(&f.encode().unwrap()).unwrap(), f);
        let s = NeutralShape::new(vec![0.25; N_SHAPE]).unwrap();
        assert_eq!(decode_shape(&encode_shape(&s)).unwrap(), s);
        let mut bad = f.encode().unwrap();
        bad[3] = b'X';
        assert!(matches!(FeatureSequence::decode(&bad), Err(Error::Format(_))));
    }
}
