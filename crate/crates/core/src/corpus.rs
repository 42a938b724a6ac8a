//! Deterministic synthetic corpus.
//!
//! Every item is a pure function of `(corpus seed, subject, sentence,
//! emotion, intensity)`. Ground-truth motion is built from known channel
//! groups: the articulation latent drives the mouth expression channels
//! `0..20` and the jaw, the emotion latent drives the upper-face channels
//! `20..50`, and a fixed linear map of the subject's neutral shape adds a
//! constant per-subject bias to all expression channels.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::features::{
    align_to_fps, load_shape, save_shape, standard_normal, FeatureProvider, FeatureSequence,
    SyntheticProvider, MOTION_FPS,
};
use crate::flame::{NeutralShape, FRAME_DIM, N_EXPR, N_SHAPE};
use crate::motion::MotionSequence;
use crate::rng_for;

pub const ARTICULATION_DIM: usize = 6;
pub const EMOTION_CLASSES: usize = 8;
pub const NEUTRAL_EMOTION: usize = 0;

pub const MOUTH_CHANNELS: std::ops::Range<usize> = 0..20;
pub const UPPER_CHANNELS: std::ops::Range<usize> = 20..50;
pub const JAW_OPEN_CHANNEL: usize = 50;

const PARTIALS: usize = 3;
const MIN_DURATION_S: f64 = 1.0;
const MAX_DURATION_S: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intensity {
    Neutral,
    Weak,
    Medium,
    Strong,
}

impl Intensity {
    pub const LEVELS: [Intensity; 3] = [Intensity::Weak, Intensity::Medium, Intensity::Strong];

    pub fn scale(self) -> f64 {
        match self {
            Intensity::Neutral => 0.0,
            Intensity::Weak => 0.33,
            Intensity::Medium => 0.66,
            Intensity::Strong => 1.0,
        }
    }

    fn code(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Intensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Intensity::Neutral => "neutral",
            Intensity::Weak => "weak",
            Intensity::Medium => "medium",
            Intensity::Strong => "strong",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Partial {
    pub amplitude: f64,
    pub freq_hz: f64,
    pub phase: f64,
}

impl Partial {
    fn at(&self, t: f64) -> f64 {
        self.amplitude * (2.0 * std::f64::consts::PI * self.freq_hz * t + self.phase).sin()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmotionLatent {
    pub category: usize,
    pub mixture: [f64; EMOTION_CLASSES],
    pub intensity: Intensity,
    /// Slow modulation of the emotion strength over the sentence.
    pub envelope: Partial,
}

/// Hidden causes of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioTrackLatent {
    pub id: u64,
    /// Length in animation frames at 25 fps.
    pub frames: usize,
    pub articulation: Vec<[Partial; PARTIALS]>,
    pub emotion: EmotionLatent,
}

impl AudioTrackLatent {
    pub fn duration_s(&self) -> f64 {
        self.frames as f64 / MOTION_FPS as f64
    }

    pub fn frames_at(&self, rate_hz: u32) -> usize {
        self.frames * rate_hz as usize / MOTION_FPS as usize
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.duration_s();
        if !(MIN_DURATION_S..=MAX_DURATION_S).contains(&d) {
            return Err(Error::Input(format!("track duration {d} s outside [1, 8]")));
        }
        let e = &self.emotion;
        if e.category >= EMOTION_CLASSES {
            return Err(Error::Input(format!("emotion index {} out of range", e.category)));
        }
        if (e.category == NEUTRAL_EMOTION) != (e.intensity == Intensity::Neutral) {
            return Err(Error::Input(
                "neutral emotion must come with neutral intensity and vice versa".into(),
            ));
        }
        if self.articulation.len() != ARTICULATION_DIM {
            return Err(Error::Input("articulation latent has wrong width".into()));
        }
        Ok(())
    }

    pub fn articulation_at(&self, t: f64, out: &mut [f64]) {
        for (o, partials) in out.iter_mut().zip(&self.articulation) {
            *o = partials.iter().map(|p| p.at(t)).sum();
        }
    }

    pub fn emotion_at(&self, t: f64, out: &mut [f64]) {
        let e = &self.emotion;
        let env = 0.75 + e.envelope.at(t);
        let k = e.intensity.scale() * env;
        for (o, m) in out.iter_mut().zip(&e.mixture) {
            *o = k * m;
        }
    }
}

/// Track with the given identity and length. Latent parameters are drawn
/// from `id`.
pub fn synth_track(id: u64, frames: usize, emotion: usize, intensity: Intensity) -> AudioTrackLatent {
    let mut rng = rng_for(id, 0x7A_C0);
    let articulation = (0..ARTICULATION_DIM)
        .map(|_| {
            [0usize, 1, 2].map(|j| Partial {
                amplitude: 0.45 / (j as f64 + 1.0),
                freq_hz: rng.gen_range(1.5..6.0),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
            })
        })
        .collect();
    let mut mixture = [0.0; EMOTION_CLASSES];
    if emotion < EMOTION_CLASSES {
        let mut rest: Vec<f64> = (0..EMOTION_CLASSES).map(|_| rng.gen_range(0.0..1.0)).collect();
        rest[emotion] = 0.0;
        let total: f64 = rest.iter().sum();
        for (m, r) in mixture.iter_mut().zip(&rest) {
            *m = 0.2 * r / total;
        }
        mixture[emotion] = 0.8;
    }
    let envelope = Partial {
        amplitude: 0.25,
        freq_hz: rng.gen_range(0.2..0.8),
        phase: rng.gen_range(0.0..std::f64::consts::TAU),
    };
    AudioTrackLatent {
        id,
        frames,
        articulation,
        emotion: EmotionLatent {
            category: emotion,
            mixture,
            intensity,
            envelope,
        },
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: u32,
    pub shape: NeutralShape,
}

pub fn synth_subject(corpus_seed: u64, id: u32) -> Subject {
    let mut rng = rng_for(corpus_seed ^ 0x5B_1EC7, u64::from(id));
    let params = (0..N_SHAPE)
        .map(|k| (standard_normal(&mut rng) / (1.0 + k as f64 / 50.0)) as f32)
        .collect();
    Subject {
        id,
        shape: NeutralShape::new(params).expect("finite draw"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub subjects: u32,
    pub sentences_per_level: u32,
    pub neutral_sentences: u32,
    pub min_frames: usize,
    pub max_frames: usize,
    pub feature_dim: usize,
    pub split: [f64; 3],
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            subjects: 10,
            sentences_per_level: 4,
            neutral_sentences: 6,
            min_frames: 50,
            max_frames: 150,
            feature_dim: 32,
            split: [0.8, 0.1, 0.1],
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 {
            return Err(config_err!("corpus needs at least one subject"));
        }
        let (lo, hi) = (
            (MIN_DURATION_S * MOTION_FPS as f64) as usize,
            (MAX_DURATION_S * MOTION_FPS as f64) as usize,
        );
        if self.min_frames < lo || self.max_frames > hi || self.min_frames > self.max_frames {
            return Err(config_err!(
                "frame range {}..={} must lie within {lo}..={hi}",
                self.min_frames,
                self.max_frames
            ));
        }
        if self.feature_dim == 0 {
            return Err(config_err!("feature_dim must be positive"));
        }
        Ok(())
    }
}

/// Fixed maps from latents to animation channels, shared by a corpus.
#[derive(Clone, Debug)]
pub struct MotionModel {
    mouth: Vec<f64>,
    jaw: Vec<f64>,
    upper: Vec<f64>,
    bias: Vec<f64>,
}

impl MotionModel {
    pub fn new(corpus_seed: u64) -> Self {
        let mut rng = rng_for(corpus_seed, 0x30_7104);
        let mut draw = |n: usize, scale: f64| -> Vec<f64> {
            (0..n).map(|_| scale * standard_normal(&mut rng)).collect()
        };
        let mouth = draw(MOUTH_CHANNELS.len() * ARTICULATION_DIM, 0.8 / (ARTICULATION_DIM as f64).sqrt());
        let jaw = draw(ARTICULATION_DIM, 0.15 / (ARTICULATION_DIM as f64).sqrt());
        let upper = draw(UPPER_CHANNELS.len() * EMOTION_CLASSES, 0.6);
        let bias = draw(N_EXPR * N_SHAPE, 0.15 / (N_SHAPE as f64).sqrt());
        Self {
            mouth,
            jaw,
            upper,
            bias,
        }
    }

    /// Constant per-subject offset of the expression channels.
    pub fn subject_bias(&self, shape: &NeutralShape) -> Vec<f64> {
        let mut out = vec![0.0; FRAME_DIM];
        for (c, o) in out.iter_mut().take(N_EXPR).enumerate() {
            let row = &self.bias[c * N_SHAPE..(c + 1) * N_SHAPE];
            *o = row.iter().zip(shape.params()).map(|(b, &s)| b * s as f64).sum();
        }
        out
    }

    pub fn motion(&self, track: &AudioTrackLatent, shape: &NeutralShape) -> Result<MotionSequence> {
        track.validate()?;
        let bias = self.subject_bias(shape);
        let mut art = [0.0; ARTICULATION_DIM];
        let mut emo = [0.0; EMOTION_CLASSES];
        let mut data = Vec::with_capacity(track.frames * FRAME_DIM);
        for k in 0..track.frames {
            let t = k as f64 / MOTION_FPS as f64;
            track.articulation_at(t, &mut art);
            track.emotion_at(t, &mut emo);
            let mut frame = [0.0f64; FRAME_DIM];
            for (i, c) in MOUTH_CHANNELS.enumerate() {
                let row = &self.mouth[i * ARTICULATION_DIM..(i + 1) * ARTICULATION_DIM];
                frame[c] = row.iter().zip(&art).map(|(w, a)| w * a).sum();
            }
            for (i, c) in UPPER_CHANNELS.enumerate() {
                let row = &self.upper[i * EMOTION_CLASSES..(i + 1) * EMOTION_CLASSES];
                frame[c] = row.iter().zip(&emo).map(|(w, e)| w * e).sum();
            }
            let open: f64 = self.jaw.iter().zip(&art).map(|(w, a)| w * a).sum();
            frame[JAW_OPEN_CHANNEL] = open.abs();
            for (f, b) in frame.iter_mut().zip(&bias) {
                *f += b;
            }
            data.extend(frame.iter().map(|&v| v as f32));
        }
        MotionSequence::new(track.frames, data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusItem {
    pub key: String,
    pub subject: u32,
    pub sentence: u32,
    pub emotion: usize,
    pub intensity: Intensity,
    pub motion_gt: MotionSequence,
    /// Raw 50 Hz features.
    pub motion_features: FeatureSequence,
    pub emotion_features: FeatureSequence,
}

impl CorpusItem {
    pub fn frames(&self) -> usize {
        self.motion_gt.frames
    }

    /// Motion and emotion features averaged down to the animation rate.
    pub fn aligned_features(&self) -> Result<(FeatureSequence, FeatureSequence)> {
        let m = align_to_fps(&self.motion_features, self.motion_gt.fps)?;
        let e = align_to_fps(&self.emotion_features, self.motion_gt.fps)?;
        if m.frames != self.frames() || e.frames != self.frames() {
            return Err(Error::Integrity(format!(
                "item {}: aligned features ({}, {}) vs motion {} frames",
                self.key,
                m.frames,
                e.frames,
                self.frames()
            )));
        }
        Ok((m, e))
    }
}

pub fn item_key(subject: u32, sentence: u32, emotion: usize, intensity: Intensity) -> String {
    format!("s{subject:02}_e{emotion}_{intensity}_{sentence:02}")
}

/// Generator bound to one corpus configuration.
pub struct CorpusSynth {
    pub config: CorpusConfig,
    motion_model: MotionModel,
    motion_provider: SyntheticProvider,
    emotion_provider: SyntheticProvider,
}

impl CorpusSynth {
    pub fn new(config: CorpusConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            motion_model: MotionModel::new(config.seed),
            motion_provider: SyntheticProvider::motion(config.seed, config.feature_dim),
            emotion_provider: SyntheticProvider::emotion(config.seed, config.feature_dim),
            config,
        })
    }

    pub fn motion_model(&self) -> &MotionModel {
        &self.motion_model
    }

    /// Track shared by every subject reading the same sentence with the same
    /// emotion and intensity.
    pub fn track(&self, sentence: u32, emotion: usize, intensity: Intensity) -> AudioTrackLatent {
        let id = self
            .config
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(u64::from(sentence) << 16 | (emotion as u64) << 8 | intensity.code());
        let mut rng = rng_for(id, 0xD0_2A7);
        let frames = rng.gen_range(self.config.min_frames..=self.config.max_frames);
        synth_track(id, frames, emotion, intensity)
    }

    pub fn item_from_track(&self, subject: &Subject, sentence: u32, track: &AudioTrackLatent) -> Result<CorpusItem> {
        Ok(CorpusItem {
            key: item_key(subject.id, sentence, track.emotion.category, track.emotion.intensity),
            subject: subject.id,
            sentence,
            emotion: track.emotion.category,
            intensity: track.emotion.intensity,
            motion_gt: self.motion_model.motion(track, &subject.shape)?,
            motion_features: self.motion_provider.extract(track)?,
            emotion_features: self.emotion_provider.extract(track)?,
        })
    }

    pub fn synth_item(
        &self,
        subject: &Subject,
        sentence: u32,
        emotion: usize,
        intensity: Intensity,
    ) -> Result<CorpusItem> {
        if emotion >= EMOTION_CLASSES {
            return Err(Error::Input(format!("emotion index {emotion} out of range")));
        }
        let track = self.track(sentence, emotion, intensity);
        self.item_from_track(subject, sentence, &track)
    }

    pub fn subjects(&self) -> Vec<Subject> {
        (0..self.config.subjects)
            .map(|id| synth_subject(self.config.seed, id))
            .collect()
    }

    /// Emotional items (categories 1..8 × 3 levels × sentences) then neutral
    /// items, for every subject.
    pub fn build(&self) -> Result<Corpus> {
        let subjects = self.subjects();
        let ids: Vec<u32> = subjects.iter().map(|s| s.id).collect();
        let split = split_subjects(&ids, self.config.split, self.config.seed)?;
        let mut items = Vec::new();
        for s in &subjects {
            for emotion in 1..EMOTION_CLASSES {
                for level in Intensity::LEVELS {
                    for sentence in 0..self.config.sentences_per_level {
                        items.push(self.synth_item(s, sentence, emotion, level)?);
                    }
                }
            }
            for sentence in 0..self.config.neutral_sentences {
                items.push(self.synth_item(s, sentence, NEUTRAL_EMOTION, Intensity::Neutral)?);
            }
        }
        Ok(Corpus {
            config: self.config.clone(),
            subjects,
            items,
            split,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn of(&self, subject: u32) -> Option<SplitName> {
        if self.train.contains(&subject) {
            Some(SplitName::Train)
        } else if self.val.contains(&subject) {
            Some(SplitName::Val)
        } else if self.test.contains(&subject) {
            Some(SplitName::Test)
        } else {
            None
        }
    }

    pub fn ids(&self, name: SplitName) -> &[u32] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

/// Seeded shuffle then contiguous partition into train/val/test.
pub fn split_subjects(subjects: &[u32], ratios: [f64; 3], seed: u64) -> Result<Split> {
    if ratios.iter().any(|&r| !(r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(config_err!("split ratios {ratios:?} must be positive and sum to 1"));
    }
    let unique: BTreeSet<u32> = subjects.iter().copied().collect();
    if unique.len() != subjects.len() {
        return Err(config_err!("duplicate subject ids"));
    }
    let mut ids: Vec<u32> = unique.into_iter().collect();
    ids.shuffle(&mut rng_for(seed, 0x5911));
    let n = ids.len() as f64;
    let n_train = (n * ratios[0]).round() as usize;
    let n_val = (n * ratios[1]).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= ids.len() {
        return Err(config_err!(
            "{} subjects cannot fill every split with ratios {ratios:?}",
            ids.len()
        ));
    }
    let sorted = |v: &[u32]| {
        let mut v = v.to_vec();
        v.sort_unstable();
        v
    };
    Ok(Split {
        train: sorted(&ids[..n_train]),
        val: sorted(&ids[n_train..n_train + n_val]),
        test: sorted(&ids[n_train + n_val..]),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub subjects: Vec<Subject>,
    pub items: Vec<CorpusItem>,
    pub split: Split,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestSubject {
    id: u32,
    split: SplitName,
    shape: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestItem {
    key: String,
    subject: u32,
    sentence: u32,
    emotion: usize,
    intensity: Intensity,
    frames: usize,
    motion: String,
    motion_features: String,
    emotion_features: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    config: CorpusConfig,
    split: Split,
    subjects: Vec<ManifestSubject>,
    items: Vec<ManifestItem>,
}

impl Corpus {
    pub fn subject(&self, id: u32) -> Option<&Subject> {
        self.subjects.iter().find(|s| s.id == id)
    }

    pub fn item(&self, key: &str) -> Option<&CorpusItem> {
        self.items.iter().find(|i| i.key == key)
    }

    pub fn items_in(&self, split: SplitName) -> Vec<&CorpusItem> {
        let ids = self.split.ids(split);
        self.items.iter().filter(|i| ids.contains(&i.subject)).collect()
    }

    pub fn shapes(&self) -> BTreeMap<u32, NeutralShape> {
        self.subjects.iter().map(|s| (s.id, s.shape.clone())).collect()
    }

    /// Writes `manifest.json`, `subjects/<id>.lsfs` and
    /// `items/<key>.{lsfm,motion.lsff,emotion.lsff}` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("subjects"))?;
        std::fs::create_dir_all(dir.join("items"))?;
        let mut subjects = Vec::new();
        for s in &self.subjects {
            let rel = format!("subjects/{:02}.lsfs", s.id);
            save_shape(&dir.join(&rel), &s.shape)?;
            let split = self
                .split
                .of(s.id)
                .ok_or_else(|| Error::Integrity(format!("subject {} is in no split", s.id)))?;
            subjects.push(ManifestSubject {
                id: s.id,
                split,
                shape: rel,
            });
        }
        let mut items = Vec::new();
        for it in &self.items {
            let motion = format!("items/{}.lsfm", it.key);
            let mf = format!("items/{}.motion.lsff", it.key);
            let ef = format!("items/{}.emotion.lsff", it.key);
            it.motion_gt.save(&dir.join(&motion))?;
            it.motion_features.save(&dir.join(&mf))?;
            it.emotion_features.save(&dir.join(&ef))?;
            items.push(ManifestItem {
                key: it.key.clone(),
                subject: it.subject,
                sentence: it.sentence,
                emotion: it.emotion,
                intensity: it.intensity,
                frames: it.frames(),
                motion,
                motion_features: mf,
                emotion_features: ef,
            });
        }
        let manifest = Manifest {
            version: 1,
            config: self.config.clone(),
            split: self.split.clone(),
            subjects,
            items,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Corpus> {
        let manifest_path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", manifest_path.display())))
        })?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Integrity(format!("{}: {e}", manifest_path.display())))?;
        let resolve = |rel: &str| -> Result<PathBuf> {
            let p = dir.join(rel);
            if !p.is_file() {
                return Err(Error::Integrity(format!("manifest references missing file {rel}")));
            }
            Ok(p)
        };
        let mut subjects = Vec::new();
        for s in &manifest.subjects {
            if manifest.split.of(s.id) != Some(s.split) {
                return Err(Error::Integrity(format!("subject {} split mismatch", s.id)));
            }
            subjects.push(Subject {
                id: s.id,
                shape: load_shape(&resolve(&s.shape)?)?,
            });
        }
        let mut items = Vec::new();
        for m in &manifest.items {
            if !subjects.iter().any(|s| s.id == m.subject) {
                return Err(Error::Integrity(format!("item {} has unknown subject", m.key)));
            }
            let item = CorpusItem {
                key: m.key.clone(),
                subject: m.subject,
                sentence: m.sentence,
                emotion: m.emotion,
                intensity: m.intensity,
                motion_gt: MotionSequence::load(&resolve(&m.motion)?)?,
                motion_features: FeatureSequence::load(&resolve(&m.motion_features)?)?,
                emotion_features: FeatureSequence::load(&resolve(&m.emotion_features)?)?,
            };
            if item.frames() != m.frames {
                return Err(Error::Integrity(format!("item {} frame count mismatch", m.key)));
            }
            items.push(item);
        }
        Ok(Corpus {
            config: manifest.config,
            subjects,
            items,
            split: manifest.split,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth() -> CorpusSynth {
        CorpusSynth::new(CorpusConfig {
            subjects: 3,
            sentences_per_level: 1,
            neutral_sentences: 1,
            min_frames: 25,
            max_frames: 40,
            feature_dim: 8,
            split: [0.34, 0.33, 0.33],
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn items_are_deterministic() {
        let s = synth();
        let subj = synth_subject(s.config.seed, 1);
        let a = s.synth_item(&subj, 0, 3, Intensity::Strong).unwrap();
        let b = s.synth_item(&subj, 0, 3, Intensity::Strong).unwrap();
        assert_eq!(a, b);
        let (m, e) = a.aligned_features().unwrap();
        assert_eq!((m.frames, e.frames), (a.frames(), a.frames()));
    }

    #[test]
    fn neutral_items_have_static_upper_face() {
        let s = synth();
        let subj = synth_subject(s.config.seed, 0);
        let it = s.synth_item(&subj, 0, NEUTRAL_EMOTION, Intensity::Neutral).unwrap();
        for c in UPPER_CHANNELS {
            let first = it.motion_gt.frame(0)[c];
            assert!((0..it.frames()).all(|t| it.motion_gt.frame(t)[c] == first));
        }
        let emo = s.synth_item(&subj, 0, 2, Intensity::Strong).unwrap();
        let c = UPPER_CHANNELS.start;
        assert!((0..emo.frames()).any(|t| emo.motion_gt.frame(t)[c] != emo.motion_gt.frame(0)[c]));
    }

    #[test]
    fn subjects_differ_only_by_their_bias() {
        let s = synth();
        let track = s.track(0, 4, Intensity::Weak);
        let (a, b) = (synth_subject(s.config.seed, 0), synth_subject(s.config.seed, 1));
        let ia = s.item_from_track(&a, 0, &track).unwrap();
        let ib = s.item_from_track(&b, 0, &track).unwrap();
        let ba = s.motion_model().subject_bias(&a.shape);
        let bb = s.motion_model().subject_bias(&b.shape);
        for t in 0..ia.frames() {
            for c in 0..FRAME_DIM {
                let diff = (ia.motion_gt.frame(t)[c] - ib.motion_gt.frame(t)[c]) as f64;
                assert!((diff - (ba[c] - bb[c])).abs() < 1e-5, "t={t} c={c}");
            }
        }
        assert_eq!(ia.motion_features, ib.motion_features);
    }

    #[test]
    fn invalid_emotion_index_is_rejected() {
        let s = synth();
        let subj = synth_subject(s.config.seed, 0);
        assert!(s.synth_item(&subj, 0, 8, Intensity::Weak).is_err());
    }

    #[test]
    fn ten_subject_split_is_8_1_1_and_disjoint() {
        let ids: Vec<u32> = (0..10).collect();
        let sp = split_subjects(&ids, [0.8, 0.1, 0.1], 7).unwrap();
        assert_eq!((sp.train.len(), sp.val.len(), sp.test.len()), (8, 1, 1));
        let all: BTreeSet<u32> = sp.train.iter().chain(&sp.val).chain(&sp.test).copied().collect();
        assert_eq!(all.len(), 10);
        assert_eq!(sp, split_subjects(&ids, [0.8, 0.1, 0.1], 7).unwrap());
        assert!(split_subjects(&ids[..2], [0.8, 0.1, 0.1], 7).is_err());
        assert!(split_subjects(&ids, [0.9, 0.2, -0.1], 7).is_err());
    }

    #[test]
    fn write_read_round_trip_and_missing_file() {
        let corpus = synth().build().unwrap();
        assert_eq!(corpus.items.len(), 3 * (7 * 3 + 1));
        let dir = tempfile::tempdir().unwrap();
        corpus.write(dir.path()).unwrap();
        let back = Corpus::read(dir.path()).unwrap();
        assert_eq!(back, corpus);

        let victim = dir.path().join("items").join(format!("{}.lsfm", corpus.items[0].key));
        std::fs::remove_file(victim).unwrap();
        assert!(matches!(Corpus::read(dir.path()), Err(Error::Integrity(_))));
    }
}
