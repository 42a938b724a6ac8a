//! Controlled comparison of representation and fusion variants.
//!
//! Every variant is trained from the same frozen stage-1 model on the same
//! corpus and split with the same budget, once per seed, and scored on the
//! test split. The report header carries SHA-256 digests of those shared
//! inputs so that two reports can be checked for comparability.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Corpus, SplitName};
use crate::error::{config_err, Error, Result};
use crate::features::encode_shape;
use crate::metrics::{aggregate, Evaluator, ItemMetrics};
use crate::numerics::{checkpoint, ParamStore};
use crate::pipeline::{train_stage2, FusionMode, Representation, SamplerConfig, SieConfig, SieInput};
use crate::train::TrainConfig;
use crate::vqvae::VqVae;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub name: String,
    pub representation: Representation,
    pub fusion: FusionMode,
}

impl VariantSpec {
    pub fn new(name: &str, representation: Representation, fusion: FusionMode) -> Result<Self> {
        let v = Self {
            name: name.to_string(),
            representation,
            fusion,
        };
        v.validate()?;
        Ok(v)
    }

    /// `no-style` is only defined for the style-vector encoder, since the
    /// fusion blocks have nothing to fuse without an emotion stream.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(',') {
            return Err(config_err!("variant name '{}' must be non-empty and comma-free", self.name));
        }
        if self.representation == Representation::NoStyle && self.fusion != FusionMode::StyleVector {
            return Err(config_err!(
                "variant '{}': no-style representation needs style-vector fusion",
                self.name
            ));
        }
        Ok(())
    }
}

/// Representation rows followed by fusion rows.
pub fn standard_variants() -> Vec<VariantSpec> {
    use FusionMode::*;
    use Representation::*;
    [
        ("no-style", NoStyle, StyleVector),
        ("emotion", EmotionOnly, StyleVector),
        ("emotion-identity", EmotionIdentity, StyleVector),
        ("gate", EmotionIdentity, Gate),
        ("xattn-late", EmotionIdentity, XattnLate),
        ("hifb", EmotionIdentity, Hifb),
    ]
    .into_iter()
    .map(|(n, r, f)| VariantSpec::new(n, r, f).expect("standard variants are valid"))
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantSpec>,
    /// Encoder settings shared by all variants; fusion and representation
    /// are taken from each variant.
    pub sie: SieConfig,
    /// Budget of the shared stage-1 model when none is supplied.
    pub stage1: TrainConfig,
    /// Stage-2 budget; the seed is replaced per run.
    pub train: TrainConfig,
    /// Draws for the sample metrics. The point metrics use the nearest-code
    /// decode.
    pub sampler: SamplerConfig,
    /// Evenly spaced subset of the test split, if set.
    pub max_test_items: Option<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: (0..10).collect(),
            variants: standard_variants(),
            sie: SieConfig::default(),
            stage1: TrainConfig {
                optimizer: crate::numerics::Adam::adamw(1e-3),
                batch_size: 8,
                max_epochs: 1000,
                patience: 1000,
                max_steps: Some(1500),
                seed: 1,
            },
            train: TrainConfig {
                optimizer: crate::numerics::Adam::adam(1e-3),
                batch_size: 8,
                max_epochs: 1000,
                patience: 1000,
                max_steps: Some(350),
                seed: 0,
            },
            sampler: SamplerConfig {
                temperature: 1.0,
                samples: 5,
                seed: 0,
            },
            max_test_items: Some(30),
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.variants.is_empty() {
            return Err(config_err!("ablation needs at least one seed and one variant"));
        }
        for v in &self.variants {
            v.validate()?;
        }
        let mut names: Vec<&str> = self.variants.iter().map(|v| v.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(config_err!("variant names must be unique"));
        }
        if self.max_test_items == Some(0) {
            return Err(config_err!("max_test_items must be positive"));
        }
        self.stage1.validate()?;
        self.train.validate()?;
        self.sampler.validate()
    }

    fn variant_sie(&self, v: &VariantSpec) -> SieConfig {
        SieConfig {
            fusion: v.fusion,
            representation: v.representation,
            ..self.sie.clone()
        }
    }
}

/// Digests of the inputs every row shares.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationHeader {
    pub corpus_sha256: String,
    pub split_sha256: String,
    pub stage1_sha256: String,
    pub budget_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub mve: f64,
    pub lve: f64,
    pub fdd: f64,
    pub mee: f64,
    pub ce: f64,
    pub diversity: f64,
    pub best_epoch: usize,
    pub steps: u64,
    /// Emotion feature reads over training and evaluation.
    pub emotion_reads: u64,
    /// Identity embedding evaluations over training and evaluation.
    pub identity_evals: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantMean {
    pub variant: String,
    pub seeds: usize,
    pub mve: f64,
    pub lve: f64,
    pub fdd: f64,
    pub mee: f64,
    pub ce: f64,
    pub diversity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationReport {
    pub header: AblationHeader,
    pub rows: Vec<AblationRow>,
    pub means: Vec<VariantMean>,
}

const COLUMNS: &str = "variant,seed,mve,lve,fdd,mee,ce,diversity";

impl AblationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Header digests as `#` lines, then one row per run and one `mean` row
    /// per variant.
    pub fn to_csv(&self) -> String {
        let h = &self.header;
        let mut out = format!(
            "# corpus_sha256={}\n# split_sha256={}\n# stage1_sha256={}\n# budget_sha256={}\n{COLUMNS}\n",
            h.corpus_sha256, h.split_sha256, h.stage1_sha256, h.budget_sha256
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.variant, r.seed, r.mve, r.lve, r.fdd, r.mee, r.ce, r.diversity
            ));
        }
        for m in &self.means {
            out.push_str(&format!(
                "{},mean,{},{},{},{},{},{}\n",
                m.variant, m.mve, m.lve, m.fdd, m.mee, m.ce, m.diversity
            ));
        }
        out
    }

    pub fn row(&self, variant: &str, seed: u64) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant && r.seed == seed)
    }

    /// Seeds where `a` has FDD no larger than `b`, out of seeds run for both.
    pub fn fdd_wins(&self, a: &str, b: &str) -> (usize, usize) {
        let mut wins = 0;
        let mut total = 0;
        for ra in self.rows.iter().filter(|r| r.variant == a) {
            if let Some(rb) = self.row(b, ra.seed) {
                total += 1;
                if ra.fdd <= rb.fdd {
                    wins += 1;
                }
            }
        }
        (wins, total)
    }
}

fn sha(bytes: impl IntoIterator<Item = Vec<u8>>) -> String {
    let mut h = Sha256::new();
    for b in bytes {
        h.update((b.len() as u64).to_le_bytes());
        h.update(&b);
    }
    hex::encode(h.finalize())
}

pub fn corpus_digest(corpus: &Corpus) -> Result<String> {
    let mut parts = Vec::new();
    for s in &corpus.subjects {
        parts.push(s.id.to_le_bytes().to_vec());
        parts.push(encode_shape(&s.shape));
    }
    for it in &corpus.items {
        parts.push(it.key.as_bytes().to_vec());
        parts.push(it.motion_gt.encode()?);
        parts.push(it.motion_features.encode()?);
        parts.push(it.emotion_features.encode()?);
    }
    Ok(sha(parts))
}

pub fn stage1_digest(ps: &ParamStore<f32>) -> Result<String> {
    Ok(sha([checkpoint::encode(ps.values())?]))
}

fn budget_digest(cfg: &AblationConfig) -> Result<String> {
    let train = TrainConfig {
        seed: 0,
        ..cfg.train.clone()
    };
    let shared = serde_json::json!({
        "sie": cfg.sie,
        "train": train,
        "sampler": cfg.sampler,
        "max_test_items": cfg.max_test_items,
    });
    Ok(sha([serde_json::to_vec(&shared)?]))
}

fn test_items(corpus: &Corpus, max: Option<usize>) -> Vec<&crate::corpus::CorpusItem> {
    let all = corpus.items_in(SplitName::Test);
    match max {
        Some(k) if k < all.len() => (0..k).map(|i| all[i * all.len() / k]).collect(),
        _ => all,
    }
}

/// Trains and scores every `(variant, seed)` pair. Rows come out in
/// variant-major order.
pub fn run_ablation(
    corpus: &Corpus,
    vq: &VqVae,
    vq_params: &ParamStore<f32>,
    evaluator: &Evaluator,
    cfg: &AblationConfig,
) -> Result<AblationReport> {
    cfg.validate()?;
    let header = AblationHeader {
        corpus_sha256: corpus_digest(corpus)?,
        split_sha256: sha([serde_json::to_vec(&corpus.split)?]),
        stage1_sha256: stage1_digest(vq_params)?,
        budget_sha256: budget_digest(cfg)?,
    };
    let items = test_items(corpus, cfg.max_test_items);
    if items.is_empty() {
        return Err(config_err!("test split is empty"));
    }
    let mut rows = Vec::new();
    for v in &cfg.variants {
        for &seed in &cfg.seeds {
            let train = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let (p, log) = train_stage2(corpus, vq.clone(), vq_params.clone(), &cfg.variant_sie(v), &train)?;
            if stage1_digest(&p.vq_params)? != header.stage1_sha256 {
                return Err(Error::Integrity(format!("variant '{}' altered the stage-1 model", v.name)));
            }
            let sampler = SamplerConfig {
                seed,
                ..cfg.sampler
            };
            let point = SamplerConfig {
                temperature: 0.0,
                samples: 1,
                seed,
            };
            let per_item = items
                .par_iter()
                .map(|it| -> Result<ItemMetrics> {
                    let shape = &corpus
                        .subject(it.subject)
                        .ok_or_else(|| Error::Integrity(format!("item {} has unknown subject", it.key)))?
                        .shape;
                    let x = SieInput::from_item(it, shape)?;
                    let det = p.generate(&x, &point)?;
                    let samples = p.generate(&x, &sampler)?;
                    evaluator.item(&it.key, shape, &it.motion_gt, &det[0], &samples)
                })
                .collect::<Result<Vec<_>>>()?;
            let m = aggregate(per_item)?;
            rows.push(AblationRow {
                variant: v.name.clone(),
                seed,
                mve: m.mve,
                lve: m.lve,
                fdd: m.fdd,
                mee: m.mee,
                ce: m.ce,
                diversity: m.diversity,
                best_epoch: log.best_epoch,
                steps: log.epochs.last().map_or(0, |e| e.steps),
                emotion_reads: p.sie.counters().emotion(),
                identity_evals: p.sie.counters().identity(),
            });
        }
    }
    let means = cfg
        .variants
        .iter()
        .map(|v| {
            let rs: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == v.name).collect();
            let n = rs.len() as f64;
            let mean = |f: fn(&AblationRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            VariantMean {
                variant: v.name.clone(),
                seeds: rs.len(),
                mve: mean(|r| r.mve),
                lve: mean(|r| r.lve),
                fdd: mean(|r| r.fdd),
                mee: mean(|r| r.mee),
                ce: mean(|r| r.ce),
                diversity: mean(|r| r.diversity),
            }
        })
        .collect();
    Ok(AblationReport { header, rows, means })
}
