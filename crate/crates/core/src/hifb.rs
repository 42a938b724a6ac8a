//! Style modulation and the fusion-token interaction block, plus the
//! late-fusion baselines it is compared against.
//!
//! Both streams are projected to a common width and scaled by a style vector
//! derived from the identity embedding. Each layer then runs one transformer
//! block per stream with the fusion tokens prepended, and updates the tokens
//! by cross-attending over every (motion frame, emotion frame) pair.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::numerics::nn::{positional_encoding, FF_MULT};
use crate::numerics::{
    FeedForward, Graph, LayerNorm, Linear, MultiHeadAttention, ParamStore, TransformerBlock, Var,
};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HifbConfig {
    pub layers: usize,
    pub heads: usize,
    /// Shared stream width `d`.
    pub d: usize,
    /// Number of fusion tokens.
    pub n_f: usize,
    /// Keep only pairs with `|i − j| ≤ band`; `None` is the full product.
    pub pair_band: Option<usize>,
    /// Add a sinusoidal position table to both streams after modulation.
    pub positional: bool,
}

impl Default for HifbConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            d: 32,
            n_f: 8,
            pair_band: None,
            positional: true,
        }
    }
}

impl HifbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(config_err!("fusion needs at least one layer"));
        }
        if self.n_f == 0 {
            return Err(config_err!("n_f must be at least 1"));
        }
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(config_err!("width {} is not divisible by {} heads", self.d, self.heads));
        }
        Ok(())
    }
}

/// `W_m`, `W_e` and the bias-free `W_style`.
#[derive(Clone, Debug)]
pub struct StyleModulator {
    pub w_m: Linear,
    pub w_e: Linear,
    pub w_style: Linear,
}

impl StyleModulator {
    pub fn new(prefix: &str, d_m: usize, d_e: usize, d_id: usize, d: usize) -> Self {
        Self {
            w_m: Linear::new(format!("{prefix}.w_m"), d_m, d),
            w_e: Linear::new(format!("{prefix}.w_e"), d_e, d),
            w_style: Linear::no_bias(format!("{prefix}.w_style"), d_id, d),
        }
    }

    pub fn init<S: Scalar, R: Rng>(&self, ps: &mut ParamStore<S>, rng: &mut R) -> Result<()> {
        self.w_m.init(ps, rng)?;
        self.w_e.init(ps, rng)?;
        self.w_style.init(ps, rng)
    }

    /// `s_id = z_id · W_style`, a `1 × d` row.
    pub fn style<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, z_id: Var) -> Result<Var> {
        self.w_style.forward(g, ps, z_id)
    }

    /// `(m·W_m ⊙ s_id, e·W_e ⊙ s_id)`.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        m: Var,
        e: Var,
        z_id: Var,
    ) -> Result<(Var, Var)> {
        check_streams(g, m, e)?;
        let s = self.style(g, ps, z_id)?;
        let mp = self.w_m.forward(g, ps, m)?;
        let ep = self.w_e.forward(g, ps, e)?;
        Ok((g.mul_row(mp, s)?, g.mul_row(ep, s)?))
    }
}

fn check_streams<S: Scalar>(g: &Graph<S>, m: Var, e: Var) -> Result<usize> {
    let (tm, te) = (g.value(m).rows(), g.value(e).rows());
    if tm != te {
        return Err(shape_err!("motion stream has {tm} frames, emotion stream {te}"));
    }
    if tm == 0 {
        return Err(Error::Input("empty input streams".into()));
    }
    Ok(tm)
}

fn add_position<S: Scalar>(g: &mut Graph<S>, x: Var, on: bool) -> Result<Var> {
    if !on {
        return Ok(x);
    }
    let (t, d) = (g.value(x).rows(), g.value(x).cols());
    let pe = g.input(positional_encoding(t, d))?;
    g.add(x, pe)
}

/// Row-major `(i, j)` frame pairs with `|i − j| ≤ band`.
pub fn pair_indices(t: usize, band: Option<usize>) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..t {
        let (lo, hi) = match band {
            Some(w) => (i.saturating_sub(w), (i + w).min(t.saturating_sub(1))),
            None => (0, t.saturating_sub(1)),
        };
        out.extend((lo..=hi).map(|j| (i, j)));
    }
    out
}

/// Explicit `P × 2d` table of `[m̃_i, ẽ_j]` rows.
pub fn pair_table<S: Scalar>(g: &mut Graph<S>, m: Var, e: Var, band: Option<usize>) -> Result<Var> {
    let t = check_streams(g, m, e)?;
    let pairs = pair_indices(t, band);
    let is: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let js: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let left = g.gather_rows(m, &is)?;
    let right = g.gather_rows(e, &js)?;
    g.concat_cols(&[left, right])
}

/// Cross-attention of the fusion tokens over projected pair rows, then a
/// residual feed-forward.
#[derive(Clone, Debug)]
pub struct FusionUpdate {
    pub d: usize,
    pub ln_q: LayerNorm,
    /// Pair projection `2d → d`.
    pub pair: Linear,
    pub attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl FusionUpdate {
    pub fn new(prefix: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            d,
            ln_q: LayerNorm::new(format!("{prefix}.ln_q"), d),
            pair: Linear::new(format!("{prefix}.pair"), 2 * d, d),
            attn: MultiHeadAttention::new(format!("{prefix}.attn"), d, heads)?,
            ln_ff: LayerNorm::new(format!("{prefix}.ln_ff"), d),
            ff: FeedForward::new(&format!("{prefix}.ff"), d, FF_MULT * d),
        })
    }

    pub fn init<S: Scalar, R: Rng>(&self, ps: &mut ParamStore<S>, rng: &mut R) -> Result<()> {
        self.ln_q.init(ps)?;
        self.pair.init(ps, rng)?;
        self.attn.init(ps, rng)?;
        self.ln_ff.init(ps)?;
        self.ff.init(ps, rng)
    }

    fn finish<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        tokens: Var,
        k: Var,
        v: Var,
        weights: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let q = self.ln_q.forward(g, ps, tokens)?;
        let a = self.attn.attend(g, ps, q, k, v, weights)?;
        let f = g.add(tokens, a)?;
        let h = self.ln_ff.forward(g, ps, f)?;
        let h = self.ff.forward(g, ps, h)?;
        g.add(f, h)
    }

    /// Update from an explicit pair table.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        tokens: Var,
        pairs: Var,
        weights: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        if g.value(pairs).cols() != 2 * self.d || g.value(tokens).cols() != self.d {
            return Err(shape_err!(
                "fusion update expects {}-wide tokens and {}-wide pairs",
                self.d,
                2 * self.d
            ));
        }
        let kv = self.pair.forward(g, ps, pairs)?;
        let k = self.attn.k.forward(g, ps, kv)?;
        let v = self.attn.v.forward(g, ps, kv)?;
        self.finish(g, ps, tokens, k, v, weights)
    }

    /// Same update without materializing the pair table. The pair projection
    /// splits into a motion half and an emotion half, so every key (value) row
    /// is the sum of one projected motion frame and one projected emotion
    /// frame plus a constant row.
    pub fn forward_factored<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        tokens: Var,
        m: Var,
        e: Var,
        pairs: &[(usize, usize)],
    ) -> Result<Var> {
        let d = self.d;
        if g.value(m).cols() != d || g.value(e).cols() != d || g.value(tokens).cols() != d {
            return Err(shape_err!("fusion update expects {d}-wide streams and tokens"));
        }
        let wp = g.param(ps, &self.pair.weight())?;
        let bp = g.param(ps, &self.pair.bias_name())?;
        let top = g.slice_rows(wp, 0, d)?;
        let bottom = g.slice_rows(wp, d, 2 * d)?;
        let project = |g: &mut Graph<S>, lin: &Linear| -> Result<Var> {
            let w = g.param(ps, &lin.weight())?;
            let b = g.param(ps, &lin.bias_name())?;
            let wt = g.matmul(top, w)?;
            let wb = g.matmul(bottom, w)?;
            let a = g.matmul(m, wt)?;
            let c = g.matmul(e, wb)?;
            let rows = g.pair_sum(a, c, pairs.to_vec())?;
            let constant = g.matmul(bp, w)?;
            let constant = g.add(constant, b)?;
            g.add_row(rows, constant)
        };
        let k = project(g, &self.attn.k)?;
        let v = project(g, &self.attn.v)?;
        self.finish(g, ps, tokens, k, v, None)
    }

    /// Same update over the full product of frames in O(T) instead of
    /// O(T²): with an unrestricted pair set the attention factorizes into
    /// one attention per stream.
    pub fn forward_product<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        tokens: Var,
        m: Var,
        e: Var,
    ) -> Result<Var> {
        let d = self.d;
        if g.value(m).cols() != d || g.value(e).cols() != d || g.value(tokens).cols() != d {
            return Err(shape_err!("fusion update expects {d}-wide streams and tokens"));
        }
        let wp = g.param(ps, &self.pair.weight())?;
        let bp = g.param(ps, &self.pair.bias_name())?;
        let top = g.slice_rows(wp, 0, d)?;
        let bottom = g.slice_rows(wp, d, 2 * d)?;
        let mut parts = Vec::with_capacity(2);
        for (x, half) in [(m, top), (e, bottom)] {
            let mut kv = [x; 2];
            for (slot, lin) in kv.iter_mut().zip([&self.attn.k, &self.attn.v]) {
                let w = g.param(ps, &lin.weight())?;
                let wx = g.matmul(half, w)?;
                *slot = g.matmul(x, wx)?;
            }
            parts.push((kv[0], kv[1]));
        }
        let wv = g.param(ps, &self.attn.v.weight())?;
        let bv = g.param(ps, &self.attn.v.bias_name())?;
        let c = g.matmul(bp, wv)?;
        let c = g.add(c, bv)?;
        let q = self.ln_q.forward(g, ps, tokens)?;
        let a = self.attn.attend_product(g, ps, q, &parts, c)?;
        let f = g.add(tokens, a)?;
        let h = self.ln_ff.forward(g, ps, f)?;
        let h = self.ff.forward(g, ps, h)?;
        g.add(f, h)
    }
}

/// One interaction layer: a block per stream and a token update.
#[derive(Clone, Debug)]
pub struct HifbLayer {
    pub motion: TransformerBlock,
    pub emotion: TransformerBlock,
    pub fusion: FusionUpdate,
}

/// Runs `block` on `[tokens; stream]` and drops the token rows.
pub fn stream_update<S: Scalar>(
    g: &mut Graph<S>,
    ps: &ParamStore<S>,
    block: &TransformerBlock,
    tokens: Var,
    stream: Var,
) -> Result<Var> {
    let (n_f, t) = (g.value(tokens).rows(), g.value(stream).rows());
    if g.value(tokens).cols() != g.value(stream).cols() {
        return Err(shape_err!(
            "token width {} vs stream width {}",
            g.value(tokens).cols(),
            g.value(stream).cols()
        ));
    }
    let x = g.concat_rows(&[tokens, stream])?;
    let y = block.forward(g, ps, x)?;
    g.slice_rows(y, n_f, n_f + t)
}

#[derive(Clone, Debug)]
pub struct Hifb {
    pub cfg: HifbConfig,
    pub tokens: String,
    pub layers: Vec<HifbLayer>,
}

impl Hifb {
    pub fn new(prefix: &str, cfg: HifbConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.layers)
            .map(|l| {
                Ok(HifbLayer {
                    motion: TransformerBlock::new(&format!("{prefix}.layer{l}.motion"), cfg.d, cfg.heads)?,
                    emotion: TransformerBlock::new(&format!("{prefix}.layer{l}.emotion"), cfg.d, cfg.heads)?,
                    fusion: FusionUpdate::new(&format!("{prefix}.layer{l}.fusion"), cfg.d, cfg.heads)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            tokens: format!("{prefix}.tokens"),
            cfg,
            layers,
        })
    }

    pub fn init<S: Scalar, R: Rng>(&self, ps: &mut ParamStore<S>, rng: &mut R) -> Result<()> {
        let bound = 1.0 / (self.cfg.d as f64).sqrt();
        ps.insert_range(self.tokens.clone(), &[self.cfg.n_f, self.cfg.d], bound, rng)?;
        for l in &self.layers {
            l.motion.init(ps, rng)?;
            l.emotion.init(ps, rng)?;
            l.fusion.init(ps, rng)?;
        }
        Ok(())
    }

    /// Final motion stream after all layers, from already modulated streams.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, m: Var, e: Var) -> Result<Var> {
        let t = check_streams(g, m, e)?;
        let pairs = pair_indices(t, self.cfg.pair_band);
        let mut m = add_position(g, m, self.cfg.positional)?;
        let mut e = add_position(g, e, self.cfg.positional)?;
        let mut f = g.param(ps, &self.tokens)?;
        for layer in &self.layers {
            let m_next = stream_update(g, ps, &layer.motion, f, m)?;
            let e_next = stream_update(g, ps, &layer.emotion, f, e)?;
            f = match self.cfg.pair_band {
                None => layer.fusion.forward_product(g, ps, f, m_next, e_next)?,
                Some(_) => layer.fusion.forward_factored(g, ps, f, m_next, e_next, &pairs)?,
            };
            m = m_next;
            e = e_next;
        }
        Ok(m)
    }
}

/// Modulation followed by the interaction block.
pub fn hifb_forward<S: Scalar>(
    g: &mut Graph<S>,
    ps: &ParamStore<S>,
    modulator: &StyleModulator,
    hifb: &Hifb,
    m: Var,
    e: Var,
    z_id: Var,
) -> Result<Var> {
    let (mt, et) = modulator.forward(g, ps, m, e, z_id)?;
    hifb.forward(g, ps, mt, et)
}

fn encoder_blocks(prefix: &str, cfg: &HifbConfig) -> Result<Vec<TransformerBlock>> {
    (0..cfg.layers)
        .map(|l| TransformerBlock::new(&format!("{prefix}.block{l}"), cfg.d, cfg.heads))
        .collect()
}

fn run_blocks<S: Scalar>(
    g: &mut Graph<S>,
    ps: &ParamStore<S>,
    blocks: &[TransformerBlock],
    mut x: Var,
) -> Result<Var> {
    for b in blocks {
        x = b.forward(g, ps, x)?;
    }
    Ok(x)
}

/// Independent per-stream encoders merged by a learned sigmoid gate.
#[derive(Clone, Debug)]
pub struct GateFusion {
    pub cfg: HifbConfig,
    pub motion: Vec<TransformerBlock>,
    pub emotion: Vec<TransformerBlock>,
    pub gate: Linear,
}

impl GateFusion {
    pub fn new(prefix: &str, cfg: HifbConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            motion: encoder_blocks(&format!("{prefix}.motion"), &cfg)?,
            emotion: encoder_blocks(&format!("{prefix}.emotion"), &cfg)?,
            gate: Linear::new(format!("{prefix}.gate"), 2 * cfg.d, cfg.d),
            cfg,
        })
    }

    pub fn init<S: Scalar, R: Rng>(&self, ps: &mut ParamStore<S>, rng: &mut R) -> Result<()> {
        for b in self.motion.iter().chain(&self.emotion) {
            b.init(ps, rng)?;
        }
        self.gate.init(ps, rng)
    }

    pub fn encode<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, m: Var, e: Var) -> Result<(Var, Var)> {
        check_streams(g, m, e)?;
        let m = add_position(g, m, self.cfg.positional)?;
        let e = add_position(g, e, self.cfg.positional)?;
        Ok((run_blocks(g, ps, &self.motion, m)?, run_blocks(g, ps, &self.emotion, e)?))
    }

    /// `g ⊙ h_m + (1 − g) ⊙ h_e` from encoded streams.
    pub fn merge<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, hm: Var, he: Var) -> Result<Var> {
        let cat = g.concat_cols(&[hm, he])?;
        let logits = self.gate.forward(g, ps, cat)?;
        let gate = g.sigmoid(logits)?;
        let diff = g.sub(hm, he)?;
        let gated = g.mul(gate, diff)?;
        g.add(he, gated)
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, m: Var, e: Var) -> Result<Var> {
        let (hm, he) = self.encode(g, ps, m, e)?;
        self.merge(g, ps, hm, he)
    }
}

/// Independent per-stream encoders, then one cross-attention from the
/// motion stream onto the emotion stream.
#[derive(Clone, Debug)]
pub struct XAttnFusion {
    pub cfg: HifbConfig,
    pub motion: Vec<TransformerBlock>,
    pub emotion: Vec<TransformerBlock>,
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: MultiHeadAttention,
}

impl XAttnFusion {
    pub fn new(prefix: &str, cfg: HifbConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            motion: encoder_blocks(&format!("{prefix}.motion"), &cfg)?,
            emotion: encoder_blocks(&format!("{prefix}.emotion"), &cfg)?,
            ln_q: LayerNorm::new(format!("{prefix}.ln_q"), cfg.d),
            ln_kv: LayerNorm::new(format!("{prefix}.ln_kv"), cfg.d),
            attn: MultiHeadAttention::new(format!("{prefix}.cross"), cfg.d, cfg.heads)?,
            cfg,
        })
    }

    pub fn init<S: Scalar, R: Rng>(&self, ps: &mut ParamStore<S>, rng: &mut R) -> Result<()> {
        for b in self.motion.iter().chain(&self.emotion) {
            b.init(ps, rng)?;
        }
        self.ln_q.init(ps)?;
        self.ln_kv.init(ps)?;
        self.attn.init(ps, rng)
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, m: Var, e: Var) -> Result<Var> {
        check_streams(g, m, e)?;
        let m = add_position(g, m, self.cfg.positional)?;
        let e = add_position(g, e, self.cfg.positional)?;
        let hm = run_blocks(g, ps, &self.motion, m)?;
        let he = run_blocks(g, ps, &self.emotion, e)?;
        let q = self.ln_q.forward(g, ps, hm)?;
        let kv = self.ln_kv.forward(g, ps, he)?;
        let a = self.attn.forward(g, ps, q, kv, kv)?;
        g.add(hm, a)
    }
}

/// Motion-stream encoder conditioned on one sequence-level style vector:
/// the time-mean of the emotion features concatenated with `z_id`.
#[derive(Clone, Debug)]
pub struct StyleVectorFusion {
    pub cfg: HifbConfig,
    pub w_m: Linear,
    pub style: Linear,
    pub blocks: Vec<TransformerBlock>,
}

impl StyleVectorFusion {
    pub fn new(prefix: &str, cfg: HifbConfig, d_m: usize, d_e: usize, d_id: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            w_m: Linear::new(format!("{prefix}.w_m"), d_m, cfg.d),
            style: Linear::new(format!("{prefix}.style"), d_e + d_id, cfg.d),
            blocks: encoder_blocks(&format!("{prefix}.motion"), &cfg)?,
            cfg,
        })
    }

    pub fn init<S: Scalar, R: Rng>(&self, ps: &mut ParamStore<S>, rng: &mut R) -> Result<()> {
        self.w_m.init(ps, rng)?;
        self.style.init(ps, rng)?;
        for b in &self.blocks {
            b.init(ps, rng)?;
        }
        Ok(())
    }

    /// `style_input` is the `1 × (d_e + d_id)` style vector.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        m: Var,
        style_input: Var,
    ) -> Result<Var> {
        if g.value(m).rows() == 0 {
            return Err(Error::Input("empty motion stream".into()));
        }
        let h = self.w_m.forward(g, ps, m)?;
        let s = self.style.forward(g, ps, style_input)?;
        let h = g.add_row(h, s)?;
        let h = add_position(g, h, self.cfg.positional)?;
        run_blocks(g, ps, &self.blocks, h)
    }
}

/// Time-mean of the emotion stream joined with the identity row.
pub fn style_vector<S: Scalar>(g: &mut Graph<S>, e: Var, z_id: Var) -> Result<Var> {
    let pooled = g.mean_rows(e)?;
    g.concat_cols(&[pooled, z_id])
}
