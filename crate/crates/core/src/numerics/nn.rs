//! Layers assembled from tape ops.
//!
//! A layer is a name prefix plus its dimensions; its weights live in a
//! [`ParamStore`]. `init` draws the weights, `forward` binds them into a
//! [`Graph`].

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{config_err, Result};
use crate::Scalar;

pub const LN_EPS: f64 = 1e-5;

/// `y = x·w + b`, `w` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub prefix: String,
    pub fan_in: usize,
    pub fan_out: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, fan_in: usize, fan_out: usize) -> Self {
        Self {
            prefix: prefix.into(),
            fan_in,
            fan_out,
            bias: true,
        }
    }

    pub fn no_bias(prefix: impl Into<String>, fan_in: usize, fan_out: usize) -> Self {
        Self {
            bias: false,
            ..Self::new(prefix, fan_in, fan_out)
        }
    }

    pub fn weight(&self) -> String {
        format!("{}.w", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.prefix)
    }

    pub fn init<S: Scalar, R: Rng>(&self, ps: &mut ParamStore<S>, rng: &mut R) -> Result<()> {
        ps.insert_uniform(self.weight(), &[self.fan_in, self.fan_out], self.fan_in, rng)?;
        if self.bias {
            ps.insert_filled(self.bias_name(), &[self.fan_out], 0.0)?;
        }
        Ok(())
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = g.param(ps, &self.weight())?;
        let y = g.matmul(x, w)?;
        if self.bias {
            let b = g.param(ps, &self.bias_name())?;
            g.add_row(y, b)
        } else {
            Ok(y)
        }
    }
}

/// Free-standing linear map, `linear(x, w, b) = x·w + b`.
pub fn linear<S: Scalar>(g: &mut Graph<S>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Layer norm with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub prefix: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(prefix: impl Into<String>, dim: usize) -> Self {
        Self {
            prefix: prefix.into(),
            dim,
        }
    }

    pub fn init<S: Scalar>(&self, ps: &mut ParamStore<S>) -> Result<()> {
        ps.insert_filled(format!("{}.gamma", self.prefix), &[self.dim], 1.0)?;
        ps.insert_filled(format!("{}.beta", self.prefix), &[self.dim], 0.0)
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, S::of(LN_EPS))?;
        let gamma = g.param(ps, &format!("{}.gamma", self.prefix))?;
        let beta = g.param(ps, &format!("{}.beta", self.prefix))?;
        let y = g.mul_row(n, gamma)?;
        g.add_row(y, beta)
    }
}

/// Scaled dot-product attention over `heads` heads with input and output
/// projections. No causal mask.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub prefix: String,
    pub dim: usize,
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl MultiHeadAttention {
    pub fn new(prefix: impl Into<String>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(config_err!("width {dim} is not divisible by {heads} heads"));
        }
        let prefix = prefix.into();
        Ok(Self {
            q: Linear::new(format!("{prefix}.q"), dim, dim),
            k: Linear::new(format!("{prefix}.k"), dim, dim),
            v: Linear::new(format!("{prefix}.v"), dim, dim),
            o: Linear::new(format!("{prefix}.o"), dim, dim),
            prefix,
            dim,
            heads,
        })
    }

    pub fn init<S: Scalar, R: Rng>(&self, ps: &mut ParamStore<S>, rng: &mut R) -> Result<()> {
        for l in [&self.q, &self.k, &self.v, &self.o] {
            l.init(ps, rng)?;
        }
        Ok(())
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        q: Var,
        k: Var,
        v: Var,
    ) -> Result<Var> {
        let kp = self.k.forward(g, ps, k)?;
        let vp = self.v.forward(g, ps, v)?;
        self.attend(g, ps, q, kp, vp, None)
    }

    /// Attention with keys and values already projected. When `weights` is
    /// given, each head's attention matrix node is pushed onto it.
    pub fn attend<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        q: Var,
        kp: Var,
        vp: Var,
        mut weights: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let qp = self.q.forward(g, ps, q)?;
        let dh = self.dim / self.heads;
        let scale = S::of(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(qp, a, b)?;
            let kh = g.slice_cols(kp, a, b)?;
            let vh = g.slice_cols(vp, a, b)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let attn = g.softmax(scores)?;
            if let Some(w) = weights.as_deref_mut() {
                w.push(attn);
            }
            outs.push(g.matmul(attn, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        self.o.forward(g, ps, cat)
    }

    /// Attention over the Cartesian product of several key sets, where the
    /// key (value) of a combination is the sum of one row from each set plus
    /// `v_const`. Scores are separable, so the softmax over combinations is
    /// the product of per-set softmaxes and the output is a sum of per-set
    /// attentions. A constant key row would cancel and is omitted.
    pub fn attend_product<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        q: Var,
        parts: &[(Var, Var)],
        v_const: Var,
    ) -> Result<Var> {
        let qp = self.q.forward(g, ps, q)?;
        let n = g.value(qp).rows();
        let dh = self.dim / self.heads;
        let scale = S::of(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(qp, a, b)?;
            let c = g.slice_cols(v_const, a, b)?;
            let mut acc = g.repeat_rows(c, n)?;
            for &(kp, vp) in parts {
                let kh = g.slice_cols(kp, a, b)?;
                let vh = g.slice_cols(vp, a, b)?;
                let scores = g.matmul_nt(qh, kh)?;
                let scores = g.scale(scores, scale)?;
                let attn = g.softmax(scores)?;
                let o = g.matmul(attn, vh)?;
                acc = g.add(acc, o)?;
            }
            outs.push(acc);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        self.o.forward(g, ps, cat)
    }
}

/// Two-layer position-wise MLP with GELU.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(prefix: &str, dim: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(format!("{prefix}.up"), dim, hidden),
            down: Linear::new(format!("{prefix}.down"), hidden, dim),
        }
    }

    pub fn init<S: Scalar, R: Rng>(&self, ps: &mut ParamStore<S>, rng: &mut R) -> Result<()> {
        self.up.init(ps, rng)?;
        self.down.init(ps, rng)
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, ps, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, ps, h)
    }
}

/// Pre-LN encoder block: `x + MHA(LN(x))`, then `+ FF(LN(·))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

pub const FF_MULT: usize = 4;

impl TransformerBlock {
    pub fn new(prefix: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(format!("{prefix}.ln1"), dim),
            attn: MultiHeadAttention::new(format!("{prefix}.attn"), dim, heads)?,
            ln2: LayerNorm::new(format!("{prefix}.ln2"), dim),
            ff: FeedForward::new(&format!("{prefix}.ff"), dim, FF_MULT * dim),
        })
    }

    pub fn init<S: Scalar, R: Rng>(&self, ps: &mut ParamStore<S>, rng: &mut R) -> Result<()> {
        self.ln1.init(ps)?;
        self.attn.init(ps, rng)?;
        self.ln2.init(ps)?;
        self.ff.init(ps, rng)
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, ps, x)?;
        let a = self.attn.forward(g, ps, h, h, h)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, ps, x)?;
        let f = self.ff.forward(g, ps, h)?;
        g.add(x, f)
    }
}

/// Fixed sinusoidal position table, `T × dim`.
pub fn positional_encoding<S: Scalar>(t: usize, dim: usize) -> super::tensor::Tensor<S> {
    let mut data = Vec::with_capacity(t * dim);
    for pos in 0..t {
        for i in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * freq;
            data.push(S::of(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    super::tensor::Tensor::matrix(t, dim, data).expect("table shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;
    use rand::SeedableRng;

    fn rng() -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn identity_weights_pass_input_through() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("l.w", Tensor::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap()).unwrap();
        ps.insert("l.b", Tensor::new(vec![2], vec![0., 0.]).unwrap()).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(1, 2, vec![1., 2.]).unwrap()).unwrap();
        let y = Linear::new("l", 2, 2).forward(&mut g, &ps, x).unwrap();
        assert_eq!(g.value(y).data(), &[1., 2.]);
    }

    #[test]
    fn zero_weights_pass_bias() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("l.w", Tensor::zeros(&[2, 2])).unwrap();
        ps.insert("l.b", Tensor::new(vec![2], vec![3., 4.]).unwrap()).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(1, 2, vec![1., 2.]).unwrap()).unwrap();
        let y = Linear::new("l", 2, 2).forward(&mut g, &ps, x).unwrap();
        assert_eq!(g.value(y).data(), &[3., 4.]);
    }

    #[test]
    fn heads_must_divide_width() {
        assert!(MultiHeadAttention::new("a", 6, 4).is_err());
        assert!(MultiHeadAttention::new("a", 8, 4).is_ok());
    }

    #[test]
    fn single_key_returns_projected_value_regardless_of_query() {
        let mha = MultiHeadAttention::new("a", 4, 2).unwrap();
        let mut ps = ParamStore::<f64>::new();
        mha.init(&mut ps, &mut rng()).unwrap();
        let kv = Tensor::matrix(1, 4, vec![0.3, -0.2, 0.5, 0.1]).unwrap();
        let run = |q: Vec<f64>| {
            let mut g = Graph::new();
            let q = g.input(Tensor::matrix(2, 4, q).unwrap()).unwrap();
            let k = g.input(kv.clone()).unwrap();
            let y = mha.forward(&mut g, &ps, q, k, k).unwrap();
            g.value(y).clone()
        };
        let a = run(vec![1., 2., 3., 4., -1., 0., 0.5, 2.]);
        let b = run(vec![9., -3., 0., 0., 0., 0., 0., 0.]);
        assert!(a.max_abs_diff(&b) < 1e-12);
        // both query rows read the same single value row
        assert!((a.get(0, 2) - a.get(1, 2)).abs() < 1e-12);
    }

    #[test]
    fn dominant_key_saturates_attention() {
        let mha = MultiHeadAttention::new("a", 2, 1).unwrap();
        let mut ps = ParamStore::<f64>::new();
        for l in [&mha.q, &mha.k, &mha.v, &mha.o] {
            ps.insert(l.weight(), Tensor::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap()).unwrap();
            ps.insert(l.bias_name(), Tensor::zeros(&[2])).unwrap();
        }
        let mut g = Graph::new();
        let kv = g
            .input(Tensor::matrix(3, 2, vec![40., 0., 0., 1., 1., 0.]).unwrap())
            .unwrap();
        let y = mha.forward(&mut g, &ps, kv, kv, kv).unwrap();
        // q = k: row 0 dominates every query with a positive first coordinate
        let out = g.value(y);
        assert!((out.get(0, 0) - 40.0).abs() < 1e-6);
        assert!((out.get(2, 0) - 40.0).abs() < 1e-6);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mha = MultiHeadAttention::new("a", 8, 4).unwrap();
        let mut ps = ParamStore::<f32>::new();
        mha.init(&mut ps, &mut rng()).unwrap();
        let mut r = rng();
        let mut g = Graph::new();
        let data: Vec<f32> = (0..5 * 8).map(|_| r.gen_range(-2.0..2.0)).collect();
        let x = g.input(Tensor::matrix(5, 8, data).unwrap()).unwrap();
        let mut weights = Vec::new();
        let kp = mha.k.forward(&mut g, &ps, x).unwrap();
        let vp = mha.v.forward(&mut g, &ps, x).unwrap();
        mha.attend(&mut g, &ps, x, kp, vp, Some(&mut weights)).unwrap();
        assert_eq!(weights.len(), 4);
        for w in weights {
            let t = g.value(w);
            for i in 0..t.rows() {
                let s: f32 = t.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let block = TransformerBlock::new("b", 8, 2).unwrap();
        let mut ps = ParamStore::<f32>::new();
        block.init(&mut ps, &mut rng()).unwrap();
        let x: Vec<f32> = (0..24).map(|i| (i as f32 * 0.3).sin()).collect();
        let run = || {
            let mut g = Graph::new();
            let xv = g.input(Tensor::matrix(3, 8, x.clone()).unwrap()).unwrap();
            let y = block.forward(&mut g, &ps, xv).unwrap();
            g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
