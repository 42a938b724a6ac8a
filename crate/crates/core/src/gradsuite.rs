//! Finite-difference checks of every differentiable graph op and of the
//! composite networks, on random small instances in `f64`.
//!
//! Each instance stores its inputs as parameters so the checker perturbs
//! them, and reduces the output to a scalar through a random weighting so
//! that no gradient vanishes by symmetry.

use rand::Rng as _;
use rayon::prelude::*;

use crate::corpus::synth_subject;
use crate::error::Result;
use crate::hifb::{pair_table, stream_update, FusionUpdate, Hifb, HifbConfig, StyleModulator};
use crate::numerics::nn::LN_EPS;
use crate::numerics::{GradCheck, Graph, ParamStore, Tensor, TransformerBlock, Var};
use crate::pipeline::{FusionMode, Representation, SieConfig, SieEncoder, SieInput};
use crate::vqvae::{VqConfig, VqVae};
use crate::{rng_for, Rng};

type Loss = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var> + Sync>;

/// One random problem: parameters and a scalar loss over them.
pub struct Instance {
    pub params: ParamStore<f64>,
    pub loss: Loss,
}

pub struct Case {
    pub name: &'static str,
    pub build: fn(&mut Rng) -> Result<Instance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub instances: usize,
    pub failed: usize,
    /// Largest error over all checked elements.
    pub max_error: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.failed == 0 && self.instances > 0
    }
}

fn rand_tensor(rng: &mut Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("consistent dims")
}

fn dim(rng: &mut Rng, hi: usize) -> usize {
    rng.gen_range(1..=hi)
}

/// Builder for op instances: named random inputs plus a weighting of the
/// output.
struct Inputs {
    ps: ParamStore<f64>,
}

impl Inputs {
    fn new() -> Self {
        Self { ps: ParamStore::new() }
    }

    fn add(mut self, name: &str, t: Tensor<f64>) -> Self {
        self.ps.insert(name, t).expect("fresh name");
        self
    }
}

/// `sum(out ⊙ w)` for a fixed random `w` shaped like `out`.
fn weighted(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let (r, c) = (g.value(out).rows(), g.value(out).cols());
    let w = rand_tensor(&mut rng_for(seed, 0xAB), r, c);
    let w = g.input(w)?;
    let p = g.mul(out, w)?;
    g.sum(p)
}

macro_rules! op_case {
    ($name:literal, |$rng:ident| $inputs:expr, |$g:ident, $p:ident| $body:expr) => {
        Case {
            name: $name,
            build: |$rng: &mut Rng| {
                let seed: u64 = $rng.gen();
                let inputs: Inputs = $inputs;
                Ok(Instance {
                    params: inputs.ps,
                    loss: Box::new(move |$g: &mut Graph<f64>, $p: &ParamStore<f64>| {
                        let out: Var = $body;
                        weighted($g, out, seed)
                    }),
                })
            },
        }
    };
}

fn op_cases() -> Vec<Case> {
    vec![
        op_case!(
            "matmul",
            |rng| {
                let (r, k, c) = (dim(rng, 4), dim(rng, 4), dim(rng, 4));
                Inputs::new().add("a", rand_tensor(rng, r, k)).add("b", rand_tensor(rng, k, c))
            },
            |g, p| {
                let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
                g.matmul(a, b)?
            }
        ),
        op_case!(
            "matmul_nt",
            |rng| {
                let (r, k, c) = (dim(rng, 4), dim(rng, 4), dim(rng, 4));
                Inputs::new().add("a", rand_tensor(rng, r, k)).add("b", rand_tensor(rng, c, k))
            },
            |g, p| {
                let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
                g.matmul_nt(a, b)?
            }
        ),
        op_case!(
            "transpose",
            |rng| {
                let (r, c) = (dim(rng, 4), dim(rng, 4));
                Inputs::new().add("a", rand_tensor(rng, r, c))
            },
            |g, p| {
                let a = g.param(p, "a")?;
                g.transpose(a)?
            }
        ),
        op_case!(
            "add",
            |rng| {
                let (r, c) = (dim(rng, 4), dim(rng, 4));
                Inputs::new().add("a", rand_tensor(rng, r, c)).add("b", rand_tensor(rng, r, c))
            },
            |g, p| {
                let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
                g.add(a, b)?
            }
        ),
        op_case!(
            "sub",
            |rng| {
                let (r, c) = (dim(rng, 4), dim(rng, 4));
                Inputs::new().add("a", rand_tensor(rng, r, c)).add("b", rand_tensor(rng, r, c))
            },
            |g, p| {
                let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
                g.sub(a, b)?
            }
        ),
        op_case!(
            "mul",
            |rng| {
                let (r, c) = (dim(rng, 4), dim(rng, 4));
                Inputs::new().add("a", rand_tensor(rng, r, c)).add("b", rand_tensor(rng, r, c))
            },
            |g, p| {
                let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
                g.mul(a, b)?
            }
        ),
        op_case!(
            "add_row",
            |rng| {
                let (r, c) = (dim(rng, 4), dim(rng, 4));
                Inputs::new().add("a", rand_tensor(rng, r, c)).add("b", rand_tensor(rng, 1, c))
            },
            |g, p| {
                let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
                g.add_row(a, b)?
            }
        ),
        op_case!(
            "mul_row",
            |rng| {
                let (r, c) = (dim(rng, 4), dim(rng, 4));
                Inputs::new().add("a", rand_tensor(rng, r, c)).add("b", rand_tensor(rng, 1, c))
            },
            |g, p| {
                let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
                g.mul_row(a, b)?
            }
        ),
        op_case!(
            "scale",
            |rng| {
                let (r, c) = (dim(rng, 4), dim(rng, 4));
                Inputs::new().add("a", rand_tensor(rng, r, c))
            },
            |g, p| {
                let a = g.param(p, "a")?;
                g.scale(a, -1.7)?
            }
        ),
        op_case!(
            "relu",
            |rng| {
                let (r, c) = (dim(rng, 4), dim(rng, 4));
                Inputs::new().add("a", rand_tensor(rng, r, c))
            },
            |g, p| {
                let a = g.param(p, "a")?;
                g.relu(a)?
            }
        ),
        op_case!(
            "gelu",
            |rng| {
                let (r, c) = (dim(rng, 4), dim(rng, 4));
                Inputs::new().add("a", rand_tensor(rng, r, c).map(|x| 3.0 * x))
            },
            |g, p| {
                let a = g.param(p, "a")?;
                g.gelu(a)?
            }
        ),
        op_case!(
            "sigmoid",
            |rng| {
                let (r, c) = (dim(rng, 4), dim(rng, 4));
                Inputs::new().add("a", rand_tensor(rng, r, c).map(|x| 3.0 * x))
            },
            |g, p| {
                let a = g.param(p, "a")?;
                g.sigmoid(a)?
            }
        ),
        op_case!(
            "softmax",
            |rng| {
                let (r, c) = (dim(rng, 4), dim(rng, 5));
                Inputs::new().add("a", rand_tensor(rng, r, c).map(|x| 2.0 * x))
            },
            |g, p| {
                let a = g.param(p, "a")?;
                g.softmax(a)?
            }
        ),
        op_case!(
            "layer_norm",
            |rng| {
                let (r, c) = (dim(rng, 4), rng.gen_range(2..=6));
                Inputs::new().add("a", rand_tensor(rng, r, c))
            },
            |g, p| {
                let a = g.param(p, "a")?;
                g.layer_norm(a, LN_EPS)?
            }
        ),
        op_case!(
            "concat_rows",
            |rng| {
                let (r1, r2, c) = (dim(rng, 3), dim(rng, 3), dim(rng, 4));
                Inputs::new().add("a", rand_tensor(rng, r1, c)).add("b", rand_tensor(rng, r2, c))
            },
            |g, p| {
                let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
                g.concat_rows(&[a, b, a])?
            }
        ),
        op_case!(
            "concat_cols",
            |rng| {
                let (r, c1, c2) = (dim(rng, 3), dim(rng, 3), dim(rng, 4));
                Inputs::new().add("a", rand_tensor(rng, r, c1)).add("b", rand_tensor(rng, r, c2))
            },
            |g, p| {
                let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
                g.concat_cols(&[b, a])?
            }
        ),
        op_case!(
            "slice_rows",
            |rng| {
                let c = dim(rng, 4);
                Inputs::new().add("a", rand_tensor(rng, 5, c))
            },
            |g, p| {
                let a = g.param(p, "a")?;
                g.slice_rows(a, 1, 4)?
            }
        ),
        op_case!(
            "slice_cols",
            |rng| {
                let r = dim(rng, 4);
                Inputs::new().add("a", rand_tensor(rng, r, 5))
            },
            |g, p| {
                let a = g.param(p, "a")?;
                g.slice_cols(a, 2, 5)?
            }
        ),
        op_case!(
            "gather_rows",
            |rng| {
                let c = dim(rng, 4);
                Inputs::new().add("a", rand_tensor(rng, 4, c))
            },
            |g, p| {
                let a = g.param(p, "a")?;
                g.gather_rows(a, &[3, 0, 3, 1])?
            }
        ),
        op_case!(
            "pair_sum",
            |rng| {
                let (t, c) = (dim(rng, 4), dim(rng, 4));
                Inputs::new().add("a", rand_tensor(rng, t, c)).add("b", rand_tensor(rng, t, c))
            },
            |g, p| {
                let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
                let t = g.value(a).rows();
                g.pair_sum(a, b, crate::hifb::pair_indices(t, None))?
            }
        ),
        op_case!(
            "mean_rows",
            |rng| {
                let (r, c) = (dim(rng, 4), dim(rng, 4));
                Inputs::new().add("a", rand_tensor(rng, r, c))
            },
            |g, p| {
                let a = g.param(p, "a")?;
                g.mean_rows(a)?
            }
        ),
        op_case!(
            "repeat_rows",
            |rng| {
                let c = dim(rng, 4);
                Inputs::new().add("a", rand_tensor(rng, 1, c))
            },
            |g, p| {
                let a = g.param(p, "a")?;
                g.repeat_rows(a, 3)?
            }
        ),
        op_case!(
            "mse",
            |rng| {
                let (r, c) = (dim(rng, 4), dim(rng, 4));
                Inputs::new().add("a", rand_tensor(rng, r, c)).add("b", rand_tensor(rng, r, c))
            },
            |g, p| {
                let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
                g.mse(a, b)?
            }
        ),
        op_case!(
            "sum",
            |rng| {
                let (r, c) = (dim(rng, 4), dim(rng, 4));
                Inputs::new().add("a", rand_tensor(rng, r, c))
            },
            |g, p| {
                let a = g.param(p, "a")?;
                g.sum(a)?
            }
        ),
    ]
}

fn small_hifb(rng: &mut Rng, layers: usize) -> HifbConfig {
    HifbConfig {
        layers,
        heads: 2,
        d: 4,
        n_f: rng.gen_range(1..=3),
        pair_band: if rng.gen_bool(0.5) { None } else { Some(rng.gen_range(0..=2)) },
        positional: rng.gen_bool(0.5),
    }
}

/// Moves every parameter off its initial value, so no bias is exactly zero.
fn jitter(ps: &mut ParamStore<f64>, rng: &mut Rng) {
    let names: Vec<String> = ps.names().map(str::to_string).collect();
    for n in names {
        if let Some(t) = ps.get_mut(&n) {
            t.data_mut().iter_mut().for_each(|x| *x += rng.gen_range(-0.2..0.2));
        }
    }
}

fn composite_cases() -> Vec<Case> {
    vec![
        Case {
            name: "modulate",
            build: |rng| {
                let (t, dm, de, did) = (dim(rng, 4), dim(rng, 3), dim(rng, 3), dim(rng, 3));
                let modu = StyleModulator::new("mod", dm, de, did, 4);
                let mut ps = Inputs::new()
                    .add("m", rand_tensor(rng, t, dm))
                    .add("e", rand_tensor(rng, t, de))
                    .add("z", rand_tensor(rng, 1, did))
                    .ps;
                modu.init(&mut ps, rng)?;
                jitter(&mut ps, rng);
                let seed = rng.gen();
                Ok(Instance {
                    params: ps,
                    loss: Box::new(move |g, p| {
                        let (m, e, z) = (g.param(p, "m")?, g.param(p, "e")?, g.param(p, "z")?);
                        let (mt, et) = modu.forward(g, p, m, e, z)?;
                        let both = g.concat_cols(&[mt, et])?;
                        weighted(g, both, seed)
                    }),
                })
            },
        },
        Case {
            name: "stream_update",
            build: |rng| {
                let (t, n_f) = (dim(rng, 4), dim(rng, 3));
                let block = TransformerBlock::new("blk", 4, 2)?;
                let mut ps = Inputs::new()
                    .add("f", rand_tensor(rng, n_f, 4))
                    .add("s", rand_tensor(rng, t, 4))
                    .ps;
                block.init(&mut ps, rng)?;
                jitter(&mut ps, rng);
                let seed = rng.gen();
                Ok(Instance {
                    params: ps,
                    loss: Box::new(move |g, p| {
                        let (f, s) = (g.param(p, "f")?, g.param(p, "s")?);
                        let y = stream_update(g, p, &block, f, s)?;
                        weighted(g, y, seed)
                    }),
                })
            },
        },
        Case {
            name: "fusion_update",
            build: |rng| {
                let (t, n_f) = (dim(rng, 3), dim(rng, 3));
                let band = if rng.gen_bool(0.5) { None } else { Some(rng.gen_range(0..=1)) };
                let fu = FusionUpdate::new("fu", 4, 2)?;
                let mut ps = Inputs::new()
                    .add("f", rand_tensor(rng, n_f, 4))
                    .add("m", rand_tensor(rng, t, 4))
                    .add("e", rand_tensor(rng, t, 4))
                    .ps;
                fu.init(&mut ps, rng)?;
                jitter(&mut ps, rng);
                let seed = rng.gen();
                Ok(Instance {
                    params: ps,
                    loss: Box::new(move |g, p| {
                        let (f, m, e) = (g.param(p, "f")?, g.param(p, "m")?, g.param(p, "e")?);
                        let table = pair_table(g, m, e, band)?;
                        let y = fu.forward(g, p, f, table, None)?;
                        weighted(g, y, seed)
                    }),
                })
            },
        },
        Case {
            name: "hifb_forward",
            build: |rng| {
                let t = dim(rng, 4);
                let layers = rng.gen_range(1..=2);
                let cfg = small_hifb(rng, layers);
                let modu = StyleModulator::new("mod", 3, 3, 2, 4);
                let hifb = Hifb::new("hifb", cfg)?;
                let mut ps = Inputs::new()
                    .add("m", rand_tensor(rng, t, 3))
                    .add("e", rand_tensor(rng, t, 3))
                    .add("z", rand_tensor(rng, 1, 2))
                    .ps;
                modu.init(&mut ps, rng)?;
                hifb.init(&mut ps, rng)?;
                jitter(&mut ps, rng);
                let seed = rng.gen();
                Ok(Instance {
                    params: ps,
                    loss: Box::new(move |g, p| {
                        let (m, e, z) = (g.param(p, "m")?, g.param(p, "e")?, g.param(p, "z")?);
                        let y = crate::hifb::hifb_forward(g, p, &modu, &hifb, m, e, z)?;
                        weighted(g, y, seed)
                    }),
                })
            },
        },
        Case {
            name: "sie_forward",
            build: |rng| {
                let t = dim(rng, 4);
                let fusion = [FusionMode::StyleVector, FusionMode::Gate, FusionMode::XattnLate, FusionMode::Hifb]
                    [rng.gen_range(0..4)];
                let cfg = SieConfig {
                    feature_dim: 3,
                    d_id: 2,
                    id_hidden: 3,
                    fusion,
                    representation: Representation::EmotionIdentity,
                    hifb: small_hifb(rng, 1),
                };
                let sie = SieEncoder::new(cfg, 4)?;
                let mut ps = ParamStore::new();
                sie.init(&mut ps, rng)?;
                jitter(&mut ps, rng);
                let input = SieInput {
                    motion: rand_tensor(rng, t, 3),
                    emotion: rand_tensor(rng, t, 3),
                    shape: synth_subject(rng.gen(), 0).shape,
                };
                let seed = rng.gen();
                Ok(Instance {
                    params: ps,
                    loss: Box::new(move |g, p| {
                        let y = sie.forward_graph(g, p, &input)?;
                        weighted(g, y, seed)
                    }),
                })
            },
        },
        Case {
            name: "stage1_loss",
            build: |rng| {
                let t = dim(rng, 4);
                let vq = VqVae::new(VqConfig {
                    channels: 4,
                    codes: rng.gen_range(2..=6),
                    heads: 2,
                    blocks: 1,
                    positional: rng.gen_bool(0.5),
                    ..VqConfig::default()
                })?;
                let mut ps = ParamStore::new();
                vq.init(&mut ps, rng)?;
                jitter(&mut ps, rng);
                let x = rand_tensor(rng, t, crate::flame::FRAME_DIM);
                Ok(Instance {
                    params: ps,
                    loss: Box::new(move |g, p| Ok(vq.stage1_loss(g, p, &x)?.total)),
                })
            },
        },
    ]
}

/// All op cases followed by the composite networks.
pub fn cases() -> Vec<Case> {
    let mut all = op_cases();
    all.extend(composite_cases());
    all
}

pub fn run_case(case: &Case, instances: usize, seed: u64) -> Result<CaseResult> {
    let checker = GradCheck::default();
    let mut rng = rng_for(seed, 0x6AD0);
    let mut failed = 0;
    let mut max_error: f64 = 0.0;
    for _ in 0..instances {
        let inst = (case.build)(&mut rng)?;
        let report = checker.run(&inst.params, |g, p| (inst.loss)(g, p))?;
        max_error = max_error.max(report.max_error);
        if !report.passed() {
            failed += 1;
        }
    }
    Ok(CaseResult {
        name: case.name,
        instances,
        failed,
        max_error,
    })
}

pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<CaseResult>> {
    cases()
        .par_iter()
        .enumerate()
        .map(|(i, c)| run_case(c, instances, seed.wrapping_add(i as u64)))
        .collect()
}
