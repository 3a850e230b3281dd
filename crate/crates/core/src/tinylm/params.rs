use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, Real};

/// Per-block tensor offsets.
pub(crate) mod blk {
    pub const LN1_G: usize = 0;
    pub const LN1_B: usize = 1;
    pub const W_QKV: usize = 2;
    pub const B_QKV: usize = 3;
    pub const W_O: usize = 4;
    pub const B_O: usize = 5;
    pub const LN2_G: usize = 6;
    pub const LN2_B: usize = 7;
    pub const W_FC: usize = 8;
    pub const B_FC: usize = 9;
    pub const W_PROJ: usize = 10;
    pub const B_PROJ: usize = 11;
    pub const COUNT: usize = 12;
}

pub(crate) const TOK_EMB: usize = 0;
pub(crate) const POS_EMB: usize = 1;

pub(crate) fn block(layer: usize, which: usize) -> usize {
    2 + layer * blk::COUNT + which
}

/// Final layer norm and unembedding, offsets after the last block.
pub(crate) fn head(num_layers: usize, which: usize) -> usize {
    2 + num_layers * blk::COUNT + which
}
pub(crate) const LNF_G: usize = 0;
pub(crate) const LNF_B: usize = 1;
pub(crate) const HEAD_W: usize = 2;
pub(crate) const HEAD_B: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

/// Named parameter tensors in a fixed order. Gradients and optimizer state
/// use the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    pub tensors: Vec<Tensor<F>>,
}

pub(crate) fn layout(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (v, d, t, ff) = (c.vocab_size, c.d_model, c.context_length, c.d_ff);
    let mut out = vec![
        ("tok_emb".to_string(), vec![v, d]),
        ("pos_emb".to_string(), vec![t, d]),
    ];
    for l in 0..c.num_layers {
        let p = |n: &str| format!("blocks.{l}.{n}");
        out.extend([
            (p("ln1.g"), vec![d]),
            (p("ln1.b"), vec![d]),
            (p("attn.w_qkv"), vec![d, 3 * d]),
            (p("attn.b_qkv"), vec![3 * d]),
            (p("attn.w_o"), vec![d, d]),
            (p("attn.b_o"), vec![d]),
            (p("ln2.g"), vec![d]),
            (p("ln2.b"), vec![d]),
            (p("mlp.w_fc"), vec![d, ff]),
            (p("mlp.b_fc"), vec![ff]),
            (p("mlp.w_proj"), vec![ff, d]),
            (p("mlp.b_proj"), vec![d]),
        ]);
    }
    out.extend([
        ("ln_f.g".to_string(), vec![d]),
        ("ln_f.b".to_string(), vec![d]),
        ("head.w".to_string(), vec![d, v]),
        ("head.b".to_string(), vec![v]),
    ]);
    out
}

impl<F: Real> Params<F> {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            tensors: layout(config)
                .into_iter()
                .map(|(name, shape)| {
                    let n = shape.iter().product();
                    Tensor {
                        name,
                        shape,
                        data: vec![F::zero(); n],
                    }
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: vec![F::zero(); t.data.len()],
                })
                .collect(),
        }
    }

    /// Normal(0, 0.02) weights, residual projections scaled by
    /// `1/sqrt(2 * num_layers)`, unit layer-norm gains, zero biases.
    pub fn init(config: &ModelConfig) -> Self {
        let mut p = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = 0.02;
        let proj_std = std / ((2 * config.num_layers) as f64).sqrt();
        for t in &mut p.tensors {
            let name = t.name.as_str();
            let sigma = if name.ends_with(".g") {
                t.data.iter_mut().for_each(|x| *x = F::one());
                continue;
            } else if t.shape.len() == 1 {
                continue;
            } else if name.ends_with("attn.w_o") || name.ends_with("mlp.w_proj") {
                proj_std
            } else {
                std
            };
            let dist = Normal::new(0.0, sigma).unwrap();
            for x in &mut t.data {
                *x = F::of(dist.sample(&mut rng));
            }
        }
        p
    }

    pub fn cast<G: Real>(&self) -> Params<G> {
        Params {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|&x| G::of(x.as_f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn mat(&self, i: usize) -> ArrayView2<'_, F> {
        let t = &self.tensors[i];
        ArrayView2::from_shape((t.shape[0], t.shape[1]), &t.data).unwrap()
    }

    pub fn vec(&self, i: usize) -> ArrayView1<'_, F> {
        ArrayView1::from(&self.tensors[i].data[..])
    }

    pub fn mat_mut(&mut self, i: usize) -> ArrayViewMut2<'_, F> {
        let t = &mut self.tensors[i];
        ArrayViewMut2::from_shape((t.shape[0], t.shape[1]), &mut t.data).unwrap()
    }

    pub fn vec_mut(&mut self, i: usize) -> ArrayViewMut1<'_, F> {
        ArrayViewMut1::from(&mut self.tensors[i].data[..])
    }

    pub fn find(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Squared L2 norm over all tensors, accumulated in f64.
    pub fn sq_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|x| {
                let v = x.as_f64();
                v * v
            })
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }
}
