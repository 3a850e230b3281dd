use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::hooks::InterventionHook;
use super::params::{blk, block, head, HEAD_B, HEAD_W, LNF_B, LNF_G, POS_EMB, TOK_EMB};
use super::{Model, Real};
use crate::error::{Error, Result};
use crate::synthlang::TokenId;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Residual-stream rows captured during one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualCapture<F> {
    pub layers: Vec<usize>,
    pub tokens: Vec<TokenId>,
    /// `rows[i]` has shape `(positions, d_model)` for `layers[i]`.
    pub rows: Vec<Array2<F>>,
}

impl<F> ResidualCapture<F> {
    pub fn layer(&self, layer: usize) -> Option<&Array2<F>> {
        self.layers
            .iter()
            .position(|&l| l == layer)
            .map(|i| &self.rows[i])
    }
}

/// Output of a batched forward pass; sequences are stacked row-wise.
#[derive(Debug, Clone)]
pub struct BatchOutput<F> {
    pub logits: Array2<F>,
    pub offsets: Vec<usize>,
    pub capture_layers: Vec<usize>,
    /// Stacked captures, one matrix per entry of `capture_layers`.
    pub captures: Vec<Array2<F>>,
}

impl<F: Real> BatchOutput<F> {
    pub fn range(&self, seq: usize) -> std::ops::Range<usize> {
        self.offsets[seq]..self.offsets[seq + 1]
    }

    pub fn logits_of(&self, seq: usize) -> ArrayView2<'_, F> {
        self.logits.slice(s![self.range(seq), ..])
    }

    pub fn capture_of(&self, layer: usize, seq: usize) -> Option<ArrayView2<'_, F>> {
        let i = self.capture_layers.iter().position(|&l| l == layer)?;
        Some(self.captures[i].slice(s![self.range(seq), ..]))
    }
}

pub(crate) struct LnCache<F> {
    pub xhat: Array2<F>,
    pub rstd: Array1<F>,
}

pub(crate) struct BlockCache<F> {
    pub ln1: LnCache<F>,
    pub h1: Array2<F>,
    pub qkv: Array2<F>,
    /// Attention probabilities per (sequence, head), each `len * len` row-major.
    pub probs: Vec<Vec<Vec<F>>>,
    pub att: Array2<F>,
    pub ln2: LnCache<F>,
    pub h2: Array2<F>,
    pub fc_pre: Array2<F>,
    pub fc_act: Array2<F>,
}

pub(crate) struct Cache<F> {
    pub tokens: Vec<TokenId>,
    pub positions: Vec<usize>,
    pub offsets: Vec<usize>,
    pub blocks: Vec<BlockCache<F>>,
    pub lnf: LnCache<F>,
    pub hf: Array2<F>,
}

pub(crate) fn layernorm<F: Real>(
    x: ArrayView2<F>,
    g: ArrayView1<F>,
    b: ArrayView1<F>,
) -> (Array2<F>, LnCache<F>) {
    let (rows, d) = x.dim();
    let inv_d = F::of(1.0 / d as f64);
    let eps = F::of(LN_EPS);
    let mut xhat = Array2::<F>::zeros((rows, d));
    let mut rstd = Array1::<F>::zeros(rows);
    let mut y = Array2::<F>::zeros((rows, d));
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.sum() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (row[c] - mean) * rs;
            xhat[[r, c]] = h;
            y[[r, c]] = h * g[c] + b[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub(crate) fn gelu<F: Real>(x: F) -> F {
    let half = F::of(0.5);
    let inner = F::of(GELU_C) * (x + F::of(GELU_A) * x * x * x);
    half * x * (F::one() + inner.tanh())
}

pub(crate) fn gelu_grad<F: Real>(x: F) -> F {
    let half = F::of(0.5);
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * a * x * x)
}

/// Causal multi-head attention over each stacked sequence. Returns the
/// concatenated head outputs and, when requested, the probabilities.
pub(crate) fn attention<F: Real>(
    qkv: &Array2<F>,
    offsets: &[usize],
    heads: usize,
    keep_probs: bool,
) -> (Array2<F>, Vec<Vec<Vec<F>>>) {
    let rows = qkv.nrows();
    let d = qkv.ncols() / 3;
    let hd = d / heads;
    let scale = F::of(1.0 / (hd as f64).sqrt());
    let q = qkv.as_slice().expect("standard layout");
    let mut out = Array2::<F>::zeros((rows, d));
    let o = out.as_slice_mut().unwrap();
    let mut all_probs = Vec::new();
    let stride = 3 * d;
    for w in offsets.windows(2) {
        let (start, len) = (w[0], w[1] - w[0]);
        let mut seq_probs = Vec::new();
        for h in 0..heads {
            let qo = h * hd;
            let ko = d + h * hd;
            let vo = 2 * d + h * hd;
            let mut p = vec![F::zero(); len * len];
            for i in 0..len {
                let qi = &q[(start + i) * stride + qo..][..hd];
                let mut maxv = F::neg_infinity();
                for j in 0..=i {
                    let kj = &q[(start + j) * stride + ko..][..hd];
                    let sc = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<F>() * scale;
                    p[i * len + j] = sc;
                    if sc > maxv {
                        maxv = sc;
                    }
                }
                let mut z = F::zero();
                for j in 0..=i {
                    let e = (p[i * len + j] - maxv).exp();
                    p[i * len + j] = e;
                    z += e;
                }
                let inv = F::one() / z;
                let oi = &mut o[(start + i) * d + qo..][..hd];
                for j in 0..=i {
                    let pij = p[i * len + j] * inv;
                    p[i * len + j] = pij;
                    let vj = &q[(start + j) * stride + vo..][..hd];
                    for (dst, &v) in oi.iter_mut().zip(vj) {
                        *dst += pij * v;
                    }
                }
            }
            if keep_probs {
                seq_probs.push(p);
            }
        }
        if keep_probs {
            all_probs.push(seq_probs);
        }
    }
    (out, all_probs)
}

pub(crate) fn offsets_of(seqs: &[&[TokenId]]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(seqs.len() + 1);
    offsets.push(0);
    for s in seqs {
        offsets.push(offsets.last().unwrap() + s.len());
    }
    offsets
}

impl<F: Real> Model<F> {
    fn check_inputs(
        &self,
        seqs: &[&[TokenId]],
        capture_layers: &[usize],
        hooks: &[InterventionHook],
    ) -> Result<()> {
        if seqs.is_empty() {
            return Err(Error::Empty("no sequences".into()));
        }
        for s in seqs {
            if s.is_empty() {
                return Err(Error::Empty("zero-length input".into()));
            }
            if s.len() > self.config.context_length {
                return Err(Error::Invalid(format!(
                    "input length {} exceeds context length {}",
                    s.len(),
                    self.config.context_length
                )));
            }
            if let Some(&t) = s.iter().find(|&&t| t as usize >= self.config.vocab_size) {
                return Err(Error::OutOfRange {
                    what: "token",
                    index: t as usize,
                    limit: self.config.vocab_size,
                });
            }
        }
        for &l in capture_layers.iter().chain(hooks.iter().map(|h| &h.layer)) {
            if l >= self.config.num_layers {
                return Err(Error::OutOfRange {
                    what: "layer",
                    index: l,
                    limit: self.config.num_layers,
                });
            }
        }
        Ok(())
    }

    pub(crate) fn embed(&self, seqs: &[&[TokenId]]) -> (Array2<F>, Vec<TokenId>, Vec<usize>) {
        let d = self.config.d_model;
        let rows: usize = seqs.iter().map(|s| s.len()).sum();
        let tok = self.params.mat(TOK_EMB);
        let pos = self.params.mat(POS_EMB);
        let mut x = Array2::<F>::zeros((rows, d));
        let mut tokens = Vec::with_capacity(rows);
        let mut positions = Vec::with_capacity(rows);
        let mut r = 0;
        for s in seqs {
            for (p, &t) in s.iter().enumerate() {
                let mut row = x.row_mut(r);
                row.assign(&tok.row(t as usize));
                row += &pos.row(p);
                tokens.push(t);
                positions.push(p);
                r += 1;
            }
        }
        (x, tokens, positions)
    }

    /// Runs block `layer` on stacked residuals.
    pub(crate) fn block_forward(
        &self,
        layer: usize,
        x: &Array2<F>,
        offsets: &[usize],
        keep: bool,
    ) -> (Array2<F>, Option<BlockCache<F>>) {
        let p = &self.params;
        let at = |k| block(layer, k);
        let (h1, ln1) = layernorm(x.view(), p.vec(at(blk::LN1_G)), p.vec(at(blk::LN1_B)));
        let mut qkv = h1.dot(&p.mat(at(blk::W_QKV)));
        qkv += &p.vec(at(blk::B_QKV));
        let (att, probs) = attention(&qkv, offsets, self.config.num_heads, keep);
        let mut x1 = att.dot(&p.mat(at(blk::W_O)));
        x1 += &p.vec(at(blk::B_O));
        x1 += x;
        let (h2, ln2) = layernorm(x1.view(), p.vec(at(blk::LN2_G)), p.vec(at(blk::LN2_B)));
        let mut fc_pre = h2.dot(&p.mat(at(blk::W_FC)));
        fc_pre += &p.vec(at(blk::B_FC));
        let fc_act = fc_pre.mapv(gelu);
        let mut out = fc_act.dot(&p.mat(at(blk::W_PROJ)));
        out += &p.vec(at(blk::B_PROJ));
        out += &x1;
        let cache = keep.then(|| BlockCache {
            ln1,
            h1,
            qkv,
            probs,
            att,
            ln2,
            h2,
            fc_pre,
            fc_act,
        });
        (out, cache)
    }

    pub(crate) fn head_forward(&self, x: &Array2<F>) -> (Array2<F>, LnCache<F>, Array2<F>) {
        let p = &self.params;
        let l = self.config.num_layers;
        let (hf, lnf) = layernorm(x.view(), p.vec(head(l, LNF_G)), p.vec(head(l, LNF_B)));
        let mut logits = hf.dot(&p.mat(head(l, HEAD_W)));
        logits += &p.vec(head(l, HEAD_B));
        (logits, lnf, hf)
    }

    fn apply_hooks(
        &self,
        layer: usize,
        x: &mut Array2<F>,
        positions: &[usize],
        hooks: &[InterventionHook],
    ) {
        let d = self.config.d_model;
        let mut buf = vec![0.0f64; d];
        for hook in hooks.iter().filter(|h| h.layer == layer) {
            for (r, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
                let pos = positions[r];
                if !hook.positions.accepts(pos) {
                    continue;
                }
                for (b, v) in buf.iter_mut().zip(row.iter()) {
                    *b = v.as_f64();
                }
                hook.edit.edit(pos, &mut buf);
                for (v, b) in row.iter_mut().zip(&buf) {
                    *v = F::of(*b);
                }
            }
        }
    }

    pub(crate) fn forward_impl(
        &self,
        seqs: &[&[TokenId]],
        capture_layers: &[usize],
        hooks: &[InterventionHook],
        keep: bool,
    ) -> Result<(BatchOutput<F>, Option<Cache<F>>)> {
        self.check_inputs(seqs, capture_layers, hooks)?;
        let offsets = offsets_of(seqs);
        let (mut x, tokens, positions) = self.embed(seqs);
        let mut captures = vec![None; capture_layers.len()];
        let mut blocks = Vec::new();
        for layer in 0..self.config.num_layers {
            let (mut out, cache) = self.block_forward(layer, &x, &offsets, keep);
            self.apply_hooks(layer, &mut out, &positions, hooks);
            for (i, &cl) in capture_layers.iter().enumerate() {
                if cl == layer {
                    captures[i] = Some(out.clone());
                }
            }
            if let Some(c) = cache {
                blocks.push(c);
            }
            x = out;
        }
        let (logits, lnf, hf) = self.head_forward(&x);
        let out = BatchOutput {
            logits,
            offsets: offsets.clone(),
            capture_layers: capture_layers.to_vec(),
            captures: captures.into_iter().map(|c| c.unwrap()).collect(),
        };
        let cache = keep.then(|| Cache {
            tokens,
            positions,
            offsets,
            blocks,
            lnf,
            hf,
        });
        Ok((out, cache))
    }

    /// Batched forward pass over independent sequences.
    pub fn forward_batch(
        &self,
        seqs: &[&[TokenId]],
        capture_layers: &[usize],
        hooks: &[InterventionHook],
    ) -> Result<BatchOutput<F>> {
        Ok(self.forward_impl(seqs, capture_layers, hooks, false)?.0)
    }

    /// Logits `(positions, vocab)` and the requested residual captures.
    pub fn forward(
        &self,
        tokens: &[TokenId],
        capture_layers: &[usize],
        hooks: &[InterventionHook],
    ) -> Result<(Array2<F>, ResidualCapture<F>)> {
        let out = self.forward_batch(&[tokens], capture_layers, hooks)?;
        Ok((
            out.logits,
            ResidualCapture {
                layers: capture_layers.to_vec(),
                tokens: tokens.to_vec(),
                rows: out.captures,
            },
        ))
    }

    /// Continues a forward pass from the residual stream of one sequence at
    /// the output of block `layer`.
    pub fn forward_from(&self, layer: usize, residual: ArrayView2<F>) -> Result<Array2<F>> {
        if layer >= self.config.num_layers {
            return Err(Error::OutOfRange {
                what: "layer",
                index: layer,
                limit: self.config.num_layers,
            });
        }
        if residual.ncols() != self.config.d_model {
            return Err(Error::Dimension {
                context: "forward_from residual",
                expected: self.config.d_model,
                got: residual.ncols(),
            });
        }
        let offsets = [0, residual.nrows()];
        let mut x = residual.to_owned();
        for l in layer + 1..self.config.num_layers {
            x = self.block_forward(l, &x, &offsets, false).0;
        }
        Ok(self.head_forward(&x).0)
    }
}

/// Mean next-token cross-entropy in nats over `positions` (each position `p`
/// scores the prediction of `tokens[p + 1]`), accumulated in f64.
pub(crate) fn ce_from_logits<F: Real>(
    logits: ArrayView2<F>,
    tokens: &[TokenId],
    positions: &[usize],
) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::Invalid("CE needs a sequence of length >= 2".into()));
    }
    if positions.is_empty() {
        return Err(Error::Empty("no evaluable positions".into()));
    }
    let mut total = 0.0;
    for &p in positions {
        if p + 1 >= tokens.len() {
            return Err(Error::OutOfRange {
                what: "evaluated position",
                index: p,
                limit: tokens.len() - 1,
            });
        }
        total += token_nll(logits.row(p), tokens[p + 1]);
    }
    Ok(total / positions.len() as f64)
}

/// `-log softmax(logits)[target]` in f64.
pub(crate) fn token_nll<F: Real>(logits: ArrayView1<F>, target: TokenId) -> f64 {
    let maxv = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v.as_f64()));
    let lse = logits
        .iter()
        .map(|&v| (v.as_f64() - maxv).exp())
        .sum::<f64>()
        .ln()
        + maxv;
    lse - logits[target as usize].as_f64()
}

impl<F: Real> Model<F> {
    /// Mean cross-entropy of next-token predictions at `positions`.
    pub fn ce_loss(
        &self,
        tokens: &[TokenId],
        positions: &[usize],
        hooks: &[InterventionHook],
    ) -> Result<f64> {
        if tokens.len() < 2 {
            return Err(Error::Invalid("CE needs a sequence of length >= 2".into()));
        }
        let (logits, _) = self.forward(tokens, &[], hooks)?;
        ce_from_logits(logits.view(), tokens, positions)
    }

    /// Per-sequence mean CE over every next-token prediction, computed in
    /// batches of `batch` sequences.
    pub fn ce_per_text(
        &self,
        texts: &[Vec<TokenId>],
        hooks: &[InterventionHook],
        batch: usize,
    ) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(batch.max(1)) {
            let seqs: Vec<&[TokenId]> = chunk.iter().map(|t| t.as_slice()).collect();
            let res = self.forward_batch(&seqs, &[], hooks)?;
            for (i, t) in chunk.iter().enumerate() {
                let positions: Vec<usize> = (0..t.len() - 1).collect();
                out.push(ce_from_logits(res.logits_of(i), t, &positions)?);
            }
        }
        Ok(out)
    }
}
