use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis};

use super::forward::{offsets_of, Cache, LnCache};
use super::params::{blk, block, head, HEAD_B, HEAD_W, LNF_B, LNF_G, POS_EMB, TOK_EMB};
use super::train::Example;
use super::{Model, Params, Real};
use crate::error::{Error, Result};
use crate::synthlang::TokenId;

fn layernorm_backward<F: Real>(
    dy: &Array2<F>,
    cache: &LnCache<F>,
    g: ArrayView1<F>,
    mut dg: ArrayViewMut1<F>,
    mut db: ArrayViewMut1<F>,
) -> Array2<F> {
    let (rows, d) = dy.dim();
    let inv_d = F::of(1.0 / d as f64);
    let mut dx = Array2::<F>::zeros((rows, d));
    for r in 0..rows {
        let xh = cache.xhat.row(r);
        let dyr = dy.row(r);
        let mut sum_dxh = F::zero();
        let mut sum_dxh_xh = F::zero();
        for c in 0..d {
            dg[c] += dyr[c] * xh[c];
            db[c] += dyr[c];
            let dxh = dyr[c] * g[c];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[c];
        }
        let rs = cache.rstd[r];
        for c in 0..d {
            let dxh = dyr[c] * g[c];
            dx[[r, c]] = rs * (dxh - sum_dxh * inv_d - xh[c] * sum_dxh_xh * inv_d);
        }
    }
    dx
}

fn add_column_sums<F: Real>(m: &Array2<F>, mut out: ArrayViewMut1<F>) {
    out += &m.sum_axis(Axis(0));
}

fn accumulate_matmul_tn<F: Real>(a: ArrayView2<F>, b: &Array2<F>, out: &mut Params<F>, idx: usize) {
    // out[idx] += a^T b
    let mut dst = out.mat_mut(idx);
    ndarray::linalg::general_mat_mul(F::one(), &a.t(), b, F::one(), &mut dst);
}

fn attention_backward<F: Real>(
    datt: &Array2<F>,
    qkv: &Array2<F>,
    probs: &[Vec<Vec<F>>],
    offsets: &[usize],
    heads: usize,
) -> Array2<F> {
    let rows = qkv.nrows();
    let d = qkv.ncols() / 3;
    let hd = d / heads;
    let stride = 3 * d;
    let scale = F::of(1.0 / (hd as f64).sqrt());
    let q = qkv.as_slice().unwrap();
    let dout = datt.as_slice().unwrap();
    let mut dqkv = Array2::<F>::zeros((rows, 3 * d));
    let dq = dqkv.as_slice_mut().unwrap();
    let mut dp = Vec::new();
    for (si, w) in offsets.windows(2).enumerate() {
        let (start, len) = (w[0], w[1] - w[0]);
        for h in 0..heads {
            let p = &probs[si][h];
            let (qo, ko, vo) = (h * hd, d + h * hd, 2 * d + h * hd);
            dp.clear();
            dp.resize(len, F::zero());
            for i in 0..len {
                let doi = &dout[(start + i) * d + qo..][..hd];
                // dP_ij = do_i . v_j ; dV_j += P_ij do_i
                let mut dot_pdp = F::zero();
                for j in 0..=i {
                    let vrow = (start + j) * stride + vo;
                    let mut acc = F::zero();
                    for c in 0..hd {
                        acc += doi[c] * q[vrow + c];
                    }
                    dp[j] = acc;
                    let pij = p[i * len + j];
                    dot_pdp += pij * acc;
                    for c in 0..hd {
                        dq[vrow + c] += pij * doi[c];
                    }
                }
                // dS_ij = P_ij (dP_ij - sum_k P_ik dP_ik)
                let qrow = (start + i) * stride + qo;
                for j in 0..=i {
                    let ds = p[i * len + j] * (dp[j] - dot_pdp) * scale;
                    let krow = (start + j) * stride + ko;
                    for c in 0..hd {
                        dq[qrow + c] += ds * q[krow + c];
                        dq[krow + c] += ds * q[qrow + c];
                    }
                }
            }
        }
    }
    dqkv
}

impl<F: Real> Model<F> {
    /// Token-weighted mean cross-entropy over every example's evaluated
    /// positions, and its gradient with respect to all parameters.
    pub fn loss_and_grad(&self, batch: &[Example]) -> Result<(f64, Params<F>)> {
        let seqs: Vec<&[TokenId]> = batch.iter().map(|e| e.tokens.as_slice()).collect();
        let total: usize = batch.iter().map(|e| e.positions.len()).sum();
        if total == 0 {
            return Err(Error::Empty("no evaluable positions in batch".into()));
        }
        let (out, cache) = self.forward_impl(&seqs, &[], &[], true)?;
        let cache = cache.unwrap();
        debug_assert_eq!(cache.offsets, offsets_of(&seqs));
        let v = self.config.vocab_size;
        let rows = out.logits.nrows();
        let inv_n = 1.0 / total as f64;

        let mut dlogits = Array2::<F>::zeros((rows, v));
        let mut loss = 0.0f64;
        for (si, ex) in batch.iter().enumerate() {
            let base = cache.offsets[si];
            for &p in &ex.positions {
                if p + 1 >= ex.tokens.len() {
                    return Err(Error::OutOfRange {
                        what: "evaluated position",
                        index: p,
                        limit: ex.tokens.len() - 1,
                    });
                }
                let r = base + p;
                let target = ex.tokens[p + 1] as usize;
                let row = out.logits.row(r);
                let maxv = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x.as_f64()));
                let z: f64 = row.iter().map(|&x| (x.as_f64() - maxv).exp()).sum();
                loss += z.ln() + maxv - row[target].as_f64();
                let mut drow = dlogits.row_mut(r);
                for (c, &x) in row.iter().enumerate() {
                    let prob = (x.as_f64() - maxv).exp() / z;
                    let onehot = if c == target { 1.0 } else { 0.0 };
                    drow[c] += F::of((prob - onehot) * inv_n);
                }
            }
        }
        loss *= inv_n;

        let grads = self.backward(&cache, &dlogits);
        Ok((loss, grads))
    }

    fn backward(&self, cache: &Cache<F>, dlogits: &Array2<F>) -> Params<F> {
        let p = &self.params;
        let nl = self.config.num_layers;
        let mut g = p.zeros_like();

        // head
        accumulate_matmul_tn(cache.hf.view(), dlogits, &mut g, head(nl, HEAD_W));
        add_column_sums(dlogits, g.vec_mut(head(nl, HEAD_B)));
        let dhf = dlogits.dot(&p.mat(head(nl, HEAD_W)).t());
        let mut dx = {
            let (dg, db) = two_vecs(&mut g, head(nl, LNF_G), head(nl, LNF_B));
            layernorm_backward(&dhf, &cache.lnf, p.vec(head(nl, LNF_G)), dg, db)
        };

        for l in (0..nl).rev() {
            let c = &cache.blocks[l];
            let at = |k| block(l, k);
            // MLP branch: out = x1 + fc_act W_proj + b_proj
            accumulate_matmul_tn(c.fc_act.view(), &dx, &mut g, at(blk::W_PROJ));
            add_column_sums(&dx, g.vec_mut(at(blk::B_PROJ)));
            let mut dfc = dx.dot(&p.mat(at(blk::W_PROJ)).t());
            dfc.zip_mut_with(&c.fc_pre, |d, &x| *d *= super::forward::gelu_grad(x));
            accumulate_matmul_tn(c.h2.view(), &dfc, &mut g, at(blk::W_FC));
            add_column_sums(&dfc, g.vec_mut(at(blk::B_FC)));
            let dh2 = dfc.dot(&p.mat(at(blk::W_FC)).t());
            let dx1 = {
                let (dg, db) = two_vecs(&mut g, at(blk::LN2_G), at(blk::LN2_B));
                layernorm_backward(&dh2, &c.ln2, p.vec(at(blk::LN2_G)), dg, db)
            } + &dx;

            // attention branch: x1 = x + att W_o + b_o
            accumulate_matmul_tn(c.att.view(), &dx1, &mut g, at(blk::W_O));
            add_column_sums(&dx1, g.vec_mut(at(blk::B_O)));
            let datt = dx1.dot(&p.mat(at(blk::W_O)).t());
            let dqkv = attention_backward(
                &datt,
                &c.qkv,
                &c.probs,
                &cache.offsets,
                self.config.num_heads,
            );
            accumulate_matmul_tn(c.h1.view(), &dqkv, &mut g, at(blk::W_QKV));
            add_column_sums(&dqkv, g.vec_mut(at(blk::B_QKV)));
            let dh1 = dqkv.dot(&p.mat(at(blk::W_QKV)).t());
            dx = {
                let (dg, db) = two_vecs(&mut g, at(blk::LN1_G), at(blk::LN1_B));
                layernorm_backward(&dh1, &c.ln1, p.vec(at(blk::LN1_G)), dg, db)
            } + &dx1;
        }

        let d = self.config.d_model;
        for (r, (&t, &pos)) in cache.tokens.iter().zip(&cache.positions).enumerate() {
            let row = dx.row(r);
            let tok = &mut g.tensors[TOK_EMB].data[t as usize * d..][..d];
            for (a, &b) in tok.iter_mut().zip(row.iter()) {
                *a += b;
            }
            let pe = &mut g.tensors[POS_EMB].data[pos * d..][..d];
            for (a, &b) in pe.iter_mut().zip(row.iter()) {
                *a += b;
            }
        }
        g
    }
}

/// Mutable views of two distinct vector tensors (`a < b`).
fn two_vecs<F: Real>(
    g: &mut Params<F>,
    a: usize,
    b: usize,
) -> (ArrayViewMut1<'_, F>, ArrayViewMut1<'_, F>) {
    debug_assert!(a < b);
    let (lo, hi) = g.tensors.split_at_mut(b);
    (
        ArrayViewMut1::from(&mut lo[a].data[..]),
        ArrayViewMut1::from(&mut hi[0].data[..]),
    )
}
