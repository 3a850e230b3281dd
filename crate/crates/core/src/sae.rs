//! Sparse autoencoders over residual-stream activations.
//!
//! `f = ReLU(W_enc x + b_enc)`, `x̂ = W_dec f + b_dec`. The Top-K variant
//! keeps only the K largest positive pre-activations; the L1 variant
//! penalizes `λ Σ f` and keeps every decoder column at unit norm.

use std::path::Path;

use log::info;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{self, ByteReader, ByteWriter, MAGIC_SAE};
use crate::error::{Error, Result};

pub const SAE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SaeVariant {
    TopK { k: usize },
    L1 { lambda: f64 },
}

impl SaeVariant {
    pub fn default_topk(d_model: usize) -> Self {
        SaeVariant::TopK {
            k: (d_model / 4).max(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sae {
    pub layer: usize,
    pub variant: SaeVariant,
    /// `(M, N)`
    pub w_enc: Array2<f32>,
    pub b_enc: Array1<f32>,
    /// `(N, M)`; column `i` is feature direction `d_i`.
    pub w_dec: Array2<f32>,
    pub b_dec: Array1<f32>,
}

/// Zeroes all but the `k` largest positive entries; ties keep the lower index.
pub fn keep_top_k<T: Copy + PartialOrd + Default>(row: &mut [T], k: usize) {
    let zero = T::default();
    let mut idx: Vec<usize> = (0..row.len()).filter(|&i| row[i] > zero).collect();
    if idx.len() > k {
        idx.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        for &i in &idx[k..] {
            row[i] = zero;
        }
    }
    for v in row.iter_mut() {
        if !(*v > zero) {
            *v = zero;
        }
    }
}

impl Sae {
    /// Decoder columns are random unit vectors, `W_enc = W_decᵀ`, biases zero.
    pub fn init(layer: usize, d_model: usize, num_features: usize, variant: SaeVariant, seed: u64) -> Result<Self> {
        if num_features <= d_model {
            return Err(Error::Config(format!(
                "sae.num_features ({num_features}) must exceed d_model ({d_model})"
            )));
        }
        match variant {
            SaeVariant::TopK { k } if k == 0 || k > num_features => {
                return Err(Error::Config(format!("sae.k must lie in 1..={num_features} (got {k})")))
            }
            SaeVariant::L1 { lambda } if !(lambda >= 0.0 && lambda.is_finite()) => {
                return Err(Error::Config(format!("sae.lambda must be >= 0 (got {lambda})")))
            }
            _ => {}
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Array2::<f32>::zeros((num_features, d_model));
        for mut r in rows.rows_mut() {
            for v in r.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let n = r.dot(&r).sqrt();
            r /= n;
        }
        Ok(Self {
            layer,
            variant,
            w_dec: rows.t().as_standard_layout().into_owned(),
            w_enc: rows,
            b_enc: Array1::zeros(num_features),
            b_dec: Array1::zeros(d_model),
        })
    }

    pub fn d_model(&self) -> usize {
        self.w_enc.ncols()
    }

    pub fn num_features(&self) -> usize {
        self.w_enc.nrows()
    }

    fn sparsify(&self, row: &mut [f32]) {
        match self.variant {
            SaeVariant::TopK { k } => keep_top_k(row, k),
            SaeVariant::L1 { .. } => row.iter_mut().for_each(|v| *v = v.max(0.0)),
        }
    }

    fn check_dim(&self, context: &'static str, expected: usize, got: usize) -> Result<()> {
        if expected != got {
            return Err(Error::Dimension {
                context,
                expected,
                got,
            });
        }
        Ok(())
    }

    /// Feature activations for a batch of rows `(rows, N) -> (rows, M)`.
    pub fn encode(&self, x: ArrayView2<f32>) -> Result<Array2<f32>> {
        self.check_dim("sae encode input", self.d_model(), x.ncols())?;
        let mut f = x.dot(&self.w_enc.t());
        f += &self.b_enc;
        for mut row in f.rows_mut() {
            self.sparsify(row.as_slice_mut().unwrap());
        }
        Ok(f)
    }

    /// `(rows, M) -> (rows, N)`.
    pub fn decode(&self, f: ArrayView2<f32>) -> Result<Array2<f32>> {
        self.check_dim("sae decode input", self.num_features(), f.ncols())?;
        let mut x = f.dot(&self.w_dec.t());
        x += &self.b_dec;
        Ok(x)
    }

    /// Single-vector encode with f64 accumulation.
    pub fn encode_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim("sae encode input", self.d_model(), x.len())?;
        let mut f: Vec<f64> = self
            .w_enc
            .rows()
            .into_iter()
            .zip(self.b_enc.iter())
            .map(|(w, &b)| w.iter().zip(x).map(|(&w, &x)| w as f64 * x).sum::<f64>() + b as f64)
            .collect();
        match self.variant {
            SaeVariant::TopK { k } => keep_top_k(&mut f, k),
            SaeVariant::L1 { .. } => f.iter_mut().for_each(|v| *v = v.max(0.0)),
        }
        Ok(f)
    }

    /// Pre-activation of a single feature, `(W_enc x + b_enc)_i`, in f64.
    pub fn pre_activation(&self, feature: usize, x: &[f64]) -> Result<f64> {
        self.check_feature(feature)?;
        self.check_dim("sae encode input", self.d_model(), x.len())?;
        let w = self.w_enc.row(feature);
        Ok(w.iter().zip(x).map(|(&w, &x)| w as f64 * x).sum::<f64>() + self.b_enc[feature] as f64)
    }

    pub fn decode_one(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.check_dim("sae decode input", self.num_features(), f.len())?;
        Ok(self
            .w_dec
            .rows()
            .into_iter()
            .zip(self.b_dec.iter())
            .map(|(w, &b)| w.iter().zip(f).map(|(&w, &f)| w as f64 * f).sum::<f64>() + b as f64)
            .collect())
    }

    fn check_feature(&self, i: usize) -> Result<()> {
        if i >= self.num_features() {
            return Err(Error::OutOfRange {
                what: "feature",
                index: i,
                limit: self.num_features(),
            });
        }
        Ok(())
    }

    /// Column `i` of `W_dec`.
    pub fn feature_direction(&self, i: usize) -> Result<Vec<f64>> {
        self.check_feature(i)?;
        Ok(self.w_dec.column(i).iter().map(|&v| v as f64).collect())
    }

    /// Squared reconstruction error per row, in f64.
    pub fn row_errors(&self, x: ArrayView2<f32>) -> Result<Vec<f64>> {
        let xh = self.decode(self.encode(x)?.view())?;
        Ok(x
            .rows()
            .into_iter()
            .zip(xh.rows())
            .map(|(a, b)| a.iter().zip(b).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum())
            .collect())
    }

    pub fn fvu(&self, x: ArrayView2<f32>) -> Result<f64> {
        let xh = self.decode(self.encode(x)?.view())?;
        fvu_of(x, xh.view())
    }

    pub fn all_finite(&self) -> bool {
        [&self.w_enc, &self.w_dec].iter().all(|m| m.iter().all(|v| v.is_finite()))
            && [&self.b_enc, &self.b_dec].iter().all(|v| v.iter().all(|v| v.is_finite()))
    }
}

/// `Σ‖x − x̂‖² / Σ‖x − x̄‖²`.
pub fn fvu_of(x: ArrayView2<f32>, xh: ArrayView2<f32>) -> Result<f64> {
    if x.nrows() == 0 {
        return Err(Error::Empty("empty activation set".into()));
    }
    if x.dim() != xh.dim() {
        return Err(Error::Dimension {
            context: "fvu reconstruction",
            expected: x.ncols(),
            got: xh.ncols(),
        });
    }
    let n = x.nrows() as f64;
    let mean: Vec<f64> = x
        .axis_iter(Axis(1))
        .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() / n)
        .collect();
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in x.rows().into_iter().zip(xh.rows()) {
        for ((&a, &b), &m) in a.iter().zip(b).zip(&mean) {
            num += (a as f64 - b as f64).powi(2);
            den += (a as f64 - m).powi(2);
        }
    }
    if den == 0.0 {
        return Err(Error::Invalid("activation set has zero variance".into()));
    }
    Ok(num / den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaeTrainConfig {
    pub variant: SaeVariant,
    /// Dictionary size M; `None` means 8 × d_model.
    pub num_features: Option<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of rows held out for the reported metrics.
    pub heldout_fraction: f64,
    pub seed: u64,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        Self {
            variant: SaeVariant::TopK { k: 32 },
            num_features: None,
            steps: 3000,
            batch_size: 256,
            lr: 1e-3,
            heldout_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SaeTrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.steps == 0 {
            errs.push("sae.steps must be > 0".into());
        }
        if self.batch_size == 0 {
            errs.push("sae.batch_size must be > 0".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push("sae.lr must be positive".into());
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            errs.push("sae.heldout_fraction must lie in (0, 1)".into());
        }
        match self.variant {
            SaeVariant::TopK { k } if k == 0 => errs.push("sae.k must be > 0".into()),
            SaeVariant::L1 { lambda } if !(lambda >= 0.0 && lambda.is_finite()) => {
                errs.push("sae.lambda must be >= 0".into())
            }
            _ => {}
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeMetrics {
    pub layer: usize,
    pub train_rows: usize,
    pub heldout_rows: usize,
    pub heldout_mse: f64,
    pub heldout_fvu: f64,
    pub initial_fvu: f64,
    pub mean_l0: f64,
    pub dead_features: usize,
    pub final_loss: f64,
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: [&mut [f32]; 4], grads: [&[f32]; 4], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let step = (lr / (1.0 - B1.powi(self.t))) as f32;
        let inv_bc2 = (1.0 / (1.0 - B2.powi(self.t))) as f32;
        let (b1, b2) = (B1 as f32, B2 as f32);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= step * m[i] / ((v[i] * inv_bc2).sqrt() + 1e-8);
            }
        }
    }
}

/// Splits rows into (train, held-out) index sets with a seeded shuffle.
pub fn heldout_split(rows: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..rows).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held = ((rows as f64 * fraction).round() as usize).clamp(1, rows.saturating_sub(1));
    let train = idx.split_off(held);
    (train, idx)
}

/// Trains one SAE with Adam on mean squared reconstruction error (plus
/// `λ Σ f` for the L1 variant).
pub fn train_sae(data: ArrayView2<f32>, layer: usize, config: &SaeTrainConfig) -> Result<(Sae, SaeMetrics)> {
    let errs = config.validate();
    if !errs.is_empty() {
        return Err(Error::Validation(errs));
    }
    let n = data.ncols();
    let m = config.num_features.unwrap_or(8 * n);
    if data.nrows() < 10 * m {
        return Err(Error::Invalid(format!(
            "SAE dataset has {} rows, need at least 10 × M = {}",
            data.nrows(),
            10 * m
        )));
    }
    let mut sae = Sae::init(layer, n, m, config.variant, config.seed)?;
    let (train_idx, held_idx) = heldout_split(data.nrows(), config.heldout_fraction, config.seed ^ 0x5ae);
    let held = data.select(Axis(0), &held_idx);
    let initial_fvu = sae.fvu(held.view())?;

    // Train on decoder rows (M, N) for cache-friendly sparse updates.
    let mut dec = sae.w_dec.t().as_standard_layout().into_owned();
    let mut adam = Adam::new(&[m * n, m, m * n, n]);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order = train_idx.clone();
    let mut cursor = order.len();
    let bs = config.batch_size.min(train_idx.len());
    let lambda = match config.variant {
        SaeVariant::L1 { lambda } => lambda,
        SaeVariant::TopK { .. } => 0.0,
    };
    let mut g_enc = Array2::<f32>::zeros((m, n));
    let mut g_benc = Array1::<f32>::zeros(m);
    let mut g_dec = Array2::<f32>::zeros((m, n));
    let mut g_bdec = Array1::<f32>::zeros(n);
    let mut final_loss = f64::NAN;
    for step in 0..config.steps {
        if cursor + bs > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch = data.select(Axis(0), &order[cursor..cursor + bs]);
        cursor += bs;

        let mut f = batch.dot(&sae.w_enc.t());
        f += &sae.b_enc;
        for mut row in f.rows_mut() {
            sae.sparsify(row.as_slice_mut().unwrap());
        }
        g_enc.fill(0.0);
        g_benc.fill(0.0);
        g_dec.fill(0.0);
        g_bdec.fill(0.0);
        let scale = 1.0 / bs as f32;
        let mut loss = 0.0f64;
        let mut xh = vec![0.0f32; n];
        for (b, x) in batch.rows().into_iter().enumerate() {
            let fr = f.row(b);
            let active: Vec<usize> = (0..m).filter(|&i| fr[i] > 0.0).collect();
            xh.copy_from_slice(sae.b_dec.as_slice().unwrap());
            for &i in &active {
                let fi = fr[i];
                for (o, &w) in xh.iter_mut().zip(dec.row(i)) {
                    *o += fi * w;
                }
            }
            // dL/dx̂ = 2 (x̂ − x) / B
            let mut dxh = vec![0.0f32; n];
            for c in 0..n {
                let e = xh[c] - x[c];
                loss += (e as f64).powi(2);
                dxh[c] = 2.0 * e * scale;
            }
            for (g, &d) in g_bdec.iter_mut().zip(&dxh) {
                *g += d;
            }
            for &i in &active {
                let fi = fr[i];
                loss += lambda * fi as f64;
                let mut gd = g_dec.row_mut(i);
                let mut df = 0.0f32;
                for c in 0..n {
                    gd[c] += fi * dxh[c];
                    df += dxh[c] * dec[[i, c]];
                }
                df += lambda as f32 * scale;
                g_benc[i] += df;
                let mut ge = g_enc.row_mut(i);
                for c in 0..n {
                    ge[c] += df * x[c];
                }
            }
        }
        loss /= bs as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        final_loss = loss;
        adam.step(
            [
                sae.w_enc.as_slice_mut().unwrap(),
                sae.b_enc.as_slice_mut().unwrap(),
                dec.as_slice_mut().unwrap(),
                sae.b_dec.as_slice_mut().unwrap(),
            ],
            [
                g_enc.as_slice().unwrap(),
                g_benc.as_slice().unwrap(),
                g_dec.as_slice().unwrap(),
                g_bdec.as_slice().unwrap(),
            ],
            config.lr,
        );
        if matches!(config.variant, SaeVariant::L1 { .. }) {
            normalize_rows(&mut dec);
        }
        if step % 500 == 0 || step + 1 == config.steps {
            info!("sae layer {layer} step {step:>5} loss {loss:.5}");
        }
    }
    sae.w_dec = dec.t().as_standard_layout().into_owned();
    if !sae.all_finite() {
        return Err(Error::Diverged {
            step: config.steps,
            loss: final_loss,
        });
    }

    let train = data.select(Axis(0), &train_idx);
    let mut ever_active = vec![false; m];
    for chunk in train.axis_chunks_iter(Axis(0), 1024) {
        let f = sae.encode(chunk)?;
        for row in f.rows() {
            for (a, &v) in ever_active.iter_mut().zip(row) {
                *a |= v > 0.0;
            }
        }
    }
    let fh = sae.encode(held.view())?;
    let xh = sae.decode(fh.view())?;
    let mean_l0 = fh.rows().into_iter().map(|r| r.iter().filter(|&&v| v > 0.0).count()).sum::<usize>() as f64
        / fh.nrows() as f64;
    let sq: f64 = held
        .iter()
        .zip(xh.iter())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    let metrics = SaeMetrics {
        layer,
        train_rows: train_idx.len(),
        heldout_rows: held_idx.len(),
        heldout_mse: sq / held.nrows() as f64,
        heldout_fvu: fvu_of(held.view(), xh.view())?,
        initial_fvu,
        mean_l0,
        dead_features: ever_active.iter().filter(|&&a| !a).count(),
        final_loss,
    };
    info!(
        "sae layer {layer}: FVU {:.4} (init {:.4}), L0 {:.1}, dead {}",
        metrics.heldout_fvu, metrics.initial_fvu, metrics.mean_l0, metrics.dead_features
    );
    Ok((sae, metrics))
}

fn normalize_rows(a: &mut Array2<f32>) {
    for mut r in a.rows_mut() {
        let n = r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if n > 0.0 {
            r.mapv_inplace(|v| (v as f64 / n) as f32);
        }
    }
}

/// Decoder column norms.
pub fn decoder_norms(sae: &Sae) -> Vec<f64> {
    sae.w_dec
        .columns()
        .into_iter()
        .map(|c: ArrayView1<f32>| c.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())
        .collect()
}

// File layout: magic "LFSA" | u32 version | u32 layer | u32 M | u32 N |
// u8 variant (0 top-k, 1 L1) | u32 K | f64 λ (as u64 bits) |
// W_enc (M×N) | b_enc (M) | W_dec (N×M) | b_dec (N), f32 row-major.

pub fn sae_bytes(sae: &Sae) -> Vec<u8> {
    let mut w = ByteWriter::header(MAGIC_SAE, SAE_VERSION);
    w.u32(sae.layer as u32);
    w.u32(sae.num_features() as u32);
    w.u32(sae.d_model() as u32);
    let (tag, k, lambda) = match sae.variant {
        SaeVariant::TopK { k } => (0u8, k as u32, 0.0f64),
        SaeVariant::L1 { lambda } => (1u8, 0, lambda),
    };
    w.u8(tag);
    w.u32(k);
    w.u64(lambda.to_bits());
    w.f32s(sae.w_enc.as_slice().unwrap());
    w.f32s(sae.b_enc.as_slice().unwrap());
    w.f32s(sae.w_dec.as_standard_layout().as_slice().unwrap());
    w.f32s(sae.b_dec.as_slice().unwrap());
    w.into_inner()
}

pub fn save_sae(sae: &Sae, path: &Path) -> Result<()> {
    binio::write_atomic(path, &sae_bytes(sae))
}

pub fn load_sae(path: &Path) -> Result<Sae> {
    decode_sae(&binio::read_file(path)?, path)
}

pub fn decode_sae(bytes: &[u8], path: &Path) -> Result<Sae> {
    let mut r = ByteReader::new(bytes, path);
    r.expect_header(MAGIC_SAE, SAE_VERSION)?;
    let layer = r.u32("layer")? as usize;
    let m = r.u32("M")? as usize;
    let n = r.u32("N")? as usize;
    let tag = r.u8("variant")?;
    let k = r.u32("K")? as usize;
    let lambda = f64::from_bits(r.u64("lambda")?);
    let variant = match tag {
        0 => SaeVariant::TopK { k },
        1 => SaeVariant::L1 { lambda },
        t => return Err(r.corrupt(format!("unknown SAE variant tag {t}"))),
    };
    if m == 0 || n == 0 {
        return Err(r.corrupt("zero SAE dimension"));
    }
    let w_enc = Array2::from_shape_vec((m, n), r.f32s(m * n, "W_enc")?).unwrap();
    let b_enc = Array1::from_vec(r.f32s(m, "b_enc")?);
    let w_dec = Array2::from_shape_vec((n, m), r.f32s(m * n, "W_dec")?).unwrap();
    let b_dec = Array1::from_vec(r.f32s(n, "b_dec")?);
    r.finish()?;
    Ok(Sae {
        layer,
        variant,
        w_enc,
        b_enc,
        w_dec,
        b_dec,
    })
}
