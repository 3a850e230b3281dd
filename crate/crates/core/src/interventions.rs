//! Directional ablation and steering of the residual stream.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::binio::{self, ByteReader, ByteWriter, MAGIC_STEERING};
use crate::error::{Error, Result};
use crate::sae::Sae;
use crate::synthlang::{LangId, TokenId};
use crate::tinylm::{InterventionHook, Model};

pub const STEERING_VERSION: u32 = 1;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension {
            context,
            expected,
            got,
        });
    }
    Ok(())
}

/// `x − d̂ d̂ᵀ x`.
pub fn ablate_direction(x: &[f64], d: &[f64]) -> Result<Vec<f64>> {
    check_len("ablation direction", x.len(), d.len())?;
    let n = norm(d);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Invalid("cannot ablate a zero direction".into()));
    }
    let proj = dot(x, d) / (n * n);
    Ok(x.iter().zip(d).map(|(xi, di)| xi - proj * di).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationMode {
    /// Project onto the orthogonal complement of the directions' span.
    #[default]
    Span,
    /// Apply single-direction ablation for each direction in order.
    Sequential,
}

/// A prepared multi-direction ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct Ablation {
    pub mode: AblationMode,
    /// Orthonormal span basis (span mode) or the raw directions (sequential).
    basis: Vec<Vec<f64>>,
}

impl Ablation {
    pub fn new(directions: &[Vec<f64>], mode: AblationMode) -> Result<Self> {
        let first = directions
            .first()
            .ok_or_else(|| Error::Empty("no ablation directions".into()))?;
        for d in directions {
            check_len("ablation direction", first.len(), d.len())?;
            let n = norm(d);
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Invalid("cannot ablate a zero direction".into()));
            }
        }
        let basis = match mode {
            AblationMode::Sequential => directions.to_vec(),
            AblationMode::Span => gram_schmidt(directions),
        };
        Ok(Self { mode, basis })
    }

    pub fn dim(&self) -> usize {
        self.basis[0].len()
    }

    /// Number of independent directions removed (span mode).
    pub fn rank(&self) -> usize {
        self.basis.len()
    }

    pub fn apply(&self, x: &mut [f64]) {
        for b in &self.basis {
            let c = match self.mode {
                AblationMode::Span => dot(x, b),
                AblationMode::Sequential => dot(x, b) / dot(b, b),
            };
            for (xi, bi) in x.iter_mut().zip(b) {
                *xi -= c * bi;
            }
        }
    }

    pub fn ablate(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("ablation input", self.dim(), x.len())?;
        let mut out = x.to_vec();
        self.apply(&mut out);
        Ok(out)
    }

    pub fn hook(self, layer: usize) -> InterventionHook {
        InterventionHook::new(layer, move |_: usize, x: &mut [f64]| self.apply(x))
    }
}

/// Orthonormal basis of the span, by modified Gram–Schmidt with one
/// re-orthogonalization pass. Directions already in the span of earlier
/// ones are dropped.
pub fn gram_schmidt(directions: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for d in directions {
        let scale = norm(d);
        let mut v = d.clone();
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&v, b);
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= c * bi;
                }
            }
        }
        let n = norm(&v);
        if n > 1e-10 * scale {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

pub fn ablate_span(x: &[f64], directions: &[Vec<f64>]) -> Result<Vec<f64>> {
    Ablation::new(directions, AblationMode::Span)?.ablate(x)
}

/// Ablation of SAE features by their decoder directions.
pub fn feature_ablation(sae: &Sae, features: &[usize], mode: AblationMode) -> Result<Ablation> {
    let dirs = features
        .iter()
        .map(|&f| sae.feature_direction(f))
        .collect::<Result<Vec<_>>>()?;
    Ablation::new(&dirs, mode)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    /// Open when any gate feature exceeds the threshold.
    #[default]
    Any,
    /// Open only when every gate feature exceeds the threshold.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub features: Vec<usize>,
    pub threshold: f64,
    pub mode: GateMode,
}

impl Gate {
    pub fn new(features: Vec<usize>) -> Self {
        Self {
            features,
            threshold: 0.0,
            mode: GateMode::Any,
        }
    }

    /// Whether the gate opens for feature activations `f`.
    pub fn is_open(&self, f: &[f64]) -> bool {
        let fires = |&i: &usize| f[i] > self.threshold;
        match self.mode {
            GateMode::Any => self.features.iter().any(fires),
            GateMode::All => !self.features.is_empty() && self.features.iter().all(fires),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVector {
    pub layer: usize,
    pub source: LangId,
    pub target: LangId,
    pub v: Vec<f32>,
    pub gate: Option<Gate>,
}

/// Mean over prompts of the per-prompt mean residual (all positions).
pub fn mean_of_prompt_means(model: &Model<f32>, layer: usize, prompts: &[Vec<TokenId>]) -> Result<Vec<f64>> {
    let d = model.config.d_model;
    let mut means = Vec::with_capacity(prompts.len());
    for chunk in prompts.chunks(64) {
        let seqs: Vec<&[TokenId]> = chunk.iter().map(|p| p.as_slice()).collect();
        let out = model.forward_batch(&seqs, &[layer], &[])?;
        for i in 0..chunk.len() {
            let cap = out.capture_of(layer, i).unwrap();
            let mut m = vec![0.0f64; d];
            for row in cap.rows() {
                for (a, &v) in m.iter_mut().zip(row) {
                    *a += v as f64;
                }
            }
            m.iter_mut().for_each(|a| *a /= cap.nrows() as f64);
            means.push(m);
        }
    }
    mean_vectors(&means)
}

fn mean_vectors(vs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = vs.first().ok_or_else(|| Error::Empty("empty prompt set".into()))?;
    let mut out = vec![0.0f64; first.len()];
    for v in vs {
        check_len("prompt mean", out.len(), v.len())?;
        for (a, b) in out.iter_mut().zip(v) {
            *a += b;
        }
    }
    out.iter_mut().for_each(|a| *a /= vs.len() as f64);
    Ok(out)
}

/// `mean(positive) − mean(negative)` over per-prompt mean activations.
pub fn steering_from_prompt_means(positive: &[Vec<f64>], negative: &[Vec<f64>]) -> Result<Vec<f64>> {
    let p = mean_vectors(positive)?;
    let n = mean_vectors(negative)?;
    check_len("steering means", p.len(), n.len())?;
    Ok(p.iter().zip(&n).map(|(a, b)| a - b).collect())
}

/// Steering vector from `source` towards `target`: the mean activation of
/// target-language prompts minus that of source-language prompts.
pub fn extract_steering_vector(
    model: &Model<f32>,
    layer: usize,
    target_prompts: &[Vec<TokenId>],
    source_prompts: &[Vec<TokenId>],
    source: LangId,
    target: LangId,
) -> Result<SteeringVector> {
    if target_prompts.is_empty() || source_prompts.is_empty() {
        return Err(Error::Empty("steering needs non-empty prompt sets".into()));
    }
    let p = mean_of_prompt_means(model, layer, target_prompts)?;
    let n = mean_of_prompt_means(model, layer, source_prompts)?;
    SteeringVector::from_means(layer, source, target, &p, &n)
}

impl SteeringVector {
    /// `target_mean − source_mean`, rounded to f32.
    pub fn from_means(
        layer: usize,
        source: LangId,
        target: LangId,
        target_mean: &[f64],
        source_mean: &[f64],
    ) -> Result<Self> {
        check_len("steering means", target_mean.len(), source_mean.len())?;
        let v: Vec<f32> = target_mean.iter().zip(source_mean).map(|(a, b)| (a - b) as f32).collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Invalid("steering vector is not finite".into()));
        }
        Ok(Self {
            layer,
            source,
            target,
            v,
            gate: None,
        })
    }

    pub fn with_gate(mut self, gate: Gate) -> Self {
        self.gate = Some(gate);
        self
    }

    pub fn apply(&self, x: &mut [f64]) {
        for (xi, &vi) in x.iter_mut().zip(&self.v) {
            *xi += vi as f64;
        }
    }

    pub fn negated(&self) -> Self {
        Self {
            layer: self.layer,
            source: self.target,
            target: self.source,
            v: self.v.iter().map(|x| -x).collect(),
            gate: None,
        }
    }

    fn check_gate(&self, sae: &Sae) -> Result<&Gate> {
        let gate = self
            .gate
            .as_ref()
            .ok_or_else(|| Error::Invalid("steering vector has no gate".into()))?;
        if sae.layer != self.layer {
            return Err(Error::Invalid(format!(
                "SAE layer {} does not match steering layer {}",
                sae.layer, self.layer
            )));
        }
        check_len("steering vector", sae.d_model(), self.v.len())?;
        for &f in &gate.features {
            if f >= sae.num_features() {
                return Err(Error::OutOfRange {
                    what: "gate feature",
                    index: f,
                    limit: sae.num_features(),
                });
            }
        }
        Ok(gate)
    }
}

/// `x + v`.
pub fn apply_steering(x: &[f64], sv: &SteeringVector) -> Result<Vec<f64>> {
    check_len("steering input", sv.v.len(), x.len())?;
    let mut out = x.to_vec();
    sv.apply(&mut out);
    Ok(out)
}

/// `x + v` if the gate opens on `encode(x)`, otherwise `x` unchanged.
/// Returns the new vector and whether the gate opened.
pub fn apply_gated_steering(x: &[f64], sv: &SteeringVector, sae: &Sae) -> Result<(Vec<f64>, bool)> {
    let gate = sv.check_gate(sae)?;
    let f = sae.encode_one(x)?;
    let mut out = x.to_vec();
    let open = gate.is_open(&f);
    if open {
        sv.apply(&mut out);
    }
    Ok((out, open))
}

pub fn steering_hook(sv: SteeringVector) -> InterventionHook {
    let layer = sv.layer;
    InterventionHook::new(layer, move |_: usize, x: &mut [f64]| sv.apply(x))
}

pub fn gated_steering_hook(sv: SteeringVector, sae: Arc<Sae>) -> Result<InterventionHook> {
    sv.check_gate(&sae)?;
    let layer = sv.layer;
    Ok(InterventionHook::new(layer, move |_: usize, x: &mut [f64]| {
        let gate = sv.gate.as_ref().unwrap();
        let f = sae.encode_one(x).expect("dimension checked");
        if gate.is_open(&f) {
            sv.apply(x);
        }
    }))
}

/// Fraction of positions (filtered by `keep`) where the gate opens on the
/// unsteered residual.
pub fn gate_open_rate(
    model: &Model<f32>,
    sv: &SteeringVector,
    sae: &Sae,
    texts: &[Vec<TokenId>],
    keep: impl Fn(usize, TokenId) -> bool,
) -> Result<f64> {
    let gate = sv.check_gate(sae)?;
    let mut open = 0usize;
    let mut total = 0usize;
    for chunk in texts.chunks(64) {
        let seqs: Vec<&[TokenId]> = chunk.iter().map(|t| t.as_slice()).collect();
        let out = model.forward_batch(&seqs, &[sv.layer], &[])?;
        for (i, t) in chunk.iter().enumerate() {
            let cap = out.capture_of(sv.layer, i).unwrap();
            for (p, &tok) in t.iter().enumerate() {
                if !keep(p, tok) {
                    continue;
                }
                let x: Vec<f64> = cap.row(p).iter().map(|&v| v as f64).collect();
                total += 1;
                open += gate.is_open(&sae.encode_one(&x)?) as usize;
            }
        }
    }
    if total == 0 {
        return Err(Error::Empty("no positions to gate".into()));
    }
    Ok(open as f64 / total as f64)
}

// File layout: magic "LFSV" | u32 version | u32 layer | u16 source |
// u16 target | u32 N | u8 has_gate | [u8 mode, u64 threshold bits,
// u32 count, u32 ids...] | N f32.

pub fn steering_bytes(sv: &SteeringVector) -> Vec<u8> {
    let mut w = ByteWriter::header(MAGIC_STEERING, STEERING_VERSION);
    w.u32(sv.layer as u32);
    w.u16(sv.source as u16);
    w.u16(sv.target as u16);
    w.u32(sv.v.len() as u32);
    match &sv.gate {
        None => w.u8(0),
        Some(g) => {
            w.u8(1);
            w.u8(match g.mode {
                GateMode::Any => 0,
                GateMode::All => 1,
            });
            w.u64(g.threshold.to_bits());
            w.u32(g.features.len() as u32);
            for &f in &g.features {
                w.u32(f as u32);
            }
        }
    }
    w.f32s(&sv.v);
    w.into_inner()
}

pub fn save_steering(sv: &SteeringVector, path: &Path) -> Result<()> {
    binio::write_atomic(path, &steering_bytes(sv))
}

pub fn load_steering(path: &Path) -> Result<SteeringVector> {
    decode_steering(&binio::read_file(path)?, path)
}

pub fn decode_steering(bytes: &[u8], path: &Path) -> Result<SteeringVector> {
    let mut r = ByteReader::new(bytes, path);
    r.expect_header(MAGIC_STEERING, STEERING_VERSION)?;
    let layer = r.u32("layer")? as usize;
    let source = r.u16("source language")? as usize;
    let target = r.u16("target language")? as usize;
    let n = r.u32("N")? as usize;
    let gate = match r.u8("gate flag")? {
        0 => None,
        1 => {
            let mode = match r.u8("gate mode")? {
                0 => GateMode::Any,
                1 => GateMode::All,
                m => return Err(r.corrupt(format!("unknown gate mode {m}"))),
            };
            let threshold = f64::from_bits(r.u64("gate threshold")?);
            let count = r.u32("gate feature count")? as usize;
            let features = (0..count)
                .map(|_| r.u32("gate feature").map(|f| f as usize))
                .collect::<Result<Vec<_>>>()?;
            Some(Gate {
                features,
                threshold,
                mode,
            })
        }
        g => return Err(r.corrupt(format!("bad gate flag {g}"))),
    };
    let v = r.f32s(n, "steering vector")?;
    r.finish()?;
    Ok(SteeringVector {
        layer,
        source,
        target,
        v,
        gate,
    })
}
