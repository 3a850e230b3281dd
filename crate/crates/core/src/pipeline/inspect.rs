use std::fmt::Write as _;
use std::path::Path;

use crate::activations;
use crate::binio::{self, ByteReader, MAGIC_CHECKPOINT, MAGIC_DUMP, MAGIC_SAE, MAGIC_STEERING};
use crate::error::{Error, Result};
use crate::experiments::{CeDeltaRow, CodeSwitchRow, ReportRow, SynergyRow, TaskRow};
use crate::interventions::decode_steering;
use crate::monolinguality::{read_scores_csv, SCORE_COLUMNS};
use crate::sae::{decode_sae, decoder_norms, SaeVariant};
use crate::synthlang::CorpusFile;
use crate::tinylm::checkpoint::decode;

use super::run::RunManifest;

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Human-readable summary of any artifact the toolkit writes.
pub fn inspect(path: &Path) -> Result<String> {
    let bytes = binio::read_file(path)?;
    let magic: Option<[u8; 4]> = bytes.get(..4).map(|m| m.try_into().unwrap());
    let mut s = String::new();
    match magic {
        Some(MAGIC_CHECKPOINT) => {
            let m = decode(&bytes, path)?;
            let c = &m.config;
            writeln!(s, "language model checkpoint (LFLM)").unwrap();
            writeln!(
                s,
                "vocab {} | d_model {} | layers {} | heads {} | d_ff {} | context {} | seed {}",
                c.vocab_size, c.d_model, c.num_layers, c.num_heads, c.d_ff, c.context_length, c.seed
            )
            .unwrap();
            writeln!(s, "parameters {}", m.num_params()).unwrap();
            writeln!(s, "checksum {}", m.checksum()).unwrap();
        }
        Some(MAGIC_SAE) => {
            let sae = decode_sae(&bytes, path)?;
            let (lo, hi) = range(decoder_norms(&sae).into_iter());
            writeln!(s, "sparse autoencoder (LFSA)").unwrap();
            let variant = match sae.variant {
                SaeVariant::TopK { k } => format!("top-k (K = {k})"),
                SaeVariant::L1 { lambda } => format!("L1 (lambda = {lambda})"),
            };
            writeln!(s, "variant {variant}").unwrap();
            writeln!(s, "layer {} | M {} | N {}", sae.layer, sae.num_features(), sae.d_model()).unwrap();
            writeln!(s, "decoder column norms [{lo:.6}, {hi:.6}]").unwrap();
        }
        Some(MAGIC_DUMP) => {
            let mut r = ByteReader::new(&bytes, path);
            let (layer, rows, n) = activations::read_header(&mut r)?;
            let expected = r.offset() as usize + rows * 8 + rows * n * 4;
            if bytes.len() < expected {
                return Err(Error::corrupt(
                    path,
                    bytes.len() as u64,
                    format!("truncated: expected {expected} bytes for {rows} rows of width {n}"),
                ));
            }
            writeln!(s, "activation dump (LFAD)").unwrap();
            writeln!(s, "layer {layer} | rows {rows} | N {n}").unwrap();
        }
        Some(MAGIC_STEERING) => {
            let sv = decode_steering(&bytes, path)?;
            let norm = sv.v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            writeln!(s, "steering vector (LFSV)").unwrap();
            writeln!(s, "layer {} | {} -> {} | N {} | norm {norm:.6}", sv.layer, sv.source, sv.target, sv.v.len()).unwrap();
            match &sv.gate {
                None => writeln!(s, "gate none").unwrap(),
                Some(g) => writeln!(s, "gate {:?} on features {:?}, threshold {}", g.mode, g.features, g.threshold).unwrap(),
            }
        }
        _ => return inspect_text(path, &bytes),
    }
    Ok(s)
}

fn inspect_text(path: &Path, bytes: &[u8]) -> Result<String> {
    let unknown = |msg: &str| Error::UnknownFormat {
        path: path.into(),
        msg: msg.into(),
    };
    let text = std::str::from_utf8(bytes).map_err(|_| unknown("not a recognized binary header or text file"))?;
    let mut s = String::new();
    if text.trim_start().starts_with('{') {
        let v: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::corrupt(path, e.column() as u64, format!("JSON: {e}")))?;
        if v.get("format").and_then(|f| f.as_str()) == Some(crate::synthlang::CORPUS_FORMAT) {
            let c = CorpusFile::load(path)?;
            writeln!(s, "corpus").unwrap();
            writeln!(
                s,
                "languages {} | vocab {} | sentences {} | fit {} | eval {}",
                c.family.num_languages(),
                c.family.vocab_size,
                c.corpus.len(),
                c.split.fit,
                c.split.eval
            )
            .unwrap();
        } else if v.get("manifest_hash").is_some() {
            let m = RunManifest::load(path)?;
            writeln!(s, "run manifest").unwrap();
            writeln!(s, "hash {}", m.manifest_hash).unwrap();
            writeln!(s, "config {} | seed {} | version {}", m.config_hash, m.seed, m.tool_version).unwrap();
            writeln!(s, "artifacts {} | stages executed {}/{}", m.artifacts.len(), m.executed().len(), m.stages.len()).unwrap();
        } else if let Some(kind) = v.get("kind").and_then(|k| k.as_str()) {
            let rows = v.get("rows").and_then(|r| r.as_array()).map_or(0, |r| r.len());
            writeln!(s, "{kind} report (JSON), {rows} rows").unwrap();
            if let Some(note) = v.get("note").and_then(|n| n.as_str()) {
                writeln!(s, "note: {note}").unwrap();
            }
        } else {
            return Err(unknown("JSON document of unknown kind"));
        }
        return Ok(s);
    }
    let header: Vec<&str> = text.lines().next().unwrap_or("").split(',').collect();
    let rows = text.lines().skip(1).filter(|l| !l.is_empty()).count();
    if header == SCORE_COLUMNS {
        for t in read_scores_csv(path)? {
            writeln!(s, "layer {}: {} features", t.layer, t.num_features()).unwrap();
            for lang in 0..t.num_languages() {
                let top = t.top_features(lang, 3.min(t.num_features()))?;
                let list: Vec<String> = top.iter().map(|(f, nu)| format!("{f} (nu {nu:.4})")).collect();
                writeln!(s, "  language {lang}: {}", list.join(", ")).unwrap();
            }
        }
        return Ok(s);
    }
    for (kind, cols) in [
        (CeDeltaRow::KIND, CeDeltaRow::COLUMNS),
        (SynergyRow::KIND, SynergyRow::COLUMNS),
        (TaskRow::KIND, TaskRow::COLUMNS),
        (CodeSwitchRow::KIND, CodeSwitchRow::COLUMNS),
    ] {
        if header == cols {
            writeln!(s, "{kind} report (CSV), {rows} rows").unwrap();
            return Ok(s);
        }
    }
    Err(unknown("unrecognized file"))
}
