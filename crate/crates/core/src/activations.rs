//! Residual-stream activation dumps.
//!
//! File layout (little-endian): magic "LFAD" | u32 version | u32 layer |
//! u32 rows | u32 N | per row: u32 text id, u16 language, u16 position |
//! rows × N f32, row-major.

use std::path::Path;

use ndarray::Array2;

use crate::binio::{self, ByteReader, ByteWriter, MAGIC_DUMP};
use crate::error::{Error, Result};
use crate::synthlang::{LangId, TokenId};
use crate::tinylm::Model;

pub const DUMP_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowRef {
    pub text: u32,
    pub language: u16,
    pub position: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDump {
    pub layer: usize,
    pub rows: Array2<f32>,
    pub index: Vec<RowRef>,
}

/// Captures the residual stream at `layers` for every position of every
/// text; returns one dump per requested layer.
pub fn dump_activations(
    model: &Model<f32>,
    texts: &[(LangId, Vec<TokenId>)],
    layers: &[usize],
    batch: usize,
) -> Result<Vec<ActivationDump>> {
    dump_filtered(model, texts, layers, batch, |_, _| true)
}

/// Like [`dump_activations`] but keeps only positions where
/// `keep(position, token)` holds.
pub fn dump_filtered(
    model: &Model<f32>,
    texts: &[(LangId, Vec<TokenId>)],
    layers: &[usize],
    batch: usize,
    keep: impl Fn(usize, TokenId) -> bool,
) -> Result<Vec<ActivationDump>> {
    if texts.is_empty() {
        return Err(Error::Empty("no texts to dump".into()));
    }
    if layers.is_empty() {
        return Err(Error::Empty("no layers requested".into()));
    }
    let d = model.config.d_model;
    let mut data: Vec<Vec<f32>> = vec![Vec::new(); layers.len()];
    let mut index = Vec::new();
    for (chunk_i, chunk) in texts.chunks(batch.max(1)).enumerate() {
        let seqs: Vec<&[TokenId]> = chunk.iter().map(|(_, t)| t.as_slice()).collect();
        let out = model.forward_batch(&seqs, layers, &[])?;
        for (i, (lang, toks)) in chunk.iter().enumerate() {
            let text = (chunk_i * batch.max(1) + i) as u32;
            let kept: Vec<usize> = (0..toks.len()).filter(|&p| keep(p, toks[p])).collect();
            for &p in &kept {
                index.push(RowRef {
                    text,
                    language: *lang as u16,
                    position: p as u16,
                });
            }
            for (li, &layer) in layers.iter().enumerate() {
                let cap = out.capture_of(layer, i).unwrap();
                for &p in &kept {
                    data[li].extend(cap.row(p).iter());
                }
            }
        }
    }
    let n = index.len();
    layers
        .iter()
        .zip(data)
        .map(|(&layer, flat)| {
            Ok(ActivationDump {
                layer,
                rows: Array2::from_shape_vec((n, d), flat).map_err(|e| Error::Invalid(e.to_string()))?,
                index: index.clone(),
            })
        })
        .collect()
}

impl ActivationDump {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::header(MAGIC_DUMP, DUMP_VERSION);
        w.u32(self.layer as u32);
        w.u32(self.rows.nrows() as u32);
        w.u32(self.rows.ncols() as u32);
        for r in &self.index {
            w.u32(r.text);
            w.u16(r.language);
            w.u16(r.position);
        }
        w.f32s(self.rows.as_standard_layout().as_slice().unwrap());
        w.into_inner()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?, path)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        let (layer, rows, n) = read_header(&mut r)?;
        let mut index = Vec::with_capacity(rows);
        for _ in 0..rows {
            index.push(RowRef {
                text: r.u32("row text id")?,
                language: r.u16("row language")?,
                position: r.u16("row position")?,
            });
        }
        let flat = r.f32s(rows * n, "activations")?;
        r.finish()?;
        Ok(Self {
            layer,
            rows: Array2::from_shape_vec((rows, n), flat).unwrap(),
            index,
        })
    }
}

/// Reads `(layer, rows, N)` after the magic and version.
pub(crate) fn read_header(r: &mut ByteReader) -> Result<(usize, usize, usize)> {
    r.expect_header(MAGIC_DUMP, DUMP_VERSION)?;
    let layer = r.u32("layer")? as usize;
    let rows = r.u32("row count")? as usize;
    let n = r.u32("N")? as usize;
    if n == 0 {
        return Err(r.corrupt("zero activation width"));
    }
    Ok((layer, rows, n))
}
