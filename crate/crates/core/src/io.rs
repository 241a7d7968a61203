// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk formats.
//!
//! Tensor file (`.snce`), all integers little-endian:
//!
//! ```text
//! magic      4 bytes   "SNCE"
//! version    u32       1
//! dtype      u32       0 = float32
//! ndim       u32
//! shape      ndim × u64
//! mask_flag  u32       0 or 1
//! payload    product(shape) × f32, row-major
//! mask       shape[0] bytes, present iff mask_flag = 1 (1 = real token, 0 = padding)
//! ```
//!
//! Checkpoint (`.snck`):
//!
//! ```text
//! magic      4 bytes   "SNCK"
//! version    u32       1
//! config     u32 byte length + UTF-8 JSON {d, m, k, alpha, aux_k, dead_window}
//! 4 × tensor u32 name length + UTF-8 name + tensor file body without magic
//!            in the order W_enc, b_enc, W_dec, b_pre
//! ```
//!
//! Readers validate every header field before allocating the payload and
//! reject trailing bytes. Writers go through a temporary file and a rename.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::concept::{ConceptPair, ConceptPairSet, Diagnostics, Identification, NeuronScoreTable};
use crate::numerics::Matrix;
use crate::sae::{SaeConfig, SaeParams};
use crate::{Error, Result};

pub const TENSOR_MAGIC: [u8; 4] = *b"SNCE";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SNCK";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;
const MAX_NDIM: u32 = 8;

/// An n-dimensional float32 tensor with an optional per-row token mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<u64>,
    pub data: Vec<f32>,
    pub mask: Option<Vec<u8>>,
}

impl Tensor {
    pub fn from_matrix(m: &Matrix, mask: Option<&[bool]>) -> Result<Self> {
        if let Some(mask) = mask {
            if mask.len() != m.rows() {
                return Err(Error::Shape(format!(
                    "token mask has {} entries for {} tokens",
                    mask.len(),
                    m.rows()
                )));
            }
        }
        Ok(Self {
            shape: vec![m.rows() as u64, m.cols() as u64],
            data: to_f32(m.data())?,
            mask: mask.map(|b| b.iter().map(|&x| u8::from(x)).collect()),
        })
    }

    pub fn from_vector(v: &[f64]) -> Result<Self> {
        Ok(Self {
            shape: vec![v.len() as u64],
            data: to_f32(v)?,
            mask: None,
        })
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&x| f64::from(x)).collect()
    }

    /// Interprets the tensor as tokens × features. A 1-D tensor is a single row.
    pub fn to_matrix(&self) -> Result<Matrix> {
        let (rows, cols) = match self.shape.as_slice() {
            [n] => (1, *n as usize),
            [r, c] => (*r as usize, *c as usize),
            other => {
                return Err(Error::format(
                    "ndim",
                    format!("expected a 1-D or 2-D tensor, got shape {other:?}"),
                ))
            }
        };
        Matrix::from_vec(rows, cols, self.to_f64())
    }

    /// Serialized bytes including the magic.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = TENSOR_MAGIC.to_vec();
        self.write_body(&mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4, "magic")? != TENSOR_MAGIC {
            return Err(Error::format("magic", "bad magic"));
        }
        let t = Self::read_body(&mut r)?;
        r.finish()?;
        Ok(t)
    }

    fn write_body(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&DTYPE_F32.to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &s in &self.shape {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.extend_from_slice(&u32::from(self.mask.is_some()).to_le_bytes());
        for &x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        if let Some(mask) = &self.mask {
            out.extend_from_slice(mask);
        }
    }

    fn read_body(r: &mut Reader<'_>) -> Result<Self> {
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::format(
                "version",
                format!("unsupported version {version}"),
            ));
        }
        let dtype = r.u32("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::format("dtype", format!("unsupported dtype {dtype}")));
        }
        let ndim = r.u32("ndim")?;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(Error::format("ndim", format!("unsupported ndim {ndim}")));
        }
        let shape = (0..ndim)
            .map(|_| r.u64("shape"))
            .collect::<Result<Vec<_>>>()?;
        let mask_flag = r.u32("mask_flag")?;
        if mask_flag > 1 {
            return Err(Error::format(
                "mask_flag",
                format!("mask_flag must be 0 or 1, got {mask_flag}"),
            ));
        }
        let count = shape
            .iter()
            .try_fold(1u64, |acc, &s| acc.checked_mul(s))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format("shape", "shape overflows"))?;
        let mask_len = if mask_flag == 1 { shape[0] } else { 0 };
        // check sizes before allocating anything shape-dependent
        if count > r.remaining() as u64 {
            return Err(Error::format("payload", "truncated payload"));
        }
        if mask_len > r.remaining() as u64 - count {
            return Err(Error::format("mask", "truncated payload"));
        }
        let payload = r.take(count as usize, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mask = if mask_flag == 1 {
            let m = r.take(mask_len as usize, "mask")?.to_vec();
            if let Some(bad) = m.iter().find(|&&b| b > 1) {
                return Err(Error::format(
                    "mask",
                    format!("mask bytes must be 0 or 1, found {bad}"),
                ));
            }
            Some(m)
        } else {
            None
        };
        Ok(Self { shape, data, mask })
    }
}

fn to_f32(v: &[f64]) -> Result<Vec<f32>> {
    v.iter()
        .map(|&x| {
            let y = x as f32;
            if y.is_finite() {
                Ok(y)
            } else {
                Err(Error::Input(format!(
                    "value {x} is not representable as a finite f32"
                )))
            }
        })
        .collect()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::format(field, "truncated payload"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        let b = self.take(8, field)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format(
                "eof",
                format!("{} trailing bytes after declared payload", self.remaining()),
            ));
        }
        Ok(())
    }
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Token embeddings read from a tensor file.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTensor {
    pub matrix: Matrix,
    pub mask: Option<Vec<bool>>,
}

impl TokenTensor {
    /// Rows whose mask byte is 1 (all rows when there is no mask).
    pub fn real_tokens(&self) -> Matrix {
        match &self.mask {
            None => self.matrix.clone(),
            Some(mask) => {
                let keep: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
                self.matrix.select_rows(&keep)
            }
        }
    }

    pub fn real_token_count(&self) -> usize {
        self.mask
            .as_ref()
            .map_or(self.matrix.rows(), |m| m.iter().filter(|b| **b).count())
    }
}

pub fn write_tensor(path: &Path, matrix: &Matrix, mask: Option<&[bool]>) -> Result<()> {
    write_atomic(path, &Tensor::from_matrix(matrix, mask)?.to_bytes())
}

pub fn read_tensor(path: &Path) -> Result<TokenTensor> {
    let t = Tensor::from_bytes(&read_file(path)?)?;
    Ok(TokenTensor {
        matrix: t.to_matrix()?,
        mask: t.mask.map(|m| m.into_iter().map(|b| b == 1).collect()),
    })
}

/// Config block of a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigBlock {
    d: usize,
    m: usize,
    k: usize,
    alpha: f64,
    aux_k: usize,
    dead_window: u64,
}

impl From<&SaeConfig> for ConfigBlock {
    fn from(c: &SaeConfig) -> Self {
        Self {
            d: c.input_dim,
            m: c.latent_dim,
            k: c.topk,
            alpha: c.aux_coeff,
            aux_k: c.aux_k,
            dead_window: c.dead_window,
        }
    }
}

impl From<ConfigBlock> for SaeConfig {
    fn from(c: ConfigBlock) -> Self {
        Self {
            input_dim: c.d,
            latent_dim: c.m,
            topk: c.k,
            aux_coeff: c.alpha,
            aux_k: c.aux_k,
            dead_window: c.dead_window,
        }
    }
}

const TENSOR_NAMES: [&str; 4] = ["W_enc", "b_enc", "W_dec", "b_pre"];

pub fn checkpoint_bytes(params: &SaeParams, config: &SaeConfig) -> Result<Vec<u8>> {
    params.check_shapes(config)?;
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(&ConfigBlock::from(config)).expect("config serializes");
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let tensors = [
        Tensor::from_matrix(&params.w_enc, None)?,
        Tensor::from_vector(&params.b_enc)?,
        Tensor::from_matrix(&params.w_dec, None)?,
        Tensor::from_vector(&params.b_pre)?,
    ];
    for (name, t) in TENSOR_NAMES.iter().zip(&tensors) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        t.write_body(&mut out);
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(SaeParams, SaeConfig)> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format("magic", "bad magic"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            "version",
            format!("unsupported version {version}"),
        ));
    }
    let len = r.u32("config")? as usize;
    let block: ConfigBlock = serde_json::from_slice(r.take(len, "config")?)
        .map_err(|e| Error::format("config", format!("invalid config block: {e}")))?;
    let config = SaeConfig::from(block);
    config
        .validate()
        .map_err(|e| Error::format("config", e.to_string()))?;
    let (d, m) = (config.input_dim as u64, config.latent_dim as u64);
    let expected: [Vec<u64>; 4] = [vec![m, d], vec![m], vec![d, m], vec![d]];
    let mut tensors = Vec::with_capacity(4);
    for (name, want) in TENSOR_NAMES.iter().zip(expected) {
        let len = r.u32(name)? as usize;
        let got = r.take(len, name)?;
        if got != name.as_bytes() {
            return Err(Error::format(
                *name,
                format!(
                    "expected tensor {name}, found {:?}",
                    String::from_utf8_lossy(got)
                ),
            ));
        }
        let t = Tensor::read_body(&mut r).map_err(|e| match e {
            Error::Format { field, message } => Error::format(format!("{name}.{field}"), message),
            other => other,
        })?;
        if t.shape != want {
            return Err(Error::format(
                *name,
                format!("shape {:?} does not match config {:?}", t.shape, want),
            ));
        }
        if t.mask.is_some() {
            return Err(Error::format(
                *name,
                "parameter tensors carry no token mask",
            ));
        }
        if t.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::format(*name, "non-finite parameter value"));
        }
        tensors.push(t);
    }
    r.finish()?;
    let (d, m) = (config.input_dim, config.latent_dim);
    let params = SaeParams {
        w_enc: Matrix::from_vec(m, d, tensors[0].to_f64())?,
        b_enc: tensors[1].to_f64(),
        w_dec: Matrix::from_vec(d, m, tensors[2].to_f64())?,
        b_pre: tensors[3].to_f64(),
    };
    Ok((params, config))
}

pub fn save_checkpoint(params: &SaeParams, config: &SaeConfig, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(params, config)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(SaeParams, SaeConfig)> {
    checkpoint_from_bytes(&read_file(path)?)
}

/// One line of a concept-pair manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub concept: String,
    pub deconcept: String,
    pub concept_emb: PathBuf,
    pub deconcept_emb: PathBuf,
}

/// A manifest row with its embedding paths resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDescriptor {
    pub line: usize,
    pub concept_text: String,
    pub deconcept_text: String,
    pub concept_emb: PathBuf,
    pub deconcept_emb: PathBuf,
}

/// Parses a JSON-lines concept-pair manifest. Relative embedding paths are
/// resolved against the manifest's directory. Blank lines are skipped.
pub fn read_concept_manifest(path: &Path) -> Result<Vec<PairDescriptor>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(line).map_err(|e| {
            Error::format(
                format!("line {line_no}"),
                format!("malformed manifest row: {e}"),
            )
        })?;
        let resolve = |p: &Path| -> Result<PathBuf> {
            let full = if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            };
            if !full.is_file() {
                return Err(Error::Input(format!(
                    "line {line_no}: embedding file {} not found",
                    full.display()
                )));
            }
            Ok(full)
        };
        out.push(PairDescriptor {
            line: line_no,
            concept_emb: resolve(&row.concept_emb)?,
            deconcept_emb: resolve(&row.deconcept_emb)?,
            concept_text: row.concept,
            deconcept_text: row.deconcept,
        });
    }
    Ok(out)
}

pub fn write_concept_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(row).expect("row serializes"));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Loads every pair's embeddings, keeping only real (unpadded) tokens.
pub fn load_concept_pairs(concept: &str, descriptors: &[PairDescriptor]) -> Result<ConceptPairSet> {
    let pairs = descriptors
        .iter()
        .map(|d| {
            let c = read_tensor(&d.concept_emb)?.real_tokens();
            let dc = read_tensor(&d.deconcept_emb)?.real_tokens();
            let mut pair = ConceptPair::new(c, dc)
                .map_err(|e| Error::Input(format!("line {}: {e}", d.line)))?;
            pair.concept_text = Some(d.concept_text.clone());
            pair.deconcept_text = Some(d.deconcept_text.clone());
            Ok(pair)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConceptPairSet {
        concept: concept.to_string(),
        pairs,
    })
}

/// JSON form of an identification run: `R_C`, the differential set, and
/// both score tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentificationFile {
    pub concept: String,
    pub topk: usize,
    pub neurons: Vec<usize>,
    pub differential: Vec<usize>,
    pub diagnostics: Diagnostics,
    pub concept_scores: NeuronScoreTable,
    pub deconcept_scores: NeuronScoreTable,
}

impl IdentificationFile {
    pub fn new(concept: &str, topk: usize, id: &Identification) -> Self {
        Self {
            concept: concept.to_string(),
            topk,
            neurons: id.neurons.clone(),
            differential: id.differential.clone(),
            diagnostics: id.diagnostics,
            concept_scores: id.concept_scores.clone(),
            deconcept_scores: id.deconcept_scores.clone(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self).expect("identification serializes");
        json.push('\n');
        write_atomic(path, json.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::format("json", format!("{}: {e}", path.display())))
    }
}
