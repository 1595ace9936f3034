//! Token grids, masks, the level embedding tables and the codegram file format.
//!
//! A codegram is an `L x K` grid of codeword indices: `L` time-steps, `K`
//! residual quantizer levels, each level drawing from a vocabulary of `D`
//! codewords. Storage is row-major with the level index varying fastest.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Codec layout shared by every grid produced or consumed by the engine.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookSpec {
    pub levels: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Tokens per second. Informational only.
    pub frame_rate: f64,
}

impl Default for CodebookSpec {
    fn default() -> Self {
        CodebookSpec {
            levels: 9,
            vocab_size: 1024,
            embed_dim: 128,
            frame_rate: 86.1,
        }
    }
}

impl CodebookSpec {
    pub fn new(levels: usize, vocab_size: usize, embed_dim: usize) -> Result<Self> {
        let spec = CodebookSpec {
            levels,
            vocab_size,
            embed_dim,
            ..CodebookSpec::default()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::invalid("levels must be >= 1"));
        }
        if self.vocab_size < 2 {
            return Err(Error::invalid("vocab_size must be >= 2"));
        }
        if self.embed_dim < 1 {
            return Err(Error::invalid("embed_dim must be >= 1"));
        }
        Ok(())
    }

    /// Token id reserved for masked positions.
    #[inline]
    pub fn mask_token(&self) -> u32 {
        self.vocab_size as u32
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codegram {
    len: usize,
    spec: CodebookSpec,
    tokens: Vec<u32>,
}

impl Codegram {
    pub fn new(len: usize, spec: CodebookSpec, tokens: Vec<u32>) -> Result<Self> {
        spec.validate()?;
        if len < 1 {
            return Err(Error::invalid("codegram length must be >= 1"));
        }
        if tokens.len() != len * spec.levels {
            return Err(Error::shape("codegram tokens", len * spec.levels, tokens.len()));
        }
        for (i, &t) in tokens.iter().enumerate() {
            if t as usize >= spec.vocab_size {
                return Err(Error::TokenOutOfRange {
                    row: i / spec.levels,
                    level: i % spec.levels,
                    token: t,
                    vocab: spec.vocab_size,
                });
            }
        }
        Ok(Codegram { len, spec, tokens })
    }

    pub fn from_rows(spec: CodebookSpec, rows: &[Vec<u32>]) -> Result<Self> {
        let mut tokens = Vec::with_capacity(rows.len() * spec.levels);
        for r in rows {
            if r.len() != spec.levels {
                return Err(Error::shape("codegram row width", spec.levels, r.len()));
            }
            tokens.extend_from_slice(r);
        }
        Codegram::new(rows.len(), spec, tokens)
    }

    pub fn random<R: Rng + ?Sized>(len: usize, spec: CodebookSpec, rng: &mut R) -> Self {
        let tokens = (0..len * spec.levels)
            .map(|_| rng.random_range(0..spec.vocab_size as u32))
            .collect();
        Codegram { len, spec, tokens }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn levels(&self) -> usize {
        self.spec.levels
    }

    #[inline]
    pub fn spec(&self) -> &CodebookSpec {
        &self.spec
    }

    #[inline]
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    #[inline]
    pub fn get(&self, l: usize, k: usize) -> u32 {
        self.tokens[l * self.spec.levels + k]
    }

    pub fn row(&self, l: usize) -> &[u32] {
        let k = self.spec.levels;
        &self.tokens[l * k..(l + 1) * k]
    }

    /// One line per time-step, `K` space-separated integers.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.tokens.len() * 5);
        for l in 0..self.len {
            let row = self.row(l);
            for (k, t) in row.iter().enumerate() {
                if k > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{t}");
            }
            out.push('\n');
        }
        out
    }
}

/// `true` marks a masked position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskTensor {
    len: usize,
    levels: usize,
    flags: Vec<bool>,
}

impl MaskTensor {
    pub fn new(len: usize, levels: usize, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != len * levels {
            return Err(Error::shape("mask flags", len * levels, flags.len()));
        }
        Ok(MaskTensor { len, levels, flags })
    }

    pub fn filled(len: usize, levels: usize, value: bool) -> Self {
        MaskTensor {
            len,
            levels,
            flags: vec![value; len * levels],
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn levels(&self) -> usize {
        self.levels
    }

    #[inline]
    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    #[inline]
    pub fn flags_mut(&mut self) -> &mut [bool] {
        &mut self.flags
    }

    #[inline]
    pub fn get(&self, l: usize, k: usize) -> bool {
        self.flags[l * self.levels + k]
    }

    pub fn count_masked(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub(crate) fn check_against(&self, len: usize, levels: usize) -> Result<()> {
        if self.len != len {
            return Err(Error::shape("mask length", len, self.len));
        }
        if self.levels != levels {
            return Err(Error::shape("mask levels", levels, self.levels));
        }
        Ok(())
    }
}

/// A codegram whose masked entries hold the sentinel id `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedCodegram {
    len: usize,
    spec: CodebookSpec,
    tokens: Vec<u32>,
}

impl MaskedCodegram {
    pub fn fully_masked(len: usize, spec: CodebookSpec) -> Self {
        MaskedCodegram {
            len,
            spec,
            tokens: vec![spec.mask_token(); len * spec.levels],
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn spec(&self) -> &CodebookSpec {
        &self.spec
    }

    #[inline]
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    #[inline]
    pub(crate) fn tokens_mut(&mut self) -> &mut [u32] {
        &mut self.tokens
    }

    pub fn is_masked(&self, idx: usize) -> bool {
        self.tokens[idx] == self.spec.mask_token()
    }

    /// Mask implied by sentinel entries.
    pub fn mask(&self) -> MaskTensor {
        let sentinel = self.spec.mask_token();
        MaskTensor {
            len: self.len,
            levels: self.spec.levels,
            flags: self.tokens.iter().map(|&t| t == sentinel).collect(),
        }
    }

    /// Fills every sentinel position from `original`.
    pub fn unmask_with(&self, original: &Codegram) -> Result<Codegram> {
        if original.len() != self.len {
            return Err(Error::shape("codegram length", self.len, original.len()));
        }
        let sentinel = self.spec.mask_token();
        let tokens = self
            .tokens
            .iter()
            .zip(original.tokens())
            .map(|(&t, &o)| if t == sentinel { o } else { t })
            .collect();
        Codegram::new(self.len, self.spec, tokens)
    }

    /// Converts to a plain codegram; fails if any position is still masked.
    pub fn into_codegram(self) -> Result<Codegram> {
        Codegram::new(self.len, self.spec, self.tokens)
    }
}

/// Replaces masked entries with the sentinel id `D`.
pub fn apply_mask(codegram: &Codegram, mask: &MaskTensor) -> Result<MaskedCodegram> {
    mask.check_against(codegram.len(), codegram.levels())?;
    let sentinel = codegram.spec().mask_token();
    let tokens = codegram
        .tokens()
        .iter()
        .zip(mask.flags())
        .map(|(&t, &m)| if m { sentinel } else { t })
        .collect();
    Ok(MaskedCodegram {
        len: codegram.len(),
        spec: *codegram.spec(),
        tokens,
    })
}

/// Learnable [NULL] vector substituted for one conditioning stream.
#[derive(Clone, Debug, PartialEq)]
pub struct NullEmbedding {
    pub stream: String,
    pub vector: Vec<f64>,
}

/// Per-level codeword tables, per-level [MASK] rows and per-stream [NULL] vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub spec: CodebookSpec,
    /// `K` tables of shape `D x embed_dim`.
    pub levels: Vec<Mat>,
    /// `K x embed_dim`; row `k` is the [MASK] embedding of level `k`.
    pub mask: Mat,
    pub null: Vec<NullEmbedding>,
}

impl EmbeddingTable {
    /// Seeded uniform init in `[-1/sqrt(embed_dim), 1/sqrt(embed_dim)]`.
    pub fn init<R: Rng + ?Sized>(spec: CodebookSpec, null_streams: &[(String, usize)], rng: &mut R) -> Self {
        let bound = 1.0 / (spec.embed_dim as f64).sqrt();
        let mut uniform = |rows: usize, cols: usize| {
            Mat::from_vec(
                rows,
                cols,
                (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect(),
            )
        };
        let levels = (0..spec.levels)
            .map(|_| uniform(spec.vocab_size, spec.embed_dim))
            .collect();
        let mask = uniform(spec.levels, spec.embed_dim);
        let null = null_streams
            .iter()
            .map(|(name, width)| NullEmbedding {
                stream: name.clone(),
                vector: uniform(1, *width).into_vec(),
            })
            .collect();
        EmbeddingTable {
            spec,
            levels,
            mask,
            null,
        }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.levels.iter_mut().for_each(|t| t.scale(alpha));
        out.mask.scale(alpha);
        out.null
            .iter_mut()
            .for_each(|n| n.vector.iter_mut().for_each(|v| *v *= alpha));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.levels.iter().all(Mat::is_finite)
            && self.mask.is_finite()
            && self.null.iter().all(|n| n.vector.iter().all(|v| v.is_finite()))
    }
}

/// Sum over levels of the codeword (or [MASK]) embedding at each time-step.
pub fn embed_sum(codegram: &Codegram, mask: &MaskTensor, table: &EmbeddingTable) -> Result<Mat> {
    if table.spec.levels != codegram.levels() {
        return Err(Error::shape("embedding levels", codegram.levels(), table.spec.levels));
    }
    if table.spec.vocab_size != codegram.spec().vocab_size {
        return Err(Error::shape(
            "embedding vocabulary",
            codegram.spec().vocab_size,
            table.spec.vocab_size,
        ));
    }
    let masked = apply_mask(codegram, mask)?;
    let tables: Vec<&Mat> = table.levels.iter().collect();
    Ok(embed_sum_tokens(
        masked.tokens(),
        codegram.levels(),
        &tables,
        &table.mask,
    ))
}

/// Shared kernel: `tokens` is row-major `L x K` with sentinel `D` for masked
/// positions.
pub(crate) fn embed_sum_tokens(tokens: &[u32], levels: usize, tables: &[&Mat], mask: &Mat) -> Mat {
    let dim = mask.cols();
    let len = tokens.len() / levels;
    let mut out = Mat::zeros(len, dim);
    for l in 0..len {
        let dst = out.row_mut(l);
        for k in 0..levels {
            let t = tokens[l * levels + k] as usize;
            let src = if t >= tables[k].rows() {
                mask.row(k)
            } else {
                tables[k].row(t)
            };
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    out
}

const MAGIC: &[u8; 4] = b"CGRM";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 4 + 8;

/// Little-endian header (magic, version, L, K, D, frame_rate) then `u32` tokens.
pub fn write_codegram<W: Write>(codegram: &Codegram, mut w: W) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + codegram.tokens().len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(codegram.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(codegram.levels() as u32).to_le_bytes());
    buf.extend_from_slice(&(codegram.spec().vocab_size as u32).to_le_bytes());
    buf.extend_from_slice(&codegram.spec().frame_rate.to_le_bytes());
    for t in codegram.tokens() {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads a codegram; the embedding width of the returned spec is taken from
/// `embed_dim` since the file does not carry it.
pub fn read_codegram<R: Read>(mut r: R, embed_dim: usize) -> Result<Codegram> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_codegram(&bytes, embed_dim)
}

pub fn decode_codegram(bytes: &[u8], embed_dim: usize) -> Result<Codegram> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::CorruptHeader("bad magic".into()));
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::CorruptHeader(format!("unsupported version {version}")));
    }
    let len = u32_at(8) as usize;
    let levels = u32_at(12) as usize;
    let vocab = u32_at(16) as usize;
    let frame_rate = f64::from_le_bytes(bytes[20..28].try_into().unwrap());
    if len == 0 || levels == 0 || vocab < 2 || !frame_rate.is_finite() {
        return Err(Error::CorruptHeader(format!(
            "invalid dimensions L={len} K={levels} D={vocab}"
        )));
    }
    let expected = HEADER_LEN + len * levels * 4;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::CorruptHeader(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }
    let spec = CodebookSpec {
        levels,
        vocab_size: vocab,
        embed_dim,
        frame_rate,
    };
    let tokens = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Codegram::new(len, spec, tokens)
}

pub fn save_codegram(codegram: &Codegram, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_codegram(codegram, std::io::BufWriter::new(f))
}

pub fn load_codegram(path: &Path, embed_dim: usize) -> Result<Codegram> {
    let bytes = std::fs::read(path)?;
    decode_codegram(&bytes, embed_dim)
}
