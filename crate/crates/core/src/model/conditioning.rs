//! Conditioning feature streams and their length adaptation.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// What kind of visual information a stream carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamRole {
    /// Per-frame semantic features ("clip-like").
    FrameSemantic,
    /// Features sensitive to temporal alignment ("s3d-like").
    AlignmentSensitive,
}

impl StreamRole {
    pub fn label(self) -> &'static str {
        match self {
            StreamRole::FrameSemantic => "frame-semantic",
            StreamRole::AlignmentSensitive => "alignment-sensitive",
        }
    }

    fn code(self) -> u8 {
        match self {
            StreamRole::FrameSemantic => 0,
            StreamRole::AlignmentSensitive => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(StreamRole::FrameSemantic),
            1 => Some(StreamRole::AlignmentSensitive),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stream {
    pub name: String,
    pub role: StreamRole,
    /// `frames x channels`
    pub data: Mat,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ConditioningBundle {
    pub streams: Vec<Stream>,
}

impl ConditioningBundle {
    pub fn new(streams: Vec<Stream>) -> Result<Self> {
        let b = ConditioningBundle { streams };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.streams {
            if s.data.rows() < 1 {
                return Err(Error::invalid(format!("stream `{}` has no frames", s.name)));
            }
            if !s.data.is_finite() {
                return Err(Error::NonFinite(format!("conditioning stream `{}`", s.name)));
            }
        }
        Ok(())
    }

    pub fn stream(&self, name: &str) -> Option<&Stream> {
        self.streams.iter().find(|s| s.name == name)
    }

    pub fn with_role(&self, role: StreamRole) -> impl Iterator<Item = &Stream> {
        self.streams.iter().filter(move |s| s.role == role)
    }
}

/// Source row for output row `j` when resampling `n_in` frames to `n_out`:
/// `round_half_down(j * n_in / n_out)`, clamped to the last frame.
#[inline]
pub fn resample_index(j: usize, n_in: usize, n_out: usize) -> usize {
    let x = j * n_in;
    let q = x / n_out;
    let r = x % n_out;
    let idx = if 2 * r > n_out { q + 1 } else { q };
    idx.min(n_in - 1)
}

/// Nearest-neighbour length adapter (frame repetition / decimation).
pub fn resample_nn(seq: &Mat, n_out: usize) -> Result<Mat> {
    if seq.rows() == 0 {
        return Err(Error::invalid("cannot resample an empty sequence"));
    }
    if n_out == 0 {
        return Err(Error::invalid("output length must be >= 1"));
    }
    let n_in = seq.rows();
    let mut out = Mat::zeros(n_out, seq.cols());
    for j in 0..n_out {
        out.row_mut(j).copy_from_slice(seq.row(resample_index(j, n_in, n_out)));
    }
    Ok(out)
}

/// Adjoint of [`resample_nn`]: scatters output-row gradients back onto
/// their source rows.
pub fn resample_nn_backward(d_out: &Mat, n_in: usize) -> Mat {
    let n_out = d_out.rows();
    let mut d_in = Mat::zeros(n_in, d_out.cols());
    for j in 0..n_out {
        let src = resample_index(j, n_in, n_out);
        for (a, b) in d_in.row_mut(src).iter_mut().zip(d_out.row(j)) {
            *a += b;
        }
    }
    d_in
}

/// Which trunk consumes the conditioning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Structure {
    /// Stack of AdaLN blocks modulated by conditioning aligned to the tokens.
    Adaln,
    /// Conditioning encoder plus cross-attention decoder.
    Seq2seq,
    /// Semantic streams through the encoder, alignment streams through AdaLN.
    Hybrid,
}

impl Structure {
    pub fn has_encoder(self) -> bool {
        matches!(self, Structure::Seq2seq | Structure::Hybrid)
    }

    pub fn has_adaln(self) -> bool {
        matches!(self, Structure::Adaln | Structure::Hybrid)
    }
}

/// Raw conditioning ready for the model's front-end adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningInputs {
    /// `target_len x sum(C_i)` for the AdaLN path.
    pub aligned: Option<Mat>,
    /// `N x sum(C_i)` at the semantic stream's own length for the encoder.
    pub encoder: Option<Mat>,
}

/// Resamples and concatenates streams channel-wise for the chosen structure.
///
/// * AdaLN: every stream resampled to `target_len`.
/// * Seq2seq: streams resampled to the length of the first frame-semantic stream.
/// * Hybrid: alignment-sensitive streams to `target_len` for AdaLN,
///   frame-semantic streams (at the first one's length) for the encoder.
pub fn build_conditioning(
    bundle: &ConditioningBundle,
    structure: Structure,
    target_len: usize,
) -> Result<ConditioningInputs> {
    if bundle.streams.is_empty() {
        return Err(Error::invalid("conditioning bundle has no streams"));
    }
    let concat_at = |streams: &[&Stream], len: usize| -> Result<Mat> {
        let resampled = streams
            .iter()
            .map(|s| resample_nn(&s.data, len))
            .collect::<Result<Vec<_>>>()?;
        Ok(Mat::hcat(&resampled.iter().collect::<Vec<_>>()))
    };
    let semantic_len = || {
        bundle
            .with_role(StreamRole::FrameSemantic)
            .next()
            .map(|s| s.data.rows())
            .ok_or(Error::MissingRole(StreamRole::FrameSemantic.label()))
    };
    match structure {
        Structure::Adaln => {
            let all: Vec<&Stream> = bundle.streams.iter().collect();
            Ok(ConditioningInputs {
                aligned: Some(concat_at(&all, target_len)?),
                encoder: None,
            })
        }
        Structure::Seq2seq => {
            let n = semantic_len()?;
            let all: Vec<&Stream> = bundle.streams.iter().collect();
            Ok(ConditioningInputs {
                aligned: None,
                encoder: Some(concat_at(&all, n)?),
            })
        }
        Structure::Hybrid => {
            let n = semantic_len()?;
            let align: Vec<&Stream> = bundle.with_role(StreamRole::AlignmentSensitive).collect();
            if align.is_empty() {
                return Err(Error::MissingRole(StreamRole::AlignmentSensitive.label()));
            }
            let sem: Vec<&Stream> = bundle.with_role(StreamRole::FrameSemantic).collect();
            Ok(ConditioningInputs {
                aligned: Some(concat_at(&align, target_len)?),
                encoder: Some(concat_at(&sem, n)?),
            })
        }
    }
}

const MAGIC: &[u8; 4] = b"CGCB";
const VERSION: u32 = 1;

/// Header (magic, version, stream count) then per stream: name, role,
/// frames, channels and row-major `f32` values.
pub fn write_bundle<W: Write>(bundle: &ConditioningBundle, mut w: W) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(bundle.streams.len() as u32).to_le_bytes());
    for s in &bundle.streams {
        buf.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(s.name.as_bytes());
        buf.push(s.role.code());
        buf.extend_from_slice(&(s.data.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(s.data.cols() as u32).to_le_bytes());
        for v in s.data.data() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_bundle<R: Read>(mut r: R) -> Result<ConditioningBundle> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if at + n > bytes.len() {
            return Err(Error::Truncated {
                expected: at + n,
                found: bytes.len(),
            });
        }
        at += n;
        Ok(&bytes[at - n..at])
    };
    if take(4)? != MAGIC {
        return Err(Error::CorruptHeader("bad conditioning magic".into()));
    }
    let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let version = u32_of(take(4)?);
    if version != VERSION {
        return Err(Error::CorruptHeader(format!("unsupported version {version}")));
    }
    let count = u32_of(take(4)?) as usize;
    let mut streams = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32_of(take(4)?) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec())
            .map_err(|_| Error::CorruptHeader("stream name is not utf-8".into()))?;
        let role =
            StreamRole::from_code(take(1)?[0]).ok_or_else(|| Error::CorruptHeader("unknown stream role".into()))?;
        let rows = u32_of(take(4)?) as usize;
        let cols = u32_of(take(4)?) as usize;
        let raw = take(rows * cols * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        streams.push(Stream {
            name,
            role,
            data: Mat::from_vec(rows, cols, data),
        });
    }
    if at != bytes.len() {
        return Err(Error::CorruptHeader("trailing bytes after conditioning".into()));
    }
    ConditioningBundle::new(streams)
}

pub fn save_bundle(bundle: &ConditioningBundle, path: &Path) -> Result<()> {
    write_bundle(bundle, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn load_bundle(path: &Path) -> Result<ConditioningBundle> {
    read_bundle(std::fs::File::open(path)?)
}
