//! Objective metrics: Fréchet distance between embedding sets, cosine
//! semantic scores, a cepstral front end, and the novelty-curve score.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::model::resample_nn;
use crate::tensor::{dot, norm, Mat};

/// Named set of embedding vectors, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub front_end: String,
    pub vectors: Mat,
}

impl EmbeddingSet {
    pub fn new(front_end: impl Into<String>, vectors: Mat) -> Result<Self> {
        if !vectors.is_finite() {
            return Err(Error::NonFinite("embedding set".into()));
        }
        Ok(EmbeddingSet {
            front_end: front_end.into(),
            vectors,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

const EMBED_MAGIC: &[u8; 4] = b"CGEM";
const EMBED_VERSION: u32 = 1;

/// Header (magic, version, n, d, front-end name) then row-major f32 data.
pub fn write_embeddings<W: Write>(set: &EmbeddingSet, mut w: W) -> Result<()> {
    let name = set.front_end.as_bytes();
    let mut buf = Vec::with_capacity(32 + name.len() + 4 * set.vectors.data().len());
    buf.extend_from_slice(EMBED_MAGIC);
    buf.extend_from_slice(&EMBED_VERSION.to_le_bytes());
    buf.extend_from_slice(&(set.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(set.dim() as u64).to_le_bytes());
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name);
    for &v in set.vectors.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_embeddings<R: Read>(mut r: R) -> Result<EmbeddingSet> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        let end = at
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or(Error::Truncated {
                expected: at.saturating_add(n),
                found: bytes.len(),
            })?;
        let s = &bytes[*at..end];
        *at = end;
        Ok(s)
    };
    let mut at = 0;
    if take(&mut at, 4)? != EMBED_MAGIC {
        return Err(Error::CorruptHeader("bad embedding magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
    if version != EMBED_VERSION {
        return Err(Error::CorruptHeader(format!("unsupported embedding version {version}")));
    }
    let n = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize;
    let name_len = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let name = std::str::from_utf8(take(&mut at, name_len)?)
        .map_err(|_| Error::CorruptHeader("front-end name is not utf-8".into()))?
        .to_string();
    let count = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| Error::CorruptHeader("absurd embedding shape".into()))?;
    let data = take(&mut at, count)?
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    if at != bytes.len() {
        return Err(Error::CorruptHeader("trailing bytes after embeddings".into()));
    }
    EmbeddingSet::new(name, Mat::from_vec(n, d, data))
}

pub fn save_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_embeddings(set, std::io::BufWriter::new(f))
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingSet> {
    read_embeddings(std::fs::File::open(path)?)
}

/// Mean and covariance of an embedding set.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub cov: Mat,
}

fn to_na(m: &Mat) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn sym_eigen(m: DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let sym = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym)
}

impl GaussianStats {
    pub fn new(mean: Vec<f64>, cov: Mat) -> Result<Self> {
        let s = GaussianStats { mean, cov };
        s.validate()?;
        Ok(s)
    }

    /// Sample mean and unbiased covariance. Sets with fewer than `d + 1`
    /// rows get `1e-6 * trace / d` added to the diagonal.
    pub fn from_embeddings(set: &EmbeddingSet) -> Result<Self> {
        let (n, d) = (set.len(), set.dim());
        if n == 0 || d == 0 {
            return Err(Error::invalid("embedding set is empty"));
        }
        let x = &set.vectors;
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut centered = x.clone();
        for i in 0..n {
            for (v, m) in centered.row_mut(i).iter_mut().zip(&mean) {
                *v -= m;
            }
        }
        let mut cov = crate::tensor::matmul_tn(&centered, &centered);
        cov.scale(1.0 / (n.max(2) - 1) as f64);
        for i in 0..d {
            for j in 0..i {
                let v = 0.5 * (cov.get(i, j) + cov.get(j, i));
                cov.set(i, j, v);
                cov.set(j, i, v);
            }
        }
        if n < d + 1 {
            let tr: f64 = (0..d).map(|i| cov.get(i, i)).sum();
            let eps = 1e-6 * tr / d as f64;
            for i in 0..d {
                cov.set(i, i, cov.get(i, i) + eps);
            }
        }
        GaussianStats::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.mean.len();
        if self.cov.rows() != d || self.cov.cols() != d {
            return Err(Error::shape("covariance size", d, self.cov.rows()));
        }
        if !self.cov.is_finite() || self.mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gaussian statistics".into()));
        }
        for i in 0..d {
            for j in 0..i {
                if (self.cov.get(i, j) - self.cov.get(j, i)).abs() > 1e-10 {
                    return Err(Error::invalid("covariance is not symmetric"));
                }
            }
        }
        if d > 0 {
            let eig = sym_eigen(to_na(&self.cov));
            if eig.eigenvalues.iter().any(|&l| l < -1e-10) {
                return Err(Error::invalid("covariance is not positive semi-definite"));
            }
        }
        Ok(())
    }
}

fn psd_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = sym_eigen(m);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, clamped at 0.
///
/// The trace of the product root is taken from the eigenvalues of the
/// symmetric matrix `S_a^(1/2) S_b S_a^(1/2)`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("gaussian dimension", a.dim(), b.dim()));
    }
    a.validate()?;
    b.validate()?;
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let (sa, sb) = (to_na(&a.cov), to_na(&b.cov));
    let root_a = psd_sqrt(sa.clone());
    let inner = sym_eigen(&root_a * &sb * &root_a);
    let cross: f64 = inner.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let fd = mean_term + sa.trace() + sb.trace() - 2.0 * cross;
    Ok(fd.max(0.0))
}

/// Fréchet distance between the Gaussian fits of two embedding sets.
pub fn frechet_distance_sets(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    frechet_distance(&GaussianStats::from_embeddings(a)?, &GaussianStats::from_embeddings(b)?)
}

/// Cosine similarity of two non-zero vectors.
pub fn cosine_semantic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("embedding width", a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine of a zero vector"));
    }
    let ua: Vec<f64> = a.iter().map(|v| v / na).collect();
    let ub: Vec<f64> = b.iter().map(|v| v / nb).collect();
    Ok(dot(&ua, &ub).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MfccConfig {
    pub sample_rate: f64,
    pub window: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub n_coeffs: usize,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            sample_rate: 44_100.0,
            window: 2048,
            hop: 512,
            n_mels: 128,
            n_coeffs: 64,
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Frames of `window` samples every `hop` samples, without padding.
pub fn frame_count(len: usize, window: usize, hop: usize) -> Result<usize> {
    if window == 0 || hop == 0 {
        return Err(Error::invalid("window and hop must be >= 1"));
    }
    if len < window {
        return Err(Error::invalid(format!(
            "signal of {len} samples is shorter than one window of {window}"
        )));
    }
    Ok((len - window) / hop + 1)
}

/// Triangular mel filters over the `window / 2 + 1` spectrum bins.
pub fn mel_filterbank(cfg: &MfccConfig) -> Mat {
    let bins = cfg.window / 2 + 1;
    let top = hz_to_mel(cfg.sample_rate / 2.0);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let mut fb = Mat::zeros(cfg.n_mels, bins);
    for m in 0..cfg.n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * cfg.sample_rate / cfg.window as f64;
            let w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb.set(m, k, w);
        }
    }
    fb
}

/// Orthonormal DCT-II, first `n_out` coefficients.
pub fn dct2(x: &[f64], n_out: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..n_out)
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, v)| v * (std::f64::consts::PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n)).cos())
                .sum();
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            s * scale
        })
        .collect()
}

/// Hann-windowed power spectrum, mel filter bank, log, DCT-II.
pub fn mfcc_like(signal: &[f64], cfg: &MfccConfig) -> Result<EmbeddingSet> {
    if cfg.n_coeffs > cfg.n_mels || cfg.n_mels == 0 {
        return Err(Error::invalid("need 1 <= n_coeffs <= n_mels"));
    }
    let frames = frame_count(signal.len(), cfg.window, cfg.hop)?;
    if signal.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("audio signal".into()));
    }
    let fb = mel_filterbank(cfg);
    let hann: Vec<f64> = (0..cfg.window)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / cfg.window as f64).cos())
        .collect();
    let fft = FftPlanner::new().plan_fft_forward(cfg.window);
    let bins = cfg.window / 2 + 1;
    let mut out = Mat::zeros(frames, cfg.n_coeffs);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.window];
    for f in 0..frames {
        let start = f * cfg.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(signal[start + i] * hann[i], 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..bins].iter().map(|c| c.norm_sqr()).collect();
        let logmel: Vec<f64> = (0..cfg.n_mels).map(|m| (dot(fb.row(m), &power) + 1e-10).ln()).collect();
        out.row_mut(f).copy_from_slice(&dct2(&logmel, cfg.n_coeffs));
    }
    EmbeddingSet::new("mfcc-like", out)
}

/// Checkerboard kernel with a Gaussian taper; `size` must be even.
pub fn checkerboard_kernel(size: usize) -> Result<Mat> {
    if size < 2 || !size.is_multiple_of(2) {
        return Err(Error::invalid("kernel size must be an even number >= 2"));
    }
    let half = size as f64 / 2.0;
    let sigma = half / 2.0;
    let mut k = Mat::zeros(size, size);
    for a in 0..size {
        for b in 0..size {
            let (x, y) = (a as f64 - half + 0.5, b as f64 - half + 0.5);
            let sign = if (x < 0.0) == (y < 0.0) { 1.0 } else { -1.0 };
            k.set(a, b, sign * (-(x * x + y * y) / (2.0 * sigma * sigma)).exp());
        }
    }
    Ok(k)
}

/// Cosine self-similarity of the rows; zero rows have zero similarity.
pub fn self_similarity(seq: &Mat) -> Mat {
    let n = seq.rows();
    let units: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let r = seq.row(i);
            let nr = norm(r);
            if nr == 0.0 {
                vec![0.0; r.len()]
            } else {
                r.iter().map(|v| v / nr).collect()
            }
        })
        .collect();
    let mut s = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            s.set(i, j, dot(&units[i], &units[j]));
        }
    }
    s
}

/// Kernel correlated along the main diagonal, zero-padded at the edges.
pub fn novelty_curve(seq: &Mat, kernel_size: usize) -> Result<Vec<f64>> {
    let kernel = checkerboard_kernel(kernel_size)?;
    let n = seq.rows();
    if n < kernel_size {
        return Err(Error::invalid(format!(
            "sequence of {n} frames is shorter than the kernel ({kernel_size})"
        )));
    }
    let s = self_similarity(seq);
    let half = kernel_size / 2;
    Ok((0..n)
        .map(|i| {
            let mut acc = 0.0;
            for a in 0..kernel_size {
                let Some(r) = (i + a).checked_sub(half).filter(|&r| r < n) else {
                    continue;
                };
                for b in 0..kernel_size {
                    if let Some(c) = (i + b).checked_sub(half).filter(|&c| c < n) {
                        acc += kernel.get(a, b) * s.get(r, c);
                    }
                }
            }
            acc
        })
        .collect())
}

/// Pearson correlation; `None` when either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::shape("series length", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::invalid("empty series"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(None);
    }
    Ok(Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)))
}

pub const DEFAULT_NOVELTY_KERNEL: usize = 16;

/// Pearson correlation between the novelty curves of two sequences, the
/// shorter curve stretched to the longer one's length. A flat curve
/// scores 0.
pub fn novelty_score(generated: &Mat, reference: &Mat, kernel_size: usize) -> Result<f64> {
    let g = novelty_curve(generated, kernel_size)?;
    let r = novelty_curve(reference, kernel_size)?;
    let stretch = |c: Vec<f64>, n: usize| -> Result<Vec<f64>> {
        if c.len() == n {
            return Ok(c);
        }
        Ok(resample_nn(&Mat::from_vec(c.len(), 1, c), n)?.into_vec())
    };
    let n = g.len().max(r.len());
    let (g, r) = (stretch(g, n)?, stretch(r, n)?);
    match pearson(&g, &r)? {
        Some(p) => Ok(p),
        None => {
            log::warn!("novelty curve has zero variance; score defined as 0");
            Ok(0.0)
        }
    }
}

/// Ordered metric name/value pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub entries: Vec<(String, f64)>,
}

impl MetricReport {
    pub fn push(&mut self, name: impl Into<String>, value: f64) {
        self.entries.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|e| e.1)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (n, v) in &self.entries {
            let _ = writeln!(s, "{n},{v:.12e}");
        }
        s
    }

    pub fn to_table(&self) -> String {
        let w = self.entries.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
        let mut s = format!("{:<w$}  {:>14}\n", "metric", "value");
        let _ = writeln!(s, "{}  {}", "-".repeat(w), "-".repeat(14));
        for (n, v) in &self.entries {
            let _ = writeln!(s, "{n:<w$}  {v:>14.6}");
        }
        s
    }
}

#[cfg(test)]
mod tests;
