//! The masked token transformer in its three structures.
//!
//! ```text
//! tokens --embed+sum--> (+pos) --> [block x depth] --> LN --> head --> L x K x D
//!                                     ^        ^
//!            aligned conditioning ----+        +---- encoder output ([CLS] + frames)
//!            (AdaLN scale/shift/gate)              (cross-attention keys/values)
//! ```
//!
//! Unconditional calls replace every stream by its learnable [NULL] vector
//! (a one-frame sequence) and route it through the same adapters.

pub mod conditioning;
pub mod layers;
pub mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use conditioning::resample_nn_backward;
pub use conditioning::{
    build_conditioning, resample_nn, ConditioningBundle, ConditioningInputs, Stream, StreamRole, Structure,
};
use layers::{silu, silu_backward, Attention, AttentionCache, LayerNorm, LayerNormCache, Linear, Mlp, MlpCache};
pub use params::{Grads, ParamId, ParamStore};

use crate::codegram::{embed_sum_tokens, CodebookSpec, EmbeddingTable, MaskedCodegram, NullEmbedding};
use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Declared conditioning stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub name: String,
    pub role: StreamRole,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub structure: Structure,
    pub spec: CodebookSpec,
    /// Trunk width; must equal `spec.embed_dim`.
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    /// Encoder blocks (seq2seq and hybrid only).
    pub encoder_depth: usize,
    pub mlp_ratio: usize,
    /// Longest token sequence the positional table covers.
    pub max_len: usize,
    /// Longest encoder input (excluding [CLS]).
    pub max_cond_len: usize,
    pub streams: Vec<StreamSpec>,
    /// Width of the auxiliary audio-feature targets; 0 disables the auxiliary head.
    pub aux_dim: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: `L=86, K=4, D=64, hidden=128, depth=4, heads=4`.
    pub fn desk(structure: Structure, streams: Vec<StreamSpec>, aux_dim: usize) -> Self {
        ModelConfig {
            structure,
            spec: CodebookSpec {
                levels: 4,
                vocab_size: 64,
                embed_dim: 128,
                frame_rate: 86.1,
            },
            hidden: 128,
            depth: 4,
            heads: 4,
            encoder_depth: 2,
            mlp_ratio: 4,
            max_len: 86,
            max_cond_len: 64,
            streams,
            aux_dim,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.depth < 1 {
            return Err(Error::invalid("depth must be >= 1"));
        }
        if self.heads < 1 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.spec.embed_dim != self.hidden {
            return Err(Error::shape("embed_dim vs hidden", self.hidden, self.spec.embed_dim));
        }
        if self.mlp_ratio < 1 || self.max_len < 1 {
            return Err(Error::invalid("mlp_ratio and max_len must be >= 1"));
        }
        if self.streams.is_empty() {
            return Err(Error::invalid("at least one conditioning stream is required"));
        }
        let has = |role| self.streams.iter().any(|s| s.role == role);
        if self.structure.has_encoder() {
            if !has(StreamRole::FrameSemantic) {
                return Err(Error::MissingRole(StreamRole::FrameSemantic.label()));
            }
            if self.encoder_depth < 1 || self.max_cond_len < 1 {
                return Err(Error::invalid("encoder_depth and max_cond_len must be >= 1"));
            }
        }
        if self.structure == Structure::Hybrid && !has(StreamRole::AlignmentSensitive) {
            return Err(Error::MissingRole(StreamRole::AlignmentSensitive.label()));
        }
        Ok(())
    }

    /// Config stream indices feeding the aligned (AdaLN) path, in concat order.
    fn aligned_streams(&self) -> Vec<usize> {
        match self.structure {
            Structure::Adaln => (0..self.streams.len()).collect(),
            Structure::Seq2seq => Vec::new(),
            Structure::Hybrid => self.indices_with(StreamRole::AlignmentSensitive),
        }
    }

    fn encoder_streams(&self) -> Vec<usize> {
        match self.structure {
            Structure::Adaln => Vec::new(),
            Structure::Seq2seq => (0..self.streams.len()).collect(),
            Structure::Hybrid => self.indices_with(StreamRole::FrameSemantic),
        }
    }

    fn indices_with(&self, role: StreamRole) -> Vec<usize> {
        (0..self.streams.len())
            .filter(|&i| self.streams[i].role == role)
            .collect()
    }
}

/// `L x K x D` codeword scores.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitsGrid {
    len: usize,
    levels: usize,
    vocab: usize,
    /// `L x (K * D)`
    values: Mat,
}

impl LogitsGrid {
    pub fn new(len: usize, levels: usize, vocab: usize, values: Mat) -> Result<Self> {
        if values.rows() != len || values.cols() != levels * vocab {
            return Err(Error::shape("logits", len * levels * vocab, values.data().len()));
        }
        Ok(LogitsGrid {
            len,
            levels,
            vocab,
            values,
        })
    }

    pub fn zeros(len: usize, levels: usize, vocab: usize) -> Self {
        LogitsGrid {
            len,
            levels,
            vocab,
            values: Mat::zeros(len, levels * vocab),
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
    pub fn vocab(&self) -> usize {
        self.vocab
    }

    #[inline]
    pub fn at(&self, l: usize, k: usize) -> &[f64] {
        &self.values.row(l)[k * self.vocab..(k + 1) * self.vocab]
    }

    #[inline]
    pub fn at_mut(&mut self, l: usize, k: usize) -> &mut [f64] {
        let v = self.vocab;
        &mut self.values.row_mut(l)[k * v..(k + 1) * v]
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Mat {
        &mut self.values
    }

    pub fn same_shape(&self, other: &LogitsGrid) -> bool {
        (self.len, self.levels, self.vocab) == (other.len, other.levels, other.vocab)
    }
}

/// Encoder output split into the pooled [CLS] row and the frame sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub cls: Vec<f64>,
    pub sequence: Mat,
}

#[derive(Clone, Debug)]
struct Block {
    modulation: Option<Linear>,
    ln1: LayerNorm,
    attn: Attention,
    cross: Option<(LayerNorm, Attention)>,
    ln2: LayerNorm,
    mlp: Mlp,
}

struct BlockCache {
    modulation: Option<Mat>,
    ln1: LayerNormCache,
    n1: Mat,
    attn_out: Mat,
    attn: AttentionCache,
    cross: Option<(LayerNormCache, AttentionCache)>,
    ln2: LayerNormCache,
    n2: Mat,
    mlp_out: Mat,
    mlp: MlpCache,
}

/// Column blocks of the modulation output.
const SHIFT1: usize = 0;
const SCALE1: usize = 1;
const GATE1: usize = 2;
const SHIFT2: usize = 3;
const SCALE2: usize = 4;
const GATE2: usize = 5;

impl Block {
    fn new(
        store: &mut ParamStore,
        name: &str,
        hidden: usize,
        heads: usize,
        mlp_ratio: usize,
        modulated: bool,
        cross: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let modulation = modulated.then(|| {
            let lin = Linear::with_std(
                store,
                &format!("{name}.modulation"),
                hidden,
                6 * hidden,
                true,
                0.1 / (hidden as f64).sqrt(),
                rng,
            );
            // Identity modulation at init: scale = 1, shift = 0, gate = 1.
            let b = store.get_mut(lin.b.unwrap()).data_mut();
            for part in [SCALE1, GATE1, SCALE2, GATE2] {
                b[part * hidden..(part + 1) * hidden].fill(1.0);
            }
            lin
        });
        Block {
            modulation,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), hidden, !modulated),
            attn: Attention::new(store, &format!("{name}.attn"), hidden, heads, rng),
            cross: cross.then(|| {
                (
                    LayerNorm::new(store, &format!("{name}.ln_cross"), hidden, true),
                    Attention::new(store, &format!("{name}.cross"), hidden, heads, rng),
                )
            }),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), hidden, !modulated),
            mlp: Mlp::new(store, &format!("{name}.mlp"), hidden, hidden * mlp_ratio, hidden, rng),
        }
    }

    fn forward(&self, store: &ParamStore, x: &Mat, silu_c: Option<&Mat>, ctx: Option<&Mat>) -> (Mat, BlockCache) {
        let h = x.cols();
        let modulation = self
            .modulation
            .as_ref()
            .map(|m| m.forward(store, silu_c.expect("modulated block needs conditioning")));

        let (n1, ln1) = self.ln1.forward(store, x);
        let m1 = match &modulation {
            Some(m) => modulate(&n1, m, h, SHIFT1, SCALE1),
            None => n1.clone(),
        };
        let (attn_out, attn) = self.attn.forward(store, &m1, &m1);
        let mut x1 = x.clone();
        residual_add(&mut x1, &attn_out, modulation.as_ref().map(|m| (m, GATE1 * h)));

        let (x2, cross) = match &self.cross {
            Some((ln, xattn)) => {
                let (nc, lnc) = ln.forward(store, &x1);
                let (co, cac) = xattn.forward(store, &nc, ctx.expect("cross block needs context"));
                let mut x2 = x1;
                x2.add_assign(&co);
                (x2, Some((lnc, cac)))
            }
            None => (x1, None),
        };

        let (n2, ln2) = self.ln2.forward(store, &x2);
        let m2 = match &modulation {
            Some(m) => modulate(&n2, m, h, SHIFT2, SCALE2),
            None => n2.clone(),
        };
        let (mlp_out, mlp) = self.mlp.forward(store, &m2);
        let mut x3 = x2;
        residual_add(&mut x3, &mlp_out, modulation.as_ref().map(|m| (m, GATE2 * h)));

        (
            x3,
            BlockCache {
                modulation,
                ln1,
                n1,
                attn_out,
                attn,
                cross,
                ln2,
                n2,
                mlp_out,
                mlp,
            },
        )
    }

    /// Returns `(dx, d silu(c), d ctx)`.
    fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        cache: &BlockCache,
        silu_c: Option<&Mat>,
        dy: &Mat,
    ) -> (Mat, Option<Mat>, Option<Mat>) {
        let h = dy.cols();
        let rows = dy.rows();
        let mut dmod = cache.modulation.as_ref().map(|_| Mat::zeros(rows, 6 * h));

        // x3 = x2 + gate2 * mlp(modulate(ln2(x2)))
        let dmlp_out = gate_backward(dy, &cache.mlp_out, cache.modulation.as_ref(), dmod.as_mut(), GATE2 * h);
        let dm2 = self.mlp.backward(store, grads, &cache.mlp, &dmlp_out);
        let dn2 = modulate_backward(
            &dm2,
            &cache.n2,
            cache.modulation.as_ref(),
            dmod.as_mut(),
            h,
            SHIFT2,
            SCALE2,
        );
        let mut dx2 = dy.clone();
        dx2.add_assign(&self.ln2.backward(store, grads, &cache.ln2, &dn2));

        let (mut dx1, dctx) = match (&self.cross, &cache.cross) {
            (Some((ln, xattn)), Some((lnc, cac))) => {
                let (dnc, dctx) = xattn.backward(store, grads, cac, &dx2);
                let mut dx1 = dx2;
                dx1.add_assign(&ln.backward(store, grads, lnc, &dnc));
                (dx1, Some(dctx))
            }
            _ => (dx2, None),
        };

        let dattn_out = gate_backward(
            &dx1,
            &cache.attn_out,
            cache.modulation.as_ref(),
            dmod.as_mut(),
            GATE1 * h,
        );
        let (dq_in, dkv_in) = self.attn.backward(store, grads, &cache.attn, &dattn_out);
        let mut dm1 = dq_in;
        dm1.add_assign(&dkv_in);
        let dn1 = modulate_backward(
            &dm1,
            &cache.n1,
            cache.modulation.as_ref(),
            dmod.as_mut(),
            h,
            SHIFT1,
            SCALE1,
        );
        dx1.add_assign(&self.ln1.backward(store, grads, &cache.ln1, &dn1));

        let dsilu = match (&self.modulation, dmod) {
            (Some(lin), Some(dmod)) => Some(lin.backward(store, grads, silu_c.expect("modulated block"), &dmod)),
            _ => None,
        };
        (dx1, dsilu, dctx)
    }
}

fn modulate(n: &Mat, m: &Mat, h: usize, shift: usize, scale: usize) -> Mat {
    let mut out = n.clone();
    for i in 0..n.rows() {
        let mr = m.row(i);
        let (sh, sc) = (&mr[shift * h..(shift + 1) * h], &mr[scale * h..(scale + 1) * h]);
        for ((o, s), b) in out.row_mut(i).iter_mut().zip(sc).zip(sh) {
            *o = *o * s + b;
        }
    }
    out
}

fn modulate_backward(
    dm: &Mat,
    n: &Mat,
    modulation: Option<&Mat>,
    dmod: Option<&mut Mat>,
    h: usize,
    shift: usize,
    scale: usize,
) -> Mat {
    let (Some(m), Some(dmod)) = (modulation, dmod) else {
        return dm.clone();
    };
    let mut dn = dm.clone();
    for i in 0..dm.rows() {
        let sc = &m.row(i)[scale * h..(scale + 1) * h];
        let dmr = dm.row(i);
        let nr = n.row(i);
        {
            let drow = dmod.row_mut(i);
            for c in 0..h {
                drow[shift * h + c] += dmr[c];
                drow[scale * h + c] += dmr[c] * nr[c];
            }
        }
        for (d, s) in dn.row_mut(i).iter_mut().zip(sc) {
            *d *= s;
        }
    }
    dn
}

fn residual_add(x: &mut Mat, y: &Mat, gate: Option<(&Mat, usize)>) {
    match gate {
        None => x.add_assign(y),
        Some((m, off)) => {
            let h = y.cols();
            for i in 0..x.rows() {
                let g = &m.row(i)[off..off + h];
                let yr = y.row(i);
                for ((xv, yv), gv) in x.row_mut(i).iter_mut().zip(yr).zip(g) {
                    *xv += gv * yv;
                }
            }
        }
    }
}

fn gate_backward(dy: &Mat, out: &Mat, modulation: Option<&Mat>, dmod: Option<&mut Mat>, off: usize) -> Mat {
    let (Some(m), Some(dmod)) = (modulation, dmod) else {
        return dy.clone();
    };
    let h = dy.cols();
    let mut d = dy.clone();
    for i in 0..dy.rows() {
        let g = &m.row(i)[off..off + h];
        let (dyr, or) = (dy.row(i), out.row(i));
        {
            let dr = &mut dmod.row_mut(i)[off..off + h];
            for c in 0..h {
                dr[c] += dyr[c] * or[c];
            }
        }
        for (dv, gv) in d.row_mut(i).iter_mut().zip(g) {
            *dv *= gv;
        }
    }
    d
}

#[derive(Clone, Debug)]
struct EncoderLayout {
    input: Mlp,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln: LayerNorm,
}

#[derive(Clone, Debug)]
struct AuxLayout {
    proj: Linear,
    logit_scale: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    tables: Vec<ParamId>,
    mask_emb: ParamId,
    null: Vec<ParamId>,
    tok_pos: ParamId,
    cond: Option<Mlp>,
    encoder: Option<EncoderLayout>,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    head: Linear,
    aux: Option<AuxLayout>,
}

/// Initial contrastive logit scale, `1 / 0.07`, stored as a log.
pub const INIT_LOGIT_SCALE: f64 = 2.659_260_036_932_778; // ln(1/0.07)
/// Upper clamp on the contrastive logit scale (`ln 100`).
pub const MAX_LOGIT_SCALE: f64 = 4.605_170_185_988_092;

/// Trainable masked token model.
#[derive(Clone, Debug)]
pub struct MaskModel {
    config: ModelConfig,
    store: ParamStore,
    layout: Layout,
}

pub struct EncoderCache {
    frames: usize,
    raw: Mat,
    input: MlpCache,
    blocks: Vec<BlockCache>,
    ln: LayerNormCache,
}

/// Activations retained for [`MaskModel::backward`].
pub struct ForwardCache {
    tokens: Vec<u32>,
    unconditional: bool,
    cond: Option<(MlpCache, Mat, Mat)>,
    encoder: Option<EncoderCache>,
    enc_out: Option<Mat>,
    blocks: Vec<BlockCache>,
    final_ln: LayerNormCache,
    final_out: Mat,
}

pub struct ForwardOutput {
    pub logits: LogitsGrid,
    pub encoder: Option<EncoderOutput>,
    pub cache: Option<ForwardCache>,
}

/// Loss adjoints handed to [`MaskModel::backward`].
pub struct Adjoints<'a> {
    pub logits: &'a Mat,
    pub cls: Option<&'a [f64]>,
    pub sequence: Option<&'a Mat>,
}

impl MaskModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let h = config.hidden;
        let spec = config.spec;

        let nulls: Vec<(String, usize)> = config.streams.iter().map(|s| (s.name.clone(), s.width)).collect();
        let table = EmbeddingTable::init(spec, &nulls, &mut rng);
        let tables = table
            .levels
            .into_iter()
            .enumerate()
            .map(|(k, t)| store.add(format!("embed.level{k}"), t))
            .collect();
        let mask_emb = store.add("embed.mask", table.mask);
        let null = table
            .null
            .into_iter()
            .map(|n| {
                store.add(
                    format!("embed.null.{}", n.stream),
                    Mat::from_vec(1, n.vector.len(), n.vector),
                )
            })
            .collect();
        let bound = 1.0 / (h as f64).sqrt();
        let tok_pos = store.add_uniform("embed.pos", config.max_len, h, bound, &mut rng);

        let width_of = |idx: &[usize]| idx.iter().map(|&i| config.streams[i].width).sum::<usize>();
        let cond = config
            .structure
            .has_adaln()
            .then(|| Mlp::new(&mut store, "cond", width_of(&config.aligned_streams()), h, h, &mut rng));
        let encoder = config.structure.has_encoder().then(|| {
            let input = Mlp::new(
                &mut store,
                "enc.in",
                width_of(&config.encoder_streams()),
                h,
                h,
                &mut rng,
            );
            let cls = store.add_uniform("enc.cls", 1, h, bound, &mut rng);
            let pos = store.add_uniform("enc.pos", config.max_cond_len + 1, h, bound, &mut rng);
            let blocks = (0..config.encoder_depth)
                .map(|i| {
                    Block::new(
                        &mut store,
                        &format!("enc.block{i}"),
                        h,
                        config.heads,
                        config.mlp_ratio,
                        false,
                        false,
                        &mut rng,
                    )
                })
                .collect();
            let ln = LayerNorm::new(&mut store, "enc.ln", h, true);
            EncoderLayout {
                input,
                cls,
                pos,
                blocks,
                ln,
            }
        });
        let (modulated, cross) = match config.structure {
            Structure::Adaln => (true, false),
            Structure::Seq2seq => (false, true),
            Structure::Hybrid => (true, true),
        };
        let blocks = (0..config.depth)
            .map(|i| {
                Block::new(
                    &mut store,
                    &format!("dec.block{i}"),
                    h,
                    config.heads,
                    config.mlp_ratio,
                    modulated,
                    cross,
                    &mut rng,
                )
            })
            .collect();
        let final_ln = LayerNorm::new(&mut store, "final_ln", h, true);
        let head = Linear::new(&mut store, "head", h, spec.levels * spec.vocab_size, true, &mut rng);
        let aux = (config.structure.has_encoder() && config.aux_dim > 0).then(|| AuxLayout {
            proj: Linear::new(&mut store, "aux.proj", config.aux_dim, h, true, &mut rng),
            logit_scale: store.add("aux.logit_scale", Mat::filled(1, 1, INIT_LOGIT_SCALE)),
        });

        Ok(MaskModel {
            config,
            store,
            layout: Layout {
                tables,
                mask_emb,
                null,
                tok_pos,
                cond,
                encoder,
                blocks,
                final_ln,
                head,
                aux,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn has_aux(&self) -> bool {
        self.layout.aux.is_some()
    }

    /// Copy of the embedding tables in their standalone form.
    pub fn embedding_table(&self) -> EmbeddingTable {
        EmbeddingTable {
            spec: self.config.spec,
            levels: self
                .layout
                .tables
                .iter()
                .map(|&id| self.store.get(id).clone())
                .collect(),
            mask: self.store.get(self.layout.mask_emb).clone(),
            null: self
                .config
                .streams
                .iter()
                .zip(&self.layout.null)
                .map(|(s, &id)| NullEmbedding {
                    stream: s.name.clone(),
                    vector: self.store.get(id).data().to_vec(),
                })
                .collect(),
        }
    }

    /// Names of the conditioning front-end parameters ([NULL] vectors and input adapters).
    pub fn conditioning_param_names(&self) -> Vec<String> {
        self.store
            .iter()
            .map(|p| p.name.clone())
            .filter(|n| n.starts_with("cond.") || n.starts_with("enc.in.") || n.starts_with("embed.null."))
            .collect()
    }

    /// The bundle of [NULL] vectors that defines the unconditional mode.
    pub fn null_bundle(&self) -> ConditioningBundle {
        ConditioningBundle {
            streams: self
                .config
                .streams
                .iter()
                .zip(&self.layout.null)
                .map(|(s, &id)| Stream {
                    name: s.name.clone(),
                    role: s.role,
                    data: self.store.get(id).clone(),
                })
                .collect(),
        }
    }

    fn check_bundle(&self, bundle: &ConditioningBundle) -> Result<()> {
        if bundle.streams.len() != self.config.streams.len() {
            return Err(Error::shape(
                "conditioning streams",
                self.config.streams.len(),
                bundle.streams.len(),
            ));
        }
        for (s, spec) in bundle.streams.iter().zip(&self.config.streams) {
            if s.name != spec.name {
                return Err(Error::UnknownStream(s.name.clone()));
            }
            if s.data.cols() != spec.width {
                return Err(Error::shape("conditioning stream width", spec.width, s.data.cols()));
            }
        }
        bundle.validate()
    }

    /// Runs the model. `cond = None` selects the unconditional ([NULL]) mode.
    pub fn forward(
        &self,
        input: &MaskedCodegram,
        cond: Option<&ConditioningBundle>,
        keep_cache: bool,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let store = &self.store;
        let len = input.len();
        if input.spec().levels != cfg.spec.levels || input.spec().vocab_size != cfg.spec.vocab_size {
            return Err(Error::shape("codegram levels", cfg.spec.levels, input.spec().levels));
        }
        if len > cfg.max_len {
            return Err(Error::shape("sequence length (max)", cfg.max_len, len));
        }
        let null_bundle;
        let bundle = match cond {
            Some(b) => {
                self.check_bundle(b)?;
                b
            }
            None => {
                null_bundle = self.null_bundle();
                &null_bundle
            }
        };
        let inputs = build_conditioning(bundle, cfg.structure, len)?;

        let tables: Vec<&Mat> = self.layout.tables.iter().map(|&id| store.get(id)).collect();
        let mut x = embed_sum_tokens(
            input.tokens(),
            cfg.spec.levels,
            &tables,
            store.get(self.layout.mask_emb),
        );
        let pos = store.get(self.layout.tok_pos);
        for l in 0..len {
            for (v, p) in x.row_mut(l).iter_mut().zip(pos.row(l)) {
                *v += p;
            }
        }

        let cond_path = match (&self.layout.cond, inputs.aligned) {
            (Some(mlp), Some(raw)) => {
                let (c, mc) = mlp.forward(store, &raw);
                let sc = silu(&c);
                Some((mc, c, sc))
            }
            _ => None,
        };

        let (enc_cache, enc_out) = match (&self.layout.encoder, inputs.encoder) {
            (Some(enc), Some(raw)) => {
                let frames = raw.rows();
                if frames > cfg.max_cond_len {
                    return Err(Error::shape("conditioning length (max)", cfg.max_cond_len, frames));
                }
                let (e, input_cache) = enc.input.forward(store, &raw);
                let mut ex = e.prepend_row(store.get(enc.cls).data());
                let epos = store.get(enc.pos);
                for i in 0..frames + 1 {
                    for (v, p) in ex.row_mut(i).iter_mut().zip(epos.row(i)) {
                        *v += p;
                    }
                }
                let mut caches = Vec::with_capacity(enc.blocks.len());
                for (i, b) in enc.blocks.iter().enumerate() {
                    let (y, c) = b.forward(store, &ex, None, None);
                    if !y.is_finite() {
                        return Err(Error::NonFinite(format!("encoder block {i}")));
                    }
                    ex = y;
                    caches.push(c);
                }
                let (out, ln) = enc.ln.forward(store, &ex);
                (
                    Some(EncoderCache {
                        frames,
                        raw,
                        input: input_cache,
                        blocks: caches,
                        ln,
                    }),
                    Some(out),
                )
            }
            _ => (None, None),
        };

        let silu_c = cond_path.as_ref().map(|(_, _, sc)| sc);
        let mut block_caches = Vec::with_capacity(self.layout.blocks.len());
        for (i, b) in self.layout.blocks.iter().enumerate() {
            let (y, c) = b.forward(store, &x, silu_c, enc_out.as_ref());
            if !y.is_finite() {
                return Err(Error::NonFinite(format!("decoder block {i}")));
            }
            x = y;
            block_caches.push(c);
        }
        let (final_out, final_ln) = self.layout.final_ln.forward(store, &x);
        let logits = self.layout.head.forward(store, &final_out);
        if !logits.is_finite() {
            return Err(Error::NonFinite("head".into()));
        }
        let logits = LogitsGrid::new(len, cfg.spec.levels, cfg.spec.vocab_size, logits)?;
        let encoder = enc_out.as_ref().map(|e| EncoderOutput {
            cls: e.row(0).to_vec(),
            sequence: e.rows_slice(1, e.rows()),
        });
        let cache = keep_cache.then(|| ForwardCache {
            tokens: input.tokens().to_vec(),
            unconditional: cond.is_none(),
            cond: cond_path,
            encoder: enc_cache,
            enc_out,
            blocks: block_caches,
            final_ln,
            final_out,
        });
        Ok(ForwardOutput { logits, encoder, cache })
    }

    /// Reverse pass; accumulates into `grads`.
    pub fn backward(&self, cache: Option<&ForwardCache>, adj: &Adjoints<'_>, grads: &mut Grads) -> Result<()> {
        let cache = cache.ok_or(Error::NoCache)?;
        let cfg = &self.config;
        let store = &self.store;
        let lay = &self.layout;

        let dfinal = lay.head.backward(store, grads, &cache.final_out, adj.logits);
        let mut dx = lay.final_ln.backward(store, grads, &cache.final_ln, &dfinal);

        let mut dsilu = cache.cond.as_ref().map(|(_, c, _)| Mat::zeros(c.rows(), c.cols()));
        let mut denc = cache.enc_out.as_ref().map(|e| Mat::zeros(e.rows(), e.cols()));
        if let (Some(d), Some(cls)) = (denc.as_mut(), adj.cls) {
            for (a, b) in d.row_mut(0).iter_mut().zip(cls) {
                *a += b;
            }
        }
        if let (Some(d), Some(seq)) = (denc.as_mut(), adj.sequence) {
            for i in 0..seq.rows() {
                for (a, b) in d.row_mut(i + 1).iter_mut().zip(seq.row(i)) {
                    *a += b;
                }
            }
        }

        let silu_c = cache.cond.as_ref().map(|(_, _, sc)| sc);
        for (b, bc) in lay.blocks.iter().zip(&cache.blocks).rev() {
            let (dxi, ds, dctx) = b.backward(store, grads, bc, silu_c, &dx);
            dx = dxi;
            if let (Some(acc), Some(ds)) = (dsilu.as_mut(), ds) {
                acc.add_assign(&ds);
            }
            if let (Some(acc), Some(dc)) = (denc.as_mut(), dctx) {
                acc.add_assign(&dc);
            }
        }

        // Token and positional embeddings.
        let levels = cfg.spec.levels;
        let vocab = cfg.spec.vocab_size as u32;
        for l in 0..dx.rows() {
            let dr = dx.row(l);
            {
                let gp = grads.get_mut(lay.tok_pos).row_mut(l);
                for (g, d) in gp.iter_mut().zip(dr) {
                    *g += d;
                }
            }
            for k in 0..levels {
                let t = cache.tokens[l * levels + k];
                let g = if t >= vocab {
                    grads.get_mut(lay.mask_emb).row_mut(k)
                } else {
                    grads.get_mut(lay.tables[k]).row_mut(t as usize)
                };
                for (gv, d) in g.iter_mut().zip(dr) {
                    *gv += d;
                }
            }
        }

        if let (Some(mlp), Some((mc, c, _)), Some(dsilu)) = (&lay.cond, &cache.cond, dsilu) {
            let dc = silu_backward(c, &dsilu);
            let draw = mlp.backward(store, grads, mc, &dc);
            if cache.unconditional {
                self.null_backward(&cfg.aligned_streams(), &draw, grads);
            }
        }

        if let (Some(enc), Some(ec), Some(mut d)) = (&lay.encoder, &cache.encoder, denc) {
            d = enc.ln.backward(store, grads, &ec.ln, &d);
            for (b, bc) in enc.blocks.iter().zip(&ec.blocks).rev() {
                let (di, _, _) = b.backward(store, grads, bc, None, &d);
                d = di;
            }
            {
                let gp = grads.get_mut(enc.pos);
                for i in 0..ec.frames + 1 {
                    for (g, v) in gp.row_mut(i).iter_mut().zip(d.row(i)) {
                        *g += v;
                    }
                }
            }
            {
                let gc = grads.get_mut(enc.cls).data_mut();
                for (g, v) in gc.iter_mut().zip(d.row(0)) {
                    *g += v;
                }
            }
            let dframes = d.rows_slice(1, d.rows());
            let draw = enc.input.backward(store, grads, &ec.input, &dframes);
            debug_assert_eq!(draw.rows(), ec.raw.rows());
            if cache.unconditional {
                self.null_backward(&cfg.encoder_streams(), &draw, grads);
            }
        }
        Ok(())
    }

    /// Routes raw-conditioning adjoints back onto the one-frame [NULL] vectors.
    fn null_backward(&self, streams: &[usize], draw: &Mat, grads: &mut Grads) {
        let mut at = 0;
        for &i in streams {
            let w = self.config.streams[i].width;
            let part = draw.cols_slice(at, w);
            let d = resample_nn_backward(&part, 1);
            let g = grads.get_mut(self.layout.null[i]).data_mut();
            for (a, b) in g.iter_mut().zip(d.data()) {
                *a += b;
            }
            at += w;
        }
    }

    /// Projects auxiliary audio features to the trunk width.
    pub fn project_targets(&self, features: &Mat) -> Result<Mat> {
        let aux = self
            .layout
            .aux
            .as_ref()
            .ok_or_else(|| Error::invalid("model has no auxiliary head"))?;
        if features.cols() != self.config.aux_dim {
            return Err(Error::shape(
                "auxiliary feature width",
                self.config.aux_dim,
                features.cols(),
            ));
        }
        Ok(aux.proj.forward(&self.store, features))
    }

    pub fn project_targets_backward(&self, features: &Mat, d_proj: &Mat, grads: &mut Grads) -> Result<()> {
        let aux = self
            .layout
            .aux
            .as_ref()
            .ok_or_else(|| Error::invalid("model has no auxiliary head"))?;
        aux.proj.accumulate(grads, features, d_proj);
        Ok(())
    }

    /// Log of the contrastive logit scale (`1 / temperature`), clamped.
    pub fn log_logit_scale(&self) -> Option<f64> {
        self.layout
            .aux
            .as_ref()
            .map(|a| self.store.get(a.logit_scale).data()[0].clamp(0.0, MAX_LOGIT_SCALE))
    }

    pub fn logit_scale_id(&self) -> Option<ParamId> {
        self.layout.aux.as_ref().map(|a| a.logit_scale)
    }
}
