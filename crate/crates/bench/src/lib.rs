//! Fixtures shared by the benchmarks.

use codegram_core::codegram::{apply_mask, MaskTensor, MaskedCodegram};
use codegram_core::metrics::EmbeddingSet;
use codegram_core::model::{ConditioningBundle, MaskModel, ModelConfig, Structure};
use codegram_core::synth::{Generator, SyntheticTaskSpec};
use codegram_core::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const HIDDEN: usize = 32;

pub fn task() -> SyntheticTaskSpec {
    SyntheticTaskSpec::default()
}

pub fn model(structure: Structure) -> MaskModel {
    let spec = task();
    MaskModel::new(ModelConfig {
        structure,
        spec: spec.codebook(HIDDEN).unwrap(),
        hidden: HIDDEN,
        depth: 2,
        heads: 2,
        encoder_depth: 1,
        mlp_ratio: 2,
        max_len: spec.len,
        max_cond_len: spec.clip_frames,
        streams: spec.stream_specs(),
        aux_dim: spec.aux_dim,
        seed: 1,
    })
    .unwrap()
}

/// A bundle and a half-masked target from the default synthetic task.
pub fn example() -> (ConditioningBundle, MaskedCodegram) {
    let g = Generator::new(task(), HIDDEN).unwrap();
    let ex = g.example(0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (l, k) = (ex.codegram.len(), ex.codegram.levels());
    let mask = MaskTensor::new(l, k, (0..l * k).map(|_| rng.random_bool(0.5)).collect()).unwrap();
    (ex.bundle.clone(), apply_mask(&ex.codegram, &mask).unwrap())
}

pub fn gaussian_set(n: usize, d: usize, seed: u64) -> EmbeddingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    EmbeddingSet::new("bench", Mat::from_vec(n, d, data)).unwrap()
}
