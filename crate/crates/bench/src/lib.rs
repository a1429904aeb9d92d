//! Fixtures shared by the benches under `benches/`.

use rand::SeedableRng;
use signtok_core::corpus::synth::{generate_synthetic, SyntheticCorpus, SyntheticSpec};
use signtok_core::nncore::layers::{Builder, StackShape, TransformerEncoder};
use signtok_core::nncore::{Component, ParameterSet, Tensor};
use signtok_core::pipeline::ArchConfig;

/// Default-spec synthetic corpus, seed 0.
pub fn corpus(videos: usize) -> SyntheticCorpus {
    generate_synthetic(&SyntheticSpec::default(), videos).expect("default spec is valid")
}

/// One self-attention stack at desk width.
pub fn encoder(layers: usize) -> (ParameterSet<f32>, TransformerEncoder) {
    let arch = ArchConfig::desk();
    let mut params = ParameterSet::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let enc = {
        let mut b = Builder::new(&mut params, &mut rng, "", Component::ContextTransformer);
        TransformerEncoder::new(
            &mut b,
            StackShape {
                layers,
                dim: arch.model_dim,
                heads: arch.heads,
                ff_mult: arch.ff_mult,
                dropout: 0.0,
            },
        )
        .expect("desk shape is valid")
    };
    (params, enc)
}

/// Deterministic `rows × dim` input.
pub fn input(rows: usize, dim: usize) -> Tensor<f32> {
    let data = (0..rows * dim).map(|i| ((i as f32) * 0.37).sin()).collect();
    Tensor::from_vec(rows, dim, data).expect("sized to fit")
}
