//! Shared fixtures for the benchmarks.

use ntex_core::{GridSpec, Mode, Sampler, SamplerConfig, Texture, TextureModel, Variant};

/// Freshly initialized single-exemplar model with its sampler and texture.
pub fn fixture(variant: Variant, dim: usize) -> (Sampler, Texture) {
    let model =
        TextureModel::init(SamplerConfig::new(variant, dim), Mode::Single, None, 1).expect("init");
    (
        model.sampler().expect("sampler"),
        model.texture(None).expect("texture"),
    )
}

/// Interleaved positions of a `side x side` window at `offset`.
pub fn positions(dim: usize, side: usize, offset: f64) -> Vec<f64> {
    let mut origin = vec![offset; dim];
    if dim == 3 {
        origin[2] += 0.5;
    }
    GridSpec::window(&origin, [4.0, 4.0], side, side)
        .expect("grid")
        .positions(0, 0, side, side)
}
