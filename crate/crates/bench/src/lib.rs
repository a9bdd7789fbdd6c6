//! Fixtures shared by the benchmarks.

use avgzsl_core::data::{gen_synthetic, Dataset, FeatureDims, SyntheticConfig};
use avgzsl_core::model::{init_params, ArchitectureSpec, ModelParams};

/// Synthetic dataset and freshly initialized params at the given feature
/// dims.
pub fn fixture(dims: FeatureDims, per_class: usize, seed: u64) -> (Dataset, ModelParams) {
    let data = gen_synthetic(&SyntheticConfig {
        per_class,
        dims,
        seed,
        ..Default::default()
    })
    .expect("valid synthetic config");
    let arch = ArchitectureSpec::for_features(dims.audio, dims.video, dims.text);
    let params = init_params(arch, seed).expect("valid arch");
    (data, params)
}

/// Small dims for quick benches.
pub fn small_dims() -> FeatureDims {
    FeatureDims {
        audio: 128,
        video: 128,
        text: 32,
    }
}
