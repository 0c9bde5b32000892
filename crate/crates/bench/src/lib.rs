//! Shared inputs for the criterion benches. Every fixture is a pure
//! function of its arguments so runs compare like with like.

use mscrack_core::cross_scan::Ss2dParams;
use mscrack_core::model::{Model, ModelConfig};
use mscrack_core::rng::{self, Stream};
use mscrack_core::ssm::SsmParams;
use mscrack_core::Tensor;
use rand::Rng;

pub use mscrack_core::scan_bench::scan_instance;

/// Feature map `[side, side, channels]` with independent direction
/// parameters.
pub fn ss2d_instance(side: usize, channels: usize, state: usize, seed: u64) -> (Tensor, Ss2dParams) {
    let mut r = rng::stream(seed, Stream::Test, side as u64);
    let params = Ss2dParams::independent(std::array::from_fn(|_| SsmParams::init(channels, state, &mut r)));
    let x = Tensor::from_fn(&[side, side, channels], |_| r.gen_range(-1.0..1.0));
    (x, params)
}

/// Toy segmenter and a random `[C, side, side]` image for it.
pub fn toy_model(in_channels: usize, side: usize, seed: u64) -> (Model, Tensor) {
    let model = Model::init(ModelConfig::toy(in_channels), seed).expect("toy config is valid");
    let mut r = rng::stream(seed, Stream::Test, 0);
    let image = Tensor::from_fn(&[in_channels, side, side], |_| r.gen_range(0.0..1.0));
    (model, image)
}
