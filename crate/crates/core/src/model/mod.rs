//! Segmentation network: patch embedding, a multi-stage encoder of gated
//! selective-scan blocks with 2x2 patch merging between stages, and an
//! UperNet-style decoder producing per-pixel class logits.

pub mod blocks;
pub mod decoder;
pub mod layers;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::impl_parameters;
use crate::params::Parameters;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub use blocks::{BlockCache, BlockWeights, Downsample, PatchEmbed};
pub use decoder::{DecoderCache, UperDecoder, PPM_BINS};
pub use layers::{Conv, LayerNorm, Linear};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub patch_size: usize,
    /// Width of the first stage; doubles per stage.
    pub embed_dim: usize,
    /// Blocks per stage; the stage count is `depths.len()`.
    pub depths: Vec<usize>,
    pub state_dim: usize,
    pub num_classes: usize,
    /// Inner width of a block relative to its token width.
    pub expand: usize,
    pub decoder_dim: usize,
    /// Share one set of scan parameters across the four directions.
    pub tie_directions: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 6,
            patch_size: 3,
            embed_dim: 16,
            depths: vec![1, 1, 1, 1],
            state_dim: 4,
            num_classes: 2,
            expand: 2,
            decoder_dim: 16,
            tie_directions: false,
        }
    }
}

impl ModelConfig {
    pub fn toy(in_channels: usize) -> Self {
        Self {
            in_channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("state_dim", self.state_dim),
            ("expand", self.expand),
            ("decoder_dim", self.decoder_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::Config("model.num_classes must be at least 2".into()));
        }
        if self.depths.is_empty() || self.depths.len() > 8 {
            return Err(Error::Config(format!(
                "model.depths must list 1 to 8 stages, got {}",
                self.depths.len()
            )));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.depths.len()
    }

    pub fn stage_dims(&self) -> Vec<usize> {
        (0..self.stages()).map(|i| self.embed_dim << i).collect()
    }

    /// Input extents must be multiples of this.
    pub fn input_multiple(&self) -> usize {
        self.patch_size << (self.stages() - 1)
    }

    pub fn check_input(&self, image: &Tensor) -> Result<()> {
        let (c, h, w) = image.dims3()?;
        if c != self.in_channels {
            return Err(Error::ChannelMismatch {
                expected: self.in_channels,
                got: c,
            });
        }
        let m = self.input_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::shape(
                "model_forward",
                format!("{h}x{w} input must be a nonzero multiple of {m} on both axes"),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    /// Absent for the first stage.
    pub downsample: Option<Downsample>,
    pub blocks: Vec<BlockWeights>,
}

impl_parameters!(Stage { downsample, blocks });

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: PatchEmbed,
    pub stages: Vec<Stage>,
    pub decoder: UperDecoder,
}

impl Parameters for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        use crate::params::join;
        self.embed.visit(&join(prefix, "embed"), f);
        self.stages.visit(&join(prefix, "stages"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        use crate::params::join;
        self.embed.visit_mut(&join(prefix, "embed"), f);
        self.stages.visit_mut(&join(prefix, "stages"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}

#[derive(Clone, Debug)]
struct StageCache {
    /// Input of the downsample, if any.
    down_in: Option<Tensor>,
    /// Input of each block, followed by its cache.
    blocks: Vec<(Tensor, BlockCache)>,
}

/// Activations of one forward pass, consumed by [`Model::backward`].
#[derive(Clone, Debug)]
pub struct ModelCache {
    image: Tensor,
    stages: Vec<StageCache>,
    decoder: DecoderCache,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, Stream::Init, 0);
        let dims = config.stage_dims();
        let embed = PatchEmbed::init(config.in_channels, config.patch_size, dims[0], &mut r);
        let stages = dims
            .iter()
            .zip(&config.depths)
            .enumerate()
            .map(|(i, (&dim, &depth))| Stage {
                downsample: (i > 0).then(|| Downsample::init(dim / 2, &mut r)),
                blocks: (0..depth)
                    .map(|_| BlockWeights::init(dim, config.expand, config.state_dim, config.tie_directions, &mut r))
                    .collect(),
            })
            .collect();
        let decoder = UperDecoder::init(&dims, config.decoder_dim, config.num_classes, &mut r);
        Ok(Self {
            config,
            embed,
            stages,
            decoder,
        })
    }

    /// Per-stage `[H_i, W_i, C_i]` feature grids, shallowest first.
    pub fn encode(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.encode_cached(image)?.0)
    }

    fn encode_cached(&self, image: &Tensor) -> Result<(Vec<Tensor>, Vec<StageCache>)> {
        self.config.check_input(image)?;
        let mut x = self.embed.forward(image)?;
        let mut feats = Vec::with_capacity(self.stages.len());
        let mut caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let down_in = match &stage.downsample {
                Some(ds) => {
                    let input = x;
                    x = ds.forward(&input)?;
                    Some(input)
                }
                None => None,
            };
            let mut blocks = Vec::with_capacity(stage.blocks.len());
            for b in &stage.blocks {
                let (y, cache) = b.forward_cached(&x)?;
                blocks.push((x, cache));
                x = y;
            }
            feats.push(x.clone());
            caches.push(StageCache { down_in, blocks });
        }
        Ok((feats, caches))
    }

    /// `[C, H, W]` image -> `[classes, H, W]` logits.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let feats = self.encode(image)?;
        let (_, h, w) = image.dims3()?;
        self.decoder.forward(&feats, h, w)
    }

    pub fn forward_cached(&self, image: &Tensor) -> Result<(Tensor, ModelCache)> {
        let (feats, stages) = self.encode_cached(image)?;
        let (_, h, w) = image.dims3()?;
        let (logits, decoder) = self.decoder.forward_cached(&feats, h, w)?;
        Ok((
            logits,
            ModelCache {
                image: image.clone(),
                stages,
                decoder,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` and returns the image
    /// gradient.
    pub fn backward(&self, cache: &ModelCache, dlogits: &Tensor, grads: &mut Model) -> Result<Tensor> {
        let dfeats = self.decoder.backward(&cache.decoder, dlogits, &mut grads.decoder)?;
        let mut carry: Option<Tensor> = None;
        for (i, (stage, sc)) in self.stages.iter().zip(&cache.stages).enumerate().rev() {
            let mut dx = dfeats[i].clone();
            if let Some(c) = carry.take() {
                dx.add_assign(&c)?;
            }
            for (j, (b, (input, bc))) in stage.blocks.iter().zip(&sc.blocks).enumerate().rev() {
                dx = b.backward(input, bc, &dx, &mut grads.stages[i].blocks[j])?;
            }
            carry = Some(match (&stage.downsample, &sc.down_in) {
                (Some(ds), Some(input)) => {
                    let g = grads.stages[i].downsample.as_mut().expect("matching structure");
                    ds.backward(input, &dx, g)?
                }
                _ => dx,
            });
        }
        let dembed = carry.expect("at least one stage");
        self.embed.backward(&cache.image, &dembed, &mut grads.embed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check_with, FnOp, GradCheckConfig};
    use crate::params::{load_tensors, named_tensors, param_count, tensors, zeros_like};
    use rand::Rng;

    fn rand_image(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, Stream::Test, 0);
        Tensor::from_fn(&[c, h, w], |_| r.gen_range(0.0..1.0))
    }

    #[test]
    fn toy_shapes() {
        let m = Model::init(ModelConfig::toy(6), 0).unwrap();
        let img = rand_image(6, 48, 48, 1);
        let feats = m.encode(&img).unwrap();
        let shapes: Vec<_> = feats.iter().map(|f| f.shape().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![vec![16, 16, 16], vec![8, 8, 32], vec![4, 4, 64], vec![2, 2, 128]]
        );
        let y = m.forward(&img).unwrap();
        assert_eq!(y.shape(), &[2, 48, 48]);
        assert!(y.is_finite());
        assert_eq!(m.forward(&img).unwrap(), y);
    }

    #[test]
    fn input_validation() {
        let m = Model::init(ModelConfig::toy(6), 0).unwrap();
        match m.forward(&rand_image(3, 48, 48, 1)) {
            Err(Error::ChannelMismatch { expected: 6, got: 3 }) => {}
            other => panic!("{other:?}"),
        }
        assert!(m.forward(&rand_image(6, 36, 48, 1)).is_err());
        let m3 = Model::init(ModelConfig::toy(3), 0).unwrap();
        assert_eq!(m3.forward(&rand_image(3, 24, 48, 2)).unwrap().shape(), &[2, 24, 48]);
    }

    /// Independent count from the layer shapes.
    fn closed_form_count(cfg: &ModelConfig) -> usize {
        let (n, ps, cin) = (cfg.state_dim, cfg.patch_size, cfg.in_channels);
        let dd = cfg.decoder_dim;
        let dirs = if cfg.tie_directions { 1 } else { 4 };
        let mut total = cin * ps * ps * cfg.embed_dim + cfg.embed_dim;
        let dims = cfg.stage_dims();
        for (i, (&c, &depth)) in dims.iter().zip(&cfg.depths).enumerate() {
            if i > 0 {
                total += 4 * (c / 2) * c + c;
            }
            let d = cfg.expand * c;
            let ssm = d * n + d + d * d + d + 2 * d * n;
            let block = 2 * c + 2 * (c * d + d) + 9 * d + dirs * ssm + 2 * d + d * c + c;
            total += depth * block;
        }
        let last = *dims.last().unwrap();
        let levels = dims.len();
        total += 4 * (last * dd + dd);
        total += (last + 4 * dd) * dd * 9 + dd;
        total += dims[..levels - 1].iter().map(|c| c * dd + dd).sum::<usize>();
        total += (levels - 1) * (dd * dd * 9 + dd);
        total += levels * dd * dd * 9 + dd;
        total += dd * cfg.num_classes + cfg.num_classes;
        total
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for cfg in [
            ModelConfig::toy(6),
            ModelConfig::toy(3),
            ModelConfig {
                depths: vec![2, 1],
                tie_directions: true,
                ..ModelConfig::toy(6)
            },
        ] {
            let m = Model::init(cfg.clone(), 0).unwrap();
            assert_eq!(param_count(&m), closed_form_count(&cfg), "{cfg:?}");
        }
    }

    #[test]
    fn zeroed_residual_branches_reduce_to_embed_and_merges() {
        let mut m = Model::init(ModelConfig::toy(6), 3).unwrap();
        for s in &mut m.stages {
            for b in &mut s.blocks {
                b.out_proj.w.fill(0.0);
                b.out_proj.b.fill(0.0);
            }
        }
        let img = rand_image(6, 24, 24, 4);
        let feats = m.encode(&img).unwrap();
        let mut x = m.embed.forward(&img).unwrap();
        for (s, f) in m.stages.iter().zip(&feats) {
            if let Some(ds) = &s.downsample {
                x = ds.forward(&x).unwrap();
            }
            assert_eq!(&x, f);
        }
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            in_channels: 2,
            patch_size: 2,
            embed_dim: 2,
            depths: vec![1, 1],
            state_dim: 2,
            num_classes: 2,
            expand: 2,
            decoder_dim: 3,
            tie_directions: false,
        }
    }

    #[test]
    fn end_to_end_grad_check() {
        let m = Model::init(small_config(), 5).unwrap();
        let (m1, m2) = (m.clone(), m.clone());
        let op = FnOp::new(
            "model",
            move |xs: &[Tensor]| {
                let mut p = m1.clone();
                load_tensors(&mut p, &xs[1..])?;
                p.forward(&xs[0])
            },
            move |xs: &[Tensor], g: &Tensor| {
                let mut p = m2.clone();
                load_tensors(&mut p, &xs[1..])?;
                let (_, cache) = p.forward_cached(&xs[0])?;
                let mut grads = zeros_like(&p);
                let mut out = vec![p.backward(&cache, g, &mut grads)?];
                out.extend(tensors(&grads));
                Ok(out)
            },
        );
        let mut inputs = vec![rand_image(2, 4, 8, 6)];
        inputs.extend(tensors(&m));
        let cfg = GradCheckConfig::new(1e-4).sampled(6);
        let rep = grad_check_with(&op, &inputs, &cfg).unwrap();
        assert!(rep.passed, "{rep}");
    }

    #[test]
    fn every_parameter_gets_gradient() {
        let m = Model::init(ModelConfig::toy(6), 7).unwrap();
        let img = rand_image(6, 24, 24, 8);
        let (logits, cache) = m.forward_cached(&img).unwrap();
        // softmax cross-entropy against random labels
        let mut r = rng::stream(9, Stream::Test, 0);
        let (k, h, w) = logits.dims3().unwrap();
        let labels: Vec<usize> = (0..h * w).map(|_| r.gen_range(0..k)).collect();
        let mut d = Tensor::zeros(logits.shape());
        for p in 0..h * w {
            let z: Vec<f64> = (0..k).map(|c| logits.data()[c * h * w + p]).collect();
            let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = z.iter().map(|v| (v - mx).exp()).sum();
            for c in 0..k {
                let prob = (z[c] - mx).exp() / s;
                d.data_mut()[c * h * w + p] = prob - f64::from(labels[p] == c);
            }
        }
        let mut grads = zeros_like(&m);
        m.backward(&cache, &d, &mut grads).unwrap();
        for (name, g) in named_tensors(&grads) {
            assert!(g.data().iter().any(|&v| v != 0.0), "dead parameter {name}");
        }
    }
}
