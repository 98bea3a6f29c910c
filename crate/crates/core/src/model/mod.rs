//! U-Net segmentation model: a pluggable five-stage encoder, a decoder that
//! upsamples and fuses same-scale skips, and a 1x1 convolution + sigmoid head.
//!
//! Public tensors are channels-last (`B x H x W x C`); the network runs in
//! NCHW internally.

mod encoder;
mod layers;
pub mod ops;
mod params;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

pub use encoder::{EncoderKind, STAGE_STRIDES, TINY_CHANNELS};
pub use layers::ForwardOptions;
pub use params::ParamStore;

use crate::error::{Error, Result};
use encoder::{build_encoder, Encoder};
use layers::{Activation, Conv, ConvBn};
use params::Builder;

/// Spatial dimensions must be multiples of the deepest stride.
pub const SIZE_DIVISOR: usize = 32;

pub const DEFAULT_DECODER_CHANNELS: [usize; 5] = [256, 128, 64, 32, 16];
/// Narrow decoder paired with the tiny encoder.
pub const TINY_DECODER_CHANNELS: [usize; 5] = [128, 64, 32, 16, 8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    #[default]
    NearestThenConv,
    TransposedConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    /// Square input side the model is trained at.
    pub resolution: usize,
    pub decoder_channels: [usize; 5],
    #[serde(default)]
    pub upsample: UpsampleMode,
    /// Safetensors file with `encoder.*` weights.
    #[serde(default)]
    pub pretrained_source: Option<PathBuf>,
    /// Seed for weight initialisation.
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn tiny(resolution: usize) -> Self {
        Self {
            encoder: EncoderKind::Tiny,
            resolution,
            decoder_channels: TINY_DECODER_CHANNELS,
            upsample: UpsampleMode::NearestThenConv,
            pretrained_source: None,
            seed: 0,
        }
    }

    pub fn efficientnet_b4(resolution: usize) -> Self {
        Self {
            encoder: EncoderKind::EfficientnetB4,
            resolution,
            decoder_channels: DEFAULT_DECODER_CHANNELS,
            upsample: UpsampleMode::NearestThenConv,
            pretrained_source: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_size(self.resolution, self.resolution)?;
        if self.decoder_channels.contains(&0) {
            return Err(Error::InvalidArgument("decoder channels must be positive".into()));
        }
        Ok(())
    }
}

fn check_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(SIZE_DIVISOR) || !w.is_multiple_of(SIZE_DIVISOR) {
        return Err(Error::InvalidArgument(format!(
            "input size {h}x{w} is not a positive multiple of {SIZE_DIVISOR}"
        )));
    }
    Ok(())
}

enum Upsample {
    Nearest,
    /// 2x2 stride-2 transposed convolution with weight `[cin, cout * 4]` and bias.
    Transposed { weight: String, bias: String, channels: usize },
}

/// 2x2 stride-2 transposed convolution: input pixel `(y, x)` writes
/// `w[c, (o, a, b)]`-weighted copies to output `(2y + a, 2x + b)`.
fn transposed_upsample(x: &Tensor, w: &Tensor, bias: &Tensor, cout: usize) -> Result<Tensor> {
    let (n, c, h, wd) = x.dims4()?;
    Ok(x.permute((0, 2, 3, 1))?
        .reshape((n * h * wd, c))?
        .matmul(w)?
        .reshape((n, h, wd, cout, 2, 2))?
        .permute((0, 3, 1, 4, 2, 5))?
        .reshape((n, cout, 2 * h, 2 * wd))?
        .broadcast_add(&bias.reshape((1, (), 1, 1))?)?)
}

struct DecoderBlock {
    up: Upsample,
    conv1: ConvBn,
    conv2: ConvBn,
}

impl DecoderBlock {
    fn forward(&self, p: &ParamStore, x: &Tensor, skip: Option<&Tensor>, opts: ForwardOptions) -> Result<Tensor> {
        let up = match &self.up {
            Upsample::Nearest => ops::upsample_nearest(x, 2)?,
            Upsample::Transposed { weight, bias, channels } => {
                let wt = p.get(weight)?.as_tensor().to_dtype(x.dtype())?;
                let bt = p.get(bias)?.as_tensor().to_dtype(x.dtype())?;
                transposed_upsample(x, &wt, &bt, *channels)?
            }
        };
        let h = match skip {
            Some(s) => Tensor::cat(&[&up, s], 1)?,
            None => up,
        };
        let h = self.conv1.forward(p, &h, opts)?;
        self.conv2.forward(p, &h, opts)
    }
}

pub struct SegmentationModel {
    config: ModelConfig,
    params: ParamStore,
    encoder: Box<dyn Encoder>,
    blocks: Vec<DecoderBlock>,
    head: Conv,
}

impl std::fmt::Debug for SegmentationModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SegmentationModel")
            .field("config", &self.config)
            .field("num_params", &self.params.num_params())
            .finish()
    }
}

/// Builds a freshly initialised model and loads pretrained encoder weights
/// when a source is configured.
pub fn build_model(config: &ModelConfig) -> Result<SegmentationModel> {
    config.validate()?;
    let mut b = Builder::new(config.seed);
    let encoder = build_encoder(config.encoder, &mut b)?;
    let stage = encoder.stage_channels();
    let mut blocks = Vec::with_capacity(5);
    let mut cin = stage[4];
    b.push("decoder");
    for (i, &cout) in config.decoder_channels.iter().enumerate() {
        b.push(format!("block{i}"));
        let skip = if i < 4 { stage[3 - i] } else { 0 };
        let up = match config.upsample {
            UpsampleMode::NearestThenConv => Upsample::Nearest,
            UpsampleMode::TransposedConv => Upsample::Transposed {
                weight: b.kaiming("up.weight", &[cin, cin * 4], cin)?,
                bias: b.constant("up.bias", &[cin], 0.0)?,
                channels: cin,
            },
        };
        blocks.push(DecoderBlock {
            up,
            conv1: ConvBn::dense(&mut b, "conv1", cin + skip, cout, 3, 1, Activation::Relu)?,
            conv2: ConvBn::dense(&mut b, "conv2", cout, cout, 3, 1, Activation::Relu)?,
        });
        b.pop();
        cin = cout;
    }
    b.pop();
    let head = Conv::new(&mut b, "head", cin, 1, 1, 1, true)?;
    let model = SegmentationModel {
        config: config.clone(),
        params: b.finish(),
        encoder,
        blocks,
        head,
    };
    if let Some(path) = &config.pretrained_source {
        model.load_pretrained(path)?;
    }
    Ok(model)
}

impl SegmentationModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    pub fn stage_channels(&self) -> [usize; 5] {
        self.encoder.stage_channels()
    }

    /// Replaces this model's weights and buffers with another's.
    pub fn copy_weights_from(&self, other: &SegmentationModel) -> Result<()> {
        self.params.load_from(&other.params.tensors())?;
        Ok(())
    }

    fn load_pretrained(&self, path: &Path) -> Result<()> {
        let unavailable = |reason: String| Error::PretrainedUnavailable {
            path: path.to_path_buf(),
            reason,
        };
        let bytes = std::fs::read(path).map_err(|e| unavailable(e.to_string()))?;
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)
            .map_err(|e| unavailable(e.to_string()))?;
        let encoder: BTreeMap<String, Tensor> = tensors
            .into_iter()
            .filter(|(k, _)| k.starts_with("encoder."))
            .collect();
        let loaded = self.params.load_from(&encoder)?;
        if loaded.is_empty() {
            return Err(unavailable("no `encoder.*` tensor matches this architecture".into()));
        }
        log::info!("loaded {} pretrained encoder tensors from {}", loaded.len(), path.display());
        Ok(())
    }

    /// Encoder features at strides 2..32, NCHW.
    pub fn features(&self, x_nchw: &Tensor, opts: ForwardOptions) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = x_nchw.dims4()?;
        if c != 3 {
            return Err(Error::shape("3 channels", c));
        }
        check_size(h, w)?;
        self.encoder.forward(&self.params, &x_nchw.to_dtype(opts.dtype)?, opts)
    }

    /// Pre-sigmoid logits, NCHW `B x 1 x H x W`, in `f32`.
    pub fn logits(&self, x_nchw: &Tensor, opts: ForwardOptions) -> Result<Tensor> {
        let feats = self.features(x_nchw, opts)?;
        let mut h = feats[4].clone();
        for (i, block) in self.blocks.iter().enumerate() {
            let skip = if i < 4 { Some(&feats[3 - i]) } else { None };
            h = block.forward(&self.params, &h, skip, opts)?;
        }
        Ok(self.head.forward(&self.params, &h)?.to_dtype(DType::F32)?)
    }

    /// Probabilities, NCHW `B x 1 x H x W`.
    pub fn forward_t(&self, x_nchw: &Tensor, opts: ForwardOptions) -> Result<Tensor> {
        Ok(ops::sigmoid(&self.logits(x_nchw, opts)?)?)
    }

    /// Inference on channels-last `B x H x W x 3` inputs in `[0, 1]`;
    /// returns `B x H x W x 1` probabilities.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let dims = batch.dims();
        if dims.len() != 4 || dims[3] != 3 {
            return Err(Error::shape("B x H x W x 3", format!("{dims:?}")));
        }
        let x = batch.to_dtype(DType::F32)?.permute((0, 3, 1, 2))?;
        let y = self.forward_t(&x, ForwardOptions::eval())?;
        Ok(y.permute((0, 2, 3, 1))?.contiguous()?)
    }
}
