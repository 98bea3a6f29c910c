//! Five-stage feature extractors. Stage `i` has stride `2^(i+1)`.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::{Activation, BatchNorm, Conv, ConvBn, ForwardOptions};
use super::ops;
use super::params::{Builder, ParamStore};
use crate::error::Result;

pub const STAGE_STRIDES: [usize; 5] = [2, 4, 8, 16, 32];

pub const TINY_CHANNELS: [usize; 5] = [8, 16, 24, 32, 48];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Tiny,
    EfficientnetB0,
    EfficientnetB1,
    EfficientnetB2,
    EfficientnetB3,
    EfficientnetB4,
    EfficientnetB5,
    EfficientnetB6,
    EfficientnetB7,
}

impl EncoderKind {
    /// Width and depth multipliers of the compound-scaled family.
    fn scaling(self) -> Option<(f64, f64)> {
        Some(match self {
            EncoderKind::Tiny => return None,
            EncoderKind::EfficientnetB0 => (1.0, 1.0),
            EncoderKind::EfficientnetB1 => (1.0, 1.1),
            EncoderKind::EfficientnetB2 => (1.1, 1.2),
            EncoderKind::EfficientnetB3 => (1.2, 1.4),
            EncoderKind::EfficientnetB4 => (1.4, 1.8),
            EncoderKind::EfficientnetB5 => (1.6, 2.2),
            EncoderKind::EfficientnetB6 => (1.8, 2.6),
            EncoderKind::EfficientnetB7 => (2.0, 3.1),
        })
    }

    pub fn stage_channels(self) -> [usize; 5] {
        match self.scaling() {
            None => TINY_CHANNELS,
            Some((w, d)) => EfficientNet::plan(w, d).1,
        }
    }
}

pub trait Encoder: Send + Sync {
    fn stage_channels(&self) -> [usize; 5];
    /// Feature maps at strides 2, 4, 8, 16, 32.
    fn forward(&self, p: &ParamStore, x: &Tensor, opts: ForwardOptions) -> Result<Vec<Tensor>>;
}

pub fn build_encoder(kind: EncoderKind, b: &mut Builder) -> Result<Box<dyn Encoder>> {
    b.push("encoder");
    let enc: Box<dyn Encoder> = match kind.scaling() {
        None => Box::new(TinyEncoder::new(b, TINY_CHANNELS)?),
        Some((w, d)) => Box::new(EfficientNet::new(b, w, d)?),
    };
    b.pop();
    Ok(enc)
}

/// Each stage halves the resolution with a strided 3x3 conv, then refines with a second 3x3 conv.
pub struct TinyEncoder {
    stages: Vec<[ConvBn; 2]>,
    channels: [usize; 5],
}

impl TinyEncoder {
    pub fn new(b: &mut Builder, channels: [usize; 5]) -> Result<Self> {
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &c) in channels.iter().enumerate() {
            b.push(format!("stage{i}"));
            stages.push([
                ConvBn::dense(b, "down", cin, c, 3, 2, Activation::Relu)?,
                ConvBn::dense(b, "refine", c, c, 3, 1, Activation::Relu)?,
            ]);
            b.pop();
            cin = c;
        }
        Ok(Self { stages, channels })
    }
}

impl Encoder for TinyEncoder {
    fn stage_channels(&self) -> [usize; 5] {
        self.channels
    }

    fn forward(&self, p: &ParamStore, x: &Tensor, opts: ForwardOptions) -> Result<Vec<Tensor>> {
        let mut feats = Vec::with_capacity(5);
        let mut h = x.clone();
        for [down, refine] in &self.stages {
            h = refine.forward(p, &down.forward(p, &h, opts)?, opts)?;
            feats.push(h.clone());
        }
        Ok(feats)
    }
}

/// Base stage table: expansion, kernel, stride, input channels, output channels, repeats.
const BASE_STAGES: [(usize, usize, usize, usize, usize, usize); 7] = [
    (1, 3, 1, 32, 16, 1),
    (6, 3, 2, 16, 24, 2),
    (6, 5, 2, 24, 40, 2),
    (6, 3, 2, 40, 80, 3),
    (6, 5, 1, 80, 112, 3),
    (6, 5, 2, 112, 192, 4),
    (6, 3, 1, 192, 320, 1),
];

/// Stage indices whose outputs are the stride-2..32 features.
const TAPS: [usize; 5] = [0, 1, 2, 4, 6];

const EFF_BN_EPS: f64 = 1e-3;

fn round_filters(c: usize, width: f64) -> usize {
    let scaled = c as f64 * width;
    let mut out = (((scaled + 4.0) as usize) / 8 * 8).max(8);
    if (out as f64) < 0.9 * scaled {
        out += 8;
    }
    out
}

fn round_repeats(r: usize, depth: f64) -> usize {
    (depth * r as f64).ceil() as usize
}

struct SqueezeExcite {
    reduce: Conv,
    expand: Conv,
}

struct MbConv {
    expand: Option<ConvBn>,
    depthwise: ConvBn,
    se: SqueezeExcite,
    project: Conv,
    project_bn: BatchNorm,
    residual: bool,
}

impl MbConv {
    fn new(b: &mut Builder, expand_ratio: usize, k: usize, stride: usize, cin: usize, cout: usize) -> Result<Self> {
        let mid = cin * expand_ratio;
        let expand = if expand_ratio != 1 {
            Some(ConvBn::new(
                b,
                "expand",
                |b| Conv::new(b, "conv", cin, mid, 1, 1, false),
                mid,
                EFF_BN_EPS,
                Activation::Swish,
            )?)
        } else {
            None
        };
        let depthwise = ConvBn::new(
            b,
            "depthwise",
            |b| Conv::depthwise(b, "conv", mid, k, stride),
            mid,
            EFF_BN_EPS,
            Activation::Swish,
        )?;
        let squeezed = (cin / 4).max(1);
        b.push("se");
        let se = SqueezeExcite {
            reduce: Conv::new(b, "reduce", mid, squeezed, 1, 1, true)?,
            expand: Conv::new(b, "expand", squeezed, mid, 1, 1, true)?,
        };
        b.pop();
        let project = Conv::new(b, "project", mid, cout, 1, 1, false)?;
        let project_bn = BatchNorm::new(b, "project_bn", cout, EFF_BN_EPS)?;
        Ok(Self {
            expand,
            depthwise,
            se,
            project,
            project_bn,
            residual: stride == 1 && cin == cout,
        })
    }

    fn forward(&self, p: &ParamStore, x: &Tensor, opts: ForwardOptions) -> Result<Tensor> {
        let mut h = match &self.expand {
            Some(e) => e.forward(p, x, opts)?,
            None => x.clone(),
        };
        h = self.depthwise.forward(p, &h, opts)?;
        let s = h.mean_keepdim((2, 3))?;
        let s = self.se.reduce.forward(p, &s)?.silu()?;
        let s = ops::sigmoid(&self.se.expand.forward(p, &s)?)?;
        h = h.broadcast_mul(&s)?;
        h = self.project_bn.forward(p, &self.project.forward(p, &h)?, opts)?;
        if self.residual {
            h = (h + x)?;
        }
        Ok(h)
    }
}

/// Compound-scaled inverted-residual encoder without the classification head.
pub struct EfficientNet {
    stem: ConvBn,
    stages: Vec<Vec<MbConv>>,
    channels: [usize; 5],
}

impl EfficientNet {
    /// Per-stage `(expand, kernel, stride, cin, cout, repeats)` and tapped channels.
    fn plan(width: f64, depth: f64) -> (Vec<[usize; 6]>, [usize; 5]) {
        let stages: Vec<[usize; 6]> = BASE_STAGES
            .iter()
            .map(|&(e, k, s, cin, cout, r)| {
                [e, k, s, round_filters(cin, width), round_filters(cout, width), round_repeats(r, depth)]
            })
            .collect();
        let channels = TAPS.map(|i| stages[i][4]);
        (stages, channels)
    }

    pub fn new(b: &mut Builder, width: f64, depth: f64) -> Result<Self> {
        let stem_c = round_filters(32, width);
        let stem = ConvBn::new(
            b,
            "stem",
            |b| Conv::new(b, "conv", 3, stem_c, 3, 2, false),
            stem_c,
            EFF_BN_EPS,
            Activation::Swish,
        )?;
        let (plan, channels) = Self::plan(width, depth);
        let mut stages = Vec::new();
        for (si, &[e, k, s, cin, cout, r]) in plan.iter().enumerate() {
            let mut blocks = Vec::new();
            for bi in 0..r {
                b.push(format!("stage{si}.block{bi}"));
                let (cin, s) = if bi == 0 { (cin, s) } else { (cout, 1) };
                blocks.push(MbConv::new(b, e, k, s, cin, cout)?);
                b.pop();
            }
            stages.push(blocks);
        }
        Ok(Self { stem, stages, channels })
    }
}

impl Encoder for EfficientNet {
    fn stage_channels(&self) -> [usize; 5] {
        self.channels
    }

    fn forward(&self, p: &ParamStore, x: &Tensor, opts: ForwardOptions) -> Result<Vec<Tensor>> {
        let mut h = self.stem.forward(p, x, opts)?;
        let mut feats = Vec::with_capacity(5);
        for (si, blocks) in self.stages.iter().enumerate() {
            for block in blocks {
                h = block.forward(p, &h, opts)?;
            }
            if TAPS.contains(&si) {
                feats.push(h.clone());
            }
        }
        Ok(feats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn b4_stage_channels() {
        assert_eq!(EncoderKind::EfficientnetB4.stage_channels(), [24, 32, 56, 160, 448]);
        assert_eq!(EncoderKind::EfficientnetB0.stage_channels(), [16, 24, 40, 112, 320]);
    }

    #[test]
    fn b4_depths() {
        let (plan, _) = EfficientNet::plan(1.4, 1.8);
        let repeats: Vec<usize> = plan.iter().map(|s| s[5]).collect();
        assert_eq!(repeats, vec![2, 4, 4, 6, 6, 8, 2]);
    }

    #[test]
    fn kind_names() {
        assert_eq!(serde_json::to_string(&EncoderKind::EfficientnetB4).unwrap(), "\"efficientnet-b4\"");
        assert_eq!(serde_json::from_str::<EncoderKind>("\"tiny\"").unwrap(), EncoderKind::Tiny);
    }
}
