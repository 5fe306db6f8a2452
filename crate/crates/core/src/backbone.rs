//! Embedding networks mapping `3×H×W` images to spatial feature maps.
//!
//! Support and query images go through the same network. Every convolution is
//! bias-free because batch normalization follows it.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv, ConvBnRelu, ConvGeom, Ctx, Float, ParamStore, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Conv4,
    Conv6,
    ResNet10,
    ResNet18,
    ResNet34,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 5] = [
        BackboneKind::Conv4,
        BackboneKind::Conv6,
        BackboneKind::ResNet10,
        BackboneKind::ResNet18,
        BackboneKind::ResNet34,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::Conv4 => "conv4",
            BackboneKind::Conv6 => "conv6",
            BackboneKind::ResNet10 => "resnet10",
            BackboneKind::ResNet18 => "resnet18",
            BackboneKind::ResNet34 => "resnet34",
        }
    }

    fn residual_layout(self) -> Option<[usize; 4]> {
        match self {
            BackboneKind::ResNet10 => Some([1, 1, 1, 1]),
            BackboneKind::ResNet18 => Some([2, 2, 2, 2]),
            BackboneKind::ResNet34 => Some([3, 4, 6, 3]),
            _ => None,
        }
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BackboneKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::UnknownBackbone(s.to_string()))
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Channels of every Conv-N block, or of the first residual stage.
    pub width: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::Conv4,
            width: 64,
        }
    }
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    first: ConvBnRelu,
    second: Conv,
    second_bn: BatchNorm,
    shortcut: Option<(Conv, BatchNorm)>,
}

impl ResidualBlock {
    fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (
                Conv::new(store, &format!("{name}.shortcut.conv"), cin, cout, ConvGeom::square(1, stride, 0), 2, false, rng),
                BatchNorm::new(store, &format!("{name}.shortcut.bn"), cout),
            )
        });
        Self {
            first: ConvBnRelu::new(store, &format!("{name}.block1"), cin, cout, ConvGeom::square(3, stride, 1), 2, rng),
            second: Conv::new(store, &format!("{name}.block2.conv"), cout, cout, ConvGeom::square(3, 1, 1), 2, false, rng),
            second_bn: BatchNorm::new(store, &format!("{name}.block2.bn"), cout),
            shortcut,
        }
    }

    fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let h = self.first.forward(ctx, x);
        let h = self.second.forward(ctx, h);
        let h = self.second_bn.forward(ctx, h);
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(ctx, x);
                bn.forward(ctx, s)
            }
            None => x,
        };
        let y = ctx.tape.add(h, skip);
        ctx.tape.relu(y)
    }
}

#[derive(Debug, Clone)]
enum Arch {
    Plain(Vec<(ConvBnRelu, bool)>),
    Residual { stem: ConvBnRelu, blocks: Vec<ResidualBlock> },
}

/// A built embedding network; parameters live in the model's [`ParamStore`]
/// under the `backbone.` prefix.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    arch: Arch,
}

impl Backbone {
    /// Conv-4: four `[3×3 conv → BN → ReLU → 2×2 max-pool]` blocks. Conv-6 appends two
    /// blocks without pooling. ResNets use a stride-1 `3×3` stem followed by four
    /// stride-2 stages of basic blocks with widths `w, 2w, 4w, 8w`.
    pub fn build<T: Float, R: Rng>(config: BackboneConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        if config.width == 0 {
            return Err(Error::UnknownBackbone(format!("{} with width 0", config.kind)));
        }
        let w = config.width;
        let arch = match config.kind {
            BackboneKind::Conv4 | BackboneKind::Conv6 => {
                let depth = if config.kind == BackboneKind::Conv4 { 4 } else { 6 };
                let blocks = (0..depth)
                    .map(|i| {
                        let cin = if i == 0 { 3 } else { w };
                        let block = ConvBnRelu::new(store, &format!("backbone.layer{i}"), cin, w, ConvGeom::square(3, 1, 1), 2, rng);
                        (block, i < 4)
                    })
                    .collect();
                Arch::Plain(blocks)
            }
            kind => {
                let layout = kind.residual_layout().expect("residual variant");
                let stem = ConvBnRelu::new(store, "backbone.stem", 3, w, ConvGeom::square(3, 1, 1), 2, rng);
                let mut blocks = Vec::new();
                let mut cin = w;
                for (stage, &count) in layout.iter().enumerate() {
                    let cout = w << stage;
                    for b in 0..count {
                        let stride = if b == 0 { 2 } else { 1 };
                        blocks.push(ResidualBlock::new(store, &format!("backbone.stage{stage}.{b}"), cin, cout, stride, rng));
                        cin = cout;
                    }
                }
                Arch::Residual { stem, blocks }
            }
        };
        Ok(Self { config, arch })
    }

    /// Embeds a batch `[B, 3, H, W]` into `[B, C, h, w]`.
    pub fn embed<T: Float>(&self, ctx: &mut Ctx<'_, T>, images: Var) -> Result<Var> {
        let shape = ctx.tape.shape(images).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::ShapeMismatch {
                expected: vec![0, 3, 0, 0],
                got: shape,
            });
        }
        self.output_shape(shape[2]).map_err(|_| Error::ShapeMismatch {
            expected: vec![shape[0], 3, 16, 16],
            got: shape.clone(),
        })?;
        let mut x = images;
        match &self.arch {
            Arch::Plain(blocks) => {
                for (block, pool) in blocks {
                    x = block.forward(ctx, x);
                    if *pool {
                        x = ctx.tape.max_pool2(x);
                    }
                }
            }
            Arch::Residual { stem, blocks } => {
                x = stem.forward(ctx, x);
                for block in blocks {
                    x = block.forward(ctx, x);
                }
            }
        }
        Ok(x)
    }

    /// Feature-map shape `[C, h, w]` for a square `input`×`input` image.
    pub fn output_shape(&self, input: usize) -> Result<[usize; 3]> {
        let too_small = || Error::ShapeMismatch {
            expected: vec![3, 16, 16],
            got: vec![3, input, input],
        };
        match &self.arch {
            Arch::Plain(_) => {
                let side = input >> 4;
                if side == 0 {
                    return Err(too_small());
                }
                Ok([self.config.width, side, side])
            }
            Arch::Residual { .. } => {
                let mut side = input;
                for _ in 0..4 {
                    side = (side + 2 - 3) / 2 + 1;
                }
                if input < 8 {
                    return Err(too_small());
                }
                Ok([self.config.width << 3, side, side])
            }
        }
    }

    pub fn out_channels(&self) -> usize {
        match self.arch {
            Arch::Plain(_) => self.config.width,
            Arch::Residual { .. } => self.config.width << 3,
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::Tensor;

    fn build(kind: BackboneKind, width: usize) -> (Backbone, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let b = Backbone::build(BackboneConfig { kind, width }, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (b, store)
    }

    #[test]
    fn conv4_maps_84_to_5x5() {
        let (b, store) = build(BackboneKind::Conv4, 64);
        assert_eq!(b.output_shape(84).unwrap(), [64, 5, 5]);
        let mut ctx = Ctx::eval(&store);
        let x = ctx.tape.constant(Tensor::full(&[1, 3, 84, 84], 0.3));
        let y = b.embed(&mut ctx, x).unwrap();
        assert_eq!(ctx.tape.shape(y), &[1, 64, 5, 5]);
    }

    #[test]
    fn conv4_parameter_count() {
        let (_, store) = build(BackboneKind::Conv4, 64);
        assert_eq!(store.trainable_count("backbone."), 112_832);
    }

    #[test]
    fn unknown_name_is_rejected() {
        assert!(matches!("vgg16".parse::<BackboneKind>(), Err(Error::UnknownBackbone(_))));
        assert_eq!("ResNet18".parse::<BackboneKind>().unwrap(), BackboneKind::ResNet18);
    }

    #[test]
    fn conv6_keeps_five_by_five() {
        let (b, _) = build(BackboneKind::Conv6, 8);
        assert_eq!(b.output_shape(84).unwrap(), [8, 5, 5]);
    }

    #[test]
    fn resnet_output_geometry() {
        let (b, store) = build(BackboneKind::ResNet10, 4);
        assert_eq!(b.output_shape(84).unwrap(), [32, 6, 6]);
        let mut ctx = Ctx::eval(&store);
        let x = ctx.tape.constant(Tensor::full(&[2, 3, 84, 84], 0.1));
        let y = b.embed(&mut ctx, x).unwrap();
        assert_eq!(ctx.tape.shape(y), &[2, 32, 6, 6]);
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let (b, store) = build(BackboneKind::Conv4, 4);
        let mut ctx = Ctx::eval(&store);
        let x = ctx.tape.constant(Tensor::zeros(&[1, 1, 84, 84]));
        assert!(matches!(b.embed(&mut ctx, x), Err(Error::ShapeMismatch { .. })));
    }
}
