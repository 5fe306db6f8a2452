//! Parameterized layers built on the tape ops.

use rand::Rng;

use super::ops::ConvGeom;
use super::params::{fan_in_uniform, kaiming_normal, ParamId, ParamStore};
use super::tape::{Ctx, Mode, StatUpdate, Var};
use super::tensor::{Float, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Convolution with an optional per-channel bias. 2-D when `geom.kernel[0] == 1`
/// and the input is `[B, C, H, W]`; 3-D on `[B, C, D, H, W]`.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv {
    /// `spatial` is 2 for image convolutions and 3 for volumetric ones.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeom,
        spatial: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        assert!(spatial == 2 || spatial == 3);
        if spatial == 2 {
            assert_eq!(geom.kernel[0], 1, "2-D convolution needs a 2-D geometry");
        }
        let mut shape = vec![out_channels, in_channels];
        shape.extend_from_slice(&geom.kernel[3 - spatial..]);
        let fan_in = in_channels * geom.kernel.iter().product::<usize>();
        let weight = store.add_weight(format!("{name}.weight"), kaiming_normal(&shape, fan_in, rng));
        let bias = bias.then(|| {
            store.add_weight(format!("{name}.bias"), fan_in_uniform(&[out_channels], fan_in, rng))
        });
        Self {
            weight,
            bias,
            geom,
            in_channels,
            out_channels,
        }
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let w = ctx.p(self.weight);
        let y = ctx.tape.conv(x, w, self.geom);
        match self.bias {
            Some(b) => {
                let b = ctx.p(b);
                ctx.tape.add_channel_bias(y, b)
            }
            None => y,
        }
    }
}

/// Batch normalization over the channel axis of any `[B, C, ..]` input.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add_weight(format!("{name}.weight"), Tensor::full(&[channels], T::one())),
            beta: store.add_weight(format!("{name}.bias"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], T::one())),
            channels,
        }
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let gamma = ctx.p(self.gamma);
        let beta = ctx.p(self.beta);
        match ctx.mode {
            Mode::Train => {
                let (y, mean, var) = ctx.tape.batch_norm_train(x, gamma, beta, BN_EPS);
                ctx.stat_updates.push(StatUpdate {
                    mean_id: self.running_mean,
                    var_id: self.running_var,
                    batch_mean: mean,
                    batch_var: var,
                });
                y
            }
            Mode::Eval => {
                let mean = ctx.params.get(self.running_mean).data().to_vec();
                let var = ctx.params.get(self.running_var).data().to_vec();
                ctx.tape.batch_norm_eval(x, gamma, beta, &mean, &var, BN_EPS)
            }
        }
    }
}

/// Folds queued batch statistics into the running estimates.
pub fn apply_stat_updates<T: Float>(store: &mut ParamStore<T>, updates: &[StatUpdate<T>]) {
    let m = T::lit(BN_MOMENTUM);
    let keep = T::one() - m;
    for u in updates {
        for (r, &b) in store.get_mut(u.mean_id).data_mut().iter_mut().zip(&u.batch_mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in store.get_mut(u.var_id).data_mut().iter_mut().zip(&u.batch_var) {
            *r = keep * *r + m * b;
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_weight(
            format!("{name}.weight"),
            fan_in_uniform(&[out_features, in_features], in_features, rng),
        );
        let bias = bias.then(|| {
            store.add_weight(format!("{name}.bias"), fan_in_uniform(&[out_features], in_features, rng))
        });
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let w = ctx.p(self.weight);
        let b = self.bias.map(|b| ctx.p(b));
        ctx.tape.linear(x, w, b)
    }
}

/// Convolution → batch norm → ReLU, the repeated unit of every network here.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeom,
        spatial: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv::new(store, &format!("{name}.conv"), in_channels, out_channels, geom, spatial, false, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), out_channels),
        }
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let y = self.conv.forward(ctx, x);
        let y = self.bn.forward(ctx, y);
        ctx.tape.relu(y)
    }
}
