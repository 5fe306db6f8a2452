//! Class representatives built from support feature maps.
//!
//! The learned proxy is a softmax-weighted sum of a class's supports. A small
//! shared network scores each support `x_k` against the class sum `s_n`; the
//! softmax of a class's `K` scores gives the weights. Mean and sum operators are
//! kept for comparison.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ConvBnRelu, ConvGeom, Ctx, Float, Linear, ParamStore, Tensor, Var};

/// Hidden width of the weight network.
pub const WEIGHT_NET_WIDTH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProxyKind {
    Learned,
    Mean,
    Sum,
}

impl ProxyKind {
    pub const ALL: [ProxyKind; 3] = [ProxyKind::Learned, ProxyKind::Mean, ProxyKind::Sum];

    pub fn name(self) -> &'static str {
        match self {
            ProxyKind::Learned => "learned",
            ProxyKind::Mean => "mean",
            ProxyKind::Sum => "sum",
        }
    }
}

impl FromStr for ProxyKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        ProxyKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| format!("unknown proxy {s:?} (expected learned, mean or sum)"))
    }
}

impl fmt::Display for ProxyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Scores a support map against its class sum: channel concat → two
/// `[3×3 conv → BN → ReLU]` blocks → global average pool → linear → scalar.
#[derive(Debug, Clone)]
pub struct WeightNet {
    block1: ConvBnRelu,
    block2: ConvBnRelu,
    head: Linear,
}

impl WeightNet {
    pub fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, channels: usize, rng: &mut R) -> Self {
        let geom = ConvGeom::square(3, 1, 1);
        Self {
            block1: ConvBnRelu::new(store, "proxy.block1", 2 * channels, WEIGHT_NET_WIDTH, geom, 2, rng),
            block2: ConvBnRelu::new(store, "proxy.block2", WEIGHT_NET_WIDTH, WEIGHT_NET_WIDTH, geom, 2, rng),
            head: Linear::new(store, "proxy.head", WEIGHT_NET_WIDTH, 1, true, rng),
        }
    }

    /// One logit per row of `x` (`[B, C, H, W]`) against the matching row of `sums`.
    pub fn logits<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var, sums: Var) -> Var {
        let h = ctx.tape.concat_channels(x, sums);
        let h = self.block1.forward(ctx, h);
        let h = self.block2.forward(ctx, h);
        let h = ctx.tape.global_avg_pool(h);
        let out = self.head.forward(ctx, h);
        let rows = ctx.tape.shape(out)[0];
        ctx.tape.reshape(out, &[rows])
    }

    /// Zeroes the output layer so every support gets the same logit.
    pub fn zero_output<T: Float>(&self, store: &mut ParamStore<T>) {
        store.get_mut(self.head.weight).data_mut().iter_mut().for_each(|v| *v = T::zero());
        if let Some(b) = self.head.bias {
            store.get_mut(b).data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

/// Proxy operator plus its parameters, if any.
#[derive(Debug, Clone)]
pub struct ProxyHead {
    pub kind: ProxyKind,
    /// Softmax-normalize learned weights; when false the raw logits are used as weights.
    pub normalize: bool,
    pub weight_net: Option<WeightNet>,
}

/// Tape handles produced by [`ProxyHead::forward`].
#[derive(Debug, Clone)]
pub struct ProxyVars {
    /// `[N, C, H, W]`.
    pub proxies: Var,
    /// `[N, K]`, in canonical support order (see [`ProxyVars::order`]).
    pub weights: Var,
    /// `order[n·K + j]` is the original support row placed at position `j` of class `n`.
    pub order: Vec<usize>,
}

impl ProxyHead {
    pub fn build<T: Float, R: Rng>(kind: ProxyKind, channels: usize, normalize: bool, store: &mut ParamStore<T>, rng: &mut R) -> Self {
        let weight_net = (kind == ProxyKind::Learned).then(|| WeightNet::new(store, channels, rng));
        Self {
            kind,
            normalize,
            weight_net,
        }
    }

    /// Builds `N` proxies from label-major support maps `[N·K, C, H, W]`.
    ///
    /// Supports within a class are first put into a canonical order (lexicographic
    /// on their values), so the result does not depend on support order bit-for-bit.
    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, support: Var, n_way: usize) -> Result<ProxyVars> {
        let shape = ctx.tape.shape(support).to_vec();
        if shape.len() != 4 || n_way == 0 || shape[0] == 0 || shape[0] % n_way != 0 {
            return Err(Error::Grouping(format!("{} support maps cannot form {n_way} equal classes", shape.first().copied().unwrap_or(0))));
        }
        let k = shape[0] / n_way;
        let order = canonical_order(ctx.tape.value(support), k);
        let support = if order.iter().enumerate().all(|(i, &o)| i == o) {
            support
        } else {
            ctx.tape.select_rows(support, &order)
        };

        let uniform = |ctx: &mut Ctx<'_, T>, value: f64| ctx.tape.constant(Tensor::full(&[n_way, k], T::lit(value)));
        let (proxies, weights) = match (self.kind, &self.weight_net) {
            (ProxyKind::Mean, _) => {
                let s = ctx.tape.sum_groups(support, k);
                (ctx.tape.mul_scalar(s, 1.0 / k as f64), uniform(ctx, 1.0 / k as f64))
            }
            (ProxyKind::Sum, _) => (ctx.tape.sum_groups(support, k), uniform(ctx, 1.0)),
            (ProxyKind::Learned, _) if k == 1 && self.normalize => (support, uniform(ctx, 1.0)),
            (ProxyKind::Learned, Some(net)) => {
                let sums = ctx.tape.sum_groups(support, k);
                let rows: Vec<usize> = (0..n_way * k).map(|i| i / k).collect();
                let expanded = ctx.tape.select_rows(sums, &rows);
                let logits = net.logits(ctx, support, expanded);
                let logits = ctx.tape.reshape(logits, &[n_way, k]);
                let w = if self.normalize { ctx.tape.softmax_rows(logits) } else { logits };
                let flat = ctx.tape.reshape(w, &[n_way * k]);
                let scaled = ctx.tape.scale_rows(support, flat);
                (ctx.tape.sum_groups(scaled, k), w)
            }
            (ProxyKind::Learned, None) => unreachable!("learned proxy head without a weight network"),
        };
        Ok(ProxyVars {
            proxies,
            weights,
            order,
        })
    }

    /// Evaluation-mode proxies from per-class lists of feature maps.
    pub fn compute<T: Float>(&self, params: &ParamStore<T>, groups: &[Vec<Tensor<T>>]) -> Result<ClassProxySet<T>> {
        let (support, n) = stack_groups(groups)?;
        let mut ctx = Ctx::eval(params);
        let x = ctx.tape.constant(support);
        let out = self.forward(&mut ctx, x, n)?;
        Ok(ClassProxySet::from_vars(&ctx, &out, n))
    }

    /// Evaluation-mode logit of one support map against a class sum.
    pub fn weight_logit<T: Float>(&self, params: &ParamStore<T>, x: &Tensor<T>, class_sum: &Tensor<T>) -> Result<T> {
        let net = self
            .weight_net
            .as_ref()
            .ok_or_else(|| Error::Grouping(format!("{} proxies have no weight network", self.kind)))?;
        if x.shape() != class_sum.shape() {
            return Err(Error::ShapeMismatch {
                expected: x.shape().to_vec(),
                got: class_sum.shape().to_vec(),
            });
        }
        let mut ctx = Ctx::eval(params);
        let xs = ctx.tape.constant(Tensor::stack(std::slice::from_ref(x)));
        let ss = ctx.tape.constant(Tensor::stack(std::slice::from_ref(class_sum)));
        let l = net.logits(&mut ctx, xs, ss);
        Ok(ctx.tape.value(l).data()[0])
    }
}

/// Proxies and the weights that produced them, in the caller's support order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProxySet<T> {
    pub proxies: Vec<Tensor<T>>,
    /// `weights[n][k]` weights the `k`-th support of class `n` as given.
    pub weights: Vec<Vec<T>>,
}

impl<T: Float> ClassProxySet<T> {
    fn from_vars(ctx: &Ctx<'_, T>, out: &ProxyVars, n: usize) -> Self {
        let p = ctx.tape.value(out.proxies);
        let w = ctx.tape.value(out.weights);
        let k = w.numel() / n;
        let mut weights = vec![vec![T::zero(); k]; n];
        for (pos, &orig) in out.order.iter().enumerate() {
            weights[orig / k][orig % k] = w.data()[pos];
        }
        Self {
            proxies: (0..n).map(|i| Tensor::from_vec(&p.shape()[1..], p.row(i).to_vec())).collect(),
            weights,
        }
    }
}

/// Within each block of `k` rows, orders rows lexicographically by value.
fn canonical_order<T: Float>(x: &Tensor<T>, k: usize) -> Vec<usize> {
    let rows = x.dim(0);
    let mut order: Vec<usize> = (0..rows).collect();
    for block in order.chunks_mut(k) {
        block.sort_by(|&a, &b| {
            x.row(a)
                .iter()
                .zip(x.row(b))
                .map(|(u, v)| u.partial_cmp(v).unwrap_or(Ordering::Equal))
                .find(|o| *o != Ordering::Equal)
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
    }
    order
}

fn stack_groups<T: Float>(groups: &[Vec<Tensor<T>>]) -> Result<(Tensor<T>, usize)> {
    let k = groups.first().map_or(0, Vec::len);
    if k == 0 || groups.iter().any(|g| g.len() != k) {
        let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
        return Err(Error::Grouping(format!("classes must have the same non-zero number of supports, got {sizes:?}")));
    }
    let shape = groups[0][0].shape().to_vec();
    if let Some(bad) = groups.iter().flatten().find(|t| t.shape() != shape.as_slice()) {
        return Err(Error::ShapeMismatch {
            expected: shape,
            got: bad.shape().to_vec(),
        });
    }
    let flat: Vec<Tensor<T>> = groups.iter().flatten().cloned().collect();
    Ok((Tensor::stack(&flat), groups.len()))
}

/// Elementwise sum of one class's support maps.
pub fn class_sum<T: Float>(features: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = features
        .first()
        .ok_or_else(|| Error::Grouping("class sum of zero maps".into()))?;
    let mut acc = first.clone();
    for f in &features[1..] {
        if f.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                expected: first.shape().to_vec(),
                got: f.shape().to_vec(),
            });
        }
        acc.add_assign(f);
    }
    Ok(acc)
}

/// Arithmetic mean of each class's supports; every weight is `1/K`.
pub fn mean_proxy<T: Float>(groups: &[Vec<Tensor<T>>]) -> Result<ClassProxySet<T>> {
    fixed_proxy(groups, ProxyKind::Mean)
}

/// Elementwise sum of each class's supports; every weight is 1.
pub fn sum_proxy<T: Float>(groups: &[Vec<Tensor<T>>]) -> Result<ClassProxySet<T>> {
    fixed_proxy(groups, ProxyKind::Sum)
}

fn fixed_proxy<T: Float>(groups: &[Vec<Tensor<T>>], kind: ProxyKind) -> Result<ClassProxySet<T>> {
    let head = ProxyHead {
        kind,
        normalize: true,
        weight_net: None,
    };
    head.compute(&ParamStore::new(), groups)
}
