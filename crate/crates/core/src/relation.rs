//! Scoring queries against class proxies.
//!
//! The learned metric stacks a query map and a proxy map along a new depth axis
//! (query at depth 0, proxy at depth 1), recalibrates channels with a
//! squeeze-and-excitation gate, and reduces the stack to one logit with two 3D
//! convolution blocks, a `1×1×1` convolution, and global average pooling. Every
//! (query, proxy) pair is scored by the same network; a softmax over the `N`
//! scores of a query gives class probabilities.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax_rows, Conv, ConvBnRelu, ConvGeom, Ctx, Float, Linear, ParamStore, Tensor, Var};

/// Output channels of the two 3D convolution blocks.
pub const RELATION_WIDTHS: [usize; 2] = [16, 8];
/// Squeeze-and-excitation bottleneck ratio.
pub const SE_RATIO: usize = 4;
/// Hidden width of the fully connected relation baseline.
pub const FC_HIDDEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    #[serde(rename = "proxynet3d")]
    ProxyNet3d,
    Euclidean,
    Cosine,
    FcRelation,
}

impl MetricKind {
    pub const ALL: [MetricKind; 4] = [MetricKind::ProxyNet3d, MetricKind::Euclidean, MetricKind::Cosine, MetricKind::FcRelation];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::ProxyNet3d => "proxynet3d",
            MetricKind::Euclidean => "euclidean",
            MetricKind::Cosine => "cosine",
            MetricKind::FcRelation => "fc_relation",
        }
    }
}

impl FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        MetricKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| format!("unknown metric {s:?} (expected proxynet3d, euclidean, cosine or fc_relation)"))
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Channel gating: global average pool → linear `C→C/r` → ReLU → linear `C/r→C` → sigmoid.
#[derive(Debug, Clone)]
pub struct SeBlock {
    pub squeeze: Linear,
    pub excite: Linear,
}

impl SeBlock {
    pub fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut R) -> Self {
        let hidden = (channels / SE_RATIO).max(1);
        Self {
            squeeze: Linear::new(store, &format!("{name}.squeeze"), channels, hidden, true, rng),
            excite: Linear::new(store, &format!("{name}.excite"), hidden, channels, true, rng),
        }
    }

    /// Gates in `(0, 1)`, shape `[B, C]`.
    pub fn gates<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let pooled = ctx.tape.global_avg_pool(x);
        let h = self.squeeze.forward(ctx, pooled);
        let h = ctx.tape.relu(h);
        let h = self.excite.forward(ctx, h);
        ctx.tape.sigmoid(h)
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let g = self.gates(ctx, x);
        ctx.tape.channel_gate(x, g)
    }
}

/// The learned 3D-convolutional pair scorer.
#[derive(Debug, Clone)]
pub struct Relation3d {
    pub se: SeBlock,
    block1: ConvBnRelu,
    block2: ConvBnRelu,
    reduce: Conv,
}

impl Relation3d {
    pub fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, channels: usize, rng: &mut R) -> Self {
        let geom = ConvGeom::cube(3, 1, 1);
        let [w1, w2] = RELATION_WIDTHS;
        Self {
            se: SeBlock::new(store, "relation.se", channels, rng),
            block1: ConvBnRelu::new(store, "relation.block1", channels, w1, geom, 3, rng),
            block2: ConvBnRelu::new(store, "relation.block2", w1, w2, geom, 3, rng),
            reduce: Conv::new(store, "relation.reduce", w2, 1, ConvGeom::cube(1, 1, 0), 3, true, rng),
        }
    }

    /// One logit per stack: `[P, C, 2, H, W] → [P]`.
    pub fn score<T: Float>(&self, ctx: &mut Ctx<'_, T>, stacks: Var) -> Var {
        let h = self.se.forward(ctx, stacks);
        let h = self.block1.forward(ctx, h);
        let h = self.block2.forward(ctx, h);
        let h = self.reduce.forward(ctx, h);
        let h = ctx.tape.global_avg_pool(h);
        let p = ctx.tape.shape(h)[0];
        ctx.tape.reshape(h, &[p])
    }
}

/// Baseline scorer on channel-concatenated pairs: `3×3 conv → BN → ReLU → 2×2 max-pool`,
/// then two fully connected layers.
#[derive(Debug, Clone)]
pub struct FcRelation {
    conv: ConvBnRelu,
    fc1: Linear,
    fc2: Linear,
}

impl FcRelation {
    pub fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, channels: usize, map_hw: [usize; 2], rng: &mut R) -> Result<Self> {
        let (h, w) = (map_hw[0] / 2, map_hw[1] / 2);
        if h == 0 || w == 0 {
            return Err(Error::ShapeMismatch {
                expected: vec![channels, 2, 2],
                got: vec![channels, map_hw[0], map_hw[1]],
            });
        }
        Ok(Self {
            conv: ConvBnRelu::new(store, "relation.block1", 2 * channels, channels, ConvGeom::square(3, 1, 1), 2, rng),
            fc1: Linear::new(store, "relation.fc1", channels * h * w, FC_HIDDEN, true, rng),
            fc2: Linear::new(store, "relation.fc2", FC_HIDDEN, 1, true, rng),
        })
    }

    pub fn score<T: Float>(&self, ctx: &mut Ctx<'_, T>, pairs: Var) -> Var {
        let h = self.conv.forward(ctx, pairs);
        let h = ctx.tape.max_pool2(h);
        let s = ctx.tape.shape(h).to_vec();
        let h = ctx.tape.reshape(h, &[s[0], s[1..].iter().product()]);
        let h = self.fc1.forward(ctx, h);
        let h = ctx.tape.relu(h);
        let h = self.fc2.forward(ctx, h);
        ctx.tape.reshape(h, &[s[0]])
    }
}

/// A metric plus its parameters, if any.
#[derive(Debug, Clone)]
pub struct RelationHead {
    pub kind: MetricKind,
    net3d: Option<Relation3d>,
    fc: Option<FcRelation>,
}

impl RelationHead {
    /// `map_hw` is the spatial size of the feature maps being compared.
    pub fn build<T: Float, R: Rng>(kind: MetricKind, channels: usize, map_hw: [usize; 2], store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        Ok(Self {
            kind,
            net3d: (kind == MetricKind::ProxyNet3d).then(|| Relation3d::new(store, channels, rng)),
            fc: match kind {
                MetricKind::FcRelation => Some(FcRelation::new(store, channels, map_hw, rng)?),
                _ => None,
            },
        })
    }

    pub fn net3d(&self) -> Option<&Relation3d> {
        self.net3d.as_ref()
    }

    /// Scores every query `[Q, C, H, W]` against every proxy `[N, C, H, W]`: `[Q, N]`.
    pub fn logits<T: Float>(&self, ctx: &mut Ctx<'_, T>, queries: Var, proxies: Var) -> Result<Var> {
        let (qs, ps) = (ctx.tape.shape(queries).to_vec(), ctx.tape.shape(proxies).to_vec());
        if qs.len() != 4 || qs[1..] != ps[1..] {
            return Err(Error::ShapeMismatch { expected: qs, got: ps });
        }
        let (q, n) = (qs[0], ps[0]);
        let scores = match self.kind {
            MetricKind::Euclidean => return Ok(ctx.tape.neg_sq_dist(queries, proxies)),
            MetricKind::Cosine => {
                for v in [queries, proxies] {
                    let t = ctx.tape.value(v);
                    if (0..t.dim(0)).any(|r| t.row(r).iter().all(|x| *x == T::zero())) {
                        return Err(Error::ZeroVector);
                    }
                }
                return Ok(ctx.tape.cosine_sim(queries, proxies));
            }
            MetricKind::ProxyNet3d => {
                let stacks = ctx.tape.pair_stack(queries, proxies);
                self.net3d.as_ref().expect("3D relation parameters").score(ctx, stacks)
            }
            MetricKind::FcRelation => {
                let pairs = ctx.tape.pair_concat(queries, proxies);
                self.fc.as_ref().expect("fc relation parameters").score(ctx, pairs)
            }
        };
        Ok(ctx.tape.reshape(scores, &[q, n]))
    }

    /// Evaluation-mode class probabilities `[Q, N]`.
    pub fn classify<T: Float>(&self, params: &ParamStore<T>, queries: &Tensor<T>, proxies: &Tensor<T>) -> Result<Tensor<T>> {
        let mut ctx = Ctx::eval(params);
        let q = ctx.tape.constant(queries.clone());
        let p = ctx.tape.constant(proxies.clone());
        let l = self.logits(&mut ctx, q, p)?;
        Ok(softmax_rows(ctx.tape.value(l)))
    }
}

/// Stacks a query map and a proxy map `[C, H, W]` into `[C, 2, H, W]` (query at depth 0).
pub fn stack_pair<T: Float>(query: &Tensor<T>, proxy: &Tensor<T>) -> Result<Tensor<T>> {
    if query.shape() != proxy.shape() || query.rank() != 3 {
        return Err(Error::ShapeMismatch {
            expected: query.shape().to_vec(),
            got: proxy.shape().to_vec(),
        });
    }
    let (c, h, w) = (query.dim(0), query.dim(1), query.dim(2));
    let plane = h * w;
    let mut out = Vec::with_capacity(2 * query.numel());
    for ch in 0..c {
        out.extend_from_slice(&query.data()[ch * plane..(ch + 1) * plane]);
        out.extend_from_slice(&proxy.data()[ch * plane..(ch + 1) * plane]);
    }
    Ok(Tensor::from_vec(&[c, 2, h, w], out))
}

fn check_same<T: Float>(query: &Tensor<T>, proxies: &[Tensor<T>]) -> Result<()> {
    match proxies.iter().find(|p| p.shape() != query.shape()) {
        Some(p) => Err(Error::ShapeMismatch {
            expected: query.shape().to_vec(),
            got: p.shape().to_vec(),
        }),
        None => Ok(()),
    }
}

/// Negative squared Euclidean distance from `query` to each proxy.
pub fn euclidean_score<T: Float>(query: &Tensor<T>, proxies: &[Tensor<T>]) -> Result<Vec<T>> {
    check_same(query, proxies)?;
    Ok(proxies
        .iter()
        .map(|p| -query.data().iter().zip(p.data()).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>())
        .collect())
}

/// Cosine similarity between `query` and each proxy.
pub fn cosine_score<T: Float>(query: &Tensor<T>, proxies: &[Tensor<T>]) -> Result<Vec<T>> {
    check_same(query, proxies)?;
    let norm = |t: &Tensor<T>| t.data().iter().map(|&v| v * v).sum::<T>().sqrt();
    let qn = norm(query);
    if qn == T::zero() {
        return Err(Error::ZeroVector);
    }
    proxies
        .iter()
        .map(|p| {
            let pn = norm(p);
            if pn == T::zero() {
                return Err(Error::ZeroVector);
            }
            Ok(query.data().iter().zip(p.data()).map(|(&a, &b)| a * b).sum::<T>() / (qn * pn))
        })
        .collect()
}

/// Mean over queries of `−ln p(true class)` from probabilities `[Q, N]`.
///
/// Probabilities are floored at the smallest positive normal value so a
/// confidently wrong prediction gives a large finite loss rather than infinity.
pub fn episode_loss<T: Float>(probabilities: &Tensor<T>, labels: &[usize]) -> T {
    let n = probabilities.dim(1);
    let total: T = probabilities
        .data()
        .chunks(n)
        .zip(labels)
        .map(|(row, &y)| -row[y].max(T::min_positive_value()).ln())
        .sum();
    total / T::lit(labels.len() as f64)
}
