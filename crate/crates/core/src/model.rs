//! The full classifier: backbone, proxy head, and relation head sharing one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::episode::derive_seed;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Float, ParamStore, Tensor, Var};
use crate::proxy::{ProxyHead, ProxyKind, ProxyVars};
use crate::relation::{MetricKind, RelationHead};

/// Order in which the relation head stacks its two inputs.
pub const STACKING_ORDER: &str = "query,proxy";

/// Images embedded per forward pass when building feature caches.
const EMBED_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub proxy: ProxyKind,
    pub metric: MetricKind,
    /// Softmax-normalize learned proxy weights.
    pub normalize_weights: bool,
    /// Side length of the square input images.
    pub image_size: usize,
    pub stacking_order: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            proxy: ProxyKind::Learned,
            metric: MetricKind::ProxyNet3d,
            normalize_weights: true,
            image_size: 84,
            stacking_order: STACKING_ORDER.into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProxyNet<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub backbone: Backbone,
    pub proxy: ProxyHead,
    pub relation: RelationHead,
}

impl<T: Float> ProxyNet<T> {
    /// Builds and initializes a model; initialization is a function of `seed` only.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.stacking_order != STACKING_ORDER {
            return Err(Error::CheckpointMismatch(format!(
                "unsupported stacking order {:?} (expected {STACKING_ORDER:?})",
                config.stacking_order
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0]));
        let mut params = ParamStore::new();
        let backbone = Backbone::build(config.backbone, &mut params, &mut rng)?;
        let [c, h, w] = backbone.output_shape(config.image_size)?;
        let proxy = ProxyHead::build(config.proxy, c, config.normalize_weights, &mut params, &mut rng);
        let relation = RelationHead::build(config.metric, c, [h, w], &mut params, &mut rng)?;
        Ok(Self {
            config,
            params,
            backbone,
            proxy,
            relation,
        })
    }

    /// Feature-map shape `[C, h, w]` for this model's input size.
    pub fn feature_shape(&self) -> [usize; 3] {
        self.backbone
            .output_shape(self.config.image_size)
            .expect("validated at build time")
    }

    /// Query-by-class logits `[Q, N]` from label-major support features and query features.
    pub fn head_logits(&self, ctx: &mut Ctx<'_, T>, support: Var, queries: Var, n_way: usize) -> Result<(Var, ProxyVars)> {
        let proxies = self.proxy.forward(ctx, support, n_way)?;
        let logits = self.relation.logits(ctx, queries, proxies.proxies)?;
        Ok((logits, proxies))
    }

    /// Embeds support and query images in one batch and scores the queries.
    pub fn episode_logits(&self, ctx: &mut Ctx<'_, T>, support: Tensor<T>, queries: Tensor<T>, n_way: usize) -> Result<Var> {
        let (ns, nq) = (support.dim(0), queries.dim(0));
        let images = ctx.tape.constant(Tensor::stack_batches(&[support, queries]));
        let feats = self.backbone.embed(ctx, images)?;
        let s = ctx.tape.select_rows(feats, &(0..ns).collect::<Vec<_>>());
        let q = ctx.tape.select_rows(feats, &(ns..ns + nq).collect::<Vec<_>>());
        Ok(self.head_logits(ctx, s, q, n_way)?.0)
    }

    /// Evaluation-mode embeddings of `[B, 3, S, S]` images, computed in chunks.
    pub fn embed_eval(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let b = images.dim(0);
        let mut parts = Vec::new();
        for start in (0..b).step_by(EMBED_CHUNK) {
            let rows: Vec<usize> = (start..(start + EMBED_CHUNK).min(b)).collect();
            let mut ctx = Ctx::eval(&self.params);
            let x = ctx.tape.constant(images.select_rows(&rows));
            let y = self.backbone.embed(&mut ctx, x)?;
            parts.push(ctx.tape.take(y));
        }
        Ok(Tensor::stack_batches(&parts))
    }

    /// Evaluation-mode logits `[Q, N]` from precomputed features.
    pub fn logits_from_features(&self, support: &Tensor<T>, queries: &Tensor<T>, n_way: usize) -> Result<Tensor<T>> {
        let mut ctx = Ctx::eval(&self.params);
        let s = ctx.tape.constant(support.clone());
        let q = ctx.tape.constant(queries.clone());
        let (l, _) = self.head_logits(&mut ctx, s, q, n_way)?;
        Ok(ctx.tape.take(l))
    }

    /// Argmax class per query; ties go to the lowest label.
    pub fn predict_from_features(&self, support: &Tensor<T>, queries: &Tensor<T>, n_way: usize) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits_from_features(support, queries, n_way)?))
    }

    /// Same model with parameters converted to another precision.
    pub fn cast<U: Float>(&self) -> ProxyNet<U> {
        ProxyNet {
            config: self.config.clone(),
            params: self.params.cast(),
            backbone: self.backbone.clone(),
            proxy: self.proxy.clone(),
            relation: self.relation.clone(),
        }
    }
}

/// Index of the largest entry of each row; the first wins on ties.
pub fn argmax_rows<T: Float>(x: &Tensor<T>) -> Vec<usize> {
    let n = x.dim(1);
    x.data()
        .chunks(n)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
