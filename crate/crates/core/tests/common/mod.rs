//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use proxynet::backbone::{BackboneConfig, BackboneKind};
use proxynet::data::{generate_synthetic, AugmentationPolicy, Dataset, SyntheticSpec};
use proxynet::eval::confidence_interval;
use proxynet::model::{ModelConfig, ProxyNet};
use proxynet::nn::{Ctx, Mode, ParamStore, Tensor, Var};
use proxynet::proxy::{ProxyKind, WeightNet};
use proxynet::relation::{MetricKind, Relation3d, SeBlock};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform entries in `[-scale, scale]`.
pub fn uniform<T: proxynet::nn::Float>(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::lit(rng.gen_range(-scale..=scale))).collect())
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel: f64,
    pub checked: usize,
    /// Name and index of the entry with the largest relative error.
    pub worst: String,
}

impl GradReport {
    fn merge(&mut self, other: GradReport) {
        if other.max_rel > self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst;
        }
        self.checked += other.checked;
    }
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`; the floor keeps entries whose
/// true gradient is zero from dividing by rounding noise.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub const FD_STEP: f64 = 1e-5;

/// Compares reverse-mode gradients of the scalar built by `f` with central differences.
///
/// `f` receives a training-mode context and one tape input per tensor in `inputs`.
/// Up to `per_tensor` entries are checked in every trainable parameter whose name
/// starts with one of `prefixes`, and in every input. Central differences at
/// `h = 1e-5` carry rounding noise near `1e-11`, far below the `1e-6` floor.
pub fn grad_check(
    params: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    prefixes: &[&str],
    per_tensor: usize,
    seed: u64,
    f: &dyn Fn(&mut Ctx<'_, f64>, &[Var]) -> Var,
) -> GradReport {
    let eval = |p: &ParamStore<f64>, xs: &[Tensor<f64>]| -> f64 {
        let mut ctx = Ctx::new(p, Mode::Train, false);
        let vars: Vec<Var> = xs.iter().map(|x| ctx.tape.input(x.clone())).collect();
        let out = f(&mut ctx, &vars);
        ctx.tape.value(out).item()
    };
    let (param_grads, input_grads) = {
        let mut ctx = Ctx::new(params, Mode::Train, true);
        let vars: Vec<Var> = inputs.iter().map(|x| ctx.tape.input(x.clone())).collect();
        let out = f(&mut ctx, &vars);
        assert_eq!(ctx.tape.shape(out), &[] as &[usize], "grad_check needs a scalar output");
        let grads = ctx.tape.backward(out);
        let pg: Vec<Option<Tensor<f64>>> = params.iter().map(|(id, _)| grads.param(id).cloned()).collect();
        let ig: Vec<Option<Tensor<f64>>> = vars.iter().map(|v| grads.wrt(*v).cloned()).collect();
        (pg, ig)
    };
    let mut rng = rng(seed);
    let mut report = GradReport {
        max_rel: 0.0,
        checked: 0,
        worst: String::new(),
    };
    let pick = |n: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        if n <= per_tensor {
            (0..n).collect()
        } else {
            sample(rng, n, per_tensor).into_vec()
        }
    };
    for (slot, (id, p)) in params.iter().enumerate() {
        if !p.is_trainable() || !prefixes.iter().any(|pre| p.name.starts_with(pre)) {
            continue;
        }
        let zeros = Tensor::zeros(p.value.shape());
        let analytic = param_grads[slot].as_ref().unwrap_or(&zeros);
        for i in pick(p.value.numel(), &mut rng) {
            let mut plus = params.clone();
            plus.get_mut(id).data_mut()[i] += FD_STEP;
            let mut minus = params.clone();
            minus.get_mut(id).data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus, inputs) - eval(&minus, inputs)) / (2.0 * FD_STEP);
            report.merge(GradReport {
                max_rel: rel_error(analytic.data()[i], numeric),
                checked: 1,
                worst: format!("{}[{i}] analytic {:.6e} numeric {numeric:.6e}", p.name, analytic.data()[i]),
            });
        }
    }
    for (k, x) in inputs.iter().enumerate() {
        let zeros = Tensor::zeros(x.shape());
        let analytic = input_grads[k].as_ref().unwrap_or(&zeros);
        for i in pick(x.numel(), &mut rng) {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(params, &plus) - eval(params, &minus)) / (2.0 * FD_STEP);
            report.merge(GradReport {
                max_rel: rel_error(analytic.data()[i], numeric),
                checked: 1,
                worst: format!("input{k}[{i}] analytic {:.6e} numeric {numeric:.6e}", analytic.data()[i]),
            });
        }
    }
    report
}

/// Random-coefficient dot product with a `[B]` vector, to turn it into a scalar.
pub fn project(ctx: &mut Ctx<'_, f64>, v: Var, seed: u64) -> Var {
    let n = ctx.tape.shape(v)[0];
    let coeffs = uniform::<f64>(&mut rng(seed), &[n], 1.0);
    let w = ctx.tape.constant(coeffs);
    let col = ctx.tape.reshape(v, &[n, 1]);
    let scaled = ctx.tape.scale_rows(col, w);
    ctx.tape.sum_all(scaled)
}

/// The desk-scale learning setup: 32 px crops of 36 px synthetic images.
pub fn desk_spec(split: [usize; 3]) -> SyntheticSpec {
    SyntheticSpec {
        n_classes: split.iter().sum(),
        samples_per_class: 40,
        image_size: 36,
        noise_std: 0.0,
        jitter: 1.0,
        split,
    }
}

pub fn desk_policy() -> AugmentationPolicy {
    AugmentationPolicy {
        resize_to: 36,
        crop_to: 32,
        ..Default::default()
    }
}

pub fn desk_dataset(split: [usize; 3], seed: u64) -> Dataset {
    Dataset::from_synthetic(generate_synthetic(&desk_spec(split), seed).unwrap(), desk_policy())
}

/// Gradient checks of the weight network, SE block, and 3D scorer on random inputs.
pub fn component_grad_checks() -> Vec<(String, GradReport)> {
    let mut out = Vec::new();

    let mut store = ParamStore::<f64>::new();
    let net = WeightNet::new(&mut store, 3, &mut rng(1));
    let mut r = rng(2);
    let x: Tensor<f64> = uniform(&mut r, &[4, 3, 3, 3], 1.0);
    let s: Tensor<f64> = uniform(&mut r, &[4, 3, 3, 3], 2.0);
    let report = grad_check(&store, &[x, s], &["proxy."], 40, 3, &|ctx, v| {
        let l = net.logits(ctx, v[0], v[1]);
        project(ctx, l, 4)
    });
    out.push(("weight network".to_string(), report));

    let mut store = ParamStore::<f64>::new();
    let se = SeBlock::new(&mut store, "se", 8, &mut rng(5));
    let x: Tensor<f64> = uniform(&mut rng(6), &[3, 8, 2, 3, 3], 1.0);
    let n = x.numel();
    let report = grad_check(&store, &[x], &["se."], 100, 7, &|ctx, v| {
        let y = se.forward(ctx, v[0]);
        let flat = ctx.tape.reshape(y, &[n]);
        project(ctx, flat, 8)
    });
    out.push(("SE block".to_string(), report));

    let mut store = ParamStore::<f64>::new();
    let scorer = Relation3d::new(&mut store, 4, &mut rng(9));
    for (p, seed) in [(1usize, 10u64), (3, 11)] {
        let x: Tensor<f64> = uniform(&mut rng(seed), &[p, 4, 2, 3, 3], 1.0);
        let report = grad_check(&store, &[x], &["relation."], 40, seed, &|ctx, v| {
            let s = scorer.score(ctx, v[0]);
            project(ctx, s, 12)
        });
        out.push((format!("3D scorer ({p} stack{})", if p == 1 { "" } else { "s" }), report));
    }
    out
}

pub fn tiny_model(proxy: ProxyKind, metric: MetricKind, seed: u64) -> ProxyNet<f64> {
    let cfg = ModelConfig {
        backbone: BackboneConfig {
            kind: BackboneKind::Conv4,
            width: 4,
        },
        proxy,
        metric,
        image_size: 32,
        ..Default::default()
    };
    ProxyNet::<f32>::build(cfg, seed).unwrap().cast()
}

/// Cross-entropy of a 2-way 2-shot episode with two queries per class.
pub fn episode_grad_check(model: &ProxyNet<f64>, prefixes: &[&str], seed: u64) -> GradReport {
    let mut r = rng(seed);
    let support: Tensor<f64> = uniform(&mut r, &[4, 3, 32, 32], 1.0);
    let queries: Tensor<f64> = uniform(&mut r, &[4, 3, 32, 32], 1.0);
    let labels = [0, 0, 1, 1];
    grad_check(&model.params, &[], prefixes, 12, seed, &|ctx, _| {
        let logits = model.episode_logits(ctx, support.clone(), queries.clone(), 2).unwrap();
        ctx.tape.cross_entropy(logits, &labels)
    })
}

/// Parameter groups of the full model that the end-to-end check must reach.
pub const MODEL_GROUPS: [&str; 5] = ["backbone.", "proxy.", "relation.se.", "relation.block", "relation.reduce"];

/// Index of the nearest class mean by squared distance; ties go to the lowest label.
fn nearest_mean(support: &Tensor<f64>, query: &[f64], n: usize, k: usize) -> usize {
    let len = query.len();
    let mut best = (f64::INFINITY, 0);
    for class in 0..n {
        let mut d = 0.0;
        for i in 0..len {
            let mean = (0..k).map(|j| support.row(class * k + j)[i]).sum::<f64>() / k as f64;
            d += (query[i] - mean) * (query[i] - mean);
        }
        if d < best.0 {
            best = (d, class);
        }
    }
    best.1
}

/// Agreement of the mean/Euclidean model with a direct nearest-prototype classifier,
/// as `(agreeing queries, total queries)` over `episodes` random feature episodes.
pub fn protonet_agreement(episodes: usize, seed: u64) -> (usize, usize) {
    let cfg = ModelConfig {
        backbone: BackboneConfig {
            kind: BackboneKind::Conv4,
            width: 6,
        },
        proxy: ProxyKind::Mean,
        metric: MetricKind::Euclidean,
        image_size: 48,
        ..Default::default()
    };
    let model = ProxyNet::<f32>::build(cfg, seed).unwrap().cast::<f64>();
    let shape = model.feature_shape();
    let mut r = rng(seed);
    let (mut agree, mut total) = (0, 0);
    for e in 0..episodes {
        let (n, k, t) = (2 + e % 4, 1 + e % 5, 1 + e % 3);
        let support: Tensor<f64> = uniform(&mut r, &[n * k, shape[0], shape[1], shape[2]], 1.0);
        let queries: Tensor<f64> = uniform(&mut r, &[n * t, shape[0], shape[1], shape[2]], 1.0);
        let predicted = model.predict_from_features(&support, &queries, n).unwrap();
        for (i, p) in predicted.iter().enumerate() {
            total += 1;
            agree += usize::from(*p == nearest_mean(&support, queries.row(i), n, k));
        }
    }
    (agree, total)
}

/// Two-pass textbook interval: `1.96 · sqrt(Σ(x − x̄)² / (n − 1)) / sqrt(n)`.
pub fn interval_by_hand(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, 1.96 * (ss / (n - 1.0)).sqrt() / n.sqrt())
}

/// Share of repetitions whose interval covers `p`, each with `tasks` tasks of `queries` Bernoulli(p) queries.
pub fn coverage(p: f64, queries: u64, tasks: usize, reps: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let per_task = Binomial::new(queries, p).unwrap();
    let mut covered = 0;
    for _ in 0..reps {
        let acc: Vec<f64> = (0..tasks).map(|_| per_task.sample(&mut r) as f64 / queries as f64).collect();
        let (m, h) = confidence_interval(&acc).unwrap();
        covered += usize::from((m - p).abs() <= h);
    }
    covered as f64 / reps as f64
}
