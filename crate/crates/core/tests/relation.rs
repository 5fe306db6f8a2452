//! Properties of the relation heads and the nearest-prototype equivalence.

mod common;

use common::{protonet_agreement, rng, uniform};
use proptest::prelude::*;
use proxynet::nn::{Ctx, Float, ParamStore, Tensor};
use proxynet::relation::{cosine_score, episode_loss, euclidean_score, stack_pair, MetricKind, RelationHead, SeBlock};

fn head<T: Float>(kind: MetricKind, c: usize, hw: [usize; 2], seed: u64) -> (RelationHead, ParamStore<T>) {
    let mut store = ParamStore::new();
    let h = RelationHead::build(kind, c, hw, &mut store, &mut rng(seed)).unwrap();
    (h, store)
}

/// Evaluation-mode logits of one query against one proxy.
fn pair_logit<T: Float>(h: &RelationHead, store: &ParamStore<T>, q: &Tensor<T>, p: &Tensor<T>) -> f64 {
    let mut ctx = Ctx::eval(store);
    let qv = ctx.tape.constant(Tensor::stack(std::slice::from_ref(q)));
    let pv = ctx.tape.constant(Tensor::stack(std::slice::from_ref(p)));
    let l = h.logits(&mut ctx, qv, pv).unwrap();
    ctx.tape.value(l).item().as_f64()
}

fn rows(t: &Tensor<f64>) -> Vec<Tensor<f64>> {
    let inner = t.shape()[1..].to_vec();
    (0..t.dim(0)).map(|i| Tensor::from_vec(&inner, t.row(i).to_vec())).collect()
}

fn setups() -> impl Strategy<Value = (usize, usize, usize, usize, u64)> {
    // (queries, classes, channels, side, seed)
    (1usize..=4, 2usize..=5, 1usize..=6, 2usize..=3, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn probabilities_are_normalized(s in setups(), scale in prop::sample::select(vec![1e-3, 1.0, 10.0, 1e3])) {
        let (q, n, c, side, seed) = s;
        let mut r = rng(seed);
        let queries: Tensor<f64> = uniform(&mut r, &[q, c, side, side], scale);
        let proxies: Tensor<f64> = uniform(&mut r, &[n, c, side, side], scale);
        for kind in MetricKind::ALL {
            let (h, store) = head::<f64>(kind, c, [side, side], seed);
            let p = h.classify(&store, &queries, &proxies).unwrap();
            prop_assert_eq!(p.shape(), &[q, n]);
            for i in 0..q {
                prop_assert!(p.row(i).iter().all(|v| (0.0..=1.0).contains(v)));
                prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-6, "{} row {} sums to {}", kind, i, p.row(i).iter().sum::<f64>());
            }
        }
    }

    #[test]
    fn class_permutation_permutes_probabilities_exactly(s in setups(), perm_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let (q, n, c, side, seed) = s;
        let mut r = rng(seed);
        let queries: Tensor<f32> = uniform(&mut r, &[q, c, side, side], 1.0);
        let proxies: Tensor<f32> = uniform(&mut r, &[n, c, side, side], 1.0);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng(perm_seed));
        let permuted = proxies.select_rows(&perm);
        for kind in MetricKind::ALL {
            let (h, store) = head::<f32>(kind, c, [side, side], seed);
            let a = h.classify(&store, &queries, &proxies).unwrap();
            let b = h.classify(&store, &queries, &permuted).unwrap();
            for i in 0..q {
                for (j, &src) in perm.iter().enumerate() {
                    prop_assert_eq!(b.row(i)[j].to_bits(), a.row(i)[src].to_bits(), "{}", kind);
                }
            }
        }
    }

    #[test]
    fn equal_proxies_give_uniform_probabilities(s in setups()) {
        let (q, n, c, side, seed) = s;
        let mut r = rng(seed);
        let queries: Tensor<f64> = uniform(&mut r, &[q, c, side, side], 1.0);
        let one: Tensor<f64> = uniform(&mut r, &[1, c, side, side], 1.0);
        let proxies = one.select_rows(&vec![0; n]);
        for kind in MetricKind::ALL {
            let (h, store) = head::<f64>(kind, c, [side, side], seed);
            let p = h.classify(&store, &queries, &proxies).unwrap();
            prop_assert!(p.data().iter().all(|v| (v - 1.0 / n as f64).abs() <= 1e-6));
        }
    }

    #[test]
    fn probabilities_match_per_pair_recomputation(s in setups()) {
        let (q, n, c, side, seed) = s;
        let mut r = rng(seed);
        let queries: Tensor<f64> = uniform(&mut r, &[q, c, side, side], 1.0);
        let proxies: Tensor<f64> = uniform(&mut r, &[n, c, side, side], 1.0);
        let (qs, ps) = (rows(&queries), rows(&proxies));
        for kind in [MetricKind::ProxyNet3d, MetricKind::FcRelation] {
            let (h, store) = head::<f64>(kind, c, [side, side], seed);
            let p = h.classify(&store, &queries, &proxies).unwrap();
            for (i, qi) in qs.iter().enumerate() {
                let logits: Vec<f64> = ps.iter().map(|pn| pair_logit(&h, &store, qi, pn)).collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for (j, l) in logits.iter().enumerate() {
                    prop_assert!((p.row(i)[j] - (l - m).exp() / z).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn euclidean_matches_scalar_loop(s in setups()) {
        let (_, n, c, side, seed) = s;
        let mut r = rng(seed);
        let query: Tensor<f64> = uniform(&mut r, &[c, side, side], 1.0);
        let proxies: Vec<Tensor<f64>> = (0..n).map(|_| uniform(&mut r, &[c, side, side], 1.0)).collect();
        let scores = euclidean_score(&query, &proxies).unwrap();
        for (p, s) in proxies.iter().zip(&scores) {
            let mut d = 0.0;
            for i in 0..p.numel() {
                let diff = query.data()[i] - p.data()[i];
                d += diff * diff;
            }
            prop_assert!((s + d).abs() <= 1e-5);
        }
        let mut with_self = proxies.clone();
        with_self.push(query.clone());
        let scores = euclidean_score(&query, &with_self).unwrap();
        prop_assert_eq!(scores[n], 0.0);
        prop_assert!(scores[..n].iter().all(|&s| s < 0.0));
    }

    #[test]
    fn loss_matches_direct_formula(q in 1usize..8, n in 2usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let logits: Tensor<f64> = uniform(&mut r, &[q, n], 3.0);
        let probs = proxynet::nn::softmax_rows(&logits);
        let labels: Vec<usize> = (0..q).map(|i| (i * 7 + seed as usize) % n).collect();
        let direct = -labels.iter().enumerate().map(|(i, &y)| probs.row(i)[y].ln()).sum::<f64>() / q as f64;
        prop_assert!((episode_loss(&probs, &labels) - direct).abs() <= 1e-7);
    }
}

#[test]
fn se_output_is_gate_times_input() {
    let c = 8;
    let mut store = ParamStore::<f64>::new();
    let se = SeBlock::new(&mut store, "se", c, &mut rng(3));
    let x: Tensor<f64> = uniform(&mut rng(4), &[2, c, 2, 3, 3], 1.0);
    let mut ctx = Ctx::eval(&store);
    let xv = ctx.tape.constant(x.clone());
    let y = se.forward(&mut ctx, xv);
    let y = ctx.tape.value(y).clone();

    let w1 = store.get(se.squeeze.weight);
    let b1 = store.get(se.squeeze.bias.unwrap());
    let w2 = store.get(se.excite.weight);
    let b2 = store.get(se.excite.bias.unwrap());
    let hidden = w1.dim(0);
    let per_channel = 2 * 3 * 3;
    for b in 0..2 {
        let pooled: Vec<f64> = (0..c)
            .map(|ch| x.row(b)[ch * per_channel..(ch + 1) * per_channel].iter().sum::<f64>() / per_channel as f64)
            .collect();
        let h: Vec<f64> = (0..hidden)
            .map(|o| (b1.data()[o] + (0..c).map(|i| w1.data()[o * c + i] * pooled[i]).sum::<f64>()).max(0.0))
            .collect();
        for ch in 0..c {
            let z = b2.data()[ch] + (0..hidden).map(|i| w2.data()[ch * hidden + i] * h[i]).sum::<f64>();
            let gate = 1.0 / (1.0 + (-z).exp());
            assert!(gate > 0.0 && gate < 1.0);
            for k in ch * per_channel..(ch + 1) * per_channel {
                assert!((y.row(b)[k] - gate * x.row(b)[k]).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn saturated_gates_are_the_identity() {
    let mut store = ParamStore::<f64>::new();
    let se = SeBlock::new(&mut store, "se", 4, &mut rng(5));
    store.get_mut(se.excite.weight).data_mut().fill(0.0);
    store.get_mut(se.excite.bias.unwrap()).data_mut().fill(1e3);
    let x: Tensor<f64> = uniform(&mut rng(6), &[3, 4, 2, 2, 2], 5.0);
    let mut ctx = Ctx::eval(&store);
    let xv = ctx.tape.constant(x.clone());
    let y = se.forward(&mut ctx, xv);
    assert_eq!(ctx.tape.value(y).data(), x.data());
}

#[test]
fn pair_stacks_are_order_aware() {
    let mut r = rng(7);
    let a: Tensor<f32> = uniform(&mut r, &[64, 5, 5], 1.0);
    let b: Tensor<f32> = uniform(&mut r, &[64, 5, 5], 1.0);
    let ab = stack_pair(&a, &b).unwrap();
    let ba = stack_pair(&b, &a).unwrap();
    assert_eq!(ab.shape(), &[64, 2, 5, 5]);
    for ch in 0..64 {
        let slab = |t: &Tensor<f32>, d: usize| t.data()[(ch * 2 + d) * 25..(ch * 2 + d + 1) * 25].to_vec();
        assert_eq!(slab(&ab, 0), a.data()[ch * 25..(ch + 1) * 25]);
        assert_eq!(slab(&ab, 0), slab(&ba, 1));
        assert_eq!(slab(&ab, 1), slab(&ba, 0));
    }
    let (h, store) = head::<f64>(MetricKind::ProxyNet3d, 8, [3, 3], 8);
    let q: Tensor<f64> = uniform(&mut r, &[8, 3, 3], 1.0);
    let p: Tensor<f64> = uniform(&mut r, &[8, 3, 3], 1.0);
    assert_ne!(pair_logit(&h, &store, &q, &p), pair_logit(&h, &store, &p, &q));
}

#[test]
fn three_d_scores_stay_finite_for_extreme_maps() {
    let (h, store) = head::<f32>(MetricKind::ProxyNet3d, 16, [5, 5], 9);
    for v in [1e3f32, -1e3] {
        let mut r = rng(10);
        let noise: Tensor<f32> = uniform(&mut r, &[3, 16, 5, 5], 1.0);
        let q = noise.map(|x| v + x);
        let p = noise.map(|x| v * x);
        let mut ctx = Ctx::eval(&store);
        let (qv, pv) = (ctx.tape.constant(q), ctx.tape.constant(p));
        let l = h.logits(&mut ctx, qv, pv).unwrap();
        assert!(ctx.tape.value(l).is_finite());
        assert_eq!(h.classify(&store, &noise, &noise).unwrap().shape(), &[3, 3]);
    }
}

#[test]
fn cosine_is_scale_invariant() {
    let x: Tensor<f64> = uniform(&mut rng(11), &[4, 3, 3], 1.0);
    let s = cosine_score(&x, &[x.map(|v| 2.0 * v)]).unwrap();
    assert!((s[0] - 1.0).abs() < 1e-12);
}

#[test]
fn mean_euclidean_is_nearest_prototype() {
    let (agree, total) = protonet_agreement(100, 12);
    assert_eq!(agree, total);
}
