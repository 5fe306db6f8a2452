//! Reverse-mode gradients against central finite differences in `f64`.

mod common;

use common::{component_grad_checks, episode_grad_check, tiny_model, GradReport, MODEL_GROUPS};
use proxynet::proxy::ProxyKind;
use proxynet::relation::MetricKind;

const TOL: f64 = 1e-4;

fn assert_close(what: &str, r: &GradReport) {
    assert!(r.checked > 0, "{what}: nothing checked");
    assert!(r.max_rel < TOL, "{what}: max relative error {:.3e} at {}", r.max_rel, r.worst);
    eprintln!("{what}: {} entries, max relative error {:.2e}", r.checked, r.max_rel);
}

#[test]
fn weight_network_se_block_and_scorer() {
    let reports = component_grad_checks();
    assert_eq!(reports.len(), 4);
    for (what, r) in &reports {
        assert_close(what, r);
    }
}

#[test]
fn end_to_end_episode_loss_covers_every_parameter_group() {
    let model = tiny_model(ProxyKind::Learned, MetricKind::ProxyNet3d, 13);
    for g in MODEL_GROUPS {
        assert!(model.params.trainable_count(g) > 0, "no parameters under {g}");
    }
    assert_close("end-to-end", &episode_grad_check(&model, &MODEL_GROUPS, 14));
}

#[test]
fn baseline_heads_end_to_end() {
    for (proxy, metric) in [
        (ProxyKind::Mean, MetricKind::Euclidean),
        (ProxyKind::Sum, MetricKind::Cosine),
        (ProxyKind::Learned, MetricKind::FcRelation),
    ] {
        let model = tiny_model(proxy, metric, 15);
        let r = episode_grad_check(&model, &["backbone.", "proxy.", "relation."], 16);
        assert_close(&format!("{proxy}/{metric}"), &r);
    }
}
