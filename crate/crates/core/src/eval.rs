//! Meta-test evaluation, confidence intervals, and parameter audits.

use std::collections::HashMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::episode::{derive_seed, sample_episode, ClassIndex, Episode, SampleId, TaskSpec};
use crate::error::{Error, Result};
use crate::model::ProxyNet;
use crate::nn::{Float, ParamStore, Tensor};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.96;

/// Trainable-parameter total of the reference implementation's full model.
pub const REFERENCE_TOTAL: usize = 165_171;

/// Anything that labels the queries of an episode.
pub trait EpisodeClassifier: Sync {
    /// One predicted label per query, in `episode.query` order.
    fn predict(&self, episode: &Episode) -> Result<Vec<usize>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean: f64,
    pub ci95: f64,
    pub n_tasks: usize,
    pub spec: TaskSpec,
    pub seed: u64,
    pub per_task: Vec<f64>,
}

impl EvalReport {
    /// `mean ± ci` in percent with two decimals.
    pub fn percent(&self) -> String {
        format!("{:.2} ± {:.2}", 100.0 * self.mean, 100.0 * self.ci95)
    }
}

/// Mean and `1.96 · s / √n` half-width, with `s` the `n − 1` sample standard deviation.
pub fn confidence_interval(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::InsufficientTasks(n));
    }
    // Deviations from the first value keep all-equal inputs exact.
    let shift = values[0];
    let offset = values.iter().map(|v| v - shift).sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - shift - offset).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((shift + offset, Z95 * var.sqrt() / (n as f64).sqrt()))
}

/// Samples `n_tasks` episodes from `index` (task `i` uses a stream derived from
/// `(seed, i)`) and averages per-task query accuracy.
pub fn evaluate<C: EpisodeClassifier + ?Sized>(classifier: &C, index: &ClassIndex, spec: TaskSpec, n_tasks: usize, seed: u64) -> Result<EvalReport> {
    let episodes = sample_tasks(index, spec, n_tasks, seed)?;
    let per_task = episodes
        .par_iter()
        .map(|ep| {
            let pred = classifier.predict(ep)?;
            let labels = ep.query_labels();
            if pred.len() != labels.len() {
                return Err(Error::ShapeMismatch {
                    expected: vec![labels.len()],
                    got: vec![pred.len()],
                });
            }
            let correct = pred.iter().zip(&labels).filter(|(p, y)| p == y).count();
            Ok(correct as f64 / labels.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (mean, ci95) = confidence_interval(&per_task)?;
    Ok(EvalReport {
        mean,
        ci95,
        n_tasks,
        spec,
        seed,
        per_task,
    })
}

/// The episodes [`evaluate`] would draw.
pub fn sample_tasks(index: &ClassIndex, spec: TaskSpec, n_tasks: usize, seed: u64) -> Result<Vec<Episode>> {
    (0..n_tasks)
        .map(|t| sample_episode(index, spec, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[t as u64]))))
        .collect()
}

/// A model with every relevant image embedded once in evaluation mode.
pub struct FeatureClassifier<'a, T> {
    model: &'a ProxyNet<T>,
    features: Tensor<T>,
    rows: HashMap<SampleId, usize>,
}

impl<'a> FeatureClassifier<'a, f32> {
    /// Embeds every sample of `index` with the evaluation transform.
    pub fn new(model: &'a ProxyNet<f32>, dataset: &Dataset, index: &ClassIndex) -> Result<Self> {
        let ids = index.all_samples();
        let images = dataset.batch(&ids, false, 0)?;
        Ok(Self::from_features(model, &ids, model.embed_eval(&images)?))
    }
}

impl<'a, T: Float> FeatureClassifier<'a, T> {
    /// `features` row `i` belongs to `ids[i]`.
    pub fn from_features(model: &'a ProxyNet<T>, ids: &[SampleId], features: Tensor<T>) -> Self {
        Self {
            model,
            features,
            rows: ids.iter().enumerate().map(|(i, &id)| (id, i)).collect(),
        }
    }

    fn gather(&self, ids: &[SampleId]) -> Tensor<T> {
        let rows: Vec<usize> = ids.iter().map(|id| self.rows[id]).collect();
        self.features.select_rows(&rows)
    }
}

impl<T: Float> EpisodeClassifier for FeatureClassifier<'_, T> {
    fn predict(&self, episode: &Episode) -> Result<Vec<usize>> {
        let s = self.gather(&episode.support_ids());
        let q = self.gather(&episode.query_ids());
        self.model.predict_from_features(&s, &q, episode.spec.n_way)
    }
}

/// Embeds `index` once and evaluates the model on `n_tasks` sampled episodes.
pub fn evaluate_model(model: &ProxyNet<f32>, dataset: &Dataset, index: &ClassIndex, spec: TaskSpec, n_tasks: usize, seed: u64) -> Result<EvalReport> {
    let classifier = FeatureClassifier::new(model, dataset, index)?;
    evaluate(&classifier, index, spec, n_tasks, seed)
}

/// Trainable parameters per submodule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamAudit {
    pub rows: Vec<(String, usize)>,
    pub total: usize,
}

impl ParamAudit {
    pub fn of<T: Float>(params: &ParamStore<T>) -> Self {
        let backbone = params.trainable_count("backbone.");
        let weight_net = params.trainable_count("proxy.");
        let se = params.trainable_count("relation.se.");
        let relation = params.trainable_count("relation.") - se;
        let rows = vec![
            ("backbone".to_string(), backbone),
            ("proxy_weight_net".to_string(), weight_net),
            ("relation_se".to_string(), se),
            ("relation_scorer".to_string(), relation),
        ];
        Self {
            total: rows.iter().map(|r| r.1).sum(),
            rows,
        }
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.rows.iter().find(|r| r.0 == name).map(|r| r.1)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("submodule,trainable_parameters\n");
        for (name, count) in &self.rows {
            out.push_str(&format!("{name},{count}\n"));
        }
        out.push_str(&format!("total,{}\n", self.total));
        out
    }
}

impl fmt::Display for ParamAudit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, count) in &self.rows {
            writeln!(f, "{name:<20} {count:>10}")?;
        }
        writeln!(f, "{:<20} {:>10}", "total", self.total)?;
        write!(f, "{:<20} {:>10}", "reference_total", REFERENCE_TOTAL)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::ClassIndex;
    use crate::model::ModelConfig;
    use crate::relation::MetricKind;

    #[test]
    fn ci_examples() {
        assert!(matches!(confidence_interval(&[0.5]), Err(Error::InsufficientTasks(1))));
        assert_eq!(confidence_interval(&[0.3; 5]).unwrap(), (0.3, 0.0));
        let (m, h) = confidence_interval(&[0.0, 1.0]).unwrap();
        assert_eq!(m, 0.5);
        assert!((h - 1.96 * 0.5f64.sqrt() / 2f64.sqrt()).abs() < 1e-12);
        assert!((h - 0.98).abs() < 1e-12);
    }

    struct Oracle;

    impl EpisodeClassifier for Oracle {
        fn predict(&self, episode: &Episode) -> Result<Vec<usize>> {
            Ok(episode.query_labels())
        }
    }

    fn index() -> ClassIndex {
        let mut idx = ClassIndex::new();
        for c in 0..6 {
            for s in 0..20 {
                idx.insert(&format!("c{c}"), SampleId(c * 100 + s));
            }
        }
        idx
    }

    #[test]
    fn oracle_is_perfect_and_report_formats() {
        let r = evaluate(&Oracle, &index(), TaskSpec::new(5, 1, 15).unwrap(), 20, 3).unwrap();
        assert_eq!((r.mean, r.ci95, r.n_tasks, r.per_task.len()), (1.0, 0.0, 20, 20));
        assert_eq!(r.percent(), "100.00 ± 0.00");
    }

    #[test]
    fn evaluation_is_seed_deterministic() {
        struct First;
        impl EpisodeClassifier for First {
            fn predict(&self, episode: &Episode) -> Result<Vec<usize>> {
                Ok(episode.query.iter().map(|(s, _)| s.0 as usize % episode.spec.n_way).collect())
            }
        }
        let spec = TaskSpec::new(5, 1, 5).unwrap();
        let a = evaluate(&First, &index(), spec, 30, 7).unwrap();
        assert_eq!(a, evaluate(&First, &index(), spec, 30, 7).unwrap());
        assert_ne!(a.per_task, evaluate(&First, &index(), spec, 30, 8).unwrap().per_task);
    }

    #[test]
    fn audit_of_default_bundle() {
        let m = ProxyNet::<f32>::build(ModelConfig::default(), 0).unwrap();
        let a = ParamAudit::of(&m.params);
        assert_eq!(a.get("backbone"), Some(112_832));
        assert_eq!(a.total, a.rows.iter().map(|r| r.1).sum::<usize>());
        assert!(a.to_csv().ends_with(&format!("total,{}\n", a.total)));
        assert!(a.to_string().contains("reference_total"));
    }

    #[test]
    fn parameter_free_metric_audit_is_additive() {
        let cfg = ModelConfig {
            metric: MetricKind::Euclidean,
            ..Default::default()
        };
        let a = ParamAudit::of(&ProxyNet::<f32>::build(cfg, 0).unwrap().params);
        assert_eq!(a.total, 112_832 + 46_241);
    }
}
