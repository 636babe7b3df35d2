//! Evaluation on freshly generated data.
//!
//! Set or dataset `i` of an evaluation with seed `s` is drawn from
//! `Rng::derive(s, i)`, so a trained model and the oracle see identical data
//! for the same seed regardless of how many items are evaluated.

use std::collections::BTreeMap;

use crate::autodiff::Tape;
use crate::error::Result;
use crate::model::SetModel;
use crate::rng::Rng;
use crate::tasks::ari::ari;
use crate::tasks::max_regression::gen_max_regression;
use crate::tasks::mog::{
    assign_clusters, em_step, gen_synthetic_mog, mog_head, mog_loglik, MogDataset, MogGenConfig, MogParams,
};
use crate::tensor::Tensor;
use crate::train::{Task, TrainConfig};

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetEval {
    pub n: usize,
    pub ll0: f64,
    pub ll1: f64,
    pub ari0: f64,
    pub ari1: f64,
    /// EM left at least one component untouched for lack of responsibility.
    pub em_empty: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusteringReport {
    pub datasets: Vec<DatasetEval>,
    pub ll0: Summary,
    pub ll1: Summary,
    pub ari0: Summary,
    pub ari1: Summary,
}

impl ClusteringReport {
    fn from_rows(datasets: Vec<DatasetEval>) -> Self {
        let col = |f: fn(&DatasetEval) -> f64| Summary::of(&datasets.iter().map(f).collect::<Vec<_>>());
        Self {
            ll0: col(|d| d.ll0),
            ll1: col(|d| d.ll1),
            ari0: col(|d| d.ari0),
            ari1: col(|d| d.ari1),
            datasets,
        }
    }

    /// Fraction of datasets with `LL1 >= LL0 - tol`.
    pub fn em_improves_fraction(&self, tol: f64) -> f64 {
        let ok = self.datasets.iter().filter(|d| d.ll1 >= d.ll0 - tol).count();
        ok as f64 / self.datasets.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionReport {
    /// Absolute error per evaluated set.
    pub errors: Vec<f64>,
    pub mae: Summary,
}

#[derive(Clone, Debug, PartialEq)]
pub enum EvalReport {
    Regression(RegressionReport),
    Clustering(ClusteringReport),
}

impl EvalReport {
    /// Named scalar metrics, means first then standard deviations.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        match self {
            EvalReport::Regression(r) => vec![("mae".into(), r.mae.mean), ("mae_std".into(), r.mae.std)],
            EvalReport::Clustering(r) => {
                let named = [("ll0", r.ll0), ("ll1", r.ll1), ("ari0", r.ari0), ("ari1", r.ari1)];
                let means = named.iter().map(|(n, s)| (n.to_string(), s.mean));
                let stds = named.iter().map(|(n, s)| (format!("{n}_std"), s.std));
                means.chain(stds).collect()
            }
        }
    }
}

/// Task-appropriate evaluation of `model` on `count` fresh sets or datasets.
pub fn evaluate(model: &SetModel, cfg: &TrainConfig, count: usize, seed: u64) -> Result<EvalReport> {
    Ok(match cfg.task {
        Task::MaxRegression => EvalReport::Regression(evaluate_max_regression(model, count, seed)?),
        Task::Clustering => EvalReport::Clustering(evaluate_clustering(model, &cfg.mog, count, seed)?),
    })
}

/// Absolute error on `count` sets, each with its own size.
pub fn evaluate_max_regression(model: &SetModel, count: usize, seed: u64) -> Result<RegressionReport> {
    // sets of equal size share one forward pass
    let mut by_size: BTreeMap<usize, Vec<(usize, Vec<f64>, f64)>> = BTreeMap::new();
    for i in 0..count {
        let b = gen_max_regression(&mut Rng::derive(seed, i as u64), 1);
        by_size.entry(b.set_size).or_default().push((i, b.set(0).to_vec(), b.targets[0]));
    }
    let mut errors = vec![0.0; count];
    for (n, sets) in by_size {
        let data: Vec<f64> = sets.iter().flat_map(|(_, x, _)| x.iter().copied()).collect();
        let pred = predict_max(model, &Tensor::from_vec(sets.len() * n, 1, data)?, sets.len())?;
        for (j, (i, _, target)) in sets.iter().enumerate() {
            errors[*i] = (pred.get(j, 0) - target).abs();
        }
    }
    Ok(RegressionReport {
        mae: Summary::of(&errors),
        errors,
    })
}

/// Predicted maxima, one row per set, in raw value units.
pub fn predict_max(model: &SetModel, sets: &Tensor, groups: usize) -> Result<Tensor> {
    model.predict(sets, groups)
}

/// Mixture parameters the model predicts for one dataset.
pub fn predict_mog(model: &SetModel, points: &Tensor) -> Result<MogParams> {
    let mut tape = Tape::inference();
    let p = model.params().bind(&mut tape);
    let x = tape.constant(points.clone());
    let out = model.forward(&mut tape, &p, &x, 1)?;
    Ok(mog_head(&mut tape, &out, 1, points.cols())?.params(0))
}

fn score(ds: &MogDataset, theta: &MogParams) -> Result<DatasetEval> {
    let em = em_step(&ds.points, theta)?;
    Ok(DatasetEval {
        n: ds.points.rows(),
        ll0: mog_loglik(&ds.points, theta)?.per_datum,
        ll1: mog_loglik(&ds.points, &em.params)?.per_datum,
        ari0: ari(&assign_clusters(&ds.points, theta)?, &ds.labels)?,
        ari1: ari(&assign_clusters(&ds.points, &em.params)?, &ds.labels)?,
        em_empty: !em.empty_components.is_empty(),
    })
}

fn evaluate_with(
    gen: &MogGenConfig,
    count: usize,
    seed: u64,
    mut theta: impl FnMut(&MogDataset) -> Result<MogParams>,
) -> Result<ClusteringReport> {
    let mut rows = Vec::with_capacity(count);
    for i in 0..count {
        let ds = gen_synthetic_mog(&mut Rng::derive(seed, i as u64), gen)?;
        let t = theta(&ds)?;
        rows.push(score(&ds, &t)?);
    }
    Ok(ClusteringReport::from_rows(rows))
}

/// LL0/LL1 per datum and ARI0/ARI1 against the generating labels, with the
/// model's predicted parameters.
pub fn evaluate_clustering(model: &SetModel, gen: &MogGenConfig, count: usize, seed: u64) -> Result<ClusteringReport> {
    evaluate_with(gen, count, seed, |ds| predict_mog(model, &ds.points))
}

/// The same metrics with the true generating parameters.
pub fn evaluate_oracle(gen: &MogGenConfig, count: usize, seed: u64) -> Result<ClusteringReport> {
    evaluate_with(gen, count, seed, |ds| Ok(ds.params.clone()))
}
