use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::{train, TrainOutcome};
use super::RunConfig;
use crate::error::{invalid, Error, Result};
use crate::fusion::{late_weights_from_validation, late_weights_per_fold, Strategy};
use crate::metrics::{
    calibration_bins, classification_metrics, mean, regression_metrics, regression_metrics_per_target, spearman,
    std_dev, CalibrationBins,
};
use crate::model::{FusionModel, Prediction, Task};
use crate::synth::{derive_seed, ContextTag, SequenceSample};

pub const ECE_BINS: usize = 10;
const FOLD_STREAM: u64 = 5;

pub type MetricMap = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub metrics: MetricMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LateWeights {
    pub w_audio: f64,
    pub w_text: f64,
    /// `(w_audio, w_text)` per fold before averaging.
    pub per_fold: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub version: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub config: RunConfig,
    pub folds: Vec<FoldResult>,
    pub mean: MetricMap,
    pub std: MetricMap,
    /// Pooled over every test fold; classification only.
    pub calibration: Option<CalibrationBins>,
    pub late_weights: Option<LateWeights>,
}

pub fn version_string() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

/// Participant-grouped folds, stratified by class.
///
/// Participants are shuffled within each class and dealt round-robin; the
/// dealing position carries over between classes so fold sizes stay even.
pub fn make_folds(data: &[&SequenceSample], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return invalid("need at least two folds");
    }
    let mut by_person: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in data.iter().enumerate() {
        by_person.entry(s.participant()).or_default().push(i);
    }
    if by_person.len() < k {
        return invalid(format!("{} participants cannot fill {k} folds", by_person.len()));
    }
    let mut by_class: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (p, idx) in &by_person {
        by_class.entry(data[idx[0]].class_label.index()).or_default().push(p);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, FOLD_STREAM));
    let mut folds = vec![Vec::new(); k];
    let mut slot = 0;
    for people in by_class.values_mut() {
        people.shuffle(&mut rng);
        for p in people.iter() {
            folds[slot % k].extend(by_person[p].iter().copied());
            slot += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Metrics of predictions on one test set.
pub fn evaluate(task: &Task, preds: &[Prediction]) -> Result<MetricMap> {
    let mut m = MetricMap::new();
    if preds.is_empty() {
        return invalid("no predictions to evaluate");
    }
    match task {
        Task::Classification => {
            let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.output.clone()).collect();
            let labels: Vec<usize> = preds.iter().map(|p| p.label).collect();
            let c = classification_metrics(&probs, &labels)?;
            m.insert("accuracy".into(), c.accuracy);
            m.insert("macro_f1".into(), c.macro_f1);
            m.insert("ece".into(), calibration_bins(&probs, &labels, ECE_BINS)?.ece());
            let contexts: BTreeSet<ContextTag> = preds.iter().map(|p| p.context).collect();
            for ctx in contexts {
                let sel: Vec<&Prediction> = preds.iter().filter(|p| p.context == ctx).collect();
                let probs: Vec<Vec<f64>> = sel.iter().map(|p| p.output.clone()).collect();
                let labels: Vec<usize> = sel.iter().map(|p| p.label).collect();
                let c = classification_metrics(&probs, &labels)?;
                m.insert(format!("{ctx}/accuracy"), c.accuracy);
                m.insert(format!("{ctx}/macro_f1"), c.macro_f1);
                m.insert(format!("{ctx}/ece"), calibration_bins(&probs, &labels, ECE_BINS)?.ece());
            }
        }
        Task::Regression { .. } => {
            let out: Vec<Vec<f64>> = preds.iter().map(|p| p.output.clone()).collect();
            let tgt: Vec<Vec<f64>> = preds.iter().map(|p| p.raw_target.clone()).collect();
            let all = regression_metrics(&out, &tgt)?;
            m.insert("rmse".into(), all.rmse);
            m.insert("mae".into(), all.mae);
            for (name, r) in task.target_names().iter().zip(regression_metrics_per_target(&out, &tgt)?) {
                m.insert(format!("rmse/{name}"), r.rmse);
                m.insert(format!("mae/{name}"), r.mae);
            }
        }
    }
    if preds.iter().all(|p| p.weights.is_some()) {
        let w: Vec<f64> = preds.iter().map(|p| p.weights.as_ref().expect("weights").mean_audio()).collect();
        m.insert("mean_w_audio".into(), mean(&w));
    }
    if preds.len() >= 2 {
        for (name, sig, err) in [
            ("rho_audio", preds.iter().map(|p| p.var_norm_audio).collect::<Vec<_>>(), preds.iter().map(|p| p.error_audio).collect::<Vec<_>>()),
            ("rho_text", preds.iter().map(|p| p.var_norm_text).collect(), preds.iter().map(|p| p.error_text).collect()),
        ] {
            if let (Some(s), Some(e)) = (sig.into_iter().collect::<Option<Vec<f64>>>(), err.into_iter().collect::<Option<Vec<f64>>>()) {
                m.insert(name.into(), spearman(&s, &e)?);
            }
        }
    }
    Ok(m)
}

fn aggregate(folds: &[FoldResult]) -> (MetricMap, MetricMap) {
    let mut values: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for f in folds {
        for (k, v) in &f.metrics {
            values.entry(k).or_default().push(*v);
        }
    }
    let mean_map = values.iter().map(|(k, v)| (k.to_string(), mean(v))).collect();
    let std_map = values.iter().map(|(k, v)| (k.to_string(), std_dev(v))).collect();
    (mean_map, std_map)
}

/// A cross-validation run with its per-fold models and predictions.
#[derive(Debug, Clone)]
pub struct CvRun {
    pub report: EvaluationReport,
    pub models: Vec<FusionModel>,
    pub predictions: Vec<Vec<Prediction>>,
}

/// `cfg.folds`-fold cross-validation on `data` after the context filter.
pub fn run_cv(cfg: &RunConfig, data: &[SequenceSample]) -> Result<EvaluationReport> {
    Ok(cross_validate(cfg, data)?.report)
}

pub fn cross_validate(cfg: &RunConfig, data: &[SequenceSample]) -> Result<CvRun> {
    cfg.validate()?;
    let data = cfg.select(data);
    if data.len() < cfg.folds {
        return invalid(format!("{} samples cannot fill {} folds", data.len(), cfg.folds));
    }
    let folds = make_folds(&data, cfg.folds, cfg.seed)?;
    let mut outcomes: Vec<(TrainOutcome, Vec<usize>, Vec<usize>)> = Vec::with_capacity(folds.len());
    for (f, test) in folds.iter().enumerate() {
        let test_set: BTreeSet<usize> = test.iter().copied().collect();
        let train_idx: Vec<usize> = (0..data.len()).filter(|i| !test_set.contains(i)).collect();
        let train_data: Vec<&SequenceSample> = train_idx.iter().map(|i| data[*i]).collect();
        let fold_cfg = RunConfig { seed: derive_seed(cfg.seed, 100 + f as u64), ..cfg.clone() };
        log::info!("fold {}/{}: training {} on {} samples", f + 1, folds.len(), cfg.strategy.as_str(), train_idx.len());
        let out = train(&fold_cfg, &train_data)?;
        outcomes.push((out, train_idx, test.clone()));
    }

    let late_weights = if cfg.strategy == Strategy::Late {
        let la: Vec<f64> = outcomes.iter().map(|o| o.0.val_loss_audio.expect("late validation loss")).collect();
        let lt: Vec<f64> = outcomes.iter().map(|o| o.0.val_loss_text.expect("late validation loss")).collect();
        let (w_audio, w_text) = late_weights_from_validation(&la, &lt)?;
        for o in &mut outcomes {
            o.0.model.late_w_audio = w_audio;
        }
        Some(LateWeights { w_audio, w_text, per_fold: late_weights_per_fold(&la, &lt)? })
    } else {
        None
    };

    let mut results = Vec::new();
    let mut models = Vec::new();
    let mut predictions = Vec::new();
    let mut calibration: Option<CalibrationBins> = None;
    for (f, (out, train_idx, test_idx)) in outcomes.into_iter().enumerate() {
        let test: Vec<SequenceSample> = test_idx.iter().map(|i| data[*i].clone()).collect();
        let preds = out.model.predict(&out.model.prepare_all(&test)?)?;
        let mut metrics = evaluate(&cfg.task, &preds)?;
        if let Some(lw) = &late_weights {
            metrics.insert("late_w_audio".into(), lw.w_audio);
        }
        if cfg.task == Task::Classification {
            let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.output.clone()).collect();
            let labels: Vec<usize> = preds.iter().map(|p| p.label).collect();
            let bins = calibration_bins(&probs, &labels, ECE_BINS)?;
            match &mut calibration {
                Some(c) => c.merge(&bins)?,
                None => calibration = Some(bins),
            }
        }
        let ids = |idx: &[usize]| idx.iter().map(|i| data[*i].id.clone()).collect::<Vec<_>>();
        results.push(FoldResult { fold: f, train_ids: ids(&train_idx), test_ids: ids(&test_idx), metrics });
        models.push(out.model);
        predictions.push(preds);
    }
    let (mean_map, std_map) = aggregate(&results);
    let report = EvaluationReport {
        version: version_string(),
        strategy: cfg.strategy,
        seed: cfg.seed,
        config: cfg.clone(),
        folds: results,
        mean: mean_map,
        std: std_map,
        calibration,
        late_weights,
    };
    Ok(CvRun { report, models, predictions })
}

/// Train-on-one-context, test-on-another grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub version: String,
    pub strategy: Strategy,
    pub seed: u64,
    /// `accuracy` for classification, `rmse` for regression.
    pub metric: String,
    pub contexts: Vec<ContextTag>,
    /// `cells[train][test]`; the diagonal is `None`.
    pub cells: Vec<Vec<Option<f64>>>,
    /// Cross-validated metric within each context.
    pub in_context: Vec<f64>,
}

/// Trains on each context and evaluates on every other one, next to
/// in-context cross-validation.
///
/// Test participants also present in the training context are dropped from
/// the cross-context test set.
pub fn run_transfer(cfg: &RunConfig, data: &[SequenceSample], contexts: &[ContextTag]) -> Result<TransferMatrix> {
    cfg.validate()?;
    if contexts.len() < 2 {
        return invalid("transfer needs at least two contexts");
    }
    let metric = match cfg.task {
        Task::Classification => "accuracy",
        Task::Regression { .. } => "rmse",
    };
    let by_ctx: Vec<Vec<&SequenceSample>> =
        contexts.iter().map(|c| data.iter().filter(|s| s.context_tag == *c).collect()).collect();
    if let Some((c, _)) = contexts.iter().zip(&by_ctx).find(|(_, d)| d.is_empty()) {
        return Err(Error::Invalid(format!("no samples for context {c}")));
    }
    let mut cells = vec![vec![None; contexts.len()]; contexts.len()];
    let mut in_context = Vec::with_capacity(contexts.len());
    for (i, ctx) in contexts.iter().enumerate() {
        let in_cfg = RunConfig { contexts: Some(vec![*ctx]), ..cfg.clone() };
        let own: Vec<SequenceSample> = by_ctx[i].iter().map(|s| (*s).clone()).collect();
        in_context.push(run_cv(&in_cfg, &own)?.mean[metric]);

        let train_cfg = RunConfig { seed: derive_seed(cfg.seed, 200 + i as u64), ..cfg.clone() };
        let model = train(&train_cfg, &by_ctx[i])?.model;
        let seen: BTreeSet<&str> = by_ctx[i].iter().map(|s| s.participant()).collect();
        for (j, _) in contexts.iter().enumerate() {
            if i == j {
                continue;
            }
            let test: Vec<SequenceSample> =
                by_ctx[j].iter().filter(|s| !seen.contains(s.participant())).map(|s| (*s).clone()).collect();
            if test.is_empty() {
                continue;
            }
            let preds = model.predict(&model.prepare_all(&test)?)?;
            cells[i][j] = Some(evaluate(&cfg.task, &preds)?[metric]);
        }
    }
    Ok(TransferMatrix {
        version: version_string(),
        strategy: cfg.strategy,
        seed: cfg.seed,
        metric: metric.into(),
        contexts: contexts.to_vec(),
        cells,
        in_context,
    })
}
