//! Gradient x input attributions, fold confidence intervals and lexicon
//! categories for token-level features.
//!
//! For an input `x`, a baseline `x'` and a scalar target `y`,
//! `phi_i = (x_i - x'_i) * dy/dx_i`. Classification models attribute the
//! pre-softmax score of the predicted class.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::ParamGroup;
use crate::error::{invalid, Error, Result};
use crate::fusion::Strategy;
use crate::metrics::{argmax, percentile};
use crate::model::{FusionModel, Prepared, Task};
use crate::tensor::{Axis, Graph, Tensor, TensorError, Var};

/// A scalar function of a flat feature vector with its gradient.
pub trait Attributable {
    fn n_features(&self) -> usize;

    /// Returns `y(x)` and `dy/dx`.
    fn target_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// Wraps a graph builder `f(g, x) -> y` where `x` is `1 x n` and `y` is `1 x 1`.
pub struct GraphFunction<F> {
    n: usize,
    f: F,
}

impl<F> GraphFunction<F>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    pub fn new(n: usize, f: F) -> Self {
        Self { n, f }
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(vec![1, x.len()], x.to_vec())?)?;
        let y = (self.f)(&mut g, xv)?;
        Ok(g.scalar_value(y))
    }
}

impl<F> Attributable for GraphFunction<F>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    fn n_features(&self) -> usize {
        self.n
    }

    fn target_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        if x.len() != self.n {
            return invalid(format!("expected {} features, got {}", self.n, x.len()));
        }
        let mut g = Graph::new();
        let t = Tensor::new(vec![1, self.n], x.to_vec())?;
        let xv = g.param(&t)?;
        let y = (self.f)(&mut g, xv)?;
        if g.dims(y) != (1, 1) {
            return invalid("attribution target must be a scalar");
        }
        let grads = g.backward(y)?;
        Ok((g.scalar_value(y), grads.get_or_zeros(xv, &t)))
    }
}

fn check_finite(v: &[f64], op: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op }.into())
    }
}

pub fn grad_x_input<M: Attributable + ?Sized>(model: &M, x: &[f64], baseline: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.n_features() || baseline.len() != x.len() {
        return invalid("input and baseline must match the model's feature count");
    }
    check_finite(baseline, "baseline")?;
    let (_, grad) = model.target_gradient(x)?;
    check_finite(&grad, "gradient")?;
    Ok(x.iter().zip(baseline).zip(&grad).map(|((x, b), g)| (x - b) * g).collect())
}

/// Exact Shapley values of `f` by enumerating all feature subsets; features
/// outside a coalition take their baseline value.
pub fn exact_shapley(f: impl Fn(&[f64]) -> Result<f64>, x: &[f64], baseline: &[f64]) -> Result<Vec<f64>> {
    let n = x.len();
    if baseline.len() != n {
        return invalid("input and baseline lengths differ");
    }
    if n > 16 {
        return invalid("exact Shapley values are limited to 16 features");
    }
    let mut value = Vec::with_capacity(1 << n);
    for mask in 0usize..1 << n {
        let z: Vec<f64> = (0..n).map(|i| if mask >> i & 1 == 1 { x[i] } else { baseline[i] }).collect();
        value.push(f(&z)?);
    }
    let fact: Vec<f64> = (0..=n).scan(1.0, |a, i| {
        let r = *a;
        *a *= (i + 1) as f64;
        Some(r)
    }).collect();
    let mut phi = vec![0.0; n];
    for mask in 0usize..1 << n {
        let s = mask.count_ones() as usize;
        if s == n {
            continue;
        }
        let w = fact[s] * fact[n - s - 1] / fact[n];
        for (i, p) in phi.iter_mut().enumerate() {
            if mask >> i & 1 == 0 {
                *p += w * (value[mask | 1 << i] - value[mask]);
            }
        }
    }
    Ok(phi)
}

/// Feature names of a fusion model's flattened attribution vector.
pub fn feature_names(model: &FusionModel) -> Vec<String> {
    let c = &model.config;
    (0..c.d_audio).map(|i| format!("audio/{i}")).chain((0..c.d_text).map(|i| format!("text/{i}"))).collect()
}

/// Per-feature attribution of one standardised sample, summed over time steps.
///
/// The baseline is the training-set feature mean, which is zero after
/// standardisation.
pub fn attribute_sample(model: &FusionModel, sample: &Prepared) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let mut named = Vec::new();
    model.params.named("", &mut named);
    let leaves = named.iter().map(|(_, t)| g.constant((*t).clone())).collect::<std::result::Result<Vec<_>, _>>()?;
    let v = model.params.attach(&mut leaves.iter().copied());
    let a = g.param(&sample.audio)?;
    let t = g.param(&sample.text)?;
    let o = model.forward_vars(&mut g, &v, a, t, None)?;
    let missing = || Error::Invalid("model produced no output to attribute".into());
    let scores = match model.config.strategy {
        Strategy::AudioOnly => o.audio.ok_or_else(missing)?,
        Strategy::TextOnly => o.text.ok_or_else(missing)?,
        Strategy::Late => {
            let w = model.late_w_audio;
            let sa = g.scale(o.audio.ok_or_else(missing)?, w)?;
            let st = g.scale(o.text.ok_or_else(missing)?, 1.0 - w)?;
            g.add(sa, st)?
        }
        _ => o.fused.ok_or_else(missing)?,
    };
    let y = match model.config.task {
        Task::Classification => {
            let c = argmax(g.value(scores).data());
            g.cols(scores, c..c + 1)?
        }
        Task::Regression { .. } => g.sum(scores, Axis::All)?,
    };
    let grads = g.backward(y)?;
    let mut phi = Vec::with_capacity(model.config.d_audio + model.config.d_text);
    for (var, x) in [(a, &sample.audio), (t, &sample.text)] {
        let gx = grads.get_or_zeros(var, x);
        check_finite(&gx, "gradient")?;
        let d = x.shape()[1];
        let mut acc = vec![0.0; d];
        for (i, (xv, gv)) in x.data().iter().zip(&gx).enumerate() {
            acc[i % d] += xv * gv;
        }
        phi.extend(acc);
    }
    Ok(phi)
}

/// Mean per-feature attribution over `samples`.
pub fn attribute_dataset(model: &FusionModel, samples: &[Prepared]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return invalid("no samples to attribute");
    }
    let mut total = vec![0.0; model.config.d_audio + model.config.d_text];
    for s in samples {
        for (t, p) in total.iter_mut().zip(attribute_sample(model, s)?) {
            *t += p;
        }
    }
    let n = samples.len() as f64;
    Ok(total.into_iter().map(|t| t / n).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub feature_names: Vec<String>,
    /// Mean attribution over folds.
    pub phi: Vec<f64>,
    /// `|phi| / sum |phi|`, all zeros when every `phi` is zero.
    pub normalized: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
    pub significant: Vec<bool>,
    /// Number of instances in the dataset.
    pub weight: usize,
}

fn normalize(phi: &[f64]) -> Vec<f64> {
    let total: f64 = phi.iter().map(|p| p.abs()).sum();
    if total > 0.0 {
        phi.iter().map(|p| p.abs() / total).collect()
    } else {
        vec![0.0; phi.len()]
    }
}

/// 95% intervals `[P2.5, P97.5]` of per-fold attributions.
pub fn shap_confidence_intervals(
    feature_names: Vec<String>,
    per_fold_phi: &[Vec<f64>],
    weight: usize,
) -> Result<AttributionReport> {
    if per_fold_phi.len() < 2 {
        return invalid(format!("confidence intervals need at least 2 folds, got {}", per_fold_phi.len()));
    }
    let n = feature_names.len();
    if per_fold_phi.iter().any(|f| f.len() != n) {
        return invalid("every fold must attribute the same features");
    }
    let (mut phi, mut lo, mut hi) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let vals: Vec<f64> = per_fold_phi.iter().map(|f| f[i]).collect();
        check_finite(&vals, "attribution")?;
        phi.push(crate::metrics::mean(&vals));
        lo.push(percentile(&vals, 2.5)?);
        hi.push(percentile(&vals, 97.5)?);
    }
    let significant = lo.iter().zip(&hi).map(|(l, h)| *l > 0.0 || *h < 0.0).collect();
    Ok(AttributionReport { feature_names, normalized: normalize(&phi), phi, ci_low: lo, ci_high: hi, significant, weight })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedImportance {
    pub feature_names: Vec<String>,
    pub importance: Vec<f64>,
    /// Indices of datasets left out because every attribution was zero.
    pub skipped: Vec<usize>,
}

/// Instance-weighted mean of each dataset's normalised absolute attributions.
pub fn normalize_and_weight(reports: &[AttributionReport]) -> Result<CombinedImportance> {
    let first = reports.first().ok_or_else(|| Error::Invalid("no attribution reports".into()))?;
    let n = first.feature_names.len();
    let mut acc = vec![0.0; n];
    let mut total = 0.0;
    let mut skipped = Vec::new();
    for (d, r) in reports.iter().enumerate() {
        if r.feature_names != first.feature_names || r.phi.len() != n {
            return invalid(format!("dataset {d} attributes a different feature set"));
        }
        if r.phi.iter().all(|p| *p == 0.0) || r.weight == 0 {
            log::warn!("dataset {d} has no usable attribution, skipping");
            skipped.push(d);
            continue;
        }
        let w = r.weight as f64;
        for (a, v) in acc.iter_mut().zip(normalize(&r.phi)) {
            *a += w * v;
        }
        total += w;
    }
    if total == 0.0 {
        return invalid("every dataset was skipped");
    }
    Ok(CombinedImportance {
        feature_names: first.feature_names.clone(),
        importance: acc.into_iter().map(|a| a / total).collect(),
        skipped,
    })
}

/// Word to category sets, keyed by lower-cased word.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CategoryLexicon {
    map: BTreeMap<String, BTreeSet<String>>,
}

impl CategoryLexicon {
    fn key(word: &str) -> String {
        word.trim().to_lowercase()
    }

    pub fn insert(&mut self, word: &str, category: &str) {
        self.map.entry(Self::key(word)).or_default().insert(category.trim().to_string());
    }

    /// Parses `word<TAB>category` lines; `#` lines and blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lex = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            match line.split('\t').collect::<Vec<_>>()[..] {
                [w, c] if !w.trim().is_empty() && !c.trim().is_empty() => lex.insert(w, c),
                _ => return Err(Error::Format(format!("lexicon line {}: expected word<TAB>category", n + 1))),
            }
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn categories(&self, word: &str) -> Option<&BTreeSet<String>> {
        self.map.get(&Self::key(word))
    }

    /// Composite label: sorted categories joined with `+`, or `None`.
    pub fn label(&self, word: &str) -> String {
        match self.categories(word) {
            Some(c) => c.iter().map(String::as_str).collect::<Vec<_>>().join("+"),
            None => "None".to_string(),
        }
    }
}

pub fn map_tokens_to_categories<S: AsRef<str>>(tokens: &[S], lexicon: &CategoryLexicon) -> Result<Vec<String>> {
    if lexicon.is_empty() {
        return invalid("lexicon is empty");
    }
    Ok(tokens.iter().map(|t| lexicon.label(t.as_ref())).collect())
}
