//! Training losses: task losses, the calibration/ordinality loss that ties
//! variance norms to prediction errors, and their composition.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::{Axis, Graph, Tensor, Var};

/// Probability clamp used by the value-level cross-entropy.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Regression,
}

/// Per-sample errors of the two unimodal predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchErrors {
    pub e_audio: Vec<f64>,
    pub e_text: Vec<f64>,
}

impl BatchErrors {
    pub fn new(e_audio: Vec<f64>, e_text: Vec<f64>) -> Result<Self> {
        if e_audio.len() != e_text.len() {
            return invalid("audio and text error counts differ");
        }
        if e_audio.iter().chain(&e_text).any(|e| !(e.is_finite() && *e >= 0.0)) {
            return invalid("errors must be finite and nonnegative");
        }
        Ok(Self { e_audio, e_text })
    }

    pub fn len(&self) -> usize {
        self.e_audio.len()
    }

    pub fn is_empty(&self) -> bool {
        self.e_audio.is_empty()
    }
}

/// Squared Euclidean distance between a prediction and its target.
///
/// For classification pass the probability vector and the one-hot target.
pub fn prediction_error(y_hat: &[f64], y_star: &[f64]) -> Result<f64> {
    if y_hat.len() != y_star.len() {
        return invalid(format!("prediction length {} vs target length {}", y_hat.len(), y_star.len()));
    }
    Ok(y_hat.iter().zip(y_star).map(|(a, b)| (a - b) * (a - b)).sum())
}

fn interleave(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).flat_map(|(x, y)| [*x, *y]).collect()
}

/// Symmetric KL between `softmax(-e)` and `softmax(-sigma)` over the
/// interleaved `2N` vector of both modalities.
pub fn cold_loss(errors: &BatchErrors, var_norm_audio: &[f64], var_norm_text: &[f64]) -> Result<f64> {
    let n = errors.len();
    if n < 2 {
        return invalid("calibration loss needs a batch of at least two samples");
    }
    if var_norm_audio.len() != n || var_norm_text.len() != n {
        return invalid("variance norm count does not match the batch");
    }
    if var_norm_audio.iter().chain(var_norm_text).any(|v| !v.is_finite()) {
        return invalid("variance norms must be finite");
    }
    let neg = |v: Vec<f64>| v.into_iter().map(|x| -x).collect::<Vec<_>>();
    let le = log_softmax(&neg(interleave(&errors.e_audio, &errors.e_text)))?;
    let ls = log_softmax(&neg(interleave(var_norm_audio, var_norm_text)))?;
    Ok(le.iter().zip(&ls).map(|(a, b)| (a.exp() - b.exp()) * (a - b)).sum::<f64>().max(0.0))
}

fn log_softmax(v: &[f64]) -> Result<Vec<f64>> {
    let lse = crate::tensor::log_sum_exp(v)?;
    Ok(v.iter().map(|x| x - lse).collect())
}

/// Graph form of [`cold_loss`]. `errors` and `var_norms` are `1 x 2N` rows
/// already interleaved as `[a_0, t_0, a_1, t_1, ...]`.
pub fn cold_loss_graph(g: &mut Graph, errors: Var, var_norms: Var) -> Result<Var> {
    let (r, c) = g.dims(errors);
    if r != 1 || g.dims(var_norms) != (r, c) {
        return invalid("calibration loss expects two equal 1 x 2N rows");
    }
    if c < 4 {
        return invalid("calibration loss needs a batch of at least two samples");
    }
    let ne = g.neg(errors)?;
    let ns = g.neg(var_norms)?;
    let le = g.log_softmax(ne)?;
    let ls = g.log_softmax(ns)?;
    let pe = g.exp(le)?;
    let ps = g.exp(ls)?;
    let dp = g.sub(pe, ps)?;
    let dl = g.sub(le, ls)?;
    let prod = g.mul(dp, dl)?;
    Ok(g.sum(prod, Axis::All)?)
}

fn check_distribution(p: &[f64]) -> Result<()> {
    let s: f64 = p.iter().sum();
    if p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (s - 1.0).abs() > 1e-6 {
        return invalid("prediction is not a probability distribution");
    }
    Ok(())
}

/// Cross-entropy (classification, `target` one-hot or soft) or mean squared
/// error (regression).
pub fn task_loss(pred: &[f64], target: &[f64], kind: TaskKind) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return invalid("prediction and target lengths differ");
    }
    match kind {
        TaskKind::Classification => {
            check_distribution(pred)?;
            check_distribution(target)?;
            Ok(-pred.iter().zip(target).map(|(p, t)| t * p.max(PROB_CLAMP).ln()).sum::<f64>())
        }
        TaskKind::Regression => {
            Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
        }
    }
}

/// Graph task loss from raw head outputs (logits for classification).
pub fn task_loss_graph(g: &mut Graph, output: Var, target: &[f64], kind: TaskKind) -> Result<Var> {
    let (r, c) = g.dims(output);
    if r != 1 || c != target.len() {
        return invalid(format!("head output {r}x{c} does not match target length {}", target.len()));
    }
    let t = g.constant(Tensor::row(target.to_vec())?)?;
    match kind {
        TaskKind::Classification => {
            let lp = g.log_softmax(output)?;
            let prod = g.mul(lp, t)?;
            let s = g.sum(prod, Axis::All)?;
            Ok(g.neg(s)?)
        }
        TaskKind::Regression => {
            let se = g.squared_error(output, t)?;
            Ok(g.scale(se, 1.0 / c as f64)?)
        }
    }
}

/// Graph per-sample error: squared distance of the prediction (softmax of the
/// logits for classification) to the target.
pub fn prediction_error_graph(g: &mut Graph, output: Var, target: &[f64], kind: TaskKind) -> Result<Var> {
    let (r, c) = g.dims(output);
    if r != 1 || c != target.len() {
        return invalid("head output does not match target length");
    }
    let t = g.constant(Tensor::row(target.to_vec())?)?;
    let y = match kind {
        TaskKind::Classification => g.softmax(output)?,
        TaskKind::Regression => output,
    };
    Ok(g.squared_error(y, t)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossCoefficients {
    pub beta: f64,
    pub lambda_uni: f64,
}

impl Default for LossCoefficients {
    fn default() -> Self {
        Self { beta: 0.1, lambda_uni: 1.0 }
    }
}

impl LossCoefficients {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.lambda_uni >= 0.0 && self.beta.is_finite() && self.lambda_uni.is_finite()) {
            return invalid("loss coefficients must be finite and nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task_fused: f64,
    pub task_audio: f64,
    pub task_text: f64,
    pub l_co: f64,
    pub total: f64,
    pub beta: f64,
    pub lambda_uni: f64,
}

impl LossBreakdown {
    pub fn compose(task_fused: f64, task_audio: f64, task_text: f64, l_co: f64, c: LossCoefficients) -> Self {
        let total = task_fused + c.lambda_uni * (task_audio + task_text) + c.beta * l_co;
        Self { task_fused, task_audio, task_text, l_co, total, beta: c.beta, lambda_uni: c.lambda_uni }
    }
}

/// Scalar graph handles of the loss terms; absent terms count as zero.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub task_fused: Var,
    pub task_audio: Option<Var>,
    pub task_text: Option<Var>,
    pub l_co: Option<Var>,
}

/// `task_fused + lambda_uni (task_audio + task_text) + beta l_co` on the graph.
pub fn total_loss(g: &mut Graph, parts: LossParts, c: LossCoefficients) -> Result<(Var, LossBreakdown)> {
    c.validate()?;
    let value = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.scalar_value(v));
    let mut total = parts.task_fused;
    let uni = match (parts.task_audio, parts.task_text) {
        (Some(a), Some(t)) => Some(g.add(a, t)?),
        (Some(a), None) | (None, Some(a)) => Some(a),
        (None, None) => None,
    };
    if let Some(u) = uni {
        if c.lambda_uni != 0.0 {
            let s = g.scale(u, c.lambda_uni)?;
            total = g.add(total, s)?;
        }
    }
    if let Some(l) = parts.l_co {
        if c.beta != 0.0 {
            let s = g.scale(l, c.beta)?;
            total = g.add(total, s)?;
        }
    }
    let breakdown = LossBreakdown {
        total: g.scalar_value(total),
        ..LossBreakdown::compose(
            g.scalar_value(parts.task_fused),
            value(g, parts.task_audio),
            value(g, parts.task_text),
            value(g, parts.l_co),
            c,
        )
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::spearman;
    use crate::tensor::grad_check_many;
    use proptest::prelude::*;

    #[test]
    fn prediction_error_examples() {
        assert_eq!(prediction_error(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert_eq!(prediction_error(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2.0);
        assert_eq!(prediction_error(&[2.5], &[3.0]).unwrap(), 0.25);
        assert!(prediction_error(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cold_loss_shift_gives_zero() {
        let e = BatchErrors::new(vec![0.3, 1.2, 0.7], vec![2.0, 0.1, 0.4]).unwrap();
        let l = cold_loss(&e, &[1.3, 2.2, 1.7], &[3.0, 1.1, 1.4]).unwrap();
        assert!(l.abs() < 1e-15, "{l}");
    }

    #[test]
    fn cold_loss_hand_value() {
        // P_e = (1/3, 1/3, 1/6, 1/6) against uniform P_sigma:
        // sum (p - q)(ln p - ln q) = (1/6) ln 2
        let ln2 = std::f64::consts::LN_2;
        let e = BatchErrors::new(vec![0.0, ln2], vec![0.0, ln2]).unwrap();
        let l = cold_loss(&e, &[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert!((l - ln2 / 6.0).abs() < 1e-15, "{l}");
    }

    #[test]
    fn cold_loss_swap_symmetry_and_errors() {
        let e = BatchErrors::new(vec![0.3, 1.2], vec![2.0, 0.1]).unwrap();
        let swapped = BatchErrors::new(vec![2.0, 0.1], vec![0.3, 1.2]).unwrap();
        let a = cold_loss(&e, &[0.1, 0.9], &[0.4, 0.2]).unwrap();
        let b = cold_loss(&swapped, &[0.4, 0.2], &[0.1, 0.9]).unwrap();
        assert!((a - b).abs() < 1e-15);
        let one = BatchErrors::new(vec![0.3], vec![0.1]).unwrap();
        assert!(cold_loss(&one, &[1.0], &[1.0]).is_err());
        assert!(cold_loss(&e, &[f64::NAN, 1.0], &[1.0, 1.0]).is_err());
        assert!(BatchErrors::new(vec![-1.0], vec![0.0]).is_err());
    }

    #[test]
    fn graph_cold_loss_matches_values() {
        let ea = [0.3, 1.2, 0.7];
        let et = [2.0, 0.1, 0.4];
        let sa = [0.5, 0.9, 1.4];
        let st = [0.2, 0.3, 2.2];
        let expected = cold_loss(&BatchErrors::new(ea.to_vec(), et.to_vec()).unwrap(), &sa, &st).unwrap();
        let mut g = Graph::new();
        let e = g.constant(Tensor::row(interleave(&ea, &et)).unwrap()).unwrap();
        let s = g.constant(Tensor::row(interleave(&sa, &st)).unwrap()).unwrap();
        let l = cold_loss_graph(&mut g, e, s).unwrap();
        assert!((g.scalar_value(l) - expected).abs() < 1e-14);
    }

    #[test]
    fn task_loss_examples() {
        assert!(task_loss(&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0], TaskKind::Classification).unwrap() <= 1e-11);
        let u = 1.0 / 3.0;
        let l = task_loss(&[u, u, u], &[1.0, 0.0, 0.0], TaskKind::Classification).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
        assert_eq!(task_loss(&[1.5, -2.0], &[1.5, -2.0], TaskKind::Regression).unwrap(), 0.0);
        assert_eq!(task_loss(&[1.0, 0.0], &[0.0, 2.0], TaskKind::Regression).unwrap(), 2.5);
        assert!(task_loss(&[0.6, 0.6], &[1.0, 0.0], TaskKind::Classification).is_err());
        // clamp keeps a zero-probability true class finite
        let l = task_loss(&[1.0, 0.0], &[0.0, 1.0], TaskKind::Classification).unwrap();
        assert!((l - (-PROB_CLAMP.ln())).abs() < 1e-9);
    }

    #[test]
    fn graph_task_loss_matches_values() {
        let logits = [0.4, -1.0, 2.0];
        let target = [0.0, 0.0, 1.0];
        let mut g = Graph::new();
        let o = g.constant(Tensor::row(logits.to_vec()).unwrap()).unwrap();
        let l = task_loss_graph(&mut g, o, &target, TaskKind::Classification).unwrap();
        let p = crate::tensor::softmax(&logits).unwrap();
        let expected = task_loss(&p, &target, TaskKind::Classification).unwrap();
        assert!((g.scalar_value(l) - expected).abs() < 1e-14);
        let e = prediction_error_graph(&mut g, o, &target, TaskKind::Classification).unwrap();
        assert!((g.scalar_value(e) - prediction_error(&p, &target).unwrap()).abs() < 1e-14);
        let r = task_loss_graph(&mut g, o, &[1.0, 1.0, 1.0], TaskKind::Regression).unwrap();
        assert!((g.scalar_value(r) - task_loss(&logits, &[1.0; 3], TaskKind::Regression).unwrap()).abs() < 1e-14);
    }

    fn composed(g: &mut Graph, c: LossCoefficients) -> (Var, LossBreakdown) {
        let parts = LossParts {
            task_fused: g.scalar(0.7).unwrap(),
            task_audio: Some(g.scalar(0.4).unwrap()),
            task_text: Some(g.scalar(0.9).unwrap()),
            l_co: Some(g.scalar(0.25).unwrap()),
        };
        total_loss(g, parts, c).unwrap()
    }

    #[test]
    fn total_loss_composition() {
        let mut g = Graph::new();
        let (v, b) = composed(&mut g, LossCoefficients::default());
        assert!((b.total - (0.7 + 1.0 * (0.4 + 0.9) + 0.1 * 0.25)).abs() < 1e-12);
        assert_eq!(g.scalar_value(v), b.total);
        let (_, b) = composed(&mut g, LossCoefficients { beta: 0.0, lambda_uni: 1.0 });
        assert!((b.total - (0.7 + 1.3)).abs() < 1e-12);
        let (_, b) = composed(&mut g, LossCoefficients { beta: 0.0, lambda_uni: 0.0 });
        assert_eq!(b.total, 0.7);
        let mut g = Graph::new();
        let f = g.scalar(1.0).unwrap();
        let parts = LossParts { task_fused: f, task_audio: None, task_text: None, l_co: None };
        assert!(total_loss(&mut g, parts, LossCoefficients { beta: -1.0, lambda_uni: 1.0 }).is_err());
    }

    /// A toy batch: per-sample logits for both modalities plus variance
    /// norms, all differentiable.
    fn toy_total(g: &mut Graph, v: &[Var], targets: &[[f64; 3]]) -> Result<Var> {
        let n = targets.len();
        let mut errs = Vec::new();
        let mut sig = Vec::new();
        let mut ta = Vec::new();
        let mut tt = Vec::new();
        let mut tf = Vec::new();
        for (i, t) in targets.iter().enumerate() {
            let la = g.row(v[0], i)?;
            let lt = g.row(v[1], i)?;
            let fused = g.add(la, lt)?;
            ta.push(task_loss_graph(g, la, t, TaskKind::Classification)?);
            tt.push(task_loss_graph(g, lt, t, TaskKind::Classification)?);
            tf.push(task_loss_graph(g, fused, t, TaskKind::Classification)?);
            errs.push(prediction_error_graph(g, la, t, TaskKind::Classification)?);
            errs.push(prediction_error_graph(g, lt, t, TaskKind::Classification)?);
            let na = g.slice(v[2], i..i + 1, 0..1)?;
            let nt = g.slice(v[2], i..i + 1, 1..2)?;
            let na = g.softplus(na)?;
            let nt = g.softplus(nt)?;
            sig.push(na);
            sig.push(nt);
        }
        let mean = |g: &mut Graph, xs: &[Var]| -> Result<Var> {
            let c = g.concat(xs, 1)?;
            let s = g.sum(c, Axis::All)?;
            Ok(g.scale(s, 1.0 / n as f64)?)
        };
        let task_fused = mean(g, &tf)?;
        let task_audio = Some(mean(g, &ta)?);
        let task_text = Some(mean(g, &tt)?);
        let e = g.concat(&errs, 1)?;
        let s = g.concat(&sig, 1)?;
        let l_co = Some(cold_loss_graph(g, e, s)?);
        let parts = LossParts { task_fused, task_audio, task_text, l_co };
        Ok(total_loss(g, parts, LossCoefficients::default())?.0)
    }

    #[test]
    fn total_loss_passes_grad_check() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let targets = [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        for _ in 0..5 {
            let mut rnd = |r, c| Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
            let xs = [rnd(4, 3), rnd(4, 3), rnd(4, 2)];
            let err = grad_check_many(|g, v| toy_total(g, v, &targets), &xs, 1e-6).unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn toy_batch_is_bitwise_reproducible() {
        let targets = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let xs = [
            Tensor::matrix(3, 3, vec![0.1, 0.5, -0.3, 1.2, -0.7, 0.0, 0.3, 0.3, 0.9]).unwrap(),
            Tensor::matrix(3, 3, vec![-0.4, 0.2, 0.8, 0.6, 0.1, -1.1, 0.0, 0.7, 0.2]).unwrap(),
            Tensor::matrix(3, 2, vec![0.5, -0.5, 1.0, 0.2, -0.3, 0.8]).unwrap(),
        ];
        let run = || {
            let mut g = Graph::new();
            let v: Vec<Var> = xs.iter().map(|x| g.param(x).unwrap()).collect();
            let out = toy_total(&mut g, &v, &targets).unwrap();
            let grads = g.backward(out).unwrap();
            let mut bits = vec![g.scalar_value(out).to_bits()];
            for (x, v) in xs.iter().zip(&v) {
                bits.extend(grads.get_or_zeros(*v, x).iter().map(|f| f.to_bits()));
            }
            bits
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn minimising_cold_loss_orders_variances() {
        let ea = [0.05, 0.9, 0.3, 1.6, 0.6, 0.15, 1.1, 0.45];
        let et = [0.7, 0.2, 1.3, 0.35, 0.02, 0.95, 0.55, 1.9];
        let e = Tensor::row(interleave(&ea, &et)).unwrap();
        let mut sigma = Tensor::row(vec![0.5; 16]).unwrap();
        // perturb so the start is not already a tie
        for (i, s) in sigma.data_mut().iter_mut().enumerate() {
            *s += 0.01 * ((i * 7) % 5) as f64;
        }
        for _ in 0..500 {
            let mut g = Graph::new();
            let ev = g.constant(e.clone()).unwrap();
            let sv = g.param(&sigma).unwrap();
            let l = cold_loss_graph(&mut g, ev, sv).unwrap();
            let grad = g.backward(l).unwrap().get_or_zeros(sv, &sigma);
            for (s, d) in sigma.data_mut().iter_mut().zip(grad) {
                *s -= 5.0 * d;
            }
        }
        let rho = spearman(sigma.data(), e.data()).unwrap();
        assert!(rho >= 0.9, "{rho}");
    }

    proptest! {
        #[test]
        fn cold_loss_is_nonnegative(
            v in proptest::collection::vec((0f64..5.0, 0f64..5.0, -3f64..3.0, -3f64..3.0), 2..8)
        ) {
            let e = BatchErrors::new(v.iter().map(|t| t.0).collect(), v.iter().map(|t| t.1).collect()).unwrap();
            let sa: Vec<f64> = v.iter().map(|t| t.2).collect();
            let st: Vec<f64> = v.iter().map(|t| t.3).collect();
            prop_assert!(cold_loss(&e, &sa, &st).unwrap() >= 0.0);
        }
    }
}
