use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::encoder::ParamGroup;
use crate::error::{invalid, Error, Result};
use crate::fusion::{late_weights_per_fold, Strategy};
use crate::model::{FusionModel, Prediction, Prepared};
use crate::objective::{task_loss, LossBreakdown, TaskKind};
use crate::synth::{derive_seed, SequenceSample};
use crate::tensor::{Graph, Tensor, TensorError};

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;
const SPLIT_STREAM: u64 = 4;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, p) in params.iter_mut().enumerate() {
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *x -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch-size weighted mean over the epoch.
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FusionModel,
    pub curve: Vec<EpochRecord>,
    /// Held-out task losses of the two late-fusion heads.
    pub val_loss_audio: Option<f64>,
    pub val_loss_text: Option<f64>,
}

/// Contiguous batches of `order`; a trailing batch of one joins the previous batch.
pub fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() >= 2 && out[out.len() - 1].len() == 1 {
        let n = order.len();
        out.pop();
        let last = out.len() - 1;
        let start = n - 1 - out[last].len();
        out[last] = &order[start..];
    }
    out
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::Diverged { epoch, detail: format!("non-finite value in {op}") },
        other => other,
    }
}

/// Deterministic split of `data` by participant into `(train, validation)`.
pub fn split_by_participant<'a>(
    data: &[&'a SequenceSample],
    fraction: f64,
    seed: u64,
) -> (Vec<&'a SequenceSample>, Vec<&'a SequenceSample>) {
    let mut people: Vec<&str> = data.iter().map(|s| s.participant()).collect();
    people.sort_unstable();
    people.dedup();
    people.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, SPLIT_STREAM)));
    let n_val = ((people.len() as f64 * fraction).round() as usize).clamp(1, people.len().saturating_sub(1).max(1));
    let val: std::collections::BTreeSet<&str> = people[..n_val].iter().copied().collect();
    data.iter().partition(|s| !val.contains(s.participant()))
}

/// Trains a fresh model on `data`.
///
/// For late fusion a participant-disjoint validation share is held out; the
/// two heads are fitted on the rest and their validation losses returned.
pub fn train(cfg: &RunConfig, data: &[&SequenceSample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return invalid("no training data");
    }
    let model_cfg = cfg.model_config(data[0])?;
    let (fit, val) = if cfg.strategy == Strategy::Late {
        let (t, v) = split_by_participant(data, cfg.validation_fraction, cfg.seed);
        if t.is_empty() || v.is_empty() {
            return invalid("late fusion needs at least two participants");
        }
        (t, v)
    } else {
        (data.to_vec(), Vec::new())
    };
    let mut model = FusionModel::new(model_cfg, derive_seed(cfg.seed, INIT_STREAM))?;
    let owned: Vec<SequenceSample> = fit.iter().map(|s| (*s).clone()).collect();
    model.fit_normalizers(&owned)?;
    let prepared = model.prepare_all(&owned)?;
    let curve = fit_prepared(cfg, &mut model, &prepared)?;

    let (mut val_loss_audio, mut val_loss_text) = (None, None);
    if !val.is_empty() {
        let vp: Vec<Prepared> = val.iter().map(|s| model.prepare(s)).collect::<Result<_>>()?;
        let preds = model.predict(&vp)?;
        let kind = cfg.task.kind();
        let to_training_units = |v: Vec<f64>| match kind {
            TaskKind::Classification => v,
            TaskKind::Regression => model.target_norm.apply(&v),
        };
        let mean_loss = |pick: &dyn Fn(&Prediction) -> Vec<f64>| -> Result<f64> {
            let mut total = 0.0;
            for (p, s) in preds.iter().zip(&vp) {
                total += task_loss(&to_training_units(pick(p)), &s.target, kind)?;
            }
            Ok(total / preds.len() as f64)
        };
        let la = mean_loss(&|p| p.audio.clone().expect("audio head"))?;
        let lt = mean_loss(&|p| p.text.clone().expect("text head"))?;
        // guard against an exactly zero loss on a tiny validation split
        let (la, lt) = (la.max(1e-12), lt.max(1e-12));
        model.late_w_audio = late_weights_per_fold(&[la], &[lt])?[0].0;
        val_loss_audio = Some(la);
        val_loss_text = Some(lt);
    }
    Ok(TrainOutcome { model, curve, val_loss_audio, val_loss_text })
}

/// Runs the optimisation loop on prepared samples, updating `model` in place.
pub fn fit_prepared(cfg: &RunConfig, model: &mut FusionModel, prepared: &[Prepared]) -> Result<Vec<EpochRecord>> {
    let coeffs = cfg.coefficients();
    let sizes: Vec<usize> = {
        let mut named = Vec::new();
        model.params.named("", &mut named);
        named.iter().map(|(_, t)| t.len()).collect()
    };
    let mut adam = Adam::new(cfg.learning_rate, &sizes);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SHUFFLE_STREAM));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, NOISE_STREAM));
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut acc = LossBreakdown::default();
        for batch in batches(&order, cfg.batch_size) {
            let refs: Vec<&Prepared> = batch.iter().map(|i| &prepared[*i]).collect();
            let mut g = Graph::new();
            let (vars, leaves) = model.params.bind(&mut g).map_err(|e| diverged(epoch, e))?;
            let (loss, parts) =
                model.batch_loss(&mut g, &vars, &refs, &mut noise_rng, coeffs).map_err(|e| diverged(epoch, e))?;
            if !parts.total.is_finite() {
                return Err(Error::Diverged { epoch, detail: "non-finite loss".into() });
            }
            let grads = g.backward(loss).map_err(|e| diverged(epoch, Error::from(e)))?;
            let mut named = Vec::new();
            model.params.named_mut("", &mut named);
            let mut flat: Vec<Vec<f64>> =
                leaves.iter().zip(&named).map(|(l, (_, t))| grads.get_or_zeros(*l, t)).collect();
            if let Some(clip) = cfg.grad_clip {
                let norm = flat.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
                if !norm.is_finite() {
                    return Err(Error::Diverged { epoch, detail: "non-finite gradient".into() });
                }
                if norm > clip {
                    let s = clip / norm;
                    flat.iter_mut().flatten().for_each(|g| *g *= s);
                }
            }
            let mut tensors: Vec<&mut Tensor> = named.into_iter().map(|(_, t)| t).collect();
            adam.step(&mut tensors, &flat);
            let w = refs.len() as f64 / prepared.len() as f64;
            acc.task_fused += w * parts.task_fused;
            acc.task_audio += w * parts.task_audio;
            acc.task_text += w * parts.task_text;
            acc.l_co += w * parts.l_co;
            acc.total += w * parts.total;
        }
        acc.beta = coeffs.beta;
        acc.lambda_uni = coeffs.lambda_uni;
        log::debug!("epoch {epoch}: loss {:.5}", acc.total);
        curve.push(EpochRecord { epoch, loss: acc });
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Task;
    use crate::synth::{generate_dataset, ScenarioConfig};

    fn data(n: usize) -> Vec<SequenceSample> {
        generate_dataset(&ScenarioConfig {
            d_audio: 4,
            d_text: 3,
            len_audio: (4, 6),
            len_text: (2, 4),
            n_samples: n,
            ..Default::default()
        })
        .unwrap()
    }

    fn small_cfg() -> RunConfig {
        RunConfig { d_h: 4, d_z: 3, k: 2, epochs: 2, batch_size: 4, ..Default::default() }
    }

    #[test]
    fn batching_merges_singletons() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![4, 5]);
        assert_eq!(batches(&order[..1], 4).len(), 1);
        assert_eq!(batches(&order[..8], 4).iter().map(|x| x.len()).collect::<Vec<_>>(), vec![4, 4]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut t = Tensor::row(vec![1.0, -1.0]).unwrap();
        let mut adam = Adam::new(0.1, &[2]);
        adam.step(&mut [&mut t], &[vec![3.0, -0.5]]);
        assert!((t.data()[0] - 0.9).abs() < 1e-8 && (t.data()[1] + 0.9).abs() < 1e-8);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let d = data(10);
        let refs: Vec<&SequenceSample> = d.iter().collect();
        let cfg = RunConfig { learning_rate: 0.0, ..small_cfg() };
        let out = train(&cfg, &refs).unwrap();
        let fresh = FusionModel::new(cfg.model_config(&d[0]).unwrap(), derive_seed(cfg.seed, INIT_STREAM)).unwrap();
        assert_eq!(out.model.params, fresh.params);
        assert_eq!(out.curve.len(), 2);
    }

    #[test]
    fn same_seed_same_model() {
        let d = data(12);
        let refs: Vec<&SequenceSample> = d.iter().collect();
        for strategy in Strategy::ALL {
            let cfg = RunConfig { strategy, ..small_cfg() };
            let a = train(&cfg, &refs).unwrap();
            let b = train(&cfg, &refs).unwrap();
            assert_eq!(a.model, b.model, "{strategy:?}");
            assert_eq!(a.curve, b.curve);
        }
    }

    #[test]
    fn late_fusion_sets_weights_from_validation() {
        let d = data(20);
        let refs: Vec<&SequenceSample> = d.iter().collect();
        let cfg = RunConfig { strategy: Strategy::Late, ..small_cfg() };
        let out = train(&cfg, &refs).unwrap();
        let (la, lt) = (out.val_loss_audio.unwrap(), out.val_loss_text.unwrap());
        assert!((out.model.late_w_audio - (1.0 / la) / (1.0 / la + 1.0 / lt)).abs() < 1e-12);
    }

    #[test]
    fn single_sample_overfits() {
        let d = data(1);
        let refs: Vec<&SequenceSample> = d.iter().collect();
        let cfg = RunConfig {
            strategy: Strategy::Early,
            task: Task::Classification,
            epochs: 500,
            batch_size: 1,
            learning_rate: 1e-2,
            ..small_cfg()
        };
        let out = train(&cfg, &refs).unwrap();
        let last = out.curve.last().unwrap().loss.total;
        assert!(last < 0.01, "{last}");
    }

    #[test]
    fn participant_split_is_disjoint() {
        let d = data(30);
        let refs: Vec<&SequenceSample> = d.iter().collect();
        let (t, v) = split_by_participant(&refs, 0.2, 3);
        assert_eq!(t.len() + v.len(), 30);
        assert_eq!(v.len(), 6);
        assert!(t.iter().all(|a| v.iter().all(|b| a.participant() != b.participant())));
    }
}
