//! The trainable fusion model for every strategy.
//!
//! | strategy            | encoders                         | prediction                         |
//! |---------------------|----------------------------------|------------------------------------|
//! | `tcf`, `context`    | audio + text with cross attention | head on mean of fused grid rows    |
//! | `early`             | one GRU over the pooled concat    | head on mean of grid rows          |
//! | `audio-only` etc.   | one encoder, no attention         | head on mean of latent means       |
//! | `late`              | two encoders, no attention        | weighted mixture of the two heads  |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    cross_modal_attend, gru_encode, latent_head, pool_to_grid, sample_latent, standard_normal, EncoderParams,
    EncoderVars, GruParams, GruVars, LatentVars, LinearParams, LinearVars, ParamGroup,
};
use crate::error::{invalid, Error, Result};
use crate::fusion::{early_fuse, late_fuse, tcf_weights, FusionWeights, Strategy};
use crate::metrics::argmax;
use crate::objective::{
    cold_loss_graph, prediction_error, prediction_error_graph, task_loss_graph, total_loss, LossBreakdown,
    LossCoefficients, LossParts, TaskKind,
};
use crate::synth::{ContextTag, SequenceSample, SCORE_NAMES};
use crate::tensor::{softmax, Axis, Graph, Tensor, Var};

pub const NUM_CLASSES: usize = 3;

/// What the model predicts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Task {
    Classification,
    /// Indices into the nine sample scores.
    Regression { targets: Vec<usize> },
}

impl Task {
    pub fn all_scores() -> Self {
        Task::Regression { targets: (0..SCORE_NAMES.len()).collect() }
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            Task::Classification => TaskKind::Classification,
            Task::Regression { .. } => TaskKind::Regression,
        }
    }

    pub fn n_out(&self) -> usize {
        match self {
            Task::Classification => NUM_CLASSES,
            Task::Regression { targets } => targets.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Task::Regression { targets } = self {
            if targets.is_empty() {
                return Err(Error::Config("regression needs at least one target".into()));
            }
            if let Some(t) = targets.iter().find(|t| **t >= SCORE_NAMES.len()) {
                return Err(Error::Config(format!("score index {t} out of range")));
            }
            let mut sorted = targets.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != targets.len() {
                return Err(Error::Config("duplicate regression target".into()));
            }
        }
        Ok(())
    }

    pub fn target_names(&self) -> Vec<&'static str> {
        match self {
            Task::Classification => vec![],
            Task::Regression { targets } => targets.iter().map(|t| SCORE_NAMES[*t]).collect(),
        }
    }

    /// Raw target: one-hot class or selected scores.
    pub fn raw_target(&self, s: &SequenceSample) -> Vec<f64> {
        match self {
            Task::Classification => s.class_label.one_hot(),
            Task::Regression { targets } => targets.iter().map(|t| s.scores[*t]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub strategy: Strategy,
    pub task: Task,
    pub d_audio: usize,
    pub d_text: usize,
    pub d_h: usize,
    pub d_z: usize,
    pub k: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.d_audio, self.d_text, self.d_h, self.d_z, self.k].contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        self.task.validate()
    }
}

/// Per-feature affine standardisation fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(d: usize) -> Self {
        Self { mean: vec![0.0; d], std: vec![1.0; d] }
    }

    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]>, d: usize) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for r in rows {
            if r.len() != d {
                return invalid(format!("row width {} != {d}", r.len()));
            }
            n += 1;
            for j in 0..d {
                sum[j] += r[j];
                sq[j] += r[j] * r[j];
            }
        }
        if n == 0 {
            return invalid("cannot fit a normaliser on no rows");
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let v = (s / n as f64 - m * m).max(0.0).sqrt();
                if v > 1e-12 {
                    v
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| (x - m) / s).collect()
    }

    pub fn invert(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| x * s + m).collect()
    }

    fn matrix(&self, rows: &[Vec<f64>]) -> Result<Tensor> {
        let d = self.mean.len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.len() != d {
                return invalid(format!("feature width {} does not match the model ({d})", r.len()));
            }
            data.extend(self.apply(r));
        }
        Ok(Tensor::matrix(rows.len(), d, data)?)
    }
}

/// Trainable tensors; which groups exist depends on the strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub audio: Option<EncoderParams>,
    pub text: Option<EncoderParams>,
    pub early_gru: Option<GruParams>,
    pub early_proj: Option<LinearParams>,
    pub head_fused: Option<LinearParams>,
    pub head_audio: Option<LinearParams>,
    pub head_text: Option<LinearParams>,
}

#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub audio: Option<EncoderVars>,
    pub text: Option<EncoderVars>,
    pub early_gru: Option<GruVars>,
    pub early_proj: Option<LinearVars>,
    pub head_fused: Option<LinearVars>,
    pub head_audio: Option<LinearVars>,
    pub head_text: Option<LinearVars>,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let n_out = cfg.task.n_out();
        let (d_h, d_z) = (cfg.d_h, cfg.d_z);
        let mut p = ModelParams {
            audio: None,
            text: None,
            early_gru: None,
            early_proj: None,
            head_fused: None,
            head_audio: None,
            head_text: None,
        };
        match cfg.strategy {
            Strategy::Tcf | Strategy::Context => {
                p.audio = Some(EncoderParams::init(cfg.d_audio, d_h, d_z, true, rng));
                p.text = Some(EncoderParams::init(cfg.d_text, d_h, d_z, true, rng));
                p.head_fused = Some(LinearParams::init(d_z, n_out, rng));
                p.head_audio = Some(LinearParams::init(d_z, n_out, rng));
                p.head_text = Some(LinearParams::init(d_z, n_out, rng));
            }
            Strategy::Early => {
                p.early_gru = Some(GruParams::init(cfg.d_audio + cfg.d_text, d_h, rng));
                p.early_proj = Some(LinearParams::init(d_h, d_z, rng));
                p.head_fused = Some(LinearParams::init(d_z, n_out, rng));
            }
            Strategy::AudioOnly => {
                p.audio = Some(EncoderParams::init(cfg.d_audio, d_h, d_z, false, rng));
                p.head_audio = Some(LinearParams::init(d_z, n_out, rng));
            }
            Strategy::TextOnly => {
                p.text = Some(EncoderParams::init(cfg.d_text, d_h, d_z, false, rng));
                p.head_text = Some(LinearParams::init(d_z, n_out, rng));
            }
            Strategy::Late => {
                p.audio = Some(EncoderParams::init(cfg.d_audio, d_h, d_z, false, rng));
                p.text = Some(EncoderParams::init(cfg.d_text, d_h, d_z, false, rng));
                p.head_audio = Some(LinearParams::init(d_z, n_out, rng));
                p.head_text = Some(LinearParams::init(d_z, n_out, rng));
            }
        }
        p
    }
}

impl ParamGroup for ModelParams {
    type Vars = ModelVars;

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        if let Some(x) = &self.audio {
            x.named(&p("audio"), out);
        }
        if let Some(x) = &self.text {
            x.named(&p("text"), out);
        }
        if let Some(x) = &self.early_gru {
            x.named(&p("early.gru"), out);
        }
        if let Some(x) = &self.early_proj {
            x.named(&p("early.proj"), out);
        }
        if let Some(x) = &self.head_fused {
            x.named(&p("head.fused"), out);
        }
        if let Some(x) = &self.head_audio {
            x.named(&p("head.audio"), out);
        }
        if let Some(x) = &self.head_text {
            x.named(&p("head.text"), out);
        }
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        if let Some(x) = &mut self.audio {
            x.named_mut(&p("audio"), out);
        }
        if let Some(x) = &mut self.text {
            x.named_mut(&p("text"), out);
        }
        if let Some(x) = &mut self.early_gru {
            x.named_mut(&p("early.gru"), out);
        }
        if let Some(x) = &mut self.early_proj {
            x.named_mut(&p("early.proj"), out);
        }
        if let Some(x) = &mut self.head_fused {
            x.named_mut(&p("head.fused"), out);
        }
        if let Some(x) = &mut self.head_audio {
            x.named_mut(&p("head.audio"), out);
        }
        if let Some(x) = &mut self.head_text {
            x.named_mut(&p("head.text"), out);
        }
    }

    fn attach(&self, leaves: &mut dyn Iterator<Item = Var>) -> ModelVars {
        ModelVars {
            audio: self.audio.as_ref().map(|x| x.attach(leaves)),
            text: self.text.as_ref().map(|x| x.attach(leaves)),
            early_gru: self.early_gru.as_ref().map(|x| x.attach(leaves)),
            early_proj: self.early_proj.as_ref().map(|x| x.attach(leaves)),
            head_fused: self.head_fused.as_ref().map(|x| x.attach(leaves)),
            head_audio: self.head_audio.as_ref().map(|x| x.attach(leaves)),
            head_text: self.head_text.as_ref().map(|x| x.attach(leaves)),
        }
    }
}

/// A sample standardised and converted for the model.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    pub participant: String,
    pub context: ContextTag,
    pub audio: Tensor,
    pub text: Tensor,
    /// One-hot class or standardised scores.
    pub target: Vec<f64>,
    pub label: usize,
    pub raw_target: Vec<f64>,
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct SampleVars {
    /// Head output of the joint prediction (logits or standardised values).
    pub fused: Option<Var>,
    pub audio: Option<Var>,
    pub text: Option<Var>,
    pub latent_audio: Option<LatentVars>,
    pub latent_text: Option<LatentVars>,
    /// `K x 1` weights, context family only.
    pub w_audio: Option<Var>,
    pub w_text: Option<Var>,
}

/// Inference result for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub context: ContextTag,
    /// Class probabilities, or scores in original units.
    pub output: Vec<f64>,
    pub audio: Option<Vec<f64>>,
    pub text: Option<Vec<f64>>,
    pub weights: Option<FusionWeights>,
    /// Mean over grid steps of the variance norm.
    pub var_norm_audio: Option<f64>,
    pub var_norm_text: Option<f64>,
    /// Squared error of the unimodal predictions in training units.
    pub error_audio: Option<f64>,
    pub error_text: Option<f64>,
    pub label: usize,
    pub raw_target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub audio_norm: Normalizer,
    pub text_norm: Normalizer,
    pub target_norm: Normalizer,
    /// Mixture weight of the audio head for late fusion.
    pub late_w_audio: f64,
}

impl FusionModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init(&config, &mut rng);
        let n_out = config.task.n_out();
        Ok(Self {
            audio_norm: Normalizer::identity(config.d_audio),
            text_norm: Normalizer::identity(config.d_text),
            target_norm: Normalizer::identity(n_out),
            config,
            params,
            late_w_audio: 0.5,
        })
    }

    /// Fits feature and (for regression) target standardisation on `train`.
    pub fn fit_normalizers(&mut self, train: &[SequenceSample]) -> Result<()> {
        if train.is_empty() {
            return invalid("no training samples");
        }
        self.audio_norm =
            Normalizer::fit(train.iter().flat_map(|s| s.audio_features.iter().map(Vec::as_slice)), self.config.d_audio)?;
        self.text_norm =
            Normalizer::fit(train.iter().flat_map(|s| s.text_features.iter().map(Vec::as_slice)), self.config.d_text)?;
        if let Task::Regression { .. } = self.config.task {
            let targets: Vec<Vec<f64>> = train.iter().map(|s| self.config.task.raw_target(s)).collect();
            self.target_norm = Normalizer::fit(targets.iter().map(Vec::as_slice), self.config.task.n_out())?;
        }
        Ok(())
    }

    pub fn prepare(&self, s: &SequenceSample) -> Result<Prepared> {
        s.validate()?;
        let raw_target = self.config.task.raw_target(s);
        let target = match self.config.task {
            Task::Classification => raw_target.clone(),
            Task::Regression { .. } => self.target_norm.apply(&raw_target),
        };
        Ok(Prepared {
            id: s.id.clone(),
            participant: s.participant().to_string(),
            context: s.context_tag,
            audio: self.audio_norm.matrix(&s.audio_features)?,
            text: self.text_norm.matrix(&s.text_features)?,
            target,
            label: s.class_label.index(),
            raw_target,
        })
    }

    pub fn prepare_all(&self, data: &[SequenceSample]) -> Result<Vec<Prepared>> {
        data.iter().map(|s| self.prepare(s)).collect()
    }

    fn encode(
        &self,
        g: &mut Graph,
        enc: &EncoderVars,
        states: Var,
        other: Option<Var>,
    ) -> Result<LatentVars> {
        let mut ctx = states;
        if let (Some(att), Some(o)) = (enc.attention, other) {
            let a = cross_modal_attend(g, states, o, &att)?;
            ctx = g.add(states, a.context)?;
        }
        let pooled = pool_to_grid(g, ctx, self.config.k)?;
        latent_head(g, pooled, &enc.head)
    }

    /// Builds the forward pass of one sample whose inputs are already on the graph.
    ///
    /// With `rng` the unimodal heads of the context family read reparameterised
    /// latent draws; without it they read the means.
    pub fn forward_vars(
        &self,
        g: &mut Graph,
        v: &ModelVars,
        audio: Var,
        text: Var,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<SampleVars> {
        let k = self.config.k;
        let mut out = SampleVars {
            fused: None,
            audio: None,
            text: None,
            latent_audio: None,
            latent_text: None,
            w_audio: None,
            w_text: None,
        };
        let head = |g: &mut Graph, h: &Option<LinearVars>, x: Var| -> Result<Var> {
            let pooled = g.mean(x, Axis::Rows)?;
            h.as_ref().ok_or_else(|| Error::Invalid("missing prediction head".into()))?.apply(g, pooled)
        };
        match self.config.strategy {
            Strategy::Tcf | Strategy::Context => {
                let (ea, et) = (v.audio.expect("audio encoder"), v.text.expect("text encoder"));
                let ha = gru_encode(g, audio, &ea.gru)?;
                let ht = gru_encode(g, text, &et.gru)?;
                let la = self.encode(g, &ea, ha, Some(ht))?;
                let lt = self.encode(g, &et, ht, Some(ha))?;
                let (wa, wt) = if self.config.strategy == Strategy::Tcf {
                    tcf_weights(g, la.var_norm, lt.var_norm)?
                } else {
                    let half = g.constant(Tensor::filled(k, 1, 0.5))?;
                    (half, half)
                };
                let fused = crate::fusion::tcf_fuse(g, la.mu, lt.mu, wa, wt)?;
                out.fused = Some(head(g, &v.head_fused, fused)?);
                let (za, zt) = match rng {
                    Some(rng) => {
                        let d_z = self.config.d_z;
                        let na = standard_normal(rng, k, d_z);
                        let nt = standard_normal(rng, k, d_z);
                        (sample_latent(g, &la, na)?, sample_latent(g, &lt, nt)?)
                    }
                    None => (la.mu, lt.mu),
                };
                out.audio = Some(head(g, &v.head_audio, za)?);
                out.text = Some(head(g, &v.head_text, zt)?);
                out.latent_audio = Some(la);
                out.latent_text = Some(lt);
                out.w_audio = Some(wa);
                out.w_text = Some(wt);
            }
            Strategy::Early => {
                let x = early_fuse(g, audio, text, k)?;
                let h = gru_encode(g, x, &v.early_gru.expect("early gru"))?;
                let z = v.early_proj.expect("early projection").apply(g, h)?;
                out.fused = Some(head(g, &v.head_fused, z)?);
            }
            Strategy::AudioOnly | Strategy::TextOnly | Strategy::Late => {
                if let Some(ea) = v.audio {
                    let h = gru_encode(g, audio, &ea.gru)?;
                    let la = self.encode(g, &ea, h, None)?;
                    out.audio = Some(head(g, &v.head_audio, la.mu)?);
                    out.latent_audio = Some(la);
                }
                if let Some(et) = v.text {
                    let h = gru_encode(g, text, &et.gru)?;
                    let lt = self.encode(g, &et, h, None)?;
                    out.text = Some(head(g, &v.head_text, lt.mu)?);
                    out.latent_text = Some(lt);
                }
            }
        }
        Ok(out)
    }

    /// Mean batch loss on a graph whose parameters are bound to `v`.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        v: &ModelVars,
        batch: &[&Prepared],
        rng: &mut ChaCha8Rng,
        coeffs: LossCoefficients,
    ) -> Result<(Var, LossBreakdown)> {
        if batch.is_empty() {
            return invalid("empty batch");
        }
        let kind = self.config.task.kind();
        let (mut tf, mut ta, mut tt, mut errs, mut sig) = (vec![], vec![], vec![], vec![], vec![]);
        let family = self.config.strategy.is_context_family();
        for s in batch {
            let a = g.constant(s.audio.clone())?;
            let t = g.constant(s.text.clone())?;
            let o = self.forward_vars(g, v, a, t, family.then_some(&mut *rng))?;
            if let Some(f) = o.fused {
                tf.push(task_loss_graph(g, f, &s.target, kind)?);
            }
            if let Some(x) = o.audio {
                ta.push(task_loss_graph(g, x, &s.target, kind)?);
            }
            if let Some(x) = o.text {
                tt.push(task_loss_graph(g, x, &s.target, kind)?);
            }
            if family {
                let (la, lt) = (o.latent_audio.expect("latent"), o.latent_text.expect("latent"));
                errs.push(prediction_error_graph(g, o.audio.expect("audio head"), &s.target, kind)?);
                errs.push(prediction_error_graph(g, o.text.expect("text head"), &s.target, kind)?);
                sig.push(g.mean(la.var_norm, Axis::All)?);
                sig.push(g.mean(lt.var_norm, Axis::All)?);
            }
        }
        let mean = |g: &mut Graph, xs: &[Var]| -> Result<Option<Var>> {
            if xs.is_empty() {
                return Ok(None);
            }
            let c = g.concat(xs, 1)?;
            Ok(Some(g.mean(c, Axis::All)?))
        };
        let (tf, ta, tt) = (mean(g, &tf)?, mean(g, &ta)?, mean(g, &tt)?);
        let parts = match self.config.strategy {
            Strategy::Tcf | Strategy::Context => {
                let l_co = if batch.len() >= 2 {
                    let e = g.concat(&errs, 1)?;
                    let s = g.concat(&sig, 1)?;
                    Some(cold_loss_graph(g, e, s)?)
                } else {
                    None
                };
                LossParts { task_fused: tf.expect("fused"), task_audio: ta, task_text: tt, l_co }
            }
            Strategy::Early => LossParts { task_fused: tf.expect("fused"), task_audio: None, task_text: None, l_co: None },
            Strategy::AudioOnly => LossParts { task_fused: ta.expect("audio"), task_audio: None, task_text: None, l_co: None },
            Strategy::TextOnly => LossParts { task_fused: tt.expect("text"), task_audio: None, task_text: None, l_co: None },
            Strategy::Late => {
                // two independent unimodal models trained side by side
                let sum = g.add(ta.expect("audio"), tt.expect("text"))?;
                LossParts { task_fused: sum, task_audio: None, task_text: None, l_co: None }
            }
        };
        total_loss(g, parts, coeffs)
    }

    fn output_values(&self, raw: &[f64]) -> Result<Vec<f64>> {
        Ok(match self.config.task {
            Task::Classification => softmax(raw)?,
            Task::Regression { .. } => self.target_norm.invert(raw),
        })
    }

    fn error_of(&self, raw: &[f64], target: &[f64]) -> Result<f64> {
        match self.config.task {
            Task::Classification => prediction_error(&softmax(raw)?, target),
            Task::Regression { .. } => prediction_error(raw, target),
        }
    }

    /// Deterministic predictions from latent means.
    pub fn predict(&self, samples: &[Prepared]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(32) {
            let mut g = Graph::new();
            let mut named = Vec::new();
            self.params.named("", &mut named);
            let leaves = named.iter().map(|(_, t)| g.constant((*t).clone())).collect::<std::result::Result<Vec<_>, _>>()?;
            let v = self.params.attach(&mut leaves.iter().copied());
            for s in chunk {
                let a = g.constant(s.audio.clone())?;
                let t = g.constant(s.text.clone())?;
                let o = self.forward_vars(&mut g, &v, a, t, None)?;
                out.push(self.read_prediction(&g, &o, s)?);
            }
        }
        Ok(out)
    }

    fn read_prediction(&self, g: &Graph, o: &SampleVars, s: &Prepared) -> Result<Prediction> {
        let raw = |v: Option<Var>| v.map(|v| g.value(v).data().to_vec());
        let (ra, rt, rf) = (raw(o.audio), raw(o.text), raw(o.fused));
        let audio = ra.as_deref().map(|r| self.output_values(r)).transpose()?;
        let text = rt.as_deref().map(|r| self.output_values(r)).transpose()?;
        let output = match (self.config.strategy, &rf) {
            (_, Some(f)) => self.output_values(f)?,
            (Strategy::AudioOnly, None) => audio.clone().expect("audio head"),
            (Strategy::TextOnly, None) => text.clone().expect("text head"),
            (Strategy::Late, None) => {
                let (pa, pt) = (audio.as_ref().expect("audio"), text.as_ref().expect("text"));
                match self.config.task {
                    Task::Classification => late_fuse(pa, pt, self.late_w_audio)?,
                    Task::Regression { .. } => {
                        pa.iter().zip(pt).map(|(a, t)| self.late_w_audio * a + (1.0 - self.late_w_audio) * t).collect()
                    }
                }
            }
            _ => return invalid("model produced no prediction"),
        };
        let weights = match (o.w_audio, o.w_text) {
            (Some(wa), Some(wt)) => Some(FusionWeights {
                w_audio: g.value(wa).data().to_vec(),
                w_text: g.value(wt).data().to_vec(),
            }),
            _ => None,
        };
        let sigma = |l: Option<LatentVars>| l.map(|l| crate::metrics::mean(g.value(l.var_norm).data()));
        Ok(Prediction {
            id: s.id.clone(),
            context: s.context,
            output,
            error_audio: ra.as_deref().map(|r| self.error_of(r, &s.target)).transpose()?,
            error_text: rt.as_deref().map(|r| self.error_of(r, &s.target)).transpose()?,
            audio,
            text,
            weights,
            var_norm_audio: sigma(o.latent_audio),
            var_norm_text: sigma(o.latent_text),
            label: s.label,
            raw_target: s.raw_target.clone(),
        })
    }

    /// Every stored tensor, trainable parameters first, in a fixed order.
    pub fn state(&self) -> Result<Vec<(String, Tensor)>> {
        let mut named = Vec::new();
        self.params.named("", &mut named);
        let mut out: Vec<(String, Tensor)> = named.into_iter().map(|(n, t)| (n, t.clone())).collect();
        for (name, n) in [("norm.audio", &self.audio_norm), ("norm.text", &self.text_norm), ("norm.target", &self.target_norm)] {
            out.push((format!("{name}.mean"), Tensor::row(n.mean.clone())?));
            out.push((format!("{name}.std"), Tensor::row(n.std.clone())?));
        }
        out.push(("late.w_audio".into(), Tensor::scalar(self.late_w_audio)?));
        Ok(out)
    }

    /// Rebuilds a model from [`FusionModel::state`] output.
    pub fn from_state(config: ModelConfig, state: &[(String, Tensor)]) -> Result<Self> {
        let mut model = FusionModel::new(config, 0)?;
        let lookup = |name: &str| -> Result<&Tensor> {
            state
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))
        };
        {
            let mut named = Vec::new();
            model.params.named_mut("", &mut named);
            for (name, t) in named {
                let src = lookup(&name)?;
                if src.shape() != t.shape() {
                    return Err(Error::Format(format!("tensor {name}: shape {:?} != {:?}", src.shape(), t.shape())));
                }
                t.data_mut().copy_from_slice(src.data());
            }
        }
        let norm = |name: &str, d: usize| -> Result<Normalizer> {
            let mean = lookup(&format!("{name}.mean"))?.data().to_vec();
            let std = lookup(&format!("{name}.std"))?.data().to_vec();
            if mean.len() != d || std.len() != d {
                return Err(Error::Format(format!("normaliser {name} has the wrong width")));
            }
            Ok(Normalizer { mean, std })
        };
        model.audio_norm = norm("norm.audio", model.config.d_audio)?;
        model.text_norm = norm("norm.text", model.config.d_text)?;
        model.target_norm = norm("norm.target", model.config.task.n_out())?;
        model.late_w_audio = lookup("late.w_audio")?.data()[0];
        let expected = model.state()?.len();
        if state.len() != expected {
            return Err(Error::Format(format!("checkpoint has {} tensors, expected {expected}", state.len())));
        }
        Ok(model)
    }

    /// Predicted class (or the full output for regression) used by attribution.
    pub fn predicted_class(p: &Prediction) -> usize {
        argmax(&p.output)
    }
}
