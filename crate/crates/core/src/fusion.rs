//! Fusion strategies: early concatenation, validation-weighted late fusion
//! and variance-weighted temporal context fusion (TCF).

use serde::{Deserialize, Serialize};

use crate::encoder::pool_to_grid;
use crate::error::{invalid, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Per-step convex weights of the two modalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub w_audio: Vec<f64>,
    pub w_text: Vec<f64>,
}

impl FusionWeights {
    /// `w_audio[i] = |S_text[i]| / (|S_audio[i]| + |S_text[i]|)`, and the complement
    /// for text, so the modality with the smaller variance norm dominates.
    pub fn from_norms(norm_audio: &[f64], norm_text: &[f64]) -> Result<Self> {
        if norm_audio.len() != norm_text.len() || norm_audio.is_empty() {
            return invalid("variance norm vectors must be non-empty and of equal length");
        }
        if norm_audio.iter().chain(norm_text).any(|n| !(n.is_finite() && *n > 0.0)) {
            return invalid("variance norms must be positive and finite");
        }
        let w_audio: Vec<f64> = norm_audio.iter().zip(norm_text).map(|(a, t)| t / (a + t)).collect();
        let w_text = norm_audio.iter().zip(norm_text).map(|(a, t)| a / (a + t)).collect();
        Ok(Self { w_audio, w_text })
    }

    /// Equal weights, the context-fusion ablation.
    pub fn equal(k: usize) -> Self {
        Self { w_audio: vec![0.5; k], w_text: vec![0.5; k] }
    }

    pub fn len(&self) -> usize {
        self.w_audio.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w_audio.is_empty()
    }

    pub fn mean_audio(&self) -> f64 {
        self.w_audio.iter().sum::<f64>() / self.w_audio.len() as f64
    }
}

/// Graph form of [`FusionWeights::from_norms`]; inputs and outputs are `K x 1`.
pub fn tcf_weights(g: &mut Graph, norm_audio: Var, norm_text: Var) -> Result<(Var, Var)> {
    if g.dims(norm_audio) != g.dims(norm_text) {
        return invalid("variance norm shapes differ");
    }
    if g.value(norm_audio).data().iter().chain(g.value(norm_text).data()).any(|n| *n <= 0.0) {
        return invalid("variance norms must be positive");
    }
    let total = g.add(norm_audio, norm_text)?;
    let w_audio = g.div(norm_text, total)?;
    let w_text = g.div(norm_audio, total)?;
    Ok((w_audio, w_text))
}

/// Row-wise `w_audio[i] * mu_audio[i] + w_text[i] * mu_text[i]`.
pub fn tcf_fuse(g: &mut Graph, mu_audio: Var, mu_text: Var, w_audio: Var, w_text: Var) -> Result<Var> {
    let (k, _) = g.dims(mu_audio);
    if g.dims(mu_audio) != g.dims(mu_text) {
        return invalid("mean shapes differ");
    }
    if g.dims(w_audio) != (k, 1) || g.dims(w_text) != (k, 1) {
        return invalid("weights must be K x 1");
    }
    let a = g.mul(mu_audio, w_audio)?;
    let t = g.mul(mu_text, w_text)?;
    Ok(g.add(a, t)?)
}

/// Value form of [`tcf_fuse`].
pub fn tcf_fuse_values(mu_audio: &Tensor, mu_text: &Tensor, w: &FusionWeights) -> Result<Tensor> {
    if mu_audio.shape() != mu_text.shape() {
        return invalid("mean shapes differ");
    }
    if w.len() != mu_audio.rows() {
        return invalid("weight count does not match the grid");
    }
    let cols = mu_audio.cols();
    let data = mu_audio
        .data()
        .iter()
        .zip(mu_text.data())
        .enumerate()
        .map(|(i, (a, t))| {
            let r = i / cols;
            w.w_audio[r] * a + w.w_text[r] * t
        })
        .collect();
    Ok(Tensor::new(mu_audio.shape().to_vec(), data)?)
}

/// Pools both modalities onto the `K` grid and concatenates features per step.
pub fn early_fuse(g: &mut Graph, audio: Var, text: Var, k: usize) -> Result<Var> {
    let pa = pool_to_grid(g, audio, k)?;
    let pt = pool_to_grid(g, text, k)?;
    Ok(g.concat(&[pa, pt], 1)?)
}

/// Value form of [`early_fuse`]; output is `K x (D_a + D_t)`.
pub fn early_fuse_values(audio: &Tensor, text: &Tensor, k: usize) -> Result<Tensor> {
    if audio.is_empty() || text.is_empty() {
        return invalid("early fusion needs both modalities");
    }
    let mut g = Graph::new();
    let a = g.constant(audio.clone())?;
    let t = g.constant(text.clone())?;
    let out = early_fuse(&mut g, a, t, k)?;
    Ok(g.value(out).clone())
}

/// Fold-averaged inverse-validation-loss weights `(w_audio, w_text)`.
///
/// Per fold `w_A = (1/L_A) / (1/L_A + 1/L_T)`; the result is the mean over folds.
pub fn late_weights_from_validation(val_loss_audio: &[f64], val_loss_text: &[f64]) -> Result<(f64, f64)> {
    let per_fold = late_weights_per_fold(val_loss_audio, val_loss_text)?;
    let w_audio = per_fold.iter().map(|(a, _)| a).sum::<f64>() / per_fold.len() as f64;
    Ok((w_audio, 1.0 - w_audio))
}

/// Per-fold inverse-loss weights.
pub fn late_weights_per_fold(val_loss_audio: &[f64], val_loss_text: &[f64]) -> Result<Vec<(f64, f64)>> {
    if val_loss_audio.is_empty() || val_loss_audio.len() != val_loss_text.len() {
        return invalid("need equal, non-zero fold counts for late-fusion weights");
    }
    if val_loss_audio.iter().chain(val_loss_text).any(|l| !(l.is_finite() && *l > 0.0)) {
        return invalid("validation losses must be positive");
    }
    Ok(val_loss_audio
        .iter()
        .zip(val_loss_text)
        .map(|(la, lt)| {
            let (ia, it) = (1.0 / la, 1.0 / lt);
            let wa = ia / (ia + it);
            (wa, 1.0 - wa)
        })
        .collect())
}

fn check_distribution(p: &[f64]) -> Result<()> {
    let s: f64 = p.iter().sum();
    if p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (s - 1.0).abs() > 1e-6 {
        return invalid("input is not a probability distribution");
    }
    Ok(())
}

/// Mixture `w_A p_A + (1 - w_A) p_T` of two class distributions.
pub fn late_fuse(p_audio: &[f64], p_text: &[f64], w_audio: f64) -> Result<Vec<f64>> {
    if p_audio.len() != p_text.len() {
        return invalid("distribution lengths differ");
    }
    if !(0.0..=1.0).contains(&w_audio) {
        return invalid("w_audio must lie in [0, 1]");
    }
    check_distribution(p_audio)?;
    check_distribution(p_text)?;
    Ok(p_audio.iter().zip(p_text).map(|(a, t)| w_audio * a + (1.0 - w_audio) * t).collect())
}

/// Strategy label carried by a [`FusionOutcome`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Early,
    Late,
    Context,
    Tcf,
    AudioOnly,
    TextOnly,
}

impl Strategy {
    pub const ALL: [Strategy; 6] =
        [Strategy::Early, Strategy::Late, Strategy::Context, Strategy::Tcf, Strategy::AudioOnly, Strategy::TextOnly];

    pub fn label(self) -> &'static str {
        match self {
            Strategy::Early => "Early Fusion",
            Strategy::Late => "Late Fusion",
            Strategy::Context => "Context Fusion",
            Strategy::Tcf => "TCF",
            Strategy::AudioOnly => "Audio only",
            Strategy::TextOnly => "Text only",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Early => "early",
            Strategy::Late => "late",
            Strategy::Context => "context",
            Strategy::Tcf => "tcf",
            Strategy::AudioOnly => "audio-only",
            Strategy::TextOnly => "text-only",
        }
    }

    /// Whether the model carries two latent encoders joined on the grid.
    pub fn is_context_family(self) -> bool {
        matches!(self, Strategy::Context | Strategy::Tcf)
    }
}

impl std::str::FromStr for Strategy {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| crate::Error::Config(format!("unknown strategy {s:?}")))
    }
}

/// Everything one fused forward pass produces for a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionOutcome {
    pub strategy: Strategy,
    pub weights: Option<FusionWeights>,
    /// `K x d_z` fused context rows.
    pub fused: Option<Vec<Vec<f64>>>,
    pub pred_audio: Option<Vec<f64>>,
    pub pred_text: Option<Vec<f64>>,
    pub pred_fused: Vec<f64>,
}
