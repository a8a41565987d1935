//! Synthetic two-modality sequence data with a known latent trait.
//!
//! Every sample carries a trait `z ~ U[0, 1]` that fixes its class and its
//! nine scores. Each audio or text frame is an affine image of `z - 0.5`
//! along a fixed random direction, modulated over time by a context-specific
//! sinusoid, plus isotropic Gaussian noise of a per-sample scale. Because the
//! maps are known, [`Generator::posterior`] gives the exact class posterior.

mod cluster;

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

pub use cluster::{topic_cluster, TopicCluster, TopicDictionary, MAX_EDIT_DISTANCE};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextTag {
    Interview,
    Tat,
    Panss,
    Discourse,
}

impl ContextTag {
    pub const ALL: [ContextTag; 4] = [ContextTag::Interview, ContextTag::Tat, ContextTag::Panss, ContextTag::Discourse];

    pub fn as_str(self) -> &'static str {
        match self {
            ContextTag::Interview => "interview",
            ContextTag::Tat => "tat",
            ContextTag::Panss => "panss",
            ContextTag::Discourse => "discourse",
        }
    }

    /// Frequency (cycles per sequence) and phase of the temporal modulation.
    fn modulation(self) -> (f64, f64) {
        match self {
            ContextTag::Interview => (1.0, 0.0),
            ContextTag::Tat => (2.0, 0.5),
            ContextTag::Panss => (0.5, 1.0),
            ContextTag::Discourse => (3.0, 1.5),
        }
    }
}

impl std::fmt::Display for ContextTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ContextTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ContextTag::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown context {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Low,
    High,
    Patient,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::Low, ClassLabel::High, ClassLabel::Patient];
    pub const THRESHOLDS: [f64; 2] = [1.0 / 3.0, 2.0 / 3.0];

    pub fn from_trait(z: f64) -> Self {
        if z < Self::THRESHOLDS[0] {
            ClassLabel::Low
        } else if z < Self::THRESHOLDS[1] {
            ClassLabel::High
        } else {
            ClassLabel::Patient
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn one_hot(self) -> Vec<f64> {
        let mut v = vec![0.0; 3];
        v[self.index()] = 1.0;
        v
    }
}

/// Names of the nine score targets, in sample order.
pub const SCORE_NAMES: [&str; 9] =
    ["PANSS-Pos", "PANSS-Neg", "MSS-CP", "MSS-IP", "MSS-DO", "OLIFE-UE", "OLIFE-IA", "OLIFE-CD", "OLIFE-IN"];

/// Instrument range `(min, max)` of each score.
pub const SCORE_RANGES: [(f64, f64); 9] = [
    (7.0, 49.0),
    (7.0, 49.0),
    (0.0, 26.0),
    (0.0, 26.0),
    (0.0, 25.0),
    (0.0, 30.0),
    (0.0, 27.0),
    (0.0, 24.0),
    (0.0, 23.0),
];

/// Fraction of each range at `z = 0` and per-unit-`z` slope.
const SCORE_LOADINGS: [(f64, f64); 9] = [
    (0.05, 0.85),
    (0.10, 0.70),
    (0.05, 0.80),
    (0.10, 0.65),
    (0.15, 0.60),
    (0.05, 0.90),
    (0.10, 0.75),
    (0.05, 0.70),
    (0.10, 0.80),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    pub id: String,
    pub context_tag: ContextTag,
    /// `T_a` rows of `D_a` features.
    pub audio_features: Vec<Vec<f64>>,
    /// `T_t` rows of `D_t` features.
    pub text_features: Vec<Vec<f64>>,
    pub class_label: ClassLabel,
    pub scores: Vec<f64>,
    pub noise_scale_audio: f64,
    pub noise_scale_text: f64,
}

impl SequenceSample {
    /// Participant key: the id up to the first `'-'`.
    pub fn participant(&self) -> &str {
        self.id.split('-').next().unwrap_or(&self.id)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |rows: &Vec<Vec<f64>>, what: &str| -> Result<()> {
            if rows.is_empty() || rows[0].is_empty() {
                return invalid(format!("{}: empty {what} sequence", self.id));
            }
            let d = rows[0].len();
            if rows.iter().any(|r| r.len() != d || r.iter().any(|x| !x.is_finite())) {
                return invalid(format!("{}: ragged or non-finite {what} features", self.id));
            }
            Ok(())
        };
        check(&self.audio_features, "audio")?;
        check(&self.text_features, "text")?;
        if self.scores.len() != SCORE_NAMES.len() {
            return invalid(format!("{}: expected {} scores", self.id, SCORE_NAMES.len()));
        }
        Ok(())
    }
}

/// Distribution of the per-sample noise scale of one modality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseDistribution {
    Constant { value: f64 },
    Uniform { low: f64, high: f64 },
    LogUniform { low: f64, high: f64 },
    /// `high` with probability `p_high`, else `low`.
    TwoLevel { low: f64, high: f64, p_high: f64 },
}

impl NoiseDistribution {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            NoiseDistribution::Constant { value } => value.is_finite() && value >= 0.0,
            NoiseDistribution::Uniform { low, high } => low.is_finite() && high.is_finite() && 0.0 <= low && low <= high,
            NoiseDistribution::LogUniform { low, high } => high.is_finite() && 0.0 < low && low <= high,
            NoiseDistribution::TwoLevel { low, high, p_high } => {
                low.is_finite() && high.is_finite() && low >= 0.0 && high >= 0.0 && (0.0..=1.0).contains(&p_high)
            }
        };
        if !ok {
            return invalid(format!("invalid noise distribution {self:?}"));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            NoiseDistribution::Constant { value } => value,
            NoiseDistribution::Uniform { low, high } => low + (high - low) * rng.gen::<f64>(),
            NoiseDistribution::LogUniform { low, high } => (low.ln() + (high.ln() - low.ln()) * rng.gen::<f64>()).exp(),
            NoiseDistribution::TwoLevel { low, high, p_high } => {
                if rng.gen::<f64>() < p_high {
                    high
                } else {
                    low
                }
            }
        }
    }

    /// The same distribution with every scale multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        match *self {
            NoiseDistribution::Constant { value } => NoiseDistribution::Constant { value: value * c },
            NoiseDistribution::Uniform { low, high } => NoiseDistribution::Uniform { low: low * c, high: high * c },
            NoiseDistribution::LogUniform { low, high } => NoiseDistribution::LogUniform { low: low * c, high: high * c },
            NoiseDistribution::TwoLevel { low, high, p_high } => {
                NoiseDistribution::TwoLevel { low: low * c, high: high * c, p_high }
            }
        }
    }
}

/// How much of the trait signal each modality carries in one context.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextShare {
    pub tag: ContextTag,
    pub audio_share: f64,
    pub text_share: f64,
}

impl ContextShare {
    pub fn new(tag: ContextTag, audio_share: f64) -> Self {
        Self { tag, audio_share, text_share: 1.0 - audio_share }
    }
}

fn default_contexts() -> Vec<ContextShare> {
    vec![
        ContextShare::new(ContextTag::Interview, 0.5),
        ContextShare::new(ContextTag::Tat, 0.25),
        ContextShare::new(ContextTag::Panss, 0.75),
        ContextShare::new(ContextTag::Discourse, 0.1),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    /// Samples are assigned to contexts round-robin in this order.
    pub contexts: Vec<ContextShare>,
    pub d_audio: usize,
    pub d_text: usize,
    /// Inclusive length range of audio sequences.
    pub len_audio: (usize, usize),
    pub len_text: (usize, usize),
    pub noise_audio: NoiseDistribution,
    pub noise_text: NoiseDistribution,
    pub n_samples: usize,
    /// Consecutive samples sharing one participant and trait.
    pub samples_per_participant: usize,
    /// Length of the trait direction in feature space at share 1.
    pub signal_gain: f64,
    /// Standard deviation of score noise as a fraction of each range.
    pub score_noise: f64,
    pub seed: u64,
    /// Seed of the fixed maps; defaults to `seed`. Datasets drawn with
    /// different `seed` but one `map_seed` share the same generator.
    pub map_seed: Option<u64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            contexts: default_contexts(),
            d_audio: 88,
            d_text: 32,
            len_audio: (24, 48),
            len_text: (8, 16),
            noise_audio: NoiseDistribution::LogUniform { low: 0.5, high: 2.0 },
            noise_text: NoiseDistribution::LogUniform { low: 0.5, high: 2.0 },
            n_samples: 300,
            samples_per_participant: 1,
            signal_gain: 2.0,
            score_noise: 0.05,
            seed: 0,
            map_seed: None,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.contexts.is_empty() {
            return invalid("scenario needs at least one context");
        }
        for (i, c) in self.contexts.iter().enumerate() {
            if !(0.0..=1.0).contains(&c.audio_share) || !(0.0..=1.0).contains(&c.text_share) {
                return invalid(format!("{}: shares must lie in [0, 1]", c.tag));
            }
            if (c.audio_share + c.text_share - 1.0).abs() > 1e-9 {
                return invalid(format!("{}: audio_share + text_share must equal 1", c.tag));
            }
            if self.contexts[..i].iter().any(|o| o.tag == c.tag) {
                return invalid(format!("context {} listed twice", c.tag));
            }
        }
        if self.d_audio == 0 || self.d_text == 0 {
            return invalid("feature dimensions must be positive");
        }
        for (name, (lo, hi)) in [("audio", self.len_audio), ("text", self.len_text)] {
            if lo == 0 || lo > hi {
                return invalid(format!("{name} length range must satisfy 1 <= min <= max"));
            }
        }
        if self.n_samples == 0 || self.samples_per_participant == 0 {
            return invalid("sample counts must be positive");
        }
        if !(self.signal_gain.is_finite() && self.signal_gain > 0.0) {
            return invalid("signal_gain must be positive");
        }
        if !(self.score_noise.is_finite() && self.score_noise >= 0.0) {
            return invalid("score_noise must be nonnegative");
        }
        self.noise_audio.validate()?;
        self.noise_text.validate()
    }

    pub fn share(&self, tag: ContextTag) -> Option<ContextShare> {
        self.contexts.iter().copied().find(|c| c.tag == tag)
    }
}

/// Mixes a master seed with a stream index.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut x = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

const PARTICIPANT_STREAM: u64 = 0x7061_7274;
const MAP_STREAM: u64 = 0x6d61_7073;

fn modulation(tag: ContextTag, t: usize, len: usize) -> f64 {
    let (freq, phase) = tag.modulation();
    1.0 + 0.5 * (std::f64::consts::TAU * freq * t as f64 / len as f64 + phase).sin()
}

struct ModalityMap {
    direction: Vec<f64>,
    offset: Vec<f64>,
}

impl ModalityMap {
    fn draw(rng: &mut impl Rng, d: usize) -> Self {
        let raw: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let direction = raw.iter().map(|x| x / norm).collect();
        let offset = (0..d).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        Self { direction, offset }
    }

    /// Least-squares evidence about `w = z - 0.5`: returns `(sum a_t y_t, sum a_t^2)`
    /// where `a_t` is the per-frame gain along the direction.
    fn evidence(&self, frames: &[Vec<f64>], gain: f64, tag: ContextTag) -> (f64, f64) {
        let len = frames.len();
        let mut num = 0.0;
        let mut den = 0.0;
        for (t, x) in frames.iter().enumerate() {
            let a = gain * modulation(tag, t, len);
            let proj: f64 = x.iter().zip(&self.offset).zip(&self.direction).map(|((x, b), u)| (x - b) * u).sum();
            num += a * proj;
            den += a * a;
        }
        (num, den)
    }
}

/// A scenario with its fixed maps drawn.
pub struct Generator {
    cfg: ScenarioConfig,
    audio: ModalityMap,
    text: ModalityMap,
}

impl Generator {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.map_seed.unwrap_or(cfg.seed), MAP_STREAM));
        let audio = ModalityMap::draw(&mut rng, cfg.d_audio);
        let text = ModalityMap::draw(&mut rng, cfg.d_text);
        Ok(Self { cfg: cfg.clone(), audio, text })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    fn participant_trait(&self, p: usize) -> (f64, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed ^ PARTICIPANT_STREAM, p as u64));
        let z: f64 = rng.gen();
        let scores = SCORE_RANGES
            .iter()
            .zip(SCORE_LOADINGS)
            .map(|(&(lo, hi), (base, slope))| {
                let eps: f64 = rng.sample(StandardNormal);
                let frac = (base + slope * z + self.cfg.score_noise * eps).clamp(0.0, 1.0);
                lo + (hi - lo) * frac
            })
            .collect();
        (z, scores)
    }

    fn frames(
        map: &ModalityMap,
        rng: &mut impl Rng,
        len: usize,
        gain: f64,
        w: f64,
        noise: f64,
        tag: ContextTag,
    ) -> Vec<Vec<f64>> {
        (0..len)
            .map(|t| {
                let a = gain * modulation(tag, t, len) * w;
                map.direction
                    .iter()
                    .zip(&map.offset)
                    .map(|(u, b)| a * u + b + noise * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    }

    /// The `i`-th sample; depends only on the config and `i`.
    pub fn sample(&self, i: usize) -> SequenceSample {
        let cfg = &self.cfg;
        let p = i / cfg.samples_per_participant;
        let (z, scores) = self.participant_trait(p);
        let ctx = cfg.contexts[i % cfg.contexts.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, i as u64));
        let t_a = rng.gen_range(cfg.len_audio.0..=cfg.len_audio.1);
        let t_t = rng.gen_range(cfg.len_text.0..=cfg.len_text.1);
        let s_a = cfg.noise_audio.sample(&mut rng);
        let s_t = cfg.noise_text.sample(&mut rng);
        let w = z - 0.5;
        let audio = Self::frames(&self.audio, &mut rng, t_a, cfg.signal_gain * ctx.audio_share, w, s_a, ctx.tag);
        let text = Self::frames(&self.text, &mut rng, t_t, cfg.signal_gain * ctx.text_share, w, s_t, ctx.tag);
        SequenceSample {
            id: format!("p{p:05}-s{i:06}"),
            context_tag: ctx.tag,
            audio_features: audio,
            text_features: text,
            class_label: ClassLabel::from_trait(z),
            scores,
            noise_scale_audio: s_a,
            noise_scale_text: s_t,
        }
    }

    pub fn generate(&self) -> Vec<SequenceSample> {
        (0..self.cfg.n_samples).map(|i| self.sample(i)).collect()
    }

    /// Exact class posterior of `sample` under this generator.
    ///
    /// The evidence about `w = z - 0.5` is Gaussian with precision
    /// `sum_t a_t^2 / s^2` per modality; combined with the uniform prior this
    /// gives a normal truncated to `[0, 1]`.
    pub fn posterior(&self, sample: &SequenceSample) -> Result<Vec<f64>> {
        sample.validate()?;
        if sample.audio_features[0].len() != self.cfg.d_audio || sample.text_features[0].len() != self.cfg.d_text {
            return invalid("sample dimensions do not match the scenario");
        }
        let ctx = self
            .cfg
            .share(sample.context_tag)
            .ok_or_else(|| Error::Invalid(format!("context {} not in scenario", sample.context_tag)))?;
        let parts = [
            (self.audio.evidence(&sample.audio_features, self.cfg.signal_gain * ctx.audio_share, ctx.tag), sample.noise_scale_audio),
            (self.text.evidence(&sample.text_features, self.cfg.signal_gain * ctx.text_share, ctx.tag), sample.noise_scale_text),
        ];
        // a noiseless modality with signal pins the trait exactly
        if let Some(((num, den), _)) = parts.iter().find(|((_, den), s)| *s == 0.0 && *den > 0.0) {
            return Ok(ClassLabel::from_trait(num / den + 0.5).one_hot());
        }
        let mut precision = 0.0;
        let mut weighted = 0.0;
        for ((num, den), s) in parts {
            if den > 0.0 && s.is_finite() {
                precision += den / (s * s);
                weighted += num / (s * s);
            }
        }
        if precision == 0.0 {
            return Ok(vec![1.0 / 3.0; 3]);
        }
        let mean = weighted / precision + 0.5;
        let sd = precision.sqrt().recip();
        truncated_class_masses(mean, sd)
    }
}

fn truncated_class_masses(mean: f64, sd: f64) -> Result<Vec<f64>> {
    let normal = Normal::new(mean, sd).map_err(|e| Error::Invalid(format!("posterior: {e}")))?;
    let cuts = [0.0, ClassLabel::THRESHOLDS[0], ClassLabel::THRESHOLDS[1], 1.0];
    let cdf: Vec<f64> = cuts.iter().map(|c| normal.cdf(*c)).collect();
    let total = cdf[3] - cdf[0];
    if total <= 1e-300 {
        // all mass beyond one end of [0, 1]
        return Ok(ClassLabel::from_trait(mean.clamp(0.0, 1.0 - 1e-12)).one_hot());
    }
    Ok((0..3).map(|k| ((cdf[k + 1] - cdf[k]) / total).max(0.0)).collect())
}

/// Draws the dataset described by `cfg`.
pub fn generate_dataset(cfg: &ScenarioConfig) -> Result<Vec<SequenceSample>> {
    Ok(Generator::new(cfg)?.generate())
}

/// Class posterior of one sample; see [`Generator::posterior`].
pub fn bayes_oracle(sample: &SequenceSample, cfg: &ScenarioConfig) -> Result<Vec<f64>> {
    Generator::new(cfg)?.posterior(sample)
}

pub fn write_jsonl(path: &Path, samples: &[SequenceSample]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SequenceSample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: SequenceSample = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> ScenarioConfig {
        ScenarioConfig { d_audio: 6, d_text: 4, len_audio: (5, 9), len_text: (3, 6), n_samples: 40, seed, ..Default::default() }
    }

    fn oracle_accuracy(cfg: &ScenarioConfig) -> f64 {
        let g = Generator::new(cfg).unwrap();
        let data = g.generate();
        let hits = data
            .iter()
            .filter(|s| crate::metrics::argmax(&g.posterior(s).unwrap()) == s.class_label.index())
            .count();
        hits as f64 / data.len() as f64
    }

    #[test]
    fn noiseless_oracle_is_exact() {
        let cfg = ScenarioConfig {
            noise_audio: NoiseDistribution::Constant { value: 0.0 },
            noise_text: NoiseDistribution::Constant { value: 0.0 },
            n_samples: 200,
            ..small(3)
        };
        assert_eq!(oracle_accuracy(&cfg), 1.0);
        let g = Generator::new(&cfg).unwrap();
        let p = g.posterior(&g.sample(0)).unwrap();
        assert!(p.iter().filter(|x| **x == 1.0).count() == 1 && p.iter().sum::<f64>() == 1.0);
    }

    #[test]
    fn infinite_noise_is_uniform() {
        let p = truncated_class_masses(0.5, 1e4).unwrap();
        for x in p {
            assert!((x - 1.0 / 3.0).abs() < 1e-8);
        }
        let cfg = small(1);
        let g = Generator::new(&cfg).unwrap();
        let mut s = g.sample(0);
        s.noise_scale_audio = f64::INFINITY;
        s.noise_scale_text = f64::INFINITY;
        assert_eq!(g.posterior(&s).unwrap(), vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn truncated_masses_sum_to_one() {
        for (m, sd) in [(0.2, 0.1), (-3.0, 0.01), (4.0, 0.01), (0.5, 0.3), (1.0 / 3.0, 1e-9)] {
            let p = truncated_class_masses(m, sd).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9, "{m} {sd}: {p:?}");
        }
        assert_eq!(truncated_class_masses(-3.0, 0.01).unwrap(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = serde_json::to_string(&generate_dataset(&small(9)).unwrap()).unwrap();
        let b = serde_json::to_string(&generate_dataset(&small(9)).unwrap()).unwrap();
        let c = serde_json::to_string(&generate_dataset(&small(10)).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn samples_are_independent_of_count() {
        let a = generate_dataset(&small(4)).unwrap();
        let b = generate_dataset(&ScenarioConfig { n_samples: 10, ..small(4) }).unwrap();
        assert_eq!(&a[..10], &b[..]);
    }

    #[test]
    fn class_proportions_are_balanced() {
        let cfg = ScenarioConfig { n_samples: 10_000, len_audio: (1, 1), len_text: (1, 1), ..small(21) };
        let data = generate_dataset(&cfg).unwrap();
        let mut counts = [0usize; 3];
        for s in &data {
            counts[s.class_label.index()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1e4 - 1.0 / 3.0).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn samples_respect_config() {
        let cfg = ScenarioConfig { samples_per_participant: 2, ..small(5) };
        let data = generate_dataset(&cfg).unwrap();
        for (i, s) in data.iter().enumerate() {
            s.validate().unwrap();
            assert!((5..=9).contains(&s.audio_features.len()) && (3..=6).contains(&s.text_features.len()));
            assert_eq!(s.audio_features[0].len(), 6);
            assert_eq!(s.context_tag, cfg.contexts[i % 4].tag);
            for (v, (lo, hi)) in s.scores.iter().zip(SCORE_RANGES) {
                assert!(*v >= lo && *v <= hi);
            }
        }
        assert_eq!(data[0].participant(), data[1].participant());
        assert_eq!(data[0].scores, data[1].scores);
        assert_ne!(data[1].participant(), data[2].participant());
    }

    #[test]
    fn config_validation() {
        let mut cfg = small(0);
        cfg.contexts[0].audio_share = 0.7;
        assert!(generate_dataset(&cfg).is_err());
        assert!(generate_dataset(&ScenarioConfig { d_audio: 0, ..small(0) }).is_err());
        assert!(generate_dataset(&ScenarioConfig { len_text: (4, 2), ..small(0) }).is_err());
        assert!(generate_dataset(&ScenarioConfig { n_samples: 0, ..small(0) }).is_err());
        let bad = NoiseDistribution::LogUniform { low: 0.0, high: 1.0 };
        assert!(generate_dataset(&ScenarioConfig { noise_audio: bad, ..small(0) }).is_err());
        let g = Generator::new(&small(0)).unwrap();
        let other = Generator::new(&ScenarioConfig { d_audio: 7, ..small(0) }).unwrap();
        assert!(other.posterior(&g.sample(0)).is_err());
    }

    #[test]
    fn oracle_degrades_with_noise() {
        let mut prev = 1.1;
        for s in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let cfg = ScenarioConfig {
                noise_audio: NoiseDistribution::Constant { value: s },
                noise_text: NoiseDistribution::Constant { value: s },
                n_samples: 600,
                ..small(8)
            };
            let acc = oracle_accuracy(&cfg);
            assert!(acc <= prev, "noise {s}: {acc} > {prev}");
            prev = acc;
        }
        assert!(prev < 0.8);
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let data = generate_dataset(&small(12)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_jsonl(&path, &data).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back, data);
        let bits = |d: &[SequenceSample]| -> Vec<u64> {
            d.iter().flat_map(|s| s.audio_features.iter().flatten().map(|x| x.to_bits())).collect()
        };
        assert_eq!(bits(&back), bits(&data));
    }

    #[test]
    fn tags_parse() {
        for t in ContextTag::ALL {
            assert_eq!(t.as_str().parse::<ContextTag>().unwrap(), t);
        }
        assert!("tv".parse::<ContextTag>().is_err());
    }
}
