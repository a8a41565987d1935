//! Unimodal probabilistic encoders.
//!
//! A modality's feature sequence goes through a GRU, is refined by
//! cross-modal attention against the other modality, is pooled onto a shared
//! grid of `K` context steps and finally mapped to a diagonal Gaussian per
//! step by the latent head.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Lower bound added to every predicted variance.
pub const VAR_FLOOR: f64 = 1e-6;

/// A group of named trainable tensors that can be registered on a graph.
///
/// `named`, `named_mut` and `attach` must all walk tensors in the same order.
pub trait ParamGroup {
    type Vars;

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>);
    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>);
    /// Builds graph handles from leaves already registered in `named` order.
    fn attach(&self, leaves: &mut dyn Iterator<Item = Var>) -> Self::Vars;

    /// Registers every tensor as a trainable leaf; returns the handles and
    /// the leaves in `named` order.
    fn bind(&self, g: &mut Graph) -> Result<(Self::Vars, Vec<Var>)> {
        let mut named = Vec::new();
        self.named("", &mut named);
        let leaves = named.iter().map(|(_, t)| g.param(t)).collect::<std::result::Result<Vec<_>, _>>()?;
        let vars = self.attach(&mut leaves.iter().copied());
        Ok((vars, leaves))
    }

    fn param_count(&self) -> usize {
        let mut named = Vec::new();
        self.named("", &mut named);
        named.len()
    }
}

fn next_leaf(leaves: &mut dyn Iterator<Item = Var>) -> Var {
    leaves.next().expect("leaf list shorter than parameter group")
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, limit: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor::matrix(rows, cols, data).expect("finite init").with_grad()
}

fn orthogonal(rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = a.qr();
    let (q, r) = (qr.q(), qr.r());
    // fix column signs so the draw is uniform over the orthogonal group
    let mut q = q;
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Linear map `x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearParams {
    pub fn init(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: uniform(rng, d_in, d_out, 1.0 / (d_in as f64).sqrt()),
            bias: Tensor::zeros(1, d_out).with_grad(),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }
}

impl LinearVars {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let xw = g.matmul(x, self.weight)?;
        Ok(g.add(xw, self.bias)?)
    }
}

impl ParamGroup for LinearParams {
    type Vars = LinearVars;

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }

    fn attach(&self, leaves: &mut dyn Iterator<Item = Var>) -> LinearVars {
        LinearVars { weight: next_leaf(leaves), bias: next_leaf(leaves) }
    }
}

/// GRU weights with gates packed as `[update | reset | candidate]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    /// `d_in x 3 d_h`
    pub w_input: Tensor,
    /// `d_h x 3 d_h`
    pub w_recurrent: Tensor,
    /// `1 x 3 d_h`
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w_input: Var,
    pub w_recurrent: Var,
    pub bias: Var,
}

impl GruParams {
    /// Input weights uniform in `+-1/sqrt(d_in)`, recurrent blocks orthogonal, zero biases.
    pub fn init(d_in: usize, d_h: usize, rng: &mut impl Rng) -> Self {
        let w_input = uniform(rng, d_in, 3 * d_h, 1.0 / (d_in as f64).sqrt());
        let blocks: Vec<DMatrix<f64>> = (0..3).map(|_| orthogonal(rng, d_h)).collect();
        let mut rec = vec![0.0; d_h * 3 * d_h];
        for (b, q) in blocks.iter().enumerate() {
            for i in 0..d_h {
                for j in 0..d_h {
                    rec[i * 3 * d_h + b * d_h + j] = q[(i, j)];
                }
            }
        }
        Self {
            w_input,
            w_recurrent: Tensor::matrix(d_h, 3 * d_h, rec).expect("finite").with_grad(),
            bias: Tensor::zeros(1, 3 * d_h).with_grad(),
        }
    }

    pub fn zeros(d_in: usize, d_h: usize) -> Self {
        Self {
            w_input: Tensor::zeros(d_in, 3 * d_h),
            w_recurrent: Tensor::zeros(d_h, 3 * d_h),
            bias: Tensor::zeros(1, 3 * d_h),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w_input.rows()
    }

    pub fn d_h(&self) -> usize {
        self.w_recurrent.rows()
    }
}

impl ParamGroup for GruParams {
    type Vars = GruVars;

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.w_input"), &self.w_input));
        out.push((format!("{prefix}.w_recurrent"), &self.w_recurrent));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.w_input"), &mut self.w_input));
        out.push((format!("{prefix}.w_recurrent"), &mut self.w_recurrent));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }

    fn attach(&self, leaves: &mut dyn Iterator<Item = Var>) -> GruVars {
        GruVars { w_input: next_leaf(leaves), w_recurrent: next_leaf(leaves), bias: next_leaf(leaves) }
    }
}

/// Runs a GRU over `seq` (`T x d_in`) from a zero state and returns all
/// hidden states (`T x d_h`).
///
/// ```text
/// z = sigmoid(x Wz + h Uz + bz)
/// r = sigmoid(x Wr + h Ur + br)
/// n = tanh(x Wn + r * (h Un) + bn)
/// h' = (1 - z) * n + z * h
/// ```
pub fn gru_encode(g: &mut Graph, seq: Var, p: &GruVars) -> Result<Var> {
    let (t, d_in) = g.dims(seq);
    let (w_rows, w_cols) = g.dims(p.w_input);
    if d_in != w_rows {
        return invalid(format!("gru input width {d_in} != {w_rows}"));
    }
    let h_dim = w_cols / 3;
    let xw = g.matmul(seq, p.w_input)?;
    let xw = g.add(xw, p.bias)?;
    let mut h = g.constant(Tensor::zeros(1, h_dim))?;
    let mut states = Vec::with_capacity(t);
    for i in 0..t {
        let xi = g.row(xw, i)?;
        let hu = g.matmul(h, p.w_recurrent)?;
        let x_zr = g.cols(xi, 0..2 * h_dim)?;
        let h_zr = g.cols(hu, 0..2 * h_dim)?;
        let pre = g.add(x_zr, h_zr)?;
        let zr = g.sigmoid(pre)?;
        let z = g.cols(zr, 0..h_dim)?;
        let r = g.cols(zr, h_dim..2 * h_dim)?;
        let x_n = g.cols(xi, 2 * h_dim..3 * h_dim)?;
        let h_n = g.cols(hu, 2 * h_dim..3 * h_dim)?;
        let gated = g.mul(r, h_n)?;
        let pre_n = g.add(x_n, gated)?;
        let n = g.tanh(pre_n)?;
        let diff = g.sub(h, n)?;
        let keep = g.mul(z, diff)?;
        h = g.add(n, keep)?;
        states.push(h);
    }
    if states.is_empty() {
        return invalid("gru_encode on an empty sequence");
    }
    Ok(g.concat(&states, 0)?)
}

/// Value-level convenience wrapper around [`gru_encode`].
pub fn gru_encode_values(seq: &Tensor, p: &GruParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let (vars, _) = p.bind(&mut g)?;
    let s = g.constant(seq.clone())?;
    let out = gru_encode(&mut g, s, &vars)?;
    Ok(g.value(out).clone())
}

/// Single-head attention projections, each `d_h x d_h`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

impl AttentionParams {
    pub fn init(d_h: usize, rng: &mut impl Rng) -> Self {
        let lim = 1.0 / (d_h as f64).sqrt();
        Self { query: uniform(rng, d_h, d_h, lim), key: uniform(rng, d_h, d_h, lim), value: uniform(rng, d_h, d_h, lim) }
    }
}

impl ParamGroup for AttentionParams {
    type Vars = AttentionVars;

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.query"), &self.query));
        out.push((format!("{prefix}.key"), &self.key));
        out.push((format!("{prefix}.value"), &self.value));
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.query"), &mut self.query));
        out.push((format!("{prefix}.key"), &mut self.key));
        out.push((format!("{prefix}.value"), &mut self.value));
    }

    fn attach(&self, leaves: &mut dyn Iterator<Item = Var>) -> AttentionVars {
        AttentionVars { query: next_leaf(leaves), key: next_leaf(leaves), value: next_leaf(leaves) }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Attended {
    /// `Tq x d_h` context states.
    pub context: Var,
    /// `Tq x Tk` attention weights; rows sum to one.
    pub weights: Var,
}

/// Scaled dot-product attention with `queries` attending over `keys_values`.
pub fn cross_modal_attend(g: &mut Graph, queries: Var, keys_values: Var, p: &AttentionVars) -> Result<Attended> {
    let (_, dq) = g.dims(queries);
    let (_, dk) = g.dims(keys_values);
    let d_h = g.dims(p.query).0;
    if dq != d_h || dk != d_h {
        return invalid(format!("attention widths {dq}/{dk} do not match d_h {d_h}"));
    }
    let q = g.matmul(queries, p.query)?;
    let k = g.matmul(keys_values, p.key)?;
    let v = g.matmul(keys_values, p.value)?;
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, 1.0 / (d_h as f64).sqrt())?;
    let weights = g.softmax(scores)?;
    let context = g.matmul(weights, v)?;
    Ok(Attended { context, weights })
}

/// `K x T` averaging matrix mapping `T` states onto `K` grid steps.
///
/// With `T >= K` the sequence is cut into `K` contiguous chunks whose sizes
/// differ by at most one, larger chunks first. With `T < K` grid step `k`
/// copies state `floor(k T / K)`.
pub fn pooling_matrix(t: usize, k: usize) -> Result<Tensor> {
    if k == 0 {
        return invalid("grid size K must be positive");
    }
    if t == 0 {
        return invalid("cannot pool an empty sequence");
    }
    let mut m = vec![0.0; k * t];
    if t >= k {
        let (base, rem) = (t / k, t % k);
        let mut start = 0;
        for row in 0..k {
            let len = base + usize::from(row < rem);
            for col in start..start + len {
                m[row * t + col] = 1.0 / len as f64;
            }
            start += len;
        }
    } else {
        for row in 0..k {
            m[row * t + row * t / k] = 1.0;
        }
    }
    Ok(Tensor::matrix(k, t, m)?)
}

/// Mean-pools `states` (`T x d`) onto a `K x d` grid.
pub fn pool_to_grid(g: &mut Graph, states: Var, k: usize) -> Result<Var> {
    let (t, _) = g.dims(states);
    let pm = g.constant(pooling_matrix(t, k)?)?;
    Ok(g.matmul(pm, states)?)
}

/// Heads producing the per-step mean and pre-softplus variance.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentHeadParams {
    pub mean: LinearParams,
    pub variance: LinearParams,
}

#[derive(Debug, Clone, Copy)]
pub struct LatentHeadVars {
    pub mean: LinearVars,
    pub variance: LinearVars,
}

impl LatentHeadParams {
    pub fn init(d_h: usize, d_z: usize, rng: &mut impl Rng) -> Self {
        Self { mean: LinearParams::init(d_h, d_z, rng), variance: LinearParams::init(d_h, d_z, rng) }
    }

    pub fn zeros(d_h: usize, d_z: usize) -> Self {
        let lin = || LinearParams { weight: Tensor::zeros(d_h, d_z), bias: Tensor::zeros(1, d_z) };
        Self { mean: lin(), variance: lin() }
    }
}

impl ParamGroup for LatentHeadParams {
    type Vars = LatentHeadVars;

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.mean.named(&format!("{prefix}.mean"), out);
        self.variance.named(&format!("{prefix}.variance"), out);
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.mean.named_mut(&format!("{prefix}.mean"), out);
        self.variance.named_mut(&format!("{prefix}.variance"), out);
    }

    fn attach(&self, leaves: &mut dyn Iterator<Item = Var>) -> LatentHeadVars {
        LatentHeadVars { mean: self.mean.attach(leaves), variance: self.variance.attach(leaves) }
    }
}

/// Graph handles for one modality's latent distribution.
#[derive(Debug, Clone, Copy)]
pub struct LatentVars {
    /// `K x d_z`
    pub mu: Var,
    /// `K x d_z`, strictly positive
    pub var: Var,
    /// `K x 1` row norms of `var`
    pub var_norm: Var,
}

/// `mu = C Wm + bm`, `var = softplus(C Wv + bv) + VAR_FLOOR`.
pub fn latent_head(g: &mut Graph, contexts: Var, p: &LatentHeadVars) -> Result<LatentVars> {
    let mu = p.mean.apply(g, contexts)?;
    let pre = p.variance.apply(g, contexts)?;
    let sp = g.softplus(pre)?;
    let var = g.add_scalar(sp, VAR_FLOOR)?;
    let var_norm = g.l2_norm(var)?;
    Ok(LatentVars { mu, var, var_norm })
}

/// Reparameterised draw `mu + sqrt(var) * noise`.
pub fn sample_latent(g: &mut Graph, latent: &LatentVars, noise: Tensor) -> Result<Var> {
    if g.dims(latent.mu) != (noise.rows(), noise.cols()) {
        return invalid(format!("noise shape {:?} does not match latent {:?}", noise.shape(), g.dims(latent.mu)));
    }
    let sd = g.sqrt(latent.var)?;
    let eps = g.constant(noise)?;
    let scaled = g.mul(sd, eps)?;
    Ok(g.add(latent.mu, scaled)?)
}

/// Standard-normal `rows x cols` draw.
pub fn standard_normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("finite normal draws")
}

/// Per-step diagonal Gaussian of one modality, as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDistribution {
    pub mu: Tensor,
    pub var: Tensor,
    pub var_norm: Vec<f64>,
}

impl LatentDistribution {
    pub fn new(mu: Tensor, var: Tensor) -> Result<Self> {
        if mu.shape() != var.shape() {
            return invalid("mean and variance shapes differ");
        }
        if var.data().iter().any(|v| *v <= 0.0) {
            return invalid("variance must be strictly positive");
        }
        let var_norm = (0..var.rows()).map(|i| var.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        Ok(Self { mu, var, var_norm })
    }

    pub fn from_graph(g: &Graph, v: &LatentVars) -> Result<Self> {
        Self::new(g.value(v.mu).clone(), g.value(v.var).clone())
    }

    pub fn sample(&self, noise: &Tensor) -> Result<Tensor> {
        if noise.shape() != self.mu.shape() {
            return invalid("noise shape does not match the latent");
        }
        let data = self
            .mu
            .data()
            .iter()
            .zip(self.var.data())
            .zip(noise.data())
            .map(|((m, v), e)| m + v.sqrt() * e)
            .collect();
        Ok(Tensor::new(self.mu.shape().to_vec(), data)?)
    }
}

/// Parameters of one modality's encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub gru: GruParams,
    /// Used when this modality supplies the queries.
    pub attention: Option<AttentionParams>,
    pub head: LatentHeadParams,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub gru: GruVars,
    pub attention: Option<AttentionVars>,
    pub head: LatentHeadVars,
}

impl EncoderParams {
    pub fn init(d_in: usize, d_h: usize, d_z: usize, with_attention: bool, rng: &mut impl Rng) -> Self {
        let gru = GruParams::init(d_in, d_h, rng);
        let attention = with_attention.then(|| AttentionParams::init(d_h, rng));
        let head = LatentHeadParams::init(d_h, d_z, rng);
        Self { gru, attention, head }
    }

    pub fn d_in(&self) -> usize {
        self.gru.d_in()
    }

    pub fn d_h(&self) -> usize {
        self.gru.d_h()
    }

    pub fn d_z(&self) -> usize {
        self.head.mean.d_out()
    }
}

impl ParamGroup for EncoderParams {
    type Vars = EncoderVars;

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.gru.named(&format!("{prefix}.gru"), out);
        if let Some(a) = &self.attention {
            a.named(&format!("{prefix}.attention"), out);
        }
        self.head.named(&format!("{prefix}.head"), out);
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.gru.named_mut(&format!("{prefix}.gru"), out);
        if let Some(a) = &mut self.attention {
            a.named_mut(&format!("{prefix}.attention"), out);
        }
        self.head.named_mut(&format!("{prefix}.head"), out);
    }

    fn attach(&self, leaves: &mut dyn Iterator<Item = Var>) -> EncoderVars {
        let gru = self.gru.attach(leaves);
        let attention = self.attention.as_ref().map(|a| a.attach(leaves));
        let head = self.head.attach(leaves);
        EncoderVars { gru, attention, head }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_many, kernels, Axis};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sigmoid(x: f64) -> f64 {
        kernels::sigmoid(x)
    }

    #[test]
    fn zero_gru_stays_at_zero() {
        let p = GruParams::zeros(3, 4);
        let seq = Tensor::zeros(5, 3);
        let h = gru_encode_values(&seq, &p).unwrap();
        assert_eq!(h.shape(), &[5, 4]);
        assert!(h.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_step_matches_hand_unrolled_gates() {
        // 2 inputs, 2 hidden units, h0 = 0
        let w_input = Tensor::matrix(2, 6, vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, 0.8, -0.9, 0.2, 0.1, -0.3]).unwrap();
        let w_recurrent = Tensor::matrix(2, 6, vec![0.5; 12]).unwrap();
        let bias = Tensor::row(vec![0.01, 0.02, 0.03, 0.04, 0.05, 0.06]).unwrap();
        let p = GruParams { w_input: w_input.clone(), w_recurrent, bias: bias.clone() };
        let x = [0.9, -1.1];
        let h = gru_encode_values(&Tensor::row(x.to_vec()).unwrap(), &p).unwrap();
        let pre = |col: usize| x[0] * w_input.at(0, col) + x[1] * w_input.at(1, col) + bias.data()[col];
        for u in 0..2 {
            let z = sigmoid(pre(u));
            // with h0 = 0 the reset gate multiplies zero
            let n = pre(4 + u).tanh();
            let want = (1.0 - z) * n;
            assert!((h.at(0, u) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gru_is_a_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = GruParams::init(3, 4, &mut rng);
        let seq = standard_normal(&mut rng, 3, 3);
        let full = gru_encode_values(&seq, &p).unwrap();
        // prefix consistency: first t outputs depend on first t inputs only
        for t in 1..=3 {
            let prefix = Tensor::from_rows(&seq.to_rows()[..t]).unwrap();
            let part = gru_encode_values(&prefix, &p).unwrap();
            assert_eq!(part.data(), &full.data()[..t * 4]);
        }
        // three chained single steps, carrying h through the bias of a zero-input step
        let mut h = vec![0.0; 4];
        for t in 0..3 {
            let x = seq.row_slice(t);
            let mut gates = vec![0.0; 12];
            for (c, gate) in gates.iter_mut().enumerate() {
                *gate = (0..3).map(|i| x[i] * p.w_input.at(i, c)).sum::<f64>()
                    + (0..4).map(|i| h[i] * p.w_recurrent.at(i, c)).sum::<f64>() * if c >= 8 { 0.0 } else { 1.0 };
            }
            let mut next = vec![0.0; 4];
            for u in 0..4 {
                let z = sigmoid(gates[u]);
                let r = sigmoid(gates[4 + u]);
                let hn: f64 = (0..4).map(|i| h[i] * p.w_recurrent.at(i, 8 + u)).sum();
                let n = (gates[8 + u] + r * hn).tanh();
                next[u] = (1.0 - z) * n + z * h[u];
            }
            h = next;
            for u in 0..4 {
                assert!((full.at(t, u) - h[u]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_or_mismatched_sequences_fail() {
        let p = GruParams::zeros(3, 2);
        let mut g = Graph::new();
        let (vars, _) = p.bind(&mut g).unwrap();
        let wrong = g.constant(Tensor::zeros(4, 2)).unwrap();
        assert!(gru_encode(&mut g, wrong, &vars).is_err());
    }

    #[test]
    fn recurrent_init_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = GruParams::init(5, 6, &mut rng);
        for b in 0..3 {
            for i in 0..6 {
                for j in 0..6 {
                    let dot: f64 = (0..6).map(|r| p.w_recurrent.at(r, b * 6 + i) * p.w_recurrent.at(r, b * 6 + j)).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-10);
                }
            }
        }
        let lim = 1.0 / 5f64.sqrt();
        assert!(p.w_input.data().iter().all(|v| v.abs() <= lim));
        assert!(p.bias.data().iter().all(|v| *v == 0.0));
    }

    fn attend_values(q: &Tensor, kv: &Tensor, p: &AttentionParams) -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let (vars, _) = p.bind(&mut g).unwrap();
        let qv = g.constant(q.clone()).unwrap();
        let kvv = g.constant(kv.clone()).unwrap();
        let out = cross_modal_attend(&mut g, qv, kvv, &vars).unwrap();
        (g.value(out.context).clone(), g.value(out.weights).clone())
    }

    fn identity(n: usize) -> Tensor {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data_mut()[i * n + i] = 1.0;
        }
        t
    }

    #[test]
    fn single_key_attention_copies_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = AttentionParams::init(3, &mut rng);
        let q = standard_normal(&mut rng, 4, 3);
        let kv = standard_normal(&mut rng, 1, 3);
        let (ctx, w) = attend_values(&q, &kv, &p);
        let projected: Vec<f64> = (0..3).map(|j| (0..3).map(|i| kv.at(0, i) * p.value.at(i, j)).sum()).collect();
        for r in 0..4 {
            assert!((w.at(r, 0) - 1.0).abs() < 1e-15);
            for j in 0..3 {
                assert!((ctx.at(r, j) - projected[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = AttentionParams::init(3, &mut rng);
        let q = standard_normal(&mut rng, 2, 3);
        let kv = Tensor::from_rows(&vec![vec![0.3, -0.1, 0.8]; 4]).unwrap();
        let (_, w) = attend_values(&q, &kv, &p);
        assert!(w.data().iter().all(|v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn two_by_two_matches_hand_computation() {
        let p = AttentionParams { query: identity(2), key: identity(2), value: identity(2) };
        let q = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let kv = Tensor::from_rows(&[vec![1.0, 1.0], vec![-1.0, 0.5]]).unwrap();
        let (ctx, w) = attend_values(&q, &kv, &p);
        let s = 2f64.sqrt();
        // row 0 scores: [1, -1]/sqrt2 ; row 1 scores: [2, 1]/sqrt2
        let rows = [[1.0 / s, -1.0 / s], [2.0 / s, 1.0 / s]];
        for (i, sc) in rows.iter().enumerate() {
            let e0 = sc[0].exp();
            let e1 = sc[1].exp();
            let (a0, a1) = (e0 / (e0 + e1), e1 / (e0 + e1));
            assert!((w.at(i, 0) - a0).abs() < 1e-12);
            assert!((ctx.at(i, 0) - (a0 * 1.0 + a1 * -1.0)).abs() < 1e-12);
            assert!((ctx.at(i, 1) - (a0 * 1.0 + a1 * 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let p = AttentionParams::init(4, &mut rng);
            let q = standard_normal(&mut rng, 5, 4);
            let kv = standard_normal(&mut rng, 7, 4);
            let (_, w) = attend_values(&q, &kv, &p);
            for r in 0..5 {
                let s: f64 = w.row_slice(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn attention_width_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = AttentionParams::init(3, &mut rng);
        let mut g = Graph::new();
        let (vars, _) = p.bind(&mut g).unwrap();
        let q = g.constant(Tensor::zeros(2, 3)).unwrap();
        let kv = g.constant(Tensor::zeros(2, 4)).unwrap();
        assert!(cross_modal_attend(&mut g, q, kv, &vars).is_err());
    }

    #[test]
    fn pooling_rules() {
        let m = pooling_matrix(4, 4).unwrap();
        assert_eq!(m, identity(4));
        let m = pooling_matrix(4, 2).unwrap();
        assert_eq!(m.data(), &[0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5]);
        // T=3, K=2: chunk sizes {2, 1}
        let m = pooling_matrix(3, 2).unwrap();
        assert_eq!(m.data(), &[0.5, 0.5, 0.0, 0.0, 0.0, 1.0]);
        // T < K repeats boundary states
        let m = pooling_matrix(2, 4).unwrap();
        assert_eq!(m.data(), &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(pooling_matrix(3, 0).is_err());
    }

    #[test]
    fn pool_means_of_halves() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::from_rows(&[vec![1.0], vec![3.0], vec![10.0], vec![20.0]]).unwrap()).unwrap();
        let p = pool_to_grid(&mut g, s, 2).unwrap();
        assert_eq!(g.value(p).data(), &[2.0, 15.0]);
    }

    fn head_values(ctx: &Tensor, p: &LatentHeadParams) -> LatentDistribution {
        let mut g = Graph::new();
        let (vars, _) = p.bind(&mut g).unwrap();
        let c = g.constant(ctx.clone()).unwrap();
        let lv = latent_head(&mut g, c, &vars).unwrap();
        let d = LatentDistribution::from_graph(&g, &lv).unwrap();
        // graph norm equals the independent recomputation
        for (i, n) in g.value(lv.var_norm).data().iter().enumerate() {
            let direct: f64 = d.var.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - direct).abs() < 1e-12);
        }
        d
    }

    #[test]
    fn zero_head_gives_softplus_zero_variance() {
        let d = head_values(&Tensor::zeros(3, 4), &LatentHeadParams::zeros(4, 2));
        assert!(d.mu.data().iter().all(|v| *v == 0.0));
        assert!(d.var.data().iter().all(|v| (v - (2f64.ln() + VAR_FLOOR)).abs() < 1e-15));
    }

    #[test]
    fn variance_respects_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let p = LatentHeadParams::init(4, 3, &mut rng);
            let ctx = standard_normal(&mut rng, 5, 4);
            let d = head_values(&ctx, &p);
            assert!(d.var.data().iter().all(|v| *v >= VAR_FLOOR));
        }
        // extreme negative pre-activation still floors
        let mut p = LatentHeadParams::zeros(1, 1);
        p.variance.bias = Tensor::scalar(-800.0).unwrap();
        let d = head_values(&Tensor::zeros(1, 1), &p);
        assert!(d.var.data()[0] >= VAR_FLOOR);
    }

    #[test]
    fn sampling_closed_forms() {
        let mu = Tensor::row(vec![1.0, -2.0]).unwrap();
        let d = LatentDistribution::new(mu.clone(), Tensor::row(vec![VAR_FLOOR, 4.0]).unwrap()).unwrap();
        assert_eq!(d.sample(&Tensor::zeros(1, 2)).unwrap(), mu);
        let s = d.sample(&Tensor::filled(1, 2, 1.0)).unwrap();
        assert!((s.data()[0] - (1.0 + VAR_FLOOR.sqrt())).abs() < 1e-15);
        assert!((s.data()[1] - 0.0).abs() < 1e-15);
        assert!(d.sample(&Tensor::zeros(2, 2)).is_err());
    }

    #[test]
    fn graph_sampling_matches_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = LatentHeadParams::init(3, 2, &mut rng);
        let ctx = standard_normal(&mut rng, 4, 3);
        let noise = standard_normal(&mut rng, 4, 2);
        let mut g = Graph::new();
        let (vars, _) = p.bind(&mut g).unwrap();
        let c = g.constant(ctx).unwrap();
        let lv = latent_head(&mut g, c, &vars).unwrap();
        let h = sample_latent(&mut g, &lv, noise.clone()).unwrap();
        let d = LatentDistribution::from_graph(&g, &lv).unwrap();
        let direct = d.sample(&noise).unwrap();
        for (a, b) in g.value(h).data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn monte_carlo_mean_matches_mu() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mu = Tensor::row(vec![0.5, -1.5]).unwrap();
        let var = Tensor::row(vec![0.25, 2.0]).unwrap();
        let d = LatentDistribution::new(mu.clone(), var.clone()).unwrap();
        let n = 100_000;
        let mut acc = [0.0; 2];
        for _ in 0..n {
            let s = d.sample(&standard_normal(&mut rng, 1, 2)).unwrap();
            acc[0] += s.data()[0];
            acc[1] += s.data()[1];
        }
        for j in 0..2 {
            let mean = acc[j] / n as f64;
            let tol = 3.0 * var.data()[j].sqrt() / (n as f64).sqrt();
            assert!((mean - mu.data()[j]).abs() < tol);
        }
    }

    #[test]
    fn encoder_pipeline_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let ea = EncoderParams::init(3, 4, 2, true, &mut rng);
        let et = EncoderParams::init(2, 4, 2, true, &mut rng);
        let xa = standard_normal(&mut rng, 5, 3);
        let xt = standard_normal(&mut rng, 3, 2);
        let noise = standard_normal(&mut rng, 2, 2);
        let mut named = Vec::new();
        ea.named("a", &mut named);
        et.named("t", &mut named);
        let tensors: Vec<Tensor> = named.iter().map(|(_, t)| (*t).clone()).collect();
        let n_a = ea.param_count();
        let err = grad_check_many(
            |g, vars| -> Result<Var> {
                let va = ea.attach(&mut vars[..n_a].iter().copied());
                let vt = et.attach(&mut vars[n_a..].iter().copied());
                let sa = g.constant(xa.clone())?;
                let st = g.constant(xt.clone())?;
                let ha = gru_encode(g, sa, &va.gru)?;
                let ht = gru_encode(g, st, &vt.gru)?;
                let att = cross_modal_attend(g, ha, ht, va.attention.as_ref().unwrap())?;
                let ctx = g.add(ha, att.context)?;
                let pooled = pool_to_grid(g, ctx, 2)?;
                let lv = latent_head(g, pooled, &va.head)?;
                let h = sample_latent(g, &lv, noise.clone())?;
                let s = g.sum(h, Axis::All)?;
                let n = g.sum(lv.var_norm, Axis::All)?;
                Ok(g.add(s, n)?)
            },
            &tensors,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn named_and_attach_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = EncoderParams::init(3, 4, 2, true, &mut rng);
        let mut g = Graph::new();
        let (vars, leaves) = p.bind(&mut g).unwrap();
        let mut named = Vec::new();
        p.named("enc", &mut named);
        assert_eq!(leaves.len(), named.len());
        for (leaf, (_, t)) in leaves.iter().zip(&named) {
            assert_eq!(g.value(*leaf).data(), t.data());
        }
        assert_eq!(g.value(vars.head.variance.bias).shape(), &[1, 2]);
    }
}
