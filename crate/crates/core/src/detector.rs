//! Bias detectors: optional attention pooling, a one-hidden-layer scorer,
//! weighted BCE training, LOF pseudo-labelling and rate evaluation.

use serde::{Deserialize, Serialize};

use crate::data::Sensitive;
use crate::error::{dim, invalid, FairNetError, Result};
use crate::model::DenseLayer;
use crate::numerics::{
    dot, softmax, squared_distance, stable_sigmoid, weighted_bce_with_logit, Activation, LayerSpec,
    Matrix,
};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingKind {
    None,
    Attention,
}

/// `α = softmax(vᵀ tanh(W h_i + b))`, pooled vector `Σ α_i h_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionPool {
    pub w: Matrix,
    pub b: Vec<f64>,
    pub v: Vec<f64>,
}

impl AttentionPool {
    pub fn init(input_dim: usize, attn_dim: usize, rng: &mut SplitMix64) -> Self {
        let w = Matrix::xavier_uniform(attn_dim, input_dim, rng);
        let bound = (6.0 / (attn_dim + 1) as f64).sqrt();
        let v = (0..attn_dim).map(|_| rng.uniform(-bound, bound)).collect();
        Self {
            w,
            b: vec![0.0; attn_dim],
            v,
        }
    }

    fn param_count(&self) -> usize {
        self.w.values().len() + self.b.len() + self.v.len()
    }

    fn scores(&self, hs: &[&[f64]]) -> Result<Vec<(Vec<f64>, f64)>> {
        hs.iter()
            .map(|h| {
                let mut t = self.w.matvec(h)?;
                for (ti, bi) in t.iter_mut().zip(&self.b) {
                    *ti = (*ti + bi).tanh();
                }
                let s = dot(&self.v, &t);
                Ok((t, s))
            })
            .collect()
    }
}

/// Attention weights and the pooled vector for a non-empty sequence.
pub fn attention_pool(hs: &[&[f64]], params: &AttentionPool) -> Result<(Vec<f64>, Vec<f64>)> {
    let dim0 = check_sequence(hs)?;
    if params.w.cols() != dim0 {
        return Err(dim(format!(
            "attention expects {}-vectors, got {dim0}",
            params.w.cols()
        )));
    }
    let scored = params.scores(hs)?;
    let s: Vec<f64> = scored.iter().map(|(_, s)| *s).collect();
    let alpha = softmax(&s);
    Ok((alpha.clone(), weighted_sum(hs, &alpha)))
}

fn check_sequence(hs: &[&[f64]]) -> Result<usize> {
    let first = hs
        .first()
        .ok_or_else(|| invalid("attention pooling over an empty sequence"))?;
    if hs.iter().any(|h| h.len() != first.len()) {
        return Err(dim("sequence vectors differ in length"));
    }
    Ok(first.len())
}

fn weighted_sum(hs: &[&[f64]], alpha: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; hs[0].len()];
    for (h, &a) in hs.iter().zip(alpha) {
        for (o, x) in out.iter_mut().zip(*h) {
            *o += a * x;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasDetector {
    pub attribute: usize,
    /// 1-based layer whose output the detector reads.
    pub layer: usize,
    pub pooling: Option<AttentionPool>,
    pub hidden: DenseLayer,
    pub output: DenseLayer,
    pub threshold: f64,
}

/// Gradient buffers shaped like a detector, flattened in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorGrad(pub Vec<f64>);

struct ScoreCache {
    inputs: Vec<Vec<f64>>,
    attn: Option<(Vec<Vec<f64>>, Vec<f64>)>,
    pooled: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden_out: Vec<f64>,
    logit: f64,
}

impl BiasDetector {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        attribute: usize,
        layer: usize,
        input_dim: usize,
        hidden: usize,
        pooling: PoolingKind,
        attn_dim: usize,
        threshold: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(invalid(format!("threshold {threshold} outside [0, 1]")));
        }
        let mut rng = SplitMix64::new(seed);
        let pooling = match pooling {
            PoolingKind::None => None,
            PoolingKind::Attention => {
                Some(AttentionPool::init(input_dim, attn_dim.max(1), &mut rng))
            }
        };
        let hidden = DenseLayer {
            spec: LayerSpec::new(input_dim, hidden, Activation::Relu)?,
            weight: Matrix::xavier_uniform(hidden, input_dim, &mut rng),
            bias: vec![0.0; hidden],
        };
        let output = DenseLayer {
            spec: LayerSpec::new(hidden.spec.out_dim, 1, Activation::Identity)?,
            weight: Matrix::xavier_uniform(1, hidden.spec.out_dim, &mut rng),
            bias: vec![0.0],
        };
        Ok(Self {
            attribute,
            layer,
            pooling,
            hidden,
            output,
            threshold,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.spec.in_dim
    }

    pub fn param_count(&self) -> usize {
        self.pooling.as_ref().map_or(0, AttentionPool::param_count)
            + self.hidden.weight.values().len()
            + self.hidden.bias.len()
            + self.output.weight.values().len()
            + 1
    }

    /// Scoring cost on a single pooled vector (pooling over one vector is
    /// the identity and is not counted).
    pub fn flops_per_sample(&self) -> usize {
        let (h, d) = self.hidden.weight.shape();
        2 * h * d + h + 2 * h + 1
    }

    fn forward_cached(&self, hs: &[&[f64]]) -> Result<ScoreCache> {
        let d = check_sequence(hs)?;
        if d != self.input_dim() {
            return Err(dim(format!(
                "detector expects {}-vectors, got {d}",
                self.input_dim()
            )));
        }
        let (attn, pooled) = match &self.pooling {
            None => {
                if hs.len() != 1 {
                    return Err(invalid(
                        "a detector without pooling scores exactly one vector",
                    ));
                }
                (None, hs[0].to_vec())
            }
            Some(pool) => {
                let scored = pool.scores(hs)?;
                let s: Vec<f64> = scored.iter().map(|(_, s)| *s).collect();
                let alpha = softmax(&s);
                let pooled = weighted_sum(hs, &alpha);
                (
                    Some((scored.into_iter().map(|(t, _)| t).collect(), alpha)),
                    pooled,
                )
            }
        };
        let mut hidden_pre = self.hidden.weight.matvec(&pooled)?;
        for (p, b) in hidden_pre.iter_mut().zip(&self.hidden.bias) {
            *p += b;
        }
        let hidden_out: Vec<f64> = hidden_pre.iter().map(|&p| p.max(0.0)).collect();
        let logit = dot(self.output.weight.row(0), &hidden_out) + self.output.bias[0];
        Ok(ScoreCache {
            inputs: hs.iter().map(|h| h.to_vec()).collect(),
            attn,
            pooled,
            hidden_pre,
            hidden_out,
            logit,
        })
    }

    pub fn logit_sequence(&self, hs: &[&[f64]]) -> Result<f64> {
        Ok(self.forward_cached(hs)?.logit)
    }

    /// Risk score of a single representation.
    pub fn score(&self, h: &[f64]) -> Result<f64> {
        self.score_sequence(&[h])
    }

    pub fn score_sequence(&self, hs: &[&[f64]]) -> Result<f64> {
        Ok(stable_sigmoid(self.logit_sequence(hs)?))
    }

    /// Flattened order: pooling `W, b, v` (if any), hidden `W, b`, output `w, b`.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        if let Some(p) = &self.pooling {
            out.extend_from_slice(p.w.values());
            out.extend_from_slice(&p.b);
            out.extend_from_slice(&p.v);
        }
        out.extend_from_slice(self.hidden.weight.values());
        out.extend_from_slice(&self.hidden.bias);
        out.extend_from_slice(self.output.weight.values());
        out.extend_from_slice(&self.output.bias);
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(dim("detector flat parameter length"));
        }
        let mut cursor = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&params[cursor..cursor + dst.len()]);
            cursor += dst.len();
        };
        if let Some(p) = &mut self.pooling {
            take(p.w.values_mut());
            take(&mut p.b);
            take(&mut p.v);
        }
        take(self.hidden.weight.values_mut());
        take(&mut self.hidden.bias);
        take(self.output.weight.values_mut());
        take(&mut self.output.bias);
        Ok(())
    }

    pub fn zero_grad(&self) -> DetectorGrad {
        DetectorGrad(vec![0.0; self.param_count()])
    }

    /// Accumulates `dlogit · ∂logit/∂φ` into `grad` and returns
    /// `∂(dlogit · logit)/∂h_i` for every input vector.
    pub fn backward_sequence(
        &self,
        hs: &[&[f64]],
        dlogit: f64,
        grad: &mut DetectorGrad,
    ) -> Result<Vec<Vec<f64>>> {
        let cache = self.forward_cached(hs)?;
        let g = &mut grad.0;
        let pool_len = self.pooling.as_ref().map_or(0, AttentionPool::param_count);
        let (hw, hd) = self.hidden.weight.shape();

        // output layer
        let out_w = pool_len + hw * hd + hw;
        for (k, &h) in cache.hidden_out.iter().enumerate() {
            g[out_w + k] += dlogit * h;
        }
        g[out_w + hw] += dlogit;

        // hidden layer
        let dhidden: Vec<f64> = self
            .output
            .weight
            .row(0)
            .iter()
            .zip(&cache.hidden_pre)
            .map(|(&w, &p)| if p > 0.0 { dlogit * w } else { 0.0 })
            .collect();
        for (r, &dr) in dhidden.iter().enumerate() {
            let row = pool_len + r * hd;
            for (c, &x) in cache.pooled.iter().enumerate() {
                g[row + c] += dr * x;
            }
            g[pool_len + hw * hd + r] += dr;
        }
        let dpooled = self.hidden.weight.t_matvec(&dhidden)?;

        match (&self.pooling, &cache.attn) {
            (None, _) => Ok(vec![dpooled]),
            (Some(pool), Some((ts, alpha))) => {
                let (aw, ad) = pool.w.shape();
                let dalpha: Vec<f64> = cache.inputs.iter().map(|h| dot(&dpooled, h)).collect();
                let mean = dot(alpha, &dalpha);
                let mut dinputs = Vec::with_capacity(hs.len());
                for (i, h) in cache.inputs.iter().enumerate() {
                    let ds = alpha[i] * (dalpha[i] - mean);
                    let t = &ts[i];
                    for (k, &tk) in t.iter().enumerate() {
                        g[aw * ad + aw + k] += ds * tk;
                    }
                    let dq: Vec<f64> = t
                        .iter()
                        .zip(&pool.v)
                        .map(|(&tk, &vk)| ds * vk * (1.0 - tk * tk))
                        .collect();
                    for (r, &dr) in dq.iter().enumerate() {
                        for (c, &x) in h.iter().enumerate() {
                            g[r * ad + c] += dr * x;
                        }
                        g[aw * ad + r] += dr;
                    }
                    let mut dh = pool.w.t_matvec(&dq)?;
                    for (o, &p) in dh.iter_mut().zip(&dpooled) {
                        *o += alpha[i] * p;
                    }
                    dinputs.push(dh);
                }
                Ok(dinputs)
            }
            (Some(_), None) => unreachable!("attention cache present whenever pooling is"),
        }
    }

    pub fn step(&mut self, lr: f64, grad: &DetectorGrad) -> Result<()> {
        let mut p = self.params_flat();
        for (x, g) in p.iter_mut().zip(&grad.0) {
            *x -= lr * g;
        }
        self.set_params_flat(&p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeights {
    /// `w_c = n / (2 n_c)` over the labeled subset.
    InverseFrequency,
    Uniform,
    Custom {
        majority: f64,
        minority: f64,
    },
}

impl ClassWeights {
    /// `(w_majority, w_minority)` for the given labels.
    pub fn resolve(self, labels: &[Option<bool>]) -> Result<(f64, f64)> {
        let ones = labels.iter().filter(|l| **l == Some(true)).count();
        let zeros = labels.iter().filter(|l| **l == Some(false)).count();
        match self {
            ClassWeights::InverseFrequency => {
                if ones == 0 || zeros == 0 {
                    return Err(FairNetError::InsufficientData(
                        "class weights need both groups".into(),
                    ));
                }
                let n = (ones + zeros) as f64;
                Ok((n / (2.0 * zeros as f64), n / (2.0 * ones as f64)))
            }
            ClassWeights::Uniform => Ok((1.0, 1.0)),
            ClassWeights::Custom { majority, minority } => {
                if majority < 0.0 || minority < 0.0 {
                    return Err(invalid("class weights must be non-negative"));
                }
                Ok((majority, minority))
            }
        }
    }
}

/// `Σ w_{s_i} BCE(p_i, s_i) / n_labeled` over the labeled samples; the
/// gradient is accumulated into `grad` when given.
pub fn detector_loss(
    detector: &BiasDetector,
    samples: &[Vec<Vec<f64>>],
    labels: &[Option<bool>],
    weights: (f64, f64),
    indices: &[usize],
    mut grad: Option<&mut DetectorGrad>,
) -> Result<f64> {
    let labeled: Vec<usize> = indices
        .iter()
        .copied()
        .filter(|&i| labels[i].is_some())
        .collect();
    if labeled.is_empty() {
        return Ok(0.0);
    }
    let n = labeled.len() as f64;
    let mut total = 0.0;
    for &i in &labeled {
        let target = labels[i].expect("filtered");
        let w = if target { weights.1 } else { weights.0 };
        let hs: Vec<&[f64]> = samples[i].iter().map(Vec::as_slice).collect();
        let logit = detector.logit_sequence(&hs)?;
        let (loss, dl) = weighted_bce_with_logit(logit, f64::from(u8::from(target)), w);
        total += loss;
        if let Some(g) = grad.as_deref_mut() {
            detector.backward_sequence(&hs, dl / n, g)?;
        }
    }
    Ok(total / n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorHyper {
    pub hidden: usize,
    pub pooling: PoolingKind,
    pub attention_dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub class_weights: ClassWeights,
}

impl Default for DetectorHyper {
    fn default() -> Self {
        Self {
            hidden: 16,
            pooling: PoolingKind::None,
            attention_dim: 8,
            learning_rate: 0.05,
            batch_size: 64,
            epochs: 60,
            class_weights: ClassWeights::InverseFrequency,
        }
    }
}

/// Minimises weighted BCE over the labeled samples by mini-batch gradient
/// descent. Returns the detector and the per-epoch mean loss.
pub fn train_detector(
    samples: &[Vec<Vec<f64>>],
    labels: &[Option<bool>],
    hyper: &DetectorHyper,
    attribute: usize,
    layer: usize,
    threshold: f64,
    seed: u64,
) -> Result<(BiasDetector, Vec<f64>)> {
    if samples.len() != labels.len() {
        return Err(dim("one label slot per sample"));
    }
    let labeled: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
    let ones = labeled.iter().filter(|&&i| labels[i] == Some(true)).count();
    if ones == 0 || ones == labeled.len() {
        return Err(FairNetError::InsufficientData(
            "detector training needs labeled samples from both groups".into(),
        ));
    }
    if hyper.batch_size == 0 || !(hyper.learning_rate > 0.0) {
        return Err(invalid(
            "detector batch_size and learning_rate must be positive",
        ));
    }
    let weights = hyper.class_weights.resolve(labels)?;
    let input_dim = samples[labeled[0]][0].len();
    let mut detector = BiasDetector::init(
        attribute,
        layer,
        input_dim,
        hyper.hidden,
        hyper.pooling,
        hyper.attention_dim,
        threshold,
        SplitMix64::derive(seed, 1).next_u64(),
    )?;
    let mut rng = SplitMix64::derive(seed, 2);
    let mut order = labeled.clone();
    let mut losses = Vec::with_capacity(hyper.epochs);
    for epoch in 1..=hyper.epochs {
        rng.shuffle(&mut order);
        let mut sum = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let mut g = detector.zero_grad();
            let loss = detector_loss(&detector, samples, labels, weights, batch, Some(&mut g))?;
            if !loss.is_finite() {
                return Err(FairNetError::Diverged {
                    epoch,
                    msg: "detector loss".into(),
                });
            }
            sum += loss * batch.len() as f64;
            detector.step(hyper.learning_rate, &g)?;
        }
        losses.push(sum / order.len() as f64);
    }
    Ok((detector, losses))
}

/// Wraps single representations as one-element sequences.
pub fn as_sequences(vectors: &[Vec<f64>]) -> Vec<Vec<Vec<f64>>> {
    vectors.iter().map(|v| vec![v.clone()]).collect()
}

/// Full-mode detectors are a switch on the known attribute; the other modes
/// use a trained scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum Gate {
    Switch { attribute: usize, layer: usize },
    Trained(BiasDetector),
}

impl Gate {
    pub fn attribute(&self) -> usize {
        match self {
            Gate::Switch { attribute, .. } => *attribute,
            Gate::Trained(d) => d.attribute,
        }
    }

    pub fn layer(&self) -> usize {
        match self {
            Gate::Switch { layer, .. } => *layer,
            Gate::Trained(d) => d.layer,
        }
    }

    /// `1` for the known minority and `0` for the majority under a switch;
    /// the scorer output otherwise.
    pub fn score(&self, representation: &[f64], s: Sensitive) -> Result<f64> {
        match self {
            Gate::Switch { .. } => match s.label() {
                Some(true) => Ok(1.0),
                Some(false) => Ok(0.0),
                None => Err(FairNetError::MissingArtifact(
                    "switch gate needs the sensitive label".into(),
                )),
            },
            Gate::Trained(d) => d.score(representation),
        }
    }

    pub fn detector(&self) -> Option<&BiasDetector> {
        match self {
            Gate::Trained(d) => Some(d),
            Gate::Switch { .. } => None,
        }
    }
}

/// Empirical `TPR_D`, `FPR_D` and their ratio (`None` when `FPR_D = 0`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorRates {
    pub tpr: f64,
    pub fpr: f64,
    pub ratio: Option<f64>,
}

pub fn evaluate_rates(scores: &[f64], minority: &[bool], tau: f64) -> Result<DetectorRates> {
    if scores.len() != minority.len() {
        return Err(dim("one group flag per score"));
    }
    let mut fired = [0usize; 2];
    let mut total = [0usize; 2];
    for (&p, &m) in scores.iter().zip(minority) {
        let g = usize::from(m);
        total[g] += 1;
        fired[g] += usize::from(p > tau);
    }
    if total[0] == 0 || total[1] == 0 {
        return Err(FairNetError::InsufficientData(
            "rate evaluation needs both groups".into(),
        ));
    }
    Ok(rates_from_counts(fired[1], total[1], fired[0], total[0]))
}

pub fn rates_from_counts(tp: usize, pos: usize, fp: usize, neg: usize) -> DetectorRates {
    let tpr = tp as f64 / pos as f64;
    let fpr = fp as f64 / neg as f64;
    DetectorRates {
        tpr,
        fpr,
        ratio: ratio(tpr, fpr),
    }
}

pub fn ratio(tpr: f64, fpr: f64) -> Option<f64> {
    (fpr > 0.0).then(|| tpr / fpr)
}

/// Local Outlier Factor with Euclidean distance. The k-distance
/// neighbourhood includes every point tied at the k-th distance.
pub fn lof_scores(points: &[Vec<f64>], k: usize) -> Result<Vec<f64>> {
    let n = points.len();
    if k == 0 || n <= k {
        return Err(invalid(format!("LOF needs n > k >= 1 (n = {n}, k = {k})")));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(dim("LOF points differ in dimension"));
    }
    let dist = |a: usize, b: usize| squared_distance(&points[a], &points[b]).sqrt();

    let mut k_distance = vec![0.0; n];
    let mut neighbourhoods: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    let mut row: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for (a, slot) in k_distance.iter_mut().enumerate() {
        row.clear();
        row.extend((0..n).filter(|&b| b != a).map(|b| (dist(a, b), b)));
        let (_, kth, _) = row.select_nth_unstable_by(k - 1, |x, y| x.0.total_cmp(&y.0));
        let kd = kth.0;
        *slot = kd;
        let mut hood: Vec<(usize, f64)> = row
            .iter()
            .filter(|(dv, _)| *dv <= kd)
            .map(|&(dv, b)| (b, dv))
            .collect();
        hood.sort_unstable_by_key(|&(b, _)| b);
        neighbourhoods.push(hood);
    }

    let lrd: Vec<f64> = neighbourhoods
        .iter()
        .map(|hood| {
            let mut reach: Vec<f64> = hood.iter().map(|&(b, dv)| k_distance[b].max(dv)).collect();
            let sum = sorted_sum(&mut reach);
            let sum = if sum == 0.0 { 1e-12 } else { sum };
            hood.len() as f64 / sum
        })
        .collect();

    Ok(neighbourhoods
        .iter()
        .enumerate()
        .map(|(a, hood)| {
            let mut dens: Vec<f64> = hood.iter().map(|&(b, _)| lrd[b]).collect();
            sorted_sum(&mut dens) / (hood.len() as f64 * lrd[a])
        })
        .collect())
}

/// Sum in ascending order so the result does not depend on input order.
fn sorted_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

/// Flags the `⌈q·n⌉` highest scores as minority; ties go to the lower index.
pub fn pseudo_label(scores: &[f64], contamination: f64) -> Result<Vec<bool>> {
    if !(contamination > 0.0 && contamination < 1.0) {
        return Err(invalid(format!(
            "contamination {contamination} outside (0, 1)"
        )));
    }
    let n = scores.len();
    // The epsilon keeps exact products such as 0.1 · 30 from rounding up.
    let count = ((contamination * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut flags = vec![false; n];
    for &i in order.iter().take(count.min(n)) {
        flags[i] = true;
    }
    Ok(flags)
}
