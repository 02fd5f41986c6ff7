//! Backpropagation through the toy encoders, optimizers, finite-difference
//! gradient checking and Pearson correlation.

use serde::{Deserialize, Serialize};

use crate::encoders::{
    check_ids, forward_bi, forward_cross, BiEncoderParams, BiForward, CrossEncoderParams,
    CrossInput, ParamSet, TokenSeq,
};
use crate::error::{Error, Result};
use crate::losses::{
    centered, matryoshka_wrap, pair_loss, EmbeddingLoss, LossKind, MatryoshkaConfig,
};
use crate::tensor::{dot, Matrix};

/// Sample Pearson correlation. `Ok(None)` when either side has zero
/// variance; callers decide what that means.
pub fn pearson_corr(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} values", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::BatchTooSmall {
            min: 2,
            got: a.len(),
        });
    }
    let (Some((ac, ass)), Some((bc, bss))) = (centered(a), centered(b)) else {
        return Ok(None);
    };
    // one rounding in the denominator keeps r exactly ±1 for equal spreads
    Ok(Some((dot(&ac, &bc) / (ass * bss).sqrt()).clamp(-1.0, 1.0)))
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// First moments, one buffer per tensor (Adam only).
    pub m: Vec<Vec<f64>>,
    /// Second moments, one buffer per tensor (Adam only).
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(cfg: &OptimizerConfig) -> Result<Self> {
        if !(cfg.lr > 0.0) {
            return Err(Error::config("optimizer.lr", "must be > 0"));
        }
        Ok(OptimizerState {
            kind: cfg.kind,
            learning_rate: cfg.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        })
    }
}

/// One SGD or Adam update of `params` in place.
pub fn optimizer_step<P: ParamSet>(
    params: &mut P,
    grads: &P,
    state: &mut OptimizerState,
) -> Result<()> {
    let shapes: Vec<_> = params.tensors().iter().map(|t| t.shape()).collect();
    let gshapes: Vec<_> = grads.tensors().iter().map(|t| t.shape()).collect();
    if shapes != gshapes {
        return Err(Error::Shape(format!(
            "params {shapes:?} vs grads {gshapes:?}"
        )));
    }
    if state.kind == OptimizerKind::Adam {
        if state.m.is_empty() {
            state.m = shapes.iter().map(|(r, c)| vec![0.0; r * c]).collect();
            state.v = state.m.clone();
        } else if state
            .m
            .iter()
            .map(Vec::len)
            .ne(shapes.iter().map(|(r, c)| r * c))
        {
            return Err(Error::Shape(
                "optimizer moments do not match parameters".into(),
            ));
        }
    }
    state.step += 1;
    let lr = state.learning_rate;
    match state.kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
                for (pv, gv) in p.data.iter_mut().zip(&g.data) {
                    *pv -= lr * gv;
                }
            }
        }
        OptimizerKind::Adam => {
            let t = state.step as i32;
            let bc1 = 1.0 - state.beta1.powi(t);
            let bc2 = 1.0 - state.beta2.powi(t);
            let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
            for (((p, g), m), v) in params
                .tensors_mut()
                .into_iter()
                .zip(grads.tensors())
                .zip(state.m.iter_mut())
                .zip(state.v.iter_mut())
            {
                for i in 0..p.data.len() {
                    let gi = g.data[i];
                    m[i] = b1 * m[i] + (1.0 - b1) * gi;
                    v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    p.data[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Bi-encoder backprop
// ---------------------------------------------------------------------------

/// A single-source batch of (item, keyphrase) token sequences with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub items: Vec<TokenSeq>,
    pub keyphrases: Vec<TokenSeq>,
    pub labels: Vec<f64>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.items.len() != self.keyphrases.len() || self.items.len() != self.labels.len() {
            return Err(Error::Shape(format!(
                "batch with {} items, {} keyphrases, {} labels",
                self.items.len(),
                self.keyphrases.len(),
                self.labels.len()
            )));
        }
        Ok(())
    }
}

/// Loss applied to a batch: a base loss, optionally summed over Matryoshka
/// prefixes.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    pub matryoshka: Option<MatryoshkaConfig>,
}

impl LossSpec {
    pub fn plain(kind: LossKind) -> Self {
        LossSpec {
            kind,
            matryoshka: None,
        }
    }

    fn evaluate(
        &self,
        left: &[Vec<f64>],
        right: &[Vec<f64>],
        labels: &[f64],
    ) -> Result<EmbeddingLoss> {
        match &self.matryoshka {
            Some(cfg) => matryoshka_wrap(&self.kind, left, right, labels, cfg),
            None => pair_loss(&self.kind, left, right, labels),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Backprop<P> {
    pub value: f64,
    pub grads: P,
}

fn forward_all(params: &BiEncoderParams, seqs: &[TokenSeq], side: &str) -> Result<Vec<BiForward>> {
    seqs.iter()
        .map(|s| {
            forward_bi(params, s).map_err(|e| match e {
                Error::NumericOverflow { path } => Error::NumericOverflow {
                    path: format!("{side}: {path}"),
                },
                other => other,
            })
        })
        .collect()
}

/// Loss value only.
pub fn loss_bi(params: &BiEncoderParams, batch: &PairBatch, spec: &LossSpec) -> Result<f64> {
    batch.validate()?;
    let left: Vec<Vec<f64>> = forward_all(params, &batch.items, "item")?
        .into_iter()
        .map(|f| f.output)
        .collect();
    let right: Vec<Vec<f64>> = forward_all(params, &batch.keyphrases, "keyphrase")?
        .into_iter()
        .map(|f| f.output)
        .collect();
    Ok(spec.evaluate(&left, &right, &batch.labels)?.value)
}

fn backward_bi(
    params: &BiEncoderParams,
    grads: &mut BiEncoderParams,
    seq: &TokenSeq,
    fwd: &BiForward,
    g_out: &[f64],
) {
    // through L2 normalization
    let proj = dot(&fwd.output, g_out);
    let g_z: Vec<f64> = g_out
        .iter()
        .zip(&fwd.output)
        .map(|(g, o)| (g - o * proj) / fwd.projected_norm)
        .collect();
    grads.projection.add_outer(&fwd.pooled, &g_z);
    let g_pooled = params.projection.mul_vec(&g_z);
    let inv = 1.0 / seq.len() as f64;
    for &id in seq.ids() {
        crate::tensor::axpy(grads.token_table.row_mut(id as usize), inv, &g_pooled);
    }
}

/// Loss value and exact parameter gradients through pooling, projection,
/// normalization, cosine and the loss.
pub fn backprop_bi(
    params: &BiEncoderParams,
    batch: &PairBatch,
    spec: &LossSpec,
) -> Result<Backprop<BiEncoderParams>> {
    batch.validate()?;
    let left_fwd = forward_all(params, &batch.items, "item")?;
    let right_fwd = forward_all(params, &batch.keyphrases, "keyphrase")?;
    let left: Vec<Vec<f64>> = left_fwd.iter().map(|f| f.output.clone()).collect();
    let right: Vec<Vec<f64>> = right_fwd.iter().map(|f| f.output.clone()).collect();
    let loss = spec.evaluate(&left, &right, &batch.labels)?;

    let mut grads = params.zeros_like();
    for ((seq, fwd), g) in batch.items.iter().zip(&left_fwd).zip(&loss.left_grads) {
        backward_bi(params, &mut grads, seq, fwd, g);
    }
    for ((seq, fwd), g) in batch
        .keyphrases
        .iter()
        .zip(&right_fwd)
        .zip(&loss.right_grads)
    {
        backward_bi(params, &mut grads, seq, fwd, g);
    }
    for (name, t) in grads.tensor_names().iter().zip(grads.tensors()) {
        if !t.is_finite() {
            return Err(Error::NumericOverflow {
                path: format!("grad.bi_encoder.{name}"),
            });
        }
    }
    Ok(Backprop {
        value: loss.value,
        grads,
    })
}

// ---------------------------------------------------------------------------
// Cross-encoder backprop (binary cross-entropy)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct CrossBatch {
    pub inputs: Vec<CrossInput>,
    pub labels: Vec<f64>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Binary cross-entropy of a logit against label `y`.
pub fn bce_from_logit(logit: f64, y: f64) -> f64 {
    softplus(logit) - y * logit
}

pub fn loss_cross(params: &CrossEncoderParams, batch: &CrossBatch) -> Result<f64> {
    if batch.inputs.len() != batch.labels.len() || batch.inputs.is_empty() {
        return Err(Error::Shape(
            "cross batch needs one label per input, at least one row".into(),
        ));
    }
    let mut total = 0.0;
    for (input, &y) in batch.inputs.iter().zip(&batch.labels) {
        total += bce_from_logit(forward_cross(params, input)?.logit, y);
    }
    Ok(total / batch.inputs.len() as f64)
}

pub fn backprop_cross(
    params: &CrossEncoderParams,
    batch: &CrossBatch,
) -> Result<Backprop<CrossEncoderParams>> {
    if batch.inputs.len() != batch.labels.len() || batch.inputs.is_empty() {
        return Err(Error::Shape(
            "cross batch needs one label per input, at least one row".into(),
        ));
    }
    let n = batch.inputs.len() as f64;
    let h = params.hidden();
    let mut grads = params.zeros_like();
    let mut total = 0.0;
    for (input, &y) in batch.inputs.iter().zip(&batch.labels) {
        let fwd = forward_cross(params, input)?;
        check_ids(&fwd.ids, params.vocab_size())?;
        total += bce_from_logit(fwd.logit, y);
        let g_logit = (fwd.score - y) / n;
        crate::tensor::axpy(&mut grads.w2.data, g_logit, &fwd.hidden);
        grads.b2.data[0] += g_logit;
        let g_pre: Vec<f64> = fwd
            .hidden
            .iter()
            .zip(&params.w2.data)
            .map(|(a, w)| w * g_logit * (1.0 - a * a))
            .collect();
        grads.w1.add_outer(&fwd.features, &g_pre);
        crate::tensor::axpy(&mut grads.b1.data, 1.0, &g_pre);
        let g_features = params.w1.mul_vec(&g_pre);
        let inv = 1.0 / fwd.ids.len() as f64;
        for &id in &fwd.ids {
            crate::tensor::axpy(
                grads.token_table.row_mut(id as usize),
                inv,
                &g_features[..h],
            );
        }
    }
    for (name, t) in grads.tensor_names().iter().zip(grads.tensors()) {
        if !t.is_finite() {
            return Err(Error::NumericOverflow {
                path: format!("grad.cross_encoder.{name}"),
            });
        }
    }
    Ok(Backprop {
        value: total / n,
        grads,
    })
}

// ---------------------------------------------------------------------------
// Finite-difference checking
// ---------------------------------------------------------------------------

pub const GRAD_CHECK_PARAM_LIMIT: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter_path: String,
    pub epsilon: f64,
    pub n_params: usize,
}

/// Relative error `|a − n| / (|a| + |n| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compares `analytic` against central differences of `loss` for every
/// parameter of `params`.
pub fn finite_diff_check<P, F>(
    params: &P,
    analytic: &P,
    epsilon: f64,
    loss: F,
) -> Result<GradCheckReport>
where
    P: ParamSet,
    F: Fn(&P) -> Result<f64>,
{
    let n_params = params.num_params();
    if n_params > GRAD_CHECK_PARAM_LIMIT {
        return Err(Error::TooLarge {
            params: n_params,
            limit: GRAD_CHECK_PARAM_LIMIT,
        });
    }
    if !(epsilon > 0.0) {
        return Err(Error::config("epsilon", "must be > 0"));
    }
    let names = params.tensor_names();
    let analytic_tensors: Vec<Matrix> = analytic.tensors().into_iter().cloned().collect();
    let mut probe = params.clone();
    let mut worst = (0.0f64, String::from("<none>"));
    for (ti, name) in names.iter().enumerate() {
        let len = analytic_tensors[ti].data.len();
        let cols = analytic_tensors[ti].cols;
        for i in 0..len {
            let orig = probe.tensors()[ti].data[i];
            probe.tensors_mut()[ti].data[i] = orig + epsilon;
            let up = loss(&probe)?;
            probe.tensors_mut()[ti].data[i] = orig - epsilon;
            let down = loss(&probe)?;
            probe.tensors_mut()[ti].data[i] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let err = relative_error(analytic_tensors[ti].data[i], numeric);
            if err > worst.0 {
                worst = (err, format!("{name}[{},{}]", i / cols, i % cols));
            }
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst.0,
        worst_parameter_path: worst.1,
        epsilon,
        n_params,
    })
}

/// Finite-difference check of [`backprop_bi`] on one batch.
pub fn finite_diff_check_bi(
    params: &BiEncoderParams,
    batch: &PairBatch,
    spec: &LossSpec,
    epsilon: f64,
) -> Result<GradCheckReport> {
    if params.num_params() > GRAD_CHECK_PARAM_LIMIT {
        return Err(Error::TooLarge {
            params: params.num_params(),
            limit: GRAD_CHECK_PARAM_LIMIT,
        });
    }
    let analytic = backprop_bi(params, batch, spec)?.grads;
    finite_diff_check(params, &analytic, epsilon, |p| loss_bi(p, batch, spec))
}

/// Finite-difference check of [`backprop_cross`] on one batch.
pub fn finite_diff_check_cross(
    params: &CrossEncoderParams,
    batch: &CrossBatch,
    epsilon: f64,
) -> Result<GradCheckReport> {
    if params.num_params() > GRAD_CHECK_PARAM_LIMIT {
        return Err(Error::TooLarge {
            params: params.num_params(),
            limit: GRAD_CHECK_PARAM_LIMIT,
        });
    }
    let analytic = backprop_cross(params, batch)?.grads;
    finite_diff_check(params, &analytic, epsilon, |p| loss_cross(p, batch))
}
