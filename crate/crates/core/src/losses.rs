//! Training losses with analytic gradients.
//!
//! Embedding-consuming losses (MNR, contrastive) take raw vectors and
//! compute cosines internally, so gradients are with respect to the raw
//! inputs. Score-consuming losses (Pearson rank imitation, CoSENT, MSE)
//! take teacher scores and student cosines and return gradients with
//! respect to the student cosines. [`pair_loss`] lifts any of them to a
//! batch of (item, keyphrase) embedding pairs, and [`matryoshka_wrap`] sums
//! a pair loss over embedding prefixes.
//!
//! | id            | consumes    | reduction            |
//! |---------------|-------------|----------------------|
//! | `mnr`         | embeddings  | mean over anchors    |
//! | `contrastive` | embeddings  | mean over pairs      |
//! | `pearson`     | cosines     | one value per batch  |
//! | `cosent`      | cosines     | one value per batch  |
//! | `mse`         | cosines     | mean over pairs      |

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, norm};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MnrConfig {
    pub temperature: f64,
}

impl Default for MnrConfig {
    fn default() -> Self {
        MnrConfig { temperature: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub margin: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig { margin: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CosentConfig {
    pub scale: f64,
}

impl Default for CosentConfig {
    fn default() -> Self {
        CosentConfig { scale: 20.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatryoshkaConfig {
    pub dims: Vec<usize>,
    pub weights: Vec<f64>,
}

impl Default for MatryoshkaConfig {
    fn default() -> Self {
        MatryoshkaConfig {
            dims: vec![64, 128, 256],
            weights: vec![1.0; 3],
        }
    }
}

impl MatryoshkaConfig {
    pub fn validate(&self, full_dim: usize) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::config("matryoshka.dims", "must not be empty"));
        }
        if self.weights.len() != self.dims.len() {
            return Err(Error::config(
                "matryoshka.weights",
                "need one weight per dim",
            ));
        }
        if self.dims.windows(2).any(|w| w[0] >= w[1]) || self.dims[0] == 0 {
            return Err(Error::config(
                "matryoshka.dims",
                "must be positive and strictly ascending",
            ));
        }
        if let Some(&d) = self.dims.iter().find(|&&d| d > full_dim) {
            return Err(Error::config(
                "matryoshka.dims",
                format!("{d} exceeds embedding dim {full_dim}"),
            ));
        }
        if self.weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::config("matryoshka.weights", "must be positive"));
        }
        Ok(())
    }
}

/// Loss over a batch of embedding pairs with gradients for both sides.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingLoss {
    pub value: f64,
    pub left_grads: Vec<Vec<f64>>,
    pub right_grads: Vec<Vec<f64>>,
}

/// Loss over a score vector with gradients for the student scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLoss {
    pub value: f64,
    pub grads: Vec<f64>,
}

fn check_finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NumericOverflow {
            path: format!("loss.{what}"),
        })
    }
}

/// Cosine of `u, v` and its gradients with respect to each.
pub(crate) fn cosine_with_grads(u: &[f64], v: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return (0.0, vec![0.0; u.len()], vec![0.0; v.len()]);
    }
    let c = dot(u, v) / (nu * nv);
    let gu = u
        .iter()
        .zip(v)
        .map(|(ui, vi)| vi / (nu * nv) - c * ui / (nu * nu))
        .collect();
    let gv = v
        .iter()
        .zip(u)
        .map(|(vi, ui)| ui / (nu * nv) - c * vi / (nv * nv))
        .collect();
    (c, gu, gv)
}

fn check_pairs<V: AsRef<[f64]>>(left: &[V], right: &[V]) -> Result<usize> {
    if left.len() != right.len() {
        return Err(Error::Shape(format!(
            "{} left rows vs {} right rows",
            left.len(),
            right.len()
        )));
    }
    let dim = left.first().map(|v| v.as_ref().len()).unwrap_or(0);
    if left.iter().chain(right).any(|v| v.as_ref().len() != dim) {
        return Err(Error::Shape("embeddings of unequal dimension".into()));
    }
    Ok(dim)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// MNR loss from a `K x K` matrix of similarity logits whose diagonal holds
/// the positives. Returns the value and `dL/dlogit`.
pub fn mnr_from_logits(logits: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    let k = logits.len();
    if k < 2 {
        return Err(Error::BatchTooSmall { min: 2, got: k });
    }
    if logits.iter().any(|row| row.len() != k) {
        return Err(Error::Shape("logit matrix must be square".into()));
    }
    let inv_k = 1.0 / k as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(k);
    for (i, row) in logits.iter().enumerate() {
        let lse = log_sum_exp(row);
        // Relative to the positive logit the loss is ln(1 + Σ_j≠i e^(s_j − s_i)),
        // which avoids cancelling lse against s_i when the loss is tiny.
        let worst = (0..k)
            .filter(|&j| j != i)
            .map(|j| row[j] - row[i])
            .fold(f64::NEG_INFINITY, f64::max);
        value += if worst <= 0.0 {
            (0..k)
                .filter(|&j| j != i)
                .map(|j| (row[j] - row[i]).exp())
                .sum::<f64>()
                .ln_1p()
        } else {
            lse - row[i]
        };
        let mut g: Vec<f64> = row.iter().map(|&s| (s - lse).exp() * inv_k).collect();
        // p_i − 1 = −Σ_j≠i p_j, summed directly to keep small gradients exact
        g[i] = -(0..k).filter(|&j| j != i).map(|j| g[j]).sum::<f64>();
        grads.push(g);
    }
    Ok((check_finite(value * inv_k, "mnr")?, grads))
}

/// Multiple-negatives ranking loss with in-batch negatives: anchor `i` must
/// pick positive `i` out of all `K` positives in the batch.
pub fn mnr_loss<V: AsRef<[f64]>>(
    anchors: &[V],
    positives: &[V],
    cfg: &MnrConfig,
) -> Result<EmbeddingLoss> {
    if !(cfg.temperature > 0.0) {
        return Err(Error::config("mnr.temperature", "must be > 0"));
    }
    let dim = check_pairs(anchors, positives)?;
    let k = anchors.len();
    if k < 2 {
        return Err(Error::BatchTooSmall { min: 2, got: k });
    }
    let inv_t = 1.0 / cfg.temperature;
    let mut cos_grads = Vec::with_capacity(k);
    let mut logits = Vec::with_capacity(k);
    for a in anchors {
        let mut row = Vec::with_capacity(k);
        let mut grow = Vec::with_capacity(k);
        for p in positives {
            let (c, ga, gp) = cosine_with_grads(a.as_ref(), p.as_ref());
            row.push(c * inv_t);
            grow.push((ga, gp));
        }
        logits.push(row);
        cos_grads.push(grow);
    }
    let (value, dlogits) = mnr_from_logits(&logits)?;
    let mut left_grads = vec![vec![0.0; dim]; k];
    let mut right_grads = vec![vec![0.0; dim]; k];
    for i in 0..k {
        for j in 0..k {
            let g = dlogits[i][j] * inv_t;
            if g == 0.0 {
                continue;
            }
            let (ga, gp) = &cos_grads[i][j];
            crate::tensor::axpy(&mut left_grads[i], g, ga);
            crate::tensor::axpy(&mut right_grads[j], g, gp);
        }
    }
    Ok(EmbeddingLoss {
        value,
        left_grads,
        right_grads,
    })
}

/// `½(y·d² + (1−y)·max(0, m−d)²)` with cosine distance `d`, averaged over
/// the batch.
pub fn contrastive_loss<V: AsRef<[f64]>>(
    u: &[V],
    v: &[V],
    labels: &[f64],
    cfg: &ContrastiveConfig,
) -> Result<EmbeddingLoss> {
    if !(cfg.margin > 0.0) {
        return Err(Error::config("contrastive.margin", "must be > 0"));
    }
    let dim = check_pairs(u, v)?;
    if labels.len() != u.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} pairs",
            labels.len(),
            u.len()
        )));
    }
    if u.is_empty() {
        return Err(Error::BatchTooSmall { min: 1, got: 0 });
    }
    if let Some(y) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::config(
            "contrastive label",
            format!("{y} is not binary"),
        ));
    }
    let n = u.len() as f64;
    let mut value = 0.0;
    let mut left_grads = Vec::with_capacity(u.len());
    let mut right_grads = Vec::with_capacity(u.len());
    for ((a, b), &y) in u.iter().zip(v).zip(labels) {
        let (c, ga, gb) = cosine_with_grads(a.as_ref(), b.as_ref());
        let d = 1.0 - c;
        let hinge = (cfg.margin - d).max(0.0);
        value += 0.5 * (y * d * d + (1.0 - y) * hinge * hinge);
        // dL/dd, then dd/dc = -1
        let dl_dd = y * d - (1.0 - y) * hinge;
        let dl_dc = -dl_dd / n;
        left_grads.push(ga.iter().map(|g| g * dl_dc).collect());
        right_grads.push(gb.iter().map(|g| g * dl_dc).collect());
    }
    debug_assert!(left_grads.iter().all(|g: &Vec<f64>| g.len() == dim));
    Ok(EmbeddingLoss {
        value: check_finite(value / n, "contrastive")?,
        left_grads,
        right_grads,
    })
}

fn check_scores(teacher: &[f64], student: &[f64], min: usize) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::Shape(format!(
            "{} teacher scores vs {} student scores",
            teacher.len(),
            student.len()
        )));
    }
    if teacher.len() < min {
        return Err(Error::BatchTooSmall {
            min,
            got: teacher.len(),
        });
    }
    Ok(())
}

/// Centered copy and its sum of squares, or `None` when the spread is
/// indistinguishable from rounding noise.
pub(crate) fn centered(xs: &[f64]) -> Option<(Vec<f64>, f64)> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let c: Vec<f64> = xs.iter().map(|x| x - mean).collect();
    let ss = dot(&c, &c);
    let scale = dot(xs, xs);
    if ss == 0.0 || ss <= 1e-24 * scale {
        None
    } else {
        Some((c, ss))
    }
}

/// Rank-imitation loss `1 − corr(teacher, student)`. A zero-variance side
/// gives loss 1 and zero gradient.
pub fn pearson_ri_loss(teacher: &[f64], student: &[f64]) -> Result<ScoreLoss> {
    check_scores(teacher, student, 2)?;
    let (Some((tc, tss)), Some((sc, sss))) = (centered(teacher), centered(student)) else {
        return Ok(ScoreLoss {
            value: 1.0,
            grads: vec![0.0; student.len()],
        });
    };
    let tn = tss.sqrt();
    let sn = sss.sqrt();
    let r = (dot(&tc, &sc) / (tss * sss).sqrt()).clamp(-1.0, 1.0);
    // d corr / d s = (tc/|tc| − r·sc/|sc|) / |sc|; both terms are already
    // mean-free so the centering Jacobian drops out.
    let grads = tc
        .iter()
        .zip(&sc)
        .map(|(t, s)| -(t / tn - r * s / sn) / sn)
        .collect();
    Ok(ScoreLoss {
        value: check_finite(1.0 - r, "pearson")?,
        grads,
    })
}

/// CoSENT: `log(1 + Σ exp(scale·(s_b − s_a)))` over ordered index pairs with
/// `teacher[a] > teacher[b]`. Discordant student orderings dominate the sum.
pub fn cosent_loss(teacher: &[f64], student: &[f64], cfg: &CosentConfig) -> Result<ScoreLoss> {
    if !(cfg.scale > 0.0) {
        return Err(Error::config("cosent.scale", "must be > 0"));
    }
    check_scores(teacher, student, 2)?;
    let n = teacher.len();
    let mut terms = vec![0.0];
    let mut pairs = Vec::new();
    for a in 0..n {
        for b in 0..n {
            if teacher[a] > teacher[b] {
                terms.push(cfg.scale * (student[b] - student[a]));
                pairs.push((a, b));
            }
        }
    }
    let lse = log_sum_exp(&terms);
    let mut grads = vec![0.0; n];
    for (&(a, b), x) in pairs.iter().zip(&terms[1..]) {
        let w = (x - lse).exp() * cfg.scale;
        grads[b] += w;
        grads[a] -= w;
    }
    Ok(ScoreLoss {
        value: check_finite(lse, "cosent")?,
        grads,
    })
}

/// Mean squared error between teacher scores and student cosines.
pub fn mse_loss(teacher: &[f64], student: &[f64]) -> Result<ScoreLoss> {
    check_scores(teacher, student, 1)?;
    let n = teacher.len() as f64;
    let mut value = 0.0;
    let grads = teacher
        .iter()
        .zip(student)
        .map(|(t, s)| {
            let diff = s - t;
            value += diff * diff;
            2.0 * diff / n
        })
        .collect();
    Ok(ScoreLoss {
        value: check_finite(value / n, "mse")?,
        grads,
    })
}

/// Hyperparameters of every loss plus the Matryoshka prefix set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossesConfig {
    pub mnr: MnrConfig,
    pub contrastive: ContrastiveConfig,
    pub cosent: CosentConfig,
    pub matryoshka: MatryoshkaConfig,
}

impl LossesConfig {
    pub fn resolve(&self, id: &str) -> Result<LossKind> {
        LossKind::from_id(id, self.mnr, self.contrastive, self.cosent)
    }
}

/// A loss selected by its configuration id.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "lowercase")]
pub enum LossKind {
    Mnr(MnrConfig),
    Contrastive(ContrastiveConfig),
    Cosent(CosentConfig),
    Pearson,
    Mse,
}

impl LossKind {
    pub fn id(&self) -> &'static str {
        match self {
            LossKind::Mnr(_) => "mnr",
            LossKind::Contrastive(_) => "contrastive",
            LossKind::Cosent(_) => "cosent",
            LossKind::Pearson => "pearson",
            LossKind::Mse => "mse",
        }
    }

    /// Resolves a string id against the configured loss blocks.
    pub fn from_id(
        id: &str,
        mnr: MnrConfig,
        contrastive: ContrastiveConfig,
        cosent: CosentConfig,
    ) -> Result<Self> {
        match id {
            "mnr" => Ok(LossKind::Mnr(mnr)),
            "contrastive" => Ok(LossKind::Contrastive(contrastive)),
            "cosent" => Ok(LossKind::Cosent(cosent)),
            "pearson" => Ok(LossKind::Pearson),
            "mse" => Ok(LossKind::Mse),
            other => Err(Error::config("loss", format!("unknown loss id {other:?}"))),
        }
    }

    pub fn min_batch(&self) -> usize {
        match self {
            LossKind::Contrastive(_) | LossKind::Mse => 1,
            _ => 2,
        }
    }
}

/// Evaluates `kind` on a batch of `(left[i], right[i])` embedding pairs with
/// per-pair `labels` (binary labels or teacher scores; ignored by MNR).
pub fn pair_loss<V: AsRef<[f64]>>(
    kind: &LossKind,
    left: &[V],
    right: &[V],
    labels: &[f64],
) -> Result<EmbeddingLoss> {
    match kind {
        LossKind::Mnr(cfg) => mnr_loss(left, right, cfg),
        LossKind::Contrastive(cfg) => contrastive_loss(left, right, labels, cfg),
        LossKind::Cosent(_) | LossKind::Pearson | LossKind::Mse => {
            check_pairs(left, right)?;
            if labels.len() != left.len() {
                return Err(Error::Shape(format!(
                    "{} labels for {} pairs",
                    labels.len(),
                    left.len()
                )));
            }
            let mut cos = Vec::with_capacity(left.len());
            let mut cgrads = Vec::with_capacity(left.len());
            for (a, b) in left.iter().zip(right) {
                let (c, ga, gb) = cosine_with_grads(a.as_ref(), b.as_ref());
                cos.push(c);
                cgrads.push((ga, gb));
            }
            let scored = match kind {
                LossKind::Cosent(cfg) => cosent_loss(labels, &cos, cfg)?,
                LossKind::Pearson => pearson_ri_loss(labels, &cos)?,
                _ => mse_loss(labels, &cos)?,
            };
            let (left_grads, right_grads) = cgrads
                .into_iter()
                .zip(&scored.grads)
                .map(|((ga, gb), &g)| {
                    (
                        ga.into_iter().map(|x| x * g).collect(),
                        gb.into_iter().map(|x| x * g).collect(),
                    )
                })
                .unzip();
            Ok(EmbeddingLoss {
                value: scored.value,
                left_grads,
                right_grads,
            })
        }
    }
}

/// Weighted sum of `kind` evaluated on each Matryoshka prefix. Prefixes are
/// re-normalized by the cosine inside each loss; gradients land in the
/// leading coordinates of the full-dimension inputs.
pub fn matryoshka_wrap<V: AsRef<[f64]>>(
    kind: &LossKind,
    left: &[V],
    right: &[V],
    labels: &[f64],
    cfg: &MatryoshkaConfig,
) -> Result<EmbeddingLoss> {
    let dim = check_pairs(left, right)?;
    cfg.validate(dim)?;
    let mut total = EmbeddingLoss {
        value: 0.0,
        left_grads: vec![vec![0.0; dim]; left.len()],
        right_grads: vec![vec![0.0; dim]; right.len()],
    };
    for (&m, &w) in cfg.dims.iter().zip(&cfg.weights) {
        let lp: Vec<&[f64]> = left.iter().map(|v| &v.as_ref()[..m]).collect();
        let rp: Vec<&[f64]> = right.iter().map(|v| &v.as_ref()[..m]).collect();
        let part = pair_loss(kind, &lp, &rp, labels)?;
        total.value += w * part.value;
        for (acc, g) in total.left_grads.iter_mut().zip(&part.left_grads) {
            crate::tensor::axpy(&mut acc[..m], w, g);
        }
        for (acc, g) in total.right_grads.iter_mut().zip(&part.right_grads) {
            crate::tensor::axpy(&mut acc[..m], w, g);
        }
    }
    Ok(total)
}
