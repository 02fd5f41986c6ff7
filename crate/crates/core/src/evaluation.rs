//! Classification metrics, threshold selection, assistant correlation and the
//! production-style evaluation: retrieve, filter by the assistant, drop
//! keyphrases other recall sources already cover, count survivors, and have
//! the judge grade a sample of them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::BufRead;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::encoders::{score_cross, BiEncoderParams, CrossEncoderParams, TokenizedWorld};
use crate::error::{Error, Result};
use crate::numerics::pearson_corr;
use crate::retrieval::{retrieve_for_items, Index, RetrievalResult};
use crate::rng::stream;
use crate::synthworld::{judge, SyntheticWorld};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    /// Some ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

fn ratio(num: usize, den: usize, degenerate: &mut bool) -> f64 {
    if den == 0 {
        *degenerate = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Confusion-matrix metrics with `score >= threshold` predicted positive.
pub fn classification_metrics(
    scores: &[f64],
    labels: &[bool],
    threshold: f64,
) -> Result<ClassificationMetrics> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::EmptyInput("scores"));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let mut degenerate = false;
    let precision = ratio(tp, tp + fp, &mut degenerate);
    let recall = ratio(tp, tp + fn_, &mut degenerate);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        degenerate = true;
        0.0
    };
    Ok(ClassificationMetrics {
        precision,
        recall,
        f1,
        tp,
        fp,
        fn_,
        tn,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub value: f64,
    pub grid_step: f64,
    pub best_f1: f64,
}

/// Grid point `i` of `n` over `[-1, 1]`.
fn grid_value(i: usize, n: usize) -> f64 {
    (2.0 * i as f64 - n as f64) / n as f64
}

/// F1-maximizing cut on a uniform grid over `[-1, 1]`; ties keep the lowest.
pub fn select_threshold(scores: &[f64], labels: &[bool], grid_step: f64) -> Result<Threshold> {
    if !(grid_step > 0.0 && grid_step <= 2.0) {
        return Err(Error::config("grid_step", "must be in (0, 2]"));
    }
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::DegenerateData(format!(
            "validation set of {} pairs has a single class",
            labels.len()
        )));
    }
    let n = (2.0 / grid_step).round() as usize;
    let mut best = Threshold {
        value: -1.0,
        grid_step,
        best_f1: f64::NEG_INFINITY,
    };
    for i in 0..=n {
        let t = grid_value(i, n);
        let f1 = classification_metrics(scores, labels, t)?.f1;
        if f1 > best.best_f1 {
            best.value = t;
            best.best_f1 = f1;
        }
    }
    Ok(best)
}

/// Pearson correlation of student cosines with assistant scores; zero
/// variance on either side counts as no correlation.
pub fn ce_corr(student_cosines: &[f64], assistant_scores: &[f64]) -> Result<f64> {
    Ok(pearson_corr(student_cosines, assistant_scores)?.unwrap_or(0.0))
}

/// Lower median; `None` for an empty slice.
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[(v.len() - 1) / 2])
}

/// Mean fraction of the first `k` retrieved keyphrases that are relevant.
pub fn mean_precision_at_k<F>(results: &[RetrievalResult], k: usize, mut relevant: F) -> Result<f64>
where
    F: FnMut(usize, usize) -> Result<bool>,
{
    if results.is_empty() || k == 0 {
        return Err(Error::EmptyInput("retrieval results"));
    }
    let mut total = 0.0;
    for r in results {
        let mut hits = 0;
        for &(kp, _) in r.kps.iter().take(k) {
            if relevant(r.item, kp)? {
                hits += 1;
            }
        }
        total += hits as f64 / k as f64;
    }
    Ok(total / results.len() as f64)
}

// ---------------------------------------------------------------------------
// Production-style evaluation
// ---------------------------------------------------------------------------

/// Keyphrases each item already receives from other recall sources.
pub type OtherRecall = BTreeMap<usize, BTreeSet<usize>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductionEval {
    pub median_kw_cnt: f64,
    pub judge_pass_rate: f64,
    pub n_items: usize,
    pub n_survivors: usize,
    pub n_judged: usize,
    /// Surviving keyphrases per item, in input order.
    pub counts: Vec<(usize, usize)>,
}

/// Production evaluation over precomputed retrievals. `filter(item, kp)`
/// is the relevance-filter score and `grade(item, kp)` the judge verdict.
/// Items without an entry in `other` are treated as having none.
pub fn production_eval_from_results<F, G>(
    results: &[RetrievalResult],
    other: &OtherRecall,
    mut filter: F,
    filter_threshold: f64,
    mut grade: G,
    judge_sample_size: usize,
    seed: u64,
) -> Result<ProductionEval>
where
    F: FnMut(usize, usize) -> Result<f64>,
    G: FnMut(usize, usize) -> Result<bool>,
{
    if results.is_empty() {
        return Err(Error::config(
            "evaluation.item_sample_size",
            "no items to evaluate",
        ));
    }
    let empty = BTreeSet::new();
    let mut counts = Vec::with_capacity(results.len());
    let mut survivors = Vec::new();
    for r in results {
        let covered = other.get(&r.item).unwrap_or(&empty);
        let before = survivors.len();
        for &(kp, _) in &r.kps {
            if filter(r.item, kp)? >= filter_threshold && !covered.contains(&kp) {
                survivors.push((r.item, kp));
            }
        }
        counts.push((r.item, survivors.len() - before));
    }
    let sizes: Vec<f64> = counts.iter().map(|&(_, c)| c as f64).collect();
    let median_kw_cnt = lower_median(&sizes).expect("results are non-empty");

    let chosen: Vec<usize> = if survivors.len() <= judge_sample_size {
        (0..survivors.len()).collect()
    } else {
        let mut rng = stream(seed, "eval.judge_sample", 0);
        let mut idx = sample(&mut rng, survivors.len(), judge_sample_size).into_vec();
        idx.sort_unstable();
        idx
    };
    let mut passed = 0;
    for &i in &chosen {
        let (item, kp) = survivors[i];
        if grade(item, kp)? {
            passed += 1;
        }
    }
    Ok(ProductionEval {
        median_kw_cnt,
        judge_pass_rate: if chosen.is_empty() {
            0.0
        } else {
            passed as f64 / chosen.len() as f64
        },
        n_items: results.len(),
        n_survivors: survivors.len(),
        n_judged: chosen.len(),
        counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProductionEvalConfig {
    pub k: usize,
    /// Assistant score a retrieved pair needs to survive the filter.
    pub relevance_threshold: f64,
    pub judge_sample_size: usize,
    pub judge_noise: f64,
    pub seed: u64,
}

impl Default for ProductionEvalConfig {
    fn default() -> Self {
        ProductionEvalConfig {
            k: crate::retrieval::DEFAULT_K,
            relevance_threshold: 0.5,
            judge_sample_size: 10_000,
            judge_noise: 0.1,
            seed: 7,
        }
    }
}

/// Production evaluation of a student: retrieval with `index`, the
/// assistant as relevance filter and the world's judge as grader.
#[allow(clippy::too_many_arguments)]
pub fn production_eval(
    world: &SyntheticWorld,
    tw: &TokenizedWorld,
    student: &BiEncoderParams,
    index: &Index,
    assistant: &CrossEncoderParams,
    items: &[usize],
    other: &OtherRecall,
    cfg: &ProductionEvalConfig,
) -> Result<ProductionEval> {
    if items.is_empty() {
        return Err(Error::config(
            "evaluation.item_sample_size",
            "no items to evaluate",
        ));
    }
    let results = retrieve_for_items(student, tw, items, index, cfg.k)?;
    production_eval_from_results(
        &results,
        other,
        |item, kp| {
            let input = tw.cross_input(item, kp)?;
            score_cross(assistant, &input.keyphrase, &input.category, &input.title)
        },
        cfg.relevance_threshold,
        |item, kp| judge(world, item, kp, cfg.judge_noise),
        cfg.judge_sample_size,
        cfg.seed,
    )
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label_set: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f64,
    pub ce_corr: f64,
    pub median_kw_cnt: f64,
    pub judge_pass_rate: f64,
    pub k: usize,
    pub relevance_threshold: f64,
    pub seed: u64,
}

/// Markdown table in the layout Recall | Precision | F1 | C.E. corr |
/// median kw cnt | LLM pass rate.
pub fn markdown_table(reports: &[EvalReport]) -> String {
    let mut s = String::from(
        "| labels | Recall | Precision | F1 | C.E. corr | median kw cnt | LLM pass rate |\n\
         |---|---|---|---|---|---|---|\n",
    );
    for r in reports {
        let _ = writeln!(
            s,
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.1} | {:.2}% |",
            r.label_set,
            r.recall,
            r.precision,
            r.f1,
            r.ce_corr,
            r.median_kw_cnt,
            100.0 * r.judge_pass_rate
        );
    }
    s
}

/// Orders rows by median_kw_cnt, then pass rate, both descending; equal
/// rows keep their input order.
pub fn rank_reports(reports: &mut [EvalReport]) {
    reports.sort_by(|a, b| {
        b.median_kw_cnt
            .total_cmp(&a.median_kw_cnt)
            .then(b.judge_pass_rate.total_cmp(&a.judge_pass_rate))
    });
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OtherRecallLine {
    item: usize,
    kps: Vec<usize>,
}

/// Reads `{"item":int,"kps":[int,...]}` lines; repeated items merge.
pub fn read_other_recall<R: BufRead>(r: R) -> Result<OtherRecall> {
    let mut out = OtherRecall::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: OtherRecallLine = serde_json::from_str(&line)?;
        out.entry(l.item).or_default().extend(l.kps);
    }
    Ok(out)
}

pub fn write_other_recall<W: std::io::Write>(other: &OtherRecall, mut w: W) -> Result<()> {
    for (&item, kps) in other {
        serde_json::to_writer(
            &mut w,
            &OtherRecallLine {
                item,
                kps: kps.iter().copied().collect(),
            },
        )?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
