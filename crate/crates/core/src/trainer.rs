//! Multi-task training.
//!
//! Every batch holds pairs from a single label source. Within an epoch each
//! source walks a seeded permutation of its dataset, and the source of each
//! batch slot is drawn with probability proportional to that source's
//! remaining batch count, so batch counts per source are proportional to
//! dataset sizes and every source finishes its epoch.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{BiEncoderParams, CrossEncoderParams, ParamSet, TokenizedWorld};
use crate::error::{Error, Result};
use crate::losses::LossesConfig;
use crate::numerics::{
    backprop_bi, backprop_cross, optimizer_step, CrossBatch, LossSpec, OptimizerConfig,
    OptimizerState, PairBatch,
};
use crate::rng::stream;
use crate::synthworld::{LabeledPair, Source};

/// Smallest batch ever scheduled; a shorter epoch tail is dropped.
pub const MIN_BATCH: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledBatch {
    pub epoch: usize,
    pub source: Source,
    /// Row indices into the source's dataset.
    pub indices: Vec<usize>,
}

fn source_tag(source: Source) -> u64 {
    match source {
        Source::Ctr => 0,
        Source::Sr => 1,
        Source::Llm => 2,
        Source::Kd => 3,
    }
}

/// Seeded permutation of `0..n` for one source and epoch, cut into batches.
pub fn epoch_batches(
    n: usize,
    batch_size: usize,
    seed: u64,
    source: Source,
    epoch: usize,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream(
        seed,
        "schedule.permutation",
        (source_tag(source) << 32) | epoch as u64,
    );
    order.shuffle(&mut rng);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= MIN_BATCH)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Full training schedule over `epochs` epochs.
pub fn make_schedule(
    sizes: &BTreeMap<Source, usize>,
    batch_size: usize,
    epochs: usize,
    seed: u64,
) -> Result<Vec<ScheduledBatch>> {
    if batch_size < MIN_BATCH {
        return Err(Error::config(
            "batch_size",
            format!("must be >= {MIN_BATCH}"),
        ));
    }
    if sizes.values().all(|&n| n == 0) {
        return Err(Error::config("datasets", "all label sources are empty"));
    }
    let mut out = Vec::new();
    for epoch in 0..epochs {
        let mut queues: Vec<(Source, std::vec::IntoIter<Vec<usize>>, usize)> = sizes
            .iter()
            .filter(|(_, &n)| n > 0)
            .map(|(&s, &n)| {
                let b = epoch_batches(n, batch_size, seed, s, epoch);
                let len = b.len();
                (s, b.into_iter(), len)
            })
            .collect();
        let mut rng = stream(seed, "schedule.slots", epoch as u64);
        loop {
            let total: usize = queues.iter().map(|q| q.2).sum();
            if total == 0 {
                break;
            }
            let mut pick = rng.random_range(0..total);
            let q = queues
                .iter_mut()
                .find(|q| {
                    if pick < q.2 {
                        true
                    } else {
                        pick -= q.2;
                        false
                    }
                })
                .expect("pick < total");
            q.2 -= 1;
            let indices = q.1.next().expect("remaining count tracks the queue");
            out.push(ScheduledBatch {
                epoch,
                source: q.0,
                indices,
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Configuration and history
// ---------------------------------------------------------------------------

fn default_task_map() -> BTreeMap<Source, String> {
    BTreeMap::from([
        (Source::Ctr, "mnr".to_string()),
        (Source::Sr, "contrastive".to_string()),
        (Source::Llm, "contrastive".to_string()),
        (Source::Kd, "pearson".to_string()),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Label source to loss id.
    pub task_map: BTreeMap<Source, String>,
    /// Sources trained with Matryoshka wrapping; absent means wrapped.
    pub matryoshka: BTreeMap<Source, bool>,
    /// Gradient multiplier per source; absent means 1.
    pub task_weights: BTreeMap<Source, f64>,
    pub optimizer: OptimizerConfig,
    pub losses: LossesConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 8,
            seed: 7,
            task_map: default_task_map(),
            matryoshka: BTreeMap::new(),
            task_weights: BTreeMap::new(),
            optimizer: OptimizerConfig {
                kind: crate::numerics::OptimizerKind::Adam,
                lr: 0.01,
            },
            losses: LossesConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < MIN_BATCH {
            return Err(Error::config(
                "trainer.batch_size",
                format!("must be >= {MIN_BATCH}"),
            ));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::config("trainer.optimizer.lr", "must be > 0"));
        }
        for (s, w) in &self.task_weights {
            if !(w.is_finite() && *w >= 0.0) {
                return Err(Error::config(
                    format!("trainer.task_weights.{s}"),
                    "must be finite and >= 0",
                ));
            }
        }
        for (s, id) in &self.task_map {
            self.losses.resolve(id).map_err(|_| {
                Error::config(
                    format!("trainer.task_map.{s}"),
                    format!("unknown loss id {id:?}"),
                )
            })?;
        }
        Ok(())
    }

    /// Loss applied to batches from `source` for a student of width `dim`.
    pub fn loss_spec(&self, source: Source, dim: usize) -> Result<LossSpec> {
        let id = self.task_map.get(&source).ok_or_else(|| {
            Error::config(
                format!("trainer.task_map.{source}"),
                "label source has no mapped loss",
            )
        })?;
        let kind = self.losses.resolve(id)?;
        let wrapped = self.matryoshka.get(&source).copied().unwrap_or(true);
        let matryoshka = if wrapped {
            self.losses.matryoshka.validate(dim)?;
            Some(self.losses.matryoshka.clone())
        } else {
            None
        };
        Ok(LossSpec { kind, matryoshka })
    }

    fn weight(&self, source: Source) -> f64 {
        self.task_weights.get(&source).copied().unwrap_or(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossTrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for CrossTrainConfig {
    fn default() -> Self {
        CrossTrainConfig {
            batch_size: 32,
            epochs: 15,
            seed: 7,
            optimizer: OptimizerConfig {
                kind: crate::numerics::OptimizerKind::Adam,
                lr: 0.01,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub source: Source,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSnapshot {
    pub epoch: usize,
    /// Mean batch loss per source over the epoch.
    pub mean_loss: BTreeMap<Source, f64>,
    /// Value returned by the epoch hook, if any.
    pub eval: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSnapshot>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum HistoryLine {
    Step(StepRecord),
    Epoch(EpochSnapshot),
}

impl TrainHistory {
    /// Steps first, then epoch snapshots, one JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut w, &HistoryLine::Step(s.clone()))?;
            w.write_all(b"\n")?;
        }
        for e in &self.epochs {
            serde_json::to_writer(&mut w, &HistoryLine::Epoch(e.clone()))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> Result<Self> {
        let mut h = TrainHistory::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str(line)? {
                HistoryLine::Step(s) => h.steps.push(s),
                HistoryLine::Epoch(e) => h.epochs.push(e),
            }
        }
        Ok(h)
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    fn close_epoch(&mut self, epoch: usize, eval: Option<f64>) {
        let mut sums: BTreeMap<Source, (f64, usize)> = BTreeMap::new();
        for s in self.steps.iter().filter(|s| s.epoch == epoch) {
            let e = sums.entry(s.source).or_default();
            e.0 += s.loss;
            e.1 += 1;
        }
        self.epochs.push(EpochSnapshot {
            epoch,
            mean_loss: sums
                .into_iter()
                .map(|(k, (t, n))| (k, t / n as f64))
                .collect(),
            eval,
        });
    }
}

// ---------------------------------------------------------------------------
// Student
// ---------------------------------------------------------------------------

fn check_dataset(source: Source, pairs: &[LabeledPair], tw: &TokenizedWorld) -> Result<()> {
    for p in pairs {
        if p.source != source {
            return Err(Error::config(
                format!("datasets.{source}"),
                format!("contains a {} pair", p.source),
            ));
        }
        p.validate()?;
        if p.item >= tw.item_text.len() {
            return Err(Error::Lookup {
                kind: "item",
                id: p.item,
            });
        }
        if p.kp >= tw.keyphrase.len() {
            return Err(Error::Lookup {
                kind: "keyphrase",
                id: p.kp,
            });
        }
    }
    Ok(())
}

fn pair_batch(tw: &TokenizedWorld, pairs: &[LabeledPair], indices: &[usize]) -> PairBatch {
    PairBatch {
        items: indices
            .iter()
            .map(|&i| tw.item_text[pairs[i].item].clone())
            .collect(),
        keyphrases: indices
            .iter()
            .map(|&i| tw.keyphrase[pairs[i].kp].clone())
            .collect(),
        labels: indices.iter().map(|&i| pairs[i].value).collect(),
    }
}

fn check_params<P: ParamSet>(params: &P, prefix: &str, step: u64) -> Result<()> {
    for (name, t) in params.tensor_names().iter().zip(params.tensors()) {
        if !t.is_finite() {
            return Err(Error::NumericOverflow {
                path: format!("{prefix}.{name} after step {step}"),
            });
        }
    }
    Ok(())
}

fn scale_grads<P: ParamSet>(grads: &mut P, w: f64) {
    if w != 1.0 {
        for t in grads.tensors_mut() {
            t.data.iter_mut().for_each(|g| *g *= w);
        }
    }
}

/// Multi-task student training without per-epoch evaluation.
pub fn train_bi(
    params: BiEncoderParams,
    tw: &TokenizedWorld,
    datasets: &BTreeMap<Source, Vec<LabeledPair>>,
    cfg: &TrainConfig,
) -> Result<(BiEncoderParams, TrainHistory)> {
    train_bi_with(params, tw, datasets, cfg, |_, _| Ok(None))
}

/// Multi-task student training. `on_epoch(epoch, params)` runs after each
/// epoch; its value is stored in the epoch snapshot.
pub fn train_bi_with<F>(
    mut params: BiEncoderParams,
    tw: &TokenizedWorld,
    datasets: &BTreeMap<Source, Vec<LabeledPair>>,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<(BiEncoderParams, TrainHistory)>
where
    F: FnMut(usize, &BiEncoderParams) -> Result<Option<f64>>,
{
    cfg.validate()?;
    if params.vocab_size() != tw.vocab_size {
        return Err(Error::Shape(format!(
            "student vocabulary {} vs tokenized world {}",
            params.vocab_size(),
            tw.vocab_size
        )));
    }
    let mut specs = BTreeMap::new();
    for (&source, pairs) in datasets {
        check_dataset(source, pairs, tw)?;
        specs.insert(source, cfg.loss_spec(source, params.dim())?);
    }
    let sizes: BTreeMap<Source, usize> = datasets.iter().map(|(s, p)| (*s, p.len())).collect();
    let schedule = make_schedule(&sizes, cfg.batch_size, cfg.epochs, cfg.seed)?;
    let mut opt = OptimizerState::new(&cfg.optimizer)?;
    let mut history = TrainHistory::default();
    let mut epoch = 0;
    for (step, batch) in schedule.iter().enumerate() {
        while batch.epoch > epoch {
            let eval = on_epoch(epoch, &params)?;
            history.close_epoch(epoch, eval);
            epoch += 1;
        }
        let pb = pair_batch(tw, &datasets[&batch.source], &batch.indices);
        let mut out = backprop_bi(&params, &pb, &specs[&batch.source])?;
        scale_grads(&mut out.grads, cfg.weight(batch.source));
        optimizer_step(&mut params, &out.grads, &mut opt)?;
        check_params(&params, "bi_encoder", step as u64)?;
        history.steps.push(StepRecord {
            step: step as u64,
            epoch: batch.epoch,
            source: batch.source,
            loss: out.value,
        });
    }
    while epoch < cfg.epochs {
        let eval = on_epoch(epoch, &params)?;
        history.close_epoch(epoch, eval);
        epoch += 1;
    }
    Ok((params, history))
}

/// Plain single-loss training over one dataset: each epoch walks a seeded
/// permutation in batches. Equivalent to [`train_bi`] with only that
/// source enabled.
#[allow(clippy::too_many_arguments)]
pub fn train_single_task(
    mut params: BiEncoderParams,
    tw: &TokenizedWorld,
    pairs: &[LabeledPair],
    spec: &LossSpec,
    batch_size: usize,
    epochs: usize,
    seed: u64,
    optimizer: &OptimizerConfig,
) -> Result<BiEncoderParams> {
    let Some(first) = pairs.first() else {
        return Err(Error::config("datasets", "all label sources are empty"));
    };
    check_dataset(first.source, pairs, tw)?;
    let mut opt = OptimizerState::new(optimizer)?;
    for epoch in 0..epochs {
        for indices in epoch_batches(pairs.len(), batch_size, seed, first.source, epoch) {
            let out = backprop_bi(&params, &pair_batch(tw, pairs, &indices), spec)?;
            optimizer_step(&mut params, &out.grads, &mut opt)?;
        }
    }
    Ok(params)
}

// ---------------------------------------------------------------------------
// Assistant
// ---------------------------------------------------------------------------

/// Fine-tunes the cross-encoder with binary cross-entropy on judge labels.
pub fn train_cross(
    mut params: CrossEncoderParams,
    tw: &TokenizedWorld,
    llm: &[LabeledPair],
    cfg: &CrossTrainConfig,
) -> Result<(CrossEncoderParams, TrainHistory)> {
    if cfg.batch_size < MIN_BATCH {
        return Err(Error::config(
            "cross_trainer.batch_size",
            format!("must be >= {MIN_BATCH}"),
        ));
    }
    check_dataset(Source::Llm, llm, tw)?;
    let positives = llm.iter().filter(|p| p.value == 1.0).count();
    if positives == 0 || positives == llm.len() {
        return Err(Error::DegenerateData(format!(
            "judge dataset of {} pairs has a single class",
            llm.len()
        )));
    }
    let inputs = llm
        .iter()
        .map(|p| tw.cross_input(p.item, p.kp))
        .collect::<Result<Vec<_>>>()?;
    let sizes = BTreeMap::from([(Source::Llm, llm.len())]);
    let schedule = make_schedule(&sizes, cfg.batch_size, cfg.epochs, cfg.seed)?;
    let mut opt = OptimizerState::new(&cfg.optimizer)?;
    let mut history = TrainHistory::default();
    let mut epoch = 0;
    for (step, batch) in schedule.iter().enumerate() {
        while batch.epoch > epoch {
            history.close_epoch(epoch, None);
            epoch += 1;
        }
        let cb = CrossBatch {
            inputs: batch.indices.iter().map(|&i| inputs[i].clone()).collect(),
            labels: batch.indices.iter().map(|&i| llm[i].value).collect(),
        };
        let out = backprop_cross(&params, &cb)?;
        optimizer_step(&mut params, &out.grads, &mut opt)?;
        check_params(&params, "cross_encoder", step as u64)?;
        history.steps.push(StepRecord {
            step: step as u64,
            epoch: batch.epoch,
            source: Source::Llm,
            loss: out.value,
        });
    }
    while epoch < cfg.epochs {
        history.close_epoch(epoch, None);
        epoch += 1;
    }
    Ok((params, history))
}
