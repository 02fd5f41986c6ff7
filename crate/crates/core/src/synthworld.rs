//! Synthetic advertiser marketplace.
//!
//! Items and keyphrases are mixtures over latent topics. Words belong to
//! topics, so titles and keyphrases carry (noisy) evidence of their topic
//! mixture. Ground-truth relevance is a thresholded cosine between topic
//! mixtures. Three label sources are derived from the world, each with its
//! own bias:
//!
//! * click logs: only pairs approved by the search-relevance filter are ever
//!   shown (middleman bias), click probability decays with rank (position
//!   bias), and unpopular items collect too little traffic to produce any
//!   positive (missing-not-at-random);
//! * search-relevance labels: thresholded noisy relevance scores;
//! * judge labels: ground truth flipped with a fixed noise rate.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Binomial, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Sparse topic mixture: topic id -> weight. Weights are non-negative and
/// sum to one.
pub type TopicWeights = BTreeMap<usize, f64>;

/// Row-major grid, used for the item x keyphrase matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Grid {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemDoc {
    pub id: usize,
    pub title_tokens: Vec<String>,
    pub category_tokens: Vec<String>,
    pub topic_weights: TopicWeights,
}

impl ItemDoc {
    pub fn title(&self) -> String {
        self.title_tokens.join(" ")
    }

    pub fn category(&self) -> String {
        self.category_tokens.join(" ")
    }

    /// Category followed by title, the text the student embeds for an item.
    pub fn full_text(&self) -> String {
        format!("{} {}", self.category(), self.title())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyphrase {
    pub id: usize,
    pub tokens: Vec<String>,
    pub topic_weights: TopicWeights,
}

impl Keyphrase {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_topics: usize,
    pub n_items: usize,
    pub n_keyphrases: usize,
    /// Number of distinct words. Word `w` belongs to topic `w % n_topics`.
    pub vocab_size: usize,
    pub title_len_range: (usize, usize),
    pub keyphrase_len_range: (usize, usize),
    /// Cosine between topic mixtures at or above which a pair is relevant.
    pub relevance_threshold: f64,
    /// Probability that an item draws a second topic.
    pub item_secondary_topic_prob: f64,
    /// Probability that a keyphrase draws a second topic.
    pub keyphrase_secondary_topic_prob: f64,
    /// Fraction of tokens drawn from a uniformly random topic.
    pub off_topic_rate: f64,
    /// Zipf exponent of word frequencies within a topic.
    pub word_zipf_exponent: f64,
    /// sr = logistic(sr_gain * (affinity - relevance_threshold) + N(0, sr_noise_sd²)).
    pub sr_gain: f64,
    pub sr_noise_sd: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 7,
            n_topics: 8,
            n_items: 200,
            n_keyphrases: 500,
            vocab_size: 160,
            title_len_range: (5, 10),
            keyphrase_len_range: (1, 3),
            relevance_threshold: 0.35,
            item_secondary_topic_prob: 0.4,
            keyphrase_secondary_topic_prob: 0.25,
            off_topic_rate: 0.1,
            word_zipf_exponent: 1.2,
            sr_gain: 8.0,
            sr_noise_sd: 1.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("n_topics", self.n_topics),
            ("n_items", self.n_items),
            ("n_keyphrases", self.n_keyphrases),
            ("vocab_size", self.vocab_size),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.vocab_size < self.n_topics {
            return Err(Error::config("vocab_size", "must be at least n_topics"));
        }
        for (field, (lo, hi)) in [
            ("title_len_range", self.title_len_range),
            ("keyphrase_len_range", self.keyphrase_len_range),
        ] {
            if lo == 0 || lo > hi {
                return Err(Error::config(field, "need 1 <= min <= max"));
            }
        }
        for (field, p) in [
            ("relevance_threshold", self.relevance_threshold),
            ("item_secondary_topic_prob", self.item_secondary_topic_prob),
            (
                "keyphrase_secondary_topic_prob",
                self.keyphrase_secondary_topic_prob,
            ),
            ("off_topic_rate", self.off_topic_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(field, "must lie in [0, 1]"));
            }
        }
        if !(self.word_zipf_exponent >= 0.0) {
            return Err(Error::config("word_zipf_exponent", "must be >= 0"));
        }
        if !(self.sr_gain > 0.0) {
            return Err(Error::config("sr_gain", "must be > 0"));
        }
        if !(self.sr_noise_sd >= 0.0) {
            return Err(Error::config("sr_noise_sd", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub seed: u64,
    pub config: WorldConfig,
    pub topics: Vec<usize>,
    pub items: Vec<ItemDoc>,
    pub keyphrases: Vec<Keyphrase>,
    /// Ground truth, items x keyphrases.
    pub relevance: Grid<bool>,
    /// Simulated search-relevance model output, items x keyphrases.
    pub sr_score: Grid<f64>,
}

impl SyntheticWorld {
    pub fn item(&self, id: usize) -> Result<&ItemDoc> {
        self.items.get(id).ok_or(Error::Lookup { kind: "item", id })
    }

    pub fn keyphrase(&self, id: usize) -> Result<&Keyphrase> {
        self.keyphrases.get(id).ok_or(Error::Lookup {
            kind: "keyphrase",
            id,
        })
    }

    pub fn is_relevant(&self, item: usize, kp: usize) -> Result<bool> {
        self.item(item)?;
        self.keyphrase(kp)?;
        Ok(self.relevance.get(item, kp))
    }

    pub fn n_pairs(&self) -> usize {
        self.items.len() * self.keyphrases.len()
    }

    pub fn relevance_density(&self) -> f64 {
        let pos = self.relevance.data.iter().filter(|&&r| r).count();
        pos as f64 / self.relevance.data.len().max(1) as f64
    }
}

/// Cosine between two sparse topic mixtures.
pub fn topic_cosine(a: &TopicWeights, b: &TopicWeights) -> f64 {
    let dot: f64 = a
        .iter()
        .filter_map(|(t, wa)| b.get(t).map(|wb| wa * wb))
        .sum();
    let na: f64 = a.values().map(|w| w * w).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|w| w * w).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn draw_topic_weights<R: Rng>(rng: &mut R, n_topics: usize, secondary_prob: f64) -> TopicWeights {
    let primary = rng.random_range(0..n_topics);
    let mut w = TopicWeights::new();
    if n_topics > 1 && rng.random::<f64>() < secondary_prob {
        let mut secondary = rng.random_range(0..n_topics - 1);
        if secondary >= primary {
            secondary += 1;
        }
        let share: f64 = rng.random_range(0.15..0.45);
        w.insert(primary, 1.0 - share);
        w.insert(secondary, share);
    } else {
        w.insert(primary, 1.0);
    }
    w
}

fn primary_topic(w: &TopicWeights) -> usize {
    // Ties cannot occur for generated mixtures (secondary share < 0.5).
    w.iter()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(t, _)| *t)
        .unwrap_or(0)
}

struct WordSampler {
    n_topics: usize,
    per_topic: Vec<WeightedIndex<f64>>,
}

impl WordSampler {
    fn new(cfg: &WorldConfig) -> Self {
        let per_topic = (0..cfg.n_topics)
            .map(|t| {
                let count = (cfg.vocab_size - t).div_ceil(cfg.n_topics);
                let weights: Vec<f64> = (0..count)
                    .map(|r| 1.0 / ((r + 1) as f64).powf(cfg.word_zipf_exponent))
                    .collect();
                WeightedIndex::new(weights).expect("non-empty positive weights")
            })
            .collect();
        WordSampler {
            n_topics: cfg.n_topics,
            per_topic,
        }
    }

    fn word_in_topic<R: Rng>(&self, rng: &mut R, topic: usize) -> String {
        let rank = self.per_topic[topic].sample(rng);
        format!("w{}", rank * self.n_topics + topic)
    }

    fn tokens<R: Rng>(
        &self,
        rng: &mut R,
        weights: &TopicWeights,
        len: usize,
        off_topic_rate: f64,
    ) -> Vec<String> {
        let topics: Vec<usize> = weights.keys().copied().collect();
        let dist = WeightedIndex::new(weights.values().copied()).expect("weights");
        (0..len)
            .map(|_| {
                let topic = if rng.random::<f64>() < off_topic_rate {
                    rng.random_range(0..self.n_topics)
                } else {
                    topics[dist.sample(rng)]
                };
                self.word_in_topic(rng, topic)
            })
            .collect()
    }
}

/// Builds a deterministic world from `config`.
pub fn generate_world(config: &WorldConfig) -> Result<SyntheticWorld> {
    config.validate()?;
    let seed = config.seed;
    let sampler = WordSampler::new(config);

    let mut rng_items = rng::stream(seed, "world/items", 0);
    let items: Vec<ItemDoc> = (0..config.n_items)
        .map(|id| {
            let topic_weights = draw_topic_weights(
                &mut rng_items,
                config.n_topics,
                config.item_secondary_topic_prob,
            );
            let (lo, hi) = config.title_len_range;
            let len = rng_items.random_range(lo..=hi);
            let title_tokens =
                sampler.tokens(&mut rng_items, &topic_weights, len, config.off_topic_rate);
            let primary = primary_topic(&topic_weights);
            let category_tokens = vec![format!("dept{}", primary / 2), format!("cat{primary}")];
            ItemDoc {
                id,
                title_tokens,
                category_tokens,
                topic_weights,
            }
        })
        .collect();

    let mut rng_kps = rng::stream(seed, "world/keyphrases", 0);
    let keyphrases: Vec<Keyphrase> = (0..config.n_keyphrases)
        .map(|id| {
            let topic_weights = draw_topic_weights(
                &mut rng_kps,
                config.n_topics,
                config.keyphrase_secondary_topic_prob,
            );
            let (lo, hi) = config.keyphrase_len_range;
            let len = rng_kps.random_range(lo..=hi);
            let tokens = sampler.tokens(&mut rng_kps, &topic_weights, len, config.off_topic_rate);
            Keyphrase {
                id,
                tokens,
                topic_weights,
            }
        })
        .collect();

    let (n_i, n_k) = (items.len(), keyphrases.len());
    let mut relevance = Grid::filled(n_i, n_k, false);
    let mut sr_score = Grid::filled(n_i, n_k, 0.0);
    let noise = Normal::new(0.0, config.sr_noise_sd)
        .map_err(|e| Error::config("sr_noise_sd", e.to_string()))?;
    let mut rng_sr = rng::stream(seed, "world/sr", 0);
    for (i, item) in items.iter().enumerate() {
        for (k, kp) in keyphrases.iter().enumerate() {
            let affinity = topic_cosine(&item.topic_weights, &kp.topic_weights);
            relevance.set(i, k, affinity >= config.relevance_threshold);
            let eps: f64 = noise.sample(&mut rng_sr);
            let sr = logistic(config.sr_gain * (affinity - config.relevance_threshold) + eps);
            sr_score.set(i, k, sr);
        }
    }

    Ok(SyntheticWorld {
        seed,
        config: config.clone(),
        topics: (0..config.n_topics).collect(),
        items,
        keyphrases,
        relevance,
        sr_score,
    })
}

// ---------------------------------------------------------------------------
// Labeled pairs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Source {
    #[serde(rename = "CTR")]
    Ctr,
    #[serde(rename = "SR")]
    Sr,
    #[serde(rename = "LLM")]
    Llm,
    #[serde(rename = "KD")]
    Kd,
}

impl Source {
    pub const ALL: [Source; 4] = [Source::Ctr, Source::Sr, Source::Llm, Source::Kd];

    pub fn as_str(self) -> &'static str {
        match self {
            Source::Ctr => "CTR",
            Source::Sr => "SR",
            Source::Llm => "LLM",
            Source::Kd => "KD",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CTR" => Ok(Source::Ctr),
            "SR" => Ok(Source::Sr),
            "LLM" => Ok(Source::Llm),
            "KD" => Ok(Source::Kd),
            _ => Err(Error::config(
                "source",
                format!("unknown label source {s:?}"),
            )),
        }
    }
}

/// One (item, keyphrase) example. Serializes as
/// `{"item":int,"kp":int,"src":"CTR|SR|LLM|KD","v":float}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub item: usize,
    pub kp: usize,
    #[serde(rename = "src")]
    pub source: Source,
    #[serde(rename = "v")]
    pub value: f64,
}

impl LabeledPair {
    pub fn pair(&self) -> (usize, usize) {
        (self.item, self.kp)
    }

    /// Checks the per-source value rules.
    pub fn validate(&self) -> Result<()> {
        let ok = match self.source {
            Source::Ctr => self.value == 1.0,
            Source::Sr | Source::Llm => self.value == 0.0 || self.value == 1.0,
            Source::Kd => (0.0..=1.0).contains(&self.value),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "{} pair ({}, {}) has invalid value {}",
                self.source, self.item, self.kp, self.value
            )))
        }
    }
}

// ---------------------------------------------------------------------------
// Search logs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchLogConfig {
    /// Item-level search impressions to distribute over items.
    pub n_impressions: usize,
    /// Zipf exponent of item popularity.
    pub popularity_exponent: f64,
    /// Click probability multiplier per rank step.
    pub position_decay: f64,
    /// Pairs below this search-relevance score are never shown.
    pub sr_filter_threshold: f64,
    /// Keyphrases shown per item impression.
    pub max_slots: usize,
    pub ctr_threshold: f64,
    pub min_impressions: u64,
    pub min_clicks: u64,
}

impl Default for SearchLogConfig {
    fn default() -> Self {
        SearchLogConfig {
            n_impressions: 20_000,
            popularity_exponent: 1.5,
            position_decay: 0.7,
            sr_filter_threshold: 0.5,
            max_slots: 10,
            ctr_threshold: 0.05,
            min_impressions: 20,
            min_clicks: 2,
        }
    }
}

impl SearchLogConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, p) in [
            ("sr_filter_threshold", self.sr_filter_threshold),
            ("ctr_threshold", self.ctr_threshold),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(field, "must lie in [0, 1]"));
            }
        }
        if !(self.position_decay > 0.0 && self.position_decay <= 1.0) {
            return Err(Error::config("position_decay", "must lie in (0, 1]"));
        }
        if self.max_slots == 0 {
            return Err(Error::config("max_slots", "must be at least 1"));
        }
        if !(self.popularity_exponent >= 0.0) {
            return Err(Error::config("popularity_exponent", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickLog {
    pub item_id: usize,
    pub keyphrase_id: usize,
    /// 0-based display position.
    pub rank: usize,
    pub impressions: u64,
    pub clicks: u64,
}

impl ClickLog {
    pub fn ctr(&self) -> f64 {
        if self.impressions == 0 {
            0.0
        } else {
            self.clicks as f64 / self.impressions as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchLogs {
    pub logs: Vec<ClickLog>,
    pub positives: Vec<LabeledPair>,
}

/// Keyphrases shown for `item`: those passing the filter, by descending
/// search-relevance score (ties by ascending id), capped at `max_slots`.
pub fn displayed_candidates(
    world: &SyntheticWorld,
    item: usize,
    cfg: &SearchLogConfig,
) -> Vec<usize> {
    let mut cands: Vec<usize> = (0..world.keyphrases.len())
        .filter(|&k| world.sr_score.get(item, k) >= cfg.sr_filter_threshold)
        .collect();
    cands.sort_by(|&a, &b| {
        world
            .sr_score
            .get(item, b)
            .total_cmp(&world.sr_score.get(item, a))
            .then(a.cmp(&b))
    });
    cands.truncate(cfg.max_slots);
    cands
}

/// Number of search impressions each item receives.
pub fn item_impressions(world: &SyntheticWorld, cfg: &SearchLogConfig) -> Vec<u64> {
    let n = world.items.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng_pop = rng::stream(world.seed, "logs/popularity", 0);
    order.shuffle(&mut rng_pop);
    let mut weight = vec![0.0; n];
    for (rank, &item) in order.iter().enumerate() {
        weight[item] = 1.0 / ((rank + 1) as f64).powf(cfg.popularity_exponent);
    }
    let dist = WeightedIndex::new(&weight).expect("positive weights");
    let mut counts = vec![0u64; n];
    let mut rng_imp = rng::stream(world.seed, "logs/impressions", 0);
    for _ in 0..cfg.n_impressions {
        counts[dist.sample(&mut rng_imp)] += 1;
    }
    counts
}

/// Simulates click logs and extracts CTR positives.
pub fn simulate_search_logs(world: &SyntheticWorld, cfg: &SearchLogConfig) -> Result<SearchLogs> {
    cfg.validate()?;
    let (ni, nk) = (world.items.len(), world.keyphrases.len());
    if world.sr_score.data.is_empty()
        || world.sr_score.rows != ni
        || world.sr_score.cols != nk
        || world.relevance.rows != ni
        || world.relevance.cols != nk
    {
        return Err(Error::InvalidWorld(
            "sr_score must be a non-empty items x keyphrases matrix".into(),
        ));
    }

    let impressions = item_impressions(world, cfg);
    let mut logs = Vec::new();
    let mut positives = Vec::new();
    for (item, &imp) in impressions.iter().enumerate() {
        if imp == 0 {
            continue;
        }
        let mut rng_clicks = rng::stream(world.seed, "logs/clicks", item as u64);
        for (rank, kp) in displayed_candidates(world, item, cfg)
            .into_iter()
            .enumerate()
        {
            let p = if world.relevance.get(item, kp) {
                cfg.position_decay.powi(rank as i32)
            } else {
                0.0
            };
            let clicks = Binomial::new(imp, p)
                .map_err(|e| Error::InvalidWorld(e.to_string()))?
                .sample(&mut rng_clicks);
            let log = ClickLog {
                item_id: item,
                keyphrase_id: kp,
                rank,
                impressions: imp,
                clicks,
            };
            if log.impressions >= cfg.min_impressions
                && log.clicks >= cfg.min_clicks
                && log.ctr() >= cfg.ctr_threshold
            {
                positives.push(LabeledPair {
                    item,
                    kp,
                    source: Source::Ctr,
                    value: 1.0,
                });
            }
            logs.push(log);
        }
    }
    Ok(SearchLogs { logs, positives })
}

// ---------------------------------------------------------------------------
// Search-relevance and judge labels
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrLabels {
    pub pairs: Vec<LabeledPair>,
    pub n_positive: usize,
    pub n_negative: usize,
}

/// Labels each pair positive iff `sr_score >= threshold` (inclusive, so a
/// threshold of 1.0 admits only scores equal to 1.0).
pub fn sr_labels(
    world: &SyntheticWorld,
    pairs: &[(usize, usize)],
    threshold: f64,
) -> Result<SrLabels> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::config("sr_threshold", "must lie in [0, 1]"));
    }
    let mut out = Vec::with_capacity(pairs.len());
    let (mut pos, mut neg) = (0, 0);
    for &(item, kp) in pairs {
        world.item(item)?;
        world.keyphrase(kp)?;
        let positive = world.sr_score.get(item, kp) >= threshold;
        if positive {
            pos += 1;
        } else {
            neg += 1;
        }
        out.push(LabeledPair {
            item,
            kp,
            source: Source::Sr,
            value: if positive { 1.0 } else { 0.0 },
        });
    }
    Ok(SrLabels {
        pairs: out,
        n_positive: pos,
        n_negative: neg,
    })
}

fn pair_hash(seed: u64, tag: u64, item: usize, kp: usize) -> u64 {
    rng::mix64(rng::mix64(rng::mix64(seed ^ tag) ^ item as u64) ^ ((kp as u64) << 1 | 1))
}

fn check_noise_rate(noise_rate: f64) -> Result<()> {
    if (0.0..0.5).contains(&noise_rate) {
        Ok(())
    } else {
        Err(Error::config("noise_rate", "must lie in [0, 0.5)"))
    }
}

/// Judge oracle: ground truth flipped with probability `noise_rate`, the
/// flip decided by a hash of `(world.seed, item, kp)`.
pub fn judge(world: &SyntheticWorld, item: usize, kp: usize, noise_rate: f64) -> Result<bool> {
    check_noise_rate(noise_rate)?;
    let truth = world.is_relevant(item, kp)?;
    let u = rng::unit_from_hash(pair_hash(world.seed, 0x4A55_4447, item, kp));
    Ok(truth ^ (u < noise_rate))
}

/// Judge labels for a list of pairs (source LLM).
pub fn judge_labels(
    world: &SyntheticWorld,
    pairs: &[(usize, usize)],
    noise_rate: f64,
) -> Result<Vec<LabeledPair>> {
    pairs
        .iter()
        .map(|&(item, kp)| {
            let yes = judge(world, item, kp, noise_rate)?;
            Ok(LabeledPair {
                item,
                kp,
                source: Source::Llm,
                value: if yes { 1.0 } else { 0.0 },
            })
        })
        .collect()
}

/// Soft "yes" probability of the judge, as a softmax over yes/no logits would
/// give it. Centred on the judge's hard answer with an over-confident spread;
/// only used for the score-distribution diagnostic.
pub fn judge_probability(
    world: &SyntheticWorld,
    item: usize,
    kp: usize,
    noise_rate: f64,
) -> Result<f64> {
    let yes = judge(world, item, kp, noise_rate)?;
    let z: f64 = rand_distr::StandardNormal.sample(&mut rng::stream(
        pair_hash(world.seed, 0x4C4F_4731, item, kp),
        "judge.logit",
        0,
    ));
    let logit = if yes { 5.0 } else { -5.0 } + 1.5 * z;
    Ok(logistic(logit))
}

/// Draws `n` distinct pairs uniformly at random, skipping any in `exclude`.
pub fn sample_pairs(
    world: &SyntheticWorld,
    n: usize,
    seed: u64,
    tag: &str,
    exclude: &std::collections::HashSet<(usize, usize)>,
) -> Result<Vec<(usize, usize)>> {
    let available = world.n_pairs().saturating_sub(exclude.len());
    if n > available {
        return Err(Error::config(
            "pair sample size",
            format!("requested {n} pairs, only {available} available"),
        ));
    }
    let mut rng = rng::stream(seed, tag, 0);
    let mut seen = exclude.clone();
    let mut out = Vec::with_capacity(n);
    let (ni, nk) = (world.items.len(), world.keyphrases.len());
    while out.len() < n {
        let p = (rng.random_range(0..ni), rng.random_range(0..nk));
        if seen.insert(p) {
            out.push(p);
        }
    }
    Ok(out)
}

/// How the recommender proposes pairs for SR and judge labeling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CandidateConfig {
    /// Fraction of pairs taken from the recommender's recall list; the rest
    /// are uniform.
    pub recall_share: f64,
    /// Length of the recall list per item.
    pub recall_depth: usize,
    /// Noise added to topic affinity when ranking the recall list.
    pub recall_noise_sd: f64,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        CandidateConfig {
            recall_share: 0.5,
            recall_depth: 40,
            recall_noise_sd: 0.2,
        }
    }
}

impl CandidateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.recall_share) {
            return Err(Error::config("recall_share", "must lie in [0, 1]"));
        }
        if self.recall_depth == 0 {
            return Err(Error::config("recall_depth", "must be >= 1"));
        }
        if !(self.recall_noise_sd >= 0.0) {
            return Err(Error::config("recall_noise_sd", "must be >= 0"));
        }
        Ok(())
    }
}

/// Per item, the `depth` keyphrases a noisy recommender ranks highest:
/// topic affinity plus Gaussian noise keyed by the pair, ties by id.
pub fn recall_lists(world: &SyntheticWorld, cfg: &CandidateConfig) -> Vec<Vec<usize>> {
    let depth = cfg.recall_depth.min(world.keyphrases.len());
    world
        .items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let mut rng = rng::stream(world.seed, "candidates.recall", i as u64);
            let noise = Normal::new(0.0, cfg.recall_noise_sd).expect("validated sd");
            let mut scored: Vec<(usize, f64)> = world
                .keyphrases
                .iter()
                .enumerate()
                .map(|(k, kp)| {
                    (
                        k,
                        topic_cosine(&item.topic_weights, &kp.topic_weights)
                            + noise.sample(&mut rng),
                    )
                })
                .collect();
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            scored.into_iter().take(depth).map(|(k, _)| k).collect()
        })
        .collect()
}

/// Draws `n` distinct recommender candidate pairs, skipping `exclude`:
/// each draw picks a uniform item, then with probability `recall_share` a
/// keyphrase from its recall list and otherwise a uniform keyphrase.
pub fn sample_candidate_pairs(
    world: &SyntheticWorld,
    n: usize,
    seed: u64,
    tag: &str,
    exclude: &std::collections::HashSet<(usize, usize)>,
    cfg: &CandidateConfig,
) -> Result<Vec<(usize, usize)>> {
    cfg.validate()?;
    let available = world.n_pairs().saturating_sub(exclude.len());
    if n > available / 2 {
        return Err(Error::config(
            "pair sample size",
            format!(
                "requested {n} pairs, at most half of the {available} available may be sampled"
            ),
        ));
    }
    let lists = recall_lists(world, cfg);
    let mut rng = rng::stream(seed, tag, 0);
    let mut seen = exclude.clone();
    let mut out = Vec::with_capacity(n);
    let (ni, nk) = (world.items.len(), world.keyphrases.len());
    let max_draws = 1000 * (n as u64 + 1);
    let mut draws = 0u64;
    while out.len() < n {
        draws += 1;
        if draws > max_draws {
            return Err(Error::config(
                "pair sample size",
                format!("recall lists exhausted after {} of {n} pairs", out.len()),
            ));
        }
        let item = rng.random_range(0..ni);
        let kp = if rng.random::<f64>() < cfg.recall_share {
            lists[item][rng.random_range(0..lists[item].len())]
        } else {
            rng.random_range(0..nk)
        };
        if seen.insert((item, kp)) {
            out.push((item, kp));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> WorldConfig {
        WorldConfig {
            seed,
            n_topics: 1,
            n_items: 2,
            n_keyphrases: 2,
            vocab_size: 10,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn single_topic_is_fully_relevant() {
        let w = generate_world(&tiny(7)).unwrap();
        assert!(w.relevance.data.iter().all(|&r| r));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = WorldConfig::default();
        assert_eq!(generate_world(&cfg).unwrap(), generate_world(&cfg).unwrap());
    }

    #[test]
    fn invalid_config_names_field() {
        let cfg = WorldConfig {
            vocab_size: 3,
            n_topics: 8,
            ..WorldConfig::default()
        };
        match generate_world(&cfg) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "vocab_size"),
            other => panic!("unexpected {other:?}"),
        }
        let cfg = WorldConfig {
            n_items: 0,
            ..WorldConfig::default()
        };
        assert!(
            matches!(generate_world(&cfg), Err(Error::Config { field, .. }) if field == "n_items")
        );
    }

    #[test]
    fn documents_are_well_formed() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        for item in &w.items {
            assert!(!item.title_tokens.is_empty());
            assert!(!item.topic_weights.is_empty());
            let s: f64 = item.topic_weights.values().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(item.topic_weights.values().all(|&v| v >= 0.0));
        }
        for kp in &w.keyphrases {
            assert!(!kp.tokens.is_empty());
            assert!(!kp.topic_weights.is_empty());
        }
        assert_eq!(w.relevance.data.len(), w.sr_score.data.len());
        assert!(w.sr_score.data.iter().all(|s| (0.0..=1.0).contains(s)));
    }

    #[test]
    fn judge_rejects_bad_inputs() {
        let w = generate_world(&tiny(1)).unwrap();
        assert!(matches!(
            judge(&w, 5, 0, 0.1),
            Err(Error::Lookup { kind: "item", .. })
        ));
        assert!(matches!(
            judge(&w, 0, 9, 0.1),
            Err(Error::Lookup {
                kind: "keyphrase",
                ..
            })
        ));
        assert!(matches!(judge(&w, 0, 0, 0.5), Err(Error::Config { .. })));
    }

    #[test]
    fn judge_noise_free_is_ground_truth() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        for i in 0..20 {
            for k in 0..50 {
                assert_eq!(judge(&w, i, k, 0.0).unwrap(), w.relevance.get(i, k));
            }
        }
    }

    #[test]
    fn filtered_pairs_never_logged() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        let cfg = SearchLogConfig::default();
        let logs = simulate_search_logs(&w, &cfg).unwrap();
        for l in &logs.logs {
            assert!(w.sr_score.get(l.item_id, l.keyphrase_id) >= cfg.sr_filter_threshold);
            assert!(l.clicks <= l.impressions);
        }
    }

    #[test]
    fn one_click_one_impression_is_noise() {
        let mut w = generate_world(&tiny(3)).unwrap();
        w.sr_score.data.iter_mut().for_each(|s| *s = 1.0);
        let cfg = SearchLogConfig {
            n_impressions: 1,
            position_decay: 1.0,
            min_impressions: 20,
            min_clicks: 1,
            ..SearchLogConfig::default()
        };
        let logs = simulate_search_logs(&w, &cfg).unwrap();
        assert!(logs
            .logs
            .iter()
            .any(|l| l.clicks == 1 && l.impressions == 1));
        assert!(logs.positives.is_empty());
    }

    #[test]
    fn empty_sr_matrix_is_invalid() {
        let mut w = generate_world(&tiny(3)).unwrap();
        w.sr_score = Grid {
            rows: 0,
            cols: 0,
            data: vec![],
        };
        assert!(matches!(
            simulate_search_logs(&w, &SearchLogConfig::default()),
            Err(Error::InvalidWorld(_))
        ));
    }

    #[test]
    fn sr_threshold_extremes() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        let pairs: Vec<_> = (0..10).flat_map(|i| (0..10).map(move |k| (i, k))).collect();
        let all = sr_labels(&w, &pairs, 0.0).unwrap();
        assert_eq!(all.n_positive, 100);
        let mut w1 = w.clone();
        w1.sr_score.set(0, 0, 1.0);
        let strict = sr_labels(&w1, &pairs, 1.0).unwrap();
        assert_eq!(strict.n_positive, 1);
        assert_eq!(strict.pairs[0].value, 1.0);
    }

    #[test]
    fn labeled_pair_wire_format() {
        let p = LabeledPair {
            item: 3,
            kp: 9,
            source: Source::Kd,
            value: 0.25,
        };
        assert_eq!(
            serde_json::to_string(&p).unwrap(),
            r#"{"item":3,"kp":9,"src":"KD","v":0.25}"#
        );
        let back: LabeledPair =
            serde_json::from_str(r#"{"item":1,"kp":2,"src":"CTR","v":1.0}"#).unwrap();
        assert_eq!(back.source, Source::Ctr);
        assert!(LabeledPair {
            value: 0.5,
            source: Source::Llm,
            ..p
        }
        .validate()
        .is_err());
    }
}
