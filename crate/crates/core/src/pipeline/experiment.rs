//! The pipeline held in memory: world and labels, assistant, distillation,
//! student and evaluation.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distillation::{kd_score, Assistant};
use crate::encoders::{
    cosine, encode_bi, forward_cross, BiEncoderParams, CrossEncoderParams, TokenizedWorld,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    ce_corr, classification_metrics, production_eval, select_threshold, EvalReport, OtherRecall,
};
use crate::retrieval::build_student_index;
use crate::rng::{derive_seed, stream};
use crate::synthworld::{
    generate_world, judge, judge_labels, sample_candidate_pairs, simulate_search_logs, sr_labels,
    ClickLog, LabeledPair, Source, SyntheticWorld,
};
use crate::trainer::{train_bi, train_cross, TrainConfig, TrainHistory};

use super::config::{label_set_name, PipelineConfig};

/// A held-out pair with its judge verdict and ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub item: usize,
    pub kp: usize,
    pub judge: bool,
    pub truth: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedData {
    pub world: SyntheticWorld,
    pub click_logs: Vec<ClickLog>,
    pub ctr: Vec<LabeledPair>,
    pub sr: Vec<LabeledPair>,
    pub llm: Vec<LabeledPair>,
    pub val: Vec<EvalPair>,
    pub test: Vec<EvalPair>,
    pub other_recall: OtherRecall,
}

/// Top `n` keyphrases per item by search-relevance score, ties by id.
pub fn simulated_other_recall(world: &SyntheticWorld, n: usize) -> OtherRecall {
    (0..world.items.len())
        .map(|item| {
            let mut kps: Vec<usize> = (0..world.keyphrases.len()).collect();
            kps.sort_by(|&a, &b| {
                world
                    .sr_score
                    .get(item, b)
                    .total_cmp(&world.sr_score.get(item, a))
                    .then(a.cmp(&b))
            });
            (item, kps.into_iter().take(n).collect::<BTreeSet<_>>())
        })
        .collect()
}

fn eval_pairs(
    world: &SyntheticWorld,
    pairs: &[(usize, usize)],
    noise: f64,
) -> Result<Vec<EvalPair>> {
    pairs
        .iter()
        .map(|&(item, kp)| {
            Ok(EvalPair {
                item,
                kp,
                judge: judge(world, item, kp, noise)?,
                truth: world.is_relevant(item, kp)?,
            })
        })
        .collect()
}

/// World, search logs and every label set. Validation and test pairs are
/// drawn first and kept out of all training sets.
pub fn generate(cfg: &PipelineConfig) -> Result<GeneratedData> {
    let world = generate_world(&cfg.world)?;
    let l = &cfg.labels;
    let seed = cfg.seed;
    let mut taken = HashSet::new();
    let c = &l.candidates;
    let val_pairs = sample_candidate_pairs(&world, l.n_val_pairs, seed, "pairs.val", &taken, c)?;
    taken.extend(val_pairs.iter().copied());
    let test_pairs = sample_candidate_pairs(&world, l.n_test_pairs, seed, "pairs.test", &taken, c)?;
    taken.extend(test_pairs.iter().copied());
    let train_pairs =
        sample_candidate_pairs(&world, l.n_train_pairs, seed, "pairs.train", &taken, c)?;

    let logs = simulate_search_logs(&world, &cfg.search_logs)?;
    let ctr = logs
        .positives
        .iter()
        .filter(|p| !taken.contains(&p.pair()))
        .copied()
        .collect();
    let other_recall = match &cfg.evaluation.other_recall_path {
        Some(path) => {
            let f = std::fs::File::open(path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingArtifact(path.clone()),
                _ => Error::Io(e),
            })?;
            crate::evaluation::read_other_recall(std::io::BufReader::new(f))?
        }
        None => simulated_other_recall(&world, cfg.evaluation.other_recall_per_item),
    };
    Ok(GeneratedData {
        ctr,
        sr: sr_labels(&world, &train_pairs, l.sr_threshold)?.pairs,
        llm: judge_labels(&world, &train_pairs, l.judge_noise)?,
        val: eval_pairs(&world, &val_pairs, l.judge_noise)?,
        test: eval_pairs(&world, &test_pairs, l.judge_noise)?,
        other_recall,
        click_logs: logs.logs,
        world,
    })
}

/// Generated data plus tokenized views for both encoders.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub cfg: PipelineConfig,
    pub data: GeneratedData,
    pub student_tokens: TokenizedWorld,
    pub assistant_tokens: TokenizedWorld,
}

impl Experiment {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let data = generate(&cfg)?;
        Self::from_data(cfg, data)
    }

    pub fn from_data(cfg: PipelineConfig, data: GeneratedData) -> Result<Self> {
        let student_tokens = TokenizedWorld::new(&data.world, cfg.bi_encoder.vocab_size)?;
        let assistant_tokens = TokenizedWorld::new(&data.world, cfg.cross_encoder.vocab_size)?;
        Ok(Experiment {
            cfg,
            data,
            student_tokens,
            assistant_tokens,
        })
    }

    pub fn train_assistant(&self) -> Result<Assistant> {
        let c = &self.cfg.cross_encoder;
        let init = CrossEncoderParams::new_random(
            c.vocab_size,
            c.hidden,
            derive_seed(self.cfg.seed, "assistant.init", 0),
        )?;
        let (params, history) = train_cross(
            init,
            &self.assistant_tokens,
            &self.data.llm,
            &self.cfg.cross_trainer,
        )?;
        Ok(Assistant { params, history })
    }

    /// Student training pairs of every source, CTR first; SR and LLM share
    /// their pairs.
    pub fn kd_pairs(&self) -> Vec<(usize, usize)> {
        self.data
            .ctr
            .iter()
            .chain(&self.data.llm)
            .map(LabeledPair::pair)
            .collect()
    }

    pub fn distill(&self, assistant: &Assistant) -> Result<Vec<LabeledPair>> {
        kd_score(assistant, &self.assistant_tokens, &self.kd_pairs(), false)
    }

    pub fn datasets(
        &self,
        kd: &[LabeledPair],
        sources: &[Source],
    ) -> BTreeMap<Source, Vec<LabeledPair>> {
        sources
            .iter()
            .map(|&s| {
                let pairs = match s {
                    Source::Ctr => self.data.ctr.clone(),
                    Source::Sr => self.data.sr.clone(),
                    Source::Llm => self.data.llm.clone(),
                    Source::Kd => kd.to_vec(),
                };
                (s, pairs)
            })
            .collect()
    }

    pub fn init_student(&self) -> Result<BiEncoderParams> {
        let b = &self.cfg.bi_encoder;
        BiEncoderParams::new_random(
            b.vocab_size,
            b.hidden,
            b.dim,
            derive_seed(self.cfg.seed, "student.init", 0),
        )
    }

    pub fn train_student(
        &self,
        kd: &[LabeledPair],
        sources: &[Source],
        trainer: &TrainConfig,
    ) -> Result<(BiEncoderParams, TrainHistory)> {
        train_bi(
            self.init_student()?,
            &self.student_tokens,
            &self.datasets(kd, sources),
            trainer,
        )
    }

    /// Full-dimension cosines between item and keyphrase embeddings.
    pub fn student_cosines(
        &self,
        student: &BiEncoderParams,
        pairs: &[EvalPair],
    ) -> Result<Vec<f64>> {
        let tw = &self.student_tokens;
        pairs
            .par_iter()
            .map(|p| {
                let u = encode_bi(student, &tw.item_text[p.item])?;
                let v = encode_bi(student, &tw.keyphrase[p.kp])?;
                cosine(u.as_slice(), v.as_slice())
            })
            .collect()
    }

    pub fn assistant_scores(
        &self,
        assistant: &CrossEncoderParams,
        pairs: &[EvalPair],
    ) -> Result<Vec<f64>> {
        pairs
            .par_iter()
            .map(|p| {
                Ok(
                    forward_cross(assistant, &self.assistant_tokens.cross_input(p.item, p.kp)?)?
                        .score,
                )
            })
            .collect()
    }

    /// Items evaluated in production mode, ascending.
    pub fn eval_items(&self) -> Vec<usize> {
        let n = self.data.world.items.len();
        let m = self.cfg.evaluation.item_sample_size.min(n);
        let mut rng = stream(self.cfg.seed, "eval.items", 0);
        let mut items = sample(&mut rng, n, m).into_vec();
        items.sort_unstable();
        items
    }

    /// Threshold picked on judge-labeled validation pairs, classification
    /// metrics on test pairs against ground truth, correlation with the
    /// assistant on test pairs, and the production-style evaluation.
    pub fn evaluate(
        &self,
        assistant: &CrossEncoderParams,
        student: &BiEncoderParams,
        label_set: &str,
    ) -> Result<EvalReport> {
        let val_cos = self.student_cosines(student, &self.data.val)?;
        let val_labels: Vec<bool> = self.data.val.iter().map(|p| p.judge).collect();
        let threshold = select_threshold(&val_cos, &val_labels, self.cfg.evaluation.grid_step)?;
        let test_cos = self.student_cosines(student, &self.data.test)?;
        let truth: Vec<bool> = self.data.test.iter().map(|p| p.truth).collect();
        let m = classification_metrics(&test_cos, &truth, threshold.value)?;
        let teacher = self.assistant_scores(assistant, &self.data.test)?;
        let corr = ce_corr(&test_cos, &teacher)?;
        let index =
            build_student_index(student, &self.student_tokens, self.cfg.retrieval.dim_prefix)?;
        let pe_cfg = self.cfg.production_eval_config();
        let prod = production_eval(
            &self.data.world,
            &self.student_tokens,
            student,
            &index,
            assistant,
            &self.eval_items(),
            &self.data.other_recall,
            &pe_cfg,
        )?;
        Ok(EvalReport {
            label_set: label_set.to_string(),
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            threshold: threshold.value,
            ce_corr: corr,
            median_kw_cnt: prod.median_kw_cnt,
            judge_pass_rate: prod.judge_pass_rate,
            k: pe_cfg.k,
            relevance_threshold: pe_cfg.relevance_threshold,
            seed: self.cfg.seed,
        })
    }

    /// Trains a student on `sources` and evaluates it.
    pub fn run_label_set(
        &self,
        assistant: &Assistant,
        kd: &[LabeledPair],
        sources: &[Source],
    ) -> Result<(EvalReport, BiEncoderParams)> {
        let (student, _) = self.train_student(kd, sources, &self.cfg.trainer)?;
        let report = self.evaluate(&assistant.params, &student, &label_set_name(sources))?;
        Ok((report, student))
    }
}
