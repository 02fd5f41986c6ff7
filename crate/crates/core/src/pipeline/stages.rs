//! On-disk stages. Each stage reads its inputs from the output directory,
//! writes its artifacts and a manifest recording the stage's config hash
//! and the SHA-256 of every input and output. A stage whose manifest still
//! matches is skipped.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distillation::{score_distribution_report, Assistant, DistributionReport};
use crate::encoders::{read_params, write_params, BiEncoderParams, CrossEncoderParams};
use crate::error::{Error, Result};
use crate::evaluation::{
    markdown_table, rank_reports, read_other_recall, write_other_recall, EvalReport,
};
use crate::retrieval::{build_student_index, read_index, retrieve_for_items, write_index};
use crate::synthworld::{judge_probability, ClickLog, LabeledPair, Source, SyntheticWorld};
use crate::trainer::{train_bi_with, TrainHistory};

use super::config::{hash_json, label_set_name, PipelineConfig};
use super::experiment::{EvalPair, Experiment, GeneratedData};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Gen,
    TrainCross,
    KdScore,
    TrainBi,
    Index,
    Eval,
    Ablate,
    Report,
}

impl Command {
    pub const ALL: [Command; 8] = [
        Command::Gen,
        Command::TrainCross,
        Command::KdScore,
        Command::TrainBi,
        Command::Index,
        Command::Eval,
        Command::Ablate,
        Command::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::TrainCross => "train-cross",
            Command::KdScore => "kd-score",
            Command::TrainBi => "train-bi",
            Command::Index => "index",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::Report => "report",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::config("command", format!("unknown command {s:?}")))
    }
}

/// Artifact paths relative to the output directory.
pub mod paths {
    pub const WORLD: &str = "world.json";
    pub const CLICK_LOGS: &str = "click_logs.jsonl";
    pub const CTR: &str = "labels/ctr.jsonl";
    pub const SR: &str = "labels/sr.jsonl";
    pub const LLM: &str = "labels/llm.jsonl";
    pub const KD: &str = "labels/kd.jsonl";
    pub const VAL: &str = "eval_pairs/val.jsonl";
    pub const TEST: &str = "eval_pairs/test.jsonl";
    pub const OTHER_RECALL: &str = "other_recall.jsonl";
    pub const ASSISTANT: &str = "assistant/params.kpdp";
    pub const ASSISTANT_HISTORY: &str = "assistant/history.jsonl";
    pub const KD_DISTRIBUTION: &str = "assistant/kd_distribution.json";
    pub const STUDENT: &str = "student/params.kpdp";
    pub const STUDENT_HISTORY: &str = "student/history.jsonl";
    pub const INDEX: &str = "student/index.kpdi";
    pub const EVAL_JSON: &str = "reports/eval.json";
    pub const EVAL_MD: &str = "reports/eval.md";
    pub const RETRIEVALS: &str = "reports/retrievals.jsonl";
    pub const ABLATION_JSON: &str = "reports/ablation.json";
    pub const ABLATION_MD: &str = "reports/ablation.md";
    pub const REPORT_MD: &str = "reports/report.md";

    pub fn student_epoch(epoch: usize) -> String {
        format!("student/epoch_{epoch:03}.kpdp")
    }

    pub fn manifest(stage: &str) -> String {
        format!("manifests/{stage}.json")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageOutcome {
    pub stage: String,
    /// `ran` or `up-to-date`.
    pub status: &'static str,
    pub outputs: Vec<String>,
}

// ---------------------------------------------------------------------------
// File helpers
// ---------------------------------------------------------------------------

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    match fs::File::open(path) {
        Ok(f) => Ok(BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(Error::MissingArtifact(path.to_path_buf()))
        }
        Err(e) => Err(e.into()),
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for line in open(path)?.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(open(path)?)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn save_params<P: crate::encoders::ParamSet>(path: &Path, params: &P) -> Result<()> {
    let mut w = create(path)?;
    write_params(params, &mut w)?;
    w.flush()?;
    Ok(())
}

fn load_params<P: crate::encoders::ParamSet>(path: &Path) -> Result<P> {
    read_params(open(path)?)
}

// ---------------------------------------------------------------------------
// Stage bookkeeping
// ---------------------------------------------------------------------------

struct Stage<'a> {
    cfg: &'a PipelineConfig,
    command: Command,
    config_hash: String,
    inputs: Vec<String>,
}

impl Stage<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.cfg.out_dir.join(rel)
    }

    /// Hashes every input, failing on the first missing one.
    fn input_hashes(&self) -> Result<BTreeMap<String, String>> {
        self.inputs
            .iter()
            .map(|rel| {
                let p = self.path(rel);
                if !p.is_file() {
                    return Err(Error::MissingArtifact(p));
                }
                Ok((rel.clone(), sha256_file(&p)?))
            })
            .collect()
    }

    fn up_to_date(&self, inputs: &BTreeMap<String, String>) -> bool {
        let Ok(m) = read_json::<Manifest>(&self.path(&paths::manifest(self.command.name()))) else {
            return false;
        };
        m.config_hash == self.config_hash
            && &m.inputs == inputs
            && m.outputs
                .iter()
                .all(|(rel, h)| sha256_file(&self.path(rel)).is_ok_and(|got| &got == h))
    }

    fn finish(
        &self,
        inputs: BTreeMap<String, String>,
        outputs: Vec<String>,
    ) -> Result<StageOutcome> {
        let outputs_hashed = outputs
            .iter()
            .map(|rel| Ok((rel.clone(), sha256_file(&self.path(rel))?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        write_json(
            &self.path(&paths::manifest(self.command.name())),
            &Manifest {
                stage: self.command.name().to_string(),
                config_hash: self.config_hash.clone(),
                seed: self.cfg.seed,
                inputs,
                outputs: outputs_hashed,
            },
        )?;
        Ok(StageOutcome {
            stage: self.command.name().to_string(),
            status: "ran",
            outputs,
        })
    }
}

fn stage_config_hash(cfg: &PipelineConfig, command: Command) -> String {
    let c = cfg;
    match command {
        Command::Gen => hash_json(&(
            "gen",
            c.seed,
            &c.world,
            &c.search_logs,
            &c.labels,
            c.evaluation.other_recall_per_item,
            &c.evaluation.other_recall_path,
        )),
        Command::TrainCross => {
            hash_json(&("train-cross", c.seed, &c.cross_encoder, &c.cross_trainer))
        }
        Command::KdScore => {
            hash_json(&("kd-score", c.seed, &c.cross_encoder, c.labels.judge_noise))
        }
        Command::TrainBi => hash_json(&("train-bi", c.seed, &c.bi_encoder, &c.trainer)),
        Command::Index => hash_json(&("index", c.bi_encoder.vocab_size, c.retrieval.dim_prefix)),
        Command::Eval => hash_json(&(
            "eval",
            c.seed,
            &c.bi_encoder,
            c.cross_encoder.vocab_size,
            &c.retrieval,
            &c.evaluation,
            c.labels.judge_noise,
        )),
        Command::Ablate => hash_json(&(
            "ablate",
            c.seed,
            c.cross_encoder.vocab_size,
            c.bi_encoder.vocab_size,
            c.bi_encoder.hidden,
            c.bi_encoder.dim,
            &c.trainer,
            &c.retrieval,
            &c.evaluation,
            &c.ablation,
        )),
        Command::Report => hash_json(&"report"),
    }
}

fn stage_inputs(cfg: &PipelineConfig, command: Command) -> Vec<String> {
    use paths::*;
    let data = [WORLD, CLICK_LOGS, CTR, SR, LLM, VAL, TEST, OTHER_RECALL];
    let v: Vec<&str> = match command {
        Command::Gen => vec![],
        Command::TrainCross => vec![WORLD, LLM],
        Command::KdScore => vec![WORLD, CTR, LLM, ASSISTANT, ASSISTANT_HISTORY],
        Command::TrainBi => {
            let mut v = vec![WORLD];
            for s in &cfg.bi_encoder.sources {
                v.push(match s {
                    Source::Ctr => CTR,
                    Source::Sr => SR,
                    Source::Llm => LLM,
                    Source::Kd => KD,
                });
            }
            v
        }
        Command::Index => vec![WORLD, STUDENT],
        Command::Eval => [&data[..], &[ASSISTANT, STUDENT, INDEX]].concat(),
        Command::Ablate => [&data[..], &[ASSISTANT, ASSISTANT_HISTORY, KD]].concat(),
        Command::Report => {
            // Optional sections are inputs only when present.
            let mut v = vec![EVAL_JSON];
            v.extend(
                [ABLATION_JSON, KD_DISTRIBUTION]
                    .into_iter()
                    .filter(|rel| cfg.out_dir.join(rel).is_file()),
            );
            v
        }
    };
    v.into_iter().map(str::to_string).collect()
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

/// Runs one stage, or reports it up to date.
pub fn run(command: Command, cfg: &PipelineConfig) -> Result<StageOutcome> {
    cfg.validate()?;
    let stage = Stage {
        cfg,
        command,
        config_hash: stage_config_hash(cfg, command),
        inputs: stage_inputs(cfg, command),
    };
    let inputs = stage.input_hashes()?;
    if stage.up_to_date(&inputs) {
        let m: Manifest = read_json(&stage.path(&paths::manifest(command.name())))?;
        return Ok(StageOutcome {
            stage: command.name().to_string(),
            status: "up-to-date",
            outputs: m.outputs.into_keys().collect(),
        });
    }
    let outputs = match command {
        Command::Gen => gen(&stage)?,
        Command::TrainCross => train_cross_stage(&stage)?,
        Command::KdScore => kd_score_stage(&stage)?,
        Command::TrainBi => train_bi_stage(&stage)?,
        Command::Index => index_stage(&stage)?,
        Command::Eval => eval_stage(&stage)?,
        Command::Ablate => ablate_stage(&stage)?,
        Command::Report => report_stage(&stage)?,
    };
    stage.finish(inputs, outputs)
}

fn gen(stage: &Stage) -> Result<Vec<String>> {
    use paths::*;
    let data = super::experiment::generate(stage.cfg)?;
    write_json(&stage.path(WORLD), &data.world)?;
    write_jsonl(&stage.path(CLICK_LOGS), &data.click_logs)?;
    write_jsonl(&stage.path(CTR), &data.ctr)?;
    write_jsonl(&stage.path(SR), &data.sr)?;
    write_jsonl(&stage.path(LLM), &data.llm)?;
    write_jsonl(&stage.path(VAL), &data.val)?;
    write_jsonl(&stage.path(TEST), &data.test)?;
    let mut w = create(&stage.path(OTHER_RECALL))?;
    write_other_recall(&data.other_recall, &mut w)?;
    w.flush()?;
    Ok([WORLD, CLICK_LOGS, CTR, SR, LLM, VAL, TEST, OTHER_RECALL]
        .map(str::to_string)
        .to_vec())
}

fn load_data(stage: &Stage) -> Result<GeneratedData> {
    use paths::*;
    let world: SyntheticWorld = read_json(&stage.path(WORLD))?;
    Ok(GeneratedData {
        click_logs: read_jsonl::<ClickLog>(&stage.path(CLICK_LOGS))?,
        ctr: read_jsonl(&stage.path(CTR))?,
        sr: read_jsonl(&stage.path(SR))?,
        llm: read_jsonl(&stage.path(LLM))?,
        val: read_jsonl::<EvalPair>(&stage.path(VAL))?,
        test: read_jsonl::<EvalPair>(&stage.path(TEST))?,
        other_recall: read_other_recall(open(&stage.path(OTHER_RECALL))?)?,
        world,
    })
}

/// Experiment over the generated data on disk. Stages that need only some
/// of the data still load all of it; the files are small.
fn load_experiment(stage: &Stage) -> Result<Experiment> {
    Experiment::from_data(stage.cfg.clone(), load_data(stage)?)
}

fn load_assistant(stage: &Stage) -> Result<Assistant> {
    let params = load_params::<CrossEncoderParams>(&stage.path(paths::ASSISTANT))?;
    let history =
        TrainHistory::read_jsonl(&fs::read_to_string(stage.path(paths::ASSISTANT_HISTORY))?)?;
    Ok(Assistant { params, history })
}

fn train_cross_stage(stage: &Stage) -> Result<Vec<String>> {
    use paths::*;
    let world: SyntheticWorld = read_json(&stage.path(WORLD))?;
    let llm: Vec<LabeledPair> = read_jsonl(&stage.path(LLM))?;
    let data = GeneratedData {
        world,
        click_logs: Vec::new(),
        ctr: Vec::new(),
        sr: Vec::new(),
        llm,
        val: Vec::new(),
        test: Vec::new(),
        other_recall: Default::default(),
    };
    let ex = Experiment::from_data(stage.cfg.clone(), data)?;
    let a = ex.train_assistant()?;
    save_params(&stage.path(ASSISTANT), &a.params)?;
    let mut w = create(&stage.path(ASSISTANT_HISTORY))?;
    a.history.write_jsonl(&mut w)?;
    w.flush()?;
    Ok(vec![ASSISTANT.into(), ASSISTANT_HISTORY.into()])
}

fn kd_score_stage(stage: &Stage) -> Result<Vec<String>> {
    use paths::*;
    let world: SyntheticWorld = read_json(&stage.path(WORLD))?;
    let data = GeneratedData {
        world,
        click_logs: Vec::new(),
        ctr: read_jsonl(&stage.path(CTR))?,
        sr: Vec::new(),
        llm: read_jsonl(&stage.path(LLM))?,
        val: Vec::new(),
        test: Vec::new(),
        other_recall: Default::default(),
    };
    let ex = Experiment::from_data(stage.cfg.clone(), data)?;
    let assistant = load_assistant(stage)?;
    let kd = ex.distill(&assistant)?;
    write_jsonl(&stage.path(KD), &kd)?;
    let teacher = kd
        .iter()
        .map(|p| judge_probability(&ex.data.world, p.item, p.kp, stage.cfg.labels.judge_noise))
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = kd.iter().map(|p| p.value).collect();
    let report: DistributionReport = score_distribution_report(&teacher, &scores, 20)?;
    write_json(&stage.path(KD_DISTRIBUTION), &report)?;
    Ok(vec![KD.into(), KD_DISTRIBUTION.into()])
}

fn kd_dataset(stage: &Stage, sources: &[Source]) -> Result<Vec<LabeledPair>> {
    if sources.contains(&Source::Kd) {
        read_jsonl(&stage.path(paths::KD))
    } else {
        Ok(Vec::new())
    }
}

fn train_bi_stage(stage: &Stage) -> Result<Vec<String>> {
    use paths::*;
    let ex = load_experiment_for_training(stage)?;
    let sources = &stage.cfg.bi_encoder.sources;
    let kd = kd_dataset(stage, sources)?;
    let mut outputs = Vec::new();
    let (student, history) = train_bi_with(
        ex.init_student()?,
        &ex.student_tokens,
        &ex.datasets(&kd, sources),
        &stage.cfg.trainer,
        |epoch, params| {
            let rel = student_epoch(epoch);
            save_params(&stage.path(&rel), params)?;
            outputs.push(rel);
            Ok(None)
        },
    )?;
    save_params(&stage.path(STUDENT), &student)?;
    let mut w = create(&stage.path(STUDENT_HISTORY))?;
    history.write_jsonl(&mut w)?;
    w.flush()?;
    outputs.push(STUDENT.into());
    outputs.push(STUDENT_HISTORY.into());
    Ok(outputs)
}

/// World plus the label files the configured sources need.
fn load_experiment_for_training(stage: &Stage) -> Result<Experiment> {
    use paths::*;
    let sources = &stage.cfg.bi_encoder.sources;
    let load = |s: Source, rel: &str| -> Result<Vec<LabeledPair>> {
        if sources.contains(&s) {
            read_jsonl(&stage.path(rel))
        } else {
            Ok(Vec::new())
        }
    };
    let data = GeneratedData {
        world: read_json(&stage.path(WORLD))?,
        click_logs: Vec::new(),
        ctr: load(Source::Ctr, CTR)?,
        sr: load(Source::Sr, SR)?,
        llm: load(Source::Llm, LLM)?,
        val: Vec::new(),
        test: Vec::new(),
        other_recall: Default::default(),
    };
    Experiment::from_data(stage.cfg.clone(), data)
}

fn index_stage(stage: &Stage) -> Result<Vec<String>> {
    use paths::*;
    let world: SyntheticWorld = read_json(&stage.path(WORLD))?;
    let tw = crate::encoders::TokenizedWorld::new(&world, stage.cfg.bi_encoder.vocab_size)?;
    let student: BiEncoderParams = load_params(&stage.path(STUDENT))?;
    let index = build_student_index(&student, &tw, stage.cfg.retrieval.dim_prefix)?;
    let mut w = create(&stage.path(INDEX))?;
    write_index(&index, &mut w)?;
    w.flush()?;
    Ok(vec![INDEX.into()])
}

fn eval_stage(stage: &Stage) -> Result<Vec<String>> {
    use paths::*;
    let ex = load_experiment(stage)?;
    let assistant: CrossEncoderParams = load_params(&stage.path(ASSISTANT))?;
    let student: BiEncoderParams = load_params(&stage.path(STUDENT))?;
    let index = read_index(open(&stage.path(INDEX))?)?;
    let results = retrieve_for_items(
        &student,
        &ex.student_tokens,
        &ex.eval_items(),
        &index,
        stage.cfg.retrieval.k,
    )?;
    write_jsonl(&stage.path(RETRIEVALS), &results)?;
    let report = ex.evaluate(
        &assistant,
        &student,
        &label_set_name(&stage.cfg.bi_encoder.sources),
    )?;
    write_json(&stage.path(EVAL_JSON), &report)?;
    write_text(
        &stage.path(EVAL_MD),
        &markdown_table(std::slice::from_ref(&report)),
    )?;
    Ok(vec![RETRIEVALS.into(), EVAL_JSON.into(), EVAL_MD.into()])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// Rows ordered by median_kw_cnt, then judge pass rate, descending.
    pub rows: Vec<EvalReport>,
}

/// Trains and evaluates one student per configured label set.
pub fn run_ablation(
    ex: &Experiment,
    assistant: &Assistant,
    kd: &[LabeledPair],
) -> Result<AblationReport> {
    let mut seen = BTreeSet::new();
    let mut rows = Vec::new();
    for set in &ex.cfg.ablation.label_sets {
        if !seen.insert(set.clone()) {
            continue;
        }
        rows.push(ex.run_label_set(assistant, kd, set)?.0);
    }
    rank_reports(&mut rows);
    Ok(AblationReport { rows })
}

fn ablate_stage(stage: &Stage) -> Result<Vec<String>> {
    use paths::*;
    let ex = load_experiment(stage)?;
    let assistant = load_assistant(stage)?;
    let kd: Vec<LabeledPair> = read_jsonl(&stage.path(KD))?;
    let report = run_ablation(&ex, &assistant, &kd)?;
    write_json(&stage.path(ABLATION_JSON), &report)?;
    write_text(&stage.path(ABLATION_MD), &markdown_table(&report.rows))?;
    Ok(vec![ABLATION_JSON.into(), ABLATION_MD.into()])
}

fn report_stage(stage: &Stage) -> Result<Vec<String>> {
    use paths::*;
    let eval: EvalReport = read_json(&stage.path(EVAL_JSON))?;
    let mut md = String::from("# Pipeline report\n\n## Student\n\n");
    md += &markdown_table(&[eval]);
    let ablation = stage.path(ABLATION_JSON);
    if ablation.is_file() {
        let a: AblationReport = read_json(&ablation)?;
        md += "\n## Label ablation\n\n";
        md += &markdown_table(&a.rows);
    }
    let dist = stage.path(KD_DISTRIBUTION);
    if dist.is_file() {
        let d: DistributionReport = read_json(&dist)?;
        md += &format!(
            "\n## Score distributions\n\nMass in the two extreme bins: judge {:.3} ({:?}), assistant {:.3} ({:?}).\n",
            d.extreme_ratio_a, d.spread_a, d.extreme_ratio_b, d.spread_b
        );
    }
    write_text(&stage.path(REPORT_MD), &md)?;
    Ok(vec![REPORT_MD.into()])
}
