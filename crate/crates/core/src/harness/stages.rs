use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{ForwardPassCounter, GuidanceConfig};
use crate::lm::{TabularLm, TokenId};
use crate::rng::derive_seed;
use crate::synth::{build_task, SynthTask, SynthTaskSpec};
use crate::training::{read_preferences, write_preferences, PreferenceExample, SeqRewardModel};
use crate::values::ExplicitValueFn;

use super::pipeline::{fit_dpo, fit_fudge, fit_reward, fit_sft};
use super::{generate, verify_complexity, EvalSet, MethodId, ModelSet, PipelineConfig};

/// A directory holding every artifact of one pipeline under fixed file names.
///
/// Each stage reads the files it depends on and writes exactly one artifact,
/// so stages can be rerun independently.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactDir {
    root: PathBuf,
}

impl ArtifactDir {
    pub const TASK: &'static str = "task.json";
    pub const BASE: &'static str = "base_lm.json";
    pub const PAIRS: &'static str = "train_pairs.jsonl";
    pub const EVAL: &'static str = "eval.json";
    pub const SFT: &'static str = "sft.json";
    pub const DPO: &'static str = "dpo.json";
    pub const REWARD: &'static str = "reward_model.json";
    pub const FUDGE: &'static str = "fudge.json";

    pub fn new(root: impl Into<PathBuf>) -> Self {
        ArtifactDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn require(&self, name: &str, what: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact(format!("{what} ({}); run the stage that produces it first", p.display())))
        }
    }

    /// Builds the task and writes its spec, base model, training pairs and
    /// evaluation set.
    pub fn make_task(&self, spec: &SynthTaskSpec) -> Result<SynthTask> {
        let task = build_task(spec)?;
        fs::create_dir_all(&self.root)?;
        task.spec.save(self.path(Self::TASK))?;
        task.base_lm.save(self.path(Self::BASE))?;
        write_preferences(self.path(Self::PAIRS), &task.train_pairs)?;
        write_json(&self.path(Self::EVAL), &EvalSet::from(&task))?;
        Ok(task)
    }

    pub fn base(&self) -> Result<TabularLm> {
        TabularLm::load(self.require(Self::BASE, "base model")?)
    }

    pub fn pairs(&self) -> Result<Vec<PreferenceExample>> {
        read_preferences(self.require(Self::PAIRS, "training pairs")?)
    }

    pub fn eval_set(&self) -> Result<EvalSet> {
        let p = self.require(Self::EVAL, "evaluation set")?;
        Ok(serde_json::from_str(&fs::read_to_string(p)?)?)
    }

    pub fn train_sft(&self, cfg: &PipelineConfig) -> Result<TabularLm> {
        let sft = fit_sft(self.base()?.vocab(), &self.pairs()?, cfg)?;
        sft.save(self.path(Self::SFT))?;
        Ok(sft)
    }

    pub fn train_dpo(&self, cfg: &PipelineConfig) -> Result<TabularLm> {
        let sft = TabularLm::load(self.require(Self::SFT, "SFT model")?)?;
        let dpo = fit_dpo(&sft, &self.pairs()?, cfg)?;
        dpo.save(self.path(Self::DPO))?;
        Ok(dpo)
    }

    pub fn train_reward(&self, cfg: &PipelineConfig) -> Result<SeqRewardModel> {
        let rm = fit_reward(self.base()?.vocab(), &self.pairs()?, cfg)?;
        rm.save(self.path(Self::REWARD))?;
        Ok(rm)
    }

    pub fn train_fudge(&self, cfg: &PipelineConfig) -> Result<ExplicitValueFn> {
        let rm = SeqRewardModel::load(self.require(Self::REWARD, "reward model")?)?;
        let fudge = fit_fudge(self.base()?.vocab(), &self.pairs()?, &rm, cfg)?;
        fudge.save(self.path(Self::FUDGE))?;
        Ok(fudge)
    }

    /// The base model plus whichever value-function artifacts exist. Methods
    /// that need an absent one fail when they run.
    pub fn models(&self) -> Result<ModelSet> {
        let base = self.base()?;
        let optional = |name: &str| {
            let p = self.path(name);
            p.is_file().then_some(p)
        };
        let tuned = optional(Self::DPO).map(TabularLm::load).transpose()?;
        let reference = optional(Self::SFT).map(TabularLm::load).transpose()?;
        let explicit = optional(Self::FUDGE).map(ExplicitValueFn::load).transpose()?;
        Ok(ModelSet { base, tuned, reference, explicit })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// One decoded response, as written by the `gen` stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub prompt_index: usize,
    pub seed: u64,
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
    pub gold_reward: f64,
    pub score: Option<f64>,
    pub fwd_counts: ForwardPassCounter,
}

pub fn write_generations(path: impl AsRef<Path>, records: &[GenerationRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// One response per prompt of `eval` under `seed`, decoded exactly as
/// [`run_method`](super::run_method) decodes them.
pub fn decode_eval(
    method: MethodId,
    eval: &EvalSet,
    models: &ModelSet,
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<Vec<GenerationRecord>> {
    let eos = models.base.vocab().eos();
    let v = models.base.vocab_size();
    eval.prompts
        .par_iter()
        .enumerate()
        .map(|(i, prompt)| {
            let r = generate(method, models, prompt, cfg, derive_seed(seed, &[i as u64]))?;
            verify_complexity(method, v, &r).into_result()?;
            Ok(GenerationRecord {
                prompt_index: i,
                seed,
                prompt: prompt.clone(),
                gold_reward: eval.gold.reward(&r.seq.response, eos),
                response: r.seq.response,
                score: r.score,
                fwd_counts: r.fwd_counts,
            })
        })
        .collect()
}
