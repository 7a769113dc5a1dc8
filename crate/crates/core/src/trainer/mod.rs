//! Staged training under freeze policies.

mod data;
mod optim;
mod plan;
mod runlog;
mod state;

use std::path::Path;

use rayon::prelude::*;

pub use data::{Corpora, SampleStream};
pub use optim::{default_warmup, lr_at, AdamW, AdamWConfig};
pub use plan::{
    corpus_names, DataSpec, FreezePolicy, Preset, PresetBudget, SourceSpec, StageKind, StagePlan, StageSpec,
};
pub use runlog::{compare_loss_curves, LossComparison, RunLog, StepRecord, RUNLOG_HEADER};
pub use state::{STATE_MAGIC, STATE_VERSION};

use crate::error::{Error, Result};
use crate::images::ImageSource;
use crate::model::{Gradients, Model};
use crate::packing::PackedSample;
use crate::rng::SeedStream;

/// Token-weighted mean loss and gradients over a batch. Per-sample work runs
/// in parallel; the reduction is sequential in batch order so results do not
/// depend on thread scheduling.
pub fn batch_loss_and_grads(
    model: &Model,
    batch: &[PackedSample],
    images: &dyn ImageSource,
) -> Result<(f64, Gradients, usize)> {
    let per: Vec<_> = batch
        .par_iter()
        .map(|s| model.sample_loss_and_grads(s, images))
        .collect::<Result<_>>()?;
    let total: usize = per.iter().map(|r| r.targets_used).sum();
    let mut grads = Gradients::zeros_like(model.params());
    if total == 0 {
        return Ok((0.0, grads, 0));
    }
    let mut loss = 0.0;
    for r in &per {
        let w = r.targets_used as f64 / total as f64;
        loss += w * r.loss;
        grads.add_scaled(&r.grads, w);
    }
    Ok((loss, grads, total))
}

/// Runs a [`StagePlan`] step by step. All randomness flows from one seed, so
/// two trainers with the same plan, corpora and seed produce bit-identical
/// parameters and logs.
pub struct Trainer {
    plan: StagePlan,
    seed: u64,
    model: Model,
    optimizer: AdamW,
    stage: usize,
    step_in_stage: usize,
    global_step: usize,
    tokens: u64,
    images: u64,
    log: RunLog,
    stream: Option<SampleStream>,
}

impl Trainer {
    /// A fresh model initialized from `seed`.
    pub fn new(plan: StagePlan, seed: u64) -> Result<Self> {
        let model = Model::new(plan.model.clone().with_seed(seed))?;
        Self::with_model(plan, model, seed)
    }

    /// Continue from existing weights (for example a loaded checkpoint).
    pub fn with_model(plan: StagePlan, model: Model, seed: u64) -> Result<Self> {
        plan.validate()?;
        let mut expect = plan.model.clone();
        expect.seed = model.config().seed;
        if &expect != model.config() {
            return Err(Error::Incompatible("model config does not match plan".into()));
        }
        for s in &plan.stages {
            s.policy.validate(model.params())?;
        }
        let optimizer = AdamW::new(AdamWConfig::default(), model.params());
        Ok(Self {
            plan,
            seed,
            model,
            optimizer,
            stage: 0,
            step_in_stage: 0,
            global_step: 0,
            tokens: 0,
            images: 0,
            log: RunLog::default(),
            stream: None,
        })
    }

    pub fn plan(&self) -> &StagePlan {
        &self.plan
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn global_step(&self) -> usize {
        self.global_step
    }

    pub fn finished(&self) -> bool {
        self.stage >= self.plan.stages.len()
    }

    fn skip_empty_stages(&mut self) {
        while !self.finished() && self.step_in_stage >= self.plan.stages[self.stage].steps {
            self.stage += 1;
            self.step_in_stage = 0;
            self.stream = None;
            self.optimizer = AdamW::new(self.optimizer.config, self.model.params());
        }
    }

    fn stage_seed(&self) -> SeedStream {
        let spec = &self.plan.stages[self.stage];
        SeedStream::new(self.seed).derive(&format!("stage{}:{}", self.stage, spec.name.as_str()))
    }

    /// Builds the stage's sample stream, fast-forwarding past batches that
    /// were already consumed (after a resume).
    fn stream(&mut self, corpora: &Corpora) -> Result<&mut SampleStream> {
        if self.stream.is_none() {
            let spec = &self.plan.stages[self.stage];
            let mut s = SampleStream::new(
                &spec.data,
                corpora,
                self.plan.model.geometry(),
                self.plan.max_len(),
                self.stage_seed(),
            )?;
            for _ in 0..self.step_in_stage * spec.batch_size {
                s.next_sample()?;
            }
            self.stream = Some(s);
        }
        Ok(self.stream.as_mut().expect("stream was just built"))
    }

    /// One optimizer step. Returns `None` once every stage is done.
    pub fn step(&mut self, corpora: &Corpora, images: &dyn ImageSource) -> Result<Option<StepRecord>> {
        self.skip_empty_stages();
        if self.finished() {
            return Ok(None);
        }
        let spec = self.plan.stages[self.stage].clone();
        let batch = self.stream(corpora)?.next_batch(spec.batch_size)?;
        let (loss, grads, _) = batch_loss_and_grads(&self.model, &batch, images)?;
        let grads_finite = grads.data.iter().flatten().all(|g| g.is_finite());
        if !loss.is_finite() || !grads_finite {
            return Err(Error::NonFinite {
                step: self.global_step + 1,
                batch: self.step_in_stage,
            });
        }
        let warmup = spec.warmup.unwrap_or_else(|| default_warmup(spec.steps));
        let lr = lr_at(self.step_in_stage, spec.steps, warmup, spec.lr);
        self.optimizer
            .step(self.model.params_mut(), &grads, &spec.policy.trainable, lr);
        self.global_step += 1;
        self.step_in_stage += 1;
        self.tokens += batch.iter().map(|s| s.len() as u64).sum::<u64>();
        self.images += batch.iter().map(|s| s.image_slots.len() as u64).sum::<u64>();
        let record = StepRecord {
            step: self.global_step,
            stage: spec.name.as_str().to_string(),
            loss,
            lr,
            tokens: self.tokens,
            images: self.images,
        };
        self.log.push(record.clone());
        self.skip_empty_stages();
        Ok(Some(record))
    }

    /// Run until done, or until `max_steps` further steps have been taken.
    pub fn run(&mut self, corpora: &Corpora, images: &dyn ImageSource, max_steps: Option<usize>) -> Result<()> {
        let mut taken = 0;
        while max_steps.is_none_or(|m| taken < m) {
            if self.step(corpora, images)?.is_none() {
                break;
            }
            taken += 1;
        }
        Ok(())
    }

    /// Save full-precision weights, optimizer moments and progress.
    pub fn save_state(&self, path: &Path) -> Result<()> {
        state::save(self, path)
    }

    /// Resume a run saved with [`Trainer::save_state`]. The plan and seed
    /// must match the ones the state was written with.
    pub fn load_state(plan: StagePlan, seed: u64, path: &Path) -> Result<Self> {
        state::load(plan, seed, path)
    }
}

/// Train a plan from scratch.
pub fn train(plan: StagePlan, corpora: &Corpora, images: &dyn ImageSource, seed: u64) -> Result<(Model, RunLog)> {
    let mut t = Trainer::new(plan, seed)?;
    t.run(corpora, images, None)?;
    let log = t.log.clone();
    Ok((t.into_model(), log))
}
