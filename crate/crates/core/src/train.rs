//! Pretraining and fine-tuning loops.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{step_dir, Checkpoint, Phase};
use crate::data::{CaptionData, VqaData};
use crate::decoder::AnswerSequence;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image::Visual;
use crate::model::{ModelConfig, Parts, VqaModel};
use crate::nn::Ctx;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamSet;
use crate::pretrain::{pretrain_forward, LossBreakdown, PretrainPlan, DEFAULT_MASK_PROB, DEFAULT_NEG_FRACTION};
use crate::text::{TokenSequence, Vocabulary, WordEmbeddingTable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub batch_size: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub encoder_bypass: bool,
    pub dropout: f64,
    pub mask_prob: f64,
    pub neg_fraction: f64,
    /// Linear warmup length in steps; 0 keeps the rate constant.
    pub warmup_steps: u64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub log_every: u64,
    /// Periodic checkpoint interval; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub save_optimizer: bool,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            phase: Phase::Pretrain,
            batch_size: 32,
            steps: 100_000,
            learning_rate: 1e-4,
            weight_decay: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            encoder_bypass: false,
            dropout: 0.1,
            mask_prob: DEFAULT_MASK_PROB,
            neg_fraction: DEFAULT_NEG_FRACTION,
            warmup_steps: 0,
            grad_clip: None,
            log_every: 100,
            checkpoint_every: 0,
            save_optimizer: false,
        }
    }

    pub fn finetune() -> Self {
        Self { phase: Phase::Finetune, steps: 30_000, learning_rate: 3e-4, ..Self::pretrain() }
    }

    pub fn for_phase(phase: Phase) -> Self {
        match phase {
            Phase::Pretrain => Self::pretrain(),
            Phase::Finetune => Self::finetune(),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return bad("batch_size and steps must be positive".into());
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("optimizer settings out of range".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) || !(0.0..=1.0).contains(&self.neg_fraction) {
            return bad("mask_prob and neg_fraction must lie in [0, 1]".into());
        }
        if self.phase == Phase::Pretrain && self.batch_size < 2 {
            return bad("pretraining needs batch_size ≥ 2 for matching negatives".into());
        }
        if self.phase == Phase::Pretrain && self.encoder_bypass {
            return bad("encoder_bypass only applies to fine-tuning".into());
        }
        if self.grad_clip.is_some_and(|c| c <= 0.0) {
            return bad("grad_clip must be positive".into());
        }
        Ok(())
    }

    /// Rate for 1-based `step`.
    pub fn rate_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// Seeded stream for one purpose of a run.
fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

// Stream 0 is the model initializer's (`VqaModel::init` seeds it directly).
const STREAM_ORDER: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_TASKS: u64 = 3;

/// Endless seeded sequence of example indices, reshuffled every epoch.
pub struct BatchOrder {
    n: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
    pub epoch: u64,
}

impl BatchOrder {
    pub fn new(n: usize, rng: ChaCha8Rng) -> Self {
        Self { n, order: Vec::new(), pos: 0, rng, epoch: 0 }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order = (0..self.n).collect();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
                self.epoch += 1;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Per-step record returned by the loops and written to the log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepLoss {
    Pretrain(LossBreakdown),
    Finetune(f64),
}

impl StepLoss {
    pub fn total(&self) -> f64 {
        match self {
            StepLoss::Pretrain(b) => b.total,
            StepLoss::Finetune(l) => *l,
        }
    }

    pub fn log_line(&self, step: u64) -> String {
        match self {
            StepLoss::Pretrain(b) => format!("{step}\t{}\t{}\t{}\t{}", b.total, b.mwp, b.mfr, b.itm),
            StepLoss::Finetune(l) => format!("{step}\t{l}"),
        }
    }
}

/// Side effects of a training run: logging, periodic checkpoints, early stopping.
pub trait TrainHooks {
    fn on_step(&mut self, _step: u64, _loss: &StepLoss) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _ckpt: &Checkpoint, _is_final: bool) -> Result<()> {
        Ok(())
    }

    /// Checked after every step; `true` ends the run early with a final checkpoint.
    fn should_stop(&mut self, _step: u64, _model: &VqaModel, _params: &ParamSet<f32>) -> Result<bool> {
        Ok(false)
    }
}

pub struct NoHooks;
impl TrainHooks for NoHooks {}

/// Writes `train_log.tsv` every `log_every` steps, periodic checkpoints under
/// `checkpoints/step-N`, and the final one under `checkpoint/`.
pub struct DirHooks {
    pub out: PathBuf,
    log: BufWriter<File>,
    log_every: u64,
}

impl DirHooks {
    pub fn new(out: &Path, cfg: &TrainConfig) -> Result<Self> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = out.join("train_log.tsv");
        let mut log = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        let header = match cfg.phase {
            Phase::Pretrain => "step\tloss_total\tloss_mwp\tloss_mfr\tloss_itm",
            Phase::Finetune => "step\tloss_vqa",
        };
        writeln!(log, "{header}").map_err(|e| Error::io(&path, e))?;
        Ok(Self { out: out.to_path_buf(), log, log_every: cfg.log_every.max(1) })
    }

    pub fn final_dir(out: &Path) -> PathBuf {
        out.join("checkpoint")
    }
}

impl TrainHooks for DirHooks {
    fn on_step(&mut self, step: u64, loss: &StepLoss) -> Result<()> {
        if step % self.log_every == 0 || step == 1 {
            writeln!(self.log, "{}", loss.log_line(step)).map_err(|e| Error::io(&self.out, e))?;
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, ckpt: &Checkpoint, is_final: bool) -> Result<()> {
        self.log.flush().map_err(|e| Error::io(&self.out, e))?;
        let dir = if is_final { Self::final_dir(&self.out) } else { step_dir(&self.out.join("checkpoints"), ckpt.step) };
        ckpt.save(&dir)
    }
}

/// Result of a loop: the final checkpoint and every step's loss.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<StepLoss>,
}

struct Run<'a> {
    cfg: &'a TrainConfig,
    model: VqaModel,
    params: ParamSet<f32>,
    opt: Adam<f32>,
    vocab: Vocabulary,
    config_hash: String,
}

impl Run<'_> {
    fn checkpoint(&self, step: u64) -> Checkpoint {
        Checkpoint {
            phase: self.cfg.phase,
            step,
            config_hash: self.config_hash.clone(),
            model: self.model.config.clone(),
            parts: self.model.parts,
            params: self.params.clone(),
            vocab: self.vocab.clone(),
            optimizer: self.cfg.save_optimizer.then(|| self.opt.clone()),
        }
    }

    fn apply(&mut self, step: u64, mut grads: Vec<Option<Array2<f32>>>) -> Result<()> {
        if let Some(cap) = self.cfg.grad_clip {
            let norm = grads.iter().flatten().flat_map(|g| g.iter()).map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            if norm > cap {
                let k = (cap / norm) as f32;
                grads.iter_mut().flatten().for_each(|g| g.mapv_inplace(|x| x * k));
            }
        }
        self.opt.config.learning_rate = self.cfg.rate_at(step);
        self.opt.update(&mut self.params, &grads)
    }

    fn drive(mut self, hooks: &mut dyn TrainHooks, mut step_fn: impl FnMut(&VqaModel, &ParamSet<f32>) -> Result<(StepLoss, Vec<Option<Array2<f32>>>)>) -> Result<TrainOutcome> {
        let mut losses = Vec::new();
        let mut step = 0;
        while step < self.cfg.steps {
            step += 1;
            let (loss, grads) = step_fn(&self.model, &self.params)?;
            if !loss.total().is_finite() {
                return Err(Error::NonFinite(format!("loss at step {step}")));
            }
            self.apply(step, grads)?;
            hooks.on_step(step, &loss)?;
            losses.push(loss);
            let stop = hooks.should_stop(step, &self.model, &self.params)?;
            if !stop && step < self.cfg.steps && self.cfg.checkpoint_every > 0 && step % self.cfg.checkpoint_every == 0 {
                hooks.on_checkpoint(&self.checkpoint(step), false)?;
            }
            if stop {
                break;
            }
        }
        let checkpoint = self.checkpoint(step);
        hooks.on_checkpoint(&checkpoint, true)?;
        Ok(TrainOutcome { checkpoint, losses })
    }
}

fn load_word_table(model: &VqaModel, params: &mut ParamSet<f32>, table: Option<&WordEmbeddingTable>) -> Result<()> {
    if let Some(t) = table {
        model.text.load_table(params, t)?;
    }
    Ok(())
}

/// Train the encoder and pretraining heads on image-caption pairs. No decoder is created.
pub fn pretrain_loop(
    model_cfg: &ModelConfig,
    vocab: &Vocabulary,
    data: &CaptionData,
    cfg: &TrainConfig,
    word_vectors: Option<&WordEmbeddingTable>,
    config_hash: &str,
    hooks: &mut dyn TrainHooks,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.phase != Phase::Pretrain {
        return Err(Error::Invalid("pretrain_loop needs a pretrain-phase config".into()));
    }
    check_vocab(model_cfg, vocab)?;
    if data.len() < 2 {
        return Err(Error::Invalid("pretraining needs at least two image-caption pairs".into()));
    }
    let (model, mut params) = VqaModel::init::<f32>(model_cfg, Parts::PRETRAIN, cfg.seed)?;
    load_word_table(&model, &mut params, word_vectors)?;
    let opt = Adam::new(cfg.adam(), &params);
    let run = Run { cfg, model, params, opt, vocab: vocab.clone(), config_hash: config_hash.to_string() };
    let mut order = BatchOrder::new(data.len(), stream(cfg.seed, STREAM_ORDER));
    let mut noise = stream(cfg.seed, STREAM_NOISE);
    let mut tasks = stream(cfg.seed, STREAM_TASKS);
    let m = model_cfg.num_patches();
    run.drive(hooks, |model, params| {
        let idx = order.next_batch(cfg.batch_size);
        let visuals: Vec<&Visual> = idx.iter().map(|&i| &data.visuals[data.items[i].visual]).collect();
        let texts: Vec<&TokenSequence> = idx.iter().map(|&i| &data.items[i].text).collect();
        let mut plan = PretrainPlan::sample(&texts, m, cfg.mask_prob, cfg.neg_fraction, &mut tasks)?;
        let mut g = Graph::new(params);
        let nodes = pretrain_forward(&mut g, model, &visuals, &texts, &mut plan, &mut Ctx::train(cfg.dropout, &mut noise))?;
        let loss = StepLoss::Pretrain(nodes.breakdown(&g));
        Ok((loss, g.backward(nodes.total).into_params()))
    })
}

fn check_vocab(model_cfg: &ModelConfig, vocab: &Vocabulary) -> Result<()> {
    if vocab.len() != model_cfg.vocab_size {
        return Err(Error::Invalid(format!("vocabulary has {} entries, model config says {}", vocab.len(), model_cfg.vocab_size)));
    }
    Ok(())
}

/// Fresh VQA parameters, with encoder-side arrays copied from `init` when given.
///
/// Every parameter outside the decoder that the model has must be present in the checkpoint
/// with the same shape; pretraining heads are ignored.
pub fn finetune_params(model_cfg: &ModelConfig, init: Option<&Checkpoint>, bypass: bool, seed: u64) -> Result<(VqaModel, ParamSet<f32>)> {
    let parts = if bypass { Parts::VQA_BYPASS } else { Parts::VQA };
    let (model, mut params) = VqaModel::init::<f32>(model_cfg, parts, seed)?;
    if let Some(ck) = init {
        if ck.vocab.len() != model_cfg.vocab_size {
            return Err(Error::Shape(format!("checkpoint vocabulary has {} entries, model expects {}", ck.vocab.len(), model_cfg.vocab_size)));
        }
        params.overwrite_from(&ck.params, |name| !name.starts_with("decoder.") && !name.starts_with("heads."))?;
    }
    Ok((model, params))
}

/// Train the whole model on VQA triples, optionally starting from a pretraining checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn finetune_loop(
    model_cfg: &ModelConfig,
    vocab: &Vocabulary,
    init: Option<&Checkpoint>,
    data: &VqaData,
    cfg: &TrainConfig,
    word_vectors: Option<&WordEmbeddingTable>,
    config_hash: &str,
    hooks: &mut dyn TrainHooks,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.phase != Phase::Finetune {
        return Err(Error::Invalid("finetune_loop needs a finetune-phase config".into()));
    }
    check_vocab(model_cfg, vocab)?;
    if data.is_empty() {
        return Err(Error::Invalid("no VQA triples to train on".into()));
    }
    if let Some(ck) = init {
        if ck.vocab.tokens() != vocab.tokens() {
            return Err(Error::Invalid("checkpoint vocabulary differs from the fine-tuning vocabulary".into()));
        }
    }
    let (model, mut params) = finetune_params(model_cfg, init, cfg.encoder_bypass, cfg.seed)?;
    if init.is_none() {
        load_word_table(&model, &mut params, word_vectors)?;
    }
    let opt = Adam::new(cfg.adam(), &params);
    let run = Run { cfg, model, params, opt, vocab: vocab.clone(), config_hash: config_hash.to_string() };
    let mut order = BatchOrder::new(data.len(), stream(cfg.seed, STREAM_ORDER));
    let mut noise = stream(cfg.seed, STREAM_NOISE);
    run.drive(hooks, |model, params| {
        let idx = order.next_batch(cfg.batch_size);
        let visuals: Vec<&Visual> = idx.iter().map(|&i| &data.visuals[data.items[i].visual]).collect();
        let questions: Vec<&TokenSequence> = idx.iter().map(|&i| &data.items[i].question).collect();
        let answers: Vec<&AnswerSequence> = idx.iter().map(|&i| &data.items[i].answer).collect();
        let mut g = Graph::new(params);
        let loss = model.vqa_forward(&mut g, &visuals, &questions, &answers, &mut Ctx::train(cfg.dropout, &mut noise))?;
        let value = g.scalar(loss) as f64;
        Ok((StepLoss::Finetune(value), g.backward(loss).into_params()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_order_reshuffles_per_epoch() {
        let mut o = BatchOrder::new(5, stream(3, STREAM_ORDER));
        let a = o.next_batch(5);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
        let b = o.next_batch(7);
        assert_eq!(o.epoch, 3);
        assert_eq!(b.len(), 7);
        let mut again = BatchOrder::new(5, stream(3, STREAM_ORDER));
        assert_eq!(again.next_batch(5), a);
    }

    #[test]
    fn phase_defaults() {
        let p = TrainConfig::pretrain();
        let f = TrainConfig::finetune();
        assert_eq!((p.batch_size, p.steps, p.learning_rate, p.weight_decay), (32, 100_000, 1e-4, 0.001));
        assert_eq!((f.steps, f.learning_rate), (30_000, 3e-4));
        assert!(p.validate().is_ok() && f.validate().is_ok());
        assert!(TrainConfig { learning_rate: 0.0, ..f.clone() }.validate().is_err());
        assert!(TrainConfig { encoder_bypass: true, ..p }.validate().is_err());
    }

    #[test]
    fn warmup_ramps_linearly() {
        let c = TrainConfig { warmup_steps: 4, learning_rate: 1.0, ..TrainConfig::finetune() };
        assert_eq!(c.rate_at(1), 0.25);
        assert_eq!(c.rate_at(4), 1.0);
        assert_eq!(c.rate_at(9), 1.0);
    }
}
