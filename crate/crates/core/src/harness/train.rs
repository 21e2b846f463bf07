use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use crate::corpus::{batch, EncodedPair, Vocab, PAD_ID};
use crate::curriculum::{CurriculumSchedule, PhaseTag};
use crate::error::{Error, Result};
use crate::model::{Forward, ModelParams, TaskK, TrainBatch};
use crate::numcore::{adam_step, OptimizerState, Tape};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LATEST_CHECKPOINT: &str = "checkpoint.ckpt";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

const SALT_TASK: u64 = 1;
const SALT_DROPOUT: u64 = 2;
const SALT_EPOCH: u64 = 3;
const SALT_INIT: u64 = 4;

/// Independent generator for `(seed, purpose, index)`, so any step can be
/// replayed without the history before it.
pub fn derived_rng(seed: u64, salt: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

pub fn init_seed(seed: u64) -> u64 {
    derived_rng(seed, SALT_INIT, 0).next_u64()
}

/// Which task each training step uses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TaskPlan {
    Curriculum(CurriculumSchedule),
    /// One task for the whole budget (teacher training and the preliminary study).
    Fixed { k: TaskK, steps: u64 },
}

impl TaskPlan {
    pub fn total_steps(&self) -> u64 {
        match self {
            TaskPlan::Curriculum(s) => s.total_steps(),
            TaskPlan::Fixed { steps, .. } => *steps,
        }
    }

    pub fn phase(&self, step: u64) -> PhaseTag {
        match self {
            TaskPlan::Curriculum(s) => s.phase_of(step).tag,
            TaskPlan::Fixed { k: TaskK::Fixed(1), .. } => PhaseTag::At,
            TaskPlan::Fixed { k: TaskK::Full, .. } => PhaseTag::Nat,
            TaskPlan::Fixed { .. } => PhaseTag::Sat,
        }
    }

    /// Phase whose dev score drives early stopping.
    fn final_phase(&self) -> PhaseTag {
        self.phase(self.total_steps().saturating_sub(1))
    }

    pub fn task(&self, seed: u64, step: u64) -> TaskK {
        match self {
            TaskPlan::Curriculum(s) => s.sample_task(step, &mut derived_rng(seed, SALT_TASK, step)),
            TaskPlan::Fixed { k, .. } => *k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub phase: PhaseTag,
    pub k: TaskK,
    pub loss: f64,
    pub lr: f64,
}

pub struct TrainRun<'a> {
    pub config: &'a ExperimentConfig,
    pub plan: TaskPlan,
    pub pairs: &'a [EncodedPair],
    pub vocab: &'a Vocab,
    /// Receives the metrics log and checkpoints when set.
    pub run_dir: Option<&'a Path>,
    /// Development pairs and the degree whose loss drives early stopping.
    pub dev: Option<(&'a [EncodedPair], TaskK)>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRecord>,
    pub stopped_early: bool,
}

impl TrainRun<'_> {
    /// Ties a checkpoint to the config keys and the task plan it was trained under.
    pub fn config_hash(&self) -> String {
        let plan = serde_json::to_string(&self.plan).expect("plan serialises");
        let mut h = Sha256::new();
        h.update(self.config.training_hash().as_bytes());
        h.update(plan.as_bytes());
        hex::encode(h.finalize())
    }

    fn fresh(&self) -> Result<Checkpoint> {
        let model_cfg = self.config.model_config(self.vocab.len());
        let params = ModelParams::init(model_cfg.clone(), init_seed(self.config.seed))?;
        let optimizer = OptimizerState::new(self.config.adam(), model_cfg.d_model, params.weights.flatten());
        Ok(Checkpoint {
            params,
            optimizer: Some(optimizer),
            step: 0,
            phase: None,
            config_hash: self.config_hash(),
            vocab_fingerprint: self.vocab.fingerprint(),
        })
    }
}

struct EpochBatches {
    epoch: Option<u64>,
    batches: Vec<Vec<usize>>,
}

impl EpochBatches {
    fn get(&mut self, pairs: &[EncodedPair], max_tokens: usize, seed: u64, step: u64) -> Result<&[usize]> {
        if self.epoch.is_none() {
            self.batches = batch(pairs, max_tokens, derived_rng(seed, SALT_EPOCH, 0).next_u64())?;
            self.epoch = Some(0);
        }
        let per_epoch = self.batches.len() as u64;
        let epoch = step / per_epoch;
        if self.epoch != Some(epoch) {
            self.batches = batch(pairs, max_tokens, derived_rng(seed, SALT_EPOCH, epoch).next_u64())?;
            self.epoch = Some(epoch);
        }
        Ok(&self.batches[(step % per_epoch) as usize])
    }
}

fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|l| Ok(serde_json::from_str(&l.map_err(|e| Error::io(path, e))?)?))
        .collect()
}

/// Keeps the records up to `step` and rewrites the log, for resuming.
fn truncate_metrics(path: &Path, step: u64) -> Result<Vec<MetricRecord>> {
    let kept: Vec<MetricRecord> = if path.exists() {
        read_metrics(path)?.into_iter().filter(|r| r.step <= step).collect()
    } else {
        Vec::new()
    };
    let mut text = String::new();
    for r in &kept {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(kept)
}

/// Runs the plan from `resume` (or a fresh seeded model) to its last step.
///
/// Every step draws its task and dropout masks from generators derived from
/// `(seed, step)` and its batch from the seeded order of its epoch, so a run
/// resumed from any checkpoint retraces the uninterrupted run bit for bit.
pub fn train(run: &TrainRun<'_>, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
    let cfg = run.config;
    if run.pairs.is_empty() {
        return Err(Error::InvalidArgument("empty training corpus".into()));
    }
    let mut state = match resume {
        Some(ckpt) => {
            ckpt.check_config(&run.config_hash())?;
            ckpt.check_vocab(&run.vocab.fingerprint())?;
            if ckpt.optimizer.is_none() {
                return Err(Error::Checkpoint("cannot resume without optimizer state".into()));
            }
            ckpt
        }
        None => run.fresh()?,
    };
    let metrics_path: Option<PathBuf> = run.run_dir.map(|d| d.join(METRICS_FILE));
    if let Some(dir) = run.run_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut metrics = match &metrics_path {
        Some(p) => truncate_metrics(p, state.step)?,
        None => Vec::new(),
    };
    let mut log_file = match &metrics_path {
        Some(p) => Some(OpenOptions::new().append(true).open(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };

    let total = run.plan.total_steps();
    let mut batches = EpochBatches {
        epoch: None,
        batches: Vec::new(),
    };
    let mut best_dev = f64::INFINITY;
    let mut stale = 0u64;
    let mut stopped_early = false;
    while state.step < total {
        let step = state.step;
        let phase = run.plan.phase(step);
        let k = run.plan.task(cfg.seed, step);
        let idx = batches.get(run.pairs, cfg.max_tokens, cfg.seed, step)?;
        let refs: Vec<(&[u32], &[u32])> = idx.iter().map(|&i| (&run.pairs[i].0[..], &run.pairs[i].1[..])).collect();
        let tb = TrainBatch::new(&refs, k, PAD_ID)?;

        let params = &mut state.params;
        let mut tape = Tape::new();
        let w = params.weights.register(&mut tape, true);
        let mut drop_rng = derived_rng(cfg.seed, SALT_DROPOUT, step);
        let mut fwd = Forward::new(&params.config, &w);
        if cfg.dropout > 0.0 {
            fwd.dropout = Some((cfg.dropout, &mut drop_rng));
        }
        let loss_var = tb.loss(&mut fwd, &mut tape, cfg.label_smoothing).map_err(|e| abort(step, e))?;
        let loss = tape.value(loss_var).data()[0];
        tape.backward(loss_var).map_err(|e| abort(step, e))?;
        let vars = w.flatten();
        let grads: Vec<&[f64]> = vars
            .iter()
            .map(|v| tape.grad(**v).expect("every leaf has a gradient after backward"))
            .collect();
        let optimizer = state.optimizer.as_mut().expect("training state has an optimizer");
        let lr = adam_step(&mut params.weights.flatten_mut(), &grads, optimizer).map_err(|e| abort(step, e))?;
        drop(tape);

        state.step += 1;
        state.phase = Some(phase);
        if state.step % cfg.log_interval == 0 {
            let rec = MetricRecord {
                step: state.step,
                phase,
                k,
                loss,
                lr,
            };
            if let Some(f) = log_file.as_mut() {
                let line = serde_json::to_string(&rec)? + "\n";
                f.write_all(line.as_bytes()).map_err(|e| Error::io(metrics_path.as_ref().expect("log path"), e))?;
            }
            info!("step {} phase {:?} k {} loss {:.4} lr {:.3e}", rec.step, phase, k, loss, lr);
            metrics.push(rec);
        }
        if let Some(dir) = run.run_dir {
            if cfg.checkpoint_interval > 0 && state.step % cfg.checkpoint_interval == 0 {
                state.save(&dir.join(LATEST_CHECKPOINT))?;
            }
        }
        if let Some((dev, dev_k)) = run.dev {
            let due = cfg.eval_interval > 0 && state.step % cfg.eval_interval == 0;
            if due && cfg.early_stop_patience > 0 && phase == run.plan.final_phase() {
                let score = dev_loss(&state.params, dev, dev_k)?;
                info!("step {} dev loss {:.4}", state.step, score);
                if score < best_dev {
                    best_dev = score;
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= cfg.early_stop_patience {
                        stopped_early = true;
                        break;
                    }
                }
            }
        }
    }
    if let Some(dir) = run.run_dir {
        state.save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome {
        checkpoint: state,
        metrics,
        stopped_early,
    })
}

/// Mean per-token teacher-forced NLL of `pairs` at degree `k`.
pub fn dev_loss(params: &ModelParams, pairs: &[EncodedPair], k: TaskK) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in pairs.chunks(64) {
        let refs: Vec<(&[u32], &[u32])> = chunk.iter().map(|p| (&p.0[..], &p.1[..])).collect();
        for lp in TrainBatch::new(&refs, k, PAD_ID)?.token_log_probs(params)? {
            total -= lp.iter().sum::<f64>();
            count += lp.len();
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("empty development set".into()));
    }
    Ok(total / count as f64)
}

fn abort(step: u64, e: Error) -> Error {
    warn!("training aborted at step {step}; the last saved checkpoint is kept");
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} at step {step}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curriculum::Pacing;

    #[test]
    fn derived_streams_differ() {
        let a = derived_rng(1, SALT_TASK, 0).next_u64();
        assert_eq!(a, derived_rng(1, SALT_TASK, 0).next_u64());
        assert_ne!(a, derived_rng(1, SALT_TASK, 1).next_u64());
        assert_ne!(a, derived_rng(1, SALT_DROPOUT, 0).next_u64());
        assert_ne!(a, derived_rng(2, SALT_TASK, 0).next_u64());
    }

    #[test]
    fn fixed_plan_phases() {
        let p = |k| TaskPlan::Fixed { k, steps: 5 }.phase(0);
        assert_eq!(p(TaskK::Fixed(1)), PhaseTag::At);
        assert_eq!(p(TaskK::Fixed(4)), PhaseTag::Sat);
        assert_eq!(p(TaskK::Full), PhaseTag::Nat);
    }

    #[test]
    fn curriculum_plan_follows_schedule() {
        let s = CurriculumSchedule::new(2, 1000, 3, Pacing::Linear, 1).unwrap();
        let plan = TaskPlan::Curriculum(s);
        assert_eq!(plan.task(0, 0), TaskK::Fixed(1));
        assert_eq!(plan.task(0, 2 + 249), TaskK::Fixed(2));
        assert_eq!(plan.task(0, 2 + 250), TaskK::Fixed(4));
        assert_eq!(plan.task(0, 1003), TaskK::Full);
        assert_eq!(plan.final_phase(), PhaseTag::Nat);
    }
}
