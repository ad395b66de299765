//! Joint training of retrieval, control and answer generation.

mod losses;
mod optim;
mod rollout;

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::control::{is_stop, ControlHead};
use crate::datakit::{Document, QAExample};
use crate::error::{Error, Result};
use crate::index::{VectorIndex, DEFAULT_REFRESH_PERIOD};
use crate::model::MicroTransformer;
use crate::numerics::Tape;

pub use losses::{
    adaptive_contrastive_loss, contrastive_from_logits, contrastive_loss, contrastive_loss_on, leftover_positives,
    ntp_loss, ntp_loss_on, sample_positive, total_loss, total_loss_on,
};
pub use optim::Adam;
pub use rollout::{check_turn_states, plan_rollout, rollout_loss_on, LossParts, PlannedTurn, RolloutEnv, RolloutPlan, TurnState};

/// How the contrastive target is picked from the leftover positives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PositiveChoice {
    /// Uniformly at random (seeded).
    Uniform,
    /// The earliest hop still missing, in the example's gold order.
    HopOrder,
}

impl std::str::FromStr for PositiveChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(PositiveChoice::Uniform),
            "hop-order" => Ok(PositiveChoice::HopOrder),
            _ => Err(Error::invalid(format!("unknown positive choice `{s}` (uniform, hop-order)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub tau: f64,
    pub lambda: f64,
    pub mu: f64,
    pub n_neg: usize,
    /// Negatives are drawn uniformly from this many top-ranked non-positives;
    /// values up to `n_neg` take the top `n_neg` as they are.
    pub neg_pool: usize,
    pub positive: PositiveChoice,
    pub k: usize,
    pub max_turns: usize,
    pub lr: f32,
    /// Linear learning-rate ramp over the first this-many steps.
    pub lr_warmup_steps: usize,
    pub clip_norm: f32,
    pub refresh_period: usize,
    /// Passes of plain next-token training over the corpus text before the
    /// joint objective starts.
    pub warmup_epochs: usize,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 0.05,
            lambda: 1.0,
            mu: 0.5,
            n_neg: 15,
            neg_pool: 15,
            positive: PositiveChoice::HopOrder,
            k: 3,
            max_turns: 3,
            lr: 3e-4,
            lr_warmup_steps: 0,
            clip_norm: 1.0,
            refresh_period: DEFAULT_REFRESH_PERIOD,
            warmup_epochs: 0,
            seed: 0,
            epochs: 1,
            batch_size: 8,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if !(self.lambda >= 0.0 && self.mu >= 0.0) {
            return bad("lambda and mu must be non-negative");
        }
        if self.k == 0 || self.max_turns == 0 || self.n_neg == 0 {
            return bad("K, R and the negative count must be at least 1");
        }
        if self.batch_size == 0 || self.refresh_period == 0 {
            return bad("batch size and refresh period must be at least 1");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }
}

/// One line of the metrics file; losses and rates are batch means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub ntp_loss: f64,
    pub cl_loss: f64,
    pub ctrl_loss: f64,
    pub total: f64,
    pub recall_at_k: f64,
    pub ctrl_acc: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub epochs_completed: usize,
    pub refreshes: usize,
    pub elapsed_secs: f64,
    pub metrics: Vec<StepMetrics>,
}

/// Loss parts and gradients of a single example at the current weights.
pub struct ExampleOutcome {
    pub parts: LossParts,
    pub plan: RolloutPlan,
    pub total: f64,
}

/// Plans and records one example, then adds its gradients (times `scale`)
/// into the model and head stores.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_example(
    model: &mut MicroTransformer,
    head: &mut ControlHead,
    index: &VectorIndex,
    corpus: &[Document],
    doc_tokens: &[Vec<u32>],
    ex: &QAExample,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    scale: f32,
) -> Result<ExampleOutcome> {
    let (plan, parts, grads, total) = {
        let env = RolloutEnv {
            model,
            index,
            corpus,
            doc_tokens,
        };
        let plan = plan_rollout(&env, ex, cfg, rng)?;
        let mut tape = Tape::<f32>::new();
        let parts = rollout_loss_on(&mut tape, &env, head, &plan, cfg)?;
        let total = tape.scalar(parts.total) as f64;
        if !total.is_finite() {
            return Err(Error::Numerical(format!("loss is {total} on `{}`", ex.question)));
        }
        let grads = tape.backward(parts.total)?;
        (plan, parts, grads, total)
    };
    model.params_mut().accumulate_scaled(&grads, scale);
    head.params_mut().accumulate_scaled(&grads, scale);
    Ok(ExampleOutcome { parts, plan, total })
}

/// Trains `model` and `head` on `dataset`, refreshing `index` every
/// `refresh_period` steps and once more at the end so it matches the final
/// weights. A non-finite loss or gradient aborts with a numerical error and
/// leaves the last epoch checkpoint untouched.
pub fn train(
    model: &mut MicroTransformer,
    head: &mut ControlHead,
    index: &mut VectorIndex,
    corpus: &[Document],
    dataset: &[QAExample],
    cfg: &TrainConfig,
    out: &TrainOutputs,
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    index.check_model(model)?;
    let started = Instant::now();
    let doc_tokens = RolloutEnv::tokenize_corpus(model, corpus);
    let mut metrics_file = match &out.metrics_path {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p).map_err(|e| Error::io(p, e))?)),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr, cfg.clip_norm);
    let mut report = TrainReport {
        steps: 0,
        epochs_completed: 0,
        refreshes: 0,
        elapsed_secs: 0.0,
        metrics: Vec::new(),
    };
    if cfg.warmup_epochs > 0 {
        let losses = warmup_lm(model, &doc_tokens, cfg, &mut rng)?;
        log::info!("corpus warm-up losses {losses:.4?} ({:.0}s)", started.elapsed().as_secs_f64());
        index.refresh(corpus, model)?;
        report.refreshes += 1;
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| report.steps >= m) {
                break 'epochs;
            }
            model.params_mut().zero_grad();
            head.params_mut().zero_grad();
            let scale = 1.0 / batch.len() as f32;
            let mut m = StepMetrics {
                step: report.steps + 1,
                epoch: epoch + 1,
                ntp_loss: 0.0,
                cl_loss: 0.0,
                ctrl_loss: 0.0,
                total: 0.0,
                recall_at_k: 0.0,
                ctrl_acc: 0.0,
                grad_norm: 0.0,
            };
            let (mut ctrl_ok, mut ctrl_n) = (0usize, 0usize);
            for &i in batch {
                let o = accumulate_example(model, head, index, corpus, &doc_tokens, &dataset[i], cfg, &mut rng, scale)?;
                m.ntp_loss += o.parts.ntp;
                m.cl_loss += o.parts.cl.iter().sum::<f64>();
                m.ctrl_loss += o.parts.ctrl;
                m.total += o.total;
                m.recall_at_k += f64::from(u8::from(o.plan.hop1_hit));
                for (t, &y) in o.plan.turns.iter().zip(&o.parts.y_hat) {
                    ctrl_ok += usize::from(is_stop(y) == (t.state.label == 1));
                    ctrl_n += 1;
                }
            }
            let n = batch.len() as f64;
            m.ntp_loss /= n;
            m.cl_loss /= n;
            m.ctrl_loss /= n;
            m.total /= n;
            m.recall_at_k /= n;
            m.ctrl_acc = ratio(ctrl_ok, ctrl_n);
            adam.lr = warmup_lr(cfg.lr, cfg.lr_warmup_steps, report.steps);
            m.grad_norm = adam.step(&mut [model.params_mut(), head.params_mut()]).map_err(|e| {
                Error::Numerical(format!("training diverged at step {}: {e}", report.steps + 1))
            })?;
            report.steps += 1;
            if report.steps % cfg.refresh_period == 0 {
                index.refresh(corpus, model)?;
                report.refreshes += 1;
            }
            if let Some(f) = metrics_file.as_mut() {
                let p = out.metrics_path.as_ref().expect("file implies path");
                serde_json::to_writer(&mut *f, &m).map_err(|e| Error::io(p, e.into()))?;
                f.write_all(b"\n").map_err(|e| Error::io(p, e))?;
            }
            if report.steps % 50 == 0 {
                log::info!(
                    "step {} epoch {} total {:.4} ntp {:.4} cl {:.4} ctrl {:.4} recall {:.2} ctrl_acc {:.2} ({:.0}s)",
                    m.step,
                    m.epoch,
                    m.total,
                    m.ntp_loss,
                    m.cl_loss,
                    m.ctrl_loss,
                    m.recall_at_k,
                    m.ctrl_acc,
                    started.elapsed().as_secs_f64()
                );
            }
            report.metrics.push(m);
        }
        report.epochs_completed = epoch + 1;
        if let Some(p) = &out.checkpoint_path {
            save_checkpoint(p, model, head)?;
        }
    }
    if let Some(f) = metrics_file.as_mut() {
        f.flush().map_err(|e| Error::io(out.metrics_path.as_ref().expect("file implies path"), e))?;
    }
    if index.fingerprint() != model.fingerprint() {
        index.refresh(corpus, model)?;
        report.refreshes += 1;
    }
    report.elapsed_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Next-token training on every document, `cfg.warmup_epochs` passes in
/// shuffled batches. Returns the mean loss of each pass.
pub fn warmup_lm(
    model: &mut MicroTransformer,
    doc_tokens: &[Vec<u32>],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut adam = Adam::new(cfg.lr, cfg.clip_norm);
    let usable: Vec<usize> = (0..doc_tokens.len()).filter(|&i| doc_tokens[i].len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::Insufficient("no document has two or more tokens".into()));
    }
    let mut losses = Vec::with_capacity(cfg.warmup_epochs);
    let mut order = usable;
    for _ in 0..cfg.warmup_epochs {
        order.shuffle(rng);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            model.params_mut().zero_grad();
            let scale = 1.0 / batch.len() as f32;
            for &i in batch {
                let toks = &doc_tokens[i];
                let mut mask = vec![true; toks.len()];
                mask[0] = false;
                let mut tape = Tape::<f32>::new();
                let loss = ntp_loss_on(&mut tape, model, toks, &mask)?;
                sum += tape.scalar(loss) as f64;
                let grads = tape.backward(loss)?;
                model.params_mut().accumulate_scaled(&grads, scale);
            }
            adam.step(&mut [model.params_mut()])?;
        }
        losses.push(sum / order.len() as f64);
    }
    Ok(losses)
}

fn warmup_lr(lr: f32, warmup: usize, step: usize) -> f32 {
    if step >= warmup {
        lr
    } else {
        lr * (step + 1) as f32 / warmup as f32
    }
}

fn ratio(ok: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        ok as f64 / n as f64
    }
}
