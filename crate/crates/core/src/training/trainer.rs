use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, CheckpointStore};
use super::config::TrainConfig;
use super::loss::{joint_loss, smoothed_loss};
use super::optim::{adam_update, lr_at, AdamState};
use crate::data::{make_batches, Batch, Triple, PAD_ID};
use crate::error::{Error, Result};
use crate::model::{apply_bias_mask, shift_targets, Forward, Model, Params};
use crate::numerics::Var;

/// What the MT encoder reads in a pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// The machine translation.
    PostEdit,
    /// The noised post-edit (de-noising encoder task).
    Denoise,
}

/// Independent random stream for one pass of one update, so skipping a
/// pass never shifts the randomness of the other.
pub fn pass_rng(seed: u64, step: u64, task: Task) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step * 2 + task as u64);
    rng
}

/// Builds the loss of one pass over `batch` inside `fwd`.
pub fn task_loss(fwd: &mut Forward, batch: &Batch, task: Task, cfg: &TrainConfig, pe_allowed: &[bool]) -> Result<(Var, usize)> {
    let src = fwd.encode_source(&batch.src)?;
    let mt = match task {
        Task::PostEdit => fwd.encode_mt(&batch.mt, &src, None)?,
        Task::Denoise => fwd.encode_mt(&batch.pe, &src, Some(&cfg.noise))?,
    };
    let (input, targets) = shift_targets(&batch.pe);
    let dec = fwd.decode_states(&input, &src, &mt)?;
    let z = fwd.logits(dec)?;
    smoothed_loss(fwd.graph_mut(), z, &targets, cfg.label_smoothing, pe_allowed)
}

/// Loss value and the gradients of `weight · loss` for one training pass.
pub fn pass_gradients(model: &Model, batch: &Batch, task: Task, cfg: &TrainConfig, rng: ChaCha8Rng, weight: f64) -> Result<(f64, Params)> {
    let allowed = model.pe_allowed()?;
    let mut fwd = Forward::new(model, true, rng);
    let (loss, _) = task_loss(&mut fwd, batch, task, cfg, &allowed)?;
    let value = fwd.graph().value(loss).item();
    fwd.graph_mut().backward_scaled(loss, weight)?;
    Ok((value, fwd.gradients()))
}

#[derive(Clone, Debug)]
pub struct JointGradients {
    /// `None` when the pass was skipped because its weight is zero.
    pub loss_ape: Option<f64>,
    pub loss_dn: Option<f64>,
    pub joint: f64,
    pub grads: Params,
}

/// Gradients of `λ·loss_ape + (1 − λ)·loss_dn` for update number `step`.
pub fn joint_gradients(model: &Model, batch: &Batch, cfg: &TrainConfig, step: u64) -> Result<JointGradients> {
    let lambda = cfg.lambda;
    let mut grads: Option<Params> = None;
    let mut losses = [None, None];
    for (slot, (task, weight)) in [(Task::PostEdit, lambda), (Task::Denoise, 1.0 - lambda)].into_iter().enumerate() {
        if weight == 0.0 {
            continue;
        }
        let rng = pass_rng(cfg.seed, step, task);
        let (loss, g) = pass_gradients(model, batch, task, cfg, rng, weight)?;
        losses[slot] = Some(loss);
        grads = Some(match grads {
            None => g,
            Some(mut acc) => {
                for ((_, a), (_, b)) in acc.iter_mut().zip(g.iter()) {
                    a.add_assign_scaled(b, 1.0)?;
                }
                acc
            }
        });
    }
    let joint = joint_loss(losses[0].unwrap_or(0.0), losses[1].unwrap_or(0.0), lambda);
    Ok(JointGradients {
        loss_ape: losses[0],
        loss_dn: losses[1],
        joint,
        grads: grads.expect("at least one pass has positive weight"),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub loss_ape: Option<f64>,
    pub loss_dn: Option<f64>,
    pub joint: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunSummary {
    pub steps: u64,
    pub epochs: usize,
    /// Validation perplexity after each finished epoch.
    pub dev_perplexity: Vec<f64>,
    pub last: Option<StepReport>,
}

/// Model, optimizer state and configuration of one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub opt: AdamState,
    pub cfg: TrainConfig,
}

impl Trainer {
    /// Fresh model initialised from `cfg.seed`.
    pub fn new(cfg: TrainConfig, pe_allowed: &[bool]) -> Result<Self> {
        cfg.validate()?;
        let mut mc = cfg.model.clone();
        mc.vocab_size = pe_allowed.len();
        let model = Model::new(mc, pe_allowed, cfg.seed)?;
        Ok(Self::from_model(model, cfg))
    }

    pub fn from_model(model: Model, cfg: TrainConfig) -> Self {
        let opt = AdamState::new(&model.params);
        Self { model, opt, cfg }
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }

    /// Both passes, one Adam update, then the classifier mask again.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepReport> {
        let step = self.opt.step + 1;
        let lr = self.cfg.lr_scale * lr_at(step, self.model.config.d_model, self.cfg.warmup_steps)?;
        let j = joint_gradients(&self.model, batch, &self.cfg, step)?;
        if !j.joint.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!(
                    "joint loss {} (post-edit {:?}, de-noising {:?}) at lr {lr:e}",
                    j.joint, j.loss_ape, j.loss_dn
                ),
            });
        }
        let allowed = self.model.pe_allowed()?;
        adam_update(&mut self.model.params, &j.grads, &mut self.opt, lr, &self.cfg.adam)?;
        apply_bias_mask(&mut self.model.params, &allowed)?;
        Ok(StepReport {
            step,
            lr,
            loss_ape: j.loss_ape,
            loss_dn: j.loss_dn,
            joint: j.joint,
        })
    }

    /// The full epoch loop. Checkpoints go to `store` every `save_interval`
    /// updates, when a loss line is also written to `log`; after each
    /// epoch the dev perplexity decides the best checkpoint.
    pub fn run(&mut self, train: &[Triple], dev: &[Triple], mut store: Option<&mut CheckpointStore>, log: &mut dyn Write) -> Result<RunSummary> {
        let io = |e| Error::storage(std::path::Path::new("<loss log>"), e);
        writeln!(log, "step\tlr\tloss_ape\tloss_dn\tjoint").map_err(io)?;
        let mut summary = RunSummary::default();
        let mut interval = Interval::default();
        'epochs: for epoch in 0..self.cfg.epochs {
            let seed = self.cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(epoch as u64);
            for batch in make_batches(train, self.cfg.batch_pe_tokens, seed)? {
                let r = self.train_step(&batch)?;
                interval.add(&r);
                summary.steps = r.step;
                if r.step % self.cfg.save_interval == 0 {
                    writeln!(log, "{}", interval.line(r.step, r.lr)).map_err(io)?;
                    interval = Interval::default();
                    if let Some(s) = store.as_deref_mut() {
                        s.save_and_prune(&Checkpoint::from_model(&self.model, r.step, epoch as u64))?;
                    }
                }
                summary.last = Some(r);
                if self.cfg.max_steps > 0 && summary.steps >= self.cfg.max_steps {
                    summary.epochs = epoch + 1;
                    self.finish_epoch(dev, epoch, store.as_deref_mut(), &mut summary)?;
                    break 'epochs;
                }
            }
            summary.epochs = epoch + 1;
            self.finish_epoch(dev, epoch, store.as_deref_mut(), &mut summary)?;
        }
        log.flush().map_err(io)?;
        Ok(summary)
    }

    fn finish_epoch(&self, dev: &[Triple], epoch: usize, store: Option<&mut CheckpointStore>, summary: &mut RunSummary) -> Result<()> {
        if dev.is_empty() {
            return Ok(());
        }
        let ppl = validation_perplexity(&self.model, dev, self.cfg.batch_pe_tokens)?;
        log::info!("epoch {} step {} dev perplexity {ppl:.4}", epoch + 1, summary.steps);
        summary.dev_perplexity.push(ppl);
        if let Some(s) = store {
            s.offer_best(&Checkpoint::from_model(&self.model, summary.steps, epoch as u64), ppl)?;
        }
        Ok(())
    }
}

#[derive(Default)]
struct Interval {
    n: usize,
    ape: (f64, usize),
    dn: (f64, usize),
    joint: f64,
}

impl Interval {
    fn add(&mut self, r: &StepReport) {
        self.n += 1;
        if let Some(l) = r.loss_ape {
            self.ape.0 += l;
            self.ape.1 += 1;
        }
        if let Some(l) = r.loss_dn {
            self.dn.0 += l;
            self.dn.1 += 1;
        }
        self.joint += r.joint;
    }

    fn line(&self, step: u64, lr: f64) -> String {
        let mean = |(s, n): (f64, usize)| if n == 0 { "-".to_string() } else { format!("{:.6}", s / n as f64) };
        format!(
            "{step}\t{lr:.6e}\t{}\t{}\t{:.6}",
            mean(self.ape),
            mean(self.dn),
            self.joint / self.n.max(1) as f64
        )
    }
}

/// `exp` of the mean per-token negative log-likelihood of the post-edits
/// given source and MT, without smoothing, dropout or noise.
pub fn validation_perplexity(model: &Model, dev: &[Triple], batch_pe_tokens: usize) -> Result<f64> {
    if dev.is_empty() {
        return Err(Error::Data("empty validation set".into()));
    }
    let order: Vec<usize> = (0..dev.len()).collect();
    let mut nll = 0.0;
    let mut count = 0usize;
    for batch in crate::data::batch_in_order(dev, &order, batch_pe_tokens.max(1)) {
        let mut fwd = Forward::inference(model);
        let src = fwd.encode_source(&batch.src)?;
        let mt = fwd.encode_mt(&batch.mt, &src, None)?;
        let (input, targets) = shift_targets(&batch.pe);
        let dec = fwd.decode_states(&input, &src, &mt)?;
        let z = fwd.logits(dec)?;
        let rank = fwd.graph().shape(z).len();
        let logp = fwd.graph_mut().log_softmax(z, rank - 1)?;
        let v = model.config.vocab_size;
        let values = fwd.graph().value(logp).data();
        for (i, &t) in targets.iter().enumerate() {
            if t != PAD_ID {
                nll -= values[i * v + t as usize];
                count += 1;
            }
        }
    }
    Ok((nll / count as f64).exp())
}
