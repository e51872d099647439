//! Sequential two-stage training of the partial-task and all-task flows.
//!
//! For each task `t`:
//! 1. stage 1 fits `pta[t]` (warm-started from `pta[t−1]`) by maximum
//!    likelihood on tasks `1..=t` and, independently, the all-task flow on
//!    the current task mixed 1:1 with replayed exemplars;
//! 2. stage 2 jointly updates both flows to reduce the posterior KL on the
//!    current task and the replay buffer;
//! 3. the replay buffer is rebalanced to include the finished task.
//!
//! When class embeddings are supplied, a contrastive head on the all-task
//! flow's latents is trained alongside it in both stages.

mod optim;
mod replay;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use optim::{adamw_step, cosine_lr, OptimizerState, BETA1, BETA2, EPSILON};
pub use replay::{ReplayBuffer, TaskSlot};

use crate::autodiff::{value_and_grads, ParamVector, Source, Tape, Var};
use crate::dataset::{find_task, TaskDataset};
use crate::error::{contract, IconError, Result};
use crate::eval::alignment_report;
use crate::flow::{init_flow, read_checkpoint, write_checkpoint, FlowArch, FlowParams};
use crate::numerics::{stream_id, streams, Matrix, RngStream};
use crate::objectives::{init_head, kl_align_task, tape_kl_posteriors, tape_nce, ModelBank};

/// Flow architecture options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub n_blocks: usize,
    pub width: usize,
    /// Designated latent dimensions; all observation dimensions when absent.
    pub latent_dim: Option<usize>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            n_blocks: 8,
            width: 64,
            latent_dim: None,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.width == 0 {
            return Err(IconError::Config("n_blocks and width must be positive".into()));
        }
        if self.latent_dim == Some(0) {
            return Err(IconError::Config("latent_dim must be positive".into()));
        }
        Ok(())
    }
}

/// When the KL alignment stage runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Schedule {
    /// After stage 1 of every task.
    PerTask,
    /// Once, after the last task.
    AtEnd,
}

/// Optimisation options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Initial learning rate of the alignment stage; `lr0` when absent.
    pub lr_stage2: Option<f64>,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub replay_size: usize,
    /// Start `pta[t]` from `pta[t−1]` instead of a fresh initialisation.
    pub warm_start: bool,
    /// Run the KL alignment stage at all.
    pub kl: bool,
    pub stage2_schedule: Stage2Schedule,
    /// Weight of the contrastive term on the all-task branch.
    pub nce_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.002,
            lr_stage2: None,
            lr_min: 0.0,
            weight_decay: 1e-2,
            epochs_stage1: 60,
            epochs_stage2: 20,
            batch_size: 256,
            tau: 0.07,
            replay_size: 2000,
            warm_start: true,
            kl: true,
            stage2_schedule: Stage2Schedule::PerTask,
            nce_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(IconError::Config(m.to_string()));
        if !(self.lr0 > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr0 {
            return bad("learning rates must satisfy 0 ≤ lr_min ≤ lr0, lr0 > 0");
        }
        if let Some(lr) = self.lr_stage2 {
            if !(lr > 0.0) || self.lr_min > lr {
                return bad("stage-2 learning rate must be positive and at least lr_min");
            }
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative");
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2");
        }
        if !(self.tau > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.nce_weight >= 0.0) {
            return bad("contrastive weight must be non-negative");
        }
        Ok(())
    }
}

/// Class embeddings and temperature for the contrastive head.
#[derive(Clone, Debug)]
pub struct ClassContext {
    /// Unit-norm class embeddings, one row per class.
    pub unit_emb: Matrix,
}

/// Per-task loss traces and alignment diagnostics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskHistory {
    pub task: usize,
    /// Mean training loss per stage-1 epoch of `pta[t]`.
    pub stage1_pta: Vec<f64>,
    /// Mean training loss per stage-1 epoch of the all-task flow.
    pub stage1_ata: Vec<f64>,
    /// Mean training objective per stage-2 epoch.
    pub stage2: Vec<f64>,
    /// Posterior KL on the stage-2 data before and after stage 2.
    pub kl_entry: Option<f64>,
    pub kl_exit: Option<f64>,
    /// Mean matched |Pearson| between the two flows' latents, same data.
    pub alignment_entry: Option<f64>,
    pub alignment_exit: Option<f64>,
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct RunState {
    pub bank: ModelBank,
    pub head: Option<ParamVector>,
    pub replay: ReplayBuffer,
    pub history: Vec<TaskHistory>,
    /// Optimizer moments from the most recent stage, keyed by model name.
    pub optimizers: Vec<(String, OptimizerState)>,
}

impl RunState {
    fn history_mut(&mut self, t: usize) -> &mut TaskHistory {
        if let Some(i) = self.history.iter().position(|h| h.task == t) {
            return &mut self.history[i];
        }
        self.history.push(TaskHistory {
            task: t,
            ..TaskHistory::default()
        });
        self.history.last_mut().unwrap()
    }
}

/// Cycles through a shuffled index order, reshuffling at each pass.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize, rng: &mut RngStream) -> Cycler {
        Cycler {
            order: rng.permutation(n),
            pos: 0,
        }
    }

    fn take(&mut self, k: usize, rng: &mut RngStream) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k && !self.order.is_empty() {
            if self.pos == self.order.len() {
                rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// A training batch split by task: observations and optional labels.
struct Group {
    x: Matrix,
    labels: Option<Vec<usize>>,
}

/// Draws batches consisting of a chunk of the current task plus an equal
/// chunk from the pooled replay exemplars, grouped by task.
struct MixedBatcher<'a> {
    current: &'a TaskDataset,
    replay: &'a [TaskDataset],
    pool: Vec<(usize, usize)>,
    cur: Cycler,
    rep: Cycler,
    chunk: usize,
    steps_per_epoch: usize,
}

impl<'a> MixedBatcher<'a> {
    fn new(current: &'a TaskDataset, replay: &'a [TaskDataset], batch: usize, rng: &mut RngStream) -> Self {
        let pool: Vec<(usize, usize)> = replay
            .iter()
            .enumerate()
            .flat_map(|(k, d)| (0..d.len()).map(move |i| (k, i)))
            .collect();
        let chunk = if pool.is_empty() { batch } else { (batch / 2).max(1) };
        let steps_per_epoch = current.len().div_ceil(chunk);
        let cur = Cycler::new(current.len(), rng);
        let rep = Cycler::new(pool.len(), rng);
        MixedBatcher {
            current,
            replay,
            pool,
            cur,
            rep,
            chunk,
            steps_per_epoch,
        }
    }

    fn next(&mut self, rng: &mut RngStream) -> Vec<Group> {
        let idx = self.cur.take(self.chunk, rng);
        let mut groups = vec![group(self.current, &idx)];
        if !self.pool.is_empty() {
            let picks = self.rep.take(self.chunk, rng);
            for (k, d) in self.replay.iter().enumerate() {
                let rows: Vec<usize> = picks
                    .iter()
                    .map(|&p| self.pool[p])
                    .filter(|(kk, _)| *kk == k)
                    .map(|(_, i)| i)
                    .collect();
                if !rows.is_empty() {
                    groups.push(group(d, &rows));
                }
            }
        }
        groups
    }
}

fn group(d: &TaskDataset, rows: &[usize]) -> Group {
    Group {
        x: d.x.select_rows(rows),
        labels: d.labels.as_ref().map(|l| rows.iter().map(|&i| l[i]).collect()),
    }
}

fn diverged(stage: &str, task: usize, step: usize, e: IconError) -> IconError {
    match e {
        IconError::NumericDomain(detail) => IconError::Divergence {
            stage: stage.into(),
            task,
            step,
            detail,
        },
        IconError::Instability { magnitude, limit } => IconError::Divergence {
            stage: stage.into(),
            task,
            step,
            detail: format!("log-scale magnitude {magnitude} exceeds {limit}"),
        },
        other => other,
    }
}

fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn add_or_init(tape: &mut Tape, acc: Option<Var>, v: Var) -> Result<Var> {
    match acc {
        None => Ok(v),
        Some(a) => tape.add(a, v),
    }
}

/// Contrastive term on a group's latents, if classification is active.
#[allow(clippy::too_many_arguments)]
fn nce_term(
    tape: &mut Tape,
    cls: Option<&ClassContext>,
    head: Option<(Source, &ParamVector)>,
    z: Var,
    n: usize,
    labels: &Option<Vec<usize>>,
    cfg: &TrainConfig,
) -> Result<Option<Var>> {
    let (Some(cls), Some((src, params))) = (cls, head) else {
        return Ok(None);
    };
    if cfg.nce_weight == 0.0 {
        return Ok(None);
    }
    let Some(labels) = labels else {
        return contract("contrastive training needs labelled data");
    };
    let mu = tape.slice_cols(z, 0, n)?;
    let l = tape_nce(tape, src, params, mu, labels, &cls.unit_emb, cfg.tau)?;
    Ok(Some(tape.scale(l, cfg.nce_weight)))
}

/// Fits `pta` to tasks `1..=t` by maximum likelihood with per-task balanced
/// batches. Returns the per-epoch mean loss.
fn fit_pta(pta: &mut FlowParams, t: usize, train: &[TaskDataset], cfg: &TrainConfig, seed: u64) -> Result<(Vec<f64>, OptimizerState)> {
    let sets: Vec<&TaskDataset> = (1..=t).map(|i| find_task(train, i)).collect::<Result<_>>()?;
    let mut rng = RngStream::new(seed, stream_id(streams::BATCHES, (t as u64) << 4));
    let chunk = (cfg.batch_size / t).max(1);
    let mut cyclers: Vec<Cycler> = sets.iter().map(|d| Cycler::new(d.len(), &mut rng)).collect();
    let steps_per_epoch = sets.iter().map(|d| d.len()).max().unwrap_or(0).div_ceil(chunk);
    let total = steps_per_epoch * cfg.epochs_stage1;
    let mut opt = OptimizerState::new(pta.params.len());
    let mut trace = Vec::with_capacity(cfg.epochs_stage1);
    let mut step = 0;
    for _ in 0..cfg.epochs_stage1 {
        let mut losses = Vec::with_capacity(steps_per_epoch);
        for _ in 0..steps_per_epoch {
            let xs: Vec<Matrix> = sets
                .iter()
                .zip(cyclers.iter_mut())
                .map(|(d, c)| d.x.select_rows(&c.take(chunk, &mut rng)))
                .collect();
            let refs: Vec<&Matrix> = xs.iter().collect();
            let arch = &pta.arch;
            let params = &pta.params;
            let (value, mut grads) = value_and_grads(&[params], |tape, s| {
                crate::objectives::tape_task_average_nll(arch, tape, s[0], params, &refs)
            })
            .map_err(|e| diverged("stage1-pta", t, step, e))?;
            let lr = cosine_lr(step, total, cfg.lr0, cfg.lr_min);
            adamw_step(pta.params.values_mut(), &grads.swap_remove(0), &mut opt, lr, cfg.weight_decay)
                .map_err(|e| diverged("stage1-pta", t, step, e))?;
            losses.push(value);
            step += 1;
        }
        trace.push(mean_of(&losses));
    }
    Ok((trace, opt))
}

/// Fits the all-task flow (and head) on the current task mixed with replay.
#[allow(clippy::too_many_arguments)]
fn fit_ata(
    ata: &mut FlowParams,
    head: Option<&mut ParamVector>,
    current: &TaskDataset,
    replay: &[TaskDataset],
    cfg: &TrainConfig,
    cls: Option<&ClassContext>,
    seed: u64,
) -> Result<(Vec<f64>, Vec<OptimizerState>)> {
    let t = current.task_id;
    let mut rng = RngStream::new(seed, stream_id(streams::BATCHES, ((t as u64) << 4) | 1));
    let mut batcher = MixedBatcher::new(current, replay, cfg.batch_size, &mut rng);
    let total = batcher.steps_per_epoch * cfg.epochs_stage1;
    let mut head = head;
    let mut opt_flow = OptimizerState::new(ata.params.len());
    let mut opt_head = head.as_ref().map(|h| OptimizerState::new(h.len()));
    let mut trace = Vec::with_capacity(cfg.epochs_stage1);
    let mut step = 0;
    for _ in 0..cfg.epochs_stage1 {
        let mut losses = Vec::with_capacity(batcher.steps_per_epoch);
        for _ in 0..batcher.steps_per_epoch {
            let groups = batcher.next(&mut rng);
            let arch: &FlowArch = &ata.arch;
            let fp = &ata.params;
            let hp = head.as_deref();
            let mut params: Vec<&ParamVector> = vec![fp];
            params.extend(hp);
            let (value, grads) = value_and_grads(&params, |tape, s| {
                let mut acc = None;
                let mut nce = None;
                for g in &groups {
                    let xv = tape.constant(g.x.clone());
                    let z = arch.tape_inverse(tape, s[0], fp, xv)?;
                    let ll = tape.std_normal_log_density(z);
                    let m = tape.mean_all(ll)?;
                    acc = Some(add_or_init(tape, acc, m)?);
                    if let Some(v) = nce_term(tape, cls, hp.map(|h| (s[1], h)), z, arch.n, &g.labels, cfg)? {
                        nce = Some(add_or_init(tape, nce, v)?);
                    }
                }
                let nll = tape.scale(acc.unwrap(), -1.0 / groups.len() as f64);
                match nce {
                    None => Ok(nll),
                    Some(v) => tape.add(nll, v),
                }
            })
            .map_err(|e| diverged("stage1-ata", t, step, e))?;
            let lr = cosine_lr(step, total, cfg.lr0, cfg.lr_min);
            adamw_step(ata.params.values_mut(), &grads[0], &mut opt_flow, lr, cfg.weight_decay)
                .map_err(|e| diverged("stage1-ata", t, step, e))?;
            if let (Some(h), Some(o)) = (head.as_deref_mut(), opt_head.as_mut()) {
                adamw_step(h.values_mut(), &grads[1], o, lr, cfg.weight_decay)
                    .map_err(|e| diverged("stage1-ata", t, step, e))?;
            }
            losses.push(value);
            step += 1;
        }
        trace.push(mean_of(&losses));
    }
    let mut opts = vec![opt_flow];
    opts.extend(opt_head);
    Ok((trace, opts))
}

fn fresh_flow(k: usize, flow: &FlowConfig, seed: u64, index: u64) -> Result<FlowParams> {
    let n = flow.latent_dim.unwrap_or(k);
    init_flow(k, n, flow.n_blocks, flow.width, &mut RngStream::new(seed, stream_id(streams::FLOW_INIT, index)))
}

/// Stage 1 for task `t`: creates `pta[t]` if needed and fits both flows.
pub fn train_stage1(
    state: &mut RunState,
    t: usize,
    train: &[TaskDataset],
    cfg: &TrainConfig,
    flow: &FlowConfig,
    cls: Option<&ClassContext>,
    seed: u64,
) -> Result<()> {
    let current = find_task(train, t)?;
    if state.bank.pta.len() + 1 < t {
        return contract(format!("stage 1 of task {t} needs models for tasks 1..{}", t - 1));
    }
    if state.bank.pta.len() < t {
        let init = match (cfg.warm_start, t) {
            (true, 2..) => state.bank.pta(t - 1)?.clone(),
            // The first partial-task flow shares the all-task flow's
            // initialisation so both start in one latent frame.
            (_, 1) => fresh_flow(current.x.cols(), flow, seed, 0)?,
            _ => fresh_flow(current.x.cols(), flow, seed, t as u64)?,
        };
        state.bank.pta.push(init);
    }
    let replay = state.replay.datasets(train);
    let ModelBank { ata, pta } = &mut state.bank;
    let pta_t = &mut pta[t - 1];
    let head = state.head.as_mut();
    let (pta_res, ata_res) = rayon::join(
        || fit_pta(pta_t, t, train, cfg, seed),
        || fit_ata(ata, head, current, &replay, cfg, cls, seed),
    );
    let (pta_trace, pta_opt) = pta_res?;
    let (ata_trace, ata_opts) = ata_res?;
    let h = state.history_mut(t);
    h.stage1_pta = pta_trace;
    h.stage1_ata = ata_trace;
    state.optimizers = vec![("pta".into(), pta_opt), ("ata".into(), ata_opts[0].clone())];
    if let Some(o) = ata_opts.get(1) {
        state.optimizers.push(("head".into(), o.clone()));
    }
    Ok(())
}

/// Task-averaged posterior KL and matched latent correlation between the
/// all-task flow and `pta` over `sets`.
pub fn alignment_diagnostics(ata: &FlowParams, pta: &FlowParams, sets: &[&TaskDataset]) -> Result<(f64, f64)> {
    let mut kl = 0.0;
    let mut za = Vec::new();
    let mut zp = Vec::new();
    for d in sets {
        kl += kl_align_task(ata, pta, &d.x)?;
        za.push(ata.posterior(&d.x)?.mu);
        zp.push(pta.posterior(&d.x)?.mu);
    }
    let za = Matrix::vcat(&za.iter().collect::<Vec<_>>())?;
    let zp = Matrix::vcat(&zp.iter().collect::<Vec<_>>())?;
    let align = alignment_report(&zp, &za)?.mean;
    Ok((kl / sets.len() as f64, align))
}

/// Stage 2 for task `t`: joint KL descent for the all-task flow and `pta[t]`
/// on the current task plus replay, with the contrastive term on the
/// all-task branch when active.
pub fn train_stage2(
    state: &mut RunState,
    t: usize,
    train: &[TaskDataset],
    cfg: &TrainConfig,
    cls: Option<&ClassContext>,
    seed: u64,
) -> Result<()> {
    let current = find_task(train, t)?;
    state.bank.pta(t)?;
    let replay = state.replay.datasets(train);
    let mut sets: Vec<&TaskDataset> = vec![current];
    sets.extend(replay.iter());
    let (kl_entry, align_entry) = alignment_diagnostics(&state.bank.ata, state.bank.pta(t)?, &sets)?;

    let mut rng = RngStream::new(seed, stream_id(streams::BATCHES, ((t as u64) << 4) | 2));
    let mut batcher = MixedBatcher::new(current, &replay, cfg.batch_size, &mut rng);
    let total = batcher.steps_per_epoch * cfg.epochs_stage2;
    let ModelBank { ata, pta } = &mut state.bank;
    let pta_t = &mut pta[t - 1];
    let mut opt_ata = OptimizerState::new(ata.params.len());
    let mut opt_pta = OptimizerState::new(pta_t.params.len());
    let mut opt_head = state.head.as_ref().map(|h| OptimizerState::new(h.len()));
    let mut trace = Vec::with_capacity(cfg.epochs_stage2);
    let mut step = 0;
    for _ in 0..cfg.epochs_stage2 {
        let mut losses = Vec::with_capacity(batcher.steps_per_epoch);
        for _ in 0..batcher.steps_per_epoch {
            let groups = batcher.next(&mut rng);
            let (aa, ap) = (&ata.arch, &ata.params);
            let (pa, pp) = (&pta_t.arch, &pta_t.params);
            let hp = state.head.as_ref();
            let mut params: Vec<&ParamVector> = vec![ap, pp];
            params.extend(hp);
            let (value, grads) = value_and_grads(&params, |tape, s| {
                let mut kl = None;
                let mut nce = None;
                for g in &groups {
                    let xv = tape.constant(g.x.clone());
                    let za = aa.tape_inverse(tape, s[0], ap, xv)?;
                    let zp = pa.tape_inverse(tape, s[1], pp, xv)?;
                    let mu_a = tape.slice_cols(za, 0, aa.n)?;
                    let mu_p = tape.slice_cols(zp, 0, pa.n)?;
                    let ls_a = tape.param(s[0], ap, "log_sigma")?;
                    let ls_p = tape.param(s[1], pp, "log_sigma")?;
                    let v = tape_kl_posteriors(tape, mu_a, ls_a, mu_p, ls_p)?;
                    kl = Some(add_or_init(tape, kl, v)?);
                    if let Some(v) = nce_term(tape, cls, hp.map(|h| (s[2], h)), za, aa.n, &g.labels, cfg)? {
                        nce = Some(add_or_init(tape, nce, v)?);
                    }
                }
                let kl = tape.scale(kl.unwrap(), 1.0 / groups.len() as f64);
                match nce {
                    None => Ok(kl),
                    Some(v) => tape.add(kl, v),
                }
            })
            .map_err(|e| diverged("stage2", t, step, e))?;
            let lr = cosine_lr(step, total, cfg.lr_stage2.unwrap_or(cfg.lr0), cfg.lr_min);
            let wd = cfg.weight_decay;
            adamw_step(ata.params.values_mut(), &grads[0], &mut opt_ata, lr, wd)
                .map_err(|e| diverged("stage2", t, step, e))?;
            adamw_step(pta_t.params.values_mut(), &grads[1], &mut opt_pta, lr, wd)
                .map_err(|e| diverged("stage2", t, step, e))?;
            if let (Some(h), Some(o)) = (state.head.as_mut(), opt_head.as_mut()) {
                adamw_step(h.values_mut(), &grads[2], o, lr, wd).map_err(|e| diverged("stage2", t, step, e))?;
            }
            losses.push(value);
            step += 1;
        }
        trace.push(mean_of(&losses));
    }
    let (kl_exit, align_exit) = alignment_diagnostics(&state.bank.ata, state.bank.pta(t)?, &sets)?;
    log::info!("task {t} stage 2: KL {kl_entry:.4} -> {kl_exit:.4}, alignment {align_entry:.4} -> {align_exit:.4}");
    let h = state.history_mut(t);
    h.stage2 = trace;
    h.kl_entry = Some(kl_entry);
    h.kl_exit = Some(kl_exit);
    h.alignment_entry = Some(align_entry);
    h.alignment_exit = Some(align_exit);
    state.optimizers = vec![("ata".into(), opt_ata), ("pta".into(), opt_pta)];
    if let Some(o) = opt_head {
        state.optimizers.push(("head".into(), o));
    }
    Ok(())
}

/// Fresh run state for observations of dimension `k`.
pub fn init_state(k: usize, flow: &FlowConfig, cfg: &TrainConfig, cls: Option<&ClassContext>, seed: u64) -> Result<RunState> {
    let ata = fresh_flow(k, flow, seed, 0)?;
    let head = match cls {
        None => None,
        Some(c) => Some(init_head(
            ata.n(),
            c.unit_emb.cols(),
            &mut RngStream::new(seed, stream_id(streams::HEAD_INIT, 0)),
        )?),
    };
    Ok(RunState {
        bank: ModelBank::new(ata),
        head,
        replay: ReplayBuffer::new(cfg.replay_size),
        history: Vec::new(),
        optimizers: Vec::new(),
    })
}

/// Trains on tasks `1..=T` in order (task ids must be `1..=T`).
pub fn run_sequence(
    train: &[TaskDataset],
    cfg: &TrainConfig,
    flow: &FlowConfig,
    cls: Option<&ClassContext>,
    seed: u64,
) -> Result<RunState> {
    cfg.validate()?;
    let Some(first) = train.first() else {
        return contract("no training tasks");
    };
    for (i, d) in train.iter().enumerate() {
        if d.task_id != i + 1 {
            return contract("training tasks must be ordered with ids 1..=T");
        }
        if d.x.cols() != first.x.cols() {
            return contract("all tasks must share the observation dimension");
        }
    }
    let mut state = init_state(first.x.cols(), flow, cfg, cls, seed)?;
    let last = train.len();
    for d in train {
        let t = d.task_id;
        log::info!("task {t}: stage 1");
        train_stage1(&mut state, t, train, cfg, flow, cls, seed)?;
        if cfg.kl && cfg.stage2_schedule == Stage2Schedule::PerTask {
            train_stage2(&mut state, t, train, cfg, cls, seed)?;
        }
        if t < last || cfg.stage2_schedule == Stage2Schedule::PerTask {
            state
                .replay
                .add_task(d, &mut RngStream::new(seed, stream_id(streams::REPLAY, t as u64)));
        }
    }
    if cfg.kl && cfg.stage2_schedule == Stage2Schedule::AtEnd {
        train_stage2(&mut state, last, train, cfg, cls, seed)?;
        state
            .replay
            .add_task(&train[last - 1], &mut RngStream::new(seed, stream_id(streams::REPLAY, last as u64)));
    }
    Ok(state)
}

/// File names inside a checkpoint directory.
pub const ATA_FILE: &str = "ata.bin";
pub const HEAD_FILE: &str = "head.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.json";
pub const RUN_MANIFEST: &str = "run.json";

pub fn pta_file(t: usize) -> String {
    format!("pta{t}.bin")
}

/// Run manifest stored alongside the model files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub seed: u64,
    pub train: TrainConfig,
    pub flow: FlowConfig,
    pub tasks: usize,
    pub history: Vec<TaskHistory>,
    pub replay: ReplayBuffer,
}

fn write_params(p: &ParamVector, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(8 * p.len() + 8);
    buf.extend_from_slice(&(p.len() as u64).to_le_bytes());
    for v in p.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

fn read_params_into(p: &mut ParamVector, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path)?;
    if bytes.len() != 8 + 8 * p.len() || u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize != p.len() {
        return Err(IconError::Ingestion {
            record: path.display().to_string(),
            message: "parameter count does not match the expected layout".into(),
        });
    }
    for (i, v) in p.values_mut().iter_mut().enumerate() {
        *v = f64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap());
    }
    p.ensure_finite()
}

/// Writes one model file per flow, the head (if any), optimizer state and
/// the run manifest.
pub fn save_run(state: &RunState, cfg: &TrainConfig, flow: &FlowConfig, seed: u64, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_checkpoint(&state.bank.ata, &dir.join(ATA_FILE))?;
    for (i, p) in state.bank.pta.iter().enumerate() {
        write_checkpoint(p, &dir.join(pta_file(i + 1)))?;
    }
    if let Some(h) = &state.head {
        write_params(h, &dir.join(HEAD_FILE))?;
    }
    std::fs::write(dir.join(OPTIMIZER_FILE), serde_json::to_string(&state.optimizers)? + "\n")?;
    let manifest = RunManifest {
        seed,
        train: cfg.clone(),
        flow: flow.clone(),
        tasks: state.bank.pta.len(),
        history: state.history.clone(),
        replay: state.replay.clone(),
    };
    std::fs::write(dir.join(RUN_MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

/// Loads the model bank (and head, when `head_shape` is given as
/// `(latent_dim, emb_dim)`) plus the run manifest.
pub fn load_run(dir: &Path, head_shape: Option<(usize, usize)>) -> Result<(ModelBank, Option<ParamVector>, RunManifest)> {
    let manifest: RunManifest = serde_json::from_str(&std::fs::read_to_string(dir.join(RUN_MANIFEST))?)?;
    let ata = read_checkpoint(&dir.join(ATA_FILE))?;
    let pta = (1..=manifest.tasks)
        .map(|t| read_checkpoint(&dir.join(pta_file(t))))
        .collect::<Result<Vec<_>>>()?;
    let head = match head_shape {
        None => None,
        Some((n, d)) => {
            let mut h = init_head(n, d, &mut RngStream::new(0, 0))?;
            read_params_into(&mut h, &dir.join(HEAD_FILE))?;
            Some(h)
        }
    };
    Ok((ModelBank { ata, pta }, head, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Split;

    fn toy_tasks(t: usize, n: usize) -> Vec<TaskDataset> {
        let mut rng = RngStream::new(99, 0);
        (1..=t)
            .map(|i| {
                let x = rng.normal_matrix(n, 4).map(|v| 0.8 * v + i as f64 * 0.5);
                TaskDataset::new(i, x, None, None, Split::Train).unwrap()
            })
            .collect()
    }

    fn small() -> (TrainConfig, FlowConfig) {
        (
            TrainConfig {
                epochs_stage1: 2,
                epochs_stage2: 2,
                batch_size: 32,
                replay_size: 40,
                ..TrainConfig::default()
            },
            FlowConfig {
                n_blocks: 2,
                width: 8,
                latent_dim: Some(2),
            },
        )
    }

    #[test]
    fn zero_epochs_leave_models_at_initialisation() {
        let (mut cfg, flow) = small();
        cfg.epochs_stage1 = 0;
        cfg.epochs_stage2 = 0;
        let data = toy_tasks(2, 50);
        let run = run_sequence(&data, &cfg, &flow, None, 5).unwrap();
        let init = init_state(4, &flow, &cfg, None, 5).unwrap();
        assert_eq!(run.bank.ata, init.bank.ata);
        assert_eq!(run.bank.pta[0], init.bank.ata);
        assert_eq!(run.bank.pta[1], run.bank.pta[0]);
    }

    #[test]
    fn runs_are_deterministic() {
        let (cfg, flow) = small();
        let data = toy_tasks(2, 60);
        let a = run_sequence(&data, &cfg, &flow, None, 7).unwrap();
        let b = run_sequence(&data, &cfg, &flow, None, 7).unwrap();
        assert_eq!(a.bank, b.bank);
        assert_eq!(a.history, b.history);
        assert_eq!(a.replay, b.replay);
        let c = run_sequence(&data, &cfg, &flow, None, 8).unwrap();
        assert_ne!(a.bank, c.bank);
    }

    #[test]
    fn stage2_lowers_kl() {
        let (mut cfg, flow) = small();
        cfg.epochs_stage1 = 3;
        cfg.epochs_stage2 = 5;
        let data = toy_tasks(2, 80);
        let run = run_sequence(&data, &cfg, &flow, None, 3).unwrap();
        for h in &run.history {
            assert!(h.kl_exit.unwrap() < h.kl_entry.unwrap(), "{h:?}");
        }
    }

    #[test]
    fn no_kl_skips_stage2() {
        let (mut cfg, flow) = small();
        cfg.kl = false;
        let run = run_sequence(&toy_tasks(2, 40), &cfg, &flow, None, 1).unwrap();
        assert!(run.history.iter().all(|h| h.kl_entry.is_none() && h.stage2.is_empty()));
    }

    #[test]
    fn checkpoint_directory_round_trip() {
        let (cfg, flow) = small();
        let run = run_sequence(&toy_tasks(2, 40), &cfg, &flow, None, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_run(&run, &cfg, &flow, 2, dir.path()).unwrap();
        let (bank, head, manifest) = load_run(dir.path(), None).unwrap();
        assert_eq!(bank, run.bank);
        assert!(head.is_none());
        assert_eq!(manifest.history, run.history);
    }
}
