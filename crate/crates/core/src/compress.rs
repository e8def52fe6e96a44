//! The safety-driven self-compression training loop: composite loss
//! (task + L1 + size penalty + preservation term), adaptive-moment optimizer
//! steps on weights and unfrozen quantization parameters, structural pruning
//! of zeroed groups at the evaluation cadence, and precision restoration when
//! preservation performance drops below threshold.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{evaluate_on, Model, Phase, SlotKind, UpdateMask};
use crate::preserve::{build_preservation_set, preservation_metrics, PreservationSet};
use crate::tape::Tape;
use crate::tensor::Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Ordinary training, no quantization.
    Baseline,
    /// Size penalty and pruning active, no preservation guard or restore.
    Unsafe,
    /// Full loop: preservation set, threshold evaluations, restoration.
    Safe,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Unsafe => "unsafe",
            Mode::Safe => "safe",
        }
    }

    pub fn quantized(&self) -> bool {
        !matches!(self, Mode::Baseline)
    }
}

fn default_alpha() -> f32 {
    1e-5
}
fn default_lambda() -> f32 {
    1.0
}
fn default_lr() -> f32 {
    1e-3
}
fn default_batch() -> usize {
    32
}
fn default_epochs() -> usize {
    3
}
fn default_eval_every() -> u64 {
    100
}
fn default_freeze() -> u64 {
    200
}
fn default_b0() -> f32 {
    8.0
}
fn default_rho() -> f32 {
    0.10
}
fn default_quotas() -> (f32, f32, f32) {
    (0.4, 0.3, 0.3)
}
fn default_pres_batch() -> usize {
    64
}

/// All loss weights, thresholds, cadences, and initial quantization settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CompressionConfig {
    /// L1 weight.
    pub alpha: f32,
    /// Size-penalty weight; null means auto-scale once at step 0 so that
    /// gamma * Q0 is 10% of the initial task loss.
    pub gamma: Option<f32>,
    /// Preservation-loss weight.
    pub lambda: f32,
    pub learning_rate: f32,
    /// Learning rate for (b, e); null means learning_rate.
    pub quant_lr: Option<f32>,
    pub batch_size: usize,
    /// Total epochs including the one warm-up epoch.
    pub epochs: usize,
    /// Evaluation cadence E, in post-warm-up steps.
    pub eval_every: u64,
    /// Restore threshold: accuracy points (classifier) or relative loss (LM).
    /// Null means 1.0 points / 0.05 relative.
    pub restore_threshold: Option<f32>,
    /// Freeze duration F after a restore, in steps.
    pub freeze_steps: u64,
    /// Initial bit depth.
    pub b0: f32,
    pub seed: u64,
    /// Preservation-set fraction rho.
    pub pset_fraction: f32,
    /// Saliency/uncertainty/diversity quotas.
    pub quotas: (f32, f32, f32),
    /// Sub-batch of the preservation set used inside the composite loss.
    pub pres_batch: usize,
    /// Test hook: corrupt the preservation evaluation once at the first
    /// evaluation at or after this step.
    pub corrupt_pset_at_step: Option<u64>,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        CompressionConfig {
            alpha: default_alpha(),
            gamma: None,
            lambda: default_lambda(),
            learning_rate: default_lr(),
            quant_lr: None,
            batch_size: default_batch(),
            epochs: default_epochs(),
            eval_every: default_eval_every(),
            restore_threshold: None,
            freeze_steps: default_freeze(),
            b0: default_b0(),
            seed: 0,
            pset_fraction: default_rho(),
            quotas: default_quotas(),
            pres_batch: default_pres_batch(),
            corrupt_pset_at_step: None,
        }
    }
}

impl CompressionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.lambda < 0.0 || self.gamma.map_or(false, |g| g < 0.0) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.eval_every < 1 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be >= 1".into()));
        }
        if !(self.pset_fraction > 0.0 && self.pset_fraction <= 1.0) {
            return Err(Error::Config("pset_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }

    fn threshold_for(&self, classifier: bool) -> f32 {
        self.restore_threshold
            .unwrap_or(if classifier { 1.0 } else { 0.05 })
    }
}

/// One row per evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub train_loss: f32,
    pub l1_term: f32,
    pub size_term: f32,
    pub preservation_loss: f32,
    pub test_metric: f64,
    pub q_bits: f64,
    pub model_bytes: f64,
    pub pruned_count: usize,
    pub restored_count: usize,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str =
    "step,train_loss,l1_term,size_term,preservation_loss,test_metric,q_bits,model_bytes,pruned_count,restored_count,wall_ms";

impl MetricsRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.train_loss,
            self.l1_term,
            self.size_term,
            self.preservation_loss,
            self.test_metric,
            self.q_bits,
            self.model_bytes,
            self.pruned_count,
            self.restored_count,
            self.wall_ms
        )
    }
}

pub fn metrics_to_csv(rows: &[MetricsRecord]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv_row());
        s.push('\n');
    }
    s
}

/// Per-group (b, e) values at the last passing evaluation.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub bits: Vec<Vec<f32>>,
    pub exps: Vec<Vec<f32>>,
    pub pres_accuracy: f64,
    pub pres_loss: f64,
    pub step: u64,
}

#[derive(Debug, Clone)]
pub enum Event {
    PsetBuilt {
        step: u64,
        size: usize,
    },
    Prune {
        step: u64,
        layer: usize,
        group: usize,
    },
    /// Bit depths restored to snapshot values (or b0 when no snapshot exists).
    Restore {
        step: u64,
        groups: Vec<RestoredGroup>,
        to_initial: bool,
    },
}

#[derive(Debug, Clone)]
pub struct RestoredGroup {
    pub layer: usize,
    pub group: usize,
    pub old_bits: f32,
    pub new_bits: f32,
    pub frozen_until: u64,
}

/// Per-batch values of the four composite-loss terms.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub task: f32,
    pub l1_term: f32,
    pub size_term: f32,
    pub preservation_term: f32,
    pub total: f32,
}

// ── Optimizer ───────────────────────────────────────────────────────────

struct Adam {
    lr: f32,
    quant_lr: f32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

impl Adam {
    fn new(lr: f32, quant_lr: f32) -> Self {
        Adam {
            lr,
            quant_lr,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    fn step(
        &mut self,
        slots: &mut [crate::models::SlotMut<'_>],
        grads: &[Option<Vec<f32>>],
        masks: &[UpdateMask],
    ) {
        if self.m.is_empty() {
            for s in slots.iter() {
                self.m.push(vec![0.0; s.tensor.numel()]);
                self.v.push(vec![0.0; s.tensor.numel()]);
            }
        }
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (i, slot) in slots.iter_mut().enumerate() {
            let g = match &grads[i] {
                Some(g) => g,
                None => continue,
            };
            let lr = match slot.kind {
                SlotKind::QuantBits { .. } | SlotKind::QuantExps { .. } => self.quant_lr,
                _ => self.lr,
            };
            let allowed = |e: usize| match &masks[i] {
                UpdateMask::Free => true,
                UpdateMask::Mask(m) => m[e],
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for e in 0..g.len() {
                if !allowed(e) {
                    continue;
                }
                m[e] = BETA1 * m[e] + (1.0 - BETA1) * g[e];
                v[e] = BETA2 * v[e] + (1.0 - BETA2) * g[e] * g[e];
                let mhat = m[e] / bc1;
                let vhat = v[e] / bc2;
                slot.tensor.data[e] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
}

// ── Trainer ─────────────────────────────────────────────────────────────

pub struct Trainer {
    pub model: Model,
    pub train: Dataset,
    pub test: Dataset,
    pub pset: Option<PreservationSet>,
    pub cfg: CompressionConfig,
    pub mode: Mode,
    opt: Adam,
    step: u64,
    steps_per_epoch: u64,
    total_steps: u64,
    warmup_steps: u64,
    order: Vec<usize>,
    gamma_eff: Option<f32>,
    snapshot: Option<Snapshot>,
    best_acc: Option<f64>,
    best_loss: Option<f64>,
    pub metrics: Vec<MetricsRecord>,
    pub events: Vec<Event>,
    pub last_breakdown: LossBreakdown,
    data_rng: Rng,
    pres_rng: Rng,
    started: Instant,
    fault_fired: bool,
    finished: bool,
}

fn epoch_batches(n: usize, batch: usize) -> u64 {
    let full = n / batch;
    let rem = n % batch;
    // batches of size 1 are dropped (train-mode batchnorm needs >= 2)
    (full + usize::from(rem > 1)) as u64
}

impl Trainer {
    pub fn new(
        model: Model,
        train: Dataset,
        test: Dataset,
        mode: Mode,
        cfg: CompressionConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() || test.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = train.len();
        let steps_per_epoch = epoch_batches(n, cfg.batch_size);
        if steps_per_epoch == 0 {
            return Err(Error::Config(
                "batch_size leaves no usable training batches".into(),
            ));
        }
        let total_steps = steps_per_epoch * cfg.epochs as u64;
        let mut data_rng = Rng::new(cfg.seed ^ 0xDA7A_5EED);
        let mut order: Vec<usize> = (0..n).collect();
        data_rng.shuffle(&mut order);
        Ok(Trainer {
            pres_rng: Rng::new(cfg.seed ^ 0x9E5E_7BA7),
            opt: Adam::new(cfg.learning_rate, cfg.quant_lr.unwrap_or(cfg.learning_rate)),
            warmup_steps: steps_per_epoch.min(total_steps),
            model,
            train,
            test,
            pset: None,
            mode,
            cfg,
            step: 0,
            steps_per_epoch,
            total_steps,
            order,
            gamma_eff: None,
            snapshot: None,
            best_acc: None,
            best_loss: None,
            metrics: Vec::new(),
            events: Vec::new(),
            last_breakdown: LossBreakdown::default(),
            data_rng,
            started: Instant::now(),
            fault_fired: false,
            finished: false,
        })
    }

    /// Allows reusing a preservation set built elsewhere (e.g. loaded from a
    /// file written by a previous run).
    pub fn set_pset(&mut self, pset: PreservationSet) {
        self.pset = Some(pset);
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn done(&self) -> bool {
        self.step >= self.total_steps
    }

    pub fn gamma_effective(&self) -> Option<f32> {
        self.gamma_eff
    }

    pub fn snapshot(&self) -> Option<&Snapshot> {
        self.snapshot.as_ref()
    }

    fn batch_ids(&mut self) -> Vec<usize> {
        let n = self.train.len();
        let batch = self.cfg.batch_size;
        let in_epoch = (self.step % self.steps_per_epoch) as usize;
        if in_epoch == 0 && self.step > 0 {
            self.data_rng.shuffle(&mut self.order);
        }
        let start = in_epoch * batch;
        let end = (start + batch).min(n);
        self.order[start..end].to_vec()
    }

    /// One mini-batch step, with cadence evaluation folded in.
    pub fn step(&mut self) -> Result<()> {
        if self.done() {
            return Ok(());
        }
        let quantized = self.mode.quantized();
        let ids = self.batch_ids();

        let mut tape = Tape::new();
        let fw = self
            .model
            .forward_batch(&mut tape, &self.train, &ids, Phase::Train, quantized)
            .map_err(|e| self.diverged(e))?;

        // L1 over all weight tensors.
        let l1_nodes: Vec<_> = fw
            .weight_leafs
            .iter()
            .map(|&w| tape.l1(w))
            .collect::<Result<_>>()
            .map_err(|e| self.diverged(e))?;
        let ones = vec![1.0f32; l1_nodes.len()];
        let l1_sum = tape.lin_comb(&l1_nodes, &ones).map_err(|e| self.diverged(e))?;

        let mut loss_parts = vec![fw.task_loss, l1_sum];
        let mut coeffs = vec![1.0f32, self.cfg.alpha];

        let mut size_term_val = 0.0f32;
        if quantized {
            // z_l nodes from the current size model, then Q as their mean.
            let sm = self.model.size_model();
            let mut z_nodes = Vec::new();
            for (l, desc) in sm.layers.iter().enumerate() {
                let qp = self.model.quant(l);
                let coeffs_l = desc.penalty_coeffs(&qp.live);
                let z = tape
                    .size_penalty(fw.quant_bits_nodes[l], &coeffs_l)
                    .map_err(|e| self.diverged(e))?;
                z_nodes.push(z);
            }
            let inv_n = vec![1.0 / z_nodes.len() as f32; z_nodes.len()];
            let q_node = tape.lin_comb(&z_nodes, &inv_n).map_err(|e| self.diverged(e))?;
            let gamma = match self.gamma_eff {
                Some(g) => g,
                None => {
                    let g = match self.cfg.gamma {
                        Some(g) => g,
                        None => {
                            // auto-scale once: gamma * Q0 = 10% of initial task loss
                            let q0 = tape.scalar_value(q_node);
                            let task0 = tape.scalar_value(fw.task_loss);
                            if q0 > 0.0 {
                                0.1 * task0 / q0
                            } else {
                                0.0
                            }
                        }
                    };
                    self.gamma_eff = Some(g);
                    g
                }
            };
            size_term_val = gamma * tape.scalar_value(q_node);
            loss_parts.push(q_node);
            coeffs.push(gamma);
        }

        let mut pres_term_val = 0.0f32;
        if self.mode == Mode::Safe {
            if let Some(pset) = &self.pset {
                let pids = pset.indices();
                let take = self.cfg.pres_batch.min(pids.len());
                let picks = self.pres_rng.choose_distinct(pids.len(), take);
                let sub: Vec<usize> = picks.into_iter().map(|p| pids[p]).collect();
                let pres_fw = self
                    .model
                    .forward_batch(&mut tape, &self.train, &sub, Phase::Eval, quantized)
                    .map_err(|e| self.diverged(e))?;
                pres_term_val = self.cfg.lambda * tape.scalar_value(pres_fw.task_loss);
                loss_parts.push(pres_fw.task_loss);
                coeffs.push(self.cfg.lambda);
            }
        }

        let total = tape.lin_comb(&loss_parts, &coeffs).map_err(|e| self.diverged(e))?;
        self.last_breakdown = LossBreakdown {
            task: tape.scalar_value(fw.task_loss),
            l1_term: self.cfg.alpha * tape.scalar_value(l1_sum),
            size_term: size_term_val,
            preservation_term: pres_term_val,
            total: tape.scalar_value(total),
        };

        let grads = tape.grad(total).map_err(|e| self.diverged(e))?;
        let grad_vecs: Vec<Option<Vec<f32>>> = fw
            .bindings
            .iter()
            .map(|&id| grads.get(id).map(|g| g.to_vec()))
            .collect();
        let masks = self.model.update_masks(self.step);
        {
            let mut slots = self.model.slots_mut();
            debug_assert_eq!(slots.len(), grad_vecs.len());
            self.opt.step(&mut slots, &grad_vecs, &masks);
        }
        for l in 0..self.model.quant_layers() {
            self.model.quant_mut(l).clamp();
        }
        self.model.apply_bn_updates(&fw.bn_updates);

        self.step += 1;

        if self.step == self.warmup_steps {
            self.model.set_trained(true);
            if self.mode == Mode::Safe && self.pset.is_none() {
                let pset = build_preservation_set(
                    &self.model,
                    &self.train,
                    self.cfg.pset_fraction,
                    self.cfg.quotas,
                    self.cfg.seed,
                    quantized,
                )?;
                self.events.push(Event::PsetBuilt {
                    step: self.step,
                    size: pset.len(),
                });
                self.pset = Some(pset);
            }
        }

        let past_warmup = self.step > self.warmup_steps
            || (self.step == self.warmup_steps && self.warmup_steps == self.total_steps);
        let at_cadence =
            self.step > self.warmup_steps && (self.step - self.warmup_steps) % self.cfg.eval_every == 0;
        let at_end = self.step == self.total_steps;
        if past_warmup && (at_cadence || at_end) {
            self.run_evaluation()?;
        }
        Ok(())
    }

    fn diverged(&mut self, e: Error) -> Error {
        self.finished = true;
        match e {
            Error::NonFinite { op } => Error::Diverged {
                step: self.step,
                detail: format!("non-finite value in {}", op),
            },
            other => other,
        }
    }

    /// Full evaluation block: preservation guard, pruning, snapshot/restore,
    /// metrics row.
    fn run_evaluation(&mut self) -> Result<()> {
        let quantized = self.mode.quantized();
        let classifier = self.model.is_classifier();

        // Preservation metrics, with the optional one-shot fault injection.
        let pres = if self.mode == Mode::Safe {
            let pset = self.pset.as_ref().expect("pset built at warm-up end");
            let fault_now = !self.fault_fired
                && self
                    .cfg
                    .corrupt_pset_at_step
                    .map_or(false, |k| self.step >= k);
            let m = if fault_now {
                self.fault_fired = true;
                let corrupted = corrupt_labels(&self.train);
                preservation_metrics(&self.model, &corrupted, pset, quantized)?
            } else {
                preservation_metrics(&self.model, &self.train, pset, quantized)?
            };
            Some(m)
        } else {
            None
        };

        let test = evaluate_on(&self.model, &self.test, &all_ids(&self.test), quantized)?;
        let test_metric = if classifier {
            test.accuracy_pct
        } else {
            test.loss_nats
        };

        let prune_report = if quantized {
            self.prune_zeroed()
        } else {
            Vec::new()
        };

        let mut restored_count = 0usize;
        if let Some(p) = pres {
            let threshold = self.cfg.threshold_for(classifier);
            let failing = if classifier {
                self.best_acc
                    .map_or(false, |best| p.accuracy_pct < best - threshold as f64)
            } else {
                self.best_loss
                    .map_or(false, |best| p.loss_nats > best * (1.0 + threshold as f64))
            };
            if failing {
                restored_count = self.restore_precision();
            } else {
                self.snapshot = Some(Snapshot {
                    bits: (0..self.model.quant_layers())
                        .map(|l| self.model.quant(l).bits.data.clone())
                        .collect(),
                    exps: (0..self.model.quant_layers())
                        .map(|l| self.model.quant(l).exps.data.clone())
                        .collect(),
                    pres_accuracy: p.accuracy_pct,
                    pres_loss: p.loss_nats,
                    step: self.step,
                });
                self.best_acc = Some(self.best_acc.map_or(p.accuracy_pct, |b| b.max(p.accuracy_pct)));
                self.best_loss = Some(self.best_loss.map_or(p.loss_nats, |b| b.min(p.loss_nats)));
            }
        }

        self.metrics.push(MetricsRecord {
            step: self.step,
            train_loss: self.last_breakdown.task,
            l1_term: self.last_breakdown.l1_term,
            size_term: self.last_breakdown.size_term,
            preservation_loss: pres.map_or(f32::NAN, |p| p.loss_nats as f32),
            test_metric,
            q_bits: self.model.average_q(),
            model_bytes: self.model.report_bytes(quantized),
            pruned_count: prune_report.len(),
            restored_count,
            wall_ms: self.started.elapsed().as_millis() as u64,
        });
        Ok(())
    }

    /// Marks dead every group whose quantized weights are all exactly zero
    /// (or whose b <= 0), masking its downstream consumers. A prune that
    /// would empty a layer is rejected: the lowest-index candidate stays
    /// alive with its bit depth restored to 1.
    pub fn prune_zeroed(&mut self) -> Vec<(usize, usize)> {
        let mut report = Vec::new();
        for l in 0..self.model.quant_layers() {
            let live: Vec<usize> = (0..self.model.quant(l).groups())
                .filter(|&g| self.model.quant(l).live[g])
                .collect();
            let mut candidates: Vec<usize> = live
                .iter()
                .copied()
                .filter(|&g| self.model.group_quantizes_to_zero(l, g))
                .collect();
            if candidates.len() == live.len() && !candidates.is_empty() {
                // keep one group alive with b restored to 1
                let survivor = candidates.remove(0);
                self.model.quant_mut(l).bits.data[survivor] = 1.0;
            }
            for g in candidates {
                self.model.prune_group(l, g);
                self.events.push(Event::Prune {
                    step: self.step,
                    layer: l,
                    group: g,
                });
                report.push((l, g));
            }
        }
        report
    }

    /// Restores bit depths of live groups that dropped below the snapshot and
    /// freezes their (b, e) for the configured number of steps. Without a
    /// snapshot every live group returns to b0.
    pub fn restore_precision(&mut self) -> usize {
        let frozen_until = self.step + self.cfg.freeze_steps;
        let mut groups = Vec::new();
        let to_initial = self.snapshot.is_none();
        for l in 0..self.model.quant_layers() {
            let target: Vec<f32> = match &self.snapshot {
                Some(s) => s.bits[l].clone(),
                None => vec![self.cfg.b0; self.model.quant(l).groups()],
            };
            let qp = self.model.quant_mut(l);
            for g in 0..qp.groups() {
                if !qp.live[g] {
                    continue;
                }
                if qp.bits.data[g] < target[g] {
                    groups.push(RestoredGroup {
                        layer: l,
                        group: g,
                        old_bits: qp.bits.data[g],
                        new_bits: target[g],
                        frozen_until,
                    });
                    qp.bits.data[g] = target[g];
                    qp.frozen_until[g] = frozen_until;
                }
            }
        }
        let n = groups.len();
        if n > 0 {
            self.events.push(Event::Restore {
                step: self.step,
                groups,
                to_initial,
            });
        }
        n
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.done() {
            self.step()?;
        }
        self.terminal_eval()?;
        self.finished = true;
        Ok(())
    }

    /// Like `run`, invoking the inspector after every step.
    pub fn run_with_inspector(&mut self, inspect: &mut dyn FnMut(&Trainer)) -> Result<()> {
        while !self.done() {
            self.step()?;
            inspect(self);
        }
        self.terminal_eval()?;
        self.finished = true;
        Ok(())
    }

    /// If the very last evaluation restored precision, measure the restored
    /// state once more so the run ends on an evaluated row.
    fn terminal_eval(&mut self) -> Result<()> {
        if self.metrics.last().map_or(false, |m| m.restored_count > 0) {
            self.run_evaluation()?;
        }
        Ok(())
    }
}

fn all_ids(data: &Dataset) -> Vec<usize> {
    (0..data.len()).collect()
}

/// Shifts every label/target by one class; used by the fault-injection hook.
fn corrupt_labels(data: &Dataset) -> Dataset {
    match data {
        Dataset::Vision(v) => {
            let mut c = v.clone();
            for l in &mut c.labels {
                *l = (*l + 1) % 10;
            }
            Dataset::Vision(c)
        }
        Dataset::Text(t) => {
            let mut c = t.clone();
            for v in &mut c.next {
                *v = (*v + 1) % crate::data::VOCAB;
            }
            for v in &mut c.windows {
                *v = (*v + 1) % crate::data::VOCAB;
            }
            Dataset::Text(c)
        }
    }
}

/// The test metric of Tables-style reporting: top-1 accuracy percent for the
/// classifier, mean cross-entropy in nats for the language model.
pub fn evaluate(model: &Model, data: &Dataset, quantized: bool) -> Result<f64> {
    let m = evaluate_on(model, data, &all_ids(data), quantized)?;
    Ok(if model.is_classifier() {
        m.accuracy_pct
    } else {
        m.loss_nats
    })
}

/// Convenience wrapper: build a trainer, run to completion, return the pieces.
pub struct RunResult {
    pub model: Model,
    pub metrics: Vec<MetricsRecord>,
    pub events: Vec<Event>,
    pub pset: Option<PreservationSet>,
    pub gamma_eff: Option<f32>,
}

pub fn train_compress(
    model: Model,
    train: Dataset,
    test: Dataset,
    mode: Mode,
    cfg: CompressionConfig,
) -> Result<RunResult> {
    let mut t = Trainer::new(model, train, test, mode, cfg)?;
    t.run()?;
    Ok(RunResult {
        model: t.model,
        metrics: t.metrics,
        events: t.events,
        pset: t.pset,
        gamma_eff: t.gamma_eff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_vision_with_noise, Split};
    use crate::models::{build_cnn, CnnSpec};

    fn tiny_setup(seed: u64) -> (Model, Dataset, Dataset) {
        let mut rng = Rng::new(seed);
        let model = Model::Cnn(
            build_cnn(
                &CnnSpec {
                    channels: vec![4, 6],
                    classes: 10,
                },
                8.0,
                &mut rng,
            )
            .unwrap(),
        );
        let train = Dataset::Vision(synthetic_vision_with_noise(64, seed, 0.05, Split::Train));
        let test = Dataset::Vision(synthetic_vision_with_noise(32, seed + 1, 0.0, Split::Test));
        (model, train, test)
    }

    #[test]
    fn degenerate_config_equals_plain_task_loss() {
        let (model, train, test) = tiny_setup(1);
        let cfg = CompressionConfig {
            alpha: 0.0,
            gamma: Some(0.0),
            lambda: 0.0,
            epochs: 1,
            batch_size: 16,
            eval_every: 2,
            seed: 1,
            ..Default::default()
        };
        let mut t = Trainer::new(model, train, test, Mode::Safe, cfg).unwrap();
        t.step().unwrap();
        let b = t.last_breakdown;
        assert_eq!(b.l1_term, 0.0);
        assert_eq!(b.size_term, 0.0);
        assert_eq!(b.preservation_term, 0.0);
        assert!((b.total - b.task).abs() < 1e-6);
    }

    #[test]
    fn term_decomposition_sums_to_total() {
        let (model, train, test) = tiny_setup(2);
        let cfg = CompressionConfig {
            alpha: 1e-3,
            gamma: None,
            lambda: 1.0,
            epochs: 2,
            batch_size: 16,
            eval_every: 1,
            pset_fraction: 0.2,
            seed: 2,
            ..Default::default()
        };
        let mut t = Trainer::new(model, train, test, Mode::Safe, cfg).unwrap();
        for _ in 0..6 {
            t.step().unwrap();
        }
        let b = t.last_breakdown;
        let sum = b.task + b.l1_term + b.size_term + b.preservation_term;
        assert!(
            (sum - b.total).abs() <= 1e-6 * b.total.abs().max(1.0),
            "{} vs {}",
            sum,
            b.total
        );
        // preservation term active after warm-up
        assert!(b.preservation_term > 0.0);
    }

    #[test]
    fn baseline_keeps_q_constant_and_never_prunes() {
        let (model, train, test) = tiny_setup(3);
        let cfg = CompressionConfig {
            epochs: 2,
            batch_size: 16,
            eval_every: 1,
            seed: 3,
            ..Default::default()
        };
        let r = train_compress(model, train, test, Mode::Baseline, cfg).unwrap();
        assert!(!r.metrics.is_empty());
        let q0 = r.metrics[0].q_bits;
        for m in &r.metrics {
            assert_eq!(m.q_bits, q0);
            assert_eq!(m.pruned_count, 0);
            assert_eq!(m.restored_count, 0);
            assert!(m.preservation_loss.is_nan());
        }
    }

    #[test]
    fn prune_empty_report_when_nothing_zero() {
        let (model, train, test) = tiny_setup(4);
        let cfg = CompressionConfig {
            epochs: 1,
            batch_size: 16,
            seed: 4,
            ..Default::default()
        };
        let mut t = Trainer::new(model, train, test, Mode::Unsafe, cfg).unwrap();
        let before = t.model.report_bytes(true);
        let report = t.prune_zeroed();
        assert!(report.is_empty());
        assert_eq!(t.model.report_bytes(true), before);
    }

    #[test]
    fn prune_guard_keeps_one_group_alive() {
        let (model, train, test) = tiny_setup(5);
        let cfg = CompressionConfig {
            epochs: 1,
            batch_size: 16,
            seed: 5,
            ..Default::default()
        };
        let mut t = Trainer::new(model, train, test, Mode::Unsafe, cfg).unwrap();
        // force all of layer 0's bits to 0: every group becomes a candidate
        for b in &mut t.model.quant_mut(0).bits.data {
            *b = 0.0;
        }
        let report = t.prune_zeroed();
        let qp = t.model.quant(0);
        assert_eq!(qp.live_count(), 1);
        assert!(qp.live[0], "lowest-index candidate survives");
        assert_eq!(qp.bits.data[0], 1.0);
        assert_eq!(report.len(), qp.groups() - 1);
    }

    #[test]
    fn bytes_strictly_decrease_on_prune() {
        let (model, train, test) = tiny_setup(6);
        let cfg = CompressionConfig {
            epochs: 1,
            batch_size: 16,
            seed: 6,
            ..Default::default()
        };
        let mut t = Trainer::new(model, train, test, Mode::Unsafe, cfg).unwrap();
        let before = t.model.report_bytes(true);
        t.model.quant_mut(1).bits.data[2] = 0.0;
        let report = t.prune_zeroed();
        assert_eq!(report, vec![(1, 2)]);
        assert!(t.model.report_bytes(true) < before);
    }

    #[test]
    fn restore_without_snapshot_goes_to_b0() {
        let (model, train, test) = tiny_setup(7);
        let cfg = CompressionConfig {
            epochs: 1,
            batch_size: 16,
            b0: 8.0,
            freeze_steps: 10,
            seed: 7,
            ..Default::default()
        };
        let mut t = Trainer::new(model, train, test, Mode::Safe, cfg).unwrap();
        t.model.quant_mut(0).bits.data[1] = 3.0;
        let n = t.restore_precision();
        assert!(n >= 1);
        assert_eq!(t.model.quant(0).bits.data[1], 8.0);
        assert_eq!(t.model.quant(0).frozen_until[1], 10);
    }

    #[test]
    fn restore_with_snapshot_restores_exact_values() {
        let (model, train, test) = tiny_setup(8);
        let cfg = CompressionConfig {
            epochs: 1,
            batch_size: 16,
            freeze_steps: 5,
            seed: 8,
            ..Default::default()
        };
        let mut t = Trainer::new(model, train, test, Mode::Safe, cfg).unwrap();
        let snap_bits: Vec<Vec<f32>> = (0..t.model.quant_layers())
            .map(|l| t.model.quant(l).bits.data.clone())
            .collect();
        t.snapshot = Some(Snapshot {
            bits: snap_bits.clone(),
            exps: (0..t.model.quant_layers())
                .map(|l| t.model.quant(l).exps.data.clone())
                .collect(),
            pres_accuracy: 90.0,
            pres_loss: 0.5,
            step: 0,
        });
        t.model.quant_mut(0).bits.data[2] = 2.0;
        t.model.quant_mut(1).bits.data[0] = 4.5;
        let n = t.restore_precision();
        assert_eq!(n, 2);
        assert_eq!(t.model.quant(0).bits.data[2], snap_bits[0][2]);
        assert_eq!(t.model.quant(1).bits.data[0], snap_bits[1][0]);
        // no group below its snapshot value
        for l in 0..t.model.quant_layers() {
            for g in 0..t.model.quant(l).groups() {
                assert!(t.model.quant(l).bits.data[g] >= snap_bits[l][g] - 1e-6);
            }
        }
    }

    #[test]
    fn empty_restore_report_when_nothing_dropped() {
        let (model, train, test) = tiny_setup(9);
        let cfg = CompressionConfig {
            epochs: 1,
            batch_size: 16,
            seed: 9,
            ..Default::default()
        };
        let mut t = Trainer::new(model, train, test, Mode::Safe, cfg).unwrap();
        t.snapshot = Some(Snapshot {
            bits: (0..t.model.quant_layers())
                .map(|l| t.model.quant(l).bits.data.clone())
                .collect(),
            exps: (0..t.model.quant_layers())
                .map(|l| t.model.quant(l).exps.data.clone())
                .collect(),
            pres_accuracy: 90.0,
            pres_loss: 0.5,
            step: 0,
        });
        assert_eq!(t.restore_precision(), 0);
    }

    #[test]
    fn chance_level_evaluate() {
        // Against uniformly random labels, any fixed classifier sits at 10%.
        let (model, _train, _test) = tiny_setup(10);
        let mut big = synthetic_vision_with_noise(2000, 99, 0.0, Split::Test);
        let mut rng = Rng::new(123);
        for l in &mut big.labels {
            *l = rng.below(10);
        }
        let acc = evaluate(&model, &Dataset::Vision(big), false).unwrap();
        assert!((acc - 10.0).abs() <= 3.0, "accuracy {}", acc);
    }
}
