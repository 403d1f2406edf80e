//! Serial training and evaluation with per-sample tapes.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use svt_core::{flops, ModelConfig, ParamSet};
use svt_tensor::{DArray, Tape};

use crate::data::{Clip, Dataset};
use crate::error::{config_err, HarnessError, Result};
use crate::model::{bind_frozen, Model};

fn momentum_default() -> f64 {
    0.9
}
fn beta2_default() -> f64 {
    0.999
}
fn eps_default() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Optimizer {
    Sgd {
        #[serde(default = "momentum_default")]
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    /// Adam with decoupled weight decay.
    Adamw {
        #[serde(default = "momentum_default")]
        beta1: f64,
        #[serde(default = "beta2_default")]
        beta2: f64,
        #[serde(default = "eps_default")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    /// Peak learning rate; cosine-annealed to zero after the warmup.
    pub lr: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
    /// Drives parameter init and batch order.
    pub seed: u64,
    /// Train rows are written every `log_every` steps.
    #[serde(default = "one")]
    pub log_every: usize,
    /// Validation every `eval_every` steps; 0 evaluates only at the end.
    #[serde(default)]
    pub eval_every: usize,
    /// Global gradient-norm clip.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.log_every == 0 {
            return config_err("steps, batch_size and log_every must be positive");
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return config_err(format!("lr {} must be finite and nonnegative", self.lr));
        }
        if self.warmup_steps > self.steps {
            return config_err("warmup_steps exceeds steps");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return config_err("grad_clip must be positive");
            }
        }
        let unit = |v: f64| (0.0..1.0).contains(&v);
        let ok = match self.optimizer {
            Optimizer::Sgd { momentum, weight_decay } => unit(momentum) && weight_decay >= 0.0,
            Optimizer::Adamw {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => unit(beta1) && unit(beta2) && eps > 0.0 && weight_decay >= 0.0,
        };
        if !ok {
            return config_err(format!("invalid optimizer settings {:?}", self.optimizer));
        }
        Ok(())
    }

    /// Learning rate for 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.steps - self.warmup_steps).max(1) as f64;
        let u = (step - self.warmup_steps) as f64 / span;
        self.lr * 0.5 * (1.0 + (PI * u).cos())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub split: &'static str,
    pub loss: f64,
    pub top1: f64,
    pub flops_g: f64,
    pub tokens_final: usize,
}

pub const METRICS_HEADER: &str = "step,split,loss,top1,flops_g,tokens_final";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step, r.split, r.loss, r.top1, r.flops_g, r.tokens_final
        );
    }
    out
}

/// Audited cost and final token count, stamped on every metrics row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cost {
    pub flops_g: f64,
    pub tokens_final: usize,
}

impl Cost {
    pub fn of(cfg: &ModelConfig) -> Result<Self> {
        let r = flops::audit(cfg)?;
        Ok(Cost {
            flops_g: r.gflops(),
            tokens_final: r.tokens_final(),
        })
    }

    fn row(self, step: usize, split: &'static str, loss: f64, top1: f64) -> MetricRow {
        MetricRow {
            step,
            split,
            loss,
            top1,
            flops_g: self.flops_g,
            tokens_final: self.tokens_final,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub top1: f64,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy and top-1 accuracy over `clips`, in order.
pub fn evaluate(model: &Model, params: &ParamSet, clips: &[Clip]) -> Result<Evaluation> {
    let mut loss = 0.0;
    let mut correct = 0;
    for clip in clips {
        let tape = Tape::new();
        let out = model.forward(&tape, &bind_frozen(params, &tape), &clip.video)?;
        let l = tape.cross_entropy(out.logits, &[clip.label])?;
        loss += tape.value(l).data()[0];
        correct += usize::from(argmax(tape.value(out.logits).data()) == clip.label);
    }
    let n = clips.len().max(1) as f64;
    Ok(Evaluation {
        loss: loss / n,
        top1: correct as f64 / n,
    })
}

struct OptState {
    first: Vec<DArray>,
    second: Vec<DArray>,
    t: i32,
}

fn apply_update(cfg: &TrainConfig, params: &mut ParamSet, grads: &[DArray], state: &mut OptState, lr: f64) {
    state.t += 1;
    for (i, (_, p)) in params.iter_mut().enumerate() {
        // Decay only matrices and higher-rank tensors, never norms or biases.
        let decays = p.ndim() >= 2;
        let g = grads[i].data();
        match cfg.optimizer {
            Optimizer::Sgd { momentum, weight_decay } => {
                let m = state.first[i].data_mut();
                let wd = if decays { weight_decay } else { 0.0 };
                for ((p, m), &g) in p.data_mut().iter_mut().zip(m).zip(g) {
                    *m = momentum * *m + g + wd * *p;
                    *p -= lr * *m;
                }
            }
            Optimizer::Adamw {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let c1 = 1.0 - beta1.powi(state.t);
                let c2 = 1.0 - beta2.powi(state.t);
                let wd = if decays { weight_decay } else { 0.0 };
                let (m, v) = (state.first[i].data_mut(), state.second[i].data_mut());
                for (((p, m), v), &g) in p.data_mut().iter_mut().zip(m).zip(v).zip(g) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let step = (*m / c1) / ((*v / c2).sqrt() + eps);
                    *p -= lr * (step + wd * *p);
                }
            }
        }
    }
}

pub struct TrainOutcome {
    pub params: ParamSet,
    pub metrics: Vec<MetricRow>,
    pub final_val: Evaluation,
}

/// Batch order: a fresh permutation of the training set per epoch.
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Sampler {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0xba7c_4e5),
            order: (0..n).collect(),
            cursor: n,
        };
        s.refill();
        s
    }

    fn refill(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    fn next(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.refill();
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

/// Trains from a fresh init; `params` overrides the init when given.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    params: Option<ParamSet>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = Model::new(model_cfg)?;
    let cost = Cost::of(model_cfg)?;
    let mut params = match params {
        Some(p) => p,
        None => model.init_params(cfg.seed)?,
    };
    params.check_against(&model.param_specs())?;
    let zeros: Vec<DArray> = params.iter().map(|(_, a)| DArray::zeros(a.shape())).collect();
    let mut state = OptState {
        first: zeros.clone(),
        second: zeros,
        t: 0,
    };
    let mut sampler = Sampler::new(data.train.len(), cfg.seed);
    let mut metrics = Vec::new();
    let mut last_val = None;
    for step in 0..cfg.steps {
        let mut grads: Vec<DArray> = params.iter().map(|(_, a)| DArray::zeros(a.shape())).collect();
        let (mut loss, mut correct) = (0.0, 0);
        let scale = 1.0 / cfg.batch_size as f64;
        for _ in 0..cfg.batch_size {
            let clip = &data.train[sampler.next()];
            let tape = Tape::new();
            let bound = params.bind(&tape);
            let out = model.forward(&tape, &bound, &clip.video)?;
            let l = tape.cross_entropy(out.logits, &[clip.label])?;
            let value = tape.value(l).data()[0];
            if !value.is_finite() {
                let detail = match tape.first_non_finite() {
                    Some((node, op)) => format!("loss {value}; first non-finite value from op `{op}` (node {node})"),
                    None => format!("loss {value}"),
                };
                return Err(HarnessError::Numerical { step: step + 1, detail });
            }
            loss += value;
            correct += usize::from(argmax(tape.value(out.logits).data()) == clip.label);
            tape.backward(l)?;
            for (acc, (name, g)) in grads.iter_mut().zip(bound.grads(&tape)) {
                if !g.all_finite() {
                    return Err(HarnessError::Numerical {
                        step: step + 1,
                        detail: format!("non-finite gradient for parameter {name}"),
                    });
                }
                acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, g)| *a += scale * g);
            }
        }
        if let Some(clip) = cfg.grad_clip {
            let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
            if norm > clip {
                let s = clip / norm;
                grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
            }
        }
        apply_update(cfg, &mut params, &grads, &mut state, cfg.lr_at(step));
        let n = step + 1;
        if n % cfg.log_every == 0 || n == cfg.steps {
            let acc = correct as f64 / cfg.batch_size as f64;
            metrics.push(cost.row(n, "train", loss * scale, acc));
        }
        if (cfg.eval_every > 0 && n % cfg.eval_every == 0) || n == cfg.steps {
            let e = evaluate(&model, &params, &data.val)?;
            metrics.push(cost.row(n, "val", e.loss, e.top1));
            last_val = Some(e);
        }
    }
    Ok(TrainOutcome {
        params,
        metrics,
        final_val: last_val.expect("the last step always evaluates"),
    })
}

/// Evaluation row for a stored checkpoint.
pub fn eval_checkpoint(model_cfg: &ModelConfig, params: &ParamSet, clips: &[Clip]) -> Result<MetricRow> {
    let model = Model::new(model_cfg)?;
    params.check_against(&model.param_specs())?;
    let e = evaluate(&model, params, clips)?;
    Ok(Cost::of(model_cfg)?.row(0, "val", e.loss, e.top1))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}
