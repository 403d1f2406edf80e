//! One interface over both architectures.

use svt_core::mvit::MViT;
use svt_core::spm::SpmRecord;
use svt_core::vit::ViT;
use svt_core::config::Reducer;
use svt_core::{Bound, Grid, ModelConfig, ParamSet, ParamSpec, SpmConfig};
use svt_tensor::{DArray, Tape, Var};

use crate::error::Result;

#[derive(Debug, Clone)]
pub enum Model {
    Vit(ViT),
    Mvit(MViT),
}

/// Forward pass with the intermediates the exporters need.
pub struct Forward {
    /// `[1, num_classes]`.
    pub logits: Var,
    /// Output of each block, after any reducer that follows it.
    pub layers: Vec<Var>,
    /// `[heads, N_q, N_kv]` attention of each block.
    pub attention: Vec<Var>,
    /// `(1-based layer, record)` per SPM application.
    pub spm: Vec<(usize, SpmRecord)>,
}

impl Model {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        Ok(match cfg {
            ModelConfig::Vit(c) => Model::Vit(ViT::new(c.clone())?),
            ModelConfig::Mvit(c) => Model::Mvit(MViT::new(c.clone())?),
        })
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        match self {
            Model::Vit(m) => m.param_specs(),
            Model::Mvit(m) => m.param_specs(),
        }
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        Ok(ParamSet::init(&self.param_specs(), seed)?)
    }

    pub fn depth(&self) -> usize {
        match self {
            Model::Vit(m) => m.cfg.depth,
            Model::Mvit(m) => m.plan.blocks.len(),
        }
    }

    pub fn input(&self) -> [usize; 4] {
        match self {
            Model::Vit(m) => m.cfg.input,
            Model::Mvit(m) => m.cfg.input,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Model::Vit(m) => m.cfg.num_classes,
            Model::Mvit(m) => m.cfg.num_classes,
        }
    }

    /// Token grid entering the reducer or attention of `layer`, if any.
    pub fn grid_at(&self, layer: usize) -> Option<Grid> {
        match self {
            Model::Vit(m) => {
                let mut grid = Some(m.plan.grid);
                for r in m.plan.reducers.iter().filter(|r| r.layer < layer) {
                    grid = r.grid_out;
                }
                grid
            }
            Model::Mvit(m) => m.plan.blocks.get(layer.checked_sub(1)?).map(|b| b.grid_in),
        }
    }

    /// SPM settings applied at `layer`, if it hosts one.
    pub fn spm_config(&self, layer: usize) -> Option<&SpmConfig> {
        match self {
            Model::Vit(m) => m.cfg.spm_schedule.iter().find_map(|e| match &e.reducer {
                Reducer::Spm(s) if e.layer == layer => Some(s),
                _ => None,
            }),
            Model::Mvit(m) => {
                let b = m.plan.blocks.get(layer.checked_sub(1)?)?;
                b.spm.and(m.cfg.spm.as_ref())
            }
        }
    }

    /// Tokens produced by `layer` (after its reducer).
    pub fn tokens_after(&self, layer: usize) -> usize {
        match self {
            Model::Vit(m) => m
                .plan
                .block_tokens
                .get(layer)
                .copied()
                .unwrap_or(m.plan.final_tokens),
            Model::Mvit(m) => m.plan.blocks[layer - 1].q_tokens(),
        }
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, video: &DArray) -> Result<Forward> {
        Ok(match self {
            Model::Vit(m) => {
                let out = m.forward(tape, p, video)?;
                let mut layers = out.trace.blocks.clone();
                for (l, v) in &out.trace.reduced {
                    layers[l - 1] = *v;
                }
                Forward {
                    logits: out.logits,
                    layers,
                    attention: out.trace.attention,
                    spm: out.trace.spm,
                }
            }
            Model::Mvit(m) => {
                let out = m.forward(tape, p, video)?;
                Forward {
                    logits: out.logits,
                    layers: out.trace.blocks,
                    attention: out.trace.attention,
                    spm: out.trace.spm,
                }
            }
        })
    }
}

/// Every parameter as a constant: a forward pass with no gradient storage.
pub fn bind_frozen(params: &ParamSet, tape: &Tape) -> Bound {
    Bound::from_pairs(params.iter().map(|(k, a)| (k.to_string(), tape.constant(a.clone()))))
}
