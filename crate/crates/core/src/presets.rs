//! Named configurations: the full-scale variants used by the FLOP audit and
//! the desk-scale models used for training.

use crate::config::{
    MViTConfig, ModelConfig, Reducer, ScheduleEntry, SpmConfig, StageConfig, StemConfig, ViTConfig, Window,
};

const VIDEO: [usize; 4] = [16, 224, 224, 3];
const TUBELET: [usize; 3] = [2, 16, 16];
const VIT_THRESHOLD: f64 = 0.7;
const MVIT_THRESHOLD: f64 = 0.5;

fn vit(depth: usize, embed_dim: usize, heads: usize) -> ViTConfig {
    ViTConfig {
        depth,
        embed_dim,
        heads,
        mlp_ratio: 4,
        patch: TUBELET,
        input: VIDEO,
        spm_schedule: Vec::new(),
        num_classes: 400,
    }
}

fn spm_at(layer: usize, prototypes: usize, window: Window, keep_top: usize) -> ScheduleEntry {
    ScheduleEntry {
        layer,
        reducer: Reducer::Spm(SpmConfig::elitism(prototypes, VIT_THRESHOLD, window, keep_top)),
    }
}

fn with(mut cfg: ViTConfig, schedule: Vec<ScheduleEntry>) -> ViTConfig {
    cfg.spm_schedule = schedule;
    cfg
}

const LOCAL: Window = Window::Local([2, 14, 14]);

pub fn vit_b() -> ViTConfig {
    vit(12, 768, 12)
}

pub fn vit_l() -> ViTConfig {
    vit(24, 1024, 16)
}

pub fn vit_b_spm6() -> ViTConfig {
    with(vit_b(), vec![spm_at(6, 32, LOCAL, 0)])
}

pub fn vit_b_spm8() -> ViTConfig {
    with(vit_b(), vec![spm_at(8, 32, LOCAL, 0)])
}

pub fn vit_l_spm12() -> ViTConfig {
    with(vit_l(), vec![spm_at(12, 32, LOCAL, 0)])
}

pub fn vit_l_spm16() -> ViTConfig {
    with(vit_l(), vec![spm_at(16, 32, LOCAL, 0)])
}

/// Inserted after layer 18, as the variant name says.
pub fn vit_l_spm18() -> ViTConfig {
    with(vit_l(), vec![spm_at(18, 64, Window::Global, 0)])
}

pub fn vit_l_spm8_12_16() -> ViTConfig {
    with(
        vit_l(),
        vec![
            spm_at(8, 32, LOCAL, 896),
            spm_at(12, 128, Window::Global, 384),
            spm_at(16, 128, Window::Global, 0),
        ],
    )
}

pub fn vit_l_spm8_14_18() -> ViTConfig {
    with(
        vit_l(),
        vec![
            spm_at(8, 32, LOCAL, 896),
            spm_at(14, 128, Window::Global, 384),
            spm_at(18, 128, Window::Global, 0),
        ],
    )
}

/// Desk-scale baseline: 256 tokens of width 64.
pub fn tiny() -> ViTConfig {
    ViTConfig {
        depth: 8,
        embed_dim: 64,
        heads: 4,
        mlp_ratio: 4,
        patch: [2, 4, 4],
        input: [8, 32, 32, 1],
        spm_schedule: Vec::new(),
        num_classes: 8,
    }
}

/// `tiny` with one global SPM after block 5: 256 -> 8 + 8 tokens.
pub fn tiny_spm() -> ViTConfig {
    with(tiny(), vec![spm_at(5, 8, Window::Global, 8)])
}

pub fn mvit_tiny() -> MViTConfig {
    MViTConfig {
        input: [8, 32, 32, 1],
        stem: StemConfig {
            kernel: [3, 7, 7],
            stride: [2, 4, 4],
        },
        stages: vec![
            StageConfig {
                blocks: 2,
                channels: 32,
                heads: 1,
                q_stride: [1, 1, 1],
                kv_stride: [1, 2, 2],
            },
            StageConfig {
                blocks: 6,
                channels: 64,
                heads: 2,
                q_stride: [1, 2, 2],
                kv_stride: [1, 1, 1],
            },
        ],
        kernel_q: [3, 3, 3],
        kernel_kv: [3, 3, 3],
        mlp_ratio: 4,
        semantic_attention_period: None,
        spm: None,
        num_classes: 8,
    }
}

/// `mvit_tiny` with semantic attention in blocks 4 and 8.
pub fn mvit_tiny_semantic() -> MViTConfig {
    MViTConfig {
        semantic_attention_period: Some(4),
        spm: Some(SpmConfig::elitism(4, MVIT_THRESHOLD, Window::Local([2, 2, 2]), 0)),
        ..mvit_tiny()
    }
}

pub const NAMES: &[&str] = &[
    "vit-b",
    "vit-l",
    "vit-b-spm6",
    "vit-b-spm8",
    "vit-l-spm12",
    "vit-l-spm16",
    "vit-l-spm18",
    "vit-l-spm8-12-16",
    "vit-l-spm8-14-18",
    "tiny",
    "tiny-spm",
    "mvit-tiny",
    "mvit-tiny-semantic",
];

pub fn by_name(name: &str) -> Option<ModelConfig> {
    let vit = match name {
        "vit-b" => vit_b(),
        "vit-l" => vit_l(),
        "vit-b-spm6" => vit_b_spm6(),
        "vit-b-spm8" => vit_b_spm8(),
        "vit-l-spm12" => vit_l_spm12(),
        "vit-l-spm16" => vit_l_spm16(),
        "vit-l-spm18" => vit_l_spm18(),
        "vit-l-spm8-12-16" => vit_l_spm8_12_16(),
        "vit-l-spm8-14-18" => vit_l_spm8_14_18(),
        "tiny" => tiny(),
        "tiny-spm" => tiny_spm(),
        "mvit-tiny" => return Some(ModelConfig::Mvit(mvit_tiny())),
        "mvit-tiny-semantic" => return Some(ModelConfig::Mvit(mvit_tiny_semantic())),
        _ => return None,
    };
    Some(ModelConfig::Vit(vit))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        for name in NAMES {
            let cfg = by_name(name).unwrap();
            cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        assert!(by_name("vit-xl").is_none());
    }

    #[test]
    fn tiny_spm_final_count() {
        let plan = tiny_spm().plan().unwrap();
        assert_eq!(plan.grid, [4, 8, 8]);
        assert_eq!(plan.final_tokens, 16);
    }
}
