//! SPM ablation sweeps: every point trains under the base experiment's seed
//! and budget with one SPM site's settings overridden.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use svt_core::config::{Reducer, SpmVariant};
use svt_core::{flops, ModelConfig, SpmConfig, Window};

use crate::config::{ExperimentConfig, ModelSource};
use crate::data::generate_dataset;
use crate::error::{config_err, HarnessError, Result};
use crate::train::{metrics_csv, train, write_text, MetricRow};

/// Fields left out keep the base model's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPoint {
    pub name: String,
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub window: Option<Window>,
    #[serde(default)]
    pub variant: Option<SpmVariant>,
    #[serde(default)]
    pub neighbor_groups: Option<usize>,
    #[serde(default)]
    pub prototypes: Option<usize>,
    #[serde(default)]
    pub keep_top: Option<usize>,
}

impl SweepPoint {
    fn apply(&self, s: &mut SpmConfig) {
        if let Some(v) = self.threshold {
            s.threshold = v;
        }
        if let Some(v) = self.window {
            s.window = v;
        }
        if let Some(v) = self.variant {
            s.variant = v;
        }
        if self.neighbor_groups.is_some() {
            s.neighbor_groups = self.neighbor_groups;
        }
        if let Some(v) = self.prototypes {
            s.prototypes = v;
        }
        if let Some(v) = self.keep_top {
            s.keep_top = v;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub base: ExperimentConfig,
    /// SPM site to vary in a ViT; may be omitted when there is exactly one.
    /// MViT sweeps vary the shared semantic-block settings.
    #[serde(default)]
    pub layer: Option<usize>,
    pub points: Vec<SweepPoint>,
}

impl SweepSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_json(&text)
    }

    /// One validated experiment per point; fails on the first invalid one.
    pub fn expand(&self) -> Result<Vec<(String, ExperimentConfig)>> {
        if self.points.is_empty() {
            return config_err("sweep has no points");
        }
        let base_model = self.base.model.resolve()?;
        let mut out = Vec::with_capacity(self.points.len());
        for (k, point) in self.points.iter().enumerate() {
            if self.points[..k].iter().any(|p| p.name == point.name) {
                return config_err(format!("duplicate sweep point name {:?}", point.name));
            }
            let mut model = base_model.clone();
            let site = spm_site(&mut model, self.layer)?;
            point.apply(site);
            let exp = ExperimentConfig {
                model: ModelSource::Inline(model),
                ..self.base.clone()
            };
            exp.validate()
                .map_err(|e| HarnessError::Config(format!("sweep point {:?}: {e}", point.name)))?;
            out.push((point.name.clone(), exp));
        }
        Ok(out)
    }
}

fn spm_site(model: &mut ModelConfig, layer: Option<usize>) -> Result<&mut SpmConfig> {
    match model {
        ModelConfig::Vit(c) => {
            let mut sites: Vec<&mut SpmConfig> = c
                .spm_schedule
                .iter_mut()
                .filter(|e| layer.is_none_or(|l| e.layer == l))
                .filter_map(|e| match &mut e.reducer {
                    Reducer::Spm(s) => Some(s),
                    _ => None,
                })
                .collect();
            match sites.len() {
                1 => Ok(sites.pop().expect("one site")),
                0 => config_err(format!("base model has no SPM site {layer:?}")),
                _ => config_err("base model has several SPM sites; set `layer`"),
            }
        }
        ModelConfig::Mvit(c) => c
            .spm
            .as_mut()
            .ok_or_else(|| HarnessError::Config("base model has no semantic attention".into())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub name: String,
    pub spm: SpmConfig,
    pub val_loss: f64,
    pub val_top1: f64,
    pub flops_g: f64,
    pub tokens_final: usize,
    pub metrics: Vec<MetricRow>,
}

pub const RESULTS_HEADER: &str = "name,variant,threshold,window,prototypes,keep_top,val_loss,val_top1,flops_g,tokens_final";

fn window_label(w: Window) -> String {
    match w {
        Window::Global => "global".into(),
        Window::Local([t, h, w]) => format!("{t}x{h}x{w}"),
    }
}

pub fn results_csv(results: &[SweepResult]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in results {
        let variant = match r.spm.variant {
            SpmVariant::Elitism => "elitism".to_string(),
            SpmVariant::Neighbor => format!("neighbor{}", r.spm.neighbor_groups.unwrap_or(1)),
        };
        let _ = writeln!(
            out,
            "{},{variant},{},{},{},{},{},{},{},{}",
            r.name,
            r.spm.threshold,
            window_label(r.spm.window),
            r.spm.prototypes,
            r.spm.keep_top,
            r.val_loss,
            r.val_top1,
            r.flops_g,
            r.tokens_final
        );
    }
    out
}

/// Validates every point, then trains them in order. With `out`, writes
/// `results.csv` plus `{name}/metrics.csv` and `{name}/checkpoint.bin`.
pub fn run_ablation(spec: &SweepSpec, out: Option<&Path>) -> Result<Vec<SweepResult>> {
    let runs = spec.expand()?;
    let data = generate_dataset(&spec.base.data)?;
    let mut results = Vec::with_capacity(runs.len());
    for (name, exp) in runs {
        let model = exp.model.resolve()?;
        let outcome = train(&model, &exp.train, &data, None)?;
        let report = flops::audit(&model)?;
        let mut m = model.clone();
        let spm = spm_site(&mut m, spec.layer)?.clone();
        if let Some(dir) = out {
            let sub = dir.join(&name);
            std::fs::create_dir_all(&sub).map_err(|e| HarnessError::io(&sub, e))?;
            write_text(&sub.join("metrics.csv"), &metrics_csv(&outcome.metrics))?;
            outcome.params.save(&sub.join("checkpoint.bin"))?;
        }
        results.push(SweepResult {
            name,
            spm,
            val_loss: outcome.final_val.loss,
            val_top1: outcome.final_val.top1,
            flops_g: report.gflops(),
            tokens_final: report.tokens_final(),
            metrics: outcome.metrics,
        });
    }
    if let Some(dir) = out {
        write_text(&dir.join("results.csv"), &results_csv(&results))?;
    }
    Ok(results)
}

/// Points varying only the elitism threshold.
pub fn threshold_points(values: &[f64]) -> Vec<SweepPoint> {
    values
        .iter()
        .map(|&v| SweepPoint {
            name: format!("theta{v}"),
            threshold: Some(v),
            ..Default::default()
        })
        .collect()
}

/// Points varying only the pooling window.
pub fn window_points(windows: &[[usize; 3]]) -> Vec<SweepPoint> {
    windows
        .iter()
        .map(|&w| SweepPoint {
            name: format!("win{}", window_label(Window::Local(w))),
            window: Some(Window::Local(w)),
            ..Default::default()
        })
        .collect()
}

/// Elitism against neighbor grouping with `groups` rank groups.
pub fn variant_points(groups: usize) -> Vec<SweepPoint> {
    vec![
        SweepPoint {
            name: "elitism".into(),
            variant: Some(SpmVariant::Elitism),
            ..Default::default()
        },
        SweepPoint {
            name: format!("neighbor{groups}"),
            variant: Some(SpmVariant::Neighbor),
            neighbor_groups: Some(groups),
            ..Default::default()
        },
    ]
}
