//! Multi-seed ablation and template-count studies on the synthetic benchmark.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::QuerySetting;
use super::protocol::{pretrain_synthetic, run_with_pretrained, Arm, ProtocolConfig};
use crate::error::{Error, Result};
use crate::world::{emit_benchmark, generate_world, BenchmarkSpec, ToyEncoder, WorldConfig};

/// Seeds used by the multi-seed studies.
pub const STUDY_SEEDS: [u64; 5] = [1234, 1235, 1236, 1237, 1238];

/// One configuration of the method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub regularizer: bool,
    pub caption_augmentation: bool,
    pub localize: bool,
    /// `None` uses every template.
    pub templates: Option<usize>,
}

impl Variant {
    pub const FULL: Variant = Variant {
        regularizer: true,
        caption_augmentation: true,
        localize: true,
        templates: None,
    };

    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if !self.regularizer {
            parts.push("no-regularizer".to_string());
        }
        if !self.caption_augmentation {
            parts.push("no-caption-augmentation".to_string());
        }
        if !self.localize {
            parts.push("no-localization".to_string());
        }
        if let Some(n) = self.templates {
            parts.push(format!("{n}-templates"));
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }

    pub fn apply(&self, base: &ProtocolConfig) -> ProtocolConfig {
        let mut cfg = base.clone();
        if !self.regularizer {
            cfg.personalize.loss.alpha = 0.0;
        }
        cfg.caption_augmentation &= self.caption_augmentation;
        cfg.localize &= self.localize;
        cfg.max_templates = self.templates;
        cfg.arms = vec![Arm::Personalized];
        cfg
    }
}

/// The three single-component ablations next to the full method.
pub fn ablation_variants() -> Vec<Variant> {
    let f = Variant::FULL;
    vec![
        f,
        Variant { regularizer: false, ..f },
        Variant {
            caption_augmentation: false,
            ..f
        },
        Variant { localize: false, ..f },
    ]
}

/// Template counts crossed with localization on and off.
pub fn template_sweep_variants(counts: &[usize]) -> Vec<Variant> {
    [true, false]
        .into_iter()
        .flat_map(|localize| {
            counts.iter().map(move |&n| Variant {
                localize,
                templates: Some(n),
                ..Variant::FULL
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub variant: Variant,
    /// Generic-setting tR@5 of the personalized arm, one value per seed.
    pub tr5: Vec<f64>,
    /// Context-setting MRR of the personalized arm, one value per seed.
    pub context_mrr: Vec<f64>,
}

impl StudyRow {
    pub fn mean_tr5(&self) -> f64 {
        mean(&self.tr5)
    }

    pub fn mean_context_mrr(&self) -> f64 {
        mean(&self.context_mrr)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<StudyRow>,
}

impl StudyReport {
    pub fn row(&self, v: &Variant) -> Option<&StudyRow> {
        self.rows.iter().find(|r| r.variant == *v)
    }

    pub fn to_text(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut s = format!("[study]\nseeds = {}\n\nvariant\tmean tR@5\tmean context MRR\n", seeds.join(","));
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{:.2}\t{:.2}\n",
                r.variant.name(),
                100.0 * r.mean_tr5(),
                100.0 * r.mean_context_mrr()
            ));
        }
        s
    }
}

/// Runs every variant on every seed. For each seed the world, benchmark and
/// protocol seeds are all set to that seed and pretraining is shared
/// across variants.
pub fn run_study(
    seeds: &[u64],
    variants: &[Variant],
    world: &WorldConfig,
    spec: &BenchmarkSpec,
    base: &ProtocolConfig,
) -> Result<StudyReport> {
    if seeds.is_empty() || variants.is_empty() {
        return Err(Error::Usage("a study needs at least one seed and one variant".into()));
    }
    let per_seed: Vec<Vec<(f64, f64)>> = seeds
        .par_iter()
        .map(|&seed| {
            let world = Arc::new(generate_world(&WorldConfig { seed, ..world.clone() })?);
            let encoder = ToyEncoder::new(world.clone());
            let (train, gallery, eval) = emit_benchmark(&world, &BenchmarkSpec { seed, ..spec.clone() })?;
            let base = ProtocolConfig { seed, ..base.clone() };
            let (pretrained, _) = pretrain_synthetic(&encoder, &world, &base)?;
            variants
                .iter()
                .map(|v| {
                    let cfg = v.apply(&base);
                    let (report, _) = run_with_pretrained(&encoder, &world, &cfg, &pretrained, &train, &gallery, &eval)?;
                    let get = |s| {
                        report
                            .metrics(Arm::Personalized, s)
                            .ok_or_else(|| Error::Validation(format!("benchmark has no {s:?} queries")))
                    };
                    Ok((get(QuerySetting::Generic)?.tr5, get(QuerySetting::Context)?.mrr))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let rows = variants
        .iter()
        .enumerate()
        .map(|(i, v)| StudyRow {
            variant: *v,
            tr5: per_seed.iter().map(|s| s[i].0).collect(),
            context_mrr: per_seed.iter().map(|s| s[i].1).collect(),
        })
        .collect();
    Ok(StudyReport {
        seeds: seeds.to_vec(),
        rows,
    })
}
