//! Ablation harness: the component ladder, the erase-probability sweep, the
//! cluster-count sweep, and the random-point erasing arm, each averaged over
//! seeds. Source pretraining is shared across arms of the same seed because
//! none of the swept knobs affect it.

use std::collections::HashMap;

use crate::config::RunConfig;
use crate::datagen::{generate_domain_pair, TargetView};
use crate::error::{HliError, Result};
use crate::model::ModelParams;
use crate::train::{adapt, pretrain_source, BestRole};

/// The component ladder, in cumulative order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rung {
    /// Pseudo-label self-training only: no distillation, no imitation,
    /// no erasing.
    Baseline,
    /// Adds structure distillation.
    Alms,
    /// Adds adaptive erasing on top of structure distillation.
    AlmsAulm,
    /// The full method: structure distillation, erasing, and selective
    /// teacher imitation.
    Full,
}

pub const LADDER: [Rung; 4] = [Rung::Baseline, Rung::Alms, Rung::AlmsAulm, Rung::Full];

impl Rung {
    pub fn parse(name: &str) -> Result<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "baseline" => Ok(Rung::Baseline),
            "+alms" | "alms" => Ok(Rung::Alms),
            "+alms+aulm" | "alms+aulm" => Ok(Rung::AlmsAulm),
            "full" | "hli" => Ok(Rung::Full),
            other => Err(HliError::InvalidArgument(format!(
                "unknown component rung '{other}' (expected baseline, +alms, +alms+aulm, full)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Rung::Baseline => "baseline",
            Rung::Alms => "+alms",
            Rung::AlmsAulm => "+alms+aulm",
            Rung::Full => "full",
        }
    }
}

/// Base config with the rung's components switched off/on.
pub fn rung_config(base: &RunConfig, rung: Rung) -> RunConfig {
    let mut cfg = base.clone();
    match rung {
        Rung::Baseline => {
            cfg.loss.lambda_sd_t = 0.0;
            cfg.loss.lambda_imi_t = 0.0;
            cfg.erase.prob = 0.0;
        }
        Rung::Alms => {
            cfg.loss.lambda_imi_t = 0.0;
            cfg.erase.prob = 0.0;
        }
        Rung::AlmsAulm => {
            cfg.loss.lambda_imi_t = 0.0;
        }
        Rung::Full => {}
    }
    cfg
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    /// Which study the row belongs to: components, prob, clusters, points.
    pub arm: String,
    /// The swept setting, e.g. a rung name or "prob=0.4".
    pub setting: String,
    pub seed: u64,
    pub map: f64,
    pub top1: f64,
}

pub const ABLATION_CSV_HEADER: &str = "arm,setting,seed,map,top1";
pub const SUMMARY_CSV_HEADER: &str = "arm,setting,mean_map,mean_top1";

pub fn rows_to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.arm, r.setting, r.seed, r.map, r.top1
        ));
    }
    out
}

/// Seed-averaged (arm, setting) groups, preserving first-seen order.
pub fn summarize(rows: &[AblationRow]) -> Vec<(String, String, f64, f64)> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut acc: HashMap<(String, String), (f64, f64, usize)> = HashMap::new();
    for r in rows {
        let key = (r.arm.clone(), r.setting.clone());
        let e = acc.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (0.0, 0.0, 0)
        });
        e.0 += r.map;
        e.1 += r.top1;
        e.2 += 1;
    }
    order
        .into_iter()
        .map(|key| {
            let (m, t, n) = acc[&key];
            (key.0, key.1, m / n as f64, t / n as f64)
        })
        .collect()
}

pub fn summary_to_csv(summary: &[(String, String, f64, f64)]) -> String {
    let mut out = String::from(SUMMARY_CSV_HEADER);
    out.push('\n');
    for (arm, setting, map, top1) in summary {
        out.push_str(&format!("{arm},{setting},{map},{top1}\n"));
    }
    out
}

/// Runs adaptation arms, memoizing one source pretrain per seed.
pub struct AblationHarness {
    base: RunConfig,
    pretrained: HashMap<u64, ModelParams>,
}

impl AblationHarness {
    pub fn new(base: RunConfig) -> Result<Self> {
        base.validate()?;
        Ok(Self {
            base,
            pretrained: HashMap::new(),
        })
    }

    pub fn base(&self) -> &RunConfig {
        &self.base
    }

    fn pretrain_for_seed(&mut self, seed: u64) -> Result<ModelParams> {
        if let Some(p) = self.pretrained.get(&seed) {
            return Ok(p.clone());
        }
        let mut cfg = self.base.clone();
        cfg.seed = seed;
        let (source, _) = generate_domain_pair(&cfg.dataset)?;
        let out = pretrain_source(&source, &cfg)?;
        self.pretrained.insert(seed, out.params.clone());
        Ok(out.params)
    }

    /// One adaptation run under `cfg` at `seed`; returns (best mAP, top-1 at
    /// the best epoch).
    pub fn run_adapt(&mut self, cfg: &RunConfig, seed: u64) -> Result<(f64, f64)> {
        let mut cfg = cfg.clone();
        cfg.seed = seed;
        let init = self.pretrain_for_seed(seed)?;
        let (_, target) = generate_domain_pair(&cfg.dataset)?;
        let mut view = TargetView::new(&target);
        let out = adapt(&init, &mut view, &cfg, true)?;
        let top1 = out
            .epochs
            .iter()
            .find(|e| e.epoch == out.best_epoch)
            .map(|e| match out.best_role {
                BestRole::Student => e.student_top1,
                BestRole::Teacher => e.teacher_top1,
            })
            .unwrap_or(f64::NAN);
        Ok((out.best_map, top1))
    }

    pub fn run_components(&mut self, rungs: &[Rung], seeds: &[u64]) -> Result<Vec<AblationRow>> {
        let mut rows = Vec::new();
        for &rung in rungs {
            let cfg = rung_config(&self.base, rung);
            for &seed in seeds {
                let (map, top1) = self.run_adapt(&cfg, seed)?;
                rows.push(AblationRow {
                    arm: "components".into(),
                    setting: rung.name().into(),
                    seed,
                    map,
                    top1,
                });
            }
        }
        Ok(rows)
    }

    pub fn run_prob_sweep(&mut self, probs: &[f64], seeds: &[u64]) -> Result<Vec<AblationRow>> {
        let mut rows = Vec::new();
        for &prob in probs {
            let mut cfg = self.base.clone();
            cfg.erase.prob = prob;
            cfg.validate()?;
            for &seed in seeds {
                let (map, top1) = self.run_adapt(&cfg, seed)?;
                rows.push(AblationRow {
                    arm: "prob".into(),
                    setting: format!("prob={prob}"),
                    seed,
                    map,
                    top1,
                });
            }
        }
        Ok(rows)
    }

    pub fn run_cluster_sweep(&mut self, counts: &[usize], seeds: &[u64]) -> Result<Vec<AblationRow>> {
        let mut rows = Vec::new();
        for &m_t in counts {
            let mut cfg = self.base.clone();
            cfg.train.m_t = m_t;
            cfg.validate()?;
            for &seed in seeds {
                let (map, top1) = self.run_adapt(&cfg, seed)?;
                rows.push(AblationRow {
                    arm: "clusters".into(),
                    setting: format!("m_t={m_t}"),
                    seed,
                    map,
                    top1,
                });
            }
        }
        Ok(rows)
    }

    /// Adaptive CAM points vs uniform-random points, at the base erase prob.
    pub fn run_point_comparison(&mut self, seeds: &[u64]) -> Result<Vec<AblationRow>> {
        let mut rows = Vec::new();
        for (setting, random) in [("adaptive", false), ("random", true)] {
            let mut cfg = self.base.clone();
            cfg.random_erase_points = random;
            for &seed in seeds {
                let (map, top1) = self.run_adapt(&cfg, seed)?;
                rows.push(AblationRow {
                    arm: "points".into(),
                    setting: setting.into(),
                    seed,
                    map,
                    top1,
                });
            }
        }
        Ok(rows)
    }
}
