//! Desk-scale comparison studies: architecture variants, direct against
//! indirect estimation, and finetuning with or without distillation.
//!
//! Every study trains each arm on the same samples for the same number of
//! steps, evaluates on a held-out split and returns a [`Comparison`] table.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::haze::{make_dataset, split_holdout, DatasetSpec, DomainShiftParams, HazeSample};
use crate::losses::PerceptualExtractor;
use crate::metrics::MetricReport;
use crate::network::{build, GridConfig, OutputHead, VariantSpec};
use crate::training::{
    evaluate, finetune_itkt, finetune_plain, pretrain, RunHooks, Teacher, TrainConfig, TrainMode,
};
use crate::util::derive_seed;

/// Everything a run depends on besides the seed flag, as one TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Worker threads for dataset synthesis. One keeps runs reproducible
    /// byte for byte across machines.
    pub workers: usize,
    pub data: DatasetSpec,
    pub grid: GridConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    /// Every this many samples, one is held out for evaluation.
    pub holdout_every: usize,
    /// Domain shift for the finetuning and translated evaluation sets.
    pub shift: DomainShiftParams,
    /// Seeds of the distillation study.
    pub seeds: Vec<u64>,
    /// Perceptual extractor weights; a seeded random extractor otherwise.
    pub extractor: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            data: DatasetSpec::default(),
            grid: GridConfig::default(),
            pretrain: TrainConfig::default(),
            finetune: TrainConfig {
                mode: TrainMode::FinetuneItkt,
                ..TrainConfig::default()
            },
            holdout_every: 4,
            shift: DomainShiftParams::default(),
            seeds: vec![0, 1, 2],
            extractor: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Replaces every seed in the file with ones derived from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.seed = seed;
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.grid.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.shift.validate()?;
        if self.holdout_every < 2 {
            return Err(Error::Config("holdout_every must be at least 2".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("the seed list is empty".into()));
        }
        Ok(())
    }

    /// The perceptual extractor named by the config.
    pub fn extractor(&self) -> Result<PerceptualExtractor> {
        match &self.extractor {
            Some(path) => PerceptualExtractor::load(path),
            None => Ok(PerceptualExtractor::seeded(
                self.pretrain.perceptual_widths,
                derive_seed(self.seed, 0xE7),
            )),
        }
    }

    /// Synthetic `(train, test)` split for `seed`.
    pub fn synthetic_split(&self, seed: u64) -> Result<(Vec<HazeSample>, Vec<HazeSample>)> {
        let spec = DatasetSpec {
            seed,
            domain_shift: None,
            ..self.data.clone()
        };
        Ok(split_holdout(
            &make_dataset(&spec, self.workers)?,
            self.holdout_every,
        ))
    }

    /// Translated `(train, test)` split for `seed`, disjoint from the
    /// synthetic one.
    pub fn translated_split(&self, seed: u64) -> Result<(Vec<HazeSample>, Vec<HazeSample>)> {
        let spec = DatasetSpec {
            seed: derive_seed(seed, 0x7A),
            domain_shift: Some(self.shift),
            ..self.data.clone()
        };
        Ok(split_holdout(
            &make_dataset(&spec, self.workers)?,
            self.holdout_every,
        ))
    }
}

/// SHA-256 over the pixels of every sample, in order.
pub fn data_hash<'a>(sets: impl IntoIterator<Item = &'a [HazeSample]>) -> String {
    let mut h = Sha256::new();
    for set in sets {
        for s in set {
            h.update(s.hazy.to_le_bytes());
            h.update(s.clear.to_le_bytes());
        }
    }
    format!("{:x}", h.finalize())
}

/// Score of one arm under one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedScore {
    pub seed: u64,
    pub psnr: f64,
    pub ssim: f64,
}

/// One table row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    /// Mean over seeds.
    pub psnr: f64,
    pub ssim: f64,
    pub param_count: usize,
    /// Optimizer steps per seed.
    pub steps: u64,
    pub per_seed: Vec<SeedScore>,
    /// Set when the arm failed; the other rows still ran.
    pub error: Option<String>,
}

impl ComparisonRow {
    fn from_scores(label: &str, param_count: usize, steps: u64, per_seed: Vec<SeedScore>) -> Self {
        let n = per_seed.len().max(1) as f64;
        Self {
            label: label.into(),
            psnr: per_seed.iter().map(|s| s.psnr).sum::<f64>() / n,
            ssim: per_seed.iter().map(|s| s.ssim).sum::<f64>() / n,
            param_count,
            steps,
            per_seed,
            error: None,
        }
    }

    fn failed(label: &str, err: &Error) -> Self {
        Self {
            label: label.into(),
            psnr: f64::NAN,
            ssim: f64::NAN,
            param_count: 0,
            steps: 0,
            per_seed: Vec::new(),
            error: Some(err.to_string()),
        }
    }
}

/// A finished study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub title: String,
    pub rows: Vec<ComparisonRow>,
    pub seeds: Vec<u64>,
    /// Hash of every sample the arms saw, train and test.
    pub data_hash: String,
}

impl Comparison {
    pub fn row(&self, label: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// True when every arm that ran took the same number of steps.
    pub fn same_steps(&self) -> bool {
        let mut steps = self
            .rows
            .iter()
            .filter(|r| r.error.is_none())
            .map(|r| r.steps);
        match steps.next() {
            Some(first) => steps.all(|s| s == first),
            None => true,
        }
    }

    /// Plain-text table with one line per arm.
    pub fn to_markdown(&self) -> String {
        let mut out = format!(
            "{}\n\n| variant | PSNR (dB) | SSIM | params | steps |\n|---|---|---|---|---|\n",
            self.title
        );
        for r in &self.rows {
            match &r.error {
                None => out.push_str(&format!(
                    "| {} | {:.2} | {:.4} | {} | {} |\n",
                    r.label, r.psnr, r.ssim, r.param_count, r.steps
                )),
                Some(e) => out.push_str(&format!("| {} | failed: {e} | | | |\n", r.label)),
            }
        }
        out
    }
}

fn score(report: &MetricReport, seed: u64) -> SeedScore {
    SeedScore {
        seed,
        psnr: report.mean_psnr,
        ssim: report.mean_ssim,
    }
}

/// Pretrains `grid` on `train` and scores it on `test`.
fn train_arm(
    cfg: &ExperimentConfig,
    grid: &GridConfig,
    ext: &PerceptualExtractor,
    train: &[HazeSample],
    test: &[HazeSample],
    seed: u64,
) -> Result<(SeedScore, usize, u64)> {
    let (model, params) = build(grid.clone(), seed)?;
    let train_cfg = TrainConfig {
        mode: TrainMode::Pretrain,
        seed,
        ..cfg.pretrain.clone()
    };
    let out = pretrain(&model, params, train, &train_cfg, ext, RunHooks::default())?;
    let report = evaluate(&model, &out.params, test)?;
    Ok((score(&report, seed), model.param_count(), out.state.step))
}

fn arms_on_synthetic(
    cfg: &ExperimentConfig,
    title: &str,
    arms: &[(String, GridConfig)],
) -> Result<Comparison> {
    cfg.validate()?;
    let ext = cfg.extractor()?;
    let (train, test) = cfg.synthetic_split(cfg.data.seed)?;
    let rows = arms
        .iter()
        .map(
            |(label, grid)| match train_arm(cfg, grid, &ext, &train, &test, cfg.seed) {
                Ok((s, params, steps)) => ComparisonRow::from_scores(label, params, steps, vec![s]),
                Err(e) => ComparisonRow::failed(label, &e),
            },
        )
        .collect();
    Ok(Comparison {
        title: title.into(),
        rows,
        seeds: vec![cfg.seed],
        data_hash: data_hash([train.as_slice(), test.as_slice()]),
    })
}

/// Trains every variant of `cfg.grid` under one seed and one dataset.
pub fn variant_table(cfg: &ExperimentConfig, variants: &[VariantSpec]) -> Result<Comparison> {
    let arms: Vec<(String, GridConfig)> = variants
        .iter()
        .map(|&v| (v.name().to_string(), cfg.grid.clone().variant(v)))
        .collect();
    arms_on_synthetic(cfg, "Architecture variants", &arms)
}

/// Direct against indirect estimation with identical data, seed and steps.
pub fn head_comparison(cfg: &ExperimentConfig) -> Result<Comparison> {
    let arms = [OutputHead::Direct, OutputHead::Indirect]
        .map(|h| (h.name().to_string(), cfg.grid.clone().head(h)));
    arms_on_synthetic(cfg, "Estimation strategies", &arms)
}

pub const PRETRAINED_ONLY: &str = "pretrained_only";
pub const WITHOUT_ITKT: &str = "without_itkt";
pub const WITH_ITKT: &str = "with_itkt";

/// Pretrained-only against finetuning without and with distillation, scored
/// on held-out translated samples, once per seed in `cfg.seeds`.
pub fn itkt_study(cfg: &ExperimentConfig) -> Result<Comparison> {
    cfg.validate()?;
    let ext = cfg.extractor()?;
    let mut scores: [Vec<SeedScore>; 3] = Default::default();
    let mut steps = [0u64; 3];
    let mut hashes = Vec::new();
    let mut param_count = 0;
    for &seed in &cfg.seeds {
        let (syn_train, syn_test) = cfg.synthetic_split(seed)?;
        let (tr_train, tr_test) = cfg.translated_split(seed)?;
        hashes.push(data_hash([
            syn_train.as_slice(),
            syn_test.as_slice(),
            tr_train.as_slice(),
            tr_test.as_slice(),
        ]));
        let (model, params) = build(cfg.grid.clone(), seed)?;
        param_count = model.param_count();
        let pre_cfg = TrainConfig {
            mode: TrainMode::Pretrain,
            seed,
            ..cfg.pretrain.clone()
        };
        let pre = pretrain(
            &model,
            params,
            &syn_train,
            &pre_cfg,
            &ext,
            RunHooks::default(),
        )?;
        let teacher = Teacher::new(model.clone(), pre.params)?;
        scores[0].push(score(&evaluate(&model, &teacher.params, &tr_test)?, seed));
        steps[0] = pre.state.step;

        let plain_cfg = TrainConfig {
            mode: TrainMode::FinetunePlain,
            seed,
            ..cfg.finetune.clone()
        };
        let plain = finetune_plain(
            &model,
            teacher.params.clone(),
            &tr_train,
            &plain_cfg,
            &ext,
            RunHooks::default(),
        )?;
        scores[1].push(score(&evaluate(&model, &plain.params, &tr_test)?, seed));
        steps[1] = plain.state.step;

        let itkt_cfg = TrainConfig {
            mode: TrainMode::FinetuneItkt,
            ..plain_cfg
        };
        let kt = finetune_itkt(&teacher, &tr_train, &itkt_cfg, &ext, RunHooks::default())?;
        scores[2].push(score(&evaluate(&model, &kt.params, &tr_test)?, seed));
        steps[2] = kt.state.step;
    }
    let [pre, plain, kt] = scores;
    Ok(Comparison {
        title: "Distillation on translated data".into(),
        rows: vec![
            ComparisonRow::from_scores(PRETRAINED_ONLY, param_count, steps[0], pre),
            ComparisonRow::from_scores(WITHOUT_ITKT, param_count, steps[1], plain),
            ComparisonRow::from_scores(WITH_ITKT, param_count, steps[2], kt),
        ],
        seeds: cfg.seeds.clone(),
        data_hash: format!("{:x}", Sha256::digest(hashes.join(",").as_bytes())),
    })
}
