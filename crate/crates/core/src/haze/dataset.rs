//! Paired hazy/clear dataset synthesis.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    apply_asm, procedural_clear, synth_depth_with, translate_domain, transmission, DepthKind,
    DepthMap, DomainShiftParams, HazeParams, DEFAULT_D_MAX,
};
use crate::error::{Error, Result};
use crate::io;
use crate::tensor::Tensor;
use crate::util::{derive_seed, Rng};

/// Where a sample came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// Produced exactly by the scattering model.
    Synthetic,
    /// Additionally re-styled by the domain-shift proxy.
    Translated,
}

/// One paired record.
#[derive(Clone, Debug, PartialEq)]
pub struct HazeSample {
    pub id: usize,
    pub seed: u64,
    pub clear: Tensor,
    pub hazy: Tensor,
    /// `1×1×H×W` transmission in `(0, 1]`.
    pub t: Tensor,
    pub beta: f64,
    pub airlight: f64,
    pub depth: Option<DepthMap>,
    pub domain: Domain,
}

impl HazeSample {
    /// Max deviation of `hazy` from the model re-applied to `(clear, t, A)`.
    pub fn reconstruction_error(&self) -> Result<f64> {
        let again = apply_asm(&self.clear, &self.t, self.airlight)?;
        Ok(again.max_abs_diff(&self.hazy))
    }
}

/// Source of clear scenes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClearSource {
    /// Built-in smooth-noise textures.
    #[default]
    Procedural,
    /// PNG files from a directory, resized to the sample size.
    Directory(PathBuf),
}

/// Dataset generation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n: usize,
    pub beta_range: [f64; 2],
    pub airlight_range: [f64; 2],
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub d_max: f64,
    pub domain_shift: Option<DomainShiftParams>,
    pub clear_source: ClearSource,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n: 16,
            beta_range: [0.4, 1.6],
            airlight_range: [0.7, 1.0],
            height: 48,
            width: 48,
            seed: 0,
            d_max: DEFAULT_D_MAX,
            domain_shift: None,
            clear_source: ClearSource::Procedural,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Parameter("dataset needs n >= 1".into()));
        }
        let [b0, b1] = self.beta_range;
        HazeParams::new(b0, 0.75)?;
        HazeParams::new(b1, 0.75)?;
        if b0 > b1 {
            return Err(Error::Parameter("beta range is reversed".into()));
        }
        let [a0, a1] = self.airlight_range;
        HazeParams::new(1.0, a0)?;
        HazeParams::new(1.0, a1)?;
        if a0 > a1 {
            return Err(Error::Parameter("airlight range is reversed".into()));
        }
        if let Some(p) = &self.domain_shift {
            p.validate()?;
        }
        Ok(())
    }
}

/// Generates `spec.n` samples on `workers` threads.
///
/// Every sample draws from its own seed derived from `(spec.seed, index)`, so
/// the output does not depend on the worker count.
pub fn make_dataset(spec: &DatasetSpec, workers: usize) -> Result<Vec<HazeSample>> {
    spec.validate()?;
    let clears = match &spec.clear_source {
        ClearSource::Procedural => None,
        ClearSource::Directory(dir) => {
            let files = io::list_pngs(dir)?;
            if files.is_empty() {
                return Err(Error::Input(format!("no PNG images in {}", dir.display())));
            }
            Some(files)
        }
    };
    let build = |i: usize| -> Result<HazeSample> {
        let seed = derive_seed(spec.seed, i as u64);
        let mut rng = Rng::seed(seed);
        let beta = rng.uniform(spec.beta_range[0], spec.beta_range[1]);
        let airlight = rng.uniform(spec.airlight_range[0], spec.airlight_range[1]);
        let kind = DepthKind::ALL[rng.below(DepthKind::ALL.len())];
        let depth = synth_depth_with(
            kind,
            spec.height,
            spec.width,
            derive_seed(seed, 1),
            spec.d_max,
        )?;
        let clear = match &clears {
            None => procedural_clear(spec.height, spec.width, derive_seed(seed, 2)),
            Some(files) => io::load_rgb_resized(&files[i % files.len()], spec.height, spec.width)?,
        };
        let t = transmission(&depth, beta)?;
        let mut hazy = apply_asm(&clear, &t, airlight)?;
        let mut domain = Domain::Synthetic;
        if let Some(p) = &spec.domain_shift {
            hazy = translate_domain(&hazy, p, derive_seed(seed, 3))?;
            domain = Domain::Translated;
        }
        Ok(HazeSample {
            id: i,
            seed,
            clear,
            hazy,
            t,
            beta,
            airlight,
            depth: Some(depth),
            domain,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| (0..spec.n).into_par_iter().map(build).collect())
}

/// Deterministic split by index: every `k`-th sample (10% by default) goes
/// to the held-out half.
pub fn split_holdout(samples: &[HazeSample], every: usize) -> (Vec<HazeSample>, Vec<HazeSample>) {
    let every = every.max(2);
    let (held, train): (Vec<_>, Vec<_>) = samples
        .iter()
        .cloned()
        .partition(|s| s.id % every == every - 1);
    (train, held)
}
