//! Atmospheric scattering: haze synthesis and inversion, synthetic depth,
//! the hand-crafted pre-processing bank and the domain-shift proxy.
//!
//! A hazy observation of a clear scene `J` is modelled per colour channel as
//!
//! ```text
//! I_c(x) = J_c(x)·t(x) + A·(1 − t(x)),    t(x) = exp(−β·d(x))
//! ```
//!
//! with scene depth `d`, scattering coefficient `β` and global airlight `A`.

mod dataset;
mod domain;
mod enhance;
mod texture;

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::Rng;

pub use dataset::{make_dataset, split_holdout, ClearSource, DatasetSpec, Domain, HazeSample};
pub use domain::{translate_domain, DomainShiftParams};
pub use enhance::{
    contrast_enhance, derive_inputs, gamma_correct, gray_scale, luminance, white_balance,
    DERIVED_CHANNELS, LUMA_WEIGHTS,
};
pub use texture::{fractal_noise, procedural_clear};

/// Default depth ceiling in scene units.
pub const DEFAULT_D_MAX: f64 = 5.0;
/// Default transmission floor used when inverting the model.
pub const DEFAULT_T_MIN: f64 = 0.05;

/// Non-negative scene depth, stored as a `1×1×H×W` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap(Tensor);

impl DepthMap {
    pub fn new(values: Tensor) -> Result<Self> {
        let [n, c, h, w] = values.shape();
        if n != 1 || c != 1 || h == 0 || w == 0 {
            return Err(Error::Input(format!(
                "depth map must be 1x1xHxW, got {:?}",
                values.shape()
            )));
        }
        if !values.all_finite() {
            return Err(Error::Input("depth map has non-finite values".into()));
        }
        if values.min() < 0.0 {
            return Err(Error::Input("depth map has negative values".into()));
        }
        Ok(Self(values))
    }

    pub fn from_grid(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::from_vec([1, 1, height, width], values)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.0.at([0, 0, y, x])
    }
}

/// Scattering coefficient and airlight of one synthesis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HazeParams {
    beta: f64,
    airlight: f64,
}

impl HazeParams {
    pub fn new(beta: f64, airlight: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Parameter(format!("beta must be > 0, got {beta}")));
        }
        if !(0.5..=1.0).contains(&airlight) {
            return Err(Error::Parameter(format!(
                "airlight must lie in [0.5, 1], got {airlight}"
            )));
        }
        Ok(Self { beta, airlight })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn airlight(&self) -> f64 {
        self.airlight
    }
}

/// `t = exp(−β·d)` elementwise; a `1×1×H×W` tensor in `(0, 1]`.
pub fn transmission(depth: &DepthMap, beta: f64) -> Result<Tensor> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Parameter(format!("beta must be > 0, got {beta}")));
    }
    // Underflow would leave (0, 1]; the smallest positive value keeps t valid.
    Ok(depth
        .tensor()
        .map(|d| (-beta * d).exp().max(f64::MIN_POSITIVE)))
}

fn check_transmission(image: &Tensor, t: &Tensor) -> Result<()> {
    let [n, _, h, w] = image.shape();
    let [tn, tc, th, tw] = t.shape();
    if tc != 1 || th != h || tw != w || (tn != n && tn != 1) {
        return Err(Error::Input(format!(
            "transmission {:?} does not broadcast over image {:?}",
            t.shape(),
            image.shape()
        )));
    }
    Ok(())
}

fn t_item(t: &Tensor, b: usize) -> &[f64] {
    if t.batch() == 1 {
        t.plane(0, 0)
    } else {
        t.plane(b, 0)
    }
}

/// Synthesises `I_c = J_c·t + A·(1 − t)`, broadcasting `t` over channels.
pub fn apply_asm(clear: &Tensor, t: &Tensor, airlight: f64) -> Result<Tensor> {
    check_transmission(clear, t)?;
    if t.data().iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
        return Err(Error::Input("transmission must lie in (0, 1]".into()));
    }
    if clear.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Input("clear image must lie in [0, 1]".into()));
    }
    let mut out = clear.clone();
    for b in 0..clear.batch() {
        let tp = t_item(t, b).to_vec();
        for c in 0..clear.channels() {
            for (v, &tt) in out.plane_mut(b, c).iter_mut().zip(&tp) {
                *v = *v * tt + airlight * (1.0 - tt);
            }
        }
    }
    Ok(out)
}

/// Recovers `J_c = (I_c − A·(1 − t')) / t'` with `t' = max(t, t_min)`,
/// clamped to `[0, 1]`.
pub fn invert_asm(hazy: &Tensor, t: &Tensor, airlight: f64, t_min: f64) -> Result<Tensor> {
    if !(t_min > 0.0 && t_min < 1.0) {
        return Err(Error::Parameter(format!(
            "t_min must lie in (0, 1), got {t_min}"
        )));
    }
    check_transmission(hazy, t)?;
    let mut out = hazy.clone();
    for b in 0..hazy.batch() {
        let tp = t_item(t, b).to_vec();
        for c in 0..hazy.channels() {
            for (v, &tt) in out.plane_mut(b, c).iter_mut().zip(&tp) {
                let tt = tt.max(t_min);
                *v = ((*v - airlight * (1.0 - tt)) / tt).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Shape of a synthetic depth field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthKind {
    /// Constant along each row, rising linearly from the top row to the bottom.
    LinearRamp,
    /// Distance from a seeded focal point.
    Radial,
    /// Multi-octave smooth noise.
    SmoothNoise,
}

impl DepthKind {
    pub const ALL: [DepthKind; 3] = [Self::LinearRamp, Self::Radial, Self::SmoothNoise];

    pub fn name(self) -> &'static str {
        match self {
            Self::LinearRamp => "linear_ramp",
            Self::Radial => "radial",
            Self::SmoothNoise => "smooth_noise",
        }
    }
}

impl FromStr for DepthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown depth kind `{s}`")))
    }
}

/// Synthetic depth with the default ceiling [`DEFAULT_D_MAX`].
pub fn synth_depth(kind: DepthKind, height: usize, width: usize, seed: u64) -> Result<DepthMap> {
    synth_depth_with(kind, height, width, seed, DEFAULT_D_MAX)
}

/// Synthetic depth with values in `[0, d_max]`, deterministic per `(kind, seed)`.
pub fn synth_depth_with(
    kind: DepthKind,
    height: usize,
    width: usize,
    seed: u64,
    d_max: f64,
) -> Result<DepthMap> {
    if height < 8 || width < 8 {
        return Err(Error::Parameter(format!(
            "depth maps need at least 8x8, got {height}x{width}"
        )));
    }
    if !(d_max > 0.0 && d_max.is_finite()) {
        return Err(Error::Parameter(format!("d_max must be > 0, got {d_max}")));
    }
    let values = match kind {
        DepthKind::LinearRamp => Tensor::from_fn([1, 1, height, width], |[_, _, y, _]| {
            d_max * y as f64 / (height - 1) as f64
        }),
        DepthKind::Radial => {
            let mut rng = Rng::seed(seed);
            let cy = rng.uniform(0.0, (height - 1) as f64);
            let cx = rng.uniform(0.0, (width - 1) as f64);
            let corners = [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)];
            let reach = corners
                .iter()
                .map(|&(fy, fx)| {
                    let dy = fy * (height - 1) as f64 - cy;
                    let dx = fx * (width - 1) as f64 - cx;
                    (dy * dy + dx * dx).sqrt()
                })
                .fold(f64::MIN_POSITIVE, f64::max);
            Tensor::from_fn([1, 1, height, width], |[_, _, y, x]| {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                (d_max * (dy * dy + dx * dx).sqrt() / reach).min(d_max)
            })
        }
        DepthKind::SmoothNoise => {
            let field = fractal_noise(height, width, 3, 0.5, seed);
            field.map(|v| v * d_max)
        }
    };
    DepthMap::new(values)
}

#[cfg(test)]
mod tests;
