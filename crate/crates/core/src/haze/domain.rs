//! Parametric stand-in for learned synthetic-to-real image translation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::Rng;

/// Knobs of the domain-shift proxy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShiftParams {
    /// Per-channel multiplier on the effective scattering coefficient.
    pub beta_scale_per_channel: [f64; 3],
    /// Additive colour cast, each in `[−0.1, 0.1]`.
    pub color_cast: [f64; 3],
    pub gamma_jitter: f64,
    /// Standard deviation of additive Gaussian noise, at most 0.05.
    pub noise_sigma: f64,
}

impl Default for DomainShiftParams {
    fn default() -> Self {
        Self {
            beta_scale_per_channel: [1.15, 1.0, 0.9],
            color_cast: [0.03, 0.0, -0.02],
            gamma_jitter: 1.1,
            noise_sigma: 0.01,
        }
    }
}

impl DomainShiftParams {
    /// The transform that leaves images untouched.
    pub fn identity() -> Self {
        Self {
            beta_scale_per_channel: [1.0; 3],
            color_cast: [0.0; 3],
            gamma_jitter: 1.0,
            noise_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self
            .beta_scale_per_channel
            .iter()
            .chain(&self.color_cast)
            .chain([&self.gamma_jitter, &self.noise_sigma])
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Parameter(
                "domain shift has non-finite values".into(),
            ));
        }
        if self.beta_scale_per_channel.iter().any(|&s| s <= 0.0) {
            return Err(Error::Parameter("beta scales must be > 0".into()));
        }
        if self.color_cast.iter().any(|c| c.abs() > 0.1) {
            return Err(Error::Parameter(
                "colour cast must lie in [-0.1, 0.1]".into(),
            ));
        }
        if !(0.5..=2.0).contains(&self.gamma_jitter) {
            return Err(Error::Parameter(format!(
                "gamma jitter {} is not near 1 (allowed [0.5, 2])",
                self.gamma_jitter
            )));
        }
        if !(0.0..=0.05).contains(&self.noise_sigma) {
            return Err(Error::Parameter("noise sigma must lie in [0, 0.05]".into()));
        }
        Ok(())
    }
}

/// Re-styles a hazy image: channel-dependent haze re-weighting, colour cast,
/// gamma jitter and Gaussian noise, clamped to `[0, 1]`.
///
/// The re-weighting raises the complement `1 − I_c` to the power `s_c`. Under
/// white airlight `1 − I_c = (1 − J_c)·t`, so the power rescales the effective
/// scattering coefficient of channel `c` by `s_c` (up to the scene term).
pub fn translate_domain(hazy: &Tensor, params: &DomainShiftParams, seed: u64) -> Result<Tensor> {
    params.validate()?;
    if hazy.channels() != 3 {
        return Err(Error::Input("domain translation needs RGB input".into()));
    }
    if hazy.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Input("hazy image must lie in [0, 1]".into()));
    }
    let mut rng = Rng::seed(seed);
    let mut out = hazy.clone();
    for b in 0..hazy.batch() {
        for c in 0..3 {
            let s = params.beta_scale_per_channel[c];
            let cast = params.color_cast[c];
            for v in out.plane_mut(b, c).iter_mut() {
                let reweighted = if s == 1.0 {
                    *v
                } else {
                    1.0 - (1.0 - *v).powf(s)
                };
                let cast_v = (reweighted + cast).clamp(0.0, 1.0);
                let mut y = cast_v.powf(params.gamma_jitter);
                if params.noise_sigma > 0.0 {
                    y += params.noise_sigma * rng.normal();
                }
                *v = y.clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::haze::procedural_clear;

    #[test]
    fn identity_is_exact() {
        let img = procedural_clear(16, 16, 1);
        let out = translate_domain(&img, &DomainShiftParams::identity(), 3).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn noiseless_output_ignores_seed() {
        let img = procedural_clear(16, 16, 2);
        let p = DomainShiftParams {
            noise_sigma: 0.0,
            ..Default::default()
        };
        assert_eq!(
            translate_domain(&img, &p, 1).unwrap(),
            translate_domain(&img, &p, 999).unwrap()
        );
        let noisy = DomainShiftParams::default();
        assert_ne!(
            translate_domain(&img, &noisy, 1).unwrap(),
            translate_domain(&img, &noisy, 2).unwrap()
        );
    }

    #[test]
    fn rejects_out_of_range_params() {
        let img = Tensor::full([1, 3, 4, 4], 0.5);
        let bad = DomainShiftParams {
            noise_sigma: 0.2,
            ..Default::default()
        };
        assert!(matches!(
            translate_domain(&img, &bad, 0),
            Err(Error::Parameter(_))
        ));
        let bad = DomainShiftParams {
            color_cast: [0.2, 0.0, 0.0],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
