//! Hand-crafted enhancements and the 16-channel derived-input stack.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Luma weights for R, G, B.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Channel count of [`derive_inputs`].
pub const DERIVED_CHANNELS: usize = 16;

const CONTRAST_GAIN: f64 = 2.0;

fn expect_rgb(img: &Tensor, what: &str) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::Input(format!(
            "{what} needs 3 channels, got {}",
            img.channels()
        )));
    }
    Ok(())
}

/// Weighted luma, normalised by the weight sum so that white maps to exactly 1.
#[inline]
pub fn luminance(r: f64, g: f64, b: f64) -> f64 {
    let [wr, wg, wb] = LUMA_WEIGHTS;
    (wr * r + wg * g + wb * b) / (wr + wg + wb)
}

/// Gray-world white balance: each channel is scaled by
/// `mean luminance / channel mean`, then clamped.
pub fn white_balance(img: &Tensor) -> Result<Tensor> {
    expect_rgb(img, "white balance")?;
    let mut out = img.clone();
    let p = img.plane_len() as f64;
    for b in 0..img.batch() {
        let means: Vec<f64> = (0..3)
            .map(|c| img.plane(b, c).iter().sum::<f64>() / p)
            .collect();
        let gray = luminance(means[0], means[1], means[2]);
        for (c, &m) in means.iter().enumerate() {
            let gain = if m > 1e-12 { gray / m } else { 1.0 };
            out.plane_mut(b, c)
                .iter_mut()
                .for_each(|v| *v = (*v * gain).clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

/// Linear stretch about the per-image mean: `clamp(μ + 2·(x − μ))`.
pub fn contrast_enhance(img: &Tensor) -> Result<Tensor> {
    let mut out = img.clone();
    for b in 0..img.batch() {
        let item = out.item_mut(b);
        let mean = item.iter().sum::<f64>() / item.len() as f64;
        item.iter_mut()
            .for_each(|v| *v = (mean + CONTRAST_GAIN * (*v - mean)).clamp(0.0, 1.0));
    }
    Ok(out)
}

/// Elementwise power `x^γ`.
pub fn gamma_correct(img: &Tensor, gamma: f64) -> Result<Tensor> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Parameter(format!("gamma must be > 0, got {gamma}")));
    }
    Ok(img.map(|v| v.max(0.0).powf(gamma).min(1.0)))
}

/// Single-channel luma image.
pub fn gray_scale(img: &Tensor) -> Result<Tensor> {
    expect_rgb(img, "gray scale")?;
    let [n, _, h, w] = img.shape();
    Ok(Tensor::from_fn([n, 1, h, w], |[b, _, y, x]| {
        luminance(
            img.at([b, 0, y, x]),
            img.at([b, 1, y, x]),
            img.at([b, 2, y, x]),
        )
        .clamp(0.0, 1.0)
    }))
}

/// Stacks the hazy image with its enhancements in a fixed order:
///
/// | channels | content            |
/// |----------|--------------------|
/// | 0–2      | hazy RGB           |
/// | 3–5      | white balanced     |
/// | 6–8      | contrast enhanced  |
/// | 9–11     | gamma 1.5          |
/// | 12–14    | gamma 2.5          |
/// | 15       | gray scale         |
pub fn derive_inputs(hazy: &Tensor) -> Result<Tensor> {
    expect_rgb(hazy, "derived inputs")?;
    let wb = white_balance(hazy)?;
    let ce = contrast_enhance(hazy)?;
    let g15 = gamma_correct(hazy, 1.5)?;
    let g25 = gamma_correct(hazy, 2.5)?;
    let gs = gray_scale(hazy)?;
    Tensor::concat_channels(&[hazy, &wb, &ce, &g15, &g25, &gs])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rgb(r: f64, g: f64, b: f64) -> Tensor {
        Tensor::from_fn([1, 3, 4, 4], |[_, c, _, _]| [r, g, b][c])
    }

    #[test]
    fn gray_world_fixed_point() {
        let img = Tensor::full([1, 3, 8, 8], 0.5);
        assert_eq!(white_balance(&img).unwrap(), img);
    }

    #[test]
    fn white_balance_equalises_channel_means() {
        let img = rgb(0.6, 0.4, 0.2);
        let wb = white_balance(&img).unwrap();
        let m: Vec<f64> = (0..3).map(|c| wb.plane(0, c)[0]).collect();
        assert!((m[0] - m[1]).abs() < 1e-12 && (m[1] - m[2]).abs() < 1e-12);
    }

    #[test]
    fn gamma_values() {
        let img = Tensor::full([1, 3, 2, 2], 0.25);
        assert_eq!(gamma_correct(&img, 1.0).unwrap(), img);
        let g = gamma_correct(&img, 2.5).unwrap();
        assert!((g.data()[0] - 0.03125).abs() < 1e-15);
        assert!(matches!(gamma_correct(&img, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(
            gamma_correct(&img, -1.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn gray_values() {
        let red = gray_scale(&rgb(1.0, 0.0, 0.0)).unwrap();
        let expected = 0.299 * 1.0 + 0.587 * 0.0 + 0.114 * 0.0;
        assert!((red.data()[0] - expected).abs() < 1e-12);
        let white = gray_scale(&rgb(1.0, 1.0, 1.0)).unwrap();
        assert!(white.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn contrast_constant_fixed_point() {
        let img = Tensor::full([1, 3, 5, 5], 0.37);
        let ce = contrast_enhance(&img).unwrap();
        assert!(ce.max_abs_diff(&img) < 1e-15);
    }

    #[test]
    fn derived_stack_layout() {
        let img = crate::haze::procedural_clear(16, 16, 3);
        let d = derive_inputs(&img).unwrap();
        assert_eq!(d.channels(), DERIVED_CHANNELS);
        assert!(d.min() >= 0.0 && d.max() <= 1.0);
        assert_eq!(d.plane(0, 1), img.plane(0, 1));
        let g25 = gamma_correct(&img, 2.5).unwrap();
        assert_eq!(d.plane(0, 13), g25.plane(0, 1));
        let gs = gray_scale(&img).unwrap();
        assert_eq!(d.plane(0, 15), gs.plane(0, 0));
        assert!(derive_inputs(&Tensor::zeros([1, 1, 4, 4])).is_err());
    }
}
