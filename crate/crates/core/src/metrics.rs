//! Full-reference quality metrics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::haze::luminance;
use crate::io::JsonLines;
use crate::tensor::Tensor;

/// Reported when the two images are identical.
pub const PSNR_CAP: f64 = 100.0;

/// Gaussian-weighted SSIM settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

/// Peak signal-to-noise ratio in dB for signals in `[0, 1]`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    psnr_with_peak(a, b, 1.0)
}

pub fn psnr_with_peak(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    a.expect_shape(b.shape(), "psnr")?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// Canonical SSIM on luminance, averaged over every fully contained window
/// and over the batch.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    ssim_with(a, b, &SsimConfig::default())
}

fn gaussian_kernel(cfg: &SsimConfig) -> Vec<f64> {
    let c = (cfg.window / 2) as f64;
    let raw: Vec<f64> = (0..cfg.window)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * cfg.sigma * cfg.sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h×w` plane.
fn filter(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn luma_plane(t: &Tensor, b: usize) -> Vec<f64> {
    let (r, g, bl) = (t.plane(b, 0), t.plane(b, 1), t.plane(b, 2));
    (0..r.len()).map(|i| luminance(r[i], g[i], bl[i])).collect()
}

pub fn ssim_with(a: &Tensor, b: &Tensor, cfg: &SsimConfig) -> Result<f64> {
    a.expect_shape(b.shape(), "ssim")?;
    let [n, c, h, w] = a.shape();
    if c != 3 {
        return Err(Error::Input(format!(
            "ssim needs RGB images, got {c} channels"
        )));
    }
    if h < cfg.window || w < cfg.window {
        return Err(Error::Input(format!(
            "image {h}x{w} is smaller than the {} px SSIM window",
            cfg.window
        )));
    }
    let k = gaussian_kernel(cfg);
    let c1 = cfg.k1 * cfg.k1;
    let c2 = cfg.k2 * cfg.k2;
    let mut total = 0.0;
    for item in 0..n {
        let x = luma_plane(a, item);
        let y = luma_plane(b, item);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (filter(&x, h, w, &k), filter(&y, h, w, &k));
        let (sxx, syy, sxy) = (
            filter(&xx, h, w, &k),
            filter(&yy, h, w, &k),
            filter(&xy, h, w, &k),
        );
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (m1, m2) = (mx[i], my[i]);
            let v1 = sxx[i] - m1 * m1;
            let v2 = syy[i] - m2 * m2;
            let cov = sxy[i] - m1 * m2;
            acc += ((2.0 * m1 * m2 + c1) * (2.0 * cov + c2))
                / ((m1 * m1 + m2 * m2 + c1) * (v1 + v2 + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / n as f64)
}

/// Scores of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-image scores with their means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub psnr_cap: f64,
    pub ssim: SsimConfig,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ReportLine<'a> {
    Image(&'a ImageScore),
    Summary {
        count: usize,
        mean_psnr: f64,
        mean_ssim: f64,
        psnr_cap: f64,
        ssim_window: usize,
    },
}

impl MetricReport {
    pub fn from_scores(images: Vec<ImageScore>) -> Self {
        let n = images.len().max(1) as f64;
        let mean_psnr = images.iter().map(|s| s.psnr).sum::<f64>() / n;
        let mean_ssim = images.iter().map(|s| s.ssim).sum::<f64>() / n;
        Self {
            images,
            mean_psnr,
            mean_ssim,
            psnr_cap: PSNR_CAP,
            ssim: SsimConfig::default(),
        }
    }

    /// Scores `(id, prediction, reference)` triples.
    pub fn evaluate<'a>(
        pairs: impl IntoIterator<Item = (&'a str, &'a Tensor, &'a Tensor)>,
    ) -> Result<Self> {
        let scores = pairs
            .into_iter()
            .map(|(id, p, r)| {
                Ok(ImageScore {
                    id: id.to_string(),
                    psnr: psnr(p, r)?,
                    ssim: ssim(p, r)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_scores(scores))
    }

    /// One JSON line per image, then a summary line.
    pub fn write_jsonl<W: Write>(&self, out: W) -> Result<()> {
        let mut lines = JsonLines::new(out);
        for s in &self.images {
            lines.write(&ReportLine::Image(s))?;
        }
        lines.write(&ReportLine::Summary {
            count: self.images.len(),
            mean_psnr: self.mean_psnr,
            mean_ssim: self.mean_ssim,
            psnr_cap: self.psnr_cap,
            ssim_window: self.ssim.window,
        })?;
        lines.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::Rng;

    fn random(seed: u64, shape: [usize; 4]) -> Tensor {
        let mut rng = Rng::seed(seed);
        Tensor::from_fn(shape, |_| rng.uniform(0.0, 1.0))
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Tensor::full([1, 3, 8, 8], 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = Tensor::full([1, 3, 8, 8], 0.4);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let z = Tensor::zeros([1, 3, 8, 8]);
        let o = Tensor::full([1, 3, 8, 8], 1.0);
        assert!(psnr(&z, &o).unwrap().abs() < 1e-12);
        assert!(psnr(&z, &Tensor::zeros([1, 3, 4, 4])).is_err());
    }

    #[test]
    fn psnr_decreases_with_error() {
        let a = Tensor::full([1, 3, 4, 4], 0.1);
        let mut last = f64::INFINITY;
        for k in 1..9 {
            let b = Tensor::full([1, 3, 4, 4], 0.1 + 0.1 * k as f64);
            let p = psnr(&a, &b).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        for seed in 0..5 {
            let a = random(seed, [1, 3, 16, 20]);
            let b = random(seed + 100, [1, 3, 16, 20]);
            assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
            assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
            let inv = a.map(|v| 1.0 - v);
            assert!(ssim(&a, &inv).unwrap() < 1.0);
        }
    }

    #[test]
    fn ssim_constant_images() {
        let a = Tensor::full([1, 3, 12, 12], 0.5);
        let b = Tensor::full([1, 3, 12, 12], 0.6);
        let c1 = 0.01f64.powi(2);
        let expected = (2.0 * 0.5 * 0.6 + c1) / (0.25 + 0.36 + c1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-12);
        assert!(ssim(&a, &Tensor::full([1, 3, 12, 12], 0.5)).unwrap() == 1.0);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Tensor::zeros([1, 3, 10, 16]);
        assert!(matches!(ssim(&a, &a), Err(Error::Input(_))));
    }

    #[test]
    fn report_means_match_rows() {
        let refs: Vec<Tensor> = (0..3).map(|s| random(s, [1, 3, 12, 12])).collect();
        let preds: Vec<Tensor> = (0..3).map(|s| random(s + 9, [1, 3, 12, 12])).collect();
        let ids = ["a", "b", "c"];
        let report = MetricReport::evaluate((0..3).map(|i| (ids[i], &preds[i], &refs[i]))).unwrap();
        let mean: f64 = report.images.iter().map(|s| s.psnr).sum::<f64>() / 3.0;
        assert_eq!(report.mean_psnr, mean);
        let mut buf = Vec::new();
        report.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().last().unwrap().contains("\"summary\""));
    }
}
