//! Procedural smooth-noise textures used as clear scenes and depth fields.

use crate::tensor::Tensor;
use crate::util::{derive_seed, Rng};

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// One octave of value noise on a `cells × cells` lattice.
fn value_noise(height: usize, width: usize, cells: usize, rng: &mut Rng) -> Vec<f64> {
    let stride = cells + 1;
    let lattice: Vec<f64> = (0..stride * stride)
        .map(|_| rng.uniform(0.0, 1.0))
        .collect();
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let fy = y as f64 / height as f64 * cells as f64;
        let (iy, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
        for x in 0..width {
            let fx = x as f64 / width as f64 * cells as f64;
            let (ix, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
            let v00 = lattice[iy * stride + ix];
            let v01 = lattice[iy * stride + ix + 1];
            let v10 = lattice[(iy + 1) * stride + ix];
            let v11 = lattice[(iy + 1) * stride + ix + 1];
            let top = v00 + (v01 - v00) * tx;
            let bottom = v10 + (v11 - v10) * tx;
            out.push(top + (bottom - top) * ty);
        }
    }
    out
}

/// Multi-octave value noise, min-max normalised to `[0, 1]`, as `1×1×H×W`.
pub fn fractal_noise(
    height: usize,
    width: usize,
    octaves: usize,
    persistence: f64,
    seed: u64,
) -> Tensor {
    let mut rng = Rng::seed(seed);
    let mut acc = vec![0.0; height * width];
    let mut amplitude = 1.0;
    for o in 0..octaves.max(1) {
        let cells = 2usize << o;
        for (a, v) in acc
            .iter_mut()
            .zip(value_noise(height, width, cells, &mut rng))
        {
            *a += amplitude * v;
        }
        amplitude *= persistence;
    }
    let lo = acc.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let data = acc
        .into_iter()
        .map(|v| ((v - lo) / span).clamp(0.0, 1.0))
        .collect();
    Tensor::from_vec([1, 1, height, width], data).expect("noise size")
}

/// A colourful clear scene: shared luminance structure plus per-channel tint.
pub fn procedural_clear(height: usize, width: usize, seed: u64) -> Tensor {
    let structure = fractal_noise(height, width, 4, 0.55, derive_seed(seed, 0));
    let tints: Vec<Tensor> = (0..3)
        .map(|c| fractal_noise(height, width, 2, 0.5, derive_seed(seed, 1 + c)))
        .collect();
    let mut rng = Rng::seed(derive_seed(seed, 9));
    let gains: Vec<f64> = (0..3).map(|_| rng.uniform(0.6, 1.0)).collect();
    Tensor::from_fn([1, 3, height, width], |[_, c, y, x]| {
        let s = structure.at([0, 0, y, x]);
        let t = tints[c].at([0, 0, y, x]);
        (gains[c] * (0.65 * s + 0.35 * t)).clamp(0.0, 1.0)
    })
}
