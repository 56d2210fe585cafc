//! Training objectives: smooth-L1 fidelity, multi-stage perceptual loss and
//! the tap-mimicking distillation term, plus their weighted sum.
//!
//! Every loss comes twice: a graph form recording onto a [`Graph`] for
//! training, and a plain form on tensors for evaluation and tests.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::autograd::{GradMode, Graph, Var};
use crate::error::{Error, Result};
use crate::network::{FeatureTap, TapVar};
use crate::tensor::Tensor;
use crate::util::{derive_seed, Rng};

/// Coefficients of the perceptual and distillation terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_kt: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_p: 0.04,
            lambda_kt: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_p >= 0.0 && self.lambda_kt >= 0.0)
            || !self.lambda_p.is_finite()
            || !self.lambda_kt.is_finite()
        {
            return Err(Error::Config(format!(
                "loss weights must be finite and >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// `fid + λ_P·perc + λ_KT·itkt`.
pub fn total_loss(fid: f64, perc: f64, itkt: f64, w: &LossWeights) -> f64 {
    fid + w.lambda_p * perc + w.lambda_kt * itkt
}

/// Mean smooth-L1 over every pixel and channel.
pub fn fidelity_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let mut g = Graph::new(GradMode::Frozen);
    let (p, t) = (g.constant(pred.clone()), g.constant(target.clone()));
    let l = fidelity(&mut g, p, t)?;
    Ok(g.value(l).to_scalar())
}

pub fn fidelity(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    g.smooth_l1_mean(pred, target)
}

/// Sum of absolute differences per tap, divided by the batch size and
/// averaged over the taps. Taps must line up by position.
pub fn itkt_loss(student: &[FeatureTap], teacher: &[FeatureTap]) -> Result<f64> {
    let mut g = Graph::new(GradMode::Frozen);
    let taps: Vec<_> = student
        .iter()
        .map(|t| (t.position.0, t.position.1, g.constant(t.tensor.clone())))
        .collect();
    let l = itkt(&mut g, &taps, teacher)?;
    Ok(g.value(l).to_scalar())
}

/// Graph form of [`itkt_loss`]; the teacher side is constant.
pub fn itkt(g: &mut Graph, student: &[TapVar], teacher: &[FeatureTap]) -> Result<Var> {
    if student.len() != teacher.len() || student.is_empty() {
        return Err(Error::Input(format!(
            "{} student taps vs {} teacher taps",
            student.len(),
            teacher.len()
        )));
    }
    let mut terms = Vec::with_capacity(student.len());
    for (&(r, c, s), t) in student.iter().zip(teacher) {
        if (r, c) != t.position {
            return Err(Error::Input(format!(
                "student tap at {:?} paired with teacher tap at {:?}",
                (r, c),
                t.position
            )));
        }
        let tv = g.constant(t.tensor.clone());
        let batch = t.tensor.batch() as f64;
        terms.push((g.abs_error_sum(s, tv, batch)?, 1.0 / student.len() as f64));
    }
    g.weighted_sum(&terms)
}

const STAGE_CONVS: [usize; 3] = [2, 2, 3];

/// Frozen three-stage feature extractor for the perceptual loss.
///
/// Stage `l` runs at 1/2^l resolution; its features are the rectified output
/// of the stage's last convolution. The default weights are random but fixed
/// by a seed.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualExtractor {
    widths: [usize; 3],
    weights: std::collections::BTreeMap<String, Tensor>,
}

fn layer_name(stage: usize, k: usize) -> String {
    format!("stage{stage}.conv{k}")
}

fn layer_shapes(widths: [usize; 3]) -> Vec<(String, [usize; 4])> {
    let mut out = Vec::new();
    let mut cin = 3;
    for (stage, (&w, &n)) in widths.iter().zip(&STAGE_CONVS).enumerate() {
        for k in 0..n {
            out.push((format!("{}.weight", layer_name(stage, k)), [w, cin, 3, 3]));
            out.push((format!("{}.bias", layer_name(stage, k)), [w, 1, 1, 1]));
            cin = w;
        }
    }
    out
}

impl Default for PerceptualExtractor {
    fn default() -> Self {
        Self::seeded([64, 128, 256], 0)
    }
}

impl PerceptualExtractor {
    /// Random weights with a variance that keeps rectified activations at a
    /// steady scale through the stack.
    pub fn seeded(widths: [usize; 3], seed: u64) -> Self {
        let mut weights = std::collections::BTreeMap::new();
        for (i, (name, shape)) in layer_shapes(widths).into_iter().enumerate() {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else {
                let bound = (6.0 / (shape[1] * 9) as f64).sqrt();
                let mut rng = Rng::seed(derive_seed(seed, i as u64));
                Tensor::from_fn(shape, |_| rng.uniform(-bound, bound))
            };
            weights.insert(name, t);
        }
        Self { widths, weights }
    }

    pub fn widths(&self) -> [usize; 3] {
        self.widths
    }

    /// Loads weights from an archive written by [`save`](Self::save).
    pub fn load(path: &Path) -> Result<Self> {
        let archive = Archive::read(path)?;
        let widths: [usize; 3] = serde_json::from_str(archive.text("extractor.json")?)?;
        let mut weights = std::collections::BTreeMap::new();
        for (name, shape) in layer_shapes(widths) {
            let t = archive.tensor(&name)?;
            if t.shape() != shape {
                return Err(Error::Format(format!(
                    "extractor weight `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            weights.insert(name, t.clone());
        }
        Ok(Self { widths, weights })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut archive = Archive::default();
        archive.texts.insert(
            "extractor.json".into(),
            serde_json::to_string(&self.widths)?,
        );
        archive.tensors = self.weights.clone();
        archive.write(path)
    }

    /// Records the three stage outputs of `x` (weights enter as constants).
    pub fn features(&self, g: &mut Graph, x: Var) -> Result<[Var; 3]> {
        let mut h = x;
        let mut out = Vec::with_capacity(3);
        for (stage, &n) in STAGE_CONVS.iter().enumerate() {
            if stage > 0 {
                h = g.max_pool2(h)?;
            }
            for k in 0..n {
                let name = layer_name(stage, k);
                let w = g.constant(self.weights[&format!("{name}.weight")].clone());
                let b = g.constant(self.weights[&format!("{name}.bias")].clone());
                let y = g.conv2d(h, w, Some(b), 1, 1)?;
                h = g.relu(y);
            }
            out.push(h);
        }
        Ok([out[0], out[1], out[2]])
    }
}

/// Mean over the three stages of the per-element squared feature distance.
pub fn perceptual_loss(
    pred: &Tensor,
    target: &Tensor,
    extractor: &PerceptualExtractor,
) -> Result<f64> {
    let mut g = Graph::new(GradMode::Frozen);
    let (p, t) = (g.constant(pred.clone()), g.constant(target.clone()));
    let l = perceptual(&mut g, extractor, p, t)?;
    Ok(g.value(l).to_scalar())
}

pub fn perceptual(
    g: &mut Graph,
    extractor: &PerceptualExtractor,
    pred: Var,
    target: Var,
) -> Result<Var> {
    let (ps, ts) = (g.value(pred).shape(), g.value(target).shape());
    if ps != ts {
        return Err(Error::Input(format!("perceptual loss: {ps:?} vs {ts:?}")));
    }
    if ps[2] % 4 != 0 || ps[3] % 4 != 0 {
        return Err(Error::Input(format!(
            "perceptual loss needs sizes divisible by 4, got {}x{}",
            ps[2], ps[3]
        )));
    }
    let fp = extractor.features(g, pred)?;
    let ft = extractor.features(g, target)?;
    let mut terms = Vec::with_capacity(3);
    for (a, b) in fp.into_iter().zip(ft) {
        terms.push((g.squared_error_mean(a, b)?, 1.0 / 3.0));
    }
    g.weighted_sum(&terms)
}

/// Loss components of one forward pass, as recorded on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub fidelity: Var,
    pub perceptual: Option<Var>,
    pub itkt: Option<Var>,
}

/// Builds the weighted objective. Terms with a zero weight are skipped
/// entirely; `teacher` switches the distillation term on.
pub fn total(
    g: &mut Graph,
    weights: &LossWeights,
    extractor: &PerceptualExtractor,
    pred: Var,
    target: Var,
    taps: Option<(&[TapVar], &[FeatureTap])>,
) -> Result<LossTerms> {
    weights.validate()?;
    let fid = fidelity(g, pred, target)?;
    let mut parts = vec![(fid, 1.0)];
    let perceptual = if weights.lambda_p > 0.0 {
        let p = perceptual(g, extractor, pred, target)?;
        parts.push((p, weights.lambda_p));
        Some(p)
    } else {
        None
    };
    let itkt = match taps {
        Some((student, teacher)) if weights.lambda_kt > 0.0 => {
            let k = itkt(g, student, teacher)?;
            parts.push((k, weights.lambda_kt));
            Some(k)
        }
        _ => None,
    };
    let total = g.weighted_sum(&parts)?;
    Ok(LossTerms {
        total,
        fidelity: fid,
        perceptual,
        itkt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tap(pos: (usize, usize), t: Tensor) -> FeatureTap {
        FeatureTap {
            position: pos,
            tensor: t,
        }
    }

    #[test]
    fn fidelity_unit_values() {
        let z = Tensor::zeros([2, 3, 4, 4]);
        assert_eq!(fidelity_loss(&z, &z).unwrap(), 0.0);
        let half = Tensor::full([2, 3, 4, 4], 0.5);
        assert!((fidelity_loss(&half, &z).unwrap() - 0.125).abs() < 1e-12);
        let two = Tensor::full([2, 3, 4, 4], 2.0);
        assert!((fidelity_loss(&z, &two).unwrap() - 1.5).abs() < 1e-12);
        assert!(matches!(
            fidelity_loss(&z, &Tensor::zeros([1, 3, 4, 4])),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn total_unit_values() {
        let w = LossWeights::default();
        assert!((total_loss(1.0, 1.0, 1.0, &w) - 1.05).abs() < 1e-12);
        assert_eq!(total_loss(0.3, 0.0, 0.0, &w), 0.3);
        let off = LossWeights {
            lambda_p: 0.0,
            lambda_kt: 0.0,
        };
        assert_eq!(total_loss(0.7, 9.0, 4.0, &off), 0.7);
        assert!(LossWeights {
            lambda_p: -1.0,
            lambda_kt: 0.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn itkt_unit_values() {
        let shape = [1, 4, 6, 6];
        let a: Vec<_> = (3..6)
            .map(|j| tap((0, j), Tensor::full(shape, 0.2)))
            .collect();
        let b: Vec<_> = (3..6)
            .map(|j| tap((0, j), Tensor::full(shape, 1.2)))
            .collect();
        assert_eq!(itkt_loss(&a, &a).unwrap(), 0.0);
        let d = itkt_loss(&a, &b).unwrap();
        assert!((d - 144.0).abs() < 1e-9, "{d}");
        assert_eq!(d, itkt_loss(&b, &a).unwrap());
        let mut shuffled = b.clone();
        shuffled.swap(0, 1);
        assert!(matches!(itkt_loss(&a, &shuffled), Err(Error::Input(_))));
    }

    #[test]
    fn itkt_is_per_image() {
        let one: Vec<_> = vec![tap((0, 3), Tensor::zeros([1, 2, 4, 4]))];
        let one_b: Vec<_> = vec![tap((0, 3), Tensor::full([1, 2, 4, 4], 1.0))];
        let two: Vec<_> = vec![tap((0, 3), Tensor::zeros([2, 2, 4, 4]))];
        let two_b: Vec<_> = vec![tap((0, 3), Tensor::full([2, 2, 4, 4], 1.0))];
        assert_eq!(
            itkt_loss(&one, &one_b).unwrap(),
            itkt_loss(&two, &two_b).unwrap()
        );
    }

    #[test]
    fn perceptual_basics() {
        let ext = PerceptualExtractor::seeded([4, 8, 8], 1);
        let mut rng = Rng::seed(5);
        let a = Tensor::from_fn([1, 3, 8, 8], |_| rng.uniform(0.0, 1.0));
        let b = Tensor::from_fn([1, 3, 8, 8], |_| rng.uniform(0.0, 1.0));
        assert_eq!(perceptual_loss(&a, &a, &ext).unwrap(), 0.0);
        let ab = perceptual_loss(&a, &b, &ext).unwrap();
        assert!(ab > 0.0);
        assert_eq!(ab, perceptual_loss(&b, &a, &ext).unwrap());
        assert!(perceptual_loss(&a, &Tensor::zeros([1, 3, 6, 6]), &ext).is_err());
    }

    #[test]
    fn perceptual_is_quadratic_for_small_perturbations() {
        let ext = PerceptualExtractor::seeded([4, 8, 8], 2);
        let mut rng = Rng::seed(6);
        let a = Tensor::from_fn([1, 3, 8, 8], |_| rng.uniform(0.2, 0.8));
        let dir = Tensor::from_fn([1, 3, 8, 8], |_| rng.uniform(-1.0, 1.0));
        let at = |eps: f64| {
            let b = a.zip_map(&dir, |x, d| x + eps * d).unwrap();
            perceptual_loss(&a, &b, &ext).unwrap()
        };
        let ratio = at(2e-3) / at(1e-3);
        assert!((ratio - 4.0).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn extractor_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ext.tar");
        let ext = PerceptualExtractor::seeded([4, 8, 16], 3);
        ext.save(&path).unwrap();
        assert_eq!(PerceptualExtractor::load(&path).unwrap(), ext);
    }

    #[test]
    fn graph_total_matches_plain_sum() {
        let ext = PerceptualExtractor::seeded([4, 8, 8], 4);
        let mut rng = Rng::seed(7);
        let p = Tensor::from_fn([1, 3, 8, 8], |_| rng.uniform(0.0, 1.0));
        let t = Tensor::from_fn([1, 3, 8, 8], |_| rng.uniform(0.0, 1.0));
        let s = Tensor::from_fn([1, 2, 8, 8], |_| rng.uniform(0.0, 1.0));
        let teacher = vec![tap((0, 1), Tensor::zeros([1, 2, 8, 8]))];
        let w = LossWeights::default();
        let mut g = Graph::new(GradMode::Frozen);
        let (pv, tv, sv) = (
            g.constant(p.clone()),
            g.constant(t.clone()),
            g.constant(s.clone()),
        );
        let student = [(0, 1, sv)];
        let terms = total(&mut g, &w, &ext, pv, tv, Some((&student, &teacher))).unwrap();
        let expected = total_loss(
            fidelity_loss(&p, &t).unwrap(),
            perceptual_loss(&p, &t, &ext).unwrap(),
            itkt_loss(&[tap((0, 1), s)], &teacher).unwrap(),
            &w,
        );
        let got = g.value(terms.total).to_scalar();
        assert!(
            (got - expected).abs() <= 1e-12 * expected.abs(),
            "{got} vs {expected}"
        );
    }
}
