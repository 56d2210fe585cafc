use proptest::prelude::*;

use super::*;
use crate::util::Rng;

fn grid(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> DepthMap {
    DepthMap::new(Tensor::from_fn([1, 1, h, w], |[_, _, y, x]| f(y, x))).unwrap()
}

#[test]
fn transmission_examples() {
    let zero = grid(4, 4, |_, _| 0.0);
    assert!(transmission(&zero, 3.7)
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 1.0));

    let one = grid(1, 1, |_, _| 1.0);
    let t = transmission(&one, std::f64::consts::LN_2).unwrap();
    let oracle = (-std::f64::consts::LN_2).exp();
    assert!((t.data()[0] - oracle).abs() < 1e-15);
    assert!((t.data()[0] - 0.5).abs() < 1e-15);

    let ramp = grid(1, 3, |_, x| x as f64);
    let t = transmission(&ramp, 1.0).unwrap();
    let e = std::f64::consts::E;
    assert_eq!(t.data()[0], 1.0);
    assert!((t.data()[1] - 1.0 / e).abs() < 1e-15);
    assert!((t.data()[2] - 1.0 / (e * e)).abs() < 1e-15);
    assert!(t.data()[0] > t.data()[1] && t.data()[1] > t.data()[2]);
}

#[test]
fn transmission_rejects_bad_inputs() {
    let d = grid(2, 2, |_, _| 1.0);
    assert!(matches!(transmission(&d, 0.0), Err(Error::Parameter(_))));
    assert!(matches!(transmission(&d, -1.0), Err(Error::Parameter(_))));
    let bad = Tensor::from_vec([1, 1, 1, 2], vec![1.0, f64::NAN]).unwrap();
    assert!(matches!(DepthMap::new(bad), Err(Error::Input(_))));
    let neg = Tensor::from_vec([1, 1, 1, 2], vec![1.0, -0.1]).unwrap();
    assert!(matches!(DepthMap::new(neg), Err(Error::Input(_))));
}

#[test]
fn asm_examples() {
    let clear = procedural_clear(8, 8, 1);
    let ones = Tensor::full([1, 1, 8, 8], 1.0);
    assert_eq!(apply_asm(&clear, &ones, 0.8).unwrap(), clear);

    let j = Tensor::full([1, 3, 1, 1], 0.2);
    let half = Tensor::full([1, 1, 1, 1], 0.5);
    let i = apply_asm(&j, &half, 1.0).unwrap();
    assert!(i.data().iter().all(|&v| (v - 0.6).abs() < 1e-15));

    let tiny = Tensor::full([1, 1, 8, 8], 1e-12);
    let i = apply_asm(&clear, &tiny, 0.9).unwrap();
    assert!(i.data().iter().all(|&v| (v - 0.9).abs() < 1e-11));

    let wrong = Tensor::full([1, 1, 4, 8], 0.5);
    assert!(matches!(
        apply_asm(&clear, &wrong, 0.9),
        Err(Error::Input(_))
    ));
}

#[test]
fn inversion_examples() {
    let air = Tensor::full([1, 3, 6, 6], 0.85);
    let t = Tensor::from_fn([1, 1, 6, 6], |[_, _, y, x]| 0.1 + 0.02 * (y + x) as f64);
    let j = invert_asm(&air, &t, 0.85, 0.05).unwrap();
    assert!(j.data().iter().all(|&v| (v - 0.85).abs() < 1e-12));

    for bad in [0.0, 1.0, -0.2, 1.5] {
        assert!(matches!(
            invert_asm(&air, &t, 0.85, bad),
            Err(Error::Parameter(_))
        ));
    }
}

#[test]
fn randomized_round_trip_harness() {
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let mut rng = Rng::seed(seed);
        let (h, w) = (8 + rng.below(9), 8 + rng.below(9));
        let j = Tensor::from_fn([1, 3, h, w], |_| rng.uniform(0.0, 1.0));
        let t = Tensor::from_fn([1, 1, h, w], |_| rng.uniform(0.05, 1.0));
        let a = rng.uniform(0.5, 1.0);
        let back = invert_asm(&apply_asm(&j, &t, a).unwrap(), &t, a, 0.05).unwrap();
        worst = worst.max(back.max_abs_diff(&j));
    }
    assert!(worst < 1e-6, "round trip error {worst}");
}

#[test]
fn depth_synthesis() {
    let ramp = synth_depth(DepthKind::LinearRamp, 8, 8, 123).unwrap();
    for y in 0..8 {
        let expect = DEFAULT_D_MAX * y as f64 / 7.0;
        for x in 0..8 {
            assert!((ramp.at(y, x) - expect).abs() < 1e-12);
        }
    }
    assert_eq!(ramp.at(0, 0), 0.0);
    assert!((ramp.at(7, 3) - DEFAULT_D_MAX).abs() < 1e-12);

    for kind in DepthKind::ALL {
        let a = synth_depth(kind, 16, 12, 9).unwrap();
        assert_eq!(a, synth_depth(kind, 16, 12, 9).unwrap());
        let t = a.tensor();
        assert!(t.min() >= 0.0 && t.max() <= DEFAULT_D_MAX + 1e-12);
    }
    let s1 = synth_depth(DepthKind::SmoothNoise, 64, 64, 1).unwrap();
    let s2 = synth_depth(DepthKind::SmoothNoise, 64, 64, 2).unwrap();
    assert!(s1.tensor().max_abs_diff(s2.tensor()) > 0.1);

    assert!(matches!(
        "fog".parse::<DepthKind>(),
        Err(Error::Parameter(_))
    ));
    assert_eq!("radial".parse::<DepthKind>().unwrap(), DepthKind::Radial);
    assert!(synth_depth(DepthKind::Radial, 4, 8, 0).is_err());
}

#[test]
fn dataset_examples() {
    let spec = DatasetSpec {
        n: 4,
        height: 16,
        width: 16,
        seed: 7,
        ..Default::default()
    };
    let ds = make_dataset(&spec, 1).unwrap();
    assert_eq!(ds.len(), 4);
    for s in &ds {
        assert_eq!(s.domain, Domain::Synthetic);
        assert_eq!(s.reconstruction_error().unwrap(), 0.0);
        assert!(s.t.data().iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    let fixed = DatasetSpec {
        beta_range: [0.9, 0.9],
        ..spec.clone()
    };
    assert!(make_dataset(&fixed, 1)
        .unwrap()
        .iter()
        .all(|s| s.beta == 0.9));

    // determinism, including across worker counts
    let again = make_dataset(&spec, 3).unwrap();
    assert_eq!(ds, again);

    let shifted = DatasetSpec {
        domain_shift: Some(DomainShiftParams::default()),
        ..spec.clone()
    };
    let tr = make_dataset(&shifted, 1).unwrap();
    assert!(tr.iter().all(|s| s.domain == Domain::Translated));
    assert_eq!(tr[0].clear, ds[0].clear);
    assert_ne!(tr[0].hazy, ds[0].hazy);

    let bad = DatasetSpec {
        airlight_range: [0.3, 1.0],
        ..spec
    };
    assert!(matches!(make_dataset(&bad, 1), Err(Error::Parameter(_))));
}

/// Histogram KL divergence between two sets of unit-interval values.
fn histogram_kl(p: &[f64], q: &[f64], bins: usize) -> f64 {
    let hist = |xs: &[f64]| {
        let mut h = vec![1e-6; bins];
        for &v in xs {
            h[((v * bins as f64) as usize).min(bins - 1)] += 1.0;
        }
        let s: f64 = h.iter().sum();
        h.into_iter().map(|c| c / s).collect::<Vec<_>>()
    };
    let (hp, hq) = (hist(p), hist(q));
    hp.iter().zip(&hq).map(|(a, b)| a * (a / b).ln()).sum()
}

#[test]
fn domain_shift_moves_histograms() {
    let spec = DatasetSpec {
        n: 16,
        height: 24,
        width: 24,
        seed: 3,
        ..Default::default()
    };
    let ds = make_dataset(&spec, 1).unwrap();
    let params = DomainShiftParams::default();
    for c in 0..3 {
        let mut before = Vec::new();
        let mut after = Vec::new();
        for s in &ds {
            before.extend_from_slice(s.hazy.plane(0, c));
            let tr = translate_domain(&s.hazy, &params, s.seed).unwrap();
            after.extend_from_slice(tr.plane(0, c));
        }
        let kl = histogram_kl(&after, &before, 32);
        assert!(kl > 1e-3, "channel {c}: KL {kl}");
    }
}

fn transmission_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64)> {
    (
        prop::collection::vec((0.0..8.0f64, 0.0..3.0f64), 64),
        0.01..3.0f64,
    )
        .prop_map(|(pairs, beta)| {
            let d1: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let d2: Vec<f64> = pairs.iter().map(|p| p.0 + p.1).collect();
            (d1, d2, beta)
        })
}

proptest! {
    #[test]
    fn transmission_is_monotone((d1, d2, beta) in transmission_pair()) {
        let t1 = transmission(&DepthMap::from_grid(8, 8, d1).unwrap(), beta).unwrap();
        let t2 = transmission(&DepthMap::from_grid(8, 8, d2).unwrap(), beta).unwrap();
        for (a, b) in t1.data().iter().zip(t2.data()) {
            prop_assert!(a >= b);
            prop_assert!(*b > 0.0 && *a <= 1.0);
        }
    }

    #[test]
    fn haze_is_a_convex_combination(
        j in prop::collection::vec(0.0..=1.0f64, 3 * 16),
        t in prop::collection::vec(1e-4..=1.0f64, 16),
        a in 0.5..=1.0f64,
    ) {
        let clear = Tensor::from_vec([1, 3, 4, 4], j).unwrap();
        let tt = Tensor::from_vec([1, 1, 4, 4], t).unwrap();
        let hazy = apply_asm(&clear, &tt, a).unwrap();
        for (i, (&jv, &iv)) in clear.data().iter().zip(hazy.data()).enumerate() {
            let _ = i;
            prop_assert!(iv >= jv.min(a) - 1e-15 && iv <= jv.max(a) + 1e-15);
        }
        let back = invert_asm(&hazy, &tt, a, 1e-4).unwrap();
        prop_assert!(back.max_abs_diff(&clear) < 1e-6);
    }

    #[test]
    fn derived_inputs_stay_in_range(v in prop::collection::vec(0.0..=1.0f64, 3 * 36)) {
        let img = Tensor::from_vec([1, 3, 6, 6], v).unwrap();
        let d = derive_inputs(&img).unwrap();
        prop_assert_eq!(d.channels(), 16);
        prop_assert!(d.min() >= 0.0 && d.max() <= 1.0);
    }
}
