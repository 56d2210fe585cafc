use super::blocks::{
    cab_coefficients, declare_cab, declare_down, declare_rdb, declare_sab, declare_scab,
    declare_up, downsample_forward, rdb_forward, sab_map, scab_fuse, upsample_forward, Specs,
};
use super::*;
use crate::autograd::{GradMode, Graph};
use crate::error::Error;
use crate::tensor::Tensor;
use crate::util::Rng;

fn store_for(specs: &Specs, seed: u64) -> ParameterStore {
    ParameterStore::initialize(&specs.0, "blocks", seed)
}

fn zeroed(mut store: ParameterStore) -> ParameterStore {
    for (_, t) in store.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    store
}

fn random(shape: [usize; 4], seed: u64, scale: f64) -> Tensor {
    let mut rng = Rng::seed(seed);
    Tensor::from_fn(shape, |_| rng.uniform(-scale, scale))
}

// Closed-form counts, written out independently of the builder.
fn conv_count(cout: usize, cin: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}

fn rdb_count(c: usize, g: usize, convs: usize) -> usize {
    (0..convs - 1)
        .map(|i| conv_count(g, c + i * g, 3))
        .sum::<usize>()
        + conv_count(c, c + (convs - 1) * g, 1)
}

fn scab_count(c: usize, hidden: usize, k: usize, cab: bool, sab: bool) -> usize {
    let cab_n = if cab {
        2 * (conv_count(hidden, c, 1) + conv_count(c, hidden, 1))
    } else {
        0
    };
    let sab_n = if sab { conv_count(1, 2, k) } else { 0 };
    cab_n + sab_n
}

fn full_count(cfg: &GridConfig) -> usize {
    let c = &cfg.scale_channels;
    let (g, n, k) = (cfg.growth_rate, cfg.rdb_convs, cfg.sab_kernel);
    let hid = |ch: usize| (ch / cfg.cab_reduction).max(2);
    let pre = conv_count(c[0], 3, 3) + rdb_count(c[0], g, n);
    let rows: usize = c.iter().map(|&ch| 5 * rdb_count(ch, g, n)).sum();
    let db = |ch: usize| conv_count(2 * ch, ch, 3);
    let ub = |ch: usize| 16 * ch * (ch / 2) + ch / 2;
    let down = 3 * (db(c[0]) + db(c[1]));
    let up = 3 * (ub(c[1]) + ub(c[2]));
    let fuse_down = 2
        * (scab_count(c[1], hid(c[1]), k, true, true) + scab_count(c[2], hid(c[2]), k, true, true));
    let fuse_up = 3
        * (scab_count(c[0], hid(c[0]), k, true, true) + scab_count(c[1], hid(c[1]), k, true, true));
    let post = rdb_count(c[0], g, n) + conv_count(3, c[0], 3);
    pre + rows + down + up + fuse_down + fuse_up + post
}

#[test]
fn rdb_closed_form_count() {
    let mut s = Specs::default();
    declare_rdb(&mut s, "r", 16, 5, 16);
    let built: usize = s.0.iter().map(ParamSpec::numel).sum();
    let expected: usize =
        (0..4).map(|i| 9 * (16 + 16 * i) * 16).sum::<usize>() + 16 * 4 + (16 + 64) * 16 + 16;
    assert_eq!(built, expected);
}

#[test]
fn zero_rdb_is_identity() {
    let mut s = Specs::default();
    declare_rdb(&mut s, "r", 6, 5, 3);
    let store = zeroed(store_for(&s, 1));
    let x = random([2, 6, 5, 7], 3, 2.0);
    let mut g = Graph::new(GradMode::Frozen);
    let xv = g.constant(x.clone());
    let y = rdb_forward(&mut g, &store, "r", xv, 5).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn rdb_channel_mismatch() {
    let mut s = Specs::default();
    declare_rdb(&mut s, "r", 6, 3, 2);
    let store = store_for(&s, 1);
    let mut g = Graph::new(GradMode::Frozen);
    let xv = g.constant(Tensor::zeros([1, 5, 4, 4]));
    assert!(matches!(
        rdb_forward(&mut g, &store, "r", xv, 3),
        Err(Error::Input(_))
    ));
}

#[test]
fn resampling_shapes() {
    let mut s = Specs::default();
    declare_down(&mut s, "d0", 16);
    declare_down(&mut s, "d1", 32);
    declare_up(&mut s, "u1", 64);
    declare_up(&mut s, "u0", 32);
    let store = store_for(&s, 2);
    let mut g = Graph::new(GradMode::Frozen);
    let x = g.constant(random([2, 16, 32, 32], 1, 1.0));
    let a = downsample_forward(&mut g, &store, "d0", x).unwrap();
    assert_eq!(g.value(a).shape(), [2, 32, 16, 16]);
    let b = downsample_forward(&mut g, &store, "d1", a).unwrap();
    assert_eq!(g.value(b).shape(), [2, 64, 8, 8]);
    let c = upsample_forward(&mut g, &store, "u1", b).unwrap();
    assert_eq!(g.value(c).shape(), [2, 32, 16, 16]);
    let d = upsample_forward(&mut g, &store, "u0", c).unwrap();
    assert_eq!(g.value(d).shape(), [2, 16, 32, 32]);

    let odd = g.constant(Tensor::zeros([1, 16, 7, 8]));
    assert!(matches!(
        downsample_forward(&mut g, &store, "d0", odd),
        Err(Error::Input(_))
    ));
}

#[test]
fn upsampling_constant_input_has_no_checkerboard() {
    // Every interior output pixel receives exactly four taps, so a kernel whose
    // stride phases carry equal mass gives a flat response. Random kernels can
    // still differ per phase, but the response is then exactly 2-periodic.
    let mut s = Specs::default();
    declare_up(&mut s, "u", 8);
    let mut store = store_for(&s, 4);
    let x = Tensor::full([1, 8, 6, 6], 0.7);
    let run = |store: &ParameterStore| {
        let mut g = Graph::new(GradMode::Frozen);
        let xv = g.constant(x.clone());
        let y = upsample_forward(&mut g, store, "u", xv).unwrap();
        g.value(y).clone()
    };
    let periodic = run(&store);
    for c in 0..4 {
        for i in 1..9 {
            for j in 1..9 {
                let d = periodic.at([0, c, i, j]) - periodic.at([0, c, i + 2, j + 2]);
                assert!(d.abs() < 1e-12);
            }
        }
    }
    let w = store.get("u.weight").unwrap().shape();
    store.insert(
        "u.weight",
        Tensor::from_fn(w, |[i, o, _, _]| 0.01 * (1 + i + o) as f64),
    );
    let flat = run(&store);
    for c in 0..4 {
        let reference = flat.at([0, c, 1, 1]);
        for i in 1..11 {
            for j in 1..11 {
                assert!((flat.at([0, c, i, j]) - reference).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn zero_attention_gates_are_one_half() {
    let mut s = Specs::default();
    declare_cab(&mut s, "cab", 8, 2);
    declare_sab(&mut s, "sab", 7);
    declare_scab(&mut s, "fuse", 8, 2, 7, FusionKind::FULL);
    let store = zeroed(store_for(&s, 5));
    let f = random([2, 8, 6, 6], 9, 3.0);
    let fv = random([2, 8, 6, 6], 10, 3.0);
    let mut g = Graph::new(GradMode::Frozen);
    let x = g.constant(f.clone());
    let v = g.constant(fv.clone());
    let coeff = cab_coefficients(&mut g, &store, "cab", x).unwrap();
    assert!(g.value(coeff).data().iter().all(|&c| c == 0.5));
    let map = sab_map(&mut g, &store, "sab", x).unwrap();
    assert!(g.value(map).data().iter().all(|&c| c == 0.5));
    let fused = scab_fuse(&mut g, &store, "fuse", x, v, FusionKind::FULL).unwrap();
    let expected = f.zip_map(&fv, |a, b| 0.25 * (a + b)).unwrap();
    assert!(g.value(fused).max_abs_diff(&expected) < 1e-15);
}

#[test]
fn scab_symmetry_with_tied_weights() {
    let mut s = Specs::default();
    declare_scab(&mut s, "fuse", 6, 2, 3, FusionKind::FULL);
    let mut store = store_for(&s, 6);
    for suffix in ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"] {
        let t = random(
            store.get(&format!("fuse.cab_h.{suffix}")).unwrap().shape(),
            77,
            0.5,
        );
        store.insert(format!("fuse.cab_h.{suffix}"), t.clone());
        store.insert(format!("fuse.cab_v.{suffix}"), t);
    }
    let f = random([1, 6, 5, 5], 11, 1.0);
    let mut g = Graph::new(GradMode::Frozen);
    let fv = g.constant(f.clone());
    let zero = g.constant(Tensor::zeros(f.shape()));
    let a = scab_fuse(&mut g, &store, "fuse", fv, zero, FusionKind::FULL).unwrap();
    let b = scab_fuse(&mut g, &store, "fuse", zero, fv, FusionKind::FULL).unwrap();
    assert_eq!(g.value(a), g.value(b));

    let other = g.constant(Tensor::zeros([1, 6, 4, 5]));
    assert!(matches!(
        scab_fuse(&mut g, &store, "fuse", fv, other, FusionKind::FULL),
        Err(Error::Input(_))
    ));
}

#[test]
fn attention_permutation_invariance() {
    let mut s = Specs::default();
    declare_cab(&mut s, "cab", 5, 2);
    declare_sab(&mut s, "sab", 5);
    let store = store_for(&s, 8);
    let f = random([1, 5, 6, 7], 12, 2.0);
    let mut rng = Rng::seed(3);
    let mut perm: Vec<usize> = (0..42).collect();
    for i in (1..perm.len()).rev() {
        perm.swap(i, rng.below(i + 1));
    }
    let shuffled = Tensor::from_fn(f.shape(), |[b, c, y, x]| {
        let p = perm[y * 7 + x];
        f.at([b, c, p / 7, p % 7])
    });
    let channel_swapped = Tensor::from_fn(f.shape(), |[b, c, y, x]| f.at([b, 4 - c, y, x]));
    let mut g = Graph::new(GradMode::Frozen);
    let (a, b, c) = (
        g.constant(f),
        g.constant(shuffled),
        g.constant(channel_swapped),
    );
    let ca = cab_coefficients(&mut g, &store, "cab", a).unwrap();
    let cb = cab_coefficients(&mut g, &store, "cab", b).unwrap();
    assert_eq!(g.value(ca), g.value(cb));
    let ma = sab_map(&mut g, &store, "sab", a).unwrap();
    let mc = sab_map(&mut g, &store, "sab", c).unwrap();
    assert_eq!(g.value(ma), g.value(mc));
}

#[test]
fn default_param_count_matches_closed_form() {
    let cfg = GridConfig::default();
    let (model, store) = build(cfg.clone(), 0).unwrap();
    assert_eq!(model.param_count(), full_count(&cfg));
    assert_eq!(param_count(&store), full_count(&cfg));
    let n = param_count(&store) as f64;
    assert!((n - 961_000.0).abs() / 961_000.0 <= 0.15, "{n}");

    let tiny = GridConfig::tiny();
    assert_eq!(
        build(tiny.clone(), 0).unwrap().0.param_count(),
        full_count(&tiny)
    );
}

#[test]
fn variant_counts_are_ordered() {
    let count = |v: VariantSpec| {
        Model::new(GridConfig::default().variant(v))
            .unwrap()
            .param_count()
    };
    let full = count(VariantSpec::Full);
    assert!(count(VariantSpec::Ednet) < count(VariantSpec::Msnet));
    assert!(count(VariantSpec::Msnet) < full);
    assert!(count(VariantSpec::NoPost) < full);
    let delta = full - count(VariantSpec::NoScab);
    assert!(delta > 0 && delta < 25_000, "{delta}");
    assert!(count(VariantSpec::NoCab) < full && count(VariantSpec::NoSab) < full);
}

#[test]
fn indirect_head_changes_only_final_conv() {
    let direct = Model::new(GridConfig::default()).unwrap();
    let indirect = Model::new(GridConfig::default().head(OutputHead::Indirect)).unwrap();
    let c0 = 16;
    assert_eq!(direct.param_count() - indirect.param_count(), c0 * 9 + 1);
    for (a, b) in direct.param_specs().iter().zip(indirect.param_specs()) {
        assert_eq!(a.name, b.name);
        if !a.name.starts_with("post.conv") {
            assert_eq!(a.shape, b.shape);
        }
    }
}

#[test]
fn tiny_forward_shapes_and_taps() {
    let (model, store) = build(GridConfig::tiny(), 1).unwrap();
    let x = random([2, 3, 16, 16], 1, 0.5).map(|v| v + 0.5);
    let (y, taps) = model.forward(&store, &x, true).unwrap();
    assert_eq!(y.shape(), [2, 3, 16, 16]);
    assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let positions: Vec<_> = taps.iter().map(|t| t.position).collect();
    assert_eq!(positions, vec![(0, 3), (0, 4), (0, 5)]);
    assert!(taps.iter().all(|t| t.tensor.shape() == [2, 4, 16, 16]));
    let (again, _) = model.forward(&store, &x, false).unwrap();
    assert_eq!(y, again);
}

#[test]
fn default_taps_have_sixteen_channels() {
    let (model, store) = build(GridConfig::default(), 1).unwrap();
    let x = Tensor::full([1, 3, 8, 8], 0.5);
    let (_, taps) = model.forward(&store, &x, true).unwrap();
    assert_eq!(taps.len(), 3);
    assert!(taps.iter().all(|t| t.tensor.channels() == 16));
}

#[test]
fn odd_sizes_are_padded_and_cropped() {
    let (model, store) = build(GridConfig::tiny(), 1).unwrap();
    let x = random([1, 3, 13, 18], 4, 0.5).map(|v| v + 0.5);
    let (y, _) = model.forward(&store, &x, false).unwrap();
    assert_eq!(y.shape(), [1, 3, 13, 18]);
}

#[test]
fn every_variant_runs() {
    for v in VariantSpec::ALL {
        let cfg = if v == VariantSpec::DerivedInputs {
            GridConfig::with_widths(16, 4)
        } else {
            GridConfig::tiny()
        }
        .variant(v);
        let (model, store) = build(cfg, 2).unwrap();
        let x = random([1, 3, 8, 8], 5, 0.5).map(|v| v + 0.5);
        let (y, taps) = model.forward(&store, &x, true).unwrap();
        assert_eq!(y.shape(), [1, 3, 8, 8], "{v}");
        assert_eq!(
            taps.len(),
            if v == VariantSpec::Ednet { 0 } else { 3 },
            "{v}"
        );
    }
}

#[test]
fn indirect_output_is_consistent() {
    let (model, store) = build(GridConfig::tiny().head(OutputHead::Indirect), 3).unwrap();
    let x = random([1, 3, 8, 8], 6, 0.4).map(|v| v + 0.5);
    let out = model.forward_indirect(&store, &x).unwrap();
    assert!(out.transmission.data().iter().all(|&t| t > 0.0 && t < 1.0));
    let expected = crate::haze::invert_asm(
        &x,
        &out.transmission,
        out.airlight[0],
        crate::haze::DEFAULT_T_MIN,
    )
    .unwrap();
    assert!(out.dehazed.max_abs_diff(&expected) < 1e-12);

    let (direct, dstore) = build(GridConfig::tiny(), 3).unwrap();
    assert!(matches!(
        direct.forward_indirect(&dstore, &x),
        Err(Error::Config(_))
    ));
}

#[test]
fn build_is_deterministic_and_checked() {
    let (m, a) = build(GridConfig::tiny(), 9).unwrap();
    let (_, b) = build(GridConfig::tiny(), 9).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, build(GridConfig::tiny(), 10).unwrap().1);
    assert!(a.all_finite());
    m.check_store(&a).unwrap();
    let (_, other) = build(GridConfig::tiny().variant(VariantSpec::NoPost), 9).unwrap();
    assert!(matches!(
        m.check_store(&other),
        Err(Error::Fingerprint { .. })
    ));
}
