//! Building blocks: residual dense block, resampling blocks and the
//! channel/spatial attention fusion.
//!
//! Each block comes as a pair: a `declare_*` function listing its parameters
//! and a forward function reading them back by the same names.

use super::params::{ParamSpec, ParameterStore};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};

#[derive(Default)]
pub(crate) struct Specs(pub Vec<ParamSpec>);

impl Specs {
    pub fn conv(&mut self, prefix: &str, cout: usize, cin: usize, k: usize) {
        self.0.push(ParamSpec {
            name: format!("{prefix}.weight"),
            shape: [cout, cin, k, k],
            fan_in: cin * k * k,
        });
        self.bias(prefix, cout);
    }

    /// Transposed convolution weight `(Cin, Cout, k, k)`; fan-in counts the
    /// taps that reach one output pixel.
    pub fn conv_t(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, stride: usize) {
        self.0.push(ParamSpec {
            name: format!("{prefix}.weight"),
            shape: [cin, cout, k, k],
            fan_in: (cin * k * k / (stride * stride)).max(1),
        });
        self.bias(prefix, cout);
    }

    fn bias(&mut self, prefix: &str, n: usize) {
        self.0.push(ParamSpec {
            name: format!("{prefix}.bias"),
            shape: [n, 1, 1, 1],
            fan_in: 0,
        });
    }
}

pub(crate) fn conv(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let wn = format!("{prefix}.weight");
    let bn = format!("{prefix}.bias");
    let w = g.param(&wn, store.get(&wn)?);
    let b = g.param(&bn, store.get(&bn)?);
    g.conv2d(x, w, Some(b), stride, pad)
}

fn conv_t(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let wn = format!("{prefix}.weight");
    let bn = format!("{prefix}.bias");
    let w = g.param(&wn, store.get(&wn)?);
    let b = g.param(&bn, store.get(&bn)?);
    g.conv_transpose2d(x, w, Some(b), stride, pad)
}

/// Dense layers of width `growth`, then a 1×1 fusion back to `channels`.
pub(crate) fn declare_rdb(
    s: &mut Specs,
    prefix: &str,
    channels: usize,
    convs: usize,
    growth: usize,
) {
    for k in 0..convs - 1 {
        s.conv(
            &format!("{prefix}.dense{k}"),
            growth,
            channels + k * growth,
            3,
        );
    }
    s.conv(
        &format!("{prefix}.fuse"),
        channels,
        channels + (convs - 1) * growth,
        1,
    );
}

/// Residual dense block: every 3×3 layer sees the concatenation of the input
/// and all earlier outputs; the 1×1 fusion (no rectifier) is added back to
/// the input.
pub fn rdb_forward(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    x: Var,
    convs: usize,
) -> Result<Var> {
    let fuse_w = store.get(&format!("{prefix}.fuse.weight"))?;
    if fuse_w.batch() != g.value(x).channels() {
        return Err(Error::Input(format!(
            "RDB `{prefix}` is {} channels wide, input has {}",
            fuse_w.batch(),
            g.value(x).channels()
        )));
    }
    let mut feats = vec![x];
    for k in 0..convs - 1 {
        let inp = if feats.len() == 1 {
            x
        } else {
            g.concat(&feats)?
        };
        let y = conv(g, store, &format!("{prefix}.dense{k}"), inp, 1, 1)?;
        feats.push(g.relu(y));
    }
    let cat = g.concat(&feats)?;
    let fused = conv(g, store, &format!("{prefix}.fuse"), cat, 1, 0)?;
    g.add(x, fused)
}

pub(crate) fn declare_down(s: &mut Specs, prefix: &str, channels: usize) {
    s.conv(prefix, 2 * channels, channels, 3);
}

/// Strided 3×3 convolution: half the size, twice the channels.
pub fn downsample_forward(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let [_, _, h, w] = g.value(x).shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Input(format!(
            "downsampling needs even spatial size, got {h}x{w}"
        )));
    }
    let y = conv(g, store, prefix, x, 2, 1)?;
    Ok(g.relu(y))
}

pub(crate) fn declare_up(s: &mut Specs, prefix: &str, channels: usize) {
    s.conv_t(prefix, channels, channels / 2, 4, 2);
}

/// 4×4 stride-2 transposed convolution: twice the size, half the channels.
pub fn upsample_forward(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let y = conv_t(g, store, prefix, x, 2, 1)?;
    Ok(g.relu(y))
}

pub(crate) fn declare_cab(s: &mut Specs, prefix: &str, channels: usize, hidden: usize) {
    s.conv(&format!("{prefix}.fc1"), hidden, channels, 1);
    s.conv(&format!("{prefix}.fc2"), channels, hidden, 1);
}

/// Per-channel attention coefficients in `(0, 1)`, shape `(N, C, 1, 1)`.
pub fn cab_coefficients(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    f: Var,
) -> Result<Var> {
    let avg = g.spatial_mean(f);
    let max = g.spatial_max(f);
    let branch = |g: &mut Graph, v: Var| -> Result<Var> {
        let h = conv(g, store, &format!("{prefix}.fc1"), v, 1, 0)?;
        let h = g.relu(h);
        conv(g, store, &format!("{prefix}.fc2"), h, 1, 0)
    };
    let a = branch(g, avg)?;
    let m = branch(g, max)?;
    let s = g.add(a, m)?;
    Ok(g.sigmoid(s))
}

/// Channel attention: `F` scaled by its coefficients.
pub fn cab_forward(g: &mut Graph, store: &ParameterStore, prefix: &str, f: Var) -> Result<Var> {
    let s = cab_coefficients(g, store, prefix, f)?;
    g.scale_channels(f, s)
}

pub(crate) fn declare_sab(s: &mut Specs, prefix: &str, kernel: usize) {
    s.conv(prefix, 1, 2, kernel);
}

/// Spatial attention map in `(0, 1)`, shape `(N, 1, H, W)`.
pub fn sab_map(g: &mut Graph, store: &ParameterStore, prefix: &str, f: Var) -> Result<Var> {
    let k = store.get(&format!("{prefix}.weight"))?.height();
    if k % 2 == 0 {
        return Err(Error::Config(format!(
            "spatial attention kernel {k} is even"
        )));
    }
    let avg = g.channel_mean(f);
    let max = g.channel_max(f);
    let pooled = g.concat(&[avg, max])?;
    let logits = conv(g, store, prefix, pooled, 1, k / 2)?;
    Ok(g.sigmoid(logits))
}

/// Spatial attention: `F` scaled by its map.
pub fn sab_forward(g: &mut Graph, store: &ParameterStore, prefix: &str, f: Var) -> Result<Var> {
    let m = sab_map(g, store, prefix, f)?;
    g.scale_spatial(f, m)
}

/// Which attention stages a fusion junction applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionKind {
    pub cab: bool,
    pub sab: bool,
}

impl FusionKind {
    pub const FULL: Self = Self {
        cab: true,
        sab: true,
    };
}

pub(crate) fn declare_scab(
    s: &mut Specs,
    prefix: &str,
    channels: usize,
    hidden: usize,
    kernel: usize,
    kind: FusionKind,
) {
    if kind.cab {
        declare_cab(s, &format!("{prefix}.cab_h"), channels, hidden);
        declare_cab(s, &format!("{prefix}.cab_v"), channels, hidden);
    }
    if kind.sab {
        declare_sab(s, &format!("{prefix}.sab"), kernel);
    }
}

/// `SAB(CAB_h(F_h) + CAB_v(F_v))`, with disabled stages replaced by identity.
pub fn scab_fuse(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    horizontal: Var,
    vertical: Var,
    kind: FusionKind,
) -> Result<Var> {
    let (hs, vs) = (g.value(horizontal).shape(), g.value(vertical).shape());
    if hs != vs {
        return Err(Error::Input(format!(
            "fusion at `{prefix}`: horizontal {hs:?} vs vertical {vs:?}"
        )));
    }
    let (h, v) = if kind.cab {
        (
            cab_forward(g, store, &format!("{prefix}.cab_h"), horizontal)?,
            cab_forward(g, store, &format!("{prefix}.cab_v"), vertical)?,
        )
    } else {
        (horizontal, vertical)
    };
    let sum = g.add(h, v)?;
    if kind.sab {
        sab_forward(g, store, &format!("{prefix}.sab"), sum)
    } else {
        Ok(sum)
    }
}
