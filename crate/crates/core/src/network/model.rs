use serde::{Deserialize, Serialize};

use super::blocks::{
    self, declare_down, declare_rdb, declare_scab, declare_up, downsample_forward, rdb_forward,
    scab_fuse, upsample_forward, FusionKind, Specs,
};
use super::config::{GridConfig, OutputHead, VariantSpec};
use super::params::{ParamSpec, ParameterStore};
use crate::autograd::{GradMode, Graph, Var};
use crate::error::{Error, Result};
use crate::haze::{derive_inputs, DEFAULT_T_MIN};
use crate::tensor::Tensor;

/// Intermediate feature captured at junction `(row, col)` of the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureTap {
    pub position: (usize, usize),
    pub tensor: Tensor,
}

/// A tap on the tape: `(row, col, value)`.
pub type TapVar = (usize, usize, Var);

/// Tape handles produced by [`Model::forward_graph`].
#[derive(Clone, Debug)]
pub struct GraphOutput {
    /// The prediction: raw network output (direct head) or the inverted
    /// scattering model (indirect head). Never clamped.
    pub output: Var,
    /// Row-0 junctions on the upsampling side, left to right.
    pub taps: Vec<TapVar>,
    /// The feature maps entering the grid.
    pub learned_inputs: Var,
    /// Indirect head only: squashed transmission `(N, 1, H, W)`.
    pub transmission: Option<Var>,
    /// Indirect head only: airlight per item `(N, 1, 1, 1)`.
    pub airlight: Option<Var>,
}

/// Inference result of the indirect head.
#[derive(Clone, Debug)]
pub struct IndirectOutput {
    pub transmission: Tensor,
    pub airlight: Vec<f64>,
    /// Inverted scattering model, clamped to `[0, 1]`.
    pub dehazed: Tensor,
}

/// The grid dehazing network. Weights live in a separate [`ParameterStore`].
#[derive(Clone, Debug)]
pub struct Model {
    config: GridConfig,
    specs: Vec<ParamSpec>,
    fingerprint: String,
}

pub(crate) fn rdb_name(row: usize, k: usize) -> String {
    format!("grid.r{row}.rdb{k}")
}

pub(crate) fn down_name(row: usize, col: usize) -> String {
    format!("grid.down.r{row}c{col}")
}

pub(crate) fn up_name(row: usize, col: usize) -> String {
    format!("grid.up.r{row}c{col}")
}

pub(crate) fn fuse_name(row: usize, col: usize) -> String {
    format!("grid.fuse.r{row}c{col}")
}

/// Builds the model and seeds its parameters.
pub fn build(config: GridConfig, seed: u64) -> Result<(Model, ParameterStore)> {
    let model = Model::new(config)?;
    let store = model.init_params(seed);
    Ok((model, store))
}

impl Model {
    pub fn new(config: GridConfig) -> Result<Self> {
        config.validate()?;
        let specs = layout(&config);
        let fingerprint = config.fingerprint();
        Ok(Self {
            config,
            specs,
            fingerprint,
        })
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn param_count(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    pub fn init_params(&self, seed: u64) -> ParameterStore {
        ParameterStore::initialize(&self.specs, &self.fingerprint, seed)
    }

    /// Verifies that `store` was built for this architecture.
    pub fn check_store(&self, store: &ParameterStore) -> Result<()> {
        if store.fingerprint() != self.fingerprint {
            return Err(Error::Fingerprint {
                expected: self.fingerprint.clone(),
                found: store.fingerprint().to_string(),
            });
        }
        store.check_against(&self.specs)
    }

    fn has_down(&self, col: usize) -> bool {
        self.config.variant != VariantSpec::Msnet || col == 0
    }

    fn has_up(&self, col: usize) -> bool {
        self.config.variant != VariantSpec::Msnet || col == self.config.cols - 1
    }

    fn fusion(&self) -> FusionKind {
        FusionKind {
            cab: self.config.variant.uses_cab(),
            sab: self.config.variant.uses_sab(),
        }
    }

    fn expected_input_channels(&self, c: usize) -> Result<()> {
        let ok = match self.config.variant {
            VariantSpec::DerivedInputs => c == 3 || c == crate::haze::DERIVED_CHANNELS,
            _ => c == 3,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Input(format!(
                "variant {} cannot take {c}-channel input",
                self.config.variant
            )))
        }
    }

    /// Records the full forward pass on `g`.
    ///
    /// `input` is the hazy RGB batch (or, for the derived-inputs variant, the
    /// 16-channel stack). Sizes that are not a multiple of
    /// [`GridConfig::size_multiple`] are mirror-padded and the prediction is
    /// cropped back.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        input: Var,
    ) -> Result<GraphOutput> {
        if store.fingerprint() != self.fingerprint {
            return Err(Error::Fingerprint {
                expected: self.fingerprint.clone(),
                found: store.fingerprint().to_string(),
            });
        }
        let mark = g.mark();
        let [_, c, h, w] = g.value(input).shape();
        self.expected_input_channels(c)?;
        let m = self.config.size_multiple();
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let x = if (ph, pw) != (h, w) {
            let padded = g.value(input).reflect_pad_to(ph, pw)?;
            g.constant(padded)
        } else {
            input
        };
        let hazy_rgb = if c == 3 {
            x
        } else {
            g.slice_channels(x, 0, 3)?
        };

        let stem = self.stem(g, store, x)?;
        let (top, taps) = if self.config.variant == VariantSpec::Ednet {
            (
                self.encoder_decoder(g, store, stem, mark, &[x, hazy_rgb])?,
                Vec::new(),
            )
        } else {
            self.grid(g, store, stem, mark, &[x, hazy_rgb])?
        };
        let head = self.head(g, store, top)?;

        let mut out = match self.config.output_head {
            OutputHead::Direct => GraphOutput {
                output: head,
                taps,
                learned_inputs: stem,
                transmission: None,
                airlight: None,
            },
            OutputHead::Indirect => {
                let logit = g.slice_channels(head, 0, 1)?;
                let t = g.sigmoid(logit);
                let amap = g.slice_channels(head, 1, 1)?;
                let a = g.spatial_mean(amap);
                let dehazed = g.invert_asm(hazy_rgb, t, a, DEFAULT_T_MIN)?;
                GraphOutput {
                    output: dehazed,
                    taps,
                    learned_inputs: stem,
                    transmission: Some(t),
                    airlight: Some(a),
                }
            }
        };
        if (ph, pw) != (h, w) {
            out.output = g.crop(out.output, 0, 0, h, w)?;
            if let Some(t) = out.transmission {
                out.transmission = Some(g.crop(t, 0, 0, h, w)?);
            }
        }
        Ok(out)
    }

    fn stem(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let c0 = self.config.scale_channels[0];
        match self.config.variant {
            VariantSpec::OriginalInputs => {
                let [n, _, h, w] = g.value(x).shape();
                let zeros = g.constant(Tensor::zeros([n, c0 - 3, h, w]));
                if c0 == 3 {
                    Ok(x)
                } else {
                    g.concat(&[x, zeros])
                }
            }
            VariantSpec::DerivedInputs => {
                if g.value(x).channels() == crate::haze::DERIVED_CHANNELS {
                    Ok(x)
                } else {
                    let derived = derive_inputs(g.value(x))?;
                    Ok(g.constant(derived))
                }
            }
            _ => {
                let y = blocks::conv(g, store, "pre.conv", x, 1, 1)?;
                rdb_forward(g, store, "pre.rdb", y, self.config.rdb_convs)
            }
        }
    }

    fn grid(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        stem: Var,
        mark: usize,
        keep: &[Var],
    ) -> Result<(Var, Vec<TapVar>)> {
        let (rows, cols) = (self.config.rows, self.config.cols);
        let half = cols / 2;
        let convs = self.config.rdb_convs;
        let fusion = self.fusion();
        let mut junction: Vec<Vec<Option<Var>>> = vec![vec![None; cols]; rows];
        junction[0][0] = Some(stem);
        let mut taps = Vec::new();
        for col in 0..cols {
            let order: Vec<usize> = if col < half {
                (0..rows).collect()
            } else {
                (0..rows).rev().collect()
            };
            for row in order {
                if row == 0 && col == 0 {
                    continue;
                }
                let horizontal = match col {
                    0 => None,
                    _ => {
                        let prev = junction[row][col - 1].expect("left junction");
                        Some(rdb_forward(g, store, &rdb_name(row, col - 1), prev, convs)?)
                    }
                };
                let vertical = if col < half {
                    match row {
                        0 => None,
                        _ if self.has_down(col) => {
                            let above = junction[row - 1][col].expect("upper junction");
                            Some(downsample_forward(g, store, &down_name(row, col), above)?)
                        }
                        _ => None,
                    }
                } else if row + 1 < rows && self.has_up(col) {
                    let below = junction[row + 1][col].expect("lower junction");
                    Some(upsample_forward(g, store, &up_name(row, col), below)?)
                } else {
                    None
                };
                junction[row][col] = Some(match (horizontal, vertical) {
                    (Some(h), Some(v)) => scab_fuse(g, store, &fuse_name(row, col), h, v, fusion)?,
                    (Some(h), None) => h,
                    (None, Some(v)) => v,
                    (None, None) => unreachable!("junction ({row}, {col}) has no inputs"),
                });
            }
            if self.config.tap_columns().contains(&col) {
                taps.push((0, col, junction[0][col].expect("row-0 junction")));
            }
            let mut live: Vec<Var> = keep.to_vec();
            live.extend(junction.iter().filter_map(|r| r[col]));
            live.extend(taps.iter().map(|t| t.2));
            g.release_since(mark, &live);
        }
        Ok((junction[0][cols - 1].expect("output junction"), taps))
    }

    fn encoder_decoder(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        stem: Var,
        mark: usize,
        keep: &[Var],
    ) -> Result<Var> {
        let (rows, cols) = (self.config.rows, self.config.cols);
        let mut x = stem;
        for row in 1..rows {
            x = downsample_forward(g, store, &down_name(row, 0), x)?;
        }
        for k in 0..cols - 1 {
            x = rdb_forward(g, store, &rdb_name(rows - 1, k), x, self.config.rdb_convs)?;
            let mut live = keep.to_vec();
            live.push(x);
            g.release_since(mark, &live);
        }
        for row in (0..rows - 1).rev() {
            x = upsample_forward(g, store, &up_name(row, cols - 1), x)?;
        }
        Ok(x)
    }

    fn head(&self, g: &mut Graph, store: &ParameterStore, top: Var) -> Result<Var> {
        let y = if self.config.variant == VariantSpec::NoPost {
            top
        } else {
            rdb_forward(g, store, "post.rdb", top, self.config.rdb_convs)?
        };
        blocks::conv(g, store, "post.conv", y, 1, 1)
    }

    /// Inference: clamped prediction and, when asked, the row-0 taps.
    pub fn forward(
        &self,
        store: &ParameterStore,
        input: &Tensor,
        want_taps: bool,
    ) -> Result<(Tensor, Vec<FeatureTap>)> {
        let mut g = Graph::new(GradMode::Frozen);
        let x = g.constant(input.clone());
        let out = self.forward_graph(&mut g, store, x)?;
        let taps = if want_taps {
            out.taps
                .iter()
                .map(|&(r, c, v)| FeatureTap {
                    position: (r, c),
                    tensor: g.value(v).clone(),
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok((g.value(out.output).clamp01(), taps))
    }

    /// Inference with the indirect head: `(t̂, Â, clamp(J))`.
    pub fn forward_indirect(
        &self,
        store: &ParameterStore,
        input: &Tensor,
    ) -> Result<IndirectOutput> {
        if self.config.output_head != OutputHead::Indirect {
            return Err(Error::Config("model has a direct output head".into()));
        }
        let mut g = Graph::new(GradMode::Frozen);
        let x = g.constant(input.clone());
        let out = self.forward_graph(&mut g, store, x)?;
        let t = out.transmission.expect("indirect head");
        let a = out.airlight.expect("indirect head");
        Ok(IndirectOutput {
            transmission: g.value(t).clone(),
            airlight: g.value(a).data().to_vec(),
            dehazed: g.value(out.output).clamp01(),
        })
    }

    /// The feature maps that enter the grid for `input`.
    pub fn learned_inputs(&self, store: &ParameterStore, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(GradMode::Frozen);
        let x = g.constant(input.clone());
        let stem = self.stem(&mut g, store, x)?;
        Ok(g.value(stem).clone())
    }
}

fn layout(config: &GridConfig) -> Vec<ParamSpec> {
    let mut s = Specs::default();
    let ch = &config.scale_channels;
    let (rows, cols, convs, growth) = (
        config.rows,
        config.cols,
        config.rdb_convs,
        config.growth_rate,
    );
    let variant = config.variant;
    if variant.has_pre() {
        s.conv("pre.conv", ch[0], 3, 3);
        declare_rdb(&mut s, "pre.rdb", ch[0], convs, growth);
    }
    if variant == VariantSpec::Ednet {
        for row in 1..rows {
            declare_down(&mut s, &down_name(row, 0), ch[row - 1]);
        }
        for k in 0..cols - 1 {
            declare_rdb(&mut s, &rdb_name(rows - 1, k), ch[rows - 1], convs, growth);
        }
        for row in (0..rows - 1).rev() {
            declare_up(&mut s, &up_name(row, cols - 1), ch[row + 1]);
        }
    } else {
        let msnet = variant == VariantSpec::Msnet;
        let fusion = FusionKind {
            cab: variant.uses_cab(),
            sab: variant.uses_sab(),
        };
        for (row, &c) in ch.iter().enumerate() {
            for k in 0..cols - 1 {
                declare_rdb(&mut s, &rdb_name(row, k), c, convs, growth);
            }
        }
        for col in 0..cols / 2 {
            if msnet && col != 0 {
                continue;
            }
            for row in 1..rows {
                declare_down(&mut s, &down_name(row, col), ch[row - 1]);
                if col > 0 {
                    let c = ch[row];
                    declare_scab(
                        &mut s,
                        &fuse_name(row, col),
                        c,
                        config.cab_hidden(c),
                        config.sab_kernel,
                        fusion,
                    );
                }
            }
        }
        for col in cols / 2..cols {
            if msnet && col != cols - 1 {
                continue;
            }
            for row in 0..rows - 1 {
                declare_up(&mut s, &up_name(row, col), ch[row + 1]);
                let c = ch[row];
                declare_scab(
                    &mut s,
                    &fuse_name(row, col),
                    c,
                    config.cab_hidden(c),
                    config.sab_kernel,
                    fusion,
                );
            }
        }
    }
    if variant != VariantSpec::NoPost {
        declare_rdb(&mut s, "post.rdb", ch[0], convs, growth);
    }
    s.conv("post.conv", config.out_channels(), ch[0], 3);
    s.0
}
