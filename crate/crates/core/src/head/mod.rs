//! Keypoint branch: baseline conv trunk or GCM variants, followed by the
//! deconv + bilinear up-path to `17×56×56` heatmap logits.

pub mod gcm;
pub mod targets;

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::keypoints::NUM_KEYPOINTS;
use crate::params::{he_uniform, Conv, Graph, ParamId, ParamSet};
use crate::tensor::Tensor;

pub use gcm::{attention_maps, gcm_forward, mhsa_forward, GcmBlock, MhsaOutput};
pub use targets::{decode_heatmaps, encode_targets, keypoint_loss, KeypointLoss, LossKind, Targets};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadVariant {
    #[serde(rename = "baseline", alias = "baseline-8conv")]
    Baseline8Conv,
    #[serde(rename = "gcm-series")]
    GcmSeries,
    #[serde(rename = "gcm-parallel")]
    GcmParallel,
}

impl HeadVariant {
    pub const ALL: [HeadVariant; 3] = [HeadVariant::Baseline8Conv, HeadVariant::GcmSeries, HeadVariant::GcmParallel];

    pub fn has_gcm(self) -> bool {
        self != HeadVariant::Baseline8Conv
    }
}

impl fmt::Display for HeadVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadVariant::Baseline8Conv => "baseline",
            HeadVariant::GcmSeries => "gcm-series",
            HeadVariant::GcmParallel => "gcm-parallel",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub variant: HeadVariant,
    pub head_channels: usize,
    pub heads: usize,
    pub heatmap_size: (usize, usize),
    pub loss: LossKind,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            variant: HeadVariant::GcmSeries,
            head_channels: 32,
            heads: 4,
            heatmap_size: (56, 56),
            loss: LossKind::CrossEntropy,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.head_channels == 0 || self.heads == 0 || self.head_channels % self.heads != 0 {
            return Err(Error::invalid(
                "head_config",
                format!("head_channels {} must be a positive multiple of heads {}", self.head_channels, self.heads),
            ));
        }
        if self.heatmap_size.0 == 0 || self.heatmap_size.1 == 0 {
            return Err(Error::invalid("head_config", "heatmap size must be positive"));
        }
        if let LossKind::GaussianMse { sigma } = self.loss {
            if !(sigma > 0.0) {
                return Err(Error::invalid("head_config", "gaussian sigma must be positive"));
            }
        }
        Ok(())
    }
}

impl std::str::FromStr for HeadVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "baseline" | "baseline-8conv" => Ok(HeadVariant::Baseline8Conv),
            "gcm-series" => Ok(HeadVariant::GcmSeries),
            "gcm-parallel" => Ok(HeadVariant::GcmParallel),
            _ => Err(Error::invalid("head_variant", format!("unrecognized variant {s:?}"))),
        }
    }
}

/// One layer of the pre-upsampling trunk, for receptive-field accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrunkLayer {
    Conv { kernel: usize, stride: usize },
    /// A layer that mixes every spatial position.
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReceptiveField {
    Finite(usize),
    /// Every output depends on the whole `extent×extent` input.
    Global { extent: usize },
}

impl fmt::Display for ReceptiveField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReceptiveField::Finite(n) => write!(f, "{n}"),
            ReceptiveField::Global { .. } => f.write_str("global"),
        }
    }
}

/// Parses a comma-separated layer stack such as `3:1,3:2,g` (`kernel:stride`, or `g` for global).
pub fn parse_trunk_layers(s: &str) -> Result<Vec<TrunkLayer>> {
    let bad = |part: &str| Error::invalid("stack", format!("bad layer {part:?} (want kernel:stride or g)"));
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|part| {
            if part == "g" || part == "global" {
                return Ok(TrunkLayer::Global);
            }
            let (k, st) = part.split_once(':').ok_or_else(|| bad(part))?;
            let kernel: usize = k.parse().map_err(|_| bad(part))?;
            let stride: usize = st.parse().map_err(|_| bad(part))?;
            if kernel == 0 || stride == 0 {
                return Err(bad(part));
            }
            Ok(TrunkLayer::Conv { kernel, stride })
        })
        .collect()
}

/// `rf = 1 + Σ (kᵢ − 1)·∏_{j<i} sⱼ`; any global layer makes the field global.
pub fn receptive_field_of(layers: &[TrunkLayer], input_extent: usize) -> ReceptiveField {
    let mut rf = 1;
    let mut jump = 1;
    for layer in layers {
        match *layer {
            TrunkLayer::Global => return ReceptiveField::Global { extent: input_extent },
            TrunkLayer::Conv { kernel, stride } => {
                rf += (kernel - 1) * jump;
                jump *= stride;
            }
        }
    }
    ReceptiveField::Finite(rf)
}

#[derive(Clone, Copy, Debug)]
pub struct Deconv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
}

impl Deconv {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        let weight = params.add(format!("{name}.weight"), he_uniform(&[cin, cout, kernel, kernel], cin * kernel * kernel, rng));
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            weight,
            bias,
            kernel,
            stride,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.tape.conv_transpose2d(x, w, b, self.stride)
    }
}

#[derive(Clone, Debug)]
enum Trunk {
    Baseline(Vec<Conv>),
    Series(Vec<(GcmBlock, Vec<Conv>)>),
    Parallel(Vec<(GcmBlock, Vec<Conv>)>),
}

/// Keypoint branch over `C×s×s` RoI features.
#[derive(Clone, Debug)]
pub struct KeypointHead {
    pub config: HeadConfig,
    pub in_channels: usize,
    pub roi_size: usize,
    input_proj: Option<Conv>,
    trunk: Trunk,
    deconv: Deconv,
    upsample: usize,
}

impl KeypointHead {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, config: &HeadConfig, in_channels: usize, roi_size: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.head_channels;
        let (hh, hw) = config.heatmap_size;
        let deconv_out = 2 * roi_size;
        if hh % deconv_out != 0 || hw != hh {
            return Err(Error::invalid(
                "head_config",
                format!("square heatmap size must be a multiple of {deconv_out} for {roi_size}x{roi_size} inputs, got {hh}x{hw}"),
            ));
        }
        let convs = |params: &mut ParamSet, prefix: &str, first_in: usize, rng: &mut R| -> Vec<Conv> {
            (0..4)
                .map(|i| Conv::same3(params, &format!("{prefix}.conv{i}"), if i == 0 { first_in } else { c }, c, rng))
                .collect()
        };
        let mut input_proj = None;
        let trunk = match config.variant {
            HeadVariant::Baseline8Conv => Trunk::Baseline(
                (0..8)
                    .map(|i| Conv::same3(params, &format!("head.conv{i}"), if i == 0 { in_channels } else { c }, c, rng))
                    .collect(),
            ),
            variant => {
                if in_channels != c {
                    input_proj = Some(Conv::new(params, "head.input_proj", in_channels, c, 1, 1, 0, rng));
                }
                let mut reps = Vec::with_capacity(2);
                for r in 0..2 {
                    let prefix = format!("head.rep{r}");
                    let gcm = GcmBlock::new(params, &format!("{prefix}.gcm"), c, config.heads, (roi_size, roi_size), rng)?;
                    reps.push((gcm, convs(params, &prefix, c, rng)));
                }
                if variant == HeadVariant::GcmSeries {
                    Trunk::Series(reps)
                } else {
                    Trunk::Parallel(reps)
                }
            }
        };
        let deconv = Deconv::new(params, "head.deconv", c, NUM_KEYPOINTS, 2, 2, rng);
        Ok(Self {
            config: config.clone(),
            in_channels,
            roi_size,
            input_proj,
            trunk,
            deconv,
            upsample: hh / deconv_out,
        })
    }

    /// GCM blocks in application order (empty for the baseline).
    pub fn gcm_blocks(&self) -> Vec<&GcmBlock> {
        match &self.trunk {
            Trunk::Baseline(_) => Vec::new(),
            Trunk::Series(reps) | Trunk::Parallel(reps) => reps.iter().map(|(g, _)| g).collect(),
        }
    }

    pub fn layers(&self) -> Vec<TrunkLayer> {
        let conv = |c: &Conv| TrunkLayer::Conv {
            kernel: c.kernel,
            stride: c.stride,
        };
        let mut out: Vec<TrunkLayer> = self.input_proj.iter().map(conv).collect();
        match &self.trunk {
            Trunk::Baseline(convs) => out.extend(convs.iter().map(conv)),
            Trunk::Series(reps) | Trunk::Parallel(reps) => {
                for (_, convs) in reps {
                    out.push(TrunkLayer::Global);
                    out.extend(convs.iter().map(conv));
                }
            }
        }
        out
    }

    pub fn receptive_field(&self) -> ReceptiveField {
        receptive_field_of(&self.layers(), self.roi_size)
    }

    /// Pre-upsampling trunk: `C×s×s → head_channels×s×s`.
    pub fn trunk(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let c = g.value(x).dims3()?.0;
        if c != self.in_channels {
            return Err(Error::shape("head_forward", "input channels", self.in_channels, c));
        }
        let mut x = match &self.input_proj {
            Some(p) => p.forward(g, x)?,
            None => x,
        };
        match &self.trunk {
            Trunk::Baseline(convs) => {
                for conv in convs {
                    x = conv.forward_relu(g, x)?;
                }
            }
            Trunk::Series(reps) => {
                for (gcm, convs) in reps {
                    x = gcm.forward(g, x)?;
                    for conv in convs {
                        x = conv.forward_relu(g, x)?;
                    }
                }
            }
            Trunk::Parallel(reps) => {
                for (gcm, convs) in reps {
                    let global = gcm.residual(g, x)?;
                    let mut local = x;
                    for conv in convs {
                        local = conv.forward_relu(g, local)?;
                    }
                    let merged = g.tape.add(global, local)?;
                    x = g.tape.relu(merged);
                }
            }
        }
        Ok(x)
    }

    /// Deconv (stride 2) then bilinear up to the heatmap size.
    pub fn upsample(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let y = self.deconv.forward(g, x)?;
        if self.upsample == 1 {
            Ok(y)
        } else {
            g.tape.bilinear_upsample(y, self.upsample)
        }
    }

    /// `17×H×W` heatmap logits.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let t = self.trunk(g, x)?;
        self.upsample(g, t)
    }
}

/// Heatmap logits for one RoI feature map.
pub fn head_forward(params: &ParamSet, head: &KeypointHead, features: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new(params);
    let x = g.input(features.clone());
    let y = head.forward(&mut g, x)?;
    Ok(g.value(y).clone())
}

/// Copy of `params` with every conv weight of the head trunk replaced by its
/// absolute value, so that with positive inputs no ReLU is inactive and no
/// influence path cancels.
pub fn positive_probe_params(params: &ParamSet) -> ParamSet {
    let mut probe = params.clone();
    let ids: Vec<ParamId> = probe.ids().filter(|&id| {
        let name = probe.name(id);
        name.starts_with("head.") && name.ends_with(".weight") && !name.starts_with("head.deconv")
    }).collect();
    for id in ids {
        let t = probe.get(id).map(f64::abs);
        *probe.get_mut(id) = t;
    }
    probe
}

/// Output positions of the trunk that change when input pixel `(y, x)` is
/// perturbed in every channel.
pub fn influence_of_pixel(params: &ParamSet, head: &KeypointHead, input: &Tensor, (py, px): (usize, usize)) -> Result<Vec<bool>> {
    let run = |t: &Tensor| -> Result<Tensor> {
        let mut g = Graph::new(params);
        let v = g.input(t.clone());
        let y = head.trunk(&mut g, v)?;
        Ok(g.value(y).clone())
    };
    let base = run(input)?;
    let (c, h, w) = input.dims3()?;
    let mut bumped = input.clone();
    for ch in 0..c {
        bumped.data_mut()[(ch * h + py) * w + px] += 1e-3;
    }
    let moved = run(&bumped)?;
    let (oc, oh, ow) = base.dims3()?;
    Ok((0..oh * ow)
        .map(|pos| (0..oc).any(|ch| base.data()[ch * oh * ow + pos] != moved.data()[ch * oh * ow + pos]))
        .collect())
}

/// Side length of the square of trunk outputs influenced by the central
/// input pixel of a `C×n×n` positive input.
pub fn measured_extent(params: &ParamSet, head: &KeypointHead, n: usize) -> Result<usize> {
    let probe = positive_probe_params(params);
    let input = Tensor::full(&[head.in_channels, n, n], 0.5);
    let hit = influence_of_pixel(&probe, head, &input, (n / 2, n / 2))?;
    let cols: Vec<usize> = (0..n).filter(|&x| (0..n).any(|y| hit[y * n + x])).collect();
    Ok(cols.last().map_or(0, |last| last - cols[0] + 1))
}
