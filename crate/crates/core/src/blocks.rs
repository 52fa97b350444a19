//! Bottleneck blocks, temporal feature aggregation and declarative network
//! descriptors.
//!
//! Network layout: a stem convolution (BN, ReLU, no max pool), four stages of
//! residual bottleneck blocks whose middle position holds the configured
//! convolution, a spatio-temporal average pool and a linear classifier.
//! Temporal resolution is never reduced; spatial stride sits on the middle
//! convolution of the first block of a stage.

use rand::Rng;

use crate::error::{config_err, Result};
use crate::nn::{BatchNorm, Conv2d, Conv3d, Layer, Linear};
use crate::params::{Mode, ParamStore, Session};
use crate::tada::{TAdaConv2d, TAdaConvConfig};
use crate::{Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolKind {
    Avg,
    Max,
    /// Mean of the average- and max-pooled sequences.
    Mix,
}

/// Which parts of the aggregation are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockVariantFlags {
    pub use_aggregation: bool,
    /// Keep the un-pooled input next to the pooled branch.
    pub use_shortcut_branch: bool,
    /// Normalise the two branches with separate batch norms.
    pub separate_bn: bool,
}

impl Default for BlockVariantFlags {
    fn default() -> Self {
        BlockVariantFlags { use_aggregation: true, use_shortcut_branch: true, separate_bn: true }
    }
}

impl BlockVariantFlags {
    pub fn validate(&self) -> Result<()> {
        if self.separate_bn && !self.use_shortcut_branch {
            return Err(config_err!("separate_bn requires use_shortcut_branch"));
        }
        if self.use_shortcut_branch && !self.use_aggregation {
            return Err(config_err!("use_shortcut_branch requires use_aggregation"));
        }
        Ok(())
    }

    /// All valid flag combinations.
    pub fn all() -> Vec<BlockVariantFlags> {
        let mut out = Vec::new();
        for bits in 0..8u8 {
            let f = BlockVariantFlags {
                use_aggregation: bits & 1 != 0,
                use_shortcut_branch: bits & 2 != 0,
                separate_bn: bits & 4 != 0,
            };
            if f.validate().is_ok() {
                out.push(f);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AggregationSpec {
    pub flags: BlockVariantFlags,
    pub pool: PoolKind,
    /// Temporal pooling window.
    pub k: usize,
}

impl Default for AggregationSpec {
    fn default() -> Self {
        AggregationSpec { flags: BlockVariantFlags::default(), pool: PoolKind::Avg, k: 3 }
    }
}

/// Temporal feature aggregation following a calibrated convolution:
///
/// - no aggregation: `ReLU(BN1(x))`
/// - pooled branch only: `ReLU(BN1(Pool(x)))`
/// - shared BN: `ReLU(BN1(x + Pool(x)))`
/// - full: `ReLU(BN1(x) + BN2(Pool(x)))`, `BN2` starting at zero scale and shift.
///
/// `Pool` is a stride-1, same-length temporal pool with edge replication.
#[derive(Debug, Clone)]
pub struct AggregationParams {
    pub bn1: BatchNorm,
    pub bn2: Option<BatchNorm>,
    pub pool: PoolKind,
    pub k: usize,
    pub flags: BlockVariantFlags,
}

impl AggregationParams {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize, spec: &AggregationSpec) -> Result<Self> {
        spec.flags.validate()?;
        if spec.k == 0 {
            return Err(config_err!("aggregation window must be >= 1"));
        }
        let bn1 = BatchNorm::new(store, name, channels);
        let bn2 = (spec.flags.use_aggregation && spec.flags.separate_bn)
            .then(|| BatchNorm::with_scale(store, &format!("{name}_pool"), channels, S::zero()));
        Ok(AggregationParams { bn1, bn2, pool: spec.pool, k: spec.k, flags: spec.flags })
    }
}

/// Same-length temporal pooling of the requested kind.
pub fn temporal_pool<S: Scalar>(s: &mut Session<'_, S>, x: Var, kind: PoolKind, k: usize) -> Result<Var> {
    match kind {
        PoolKind::Avg => s.tape.temporal_avg_pool(x, k),
        PoolKind::Max => s.tape.temporal_max_pool(x, k),
        PoolKind::Mix => {
            let a = s.tape.temporal_avg_pool(x, k)?;
            let m = s.tape.temporal_max_pool(x, k)?;
            let sum = s.tape.add(a, m)?;
            Ok(s.tape.scale(sum, S::from_f64_lossy(0.5)))
        }
    }
}

impl<S: Scalar> Layer<S> for AggregationParams {
    fn forward(&self, s: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let f = self.flags;
        let pre = if !f.use_aggregation {
            self.bn1.forward(s, x)?
        } else {
            let pooled = temporal_pool(s, x, self.pool, self.k)?;
            match (&self.bn2, f.use_shortcut_branch) {
                (Some(bn2), _) => {
                    let a = self.bn1.forward(s, x)?;
                    let b = bn2.forward(s, pooled)?;
                    s.tape.add(a, b)?
                }
                (None, true) => {
                    let sum = s.tape.add(x, pooled)?;
                    self.bn1.forward(s, sum)?
                }
                (None, false) => self.bn1.forward(s, pooled)?,
            }
        };
        Ok(s.tape.relu(pre))
    }
}

/// Forward-only aggregation of `x`.
pub fn aggregate<S: Scalar>(
    store: &mut ParamStore<S>,
    p: &AggregationParams,
    x: &Tensor<S>,
    mode: Mode,
) -> Result<Tensor<S>> {
    let mut s = Session::inference(store, mode);
    let xv = s.input(x.clone());
    let y = p.forward(&mut s, xv)?;
    Ok(s.value(y).clone())
}

/// The convolution in the middle of a bottleneck block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConvKind {
    /// Per-frame `1 x k x k`.
    Spatial,
    /// Temporally-adaptive `1 x k x k` followed by temporal aggregation.
    Tada,
    /// Per-frame `1 x k x k`, BN, ReLU, then a full `3 x 1 x 1` convolution.
    TemporalSpatial,
    /// Full `3 x k x k`.
    ThreeD,
}

impl ConvKind {
    pub fn name(self) -> &'static str {
        match self {
            ConvKind::Spatial => "spatial",
            ConvKind::Tada => "tada",
            ConvKind::TemporalSpatial => "2plus1d",
            ConvKind::ThreeD => "3d",
        }
    }
}

/// Temporal extent of the extra convolutions in the `TemporalSpatial` and `ThreeD` kinds.
pub const TEMPORAL_TAPS: usize = 3;
/// Spatial extent of the middle convolution.
pub const MIDDLE_K: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub c_in: usize,
    pub mid: usize,
    pub c_out: usize,
    pub stride: usize,
    pub conv_kind: ConvKind,
    pub tada: TAdaConvConfig,
    pub aggregation: AggregationSpec,
}

impl BlockSpec {
    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.mid == 0 || self.c_out == 0 {
            return Err(config_err!("block widths must be positive: {} -> {} -> {}", self.c_in, self.mid, self.c_out));
        }
        if self.stride == 0 {
            return Err(config_err!("block stride must be >= 1"));
        }
        if self.conv_kind == ConvKind::Tada {
            self.tada.validate(self.mid)?;
            self.aggregation.flags.validate()?;
        }
        Ok(())
    }

    pub fn has_projection(&self) -> bool {
        self.c_in != self.c_out || self.stride != 1
    }
}

#[derive(Debug, Clone)]
enum Middle {
    Spatial { conv: Conv2d, bn: BatchNorm },
    Tada { conv: TAdaConv2d, agg: AggregationParams },
    TemporalSpatial { spatial: Conv2d, bn_s: BatchNorm, temporal: Conv3d, bn_t: BatchNorm },
    ThreeD { conv: Conv3d, bn: BatchNorm },
}

/// Residual bottleneck `1x1 -> middle -> 1x1` with BN and ReLU after each
/// convolution and a projection shortcut on width or stride change.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub spec: BlockSpec,
    conv_a: Conv2d,
    bn_a: BatchNorm,
    middle: Middle,
    conv_c: Conv2d,
    bn_c: BatchNorm,
    projection: Option<(Conv2d, BatchNorm)>,
}

impl Bottleneck {
    /// `frames` is the temporal length the block will see.
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        spec: &BlockSpec,
        frames: usize,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let (ci, m, co, st) = (spec.c_in, spec.mid, spec.c_out, spec.stride);
        let k = MIDDLE_K;
        let p = (k - 1) / 2;
        let conv_a = Conv2d::new(store, &format!("{name}.conv_a"), ci, m, 1, 1, 0, rng);
        let bn_a = BatchNorm::new(store, &format!("{name}.bn_a"), m);
        let mname = format!("{name}.conv_b");
        let bname = format!("{name}.bn_b");
        let middle = match spec.conv_kind {
            ConvKind::Spatial => Middle::Spatial {
                conv: Conv2d::new(store, &mname, m, m, k, st, p, rng),
                bn: BatchNorm::new(store, &bname, m),
            },
            ConvKind::Tada => Middle::Tada {
                conv: TAdaConv2d::new(store, &mname, m, m, k, st, p, frames, &spec.tada, rng)?,
                agg: AggregationParams::new(store, &bname, m, &spec.aggregation)?,
            },
            ConvKind::TemporalSpatial => Middle::TemporalSpatial {
                spatial: Conv2d::new(store, &mname, m, m, k, st, p, rng),
                bn_s: BatchNorm::new(store, &bname, m),
                temporal: Conv3d::new(
                    store,
                    &format!("{name}.conv_t"),
                    m,
                    m,
                    [TEMPORAL_TAPS, 1, 1],
                    [1, 1, 1],
                    [(TEMPORAL_TAPS - 1) / 2, 0, 0],
                    rng,
                ),
                bn_t: BatchNorm::new(store, &format!("{name}.bn_t"), m),
            },
            ConvKind::ThreeD => Middle::ThreeD {
                conv: Conv3d::new(store, &mname, m, m, [TEMPORAL_TAPS, k, k], [1, st, st], [(TEMPORAL_TAPS - 1) / 2, p, p], rng),
                bn: BatchNorm::new(store, &bname, m),
            },
        };
        let conv_c = Conv2d::new(store, &format!("{name}.conv_c"), m, co, 1, 1, 0, rng);
        let bn_c = BatchNorm::new(store, &format!("{name}.bn_c"), co);
        let projection = spec.has_projection().then(|| {
            (
                Conv2d::new(store, &format!("{name}.proj"), ci, co, 1, st, 0, rng),
                BatchNorm::new(store, &format!("{name}.proj_bn"), co),
            )
        });
        Ok(Bottleneck { spec: spec.clone(), conv_a, bn_a, middle, conv_c, bn_c, projection })
    }

    /// The calibrated convolution, when the middle position holds one.
    pub fn tada(&self) -> Option<&TAdaConv2d> {
        match &self.middle {
            Middle::Tada { conv, .. } => Some(conv),
            _ => None,
        }
    }

    pub fn aggregation(&self) -> Option<&AggregationParams> {
        match &self.middle {
            Middle::Tada { agg, .. } => Some(agg),
            _ => None,
        }
    }
}

fn conv_bn_relu<S: Scalar, L: Layer<S>>(s: &mut Session<'_, S>, conv: &L, bn: &BatchNorm, x: Var) -> Result<Var> {
    let y = conv.forward(s, x)?;
    let y = bn.forward(s, y)?;
    Ok(s.tape.relu(y))
}

impl<S: Scalar> Layer<S> for Bottleneck {
    fn forward(&self, s: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let h = conv_bn_relu(s, &self.conv_a, &self.bn_a, x)?;
        let h = match &self.middle {
            Middle::Spatial { conv, bn } => conv_bn_relu(s, conv, bn, h)?,
            Middle::Tada { conv, agg } => {
                let y = conv.forward(s, h)?;
                agg.forward(s, y)?
            }
            Middle::TemporalSpatial { spatial, bn_s, temporal, bn_t } => {
                let y = conv_bn_relu(s, spatial, bn_s, h)?;
                conv_bn_relu(s, temporal, bn_t, y)?
            }
            Middle::ThreeD { conv, bn } => conv_bn_relu(s, conv, bn, h)?,
        };
        let h = self.conv_c.forward(s, h)?;
        let h = self.bn_c.forward(s, h)?;
        let skip = match &self.projection {
            Some((conv, bn)) => {
                let y = conv.forward(s, x)?;
                bn.forward(s, y)?
            }
            None => x,
        };
        let out = s.tape.add(h, skip)?;
        Ok(s.tape.relu(out))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StemSpec {
    /// Temporal kernel extent; 1 gives a per-frame convolution.
    pub kt: usize,
    pub k: usize,
    pub stride: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageSpec {
    pub blocks: usize,
    pub mid: usize,
    pub out: usize,
    /// Spatial stride of the first block.
    pub stride: usize,
    pub conv_kind: ConvKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetSpec {
    pub name: String,
    pub in_channels: usize,
    /// Input `[T, H, W]`.
    pub input: [usize; 3],
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    pub num_classes: usize,
    pub tada: TAdaConvConfig,
    pub aggregation: AggregationSpec,
}

/// Geometry of one block inside a network.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPlan {
    pub name: String,
    pub spec: BlockSpec,
    /// Input `[T, H, W]`.
    pub input: [usize; 3],
    /// Output `[T, H, W]`.
    pub output: [usize; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetPlan {
    /// Stem output `[T, H, W]`.
    pub stem_output: [usize; 3],
    pub blocks: Vec<BlockPlan>,
    /// Channel width entering the classifier.
    pub features: usize,
    /// Output `[C, T, H, W]` of every stage.
    pub stage_outputs: Vec<[usize; 4]>,
}

/// Output extent of a convolution, or a config error when the window does
/// not fit.
pub fn conv_extent(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if len + 2 * pad < k {
        return Err(config_err!("geometry underflow: extent {} with padding {} is smaller than kernel {}", len, pad, k));
    }
    Ok((len + 2 * pad - k) / stride + 1)
}

const RESNET50_STAGES: [(usize, usize, usize); 4] = [(3, 64, 256), (4, 128, 512), (6, 256, 1024), (3, 512, 2048)];

/// Preset names accepted by [`NetSpec::preset`].
pub const PRESETS: [&str; 8] =
    ["r2d50", "tada2d50", "r2plus1d50", "r3d50", "r2d-tiny", "tada2d-tiny", "r2plus1d-tiny", "r3d-tiny"];

impl NetSpec {
    fn resnet50(name: &str, kind: ConvKind, stem_kt: usize) -> NetSpec {
        let stages = RESNET50_STAGES
            .iter()
            .map(|&(blocks, mid, out)| StageSpec { blocks, mid, out, stride: 2, conv_kind: kind })
            .collect();
        NetSpec {
            name: name.to_string(),
            in_channels: 3,
            input: [8, 224, 224],
            stem: StemSpec { kt: stem_kt, k: 7, stride: 2, width: 64 },
            stages,
            num_classes: 400,
            tada: TAdaConvConfig::default(),
            aggregation: AggregationSpec::default(),
        }
    }

    pub fn r2d50() -> NetSpec {
        Self::resnet50("r2d50", ConvKind::Spatial, 1)
    }

    pub fn tada2d50() -> NetSpec {
        Self::resnet50("tada2d50", ConvKind::Tada, 1)
    }

    pub fn r2plus1d50() -> NetSpec {
        Self::resnet50("r2plus1d50", ConvKind::TemporalSpatial, 1)
    }

    pub fn r3d50() -> NetSpec {
        Self::resnet50("r3d50", ConvKind::ThreeD, TEMPORAL_TAPS)
    }

    /// A two-stage network small enough for finite differences and
    /// desk-scale training.
    pub fn toy(name: &str, in_channels: usize, input: [usize; 3], width: usize, classes: usize, kind: ConvKind) -> NetSpec {
        let stem_kt = if kind == ConvKind::ThreeD { TEMPORAL_TAPS } else { 1 };
        NetSpec {
            name: name.to_string(),
            in_channels,
            input,
            stem: StemSpec { kt: stem_kt, k: 3, stride: 1, width },
            stages: vec![
                StageSpec { blocks: 1, mid: width / 2, out: width, stride: 1, conv_kind: kind },
                StageSpec { blocks: 1, mid: width / 2, out: width, stride: 2, conv_kind: kind },
            ],
            num_classes: classes,
            tada: TAdaConvConfig::default(),
            aggregation: AggregationSpec::default(),
        }
    }

    pub fn preset(name: &str) -> Result<NetSpec> {
        let tiny = |kind| NetSpec::toy(name, 3, [4, 8, 8], 8, 5, kind);
        Ok(match name {
            "r2d50" => Self::r2d50(),
            "tada2d50" => Self::tada2d50(),
            "r2plus1d50" => Self::r2plus1d50(),
            "r3d50" => Self::r3d50(),
            "r2d-tiny" => tiny(ConvKind::Spatial),
            "tada2d-tiny" => tiny(ConvKind::Tada),
            "r2plus1d-tiny" => tiny(ConvKind::TemporalSpatial),
            "r3d-tiny" => tiny(ConvKind::ThreeD),
            _ => return Err(crate::Error::Usage(format!("unknown preset {name:?}; known: {}", PRESETS.join(", ")))),
        })
    }

    /// Replaces the middle convolution of the selected stages with `kind`.
    pub fn with_stage_kinds(mut self, enabled: &[bool], kind: ConvKind) -> NetSpec {
        for (stage, &on) in self.stages.iter_mut().zip(enabled) {
            if on {
                stage.conv_kind = kind;
            }
        }
        self
    }

    /// Shape propagation through stem and stages.
    pub fn plan(&self) -> Result<NetPlan> {
        let positive = [self.in_channels, self.stem.kt, self.stem.k, self.stem.stride, self.stem.width, self.num_classes];
        if positive.contains(&0) || self.input.contains(&0) {
            return Err(config_err!("network {}: extents and widths must be positive", self.name));
        }
        if self.stem.kt.is_multiple_of(2) || self.stem.k.is_multiple_of(2) {
            return Err(config_err!("stem kernel must be odd"));
        }
        let [t, h, w] = self.input;
        let (pt, p) = ((self.stem.kt - 1) / 2, (self.stem.k - 1) / 2);
        let stem_output = [
            conv_extent(t, self.stem.kt, 1, pt)?,
            conv_extent(h, self.stem.k, self.stem.stride, p)?,
            conv_extent(w, self.stem.k, self.stem.stride, p)?,
        ];
        let mut geom = stem_output;
        let mut c = self.stem.width;
        let mut blocks = Vec::new();
        let mut stage_outputs = Vec::new();
        for (si, stage) in self.stages.iter().enumerate() {
            if stage.blocks == 0 {
                return Err(config_err!("stage {} has no blocks", si));
            }
            for b in 0..stage.blocks {
                let stride = if b == 0 { stage.stride } else { 1 };
                let spec = BlockSpec {
                    c_in: c,
                    mid: stage.mid,
                    c_out: stage.out,
                    stride,
                    conv_kind: stage.conv_kind,
                    tada: self.tada.clone(),
                    aggregation: self.aggregation,
                };
                spec.validate()?;
                let (kt, pt) = match stage.conv_kind {
                    ConvKind::ThreeD => (TEMPORAL_TAPS, (TEMPORAL_TAPS - 1) / 2),
                    _ => (1, 0),
                };
                let p = (MIDDLE_K - 1) / 2;
                let output = [
                    conv_extent(geom[0], kt, 1, pt)?,
                    conv_extent(geom[1], MIDDLE_K, stride, p)?,
                    conv_extent(geom[2], MIDDLE_K, stride, p)?,
                ];
                if stage.conv_kind == ConvKind::Tada && spec.aggregation.flags.use_aggregation && spec.aggregation.k > geom[0] {
                    return Err(config_err!("aggregation window {} exceeds {} frames", spec.aggregation.k, geom[0]));
                }
                blocks.push(BlockPlan { name: format!("res{}.{}", si + 2, b), spec, input: geom, output });
                geom = output;
                c = stage.out;
            }
            stage_outputs.push([c, geom[0], geom[1], geom[2]]);
        }
        Ok(NetPlan { stem_output, blocks, features: c, stage_outputs })
    }
}

#[derive(Debug, Clone)]
enum Stem {
    Frame(Conv2d),
    Volume(Conv3d),
}

/// An executable network built from a [`NetSpec`].
#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetSpec,
    pub plan: NetPlan,
    stem: Stem,
    stem_bn: BatchNorm,
    pub blocks: Vec<Bottleneck>,
    head: Linear,
}

/// Builds stem, stages and classifier head, registering parameters in `store`.
pub fn build_network<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, spec: &NetSpec, rng: &mut R) -> Result<Network> {
    let plan = spec.plan()?;
    let st = &spec.stem;
    let stem = if st.kt == 1 {
        Stem::Frame(Conv2d::new(store, "stem.conv", spec.in_channels, st.width, st.k, st.stride, (st.k - 1) / 2, rng))
    } else {
        Stem::Volume(Conv3d::new(
            store,
            "stem.conv",
            spec.in_channels,
            st.width,
            [st.kt, st.k, st.k],
            [1, st.stride, st.stride],
            [(st.kt - 1) / 2, (st.k - 1) / 2, (st.k - 1) / 2],
            rng,
        ))
    };
    let stem_bn = BatchNorm::new(store, "stem.bn", st.width);
    let blocks = plan
        .blocks
        .iter()
        .map(|b| Bottleneck::new(store, &b.name, &b.spec, b.input[0], rng))
        .collect::<Result<Vec<_>>>()?;
    let head = Linear::new(store, "head", plan.features, spec.num_classes, true, rng);
    Ok(Network { spec: spec.clone(), plan, stem, stem_bn, blocks, head })
}

impl<S: Scalar> Layer<S> for Network {
    /// Clip `[N, C, T, H, W]` to class logits `[N, classes]`.
    fn forward(&self, s: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let mut h = match &self.stem {
            Stem::Frame(c) => c.forward(s, x)?,
            Stem::Volume(c) => c.forward(s, x)?,
        };
        h = self.stem_bn.forward(s, h)?;
        h = s.tape.relu(h);
        for b in &self.blocks {
            h = b.forward(s, h)?;
        }
        let pooled = s.tape.gap_spatiotemporal(h)?;
        self.head.forward(s, pooled)
    }
}

impl Network {
    /// Forward-only logits for `x`.
    pub fn predict<S: Scalar>(&self, store: &mut ParamStore<S>, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        let mut s = Session::inference(store, mode);
        let xv = s.input(x.clone());
        let y = self.forward(&mut s, xv)?;
        Ok(s.value(y).clone())
    }
}
