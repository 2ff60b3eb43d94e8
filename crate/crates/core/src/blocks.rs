//! Composite layers: Initial Block, downsampling/upsampling units, the
//! bottleneck residual module (BRM), SE attention, the segmentation heads
//! and the classifier.

use crate::error::{Error, Result};
use crate::params::{BnStateId, Forward, NetBuilder, ParamId};
use crate::tape::NodeId;
use crate::tensor::ConvSpec;

/// Segmentation-head selector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeadKind {
    None,
    Se,
    Psp,
    Aspp { rates: Vec<usize>, reduction: usize },
}

impl HeadKind {
    /// ASPP with rates (2, 4, 8) and reduction 4.
    pub fn default_aspp() -> HeadKind {
        HeadKind::Aspp {
            rates: vec![2, 4, 8],
            reduction: 4,
        }
    }

    pub fn parse(s: &str) -> Result<HeadKind> {
        match s {
            "none" => Ok(HeadKind::None),
            "se" => Ok(HeadKind::Se),
            "psp" => Ok(HeadKind::Psp),
            "aspp" => Ok(HeadKind::default_aspp()),
            other => Err(Error::InvalidConfig {
                field: "head".into(),
                message: format!("unknown kind `{other}` (expected none|se|psp|aspp)"),
            }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::None => "none",
            HeadKind::Se => "se",
            HeadKind::Psp => "psp",
            HeadKind::Aspp { .. } => "aspp",
        }
    }
}

/// Convolution layer: registered weight/bias plus geometry.
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub(crate) weight: ParamId,
    pub(crate) bias: Option<ParamId>,
    pub(crate) spec: ConvSpec,
}

impl Conv2dLayer {
    pub fn new(b: &mut NetBuilder, name: &str, spec: ConvSpec) -> Conv2dLayer {
        let (weight, bias) = b.conv(name, spec);
        Conv2dLayer { weight, bias, spec }
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn forward(&self, f: &mut Forward, x: NodeId) -> Result<NodeId> {
        let w = f.param_node(self.weight);
        let b = self.bias.map(|b| f.param_node(b));
        f.tape.conv2d(x, w, b, self.spec)
    }
}

/// Batch-norm layer: gamma/beta parameters plus a running-stats slot.
#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub(crate) gamma: ParamId,
    pub(crate) beta: ParamId,
    pub(crate) state: BnStateId,
    pub(crate) channels: usize,
}

impl BatchNormLayer {
    pub fn new(b: &mut NetBuilder, name: &str, channels: usize) -> BatchNormLayer {
        let (gamma, beta, state) = b.batch_norm(name, channels);
        BatchNormLayer {
            gamma,
            beta,
            state,
            channels,
        }
    }

    pub fn forward(&self, f: &mut Forward, x: NodeId) -> Result<NodeId> {
        f.batch_norm(x, self.gamma, self.beta, self.state)
    }
}

/// Conv -> batch norm -> optional ReLU, the standard unit of the network.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub(crate) conv: Conv2dLayer,
    pub(crate) bn: BatchNormLayer,
    pub(crate) relu: bool,
}

impl ConvBnRelu {
    pub fn new(b: &mut NetBuilder, name: &str, spec: ConvSpec, relu: bool) -> ConvBnRelu {
        let conv = Conv2dLayer::new(b, &format!("{name}.conv"), spec);
        let bn = BatchNormLayer::new(b, &format!("{name}.bn"), spec.out_channels);
        ConvBnRelu { conv, bn, relu }
    }

    pub fn forward(&self, f: &mut Forward, x: NodeId) -> Result<NodeId> {
        let y = self.conv.forward(f, x)?;
        let y = self.bn.forward(f, y)?;
        Ok(if self.relu { f.tape.relu(y) } else { y })
    }
}

/// Squeeze-and-excitation channel attention:
/// y = x ⊙ sigmoid(fc2(relu(fc1(gap(x))))).
#[derive(Debug, Clone)]
pub struct SeBlock {
    pub(crate) fc1: Conv2dLayer,
    pub(crate) fc2: Conv2dLayer,
    pub(crate) channels: usize,
    pub(crate) reduction: usize,
}

impl SeBlock {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn reduction(&self) -> usize {
        self.reduction
    }

    pub fn new(b: &mut NetBuilder, name: &str, channels: usize, reduction: usize) -> Result<SeBlock> {
        if reduction == 0 || channels / reduction == 0 {
            return Err(Error::InvalidConfig {
                field: format!("{name}.reduction"),
                message: format!("channels {channels} / reduction {reduction} must be >= 1"),
            });
        }
        let mid = channels / reduction;
        let fc1 = Conv2dLayer::new(b, &format!("{name}.fc1"), ConvSpec::pointwise(channels, mid));
        let fc2 = Conv2dLayer::new(b, &format!("{name}.fc2"), ConvSpec::pointwise(mid, channels));
        Ok(SeBlock {
            fc1,
            fc2,
            channels,
            reduction,
        })
    }

    pub fn forward(&self, f: &mut Forward, x: NodeId) -> Result<NodeId> {
        let squeezed = f.tape.global_avg_pool(x)?;
        let h = self.fc1.forward(f, squeezed)?;
        let h = f.tape.relu(h);
        let h = self.fc2.forward(f, h)?;
        let gate = f.tape.sigmoid(h);
        f.tape.mul_broadcast(x, gate)
    }
}

/// Bottleneck residual module.
///
/// The non-residual branch is a channel-reducing 3x3 head, a factorized
/// (3x1, 1x3) pair, SE attention, a second factorized pair carrying the
/// dilation in both factors, and a 1x1 channel-recovery tail. The module
/// output is `x + branch(x)`.
#[derive(Debug, Clone)]
pub struct Brm {
    pub(crate) bottleneck: ConvBnRelu,
    pub(crate) fact_a: [ConvBnRelu; 2],
    pub(crate) se: SeBlock,
    pub(crate) fact_b: [ConvBnRelu; 2],
    pub(crate) recover: ConvBnRelu,
    pub(crate) channels: usize,
    pub(crate) dilation: usize,
}

/// Channel shrink factor inside a BRM.
pub const BRM_REDUCTION: usize = 2;
/// SE reduction used inside a BRM.
pub const BRM_SE_REDUCTION: usize = 4;

impl Brm {
    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn new(b: &mut NetBuilder, name: &str, channels: usize, dilation: usize) -> Result<Brm> {
        if dilation == 0 {
            return Err(Error::InvalidConfig {
                field: format!("{name}.dilation"),
                message: "dilation must be >= 1".into(),
            });
        }
        let mid = channels / BRM_REDUCTION;
        if mid == 0 {
            return Err(Error::InvalidConfig {
                field: format!("{name}.channels"),
                message: format!("channels {channels} / reduction {BRM_REDUCTION} must be >= 1"),
            });
        }
        let bottleneck = ConvBnRelu::new(
            b,
            &format!("{name}.bottleneck"),
            ConvSpec::same(3, channels, mid),
            true,
        );
        let fact_a = [
            ConvBnRelu::new(
                b,
                &format!("{name}.fact_a1"),
                vertical_factor(mid, 1),
                true,
            ),
            ConvBnRelu::new(
                b,
                &format!("{name}.fact_a2"),
                horizontal_factor(mid, 1),
                true,
            ),
        ];
        let se = SeBlock::new(b, &format!("{name}.se"), mid, BRM_SE_REDUCTION)?;
        let fact_b = [
            ConvBnRelu::new(
                b,
                &format!("{name}.fact_b1"),
                vertical_factor(mid, dilation),
                true,
            ),
            ConvBnRelu::new(
                b,
                &format!("{name}.fact_b2"),
                horizontal_factor(mid, dilation),
                true,
            ),
        ];
        let recover = ConvBnRelu::new(
            b,
            &format!("{name}.recover"),
            ConvSpec::pointwise(mid, channels),
            false,
        );
        Ok(Brm {
            bottleneck,
            fact_a,
            se,
            fact_b,
            recover,
            channels,
            dilation,
        })
    }

    pub fn forward(&self, f: &mut Forward, x: NodeId) -> Result<NodeId> {
        let c = f.tape.value(x).channels();
        if c != self.channels {
            return Err(Error::ShapeMismatch {
                context: "brm",
                dimension: "input channels",
                expected: self.channels,
                found: c,
            });
        }
        let mut y = self.bottleneck.forward(f, x)?;
        for unit in &self.fact_a {
            y = unit.forward(f, y)?;
        }
        y = self.se.forward(f, y)?;
        for unit in &self.fact_b {
            y = unit.forward(f, y)?;
        }
        y = self.recover.forward(f, y)?;
        f.tape.add(x, y)
    }
}

/// 3x1 factor, shape-preserving for the given dilation.
fn vertical_factor(channels: usize, dilation: usize) -> ConvSpec {
    ConvSpec {
        kernel: (3, 1),
        stride: (1, 1),
        padding: (dilation, 0),
        dilation: (dilation, 1),
        in_channels: channels,
        out_channels: channels,
        has_bias: true,
    }
}

/// 1x3 factor, shape-preserving for the given dilation.
fn horizontal_factor(channels: usize, dilation: usize) -> ConvSpec {
    ConvSpec {
        kernel: (1, 3),
        stride: (1, 1),
        padding: (0, dilation),
        dilation: (1, dilation),
        in_channels: channels,
        out_channels: channels,
        has_bias: true,
    }
}

/// Three consecutive 3x3 convolutions; the first carries stride 2, so the
/// output sits at half resolution with `c0` channels.
#[derive(Debug, Clone)]
pub struct InitialBlock {
    pub(crate) convs: [ConvBnRelu; 3],
}

impl InitialBlock {
    pub fn new(b: &mut NetBuilder, name: &str, c0: usize) -> InitialBlock {
        let convs = [
            ConvBnRelu::new(
                b,
                &format!("{name}.unit1"),
                ConvSpec::same(3, 3, c0).with_stride(2),
                true,
            ),
            ConvBnRelu::new(b, &format!("{name}.unit2"), ConvSpec::same(3, c0, c0), true),
            ConvBnRelu::new(b, &format!("{name}.unit3"), ConvSpec::same(3, c0, c0), true),
        ];
        InitialBlock { convs }
    }

    pub fn forward(&self, f: &mut Forward, x: NodeId) -> Result<NodeId> {
        let c = f.tape.value(x).channels();
        if c != 3 {
            return Err(Error::ShapeMismatch {
                context: "initial_block",
                dimension: "input channels",
                expected: 3,
                found: c,
            });
        }
        let mut y = x;
        for unit in &self.convs {
            y = unit.forward(f, y)?;
        }
        Ok(y)
    }
}

/// Stride-2 3x3 conv + norm + ReLU; halves resolution and changes channels.
#[derive(Debug, Clone)]
pub struct DownsampleUnit {
    pub(crate) unit: ConvBnRelu,
}

impl DownsampleUnit {
    pub fn new(b: &mut NetBuilder, name: &str, in_channels: usize, out_channels: usize) -> Self {
        DownsampleUnit {
            unit: ConvBnRelu::new(
                b,
                name,
                ConvSpec::same(3, in_channels, out_channels).with_stride(2),
                true,
            ),
        }
    }

    pub fn forward(&self, f: &mut Forward, x: NodeId) -> Result<NodeId> {
        self.unit.forward(f, x)
    }
}

/// Bilinear 2x upsample followed by a 1x1 channel-matching conv + norm + ReLU.
#[derive(Debug, Clone)]
pub struct UpsampleUnit {
    pub(crate) conv: ConvBnRelu,
}

impl UpsampleUnit {
    pub fn new(b: &mut NetBuilder, name: &str, in_channels: usize, out_channels: usize) -> Self {
        UpsampleUnit {
            conv: ConvBnRelu::new(b, name, ConvSpec::pointwise(in_channels, out_channels), true),
        }
    }

    pub fn forward(&self, f: &mut Forward, x: NodeId) -> Result<NodeId> {
        let [_, _, h, w] = f.tape.value(x).shape();
        let up = f.tape.bilinear_resize(x, h * 2, w * 2)?;
        self.conv.forward(f, up)
    }
}

/// ASPP: parallel 1x1, multi-rate dilated 3x3, and global-pool branches,
/// fused by a 1x1 conv back to the input channel count.
#[derive(Debug, Clone)]
pub struct AsppHead {
    pub(crate) entry: ConvBnRelu,
    pub(crate) rate_branches: Vec<ConvBnRelu>,
    pub(crate) pool_branch: ConvBnRelu,
    pub(crate) fuse: ConvBnRelu,
    pub(crate) rates: Vec<usize>,
}

impl AsppHead {
    pub fn new(
        b: &mut NetBuilder,
        name: &str,
        channels: usize,
        rates: &[usize],
        reduction: usize,
    ) -> Result<AsppHead> {
        if rates.is_empty() {
            return Err(Error::InvalidConfig {
                field: format!("{name}.rates"),
                message: "at least one dilation rate required".into(),
            });
        }
        if reduction == 0 || channels / reduction == 0 {
            return Err(Error::InvalidConfig {
                field: format!("{name}.reduction"),
                message: format!("channels {channels} / reduction {reduction} must be >= 1"),
            });
        }
        let mid = channels / reduction;
        let entry = ConvBnRelu::new(
            b,
            &format!("{name}.entry"),
            ConvSpec::pointwise(channels, mid),
            true,
        );
        let rate_branches = rates
            .iter()
            .map(|r| {
                ConvBnRelu::new(
                    b,
                    &format!("{name}.rate{r}"),
                    ConvSpec::same(3, channels, mid)
                        .with_dilation(*r, *r)
                        .with_padding(*r, *r),
                    true,
                )
            })
            .collect();
        let pool_branch = ConvBnRelu::new(
            b,
            &format!("{name}.pool"),
            ConvSpec::pointwise(channels, mid),
            true,
        );
        let fuse = ConvBnRelu::new(
            b,
            &format!("{name}.fuse"),
            ConvSpec::pointwise(mid * (rates.len() + 2), channels),
            true,
        );
        Ok(AsppHead {
            entry,
            rate_branches,
            pool_branch,
            fuse,
            rates: rates.to_vec(),
        })
    }

    pub fn forward(&self, f: &mut Forward, x: NodeId) -> Result<NodeId> {
        let [_, _, h, w] = f.tape.value(x).shape();
        let mut branches = vec![self.entry.forward(f, x)?];
        for branch in &self.rate_branches {
            branches.push(branch.forward(f, x)?);
        }
        let pooled = f.tape.global_avg_pool(x)?;
        let pooled = self.pool_branch.forward(f, pooled)?;
        branches.push(f.tape.bilinear_resize(pooled, h, w)?);
        let cat = f.tape.concat_channels(&branches)?;
        self.fuse.forward(f, cat)
    }
}

/// PSP scale set.
pub const PSP_SCALES: [usize; 4] = [1, 2, 3, 6];

/// PSP: four-scale adaptive average pooling, upsample, concat with the
/// input, and a 1x1 fuse conv back to the input channel count.
#[derive(Debug, Clone)]
pub struct PspHead {
    pub(crate) fuse: ConvBnRelu,
}

impl PspHead {
    pub fn new(b: &mut NetBuilder, name: &str, channels: usize) -> PspHead {
        let fuse = ConvBnRelu::new(
            b,
            &format!("{name}.fuse"),
            ConvSpec::pointwise(channels * (PSP_SCALES.len() + 1), channels),
            true,
        );
        PspHead { fuse }
    }

    pub fn forward(&self, f: &mut Forward, x: NodeId) -> Result<NodeId> {
        let [_, _, h, w] = f.tape.value(x).shape();
        let mut branches = vec![x];
        for s in PSP_SCALES {
            let pooled = f.tape.adaptive_avg_pool(x, s, s)?;
            branches.push(f.tape.bilinear_resize(pooled, h, w)?);
        }
        let cat = f.tape.concat_channels(&branches)?;
        self.fuse.forward(f, cat)
    }
}

/// SE reduction used by the standalone SE head.
pub const HEAD_SE_REDUCTION: usize = 4;

/// The configured segmentation head. Output shape equals input shape for
/// every kind.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)] // heads are built once per model
pub enum Head {
    None,
    Se(SeBlock),
    Psp(PspHead),
    Aspp(AsppHead),
}

impl Head {
    pub fn new(b: &mut NetBuilder, name: &str, channels: usize, kind: &HeadKind) -> Result<Head> {
        Ok(match kind {
            HeadKind::None => Head::None,
            HeadKind::Se => Head::Se(SeBlock::new(b, name, channels, HEAD_SE_REDUCTION)?),
            HeadKind::Psp => Head::Psp(PspHead::new(b, name, channels)),
            HeadKind::Aspp { rates, reduction } => {
                Head::Aspp(AsppHead::new(b, name, channels, rates, *reduction)?)
            }
        })
    }

    pub fn forward(&self, f: &mut Forward, x: NodeId) -> Result<NodeId> {
        match self {
            Head::None => Ok(x),
            Head::Se(se) => se.forward(f, x),
            Head::Psp(psp) => psp.forward(f, x),
            Head::Aspp(aspp) => aspp.forward(f, x),
        }
    }
}

/// 1x1 conv to class logits, then bilinear resize to the target resolution.
/// No norm layer: this is the final classifier.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub(crate) conv: Conv2dLayer,
    pub(crate) num_classes: usize,
}

impl Classifier {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn new(b: &mut NetBuilder, name: &str, in_channels: usize, num_classes: usize) -> Self {
        Classifier {
            conv: Conv2dLayer::new(b, name, ConvSpec::pointwise(in_channels, num_classes)),
            num_classes,
        }
    }

    pub fn forward(&self, f: &mut Forward, x: NodeId, target_hw: (usize, usize)) -> Result<NodeId> {
        let logits = self.conv.forward(f, x)?;
        f.tape.bilinear_resize(logits, target_hw.0, target_hw.1)
    }
}
