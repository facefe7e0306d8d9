//! The U-shaped segmentation network.
//!
//! Encoder stage `k` (1..=4) runs two 3×3 conv + batch-norm layers (the
//! first one changes the width to `C₀·2^(k-1)`), a ReLU whose output is the
//! skip tap, a 2×2 max pool and `num_sta_layers` attention blocks. The
//! bottleneck is two channel-preserving conv + batch-norm layers and a ReLU.
//! Decoder stage `k` doubles the resolution with a stride-2 transposed
//! convolution, concatenates the stage-`k` skip, fuses back to the stage
//! width with conv + batch-norm + ReLU and runs the mirrored attention
//! blocks. A 1×1 convolution and a channel softmax produce class
//! probabilities.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{max_pool2x2, BatchNorm2d, Bindings, Conv2d, ConvOptions, ConvTranspose2d, Ctx, ParamStore};
use crate::sta::{StaBlock, StaConfig};
use crate::tensor::{Scalar, Tensor};

pub const NUM_STAGES: usize = 4;

/// Default attention layers, token cell sizes and heads per stage.
pub const DEFAULT_LAYERS: [usize; NUM_STAGES] = [1, 2, 3, 4];
pub const DEFAULT_TOKEN_SIZES: [usize; NUM_STAGES] = [16, 8, 4, 2];
pub const DEFAULT_HEADS: [usize; NUM_STAGES] = [2, 4, 8, 16];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// 1-based stage number.
    pub stage_index: usize,
    pub num_sta_layers: usize,
    /// Super-token cell size in pixels (rows, cols).
    pub token_size: (usize, usize),
    pub heads: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    pub stages: Vec<StageConfig>,
    /// Input extent (H, W).
    pub input_extent: (usize, usize),
}

impl ModelConfig {
    /// Default stage schedule with the given base width.
    pub fn standard(input_channels: usize, num_classes: usize, base_channels: usize, input_extent: (usize, usize)) -> Self {
        Self::with_schedule(
            input_channels,
            num_classes,
            base_channels,
            input_extent,
            DEFAULT_LAYERS,
            DEFAULT_TOKEN_SIZES,
            DEFAULT_HEADS,
        )
    }

    pub fn with_schedule(
        input_channels: usize,
        num_classes: usize,
        base_channels: usize,
        input_extent: (usize, usize),
        layers: [usize; NUM_STAGES],
        token_sizes: [usize; NUM_STAGES],
        heads: [usize; NUM_STAGES],
    ) -> Self {
        let stages = (0..NUM_STAGES)
            .map(|i| StageConfig {
                stage_index: i + 1,
                num_sta_layers: layers[i],
                token_size: (token_sizes[i], token_sizes[i]),
                heads: heads[i],
                channels: base_channels << i,
            })
            .collect();
        Self {
            input_channels,
            num_classes,
            base_channels,
            stages,
            input_extent,
        }
    }

    /// Replace the per-stage token sizes.
    pub fn with_token_sizes(mut self, sizes: [usize; NUM_STAGES]) -> Self {
        for (s, t) in self.stages.iter_mut().zip(sizes) {
            s.token_size = (t, t);
        }
        self
    }

    pub fn channels(&self, stage: usize) -> usize {
        self.base_channels << (stage - 1)
    }

    /// Spatial extent seen by the attention blocks of encoder stage `k`
    /// (decoder stage `k` runs at twice this).
    pub fn stage_extent(&self, stage: usize) -> (usize, usize) {
        (self.input_extent.0 >> stage, self.input_extent.1 >> stage)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.input_channels == 0 || self.num_classes < 2 || self.base_channels == 0 {
            return bad("input_channels, base_channels must be >= 1 and num_classes >= 2".into());
        }
        if self.stages.len() != NUM_STAGES {
            return bad(format!("expected {NUM_STAGES} stages, got {}", self.stages.len()));
        }
        let (h, w) = self.input_extent;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Geometry(format!("input extent {h}x{w} must be a positive multiple of 32")));
        }
        for (i, s) in self.stages.iter().enumerate() {
            let k = i + 1;
            if s.stage_index != k {
                return bad(format!("stage {k} has stage_index {}", s.stage_index));
            }
            if s.channels != self.channels(k) {
                return bad(format!(
                    "stage {k} has {} channels, expected base_channels * 2^{} = {}",
                    s.channels,
                    k - 1,
                    self.channels(k)
                ));
            }
            StaConfig::new(s.channels, s.token_size, s.heads)
                .validate()
                .map_err(|e| e.in_stage(format!("encoder{k}")))?;
            let (sh, sw) = self.stage_extent(k);
            if sh % s.token_size.0 != 0 || sw % s.token_size.1 != 0 {
                return Err(Error::Geometry(format!(
                    "stage {k} extent {sh}x{sw} is not divisible by token size {}x{}",
                    s.token_size.0, s.token_size.1
                )));
            }
        }
        Ok(())
    }

    /// Trainable scalar count.
    ///
    /// Per encoder stage: `9·Cin·C + C` and `9·C² + C` for the convolutions,
    /// `4C` for two batch norms. Bottleneck: `2·(9·C₄² + C₄ + 2C₄)`. Per
    /// decoder stage: `4·Cup·C + C` transposed conv, `18·C² + C` fuse conv,
    /// `2C` norm. Every attention block adds `11C + 3C²`. The head adds
    /// `C₀·K + K`.
    pub fn parameter_count(&self) -> usize {
        let sta = |c: usize| StaBlock::parameter_count(c);
        let mut total = 0;
        let mut cin = self.input_channels;
        for s in &self.stages {
            let c = s.channels;
            total += 9 * cin * c + c + 9 * c * c + c + 4 * c + s.num_sta_layers * sta(c);
            cin = c;
        }
        let c4 = self.channels(NUM_STAGES);
        total += 2 * (9 * c4 * c4 + c4 + 2 * c4);
        let mut cup = c4;
        for s in self.stages.iter().rev() {
            let c = s.channels;
            total += 4 * cup * c + c + 18 * c * c + c + 2 * c + s.num_sta_layers * sta(c);
            cup = c;
        }
        total + self.base_channels * self.num_classes + self.num_classes
    }
}

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, 3, ConvOptions::same3x3(), true, rng),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout),
        }
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        self.bn.forward(ctx, y)
    }
}

#[derive(Clone, Debug)]
struct EncoderStage {
    conv1: ConvBn,
    conv2: ConvBn,
    blocks: Vec<StaBlock>,
}

#[derive(Clone, Debug)]
struct Bottleneck {
    conv1: ConvBn,
    conv2: ConvBn,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    up: ConvTranspose2d,
    fuse: ConvBn,
    blocks: Vec<StaBlock>,
}

/// Shape record of one attention block in a forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockTrace {
    pub name: String,
    /// Input/output shape `[N, C, H, W]`.
    pub shape: Vec<usize>,
    pub token_size: (usize, usize),
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub logits: Var,
    /// Per-pixel class probabilities `[N, K, H, W]`.
    pub probs: Var,
    /// Encoder skip taps, stage 1 first.
    pub skips: Vec<Var>,
    /// Attention block outputs in execution order.
    pub blocks: Vec<(String, Var)>,
    pub trace: Vec<BlockTrace>,
}

fn run_blocks<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    blocks: &[StaBlock],
    prefix: &str,
    mut x: Var,
    out: &mut ModelOutput,
) -> Result<Var> {
    for (i, block) in blocks.iter().enumerate() {
        let name = format!("{prefix}.sta{i}");
        x = block.forward(ctx, x).map_err(|e| e.in_stage(name.clone()))?;
        out.trace.push(BlockTrace {
            name: name.clone(),
            shape: ctx.graph.shape(x).to_vec(),
            token_size: block.cfg.token_size,
            heads: block.cfg.heads,
        });
        out.blocks.push((name, x));
    }
    Ok(x)
}

/// Parameters plus the layer layout that reads them.
#[derive(Clone, Debug)]
pub struct StaUnet<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    encoders: Vec<EncoderStage>,
    bottleneck: Bottleneck,
    decoders: Vec<DecoderStage>,
    head: Conv2d,
}

impl<T: Scalar> StaUnet<T> {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let sta_blocks = |store: &mut ParamStore<T>, prefix: &str, s: &StageConfig, rng: &mut _| {
            (0..s.num_sta_layers)
                .map(|i| {
                    StaBlock::new(
                        store,
                        &format!("{prefix}.sta{i}"),
                        StaConfig::new(s.channels, s.token_size, s.heads),
                        rng,
                    )
                })
                .collect::<Result<Vec<_>>>()
        };
        let mut encoders = Vec::new();
        let mut cin = config.input_channels;
        for s in &config.stages {
            let name = format!("encoder{}", s.stage_index);
            let conv1 = ConvBn::new(&mut store, &format!("{name}.conv1"), cin, s.channels, rng);
            let conv2 = ConvBn::new(&mut store, &format!("{name}.conv2"), s.channels, s.channels, rng);
            let blocks = sta_blocks(&mut store, &name, s, rng)?;
            encoders.push(EncoderStage { conv1, conv2, blocks });
            cin = s.channels;
        }
        let bottleneck = Bottleneck {
            conv1: ConvBn::new(&mut store, "bottleneck.conv1", cin, cin, rng),
            conv2: ConvBn::new(&mut store, "bottleneck.conv2", cin, cin, rng),
        };
        let mut decoders = Vec::new();
        for s in config.stages.iter().rev() {
            let name = format!("decoder{}", s.stage_index);
            let c = s.channels;
            let up = ConvTranspose2d::new(&mut store, &format!("{name}.up"), cin, c, 2, 2, 0, rng);
            let fuse = ConvBn::new(&mut store, &format!("{name}.fuse"), 2 * c, c, rng);
            let blocks = sta_blocks(&mut store, &name, s, rng)?;
            decoders.push(DecoderStage { up, fuse, blocks });
            cin = c;
        }
        let head = Conv2d::new(
            &mut store,
            "head",
            config.base_channels,
            config.num_classes,
            1,
            ConvOptions::default(),
            true,
            rng,
        );
        Ok(Self {
            config,
            params: store,
            encoders,
            bottleneck,
            decoders,
            head,
        })
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> StaUnet<U> {
        StaUnet {
            config: self.config.clone(),
            params: self.params.cast(),
            encoders: self.encoders.clone(),
            bottleneck: self.bottleneck.clone(),
            decoders: self.decoders.clone(),
            head: self.head.clone(),
        }
    }

    /// Forward pass. `training` selects batch statistics (and updates the
    /// running estimates); `requires_grad` binds parameters as trainable
    /// leaves so a later backward pass yields their gradients.
    pub fn forward(
        &mut self,
        graph: &mut Graph<T>,
        x: Var,
        training: bool,
        requires_grad: bool,
    ) -> Result<(ModelOutput, Bindings)> {
        let shape = graph.shape(x).to_vec();
        let (h, w) = self.config.input_extent;
        if shape.len() != 4 || shape[1] != self.config.input_channels || shape[2] != h || shape[3] != w {
            return Err(Error::invalid(
                "forward",
                format!(
                    "expected input [N, {}, {h}, {w}], got {shape:?}",
                    self.config.input_channels
                ),
            ));
        }
        let mut ctx = Ctx::new(graph, &mut self.params, training, requires_grad);
        let mut out = ModelOutput {
            logits: x,
            probs: x,
            skips: Vec::new(),
            blocks: Vec::new(),
            trace: Vec::new(),
        };
        let mut x = x;
        for (i, stage) in self.encoders.iter().enumerate() {
            let name = format!("encoder{}", i + 1);
            let wrap = |e: Error| e.in_stage(name.clone());
            let y = stage.conv1.forward(&mut ctx, x).map_err(wrap)?;
            let y = stage.conv2.forward(&mut ctx, y).map_err(wrap)?;
            let skip = ctx.graph.relu(y);
            out.skips.push(skip);
            let pooled = max_pool2x2(ctx.graph, skip).map_err(wrap)?;
            x = run_blocks(&mut ctx, &stage.blocks, &name, pooled, &mut out)?;
        }
        let wrap = |e: Error| e.in_stage("bottleneck");
        let y = self.bottleneck.conv1.forward(&mut ctx, x).map_err(wrap)?;
        let y = self.bottleneck.conv2.forward(&mut ctx, y).map_err(wrap)?;
        x = ctx.graph.relu(y);
        let skips = out.skips.clone();
        for (i, (stage, &skip)) in self.decoders.iter().zip(skips.iter().rev()).enumerate() {
            let name = format!("decoder{}", NUM_STAGES - i);
            let wrap = |e: Error| e.in_stage(name.clone());
            let up = stage.up.forward(&mut ctx, x).map_err(wrap)?;
            if ctx.graph.shape(up)[2..] != ctx.graph.shape(skip)[2..] {
                return Err(Error::shape("decoder concat", ctx.graph.shape(up), ctx.graph.shape(skip)).in_stage(name));
            }
            let cat = ctx.graph.concat(&[up, skip], 1).map_err(wrap)?;
            let y = stage.fuse.forward(&mut ctx, cat).map_err(wrap)?;
            let y = ctx.graph.relu(y);
            x = run_blocks(&mut ctx, &stage.blocks, &name, y, &mut out)?;
        }
        let logits = self.head.forward(&mut ctx, x).map_err(|e| e.in_stage("head"))?;
        out.logits = logits;
        out.probs = ctx.graph.softmax(logits, 1)?;
        Ok((out, ctx.into_bindings()))
    }

    /// Attention block names in execution order.
    pub fn block_names(&self) -> Vec<String> {
        let enc = self.encoders.iter().enumerate().flat_map(|(i, st)| {
            (0..st.blocks.len()).map(move |j| format!("encoder{}.sta{j}", i + 1))
        });
        let dec = self.decoders.iter().enumerate().flat_map(|(i, st)| {
            (0..st.blocks.len()).map(move |j| format!("decoder{}.sta{j}", NUM_STAGES - i))
        });
        enc.chain(dec).collect()
    }

    /// Inference-mode class probabilities for a batch.
    pub fn predict(&mut self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let (out, _) = self.forward(&mut g, x, false, false)?;
        Ok(g.value(out.probs).clone())
    }
}
