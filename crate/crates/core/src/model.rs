//! Hourglass backbones and the four prediction heads.
//!
//! Blocks carry no normalization layers. Every residual branch ends in a
//! zero-initialized convolution, so a freshly built network computes an
//! identity-like trunk and training starts from a well-scaled state.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoding::PredictionMaps;
use crate::error::{Error, Result};
use crate::geometry::Size;
use crate::tensor::{
    load_parameters, save_parameters, ConvGeometry, ParamId, Parameters, PoolGeometry, Tape, Tensor, Var,
};

/// Foreground prior of the center classifier at initialization.
const CENTER_PRIOR: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Standard,
    LineBlock,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "HG1-D2")]
    Hg1D2,
    #[serde(rename = "HG1-D3")]
    Hg1D3,
    #[serde(rename = "HG1")]
    Hg1,
    #[serde(rename = "HG2")]
    Hg2,
    #[serde(rename = "HG2-LB")]
    Hg2Lb,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::Hg1D2, Preset::Hg1D3, Preset::Hg1, Preset::Hg2, Preset::Hg2Lb];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Hg1D2 => "HG1-D2",
            Preset::Hg1D3 => "HG1-D3",
            Preset::Hg1 => "HG1",
            Preset::Hg2 => "HG2",
            Preset::Hg2Lb => "HG2-LB",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stacks: usize,
    pub hourglass_depth: usize,
    pub base_channels: usize,
    pub block_kind: BlockKind,
    /// Width of the two 3×3 convolutions in every head branch.
    pub head_channels: usize,
    pub input_channels: usize,
    /// Image pixels per map cell; 1, 2 or 4.
    pub stride: usize,
}

impl BackboneConfig {
    pub fn preset(preset: Preset) -> Self {
        let (stacks, hourglass_depth, block_kind) = match preset {
            Preset::Hg1D2 => (1, 2, BlockKind::Standard),
            Preset::Hg1D3 => (1, 3, BlockKind::Standard),
            Preset::Hg1 => (1, 4, BlockKind::Standard),
            Preset::Hg2 => (2, 4, BlockKind::Standard),
            Preset::Hg2Lb => (2, 4, BlockKind::LineBlock),
        };
        Self {
            stacks,
            hourglass_depth,
            base_channels: 64,
            block_kind,
            head_channels: 128,
            input_channels: 1,
            stride: 1,
        }
    }

    /// Scales both the trunk and head widths.
    pub fn with_width_multiplier(mut self, m: f64) -> Self {
        let scale = |c: usize| ((c as f64 * m).round() as usize).max(1);
        self.base_channels = scale(self.base_channels);
        self.head_channels = scale(self.head_channels);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.hourglass_depth) {
            return Err(Error::UnsupportedDepth(self.hourglass_depth));
        }
        if !(1..=2).contains(&self.stacks) {
            return Err(Error::Config(format!("{} stacks; expected 1 or 2", self.stacks)));
        }
        if self.base_channels == 0 || self.head_channels == 0 || self.input_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if ![1, 2, 4].contains(&self.stride) {
            return Err(Error::Config(format!("map stride {} not in {{1, 2, 4}}", self.stride)));
        }
        Ok(())
    }

    pub fn map_size(&self, image: Size) -> Size {
        Size::new(image.height / self.stride, image.width / self.stride)
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    He,
    /// He scaled by the given factor.
    HeScaled(f64),
    Zero,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    geom: ConvGeometry,
}

impl Conv {
    fn forward(&self, tape: &mut Tape, params: &Parameters, x: Var) -> Result<Var> {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        tape.conv2d(x, w, Some(b), self.geom)
    }
}

struct Builder<'a> {
    params: &'a mut Parameters,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: (usize, usize), stride: usize, init: Init) -> Conv {
        let fan_in = cin * k.0 * k.1;
        let std = (2.0 / fan_in as f64).sqrt();
        let std = match init {
            Init::He => std,
            Init::HeScaled(f) => std * f,
            Init::Zero => 0.0,
        };
        let n = cout * fan_in;
        let data: Vec<f64> = if std > 0.0 {
            let normal = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| normal.sample(&mut self.rng)).collect()
        } else {
            vec![0.0; n]
        };
        let weight = self.params.insert(format!("{name}.weight"), Tensor::from_parts(vec![cout, cin, k.0, k.1], data));
        let bias = self.params.insert(format!("{name}.bias"), Tensor::zeros(vec![cout]));
        let geom = ConvGeometry { stride: (stride, stride), padding: (k.0 / 2, k.1 / 2) };
        Conv { weight, bias, geom }
    }

    fn block(&mut self, name: &str, kind: BlockKind, c: usize) -> Block {
        match kind {
            BlockKind::Standard => Block::Residual {
                conv1: self.conv(&format!("{name}.conv1"), c, c, (3, 3), 1, Init::He),
                conv2: self.conv(&format!("{name}.conv2"), c, c, (3, 3), 1, Init::Zero),
            },
            BlockKind::LineBlock => {
                let b = line_branch_width(c);
                Block::Line {
                    horizontal: self.conv(&format!("{name}.h"), c, b, (1, 5), 1, Init::He),
                    vertical: self.conv(&format!("{name}.v"), c, b, (5, 1), 1, Init::He),
                    square: self.conv(&format!("{name}.sq"), c, b, (3, 3), 1, Init::He),
                    fuse: self.conv(&format!("{name}.fuse"), 3 * b, c, (1, 1), 1, Init::Zero),
                }
            }
        }
    }

    fn hourglass(&mut self, name: &str, depth: usize, kind: BlockKind, c: usize) -> Hourglass {
        let up1 = self.block(&format!("{name}.up1"), kind, c);
        let low1 = self.block(&format!("{name}.low1"), kind, c);
        let inner = if depth > 1 {
            Inner::Nested(Box::new(self.hourglass(&format!("{name}.inner"), depth - 1, kind, c)))
        } else {
            Inner::Leaf(self.block(&format!("{name}.low2"), kind, c))
        };
        let low3 = self.block(&format!("{name}.low3"), kind, c);
        Hourglass { up1, low1, inner, low3 }
    }

    fn head(&mut self, name: &str, c: usize, mid: usize, out: usize) -> Head {
        Head {
            conv1: self.conv(&format!("{name}.conv1"), c, mid, (3, 3), 1, Init::He),
            conv2: self.conv(&format!("{name}.conv2"), mid, mid, (3, 3), 1, Init::He),
            out: self.conv(&format!("{name}.out"), mid, out, (1, 1), 1, Init::HeScaled(0.1)),
        }
    }
}

/// Per-branch width of a line block that matches the multiply-adds of a
/// standard block: 22·c·b ≈ 18·c².
pub fn line_branch_width(c: usize) -> usize {
    ((9 * c) as f64 / 11.0).round().max(1.0) as usize
}

#[derive(Clone, Copy, Debug)]
enum Block {
    Residual { conv1: Conv, conv2: Conv },
    Line { horizontal: Conv, vertical: Conv, square: Conv, fuse: Conv },
}

impl Block {
    fn forward(&self, tape: &mut Tape, params: &Parameters, x: Var) -> Result<Var> {
        let branch = match self {
            Block::Residual { conv1, conv2 } => {
                let h = conv1.forward(tape, params, x)?;
                let h = tape.relu(h);
                conv2.forward(tape, params, h)?
            }
            Block::Line { horizontal, vertical, square, fuse } => {
                let h = horizontal.forward(tape, params, x)?;
                let v = vertical.forward(tape, params, x)?;
                let s = square.forward(tape, params, x)?;
                let cat = tape.concat_channels(&[h, v, s])?;
                let cat = tape.relu(cat);
                fuse.forward(tape, params, cat)?
            }
        };
        tape.add(x, branch)
    }

    fn convs(&self) -> Vec<Conv> {
        match *self {
            Block::Residual { conv1, conv2 } => vec![conv1, conv2],
            Block::Line { horizontal, vertical, square, fuse } => vec![horizontal, vertical, square, fuse],
        }
    }

    /// Multiply-adds per output pixel, counted from the weight shapes.
    fn macs_per_pixel(&self, params: &Parameters) -> usize {
        self.convs().iter().map(|c| params.get(c.weight).numel()).sum()
    }
}

enum Inner {
    Nested(Box<Hourglass>),
    Leaf(Block),
}

struct Hourglass {
    up1: Block,
    low1: Block,
    inner: Inner,
    low3: Block,
}

impl Hourglass {
    fn forward(&self, tape: &mut Tape, params: &Parameters, x: Var) -> Result<Var> {
        let up1 = self.up1.forward(tape, params, x)?;
        let low = tape.max_pool2d(x, PoolGeometry::DOWN2)?;
        let low = self.low1.forward(tape, params, low)?;
        let low = match &self.inner {
            Inner::Nested(h) => h.forward(tape, params, low)?,
            Inner::Leaf(b) => b.forward(tape, params, low)?,
        };
        let low = self.low3.forward(tape, params, low)?;
        let up2 = tape.upsample2x(low)?;
        tape.add(up1, up2)
    }
}

struct Stack {
    hourglass: Hourglass,
    post: Block,
    /// Maps the stack output back onto the trunk before the next stack.
    merge: Option<Conv>,
}

struct Head {
    conv1: Conv,
    conv2: Conv,
    out: Conv,
}

impl Head {
    fn forward(&self, tape: &mut Tape, params: &Parameters, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, params, x)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, params, h)?;
        let h = tape.relu(h);
        self.out.forward(tape, params, h)
    }
}

/// Head outputs for a batch. Center holds raw 2-channel logits (channel 1 is
/// foreground); the three regression maps are already passed through a sigmoid.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    pub center: Var,
    pub offset: Var,
    pub length: Var,
    pub angle: Var,
}

impl HeadOutputs {
    /// Activated maps of batch element `i`.
    pub fn prediction_maps(&self, tape: &Tape, i: usize) -> PredictionMaps {
        let shape = tape.shape(self.center);
        let map_size = Size::new(shape[2], shape[3]);
        let n = map_size.area();
        let logits = &tape.value(self.center).data()[i * 2 * n..(i + 1) * 2 * n];
        let center = (0..n).map(|k| crate::tensor::sigmoid(logits[n + k] - logits[k])).collect();
        let pick = |v: Var, ch: usize| tape.value(v).data()[i * ch * n..(i + 1) * ch * n].to_vec();
        PredictionMaps {
            map_size,
            center,
            offset: pick(self.offset, 2),
            length: pick(self.length, 1),
            angle: pick(self.angle, 1),
        }
    }
}

pub struct Model {
    config: BackboneConfig,
    params: Parameters,
    stem: Vec<Conv>,
    stem_block: Block,
    stacks: Vec<Stack>,
    center: Head,
    offset: Head,
    length: Head,
    angle: Head,
}

impl Model {
    pub fn build(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Parameters::new();
        let mut b = Builder { params: &mut params, rng: ChaCha8Rng::seed_from_u64(seed) };
        let c = config.base_channels;
        let mut stem = vec![b.conv("stem.conv0", config.input_channels, c, (3, 3), 1, Init::He)];
        let mut s = config.stride;
        while s > 1 {
            stem.push(b.conv(&format!("stem.down{}", stem.len()), c, c, (3, 3), 2, Init::He));
            s /= 2;
        }
        let stem_block = b.block("stem.block", config.block_kind, c);
        let mut stacks = Vec::with_capacity(config.stacks);
        for i in 0..config.stacks {
            let hourglass = b.hourglass(&format!("hg{i}"), config.hourglass_depth, config.block_kind, c);
            let post = b.block(&format!("hg{i}.post"), config.block_kind, c);
            let merge = (i + 1 < config.stacks).then(|| b.conv(&format!("hg{i}.merge"), c, c, (1, 1), 1, Init::Zero));
            stacks.push(Stack { hourglass, post, merge });
        }
        let m = config.head_channels;
        let center = b.head("head.center", c, m, 2);
        let offset = b.head("head.offset", c, m, 2);
        let length = b.head("head.length", c, m, 1);
        let angle = b.head("head.angle", c, m, 1);
        let prior = (CENTER_PRIOR / (1.0 - CENTER_PRIOR)).ln();
        params.get_mut(center.out.bias).data_mut()[1] = prior;
        Ok(Self { config, params, stem, stem_block, stacks, center, offset, length, angle })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    /// Names of the head's final 1×1 convolution parameters.
    pub fn head_output_params(&self) -> Vec<ParamId> {
        [&self.center, &self.offset, &self.length, &self.angle]
            .iter()
            .flat_map(|h| [h.out.weight, h.out.bias])
            .collect()
    }

    /// Shared feature map of the final stack.
    pub fn features(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let shape = tape.shape(input).to_vec();
        if shape.len() != 4 || shape[1] != self.config.input_channels {
            return Err(Error::shape(
                "model",
                format!("input {shape:?}, expected N×{}×H×W", self.config.input_channels),
            ));
        }
        let unit = self.config.stride << self.config.hourglass_depth;
        if !shape[2].is_multiple_of(unit) || !shape[3].is_multiple_of(unit) || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::Config(format!(
                "input {}x{} must be a positive multiple of {unit} for this backbone",
                shape[2], shape[3]
            )));
        }
        let mut x = input;
        for conv in &self.stem {
            x = conv.forward(tape, &self.params, x)?;
            x = tape.relu(x);
        }
        x = self.stem_block.forward(tape, &self.params, x)?;
        for stack in &self.stacks {
            let h = stack.hourglass.forward(tape, &self.params, x)?;
            let f = stack.post.forward(tape, &self.params, h)?;
            match stack.merge {
                Some(merge) => {
                    let m = merge.forward(tape, &self.params, f)?;
                    x = tape.add(x, m)?;
                }
                None => x = f,
            }
        }
        Ok(x)
    }

    pub fn heads(&self, tape: &mut Tape, features: Var) -> Result<HeadOutputs> {
        let center = self.center.forward(tape, &self.params, features)?;
        let offset = self.offset.forward(tape, &self.params, features)?;
        let length = self.length.forward(tape, &self.params, features)?;
        let angle = self.angle.forward(tape, &self.params, features)?;
        Ok(HeadOutputs {
            center,
            offset: tape.sigmoid(offset),
            length: tape.sigmoid(length),
            angle: tape.sigmoid(angle),
        })
    }

    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<HeadOutputs> {
        let f = self.features(tape, input)?;
        self.heads(tape, f)
    }

    /// Inference on an N×C×H×W batch.
    pub fn predict(&self, input: &Tensor) -> Result<Vec<PredictionMaps>> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let out = self.forward(&mut tape, x)?;
        Ok((0..input.shape()[0]).map(|i| out.prediction_maps(&tape, i)).collect())
    }

    /// Multiply-adds per map pixel of one trunk block.
    pub fn block_macs_per_pixel(&self) -> usize {
        self.stem_block.macs_per_pixel(&self.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_parameters(path, &self.params)?;
        let cfg = config_path(path);
        std::fs::write(&cfg, serde_json::to_string_pretty(&self.config)?).map_err(|e| Error::io(&cfg, e))
    }

    /// Loads a checkpoint and the model config stored next to it.
    pub fn load(path: &Path) -> Result<Self> {
        let cfg_path = config_path(path);
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config: BackboneConfig = serde_json::from_str(&text)?;
        let mut model = Model::build(config, 0)?;
        model.params.load_from(&load_parameters(path)?)?;
        Ok(model)
    }
}

/// Path of the JSON model config stored alongside a checkpoint.
pub fn config_path(checkpoint: &Path) -> std::path::PathBuf {
    checkpoint.with_extension("json")
}

/// Analytic multiply-adds per pixel of a block kind at width `c`.
pub fn analytic_block_macs(kind: BlockKind, c: usize) -> usize {
    match kind {
        BlockKind::Standard => 18 * c * c,
        BlockKind::LineBlock => 22 * c * line_branch_width(c),
    }
}
