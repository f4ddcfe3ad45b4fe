//! Backbone `f_F`, tail `f_R` and head `g` as one layer list with a split
//! point, plus the inference modes built on it.
//!
//! Layers `[0, split_index)` form the enclosed backbone, `[split_index,
//! head_start)` the tail, and `[head_start, len)` the head. In the ensemble
//! modes each transform rotates the input, runs the enclosed backbone and
//! rotates the feature map back before the branches are combined:
//!
//! ```text
//! z_n = T⁻¹(f_F(T(x; ξ_n)); ξ_n),   ẑ = max_n z_n  or  mean_n z_n,   y = g(f_R(ẑ))
//! ```
//!
//! With every spatial layer inside `f_F` and a head that starts with global
//! average pooling, the C4 branch set is closed under input quarter turns, so
//! the logits are invariant to them.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::{self, BranchSet, Combine, ScoreSet};
use crate::geometry::QuarterTurn;
use crate::nn::{ConvParams, LinearParams};
use crate::tensor::{NamedTensor, Shape, Tape, Tensor4, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model graph: {0}")]
    Graph(String),
    #[error("input shape {got:?} does not match the model input {expected:?}")]
    InputShape { expected: [usize; 3], got: Shape },
    #[error("invalid architecture text: {0}")]
    ArchText(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvParams),
    Relu,
    MaxPool2,
    GlobalAvgPool,
    Linear(LinearParams),
}

impl Layer {
    fn is_spatial(&self) -> bool {
        matches!(self, Layer::Conv(_) | Layer::Relu | Layer::MaxPool2)
    }

    fn output_shape(&self, s: Shape) -> std::result::Result<Shape, TensorError> {
        use crate::nn::kernels as k;
        match self {
            Layer::Conv(p) => k::conv2d_shape(s, p.weight.shape(), p.stride, p.padding),
            Layer::Relu => Ok(s),
            Layer::MaxPool2 => k::maxpool2_shape(s),
            Layer::GlobalAvgPool => k::gap_shape(s),
            Layer::Linear(p) => k::linear_shape(s, p.weight.shape()),
        }
    }

    fn describe(&self) -> String {
        match self {
            Layer::Conv(p) => format!(
                "conv {} {} {} {} {}",
                p.in_channels(),
                p.out_channels(),
                p.kernel(),
                p.stride,
                p.padding
            ),
            Layer::Relu => "relu".into(),
            Layer::MaxPool2 => "maxpool2".into(),
            Layer::GlobalAvgPool => "gap".into(),
            Layer::Linear(p) => format!("linear {} {}", p.in_features(), p.out_features()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    Plain,
    TtaMean,
    TtaMax,
    OursMean,
    OursMax,
}

impl ModeKind {
    pub const ALL: [ModeKind; 5] = [
        ModeKind::Plain,
        ModeKind::TtaMean,
        ModeKind::TtaMax,
        ModeKind::OursMean,
        ModeKind::OursMax,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModeKind::Plain => "plain",
            ModeKind::TtaMean => "tta_mean",
            ModeKind::TtaMax => "tta_max",
            ModeKind::OursMean => "ours_mean",
            ModeKind::OursMax => "ours_max",
        }
    }

    pub fn combine(self) -> Option<Combine> {
        match self {
            ModeKind::Plain => None,
            ModeKind::TtaMean | ModeKind::OursMean => Some(Combine::Mean),
            ModeKind::TtaMax | ModeKind::OursMax => Some(Combine::Max),
        }
    }

    pub fn is_feature_ensemble(self) -> bool {
        matches!(self, ModeKind::OursMean | ModeKind::OursMax)
    }

    pub fn is_tta(self) -> bool {
        matches!(self, ModeKind::TtaMean | ModeKind::TtaMax)
    }
}

impl fmt::Display for ModeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModeKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        ModeKind::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode '{s}' (expected one of plain, tta_mean, tta_max, ours_mean, ours_max)"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceMode {
    kind: ModeKind,
    transforms: Vec<QuarterTurn>,
}

impl InferenceMode {
    pub fn new(kind: ModeKind, transforms: Vec<QuarterTurn>) -> Result<Self> {
        if transforms.is_empty() {
            return Err(ModelError::Graph(
                "inference mode needs at least one transform".into(),
            ));
        }
        Ok(Self { kind, transforms })
    }

    /// `kind` over the full C4 set.
    pub fn c4(kind: ModeKind) -> Self {
        Self {
            kind,
            transforms: QuarterTurn::ALL.to_vec(),
        }
    }

    pub fn plain() -> Self {
        Self::c4(ModeKind::Plain)
    }

    pub fn kind(&self) -> ModeKind {
        self.kind
    }

    pub fn transforms(&self) -> &[QuarterTurn] {
        &self.transforms
    }
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind)?;
        if self.kind != ModeKind::Plain && self.transforms != QuarterTurn::ALL {
            let degs: Vec<String> = self.transforms.iter().map(|t| t.to_string()).collect();
            write!(f, "[{}]", degs.join(","))?;
        }
        Ok(())
    }
}

/// Tape handles for each parameterised layer, in layer order.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Option<(Var, Var)>>,
}

impl Binding {
    /// `(weight, bias)` handles in layer order.
    pub fn param_vars(&self) -> impl Iterator<Item = (Var, Var)> + '_ {
        self.vars.iter().flatten().copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    layers: Vec<Layer>,
    split_index: usize,
    head_start: usize,
    input: [usize; 3],
    classes: usize,
    split_shape: [usize; 3],
    warnings: Vec<String>,
}

impl ModelGraph {
    /// Validates the layer list against the declared `(channels, height,
    /// width)` input. `head_start` is the first non-spatial layer.
    pub fn new(layers: Vec<Layer>, split_index: usize, input: [usize; 3]) -> Result<Self> {
        let head_start = layers.iter().position(|l| !l.is_spatial()).ok_or_else(|| {
            ModelError::Graph("no head: the layer list has no GAP or linear layer".into())
        })?;
        if layers[head_start..].iter().any(Layer::is_spatial) {
            return Err(ModelError::Graph(
                "spatial layers may not follow the first head layer".into(),
            ));
        }
        if split_index == 0 || split_index > head_start {
            return Err(ModelError::Graph(format!(
                "split index {split_index} must lie in 1..={head_start}"
            )));
        }

        let mut shape = [1, input[0], input[1], input[2]];
        let mut split_shape = None;
        for (i, layer) in layers.iter().enumerate() {
            if i == split_index {
                split_shape = Some(shape);
            }
            shape = layer
                .output_shape(shape)
                .map_err(|e| ModelError::Graph(format!("layer {i} ({}): {e}", layer.describe())))?;
        }
        let split_shape = split_shape.unwrap_or(shape);
        if split_shape[2] != split_shape[3] {
            return Err(ModelError::Graph(format!(
                "feature map at split {split_index} is {}x{}, must be square",
                split_shape[2], split_shape[3]
            )));
        }
        if shape[2] != 1 || shape[3] != 1 || shape[1] == 0 {
            return Err(ModelError::Graph(format!(
                "head output {shape:?} is not (n, classes)"
            )));
        }

        let mut warnings = Vec::new();
        let gap = layers[head_start..]
            .iter()
            .position(|l| matches!(l, Layer::GlobalAvgPool));
        let linear = layers[head_start..]
            .iter()
            .position(|l| matches!(l, Layer::Linear(_)));
        if gap.is_none() || linear.is_some_and(|lin| gap.is_some_and(|g| lin < g)) {
            warnings.push(
                "head has no global average pool before its linear layers: only the ensembled \
                 feature map is C4-equivariant, logits are not guaranteed invariant"
                    .to_string(),
            );
        }
        if split_index < head_start {
            warnings.push(format!(
                "tail f_R has {} spatial layers: logit invariance holds only if they commute with quarter turns",
                head_start - split_index
            ));
        }

        Ok(Self {
            classes: shape[1],
            layers,
            split_index,
            head_start,
            input,
            split_shape: [split_shape[1], split_shape[2], split_shape[3]],
            warnings,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn split_index(&self) -> usize {
        self.split_index
    }

    pub fn head_start(&self) -> usize {
        self.head_start
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `(channels, height, width)` of the map emitted by `f_F`.
    pub fn split_shape(&self) -> [usize; 3] {
        self.split_shape
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.1.len()).sum()
    }

    /// `(name, tensor)` for every parameter, in layer order.
    pub fn params(&self) -> Vec<(String, &Tensor4)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let (w, b) = match layer {
                Layer::Conv(p) => (&p.weight, &p.bias),
                Layer::Linear(p) => (&p.weight, &p.bias),
                _ => continue,
            };
            out.push((format!("layer{i}.weight"), w));
            out.push((format!("layer{i}.bias"), b));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor4> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(p) => {
                    out.push(&mut p.weight);
                    out.push(&mut p.bias);
                }
                Layer::Linear(p) => {
                    out.push(&mut p.weight);
                    out.push(&mut p.bias);
                }
                _ => {}
            }
        }
        out
    }

    fn check_input(&self, shape: Shape) -> Result<()> {
        let [_, c, h, w] = shape;
        if [c, h, w] != self.input {
            return Err(ModelError::InputShape {
                expected: self.input,
                got: shape,
            });
        }
        Ok(())
    }

    /// Records every parameter on `tape`; `trainable` decides whether they
    /// receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Binding {
        let vars = self
            .layers
            .iter()
            .map(|layer| {
                let (w, b) = match layer {
                    Layer::Conv(p) => (&p.weight, &p.bias),
                    Layer::Linear(p) => (&p.weight, &p.bias),
                    _ => return None,
                };
                let w = tape.leaf(w.clone().with_requires_grad(trainable));
                let b = tape.leaf(b.clone().with_requires_grad(trainable));
                Some((w, b))
            })
            .collect();
        Binding { vars }
    }

    /// Binding over variables already on `tape`, given as weight, bias
    /// pairs in layer order (the order of [`ModelGraph::params`]).
    pub fn bind_vars(&self, tape: &Tape, params: &[Var]) -> Result<Binding> {
        let expected = self.params();
        if params.len() != expected.len() {
            return Err(ModelError::Graph(format!(
                "expected {} parameter variables, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, t), &v) in expected.iter().zip(params) {
            if tape.shape(v)? != t.shape() {
                return Err(ModelError::Graph(format!(
                    "variable for {name} has the wrong shape"
                )));
            }
        }
        let mut next = params.chunks_exact(2);
        let vars = self
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::Conv(_) | Layer::Linear(_) => next.next().map(|p| (p[0], p[1])),
                _ => None,
            })
            .collect();
        Ok(Binding { vars })
    }

    /// Runs layers `range` on `x`.
    pub fn run(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        mut x: Var,
        range: Range<usize>,
    ) -> Result<Var> {
        for i in range {
            x = match &self.layers[i] {
                Layer::Conv(p) => {
                    let (w, b) = binding.vars[i].expect("conv layer is bound");
                    tape.conv2d(x, w, b, p.stride, p.padding)?
                }
                Layer::Relu => tape.relu(x)?,
                Layer::MaxPool2 => tape.maxpool2(x)?,
                Layer::GlobalAvgPool => tape.global_avg_pool(x)?,
                Layer::Linear(_) => {
                    let (w, b) = binding.vars[i].expect("linear layer is bound");
                    tape.linear(x, w, b)?
                }
            };
        }
        Ok(x)
    }

    /// Reverse-aligned branch maps `z_n` on the tape, in transform order.
    pub fn branches_on_tape(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        x: Var,
        transforms: &[QuarterTurn],
    ) -> Result<Vec<Var>> {
        self.check_input(tape.shape(x)?)?;
        if transforms.is_empty() {
            return Err(ModelError::Graph("empty transform list".into()));
        }
        transforms
            .iter()
            .map(|&t| {
                let xt = tape.rot90(x, t)?;
                let z = self.run(tape, binding, xt, 0..self.split_index)?;
                Ok(tape.rot90(z, t.inverse())?)
            })
            .collect()
    }

    /// Ensembled feature map `ẑ` on the tape.
    pub fn ensembled_on_tape(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        x: Var,
        transforms: &[QuarterTurn],
        combine: Combine,
    ) -> Result<Var> {
        let branches = self.branches_on_tape(tape, binding, x, transforms)?;
        Ok(match combine {
            Combine::Max => tape.stack_max(&branches)?,
            Combine::Mean => tape.stack_mean(&branches)?,
        })
    }

    /// The differentiable path a mode trains through: plain logits for the
    /// plain and TTA modes (TTA only acts at test time), the full ensemble
    /// graph for the feature-ensemble modes.
    pub fn training_logits(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        x: Var,
        mode: &InferenceMode,
    ) -> Result<Var> {
        match mode
            .kind()
            .combine()
            .filter(|_| mode.kind().is_feature_ensemble())
        {
            Some(combine) => {
                let z = self.ensembled_on_tape(tape, binding, x, mode.transforms(), combine)?;
                self.run(tape, binding, z, self.split_index..self.layers.len())
            }
            None => {
                self.check_input(tape.shape(x)?)?;
                self.run(tape, binding, x, 0..self.layers.len())
            }
        }
    }

    pub fn forward_plain(&self, x: &Tensor4) -> Result<Tensor4> {
        self.check_input(x.shape())?;
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = self.run(&mut tape, &binding, xv, 0..self.layers.len())?;
        Ok(tape.value(y)?.clone())
    }

    pub fn forward_branches(&self, x: &Tensor4, transforms: &[QuarterTurn]) -> Result<BranchSet> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let vars = self.branches_on_tape(&mut tape, &binding, xv, transforms)?;
        let branches = vars
            .into_iter()
            .map(|v| tape.value(v).cloned())
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(BranchSet::new(branches)?)
    }

    /// `ẑ` for `x`.
    pub fn ensembled_map(
        &self,
        x: &Tensor4,
        transforms: &[QuarterTurn],
        combine: Combine,
    ) -> Result<Tensor4> {
        let branches = self.forward_branches(x, transforms)?;
        Ok(ensemble::feature_combine(&branches, combine))
    }

    /// Logits `g(f_R(ẑ))`.
    pub fn forward_ours(
        &self,
        x: &Tensor4,
        transforms: &[QuarterTurn],
        combine: Combine,
    ) -> Result<Tensor4> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let z = self.ensembled_on_tape(&mut tape, &binding, xv, transforms, combine)?;
        let y = self.run(&mut tape, &binding, z, self.split_index..self.layers.len())?;
        Ok(tape.value(y)?.clone())
    }

    /// Softmax scores of each rotated copy, combined by `combine`.
    pub fn forward_tta(
        &self,
        x: &Tensor4,
        transforms: &[QuarterTurn],
        combine: Combine,
    ) -> Result<Tensor4> {
        if transforms.is_empty() {
            return Err(ModelError::Graph("empty transform list".into()));
        }
        let scores = transforms
            .iter()
            .map(|&t| self.forward_plain(&crate::geometry::rot90(x, t)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(ensemble::score_combine(&ScoreSet::new(scores)?, combine))
    }

    /// Per-class scores used for prediction under `mode`: logits for the
    /// plain and feature-ensemble modes, combined probabilities for TTA.
    pub fn predict_scores(&self, x: &Tensor4, mode: &InferenceMode) -> Result<Tensor4> {
        match (mode.kind(), mode.kind().combine()) {
            (ModeKind::Plain, _) | (_, None) => self.forward_plain(x),
            (k, Some(c)) if k.is_tta() => self.forward_tta(x, mode.transforms(), c),
            (_, Some(c)) => self.forward_ours(x, mode.transforms(), c),
        }
    }

    /// Architecture as text lines: `input`, `split`, then one line per layer.
    pub fn arch_text(&self) -> String {
        let mut s = format!(
            "input {} {} {}\nsplit {}\n",
            self.input[0], self.input[1], self.input[2], self.split_index
        );
        for layer in &self.layers {
            s.push_str(&layer.describe());
            s.push('\n');
        }
        s
    }

    /// Rebuilds a zero-parameter graph from [`ModelGraph::arch_text`].
    pub fn from_arch_text(text: &str) -> Result<Self> {
        let bad = |msg: String| ModelError::ArchText(msg);
        let mut input = None;
        let mut split = None;
        let mut layers = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let mut parts = line.split_whitespace();
            let head = parts.next().unwrap_or_default();
            let nums: Vec<usize> = parts
                .map(|p| {
                    p.parse::<usize>()
                        .map_err(|e| bad(format!("'{line}': {e}")))
                })
                .collect::<Result<_>>()?;
            let want = |n: usize| {
                if nums.len() == n {
                    Ok(())
                } else {
                    Err(bad(format!("'{line}': expected {n} numbers")))
                }
            };
            match head {
                "input" => {
                    want(3)?;
                    input = Some([nums[0], nums[1], nums[2]]);
                }
                "split" => {
                    want(1)?;
                    split = Some(nums[0]);
                }
                "conv" => {
                    want(5)?;
                    let w = Tensor4::zeros([nums[1], nums[0], nums[2], nums[2]])?;
                    let b = Tensor4::zeros([nums[1], 1, 1, 1])?;
                    layers.push(Layer::Conv(ConvParams::new(w, b, nums[3], nums[4])?));
                }
                "relu" => layers.push(Layer::Relu),
                "maxpool2" => layers.push(Layer::MaxPool2),
                "gap" => layers.push(Layer::GlobalAvgPool),
                "linear" => {
                    want(2)?;
                    let w = Tensor4::zeros([nums[1], nums[0], 1, 1])?;
                    let b = Tensor4::zeros([nums[1], 1, 1, 1])?;
                    layers.push(Layer::Linear(LinearParams::new(w, b)?));
                }
                other => return Err(bad(format!("unknown layer '{other}'"))),
            }
        }
        let input = input.ok_or_else(|| bad("missing 'input' line".into()))?;
        let split = split.ok_or_else(|| bad("missing 'split' line".into()))?;
        Self::new(layers, split, input)
    }

    /// Checkpoint entries: the architecture as a zero-element entry named
    /// `#arch\n<text>`, then every parameter.
    pub fn to_checkpoint(&self) -> Vec<NamedTensor> {
        let mut entries = vec![NamedTensor {
            name: format!("{ARCH_ENTRY}\n{}", self.arch_text()),
            tensor: Tensor4::zeros([0, 0, 0, 0]).expect("empty tensor"),
        }];
        entries.extend(self.params().into_iter().map(|(name, t)| NamedTensor {
            name,
            tensor: t.clone().with_requires_grad(false),
        }));
        entries
    }

    pub fn from_checkpoint(entries: &[NamedTensor]) -> Result<Self> {
        let arch = entries
            .first()
            .and_then(|e| e.name.strip_prefix(ARCH_ENTRY))
            .ok_or_else(|| ModelError::ArchText("checkpoint has no architecture entry".into()))?;
        let mut model = Self::from_arch_text(arch)?;
        let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
        let params = model.params_mut();
        if entries.len() - 1 != params.len() {
            return Err(ModelError::ArchText(format!(
                "checkpoint has {} parameters, architecture needs {}",
                entries.len() - 1,
                params.len()
            )));
        }
        for ((slot, name), entry) in params.into_iter().zip(names).zip(&entries[1..]) {
            if entry.name != name || entry.tensor.shape() != slot.shape() {
                return Err(ModelError::ArchText(format!(
                    "parameter '{}' {:?} does not match expected '{name}' {:?}",
                    entry.name,
                    entry.tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = entry.tensor.clone();
        }
        Ok(model)
    }
}

const ARCH_ENTRY: &str = "#arch";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    SmallCnn,
}

impl FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "small_cnn" => Ok(Arch::SmallCnn),
            other => Err(format!("unknown architecture '{other}'")),
        }
    }
}

pub const DEFAULT_WIDTHS: [usize; 4] = [8, 16, 16, 32];

/// Xavier-uniform: `U(−a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
fn xavier_uniform(shape: Shape, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor4 {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor4::from_vec(shape, data).expect("shape matches")
}

/// Four 3×3 conv+ReLU blocks with 2×2 max pooling after the first two, all
/// inside `f_F`; `f_R` is empty and `g` is GAP followed by one linear layer.
///
/// | idx | layer     | output (side s input) |
/// |-----|-----------|-----------------------|
/// | 0-2 | conv/relu/pool | w0 × s/2        |
/// | 3-5 | conv/relu/pool | w1 × s/4        |
/// | 6-7 | conv/relu | w2 × s/4              |
/// | 8-9 | conv/relu | w3 × s/4  (split)     |
/// | 10  | gap       | w3                    |
/// | 11  | linear    | classes               |
pub fn build_small_cnn(
    classes: usize,
    input: [usize; 3],
    widths: [usize; 4],
    seed: u64,
) -> Result<ModelGraph> {
    let [channels, h, w] = input;
    if h != w || h == 0 || h % 4 != 0 {
        return Err(ModelError::Graph(format!(
            "small_cnn needs a square input with side divisible by 4, got {h}x{w}"
        )));
    }
    if classes == 0 || channels == 0 || widths.contains(&0) {
        return Err(ModelError::Graph(
            "classes, channels and widths must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv = |cin: usize, cout: usize, rng: &mut ChaCha8Rng| -> Result<Layer> {
        let weight = xavier_uniform([cout, cin, 3, 3], cin * 9, cout * 9, rng);
        let bias = Tensor4::zeros([cout, 1, 1, 1])?;
        Ok(Layer::Conv(ConvParams::new(weight, bias, 1, 1)?))
    };
    let layers = vec![
        conv(channels, widths[0], &mut rng)?,
        Layer::Relu,
        Layer::MaxPool2,
        conv(widths[0], widths[1], &mut rng)?,
        Layer::Relu,
        Layer::MaxPool2,
        conv(widths[1], widths[2], &mut rng)?,
        Layer::Relu,
        conv(widths[2], widths[3], &mut rng)?,
        Layer::Relu,
        Layer::GlobalAvgPool,
        Layer::Linear(LinearParams::new(
            xavier_uniform([classes, widths[3], 1, 1], widths[3], classes, &mut rng),
            Tensor4::zeros([classes, 1, 1, 1])?,
        )?),
    ];
    ModelGraph::new(layers, 10, input)
}

pub fn build_default(
    arch: Arch,
    classes: usize,
    input: [usize; 3],
    seed: u64,
) -> Result<ModelGraph> {
    match arch {
        Arch::SmallCnn => build_small_cnn(classes, input, DEFAULT_WIDTHS, seed),
    }
}

/// Index of the largest score per row; ties go to the lowest class index.
pub fn argmax_rows(scores: &Tensor4) -> Vec<usize> {
    let [n, classes, h, w] = scores.shape();
    let cols = classes * h * w;
    (0..n)
        .map(|i| {
            let row = &scores.data()[i * cols..(i + 1) * cols];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Predictions for a whole image tensor, processed `chunk` items at a time.
pub fn predict(
    model: &ModelGraph,
    images: &Tensor4,
    mode: &InferenceMode,
    chunk: usize,
) -> Result<Vec<usize>> {
    let n = images.shape()[0];
    let mut out = Vec::with_capacity(n);
    let chunk = chunk.max(1);
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let scores = model.predict_scores(&images.slice_batch(start, end)?, mode)?;
        out.extend(argmax_rows(&scores));
        start = end;
    }
    Ok(out)
}
