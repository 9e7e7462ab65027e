//! Two-branch detection network: per-cue temporal backbones, feature-wise
//! attention fusion and a fully connected classifier head.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, StatUpdate, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv1d, Linear, Mode, Padding, PoolKind};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Visual cue families. Declaration order is lexicographic by name, which
/// is the canonical branch order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cue {
    Aus,
    Gaze,
    Landmarks2d,
    Pose,
}

impl Cue {
    pub const ALL: [Cue; 4] = [Cue::Aus, Cue::Gaze, Cue::Landmarks2d, Cue::Pose];

    pub fn name(self) -> &'static str {
        match self {
            Cue::Aus => "aus",
            Cue::Gaze => "gaze",
            Cue::Landmarks2d => "landmarks2d",
            Cue::Pose => "pose",
        }
    }

    /// Feature width of the cue as exported by the face tracker.
    pub fn feature_dim(self) -> usize {
        match self {
            Cue::Aus => 20,
            Cue::Gaze => 12,
            Cue::Landmarks2d => 136,
            Cue::Pose => 6,
        }
    }
}

impl fmt::Display for Cue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Cue {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Cue::ALL
            .into_iter()
            .find(|c| c.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown cue `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    /// Concatenate branch features, then rescale channels by learned weights.
    #[default]
    Attention,
    /// Plain concatenation.
    Concat,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    #[default]
    Tdcn,
    /// Causal dilated stack read out at the last step.
    Tcn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub cue: Cue,
    pub input_dim: usize,
    /// Output width of each of the five blocks.
    pub widths: Vec<usize>,
}

pub const NUM_BLOCKS: usize = 5;
pub const LANDMARK_WIDTHS: [usize; NUM_BLOCKS] = [256, 256, 128, 64, 64];
pub const POSE_WIDTHS: [usize; NUM_BLOCKS] = [128, 64, 256, 128, 64];

/// Missing fields take their values from [`ModelConfig::default`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub sequence_length: usize,
    pub branches: Vec<BranchConfig>,
    pub classifier_dims: Vec<usize>,
    pub attention_reduction: usize,
    pub pooling: PoolKind,
    pub kernel_size: usize,
    pub fusion: Fusion,
    pub backbone: BackboneKind,
    /// Channel width of the causal baseline; defaults to the branch's final
    /// block width.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tcn_width: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            sequence_length: 5000,
            branches: vec![
                BranchConfig {
                    cue: Cue::Landmarks2d,
                    input_dim: 136,
                    widths: LANDMARK_WIDTHS.to_vec(),
                },
                BranchConfig {
                    cue: Cue::Pose,
                    input_dim: 6,
                    widths: POSE_WIDTHS.to_vec(),
                },
            ],
            classifier_dims: vec![256, 32, 2],
            attention_reduction: 4,
            pooling: PoolKind::Max,
            kernel_size: 3,
            fusion: Fusion::Attention,
            backbone: BackboneKind::Tdcn,
            tcn_width: None,
        }
    }
}

impl ModelConfig {
    /// Checks invariants and sorts branches into canonical order.
    pub fn validate(&mut self) -> Result<()> {
        if self.branches.is_empty() {
            return Err(Error::Config("at least one branch is required".into()));
        }
        self.branches.sort_by_key(|b| b.cue);
        if self.branches.windows(2).any(|w| w[0].cue == w[1].cue) {
            return Err(Error::Config("duplicate cue in branches".into()));
        }
        for b in &self.branches {
            if b.widths.len() != NUM_BLOCKS {
                return Err(Error::Config(format!(
                    "branch `{}` needs {NUM_BLOCKS} block widths, got {}",
                    b.cue,
                    b.widths.len()
                )));
            }
            if b.input_dim == 0 || b.widths.contains(&0) {
                return Err(Error::Config(format!(
                    "branch `{}` has a zero width",
                    b.cue
                )));
            }
        }
        let final_width = self.branches[0].widths[NUM_BLOCKS - 1];
        if self
            .branches
            .iter()
            .any(|b| b.widths[NUM_BLOCKS - 1] != final_width)
        {
            return Err(Error::Config(
                "all branches must end with the same width".into(),
            ));
        }
        if self.classifier_dims.last() != Some(&2) || self.classifier_dims.contains(&0) {
            return Err(Error::Config(
                "classifier dims must be positive and end in 2".into(),
            ));
        }
        if self.attention_reduction == 0 {
            return Err(Error::Config("attention reduction must be positive".into()));
        }
        if self.kernel_size == 0 {
            return Err(Error::Config("kernel size must be positive".into()));
        }
        if self.tcn_width == Some(0) {
            return Err(Error::Config("tcn width must be positive".into()));
        }
        let min_len = match self.backbone {
            BackboneKind::Tdcn => 1 << (NUM_BLOCKS - 1),
            BackboneKind::Tcn => 1,
        };
        if self.sequence_length < min_len {
            return Err(Error::SequenceTooShort {
                op: "model",
                len: self.sequence_length,
                min: min_len,
            });
        }
        Ok(())
    }

    pub fn cues(&self) -> Vec<Cue> {
        self.branches.iter().map(|b| b.cue).collect()
    }

    /// Width of the concatenated branch features.
    pub fn fused_width(&self) -> usize {
        match self.backbone {
            BackboneKind::Tdcn => self.branches.iter().map(|b| b.widths[NUM_BLOCKS - 1]).sum(),
            BackboneKind::Tcn => self.branches.iter().map(|b| self.tcn_width_for(b)).sum(),
        }
    }

    pub fn tcn_width_for(&self, branch: &BranchConfig) -> usize {
        self.tcn_width.unwrap_or(branch.widths[NUM_BLOCKS - 1])
    }

    /// Time steps left after the backbone.
    pub fn output_length(&self) -> usize {
        match self.backbone {
            BackboneKind::Tdcn => tdcn_output_length(self.sequence_length),
            BackboneKind::Tcn => 1,
        }
    }

    pub fn attention_hidden(&self) -> usize {
        (self.fused_width() / self.attention_reduction).max(1)
    }

    pub fn classifier_input(&self) -> usize {
        self.output_length() * self.fused_width()
    }

    /// Keeps only the branches for `cues`.
    pub fn with_cues(&self, cues: &[Cue]) -> Result<Self> {
        let mut out = self.clone();
        out.branches.retain(|b| cues.contains(&b.cue));
        for cue in cues {
            if !out.branches.iter().any(|b| b.cue == *cue) {
                return Err(Error::Config(format!(
                    "no branch configured for cue `{cue}`"
                )));
            }
        }
        out.validate()?;
        Ok(out)
    }
}

/// Length after four floor-halving pools.
pub fn tdcn_output_length(len: usize) -> usize {
    len >> (NUM_BLOCKS - 1)
}

/// Smallest number of causal layers with kernel `k` and dilations
/// 1, 2, 4, … whose receptive field `1 + (k−1)·(2^L − 1)` reaches `len`.
pub fn tcn_depth(len: usize, kernel_size: usize) -> usize {
    let mut depth = 1;
    while tcn_receptive_field(depth, kernel_size) < len {
        depth += 1;
    }
    depth
}

pub fn tcn_receptive_field(depth: usize, kernel_size: usize) -> usize {
    1 + (kernel_size - 1) * ((1usize << depth) - 1)
}

// ---------------------------------------------------------------------------
// Dilated convolutional block

#[derive(Clone, Debug, PartialEq)]
pub struct DcbConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub path_a_dilations: Vec<usize>,
    pub path_b_dilations: Vec<usize>,
    pub use_batch_norm: bool,
}

impl DcbConfig {
    pub fn new(in_channels: usize, out_channels: usize, use_batch_norm: bool) -> Self {
        Self {
            in_channels,
            out_channels,
            path_a_dilations: vec![1, 2],
            path_b_dilations: vec![2, 4],
            use_batch_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for path in [&self.path_a_dilations, &self.path_b_dilations] {
            if path.is_empty() || path[0] == 0 {
                return Err(Error::Config(
                    "dilation paths must be non-empty and positive".into(),
                ));
            }
            if path.windows(2).any(|w| w[1] != 2 * w[0]) {
                return Err(Error::Config(format!(
                    "dilations {path:?} must double each step"
                )));
            }
        }
        let covered =
            |d: usize| self.path_a_dilations.contains(&d) || self.path_b_dilations.contains(&d);
        if ![1, 2, 4].into_iter().all(covered) {
            return Err(Error::Config("dilation paths must cover 1, 2 and 4".into()));
        }
        Ok(())
    }
}

/// Two parallel dilated paths joined by sum and ELU, a kernel-1 residual
/// shortcut, and an optional trailing batch norm.
#[derive(Clone, Debug)]
pub struct Dcb {
    pub path_a: Vec<Conv1d>,
    pub path_b: Vec<Conv1d>,
    pub shortcut: Conv1d,
    pub batch_norm: Option<BatchNorm>,
}

impl Dcb {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &DcbConfig,
        kernel_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut path = |label: &str, dilations: &[usize], store: &mut ParamStore| {
            dilations
                .iter()
                .enumerate()
                .map(|(i, &d)| {
                    let cin = if i == 0 {
                        cfg.in_channels
                    } else {
                        cfg.out_channels
                    };
                    Conv1d::new(
                        store,
                        &format!("{name}.{label}.{i}"),
                        cin,
                        cfg.out_channels,
                        kernel_size,
                        d,
                        Padding::Centered,
                        rng,
                    )
                })
                .collect::<Vec<_>>()
        };
        let path_a = path("path_a", &cfg.path_a_dilations, store);
        let path_b = path("path_b", &cfg.path_b_dilations, store);
        let shortcut = Conv1d::new(
            store,
            &format!("{name}.shortcut"),
            cfg.in_channels,
            cfg.out_channels,
            1,
            1,
            Padding::Centered,
            rng,
        );
        let batch_norm = cfg
            .use_batch_norm
            .then(|| BatchNorm::new(store, &format!("{name}.bn"), cfg.out_channels));
        Ok(Self {
            path_a,
            path_b,
            shortcut,
            batch_norm,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, mode: Mode) -> Result<Var> {
        let run_path = |tape: &mut Tape<'_>, convs: &[Conv1d]| -> Result<Var> {
            let mut h = x;
            for conv in convs {
                let c = conv.forward(tape, h)?;
                h = tape.elu(c);
            }
            Ok(h)
        };
        let a = run_path(tape, &self.path_a)?;
        let b = run_path(tape, &self.path_b)?;
        let joined = tape.add(a, b)?;
        let joined = tape.elu(joined);
        let residual = self.shortcut.forward(tape, x)?;
        let out = tape.add(joined, residual)?;
        match &self.batch_norm {
            Some(bn) => bn.forward(tape, out, mode),
            None => Ok(out),
        }
    }
}

// ---------------------------------------------------------------------------
// Backbones

/// Five blocks interleaved with four stride-2 pools; the last block has no
/// batch norm.
#[derive(Clone, Debug)]
pub struct Tdcn {
    pub blocks: Vec<Dcb>,
    pub pooling: PoolKind,
}

impl Tdcn {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        widths: &[usize],
        kernel_size: usize,
        pooling: PoolKind,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(widths.len());
        let mut cin = input_dim;
        for (i, &w) in widths.iter().enumerate() {
            let cfg = DcbConfig::new(cin, w, i + 1 < widths.len());
            blocks.push(Dcb::new(
                store,
                &format!("{name}.dcb{}", i + 1),
                &cfg,
                kernel_size,
                rng,
            )?);
            cin = w;
        }
        Ok(Self { blocks, pooling })
    }

    /// `(batch, T, D) → (batch, ⌊T/16⌋, C5)`.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, mode: Mode) -> Result<Var> {
        let len = tape.shape(x)[tape.shape(x).len() - 2];
        let min = 1 << (self.blocks.len() - 1);
        if len < min {
            return Err(Error::SequenceTooShort {
                op: "tdcn",
                len,
                min,
            });
        }
        let mut h = x;
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(tape, h, mode)?;
            if i + 1 < self.blocks.len() {
                h = tape.pool1d(h, self.pooling)?;
            }
        }
        Ok(h)
    }
}

/// Causal dilated stack with doubling dilations, read out at the final step.
#[derive(Clone, Debug)]
pub struct Tcn {
    pub layers: Vec<Conv1d>,
}

impl Tcn {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        width: usize,
        depth: usize,
        kernel_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layers = (0..depth)
            .map(|i| {
                let cin = if i == 0 { input_dim } else { width };
                Conv1d::new(
                    store,
                    &format!("{name}.layer{i}"),
                    cin,
                    width,
                    kernel_size,
                    1 << i,
                    Padding::Causal,
                    rng,
                )
            })
            .collect();
        Self { layers }
    }

    /// Full output sequence `(batch, T, width)`.
    pub fn forward_sequence(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        for conv in &self.layers {
            let c = conv.forward(tape, h)?;
            h = tape.elu(c);
        }
        Ok(h)
    }

    /// Features at the final step, `(batch, width)`.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let y = self.forward_sequence(tape, x)?;
        tape.last_step(y)
    }
}

#[derive(Clone, Debug)]
pub enum Backbone {
    Tdcn(Tdcn),
    Tcn(Tcn),
}

impl Backbone {
    /// Always returns a `(batch, time, channels)` sequence.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, mode: Mode) -> Result<Var> {
        match self {
            Backbone::Tdcn(t) => t.forward(tape, x, mode),
            Backbone::Tcn(t) => {
                let y = t.forward(tape, x)?;
                let shape = tape.shape(y).to_vec();
                let (batch, c) = if shape.len() == 2 {
                    (shape[0], shape[1])
                } else {
                    (1, shape[0])
                };
                tape.reshape(y, &[batch, 1, c])
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Fusion and classifier

/// Squeeze by temporal mean, excite through two linear layers, rescale.
#[derive(Clone, Debug)]
pub struct Fwa {
    pub w1: Linear,
    pub w2: Linear,
}

impl Fwa {
    pub fn new(
        store: &mut ParamStore,
        channels: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            w1: Linear::new(store, "fwa.w1", channels, hidden, rng),
            w2: Linear::new(store, "fwa.w2", hidden, channels, rng),
        }
    }

    /// `h = σ(W2 · relu(W1 · s))` with `s` the per-channel temporal mean.
    pub fn attention(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let s = tape.global_avg_pool(x)?;
        let z = self.w1.forward(tape, s)?;
        let z = tape.relu(z);
        let h = self.w2.forward(tape, z)?;
        Ok(tape.sigmoid(h))
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let h = self.attention(tape, x)?;
        tape.scale_channels(x, h)
    }
}

/// Flatten, then linear layers with ELU between them.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub layers: Vec<Linear>,
}

impl Classifier {
    pub fn new(store: &mut ParamStore, input: usize, dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut prev = input;
        let layers = dims
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let l = Linear::new(store, &format!("classifier.{i}"), prev, d, rng);
                prev = d;
                l
            })
            .collect();
        Self { layers }
    }

    /// Returns the logits `(batch, 2)`.
    pub fn logits(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let batch = if shape.len() == 3 { shape[0] } else { 1 };
        let flat = shape.iter().product::<usize>() / batch;
        let expected = self.layers[0].in_dim;
        if flat != expected {
            return Err(Error::ShapeMismatch {
                op: "classifier",
                left: shape,
                right: vec![expected],
            });
        }
        let mut h = tape.reshape(x, &[batch, flat])?;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i + 1 < self.layers.len() {
                h = tape.elu(h);
            }
        }
        Ok(h)
    }

    /// Class probabilities `(batch, 2)`; index 1 is the depressed class.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let logits = self.logits(tape, x)?;
        Ok(tape.softmax(logits))
    }
}

// ---------------------------------------------------------------------------
// Full network

#[derive(Clone, Debug)]
pub struct Branch {
    pub cue: Cue,
    pub backbone: Backbone,
}

/// Per-cue inputs of shape `(batch, T, D_cue)`.
pub type Inputs = BTreeMap<Cue, Tensor>;

pub struct ForwardOutput {
    pub logits: Var,
    pub probs: Var,
}

/// Outcome of one training-mode forward and backward pass.
pub struct StepResult {
    pub loss: f64,
    pub probs: Vec<[f64; 2]>,
    pub grads: Gradients,
    pub stat_updates: Vec<StatUpdate>,
}

#[derive(Clone, Debug)]
pub struct Network {
    config: ModelConfig,
    params: ParamStore,
    branches: Vec<Branch>,
    fwa: Option<Fwa>,
    classifier: Classifier,
}

impl Network {
    /// Builds the network with parameters drawn from a seeded generator in
    /// declaration order.
    pub fn new(mut config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut branches = Vec::with_capacity(config.branches.len());
        for b in &config.branches {
            let name = b.cue.name();
            let backbone = match config.backbone {
                BackboneKind::Tdcn => Backbone::Tdcn(Tdcn::new(
                    &mut params,
                    name,
                    b.input_dim,
                    &b.widths,
                    config.kernel_size,
                    config.pooling,
                    &mut rng,
                )?),
                BackboneKind::Tcn => Backbone::Tcn(Tcn::new(
                    &mut params,
                    &format!("{name}.tcn"),
                    b.input_dim,
                    config.tcn_width_for(b),
                    tcn_depth(config.sequence_length, config.kernel_size),
                    config.kernel_size,
                    &mut rng,
                )),
            };
            branches.push(Branch {
                cue: b.cue,
                backbone,
            });
        }
        let fwa = (config.fusion == Fusion::Attention).then(|| {
            Fwa::new(
                &mut params,
                config.fused_width(),
                config.attention_hidden(),
                &mut rng,
            )
        });
        let classifier = Classifier::new(
            &mut params,
            config.classifier_input(),
            &config.classifier_dims,
            &mut rng,
        );
        Ok(Self {
            config,
            params,
            branches,
            fwa,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn fwa(&self) -> Option<&Fwa> {
        self.fwa.as_ref()
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    pub fn tape(&self) -> Tape<'_> {
        Tape::with_params(&self.params)
    }

    /// Branch features concatenated in canonical cue order.
    pub fn fused_features<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        inputs: &BTreeMap<Cue, Var>,
        mode: Mode,
    ) -> Result<Var> {
        let mut fused: Option<Var> = None;
        for branch in &self.branches {
            let x = *inputs
                .get(&branch.cue)
                .ok_or_else(|| Error::MissingBranch(branch.cue.name().to_string()))?;
            let features = branch.backbone.forward(tape, x, mode)?;
            fused = Some(match fused {
                None => features,
                Some(prev) => tape.concat_last(prev, features)?,
            });
        }
        Ok(fused.expect("config has at least one branch"))
    }

    pub fn forward<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        inputs: &BTreeMap<Cue, Var>,
        mode: Mode,
    ) -> Result<ForwardOutput> {
        let fused = self.fused_features(tape, inputs, mode)?;
        let fused = match &self.fwa {
            Some(fwa) => fwa.forward(tape, fused)?,
            None => fused,
        };
        let logits = self.classifier.logits(tape, fused)?;
        let probs = tape.softmax(logits);
        Ok(ForwardOutput { logits, probs })
    }

    fn check_inputs(&self, inputs: &Inputs) -> Result<usize> {
        let mut batch = None;
        for b in &self.config.branches {
            let t = inputs
                .get(&b.cue)
                .ok_or_else(|| Error::MissingBranch(b.cue.name().to_string()))?;
            let expected = [t.shape()[0], self.config.sequence_length, b.input_dim];
            if t.ndim() != 3 || t.shape() != expected {
                return Err(Error::ShapeMismatch {
                    op: "model input",
                    left: t.shape().to_vec(),
                    right: expected.to_vec(),
                });
            }
            match batch {
                None => batch = Some(t.shape()[0]),
                Some(n) if n != t.shape()[0] => {
                    return Err(Error::Config("branch inputs disagree on batch size".into()))
                }
                _ => {}
            }
        }
        Ok(batch.unwrap())
    }

    fn leaves<'p>(&self, tape: &mut Tape<'p>, inputs: &Inputs) -> BTreeMap<Cue, Var> {
        self.config
            .branches
            .iter()
            .map(|b| (b.cue, tape.constant(inputs[&b.cue].clone())))
            .collect()
    }

    /// Eval-mode class probabilities, one `[p_non_depressed, p_depressed]`
    /// pair per batch row.
    pub fn predict(&self, inputs: &Inputs) -> Result<Vec<[f64; 2]>> {
        self.check_inputs(inputs)?;
        let mut tape = self.tape();
        let vars = self.leaves(&mut tape, inputs);
        let out = self.forward(&mut tape, &vars, Mode::Eval)?;
        Ok(pairs(tape.value(out.probs)))
    }

    /// Train-mode forward and backward of the mean cross-entropy.
    pub fn train_step(&self, inputs: &Inputs, labels: &[usize]) -> Result<StepResult> {
        let batch = self.check_inputs(inputs)?;
        if labels.len() != batch {
            return Err(Error::ShapeMismatch {
                op: "labels",
                left: vec![batch],
                right: vec![labels.len()],
            });
        }
        let mut tape = self.tape();
        let vars = self.leaves(&mut tape, inputs);
        let out = self.forward(&mut tape, &vars, Mode::Train)?;
        let loss = tape.softmax_cross_entropy(out.logits, labels)?;
        let grads = tape.backward(loss)?;
        Ok(StepResult {
            loss: tape.value(loss).item().unwrap(),
            probs: pairs(tape.value(out.probs)),
            grads,
            stat_updates: tape.take_stat_updates(),
        })
    }

    /// Replaces the parameter store, e.g. with one read from a checkpoint.
    /// Names and shapes must match exactly.
    pub fn load_params(&mut self, store: ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                store.len()
            )));
        }
        for (mine, theirs) in self.params.entries().iter().zip(store.entries()) {
            if mine.name != theirs.name
                || mine.tensor.shape() != theirs.tensor.shape()
                || mine.trainable() != theirs.trainable()
            {
                return Err(Error::CheckpointMismatch(format!(
                    "tensor `{}` {:?} does not match `{}` {:?}",
                    theirs.name,
                    theirs.tensor.shape(),
                    mine.name,
                    mine.tensor.shape()
                )));
            }
        }
        self.params = store;
        Ok(())
    }
}

fn pairs(probs: &Tensor) -> Vec<[f64; 2]> {
    probs.data().chunks_exact(2).map(|p| [p[0], p[1]]).collect()
}
