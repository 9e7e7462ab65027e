//! Static architecture analysis: receptive field, trainable parameters and
//! FLOPs per layer.
//!
//! Conventions: one multiply-accumulate is 2 FLOPs, so a convolution costs
//! `2·L·k·Cin·Cout` over an input of length `L`, and a linear layer
//! `2·in·out`. Pooling and activations cost one FLOP per input element.
//! Biases, elementwise sums, batch norm and channel rescaling are not
//! counted. A pool is treated as a window-2 aggregation whose stride
//! doubles the spacing of all later taps.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{tcn_depth, BackboneKind, Cue, DcbConfig, Fusion, ModelConfig, NUM_BLOCKS};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerRow {
    pub name: String,
    pub kind: &'static str,
    pub output_length: usize,
    pub channels: usize,
    /// Span of input frames that can influence one output step.
    pub receptive_field: usize,
    pub params: usize,
    pub flops: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ArchSummary {
    pub rows: Vec<LayerRow>,
}

impl ArchSummary {
    pub fn total_params(&self) -> usize {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.rows.iter().map(|r| r.flops).sum()
    }

    pub fn receptive_fields(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.receptive_field).collect()
    }

    pub fn final_receptive_field(&self) -> usize {
        self.rows.last().map_or(1, |r| r.receptive_field)
    }
}

/// Accumulates rows while tracking sequence length, channel count,
/// receptive field and the spacing of input frames between adjacent steps.
#[derive(Clone, Debug)]
pub struct SummaryBuilder {
    length: usize,
    channels: usize,
    receptive_field: usize,
    jump: usize,
    summary: ArchSummary,
}

fn conv_cost(len: usize, k: usize, cin: usize, cout: usize) -> (usize, u64) {
    (cout * cin * k + cout, 2 * (len * k * cin * cout) as u64)
}

impl SummaryBuilder {
    pub fn new(length: usize, channels: usize) -> Self {
        Self {
            length,
            channels,
            receptive_field: 1,
            jump: 1,
            summary: ArchSummary::default(),
        }
    }

    /// Starts from an existing receptive field, e.g. a head consuming
    /// backbone features.
    pub fn with_receptive_field(mut self, rf: usize) -> Self {
        self.receptive_field = rf;
        self
    }

    fn push(&mut self, name: &str, kind: &'static str, params: usize, flops: u64) {
        self.summary.rows.push(LayerRow {
            name: name.to_string(),
            kind,
            output_length: self.length,
            channels: self.channels,
            receptive_field: self.receptive_field,
            params,
            flops,
        });
    }

    /// Length-preserving convolution, optionally followed by ELU.
    pub fn conv(
        &mut self,
        name: &str,
        k: usize,
        dilation: usize,
        cout: usize,
        activation: bool,
    ) -> &mut Self {
        let (params, mut flops) = conv_cost(self.length, k, self.channels, cout);
        if activation {
            flops += (self.length * cout) as u64;
        }
        self.receptive_field += (k - 1) * dilation * self.jump;
        self.channels = cout;
        self.push(name, "conv", params, flops);
        self
    }

    /// A dilated convolutional block: two ELU-activated paths, ELU on
    /// their sum, a kernel-1 shortcut and optional batch norm.
    pub fn dcb(&mut self, name: &str, k: usize, cfg: &DcbConfig) -> &mut Self {
        let (len, cout) = (self.length, cfg.out_channels);
        let mut params = 0;
        let mut flops = 0;
        let mut span = 0;
        for path in [&cfg.path_a_dilations, &cfg.path_b_dilations] {
            let mut cin = cfg.in_channels;
            for _ in path.iter() {
                let (p, f) = conv_cost(len, k, cin, cout);
                params += p;
                flops += f + (len * cout) as u64;
                cin = cout;
            }
            span = span.max((k - 1) * path.iter().sum::<usize>());
        }
        let (p, f) = conv_cost(len, 1, cfg.in_channels, cout);
        params += p;
        flops += f + (len * cout) as u64;
        if cfg.use_batch_norm {
            params += 2 * cout;
        }
        self.receptive_field += span * self.jump;
        self.channels = cout;
        self.push(name, "dcb", params, flops);
        self
    }

    /// Window-2, stride-2 pooling; an odd last step is dropped.
    pub fn pool(&mut self, name: &str) -> &mut Self {
        let flops = (self.length * self.channels) as u64;
        self.receptive_field += self.jump;
        self.jump *= 2;
        self.length /= 2;
        self.push(name, "pool", 0, flops);
        self
    }

    /// Keeps only the final step.
    pub fn last_step(&mut self, name: &str) -> &mut Self {
        self.length = 1;
        self.push(name, "readout", 0, 0);
        self
    }

    /// Feature-wise attention over `(length, channels)` features; every
    /// output depends on the whole sequence, spanning `input_length`.
    pub fn attention(&mut self, name: &str, hidden: usize, input_length: usize) -> &mut Self {
        let c = self.channels;
        let params = c * hidden + hidden + hidden * c + c;
        let flops = (self.length * c + 2 * c * hidden + hidden + 2 * hidden * c + c) as u64;
        self.receptive_field = self.receptive_field.max(input_length);
        self.push(name, "attention", params, flops);
        self
    }

    /// Fully connected layer on the flattened features; `activation` adds
    /// one FLOP per output.
    pub fn linear(
        &mut self,
        name: &str,
        out: usize,
        activation: bool,
        input_length: usize,
    ) -> &mut Self {
        let input = self.length * self.channels;
        let mut flops = 2 * (input * out) as u64;
        if activation {
            flops += out as u64;
        }
        self.receptive_field = self.receptive_field.max(input_length);
        self.length = 1;
        self.channels = out;
        self.push(name, "linear", input * out + out, flops);
        self
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn finish(self) -> ArchSummary {
        self.summary
    }
}

/// One temporal dilated branch.
pub fn summarize_tdcn(
    name: &str,
    length: usize,
    input_dim: usize,
    widths: &[usize],
    k: usize,
) -> ArchSummary {
    let mut b = SummaryBuilder::new(length, input_dim);
    let mut cin = input_dim;
    for (i, &w) in widths.iter().enumerate() {
        let last = i + 1 == widths.len();
        b.dcb(
            &format!("{name}.dcb{}", i + 1),
            k,
            &DcbConfig::new(cin, w, !last),
        );
        if !last {
            b.pool(&format!("{name}.pool{}", i + 1));
        }
        cin = w;
    }
    b.finish()
}

/// A causal stack with dilations 1, 2, 4, … read out at the last step.
pub fn summarize_tcn(
    name: &str,
    length: usize,
    input_dim: usize,
    width: usize,
    depth: usize,
    k: usize,
) -> ArchSummary {
    let mut b = SummaryBuilder::new(length, input_dim);
    for i in 0..depth {
        b.conv(&format!("{name}.layer{i}"), k, 1 << i, width, true);
    }
    b.last_step(&format!("{name}.readout"));
    b.finish()
}

/// Per-branch summaries plus the fusion and classifier head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSummary {
    pub branches: Vec<(Cue, ArchSummary)>,
    pub head: ArchSummary,
}

impl ModelSummary {
    pub fn sections(&self) -> impl Iterator<Item = (String, &ArchSummary)> {
        self.branches
            .iter()
            .map(|(c, s)| (c.name().to_string(), s))
            .chain(std::iter::once(("head".to_string(), &self.head)))
    }

    pub fn total_params(&self) -> usize {
        self.sections().map(|(_, s)| s.total_params()).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.sections().map(|(_, s)| s.total_flops()).sum()
    }

    /// Aligned text table with per-section subtotals and a grand total.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let header = format!(
            "{:<28} {:>9} {:>7} {:>8} {:>6} {:>12} {:>16}",
            "layer", "kind", "length", "channels", "rf", "params", "flops"
        );
        let rule = "-".repeat(header.len());
        writeln!(out, "{header}\n{rule}").unwrap();
        for (section, summary) in self.sections() {
            for r in &summary.rows {
                writeln!(
                    out,
                    "{:<28} {:>9} {:>7} {:>8} {:>6} {:>12} {:>16}",
                    r.name,
                    r.kind,
                    r.output_length,
                    r.channels,
                    r.receptive_field,
                    r.params,
                    r.flops
                )
                .unwrap();
            }
            writeln!(
                out,
                "{:<28} {:>9} {:>7} {:>8} {:>6} {:>12} {:>16}",
                format!("[{section} subtotal]"),
                "",
                "",
                "",
                "",
                summary.total_params(),
                summary.total_flops()
            )
            .unwrap();
        }
        writeln!(out, "{rule}").unwrap();
        writeln!(
            out,
            "{:<28} {:>9} {:>7} {:>8} {:>6} {:>12} {:>16}",
            "total",
            "",
            "",
            "",
            "",
            self.total_params(),
            self.total_flops()
        )
        .unwrap();
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        wtr.write_record([
            "section",
            "layer",
            "kind",
            "output_length",
            "channels",
            "receptive_field",
            "params",
            "flops",
        ])?;
        for (section, summary) in self.sections() {
            for r in &summary.rows {
                wtr.write_record([
                    section.clone(),
                    r.name.clone(),
                    r.kind.to_string(),
                    r.output_length.to_string(),
                    r.channels.to_string(),
                    r.receptive_field.to_string(),
                    r.params.to_string(),
                    r.flops.to_string(),
                ])?;
            }
        }
        let bytes = wtr.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// Summary of the network `config` describes, mirroring how
/// [`crate::model::Network`] instantiates it.
pub fn summarize_model(config: &ModelConfig) -> Result<ModelSummary> {
    let mut config = config.clone();
    config.validate()?;
    let t = config.sequence_length;
    let k = config.kernel_size;
    let branches: Vec<(Cue, ArchSummary)> = config
        .branches
        .iter()
        .map(|b| {
            let name = b.cue.name();
            let summary = match config.backbone {
                BackboneKind::Tdcn => summarize_tdcn(name, t, b.input_dim, &b.widths, k),
                BackboneKind::Tcn => summarize_tcn(
                    &format!("{name}.tcn"),
                    t,
                    b.input_dim,
                    config.tcn_width_for(b),
                    tcn_depth(t, k),
                    k,
                ),
            };
            (b.cue, summary)
        })
        .collect();

    let span = branches
        .iter()
        .map(|(_, s)| s.final_receptive_field())
        .max()
        .unwrap_or(1);
    let mut head = SummaryBuilder::new(config.output_length(), config.fused_width())
        .with_receptive_field(span);
    if config.fusion == Fusion::Attention {
        head.attention("fwa", config.attention_hidden(), t);
    }
    let dims = &config.classifier_dims;
    for (i, &d) in dims.iter().enumerate() {
        // The last layer's activation is the two-way softmax.
        head.linear(&format!("classifier.{i}"), d, true, t);
    }
    Ok(ModelSummary {
        branches,
        head: head.finish(),
    })
}

/// The same model with every branch replaced by the causal baseline whose
/// receptive field first reaches the sequence length.
pub fn matched_tcn(config: &ModelConfig) -> ModelConfig {
    ModelConfig {
        backbone: BackboneKind::Tcn,
        ..config.clone()
    }
}

/// Single-branch comparison at a given input: the default TDCN widths for
/// `input_dim` features versus the minimal causal stack of `tcn_width`
/// channels covering `length` frames.
pub fn compare_backbones(
    length: usize,
    input_dim: usize,
    widths: &[usize; NUM_BLOCKS],
    tcn_width: usize,
    k: usize,
) -> (ArchSummary, ArchSummary) {
    (
        summarize_tdcn("tdcn", length, input_dim, widths, k),
        summarize_tcn("tcn", length, input_dim, tcn_width, tcn_depth(length, k), k),
    )
}
