//! Layer primitives recorded on a [`Tape`].
//!
//! Sequence activations are laid out as `(batch, time, channels)` with the
//! channel axis contiguous.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Backward, OpKind, StatUpdate, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{gemm, MatMut, MatRef};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Where the taps of a dilated convolution sit relative to the output step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    /// Taps at `t + d·(i − (k−1)/2)`; for `k = 3` these are `t−d, t, t+d`.
    Centered,
    /// Taps at `t − d·(k−1−i)`, so the last tap reads step `t`.
    Causal,
}

impl Padding {
    fn offset(self, tap: usize, kernel_size: usize, dilation: usize) -> isize {
        let (i, k, d) = (tap as isize, kernel_size as isize, dilation as isize);
        match self {
            Padding::Centered => d * (i - (k - 1) / 2),
            Padding::Causal => -d * (k - 1 - i),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolKind {
    Max,
    Average,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn seq_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [b, len, c] => Ok((b, len, c)),
        [len, c] => Ok((1, len, c)),
        _ => Err(Error::InvalidShape(format!(
            "{op} expects (batch, time, channels), got {:?}",
            t.shape()
        ))),
    }
}

/// Uniform `[-a, a]` with `a = sqrt(1 / fan_in)`.
pub fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let a = (1.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-a..=a)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

// ---------------------------------------------------------------------------
// Dilated 1-D convolution

/// Filter `(out, in, k)`, bias `(out)`, dilation and tap placement.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        dilation: usize,
        padding: Padding,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(kernel_size >= 1 && dilation >= 1);
        let fan_in = in_channels * kernel_size;
        let weight = store.add_trainable(
            format!("{name}.weight"),
            init_uniform(&[out_channels, in_channels, kernel_size], fan_in, rng),
        );
        let bias = store.add_trainable(
            format!("{name}.bias"),
            init_uniform(&[out_channels], fan_in, rng),
        );
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel_size,
            dilation,
            padding,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.conv1d(x, w, b, self.dilation, self.padding)
    }
}

struct Conv1dOp {
    dilation: usize,
    padding: Padding,
}

/// Valid output range `[lo, hi)` for a tap at `offset` over length `len`.
fn tap_range(offset: isize, len: usize) -> (usize, usize) {
    let len = len as isize;
    let lo = (-offset).max(0).min(len);
    let hi = (len - offset).min(len).max(lo);
    (lo as usize, hi as usize)
}

impl Backward for Conv1dOp {
    fn kind(&self) -> OpKind {
        OpKind::Conv1d
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (batch, len, cin) = seq_dims(x, "conv1d").unwrap();
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let mut dx = needs[0].then(|| vec![0.0; x.numel()]);
        let mut dw = needs[1].then(|| vec![0.0; w.numel()]);
        for tap in 0..k {
            let offset = self.padding.offset(tap, k, self.dilation);
            let (lo, hi) = tap_range(offset, len);
            if lo >= hi {
                continue;
            }
            let rows = hi - lo;
            let src = (lo as isize + offset) as usize;
            for b in 0..batch {
                let g_off = (b * len + lo) * cout;
                let x_off = (b * len + src) * cin;
                if let Some(dx) = dx.as_mut() {
                    // dx[t+s, c] += Σ_o g[t, o] · w[o, c, tap]
                    let w_oc = MatRef {
                        data: w.data(),
                        offset: tap,
                        rows: cout,
                        cols: cin,
                        row_stride: cin * k,
                        col_stride: k,
                    };
                    gemm(
                        MatRef::rows(g, g_off, rows, cout),
                        w_oc,
                        1.0,
                        MatMut::rows(dx, x_off, rows, cin),
                    );
                }
                if let Some(dw) = dw.as_mut() {
                    // dw[o, c, tap] += Σ_t g[t, o] · x[t+s, c]
                    gemm(
                        MatRef::rows(g, g_off, rows, cout).t(),
                        MatRef::rows(x.data(), x_off, rows, cin),
                        1.0,
                        MatMut {
                            data: dw,
                            offset: tap,
                            rows: cout,
                            cols: cin,
                            row_stride: cin * k,
                            col_stride: k,
                        },
                    );
                }
            }
        }
        let db = needs[2].then(|| {
            let mut db = vec![0.0; cout];
            for row in g.chunks_exact(cout) {
                db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
            }
            db
        });
        vec![dx, dw, db]
    }
}

impl<'p> Tape<'p> {
    /// Dilated convolution with zero padding; output length equals input
    /// length. `x` is `(batch, time, in)` or `(time, in)`, `weight` is
    /// `(out, in, k)` and `bias` is `(out)`.
    pub fn conv1d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        dilation: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(weight), self.value(bias));
        let (batch, len, cin) = seq_dims(tx, "conv1d")?;
        if tw.ndim() != 3 || tw.shape()[1] != cin {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                left: tx.shape().to_vec(),
                right: tw.shape().to_vec(),
            });
        }
        let (cout, k) = (tw.shape()[0], tw.shape()[2]);
        if tb.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv1d bias",
                left: tw.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        if dilation == 0 {
            return Err(Error::Config("conv1d dilation must be at least 1".into()));
        }
        let mut out = Vec::with_capacity(batch * len * cout);
        for _ in 0..batch * len {
            out.extend_from_slice(tb.data());
        }
        for tap in 0..k {
            let offset = padding.offset(tap, k, dilation);
            let (lo, hi) = tap_range(offset, len);
            if lo >= hi {
                continue;
            }
            let rows = hi - lo;
            let src = (lo as isize + offset) as usize;
            let w_co = MatRef {
                data: tw.data(),
                offset: tap,
                rows: cin,
                cols: cout,
                row_stride: k,
                col_stride: cin * k,
            };
            for b in 0..batch {
                gemm(
                    MatRef::rows(tx.data(), (b * len + src) * cin, rows, cin),
                    w_co,
                    1.0,
                    MatMut::rows(&mut out, (b * len + lo) * cout, rows, cout),
                );
            }
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let out = Tensor::from_parts(shape, out);
        Ok(self.push(out, &[x, weight, bias], Conv1dOp { dilation, padding }))
    }
}

// ---------------------------------------------------------------------------
// Elementwise activations

struct EluOp;
struct ReluOp;
struct SigmoidOp;

impl Backward for EluOp {
    fn kind(&self) -> OpKind {
        OpKind::Elu
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        out: &Tensor,
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let dx = inputs[0]
            .data()
            .iter()
            .zip(out.data())
            .zip(g)
            .map(|((&x, &y), &g)| if x >= 0.0 { g } else { g * (y + 1.0) })
            .collect();
        vec![Some(dx)]
    }
}

impl Backward for ReluOp {
    fn kind(&self) -> OpKind {
        OpKind::Relu
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let dx = inputs[0]
            .data()
            .iter()
            .zip(g)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect();
        vec![Some(dx)]
    }
}

impl Backward for SigmoidOp {
    fn kind(&self) -> OpKind {
        OpKind::Sigmoid
    }

    fn backward(
        &self,
        _: &[&Tensor],
        out: &Tensor,
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let dx = out
            .data()
            .iter()
            .zip(g)
            .map(|(&y, &g)| g * y * (1.0 - y))
            .collect();
        vec![Some(dx)]
    }
}

pub fn elu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Tape<'p> {
    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: impl Backward + 'static) -> Var {
        let t = self.value(x);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect());
        self.push(out, &[x], op)
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.map(x, elu, EluOp)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), ReluOp)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, SigmoidOp)
    }
}

// ---------------------------------------------------------------------------
// Pooling

struct MaxPoolOp {
    argmax: Vec<usize>,
}

struct AvgPoolOp;

impl Backward for MaxPoolOp {
    fn kind(&self) -> OpKind {
        OpKind::MaxPool
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let mut dx = vec![0.0; inputs[0].numel()];
        for (&src, &g) in self.argmax.iter().zip(g) {
            dx[src] += g;
        }
        vec![Some(dx)]
    }
}

impl Backward for AvgPoolOp {
    fn kind(&self) -> OpKind {
        OpKind::AvgPool
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        out: &Tensor,
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (batch, len, c) = seq_dims(inputs[0], "avg_pool1d").unwrap();
        let half = seq_dims(out, "avg_pool1d").unwrap().1;
        let mut dx = vec![0.0; inputs[0].numel()];
        for b in 0..batch {
            for t in 0..half {
                for ch in 0..c {
                    let v = 0.5 * g[(b * half + t) * c + ch];
                    dx[(b * len + 2 * t) * c + ch] = v;
                    dx[(b * len + 2 * t + 1) * c + ch] = v;
                }
            }
        }
        vec![Some(dx)]
    }
}

impl<'p> Tape<'p> {
    /// Window 2, stride 2 pooling over time. A trailing odd step is dropped.
    pub fn pool1d(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let t = self.value(x);
        let (batch, len, c) = seq_dims(t, "pool1d")?;
        if len < 2 {
            return Err(Error::SequenceTooShort {
                op: "pool1d",
                len,
                min: 2,
            });
        }
        let half = len / 2;
        let data = t.data();
        let mut out = Vec::with_capacity(batch * half * c);
        let mut argmax = Vec::new();
        if kind == PoolKind::Max {
            argmax.reserve(batch * half * c);
        }
        for b in 0..batch {
            for step in 0..half {
                let i0 = (b * len + 2 * step) * c;
                let i1 = i0 + c;
                for ch in 0..c {
                    let (a, z) = (data[i0 + ch], data[i1 + ch]);
                    match kind {
                        PoolKind::Max => {
                            // ties go to the earlier step
                            if z > a {
                                out.push(z);
                                argmax.push(i1 + ch);
                            } else {
                                out.push(a);
                                argmax.push(i0 + ch);
                            }
                        }
                        PoolKind::Average => out.push(0.5 * (a + z)),
                    }
                }
            }
        }
        let mut shape = t.shape().to_vec();
        let n = shape.len();
        shape[n - 2] = half;
        let out = Tensor::from_parts(shape, out);
        Ok(match kind {
            PoolKind::Max => self.push(out, &[x], MaxPoolOp { argmax }),
            PoolKind::Average => self.push(out, &[x], AvgPoolOp),
        })
    }

    pub fn max_pool1d(&mut self, x: Var) -> Result<Var> {
        self.pool1d(x, PoolKind::Max)
    }

    pub fn avg_pool1d(&mut self, x: Var) -> Result<Var> {
        self.pool1d(x, PoolKind::Average)
    }
}

// ---------------------------------------------------------------------------
// Global average pooling, channel rescaling, last-step selection

struct GlobalAvgPoolOp;
struct ScaleChannelsOp;
struct LastStepOp;

impl Backward for GlobalAvgPoolOp {
    fn kind(&self) -> OpKind {
        OpKind::GlobalAvgPool
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (batch, len, c) = seq_dims(inputs[0], "global_avg_pool").unwrap();
        let inv = 1.0 / len as f64;
        let mut dx = Vec::with_capacity(inputs[0].numel());
        for b in 0..batch {
            let row: Vec<f64> = g[b * c..(b + 1) * c].iter().map(|v| v * inv).collect();
            for _ in 0..len {
                dx.extend_from_slice(&row);
            }
        }
        vec![Some(dx)]
    }
}

impl Backward for ScaleChannelsOp {
    fn kind(&self) -> OpKind {
        OpKind::ScaleChannels
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (x, h) = (inputs[0], inputs[1]);
        let (batch, len, c) = seq_dims(x, "scale_channels").unwrap();
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; x.numel()];
            for b in 0..batch {
                let hb = &h.data()[b * c..(b + 1) * c];
                for t in 0..len {
                    let i = (b * len + t) * c;
                    for ch in 0..c {
                        dx[i + ch] = g[i + ch] * hb[ch];
                    }
                }
            }
            dx
        });
        let dh = needs[1].then(|| {
            let mut dh = vec![0.0; h.numel()];
            for b in 0..batch {
                for t in 0..len {
                    let i = (b * len + t) * c;
                    for ch in 0..c {
                        dh[b * c + ch] += g[i + ch] * x.data()[i + ch];
                    }
                }
            }
            dh
        });
        vec![dx, dh]
    }
}

impl Backward for LastStepOp {
    fn kind(&self) -> OpKind {
        OpKind::LastStep
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (batch, len, c) = seq_dims(inputs[0], "last_step").unwrap();
        let mut dx = vec![0.0; inputs[0].numel()];
        for b in 0..batch {
            let i = (b * len + len - 1) * c;
            dx[i..i + c].copy_from_slice(&g[b * c..(b + 1) * c]);
        }
        vec![Some(dx)]
    }
}

impl<'p> Tape<'p> {
    /// Per-channel temporal mean: `(batch, time, c) → (batch, c)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (batch, len, c) = seq_dims(t, "global_avg_pool")?;
        let mut out = vec![0.0; batch * c];
        for b in 0..batch {
            let acc = &mut out[b * c..(b + 1) * c];
            for row in t.data()[b * len * c..(b + 1) * len * c].chunks_exact(c) {
                acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
            acc.iter_mut().for_each(|a| *a /= len as f64);
        }
        let shape = if t.ndim() == 3 {
            vec![batch, c]
        } else {
            vec![c]
        };
        Ok(self.push(Tensor::from_parts(shape, out), &[x], GlobalAvgPoolOp))
    }

    /// `y[b, t, c] = x[b, t, c] · h[b, c]`, with `h` broadcast over time.
    pub fn scale_channels(&mut self, x: Var, h: Var) -> Result<Var> {
        let (tx, th) = (self.value(x), self.value(h));
        let (batch, len, c) = seq_dims(tx, "scale_channels")?;
        if th.numel() != batch * c || th.shape().last() != Some(&c) {
            return Err(Error::ShapeMismatch {
                op: "scale_channels",
                left: tx.shape().to_vec(),
                right: th.shape().to_vec(),
            });
        }
        let mut out = tx.data().to_vec();
        for b in 0..batch {
            let hb = &th.data()[b * c..(b + 1) * c];
            for row in out[b * len * c..(b + 1) * len * c].chunks_exact_mut(c) {
                row.iter_mut().zip(hb).for_each(|(v, h)| *v *= h);
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        Ok(self.push(out, &[x, h], ScaleChannelsOp))
    }

    /// Features at the final time step: `(batch, time, c) → (batch, c)`.
    pub fn last_step(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (batch, len, c) = seq_dims(t, "last_step")?;
        let mut out = Vec::with_capacity(batch * c);
        for b in 0..batch {
            let i = (b * len + len - 1) * c;
            out.extend_from_slice(&t.data()[i..i + c]);
        }
        let shape = if t.ndim() == 3 {
            vec![batch, c]
        } else {
            vec![c]
        };
        Ok(self.push(Tensor::from_parts(shape, out), &[x], LastStepOp))
    }
}

// ---------------------------------------------------------------------------
// Batch normalization

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            scale: store.add_trainable(format!("{name}.scale"), Tensor::full(&[channels], 1.0)),
            shift: store.add_trainable(format!("{name}.shift"), Tensor::zeros(&[channels])),
            running_mean: store
                .add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(
                format!("{name}.running_var"),
                Tensor::full(&[channels], 1.0),
            ),
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, mode: Mode) -> Result<Var> {
        let scale = tape.param(self.scale);
        let shift = tape.param(self.shift);
        let stats = match mode {
            Mode::Train => BatchStats::Batch,
            Mode::Eval => {
                let mean = tape.param(self.running_mean);
                let var = tape.param(self.running_var);
                BatchStats::Running {
                    mean: tape.value(mean).data().to_vec(),
                    var: tape.value(var).data().to_vec(),
                }
            }
        };
        let (y, batch_stats) = tape.batch_norm(x, scale, shift, stats, self.eps)?;
        if let Some((mean, var)) = batch_stats {
            tape.record_stat_update(StatUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                momentum: self.momentum,
                batch_mean: mean,
                batch_var: var,
            });
        }
        Ok(y)
    }
}

/// Source of the normalization statistics.
#[derive(Clone, Debug)]
pub enum BatchStats {
    Batch,
    Running { mean: Vec<f64>, var: Vec<f64> },
}

struct BatchNormOp {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

impl Backward for BatchNormOp {
    fn kind(&self) -> OpKind {
        OpKind::BatchNorm
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let gamma = inputs[1].data();
        let c = gamma.len();
        let n = (g.len() / c) as f64;
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for (grow, xrow) in g.chunks_exact(c).zip(self.xhat.chunks_exact(c)) {
            for ch in 0..c {
                sum_g[ch] += grow[ch];
                sum_gx[ch] += grow[ch] * xrow[ch];
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = Vec::with_capacity(g.len());
            for (grow, xrow) in g.chunks_exact(c).zip(self.xhat.chunks_exact(c)) {
                for ch in 0..c {
                    let k = gamma[ch] * self.inv_std[ch];
                    let v = if self.batch_stats {
                        k * (grow[ch] - sum_g[ch] / n - xrow[ch] * sum_gx[ch] / n)
                    } else {
                        k * grow[ch]
                    };
                    dx.push(v);
                }
            }
            dx
        });
        vec![dx, needs[1].then_some(sum_gx), needs[2].then_some(sum_g)]
    }
}

impl<'p> Tape<'p> {
    /// Normalizes each channel over every leading position. Returns the
    /// population batch mean and variance when `stats` is `Batch`.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        stats: BatchStats,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let (tx, ts, tb) = (self.value(x), self.value(scale), self.value(shift));
        let c = *tx.shape().last().unwrap();
        if ts.shape() != [c] || tb.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                left: tx.shape().to_vec(),
                right: ts.shape().to_vec(),
            });
        }
        let rows = tx.numel() / c;
        let (mean, var, is_batch) = match stats {
            BatchStats::Batch => {
                if rows < 2 {
                    return Err(Error::SequenceTooShort {
                        op: "batch_norm",
                        len: rows,
                        min: 2,
                    });
                }
                let mut mean = vec![0.0; c];
                for row in tx.data().chunks_exact(c) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; c];
                for row in tx.data().chunks_exact(c) {
                    for ch in 0..c {
                        let d = row[ch] - mean[ch];
                        var[ch] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= rows as f64);
                (mean, var, true)
            }
            BatchStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::ShapeMismatch {
                        op: "batch_norm running stats",
                        left: tx.shape().to_vec(),
                        right: vec![mean.len()],
                    });
                }
                (mean, var, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks_exact(c) {
            for ch in 0..c {
                let h = (row[ch] - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(ts.data()[ch] * h + tb.data()[ch]);
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        let y = self.push(
            out,
            &[x, scale, shift],
            BatchNormOp {
                xhat,
                inv_std,
                batch_stats: is_batch,
            },
        );
        Ok((y, is_batch.then_some((mean, var))))
    }
}

impl ParamStore {
    /// Folds batch statistics into running buffers:
    /// `running ← momentum·running + (1 − momentum)·batch`.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate]) {
        for u in updates {
            for (id, batch) in [
                (u.running_mean, &u.batch_mean),
                (u.running_var, &u.batch_var),
            ] {
                let t = self.get_mut(id);
                for (r, b) in t.data_mut().iter_mut().zip(batch.iter()) {
                    *r = u.momentum * *r + (1.0 - u.momentum) * b;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Linear, softmax, cross-entropy

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_trainable(
            format!("{name}.weight"),
            init_uniform(&[out_dim, in_dim], in_dim, rng),
        );
        let bias = store.add_trainable(
            format!("{name}.bias"),
            init_uniform(&[out_dim], in_dim, rng),
        );
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.linear(x, w, b)
    }
}

struct LinearOp;

impl Backward for LinearOp {
    fn kind(&self) -> OpKind {
        OpKind::Linear
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
        let rows = x.numel() / in_dim;
        let gv = MatRef::rows(g, 0, rows, out_dim);
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; x.numel()];
            gemm(
                gv,
                MatRef::rows(w.data(), 0, out_dim, in_dim),
                0.0,
                MatMut::rows(&mut dx, 0, rows, in_dim),
            );
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![0.0; w.numel()];
            gemm(
                gv.t(),
                MatRef::rows(x.data(), 0, rows, in_dim),
                0.0,
                MatMut::rows(&mut dw, 0, out_dim, in_dim),
            );
            dw
        });
        let db = needs[2].then(|| {
            let mut db = vec![0.0; out_dim];
            for row in g.chunks_exact(out_dim) {
                db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
            }
            db
        });
        vec![dx, dw, db]
    }
}

struct SoftmaxOp;

impl Backward for SoftmaxOp {
    fn kind(&self) -> OpKind {
        OpKind::Softmax
    }

    fn backward(
        &self,
        _: &[&Tensor],
        out: &Tensor,
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let n = *out.shape().last().unwrap();
        let mut dx = Vec::with_capacity(g.len());
        for (y, gy) in out.data().chunks_exact(n).zip(g.chunks_exact(n)) {
            let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
            dx.extend(y.iter().zip(gy).map(|(y, g)| y * (g - dot)));
        }
        vec![Some(dx)]
    }
}

struct SoftmaxCrossEntropyOp {
    probs: Vec<f64>,
    labels: Vec<usize>,
}

impl Backward for SoftmaxCrossEntropyOp {
    fn kind(&self) -> OpKind {
        OpKind::SoftmaxCrossEntropy
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let rows = self.labels.len();
        let n = self.probs.len() / rows;
        let scale = g[0] / rows as f64;
        let mut dx: Vec<f64> = self.probs.iter().map(|p| p * scale).collect();
        for (r, &label) in self.labels.iter().enumerate() {
            dx[r * n + label] -= scale;
        }
        vec![Some(dx)]
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|v| (v - max).exp()));
        let total: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= total);
    }
    out
}

impl<'p> Tape<'p> {
    /// `x · Wᵀ + b` over the last axis.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(weight), self.value(bias));
        let in_dim = *tx.shape().last().unwrap();
        if tw.ndim() != 2 || tw.shape()[1] != in_dim {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: tx.shape().to_vec(),
                right: tw.shape().to_vec(),
            });
        }
        let out_dim = tw.shape()[0];
        if tb.shape() != [out_dim] {
            return Err(Error::ShapeMismatch {
                op: "linear bias",
                left: tw.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let rows = tx.numel() / in_dim;
        let mut out = Vec::with_capacity(rows * out_dim);
        for _ in 0..rows {
            out.extend_from_slice(tb.data());
        }
        gemm(
            MatRef::rows(tx.data(), 0, rows, in_dim),
            MatRef::rows(tw.data(), 0, out_dim, in_dim).t(),
            1.0,
            MatMut::rows(&mut out, 0, rows, out_dim),
        );
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = out_dim;
        Ok(self.push(Tensor::from_parts(shape, out), &[x, weight, bias], LinearOp))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = *t.shape().last().unwrap();
        let out = Tensor::from_parts(t.shape().to_vec(), softmax_rows(t.data(), n));
        self.push(out, &[x], SoftmaxOp)
    }

    /// Mean of `−ln softmax(logits)[label]` over rows, fused with the
    /// softmax so that the log never sees a rounded-to-zero probability.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let n = *t.shape().last().unwrap();
        let rows = t.numel() / n;
        if rows != labels.len() || labels.iter().any(|&l| l >= n) {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: t.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let mut loss = 0.0;
        for (row, &label) in t.data().chunks_exact(n).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
        loss /= rows as f64;
        let probs = softmax_rows(t.data(), n);
        Ok(self.push(
            Tensor::scalar(loss),
            &[logits],
            SoftmaxCrossEntropyOp {
                probs,
                labels: labels.to_vec(),
            },
        ))
    }
}

/// `−ln(probs[label])` for an already normalized distribution.
pub fn cross_entropy(probs: &[f64], label: usize) -> f64 {
    -probs[label].ln()
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::check_tape_fn;

    fn seq(len: usize, c: usize, values: &[f64]) -> Tensor {
        Tensor::new(&[len, c], values.to_vec()).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct summation of `F(t) = Σ_i filter(i)·x[t + d·(i−1)] + b` for one
    /// channel and k = 3, reading zero outside the sequence.
    fn conv_by_hand(x: &[f64], filter: [f64; 3], b: f64, d: isize) -> Vec<f64> {
        (0..x.len() as isize)
            .map(|t| {
                let mut acc = b;
                for (i, w) in filter.iter().enumerate() {
                    let src = t + d * (i as isize - 1);
                    if src >= 0 && (src as usize) < x.len() {
                        acc += w * x[src as usize];
                    }
                }
                acc
            })
            .collect()
    }

    fn run_conv(x: &[f64], filter: &[f64], b: f64, d: usize, padding: Padding) -> Vec<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(seq(x.len(), 1, x));
        let w = tape.constant(Tensor::new(&[1, 1, filter.len()], filter.to_vec()).unwrap());
        let bv = tape.constant(Tensor::vector(&[b]));
        let y = tape.conv1d(xv, w, bv, d, padding).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn conv_matches_direct_summation() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(conv_by_hand(&x, [1.0; 3], 0.0, 1), vec![3.0, 6.0, 9.0, 7.0]);
        assert_eq!(conv_by_hand(&x, [1.0; 3], 0.0, 2), vec![4.0, 6.0, 4.0, 6.0]);
        assert_eq!(
            run_conv(&x, &[1.0; 3], 0.0, 1, Padding::Centered),
            vec![3.0, 6.0, 9.0, 7.0]
        );
        assert_eq!(
            run_conv(&x, &[1.0; 3], 0.0, 2, Padding::Centered),
            vec![4.0, 6.0, 4.0, 6.0]
        );
        assert_eq!(
            run_conv(&x, &[0.0; 3], 0.5, 1, Padding::Centered),
            vec![0.5; 4]
        );

        let filter = [0.3, -1.2, 0.7];
        let x: Vec<f64> = (0..11).map(|i| (i as f64 * 0.9).sin()).collect();
        for d in 1..=4 {
            let got = run_conv(&x, &filter, 0.1, d, Padding::Centered);
            let want = conv_by_hand(&x, filter, 0.1, d as isize);
            for (g, w) in got.iter().zip(&want) {
                assert_abs_diff_eq!(g, w, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn causal_conv_sums_past() {
        assert_eq!(
            run_conv(&[1.0, 2.0, 3.0], &[1.0, 1.0], 0.0, 1, Padding::Causal),
            vec![1.0, 3.0, 5.0]
        );
        // taps at t−2 and t for d = 2
        assert_eq!(
            run_conv(&[1.0, 2.0, 3.0, 4.0], &[10.0, 1.0], 0.0, 2, Padding::Causal),
            vec![1.0, 2.0, 13.0, 24.0]
        );
    }

    #[test]
    fn conv_keeps_length_and_checks_channels() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 9, 3]));
        let w = tape.constant(Tensor::zeros(&[5, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[5]));
        let y = tape.conv1d(x, w, b, 4, Padding::Centered).unwrap();
        assert_eq!(tape.shape(y), &[2, 9, 5]);
        let bad = tape.constant(Tensor::zeros(&[5, 2, 3]));
        assert!(matches!(
            tape.conv1d(x, bad, b, 1, Padding::Centered),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn activations() {
        assert_eq!(elu(0.0), 0.0);
        assert_eq!(elu(1.0), 1.0);
        assert_abs_diff_eq!(elu(-1.0), (-1.0f64).exp() - 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(elu(-1.0), -0.63212, epsilon = 1e-5);
        assert_eq!(sigmoid(0.0), 0.5);
        assert_abs_diff_eq!(sigmoid(3f64.ln()), 0.75, epsilon = 1e-15);

        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(&[-2.0, 3.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 3.0]);
    }

    #[test]
    fn elu_derivative_branches() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[2.0, 0.0, -1.0]).with_requires_grad(true));
        let y = tape.elu(x);
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        let g = g.wrt(x).unwrap();
        assert_eq!(&g[..2], &[1.0, 1.0]);
        assert_abs_diff_eq!(g[2], (-1.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn pooling_values() {
        let mut tape = Tape::new();
        let x = tape.constant(seq(4, 1, &[1.0, 3.0, 2.0, 5.0]));
        let m = tape.max_pool1d(x).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0, 5.0]);
        let a = tape.avg_pool1d(x).unwrap();
        assert_eq!(tape.value(a).data(), &[2.0, 3.5]);

        let odd = tape.constant(seq(3, 1, &[1.0, 3.0, 2.0]));
        let m = tape.max_pool1d(odd).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0]);

        let c = tape.constant(Tensor::full(&[6, 2], 1.5));
        let a = tape.avg_pool1d(c).unwrap();
        assert_eq!(tape.value(a), &Tensor::full(&[3, 2], 1.5));

        let short = tape.constant(seq(1, 1, &[1.0]));
        assert!(matches!(
            tape.max_pool1d(short),
            Err(Error::SequenceTooShort { .. })
        ));
    }

    #[test]
    fn pool_length_schedule() {
        let mut len = 5000;
        let mut seen = Vec::new();
        for _ in 0..4 {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::zeros(&[len, 1]));
            let y = tape.max_pool1d(x).unwrap();
            len = tape.shape(y)[0];
            seen.push(len);
        }
        assert_eq!(seen, vec![2500, 1250, 625, 312]);
    }

    #[test]
    fn max_pool_routes_to_one_index_per_window() {
        let mut tape = Tape::new();
        let x = tape.leaf(seq(5, 1, &[2.0, 2.0, -1.0, 4.0, 9.0]).with_requires_grad(true));
        let y = tape.max_pool1d(x).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        // tie resolves to the first index; odd tail receives nothing
        assert_eq!(g.wrt(x).unwrap(), &[1.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn batch_norm_values() {
        let mut tape = Tape::new();
        let x = tape.constant(seq(3, 1, &[1.0, 2.0, 3.0]));
        let one = tape.constant(Tensor::vector(&[1.0]));
        let zero = tape.constant(Tensor::vector(&[0.0]));
        let (y, stats) = tape
            .batch_norm(x, one, zero, BatchStats::Batch, 1e-12)
            .unwrap();
        let expect = 1.5f64.sqrt();
        for (g, w) in tape.value(y).data().iter().zip([-expect, 0.0, expect]) {
            assert_abs_diff_eq!(*g, w, epsilon = 1e-9);
        }
        assert_abs_diff_eq!(tape.value(y).data()[0], -1.2247, epsilon = 1e-4);
        let (mean, var) = stats.unwrap();
        assert_abs_diff_eq!(mean[0], 2.0);
        assert_abs_diff_eq!(var[0], 2.0 / 3.0, epsilon = 1e-15);

        let shift = tape.constant(Tensor::vector(&[0.25]));
        let (y, _) = tape
            .batch_norm(x, zero, shift, BatchStats::Batch, BN_EPS)
            .unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.25));

        let (y, stats) = tape
            .batch_norm(
                x,
                one,
                zero,
                BatchStats::Running {
                    mean: vec![0.0],
                    var: vec![1.0],
                },
                BN_EPS,
            )
            .unwrap();
        assert!(stats.is_none());
        for (g, w) in tape.value(y).data().iter().zip([1.0, 2.0, 3.0]) {
            assert_abs_diff_eq!(*g, w, epsilon = 1e-4);
        }

        let single = tape.constant(seq(1, 1, &[1.0]));
        assert!(tape
            .batch_norm(single, one, zero, BatchStats::Batch, BN_EPS)
            .is_err());
    }

    #[test]
    fn running_stats_update() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let updates = {
            let mut tape = Tape::with_params(&store);
            let x = tape.constant(Tensor::new(&[1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap());
            bn.forward(&mut tape, x, Mode::Train).unwrap();
            tape.take_stat_updates()
        };
        assert_eq!(updates.len(), 1);
        store.apply_stat_updates(&updates);
        assert_abs_diff_eq!(
            store.get(bn.running_mean).data()[0],
            0.1 * 2.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            store.get(bn.running_var).data()[0],
            0.9 + 0.1 * 2.0 / 3.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn linear_softmax_gap() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap());
        let mut eye = vec![0.0; 9];
        eye[0] = 1.0;
        eye[4] = 1.0;
        eye[8] = 1.0;
        let w = tape.constant(Tensor::new(&[3, 3], eye).unwrap());
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let bad = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.linear(x, bad, b).is_err());

        let z = tape.constant(Tensor::vector(&[0.0, 0.0]));
        let s = tape.softmax(z);
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
        let z = tape.constant(Tensor::vector(&[2f64.ln(), 0.0]));
        let s = tape.softmax(z);
        assert_abs_diff_eq!(tape.value(s).data()[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(tape.value(s).data()[1], 1.0 / 3.0, epsilon = 1e-15);

        let x = tape.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let g = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(g).data(), &[2.0, 3.0]);
        let c = tape.constant(Tensor::full(&[5, 3], -0.75));
        let g = tape.global_avg_pool(c).unwrap();
        assert_eq!(tape.value(g).data(), &[-0.75; 3]);
    }

    #[test]
    fn global_avg_pool_grad_is_one_over_t() {
        let mut tape = Tape::new();
        let x = tape.leaf(random(&[4, 3], 1).with_requires_grad(true));
        let g = tape.global_avg_pool(x).unwrap();
        let loss = tape.sum(g);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.wrt(x).unwrap().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn cross_entropy_values() {
        assert_abs_diff_eq!(cross_entropy(&[0.5, 0.5], 1), 2f64.ln(), epsilon = 1e-15);
        let eps = 1e-9;
        assert_abs_diff_eq!(cross_entropy(&[1.0 - eps, eps], 0), eps, epsilon = 1e-15);

        // fused op gradient equals probs − one-hot
        let mut tape = Tape::new();
        let logits = tape.leaf(
            Tensor::new(&[1, 2], vec![0.3, -1.1])
                .unwrap()
                .with_requires_grad(true),
        );
        let loss = tape.softmax_cross_entropy(logits, &[1]).unwrap();
        let probs = softmax_rows(&[0.3, -1.1], 2);
        assert_abs_diff_eq!(
            tape.value(loss).item().unwrap(),
            -probs[1].ln(),
            epsilon = 1e-14
        );
        let g = tape.backward(loss).unwrap();
        let g = g.wrt(logits).unwrap();
        assert_abs_diff_eq!(g[0], probs[0], epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], probs[1] - 1.0, epsilon = 1e-15);

        let mut tape = Tape::new();
        let big = tape.constant(Tensor::new(&[1, 2], vec![800.0, -800.0]).unwrap());
        let loss = tape.softmax_cross_entropy(big, &[1]).unwrap();
        assert_abs_diff_eq!(tape.value(loss).item().unwrap(), 1600.0, epsilon = 1e-9);
    }

    fn assert_grads(errors: Vec<f64>) {
        for e in errors {
            assert!(e < 1e-4, "relative error {e}");
        }
    }

    #[test]
    fn gradcheck_conv() {
        for (d, padding) in [
            (1, Padding::Centered),
            (2, Padding::Centered),
            (4, Padding::Causal),
        ] {
            let inputs = [
                random(&[2, 9, 3], 10),
                random(&[4, 3, 3], 11),
                random(&[4], 12),
            ];
            assert_grads(
                check_tape_fn(&inputs, 64, 1, |t, v| {
                    t.conv1d(v[0], v[1], v[2], d, padding)
                })
                .unwrap(),
            );
        }
    }

    #[test]
    fn gradcheck_elementwise_and_pools() {
        let x = [random(&[2, 7, 3], 20)];
        assert_grads(check_tape_fn(&x, 64, 2, |t, v| Ok(t.elu(v[0]))).unwrap());
        assert_grads(check_tape_fn(&x, 64, 2, |t, v| Ok(t.relu(v[0]))).unwrap());
        assert_grads(check_tape_fn(&x, 64, 2, |t, v| Ok(t.sigmoid(v[0]))).unwrap());
        assert_grads(check_tape_fn(&x, 64, 2, |t, v| t.max_pool1d(v[0])).unwrap());
        assert_grads(check_tape_fn(&x, 64, 2, |t, v| t.avg_pool1d(v[0])).unwrap());
        assert_grads(check_tape_fn(&x, 64, 2, |t, v| t.global_avg_pool(v[0])).unwrap());
        assert_grads(check_tape_fn(&x, 64, 2, |t, v| t.last_step(v[0])).unwrap());
        assert_grads(check_tape_fn(&x, 64, 2, |t, v| Ok(t.softmax(v[0]))).unwrap());
    }

    #[test]
    fn gradcheck_batch_norm_both_modes() {
        let inputs = [random(&[2, 5, 3], 30), random(&[3], 31), random(&[3], 32)];
        assert_grads(
            check_tape_fn(&inputs, 64, 3, |t, v| {
                Ok(t.batch_norm(v[0], v[1], v[2], BatchStats::Batch, BN_EPS)?.0)
            })
            .unwrap(),
        );
        assert_grads(
            check_tape_fn(&inputs, 64, 3, |t, v| {
                let stats = BatchStats::Running {
                    mean: vec![0.1, -0.2, 0.3],
                    var: vec![0.5, 1.5, 2.0],
                };
                Ok(t.batch_norm(v[0], v[1], v[2], stats, BN_EPS)?.0)
            })
            .unwrap(),
        );
    }

    #[test]
    fn gradcheck_linear_scale_and_core_ops() {
        let inputs = [
            random(&[2, 3, 5], 40),
            random(&[4, 5], 41),
            random(&[4], 42),
        ];
        assert_grads(check_tape_fn(&inputs, 64, 4, |t, v| t.linear(v[0], v[1], v[2])).unwrap());

        let inputs = [random(&[2, 4, 3], 43), random(&[2, 3], 44)];
        assert_grads(check_tape_fn(&inputs, 64, 4, |t, v| t.scale_channels(v[0], v[1])).unwrap());

        let inputs = [random(&[3, 4], 45), random(&[4, 2], 46)];
        assert_grads(check_tape_fn(&inputs, 64, 4, |t, v| t.matmul(v[0], v[1])).unwrap());
        let inputs = [random(&[3, 4], 47), random(&[3, 2], 48)];
        assert_grads(check_tape_fn(&inputs, 64, 4, |t, v| t.concat_last(v[0], v[1])).unwrap());
        let inputs = [random(&[3, 4], 49), random(&[3, 4], 50)];
        assert_grads(check_tape_fn(&inputs, 64, 4, |t, v| t.add(v[0], v[1])).unwrap());
        assert_grads(check_tape_fn(&inputs, 64, 4, |t, v| t.mul(v[0], v[1])).unwrap());

        let inputs = [random(&[3, 2], 51)];
        assert_grads(
            check_tape_fn(&inputs, 64, 4, |t, v| {
                t.softmax_cross_entropy(v[0], &[1, 0, 1])
            })
            .unwrap(),
        );
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        proptest! {
            #[test]
            fn softmax_normalized_and_shift_invariant(
                logits in proptest::collection::vec(-30.0f64..30.0, 1..8),
                shift in -50.0f64..50.0,
            ) {
                let n = logits.len();
                let p = softmax_rows(&logits, n);
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(p.iter().all(|&v| v > 0.0));
                let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
                let q = softmax_rows(&shifted, n);
                for (a, b) in p.iter().zip(&q) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }

            #[test]
            fn conv_preserves_length_and_pool_halves(
                len in 2usize..40, d in 1usize..9, k in 1usize..5, seed in 0u64..1000,
            ) {
                let mut tape = Tape::new();
                let x = tape.constant(random(&[len, 2], seed));
                let w = tape.constant(random(&[3, 2, k], seed + 1));
                let b = tape.constant(random(&[3], seed + 2));
                for padding in [Padding::Centered, Padding::Causal] {
                    let y = tape.conv1d(x, w, b, d, padding).unwrap();
                    prop_assert_eq!(tape.shape(y), &[len, 3]);
                    prop_assert!(tape.value(y).is_finite());
                    let p = tape.max_pool1d(y).unwrap();
                    prop_assert_eq!(tape.shape(p)[0], len / 2);
                }
            }
        }
    }
}
