//! Conditional noise-prediction network.
//!
//! A residual MLP over the concatenated input `[x_noisy ‖ cond_mask ‖ temb(t)]`:
//!
//! ```text
//! h_0     = W_in x + b_in
//! u_k     = W1_k h_k + b1_k + Wt_k temb(t)
//! h_{k+1} = h_k + W2_k silu(u_k) + b2_k          k = 0..depth
//! out     = W_out silu(h_depth) + b_out
//! ```
//!
//! All parameters live in one flat `Vec<f64>` described by a [`TensorSpec`]
//! layout, which is also the on-disk order used by checkpoints. Gradients are
//! computed by explicit reverse-mode accumulation over a cached
//! [`ForwardTrace`].

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::distributions::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Encoded feature width; both the data width and the output width.
    pub d_enc: usize,
    /// Number of residual blocks.
    pub depth: usize,
    /// Hidden width of the residual stream.
    pub width: usize,
    pub time_embed_dim: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            d_enc: 0,
            depth: 4,
            width: 128,
            time_embed_dim: 32,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.d_enc == 0 || self.depth == 0 || self.width == 0 || self.time_embed_dim == 0 {
            return Err(Error::param(format!(
                "all network dimensions must be >= 1 (got {self:?})"
            )));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::param(format!(
                "time embedding dimension must be even (got {})",
                self.time_embed_dim
            )));
        }
        Ok(())
    }

    /// Width of the assembled network input.
    pub fn input_width(&self) -> usize {
        2 * self.d_enc + self.time_embed_dim
    }

    pub fn layout(&self) -> Vec<TensorSpec> {
        let mut specs = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, rows: usize, cols: usize| {
            specs.push(TensorSpec {
                name,
                rows,
                cols,
                offset,
            });
            offset += rows * cols;
        };
        let (h, e) = (self.width, self.time_embed_dim);
        push("input.weight".into(), h, self.input_width());
        push("input.bias".into(), 1, h);
        for k in 0..self.depth {
            push(format!("block{k}.fc1.weight"), h, h);
            push(format!("block{k}.fc1.bias"), 1, h);
            push(format!("block{k}.time.weight"), h, e);
            push(format!("block{k}.fc2.weight"), h, h);
            push(format!("block{k}.fc2.bias"), 1, h);
        }
        push("output.weight".into(), self.d_enc, h);
        push("output.bias".into(), 1, self.d_enc);
        specs
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(TensorSpec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    fn is_bias(&self) -> bool {
        self.name.ends_with(".bias")
    }
}

/// Sinusoidal embedding `[sin(t w_0), cos(t w_0), sin(t w_1), cos(t w_1), ...]`
/// with `w_i = 10000^(-2i/dim)`.
pub fn time_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(Error::param("time embedding needs t >= 1"));
    }
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::param(format!(
            "time embedding dimension must be even and positive (got {dim})"
        )));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-((2 * i) as f64) / dim as f64);
        let arg = t as f64 * freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}

/// One row of network input.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningInput {
    /// Clean observed values at conditioning positions, diffused values at
    /// target positions.
    pub x_noisy_full: Vec<f64>,
    /// 1 = conditioning (observed), 0 = generation target.
    pub cond_mask: Vec<f64>,
    pub t: usize,
}

/// A batch of inputs; row `i` of `x` and `mask` goes with `t[i]`.
#[derive(Debug, Clone)]
pub struct ConditioningBatch {
    pub x: Array2<f64>,
    pub mask: Array2<f64>,
    pub t: Vec<usize>,
}

impl ConditioningBatch {
    pub fn from_rows(rows: &[ConditioningInput]) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.x_noisy_full.len());
        let mut x = Array2::zeros((rows.len(), d));
        let mut mask = Array2::zeros((rows.len(), d));
        for (i, r) in rows.iter().enumerate() {
            if r.x_noisy_full.len() != d || r.cond_mask.len() != d {
                return Err(Error::Shape {
                    what: format!("batch row {i}"),
                    expected: d,
                    actual: r.x_noisy_full.len().max(r.cond_mask.len()),
                });
            }
            x.row_mut(i).assign(&ArrayView1::from(&r.x_noisy_full));
            mask.row_mut(i).assign(&ArrayView1::from(&r.cond_mask));
        }
        Ok(Self {
            x,
            mask,
            t: rows.iter().map(|r| r.t).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Anything that predicts the injected noise for a batch at a shared timestep.
///
/// The sampler only needs this contract; tests plug in analytic predictors.
pub trait NoiseModel: Sync {
    fn d_enc(&self) -> usize;

    fn predict(&self, x: ArrayView2<f64>, mask: ArrayView2<f64>, t: usize) -> Result<Array2<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisePredictor {
    arch: Architecture,
    layout: Vec<TensorSpec>,
    params: Vec<f64>,
    seed: u64,
}

/// Activations cached by [`NoisePredictor::forward_trace`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    arch: Architecture,
    x_in: Array2<f64>,
    temb: Array2<f64>,
    /// Residual stream `h_0..=h_depth`.
    hidden: Vec<Array2<f64>>,
    /// Block pre-activations `u_k`.
    pre: Vec<Array2<f64>>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.x_in.nrows()
    }
}

/// Flat gradient buffer in parameter layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub values: Vec<f64>,
}

impl Gradients {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn check_finite(a: &Array2<f64>, layer: usize) -> Result<()> {
    if let Some(v) = a.iter().find(|v| !v.is_finite()) {
        return Err(Error::numeric(
            format!("layer {layer}"),
            format!("non-finite activation {v}"),
        ));
    }
    Ok(())
}

/// `y (B x out) = x (B x in) · wᵀ`, with `w` stored `out x in`.
fn affine(x: &ArrayView2<f64>, w: &ArrayView2<f64>, bias: Option<ArrayView1<f64>>) -> Array2<f64> {
    let mut y = Array2::zeros((x.nrows(), w.nrows()));
    general_mat_mul(1.0, x, &w.t(), 0.0, &mut y);
    if let Some(b) = bias {
        y += &b;
    }
    y
}

impl NoisePredictor {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let mut params = vec![0.0; layout.iter().map(TensorSpec::len).sum()];
        let mut rng = rng::stream(seed, Domain::Init, 0);
        for spec in &layout {
            if spec.is_bias() {
                continue;
            }
            let bound = 1.0 / (spec.cols as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            for p in &mut params[spec.range()] {
                *p = dist.sample(&mut rng);
            }
        }
        Ok(Self {
            arch,
            layout,
            params,
            seed,
        })
    }

    pub fn from_parts(arch: Architecture, params: Vec<f64>, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let expected: usize = layout.iter().map(TensorSpec::len).sum();
        if params.len() != expected {
            return Err(Error::Shape {
                what: "parameter vector".into(),
                expected,
                actual: params.len(),
            });
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::numeric(
                layout_name(&layout, i).to_string(),
                "non-finite parameter",
            ));
        }
        Ok(Self {
            arch,
            layout,
            params,
            seed,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &[TensorSpec] {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Name of the tensor holding flat parameter `index`.
    pub fn tensor_name(&self, index: usize) -> &str {
        layout_name(&self.layout, index)
    }

    fn view(&self, idx: usize) -> ArrayView2<'_, f64> {
        let spec = &self.layout[idx];
        ArrayView2::from_shape((spec.rows, spec.cols), &self.params[spec.range()])
            .expect("layout matches parameter buffer")
    }

    fn bias(&self, idx: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[self.layout[idx].range()])
    }

    // Layout indices.
    fn block_base(k: usize) -> usize {
        2 + 5 * k
    }

    fn output_base(&self) -> usize {
        2 + 5 * self.arch.depth
    }

    fn assemble(&self, batch: &ConditioningBatch) -> Result<(Array2<f64>, Array2<f64>)> {
        let d = self.arch.d_enc;
        if batch.x.ncols() != d {
            return Err(Error::Shape {
                what: "input x_noisy_full width".into(),
                expected: d,
                actual: batch.x.ncols(),
            });
        }
        if batch.mask.dim() != batch.x.dim() {
            return Err(Error::Shape {
                what: "cond_mask width".into(),
                expected: d,
                actual: batch.mask.ncols(),
            });
        }
        if batch.t.len() != batch.x.nrows() {
            return Err(Error::Shape {
                what: "timestep count".into(),
                expected: batch.x.nrows(),
                actual: batch.t.len(),
            });
        }
        let e = self.arch.time_embed_dim;
        let n = batch.len();
        let mut x_in = Array2::zeros((n, self.arch.input_width()));
        let mut temb = Array2::zeros((n, e));
        x_in.slice_mut(s![.., 0..d]).assign(&batch.x);
        x_in.slice_mut(s![.., d..2 * d]).assign(&batch.mask);
        let mut cached: Option<(usize, Vec<f64>)> = None;
        for (i, &t) in batch.t.iter().enumerate() {
            let emb = match &cached {
                Some((ct, emb)) if *ct == t => emb.clone(),
                _ => {
                    let emb = time_embedding(t, e)?;
                    cached = Some((t, emb.clone()));
                    emb
                }
            };
            let emb = ArrayView1::from(&emb);
            temb.row_mut(i).assign(&emb);
            x_in.slice_mut(s![i, 2 * d..]).assign(&emb);
        }
        Ok((x_in, temb))
    }

    /// Predicted noise for one row.
    pub fn forward(&self, input: &ConditioningInput) -> Result<Vec<f64>> {
        let batch = ConditioningBatch::from_rows(std::slice::from_ref(input))?;
        Ok(self.forward_batch(&batch)?.row(0).to_vec())
    }

    pub fn forward_batch(&self, batch: &ConditioningBatch) -> Result<Array2<f64>> {
        self.forward_trace(batch).map(|(out, _)| out)
    }

    /// Forward pass that also returns the activations needed by [`Self::backward`].
    pub fn forward_trace(&self, batch: &ConditioningBatch) -> Result<(Array2<f64>, ForwardTrace)> {
        let (x_in, temb) = self.assemble(batch)?;
        let mut h = affine(&x_in.view(), &self.view(0), Some(self.bias(1)));
        check_finite(&h, 0)?;
        let mut hidden = Vec::with_capacity(self.arch.depth + 1);
        let mut pre = Vec::with_capacity(self.arch.depth);
        for k in 0..self.arch.depth {
            let b = Self::block_base(k);
            let mut u = affine(&h.view(), &self.view(b), Some(self.bias(b + 1)));
            general_mat_mul(1.0, &temb, &self.view(b + 2).t(), 1.0, &mut u);
            let act = u.mapv(silu);
            let mut next = h.clone();
            general_mat_mul(1.0, &act, &self.view(b + 3).t(), 1.0, &mut next);
            next += &self.bias(b + 4);
            check_finite(&next, k + 1)?;
            hidden.push(h);
            pre.push(u);
            h = next;
        }
        let o = self.output_base();
        let out = affine(&h.mapv(silu).view(), &self.view(o), Some(self.bias(o + 1)));
        check_finite(&out, self.arch.depth + 1)?;
        hidden.push(h);
        Ok((
            out,
            ForwardTrace {
                arch: self.arch,
                x_in,
                temb,
                hidden,
                pre,
            },
        ))
    }

    /// Gradients of `sum_ij loss_grad[i, j] * out[i, j]` with respect to every
    /// parameter, i.e. the parameter gradient of any scalar loss whose output
    /// gradient is `loss_grad`.
    pub fn backward(&self, trace: &ForwardTrace, loss_grad: ArrayView2<f64>) -> Result<Gradients> {
        if trace.arch != self.arch || trace.hidden.len() != self.arch.depth + 1 {
            return Err(Error::State(
                "backward called with a trace from a different network".into(),
            ));
        }
        if loss_grad.dim() != (trace.batch_size(), self.arch.d_enc) {
            return Err(Error::State(format!(
                "loss gradient shape {:?} does not match the traced forward pass ({}, {})",
                loss_grad.dim(),
                trace.batch_size(),
                self.arch.d_enc
            )));
        }
        let mut grads = Gradients::zeros(self.params.len());
        let o = self.output_base();

        let h_last = &trace.hidden[self.arch.depth];
        let g_last = h_last.mapv(silu);
        self.acc_weight(&mut grads, o, &loss_grad, &g_last.view());
        self.acc_bias(&mut grads, o + 1, &loss_grad);
        let mut dh = loss_grad.dot(&self.view(o));
        dh.zip_mut_with(h_last, |d, &x| *d *= silu_grad(x));

        for k in (0..self.arch.depth).rev() {
            let b = Self::block_base(k);
            let u = &trace.pre[k];
            let act = u.mapv(silu);
            self.acc_weight(&mut grads, b + 3, &dh.view(), &act.view());
            self.acc_bias(&mut grads, b + 4, &dh.view());
            let mut du = dh.dot(&self.view(b + 3));
            du.zip_mut_with(u, |d, &x| *d *= silu_grad(x));
            self.acc_weight(&mut grads, b, &du.view(), &trace.hidden[k].view());
            self.acc_bias(&mut grads, b + 1, &du.view());
            self.acc_weight(&mut grads, b + 2, &du.view(), &trace.temb.view());
            general_mat_mul(1.0, &du, &self.view(b), 1.0, &mut dh);
        }

        self.acc_weight(&mut grads, 0, &dh.view(), &trace.x_in.view());
        self.acc_bias(&mut grads, 1, &dh.view());
        Ok(grads)
    }

    fn acc_weight(&self, grads: &mut Gradients, idx: usize, dy: &ArrayView2<f64>, x: &ArrayView2<f64>) {
        let spec = &self.layout[idx];
        let mut gw = ArrayViewMut2::from_shape((spec.rows, spec.cols), &mut grads.values[spec.range()])
            .expect("layout matches gradient buffer");
        general_mat_mul(1.0, &dy.t(), x, 1.0, &mut gw);
    }

    fn acc_bias(&self, grads: &mut Gradients, idx: usize, dy: &ArrayView2<f64>) {
        let spec = &self.layout[idx];
        for (g, s) in grads.values[spec.range()]
            .iter_mut()
            .zip(dy.sum_axis(Axis(0)).iter())
        {
            *g += s;
        }
    }
}

fn layout_name(layout: &[TensorSpec], index: usize) -> &str {
    layout
        .iter()
        .find(|s| s.range().contains(&index))
        .map_or("<out of range>", |s| s.name.as_str())
}

impl NoiseModel for NoisePredictor {
    fn d_enc(&self) -> usize {
        self.arch.d_enc
    }

    fn predict(&self, x: ArrayView2<f64>, mask: ArrayView2<f64>, t: usize) -> Result<Array2<f64>> {
        let batch = ConditioningBatch {
            x: x.to_owned(),
            mask: mask.to_owned(),
            t: vec![t; x.nrows()],
        };
        self.forward_batch(&batch)
    }
}
