//! Single-layer gated recurrent network with a softmax output.
//!
//! Row-vector convention, one step per frame:
//!
//! ```text
//! z  = sigmoid(x Wz + h Uz + bz)
//! r  = sigmoid(x Wr + h Ur + br)
//! n  = tanh(x Wn + (r * h) Un + bn)
//! h' = (1 - z) * n + z * h
//! p  = softmax(h' Wout + bout)
//! ```
//!
//! Gradients are exact (backpropagation through time) and everything runs in
//! `f64`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::ClassId;

/// Per-frame feature vectors, `T x D`, all finite.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence(Array2<f64>);

impl FrameSequence {
    pub fn new(features: Array2<f64>) -> Result<Self> {
        if features.nrows() == 0 || features.ncols() == 0 {
            return invalid("frame sequence must have at least one frame and one dimension");
        }
        if features.iter().any(|v| !v.is_finite()) {
            return invalid("frame sequence contains non-finite values");
        }
        Ok(FrameSequence(features.as_standard_layout().into_owned()))
    }

    pub fn frames(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn frame(&self, t: usize) -> ArrayView1<'_, f64> {
        self.0.row(t)
    }
}

/// Row-stochastic `T x C` class posteriors, kept in log space.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMatrix {
    log_probs: Array2<f64>,
}

impl PosteriorMatrix {
    pub fn log_probs(&self) -> &Array2<f64> {
        &self.log_probs
    }

    pub fn probs(&self) -> Array2<f64> {
        self.log_probs.mapv(f64::exp)
    }

    /// Framewise argmax of the posteriors.
    pub fn argmax(&self) -> Vec<ClassId> {
        self.log_probs
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold(0, |best, (c, &v)| if v > row[best] { c } else { best })
            })
            .collect()
    }
}

/// Frames with their class labels, each forwarded without context.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFrames {
    pub features: Array2<f64>,
    pub labels: Vec<ClassId>,
}

impl LabeledFrames {
    pub fn empty(dim: usize) -> Self {
        LabeledFrames { features: Array2::zeros((0, dim)), labels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Network weights. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    pub w_z: Array2<f64>,
    pub w_r: Array2<f64>,
    pub w_n: Array2<f64>,
    pub u_z: Array2<f64>,
    pub u_r: Array2<f64>,
    pub u_n: Array2<f64>,
    pub b_z: Array1<f64>,
    pub b_r: Array1<f64>,
    pub b_n: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

fn check_dims(input: usize, hidden: usize, classes: usize) -> Result<()> {
    if input == 0 || hidden == 0 || classes == 0 {
        return invalid(format!("network dims must be positive, got ({input}, {hidden}, {classes})"));
    }
    Ok(())
}

impl NetParams {
    pub fn zeros(input: usize, hidden: usize, classes: usize) -> Self {
        NetParams {
            w_z: Array2::zeros((input, hidden)),
            w_r: Array2::zeros((input, hidden)),
            w_n: Array2::zeros((input, hidden)),
            u_z: Array2::zeros((hidden, hidden)),
            u_r: Array2::zeros((hidden, hidden)),
            u_n: Array2::zeros((hidden, hidden)),
            b_z: Array1::zeros(hidden),
            b_r: Array1::zeros(hidden),
            b_n: Array1::zeros(hidden),
            w_out: Array2::zeros((hidden, classes)),
            b_out: Array1::zeros(classes),
        }
    }

    /// Weights uniform in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`,
    /// biases zero. Deterministic in `seed`.
    pub fn init(seed: u64, input: usize, hidden: usize, classes: usize) -> Result<Self> {
        check_dims(input, hidden, classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = NetParams::zeros(input, hidden, classes);
        for w in [
            &mut p.w_z, &mut p.w_r, &mut p.w_n, &mut p.u_z, &mut p.u_r, &mut p.u_n, &mut p.w_out,
        ] {
            let (fan_in, fan_out) = w.dim();
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            w.mapv_inplace(|_| rng.random_range(-a..=a));
        }
        Ok(p)
    }

    /// `(input, hidden, classes)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.w_z.nrows(), self.u_z.nrows(), self.w_out.ncols())
    }

    pub fn zeros_like(&self) -> Self {
        let (d, h, c) = self.dims();
        NetParams::zeros(d, h, c)
    }

    /// Tensors in checkpoint order.
    pub fn tensors(&self) -> [&[f64]; 11] {
        fn sl(a: Option<&[f64]>) -> &[f64] {
            a.expect("parameters are contiguous")
        }
        [
            sl(self.w_z.as_slice()),
            sl(self.w_r.as_slice()),
            sl(self.w_n.as_slice()),
            sl(self.u_z.as_slice()),
            sl(self.u_r.as_slice()),
            sl(self.u_n.as_slice()),
            sl(self.b_z.as_slice()),
            sl(self.b_r.as_slice()),
            sl(self.b_n.as_slice()),
            sl(self.w_out.as_slice()),
            sl(self.b_out.as_slice()),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 11] {
        fn sl(a: Option<&mut [f64]>) -> &mut [f64] {
            a.expect("parameters are contiguous")
        }
        [
            sl(self.w_z.as_slice_mut()),
            sl(self.w_r.as_slice_mut()),
            sl(self.w_n.as_slice_mut()),
            sl(self.u_z.as_slice_mut()),
            sl(self.u_r.as_slice_mut()),
            sl(self.u_n.as_slice_mut()),
            sl(self.b_z.as_slice_mut()),
            sl(self.b_r.as_slice_mut()),
            sl(self.b_n.as_slice_mut()),
            sl(self.w_out.as_slice_mut()),
            sl(self.b_out.as_slice_mut()),
        ]
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &NetParams, alpha: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= alpha);
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-wise log-softmax with max subtraction.
fn log_softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
}

struct SeqCache {
    h_prev: Array2<f64>,
    z: Array2<f64>,
    r: Array2<f64>,
    n: Array2<f64>,
    h: Array2<f64>,
}

fn check_input(params: &NetParams, x: &ArrayView2<f64>) -> Result<()> {
    let (d, _, _) = params.dims();
    if x.ncols() != d {
        return invalid(format!("feature dim {} does not match network input {d}", x.ncols()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return invalid("non-finite input feature");
    }
    Ok(())
}

fn run_sequence(params: &NetParams, x: &ArrayView2<f64>, h0: ArrayView1<f64>) -> SeqCache {
    let (_, hid, _) = params.dims();
    let frames = x.nrows();
    let xz = x.dot(&params.w_z) + &params.b_z;
    let xr = x.dot(&params.w_r) + &params.b_r;
    let xn = x.dot(&params.w_n) + &params.b_n;
    let mut cache = SeqCache {
        h_prev: Array2::zeros((frames, hid)),
        z: Array2::zeros((frames, hid)),
        r: Array2::zeros((frames, hid)),
        n: Array2::zeros((frames, hid)),
        h: Array2::zeros((frames, hid)),
    };
    let mut h = h0.to_owned();
    for t in 0..frames {
        let z = (&xz.row(t) + &h.dot(&params.u_z)).mapv(sigmoid);
        let r = (&xr.row(t) + &h.dot(&params.u_r)).mapv(sigmoid);
        let g = &r * &h;
        let n = (&xn.row(t) + &g.dot(&params.u_n)).mapv(f64::tanh);
        let h_new = Zip::from(&z)
            .and(&n)
            .and(&h)
            .map_collect(|&z, &n, &hp| (1.0 - z) * n + z * hp);
        cache.h_prev.row_mut(t).assign(&h);
        cache.z.row_mut(t).assign(&z);
        cache.r.row_mut(t).assign(&r);
        cache.n.row_mut(t).assign(&n);
        cache.h.row_mut(t).assign(&h_new);
        h = h_new;
    }
    cache
}

fn output_log_probs(params: &NetParams, h: &Array2<f64>) -> Array2<f64> {
    let mut logits = h.dot(&params.w_out) + &params.b_out;
    log_softmax_rows(&mut logits);
    logits
}

/// Causal forward pass from a zero initial state.
pub fn forward(params: &NetParams, seq: &FrameSequence) -> Result<PosteriorMatrix> {
    let (_, hid, _) = params.dims();
    let (post, _) = forward_from(params, seq.features().view(), Array1::zeros(hid).view())?;
    Ok(post)
}

/// Forward pass from hidden state `h0`; also returns the last hidden state.
pub fn forward_from(
    params: &NetParams,
    x: ArrayView2<f64>,
    h0: ArrayView1<f64>,
) -> Result<(PosteriorMatrix, Array1<f64>)> {
    check_input(params, &x)?;
    let cache = run_sequence(params, &x, h0);
    let log_probs = output_log_probs(params, &cache.h);
    let last = cache.h.row(cache.h.nrows().saturating_sub(1)).to_owned();
    Ok((PosteriorMatrix { log_probs }, last))
}

/// Cross-entropy loss and its gradient for a labeled sequence plus frames
/// replayed without context.
pub fn loss_and_gradient(
    params: &NetParams,
    seq: &FrameSequence,
    labels: &[ClassId],
    extra: &LabeledFrames,
) -> Result<(f64, NetParams)> {
    let (_, hid, _) = params.dims();
    let mut grad = params.zeros_like();
    let (loss, _) = accumulate_gradient(
        params,
        seq.features().view(),
        Array1::zeros(hid).view(),
        labels,
        extra,
        &mut grad,
    )?;
    Ok((loss, grad))
}

fn output_backward(
    params: &NetParams,
    h: &Array2<f64>,
    labels: &[ClassId],
    grad: &mut NetParams,
) -> (f64, Array2<f64>) {
    let log_p = output_log_probs(params, h);
    let mut loss = 0.0;
    let mut d_logits = log_p.mapv(f64::exp);
    for (t, &y) in labels.iter().enumerate() {
        loss -= log_p[[t, y]];
        d_logits[[t, y]] -= 1.0;
    }
    grad.w_out += &h.t().dot(&d_logits);
    grad.b_out += &d_logits.sum_axis(Axis(0));
    let dh = d_logits.dot(&params.w_out.t());
    (loss, dh)
}

/// Adds the gradient of the summed cross-entropy over `x` (starting from
/// `h0`, truncated there) and over `extra` into `grad`. Returns the loss and
/// the last hidden state of `x`.
pub fn accumulate_gradient(
    params: &NetParams,
    x: ArrayView2<f64>,
    h0: ArrayView1<f64>,
    labels: &[ClassId],
    extra: &LabeledFrames,
    grad: &mut NetParams,
) -> Result<(f64, Array1<f64>)> {
    let (_, hid, classes) = params.dims();
    check_input(params, &x)?;
    if labels.len() != x.nrows() {
        return invalid(format!("{} labels for {} frames", labels.len(), x.nrows()));
    }
    if h0.len() != hid {
        return invalid("initial hidden state has the wrong size");
    }
    if extra.features.nrows() != extra.labels.len() {
        return invalid("replayed frames and labels differ in count");
    }
    if let Some(&bad) = labels.iter().chain(&extra.labels).find(|&&c| c >= classes) {
        return invalid(format!("label {bad} out of range for {classes} classes"));
    }

    let mut loss = 0.0;
    let mut last = h0.to_owned();

    if x.nrows() > 0 {
        let cache = run_sequence(params, &x, h0);
        let (l, dh_out) = output_backward(params, &cache.h, labels, grad);
        loss += l;
        last = cache.h.row(x.nrows() - 1).to_owned();

        let frames = x.nrows();
        let mut da_z = Array2::zeros((frames, hid));
        let mut da_r = Array2::zeros((frames, hid));
        let mut da_n = Array2::zeros((frames, hid));
        let mut dh_next = Array1::<f64>::zeros(hid);
        for t in (0..frames).rev() {
            let dh = &dh_out.row(t) + &dh_next;
            let (z, r, n, hp) = (cache.z.row(t), cache.r.row(t), cache.n.row(t), cache.h_prev.row(t));
            let dan = Zip::from(&dh).and(z).and(n).map_collect(|&dh, &z, &n| dh * (1.0 - z) * (1.0 - n * n));
            let daz = Zip::from(&dh)
                .and(z)
                .and(n)
                .and(hp)
                .map_collect(|&dh, &z, &n, &hp| dh * (hp - n) * z * (1.0 - z));
            let dg = dan.dot(&params.u_n.t());
            let dar = Zip::from(&dg).and(hp).and(r).map_collect(|&dg, &hp, &r| dg * hp * r * (1.0 - r));
            let mut dh_prev = Zip::from(&dh).and(z).and(&dg).and(r).map_collect(|&dh, &z, &dg, &r| dh * z + dg * r);
            dh_prev += &dar.dot(&params.u_r.t());
            dh_prev += &daz.dot(&params.u_z.t());
            da_z.row_mut(t).assign(&daz);
            da_r.row_mut(t).assign(&dar);
            da_n.row_mut(t).assign(&dan);
            dh_next = dh_prev;
        }
        let gated = &cache.r * &cache.h_prev;
        grad.w_z += &x.t().dot(&da_z);
        grad.w_r += &x.t().dot(&da_r);
        grad.w_n += &x.t().dot(&da_n);
        grad.u_z += &cache.h_prev.t().dot(&da_z);
        grad.u_r += &cache.h_prev.t().dot(&da_r);
        grad.u_n += &gated.t().dot(&da_n);
        grad.b_z += &da_z.sum_axis(Axis(0));
        grad.b_r += &da_r.sum_axis(Axis(0));
        grad.b_n += &da_n.sum_axis(Axis(0));
    }

    if !extra.is_empty() {
        loss += replay_gradient(params, extra, grad)?;
    }
    Ok((loss, last))
}

// Frames forwarded as length-1 sequences: with a zero previous state the
// reset gate and recurrent weights drop out.
fn replay_gradient(params: &NetParams, extra: &LabeledFrames, grad: &mut NetParams) -> Result<f64> {
    let x = extra.features.view();
    check_input(params, &x)?;
    let z = (x.dot(&params.w_z) + &params.b_z).mapv(sigmoid);
    let n = (x.dot(&params.w_n) + &params.b_n).mapv(f64::tanh);
    let h = Zip::from(&z).and(&n).map_collect(|&z, &n| (1.0 - z) * n);
    let (loss, dh) = output_backward(params, &h, &extra.labels, grad);
    let da_n = Zip::from(&dh).and(&z).and(&n).map_collect(|&dh, &z, &n| dh * (1.0 - z) * (1.0 - n * n));
    let da_z = Zip::from(&dh).and(&z).and(&n).map_collect(|&dh, &z, &n| -dh * n * z * (1.0 - z));
    grad.w_z += &x.t().dot(&da_z);
    grad.w_n += &x.t().dot(&da_n);
    grad.b_z += &da_z.sum_axis(Axis(0));
    grad.b_n += &da_n.sum_axis(Axis(0));
    Ok(loss)
}

/// Loss of [`loss_and_gradient`] without the backward pass.
pub fn loss(params: &NetParams, seq: &FrameSequence, labels: &[ClassId], extra: &LabeledFrames) -> Result<f64> {
    if labels.len() != seq.frames() {
        return invalid(format!("{} labels for {} frames", labels.len(), seq.frames()));
    }
    let post = forward(params, seq)?;
    let mut total: f64 = labels.iter().enumerate().map(|(t, &y)| -post.log_probs()[[t, y]]).sum();
    for (k, &y) in extra.labels.iter().enumerate() {
        let one = FrameSequence::new(extra.features.slice(s![k..k + 1, ..]).to_owned())?;
        total -= forward(params, &one)?.log_probs()[[0, y]];
    }
    Ok(total)
}

/// Plain SGD step with gradient-norm clipping at `clip`. A non-finite
/// gradient leaves the parameters untouched.
pub fn sgd_step(params: &mut NetParams, grad: &NetParams, lr: f64, clip: f64) -> Result<()> {
    if params.dims() != grad.dims() {
        return invalid("gradient shape does not match parameters");
    }
    if !(lr > 0.0) {
        return invalid(format!("learning rate must be positive, got {lr}"));
    }
    if !grad.is_finite() {
        return invalid("non-finite gradient, update rejected");
    }
    let norm = grad.norm();
    let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
    params.add_scaled(grad, -lr * scale);
    Ok(())
}
