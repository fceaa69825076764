//! Feed-forward and minimal convolutional networks with hand-written
//! backpropagation.
//!
//! Parameters are exposed as one flat f64 vector whose layout is fixed at
//! construction; the [`ParameterRegistry`] records, for every scalar
//! parameter, which group it belongs to at each granularity level
//! (global / layer / filter / unit / parameter). Those partitions are what
//! the hierarchical learning-rate machinery operates on.
//!
//! Dense layers fold their bias into the weight matrix as an extra input
//! row, so a "layer" group naturally includes its biases. Conv layers are
//! stride-1, valid-padding only; they exist to exercise filter-wise
//! grouping, not to chase accuracy.

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// Softmax + mean cross-entropy over the batch (classification head).
    SoftmaxCrossEntropy,
    /// (1/2B) sum of squared residuals, so the bias gradient is the mean residual.
    HalfMse,
}

#[derive(Debug, Clone)]
pub enum Targets {
    Labels(Vec<usize>),
    Values(Tensor),
}

/// Loss with the optional model-parameter L2 penalty split out.
#[derive(Debug, Clone, Copy)]
pub struct LossValue {
    pub loss: f64,
    pub l2_penalty: f64,
}

impl LossValue {
    pub fn total(&self) -> f64 {
        self.loss + self.l2_penalty
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupingScheme {
    Global,
    Layer,
    Filter,
    Unit,
    Parameter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceMode {
    Sum,
    Mean,
}

enum Layer {
    Dense {
        /// (n_in + 1) x n_out, bias in the last row.
        w: Tensor,
        input: Option<Tensor>,
    },
    Conv2d {
        /// [filters, channels, kh, kw]
        filters: Tensor,
        bias: Tensor,
        in_c: usize,
        in_h: usize,
        in_w: usize,
        input: Option<Tensor>,
    },
    Act {
        kind: Activation,
        output: Option<Tensor>,
    },
}

/// Static partition of the flat parameter vector into groups, one partition
/// per grouping scheme. Memberships never change after construction.
#[derive(Debug, Clone)]
pub struct ParameterRegistry {
    n_params: usize,
    layer_of: Vec<usize>,
    unit_of: Vec<usize>,
    filter_of: Option<Vec<usize>>,
    n_layers: usize,
    n_units: usize,
    n_filters: usize,
}

impl ParameterRegistry {
    /// Synthetic registry for raw parameter vectors (test surfaces like
    /// quadratic bowls): consecutive chunks act as layers, every scalar is
    /// its own unit.
    pub fn from_layer_sizes(sizes: &[usize]) -> Self {
        let n_params: usize = sizes.iter().sum();
        let mut layer_of = Vec::with_capacity(n_params);
        for (l, &s) in sizes.iter().enumerate() {
            layer_of.extend(std::iter::repeat(l).take(s));
        }
        ParameterRegistry {
            n_params,
            layer_of,
            unit_of: (0..n_params).collect(),
            filter_of: None,
            n_layers: sizes.len(),
            n_units: n_params,
            n_filters: 0,
        }
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn n_groups(&self, scheme: GroupingScheme) -> Result<usize> {
        Ok(match scheme {
            GroupingScheme::Global => 1,
            GroupingScheme::Layer => self.n_layers,
            GroupingScheme::Unit => self.n_units,
            GroupingScheme::Parameter => self.n_params,
            GroupingScheme::Filter => {
                self.filter_ids()?;
                self.n_filters
            }
        })
    }

    fn filter_ids(&self) -> Result<&[usize]> {
        self.filter_of.as_deref().ok_or_else(|| {
            Error::Config("filter-wise grouping requires an all-conv network".into())
        })
    }

    /// Group id of scalar parameter `p` under `scheme`.
    pub fn group_of(&self, p: usize, scheme: GroupingScheme) -> Result<usize> {
        Ok(match scheme {
            GroupingScheme::Global => 0,
            GroupingScheme::Layer => self.layer_of[p],
            GroupingScheme::Unit => self.unit_of[p],
            GroupingScheme::Parameter => p,
            GroupingScheme::Filter => self.filter_ids()?[p],
        })
    }

    pub fn group_sizes(&self, scheme: GroupingScheme) -> Result<Vec<usize>> {
        let mut sizes = vec![0usize; self.n_groups(scheme)?];
        for p in 0..self.n_params {
            sizes[self.group_of(p, scheme)?] += 1;
        }
        Ok(sizes)
    }

    /// Per-group totals or means of a per-parameter vector.
    pub fn group_reduce(
        &self,
        values: &[f64],
        scheme: GroupingScheme,
        mode: ReduceMode,
    ) -> Result<Vec<f64>> {
        if values.len() != self.n_params {
            return Err(Error::Dimension(format!(
                "group_reduce got {} values for {} parameters",
                values.len(),
                self.n_params
            )));
        }
        let n = self.n_groups(scheme)?;
        let mut out = vec![0.0; n];
        let mut counts = vec![0usize; n];
        for (p, &v) in values.iter().enumerate() {
            let g = self.group_of(p, scheme)?;
            out[g] += v;
            counts[g] += 1;
        }
        if mode == ReduceMode::Mean {
            for (o, &c) in out.iter_mut().zip(&counts) {
                *o /= c as f64;
            }
        }
        Ok(out)
    }

    /// Maps each `fine` group to its unique containing `coarse` group.
    /// Errors if the two partitions do not nest.
    pub fn parent_map(
        &self,
        fine: GroupingScheme,
        coarse: GroupingScheme,
    ) -> Result<Vec<usize>> {
        let mut map = vec![usize::MAX; self.n_groups(fine)?];
        for p in 0..self.n_params {
            let f = self.group_of(p, fine)?;
            let c = self.group_of(p, coarse)?;
            if map[f] == usize::MAX {
                map[f] = c;
            } else if map[f] != c {
                return Err(Error::Config(format!(
                    "{fine:?} group {f} spans multiple {coarse:?} groups"
                )));
            }
        }
        Ok(map)
    }
}

pub struct Network {
    layers: Vec<Layer>,
    loss: Loss,
    /// Coefficient of the model-parameter L2 penalty (0 disables it).
    pub l2: f64,
    registry: ParameterRegistry,
    // forward caches
    cached_probs_or_residual: Option<Tensor>,
    cached_batch: Option<usize>,
}

pub struct NetworkBuilder {
    layers: Vec<Layer>,
    rng: Rng,
}

impl NetworkBuilder {
    pub fn new(seed: u64) -> Self {
        NetworkBuilder { layers: Vec::new(), rng: Rng::new(seed) }
    }

    pub fn dense(mut self, n_in: usize, n_out: usize) -> Self {
        let mut w = Tensor::zeros(vec![n_in + 1, n_out]);
        // He-style scaling off the fan-in; bias row stays zero.
        let std = (2.0 / n_in as f64).sqrt();
        for i in 0..n_in {
            for j in 0..n_out {
                let v = self.rng.normal() * std;
                w.set(i, j, v);
            }
        }
        self.layers.push(Layer::Dense { w, input: None });
        self
    }

    pub fn conv2d(
        mut self,
        in_c: usize,
        in_h: usize,
        in_w: usize,
        n_filters: usize,
        kh: usize,
        kw: usize,
    ) -> Self {
        let mut filters = Tensor::zeros(vec![n_filters, in_c, kh, kw]);
        let std = (2.0 / (in_c * kh * kw) as f64).sqrt();
        self.rng.fill_normal(&mut filters, std);
        let bias = Tensor::zeros(vec![n_filters]);
        self.layers.push(Layer::Conv2d { filters, bias, in_c, in_h, in_w, input: None });
        self
    }

    pub fn activation(mut self, kind: Activation) -> Self {
        self.layers.push(Layer::Act { kind, output: None });
        self
    }

    pub fn build(self, loss: Loss) -> Network {
        let registry = build_registry(&self.layers);
        Network {
            layers: self.layers,
            loss,
            l2: 0.0,
            registry,
            cached_probs_or_residual: None,
            cached_batch: None,
        }
    }
}

fn build_registry(layers: &[Layer]) -> ParameterRegistry {
    let mut layer_of = Vec::new();
    let mut unit_of = Vec::new();
    let mut filter_of: Vec<usize> = Vec::new();
    let mut all_conv = true;
    let mut li = 0usize;
    let mut unit_base = 0usize;
    let mut filter_base = 0usize;
    for layer in layers {
        match layer {
            Layer::Dense { w, .. } => {
                all_conv = false;
                let (rows, cols) = (w.rows(), w.cols());
                for _r in 0..rows {
                    for c in 0..cols {
                        layer_of.push(li);
                        unit_of.push(unit_base + c); // group by output neuron
                    }
                }
                unit_base += cols;
                li += 1;
            }
            Layer::Conv2d { filters, bias, .. } => {
                let f = filters.shape()[0];
                let per_filter = filters.len() / f;
                for fi in 0..f {
                    for _ in 0..per_filter {
                        layer_of.push(li);
                        unit_of.push(unit_base + fi);
                        filter_of.push(filter_base + fi);
                    }
                }
                for fi in 0..bias.len() {
                    layer_of.push(li);
                    unit_of.push(unit_base + fi);
                    filter_of.push(filter_base + fi);
                }
                unit_base += f;
                filter_base += f;
                li += 1;
            }
            Layer::Act { .. } => {}
        }
    }
    let n_params = layer_of.len();
    ParameterRegistry {
        n_params,
        layer_of,
        unit_of,
        filter_of: if all_conv && filter_base > 0 { Some(filter_of) } else { None },
        n_layers: li,
        n_units: unit_base,
        n_filters: filter_base,
    }
}

impl Network {
    /// Plain FFNN: dense layers with the given activation between them,
    /// none after the last.
    pub fn ffnn(sizes: &[usize], activation: Activation, loss: Loss, seed: u64) -> Network {
        let mut b = NetworkBuilder::new(seed);
        for i in 0..sizes.len() - 1 {
            b = b.dense(sizes[i], sizes[i + 1]);
            if i + 2 < sizes.len() {
                b = b.activation(activation);
            }
        }
        b.build(loss)
    }

    pub fn builder(seed: u64) -> NetworkBuilder {
        NetworkBuilder::new(seed)
    }

    pub fn registry(&self) -> &ParameterRegistry {
        &self.registry
    }

    pub fn n_params(&self) -> usize {
        self.registry.n_params
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for layer in &self.layers {
            match layer {
                Layer::Dense { w, .. } => out.extend_from_slice(w.data()),
                Layer::Conv2d { filters, bias, .. } => {
                    out.extend_from_slice(filters.data());
                    out.extend_from_slice(bias.data());
                }
                Layer::Act { .. } => {}
            }
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                params.len()
            )));
        }
        let mut off = 0;
        for layer in &mut self.layers {
            match layer {
                Layer::Dense { w, .. } => {
                    let n = w.len();
                    w.data_mut().copy_from_slice(&params[off..off + n]);
                    off += n;
                }
                Layer::Conv2d { filters, bias, .. } => {
                    let n = filters.len();
                    filters.data_mut().copy_from_slice(&params[off..off + n]);
                    off += n;
                    let n = bias.len();
                    bias.data_mut().copy_from_slice(&params[off..off + n]);
                    off += n;
                }
                Layer::Act { .. } => {}
            }
        }
        Ok(())
    }

    /// Logits (or regression outputs) for a batch; caches activations for
    /// a following `backward`.
    pub fn predict(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = match layer {
                Layer::Dense { w, input } => {
                    let n_in = w.rows() - 1;
                    if cur.shape().len() != 2 || cur.cols() != n_in {
                        return Err(Error::Dimension(format!(
                            "dense layer expects {} inputs, got shape {:?}",
                            n_in,
                            cur.shape()
                        )));
                    }
                    let out = dense_forward(&cur, w);
                    *input = Some(cur);
                    out
                }
                Layer::Conv2d { filters, bias, in_c, in_h, in_w, input } => {
                    let want = *in_c * *in_h * *in_w;
                    if cur.shape().len() != 2 || cur.cols() != want {
                        return Err(Error::Dimension(format!(
                            "conv layer expects {} inputs, got shape {:?}",
                            want,
                            cur.shape()
                        )));
                    }
                    let out = conv_forward(&cur, filters, bias, *in_c, *in_h, *in_w);
                    *input = Some(cur);
                    out
                }
                Layer::Act { kind, output } => {
                    let data = match kind {
                        Activation::Relu => cur.data().iter().map(|&v| v.max(0.0)).collect(),
                        Activation::Tanh => cur.data().iter().map(|v| v.tanh()).collect(),
                    };
                    let out = Tensor::new(cur.shape().to_vec(), data).unwrap();
                    *output = Some(out.clone());
                    out
                }
            };
        }
        cur.check_finite("forward activations")?;
        Ok(cur)
    }

    pub fn forward(&mut self, x: &Tensor, targets: &Targets) -> Result<LossValue> {
        let out = self.predict(x)?;
        let batch = out.rows();
        let k = out.cols();
        let loss = match (&self.loss, targets) {
            (Loss::SoftmaxCrossEntropy, Targets::Labels(labels)) => {
                if labels.len() != batch {
                    return Err(Error::Dimension("label count != batch".into()));
                }
                let mut probs = Tensor::zeros(vec![batch, k]);
                let mut total = 0.0;
                for b in 0..batch {
                    let row = &out.data()[b * k..(b + 1) * k];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for j in 0..k {
                        let e = (row[j] - max).exp();
                        probs.set(b, j, e);
                        z += e;
                    }
                    for j in 0..k {
                        let p = probs.at(b, j) / z;
                        probs.set(b, j, p);
                    }
                    let y = labels[b];
                    if y >= k {
                        return Err(Error::Dimension(format!("label {y} out of range {k}")));
                    }
                    total -= probs.at(b, y).max(1e-300).ln();
                }
                // residual for backprop: (p - onehot)/B
                for (b, &y) in labels.iter().enumerate() {
                    probs.set(b, y, probs.at(b, y) - 1.0);
                }
                let grad = probs.scale(1.0 / batch as f64);
                self.cached_probs_or_residual = Some(grad);
                total / batch as f64
            }
            (Loss::HalfMse, Targets::Values(t)) => {
                if t.shape() != out.shape() {
                    return Err(Error::Dimension("target shape != output shape".into()));
                }
                let resid = out.sub(t)?;
                let loss = resid.dot(&resid)? / (2.0 * batch as f64);
                self.cached_probs_or_residual = Some(resid.scale(1.0 / batch as f64));
                loss
            }
            _ => return Err(Error::Config("loss head does not match target kind".into())),
        };
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss}")));
        }
        self.cached_batch = Some(batch);
        let l2_penalty = if self.l2 > 0.0 {
            self.l2 * self.params_flat().iter().map(|p| p * p).sum::<f64>()
        } else {
            0.0
        };
        Ok(LossValue { loss, l2_penalty })
    }

    /// Gradient of the most recent `forward` loss with respect to every
    /// registered parameter, flattened in registry order.
    pub fn backward(&mut self) -> Result<Vec<f64>> {
        let mut delta = self
            .cached_probs_or_residual
            .take()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        let mut grads_rev: Vec<Vec<f64>> = Vec::new();
        for layer in self.layers.iter_mut().rev() {
            match layer {
                Layer::Dense { w, input } => {
                    let x = input
                        .as_ref()
                        .ok_or_else(|| Error::State("missing dense cache".into()))?;
                    let (dw, dx) = dense_backward(x, w, &delta);
                    grads_rev.push(dw);
                    delta = dx;
                }
                Layer::Conv2d { filters, bias, in_c, in_h, in_w, input } => {
                    let x = input
                        .as_ref()
                        .ok_or_else(|| Error::State("missing conv cache".into()))?;
                    let (dfilters, dbias, dx) =
                        conv_backward(x, filters, bias, *in_c, *in_h, *in_w, &delta);
                    let mut g = dfilters;
                    g.extend_from_slice(&dbias);
                    grads_rev.push(g);
                    delta = dx;
                }
                Layer::Act { kind, output } => {
                    let out = output
                        .as_ref()
                        .ok_or_else(|| Error::State("missing activation cache".into()))?;
                    let data: Vec<f64> = match kind {
                        Activation::Relu => delta
                            .data()
                            .iter()
                            .zip(out.data())
                            .map(|(&d, &o)| if o > 0.0 { d } else { 0.0 })
                            .collect(),
                        Activation::Tanh => delta
                            .data()
                            .iter()
                            .zip(out.data())
                            .map(|(&d, &o)| d * (1.0 - o * o))
                            .collect(),
                    };
                    delta = Tensor::new(delta.shape().to_vec(), data).unwrap();
                }
            }
        }
        let mut flat = Vec::with_capacity(self.n_params());
        for g in grads_rev.into_iter().rev() {
            flat.extend(g);
        }
        if self.l2 > 0.0 {
            for (g, p) in flat.iter_mut().zip(self.params_flat()) {
                *g += 2.0 * self.l2 * p;
            }
        }
        if let Some(bad) = flat.iter().find(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient {bad}")));
        }
        Ok(flat)
    }
}

fn dense_forward(x: &Tensor, w: &Tensor) -> Tensor {
    let (batch, n_in) = (x.rows(), x.cols());
    let n_out = w.cols();
    let mut out = Tensor::zeros(vec![batch, n_out]);
    for b in 0..batch {
        let x_row = &x.data()[b * n_in..(b + 1) * n_in];
        let o = &mut out.data_mut()[b * n_out..(b + 1) * n_out];
        // bias row first, then accumulate the product
        o.copy_from_slice(&w.data()[n_in * n_out..(n_in + 1) * n_out]);
        for (i, &xv) in x_row.iter().enumerate() {
            let w_row = &w.data()[i * n_out..(i + 1) * n_out];
            for (ov, &wv) in o.iter_mut().zip(w_row) {
                *ov += xv * wv;
            }
        }
    }
    out
}

fn dense_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Vec<f64>, Tensor) {
    let (batch, n_in) = (x.rows(), x.cols());
    let n_out = w.cols();
    let mut dw = vec![0.0; (n_in + 1) * n_out];
    let mut dx = Tensor::zeros(vec![batch, n_in]);
    for b in 0..batch {
        let x_row = &x.data()[b * n_in..(b + 1) * n_in];
        let d_row = &dy.data()[b * n_out..(b + 1) * n_out];
        for (i, &xv) in x_row.iter().enumerate() {
            let dw_row = &mut dw[i * n_out..(i + 1) * n_out];
            for (dwv, &dv) in dw_row.iter_mut().zip(d_row) {
                *dwv += xv * dv;
            }
        }
        let dbias = &mut dw[n_in * n_out..(n_in + 1) * n_out];
        for (dbv, &dv) in dbias.iter_mut().zip(d_row) {
            *dbv += dv;
        }
        let dx_row = &mut dx.data_mut()[b * n_in..(b + 1) * n_in];
        for i in 0..n_in {
            let w_row = &w.data()[i * n_out..(i + 1) * n_out];
            dx_row[i] = w_row.iter().zip(d_row).map(|(&wv, &dv)| wv * dv).sum();
        }
    }
    (dw, dx)
}

fn conv_forward(
    x: &Tensor,
    filters: &Tensor,
    bias: &Tensor,
    c: usize,
    h: usize,
    w: usize,
) -> Tensor {
    let batch = x.rows();
    let f = filters.shape()[0];
    let (kh, kw) = (filters.shape()[2], filters.shape()[3]);
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut out = Tensor::zeros(vec![batch, f * oh * ow]);
    for b in 0..batch {
        let img = &x.data()[b * c * h * w..(b + 1) * c * h * w];
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.data()[fi];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iv = img[ci * h * w + (oy + ky) * w + (ox + kx)];
                                let fv = filters.data()
                                    [((fi * c + ci) * kh + ky) * kw + kx];
                                acc += iv * fv;
                            }
                        }
                    }
                    out.data_mut()[b * f * oh * ow + fi * oh * ow + oy * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &Tensor,
    filters: &Tensor,
    _bias: &Tensor,
    c: usize,
    h: usize,
    w: usize,
    dy: &Tensor,
) -> (Vec<f64>, Vec<f64>, Tensor) {
    let batch = x.rows();
    let f = filters.shape()[0];
    let (kh, kw) = (filters.shape()[2], filters.shape()[3]);
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut dfilters = vec![0.0; filters.len()];
    let mut dbias = vec![0.0; f];
    let mut dx = Tensor::zeros(vec![batch, c * h * w]);
    for b in 0..batch {
        let img = &x.data()[b * c * h * w..(b + 1) * c * h * w];
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let d = dy.data()[b * f * oh * ow + fi * oh * ow + oy * ow + ox];
                    dbias[fi] += d;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let ii = ci * h * w + (oy + ky) * w + (ox + kx);
                                let wi = ((fi * c + ci) * kh + ky) * kw + kx;
                                dfilters[wi] += d * img[ii];
                                dx.data_mut()[b * c * h * w + ii] +=
                                    d * filters.data()[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    (dfilters, dbias, dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_diff(net: &mut Network, x: &Tensor, t: &Targets, eps: f64) -> Vec<f64> {
        let base = net.params_flat();
        let mut fd = vec![0.0; base.len()];
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += eps;
            net.set_params_flat(&p).unwrap();
            let fp = net.forward(x, t).unwrap().total();
            p[i] = base[i] - eps;
            net.set_params_flat(&p).unwrap();
            let fm = net.forward(x, t).unwrap().total();
            fd[i] = (fp - fm) / (2.0 * eps);
        }
        net.set_params_flat(&base).unwrap();
        fd
    }

    #[test]
    fn uniform_logits_loss_is_ln_k() {
        let mut net = Network::ffnn(&[4, 10], Activation::Relu, Loss::SoftmaxCrossEntropy, 1);
        let zeros = vec![0.0; net.n_params()];
        net.set_params_flat(&zeros).unwrap();
        let x = Tensor::new(vec![3, 4], vec![0.5; 12]).unwrap();
        let t = Targets::Labels(vec![0, 3, 9]);
        let lv = net.forward(&x, &t).unwrap();
        assert!((lv.loss - 10.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_linear_mse_to_zero_targets() {
        let mut net = Network::ffnn(&[3, 2], Activation::Relu, Loss::HalfMse, 1);
        net.set_params_flat(&vec![0.0; net.n_params()]).unwrap();
        let x = Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap();
        let t = Targets::Values(Tensor::zeros(vec![2, 2]));
        assert_eq!(net.forward(&x, &t).unwrap().loss, 0.0);
        // perfect fit: gradients all zero
        let g = net.backward().unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_matches_scalar_reimplementation() {
        // independent scalar-by-scalar oracle for a 2-3-2 tanh net with softmax head
        let mut net = Network::ffnn(&[2, 3, 2], Activation::Tanh, Loss::SoftmaxCrossEntropy, 9);
        let p = net.params_flat();
        let x = Tensor::new(vec![1, 2], vec![0.3, -0.7]).unwrap();
        let lv = net.forward(&x, &Targets::Labels(vec![1])).unwrap();

        let w1 = |i: usize, j: usize| p[i * 3 + j]; // 3x3 incl bias row
        let w2 = |i: usize, j: usize| p[9 + i * 2 + j]; // 4x2 incl bias row
        let mut hidden = [0.0f64; 3];
        for (j, hj) in hidden.iter_mut().enumerate() {
            *hj = (0.3 * w1(0, j) + (-0.7) * w1(1, j) + w1(2, j)).tanh();
        }
        let mut logits = [0.0f64; 2];
        for (j, lj) in logits.iter_mut().enumerate() {
            *lj = hidden[0] * w2(0, j) + hidden[1] * w2(1, j) + hidden[2] * w2(2, j) + w2(3, j);
        }
        let m = logits[0].max(logits[1]);
        let z = (logits[0] - m).exp() + (logits[1] - m).exp();
        let expected = -((logits[1] - m).exp() / z).ln();
        assert!((lv.loss - expected).abs() < 1e-10);
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let mut net = Network::ffnn(&[2, 2], Activation::Relu, Loss::HalfMse, 1);
        assert!(matches!(net.backward(), Err(Error::State(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut net = Network::ffnn(&[3, 4, 2], Activation::Tanh, Loss::SoftmaxCrossEntropy, 5);
        assert!(net.n_params() <= 100);
        let mut rng = Rng::new(11);
        let mut x = Tensor::zeros(vec![5, 3]);
        rng.fill_normal(&mut x, 1.0);
        let t = Targets::Labels(vec![0, 1, 1, 0, 1]);
        net.forward(&x, &t).unwrap();
        let g = net.backward().unwrap();
        let fd = central_diff(&mut net, &x, &t, 1e-5);
        for (a, b) in g.iter().zip(&fd) {
            let denom = a.abs().max(1e-7);
            assert!(
                ((a - b) / denom).abs() < 1e-4,
                "backprop {a} vs fd {b}"
            );
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut net = Network::builder(3)
            .conv2d(1, 5, 5, 2, 3, 3)
            .activation(Activation::Relu)
            .dense(2 * 3 * 3, 2)
            .build(Loss::SoftmaxCrossEntropy);
        let mut rng = Rng::new(4);
        let mut x = Tensor::zeros(vec![2, 25]);
        rng.fill_normal(&mut x, 1.0);
        let t = Targets::Labels(vec![0, 1]);
        net.forward(&x, &t).unwrap();
        let g = net.backward().unwrap();
        let fd = central_diff(&mut net, &x, &t, 1e-5);
        for (a, b) in g.iter().zip(&fd) {
            let denom = a.abs().max(1e-7);
            assert!(((a - b) / denom).abs() < 1e-4, "conv backprop {a} vs fd {b}");
        }
    }

    #[test]
    fn final_bias_gradient_is_mean_residual() {
        // 1-unit linear net with half-MSE: dL/dbias = mean residual
        let mut net = Network::ffnn(&[1, 1], Activation::Relu, Loss::HalfMse, 2);
        let x = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let t = Targets::Values(Tensor::new(vec![4, 1], vec![0.5, 0.5, 0.5, 0.5]).unwrap());
        net.forward(&x, &t).unwrap();
        let g = net.backward().unwrap();
        let p = net.params_flat();
        let resid_mean: f64 =
            (0..4).map(|i| p[0] * x.at(i, 0) + p[1] - 0.5).sum::<f64>() / 4.0;
        assert!((g[1] - resid_mean).abs() < 1e-12);
    }

    #[test]
    fn group_reduce_cases() {
        let reg = ParameterRegistry::from_layer_sizes(&[2, 1]);
        let v = [1.0, 2.0, 3.0];
        // parameter scheme is the identity
        assert_eq!(
            reg.group_reduce(&v, GroupingScheme::Parameter, ReduceMode::Sum).unwrap(),
            v.to_vec()
        );
        assert_eq!(
            reg.group_reduce(&v, GroupingScheme::Global, ReduceMode::Sum).unwrap(),
            vec![6.0]
        );
        assert_eq!(
            reg.group_reduce(&v, GroupingScheme::Layer, ReduceMode::Sum).unwrap(),
            vec![3.0, 3.0]
        );
        assert_eq!(
            reg.group_reduce(&v, GroupingScheme::Layer, ReduceMode::Mean).unwrap(),
            vec![1.5, 3.0]
        );
        assert!(reg.group_reduce(&v, GroupingScheme::Filter, ReduceMode::Sum).is_err());
    }

    #[test]
    fn layer_reduce_matches_partition_oracle() {
        let net = Network::ffnn(&[3, 4, 2], Activation::Relu, Loss::HalfMse, 8);
        let reg = net.registry();
        let mut rng = Rng::new(21);
        let vals: Vec<f64> = (0..reg.n_params()).map(|_| rng.normal()).collect();
        let got = reg.group_reduce(&vals, GroupingScheme::Layer, ReduceMode::Sum).unwrap();
        // brute-force partition loop
        let mut want = vec![0.0; 2];
        for p in 0..reg.n_params() {
            want[reg.group_of(p, GroupingScheme::Layer).unwrap()] += vals[p];
        }
        assert_eq!(got, want);
        // partition property: group sums total the global sum
        let total: f64 = vals.iter().sum();
        for scheme in [GroupingScheme::Layer, GroupingScheme::Unit, GroupingScheme::Parameter] {
            let sums = reg.group_reduce(&vals, scheme, ReduceMode::Sum).unwrap();
            assert!((sums.iter().sum::<f64>() - total).abs() < 1e-9);
        }
    }

    #[test]
    fn partitions_nest() {
        let net = Network::builder(3)
            .conv2d(1, 4, 4, 3, 2, 2)
            .build(Loss::SoftmaxCrossEntropy);
        let reg = net.registry();
        reg.parent_map(GroupingScheme::Filter, GroupingScheme::Layer).unwrap();
        reg.parent_map(GroupingScheme::Parameter, GroupingScheme::Filter).unwrap();
        let net = Network::ffnn(&[3, 4, 2], Activation::Relu, Loss::HalfMse, 8);
        let reg = net.registry();
        reg.parent_map(GroupingScheme::Unit, GroupingScheme::Layer).unwrap();
        reg.parent_map(GroupingScheme::Parameter, GroupingScheme::Unit).unwrap();
        reg.parent_map(GroupingScheme::Layer, GroupingScheme::Global).unwrap();
    }

    #[test]
    fn sgd_decreases_loss_on_separable_data() {
        let mut net = Network::ffnn(&[2, 2], Activation::Relu, Loss::SoftmaxCrossEntropy, 6);
        let mut rng = Rng::new(13);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..20 {
            let c = i % 2;
            let center = if c == 0 { -3.0 } else { 3.0 };
            xs.push(center + 0.3 * rng.normal());
            xs.push(center + 0.3 * rng.normal());
            ys.push(c);
        }
        let x = Tensor::new(vec![20, 2], xs).unwrap();
        let t = Targets::Labels(ys);
        let first = net.forward(&x, &t).unwrap().loss;
        let mut last = first;
        for _ in 0..50 {
            last = net.forward(&x, &t).unwrap().loss;
            let g = net.backward().unwrap();
            let mut p = net.params_flat();
            for (pv, gv) in p.iter_mut().zip(&g) {
                *pv -= 0.1 * gv;
            }
            net.set_params_flat(&p).unwrap();
        }
        assert!(last < first);
    }
}
