//! Dense-network substrate: layered parameters, forward pass, cross-entropy with
//! the two proximal regularizers, exact backpropagation and momentum SGD.
//!
//! Every parameter tensor (a weight matrix or a bias vector) is one *layer unit*;
//! masks, scores and Fisher values are all expressed over these units.

use std::collections::HashSet;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Scalar type usable for training. Implemented for `f32` (training) and `f64`
/// (gradient checks).
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// One named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub id: String,
    pub tensor: ArrayD<T>,
}

impl<T: Real> Layer<T> {
    pub fn new(id: impl Into<String>, tensor: ArrayD<T>) -> Self {
        Self { id: id.into(), tensor }
    }

    pub fn dim(&self) -> usize {
        self.tensor.len()
    }
}

/// Ordered set of named tensors. Holds models, previous models, cluster models and
/// gradients alike.
#[derive(Clone, Debug, PartialEq)]
pub struct LayeredParams<T = f32> {
    layers: Vec<Layer<T>>,
}

/// Gradients share the parameter layout.
pub type GradientSet<T = f32> = LayeredParams<T>;

impl<T: Real> LayeredParams<T> {
    /// Builds a parameter set, rejecting duplicate ids and non-finite entries.
    pub fn new(layers: Vec<Layer<T>>) -> Result<Self> {
        let mut seen = HashSet::new();
        for layer in &layers {
            if !seen.insert(layer.id.as_str()) {
                return Err(Error::contract(format!("duplicate layer id `{}`", layer.id)));
            }
            if layer.tensor.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("layer `{}` has non-finite entries", layer.id)));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|l| l.id.as_str())
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn get(&self, id: &str) -> Option<&ArrayD<T>> {
        self.layers.iter().find(|l| l.id == id).map(|l| &l.tensor)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::dim).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::new(l.id.clone(), ArrayD::zeros(l.tensor.raw_dim())))
                .collect(),
        }
    }

    /// Checks that `other` has the same ids, order and shapes.
    pub fn ensure_congruent<U>(&self, other: &LayeredParams<U>) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape(
                self.layers.first().map(|l| l.id.as_str()).unwrap_or("<empty>"),
                format!("layer count {} vs {}", self.layers.len(), other.layers.len()),
            ));
        }
        for (a, b) in self.layers.iter().zip(&other.layers) {
            if a.id != b.id {
                return Err(Error::shape(&a.id, format!("id differs from `{}`", b.id)));
            }
            if a.tensor.shape() != b.tensor.shape() {
                return Err(Error::shape(
                    &a.id,
                    format!("shape {:?} vs {:?}", a.tensor.shape(), b.tensor.shape()),
                ));
            }
        }
        Ok(())
    }

    /// All scalars in layer order, each layer in logical (row-major) order.
    pub fn flatten(&self) -> Vec<T> {
        self.layers.iter().flat_map(|l| l.tensor.iter().copied()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.tensor.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> LayeredParams<U> {
        LayeredParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::new(l.id.clone(), l.tensor.mapv(|v| U::from_f64(v.as_f64()).unwrap())))
                .collect(),
        }
    }

    /// Replaces the tensor of `id`. Shapes must agree.
    pub fn set(&mut self, id: &str, tensor: ArrayD<T>) -> Result<()> {
        let layer = self
            .layers
            .iter_mut()
            .find(|l| l.id == id)
            .ok_or_else(|| Error::contract(format!("unknown layer `{id}`")))?;
        if layer.tensor.shape() != tensor.shape() {
            return Err(Error::shape(
                id,
                format!("shape {:?} vs {:?}", layer.tensor.shape(), tensor.shape()),
            ));
        }
        layer.tensor = tensor;
        Ok(())
    }
}

/// Boolean selector over every scalar, congruent with a [`LayeredParams`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamMask {
    layers: Vec<(String, Vec<bool>)>,
}

impl ParamMask {
    pub fn from_fn<T: Real>(like: &LayeredParams<T>, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let layers = like
            .layers()
            .iter()
            .enumerate()
            .map(|(li, l)| (l.id.clone(), (0..l.dim()).map(|j| f(li, j)).collect()))
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[(String, Vec<bool>)] {
        &self.layers
    }

    pub fn count(&self) -> usize {
        self.layers.iter().map(|(_, b)| b.iter().filter(|&&x| x).count()).sum()
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|(_, b)| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ensure_congruent<T: Real>(&self, params: &LayeredParams<T>) -> Result<()> {
        if self.layers.len() != params.len() {
            return Err(Error::shape("<mask>", "layer count differs from model"));
        }
        for ((id, bits), layer) in self.layers.iter().zip(params.layers()) {
            if *id != layer.id || bits.len() != layer.dim() {
                return Err(Error::shape(&layer.id, "mask not congruent with model"));
            }
        }
        Ok(())
    }

    /// True when every bit set in `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &ParamMask) -> bool {
        self.layers
            .iter()
            .zip(&other.layers)
            .all(|((_, a), (_, b))| a.iter().zip(b).all(|(&x, &y)| !x || y))
    }
}

/// Architecture of a dense ReLU stack.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, num_classes: usize) -> Self {
        Self { input_dim, hidden, num_classes }
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend(&self.hidden);
        w.push(self.num_classes);
        w
    }

    /// `(layer_id, shape)` for every unit, in forward order.
    pub fn layer_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let widths = self.widths();
        let mut out = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            out.push((format!("fc{}.weight", i + 1), vec![pair[0], pair[1]]));
            out.push((format!("fc{}.bias", i + 1), vec![pair[1]]));
        }
        out
    }

    pub fn num_units(&self) -> usize {
        2 * (self.hidden.len() + 1)
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Fan-in uniform initializer `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for unit
    /// `index`. Each unit draws from its own stream so that initializing one unit
    /// never shifts another.
    pub fn init_unit<T: Real>(&self, index: usize, seed: u64) -> ArrayD<T> {
        let shapes = self.layer_shapes();
        let (_, shape) = &shapes[index];
        let fan_in = shapes[index - index % 2].1[0];
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut r = rng::stream(seed, "init-unit", index as u64);
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n).map(|_| T::lit(r.random_range(-bound..bound))).collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches length")
    }

    pub fn init<T: Real>(&self, seed: u64) -> LayeredParams<T> {
        let layers = self
            .layer_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, (id, _))| Layer::new(id, self.init_unit(i, seed)))
            .collect();
        LayeredParams { layers }
    }

    /// Recovers the architecture from a parameter set laid out as weight/bias pairs.
    pub fn infer<T: Real>(params: &LayeredParams<T>) -> Result<Self> {
        let pairs = dense_pairs(params)?;
        let input_dim = pairs[0].0.nrows();
        let num_classes = pairs.last().unwrap().0.ncols();
        let hidden = pairs[..pairs.len() - 1].iter().map(|(w, _)| w.ncols()).collect();
        Ok(Self { input_dim, hidden, num_classes })
    }
}

/// Inputs and integer labels for one mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T = f32> {
    pub inputs: Array2<T>,
    pub labels: Vec<usize>,
}

impl<T: Real> Batch<T> {
    pub fn new(inputs: Array2<T>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::contract(format!(
                "batch has {} rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `idx` as a new batch.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Optimizer state for classical momentum.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<T = f32> {
    pub velocity: LayeredParams<T>,
    pub momentum: T,
    pub lr: T,
}

impl<T: Real> OptState<T> {
    pub fn new(like: &LayeredParams<T>, lr: T, momentum: T) -> Result<Self> {
        if !(lr > T::zero()) {
            return Err(Error::contract("learning rate must be > 0"));
        }
        if momentum < T::zero() || momentum >= T::one() {
            return Err(Error::contract("momentum must lie in [0, 1)"));
        }
        Ok(Self { velocity: like.zeros_like(), momentum, lr })
    }
}

/// Proximal terms added to the classification loss.
///
/// `L = L_cls + lambda_gen * ½‖θ − Θ‖² + lambda_elg * ½ Σ_{keep_local} (θ − Θ)²`.
/// A term with a zero weight contributes nothing to the gradient.
#[derive(Clone, Copy, Debug)]
pub struct Regularizer<'a, T> {
    pub lambda_gen: T,
    pub lambda_elg: T,
    pub anchor: Option<&'a LayeredParams<T>>,
    pub elastic: Option<&'a ParamMask>,
}

impl<'a, T: Real> Regularizer<'a, T> {
    pub fn none() -> Self {
        Self { lambda_gen: T::zero(), lambda_elg: T::zero(), anchor: None, elastic: None }
    }
}

/// Loss components of one evaluation. `gen` and `elg` are the unweighted terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts<T> {
    pub cls: T,
    pub gen: T,
    pub elg: T,
    pub total: T,
}

fn dense_pairs<T: Real>(model: &LayeredParams<T>) -> Result<Vec<(ArrayView2<'_, T>, ndarray::ArrayView1<'_, T>)>> {
    let layers = model.layers();
    if layers.is_empty() || !layers.len().is_multiple_of(2) {
        return Err(Error::shape(
            layers.last().map(|l| l.id.as_str()).unwrap_or("<empty>"),
            "model must be a stack of weight/bias pairs",
        ));
    }
    let mut out = Vec::with_capacity(layers.len() / 2);
    let mut prev_width: Option<usize> = None;
    for pair in layers.chunks(2) {
        let (w, b) = (&pair[0], &pair[1]);
        let wv = w
            .tensor
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::shape(&w.id, "weight must be 2-D"))?;
        let bv = b
            .tensor
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .map_err(|_| Error::shape(&b.id, "bias must be 1-D"))?;
        if bv.len() != wv.ncols() {
            return Err(Error::shape(&b.id, format!("bias length {} vs {} outputs", bv.len(), wv.ncols())));
        }
        if let Some(p) = prev_width {
            if wv.nrows() != p {
                return Err(Error::shape(&w.id, format!("expects {} inputs, previous layer gives {p}", wv.nrows())));
            }
        }
        prev_width = Some(wv.ncols());
        out.push((wv, bv));
    }
    Ok(out)
}

struct Trace<T> {
    /// Input to each affine map (`acts[0]` is the batch input).
    acts: Vec<Array2<T>>,
    /// Pre-activations of each affine map; the last entry holds the logits.
    pre: Vec<Array2<T>>,
}

fn run_forward<T: Real>(model: &LayeredParams<T>, inputs: &Array2<T>) -> Result<Trace<T>> {
    let pairs = dense_pairs(model)?;
    if inputs.ncols() != pairs[0].0.nrows() {
        return Err(Error::shape(
            &model.layers()[0].id,
            format!("input dim {} vs {}", inputs.ncols(), pairs[0].0.nrows()),
        ));
    }
    let mut acts = Vec::with_capacity(pairs.len());
    let mut pre = Vec::with_capacity(pairs.len());
    let mut a = inputs.clone();
    for (i, (w, b)) in pairs.iter().enumerate() {
        let z = a.dot(w) + b;
        acts.push(a);
        if i + 1 < pairs.len() {
            a = z.mapv(|v| if v > T::zero() { v } else { T::zero() });
        } else {
            a = Array2::zeros((0, 0));
        }
        pre.push(z);
    }
    Ok(Trace { acts, pre })
}

/// Logits of `batch` under `model`.
pub fn forward<T: Real>(model: &LayeredParams<T>, batch: &Batch<T>) -> Result<Array2<T>> {
    let mut trace = run_forward(model, &batch.inputs)?;
    Ok(trace.pre.pop().expect("at least one layer"))
}

/// Row-wise softmax and the mean cross-entropy against `labels`.
fn softmax_ce<T: Real>(logits: &Array2<T>, labels: &[usize]) -> Result<(Array2<T>, T)> {
    let c = logits.ncols();
    let mut probs = logits.clone();
    let mut total = T::zero();
    for (mut row, &y) in probs.rows_mut().into_iter().zip(labels) {
        if y >= c {
            return Err(Error::contract(format!("label {y} outside [0, {c})")));
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        // -log softmax_y = log(sum) - (z_y - max)
        total += sum.ln() - row[y].ln();
        row.mapv_inplace(|v| v / sum);
    }
    let n = T::from_usize(labels.len()).unwrap();
    Ok((probs, total / n))
}

pub fn loss_gen<T: Real>(theta: &LayeredParams<T>, anchor: &LayeredParams<T>) -> Result<T> {
    theta.ensure_congruent(anchor)?;
    let half = T::lit(0.5);
    let mut s = T::zero();
    for (a, b) in theta.layers().iter().zip(anchor.layers()) {
        for (&x, &y) in a.tensor.iter().zip(b.tensor.iter()) {
            let d = x - y;
            s += d * d;
        }
    }
    Ok(half * s)
}

pub fn loss_elg<T: Real>(theta: &LayeredParams<T>, anchor: &LayeredParams<T>, mask: &ParamMask) -> Result<T> {
    theta.ensure_congruent(anchor)?;
    mask.ensure_congruent(theta)?;
    let half = T::lit(0.5);
    let mut s = T::zero();
    for ((a, b), (_, bits)) in theta.layers().iter().zip(anchor.layers()).zip(mask.layers()) {
        for ((&x, &y), &keep) in a.tensor.iter().zip(b.tensor.iter()).zip(bits) {
            if keep {
                let d = x - y;
                s += d * d;
            }
        }
    }
    Ok(half * s)
}

/// Total loss and its exact gradient with respect to every parameter.
pub fn loss_and_grad<T: Real>(
    model: &LayeredParams<T>,
    batch: &Batch<T>,
    reg: &Regularizer<'_, T>,
) -> Result<(LossParts<T>, GradientSet<T>)> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let trace = run_forward(model, &batch.inputs)?;
    let logits = trace.pre.last().unwrap();
    let (probs, cls) = softmax_ce(logits, &batch.labels)?;

    let n = T::from_usize(batch.len()).unwrap();
    let mut dz = probs;
    for (mut row, &y) in dz.rows_mut().into_iter().zip(&batch.labels) {
        row[y] -= T::one();
    }
    dz.mapv_inplace(|v| v / n);

    let pairs = dense_pairs(model)?;
    let mut grads = model.zeros_like();
    for i in (0..pairs.len()).rev() {
        let gw = trace.acts[i].t().dot(&dz);
        let gb: Array1<T> = dz.sum_axis(Axis(0));
        if i > 0 {
            let mut da = dz.dot(&pairs[i].0.t());
            Zip::from(&mut da).and(&trace.pre[i - 1]).for_each(|d, &z| {
                if z <= T::zero() {
                    *d = T::zero();
                }
            });
            dz = da;
        }
        let glayers = grads.layers_mut();
        glayers[2 * i].tensor = gw.into_dyn();
        glayers[2 * i + 1].tensor = gb.into_dyn();
    }

    let mut parts = LossParts { cls, gen: T::zero(), elg: T::zero(), total: cls };
    if let Some(anchor) = reg.anchor {
        model.ensure_congruent(anchor)?;
        parts.gen = loss_gen(model, anchor)?;
        if reg.lambda_gen != T::zero() {
            let lam = reg.lambda_gen;
            for ((g, p), a) in grads.layers_mut().iter_mut().zip(model.layers()).zip(anchor.layers()) {
                Zip::from(&mut g.tensor)
                    .and(&p.tensor)
                    .and(&a.tensor)
                    .for_each(|g, &p, &a| *g += lam * (p - a));
            }
            parts.total += lam * parts.gen;
        }
        if let Some(mask) = reg.elastic {
            parts.elg = loss_elg(model, anchor, mask)?;
            if reg.lambda_elg != T::zero() {
                let lam = reg.lambda_elg;
                for (((g, p), a), (_, bits)) in grads
                    .layers_mut()
                    .iter_mut()
                    .zip(model.layers())
                    .zip(anchor.layers())
                    .zip(mask.layers())
                {
                    for (((g, &p), &a), &keep) in
                        g.tensor.iter_mut().zip(p.tensor.iter()).zip(a.tensor.iter()).zip(bits)
                    {
                        if keep {
                            *g += lam * (p - a);
                        }
                    }
                }
                parts.total += lam * parts.elg;
            }
        }
    } else if reg.lambda_gen != T::zero() || reg.lambda_elg != T::zero() {
        return Err(Error::contract("regularizer weight set without an anchor model"));
    }

    if !parts.total.is_finite() || !grads.all_finite() {
        return Err(Error::NonFinite(format!("loss {}", parts.total)));
    }
    Ok((parts, grads))
}

/// Gradient of the elastic term alone, `lambda * mask ⊙ (θ − Θ)`.
pub fn elastic_grad<T: Real>(
    model: &LayeredParams<T>,
    anchor: &LayeredParams<T>,
    mask: &ParamMask,
    lambda: T,
) -> Result<(T, GradientSet<T>)> {
    let value = loss_elg(model, anchor, mask)?;
    let mut grads = model.zeros_like();
    for (((g, p), a), (_, bits)) in grads
        .layers_mut()
        .iter_mut()
        .zip(model.layers())
        .zip(anchor.layers())
        .zip(mask.layers())
    {
        for (((g, &p), &a), &keep) in g.tensor.iter_mut().zip(p.tensor.iter()).zip(a.tensor.iter()).zip(bits) {
            if keep {
                *g = lambda * (p - a);
            }
        }
    }
    Ok((value, grads))
}

/// Classical momentum: `v ← μ·v + g`, `θ ← θ − α·v`.
pub fn sgd_step<T: Real>(model: &mut LayeredParams<T>, grads: &GradientSet<T>, state: &mut OptState<T>) -> Result<()> {
    model.ensure_congruent(grads)?;
    model.ensure_congruent(&state.velocity)?;
    let (mu, lr) = (state.momentum, state.lr);
    for ((p, g), v) in model
        .layers_mut()
        .iter_mut()
        .zip(grads.layers())
        .zip(state.velocity.layers_mut())
    {
        Zip::from(&mut p.tensor)
            .and(&mut v.tensor)
            .and(&g.tensor)
            .for_each(|p, v, &g| {
                *v = mu * *v + g;
                *p -= lr * *v;
            });
    }
    Ok(())
}

/// Fraction of rows whose arg-max logit equals the label (lowest index wins ties).
pub fn accuracy<T: Real>(model: &LayeredParams<T>, batch: &Batch<T>) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let logits = forward(model, batch)?;
    let hits = logits
        .rows()
        .into_iter()
        .zip(&batch.labels)
        .filter(|(row, &y)| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == y
        })
        .count();
    Ok(hits as f64 / batch.len() as f64)
}
