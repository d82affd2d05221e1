//! Frozen base network and the low-rank adapters trained on top of it.
//!
//! Every layer computes `act(W h + bias + B (A h))`. `W` and `bias` belong to
//! the [`BaseModel`] and are never updated; only the `(A, B)` pairs of an
//! [`Adapter`] receive gradients.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{axpy_scale, gaussian_fill, matmul, matmul_nt, matmul_tn, Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: &Matrix) -> Matrix {
        match self {
            Activation::Tanh => z.map(f64::tanh),
            Activation::Relu => z.map(|v| v.max(0.0)),
            Activation::Identity => z.clone(),
        }
    }

    /// Derivative evaluated at the pre-activation `z`.
    fn derivative(self, z: &Matrix) -> Matrix {
        match self {
            Activation::Tanh => z.map(|v| {
                let t = v.tanh();
                1.0 - t * t
            }),
            Activation::Relu => z.map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
            Activation::Identity => z.map(|_| 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    weight: Matrix,
    bias: Matrix,
}

impl Layer {
    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &Matrix {
        &self.bias
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Frozen layer stack. The activation is applied between layers and the last
/// layer is linear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseModel {
    layers: Vec<Layer>,
    activation: Activation,
}

impl BaseModel {
    pub fn new(layers: Vec<(Matrix, Matrix)>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("a model needs at least one layer".into()));
        }
        for (l, (w, b)) in layers.iter().enumerate() {
            if b.shape() != (w.rows(), 1) {
                return Err(Error::Shape(format!(
                    "layer {l}: bias is {}x{}, expected {}x1",
                    b.rows(),
                    b.cols(),
                    w.rows()
                )));
            }
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].0.rows() != pair[1].0.cols() {
                return Err(Error::Shape(format!(
                    "layer {l} outputs {} values but layer {} expects {}",
                    pair[0].0.rows(),
                    l + 1,
                    pair[1].0.cols()
                )));
            }
        }
        let layers = layers.into_iter().map(|(weight, bias)| Layer { weight, bias }).collect();
        Ok(Self { layers, activation })
    }

    /// Random network with `dims = [input, hidden..., output]`; weights and
    /// biases are drawn from `N(0, 1/fan_in)`.
    pub fn random(dims: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Parameter(format!("invalid layer dims {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let std = 1.0 / (w[0] as f64).sqrt();
                Ok((gaussian_fill(rng, w[1], w[0], 0.0, std)?, gaussian_fill(rng, w[1], 1, 0.0, std)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers, activation)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    fn activation_after(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            Activation::Identity
        } else {
            self.activation
        }
    }
}

/// One adapted layer: `A` is `r x k`, `B` is `d x r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraPair {
    pub a: Matrix,
    pub b: Matrix,
}

/// Dimensions of one adapted layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub d: usize,
    pub k: usize,
    pub r: usize,
}

impl LayerShape {
    pub fn param_count(&self) -> usize {
        self.r * (self.d + self.k)
    }
}

/// Shape of an adapter, needed to rebuild one from its flat vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterLayout(pub Vec<LayerShape>);

impl AdapterLayout {
    /// Layout for `model` with one shared rank; each layer's rank is capped at
    /// `min(d, k)`.
    pub fn for_model(model: &BaseModel, rank: usize) -> Self {
        Self(
            model
                .layers()
                .iter()
                .map(|l| LayerShape { d: l.out_dim(), k: l.in_dim(), r: rank.min(l.out_dim()).min(l.in_dim()) })
                .collect(),
        )
    }

    pub fn param_count(&self) -> usize {
        self.0.iter().map(LayerShape::param_count).sum()
    }
}

/// Trainable low-rank correction for every layer of a base model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pairs: Vec<LoraPair>,
}

impl Adapter {
    pub fn new(pairs: Vec<LoraPair>) -> Result<Self> {
        for (l, p) in pairs.iter().enumerate() {
            if p.a.rows() != p.b.cols() {
                return Err(Error::Shape(format!(
                    "layer {l}: A has {} rows but B has {} columns",
                    p.a.rows(),
                    p.b.cols()
                )));
            }
        }
        Ok(Self { pairs })
    }

    /// Standard LoRA start: `A ~ N(0, init_std)`, `B = 0`, so the adapter
    /// initially leaves the base model's output unchanged.
    pub fn init(model: &BaseModel, rank: usize, init_std: f64, rng: &mut Rng) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Parameter("adapter rank must be at least 1".into()));
        }
        let layout = AdapterLayout::for_model(model, rank);
        let pairs = layout
            .0
            .iter()
            .map(|s| Ok(LoraPair { a: gaussian_fill(rng, s.r, s.k, 0.0, init_std)?, b: Matrix::zeros(s.d, s.r) }))
            .collect::<Result<Vec<_>>>()?;
        Self::new(pairs)
    }

    pub fn zeros(layout: &AdapterLayout) -> Self {
        let pairs =
            layout.0.iter().map(|s| LoraPair { a: Matrix::zeros(s.r, s.k), b: Matrix::zeros(s.d, s.r) }).collect();
        Self { pairs }
    }

    pub fn pairs(&self) -> &[LoraPair] {
        &self.pairs
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.a.rows()).collect()
    }

    pub fn layout(&self) -> AdapterLayout {
        AdapterLayout(self.pairs.iter().map(|p| LayerShape { d: p.b.rows(), k: p.a.cols(), r: p.a.rows() }).collect())
    }

    /// Checks that every pair fits the corresponding base layer.
    pub fn check_conformable(&self, model: &BaseModel) -> Result<()> {
        if self.pairs.len() != model.layers().len() {
            return Err(Error::Shape(format!(
                "adapter has {} layers, model has {}",
                self.pairs.len(),
                model.layers().len()
            )));
        }
        for (l, (p, layer)) in self.pairs.iter().zip(model.layers()).enumerate() {
            let (d, k) = layer.weight.shape();
            let r = p.a.rows();
            if p.a.cols() != k || p.b.rows() != d || p.b.cols() != r {
                return Err(Error::Shape(format!(
                    "layer {l}: A {}x{} / B {}x{} do not fit W {d}x{k}",
                    p.a.rows(),
                    p.a.cols(),
                    p.b.rows(),
                    p.b.cols()
                )));
            }
            if r > d.min(k) {
                return Err(Error::Shape(format!("layer {l}: rank {r} exceeds min({d}, {k})")));
            }
        }
        Ok(())
    }

    /// Canonical flat form: layers in order, each `A` row-major then `B`
    /// row-major.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(adapter_param_count(self));
        for p in &self.pairs {
            out.extend_from_slice(p.a.data());
            out.extend_from_slice(p.b.data());
        }
        out
    }

    pub fn unflatten(layout: &AdapterLayout, values: &[f64]) -> Result<Self> {
        let expected = layout.param_count();
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "flat adapter has {} values, layout needs {expected}",
                values.len()
            )));
        }
        let mut offset = 0;
        let mut take = |n: usize| {
            let s = &values[offset..offset + n];
            offset += n;
            s.to_vec()
        };
        let pairs = layout
            .0
            .iter()
            .map(|s| {
                let a = Matrix::from_vec(s.r, s.k, take(s.r * s.k))?;
                let b = Matrix::from_vec(s.d, s.r, take(s.d * s.r))?;
                Ok(LoraPair { a, b })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { pairs })
    }

    const MAGIC: [u8; 4] = *b"LRAD";
    const VERSION: u32 = 1;

    /// Binary form: magic `LRAD`, version, layer count, then `(d, k, r)` per
    /// layer (all little-endian `u32`), followed by the flat vector as
    /// little-endian `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let layout = self.layout();
        let mut out = Vec::with_capacity(12 + 12 * layout.0.len() + 8 * layout.param_count());
        out.extend_from_slice(&Self::MAGIC);
        out.extend_from_slice(&Self::VERSION.to_le_bytes());
        out.extend_from_slice(&(layout.0.len() as u32).to_le_bytes());
        for s in &layout.0 {
            for v in [s.d, s.k, s.r] {
                out.extend_from_slice(&(v as u32).to_le_bytes());
            }
        }
        for v in self.flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let mut read_u32 = |what: &str| -> Result<u32> {
            if cursor.len() < 4 {
                return Err(Error::Format(format!("truncated adapter file while reading {what}")));
            }
            let (head, rest) = cursor.split_at(4);
            cursor = rest;
            Ok(u32::from_le_bytes(head.try_into().unwrap()))
        };
        if bytes.len() < 4 || bytes[..4] != Self::MAGIC {
            return Err(Error::Format("not an adapter file (bad magic)".into()));
        }
        read_u32("magic")?;
        let version = read_u32("version")?;
        if version != Self::VERSION {
            return Err(Error::Format(format!("unsupported adapter format version {version}")));
        }
        let layers = read_u32("layer count")? as usize;
        if bytes.len() < 12 + 12 * layers {
            return Err(Error::Format(format!("truncated header for {layers} layers")));
        }
        let mut shapes = Vec::with_capacity(layers);
        for _ in 0..layers {
            let d = read_u32("d")? as usize;
            let k = read_u32("k")? as usize;
            let r = read_u32("r")? as usize;
            shapes.push(LayerShape { d, k, r });
        }
        let layout = AdapterLayout(shapes);
        let body = &bytes[12 + 12 * layers..];
        if body.len() != 8 * layout.param_count() {
            return Err(Error::Format(format!(
                "adapter body has {} bytes, expected {}",
                body.len(),
                8 * layout.param_count()
            )));
        }
        let values: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Self::unflatten(&layout, &values)
    }
}

/// Number of trainable scalars, `sum_l r_l (d_l + k_l)`.
pub fn adapter_param_count(adapter: &Adapter) -> usize {
    adapter.layout().param_count()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    SoftmaxCe,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "softmax_ce" => Ok(LossKind::SoftmaxCe),
            other => Err(Error::Parameter(format!("unknown loss kind {other:?}"))),
        }
    }
}

/// Gradient of the batch loss with respect to every `(A, B)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct GradPair {
    pub grads: Vec<LoraPair>,
    pub loss: f64,
}

struct Trace {
    /// Input to each layer.
    inputs: Vec<Matrix>,
    /// `A h` for each layer.
    projected: Vec<Matrix>,
    /// Pre-activation of each layer.
    pre: Vec<Matrix>,
    output: Matrix,
}

fn run_forward(model: &BaseModel, adapter: &Adapter, z: &Matrix, keep: bool) -> Result<Trace> {
    adapter.check_conformable(model)?;
    if z.rows() != model.input_dim() {
        return Err(Error::Shape(format!(
            "layer 0: input has {} rows, model expects {}",
            z.rows(),
            model.input_dim()
        )));
    }
    let mut trace = Trace { inputs: Vec::new(), projected: Vec::new(), pre: Vec::new(), output: Matrix::zeros(0, 0) };
    let mut h = z.clone();
    for (l, (layer, pair)) in model.layers().iter().zip(adapter.pairs()).enumerate() {
        let projected = matmul(&pair.a, &h)?;
        let pre = matmul(&layer.weight, &h)?.add_column(&layer.bias)?.add(&matmul(&pair.b, &projected)?)?;
        let next = model.activation_after(l).apply(&pre);
        if keep {
            trace.inputs.push(h);
            trace.projected.push(projected);
            trace.pre.push(pre);
        }
        h = next;
    }
    trace.output = h;
    Ok(trace)
}

/// Output of the adapted network for the columns of `z`.
pub fn forward(model: &BaseModel, adapter: &Adapter, z: &Matrix) -> Result<Matrix> {
    Ok(run_forward(model, adapter, z, false)?.output)
}

/// Batch-mean loss and its derivative with respect to the network output.
fn loss_and_output_grad(output: &Matrix, y: &Matrix, kind: LossKind) -> Result<(f64, Matrix)> {
    if output.shape() != y.shape() {
        return Err(Error::Shape(format!(
            "targets are {}x{} but the model produced {}x{}",
            y.rows(),
            y.cols(),
            output.rows(),
            output.cols()
        )));
    }
    let n = output.cols() as f64;
    let (loss, grad) = match kind {
        LossKind::Mse => {
            let diff = output.sub(y)?;
            (crate::numeric::frobenius_sq(&diff) / n, diff.scale(2.0 / n))
        }
        LossKind::SoftmaxCe => {
            let mut grad = Matrix::zeros(output.rows(), output.cols());
            let mut total = 0.0;
            for c in 0..output.cols() {
                let logits = output.column(c);
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                for (r, logit) in logits.iter().enumerate() {
                    let target = y.get(r, c);
                    total -= target * (logit - lse);
                    let p = (logit - lse).exp();
                    grad.set(r, c, (p - target) / n);
                }
            }
            (total / n, grad)
        }
    };
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss diverged ({loss})")));
    }
    Ok((loss, grad))
}

/// Batch-mean loss without gradients.
pub fn loss(model: &BaseModel, adapter: &Adapter, x: &Matrix, y: &Matrix, kind: LossKind) -> Result<f64> {
    if x.cols() == 0 {
        return Err(Error::Parameter("empty batch".into()));
    }
    let out = forward(model, adapter, x)?;
    Ok(loss_and_output_grad(&out, y, kind)?.0)
}

/// Batch-mean loss and exact gradients with respect to the adapter.
/// Columns of `x` and `y` are samples.
pub fn loss_and_grad(model: &BaseModel, adapter: &Adapter, x: &Matrix, y: &Matrix, kind: LossKind) -> Result<GradPair> {
    if x.cols() == 0 {
        return Err(Error::Parameter("empty batch".into()));
    }
    let trace = run_forward(model, adapter, x, true)?;
    let (loss, mut delta) = loss_and_output_grad(&trace.output, y, kind)?;

    let layers = model.layers();
    let mut grads = Vec::with_capacity(layers.len());
    for l in (0..layers.len()).rev() {
        let pair = &adapter.pairs()[l];
        if l + 1 < layers.len() {
            delta = delta.hadamard(&model.activation_after(l).derivative(&trace.pre[l]))?;
        }
        // dL/dB = delta (A h)^T ; dL/dA = (B^T delta) h^T
        let bt_delta = matmul_tn(&pair.b, &delta)?;
        let db = matmul_nt(&delta, &trace.projected[l])?;
        let da = matmul_nt(&bt_delta, &trace.inputs[l])?;
        if l > 0 {
            delta = matmul_tn(&layers[l].weight, &delta)?.add(&matmul_tn(&pair.a, &bt_delta)?)?;
        }
        grads.push(LoraPair { a: da, b: db });
    }
    grads.reverse();
    Ok(GradPair { grads, loss })
}

/// Plain gradient step `v - eta * grad`; the input adapter is left untouched.
pub fn sgd_step(adapter: &Adapter, grad: &GradPair, eta: f64) -> Result<Adapter> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::Parameter(format!("learning rate must be positive, got {eta}")));
    }
    if grad.grads.len() != adapter.pairs.len() {
        return Err(Error::Shape("gradient and adapter have different layer counts".into()));
    }
    let pairs = adapter
        .pairs
        .iter()
        .zip(&grad.grads)
        .map(|(p, g)| Ok(LoraPair { a: axpy_scale(-eta, &g.a, &p.a)?, b: axpy_scale(-eta, &g.b, &p.b)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(Adapter { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::frobenius_sq;

    fn random_adapter(model: &BaseModel, rank: usize, rng: &mut Rng) -> Adapter {
        let layout = AdapterLayout::for_model(model, rank);
        let values: Vec<f64> = (0..layout.param_count()).map(|_| 0.3 * rng.standard_normal()).collect();
        Adapter::unflatten(&layout, &values).unwrap()
    }

    /// Plain forward through `W + BA` materialized per layer.
    fn dense_forward(model: &BaseModel, adapter: &Adapter, z: &Matrix) -> Matrix {
        let mut h = z.clone();
        let n = model.layers().len();
        for (l, (layer, pair)) in model.layers().iter().zip(adapter.pairs()).enumerate() {
            let merged = layer.weight().add(&matmul(&pair.b, &pair.a).unwrap()).unwrap();
            let pre = matmul(&merged, &h).unwrap().add_column(layer.bias()).unwrap();
            h = if l + 1 == n { pre } else { model.activation().apply(&pre) };
        }
        h
    }

    #[test]
    fn zero_b_matches_base_only() {
        let mut rng = Rng::new(1);
        let model = BaseModel::random(&[3, 5, 2], Activation::Tanh, &mut rng).unwrap();
        let adapter = Adapter::init(&model, 2, 0.02, &mut rng).unwrap();
        let x = gaussian_fill(&mut rng, 3, 4, 0.0, 1.0).unwrap();
        let zero = Adapter::zeros(&adapter.layout());
        assert_eq!(forward(&model, &adapter, &x).unwrap(), forward(&model, &zero, &x).unwrap());
    }

    #[test]
    fn identity_layer_doubles_input() {
        let model = BaseModel::new(vec![(Matrix::identity(2), Matrix::zeros(2, 1))], Activation::Identity).unwrap();
        let adapter = Adapter::new(vec![LoraPair { a: Matrix::identity(2), b: Matrix::identity(2) }]).unwrap();
        let z = Matrix::from_rows(&[&[1.0], &[1.0]]).unwrap();
        assert_eq!(forward(&model, &adapter, &z).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn matches_dense_materialization() {
        let mut rng = Rng::new(2);
        for act in [Activation::Tanh, Activation::Relu, Activation::Identity] {
            let model = BaseModel::random(&[4, 6, 3], act, &mut rng).unwrap();
            let adapter = random_adapter(&model, 2, &mut rng);
            let x = gaussian_fill(&mut rng, 4, 5, 0.0, 1.0).unwrap();
            let got = forward(&model, &adapter, &x).unwrap();
            let want = dense_forward(&model, &adapter, &x);
            for (g, w) in got.data().iter().zip(want.data()) {
                assert!((g - w).abs() <= 1e-9 * w.abs().max(1.0));
            }
        }
    }

    #[test]
    fn shape_error_names_layer() {
        let mut rng = Rng::new(3);
        let model = BaseModel::random(&[3, 4, 2], Activation::Tanh, &mut rng).unwrap();
        let other = BaseModel::random(&[3, 5, 2], Activation::Tanh, &mut rng).unwrap();
        let adapter = Adapter::init(&other, 1, 0.02, &mut rng).unwrap();
        let err = forward(&model, &adapter, &Matrix::zeros(3, 1)).unwrap_err().to_string();
        assert!(err.contains("layer 0"), "{err}");
        let good = Adapter::init(&model, 1, 0.02, &mut rng).unwrap();
        assert!(forward(&model, &good, &Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn perfect_fit_has_zero_gradient() {
        let mut rng = Rng::new(4);
        let model = BaseModel::random(&[2, 3, 1], Activation::Tanh, &mut rng).unwrap();
        let adapter = random_adapter(&model, 1, &mut rng);
        let x = gaussian_fill(&mut rng, 2, 6, 0.0, 1.0).unwrap();
        let y = forward(&model, &adapter, &x).unwrap();
        let g = loss_and_grad(&model, &adapter, &x, &y, LossKind::Mse).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.grads.iter().all(|p| p.a.is_zero() && p.b.is_zero()));
    }

    #[test]
    fn single_layer_b_gradient_closed_form() {
        // One linear layer, one sample: dB = 2 (yhat - y) (A x)^T.
        let w = Matrix::from_rows(&[&[0.5, -1.0], &[2.0, 0.25]]).unwrap();
        let bias = Matrix::from_rows(&[&[0.1], &[-0.2]]).unwrap();
        let model = BaseModel::new(vec![(w.clone(), bias.clone())], Activation::Identity).unwrap();
        let a = Matrix::from_rows(&[&[0.3, 0.7]]).unwrap();
        let b = Matrix::from_rows(&[&[1.5], &[-0.5]]).unwrap();
        let adapter = Adapter::new(vec![LoraPair { a: a.clone(), b: b.clone() }]).unwrap();
        let x = Matrix::from_rows(&[&[1.0], &[2.0]]).unwrap();
        let y = Matrix::from_rows(&[&[0.0], &[1.0]]).unwrap();

        let ax = 0.3 * 1.0 + 0.7 * 2.0;
        let yhat = [0.5 - 2.0 + 0.1 + 1.5 * ax, 2.0 + 0.5 - 0.2 - 0.5 * ax];
        let resid = [yhat[0] - 0.0, yhat[1] - 1.0];
        let g = loss_and_grad(&model, &adapter, &x, &y, LossKind::Mse).unwrap();
        let db = &g.grads[0].b;
        assert!((db.get(0, 0) - 2.0 * resid[0] * ax).abs() < 1e-12);
        assert!((db.get(1, 0) - 2.0 * resid[1] * ax).abs() < 1e-12);
        assert!((g.loss - (resid[0] * resid[0] + resid[1] * resid[1])).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(5);
        for kind in [LossKind::Mse, LossKind::SoftmaxCe] {
            let model = BaseModel::random(&[4, 5, 3], Activation::Tanh, &mut rng).unwrap();
            let adapter = random_adapter(&model, 2, &mut rng);
            let x = gaussian_fill(&mut rng, 4, 7, 0.0, 1.0).unwrap();
            let y = match kind {
                LossKind::Mse => gaussian_fill(&mut rng, 3, 7, 0.0, 1.0).unwrap(),
                LossKind::SoftmaxCe => {
                    let mut y = Matrix::zeros(3, 7);
                    for c in 0..7 {
                        y.set(rng.below(3), c, 1.0);
                    }
                    y
                }
            };
            let g = loss_and_grad(&model, &adapter, &x, &y, kind).unwrap();
            let analytic: Vec<f64> = g.grads.iter().flat_map(|p| p.a.data().iter().chain(p.b.data()).copied()).collect();
            let base = adapter.flatten();
            let layout = adapter.layout();
            let eps = 1e-5;
            for i in 0..base.len() {
                let mut plus = base.clone();
                plus[i] += eps;
                let mut minus = base.clone();
                minus[i] -= eps;
                let lp = loss(&model, &Adapter::unflatten(&layout, &plus).unwrap(), &x, &y, kind).unwrap();
                let lm = loss(&model, &Adapter::unflatten(&layout, &minus).unwrap(), &x, &y, kind).unwrap();
                let numeric = (lp - lm) / (2.0 * eps);
                let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-3);
                assert!(err < 1e-4, "{kind:?} coord {i}: {numeric} vs {}", analytic[i]);
            }
        }
    }

    #[test]
    fn loss_kind_parsing() {
        assert_eq!("mse".parse::<LossKind>().unwrap(), LossKind::Mse);
        assert!(matches!("hinge".parse::<LossKind>(), Err(Error::Parameter(_))));
    }

    #[test]
    fn sgd_step_cases() {
        let mut rng = Rng::new(6);
        let model = BaseModel::random(&[3, 3], Activation::Identity, &mut rng).unwrap();
        let adapter = random_adapter(&model, 2, &mut rng);
        let zero = GradPair { grads: Adapter::zeros(&adapter.layout()).pairs, loss: 0.0 };
        assert_eq!(sgd_step(&adapter, &zero, 0.1).unwrap(), adapter);

        let itself = GradPair { grads: adapter.pairs.clone(), loss: 0.0 };
        let stepped = sgd_step(&adapter, &itself, 1.0).unwrap();
        assert!(stepped.flatten().iter().all(|&v| v == 0.0));
        assert!(matches!(sgd_step(&adapter, &zero, 0.0), Err(Error::Parameter(_))));
        assert!(sgd_step(&adapter, &zero, -1.0).is_err());
    }

    #[test]
    fn small_step_decreases_convex_loss() {
        let mut rng = Rng::new(7);
        let model = BaseModel::random(&[3, 2], Activation::Identity, &mut rng).unwrap();
        let adapter = random_adapter(&model, 1, &mut rng);
        let x = gaussian_fill(&mut rng, 3, 10, 0.0, 1.0).unwrap();
        let y = gaussian_fill(&mut rng, 2, 10, 0.0, 1.0).unwrap();
        let g = loss_and_grad(&model, &adapter, &x, &y, LossKind::Mse).unwrap();
        let next = sgd_step(&adapter, &g, 1e-3).unwrap();
        assert!(loss(&model, &next, &x, &y, LossKind::Mse).unwrap() < g.loss);
    }

    #[test]
    fn param_counts() {
        let one = AdapterLayout(vec![LayerShape { d: 8, k: 8, r: 1 }]);
        assert_eq!(adapter_param_count(&Adapter::zeros(&one)), 16);
        let two = AdapterLayout(vec![LayerShape { d: 64, k: 64, r: 4 }; 2]);
        assert_eq!(adapter_param_count(&Adapter::zeros(&two)), 1024);
        let doubled = AdapterLayout(two.0.iter().map(|s| LayerShape { r: 2 * s.r, ..*s }).collect());
        assert_eq!(doubled.param_count(), 2 * two.param_count());
    }

    #[test]
    fn rank_is_capped_per_layer() {
        let mut rng = Rng::new(8);
        let model = BaseModel::random(&[1, 6, 6, 1], Activation::Tanh, &mut rng).unwrap();
        let adapter = Adapter::init(&model, 4, 0.02, &mut rng).unwrap();
        assert_eq!(adapter.ranks(), vec![1, 4, 1]);
        adapter.check_conformable(&model).unwrap();
        let too_wide = Adapter::new(vec![LoraPair { a: Matrix::zeros(2, 1), b: Matrix::zeros(6, 2) }]).unwrap();
        let single = BaseModel::random(&[1, 6], Activation::Tanh, &mut rng).unwrap();
        assert!(too_wide.check_conformable(&single).is_err());
    }

    #[test]
    fn flatten_cases() {
        let layout = AdapterLayout(vec![LayerShape { d: 3, k: 2, r: 1 }, LayerShape { d: 2, k: 3, r: 2 }]);
        let zero = Adapter::zeros(&layout);
        assert!(zero.flatten().iter().all(|&v| v == 0.0));
        assert!(Adapter::unflatten(&layout, &[0.0; 3]).is_err());

        // Perturbing each coordinate of the structured form changes exactly
        // the matching flat position.
        let n = layout.param_count();
        let base: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let adapter = Adapter::unflatten(&layout, &base).unwrap();
        let mut seen = vec![false; n];
        for l in 0..adapter.pairs.len() {
            for which in 0..2 {
                let m = if which == 0 { &adapter.pairs[l].a } else { &adapter.pairs[l].b };
                for idx in 0..m.data().len() {
                    let mut changed = adapter.clone();
                    let target =
                        if which == 0 { &mut changed.pairs[l].a } else { &mut changed.pairs[l].b };
                    target.data_mut()[idx] += 100.0;
                    let flat = changed.flatten();
                    let diffs: Vec<usize> = (0..n).filter(|&i| flat[i] != base[i]).collect();
                    assert_eq!(diffs.len(), 1);
                    assert!(!seen[diffs[0]]);
                    seen[diffs[0]] = true;
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn binary_format_rejects_garbage() {
        assert!(Adapter::from_bytes(b"nope").is_err());
        let layout = AdapterLayout(vec![LayerShape { d: 2, k: 2, r: 1 }]);
        let mut bytes = Adapter::zeros(&layout).to_bytes();
        assert_eq!(&bytes[..4], b"LRAD");
        assert_eq!(bytes.len(), 12 + 12 + 8 * 4);
        bytes.pop();
        assert!(Adapter::from_bytes(&bytes).is_err());
    }

    #[test]
    fn training_never_touches_base() {
        let mut rng = Rng::new(9);
        let model = BaseModel::random(&[2, 4, 1], Activation::Tanh, &mut rng).unwrap();
        let snapshot = serde_json::to_vec(&model).unwrap();
        let mut adapter = Adapter::init(&model, 2, 0.5, &mut rng).unwrap();
        let x = gaussian_fill(&mut rng, 2, 8, 0.0, 1.0).unwrap();
        let y = gaussian_fill(&mut rng, 1, 8, 0.0, 1.0).unwrap();
        for _ in 0..20 {
            let g = loss_and_grad(&model, &adapter, &x, &y, LossKind::Mse).unwrap();
            adapter = sgd_step(&adapter, &g, 0.05).unwrap();
        }
        assert_eq!(serde_json::to_vec(&model).unwrap(), snapshot);
        assert!(frobenius_sq(&adapter.pairs[0].b) > 0.0);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn arb_adapter() -> impl Strategy<Value = Adapter> {
        prop::collection::vec((1usize..5, 1usize..5, 1usize..3), 1..4).prop_flat_map(|shapes| {
            let layout = AdapterLayout(
                shapes.into_iter().map(|(d, k, r)| LayerShape { d, k, r: r.min(d).min(k) }).collect(),
            );
            let n = layout.param_count();
            prop::collection::vec(-1e6f64..1e6, n).prop_map(move |v| Adapter::unflatten(&layout, &v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn flat_and_binary_round_trip(adapter in arb_adapter()) {
            let flat = adapter.flatten();
            prop_assert_eq!(flat.len(), adapter_param_count(&adapter));
            prop_assert_eq!(&Adapter::unflatten(&adapter.layout(), &flat).unwrap(), &adapter);
            let bytes = adapter.to_bytes();
            let back = Adapter::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            prop_assert_eq!(back, adapter);
        }
    }
}
