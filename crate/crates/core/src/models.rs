//! Multilayer perceptrons used as the surrogate/victim classifier and as
//! the class-conditional score network, plus the `CWMD` model file format.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diff::{Bindings, Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{self, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl ArchSpec {
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize, activation: Activation) -> Self {
        Self {
            input_dim,
            hidden: hidden.to_vec(),
            output_dim,
            activation,
        }
    }

    /// Default classifier: `d -> 64 -> 64 -> K`, relu.
    pub fn classifier(dim: usize, classes: usize) -> Self {
        Self::new(dim, &[64, 64], classes, Activation::Relu)
    }

    /// Default score network: `(d + K) -> 128 -> 128 -> d`, tanh.
    pub fn score(dim: usize, classes: usize) -> Self {
        Self::new(dim + classes, &[128, 128], dim, Activation::Tanh)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "architecture dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for each affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &h in self.hidden.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Fully connected network; weights are stored `[fan_in, fan_out]` so a
/// layer computes `x · W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T: Scalar = f32> {
    spec: ArchSpec,
    weights: Vec<Tensor<T>>,
    biases: Vec<Tensor<T>>,
}

/// Leaf handles of an MLP built into a graph.
#[derive(Debug, Clone)]
pub struct MlpNodes {
    pub output: NodeId,
    pub params: Vec<NodeId>,
}

impl<T: Scalar> Mlp<T> {
    /// Uniform weights in `±sqrt(6 / (fan_in + fan_out))`, drawn layer by
    /// layer in row-major order; zero biases.
    pub fn init(spec: &ArchSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::rng_from_seed(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (fan_in, fan_out) in spec.layer_dims() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| T::of(rng::symmetric_uniform(&mut rng, bound)))
                .collect();
            weights.push(Tensor::new(vec![fan_in, fan_out], data)?);
            biases.push(Tensor::zeros(&[fan_out]));
        }
        Ok(Self {
            spec: spec.clone(),
            weights,
            biases,
        })
    }

    pub fn zeros(spec: &ArchSpec) -> Result<Self> {
        spec.validate()?;
        let (weights, biases) = spec
            .layer_dims()
            .into_iter()
            .map(|(i, o)| (Tensor::zeros(&[i, o]), Tensor::zeros(&[o])))
            .unzip();
        Ok(Self {
            spec: spec.clone(),
            weights,
            biases,
        })
    }

    /// Assemble from explicit parameters `[w0, b0, w1, b1, ...]`.
    pub fn from_params(spec: &ArchSpec, params: Vec<Tensor<T>>) -> Result<Self> {
        spec.validate()?;
        let dims = spec.layer_dims();
        if params.len() != 2 * dims.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameter tensors, got {}",
                2 * dims.len(),
                params.len()
            )));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut it = params.into_iter();
        for (i, o) in dims {
            let w = it.next().expect("len checked");
            let b = it.next().expect("len checked");
            if w.shape() != [i, o] || b.shape() != [o] {
                return Err(Error::ShapeMismatch {
                    op: "from_params",
                    shapes: vec![w.shape().to_vec(), b.shape().to_vec()],
                });
            }
            weights.push(w);
            biases.push(b);
        }
        Ok(Self {
            spec: spec.clone(),
            weights,
            biases,
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    /// Parameters in `[w0, b0, w1, b1, ...]` order.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    /// Append this network to `g`, reading from `input`.
    pub fn build(&self, g: &mut Graph, input: NodeId) -> MlpNodes {
        let mut h = input;
        let mut params = Vec::new();
        let last = self.weights.len() - 1;
        for i in 0..self.weights.len() {
            let w = g.param(format!("w{i}"));
            let b = g.param(format!("b{i}"));
            params.push(w);
            params.push(b);
            h = g.affine(h, w, b);
            if i < last {
                h = match self.spec.activation {
                    Activation::Relu => g.relu(h),
                    Activation::Tanh => g.tanh(h),
                };
            }
        }
        MlpNodes { output: h, params }
    }

    pub fn bind<'a>(&'a self, nodes: &MlpNodes, bindings: &mut Bindings<'a, T>) {
        for (id, p) in nodes.params.iter().zip(self.params()) {
            bindings.bind(*id, p);
        }
    }

    /// Plain forward pass; same kernels and order as the graph path.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, cols) = tensor::expect_matrix("mlp_forward", x)?;
        if cols != self.spec.input_dim {
            return Err(Error::ShapeMismatch {
                op: "mlp_forward",
                shapes: vec![x.shape().to_vec(), vec![self.spec.input_dim]],
            });
        }
        let last = self.weights.len() - 1;
        let mut h = tensor::affine(x, &self.weights[0], &self.biases[0])?;
        for i in 1..=last {
            h = self.activate(&h);
            h = tensor::affine(&h, &self.weights[i], &self.biases[i])?;
        }
        if !h.is_finite() {
            return Err(Error::NonFinite { op: "mlp_forward" });
        }
        Ok(h)
    }

    fn activate(&self, h: &Tensor<T>) -> Tensor<T> {
        match self.spec.activation {
            Activation::Relu => tensor::relu(h),
            Activation::Tanh => tensor::tanh(h),
        }
    }

    /// `θ ← θ − lr · g` with `grads` in [`Mlp::params`] order.
    pub fn sgd_step(&mut self, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        let lr = T::of(lr);
        let params = self.params_mut();
        if grads.len() != params.len() {
            return Err(Error::InvalidConfig("gradient count mismatch".into()));
        }
        for (p, g) in params.into_iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "sgd_step",
                    shapes: vec![p.shape().to_vec(), g.shape().to_vec()],
                });
            }
            for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv = *pv - lr * gv;
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        Mlp {
            spec: self.spec.clone(),
            weights: self.weights.iter().map(Tensor::cast).collect(),
            biases: self.biases.iter().map(Tensor::cast).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Mean,
    /// Sum of per-example losses. Per-example input gradients then do not
    /// depend on how a batch is split.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GradRequest {
    pub inputs: bool,
    pub params: bool,
}

impl GradRequest {
    pub const NONE: Self = Self {
        inputs: false,
        params: false,
    };
    pub const INPUTS: Self = Self {
        inputs: true,
        params: false,
    };
    pub const PARAMS: Self = Self {
        inputs: false,
        params: true,
    };
}

#[derive(Debug, Clone)]
pub struct LossOutput<T: Scalar> {
    pub loss: T,
    pub per_example: Vec<T>,
    pub input_grad: Option<Tensor<T>>,
    pub param_grads: Option<Vec<Tensor<T>>>,
}

/// Classifier `x -> K logits`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel<T: Scalar = f32> {
    pub net: Mlp<T>,
}

impl<T: Scalar> ClassifierModel<T> {
    pub fn init(spec: &ArchSpec, seed: u64) -> Result<Self> {
        Ok(Self {
            net: Mlp::init(spec, seed)?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.net.spec.output_dim
    }

    pub fn input_dim(&self) -> usize {
        self.net.spec.input_dim
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.net.forward(x)
    }

    /// Argmax class per row, ties to the lowest index.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let z = self.logits(x)?;
        Ok((0..z.rows()).map(|r| tensor::argmax(z.row(r))).collect())
    }

    /// Softmax cross-entropy over the batch with optional gradients.
    pub fn loss(
        &self,
        x: &Tensor<T>,
        labels: &[usize],
        reduction: Reduction,
        req: GradRequest,
    ) -> Result<LossOutput<T>> {
        let k = self.num_classes();
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::LabelOutOfRange {
                label: bad as f64,
                classes: k,
            });
        }
        let mut g = Graph::new();
        let xin = g.leaf("x", req.inputs);
        let yin = g.input("y");
        let nodes = self.net.build(&mut g, xin);
        let per = g.softmax_xent(nodes.output, yin);
        match reduction {
            Reduction::Mean => g.mean(per),
            Reduction::Sum => g.sum(per),
        };
        let y = tensor::label_tensor(labels);
        let mut b = Bindings::new();
        b.bind(xin, x).bind(yin, &y);
        self.net.bind(&nodes, &mut b);
        let ev = g.evaluate(&b)?;
        let loss = ev.output().item();
        let per_example = ev.value(per).data().to_vec();
        let mut wrt = Vec::new();
        if req.inputs {
            wrt.push(xin);
        }
        if req.params {
            wrt.extend(&nodes.params);
        }
        let (input_grad, param_grads) = if wrt.is_empty() {
            (None, None)
        } else {
            let mut grads = ev.backward(&wrt)?;
            let ig = if req.inputs { grads.take(xin) } else { None };
            let pg = if req.params {
                Some(
                    nodes
                        .params
                        .iter()
                        .map(|&p| grads.take(p).expect("requested"))
                        .collect(),
                )
            } else {
                None
            };
            (ig, pg)
        };
        Ok(LossOutput {
            loss,
            per_example,
            input_grad,
            param_grads,
        })
    }
}

/// Class-conditional score network `s(x, y)`; the label enters as a
/// one-hot block concatenated to `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModel<T: Scalar = f32> {
    pub net: Mlp<T>,
    sigma: f64,
    num_classes: usize,
}

impl<T: Scalar> ScoreModel<T> {
    pub fn new(net: Mlp<T>, num_classes: usize, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidConfig(format!("sigma must be positive, got {sigma}")));
        }
        let spec = net.spec();
        if spec.input_dim != spec.output_dim + num_classes {
            return Err(Error::InvalidConfig(format!(
                "score net input {} must equal data dim {} + classes {}",
                spec.input_dim, spec.output_dim, num_classes
            )));
        }
        Ok(Self {
            net,
            sigma,
            num_classes,
        })
    }

    pub fn init(spec: &ArchSpec, num_classes: usize, sigma: f64, seed: u64) -> Result<Self> {
        Self::new(Mlp::init(spec, seed)?, num_classes, sigma)
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.net.spec().output_dim
    }

    fn check_batch(&self, x: &Tensor<T>, labels: &[usize]) -> Result<()> {
        let (n, d) = tensor::expect_matrix("score_eval", x)?;
        if d != self.dim() || n != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "score_eval",
                shapes: vec![x.shape().to_vec(), vec![labels.len(), self.dim()]],
            });
        }
        Ok(())
    }

    /// Score vectors for a batch, `[n, d]`.
    pub fn eval(&self, x: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
        self.check_batch(x, labels)?;
        let input = tensor::concat_cols(x, &tensor::one_hot(labels, self.num_classes)?)?;
        self.net.forward(&input)
    }

    /// Build `s([x | onehot])` into `g`.
    pub fn build(&self, g: &mut Graph, x: NodeId, onehot: NodeId) -> MlpNodes {
        let input = g.concat_cols(x, onehot);
        self.net.build(g, input)
    }

    /// `Σ_i ‖s(x_i, y_i)‖₂` and its gradient with respect to `x`.
    pub fn norm_sum_grad(&self, x: &Tensor<T>, labels: &[usize]) -> Result<(Vec<T>, Tensor<T>)> {
        self.check_batch(x, labels)?;
        let onehot = tensor::one_hot(labels, self.num_classes)?;
        let mut g = Graph::new();
        let xin = g.param("x");
        let oh = g.input("onehot");
        let nodes = self.build(&mut g, xin, oh);
        let norms = g.row_norm(nodes.output);
        g.sum(norms);
        let mut b = Bindings::new();
        b.bind(xin, x).bind(oh, &onehot);
        self.net.bind(&nodes, &mut b);
        let ev = g.evaluate(&b)?;
        let per = ev.value(norms).data().to_vec();
        let mut grads = ev.backward(&[xin])?;
        Ok((per, grads.take(xin).expect("requested")))
    }
}

const MODEL_MAGIC: [u8; 4] = *b"CWMD";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    arch: ArchSpec,
    precision: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_classes: Option<usize>,
}

/// Models that can be written as `CWMD` files.
pub trait ModelFile: Sized {
    const KIND: u8;
    const KIND_NAME: &'static str;
    fn to_bytes(&self) -> Result<Vec<u8>>;
    fn from_bytes(bytes: &[u8]) -> Result<Self>;
}

fn kind_name(kind: u8) -> &'static str {
    match kind {
        0 => "classifier",
        1 => "score",
        _ => "unknown",
    }
}

fn encode_model<T: Scalar>(kind: u8, net: &Mlp<T>, sigma: Option<f64>, num_classes: Option<usize>) -> Result<Vec<u8>> {
    let header = ModelHeader {
        arch: net.spec().clone(),
        precision: T::PRECISION.name().to_string(),
        sigma,
        num_classes,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + net.spec().num_params() * 8);
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.push(kind);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in net.params() {
        for &v in p.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated { what })?;
        if end > self.bytes.len() {
            return Err(Error::Truncated { what });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4, "magic")?.try_into().expect("4 bytes");
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32(&mut self, what: &'static str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Malformed(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn decode_model<T: Scalar>(bytes: &[u8], expected_kind: u8) -> Result<(Mlp<T>, ModelHeader)> {
    let mut r = Reader::new(bytes);
    r.magic(MODEL_MAGIC)?;
    let version = r.u32("version")?;
    if version != MODEL_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            supported: MODEL_VERSION,
        });
    }
    let kind = r.u8("kind")?;
    if kind != expected_kind {
        return Err(Error::KindMismatch {
            expected: kind_name(expected_kind),
            found: kind_name(kind),
        });
    }
    let len = r.u32("header length")? as usize;
    let header: ModelHeader = serde_json::from_slice(r.take(len, "header")?)?;
    if header.precision != T::PRECISION.name() {
        return Err(Error::PrecisionMismatch {
            expected: T::PRECISION.name(),
            found: header.precision,
        });
    }
    header.arch.validate()?;
    let width = T::PRECISION.byte_width();
    let mut params = Vec::new();
    for (i, o) in header.arch.layer_dims() {
        for shape in [vec![i, o], vec![o]] {
            let count: usize = shape.iter().product();
            let raw = r.take(count * width, "parameters")?;
            let data = raw.chunks_exact(width).map(T::read_le).collect();
            params.push(Tensor::new(shape, data)?);
        }
    }
    r.finish()?;
    let net = Mlp::from_params(&header.arch, params)?;
    if !net.is_finite() {
        return Err(Error::Malformed("non-finite parameters".into()));
    }
    Ok((net, header))
}

impl<T: Scalar> ModelFile for ClassifierModel<T> {
    const KIND: u8 = 0;
    const KIND_NAME: &'static str = "classifier";

    fn to_bytes(&self) -> Result<Vec<u8>> {
        encode_model(Self::KIND, &self.net, None, None)
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (net, _) = decode_model(bytes, Self::KIND)?;
        Ok(Self { net })
    }
}

impl<T: Scalar> ModelFile for ScoreModel<T> {
    const KIND: u8 = 1;
    const KIND_NAME: &'static str = "score";

    fn to_bytes(&self) -> Result<Vec<u8>> {
        encode_model(Self::KIND, &self.net, Some(self.sigma), Some(self.num_classes))
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (net, header) = decode_model(bytes, Self::KIND)?;
        let sigma = header
            .sigma
            .ok_or_else(|| Error::Malformed("score model without sigma".into()))?;
        let k = header
            .num_classes
            .ok_or_else(|| Error::Malformed("score model without class count".into()))?;
        ScoreModel::new(net, k, sigma)
    }
}

pub fn save_model<M: ModelFile>(model: &M, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, model.to_bytes()?)?;
    Ok(())
}

pub fn load_model<M: ModelFile>(path: impl AsRef<Path>) -> Result<M> {
    M::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let spec = ArchSpec::classifier(3, 2);
        let a = Mlp::<f32>::init(&spec, 1).unwrap();
        let b = Mlp::<f32>::init(&spec, 1).unwrap();
        let c = Mlp::<f32>::init(&spec, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (p, (i, o)) in a.params().iter().step_by(2).zip(spec.layer_dims()) {
            let bound = (6.0 / (i + o) as f64).sqrt() as f32;
            assert!(p.max_abs() <= bound);
        }
        assert!(a.params().iter().skip(1).step_by(2).all(|b| b.max_abs() == 0.0));
    }

    #[test]
    fn linear_model_shape() {
        let spec = ArchSpec::new(5, &[], 3, Activation::Relu);
        let m = Mlp::<f32>::init(&spec, 0).unwrap();
        let p = m.params();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].shape(), &[5, 3]);
        assert_eq!(p[1].shape(), &[3]);
    }

    #[test]
    fn uniform_logits_loss_is_ln2() {
        let spec = ArchSpec::new(2, &[4], 2, Activation::Relu);
        let m = ClassifierModel {
            net: Mlp::<f64>::zeros(&spec).unwrap(),
        };
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let out = m.loss(&x, &[0, 1], Reduction::Mean, GradRequest::NONE).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(m.loss(&x, &[0, 2], Reduction::Mean, GradRequest::NONE).is_err());
    }

    #[test]
    fn confident_correct_loss_vanishes() {
        let spec = ArchSpec::new(1, &[], 2, Activation::Relu);
        let w = Tensor::<f64>::matrix(1, 2, vec![-50.0, 50.0]).unwrap();
        let b = Tensor::vector(vec![0.0, 0.0]);
        let m = ClassifierModel {
            net: Mlp::from_params(&spec, vec![w, b]).unwrap(),
        };
        let x = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let out = m.loss(&x, &[1], Reduction::Mean, GradRequest::NONE).unwrap();
        assert!(out.loss >= 0.0 && out.loss < 1e-40);
    }

    #[test]
    fn zero_score_network_is_zero() {
        let spec = ArchSpec::score(3, 2);
        let s = ScoreModel::new(Mlp::<f32>::zeros(&spec).unwrap(), 2, 0.5).unwrap();
        let x = Tensor::matrix(4, 3, vec![0.3; 12]).unwrap();
        let out = s.eval(&x, &[0, 1, 1, 0]).unwrap();
        assert_eq!(out.shape(), &[4, 3]);
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(s.eval(&x, &[0, 1]).is_err());
    }

    #[test]
    fn model_files_roundtrip_and_reject_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ArchSpec::score(2, 2);
        let s = ScoreModel::<f32>::init(&spec, 2, 0.5, 3).unwrap();
        let path = dir.path().join("s.cwmd");
        save_model(&s, &path).unwrap();
        let back: ScoreModel<f32> = load_model(&path).unwrap();
        assert_eq!(back, s);

        assert!(matches!(
            load_model::<ClassifierModel<f32>>(&path),
            Err(Error::KindMismatch { .. })
        ));
        assert!(matches!(
            load_model::<ScoreModel<f64>>(&path),
            Err(Error::PrecisionMismatch { .. })
        ));

        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(ScoreModel::<f32>::from_bytes(&bytes), Err(Error::Truncated { .. })));
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        assert!(matches!(ScoreModel::<f32>::from_bytes(&bytes), Err(Error::BadMagic { .. })));
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 9;
        assert!(matches!(
            ScoreModel::<f32>::from_bytes(&bytes),
            Err(Error::VersionMismatch { .. })
        ));
    }
}
