//! Tape-based reverse-mode differentiation.
//!
//! Every differentiable operation pushes a node holding its output value and a
//! boxed [`Backward`] rule. Modules that own a model-level operation (the
//! quantizer, the decorrelation loss, ...) implement their own rules next to
//! the forward math, so the tape itself only knows generic plumbing.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
///
/// Returns one entry per input; `None` means "no gradient flows there".
pub trait Backward {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    rule: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn record(&mut self, value: Tensor, inputs: &[Var], rule: impl Backward + 'static) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let rule: Option<Box<dyn Backward>> = if requires_grad {
            Some(Box::new(rule))
        } else {
            None
        };
        self.push(value, inputs.to_vec(), rule, requires_grad)
    }

    fn push(
        &mut self,
        value: Tensor,
        inputs: Vec<Var>,
        rule: Option<Box<dyn Backward>>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            inputs,
            rule,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of the scalar `root` with respect to every leaf it depends on.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let root_node = &self.nodes[root.0];
        grads[root.0] = Some(Tensor::ones(root_node.value.shape()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(rule) = &node.rule else { continue };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let input_grads = rule.backward(&inputs, &node.value, &grad);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (v, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[v.0].value.shape());
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Gradients { grads }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.record(out, &[a, b], AddRule))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.record(out, &[a, b], MulRule))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.record(out, &[a], ScaleRule(c))
    }

    /// `Σ c_i · v_i` over one-element tensors.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, c) in terms {
            let t = self.value(v);
            if t.numel() != 1 {
                return Err(Error::Shape(format!(
                    "weighted_sum term has shape {:?}",
                    t.shape()
                )));
            }
            total += c * t.item();
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let coeffs = terms.iter().map(|t| t.1).collect();
        Ok(self.record(Tensor::scalar(total), &vars, WeightedSumRule(coeffs)))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).sum();
        Ok(self.record(Tensor::scalar(total), &[a], SumRule))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.record(out, &[a], ExpRule)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.record(out, &[a], ReluRule)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.record(out, &[a], SigmoidRule)
    }

    /// `x / s` for a one-element `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(Error::Shape(format!("divisor has shape {:?}", sv.shape())));
        }
        let d = sv.item();
        let out = self.value(x).map(|v| v / d);
        Ok(self.record(out, &[x, s], DivScalarRule))
    }

    /// Row-wise softmax of a `[M, N]` matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.value(x).dims2()?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        Ok(self.record(out, &[x], SoftmaxRowsRule))
    }

    /// `[M, K] x [K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul [{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            Mat::new(self.value(a).data(), m, k),
            Mat::new(self.value(b).data(), k, n),
            &mut out,
            0.0,
        );
        Ok(self.record(Tensor::new(&[m, n], out)?, &[a, b], MatmulRule))
    }

    /// Affine map of rows: `x [M, I] · w [I, O] + bias [O]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (m, i) = self.value(x).dims2()?;
        let (i2, o) = self.value(w).dims2()?;
        if i != i2 || self.value(bias).numel() != o {
            return Err(Error::Shape(format!(
                "linear input [{m}, {i}] with weight [{i2}, {o}] and bias {:?}",
                self.value(bias).shape()
            )));
        }
        let mut out = Vec::with_capacity(m * o);
        for _ in 0..m {
            out.extend_from_slice(self.value(bias).data());
        }
        gemm(
            Mat::new(self.value(x).data(), m, i),
            Mat::new(self.value(w).data(), i, o),
            &mut out,
            1.0,
        );
        Ok(self.record(Tensor::new(&[m, o], out)?, &[x, w, bias], LinearRule))
    }

    pub fn to_rows(&mut self, x: Var) -> Result<Var> {
        let (_, _, h, w) = self.value(x).dims4()?;
        let out = self.value(x).nchw_to_rows()?;
        Ok(self.record(out, &[x], ToRowsRule { h, w }))
    }

    pub fn from_rows(&mut self, x: Var, b: usize, h: usize, w: usize) -> Result<Var> {
        let out = self.value(x).rows_to_nchw(b, h, w)?;
        Ok(self.record(out, &[x], FromRowsRule))
    }

    /// Concatenate `[B, C_i, H, W]` maps along channels.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]).dims4()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (b, c, h, w) = self.value(p).dims4()?;
            if (b, h, w) != (first.0, first.2, first.3) {
                return Err(Error::Shape(format!(
                    "cannot concat [{b}, {c}, {h}, {w}] with [{}, _, {}, {}]",
                    first.0, first.2, first.3
                )));
            }
            widths.push(c);
        }
        let (b, _, h, w) = first;
        let hw = h * w;
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(b * total * hw);
        for bi in 0..b {
            for (&p, &c) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[bi * c * hw..(bi + 1) * c * hw]);
            }
        }
        let out = Tensor::new(&[b, total, h, w], out)?;
        Ok(self.record(out, parts, ConcatChannelsRule { widths }))
    }

    /// Channels `[start, start + len)` of a `[B, C, H, W]` map.
    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if start + len > c {
            return Err(Error::Shape(format!(
                "channel range {start}..{} out of {c}",
                start + len
            )));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(b * len * hw);
        for bi in 0..b {
            out.extend_from_slice(
                &self.value(x).data()[(bi * c + start) * hw..(bi * c + start + len) * hw],
            );
        }
        let out = Tensor::new(&[b, len, h, w], out)?;
        Ok(self.record(out, &[x], NarrowChannelsRule { start, channels: c }))
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

struct AddRule;
impl Backward for AddRule {
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(grad.clone()), Some(grad.clone())]
    }
}

struct MulRule;
impl Backward for MulRule {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![
            Some(grad.zip_map(inputs[1], |g, b| g * b)),
            Some(grad.zip_map(inputs[0], |g, a| g * a)),
        ]
    }
}

struct ScaleRule(f64);
impl Backward for ScaleRule {
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(grad.scale(self.0))]
    }
}

struct WeightedSumRule(Vec<f64>);
impl Backward for WeightedSumRule {
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let g = grad.item();
        self.0
            .iter()
            .map(|&c| Some(Tensor::scalar(c * g)))
            .collect()
    }
}

struct SumRule;
impl Backward for SumRule {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::full(inputs[0].shape(), grad.item()))]
    }
}

struct ExpRule;
impl Backward for ExpRule {
    fn backward(&self, _: &[&Tensor], out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(grad.zip_map(out, |g, y| g * y))]
    }
}

struct ReluRule;
impl Backward for ReluRule {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(
            grad.zip_map(inputs[0], |g, x| if x > 0.0 { g } else { 0.0 }),
        )]
    }
}

struct SigmoidRule;
impl Backward for SigmoidRule {
    fn backward(&self, _: &[&Tensor], out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(grad.zip_map(out, |g, y| g * y * (1.0 - y)))]
    }
}

struct DivScalarRule;
impl Backward for DivScalarRule {
    fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let s = inputs[1].item();
        let dx = grad.scale(1.0 / s);
        let ds: f64 = grad
            .data()
            .iter()
            .zip(out.data())
            .map(|(g, y)| -g * y / s)
            .sum();
        vec![
            Some(dx),
            Some(Tensor::new(inputs[1].shape(), vec![ds]).expect("scalar")),
        ]
    }
}

struct SoftmaxRowsRule;
impl Backward for SoftmaxRowsRule {
    fn backward(&self, _: &[&Tensor], out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let n = out.shape()[1];
        let mut dx = vec![0.0; out.numel()];
        for ((d, y), g) in dx
            .chunks_mut(n)
            .zip(out.data().chunks(n))
            .zip(grad.data().chunks(n))
        {
            let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
            for j in 0..n {
                d[j] = y[j] * (g[j] - dot);
            }
        }
        vec![Some(Tensor::new(out.shape(), dx).expect("shape"))]
    }
}

struct MatmulRule;
impl Backward for MatmulRule {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (m, k) = (inputs[0].shape()[0], inputs[0].shape()[1]);
        let n = inputs[1].shape()[1];
        let g = Mat::new(grad.data(), m, n);
        let mut da = vec![0.0; m * k];
        gemm(g, Mat::new(inputs[1].data(), k, n).t(), &mut da, 0.0);
        let mut db = vec![0.0; k * n];
        gemm(Mat::new(inputs[0].data(), m, k).t(), g, &mut db, 0.0);
        vec![
            Some(Tensor::new(&[m, k], da).expect("shape")),
            Some(Tensor::new(&[k, n], db).expect("shape")),
        ]
    }
}

struct LinearRule;
impl Backward for LinearRule {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (m, i) = (inputs[0].shape()[0], inputs[0].shape()[1]);
        let o = inputs[1].shape()[1];
        let g = Mat::new(grad.data(), m, o);
        let mut dx = vec![0.0; m * i];
        gemm(g, Mat::new(inputs[1].data(), i, o).t(), &mut dx, 0.0);
        let mut dw = vec![0.0; i * o];
        gemm(Mat::new(inputs[0].data(), m, i).t(), g, &mut dw, 0.0);
        let mut db = vec![0.0; o];
        for row in grad.data().chunks(o) {
            for (d, r) in db.iter_mut().zip(row) {
                *d += r;
            }
        }
        vec![
            Some(Tensor::new(&[m, i], dx).expect("shape")),
            Some(Tensor::new(&[i, o], dw).expect("shape")),
            Some(Tensor::new(inputs[2].shape(), db).expect("shape")),
        ]
    }
}

struct ToRowsRule {
    h: usize,
    w: usize,
}
impl Backward for ToRowsRule {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let b = inputs[0].shape()[0];
        vec![Some(grad.rows_to_nchw(b, self.h, self.w).expect("shape"))]
    }
}

struct FromRowsRule;
impl Backward for FromRowsRule {
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(grad.nchw_to_rows().expect("shape"))]
    }
}

struct ConcatChannelsRule {
    widths: Vec<usize>,
}
impl Backward for ConcatChannelsRule {
    fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (b, total, h, w) = out.dims4().expect("rank 4");
        let hw = h * w;
        let mut offset = 0;
        let mut grads = Vec::with_capacity(inputs.len());
        for (inp, &c) in inputs.iter().zip(&self.widths) {
            let mut d = Vec::with_capacity(inp.numel());
            for bi in 0..b {
                let start = (bi * total + offset) * hw;
                d.extend_from_slice(&grad.data()[start..start + c * hw]);
            }
            grads.push(Some(Tensor::new(inp.shape(), d).expect("shape")));
            offset += c;
        }
        grads
    }
}

struct NarrowChannelsRule {
    start: usize,
    channels: usize,
}
impl Backward for NarrowChannelsRule {
    fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (b, len, h, w) = out.dims4().expect("rank 4");
        let hw = h * w;
        let mut d = Tensor::zeros(inputs[0].shape());
        for bi in 0..b {
            let dst = (bi * self.channels + self.start) * hw;
            d.data_mut()[dst..dst + len * hw]
                .copy_from_slice(&grad.data()[bi * len * hw..(bi + 1) * len * hw]);
        }
        vec![Some(d)]
    }
}

/// Compare tape gradients of a scalar function against central differences.
///
/// `build` receives the graph and one leaf per entry of `inputs` and returns
/// the scalar output. Returns the worst relative error
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)` over every input
/// element.
pub fn check_gradients(
    inputs: &[Tensor],
    step: f64,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out);
    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut worst: f64 = 0.0;
    for (idx, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[idx])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for e in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[idx].data_mut()[e] += step;
            let mut minus = inputs.to_vec();
            minus[idx].data_mut()[e] -= step;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let a = analytic.data()[e];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
