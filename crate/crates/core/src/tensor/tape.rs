use super::{gelu, gelu_grad, layer_norm, relu, relu_grad, softmax_rows, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for diagnostics and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddRowBias,
    MatMul,
    Transpose,
    Relu,
    Gelu,
    SoftmaxRows,
    LayerNorm,
    Square,
    SumAll,
    ConcatCols,
    Reshape,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 15] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddRowBias,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::SoftmaxRows,
        OpKind::LayerNorm,
        OpKind::Square,
        OpKind::SumAll,
        OpKind::ConcatCols,
        OpKind::Reshape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddRowBias => "add_row_bias",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Square => "square",
            OpKind::SumAll => "sum_all",
            OpKind::ConcatCols => "concat_cols",
            OpKind::Reshape => "reshape",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        std::iter::once(OpKind::Leaf)
            .chain(Self::DIFFERENTIABLE)
            .find(|k| k.name() == name)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        normalized: Tensor,
        inv_std: Vec<f64>,
        bias: Var,
    },
    Square(Var),
    SumAll(Var),
    ConcatCols(Vec<Var>),
    Reshape(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddRowBias(..) => OpKind::AddRowBias,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Relu(..) => OpKind::Relu,
            Op::Gelu(..) => OpKind::Gelu,
            Op::SoftmaxRows(..) => OpKind::SoftmaxRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Square(..) => OpKind::Square,
            Op::SumAll(..) => OpKind::SumAll,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::Reshape(..) => OpKind::Reshape,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of a computation.
///
/// Every node only references earlier nodes, so reverse insertion order is a
/// valid reverse topological order and the graph cannot contain cycles.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not reach the output.
    pub fn take_or_zeros(&mut self, v: Var, like: &Tensor) -> Tensor {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test fixture: makes the backward rule of `kind` deliberately wrong.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    /// `a[m, n] + bias[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let v = self.value(a).add_row_vector(self.value(bias))?;
        Ok(self.push(v, Op::AddRowBias(a, bias)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(relu);
        self.push(v, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    /// Row softmax; invalid columns get an additive `-inf` logit.
    pub fn softmax_rows(&mut self, a: Var, valid: Option<&[bool]>) -> Result<Var> {
        let v = softmax_rows(self.value(a), valid)?;
        Ok(self.push(v, Op::SoftmaxRows(a)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (v, cache) = layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized: cache.normalized,
                inv_std: cache.inv_std,
            },
        ))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let (m, _) = self.value(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pm != m {
                return Err(Error::shape("concat_cols", format!("row counts {m} vs {pm}")));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Tensor::new(&[m, n], out)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    /// Same values in row-major order under a new shape.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if !out.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got shape {:?}", out.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::ones(out.shape()));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let contributions = self.node_backward(node, &g)?;
            grads[idx] = Some(g);
            let corrupt = self.fault == Some(node.op.kind());
            for (var, mut delta) in contributions {
                if corrupt {
                    delta = delta.scale(1.5);
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&delta)?,
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| self.value(v);
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![(*a, g.mul(val(*b))?), (*b, g.mul(val(*a))?)],
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::AddRowBias(a, b) => vec![(*a, g.clone()), (*b, g.sum_rows()?)],
            Op::MatMul(a, b) => {
                let da = g.matmul(&val(*b).transpose()?)?;
                let db = val(*a).transpose()?.matmul(g)?;
                vec![(*a, da), (*b, db)]
            }
            Op::Transpose(a) => vec![(*a, g.transpose()?)],
            Op::Relu(a) => vec![(*a, g.zip_map(val(*a), "relu", |gi, x| gi * relu_grad(x))?)],
            Op::Gelu(a) => vec![(*a, g.zip_map(val(*a), "gelu", |gi, x| gi * gelu_grad(x))?)],
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let (m, n) = y.dims2()?;
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        dx[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*a, Tensor::new(&[m, n], dx)?)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let (m, n) = normalized.dims2()?;
                let gamma = val(*gain).data();
                let mut dx = vec![0.0; m * n];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for i in 0..m {
                    let h = normalized.row(i);
                    let gr = g.row(i);
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..n {
                        let dh = gr[j] * gamma[j];
                        sum_dh += dh;
                        sum_dh_h += dh * h[j];
                        dgain[j] += gr[j] * h[j];
                        dbias[j] += gr[j];
                    }
                    let scale = inv_std[i] / n as f64;
                    for j in 0..n {
                        let dh = gr[j] * gamma[j];
                        dx[i * n + j] = scale * (n as f64 * dh - sum_dh - h[j] * sum_dh_h);
                    }
                }
                vec![
                    (*x, Tensor::new(&[m, n], dx)?),
                    (*gain, Tensor::new(val(*gain).shape(), dgain)?),
                    (*bias, Tensor::new(val(*bias).shape(), dbias)?),
                ]
            }
            Op::Square(a) => vec![(*a, g.zip_map(val(*a), "square", |gi, x| 2.0 * x * gi)?)],
            Op::SumAll(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let (_, w) = val(p).dims2()?;
                    out.push((p, g.slice_cols(offset, offset + w)?));
                    offset += w;
                }
                out
            }
            Op::Reshape(a) => vec![(*a, g.clone().reshape(val(*a).shape())?)],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.square(x);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn reused_var_accumulates() {
        // f(x) = x * x + x at x = 2 -> f' = 2x + 1 = 5
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let sq = tape.mul(x, x).unwrap();
        let f = tape.add(sq, x).unwrap();
        let grads = tape.backward(f).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 5.0);
    }

    #[test]
    fn unreached_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let unused = tape.leaf(Tensor::scalar(1.0));
        let y = tape.square(x);
        let mut grads = tape.backward(y).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.take_or_zeros(unused, &Tensor::scalar(0.0)).item(), 0.0);
    }

    #[test]
    fn op_names_round_trip() {
        for k in OpKind::DIFFERENTIABLE {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
