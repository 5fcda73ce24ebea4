//! Eager-recording Wengert tape.
//!
//! Every operation computes its value immediately and records enough to replay
//! itself backwards. A [`Var`] is an index into the tape that created it;
//! handing a `Var` to a different tape is a logic error and surfaces as
//! `UnknownVar` or a shape mismatch at best.

use std::collections::HashMap;

use thiserror::Error;

use super::tensor::{gemm_into, sigmoid, softplus, Tensor2, TensorError};

#[derive(Debug, Error)]
pub enum AdError {
    #[error("node {index} ({op}): {source}")]
    Shape {
        index: usize,
        op: &'static str,
        source: TensorError,
    },
    #[error("variable does not belong to this tape")]
    UnknownVar,
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
    #[error("backward target must be 1x1, got {rows}x{cols}; use backward_seeded")]
    NonScalarOutput { rows: usize, cols: usize },
    #[error("seed shape {sr}x{sc} does not match output shape {or}x{oc}")]
    SeedShape {
        sr: usize,
        sc: usize,
        or: usize,
        oc: usize,
    },
}

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    BroadcastAddRow(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Abs(usize),
    Sigmoid(usize),
    Softplus(usize),
    Glu(usize),
    SumAll(usize),
    MeanAll(usize),
}

struct Node {
    op: Op,
    value: Tensor2,
}

/// Parameter gradients keyed by the name given to [`Tape::param`].
#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<String, Tensor2>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor2> {
        self.map.get(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor2)> {
        self.map.iter()
    }

    #[cfg(test)]
    pub(crate) fn insert_raw(&mut self, name: String, value: Tensor2) {
        self.map.insert(name, value);
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
    names: HashMap<String, usize>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor2) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<usize, AdError> {
        if v.0 < self.nodes.len() {
            Ok(v.0)
        } else {
            Err(AdError::UnknownVar)
        }
    }

    fn val(&self, idx: usize) -> &Tensor2 {
        &self.nodes[idx].value
    }

    pub fn value(&self, v: Var) -> Result<&Tensor2, AdError> {
        Ok(self.val(self.check(v)?))
    }

    /// Constant with respect to differentiation.
    pub fn input(&mut self, value: Tensor2) -> Var {
        self.push(Op::Input, value)
    }

    /// Named leaf that receives a gradient in [`Tape::backward`].
    pub fn param(&mut self, name: &str, value: Tensor2) -> Result<Var, AdError> {
        if self.names.contains_key(name) {
            return Err(AdError::DuplicateParam(name.to_string()));
        }
        let var = self.push(Op::Param, value);
        self.names.insert(name.to_string(), var.0);
        self.params.push((name.to_string(), var.0));
        Ok(var)
    }

    fn wrap(
        &mut self,
        op_name: &'static str,
        op: Op,
        value: Result<Tensor2, TensorError>,
    ) -> Result<Var, AdError> {
        match value {
            Ok(v) => Ok(self.push(op, v)),
            Err(source) => Err(AdError::Shape {
                index: self.nodes.len(),
                op: op_name,
                source,
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let value = self.val(a).matmul(self.val(b));
        self.wrap("matmul", Op::MatMul(a, b), value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let value = self.val(a).zip_map(self.val(b), "add", |x, y| x + y);
        self.wrap("add", Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let value = self.val(a).zip_map(self.val(b), "sub", |x, y| x - y);
        self.wrap("sub", Op::Sub(a, b), value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let value = self.val(a).zip_map(self.val(b), "mul", |x, y| x * y);
        self.wrap("mul", Op::Mul(a, b), value)
    }

    pub fn broadcast_add_row(&mut self, m: Var, row: Var) -> Result<Var, AdError> {
        let (m, row) = (self.check(m)?, self.check(row)?);
        let value = self.val(m).broadcast_add_row(self.val(row));
        self.wrap("broadcast_add_row", Op::BroadcastAddRow(m, row), value)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, AdError> {
        let a = self.check(a)?;
        let value = self.val(a).map(|x| -x);
        Ok(self.push(Op::Neg(a), value))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, AdError> {
        let a = self.check(a)?;
        let value = self.val(a).map(|x| c * x);
        Ok(self.push(Op::Scale(a, c), value))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, AdError> {
        let a = self.check(a)?;
        let value = self.val(a).map(|x| x + c);
        Ok(self.push(Op::AddScalar(a), value))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AdError> {
        let a = self.check(a)?;
        let value = self.val(a).map(|x| x.max(0.0));
        Ok(self.push(Op::Relu(a), value))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, AdError> {
        let a = self.check(a)?;
        let value = self.val(a).map(f64::abs);
        Ok(self.push(Op::Abs(a), value))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, AdError> {
        let a = self.check(a)?;
        let value = self.val(a).map(sigmoid);
        Ok(self.push(Op::Sigmoid(a), value))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, AdError> {
        let a = self.check(a)?;
        let value = self.val(a).map(softplus);
        Ok(self.push(Op::Softplus(a), value))
    }

    pub fn glu(&mut self, a: Var) -> Result<Var, AdError> {
        let a = self.check(a)?;
        let value = self.val(a).glu();
        self.wrap("glu", Op::Glu(a), value)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, AdError> {
        let a = self.check(a)?;
        let value = Tensor2::raw(1, 1, vec![self.val(a).sum()]);
        Ok(self.push(Op::SumAll(a), value))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, AdError> {
        let a = self.check(a)?;
        let t = self.val(a);
        let value = if t.is_empty() {
            Err(TensorError::BadShape {
                op: "mean_all",
                expected: "non-empty tensor",
                rows: t.rows(),
                cols: t.cols(),
            })
        } else {
            Ok(Tensor2::raw(1, 1, vec![t.sum() / t.len() as f64]))
        };
        self.wrap("mean_all", Op::MeanAll(a), value)
    }

    /// Gradient of a scalar output with respect to every parameter.
    pub fn backward(&self, output: Var) -> Result<Gradients, AdError> {
        let idx = self.check(output)?;
        let shape = self.val(idx).shape();
        if shape != (1, 1) {
            return Err(AdError::NonScalarOutput {
                rows: shape.0,
                cols: shape.1,
            });
        }
        self.backward_seeded(output, Tensor2::raw(1, 1, vec![1.0]))
    }

    /// Reverse pass from `output` with an explicit adjoint seed. The pass is a
    /// linear map of the seed, which tests exploit by scaling it.
    pub fn backward_seeded(&self, output: Var, seed: Tensor2) -> Result<Gradients, AdError> {
        let out_idx = self.check(output)?;
        let out_shape = self.val(out_idx).shape();
        if seed.shape() != out_shape {
            return Err(AdError::SeedShape {
                sr: seed.rows(),
                sc: seed.cols(),
                or: out_shape.0,
                oc: out_shape.1,
            });
        }

        let mut adjoints: Vec<Option<Tensor2>> = vec![None; out_idx + 1];
        adjoints[out_idx] = Some(seed);

        for idx in (0..=out_idx).rev() {
            let Some(grad) = adjoints[idx].take() else {
                continue;
            };
            match self.nodes[idx].op {
                Op::Input | Op::Param => {
                    adjoints[idx] = Some(grad);
                }
                Op::MatMul(a, b) => {
                    // c = a @ b  =>  da += g @ b^T, db += a^T @ g
                    {
                        let buf = slot(&mut adjoints, a, self.val(a).shape());
                        gemm_into(1.0, &grad, false, self.val(b), true, 1.0, buf);
                    }
                    {
                        let buf = slot(&mut adjoints, b, self.val(b).shape());
                        gemm_into(1.0, self.val(a), true, &grad, false, 1.0, buf);
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut adjoints, a, &grad);
                    acc(&mut adjoints, b, &grad);
                }
                Op::Sub(a, b) => {
                    acc(&mut adjoints, a, &grad);
                    acc_scaled(&mut adjoints, b, &grad, -1.0);
                }
                Op::Mul(a, b) => {
                    let da = grad.zip_map(self.val(b), "mul-bwd", |g, y| g * y).unwrap();
                    let db = grad.zip_map(self.val(a), "mul-bwd", |g, x| g * x).unwrap();
                    acc(&mut adjoints, a, &da);
                    acc(&mut adjoints, b, &db);
                }
                Op::BroadcastAddRow(m, row) => {
                    acc(&mut adjoints, m, &grad);
                    acc(&mut adjoints, row, &grad.col_sum());
                }
                Op::Neg(a) => acc_scaled(&mut adjoints, a, &grad, -1.0),
                Op::Scale(a, c) => acc_scaled(&mut adjoints, a, &grad, c),
                Op::AddScalar(a) => acc(&mut adjoints, a, &grad),
                Op::Relu(a) => {
                    let da = grad
                        .zip_map(self.val(a), "relu-bwd", |g, x| if x > 0.0 { g } else { 0.0 })
                        .unwrap();
                    acc(&mut adjoints, a, &da);
                }
                Op::Abs(a) => {
                    let da = grad
                        .zip_map(self.val(a), "abs-bwd", |g, x| g * sign_or_zero(x))
                        .unwrap();
                    acc(&mut adjoints, a, &da);
                }
                Op::Sigmoid(a) => {
                    // value holds sigma(x)
                    let da = grad
                        .zip_map(self.val(idx), "sigmoid-bwd", |g, s| g * s * (1.0 - s))
                        .unwrap();
                    acc(&mut adjoints, a, &da);
                }
                Op::Softplus(a) => {
                    let da = grad
                        .zip_map(self.val(a), "softplus-bwd", |g, x| g * sigmoid(x))
                        .unwrap();
                    acc(&mut adjoints, a, &da);
                }
                Op::Glu(a) => {
                    let input = self.val(a);
                    let h = input.cols() / 2;
                    let rows = input.rows();
                    let mut da = vec![0.0; input.len()];
                    for r in 0..rows {
                        let base = r * input.cols();
                        for c in 0..h {
                            let v = input.data()[base + c];
                            let s = sigmoid(input.data()[base + h + c]);
                            let g = grad.data()[r * h + c];
                            da[base + c] = g * s;
                            da[base + h + c] = g * v * s * (1.0 - s);
                        }
                    }
                    acc(
                        &mut adjoints,
                        a,
                        &Tensor2::raw(rows, input.cols(), da),
                    );
                }
                Op::SumAll(a) => {
                    let g = grad.data()[0];
                    let t = self.val(a);
                    acc(
                        &mut adjoints,
                        a,
                        &Tensor2::raw(t.rows(), t.cols(), vec![g; t.len()]),
                    );
                }
                Op::MeanAll(a) => {
                    let t = self.val(a);
                    let g = grad.data()[0] / t.len() as f64;
                    acc(
                        &mut adjoints,
                        a,
                        &Tensor2::raw(t.rows(), t.cols(), vec![g; t.len()]),
                    );
                }
            }
        }

        let mut out = Gradients::default();
        for (name, idx) in &self.params {
            if *idx <= out_idx {
                if let Some(g) = adjoints[*idx].take() {
                    out.map.insert(name.clone(), g);
                }
            }
        }
        Ok(out)
    }
}

fn sign_or_zero(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn slot(adjoints: &mut [Option<Tensor2>], idx: usize, shape: (usize, usize)) -> &mut Tensor2 {
    adjoints[idx].get_or_insert_with(|| Tensor2::zeros(shape.0, shape.1))
}

fn acc(adjoints: &mut [Option<Tensor2>], idx: usize, delta: &Tensor2) {
    acc_scaled(adjoints, idx, delta, 1.0);
}

fn acc_scaled(adjoints: &mut [Option<Tensor2>], idx: usize, delta: &Tensor2, alpha: f64) {
    let buf = slot(adjoints, idx, delta.shape());
    buf.axpy(alpha, delta).unwrap();
}
