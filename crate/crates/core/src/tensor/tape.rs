use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeometry, NormSaved};
use super::{Element, Padding, Tensor, gemm};
use crate::error::{HdcError, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op<F> {
    Leaf,
    Conv3d {
        input: Var,
        kernel: Var,
        bias: Var,
        geo: ConvGeometry,
    },
    InstanceNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        saved: NormSaved<F>,
    },
    Relu(Var),
    SpatialPool {
        input: Var,
        positions: usize,
    },
    SelectTime {
        input: Var,
        index: usize,
    },
    GlobalPool {
        input: Var,
        positions: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Cosine {
        left: Var,
        right: Var,
        left_norms: Vec<F>,
        right_norms: Vec<F>,
    },
    DiagCrossEntropy {
        logits: Var,
        probs: Vec<F>,
    },
    Scale {
        input: Var,
        factor: F,
    },
    Add(Var, Var),
    Sum(Var),
    Square(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Append-only record of executed operations. Each node is written once and
/// refers only to earlier nodes, so the recorded graph is acyclic by construction.
pub struct GradTape<F: Element> {
    id: u64,
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Element> Default for GradTape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Element> GradTape<F> {
    pub fn new() -> Self {
        GradTape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<F> {
        &self.node(var).value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.node(var).value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.node(var).requires_grad
    }

    /// Accumulated gradient of a node, if backward has reached it.
    pub fn grad(&self, var: Var) -> Option<&[F]> {
        self.check(var).ok()?;
        self.grads[var.index].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn node(&self, var: Var) -> &Node<F> {
        assert_eq!(var.tape, self.id, "variable belongs to a different tape");
        &self.nodes[var.index]
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(HdcError::Tape(format!(
                "variable {} is not recorded on this tape",
                var.index
            )));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        let var = Var {
            tape: self.id,
            index: self.nodes.len(),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        var
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<F>,
        op: Op<F>,
        inputs: &[Var],
    ) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(HdcError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        Ok(self.push(Tensor::new(shape, data)?, op, requires_grad))
    }

    fn inputs_valid(&self, vars: &[Var]) -> Result<()> {
        vars.iter().try_for_each(|v| self.check(*v))
    }

    pub fn conv3d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: [usize; 3],
        padding: Padding,
    ) -> Result<Var> {
        self.inputs_valid(&[input, kernel, bias])?;
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias));
        if b.rank() != 1 {
            return Err(HdcError::shape("conv3d", "bias must be rank 1"));
        }
        let geo = ConvGeometry::new(x.shape(), k.shape(), b.numel(), stride, padding)?;
        let out = kernels::conv3d_forward(&geo, x.data(), k.data(), b.data());
        let op = Op::Conv3d {
            input,
            kernel,
            bias,
            geo,
        };
        self.push_checked(
            "conv3d",
            geo.output_shape(),
            out,
            op,
            &[input, kernel, bias],
        )
    }

    /// Per-instance, per-channel normalization over all axes between batch and channel.
    pub fn instance_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.inputs_valid(&[input, gamma, beta])?;
        let x = self.value(input);
        if x.rank() < 3 {
            return Err(HdcError::shape(
                "instance_norm",
                "input must be [B, ..., C]",
            ));
        }
        let shape = x.shape().to_vec();
        let (batch, channels) = (shape[0], shape[shape.len() - 1]);
        let positions: usize = shape[1..shape.len() - 1].iter().product();
        if eps <= 0.0 && positions < 2 {
            return Err(HdcError::InvalidArgument(
                "instance_norm over a single position needs eps > 0".into(),
            ));
        }
        if eps < 0.0 {
            return Err(HdcError::InvalidArgument(
                "instance_norm eps must be positive".into(),
            ));
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.shape() != [channels] || b.shape() != [channels] {
            return Err(HdcError::shape(
                "instance_norm",
                format!("gamma/beta must have shape [{channels}]"),
            ));
        }
        let (y, saved) = kernels::instance_norm_forward(
            x.data(),
            batch,
            positions,
            channels,
            g.data(),
            b.data(),
            F::lit(eps),
        );
        let op = Op::InstanceNorm {
            input,
            gamma,
            beta,
            saved,
        };
        self.push_checked("instance_norm", shape, y, op, &[input, gamma, beta])
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.inputs_valid(&[input])?;
        let x = self.value(input);
        let shape = x.shape().to_vec();
        let y = x.data().iter().map(|v| v.max(F::zero())).collect();
        self.push_checked("relu", shape, y, Op::Relu(input), &[input])
    }

    fn pool_dims(&self, input: Var, op: &'static str) -> Result<[usize; 4]> {
        let s = self.value(input).shape();
        if s.len() != 5 {
            return Err(HdcError::shape(
                op,
                format!("expected [B,T,H,W,C], got {s:?}"),
            ));
        }
        Ok([s[0], s[1], s[2] * s[3], s[4]])
    }

    /// Average over H and W: `[B,T,H,W,C] -> [B,T,C]`.
    pub fn spatial_pool(&mut self, input: Var) -> Result<Var> {
        self.inputs_valid(&[input])?;
        let [b, t, hw, c] = self.pool_dims(input, "spatial_pool")?;
        let y = kernels::spatial_pool_forward(self.value(input).data(), b * t, hw, c);
        let op = Op::SpatialPool {
            input,
            positions: hw,
        };
        self.push_checked("spatial_pool", vec![b, t, c], y, op, &[input])
    }

    /// Average over T, H and W: `[B,T,H,W,C] -> [B,C]`.
    pub fn global_pool(&mut self, input: Var) -> Result<Var> {
        self.inputs_valid(&[input])?;
        let [b, t, hw, c] = self.pool_dims(input, "global_pool")?;
        let y = kernels::spatial_pool_forward(self.value(input).data(), b, t * hw, c);
        let op = Op::GlobalPool {
            input,
            positions: t * hw,
        };
        self.push_checked("global_pool", vec![b, c], y, op, &[input])
    }

    /// Slice `[B,T,C] -> [B,C]` at one temporal index.
    pub fn select_time(&mut self, input: Var, index: usize) -> Result<Var> {
        self.inputs_valid(&[input])?;
        let s = self.value(input).shape().to_vec();
        if s.len() != 3 || index >= s[1] {
            return Err(HdcError::shape(
                "select_time",
                format!("index {index} out of range for {s:?}"),
            ));
        }
        let (b, t, c) = (s[0], s[1], s[2]);
        let data = self.value(input).data();
        let y: Vec<F> = (0..b)
            .flat_map(|i| {
                data[(i * t + index) * c..(i * t + index + 1) * c]
                    .iter()
                    .copied()
            })
            .collect();
        self.push_checked(
            "select_time",
            vec![b, c],
            y,
            Op::SelectTime { input, index },
            &[input],
        )
    }

    /// Spatial-mode pooling as a sequence of T vectors `[B,C]`.
    pub fn pool_spatial_vectors(&mut self, input: Var) -> Result<Vec<Var>> {
        let pooled = self.spatial_pool(input)?;
        let t = self.shape(pooled)[1];
        (0..t).map(|n| self.select_time(pooled, n)).collect()
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        self.inputs_valid(&[input, weight, bias])?;
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || b.shape() != [ws[1]] {
            return Err(HdcError::shape(
                "linear",
                format!("input {xs:?}, weight {ws:?}, bias {:?}", b.shape()),
            ));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[1]);
        let mut y: Vec<F> = (0..n).flat_map(|_| b.data().iter().copied()).collect();
        gemm(
            false,
            false,
            n,
            din,
            dout,
            x.data(),
            w.data(),
            F::one(),
            &mut y,
        );
        let op = Op::Linear {
            input,
            weight,
            bias,
        };
        self.push_checked("linear", vec![n, dout], y, op, &[input, weight, bias])
    }

    /// `out[i][j] = cos(left_i, right_j)`. Zero-norm rows are rejected.
    pub fn cosine_similarity_matrix(&mut self, left: Var, right: Var) -> Result<Var> {
        self.inputs_valid(&[left, right])?;
        let (a, c) = (self.value(left), self.value(right));
        if a.rank() != 2 || c.rank() != 2 || a.shape()[1] != c.shape()[1] {
            return Err(HdcError::shape(
                "cosine_similarity_matrix",
                format!("{:?} vs {:?}", a.shape(), c.shape()),
            ));
        }
        let (n, m, d) = (a.shape()[0], c.shape()[0], a.shape()[1]);
        let (sim, left_norms, right_norms) = kernels::cosine_forward(a.data(), c.data(), n, m, d)?;
        let op = Op::Cosine {
            left,
            right,
            left_norms,
            right_norms,
        };
        self.push_checked(
            "cosine_similarity_matrix",
            vec![n, m],
            sim,
            op,
            &[left, right],
        )
    }

    /// Sum over rows of `logsumexp(row) - row[i]` for a square `[B,B]` matrix.
    pub fn diag_cross_entropy(&mut self, logits: Var) -> Result<Var> {
        self.inputs_valid(&[logits])?;
        let z = self.value(logits);
        let s = z.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(HdcError::shape(
                "diag_cross_entropy",
                format!("{s:?} is not square"),
            ));
        }
        let (loss, probs) = kernels::diag_cross_entropy_forward(z.data(), s[0]);
        let op = Op::DiagCrossEntropy { logits, probs };
        self.push_checked("diag_cross_entropy", vec![], vec![loss], op, &[logits])
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        self.inputs_valid(&[input])?;
        let factor = F::lit(factor);
        let x = self.value(input);
        let shape = x.shape().to_vec();
        let y = x.data().iter().map(|v| *v * factor).collect();
        self.push_checked("scale", shape, y, Op::Scale { input, factor }, &[input])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.inputs_valid(&[a, b])?;
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(HdcError::shape(
                "add",
                format!("{:?} vs {:?}", x.shape(), y.shape()),
            ));
        }
        let shape = x.shape().to_vec();
        let out = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| *p + *q)
            .collect();
        self.push_checked("add", shape, out, Op::Add(a, b), &[a, b])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        self.inputs_valid(&[input])?;
        let total = self.value(input).data().iter().copied().sum();
        self.push_checked("sum", vec![], vec![total], Op::Sum(input), &[input])
    }

    pub fn square(&mut self, input: Var) -> Result<Var> {
        self.inputs_valid(&[input])?;
        let x = self.value(input);
        let shape = x.shape().to_vec();
        let y = x.data().iter().map(|v| *v * *v).collect();
        self.push_checked("square", shape, y, Op::Square(input), &[input])
    }

    /// Reverse-mode sweep from a scalar. Gradients are added into whatever
    /// the nodes already hold, so repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.nodes[loss.index].value.numel() != 1 {
            return Err(HdcError::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.index].value.shape()
            )));
        }
        let mut pending: Vec<Option<Vec<F>>> = (0..=loss.index).map(|_| None).collect();
        pending[loss.index] = Some(vec![F::one()]);

        for index in (0..=loss.index).rev() {
            let Some(upstream) = pending[index].take() else {
                continue;
            };
            if !self.nodes[index].requires_grad {
                continue;
            }
            for (target, grad) in self.local_grads(index, &upstream)? {
                if !self.nodes[target.index].requires_grad {
                    continue;
                }
                match &mut pending[target.index] {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += *g),
                    slot => *slot = Some(grad),
                }
            }
            match self.grads[index].as_mut() {
                Some(acc) => acc.iter_mut().zip(&upstream).for_each(|(a, g)| *a += *g),
                None => self.grads[index] = Some(upstream),
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `index` for each of its inputs.
    fn local_grads(&self, index: usize, dy: &[F]) -> Result<Vec<(Var, Vec<F>)>> {
        let node = &self.nodes[index];
        let needs = |v: &Var| self.nodes[v.index].requires_grad;
        let val = |v: &Var| &self.nodes[v.index].value;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Conv3d {
                input,
                kernel,
                bias,
                geo,
            } => {
                let g = kernels::conv3d_backward(
                    geo,
                    val(input).data(),
                    val(kernel).data(),
                    dy,
                    needs(input),
                );
                let mut v = vec![(*kernel, g.kernel), (*bias, g.bias)];
                if let Some(dx) = g.input {
                    v.push((*input, dx));
                }
                v
            }
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                saved,
            } => {
                let s = val(input).shape();
                let (b, c) = (s[0], s[s.len() - 1]);
                let positions = s[1..s.len() - 1].iter().product();
                let g =
                    kernels::instance_norm_backward(saved, dy, b, positions, c, val(gamma).data());
                vec![(*input, g.input), (*gamma, g.gamma), (*beta, g.beta)]
            }
            Op::Relu(input) => {
                let dx = val(input)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(x, g)| if *x > F::zero() { *g } else { F::zero() })
                    .collect();
                vec![(*input, dx)]
            }
            Op::SpatialPool { input, positions } => {
                let s = val(input).shape();
                let dx = kernels::spatial_pool_backward(dy, s[0] * s[1], *positions, s[4]);
                vec![(*input, dx)]
            }
            Op::GlobalPool { input, positions } => {
                let s = val(input).shape();
                let dx = kernels::spatial_pool_backward(dy, s[0], *positions, s[4]);
                vec![(*input, dx)]
            }
            Op::SelectTime { input, index } => {
                let s = val(input).shape();
                let (b, t, c) = (s[0], s[1], s[2]);
                let mut dx = vec![F::zero(); b * t * c];
                for i in 0..b {
                    let dst = (i * t + index) * c;
                    dx[dst..dst + c].copy_from_slice(&dy[i * c..(i + 1) * c]);
                }
                vec![(*input, dx)]
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (x, w) = (val(input), val(weight));
                let (n, din, dout) = (x.shape()[0], x.shape()[1], w.shape()[1]);
                let mut dw = vec![F::zero(); din * dout];
                gemm(true, false, din, n, dout, x.data(), dy, F::zero(), &mut dw);
                let mut db = vec![F::zero(); dout];
                for row in dy.chunks(dout) {
                    db.iter_mut().zip(row).for_each(|(a, g)| *a += *g);
                }
                let mut v = vec![(*weight, dw), (*bias, db)];
                if needs(input) {
                    let mut dx = vec![F::zero(); n * din];
                    gemm(false, true, n, dout, din, dy, w.data(), F::zero(), &mut dx);
                    v.push((*input, dx));
                }
                v
            }
            Op::Cosine {
                left,
                right,
                left_norms,
                right_norms,
            } => {
                let (a, c) = (val(left), val(right));
                let (n, m, d) = (a.shape()[0], c.shape()[0], a.shape()[1]);
                let (da, dc) = kernels::cosine_backward(
                    a.data(),
                    c.data(),
                    node.value.data(),
                    left_norms,
                    right_norms,
                    dy,
                    n,
                    m,
                    d,
                );
                vec![(*left, da), (*right, dc)]
            }
            Op::DiagCrossEntropy { logits, probs } => {
                let n = val(logits).shape()[0];
                let g = dy[0];
                let mut dz: Vec<F> = probs.iter().map(|p| *p * g).collect();
                for i in 0..n {
                    dz[i * n + i] -= g;
                }
                vec![(*logits, dz)]
            }
            Op::Scale { input, factor } => {
                vec![(*input, dy.iter().map(|g| *g * *factor).collect())]
            }
            Op::Add(a, b) => vec![(*a, dy.to_vec()), (*b, dy.to_vec())],
            Op::Sum(input) => vec![(*input, vec![dy[0]; val(input).numel()])],
            Op::Square(input) => {
                let two = F::lit(2.0);
                let dx = val(input)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(x, g)| two * *x * *g)
                    .collect();
                vec![(*input, dx)]
            }
        };
        Ok(out)
    }
}
