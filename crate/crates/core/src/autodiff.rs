//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in execution order. Because inputs
//! always exist before the node that consumes them, the node list is a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! ```
//! use patchtst::autodiff::Graph;
//! use patchtst::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
//! let loss = g.sum(x);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{inverse_axes, permute_data, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        plan: MatMulPlan,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Softmax {
        a: Var,
    },
    Gelu {
        a: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Dropout {
        a: Var,
        keep_scale: Vec<f64>,
    },
    Mse {
        a: Var,
        b: Var,
    },
    MaskedMse {
        a: Var,
        b: Var,
        mask: Vec<bool>,
        count: usize,
    },
    Sum {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        axes: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    op: Op,
}

/// Batch bookkeeping for a broadcast batched matrix product.
#[derive(Debug, Clone)]
struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    /// Per output batch: (offset into a, offset into b) in matrices.
    pairs: Vec<(usize, usize)>,
    /// `b` is a plain matrix shared by every batch of `a`.
    fold: bool,
}

/// Per-feature statistics of a train-mode batch-norm evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance over the normalized positions.
    pub var: Vec<f64>,
    pub count: usize,
}

pub enum NormMode<'a> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running mean and variance.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    checked: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph that fails any operation producing NaN or infinity.
    pub fn checked() -> Self {
        Self {
            nodes: Vec::new(),
            checked: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a tensor; it receives a gradient if `requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.nodes.push(Node {
            tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_grad())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].tensor.data()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var], op: Op) -> Result<Var> {
        let mut tensor = Tensor::new(shape, data)?;
        tensor.requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        if self.checked {
            tensor.check_finite(op_name(&op))?;
        }
        self.nodes.push(Node { tensor, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Batched matrix product `a · b` with numpy-style broadcasting of the
    /// leading (batch) dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Batched `a · bᵀ` where the transpose swaps the last two axes of `b`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let shape_err = || Error::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(shape_err());
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let batch_out = broadcast_shape(batch_a, batch_b).ok_or_else(shape_err)?;
        let fold = batch_b.is_empty();
        let pairs = broadcast_pairs(batch_a, batch_b, &batch_out);
        let plan = MatMulPlan {
            m,
            k,
            n,
            pairs,
            fold,
        };
        let mut out = vec![0.0; plan.pairs.len() * m * n];
        {
            let da = self.data(a);
            let db = self.data(b);
            if fold {
                let rows = batch_a.iter().product::<usize>() * m;
                gemm(rows, k, n, da, false, db, trans_b, &mut out, false);
            } else {
                for (i, &(ia, ib)) in plan.pairs.iter().enumerate() {
                    gemm(
                        m,
                        k,
                        n,
                        &da[ia * m * k..(ia + 1) * m * k],
                        false,
                        &db[ib * k * n..(ib + 1) * k * n],
                        trans_b,
                        &mut out[i * m * n..(i + 1) * m * n],
                        false,
                    );
                }
            }
        }
        let mut shape = batch_out;
        shape.extend([m, n]);
        self.push(
            shape,
            out,
            &[a, b],
            Op::MatMul {
                a,
                b,
                trans_b,
                plan,
            },
        )
    }

    /// Elementwise sum. The smaller operand may broadcast when its shape is
    /// a trailing suffix of the other's (bias vectors, position tables).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = if self.value(b).numel() > self.value(a).numel() {
            (b, a)
        } else {
            (a, b)
        };
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Shape {
                op: "add",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let db = self.data(b);
        let out: Vec<f64> = self
            .data(a)
            .chunks(db.len())
            .flat_map(|chunk| chunk.iter().zip(db).map(|(x, y)| x + y))
            .collect();
        let shape = sa.to_vec();
        self.push(shape, out, &[a, b], Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.data(a), self.data(b), |x, y| x - y);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, &[a, b], Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.data(a), self.data(b), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, &[a, b], Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.data(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, &[a], Op::Scale { a, factor })
    }

    /// Softmax over the last axis, evaluated with max subtraction.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let width = *shape.last().expect("tensor has at least one axis");
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(width) {
            softmax_in_place(row);
        }
        self.push(shape, out, &[a], Op::Softmax { a })
    }

    /// Exact GELU, `x·Φ(x)` with the Gaussian CDF written through `erf`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| x * std_normal_cdf(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, &[a], Op::Gelu { a })
    }

    /// Batch normalization of the last axis (features) over every other
    /// position. Returns the batch statistics in train mode so the caller
    /// can update its running estimates.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(x).to_vec();
        let features = *shape.last().expect("tensor has at least one axis");
        for (what, v) in [("batchnorm gamma", gamma), ("batchnorm beta", beta)] {
            if self.value(v).numel() != features {
                return Err(Error::Shape {
                    op: what,
                    lhs: shape.clone(),
                    rhs: self.shape(v).to_vec(),
                });
            }
        }
        let data = self.data(x);
        let count = data.len() / features;
        let (mean, var, train) = match mode {
            NormMode::Train => {
                let mut mean = vec![0.0; features];
                for row in data.chunks(features) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                let mut var = vec![0.0; features];
                for row in data.chunks(features) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= count as f64);
                (mean, var, true)
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != features || var.len() != features {
                    return Err(Error::Shape {
                        op: "batchnorm running stats",
                        lhs: shape,
                        rhs: vec![mean.len(), var.len()],
                    });
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(data.len());
        for row in data.chunks(features) {
            for d in 0..features {
                xhat.push((row[d] - mean[d]) * inv_std[d]);
            }
        }
        let g = self.data(gamma);
        let bt = self.data(beta);
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, xh)| g[i % features] * xh + bt[i % features])
            .collect();
        let stats = train.then(|| BatchStats {
            mean,
            var,
            count,
        });
        let v = self.push(
            shape,
            out,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        )?;
        Ok((v, stats))
    }

    /// Inverted dropout. With `rng == None` (eval mode) or `p == 0` the
    /// input is returned unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability {p} outside [0, 1)")));
        }
        let Some(rng) = rng else { return Ok(a) };
        if p == 0.0 {
            return Ok(a);
        }
        let scale = 1.0 / (1.0 - p);
        let keep_scale: Vec<f64> = (0..self.value(a).numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
            .collect();
        let out = zip_map(self.data(a), &keep_scale, |x, s| x * s);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, &[a], Op::Dropout { a, keep_scale })
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).numel() as f64;
        let total: f64 = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(vec![1], vec![total / n], &[a, b], Op::Mse { a, b })
    }

    /// Mean of squared differences over the elements where `mask` is set.
    pub fn masked_mse(&mut self, a: Var, b: Var, mask: Vec<bool>) -> Result<Var> {
        self.same_shape("masked_mse", a, b)?;
        if mask.len() != self.value(a).numel() {
            return Err(Error::Shape {
                op: "masked_mse mask",
                lhs: self.shape(a).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::config("masked loss over an empty mask"));
        }
        let total: f64 = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|((x, y), _)| (x - y) * (x - y))
            .sum();
        self.push(
            vec![1],
            vec![total / count as f64],
            &[a, b],
            Op::MaskedMse { a, b, mask, count },
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.data(a).iter().sum();
        self.push(vec![1], vec![total], &[a], Op::Sum { a })
            .expect("scalar shape is valid")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n).expect("scalar shape is valid")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.data(a).to_vec();
        self.push(shape.to_vec(), data, &[a], Op::Reshape { a })
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let (shape, data) = permute_data(self.shape(a), self.data(a), axes)?;
        self.push(
            shape,
            data,
            &[a],
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
        )
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(Error::InvalidShape {
                shape: self.shape(a).to_vec(),
                reason: "transpose needs two axes".into(),
            });
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(a, &axes)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`, accumulating gradients into every
    /// node that requires one. Gradients from earlier calls are cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidShape {
                shape: self.shape(loss).to_vec(),
                reason: "backward needs a scalar loss".into(),
            });
        }
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.nodes[loss.0].tensor.grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(upstream) = self.nodes[i].tensor.grad.take() else {
                continue;
            };
            self.propagate(i, &upstream);
            self.nodes[i].tensor.grad = Some(upstream);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: &[f64]) {
        let tensor = &mut self.nodes[v.0].tensor;
        if !tensor.requires_grad {
            return;
        }
        match &mut tensor.grad {
            Some(g) => g.iter_mut().zip(contribution).for_each(|(g, c)| *g += c),
            None => tensor.grad = Some(contribution.to_vec()),
        }
    }

    fn propagate(&mut self, i: usize, up: &[f64]) {
        // Contributions are computed against immutable node data first and
        // accumulated afterwards.
        let mut contributions: Vec<(Var, Vec<f64>)> = Vec::new();
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                trans_b,
                plan,
            } => {
                let (da, db) = (self.data(*a), self.data(*b));
                let MatMulPlan { m, k, n, .. } = *plan;
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; da.len()];
                    if plan.fold {
                        let rows = da.len() / k;
                        gemm(rows, n, k, up, false, db, !trans_b, &mut ga, true);
                    } else {
                        for (bi, &(ia, ib)) in plan.pairs.iter().enumerate() {
                            gemm(
                                m,
                                n,
                                k,
                                &up[bi * m * n..(bi + 1) * m * n],
                                false,
                                &db[ib * k * n..(ib + 1) * k * n],
                                !trans_b,
                                &mut ga[ia * m * k..(ia + 1) * m * k],
                                true,
                            );
                        }
                    }
                    contributions.push((*a, ga));
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; db.len()];
                    let rows = if plan.fold { da.len() / k } else { m };
                    let pairs: Vec<(usize, usize, usize)> = if plan.fold {
                        vec![(0, 0, 0)]
                    } else {
                        plan.pairs
                            .iter()
                            .enumerate()
                            .map(|(bi, &(ia, ib))| (bi, ia, ib))
                            .collect()
                    };
                    for (bi, ia, ib) in pairs {
                        let upm = &up[bi * rows * n..(bi + 1) * rows * n];
                        let am = &da[ia * rows * k..(ia + 1) * rows * k];
                        let gbm = &mut gb[ib * k * n..(ib + 1) * k * n];
                        if *trans_b {
                            // b stored [n, k]: grad = upᵀ · a
                            gemm_at(n, rows, k, upm, am, gbm);
                        } else {
                            // b stored [k, n]: grad = aᵀ · up
                            gemm_at(k, rows, n, am, upm, gbm);
                        }
                    }
                    contributions.push((*b, gb));
                }
            }
            Op::Add { a, b } => {
                contributions.push((*a, up.to_vec()));
                if self.requires_grad(*b) {
                    let len = self.value(*b).numel();
                    let mut gb = vec![0.0; len];
                    for chunk in up.chunks(len) {
                        gb.iter_mut().zip(chunk).for_each(|(g, u)| *g += u);
                    }
                    contributions.push((*b, gb));
                }
            }
            Op::Sub { a, b } => {
                contributions.push((*a, up.to_vec()));
                contributions.push((*b, up.iter().map(|u| -u).collect()));
            }
            Op::Mul { a, b } => {
                let (da, db) = (self.data(*a), self.data(*b));
                contributions.push((*a, zip_map(up, db, |u, y| u * y)));
                contributions.push((*b, zip_map(up, da, |u, x| u * x)));
            }
            Op::Scale { a, factor } => {
                contributions.push((*a, up.iter().map(|u| u * factor).collect()));
            }
            Op::Softmax { a } => {
                let y = node.tensor.data();
                let width = *node.tensor.shape().last().unwrap();
                let mut g = vec![0.0; y.len()];
                for ((gr, yr), ur) in g
                    .chunks_mut(width)
                    .zip(y.chunks(width))
                    .zip(up.chunks(width))
                {
                    let dot: f64 = yr.iter().zip(ur).map(|(y, u)| y * u).sum();
                    for j in 0..width {
                        gr[j] = yr[j] * (ur[j] - dot);
                    }
                }
                contributions.push((*a, g));
            }
            Op::Gelu { a } => {
                let g = zip_map(self.data(*a), up, |x, u| {
                    u * (std_normal_cdf(x) + x * std_normal_pdf(x))
                });
                contributions.push((*a, g));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let features = inv_std.len();
                let count = xhat.len() / features;
                let gam = self.data(*gamma);
                let mut sum_up = vec![0.0; features];
                let mut sum_up_xhat = vec![0.0; features];
                for (ur, xr) in up.chunks(features).zip(xhat.chunks(features)) {
                    for d in 0..features {
                        sum_up[d] += ur[d];
                        sum_up_xhat[d] += ur[d] * xr[d];
                    }
                }
                if self.requires_grad(*x) {
                    let nf = count as f64;
                    let mut gx = vec![0.0; up.len()];
                    for ((gr, ur), xr) in gx
                        .chunks_mut(features)
                        .zip(up.chunks(features))
                        .zip(xhat.chunks(features))
                    {
                        for d in 0..features {
                            gr[d] = if *train {
                                gam[d] * inv_std[d] / nf
                                    * (nf * ur[d] - sum_up[d] - xr[d] * sum_up_xhat[d])
                            } else {
                                ur[d] * gam[d] * inv_std[d]
                            };
                        }
                    }
                    contributions.push((*x, gx));
                }
                contributions.push((*gamma, sum_up_xhat));
                contributions.push((*beta, sum_up));
            }
            Op::Dropout { a, keep_scale } => {
                contributions.push((*a, zip_map(up, keep_scale, |u, s| u * s)));
            }
            Op::Mse { a, b } => {
                let (da, db) = (self.data(*a), self.data(*b));
                let c = 2.0 * up[0] / da.len() as f64;
                let ga = zip_map(da, db, |x, y| c * (x - y));
                let gb = ga.iter().map(|g| -g).collect();
                contributions.push((*a, ga));
                contributions.push((*b, gb));
            }
            Op::MaskedMse { a, b, mask, count } => {
                let (da, db) = (self.data(*a), self.data(*b));
                let c = 2.0 * up[0] / *count as f64;
                let ga: Vec<f64> = da
                    .iter()
                    .zip(db)
                    .zip(mask)
                    .map(|((x, y), &m)| if m { c * (x - y) } else { 0.0 })
                    .collect();
                let gb = ga.iter().map(|g| -g).collect();
                contributions.push((*a, ga));
                contributions.push((*b, gb));
            }
            Op::Sum { a } => {
                contributions.push((*a, vec![up[0]; self.value(*a).numel()]));
            }
            Op::Reshape { a } => {
                contributions.push((*a, up.to_vec()));
            }
            Op::Permute { a, axes } => {
                let (_, g) = permute_data(node.tensor.shape(), up, &inverse_axes(axes))
                    .expect("axes validated on the forward pass");
                contributions.push((*a, g));
            }
        }
        for (v, c) in contributions {
            self.accumulate(v, &c);
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::Softmax { .. } => "softmax",
        Op::Gelu { .. } => "gelu",
        Op::BatchNorm { .. } => "batchnorm",
        Op::Dropout { .. } => "dropout",
        Op::Mse { .. } => "mse",
        Op::MaskedMse { .. } => "masked_mse",
        Op::Sum { .. } => "sum",
        Op::Reshape { .. } => "reshape",
        Op::Permute { .. } => "permute",
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Matrix offsets of `a` and `b` for every output batch index.
fn broadcast_pairs(a: &[usize], b: &[usize], out: &[usize]) -> Vec<(usize, usize)> {
    let total: usize = out.iter().product();
    let nd = out.len();
    let mut pairs = Vec::with_capacity(total);
    let mut index = vec![0usize; nd];
    for _ in 0..total {
        let flat = |shape: &[usize]| {
            let skip = nd - shape.len();
            shape.iter().enumerate().fold(0, |acc, (j, &d)| {
                let i = if d == 1 { 0 } else { index[skip + j] };
                acc * d + i
            })
        };
        pairs.push((flat(a), flat(b)));
        for ax in (0..nd).rev() {
            index[ax] += 1;
            if index[ax] < out[ax] {
                break;
            }
            index[ax] = 0;
        }
    }
    pairs
}

/// `c (+)= a · op(b)` for row-major `a: [m, k]`; `b` is `[k, n]`, or
/// `[n, k]` when `trans_b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices are bounds-checked above and the strides describe
    // dense row-major (or transposed) matrices inside them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c += aᵀ · b` for row-major `a: [rows, p]`, `b: [rows, q]`, `c: [p, q]`.
fn gemm_at(p: usize, rows: usize, q: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    // aᵀ is [p, rows], stored transposed inside `a`.
    assert!(a.len() >= rows * p && b.len() >= rows * q && c.len() >= p * q);
    // SAFETY: sizes checked above.
    unsafe {
        matrixmultiply::dgemm(
            p,
            rows,
            q,
            1.0,
            a.as_ptr(),
            1,
            p as isize,
            b.as_ptr(),
            q as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            q as isize,
            1,
        );
    }
}

/// Largest relative difference between the analytic gradient of a scalar
/// function and central finite differences, over every element of every
/// input. The relative error of one element is
/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (which, &v) in vars.iter().enumerate() {
        let analytic = g
            .grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[which].numel()]);
        for (j, &a) in analytic.iter().enumerate() {
            let original = inputs[which].data()[j];
            probe[which].data_mut()[j] = original + eps;
            let plus = eval(&probe)?;
            probe[which].data_mut()[j] = original - eps;
            let minus = eval(&probe)?;
            probe[which].data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps)
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    g.value(v).item().ok_or_else(|| Error::InvalidShape {
        shape: g.shape(v).to_vec(),
        reason: "gradient check needs a scalar function".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut g = Graph::new();
        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let row = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let col = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let p = g.matmul(row, col).unwrap();
        assert_eq!(g.value(p).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_broadcasts_batch_dims() {
        // [2,1,2,3] x [3,3,2] -> [2,3,2,2]
        let a = random(&[2, 1, 2, 3], 1);
        let b = random(&[3, 3, 2], 2);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(va, vb).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 2, 2]);
        let out = g.value(c);
        for i in 0..2 {
            for j in 0..3 {
                for r in 0..2 {
                    for col in 0..2 {
                        let expect: f64 = (0..3)
                            .map(|q| a.at(&[i, 0, r, q]) * b.at(&[j, q, col]))
                            .sum();
                        assert!((out.at(&[i, j, r, col]) - expect).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn matmul_gradient_of_sum_is_row_sums() {
        let a = random(&[3, 4], 3);
        let b = random(&[4, 2], 4);
        let mut g = Graph::new();
        let va = g.param(a);
        let vb = g.constant(b.clone());
        let c = g.matmul(va, vb).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        let grad = g.grad(va).unwrap();
        for i in 0..3 {
            for k in 0..4 {
                let row_sum: f64 = (0..2).map(|j| b.at(&[k, j])).sum();
                assert!((grad[i * 4 + k] - row_sum).abs() < 1e-14);
            }
        }
        let err = grad_check_many(
            |g, v| {
                let c = g.matmul(v[0], v[1])?;
                Ok(g.sum(c))
            },
            &[random(&[3, 4], 3), b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    /// Sum of the output weighted by a fixed pseudo-random pattern, so that
    /// every output element carries a distinct upstream gradient.
    fn weighted_sum(g: &mut Graph, v: Var) -> Result<Var> {
        let w = Tensor::from_fn(g.shape(v), |i| ((i * 37 % 11) as f64 - 5.0) / 7.0);
        let wv = g.constant(w);
        let p = g.mul(v, wv)?;
        Ok(g.sum(p))
    }

    #[test]
    fn matmul_variants_pass_gradient_check() {
        let cases: Vec<(Vec<usize>, Vec<usize>, bool)> = vec![
            (vec![2, 3, 4], vec![4, 5], false),
            (vec![2, 3, 4], vec![5, 4], true),
            (vec![2, 3, 4], vec![2, 4, 2], false),
            (vec![2, 3, 4], vec![2, 5, 4], true),
            (vec![2, 1, 3, 4], vec![3, 4, 2], false),
            (vec![3, 4], vec![2, 4, 3], false),
        ];
        for (i, (sa, sb, trans)) in cases.into_iter().enumerate() {
            let err = grad_check_many(
                |g, v| {
                    let c = if trans { g.matmul_t(v[0], v[1])? } else { g.matmul(v[0], v[1])? };
                    weighted_sum(g, c)
                },
                &[random(&sa, 10 + i as u64), random(&sb, 20 + i as u64)],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "case {i}: {err}");
        }
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let y = g.softmax_lastdim(x).unwrap();
        let expect = [0.09003057, 0.24472847, 0.66524096];
        for (a, b) in g.value(y).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-8);
        }

        let x = g.constant(t(&[2, 2], &[0.0, 0.0, 1000.0, 0.0]));
        let y = g.softmax_lastdim(x).unwrap();
        let v = g.value(y).data();
        assert_eq!(&v[..2], &[0.5, 0.5]);
        assert_eq!(v[2], 1.0);
        assert!(v[3] >= 0.0 && v[3] < 1e-300);
        assert!(v.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn softmax_of_matmul_gradient() {
        let w = random(&[4, 3], 7);
        let err = grad_check_many(
            |g, v| {
                let p = g.matmul(v[0], v[1])?;
                let s = g.softmax_lastdim(p)?;
                let wv = g.constant(w.clone());
                let prod = g.mul(s, wv)?;
                Ok(g.sum(prod))
            },
            &[random(&[4, 5], 5), random(&[5, 3], 6)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn gelu_values_and_gradient() {
        let mut g = Graph::new();
        let xs = [-2.0, -0.5, 0.0, 0.5, 2.0];
        let x = g.constant(t(&[5], &xs));
        let neg = g.scale(x, -1.0).unwrap();
        let y = g.gelu(x).unwrap();
        let yn = g.gelu(neg).unwrap();
        let (y, yn) = (g.value(y).data().to_vec(), g.value(yn).data().to_vec());
        assert_eq!(y[2], 0.0);
        for i in 0..5 {
            assert!((y[i] - yn[i] - xs[i]).abs() < 1e-14);
        }
        let err = grad_check(
            |g, v| {
                let y = g.gelu(v)?;
                Ok(g.sum(y))
            },
            &t(&[4], &[-2.0, -0.5, 0.5, 2.0]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn batchnorm_train_normalizes_each_feature() {
        // Token-major [batch, tokens, D]; features on the last axis.
        let x = Tensor::from_fn(&[2, 4, 3], |i| ((i * 7919) % 13) as f64 * 3.0 - 11.0);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let gamma = g.constant(Tensor::full(&[3], 1.0));
        let beta = g.constant(Tensor::zeros(&[3]));
        let (y, stats) = g.batchnorm(xv, gamma, beta, NormMode::Train, 1e-5).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.count, 8);
        let y = g.value(y).data();
        for d in 0..3 {
            let vals: Vec<f64> = y.iter().skip(d).step_by(3).copied().collect();
            let mean = vals.iter().sum::<f64>() / 8.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9);
            // The 1e-5 variance floor shrinks the variance by var/(var+eps).
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }

    #[test]
    fn batchnorm_constant_input_yields_shift() {
        let mut g = Graph::new();
        let xv = g.constant(Tensor::full(&[2, 3, 2], 4.0));
        let gamma = g.constant(t(&[2], &[2.0, 3.0]));
        let beta = g.constant(t(&[2], &[0.5, -0.25]));
        let (y, _) = g.batchnorm(xv, gamma, beta, NormMode::Train, 1e-5).unwrap();
        for (i, v) in g.value(y).data().iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { 0.5 } else { -0.25 });
        }
    }

    #[test]
    fn batchnorm_gradients() {
        let w = random(&[2, 4, 3], 12);
        for train in [true, false] {
            let err = grad_check_many(
                |g, v| {
                    let mode = if train {
                        NormMode::Train
                    } else {
                        NormMode::Eval {
                            mean: &[0.1, -0.2, 0.3],
                            var: &[0.5, 1.5, 2.0],
                        }
                    };
                    let (y, _) = g.batchnorm(v[0], v[1], v[2], mode, 1e-5)?;
                    let wv = g.constant(w.clone());
                    let p = g.mul(y, wv)?;
                    Ok(g.sum(p))
                },
                &[random(&[2, 4, 3], 11), random(&[3], 13), random(&[3], 14)],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "train={train}: {err}");
        }
    }

    #[test]
    fn dropout_modes() {
        let mut g = Graph::new();
        let x = g.constant(random(&[10], 1));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(g.dropout(x, 0.0, Some(&mut rng)).unwrap(), x);
        assert_eq!(g.dropout(x, 0.7, None::<&mut ChaCha8Rng>).unwrap(), x);
        assert!(matches!(
            g.dropout(x, 1.0, Some(&mut rng)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dropout_rate_and_expectation() {
        let n = 1_000_000;
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[n], 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let y = g.dropout(x, 0.2, Some(&mut rng)).unwrap();
        let y = g.value(y).data();
        let dropped = y.iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
        assert!((dropped - 0.2).abs() < 0.002, "{dropped}");
        // Survivors carry 1/(1-p); the sample mean has sd sqrt(p/(1-p)/n).
        let mean = y.iter().sum::<f64>() / n as f64;
        let sd = (0.2f64 / 0.8 / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * sd, "{mean}");
    }

    #[test]
    fn mse_values_and_gradient() {
        let mut g = Graph::new();
        let p = g.param(t(&[2], &[0.0, 0.0]));
        let y = g.constant(t(&[2], &[1.0, 3.0]));
        let l = g.mse(p, y).unwrap();
        assert_eq!(g.value(l).data(), &[5.0]);
        g.backward(l).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[-1.0, -3.0]);
        let same = g.mse(y, y).unwrap();
        assert_eq!(g.value(same).data(), &[0.0]);
        let z = g.constant(Tensor::zeros(&[3]));
        assert!(g.mse(p, z).is_err());
        let target = random(&[3, 2], 3);
        let err = grad_check(
            |g, v| {
                let y = g.constant(target.clone());
                g.mse(v, y)
            },
            &random(&[3, 2], 4),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn backward_of_sum_is_ones_and_needs_scalar() {
        let mut g = Graph::new();
        let x = g.param(random(&[2, 3], 1));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
        assert!(g.backward(x).is_err());
        let err = grad_check(|g, v| Ok(g.sum(v)), &random(&[5], 2), 1e-5).unwrap();
        assert!(err < 1e-10);
    }

    #[test]
    fn linear_regression_gradient_matches_closed_form() {
        // loss = mse(Xw, y); grad = 2 Xᵀ (Xw − y) / n
        let xm = random(&[6, 3], 31);
        let w = random(&[3, 1], 32);
        let y = random(&[6, 1], 33);
        let mut g = Graph::new();
        let (xv, wv, yv) = (g.constant(xm.clone()), g.param(w.clone()), g.constant(y.clone()));
        let pred = g.matmul(xv, wv).unwrap();
        let loss = g.mse(pred, yv).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(wv).unwrap();
        for j in 0..3 {
            let mut expect = 0.0;
            for i in 0..6 {
                let r: f64 = (0..3).map(|q| xm.at(&[i, q]) * w.at(&[q, 0])).sum::<f64>() - y.at(&[i, 0]);
                expect += 2.0 * xm.at(&[i, j]) * r / 6.0;
            }
            assert!((grad[j] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn shape_ops_gradients() {
        let w = random(&[4, 3, 2], 8);
        let err = grad_check(
            |g, v| {
                let p = g.permute(v, &[2, 0, 1])?;
                let r = g.reshape(p, &[4, 3, 2])?;
                let b = g.constant(Tensor::from_fn(&[3, 2], |i| i as f64 * 0.1));
                let a = g.add(r, b)?;
                let s = g.scale(a, 0.5)?;
                let wv = g.constant(w.clone());
                let d = g.sub(s, wv)?;
                let m = g.mul(d, d)?;
                Ok(g.mean(m))
            },
            &random(&[3, 2, 4], 9),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn broadcast_add_gradient_sums_over_leading_axes() {
        let err = grad_check_many(
            |g, v| {
                let a = g.add(v[0], v[1])?;
                let sq = g.mul(a, a)?;
                Ok(g.sum(sq))
            },
            &[random(&[3, 2, 4], 1), random(&[2, 4], 2)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn masked_mse_ignores_unmasked() {
        let mut g = Graph::new();
        let a = g.param(t(&[4], &[1.0, 100.0, 3.0, -50.0]));
        let b = g.constant(t(&[4], &[1.0, 0.0, 3.0, 0.0]));
        let l = g.masked_mse(a, b, vec![true, false, true, false]).unwrap();
        assert_eq!(g.value(l).data(), &[0.0]);
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[0.0; 4]);
        assert!(g.masked_mse(a, b, vec![false; 4]).is_err());
    }

    #[test]
    fn checked_graph_rejects_overflow() {
        let mut g = Graph::checked();
        let x = g.constant(t(&[1], &[f64::MAX]));
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let a = g.param(random(&[5, 7], 1));
            let b = g.param(random(&[7, 3], 2));
            let c = g.matmul(a, b).unwrap();
            let s = g.softmax_lastdim(c).unwrap();
            let e = g.gelu(s).unwrap();
            let l = g.sum(e);
            g.backward(l).unwrap();
            (g.grad(a).unwrap().to_vec(), g.grad(b).unwrap().to_vec())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert!(a1.iter().zip(&a2).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(b1.iter().zip(&b2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
