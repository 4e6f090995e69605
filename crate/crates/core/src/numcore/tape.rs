//! Reverse-mode differentiation over dense tensors.
//!
//! Every operation appends a node holding its forward value, its parent
//! handles and a closure producing the vector-Jacobian products for those
//! parents. Node ids grow monotonically, so a single reverse sweep over the
//! node list visits each node once, after all of its consumers.

use std::collections::BTreeMap;

use super::tensor::{softmax_in_place, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs handed to a local-gradient closure during the reverse sweep.
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad: &'a Tensor,
}

/// Produces one gradient per parent, in parent order.
pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

/// Named parameter tensors, iterated in name order.
pub type Params = BTreeMap<String, Tensor>;

/// Tape handles of registered parameters, keyed by name.
#[derive(Clone, Debug, Default)]
pub struct ParamVars(BTreeMap<String, Var>);

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter `{name}` is not registered")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn insert(&mut self, name: String, var: Var) {
        self.0.insert(name, var);
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
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

    fn push(&mut self, value: Tensor, parents: Vec<Var>, backward: Option<BackwardFn>) -> Var {
        debug_assert!(parents.iter().all(|p| p.0 < self.nodes.len()));
        self.nodes.push(Node {
            value,
            parents,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, vec![], None)
    }

    /// Registers a named leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, name: &str, value: &Tensor) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(Error::contract(format!("parameter `{name}` registered twice")));
        }
        let mut value = value.clone();
        value.set_requires_grad(true);
        let v = self.push(value, vec![], None);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn register_all(&mut self, params: &Params) -> Result<ParamVars> {
        let mut vars = ParamVars::default();
        for (name, t) in params {
            vars.insert(name.clone(), self.param(name, t)?);
        }
        Ok(vars)
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, parents: &[Var], output: Tensor, backward: BackwardFn) -> Var {
        self.push(output, parents.to_vec(), Some(backward))
    }

    /// Gradients of a scalar `loss` with respect to every registered
    /// parameter. Parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                output: &node.value,
                grad: &grad,
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(parent_grads) {
                debug_assert_eq!(g.shape(), self.nodes[p.0].value.shape(), "grad shape");
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let by_name = self
            .params
            .iter()
            .map(|(name, v)| {
                let g = grads
                    .get(v.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients(by_name))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.custom(
            &[a, b],
            out,
            Box::new(|ctx| {
                let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
                let ga = ctx.grad.matmul(&b.transpose().unwrap()).unwrap();
                let gb = a.transpose().unwrap().matmul(ctx.grad).unwrap();
                vec![ga, gb]
            }),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.custom(&[a], out, Box::new(|ctx| vec![ctx.grad.transpose().unwrap()])))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let original = self.value(a).shape().to_vec();
        let out = self.value(a).reshape(shape)?;
        Ok(self.custom(
            &[a],
            out,
            Box::new(move |ctx| vec![ctx.grad.reshape(&original).unwrap()]),
        ))
    }

    // ---- elementwise --------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.custom(&[a, b], out, Box::new(|ctx| vec![ctx.grad.clone(), ctx.grad.clone()])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.custom(
            &[a, b],
            out,
            Box::new(|ctx| vec![ctx.grad.clone(), ctx.grad.map(|g| -g)]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.custom(
            &[a, b],
            out,
            Box::new(|ctx| {
                let ga = ctx.grad.zip_map(ctx.inputs[1], "mul", |g, y| g * y).unwrap();
                let gb = ctx.grad.zip_map(ctx.inputs[0], "mul", |g, x| g * x).unwrap();
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.custom(&[a], out, Box::new(move |ctx| vec![ctx.grad.map(|g| g * c)]))
    }

    /// Adds a length-`K` vector to every row of an `[M, K]` matrix.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("add_row_bias")?;
        let b = self.value(bias);
        if b.len() != k {
            return Err(Error::Dimension {
                op: "add_row_bias",
                left: vec![m, k],
                right: b.shape().to_vec(),
            });
        }
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(k) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(self.custom(
            &[a, bias],
            out,
            Box::new(move |ctx| {
                let mut gb = vec![0.0; k];
                for row in ctx.grad.data().chunks(k) {
                    for (acc, g) in gb.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
                let gb = Tensor::from_parts(ctx.inputs[1].shape().to_vec(), gb);
                vec![ctx.grad.clone(), gb]
            }),
        ))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.custom(
            &[a],
            out,
            Box::new(|ctx| {
                let g = ctx
                    .grad
                    .zip_map(ctx.inputs[0], "silu", |g, x| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .unwrap();
                vec![g]
            }),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.custom(
            &[a],
            out,
            Box::new(|ctx| {
                let g = ctx
                    .grad
                    .zip_map(ctx.inputs[0], "abs", |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .unwrap();
                vec![g]
            }),
        )
    }

    // ---- reductions -----------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.custom(
            &[a],
            out,
            Box::new(|ctx| vec![Tensor::full(ctx.inputs[0].shape(), ctx.grad.item())]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means of an `[M, K]` matrix, giving a length-`K` vector.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("mean_rows")?;
        if m == 0 {
            return Err(Error::contract("mean_rows over zero rows"));
        }
        let mut out = vec![0.0; k];
        for row in self.value(a).data().chunks(k) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / m as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        Ok(self.custom(
            &[a],
            Tensor::from_parts(vec![k], out),
            Box::new(move |ctx| {
                let g: Vec<f64> = (0..m).flat_map(|_| ctx.grad.data().iter().map(|g| g * inv)).collect();
                vec![Tensor::from_parts(vec![m, k], g)]
            }),
        ))
    }

    // ---- row-structured ---------------------------------------------------------

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_rows()?;
        let k = out.shape()[1];
        Ok(self.custom(
            &[a],
            out,
            Box::new(move |ctx| {
                let y = ctx.output.data();
                let mut g = ctx.grad.data().to_vec();
                for (grow, yrow) in g.chunks_mut(k).zip(y.chunks(k)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (gv, yv) in grow.iter_mut().zip(yrow) {
                        *gv = yv * (*gv - dot);
                    }
                }
                vec![Tensor::from_parts(ctx.output.shape().to_vec(), g)]
            }),
        ))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("log_softmax_rows")?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(k) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(self.custom(
            &[a],
            Tensor::from_parts(vec![m, k], out),
            Box::new(move |ctx| {
                let mut g = ctx.grad.data().to_vec();
                for (grow, yrow) in g.chunks_mut(k).zip(ctx.output.data().chunks(k)) {
                    let total: f64 = grow.iter().sum();
                    for (gv, yv) in grow.iter_mut().zip(yrow) {
                        *gv -= yv.exp() * total;
                    }
                }
                vec![Tensor::from_parts(vec![m, k], g)]
            }),
        ))
    }

    /// Per-row layer normalisation with learned gain and shift.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let (m, k) = self.value(x).dims2("layer_norm_rows")?;
        if self.value(gain).len() != k || self.value(shift).len() != k {
            return Err(Error::Dimension {
                op: "layer_norm_rows",
                left: vec![m, k],
                right: self.value(gain).shape().to_vec(),
            });
        }
        let mut normed = vec![0.0; m * k];
        let mut inv_std = vec![0.0; m];
        for (r, row) in self.value(x).data().chunks(k).enumerate() {
            let mu = row.iter().sum::<f64>() / k as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / k as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (c, v) in row.iter().enumerate() {
                normed[r * k + c] = (v - mu) * is;
            }
        }
        let g = self.value(gain).data();
        let b = self.value(shift).data();
        let out: Vec<f64> = normed
            .iter()
            .enumerate()
            .map(|(idx, &n)| n * g[idx % k] + b[idx % k])
            .collect();
        Ok(self.custom(
            &[x, gain, shift],
            Tensor::from_parts(vec![m, k], out),
            Box::new(move |ctx| {
                let gain = ctx.inputs[1].data();
                let gout = ctx.grad.data();
                let mut gx = vec![0.0; m * k];
                let mut gg = vec![0.0; k];
                let mut gb = vec![0.0; k];
                for r in 0..m {
                    let xh = &normed[r * k..(r + 1) * k];
                    let go = &gout[r * k..(r + 1) * k];
                    let dxh: Vec<f64> = go.iter().zip(gain).map(|(a, b)| a * b).collect();
                    let mean_d = dxh.iter().sum::<f64>() / k as f64;
                    let mean_dx = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / k as f64;
                    for c in 0..k {
                        gx[r * k + c] = inv_std[r] * (dxh[c] - mean_d - xh[c] * mean_dx);
                        gg[c] += go[c] * xh[c];
                        gb[c] += go[c];
                    }
                }
                vec![
                    Tensor::from_parts(vec![m, k], gx),
                    Tensor::from_parts(ctx.inputs[1].shape().to_vec(), gg),
                    Tensor::from_parts(ctx.inputs[2].shape().to_vec(), gb),
                ]
            }),
        ))
    }

    /// Scales each row of an `[M, K]` matrix to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("l2_normalize_rows")?;
        let mut norms = vec![0.0; m];
        let mut out = self.value(a).data().to_vec();
        for (r, row) in out.chunks_mut(k).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::contract(format!("row {r} has zero norm")));
            }
            norms[r] = n;
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(self.custom(
            &[a],
            Tensor::from_parts(vec![m, k], out),
            Box::new(move |ctx| {
                let mut g = ctx.grad.data().to_vec();
                for (r, (grow, yrow)) in g.chunks_mut(k).zip(ctx.output.data().chunks(k)).enumerate() {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (gv, yv) in grow.iter_mut().zip(yrow) {
                        *gv = (*gv - yv * dot) / norms[r];
                    }
                }
                vec![Tensor::from_parts(vec![m, k], g)]
            }),
        ))
    }

    /// Diagonal of a square matrix.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("diag")?;
        if m != k {
            return Err(Error::Dimension {
                op: "diag",
                left: vec![m, k],
                right: vec![k, m],
            });
        }
        let out: Vec<f64> = (0..m).map(|i| self.value(a).data()[i * m + i]).collect();
        Ok(self.custom(
            &[a],
            Tensor::from_parts(vec![m], out),
            Box::new(move |ctx| {
                let mut g = vec![0.0; m * m];
                for i in 0..m {
                    g[i * m + i] = ctx.grad.data()[i];
                }
                vec![Tensor::from_parts(vec![m, m], g)]
            }),
        ))
    }

    /// Row lookup: `out[r] = table[indices[r]]`. Gradients scatter-add.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (rows, k) = self.value(table).dims2("gather_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!("row index {bad} out of range for table of {rows} rows")));
        }
        let data = self.value(table).data();
        let out: Vec<f64> = indices.iter().flat_map(|&i| data[i * k..(i + 1) * k].iter().copied()).collect();
        let indices = indices.to_vec();
        Ok(self.custom(
            &[table],
            Tensor::from_parts(vec![indices.len(), k], out),
            Box::new(move |ctx| {
                let mut g = vec![0.0; rows * k];
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..k {
                        g[i * k + c] += ctx.grad.data()[r * k + c];
                    }
                }
                vec![Tensor::from_parts(vec![rows, k], g)]
            }),
        ))
    }

    /// Sub-tensor at `index` along the leading axis.
    pub fn select_first(&mut self, a: Var, index: usize) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if shape.is_empty() || index >= shape[0] {
            return Err(Error::contract(format!("select_first index {index} for shape {shape:?}")));
        }
        let inner: usize = shape[1..].iter().product();
        let out = self.value(a).data()[index * inner..(index + 1) * inner].to_vec();
        Ok(self.custom(
            &[a],
            Tensor::from_parts(shape[1..].to_vec(), out),
            Box::new(move |ctx| {
                let mut g = vec![0.0; shape.iter().product()];
                g[index * inner..(index + 1) * inner].copy_from_slice(ctx.grad.data());
                vec![Tensor::from_parts(shape.clone(), g)]
            }),
        ))
    }

    /// Columns `start..start + len` of an `[M, K]` matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, k) = self.value(a).dims2("slice_cols")?;
        if start + len > k {
            return Err(Error::contract(format!("slice_cols {start}+{len} exceeds {k} columns")));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(k)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        Ok(self.custom(
            &[a],
            Tensor::from_parts(vec![m, len], out),
            Box::new(move |ctx| {
                let mut g = vec![0.0; m * k];
                for (r, grow) in ctx.grad.data().chunks(len).enumerate() {
                    g[r * k + start..r * k + start + len].copy_from_slice(grow);
                }
                vec![Tensor::from_parts(vec![m, k], g)]
            }),
        ))
    }

    /// Horizontal concatenation of `[M, K_i]` matrices.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut widths = Vec::with_capacity(parts.len());
        let mut m = None;
        for &p in parts {
            let (rows, k) = self.value(p).dims2("concat_cols")?;
            if *m.get_or_insert(rows) != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    left: vec![m.unwrap_or(0)],
                    right: vec![rows],
                });
            }
            widths.push(k);
        }
        let m = m.ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &k) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * k..(r + 1) * k]);
            }
        }
        Ok(self.custom(
            parts,
            Tensor::from_parts(vec![m, total], out),
            Box::new(move |ctx| {
                let mut grads: Vec<Vec<f64>> = widths.iter().map(|k| Vec::with_capacity(m * k)).collect();
                for grow in ctx.grad.data().chunks(total) {
                    let mut off = 0;
                    for (g, &k) in grads.iter_mut().zip(&widths) {
                        g.extend_from_slice(&grow[off..off + k]);
                        off += k;
                    }
                }
                grads
                    .into_iter()
                    .zip(&widths)
                    .map(|(g, &k)| Tensor::from_parts(vec![m, k], g))
                    .collect()
            }),
        ))
    }

    /// Vertical concatenation of `[M_i, K]` matrices.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut heights = Vec::with_capacity(parts.len());
        let mut k = None;
        for &p in parts {
            let (rows, cols) = self.value(p).dims2("concat_rows")?;
            if *k.get_or_insert(cols) != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    left: vec![k.unwrap_or(0)],
                    right: vec![cols],
                });
            }
            heights.push(rows);
        }
        let k = k.ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let out: Vec<f64> = parts.iter().flat_map(|&p| self.value(p).data().iter().copied()).collect();
        let total: usize = heights.iter().sum();
        Ok(self.custom(
            parts,
            Tensor::from_parts(vec![total, k], out),
            Box::new(move |ctx| {
                let mut off = 0;
                heights
                    .iter()
                    .map(|&m| {
                        let g = ctx.grad.data()[off * k..(off + m) * k].to_vec();
                        off += m;
                        Tensor::from_parts(vec![m, k], g)
                    })
                    .collect()
            }),
        ))
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-parameter gradients produced by [`Tape::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients(BTreeMap<String, Tensor>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.0
    }

    /// Elementwise `self += other`, used to reduce per-sample gradients.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (name, g) in &other.0 {
            match self.0.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.0.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.0.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.0.values().all(|g| g.data().iter().all(|v| v.is_finite()))
    }
}

/// Stable softmax on a plain slice, exposed for callers outside the tape.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    softmax_in_place(&mut v);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_matrix_has_unit_gradient() {
        let mut tape = Tape::new();
        let w = tape.param("w", &Tensor::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]).unwrap()).unwrap();
        let loss = tape.sum(w);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("w").unwrap(), &Tensor::ones(&[2, 2]));
    }

    #[test]
    fn quadratic_gradient_is_twice_input() {
        let w0 = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let mut tape = Tape::new();
        let w = tape.param("w", &w0).unwrap();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("w").unwrap().data(), &[0.6, -2.4, 4.0]);
    }

    #[test]
    fn unreachable_param_gets_zeros_and_fan_out_accumulates() {
        let mut tape = Tape::new();
        let a = tape.param("a", &Tensor::full(&[2], 2.0)).unwrap();
        tape.param("unused", &Tensor::full(&[3], 1.0)).unwrap();
        let s1 = tape.sum(a);
        let s2 = tape.sum(a);
        let loss = tape.add(s1, s2).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("a").unwrap().data(), &[2.0, 2.0]);
        assert_eq!(g.get("unused").unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.param("a", &Tensor::zeros(&[2])).unwrap();
        assert!(matches!(tape.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn duplicate_param_is_rejected() {
        let mut tape = Tape::new();
        tape.param("a", &Tensor::zeros(&[1])).unwrap();
        assert!(tape.param("a", &Tensor::zeros(&[1])).is_err());
    }
}
