//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every operation appends a node holding its output value and the indices of
//! its inputs. Parameters enter the tape as leaves via [`Tape::param`]; using
//! the same [`Var`] twice (e.g. both branches of a Siamese model) makes the
//! gradients of both uses sum into that one leaf. Dropping the tape frees the
//! graph.

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Relu(Var),
    Linear { x: Var, w: Var, b: Var, rows: usize, d: usize, k: usize },
    Sigmoid(Var),
    Softmax { x: Var, rows: usize, k: usize },
    GlobalAvgPool { x: Var, c: usize, hw: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Abs(Var),
    Scale(Var, f32),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    L2Norm(Var),
    ChannelL2Norm { x: Var, c: usize, hw: usize },
    Reshape(Var),
    Bce { p: Var, target: f32 },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Probabilities are clamped into this band before taking logarithms.
pub const PROB_CLAMP: f32 = 1e-7;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

fn check_finite(t: &Tensor, op: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("output of {op}")))
    }
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

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf. `requires_grad` decides whether backward fills its gradient.
    pub fn leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Var {
        value.set_requires_grad(false);
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a copy of a parameter tensor, tracking gradients if it asks for them.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad();
        self.leaf(t.clone(), rg)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of the last loss(es) with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), self.shape(b))?;
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let value = Tensor::new(&[geom.c_out, geom.h, geom.w], out)?;
        check_finite(&value, "conv2d")?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Op::Conv2d { x, w, b, geom }, value, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape(), xv.data().iter().map(|&v| v.max(0.0)).collect())
            .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(Op::Relu(x), value, rg)
    }

    /// `y = W x + b` for `x` of shape `[D]` or a batch `[N, D]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (rows, d, batched) = match *self.shape(x) {
            [d] => (1, d, false),
            [n, d] => (n, d, true),
            ref s => return Err(Error::shape(format!("linear input must be [D] or [N,D], got {s:?}"))),
        };
        let k = match *self.shape(w) {
            [k, wd] if wd == d => k,
            ref s => {
                return Err(Error::shape(format!(
                    "linear weights {s:?} do not accept input dimension {d}"
                )))
            }
        };
        if self.shape(b) != [k] {
            return Err(Error::shape(format!(
                "linear bias must be [{k}], got {:?}",
                self.shape(b)
            )));
        }
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows * k);
        for r in 0..rows {
            let xr = &xv[r * d..(r + 1) * d];
            for j in 0..k {
                let wr = &wv[j * d..(j + 1) * d];
                let s: f64 = xr.iter().zip(wr).map(|(a, c)| (*a as f64) * (*c as f64)).sum();
                out.push((s + bv[j] as f64) as f32);
            }
        }
        let shape: Vec<usize> = if batched { vec![rows, k] } else { vec![k] };
        let value = Tensor::new(&shape, out)?;
        check_finite(&value, "linear")?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Op::Linear { x, w, b, rows, d, k }, value, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape(), xv.data().iter().map(|&v| sigmoid(v)).collect())
            .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(Op::Sigmoid(x), value, rg)
    }

    /// Softmax over the last dimension of a `[K]` or `[N, K]` tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, k) = match *self.shape(x) {
            [k] => (1, k),
            [n, k] => (n, k),
            ref s => return Err(Error::shape(format!("softmax expects [K] or [N,K], got {s:?}"))),
        };
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows * k);
        for r in 0..rows {
            out.extend(softmax_row(&xv.data()[r * k..(r + 1) * k]));
        }
        let value = Tensor::new(xv.shape(), out)?;
        check_finite(&value, "softmax")?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Softmax { x, rows, k }, value, rg))
    }

    /// Spatial mean of each channel: `[C, H, W] -> [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let hw = h * w;
        let data = self.value(x).data();
        let out = (0..c)
            .map(|ch| {
                let s: f64 = data[ch * hw..(ch + 1) * hw].iter().map(|&v| v as f64).sum();
                (s / hw as f64) as f32
            })
            .collect();
        let value = Tensor::new(&[c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::GlobalAvgPool { x, c, hw }, value, rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{name} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape(), out)?;
        check_finite(&value, name)?;
        Ok(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Sub(a, b), value, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value =
            Tensor::new(xv.shape(), xv.data().iter().map(|v| v.abs()).collect()).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(Op::Abs(x), value, rg)
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape(), xv.data().iter().map(|v| v * s).collect())?;
        check_finite(&value, "scale")?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Scale(x, s), value, rg))
    }

    pub fn add_scalar(&mut self, x: Var, s: f32) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape(), xv.data().iter().map(|v| v + s).collect())?;
        check_finite(&value, "add_scalar")?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::AddScalar(x), value, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum() as f32);
        check_finite(&value, "sum")?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Sum(x), value, rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).mean() as f32);
        check_finite(&value, "mean")?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Mean(x), value, rg))
    }

    /// Euclidean norm over every element, as a scalar.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|&v| (v as f64) * (v as f64)).sum();
        let value = Tensor::scalar(s.sqrt() as f32);
        check_finite(&value, "l2_norm")?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::L2Norm(x), value, rg))
    }

    /// Per-pixel Euclidean norm across channels: `[C, H, W] -> [H, W]`.
    pub fn l2_norm_over_channels(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let hw = h * w;
        let value = Tensor::new(&[h, w], channel_l2(self.value(x).data(), c, hw))?;
        check_finite(&value, "l2_norm_over_channels")?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::ChannelL2Norm { x, c, hw }, value, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Reshape(x), value, rg))
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        self.reshape(x, &[n])
    }

    /// Binary cross-entropy of a scalar probability `p` against a 0/1 target.
    pub fn bce(&mut self, p: Var, target: f32) -> Result<Var> {
        if self.value(p).len() != 1 {
            return Err(Error::shape(format!(
                "bce expects a scalar probability, got {:?}",
                self.shape(p)
            )));
        }
        let value = Tensor::scalar(bce_value(self.value(p).data()[0], target));
        check_finite(&value, "bce")?;
        let rg = self.rg(&[p]);
        Ok(self.push(Op::Bce { p, target }, value, rg))
    }

    /// Back-propagates from a scalar `loss`, adding into every gradient already held.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut local: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut local)?;
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                None => self.grads[i] = Some(g),
            }
        }
        Ok(())
    }

    fn send(&self, local: &mut [Option<Vec<f32>>], to: Var, g: Vec<f32>) {
        if !self.nodes[to.0].requires_grad {
            return;
        }
        match &mut local[to.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &[f32], local: &mut [Option<Vec<f32>>]) -> Result<()> {
        let out = &self.nodes[i].value;
        match self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let need_input = self.nodes[x.0].requires_grad;
                let grads = kernels::conv2d_backward(
                    &geom,
                    self.value(x).data(),
                    self.value(w).data(),
                    g,
                    need_input,
                );
                if let Some(gx) = grads.input {
                    self.send(local, x, gx);
                }
                self.send(local, w, grads.weights);
                self.send(local, b, grads.bias);
            }
            Op::Relu(x) => {
                let gx = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                self.send(local, x, gx);
            }
            Op::Linear { x, w, b, rows, d, k } => {
                let (xv, wv) = (self.value(x).data(), self.value(w).data());
                if self.nodes[x.0].requires_grad {
                    let mut gx = vec![0.0f32; rows * d];
                    for r in 0..rows {
                        for c in 0..d {
                            let s: f64 = (0..k)
                                .map(|j| (g[r * k + j] as f64) * (wv[j * d + c] as f64))
                                .sum();
                            gx[r * d + c] = s as f32;
                        }
                    }
                    self.send(local, x, gx);
                }
                let mut gw = vec![0.0f32; k * d];
                let mut gb = vec![0.0f32; k];
                for j in 0..k {
                    for c in 0..d {
                        let s: f64 = (0..rows)
                            .map(|r| (g[r * k + j] as f64) * (xv[r * d + c] as f64))
                            .sum();
                        gw[j * d + c] = s as f32;
                    }
                    gb[j] = (0..rows).map(|r| g[r * k + j] as f64).sum::<f64>() as f32;
                }
                self.send(local, w, gw);
                self.send(local, b, gb);
            }
            Op::Sigmoid(x) => {
                let gx = out
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&s, &gv)| gv * s * (1.0 - s))
                    .collect();
                self.send(local, x, gx);
            }
            Op::Softmax { x, rows, k } => {
                let s = out.data();
                let mut gx = vec![0.0f32; rows * k];
                for r in 0..rows {
                    let sr = &s[r * k..(r + 1) * k];
                    let gr = &g[r * k..(r + 1) * k];
                    let dotp: f64 = sr.iter().zip(gr).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
                    for j in 0..k {
                        gx[r * k + j] = (sr[j] as f64 * (gr[j] as f64 - dotp)) as f32;
                    }
                }
                self.send(local, x, gx);
            }
            Op::GlobalAvgPool { x, c, hw } => {
                let mut gx = vec![0.0f32; c * hw];
                for ch in 0..c {
                    let v = g[ch] / hw as f32;
                    gx[ch * hw..(ch + 1) * hw].iter_mut().for_each(|e| *e = v);
                }
                self.send(local, x, gx);
            }
            Op::Add(a, b) => {
                self.send(local, a, g.to_vec());
                self.send(local, b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.send(local, a, g.to_vec());
                self.send(local, b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let ga = g.iter().zip(bv).map(|(gv, y)| gv * y).collect();
                let gb = g.iter().zip(av).map(|(gv, x)| gv * x).collect();
                self.send(local, a, ga);
                self.send(local, b, gb);
            }
            Op::Abs(x) => {
                let gx = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        if v > 0.0 {
                            gv
                        } else if v < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.send(local, x, gx);
            }
            Op::Scale(x, s) => self.send(local, x, g.iter().map(|v| v * s).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => self.send(local, x, g.to_vec()),
            Op::Sum(x) => {
                let n = self.value(x).len();
                self.send(local, x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(x).len();
                self.send(local, x, vec![g[0] / n as f32; n]);
            }
            Op::L2Norm(x) => {
                let norm = out.data()[0];
                let gx = if norm > 0.0 {
                    self.value(x).data().iter().map(|&v| g[0] * v / norm).collect()
                } else {
                    // Subgradient zero at the origin.
                    vec![0.0; self.value(x).len()]
                };
                self.send(local, x, gx);
            }
            Op::ChannelL2Norm { x, c, hw } => {
                let (xv, rho) = (self.value(x).data(), out.data());
                let mut gx = vec![0.0f32; c * hw];
                for p in 0..hw {
                    if rho[p] > 0.0 {
                        let f = g[p] / rho[p];
                        for ch in 0..c {
                            gx[ch * hw + p] = f * xv[ch * hw + p];
                        }
                    }
                }
                self.send(local, x, gx);
            }
            Op::Bce { p, target } => {
                let pv = self.value(p).data()[0];
                let gp = if pv <= PROB_CLAMP || pv >= 1.0 - PROB_CLAMP {
                    0.0
                } else {
                    let (p64, y) = (pv as f64, target as f64);
                    (-(y / p64) + (1.0 - y) / (1.0 - p64)) as f32
                };
                self.send(local, p, vec![g[0] * gp]);
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(v: f32) -> f32 {
    let v = v as f64;
    let s = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    s as f32
}

pub(crate) fn softmax_row(x: &[f32]) -> Vec<f32> {
    let m = x.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = x.iter().map(|&v| (v as f64 - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| (v / z) as f32).collect()
}

pub(crate) fn channel_l2(x: &[f32], c: usize, hw: usize) -> Vec<f32> {
    (0..hw)
        .map(|p| {
            let s: f64 = (0..c).map(|ch| (x[ch * hw + p] as f64).powi(2)).sum();
            s.sqrt() as f32
        })
        .collect()
}

pub(crate) fn bce_value(p: f32, target: f32) -> f32 {
    let p = (p as f64).clamp(PROB_CLAMP as f64, 1.0 - PROB_CLAMP as f64);
    let y = target as f64;
    (-(y * p.ln() + (1.0 - y) * (1.0 - p).ln())) as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn conv_all_ones_center_and_corner() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[1, 3, 3], 1.0));
        let w = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = t.constant(Tensor::zeros(&[1]));
        let y = t.conv2d(x, w, b).unwrap();
        let out = t.value(y).data();
        assert_eq!(out[4], 9.0);
        assert_eq!(out[0], 4.0);
        assert_eq!(out[1], 6.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut t = Tape::new();
        let input = Tensor::from_fn(&[1, 5, 7], |i| (i as f32 * 0.37).sin());
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let x = t.constant(input.clone());
        let w = t.constant(k);
        let b = t.constant(Tensor::zeros(&[1]));
        let y = t.conv2d(x, w, b).unwrap();
        assert_eq!(t.value(y).data(), input.data());
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[3, 4, 4]));
        let w = t.constant(Tensor::zeros(&[2, 2, 3, 3]));
        let b = t.constant(Tensor::zeros(&[2]));
        assert!(matches!(t.conv2d(x, w, b), Err(Error::Shape(_))));
    }

    #[test]
    fn relu_values_and_dead_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap(), true);
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0, 1.0]);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(&[4], -0.5), true);
        let y = t.relu(x);
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.value(y).data(), &[0.0; 4]);
        assert_eq!(t.grad(x).unwrap(), &[0.0; 4]);
    }

    #[test]
    fn linear_hand_arithmetic_and_identity() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let w = t.constant(Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap());
        let b = t.constant(Tensor::new(&[1], vec![0.5]).unwrap());
        let y = t.linear(x, w, b).unwrap();
        assert_eq!(t.value(y).data(), &[3.5]);

        let xs = Tensor::new(&[3], vec![0.3, -1.0, 4.0]).unwrap();
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let x = t.constant(xs.clone());
        let w = t.constant(eye);
        let b = t.constant(Tensor::zeros(&[3]));
        let y = t.linear(x, w, b).unwrap();
        assert_eq!(t.value(y).data(), xs.data());

        let w_bad = t.constant(Tensor::zeros(&[2, 4]));
        assert!(t.linear(x, w_bad, b).is_err());
    }

    #[test]
    fn sigmoid_softmax_pool() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::scalar(0.0));
        let s = t.sigmoid(z);
        assert_eq!(t.value(s).data(), &[0.5]);

        let a = t.constant(Tensor::full(&[3], 2.5));
        let sm = t.softmax(a).unwrap();
        assert!(close(t.value(sm).data(), &[1.0 / 3.0; 3], 1e-7));

        let big = t.constant(Tensor::new(&[3], vec![1000.0, 0.0, -1000.0]).unwrap());
        let sm = t.softmax(big).unwrap();
        let total: f32 = t.value(sm).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-6);

        let img = t.constant(Tensor::from_fn(&[2, 2, 2], |i| i as f32));
        let p = t.global_avg_pool(img).unwrap();
        assert_eq!(t.value(p).data(), &[1.5, 5.5]);
    }

    #[test]
    fn channel_norm_of_equal_maps_is_zero() {
        let mut t = Tape::new();
        let f = Tensor::from_fn(&[4, 3, 3], |i| (i as f32).cos());
        let a = t.constant(f.clone());
        let b = t.constant(f);
        let d = t.sub(a, b).unwrap();
        let n = t.l2_norm_over_channels(d).unwrap();
        assert_eq!(t.value(n).shape(), &[3, 3]);
        assert!(t.value(n).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_fn(&[2, 3], |i| i as f32 - 2.0), true);
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_half_square_is_identity() {
        let mut t = Tape::new();
        let xs = Tensor::from_fn(&[5], |i| i as f32 * 0.7 - 1.3);
        let x = t.leaf(xs.clone(), true);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        let l = t.scale(s, 0.5).unwrap();
        t.backward(l).unwrap();
        assert!(close(t.grad(x).unwrap(), xs.data(), 1e-6));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(&[2], 3.0), true);
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(&[2], 1.0), true);
        let c = t.constant(Tensor::full(&[2], 2.0));
        let y = t.mul(x, c).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0]);
        assert!(t.grad(c).is_none());
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let mut t = Tape::new();
        let src = Tensor::from_fn(&[1, 4, 4], |i| i as f32 - 7.0);
        let x = t.leaf(src.clone(), true);
        let w = t.leaf(Tensor::full(&[2, 1, 3, 3], 0.1), true);
        let b = t.leaf(Tensor::zeros(&[2]), true);
        let y = t.conv2d(x, w, b).unwrap();
        let r = t.relu(y);
        let a = t.abs(r);
        let l = t.mean(a).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.value(x).data(), src.data());
    }

    #[test]
    fn bce_clamps_extremes() {
        assert!((bce_value(0.5, 1.0) - std::f32::consts::LN_2).abs() < 1e-6);
        assert!(bce_value(0.0, 1.0).is_finite());
        assert!(bce_value(1.0, 0.0).is_finite());
        assert!(bce_value(1.0, 1.0) > 0.0);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[2], f32::MAX));
        assert!(matches!(t.add(x, x), Err(Error::NonFinite(_))));
    }
}
