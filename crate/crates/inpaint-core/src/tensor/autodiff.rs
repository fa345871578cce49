//! Reverse-mode automatic differentiation on a per-call tape.
//!
//! A [`Graph`] records every executed operation together with a backward
//! closure. [`Graph::backward`] consumes the tape, visits nodes in reverse
//! execution order exactly once, and sums the contributions of every
//! consumer into each tensor's gradient accumulator. Built in no-grad mode
//! the same code path runs pure inference without recording anything.

use crate::error::{Error, Result};
use crate::tensor::fft::{fft2_stacked, ifft2_stacked_real};
use crate::tensor::ops::{
    bmm, bmm_nt, bmm_tn, concat, conv2d, conv2d_grad_w, conv2d_grad_x, inverse_perm, mean_all,
    permute, resize_nearest, resize_nearest_adjoint, slice_axis, softmax_last,
    softmax_last_backward, sum_all, sum_batch_spatial, tconv2d, ConvSpec,
};
use crate::tensor::{Scalar, Tensor};

pub type NodeId = usize;

type BackwardFn<T> = Box<dyn FnOnce(&Tensor<T>, &mut GradSink<T>)>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Gradient accumulators keyed by node id.
pub struct GradSink<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> GradSink<T> {
    fn add(&mut self, id: NodeId, g: Tensor<T>) {
        match &mut self.grads[id] {
            Some(acc) => {
                let summed = acc.zip(&g, |a, b| a + b).expect("gradient shape");
                *acc = summed;
            }
            slot @ None => *slot = Some(g),
        }
    }
}

/// Gradients returned by [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

/// Batch-norm feeding mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running buffers.
    Train,
    /// Normalize with the running buffers; no update. Still differentiable.
    Eval,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Inference tape: records values only, never backward closures.
    pub fn no_grad() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        requires: bool,
        backward: Option<BackwardFn<T>>,
    ) -> NodeId {
        let requires = requires && self.grad_enabled;
        self.nodes.push(Node {
            value,
            requires_grad: requires,
            backward: if requires { backward } else { None },
        });
        self.nodes.len() - 1
    }

    /// Register an input tensor. It participates in gradients iff its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: &Tensor<T>) -> NodeId {
        self.push(t.clone(), t.requires_grad, None)
    }

    /// Register a tensor that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, false, None)
    }

    pub fn scalar(&mut self, v: T) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Cut the tape: same value, no history.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.clone();
        self.constant(v)
    }

    fn unary(
        &mut self,
        x: NodeId,
        value: Tensor<T>,
        dfn: impl FnOnce(&Tensor<T>) -> Tensor<T> + 'static,
    ) -> NodeId {
        let req = self.nodes[x].requires_grad;
        let bw: Option<BackwardFn<T>> = if req && self.grad_enabled {
            Some(Box::new(move |dz, sink| {
                sink.add(x, dfn(dz));
            }))
        } else {
            None
        };
        self.push(value, req, bw)
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.zip(&self.nodes[b].value, |x, y| x + y)?;
        let (ra, rb) = (self.nodes[a].requires_grad, self.nodes[b].requires_grad);
        Ok(self.push(
            v,
            ra || rb,
            Some(Box::new(move |dz, sink| {
                if ra {
                    sink.add(a, dz.clone());
                }
                if rb {
                    sink.add(b, dz.clone());
                }
            })),
        ))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.zip(&self.nodes[b].value, |x, y| x - y)?;
        let (ra, rb) = (self.nodes[a].requires_grad, self.nodes[b].requires_grad);
        Ok(self.push(
            v,
            ra || rb,
            Some(Box::new(move |dz, sink| {
                if ra {
                    sink.add(a, dz.clone());
                }
                if rb {
                    sink.add(b, dz.map(|g| -g));
                }
            })),
        ))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.nodes[a].value.clone();
        let bv = self.nodes[b].value.clone();
        let v = av.zip(&bv, |x, y| x * y)?;
        let (ra, rb) = (self.nodes[a].requires_grad, self.nodes[b].requires_grad);
        Ok(self.push(
            v,
            ra || rb,
            Some(Box::new(move |dz, sink| {
                if ra {
                    sink.add(a, dz.zip(&bv, |g, y| g * y).expect("shape"));
                }
                if rb {
                    sink.add(b, dz.zip(&av, |g, x| g * x).expect("shape"));
                }
            })),
        ))
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.map(|a| -a);
        self.unary(x, v, |dz| dz.map(|g| -g))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let v = self.nodes[x].value.map(|a| a * c);
        self.unary(x, v, move |dz| dz.map(|g| g * c))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: T) -> NodeId {
        let v = self.nodes[x].value.map(|a| a + c);
        self.unary(x, v, |dz| dz.clone())
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x].value.clone();
        let v = xv.map(|a| a.abs());
        self.unary(x, v, move |dz| {
            dz.zip(&xv, |g, a| {
                if a > T::zero() {
                    g
                } else if a < T::zero() {
                    -g
                } else {
                    T::zero()
                }
            })
            .expect("shape")
        })
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.map(|a| a.exp());
        let y = v.clone();
        self.unary(x, v, move |dz| dz.zip(&y, |g, e| g * e).expect("shape"))
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x].value.clone();
        let v = xv.map(|a| a.ln());
        self.unary(x, v, move |dz| dz.zip(&xv, |g, a| g / a).expect("shape"))
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.map(|a| a.sqrt());
        let y = v.clone();
        let half = T::from_f64(0.5);
        self.unary(x, v, move |dz| {
            dz.zip(&y, |g, s| g * half / s).expect("shape")
        })
    }

    pub fn clamp(&mut self, x: NodeId, lo: T, hi: T) -> NodeId {
        let xv = self.nodes[x].value.clone();
        let v = xv.map(|a| if a < lo { lo } else if a > hi { hi } else { a });
        self.unary(x, v, move |dz| {
            dz.zip(&xv, |g, a| if a >= lo && a <= hi { g } else { T::zero() })
                .expect("shape")
        })
    }

    pub fn clamp_min(&mut self, x: NodeId, lo: T) -> NodeId {
        let xv = self.nodes[x].value.clone();
        let v = xv.map(|a| if a < lo { lo } else { a });
        self.unary(x, v, move |dz| {
            dz.zip(&xv, |g, a| if a >= lo { g } else { T::zero() })
                .expect("shape")
        })
    }

    // ---- activations -----------------------------------------------------

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x].value.clone();
        let v = xv.map(|a| if a > T::zero() { a } else { T::zero() });
        self.unary(x, v, move |dz| {
            dz.zip(&xv, |g, a| if a > T::zero() { g } else { T::zero() })
                .expect("shape")
        })
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let s = T::from_f64(slope);
        let xv = self.nodes[x].value.clone();
        let v = xv.map(|a| if a > T::zero() { a } else { a * s });
        self.unary(x, v, move |dz| {
            dz.zip(&xv, |g, a| if a > T::zero() { g } else { g * s })
                .expect("shape")
        })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.map(sigmoid_scalar);
        let y = v.clone();
        self.unary(x, v, move |dz| {
            dz.zip(&y, |g, s| g * s * (T::one() - s)).expect("shape")
        })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.map(|a| a.tanh());
        let y = v.clone();
        self.unary(x, v, move |dz| {
            dz.zip(&y, |g, t| g * (T::one() - t * t)).expect("shape")
        })
    }

    /// Smooth GELU (tanh approximation).
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x].value.clone();
        let v = xv.map(gelu_scalar);
        self.unary(x, v, move |dz| {
            dz.zip(&xv, |g, a| g * gelu_grad_scalar(a)).expect("shape")
        })
    }

    /// Numerically-stable ln(1 + exp(x)).
    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x].value.clone();
        let v = xv.map(softplus_scalar);
        self.unary(x, v, move |dz| {
            dz.zip(&xv, |g, a| g * sigmoid_scalar(a)).expect("shape")
        })
    }

    // ---- softmax / norms ---------------------------------------------------

    /// Softmax over an arbitrary axis (permutes to the last axis internally).
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let r = self.nodes[x].value.rank();
        if axis >= r {
            return Err(Error::contract(format!("softmax axis {axis} on rank {r}")));
        }
        if axis == r - 1 {
            return Ok(self.softmax_lastaxis(x));
        }
        let mut perm: Vec<usize> = (0..r).filter(|&i| i != axis).collect();
        perm.push(axis);
        let xp = self.permute(x, &perm)?;
        let sm = self.softmax_lastaxis(xp);
        self.permute(sm, &inverse_perm(&perm))
    }

    pub fn softmax_lastaxis(&mut self, x: NodeId) -> NodeId {
        let v = softmax_last(&self.nodes[x].value);
        let y = v.clone();
        self.unary(x, v, move |dz| softmax_last_backward(&y, dz))
    }

    /// Layer norm over the last axis with affine parameters.
    pub fn layernorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let xv = self.nodes[x].value.clone();
        let gv = self.nodes[gamma].value.clone();
        let bv = self.nodes[beta].value.clone();
        let n = *xv.shape().last().unwrap();
        if gv.shape() != [n] || bv.shape() != [n] {
            return Err(Error::shape(format!(
                "layernorm affine {:?}/{:?} on last axis {n}",
                gv.shape(),
                bv.shape()
            )));
        }
        let rows = xv.numel() / n;
        let epsv = T::from_f64(eps);
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        let xd = xv.data();
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mut mean = T::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean / T::from_usize(n);
            let mut var = T::zero();
            for &v in row {
                let d = v - mean;
                var = var + d * d;
            }
            var = var / T::from_usize(n);
            let rs = T::one() / (var + epsv).sqrt();
            rstd[r] = rs;
            for i in 0..n {
                let xh = (row[i] - mean) * rs;
                xhat[r * n + i] = xh;
                out[r * n + i] = xh * gv.data()[i] + bv.data()[i];
            }
        }
        let value = Tensor::from_vec(out, xv.shape())?;
        let (rx, rg, rb) = (
            self.nodes[x].requires_grad,
            self.nodes[gamma].requires_grad,
            self.nodes[beta].requires_grad,
        );
        let xhat_t = Tensor::from_vec(xhat, xv.shape())?;
        Ok(self.push(
            value,
            rx || rg || rb,
            Some(Box::new(move |dz, sink| {
                let dzd = dz.data();
                let xh = xhat_t.data();
                if rg || rb {
                    let mut dgamma = vec![T::zero(); n];
                    let mut dbeta = vec![T::zero(); n];
                    for r in 0..rows {
                        for i in 0..n {
                            let g = dzd[r * n + i];
                            dgamma[i] = dgamma[i] + g * xh[r * n + i];
                            dbeta[i] = dbeta[i] + g;
                        }
                    }
                    if rg {
                        sink.add(gamma, Tensor::from_vec(dgamma, &[n]).expect("shape"));
                    }
                    if rb {
                        sink.add(beta, Tensor::from_vec(dbeta, &[n]).expect("shape"));
                    }
                }
                if rx {
                    let mut dx = vec![T::zero(); dz.numel()];
                    let inv_n = T::one() / T::from_usize(n);
                    for r in 0..rows {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for i in 0..n {
                            let dxh = dzd[r * n + i] * gv.data()[i];
                            m1 = m1 + dxh;
                            m2 = m2 + dxh * xh[r * n + i];
                        }
                        m1 = m1 * inv_n;
                        m2 = m2 * inv_n;
                        for i in 0..n {
                            let dxh = dzd[r * n + i] * gv.data()[i];
                            dx[r * n + i] = rstd[r] * (dxh - m1 - xh[r * n + i] * m2);
                        }
                    }
                    sink.add(x, Tensor::from_vec(dx, xhat_t.shape()).expect("shape"));
                }
            })),
        ))
    }

    /// Batch norm over the channel axis of an NCHW tensor. In train mode the
    /// running buffers are updated in place (non-differentiable side channel).
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &mut Tensor<T>,
        running_var: &mut Tensor<T>,
        mode: BnMode,
        momentum: f64,
        eps: f64,
    ) -> Result<NodeId> {
        let xv = self.nodes[x].value.clone();
        let s = xv.shape();
        if s.len() != 4 {
            return Err(Error::shape(format!("batchnorm2d on {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let gv = self.nodes[gamma].value.clone();
        let bv = self.nodes[beta].value.clone();
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::shape(format!(
                "batchnorm affine for {c} channels, got {:?}/{:?}",
                gv.shape(),
                bv.shape()
            )));
        }
        let m = n * h * w;
        let epsv = T::from_f64(eps);
        let (mean, var) = match mode {
            BnMode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let xd = xv.data();
                for cc in 0..c {
                    let mut acc = T::zero();
                    for nn in 0..n {
                        let base = (nn * c + cc) * h * w;
                        for &v in &xd[base..base + h * w] {
                            acc = acc + v;
                        }
                    }
                    let mu = acc / T::from_usize(m);
                    mean[cc] = mu;
                    let mut acc2 = T::zero();
                    for nn in 0..n {
                        let base = (nn * c + cc) * h * w;
                        for &v in &xd[base..base + h * w] {
                            let d = v - mu;
                            acc2 = acc2 + d * d;
                        }
                    }
                    var[cc] = acc2 / T::from_usize(m);
                }
                // running = (1-momentum)*running + momentum*batch (unbiased var)
                let mom = T::from_f64(momentum);
                let keep = T::one() - mom;
                let unbias = if m > 1 {
                    T::from_usize(m) / T::from_usize(m - 1)
                } else {
                    T::one()
                };
                let rm = running_mean.data_mut();
                let rv = running_var.data_mut();
                for cc in 0..c {
                    rm[cc] = keep * rm[cc] + mom * mean[cc];
                    rv[cc] = keep * rv[cc] + mom * var[cc] * unbias;
                }
                (mean, var)
            }
            BnMode::Eval => (running_mean.data().to_vec(), running_var.data().to_vec()),
        };
        let mut rstd = vec![T::zero(); c];
        for cc in 0..c {
            rstd[cc] = T::one() / (var[cc] + epsv).sqrt();
        }
        let xd = xv.data();
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut out = vec![T::zero(); xv.numel()];
        for nn in 0..n {
            for cc in 0..c {
                let base = (nn * c + cc) * h * w;
                let (mu, rs, ga, be) = (mean[cc], rstd[cc], gv.data()[cc], bv.data()[cc]);
                for i in base..base + h * w {
                    let xh = (xd[i] - mu) * rs;
                    xhat[i] = xh;
                    out[i] = xh * ga + be;
                }
            }
        }
        let value = Tensor::from_vec(out, s)?;
        let (rx, rg, rb) = (
            self.nodes[x].requires_grad,
            self.nodes[gamma].requires_grad,
            self.nodes[beta].requires_grad,
        );
        if !(rx || rg || rb) || !self.grad_enabled {
            return Ok(self.push(value, false, None));
        }
        let xhat_t = Tensor::from_vec(xhat, s)?;
        let shape = s.to_vec();
        Ok(self.push(
            value,
            true,
            Some(Box::new(move |dz, sink| {
                let dzd = dz.data();
                let xh = xhat_t.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for nn in 0..n {
                    for cc in 0..c {
                        let base = (nn * c + cc) * h * w;
                        let mut dg = T::zero();
                        let mut db = T::zero();
                        for i in base..base + h * w {
                            dg = dg + dzd[i] * xh[i];
                            db = db + dzd[i];
                        }
                        dgamma[cc] = dgamma[cc] + dg;
                        dbeta[cc] = dbeta[cc] + db;
                    }
                }
                if rx {
                    let mut dx = vec![T::zero(); dzd.len()];
                    match mode {
                        BnMode::Train => {
                            let inv_m = T::one() / T::from_usize(m);
                            for nn in 0..n {
                                for cc in 0..c {
                                    let base = (nn * c + cc) * h * w;
                                    let k = gv.data()[cc] * rstd[cc];
                                    for i in base..base + h * w {
                                        dx[i] = k
                                            * (dzd[i]
                                                - dbeta[cc] * inv_m
                                                - xh[i] * dgamma[cc] * inv_m);
                                    }
                                }
                            }
                        }
                        BnMode::Eval => {
                            for nn in 0..n {
                                for cc in 0..c {
                                    let base = (nn * c + cc) * h * w;
                                    let k = gv.data()[cc] * rstd[cc];
                                    for i in base..base + h * w {
                                        dx[i] = dzd[i] * k;
                                    }
                                }
                            }
                        }
                    }
                    sink.add(x, Tensor::from_vec(dx, &shape).expect("shape"));
                }
                if rg {
                    sink.add(gamma, Tensor::from_vec(dgamma, &[c]).expect("shape"));
                }
                if rb {
                    sink.add(beta, Tensor::from_vec(dbeta, &[c]).expect("shape"));
                }
            })),
        ))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.nodes[a].value.clone();
        let bv = self.nodes[b].value.clone();
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let nn = bv.shape()[1];
        let a3 = self.reshape(a, &[1, m, k])?;
        let b3 = self.reshape(b, &[1, bv.shape()[0], nn])?;
        let c3 = self.bmm(a3, b3)?;
        self.reshape(c3, &[m, nn])
    }

    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.nodes[a].value.clone();
        let bv = self.nodes[b].value.clone();
        let v = bmm(&av, &bv)?;
        let (ra, rb) = (self.nodes[a].requires_grad, self.nodes[b].requires_grad);
        Ok(self.push(
            v,
            ra || rb,
            Some(Box::new(move |dz, sink| {
                if ra {
                    sink.add(a, bmm_nt(dz, &bv).expect("shape"));
                }
                if rb {
                    sink.add(b, bmm_tn(&av, dz).expect("shape"));
                }
            })),
        ))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        spec: ConvSpec,
    ) -> Result<NodeId> {
        let xv = self.nodes[x].value.clone();
        let wv = self.nodes[w].value.clone();
        let bv = bias.map(|b| self.nodes[b].value.clone());
        let v = conv2d(&xv, &wv, bv.as_ref(), &spec)?;
        let rx = self.nodes[x].requires_grad;
        let rw = self.nodes[w].requires_grad;
        let rb = bias.map(|b| self.nodes[b].requires_grad).unwrap_or(false);
        let (h, wi) = (xv.shape()[2], xv.shape()[3]);
        Ok(self.push(
            v,
            rx || rw || rb,
            Some(Box::new(move |dz, sink| {
                if rx {
                    sink.add(x, conv2d_grad_x(dz, &wv, &spec, (h, wi)).expect("shape"));
                }
                if rw {
                    sink.add(w, conv2d_grad_w(&xv, dz, &spec).expect("shape"));
                }
                if rb {
                    sink.add(bias.unwrap(), sum_batch_spatial(dz).expect("shape"));
                }
            })),
        ))
    }

    pub fn tconv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        spec: ConvSpec,
    ) -> Result<NodeId> {
        let xv = self.nodes[x].value.clone();
        let wv = self.nodes[w].value.clone();
        let bv = bias.map(|b| self.nodes[b].value.clone());
        let v = tconv2d(&xv, &wv, bv.as_ref(), &spec)?;
        let rx = self.nodes[x].requires_grad;
        let rw = self.nodes[w].requires_grad;
        let rb = bias.map(|b| self.nodes[b].requires_grad).unwrap_or(false);
        Ok(self.push(
            v,
            rx || rw || rb,
            Some(Box::new(move |dz, sink| {
                if rx {
                    sink.add(x, conv2d(dz, &wv, None, &spec).expect("shape"));
                }
                if rw {
                    sink.add(w, conv2d_grad_w(dz, &xv, &spec).expect("shape"));
                }
                if rb {
                    sink.add(bias.unwrap(), sum_batch_spatial(dz).expect("shape"));
                }
            })),
        ))
    }

    // ---- broadcasting -----------------------------------------------------

    /// `x + b` where every extent of `b` equals `x`'s or is 1.
    pub fn add_broadcast(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let xv = self.nodes[x].value.clone();
        let bv = self.nodes[b].value.clone();
        let bexp = broadcast_to(&bv, xv.shape())?;
        let v = xv.zip(&bexp, |p, q| p + q)?;
        let (rx, rb) = (self.nodes[x].requires_grad, self.nodes[b].requires_grad);
        let bshape = bv.shape().to_vec();
        Ok(self.push(
            v,
            rx || rb,
            Some(Box::new(move |dz, sink| {
                if rx {
                    sink.add(x, dz.clone());
                }
                if rb {
                    sink.add(b, sum_to_shape(dz, &bshape).expect("shape"));
                }
            })),
        ))
    }

    /// `x ⊙ b` with the same broadcast rule as [`Graph::add_broadcast`].
    pub fn mul_broadcast(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let xv = self.nodes[x].value.clone();
        let bv = self.nodes[b].value.clone();
        let bexp = broadcast_to(&bv, xv.shape())?;
        let v = xv.zip(&bexp, |p, q| p * q)?;
        let (rx, rb) = (self.nodes[x].requires_grad, self.nodes[b].requires_grad);
        let bshape = bv.shape().to_vec();
        Ok(self.push(
            v,
            rx || rb,
            Some(Box::new(move |dz, sink| {
                if rx {
                    sink.add(x, dz.zip(&bexp, |g, q| g * q).expect("shape"));
                }
                if rb {
                    let gx = dz.zip(&xv, |g, p| g * p).expect("shape");
                    sink.add(b, sum_to_shape(&gx, &bshape).expect("shape"));
                }
            })),
        ))
    }

    /// `x · s` with a trainable 1-element scale (the residual weight of
    /// zero-initialized residual additions).
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.nodes[s].value.clone();
        if sv.numel() != 1 {
            return Err(Error::contract(format!(
                "scale_by needs a 1-element scale, got {:?}",
                sv.shape()
            )));
        }
        let xv = self.nodes[x].value.clone();
        let c = sv.data()[0];
        let v = xv.map(|a| a * c);
        let (rx, rs) = (self.nodes[x].requires_grad, self.nodes[s].requires_grad);
        Ok(self.push(
            v,
            rx || rs,
            Some(Box::new(move |dz, sink| {
                if rx {
                    sink.add(x, dz.map(|g| g * c));
                }
                if rs {
                    let mut acc = T::zero();
                    for (g, a) in dz.data().iter().zip(xv.data()) {
                        acc = acc + *g * *a;
                    }
                    sink.add(s, Tensor::scalar(acc));
                }
            })),
        ))
    }

    // ---- shape ------------------------------------------------------------

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.nodes[x].value.reshape(shape)?;
        let old = self.nodes[x].value.shape().to_vec();
        let req = self.nodes[x].requires_grad;
        Ok(self.push(
            v,
            req,
            Some(Box::new(move |dz, sink| {
                sink.add(x, dz.reshape(&old).expect("shape"));
            })),
        ))
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let v = permute(&self.nodes[x].value, perm)?;
        let req = self.nodes[x].requires_grad;
        let inv = inverse_perm(perm);
        Ok(self.push(
            v,
            req,
            Some(Box::new(move |dz, sink| {
                sink.add(x, permute(dz, &inv).expect("shape"));
            })),
        ))
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        let vals: Vec<Tensor<T>> = xs.iter().map(|&i| self.nodes[i].value.clone()).collect();
        let refs: Vec<&Tensor<T>> = vals.iter().collect();
        let v = concat(&refs, axis)?;
        let req = xs.iter().any(|&i| self.nodes[i].requires_grad);
        let parts: Vec<(NodeId, usize, bool)> = xs
            .iter()
            .map(|&i| {
                (
                    i,
                    self.nodes[i].value.shape()[axis],
                    self.nodes[i].requires_grad,
                )
            })
            .collect();
        Ok(self.push(
            v,
            req,
            Some(Box::new(move |dz, sink| {
                let mut start = 0;
                for (id, len, r) in parts {
                    if r {
                        sink.add(id, slice_axis(dz, axis, start, len).expect("shape"));
                    }
                    start += len;
                }
            })),
        ))
    }

    pub fn slice_axis(
        &mut self,
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<NodeId> {
        let v = slice_axis(&self.nodes[x].value, axis, start, len)?;
        let req = self.nodes[x].requires_grad;
        let full_shape = self.nodes[x].value.shape().to_vec();
        Ok(self.push(
            v,
            req,
            Some(Box::new(move |dz, sink| {
                let mut dx = Tensor::zeros(&full_shape);
                scatter_slice(&mut dx, dz, axis, start);
                sink.add(x, dx);
            })),
        ))
    }

    pub fn resize_nearest(&mut self, x: NodeId, oh: usize, ow: usize) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        let r = xv.rank();
        let (h, w) = (xv.shape()[r - 2], xv.shape()[r - 1]);
        let v = resize_nearest(xv, oh, ow)?;
        let req = self.nodes[x].requires_grad;
        Ok(self.push(
            v,
            req,
            Some(Box::new(move |dz, sink| {
                sink.add(x, resize_nearest_adjoint(dz, h, w).expect("shape"));
            })),
        ))
    }

    // ---- spectral ----------------------------------------------------------

    /// Forward 2-D DFT with (re, im) stacked along channels:
    /// `[..,C,H,W] -> [..,2C,H,W]`.
    pub fn fft2_stacked(&mut self, x: NodeId) -> Result<NodeId> {
        let v = fft2_stacked(&self.nodes[x].value)?;
        let req = self.nodes[x].requires_grad;
        let sh = self.nodes[x].value.shape().to_vec();
        let hw = sh[sh.len() - 1] * sh[sh.len() - 2];
        Ok(self.push(
            v,
            req,
            Some(Box::new(move |dz, sink| {
                let g = ifft2_stacked_real(dz).expect("shape");
                sink.add(x, g.map(|v| v * T::from_usize(hw)));
            })),
        ))
    }

    /// Real part of the inverse DFT of a stacked spectrum:
    /// `[..,2C,H,W] -> [..,C,H,W]`.
    pub fn ifft2_stacked_real(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ifft2_stacked_real(&self.nodes[x].value)?;
        let req = self.nodes[x].requires_grad;
        let sh = self.nodes[x].value.shape().to_vec();
        let hw = sh[sh.len() - 1] * sh[sh.len() - 2];
        Ok(self.push(
            v,
            req,
            Some(Box::new(move |dz, sink| {
                let g = fft2_stacked(dz).expect("shape");
                sink.add(x, g.map(|v| v / T::from_usize(hw)));
            })),
        ))
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = sum_all(&self.nodes[x].value);
        let shape = self.nodes[x].value.shape().to_vec();
        self.unary(x, v, move |dz| Tensor::full(&shape, dz.data()[0]))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = mean_all(&self.nodes[x].value);
        let shape = self.nodes[x].value.shape().to_vec();
        let n: usize = shape.iter().product();
        self.unary(x, v, move |dz| {
            Tensor::full(&shape, dz.data()[0] / T::from_usize(n))
        })
    }

    // ---- backward -------------------------------------------------------------

    /// Run reverse-mode accumulation from a scalar loss. Consumes the tape.
    pub fn backward(mut self, loss: NodeId) -> Result<Gradients<T>> {
        if self.nodes[loss].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        if !self.grad_enabled {
            return Err(Error::contract(
                "backward on a no-grad tape; build the graph with Graph::new",
            ));
        }
        let mut sink = GradSink {
            grads: (0..self.nodes.len()).map(|_| None).collect(),
        };
        sink.grads[loss] = Some(Tensor::ones(&[1]));
        for i in (0..=loss).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = sink.grads[i].clone() else {
                continue;
            };
            if let Some(f) = self.nodes[i].backward.take() {
                f(&g, &mut sink);
            }
        }
        Ok(Gradients { grads: sink.grads })
    }
}

// ---- scalar helpers ----------------------------------------------------------

pub(crate) fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus_scalar<T: Scalar>(x: T) -> T {
    let pos = if x > T::zero() { x } else { T::zero() };
    pos + (T::one() + (-x.abs()).exp()).ln()
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

// ---- broadcast helpers ---------------------------------------------------------

fn pad5(shape: &[usize]) -> [usize; 5] {
    let mut s = [1usize; 5];
    s[5 - shape.len()..].copy_from_slice(shape);
    s
}

fn strides5(shape: &[usize; 5]) -> [usize; 5] {
    let mut st = [1usize; 5];
    for i in (0..4).rev() {
        st[i] = st[i + 1] * shape[i + 1];
    }
    st
}

/// Expand a tensor whose extents are each 1 or equal to `target`.
fn broadcast_to<T: Scalar>(b: &Tensor<T>, target: &[usize]) -> Result<Tensor<T>> {
    if b.rank() != target.len() {
        return Err(Error::shape(format!(
            "broadcast rank {:?} to {target:?}",
            b.shape()
        )));
    }
    for (&bs, &ts) in b.shape().iter().zip(target) {
        if bs != ts && bs != 1 {
            return Err(Error::shape(format!(
                "cannot broadcast {:?} to {target:?}",
                b.shape()
            )));
        }
    }
    if b.shape() == target {
        return Ok(b.clone());
    }
    let bs5 = pad5(b.shape());
    let ts5 = pad5(target);
    let bstr = strides5(&bs5);
    // Source stride is zeroed along broadcast axes.
    let sstr: [usize; 5] = std::array::from_fn(|i| if bs5[i] == 1 { 0 } else { bstr[i] });
    let bd = b.data();
    let mut out = Vec::with_capacity(target.iter().product());
    for a in 0..ts5[0] {
        for bb in 0..ts5[1] {
            for c in 0..ts5[2] {
                let base = a * sstr[0] + bb * sstr[1] + c * sstr[2];
                for d in 0..ts5[3] {
                    let base2 = base + d * sstr[3];
                    for e in 0..ts5[4] {
                        out.push(bd[base2 + e * sstr[4]]);
                    }
                }
            }
        }
    }
    Tensor::from_vec(out, target)
}

/// Reduce a gradient down to a broadcast operand's shape by summing the
/// broadcast axes.
fn sum_to_shape<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if g.shape() == shape {
        return Ok(g.clone());
    }
    let gs5 = pad5(g.shape());
    let ts5 = pad5(shape);
    let tstr = strides5(&ts5);
    let dstr: [usize; 5] = std::array::from_fn(|i| if ts5[i] == 1 { 0 } else { tstr[i] });
    let gd = g.data();
    let numel: usize = shape.iter().product();
    let mut out = vec![T::zero(); numel];
    let mut idx = 0usize;
    for a in 0..gs5[0] {
        for b in 0..gs5[1] {
            for c in 0..gs5[2] {
                let base = a * dstr[0] + b * dstr[1] + c * dstr[2];
                for d in 0..gs5[3] {
                    let base2 = base + d * dstr[3];
                    for e in 0..gs5[4] {
                        let t = base2 + e * dstr[4];
                        out[t] = out[t] + gd[idx];
                        idx += 1;
                    }
                }
            }
        }
    }
    Tensor::from_vec(out, shape)
}

fn scatter_slice<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>, axis: usize, start: usize) {
    let shape = dst.shape().to_vec();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let ax = shape[axis];
    let len = src.shape()[axis];
    let dd = dst.data_mut();
    let sd = src.data();
    for o in 0..outer {
        let dbase = (o * ax + start) * inner;
        let sbase = o * len * inner;
        dd[dbase..dbase + len * inner].copy_from_slice(&sd[sbase..sbase + len * inner]);
    }
}

// ---- gradient checking -----------------------------------------------------------

/// Default central-difference step per dtype.
pub fn default_eps<T: Scalar>() -> f64 {
    match T::DTYPE {
        crate::tensor::Dtype::F32 => 1e-3,
        crate::tensor::Dtype::F64 => 1e-6,
    }
}

fn eval_scalar<T: Scalar>(
    f: &dyn Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId>,
    xs: &[Tensor<T>],
) -> Result<f64> {
    let mut g = Graph::no_grad();
    let ids: Vec<NodeId> = xs.iter().map(|x| g.leaf(x)).collect();
    let out = f(&mut g, &ids)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::contract(format!(
            "grad_check function must be scalar-valued, got {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0].as_f64())
}

/// Central-difference check of reverse-mode gradients for a scalar-valued
/// function of several tensors. Returns the max over all coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`. The function must be
/// deterministic; results are undefined otherwise.
pub fn grad_check_multi<T: Scalar>(
    f: &dyn Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId>,
    xs: &[Tensor<T>],
    eps: Option<f64>,
) -> Result<f64> {
    let eps = eps.unwrap_or_else(default_eps::<T>);
    let mut g = Graph::new();
    let ids: Vec<NodeId> = xs
        .iter()
        .map(|x| g.leaf(&x.clone().requires_grad(true)))
        .collect();
    let out = f(&mut g, &ids)?;
    if g.value(out).numel() != 1 {
        return Err(Error::contract(format!(
            "grad_check function must be scalar-valued, got {:?}",
            g.value(out).shape()
        )));
    }
    let grads = g.backward(out)?;
    let mut worst = 0.0f64;
    for (xi, x) in xs.iter().enumerate() {
        let analytic = grads
            .get(ids[xi])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()));
        for i in 0..x.numel() {
            let mut xp = xs.to_vec();
            let mut bump = x.clone();
            bump.data_mut()[i] = bump.data()[i] + T::from_f64(eps);
            xp[xi] = bump;
            let fp = eval_scalar(f, &xp)?;
            let mut xm = xs.to_vec();
            let mut dip = x.clone();
            dip.data_mut()[i] = dip.data()[i] - T::from_f64(eps);
            xm[xi] = dip;
            let fm = eval_scalar(f, &xm)?;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[i].as_f64();
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

/// Single-input convenience wrapper around [`grad_check_multi`].
pub fn grad_check<T: Scalar>(
    f: &dyn Fn(&mut Graph<T>, NodeId) -> Result<NodeId>,
    x: &Tensor<T>,
    eps: Option<f64>,
) -> Result<f64> {
    grad_check_multi(&|g, ids| f(g, ids[0]), std::slice::from_ref(x), eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_gradient_is_ones() {
        let x = Tensor::from_vec(vec![1.0f64, -2.0, 3.0], &[3]).unwrap().requires_grad(true);
        let mut g = Graph::new();
        let xi = g.leaf(&x);
        let s = g.sum(xi);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(xi).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_is_two_x() {
        let x = Tensor::from_vec(vec![1.5f64, -0.5, 2.0], &[3]).unwrap().requires_grad(true);
        let mut g = Graph::new();
        let xi = g.leaf(&x);
        let sq = g.mul(xi, xi).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        let got = grads.get(xi).unwrap();
        assert_eq!(got.data(), &[3.0, -1.0, 4.0]);
    }

    #[test]
    fn fanout_accumulates_contributions() {
        // y = x + x  => dy/dx = 2
        let x = Tensor::scalar(4.0f64).requires_grad(true);
        let mut g = Graph::new();
        let xi = g.leaf(&x);
        let y = g.add(xi, xi).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(xi).unwrap().data(), &[2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::<f64>::ones(&[2]).requires_grad(true);
        let mut g = Graph::new();
        let xi = g.leaf(&x);
        assert!(matches!(g.backward(xi), Err(Error::Contract(_))));
    }

    #[test]
    fn conv_relu_sum_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x: Tensor<f64> = Tensor::randn(&mut rng, &[1, 2, 5, 5], 1.0);
        let w: Tensor<f64> = Tensor::randn(&mut rng, &[3, 2, 3, 3], 0.5);
        let b: Tensor<f64> = Tensor::randn(&mut rng, &[3], 0.5);
        let spec = ConvSpec::new(3, 1, 1);
        let err = grad_check_multi(
            &|g, ids| {
                let y = g.conv2d(ids[0], ids[1], Some(ids[2]), spec)?;
                let r = g.relu(y);
                Ok(g.sum(r))
            },
            &[x, w, b],
            None,
        )
        .unwrap();
        assert!(err <= 1e-5, "max rel err {err}");
    }

    #[test]
    fn softmax_cross_entropy_gradcheck() {
        let x = Tensor::from_vec(vec![0.3f64, -1.2, 0.8, 0.1], &[1, 4]).unwrap();
        let err = grad_check(
            &|g, xi| {
                let p = g.softmax_lastaxis(xi);
                let lp = g.ln(p);
                // fixed one-hot target at class 2
                let t = g.constant(
                    Tensor::from_vec(vec![0.0, 0.0, -1.0, 0.0], &[1, 4]).unwrap(),
                );
                let prod = g.mul(lp, t)?;
                Ok(g.sum(prod))
            },
            &x,
            None,
        )
        .unwrap();
        assert!(err <= 1e-5, "max rel err {err}");
    }

    #[test]
    fn broadcast_add_and_sum_to_shape() {
        let x = Tensor::from_vec((0..12).map(|v| v as f64).collect(), &[2, 3, 2])
            .unwrap()
            .requires_grad(true);
        let b = Tensor::from_vec(vec![10.0f64, 20.0], &[1, 1, 2])
            .unwrap()
            .requires_grad(true);
        let mut g = Graph::new();
        let xi = g.leaf(&x);
        let bi = g.leaf(&b);
        let y = g.add_broadcast(xi, bi).unwrap();
        assert_eq!(g.value(y).at(&[1, 2, 1]), 11.0 + 20.0);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(bi).unwrap().data(), &[6.0, 6.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = Tensor::scalar(3.0f64).requires_grad(true);
        let mut g = Graph::new();
        let xi = g.leaf(&x);
        let d = g.detach(xi);
        let y = g.mul(d, d).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(xi).is_none());
    }

    #[test]
    fn fft_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Tensor<f64> = Tensor::randn(&mut rng, &[1, 1, 4, 4], 1.0);
        let err = grad_check(
            &|g, xi| {
                let spec = g.fft2_stacked(xi)?;
                let sq = g.mul(spec, spec)?;
                Ok(g.sum(sq))
            },
            &x,
            None,
        )
        .unwrap();
        assert!(err <= 1e-5, "fft2_stacked err {err}");

        let y: Tensor<f64> = Tensor::randn(&mut rng, &[1, 2, 4, 4], 1.0);
        let err = grad_check(
            &|g, xi| {
                let real = g.ifft2_stacked_real(xi)?;
                let sq = g.mul(real, real)?;
                Ok(g.sum(sq))
            },
            &y,
            None,
        )
        .unwrap();
        assert!(err <= 1e-5, "ifft2_stacked_real err {err}");
    }

    #[test]
    fn gradcheck_of_sum_is_exact() {
        // Dyadic values and a power-of-two step keep every finite-difference
        // evaluation exact, so the error comes out identically zero.
        let x = Tensor::from_vec(vec![0.25f64, -1.0, 2.0], &[3]).unwrap();
        let eps = 2.0f64.powi(-20);
        let err = grad_check(&|g, xi| Ok(g.sum(xi)), &x, Some(eps)).unwrap();
        assert_eq!(err, 0.0);
    }
}
