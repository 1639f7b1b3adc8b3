//! A small reverse-mode tape over [`Tensor`] values.
//!
//! Models push parameters and inputs as leaves, build the forward pass with
//! the op methods, and call [`Graph::backward`] with a seed gradient for the
//! output. Loss heads are computed outside the tape; the caller hands in
//! `dL/d(output)` directly.

use super::tensor::{conv2d, conv2d_backward, gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddChannel {
        x: Var,
        bias: Var,
    },
    Silu {
        x: Var,
    },
    AvgPool2 {
        x: Var,
    },
    Upsample2 {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    GlobalAvgPool {
        x: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b } | Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::Add { a, b } | Op::Concat { a, b } => vec![*a, *b],
            Op::AddChannel { x, bias } => vec![*x, *bias],
            Op::Silu { x } | Op::AvgPool2 { x } | Op::Upsample2 { x } | Op::GlobalAvgPool { x } => {
                vec![*x]
            }
            Op::GroupNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

const GN_EPS: f32 = 1e-5;

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    /// A tape that records what backward needs.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// Forward-only evaluation; [`Graph::backward`] panics on such a graph.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = self.record && op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input (parameter or image whose gradient is wanted).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: self.record,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = conv2d(self.value(x), self.value(w), self.value(b));
        self.push(y, Op::Conv2d { x, w, b })
    }

    /// `x [n, in] · wᵀ + b`, with `w [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, i) = (xv.shape()[0], xv.shape()[1]);
        let o = wv.shape()[0];
        assert_eq!(wv.shape()[1], i, "linear input features");
        let mut y = Tensor::zeros(&[n, o]);
        for row in y.data_mut().chunks_mut(o) {
            row.copy_from_slice(self.value(b).data());
        }
        gemm(n, i, o, xv.data(), false, wv.data(), true, y.data_mut(), 1.0);
        self.push(y, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q);
        self.push(y, Op::Add { a, b })
    }

    /// Broadcast `bias [n, c]` over the spatial axes of `x [n, c, h, w]`.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Var {
        let mut y = self.value(x).clone();
        let (_, _, h, w) = y.dims4();
        let bv = self.value(bias).data().to_vec();
        assert_eq!(bv.len(), y.shape()[0] * y.shape()[1], "channel bias shape");
        for (plane, &b) in y.data_mut().chunks_mut(h * w).zip(&bv) {
            for v in plane {
                *v += b;
            }
        }
        self.push(y, Op::AddChannel { x, bias })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v * sigmoid(v));
        self.push(y, Op::Silu { x })
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let (oh, ow) = (h / 2, w / 2);
        let mut y = Tensor::zeros(&[n, c, oh, ow]);
        let src = xv.data();
        for (p, plane) in y.data_mut().chunks_mut(oh * ow).enumerate() {
            let base = p * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let r0 = base + 2 * i * w + 2 * j;
                    let r1 = r0 + w;
                    plane[i * ow + j] = 0.25 * (src[r0] + src[r0 + 1] + src[r1] + src[r1 + 1]);
                }
            }
        }
        self.push(y, Op::AvgPool2 { x })
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let (oh, ow) = (2 * h, 2 * w);
        let mut y = Tensor::zeros(&[n, c, oh, ow]);
        let src = xv.data();
        for (p, plane) in y.data_mut().chunks_mut(oh * ow).enumerate() {
            let base = p * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    plane[i * ow + j] = src[base + (i / 2) * w + j / 2];
                }
            }
        }
        self.push(y, Op::Upsample2 { x })
    }

    /// Channel concatenation of two NCHW tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, ca, h, w) = av.dims4();
        let (nb, cb, hb, wb) = bv.dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat spatial dims");
        let hw = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            data.extend_from_slice(&av.data()[i * ca * hw..(i + 1) * ca * hw]);
            data.extend_from_slice(&bv.data()[i * cb * hw..(i + 1) * cb * hw]);
        }
        let y = Tensor::from_vec(&[n, ca + cb, h, w], data).expect("concat size");
        self.push(y, Op::Concat { a, b })
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        assert_eq!(c % groups, 0, "channels divisible by groups");
        let per_group = (c / groups) * h * w;
        let mut xhat = vec![0.0f32; xv.len()];
        let mut inv_std = vec![0.0f32; n * groups];
        for (gi, (src, dst)) in xv.data().chunks(per_group).zip(xhat.chunks_mut(per_group)).enumerate() {
            let mean = src.iter().map(|&v| v as f64).sum::<f64>() / per_group as f64;
            let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / per_group as f64;
            let is = 1.0 / (var as f32 + GN_EPS).sqrt();
            inv_std[gi] = is;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean as f32) * is;
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let hw = h * w;
        let mut y = Tensor::zeros(&[n, c, h, w]);
        for (p, (plane, src)) in y.data_mut().chunks_mut(hw).zip(xhat.chunks(hw)).enumerate() {
            let ch = p % c;
            for (o, &s) in plane.iter_mut().zip(src) {
                *o = g[ch] * s + b[ch];
            }
        }
        let needs = self.record && [x, gamma, beta].iter().any(|v| self.nodes[v.0].needs_grad);
        let (xhat, inv_std) = if needs {
            (xhat, inv_std)
        } else {
            (Vec::new(), Vec::new())
        };
        self.push(
            y,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
        )
    }

    /// Mean over the spatial axes: `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let inv = 1.0 / (h * w) as f32;
        let data = xv.data().chunks(h * w).map(|p| p.iter().sum::<f32>() * inv).collect();
        let y = Tensor::from_vec(&[n, c], data).expect("pool size");
        self.push(y, Op::GlobalAvgPool { x })
    }

    /// Reverse pass from `output`, seeded with `seed = dL/d(output)`.
    pub fn backward(&self, output: Var, seed: Tensor) -> Gradients {
        assert!(self.record, "backward on an inference graph");
        assert_eq!(seed.shape(), self.value(output).shape(), "seed shape");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);

        let acc = |grads: &mut [Option<Tensor>], v: Var, g: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match grads[v.0].as_mut() {
                Some(existing) => existing.add_assign(&g),
                None => grads[v.0] = Some(g),
            }
        };

        for idx in (0..=output.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gy);
                    continue;
                }
                Op::Conv2d { x, w, b } => {
                    let need_x = self.nodes[x.0].needs_grad;
                    let (gx, gw, gb) = conv2d_backward(self.value(*x), self.value(*w), &gy, need_x);
                    if let Some(gx) = gx {
                        acc(&mut grads, *x, gx);
                    }
                    acc(&mut grads, *w, gw);
                    acc(&mut grads, *b, gb);
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (n, i) = (xv.shape()[0], xv.shape()[1]);
                    let o = wv.shape()[0];
                    let mut gx = Tensor::zeros(xv.shape());
                    gemm(n, o, i, gy.data(), false, wv.data(), false, gx.data_mut(), 0.0);
                    let mut gw = Tensor::zeros(wv.shape());
                    gemm(o, n, i, gy.data(), true, xv.data(), false, gw.data_mut(), 0.0);
                    let mut gb = Tensor::zeros(&[o]);
                    for row in gy.data().chunks(o) {
                        for (a, &v) in gb.data_mut().iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *w, gw);
                    acc(&mut grads, *b, gb);
                }
                Op::Add { a, b } => {
                    acc(&mut grads, *a, gy.clone());
                    acc(&mut grads, *b, gy);
                }
                Op::AddChannel { x, bias } => {
                    let (n, c, h, w) = gy.dims4();
                    let data = gy.data().chunks(h * w).map(|p| p.iter().sum()).collect();
                    acc(&mut grads, *bias, Tensor::from_vec(&[n, c], data).expect("bias grad"));
                    acc(&mut grads, *x, gy);
                }
                Op::Silu { x } => {
                    let g = self.value(*x).zip_map(&gy, |v, g| {
                        let s = sigmoid(v);
                        g * s * (1.0 + v * (1.0 - s))
                    });
                    acc(&mut grads, *x, g);
                }
                Op::AvgPool2 { x } => {
                    let (n, c, h, w) = self.value(*x).dims4();
                    let (oh, ow) = (h / 2, w / 2);
                    let mut gx = Tensor::zeros(&[n, c, h, w]);
                    for (p, plane) in gx.data_mut().chunks_mut(h * w).enumerate() {
                        let src = &gy.data()[p * oh * ow..(p + 1) * oh * ow];
                        for i in 0..h {
                            for j in 0..w {
                                plane[i * w + j] = 0.25 * src[(i / 2) * ow + j / 2];
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Upsample2 { x } => {
                    let (n, c, h, w) = self.value(*x).dims4();
                    let ow = 2 * w;
                    let mut gx = Tensor::zeros(&[n, c, h, w]);
                    for (p, plane) in gx.data_mut().chunks_mut(h * w).enumerate() {
                        let src = &gy.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                        for i in 0..h {
                            for j in 0..w {
                                let r0 = 2 * i * ow + 2 * j;
                                plane[i * w + j] = src[r0] + src[r0 + 1] + src[r0 + ow] + src[r0 + ow + 1];
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Concat { a, b } => {
                    let (n, ca, h, w) = self.value(*a).dims4();
                    let cb = self.value(*b).shape()[1];
                    let hw = h * w;
                    let mut ga = Vec::with_capacity(n * ca * hw);
                    let mut gb = Vec::with_capacity(n * cb * hw);
                    for img in gy.data().chunks((ca + cb) * hw) {
                        ga.extend_from_slice(&img[..ca * hw]);
                        gb.extend_from_slice(&img[ca * hw..]);
                    }
                    acc(
                        &mut grads,
                        *a,
                        Tensor::from_vec(&[n, ca, h, w], ga).expect("concat grad"),
                    );
                    acc(
                        &mut grads,
                        *b,
                        Tensor::from_vec(&[n, cb, h, w], gb).expect("concat grad"),
                    );
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    xhat,
                    inv_std,
                } => {
                    let (n, c, h, w) = gy.dims4();
                    let hw = h * w;
                    let cpg = c / groups;
                    let per_group = cpg * hw;
                    let g = self.value(*gamma).data();
                    let mut ggamma = Tensor::zeros(&[c]);
                    let mut gbeta = Tensor::zeros(&[c]);
                    let mut gx = Tensor::zeros(&[n, c, h, w]);
                    for gi in 0..n * groups {
                        let range = gi * per_group..(gi + 1) * per_group;
                        let gys = &gy.data()[range.clone()];
                        let xh = &xhat[range.clone()];
                        let mut sum_gxh = 0.0f64;
                        let mut sum_gxh_xh = 0.0f64;
                        for (k, (&gv, &xv)) in gys.iter().zip(xh).enumerate() {
                            let ch = (gi % groups) * cpg + k / hw;
                            ggamma.data_mut()[ch] += gv * xv;
                            gbeta.data_mut()[ch] += gv;
                            let gxh = (gv * g[ch]) as f64;
                            sum_gxh += gxh;
                            sum_gxh_xh += gxh * xv as f64;
                        }
                        let m = per_group as f64;
                        let is = inv_std[gi] as f64;
                        let dst = &mut gx.data_mut()[range];
                        for (k, d) in dst.iter_mut().enumerate() {
                            let ch = (gi % groups) * cpg + k / hw;
                            let gxh = (gys[k] * g[ch]) as f64;
                            *d = (is / m * (m * gxh - sum_gxh - xh[k] as f64 * sum_gxh_xh)) as f32;
                        }
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gamma, ggamma);
                    acc(&mut grads, *beta, gbeta);
                }
                Op::GlobalAvgPool { x } => {
                    let (n, c, h, w) = self.value(*x).dims4();
                    let inv = 1.0 / (h * w) as f32;
                    let mut gx = Tensor::zeros(&[n, c, h, w]);
                    for (plane, &g) in gx.data_mut().chunks_mut(h * w).zip(gy.data()) {
                        plane.fill(g * inv);
                    }
                    acc(&mut grads, *x, gx);
                }
            }
        }
        Gradients { grads }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}
