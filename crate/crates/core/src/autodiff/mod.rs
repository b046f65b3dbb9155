//! Reverse-mode automatic differentiation over `NCHW` feature maps.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! takes output gradients (seeds) and returns gradients for every node.
//! Heavy ops parallelize across the batch and reduce partial results in
//! sample order, so results do not depend on the thread count.

mod attention;
mod conv;

use rayon::prelude::*;

/// `[N, C, H, W]`; parameters use the same four slots (e.g. conv weights
/// are `[Cout, Cin, K, K]`).
pub type Shape = [usize; 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub enum BnMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with stored running statistics.
    Eval { mean: Vec<f64>, var: Vec<f64> },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        /// Normalized input, kept for the backward pass.
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        /// Batch mean and unbiased variance (train mode only).
        stats: Option<(Vec<f64>, Vec<f64>)>,
    },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Upsample2x(Var),
    Concat(Var, Var),
    Attention {
        x: Var,
        w: [Var; 4],
        heads: usize,
        probs: Vec<f64>,
    },
    Conv3d {
        x: Var,
        k: Var,
    },
}

#[derive(Debug)]
struct Node {
    shape: Shape,
    value: Vec<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of every node after a backward pass; `None` where no gradient
/// reached the node.
#[derive(Debug)]
pub struct Gradients(Vec<Option<Vec<f64>>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.0[v.0].as_deref()
    }
}

fn numel(s: Shape) -> usize {
    s.iter().product()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Shape, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(numel(shape), value.len());
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, shape: Shape, value: Vec<f64>) -> Var {
        assert_eq!(numel(shape), value.len(), "leaf shape {shape:?} does not match {} values", value.len());
        self.push(shape, value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    /// Square-kernel convolution; `w` is `[Cout, Cin, K, K]`, `bias` `[Cout, 1, 1, 1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let [n, cin, h, wd] = self.shape(x);
        let [cout, wcin, k, k2] = self.shape(w);
        assert_eq!(cin, wcin, "conv2d: input has {cin} channels, kernel expects {wcin}");
        assert_eq!(k, k2, "conv2d: kernels must be square");
        if let Some(b) = bias {
            assert_eq!(numel(self.shape(b)), cout, "conv2d: bias length");
        }
        let g = conv::ConvGeom {
            cin,
            h,
            w: wd,
            cout,
            k,
            stride,
            pad,
        };
        let (oh, ow) = g.out_hw();
        let out = conv::conv2d_forward(&g, n, self.value(x), self.value(w), bias.map(|b| self.value(b)));
        self.push(
            [n, cout, oh, ow],
            out,
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
            },
        )
    }

    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: &BnMode) -> Var {
        let [n, c, h, w] = self.shape(x);
        let plane = h * w;
        let m = (n * plane) as f64;
        let xv = self.value(x);
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let vals = (0..n).flat_map(|s| &xv[(s * c + ch) * plane..(s * c + ch + 1) * plane]);
                    let mu = vals.clone().sum::<f64>() / m;
                    mean[ch] = mu;
                    var[ch] = vals.map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
                }
                let unbiased = var.iter().map(|v| if m > 1.0 { v * m / (m - 1.0) } else { *v }).collect();
                (mean.clone(), var, Some((mean, unbiased)))
            }
            BnMode::Eval { mean, var } => {
                assert_eq!(mean.len(), c, "batch_norm: running mean length");
                assert_eq!(var.len(), c, "batch_norm: running var length");
                (mean.clone(), var.clone(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let r = (s * c + ch) * plane..(s * c + ch + 1) * plane;
                for i in r {
                    xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                    out[i] = gv[ch] * xhat[i] + bv[ch];
                }
            }
        }
        self.push(
            [n, c, h, w],
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                stats,
            },
        )
    }

    /// Batch mean and unbiased variance of a train-mode batch-norm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { stats: Some((m, s)), .. } => Some((m, s)),
            _ => None,
        }
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64 + Sync, op: Op) -> Var {
        let out: Vec<f64> = self.value(x).par_iter().map(|&v| f(v)).collect();
        self.push(self.shape(x), out, op)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(self.shape(a), out, Op::Add(a, b))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let xv = self.value(x);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            for i in 0..oh {
                for j in 0..ow {
                    out[(nc * oh + i) * ow + j] = xv[(nc * h + i / 2) * w + j / 2];
                }
            }
        }
        self.push([n, c, oh, ow], out, Op::Upsample2x(x))
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let [n, ca, h, w] = self.shape(a);
        let [nb, cb, hb, wb] = self.shape(b);
        assert_eq!((n, h, w), (nb, hb, wb), "concat: batch or spatial mismatch");
        let plane = h * w;
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for s in 0..n {
            out.extend_from_slice(&av[s * ca * plane..(s + 1) * ca * plane]);
            out.extend_from_slice(&bv[s * cb * plane..(s + 1) * cb * plane]);
        }
        self.push([n, ca + cb, h, w], out, Op::Concat(a, b))
    }

    /// Multi-head self-attention over spatial positions; `w` are `[C, C, 1, 1]`
    /// matrices for query, key, value and output projections.
    pub fn attention(&mut self, x: Var, w: [Var; 4], heads: usize) -> Var {
        let [n, c, h, wd] = self.shape(x);
        assert!(heads > 0 && c % heads == 0, "attention: {c} channels not divisible by {heads} heads");
        for wv in w {
            assert_eq!(numel(self.shape(wv)), c * c, "attention: projection must be C×C");
        }
        let g = attention::AttnGeom { c, t: h * wd, heads };
        let ws = w.map(|v| self.value(v));
        let (out, probs) = attention::forward(&g, n, self.value(x), ws);
        self.push([n, c, h, wd], out, Op::Attention { x, w, heads, probs })
    }

    /// Attention probabilities (`N × heads × T × T`) of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Single-channel 3×3×3 convolution treating `C` as depth; `k` has 27 entries.
    pub fn conv3d(&mut self, x: Var, k: Var) -> Var {
        let [n, d, h, w] = self.shape(x);
        assert_eq!(numel(self.shape(k)), 27, "conv3d: kernel must have 27 taps");
        let out = conv::conv3d_forward(n, d, h, w, self.value(x), self.value(k));
        self.push([n, d, h, w], out, Op::Conv3d { x, k })
    }

    /// Back-propagate the given output gradients through the whole tape.
    pub fn backward(&self, seeds: &[(Var, &[f64])]) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(g.len(), self.nodes[v.0].value.len(), "seed length mismatch");
            accumulate(&mut grads, *v, g.to_vec());
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Gradients(grads)
    }

    fn backward_node(&self, i: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
            } => {
                let [n, cin, h, wd] = self.shape(*x);
                let [cout, _, k, _] = self.shape(*w);
                let g = conv::ConvGeom {
                    cin,
                    h,
                    w: wd,
                    cout,
                    k,
                    stride: *stride,
                    pad: *pad,
                };
                let r = conv::conv2d_backward(&g, n, self.value(*x), self.value(*w), dy);
                accumulate(grads, *x, r.dx);
                accumulate(grads, *w, r.dw);
                if let Some(b) = bias {
                    accumulate(grads, *b, r.db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                stats,
            } => {
                let [n, c, h, w] = node.shape;
                let plane = h * w;
                let m = (n * plane) as f64;
                let gv = self.value(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        for idx in (s * c + ch) * plane..(s * c + ch + 1) * plane {
                            dgamma[ch] += dy[idx] * xhat[idx];
                            dbeta[ch] += dy[idx];
                        }
                    }
                }
                let mut dx = vec![0.0; dy.len()];
                for s in 0..n {
                    for ch in 0..c {
                        for idx in (s * c + ch) * plane..(s * c + ch + 1) * plane {
                            dx[idx] = if stats.is_some() {
                                gv[ch] * inv_std[ch] / m * (m * dy[idx] - dbeta[ch] - xhat[idx] * dgamma[ch])
                            } else {
                                gv[ch] * inv_std[ch] * dy[idx]
                            };
                        }
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, dgamma);
                accumulate(grads, *beta, dbeta);
            }
            Op::Gelu(x) => {
                let dx = self.value(*x).par_iter().zip(dy).map(|(&v, g)| g * gelu_grad(v)).collect();
                accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let dx = self.value(*x).iter().zip(dy).map(|(&v, g)| if v > 0.0 { *g } else { 0.0 }).collect();
                accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = node.value.iter().zip(dy).map(|(y, g)| g * y * (1.0 - y)).collect();
                accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, dy.to_vec());
                accumulate(grads, *b, dy.to_vec());
            }
            Op::Upsample2x(x) => {
                let [n, c, h, w] = self.shape(*x);
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = vec![0.0; n * c * h * w];
                for nc in 0..n * c {
                    for i in 0..oh {
                        for j in 0..ow {
                            dx[(nc * h + i / 2) * w + j / 2] += dy[(nc * oh + i) * ow + j];
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Concat(a, b) => {
                let [n, ca, h, w] = self.shape(*a);
                let cb = self.shape(*b)[1];
                let plane = h * w;
                let mut da = Vec::with_capacity(n * ca * plane);
                let mut db = Vec::with_capacity(n * cb * plane);
                for s in 0..n {
                    let base = s * (ca + cb) * plane;
                    da.extend_from_slice(&dy[base..base + ca * plane]);
                    db.extend_from_slice(&dy[base + ca * plane..base + (ca + cb) * plane]);
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Attention { x, w, heads, probs } => {
                let [n, c, h, wd] = self.shape(*x);
                let g = attention::AttnGeom {
                    c,
                    t: h * wd,
                    heads: *heads,
                };
                let ws = w.map(|v| self.value(v));
                let r = attention::backward(&g, n, self.value(*x), ws, probs, dy);
                accumulate(grads, *x, r.dx);
                for (wv, dw) in w.iter().zip(r.dw) {
                    accumulate(grads, *wv, dw);
                }
            }
            Op::Conv3d { x, k } => {
                let [n, d, h, w] = self.shape(*x);
                let (dx, dk) = conv::conv3d_backward(n, d, h, w, self.value(*x), self.value(*k), dy);
                accumulate(grads, *x, dx);
                accumulate(grads, *k, dk);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}
