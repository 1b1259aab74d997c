//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of that scalar with respect to every node that requires one.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{self, Tensor};

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A graph that never records backward closures; used for inference.
    pub fn inference() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_node(Rc::new(value), Vec::new(), self.grad_enabled, None)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(Rc::new(value), Vec::new(), false, None)
    }

    fn push_node(
        &self,
        value: Rc<Tensor>,
        parents: Vec<usize>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            requires_grad,
            backward,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Record an operation. `backward` receives the output gradient and a
    /// per-parent flag telling which parent gradients are wanted.
    pub fn op<'g>(
        &'g self,
        value: Tensor,
        parents: &[Var<'g>],
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'g> {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires = self.grad_enabled && {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        let backward: Option<BackwardFn> = if requires {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push_node(Rc::new(value), ids, requires, backward)
    }

    /// Gradients of the scalar `root` with respect to every recorded node.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape(), 1.0));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &needs);
            grads[id] = Some(g);
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

fn want(needs: &[bool], i: usize, f: impl FnOnce() -> Tensor) -> Option<Tensor> {
    if needs[i] {
        Some(f())
    } else {
        None
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.graph.op(v, &[self, other], |g, n| {
            vec![want(n, 0, || g.clone()), want(n, 1, || g.clone())]
        })
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.graph.op(v, &[self, other], |g, n| {
            vec![want(n, 0, || g.clone()), want(n, 1, || g.map(|x| -x))]
        })
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let v = a.zip_map(&b, |x, y| x * y);
        self.graph.op(v, &[self, other], move |g, n| {
            vec![want(n, 0, || g.zip_map(&b, |g, y| g * y)), want(n, 1, || g.zip_map(&a, |g, x| g * x))]
        })
    }

    /// Elementwise product with a fixed tensor (e.g. a convolution mask).
    pub fn mul_fixed(self, fixed: Rc<Tensor>) -> Var<'g> {
        let v = self.value().zip_map(&fixed, |x, m| x * m);
        self.graph.op(v, &[self], move |g, n| vec![want(n, 0, || g.zip_map(&fixed, |g, m| g * m))])
    }

    /// Adds a fixed tensor, e.g. quantization noise.
    pub fn add_fixed(self, fixed: &Tensor) -> Var<'g> {
        let v = self.value().zip_map(fixed, |x, u| x + u);
        self.graph.op(v, &[self], |g, n| vec![want(n, 0, || g.clone())])
    }

    pub fn scale(self, factor: f64) -> Var<'g> {
        let v = self.value().map(|x| x * factor);
        self.graph.op(v, &[self], move |g, n| vec![want(n, 0, || g.map(|x| x * factor))])
    }

    pub fn add_scalar(self, offset: f64) -> Var<'g> {
        let v = self.value().map(|x| x + offset);
        self.graph.op(v, &[self], |g, n| vec![want(n, 0, || g.clone())])
    }

    pub fn square(self) -> Var<'g> {
        let a = self.value();
        let v = a.map(|x| x * x);
        self.graph.op(v, &[self], move |g, n| vec![want(n, 0, || g.zip_map(&a, |g, x| 2.0 * g * x))])
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g> {
        let a = self.value();
        let v = a.map(|x| if x > 0.0 { x } else { slope * x });
        self.graph.op(v, &[self], move |g, n| {
            vec![want(n, 0, || g.zip_map(&a, |g, x| if x > 0.0 { g } else { slope * g }))]
        })
    }

    pub fn sigmoid(self) -> Var<'g> {
        let v = self.value().map(sigmoid);
        let out = Rc::new(v.clone());
        self.graph.op(v, &[self], move |g, n| {
            vec![want(n, 0, || g.zip_map(&out, |g, s| g * s * (1.0 - s)))]
        })
    }

    /// `max(x, floor)`; the gradient is zero wherever the floor is active.
    pub fn clamp_min(self, floor: f64) -> Var<'g> {
        let a = self.value();
        let v = a.map(|x| x.max(floor));
        self.graph.op(v, &[self], move |g, n| {
            vec![want(n, 0, || g.zip_map(&a, |g, x| if x >= floor { g } else { 0.0 }))]
        })
    }

    pub fn sum(self) -> Var<'g> {
        let a = self.value();
        let shape = a.shape().to_vec();
        self.graph.op(Tensor::scalar(a.sum()), &[self], move |g, n| {
            vec![want(n, 0, || Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(self) -> Var<'g> {
        let len = self.value().len() as f64;
        self.sum().scale(1.0 / len)
    }

    /// Mean squared error between two equally shaped tensors.
    pub fn mse(self, target: Var<'g>) -> Var<'g> {
        self.sub(target).square().mean()
    }

    /// `Σ −log2(x)` over a tensor of probabilities.
    pub fn neg_log2_sum(self) -> Var<'g> {
        let a = self.value();
        let total: f64 = a.data().iter().map(|&p| -p.log2()).sum();
        self.graph.op(Tensor::scalar(total), &[self], move |g, n| {
            let gs = g.item();
            vec![want(n, 0, || a.map(|p| -gs / (p * std::f64::consts::LN_2)))]
        })
    }

    pub fn conv2d(self, weight: Var<'g>, bias: Option<Var<'g>>, stride: usize) -> Var<'g> {
        let x = self.value();
        let w = weight.value();
        let b = bias.map(|b| b.value());
        let (out, col) = tensor::conv2d_forward(&x, &w, b.as_deref(), stride);
        let x_shape = x.chw();
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let col = if self.graph.grad_enabled { col } else { Vec::new() };
        self.graph.op(out, &parents, move |g, n| {
            let (dx, dw, db) = tensor::conv2d_backward(g, &col, x_shape, &w, stride);
            let mut grads = vec![n[0].then_some(dx), n[1].then_some(dw)];
            if n.len() > 2 {
                grads.push(n[2].then_some(db));
            }
            grads
        })
    }

    pub fn conv_transpose2d(
        self,
        weight: Var<'g>,
        bias: Option<Var<'g>>,
        stride: usize,
        out_hw: (usize, usize),
    ) -> Var<'g> {
        let x = self.value();
        let w = weight.value();
        let b = bias.map(|b| b.value());
        let out = tensor::conv_transpose2d_forward(&x, &w, b.as_deref(), stride, out_hw);
        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.graph.op(out, &parents, move |g, n| {
            let (dx, dw, db) = tensor::conv_transpose2d_backward(g, &x, &w, stride);
            let mut grads = vec![n[0].then_some(dx), n[1].then_some(dw)];
            if n.len() > 2 {
                grads.push(n[2].then_some(db));
            }
            grads
        })
    }

    pub fn pixel_shuffle(self) -> Var<'g> {
        let v = tensor::pixel_shuffle(&self.value());
        self.graph.op(v, &[self], |g, n| vec![want(n, 0, || tensor::pixel_unshuffle(g))])
    }

    pub fn concat(parts: &[Var<'g>]) -> Var<'g> {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let v = Tensor::concat_channels(&refs);
        let splits: Vec<usize> = values.iter().map(|v| v.chw().0).collect();
        parts[0].graph.op(v, parts, move |g, n| {
            let mut start = 0;
            splits
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    let r = want(n, i, || g.channel_range(start, start + c));
                    start += c;
                    r
                })
                .collect()
        })
    }

    pub fn channel_range(self, start: usize, end: usize) -> Var<'g> {
        let a = self.value();
        let (c, h, w) = a.chw();
        let v = a.channel_range(start, end);
        self.graph.op(v, &[self], move |g, n| {
            vec![want(n, 0, || {
                let mut full = Tensor::zeros(&[c, h, w]);
                full.data_mut()[start * h * w..end * h * w].copy_from_slice(g.data());
                full
            })]
        })
    }

    pub fn crop(self, height: usize, width: usize) -> Var<'g> {
        let a = self.value();
        let (_, h, w) = a.chw();
        if (h, w) == (height, width) {
            return self;
        }
        let v = a.crop(height, width);
        self.graph.op(v, &[self], move |g, n| vec![want(n, 0, || g.zero_extend(h, w))])
    }

    /// Every second row and column starting at the origin.
    pub fn subsample2(self) -> Var<'g> {
        let a = self.value();
        let (c, h, w) = a.chw();
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let mut v = Tensor::zeros(&[c, ho, wo]);
        for ch in 0..c {
            for y in 0..ho {
                for x in 0..wo {
                    v.data_mut()[(ch * ho + y) * wo + x] = a.at(ch, 2 * y, 2 * x);
                }
            }
        }
        self.graph.op(v, &[self], move |g, n| {
            vec![want(n, 0, || {
                let mut full = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    for y in 0..ho {
                        for x in 0..wo {
                            full.data_mut()[(ch * h + 2 * y) * w + 2 * x] = g.at(ch, y, x);
                        }
                    }
                }
                full
            })]
        })
    }

    /// Generalized divisive normalization (or its inverse) with effective
    /// parameters `beta: [C]` and `gamma: [C, C]`.
    pub fn gdn(self, beta: Var<'g>, gamma: Var<'g>, inverse: bool) -> Var<'g> {
        let x = self.value();
        let b = beta.value();
        let gm = gamma.value();
        let (c, h, w) = x.chw();
        let p = h * w;
        let norm = gdn_norm(&x, &b, &gm);
        let mut out = Tensor::zeros(&[c, h, w]);
        for i in 0..c * p {
            let s = norm[i].sqrt();
            out.data_mut()[i] = if inverse { x.data()[i] * s } else { x.data()[i] / s };
        }
        self.graph.op(out, &[self, beta, gamma], move |g, n| {
            // t_c = g_c x_c d(n_c^{±1/2})/dn_c; n_c depends on x_j² via gamma_cj.
            let xd = x.data();
            let gd = g.data();
            let mut t = vec![0.0; c * p];
            let mut direct = vec![0.0; c * p];
            for i in 0..c * p {
                let nn = norm[i];
                if inverse {
                    direct[i] = gd[i] * nn.sqrt();
                    t[i] = gd[i] * xd[i] * 0.5 / nn.sqrt();
                } else {
                    direct[i] = gd[i] / nn.sqrt();
                    t[i] = -gd[i] * xd[i] * 0.5 / (nn * nn.sqrt());
                }
            }
            let dx = n[0].then(|| {
                // dx_k = direct_k + 2 x_k Σ_c t_c gamma_ck
                let mut acc = vec![0.0; c * p];
                tensor::gemm(c, c, p, gm.data(), (1, c as isize), &t, (p as isize, 1), &mut acc, 0.0);
                let mut dx = Tensor::zeros(&[c, h, w]);
                for i in 0..c * p {
                    dx.data_mut()[i] = direct[i] + 2.0 * xd[i] * acc[i];
                }
                dx
            });
            let db = n[1].then(|| {
                Tensor::new(&[c], t.chunks(p.max(1)).take(c).map(|r| r.iter().sum()).collect())
            });
            let dg = n[2].then(|| {
                // dgamma_cj = Σ_pos t_c x_j²
                let sq: Vec<f64> = xd.iter().map(|v| v * v).collect();
                let mut dgm = vec![0.0; c * c];
                tensor::gemm(c, p, c, &t, (p as isize, 1), &sq, (1, p as isize), &mut dgm, 0.0);
                Tensor::new(&[c, c], dgm)
            });
            vec![dx, db, dg]
        })
    }

    /// Probability mass of a unit-width bin centred on `self` under a
    /// Gaussian with the given mean and scale, floored at `p_min`.
    pub fn gaussian_likelihood(self, mean: Var<'g>, scale: Var<'g>, p_min: f64) -> Var<'g> {
        let yv = self.value();
        let mv = mean.value();
        let sv = scale.value();
        let len = yv.len();
        let mut lik = vec![0.0; len];
        for i in 0..len {
            lik[i] = gaussian_bin(yv.data()[i] - mv.data()[i], sv.data()[i]).max(p_min);
        }
        let shape = yv.shape().to_vec();
        let lik_t = Tensor::new(&shape, lik);
        let lik_c = Rc::new(lik_t.clone());
        self.graph.op(lik_t, &[self, mean, scale], move |g, n| {
            let mut dy = vec![0.0; len];
            let mut ds = vec![0.0; len];
            for i in 0..len {
                let diff = yv.data()[i] - mv.data()[i];
                let s = sv.data()[i];
                if lik_c.data()[i] <= p_min {
                    continue;
                }
                let v = diff.abs();
                let u1 = (0.5 - v) / s;
                let u2 = (-0.5 - v) / s;
                let (f1, f2) = (normal_pdf(u1), normal_pdf(u2));
                let dv = (-f1 + f2) / s;
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                dy[i] = g.data()[i] * dv * sign;
                ds[i] = g.data()[i] * (-u1 * f1 + u2 * f2) / s;
            }
            let dy = Tensor::new(&shape, dy);
            vec![
                n[0].then(|| dy.clone()),
                n[1].then(|| dy.map(|v| -v)),
                n[2].then(|| Tensor::new(&shape, ds.clone())),
            ]
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn normal_pdf(u: f64) -> f64 {
    (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal CDF.
pub fn normal_cdf(u: f64) -> f64 {
    0.5 * libm::erfc(-u / std::f64::consts::SQRT_2)
}

/// `Φ((0.5 − |d|)/σ) − Φ((−0.5 − |d|)/σ)`, evaluated on the upper tail for
/// accuracy far from the mean.
pub fn gaussian_bin(diff: f64, scale: f64) -> f64 {
    let v = diff.abs();
    normal_cdf((0.5 - v) / scale) - normal_cdf((-0.5 - v) / scale)
}

/// `β_c + Σ_j γ_cj x_j²` per channel and position.
pub fn gdn_norm(x: &Tensor, beta: &Tensor, gamma: &Tensor) -> Vec<f64> {
    let (c, h, w) = x.chw();
    let p = h * w;
    let sq: Vec<f64> = x.data().iter().map(|v| v * v).collect();
    let mut norm = vec![0.0; c * p];
    for (ch, row) in norm.chunks_mut(p.max(1)).enumerate().take(c) {
        row.fill(beta.data()[ch]);
    }
    tensor::gemm(c, c, p, gamma.data(), (c as isize, 1), &sq, (p as isize, 1), &mut norm, 1.0);
    norm
}
