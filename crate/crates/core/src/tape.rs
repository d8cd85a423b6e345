//! Reverse-mode differentiation over whole-tensor operations.
//!
//! Every operation appends a node holding its output value and a
//! vector–Jacobian rule. [`Tape::backward`] walks the nodes in exact reverse
//! record order; gradients reaching a node from several consumers are summed
//! in that same fixed order, so results are bit-reproducible.

use crate::error::{Error, Result};
use crate::ops::{self, PatchGrid};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type Vjp<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    tracked: bool,
    vjp: Option<Vjp<T>>,
}

/// Ordered record of operations.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a tensor whose gradient is wanted.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Vec::new(), true, None)
    }

    /// Records a tensor treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Vec::new(), false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push_raw(&mut self, value: Tensor<T>, parents: Vec<usize>, tracked: bool, vjp: Option<Vjp<T>>) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            tracked,
            vjp,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, parents: &[Var], vjp: Vjp<T>) -> Var {
        let tracked = parents.iter().any(|p| self.nodes[p.0].tracked);
        let parents = parents.iter().map(|p| p.0).collect();
        if tracked {
            self.push_raw(value, parents, true, Some(vjp))
        } else {
            self.push_raw(value, parents, false, None)
        }
    }

    /// Back-propagates from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(vjp) = &node.vjp else { continue };
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let pg = vjp(&inputs, &node.value, &g);
            for (&p, gp) in node.parents.iter().zip(pg) {
                let Some(gp) = gp else { continue };
                if !self.nodes[p].tracked {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&gp),
                    slot @ None => *slot = Some(gp),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, &[a, b], Box::new(|_, _, g| vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(
            v,
            &[a, b],
            Box::new(|_, _, g| vec![Some(g.clone()), Some(g.map(|x| -x))]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(
            v,
            &[a, b],
            Box::new(|x, _, g| vec![Some(g.zip_map(x[1], |g, b| g * b)), Some(g.zip_map(x[0], |g, a| g * a))]),
        ))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        Ok(self.push(
            v,
            &[a, b],
            Box::new(|x, y, g| {
                let ga = g.zip_map(x[1], |g, b| g / b);
                let gb = ga.zip_map(y, |q, y| -q * y);
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, &[a], Box::new(move |_, _, g| vec![Some(g.map(|x| x * s))]))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, &[a], Box::new(|_, _, g| vec![Some(g.clone())]))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.abs());
        self.push(
            v,
            &[a],
            Box::new(|x, _, g| {
                vec![Some(g.zip_map(x[0], |g, a| {
                    if a > T::zero() {
                        g
                    } else if a < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                }))]
            }),
        )
    }

    pub fn leaky_relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(ops::leaky_relu);
        self.push(
            v,
            &[a],
            Box::new(|x, _, g| {
                let s = T::lit(ops::LEAKY_SLOPE);
                vec![Some(g.zip_map(x[0], |g, a| if a >= T::zero() { g } else { g * s }))]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(ops::sigmoid);
        self.push(
            v,
            &[a],
            Box::new(|_, y, g| vec![Some(g.zip_map(y, |g, y| g * y * (T::one() - y)))]),
        )
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(
            v,
            &[a],
            Box::new(|x, _, g| vec![Some(Tensor::full(x[0].shape(), g.item()))]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Multiplies every element of `a` by the one-element `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("mul_scalar", self.shape(a), self.shape(s)));
        }
        let sv = self.value(s).item();
        let v = self.value(a).map(|x| x * sv);
        Ok(self.push(
            v,
            &[a, s],
            Box::new(|x, _, g| {
                let s = x[1].item();
                let gs: T = g.data().iter().zip(x[0].data()).map(|(&g, &a)| g * a).sum();
                vec![Some(g.map(|g| g * s)), Some(Tensor::scalar(gs))]
            }),
        ))
    }

    /// Element `i` of a tensor, as a one-element tensor.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let n = self.value(a).len();
        if i >= n {
            return Err(Error::invalid(format!("index {i} out of range 0..{n}")));
        }
        let v = Tensor::scalar(self.value(a).data()[i]);
        Ok(self.push(
            v,
            &[a],
            Box::new(move |x, _, g| {
                let mut out = Tensor::zeros(x[0].shape());
                out.data_mut()[i] = g.item();
                vec![Some(out)]
            }),
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(
            v,
            &[a],
            Box::new(|x, _, g| vec![Some(g.reshape(x[0].shape()).unwrap())]),
        ))
    }

    // ---- broadcasts over feature maps and token matrices ----

    /// `x (C×H×W) ⊙ m (H×W)`, broadcast over channels.
    pub fn mul_spatial(&mut self, x: Var, m: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if self.shape(m) != [h, w] {
            return Err(Error::shape("mul_spatial", self.shape(x), self.shape(m)));
        }
        let hw = h * w;
        let mv = self.value(m).data();
        let v = Tensor::from_fn(&[c, h, w], |i| self.value(x).data()[i] * mv[i % hw]);
        Ok(self.push(
            v,
            &[x, m],
            Box::new(move |x, _, g| {
                let m = x[1].data();
                let gx = Tensor::from_fn(x[0].shape(), |i| g.data()[i] * m[i % hw]);
                let mut gm = vec![T::zero(); hw];
                for ch in 0..c {
                    for p in 0..hw {
                        gm[p] += g.data()[ch * hw + p] * x[0].data()[ch * hw + p];
                    }
                }
                vec![Some(gx), Some(Tensor::from_vec(&[h, w], gm).unwrap())]
            }),
        ))
    }

    /// Per-pixel select: `gate(p) ? a(p) : b(p)` for `C×H×W` maps and a binary `H×W` gate.
    ///
    /// Selected values are copied, so unselected pixels equal `b` bit for bit.
    pub fn select_spatial(&mut self, gate: &Tensor<T>, a: Var, b: Var) -> Result<Var> {
        self.same_shape("select_spatial", a, b)?;
        let (c, h, w) = self.value(a).chw()?;
        if gate.shape() != [h, w] {
            return Err(Error::shape("select_spatial", self.shape(a), gate.shape()));
        }
        let hw = h * w;
        let on: Vec<bool> = gate.data().iter().map(|&g| g > T::zero()).collect();
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let v = Tensor::from_fn(&[c, h, w], |i| if on[i % hw] { av[i] } else { bv[i] });
        Ok(self.push(
            v,
            &[a, b],
            Box::new(move |_, _, g| {
                let ga = Tensor::from_fn(g.shape(), |i| if on[i % hw] { g.data()[i] } else { T::zero() });
                let gb = Tensor::from_fn(g.shape(), |i| if on[i % hw] { T::zero() } else { g.data()[i] });
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    /// Scales row `i` of an `n×d` matrix by `w[i]`.
    pub fn mul_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let [n, d] = self.shape(x)[..] else {
            return Err(Error::shape("mul_rows", self.shape(x), self.shape(w)));
        };
        if self.value(w).len() != n {
            return Err(Error::shape("mul_rows", self.shape(x), self.shape(w)));
        }
        let wv = self.value(w).data();
        let v = Tensor::from_fn(&[n, d], |i| self.value(x).data()[i] * wv[i / d]);
        Ok(self.push(
            v,
            &[x, w],
            Box::new(move |x, _, g| {
                let w = x[1].data();
                let gx = Tensor::from_fn(&[n, d], |i| g.data()[i] * w[i / d]);
                let gw: Vec<T> = (0..n)
                    .map(|r| {
                        g.data()[r * d..(r + 1) * d]
                            .iter()
                            .zip(&x[0].data()[r * d..(r + 1) * d])
                            .map(|(&g, &a)| g * a)
                            .sum()
                    })
                    .collect();
                vec![Some(gx), Some(Tensor::from_vec(x[1].shape(), gw).unwrap())]
            }),
        ))
    }

    /// Adds a length-`d` vector to every row of an `n×d` matrix.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let [n, d] = self.shape(x)[..] else {
            return Err(Error::shape("add_row", self.shape(x), self.shape(r)));
        };
        if self.value(r).len() != d {
            return Err(Error::shape("add_row", self.shape(x), self.shape(r)));
        }
        let rv = self.value(r).data();
        let v = Tensor::from_fn(&[n, d], |i| self.value(x).data()[i] + rv[i % d]);
        Ok(self.push(
            v,
            &[x, r],
            Box::new(move |x, _, g| {
                let mut gr = vec![T::zero(); d];
                for row in g.data().chunks(d) {
                    for (a, &b) in gr.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                vec![Some(g.clone()), Some(Tensor::from_vec(x[1].shape(), gr).unwrap())]
            }),
        ))
    }

    /// Mean over the rows of an `n×d` matrix, giving a `1×d` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let [n, d] = self.shape(x)[..] else {
            return Err(Error::invalid(format!("mean_rows expects a matrix, got {:?}", self.shape(x))));
        };
        let inv = T::one() / T::lit(n as f64);
        let mut acc = vec![T::zero(); d];
        for row in self.value(x).data().chunks(d) {
            for (a, &b) in acc.iter_mut().zip(row) {
                *a += b;
            }
        }
        for a in &mut acc {
            *a *= inv;
        }
        let v = Tensor::from_vec(&[1, d], acc)?;
        Ok(self.push(
            v,
            &[x],
            Box::new(move |_, _, g| vec![Some(Tensor::from_fn(&[n, d], |i| g.data()[i % d] * inv))]),
        ))
    }

    /// Stacks `C_i×H×W` maps along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let (_, h, w) = self.value(xs[0]).chw()?;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(xs.len());
        for &x in xs {
            let (c, hh, ww) = self.value(x).chw()?;
            if (hh, ww) != (h, w) {
                return Err(Error::shape("concat_channels", self.shape(xs[0]), self.shape(x)));
            }
            data.extend_from_slice(self.value(x).data());
            sizes.push((c, self.shape(x).to_vec()));
        }
        let total = data.len() / (h * w);
        let v = Tensor::from_vec(&[total, h, w], data)?;
        Ok(self.push(
            v,
            xs,
            Box::new(move |_, _, g| {
                let mut off = 0;
                sizes
                    .iter()
                    .map(|(c, shape)| {
                        let n = c * h * w;
                        let t = Tensor::from_vec(shape, g.data()[off..off + n].to_vec()).unwrap();
                        off += n;
                        Some(t)
                    })
                    .collect()
            }),
        ))
    }

    pub fn pad_hw(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let v = ops::pad_hw(self.value(x), h, w)?;
        Ok(self.push(
            v,
            &[x],
            Box::new(|x, _, g| {
                let (h, w) = (x[0].shape()[x[0].rank() - 2], x[0].shape()[x[0].rank() - 1]);
                vec![Some(ops::crop_hw(g, h, w).unwrap())]
            }),
        ))
    }

    pub fn crop_hw(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let v = ops::crop_hw(self.value(x), h, w)?;
        Ok(self.push(
            v,
            &[x],
            Box::new(|x, _, g| {
                let (h, w) = (x[0].shape()[x[0].rank() - 2], x[0].shape()[x[0].rank() - 1]);
                vec![Some(ops::pad_hw(g, h, w).unwrap())]
            }),
        ))
    }

    // ---- structured operators ----

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let v = ops::conv2d(self.value(x), self.value(kernel), bias.map(|b| self.value(b)))?;
        let mut parents = vec![x, kernel];
        parents.extend(bias);
        Ok(self.push(
            v,
            &parents,
            Box::new(|x, _, g| {
                let (gx, gk, gb) = ops::conv2d_backward(x[0], x[1], g);
                let mut out = vec![Some(gx), Some(gk)];
                if x.len() == 3 {
                    out.push(Some(gb));
                }
                out
            }),
        ))
    }

    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let v = ops::depthwise_conv2d(self.value(x), self.value(kernel))?;
        Ok(self.push(
            v,
            &[x, kernel],
            Box::new(|x, _, g| {
                let (gx, gk) = ops::depthwise_conv2d_backward(x[0], x[1], g);
                vec![Some(gx), Some(gk)]
            }),
        ))
    }

    /// Depthwise `C×k×k` then pointwise `C_out×C×1×1`.
    pub fn depthwise_separable(&mut self, x: Var, dw: Var, pw: Var) -> Result<Var> {
        let s = self.depthwise_conv2d(x, dw)?;
        self.conv2d(s, pw, None)
    }

    pub fn avg_pool(&mut self, x: Var, p: usize) -> Result<Var> {
        let v = ops::avg_pool(self.value(x), p)?;
        Ok(self.push(
            v,
            &[x],
            Box::new(move |x, _, g| vec![Some(ops::avg_pool_backward(x[0].shape(), p, g))]),
        ))
    }

    pub fn box_mean_valid(&mut self, x: Var, win: usize) -> Result<Var> {
        let v = ops::box_mean_valid(self.value(x), win)?;
        Ok(self.push(
            v,
            &[x],
            Box::new(move |x, _, g| {
                let (h, w) = (x[0].shape()[0], x[0].shape()[1]);
                vec![Some(ops::box_mean_valid_backward(h, w, win, g))]
            }),
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let v = ops::softmax(self.value(x));
        self.push(v, &[x], Box::new(|_, y, g| vec![Some(ops::softmax_backward(y, g))]))
    }

    /// Backward warp of a `C×H×W` map by a `2×H×W` flow. Gradients reach the flow
    /// only when the flow itself is tracked.
    pub fn bilinear_sample(&mut self, feature: Var, flow: Var) -> Result<Var> {
        let v = ops::bilinear_sample(self.value(feature), self.value(flow))?;
        Ok(self.push(
            v,
            &[feature, flow],
            Box::new(|x, _, g| {
                let (gf, gflow) = ops::bilinear_sample_backward(x[0], x[1], g);
                vec![Some(gf), Some(gflow)]
            }),
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(
            v,
            &[a, b],
            Box::new(|x, _, g| {
                let (ga, gb) = ops::matmul_backward(x[0], x[1], g);
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = ops::transpose(self.value(a))?;
        Ok(self.push(v, &[a], Box::new(|_, _, g| vec![Some(ops::transpose(g).unwrap())])))
    }

    pub fn gather_patches(&mut self, x: Var, grid: PatchGrid, indices: &[usize]) -> Result<Var> {
        let v = ops::gather_patches(self.value(x), grid, indices)?;
        let idx = indices.to_vec();
        Ok(self.push(
            v,
            &[x],
            Box::new(move |x, _, g| {
                let c = x[0].shape()[0];
                vec![Some(ops::scatter_patches(g, grid, &idx, c).unwrap())]
            }),
        ))
    }

    pub fn scatter_patches(&mut self, tokens: Var, grid: PatchGrid, indices: &[usize], channels: usize) -> Result<Var> {
        let v = ops::scatter_patches(self.value(tokens), grid, indices, channels)?;
        let idx = indices.to_vec();
        Ok(self.push(
            v,
            &[tokens],
            Box::new(move |_, _, g| vec![Some(ops::gather_patches(g, grid, &idx).unwrap())]),
        ))
    }
}
