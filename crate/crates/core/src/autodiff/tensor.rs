use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView3, Axis, Ix1, Ix3, IxDyn};

use super::scalar::Scalar;

type BackwardFn<T> = Box<dyn Fn(&ArrayD<T>, &[Tensor<T>], &ArrayD<T>)>;

struct Node<T: Scalar> {
    data: RefCell<ArrayD<T>>,
    grad: RefCell<Option<ArrayD<T>>>,
    requires_grad: bool,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
}

/// A node in a dynamically built computation graph.
///
/// Cloning is cheap (reference counted). Gradients accumulate into leaf
/// parameters when [`Tensor::backward`] is called on a scalar output.
pub struct Tensor<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> Tensor<T> {
    /// A constant input; no gradient is tracked through it unless it feeds
    /// an op with differentiable parents.
    pub fn constant(data: ArrayD<T>) -> Self {
        Tensor(Rc::new(Node {
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// A trainable leaf parameter.
    pub fn param(data: ArrayD<T>) -> Self {
        Tensor(Rc::new(Node {
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: true,
            parents: Vec::new(),
            backward: None,
        }))
    }

    fn from_op(data: ArrayD<T>, parents: Vec<Tensor<T>>, backward: BackwardFn<T>) -> Self {
        let requires_grad = parents.iter().any(|p| p.0.requires_grad);
        if requires_grad {
            Tensor(Rc::new(Node {
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: true,
                parents,
                backward: Some(backward),
            }))
        } else {
            // Dead branch for gradients; prune so pure-inference graphs
            // do not retain their history.
            Tensor::constant(data)
        }
    }

    pub fn data(&self) -> Ref<'_, ArrayD<T>> {
        self.0.data.borrow()
    }

    pub fn to_array(&self) -> ArrayD<T> {
        self.0.data.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.data.borrow().shape().to_vec()
    }

    pub fn scalar_value(&self) -> T {
        let d = self.0.data.borrow();
        debug_assert_eq!(d.len(), 1);
        *d.iter().next().expect("scalar tensor")
    }

    /// Overwrites the stored data in place (parameters only).
    pub fn set_data(&self, data: ArrayD<T>) {
        *self.0.data.borrow_mut() = data;
    }

    pub fn grad(&self) -> Option<ArrayD<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn take_grad(&self) -> Option<ArrayD<T>> {
        self.0.grad.borrow_mut().take()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    fn accumulate_grad(&self, g: &ArrayD<T>) {
        if !self.0.requires_grad {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => *existing = &*existing + g,
            None => *slot = Some(g.clone()),
        }
    }

    /// Reverse-mode sweep from a scalar output. Accumulates gradients into
    /// every reachable differentiable leaf.
    pub fn backward(&self) {
        assert_eq!(
            self.0.data.borrow().len(),
            1,
            "backward() requires a scalar output"
        );
        let order = self.topo_order();
        self.accumulate_grad(&ArrayD::ones(self.0.data.borrow().raw_dim()));
        for node in order.iter().rev() {
            let grad = node.0.grad.borrow().clone();
            if let (Some(g), Some(bw)) = (grad, node.0.backward.as_ref()) {
                bw(&g, &node.0.parents, &node.0.data.borrow());
            }
        }
        // Interior gradients are no longer needed; keep only leaves.
        for node in order {
            if node.0.backward.is_some() {
                node.zero_grad();
            }
        }
    }

    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const Node<T>> = HashSet::new();
        // Iterative DFS; graphs can be deep.
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(Rc::as_ptr(&self.0));
        while let Some((node, child_idx)) = stack.pop() {
            if child_idx < node.0.parents.len() {
                let child = node.0.parents[child_idx].clone();
                stack.push((node, child_idx + 1));
                if child.0.requires_grad && visited.insert(Rc::as_ptr(&child.0)) {
                    stack.push((child, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}

// ---- elementwise and reduction ops ----

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        let data = &*self.data() + &*other.data();
        Tensor::from_op(
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, parents, _| {
                parents[0].accumulate_grad(g);
                parents[1].accumulate_grad(g);
            }),
        )
    }

    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.shape(), other.shape(), "sub: shape mismatch");
        let data = &*self.data() - &*other.data();
        Tensor::from_op(
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, parents, _| {
                parents[0].accumulate_grad(g);
                parents[1].accumulate_grad(&g.mapv(|v| -v));
            }),
        )
    }

    pub fn mul(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.shape(), other.shape(), "mul: shape mismatch");
        let data = &*self.data() * &*other.data();
        Tensor::from_op(
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, parents, _| {
                parents[0].accumulate_grad(&(g * &*parents[1].data()));
                parents[1].accumulate_grad(&(g * &*parents[0].data()));
            }),
        )
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        let data = self.data().mapv(|v| v * s);
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g, parents, _| {
                parents[0].accumulate_grad(&g.mapv(|v| v * s));
            }),
        )
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        let data = self.data().mapv(|v| v + s);
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(|g, parents, _| {
                parents[0].accumulate_grad(g);
            }),
        )
    }

    /// `1 - x`, used for the `ln(1 - D)` adversarial terms.
    pub fn one_minus(&self) -> Tensor<T> {
        self.scale(-T::one()).add_scalar(T::one())
    }

    pub fn abs(&self) -> Tensor<T> {
        let data = self.data().mapv(|v| v.abs());
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(|g, parents, _| {
                let x = parents[0].data();
                let dg = ndarray::Zip::from(g)
                    .and(&*x)
                    .map_collect(|&gv, &xv| if xv < T::zero() { -gv } else { gv });
                drop(x);
                parents[0].accumulate_grad(&dg);
            }),
        )
    }

    pub fn ln(&self) -> Tensor<T> {
        let data = self.data().mapv(|v| v.ln());
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(|g, parents, _| {
                let x = parents[0].data();
                let dg = ndarray::Zip::from(g).and(&*x).map_collect(|&gv, &xv| gv / xv);
                drop(x);
                parents[0].accumulate_grad(&dg);
            }),
        )
    }

    pub fn tanh(&self) -> Tensor<T> {
        let data = self.data().mapv(|v| v.tanh());
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(|g, parents, out| {
                let dg = ndarray::Zip::from(g)
                    .and(out)
                    .map_collect(|&gv, &yv| gv * (T::one() - yv * yv));
                parents[0].accumulate_grad(&dg);
            }),
        )
    }

    /// Sigmoid clamped into `[eps, 1 - eps]` so downstream `ln` terms stay
    /// finite. The backward pass uses the clamped value's derivative, which
    /// keeps a small nonzero gradient even when saturated.
    pub fn sigmoid_clamped(&self, eps: T) -> Tensor<T> {
        let hi = T::one() - eps;
        let data = self.data().mapv(|v| {
            let s = T::one() / (T::one() + (-v).exp());
            if s < eps {
                eps
            } else if s > hi {
                hi
            } else {
                s
            }
        });
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(|g, parents, out| {
                let dg = ndarray::Zip::from(g)
                    .and(out)
                    .map_collect(|&gv, &yv| gv * yv * (T::one() - yv));
                parents[0].accumulate_grad(&dg);
            }),
        )
    }

    pub fn leaky_relu(&self, slope: T) -> Tensor<T> {
        let data = self
            .data()
            .mapv(|v| if v > T::zero() { v } else { v * slope });
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g, parents, _| {
                let x = parents[0].data();
                let dg = ndarray::Zip::from(g)
                    .and(&*x)
                    .map_collect(|&gv, &xv| if xv > T::zero() { gv } else { gv * slope });
                drop(x);
                parents[0].accumulate_grad(&dg);
            }),
        )
    }

    pub fn relu(&self) -> Tensor<T> {
        self.leaky_relu(T::zero())
    }

    /// Mean over all elements; returns a 0-d tensor.
    pub fn mean(&self) -> Tensor<T> {
        let d = self.data();
        let n = T::from_f64(d.len() as f64);
        let m = d.iter().fold(T::zero(), |acc, &v| acc + v) / n;
        drop(d);
        let data = ArrayD::from_elem(IxDyn(&[]), m);
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g, parents, _| {
                let gv = *g.iter().next().unwrap() / n;
                let shape = parents[0].data().raw_dim();
                parents[0].accumulate_grad(&ArrayD::from_elem(shape, gv));
            }),
        )
    }
}

// ---- structural / convolution ops (inputs are [C, H, W]) ----

fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

fn im2col<T: Scalar>(x: &ArrayView3<T>, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<T> {
    let (c, h, w) = x.dim();
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut cols = Array2::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..oh {
                    let si = (oi * stride + ki) as isize - pad as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let sj = (oj * stride + kj) as isize - pad as isize;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        cols[[row, oi * ow + oj]] = x[[ci, si as usize, sj as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(
    dcols: &Array2<T>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<T> {
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut dx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..oh {
                    let si = (oi * stride + ki) as isize - pad as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let sj = (oj * stride + kj) as isize - pad as isize;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        dx[[ci, si as usize, sj as usize]] =
                            dx[[ci, si as usize, sj as usize]] + dcols[[row, oi * ow + oj]];
                    }
                }
            }
        }
    }
    dx
}

impl<T: Scalar> Tensor<T> {
    /// 2D convolution. `self` is `[C, H, W]`, `weight` is `[O, C, kh, kw]`,
    /// `bias` is `[O]`.
    pub fn conv2d(&self, weight: &Tensor<T>, bias: &Tensor<T>, stride: usize, pad: usize) -> Tensor<T> {
        let x = self.data();
        let x3 = x.view().into_dimensionality::<Ix3>().expect("conv2d input must be [C,H,W]");
        let wshape = weight.shape();
        let (o, c, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        assert_eq!(c, x3.dim().0, "conv2d: channel mismatch");
        let (_, h, w_) = x3.dim();
        let oh = conv_out_len(h, kh, stride, pad);
        let ow = conv_out_len(w_, kw, stride, pad);

        let cols = im2col(&x3, kh, kw, stride, pad);
        let wd = weight.data();
        let wmat = wd
            .view()
            .into_shape_with_order((o, c * kh * kw))
            .expect("weight reshape");
        let mut out2 = wmat.dot(&cols);
        let bd = bias.data();
        let b1 = bd.view().into_dimensionality::<Ix1>().expect("bias must be [O]");
        for (mut row, &bv) in out2.rows_mut().into_iter().zip(b1.iter()) {
            row.mapv_inplace(|v| v + bv);
        }
        drop(bd);
        drop(wd);
        drop(x);

        let data = out2
            .into_shape_with_order((o, oh, ow))
            .expect("conv output reshape")
            .into_dyn();
        Tensor::from_op(
            data,
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |g, parents, _| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let g2 = g3
                    .into_shape_with_order((o, oh * ow))
                    .expect("grad reshape");

                let xd = parents[0].data();
                let x3 = xd.view().into_dimensionality::<Ix3>().unwrap();
                // cols are recomputed rather than cached; trades a little
                // compute for graph memory.
                let cols = im2col(&x3, kh, kw, stride, pad);

                let dw2 = g2.dot(&cols.t());
                let db = g2.sum_axis(Axis(1));
                parents[1].accumulate_grad(
                    &dw2.into_shape_with_order((o, c, kh, kw)).unwrap().into_dyn(),
                );
                parents[2].accumulate_grad(&db.into_dyn());

                if parents[0].0.requires_grad {
                    let wd = parents[1].data();
                    let wmat = wd.view().into_shape_with_order((o, c * kh * kw)).unwrap();
                    let dcols = wmat.t().dot(&g2);
                    let (_, h, w_) = x3.dim();
                    drop(xd);
                    let dx = col2im(&dcols, c, h, w_, kh, kw, stride, pad);
                    parents[0].accumulate_grad(&dx.into_dyn());
                }
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling of a `[C, H, W]` tensor.
    pub fn upsample2x(&self) -> Tensor<T> {
        let x = self.data();
        let x3 = x.view().into_dimensionality::<Ix3>().expect("upsample input must be [C,H,W]");
        let (c, h, w) = x3.dim();
        let mut out = Array3::zeros((c, 2 * h, 2 * w));
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x3[[ci, i, j]];
                    out[[ci, 2 * i, 2 * j]] = v;
                    out[[ci, 2 * i, 2 * j + 1]] = v;
                    out[[ci, 2 * i + 1, 2 * j]] = v;
                    out[[ci, 2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
        drop(x);
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |g, parents, _| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = Array3::zeros((c, h, w));
                for ci in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            dx[[ci, i, j]] = g3[[ci, 2 * i, 2 * j]]
                                + g3[[ci, 2 * i, 2 * j + 1]]
                                + g3[[ci, 2 * i + 1, 2 * j]]
                                + g3[[ci, 2 * i + 1, 2 * j + 1]];
                        }
                    }
                }
                parents[0].accumulate_grad(&dx.into_dyn());
            }),
        )
    }

    /// Concatenates two `[C, H, W]` tensors along the channel axis.
    pub fn concat_channels(&self, other: &Tensor<T>) -> Tensor<T> {
        let a = self.data();
        let b = other.data();
        let a3 = a.view().into_dimensionality::<Ix3>().unwrap();
        let b3 = b.view().into_dimensionality::<Ix3>().unwrap();
        let ca = a3.dim().0;
        let data = ndarray::concatenate(Axis(0), &[a3.view(), b3.view()])
            .expect("concat_channels: spatial shapes must match")
            .into_dyn();
        drop(a);
        drop(b);
        Tensor::from_op(
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents, _| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let ga = g3.slice(ndarray::s![..ca, .., ..]).to_owned();
                let gb = g3.slice(ndarray::s![ca.., .., ..]).to_owned();
                parents[0].accumulate_grad(&ga.into_dyn());
                parents[1].accumulate_grad(&gb.into_dyn());
            }),
        )
    }

    /// Instance normalization over the spatial axes of a `[C, H, W]` tensor,
    /// with per-channel affine parameters `gain` and `bias` (both `[C]`).
    pub fn instance_norm(&self, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Tensor<T> {
        let x = self.data();
        let x3 = x.view().into_dimensionality::<Ix3>().expect("instance_norm input must be [C,H,W]");
        let (c, h, w) = x3.dim();
        let n = T::from_f64((h * w) as f64);
        let gd = gain.data();
        let bd = bias.data();
        let g1 = gd.view().into_dimensionality::<Ix1>().unwrap();
        let b1 = bd.view().into_dimensionality::<Ix1>().unwrap();

        let mut out = Array3::zeros((c, h, w));
        let mut mus = Array1::zeros(c);
        let mut stds = Array1::zeros(c);
        for ci in 0..c {
            let ch = x3.index_axis(Axis(0), ci);
            let mu = ch.iter().fold(T::zero(), |a, &v| a + v) / n;
            let var = ch.iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu)) / n;
            let std = (var + eps).sqrt();
            mus[ci] = mu;
            stds[ci] = std;
            for i in 0..h {
                for j in 0..w {
                    out[[ci, i, j]] = g1[ci] * (x3[[ci, i, j]] - mu) / std + b1[ci];
                }
            }
        }
        drop(gd);
        drop(bd);
        drop(x);

        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g, parents, _| {
                let xd = parents[0].data();
                let x3 = xd.view().into_dimensionality::<Ix3>().unwrap();
                let gdv = parents[1].data();
                let g1 = gdv.view().into_dimensionality::<Ix1>().unwrap();
                let go = g.view().into_dimensionality::<Ix3>().unwrap();

                let mut dx = Array3::zeros((c, h, w));
                let mut dgain = Array1::zeros(c);
                let mut dbias = Array1::zeros(c);
                for ci in 0..c {
                    let mu = mus[ci];
                    let std = stds[ci];
                    // xhat = (x - mu) / std
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for i in 0..h {
                        for j in 0..w {
                            let xhat = (x3[[ci, i, j]] - mu) / std;
                            let gv = go[[ci, i, j]];
                            sum_g = sum_g + gv;
                            sum_gx = sum_gx + gv * xhat;
                        }
                    }
                    dbias[ci] = sum_g;
                    dgain[ci] = sum_gx;
                    let mean_g = sum_g / n;
                    let mean_gx = sum_gx / n;
                    let k = g1[ci] / std;
                    for i in 0..h {
                        for j in 0..w {
                            let xhat = (x3[[ci, i, j]] - mu) / std;
                            dx[[ci, i, j]] =
                                k * (go[[ci, i, j]] - mean_g - xhat * mean_gx);
                        }
                    }
                }
                drop(gdv);
                drop(xd);
                parents[0].accumulate_grad(&dx.into_dyn());
                parents[1].accumulate_grad(&dgain.into_dyn());
                parents[2].accumulate_grad(&dbias.into_dyn());
            }),
        )
    }
}
