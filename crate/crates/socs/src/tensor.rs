//! Reverse-mode automatic differentiation over `f64` dynamic-dimension arrays.
//!
//! A [`Tape`] records every operation; [`Tx`] is a copyable handle to one
//! node. Calling [`Tape::backward`] on a scalar node walks the tape in
//! reverse and accumulates vector-Jacobian products into every node that
//! (transitively) depends on a gradient-carrying leaf. Nodes whose inputs
//! are all constants carry no backward closures, so inference over large
//! pixel batches does not pay for gradient bookkeeping.
//!
//! The op set is exactly what the model and losses need: broadcast
//! arithmetic, 2-D matmul, ReLU/abs/exp/ln/clamp, axis reductions,
//! softmax/log-sum-exp, layer normalization, shape movement, row
//! tiling/repetition for per-slot broadcast decoding, and an im2col
//! gather for strided convolution.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, Axis, Ix2, IxDyn, Slice};

type Value = Rc<ArrayD<f64>>;
type Vjp = Box<dyn Fn(&ArrayD<f64>) -> ArrayD<f64>>;

struct Node {
    value: Value,
    parents: Vec<(usize, Vjp)>,
    needs_grad: bool,
}

/// Append-only operation tape. Create one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tape node.
#[derive(Clone, Copy)]
pub struct Tx<'t> {
    tape: &'t Tape,
    idx: usize,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Grads {
    by_node: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    /// Gradient of the loss w.r.t. node `x`. Zero array if the node was
    /// never reached (e.g. an unused parameter).
    pub fn wrt(&self, x: Tx<'_>) -> ArrayD<f64> {
        match &self.by_node[x.idx] {
            Some(g) => g.clone(),
            None => ArrayD::zeros(x.shape()),
        }
    }
}

/// Sum `g` down to `target` shape, inverting a broadcast.
fn reduce_to_shape(mut g: ArrayD<f64>, target: &[usize]) -> ArrayD<f64> {
    while g.ndim() > target.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, (&gd, &td)) in g.shape().to_vec().iter().zip(target).enumerate() {
        if td == 1 && gd != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn standard(a: ArrayD<f64>) -> ArrayD<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<f64>, parents: Vec<(usize, Vjp)>, needs_grad: bool) -> Tx<'_> {
        debug_assert!(value.is_standard_layout());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            needs_grad,
        });
        Tx {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// A leaf that participates in gradient computation (a parameter).
    pub fn param(&self, value: ArrayD<f64>) -> Tx<'_> {
        self.push(standard(value), Vec::new(), true)
    }

    /// A leaf with no gradient (data, targets, fixed noise).
    pub fn constant(&self, value: ArrayD<f64>) -> Tx<'_> {
        self.push(standard(value), Vec::new(), false)
    }

    pub fn scalar(&self, v: f64) -> Tx<'_> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Reverse pass from a scalar (single-element) node.
    pub fn backward(&self, loss: Tx<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.idx].value.len(),
            1,
            "backward requires a scalar loss node"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; nodes.len()];
        grads[loss.idx] = Some(ArrayD::from_elem(nodes[loss.idx].value.raw_dim(), 1.0));
        for idx in (0..=loss.idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            for (pidx, vjp) in &node.parents {
                let contrib = vjp(&g);
                match &mut grads[*pidx] {
                    Some(acc) => *acc += &contrib,
                    slot => *slot = Some(contrib),
                }
            }
            if node.needs_grad && !node.parents.is_empty() {
                // Interior node: gradient no longer needed once propagated.
                continue;
            }
            // Leaves keep their gradient for the caller.
            grads[idx] = Some(g);
        }
        Grads { by_node: grads }
    }
}

impl<'t> Tx<'t> {
    pub fn value(&self) -> Value {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    pub fn shape(&self) -> IxDyn {
        self.tape.nodes.borrow()[self.idx].value.raw_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.idx].value.shape().to_vec()
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.idx].needs_grad
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1);
        *v.iter().next().unwrap()
    }

    fn unary(
        self,
        value: ArrayD<f64>,
        vjp: impl Fn(&ArrayD<f64>) -> ArrayD<f64> + 'static,
    ) -> Tx<'t> {
        let needs = self.needs_grad();
        let parents: Vec<(usize, Vjp)> = if needs {
            vec![(self.idx, Box::new(vjp))]
        } else {
            Vec::new()
        };
        self.tape.push(standard(value), parents, needs)
    }

    fn binary(
        self,
        rhs: Tx<'t>,
        value: ArrayD<f64>,
        vjp_l: impl Fn(&ArrayD<f64>) -> ArrayD<f64> + 'static,
        vjp_r: impl Fn(&ArrayD<f64>) -> ArrayD<f64> + 'static,
    ) -> Tx<'t> {
        let mut parents: Vec<(usize, Vjp)> = Vec::new();
        if self.needs_grad() {
            parents.push((self.idx, Box::new(vjp_l)));
        }
        if rhs.needs_grad() {
            parents.push((rhs.idx, Box::new(vjp_r)));
        }
        let needs = !parents.is_empty();
        self.tape.push(standard(value), parents, needs)
    }

    // ---- broadcast arithmetic -------------------------------------------
    //
    // The right operand must broadcast to the left operand's shape.

    pub fn add(self, rhs: Tx<'t>) -> Tx<'t> {
        let (a, b) = (self.value(), rhs.value());
        let out = &*a + &b.broadcast(a.raw_dim()).expect("add: rhs not broadcastable");
        let bs = b.shape().to_vec();
        self.binary(
            rhs,
            out,
            |g| g.clone(),
            move |g| reduce_to_shape(g.clone(), &bs),
        )
    }

    pub fn sub(self, rhs: Tx<'t>) -> Tx<'t> {
        let (a, b) = (self.value(), rhs.value());
        let out = &*a - &b.broadcast(a.raw_dim()).expect("sub: rhs not broadcastable");
        let bs = b.shape().to_vec();
        self.binary(
            rhs,
            out,
            |g| g.clone(),
            move |g| reduce_to_shape(-g.clone(), &bs),
        )
    }

    pub fn mul(self, rhs: Tx<'t>) -> Tx<'t> {
        let (a, b) = (self.value(), rhs.value());
        let out = &*a * &b.broadcast(a.raw_dim()).expect("mul: rhs not broadcastable");
        let bs = b.shape().to_vec();
        let (ac, bc) = (a.clone(), b.clone());
        self.binary(
            rhs,
            out,
            move |g| g * &bc.broadcast(g.raw_dim()).unwrap(),
            move |g| reduce_to_shape(g * &*ac, &bs),
        )
    }

    pub fn neg(self) -> Tx<'t> {
        self.scale(-1.0)
    }

    pub fn scale(self, c: f64) -> Tx<'t> {
        let out = self.value().as_ref() * c;
        self.unary(out, move |g| g * c)
    }

    pub fn add_scalar(self, c: f64) -> Tx<'t> {
        let out = self.value().as_ref() + c;
        self.unary(out, |g| g.clone())
    }

    // ---- elementwise nonlinearity ---------------------------------------

    pub fn relu(self) -> Tx<'t> {
        let x = self.value();
        let out = x.mapv(|v| v.max(0.0));
        let xc = x.clone();
        self.unary(out, move |g| {
            let mut dg = g.clone();
            dg.zip_mut_with(&xc, |d, &xv| {
                if xv <= 0.0 {
                    *d = 0.0
                }
            });
            dg
        })
    }

    pub fn abs(self) -> Tx<'t> {
        let x = self.value();
        let out = x.mapv(f64::abs);
        let xc = x.clone();
        self.unary(out, move |g| {
            let mut dg = g.clone();
            dg.zip_mut_with(&xc, |d, &xv| *d *= xv.signum());
            dg
        })
    }

    pub fn exp(self) -> Tx<'t> {
        let out = self.value().mapv(f64::exp);
        let oc = out.clone();
        self.unary(out, move |g| g * &oc)
    }

    pub fn ln(self) -> Tx<'t> {
        let x = self.value();
        let out = x.mapv(f64::ln);
        let xc = x.clone();
        self.unary(out, move |g| g / &*xc)
    }

    /// Clamp to [lo, hi]; gradient passes only strictly inside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Tx<'t> {
        let x = self.value();
        let out = x.mapv(|v| v.clamp(lo, hi));
        let xc = x.clone();
        self.unary(out, move |g| {
            let mut dg = g.clone();
            dg.zip_mut_with(&xc, |d, &xv| {
                if xv <= lo || xv >= hi {
                    *d = 0.0
                }
            });
            dg
        })
    }

    // ---- matmul -----------------------------------------------------------

    /// 2-D matrix product `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, rhs: Tx<'t>) -> Tx<'t> {
        let (a, b) = (self.value(), rhs.value());
        let a2 = a.view().into_dimensionality::<Ix2>().expect("matmul lhs not 2-d");
        let b2 = b.view().into_dimensionality::<Ix2>().expect("matmul rhs not 2-d");
        assert_eq!(a2.ncols(), b2.nrows(), "matmul inner dims");
        let out = a2.dot(&b2).into_dyn();
        let (ac, bc) = (a.clone(), b.clone());
        self.binary(
            rhs,
            out,
            move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let b2 = bc.view().into_dimensionality::<Ix2>().unwrap();
                g2.dot(&b2.t()).into_dyn()
            },
            move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let a2 = ac.view().into_dimensionality::<Ix2>().unwrap();
                a2.t().dot(&g2).into_dyn()
            },
        )
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum_all(self) -> Tx<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = ArrayD::from_elem(IxDyn(&[]), x.sum());
        self.unary(out, move |g| {
            ArrayD::from_elem(IxDyn(&shape), *g.iter().next().unwrap())
        })
    }

    pub fn mean_all(self) -> Tx<'t> {
        let n = self.value().len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Tx<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = x.sum_axis(Axis(axis));
        self.unary(out.into_dyn(), move |g| {
            let ge = g.clone().insert_axis(Axis(axis));
            ge.broadcast(IxDyn(&shape)).unwrap().to_owned()
        })
    }

    pub fn mean_axis(self, axis: usize) -> Tx<'t> {
        let n = self.value().shape()[axis] as f64;
        self.sum_axis(axis).scale(1.0 / n)
    }

    // ---- shape movement ---------------------------------------------------

    pub fn reshape(self, shape: &[usize]) -> Tx<'t> {
        let x = self.value();
        let old = x.shape().to_vec();
        assert_eq!(
            x.len(),
            shape.iter().product::<usize>(),
            "reshape: element count mismatch {:?} -> {:?}",
            old,
            shape
        );
        let out = x
            .as_ref()
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .unwrap();
        self.unary(out, move |g| {
            g.clone().into_shape_with_order(IxDyn(&old)).unwrap()
        })
    }

    pub fn permute(self, axes: &[usize]) -> Tx<'t> {
        let x = self.value();
        let out = standard(x.view().permuted_axes(IxDyn(axes)).to_owned().into_dyn());
        let mut inverse = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.unary(out, move |g| {
            standard(g.view().permuted_axes(IxDyn(&inverse)).to_owned().into_dyn())
        })
    }

    /// Contiguous slice `[from, to)` along `axis`.
    pub fn slice_axis(self, axis: usize, from: usize, to: usize) -> Tx<'t> {
        let x = self.value();
        let full = x.shape().to_vec();
        let out = x
            .slice_axis(Axis(axis), Slice::from(from..to))
            .to_owned()
            .into_dyn();
        self.unary(standard(out), move |g| {
            let mut z = ArrayD::<f64>::zeros(IxDyn(&full));
            z.slice_axis_mut(Axis(axis), Slice::from(from..to))
                .assign(g);
            z
        })
    }

    /// Rows repeated in place: `[r, ...] -> [r * n, ...]` where input row i
    /// becomes output rows `i*n ..= i*n+n-1`.
    pub fn repeat_rows(self, n: usize) -> Tx<'t> {
        let x = self.value();
        let mut shape = x.shape().to_vec();
        let rows = shape[0];
        shape[0] = rows * n;
        let mut out = ArrayD::<f64>::zeros(IxDyn(&shape));
        for i in 0..rows {
            let src = x.index_axis(Axis(0), i);
            for j in 0..n {
                out.index_axis_mut(Axis(0), i * n + j).assign(&src);
            }
        }
        self.unary(out, move |g| {
            let mut shape = g.shape().to_vec();
            shape[0] = rows;
            let mut dg = ArrayD::<f64>::zeros(IxDyn(&shape));
            for i in 0..rows {
                let mut acc = dg.index_axis_mut(Axis(0), i);
                for j in 0..n {
                    acc += &g.index_axis(Axis(0), i * n + j);
                }
            }
            dg
        })
    }

    /// Whole block tiled: `[r, ...] -> [n * r, ...]` with copy c at rows
    /// `c*r .. (c+1)*r`.
    pub fn tile_rows(self, n: usize) -> Tx<'t> {
        let x = self.value();
        let mut shape = x.shape().to_vec();
        let rows = shape[0];
        shape[0] = rows * n;
        let mut out = ArrayD::<f64>::zeros(IxDyn(&shape));
        for c in 0..n {
            for i in 0..rows {
                out.index_axis_mut(Axis(0), c * rows + i)
                    .assign(&x.index_axis(Axis(0), i));
            }
        }
        self.unary(out, move |g| {
            let mut shape = g.shape().to_vec();
            shape[0] = rows;
            let mut dg = ArrayD::<f64>::zeros(IxDyn(&shape));
            for c in 0..n {
                for i in 0..rows {
                    let mut acc = dg.index_axis_mut(Axis(0), i);
                    acc += &g.index_axis(Axis(0), c * rows + i);
                }
            }
            dg
        })
    }

    /// Concatenate along `axis`.
    pub fn concat(axis: usize, parts: &[Tx<'t>]) -> Tx<'t> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let values: Vec<Value> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let mut parents: Vec<(usize, Vjp)> = Vec::new();
        let mut offset = 0usize;
        for (part, value) in parts.iter().zip(&values) {
            let extent = value.shape()[axis];
            if part.needs_grad() {
                let (from, to) = (offset, offset + extent);
                parents.push((
                    part.idx,
                    Box::new(move |g: &ArrayD<f64>| {
                        standard(
                            g.slice_axis(Axis(axis), Slice::from(from..to))
                                .to_owned()
                                .into_dyn(),
                        )
                    }),
                ));
            }
            offset += extent;
        }
        let needs = !parents.is_empty();
        tape.push(standard(out), parents, needs)
    }

    // ---- softmax family ---------------------------------------------------

    pub fn softmax(self, axis: usize) -> Tx<'t> {
        let x = self.value();
        let out = softmax_array(&x, axis);
        let oc = out.clone();
        self.unary(out, move |g| {
            // dx = y * (g - sum(g * y, axis, keepdim))
            let gy = g * &oc;
            let s = gy.sum_axis(Axis(axis)).insert_axis(Axis(axis));
            let mut dx = g - &s.broadcast(g.raw_dim()).unwrap();
            dx *= &oc;
            dx
        })
    }

    /// log-sum-exp over `axis`, removing it. Computed with max-subtraction.
    pub fn logsumexp(self, axis: usize) -> Tx<'t> {
        let x = self.value();
        let out = logsumexp_array(&x, axis);
        let sm = softmax_array(&x, axis);
        self.unary(out, move |g| {
            let ge = g.clone().insert_axis(Axis(axis));
            &sm * &ge.broadcast(sm.raw_dim()).unwrap()
        })
    }

    /// log-sum-exp over `axis`, keeping it with extent 1.
    pub fn logsumexp_keepdim(self, axis: usize) -> Tx<'t> {
        let mut shape = self.dims();
        shape[axis] = 1;
        self.logsumexp(axis).reshape(&shape)
    }

    /// Normalize the last axis to zero mean, unit variance.
    pub fn layer_norm(self, eps: f64) -> Tx<'t> {
        let x = self.value();
        let axis = x.ndim() - 1;
        let n = x.shape()[axis] as f64;
        let mean = x.mean_axis(Axis(axis)).unwrap().insert_axis(Axis(axis));
        let centered = &*x - &mean.broadcast(x.raw_dim()).unwrap();
        let var = centered
            .mapv(|v| v * v)
            .mean_axis(Axis(axis))
            .unwrap()
            .insert_axis(Axis(axis));
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let out = &centered * &inv_std.broadcast(x.raw_dim()).unwrap();
        let oc = out.clone();
        let isc = inv_std;
        self.unary(out, move |g| {
            // dx = inv_std * (g - mean(g) - y * mean(g * y)), per row.
            let gm = g.mean_axis(Axis(axis)).unwrap().insert_axis(Axis(axis));
            let gy = (g * &oc).sum_axis(Axis(axis)).insert_axis(Axis(axis)) / n;
            let mut dx = g - &gm.broadcast(g.raw_dim()).unwrap();
            dx -= &(&oc * &gy.broadcast(g.raw_dim()).unwrap());
            dx *= &isc.broadcast(g.raw_dim()).unwrap();
            dx
        })
    }

    // ---- convolution support ---------------------------------------------

    /// im2col gather for stride-`stride` convolution with `pad` zero-padding.
    ///
    /// Input `[images, h, w, c]`; output `[images * oh * ow, kh * kw * c]`
    /// with column layout `(kh, kw, c)`, `c` fastest.
    pub fn im2col(self, kernel: (usize, usize), stride: usize, pad: usize) -> Tx<'t> {
        let x = self.value();
        let dims = x.shape().to_vec();
        assert_eq!(dims.len(), 4, "im2col expects [images, h, w, c]");
        let (images, h, w, c) = (dims[0], dims[1], dims[2], dims[3]);
        let (kh, kw) = kernel;
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[images * oh * ow, kh * kw * c]));
        {
            let xs = x.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            let mut row = 0usize;
            for img in 0..images {
                let base_img = img * h * w * c;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let row_base = row * kh * kw * c;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                let dst = row_base + (ky * kw + kx) * c;
                                if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                    let src = base_img + (iy as usize * w + ix as usize) * c;
                                    os[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
        self.unary(out, move |g| {
            let mut dx = ArrayD::<f64>::zeros(IxDyn(&[images, h, w, c]));
            let gs = g.as_slice().unwrap();
            let ds = dx.as_slice_mut().unwrap();
            let mut row = 0usize;
            for img in 0..images {
                let base_img = img * h * w * c;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let row_base = row * kh * kw * c;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                    let src = base_img + (iy as usize * w + ix as usize) * c;
                                    let gsrc = row_base + (ky * kw + kx) * c;
                                    for ch in 0..c {
                                        ds[src + ch] += gs[gsrc + ch];
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
            dx
        })
    }
}

/// Stable softmax of an array along `axis` (plain-array helper).
pub fn softmax_array(x: &ArrayD<f64>, axis: usize) -> ArrayD<f64> {
    let max = x
        .fold_axis(Axis(axis), f64::NEG_INFINITY, |acc, &v| acc.max(v))
        .insert_axis(Axis(axis));
    let mut e = x - &max.broadcast(x.raw_dim()).unwrap();
    e.mapv_inplace(f64::exp);
    let sum = e.sum_axis(Axis(axis)).insert_axis(Axis(axis));
    &e / &sum.broadcast(x.raw_dim()).unwrap()
}

/// Stable log-sum-exp along `axis`, removing it (plain-array helper).
pub fn logsumexp_array(x: &ArrayD<f64>, axis: usize) -> ArrayD<f64> {
    let max = x.fold_axis(Axis(axis), f64::NEG_INFINITY, |acc, &v| acc.max(v));
    let maxk = max.clone().insert_axis(Axis(axis));
    let shifted = x - &maxk.broadcast(x.raw_dim()).unwrap();
    let sum = shifted.mapv(f64::exp).sum_axis(Axis(axis));
    sum.mapv(f64::ln) + &max
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr0, arr1, arr2, ArrayD};

    /// Central finite differences of `f` w.r.t. `x0`, matched against
    /// `analytic` with mixed absolute/relative tolerance.
    fn check_grad(
        x0: &ArrayD<f64>,
        analytic: &ArrayD<f64>,
        f: impl Fn(&ArrayD<f64>) -> f64,
        tol: f64,
    ) {
        let h = 1e-6;
        let mut flat = x0.clone();
        for i in 0..flat.len() {
            let orig = flat.as_slice().unwrap()[i];
            flat.as_slice_mut().unwrap()[i] = orig + h;
            let fp = f(&flat);
            flat.as_slice_mut().unwrap()[i] = orig - h;
            let fm = f(&flat);
            flat.as_slice_mut().unwrap()[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[i];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            assert!(err < tol, "idx {i}: analytic {a} vs fd {fd} (err {err})");
        }
    }

    fn rand_array(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut s = crate::rng::Stream::derive(seed, 0, "tensor-test");
        ArrayD::from_shape_vec(IxDyn(shape), s.normal_vec(shape.iter().product()))
            .unwrap()
    }

    #[test]
    fn add_broadcast_bias() {
        let t = Tape::new();
        let a = t.param(rand_array(&[3, 4], 1));
        let b = t.param(rand_array(&[4], 2));
        let loss = a.add(b).mul(a).sum_all();
        let grads = t.backward(loss);
        let a0 = a.value().as_ref().clone();
        let b0 = b.value().as_ref().clone();
        check_grad(
            &a0,
            &grads.wrt(a),
            |x| {
                let t = Tape::new();
                let a = t.param(x.clone());
                let b = t.constant(b0.clone());
                a.add(b).mul(a).sum_all().item()
            },
            1e-6,
        );
        check_grad(
            &b0,
            &grads.wrt(b),
            |x| {
                let t = Tape::new();
                let a = t.constant(a0.clone());
                let b = t.param(x.clone());
                a.add(b).mul(a).sum_all().item()
            },
            1e-6,
        );
    }

    #[test]
    fn matmul_grad() {
        let t = Tape::new();
        let a = t.param(rand_array(&[3, 5], 3));
        let b = t.param(rand_array(&[5, 2], 4));
        let loss = a.matmul(b).relu().sum_all();
        let grads = t.backward(loss);
        let (a0, b0) = (a.value().as_ref().clone(), b.value().as_ref().clone());
        check_grad(
            &a0,
            &grads.wrt(a),
            |x| {
                let t = Tape::new();
                let a = t.param(x.clone());
                let b = t.constant(b0.clone());
                a.matmul(b).relu().sum_all().item()
            },
            1e-5,
        );
        check_grad(
            &b0,
            &grads.wrt(b),
            |x| {
                let t = Tape::new();
                let a = t.constant(a0.clone());
                let b = t.param(x.clone());
                a.matmul(b).relu().sum_all().item()
            },
            1e-5,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grad() {
        let t = Tape::new();
        let x0 = rand_array(&[4, 6], 5);
        let x = t.param(x0.clone());
        let y = x.softmax(1);
        let sums = y.value().sum_axis(Axis(1));
        for &s in sums.iter() {
            assert!((s - 1.0).abs() < 1e-12);
        }
        let w = rand_array(&[4, 6], 6);
        let wc = w.clone();
        let loss = y.mul(t.constant(w)).sum_all();
        let grads = t.backward(loss);
        check_grad(
            &x0,
            &grads.wrt(x),
            move |v| {
                let t = Tape::new();
                let x = t.param(v.clone());
                x.softmax(1).mul(t.constant(wc.clone())).sum_all().item()
            },
            1e-6,
        );
    }

    #[test]
    fn logsumexp_matches_naive_and_grad() {
        let t = Tape::new();
        let x0 = rand_array(&[3, 7], 7);
        let x = t.param(x0.clone());
        let y = x.logsumexp(1);
        for (row, &got) in x0.rows().into_iter().zip(y.value().iter()) {
            let naive = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            assert!((got - naive).abs() < 1e-12);
        }
        let loss = y.sum_all();
        let grads = t.backward(loss);
        check_grad(
            &x0,
            &grads.wrt(x),
            |v| {
                let t = Tape::new();
                t.param(v.clone()).logsumexp(1).sum_all().item()
            },
            1e-6,
        );
    }

    #[test]
    fn logsumexp_is_overflow_safe() {
        let t = Tape::new();
        let x = t.constant(arr1(&[1000.0, 1000.0]).into_dyn());
        let y = x.logsumexp(0).item();
        assert!((y - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_grad() {
        let x0 = rand_array(&[5, 8], 8);
        let t = Tape::new();
        let x = t.param(x0.clone());
        let w = rand_array(&[5, 8], 9);
        let wc = w.clone();
        let loss = x.layer_norm(1e-5).mul(t.constant(w)).sum_all();
        let grads = t.backward(loss);
        check_grad(
            &x0,
            &grads.wrt(x),
            move |v| {
                let t = Tape::new();
                let x = t.param(v.clone());
                x.layer_norm(1e-5).mul(t.constant(wc.clone())).sum_all().item()
            },
            1e-5,
        );
    }

    #[test]
    fn im2col_grad_and_geometry() {
        // 1 image, 4x4, 1 channel, 3x3 kernel, stride 2, pad 1 -> 2x2 output.
        let x0 = rand_array(&[1, 4, 4, 1], 10);
        let t = Tape::new();
        let x = t.param(x0.clone());
        let cols = x.im2col((3, 3), 2, 1);
        assert_eq!(cols.dims(), vec![4, 9]);
        let w = rand_array(&[4, 9], 11);
        let wc = w.clone();
        let loss = cols.mul(t.constant(w)).sum_all();
        let grads = t.backward(loss);
        check_grad(
            &x0,
            &grads.wrt(x),
            move |v| {
                let t = Tape::new();
                let x = t.param(v.clone());
                x.im2col((3, 3), 2, 1)
                    .mul(t.constant(wc.clone()))
                    .sum_all()
                    .item()
            },
            1e-6,
        );
        // Top-left output row sees the zero-padded corner: col (ky=0,kx=0) is 0.
        let v = cols.value();
        assert_eq!(v[[0, 0]], 0.0);
        assert_eq!(v[[0, 4]], x0[[0, 0, 0, 0]]); // center tap = pixel (0,0)
    }

    #[test]
    fn slice_concat_roundtrip_grad() {
        let x0 = rand_array(&[3, 10], 12);
        let t = Tape::new();
        let x = t.param(x0.clone());
        let a = x.slice_axis(1, 0, 4);
        let b = x.slice_axis(1, 4, 10);
        let y = Tx::concat(1, &[a, b]);
        assert_eq!(y.value().as_ref(), &x0);
        let loss = y.mul(y).sum_all();
        let grads = t.backward(loss);
        let expect = x0.mapv(|v| 2.0 * v);
        assert!(grads
            .wrt(x)
            .iter()
            .zip(expect.iter())
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn repeat_and_tile_rows() {
        let t = Tape::new();
        let x = t.param(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let r = x.repeat_rows(2);
        assert_eq!(
            r.value().as_slice().unwrap(),
            &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]
        );
        let tl = x.tile_rows(2);
        assert_eq!(
            tl.value().as_slice().unwrap(),
            &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]
        );
        let loss = r.sum_all().add(tl.sum_all());
        let grads = t.backward(loss);
        // Each source element appears twice in each expansion.
        assert!(grads.wrt(x).iter().all(|&g| (g - 4.0).abs() < 1e-12));
    }

    #[test]
    fn clamp_grad_zero_outside() {
        let t = Tape::new();
        let x = t.param(arr1(&[-2.0, 0.5, 2.0]).into_dyn());
        let loss = x.clamp(-1.0, 1.0).sum_all();
        let grads = t.backward(loss);
        assert_eq!(grads.wrt(x).as_slice().unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn permute_grad() {
        let x0 = rand_array(&[2, 3, 4], 13);
        let t = Tape::new();
        let x = t.param(x0.clone());
        let w = rand_array(&[4, 3, 2], 14);
        let wc = w.clone();
        let loss = x.permute(&[2, 1, 0]).mul(t.constant(w)).sum_all();
        let grads = t.backward(loss);
        check_grad(
            &x0,
            &grads.wrt(x),
            move |v| {
                let t = Tape::new();
                t.param(v.clone())
                    .permute(&[2, 1, 0])
                    .mul(t.constant(wc.clone()))
                    .sum_all()
                    .item()
            },
            1e-6,
        );
    }

    #[test]
    fn scalar_node() {
        let t = Tape::new();
        let s = t.scalar(3.5);
        assert_eq!(s.item(), 3.5);
        assert_eq!(s.value().as_ref(), &arr0(3.5).into_dyn());
    }

    #[test]
    fn constants_carry_no_backward_closures() {
        let t = Tape::new();
        let a = t.constant(rand_array(&[50, 50], 15));
        let b = t.constant(rand_array(&[50, 50], 16));
        let c = a.matmul(b).relu().sum_all();
        assert!(!c.needs_grad());
    }
}
