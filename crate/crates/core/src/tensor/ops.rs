//! Elementwise, reduction, and linear-algebra ops with backward rules.

use super::{Arr, Var};
use ndarray::{Array2, ArrayD, ArrayViewD, Axis, IxDyn};

/// NumPy-style broadcast shape of two shapes.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

fn broadcast_view<'a>(a: &'a Arr, shape: &[usize]) -> ArrayViewD<'a, f64> {
    a.broadcast(IxDyn(shape))
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", a.shape(), shape))
}

/// Sum `grad` down to `shape` by collapsing axes that were broadcast.
pub(crate) fn reduce_to_shape(grad: &Arr, shape: &[usize]) -> Arr {
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, (&gd, &sd)) in g.shape().to_vec().iter().zip(shape).enumerate() {
        if sd == 1 && gd != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn binary(
    a: &Var,
    b: &Var,
    forward: impl Fn(&ArrayViewD<f64>, &ArrayViewD<f64>) -> Arr,
    backward: impl Fn(&Arr, &Arr, &Arr) -> (Arr, Arr) + 'static,
) -> Var {
    let shape = broadcast_shape(&a.shape(), &b.shape());
    let value = a.with_value(|av| {
        b.with_value(|bv| forward(&broadcast_view(av, &shape), &broadcast_view(bv, &shape)))
    });
    let (ac, bc) = (a.clone(), b.clone());
    Var::from_op(
        value,
        vec![a.clone(), b.clone()],
        Box::new(move |grad| {
            let av = ac.0.value.borrow();
            let bv = bc.0.value.borrow();
            let (ga, gb) = backward(grad, &av, &bv);
            vec![
                Some(reduce_to_shape(&ga, av.shape())),
                Some(reduce_to_shape(&gb, bv.shape())),
            ]
        }),
    )
}

fn unary(
    a: &Var,
    forward: impl Fn(&Arr) -> Arr,
    backward: impl Fn(&Arr, &Arr) -> Arr + 'static,
) -> Var {
    let value = a.with_value(|av| forward(av));
    let ac = a.clone();
    Var::from_op(
        value,
        vec![a.clone()],
        Box::new(move |grad| {
            let av = ac.0.value.borrow();
            vec![Some(backward(grad, &av))]
        }),
    )
}

impl Var {
    pub fn add(&self, other: &Var) -> Var {
        binary(
            self,
            other,
            |a, b| a + b,
            |g, _, _| (g.clone(), g.clone()),
        )
    }

    pub fn sub(&self, other: &Var) -> Var {
        binary(self, other, |a, b| a - b, |g, _, _| (g.clone(), -g))
    }

    pub fn mul(&self, other: &Var) -> Var {
        binary(
            self,
            other,
            |a, b| a * b,
            |g, av, bv| {
                let shape = broadcast_shape(av.shape(), bv.shape());
                let ga = g * &broadcast_view(bv, &shape);
                let gb = g * &broadcast_view(av, &shape);
                (ga, gb)
            },
        )
    }

    pub fn div(&self, other: &Var) -> Var {
        binary(
            self,
            other,
            |a, b| a / b,
            |g, av, bv| {
                let shape = broadcast_shape(av.shape(), bv.shape());
                let bb = broadcast_view(bv, &shape);
                let ab = broadcast_view(av, &shape);
                let ga = g / &bb;
                let gb = -(g * &ab) / (&bb * &bb);
                (ga, gb)
            },
        )
    }

    pub fn neg(&self) -> Var {
        unary(self, |a| -a, |g, _| -g)
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        unary(self, move |a| a + s, |g, _| g.clone())
    }

    pub fn mul_scalar(&self, s: f64) -> Var {
        unary(self, move |a| a * s, move |g, _| g * s)
    }

    /// Elementwise x^p for constant p.
    pub fn pow_scalar(&self, p: f64) -> Var {
        unary(
            self,
            move |a| a.mapv(|x| x.powf(p)),
            move |g, a| g * &a.mapv(|x| p * x.powf(p - 1.0)),
        )
    }

    pub fn square(&self) -> Var {
        unary(self, |a| a * a, |g, a| g * &(a * 2.0))
    }

    pub fn exp(&self) -> Var {
        unary(
            self,
            |a| a.mapv(f64::exp),
            |g, a| g * &a.mapv(f64::exp),
        )
    }

    pub fn ln(&self) -> Var {
        unary(self, |a| a.mapv(f64::ln), |g, a| g / a)
    }

    pub fn sqrt(&self) -> Var {
        unary(
            self,
            |a| a.mapv(f64::sqrt),
            |g, a| g / &a.mapv(|x| 2.0 * x.sqrt()),
        )
    }

    /// |x| with subgradient 0 at x = 0.
    pub fn abs(&self) -> Var {
        unary(
            self,
            |a| a.mapv(f64::abs),
            |g, a| g * &a.mapv(|x| x.signum() * f64::from(u8::from(x != 0.0))),
        )
    }

    pub fn relu(&self) -> Var {
        unary(
            self,
            |a| a.mapv(|x| x.max(0.0)),
            |g, a| g * &a.mapv(|x| f64::from(u8::from(x > 0.0))),
        )
    }

    /// max(x, c). Gradient passes where x > c.
    pub fn clamp_min(&self, c: f64) -> Var {
        unary(
            self,
            move |a| a.mapv(|x| x.max(c)),
            move |g, a| g * &a.mapv(|x| f64::from(u8::from(x > c))),
        )
    }

    /// min(x, c). Gradient passes where x < c.
    pub fn clamp_max(&self, c: f64) -> Var {
        unary(
            self,
            move |a| a.mapv(|x| x.min(c)),
            move |g, a| g * &a.mapv(|x| f64::from(u8::from(x < c))),
        )
    }

    /// Numerically stable logistic sigmoid.
    pub fn sigmoid(&self) -> Var {
        unary(
            self,
            |a| a.mapv(stable_sigmoid),
            |g, a| {
                g * &a.mapv(|x| {
                    let s = stable_sigmoid(x);
                    s * (1.0 - s)
                })
            },
        )
    }

    pub fn sum_all(&self) -> Var {
        let ac = self.clone();
        let value = self.with_value(|a| ndarray::arr0(a.sum()).into_dyn());
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |grad| {
                let shape = ac.0.value.borrow().shape().to_vec();
                let g = grad.iter().next().copied().unwrap_or(0.0);
                vec![Some(ArrayD::from_elem(IxDyn(&shape), g))]
            }),
        )
    }

    pub fn mean_all(&self) -> Var {
        let n = self.with_value(|a| a.len());
        self.sum_all().mul_scalar(1.0 / n as f64)
    }

    /// Sum over the given axes. `keepdims` keeps collapsed axes as size 1.
    pub fn sum_axes(&self, axes: &[usize], keepdims: bool) -> Var {
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        let in_shape = self.shape();
        let value = self.with_value(|a| {
            let mut out = a.clone();
            for &ax in axes.iter().rev() {
                out = out.sum_axis(Axis(ax));
            }
            if keepdims {
                for &ax in &axes {
                    out = out.insert_axis(Axis(ax));
                }
            }
            out
        });
        let axes_b = axes.clone();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |grad| {
                let mut g = grad.clone();
                if !keepdims {
                    for &ax in &axes_b {
                        g = g.insert_axis(Axis(ax));
                    }
                }
                let gb = broadcast_view(&g, &in_shape).to_owned();
                vec![Some(gb)]
            }),
        )
    }

    pub fn mean_axes(&self, axes: &[usize], keepdims: bool) -> Var {
        let shape = self.shape();
        let n: usize = axes.iter().map(|&ax| shape[ax]).product();
        self.sum_axes(axes, keepdims).mul_scalar(1.0 / n as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let in_shape = self.shape();
        assert_eq!(
            in_shape.iter().product::<usize>(),
            shape.iter().product::<usize>(),
            "reshape size mismatch {in_shape:?} -> {shape:?}"
        );
        let value = self.with_value(|a| {
            a.to_owned()
                .into_shape_with_order(IxDyn(shape))
                .expect("reshape")
        });
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |grad| {
                let g = grad
                    .to_owned()
                    .into_shape_with_order(IxDyn(&in_shape))
                    .expect("reshape grad");
                vec![Some(g)]
            }),
        )
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Var) -> Var {
        let (a2, b2) = (as_2d(&self.value()), as_2d(&other.value()));
        let value = a2.dot(&b2).into_dyn();
        let (ac, bc) = (self.clone(), other.clone());
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |grad| {
                let g = as_2d(grad);
                let a = as_2d(&ac.0.value.borrow());
                let b = as_2d(&bc.0.value.borrow());
                let ga = g.dot(&b.t()).into_dyn();
                let gb = a.t().dot(&g).into_dyn();
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    /// 2-D transpose.
    pub fn transpose2(&self) -> Var {
        let value = as_2d(&self.value()).t().to_owned().into_dyn();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |grad| vec![Some(as_2d(grad).t().to_owned().into_dyn())]),
        )
    }

    /// Concatenate along axis 0.
    pub fn concat0(parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat0 of zero tensors");
        if parts.len() == 1 {
            // Identity op keeps the graph connected without a copy of history.
            return parts[0].reshape(&parts[0].shape());
        }
        let values: Vec<Arr> = parts.iter().map(Var::value).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat0 shape mismatch");
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[0]).collect();
        Var::from_op(
            value,
            parts.to_vec(),
            Box::new(move |grad| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut start = 0;
                for &len in &sizes {
                    let g = grad
                        .slice_axis(Axis(0), ndarray::Slice::from(start..start + len))
                        .to_owned();
                    out.push(Some(g));
                    start += len;
                }
                out
            }),
        )
    }

    /// Gather rows along axis 0; repeated indices are allowed.
    pub fn select_rows(&self, indices: &[usize]) -> Var {
        let idx = indices.to_vec();
        let value = self.with_value(|a| a.select(Axis(0), &idx));
        let in_shape = self.shape();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |grad| {
                let mut g = ArrayD::zeros(IxDyn(&in_shape));
                for (k, &i) in idx.iter().enumerate() {
                    let mut dst = g.index_axis_mut(Axis(0), i);
                    dst += &grad.index_axis(Axis(0), k);
                }
                vec![Some(g)]
            }),
        )
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn as_2d(a: &Arr) -> Array2<f64> {
    a.to_owned()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("expected 2-d tensor")
}

/// log(sum(exp(x), axis=1)) for a 2-d tensor, with max subtraction.
/// An optional additive constant mask (e.g. -1e30 to drop entries) is applied
/// before the reduction.
pub fn logsumexp_rows(x: &Var, mask: Option<&Arr>) -> Var {
    let masked = match mask {
        Some(m) => x.add(&Var::constant(m.clone())),
        None => x.clone(),
    };
    // Row maxima are treated as constants; their gradient contribution cancels.
    let maxes = masked.with_value(|v| {
        let v2 = as_2d(v);
        let m: Vec<f64> = v2
            .rows()
            .into_iter()
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        Array2::from_shape_vec((v2.nrows(), 1), m).unwrap().into_dyn()
    });
    let maxes = Var::constant(maxes);
    let shifted = masked.sub(&maxes).exp().sum_axes(&[1], true).ln();
    shifted.add(&maxes)
}

/// log-softmax along axis 1 of a 2-d tensor.
pub fn log_softmax_rows(x: &Var) -> Var {
    x.sub(&logsumexp_rows(x, None))
}

/// Rows scaled to unit L2 norm, with an epsilon floor on the norm.
pub fn l2_normalize_rows(x: &Var, eps: f64) -> Var {
    let norms = x.square().sum_axes(&[1], true).sqrt().clamp_min(eps);
    x.div(&norms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    #[test]
    fn broadcast_add_reduces_gradient() {
        // [2,3] + [3] -> bias grad sums over rows
        let x = Var::param(arr2(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).into_dyn());
        let b = Var::param(arr1(&[0.1, 0.2, 0.3]).into_dyn());
        let loss = x.add(&b).sum_all();
        loss.backward();
        assert_eq!(b.grad().unwrap(), arr1(&[2.0, 2.0, 2.0]).into_dyn());
        assert_eq!(x.grad().unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn matmul_grads_match_hand_computation() {
        let a = Var::param(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = Var::param(arr2(&[[5.0], [6.0]]).into_dyn());
        let loss = a.matmul(&b).sum_all();
        loss.backward();
        // dL/da = ones(2,1) . b^T
        assert_eq!(a.grad().unwrap(), arr2(&[[5.0, 6.0], [5.0, 6.0]]).into_dyn());
        // dL/db = a^T . ones(2,1)
        assert_eq!(b.grad().unwrap(), arr2(&[[4.0], [6.0]]).into_dyn());
    }

    #[test]
    fn select_rows_scatters_gradient() {
        let x = Var::param(arr2(&[[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]).into_dyn());
        let y = x.select_rows(&[0, 2, 0]);
        let loss = y.sum_all();
        loss.backward();
        assert_eq!(
            x.grad().unwrap(),
            arr2(&[[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]]).into_dyn()
        );
    }

    #[test]
    fn logsumexp_is_stable_for_large_values() {
        let x = Var::constant(arr2(&[[1000.0, 1000.0]]).into_dyn());
        let v = logsumexp_rows(&x, None).scalar_value();
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn l2_normalize_rows_has_unit_norm() {
        let x = Var::param(arr2(&[[3.0, 4.0], [0.5, 0.0]]).into_dyn());
        let n = l2_normalize_rows(&x, 1e-12);
        let v = as_2d(&n.value());
        for row in v.rows() {
            let norm: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }
}
