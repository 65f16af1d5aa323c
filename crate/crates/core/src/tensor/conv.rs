//! 2-D convolution (im2col) and nearest-neighbor upsampling.

use super::{Arr, Var};
use ndarray::{Array2, Array4, ArrayD, Dimension, Ix4, IxDyn};

fn as_4d(a: &Arr) -> Array4<f64> {
    a.to_owned()
        .into_dimensionality::<Ix4>()
        .expect("expected 4-d tensor")
}

fn out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold `[B,C,H,W]` into `[B*OH*OW, C*KH*KW]` patches.
fn im2col(x: &Array4<f64>, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let (oh, ow) = (out_dim(h, kh, stride, pad), out_dim(w, kw, stride, pad));
    let mut cols = Array2::<f64>::zeros((b * oh * ow, c * kh * kw));
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (bi * oh + oy) * ow + ox;
                let mut col = 0;
                for ci in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                cols[[row, col]] = x[[bi, ci, iy as usize, ix as usize]];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold patch gradients back onto the input, accumulating overlaps.
fn col2im(
    cols: &Array2<f64>,
    dims: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (b, c, h, w) = dims;
    let (oh, ow) = (out_dim(h, kh, stride, pad), out_dim(w, kw, stride, pad));
    let mut x = Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (bi * oh + oy) * ow + ox;
                let mut col = 0;
                for ci in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                x[[bi, ci, iy as usize, ix as usize]] += cols[[row, col]];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    x
}

/// conv2d over `[B,C,H,W]` with kernel `[F,C,KH,KW]` and optional bias `[F]`.
pub fn conv2d(input: &Var, weight: &Var, bias: Option<&Var>, stride: usize, pad: usize) -> Var {
    let x = as_4d(&input.value());
    let w = as_4d(&weight.value());
    let (b, c, h, wd) = x.dim();
    let (f, wc, kh, kw) = w.dim();
    assert_eq!(c, wc, "conv2d channel mismatch: input {c} vs kernel {wc}");
    let (oh, ow) = (out_dim(h, kh, stride, pad), out_dim(wd, kw, stride, pad));

    let cols = im2col(&x, kh, kw, stride, pad);
    let w_flat = w.to_shape((f, c * kh * kw)).expect("kernel reshape").to_owned();
    let mut out_flat = cols.dot(&w_flat.t()); // [B*OH*OW, F]
    if let Some(bias) = bias {
        let bv = bias.value();
        let b1 = bv.to_shape((1, f)).expect("bias reshape").to_owned();
        out_flat += &b1;
    }
    let out = out_flat
        .into_shape_with_order((b, oh, ow, f))
        .expect("conv output reshape")
        .permuted_axes([0, 3, 1, 2])
        .as_standard_layout()
        .to_owned()
        .into_dyn();

    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(bias) = bias {
        parents.push(bias.clone());
    }
    let has_bias = bias.is_some();
    let (ic, wc2) = (input.clone(), weight.clone());
    Var::from_op(
        out,
        parents,
        Box::new(move |grad| {
            let g = as_4d(grad); // [B,F,OH,OW]
            let g_flat = g
                .permuted_axes([0, 2, 3, 1])
                .as_standard_layout()
                .to_owned()
                .into_shape_with_order((b * oh * ow, f))
                .expect("grad reshape");
            let x = as_4d(&ic.0.value.borrow());
            let w = as_4d(&wc2.0.value.borrow());
            let cols = im2col(&x, kh, kw, stride, pad);
            let w_flat = w.to_shape((f, c * kh * kw)).expect("kernel reshape").to_owned();

            let gw = g_flat
                .t()
                .dot(&cols)
                .into_shape_with_order((f, c, kh, kw))
                .expect("weight grad reshape")
                .into_dyn();
            let gcols = g_flat.dot(&w_flat);
            let gx = col2im(&gcols, (b, c, h, wd), kh, kw, stride, pad).into_dyn();

            let mut grads = vec![Some(gx), Some(gw)];
            if has_bias {
                grads.push(Some(g_flat.sum_axis(ndarray::Axis(0)).into_dyn()));
            }
            grads
        }),
    )
}

/// Nearest-neighbor upsampling of `[..,H,W]` by integer factors.
/// Identity when both factors are 1.
pub fn upsample_nearest(input: &Var, factor_h: usize, factor_w: usize) -> Var {
    assert!(factor_h >= 1 && factor_w >= 1);
    if factor_h == 1 && factor_w == 1 {
        return input.reshape(&input.shape());
    }
    let in_shape = input.shape();
    let nd = in_shape.len();
    assert!(nd >= 2, "upsample_nearest expects spatial trailing dims");
    let (h, w) = (in_shape[nd - 2], in_shape[nd - 1]);
    let mut out_shape = in_shape.clone();
    out_shape[nd - 2] = h * factor_h;
    out_shape[nd - 1] = w * factor_w;

    let value = input.with_value(|a| {
        let mut out = ArrayD::<f64>::zeros(IxDyn(&out_shape));
        for (idx, v) in out.indexed_iter_mut() {
            let mut src = idx.slice().to_vec();
            src[nd - 2] /= factor_h;
            src[nd - 1] /= factor_w;
            *v = a[IxDyn(&src)];
        }
        out
    });
    Var::from_op(
        value,
        vec![input.clone()],
        Box::new(move |grad| {
            let mut g = ArrayD::<f64>::zeros(IxDyn(&in_shape));
            for (idx, v) in grad.indexed_iter() {
                let mut src = idx.slice().to_vec();
                src[nd - 2] /= factor_h;
                src[nd - 1] /= factor_w;
                g[IxDyn(&src)] += *v;
            }
            vec![Some(g)]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check::{finite_diff_grad, max_rel_error};
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Arr {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Array::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    #[test]
    fn conv2d_matches_direct_computation() {
        // 1x1 input channel, 1 filter, identity-ish kernel
        let x = Array::from_shape_vec((1, 1, 3, 3), (1..=9).map(f64::from).collect())
            .unwrap()
            .into_dyn();
        let w = Array::from_shape_vec((1, 1, 2, 2), vec![1.0, 0.0, 0.0, 1.0])
            .unwrap()
            .into_dyn();
        let out = conv2d(&Var::constant(x), &Var::constant(w), None, 1, 0);
        // each output = x[i,j] + x[i+1,j+1]
        assert_eq!(
            out.value().as_slice().unwrap(),
            &[6.0, 8.0, 12.0, 14.0] // 1+5, 2+6, 4+8, 5+9
        );
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = randn(&[2, 3, 5, 5], &mut rng);
        let w0 = randn(&[4, 3, 3, 3], &mut rng);
        let b0 = randn(&[4], &mut rng);

        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let run = |x: &Arr, w: &Arr, b: &Arr| -> (f64, Arr, Arr, Arr) {
                let xv = Var::param(x.clone());
                let wv = Var::param(w.clone());
                let bv = Var::param(b.clone());
                // weighted sum so the gradient is not uniform
                let out = conv2d(&xv, &wv, Some(&bv), stride, pad);
                let coeff = Var::constant(Arr::from_shape_fn(IxDyn(&out.shape()), |ix| {
                    0.3 + 0.1 * ((7 * ix.slice().iter().sum::<usize>() + 3) % 11) as f64
                }));
                let loss = out.mul(&coeff).sum_all();
                loss.backward();
                (
                    loss.scalar_value(),
                    xv.grad().unwrap(),
                    wv.grad().unwrap(),
                    bv.grad().unwrap(),
                )
            };
            let (_, gx, gw, gb) = run(&x0, &w0, &b0);
            let fx = finite_diff_grad(&x0, 1e-5, |x| run(x, &w0, &b0).0);
            let fw = finite_diff_grad(&w0, 1e-5, |w| run(&x0, w, &b0).0);
            let fb = finite_diff_grad(&b0, 1e-5, |b| run(&x0, &w0, b).0);
            assert!(max_rel_error(&gx, &fx) < 1e-6, "input grad s={stride} p={pad}");
            assert!(max_rel_error(&gw, &fw) < 1e-6, "weight grad s={stride} p={pad}");
            assert!(max_rel_error(&gb, &fb) < 1e-6, "bias grad s={stride} p={pad}");
        }
    }

    #[test]
    fn upsample_nearest_repeats_and_pools_gradient() {
        let x = Array::from_shape_vec((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0])
            .unwrap()
            .into_dyn();
        let v = Var::param(x);
        let up = upsample_nearest(&v, 2, 2);
        assert_eq!(up.shape(), vec![1, 1, 4, 4]);
        assert_eq!(up.value()[[0, 0, 0, 1]], 1.0);
        assert_eq!(up.value()[[0, 0, 3, 3]], 4.0);
        up.sum_all().backward();
        assert_eq!(v.grad().unwrap().as_slice().unwrap(), &[4.0, 4.0, 4.0, 4.0]);
    }
}
