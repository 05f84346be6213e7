//! Tensor primitives for the segmentation network: NHWC convolution via
//! im2col + gemm, 2x2 max pooling, nearest-neighbor upsampling, channel
//! concatenation, and the pointwise activations.
//!
//! Everything is generic over f32/f64 so the same code path serves training
//! and the float64 gradient checks.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayViewD, Axis, s};

use crate::error::{Error, Result};

/// Element type of network tensors.
pub trait Scalar: ndarray::NdFloat + num_traits::FromPrimitive {
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to network scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

// cols layout: row = y * w + x, column = ((ky * kw) + kx) * c + ci,
// zero padding outside the input ("same" output size, stride 1).
fn im2col<F: Scalar>(x: &[F], h: usize, w: usize, c: usize, kh: usize, kw: usize) -> Array2<F> {
    let pad_y = kh / 2;
    let pad_x = kw / 2;
    let k = kh * kw * c;
    let mut cols = Array2::<F>::zeros((h * w, k));
    let flat = cols.as_slice_mut().expect("freshly allocated is contiguous");
    for y in 0..h {
        for x_out in 0..w {
            let row_base = (y * w + x_out) * k;
            for ky in 0..kh {
                let sy = y as isize + ky as isize - pad_y as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let sx = x_out as isize + kx as isize - pad_x as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = ((sy as usize) * w + sx as usize) * c;
                    let dst = row_base + (ky * kw + kx) * c;
                    flat[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    cols
}

// Scatter-add of a cols gradient back onto the input grid; exact adjoint of
// im2col.
fn col2im_add<F: Scalar>(
    g_cols: &Array2<F>,
    gx: &mut [F],
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
) {
    let pad_y = kh / 2;
    let pad_x = kw / 2;
    let k = kh * kw * c;
    let flat = g_cols.as_slice().expect("gemm output is contiguous");
    for y in 0..h {
        for x_out in 0..w {
            let row_base = (y * w + x_out) * k;
            for ky in 0..kh {
                let sy = y as isize + ky as isize - pad_y as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let sx = x_out as isize + kx as isize - pad_x as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = ((sy as usize) * w + sx as usize) * c;
                    let src = row_base + (ky * kw + kx) * c;
                    for ci in 0..c {
                        gx[dst + ci] = gx[dst + ci] + flat[src + ci];
                    }
                }
            }
        }
    }
}

fn kernel_dims(w: &ArrayViewD<'_, impl Scalar>) -> Result<(usize, usize, usize, usize)> {
    let shape = w.shape();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "conv kernel must be 4-d [kh, kw, cin, cout], got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

/// Same-size stride-1 convolution. x: [n, h, w, cin], kernel: [kh, kw, cin,
/// cout], bias: [cout]; output [n, h, w, cout].
pub fn conv2d<F: Scalar>(
    x: &Array4<F>,
    w: &ArrayViewD<'_, F>,
    b: &ArrayViewD<'_, F>,
) -> Result<Array4<F>> {
    let (n, h, wd, cin) = x.dim();
    let (kh, kw, kcin, cout) = kernel_dims(w)?;
    if kcin != cin {
        return Err(Error::ShapeMismatch(format!(
            "conv kernel expects {kcin} input channels, batch has {cin}"
        )));
    }
    if b.shape() != [cout] {
        return Err(Error::ShapeMismatch(format!(
            "conv bias shape {:?} != [{cout}]",
            b.shape()
        )));
    }
    let w_mat = w
        .to_shape((kh * kw * cin, cout))
        .expect("kernel is contiguous");
    let bias: Vec<F> = b.iter().copied().collect();
    let mut out = Array4::<F>::zeros((n, h, wd, cout));
    for i in 0..n {
        let xi = x.index_axis(Axis(0), i);
        let xs = xi.as_slice().expect("batch is standard layout");
        let cols = im2col(xs, h, wd, cin, kh, kw);
        let mut o = Array2::<F>::zeros((h * wd, cout));
        general_mat_mul(F::one(), &cols, &w_mat, F::zero(), &mut o);
        let os = o.as_slice_mut().unwrap();
        for r in 0..h * wd {
            for ch in 0..cout {
                os[r * cout + ch] = os[r * cout + ch] + bias[ch];
            }
        }
        out.index_axis_mut(Axis(0), i)
            .as_slice_mut()
            .unwrap()
            .copy_from_slice(os);
    }
    Ok(out)
}

/// Gradients of [`conv2d`] w.r.t. input, kernel, and bias.
pub fn conv2d_grads<F: Scalar>(
    x: &Array4<F>,
    w: &ArrayViewD<'_, F>,
    g_out: &Array4<F>,
) -> Result<(Array4<F>, ndarray::ArrayD<F>, ndarray::ArrayD<F>)> {
    let (n, h, wd, cin) = x.dim();
    let (kh, kw, _, cout) = kernel_dims(w)?;
    let w_mat = w
        .to_shape((kh * kw * cin, cout))
        .expect("kernel is contiguous");
    let mut gx = Array4::<F>::zeros((n, h, wd, cin));
    let mut gw_mat = Array2::<F>::zeros((kh * kw * cin, cout));
    let mut gb = Array1::<F>::zeros(cout);
    for i in 0..n {
        let xi = x.index_axis(Axis(0), i);
        let xs = xi.as_slice().expect("batch is standard layout");
        let cols = im2col(xs, h, wd, cin, kh, kw);
        let gi = g_out.index_axis(Axis(0), i);
        let g_mat = gi
            .to_shape((h * wd, cout))
            .expect("gradient is standard layout");
        // dW += cols^T . g
        general_mat_mul(F::one(), &cols.t(), &g_mat, F::one(), &mut gw_mat);
        // db += column sums of g
        for r in 0..h * wd {
            for ch in 0..cout {
                gb[ch] = gb[ch] + g_mat[(r, ch)];
            }
        }
        // dx = col2im(g . W^T)
        let mut g_cols = Array2::<F>::zeros((h * wd, kh * kw * cin));
        general_mat_mul(F::one(), &g_mat, &w_mat.t(), F::zero(), &mut g_cols);
        let mut gxi = gx.index_axis_mut(Axis(0), i);
        col2im_add(&g_cols, gxi.as_slice_mut().unwrap(), h, wd, cin, kh, kw);
    }
    let gw = gw_mat
        .into_shape_with_order(ndarray::IxDyn(&[kh, kw, cin, cout]))
        .expect("same element count");
    Ok((gx, gw, gb.into_dyn()))
}

pub fn relu<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

/// In-place g *= (out > 0), where `out` is the ReLU output.
pub fn relu_grad_inplace<F: Scalar>(g: &mut Array4<F>, out: &Array4<F>) {
    ndarray::Zip::from(g).and(out).for_each(|gv, ov| {
        if !(*ov > F::zero()) {
            *gv = F::zero();
        }
    });
}

/// 2x2 max pooling, stride 2. Returns the pooled map and the winning corner
/// (dy * 2 + dx) per output element; ties go to the first maximum.
pub fn maxpool2<F: Scalar>(x: &Array4<F>) -> Result<(Array4<F>, Vec<u8>)> {
    let (n, h, w, c) = x.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "maxpool2 needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array4::<F>::zeros((n, oh, ow, c));
    let mut idx = vec![0u8; n * oh * ow * c];
    let xs = x.as_slice().expect("standard layout");
    let os = out.as_slice_mut().unwrap();
    for i in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = F::neg_infinity();
                    let mut best_k = 0u8;
                    for k in 0..4u8 {
                        let sy = oy * 2 + (k / 2) as usize;
                        let sx = ox * 2 + (k % 2) as usize;
                        let v = xs[((i * h + sy) * w + sx) * c + ch];
                        if v > best {
                            best = v;
                            best_k = k;
                        }
                    }
                    let o = ((i * oh + oy) * ow + ox) * c + ch;
                    os[o] = best;
                    idx[o] = best_k;
                }
            }
        }
    }
    Ok((out, idx))
}

pub fn maxpool2_grad<F: Scalar>(
    g_out: &Array4<F>,
    idx: &[u8],
    in_shape: (usize, usize, usize, usize),
) -> Array4<F> {
    let (n, h, w, c) = in_shape;
    let (_, oh, ow, _) = g_out.dim();
    let mut gx = Array4::<F>::zeros(in_shape);
    let gs = g_out.as_slice().expect("standard layout");
    let gxs = gx.as_slice_mut().unwrap();
    for i in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let o = ((i * oh + oy) * ow + ox) * c + ch;
                    let k = idx[o];
                    let sy = oy * 2 + (k / 2) as usize;
                    let sx = ox * 2 + (k % 2) as usize;
                    let d = ((i * h + sy) * w + sx) * c + ch;
                    gxs[d] = gxs[d] + gs[o];
                }
            }
        }
    }
    gx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    let (n, h, w, c) = x.dim();
    let mut out = Array4::<F>::zeros((n, h * 2, w * 2, c));
    let xs = x.as_slice().expect("standard layout");
    let os = out.as_slice_mut().unwrap();
    for i in 0..n {
        for y in 0..h * 2 {
            let sy = y / 2;
            for xo in 0..w * 2 {
                let sx = xo / 2;
                let src = ((i * h + sy) * w + sx) * c;
                let dst = ((i * h * 2 + y) * w * 2 + xo) * c;
                os[dst..dst + c].copy_from_slice(&xs[src..src + c]);
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sum each 2x2 output block into its source pixel.
pub fn upsample2_grad<F: Scalar>(g_out: &Array4<F>) -> Array4<F> {
    let (n, h2, w2, c) = g_out.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array4::<F>::zeros((n, h, w, c));
    let gs = g_out.as_slice().expect("standard layout");
    let gxs = gx.as_slice_mut().unwrap();
    for i in 0..n {
        for y in 0..h2 {
            let sy = y / 2;
            for xo in 0..w2 {
                let sx = xo / 2;
                let src = ((i * h2 + y) * w2 + xo) * c;
                let dst = ((i * h + sy) * w + sx) * c;
                for ci in 0..c {
                    gxs[dst + ci] = gxs[dst + ci] + gs[src + ci];
                }
            }
        }
    }
    gx
}

/// Concatenate along the channel axis: [a | b]. The result is in standard
/// layout (ndarray's concatenate is not).
pub fn concat_channels<F: Scalar>(a: &Array4<F>, b: &Array4<F>) -> Result<Array4<F>> {
    let cat = ndarray::concatenate(Axis(3), &[a.view(), b.view()])
        .map_err(|e| Error::ShapeMismatch(format!("channel concat: {e}")))?;
    Ok(cat.as_standard_layout().into_owned())
}

/// Split a channel-concatenated gradient back into its two parts.
pub fn split_channels<F: Scalar>(g: &Array4<F>, c_first: usize) -> (Array4<F>, Array4<F>) {
    let a = g.slice(s![.., .., .., ..c_first]).to_owned();
    let b = g.slice(s![.., .., .., c_first..]).to_owned();
    (a, b)
}

pub fn sigmoid<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    x.mapv(|v| F::one() / (F::one() + (-v).exp()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn kernel<F: Scalar>(kh: usize, kw: usize, cin: usize, cout: usize, vals: &[f64]) -> ArrayD<F> {
        ArrayD::from_shape_vec(
            IxDyn(&[kh, kw, cin, cout]),
            vals.iter().map(|v| F::from_f64_lossy(*v)).collect(),
        )
        .unwrap()
    }

    // direct nested-loop convolution oracle (zero padding, stride 1)
    fn conv_oracle(
        x: &Array4<f64>,
        w: &ArrayD<f64>,
        b: &ArrayD<f64>,
    ) -> Array4<f64> {
        let (n, h, wd, cin) = x.dim();
        let sh = w.shape();
        let (kh, kw, cout) = (sh[0], sh[1], sh[3]);
        let (py, px) = (kh as isize / 2, kw as isize / 2);
        let mut out = Array4::<f64>::zeros((n, h, wd, cout));
        for i in 0..n {
            for y in 0..h as isize {
                for xo in 0..wd as isize {
                    for co in 0..cout {
                        let mut acc = b[co];
                        for ky in 0..kh as isize {
                            for kx in 0..kw as isize {
                                let sy = y + ky - py;
                                let sx = xo + kx - px;
                                if sy < 0 || sy >= h as isize || sx < 0 || sx >= wd as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    acc += x[(i, sy as usize, sx as usize, ci)]
                                        * w[[ky as usize, kx as usize, ci, co]];
                                }
                            }
                        }
                        out[(i, y as usize, xo as usize, co)] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_direct_oracle() {
        let x = Array4::from_shape_fn((2, 5, 4, 3), |(i, y, x, c)| {
            ((i * 100 + y * 10 + x * 3 + c) as f64 * 0.017).sin()
        });
        let w = ArrayD::from_shape_fn(IxDyn(&[3, 3, 3, 2]), |ix| {
            ((ix[0] * 27 + ix[1] * 9 + ix[2] * 2 + ix[3]) as f64 * 0.13).cos()
        });
        let b = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.1, -0.2]).unwrap();
        let got = conv2d(&x, &w.view(), &b.view()).unwrap();
        let expect = conv_oracle(&x, &w, &b);
        for (g, e) in got.iter().zip(expect.iter()) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn conv2d_grads_match_finite_differences() {
        let x = Array4::from_shape_fn((1, 4, 4, 2), |(_, y, x, c)| {
            ((y * 8 + x * 2 + c) as f64 * 0.11).sin()
        });
        let w = ArrayD::from_shape_fn(IxDyn(&[3, 3, 2, 2]), |ix| {
            ((ix[0] * 12 + ix[1] * 4 + ix[2] * 2 + ix[3]) as f64 * 0.07).cos() * 0.3
        });
        let b = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.05, -0.03]).unwrap();
        // scalar objective: sum of squares of the output
        let f = |x: &Array4<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>| -> f64 {
            conv2d(x, &w.view(), &b.view())
                .unwrap()
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
        };
        let out = conv2d(&x, &w.view(), &b.view()).unwrap();
        let g_out = out.mapv(|v| 2.0 * v);
        let (gx, gw, gb) = conv2d_grads(&x, &w.view(), &g_out).unwrap();
        let h = 1e-6;
        // spot-check a few coordinates of each gradient
        for (flat, analytic) in [(3usize, &gx), (11, &gx)].into_iter() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[flat] += h;
            xm.as_slice_mut().unwrap()[flat] -= h;
            let num = (f(&xp, &w, &b) - f(&xm, &w, &b)) / (2.0 * h);
            let got = analytic.as_slice().unwrap()[flat];
            assert!((num - got).abs() < 1e-5, "gx[{flat}] {num} vs {got}");
        }
        for flat in [0usize, 7, 20] {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp.as_slice_mut().unwrap()[flat] += h;
            wm.as_slice_mut().unwrap()[flat] -= h;
            let num = (f(&x, &wp, &b) - f(&x, &wm, &b)) / (2.0 * h);
            let got = gw.as_slice().unwrap()[flat];
            assert!((num - got).abs() < 1e-5, "gw[{flat}] {num} vs {got}");
        }
        let mut bp = b.clone();
        bp.as_slice_mut().unwrap()[0] += h;
        let mut bm = b.clone();
        bm.as_slice_mut().unwrap()[0] -= h;
        let num = (f(&x, &w, &bp) - f(&x, &w, &bm)) / (2.0 * h);
        assert!((num - gb.as_slice().unwrap()[0]).abs() < 1e-5);
    }

    #[test]
    fn maxpool_tracks_argmax_and_routes_gradient() {
        let x = Array4::from_shape_vec(
            (1, 2, 2, 1),
            vec![1.0f64, 5.0, 2.0, 3.0],
        )
        .unwrap();
        let (out, idx) = maxpool2(&x).unwrap();
        assert_eq!(out[(0, 0, 0, 0)], 5.0);
        assert_eq!(idx[0], 1); // top-right corner
        let g = Array4::from_elem((1, 1, 1, 1), 2.5);
        let gx = maxpool2_grad(&g, &idx, (1, 2, 2, 1));
        assert_eq!(gx[(0, 0, 1, 0)], 2.5);
        assert_eq!(gx[(0, 0, 0, 0)], 0.0);
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let x = Array4::<f64>::zeros((1, 3, 4, 1));
        assert!(maxpool2(&x).is_err());
    }

    #[test]
    fn upsample_round_trip_adjoint() {
        let x = Array4::from_shape_fn((1, 2, 3, 2), |(_, y, xo, c)| (y * 6 + xo * 2 + c) as f64);
        let up = upsample2(&x);
        assert_eq!(up.dim(), (1, 4, 6, 2));
        assert_eq!(up[(0, 3, 5, 1)], x[(0, 1, 2, 1)]);
        // adjoint sums each 2x2 block
        let g = Array4::from_elem((1, 4, 6, 2), 1.0);
        let gx = upsample2_grad(&g);
        assert!(gx.iter().all(|v| *v == 4.0));
    }

    #[test]
    fn concat_and_split_are_inverse() {
        let a = Array4::from_elem((1, 2, 2, 3), 1.0f64);
        let b = Array4::from_elem((1, 2, 2, 2), 2.0f64);
        let cat = concat_channels(&a, &b).unwrap();
        assert_eq!(cat.dim(), (1, 2, 2, 5));
        let (ga, gb) = split_channels(&cat, 3);
        assert_eq!(ga, a);
        assert_eq!(gb, b);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let x = Array4::<f32>::zeros((1, 2, 2, 1));
        let s = sigmoid(&x);
        assert!(s.iter().all(|v| *v == 0.5));
    }

    #[test]
    fn relu_grad_masks_negative_outputs() {
        let x = Array4::from_shape_vec((1, 1, 2, 1), vec![-1.0f64, 2.0]).unwrap();
        let out = relu(&x);
        let mut g = Array4::from_elem((1, 1, 2, 1), 3.0);
        relu_grad_inplace(&mut g, &out);
        assert_eq!(g.as_slice().unwrap(), &[0.0, 3.0]);
    }

    #[test]
    fn f32_kernel_path_compiles_and_runs() {
        let x = Array4::<f32>::from_elem((1, 4, 4, 1), 1.0);
        let w = kernel::<f32>(1, 1, 1, 1, &[2.0]);
        let b = ArrayD::from_shape_vec(IxDyn(&[1]), vec![0.5f32]).unwrap();
        let out = conv2d(&x, &w.view(), &b.view()).unwrap();
        assert!(out.iter().all(|v| (*v - 2.5).abs() < 1e-6));
    }
}
