//! 2-D cross-correlation (no kernel flip) over NCHW batches.

use super::matmul::{gemm, Transpose};
use super::{Element, Tensor};
use crate::error::{arg_err, shape_err, Result};
use crate::parallel;

/// Output extent along one spatial axis: `(size + 2*padding - k) / stride + 1`.
///
/// Uses floor division, so trailing input rows that do not fill a whole
/// window are ignored.
pub fn conv_output_extent(size: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(arg_err("stride must be at least 1"));
    }
    if k == 0 {
        return Err(arg_err("kernel size must be at least 1"));
    }
    let padded = size + 2 * padding;
    if padded < k {
        return Err(shape_err(format!(
            "kernel {k} does not fit input extent {size} with padding {padding}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

struct Geometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

fn geometry<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Geometry> {
    if input.rank() != 4 {
        return Err(shape_err(format!(
            "conv input must be NCHW, got {:?}",
            input.shape()
        )));
    }
    if weight.rank() != 4 || weight.dim(2) != weight.dim(3) {
        return Err(shape_err(format!(
            "conv weight must be (c_out, c_in, k, k), got {:?}",
            weight.shape()
        )));
    }
    let (n, c_in, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    if weight.dim(1) != c_in {
        return Err(shape_err(format!(
            "input has {c_in} channels but weight expects {}",
            weight.dim(1)
        )));
    }
    let k = weight.dim(2);
    let oh = conv_output_extent(h, k, stride, padding)?;
    let ow = conv_output_extent(w, k, stride, padding)?;
    Ok(Geometry {
        n,
        c_in,
        h,
        w,
        c_out: weight.dim(0),
        k,
        oh,
        ow,
    })
}

/// Unfold one `c x h x w` image into a `(c*k*k) x (oh*ow)` patch matrix.
///
/// Row `(j*k + ky)*k + kx` matches the flattening of a `(c_out, c_in, k, k)`
/// weight, so `weight_matrix * patches` is the convolution.
pub fn im2col<T: Element>(
    image: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<Vec<T>> {
    let oh = conv_output_extent(h, k, stride, padding)?;
    let ow = conv_output_extent(w, k, stride, padding)?;
    assert_eq!(image.len(), c * h * w, "im2col: image length");
    let plane = oh * ow;
    let mut cols = vec![T::zero(); c * k * k * plane];
    for j in 0..c {
        let src = &image[j * h * w..(j + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (j * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Ok(cols)
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back onto an image.
pub fn col2im<T: Element>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<Vec<T>> {
    let oh = conv_output_extent(h, k, stride, padding)?;
    let ow = conv_output_extent(w, k, stride, padding)?;
    let plane = oh * ow;
    assert_eq!(cols.len(), c * k * k * plane, "col2im: column length");
    let mut image = vec![T::zero(); c * h * w];
    for j in 0..c {
        let dst = &mut image[j * h * w..(j + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (j * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    Ok(image)
}

fn check_bias<T>(bias: Option<&[T]>, c_out: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != c_out => Err(shape_err(format!(
            "bias has {} entries for {c_out} output channels",
            b.len()
        ))),
        _ => Ok(()),
    }
}

/// Convolution via patch unfolding and a matrix product.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = geometry(input, weight, stride, padding)?;
    check_bias(bias, g.c_out)?;
    let in_len = g.c_in * g.h * g.w;
    let plane = g.oh * g.ow;
    let out_len = g.c_out * plane;
    let ckk = g.c_in * g.k * g.k;
    let mut out = vec![T::zero(); g.n * out_len];
    parallel::for_each_chunk(&mut out, out_len.max(1), |s, dst| {
        let image = &input.data()[s * in_len..(s + 1) * in_len];
        let cols = im2col(image, g.c_in, g.h, g.w, g.k, stride, padding)
            .expect("geometry already validated");
        gemm(
            Transpose::No,
            Transpose::No,
            g.c_out,
            plane,
            ckk,
            weight.data(),
            &cols,
            dst,
            false,
        );
        if let Some(b) = bias {
            for (row, &bi) in dst.chunks_exact_mut(plane.max(1)).zip(b) {
                row.iter_mut().for_each(|v| *v += bi);
            }
        }
    });
    Tensor::new(&[g.n, g.c_out, g.oh, g.ow], out)
}

/// Reference convolution by explicit nested loops.
pub fn conv2d_direct<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = geometry(input, weight, stride, padding)?;
    check_bias(bias, g.c_out)?;
    let x = input.data();
    let wt = weight.data();
    let mut out = Tensor::zeros(&[g.n, g.c_out, g.oh, g.ow]);
    let o = out.data_mut();
    for s in 0..g.n {
        for i in 0..g.c_out {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = T::zero();
                    for j in 0..g.c_in {
                        for ky in 0..g.k {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for kx in 0..g.k {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                let xv = x[((s * g.c_in + j) * g.h + iy as usize) * g.w
                                    + ix as usize];
                                let wv = wt[((i * g.c_in + j) * g.k + ky) * g.k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    if let Some(b) = bias {
                        acc += b[i];
                    }
                    o[((s * g.c_out + i) * g.oh + oy) * g.ow + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T = f32> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

/// Gradients of [`conv2d`] with respect to input, weight and bias, given the
/// upstream gradient of its output.
pub fn conv2d_grads<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_output: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGrads<T>> {
    let g = geometry(input, weight, stride, padding)?;
    let expected = [g.n, g.c_out, g.oh, g.ow];
    if grad_output.shape() != expected {
        return Err(shape_err(format!(
            "grad_output {:?} does not match conv output {expected:?}",
            grad_output.shape()
        )));
    }
    let in_len = g.c_in * g.h * g.w;
    let plane = g.oh * g.ow;
    let out_len = g.c_out * plane;
    let ckk = g.c_in * g.k * g.k;

    let per_sample = parallel::map_indexed(g.n, |s| {
        let image = &input.data()[s * in_len..(s + 1) * in_len];
        let go = &grad_output.data()[s * out_len..(s + 1) * out_len];
        let cols = im2col(image, g.c_in, g.h, g.w, g.k, stride, padding)
            .expect("geometry already validated");
        let mut gw = vec![T::zero(); g.c_out * ckk];
        gemm(
            Transpose::No,
            Transpose::Yes,
            g.c_out,
            ckk,
            plane,
            go,
            &cols,
            &mut gw,
            false,
        );
        let mut gcols = vec![T::zero(); ckk * plane];
        gemm(
            Transpose::Yes,
            Transpose::No,
            ckk,
            plane,
            g.c_out,
            weight.data(),
            go,
            &mut gcols,
            false,
        );
        let gi = col2im(&gcols, g.c_in, g.h, g.w, g.k, stride, padding)
            .expect("geometry already validated");
        let gb: Vec<T> = go
            .chunks_exact(plane.max(1))
            .map(|row| row.iter().copied().sum())
            .collect();
        (gi, gw, gb)
    });

    let mut grad_input = Vec::with_capacity(g.n * in_len);
    let mut grad_weight = vec![T::zero(); g.c_out * ckk];
    let mut grad_bias = vec![T::zero(); g.c_out];
    for (gi, gw, gb) in per_sample {
        grad_input.extend_from_slice(&gi);
        for (a, b) in grad_weight.iter_mut().zip(&gw) {
            *a += *b;
        }
        for (a, b) in grad_bias.iter_mut().zip(&gb) {
            *a += *b;
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(&[g.n, g.c_in, g.h, g.w], grad_input)?,
        weight: Tensor::new(weight.shape(), grad_weight)?,
        bias: grad_bias,
    })
}
