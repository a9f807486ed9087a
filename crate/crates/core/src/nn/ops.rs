//! Convolution and resampling kernels for the CPU backend.
//!
//! Convolution is lowered to `im2col` followed by a matmul so that both the
//! forward and backward passes run through the blocked GEMM kernel.

use candle_core::{bail, CpuStorage, CustomOp1, Layout, Result, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Visits every (column-matrix index, image index) pair that is inside the
    /// padded image, for a single batch element.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let cols = oh * ow;
        for c in 0..self.channels {
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let r = (c * self.kernel + ky) * self.kernel + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let img_row = c * self.height * self.width + iy as usize * self.width;
                        let col_row = r * cols + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.width as isize {
                                f(col_row + ox, img_row + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn contiguous_f32<'a>(s: &'a CpuStorage, l: &Layout) -> Result<&'a [f32]> {
    let data = match s {
        CpuStorage::F32(v) => v,
        _ => bail!("only f32 tensors are supported by the custom kernels"),
    };
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => bail!("custom kernels require contiguous input"),
    }
}

struct Im2Col(Geometry);
struct Col2Im(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = self.0;
        let src = contiguous_f32(s, l)?;
        let n = l.dims()[0];
        let (rows, cols) = (g.rows(), g.cols());
        let img_len = g.channels * g.height * g.width;
        let mut dst = vec![0f32; n * rows * cols];
        for b in 0..n {
            let img = &src[b * img_len..(b + 1) * img_len];
            let out = &mut dst[b * rows * cols..(b + 1) * rows * cols];
            g.for_each(|ci, ii| out[ci] = img[ii]);
        }
        Ok((CpuStorage::F32(dst), Shape::from((n, rows, cols))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = self.0;
        let src = contiguous_f32(s, l)?;
        let n = l.dims()[0];
        let (rows, cols) = (g.rows(), g.cols());
        let img_len = g.channels * g.height * g.width;
        let mut dst = vec![0f32; n * img_len];
        for b in 0..n {
            let col = &src[b * rows * cols..(b + 1) * rows * cols];
            let img = &mut dst[b * img_len..(b + 1) * img_len];
            g.for_each(|ci, ii| img[ii] += col[ci]);
        }
        Ok((
            CpuStorage::F32(dst),
            Shape::from((n, g.channels, g.height, g.width)),
        ))
    }
}

/// 2-D convolution of `x: (N, C, H, W)` with `w: (O, C, k, k)`.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (n, c, h, width) = x.dims4()?;
    let (o, wc, k, k2) = w.dims4()?;
    if wc != c || k != k2 {
        bail!("conv2d: input has {c} channels, kernel is {:?}", w.dims());
    }
    let y = if k == 1 && stride == 1 && pad == 0 {
        let wm = w.reshape((o, c))?;
        wm.broadcast_matmul(&x.reshape((n, c, h * width))?)?
            .reshape((n, o, h, width))?
    } else {
        let g = Geometry {
            channels: c,
            height: h,
            width,
            kernel: k,
            stride,
            pad,
        };
        let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
        let wm = w.reshape((o, g.rows()))?;
        wm.broadcast_matmul(&cols)?
            .reshape((n, o, g.out_h(), g.out_w()))?
    };
    match bias {
        Some(b) => y.broadcast_add(&b.reshape((1, o, 1, 1))?),
        None => Ok(y),
    }
}

struct Upsample2;
struct SumPool2;

impl CustomOp1 for Upsample2 {
    fn name(&self) -> &'static str {
        "upsample2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let src = contiguous_f32(s, l)?;
        let (n, c, h, w) = l.shape().dims4()?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut dst = vec![0f32; n * c * oh * ow];
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let out = &mut dst[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    out[y * ow + x] = plane[(y / 2) * w + x / 2];
                }
            }
        }
        Ok((CpuStorage::F32(dst), Shape::from((n, c, oh, ow))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&SumPool2)?))
    }
}

impl CustomOp1 for SumPool2 {
    fn name(&self) -> &'static str {
        "sumpool2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let src = contiguous_f32(s, l)?;
        let (n, c, h, w) = l.shape().dims4()?;
        let (oh, ow) = (h / 2, w / 2);
        let mut dst = vec![0f32; n * c * oh * ow];
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let out = &mut dst[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..h {
                for x in 0..w {
                    out[(y / 2) * ow + x / 2] += plane[y * w + x];
                }
            }
        }
        Ok((CpuStorage::F32(dst), Shape::from((n, c, oh, ow))))
    }
}

/// Nearest-neighbour upsampling by a factor of two.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Upsample2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        use rand::SeedableRng;
        use rand_distr::Distribution;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let d = rand_distr::StandardNormal;
        let v: Vec<f32> = (0..n).map(|_| d.sample(&mut rng)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_abs(a: &Tensor, b: &Tensor) -> f32 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar::<f32>()
            .unwrap()
    }

    #[test]
    fn conv_matches_reference_kernel() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0)] {
            let x = randn(&[2, 3, 9, 8], 1);
            let w = randn(&[5, 3, k, k], 2);
            let ours = conv2d(&x, &w, None, stride, pad).unwrap();
            let reference = x.conv2d(&w, pad, stride, 1, 1).unwrap();
            assert_eq!(ours.dims(), reference.dims());
            assert!(max_abs(&ours, &reference) < 1e-4, "k={k} s={stride}");
        }
    }

    #[test]
    fn conv_gradients_match_reference_kernel() {
        let x = Var::from_tensor(&randn(&[1, 4, 7, 7], 3)).unwrap();
        let w = Var::from_tensor(&randn(&[6, 4, 3, 3], 4)).unwrap();
        let probe = randn(&[1, 6, 4, 4], 5);
        let ours = (conv2d(&x, &w, None, 2, 1).unwrap() * &probe)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        let reference = (x.conv2d(&w, 1, 2, 1, 1).unwrap() * &probe)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        for v in [&x, &w] {
            let a = ours.get(v).unwrap();
            let b = reference.get(v).unwrap();
            assert!(max_abs(a, b) < 1e-4);
        }
    }

    #[test]
    fn upsample_and_its_gradient() {
        let x = Var::from_tensor(&randn(&[1, 2, 3, 4], 6)).unwrap();
        let up = upsample2(&x).unwrap();
        let reference = x.upsample_nearest2d(6, 8).unwrap();
        assert_eq!(max_abs(&up, &reference), 0.0);
        let probe = randn(&[1, 2, 6, 8], 7);
        let g = (up * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let g = g.get(&x).unwrap();
        let expected = probe
            .reshape((1, 2, 3, 2, 4, 2))
            .unwrap()
            .sum(5)
            .unwrap()
            .sum(3)
            .unwrap();
        assert!(max_abs(g, &expected) < 1e-5);
    }
}
