//! Convolution as patch extraction plus one matrix product. Both custom ops are
//! each other's backward, so gradients of any order stay available.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

#[derive(Clone, Copy, Debug)]
pub(crate) struct Patches {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    /// Append one constant row after the patch rows (the bias input).
    pub bias_row: bool,
}

impl Patches {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// `(C·k·k, N·Ho·Wo)`
    fn cols_shape(&self) -> (usize, usize) {
        let (ho, wo) = self.out_hw();
        (self.c * self.k * self.k + usize::from(self.bias_row), self.n * ho * wo)
    }

    /// Calls `f(col_start, image_start, len)` for every run of in-bounds patch elements
    /// along an output row. The run covers columns `col_start..col_start + len` and image
    /// elements `image_start + i * stride`, indices into the flat column matrix and the
    /// flat `(N, C, H, W)` image.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = self.out_hw();
        let l = self.n * ho * wo;
        let (s, pad) = (self.stride, self.pad);
        for c in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = ((c * self.k + ki) * self.k + kj) * l;
                    // ox range with 0 <= ox*s + kj - pad < w
                    if kj + 1 > self.w + pad {
                        continue;
                    }
                    let lo = pad.saturating_sub(kj).div_ceil(s);
                    let hi = ((self.w + pad - kj - 1) / s + 1).min(wo);
                    if lo >= hi {
                        continue;
                    }
                    for n in 0..self.n {
                        let img = (n * self.c + c) * self.h * self.w;
                        let col = row + n * ho * wo;
                        for oy in 0..ho {
                            let iy = (oy * s + ki) as isize - pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let src = img + iy as usize * self.w + lo * s + kj - pad;
                            f(col + oy * wo + lo, src, hi - lo);
                        }
                    }
                }
            }
        }
    }
}

fn contiguous_f32<'a>(storage: &'a CpuStorage, layout: &Layout, name: &str) -> candle_core::Result<&'a [f32]> {
    let data = storage.as_slice::<f32>()?;
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("{name} needs a contiguous input"),
    }
}

/// The second field fills the bias row: one in the forward pass, zero when used as
/// the adjoint of [`Col2Im`] (that row does not reach the image).
pub(crate) struct Im2Col(pub Patches, pub f32);

pub(crate) struct Col2Im(pub Patches);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let p = self.0;
        let src = contiguous_f32(storage, layout, self.name())?;
        let (rows, cols) = p.cols_shape();
        let mut out = vec![0f32; rows * cols];
        let s = p.stride;
        p.for_each_run(|o, i, len| {
            let dst = &mut out[o..o + len];
            if s == 1 {
                dst.copy_from_slice(&src[i..i + len]);
            } else {
                for (d, v) in dst.iter_mut().zip(src[i..].iter().step_by(s)) {
                    *d = *v;
                }
            }
        });
        if p.bias_row {
            out[(rows - 1) * cols..].fill(self.1);
        }
        Ok((CpuStorage::F32(out), Shape::from((rows, cols))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let p = self.0;
        let src = contiguous_f32(storage, layout, self.name())?;
        let mut out = vec![0f32; p.n * p.c * p.h * p.w];
        let s = p.stride;
        p.for_each_run(|o, i, len| {
            let from = &src[o..o + len];
            if s == 1 {
                for (d, v) in out[i..i + len].iter_mut().zip(from) {
                    *d += *v;
                }
            } else {
                for (d, v) in out[i..].iter_mut().step_by(s).zip(from) {
                    *d += *v;
                }
            }
        });
        Ok((CpuStorage::F32(out), Shape::from((p.n, p.c, p.h, p.w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Im2Col(self.0, 0.0))?))
    }
}

/// `conv2d` of `(N, C, H, W)` input with an `(O, C, k, k)` weight and optional `(O,)` bias.
pub(crate) fn conv2d(
    xs: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> candle_core::Result<Tensor> {
    let (n, c, h, w) = xs.dims4()?;
    let (o, _, k, _) = weight.dims4()?;
    let p = Patches {
        n,
        c,
        h,
        w,
        k,
        stride,
        pad,
        bias_row: bias.is_some(),
    };
    let (ho, wo) = p.out_hw();
    let cols = xs.contiguous()?.apply_op1(Im2Col(p, 1.0))?;
    let mut w = weight.reshape((o, c * k * k))?;
    if let Some(b) = bias {
        w = Tensor::cat(&[&w, &b.reshape((o, 1))?], 1)?;
    }
    w.matmul(&cols)?
        .reshape((o, n, ho, wo))?
        .transpose(0, 1)?
        .contiguous()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn max_diff(a: &Tensor, b: &Tensor) -> f32 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar().unwrap()
    }

    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, c, h, wd) = x.dims4().unwrap();
        let (o, _, k, _) = w.dims4().unwrap();
        let xv = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let wv = w.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let (ho, wo) = ((h + 2 * pad - k) / stride + 1, (wd + 2 * pad - k) / stride + 1);
        let mut out = vec![0f32; n * o * ho * wo];
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0f32;
                        for ic in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += xv[((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                            * wv[((oc * c + ic) * k + ki) * k + kj];
                                    }
                                }
                            }
                        }
                        out[((b * o + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(out, (n, o, ho, wo), x.device()).unwrap()
    }

    #[test]
    fn matches_brute_force_convolution() {
        let d = Device::Cpu;
        for (c, o, size, k, stride, pad) in [(3, 5, 8, 3, 1, 1), (4, 2, 8, 4, 2, 1), (2, 3, 2, 4, 2, 1), (2, 2, 1, 3, 1, 1), (1, 2, 5, 5, 1, 2), (3, 4, 7, 3, 2, 0)] {
            let x = Tensor::randn(0f32, 1.0, (2, c, size, size), &d).unwrap();
            let w = Tensor::randn(0f32, 1.0, (o, c, k, k), &d).unwrap();
            let ours = conv2d(&x, &w, None, stride, pad).unwrap();
            assert!(max_diff(&ours, &naive_conv(&x, &w, stride, pad)) < 1e-4, "{c} {o} {size} {k} {stride} {pad}");
        }
    }

    #[test]
    fn matches_candle_conv_and_its_gradients() {
        super::super::enable_second_order();
        let d = Device::Cpu;
        for (c, o, size, k, stride, pad) in [(3, 5, 8, 3, 1, 1), (4, 2, 8, 4, 2, 1), (2, 3, 7, 1, 1, 0), (3, 4, 6, 3, 2, 0), (1, 2, 5, 5, 1, 2)] {
            let x = Var::from_tensor(&Tensor::randn(0f32, 1.0, (2, c, size, size), &d).unwrap()).unwrap();
            let w = Var::from_tensor(&Tensor::randn(0f32, 1.0, (o, c, k, k), &d).unwrap()).unwrap();
            let b = Var::from_tensor(&Tensor::randn(0f32, 1.0, o, &d).unwrap()).unwrap();
            let ours = conv2d(x.as_tensor(), w.as_tensor(), Some(b.as_tensor()), stride, pad).unwrap();
            let theirs = x
                .as_tensor()
                .conv2d(w.as_tensor(), pad, stride, 1, 1)
                .unwrap()
                .broadcast_add(&b.as_tensor().reshape((1, o, 1, 1)).unwrap())
                .unwrap();
            assert_eq!(ours.dims(), theirs.dims());
            assert!(max_diff(&ours, &theirs) < 1e-4);

            let ga = ours.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            let gb = theirs.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &w, &b] {
                assert!(max_diff(ga.get(v.as_tensor()).unwrap(), gb.get(v.as_tensor()).unwrap()) < 1e-3);
            }
        }
    }

    #[test]
    fn second_order_gradients_match_candle_conv() {
        super::super::enable_second_order();
        let d = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f32, 1.0, (2, 3, 8, 8), &d).unwrap()).unwrap();
        let w = Var::from_tensor(&Tensor::randn(0f32, 0.5, (4, 3, 4, 4), &d).unwrap()).unwrap();
        // penalty-like objective: |d/dx sum(tanh(conv(x)))|^2, differentiated w.r.t. w
        let objective = |f: &dyn Fn(&Tensor) -> Tensor| {
            let out = f(x.as_tensor()).tanh().unwrap().sum_all().unwrap();
            let gx = out.backward().unwrap().get(x.as_tensor()).unwrap().clone();
            let pen = gx.sqr().unwrap().sum_all().unwrap();
            pen.backward().unwrap().get(w.as_tensor()).unwrap().clone()
        };
        let ours = objective(&|t| conv2d(t, w.as_tensor(), None, 2, 1).unwrap());
        let theirs = objective(&|t| t.conv2d(w.as_tensor(), 1, 2, 1, 1).unwrap());
        assert!(max_diff(&ours, &theirs) < 1e-3);
    }
}
