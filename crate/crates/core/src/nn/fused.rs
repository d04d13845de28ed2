//! Single-pass CPU kernels for the elementwise layers that dominate generator cost
//! when composed from broadcast tensor ops.
//!
//! `leaky_relu` and `upsample2` stay differentiable to any order. `pixel_norm`, `prelu`
//! and `tanh` return plain constant gradients, which is enough for the generators that
//! use them (no penalty term differentiates through a generator).

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};

fn slice<'a>(storage: &'a CpuStorage, layout: &Layout, name: &str) -> candle_core::Result<&'a [f32]> {
    let data = storage.as_slice::<f32>()?;
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("{name} needs a contiguous input"),
    }
}

fn nchw(layout: &Layout) -> candle_core::Result<(usize, usize, usize)> {
    let (n, c, h, w) = layout.shape().dims4()?;
    Ok((n, c, h * w))
}

fn constant(data: Vec<f32>, like: &Tensor) -> candle_core::Result<Tensor> {
    Tensor::from_vec(data, like.shape(), like.device())
}

const LEAK: f32 = 0.2;

struct LeakyRelu;

/// `grad * leak'(x)`; linear in `grad`, so it is its own derivative there.
struct LeakyMask;

impl CustomOp1 for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky-relu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = slice(s, l, self.name())?;
        let out = x.iter().map(|&v| if v > 0.0 { v } else { LEAK * v }).collect();
        Ok((CpuStorage::F32(out), l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op2(arg, LeakyMask)?))
    }
}

impl CustomOp2 for LeakyMask {
    fn name(&self) -> &'static str {
        "leaky-mask"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = slice(s1, l1, self.name())?;
        let x = slice(s2, l2, self.name())?;
        let out = g.iter().zip(x).map(|(&g, &v)| if v > 0.0 { g } else { LEAK * g }).collect();
        Ok((CpuStorage::F32(out), l1.shape().clone()))
    }

    fn bwd(
        &self,
        _g: &Tensor,
        x: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        // backprop visits every tracked ancestor, so `x` needs an explicit zero
        Ok((Some(grad.contiguous()?.apply_op2(x, LeakyMask)?), Some(x.zeros_like()?)))
    }
}

pub(crate) fn leaky_relu(xs: &Tensor) -> candle_core::Result<Tensor> {
    xs.contiguous()?.apply_op1(LeakyRelu)
}

/// Nearest-neighbour ×2 upsampling and its adjoint (2×2 block sums).
struct Upsample2;
struct BlockSum2;

impl CustomOp1 for Upsample2 {
    fn name(&self) -> &'static str {
        "upsample2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = slice(s, l, self.name())?;
        let (n, c, h, w) = l.shape().dims4()?;
        let mut out = vec![0f32; x.len() * 4];
        for (plane, src) in x.chunks_exact(h * w).enumerate() {
            let dst = &mut out[plane * h * w * 4..(plane + 1) * h * w * 4];
            for i in 0..h {
                for j in 0..w {
                    let v = src[i * w + j];
                    let o = 2 * i * 2 * w + 2 * j;
                    dst[o] = v;
                    dst[o + 1] = v;
                    dst[o + 2 * w] = v;
                    dst[o + 2 * w + 1] = v;
                }
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((n, c, 2 * h, 2 * w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(BlockSum2)?))
    }
}

impl CustomOp1 for BlockSum2 {
    fn name(&self) -> &'static str {
        "block-sum2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = slice(s, l, self.name())?;
        let (n, c, h2, w2) = l.shape().dims4()?;
        let (h, w) = (h2 / 2, w2 / 2);
        let mut out = vec![0f32; n * c * h * w];
        for (plane, src) in x.chunks_exact(h2 * w2).enumerate() {
            for i in 0..h {
                for j in 0..w {
                    let o = 2 * i * w2 + 2 * j;
                    out[plane * h * w + i * w + j] = src[o] + src[o + 1] + src[o + w2] + src[o + w2 + 1];
                }
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((n, c, h, w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Upsample2)?))
    }
}

pub(crate) fn upsample2(xs: &Tensor) -> candle_core::Result<Tensor> {
    xs.contiguous()?.apply_op1(Upsample2)
}

const PIXEL_EPS: f32 = 1e-8;

struct PixelNorm;

impl PixelNorm {
    /// `1 / sqrt(mean_c x² + eps)` for every `(n, pixel)`.
    fn inv_norms(x: &[f32], n: usize, c: usize, hw: usize) -> Vec<f32> {
        let mut sums = vec![0f32; n * hw];
        for b in 0..n {
            for ch in 0..c {
                let plane = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for (s, &v) in sums[b * hw..(b + 1) * hw].iter_mut().zip(plane) {
                    *s += v * v;
                }
            }
        }
        sums.iter().map(|&s| 1.0 / (s / c as f32 + PIXEL_EPS).sqrt()).collect()
    }
}

impl CustomOp1 for PixelNorm {
    fn name(&self) -> &'static str {
        "pixel-norm"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = slice(s, l, self.name())?;
        let (n, c, hw) = nchw(l)?;
        let r = Self::inv_norms(x, n, c, hw);
        let mut out = x.to_vec();
        for (i, plane) in out.chunks_exact_mut(hw).enumerate() {
            let b = i / c;
            for (v, &r) in plane.iter_mut().zip(&r[b * hw..(b + 1) * hw]) {
                *v *= r;
            }
        }
        Ok((CpuStorage::F32(out), l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let x = arg.flatten_all()?.to_vec1::<f32>()?;
        let g = grad.flatten_all()?.to_vec1::<f32>()?;
        let (n, c, h, w) = arg.dims4()?;
        let hw = h * w;
        let r = Self::inv_norms(&x, n, c, hw);
        // dx = r·g − r³·x·(Σ_c g·x)/C
        let mut dot = vec![0f32; n * hw];
        for b in 0..n {
            for ch in 0..c {
                let o = (b * c + ch) * hw;
                for p in 0..hw {
                    dot[b * hw + p] += g[o + p] * x[o + p];
                }
            }
        }
        let mut dx = vec![0f32; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let o = (b * c + ch) * hw;
                for p in 0..hw {
                    let r = r[b * hw + p];
                    dx[o + p] = r * g[o + p] - r * r * r * x[o + p] * dot[b * hw + p] / c as f32;
                }
            }
        }
        Ok(Some(constant(dx, arg)?))
    }
}

pub(crate) fn pixel_norm(xs: &Tensor) -> candle_core::Result<Tensor> {
    xs.contiguous()?.apply_op1(PixelNorm)
}

/// Per-channel negative slope; the slope is a `(C,)` tensor.
struct PRelu;

impl CustomOp2 for PRelu {
    fn name(&self) -> &'static str {
        "prelu"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = slice(s1, l1, self.name())?;
        let a = slice(s2, l2, self.name())?;
        let (_, c, hw) = nchw(l1)?;
        let mut out = x.to_vec();
        for (i, plane) in out.chunks_exact_mut(hw).enumerate() {
            let a = a[i % c];
            for v in plane.iter_mut().filter(|v| **v < 0.0) {
                *v *= a;
            }
        }
        Ok((CpuStorage::F32(out), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        a: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let xv = x.flatten_all()?.to_vec1::<f32>()?;
        let av = a.to_vec1::<f32>()?;
        let g = grad.flatten_all()?.to_vec1::<f32>()?;
        let (_, c, h, w) = x.dims4()?;
        let hw = h * w;
        let mut dx = g.clone();
        let mut da = vec![0f32; c];
        for (i, (dxp, xp)) in dx.chunks_exact_mut(hw).zip(xv.chunks_exact(hw)).enumerate() {
            let ch = i % c;
            for (d, &v) in dxp.iter_mut().zip(xp) {
                if v < 0.0 {
                    da[ch] += *d * v;
                    *d *= av[ch];
                }
            }
        }
        Ok((Some(constant(dx, x)?), Some(constant(da, a)?)))
    }
}

pub(crate) fn prelu(xs: &Tensor, slope: &Tensor) -> candle_core::Result<Tensor> {
    xs.contiguous()?.apply_op2(&slope.contiguous()?, PRelu)
}

struct Tanh;

impl CustomOp1 for Tanh {
    fn name(&self) -> &'static str {
        "tanh"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = slice(s, l, self.name())?;
        Ok((CpuStorage::F32(x.iter().map(|v| v.tanh()).collect()), l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let y = res.flatten_all()?.to_vec1::<f32>()?;
        let g = grad.flatten_all()?.to_vec1::<f32>()?;
        let dx = g.iter().zip(&y).map(|(g, y)| g * (1.0 - y * y)).collect();
        Ok(Some(constant(dx, arg)?))
    }
}

pub(crate) fn tanh(xs: &Tensor) -> candle_core::Result<Tensor> {
    xs.contiguous()?.apply_op1(Tanh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn max_diff(a: &Tensor, b: &Tensor) -> f32 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar().unwrap()
    }

    fn input() -> Var {
        Var::from_tensor(&Tensor::randn(0f32, 1.0, (2, 3, 4, 5), &Device::Cpu).unwrap()).unwrap()
    }

    /// Compares value and gradient of `sum(w ⊙ f(x))` for a fixed random `w`.
    fn check(ours: impl Fn(&Tensor) -> Tensor, reference: impl Fn(&Tensor) -> Tensor, extra: &[&Var]) {
        let x = input();
        let a = ours(x.as_tensor());
        let b = reference(x.as_tensor());
        assert!(max_diff(&a, &b) < 1e-5);
        let w = Tensor::randn(0f32, 1.0, a.shape(), &Device::Cpu).unwrap();
        let ga = (&a * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let gb = (&b * &w).unwrap().sum_all().unwrap().backward().unwrap();
        for v in std::iter::once(&x).chain(extra.iter().copied()) {
            assert!(max_diff(ga.get(v.as_tensor()).unwrap(), gb.get(v.as_tensor()).unwrap()) < 1e-4);
        }
    }

    #[test]
    fn kernels_match_composed_ops() {
        check(|x| leaky_relu(x).unwrap(), |x| x.maximum(&(x * 0.2).unwrap()).unwrap(), &[]);
        check(|x| tanh(x).unwrap(), |x| x.tanh().unwrap(), &[]);
        check(
            |x| upsample2(x).unwrap(),
            |x| x.upsample_nearest2d(8, 10).unwrap(),
            &[],
        );
        check(
            |x| pixel_norm(x).unwrap(),
            |x| {
                let norm = (x.sqr().unwrap().mean_keepdim(1).unwrap() + 1e-8).unwrap().sqrt().unwrap();
                x.broadcast_div(&norm).unwrap()
            },
            &[],
        );
        let slope = Var::from_tensor(&Tensor::new(&[0.1f32, -0.3, 0.7], &Device::Cpu).unwrap()).unwrap();
        check(
            |x| prelu(x, slope.as_tensor()).unwrap(),
            |x| {
                let a = slope.as_tensor().reshape((1, 3, 1, 1)).unwrap();
                let neg = x.minimum(0f32).unwrap();
                (x.relu().unwrap() + neg.broadcast_mul(&a).unwrap()).unwrap()
            },
            &[&slope],
        );
    }

    #[test]
    fn leaky_relu_and_upsample_have_second_order_gradients() {
        super::super::enable_second_order();
        let x = input();
        let w = Var::from_tensor(&Tensor::randn(0f32, 1.0, (2, 3, 8, 10), &Device::Cpu).unwrap()).unwrap();
        let objective = |f: &dyn Fn(&Tensor) -> Tensor| {
            let z = (f(x.as_tensor()) * w.as_tensor()).unwrap();
            let out = (z.sqr().unwrap() * 0.5).unwrap().sum_all().unwrap();
            let gx = out.backward().unwrap().get(x.as_tensor()).unwrap().clone();
            gx.sqr().unwrap().sum_all().unwrap().backward().unwrap().get(w.as_tensor()).unwrap().clone()
        };
        let ours = objective(&|t| leaky_relu(&upsample2(t).unwrap()).unwrap());
        let theirs = objective(&|t| {
            let u = t.upsample_nearest2d(8, 10).unwrap();
            u.maximum(&(&u * 0.2).unwrap()).unwrap()
        });
        assert!(max_diff(&ours, &theirs) < 1e-3);
    }
}
