//! Fused softmax over the last axis with a fused backward pass.
//!
//! Composing max, subtract, exp, sum and divide from tensor primitives costs
//! five passes and as many temporaries; attention maps at latent resolution
//! make that the dominant cost of a denoiser step.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};

trait Float: Copy + PartialOrd + std::ops::Sub<Output = Self> + std::ops::Mul<Output = Self> {
    const ZERO: Self;
    fn exp(self) -> Self;
    fn add(self, o: Self) -> Self;
    fn div(self, o: Self) -> Self;
    fn neg_inf() -> Self;
}

macro_rules! impl_float {
    ($t:ty) => {
        impl Float for $t {
            const ZERO: Self = 0.0;
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn add(self, o: Self) -> Self {
                self + o
            }
            fn div(self, o: Self) -> Self {
                self / o
            }
            fn neg_inf() -> Self {
                <$t>::NEG_INFINITY
            }
        }
    };
}

impl_float!(f32);
impl_float!(f64);

/// `e^x` for `x <= 0` with relative error below 4e-7; branch-free so that
/// row loops vectorize.
#[inline(always)]
fn exp_nonpositive(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    let x = x.max(-87.0);
    let n = (x * LOG2E).round();
    let r = (x - n * LN2_HI) - n * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (0.166_666_67 + r * (0.041_666_41 + r * (0.008_333_452 + r * 0.001_388_676)))));
    p * f32::from_bits(((n as i32 + 127) as u32) << 23)
}

fn rows_forward_f32(x: &[f32], n: usize) -> Vec<f32> {
    let mut out = vec![0f32; x.len()];
    for (xr, yr) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = xr.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        for (y, &v) in yr.iter_mut().zip(xr) {
            *y = exp_nonpositive(v - max);
        }
        let inv = 1.0 / yr.iter().sum::<f32>();
        yr.iter_mut().for_each(|y| *y *= inv);
    }
    out
}

fn rows_forward<T: Float>(x: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for (xr, yr) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let mut max = T::neg_inf();
        for &v in xr {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::ZERO;
        for (y, &v) in yr.iter_mut().zip(xr) {
            *y = (v - max).exp();
            sum = sum.add(*y);
        }
        for y in yr.iter_mut() {
            *y = y.div(sum);
        }
    }
    out
}

/// `dx = y * (dy - Σ dy·y)` row by row.
fn rows_backward<T: Float>(y: &[T], dy: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; y.len()];
    for ((yr, gr), or) in y.chunks_exact(n).zip(dy.chunks_exact(n)).zip(out.chunks_exact_mut(n)) {
        let mut dot = T::ZERO;
        for (&a, &b) in yr.iter().zip(gr) {
            dot = dot.add(a * b);
        }
        for ((o, &a), &b) in or.iter_mut().zip(yr).zip(gr) {
            *o = a * (b - dot);
        }
    }
    out
}

fn slice<'a, T>(s: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("softmax expects contiguous operands"),
    }
}

struct Softmax;

impl CustomOp1 for Softmax {
    fn name(&self) -> &'static str {
        "fused-softmax-last"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = *l.dims().last().unwrap_or(&1);
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(rows_forward_f32(slice(v, l)?, n)),
            CpuStorage::F64(v) => CpuStorage::F64(rows_forward(slice(v, l)?, n)),
            _ => candle_core::bail!("softmax supports f32 and f64"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(res.contiguous()?.apply_op2_no_bwd(&grad.contiguous()?, &SoftmaxGrad)?))
    }
}

struct SoftmaxGrad;

impl CustomOp2 for SoftmaxGrad {
    fn name(&self) -> &'static str {
        "fused-softmax-last-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        if l1.dims() != l2.dims() {
            candle_core::bail!("softmax grad shape {:?} differs from output {:?}", l2.dims(), l1.dims());
        }
        let n = *l1.dims().last().unwrap_or(&1);
        let out = match (s1, s2) {
            (CpuStorage::F32(y), CpuStorage::F32(g)) => CpuStorage::F32(rows_backward(slice(y, l1)?, slice(g, l2)?, n)),
            (CpuStorage::F64(y), CpuStorage::F64(g)) => CpuStorage::F64(rows_backward(slice(y, l1)?, slice(g, l2)?, n)),
            _ => candle_core::bail!("softmax grad supports f32 and f64 operands of one dtype"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Softmax)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var, D};

    fn composed(x: &Tensor) -> Tensor {
        let max = x.max_keepdim(D::Minus1).unwrap().detach();
        let e = x.broadcast_sub(&max).unwrap().exp().unwrap();
        e.broadcast_div(&e.sum_keepdim(D::Minus1).unwrap()).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn matches_composed_softmax_and_its_gradient() {
        let x = Var::from_tensor(&Tensor::randn(0f64, 3.0, (3, 5, 7), &Device::Cpu).unwrap()).unwrap();
        let w = Tensor::randn(0f64, 1.0, (3, 5, 7), &Device::Cpu).unwrap();
        let fused = softmax_last(x.as_tensor()).unwrap();
        let reference = composed(x.as_tensor());
        assert!(max_diff(&fused, &reference) < 1e-14);
        let g1 = (fused * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (reference * &w).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(max_diff(g1.get(&x).unwrap(), g2.get(&x).unwrap()) < 1e-13);
    }

    #[test]
    fn fast_exp_is_accurate() {
        let mut worst = 0f64;
        for i in 0..200_000 {
            let x = -(i as f32) * 4.3e-4;
            let want = (x as f64).exp();
            worst = worst.max(((exp_nonpositive(x) as f64) - want).abs() / want);
        }
        assert!(worst < 4e-7, "{worst}");
        assert_eq!(exp_nonpositive(0.0), 1.0);
        assert!(exp_nonpositive(-1e4) >= 0.0);
    }

    #[test]
    fn f32_rows_sum_to_one() {
        let x = Tensor::randn(0f32, 5.0, (64, 33), &Device::Cpu).unwrap();
        let y = softmax_last(&x).unwrap().sum(D::Minus1).unwrap().to_vec1::<f32>().unwrap();
        assert!(y.iter().all(|s| (s - 1.0).abs() < 1e-5));
    }

    #[test]
    fn large_logits_stay_finite() {
        let x = Tensor::new(&[[1000f32, 0.0, -1000.0]], &Device::Cpu).unwrap();
        let y = softmax_last(&x).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(y[0][0], 1.0);
        assert!(y[0].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn non_contiguous_input_is_handled() {
        let x = Tensor::randn(0f32, 1.0, (4, 6), &Device::Cpu).unwrap();
        let a = softmax_last(&x.t().unwrap()).unwrap();
        let b = composed(&x.t().unwrap().contiguous().unwrap());
        assert!(max_diff(&a, &b) < 1e-6);
    }
}
