//! 2-D convolution as im2col + GEMM, with its own backward pass.
//!
//! candle's CPU convolution backward goes through a direct transposed
//! convolution that is an order of magnitude slower than the GEMM formulation
//! at the sizes used here. Each sample of the batch is an independent GEMM,
//! so the batch is spread over [`Execution`]; partial weight gradients are
//! summed in sample order, which keeps both execution paths bit-identical.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor};

use crate::parallel::Execution;

pub(crate) trait Elem: Copy + Default + Send + Sync + std::ops::AddAssign + 'static {
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );
    fn zero() -> Self;
}

macro_rules! impl_elem {
    ($t:ty, $f:path) => {
        impl Elem for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: slice lengths cover every index reachable through the
                // given strides; checked by the callers' shape arithmetic and the
                // assert above for the output.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
            fn zero() -> Self {
                0.0
            }
        }
    };
}

impl_elem!(f32, matrixmultiply::sgemm);
impl_elem!(f64, matrixmultiply::dgemm);

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> candle_core::Result<Self> {
        let [batch, c_in, h, wd] = x else {
            candle_core::bail!("conv2d input must be rank 4, got {x:?}")
        };
        let [c_out, c_in_w, kh, kw] = w else {
            candle_core::bail!("conv2d weight must be rank 4, got {w:?}")
        };
        if c_in != c_in_w || kh != kw {
            candle_core::bail!("conv2d shape mismatch: input {x:?} weight {w:?}");
        }
        if h + 2 * pad < *kh || wd + 2 * pad < *kw {
            candle_core::bail!("conv2d kernel larger than padded input");
        }
        Ok(Self {
            batch: *batch,
            c_in: *c_in,
            h: *h,
            w: *wd,
            c_out: *c_out,
            k: *kh,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn cols_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_px(&self) -> usize {
        self.oh * self.ow
    }

    fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.c_out * self.out_px()
    }

    /// Calls `f(col_row, out_px, in_index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        for ci in 0..self.c_in {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    for oy in 0..self.oh {
                        let iy = oy as isize * s - p + ki as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = ox as isize * s - p + kj as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(
                                row,
                                oy * self.ow + ox,
                                (ci * self.h + iy as usize) * self.w + ix as usize,
                            );
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Elem>(&self, x: &[T], cols: &mut [T]) {
        cols.iter_mut().for_each(|v| *v = T::zero());
        let n = self.out_px();
        self.for_each_tap(|row, px, idx| cols[row * n + px] = x[idx]);
    }

    fn col2im<T: Elem>(&self, cols: &[T], dx: &mut [T]) {
        let n = self.out_px();
        self.for_each_tap(|row, px, idx| dx[idx] += cols[row * n + px]);
    }
}

fn forward<T: Elem>(g: Geometry, x: &[T], w: &[T], exec: Execution) -> Vec<T> {
    let (rows, n) = (g.cols_rows(), g.out_px());
    let mut out = vec![T::zero(); g.batch * g.out_len()];
    exec.for_each_chunk_mut(&mut out, g.out_len(), |b, y| {
        let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
        if g.is_pointwise() {
            T::gemm(g.c_out, rows, n, w, rows as isize, 1, xb, n as isize, 1, T::zero(), y);
        } else {
            let mut cols = vec![T::zero(); rows * n];
            g.im2col(xb, &mut cols);
            T::gemm(g.c_out, rows, n, w, rows as isize, 1, &cols, n as isize, 1, T::zero(), y);
        }
    });
    out
}

fn backward_input<T: Elem>(g: Geometry, dy: &[T], w: &[T], exec: Execution) -> Vec<T> {
    let (rows, n) = (g.cols_rows(), g.out_px());
    let mut dx = vec![T::zero(); g.batch * g.in_len()];
    exec.for_each_chunk_mut(&mut dx, g.in_len(), |b, dxb| {
        let dyb = &dy[b * g.out_len()..(b + 1) * g.out_len()];
        // W^T [rows x c_out] . dY [c_out x n]
        if g.is_pointwise() {
            T::gemm(rows, g.c_out, n, w, 1, rows as isize, dyb, n as isize, 1, T::zero(), dxb);
        } else {
            let mut cols = vec![T::zero(); rows * n];
            T::gemm(rows, g.c_out, n, w, 1, rows as isize, dyb, n as isize, 1, T::zero(), &mut cols);
            g.col2im(&cols, dxb);
        }
    });
    dx
}

fn backward_weight<T: Elem>(g: Geometry, x: &[T], dy: &[T], exec: Execution) -> Vec<T> {
    let (rows, n) = (g.cols_rows(), g.out_px());
    let partials = exec.map_range(g.batch, |b| {
        let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
        let dyb = &dy[b * g.out_len()..(b + 1) * g.out_len()];
        let mut dw = vec![T::zero(); g.c_out * rows];
        // dY [c_out x n] . cols^T [n x rows]
        if g.is_pointwise() {
            T::gemm(g.c_out, n, rows, dyb, n as isize, 1, xb, 1, n as isize, T::zero(), &mut dw);
        } else {
            let mut cols = vec![T::zero(); rows * n];
            g.im2col(xb, &mut cols);
            T::gemm(g.c_out, n, rows, dyb, n as isize, 1, &cols, 1, n as isize, T::zero(), &mut dw);
        }
        dw
    });
    let mut total = vec![T::zero(); g.c_out * rows];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

fn contiguous<'a, T>(s: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("conv2d expects contiguous operands"),
    }
}

macro_rules! dispatch {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                let $a = contiguous(a, $l1)?;
                let $b = contiguous(b, $l2)?;
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                let $a = contiguous(a, $l1)?;
                let $b = contiguous(b, $l2)?;
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("conv2d supports f32 and f64 operands of one dtype"),
        }
    };
}

struct Conv2dOp {
    stride: usize,
    pad: usize,
    exec: Execution,
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "gemm-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(l1.dims(), l2.dims(), self.stride, self.pad)?;
        let out = dispatch!(s1, l1, s2, l2, |x, w| forward(g, x, w, self.exec));
        Ok((out, Shape::from((g.batch, g.c_out, g.oh, g.ow))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let dx = grad.apply_op2_no_bwd(
            w,
            &InputGradOp {
                stride: self.stride,
                pad: self.pad,
                in_shape: x.dims().to_vec(),
                exec: self.exec,
            },
        )?;
        let dw = x.apply_op2_no_bwd(
            &grad,
            &WeightGradOp {
                stride: self.stride,
                pad: self.pad,
                w_shape: w.dims().to_vec(),
                exec: self.exec,
            },
        )?;
        Ok((Some(dx), Some(dw)))
    }
}

struct InputGradOp {
    stride: usize,
    pad: usize,
    in_shape: Vec<usize>,
    exec: Execution,
}

impl CustomOp2 for InputGradOp {
    fn name(&self) -> &'static str {
        "gemm-conv2d-input-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(&self.in_shape, l2.dims(), self.stride, self.pad)?;
        if l1.dims() != [g.batch, g.c_out, g.oh, g.ow] {
            candle_core::bail!("conv2d grad shape {:?} does not match output", l1.dims());
        }
        let out = dispatch!(s1, l1, s2, l2, |dy, w| backward_input(g, dy, w, self.exec));
        Ok((out, Shape::from(self.in_shape.clone())))
    }
}

struct WeightGradOp {
    stride: usize,
    pad: usize,
    w_shape: Vec<usize>,
    exec: Execution,
}

impl CustomOp2 for WeightGradOp {
    fn name(&self) -> &'static str {
        "gemm-conv2d-weight-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(l1.dims(), &self.w_shape, self.stride, self.pad)?;
        if l2.dims() != [g.batch, g.c_out, g.oh, g.ow] {
            candle_core::bail!("conv2d grad shape {:?} does not match output", l2.dims());
        }
        let out = dispatch!(s1, l1, s2, l2, |x, dy| backward_weight(g, x, dy, self.exec));
        Ok((out, Shape::from(self.w_shape.clone())))
    }
}

/// `x: (B, Cin, H, W)`, `weight: (Cout, Cin, K, K)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> candle_core::Result<Tensor> {
    conv2d_with(x, weight, stride, pad, Execution::default())
}

pub fn conv2d_with(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
    exec: Execution,
) -> candle_core::Result<Tensor> {
    if stride == 0 {
        candle_core::bail!("conv2d stride must be >= 1");
    }
    x.contiguous()?
        .apply_op2(&weight.contiguous()?, Conv2dOp { stride, pad, exec })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn rand_tensor(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
        let n: usize = shape.iter().product();
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data: Vec<f64> = (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::from_vec(data, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
    }

    #[test]
    fn forward_matches_candle_reference() {
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 2, 1)] {
            let x = rand_tensor(&[2, 3, 9, 8], 1, DType::F64);
            let w = rand_tensor(&[5, 3, k, k], 2, DType::F64);
            let ours = conv2d(&x, &w, s, p).unwrap();
            let theirs = x.conv2d(&w, p, s, 1, 1).unwrap();
            let diff = (ours - theirs).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(diff < 1e-12, "k={k} s={s} p={p}: {diff}");
        }
    }

    #[test]
    fn gradients_match_candle_reference() {
        let x = Var::from_tensor(&rand_tensor(&[2, 3, 7, 7], 3, DType::F64)).unwrap();
        let w = Var::from_tensor(&rand_tensor(&[4, 3, 3, 3], 4, DType::F64)).unwrap();
        let probe = rand_tensor(&[2, 4, 4, 4], 5, DType::F64);
        let ours = (conv2d(x.as_tensor(), w.as_tensor(), 2, 1).unwrap() * &probe).unwrap().sum_all().unwrap();
        let theirs = (x.as_tensor().conv2d(w.as_tensor(), 1, 2, 1, 1).unwrap() * &probe).unwrap().sum_all().unwrap();
        let g1 = ours.backward().unwrap();
        let g2 = theirs.backward().unwrap();
        for v in [&x, &w] {
            let d = (g1.get(v).unwrap() - g2.get(v).unwrap()).unwrap().abs().unwrap().max_all().unwrap();
            assert!(d.to_scalar::<f64>().unwrap() < 1e-12);
        }
    }

    #[test]
    fn execution_paths_are_bit_identical() {
        let x = rand_tensor(&[4, 8, 6, 6], 7, DType::F32);
        let w = rand_tensor(&[8, 8, 3, 3], 8, DType::F32);
        let a = conv2d_with(&x, &w, 1, 1, Execution::Sequential).unwrap();
        let b = conv2d_with(&x, &w, 1, 1, Execution::Parallel).unwrap();
        assert_eq!(a.flatten_all().unwrap().to_vec1::<f32>().unwrap(), b.flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }

    #[test]
    fn batch_rows_are_independent() {
        let x = rand_tensor(&[3, 4, 8, 8], 9, DType::F32);
        let w = rand_tensor(&[6, 4, 3, 3], 10, DType::F32);
        let full = conv2d(&x, &w, 1, 1).unwrap();
        let one = conv2d(&x.narrow(0, 1, 1).unwrap(), &w, 1, 1).unwrap();
        assert_eq!(
            full.get(1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            one.get(0).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }
}
