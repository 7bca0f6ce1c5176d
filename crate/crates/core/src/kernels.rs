//! Fused CPU kernels with hand-written backward passes for the hot paths of
//! the encoders: bias addition, layer normalization and tanh-GELU.

use candle_core::{bail, CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor};

trait Elem: Copy {
    fn f(self) -> f64;
    fn from_f(x: f64) -> Self;
}

impl Elem for f32 {
    fn f(self) -> f64 {
        self as f64
    }
    fn from_f(x: f64) -> Self {
        x as f32
    }
}

impl Elem for f64 {
    fn f(self) -> f64 {
        self
    }
    fn from_f(x: f64) -> Self {
        x
    }
}

fn slice<'a, T>(data: &'a [T], layout: &Layout, op: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => bail!("{op} expects contiguous inputs"),
    }
}

fn last_dim(layout: &Layout) -> usize {
    layout.dims().last().copied().unwrap_or(1).max(1)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

struct Gelu;

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "gelu-tanh"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn run<T: Elem>(x: &[T]) -> Vec<T> {
            x.iter().map(|&v| T::from_f(gelu_scalar(v.f()))).collect()
        }
        let out = match s {
            CpuStorage::F32(d) => CpuStorage::F32(run(slice(d, l, self.name())?)),
            CpuStorage::F64(d) => CpuStorage::F64(run(slice(d, l, self.name())?)),
            _ => bail!("gelu supports f32 and f64"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(&grad.contiguous()?, &GeluBackward)?))
    }
}

struct GeluBackward;

impl CustomOp2 for GeluBackward {
    fn name(&self) -> &'static str {
        "gelu-tanh-bwd"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn run<T: Elem>(x: &[T], g: &[T]) -> Vec<T> {
            x.iter().zip(g).map(|(&x, &g)| T::from_f(gelu_grad_scalar(x.f()) * g.f())).collect()
        }
        let n = self.name();
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => CpuStorage::F32(run(slice(x, l1, n)?, slice(g, l2, n)?)),
            (CpuStorage::F64(x), CpuStorage::F64(g)) => CpuStorage::F64(run(slice(x, l1, n)?, slice(g, l2, n)?)),
            _ => bail!("gelu backward needs matching f32 or f64 inputs"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// GELU, tanh approximation.
pub fn gelu(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Gelu)
}

/// `x + b` with `b` broadcast along every row of the last dimension.
struct BiasAdd;

impl CustomOp2 for BiasAdd {
    fn name(&self) -> &'static str {
        "bias-add"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn run<T: Elem + std::ops::Add<Output = T>>(x: &[T], b: &[T]) -> Vec<T> {
            let d = b.len();
            let mut out = Vec::with_capacity(x.len());
            for row in x.chunks(d) {
                out.extend(row.iter().zip(b).map(|(&a, &c)| a + c));
            }
            out
        }
        let n = self.name();
        if last_dim(l1) != l2.shape().elem_count() {
            bail!("bias-add: bias of {} for rows of {}", l2.shape().elem_count(), last_dim(l1));
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(b)) => CpuStorage::F32(run(slice(x, l1, n)?, slice(b, l2, n)?)),
            (CpuStorage::F64(x), CpuStorage::F64(b)) => CpuStorage::F64(run(slice(x, l1, n)?, slice(b, l2, n)?)),
            _ => bail!("bias-add needs matching f32 or f64 inputs"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, b: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let gb = grad.contiguous()?.apply_op1_no_bwd(&ColumnSum)?.reshape(b.shape())?;
        Ok((Some(grad.clone()), Some(gb)))
    }
}

/// Sums all rows of the last dimension: `[.., D] -> [D]`.
struct ColumnSum;

impl CustomOp1 for ColumnSum {
    fn name(&self) -> &'static str {
        "column-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn run<T: Elem>(x: &[T], d: usize) -> Vec<T> {
            let mut acc = vec![0.0f64; d];
            for row in x.chunks(d) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v.f();
                }
            }
            acc.into_iter().map(T::from_f).collect()
        }
        let d = last_dim(l);
        let out = match s {
            CpuStorage::F32(x) => CpuStorage::F32(run(slice(x, l, self.name())?, d)),
            CpuStorage::F64(x) => CpuStorage::F64(run(slice(x, l, self.name())?, d)),
            _ => bail!("column-sum supports f32 and f64"),
        };
        Ok((out, Shape::from(d)))
    }
}

pub fn bias_add(x: &Tensor, b: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op2(&b.contiguous()?, BiasAdd)
}

/// Layer normalization over the last dimension with affine `gamma`, `beta`.
struct LayerNormOp {
    eps: f64,
}

/// Per-row `(normalized row, 1 / std)`.
fn normalize_row<T: Elem>(row: &[T], eps: f64, xhat: &mut Vec<f64>) -> f64 {
    let d = row.len() as f64;
    let mean = row.iter().map(|v| v.f()).sum::<f64>() / d;
    let var = row.iter().map(|v| (v.f() - mean).powi(2)).sum::<f64>() / d;
    let rstd = 1.0 / (var + eps).sqrt();
    xhat.clear();
    xhat.extend(row.iter().map(|v| (v.f() - mean) * rstd));
    rstd
}

impl CustomOp3 for LayerNormOp {
    fn name(&self) -> &'static str {
        "layer-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        fn run<T: Elem>(x: &[T], g: &[T], b: &[T], eps: f64) -> Vec<T> {
            let d = g.len();
            let mut out = Vec::with_capacity(x.len());
            let mut xhat = Vec::with_capacity(d);
            for row in x.chunks(d) {
                normalize_row(row, eps, &mut xhat);
                out.extend(xhat.iter().zip(g.iter().zip(b)).map(|(&h, (&g, &b))| T::from_f(h * g.f() + b.f())));
            }
            out
        }
        let n = self.name();
        let d = last_dim(l1);
        if l2.shape().elem_count() != d || l3.shape().elem_count() != d {
            bail!("layer-norm: affine parameters do not match width {d}");
        }
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => {
                CpuStorage::F32(run(slice(x, l1, n)?, slice(g, l2, n)?, slice(b, l3, n)?, self.eps))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => {
                CpuStorage::F64(run(slice(x, l1, n)?, slice(g, l2, n)?, slice(b, l3, n)?, self.eps))
            }
            _ => bail!("layer-norm needs matching f32 or f64 inputs"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let packed = x.apply_op3_no_bwd(gamma, &grad.contiguous()?, &LayerNormBackward { eps: self.eps })?;
        let n = x.elem_count();
        let d = gamma.elem_count();
        let dx = packed.narrow(0, 0, n)?.reshape(x.shape())?;
        let dgamma = packed.narrow(0, n, d)?.reshape(gamma.shape())?;
        let dbeta = packed.narrow(0, n + d, d)?.reshape(gamma.shape())?;
        Ok((Some(dx), Some(dgamma), Some(dbeta)))
    }
}

/// Returns `dx`, `dgamma` and `dbeta` packed into one flat buffer.
struct LayerNormBackward {
    eps: f64,
}

impl CustomOp3 for LayerNormBackward {
    fn name(&self) -> &'static str {
        "layer-norm-bwd"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        fn run<T: Elem>(x: &[T], g: &[T], dy: &[T], eps: f64) -> Vec<T> {
            let d = g.len();
            let mut dx = Vec::with_capacity(x.len() + 2 * d);
            let mut dgamma = vec![0.0f64; d];
            let mut dbeta = vec![0.0f64; d];
            let mut xhat = Vec::with_capacity(d);
            let mut dxhat = vec![0.0f64; d];
            for (row, dyr) in x.chunks(d).zip(dy.chunks(d)) {
                let rstd = normalize_row(row, eps, &mut xhat);
                let (mut m1, mut m2) = (0.0, 0.0);
                for j in 0..d {
                    let gy = dyr[j].f();
                    dgamma[j] += gy * xhat[j];
                    dbeta[j] += gy;
                    dxhat[j] = gy * g[j].f();
                    m1 += dxhat[j];
                    m2 += dxhat[j] * xhat[j];
                }
                m1 /= d as f64;
                m2 /= d as f64;
                dx.extend((0..d).map(|j| T::from_f(rstd * (dxhat[j] - m1 - xhat[j] * m2))));
            }
            dx.extend(dgamma.into_iter().map(T::from_f));
            dx.extend(dbeta.into_iter().map(T::from_f));
            dx
        }
        let n = self.name();
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(dy)) => {
                CpuStorage::F32(run(slice(x, l1, n)?, slice(g, l2, n)?, slice(dy, l3, n)?, self.eps))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(dy)) => {
                CpuStorage::F64(run(slice(x, l1, n)?, slice(g, l2, n)?, slice(dy, l3, n)?, self.eps))
            }
            _ => bail!("layer-norm backward needs matching f32 or f64 inputs"),
        };
        let len = l1.shape().elem_count() + 2 * l2.shape().elem_count();
        Ok((out, Shape::from(len)))
    }
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> candle_core::Result<Tensor> {
    x.contiguous()?
        .apply_op3(&gamma.contiguous()?, &beta.contiguous()?, LayerNormOp { eps })
}
