//! CPU kernels for the zero-padded spatial operators on channels-last
//! tensors, each with an explicit backward pass.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor, WithDType};

type CResult<T> = candle_core::Result<T>;

fn slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout, op: &str) -> CResult<&'a [T]> {
    let data = s.as_slice::<T>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => Err(candle_core::Error::Msg(format!(
            "{op} needs contiguous input"
        ))),
    }
}

fn dims4(l: &Layout) -> CResult<(usize, usize, usize, usize)> {
    l.shape().dims4()
}

/// Valid input offsets along one axis for output index `i` and tap `d`.
#[inline]
fn src(i: usize, d: usize, pad: usize, len: usize) -> Option<usize> {
    let s = (i + d).checked_sub(pad)?;
    (s < len).then_some(s)
}

macro_rules! dispatch {
    ($s:expr, $f:ident, $($arg:expr),*) => {
        match $s {
            CpuStorage::F32(_) => CpuStorage::F32($f::<f32>($($arg),*)?),
            CpuStorage::F64(_) => CpuStorage::F64($f::<f64>($($arg),*)?),
            _ => return Err(candle_core::Error::Msg("spatial kernels support f32 and f64 only".into())),
        }
    };
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
}

impl Geometry {
    fn pad(&self) -> usize {
        self.k / 2
    }

    fn at(&self, b: usize, i: usize, j: usize) -> usize {
        ((b * self.h + i) * self.w + j) * self.c
    }
}

/// Visits every (output offset, input offset, tap) triple with a valid source.
fn for_each_tap(g: Geometry, mut f: impl FnMut(usize, usize, usize)) {
    let p = g.pad();
    for b in 0..g.n {
        for i in 0..g.h {
            for dy in 0..g.k {
                let Some(ii) = src(i, dy, p, g.h) else {
                    continue;
                };
                for j in 0..g.w {
                    let out = g.at(b, i, j);
                    for dx in 0..g.k {
                        let Some(jj) = src(j, dx, p, g.w) else {
                            continue;
                        };
                        f(out, g.at(b, ii, jj), dy * g.k + dx);
                    }
                }
            }
        }
    }
}

fn depthwise_fwd<T: WithDType>(
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
    k: usize,
) -> CResult<Vec<T>> {
    let x = slice::<T>(s1, l1, "depthwise conv")?;
    let wt = slice::<T>(s2, l2, "depthwise conv")?;
    let (n, h, w, c) = dims4(l1)?;
    let g = Geometry { n, h, w, c, k };
    let mut out = vec![T::zero(); x.len()];
    for_each_tap(g, |o, i, tap| {
        let (dst, xs, ws) = (&mut out[o..o + c], &x[i..i + c], &wt[tap * c..tap * c + c]);
        for ((d, &a), &b) in dst.iter_mut().zip(xs).zip(ws) {
            *d += a * b;
        }
    });
    Ok(out)
}

fn depthwise_wgrad<T: WithDType>(
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
    k: usize,
) -> CResult<Vec<T>> {
    let x = slice::<T>(s1, l1, "depthwise weight grad")?;
    let gr = slice::<T>(s2, l2, "depthwise weight grad")?;
    let (n, h, w, c) = dims4(l1)?;
    let g = Geometry { n, h, w, c, k };
    let mut out = vec![T::zero(); k * k * c];
    for_each_tap(g, |o, i, tap| {
        let (dst, xs, gs) = (&mut out[tap * c..tap * c + c], &x[i..i + c], &gr[o..o + c]);
        for ((d, &a), &b) in dst.iter_mut().zip(xs).zip(gs) {
            *d += a * b;
        }
    });
    Ok(out)
}

/// `y[.., c] = sum_tap x[shifted, c] * w[tap, c]` with zero padding.
#[derive(Clone, Copy)]
struct Depthwise {
    k: usize,
}

impl CustomOp2 for Depthwise {
    fn name(&self) -> &'static str {
        "depthwise-conv"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let (_, _, _, c) = dims4(l1)?;
        if l2.dims() != [self.k * self.k, c] {
            return Err(candle_core::Error::Msg(format!(
                "depthwise weight {:?} does not match {} taps x {c} channels",
                l2.dims(),
                self.k * self.k
            )));
        }
        let k = self.k;
        Ok((
            dispatch!(s1, depthwise_fwd, s1, l1, s2, l2, k),
            l1.shape().clone(),
        ))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let taps = self.k * self.k;
        let rev: Vec<u32> = (0..taps as u32).rev().collect();
        let rev = Tensor::new(rev.as_slice(), w.device())?;
        let flipped = w.index_select(&rev, 0)?.contiguous()?;
        let dx = grad.apply_op2_no_bwd(&flipped, self)?;
        let dw = x
            .contiguous()?
            .apply_op2_no_bwd(&grad, &DepthwiseWeightGrad { k: self.k })?;
        Ok((Some(dx), Some(dw)))
    }
}

struct DepthwiseWeightGrad {
    k: usize,
}

impl CustomOp2 for DepthwiseWeightGrad {
    fn name(&self) -> &'static str {
        "depthwise-conv-weight-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let (_, _, _, c) = dims4(l1)?;
        let k = self.k;
        Ok((
            dispatch!(s1, depthwise_wgrad, s1, l1, s2, l2, k),
            Shape::from((k * k, c)),
        ))
    }
}

fn patches_fwd<T: WithDType>(s: &CpuStorage, l: &Layout, k: usize) -> CResult<Vec<T>> {
    let x = slice::<T>(s, l, "patch extraction")?;
    let (n, h, w, c) = dims4(l)?;
    let g = Geometry { n, h, w, c, k };
    let kk = k * k;
    let mut out = vec![T::zero(); x.len() * kk];
    for_each_tap(g, |o, i, tap| {
        let dst = o * kk + tap * c;
        out[dst..dst + c].copy_from_slice(&x[i..i + c]);
    });
    Ok(out)
}

fn fold_fwd<T: WithDType>(s: &CpuStorage, l: &Layout, k: usize) -> CResult<Vec<T>> {
    let gr = slice::<T>(s, l, "patch folding")?;
    let (n, h, w, ckk) = dims4(l)?;
    let kk = k * k;
    let c = ckk / kk;
    let g = Geometry { n, h, w, c, k };
    let mut out = vec![T::zero(); n * h * w * c];
    for_each_tap(g, |o, i, tap| {
        let from = o * kk + tap * c;
        for (d, &v) in out[i..i + c].iter_mut().zip(&gr[from..from + c]) {
            *d += v;
        }
    });
    Ok(out)
}

/// `[N, H, W, C] -> [N, H, W, k*k*C]`, tap-major, zero padded.
#[derive(Clone, Copy)]
struct Patches {
    k: usize,
}

impl CustomOp1 for Patches {
    fn name(&self) -> &'static str {
        "patches"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (n, h, w, c) = dims4(l)?;
        let k = self.k;
        Ok((
            dispatch!(s, patches_fwd, s, l, k),
            Shape::from((n, h, w, k * k * c)),
        ))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(
            grad.contiguous()?.apply_op1_no_bwd(&Fold { k: self.k })?,
        ))
    }
}

/// Adjoint of [`Patches`].
struct Fold {
    k: usize,
}

impl CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "fold"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (n, h, w, ckk) = dims4(l)?;
        let k = self.k;
        if ckk % (k * k) != 0 {
            return Err(candle_core::Error::Msg(format!(
                "{ckk} channels do not split into {k}x{k} taps"
            )));
        }
        Ok((
            dispatch!(s, fold_fwd, s, l, k),
            Shape::from((n, h, w, ckk / (k * k))),
        ))
    }
}

pub(crate) fn depthwise_conv(x: &Tensor, w: &Tensor, k: usize) -> CResult<Tensor> {
    x.contiguous()?.apply_op2(&w.contiguous()?, Depthwise { k })
}

pub(crate) fn patches(x: &Tensor, k: usize) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(Patches { k })
}
