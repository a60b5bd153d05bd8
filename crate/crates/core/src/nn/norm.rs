//! Fused instance normalization for `f32` CPU tensors.
//!
//! The composite version built from candle reductions and broadcasts costs
//! about as much as a convolution of the same size. [`InstanceNormOp`] does
//! statistics, normalization and the affine in one pass per plane, and its
//! backward is a second fused kernel. Only first-order gradients are
//! supported.

use candle_core::{CpuStorage, CustomOp3, Layout, Result, Shape, Tensor};

fn f32_slice<'a>(s: &'a CpuStorage, l: &Layout, what: &str) -> Result<&'a [f32]> {
    let CpuStorage::F32(data) = s else {
        candle_core::bail!("{what}: only f32 storage is supported");
    };
    let Some((start, end)) = l.contiguous_offsets() else {
        candle_core::bail!("{what}: input must be contiguous");
    };
    Ok(&data[start..end])
}

fn dims(x: &Layout, gamma: &Layout) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = x.shape().dims4()?;
    if gamma.shape().elem_count() != c {
        candle_core::bail!("instance norm: {c} channels but {:?} affine params", gamma.shape());
    }
    Ok((b, c, h * w))
}

/// Mean and `1 / sqrt(var + eps)` of one plane.
fn plane_stats(p: &[f32], eps: f64) -> (f64, f64) {
    let n = p.len() as f64;
    let mean = p.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = p.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// `(x, gamma, beta) -> gamma * (x - mean) / sqrt(var + eps) + beta` per
/// sample and channel, with the biased variance.
#[derive(Debug, Clone, Copy)]
pub struct InstanceNormOp {
    pub eps: f64,
}

impl CustomOp3 for InstanceNormOp {
    fn name(&self) -> &'static str {
        "fused-instance-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (_, c, plane) = dims(l1, l2)?;
        let x = f32_slice(s1, l1, "norm input")?;
        let gamma = f32_slice(s2, l2, "norm scale")?;
        let beta = f32_slice(s3, l3, "norm shift")?;
        let mut out = vec![0f32; x.len()];
        for (i, (src, dst)) in x.chunks_exact(plane).zip(out.chunks_exact_mut(plane)).enumerate() {
            let ch = i % c;
            let (mean, inv) = plane_stats(src, self.eps);
            let scale = inv * gamma[ch] as f64;
            let shift = beta[ch] as f64 - mean * scale;
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = (v as f64 * scale + shift) as f32;
            }
        }
        Ok((CpuStorage::F32(out), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let packed = x.apply_op3_no_bwd(gamma, &grad, &InstanceNormGrad { eps: self.eps })?;
        let n = x.elem_count();
        let c = gamma.elem_count();
        let gx = packed.narrow(0, 0, n)?.reshape(x.shape())?;
        let gg = packed.narrow(0, n, c)?.reshape(gamma.shape())?;
        let gb = packed.narrow(0, n + c, c)?.reshape(gamma.shape())?;
        Ok((Some(gx), Some(gg), Some(gb)))
    }
}

/// `(x, gamma, dy)` to the flat concatenation `[dx, dgamma, dbeta]`.
#[derive(Debug, Clone, Copy)]
pub struct InstanceNormGrad {
    pub eps: f64,
}

impl CustomOp3 for InstanceNormGrad {
    fn name(&self) -> &'static str {
        "fused-instance-norm-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (_, c, plane) = dims(l1, l2)?;
        let x = f32_slice(s1, l1, "norm input")?;
        let gamma = f32_slice(s2, l2, "norm scale")?;
        let dy = f32_slice(s3, l3, "norm gradient")?;
        if dy.len() != x.len() {
            candle_core::bail!("instance norm gradient has {} values for {} inputs", dy.len(), x.len());
        }
        let n = x.len();
        let mut out = vec![0f32; n + 2 * c];
        let mut dgamma = vec![0f64; c];
        let mut dbeta = vec![0f64; c];
        let np = plane as f64;
        for (i, ((src, g), dst)) in x
            .chunks_exact(plane)
            .zip(dy.chunks_exact(plane))
            .zip(out[..n].chunks_exact_mut(plane))
            .enumerate()
        {
            let ch = i % c;
            let (mean, inv) = plane_stats(src, self.eps);
            let (mut sum_g, mut sum_gx) = (0.0, 0.0);
            for (&v, &d) in src.iter().zip(g) {
                let xhat = (v as f64 - mean) * inv;
                sum_g += d as f64;
                sum_gx += d as f64 * xhat;
            }
            dgamma[ch] += sum_gx;
            dbeta[ch] += sum_g;
            let k = gamma[ch] as f64 * inv;
            let (mg, mgx) = (sum_g / np, sum_gx / np);
            for ((o, &v), &d) in dst.iter_mut().zip(src).zip(g) {
                let xhat = (v as f64 - mean) * inv;
                *o = (k * (d as f64 - mg - xhat * mgx)) as f32;
            }
        }
        for ch in 0..c {
            out[n + ch] = dgamma[ch] as f32;
            out[n + c + ch] = dbeta[ch] as f32;
        }
        Ok((CpuStorage::F32(out), Shape::from(n + 2 * c)))
    }
}

pub fn instance_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    x.contiguous()?.apply_op3(gamma, beta, InstanceNormOp { eps })
}
