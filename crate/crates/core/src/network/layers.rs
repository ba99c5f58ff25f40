use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::par::{self, Exec};

pub const LEAKY_SLOPE: f32 = 0.1;
const BN_EPSILON: f32 = 1e-6;

/// Output pixels computed together so one weight row is reused from cache.
const PIXEL_BLOCK: usize = 8;
/// Filters per accumulator block.
const FILTER_BLOCK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub scale: Vec<f32>,
    pub bias: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Convolution parameters. `weights` is laid out `[ky][kx][in_c][out_c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvWeights {
    pub in_c: usize,
    pub out_c: usize,
    pub size: usize,
    pub weights: Vec<f32>,
    /// Per-filter bias, used only when `bn` is absent.
    pub bias: Vec<f32>,
    pub bn: Option<BatchNorm>,
}

impl ConvWeights {
    #[inline]
    pub fn weight_index(&self, ky: usize, kx: usize, ci: usize, co: usize) -> usize {
        ((ky * self.size + kx) * self.in_c + ci) * self.out_c + co
    }

    pub fn check(&self) -> Result<()> {
        let n = self.size * self.size * self.in_c * self.out_c;
        if self.weights.len() != n {
            return Err(Error::Shape(format!(
                "{} conv weights, expected {n} for {}x{}x{}->{}",
                self.weights.len(),
                self.size,
                self.size,
                self.in_c,
                self.out_c
            )));
        }
        match &self.bn {
            Some(bn) => {
                for (name, v) in [("scale", &bn.scale), ("bias", &bn.bias), ("mean", &bn.mean), ("var", &bn.var)] {
                    if v.len() != self.out_c {
                        return Err(Error::Shape(format!(
                            "batch-norm {name} has {} entries, expected {}",
                            v.len(),
                            self.out_c
                        )));
                    }
                }
                if bn.var.iter().any(|&v| v < 0.0) {
                    return Err(Error::Numeric("negative batch-norm variance".into()));
                }
            }
            None => {
                if self.bias.len() != self.out_c {
                    return Err(Error::Shape(format!(
                        "bias has {} entries, expected {}",
                        self.bias.len(),
                        self.out_c
                    )));
                }
            }
        }
        let finite = self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
            && self.bn.as_ref().is_none_or(|bn| {
                bn.scale
                    .iter()
                    .chain(&bn.bias)
                    .chain(&bn.mean)
                    .chain(&bn.var)
                    .all(|v| v.is_finite())
            });
        if !finite {
            return Err(Error::Numeric("non-finite convolution parameters".into()));
        }
        Ok(())
    }
}

/// Stride-1 convolution with same padding (`size / 2` zeros each side),
/// followed by the bias or the batch-norm affine transform. No activation.
///
/// Every output value is accumulated over taps in `(ky, kx, ci)` order
/// regardless of how rows are split across threads, so parallel and
/// sequential runs are bit-identical.
pub fn conv2d(x: &Tensor, p: &ConvWeights, exec: Exec) -> Result<Tensor> {
    p.check()?;
    if x.c != p.in_c {
        return Err(Error::Shape(format!(
            "input has {} channels, weights expect {}",
            x.c, p.in_c
        )));
    }
    if p.size % 2 == 0 {
        return Err(Error::Shape(format!("even kernel size {}", p.size)));
    }
    let (h, w, f) = (x.h, x.w, p.out_c);
    let pad = (p.size / 2) as isize;
    let row_len = w * f;
    let mut out = vec![0f32; h * row_len];

    par::for_each_chunk_mut(exec, &mut out, row_len, |y, out_row| {
        let mut acc = vec![0f32; PIXEL_BLOCK * FILTER_BLOCK];
        for x0 in (0..w).step_by(PIXEL_BLOCK) {
            let np = PIXEL_BLOCK.min(w - x0);
            for f0 in (0..f).step_by(FILTER_BLOCK) {
                let nf = FILTER_BLOCK.min(f - f0);
                acc.iter_mut().for_each(|a| *a = 0.0);
                for ky in 0..p.size {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..p.size {
                        for ci in 0..p.in_c {
                            let wrow = &p.weights[p.weight_index(ky, kx, ci, f0)..][..nf];
                            for pi in 0..np {
                                let sx = (x0 + pi) as isize + kx as isize - pad;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let v = x.at(sy as usize, sx as usize, ci);
                                let a = &mut acc[pi * FILTER_BLOCK..pi * FILTER_BLOCK + nf];
                                for (a, &wv) in a.iter_mut().zip(wrow) {
                                    *a += v * wv;
                                }
                            }
                        }
                    }
                }
                for pi in 0..np {
                    let dst = &mut out_row[(x0 + pi) * f + f0..][..nf];
                    dst.copy_from_slice(&acc[pi * FILTER_BLOCK..pi * FILTER_BLOCK + nf]);
                }
            }
        }
    });

    let mut y = Tensor {
        h,
        w,
        c: f,
        values: out,
    };
    match &p.bn {
        Some(bn) => batch_norm(&mut y, bn)?,
        None => {
            for px in y.values.chunks_mut(f) {
                for (v, b) in px.iter_mut().zip(&p.bias) {
                    *v += b;
                }
            }
        }
    }
    Ok(y)
}

/// `scale * (x - mean) / sqrt(var + eps) + bias`, per channel.
pub fn batch_norm(x: &mut Tensor, bn: &BatchNorm) -> Result<()> {
    if [&bn.scale, &bn.bias, &bn.mean, &bn.var].iter().any(|v| v.len() != x.c) {
        return Err(Error::Shape(format!(
            "batch-norm parameters do not have {} channels",
            x.c
        )));
    }
    let gain: Vec<f32> = bn
        .scale
        .iter()
        .zip(&bn.var)
        .map(|(s, v)| s / (v + BN_EPSILON).sqrt())
        .collect();
    for px in x.values.chunks_mut(x.c) {
        for (ch, v) in px.iter_mut().enumerate() {
            *v = gain[ch] * (*v - bn.mean[ch]) + bn.bias[ch];
        }
    }
    Ok(())
}

pub fn leaky(x: &mut Tensor, slope: f32) {
    for v in &mut x.values {
        if *v < 0.0 {
            *v *= slope;
        }
    }
}

pub fn batchnorm_leaky(x: &mut Tensor, bn: &BatchNorm) -> Result<()> {
    batch_norm(x, bn)?;
    leaky(x, LEAKY_SLOPE);
    Ok(())
}

pub fn maxpool2d(x: &Tensor, size: usize, stride: usize) -> Result<Tensor> {
    if size == 0 || stride == 0 || x.h < size || x.w < size {
        return Err(Error::Shape(format!(
            "cannot pool {}x{} with {size}x{size}/{stride}",
            x.h, x.w
        )));
    }
    let oh = (x.h - size) / stride + 1;
    let ow = (x.w - size) / stride + 1;
    let mut out = Tensor::zeros(oh, ow, x.c);
    for oy in 0..oh {
        for ox in 0..ow {
            let base = out.index(oy, ox, 0);
            let dst = &mut out.values[base..base + x.c];
            dst.iter_mut().for_each(|v| *v = f32::NEG_INFINITY);
            for ky in 0..size {
                for kx in 0..size {
                    let src = x.pixel(oy * stride + ky, ox * stride + kx);
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = d.max(s);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// 2x2 blocks to channels: output channel `(dy * 2 + dx) * c + ch`.
pub fn space_to_depth(x: &Tensor) -> Result<Tensor> {
    if x.h % 2 != 0 || x.w % 2 != 0 {
        return Err(Error::Shape(format!(
            "space-to-depth needs even dimensions, got {}x{}",
            x.h, x.w
        )));
    }
    let (oh, ow, oc) = (x.h / 2, x.w / 2, x.c * 4);
    let mut out = Tensor::zeros(oh, ow, oc);
    for oy in 0..oh {
        for ox in 0..ow {
            for dy in 0..2 {
                for dx in 0..2 {
                    let src = x.pixel(oy * 2 + dy, ox * 2 + dx);
                    let base = out.index(oy, ox, (dy * 2 + dx) * x.c);
                    out.values[base..base + x.c].copy_from_slice(src);
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space(x: &Tensor) -> Result<Tensor> {
    if x.c % 4 != 0 {
        return Err(Error::Shape(format!(
            "depth-to-space needs a multiple of 4 channels, got {}",
            x.c
        )));
    }
    let c = x.c / 4;
    let mut out = Tensor::zeros(x.h * 2, x.w * 2, c);
    for y in 0..x.h {
        for xx in 0..x.w {
            let src = x.pixel(y, xx);
            for dy in 0..2 {
                for dx in 0..2 {
                    let base = out.index(y * 2 + dy, xx * 2 + dx, 0);
                    let k = (dy * 2 + dx) * c;
                    out.values[base..base + c].copy_from_slice(&src[k..k + c]);
                }
            }
        }
    }
    Ok(out)
}

/// Coarse channels first, then the space-to-depth of `fine`.
pub fn passthrough(fine: &Tensor, coarse: &Tensor) -> Result<Tensor> {
    if fine.h != 2 * coarse.h || fine.w != 2 * coarse.w {
        return Err(Error::Shape(format!(
            "fine map {}x{} is not twice the coarse map {}x{}",
            fine.h, fine.w, coarse.h, coarse.w
        )));
    }
    let reorg = space_to_depth(fine)?;
    let c = coarse.c + reorg.c;
    let mut values = Vec::with_capacity(coarse.h * coarse.w * c);
    for (a, b) in coarse.values.chunks(coarse.c).zip(reorg.values.chunks(reorg.c)) {
        values.extend_from_slice(a);
        values.extend_from_slice(b);
    }
    Tensor::from_vec(coarse.h, coarse.w, c, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec(h, w, c, (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_conv(in_c: usize, out_c: usize, size: usize, bn: bool, rng: &mut ChaCha8Rng) -> ConvWeights {
        let mut v = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let weights = v(size * size * in_c * out_c);
        let bias = v(out_c);
        let bn = bn.then(|| BatchNorm {
            scale: v(out_c),
            bias: v(out_c),
            mean: v(out_c),
            var: v(out_c).into_iter().map(|x| x.abs() + 0.5).collect(),
        });
        ConvWeights { in_c, out_c, size, weights, bias, bn }
    }

    #[test]
    fn maxpool_halves_and_keeps_channels() {
        let x = Tensor::zeros(208, 208, 32);
        assert_eq!(maxpool2d(&x, 2, 2).unwrap().shape(), (104, 104, 32));
        let x = Tensor::from_vec(2, 2, 1, vec![1.0, -3.0, 7.0, 2.0]).unwrap();
        assert_eq!(maxpool2d(&x, 2, 2).unwrap().values, vec![7.0]);
    }

    #[test]
    fn pointwise_conv_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_tensor(104, 104, 128, &mut rng);
        let p = random_conv(128, 64, 1, true, &mut rng);
        assert_eq!(conv2d(&x, &p, Exec::Parallel).unwrap().shape(), (104, 104, 64));
    }

    #[test]
    fn leaky_piecewise() {
        let mut t = Tensor::from_vec(1, 1, 2, vec![-1.0, 2.0]).unwrap();
        leaky(&mut t, LEAKY_SLOPE);
        assert!((t.values[0] + 0.1).abs() < 1e-7);
        assert_eq!(t.values[1], 2.0);
    }

    #[test]
    fn batchnorm_leaky_applies_affine_then_activation() {
        let mut t = Tensor::from_vec(1, 1, 2, vec![3.0, -1.0]).unwrap();
        let bn = BatchNorm { scale: vec![2.0, 1.0], bias: vec![1.0, 0.0], mean: vec![1.0, 0.0], var: vec![4.0, 1.0] };
        batchnorm_leaky(&mut t, &bn).unwrap();
        assert!((t.values[0] - 3.0).abs() < 1e-5);
        assert!((t.values[1] + 0.1).abs() < 1e-5);
    }

    #[test]
    fn conv_rejects_non_finite_and_mismatched_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(4, 4, 3, &mut rng);
        let mut p = random_conv(3, 2, 3, false, &mut rng);
        p.weights[5] = f32::NAN;
        assert!(matches!(conv2d(&x, &p, Exec::Sequential), Err(Error::Numeric(_))));
        let p = random_conv(4, 2, 3, false, &mut rng);
        assert!(matches!(conv2d(&x, &p, Exec::Sequential), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_is_bit_identical_across_exec_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(13, 21, 9, &mut rng);
        let p = random_conv(9, 300, 3, true, &mut rng);
        assert_eq!(conv2d(&x, &p, Exec::Sequential).unwrap(), conv2d(&x, &p, Exec::Parallel).unwrap());
    }

    #[test]
    fn space_to_depth_small_example() {
        let x = Tensor::from_vec(4, 4, 1, (0..16).map(|v| v as f32).collect()).unwrap();
        let s = space_to_depth(&x).unwrap();
        assert_eq!(s.shape(), (2, 2, 4));
        assert_eq!(s.pixel(0, 0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(s.pixel(1, 1), &[10.0, 11.0, 14.0, 15.0]);
        let mut sorted = s.values.clone();
        sorted.sort_by(f32::total_cmp);
        assert_eq!(sorted, x.values);
        assert_eq!(depth_to_space(&s).unwrap(), x);
    }

    #[test]
    fn space_to_depth_round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (h, w, c) = (2 * rng.random_range(1..8), 2 * rng.random_range(1..8), rng.random_range(1..6));
            let x = random_tensor(h, w, c, &mut rng);
            assert_eq!(depth_to_space(&space_to_depth(&x).unwrap()).unwrap(), x);
        }
    }

    #[test]
    fn passthrough_shape_and_layout() {
        let fine = Tensor::zeros(52, 52, 256);
        let coarse = Tensor::zeros(26, 26, 1024);
        assert_eq!(passthrough(&fine, &coarse).unwrap().shape(), (26, 26, 2048));

        let fine = Tensor::from_vec(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let coarse = Tensor::from_vec(1, 1, 2, vec![-1.0, -2.0]).unwrap();
        assert_eq!(passthrough(&fine, &coarse).unwrap().values, vec![-1.0, -2.0, 1.0, 2.0, 3.0, 4.0]);

        assert!(passthrough(&Tensor::zeros(50, 52, 1), &coarse).is_err());
    }
}
