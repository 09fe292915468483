//! Dense f64 tensors and the raw numeric kernels the rest of the crate is
//! built on (matrix products, causal 3D convolution, nearest-neighbour
//! upsampling).
//!
//! All kernels are deterministic: every output element is produced by a
//! single fixed-order reduction, so results are bitwise identical whether a
//! kernel runs on one thread or many.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

/// Work threshold (in multiply-adds) below which kernels stay single-threaded.
const PAR_THRESHOLD: usize = 1 << 16;

/// A dense row-major f64 tensor. Cloning is cheap (shared storage);
/// mutation copies on write.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Self { shape: shape.to_vec(), data: Arc::new(data) }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_vec(shape, vec![0.0; shape.iter().product()])
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self::from_vec(shape, vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(&[1], vec![value])
    }

    /// Standard-normal samples in row-major order from `rng`.
    pub fn randn<R: Rng>(shape: &[usize], rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self::from_vec(shape, data)
    }

    /// Uniform samples in [lo, hi).
    pub fn rand_uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Self::from_vec(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn reshape(&self, shape: &[usize]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.len(),
            "cannot reshape {:?} into {:?}",
            self.shape,
            shape
        );
        Self { shape: shape.to_vec(), data: Arc::clone(&self.data) }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_vec(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor) -> Self {
        assert_eq!(self.shape, other.shape, "add: shape mismatch");
        let data = self.data.iter().zip(other.data.iter()).map(|(a, b)| a + b).collect();
        Self::from_vec(&self.shape, data)
    }

    pub fn sub(&self, other: &Tensor) -> Self {
        assert_eq!(self.shape, other.shape, "sub: shape mismatch");
        let data = self.data.iter().zip(other.data.iter()).map(|(a, b)| a - b).collect();
        Self::from_vec(&self.shape, data)
    }

    pub fn mul(&self, other: &Tensor) -> Self {
        assert_eq!(self.shape, other.shape, "mul: shape mismatch");
        let data = self.data.iter().zip(other.data.iter()).map(|(a, b)| a * b).collect();
        Self::from_vec(&self.shape, data)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.sum() / self.len() as f64
        }
    }

    pub fn abs_sum(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// c (m×n) = a (m×k) · b (k×n), row-major.
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    let body = |i: usize, crow: &mut [f64]| {
        let arow = &a[i * k..(i + 1) * k];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| body(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            body(i, crow);
        }
    }
    c
}

/// c (m×n) = a (m×k) · bᵀ where b is stored n×k row-major.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0; m * n];
    let body = |i: usize, crow: &mut [f64]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            *cv = acc;
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| body(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            body(i, crow);
        }
    }
    c
}

/// c (m×n) = aᵀ · b where a is stored k×m and b is k×n, row-major.
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    let body = |i: usize, crow: &mut [f64]| {
        for l in 0..k {
            let av = a[l * m + i];
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| body(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            body(i, crow);
        }
    }
    c
}

/// Geometry of a causal 3D convolution over a channel-last [T,H,W,C] tensor.
///
/// Temporal padding is applied on the past side only (`pad_t` zero frames
/// before frame 0), so an output frame never sees future input frames.
/// Spatial padding is symmetric.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
    pub st: usize,
    pub sh: usize,
    pub sw: usize,
    pub pad_t: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl Conv3dSpec {
    /// Stride-1 convolution with causal temporal padding and "same" spatial
    /// padding (odd kernels).
    pub fn same(c_in: usize, c_out: usize, kt: usize, kh: usize, kw: usize) -> Self {
        Self {
            c_in,
            c_out,
            kt,
            kh,
            kw,
            st: 1,
            sh: 1,
            sw: 1,
            pad_t: kt - 1,
            pad_h: kh / 2,
            pad_w: kw / 2,
        }
    }

    /// Spatial stride-2 downsampling, temporally causal.
    pub fn down_spatial(c_in: usize, c_out: usize) -> Self {
        Self { sh: 2, sw: 2, ..Self::same(c_in, c_out, 3, 3, 3) }
    }

    /// Temporal downsampling by `factor`: maps T = factor·m + 1 input frames
    /// to m + 1 output frames (kernel = stride = factor, front pad factor−1).
    pub fn down_temporal(c_in: usize, c_out: usize, factor: usize) -> Self {
        Self {
            c_in,
            c_out,
            kt: factor,
            kh: 3,
            kw: 3,
            st: factor,
            sh: 1,
            sw: 1,
            pad_t: factor - 1,
            pad_h: 1,
            pad_w: 1,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.kt * self.kh * self.kw * self.c_in * self.c_out
    }

    /// Weight layout is [kt][kh][kw][c_in][c_out]: one contiguous
    /// c_in×c_out slab per kernel tap.
    pub fn weight_shape(&self) -> [usize; 5] {
        [self.kt, self.kh, self.kw, self.c_in, self.c_out]
    }

    pub fn out_dims(&self, t: usize, h: usize, w: usize) -> (usize, usize, usize) {
        assert!(t + self.pad_t >= self.kt, "temporal axis {t} too short for kernel {}", self.kt);
        assert!(h + 2 * self.pad_h >= self.kh, "height {h} too short for kernel {}", self.kh);
        assert!(w + 2 * self.pad_w >= self.kw, "width {w} too short for kernel {}", self.kw);
        let ot = (t + self.pad_t - self.kt) / self.st + 1;
        let oh = (h + 2 * self.pad_h - self.kh) / self.sh + 1;
        let ow = (w + 2 * self.pad_w - self.kw) / self.sw + 1;
        (ot, oh, ow)
    }
}

/// Forward causal conv3d. `input` is [T,H,W,Cin] flattened, returns
/// [oT,oH,oW,Cout] flattened plus the output dims.
pub fn conv3d_forward(
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    spec: &Conv3dSpec,
    t: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, (usize, usize, usize)) {
    debug_assert_eq!(input.len(), t * h * w * spec.c_in);
    debug_assert_eq!(weight.len(), spec.weight_len());
    debug_assert_eq!(bias.len(), spec.c_out);
    let (ot, oh, ow) = spec.out_dims(t, h, w);
    let (ci, co) = (spec.c_in, spec.c_out);
    let slab = ci * co;
    let mut out = vec![0.0; ot * oh * ow * co];

    let row_body = |row_idx: usize, orow: &mut [f64]| {
        // one output row = fixed (to, ho), all wo
        let to = row_idx / oh;
        let ho = row_idx % oh;
        for wo in 0..ow {
            let acc = &mut orow[wo * co..(wo + 1) * co];
            acc.copy_from_slice(bias);
            for kt in 0..spec.kt {
                let ti = (to * spec.st + kt) as isize - spec.pad_t as isize;
                if ti < 0 || ti as usize >= t {
                    continue;
                }
                for kh in 0..spec.kh {
                    let hi = (ho * spec.sh + kh) as isize - spec.pad_h as isize;
                    if hi < 0 || hi as usize >= h {
                        continue;
                    }
                    for kw in 0..spec.kw {
                        let wi = (wo * spec.sw + kw) as isize - spec.pad_w as isize;
                        if wi < 0 || wi as usize >= w {
                            continue;
                        }
                        let in_off = (((ti as usize * h) + hi as usize) * w + wi as usize) * ci;
                        let wslab = &weight[((kt * spec.kh + kh) * spec.kw + kw) * slab..][..slab];
                        for c in 0..ci {
                            let x = input[in_off + c];
                            let wrow = &wslab[c * co..(c + 1) * co];
                            for (a, &wv) in acc.iter_mut().zip(wrow.iter()) {
                                *a += x * wv;
                            }
                        }
                    }
                }
            }
        }
    };

    let work = ot * oh * ow * co * ci * spec.kt * spec.kh * spec.kw;
    let row_len = ow * co;
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(row_len).enumerate().for_each(|(i, orow)| row_body(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(row_len).enumerate() {
            row_body(i, orow);
        }
    }
    (out, (ot, oh, ow))
}

/// Backward of [`conv3d_forward`]: returns (d_input, d_weight, d_bias).
///
/// d_weight parallelizes over kernel taps (each tap owns its weight slab)
/// and d_input over input rows (gather form), so every accumulator has a
/// fixed reduction order regardless of thread count.
pub fn conv3d_backward(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    spec: &Conv3dSpec,
    t: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (ot, oh, ow) = spec.out_dims(t, h, w);
    debug_assert_eq!(grad_out.len(), ot * oh * ow * spec.c_out);
    let (ci, co) = (spec.c_in, spec.c_out);
    let slab = ci * co;

    let mut d_bias = vec![0.0; co];
    for g in grad_out.chunks(co) {
        for (db, &gv) in d_bias.iter_mut().zip(g.iter()) {
            *db += gv;
        }
    }

    // d_weight: one task per kernel tap, each writing only its own slab
    let mut d_weight = vec![0.0; weight.len()];
    let tap_body = |tap: usize, dslab: &mut [f64]| {
        let kt = tap / (spec.kh * spec.kw);
        let kh = (tap / spec.kw) % spec.kh;
        let kw = tap % spec.kw;
        for to in 0..ot {
            let ti = (to * spec.st + kt) as isize - spec.pad_t as isize;
            if ti < 0 || ti as usize >= t {
                continue;
            }
            for ho in 0..oh {
                let hi = (ho * spec.sh + kh) as isize - spec.pad_h as isize;
                if hi < 0 || hi as usize >= h {
                    continue;
                }
                for wo in 0..ow {
                    let wi = (wo * spec.sw + kw) as isize - spec.pad_w as isize;
                    if wi < 0 || wi as usize >= w {
                        continue;
                    }
                    let g = &grad_out[((to * oh + ho) * ow + wo) * co..][..co];
                    let in_off = (((ti as usize * h) + hi as usize) * w + wi as usize) * ci;
                    for c in 0..ci {
                        let x = input[in_off + c];
                        let dwrow = &mut dslab[c * co..(c + 1) * co];
                        for (dw, &gv) in dwrow.iter_mut().zip(g.iter()) {
                            *dw += gv * x;
                        }
                    }
                }
            }
        }
    };
    let work = ot * oh * ow * co * ci;
    if work >= PAR_THRESHOLD {
        d_weight
            .par_chunks_mut(slab)
            .enumerate()
            .for_each(|(tap, dslab)| tap_body(tap, dslab));
    } else {
        for (tap, dslab) in d_weight.chunks_mut(slab).enumerate() {
            tap_body(tap, dslab);
        }
    }

    // d_input: gather over the taps that could have read each input row
    let mut d_input = vec![0.0; input.len()];
    let row_len = w * ci;
    let in_body = |row_idx: usize, drow: &mut [f64]| {
        let ti = row_idx / h;
        let hi = row_idx % h;
        for kt in 0..spec.kt {
            let to_num = ti as isize + spec.pad_t as isize - kt as isize;
            if to_num < 0 || to_num % spec.st as isize != 0 {
                continue;
            }
            let to = (to_num / spec.st as isize) as usize;
            if to >= ot {
                continue;
            }
            for kh in 0..spec.kh {
                let ho_num = hi as isize + spec.pad_h as isize - kh as isize;
                if ho_num < 0 || ho_num % spec.sh as isize != 0 {
                    continue;
                }
                let ho = (ho_num / spec.sh as isize) as usize;
                if ho >= oh {
                    continue;
                }
                for kw in 0..spec.kw {
                    let woff = ((kt * spec.kh + kh) * spec.kw + kw) * slab;
                    for wi in 0..w {
                        let wo_num = wi as isize + spec.pad_w as isize - kw as isize;
                        if wo_num < 0 || wo_num % spec.sw as isize != 0 {
                            continue;
                        }
                        let wo = (wo_num / spec.sw as isize) as usize;
                        if wo >= ow {
                            continue;
                        }
                        let g = &grad_out[((to * oh + ho) * ow + wo) * co..][..co];
                        for c in 0..ci {
                            let wrow = &weight[woff + c * co..][..co];
                            let mut dx = 0.0;
                            for (&gv, &wv) in g.iter().zip(wrow.iter()) {
                                dx += gv * wv;
                            }
                            drow[wi * ci + c] += dx;
                        }
                    }
                }
            }
        }
    };
    if work >= PAR_THRESHOLD {
        d_input
            .par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, drow)| in_body(i, drow));
    } else {
        for (i, drow) in d_input.chunks_mut(row_len).enumerate() {
            in_body(i, drow);
        }
    }
    (d_input, d_weight, d_bias)
}

/// Nearest-neighbour spatial ×2 upsample of a [T,H,W,C] tensor.
pub fn upsample_spatial2_forward(input: &[f64], t: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * 4 * h * w * c];
    let (oh, ow) = (2 * h, 2 * w);
    for ti in 0..t {
        for ho in 0..oh {
            let hi = ho / 2;
            for wo in 0..ow {
                let wi = wo / 2;
                let src = (((ti * h) + hi) * w + wi) * c;
                let dst = (((ti * oh) + ho) * ow + wo) * c;
                out[dst..dst + c].copy_from_slice(&input[src..src + c]);
            }
        }
    }
    out
}

pub fn upsample_spatial2_backward(grad_out: &[f64], t: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut d_in = vec![0.0; t * h * w * c];
    for ti in 0..t {
        for hi in 0..h {
            for wi in 0..w {
                let dst = (((ti * h) + hi) * w + wi) * c;
                for dh in 0..2 {
                    for dw in 0..2 {
                        let src = (((ti * oh) + 2 * hi + dh) * ow + 2 * wi + dw) * c;
                        for j in 0..c {
                            d_in[dst + j] += grad_out[src + j];
                        }
                    }
                }
            }
        }
    }
    d_in
}

/// Causal temporal upsample: frame 0 maps to one output frame, every later
/// frame to `factor` output frames, so m+1 inputs become factor·m + 1 outputs.
pub fn upsample_temporal_causal_forward(
    input: &[f64],
    t: usize,
    hw_c: usize,
    factor: usize,
) -> (Vec<f64>, usize) {
    assert!(t >= 1);
    let ot = factor * (t - 1) + 1;
    let mut out = vec![0.0; ot * hw_c];
    for to in 0..ot {
        let ti = if to == 0 { 0 } else { (to - 1) / factor + 1 };
        out[to * hw_c..(to + 1) * hw_c].copy_from_slice(&input[ti * hw_c..(ti + 1) * hw_c]);
    }
    (out, ot)
}

pub fn upsample_temporal_causal_backward(
    grad_out: &[f64],
    t: usize,
    hw_c: usize,
    factor: usize,
) -> Vec<f64> {
    let ot = factor * (t - 1) + 1;
    debug_assert_eq!(grad_out.len(), ot * hw_c);
    let mut d_in = vec![0.0; t * hw_c];
    for to in 0..ot {
        let ti = if to == 0 { 0 } else { (to - 1) / factor + 1 };
        let src = &grad_out[to * hw_c..(to + 1) * hw_c];
        let dst = &mut d_in[ti * hw_c..(ti + 1) * hw_c];
        for (d, &g) in dst.iter_mut().zip(src.iter()) {
            *d += g;
        }
    }
    d_in
}
