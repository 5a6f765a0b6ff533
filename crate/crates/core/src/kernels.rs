//! Row-level kernels shared by the batched graph forward and the incremental
//! decoder. Each output row depends only on its own inputs and is reduced in a
//! fixed order, so a row computed inside a batch is bit-identical to the same
//! row computed alone.

/// Dot product with eight interleaved accumulators, combined in a fixed tree.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let base = c * 8;
        let xa = &a[base..base + 8];
        let xb = &b[base..base + 8];
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = 0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let s0 = (acc[0] + acc[4]) + (acc[2] + acc[6]);
    let s1 = (acc[1] + acc[5]) + (acc[3] + acc[7]);
    (s0 + s1) + tail
}

#[inline]
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[o] = dot(x, w[o, :])` for a row-major `[out × in]` weight.
pub fn linear_row(x: &[f32], w: &[f32], out: &mut [f32]) {
    let n_in = x.len();
    debug_assert_eq!(w.len(), n_in * out.len());
    for (o, y) in out.iter_mut().enumerate() {
        *y = dot(x, &w[o * n_in..(o + 1) * n_in]);
    }
}

/// Batched `y = x · wᵀ`, x is `[rows × in]`.
pub fn linear_rows(x: &[f32], n_in: usize, w: &[f32], n_out: usize) -> Vec<f32> {
    let rows = x.len() / n_in;
    let mut y = vec![0f32; rows * n_out];
    for r in 0..rows {
        linear_row(&x[r * n_in..(r + 1) * n_in], w, &mut y[r * n_out..(r + 1) * n_out]);
    }
    y
}

/// Normalizes one row; returns the reciprocal RMS that was applied.
pub fn rmsnorm_row(x: &[f32], gamma: &[f32], eps: f64, out: &mut [f32]) -> f32 {
    let ms = x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64;
    let inv = (1.0 / (ms + eps).sqrt()) as f32;
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gamma) {
        *o = v * inv * g;
    }
    inv
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

pub fn swiglu_row(gate: &[f32], up: &[f32], out: &mut [f32]) {
    for ((o, &g), &u) in out.iter_mut().zip(gate).zip(up) {
        *o = silu(g) * u;
    }
}

/// In-place max-subtracted softmax over a slice.
pub fn softmax_in_place(x: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0f32;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in x.iter_mut() {
        *v *= inv;
    }
}

/// Precomputed rotary angles, rotate-half layout.
#[derive(Clone, Debug)]
pub struct RopeTable {
    half: usize,
    positions: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl RopeTable {
    pub fn new(head_dim: usize, positions: usize, base: f64) -> Self {
        assert!(head_dim % 2 == 0, "rotary head_dim must be even");
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(positions * half);
        let mut sin = Vec::with_capacity(positions * half);
        for p in 0..positions {
            for i in 0..half {
                let freq = base.powf(-2.0 * i as f64 / head_dim as f64);
                let angle = p as f64 * freq;
                cos.push(angle.cos() as f32);
                sin.push(angle.sin() as f32);
            }
        }
        Self { half, positions, cos, sin }
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    /// Rotates every head of `row` (length `heads * head_dim`) to position `pos`.
    pub fn rotate(&self, row: &mut [f32], pos: usize) {
        let hd = self.half * 2;
        let c = &self.cos[pos * self.half..(pos + 1) * self.half];
        let s = &self.sin[pos * self.half..(pos + 1) * self.half];
        for head in row.chunks_mut(hd) {
            let (x1, x2) = head.split_at_mut(self.half);
            for i in 0..self.half {
                let a = x1[i];
                let b = x2[i];
                x1[i] = a * c[i] - b * s[i];
                x2[i] = b * c[i] + a * s[i];
            }
        }
    }

    /// Transpose of `rotate`, used for the backward pass.
    pub fn rotate_back(&self, row: &mut [f32], pos: usize) {
        let hd = self.half * 2;
        let c = &self.cos[pos * self.half..(pos + 1) * self.half];
        let s = &self.sin[pos * self.half..(pos + 1) * self.half];
        for head in row.chunks_mut(hd) {
            let (x1, x2) = head.split_at_mut(self.half);
            for i in 0..self.half {
                let a = x1[i];
                let b = x2[i];
                x1[i] = a * c[i] + b * s[i];
                x2[i] = b * c[i] - a * s[i];
            }
        }
    }
}

/// Causal attention for one query head against keys `0..=last`.
///
/// `keys`/`values` hold one row per position with `stride` floats per row; the
/// head's slice starts at `offset`. `probs` receives the `last + 1` attention
/// weights.
#[allow(clippy::too_many_arguments)]
pub fn attend_row(
    q: &[f32],
    keys: &[f32],
    values: &[f32],
    stride: usize,
    offset: usize,
    last: usize,
    scale: f32,
    probs: &mut [f32],
    out: &mut [f32],
) {
    let hd = q.len();
    for j in 0..=last {
        let k = &keys[j * stride + offset..j * stride + offset + hd];
        probs[j] = dot(q, k) * scale;
    }
    softmax_in_place(&mut probs[..=last]);
    out.iter_mut().for_each(|o| *o = 0.0);
    for j in 0..=last {
        let v = &values[j * stride + offset..j * stride + offset + hd];
        axpy(probs[j], v, out);
    }
}
