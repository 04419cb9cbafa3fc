//! Single-layer transformer encoders and their token machinery: 2D/1D
//! sinusoidal positions, spatial/temporal token assembly, multi-head
//! self-attention with post-norm residuals, and the final two-embedding
//! classifier. Gradients are hand-derived per operation and checked against
//! finite differences.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::FeatureTensor;

/// Ordered token embeddings with the class token position marked.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    /// `N x D`.
    pub tokens: FeatureTensor,
    pub class_index: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.extent(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.extent(1)
    }

    pub fn token(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.tokens.data()[i * d..(i + 1) * d]
    }
}

/// Fixed 2D sinusoidal position grid: half the channels encode y, half x,
/// each as interleaved sin/cos over geometric frequencies.
#[derive(Debug, Clone)]
pub struct PosEncoding2D {
    /// `D x H x W`.
    pub grid: FeatureTensor,
}

fn sincos_fill(pos: f64, dim: usize, out: &mut [f32]) {
    // dim/2 frequency pairs, interleaved sin/cos.
    let pairs = dim / 2;
    for j in 0..pairs {
        let omega = (10_000.0f64).powf(-2.0 * j as f64 / dim as f64);
        out[2 * j] = (pos * omega).sin() as f32;
        out[2 * j + 1] = (pos * omega).cos() as f32;
    }
}

/// Builds the 2D position grid. `dim` must be divisible by 4.
pub fn sincos_2d(dim: usize, height: usize, width: usize) -> Result<PosEncoding2D> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::Config(format!(
            "2D positional dim {dim} must be divisible by 4"
        )));
    }
    let half = dim / 2;
    let mut data = vec![0.0f32; dim * height * width];
    let plane = height * width;
    let mut ybuf = vec![0.0f32; half];
    let mut xbuf = vec![0.0f32; half];
    for y in 0..height {
        sincos_fill(y as f64, half, &mut ybuf);
        for x in 0..width {
            sincos_fill(x as f64, half, &mut xbuf);
            let p = y * width + x;
            for c in 0..half {
                data[c * plane + p] = ybuf[c];
                data[(half + c) * plane + p] = xbuf[c];
            }
        }
    }
    Ok(PosEncoding2D {
        grid: FeatureTensor::from_parts(
            vec![
                ("channel".to_string(), dim),
                ("height".to_string(), height),
                ("width".to_string(), width),
            ],
            data,
        ),
    })
}

/// 1D sinusoidal positions, one row per index. `dim` must be even.
pub fn sincos_1d(dim: usize, len: usize) -> Result<FeatureTensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!(
            "1D positional dim {dim} must be even"
        )));
    }
    let mut data = vec![0.0f32; len * dim];
    for (i, row) in data.chunks_exact_mut(dim).enumerate() {
        sincos_fill(i as f64, dim, row);
    }
    Ok(FeatureTensor::from_parts(
        vec![("pos".to_string(), len), ("channel".to_string(), dim)],
        data,
    ))
}

/// Assembles the spatial token sequence: `[class, H*W spatial row-major,
/// P part tokens]`. Spatial tokens get their grid position; part tokens get
/// a position interpolated at their (pixel-space) center plus the learned
/// frequency-position offset.
pub fn assemble_spatial_tokens(
    class_token: &[f32],
    spatial: &FeatureTensor,
    pe: &PosEncoding2D,
    parts: &[(Vec<f32>, f64, f64)],
    pos_freq: &[f32],
    frame_h: usize,
    frame_w: usize,
) -> Result<TokenSequence> {
    let (d, gh, gw) = (spatial.extent(0), spatial.extent(1), spatial.extent(2));
    if pe.grid.extent(0) != d || pe.grid.extent(1) != gh || pe.grid.extent(2) != gw {
        return Err(Error::Shape("position grid does not match features".into()));
    }
    if class_token.len() != d || pos_freq.len() != d {
        return Err(Error::Shape("token dim mismatch".into()));
    }
    let n = 1 + gh * gw + parts.len();
    let mut data = vec![0.0f32; n * d];
    data[..d].copy_from_slice(class_token);
    let plane = gh * gw;
    for y in 0..gh {
        for x in 0..gw {
            let tok = 1 + y * gw + x;
            let row = &mut data[tok * d..(tok + 1) * d];
            for c in 0..d {
                row[c] = spatial.data()[c * plane + y * gw + x]
                    + pe.grid.data()[c * plane + y * gw + x];
            }
        }
    }
    for (pi, (emb, a, b)) in parts.iter().enumerate() {
        if emb.len() != d {
            return Err(Error::Shape(format!("part {pi} embedding dim mismatch")));
        }
        if !(0.0..=(frame_w - 1) as f64).contains(a) || !(0.0..=(frame_h - 1) as f64).contains(b) {
            return Err(Error::Domain(format!(
                "part {pi} center ({a}, {b}) outside {frame_w}x{frame_h} frame"
            )));
        }
        // Scale pixel coordinates onto the feature grid (align-corners).
        let gx = if frame_w > 1 {
            a * (gw - 1) as f64 / (frame_w - 1) as f64
        } else {
            0.0
        };
        let gy = if frame_h > 1 {
            b * (gh - 1) as f64 / (frame_h - 1) as f64
        } else {
            0.0
        };
        let pos = crate::tensor::bilinear_sample(&pe.grid, gy, gx)?;
        let tok = 1 + plane + pi;
        let row = &mut data[tok * d..(tok + 1) * d];
        for c in 0..d {
            row[c] = emb[c] + pos[c] + pos_freq[c];
        }
    }
    Ok(TokenSequence {
        tokens: FeatureTensor::from_parts(
            vec![("token".to_string(), n), ("channel".to_string(), d)],
            data,
        ),
        class_index: 0,
    })
}

/// Assembles the temporal token sequence: `[class, T temporal tokens]` with
/// 1D positions, then the projected global-frequency vector added to every
/// token.
pub fn assemble_temporal_tokens(
    class_token: &[f32],
    temporal: &FeatureTensor,
    freq_proj: &[f32],
) -> Result<TokenSequence> {
    let (t, d) = (temporal.extent(0), temporal.extent(1));
    if class_token.len() != d || freq_proj.len() != d {
        return Err(Error::Shape("token dim mismatch".into()));
    }
    let pe = sincos_1d(d, t)?;
    let n = 1 + t;
    let mut data = vec![0.0f32; n * d];
    data[..d].copy_from_slice(class_token);
    for ti in 0..t {
        let row = &mut data[(1 + ti) * d..(2 + ti) * d];
        for c in 0..d {
            row[c] = temporal.data()[ti * d + c] + pe.data()[ti * d + c];
        }
    }
    for row in data.chunks_exact_mut(d) {
        for (v, &f) in row.iter_mut().zip(freq_proj) {
            *v += f;
        }
    }
    Ok(TokenSequence {
        tokens: FeatureTensor::from_parts(
            vec![("token".to_string(), n), ("channel".to_string(), d)],
            data,
        ),
        class_index: 0,
    })
}

const LN_EPS: f64 = 1e-6;

/// Normalizes each row to zero mean, unit variance (no affine). Returns the
/// normalized rows and per-row 1/std.
pub fn layer_norm_stats(x: &[f32], rows: usize, dim: usize) -> (Vec<f32>, Vec<f64>) {
    let mut out = vec![0.0f32; rows * dim];
    let mut inv_std = vec![0.0f64; rows];
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / dim as f64;
        let var: f64 =
            row.iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>() / dim as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = inv;
        for (o, &v) in out[r * dim..(r + 1) * dim].iter_mut().zip(row) {
            *o = ((v as f64 - mean) * inv) as f32;
        }
    }
    (out, inv_std)
}

// The encoder computes in f64 internally (parameters stay f32); only the
// output sequence is rounded back. This keeps the analytic backward passes
// checkable against finite differences at tight tolerances.

fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

fn to_f32(x: &[f64]) -> Vec<f32> {
    x.iter().map(|&v| v as f32).collect()
}

// a [m x k] times b^T where b is [n x k].
fn matmul_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f64;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

// a [m x k] times b [k x n].
fn matmul_nn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for l in 0..k {
                acc += a[i * k + l] * b[l * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

// a^T [k x m] times b [k x n] -> [m x n].
fn matmul_tn(a: &[f64], k: usize, m: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for l in 0..k {
                acc += a[l * m + i] * b[l * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

fn ln_stats64(x: &[f64], rows: usize, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0f64; rows * dim];
    let mut inv_std = vec![0.0f64; rows];
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean: f64 = row.iter().sum::<f64>() / dim as f64;
        let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = inv;
        for (o, &v) in out[r * dim..(r + 1) * dim].iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
    }
    (out, inv_std)
}

/// One standard post-norm transformer encoder layer.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub dim: usize,
    pub heads: usize,
    /// Query/key/value/output projections, each `D x D` (row = output unit).
    pub wq: FeatureTensor,
    pub wk: FeatureTensor,
    pub wv: FeatureTensor,
    pub wo: FeatureTensor,
    /// Feed-forward `4D x D` and `D x 4D` with biases.
    pub ff1: FeatureTensor,
    pub b1: FeatureTensor,
    pub ff2: FeatureTensor,
    pub b2: FeatureTensor,
    pub ln1_g: FeatureTensor,
    pub ln1_b: FeatureTensor,
    pub ln2_g: FeatureTensor,
    pub ln2_b: FeatureTensor,
}

/// Everything the encoder backward pass needs from the forward run.
pub struct EncoderTrace {
    x: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Per-head attention rows, `heads * N * N`.
    pub attn: Vec<f64>,
    attn_concat: Vec<f64>,
    norm1: Vec<f64>,
    inv1: Vec<f64>,
    h1: Vec<f64>,
    ff_mid: Vec<f64>,
    norm2: Vec<f64>,
    inv2: Vec<f64>,
    /// Output tokens at full internal precision.
    pub out64: Vec<f64>,
    pub out: TokenSequence,
}

impl EncoderTrace {
    /// Pre-residual attention mix (convex combination of value rows).
    pub fn attention_mix(&self) -> &[f64] {
        &self.attn_concat
    }

    /// Value projections, `N x D`.
    pub fn values(&self) -> &[f64] {
        &self.v
    }
}

/// Gradients for every encoder parameter.
#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub ff1: Vec<f32>,
    pub b1: Vec<f32>,
    pub ff2: Vec<f32>,
    pub b2: Vec<f32>,
    pub ln1_g: Vec<f32>,
    pub ln1_b: Vec<f32>,
    pub ln2_g: Vec<f32>,
    pub ln2_b: Vec<f32>,
}

impl EncoderLayer {
    pub fn seeded(rng: &mut ChaCha8Rng, dim: usize, heads: usize) -> Result<Self> {
        if dim == 0 || heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "encoder dim {dim} must be divisible by heads {heads}"
            )));
        }
        let hidden = 4 * dim;
        let proj_std = (1.0 / dim as f64).sqrt();
        let mut mk = |rows: usize, cols: usize, std: f64| -> FeatureTensor {
            let data: Vec<f32> = (0..rows * cols)
                .map(|_| (rng.gen_range(-1.0f64..1.0) * std) as f32)
                .collect();
            FeatureTensor::from_parts(
                vec![("out".to_string(), rows), ("in".to_string(), cols)],
                data,
            )
        };
        Ok(Self {
            dim,
            heads,
            wq: mk(dim, dim, proj_std),
            wk: mk(dim, dim, proj_std),
            wv: mk(dim, dim, proj_std),
            wo: mk(dim, dim, proj_std),
            ff1: mk(hidden, dim, proj_std),
            b1: FeatureTensor::zeros(&[("b", hidden)]),
            ff2: mk(dim, hidden, (1.0 / hidden as f64).sqrt()),
            b2: FeatureTensor::zeros(&[("b", dim)]),
            ln1_g: FeatureTensor::from_vec(&[("g", dim)], vec![1.0; dim])?,
            ln1_b: FeatureTensor::zeros(&[("b", dim)]),
            ln2_g: FeatureTensor::from_vec(&[("g", dim)], vec![1.0; dim])?,
            ln2_b: FeatureTensor::zeros(&[("b", dim)]),
        })
    }

    fn apply_ln(
        &self,
        x: &[f64],
        rows: usize,
        gamma: &FeatureTensor,
        beta: &FeatureTensor,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let (norm, inv) = ln_stats64(x, rows, d);
        let mut out = vec![0.0f64; rows * d];
        for r in 0..rows {
            for c in 0..d {
                out[r * d + c] = norm[r * d + c] * gamma.data()[c] as f64 + beta.data()[c] as f64;
            }
        }
        (out, norm, inv)
    }

    /// Forward pass with full trace.
    pub fn forward(&self, seq: &TokenSequence) -> Result<EncoderTrace> {
        let d = self.dim;
        if seq.dim() != d {
            return Err(Error::Shape(format!(
                "sequence dim {} does not match encoder dim {d}",
                seq.dim()
            )));
        }
        let n = seq.len();
        let x = to_f64(seq.tokens.data());
        let wq = to_f64(self.wq.data());
        let wk = to_f64(self.wk.data());
        let wv = to_f64(self.wv.data());
        let q = matmul_nt(&x, n, d, &wq, d);
        let k = matmul_nt(&x, n, d, &wk, d);
        let v = matmul_nt(&x, n, d, &wv, d);
        let hd = d / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut attn = vec![0.0f64; self.heads * n * n];
        let mut attn_concat = vec![0.0f64; n * d];
        for h in 0..self.heads {
            let off = h * hd;
            let probs = &mut attn[h * n * n..(h + 1) * n * n];
            for i in 0..n {
                // Scaled dot products with a stable softmax.
                let qrow = &q[i * d + off..i * d + off + hd];
                let mut row = vec![0.0f64; n];
                let mut maxv = f64::NEG_INFINITY;
                for (j, slot) in row.iter_mut().enumerate() {
                    let krow = &k[j * d + off..j * d + off + hd];
                    let mut acc = 0.0f64;
                    for (a, b) in qrow.iter().zip(krow) {
                        acc += a * b;
                    }
                    *slot = acc * scale;
                    maxv = maxv.max(*slot);
                }
                let mut denom = 0.0f64;
                for slot in row.iter_mut() {
                    *slot = (*slot - maxv).exp();
                    denom += *slot;
                }
                for (j, &e) in row.iter().enumerate() {
                    probs[i * n + j] = e / denom;
                }
                // Weighted value sum for this head.
                for c in 0..hd {
                    let mut acc = 0.0f64;
                    for j in 0..n {
                        acc += probs[i * n + j] * v[j * d + off + c];
                    }
                    attn_concat[i * d + off + c] = acc;
                }
            }
        }
        let attn_proj = matmul_nt(&attn_concat, n, d, &to_f64(self.wo.data()), d);
        let mut res1 = vec![0.0f64; n * d];
        for i in 0..n * d {
            res1[i] = x[i] + attn_proj[i];
        }
        let (h1, norm1, inv1) = self.apply_ln(&res1, n, &self.ln1_g, &self.ln1_b);
        let hidden = 4 * d;
        let mut ff_mid = matmul_nt(&h1, n, d, &to_f64(self.ff1.data()), hidden);
        for r in 0..n {
            for c in 0..hidden {
                let v = ff_mid[r * hidden + c] + self.b1.data()[c] as f64;
                ff_mid[r * hidden + c] = if v > 0.0 { v } else { 0.0 };
            }
        }
        let mut ff_out = matmul_nt(&ff_mid, n, hidden, &to_f64(self.ff2.data()), d);
        for r in 0..n {
            for c in 0..d {
                ff_out[r * d + c] += self.b2.data()[c] as f64;
            }
        }
        let mut res2 = vec![0.0f64; n * d];
        for i in 0..n * d {
            res2[i] = h1[i] + ff_out[i];
        }
        let (out, norm2, inv2) = self.apply_ln(&res2, n, &self.ln2_g, &self.ln2_b);
        Ok(EncoderTrace {
            x,
            q,
            k,
            v,
            attn,
            attn_concat,
            norm1,
            inv1,
            h1,
            ff_mid,
            norm2,
            inv2,
            out: TokenSequence {
                tokens: FeatureTensor::from_parts(
                    vec![("token".to_string(), n), ("channel".to_string(), d)],
                    to_f32(&out),
                ),
                class_index: seq.class_index,
            },
            out64: out,
        })
    }

    fn ln_backward(
        grad_out: &[f64],
        norm: &[f64],
        inv: &[f64],
        gamma: &[f32],
        rows: usize,
        dim: usize,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut dgamma = vec![0.0f64; dim];
        let mut dbeta = vec![0.0f64; dim];
        let mut dx = vec![0.0f64; rows * dim];
        for r in 0..rows {
            let g = &grad_out[r * dim..(r + 1) * dim];
            let nh = &norm[r * dim..(r + 1) * dim];
            let mut sum_g = 0.0f64;
            let mut sum_gn = 0.0f64;
            for c in 0..dim {
                let gg = g[c] * gamma[c] as f64;
                sum_g += gg;
                sum_gn += gg * nh[c];
                dgamma[c] += g[c] * nh[c];
                dbeta[c] += g[c];
            }
            let mean_g = sum_g / dim as f64;
            let mean_gn = sum_gn / dim as f64;
            for c in 0..dim {
                let gg = g[c] * gamma[c] as f64;
                dx[r * dim + c] = (gg - mean_g - nh[c] * mean_gn) * inv[r];
            }
        }
        (dx, dgamma, dbeta)
    }

    /// Backward pass: parameter gradients plus dL/d input tokens.
    pub fn backward(&self, trace: &EncoderTrace, grad_out: &FeatureTensor) -> (EncoderGrads, FeatureTensor) {
        let d = self.dim;
        let n = trace.out.len();
        let hidden = 4 * d;
        let g_out = to_f64(grad_out.data());

        // LN2.
        let (d_res2, ln2_g, ln2_b) = Self::ln_backward(
            &g_out,
            &trace.norm2,
            &trace.inv2,
            self.ln2_g.data(),
            n,
            d,
        );
        // Residual split: res2 = h1 + ff_out.
        let d_ffout = d_res2.clone();
        let mut d_h1 = d_res2;

        // Feed-forward.
        let ff2_g = matmul_tn(&d_ffout, n, d, &trace.ff_mid, hidden);
        let mut b2_g = vec![0.0f64; d];
        for r in 0..n {
            for c in 0..d {
                b2_g[c] += d_ffout[r * d + c];
            }
        }
        let mut d_mid = matmul_nn(&d_ffout, n, d, &to_f64(self.ff2.data()), hidden);
        for (dm, &m) in d_mid.iter_mut().zip(&trace.ff_mid) {
            if m <= 0.0 {
                *dm = 0.0;
            }
        }
        let ff1_g = matmul_tn(&d_mid, n, hidden, &trace.h1, d);
        let mut b1_g = vec![0.0f64; hidden];
        for r in 0..n {
            for c in 0..hidden {
                b1_g[c] += d_mid[r * hidden + c];
            }
        }
        let d_h1_ff = matmul_nn(&d_mid, n, hidden, &to_f64(self.ff1.data()), d);
        for (a, b) in d_h1.iter_mut().zip(&d_h1_ff) {
            *a += b;
        }

        // LN1.
        let (d_res1, ln1_g, ln1_b) = Self::ln_backward(
            &d_h1,
            &trace.norm1,
            &trace.inv1,
            self.ln1_g.data(),
            n,
            d,
        );
        // Residual split: res1 = x + attn_proj.
        let mut dx = d_res1.clone();
        let d_attn_proj = d_res1;

        // Output projection.
        let wo_g = matmul_tn(&d_attn_proj, n, d, &trace.attn_concat, d);
        let d_attn_concat = matmul_nn(&d_attn_proj, n, d, &to_f64(self.wo.data()), d);

        // Attention heads.
        let hd = d / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut dq = vec![0.0f64; n * d];
        let mut dk = vec![0.0f64; n * d];
        let mut dv = vec![0.0f64; n * d];
        for h in 0..self.heads {
            let off = h * hd;
            let probs = &trace.attn[h * n * n..(h + 1) * n * n];
            for i in 0..n {
                // dP row, then softmax backward to get dS row.
                let mut dp = vec![0.0f64; n];
                for (j, slot) in dp.iter_mut().enumerate() {
                    let mut acc = 0.0f64;
                    for c in 0..hd {
                        acc += d_attn_concat[i * d + off + c] * trace.v[j * d + off + c];
                    }
                    *slot = acc;
                }
                let dot: f64 = dp
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| v * probs[i * n + j])
                    .sum();
                for j in 0..n {
                    let p = probs[i * n + j];
                    let ds = (dp[j] - dot) * p * scale;
                    for c in 0..hd {
                        dq[i * d + off + c] += ds * trace.k[j * d + off + c];
                        dk[j * d + off + c] += ds * trace.q[i * d + off + c];
                    }
                }
                for j in 0..n {
                    let p = probs[i * n + j];
                    for c in 0..hd {
                        dv[j * d + off + c] += p * d_attn_concat[i * d + off + c];
                    }
                }
            }
        }
        let x = &trace.x;
        let wq_g = matmul_tn(&dq, n, d, x, d);
        let wk_g = matmul_tn(&dk, n, d, x, d);
        let wv_g = matmul_tn(&dv, n, d, x, d);
        let dx_q = matmul_nn(&dq, n, d, &to_f64(self.wq.data()), d);
        let dx_k = matmul_nn(&dk, n, d, &to_f64(self.wk.data()), d);
        let dx_v = matmul_nn(&dv, n, d, &to_f64(self.wv.data()), d);
        for i in 0..n * d {
            dx[i] += dx_q[i] + dx_k[i] + dx_v[i];
        }

        (
            EncoderGrads {
                wq: to_f32(&wq_g),
                wk: to_f32(&wk_g),
                wv: to_f32(&wv_g),
                wo: to_f32(&wo_g),
                ff1: to_f32(&ff1_g),
                b1: to_f32(&b1_g),
                ff2: to_f32(&ff2_g),
                b2: to_f32(&b2_g),
                ln1_g: to_f32(&ln1_g),
                ln1_b: to_f32(&ln1_b),
                ln2_g: to_f32(&ln2_g),
                ln2_b: to_f32(&ln2_b),
            },
            FeatureTensor::from_parts(
                vec![("token".to_string(), n), ("channel".to_string(), d)],
                to_f32(&dx),
            ),
        )
    }
}

/// Spec surface: run the encoder, returning just the output sequence.
pub fn encoder_forward(layer: &EncoderLayer, seq: &TokenSequence) -> Result<TokenSequence> {
    Ok(layer.forward(seq)?.out)
}

/// Final classifier over the two class embeddings: the spatial embedding is
/// first passed through an alignment projection, then both are concatenated
/// into a single linear logit.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    /// `D x D` alignment of the spatial embedding.
    pub wb: FeatureTensor,
    /// `2D` weights over `[wb * e_s, e_t]`.
    pub w: FeatureTensor,
    pub bias: f32,
}

impl ClassifierHead {
    pub fn seeded(rng: &mut ChaCha8Rng, dim: usize) -> Self {
        let std = (1.0 / dim as f64).sqrt();
        let wb: Vec<f32> = (0..dim * dim)
            .map(|_| (rng.gen_range(-1.0f64..1.0) * std) as f32)
            .collect();
        let w: Vec<f32> = (0..2 * dim)
            .map(|_| (rng.gen_range(-1.0f64..1.0) * std) as f32)
            .collect();
        Self {
            wb: FeatureTensor::from_parts(
                vec![("out".to_string(), dim), ("in".to_string(), dim)],
                wb,
            ),
            w: FeatureTensor::from_parts(vec![("in".to_string(), 2 * dim)], w),
            bias: 0.0,
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            wb: FeatureTensor::zeros(&[("out", dim), ("in", dim)]),
            w: FeatureTensor::zeros(&[("in", 2 * dim)]),
            bias: 0.0,
        }
    }

    /// Logit from the two class embeddings.
    pub fn classify(&self, e_s: &[f32], e_t: &[f32]) -> f64 {
        let d = self.wb.extent(0);
        let mut logit = self.bias as f64;
        for o in 0..d {
            let mut acc = 0.0f64;
            for i in 0..d {
                acc += self.wb.data()[o * d + i] as f64 * e_s[i] as f64;
            }
            logit += self.w.data()[o] as f64 * acc;
        }
        for (i, &v) in e_t.iter().enumerate() {
            logit += self.w.data()[d + i] as f64 * v as f64;
        }
        logit
    }

    /// Backward from dL/d logit. Returns (dWb, dW, dBias, dE_S, dE_T).
    pub fn backward(
        &self,
        e_s: &[f32],
        e_t: &[f32],
        d_logit: f64,
    ) -> (Vec<f32>, Vec<f32>, f32, Vec<f32>, Vec<f32>) {
        let d = self.wb.extent(0);
        let mut aligned = vec![0.0f64; d];
        for o in 0..d {
            for i in 0..d {
                aligned[o] += self.wb.data()[o * d + i] as f64 * e_s[i] as f64;
            }
        }
        let mut dw = vec![0.0f32; 2 * d];
        for o in 0..d {
            dw[o] = (d_logit * aligned[o]) as f32;
            dw[d + o] = (d_logit * e_t[o] as f64) as f32;
        }
        let mut dwb = vec![0.0f32; d * d];
        let mut des = vec![0.0f32; d];
        for o in 0..d {
            let up = d_logit * self.w.data()[o] as f64;
            for i in 0..d {
                dwb[o * d + i] = (up * e_s[i] as f64) as f32;
                des[i] += (up * self.wb.data()[o * d + i] as f64) as f32;
            }
        }
        let det: Vec<f32> = (0..d)
            .map(|i| (d_logit * self.w.data()[d + i] as f64) as f32)
            .collect();
        (dwb, dw, d_logit as f32, des, det)
    }
}
