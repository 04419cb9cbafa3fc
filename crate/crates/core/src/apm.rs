//! Attention proposal: differentiable soft rectangular masks, window crops,
//! the left/right gradient-routing rule for mask centers, and the linear
//! regressor that proposes part centers from pooled features.
//!
//! Throughout this module `a` is the x (width-axis) center and `b` the y
//! (height-axis) center of a part, in pixels.

use crate::error::{Error, Result};
use crate::spectrum::SpectrumVolume;
use crate::tensor::FeatureTensor;

/// Parameters of one soft rectangular mask: center (a, b), half-size theta,
/// and the logistic edge scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftMaskParams {
    /// x center in pixels.
    pub a: f64,
    /// y center in pixels.
    pub b: f64,
    /// Half-size of the rectangle in pixels.
    pub theta: f64,
    /// Logistic scale of the mask edges.
    pub scale: f64,
}

impl SoftMaskParams {
    pub fn new(a: f64, b: f64, theta: f64, scale: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite()) {
            return Err(Error::Domain("mask center must be finite".into()));
        }
        if theta <= 0.0 || scale <= 0.0 {
            return Err(Error::Config(format!(
                "theta {theta} and scale {scale} must be positive"
            )));
        }
        Ok(Self { a, b, theta, scale })
    }
}

/// The proposed part centers for one clip.
#[derive(Debug, Clone)]
pub struct PartSet {
    pub parts: Vec<SoftMaskParams>,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn sigmoid_deriv(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 - s)
}

/// One axis of the mask: a near-binary plateau of width 2*theta centered at
/// `c`, built from the difference of two logistic ramps.
#[inline]
fn ramp(u: f64, c: f64, theta: f64, scale: f64) -> f64 {
    sigmoid(scale * (u - (c - theta))) - sigmoid(scale * (u - (c + theta)))
}

/// d ramp / d c.
#[inline]
fn ramp_dc(u: f64, c: f64, theta: f64, scale: f64) -> f64 {
    scale
        * (sigmoid_deriv(scale * (u - (c + theta)))
            - sigmoid_deriv(scale * (u - (c - theta))))
}

/// Continuous mask value at fractional (y, x).
pub fn soft_mask_at(p: &SoftMaskParams, y: f64, x: f64) -> f64 {
    ramp(x, p.a, p.theta, p.scale) * ramp(y, p.b, p.theta, p.scale)
}

/// Evaluates the soft mask on the integer pixel grid.
pub fn soft_mask(p: &SoftMaskParams, height: usize, width: usize) -> FeatureTensor {
    let (xr, yr) = mask_ramps(p, height, width);
    let mut data = vec![0.0f32; height * width];
    for y in 0..height {
        for x in 0..width {
            data[y * width + x] = (yr[y] * xr[x]) as f32;
        }
    }
    FeatureTensor::from_parts(
        vec![("height".to_string(), height), ("width".to_string(), width)],
        data,
    )
}

fn mask_ramps(p: &SoftMaskParams, height: usize, width: usize) -> (Vec<f64>, Vec<f64>) {
    let xr: Vec<f64> = (0..width)
        .map(|x| ramp(x as f64, p.a, p.theta, p.scale))
        .collect();
    let yr: Vec<f64> = (0..height)
        .map(|y| ramp(y as f64, p.b, p.theta, p.scale))
        .collect();
    (xr, yr)
}

/// Analytic per-pixel derivatives of the mask with respect to its center:
/// `(dM/da, dM/db)` as row-major `height * width` fields.
pub fn soft_mask_grad(p: &SoftMaskParams, height: usize, width: usize) -> (Vec<f64>, Vec<f64>) {
    let (xr, yr) = mask_ramps(p, height, width);
    let dxr: Vec<f64> = (0..width)
        .map(|x| ramp_dc(x as f64, p.a, p.theta, p.scale))
        .collect();
    let dyr: Vec<f64> = (0..height)
        .map(|y| ramp_dc(y as f64, p.b, p.theta, p.scale))
        .collect();
    let mut da = vec![0.0f64; height * width];
    let mut db = vec![0.0f64; height * width];
    for y in 0..height {
        for x in 0..width {
            da[y * width + x] = yr[y] * dxr[x];
            db[y * width + x] = dyr[y] * xr[x];
        }
    }
    (da, db)
}

/// Forward record of a mask-and-crop: the extracted window plus everything
/// the backward passes need.
pub struct MaskCropTrace {
    /// `bin x out x out` window of the masked volume.
    pub window: FeatureTensor,
    /// Mask on the full grid, row-major `height * width`, in f64.
    pub mask: Vec<f64>,
    /// Sample rows (y) and columns (x) of the window cells.
    pub ys: Vec<f64>,
    pub xs: Vec<f64>,
}

fn sample_positions(center: f64, theta: f64, out_size: usize, limit: usize) -> Vec<f64> {
    // out_size cells spanning [center - theta, center + theta], sampled at
    // cell centers and clamped to the grid.
    let step = 2.0 * theta / out_size as f64;
    (0..out_size)
        .map(|i| {
            (center - theta + (i as f64 + 0.5) * step).clamp(0.0, (limit - 1) as f64)
        })
        .collect()
}

/// Multiplies a `bin x height x width` volume by the soft mask (broadcast
/// over bins) and extracts the `out_size`-square window centered on the mask
/// via bilinear sampling, so the result varies smoothly with the center.
pub fn mask_crop_trace(
    volume: &FeatureTensor,
    p: &SoftMaskParams,
    out_size: usize,
) -> Result<MaskCropTrace> {
    if volume.rank() != 3 {
        return Err(Error::Shape("mask_crop needs a rank-3 volume".into()));
    }
    if out_size == 0 {
        return Err(Error::Config("mask_crop out_size must be positive".into()));
    }
    let (k, h, w) = (volume.extent(0), volume.extent(1), volume.extent(2));
    let (xr, yr) = mask_ramps(p, h, w);
    let mut mask = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            mask[y * w + x] = yr[y] * xr[x];
        }
    }
    let ys = sample_positions(p.b, p.theta, out_size, h);
    let xs = sample_positions(p.a, p.theta, out_size, w);
    let src = volume.data();
    let mut out = vec![0.0f32; k * out_size * out_size];
    for (vi, &sy) in ys.iter().enumerate() {
        let y0 = (sy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for (ui, &sx) in xs.iter().enumerate() {
            let x0 = (sx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let m00 = mask[y0 * w + x0];
            let m01 = mask[y0 * w + x1];
            let m10 = mask[y1 * w + x0];
            let m11 = mask[y1 * w + x1];
            for bin in 0..k {
                let base = bin * h * w;
                let v00 = src[base + y0 * w + x0] as f64 * m00;
                let v01 = src[base + y0 * w + x1] as f64 * m01;
                let v10 = src[base + y1 * w + x0] as f64 * m10;
                let v11 = src[base + y1 * w + x1] as f64 * m11;
                let top = v00 + fx * (v01 - v00);
                let bot = v10 + fx * (v11 - v10);
                out[(bin * out_size + vi) * out_size + ui] = (top + fy * (bot - top)) as f32;
            }
        }
    }
    Ok(MaskCropTrace {
        window: FeatureTensor::from_parts(
            vec![
                ("bin".to_string(), k),
                ("height".to_string(), out_size),
                ("width".to_string(), out_size),
            ],
            out,
        ),
        mask,
        ys,
        xs,
    })
}

/// Spec surface of [`mask_crop_trace`]: just the cropped window.
pub fn mask_crop(
    volume: &SpectrumVolume,
    p: &SoftMaskParams,
    out_size: usize,
) -> Result<FeatureTensor> {
    Ok(mask_crop_trace(&volume.data, p, out_size)?.window)
}

/// Adjoint of the window extraction: scatters a window-shaped gradient back
/// onto the masked volume (the field the center-update rule consumes).
pub fn crop_grad_to_masked(
    trace: &MaskCropTrace,
    grad_window: &FeatureTensor,
    height: usize,
    width: usize,
) -> FeatureTensor {
    let k = grad_window.extent(0);
    let out_size = grad_window.extent(1);
    let mut acc = vec![0.0f64; k * height * width];
    let g = grad_window.data();
    for (vi, &sy) in trace.ys.iter().enumerate() {
        let y0 = (sy.floor() as usize).min(height - 1);
        let y1 = (y0 + 1).min(height - 1);
        let fy = sy - y0 as f64;
        for (ui, &sx) in trace.xs.iter().enumerate() {
            let x0 = (sx.floor() as usize).min(width - 1);
            let x1 = (x0 + 1).min(width - 1);
            let fx = sx - x0 as f64;
            for bin in 0..k {
                let gv = g[(bin * out_size + vi) * out_size + ui] as f64;
                let base = bin * height * width;
                acc[base + y0 * width + x0] += gv * (1.0 - fy) * (1.0 - fx);
                acc[base + y0 * width + x1] += gv * (1.0 - fy) * fx;
                acc[base + y1 * width + x0] += gv * fy * (1.0 - fx);
                acc[base + y1 * width + x1] += gv * fy * fx;
            }
        }
    }
    FeatureTensor::from_parts(
        vec![
            ("bin".to_string(), k),
            ("height".to_string(), height),
            ("width".to_string(), width),
        ],
        acc.into_iter().map(|v| v as f32).collect(),
    )
}

/// Center displacement proposed by the left/right gradient-routing rule.
///
/// The gradient field with respect to the masked volume is restricted to the
/// mask window and split at the center along each axis; `da` is the
/// right-half squared magnitude minus the left-half, normalized by the total
/// mass of both halves, so gradient mass on the left gives `da < 0`, pushing
/// the center left. `db` works the same way along y. Descent treats the
/// negated displacement as the gradient of the center coordinate. The
/// normalization bounds the displacement by one, which keeps the center
/// update commensurate with the other parameter updates at a shared
/// learning rate.
///
/// Halves are accumulated in mirrored column order, which makes the result
/// exactly zero for symmetric fields and exactly antisymmetric under
/// mirror flips.
pub fn apm_coordinate_gradient(
    grad_patch: &FeatureTensor,
    p: &SoftMaskParams,
) -> Result<(f64, f64)> {
    if grad_patch.rank() != 3 {
        return Err(Error::Shape(
            "apm_coordinate_gradient needs a rank-3 field".into(),
        ));
    }
    let (k, h, w) = (
        grad_patch.extent(0),
        grad_patch.extent(1),
        grad_patch.extent(2),
    );
    let g = grad_patch.data();
    let y_lo = (p.b - p.theta).ceil().max(0.0) as usize;
    let y_hi = ((p.b + p.theta).floor() as isize).min(h as isize - 1);
    let x_lo = (p.a - p.theta).ceil().max(0.0) as usize;
    let x_hi = ((p.a + p.theta).floor() as isize).min(w as isize - 1);
    if y_hi < y_lo as isize || x_hi < x_lo as isize {
        return Ok((0.0, 0.0));
    }
    let (y_hi, x_hi) = (y_hi as usize, x_hi as usize);

    // Sum of squares over one column (x fixed) or row (y fixed) inside the
    // window, accumulated in fixed (bin, other-axis) order.
    let col_energy = |x: usize| -> f64 {
        let mut acc = 0.0f64;
        for bin in 0..k {
            let base = bin * h * w;
            for y in y_lo..=y_hi {
                let v = g[base + y * w + x] as f64;
                acc += v * v;
            }
        }
        acc
    };
    let row_energy = |y: usize| -> f64 {
        let mut acc = 0.0f64;
        for bin in 0..k {
            let base = bin * h * w;
            for x in x_lo..=x_hi {
                let v = g[base + y * w + x] as f64;
                acc += v * v;
            }
        }
        acc
    };

    // Pairing indices mirrored about the center keeps symmetric fields at
    // exactly zero: each pair cancels before it is accumulated.
    let split = |center: f64, lo: usize, hi: usize, energy: &dyn Fn(usize) -> f64| -> f64 {
        let mut acc = 0.0f64;
        let mut mass = 0.0f64;
        let mut d = 0usize;
        loop {
            // Right candidates are the indices > center in increasing order,
            // left candidates the indices < center in decreasing order.
            let right = if center.fract() == 0.0 {
                center as isize + 1 + d as isize
            } else {
                center.ceil() as isize + d as isize
            };
            let left = if center.fract() == 0.0 {
                center as isize - 1 - d as isize
            } else {
                center.floor() as isize - d as isize
            };
            let r_ok = right >= lo as isize && right <= hi as isize;
            let l_ok = left >= lo as isize && left <= hi as isize;
            if !r_ok && !l_ok {
                break;
            }
            let rv = if r_ok { energy(right as usize) } else { 0.0 };
            let lv = if l_ok { energy(left as usize) } else { 0.0 };
            acc += rv - lv;
            mass += rv + lv;
            d += 1;
        }
        if mass > 0.0 {
            acc / mass
        } else {
            0.0
        }
    };

    let da = split(p.a, x_lo, x_hi, &|x| col_energy(x));
    let db = split(p.b, y_lo, y_hi, &|y| row_energy(y));
    Ok((da, db))
}

/// Fully analytic center gradient of a scalar loss through the mask product
/// and the window sampling positions. `grad_window` is dL/d window.
pub fn crop_grad_analytic(
    volume: &FeatureTensor,
    p: &SoftMaskParams,
    trace: &MaskCropTrace,
    grad_window: &FeatureTensor,
) -> (f64, f64) {
    let (k, h, w) = (volume.extent(0), volume.extent(1), volume.extent(2));
    let out_size = grad_window.extent(1);
    let src = volume.data();
    let g = grad_window.data();

    // Mask term: dL/d masked (scatter of grad_window) times volume times
    // dM/d center.
    let d_masked = crop_grad_to_masked(trace, grad_window, h, w);
    let (dm_da, dm_db) = soft_mask_grad(p, h, w);
    let mut da = 0.0f64;
    let mut db = 0.0f64;
    for bin in 0..k {
        let base = bin * h * w;
        for i in 0..h * w {
            let gm = d_masked.data()[base + i] as f64 * src[base + i] as f64;
            da += gm * dm_da[i];
            db += gm * dm_db[i];
        }
    }

    // Position term: the sample points translate with the center, so the
    // window picks up the spatial derivative of the masked volume.
    let masked_at = |bin: usize, y: usize, x: usize| -> f64 {
        src[bin * h * w + y * w + x] as f64 * trace.mask[y * w + x]
    };
    for (vi, &sy) in trace.ys.iter().enumerate() {
        let y0 = (sy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        let y_clamped = sy <= 0.0 || sy >= (h - 1) as f64;
        for (ui, &sx) in trace.xs.iter().enumerate() {
            let x0 = (sx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let x_clamped = sx <= 0.0 || sx >= (w - 1) as f64;
            for bin in 0..k {
                let gv = g[(bin * out_size + vi) * out_size + ui] as f64;
                if gv == 0.0 {
                    continue;
                }
                let v00 = masked_at(bin, y0, x0);
                let v01 = masked_at(bin, y0, x1);
                let v10 = masked_at(bin, y1, x0);
                let v11 = masked_at(bin, y1, x1);
                if !x_clamped {
                    let ddx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10);
                    da += gv * ddx;
                }
                if !y_clamped {
                    let ddy = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01);
                    db += gv * ddy;
                }
            }
        }
    }
    (da, db)
}

/// Which route supplies the center gradients during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradRule {
    /// Left/right squared-magnitude split of the upstream gradient field.
    LrSplit,
    /// Analytic derivative through the mask and sampling positions.
    Analytic,
}

impl GradRule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lr_split" => Ok(Self::LrSplit),
            "analytic" => Ok(Self::Analytic),
            other => Err(Error::Config(format!(
                "unknown grad rule {other:?} (lr_split|analytic)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::LrSplit => "lr_split",
            Self::Analytic => "analytic",
        }
    }
}

/// Side length of the coarse band-energy grid the regressor reads.
pub const REGRESSOR_GRID: usize = 16;
const GRID_FEATURE_GAIN: f32 = 8.0;
const MOMENT_FEATURE_GAIN: f64 = 4.0;

/// Length of the frequency-volume summary: the normalized coarse grid plus
/// the two first spatial moments of the band energy.
pub const SUMMARY_LEN: usize = REGRESSOR_GRID * REGRESSOR_GRID + 2;

/// Linear regressor from pooled stage features plus a coarse band-energy
/// summary of the frequency volume to 2P raw coordinates, squashed into the
/// frame by a logistic so proposed rectangles stay inside it.
#[derive(Debug, Clone)]
pub struct ApmRegressor {
    /// `2P x feat_len` weights; rows alternate (a, b) per part.
    pub weights: FeatureTensor,
    /// Length 2P.
    pub bias: Vec<f32>,
    pub parts: usize,
    pub theta: f64,
    pub scale: f64,
    pub feat_len: usize,
}

/// Forward record for the regressor backward pass.
pub struct RegressorTrace {
    pub features: Vec<f32>,
    /// Pre-squash outputs, length 2P.
    pub raw: Vec<f64>,
    /// Squash ranges per output, (lo, hi).
    pub ranges: Vec<(f64, f64)>,
}

/// Gradients for the regressor parameters.
pub struct RegressorGrads {
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ApmRegressor {
    /// Zero weights with biases that spread the initial part centers over
    /// the frame: part 0 at the center, the rest on a ring around it.
    pub fn init(parts: usize, theta: f64, scale: f64, feat_len: usize) -> Result<Self> {
        if parts < 1 {
            return Err(Error::Config("need at least one part".into()));
        }
        let mut bias = vec![0.0f32; 2 * parts];
        // logit(0.75): ring positions sit three quarters of the way out.
        let ring = 1.098_612_288_668_11f64;
        for p in 1..parts {
            let angle = 2.0 * std::f64::consts::PI * (p - 1) as f64 / (parts - 1).max(1) as f64
                + std::f64::consts::FRAC_PI_4;
            bias[2 * p] = (ring * angle.cos()) as f32;
            bias[2 * p + 1] = (ring * angle.sin()) as f32;
        }
        Ok(Self {
            weights: FeatureTensor::zeros(&[("out", 2 * parts), ("feat", feat_len)]),
            bias,
            parts,
            theta,
            scale,
            feat_len,
        })
    }

    /// All-zero variant: every part lands exactly at the frame center.
    pub fn zeroed(parts: usize, theta: f64, scale: f64, feat_len: usize) -> Result<Self> {
        let mut reg = Self::init(parts, theta, scale, feat_len)?;
        reg.bias.iter_mut().for_each(|b| *b = 0.0);
        Ok(reg)
    }

    fn squash_range(&self, extent: usize) -> (f64, f64) {
        let margin = self.theta.min(((extent as f64) - 2.0) / 2.0).max(1.0);
        (margin, extent as f64 - margin)
    }

    /// Frequency-volume summary: the coarse normalized band-energy grid
    /// (bins past DC) followed by the two first spatial moments of the
    /// energy, each relative to the frame center and scaled by the half
    /// extent. The moments make the energy centroid directly readable by a
    /// single weight per coordinate.
    pub fn grid_summary(volume: &SpectrumVolume) -> Result<Vec<f32>> {
        let (h, w) = (volume.height(), volume.width());
        let bins = volume.data.extent(0);
        let plane = h * w;
        let src = volume.data.data();
        let mut energy = vec![0.0f32; plane];
        for k in 1..bins.max(2).min(bins + 1) {
            if k >= bins {
                break;
            }
            for p in 0..plane {
                let m = src[k * plane + p];
                energy[p] += m * m;
            }
        }
        let total: f64 = energy.iter().map(|&v| v as f64).sum();
        let inv = if total > 0.0 { 1.0 / total } else { 0.0 };
        let (mut mx, mut my) = (0.0f64, 0.0f64);
        for y in 0..h {
            for x in 0..w {
                let e = energy[y * w + x] as f64 * inv;
                mx += e * (x as f64 - (w - 1) as f64 / 2.0) / (w as f64 / 2.0);
                my += e * (y as f64 - (h - 1) as f64 / 2.0) / (h as f64 / 2.0);
            }
        }
        let map = FeatureTensor::from_parts(
            vec![
                ("c".to_string(), 1),
                ("height".to_string(), h),
                ("width".to_string(), w),
            ],
            energy,
        );
        let coarse = crate::tensor::resize_bilinear(&map, REGRESSOR_GRID, REGRESSOR_GRID)?;
        let ctotal: f64 = coarse.data().iter().map(|&v| v.max(0.0) as f64).sum();
        let cinv = if ctotal > 0.0 { 1.0 / ctotal } else { 0.0 };
        // Centering removes the uniform component: a clip with evenly spread
        // energy reads as all-zero, so only concentration deviations can
        // steer the coordinates.
        let cells = (REGRESSOR_GRID * REGRESSOR_GRID) as f64;
        let mut out: Vec<f32> = coarse
            .data()
            .iter()
            .map(|&v| {
                ((v.max(0.0) as f64 * cinv - 1.0 / cells) * GRID_FEATURE_GAIN as f64) as f32
            })
            .collect();
        out.push((mx * MOMENT_FEATURE_GAIN) as f32);
        out.push((my * MOMENT_FEATURE_GAIN) as f32);
        Ok(out)
    }

    /// Regresses the part set from the frequency volume and pooled stage
    /// features. Feature lengths are checked against the configuration.
    pub fn forward(
        &self,
        volume: &SpectrumVolume,
        pooled: &[Vec<f32>],
    ) -> Result<(PartSet, RegressorTrace)> {
        let mut features: Vec<f32> = Vec::with_capacity(self.feat_len);
        for v in pooled {
            features.extend_from_slice(v);
        }
        features.extend(Self::grid_summary(volume)?);
        if features.len() != self.feat_len {
            return Err(Error::Shape(format!(
                "regressor expects {} features, got {}",
                self.feat_len,
                features.len()
            )));
        }
        let (h, w) = (volume.height(), volume.width());
        let range_a = self.squash_range(w);
        let range_b = self.squash_range(h);
        let wdata = self.weights.data();
        let mut raw = Vec::with_capacity(2 * self.parts);
        let mut ranges = Vec::with_capacity(2 * self.parts);
        let mut parts = Vec::with_capacity(self.parts);
        for p in 0..self.parts {
            let mut vals = [0.0f64; 2];
            for (j, val) in vals.iter_mut().enumerate() {
                let row = 2 * p + j;
                let mut acc = self.bias[row] as f64;
                for (i, &f) in features.iter().enumerate() {
                    acc += wdata[row * self.feat_len + i] as f64 * f as f64;
                }
                *val = acc;
            }
            let a = range_a.0 + (range_a.1 - range_a.0) * sigmoid(vals[0]);
            let b = range_b.0 + (range_b.1 - range_b.0) * sigmoid(vals[1]);
            raw.extend_from_slice(&vals);
            ranges.push(range_a);
            ranges.push(range_b);
            parts.push(SoftMaskParams::new(a, b, self.theta, self.scale)?);
        }
        Ok((PartSet { parts }, RegressorTrace { features, raw, ranges }))
    }

    /// Turns per-part coordinate gradients (dL/da, dL/db) into parameter
    /// gradients through the squash.
    pub fn backward(&self, trace: &RegressorTrace, coord_grads: &[(f64, f64)]) -> RegressorGrads {
        let mut gw = vec![0.0f32; self.weights.len()];
        let mut gb = vec![0.0f32; self.bias.len()];
        for (p, &(da, db)) in coord_grads.iter().enumerate() {
            for (j, g) in [da, db].into_iter().enumerate() {
                let row = 2 * p + j;
                let (lo, hi) = trace.ranges[row];
                let s = sigmoid(trace.raw[row]);
                let d_raw = g * (hi - lo) * s * (1.0 - s);
                gb[row] += d_raw as f32;
                for (i, &f) in trace.features.iter().enumerate() {
                    gw[row * self.feat_len + i] += (d_raw * f as f64) as f32;
                }
            }
        }
        RegressorGrads {
            weights: gw,
            bias: gb,
        }
    }
}

/// Spec surface: regress the part set.
pub fn regress_parts(
    reg: &ApmRegressor,
    volume: &SpectrumVolume,
    pooled: &[Vec<f32>],
) -> Result<PartSet> {
    Ok(reg.forward(volume, pooled)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::{extract_spectrum, SpectrumMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(a: f64, b: f64, theta: f64) -> SoftMaskParams {
        SoftMaskParams::new(a, b, theta, 10.0).unwrap()
    }

    #[test]
    fn mask_center_is_one_and_far_pixels_vanish() {
        let p = params(112.0, 112.0, 44.0);
        let m = soft_mask(&p, 224, 224);
        let center = m.at(&[112, 112]) as f64;
        assert!((center - 1.0).abs() < 1e-12);
        // 50 px beyond the rectangle on both axes.
        let far = m.at(&[(112.0 + 44.0 + 50.0) as usize, (112.0 + 44.0 + 50.0) as usize]);
        assert!((far as f64) <= 1e-20);
    }

    #[test]
    fn mask_mass_matches_rectangle_area() {
        let p = params(100.0, 120.0, 44.0);
        let m = soft_mask(&p, 224, 224);
        let mass: f64 = m.data().iter().map(|&v| v as f64).sum();
        let expected = (2.0 * 44.0) * (2.0 * 44.0);
        assert!(
            (mass - expected).abs() / expected < 0.01,
            "mass {mass} vs {expected}"
        );
    }

    #[test]
    fn mask_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for _ in 0..100 {
            let p = params(
                rng.gen_range(50.0..174.0),
                rng.gen_range(50.0..174.0),
                44.0,
            );
            let (da, db) = soft_mask_grad(&p, 224, 224);
            let h = 1e-3;
            let pa_plus = params(p.a + h, p.b, p.theta);
            let pa_minus = params(p.a - h, p.b, p.theta);
            let pb_plus = params(p.a, p.b + h, p.theta);
            let pb_minus = params(p.a, p.b - h, p.theta);
            let fd = |plus: &SoftMaskParams, minus: &SoftMaskParams| -> Vec<f64> {
                let (xp, yp) = mask_ramps(plus, 224, 224);
                let (xm, ym) = mask_ramps(minus, 224, 224);
                let mut out = vec![0.0f64; 224 * 224];
                for y in 0..224 {
                    for x in 0..224 {
                        out[y * 224 + x] =
                            (yp[y] * xp[x] - ym[y] * xm[x]) / (2.0 * h);
                    }
                }
                out
            };
            let fda = fd(&pa_plus, &pa_minus);
            let fdb = fd(&pb_plus, &pb_minus);
            let rel = |an: &[f64], fd: &[f64]| -> f64 {
                let num: f64 = an.iter().zip(fd).map(|(a, b)| (a - b) * (a - b)).sum();
                let den: f64 = fd.iter().map(|b| b * b).sum();
                (num / den.max(1e-300)).sqrt()
            };
            assert!(rel(&da, &fda) < 1e-4, "dM/da mismatch");
            assert!(rel(&db, &fdb) < 1e-4, "dM/db mismatch");
        }
    }

    #[test]
    fn mask_translation_equivariance() {
        let p = params(30.0, 25.0, 8.0);
        let delta = 0.37;
        let shifted = params(30.0 + delta, 25.0, 8.0);
        let m = soft_mask(&shifted, 64, 64);
        for y in 0..64 {
            for x in 0..64 {
                let expect = soft_mask_at(&p, y as f64, x as f64 - delta);
                assert!(
                    (m.at(&[y, x]) as f64 - expect).abs() < 1e-6,
                    "pixel ({y},{x})"
                );
            }
        }
    }

    fn grad_field(k: usize, h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> FeatureTensor {
        let mut data = vec![0.0f32; k * h * w];
        for bin in 0..k {
            for y in 0..h {
                for x in 0..w {
                    data[(bin * h + y) * w + x] = f(y, x);
                }
            }
        }
        FeatureTensor::from_parts(
            vec![
                ("bin".to_string(), k),
                ("height".to_string(), h),
                ("width".to_string(), w),
            ],
            data,
        )
    }

    #[test]
    fn coordinate_gradient_symmetric_field_is_exactly_zero() {
        let p = params(16.0, 16.0, 8.0);
        let g = grad_field(2, 32, 32, |y, x| {
            let dy = (y as f64 - 16.0).abs();
            let dx = (x as f64 - 16.0).abs();
            ((-0.1 * (dy * dy + dx * dx)).exp()) as f32
        });
        let (da, db) = apm_coordinate_gradient(&g, &p).unwrap();
        assert_eq!(da, 0.0);
        assert_eq!(db, 0.0);
    }

    #[test]
    fn coordinate_gradient_left_mass_gives_negative_da() {
        let p = params(16.0, 16.0, 8.0);
        let g = grad_field(1, 32, 32, |_, x| if x < 16 { 1.0 } else { 0.0 });
        let (da, db) = apm_coordinate_gradient(&g, &p).unwrap();
        assert!(da < 0.0);
        assert_eq!(db, 0.0);
    }

    #[test]
    fn coordinate_gradient_impulse_above_center() {
        let p = params(16.0, 16.0, 8.0);
        let g = grad_field(1, 32, 32, |y, x| {
            if y == 12 && x == 16 {
                1.0
            } else {
                0.0
            }
        });
        let (da, db) = apm_coordinate_gradient(&g, &p).unwrap();
        assert_eq!(da, 0.0);
        assert!(db < 0.0);
    }

    #[test]
    fn coordinate_gradient_mirror_antisymmetry_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let p = params(16.0, 16.0, 8.0);
        let mut data = vec![0.0f32; 32 * 32];
        for v in data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let g = FeatureTensor::from_parts(
            vec![
                ("bin".to_string(), 1),
                ("height".to_string(), 32),
                ("width".to_string(), 32),
            ],
            data.clone(),
        );
        // Mirror about the x center: column x maps to 2*16 - x (x = 0 has no
        // partner but lies outside the mask window, so it cannot matter).
        let mut flipped = vec![0.0f32; 32 * 32];
        for y in 0..32 {
            flipped[y * 32] = data[y * 32];
            for x in 1..32 {
                flipped[y * 32 + x] = data[y * 32 + (32 - x)];
            }
        }
        let gf = FeatureTensor::from_parts(
            vec![
                ("bin".to_string(), 1),
                ("height".to_string(), 32),
                ("width".to_string(), 32),
            ],
            flipped,
        );
        let (da, _) = apm_coordinate_gradient(&g, &p).unwrap();
        let (da_f, _) = apm_coordinate_gradient(&gf, &p).unwrap();
        assert_eq!(da_f, -da);
    }

    #[test]
    fn crop_energy_decreases_away_from_signal() {
        // Compact blob of ones around (20, 20).
        let mut data = vec![0.0f32; 2 * 64 * 64];
        for bin in 0..2 {
            for y in 17..24 {
                for x in 17..24 {
                    data[(bin * 64 + y) * 64 + x] = 1.0;
                }
            }
        }
        let vol = FeatureTensor::from_parts(
            vec![
                ("bin".to_string(), 2),
                ("height".to_string(), 64),
                ("width".to_string(), 64),
            ],
            data,
        );
        let mut last = f64::INFINITY;
        for step in 0..10 {
            let p = params(20.0 + step as f64 * 3.0, 20.0, 8.0);
            let trace = mask_crop_trace(&vol, &p, 16).unwrap();
            let energy: f64 = trace
                .window
                .data()
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum();
            assert!(energy <= last + 1e-6, "energy grew at step {step}");
            last = energy;
        }
    }

    #[test]
    fn crop_captures_planted_energy_and_misses_remote_energy() {
        use crate::synth::{generate, FlickerSpec, Motion, SynthSpec};
        let spec = SynthSpec {
            motion: Motion::Static,
            noise_sigma: 0.0,
            flicker: Some(FlickerSpec {
                center_y: 30,
                center_x: 26,
                radius: 6,
                bins: vec![5],
                amplitude: 0.1,
            }),
            ..SynthSpec::default_toy(3)
        };
        let (clip, _) = generate(&spec).unwrap();
        // Remove DC/texture by subtracting the temporal mean per pixel, then
        // measure energy placement directly on the oscillation.
        let vol = extract_spectrum(&clip, SpectrumMode::Magnitude).unwrap();
        let plane = 64 * 64;
        let mut band = vec![0.0f32; plane];
        for k in 2..vol.bins {
            for p in 0..plane {
                let m = vol.data.data()[k * plane + p];
                band[p] += m * m;
            }
        }
        let band_vol = FeatureTensor::from_parts(
            vec![
                ("bin".to_string(), 1),
                ("height".to_string(), 64),
                ("width".to_string(), 64),
            ],
            band.clone(),
        );
        let total: f64 = band.iter().map(|&v| v as f64).sum();

        let centered = params(26.0, 30.0, 16.0);
        let trace = mask_crop_trace(&band_vol, &centered, 32).unwrap();
        let captured: f64 = trace.window.data().iter().map(|&v| v as f64).sum();
        assert!(
            (captured - total).abs() / total < 0.02,
            "captured {captured} of {total}"
        );

        let remote = params(55.0, 55.0, 8.0);
        let trace = mask_crop_trace(&band_vol, &remote, 16).unwrap();
        let captured: f64 = trace.window.data().iter().map(|&v| v as f64).sum();
        assert!(captured <= 1e-6 * total, "remote window captured {captured}");
    }

    #[test]
    fn crop_constant_volume_interior() {
        let vol = FeatureTensor::from_vec(
            &[("bin", 1), ("height", 64), ("width", 64)],
            vec![1.0; 64 * 64],
        )
        .unwrap();
        let p = params(32.0, 32.0, 8.0);
        let trace = mask_crop_trace(&vol, &p, 16).unwrap();
        // Interior cells sit on the mask plateau; edge cells roll off.
        let interior = trace.window.at(&[0, 8, 8]) as f64;
        assert!((interior - 1.0).abs() < 1e-6);
        let edge = trace.window.at(&[0, 0, 0]) as f64;
        assert!(edge < interior);
    }

    #[test]
    fn analytic_crop_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (k, h, w) = (2usize, 24usize, 24usize);
        let data: Vec<f32> = (0..k * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let vol = FeatureTensor::from_parts(
            vec![
                ("bin".to_string(), k),
                ("height".to_string(), h),
                ("width".to_string(), w),
            ],
            data,
        );
        let out_size = 8;
        let weights: Vec<f64> = (0..k * out_size * out_size)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let loss = |a: f64, b: f64| -> f64 {
            let p = SoftMaskParams::new(a, b, 4.0, 2.0).unwrap();
            let trace = mask_crop_trace(&vol, &p, out_size).unwrap();
            trace
                .window
                .data()
                .iter()
                .zip(&weights)
                .map(|(&v, &wt)| v as f64 * wt)
                .sum()
        };
        let (a0, b0) = (11.3, 12.6);
        let p = SoftMaskParams::new(a0, b0, 4.0, 2.0).unwrap();
        let trace = mask_crop_trace(&vol, &p, out_size).unwrap();
        let grad_window = FeatureTensor::from_parts(
            vec![
                ("bin".to_string(), k),
                ("height".to_string(), out_size),
                ("width".to_string(), out_size),
            ],
            weights.iter().map(|&v| v as f32).collect(),
        );
        let (da, db) = crop_grad_analytic(&vol, &p, &trace, &grad_window);
        let h_step = 1e-3;
        let fda = (loss(a0 + h_step, b0) - loss(a0 - h_step, b0)) / (2.0 * h_step);
        let fdb = (loss(a0, b0 + h_step) - loss(a0, b0 - h_step)) / (2.0 * h_step);
        assert!((da - fda).abs() / fda.abs().max(1e-6) < 1e-2, "da {da} vs {fda}");
        assert!((db - fdb).abs() / fdb.abs().max(1e-6) < 1e-2, "db {db} vs {fdb}");
    }

    #[test]
    fn zeroed_regressor_proposes_frame_center() {
        use crate::synth::{generate, Motion, SynthSpec};
        let (clip, _) = generate(&SynthSpec {
            motion: Motion::Static,
            ..SynthSpec::default_toy(1)
        })
        .unwrap();
        let vol = extract_spectrum(&clip, SpectrumMode::Magnitude).unwrap();
        let feat_len = SUMMARY_LEN;
        let reg = ApmRegressor::zeroed(5, 16.0, 10.0, feat_len).unwrap();
        let parts = regress_parts(&reg, &vol, &[]).unwrap();
        assert_eq!(parts.parts.len(), 5);
        for p in &parts.parts {
            assert!((p.a - 32.0).abs() < 1e-6);
            assert!((p.b - 32.0).abs() < 1e-6);
        }
        // Single-part configuration.
        let reg1 = ApmRegressor::zeroed(1, 16.0, 10.0, feat_len).unwrap();
        assert_eq!(regress_parts(&reg1, &vol, &[]).unwrap().parts.len(), 1);
        // Feature-length mismatch.
        let bad = regress_parts(&reg, &vol, &[vec![0.0; 3]]);
        assert!(matches!(bad, Err(Error::Shape(_))));
    }
}
