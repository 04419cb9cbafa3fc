//! Residual preprocessing: subtract a spatially filtered copy of each frame
//! so that dominant low-frequency content drops out and fine frame-to-frame
//! fluctuation dominates the signal.

use crate::error::{Error, Result};
use crate::ingest::{Clip, Frame, FrameSequence};
use crate::par;
use crate::tensor::FeatureTensor;

/// Which spatial filter the residual subtracts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    Median,
    Mean,
    /// No filtering: frames pass through unchanged.
    None,
}

impl FilterKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "median" => Ok(Self::Median),
            "mean" => Ok(Self::Mean),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!(
                "unknown filter {other:?} (median|mean|none)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Median => "median",
            Self::Mean => "mean",
            Self::None => "none",
        }
    }
}

/// Residual filter settings. The kernel must be odd and no larger than the
/// frame's smaller side.
#[derive(Debug, Clone, Copy)]
pub struct ResidualConfig {
    pub filter_kind: FilterKind,
    pub kernel: usize,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        Self {
            filter_kind: FilterKind::Median,
            kernel: 3,
        }
    }
}

impl ResidualConfig {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.kernel % 2 == 0 || self.kernel < 3 {
            return Err(Error::Config(format!(
                "kernel {} must be an odd integer >= 3",
                self.kernel
            )));
        }
        if self.filter_kind != FilterKind::None && self.kernel > height.min(width) {
            return Err(Error::Config(format!(
                "kernel {} exceeds frame side {}",
                self.kernel,
                height.min(width)
            )));
        }
        Ok(())
    }
}

#[inline]
fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

fn filter_plane(
    data: &[f32],
    h: usize,
    w: usize,
    kernel: usize,
    kind: FilterKind,
) -> Vec<f32> {
    let half = (kernel / 2) as isize;
    let mut out = vec![0.0f32; h * w];
    let mut window = Vec::with_capacity(kernel * kernel);
    for y in 0..h {
        for x in 0..w {
            window.clear();
            for dy in -half..=half {
                let sy = clamp_idx(y as isize + dy, h);
                for dx in -half..=half {
                    let sx = clamp_idx(x as isize + dx, w);
                    window.push(data[sy * w + sx]);
                }
            }
            out[y * w + x] = match kind {
                FilterKind::Median => {
                    let mid = window.len() / 2;
                    *window
                        .select_nth_unstable_by(mid, |a, b| a.total_cmp(b))
                        .1
                }
                FilterKind::Mean => {
                    (window.iter().map(|&v| v as f64).sum::<f64>() / window.len() as f64) as f32
                }
                FilterKind::None => data[y * w + x],
            };
        }
    }
    out
}

/// Median-filters a `height x width` tensor with a `kernel x kernel` window.
/// Borders are handled by edge replication.
pub fn spatial_median(frame: &FeatureTensor, kernel: usize) -> Result<FeatureTensor> {
    if frame.rank() != 2 {
        return Err(Error::Shape(format!(
            "spatial_median needs a rank-2 tensor, got rank {}",
            frame.rank()
        )));
    }
    if kernel % 2 == 0 {
        return Err(Error::Config(format!("kernel {kernel} must be odd")));
    }
    let (h, w) = (frame.extent(0), frame.extent(1));
    let out = filter_plane(frame.data(), h, w, kernel, FilterKind::Median);
    Ok(FeatureTensor::from_parts(frame.dims().to_vec(), out))
}

/// Mean-filter twin of [`spatial_median`], used by the filter ablation.
pub fn spatial_mean(frame: &FeatureTensor, kernel: usize) -> Result<FeatureTensor> {
    if frame.rank() != 2 {
        return Err(Error::Shape("spatial_mean needs a rank-2 tensor".into()));
    }
    if kernel % 2 == 0 {
        return Err(Error::Config(format!("kernel {kernel} must be odd")));
    }
    let (h, w) = (frame.extent(0), frame.extent(1));
    let out = filter_plane(frame.data(), h, w, kernel, FilterKind::Mean);
    Ok(FeatureTensor::from_parts(frame.dims().to_vec(), out))
}

/// Per-frame residual of a clip: each frame minus its filtered copy, values
/// in [-1, 1]. With `FilterKind::None` the clip passes through unchanged.
/// Frames are processed independently, so the result does not depend on how
/// they are partitioned across workers.
pub fn residual_clip(clip: &Clip, cfg: &ResidualConfig) -> Result<Clip> {
    let (t, h, w) = (clip.frames(), clip.height(), clip.width());
    cfg.validate(h, w)?;
    if cfg.filter_kind == FilterKind::None {
        return Ok(clip.clone());
    }
    let plane = h * w;
    let mut out = vec![0.0f32; t * plane];
    let src = clip.data.data();
    let kind = cfg.filter_kind;
    let kernel = cfg.kernel;
    par::for_each_chunk(&mut out, plane, |i, chunk| {
        let frame = &src[i * plane..(i + 1) * plane];
        let filtered = filter_plane(frame, h, w, kernel, kind);
        for ((o, &v), &f) in chunk.iter_mut().zip(frame).zip(&filtered) {
            *o = v - f;
        }
    });
    Ok(Clip {
        data: FeatureTensor::from_parts(clip.data.dims().to_vec(), out),
        source_id: clip.source_id.clone(),
        start_index: clip.start_index,
        stride: clip.stride,
    })
}

/// Literal-order variant for the filter ablation: filters each color channel
/// of the raw frames, subtracts, and only then converts to luma.
pub fn residual_sequence_filter_first(
    seq: &FrameSequence,
    cfg: &ResidualConfig,
) -> Result<FrameSequence> {
    let first = &seq.frames[0];
    cfg.validate(first.height, first.width)?;
    let frames = seq
        .frames
        .iter()
        .map(|f| {
            let (h, w, c) = (f.height, f.width, f.channels);
            let mut residual = vec![0.0f32; h * w * c];
            for ch in 0..c {
                let plane: Vec<f32> = (0..h * w).map(|i| f.data[i * c + ch]).collect();
                let filtered = if cfg.filter_kind == FilterKind::None {
                    plane.clone()
                } else {
                    filter_plane(&plane, h, w, cfg.kernel, cfg.filter_kind)
                };
                for i in 0..h * w {
                    residual[i * c + ch] = plane[i] - filtered[i];
                }
            }
            Frame {
                width: w,
                height: h,
                channels: c,
                data: residual,
            }
        })
        .collect();
    FrameSequence::new(frames, seq.frame_rate)
}
