//! Frame loading, grayscale conversion, and clip assembly.
//!
//! Frame directories hold binary PGM (P5) or PPM (P6) files named
//! `frame_%06d.pgm` / `frame_%06d.ppm`, numbered consecutively from 0 with
//! maxval 255. Crop boxes come from an external `crops.json` sidecar mapping
//! source ids to pixel rectangles.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::FeatureTensor;

/// One decoded frame. Values are the 8-bit source samples scaled to [0, 1];
/// `channels` is 1 (grayscale) or 3 (RGB interleaved).
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "frame {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    fn sample(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Ordered frames of one source video. All frames share the same geometry.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub frames: Vec<Frame>,
    pub frame_rate: f64,
}

impl FrameSequence {
    pub fn new(frames: Vec<Frame>, frame_rate: f64) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Input("frame sequence is empty".into()))?;
        let (w, h, c) = (first.width, first.height, first.channels);
        if let Some(i) = frames
            .iter()
            .position(|f| f.width != w || f.height != h || f.channels != c)
        {
            return Err(Error::Format(format!(
                "frame {i} geometry differs from frame 0"
            )));
        }
        Ok(Self { frames, frame_rate })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Fixed-length grayscale clip: a `time x height x width` tensor in [0, 1].
#[derive(Debug, Clone)]
pub struct Clip {
    pub data: FeatureTensor,
    pub source_id: String,
    pub start_index: usize,
    pub stride: usize,
}

impl Clip {
    pub fn frames(&self) -> usize {
        self.data.extent(0)
    }

    pub fn height(&self) -> usize {
        self.data.extent(1)
    }

    pub fn width(&self) -> usize {
        self.data.extent(2)
    }
}

/// Axis-aligned pixel rectangle, applied identically to every frame of a clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl CropBox {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(Error::Input(format!("degenerate crop box {self:?}")));
        }
        if self.x1 > width || self.y1 > height {
            return Err(Error::Input(format!(
                "crop box {self:?} exceeds {width}x{height} frame"
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }
}

/// Reads a `crops.json` sidecar: a map from source id to crop box.
pub fn load_crops(path: &Path) -> Result<BTreeMap<String, CropBox>> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn read_pnm_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut in_comment = false;
    loop {
        let mut byte = [0u8; 1];
        match r.read(&mut byte)? {
            0 => break,
            _ => {}
        }
        let c = byte[0] as char;
        if in_comment {
            if c == '\n' {
                in_comment = false;
            }
            continue;
        }
        if c == '#' {
            in_comment = true;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(c);
    }
    if tok.is_empty() {
        return Err(Error::Format("unexpected end of PNM header".into()));
    }
    Ok(tok)
}

fn parse_pnm_dim(tok: &str) -> Result<usize> {
    tok.parse::<usize>()
        .map_err(|_| Error::Format(format!("bad PNM header token {tok:?}")))
}

/// Decodes a binary PGM (P5) or PPM (P6) image with maxval 255.
pub fn read_pnm<R: BufRead>(r: &mut R) -> Result<Frame> {
    let magic = read_pnm_token(r)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Format(format!("unsupported PNM magic {other:?}"))),
    };
    let width = parse_pnm_dim(&read_pnm_token(r)?)?;
    let height = parse_pnm_dim(&read_pnm_token(r)?)?;
    let maxval = parse_pnm_dim(&read_pnm_token(r)?)?;
    if maxval != 255 {
        return Err(Error::Format(format!(
            "unsupported PNM maxval {maxval}, only 255"
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format("zero PNM dimension".into()));
    }
    let mut raw = vec![0u8; width * height * channels];
    r.read_exact(&mut raw)
        .map_err(|_| Error::Format("truncated PNM payload".into()))?;
    let data = raw.iter().map(|&b| b as f32 / 255.0).collect();
    Frame::new(width, height, channels, data)
}

/// Encodes a frame as binary PGM/PPM, quantizing [0, 1] values to 8 bits.
pub fn write_pnm<W: Write>(frame: &Frame, w: &mut W) -> Result<()> {
    let magic = match frame.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Format(format!("cannot encode {c}-channel PNM"))),
    };
    write!(w, "{magic}\n{} {}\n255\n", frame.width, frame.height)?;
    let raw: Vec<u8> = frame
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&raw)?;
    Ok(())
}

/// Writes an 8-bit grayscale image from raw bytes as binary PGM.
pub fn write_pgm_bytes<W: Write>(width: usize, height: usize, bytes: &[u8], w: &mut W) -> Result<()> {
    if bytes.len() != width * height {
        return Err(Error::Shape(format!(
            "PGM payload {} does not match {width}x{height}",
            bytes.len()
        )));
    }
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(bytes)?;
    Ok(())
}

/// Loads `frame_%06d.pgm` / `frame_%06d.ppm` files numbered consecutively
/// from 0. A gap in the numbering or mixed frame sizes is a format error.
pub fn load_sequence(dir: &Path) -> Result<FrameSequence> {
    let mut frames = Vec::new();
    let mut index = 0usize;
    loop {
        let pgm = dir.join(format!("frame_{index:06}.pgm"));
        let ppm = dir.join(format!("frame_{index:06}.ppm"));
        let path = if pgm.exists() {
            pgm
        } else if ppm.exists() {
            ppm
        } else {
            break;
        };
        let file = std::fs::File::open(&path)?;
        let frame = read_pnm(&mut BufReader::new(file))
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        frames.push(frame);
        index += 1;
    }
    if frames.is_empty() {
        return Err(Error::Format(format!(
            "no frame_000000.pgm/.ppm in {}",
            dir.display()
        )));
    }
    // A file with a higher index after the first gap means the numbering has
    // a hole, which usually indicates a broken export.
    if let Ok(entries) = std::fs::read_dir(dir) {
        for entry in entries.flatten() {
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if let Some(stem) = name
                .strip_prefix("frame_")
                .and_then(|s| s.strip_suffix(".pgm").or_else(|| s.strip_suffix(".ppm")))
            {
                if let Ok(i) = stem.parse::<usize>() {
                    if i >= frames.len() {
                        return Err(Error::Format(format!(
                            "frame index {i} present but index {} missing",
                            frames.len()
                        )));
                    }
                }
            }
        }
    }
    FrameSequence::new(frames, 30.0)
}

const LUMA_R: f32 = 0.299;
const LUMA_G: f32 = 0.587;
const LUMA_B: f32 = 0.114;

/// Converts 3-channel frames to single-channel luma; 1-channel frames pass
/// through unchanged, so the conversion is idempotent.
pub fn to_grayscale(seq: &FrameSequence) -> FrameSequence {
    let frames = seq
        .frames
        .iter()
        .map(|f| match f.channels {
            1 => f.clone(),
            _ => {
                let data = f
                    .data
                    .chunks_exact(f.channels)
                    .map(|px| LUMA_R * px[0] + LUMA_G * px[1] + LUMA_B * px[2])
                    .collect();
                Frame {
                    width: f.width,
                    height: f.height,
                    channels: 1,
                    data,
                }
            }
        })
        .collect();
    FrameSequence {
        frames,
        frame_rate: seq.frame_rate,
    }
}

/// Slices a sequence into fixed-length clips.
///
/// A clip starting at `i` takes frames `i, i+stride, ..., i+(T-1)*stride`;
/// window starts advance by `hop`. The optional crop box is applied to every
/// frame of every clip. Color input is luma-converted first.
pub fn make_clips(
    seq: &FrameSequence,
    source_id: &str,
    clip_len: usize,
    stride: usize,
    hop: usize,
    crop: Option<CropBox>,
) -> Result<Vec<Clip>> {
    if clip_len < 2 {
        return Err(Error::Config(format!("clip length {clip_len} < 2")));
    }
    if stride < 1 || hop < 1 {
        return Err(Error::Config("stride and hop must be >= 1".into()));
    }
    let gray;
    let seq = if seq.frames[0].channels == 1 {
        seq
    } else {
        gray = to_grayscale(seq);
        &gray
    };
    let n = seq.len();
    let span = (clip_len - 1) * stride + 1;
    if n < span {
        return Err(Error::Input(format!(
            "{n} frames cannot fit one clip spanning {span}"
        )));
    }
    let (fw, fh) = (seq.frames[0].width, seq.frames[0].height);
    if let Some(b) = crop {
        b.validate(fw, fh)?;
    }
    let (w, h) = match crop {
        Some(b) => (b.width(), b.height()),
        None => (fw, fh),
    };
    let mut clips = Vec::new();
    let mut start = 0usize;
    while start + span <= n {
        let mut data = Vec::with_capacity(clip_len * h * w);
        for t in 0..clip_len {
            let f = &seq.frames[start + t * stride];
            match crop {
                Some(b) => {
                    for y in b.y0..b.y1 {
                        for x in b.x0..b.x1 {
                            data.push(f.sample(y, x, 0));
                        }
                    }
                }
                None => data.extend_from_slice(&f.data),
            }
        }
        clips.push(Clip {
            data: FeatureTensor::from_vec(
                &[("time", clip_len), ("height", h), ("width", w)],
                data,
            )?,
            source_id: source_id.to_string(),
            start_index: start,
            stride,
        });
        start += hop;
    }
    Ok(clips)
}
