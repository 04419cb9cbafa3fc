//! Deterministic synthetic clips with known ground truth.
//!
//! "Real" clips are a smooth seeded texture under static, drifting, or
//! breathing motion plus Gaussian noise. "Fake" clips additionally plant a
//! localized temporal flicker: every pixel within a disc gains a sum of
//! cosines at chosen frequency bins with seeded phases. The planted center,
//! radius, bins, and amplitude are recorded so detection, localization, and
//! band-energy behavior can be checked against construction.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{write_pnm, Clip, Frame};
use crate::tensor::FeatureTensor;

/// How the base texture moves over the clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Static,
    Drift,
    Breathing,
}

impl Motion {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(Self::Static),
            "drift" => Ok(Self::Drift),
            "breathing" => Ok(Self::Breathing),
            other => Err(Error::Config(format!(
                "unknown motion {other:?} (static|drift|breathing)"
            ))),
        }
    }
}

/// Planted flicker description: a disc of pixels oscillating at the given
/// bins with a common amplitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlickerSpec {
    pub center_y: usize,
    pub center_x: usize,
    pub radius: usize,
    pub bins: Vec<usize>,
    pub amplitude: f64,
}

/// Full description of one synthetic clip.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub motion: Motion,
    pub flicker: Option<FlickerSpec>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Desk-scale default geometry: 64x64x32 drifting texture.
    pub fn default_toy(seed: u64) -> Self {
        Self {
            height: 64,
            width: 64,
            frames: 32,
            motion: Motion::Drift,
            flicker: None,
            noise_sigma: 0.01,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 || self.frames < 4 {
            return Err(Error::Config(format!(
                "geometry {}x{}x{} too small",
                self.frames, self.height, self.width
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("negative noise sigma".into()));
        }
        if let Some(f) = &self.flicker {
            if f.amplitude <= 0.0 {
                return Err(Error::Config("flicker amplitude must be positive".into()));
            }
            if f.bins.is_empty() {
                return Err(Error::Config("flicker bin list is empty".into()));
            }
            let k = self.frames / 2;
            if f.bins.iter().any(|&b| b < 1 || b >= k) {
                return Err(Error::Config(format!(
                    "flicker bins {:?} outside 1..{k}",
                    f.bins
                )));
            }
            let r = f.radius;
            if f.center_y < r
                || f.center_x < r
                || f.center_y + r >= self.height
                || f.center_x + r >= self.width
            {
                return Err(Error::Config(format!(
                    "flicker disc at ({}, {}) radius {r} exceeds the frame",
                    f.center_y, f.center_x
                )));
            }
        }
        Ok(())
    }
}

/// Ground truth recorded for each generated clip.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    /// 1 for clips with planted flicker, 0 otherwise.
    pub label: u8,
    pub flicker: Option<FlickerSpec>,
}

const TEX_LO: f64 = 0.2;
const TEX_HI: f64 = 0.8;
const TEX_WAVES: usize = 3;
const BREATHING_DEPTH: f64 = 0.03;

struct Texture {
    // Per wave: coefficient, spatial frequencies (cycles/px), phase.
    waves: Vec<(f64, f64, f64, f64)>,
    norm: f64,
}

impl Texture {
    fn seeded(rng: &mut ChaCha8Rng, height: usize, width: usize) -> Self {
        let side = height.min(width) as f64;
        let mut waves = Vec::with_capacity(TEX_WAVES);
        let mut norm = 0.0;
        for _ in 0..TEX_WAVES {
            let coef: f64 = rng.gen_range(0.5..1.0);
            // One to three cycles across the frame keeps the field smooth.
            let cycles = rng.gen_range(1.0..3.0);
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let fy = cycles * angle.sin() / side;
            let fx = cycles * angle.cos() / side;
            let phase = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
            waves.push((coef, fy, fx, phase));
            norm += coef;
        }
        Self { waves, norm }
    }

    /// Smooth field in [TEX_LO, TEX_HI]. Saturation near the extrema is C1
    /// (no slope discontinuity that would leave moving residual creases
    /// under drift) yet exactly flat past the knee, so genuinely constant
    /// plateaus exist around the wave peaks.
    fn at(&self, y: f64, x: f64) -> f64 {
        let mut v = 0.0;
        for &(c, fy, fx, ph) in &self.waves {
            v += c * (2.0 * std::f64::consts::PI * (fy * y + fx * x) + ph).cos();
        }
        let u = 1.6 * (v / self.norm);
        let sat = if u >= 1.0 {
            1.0
        } else if u <= -1.0 {
            -1.0
        } else {
            u * (1.5 - 0.5 * u * u)
        };
        0.5 * (TEX_HI + TEX_LO) + 0.5 * (TEX_HI - TEX_LO) * sat
    }
}

/// Generates one clip and its ground truth. Identical specs (including the
/// seed) produce bitwise-identical clips.
pub fn generate(spec: &SynthSpec) -> Result<(Clip, GroundTruth)> {
    spec.validate()?;
    let (t_len, h, w) = (spec.frames, spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let texture = Texture::seeded(&mut rng, h, w);
    let (vy, vx) = {
        // Slow enough that texture leakage stays below the planted flicker
        // in every bin past the first, fast enough to wreck unfiltered
        // spectra with broadband background energy.
        let speed: f64 = rng.gen_range(0.04..0.10);
        let dir = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
        (speed * dir.sin(), speed * dir.cos())
    };
    let flicker_phases: Vec<(usize, f64)> = match &spec.flicker {
        Some(f) => f
            .bins
            .iter()
            .map(|&b| (b, rng.gen_range(0.0..2.0 * std::f64::consts::PI)))
            .collect(),
        None => Vec::new(),
    };
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);

    let mut data = vec![0.0f32; t_len * h * w];
    for ti in 0..t_len {
        let tf = ti as f64;
        let breath = 1.0 + BREATHING_DEPTH * (2.0 * std::f64::consts::PI * tf / t_len as f64).sin();
        let flick: f64 = flicker_phases
            .iter()
            .map(|&(b, ph)| {
                (spec.flicker.as_ref().unwrap().amplitude)
                    * (2.0 * std::f64::consts::PI * b as f64 * tf / t_len as f64 + ph).cos()
            })
            .sum();
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = match spec.motion {
                    Motion::Static => (y as f64, x as f64),
                    Motion::Drift => (y as f64 + vy * tf, x as f64 + vx * tf),
                    Motion::Breathing => (
                        cy + (y as f64 - cy) * breath,
                        cx + (x as f64 - cx) * breath,
                    ),
                };
                let mut v = texture.at(sy, sx);
                if let Some(f) = &spec.flicker {
                    let dy = y as f64 - f.center_y as f64;
                    let dx = x as f64 - f.center_x as f64;
                    if dy * dy + dx * dx <= (f.radius * f.radius) as f64 {
                        v += flick;
                    }
                }
                if spec.noise_sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                data[(ti * h + y) * w + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    let clip = Clip {
        data: FeatureTensor::from_vec(&[("time", t_len), ("height", h), ("width", w)], data)?,
        source_id: format!("synth_{}", spec.seed),
        start_index: 0,
        stride: 1,
    };
    let truth = GroundTruth {
        label: u8::from(spec.flicker.is_some()),
        flicker: spec.flicker.clone(),
    };
    Ok((clip, truth))
}

/// Default flicker parameters for generated datasets.
pub const DEFAULT_FLICKER_RADIUS: usize = 8;
pub const DEFAULT_FLICKER_AMPLITUDE: f64 = 0.08;
pub const DEFAULT_FLICKER_BINS: [usize; 3] = [3, 5, 7];

/// One labeled dataset entry.
#[derive(Debug, Clone)]
pub struct DatasetClip {
    pub id: String,
    pub clip: Clip,
    pub truth: GroundTruth,
}

/// Manifest entry persisted next to generated frame directories.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestClip {
    pub id: String,
    pub dir: String,
    pub label: u8,
    pub flicker: Option<FlickerSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub clip_len: usize,
    pub height: usize,
    pub width: usize,
    pub clips: Vec<ManifestClip>,
}

/// Generates `n_real` clean and `n_fake` flickering clips from a template.
/// Flicker centers and bin subsets are randomized per fake clip; everything
/// is a pure function of `seed`.
pub fn make_dataset(
    n_real: usize,
    n_fake: usize,
    template: &SynthSpec,
    seed: u64,
) -> Result<Vec<DatasetClip>> {
    if n_real < 1 || n_fake < 1 {
        return Err(Error::Config("need at least one clip per class".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let bins_pool: Vec<usize> = template
        .flicker
        .as_ref()
        .map(|f| f.bins.clone())
        .unwrap_or_else(|| DEFAULT_FLICKER_BINS.to_vec());
    let radius = template
        .flicker
        .as_ref()
        .map(|f| f.radius)
        .unwrap_or(DEFAULT_FLICKER_RADIUS);
    let amplitude = template
        .flicker
        .as_ref()
        .map(|f| f.amplitude)
        .unwrap_or(DEFAULT_FLICKER_AMPLITUDE);
    // Keep discs clear of the border by a small margin beyond the radius.
    let margin = radius + 8;
    if template.height <= 2 * margin || template.width <= 2 * margin {
        return Err(Error::Config(format!(
            "frame {}x{} too small for flicker margin {margin}",
            template.height, template.width
        )));
    }

    let mut out = Vec::with_capacity(n_real + n_fake);
    for i in 0..n_real + n_fake {
        let clip_seed: u64 = master.gen();
        let flicker = if i >= n_real {
            let center_y = master.gen_range(margin..template.height - margin);
            let center_x = master.gen_range(margin..template.width - margin);
            let count = master.gen_range(1..=bins_pool.len());
            let mut pool = bins_pool.clone();
            let mut bins = Vec::with_capacity(count);
            for _ in 0..count {
                bins.push(pool.remove(master.gen_range(0..pool.len())));
            }
            bins.sort_unstable();
            Some(FlickerSpec {
                center_y,
                center_x,
                radius,
                bins,
                amplitude,
            })
        } else {
            None
        };
        let spec = SynthSpec {
            flicker,
            seed: clip_seed,
            ..template.clone()
        };
        let (mut clip, truth) = generate(&spec)?;
        let id = format!("clip_{i:04}");
        clip.source_id = id.clone();
        out.push(DatasetClip { id, clip, truth });
    }
    Ok(out)
}

/// Writes clips as frame directories plus a `manifest.json`.
pub fn write_dataset(dir: &Path, clips: &[DatasetClip], seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = Manifest {
        seed,
        clip_len: clips.first().map(|c| c.clip.frames()).unwrap_or(0),
        height: clips.first().map(|c| c.clip.height()).unwrap_or(0),
        width: clips.first().map(|c| c.clip.width()).unwrap_or(0),
        clips: Vec::with_capacity(clips.len()),
    };
    for entry in clips {
        let sub = dir.join(&entry.id);
        std::fs::create_dir_all(&sub)?;
        let (t, h, w) = (
            entry.clip.frames(),
            entry.clip.height(),
            entry.clip.width(),
        );
        let plane = h * w;
        for ti in 0..t {
            let frame = Frame::new(
                w,
                h,
                1,
                entry.clip.data.data()[ti * plane..(ti + 1) * plane].to_vec(),
            )?;
            let mut buf = Vec::new();
            write_pnm(&frame, &mut buf)?;
            std::fs::write(sub.join(format!("frame_{ti:06}.pgm")), buf)?;
        }
        manifest.clips.push(ManifestClip {
            id: entry.id.clone(),
            dir: entry.id.clone(),
            label: entry.truth.label,
            flicker: entry.truth.flicker.clone(),
        });
    }
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`] back into memory.
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<DatasetClip>)> {
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut clips = Vec::with_capacity(manifest.clips.len());
    for m in &manifest.clips {
        let seq = crate::ingest::load_sequence(&dir.join(&m.dir))?;
        let list = crate::ingest::make_clips(&seq, &m.id, manifest.clip_len, 1, manifest.clip_len, None)?;
        let clip = list
            .into_iter()
            .next()
            .ok_or_else(|| Error::Input(format!("no clip in {}", m.dir)))?;
        clips.push(DatasetClip {
            id: m.id.clone(),
            clip,
            truth: GroundTruth {
                label: m.label,
                flicker: m.flicker.clone(),
            },
        });
    }
    Ok((manifest, clips))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{residual_clip, ResidualConfig};
    use crate::spectrum::{band_energy_map, extract_spectrum, SpectrumMode};

    #[test]
    fn same_seed_is_bitwise_identical() {
        let spec = SynthSpec::default_toy(99);
        let (a, _) = generate(&spec).unwrap();
        let (b, _) = generate(&spec).unwrap();
        assert_eq!(
            a.data.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn static_noiseless_clip_has_zero_residual_on_constant_regions() {
        let spec = SynthSpec {
            motion: Motion::Static,
            noise_sigma: 0.0,
            ..SynthSpec::default_toy(4)
        };
        let (clip, _) = generate(&spec).unwrap();
        let res = residual_clip(&clip, &ResidualConfig::default()).unwrap();
        let (h, w) = (clip.height(), clip.width());
        // Find pixels whose 5x5 neighborhood is constant in frame 0; the
        // clamped texture guarantees such plateaus exist.
        let f0 = &clip.data.data()[..h * w];
        let mut flat = 0usize;
        for y in 2..h - 2 {
            for x in 2..w - 2 {
                let v = f0[y * w + x];
                let constant = (-2i32..=2).all(|dy| {
                    (-2i32..=2).all(|dx| {
                        f0[((y as i32 + dy) as usize) * w + (x as i32 + dx) as usize] == v
                    })
                });
                if constant {
                    flat += 1;
                    for ti in 0..clip.frames() {
                        assert_eq!(res.data.data()[(ti * h + y) * w + x], 0.0);
                    }
                }
            }
        }
        assert!(flat > 10, "expected constant plateaus, found {flat}");
    }

    #[test]
    fn planted_cosine_amplitude_matches_dft() {
        let spec = SynthSpec {
            motion: Motion::Static,
            noise_sigma: 0.0,
            flicker: Some(FlickerSpec {
                center_y: 32,
                center_x: 32,
                radius: 8,
                bins: vec![4],
                amplitude: 0.1,
            }),
            ..SynthSpec::default_toy(17)
        };
        let (clip, truth) = generate(&spec).unwrap();
        let vol = extract_spectrum(&clip, SpectrumMode::Magnitude).unwrap();
        let f = truth.flicker.unwrap();
        let plane = clip.height() * clip.width();
        let p = f.center_y * clip.width() + f.center_x;
        let mag = vol.data.data()[4 * plane + p] as f64;
        let expected = f.amplitude * clip.frames() as f64 / 2.0;
        assert!(
            (mag - expected).abs() < 1e-6,
            "bin-4 magnitude {mag} vs {expected}"
        );
    }

    #[test]
    fn planted_energy_argmax_recovers_a_bin() {
        // Static background: the planted bin wins over everything past DC.
        let clips = make_dataset(
            1,
            6,
            &SynthSpec {
                motion: Motion::Static,
                noise_sigma: 0.0,
                ..SynthSpec::default_toy(0)
            },
            5,
        )
        .unwrap();
        for entry in clips.iter().filter(|c| c.truth.label == 1) {
            let f = entry.truth.flicker.as_ref().unwrap();
            let vol = extract_spectrum(&entry.clip, SpectrumMode::Magnitude).unwrap();
            let plane = entry.clip.height() * entry.clip.width();
            let p = f.center_y * entry.clip.width() + f.center_x;
            let best = (1..vol.bins)
                .max_by(|&a, &b| {
                    vol.data.data()[a * plane + p].total_cmp(&vol.data.data()[b * plane + p])
                })
                .unwrap();
            assert!(f.bins.contains(&best), "argmax {best} not in {:?}", f.bins);
        }
        // Drifting background leaks texture energy into the first bin, but
        // the planted bins still dominate everything from bin 2 up.
        let clips = make_dataset(
            1,
            6,
            &SynthSpec {
                noise_sigma: 0.0,
                ..SynthSpec::default_toy(0)
            },
            5,
        )
        .unwrap();
        for entry in clips.iter().filter(|c| c.truth.label == 1) {
            let f = entry.truth.flicker.as_ref().unwrap();
            let vol = extract_spectrum(&entry.clip, SpectrumMode::Magnitude).unwrap();
            let plane = entry.clip.height() * entry.clip.width();
            let p = f.center_y * entry.clip.width() + f.center_x;
            let best = (2..vol.bins)
                .max_by(|&a, &b| {
                    vol.data.data()[a * plane + p].total_cmp(&vol.data.data()[b * plane + p])
                })
                .unwrap();
            assert!(f.bins.contains(&best), "argmax {best} not in {:?}", f.bins);
        }
    }

    #[test]
    fn dataset_is_balanced_deterministic_and_in_bounds() {
        let template = SynthSpec::default_toy(0);
        let a = make_dataset(20, 20, &template, 7).unwrap();
        let b = make_dataset(20, 20, &template, 7).unwrap();
        assert_eq!(a.len(), 40);
        assert_eq!(a.iter().filter(|c| c.truth.label == 1).count(), 20);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.clip.data.data(), y.clip.data.data());
        }
        for c in &a {
            if let Some(f) = &c.truth.flicker {
                assert!(f.center_y >= f.radius && f.center_y + f.radius < template.height);
                assert!(f.center_x >= f.radius && f.center_x + f.radius < template.width);
            }
        }
    }

    #[test]
    fn planted_region_band_energy_dominates_background() {
        let template = SynthSpec {
            motion: Motion::Static,
            ..SynthSpec::default_toy(0)
        };
        let clips = make_dataset(1, 4, &template, 11).unwrap();
        for entry in clips.iter().filter(|c| c.truth.label == 1) {
            let vol = extract_spectrum(&entry.clip, SpectrumMode::Magnitude).unwrap();
            let map = band_energy_map(&vol, 2, vol.bins - 1).unwrap();
            let f = entry.truth.flicker.as_ref().unwrap();
            let w = entry.clip.width();
            let mut planted = (0.0f64, 0usize);
            let mut background = (0.0f64, 0usize);
            for y in 0..entry.clip.height() {
                for x in 0..w {
                    let dy = y as f64 - f.center_y as f64;
                    let dx = x as f64 - f.center_x as f64;
                    let v = map.data()[y * w + x] as f64;
                    if dy * dy + dx * dx <= (f.radius * f.radius) as f64 {
                        planted.0 += v;
                        planted.1 += 1;
                    } else {
                        background.0 += v;
                        background.1 += 1;
                    }
                }
            }
            let planted_mean = planted.0 / planted.1 as f64;
            let background_mean = background.0 / background.1 as f64;
            assert!(
                planted_mean >= 10.0 * background_mean,
                "planted {planted_mean} vs background {background_mean}"
            );
        }
    }

    #[test]
    fn class_band_energy_separation_is_large() {
        // Peak band energy separates the classes by an order of magnitude at
        // the default amplitude.
        let template = SynthSpec {
            motion: Motion::Static,
            ..SynthSpec::default_toy(0)
        };
        let clips = make_dataset(6, 6, &template, 11).unwrap();
        let mut fake_min = f64::INFINITY;
        let mut real_max = 0.0f64;
        for entry in &clips {
            let vol = extract_spectrum(&entry.clip, SpectrumMode::Magnitude).unwrap();
            let map = band_energy_map(&vol, 2, vol.bins - 1).unwrap();
            let peak = map.data().iter().map(|&v| v as f64).fold(0.0, f64::max);
            if entry.truth.label == 1 {
                fake_min = fake_min.min(peak);
            } else {
                real_max = real_max.max(peak);
            }
        }
        assert!(
            fake_min >= 10.0 * real_max,
            "fake min {fake_min} vs real max {real_max}"
        );
    }

    #[test]
    fn write_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let template = SynthSpec::default_toy(0);
        let clips = make_dataset(2, 2, &template, 3).unwrap();
        write_dataset(dir.path(), &clips, 3).unwrap();
        let (manifest, loaded) = load_dataset(dir.path()).unwrap();
        assert_eq!(manifest.clips.len(), 4);
        assert_eq!(loaded.len(), 4);
        for (orig, back) in clips.iter().zip(&loaded) {
            assert_eq!(orig.truth.label, back.truth.label);
            // 8-bit quantization on disk.
            for (a, b) in orig.clip.data.data().iter().zip(back.clip.data.data()) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }
}
