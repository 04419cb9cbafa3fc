//! Per-pixel temporal frequency analysis.
//!
//! Every pixel's intensity track is transformed with a radix-2 FFT along
//! time; only the first T/2 bins (DC included, Nyquist dropped) are kept
//! since the input is real. A naive O(T^2) DFT serves as the independent
//! verification oracle for the fast transform.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::ingest::Clip;
use crate::par;
use crate::tensor::FeatureTensor;

/// What the per-bin values of a volume hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectrumMode {
    Magnitude,
    Phase,
    /// Magnitude bins followed by phase bins along the bin axis.
    Both,
}

impl SpectrumMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "magnitude" => Ok(Self::Magnitude),
            "phase" => Ok(Self::Phase),
            "both" => Ok(Self::Both),
            other => Err(Error::Config(format!(
                "unknown spectrum mode {other:?} (magnitude|phase|both)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Magnitude => "magnitude",
            Self::Phase => "phase",
            Self::Both => "both",
        }
    }
}

/// Per-pixel temporal-frequency volume: a `bin x height x width` tensor with
/// `bins = T/2` frequency bins (bin 0 = DC). In `Both` mode the bin axis
/// holds 2*bins values: magnitudes first, then phases.
#[derive(Debug, Clone)]
pub struct SpectrumVolume {
    pub data: FeatureTensor,
    pub bins: usize,
    /// Frequency step per bin in Hz, from frame_rate / (stride * T).
    pub bin_hz: f64,
    pub mode: SpectrumMode,
}

impl SpectrumVolume {
    pub fn height(&self) -> usize {
        self.data.extent(1)
    }

    pub fn width(&self) -> usize {
        self.data.extent(2)
    }
}

/// Naive O(T^2) discrete Fourier transform in 64-bit precision:
/// `X[k] = sum_t v[t] * exp(-2*pi*i*k*t/T)`. This is the reference other
/// transforms are checked against, so it stays deliberately simple.
pub fn dft_oracle(v: &[f64]) -> Vec<Complex64> {
    let n = v.len();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let mut acc = Complex64::new(0.0, 0.0);
        for (t, &x) in v.iter().enumerate() {
            let angle = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
            acc += Complex64::new(angle.cos(), angle.sin()) * x;
        }
        out.push(acc);
    }
    out
}

/// Iterative radix-2 FFT. The length must be a power of two.
pub fn fft(v: &[f64]) -> Result<Vec<Complex64>> {
    let n = v.len();
    if n < 2 || !n.is_power_of_two() {
        return Err(Error::Config(format!(
            "FFT length {n} is not a power of two >= 2"
        )));
    }
    let mut buf: Vec<Complex64> = v.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft_in_place(&mut buf);
    Ok(buf)
}

fn fft_in_place(buf: &mut [Complex64]) {
    let n = buf.len();
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = (i.reverse_bits() >> (usize::BITS - bits)) as usize;
        if j > i {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let step = -2.0 * std::f64::consts::PI / len as f64;
        let half = len / 2;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let angle = step * k as f64;
                let w = Complex64::new(angle.cos(), angle.sin());
                let a = buf[start + k];
                let b = buf[start + k + half] * w;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

fn pixel_spectrum(track: &[f64], bins: usize, mode: SpectrumMode, out: &mut [f32]) {
    let mut buf: Vec<Complex64> = track.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft_in_place(&mut buf);
    match mode {
        SpectrumMode::Magnitude => {
            for k in 0..bins {
                out[k] = buf[k].norm() as f32;
            }
        }
        SpectrumMode::Phase => {
            for k in 0..bins {
                out[k] = buf[k].im.atan2(buf[k].re) as f32;
            }
        }
        SpectrumMode::Both => {
            for k in 0..bins {
                out[k] = buf[k].norm() as f32;
                out[bins + k] = buf[k].im.atan2(buf[k].re) as f32;
            }
        }
    }
}

fn extract_impl(clip: &Clip, mode: SpectrumMode, frame_rate: f64, sequential: bool) -> Result<SpectrumVolume> {
    let (t, h, w) = (clip.frames(), clip.height(), clip.width());
    if t < 2 || !t.is_power_of_two() {
        return Err(Error::Config(format!(
            "clip length {t} is not a power of two >= 2"
        )));
    }
    let bins = t / 2;
    let per_pixel = match mode {
        SpectrumMode::Both => 2 * bins,
        _ => bins,
    };
    let plane = h * w;
    let src = clip.data.data();
    // Pixel-major scratch: each worker fills a disjoint per-pixel chunk, so
    // the result is identical for any partitioning of the pixel grid.
    let mut scratch = vec![0.0f32; plane * per_pixel];
    let fill = |p: usize, chunk: &mut [f32]| {
        let mut track = vec![0.0f64; t];
        for (ti, slot) in track.iter_mut().enumerate() {
            *slot = src[ti * plane + p] as f64;
        }
        pixel_spectrum(&track, bins, mode, chunk);
    };
    if sequential {
        par::for_each_chunk_seq(&mut scratch, per_pixel, fill);
    } else {
        par::for_each_chunk(&mut scratch, per_pixel, fill);
    }
    // Transpose pixel-major to bin-major.
    let mut data = vec![0.0f32; per_pixel * plane];
    for p in 0..plane {
        for k in 0..per_pixel {
            data[k * plane + p] = scratch[p * per_pixel + k];
        }
    }
    Ok(SpectrumVolume {
        data: FeatureTensor::from_parts(
            vec![
                ("bin".to_string(), per_pixel),
                ("height".to_string(), h),
                ("width".to_string(), w),
            ],
            data,
        ),
        bins,
        bin_hz: frame_rate / (clip.stride.max(1) * t) as f64,
        mode,
    })
}

/// Transforms every pixel's temporal track of a (residual) clip, keeping
/// bins `0..T/2`. Internally parallel over pixels; the output is bit-exact
/// for any worker count.
pub fn extract_spectrum(clip: &Clip, mode: SpectrumMode) -> Result<SpectrumVolume> {
    extract_impl(clip, mode, 30.0, false)
}

/// Always-sequential reference path of [`extract_spectrum`], kept public for
/// benchmarks and partition-invariance tests.
pub fn extract_spectrum_seq(clip: &Clip, mode: SpectrumMode) -> Result<SpectrumVolume> {
    extract_impl(clip, mode, 30.0, true)
}

/// Removes the DC bin from a magnitude or phase volume.
pub fn drop_dc(vol: &SpectrumVolume) -> Result<SpectrumVolume> {
    if vol.mode == SpectrumMode::Both {
        return Err(Error::Config("drop_dc needs magnitude or phase mode".into()));
    }
    let (h, w) = (vol.height(), vol.width());
    let plane = h * w;
    let data = vol.data.data()[plane..].to_vec();
    Ok(SpectrumVolume {
        data: FeatureTensor::from_parts(
            vec![
                ("bin".to_string(), vol.bins - 1),
                ("height".to_string(), h),
                ("width".to_string(), w),
            ],
            data,
        ),
        bins: vol.bins - 1,
        bin_hz: vol.bin_hz,
        mode: vol.mode,
    })
}

/// Per-pixel sum of squared magnitudes over bins `k_lo..=k_hi`.
pub fn band_energy_map(vol: &SpectrumVolume, k_lo: usize, k_hi: usize) -> Result<FeatureTensor> {
    if vol.mode != SpectrumMode::Magnitude {
        return Err(Error::Domain(
            "band_energy_map needs a magnitude volume".into(),
        ));
    }
    if k_lo > k_hi || k_hi >= vol.bins {
        return Err(Error::Domain(format!(
            "bin range [{k_lo}, {k_hi}] outside 0..{}",
            vol.bins
        )));
    }
    let (h, w) = (vol.height(), vol.width());
    let plane = h * w;
    let src = vol.data.data();
    let mut out = vec![0.0f32; plane];
    for (p, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for k in k_lo..=k_hi {
            let m = src[k * plane + p] as f64;
            acc += m * m;
        }
        *slot = acc as f32;
    }
    Ok(FeatureTensor::from_parts(
        vec![("height".to_string(), h), ("width".to_string(), w)],
        out,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::FeatureTensor;

    fn clip_from(t: usize, h: usize, w: usize, data: Vec<f32>) -> Clip {
        Clip {
            data: FeatureTensor::from_vec(&[("time", t), ("height", h), ("width", w)], data)
                .unwrap(),
            source_id: "test".into(),
            start_index: 0,
            stride: 1,
        }
    }

    #[test]
    fn oracle_dc_only_signal() {
        let x = dft_oracle(&[1.0; 8]);
        assert!((x[0].re - 8.0).abs() < 1e-12);
        assert!(x[0].im.abs() < 1e-12);
        for k in 1..8 {
            assert!(x[k].norm() < 1e-12);
        }
    }

    #[test]
    fn oracle_cosine_bins() {
        let v: Vec<f64> = (0..8)
            .map(|t| (2.0 * std::f64::consts::PI * 2.0 * t as f64 / 8.0).cos())
            .collect();
        let x = dft_oracle(&v);
        for k in 0..8 {
            let expect = if k == 2 || k == 6 { 4.0 } else { 0.0 };
            assert!((x[k].norm() - expect).abs() < 1e-9, "bin {k}");
        }
    }

    #[test]
    fn oracle_impulse_is_flat() {
        let mut v = vec![0.0; 8];
        v[0] = 1.0;
        let x = dft_oracle(&v);
        for k in 0..8 {
            assert!((x[k] - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn fft_matches_oracle_on_random_vectors() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for &n in &[8usize, 16, 32, 64, 256, 1024] {
            for _ in 0..20 {
                let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let fast = fft(&v).unwrap();
                let slow = dft_oracle(&v);
                let scale = slow.iter().map(|c| c.norm()).fold(1e-30, f64::max);
                for (a, b) in fast.iter().zip(&slow) {
                    assert!((a - b).norm() / scale < 1e-9, "T={n}");
                }
            }
        }
    }

    #[test]
    fn fft_zeros_and_linearity() {
        let z = fft(&vec![0.0; 16]).unwrap();
        assert!(z.iter().all(|c| c.norm() == 0.0));

        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let u: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (a, b) = (0.7, -1.3);
        let mix: Vec<f64> = u.iter().zip(&w).map(|(x, y)| a * x + b * y).collect();
        let fu = fft(&u).unwrap();
        let fw = fft(&w).unwrap();
        let fmix = fft(&mix).unwrap();
        for k in 0..32 {
            let expect = fu[k] * a + fw[k] * b;
            assert!((fmix[k] - expect).norm() < 1e-9);
        }
    }

    #[test]
    fn fft_rejects_non_power_of_two() {
        assert!(matches!(fft(&[0.0; 12]), Err(Error::Config(_))));
    }

    #[test]
    fn parseval_via_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let v: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let time_energy: f64 = v.iter().map(|x| x * x).sum();
        let x = dft_oracle(&v);
        let freq_energy: f64 = x.iter().map(|c| c.norm_sqr()).sum::<f64>() / 64.0;
        assert!((time_energy - freq_energy).abs() / time_energy < 1e-6);
    }

    #[test]
    fn extract_zero_clip_is_zero_volume() {
        let c = clip_from(8, 3, 3, vec![0.0; 72]);
        let vol = extract_spectrum(&c, SpectrumMode::Magnitude).unwrap();
        assert_eq!(vol.bins, 4);
        assert!(vol.data.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn extract_planted_cosine_bin() {
        let (t, h, w) = (32usize, 4usize, 4usize);
        let (py, px) = (1usize, 2usize);
        let mut data = vec![0.0f32; t * h * w];
        for ti in 0..t {
            let v = (2.0 * std::f64::consts::PI * 4.0 * ti as f64 / t as f64).cos();
            data[ti * h * w + py * w + px] = v as f32;
        }
        let vol = extract_spectrum(&clip_from(t, h, w, data), SpectrumMode::Magnitude).unwrap();
        assert_eq!(vol.bins, 16);
        for k in 0..16 {
            for p in 0..h * w {
                let v = vol.data.data()[k * h * w + p];
                if k == 4 && p == py * w + px {
                    assert!((v - 16.0).abs() < 1e-5);
                } else {
                    assert!(v.abs() < 1e-6, "bin {k} pixel {p}: {v}");
                }
            }
        }
    }

    #[test]
    fn static_clip_has_dc_only() {
        let frame: Vec<f32> = (0..9).map(|i| 0.1 + 0.05 * i as f32).collect();
        let mut data = Vec::new();
        for _ in 0..8 {
            data.extend_from_slice(&frame);
        }
        let vol = extract_spectrum(&clip_from(8, 3, 3, data), SpectrumMode::Magnitude).unwrap();
        let plane = 9;
        for p in 0..plane {
            assert!(vol.data.data()[p] > 0.0);
            for k in 1..4 {
                assert!(vol.data.data()[k * plane + p].abs() < 1e-5);
            }
        }
    }

    #[test]
    fn parallel_and_sequential_paths_are_bit_identical() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let data: Vec<f32> = (0..32 * 8 * 8).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let c = clip_from(32, 8, 8, data);
        for mode in [SpectrumMode::Magnitude, SpectrumMode::Phase, SpectrumMode::Both] {
            let par = extract_spectrum(&c, mode).unwrap();
            let seq = extract_spectrum_seq(&c, mode).unwrap();
            assert_eq!(
                par.data.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                seq.data.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn time_reversal_preserves_magnitudes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let (t, h, w) = (16usize, 3usize, 2usize);
        let data: Vec<f32> = (0..t * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut rev = vec![0.0f32; t * h * w];
        for ti in 0..t {
            // Reversal fixing index 0 maps t -> (T - t) mod T, the conjugating
            // symmetry of the transform.
            let si = (t - ti) % t;
            rev[ti * h * w..(ti + 1) * h * w]
                .copy_from_slice(&data[si * h * w..(si + 1) * h * w]);
        }
        let a = extract_spectrum(&clip_from(t, h, w, data), SpectrumMode::Magnitude).unwrap();
        let b = extract_spectrum(&clip_from(t, h, w, rev), SpectrumMode::Magnitude).unwrap();
        for (x, y) in a.data.data().iter().zip(b.data.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn both_mode_stacks_magnitude_then_phase() {
        let c = clip_from(8, 2, 2, (0..32).map(|i| (i % 5) as f32 * 0.1).collect());
        let both = extract_spectrum(&c, SpectrumMode::Both).unwrap();
        let mag = extract_spectrum(&c, SpectrumMode::Magnitude).unwrap();
        let ph = extract_spectrum(&c, SpectrumMode::Phase).unwrap();
        assert_eq!(both.data.extent(0), 8);
        assert_eq!(&both.data.data()[..16], mag.data.data());
        assert_eq!(&both.data.data()[16..], ph.data.data());
    }

    #[test]
    fn drop_dc_shifts_bins() {
        let c = clip_from(8, 2, 2, vec![0.25; 32]);
        let vol = extract_spectrum(&c, SpectrumMode::Magnitude).unwrap();
        let nodc = drop_dc(&vol).unwrap();
        assert_eq!(nodc.bins, 3);
        assert_eq!(nodc.data.data(), &vol.data.data()[4..]);
    }

    #[test]
    fn band_energy_map_examples() {
        let c = clip_from(8, 2, 2, vec![0.0; 32]);
        let vol = extract_spectrum(&c, SpectrumMode::Magnitude).unwrap();
        let map = band_energy_map(&vol, 0, 3).unwrap();
        assert!(map.data().iter().all(|&v| v == 0.0));
        assert!(matches!(band_energy_map(&vol, 2, 1), Err(Error::Domain(_))));
        assert!(matches!(band_energy_map(&vol, 0, 4), Err(Error::Domain(_))));

        // Single nonzero bin: the map is that bin's squared magnitude.
        let mut data = vec![0.0f32; 8 * 4];
        for ti in 0..8 {
            let v = (2.0 * std::f64::consts::PI * 2.0 * ti as f64 / 8.0).cos() as f32;
            data[ti * 4] = 0.5 * v;
        }
        let vol = extract_spectrum(&clip_from(8, 2, 2, data), SpectrumMode::Magnitude).unwrap();
        let map = band_energy_map(&vol, 2, 2).unwrap();
        let m = vol.data.data()[2 * 4];
        assert!((map.data()[0] - m * m).abs() < 1e-6);
    }

    #[test]
    fn stride_sampling_maps_bins_per_oracle() {
        // cos(2*pi*t/64) sampled every 8 frames for 32 samples completes
        // 32*8/64 = 4 cycles, so the energy lands in bin 4.
        use crate::ingest::{make_clips, Frame, FrameSequence};
        let frames: Vec<Frame> = (0..256)
            .map(|t| {
                let v = 0.5 + 0.4 * (2.0 * std::f64::consts::PI * t as f64 / 64.0).cos();
                Frame::new(1, 1, 1, vec![v as f32]).unwrap()
            })
            .collect();
        let seq = FrameSequence::new(frames, 30.0).unwrap();
        let clip = &make_clips(&seq, "s", 32, 8, 256, None).unwrap()[0];
        let vol = extract_spectrum(clip, SpectrumMode::Magnitude).unwrap();
        let mags: Vec<f32> = (0..16).map(|k| vol.data.data()[k]).collect();
        let best = (1..16).max_by(|&a, &b| mags[a].total_cmp(&mags[b])).unwrap();
        assert_eq!(best, 4);
        assert!((mags[4] - 0.4 * 16.0).abs() < 1e-3);
    }
}
