//! Dense row-major tensor with named axes.
//!
//! Storage is `f32`; reductions and matrix products accumulate in `f64`.
//! The canonical axis order for video-derived tensors is
//! (channel, time, height, width), which keeps a pixel's temporal samples
//! contiguous after one transpose.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Dense multi-dimensional array of `f32` values with uniquely named axes.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    dims: Vec<(String, usize)>,
    data: Vec<f32>,
}

impl FeatureTensor {
    /// Builds a tensor, validating the shape/data contract: extents multiply
    /// to the data length, axis names are unique, and every value is finite.
    pub fn from_vec(dims: &[(&str, usize)], data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().map(|(_, e)| *e).product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "dims {:?} imply {} values, got {}",
                dims,
                n,
                data.len()
            )));
        }
        for (i, (name, _)) in dims.iter().enumerate() {
            if dims[..i].iter().any(|(m, _)| m == name) {
                return Err(Error::Shape(format!("duplicate axis name {name:?}")));
            }
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite value {v} in tensor data")));
        }
        Ok(Self {
            dims: dims.iter().map(|(n, e)| (n.to_string(), *e)).collect(),
            data,
        })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(dims: &[(&str, usize)]) -> Self {
        let n: usize = dims.iter().map(|(_, e)| *e).product();
        Self::from_vec(dims, vec![0.0; n]).expect("zeros is always valid")
    }

    /// Constructor for internal use where the invariants hold by construction.
    pub(crate) fn from_parts(dims: Vec<(String, usize)>, data: Vec<f32>) -> Self {
        debug_assert_eq!(dims.iter().map(|(_, e)| *e).product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn dims(&self) -> &[(String, usize)] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Extent of axis `i`.
    pub fn extent(&self, i: usize) -> usize {
        self.dims[i].1
    }

    /// Extents of all axes in order.
    pub fn shape(&self) -> Vec<usize> {
        self.dims.iter().map(|(_, e)| *e).collect()
    }

    /// Index of the axis with the given name.
    pub fn axis(&self, name: &str) -> Result<usize> {
        self.dims
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Shape(format!("unknown axis {name:?}")))
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Renames the axes, keeping extents and data.
    pub fn with_axis_names(mut self, names: &[&str]) -> Result<Self> {
        if names.len() != self.dims.len() {
            return Err(Error::Shape(format!(
                "{} names for rank-{} tensor",
                names.len(),
                self.dims.len()
            )));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Shape(format!("duplicate axis name {n:?}")));
            }
            self.dims[i].0 = n.to_string();
        }
        Ok(self)
    }

    /// Row-major linear offset of a multi-index.
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dims.len());
        let mut off = 0;
        for (i, &ix) in idx.iter().enumerate() {
            debug_assert!(ix < self.dims[i].1);
            off = off * self.dims[i].1 + ix;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> f32 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f32) {
        let off = self.offset(idx);
        self.data[off] = v;
    }
}

/// Standard matrix product of a `m x k` by a `k x n` tensor.
///
/// Accumulates in `f64`; the result keeps `a`'s row axis and `b`'s column
/// axis names.
pub fn matmul(a: &FeatureTensor, b: &FeatureTensor) -> Result<FeatureTensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::Shape(format!(
            "matmul needs rank-2 operands, got {} and {}",
            a.rank(),
            b.rank()
        )));
    }
    let (m, k) = (a.extent(0), a.extent(1));
    let (k2, n) = (b.extent(0), b.extent(1));
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner extents differ: {k} vs {k2}"
        )));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let mut acc = 0.0f64;
            for (l, &av) in arow.iter().enumerate() {
                acc += av as f64 * b.data[l * n + j] as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
    let dims = vec![a.dims[0].clone(), b.dims[1].clone()];
    Ok(FeatureTensor::from_parts(dims, out))
}

/// Bilinear interpolation of a `C x H x W` tensor at fractional (y, x).
///
/// Queries at integer lattice points return the stored values exactly.
pub fn bilinear_sample(t: &FeatureTensor, y: f64, x: f64) -> Result<Vec<f32>> {
    if t.rank() != 3 {
        return Err(Error::Shape(format!(
            "bilinear_sample needs a rank-3 tensor, got rank {}",
            t.rank()
        )));
    }
    let (c, h, w) = (t.extent(0), t.extent(1), t.extent(2));
    if !(y >= 0.0 && y <= (h - 1) as f64) || !(x >= 0.0 && x <= (w - 1) as f64) {
        return Err(Error::Domain(format!(
            "query ({y}, {x}) outside grid {h}x{w}"
        )));
    }
    let y0 = (y.floor() as usize).min(h - 1);
    let x0 = (x.floor() as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let mut out = Vec::with_capacity(c);
    for ch in 0..c {
        let base = ch * h * w;
        let v00 = t.data[base + y0 * w + x0] as f64;
        let v01 = t.data[base + y0 * w + x1] as f64;
        let v10 = t.data[base + y1 * w + x0] as f64;
        let v11 = t.data[base + y1 * w + x1] as f64;
        let top = v00 + fx * (v01 - v00);
        let bot = v10 + fx * (v11 - v10);
        out.push((top + fy * (bot - top)) as f32);
    }
    Ok(out)
}

/// Source coordinate for output index `i` under align-corners mapping.
pub(crate) fn align_corners_coord(i: usize, out_extent: usize, in_extent: usize) -> f64 {
    if out_extent <= 1 {
        0.0
    } else {
        i as f64 * (in_extent - 1) as f64 / (out_extent - 1) as f64
    }
}

/// Resizes a `C x H x W` tensor to `C x new_h x new_w` with align-corners
/// bilinear sampling. Corner cells map to corner cells; resizing to the same
/// size reproduces the input bitwise.
pub fn resize_bilinear(t: &FeatureTensor, new_h: usize, new_w: usize) -> Result<FeatureTensor> {
    if t.rank() != 3 {
        return Err(Error::Shape(format!(
            "resize_bilinear needs a rank-3 tensor, got rank {}",
            t.rank()
        )));
    }
    if new_h == 0 || new_w == 0 {
        return Err(Error::Shape("resize target extent is zero".into()));
    }
    let (c, h, w) = (t.extent(0), t.extent(1), t.extent(2));
    if new_h == h && new_w == w {
        return Ok(t.clone());
    }
    let mut out = vec![0.0f32; c * new_h * new_w];
    for oy in 0..new_h {
        let sy = align_corners_coord(oy, new_h, h);
        let y0 = (sy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..new_w {
            let sx = align_corners_coord(ox, new_w, w);
            let x0 = (sx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let base = ch * h * w;
                let v00 = t.data[base + y0 * w + x0] as f64;
                let v01 = t.data[base + y0 * w + x1] as f64;
                let v10 = t.data[base + y1 * w + x0] as f64;
                let v11 = t.data[base + y1 * w + x1] as f64;
                let top = v00 + fx * (v01 - v00);
                let bot = v10 + fx * (v11 - v10);
                out[ch * new_h * new_w + oy * new_w + ox] = (top + fy * (bot - top)) as f32;
            }
        }
    }
    let dims = vec![
        t.dims[0].clone(),
        (t.dims[1].0.clone(), new_h),
        (t.dims[2].0.clone(), new_w),
    ];
    Ok(FeatureTensor::from_parts(dims, out))
}

/// Adjoint of [`resize_bilinear`]: scatters an output-shaped gradient back to
/// the input shape using the same align-corners weights.
pub fn resize_bilinear_adjoint(
    grad_out: &FeatureTensor,
    in_h: usize,
    in_w: usize,
) -> Result<FeatureTensor> {
    if grad_out.rank() != 3 {
        return Err(Error::Shape("resize adjoint needs a rank-3 tensor".into()));
    }
    let (c, oh, ow) = (grad_out.extent(0), grad_out.extent(1), grad_out.extent(2));
    let mut acc = vec![0.0f64; c * in_h * in_w];
    for oy in 0..oh {
        let sy = align_corners_coord(oy, oh, in_h);
        let y0 = (sy.floor() as usize).min(in_h - 1);
        let y1 = (y0 + 1).min(in_h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..ow {
            let sx = align_corners_coord(ox, ow, in_w);
            let x0 = (sx.floor() as usize).min(in_w - 1);
            let x1 = (x0 + 1).min(in_w - 1);
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let g = grad_out.data[ch * oh * ow + oy * ow + ox] as f64;
                let base = ch * in_h * in_w;
                acc[base + y0 * in_w + x0] += g * (1.0 - fy) * (1.0 - fx);
                acc[base + y0 * in_w + x1] += g * (1.0 - fy) * fx;
                acc[base + y1 * in_w + x0] += g * fy * (1.0 - fx);
                acc[base + y1 * in_w + x1] += g * fy * fx;
            }
        }
    }
    let dims = vec![
        grad_out.dims[0].clone(),
        (grad_out.dims[1].0.clone(), in_h),
        (grad_out.dims[2].0.clone(), in_w),
    ];
    Ok(FeatureTensor::from_parts(
        dims,
        acc.into_iter().map(|v| v as f32).collect(),
    ))
}

/// Arithmetic mean along the named axis; the axis is removed from the result.
pub fn reduce_mean(t: &FeatureTensor, axis: &str) -> Result<FeatureTensor> {
    let ax = t.axis(axis)?;
    let extent = t.extent(ax);
    let outer: usize = t.dims[..ax].iter().map(|(_, e)| *e).product();
    let inner: usize = t.dims[ax + 1..].iter().map(|(_, e)| *e).product();
    let mut out = vec![0.0f32; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let mut acc = 0.0f64;
            for k in 0..extent {
                acc += t.data[(o * extent + k) * inner + i] as f64;
            }
            out[o * inner + i] = (acc / extent as f64) as f32;
        }
    }
    let mut dims = t.dims.clone();
    dims.remove(ax);
    Ok(FeatureTensor::from_parts(dims, out))
}

const FLT1_MAGIC: &[u8; 4] = b"FLT1";

/// Serializes the tensor in the FLT1 format: magic `FLT1`, u8 rank, per axis
/// a u8 name length + name bytes + u32 little-endian extent, then the raw
/// little-endian `f32` payload.
pub fn write_flt1<W: Write>(t: &FeatureTensor, w: &mut W) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Shape(format!("rank {} exceeds FLT1 limit", t.rank())));
    }
    w.write_all(FLT1_MAGIC)?;
    w.write_all(&[t.rank() as u8])?;
    for (name, extent) in &t.dims {
        let bytes = name.as_bytes();
        if bytes.len() > u8::MAX as usize {
            return Err(Error::Format(format!("axis name {name:?} too long")));
        }
        if *extent > u32::MAX as usize {
            return Err(Error::Format(format!("extent {extent} exceeds u32")));
        }
        w.write_all(&[bytes.len() as u8])?;
        w.write_all(bytes)?;
        w.write_all(&(*extent as u32).to_le_bytes())?;
    }
    for v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads one FLT1 record. Returns `Ok(None)` at a clean end of stream, which
/// lets several records be concatenated in a single file.
pub fn read_flt1<R: Read>(r: &mut R) -> Result<Option<FeatureTensor>> {
    let mut magic = [0u8; 4];
    match r.read(&mut magic)? {
        0 => return Ok(None),
        4 => {}
        n => {
            let mut rest = magic[n..].to_vec();
            r.read_exact(&mut rest)
                .map_err(|_| Error::Format("truncated FLT1 magic".into()))?;
            magic[n..].copy_from_slice(&rest);
        }
    }
    if &magic != FLT1_MAGIC {
        return Err(Error::Format(format!("bad FLT1 magic {magic:?}")));
    }
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank)?;
    let mut dims = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        let mut nlen = [0u8; 1];
        r.read_exact(&mut nlen)?;
        let mut name = vec![0u8; nlen[0] as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("axis name is not valid UTF-8".into()))?;
        let mut ext = [0u8; 4];
        r.read_exact(&mut ext)?;
        dims.push((name, u32::from_le_bytes(ext) as usize));
    }
    let n: usize = dims.iter().map(|(_, e)| *e).product();
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload)
        .map_err(|_| Error::Format("truncated FLT1 payload".into()))?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(v) = data.iter().find(|v| !v.is_finite()) {
        return Err(Error::Format(format!("non-finite value {v} in FLT1 payload")));
    }
    for (i, (name, _)) in dims.iter().enumerate() {
        if dims[..i].iter().any(|(m, _)| m == name) {
            return Err(Error::Format(format!("duplicate axis name {name:?}")));
        }
    }
    Ok(Some(FeatureTensor::from_parts(dims, data)))
}

/// Writes a tensor to a FLT1 file.
pub fn save_flt1(t: &FeatureTensor, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_flt1(t, &mut f)?;
    use std::io::Write as _;
    f.flush()?;
    Ok(())
}

/// Reads a single-tensor FLT1 file.
pub fn load_flt1(path: &Path) -> Result<FeatureTensor> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_flt1(&mut f)?.ok_or_else(|| Error::Format(format!("{} is empty", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor2(rows: usize, cols: usize, data: &[f32]) -> FeatureTensor {
        FeatureTensor::from_vec(&[("row", rows), ("col", cols)], data.to_vec()).unwrap()
    }

    #[test]
    fn from_vec_rejects_bad_shape_and_names() {
        assert!(matches!(
            FeatureTensor::from_vec(&[("a", 2), ("b", 2)], vec![0.0; 3]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            FeatureTensor::from_vec(&[("a", 2), ("a", 2)], vec![0.0; 4]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            FeatureTensor::from_vec(&[("a", 1)], vec![f32::NAN]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn matmul_identity() {
        let m = tensor2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let id = tensor2(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let out = matmul(&id, &m).unwrap();
        assert_eq!(out.data(), m.data());
    }

    #[test]
    fn matmul_hand_example() {
        let a = tensor2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = tensor2(2, 1, &[0.0, 1.0]);
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = tensor2(2, 3, &[0.0; 6]);
        let b = tensor2(4, 5, &[0.0; 20]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn bilinear_exact_lattice_point() {
        let mut t = FeatureTensor::zeros(&[("c", 2), ("h", 4), ("w", 5)]);
        t.set(&[0, 2, 3], 7.5);
        t.set(&[1, 2, 3], -1.25);
        let v = bilinear_sample(&t, 2.0, 3.0).unwrap();
        assert_eq!(v, vec![7.5, -1.25]);
    }

    #[test]
    fn bilinear_constant_field_midpoint() {
        let t = FeatureTensor::from_vec(&[("c", 1), ("h", 2), ("w", 2)], vec![7.0; 4]).unwrap();
        let v = bilinear_sample(&t, 0.5, 0.5).unwrap();
        assert_eq!(v, vec![7.0]);
    }

    #[test]
    fn bilinear_midpoint_between_two_values() {
        let t = FeatureTensor::from_vec(&[("c", 1), ("h", 1), ("w", 2)], vec![0.0, 1.0]).unwrap();
        let v = bilinear_sample(&t, 0.0, 0.5).unwrap();
        assert_eq!(v, vec![0.5]);
    }

    #[test]
    fn bilinear_out_of_range() {
        let t = FeatureTensor::zeros(&[("c", 1), ("h", 2), ("w", 2)]);
        assert!(matches!(bilinear_sample(&t, -0.1, 0.0), Err(Error::Domain(_))));
        assert!(matches!(bilinear_sample(&t, 0.0, 1.5), Err(Error::Domain(_))));
    }

    #[test]
    fn resize_same_size_is_bitwise_identity() {
        let t = FeatureTensor::from_vec(
            &[("c", 1), ("h", 2), ("w", 3)],
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
        )
        .unwrap();
        let out = resize_bilinear(&t, 2, 3).unwrap();
        assert_eq!(out.data(), t.data());
    }

    #[test]
    fn resize_constant_stays_constant() {
        let t = FeatureTensor::from_vec(&[("c", 1), ("h", 2), ("w", 2)], vec![3.25; 4]).unwrap();
        let out = resize_bilinear(&t, 5, 7).unwrap();
        assert!(out.data().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn resize_align_corners_arithmetic() {
        let t = FeatureTensor::from_vec(&[("c", 1), ("h", 1), ("w", 2)], vec![0.0, 2.0]).unwrap();
        let out = resize_bilinear(&t, 1, 3).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn resize_zero_target_is_error() {
        let t = FeatureTensor::zeros(&[("c", 1), ("h", 2), ("w", 2)]);
        assert!(matches!(resize_bilinear(&t, 0, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn reduce_mean_basics() {
        let t = FeatureTensor::from_vec(&[("a", 1), ("b", 3)], vec![1.0, 2.0, 3.0]).unwrap();
        let m = reduce_mean(&t, "a").unwrap();
        assert_eq!(m.data(), &[1.0, 2.0, 3.0]);
        assert_eq!(m.dims().len(), 1);
        let m2 = reduce_mean(&t, "b").unwrap();
        assert_eq!(m2.data(), &[2.0]);
        assert!(matches!(reduce_mean(&t, "zz"), Err(Error::Shape(_))));
    }

    #[test]
    fn reduce_mean_of_integer_period_sinusoid_is_zero() {
        let t_len = 32;
        let data: Vec<f32> = (0..t_len)
            .map(|t| (2.0 * std::f64::consts::PI * 3.0 * t as f64 / t_len as f64).sin() as f32)
            .collect();
        let t = FeatureTensor::from_vec(&[("time", t_len)], data).unwrap();
        let m = reduce_mean(&t, "time").unwrap();
        assert!(m.data()[0].abs() < 1e-6);
    }

    #[test]
    fn flt1_round_trip_bitwise() {
        let t = FeatureTensor::from_vec(
            &[("bin", 2), ("height", 1), ("width", 3)],
            vec![0.5, -1.5, 3.0e-7, 123.0, -0.0, 9.9],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_flt1(&t, &mut buf).unwrap();
        let back = read_flt1(&mut buf.as_slice()).unwrap().unwrap();
        assert_eq!(back.dims(), t.dims());
        assert_eq!(
            back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn flt1_stream_of_records() {
        let a = FeatureTensor::zeros(&[("x", 2)]);
        let b = FeatureTensor::from_vec(&[("y", 1)], vec![4.0]).unwrap();
        let mut buf = Vec::new();
        write_flt1(&a, &mut buf).unwrap();
        write_flt1(&b, &mut buf).unwrap();
        let mut r = buf.as_slice();
        assert_eq!(read_flt1(&mut r).unwrap().unwrap().dims()[0].0, "x");
        assert_eq!(read_flt1(&mut r).unwrap().unwrap().data(), &[4.0]);
        assert!(read_flt1(&mut r).unwrap().is_none());
    }

    #[test]
    fn flt1_rejects_bad_magic() {
        let buf = b"NOPE\x00".to_vec();
        assert!(matches!(
            read_flt1(&mut buf.as_slice()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn matmul_associative_within_tolerance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let dims: Vec<usize> = (0..4).map(|_| rng.gen_range(1..6)).collect();
            let mk = |r: usize, c: usize, rng: &mut rand_chacha::ChaCha8Rng| {
                let data: Vec<f32> = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
                tensor2(r, c, &data)
            };
            let a = mk(dims[0], dims[1], &mut rng);
            let b = mk(dims[1], dims[2], &mut rng);
            let c = mk(dims[2], dims[3], &mut rng);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let norm: f32 = left.data().iter().map(|v| v.abs()).fold(0.0, f32::max);
            for (l, r) in left.data().iter().zip(right.data()) {
                assert!((l - r).abs() <= 1e-5 * norm.max(1.0));
            }
        }
    }

    #[test]
    fn resize_then_reduce_preserves_constant_exactly() {
        let t = FeatureTensor::from_vec(&[("c", 1), ("h", 3), ("w", 3)], vec![0.625; 9]).unwrap();
        let r = resize_bilinear(&t, 7, 5).unwrap();
        let m = reduce_mean(&reduce_mean(&r, "h").unwrap(), "w").unwrap();
        assert_eq!(m.data(), &[0.625]);
    }

    #[test]
    fn bilinear_sample_is_lipschitz_on_random_fields() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f32> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = FeatureTensor::from_vec(&[("c", 1), ("h", 8), ("w", 8)], data).unwrap();
        // Max finite-difference between neighbors bounds the local slope.
        let mut max_fd = 0.0f64;
        for y in 0..8 {
            for x in 0..8 {
                let v = t.at(&[0, y, x]) as f64;
                if y + 1 < 8 {
                    max_fd = max_fd.max((t.at(&[0, y + 1, x]) as f64 - v).abs());
                }
                if x + 1 < 8 {
                    max_fd = max_fd.max((t.at(&[0, y, x + 1]) as f64 - v).abs());
                }
            }
        }
        for _ in 0..200 {
            let y = rng.gen_range(0.0..7.0);
            let x = rng.gen_range(0.0..7.0);
            let eps = 1e-3;
            let v0 = bilinear_sample(&t, y, x).unwrap()[0] as f64;
            let v1 = bilinear_sample(&t, (y + eps).min(7.0), x).unwrap()[0] as f64;
            let v2 = bilinear_sample(&t, y, (x + eps).min(7.0)).unwrap()[0] as f64;
            // Two axes can each contribute at most max_fd per unit step.
            assert!((v1 - v0).abs() <= 2.0 * max_fd * eps + 1e-9);
            assert!((v2 - v0).abs() <= 2.0 * max_fd * eps + 1e-9);
        }
    }
}
