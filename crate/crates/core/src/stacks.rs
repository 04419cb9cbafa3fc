//! Fixed-random convolutional feature stacks.
//!
//! Both the 2D stack that reads frequency volumes and the 3D stages of the
//! context stack are frozen: their weights are seeded at construction and
//! never trained, so only input gradients are ever needed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::FeatureTensor;

pub(crate) fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

fn seeded_weights(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| (rng.gen_range(-1.0f64..1.0) * std * 1.732) as f32)
        .collect()
}

/// 2D convolution with square kernel, fixed weights, no bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Vec<f32>,
    pub cout: usize,
    pub cin: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn seeded(
        rng: &mut ChaCha8Rng,
        cout: usize,
        cin: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let weight = seeded_weights(rng, cout * cin * k * k, cin * k * k);
        Self {
            weight,
            cout,
            cin,
            k,
            stride,
            pad,
        }
    }

    pub fn out_shape(&self, h: usize, w: usize) -> (usize, usize, usize) {
        (
            self.cout,
            conv_out_dim(h, self.k, self.stride, self.pad),
            conv_out_dim(w, self.k, self.stride, self.pad),
        )
    }

    pub fn forward(&self, x: &FeatureTensor) -> Result<FeatureTensor> {
        if x.rank() != 3 || x.extent(0) != self.cin {
            return Err(Error::Shape(format!(
                "conv2d expects {} input channels, got shape {:?}",
                self.cin,
                x.shape()
            )));
        }
        let (h, w) = (x.extent(1), x.extent(2));
        let (cout, oh, ow) = self.out_shape(h, w);
        let src = x.data();
        let mut out = vec![0.0f32; cout * oh * ow];
        for co in 0..cout {
            let oplane = &mut out[co * oh * ow..(co + 1) * oh * ow];
            for ci in 0..self.cin {
                let iplane = &src[ci * h * w..(ci + 1) * h * w];
                let wbase = (co * self.cin + ci) * self.k * self.k;
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        let wv = self.weight[wbase + ky * self.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let irow = &iplane[iy as usize * w..(iy as usize + 1) * w];
                            let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                            for (ox, o) in orow.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                *o += wv * irow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        Ok(FeatureTensor::from_parts(
            vec![
                ("channel".to_string(), cout),
                ("height".to_string(), oh),
                ("width".to_string(), ow),
            ],
            out,
        ))
    }

    /// Gradient with respect to the input given dL/d output.
    pub fn backward_input(
        &self,
        grad_out: &FeatureTensor,
        in_h: usize,
        in_w: usize,
    ) -> FeatureTensor {
        let (oh, ow) = (grad_out.extent(1), grad_out.extent(2));
        let g = grad_out.data();
        let mut din = vec![0.0f32; self.cin * in_h * in_w];
        for co in 0..self.cout {
            let gplane = &g[co * oh * ow..(co + 1) * oh * ow];
            for ci in 0..self.cin {
                let dplane = &mut din[ci * in_h * in_w..(ci + 1) * in_h * in_w];
                let wbase = (co * self.cin + ci) * self.k * self.k;
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        let wv = self.weight[wbase + ky * self.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= in_h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= in_w as isize {
                                    continue;
                                }
                                dplane[iy as usize * in_w + ix as usize] +=
                                    wv * gplane[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        FeatureTensor::from_parts(
            vec![
                ("channel".to_string(), self.cin),
                ("height".to_string(), in_h),
                ("width".to_string(), in_w),
            ],
            din,
        )
    }
}

/// 3D convolution over (time, height, width), fixed weights, no bias.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub weight: Vec<f32>,
    pub cout: usize,
    pub cin: usize,
    pub k: usize,
    pub stride_t: usize,
    pub stride_s: usize,
    pub pad: usize,
}

impl Conv3d {
    pub fn seeded(
        rng: &mut ChaCha8Rng,
        cout: usize,
        cin: usize,
        k: usize,
        stride_t: usize,
        stride_s: usize,
        pad: usize,
    ) -> Self {
        let weight = seeded_weights(rng, cout * cin * k * k * k, cin * k * k * k);
        Self {
            weight,
            cout,
            cin,
            k,
            stride_t,
            stride_s,
            pad,
        }
    }

    pub fn out_shape(&self, t: usize, h: usize, w: usize) -> (usize, usize, usize, usize) {
        (
            self.cout,
            conv_out_dim(t, self.k, self.stride_t, self.pad),
            conv_out_dim(h, self.k, self.stride_s, self.pad),
            conv_out_dim(w, self.k, self.stride_s, self.pad),
        )
    }

    pub fn forward(&self, x: &FeatureTensor) -> Result<FeatureTensor> {
        if x.rank() != 4 || x.extent(0) != self.cin {
            return Err(Error::Shape(format!(
                "conv3d expects {} input channels, got shape {:?}",
                self.cin,
                x.shape()
            )));
        }
        let (t, h, w) = (x.extent(1), x.extent(2), x.extent(3));
        let (cout, ot, oh, ow) = self.out_shape(t, h, w);
        let src = x.data();
        let mut out = vec![0.0f32; cout * ot * oh * ow];
        let k = self.k;
        for co in 0..cout {
            let ovol = &mut out[co * ot * oh * ow..(co + 1) * ot * oh * ow];
            for ci in 0..self.cin {
                let ivol = &src[ci * t * h * w..(ci + 1) * t * h * w];
                let wbase = (co * self.cin + ci) * k * k * k;
                for kt in 0..k {
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = self.weight[wbase + (kt * k + ky) * k + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            for oti in 0..ot {
                                let it = (oti * self.stride_t + kt) as isize - self.pad as isize;
                                if it < 0 || it >= t as isize {
                                    continue;
                                }
                                for oy in 0..oh {
                                    let iy =
                                        (oy * self.stride_s + ky) as isize - self.pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let irow = &ivol
                                        [(it as usize * h + iy as usize) * w..][..w];
                                    let orow =
                                        &mut ovol[(oti * oh + oy) * ow..][..ow];
                                    for (ox, o) in orow.iter_mut().enumerate() {
                                        let ix = (ox * self.stride_s + kx) as isize
                                            - self.pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        *o += wv * irow[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(FeatureTensor::from_parts(
            vec![
                ("channel".to_string(), cout),
                ("time".to_string(), ot),
                ("height".to_string(), oh),
                ("width".to_string(), ow),
            ],
            out,
        ))
    }

    pub fn backward_input(
        &self,
        grad_out: &FeatureTensor,
        in_t: usize,
        in_h: usize,
        in_w: usize,
    ) -> FeatureTensor {
        let (ot, oh, ow) = (grad_out.extent(1), grad_out.extent(2), grad_out.extent(3));
        let g = grad_out.data();
        let mut din = vec![0.0f32; self.cin * in_t * in_h * in_w];
        let k = self.k;
        for co in 0..self.cout {
            let gvol = &g[co * ot * oh * ow..(co + 1) * ot * oh * ow];
            for ci in 0..self.cin {
                let dvol = &mut din[ci * in_t * in_h * in_w..(ci + 1) * in_t * in_h * in_w];
                let wbase = (co * self.cin + ci) * k * k * k;
                for kt in 0..k {
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = self.weight[wbase + (kt * k + ky) * k + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            for oti in 0..ot {
                                let it = (oti * self.stride_t + kt) as isize - self.pad as isize;
                                if it < 0 || it >= in_t as isize {
                                    continue;
                                }
                                for oy in 0..oh {
                                    let iy =
                                        (oy * self.stride_s + ky) as isize - self.pad as isize;
                                    if iy < 0 || iy >= in_h as isize {
                                        continue;
                                    }
                                    for ox in 0..ow {
                                        let ix = (ox * self.stride_s + kx) as isize
                                            - self.pad as isize;
                                        if ix < 0 || ix >= in_w as isize {
                                            continue;
                                        }
                                        dvol[(it as usize * in_h + iy as usize) * in_w
                                            + ix as usize] += wv * gvol[(oti * oh + oy) * ow + ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        FeatureTensor::from_parts(
            vec![
                ("channel".to_string(), self.cin),
                ("time".to_string(), in_t),
                ("height".to_string(), in_h),
                ("width".to_string(), in_w),
            ],
            din,
        )
    }
}

pub(crate) fn relu(x: &mut FeatureTensor) {
    for v in x.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Gates a gradient by the ReLU activation pattern of the forward output.
pub(crate) fn relu_backward(grad: &mut FeatureTensor, activated: &FeatureTensor) {
    for (g, &a) in grad.data_mut().iter_mut().zip(activated.data()) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Global average pooling over all axes past the first (channel) axis.
pub fn global_avg_pool(x: &FeatureTensor) -> Vec<f32> {
    let c = x.extent(0);
    let inner = x.len() / c;
    let mut out = Vec::with_capacity(c);
    for ch in 0..c {
        let acc: f64 = x.data()[ch * inner..(ch + 1) * inner]
            .iter()
            .map(|&v| v as f64)
            .sum();
        out.push((acc / inner as f64) as f32);
    }
    out
}

/// Frozen stack of strided 2D conv + ReLU stages applied to frequency
/// volumes. Every stage output is kept: they feed the blender taps, the
/// coordinate regressor, and the pooled classifier features.
#[derive(Debug, Clone)]
pub struct FreqStack2d {
    pub convs: Vec<Conv2d>,
}

/// Default toy channel plan shared by the 2D and 3D stacks.
pub const TOY_CHANNELS: [usize; 5] = [16, 24, 32, 48, 64];

impl FreqStack2d {
    /// Seeded stack: each stage is a 2x2 average pool fused with a random
    /// 1x1 channel mix (one strided conv whose four spatial taps are equal).
    /// Two properties matter here: the non-overlapping kernels tile the grid
    /// exactly, and the uniform taps make the backward spread spatially
    /// unbiased. Random spatial taps would imprint a fixed directional
    /// pattern on every input gradient, which the center-update rule would
    /// chase. The first stage's weights absorb `input_gain`, standardizing
    /// feature magnitudes for inputs whose typical scale is `1 / input_gain`
    /// (raw residual spectra are sparse and small).
    pub fn seeded(seed: u64, in_channels: usize, channels: &[usize], input_gain: f32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::with_capacity(channels.len());
        let mut cin = in_channels;
        for (i, &cout) in channels.iter().enumerate() {
            let mut conv = Conv2d::seeded(&mut rng, cout, cin, 2, 2, 0);
            // Equal taps: mix / 2 per position (the 1/2 offsets the variance
            // loss from averaging four cells).
            for mix in conv.weight.chunks_exact_mut(4) {
                let m = mix[0] / 2.0;
                mix.fill(m);
            }
            if i == 0 {
                for w in conv.weight.iter_mut() {
                    *w *= input_gain;
                }
            }
            convs.push(conv);
            cin = cout;
        }
        Self { convs }
    }

    pub fn stages(&self) -> usize {
        self.convs.len()
    }

    /// Runs all stages, returning every post-activation output.
    pub fn forward(&self, volume: &FeatureTensor) -> Result<Vec<FeatureTensor>> {
        let mut outs = Vec::with_capacity(self.convs.len());
        let mut x = volume.clone();
        for conv in &self.convs {
            let mut y = conv.forward(&x)?;
            relu(&mut y);
            outs.push(y.clone());
            x = y;
        }
        Ok(outs)
    }

    /// Propagates per-stage output gradients back to the input volume.
    /// `stage_grads[i]` is dL/d stage-i output (post-activation) or `None`.
    pub fn backward_input(
        &self,
        input: &FeatureTensor,
        stages: &[FeatureTensor],
        stage_grads: &[Option<FeatureTensor>],
    ) -> Result<FeatureTensor> {
        assert_eq!(stages.len(), self.convs.len());
        assert_eq!(stage_grads.len(), self.convs.len());
        let mut grad: Option<FeatureTensor> = None;
        for i in (0..self.convs.len()).rev() {
            let mut g = match (grad.take(), &stage_grads[i]) {
                (Some(mut g), Some(extra)) => {
                    for (a, &b) in g.data_mut().iter_mut().zip(extra.data()) {
                        *a += b;
                    }
                    g
                }
                (Some(g), None) => g,
                (None, Some(extra)) => extra.clone(),
                (None, None) => continue,
            };
            relu_backward(&mut g, &stages[i]);
            let (in_h, in_w) = if i == 0 {
                (input.extent(1), input.extent(2))
            } else {
                (stages[i - 1].extent(1), stages[i - 1].extent(2))
            };
            grad = Some(self.convs[i].backward_input(&g, in_h, in_w));
        }
        Ok(grad.unwrap_or_else(|| {
            FeatureTensor::zeros(&[
                ("channel", input.extent(0)),
                ("height", input.extent(1)),
                ("width", input.extent(2)),
            ])
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor3(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureTensor {
        let data: Vec<f32> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureTensor::from_parts(
            vec![
                ("channel".to_string(), c),
                ("height".to_string(), h),
                ("width".to_string(), w),
            ],
            data,
        )
    }

    #[test]
    fn conv2d_shapes_halve_with_stride_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::seeded(&mut rng, 8, 4, 3, 2, 1);
        let x = rand_tensor3(&mut rng, 4, 16, 16);
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.shape(), vec![8, 8, 8]);
    }

    #[test]
    fn conv2d_backward_is_true_adjoint() {
        // <conv(x), g> must equal <x, conv_backward(g)> for a linear map.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::seeded(&mut rng, 3, 2, 3, 2, 1);
        let x = rand_tensor3(&mut rng, 2, 9, 7);
        let y = conv.forward(&x).unwrap();
        let g = rand_tensor3(&mut rng, 3, y.extent(1), y.extent(2));
        let lhs: f64 = y
            .data()
            .iter()
            .zip(g.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let gx = conv.backward_input(&g, 9, 7);
        let rhs: f64 = x
            .data()
            .iter()
            .zip(gx.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0));
    }

    #[test]
    fn conv3d_backward_is_true_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv3d::seeded(&mut rng, 3, 2, 3, 2, 2, 1);
        let data: Vec<f32> = (0..2 * 6 * 8 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = FeatureTensor::from_parts(
            vec![
                ("channel".to_string(), 2),
                ("time".to_string(), 6),
                ("height".to_string(), 8),
                ("width".to_string(), 8),
            ],
            data,
        );
        let y = conv.forward(&x).unwrap();
        let gdata: Vec<f32> = (0..y.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = FeatureTensor::from_parts(y.dims().to_vec(), gdata);
        let lhs: f64 = y
            .data()
            .iter()
            .zip(g.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let gx = conv.backward_input(&g, 6, 8, 8);
        let rhs: f64 = x
            .data()
            .iter()
            .zip(gx.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0));
    }

    #[test]
    fn freq_stack_shapes_and_determinism() {
        let stack = FreqStack2d::seeded(7, 16, &TOY_CHANNELS, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor3(&mut rng, 16, 64, 64);
        let outs = stack.forward(&x).unwrap();
        assert_eq!(outs.len(), 5);
        assert_eq!(outs[0].shape(), vec![16, 32, 32]);
        assert_eq!(outs[4].shape(), vec![64, 2, 2]);
        let again = FreqStack2d::seeded(7, 16, &TOY_CHANNELS, 1.0);
        let outs2 = again.forward(&x).unwrap();
        assert_eq!(outs[4].data(), outs2[4].data());
    }

    #[test]
    fn freq_stack_backward_matches_finite_differences() {
        let stack = FreqStack2d::seeded(11, 2, &[3, 4], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor3(&mut rng, 2, 8, 8);
        // Scalar loss: weighted sum of the last stage.
        let outs = stack.forward(&x).unwrap();
        let wts: Vec<f32> = (0..outs[1].len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g_last = FeatureTensor::from_parts(outs[1].dims().to_vec(), wts.clone());
        let gx = stack
            .backward_input(&x, &outs, &[None, Some(g_last)])
            .unwrap();
        let loss = |x: &FeatureTensor| -> f64 {
            let outs = stack.forward(x).unwrap();
            outs[1]
                .data()
                .iter()
                .zip(&wts)
                .map(|(&v, &w)| v as f64 * w as f64)
                .sum()
        };
        let h = 1e-3;
        for idx in [0usize, 17, 63, 100] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h as f64);
            let an = gx.data()[idx] as f64;
            assert!(
                (an - fd).abs() <= 1e-2 * fd.abs().max(0.1),
                "idx {idx}: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn global_avg_pool_means_channels() {
        let x = FeatureTensor::from_vec(
            &[("channel", 2), ("height", 1), ("width", 2)],
            vec![1.0, 3.0, 10.0, 30.0],
        )
        .unwrap();
        assert_eq!(global_avg_pool(&x), vec![2.0, 20.0]);
    }
}
