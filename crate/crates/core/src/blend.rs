//! Feature blending: per-channel 1x1 mixing of part and global frequency
//! features, a halving bottleneck whose second layer starts at zero, and
//! residual injection into a frozen stack of strided 3D stages.
//!
//! The zero initialization makes a freshly built blender a no-op: until the
//! bottleneck's second layer moves away from zero, the context path is
//! bit-identical to a pipeline with blending disabled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::stacks::{relu, relu_backward, Conv3d, TOY_CHANNELS};
use crate::tensor::{resize_bilinear, resize_bilinear_adjoint, FeatureTensor};

/// Learned per-pixel channel mix (a 1x1 convolution).
#[derive(Debug, Clone)]
pub struct OneByOneMix {
    /// `cout x cin`.
    pub weight: FeatureTensor,
    pub bias: Vec<f32>,
}

impl OneByOneMix {
    pub fn seeded(rng: &mut ChaCha8Rng, cout: usize, cin: usize) -> Self {
        let std = (2.0 / cin as f64).sqrt();
        let data: Vec<f32> = (0..cout * cin)
            .map(|_| (rng.gen_range(-1.0f64..1.0) * std) as f32)
            .collect();
        Self {
            weight: FeatureTensor::from_parts(
                vec![("out".to_string(), cout), ("in".to_string(), cin)],
                data,
            ),
            bias: vec![0.0; cout],
        }
    }

    pub fn zeros(cout: usize, cin: usize) -> Self {
        Self {
            weight: FeatureTensor::zeros(&[("out", cout), ("in", cin)]),
            bias: vec![0.0; cout],
        }
    }

    pub fn cout(&self) -> usize {
        self.weight.extent(0)
    }

    pub fn cin(&self) -> usize {
        self.weight.extent(1)
    }

    /// Applies the mix to a `C x H x W` tensor.
    pub fn forward(&self, x: &FeatureTensor) -> Result<FeatureTensor> {
        if x.rank() != 3 || x.extent(0) != self.cin() {
            return Err(Error::Shape(format!(
                "1x1 mix expects {} channels, got {:?}",
                self.cin(),
                x.shape()
            )));
        }
        let (cin, h, w) = (x.extent(0), x.extent(1), x.extent(2));
        let cout = self.cout();
        let plane = h * w;
        let src = x.data();
        let wt = self.weight.data();
        let mut out = vec![0.0f32; cout * plane];
        for co in 0..cout {
            let orow = &mut out[co * plane..(co + 1) * plane];
            orow.fill(self.bias[co]);
            for ci in 0..cin {
                let wv = wt[co * cin + ci];
                if wv == 0.0 {
                    continue;
                }
                let irow = &src[ci * plane..(ci + 1) * plane];
                for (o, &v) in orow.iter_mut().zip(irow) {
                    *o += wv * v;
                }
            }
        }
        Ok(FeatureTensor::from_parts(
            vec![
                ("channel".to_string(), cout),
                x.dims()[1].clone(),
                x.dims()[2].clone(),
            ],
            out,
        ))
    }

    /// Backward pass. Returns (dWeight, dBias, dInput).
    pub fn backward(
        &self,
        x: &FeatureTensor,
        grad_out: &FeatureTensor,
    ) -> (Vec<f32>, Vec<f32>, FeatureTensor) {
        let (cin, h, w) = (x.extent(0), x.extent(1), x.extent(2));
        let cout = self.cout();
        let plane = h * w;
        let g = grad_out.data();
        let src = x.data();
        let wt = self.weight.data();
        let mut dw = vec![0.0f32; cout * cin];
        let mut db = vec![0.0f32; cout];
        let mut dx = vec![0.0f32; cin * plane];
        for co in 0..cout {
            let grow = &g[co * plane..(co + 1) * plane];
            db[co] = grow.iter().map(|&v| v as f64).sum::<f64>() as f32;
            for ci in 0..cin {
                let irow = &src[ci * plane..(ci + 1) * plane];
                let mut acc = 0.0f64;
                for (gv, iv) in grow.iter().zip(irow) {
                    acc += *gv as f64 * *iv as f64;
                }
                dw[co * cin + ci] = acc as f32;
                let wv = wt[co * cin + ci];
                if wv != 0.0 {
                    let dxrow = &mut dx[ci * plane..(ci + 1) * plane];
                    for (d, gv) in dxrow.iter_mut().zip(grow) {
                        *d += wv * gv;
                    }
                }
            }
        }
        (
            dw,
            db,
            FeatureTensor::from_parts(x.dims().to_vec(), dx),
        )
    }
}

/// Two-layer 1x1 bottleneck: channels halved, rectified, then restored by a
/// second layer whose weights and bias start at zero.
#[derive(Debug, Clone)]
pub struct BottleneckMix {
    pub first: OneByOneMix,
    pub second: OneByOneMix,
}

impl BottleneckMix {
    pub fn seeded(rng: &mut ChaCha8Rng, channels: usize) -> Self {
        let mid = (channels / 2).max(1);
        Self {
            first: OneByOneMix::seeded(rng, mid, channels),
            second: OneByOneMix::zeros(channels, mid),
        }
    }

    pub fn forward(&self, x: &FeatureTensor) -> Result<(FeatureTensor, FeatureTensor)> {
        let mut mid = self.first.forward(x)?;
        relu(&mut mid);
        let out = self.second.forward(&mid)?;
        Ok((out, mid))
    }
}

/// How frequency features enter the context stack at each tap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlendMode {
    /// Per-source 1x1 mixes plus the zero-initialized bottleneck.
    Conv1x1,
    /// Plain sum of the resized features, no learned mixing.
    Add,
    /// Channel concatenation followed by a single zero-initialized 1x1.
    Concat,
    /// No injection: the context path runs pure.
    None,
    /// Bottleneck depth doubled (two stacked bottlenecks).
    Conv1x1X2,
}

impl BlendMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "conv1x1" => Ok(Self::Conv1x1),
            "add" => Ok(Self::Add),
            "concat" => Ok(Self::Concat),
            "none" => Ok(Self::None),
            "conv1x1x2" => Ok(Self::Conv1x1X2),
            other => Err(Error::Config(format!(
                "unknown blend mode {other:?} (conv1x1|add|concat|none|conv1x1x2)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Conv1x1 => "conv1x1",
            Self::Add => "add",
            Self::Concat => "concat",
            Self::None => "none",
            Self::Conv1x1X2 => "conv1x1x2",
        }
    }
}

/// Learned parameters of one blend tap (one per context stage boundary).
#[derive(Debug, Clone)]
pub struct BlendTap {
    pub mode: BlendMode,
    /// Mix for the global features (Conv1x1 modes).
    pub conv0: Option<OneByOneMix>,
    /// One mix per part (Conv1x1 modes).
    pub convp: Vec<OneByOneMix>,
    /// Bottlenecks applied to the summed mix (1 or 2 of them).
    pub bottleneck: Vec<BottleneckMix>,
    /// Concat mode: single zero-initialized mix over stacked channels.
    pub concat_mix: Option<OneByOneMix>,
}

impl BlendTap {
    pub fn seeded(rng: &mut ChaCha8Rng, mode: BlendMode, channels: usize, parts: usize) -> Self {
        match mode {
            BlendMode::Conv1x1 | BlendMode::Conv1x1X2 => {
                let conv0 = Some(OneByOneMix::seeded(rng, channels, channels));
                let convp = (0..parts)
                    .map(|_| OneByOneMix::seeded(rng, channels, channels))
                    .collect();
                let depth = if mode == BlendMode::Conv1x1X2 { 2 } else { 1 };
                let bottleneck = (0..depth)
                    .map(|_| BottleneckMix::seeded(rng, channels))
                    .collect();
                Self {
                    mode,
                    conv0,
                    convp,
                    bottleneck,
                    concat_mix: None,
                }
            }
            BlendMode::Concat => Self {
                mode,
                conv0: None,
                convp: Vec::new(),
                bottleneck: Vec::new(),
                concat_mix: Some(OneByOneMix::zeros(channels, channels * (parts + 1))),
            },
            BlendMode::Add | BlendMode::None => Self {
                mode,
                conv0: None,
                convp: Vec::new(),
                bottleneck: Vec::new(),
                concat_mix: None,
            },
        }
    }
}

/// Forward record of one tap's mixing, kept for the backward pass.
pub struct BlendTapTrace {
    pub output: FeatureTensor,
    /// Part features after spatial resizing to the global geometry.
    pub resized: Vec<FeatureTensor>,
    /// Original part feature spatial dims.
    pub part_dims: Vec<(usize, usize)>,
    /// Conv1x1 modes: input to each bottleneck and its rectified mid.
    pub inner: Vec<FeatureTensor>,
    pub mids: Vec<FeatureTensor>,
    /// Concat mode: the stacked input.
    pub stacked: Option<FeatureTensor>,
}

/// Mixes global and part frequency features at one tap. Part features are
/// resized to the global spatial geometry before mixing; an empty part list
/// degenerates to mixing the global features alone.
pub fn mix_frequency_features(
    z0: &FeatureTensor,
    zps: &[&FeatureTensor],
    tap: &BlendTap,
) -> Result<BlendTapTrace> {
    let (c, h, w) = (z0.extent(0), z0.extent(1), z0.extent(2));
    let mut resized = Vec::with_capacity(zps.len());
    let mut part_dims = Vec::with_capacity(zps.len());
    for zp in zps {
        if zp.extent(0) != c {
            return Err(Error::Shape(format!(
                "part features have {} channels, global {}",
                zp.extent(0),
                c
            )));
        }
        part_dims.push((zp.extent(1), zp.extent(2)));
        resized.push(resize_bilinear(zp, h, w)?);
    }
    match tap.mode {
        BlendMode::None => Ok(BlendTapTrace {
            output: FeatureTensor::zeros(&[("channel", c), ("height", h), ("width", w)]),
            resized,
            part_dims,
            inner: Vec::new(),
            mids: Vec::new(),
            stacked: None,
        }),
        BlendMode::Add => {
            let mut out = z0.clone();
            for r in &resized {
                for (o, &v) in out.data_mut().iter_mut().zip(r.data()) {
                    *o += v;
                }
            }
            Ok(BlendTapTrace {
                output: out,
                resized,
                part_dims,
                inner: Vec::new(),
                mids: Vec::new(),
                stacked: None,
            })
        }
        BlendMode::Concat => {
            let mix = tap.concat_mix.as_ref().expect("concat mix present");
            let mut stacked_data = Vec::with_capacity((zps.len() + 1) * c * h * w);
            stacked_data.extend_from_slice(z0.data());
            for r in &resized {
                stacked_data.extend_from_slice(r.data());
            }
            let stacked = FeatureTensor::from_parts(
                vec![
                    ("channel".to_string(), c * (zps.len() + 1)),
                    ("height".to_string(), h),
                    ("width".to_string(), w),
                ],
                stacked_data,
            );
            if stacked.extent(0) != mix.cin() {
                return Err(Error::Shape(format!(
                    "concat mix expects {} channels, got {} (part count changed?)",
                    mix.cin(),
                    stacked.extent(0)
                )));
            }
            let output = mix.forward(&stacked)?;
            Ok(BlendTapTrace {
                output,
                resized,
                part_dims,
                inner: Vec::new(),
                mids: Vec::new(),
                stacked: Some(stacked),
            })
        }
        BlendMode::Conv1x1 | BlendMode::Conv1x1X2 => {
            let conv0 = tap.conv0.as_ref().expect("conv0 present");
            if resized.len() > tap.convp.len() {
                return Err(Error::Shape(format!(
                    "{} parts but only {} part mixes",
                    resized.len(),
                    tap.convp.len()
                )));
            }
            let mut sum = conv0.forward(z0)?;
            for (r, convp) in resized.iter().zip(&tap.convp) {
                let m = convp.forward(r)?;
                for (o, &v) in sum.data_mut().iter_mut().zip(m.data()) {
                    *o += v;
                }
            }
            let mut inner = Vec::new();
            let mut mids = Vec::new();
            let mut x = sum;
            for bn in &tap.bottleneck {
                inner.push(x.clone());
                let (out, mid) = bn.forward(&x)?;
                mids.push(mid);
                x = out;
            }
            Ok(BlendTapTrace {
                output: x,
                resized,
                part_dims,
                inner,
                mids,
                stacked: None,
            })
        }
    }
}

/// Parameter gradients of one tap plus the gradients flowing back into each
/// part's stage features (at their original spatial size).
pub struct BlendTapGrads {
    pub conv0_w: Vec<f32>,
    pub conv0_b: Vec<f32>,
    pub convp_w: Vec<Vec<f32>>,
    pub convp_b: Vec<Vec<f32>>,
    pub bottleneck_w: Vec<(Vec<f32>, Vec<f32>)>,
    pub bottleneck_b: Vec<(Vec<f32>, Vec<f32>)>,
    pub concat_w: Vec<f32>,
    pub concat_b: Vec<f32>,
    pub d_parts: Vec<FeatureTensor>,
}

/// Backward through one tap's mixing. `z0` is treated as a dead end (its
/// stack is frozen with nothing trainable upstream).
pub fn mix_frequency_features_backward(
    tap: &BlendTap,
    z0: &FeatureTensor,
    trace: &BlendTapTrace,
    grad_out: &FeatureTensor,
) -> Result<BlendTapGrads> {
    let mut grads = BlendTapGrads {
        conv0_w: Vec::new(),
        conv0_b: Vec::new(),
        convp_w: Vec::new(),
        convp_b: Vec::new(),
        bottleneck_w: Vec::new(),
        bottleneck_b: Vec::new(),
        concat_w: Vec::new(),
        concat_b: Vec::new(),
        d_parts: Vec::new(),
    };
    match tap.mode {
        BlendMode::None => {
            for &(ph, pw) in &trace.part_dims {
                grads
                    .d_parts
                    .push(FeatureTensor::zeros(&[("channel", z0.extent(0)), ("height", ph), ("width", pw)]));
            }
        }
        BlendMode::Add => {
            for (r, &(ph, pw)) in trace.resized.iter().zip(&trace.part_dims) {
                let _ = r;
                grads
                    .d_parts
                    .push(resize_bilinear_adjoint(grad_out, ph, pw)?);
            }
        }
        BlendMode::Concat => {
            let mix = tap.concat_mix.as_ref().expect("concat mix present");
            let stacked = trace.stacked.as_ref().expect("concat trace");
            let (dw, db, dstacked) = mix.backward(stacked, grad_out);
            grads.concat_w = dw;
            grads.concat_b = db;
            let c = z0.extent(0);
            let plane = z0.extent(1) * z0.extent(2);
            for (pi, &(ph, pw)) in trace.part_dims.iter().enumerate() {
                let lo = (pi + 1) * c * plane;
                let slice = FeatureTensor::from_parts(
                    vec![
                        ("channel".to_string(), c),
                        z0.dims()[1].clone(),
                        z0.dims()[2].clone(),
                    ],
                    dstacked.data()[lo..lo + c * plane].to_vec(),
                );
                grads.d_parts.push(resize_bilinear_adjoint(&slice, ph, pw)?);
            }
        }
        BlendMode::Conv1x1 | BlendMode::Conv1x1X2 => {
            let conv0 = tap.conv0.as_ref().expect("conv0 present");
            // Back through the bottleneck chain.
            let mut g = grad_out.clone();
            for (i, bn) in tap.bottleneck.iter().enumerate().rev() {
                let mid = &trace.mids[i];
                let inner = &trace.inner[i];
                let (dw2, db2, mut dmid) = bn.second.backward(mid, &g);
                relu_backward(&mut dmid, mid);
                let (dw1, db1, dinner) = bn.first.backward(inner, &dmid);
                grads.bottleneck_w.insert(0, (dw1, dw2));
                grads.bottleneck_b.insert(0, (db1, db2));
                g = dinner;
            }
            // g is now the gradient of the pre-bottleneck sum.
            let (dw0, db0, _) = conv0.backward(z0, &g);
            grads.conv0_w = dw0;
            grads.conv0_b = db0;
            for ((r, convp), &(ph, pw)) in trace
                .resized
                .iter()
                .zip(&tap.convp)
                .zip(&trace.part_dims)
            {
                let (dw, db, dr) = convp.backward(r, &g);
                grads.convp_w.push(dw);
                grads.convp_b.push(db);
                grads.d_parts.push(resize_bilinear_adjoint(&dr, ph, pw)?);
            }
        }
    }
    Ok(grads)
}

/// Broadcasts a `C x H x W` tensor across the time axis of a `C x T x H x W`
/// tensor, adds, and applies the given (frozen) stage function.
pub fn residual_blend<F>(
    z_tilde: &FeatureTensor,
    zplus: &FeatureTensor,
    stage: F,
) -> Result<FeatureTensor>
where
    F: FnOnce(&FeatureTensor) -> Result<FeatureTensor>,
{
    stage(&broadcast_add_time(z_tilde, zplus)?)
}

/// The broadcast-add half of [`residual_blend`], exposed for the blend loop.
pub fn broadcast_add_time(
    z_tilde: &FeatureTensor,
    zplus: &FeatureTensor,
) -> Result<FeatureTensor> {
    if zplus.rank() != 4 || z_tilde.rank() != 3 {
        return Err(Error::Shape(
            "broadcast add needs C x T x H x W and C x H x W".into(),
        ));
    }
    let (c, t, h, w) = (
        zplus.extent(0),
        zplus.extent(1),
        zplus.extent(2),
        zplus.extent(3),
    );
    if z_tilde.extent(0) != c || z_tilde.extent(1) != h || z_tilde.extent(2) != w {
        return Err(Error::Shape(format!(
            "cannot broadcast {:?} over {:?}",
            z_tilde.shape(),
            zplus.shape()
        )));
    }
    let plane = h * w;
    let mut out = zplus.data().to_vec();
    for ch in 0..c {
        let zrow = &z_tilde.data()[ch * plane..(ch + 1) * plane];
        for ti in 0..t {
            let orow = &mut out[(ch * t + ti) * plane..][..plane];
            for (o, &v) in orow.iter_mut().zip(zrow) {
                *o += v;
            }
        }
    }
    Ok(FeatureTensor::from_parts(zplus.dims().to_vec(), out))
}

/// Sums a `C x T x H x W` gradient over time, the adjoint of the broadcast.
pub fn broadcast_add_time_adjoint(grad: &FeatureTensor) -> FeatureTensor {
    let (c, t, h, w) = (
        grad.extent(0),
        grad.extent(1),
        grad.extent(2),
        grad.extent(3),
    );
    let plane = h * w;
    let mut out = vec![0.0f32; c * plane];
    for ch in 0..c {
        let orow = &mut out[ch * plane..(ch + 1) * plane];
        for ti in 0..t {
            let grow = &grad.data()[(ch * t + ti) * plane..][..plane];
            for (o, &g) in orow.iter_mut().zip(grow) {
                *o += g;
            }
        }
    }
    FeatureTensor::from_parts(
        vec![
            grad.dims()[0].clone(),
            grad.dims()[2].clone(),
            grad.dims()[3].clone(),
        ],
        out,
    )
}

/// Spatial/temporal geometry profile of the context stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeProfile {
    Toy,
    PaperShape,
}

impl ShapeProfile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Self::Toy),
            "paper-shape" => Ok(Self::PaperShape),
            other => Err(Error::Config(format!(
                "unknown shape profile {other:?} (toy|paper-shape)"
            ))),
        }
    }

    pub fn channels(&self) -> Vec<usize> {
        match self {
            Self::Toy => TOY_CHANNELS.to_vec(),
            Self::PaperShape => vec![64, 256, 512, 1024, 1024],
        }
    }

    /// (stride_t, stride_s) per stage.
    pub fn strides(&self) -> Vec<(usize, usize)> {
        match self {
            Self::Toy => vec![(2, 2), (2, 2), (1, 2), (2, 2), (1, 2)],
            Self::PaperShape => vec![(2, 2), (1, 2), (1, 2), (1, 2), (1, 1)],
        }
    }
}

/// Frozen stack of 3D conv + ReLU stages fed by the raw clip. Stage 0 is the
/// initial convolution; stages 1..=4 are the blocks the blender taps wrap.
#[derive(Debug, Clone)]
pub struct ContextStack {
    pub convs: Vec<Conv3d>,
}

impl ContextStack {
    pub fn seeded(seed: u64, profile: ShapeProfile) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let channels = profile.channels();
        let strides = profile.strides();
        let mut convs = Vec::with_capacity(channels.len());
        let mut cin = 1;
        for (&cout, &(st, ss)) in channels.iter().zip(&strides) {
            convs.push(Conv3d::seeded(&mut rng, cout, cin, 3, st, ss, 1));
            cin = cout;
        }
        Self { convs }
    }

    pub fn stages(&self) -> usize {
        self.convs.len()
    }

    /// Per-stage output shapes, `(channel, time, height, width)`, computed
    /// without running the convolutions.
    pub fn output_shapes(&self, t: usize, h: usize, w: usize) -> Vec<(usize, usize, usize, usize)> {
        let mut shapes = Vec::with_capacity(self.convs.len());
        let (mut t, mut h, mut w) = (t, h, w);
        for conv in &self.convs {
            let (c, ot, oh, ow) = conv.out_shape(t, h, w);
            shapes.push((c, ot, oh, ow));
            t = ot;
            h = oh;
            w = ow;
        }
        shapes
    }

    /// Stage 0 on the raw `time x height x width` clip.
    pub fn forward_initial(&self, clip: &FeatureTensor) -> Result<FeatureTensor> {
        let x = FeatureTensor::from_parts(
            vec![
                ("channel".to_string(), 1),
                clip.dims()[0].clone(),
                clip.dims()[1].clone(),
                clip.dims()[2].clone(),
            ],
            clip.data().to_vec(),
        );
        let mut y = self.convs[0].forward(&x)?;
        relu(&mut y);
        Ok(y)
    }

    /// Stage `i` (1..=4) on a blended input.
    pub fn forward_stage(&self, i: usize, x: &FeatureTensor) -> Result<FeatureTensor> {
        let mut y = self.convs[i].forward(x)?;
        relu(&mut y);
        Ok(y)
    }

    /// Input gradient of stage `i` given its post-activation output.
    pub fn backward_stage_input(
        &self,
        i: usize,
        mut grad_out: FeatureTensor,
        stage_out: &FeatureTensor,
        in_shape: (usize, usize, usize),
    ) -> FeatureTensor {
        relu_backward(&mut grad_out, stage_out);
        self.convs[i].backward_input(&grad_out, in_shape.0, in_shape.1, in_shape.2)
    }

    /// Raw little-endian bytes of all weights, for freeze checks.
    pub fn weights_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for c in &self.convs {
            for v in &c.weight {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}
