//! The HCN front end: front convolution, first pooling (channel-max plus
//! reversible three-way split), four diversified stems, second pooling
//! (convolution-sum fusion plus reverse merge), and gradient-sum pooling for
//! feature-level fusion.
//!
//! One input image yields four fused feature maps, one per stem — the
//! "natural augmentation" unit the fusion strategies consume.

use crate::error::{Error, Result};
use crate::init::he_normal;
use crate::tensor::ops;
use crate::tensor::tape::{GradTape, VarId};
use crate::tensor::{ConvParams, Padding, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Number of diversified stems; every `FeatureStack` carries one map per stem.
pub const STEM_COUNT: usize = 4;

/// Negative slope shared by every leaky-ReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.1;

// ── Front convolution ────────────────────────────────────────────────

/// The 7x7 stride-1 front convolution: 1 grayscale channel in, 48 feature
/// channels out, "same" padding of 3 per side. Kernel geometry is fixed.
#[derive(Debug, Clone)]
pub struct FrontConv {
    pub params: ConvParams,
}

pub const FRONT_CHANNELS: usize = 48;

impl FrontConv {
    pub fn new(params: ConvParams) -> Result<Self> {
        if params.kernel() != (7, 7) {
            return Err(Error::Contract(format!(
                "front conv kernel must be exactly 7x7, got {:?}",
                params.kernel()
            )));
        }
        if params.stride != (1, 1) {
            return Err(Error::Contract("front conv stride must be exactly 1x1".into()));
        }
        if params.cin() != 1 || params.cout() != FRONT_CHANNELS {
            return Err(Error::Contract(format!(
                "front conv must map 1 -> {FRONT_CHANNELS} channels, got {} -> {}",
                params.cin(),
                params.cout()
            )));
        }
        if params.padding != Padding::uniform(3) {
            return Err(Error::Contract("front conv padding must be 3 per side".into()));
        }
        Ok(FrontConv { params })
    }

    pub fn init(rng: &mut ChaCha8Rng) -> Self {
        let filters = he_normal(&[7, 7, 1, FRONT_CHANNELS], 49, rng);
        let bias = Tensor::zeros(&[FRONT_CHANNELS]);
        FrontConv {
            params: ConvParams::new(filters, bias, (1, 1), Padding::uniform(3))
                .expect("front conv geometry is valid"),
        }
    }
}

/// Apply the front convolution to a grayscale image whose height is
/// divisible by 3 (the caller resizes; see the data module).
pub fn front_forward(image: &Tensor, fc: &FrontConv) -> Result<Tensor> {
    let (h, _w, c) = image.hwc()?;
    if c != 1 {
        return Err(Error::Contract(format!("front conv expects grayscale input, got {c} channels")));
    }
    if h % 3 != 0 {
        return Err(Error::Contract(format!(
            "front conv input height {h} must be divisible by 3; resize first"
        )));
    }
    ops::conv2d(image, &fc.params)
}

// ── First pooling: channel-max + reversible three-way split ─────────

/// Channel-max pool the 48-channel map to a single response, then split it
/// into three contiguous horizontal strips, top to bottom. The split is
/// lossless: `merge_strips` reproduces the channel-max map bit-exactly.
pub fn pool1_split(map: &Tensor) -> Result<[Tensor; 3]> {
    let (h, _w, _c) = map.hwc()?;
    if h % 3 != 0 {
        return Err(Error::Contract(format!("pool1 split needs height divisible by 3, got {h}")));
    }
    let (single, _) = ops::channel_max(map)?;
    let strip = h / 3;
    Ok([
        ops::slice_rows(&single, 0, strip)?,
        ops::slice_rows(&single, strip, 2 * strip)?,
        ops::slice_rows(&single, 2 * strip, h)?,
    ])
}

/// Vertical re-concatenation of the three strips (the exact inverse of the
/// split half of `pool1_split`).
pub fn merge_strips(strips: &[Tensor; 3]) -> Result<Tensor> {
    ops::concat_rows(&[&strips[0], &strips[1], &strips[2]])
}

/// Center a sub-image inside a zero map of the stem's declared input size.
pub fn pad_to_stem(sub: &Tensor, target_hw: (usize, usize)) -> Result<Tensor> {
    let (h, w, _c) = sub.hwc()?;
    let (th, tw) = target_hw;
    if h > th || w > tw {
        return Err(Error::Contract(format!(
            "sub-image {h}x{w} larger than stem input {th}x{tw}"
        )));
    }
    let top = (th - h) / 2;
    let left = (tw - w) / 2;
    ops::pad_spatial(
        sub,
        Padding {
            top,
            bottom: th - h - top,
            left,
            right: tw - w - left,
        },
    )
}

// ── Convolution-sum fusion ───────────────────────────────────────────

/// Convolution-sum fusion of two same-shape maps: concatenate channel-wise,
/// reduce back to the original depth with a 1x1 convolution, then add the
/// first map. Output shape always equals input shape; all-zero parameters
/// make this the identity on `a`.
pub fn conv_sum_fuse(a: &Tensor, b: &Tensor, p: &ConvParams) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "conv_sum_fuse inputs disagree: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let f = *a.shape().last().unwrap();
    if p.kernel() != (1, 1) || p.cin() != 2 * f || p.cout() != f {
        return Err(Error::Shape(format!(
            "fusion conv must be 1x1x{}x{f}, got {:?}x{}x{}",
            2 * f,
            p.kernel(),
            p.cin(),
            p.cout()
        )));
    }
    let cat = ops::concat_channels(a, b)?;
    let reduced = ops::conv2d(&cat, p)?;
    ops::add(&reduced, a)
}

/// Second pooling: left-fold the three per-sub-image maps of one stem with
/// convolution-sum fusion into a single response, then upscale vertically by
/// 3 (nearest neighbor) to restore the pre-split aspect.
pub fn pool2_fuse_merge(stem_maps: &[Tensor], p: &ConvParams) -> Result<Tensor> {
    if stem_maps.len() != 3 {
        return Err(Error::Contract(format!(
            "pool2 expects exactly 3 per-sub-image maps, got {}",
            stem_maps.len()
        )));
    }
    let fused = conv_sum_fuse(&stem_maps[0], &stem_maps[1], p)?;
    let fused = conv_sum_fuse(&fused, &stem_maps[2], p)?;
    ops::upsample_rows(&fused, 3)
}

// ── Gradient-sum pooling (feature-level fusion) ──────────────────────

/// Per-map weights proportional to the mean forward-difference gradient
/// magnitude, normalized to sum to 1. All-constant maps fall back to
/// uniform weights.
pub fn gradient_sum_weights(maps: &[&Tensor]) -> Result<Vec<f64>> {
    let shape = maps[0].shape();
    for m in maps {
        if m.shape() != shape {
            return Err(Error::Shape("gradient_sum_pool maps must share a shape".into()));
        }
    }
    let mut mags = Vec::with_capacity(maps.len());
    for m in maps {
        let (h, w, c) = m.hwc()?;
        let mut acc = 0.0;
        for r in 0..h {
            for cc in 0..w {
                for ch in 0..c {
                    let v = m.at3(r, cc, ch);
                    let dh = if r + 1 < h { m.at3(r + 1, cc, ch) - v } else { 0.0 };
                    let dw = if cc + 1 < w { m.at3(r, cc + 1, ch) - v } else { 0.0 };
                    acc += (dh * dh + dw * dw).sqrt();
                }
            }
        }
        mags.push(acc / m.len() as f64);
    }
    let total: f64 = mags.iter().sum();
    if total == 0.0 {
        Ok(vec![1.0 / maps.len() as f64; maps.len()])
    } else {
        Ok(mags.iter().map(|&m| m / total).collect())
    }
}

/// Collapse the four per-stem maps into one by gradient-magnitude-weighted
/// summation.
pub fn gradient_sum_pool(maps: &[Tensor]) -> Result<Tensor> {
    if maps.len() != STEM_COUNT {
        return Err(Error::Contract(format!(
            "gradient_sum_pool expects {STEM_COUNT} maps, got {}",
            maps.len()
        )));
    }
    let refs: Vec<&Tensor> = maps.iter().collect();
    let weights = gradient_sum_weights(&refs)?;
    ops::weighted_sum(&refs, &weights)
}

// ── Stems ────────────────────────────────────────────────────────────

/// One layer of a stem. Convolutions use stride 1 with "same" padding and a
/// leaky-ReLU; `ResConv` keeps its channel count and adds a skip connection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum StemLayer {
    Conv { kernel: usize, out_channels: usize },
    Pool { window: usize, stride: usize },
    ResConv { kernel: usize },
}

/// Architecture of one stem: its layers and the declared output shape
/// (side x side x channels) it must produce for any padded sub-image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub stem_id: usize,
    pub layers: Vec<StemLayer>,
    pub out_shape: (usize, usize, usize),
}

impl StemSpec {
    /// The four default stems. They are pairwise architecturally distinct
    /// (kernel sizes, depth, one residual skip) to keep the extracted
    /// features diversified.
    pub fn default_four(side: usize, channels: usize) -> Vec<StemSpec> {
        use StemLayer::*;
        let out = (side, side, channels);
        vec![
            StemSpec {
                stem_id: 0,
                layers: vec![
                    Conv { kernel: 3, out_channels: 8 },
                    Pool { window: 2, stride: 2 },
                    Conv { kernel: 3, out_channels: channels },
                ],
                out_shape: out,
            },
            StemSpec {
                stem_id: 1,
                layers: vec![
                    Conv { kernel: 5, out_channels: 8 },
                    Pool { window: 2, stride: 2 },
                    Conv { kernel: 5, out_channels: 12 },
                    Conv { kernel: 1, out_channels: channels },
                ],
                out_shape: out,
            },
            StemSpec {
                stem_id: 2,
                layers: vec![
                    Conv { kernel: 7, out_channels: 8 },
                    Pool { window: 3, stride: 3 },
                    Conv { kernel: 3, out_channels: channels },
                ],
                out_shape: out,
            },
            StemSpec {
                stem_id: 3,
                layers: vec![
                    Conv { kernel: 3, out_channels: channels },
                    ResConv { kernel: 3 },
                    Pool { window: 2, stride: 2 },
                    Conv { kernel: 3, out_channels: channels },
                ],
                out_shape: out,
            },
        ]
    }

    /// Channel count after the final layer (input is a single-channel strip).
    fn final_channels(&self) -> usize {
        let mut ch = 1;
        for layer in &self.layers {
            if let StemLayer::Conv { out_channels, .. } = layer {
                ch = *out_channels;
            }
        }
        ch
    }

    /// Spatial size after the layers, starting from the stem input size.
    fn spatial_after(&self, hw: (usize, usize)) -> (usize, usize) {
        let (mut h, mut w) = hw;
        for layer in &self.layers {
            if let StemLayer::Pool { window, stride } = layer {
                h = (h - window) / stride + 1;
                w = (w - window) / stride + 1;
            }
        }
        (h, w)
    }

    pub fn validate(&self, input_hw: (usize, usize)) -> Result<()> {
        if self.final_channels() != self.out_shape.2 {
            return Err(Error::Contract(format!(
                "stem {} produces {} channels but declares {}",
                self.stem_id,
                self.final_channels(),
                self.out_shape.2
            )));
        }
        let (h, w) = self.spatial_after(input_hw);
        if h < self.out_shape.0 || w < self.out_shape.1 {
            return Err(Error::Contract(format!(
                "stem {} spatial {h}x{w} after pooling is smaller than declared output {}x{}",
                self.stem_id, self.out_shape.0, self.out_shape.1
            )));
        }
        Ok(())
    }
}

/// A stem's parameters, aligned one-to-one with its spec layers
/// (pool layers carry no parameters).
#[derive(Debug, Clone)]
pub struct Stem {
    pub spec: StemSpec,
    pub params: Vec<Option<(Tensor, Tensor)>>,
}

impl Stem {
    pub fn init(spec: StemSpec, input_hw: (usize, usize), rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate(input_hw)?;
        let mut params = Vec::with_capacity(spec.layers.len());
        let mut ch = 1usize;
        for layer in &spec.layers {
            match layer {
                StemLayer::Conv { kernel, out_channels } => {
                    let w = he_normal(&[*kernel, *kernel, ch, *out_channels], kernel * kernel * ch, rng);
                    params.push(Some((w, Tensor::zeros(&[*out_channels]))));
                    ch = *out_channels;
                }
                StemLayer::Pool { .. } => params.push(None),
                StemLayer::ResConv { kernel } => {
                    let w = he_normal(&[*kernel, *kernel, ch, ch], kernel * kernel * ch, rng);
                    params.push(Some((w, Tensor::zeros(&[ch]))));
                }
            }
        }
        Ok(Stem { spec, params })
    }

    /// Forward a (batch of) padded sub-image(s) on the tape, ending with the
    /// adaptive pool that pins the declared output shape.
    pub fn forward_on_tape(&self, tape: &mut GradTape, x: VarId, vars: &[Option<(VarId, VarId)>]) -> Result<VarId> {
        let mut cur = x;
        for (layer, lv) in self.spec.layers.iter().zip(vars) {
            match layer {
                StemLayer::Conv { kernel, .. } => {
                    let (w, b) = lv.expect("conv layer has params");
                    cur = tape.conv2d(cur, w, b, (1, 1), Padding::same(*kernel, *kernel))?;
                    cur = tape.leaky_relu(cur, LEAKY_SLOPE)?;
                }
                StemLayer::Pool { window, stride } => {
                    cur = tape.maxpool2d(cur, (*window, *window), (*stride, *stride))?;
                }
                StemLayer::ResConv { kernel } => {
                    let (w, b) = lv.expect("res conv layer has params");
                    let branch = tape.conv2d(cur, w, b, (1, 1), Padding::same(*kernel, *kernel))?;
                    let branch = tape.leaky_relu(branch, LEAKY_SLOPE)?;
                    cur = tape.add(cur, branch)?;
                }
            }
        }
        tape.adaptive_avg_pool(cur, self.spec.out_shape.0, self.spec.out_shape.1)
    }

    /// Pure forward through a throwaway tape (shares the tape code path so
    /// training and extraction are bit-identical).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = GradTape::new();
        let xv = tape.leaf(x.clone())?;
        let vars = self.bind(&mut tape)?;
        let out = self.forward_on_tape(&mut tape, xv, &vars)?;
        Ok(tape.value(out).clone())
    }

    pub fn bind(&self, tape: &mut GradTape) -> Result<Vec<Option<(VarId, VarId)>>> {
        let mut vars = Vec::with_capacity(self.params.len());
        for p in &self.params {
            match p {
                Some((w, b)) => {
                    let wv = tape.leaf(w.clone())?;
                    let bv = tape.leaf(b.clone())?;
                    vars.push(Some((wv, bv)));
                }
                None => vars.push(None),
            }
        }
        Ok(vars)
    }
}

// ── Feature stack and the assembled pipeline ─────────────────────────

/// The four per-stem fused feature maps extracted from one input image.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    pub maps: Vec<Tensor>,
    pub image_id: String,
    pub label: Option<usize>,
}

impl FeatureStack {
    fn new(maps: Vec<Tensor>, image_id: String, label: Option<usize>) -> Result<Self> {
        if maps.len() != STEM_COUNT {
            return Err(Error::Contract(format!(
                "feature stack must hold exactly {STEM_COUNT} maps, got {}",
                maps.len()
            )));
        }
        let shape = maps[0].shape().to_vec();
        if maps.iter().any(|m| m.shape() != shape) {
            return Err(Error::Contract("feature stack maps must share one shape".into()));
        }
        Ok(FeatureStack { maps, image_id, label })
    }

    /// Shape shared by the four maps.
    pub fn map_shape(&self) -> &[usize] {
        self.maps[0].shape()
    }
}

/// Trainable front end: front conv + four stems + one 1x1 fusion conv per
/// stem. The fusion convs are learned jointly with the rest of the network.
#[derive(Debug, Clone)]
pub struct FeaturePipeline {
    pub front: FrontConv,
    pub stems: Vec<Stem>,
    pub fusion: Vec<ConvParams>,
    pub image_hw: (usize, usize),
}

/// Tape handles for every pipeline parameter, in canonical order.
pub struct PipelineVars {
    pub front: (VarId, VarId),
    pub stems: Vec<Vec<Option<(VarId, VarId)>>>,
    pub fusion: Vec<(VarId, VarId)>,
}

impl FeaturePipeline {
    pub fn init(image_hw: (usize, usize), specs: Vec<StemSpec>, rng: &mut ChaCha8Rng) -> Result<Self> {
        if specs.len() != STEM_COUNT {
            return Err(Error::Contract(format!("expected {STEM_COUNT} stem specs, got {}", specs.len())));
        }
        let mut seen: Vec<&[StemLayer]> = Vec::new();
        for s in &specs {
            if seen.iter().any(|other| *other == s.layers.as_slice()) {
                return Err(Error::Contract(format!(
                    "stem {} duplicates another stem's architecture; stems must be pairwise distinct",
                    s.stem_id
                )));
            }
            seen.push(&s.layers);
        }
        let front = FrontConv::init(rng);
        let mut stems = Vec::with_capacity(STEM_COUNT);
        let mut fusion = Vec::with_capacity(STEM_COUNT);
        for spec in specs {
            let f = spec.out_shape.2;
            stems.push(Stem::init(spec, image_hw, rng)?);
            let w = he_normal(&[1, 1, 2 * f, f], 2 * f, rng);
            fusion.push(ConvParams::new(w, Tensor::zeros(&[f]), (1, 1), Padding::none())?);
        }
        Ok(FeaturePipeline {
            front,
            stems,
            fusion,
            image_hw,
        })
    }

    /// Output shape of each per-stem map: (3*side, side, channels).
    pub fn map_shape(&self) -> (usize, usize, usize) {
        let (s_h, s_w, f) = self.stems[0].spec.out_shape;
        (3 * s_h, s_w, f)
    }

    /// Named parameters in canonical order (shared by the optimizer walk,
    /// the tape binding, and the model archive).
    pub fn params_named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("front.w".to_string(), &self.front.params.filters),
            ("front.b".to_string(), &self.front.params.bias),
        ];
        for (si, stem) in self.stems.iter().enumerate() {
            for (li, p) in stem.params.iter().enumerate() {
                if let Some((w, b)) = p {
                    out.push((format!("stem{si}.layer{li}.w"), w));
                    out.push((format!("stem{si}.layer{li}.b"), b));
                }
            }
        }
        for (si, f) in self.fusion.iter().enumerate() {
            out.push((format!("fuse{si}.w"), &f.filters));
            out.push((format!("fuse{si}.b"), &f.bias));
        }
        out
    }

    /// Mutable parameters in the same canonical order as `params_named`.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.front.params.filters, &mut self.front.params.bias];
        for stem in &mut self.stems {
            for p in &mut stem.params {
                if let Some((w, b)) = p {
                    out.push(w);
                    out.push(b);
                }
            }
        }
        for f in &mut self.fusion {
            out.push(&mut f.filters);
            out.push(&mut f.bias);
        }
        out
    }

    /// Register every parameter on the tape, returning structured handles.
    /// The flat ordering matches `params_named` / `params_mut`.
    pub fn bind(&self, tape: &mut GradTape) -> Result<(PipelineVars, Vec<VarId>)> {
        let mut flat = Vec::new();
        let fw = tape.leaf(self.front.params.filters.clone())?;
        let fb = tape.leaf(self.front.params.bias.clone())?;
        flat.push(fw);
        flat.push(fb);
        let mut stems = Vec::with_capacity(self.stems.len());
        for stem in &self.stems {
            let vars = stem.bind(tape)?;
            for v in vars.iter().flatten() {
                flat.push(v.0);
                flat.push(v.1);
            }
            stems.push(vars);
        }
        let mut fusion = Vec::with_capacity(self.fusion.len());
        for f in &self.fusion {
            let wv = tape.leaf(f.filters.clone())?;
            let bv = tape.leaf(f.bias.clone())?;
            flat.push(wv);
            flat.push(bv);
            fusion.push((wv, bv));
        }
        Ok((
            PipelineVars {
                front: (fw, fb),
                stems,
                fusion,
            },
            flat,
        ))
    }

    /// Forward one (batch of) image(s) through the front end up to the fused
    /// per-stem map for a single stem.
    pub fn stem_map_on_tape(
        &self,
        tape: &mut GradTape,
        vars: &PipelineVars,
        images: VarId,
        stem_idx: usize,
    ) -> Result<VarId> {
        let shape = tape.value(images).shape().to_vec();
        let h = if shape.len() == 4 { shape[1] } else { shape[0] };
        if h % 3 != 0 {
            return Err(Error::Contract(format!(
                "pipeline input height {h} must be divisible by 3"
            )));
        }
        let (fw, fb) = vars.front;
        let front = tape.conv2d(images, fw, fb, (1, 1), Padding::uniform(3))?;
        let single = tape.channel_max(front)?;
        let strip = h / 3;
        let stem = &self.stems[stem_idx];
        let (th, tw) = self.image_hw;
        let mut maps = Vec::with_capacity(3);
        for k in 0..3 {
            let sub = tape.slice_rows(single, k * strip, (k + 1) * strip)?;
            let sub_w = if shape.len() == 4 { shape[2] } else { shape[1] };
            let top = (th - strip) / 2;
            let left = (tw - sub_w) / 2;
            let padded = tape.pad_spatial(
                sub,
                Padding {
                    top,
                    bottom: th - strip - top,
                    left,
                    right: tw - sub_w - left,
                },
            )?;
            maps.push(stem.forward_on_tape(tape, padded, &vars.stems[stem_idx])?);
        }
        let (fw, fb) = vars.fusion[stem_idx];
        let fused = self.fuse_on_tape(tape, maps[0], maps[1], fw, fb)?;
        let fused = self.fuse_on_tape(tape, fused, maps[2], fw, fb)?;
        tape.upsample_rows(fused, 3)
    }

    fn fuse_on_tape(&self, tape: &mut GradTape, a: VarId, b: VarId, fw: VarId, fb: VarId) -> Result<VarId> {
        let cat = tape.concat_channels(a, b)?;
        let reduced = tape.conv2d(cat, fw, fb, (1, 1), Padding::none())?;
        tape.add(reduced, a)
    }

    /// Extract the full feature stack (all four per-stem maps) for one image.
    pub fn extract(&self, image: &Tensor, image_id: &str, label: Option<usize>) -> Result<FeatureStack> {
        let mut tape = GradTape::new();
        let (vars, _) = self.bind(&mut tape)?;
        let img = tape.leaf(image.clone())?;
        let mut maps = Vec::with_capacity(STEM_COUNT);
        for k in 0..STEM_COUNT {
            let m = self.stem_map_on_tape(&mut tape, &vars, img, k)?;
            maps.push(tape.value(m).clone());
        }
        FeatureStack::new(maps, image_id.to_string(), label)
    }

    /// Quantize every parameter to f32 storage precision.
    pub fn quantize_f32(&mut self) {
        for p in self.params_mut() {
            p.quantize_f32();
        }
    }
}

/// Free-function form of feature extraction over explicit components.
pub fn extract_features(
    image: &Tensor,
    fc: &FrontConv,
    stems: &[Stem],
    fusion_params: &[ConvParams],
    image_id: &str,
    label: Option<usize>,
) -> Result<FeatureStack> {
    let pipeline = FeaturePipeline {
        front: fc.clone(),
        stems: stems.to_vec(),
        fusion: fusion_params.to_vec(),
        image_hw: {
            let (h, w, _) = image.hwc()?;
            (h, w)
        },
    };
    pipeline.extract(image, image_id, label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_map(h: usize, w: usize, c: usize, seed: u64) -> Tensor {
        let mut state = seed;
        let data = (0..h * w * c)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect();
        Tensor::new(vec![h, w, c], data).unwrap()
    }

    #[test]
    fn front_forward_zero_image_zero_params() {
        let mut r = rng(1);
        let mut fc = FrontConv::init(&mut r);
        fc.params.filters = Tensor::zeros(&[7, 7, 1, FRONT_CHANNELS]);
        let img = Tensor::zeros(&[12, 12, 1]);
        let out = front_forward(&img, &fc).unwrap();
        assert_eq!(out.shape(), &[12, 12, FRONT_CHANNELS]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn front_forward_impulse_response() {
        // Identity-like centered kernel: single 1.0 at the kernel center of
        // channel 0; an impulse image must reproduce the impulse in place.
        let mut filters = Tensor::zeros(&[7, 7, 1, FRONT_CHANNELS]);
        let idx = filters.idx3(3, 3, 0); // rank-4 [3,3,0,0] == idx3 on first 3 dims times cout
        let i = idx * FRONT_CHANNELS;
        filters.data_mut()[i] = 1.0;
        let fc = FrontConv::new(
            ConvParams::new(filters, Tensor::zeros(&[FRONT_CHANNELS]), (1, 1), Padding::uniform(3)).unwrap(),
        )
        .unwrap();
        let mut img = Tensor::zeros(&[6, 6, 1]);
        img.set3(2, 4, 0, 1.0);
        let out = front_forward(&img, &fc).unwrap();
        assert_eq!(out.at3(2, 4, 0), 1.0);
        let total: f64 = out.data().iter().sum();
        assert_eq!(total, 1.0);
    }

    #[test]
    fn front_forward_shape_and_height_contract() {
        let mut r = rng(2);
        let fc = FrontConv::init(&mut r);
        let img = rand_map(12, 12, 1, 3);
        assert_eq!(front_forward(&img, &fc).unwrap().shape(), &[12, 12, 48]);
        let bad = rand_map(13, 12, 1, 4);
        assert!(front_forward(&bad, &fc).is_err());
    }

    #[test]
    fn pool1_split_round_trip_and_strips() {
        let map = rand_map(9, 6, 48, 5);
        let strips = pool1_split(&map).unwrap();
        for s in &strips {
            assert_eq!(s.shape(), &[3, 6, 1]);
        }
        let (single, _) = ops::channel_max(&map).unwrap();
        assert_eq!(merge_strips(&strips).unwrap(), single);
        // Strip k holds rows [3k, 3k+3) of the channel-max map.
        for (k, s) in strips.iter().enumerate() {
            for r in 0..3 {
                for w in 0..6 {
                    assert_eq!(s.at3(r, w, 0), single.at3(3 * k + r, w, 0));
                }
            }
        }
    }

    #[test]
    fn pool1_split_h6_strip_indices() {
        let map = rand_map(6, 4, 2, 6);
        let strips = pool1_split(&map).unwrap();
        let (single, _) = ops::channel_max(&map).unwrap();
        for k in 0..3 {
            for r in 0..2 {
                for w in 0..4 {
                    assert_eq!(strips[k].at3(r, w, 0), single.at3(2 * k + r, w, 0));
                }
            }
        }
    }

    #[test]
    fn pad_to_stem_contracts() {
        let sub = rand_map(2, 2, 1, 7);
        let padded = pad_to_stem(&sub, (4, 4)).unwrap();
        assert_eq!(padded.shape(), &[4, 4, 1]);
        // Content centered at rows/cols 1..=2, zeros elsewhere; zero padding
        // conserves mass.
        assert_eq!(padded.at3(1, 1, 0), sub.at3(0, 0, 0));
        assert_eq!(padded.at3(2, 2, 0), sub.at3(1, 1, 0));
        let sum_in: f64 = sub.data().iter().sum();
        let sum_out: f64 = padded.data().iter().sum();
        assert_eq!(sum_in, sum_out);
        // Already at size: unchanged.
        assert_eq!(pad_to_stem(&sub, (2, 2)).unwrap(), sub);
        // Larger than target: error.
        assert!(pad_to_stem(&sub, (1, 2)).is_err());
    }

    #[test]
    fn conv_sum_fuse_zero_params_is_identity() {
        let a = rand_map(4, 4, 3, 8);
        let b = rand_map(4, 4, 3, 9);
        let p = ConvParams::new(Tensor::zeros(&[1, 1, 6, 3]), Tensor::zeros(&[3]), (1, 1), Padding::none()).unwrap();
        assert_eq!(conv_sum_fuse(&a, &b, &p).unwrap(), a);
    }

    #[test]
    fn conv_sum_fuse_first_half_selector_doubles() {
        // p selecting only the first F channels with unit weights: out == 2a.
        let a = rand_map(3, 3, 2, 10);
        let mut w = Tensor::zeros(&[1, 1, 4, 2]);
        // filters[0,0,ci,co]: select ci == co for ci < 2.
        w.data_mut()[0 * 2 + 0] = 1.0;
        w.data_mut()[1 * 2 + 1] = 1.0;
        let p = ConvParams::new(w, Tensor::zeros(&[2]), (1, 1), Padding::none()).unwrap();
        let out = conv_sum_fuse(&a, &a, &p).unwrap();
        for (o, i) in out.data().iter().zip(a.data()) {
            assert!((o - 2.0 * i).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_sum_fuse_scalar_hand_oracle() {
        // 2x2x1 maps with scalar weights (w1, w2) and bias c:
        // out[h,w] = w1*a + w2*b + c + a.
        let a = rand_map(2, 2, 1, 11);
        let b = rand_map(2, 2, 1, 12);
        let (w1, w2, c) = (0.7, -0.3, 0.05);
        let p = ConvParams::new(
            Tensor::new(vec![1, 1, 2, 1], vec![w1, w2]).unwrap(),
            Tensor::new(vec![1], vec![c]).unwrap(),
            (1, 1),
            Padding::none(),
        )
        .unwrap();
        let out = conv_sum_fuse(&a, &b, &p).unwrap();
        for h in 0..2 {
            for w in 0..2 {
                let expect = w1 * a.at3(h, w, 0) + w2 * b.at3(h, w, 0) + c + a.at3(h, w, 0);
                assert!((out.at3(h, w, 0) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_sum_fuse_shape_preserved() {
        let a = rand_map(5, 7, 4, 13);
        let b = rand_map(5, 7, 4, 14);
        let mut r = rng(15);
        let w = he_normal(&[1, 1, 8, 4], 8, &mut r);
        let p = ConvParams::new(w, Tensor::zeros(&[4]), (1, 1), Padding::none()).unwrap();
        assert_eq!(conv_sum_fuse(&a, &b, &p).unwrap().shape(), a.shape());
    }

    #[test]
    fn pool2_fold_matches_two_step_oracle() {
        let m: Vec<Tensor> = (0..3).map(|i| rand_map(2, 2, 1, 20 + i)).collect();
        let p = ConvParams::new(
            Tensor::new(vec![1, 1, 2, 1], vec![0.4, 0.6]).unwrap(),
            Tensor::new(vec![1], vec![0.1]).unwrap(),
            (1, 1),
            Padding::none(),
        )
        .unwrap();
        let step1 = conv_sum_fuse(&m[0], &m[1], &p).unwrap();
        let step2 = conv_sum_fuse(&step1, &m[2], &p).unwrap();
        let merged = pool2_fuse_merge(&m, &p).unwrap();
        assert_eq!(merged.shape(), &[6, 2, 1]);
        let up = ops::upsample_rows(&step2, 3).unwrap();
        assert_eq!(merged, up);
    }

    #[test]
    fn pool2_zero_params_upscales_first_map() {
        let m: Vec<Tensor> = (0..3).map(|i| rand_map(2, 2, 1, 30 + i)).collect();
        let p = ConvParams::new(Tensor::zeros(&[1, 1, 2, 1]), Tensor::zeros(&[1]), (1, 1), Padding::none()).unwrap();
        let merged = pool2_fuse_merge(&m, &p).unwrap();
        assert_eq!(merged, ops::upsample_rows(&m[0], 3).unwrap());
        assert!(pool2_fuse_merge(&m[..2], &p).is_err());
    }

    #[test]
    fn gradient_sum_pool_identical_maps() {
        let m = rand_map(3, 3, 2, 40);
        let maps = vec![m.clone(), m.clone(), m.clone(), m.clone()];
        let out = gradient_sum_pool(&maps).unwrap();
        for (o, i) in out.data().iter().zip(m.data()) {
            assert!((o - i).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_sum_pool_constant_fallback() {
        let maps: Vec<Tensor> = (0..4).map(|i| Tensor::filled(&[2, 2, 1], i as f64)).collect();
        let out = gradient_sum_pool(&maps).unwrap();
        // Uniform weights: mean of 0,1,2,3 = 1.5.
        for &v in out.data() {
            assert!((v - 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_sum_weights_match_explicit_oracle() {
        // One high-contrast map among three constants: its weight must equal
        // the explicitly computed gradient-magnitude share (here, 1).
        let mut contrast = Tensor::zeros(&[4, 4, 1]);
        for r in 0..4 {
            for c in 0..4 {
                contrast.set3(r, c, 0, ((r + c) % 2) as f64);
            }
        }
        let flat = Tensor::filled(&[4, 4, 1], 0.3);
        let maps = [&contrast, &flat, &flat, &flat];
        let weights = gradient_sum_weights(&maps).unwrap();

        // Oracle: forward differences, sqrt(dh^2+dw^2), mean per map.
        let mut mag = 0.0;
        for r in 0..4 {
            for c in 0..4 {
                let v = contrast.at3(r, c, 0);
                let dh = if r + 1 < 4 { contrast.at3(r + 1, c, 0) - v } else { 0.0 };
                let dw = if c + 1 < 4 { contrast.at3(r, c + 1, 0) - v } else { 0.0 };
                mag += (dh * dh + dw * dw).sqrt();
            }
        }
        mag /= 16.0;
        assert!(mag > 0.0);
        assert!((weights[0] - 1.0).abs() < 1e-12);
        assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(weights.iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn extract_features_structure_and_determinism() {
        let mut r = rng(50);
        let pipeline = FeaturePipeline::init((12, 12), StemSpec::default_four(4, 6), &mut r).unwrap();
        let img = rand_map(12, 12, 1, 51);
        let fs1 = pipeline.extract(&img, "img0", Some(1)).unwrap();
        assert_eq!(fs1.maps.len(), 4);
        let shape = fs1.map_shape().to_vec();
        assert_eq!(shape, vec![12, 4, 6]);
        for m in &fs1.maps {
            assert_eq!(m.shape(), &shape[..]);
        }
        // Bit-identical across runs.
        let fs2 = pipeline.extract(&img, "img0", Some(1)).unwrap();
        for (a, b) in fs1.maps.iter().zip(&fs2.maps) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn extract_features_zero_everything() {
        let mut r = rng(52);
        let mut pipeline = FeaturePipeline::init((12, 12), StemSpec::default_four(4, 6), &mut r).unwrap();
        for p in pipeline.params_mut() {
            *p = Tensor::zeros(p.shape());
        }
        let img = Tensor::zeros(&[12, 12, 1]);
        let fs = pipeline.extract(&img, "zero", None).unwrap();
        for m in &fs.maps {
            assert!(m.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn stems_must_be_distinct() {
        let mut specs = StemSpec::default_four(4, 6);
        specs[1] = StemSpec {
            stem_id: 1,
            ..specs[0].clone()
        };
        let mut r = rng(53);
        assert!(FeaturePipeline::init((12, 12), specs, &mut r).is_err());
    }

    #[test]
    fn params_orders_agree() {
        let mut r = rng(54);
        let mut pipeline = FeaturePipeline::init((24, 24), StemSpec::default_four(7, 16), &mut r).unwrap();
        let named: Vec<Vec<usize>> = pipeline
            .params_named()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        let muts: Vec<Vec<usize>> = pipeline.params_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(named, muts);
        let mut tape = GradTape::new();
        let (_, flat) = pipeline.bind(&mut tape).unwrap();
        assert_eq!(flat.len(), named.len());
        for (v, shape) in flat.iter().zip(&named) {
            assert_eq!(tape.value(*v).shape(), &shape[..]);
        }
    }
}
