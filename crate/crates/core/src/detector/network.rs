//! The backbone and prediction heads, with hand-written backpropagation.
//!
//! Activations are stored channel-major (`C x H x W`). Each 3x3 convolution is
//! lowered to a matrix product over an im2col buffer.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::anchors::{AnchorConfig, OffsetVector};
use super::loss::ClassScores;
use crate::dataset::ClassSet;
use crate::error::DetectorError;
use crate::imaging::Image;
use crate::rng;

/// Layer shapes of the detector. Every backbone stage is a 3x3 convolution,
/// a ReLU and a 2x2 max-pool, so the feature grid is
/// `input_size / 2^channels.len()`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_size: usize,
    pub channels: Vec<usize>,
    pub num_classes: usize,
    pub anchors: AnchorConfig,
}

impl Architecture {
    pub fn desk_scale(num_classes: usize) -> Self {
        Architecture { input_size: 64, channels: vec![16, 32, 32], num_classes, anchors: AnchorConfig::default() }
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        self.anchors.validate()?;
        let bad = |m: String| Err(DetectorError::Contract(format!("architecture: {m}")));
        if self.channels.is_empty() || self.channels.contains(&0) || self.num_classes == 0 {
            return bad("channels and class count must be positive".into());
        }
        let stride = 1usize << self.channels.len();
        if self.input_size % stride != 0 || self.input_size / stride != self.anchors.grid {
            return bad(format!(
                "input {} with {} pooling stages does not give a {}x{} grid",
                self.input_size,
                self.channels.len(),
                self.anchors.grid,
                self.anchors.grid
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.input_size >> self.channels.len()
    }

    pub fn num_anchors(&self) -> usize {
        self.grid() * self.grid() * self.anchors.anchors_per_cell()
    }

    /// Class columns per anchor, background included.
    pub fn num_columns(&self) -> usize {
        self.num_classes + 1
    }

    fn conv_shapes(&self) -> Vec<(usize, usize)> {
        let mut cin = 3;
        self.channels
            .iter()
            .map(|&c| {
                let s = (cin, c);
                cin = c;
                s
            })
            .collect()
    }

    fn feature_channels(&self) -> usize {
        *self.channels.last().unwrap()
    }

    fn class_outputs(&self) -> usize {
        self.anchors.anchors_per_cell() * self.num_columns()
    }

    fn box_outputs(&self) -> usize {
        self.anchors.anchors_per_cell() * 4
    }

    /// Offsets of each weight block in the flat parameter vector: backbone
    /// convolutions, then the class head, then the box head. Each block is a
    /// `cout x fan_in` weight matrix followed by `cout` biases.
    fn blocks(&self) -> Vec<Block> {
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut push = |cin: usize, cout: usize, taps: usize| {
            let b = Block { offset, fan_in: cin * taps, cout };
            offset += b.len();
            blocks.push(b);
        };
        for (cin, cout) in self.conv_shapes() {
            push(cin, cout, 9);
        }
        push(self.feature_channels(), self.class_outputs(), 1);
        push(self.feature_channels(), self.box_outputs(), 1);
        blocks
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(Block::len).sum()
    }
}

#[derive(Clone, Copy, Debug)]
struct Block {
    offset: usize,
    fan_in: usize,
    cout: usize,
}

impl Block {
    fn len(&self) -> usize {
        self.cout * (self.fan_in + 1)
    }

    fn weights<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.offset..self.offset + self.cout * self.fan_in]
    }

    fn bias<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.offset + self.cout * self.fan_in..self.offset + self.len()]
    }

    fn split_mut<'a>(&self, p: &'a mut [f64]) -> (&'a mut [f64], &'a mut [f64]) {
        p[self.offset..self.offset + self.len()].split_at_mut(self.cout * self.fan_in)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub arch: Architecture,
    pub class_set: ClassSet,
    pub params: Vec<f64>,
    pub step: u64,
}

impl ModelState {
    pub fn zeros(arch: Architecture, class_set: ClassSet) -> Result<Self, DetectorError> {
        arch.validate()?;
        if class_set.len() != arch.num_classes {
            return Err(DetectorError::Contract(format!(
                "{} classes in the class set, {} in the architecture",
                class_set.len(),
                arch.num_classes
            )));
        }
        let params = vec![0.0; arch.param_count()];
        Ok(ModelState { arch, class_set, params, step: 0 })
    }

    /// He-normal weights (std `sqrt(2 / fan_in)`), zero biases.
    pub fn init(arch: Architecture, class_set: ClassSet, seed: u64) -> Result<Self, DetectorError> {
        let mut m = Self::zeros(arch, class_set)?;
        let mut rng = rng::stream(seed, "model-init");
        for b in m.arch.blocks() {
            let normal = Normal::new(0.0, (2.0 / b.fan_in as f64).sqrt()).unwrap();
            let (w, _) = b.split_mut(&mut m.params);
            for v in w {
                *v = normal.sample(&mut rng);
            }
        }
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        self.arch.validate()?;
        if self.params.len() != self.arch.param_count() {
            return Err(DetectorError::Contract(format!(
                "{} parameters, architecture needs {}",
                self.params.len(),
                self.arch.param_count()
            )));
        }
        if self.params.iter().any(|v| !v.is_finite()) {
            return Err(DetectorError::Contract("non-finite parameter".into()));
        }
        Ok(())
    }
}

/// Row-major `C = alpha * op(A) * op(B) + beta * C` with `op(A)` of shape
/// `m x k` and `op(B)` of shape `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(input: &[f64], channels: usize, size: usize, cols: &mut Vec<f64>) {
    let hw = size * size;
    cols.clear();
    cols.resize(channels * 9 * hw, 0.0);
    for c in 0..channels {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..size {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= size as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * size..][..size];
                    let dst = &mut row[y * size..][..size];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..size - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..size - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], channels: usize, size: usize, out: &mut [f64]) {
    let hw = size * size;
    out.fill(0.0);
    for c in 0..channels {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..size {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= size as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * size..][..size];
                    let src = &row[y * size..][..size];
                    match kx {
                        0 => dst[..size - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..size - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
}

/// Intermediate values of one backbone stage kept for the backward pass.
#[derive(Clone, Debug, Default)]
struct StageCache {
    cols: Vec<f64>,
    /// Post-ReLU activations at full resolution.
    act: Vec<f64>,
    pooled: Vec<f64>,
    /// Index into `act` of each pooled maximum.
    argmax: Vec<u32>,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Clone, Debug, Default)]
pub struct ForwardCache {
    stages: Vec<StageCache>,
    class_out: Vec<f64>,
    box_out: Vec<f64>,
}

impl ForwardCache {
    /// Fingerprint of the piecewise-linear region the forward pass landed in
    /// (ReLU on/off pattern and pool winners). Two parameter vectors with the
    /// same fingerprint share one smooth branch of the network.
    pub fn region_hash(&self, h: &mut impl std::hash::Hasher) {
        for s in &self.stages {
            for &a in &s.act {
                h.write_u8(u8::from(a > 0.0));
            }
            for &i in &s.argmax {
                h.write_u32(i);
            }
        }
    }
}

pub struct NetworkOutput {
    pub scores: ClassScores,
    pub offsets: Vec<OffsetVector>,
}

/// Channel-major, zero-centered copy of the image.
fn input_planes(img: &Image) -> Vec<f64> {
    let hw = img.width() * img.height();
    let mut out = vec![0.0; 3 * hw];
    for (i, px) in img.pixels().chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * hw + i] = px[c] - 0.5;
        }
    }
    out
}

fn relu_pool(pre: &mut [f64], channels: usize, size: usize, pooled: &mut Vec<f64>, argmax: &mut Vec<u32>) {
    for v in pre.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let half = size / 2;
    pooled.clear();
    argmax.clear();
    for c in 0..channels {
        let base = c * size * size;
        for y in 0..half {
            for x in 0..half {
                let mut best = base + 2 * y * size + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * size + 2 * x + dx;
                    if pre[i] > pre[best] {
                        best = i;
                    }
                }
                pooled.push(pre[best]);
                argmax.push(best as u32);
            }
        }
    }
}

pub fn forward(model: &ModelState, img: &Image) -> Result<NetworkOutput, DetectorError> {
    forward_cached(model, img, &mut ForwardCache::default())
}

pub(crate) fn forward_cached(
    model: &ModelState,
    img: &Image,
    cache: &mut ForwardCache,
) -> Result<NetworkOutput, DetectorError> {
    let arch = &model.arch;
    let size = arch.input_size;
    if img.width() != size || img.height() != size {
        return Err(DetectorError::Contract(format!(
            "image is {}x{}, model expects {size}x{size}",
            img.width(),
            img.height()
        )));
    }
    let blocks = arch.blocks();
    let shapes = arch.conv_shapes();
    cache.stages.resize_with(shapes.len(), StageCache::default);

    let mut input = input_planes(img);
    let mut s = size;
    for (li, &(cin, cout)) in shapes.iter().enumerate() {
        let b = blocks[li];
        let st = &mut cache.stages[li];
        im2col(&input, cin, s, &mut st.cols);
        let hw = s * s;
        st.act.clear();
        for &bias in b.bias(&model.params) {
            st.act.extend(std::iter::repeat_n(bias, hw));
        }
        gemm(cout, cin * 9, hw, b.weights(&model.params), false, &st.cols, false, 1.0, &mut st.act);
        relu_pool(&mut st.act, cout, s, &mut st.pooled, &mut st.argmax);
        input.clone_from(&st.pooled);
        s /= 2;
    }

    let cells = s * s;
    let feat = &cache.stages.last().unwrap().pooled;
    let heads = [(blocks[shapes.len()], &mut cache.class_out), (blocks[shapes.len() + 1], &mut cache.box_out)];
    for (b, out) in heads {
        out.clear();
        for &bias in b.bias(&model.params) {
            out.extend(std::iter::repeat_n(bias, cells));
        }
        gemm(b.cout, b.fan_in, cells, b.weights(&model.params), false, feat, false, 1.0, out);
    }

    let a_per = arch.anchors.anchors_per_cell();
    let cols = arch.num_columns();
    let mut logits = Vec::with_capacity(cells * a_per * cols);
    let mut offsets = Vec::with_capacity(cells * a_per);
    for cell in 0..cells {
        for a in 0..a_per {
            for c in 0..cols {
                logits.push(cache.class_out[(a * cols + c) * cells + cell]);
            }
            offsets.push(OffsetVector::from_array(std::array::from_fn(|k| cache.box_out[(a * 4 + k) * cells + cell])));
        }
    }
    Ok(NetworkOutput { scores: ClassScores::from_logits(logits, cols), offsets })
}

/// Accumulates `scale` times the parameter gradient into `grad`, given the
/// loss gradient with respect to the logits and offsets of the forward pass
/// recorded in `cache`.
pub(crate) fn backward(
    model: &ModelState,
    cache: &ForwardCache,
    d_logits: &[f64],
    d_offsets: &[OffsetVector],
    scale: f64,
    grad: &mut [f64],
) {
    let arch = &model.arch;
    let blocks = arch.blocks();
    let shapes = arch.conv_shapes();
    let g = arch.grid();
    let cells = g * g;
    let a_per = arch.anchors.anchors_per_cell();
    let cols = arch.num_columns();

    let mut d_class = vec![0.0; arch.class_outputs() * cells];
    let mut d_box = vec![0.0; arch.box_outputs() * cells];
    for cell in 0..cells {
        for a in 0..a_per {
            let anchor = cell * a_per + a;
            for c in 0..cols {
                d_class[(a * cols + c) * cells + cell] = scale * d_logits[anchor * cols + c];
            }
            let d = d_offsets[anchor].to_array();
            for k in 0..4 {
                d_box[(a * 4 + k) * cells + cell] = scale * d[k];
            }
        }
    }

    let feat = &cache.stages.last().unwrap().pooled;
    let mut d_feat = vec![0.0; arch.feature_channels() * cells];
    for (bi, d_out) in [(shapes.len(), &d_class), (shapes.len() + 1, &d_box)] {
        let b = blocks[bi];
        {
            let (dw, db) = b.split_mut(grad);
            gemm(b.cout, cells, b.fan_in, d_out, false, feat, true, 1.0, dw);
            for (o, v) in db.iter_mut().enumerate() {
                *v += d_out[o * cells..(o + 1) * cells].iter().sum::<f64>();
            }
        }
        gemm(b.fan_in, b.cout, cells, b.weights(&model.params), true, d_out, false, 1.0, &mut d_feat);
    }

    let mut d_pooled = d_feat;
    let mut s = arch.input_size >> (shapes.len() - 1);
    let mut d_cols = Vec::new();
    for li in (0..shapes.len()).rev() {
        let (cin, cout) = shapes[li];
        let b = blocks[li];
        let st = &cache.stages[li];
        let hw = s * s;
        let mut d_act = vec![0.0; cout * hw];
        for (&i, &d) in st.argmax.iter().zip(&d_pooled) {
            if st.act[i as usize] > 0.0 {
                d_act[i as usize] += d;
            }
        }
        {
            let (dw, db) = b.split_mut(grad);
            gemm(cout, hw, cin * 9, &d_act, false, &st.cols, true, 1.0, dw);
            for (o, v) in db.iter_mut().enumerate() {
                *v += d_act[o * hw..(o + 1) * hw].iter().sum::<f64>();
            }
        }
        if li > 0 {
            d_cols.resize(cin * 9 * hw, 0.0);
            gemm(cin * 9, cout, hw, b.weights(&model.params), true, &d_act, false, 0.0, &mut d_cols);
            d_pooled = vec![0.0; cin * hw];
            col2im(&d_cols, cin, s, &mut d_pooled);
        }
        s *= 2;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Image;

    #[test]
    fn desk_scale_shapes() {
        let arch = Architecture::desk_scale(4);
        arch.validate().unwrap();
        assert_eq!(arch.grid(), 8);
        assert_eq!(arch.num_anchors(), 192);
        // 448 + 4640 + 9248 + 495 + 396
        assert_eq!(arch.param_count(), 15_227);
    }

    #[test]
    fn output_shapes_and_zero_model() {
        let m = ModelState::zeros(Architecture::desk_scale(4), ClassSet::canonical()).unwrap();
        let out = forward(&m, &Image::filled(64, 64, [0.3, 0.6, 0.9])).unwrap();
        assert_eq!(out.scores.logits.len(), 192 * 5);
        assert_eq!(out.offsets.len(), 192);
        assert!(out.scores.logits.iter().all(|&v| v == 0.0));
        assert!(out.scores.probs.iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn forward_is_deterministic_and_checks_size() {
        let m = ModelState::init(Architecture::desk_scale(4), ClassSet::canonical(), 3).unwrap();
        let img = Image::from_raw(64, 64, (0..64 * 64 * 3).map(|i| (i % 97) as f64 / 97.0).collect()).unwrap();
        let a = forward(&m, &img).unwrap();
        let b = forward(&m, &img).unwrap();
        assert_eq!(a.scores.logits, b.scores.logits);
        assert_eq!(a.offsets, b.offsets);
        assert!(matches!(forward(&m, &Image::new(32, 32)), Err(DetectorError::Contract(_))));
    }

    #[test]
    fn init_is_seeded() {
        let arch = Architecture::desk_scale(4);
        let a = ModelState::init(arch.clone(), ClassSet::canonical(), 1).unwrap();
        let b = ModelState::init(arch.clone(), ClassSet::canonical(), 1).unwrap();
        let c = ModelState::init(arch, ClassSet::canonical(), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
        a.validate().unwrap();
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, s) = (2, 5);
        let x: Vec<f64> = (0..c * s * s).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..c * 9 * s * s).map(|i| ((i * 5) % 13) as f64 - 6.0).collect();
        let mut cols = Vec::new();
        im2col(&x, c, s, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, c, s, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn mismatched_class_set_is_rejected() {
        assert!(ModelState::zeros(Architecture::desk_scale(3), ClassSet::canonical()).is_err());
    }
}
