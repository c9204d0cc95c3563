//! Anchor scenes and the public/private neural-Gaussian decoders.
//!
//! Every anchor owns `k` neural Gaussians. The original stream places them
//! at `x_v + O_i ⊙ l_v` using offsets stored in the anchor; the hidden stream
//! asks a private MLP for the offsets, so nothing about it lives in the anchor.

use std::hash::Hasher;

use nalgebra::Vector3;
use rand::Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, CustomOp, Tape, Tensor, Var};
use crate::geometry::{Camera, Gaussian3D};
use crate::nn::{Mlp, MlpVars, HIDDEN};
use crate::rasterizer::{gaussians_from_tape, GaussianVars, RenderError};

pub const FEATURE_DIM: usize = 32;
/// Distance plus unit direction to the camera.
pub const VIEW_DIM: usize = 4;
pub const DECODER_INPUT: usize = FEATURE_DIM + VIEW_DIM;
pub const KEY_FORMAT_VERSION: u32 = 1;
const MIN_VIEW_DISTANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("anchor {0} coincides with the camera center")]
    CoincidentCamera(usize),
    #[error("key bundle failed its integrity check (stored {stored:#018x}, computed {computed:#018x})")]
    KeyIntegrity { stored: u64, computed: u64 },
    #[error("key bundle has no bit decoder")]
    NoBitHead,
    #[error("anchor {index} has {got} offsets, scene expects {k}")]
    OffsetCount { index: usize, got: usize, k: usize },
    #[error("decoder shapes do not match k = {0}")]
    DecoderShape(usize),
    #[error("invalid anchor {0}: {1}")]
    InvalidAnchor(usize, &'static str),
}

/// Which accumulated gradient stream an anchor was grown from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Origin {
    Ori,
    Hid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorPoint {
    pub position: Vector3<f64>,
    pub feature: [f64; FEATURE_DIM],
    /// Pre-activation scaling; `l_v = exp(scaling_raw)`.
    pub scaling_raw: Vector3<f64>,
    pub offsets: Vec<Vector3<f64>>,
    pub origin: Origin,
}

impl AnchorPoint {
    /// Fresh anchor: zero feature, `l_v` equal to the voxel size, offsets
    /// uniform in `[-0.5, 0.5]³`.
    pub fn new(position: Vector3<f64>, voxel_size: f64, k: usize, origin: Origin, rng: &mut impl Rng) -> Self {
        let offsets = (0..k)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                )
            })
            .collect();
        Self {
            position,
            feature: [0.0; FEATURE_DIM],
            scaling_raw: Vector3::repeat(voxel_size.ln()),
            offsets,
            origin,
        }
    }

    pub fn scaling(&self) -> Vector3<f64> {
        self.scaling_raw.map(f64::exp)
    }
}

/// The anchor cloud plus the global fan-out `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub k: usize,
    pub anchors: Vec<AnchorPoint>,
}

impl Scene {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            anchors: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        for (index, a) in self.anchors.iter().enumerate() {
            if a.offsets.len() != self.k {
                return Err(SceneError::OffsetCount {
                    index,
                    got: a.offsets.len(),
                    k: self.k,
                });
            }
            if !a.feature.iter().all(|v| v.is_finite()) {
                return Err(SceneError::InvalidAnchor(index, "non-finite feature"));
            }
            let finite3 = |v: &Vector3<f64>| v.iter().all(|c| c.is_finite());
            if !finite3(&a.position) || !finite3(&a.scaling_raw) || !a.offsets.iter().all(finite3) {
                return Err(SceneError::InvalidAnchor(index, "non-finite geometry"));
            }
        }
        Ok(())
    }

    pub fn count(&self, origin: Origin) -> usize {
        self.anchors.iter().filter(|a| a.origin == origin).count()
    }

    /// Anchor tensors `(positions [n,3], features [n,32], scaling_raw [n,3], offsets [n,3k])`.
    pub fn tensors(&self) -> [Tensor; 4] {
        let n = self.len();
        let mut pos = Vec::with_capacity(n * 3);
        let mut feat = Vec::with_capacity(n * FEATURE_DIM);
        let mut scl = Vec::with_capacity(n * 3);
        let mut off = Vec::with_capacity(n * 3 * self.k);
        for a in &self.anchors {
            pos.extend(a.position.iter());
            feat.extend_from_slice(&a.feature);
            scl.extend(a.scaling_raw.iter());
            for o in &a.offsets {
                off.extend(o.iter());
            }
        }
        [
            Tensor::matrix(n, 3, pos).expect("sized"),
            Tensor::matrix(n, FEATURE_DIM, feat).expect("sized"),
            Tensor::matrix(n, 3, scl).expect("sized"),
            Tensor::matrix(n, 3 * self.k, off).expect("sized"),
        ]
    }

    /// Inverse of [`Scene::tensors`] for the learnable fields; origins are kept.
    pub fn set_from_tensors(&mut self, t: &[Tensor; 4]) {
        let k = self.k;
        for (i, a) in self.anchors.iter_mut().enumerate() {
            a.position = Vector3::from_column_slice(t[0].row(i));
            a.feature.copy_from_slice(t[1].row(i));
            a.scaling_raw = Vector3::from_column_slice(t[2].row(i));
            let off = t[3].row(i);
            for (j, o) in a.offsets.iter_mut().enumerate().take(k) {
                *o = Vector3::from_column_slice(&off[j * 3..j * 3 + 3]);
            }
        }
    }
}

/// `f_v`, `f_v↓1` (pairs averaged) and `f_v↓2` (quads averaged), each
/// duplicated back to full width.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    pub full: [f64; FEATURE_DIM],
    pub half: [f64; FEATURE_DIM],
    pub quarter: [f64; FEATURE_DIM],
}

fn pooled(f: &[f64; FEATURE_DIM], group: usize) -> [f64; FEATURE_DIM] {
    let mut out = [0.0; FEATURE_DIM];
    for (chunk_in, chunk_out) in f.chunks(group).zip(out.chunks_mut(group)) {
        let m = chunk_in.iter().sum::<f64>() / group as f64;
        chunk_out.iter_mut().for_each(|v| *v = m);
    }
    out
}

impl FeatureBank {
    pub fn new(f: &[f64; FEATURE_DIM]) -> Self {
        Self {
            full: *f,
            half: pooled(f, 2),
            quarter: pooled(f, 4),
        }
    }
}

/// `[32,32]` matrix `P` with `f·P` equal to group-averaged pooling.
fn pool_matrix(group: usize) -> Tensor {
    let mut data = vec![0.0; FEATURE_DIM * FEATURE_DIM];
    for i in 0..FEATURE_DIM {
        for j in 0..FEATURE_DIM {
            if i / group == j / group {
                data[i * FEATURE_DIM + j] = 1.0 / group as f64;
            }
        }
    }
    Tensor::matrix(FEATURE_DIM, FEATURE_DIM, data).expect("sized")
}

/// Public decoders: the feature-bank weight net and the four attribute heads.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderSet {
    pub k: usize,
    /// View distances are divided by this before entering the decoders.
    pub distance_unit: f64,
    pub weights: Mlp,
    pub color: Mlp,
    pub opacity: Mlp,
    pub rotation: Mlp,
    pub scale: Mlp,
}

/// Rotation head that starts at the identity quaternion for every slot.
fn identity_rotation_head(k: usize, rng: &mut impl Rng) -> Mlp {
    let mut m = Mlp::new(DECODER_INPUT, HIDDEN, 4 * k, rng).with_zero_output();
    for slot in 0..k {
        m.b2.data_mut()[slot * 4] = 1.0;
    }
    m
}

fn small_output(mut m: Mlp, gain: f64) -> Mlp {
    m.w2.data_mut().iter_mut().for_each(|v| *v *= gain);
    m.b2.data_mut().iter_mut().for_each(|v| *v *= gain);
    m
}

impl DecoderSet {
    pub fn new(k: usize, rng: &mut impl Rng) -> Self {
        Self {
            k,
            distance_unit: 1.0,
            weights: Mlp::new(VIEW_DIM, HIDDEN, 3, rng),
            color: Mlp::new(DECODER_INPUT, HIDDEN, 3 * k, rng),
            opacity: Mlp::new(DECODER_INPUT, HIDDEN, k, rng),
            rotation: identity_rotation_head(k, rng),
            scale: small_output(Mlp::new(DECODER_INPUT, HIDDEN, 3 * k, rng), 0.1),
        }
    }

    pub fn mlps(&self) -> [&Mlp; 5] {
        [&self.weights, &self.color, &self.opacity, &self.rotation, &self.scale]
    }

    pub fn mlps_mut(&mut self) -> [&mut Mlp; 5] {
        [
            &mut self.weights,
            &mut self.color,
            &mut self.opacity,
            &mut self.rotation,
            &mut self.scale,
        ]
    }

    pub fn check_shapes(&self) -> Result<(), SceneError> {
        let k = self.k;
        if !(self.distance_unit.is_finite() && self.distance_unit > 0.0) {
            return Err(SceneError::DecoderShape(k));
        }
        let want = [
            (VIEW_DIM, 3),
            (DECODER_INPUT, 3 * k),
            (DECODER_INPUT, k),
            (DECODER_INPUT, 4 * k),
            (DECODER_INPUT, 3 * k),
        ];
        let ok = self
            .mlps()
            .iter()
            .zip(want)
            .all(|(m, (i, o))| m.input_dim() == i && m.output_dim() == o);
        if ok {
            Ok(())
        } else {
            Err(SceneError::DecoderShape(k))
        }
    }

    pub fn record(&self, tape: &mut Tape, requires_grad: bool) -> DecoderVars {
        DecoderVars {
            weights: self.weights.record(tape, requires_grad),
            color: self.color.record(tape, requires_grad),
            opacity: self.opacity.record(tape, requires_grad),
            rotation: self.rotation.record(tape, requires_grad),
            scale: self.scale.record(tape, requires_grad),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    pub weights: MlpVars,
    pub color: MlpVars,
    pub opacity: MlpVars,
    pub rotation: MlpVars,
    pub scale: MlpVars,
}

impl DecoderVars {
    pub fn all(&self) -> [MlpVars; 5] {
        [self.weights, self.color, self.opacity, self.rotation, self.scale]
    }
}

/// Private decoders. Holding one is what authorizes hidden decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyBundle {
    pub k: usize,
    pub version: u32,
    pub offset: Mlp,
    pub color: Mlp,
    pub opacity: Mlp,
    pub rotation: Mlp,
    pub scale: Mlp,
    pub bits: Option<Mlp>,
    checksum: u64,
}

impl KeyBundle {
    /// Random private decoders; `n_bits` adds a bit head on the raw anchor feature.
    pub fn new(k: usize, n_bits: Option<usize>, rng: &mut impl Rng) -> Self {
        let mut key = Self {
            k,
            version: KEY_FORMAT_VERSION,
            offset: Mlp::new(DECODER_INPUT, HIDDEN, 3 * k, rng),
            color: Mlp::new(DECODER_INPUT, HIDDEN, 3 * k, rng),
            opacity: Mlp::new(DECODER_INPUT, HIDDEN, k, rng),
            rotation: identity_rotation_head(k, rng),
            scale: small_output(Mlp::new(DECODER_INPUT, HIDDEN, 3 * k, rng), 0.1),
            bits: n_bits.map(|b| Mlp::new(FEATURE_DIM, HIDDEN, b, rng).with_zero_output()),
            checksum: 0,
        };
        key.seal();
        key
    }

    /// Rebuilds a bundle from stored parts; the checksum is checked, not recomputed.
    pub fn from_parts(k: usize, version: u32, mlps: [Mlp; 5], bits: Option<Mlp>, checksum: u64) -> Result<Self, SceneError> {
        let [offset, color, opacity, rotation, scale] = mlps;
        let key = Self {
            k,
            version,
            offset,
            color,
            opacity,
            rotation,
            scale,
            bits,
            checksum,
        };
        key.verify()?;
        key.check_shapes()?;
        Ok(key)
    }

    pub fn n_bits(&self) -> Option<usize> {
        self.bits.as_ref().map(Mlp::output_dim)
    }

    /// The five attribute decoders in storage order.
    pub fn mlps(&self) -> [&Mlp; 5] {
        [&self.offset, &self.color, &self.opacity, &self.rotation, &self.scale]
    }

    /// All trainable private networks, bit head last.
    pub fn mlps_mut(&mut self) -> Vec<&mut Mlp> {
        let mut v = vec![
            &mut self.offset,
            &mut self.color,
            &mut self.opacity,
            &mut self.rotation,
            &mut self.scale,
        ];
        if let Some(b) = self.bits.as_mut() {
            v.push(b);
        }
        v
    }

    pub fn check_shapes(&self) -> Result<(), SceneError> {
        let k = self.k;
        let want = [3 * k, 3 * k, k, 4 * k, 3 * k];
        let heads_ok = self
            .mlps()
            .iter()
            .zip(want)
            .all(|(m, o)| m.input_dim() == DECODER_INPUT && m.output_dim() == o);
        let bits_ok = self.bits.as_ref().is_none_or(|b| b.input_dim() == FEATURE_DIM);
        if heads_ok && bits_ok {
            Ok(())
        } else {
            Err(SceneError::DecoderShape(k))
        }
    }

    /// Little-endian dimension table followed by every weight, in a fixed order.
    pub fn payload_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        let mut nets: Vec<&Mlp> = self.mlps().to_vec();
        out.extend_from_slice(&(self.n_bits().unwrap_or(0) as u32).to_le_bytes());
        if let Some(b) = &self.bits {
            nets.push(b);
        }
        for m in &nets {
            for d in [m.input_dim(), m.hidden_dim(), m.output_dim()] {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for m in &nets {
            for t in m.params() {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn compute_checksum(&self) -> u64 {
        let mut h = fnv::FnvHasher::default();
        h.write(&self.payload_bytes());
        h.finish()
    }

    pub fn checksum(&self) -> u64 {
        self.checksum
    }

    /// Refreshes the checksum after the weights changed.
    pub fn seal(&mut self) {
        self.checksum = self.compute_checksum();
    }

    pub fn verify(&self) -> Result<(), SceneError> {
        let computed = self.compute_checksum();
        if computed == self.checksum {
            Ok(())
        } else {
            Err(SceneError::KeyIntegrity {
                stored: self.checksum,
                computed,
            })
        }
    }

    pub fn record(&self, tape: &mut Tape, requires_grad: bool) -> KeyVars {
        KeyVars {
            offset: self.offset.record(tape, requires_grad),
            color: self.color.record(tape, requires_grad),
            opacity: self.opacity.record(tape, requires_grad),
            rotation: self.rotation.record(tape, requires_grad),
            scale: self.scale.record(tape, requires_grad),
            bits: self.bits.as_ref().map(|b| b.record(tape, requires_grad)),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct KeyVars {
    pub offset: MlpVars,
    pub color: MlpVars,
    pub opacity: MlpVars,
    pub rotation: MlpVars,
    pub scale: MlpVars,
    pub bits: Option<MlpVars>,
}

impl KeyVars {
    pub fn all(&self) -> Vec<MlpVars> {
        let mut v = vec![self.offset, self.color, self.opacity, self.rotation, self.scale];
        v.extend(self.bits);
        v
    }
}

/// Anchor tensors on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AnchorVars {
    pub positions: Var,
    pub features: Var,
    pub scaling_raw: Var,
    pub offsets: Var,
}

impl AnchorVars {
    pub fn record(tape: &mut Tape, scene: &Scene, requires_grad: bool) -> Self {
        let [p, f, s, o] = scene.tensors();
        Self {
            positions: tape.leaf(p, requires_grad),
            features: tape.leaf(f, requires_grad),
            scaling_raw: tape.leaf(s, requires_grad),
            offsets: tape.leaf(o, requires_grad),
        }
    }

    pub fn all(&self) -> [Var; 4] {
        [self.positions, self.features, self.scaling_raw, self.offsets]
    }
}

/// `(δ, d⃗)` for each row of `positions [n,3]` relative to `center`.
pub fn view_features(positions: &Tensor, center: &Vector3<f64>, unit: f64) -> Result<Tensor, SceneError> {
    let n = positions.len() / 3;
    let mut out = Vec::with_capacity(n * VIEW_DIM);
    for i in 0..n {
        let r = Vector3::from_column_slice(&positions.data()[i * 3..i * 3 + 3]) - center;
        let dist = r.norm();
        if !(dist > MIN_VIEW_DISTANCE) {
            return Err(SceneError::CoincidentCamera(i));
        }
        out.push(dist / unit);
        out.extend((r / dist).iter());
    }
    Ok(Tensor::matrix(n, VIEW_DIM, out)?)
}

struct ViewFeatureOp {
    unit: f64,
}

impl CustomOp for ViewFeatureOp {
    fn name(&self) -> &'static str {
        "view_features"
    }

    fn backward(&self, _inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>> {
        let n = output.len() / VIEW_DIM;
        let mut g = vec![0.0; n * 3];
        for i in 0..n {
            let o = &output.data()[i * VIEW_DIM..(i + 1) * VIEW_DIM];
            let go = &grad_out.data()[i * VIEW_DIM..(i + 1) * VIEW_DIM];
            let dist = o[0] * self.unit;
            let d = Vector3::new(o[1], o[2], o[3]);
            let gd = Vector3::new(go[1], go[2], go[3]);
            // ∂δ/∂x = d, ∂d/∂x = (I − d dᵀ)/δ
            let gx = d * (go[0] / self.unit) + (gd - d * d.dot(&gd)) / dist;
            g[i * 3..i * 3 + 3].copy_from_slice(gx.as_slice());
        }
        vec![Some(Tensor::matrix(n, 3, g).expect("sized"))]
    }
}

/// The per-anchor decoder input `[f̂_v, δ_vc, d⃗_vc]`, `[n,36]`.
pub fn decoder_input(
    tape: &mut Tape,
    anchors: &AnchorVars,
    weights: &MlpVars,
    center: &Vector3<f64>,
    unit: f64,
) -> Result<Var, SceneError> {
    let view_val = view_features(tape.value(anchors.positions), center, unit)?;
    let view = tape.custom(&[anchors.positions], view_val, Box::new(ViewFeatureOp { unit }));
    let logits = Mlp::apply(tape, weights, view)?;
    let w = tape.softmax_rows(logits)?;
    let zero_bias = tape.constant(Tensor::zeros(vec![FEATURE_DIM]));
    let p2 = tape.constant(pool_matrix(2));
    let p4 = tape.constant(pool_matrix(4));
    let half = tape.linear(anchors.features, p2, zero_bias)?;
    let quarter = tape.linear(anchors.features, p4, zero_bias)?;
    let mut blended = None;
    for (i, f) in [anchors.features, half, quarter].into_iter().enumerate() {
        let wi = tape.slice_cols(w, i, 1)?;
        let term = tape.mul_col(f, wi)?;
        blended = Some(match blended {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let blended = blended.expect("three terms");
    Ok(tape.concat_cols(&[blended, view])?)
}

fn tile(tape: &mut Tape, x: Var, k: usize) -> Result<Var, SceneError> {
    Ok(tape.concat_cols(&vec![x; k])?)
}

struct Heads<'a> {
    color: &'a MlpVars,
    opacity: &'a MlpVars,
    rotation: &'a MlpVars,
    scale: &'a MlpVars,
}

fn decode_attributes(
    tape: &mut Tape,
    anchors: &AnchorVars,
    input: Var,
    mean: Var,
    heads: Heads,
    k: usize,
) -> Result<GaussianVars, SceneError> {
    let n = tape.value(input).shape()[0];
    let m = n * k;
    let c = Mlp::apply(tape, heads.color, input)?;
    let c = tape.sigmoid(c);
    let color = tape.reshape(c, vec![m, 3])?;
    let a = Mlp::apply(tape, heads.opacity, input)?;
    let a = tape.tanh(a);
    let opacity = tape.reshape(a, vec![m, 1])?;
    let q = Mlp::apply(tape, heads.rotation, input)?;
    let q = tape.reshape(q, vec![m, 4])?;
    let rotation = tape.normalize_groups(q, 4)?;
    let s = Mlp::apply(tape, heads.scale, input)?;
    let s = tape.exp(s);
    let l = tape.exp(anchors.scaling_raw);
    let l = tile(tape, l, k)?;
    let s = tape.mul(s, l)?;
    let scale = tape.reshape(s, vec![m, 3])?;
    Ok(GaussianVars {
        mean,
        color,
        opacity,
        rotation,
        scale,
    })
}

/// Original-stream neural Gaussians, `k` per anchor in anchor-major order.
pub fn original_on_tape(
    tape: &mut Tape,
    anchors: &AnchorVars,
    input: Var,
    dec: &DecoderVars,
    k: usize,
) -> Result<GaussianVars, SceneError> {
    let n = tape.value(input).shape()[0];
    let l = tape.exp(anchors.scaling_raw);
    let l = tile(tape, l, k)?;
    let x = tile(tape, anchors.positions, k)?;
    let o = tape.mul(anchors.offsets, l)?;
    let mean = tape.add(x, o)?;
    let mean = tape.reshape(mean, vec![n * k, 3])?;
    let heads = Heads {
        color: &dec.color,
        opacity: &dec.opacity,
        rotation: &dec.rotation,
        scale: &dec.scale,
    };
    decode_attributes(tape, anchors, input, mean, heads, k)
}

/// Hidden-stream neural Gaussians. Offsets come from the private offset net
/// and, unlike the original stream, are not scaled by `l_v`.
pub fn hidden_on_tape(
    tape: &mut Tape,
    anchors: &AnchorVars,
    input: Var,
    key: &KeyVars,
    k: usize,
) -> Result<GaussianVars, SceneError> {
    let n = tape.value(input).shape()[0];
    let x = tile(tape, anchors.positions, k)?;
    let o = Mlp::apply(tape, &key.offset, input)?;
    let mean = tape.add(x, o)?;
    let mean = tape.reshape(mean, vec![n * k, 3])?;
    let heads = Heads {
        color: &key.color,
        opacity: &key.opacity,
        rotation: &key.rotation,
        scale: &key.scale,
    };
    decode_attributes(tape, anchors, input, mean, heads, k)
}

/// Blended feature and view terms for one anchor, evaluated directly.
pub fn blend_features(
    anchor: &AnchorPoint,
    cam: &Camera,
    weights: &Mlp,
    unit: f64,
) -> Result<([f64; FEATURE_DIM], f64, Vector3<f64>), SceneError> {
    let center = cam.center();
    let r = anchor.position - center;
    let dist = r.norm();
    if !(dist > MIN_VIEW_DISTANCE) {
        return Err(SceneError::CoincidentCamera(0));
    }
    let dir = r / dist;
    let dist = dist / unit;
    let view = Tensor::matrix(1, VIEW_DIM, vec![dist, dir.x, dir.y, dir.z])?;
    let w = crate::autodiff::softmax_slice(weights.forward(&view)?.data())?;
    let bank = FeatureBank::new(&anchor.feature);
    let mut f = [0.0; FEATURE_DIM];
    for i in 0..FEATURE_DIM {
        f[i] = w[0] * bank.full[i] + w[1] * bank.half[i] + w[2] * bank.quarter[i];
    }
    Ok((f, dist, dir))
}

fn single(anchor: &AnchorPoint) -> Scene {
    Scene {
        k: anchor.offsets.len(),
        anchors: vec![anchor.clone()],
    }
}

pub fn derive_original(anchor: &AnchorPoint, cam: &Camera, dec: &DecoderSet) -> Result<Vec<Gaussian3D>, SceneError> {
    Ok(decode_all(&single(anchor), cam, dec, None)?.0)
}

pub fn derive_hidden(
    anchor: &AnchorPoint,
    cam: &Camera,
    dec: &DecoderSet,
    key: &KeyBundle,
) -> Result<Vec<Gaussian3D>, SceneError> {
    let (_, hid) = decode_all(&single(anchor), cam, dec, Some(key))?;
    Ok(hid.expect("key supplied"))
}

/// Original Gaussians for every anchor, plus hidden ones when a key is given.
pub fn decode_all(
    scene: &Scene,
    cam: &Camera,
    dec: &DecoderSet,
    key: Option<&KeyBundle>,
) -> Result<(Vec<Gaussian3D>, Option<Vec<Gaussian3D>>), SceneError> {
    scene.validate()?;
    dec.check_shapes()?;
    if dec.k != scene.k {
        return Err(SceneError::DecoderShape(scene.k));
    }
    if let Some(key) = key {
        key.verify()?;
        key.check_shapes()?;
        if key.k != scene.k {
            return Err(SceneError::DecoderShape(scene.k));
        }
    }
    if scene.is_empty() {
        return Ok((Vec::new(), key.map(|_| Vec::new())));
    }
    let mut tape = Tape::new();
    let anchors = AnchorVars::record(&mut tape, scene, false);
    let dv = dec.record(&mut tape, false);
    let input = decoder_input(&mut tape, &anchors, &dv.weights, &cam.center(), dec.distance_unit)?;
    let ori = original_on_tape(&mut tape, &anchors, input, &dv, scene.k)?;
    let originals = gaussians_from_tape(&tape, &ori)?;
    let hiddens = match key {
        Some(key) => {
            let kv = key.record(&mut tape, false);
            let hid = hidden_on_tape(&mut tape, &anchors, input, &kv, scene.k)?;
            Some(gaussians_from_tape(&tape, &hid)?)
        }
        None => None,
    };
    Ok((originals, hiddens))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::l1_loss;
    use crate::rasterizer::{render_on_tape, RenderConfig};
    use crate::testutil::{assert_grad_close, central_diff};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn camera() -> Camera {
        Camera::look_at(
            Vector3::new(0.4, -0.3, -4.0),
            Vector3::zeros(),
            Vector3::new(0.0, -1.0, 0.0),
            0.8,
            12,
            12,
        )
        .unwrap()
    }

    fn random_anchor(rng: &mut ChaCha8Rng, k: usize) -> AnchorPoint {
        let mut a = AnchorPoint::new(
            Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)),
            0.3,
            k,
            Origin::Ori,
            rng,
        );
        a.feature.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        a
    }

    fn random_scene(seed: u64, n: usize, k: usize) -> (Scene, DecoderSet, KeyBundle) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anchors = (0..n).map(|_| random_anchor(&mut rng, k)).collect();
        let mut dec = DecoderSet::new(k, &mut rng);
        // visible, mostly opaque splats so the renders carry gradient
        dec.opacity.b2.data_mut().iter_mut().for_each(|v| *v = 1.0);
        let mut key = KeyBundle::new(k, Some(5), &mut rng);
        key.opacity.b2.data_mut().iter_mut().for_each(|v| *v = 1.0);
        key.seal();
        (Scene { k, anchors }, dec, key)
    }

    #[test]
    fn zeroed_weight_net_blends_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_anchor(&mut rng, 3);
        let w = Mlp::zeros(VIEW_DIM, HIDDEN, 3);
        let (f, _, _) = blend_features(&a, &camera(), &w, 1.0).unwrap();
        let bank = FeatureBank::new(&a.feature);
        for i in 0..FEATURE_DIM {
            let want = (bank.full[i] + bank.half[i] + bank.quarter[i]) / 3.0;
            assert!((f[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_feature_is_a_blend_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut a = random_anchor(&mut rng, 3);
        a.feature = [0.7; FEATURE_DIM];
        let w = Mlp::new(VIEW_DIM, HIDDEN, 3, &mut rng);
        let (f, _, _) = blend_features(&a, &camera(), &w, 1.0).unwrap();
        assert!(f.iter().all(|v| (v - 0.7).abs() < 1e-14));
    }

    #[test]
    fn view_direction_is_unit_and_coincident_camera_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Mlp::new(VIEW_DIM, HIDDEN, 3, &mut rng);
        for _ in 0..20 {
            let a = random_anchor(&mut rng, 2);
            let (_, dist, dir) = blend_features(&a, &camera(), &w, 1.0).unwrap();
            assert!((dir.norm() - 1.0).abs() < 1e-12);
            assert!((dist - (a.position - camera().center()).norm()).abs() < 1e-12);
        }
        let mut a = random_anchor(&mut rng, 2);
        a.position = camera().center();
        assert_eq!(blend_features(&a, &camera(), &w, 1.0).unwrap_err(), SceneError::CoincidentCamera(0));
    }

    #[test]
    fn tape_blend_matches_direct_blend() {
        let (scene, dec, _) = random_scene(4, 6, 2);
        let cam = camera();
        let mut tape = Tape::new();
        let av = AnchorVars::record(&mut tape, &scene, false);
        let dv = dec.record(&mut tape, false);
        let input = decoder_input(&mut tape, &av, &dv.weights, &cam.center(), dec.distance_unit).unwrap();
        let t = tape.value(input);
        for (i, a) in scene.anchors.iter().enumerate() {
            let (f, dist, dir) = blend_features(a, &cam, &dec.weights, dec.distance_unit).unwrap();
            let row = t.row(i);
            for j in 0..FEATURE_DIM {
                assert!((row[j] - f[j]).abs() < 1e-14);
            }
            assert_eq!(row[FEATURE_DIM], dist);
            assert!((Vector3::from_column_slice(&row[FEATURE_DIM + 1..]) - dir).norm() < 1e-15);
        }
    }

    #[test]
    fn original_means_follow_scaled_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dec = DecoderSet::new(3, &mut rng);
        let mut a = random_anchor(&mut rng, 3);
        a.offsets = vec![Vector3::zeros(); 3];
        for g in derive_original(&a, &camera(), &dec).unwrap() {
            assert_eq!(g.mean, a.position);
        }
        a.offsets[1] = Vector3::new(1.0, 0.0, 0.0);
        a.scaling_raw = Vector3::new(2.0f64.ln(), 0.0, 0.0);
        let gs = derive_original(&a, &camera(), &dec).unwrap();
        assert!((gs[1].mean - (a.position + Vector3::new(2.0, 0.0, 0.0))).norm() < 1e-15);
    }

    #[test]
    fn decoded_attributes_are_in_range() {
        let (scene, dec, key) = random_scene(6, 5, 4);
        let (ori, hid) = decode_all(&scene, &camera(), &dec, Some(&key)).unwrap();
        for g in ori.iter().chain(hid.as_ref().unwrap()) {
            assert!(g.color.iter().all(|c| (0.0..=1.0).contains(c)));
            assert!((-1.0..=1.0).contains(&g.opacity));
            let qn = g.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((qn - 1.0).abs() < 1e-12);
            assert!(g.scale.iter().all(|s| *s > 0.0));
        }
    }

    #[test]
    fn zero_offset_net_puts_hidden_means_on_the_anchor() {
        let (scene, dec, mut key) = random_scene(7, 3, 4);
        key.offset = key.offset.clone().with_zero_output();
        key.seal();
        let (_, hid) = decode_all(&scene, &camera(), &dec, Some(&key)).unwrap();
        for (i, g) in hid.unwrap().iter().enumerate() {
            assert_eq!(g.mean, scene.anchors[i / 4].position);
        }
    }

    #[test]
    fn hidden_offsets_depend_on_the_view() {
        let (scene, dec, key) = random_scene(8, 1, 3);
        let other = Camera::look_at(
            Vector3::new(3.0, 0.5, -2.0),
            Vector3::zeros(),
            Vector3::new(0.0, -1.0, 0.0),
            0.8,
            12,
            12,
        )
        .unwrap();
        let a = derive_hidden(&scene.anchors[0], &camera(), &dec, &key).unwrap();
        let b = derive_hidden(&scene.anchors[0], &other, &dec, &key).unwrap();
        assert_ne!(a[0].mean, b[0].mean);
    }

    #[test]
    fn corrupt_key_is_rejected() {
        let (scene, dec, mut key) = random_scene(9, 2, 2);
        key.color.w1.data_mut()[0] += 1e-9;
        assert!(matches!(
            decode_all(&scene, &camera(), &dec, Some(&key)),
            Err(SceneError::KeyIntegrity { .. })
        ));
        key.seal();
        assert!(decode_all(&scene, &camera(), &dec, Some(&key)).is_ok());
    }

    #[test]
    fn decode_counts_and_key_independence() {
        let (scene, dec, key) = random_scene(10, 3, 10);
        let (without, none) = decode_all(&scene, &camera(), &dec, None).unwrap();
        assert!(none.is_none());
        assert_eq!(without.len(), 30);
        let (with, hid) = decode_all(&scene, &camera(), &dec, Some(&key)).unwrap();
        assert_eq!(with, without);
        assert_eq!(hid.unwrap().len(), 30);

        let empty = Scene::new(10);
        let (o, h) = decode_all(&empty, &camera(), &dec, Some(&key)).unwrap();
        assert!(o.is_empty() && h.unwrap().is_empty());
    }

    #[test]
    fn offset_count_mismatch_is_rejected() {
        let (mut scene, dec, _) = random_scene(11, 2, 3);
        scene.anchors[1].offsets.pop();
        assert_eq!(
            decode_all(&scene, &camera(), &dec, None).unwrap_err(),
            SceneError::OffsetCount { index: 1, got: 2, k: 3 }
        );
    }

    fn exact() -> RenderConfig {
        RenderConfig {
            background: [0.2, 0.1, 0.3],
            min_transmittance: 0.0,
            min_contribution: 1e-30,
            ..RenderConfig::default()
        }
    }

    fn target(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![12, 12, 3], (0..432).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    /// Render loss of the original stream as a function of the offsets.
    fn original_loss(scene: &Scene, dec: &DecoderSet, tgt: &Tensor) -> f64 {
        let mut tape = Tape::new();
        let av = AnchorVars::record(&mut tape, scene, false);
        let dv = dec.record(&mut tape, false);
        let input = decoder_input(&mut tape, &av, &dv.weights, &camera().center(), dec.distance_unit).unwrap();
        let gv = original_on_tape(&mut tape, &av, input, &dv, scene.k).unwrap();
        let (img, _) = render_on_tape(&mut tape, &gv, &camera(), &exact()).unwrap();
        let t = tape.constant(tgt.clone());
        let d = tape.sub(img, t).unwrap();
        let d = tape.mul(d, d).unwrap();
        let l = tape.mean(d);
        tape.value(l).data()[0]
    }

    #[test]
    fn offset_gradients_match_finite_differences_through_render() {
        let tgt = target(12);
        for seed in 0..3 {
            let (scene, dec, _) = random_scene(100 + seed, 3, 2);
            let mut tape = Tape::new();
            let av = AnchorVars::record(&mut tape, &scene, true);
            let dv = dec.record(&mut tape, true);
            let input = decoder_input(&mut tape, &av, &dv.weights, &camera().center(), dec.distance_unit).unwrap();
            let gv = original_on_tape(&mut tape, &av, input, &dv, scene.k).unwrap();
            let (img, _) = render_on_tape(&mut tape, &gv, &camera(), &exact()).unwrap();
            let t = tape.constant(tgt.clone());
            let d = tape.sub(img, t).unwrap();
            let d = tape.mul(d, d).unwrap();
            let l = tape.mean(d);
            let g = tape.backward(l).unwrap();

            let off = scene.tensors()[3].clone();
            let analytic = g.get(av.offsets).unwrap();
            for i in 0..off.len() {
                let mut f = |x: &[f64]| {
                    let mut s = scene.clone();
                    let mut t = s.tensors();
                    t[3] = Tensor::new(off.shape().to_vec(), x.to_vec()).unwrap();
                    s.set_from_tensors(&t);
                    original_loss(&s, &dec, &tgt)
                };
                let num = central_diff(off.data(), i, 1e-6, &mut f);
                assert_grad_close(analytic.data()[i], num, 1e-4, "offset");
            }
        }
    }

    fn hidden_loss(scene: &Scene, dec: &DecoderSet, key: &KeyBundle, tgt: &Tensor) -> f64 {
        let mut tape = Tape::new();
        let av = AnchorVars::record(&mut tape, scene, false);
        let dv = dec.record(&mut tape, false);
        let kv = key.record(&mut tape, false);
        let input = decoder_input(&mut tape, &av, &dv.weights, &camera().center(), dec.distance_unit).unwrap();
        let gv = hidden_on_tape(&mut tape, &av, input, &kv, scene.k).unwrap();
        let (img, _) = render_on_tape(&mut tape, &gv, &camera(), &exact()).unwrap();
        let t = tape.constant(tgt.clone());
        let l = l1_loss(&mut tape, img, t).unwrap();
        tape.value(l).data()[0]
    }

    #[test]
    fn private_offset_weights_match_finite_differences() {
        let tgt = target(13);
        let (scene, dec, mut key) = random_scene(14, 3, 2);
        // shrink the offsets so the hidden splats stay in frame
        key.offset.w2.data_mut().iter_mut().for_each(|v| *v *= 0.3);
        let mut tape = Tape::new();
        let av = AnchorVars::record(&mut tape, &scene, false);
        let dv = dec.record(&mut tape, false);
        let kv = key.record(&mut tape, true);
        let input = decoder_input(&mut tape, &av, &dv.weights, &camera().center(), dec.distance_unit).unwrap();
        let gv = hidden_on_tape(&mut tape, &av, input, &kv, scene.k).unwrap();
        let (img, _) = render_on_tape(&mut tape, &gv, &camera(), &exact()).unwrap();
        let t = tape.constant(tgt.clone());
        let l = l1_loss(&mut tape, img, t).unwrap();
        let g = tape.backward(l).unwrap();

        for (which, var) in [(0usize, kv.offset.w1), (2, kv.offset.w2), (3, kv.offset.b2)] {
            let base = key.offset.params()[which].clone();
            let analytic = g.get(var).unwrap();
            for i in (0..base.len()).step_by(5) {
                let mut f = |x: &[f64]| {
                    let mut k2 = key.clone();
                    *k2.offset.params_mut()[which] = Tensor::new(base.shape().to_vec(), x.to_vec()).unwrap();
                    hidden_loss(&scene, &dec, &k2, &tgt)
                };
                let num = central_diff(base.data(), i, 1e-5, &mut f);
                assert_grad_close(analytic.data()[i], num, 1e-4, "F_o weight");
            }
        }
    }

    #[test]
    fn decoder_and_anchor_gradients_match_finite_differences() {
        let tgt = target(15);
        let (scene, dec, _) = random_scene(16, 2, 2);
        let mut tape = Tape::new();
        let av = AnchorVars::record(&mut tape, &scene, true);
        let dv = dec.record(&mut tape, true);
        let input = decoder_input(&mut tape, &av, &dv.weights, &camera().center(), dec.distance_unit).unwrap();
        let gv = original_on_tape(&mut tape, &av, input, &dv, scene.k).unwrap();
        let (img, _) = render_on_tape(&mut tape, &gv, &camera(), &exact()).unwrap();
        let t = tape.constant(tgt.clone());
        let d = tape.sub(img, t).unwrap();
        let d = tape.mul(d, d).unwrap();
        let l = tape.mean(d);
        let g = tape.backward(l).unwrap();

        // anchor positions, features and scaling
        for field in [0usize, 1, 2] {
            let base = scene.tensors()[field].clone();
            let analytic = g.get(av.all()[field]).unwrap();
            for i in (0..base.len()).step_by(3) {
                let mut f = |x: &[f64]| {
                    let mut s = scene.clone();
                    let mut t = s.tensors();
                    t[field] = Tensor::new(base.shape().to_vec(), x.to_vec()).unwrap();
                    s.set_from_tensors(&t);
                    original_loss(&s, &dec, &tgt)
                };
                let num = central_diff(base.data(), i, 1e-5, &mut f);
                assert_grad_close(analytic.data()[i], num, 1e-4, "anchor field");
            }
        }
        // first-layer weights of the blend net and every head
        for (m, vars) in dec.mlps().iter().zip(dv.all()) {
            let base = m.w1.clone();
            let analytic = g.get(vars.w1).unwrap();
            for i in (0..base.len()).step_by(37) {
                let mut f = |x: &[f64]| {
                    let mut d2 = dec.clone();
                    let target_mlp = d2
                        .mlps_mut()
                        .into_iter()
                        .find(|mm| mm.w1.shape() == base.shape() && mm.w1.data() == base.data())
                        .unwrap();
                    target_mlp.w1 = Tensor::new(base.shape().to_vec(), x.to_vec()).unwrap();
                    original_loss(&scene, &d2, &tgt)
                };
                let num = central_diff(base.data(), i, 1e-5, &mut f);
                assert_grad_close(analytic.data()[i], num, 1e-4, "decoder w1");
            }
        }
    }
}
