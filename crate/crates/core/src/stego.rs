//! Hiding modes and the training loop that fits both streams at once, plus
//! the keyed decode paths for hidden views and bit messages.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{sigmoid, AutodiffError, CustomOp, Gradients, Tape, Tensor, Var};
use crate::densify::{rdo_step, DensifyConfig, DensifyError, GradientLedger, Observation, RdoState};
use crate::geometry::Camera;
use crate::image::Image;
use crate::io::quantize;
use crate::losses::{total_loss, LossError, LossWeights, StreamInputs};
use crate::nn::Mlp;
use crate::rasterizer::{render, render_on_tape, GaussianVars, RenderConfig, RenderError, RenderHandle};
use crate::scene::{
    decode_all, decoder_input, hidden_on_tape, original_on_tape, AnchorVars, DecoderSet, KeyBundle, Origin, Scene,
    SceneError, FEATURE_DIM,
};

#[derive(Debug, Error)]
pub enum StegoError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Densify(#[from] DensifyError),
    #[error("invalid task: {0}")]
    Task(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("key has no bit head")]
    NoBitHead,
    #[error("cannot decode bits from an empty scene")]
    EmptyScene,
    #[error("loss diverged at iteration {iteration} with {anchors} anchors (last finite: {last:?})")]
    Diverged {
        iteration: usize,
        anchors: usize,
        last: Option<Box<MetricsRecord>>,
    },
}

/// A bit string, at least one bit long.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BitMessage {
    bits: Vec<bool>,
}

impl BitMessage {
    pub fn new(bits: Vec<bool>) -> Result<Self, StegoError> {
        if bits.is_empty() {
            return Err(StegoError::Task("bit message must hold at least one bit".into()));
        }
        Ok(Self { bits })
    }

    pub fn random(n: usize, rng: &mut impl Rng) -> Result<Self, StegoError> {
        Self::new((0..n).map(|_| rng.random_bool(0.5)).collect())
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Fraction of positions that agree; 0 when lengths differ.
    pub fn accuracy(&self, other: &BitMessage) -> f64 {
        if self.len() != other.len() {
            return 0.0;
        }
        let same = self.bits.iter().zip(&other.bits).filter(|(a, b)| a == b).count();
        same as f64 / self.len() as f64
    }
}

impl fmt::Display for BitMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.bits {
            f.write_str(if *b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for BitMessage {
    type Err = StegoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(StegoError::Task(format!("bit strings use 0 and 1, found {other:?}"))),
            })
            .collect::<Result<_, _>>()?;
        Self::new(bits)
    }
}

impl TryFrom<String> for BitMessage {
    type Error = StegoError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<BitMessage> for String {
    fn from(m: BitMessage) -> Self {
        m.to_string()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum HidingTask {
    /// One hidden target image per training camera: the object alone for
    /// object-level hiding, the composited view for scene-level hiding.
    Object3d { targets: Vec<Image> },
    /// A single image shown only at camera `view`.
    ImageSingleView { view: usize, image: Image },
    Bits { message: BitMessage },
}

impl HidingTask {
    pub fn validate(&self, cameras: &[Camera]) -> Result<(), StegoError> {
        let bad = |m: String| Err(StegoError::Task(m));
        let dims = |img: &Image, cam: &Camera| img.width == cam.width && img.height == cam.height;
        match self {
            HidingTask::Object3d { targets } => {
                if targets.len() != cameras.len() {
                    return bad(format!("{} hidden targets for {} cameras", targets.len(), cameras.len()));
                }
                if let Some(i) = (0..targets.len()).find(|&i| !dims(&targets[i], &cameras[i])) {
                    return bad(format!("hidden target {i} does not match its camera"));
                }
            }
            HidingTask::ImageSingleView { view, image } => {
                let Some(cam) = cameras.get(*view) else {
                    return bad(format!("designated view {view} out of range"));
                };
                if !dims(image, cam) {
                    return bad("hidden image does not match the designated camera".into());
                }
            }
            HidingTask::Bits { message } => {
                if message.is_empty() {
                    return bad("empty bit message".into());
                }
            }
        }
        Ok(())
    }

    pub fn n_bits(&self) -> Option<usize> {
        match self {
            HidingTask::Bits { message } => Some(message.len()),
            _ => None,
        }
    }

    /// The hidden target for camera `view`, if this iteration has one.
    pub fn hidden_target(&self, view: usize) -> Option<&Image> {
        match self {
            HidingTask::Object3d { targets } => targets.get(view),
            HidingTask::ImageSingleView { view: v, image } if *v == view => Some(image),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub position: f64,
    pub feature: f64,
    pub scaling: f64,
    pub offset: f64,
    /// Public decoders.
    pub mlp: f64,
    /// Private decoders.
    pub key_mlp: f64,
    /// Every rate decays exponentially to this fraction of its start.
    pub final_ratio: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 0.0,
            feature: 7.5e-3,
            scaling: 7e-3,
            offset: 1e-2,
            mlp: 4e-3,
            key_mlp: 1e-3,
            final_ratio: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub seed: u64,
    pub lr: LearningRates,
    pub loss: LossWeights,
    pub densify: DensifyConfig,
    /// Splat footprint cutoff used while training.
    pub min_contribution: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            seed: 0,
            lr: LearningRates::default(),
            loss: LossWeights::default(),
            densify: DensifyConfig::default(),
            min_contribution: 1.0 / 255.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), StegoError> {
        self.loss.validate()?;
        self.densify.validate()?;
        let lr = &self.lr;
        let rates = [lr.position, lr.feature, lr.scaling, lr.offset, lr.mlp, lr.key_mlp];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(StegoError::Config("learning rates must be finite and non-negative".into()));
        }
        if !(lr.final_ratio > 0.0 && lr.final_ratio <= 1.0) {
            return Err(StegoError::Config("final_ratio must lie in (0, 1]".into()));
        }
        if self.iterations == 0 {
            return Err(StegoError::Config("iterations must be positive".into()));
        }
        if !(self.min_contribution > 0.0 && self.min_contribution < 1.0) {
            return Err(StegoError::Config("min_contribution must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn render_config(&self, background: [f64; 3]) -> RenderConfig {
        RenderConfig {
            min_contribution: self.min_contribution,
            ..RenderConfig::with_background(background)
        }
    }
}

/// One line of the metrics trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub view: usize,
    pub loss_total: f64,
    pub loss_ori: f64,
    pub loss_hid: Option<f64>,
    pub loss_bits: Option<f64>,
    pub psnr_ori: f64,
    pub psnr_hid: Option<f64>,
    pub anchors_ori: usize,
    pub anchors_hid: usize,
    pub grown_ori: usize,
    pub grown_hid: usize,
    pub pruned: usize,
}

/// Line-delimited JSON, one record per line.
pub fn trace_jsonl(trace: &[MetricsRecord]) -> String {
    let mut out = String::new();
    for r in trace {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub struct TrainOutput {
    /// Public anchors, rounded to the container's f32 precision.
    pub scene: Scene,
    pub decoders: DecoderSet,
    pub key: KeyBundle,
    pub trace: Vec<MetricsRecord>,
}

/// Adam moments for one flat parameter.
#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn sized(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// Keeps the rows listed in `kept` (row width `w`) and zero-pads to `rows`.
    fn remap(&mut self, kept: &[usize], w: usize, rows: usize) {
        let pick = |src: &[f64]| {
            let mut out: Vec<f64> = kept.iter().flat_map(|&r| src[r * w..(r + 1) * w].iter().copied()).collect();
            out.resize(rows * w, 0.0);
            out
        };
        self.m = pick(&self.m);
        self.v = pick(&self.v);
    }
}

struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
}

impl Adam {
    fn update(&self, param: &mut [f64], grad: &[f64], mom: &mut Moments, lr: f64) {
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..param.len() {
            let g = grad[i];
            mom.m[i] = self.beta1 * mom.m[i] + (1.0 - self.beta1) * g;
            mom.v[i] = self.beta2 * mom.v[i] + (1.0 - self.beta2) * g * g;
            let mh = mom.m[i] / c1;
            let vh = mom.v[i] / c2;
            param[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

fn mlp_moments(mlps: &[&Mlp]) -> Vec<Moments> {
    mlps.iter().flat_map(|m| m.params().map(|p| Moments::sized(p.len()))).collect()
}

/// Mean binary cross-entropy of logits against fixed targets, broadcast over
/// rows: `z [n,b]`, targets of length `b`.
struct BceOp {
    targets: Vec<f64>,
}

impl CustomOp for BceOp {
    fn name(&self) -> &'static str {
        "bce"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>> {
        let z = inputs[0];
        let b = self.targets.len();
        let scale = grad_out.data()[0] / z.len() as f64;
        let g = z
            .data()
            .iter()
            .enumerate()
            .map(|(i, &zi)| (sigmoid(zi) - self.targets[i % b]) * scale)
            .collect();
        vec![Some(Tensor::new(z.shape().to_vec(), g).expect("sized"))]
    }
}

fn bce_value(z: &Tensor, targets: &[f64]) -> f64 {
    let b = targets.len();
    let sum: f64 = z
        .data()
        .iter()
        .enumerate()
        .map(|(i, &zi)| zi.max(0.0) - zi * targets[i % b] + (-zi.abs()).exp().ln_1p())
        .sum();
    sum / z.len() as f64
}

/// Records `mean BCE(logits, bits)`; `logits` is `[n, n_bits]`.
pub fn bce_loss(tape: &mut Tape, logits: Var, bits: &BitMessage) -> Result<Var, StegoError> {
    let z = tape.value(logits);
    let b = bits.len();
    if z.dims2().is_none_or(|(_, c)| c != b) {
        return Err(StegoError::Task(format!("logits {:?} do not match {b} bits", z.shape())));
    }
    let targets: Vec<f64> = bits.bits().iter().map(|&x| if x { 1.0 } else { 0.0 }).collect();
    let value = Tensor::scalar(bce_value(z, &targets));
    Ok(tape.custom(&[logits], value, Box::new(BceOp { targets })))
}

/// Per-anchor bit logits from the private bit head, `[n, n_bits]`.
pub fn embed_bits_head(features: &Tensor, key: &KeyBundle) -> Result<Tensor, StegoError> {
    let head = key.bits.as_ref().ok_or(StegoError::NoBitHead)?;
    if features.dims2().is_none_or(|(_, c)| c != FEATURE_DIM) {
        return Err(StegoError::Task(format!("features must be [n,{FEATURE_DIM}], got {:?}", features.shape())));
    }
    Ok(head.forward(features)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodedBits {
    pub message: BitMessage,
    /// Smallest margin `|mean − 0.5|·2` over bits.
    pub confidence: f64,
    pub means: Vec<f64>,
}

/// Averages the per-anchor bit probabilities; a mean of exactly 0.5 reads as 0.
pub fn decode_bits(scene: &Scene, key: &KeyBundle) -> Result<DecodedBits, StegoError> {
    key.verify()?;
    if scene.is_empty() {
        return Err(StegoError::EmptyScene);
    }
    let [_, features, _, _] = scene.tensors();
    let logits = embed_bits_head(&features, key)?;
    let (n, b) = logits.dims2().expect("2-D");
    let mut means = vec![0.0; b];
    for r in 0..n {
        for (j, m) in means.iter_mut().enumerate() {
            *m += sigmoid(logits.at(r, j));
        }
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    let bits = means.iter().map(|&m| m > 0.5).collect();
    let confidence = means.iter().map(|m| (m - 0.5).abs() * 2.0).fold(f64::INFINITY, f64::min);
    Ok(DecodedBits {
        message: BitMessage::new(bits)?,
        confidence,
        means,
    })
}

pub fn render_original(scene: &Scene, dec: &DecoderSet, cam: &Camera, cfg: &RenderConfig) -> Result<Image, StegoError> {
    let (ori, _) = decode_all(scene, cam, dec, None)?;
    Ok(render(&ori, cam, cfg)?.image)
}

/// Renders the hidden stream at `cam`. Only possible with a valid key.
pub fn decode_hidden_view(
    scene: &Scene,
    dec: &DecoderSet,
    key: &KeyBundle,
    cam: &Camera,
    cfg: &RenderConfig,
) -> Result<Image, StegoError> {
    let (_, hid) = decode_all(scene, cam, dec, Some(key))?;
    Ok(render(&hid.expect("key supplied"), cam, cfg)?.image)
}

/// Per-view PSNR of both streams against their targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub psnr_ori: Vec<f64>,
    /// `(view, psnr)` for every view with a hidden target.
    pub psnr_hid: Vec<(usize, f64)>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl Evaluation {
    pub fn mean_ori(&self) -> f64 {
        mean(self.psnr_ori.iter().copied()).unwrap_or(f64::NAN)
    }

    pub fn mean_hid(&self) -> Option<f64> {
        mean(self.psnr_hid.iter().map(|(_, p)| *p))
    }
}

pub fn evaluate(
    scene: &Scene,
    dec: &DecoderSet,
    key: Option<&KeyBundle>,
    cameras: &[Camera],
    originals: &[Image],
    task: &HidingTask,
    cfg: &RenderConfig,
) -> Result<Evaluation, StegoError> {
    let mut psnr_ori = Vec::new();
    let mut psnr_hid = Vec::new();
    for (i, cam) in cameras.iter().enumerate() {
        psnr_ori.push(render_original(scene, dec, cam, cfg)?.psnr(&originals[i]));
        if let (Some(key), Some(target)) = (key, task.hidden_target(i)) {
            psnr_hid.push((i, decode_hidden_view(scene, dec, key, cam, cfg)?.psnr(target)));
        }
    }
    Ok(Evaluation { psnr_ori, psnr_hid })
}

/// Screen-space gradient norms in NDC units, one per Gaussian.
fn ndc_norms(handle: &RenderHandle, cam: &Camera) -> Vec<f64> {
    let (sx, sy) = (cam.width as f64 / 2.0, cam.height as f64 / 2.0);
    match handle.gaussian_grads() {
        Some(g) => g.mean2d.iter().map(|d| (d.x * sx).hypot(d.y * sy)).collect(),
        None => vec![0.0; handle.visible_mask().len()],
    }
}

fn positions_of(tape: &Tape, mean: Var) -> Vec<Vector3<f64>> {
    tape.value(mean).data().chunks(3).map(Vector3::from_column_slice).collect()
}

struct StreamRender {
    vars: GaussianVars,
    image: Var,
    handle: RenderHandle,
}

fn record_stream(
    tape: &mut Tape,
    vars: GaussianVars,
    cam: &Camera,
    cfg: &RenderConfig,
) -> Result<StreamRender, StegoError> {
    let (image, handle) = render_on_tape(tape, &vars, cam, cfg)?;
    Ok(StreamRender { vars, image, handle })
}

fn observe(
    ledger: &mut GradientLedger,
    stream: Origin,
    tape: &Tape,
    sr: &StreamRender,
    cam: &Camera,
    iteration: usize,
    cfg: &DensifyConfig,
) -> Result<(), StegoError> {
    let norms = ndc_norms(&sr.handle, cam);
    let visible = sr.handle.visible_mask();
    let positions = positions_of(tape, sr.vars.mean);
    let opacities = tape.value(sr.vars.opacity).data();
    let obs = Observation {
        grad_norms: &norms,
        visible: &visible,
        positions: &positions,
        opacities,
    };
    ledger.accumulate(stream, &obs, iteration, cfg)?;
    Ok(())
}

fn learning_rate(base: f64, ratio: f64, iteration: usize, total: usize) -> f64 {
    base * ratio.powf(iteration as f64 / total.max(1) as f64)
}

fn apply_mlp_grads(
    adam: &Adam,
    mlps: Vec<&mut Mlp>,
    vars: &[[Var; 4]],
    grads: &Gradients,
    moments: &mut [Moments],
    lr: f64,
) {
    for (mi, (mlp, v)) in mlps.into_iter().zip(vars).enumerate() {
        for (pi, (param, var)) in mlp.params_mut().into_iter().zip(v).enumerate() {
            if let Some(g) = grads.get(*var) {
                adam.update(param.data_mut(), g.data(), &mut moments[mi * 4 + pi], lr);
            }
        }
    }
}

/// Fits the public scene and decoders to `originals` and the private key to
/// the hidden task, with region-aware densification between steps.
/// Mean distance from the cameras to the anchor centroid.
pub fn distance_unit(scene: &Scene, cameras: &[Camera]) -> f64 {
    let n = scene.len().max(1) as f64;
    let centroid = scene.anchors.iter().fold(Vector3::zeros(), |acc, a| acc + a.position) / n;
    let unit = cameras.iter().map(|c| (c.center() - centroid).norm()).sum::<f64>() / cameras.len().max(1) as f64;
    if unit > 0.0 { unit } else { 1.0 }
}

pub fn train(
    init: Scene,
    cameras: &[Camera],
    originals: &[Image],
    task: &HidingTask,
    cfg: &TrainConfig,
    background: [f64; 3],
) -> Result<TrainOutput, StegoError> {
    cfg.validate()?;
    init.validate()?;
    if cameras.is_empty() || cameras.len() != originals.len() {
        return Err(StegoError::Task(format!("{} cameras but {} original images", cameras.len(), originals.len())));
    }
    task.validate(cameras)?;
    let rcfg = cfg.render_config(background);
    // Anchors grown late would leave training unconverged, so the final fifth never refines.
    let densify = DensifyConfig {
        densify_until: Some(cfg.densify.densify_until.unwrap_or(usize::MAX).min(cfg.iterations - cfg.iterations / 5)),
        ..cfg.densify.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut scene = init;
    let k = scene.k;
    let mut dec = DecoderSet::new(k, &mut rng);
    dec.distance_unit = distance_unit(&scene, cameras);
    let mut key = KeyBundle::new(k, task.n_bits(), &mut rng);
    let mut ledger = GradientLedger::new(scene.len(), k);
    let mut rdo = RdoState::default();
    let adam = &mut Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-15,
        t: 0,
    };
    let widths = [3, FEATURE_DIM, 3, 3 * k];
    let mut anchor_moments: Vec<Moments> = widths.iter().map(|w| Moments::sized(w * scene.len())).collect();
    let mut dec_moments = mlp_moments(&dec.mlps());
    let key_mlps: Vec<&Mlp> = key.mlps().into_iter().chain(key.bits.as_ref()).collect();
    let mut key_moments = mlp_moments(&key_mlps);
    let targets_ori: Vec<Tensor> = originals.iter().map(Image::to_tensor).collect();
    let hidden_targets: Vec<Option<Tensor>> = (0..cameras.len())
        .map(|i| task.hidden_target(i).map(Image::to_tensor))
        .collect();
    let mut order: Vec<usize> = Vec::new();
    let mut trace = Vec::with_capacity(cfg.iterations);

    for iteration in 1..=cfg.iterations {
        if order.is_empty() {
            order = (0..cameras.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let view = order.pop().expect("refilled");
        let cam = &cameras[view];
        let mut tape = Tape::new();
        let av = AnchorVars::record(&mut tape, &scene, true);
        let dv = dec.record(&mut tape, true);
        let kv = key.record(&mut tape, true);
        let input = decoder_input(&mut tape, &av, &dv.weights, &cam.center(), dec.distance_unit)?;
        let ori_vars = original_on_tape(&mut tape, &av, input, &dv, k)?;
        let ori = record_stream(&mut tape, ori_vars, cam, &rcfg)?;
        let hid = match &hidden_targets[view] {
            Some(_) => {
                let vars = hidden_on_tape(&mut tape, &av, input, &kv, k)?;
                Some(record_stream(&mut tape, vars, cam, &rcfg)?)
            }
            None => None,
        };
        let target_o = tape.constant(targets_ori[view].clone());
        let ori_in = StreamInputs {
            render: ori.image,
            target: target_o,
            scales: ori.vars.scale,
        };
        let hid_in = match (&hid, &hidden_targets[view]) {
            (Some(h), Some(t)) => Some(StreamInputs {
                render: h.image,
                target: tape.constant(t.clone()),
                scales: h.vars.scale,
            }),
            _ => None,
        };
        let terms = total_loss(&mut tape, ori_in, hid_in, &cfg.loss)?;
        let mut root = terms.total;
        let mut loss_bits = None;
        if let (HidingTask::Bits { message }, Some(bv)) = (task, &kv.bits) {
            let logits = Mlp::apply(&mut tape, bv, av.features)?;
            let bce = bce_loss(&mut tape, logits, message)?;
            loss_bits = Some(tape.value(bce).data()[0]);
            let weighted = tape.scale(bce, cfg.loss.bit_weight);
            root = tape.add(root, weighted)?;
        }
        let loss_total = tape.value(root).data()[0];
        let scalar = |v: Var| tape.value(v).data()[0];
        let record = MetricsRecord {
            iteration,
            view,
            loss_total,
            loss_ori: scalar(terms.ori),
            loss_hid: terms.hid.map(scalar),
            loss_bits,
            psnr_ori: ori.handle.image().psnr(&originals[view]),
            psnr_hid: hid.as_ref().map(|h| h.handle.image().to_tensor()).map(|t| {
                let target = hidden_targets[view].as_ref().expect("hidden target");
                psnr_tensors(&t, target)
            }),
            anchors_ori: scene.count(Origin::Ori),
            anchors_hid: scene.count(Origin::Hid),
            grown_ori: 0,
            grown_hid: 0,
            pruned: 0,
        };
        if !loss_total.is_finite() {
            return Err(StegoError::Diverged {
                iteration,
                anchors: scene.len(),
                last: trace.last().cloned().map(Box::new),
            });
        }
        let grads = tape.backward(root)?;

        adam.t += 1;
        let lr = |base: f64| learning_rate(base, cfg.lr.final_ratio, iteration - 1, cfg.iterations);
        let mut tensors = scene.tensors();
        let group_lr = [cfg.lr.position, cfg.lr.feature, cfg.lr.scaling, cfg.lr.offset];
        for (g, var) in av.all().into_iter().enumerate() {
            if let Some(grad) = grads.get(var) {
                if group_lr[g] > 0.0 {
                    adam.update(tensors[g].data_mut(), grad.data(), &mut anchor_moments[g], lr(group_lr[g]));
                }
            }
        }
        scene.set_from_tensors(&tensors);
        let dec_vars: Vec<[Var; 4]> = dv.all().iter().map(|m| m.as_array()).collect();
        apply_mlp_grads(adam, dec.mlps_mut().into(), &dec_vars, &grads, &mut dec_moments, lr(cfg.lr.mlp));
        let key_vars: Vec<[Var; 4]> = kv.all().iter().map(|m| m.as_array()).collect();
        apply_mlp_grads(adam, key.mlps_mut(), &key_vars, &grads, &mut key_moments, lr(cfg.lr.key_mlp));

        observe(&mut ledger, Origin::Ori, &tape, &ori, cam, iteration, &cfg.densify)?;
        if let Some(h) = &hid {
            observe(&mut ledger, Origin::Hid, &tape, h, cam, iteration, &cfg.densify)?;
        }
        let report = rdo_step(&mut scene, &mut ledger, &mut rdo, &densify, iteration, &mut rng);
        if report.refined {
            for (m, w) in anchor_moments.iter_mut().zip(widths) {
                m.remap(&report.kept, w, scene.len());
            }
        }
        trace.push(MetricsRecord {
            grown_ori: report.grown_ori.len(),
            grown_hid: report.grown_hid.len(),
            pruned: report.pruned.len(),
            ..record
        });
    }
    quantize(&mut scene);
    key.seal();
    Ok(TrainOutput {
        scene,
        decoders: dec,
        key,
        trace,
    })
}

fn psnr_tensors(a: &Tensor, b: &Tensor) -> f64 {
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    -10.0 * mse.log10()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_grad_close, central_diff};

    #[test]
    fn bit_strings_parse_and_print() {
        let m: BitMessage = "1011".parse().unwrap();
        assert_eq!(m.bits(), &[true, false, true, true]);
        assert_eq!(m.to_string(), "1011");
        assert!("".parse::<BitMessage>().is_err());
        assert!("10x".parse::<BitMessage>().is_err());
        let other: BitMessage = "1001".parse().unwrap();
        assert_eq!(m.accuracy(&other), 0.75);
    }

    #[test]
    fn bce_matches_definition_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bits: BitMessage = "101".parse().unwrap();
        let z: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
        let zt = Tensor::matrix(2, 3, z.clone()).unwrap();
        let mut tape = Tape::new();
        let zv = tape.leaf(zt.clone(), true);
        let l = bce_loss(&mut tape, zv, &bits).unwrap();
        let y = [1.0, 0.0, 1.0];
        let expect: f64 = z
            .iter()
            .enumerate()
            .map(|(i, &zi)| {
                let p = sigmoid(zi);
                -(y[i % 3] * p.ln() + (1.0 - y[i % 3]) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 6.0;
        assert!((tape.value(l).data()[0] - expect).abs() < 1e-12);
        let g = tape.backward(l).unwrap().get(zv).unwrap().clone();
        let mut f = |x: &[f64]| {
            let t = Tensor::matrix(2, 3, x.to_vec()).unwrap();
            bce_value(&t, &y)
        };
        for i in 0..6 {
            let n = central_diff(&z, i, 1e-6, &mut f);
            assert_grad_close(g.data()[i], n, 1e-4, "bce");
        }
    }

    #[test]
    fn bce_gradient_reaches_bit_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = Mlp::new(FEATURE_DIM, 32, 3, &mut rng);
        let feats = Tensor::matrix(2, FEATURE_DIM, (0..64).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let bits: BitMessage = "011".parse().unwrap();
        let loss_of = |m: &Mlp| {
            let mut tape = Tape::new();
            let v = m.record(&mut tape, true);
            let x = tape.constant(feats.clone());
            let z = Mlp::apply(&mut tape, &v, x).unwrap();
            let l = bce_loss(&mut tape, z, &bits).unwrap();
            let out = tape.value(l).data()[0];
            let g = tape.backward(l).unwrap().get(v.w2).unwrap().clone();
            (out, g)
        };
        let (_, g) = loss_of(&head);
        let w2 = head.w2.data().to_vec();
        let mut f = |x: &[f64]| {
            let mut m = head.clone();
            m.w2.data_mut().copy_from_slice(x);
            loss_of(&m).0
        };
        for i in (0..w2.len()).step_by(7) {
            let n = central_diff(&w2, i, 1e-6, &mut f);
            assert_grad_close(g.data()[i], n, 1e-4, "bit head w2");
        }
    }

    fn one_anchor_scene(rng: &mut ChaCha8Rng) -> Scene {
        let mut s = Scene::new(2);
        let mut a = crate::scene::AnchorPoint::new(Vector3::zeros(), 0.1, 2, Origin::Ori, rng);
        a.feature.iter_mut().for_each(|f| *f = rng.random_range(-1.0..1.0));
        s.anchors.push(a);
        s
    }

    #[test]
    fn zero_head_reads_one_half_and_ties_resolve_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scene = one_anchor_scene(&mut rng);
        let key = KeyBundle::new(2, Some(4), &mut rng);
        let [_, f, _, _] = scene.tensors();
        let logits = embed_bits_head(&f, &key).unwrap();
        assert!(logits.data().iter().all(|&z| z == 0.0));
        let d = decode_bits(&scene, &key).unwrap();
        assert_eq!(d.message.to_string(), "0000");
        assert_eq!(d.confidence, 0.0);
        assert!(d.means.iter().all(|&m| m == 0.5));
    }

    #[test]
    fn bit_decoding_rejects_missing_head_and_empty_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let scene = one_anchor_scene(&mut rng);
        let plain = KeyBundle::new(2, None, &mut rng);
        assert!(matches!(decode_bits(&scene, &plain), Err(StegoError::NoBitHead)));
        let key = KeyBundle::new(2, Some(3), &mut rng);
        assert!(matches!(decode_bits(&Scene::new(2), &key), Err(StegoError::EmptyScene)));
    }

    #[test]
    fn bit_decoding_ignores_anchor_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut scene = Scene::new(2);
        for _ in 0..6 {
            scene.anchors.extend(one_anchor_scene(&mut rng).anchors);
        }
        let mut key = KeyBundle::new(2, Some(5), &mut rng);
        key.bits = Some(Mlp::new(FEATURE_DIM, 32, 5, &mut rng));
        key.seal();
        let a = decode_bits(&scene, &key).unwrap();
        scene.anchors.reverse();
        let b = decode_bits(&scene, &key).unwrap();
        assert_eq!(a.message, b.message);
        for (x, y) in a.means.iter().zip(&b.means) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_anchor_learns_101() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let scene = one_anchor_scene(&mut rng);
        let mut key = KeyBundle::new(2, Some(3), &mut rng);
        let bits: BitMessage = "101".parse().unwrap();
        let [_, f, _, _] = scene.tensors();
        let adam = Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            t: 0,
        };
        let mut adam = adam;
        let head = key.bits.as_mut().unwrap();
        let mut mom = mlp_moments(&[head]);
        for _ in 0..200 {
            let mut tape = Tape::new();
            let v = head.record(&mut tape, true);
            let x = tape.constant(f.clone());
            let z = Mlp::apply(&mut tape, &v, x).unwrap();
            let l = bce_loss(&mut tape, z, &bits).unwrap();
            let g = tape.backward(l).unwrap();
            adam.t += 1;
            apply_mlp_grads(&adam, vec![&mut *head], &[v.as_array()], &g, &mut mom, 1e-2);
        }
        key.seal();
        assert_eq!(decode_bits(&scene, &key).unwrap().message, bits);
    }

    #[test]
    fn moments_remap_keeps_rows_and_zero_pads() {
        let mut m = Moments {
            m: vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0],
            v: vec![4.0, 4.0, 5.0, 5.0, 6.0, 6.0],
        };
        m.remap(&[0, 2], 2, 4);
        assert_eq!(m.m, vec![1.0, 1.0, 3.0, 3.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(m.v, vec![4.0, 4.0, 6.0, 6.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn learning_rate_decays_to_the_final_ratio() {
        assert_eq!(learning_rate(1e-2, 0.1, 0, 100), 1e-2);
        assert!((learning_rate(1e-2, 0.1, 100, 100) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn task_validation() {
        let cams = crate::synthetic::cameras(&crate::synthetic::SyntheticSpec {
            cameras: 2,
            width: 16,
            height: 16,
            ..Default::default()
        })
        .unwrap();
        let img = Image::filled(16, 16, [0.0; 3]);
        let ok = HidingTask::ImageSingleView { view: 1, image: img.clone() };
        assert!(ok.validate(&cams).is_ok());
        assert!(HidingTask::ImageSingleView { view: 2, image: img.clone() }.validate(&cams).is_err());
        assert!(HidingTask::Object3d { targets: vec![img.clone()] }.validate(&cams).is_err());
        let wrong = Image::filled(8, 8, [0.0; 3]);
        assert!(HidingTask::Object3d { targets: vec![img, wrong] }.validate(&cams).is_err());
    }
}
