//! Differentiable software rasterizer: depth-sorted front-to-back alpha
//! blending of projected Gaussians, evaluated per pixel.
//!
//! Every pixel composites `C = Σ cᵢ σᵢ Πⱼ<ᵢ (1 − σⱼ) + T·background` with
//! `σᵢ = min(αᵢ G′ᵢ(p), max_alpha)`. A splat is only visited at pixels where
//! `αᵢ G′ᵢ(p) ≥ min_contribution`, and traversal stops once the transmittance
//! falls below `min_transmittance`.

use std::cell::RefCell;
use std::rc::Rc;

use nalgebra::{Matrix2, Vector2, Vector3};
use thiserror::Error;

use crate::autodiff::{AutodiffError, CustomOp, Tape, Tensor, Var};
use crate::geometry::{self, Camera, Gaussian3D, GeometryError, Projection, Quat};
use crate::image::Image;

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("screen gradients requested before a backward pass")]
    BackwardNotRun,
    #[error("attribute tensors disagree: {0}")]
    Attributes(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderConfig {
    pub background: [f64; 3],
    pub max_alpha: f64,
    pub min_transmittance: f64,
    pub min_contribution: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            max_alpha: 0.99,
            min_transmittance: 1e-7,
            min_contribution: 1e-9,
        }
    }
}

impl RenderConfig {
    pub fn with_background(background: [f64; 3]) -> Self {
        Self {
            background,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub image: Image,
    /// `‖∂loss/∂mean2d‖` per input Gaussian; filled by a backward pass.
    pub screen_grad_norms: Option<Vec<f64>>,
    /// Splats dropped because their projected covariance was singular.
    pub skipped: usize,
}

/// Per-Gaussian gradients produced by [`ForwardState::backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrads {
    pub mean: Vec<Vector3<f64>>,
    pub rotation: Vec<Quat>,
    pub scale: Vec<Vector3<f64>>,
    pub opacity: Vec<f64>,
    pub color: Vec<Vector3<f64>>,
    pub mean2d: Vec<Vector2<f64>>,
}

impl GaussianGrads {
    fn zeros(n: usize) -> Self {
        Self {
            mean: vec![Vector3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            scale: vec![Vector3::zeros(); n],
            opacity: vec![0.0; n],
            color: vec![Vector3::zeros(); n],
            mean2d: vec![Vector2::zeros(); n],
        }
    }

    pub fn screen_norms(&self) -> Vec<f64> {
        self.mean2d.iter().map(|g| g.norm()).collect()
    }
}

struct VisibleSplat {
    index: usize,
    proj: Projection,
    conic: Matrix2<f64>,
}

/// Everything the backward pass needs from one forward render.
pub struct ForwardState {
    cam: Camera,
    cfg: RenderConfig,
    gaussians: Vec<Gaussian3D>,
    visible: Vec<VisibleSplat>,
    /// Contributing splats per pixel (index into `visible`), front to back.
    offsets: Vec<usize>,
    entries: Vec<u32>,
    /// Number of entries actually blended before early termination.
    used: Vec<u32>,
    final_t: Vec<f64>,
    image: Image,
    skipped: usize,
}

fn pixel_center(x: usize, y: usize) -> Vector2<f64> {
    Vector2::new(x as f64 + 0.5, y as f64 + 0.5)
}

impl ForwardState {
    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn gaussian_count(&self) -> usize {
        self.gaussians.len()
    }

    /// Which input Gaussians survived culling and were splatted.
    pub fn visible_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.gaussians.len()];
        for vs in &self.visible {
            mask[vs.index] = true;
        }
        mask
    }

    /// Gradients of a scalar loss with respect to every Gaussian attribute,
    /// given `∂loss/∂image` in the same `H×W×3` layout as the image.
    pub fn backward(&self, d_image: &[f64]) -> Result<GaussianGrads, RenderError> {
        let (w, h) = (self.cam.width, self.cam.height);
        assert_eq!(d_image.len(), w * h * 3, "image gradient size");
        let n = self.gaussians.len();
        let mut grads = GaussianGrads::zeros(n);
        let mut d_cov2d = vec![Matrix2::<f64>::zeros(); self.visible.len()];
        let mut d_m2 = vec![Vector2::<f64>::zeros(); self.visible.len()];
        let bg = Vector3::from(self.cfg.background);
        let mut t_scratch = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let pix = y * w + x;
                let used = self.used[pix] as usize;
                if used == 0 {
                    continue;
                }
                let g = Vector3::new(d_image[pix * 3], d_image[pix * 3 + 1], d_image[pix * 3 + 2]);
                if g == Vector3::zeros() {
                    continue;
                }
                let list = &self.entries[self.offsets[pix]..self.offsets[pix] + used];
                let p = pixel_center(x, y);
                // replay transmittance
                t_scratch.clear();
                let mut t = 1.0;
                let mut sigmas = Vec::with_capacity(used);
                for &e in list {
                    let vs = &self.visible[e as usize];
                    let (val, _, _) = geometry::eval_splat_grad(&vs.proj.splat, &vs.conic, &p);
                    let s = (vs.proj.splat.opacity * val).min(self.cfg.max_alpha);
                    t_scratch.push(t);
                    sigmas.push((s, val));
                    t *= 1.0 - s;
                }
                let mut after = bg * self.final_t[pix];
                for k in (0..used).rev() {
                    let vs = &self.visible[list[k] as usize];
                    let (sigma, val) = sigmas[k];
                    let ti = t_scratch[k];
                    let c = vs.proj.splat.color;
                    grads.color[vs.index] += g * (sigma * ti);
                    let d_sigma = g.dot(&(c * ti - after / (1.0 - sigma)));
                    after += c * (sigma * ti);
                    let alpha = vs.proj.splat.opacity;
                    if alpha * val >= self.cfg.max_alpha {
                        continue;
                    }
                    grads.opacity[vs.index] += d_sigma * val;
                    let d_val = d_sigma * alpha;
                    let (_, dm, dc) = geometry::eval_splat_grad(&vs.proj.splat, &vs.conic, &p);
                    let vi = list[k] as usize;
                    d_m2[vi] += dm * d_val;
                    d_cov2d[vi] += dc * d_val;
                }
            }
        }
        for (vi, vs) in self.visible.iter().enumerate() {
            let g = &self.gaussians[vs.index];
            let d_mean2d = d_m2[vi];
            let d_cov = d_cov2d[vi];
            let (dm, dq, ds) =
                geometry::project_backward(g, &self.cam, &vs.proj, &d_mean2d, &d_cov)?;
            grads.mean[vs.index] += dm;
            for i in 0..4 {
                grads.rotation[vs.index][i] += dq[i];
            }
            grads.scale[vs.index] += ds;
            grads.mean2d[vs.index] = d_mean2d;
        }
        Ok(grads)
    }
}

/// Forward render that keeps the state for a later backward pass.
pub fn render_forward(
    gaussians: &[Gaussian3D],
    cam: &Camera,
    cfg: &RenderConfig,
) -> Result<ForwardState, RenderError> {
    cam.validate()?;
    let mut visible = Vec::new();
    let mut skipped = 0;
    for (index, g) in gaussians.iter().enumerate() {
        if !(g.opacity > 0.0) || g.opacity <= cfg.min_contribution {
            continue;
        }
        let Some(proj) = geometry::project(g, cam)? else {
            continue;
        };
        match proj.splat.conic() {
            Ok(conic) => visible.push(VisibleSplat { index, proj, conic }),
            Err(GeometryError::SingularCovariance(_)) => skipped += 1,
            Err(e) => return Err(e.into()),
        }
    }
    composite(gaussians, visible, skipped, cam, cfg)
}

fn composite(
    gaussians: &[Gaussian3D],
    mut visible: Vec<VisibleSplat>,
    skipped: usize,
    cam: &Camera,
    cfg: &RenderConfig,
) -> Result<ForwardState, RenderError> {
    let (w, h) = (cam.width, cam.height);
    // stable: equal depths keep input order
    visible.sort_by(|a, b| a.proj.splat.depth.total_cmp(&b.proj.splat.depth));

    let mut per_pixel: Vec<Vec<u32>> = vec![Vec::new(); w * h];
    for (vi, vs) in visible.iter().enumerate() {
        let sp = &vs.proj.splat;
        // α·G′ ≥ ε  ⇔  Mahalanobis² ≤ 2 ln(α/ε)
        let maha2 = 2.0 * (sp.opacity / cfg.min_contribution).ln();
        let r = sp.radius(maha2.sqrt());
        let x0 = ((sp.mean.x - r - 0.5).ceil().max(0.0)) as usize;
        let y0 = ((sp.mean.y - r - 0.5).ceil().max(0.0)) as usize;
        let x1 = (sp.mean.x + r - 0.5).floor();
        let y1 = (sp.mean.y + r - 0.5).floor();
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        let x1 = (x1 as usize).min(w.saturating_sub(1));
        let y1 = (y1 as usize).min(h.saturating_sub(1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = pixel_center(x, y) - sp.mean;
                if d.dot(&(vs.conic * d)) <= maha2 {
                    per_pixel[y * w + x].push(vi as u32);
                }
            }
        }
    }

    let mut offsets = Vec::with_capacity(w * h + 1);
    let mut entries = Vec::new();
    let mut used = vec![0u32; w * h];
    let mut final_t = vec![1.0; w * h];
    let mut image = Image::filled(w, h, [0.0; 3]);
    let bg = Vector3::from(cfg.background);
    for y in 0..h {
        for x in 0..w {
            let pix = y * w + x;
            offsets.push(entries.len());
            let list = &per_pixel[pix];
            entries.extend_from_slice(list);
            let p = pixel_center(x, y);
            let mut t = 1.0;
            let mut c = Vector3::zeros();
            let mut n_used = 0;
            for &e in list {
                let vs = &visible[e as usize];
                let val = geometry::eval_splat_grad(&vs.proj.splat, &vs.conic, &p).0;
                let sigma = (vs.proj.splat.opacity * val).min(cfg.max_alpha);
                c += vs.proj.splat.color * (sigma * t);
                t *= 1.0 - sigma;
                n_used += 1;
                if t < cfg.min_transmittance {
                    break;
                }
            }
            c += bg * t;
            used[pix] = n_used;
            final_t[pix] = t;
            image.data[pix * 3..pix * 3 + 3].copy_from_slice(c.as_slice());
        }
    }
    offsets.push(entries.len());
    Ok(ForwardState {
        cam: cam.clone(),
        cfg: cfg.clone(),
        gaussians: gaussians.to_vec(),
        visible,
        offsets,
        entries,
        used,
        final_t,
        image,
        skipped,
    })
}

pub fn render(
    gaussians: &[Gaussian3D],
    cam: &Camera,
    cfg: &RenderConfig,
) -> Result<RenderOutput, RenderError> {
    let state = render_forward(gaussians, cam, cfg)?;
    Ok(RenderOutput {
        skipped: state.skipped,
        image: state.image,
        screen_grad_norms: None,
    })
}

/// Gaussian attributes laid out as tape tensors, one row per Gaussian.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    /// `[n,3]`
    pub mean: Var,
    /// `[n,3]`
    pub color: Var,
    /// `[n,1]`
    pub opacity: Var,
    /// `[n,4]`, w first
    pub rotation: Var,
    /// `[n,3]`
    pub scale: Var,
}

impl GaussianVars {
    fn inputs(&self) -> [Var; 5] {
        [self.mean, self.color, self.opacity, self.rotation, self.scale]
    }
}

/// Reads Gaussians back out of their tape tensors.
pub fn gaussians_from_tape(tape: &Tape, vars: &GaussianVars) -> Result<Vec<Gaussian3D>, RenderError> {
    let t = |v: Var| tape.value(v);
    gaussians_from_tensors(t(vars.mean), t(vars.color), t(vars.opacity), t(vars.rotation), t(vars.scale))
}

pub fn gaussians_from_tensors(
    mean: &Tensor,
    color: &Tensor,
    opacity: &Tensor,
    rotation: &Tensor,
    scale: &Tensor,
) -> Result<Vec<Gaussian3D>, RenderError> {
    let n = mean.len() / 3;
    let widths = [(mean, 3), (color, 3), (opacity, 1), (rotation, 4), (scale, 3)];
    for (t, k) in widths {
        if t.len() != n * k {
            return Err(RenderError::Attributes(format!(
                "expected {n} rows of width {k}, got {} values",
                t.len()
            )));
        }
    }
    Ok((0..n)
        .map(|i| Gaussian3D {
            mean: Vector3::from_column_slice(&mean.data()[i * 3..i * 3 + 3]),
            color: Vector3::from_column_slice(&color.data()[i * 3..i * 3 + 3]),
            opacity: opacity.data()[i],
            rotation: rotation.data()[i * 4..i * 4 + 4].try_into().expect("4"),
            scale: Vector3::from_column_slice(&scale.data()[i * 3..i * 3 + 3]),
        })
        .collect())
}

/// Shared view of a render recorded on a tape; exposes the screen-space
/// gradient norms once the tape has been differentiated.
#[derive(Clone)]
pub struct RenderHandle {
    state: Rc<ForwardState>,
    grads: Rc<RefCell<Option<GaussianGrads>>>,
}

impl RenderHandle {
    pub fn image(&self) -> &Image {
        &self.state.image
    }

    pub fn skipped(&self) -> usize {
        self.state.skipped
    }

    pub fn visible_mask(&self) -> Vec<bool> {
        self.state.visible_mask()
    }

    /// `‖∂loss/∂mean2d‖` per Gaussian; culled Gaussians report 0.
    pub fn screen_gradients(&self) -> Result<Vec<f64>, RenderError> {
        self.grads
            .borrow()
            .as_ref()
            .map(GaussianGrads::screen_norms)
            .ok_or(RenderError::BackwardNotRun)
    }

    pub fn gaussian_grads(&self) -> Option<GaussianGrads> {
        self.grads.borrow().clone()
    }
}

struct RenderOp {
    state: Rc<ForwardState>,
    grads: Rc<RefCell<Option<GaussianGrads>>>,
}

impl CustomOp for RenderOp {
    fn name(&self) -> &'static str {
        "render"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>> {
        let g = self
            .state
            .backward(grad_out.data())
            .expect("backward of a successful forward render");
        let n = g.mean.len();
        let flat3 = |v: &[Vector3<f64>]| -> Tensor {
            Tensor::new(vec![n, 3], v.iter().flat_map(|x| x.iter().copied()).collect()).expect("sized")
        };
        let out = vec![
            Some(flat3(&g.mean)),
            Some(flat3(&g.color)),
            Some(Tensor::new(vec![n, 1], g.opacity.clone()).expect("sized")),
            Some(Tensor::new(vec![n, 4], g.rotation.concat()).expect("sized")),
            Some(flat3(&g.scale)),
        ];
        *self.grads.borrow_mut() = Some(g);
        out
    }
}

/// Records a render of the Gaussians held in `vars` onto the tape. Returns the
/// `[H,W,3]` image variable and a handle for screen-gradient statistics.
pub fn render_on_tape(
    tape: &mut Tape,
    vars: &GaussianVars,
    cam: &Camera,
    cfg: &RenderConfig,
) -> Result<(Var, RenderHandle), RenderError> {
    let gaussians = gaussians_from_tape(tape, vars)?;
    let state = Rc::new(render_forward(&gaussians, cam, cfg)?);
    let grads = Rc::new(RefCell::new(None));
    let image = state.image.to_tensor();
    let op = RenderOp {
        state: state.clone(),
        grads: grads.clone(),
    };
    let var = tape.custom(&vars.inputs(), image, Box::new(op));
    Ok((var, RenderHandle { state, grads }))
}
