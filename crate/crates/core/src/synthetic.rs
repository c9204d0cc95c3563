//! Procedural desk-scale datasets: a checkered ground with colored boxes as
//! the original scene, a small figure as the hidden object, and a ring of
//! cameras looking at the middle. Ground truth comes from rendering the
//! reference Gaussians directly.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::densify::{voxel_center, voxel_key};
use crate::geometry::{Camera, Gaussian3D, GeometryError};
use crate::image::Image;
use crate::rasterizer::{render, RenderConfig, RenderError};
use crate::scene::{AnchorPoint, Origin, Scene};

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {detail}")]
    Manifest { path: PathBuf, detail: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub seed: u64,
    /// Half-width of the square ground.
    pub extent: f64,
    pub voxel_size: f64,
    pub cameras: usize,
    pub orbit_radius: f64,
    pub orbit_height: f64,
    /// Vertical field of view in radians.
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
    pub hidden_center: [f64; 3],
    /// Height of the hidden figure.
    pub hidden_size: f64,
    pub boxes: usize,
    pub background: [f64; 3],
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            extent: 12.0,
            voxel_size: 1.8,
            cameras: 8,
            orbit_radius: 36.0,
            orbit_height: 15.0,
            fov_y: 0.7,
            width: 64,
            height: 64,
            hidden_center: [1.8, 0.0, -1.2],
            hidden_size: 7.8,
            boxes: 3,
            background: [0.0, 0.0, 0.0],
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SyntheticError> {
        let bad = |m: &str| Err(SyntheticError::Spec(m.into()));
        if self.width < 16 || self.height < 16 {
            return bad("resolution must be at least 16×16");
        }
        if self.cameras == 0 {
            return bad("need at least one camera");
        }
        if !(self.extent > 0.0 && self.voxel_size > 0.0 && self.hidden_size > 0.0) {
            return bad("extent, voxel size and hidden size must be positive");
        }
        if !(self.fov_y > 0.0 && self.fov_y < 3.0) {
            return bad("field of view must lie in (0, 3) radians");
        }
        if !(self.orbit_radius > self.extent) {
            return bad("cameras must orbit outside the ground");
        }
        let [hx, _, hz] = self.hidden_center;
        if hx.abs() > self.extent || hz.abs() > self.extent {
            return bad("hidden object must sit inside the scene extent");
        }
        Ok(())
    }

    /// Length unit of the procedural geometry; everything scales with the ground.
    pub fn unit(&self) -> f64 {
        self.extent / 4.0
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig::with_background(self.background)
    }

    /// Axis-aligned box containing the hidden figure.
    pub fn hidden_bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let c = Vector3::from(self.hidden_center);
        let r = 0.3 * self.hidden_size;
        (c + Vector3::new(-r, 0.0, -r), c + Vector3::new(r, self.hidden_size, r))
    }
}

/// Everything a training run consumes.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub cameras: Vec<Camera>,
    pub originals: Vec<Image>,
    /// The hidden figure alone over the background.
    pub hidden_object: Vec<Image>,
    /// The hidden figure composited into the original scene.
    pub hidden_scene: Vec<Image>,
    pub reference_original: Vec<Gaussian3D>,
    pub reference_hidden: Vec<Gaussian3D>,
}

fn splat(mean: Vector3<f64>, scale: Vector3<f64>, color: Vector3<f64>, opacity: f64) -> Gaussian3D {
    Gaussian3D {
        mean,
        rotation: [1.0, 0.0, 0.0, 0.0],
        scale,
        opacity,
        color,
    }
}

fn ground(spec: &SyntheticSpec) -> Vec<Gaussian3D> {
    let u = spec.unit();
    let step = 0.25 * u;
    let n = (2.0 * spec.extent / step).round() as i64;
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let x = -spec.extent + (i as f64 + 0.5) * step;
            let z = -spec.extent + (j as f64 + 0.5) * step;
            let checker = ((x / u).floor() as i64 + (z / u).floor() as i64).rem_euclid(2) == 0;
            let color = if checker {
                Vector3::new(0.82, 0.78, 0.66)
            } else {
                Vector3::new(0.35, 0.42, 0.30)
            };
            out.push(splat(
                Vector3::new(x, 0.0, z),
                Vector3::new(0.16, 0.02, 0.16) * u,
                color,
                0.95,
            ));
        }
    }
    out
}

/// Gaussians tiling the five visible faces of a box resting on the ground.
fn cuboid(center: Vector3<f64>, half: Vector3<f64>, color: Vector3<f64>, u: f64) -> Vec<Gaussian3D> {
    let step = 0.2 * u;
    let mut out = Vec::new();
    let count = |len: f64| ((2.0 * len / step).ceil() as usize).max(1);
    for axis in 0..3 {
        for side in [-1.0, 1.0] {
            if axis == 1 && side < 0.0 {
                continue; // bottom face rests on the ground
            }
            let (a1, a2) = ((axis + 1) % 3, (axis + 2) % 3);
            let (nu, nv) = (count(half[a1]), count(half[a2]));
            for a in 0..nu {
                for b in 0..nv {
                    let mut p = center;
                    p[axis] += side * half[axis];
                    p[a1] += -half[a1] + (a as f64 + 0.5) * 2.0 * half[a1] / nu as f64;
                    p[a2] += -half[a2] + (b as f64 + 0.5) * 2.0 * half[a2] / nv as f64;
                    let mut s = Vector3::repeat(0.13 * u);
                    s[axis] = 0.02 * u;
                    // faces shaded by orientation so edges read clearly
                    let shade = [0.85, 1.0, 0.7][axis];
                    out.push(splat(p, s, color * shade, 0.97));
                }
            }
        }
    }
    out
}

fn sphere(center: Vector3<f64>, radius: f64, color: Vector3<f64>, u: f64, rng: &mut ChaCha8Rng) -> Vec<Gaussian3D> {
    let n = ((radius / (0.12 * u)).powi(2) * 12.0).ceil() as usize;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).sqrt();
            let th = golden * i as f64;
            let dir = Vector3::new(r * th.cos(), y, r * th.sin());
            let jitter = 1.0 + rng.random_range(-0.05..0.05);
            // lighter toward +y for a little shading
            let c = color * (0.75 + 0.25 * (0.5 + 0.5 * y));
            splat(center + dir * radius * jitter, Vector3::repeat(0.11 * radius.max(0.5 * u)), c, 0.95)
        })
        .collect()
}

/// The hidden figure: a stack of two spheres with a flat cap, in saturated
/// colors that do not occur in the original scene.
fn figure(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Gaussian3D> {
    let c = Vector3::from(spec.hidden_center);
    let (h, u) = (spec.hidden_size, spec.unit());
    let mut out = sphere(c + Vector3::new(0.0, 0.3 * h, 0.0), 0.3 * h, Vector3::new(0.9, 0.25, 0.2), u, rng);
    out.extend(sphere(c + Vector3::new(0.0, 0.75 * h, 0.0), 0.2 * h, Vector3::new(0.2, 0.45, 0.95), u, rng));
    out.extend(cuboid(
        c + Vector3::new(0.0, 0.95 * h, 0.0),
        Vector3::new(0.22 * h, 0.04 * h, 0.22 * h),
        Vector3::new(0.95, 0.85, 0.1),
        u,
    ));
    out
}

fn boxes(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Gaussian3D> {
    let palette = [
        Vector3::new(0.75, 0.3, 0.6),
        Vector3::new(0.25, 0.6, 0.7),
        Vector3::new(0.85, 0.55, 0.2),
        Vector3::new(0.5, 0.5, 0.85),
    ];
    let u = spec.unit();
    let mut out = Vec::new();
    for b in 0..spec.boxes {
        let ang = b as f64 * std::f64::consts::TAU / spec.boxes as f64 + rng.random_range(-0.3..0.3);
        let dist = 0.45 * spec.extent + rng.random_range(0.0..0.2 * spec.extent);
        let half = Vector3::new(
            rng.random_range(0.4..0.8),
            rng.random_range(0.4..1.0),
            rng.random_range(0.4..0.8),
        ) * u;
        let center = Vector3::new(dist * ang.cos(), half.y, dist * ang.sin());
        out.extend(cuboid(center, half, palette[b % palette.len()], u));
    }
    out
}

pub fn cameras(spec: &SyntheticSpec) -> Result<Vec<Camera>, SyntheticError> {
    let target = Vector3::new(0.0, 0.8 * spec.unit(), 0.0);
    (0..spec.cameras)
        .map(|i| {
            let a = i as f64 * std::f64::consts::TAU / spec.cameras as f64;
            // alternate heights so the ring is not degenerate
            let h = spec.orbit_height * if i % 2 == 0 { 1.0 } else { 0.7 };
            let eye = Vector3::new(spec.orbit_radius * a.cos(), h, spec.orbit_radius * a.sin());
            Ok(Camera::look_at(eye, target, Vector3::new(0.0, 1.0, 0.0), spec.fov_y, spec.width, spec.height)?)
        })
        .collect()
}

/// Seed anchors: one per occupied voxel of the original reference scene.
pub fn initial_anchors(spec: &SyntheticSpec, reference: &[Gaussian3D], k: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xA5A5);
    let keys: BTreeSet<(i64, i64, i64)> = reference.iter().map(|g| voxel_key(&g.mean, spec.voxel_size)).collect();
    let anchors = keys
        .into_iter()
        .map(|key| AnchorPoint::new(voxel_center(key, spec.voxel_size), spec.voxel_size, k, Origin::Ori, &mut rng))
        .collect();
    Scene { k, anchors }
}

pub fn make_scene(spec: &SyntheticSpec) -> Result<Dataset, SyntheticError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut reference_original = ground(spec);
    reference_original.extend(boxes(spec, &mut rng));
    let reference_hidden = figure(spec, &mut rng);
    let mut composite = reference_original.clone();
    composite.extend(reference_hidden.iter().cloned());
    let cams = cameras(spec)?;
    let cfg = spec.render_config();
    let mut originals = Vec::new();
    let mut hidden_object = Vec::new();
    let mut hidden_scene = Vec::new();
    for cam in &cams {
        originals.push(render(&reference_original, cam, &cfg)?.image);
        hidden_object.push(render(&reference_hidden, cam, &cfg)?.image);
        hidden_scene.push(render(&composite, cam, &cfg)?.image);
    }
    Ok(Dataset {
        spec: spec.clone(),
        cameras: cams,
        originals,
        hidden_object,
        hidden_scene,
        reference_original,
        reference_hidden,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestView {
    pub camera: Camera,
    pub original: String,
    pub hidden_object: String,
    pub hidden_scene: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SyntheticSpec,
    pub views: Vec<ManifestView>,
}

pub const MANIFEST: &str = "manifest.json";

/// Writes every image as PFM plus `manifest.json` listing paths and cameras.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<(), SyntheticError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SyntheticError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut views = Vec::new();
    for (i, cam) in ds.cameras.iter().enumerate() {
        let names = [
            format!("original_{i:03}.pfm"),
            format!("hidden_object_{i:03}.pfm"),
            format!("hidden_scene_{i:03}.pfm"),
        ];
        for (name, img) in names.iter().zip([&ds.originals[i], &ds.hidden_object[i], &ds.hidden_scene[i]]) {
            let path = dir.join(name);
            let mut buf = Vec::new();
            img.write_pfm(&mut buf).map_err(io(&path))?;
            fs::write(&path, buf).map_err(io(&path))?;
        }
        let [original, hidden_object, hidden_scene] = names;
        views.push(ManifestView {
            camera: cam.clone(),
            original,
            hidden_object,
            hidden_scene,
        });
    }
    let manifest = Manifest {
        spec: ds.spec.clone(),
        views,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(io(&path))
}

/// Loads a dataset written by [`write_dataset`]. Reference Gaussians are
/// regenerated from the stored spec.
pub fn read_dataset(dir: &Path) -> Result<Dataset, SyntheticError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|source| SyntheticError::Io {
        path: path.clone(),
        source,
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| SyntheticError::Manifest {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    let load = |name: &str| -> Result<Image, SyntheticError> {
        let p = dir.join(name);
        let f = fs::File::open(&p).map_err(|source| SyntheticError::Io { path: p.clone(), source })?;
        Image::read_pfm(f).map_err(|source| SyntheticError::Io { path: p, source })
    };
    let mut ds = Dataset {
        spec: manifest.spec.clone(),
        cameras: Vec::new(),
        originals: Vec::new(),
        hidden_object: Vec::new(),
        hidden_scene: Vec::new(),
        reference_original: Vec::new(),
        reference_hidden: Vec::new(),
    };
    for v in &manifest.views {
        v.camera.validate()?;
        ds.cameras.push(v.camera.clone());
        ds.originals.push(load(&v.original)?);
        ds.hidden_object.push(load(&v.hidden_object)?);
        ds.hidden_scene.push(load(&v.hidden_scene)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(manifest.spec.seed);
    ds.reference_original = ground(&manifest.spec);
    ds.reference_original.extend(boxes(&manifest.spec, &mut rng));
    ds.reference_hidden = figure(&manifest.spec, &mut rng);
    Ok(ds)
}
