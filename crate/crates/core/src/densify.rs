//! Region-aware density control: per-stream gradient ledgers, a DBSCAN box
//! around the hidden-stream anchors, lowered growth threshold for the
//! original stream inside that box, and opacity pruning.

use std::collections::{HashMap, HashSet, VecDeque};

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{AnchorPoint, Origin, Scene};

#[derive(Debug, Error, PartialEq)]
pub enum DensifyError {
    #[error("densify setting `{0}` must be positive")]
    NonPositive(&'static str),
    #[error("ledger expects {expected} slots, got {got}")]
    SlotCount { expected: usize, got: usize },
}

/// How per-slot statistics gate an anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotTrigger {
    Max,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensifyConfig {
    pub tau_fix: f64,
    pub r_down: f64,
    /// The hidden ledger accumulates on iterations divisible by this.
    pub hid_step: usize,
    pub refine_every: usize,
    pub warmup: usize,
    pub bbox_every: usize,
    /// No refinement after this iteration.
    pub densify_until: Option<usize>,
    pub prune_opacity: f64,
    /// `None` picks twice the median nearest-neighbor distance.
    pub dbscan_eps: Option<f64>,
    pub dbscan_min_pts: usize,
    pub voxel_size: f64,
    /// `None` pads by one voxel.
    pub bbox_padding: Option<f64>,
    pub trigger: SlotTrigger,
    /// Off: synchronous ledgers and a single fixed threshold everywhere.
    pub region_aware: bool,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            tau_fix: 0.0002,
            r_down: 4.0,
            hid_step: 4,
            refine_every: 100,
            warmup: 500,
            bbox_every: 500,
            densify_until: None,
            prune_opacity: 0.005,
            dbscan_eps: None,
            dbscan_min_pts: 5,
            voxel_size: 0.1,
            bbox_padding: None,
            trigger: SlotTrigger::Max,
            region_aware: true,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<(), DensifyError> {
        let checks = [
            ("tau_fix", self.tau_fix > 0.0),
            ("r_down", self.r_down > 0.0),
            ("hid_step", self.hid_step > 0),
            ("refine_every", self.refine_every > 0),
            ("bbox_every", self.bbox_every > 0),
            ("prune_opacity", self.prune_opacity > 0.0),
            ("dbscan_eps", self.dbscan_eps.is_none_or(|e| e > 0.0)),
            ("dbscan_min_pts", self.dbscan_min_pts > 0),
            ("voxel_size", self.voxel_size > 0.0),
            ("bbox_padding", self.bbox_padding.is_none_or(|p| p >= 0.0)),
        ];
        match checks.iter().find(|(_, ok)| !ok) {
            Some((name, _)) => Err(DensifyError::NonPositive(name)),
            None => Ok(()),
        }
    }

    fn hid_interval(&self) -> usize {
        if self.region_aware {
            self.hid_step
        } else {
            1
        }
    }

    pub fn is_refinement(&self, iteration: usize) -> bool {
        iteration >= self.warmup && self.densify_until.is_none_or(|u| iteration <= u) && iteration % self.refine_every == 0
    }
}

/// Running sums for one stream, one entry per (anchor, offset slot).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StreamLedger {
    pub grad_sum: Vec<f64>,
    pub views: Vec<u32>,
    /// Sum of the slot's neural-Gaussian position over counted views.
    pub position_sum: Vec<Vector3<f64>>,
    /// Per anchor: summed mean positive opacity over counted views.
    pub opacity_sum: Vec<f64>,
    pub opacity_views: Vec<u32>,
    pub events: usize,
}

impl StreamLedger {
    fn sized(anchors: usize, k: usize) -> Self {
        Self {
            grad_sum: vec![0.0; anchors * k],
            views: vec![0; anchors * k],
            position_sum: vec![Vector3::zeros(); anchors * k],
            opacity_sum: vec![0.0; anchors],
            opacity_views: vec![0; anchors],
            events: 0,
        }
    }

    /// Mean accumulated gradient norm of a slot; 0 when never seen.
    pub fn statistic(&self, slot: usize) -> f64 {
        match self.views[slot] {
            0 => 0.0,
            v => self.grad_sum[slot] / v as f64,
        }
    }

    pub fn mean_position(&self, slot: usize) -> Option<Vector3<f64>> {
        match self.views[slot] {
            0 => None,
            v => Some(self.position_sum[slot] / v as f64),
        }
    }

    pub fn mean_opacity(&self, anchor: usize) -> Option<f64> {
        match self.opacity_views[anchor] {
            0 => None,
            v => Some(self.opacity_sum[anchor] / v as f64),
        }
    }
}

/// One render's worth of per-Gaussian observations, anchor-major (`anchor·k + slot`).
#[derive(Clone, Copy, Debug)]
pub struct Observation<'a> {
    pub grad_norms: &'a [f64],
    pub visible: &'a [bool],
    pub positions: &'a [Vector3<f64>],
    pub opacities: &'a [f64],
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientLedger {
    pub k: usize,
    pub ori: StreamLedger,
    pub hid: StreamLedger,
}

impl GradientLedger {
    pub fn new(anchors: usize, k: usize) -> Self {
        Self {
            k,
            ori: StreamLedger::sized(anchors, k),
            hid: StreamLedger::sized(anchors, k),
        }
    }

    pub fn anchors(&self) -> usize {
        self.ori.opacity_views.len()
    }

    pub fn stream(&self, s: Origin) -> &StreamLedger {
        match s {
            Origin::Ori => &self.ori,
            Origin::Hid => &self.hid,
        }
    }

    fn stream_mut(&mut self, s: Origin) -> &mut StreamLedger {
        match s {
            Origin::Ori => &mut self.ori,
            Origin::Hid => &mut self.hid,
        }
    }

    /// Adds one observation. The original stream takes every iteration; the
    /// hidden stream only every `hid_step`-th. Returns whether it was counted.
    pub fn accumulate(
        &mut self,
        stream: Origin,
        obs: &Observation,
        iteration: usize,
        cfg: &DensifyConfig,
    ) -> Result<bool, DensifyError> {
        if stream == Origin::Hid && iteration % cfg.hid_interval() != 0 {
            return Ok(false);
        }
        let slots = self.anchors() * self.k;
        for len in [obs.grad_norms.len(), obs.visible.len(), obs.positions.len(), obs.opacities.len()] {
            if len != slots {
                return Err(DensifyError::SlotCount {
                    expected: slots,
                    got: len,
                });
            }
        }
        let k = self.k;
        let led = self.stream_mut(stream);
        led.events += 1;
        for i in 0..slots {
            if obs.visible[i] {
                led.grad_sum[i] += obs.grad_norms[i];
                led.views[i] += 1;
                led.position_sum[i] += obs.positions[i];
            }
        }
        for a in 0..slots / k.max(1) {
            let range = a * k..(a + 1) * k;
            if obs.visible[range.clone()].iter().any(|v| *v) {
                let mean = obs.opacities[range].iter().map(|o| o.max(0.0)).sum::<f64>() / k as f64;
                led.opacity_sum[a] += mean;
                led.opacity_views[a] += 1;
            }
        }
        Ok(true)
    }

    /// Clears all accumulators and resizes for `anchors`.
    pub fn reset(&mut self, anchors: usize) {
        *self = Self::new(anchors, self.k);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundingBox {
    /// Padded corners.
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
    pub padding: f64,
}

impl BoundingBox {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn volume(&self) -> f64 {
        (self.max - self.min).iter().product()
    }
}

pub const NOISE: i32 = -1;

fn cell_of(p: &Vector3<f64>, size: f64) -> (i64, i64, i64) {
    (
        (p.x / size).floor() as i64,
        (p.y / size).floor() as i64,
        (p.z / size).floor() as i64,
    )
}

/// Sorted neighbor lists (including the point itself) within `eps`, via a
/// uniform grid of cell size `eps`.
fn neighborhoods(points: &[Vector3<f64>], eps: f64) -> Vec<Vec<usize>> {
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(cell_of(p, eps)).or_default().push(i);
    }
    let eps2 = eps * eps;
    points
        .iter()
        .map(|p| {
            let (cx, cy, cz) = cell_of(p, eps);
            let mut out = Vec::new();
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if let Some(cell) = grid.get(&(cx + dx, cy + dy, cz + dz)) {
                            out.extend(cell.iter().copied().filter(|&j| (points[j] - p).norm_squared() <= eps2));
                        }
                    }
                }
            }
            out.sort_unstable();
            out
        })
        .collect()
}

/// Density-based clustering. A point is core when at least `min_pts` points
/// (itself included) lie within `eps`. Clusters are numbered from 0 in the
/// order their first core point appears; non-members get [`NOISE`].
pub fn dbscan(points: &[Vector3<f64>], eps: f64, min_pts: usize) -> Vec<i32> {
    let nb = neighborhoods(points, eps);
    let mut labels = vec![None::<i32>; points.len()];
    let mut next = 0;
    for seed in 0..points.len() {
        if labels[seed].is_some() {
            continue;
        }
        if nb[seed].len() < min_pts {
            labels[seed] = Some(NOISE);
            continue;
        }
        let cluster = next;
        next += 1;
        labels[seed] = Some(cluster);
        let mut queue: VecDeque<usize> = nb[seed].iter().copied().collect();
        while let Some(q) = queue.pop_front() {
            match labels[q] {
                Some(NOISE) => labels[q] = Some(cluster),
                None => {
                    labels[q] = Some(cluster);
                    if nb[q].len() >= min_pts {
                        queue.extend(nb[q].iter().copied());
                    }
                }
                Some(_) => {}
            }
        }
    }
    labels.into_iter().map(|l| l.unwrap_or(NOISE)).collect()
}

/// Twice the median nearest-neighbor distance; `None` for fewer than two points.
pub fn default_eps(points: &[Vector3<f64>]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let mut nn: Vec<f64> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| (q - p).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    nn.sort_by(f64::total_cmp);
    let m = nn.len();
    let median = if m % 2 == 1 {
        nn[m / 2]
    } else {
        0.5 * (nn[m / 2 - 1] + nn[m / 2])
    };
    (median > 0.0).then_some(2.0 * median)
}

/// Label of the most populous cluster; ties go to the lower label.
pub fn largest_cluster(labels: &[i32]) -> Option<i32> {
    let mut counts: HashMap<i32, usize> = HashMap::new();
    for &l in labels.iter().filter(|l| **l != NOISE) {
        *counts.entry(l).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(l, _)| l)
}

/// Padded hull of the largest DBSCAN cluster among the hidden-stream anchors.
pub fn hidden_bbox(scene: &Scene, cfg: &DensifyConfig) -> Option<BoundingBox> {
    let pts: Vec<Vector3<f64>> = scene
        .anchors
        .iter()
        .filter(|a| a.origin == Origin::Hid)
        .map(|a| a.position)
        .collect();
    let eps = cfg.dbscan_eps.or_else(|| default_eps(&pts))?;
    let labels = dbscan(&pts, eps, cfg.dbscan_min_pts);
    let best = largest_cluster(&labels)?;
    let pad = cfg.bbox_padding.unwrap_or(cfg.voxel_size);
    let mut min = Vector3::repeat(f64::INFINITY);
    let mut max = Vector3::repeat(f64::NEG_INFINITY);
    for (p, _) in pts.iter().zip(&labels).filter(|(_, l)| **l == best) {
        min = min.inf(p);
        max = max.sup(p);
    }
    Some(BoundingBox {
        min: min.add_scalar(-pad),
        max: max.add_scalar(pad),
        padding: pad,
    })
}

/// `τ_fix / r_down` inside the box, `τ_fix` elsewhere.
pub fn adaptive_threshold(position: &Vector3<f64>, bbox: Option<&BoundingBox>, cfg: &DensifyConfig) -> f64 {
    match bbox {
        Some(b) if b.contains(position) => cfg.tau_fix / cfg.r_down,
        _ => cfg.tau_fix,
    }
}

pub fn voxel_key(p: &Vector3<f64>, voxel: f64) -> (i64, i64, i64) {
    cell_of(p, voxel)
}

pub fn voxel_center(key: (i64, i64, i64), voxel: f64) -> Vector3<f64> {
    Vector3::new(
        (key.0 as f64 + 0.5) * voxel,
        (key.1 as f64 + 0.5) * voxel,
        (key.2 as f64 + 0.5) * voxel,
    )
}

/// A grown anchor and the anchor whose slot triggered it.
#[derive(Clone, Debug, PartialEq)]
pub struct Growth {
    pub parent: usize,
    pub slot: usize,
    pub statistic: f64,
    pub threshold: f64,
    pub anchor: AnchorPoint,
}

fn slot_gate(stats: &[f64], trigger: SlotTrigger) -> f64 {
    match trigger {
        SlotTrigger::Max => stats.iter().copied().fold(0.0, f64::max),
        SlotTrigger::Mean => stats.iter().sum::<f64>() / stats.len().max(1) as f64,
    }
}

/// New anchors from one stream's ledger. `occupied` holds the voxel keys
/// already taken and is extended with every accepted child.
pub fn grow(
    scene: &Scene,
    ledger: &GradientLedger,
    bbox: Option<&BoundingBox>,
    cfg: &DensifyConfig,
    stream: Origin,
    occupied: &mut HashSet<(i64, i64, i64)>,
    rng: &mut impl Rng,
) -> Vec<Growth> {
    let k = scene.k;
    let led = ledger.stream(stream);
    let mut out = Vec::new();
    for (i, parent) in scene.anchors.iter().enumerate() {
        let threshold = match stream {
            Origin::Ori => adaptive_threshold(&parent.position, bbox, cfg),
            Origin::Hid => cfg.tau_fix,
        };
        let stats: Vec<f64> = (0..k).map(|j| led.statistic(i * k + j)).collect();
        if !(slot_gate(&stats, cfg.trigger) > threshold) {
            continue;
        }
        for (j, &statistic) in stats.iter().enumerate() {
            if !(statistic > threshold) {
                continue;
            }
            let Some(pos) = led.mean_position(i * k + j) else {
                continue;
            };
            let key = voxel_key(&pos, cfg.voxel_size);
            if !occupied.insert(key) {
                continue;
            }
            let mut anchor = AnchorPoint::new(voxel_center(key, cfg.voxel_size), cfg.voxel_size, k, stream, rng);
            anchor.feature = parent.feature;
            out.push(Growth {
                parent: i,
                slot: j,
                statistic,
                threshold,
                anchor,
            });
        }
    }
    out
}

/// Indices of anchors whose best stream produced a mean opacity strictly
/// below the threshold. Anchors never observed are kept.
pub fn prune_set(ledger: &GradientLedger, cfg: &DensifyConfig) -> Vec<usize> {
    (0..ledger.anchors())
        .filter(|&a| {
            let best = [ledger.ori.mean_opacity(a), ledger.hid.mean_opacity(a)]
                .into_iter()
                .flatten()
                .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |m| m.max(v))));
            best.is_some_and(|m| m < cfg.prune_opacity)
        })
        .collect()
}

/// What one refinement event did. `kept` lists surviving pre-existing anchor
/// indices in order; grown anchors follow them in the new scene.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RdoReport {
    pub refined: bool,
    pub bbox: Option<BoundingBox>,
    pub grown_ori: Vec<Growth>,
    pub grown_hid: Vec<Growth>,
    pub pruned: Vec<usize>,
    pub kept: Vec<usize>,
}

/// Box state carried between refinement events.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RdoState {
    pub bbox: Option<BoundingBox>,
}

/// One pass of the region-aware refinement block. On non-refinement
/// iterations nothing changes.
pub fn rdo_step(
    scene: &mut Scene,
    ledger: &mut GradientLedger,
    state: &mut RdoState,
    cfg: &DensifyConfig,
    iteration: usize,
    rng: &mut impl Rng,
) -> RdoReport {
    if !cfg.is_refinement(iteration) {
        return RdoReport {
            kept: (0..scene.len()).collect(),
            ..RdoReport::default()
        };
    }
    if !cfg.region_aware {
        state.bbox = None;
    } else if iteration % cfg.bbox_every == 0 {
        state.bbox = hidden_bbox(scene, cfg);
    }
    let mut occupied: HashSet<_> = scene
        .anchors
        .iter()
        .map(|a| voxel_key(&a.position, cfg.voxel_size))
        .collect();
    let grown_ori = grow(scene, ledger, state.bbox.as_ref(), cfg, Origin::Ori, &mut occupied, rng);
    let grown_hid = grow(scene, ledger, state.bbox.as_ref(), cfg, Origin::Hid, &mut occupied, rng);
    let pruned = prune_set(ledger, cfg);
    let dead: HashSet<usize> = pruned.iter().copied().collect();
    let kept: Vec<usize> = (0..scene.len()).filter(|i| !dead.contains(i)).collect();
    let old = std::mem::take(&mut scene.anchors);
    scene.anchors = kept.iter().map(|&i| old[i].clone()).collect();
    scene
        .anchors
        .extend(grown_ori.iter().chain(&grown_hid).map(|g| g.anchor.clone()));
    ledger.reset(scene.len());
    RdoReport {
        refined: true,
        bbox: state.bbox.clone(),
        grown_ori,
        grown_hid,
        pruned,
        kept,
    }
}
