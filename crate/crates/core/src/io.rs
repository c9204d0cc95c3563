//! On-disk formats and the audits that run on them.
//!
//! The container is a binary little-endian point cloud with a text header.
//! It stores exactly the public anchor fields; decoders live in a separate
//! sidecar and private decoders in a key file.

use std::collections::HashSet;
use std::fs;
use std::io::{self, BufRead, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::densify::{dbscan, default_eps, NOISE};
use crate::nn::Mlp;
use crate::scene::{AnchorPoint, DecoderSet, KeyBundle, Origin, Scene, SceneError, FEATURE_DIM};

pub const KEY_MAGIC: &[u8; 8] = b"SGKEY\0\0\x01";
pub const DECODER_MAGIC: &[u8; 8] = b"SGDEC\0\0\x01";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: cannot parse: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    Key { path: PathBuf, source: SceneError },
    #[error("{path}: key built for k = {got_k}, {got_bits:?} bits; expected k = {want_k}, {want_bits:?} bits")]
    KeyMismatch {
        path: PathBuf,
        got_k: usize,
        got_bits: Option<usize>,
        want_k: usize,
        want_bits: Option<usize>,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, detail: impl Into<String>) -> IoError {
    IoError::Parse {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Element name, vertex count and ordered `(type, name)` properties.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schema {
    pub element: String,
    pub count: usize,
    pub properties: Vec<(String, String)>,
}

impl Schema {
    /// The anchor-cloud schema for fan-out `k`.
    pub fn anchors(k: usize, count: usize) -> Self {
        let mut names: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
        names.extend((0..FEATURE_DIM).map(|i| format!("f_anchor_feat_{i}")));
        names.extend((0..3).map(|i| format!("scale_{i}")));
        names.extend((0..3 * k).map(|i| format!("f_offset_{i}")));
        Self {
            element: "vertex".into(),
            count,
            properties: names.into_iter().map(|n| ("float".into(), n)).collect(),
        }
    }

    pub fn header(&self) -> String {
        let mut s = format!(
            "ply\nformat binary_little_endian 1.0\nelement {} {}\n",
            self.element, self.count
        );
        for (t, n) in &self.properties {
            s.push_str(&format!("property {t} {n}\n"));
        }
        s.push_str("end_header\n");
        s
    }

    /// Reads a header from `r`, leaving it positioned at the payload.
    pub fn read(mut r: impl BufRead) -> Result<(Self, usize), String> {
        let mut line = String::new();
        let mut consumed = 0;
        let mut next = |line: &mut String| -> Result<(), String> {
            line.clear();
            let n = r.read_line(line).map_err(|e| e.to_string())?;
            if n == 0 {
                return Err("unexpected end of header".into());
            }
            consumed += n;
            Ok(())
        };
        next(&mut line)?;
        if line.trim_end() != "ply" {
            return Err("missing `ply` magic".into());
        }
        next(&mut line)?;
        if line.trim_end() != "format binary_little_endian 1.0" {
            return Err(format!("unsupported format line `{}`", line.trim_end()));
        }
        let mut element = None;
        let mut properties = Vec::new();
        loop {
            next(&mut line)?;
            let words: Vec<&str> = line.split_whitespace().collect();
            match words.as_slice() {
                ["end_header"] => break,
                ["comment", ..] => {}
                ["element", name, count] => {
                    if element.is_some() {
                        return Err("more than one element".into());
                    }
                    let count: usize = count.parse().map_err(|_| format!("bad element count `{count}`"))?;
                    element = Some((name.to_string(), count));
                }
                ["property", ty, name] if element.is_some() => properties.push((ty.to_string(), name.to_string())),
                _ => return Err(format!("unexpected header line `{}`", line.trim_end())),
            }
        }
        let (element, count) = element.ok_or("no element declared")?;
        Ok((
            Self {
                element,
                count,
                properties,
            },
            consumed,
        ))
    }

    pub fn read_file(path: &Path) -> Result<Self, IoError> {
        let f = fs::File::open(path).map_err(io_err(path))?;
        Self::read(io::BufReader::new(f))
            .map(|(s, _)| s)
            .map_err(|d| parse_err(path, d))
    }
}

/// Rounds every stored field to `f32`, the container's precision, so the
/// in-memory scene equals what a reader will see.
pub fn quantize(scene: &mut Scene) {
    let q = |v: &mut f64| *v = *v as f32 as f64;
    for a in &mut scene.anchors {
        a.position.iter_mut().for_each(q);
        a.feature.iter_mut().for_each(q);
        a.scaling_raw.iter_mut().for_each(q);
        for o in &mut a.offsets {
            o.iter_mut().for_each(q);
        }
    }
}

pub fn container_bytes(scene: &Scene) -> Vec<u8> {
    let schema = Schema::anchors(scene.k, scene.len());
    let mut out = schema.header().into_bytes();
    let mut push = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    for a in &scene.anchors {
        a.position.iter().for_each(|v| push(*v));
        a.feature.iter().for_each(|v| push(*v));
        a.scaling_raw.iter().for_each(|v| push(*v));
        for o in &a.offsets {
            o.iter().for_each(|v| push(*v));
        }
    }
    out
}

/// Writes the anchor cloud. Γ membership is not stored.
pub fn write_container(scene: &Scene, path: &Path) -> Result<(), IoError> {
    fs::write(path, container_bytes(scene)).map_err(io_err(path))
}

/// Parses container bytes. Anchors come back tagged `Origin::Ori`, since
/// stream membership is never written.
pub fn parse_container(bytes: &[u8]) -> Result<Scene, String> {
    let (schema, header_len) = Schema::read(bytes)?;
    let n_props = schema.properties.len();
    let fixed = 3 + FEATURE_DIM + 3;
    if n_props < fixed || (n_props - fixed) % 3 != 0 {
        return Err(format!("{n_props} properties do not form an anchor record"));
    }
    let k = (n_props - fixed) / 3;
    if schema != Schema::anchors(k, schema.count) {
        return Err("property list is not the anchor schema".into());
    }
    let payload = &bytes[header_len..];
    let want = schema.count * n_props * 4;
    if payload.len() != want {
        return Err(format!("payload is {} bytes, expected {want}", payload.len()));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let anchors = values
        .chunks_exact(n_props)
        .map(|r| {
            let mut feature = [0.0; FEATURE_DIM];
            feature.copy_from_slice(&r[3..3 + FEATURE_DIM]);
            let s = 3 + FEATURE_DIM;
            AnchorPoint {
                position: Vector3::new(r[0], r[1], r[2]),
                feature,
                scaling_raw: Vector3::new(r[s], r[s + 1], r[s + 2]),
                offsets: r[fixed..].chunks_exact(3).map(Vector3::from_column_slice).collect(),
                origin: Origin::Ori,
            }
        })
        .collect();
    Ok(Scene { k, anchors })
}

pub fn read_container(path: &Path) -> Result<Scene, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    parse_container(&bytes).map_err(|d| parse_err(path, d))
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_mlp(out: &mut Vec<u8>, m: &Mlp) {
    for t in m.params() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Cursor over a little-endian byte slice.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or("truncated file")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")) as usize)
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, String> {
        Ok(self
            .take(n.checked_mul(8).ok_or("size overflow")?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
            .collect())
    }

    fn mlp(&mut self, dims: (usize, usize, usize)) -> Result<Mlp, String> {
        let (i, h, o) = dims;
        let err = |e: crate::autodiff::AutodiffError| e.to_string();
        Ok(Mlp {
            w1: Tensor::matrix(i, h, self.f64s(i * h)?).map_err(err)?,
            b1: Tensor::vector(self.f64s(h)?),
            w2: Tensor::matrix(h, o, self.f64s(h * o)?).map_err(err)?,
            b2: Tensor::vector(self.f64s(o)?),
        })
    }

    fn done(&self) -> Result<(), String> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(format!("{} trailing bytes", self.buf.len() - self.pos))
        }
    }
}

pub fn decoder_bytes(dec: &DecoderSet) -> Vec<u8> {
    let mut out = DECODER_MAGIC.to_vec();
    put_u32(&mut out, dec.k);
    out.extend_from_slice(&dec.distance_unit.to_le_bytes());
    for m in dec.mlps() {
        for d in [m.input_dim(), m.hidden_dim(), m.output_dim()] {
            put_u32(&mut out, d);
        }
    }
    for m in dec.mlps() {
        put_mlp(&mut out, m);
    }
    out
}

pub fn parse_decoders(bytes: &[u8]) -> Result<DecoderSet, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != DECODER_MAGIC {
        return Err("not a decoder file".into());
    }
    let k = r.u32()?;
    let distance_unit = r.f64s(1)?[0];
    let mut dims = Vec::new();
    for _ in 0..5 {
        dims.push((r.u32()?, r.u32()?, r.u32()?));
    }
    let mut mlps = Vec::new();
    for d in dims {
        mlps.push(r.mlp(d)?);
    }
    r.done()?;
    let [weights, color, opacity, rotation, scale]: [Mlp; 5] = mlps.try_into().expect("five");
    let dec = DecoderSet {
        k,
        distance_unit,
        weights,
        color,
        opacity,
        rotation,
        scale,
    };
    dec.check_shapes().map_err(|e| e.to_string())?;
    Ok(dec)
}

pub fn write_decoders(dec: &DecoderSet, path: &Path) -> Result<(), IoError> {
    fs::write(path, decoder_bytes(dec)).map_err(io_err(path))
}

pub fn read_decoders(path: &Path) -> Result<DecoderSet, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    parse_decoders(&bytes).map_err(|d| parse_err(path, d))
}

/// Magic, the bundle's checksummed payload, then the checksum itself.
pub fn key_bytes(key: &KeyBundle) -> Vec<u8> {
    let mut out = KEY_MAGIC.to_vec();
    out.extend_from_slice(&key.payload_bytes());
    out.extend_from_slice(&key.checksum().to_le_bytes());
    out
}

pub fn parse_key(bytes: &[u8]) -> Result<KeyBundle, KeyParseError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != KEY_MAGIC {
        return Err("not a key file".to_string().into());
    }
    let version = r.u32()?;
    let k = r.u32()?;
    let n_bits = r.u32()?;
    let nets = if n_bits > 0 { 6 } else { 5 };
    let mut dims = Vec::new();
    for _ in 0..nets {
        dims.push((r.u32()?, r.u32()?, r.u32()?));
    }
    let mut mlps = Vec::new();
    for d in dims {
        mlps.push(r.mlp(d)?);
    }
    let checksum = r.u64()?;
    r.done()?;
    let bits = (n_bits > 0).then(|| mlps.pop().expect("bit head"));
    let heads: [Mlp; 5] = mlps.try_into().expect("five");
    KeyBundle::from_parts(k, version as u32, heads, bits, checksum).map_err(KeyParseError::Scene)
}

#[derive(Debug)]
pub enum KeyParseError {
    Format(String),
    Scene(SceneError),
}

impl From<String> for KeyParseError {
    fn from(s: String) -> Self {
        Self::Format(s)
    }
}

impl From<&str> for KeyParseError {
    fn from(s: &str) -> Self {
        Self::Format(s.to_string())
    }
}

pub fn write_key(key: &KeyBundle, path: &Path) -> Result<(), IoError> {
    fs::write(path, key_bytes(key)).map_err(io_err(path))
}

/// Loads a key and checks it against the run's `k` and bit count.
pub fn read_key(path: &Path, k: usize, n_bits: Option<usize>) -> Result<KeyBundle, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let key = parse_key(&bytes).map_err(|e| match e {
        KeyParseError::Format(d) => parse_err(path, d),
        KeyParseError::Scene(source) => IoError::Key {
            path: path.to_path_buf(),
            source,
        },
    })?;
    if key.k != k || key.n_bits() != n_bits {
        return Err(IoError::KeyMismatch {
            path: path.to_path_buf(),
            got_k: key.k,
            got_bits: key.n_bits(),
            want_k: k,
            want_bits: n_bits,
        });
    }
    Ok(key)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FormatReport {
    pub pass: bool,
    pub element_matches: bool,
    pub missing: Vec<String>,
    pub extra: Vec<String>,
    pub type_mismatch: Vec<String>,
    pub reordered: bool,
}

/// Compares a file's declared properties (names, types, order) with a
/// baseline schema. Vertex counts are not compared.
pub fn audit_format(path: &Path, baseline: &Schema) -> Result<FormatReport, IoError> {
    let found = Schema::read_file(path)?;
    Ok(compare_schema(&found, baseline))
}

pub fn compare_schema(found: &Schema, baseline: &Schema) -> FormatReport {
    let names = |s: &Schema| s.properties.iter().map(|(_, n)| n.clone()).collect::<Vec<_>>();
    let (fnames, bnames) = (names(found), names(baseline));
    let fset: HashSet<&String> = fnames.iter().collect();
    let bset: HashSet<&String> = bnames.iter().collect();
    let missing: Vec<String> = bnames.iter().filter(|n| !fset.contains(n)).cloned().collect();
    let extra: Vec<String> = fnames.iter().filter(|n| !bset.contains(n)).cloned().collect();
    let type_mismatch: Vec<String> = found
        .properties
        .iter()
        .filter(|(t, n)| baseline.properties.iter().any(|(bt, bn)| bn == n && bt != t))
        .map(|(_, n)| n.clone())
        .collect();
    let common_f: Vec<&String> = fnames.iter().filter(|n| bset.contains(n)).collect();
    let common_b: Vec<&String> = bnames.iter().filter(|n| fset.contains(n)).collect();
    let reordered = common_f != common_b;
    let element_matches = found.element == baseline.element;
    FormatReport {
        pass: element_matches && missing.is_empty() && extra.is_empty() && type_mismatch.is_empty() && !reordered,
        element_matches,
        missing,
        extra,
        type_mismatch,
        reordered,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryAuditConfig {
    /// Flag a region whose density exceeds its surroundings by this factor.
    pub suspicion_factor: f64,
    /// Neighbors used for per-point density estimates.
    pub knn: usize,
    /// Minimum points for a dense candidate cluster.
    pub min_pts: usize,
    /// Shell width around a region, as a fraction of the region's extent.
    pub shell: f64,
    pub histogram_bins: usize,
}

impl Default for GeometryAuditConfig {
    fn default() -> Self {
        Self {
            suspicion_factor: 3.0,
            knn: 8,
            min_pts: 5,
            shell: 0.5,
            histogram_bins: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Region {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Region {
    fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    fn volume(&self) -> f64 {
        (0..3).map(|i| self.max[i] - self.min[i]).product()
    }

    fn grown(&self, by: f64) -> Region {
        let mut r = self.clone();
        for i in 0..3 {
            let ext = (self.max[i] - self.min[i]).max(f64::EPSILON);
            r.min[i] -= ext * by;
            r.max[i] += ext * by;
        }
        r
    }

    pub fn hull(points: &[Vector3<f64>]) -> Option<Region> {
        let first = points.first()?;
        let (mut min, mut max) = (*first, *first);
        for p in points {
            min = min.inf(p);
            max = max.sup(p);
        }
        Some(Region {
            min: min.into(),
            max: max.into(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegionReport {
    pub region: Region,
    pub points_inside: usize,
    pub inside_density: f64,
    pub shell_density: f64,
    pub ratio: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GeometryReport {
    pub points: usize,
    /// Sizes of the clusters found in the whole cloud.
    pub cluster_sizes: Vec<usize>,
    pub noise: usize,
    pub regions: Vec<RegionReport>,
    /// `(upper bin edge, count)` of nearest-neighbor distances.
    pub nn_histogram: Vec<(f64, usize)>,
    pub flagged: usize,
}

/// Density of `points` in `region` against the shell around it.
pub fn region_density(points: &[Vector3<f64>], region: &Region, shell: f64) -> (usize, f64, f64) {
    let outer = region.grown(shell);
    let inside = points.iter().filter(|p| region.contains(p)).count();
    let in_shell = points.iter().filter(|p| outer.contains(p) && !region.contains(p)).count();
    let vi = region.volume().max(f64::MIN_POSITIVE);
    let vs = (outer.volume() - region.volume()).max(f64::MIN_POSITIVE);
    (inside, inside as f64 / vi, in_shell as f64 / vs)
}

fn knn_distances(points: &[Vector3<f64>], k: usize) -> Vec<f64> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| (q - p).norm())
                .collect();
            if d.is_empty() {
                return f64::INFINITY;
            }
            let kk = k.min(d.len()) - 1;
            d.select_nth_unstable_by(kk, f64::total_cmp);
            d[kk]
        })
        .collect()
}

fn median(v: &[f64]) -> f64 {
    let mut s: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    if s.is_empty() {
        return f64::NAN;
    }
    s.sort_by(f64::total_cmp);
    let m = s.len();
    if m % 2 == 1 {
        s[m / 2]
    } else {
        0.5 * (s[m / 2 - 1] + s[m / 2])
    }
}

/// Structural audit of an anchor cloud. Candidate regions are the given
/// suspect box, or else clusters of points whose k-NN density is at least
/// `suspicion_factor` times the median; each region's density is compared
/// with the shell around it.
pub fn audit_geometry(points: &[Vector3<f64>], suspect: Option<&Region>, cfg: &GeometryAuditConfig) -> GeometryReport {
    let n = points.len();
    let eps = default_eps(points);
    let labels = eps.map(|e| dbscan(points, e, cfg.min_pts)).unwrap_or_else(|| vec![NOISE; n]);
    let n_clusters = labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize);
    let mut cluster_sizes = vec![0; n_clusters];
    for &l in labels.iter().filter(|l| **l != NOISE) {
        cluster_sizes[l as usize] += 1;
    }
    let noise = labels.iter().filter(|l| **l == NOISE).count();

    let nn = knn_distances(points, 1);
    let finite_nn: Vec<f64> = nn.iter().copied().filter(|d| d.is_finite()).collect();
    let max_nn = finite_nn.iter().copied().fold(0.0, f64::max);
    let bins = cfg.histogram_bins.max(1);
    let width = if max_nn > 0.0 { max_nn / bins as f64 } else { 1.0 };
    let mut nn_histogram: Vec<(f64, usize)> = (1..=bins).map(|b| (b as f64 * width, 0)).collect();
    for d in &finite_nn {
        let b = ((d / width) as usize).min(bins - 1);
        nn_histogram[b].1 += 1;
    }

    let candidates: Vec<Region> = match suspect {
        Some(r) => vec![r.clone()],
        None if n > cfg.knn => {
            let rk = knn_distances(points, cfg.knn);
            // density ∝ r_k⁻³, so "factor× denser" means r_k below median / factor^(1/3)
            let cut = median(&rk) / cfg.suspicion_factor.cbrt();
            let dense: Vec<Vector3<f64>> = points.iter().zip(&rk).filter(|(_, r)| **r <= cut).map(|(p, _)| *p).collect();
            let link = 2.0 * cut;
            let dl = dbscan(&dense, link, cfg.min_pts);
            let m = dl.iter().copied().max().unwrap_or(NOISE);
            (0..=m)
                .filter_map(|c| {
                    let members: Vec<Vector3<f64>> = dense.iter().zip(&dl).filter(|(_, l)| **l == c).map(|(p, _)| *p).collect();
                    Region::hull(&members)
                })
                .collect()
        }
        None => Vec::new(),
    };
    let regions: Vec<RegionReport> = candidates
        .into_iter()
        .map(|region| {
            let (points_inside, inside_density, shell_density) = region_density(points, &region, cfg.shell);
            let ratio = if shell_density > 0.0 {
                inside_density / shell_density
            } else if inside_density > 0.0 {
                f64::INFINITY
            } else {
                0.0
            };
            let flagged = points_inside >= cfg.min_pts && ratio > cfg.suspicion_factor;
            RegionReport {
                region,
                points_inside,
                inside_density,
                shell_density,
                ratio,
                flagged,
            }
        })
        .collect();
    let flagged = regions.iter().filter(|r| r.flagged).count();
    GeometryReport {
        points: n,
        cluster_sizes,
        noise,
        regions,
        nn_histogram,
        flagged,
    }
}

/// Density inside `region` relative to the density of the whole cloud's hull.
pub fn density_ratio(points: &[Vector3<f64>], region: &Region) -> f64 {
    let Some(hull) = Region::hull(points) else {
        return 0.0;
    };
    let inside = points.iter().filter(|p| region.contains(p)).count() as f64;
    let global = points.len() as f64 / hull.volume().max(f64::MIN_POSITIVE);
    (inside / region.volume().max(f64::MIN_POSITIVE)) / global
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Attack {
    /// Remove `floor(n·percent/100)` anchors chosen uniformly.
    Prune { percent: f64 },
    /// Add iid `N(0, σ²)` to every anchor coordinate.
    Noise { sigma: f64 },
}

#[derive(Debug, Error, PartialEq)]
pub enum AttackError {
    #[error("prune percentage {0} outside [0, 100)")]
    Percent(f64),
    #[error("noise sigma {0} must be non-negative")]
    Sigma(f64),
}

pub fn perturb(scene: &Scene, attack: Attack, seed: u64) -> Result<Scene, AttackError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = scene.clone();
    match attack {
        Attack::Prune { percent } => {
            if !(0.0..100.0).contains(&percent) {
                return Err(AttackError::Percent(percent));
            }
            let n = scene.len();
            let remove = (n as f64 * percent / 100.0).floor() as usize;
            let dead: HashSet<usize> = sample(&mut rng, n, remove).into_iter().collect();
            out.anchors = scene
                .anchors
                .iter()
                .enumerate()
                .filter(|(i, _)| !dead.contains(i))
                .map(|(_, a)| a.clone())
                .collect();
        }
        Attack::Noise { sigma } => {
            if !(sigma >= 0.0) {
                return Err(AttackError::Sigma(sigma));
            }
            if sigma > 0.0 {
                let normal = Normal::new(0.0, sigma).expect("valid sigma");
                for a in &mut out.anchors {
                    for c in a.position.iter_mut() {
                        *c += normal.sample(&mut rng);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_all(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))
}

/// Reads a whole file with path context on failure.
pub fn read_all(path: &Path) -> Result<Vec<u8>, IoError> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(io_err(path))?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_scene(seed: u64, n: usize, k: usize) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anchors = (0..n)
            .map(|_| {
                let p = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let mut a = AnchorPoint::new(p, 0.1, k, if rng.random_bool(0.5) { Origin::Ori } else { Origin::Hid }, &mut rng);
                a.feature.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
                a
            })
            .collect();
        let mut s = Scene { k, anchors };
        quantize(&mut s);
        s
    }

    fn fixture(name: &str) -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
    }

    #[test]
    fn container_round_trip_is_exact() {
        let scene = random_scene(1, 17, 10);
        let bytes = container_bytes(&scene);
        let back = parse_container(&bytes).unwrap();
        for (a, b) in scene.anchors.iter().zip(&back.anchors) {
            assert_eq!(a.position, b.position);
            assert_eq!(a.feature, b.feature);
            assert_eq!(a.scaling_raw, b.scaling_raw);
            assert_eq!(a.offsets, b.offsets);
        }
        assert_eq!(container_bytes(&back), bytes);
    }

    #[test]
    fn container_size_is_header_plus_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let scene = random_scene(2, 23, 10);
        write_container(&scene, &path).unwrap();
        let header = Schema::anchors(10, 23).header().len();
        assert_eq!(fs::metadata(&path).unwrap().len() as usize, header + 23 * (3 + 32 + 3 + 30) * 4);
    }

    #[test]
    fn origin_tags_do_not_reach_the_file() {
        let mut a = random_scene(3, 9, 4);
        let mut b = a.clone();
        a.anchors.iter_mut().for_each(|x| x.origin = Origin::Ori);
        b.anchors.iter_mut().for_each(|x| x.origin = Origin::Hid);
        assert_eq!(container_bytes(&a), container_bytes(&b));
        let c = random_scene(4, 9, 4);
        let (ha, hc) = (Schema::anchors(4, 9).header(), Schema::anchors(4, 9).header());
        assert_eq!(&container_bytes(&a)[..ha.len()], &container_bytes(&c)[..hc.len()]);
    }

    #[test]
    fn schema_matches_checked_in_fixture() {
        let fx = Schema::read_file(&fixture("anchor_schema_k10.ply")).unwrap();
        assert_eq!(fx, Schema::anchors(10, 0));
    }

    #[test]
    fn format_audit_outcomes() {
        let dir = tempfile::tempdir().unwrap();
        let baseline = Schema::read_file(&fixture("anchor_schema_k10.ply")).unwrap();
        let ok = dir.path().join("ok.ply");
        write_container(&random_scene(5, 4, 10), &ok).unwrap();
        assert!(audit_format(&ok, &baseline).unwrap().pass);

        let mut injected = Schema::anchors(10, 0);
        injected.properties.insert(20, ("float".into(), "f_hidden_0".into()));
        let bad = dir.path().join("bad.ply");
        fs::write(&bad, injected.header()).unwrap();
        let r = audit_format(&bad, &baseline).unwrap();
        assert!(!r.pass);
        assert_eq!(r.extra, vec!["f_hidden_0".to_string()]);

        let r = audit_format(&fixture("coupled_feature16_schema.ply"), &baseline).unwrap();
        assert!(!r.pass);
        assert!(r.extra.contains(&"f_15".to_string()) && r.missing.contains(&"f_anchor_feat_0".to_string()));

        let mut swapped = Schema::anchors(10, 0);
        swapped.properties.swap(0, 1);
        let r = compare_schema(&swapped, &baseline);
        assert!(!r.pass && r.reordered && r.extra.is_empty());

        let junk = dir.path().join("junk.ply");
        fs::write(&junk, b"not a point cloud").unwrap();
        assert!(matches!(audit_format(&junk, &baseline), Err(IoError::Parse { .. })));
    }

    #[test]
    fn truncated_container_is_rejected() {
        let bytes = container_bytes(&random_scene(6, 3, 2));
        assert!(parse_container(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn decoder_and_key_files_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dec = DecoderSet::new(3, &mut rng);
        assert_eq!(parse_decoders(&decoder_bytes(&dec)).unwrap(), dec);
        for bits in [None, Some(48)] {
            let key = KeyBundle::new(3, bits, &mut rng);
            let back = parse_key(&key_bytes(&key)).unwrap();
            assert_eq!(back, key);
        }
    }

    #[test]
    fn key_file_rejects_corruption_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.key");
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let key = KeyBundle::new(4, Some(8), &mut rng);
        write_key(&key, &path).unwrap();
        assert!(read_key(&path, 4, Some(8)).is_ok());
        assert!(matches!(read_key(&path, 5, Some(8)), Err(IoError::KeyMismatch { .. })));
        assert!(matches!(read_key(&path, 4, None), Err(IoError::KeyMismatch { .. })));
        let mut bytes = fs::read(&path).unwrap();
        bytes[100] ^= 1;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_key(&path, 4, Some(8)),
            Err(IoError::Key { source: SceneError::KeyIntegrity { .. }, .. })
        ));
        assert!(matches!(read_key(&dir.path().join("none"), 4, None), Err(IoError::Io { .. })));
    }

    #[test]
    fn container_is_independent_of_the_key() {
        let scene = random_scene(9, 12, 10);
        let mut r1 = ChaCha8Rng::seed_from_u64(10);
        let mut r2 = ChaCha8Rng::seed_from_u64(11);
        let (k1, k2) = (KeyBundle::new(10, Some(4), &mut r1), KeyBundle::new(10, Some(4), &mut r2));
        assert_ne!(key_bytes(&k1), key_bytes(&k2));
        // the writer has no key parameter; bytes depend on public state only
        assert_eq!(container_bytes(&scene), container_bytes(&scene.clone()));
    }

    fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::new(rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)))
            .collect()
    }

    #[test]
    fn uniform_cloud_has_no_flagged_region() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pts = uniform(&mut rng, 800, 0.0, 4.0);
        let r = audit_geometry(&pts, None, &GeometryAuditConfig::default());
        assert_eq!(r.flagged, 0, "{:?}", r.regions);
        assert_eq!(r.nn_histogram.iter().map(|b| b.1).sum::<usize>(), 800);
    }

    #[test]
    fn dense_blob_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut pts = uniform(&mut rng, 800, 0.0, 4.0);
        // background density 12.5 per unit³; blob of side 0.8 at 5× → 32 points
        let blob = uniform(&mut rng, 32, 1.6, 2.4);
        pts.extend(&blob);
        let r = audit_geometry(&pts, None, &GeometryAuditConfig::default());
        assert!(r.flagged >= 1, "{:?}", r.regions);
        let hit = r.regions.iter().find(|g| g.flagged).unwrap();
        let c = Vector3::new(2.0, 2.0, 2.0);
        assert!(hit.region.contains(&c) || Region::hull(&blob).unwrap().contains(&Vector3::from(hit.region.min)));

        let suspect = Region { min: [1.6; 3], max: [2.4; 3] };
        let r = audit_geometry(&pts, Some(&suspect), &GeometryAuditConfig::default());
        assert_eq!(r.flagged, 1);
        assert!(r.regions[0].ratio > 3.0);
    }

    #[test]
    fn prune_and_noise_attacks() {
        let scene = random_scene(14, 200, 2);
        assert_eq!(perturb(&scene, Attack::Prune { percent: 0.0 }, 1).unwrap(), scene);
        assert_eq!(perturb(&scene, Attack::Noise { sigma: 0.0 }, 1).unwrap(), scene);
        assert_eq!(perturb(&scene, Attack::Prune { percent: 5.0 }, 1).unwrap().len(), 190);
        assert_eq!(perturb(&scene, Attack::Prune { percent: 15.0 }, 1).unwrap().len(), 170);
        assert_eq!(perturb(&scene, Attack::Prune { percent: 100.0 }, 1), Err(AttackError::Percent(100.0)));
        assert_eq!(perturb(&scene, Attack::Noise { sigma: -1.0 }, 1), Err(AttackError::Sigma(-1.0)));
        for sigma in [0.05, 0.1, 0.15] {
            let a = perturb(&scene, Attack::Noise { sigma }, 3).unwrap();
            let b = perturb(&scene, Attack::Noise { sigma }, 3).unwrap();
            assert_eq!(a, b);
            let d: Vec<f64> = a.anchors.iter().zip(&scene.anchors).flat_map(|(x, y)| (x.position - y.position).iter().copied().collect::<Vec<_>>()).collect();
            let sd = (d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt();
            assert!((sd / sigma - 1.0).abs() < 0.15, "σ={sigma} sample sd {sd}");
            assert_eq!(a.anchors[0].feature, scene.anchors[0].feature);
        }
    }
}
