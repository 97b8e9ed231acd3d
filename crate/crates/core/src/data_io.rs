//! Synthetic roadside scenes and the on-disk formats: raw clouds, label and
//! detection JSON, dataset manifests and the portable weights file.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::bev_intersection;
use crate::head::{Box3D, Detection, ObjectClass};
use crate::pillar::{GridSpec, PointCloud};
use crate::rng::Rng64;
use crate::tensor::{ParamStore, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Inclusive `[min, max]` object count per class.
    pub counts: BTreeMap<ObjectClass, [usize; 2]>,
    /// Mean `(l, w, h)` per class in meters.
    pub size_priors: BTreeMap<ObjectClass, [f64; 3]>,
    /// Relative uniform jitter applied to every prior dimension.
    pub size_jitter: f64,
    pub points_per_box: usize,
    pub background_points: usize,
    pub noise_sigma: f64,
    /// Fraction of box points placed on the side faces.
    pub surface_fraction: f64,
    pub ground_z: f64,
    /// Placement attempts per box before giving up.
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            counts: ObjectClass::ALL.into_iter().map(|c| (c, [1, 4])).collect(),
            size_priors: [
                (ObjectClass::Vehicle, [4.2, 1.8, 1.5]),
                (ObjectClass::Pedestrian, [0.7, 0.7, 1.7]),
                (ObjectClass::Cyclist, [1.8, 0.7, 1.6]),
            ]
            .into_iter()
            .collect(),
            size_jitter: 0.1,
            points_per_box: 64,
            background_points: 512,
            noise_sigma: 0.02,
            surface_fraction: 0.7,
            ground_z: -1.8,
            max_retries: 200,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        for (c, [lo, hi]) in &self.counts {
            if lo > hi {
                return Err(Error::Config(format!("scene count range for {c} is [{lo}, {hi}]")));
            }
        }
        for c in ObjectClass::ALL {
            let p = self.size_priors.get(&c).ok_or_else(|| {
                Error::Config(format!("scene size prior for {c} is missing"))
            })?;
            if p.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Config(format!("scene size prior for {c} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.size_jitter) {
            return Err(Error::Config("scene size_jitter must lie in [0, 1)".into()));
        }
        if self.points_per_box == 0 {
            return Err(Error::Config("scene points_per_box must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(0.0..=1.0).contains(&self.surface_fraction) {
            return Err(Error::Config("scene noise/surface settings out of range".into()));
        }
        Ok(())
    }
}

/// Generated points stay this far inside their box, relative to each half
/// extent, so single-precision storage cannot push them out.
const INSET: f64 = 0.999;

fn footprint_inside(b: &Box3D, grid: &GridSpec) -> bool {
    b.footprint().iter().all(|p| {
        p[0] > grid.x_range[0] && p[0] < grid.x_range[1] && p[1] > grid.y_range[0] && p[1] < grid.y_range[1]
    })
}

fn sample_box_point(rng: &mut Rng64, b: &Box3D, cfg: &SceneConfig) -> [f32; 4] {
    let half = [b.size[0] / 2.0 * INSET, b.size[1] / 2.0 * INSET, b.size[2] / 2.0 * INSET];
    let mut local = [
        rng.uniform(-half[0], half[0]),
        rng.uniform(-half[1], half[1]),
        rng.uniform(-half[2], half[2]),
    ];
    if rng.next_f64() < cfg.surface_fraction {
        // pin one horizontal coordinate to a side face
        let face = rng.int_inclusive(0, 3) as usize;
        let (axis, sign) = (face / 2, if face.is_multiple_of(2) { 1.0 } else { -1.0 });
        local[axis] = sign * half[axis];
    }
    for (v, h) in local.iter_mut().zip(half) {
        *v = (*v + cfg.noise_sigma * rng.normal()).clamp(-h, h);
    }
    let (s, c) = b.yaw.sin_cos();
    let x = b.center[0] + local[0] * c - local[1] * s;
    let y = b.center[1] + local[0] * s + local[1] * c;
    let z = b.center[2] + local[2];
    [x as f32, y as f32, z as f32, rng.uniform(0.2, 0.9) as f32]
}

/// Deterministic synthetic scene: non-overlapping boxes whose footprints lie
/// inside the grid, surface-biased points inside each box and ground points
/// outside every box.
pub fn generate_scene(cfg: &SceneConfig, grid: &GridSpec, seed: u64) -> Result<(PointCloud, Vec<Box3D>)> {
    cfg.validate()?;
    grid.validate()?;
    let mut rng = Rng64::new(seed);
    let mut boxes: Vec<Box3D> = Vec::new();
    for class in ObjectClass::ALL {
        let [lo, hi] = cfg.counts.get(&class).copied().unwrap_or([0, 0]);
        let n = rng.int_inclusive(lo as u64, hi as u64) as usize;
        let prior = cfg.size_priors[&class];
        for k in 0..n {
            let mut placed = None;
            for _ in 0..cfg.max_retries {
                let size = prior.map(|p| p * (1.0 + cfg.size_jitter * rng.uniform(-1.0, 1.0)));
                let cand = Box3D::new(
                    class,
                    [
                        rng.uniform(grid.x_range[0], grid.x_range[1]),
                        rng.uniform(grid.y_range[0], grid.y_range[1]),
                        cfg.ground_z + size[2] / 2.0,
                    ],
                    size,
                    rng.uniform(-PI, PI),
                );
                if footprint_inside(&cand, grid) && boxes.iter().all(|b| bev_intersection(b, &cand) == 0.0) {
                    placed = Some(cand);
                    break;
                }
            }
            let Some(b) = placed else {
                return Err(Error::Scene(format!(
                    "could not place {class} #{} of {n} without overlap after {} attempts \
                     (seed {seed}, counts {:?}, grid {:?})",
                    k + 1,
                    cfg.max_retries,
                    cfg.counts,
                    grid
                )));
            };
            boxes.push(b);
        }
    }
    let mut points = Vec::with_capacity(boxes.len() * cfg.points_per_box + cfg.background_points);
    for b in &boxes {
        for _ in 0..cfg.points_per_box {
            points.push(sample_box_point(&mut rng, b, cfg));
        }
    }
    let mut placed = 0;
    let mut attempts = 0;
    while placed < cfg.background_points && attempts < cfg.background_points * 100 {
        attempts += 1;
        let x = rng.uniform(grid.x_range[0], grid.x_range[1]);
        let y = rng.uniform(grid.y_range[0], grid.y_range[1]);
        let z = cfg.ground_z + cfg.noise_sigma * rng.normal();
        let r = rng.uniform(0.0, 0.3);
        let p = [x as f32, y as f32, z as f32, r as f32];
        let q = [p[0] as f64, p[1] as f64, p[2] as f64];
        if boxes.iter().any(|b| b.contains([q[0], q[1], b.center[2]])) {
            continue;
        }
        points.push(p);
        placed += 1;
    }
    Ok((PointCloud::new(points), boxes))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Rows of four little-endian `f32` `(x, y, z, r)`, no header.
pub fn save_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut bytes = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.points {
        for v in p {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write(path, &bytes)
}

pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    parse_cloud(path, &read(path)?)
}

pub fn parse_cloud(path: &Path, bytes: &[u8]) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(16) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("{} bytes is not a whole number of 16-byte points", bytes.len()),
        });
    }
    let points = bytes
        .chunks_exact(16)
        .map(|row| {
            let f = |i: usize| f32::from_le_bytes(row[4 * i..4 * i + 4].try_into().expect("4 bytes"));
            [f(0), f(1), f(2), f(3)]
        })
        .collect();
    Ok(PointCloud::new(points))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRecord {
    class: String,
    center: [f64; 3],
    size: [f64; 3],
    yaw: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

impl LabelRecord {
    fn from_box(b: &Box3D, score: Option<f64>) -> Self {
        Self {
            class: b.class.name().to_string(),
            center: b.center,
            size: b.size,
            yaw: b.yaw,
            score,
        }
    }

    fn to_box(&self) -> Result<Box3D> {
        Ok(Box3D::new(self.class.parse()?, self.center, self.size, self.yaw))
    }
}

fn json_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v).map_err(|e| Error::Json(e.to_string()))?;
    s.push(b'\n');
    Ok(s)
}

/// JSON array of `{class, center, size, yaw}`; floats print with
/// round-trip precision.
pub fn save_labels(path: &Path, boxes: &[Box3D]) -> Result<()> {
    let recs: Vec<LabelRecord> = boxes.iter().map(|b| LabelRecord::from_box(b, None)).collect();
    write(path, &to_json(&recs)?)
}

/// Loads labels, normalizing yaw to `[-π, π)`.
pub fn load_labels(path: &Path) -> Result<Vec<Box3D>> {
    let recs: Vec<LabelRecord> = serde_json::from_slice(&read(path)?).map_err(|e| json_error(path, e))?;
    recs.iter().map(LabelRecord::to_box).collect()
}

/// Same records as labels with an extra `score`.
pub fn save_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    let recs: Vec<LabelRecord> = dets
        .iter()
        .map(|d| LabelRecord::from_box(&d.bbox, Some(d.score)))
        .collect();
    write(path, &to_json(&recs)?)
}

pub fn load_detections(path: &Path) -> Result<Vec<Detection>> {
    let recs: Vec<LabelRecord> = serde_json::from_slice(&read(path)?).map_err(|e| json_error(path, e))?;
    recs.iter()
        .map(|r| {
            let score = r
                .score
                .ok_or_else(|| json_error(path, "detection record without score"))?;
            Ok(Detection {
                bbox: r.to_box()?,
                score,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub name: String,
    /// Relative to the manifest's directory.
    pub cloud: PathBuf,
    pub labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub split: String,
    pub scenes: Vec<SceneEntry>,
}

/// A manifest with paths resolved against its location.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
}

impl Dataset {
    pub fn cloud_path(&self, s: &SceneEntry) -> PathBuf {
        self.root.join(&s.cloud)
    }

    pub fn labels_path(&self, s: &SceneEntry) -> PathBuf {
        self.root.join(&s.labels)
    }
}

pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    write(path, &to_json(manifest)?)
}

/// Loads a manifest and checks that every referenced file exists.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest =
        serde_json::from_slice(&read(path)?).map_err(|e| json_error(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let ds = Dataset { manifest, root };
    for s in &ds.manifest.scenes {
        for p in [ds.cloud_path(s), ds.labels_path(s)] {
            if !p.is_file() {
                return Err(json_error(path, format!("scene {:?} references missing file {}", s.name, p.display())));
            }
        }
    }
    Ok(ds)
}

const WEIGHTS_MAGIC: &[u8; 4] = b"PMWT";
const WEIGHTS_VERSION: u32 = 1;

/// Portable weights: magic `PMWT`, `u32` version, `u32` count, then per
/// parameter a `u32` name length, UTF-8 name, `u32` rank and `u64` dims,
/// followed by every value as little-endian `f64` in parameter order.
pub fn encode_weights<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, p) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for (_, p) in store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            path: self.path.to_path_buf(),
            detail: format!("truncated at byte {} (wanted {n} more)", self.pos),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_weights<T: Real>(path: &Path, bytes: &[u8]) -> Result<ParamStore<T>> {
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != WEIGHTS_MAGIC {
        return Err(bad("missing PMWT magic".into()));
    }
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(bad(format!("unsupported weights version {version}")));
    }
    let count = r.u32()? as usize;
    let mut heads = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|e| bad(format!("parameter name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > 4 {
            return Err(bad(format!("parameter {name} has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        heads.push((name, shape));
    }
    let mut params = Vec::with_capacity(count);
    for (name, shape) in heads {
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| bad("parameter too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::c(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        params.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(ParamStore::from_named(params))
}

pub fn save_weights<T: Real>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    write(path, &encode_weights(store))
}

/// Loads weights into `store`, requiring identical names and shapes.
pub fn load_weights_into<T: Real>(path: &Path, store: &mut ParamStore<T>) -> Result<()> {
    let loaded: ParamStore<T> = decode_weights(path, &read(path)?)?;
    if loaded.len() != store.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("{} parameters, model has {}", loaded.len(), store.len()),
        });
    }
    for ((ln, lp), (mn, mp)) in loaded.iter().zip(store.iter()) {
        if ln != mn || lp.value.shape() != mp.value.shape() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!(
                    "parameter {ln} {:?} does not match model parameter {mn} {:?}",
                    lp.value.shape(),
                    mp.value.shape()
                ),
            });
        }
    }
    store.set_values(loaded.values())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_valid() {
        let grid = GridSpec::default();
        let cfg = SceneConfig::default();
        let (c1, b1) = generate_scene(&cfg, &grid, 7).unwrap();
        let (c2, b2) = generate_scene(&cfg, &grid, 7).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(b1, b2);
        assert!(!b1.is_empty());
        for (i, a) in b1.iter().enumerate() {
            assert!(grid.cell_of(a.center[0], a.center[1]).is_some());
            for b in &b1[i + 1..] {
                assert_eq!(bev_intersection(a, b), 0.0);
            }
        }
        for (k, b) in b1.iter().enumerate() {
            for p in &c1.points[k * cfg.points_per_box..(k + 1) * cfg.points_per_box] {
                assert!(b.contains([p[0] as f64, p[1] as f64, p[2] as f64]), "{p:?} outside {b:?}");
            }
        }
    }

    #[test]
    fn zero_counts_give_background_only() {
        let cfg = SceneConfig {
            counts: ObjectClass::ALL.into_iter().map(|c| (c, [0, 0])).collect(),
            ..Default::default()
        };
        let (cloud, boxes) = generate_scene(&cfg, &GridSpec::default(), 1).unwrap();
        assert!(boxes.is_empty());
        assert_eq!(cloud.len(), cfg.background_points);
    }

    #[test]
    fn impossible_placement_names_the_spec() {
        let cfg = SceneConfig {
            counts: [(ObjectClass::Vehicle, [40, 40])].into_iter().collect(),
            max_retries: 20,
            ..Default::default()
        };
        let e = generate_scene(&cfg, &GridSpec::default(), 1).unwrap_err();
        assert!(matches!(e, Error::Scene(_)));
        assert!(e.to_string().contains("vehicle"));
    }

    #[test]
    fn cloud_format() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        let cloud = PointCloud::new(vec![[1.5, -2.25, 0.125, 0.5], [f32::MIN_POSITIVE, 3.0, -1.0, 0.0]]);
        save_cloud(&p, &cloud).unwrap();
        assert_eq!(load_cloud(&p).unwrap(), cloud);
        assert_eq!(parse_cloud(&p, &[0u8; 16]).unwrap().len(), 1);
        let e = parse_cloud(&p, &[0u8; 17]).unwrap_err().to_string();
        assert!(e.contains("17 bytes"), "{e}");
    }

    #[test]
    fn labels_roundtrip_and_normalize() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.json");
        let boxes = vec![
            Box3D::new(ObjectClass::Cyclist, [0.1, 1.0 / 3.0, -1.0], [1.7, 0.6, 1.6], 2.0 / 3.0),
            Box3D::new(ObjectClass::Vehicle, [1e-7, 5.0, 0.0], [4.0, 2.0, 1.5], -PI),
        ];
        save_labels(&p, &boxes).unwrap();
        assert_eq!(load_labels(&p).unwrap(), boxes);
        fs::write(&p, "[]").unwrap();
        assert!(load_labels(&p).unwrap().is_empty());
        fs::write(&p, r#"[{"class":"vehicle","center":[0,0,0],"size":[1,1,1],"yaw":3.2}]"#).unwrap();
        assert!((load_labels(&p).unwrap()[0].yaw - (3.2 - 2.0 * PI)).abs() < 1e-15);
        fs::write(&p, r#"[{"class":"bus","center":[0,0,0],"size":[1,1,1],"yaw":0}]"#).unwrap();
        let e = load_labels(&p).unwrap_err().to_string();
        assert!(e.contains("vehicle, pedestrian, cyclist"), "{e}");
    }

    #[test]
    fn weights_roundtrip_and_validation() {
        let store = ParamStore::<f32>::from_named(vec![
            ("a.weight".into(), Tensor::new(&[2, 1, 1, 1], vec![0.5, -1.25]).unwrap()),
            ("a.bias".into(), Tensor::new(&[2], vec![1e-3, 7.0]).unwrap()),
        ]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        save_weights(&p, &store).unwrap();
        let mut other = store.clone();
        other.get_mut(other.find("a.bias").unwrap()).value = Tensor::zeros(&[2]);
        load_weights_into(&p, &mut other).unwrap();
        assert_eq!(other.values(), store.values());
        let bytes = encode_weights(&store);
        assert!(decode_weights::<f64>(&p, &bytes[..bytes.len() - 1]).is_err());
        let mut wrong = ParamStore::<f32>::from_named(vec![("x".into(), Tensor::zeros(&[2]))]);
        assert!(load_weights_into(&p, &mut wrong).is_err());
    }

    #[test]
    fn manifest_paths_are_relative() {
        let dir = tempfile::tempdir().unwrap();
        save_cloud(&dir.path().join("s/c.bin"), &PointCloud::default()).unwrap();
        save_labels(&dir.path().join("s/l.json"), &[]).unwrap();
        let m = DatasetManifest {
            split: "toy".into(),
            scenes: vec![SceneEntry {
                name: "s0".into(),
                cloud: "s/c.bin".into(),
                labels: "s/l.json".into(),
            }],
        };
        let mp = dir.path().join("manifest.json");
        save_manifest(&mp, &m).unwrap();
        let ds = load_manifest(&mp).unwrap();
        assert_eq!(ds.manifest, m);
        fs::remove_file(dir.path().join("s/c.bin")).unwrap();
        assert!(load_manifest(&mp).is_err());
    }
}
