//! Patch-feature grids: the toy patch encoder, the synthetic scene
//! generator used for every desk-scale experiment, and the on-disk feature
//! and annotation formats.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{write_atomic, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::object_encoder::{MaskRle, ObjectMask};

const FEATURE_MAGIC: &[u8; 4] = b"OLVF";
const FEATURE_VERSION: u32 = 1;

/// `(n²+1) × d` features of one image. Row 0 is the global row; rows
/// `1..=n²` are patches in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub n: usize,
    pub d: usize,
    pub features: Tensor,
    pub image_id: String,
}

impl PatchGrid {
    pub fn new(n: usize, d: usize, features: Tensor, image_id: impl Into<String>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::shape("patch grid", "n and d must be positive"));
        }
        if features.rows() != n * n + 1 || features.cols() != d {
            return Err(Error::shape(
                "patch grid",
                format!(
                    "features are {}x{}, expected {}x{d}",
                    features.rows(),
                    features.cols(),
                    n * n + 1
                ),
            ));
        }
        Ok(PatchGrid {
            n,
            d,
            features,
            image_id: image_id.into(),
        })
    }

    pub fn patch_row(&self, index: usize) -> &[f32] {
        self.features.row(1 + index)
    }

    pub fn bit_eq(&self, other: &PatchGrid) -> bool {
        self.n == other.n
            && self.d == other.d
            && self.image_id == other.image_id
            && self
                .features
                .data()
                .iter()
                .zip(other.features.data())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Raw image as an `height × width × channels` row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

/// Toy patch encoder: per-patch linear projection plus positional
/// embeddings, with a derived global row.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionParams {
    pub n: usize,
    pub patch_dim: usize,
    pub d: usize,
    /// `patch_dim × d`
    pub projection: Tensor,
    /// `(n²+1) × d`; row 0 belongs to the global row.
    pub positional: Tensor,
    pub cls_seed: Vec<f32>,
}

impl VisionParams {
    pub fn random(n: usize, patch_dim: usize, d: usize, pos_std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VisionParams {
            n,
            patch_dim,
            d,
            projection: Tensor::randn(&[patch_dim, d], 1.0 / (patch_dim as f64).sqrt(), &mut rng),
            positional: Tensor::randn(&[n * n + 1, d], pos_std, &mut rng),
            cls_seed: Tensor::<f32>::randn(&[d], pos_std, &mut rng).into_data(),
        }
    }

    /// Identity projection (patch_dim == d) with small random positional
    /// embeddings; the frozen encoder used for synthetic scenes.
    pub fn identity(n: usize, d: usize, pos_std: f64, seed: u64) -> Self {
        let mut p = VisionParams::random(n, d, d, pos_std, seed);
        let mut eye = Tensor::zeros(&[d, d]);
        for i in 0..d {
            eye.data_mut()[i * d + i] = 1.0;
        }
        p.projection = eye;
        p
    }

    pub fn zeros(n: usize, patch_dim: usize, d: usize) -> Self {
        VisionParams {
            n,
            patch_dim,
            d,
            projection: Tensor::zeros(&[patch_dim, d]),
            positional: Tensor::zeros(&[n * n + 1, d]),
            cls_seed: vec![0.0; d],
        }
    }
}

/// Encodes an image into a patch grid.
pub fn encode_image(image: &RawImage, params: &VisionParams, image_id: &str) -> Result<PatchGrid> {
    let n = params.n;
    if image.height == 0 || image.width == 0 || !image.height.is_multiple_of(n) || !image.width.is_multiple_of(n) {
        return Err(Error::shape(
            "encode_image",
            format!("{}x{} image is not divisible into {n}x{n} patches", image.height, image.width),
        ));
    }
    if image.data.len() != image.height * image.width * image.channels {
        return Err(Error::shape("encode_image", "pixel buffer length mismatch"));
    }
    let (ph, pw, c) = (image.height / n, image.width / n, image.channels);
    if ph * pw * c != params.patch_dim {
        return Err(Error::shape(
            "encode_image",
            format!("patch of {} values, projection expects {}", ph * pw * c, params.patch_dim),
        ));
    }
    let d = params.d;
    let mut rows = vec![0.0f32; (n * n + 1) * d];
    let mut patch = Vec::with_capacity(params.patch_dim);
    let mut mean = vec![0.0f64; d];
    for pr in 0..n {
        for pc in 0..n {
            patch.clear();
            for y in pr * ph..(pr + 1) * ph {
                let start = (y * image.width + pc * pw) * c;
                patch.extend_from_slice(&image.data[start..start + pw * c]);
            }
            let idx = pr * n + pc;
            let out = &mut rows[(1 + idx) * d..(2 + idx) * d];
            out.copy_from_slice(params.positional.row(1 + idx));
            crate::numerics::kernels::gemm_nn(&patch, params.projection.data(), out, 1, params.patch_dim, d);
            for (m, &v) in mean.iter_mut().zip(out.iter()) {
                *m += v as f64;
            }
        }
    }
    let count = (n * n) as f64;
    for j in 0..d {
        rows[j] = (mean[j] / count) as f32 + params.cls_seed[j] + params.positional.get(0, j);
    }
    PatchGrid::new(n, d, Tensor::new(vec![n * n + 1, d], rows)?, image_id)
}

/// Class prototypes (and optional attribute offsets) for synthetic scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomain {
    pub dim: usize,
    pub labels: Vec<String>,
    /// One `dim`-vector per label.
    pub signatures: Vec<Vec<f32>>,
    pub attributes: Vec<String>,
    pub attribute_signatures: Vec<Vec<f32>>,
    /// Multiplier on the attribute offset added to an object's patches.
    pub attribute_scale: f32,
}

/// Default class vocabulary; names are single lowercase words.
pub const CLASS_NAMES: &[&str] = &[
    "cat", "dog", "bird", "horse", "car", "truck", "boat", "apple", "banana", "chair", "clock",
    "kite", "turtle", "shark", "zebra", "lamp", "vase", "bench", "train", "pizza",
];

pub const ATTRIBUTE_NAMES: &[&str] = &["red", "green", "blue", "yellow"];

impl SyntheticDomain {
    /// Prototypes are i.i.d. standard normal vectors.
    pub fn new(labels: Vec<String>, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || -> Vec<f32> {
            (0..dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z as f32
                })
                .collect()
        };
        let signatures = labels.iter().map(|_| draw()).collect();
        SyntheticDomain {
            dim,
            labels,
            signatures,
            attributes: Vec::new(),
            attribute_signatures: Vec::new(),
            attribute_scale: 0.0,
        }
    }

    /// The first `count` default class names.
    pub fn with_default_labels(count: usize, dim: usize, seed: u64) -> Result<Self> {
        if count == 0 || count > CLASS_NAMES.len() {
            return Err(Error::Config(format!(
                "between 1 and {} classes available",
                CLASS_NAMES.len()
            )));
        }
        let labels = CLASS_NAMES[..count].iter().map(|s| s.to_string()).collect();
        Ok(SyntheticDomain::new(labels, dim, seed))
    }

    /// Adds attribute offsets so captions of the form "a <attr> <class>"
    /// carry visual evidence.
    pub fn with_attributes(mut self, names: &[&str], scale: f32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA77);
        self.attributes = names.iter().map(|s| s.to_string()).collect();
        self.attribute_signatures = names
            .iter()
            .map(|_| {
                (0..self.dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z as f32
                    })
                    .collect()
            })
            .collect();
        self.attribute_scale = scale;
        self
    }

    pub fn label_id(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub n: usize,
    pub num_objects: usize,
    /// Class ids objects may be drawn from.
    pub classes: Vec<usize>,
    pub noise_sigma: f32,
    /// Upper bound on region size; defaults to `n²/4`.
    pub max_region: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSpec {
    pub class_id: usize,
    pub attribute: Option<usize>,
    pub patches: BTreeSet<usize>,
}

/// Generated raw scene: an `n×n×dim` patch-level array.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub image_id: String,
    pub n: usize,
    pub channels: usize,
    pub grid: Vec<f32>,
    pub objects: Vec<ObjectSpec>,
    pub noise_sigma: f32,
}

impl SyntheticScene {
    pub fn as_image(&self) -> RawImage {
        RawImage {
            height: self.n,
            width: self.n,
            channels: self.channels,
            data: self.grid.clone(),
        }
    }

    pub fn patch(&self, index: usize) -> &[f32] {
        &self.grid[index * self.channels..(index + 1) * self.channels]
    }
}

/// One annotated object, as stored in annotation JSON-lines files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: String,
    pub mask_rle: MaskRle,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

impl Annotation {
    pub fn mask(&self) -> Result<ObjectMask> {
        ObjectMask::from_rle(&self.mask_rle)
    }
}

const PLACEMENT_RETRIES: usize = 64;

/// Generates a scene with `num_objects` disjoint 4-connected regions, each
/// carrying its class prototype (plus attribute offset) and Gaussian noise.
/// Background patches carry noise only.
pub fn generate_scene(
    domain: &SyntheticDomain,
    spec: &SceneSpec,
    seed: u64,
    image_id: &str,
) -> Result<(SyntheticScene, Vec<Annotation>)> {
    let n = spec.n;
    if n == 0 || spec.num_objects == 0 || spec.classes.is_empty() {
        return Err(Error::Config("scene needs n >= 1, objects and classes".into()));
    }
    if let Some(&bad) = spec.classes.iter().find(|&&c| c >= domain.labels.len()) {
        return Err(Error::Config(format!("class id {bad} outside label set")));
    }
    let cells = n * n;
    let max_region = spec.max_region.unwrap_or(cells / 4).clamp(1, cells);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f64, spec.noise_sigma.max(0.0) as f64)
        .map_err(|e| Error::Config(e.to_string()))?;

    let mut occupied = vec![false; cells];
    let mut objects = Vec::with_capacity(spec.num_objects);
    for obj in 0..spec.num_objects {
        let target = rng.random_range(1..=max_region);
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let free: Vec<usize> = (0..cells).filter(|&i| !occupied[i]).collect();
            let Some(&start) = free.choose(&mut rng) else {
                break;
            };
            let region = grow_region(start, target, n, &occupied, &mut rng);
            if !region.is_empty() {
                placed = Some(region);
                break;
            }
        }
        let patches = placed.ok_or_else(|| {
            Error::Placement(format!("object {obj} of {} did not fit", spec.num_objects))
        })?;
        for &p in &patches {
            occupied[p] = true;
        }
        let class_id = *spec.classes.choose(&mut rng).expect("non-empty classes");
        let attribute = (!domain.attributes.is_empty())
            .then(|| rng.random_range(0..domain.attributes.len()));
        objects.push(ObjectSpec {
            class_id,
            attribute,
            patches,
        });
    }

    let c = domain.dim;
    let mut grid = vec![0.0f32; cells * c];
    let mut owner = vec![None; cells];
    for (k, o) in objects.iter().enumerate() {
        for &p in &o.patches {
            owner[p] = Some(k);
        }
    }
    for (p, own) in owner.iter().enumerate() {
        let cell = &mut grid[p * c..(p + 1) * c];
        if let Some(k) = own {
            let o = &objects[*k];
            cell.copy_from_slice(&domain.signatures[o.class_id]);
            if let Some(a) = o.attribute {
                for (v, s) in cell.iter_mut().zip(&domain.attribute_signatures[a]) {
                    *v += domain.attribute_scale * s;
                }
            }
        }
        if spec.noise_sigma > 0.0 {
            for v in cell.iter_mut() {
                *v += noise.sample(&mut rng) as f32;
            }
        }
    }

    let annotations = objects
        .iter()
        .map(|o| {
            let mask = ObjectMask::from_indices(n, &o.patches.iter().copied().collect::<Vec<_>>())?;
            let label = domain.labels[o.class_id].clone();
            let caption = Some(match o.attribute {
                Some(a) => format!("a {} {}", domain.attributes[a], label),
                None => format!("a {label}"),
            });
            Ok(Annotation {
                image_id: image_id.to_string(),
                mask_rle: mask.to_rle(),
                label,
                caption,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok((
        SyntheticScene {
            image_id: image_id.to_string(),
            n,
            channels: c,
            grid,
            objects,
            noise_sigma: spec.noise_sigma,
        },
        annotations,
    ))
}

/// Random 4-connected growth from `start` over unoccupied cells. Stops at
/// `target` cells or when the frontier is exhausted.
fn grow_region<R: Rng + ?Sized>(
    start: usize,
    target: usize,
    n: usize,
    occupied: &[bool],
    rng: &mut R,
) -> BTreeSet<usize> {
    let mut region = BTreeSet::new();
    if occupied[start] {
        return region;
    }
    region.insert(start);
    while region.len() < target {
        let mut frontier: Vec<usize> = region
            .iter()
            .flat_map(|&p| neighbours(p, n))
            .filter(|&q| !occupied[q] && !region.contains(&q))
            .collect();
        frontier.sort_unstable();
        frontier.dedup();
        let Some(&next) = frontier.choose(rng) else {
            break;
        };
        region.insert(next);
    }
    region
}

fn neighbours(p: usize, n: usize) -> impl Iterator<Item = usize> {
    let (r, c) = (p / n, p % n);
    let mut out = Vec::with_capacity(4);
    if r > 0 {
        out.push(p - n);
    }
    if r + 1 < n {
        out.push(p + n);
    }
    if c > 0 {
        out.push(p - 1);
    }
    if c + 1 < n {
        out.push(p + 1);
    }
    out.into_iter()
}

/// Payload length in bytes for a grid of side `n` and width `d`.
pub fn feature_payload_len(n: usize, d: usize) -> usize {
    (n * n + 1) * d * 4
}

pub fn encode_features(grid: &PatchGrid) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(FEATURE_MAGIC);
    w.u32(FEATURE_VERSION);
    w.u32(grid.n as u32);
    w.u32(grid.d as u32);
    w.u64(grid.image_id.len() as u64);
    w.bytes(grid.image_id.as_bytes());
    w.f32s(grid.features.data());
    w.buf
}

pub fn decode_features(bytes: &[u8]) -> Result<PatchGrid> {
    let mut r = ByteReader::new(bytes);
    if r.take(4, "magic")? != FEATURE_MAGIC {
        return Err(Error::format(0, "bad feature-file magic"));
    }
    let version = r.u32("version")?;
    if version != FEATURE_VERSION {
        return Err(Error::format(4, format!("unsupported feature-file version {version}")));
    }
    let n = r.u32("n")? as usize;
    let d = r.u32("d")? as usize;
    if n == 0 || d == 0 {
        return Err(Error::format(8, "n and d must be positive"));
    }
    let id_len = r.u64("image id length")? as usize;
    let image_id = r.utf8(id_len, "image id")?;
    let expected = feature_payload_len(n, d);
    if r.remaining() != expected {
        return Err(Error::format(
            r.offset(),
            format!("payload is {} bytes, expected {expected}", r.remaining()),
        ));
    }
    let data = r.f32s((n * n + 1) * d, "payload")?;
    r.finish()?;
    PatchGrid::new(n, d, Tensor::new(vec![n * n + 1, d], data)?, image_id)
}

pub fn save_features(grid: &PatchGrid, path: &Path) -> Result<()> {
    write_atomic(path, &encode_features(grid))
}

pub fn load_features(path: &Path) -> Result<PatchGrid> {
    decode_features(&std::fs::read(path)?)
}

/// Loads every `*.olvf` file in `dir`, keyed by image id.
pub fn load_feature_dir(dir: &Path) -> Result<BTreeMap<String, PatchGrid>> {
    let mut out = BTreeMap::new();
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "olvf"))
        .collect();
    paths.sort();
    for p in paths {
        let g = load_features(&p)?;
        out.insert(g.image_id.clone(), g);
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, annotations: &[Annotation]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for a in annotations {
        serde_json::to_writer(&mut f, a)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
