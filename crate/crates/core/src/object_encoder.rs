//! Object masks, masked patch selection and the two object encoders:
//! parameter-free mean pooling (used for retrieval) and the learnable
//! single-query resampler (used to feed the decoder).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::PatchGrid;
use crate::nn::{Block, Linear, Norm};
use crate::numerics::{Scalar, Tensor, Var};
use crate::params::{ParamId, ParamStore, Session};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    PatchNative,
    Rasterized,
}

/// `n×n` row-major patch occupancy with at least one set bit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObjectMask {
    n: usize,
    bits: Vec<bool>,
    source: MaskSource,
}

/// Run-length encoding over the row-major patch grid. Runs alternate
/// starting with unset patches, so `counts[0]` may be zero.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRle {
    pub n: usize,
    pub counts: Vec<u32>,
}

impl ObjectMask {
    pub fn new(n: usize, bits: Vec<bool>) -> Result<Self> {
        Self::with_source(n, bits, MaskSource::PatchNative)
    }

    pub fn with_source(n: usize, bits: Vec<bool>, source: MaskSource) -> Result<Self> {
        if n == 0 || bits.len() != n * n {
            return Err(Error::shape(
                "object mask",
                format!("{} bits for a {n}x{n} grid", bits.len()),
            ));
        }
        if !bits.iter().any(|&b| b) {
            return Err(Error::EmptyMask);
        }
        Ok(ObjectMask { n, bits, source })
    }

    pub fn from_indices(n: usize, indices: &[usize]) -> Result<Self> {
        let mut bits = vec![false; n * n];
        for &i in indices {
            if i >= n * n {
                return Err(Error::shape("object mask", format!("patch {i} outside {n}x{n}")));
            }
            bits[i] = true;
        }
        ObjectMask::new(n, bits)
    }

    pub fn full(n: usize) -> Result<Self> {
        ObjectMask::new(n, vec![true; n * n])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn source(&self) -> MaskSource {
        self.source
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Set patch indices in ascending order.
    pub fn indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn to_rle(&self) -> MaskRle {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &b in &self.bits {
            if b != current {
                counts.push(run);
                run = 0;
                current = b;
            }
            run += 1;
        }
        counts.push(run);
        MaskRle { n: self.n, counts }
    }

    pub fn from_rle(rle: &MaskRle) -> Result<Self> {
        let total: u64 = rle.counts.iter().map(|&c| c as u64).sum();
        if total != (rle.n * rle.n) as u64 {
            return Err(Error::shape(
                "mask rle",
                format!("runs cover {total} patches, grid has {}", rle.n * rle.n),
            ));
        }
        let mut bits = Vec::with_capacity(rle.n * rle.n);
        for (i, &c) in rle.counts.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, c as usize));
        }
        ObjectMask::new(rle.n, bits)
    }
}

/// Region given at pixel resolution, to be snapped onto the patch grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegionInput {
    /// Row-major pixel occupancy.
    Pixels {
        width: usize,
        height: usize,
        bits: Vec<bool>,
    },
    /// Simple polygon in pixel coordinates (x right, y down).
    Polygon {
        width: f64,
        height: f64,
        points: Vec<[f64; 2]>,
    },
}

/// Snaps a pixel-level region to an `n×n` patch mask: a patch is set when
/// the region covers at least half of its area.
pub fn rasterize_mask(region: &RegionInput, n: usize) -> Result<ObjectMask> {
    if n == 0 {
        return Err(Error::shape("rasterize", "grid size 0"));
    }
    let coverage: Vec<f64> = match region {
        RegionInput::Pixels {
            width,
            height,
            bits,
        } => {
            if *width == 0 || *height == 0 || bits.len() != width * height {
                return Err(Error::shape(
                    "rasterize",
                    format!("{} bits for {width}x{height} pixels", bits.len()),
                ));
            }
            pixel_coverage(*width, *height, bits, n)
        }
        RegionInput::Polygon {
            width,
            height,
            points,
        } => {
            if *width <= 0.0 || *height <= 0.0 || points.len() < 3 {
                return Err(Error::shape("rasterize", "degenerate polygon or image extent"));
            }
            polygon_coverage(*width, *height, points, n)
        }
    };
    let bits = coverage.iter().map(|&c| c >= 0.5 - 1e-12).collect();
    ObjectMask::with_source(n, bits, MaskSource::Rasterized)
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

fn pixel_coverage(width: usize, height: usize, bits: &[bool], n: usize) -> Vec<f64> {
    let pw = width as f64 / n as f64;
    let ph = height as f64 / n as f64;
    let mut cov = vec![0.0; n * n];
    for y in 0..height {
        for x in 0..width {
            if !bits[y * width + x] {
                continue;
            }
            let (x0, y0) = (x as f64, y as f64);
            let r0 = ((y0 / ph).floor() as usize).min(n - 1);
            let c0 = ((x0 / pw).floor() as usize).min(n - 1);
            for r in r0..n.min(r0 + 2) {
                let oy = overlap(y0, y0 + 1.0, r as f64 * ph, (r + 1) as f64 * ph);
                if oy == 0.0 {
                    continue;
                }
                for c in c0..n.min(c0 + 2) {
                    let ox = overlap(x0, x0 + 1.0, c as f64 * pw, (c + 1) as f64 * pw);
                    cov[r * n + c] += ox * oy;
                }
            }
        }
    }
    let area = pw * ph;
    cov.iter().map(|c| c / area).collect()
}

fn polygon_coverage(width: f64, height: f64, points: &[[f64; 2]], n: usize) -> Vec<f64> {
    let pw = width / n as f64;
    let ph = height / n as f64;
    let mut cov = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let rect = [c as f64 * pw, r as f64 * ph, (c + 1) as f64 * pw, (r + 1) as f64 * ph];
            let clipped = clip_to_rect(points, rect);
            cov[r * n + c] = shoelace(&clipped).abs() / (pw * ph);
        }
    }
    cov
}

/// Sutherland–Hodgman clip against an axis-aligned rectangle.
fn clip_to_rect(points: &[[f64; 2]], rect: [f64; 4]) -> Vec<[f64; 2]> {
    let [x0, y0, x1, y1] = rect;
    let edges: [(usize, f64, bool); 4] = [(0, x0, true), (0, x1, false), (1, y0, true), (1, y1, false)];
    let mut poly = points.to_vec();
    for (axis, bound, keep_greater) in edges {
        if poly.is_empty() {
            break;
        }
        let inside = |p: &[f64; 2]| if keep_greater { p[axis] >= bound } else { p[axis] <= bound };
        let mut out = Vec::with_capacity(poly.len() + 2);
        for i in 0..poly.len() {
            let cur = poly[i];
            let prev = poly[(i + poly.len() - 1) % poly.len()];
            let cross = |a: [f64; 2], b: [f64; 2]| {
                let t = (bound - a[axis]) / (b[axis] - a[axis]);
                [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
            };
            match (inside(&prev), inside(&cur)) {
                (true, true) => out.push(cur),
                (true, false) => out.push(cross(prev, cur)),
                (false, true) => {
                    out.push(cross(prev, cur));
                    out.push(cur);
                }
                (false, false) => {}
            }
        }
        poly = out;
    }
    poly
}

fn shoelace(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut a = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        a += p[0] * q[1] - q[0] * p[1];
    }
    a / 2.0
}

/// Patch rows picked out by a mask, in ascending patch order.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedFeatures {
    pub rows: Tensor,
    pub patch_indices: Vec<usize>,
}

impl MaskedFeatures {
    pub fn len(&self) -> usize {
        self.patch_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patch_indices.is_empty()
    }
}

/// Selects the patch rows under `mask`. The global row 0 is never selected.
pub fn select_masked(grid: &PatchGrid, mask: &ObjectMask) -> Result<MaskedFeatures> {
    if grid.n != mask.n {
        return Err(Error::shape(
            "select_masked",
            format!("grid n={} but mask n={}", grid.n, mask.n),
        ));
    }
    let patch_indices = mask.indices();
    let mut data = Vec::with_capacity(patch_indices.len() * grid.d);
    for &i in &patch_indices {
        data.extend_from_slice(grid.features.row(1 + i));
    }
    Ok(MaskedFeatures {
        rows: Tensor::new(vec![patch_indices.len(), grid.d], data)?,
        patch_indices,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Resampler,
    Meanpool,
}

/// A single vector standing for one object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectEmbedding {
    pub vec: Vec<f32>,
    pub kind: EncoderKind,
    pub norm: f32,
}

impl ObjectEmbedding {
    pub fn new(vec: Vec<f32>, kind: EncoderKind) -> Self {
        let norm = vec.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt() as f32;
        ObjectEmbedding { vec, kind, norm }
    }

    pub fn dim(&self) -> usize {
        self.vec.len()
    }

    pub fn is_finite(&self) -> bool {
        self.vec.iter().all(|v| v.is_finite())
    }
}

/// Arithmetic mean of the masked rows, accumulated in f64.
pub fn encode_meanpool(mf: &MaskedFeatures) -> Result<ObjectEmbedding> {
    if mf.is_empty() {
        return Err(Error::EmptyMask);
    }
    let d = mf.rows.cols();
    let mut acc = vec![0.0f64; d];
    for r in 0..mf.rows.rows() {
        for (a, &v) in acc.iter_mut().zip(mf.rows.row(r)) {
            *a += v as f64;
        }
    }
    let l = mf.len() as f64;
    Ok(ObjectEmbedding::new(
        acc.iter().map(|a| (a / l) as f32).collect(),
        EncoderKind::Meanpool,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectEncoderConfig {
    /// Patch grid side length.
    pub grid_n: usize,
    /// Width of the incoming patch features.
    pub feat_dim: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub layers: usize,
    /// Decoder embedding width.
    pub out_dim: usize,
}

impl Default for ObjectEncoderConfig {
    fn default() -> Self {
        ObjectEncoderConfig {
            grid_n: 8,
            feat_dim: 64,
            width: 64,
            heads: 4,
            mlp_ratio: 4,
            layers: 2,
            out_dim: 64,
        }
    }
}

impl ObjectEncoderConfig {
    fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide encoder width {}",
                self.heads, self.width
            )));
        }
        if self.grid_n == 0 || self.feat_dim == 0 || self.out_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Learnable resampler: masked rows plus positional embeddings of their
/// patch indices, one learned summary token in front, a small
/// bidirectional transformer, and a projection of the summary token's
/// output into the decoder embedding space.
#[derive(Clone, Debug)]
pub struct ObjectEncoder {
    pub config: ObjectEncoderConfig,
    in_proj: Option<Linear>,
    pos: ParamId,
    query: ParamId,
    blocks: Vec<Block>,
    ln_f: Norm,
    out: Linear,
}

const PREFIX: &str = "encoder";

impl ObjectEncoder {
    /// Registers freshly initialized parameters under `encoder.*`.
    pub fn init(store: &mut ParamStore, config: ObjectEncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.width;
        let in_proj = if config.feat_dim != w {
            let std = 1.0 / (config.feat_dim as f64).sqrt();
            Some(Linear::new(store, &format!("{PREFIX}.in_proj"), config.feat_dim, w, std, &mut rng)?)
        } else {
            None
        };
        let pos = store.add(
            format!("{PREFIX}.pos"),
            Tensor::randn(&[config.grid_n * config.grid_n, w], 0.02, &mut rng),
        )?;
        let query = store.add(format!("{PREFIX}.query"), Tensor::randn(&[1, w], 0.02, &mut rng))?;
        let residual_std = 1.0 / (w as f64).sqrt() / (2.0 * config.layers.max(1) as f64).sqrt();
        let blocks = (0..config.layers)
            .map(|i| {
                Block::new(
                    store,
                    &format!("{PREFIX}.block{i}"),
                    w,
                    config.heads,
                    config.mlp_ratio,
                    false,
                    residual_std,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let ln_f = Norm::new(store, &format!("{PREFIX}.ln_f"), w)?;
        let out = Linear::new(
            store,
            &format!("{PREFIX}.out"),
            w,
            config.out_dim,
            1.0 / (w as f64).sqrt(),
            &mut rng,
        )?;
        Ok(ObjectEncoder {
            config,
            in_proj,
            pos,
            query,
            blocks,
            ln_f,
            out,
        })
    }

    /// Binds to parameters already present in `store` (e.g. a checkpoint).
    pub fn bind(store: &ParamStore, config: ObjectEncoderConfig) -> Result<Self> {
        config.validate()?;
        let in_proj = if config.feat_dim != config.width {
            Some(Linear::bind(store, &format!("{PREFIX}.in_proj"))?)
        } else {
            None
        };
        Ok(ObjectEncoder {
            in_proj,
            pos: store.require(&format!("{PREFIX}.pos"))?,
            query: store.require(&format!("{PREFIX}.query"))?,
            blocks: (0..config.layers)
                .map(|i| Block::bind(store, &format!("{PREFIX}.block{i}"), config.heads, false))
                .collect::<Result<_>>()?,
            ln_f: Norm::bind(store, &format!("{PREFIX}.ln_f"))?,
            out: Linear::bind(store, &format!("{PREFIX}.out"))?,
            config,
        })
    }

    pub fn num_params(store: &ParamStore) -> usize {
        store.num_params_with_prefix(&format!("{PREFIX}."))
    }

    /// Records the encoder on `s`; returns a `1 × out_dim` value.
    pub fn encode_var<T: Scalar>(&self, s: &mut Session<T>, mf: &MaskedFeatures) -> Result<Var> {
        self.encode_rows(s, &mf.rows.cast(), &mf.patch_indices)
    }

    /// Like [`encode_var`](Self::encode_var) for arbitrary `(row, patch id)`
    /// pairs; the order of the pairs does not affect the output.
    pub fn encode_rows<T: Scalar>(
        &self,
        s: &mut Session<T>,
        rows: &Tensor<T>,
        patch_indices: &[usize],
    ) -> Result<Var> {
        if patch_indices.is_empty() {
            return Err(Error::EmptyMask);
        }
        if rows.rows() != patch_indices.len() || rows.cols() != self.config.feat_dim {
            return Err(Error::shape(
                "resampler",
                format!(
                    "{}x{} rows for {} patches of width {}",
                    rows.rows(),
                    rows.cols(),
                    patch_indices.len(),
                    self.config.feat_dim
                ),
            ));
        }
        let mut x = s.g.constant(rows.clone());
        if let Some(p) = &self.in_proj {
            x = p.forward(s, x)?;
        }
        let pos_table = s.param(self.pos);
        let pos = s.g.embedding(pos_table, patch_indices)?;
        let x = s.g.add(x, pos)?;
        let q = s.param(self.query);
        let mut h = s.g.concat_rows(&[q, x])?;
        for b in &self.blocks {
            h = b.forward(s, h, None)?;
        }
        let h = self.ln_f.forward(s, h)?;
        let summary = s.g.select_rows(h, &[0])?;
        self.out.forward(s, summary)
    }

    /// Inference-only encoding of one object.
    pub fn encode(&self, store: &ParamStore, mf: &MaskedFeatures) -> Result<ObjectEmbedding> {
        let mut s = Session::inference(store);
        let v = self.encode_var(&mut s, mf)?;
        let out = s.g.value(v).data().to_vec();
        Ok(ObjectEmbedding::new(out, EncoderKind::Resampler))
    }
}

/// Resampler encoding of a grid region.
pub fn encode_resampler(
    encoder: &ObjectEncoder,
    store: &ParamStore,
    mf: &MaskedFeatures,
) -> Result<ObjectEmbedding> {
    encoder.encode(store, mf)
}
