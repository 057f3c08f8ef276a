//! Analyses of trained models: principal components of object vectors and
//! the retrieval-set size / k sweep.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Annotation, PatchGrid};
use crate::model::{lookup_grid, predict_retrieval, OliveModel};
use crate::object_encoder::ObjectMask;
use crate::params::Session;
use crate::prompt::CLASSIFY;
use crate::training::build_index;

pub const PCA_TOL: f64 = 1e-9;
pub const PCA_MAX_ITERS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    /// Unit principal directions; each has a positive largest-magnitude
    /// entry.
    pub components: [Vec<f64>; 2],
    pub eigenvalues: [f64; 2],
    /// Share of total variance along each component.
    pub explained: [f64; 2],
    pub projections: Vec<[f64; 2]>,
    pub mean_intra_cosine: f64,
    pub mean_inter_cosine: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize_sign(v: &mut [f64]) {
    let big = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
    if big < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Dominant eigenpair of a symmetric PSD matrix by power iteration,
/// stopping once the Rayleigh residual falls below `PCA_TOL`.
fn power_iteration(c: &[f64], d: usize, start: &[f64]) -> (f64, Vec<f64>) {
    let mut v = start.to_vec();
    let n = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    let mut lambda = 0.0;
    for _ in 0..PCA_MAX_ITERS {
        let w: Vec<f64> = (0..d).map(|i| dot(&c[i * d..(i + 1) * d], &v)).collect();
        lambda = dot(&v, &w);
        let residual = w.iter().zip(&v).map(|(a, b)| (a - lambda * b).powi(2)).sum::<f64>().sqrt();
        let norm = dot(&w, &w).sqrt();
        if norm == 0.0 {
            return (0.0, v);
        }
        v = w.into_iter().map(|x| x / norm).collect();
        if residual <= PCA_TOL {
            break;
        }
    }
    (lambda, v)
}

fn mean_cosines(vectors: &[Vec<f64>], labels: &[String]) -> (f64, f64) {
    let norms: Vec<f64> = vectors.iter().map(|v| dot(v, v).sqrt()).collect();
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let c = dot(&vectors[i], &vectors[j]) / (norms[i] * norms[j]).max(f64::MIN_POSITIVE);
            if labels[i] == labels[j] {
                intra += c;
                ni += 1;
            } else {
                inter += c;
                nx += 1;
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
    (mean(intra, ni), mean(inter, nx))
}

/// Top-two principal components of mean-centred `vectors` by power
/// iteration with deflation, plus mean pairwise cosines within and
/// across labels measured on the uncentred vectors.
pub fn pca_top2(vectors: &[Vec<f64>], labels: &[String]) -> Result<PcaResult> {
    if vectors.len() < 3 {
        return Err(Error::Usage("pca needs at least three vectors".into()));
    }
    if labels.len() != vectors.len() {
        return Err(Error::shape("pca", format!("{} labels for {} vectors", labels.len(), vectors.len())));
    }
    let d = vectors[0].len();
    if d < 2 || vectors.iter().any(|v| v.len() != d) {
        return Err(Error::shape("pca", "vectors need a common width of at least 2"));
    }
    if vectors.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("pca input"));
    }
    let n = vectors.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| vectors.iter().map(|v| v[j]).sum::<f64>() / n).collect();
    let centred: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for v in &centred {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += v[i] * v[j];
            }
        }
    }
    cov.iter_mut().for_each(|x| *x /= n);
    let total: f64 = (0..d).map(|i| cov[i * d + i]).sum();

    // Deterministic start away from any axis.
    let start: Vec<f64> = (0..d).map(|i| 1.0 + (i as f64 + 1.0).sqrt().fract()).collect();
    let (l1, mut v1) = power_iteration(&cov, d, &start);
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] -= l1 * v1[i] * v1[j];
        }
    }
    let mut start2 = start.clone();
    let p = dot(&start2, &v1);
    start2.iter_mut().zip(&v1).for_each(|(s, v)| *s -= p * v);
    let (l2, mut v2) = power_iteration(&cov, d, &start2);
    // Remove any drift back into the first direction.
    let p = dot(&v2, &v1);
    v2.iter_mut().zip(&v1).for_each(|(a, b)| *a -= p * b);
    let n2 = dot(&v2, &v2).sqrt();
    if total <= 0.0 || l2 <= 1e-12 * l1.max(f64::MIN_POSITIVE) || n2 == 0.0 {
        return Err(Error::DegenerateSpectrum(format!("eigenvalues {l1:.3e} and {l2:.3e}")));
    }
    v2.iter_mut().for_each(|x| *x /= n2);
    normalize_sign(&mut v1);
    normalize_sign(&mut v2);
    let projections = centred.iter().map(|v| [dot(v, &v1), dot(v, &v2)]).collect();
    let (intra, inter) = mean_cosines(vectors, labels);
    Ok(PcaResult {
        explained: [l1 / total, l2 / total],
        eigenvalues: [l1, l2],
        components: [v1, v2],
        projections,
        mean_intra_cosine: intra,
        mean_inter_cosine: inter,
    })
}

/// Where to read an object's representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Probe {
    /// The resampler output fed to the decoder.
    ObjectVector,
    /// The decoder residual stream at the object position after this
    /// many blocks.
    DecoderLayer(usize),
}

/// Probes a region through the classification prompt.
pub fn object_representation(model: &OliveModel, grid: &PatchGrid, mask: &ObjectMask, probe: Probe) -> Result<Vec<f64>> {
    let prompt = model.generative_prompt(grid, mask, CLASSIFY, None)?;
    let emb = prompt.bound[0].as_ref().ok_or(Error::UnboundSlot(0))?;
    let layer = match probe {
        Probe::ObjectVector => return Ok(emb.vec.iter().map(|&x| x as f64).collect()),
        Probe::DecoderLayer(l) => l,
    };
    let mut s = Session::inference(&model.store);
    let obj = s.g.constant(crate::numerics::Tensor::new(vec![1, emb.dim()], emb.vec.clone())?);
    let mut tokens = vec![crate::prompt::BOS];
    tokens.extend_from_slice(prompt.tokens());
    let rows = model.decoder.embed_tokens(&mut s, &tokens, &[obj])?;
    let h = model.decoder.hidden_upto(&mut s, rows, model.lora.as_ref(), layer)?;
    let pos = 1 + prompt.slots()[0];
    Ok(s.g.value(h).row(pos).iter().map(|&x| x as f64).collect())
}

/// Default probes: the object vector and decoder layers 0, L/2 and L−1.
pub fn default_probes(layers: usize) -> Vec<Probe> {
    let mut out = vec![Probe::ObjectVector];
    let mut seen = BTreeSet::new();
    for l in [0, layers / 2, layers.saturating_sub(1)] {
        if seen.insert(l) {
            out.push(Probe::DecoderLayer(l));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Sweep

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub sizes: Vec<usize>,
    pub ks: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub size: usize,
    pub k: usize,
    pub accuracy: f64,
}

/// Retrieval-vote accuracy on `queries` for every (per-class set size, k)
/// pair. Retrieval sets are nested: each class's candidates are shuffled
/// once and every size takes a prefix.
pub fn sweep_retrieval(
    spec: &SweepSpec,
    pool: &[Annotation],
    queries: &[Annotation],
    features: &BTreeMap<String, PatchGrid>,
    seed: u64,
) -> Result<Vec<SweepCell>> {
    if spec.sizes.is_empty() || spec.ks.is_empty() || spec.sizes.contains(&0) || spec.ks.contains(&0) {
        return Err(Error::Config("sweep grids must be non-empty and positive".into()));
    }
    if queries.is_empty() {
        return Err(Error::Usage("sweep needs queries".into()));
    }
    let mut by_class: BTreeMap<&str, Vec<&Annotation>> = BTreeMap::new();
    for a in pool {
        by_class.entry(a.label.as_str()).or_default().push(a);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
    }
    let none = BTreeSet::new();
    let mut cells = Vec::with_capacity(spec.sizes.len() * spec.ks.len());
    for &size in &spec.sizes {
        let mut subset = Vec::new();
        for (c, members) in &by_class {
            if members.len() < size {
                return Err(Error::Config(format!(
                    "class {c} has {} retrieval candidates, {size} requested",
                    members.len()
                )));
            }
            subset.extend(members[..size].iter().map(|a| (*a).clone()));
        }
        let index = build_index(&subset, features)?;
        for &k in &spec.ks {
            let mut hits = 0usize;
            for q in queries {
                let (label, _) = predict_retrieval(&index, lookup_grid(features, &q.image_id)?, &q.mask()?, k, &none)?;
                hits += (label == q.label) as usize;
            }
            cells.push(SweepCell {
                size,
                k,
                accuracy: hits as f64 / queries.len() as f64,
            });
        }
    }
    Ok(cells)
}

/// Best accuracy over k for each set size, in the order sizes appear.
pub fn best_over_k(cells: &[SweepCell]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = Vec::new();
    for c in cells {
        match out.iter_mut().find(|(s, _)| *s == c.size) {
            Some((_, a)) => *a = a.max(c.accuracy),
            None => out.push((c.size, c.accuracy)),
        }
    }
    out
}

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut s = String::from("size,k,accuracy\n");
    for c in cells {
        s.push_str(&format!("{},{},{}\n", c.size, c.k, c.accuracy));
    }
    s
}

/// Plot data with x = set size, y = accuracy, one series per k.
pub fn sweep_plot_data(cells: &[SweepCell]) -> String {
    let mut s = String::from("x,y,series\n");
    for c in cells {
        s.push_str(&format!("{},{},k={}\n", c.size, c.accuracy, c.k));
    }
    s
}

#[cfg(test)]
mod tests;
