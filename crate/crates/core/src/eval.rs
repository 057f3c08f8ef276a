//! Task metrics and evaluation runs over held-out objects.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Annotation, PatchGrid};
use crate::model::{lookup_grid, predict_retrieval, OliveModel};
use crate::object_encoder::MaskRle;
use crate::prompt::normalize;
use crate::retrieval::RetrievalIndex;
use crate::training::{target_text, Task, Variant};

fn norm_label(s: &str) -> String {
    normalize(s).to_lowercase()
}

fn check_lengths(a: usize, b: usize, what: &'static str) -> Result<()> {
    if a != b {
        return Err(Error::shape(what, format!("{a} predictions for {b} references")));
    }
    if a == 0 {
        return Err(Error::Usage(format!("{what} needs at least one example")));
    }
    Ok(())
}

/// Fraction of exact matches after whitespace and case normalization.
pub fn accuracy(preds: &[String], golds: &[String]) -> Result<f64> {
    check_lengths(preds.len(), golds.len(), "accuracy")?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| norm_label(p) == norm_label(g)).count();
    Ok(hits as f64 / golds.len() as f64)
}

/// Mean over gold classes of all-points interpolated average precision.
/// Predictions of a class are ranked by descending confidence, ties in
/// input order.
pub fn mean_average_precision(preds: &[(String, f64)], golds: &[String]) -> Result<f64> {
    if golds.is_empty() {
        return Err(Error::Usage("mean average precision needs a gold set".into()));
    }
    check_lengths(preds.len(), golds.len(), "mean_average_precision")?;
    let golds: Vec<String> = golds.iter().map(|g| norm_label(g)).collect();
    let classes: BTreeSet<&String> = golds.iter().collect();
    let mut total = 0.0;
    for c in &classes {
        let npos = golds.iter().filter(|g| g == c).count();
        let mut ranked: Vec<(usize, f64)> = preds
            .iter()
            .enumerate()
            .filter(|(_, p)| norm_label(&p.0) == **c)
            .map(|(i, p)| (i, p.1))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut tp = 0usize;
        let mut curve: Vec<(f64, f64)> = Vec::with_capacity(ranked.len());
        for (rank, &(i, _)) in ranked.iter().enumerate() {
            if &golds[i] == *c {
                tp += 1;
            }
            curve.push((tp as f64 / npos as f64, tp as f64 / (rank + 1) as f64));
        }
        // Precision envelope from the right, then area over recall steps.
        for i in (0..curve.len().saturating_sub(1)).rev() {
            curve[i].1 = curve[i].1.max(curve[i + 1].1);
        }
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for (r, p) in curve {
            ap += (r - prev_recall) * p;
            prev_recall = r;
        }
        total += ap;
    }
    Ok(total / classes.len() as f64)
}

/// Lowercased words with surrounding punctuation removed.
pub fn caption_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<Vec<String>, f64> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    out
}

type Weighted = BTreeMap<Vec<String>, f64>;

fn tfidf(counts: &BTreeMap<Vec<String>, f64>, df: &BTreeMap<Vec<String>, f64>, log_n: f64) -> Weighted {
    counts
        .iter()
        .map(|(g, &tf)| (g.clone(), tf * (log_n - df.get(g).copied().unwrap_or(0.0).max(1.0).ln())))
        .collect()
}

fn cosine(a: &Weighted, b: &Weighted) -> f64 {
    let na: f64 = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().map(|(g, v)| v * b.get(g).copied().unwrap_or(0.0)).sum();
    dot / (na * nb)
}

/// Per-example CIDEr scores: for n = 1..4, the tf-idf cosine between the
/// candidate and each reference averaged over references; the mean over
/// n scaled by 10. Document frequencies count reference sets.
pub fn cider_scores(candidates: &[String], references: &[Vec<String>]) -> Result<Vec<f64>> {
    check_lengths(candidates.len(), references.len(), "cider")?;
    if references.len() < 2 {
        return Err(Error::Usage("cider needs a corpus of at least two examples".into()));
    }
    if references.iter().any(|r| r.is_empty()) {
        return Err(Error::Usage("every example needs a reference".into()));
    }
    let log_n = (references.len() as f64).ln();
    let refs: Vec<Vec<Vec<String>>> = references
        .iter()
        .map(|rs| rs.iter().map(|r| caption_tokens(r)).collect())
        .collect();
    let mut scores = vec![0.0; candidates.len()];
    for n in 1..=4 {
        let mut df: BTreeMap<Vec<String>, f64> = BTreeMap::new();
        for rs in &refs {
            let grams: BTreeSet<Vec<String>> = rs.iter().flat_map(|r| ngram_counts(r, n).into_keys()).collect();
            for g in grams {
                *df.entry(g).or_insert(0.0) += 1.0;
            }
        }
        for (i, cand) in candidates.iter().enumerate() {
            let c = tfidf(&ngram_counts(&caption_tokens(cand), n), &df, log_n);
            let sim: f64 = refs[i]
                .iter()
                .map(|r| cosine(&c, &tfidf(&ngram_counts(r, n), &df, log_n)))
                .sum::<f64>()
                / refs[i].len() as f64;
            scores[i] += sim / 4.0;
        }
    }
    Ok(scores.into_iter().map(|s| 10.0 * s).collect())
}

/// Corpus CIDEr: the mean per-example score.
pub fn cider(candidates: &[String], references: &[Vec<String>]) -> Result<f64> {
    let s = cider_scores(candidates, references)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Exact-unigram METEOR approximation against one reference: recall
/// weighted harmonic mean times `1 − 0.5·(chunks/matches)³`. No stemming
/// or synonyms, so scores are not comparable with full METEOR.
pub fn meteor_lite_pair(candidate: &str, reference: &str) -> f64 {
    let c = caption_tokens(candidate);
    let r = caption_tokens(reference);
    let mut used = vec![false; r.len()];
    let mut align: Vec<Option<usize>> = Vec::with_capacity(c.len());
    for w in &c {
        let j = (0..r.len()).find(|&j| !used[j] && &r[j] == w);
        if let Some(j) = j {
            used[j] = true;
        }
        align.push(j);
    }
    let m = align.iter().flatten().count();
    if m == 0 {
        return 0.0;
    }
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for a in &align {
        match (*a, prev) {
            (Some(j), Some(p)) if j == p + 1 => {}
            (Some(_), _) => chunks += 1,
            (None, _) => {}
        }
        prev = *a;
    }
    let (m, p, rc) = (m as f64, m as f64 / c.len() as f64, m as f64 / r.len() as f64);
    let fmean = 10.0 * p * rc / (rc + 9.0 * p);
    fmean * (1.0 - 0.5 * (chunks as f64 / m).powi(3))
}

/// Corpus mean of the best score over each example's references.
pub fn meteor_lite(candidates: &[String], references: &[Vec<String>]) -> Result<f64> {
    check_lengths(candidates.len(), references.len(), "meteor_lite")?;
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, rs)| rs.iter().map(|r| meteor_lite_pair(c, r)).fold(0.0, f64::max))
        .sum();
    Ok(total / candidates.len() as f64)
}

// ---------------------------------------------------------------------------
// Context length

/// Prompt token costs: every in-context example pays its image cost plus
/// `text_cost`; the query pays its image cost plus `query_text_cost`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextModel {
    pub text_cost: u64,
    pub query_text_cost: u64,
    pub image_cost: BTreeMap<String, u64>,
}

impl Default for ContextModel {
    fn default() -> Self {
        ContextModel {
            text_cost: 30,
            query_text_cost: 30,
            image_cost: [("olive", 1), ("flamingo", 64), ("kosmos2", 64), ("llava", 256)]
                .into_iter()
                .map(|(s, c)| (s.to_string(), c))
                .collect(),
        }
    }
}

impl ContextModel {
    fn cost(&self, system: &str) -> Result<u64> {
        self.image_cost
            .get(system)
            .copied()
            .ok_or_else(|| Error::NotFound(format!("system {system}")))
    }

    /// Tokens spent on `k` in-context examples.
    pub fn incontext_tokens(&self, system: &str, k: u64) -> Result<u64> {
        Ok(k * self.slope(system)?)
    }

    /// Tokens added per in-context example.
    pub fn slope(&self, system: &str) -> Result<u64> {
        Ok(self.text_cost + self.cost(system)?)
    }

    pub fn query_tokens(&self, system: &str) -> Result<u64> {
        Ok(self.query_text_cost + self.cost(system)?)
    }
}

pub fn context_length(model: &ContextModel, system: &str, k: u64) -> Result<u64> {
    Ok(model.incontext_tokens(system, k)? + model.query_tokens(system)?)
}

// ---------------------------------------------------------------------------
// Evaluation runs

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    pub mask_rle: MaskRle,
    pub gold: String,
    pub answer: String,
    /// Retrieved record ids, most similar first.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hits: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub variant: Variant,
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cider: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meteor_lite: Option<f64>,
    pub predictions: Vec<Prediction>,
}

/// Everything an evaluation run may need; `model` for G and RG, `index`
/// for R and RG.
pub struct EvalInputs<'a> {
    pub model: Option<&'a OliveModel>,
    pub index: Option<&'a RetrievalIndex>,
    pub features: &'a BTreeMap<String, PatchGrid>,
    pub k: usize,
    pub max_new: usize,
}

pub fn evaluate(inputs: &EvalInputs, samples: &[Annotation], task: Task, variant: Variant) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Usage("nothing to evaluate".into()));
    }
    if variant == Variant::R && task != Task::Classification {
        return Err(Error::Usage("the retrieval vote only classifies".into()));
    }
    let need_model = || inputs.model.ok_or_else(|| Error::Usage(format!("{variant:?} needs a checkpoint")));
    let need_index = || inputs.index.ok_or_else(|| Error::Usage(format!("{variant:?} needs a retrieval index")));
    let none = BTreeSet::new();
    let mut predictions = Vec::with_capacity(samples.len());
    for a in samples {
        let grid = lookup_grid(inputs.features, &a.image_id)?;
        let mask = a.mask()?;
        let (answer, hits) = match variant {
            Variant::R => {
                let (label, hits) = predict_retrieval(need_index()?, grid, &mask, inputs.k, &none)?;
                (label, hits)
            }
            Variant::G => {
                let m = need_model()?;
                let p = m.generative_prompt(grid, &mask, task.template(variant)?, None)?;
                (m.answer(&p, inputs.max_new)?.0, Default::default())
            }
            Variant::RG => {
                let m = need_model()?;
                let (p, hits) = m.retrieval_prompt(
                    need_index()?,
                    inputs.features,
                    grid,
                    &mask,
                    inputs.k,
                    &none,
                    task.template(variant)?,
                    None,
                )?;
                (m.answer(&p, inputs.max_new)?.0, hits)
            }
        };
        predictions.push(Prediction {
            image_id: a.image_id.clone(),
            mask_rle: a.mask_rle.clone(),
            gold: target_text(a, task),
            answer,
            hits: hits.hits.iter().map(|h| h.record_id).collect(),
        });
    }
    let answers: Vec<String> = predictions.iter().map(|p| p.answer.clone()).collect();
    let golds: Vec<String> = predictions.iter().map(|p| p.gold.clone()).collect();
    let mut report = EvalReport {
        task,
        variant,
        count: predictions.len(),
        accuracy: None,
        map: None,
        cider: None,
        meteor_lite: None,
        predictions,
    };
    match task {
        Task::Classification => {
            report.accuracy = Some(accuracy(&answers, &golds)?);
            let scored: Vec<(String, f64)> = answers.into_iter().map(|a| (a, 1.0)).collect();
            report.map = Some(mean_average_precision(&scored, &golds)?);
        }
        Task::Captioning => {
            let refs: Vec<Vec<String>> = golds.into_iter().map(|g| vec![g]).collect();
            if refs.len() >= 2 {
                report.cider = Some(cider(&answers, &refs)?);
            }
            report.meteor_lite = Some(meteor_lite(&answers, &refs)?);
        }
    }
    Ok(report)
}
