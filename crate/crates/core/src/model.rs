//! The assembled system: vocabulary, templates, object encoder, decoder
//! and optional adapters sharing one parameter store, plus the three
//! prediction variants (retrieval vote, generation, retrieval-augmented
//! generation).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderConfig, GenerationOutput, LoraAdapter, LoraConfig};
use crate::error::{Error, Result};
use crate::features::PatchGrid;
use crate::object_encoder::{
    encode_meanpool, select_masked, EncoderKind, ObjectEmbedding, ObjectEncoder, ObjectEncoderConfig, ObjectMask,
};
use crate::params::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, ParamStore, Session};
use crate::prompt::{make_prompt, InContextBlock, MultimodalPrompt, TemplateRegistry, Vocabulary};
use crate::retrieval::{QueryResult, RetrievalIndex};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: ObjectEncoderConfig,
    /// `vocab_size` is overwritten from the vocabulary at init.
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub lora: Option<LoraConfig>,
}

/// Desk-scale defaults: a two-layer decoder whose (frozen) embedding
/// table is wide enough for label copying to transfer to unseen words.
impl Default for ModelConfig {
    fn default() -> Self {
        let mut decoder = DecoderConfig::new(0);
        decoder.layers = 2;
        decoder.embed_std = 0.5;
        ModelConfig {
            encoder: ObjectEncoderConfig::default(),
            decoder,
            lora: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    vocab: Vocabulary,
    templates: TemplateRegistry,
}

#[derive(Clone, Debug)]
pub struct OliveModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub templates: TemplateRegistry,
    pub encoder: ObjectEncoder,
    pub decoder: Decoder,
    pub lora: Option<LoraAdapter>,
    pub store: ParamStore,
}

/// Masked features of `mask` on the grid registered under `image_id`.
pub fn lookup_grid<'a>(features: &'a BTreeMap<String, PatchGrid>, image_id: &str) -> Result<&'a PatchGrid> {
    features
        .get(image_id)
        .ok_or_else(|| Error::NotFound(format!("image {image_id}")))
}

/// Parameter-free retrieval embedding of a region.
pub fn meanpool_embedding(grid: &PatchGrid, mask: &ObjectMask) -> Result<ObjectEmbedding> {
    encode_meanpool(&select_masked(grid, mask)?)
}

impl OliveModel {
    pub fn init(mut config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.decoder.vocab_size = vocab.len();
        if config.encoder.out_dim != config.decoder.width {
            return Err(Error::Config(format!(
                "encoder output width {} differs from decoder width {}",
                config.encoder.out_dim, config.decoder.width
            )));
        }
        let mut store = ParamStore::new();
        let encoder = ObjectEncoder::init(&mut store, config.encoder.clone(), seed)?;
        let decoder = Decoder::init(&mut store, config.decoder.clone(), seed.wrapping_add(1))?;
        let lora = match config.lora {
            Some(l) => Some(LoraAdapter::init(&mut store, &decoder, l, seed.wrapping_add(2))?),
            None => None,
        };
        Ok(OliveModel {
            config,
            vocab,
            templates: TemplateRegistry::standard(),
            encoder,
            decoder,
            lora,
            store,
        })
    }

    fn meta_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(CheckpointMeta {
            model: self.config.clone(),
            vocab: self.vocab.clone(),
            templates: self.templates.clone(),
        })?)
    }

    fn from_parts(meta: serde_json::Value, store: ParamStore) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(meta)?;
        if meta.model.decoder.vocab_size != meta.vocab.len() {
            return Err(Error::Config("checkpoint vocabulary does not match decoder".into()));
        }
        let encoder = ObjectEncoder::bind(&store, meta.model.encoder.clone())?;
        let decoder = Decoder::bind(&store, meta.model.decoder.clone())?;
        let lora = match meta.model.lora {
            Some(l) => Some(LoraAdapter::bind(&store, &decoder, l)?),
            None => None,
        };
        Ok(OliveModel {
            config: meta.model,
            vocab: meta.vocab,
            templates: meta.templates,
            encoder,
            decoder,
            lora,
            store,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode_checkpoint(&self.meta_json()?, &self.store)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, store) = decode_checkpoint(bytes)?;
        Self::from_parts(meta, store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.meta_json()?, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, store) = load_checkpoint(path)?;
        Self::from_parts(meta, store)
    }

    pub fn resampler_embedding(&self, grid: &PatchGrid, mask: &ObjectMask) -> Result<ObjectEmbedding> {
        self.encoder.encode(&self.store, &select_masked(grid, mask)?)
    }

    pub fn generate(&self, prompt: &MultimodalPrompt, max_new: usize) -> Result<GenerationOutput> {
        self.decoder.greedy_decode(&self.store, self.lora.as_ref(), prompt, max_new)
    }

    /// Prompt for a region without retrieved examples.
    pub fn generative_prompt(
        &self,
        grid: &PatchGrid,
        mask: &ObjectMask,
        template_id: &str,
        question: Option<&str>,
    ) -> Result<MultimodalPrompt> {
        let q = self.resampler_embedding(grid, mask)?;
        make_prompt(&self.vocab, &self.templates, template_id, question, q, None)
    }

    /// Prompt for a region with its top-`k` retrieved objects in context.
    /// Retrieved objects are re-encoded by the resampler from their own
    /// grids in `features`.
    #[allow(clippy::too_many_arguments)]
    pub fn retrieval_prompt(
        &self,
        index: &RetrievalIndex,
        features: &BTreeMap<String, PatchGrid>,
        grid: &PatchGrid,
        mask: &ObjectMask,
        k: usize,
        exclude: &BTreeSet<u64>,
        template_id: &str,
        question: Option<&str>,
    ) -> Result<(MultimodalPrompt, QueryResult)> {
        let hits = index.query_topk(&meanpool_embedding(grid, mask)?, k, exclude)?;
        let block = InContextBlock::from_hits(&hits, index, |id| {
            let rec = index.get(id).ok_or_else(|| Error::NotFound(format!("record {id}")))?;
            let g = lookup_grid(features, &rec.image_id)?;
            self.resampler_embedding(g, &ObjectMask::from_rle(&rec.mask)?)
        })?;
        let q = self.resampler_embedding(grid, mask)?;
        let prompt = make_prompt(&self.vocab, &self.templates, template_id, question, q, Some(&block))?;
        Ok((prompt, hits))
    }

    /// Greedy answer text for a prompt.
    pub fn answer(&self, prompt: &MultimodalPrompt, max_new: usize) -> Result<(String, GenerationOutput)> {
        let out = self.generate(prompt, max_new)?;
        Ok((self.vocab.detokenize(out.text_tokens()), out))
    }

    /// Records the resampler on `s` for one region; `1 × d'`.
    pub fn object_var(
        &self,
        s: &mut Session<f32>,
        grid: &PatchGrid,
        mask: &ObjectMask,
    ) -> Result<crate::numerics::Var> {
        self.encoder.encode_var(s, &select_masked(grid, mask)?)
    }
}

/// Retrieval-only prediction: majority vote over the top-`k` hits.
pub fn predict_retrieval(
    index: &RetrievalIndex,
    grid: &PatchGrid,
    mask: &ObjectMask,
    k: usize,
    exclude: &BTreeSet<u64>,
) -> Result<(String, QueryResult)> {
    let q = meanpool_embedding(grid, mask)?;
    debug_assert_eq!(q.kind, EncoderKind::Meanpool);
    let hits = index.query_topk(&q, k, exclude)?;
    Ok((index.vote(&hits)?, hits))
}
