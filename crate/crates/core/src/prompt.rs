//! Word-level vocabulary, versioned prompt templates and code-switched
//! prompts whose `[obj]` tokens are bound to object vectors.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::object_encoder::ObjectEmbedding;
use crate::retrieval::{QueryResult, RetrievalIndex};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const OBJ: u32 = 3;
const BYTE_BASE: u32 = 4;
const FIRST_WORD: u32 = BYTE_BASE + 256;

pub const OBJ_TEXT: &str = "[obj]";
const OPENING: &[char] = &['('];
const CLOSING: &[char] = &['.', ',', '?', '!', ':', ';', ')'];

/// Splits text into word pieces: whitespace separates chunks, each chunk
/// sheds leading `(` and trailing closing punctuation as separate pieces.
/// Interior punctuation stays, so decimals like `0.87` remain whole.
fn lex(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut core = chunk;
        while let Some(c) = core.chars().next().filter(|c| OPENING.contains(c)) {
            out.push(&core[..c.len_utf8()]);
            core = &core[c.len_utf8()..];
        }
        let mut tail = Vec::new();
        while let Some(c) = core.chars().next_back().filter(|c| CLOSING.contains(c)) {
            let at = core.len() - c.len_utf8();
            tail.push(&core[at..]);
            core = &core[..at];
        }
        if !core.is_empty() {
            out.push(core);
        }
        out.extend(tail.into_iter().rev());
    }
    out
}

/// Collapses whitespace runs to single spaces and trims the ends.
pub fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Reserved ids, 256 byte-fallback tokens, then words in sorted order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Serialize for Vocabulary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.words.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let words = Vec::<String>::deserialize(d)?;
        let v = Vocabulary::new(words.iter().cloned());
        if v.words != words {
            return Err(serde::de::Error::custom("vocabulary words must be sorted, unique single pieces"));
        }
        Ok(v)
    }
}

impl Vocabulary {
    /// Keeps every distinct word that lexes to exactly one piece; the
    /// closing and opening punctuation marks are always present.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set: BTreeSet<String> = words
            .into_iter()
            .map(Into::into)
            .filter(|w| w != OBJ_TEXT && lex(w) == [w.as_str()])
            .collect();
        set.extend(OPENING.iter().chain(CLOSING).map(|c| c.to_string()));
        let words: Vec<String> = set.into_iter().collect();
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), FIRST_WORD + i as u32))
            .collect();
        Vocabulary { words, index }
    }

    /// Template wording, similarity numbers, counts up to 32, the given
    /// labels and every word of the given texts.
    pub fn standard(labels: &[String], texts: &[String]) -> Self {
        let mut words: Vec<String> = Vec::new();
        let registry = TemplateRegistry::standard();
        for t in registry.templates.values() {
            for seg in &t.segments {
                if let Segment::Text { text } = seg {
                    words.extend(lex(text).into_iter().map(String::from));
                }
            }
            words.extend(lex(&t.question).into_iter().map(String::from));
        }
        words.extend(lex(BLOCK_WORDS).into_iter().map(String::from));
        words.extend((1..=32).map(|k| k.to_string()));
        words.extend((-100..=100).map(|c| format_similarity(c as f32 / 100.0)));
        for l in labels {
            words.extend(lex(l).into_iter().map(String::from));
        }
        for t in texts {
            words.extend(lex(t).into_iter().map(String::from));
        }
        Vocabulary::new(words)
    }

    /// Total id count including reserved and byte tokens.
    pub fn len(&self) -> usize {
        FIRST_WORD as usize + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        if word == OBJ_TEXT {
            return Some(OBJ);
        }
        self.index.get(word).copied()
    }

    /// Printable form of one id.
    pub fn token(&self, id: u32) -> Option<String> {
        match id {
            PAD => Some("<pad>".into()),
            BOS => Some("<bos>".into()),
            EOS => Some("<eos>".into()),
            OBJ => Some(OBJ_TEXT.into()),
            b if b < FIRST_WORD => Some(format!("<0x{:02X}>", b - BYTE_BASE)),
            w => self.words.get((w - FIRST_WORD) as usize).cloned(),
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        let mut prev_bytes = false;
        for piece in lex(text) {
            match self.id(piece) {
                Some(id) => {
                    out.push(id);
                    prev_bytes = false;
                }
                None => {
                    if prev_bytes {
                        out.push(BYTE_BASE + b' ' as u32);
                    }
                    out.extend(piece.bytes().map(|b| BYTE_BASE + b as u32));
                    prev_bytes = true;
                }
            }
        }
        out
    }

    /// Inverse of [`tokenize`](Self::tokenize) up to whitespace; reserved
    /// ids other than `[obj]` are skipped.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut pieces: Vec<String> = Vec::new();
        let mut bytes: Vec<u8> = Vec::new();
        let flush = |bytes: &mut Vec<u8>, pieces: &mut Vec<String>| {
            if !bytes.is_empty() {
                pieces.push(String::from_utf8_lossy(bytes).into_owned());
                bytes.clear();
            }
        };
        for &id in ids {
            match id {
                PAD | BOS | EOS => flush(&mut bytes, &mut pieces),
                OBJ => {
                    flush(&mut bytes, &mut pieces);
                    pieces.push(OBJ_TEXT.into());
                }
                b if b < FIRST_WORD => bytes.push((b - BYTE_BASE) as u8),
                w => {
                    flush(&mut bytes, &mut pieces);
                    if let Some(word) = self.words.get((w - FIRST_WORD) as usize) {
                        pieces.push(word.clone());
                    }
                }
            }
        }
        flush(&mut bytes, &mut pieces);
        let mut out = String::new();
        let mut after_open = true;
        for p in pieces {
            let closing = p.chars().count() == 1 && p.chars().all(|c| CLOSING.contains(&c));
            if !after_open && !closing {
                out.push(' ');
            }
            after_open = p.chars().count() == 1 && p.chars().all(|c| OPENING.contains(&c));
            out.push_str(&p);
        }
        out
    }
}

/// Two-decimal similarity text; negative zero prints as `0.00`.
pub fn format_similarity(s: f32) -> String {
    let t = format!("{s:.2}");
    if t == "-0.00" {
        "0.00".into()
    } else {
        t
    }
}

const BLOCK_WORDS: &str = "The top related objects are: is a (similarity).";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Segment {
    /// Rendered in-context block; required when present.
    Context,
    /// The query object's `[obj]` token.
    Object,
    /// The caller's question, or the template default.
    Question,
    Text { text: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub version: u32,
    pub segments: Vec<Segment>,
    #[serde(default)]
    pub question: String,
}

impl Template {
    pub fn uses_context(&self) -> bool {
        self.segments.contains(&Segment::Context)
    }
}

pub const CLASSIFY: &str = "classify";
pub const CAPTION: &str = "caption";
pub const CLASSIFY_RAG: &str = "classify_rag";
pub const CAPTION_RAG: &str = "caption_rag";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateRegistry {
    pub templates: BTreeMap<String, Template>,
}

impl TemplateRegistry {
    pub fn standard() -> Self {
        let t = |context: bool, question: &str| Template {
            version: 1,
            segments: if context {
                vec![Segment::Context, Segment::Object, Segment::Question]
            } else {
                vec![Segment::Object, Segment::Question]
            },
            question: question.into(),
        };
        let templates = [
            (CLASSIFY, t(false, "What is this?")),
            (CAPTION, t(false, "Describe this part of the image")),
            (CLASSIFY_RAG, t(true, "What is this?")),
            (CAPTION_RAG, t(true, "Describe this part of the image")),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        TemplateRegistry { templates }
    }

    pub fn get(&self, id: &str) -> Result<&Template> {
        self.templates
            .get(id)
            .ok_or_else(|| Error::NotFound(format!("template {id}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InContextEntry {
    pub embedding: ObjectEmbedding,
    pub label: String,
    pub similarity: f32,
}

/// Retrieved examples ordered by ascending similarity, so the most
/// relevant one sits next to the query.
#[derive(Clone, Debug, PartialEq)]
pub struct InContextBlock {
    entries: Vec<InContextEntry>,
}

impl InContextBlock {
    pub fn new(mut entries: Vec<InContextEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Usage("an in-context block needs k >= 1".into()));
        }
        entries.sort_by(|a, b| a.similarity.total_cmp(&b.similarity));
        Ok(InContextBlock { entries })
    }

    /// Builds a block from query hits; `resolve` supplies each record's
    /// decoder-space embedding.
    pub fn from_hits<F>(hits: &QueryResult, index: &RetrievalIndex, mut resolve: F) -> Result<Self>
    where
        F: FnMut(u64) -> Result<ObjectEmbedding>,
    {
        let mut entries = Vec::with_capacity(hits.hits.len());
        for h in hits.hits.iter().rev() {
            entries.push(InContextEntry {
                embedding: resolve(h.record_id)?,
                label: record_label(index, h.record_id)?,
                similarity: h.similarity,
            });
        }
        InContextBlock::new(entries)
    }

    pub fn entries(&self) -> &[InContextEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn render(&self) -> String {
        let items: Vec<(&str, f32)> = self.entries.iter().map(|e| (e.label.as_str(), e.similarity)).collect();
        render_block_text(&items)
    }
}

fn record_label(index: &RetrievalIndex, id: u64) -> Result<String> {
    let r = index.get(id).ok_or_else(|| Error::NotFound(format!("record {id}")))?;
    Ok(r.label.clone().unwrap_or_else(|| r.description.clone()))
}

/// Canonical block text for `(label, similarity)` pairs already in
/// ascending order.
pub fn render_block_text(items: &[(&str, f32)]) -> String {
    let mut s = format!("The top {} related objects are: ", items.len());
    for (label, sim) in items {
        s.push_str(&format!("{OBJ_TEXT} is a {label} (similarity {}). ", format_similarity(*sim)));
    }
    s
}

/// Block text for query hits (given most similar first), using record
/// labels or, failing that, descriptions.
pub fn render_incontext_block(hits: &QueryResult, index: &RetrievalIndex) -> Result<String> {
    if hits.hits.is_empty() {
        return Err(Error::Usage("an in-context block needs k >= 1".into()));
    }
    let labels = hits
        .hits
        .iter()
        .rev()
        .map(|h| Ok((record_label(index, h.record_id)?, h.similarity)))
        .collect::<Result<Vec<_>>>()?;
    let items: Vec<(&str, f32)> = labels.iter().map(|(l, s)| (l.as_str(), *s)).collect();
    Ok(render_block_text(&items))
}

/// Token ids with the positions of their `[obj]` tokens; slot `i` is the
/// `i`-th `[obj]` from the left.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLayout {
    pub text: String,
    pub tokens: Vec<u32>,
    pub slots: Vec<usize>,
    pub template_id: String,
    pub template_version: u32,
}

impl PromptLayout {
    pub fn from_text(vocab: &Vocabulary, text: &str) -> Self {
        let tokens = vocab.tokenize(text);
        let slots = tokens
            .iter()
            .enumerate()
            .filter_map(|(i, &t)| (t == OBJ).then_some(i))
            .collect();
        PromptLayout {
            text: text.to_string(),
            tokens,
            slots,
            template_id: String::new(),
            template_version: 0,
        }
    }

    /// Renders a template. `context` holds `(label, similarity)` pairs in
    /// ascending similarity; the query object takes the last slot.
    pub fn build(
        vocab: &Vocabulary,
        registry: &TemplateRegistry,
        template_id: &str,
        question: Option<&str>,
        context: Option<&[(&str, f32)]>,
    ) -> Result<Self> {
        let t = registry.get(template_id)?;
        match (t.uses_context(), context) {
            (true, None) => return Err(Error::Usage(format!("template {template_id} needs retrieved examples"))),
            (true, Some([])) => return Err(Error::Usage("an in-context block needs k >= 1".into())),
            (false, Some(_)) => {
                return Err(Error::Usage(format!("template {template_id} takes no retrieved examples")))
            }
            _ => {}
        }
        let mut parts: Vec<String> = Vec::new();
        for seg in &t.segments {
            match seg {
                Segment::Context => parts.push(render_block_text(context.unwrap_or_default()).trim_end().to_string()),
                Segment::Object => parts.push(OBJ_TEXT.into()),
                Segment::Question => parts.push(question.unwrap_or(&t.question).to_string()),
                Segment::Text { text } => parts.push(text.clone()),
            }
        }
        let mut layout = PromptLayout::from_text(vocab, &parts.join(" "));
        let expected = context.map_or(0, |c| c.len()) + 1;
        if layout.slots.len() != expected {
            return Err(Error::Usage(format!(
                "prompt has {} object slots, expected {expected}",
                layout.slots.len()
            )));
        }
        layout.template_id = template_id.to_string();
        layout.template_version = t.version;
        Ok(layout)
    }

    /// Number of tokens, which is also the number of resolved rows.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalPrompt {
    pub layout: PromptLayout,
    pub bound: Vec<Option<ObjectEmbedding>>,
}

impl MultimodalPrompt {
    pub fn unbound(layout: PromptLayout) -> Self {
        let bound = vec![None; layout.slots.len()];
        MultimodalPrompt { layout, bound }
    }

    pub fn bind(&mut self, slot: usize, embedding: ObjectEmbedding) -> Result<()> {
        let n = self.bound.len();
        let b = self
            .bound
            .get_mut(slot)
            .ok_or_else(|| Error::Usage(format!("slot {slot} out of range ({n} slots)")))?;
        *b = Some(embedding);
        Ok(())
    }

    pub fn tokens(&self) -> &[u32] {
        &self.layout.tokens
    }

    pub fn slots(&self) -> &[usize] {
        &self.layout.slots
    }

    /// Prompt text with each `[obj]` numbered by slot, for debugging.
    pub fn debug_text(&self, vocab: &Vocabulary) -> String {
        let mut slot = 0;
        let mut parts = Vec::new();
        let mut run = Vec::new();
        for &t in &self.layout.tokens {
            if t == OBJ {
                if !run.is_empty() {
                    parts.push(vocab.detokenize(&run));
                    run.clear();
                }
                parts.push(format!("[obj#{slot}]"));
                slot += 1;
            } else {
                run.push(t);
            }
        }
        if !run.is_empty() {
            parts.push(vocab.detokenize(&run));
        }
        parts.join(" ")
    }
}

/// Renders `template_id` and binds the retrieved embeddings to the first
/// slots and `query` to the last.
pub fn make_prompt(
    vocab: &Vocabulary,
    registry: &TemplateRegistry,
    template_id: &str,
    question: Option<&str>,
    query: ObjectEmbedding,
    block: Option<&InContextBlock>,
) -> Result<MultimodalPrompt> {
    let items: Option<Vec<(&str, f32)>> =
        block.map(|b| b.entries.iter().map(|e| (e.label.as_str(), e.similarity)).collect());
    let layout = PromptLayout::build(vocab, registry, template_id, question, items.as_deref())?;
    let mut prompt = MultimodalPrompt::unbound(layout);
    let mut slot = 0;
    if let Some(b) = block {
        for e in &b.entries {
            if e.embedding.dim() != query.dim() {
                return Err(Error::shape(
                    "make_prompt",
                    format!("in-context width {} but query width {}", e.embedding.dim(), query.dim()),
                ));
            }
            prompt.bind(slot, e.embedding.clone())?;
            slot += 1;
        }
    }
    prompt.bind(slot, query)?;
    Ok(prompt)
}

/// Mixed embedding matrix: text rows from `table` (`V × d'`), object rows
/// from the bound slots. One row per token.
pub fn resolve_embeddings(prompt: &MultimodalPrompt, table: &Tensor) -> Result<Tensor> {
    let d = table.cols();
    let v = table.rows();
    let mut data = Vec::with_capacity(prompt.layout.tokens.len() * d);
    let mut slot = 0;
    for &t in &prompt.layout.tokens {
        if t == OBJ {
            let e = prompt
                .bound
                .get(slot)
                .and_then(|b| b.as_ref())
                .ok_or(Error::UnboundSlot(slot))?;
            if e.dim() != d {
                return Err(Error::shape(
                    "resolve_embeddings",
                    format!("object width {} but embedding width {d}", e.dim()),
                ));
            }
            data.extend_from_slice(&e.vec);
            slot += 1;
        } else {
            if t as usize >= v {
                return Err(Error::shape("resolve_embeddings", format!("token {t} outside table of {v}")));
            }
            data.extend_from_slice(table.row(t as usize));
        }
    }
    Tensor::new(vec![prompt.layout.tokens.len(), d], data)
}
