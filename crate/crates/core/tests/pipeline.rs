use std::collections::BTreeSet;

use olive_core::model::{lookup_grid, predict_retrieval, ModelConfig, OliveModel};
use olive_core::prompt::{Vocabulary, CLASSIFY, CLASSIFY_RAG};
use olive_core::retrieval::RetrievalIndex;
use olive_core::training::{build_datasets, build_index, generate_corpus, CorpusSpec, LabelSet, SplitSpec};

fn corpus() -> (olive_core::training::Corpus, LabelSet) {
    let spec = CorpusSpec {
        classes: 4,
        objects_per_class: 12,
        seed: 9,
        ..CorpusSpec::default()
    };
    let corpus = generate_corpus(&spec).unwrap();
    let classes = corpus.domain.labels.clone();
    let labels = LabelSet::new(classes.clone(), &classes[3..]).unwrap();
    (corpus, labels)
}

#[test]
fn retrieval_votes_recover_held_out_labels() {
    let (corpus, labels) = corpus();
    let split = SplitSpec {
        retrieval_per_class: 4,
        val_fraction: 0.0,
        test_fraction: 0.5,
    };
    let splits = build_datasets(&corpus.annotations, &labels, &split, 3).unwrap();
    assert!(splits.train.iter().all(|a| labels.is_seen(&a.label)));
    assert!(splits.test.iter().any(|a| !labels.is_seen(&a.label)));

    let index = build_index(&splits.retrieval, &corpus.features).unwrap();
    assert_eq!(index.len(), 16);
    let none = BTreeSet::new();
    let mut right = 0;
    for q in &splits.test {
        let grid = lookup_grid(&corpus.features, &q.image_id).unwrap();
        let (label, hits) = predict_retrieval(&index, grid, &q.mask().unwrap(), 3, &none).unwrap();
        assert_eq!(hits.hits.len(), 3);
        right += (label == q.label) as usize;
    }
    assert_eq!(right, splits.test.len());

    let bytes = index.to_jsonl().unwrap();
    let back = RetrievalIndex::from_jsonl(&bytes).unwrap();
    assert_eq!(back.records(), index.records());
    assert_eq!(back.revision(), index.revision());
}

#[test]
fn untrained_model_builds_prompts_and_survives_a_checkpoint_round_trip() {
    let (corpus, labels) = corpus();
    let vocab = Vocabulary::standard(labels.classes(), &[]);
    let model = OliveModel::init(ModelConfig::default(), vocab, 5).unwrap();
    let index = build_index(&corpus.annotations[..8], &corpus.features).unwrap();

    let q = &corpus.annotations[20];
    let grid = lookup_grid(&corpus.features, &q.image_id).unwrap();
    let mask = q.mask().unwrap();
    let plain = model.generative_prompt(grid, &mask, CLASSIFY, None).unwrap();
    let (rag, hits) = model
        .retrieval_prompt(&index, &corpus.features, grid, &mask, 2, &BTreeSet::new(), CLASSIFY_RAG, None)
        .unwrap();
    assert_eq!(hits.hits.len(), 2);
    assert!(rag.tokens().len() > plain.tokens().len());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model.save(&path).unwrap();
    let loaded = OliveModel::load(&path).unwrap();
    assert_eq!(
        loaded.resampler_embedding(grid, &mask).unwrap().vec,
        model.resampler_embedding(grid, &mask).unwrap().vec
    );
    let (a, _) = model.answer(&rag, 4).unwrap();
    let (b, _) = loaded.answer(&rag, 4).unwrap();
    assert_eq!(a, b);
}
