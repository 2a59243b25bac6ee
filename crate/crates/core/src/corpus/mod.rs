//! Synthetic concept-structured corpora with known ground truth, plus the
//! JSONL interchange used for externally annotated text.

mod generate;
mod interchange;
mod similarity;
mod vocab;

pub use generate::{
    frame_mixture, generate_corpus, generate_corpus_with, probe_templates, CorpusConfig,
    GeneratedCorpus, ProbeTemplate, Profile, Sequence, FRAMES,
};
pub use interchange::{
    export_annotated, export_corpus, from_record, ingest_annotated, read_jsonl, to_record,
    write_jsonl, ConceptRecord, IngestOptions, IngestReport, SequenceRecord,
};
pub use similarity::{
    ground_truth_similarity, GroundTruthSimilarity, CROSS_DOMAIN, SAME_CONCEPT, SAME_DOMAIN,
};
pub use vocab::{
    build_vocabulary, ConceptId, DomainId, TokenClass, TokenId, VocabConfig, Vocabulary, BOS,
    SPECIAL_TOKENS,
};
