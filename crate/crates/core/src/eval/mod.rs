//! Diarization error rate and RTTM interchange.

mod annotation;
mod der;
mod rttm;

pub use annotation::{Annotation, Segment};
pub use der::{
    best_mapping, der, der_in_region, format_table, score_corpus, DerReport, ScoringRegion,
    EXHAUSTIVE_MAPPING_LIMIT,
};
pub use rttm::{parse_rttm, write_rttm};
