//! Evaluation measures.
//!
//! Knowledge selection is scored both as classification (precision, recall
//! and F1 at instance and snippet level) and as ranking (mean average
//! precision). Responses are scored with corpus BLEU-4, ROUGE-1/2/L and
//! METEOR (exact and stem stages). All values are fractions in `[0, 1]`;
//! reports multiply by 100 only when printed.

mod generation;
mod prf;
mod ranking;
mod report;

pub use generation::{
    corpus_bleu, corpus_bleu_tokens, meteor, meteor_tokens, rouge_l, rouge_l_tokens, rouge_n,
    rouge_n_tokens, GenerationScores, BLEU_EPSILON,
};
pub use prf::{
    classification_scores, instance_prf, snippet_prf, ClassificationScores, InstancePrf, Prf,
};
pub use ranking::{average_precision, mean_average_precision, MapSummary};
pub use report::{full_report, EvalReport, GenerationInputs, ReportInputs, SelectionInputs};
