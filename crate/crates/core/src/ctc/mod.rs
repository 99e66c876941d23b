//! Collapse rule, alignment enumeration and the alignment-marginal loss.

pub mod loss;
pub mod paths;
pub mod vocab;

pub use loss::{
    batch_mean, ce_loss, posterior_marginals, qctc_loss, sequence_log_prob, ExtendedTarget, LossGrad,
};
pub use paths::{
    collapse, enumerate_valid_paths, enumerate_valid_paths_capped, for_each_path,
    min_path_length, DEFAULT_ENUMERATION_CAP,
};
pub use vocab::{AlignmentPath, TokenId, TokenSeq, Vocab, BLANK};
