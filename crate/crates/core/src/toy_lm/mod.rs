//! Tabular autoregressive policy over a small token alphabet.
//!
//! The policy conditions on a prompt bucket and the last `order` generated
//! tokens. All log-probabilities and gradients are closed form.

mod checkpoint;
mod mle;
mod policy;
mod vocab;

pub use checkpoint::{decode_params, encode_params, FORMAT_VERSION};
pub(crate) use checkpoint::{read_u32, read_u64, take};
pub use mle::{mean_nll, train_mle, MleConfig, MleMode, MleOutcome};
pub(crate) use policy::sample_with;
pub use policy::{
    grad_logprob, greedy_response, logprob_sequence, sample_response, ContextKey, PolicyParams, PolicyShape, Rollout,
    RowGrad, SamplerConfig, SparseGrad, StreamId,
};
pub use vocab::{Letter, TokenId, TokenKind, Vocab, VocabLayout, MAX_VOCAB, MIN_VOCAB, OBSERVATION_KINDS};
