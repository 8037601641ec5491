//! Feature-grouped adversarial domain adaptation for three-party vertical
//! federated learning.
//!
//! Party C (passive, feature rich) owns per-group feature extractors, domain
//! discriminators and aggregators, plus the only Paillier key. Active parties
//! (B on the source domain, A on the target domain) own a logistic regression
//! head whose party-C weights are kept masked by C's accumulated noise. The
//! [`protocol`] module runs pre-training, fine-tuning and inference as an
//! in-process message exchange; [`oracle`] replays the same math in plaintext.

pub mod adversarial;
pub mod config;
pub mod data;
pub mod error;
pub mod exec;
pub mod grouping;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod pipeline;
pub mod phe;
pub mod protocol;
pub mod rng;
pub mod secure_lr;

pub use error::{Error, Result};
pub use exec::Exec;
