//! Dense retrieval pretraining and open-domain QA finetuning.
//!
//! The crate is organized by pipeline stage:
//!
//! - [`corpus`]: tokenization, chunking, answer normalization and span matching
//! - [`encoder`]: the dual encoder (question and paragraph towers) and its gradients
//! - [`vecindex`]: k-means, flat and IVF maximum inner product search
//! - [`datagen`]: answer-candidate detection and question/paragraph pair generation
//! - [`pretrain`]: in-batch negative loss and clustering-based progressive pretraining
//! - [`finetune`]: reader and retrieval losses, QA finetuning and answer inference
//! - [`evalqa`]: Recall@k, exact match and ablation reports
//! - [`synth`]: a seeded synthetic corpus for desk-scale experiments

mod binio;
pub mod corpus;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod evalqa;
pub mod finetune;
pub mod linalg;
pub mod optim;
pub mod pretrain;
pub mod seed;
pub mod synth;
pub mod vecindex;

pub use error::{Error, Result};
