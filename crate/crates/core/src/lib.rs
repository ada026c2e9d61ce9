//! Bi-level fine-tuning of a LoRA-adapted segmentation decoder and its prompt
//! embeddings, on a synthetic shape-segmentation task.

pub mod blo;
pub mod data;
pub mod experiment;
pub mod gradcheck;
pub mod loss;
pub mod nn;
pub mod optim;
pub mod tensor;
