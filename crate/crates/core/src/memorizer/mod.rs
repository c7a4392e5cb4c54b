//! The memorizer: tokenizer, prompt formats and the small causal language
//! model whose object-token likelihood is trained and probed.

pub mod format;
pub mod model;
pub mod vocab;

pub use format::{format_input, format_prompt, format_question, parse_prompt, question_for, TemplateTable};
pub use model::{
    forward, generate_greedy, generate_greedy_batch, gradients, loss, masked_nll, Batch, Gradients, Layout,
    LossOutput, Matrix, ModelConfig, Parameters, Sample, TensorInfo,
};
pub use vocab::Vocab;
