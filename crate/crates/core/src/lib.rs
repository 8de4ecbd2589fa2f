//! Object-driven AR narrative engine: scene model, narrative scripts, story
//! sessions, anchor mapping, VLM generation and the evaluation metrics.

pub mod anchor;
pub mod api;
pub mod engine;
pub mod gateway;
pub mod metrics;
pub mod pipeline;
pub mod scene;
pub mod schema;
