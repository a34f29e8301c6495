//! Retrieval-augmented answering over Stack Overflow.

pub mod answer_generation;
pub mod domain;
pub mod evidence;
pub mod fixtures;
pub mod llm_gateway;
pub mod orchestrator;
pub mod prompts;
pub mod question_analysis;
pub mod ranking;
pub mod stackexchange;
pub mod transport;
pub mod vector_store;
