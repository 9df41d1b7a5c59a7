//! Hazard-event ontology, HAINEX entity extraction, and the
//! industrial-safety knowledge graph built from extracted events.

pub mod apps;
pub mod context;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod fixtures;
pub mod graph;
pub mod iskf;
pub mod model;
pub mod parallel;
pub mod trainer;
