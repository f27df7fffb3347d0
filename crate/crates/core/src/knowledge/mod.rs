// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic facts and their constructive planting into model weights.

pub mod dataset;
pub mod plant;

pub use dataset::{generate_dataset, Dataset, Fact, GenerateOptions, PromptInstance, Relation, Tokenizer};
pub use plant::{
    plant_model, plant_model_with_report, preset, ExpertSlot, HeadAddr, NeuronRange, PlantParams, PlantPlan,
    PlantReport, Preset, RelationPlan,
};
