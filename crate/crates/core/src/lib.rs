pub mod dataset;
pub mod evalreport;
pub mod kv;
pub mod micrograd;
pub mod patches;
pub mod phantom;
pub mod pinfer;
pub mod pinnet;
pub mod seeding;
pub mod shapemodel;
pub mod volumes;
