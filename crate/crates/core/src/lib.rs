pub mod data;
pub mod edge;
pub mod error;
pub mod events;
pub mod frame;
pub mod gaze;
pub mod nn;
pub mod uncertainty;
pub mod vit;
pub mod loss;
pub mod metrics;
pub mod synth;
pub mod harness;
pub mod pipeline;
