//! Sliding-window prediction, component filtering and the two-stage cascade.

pub mod cascade;
pub mod components;
pub mod window;

pub use cascade::{
    combine_stages, containment_violations, predict_organ, stack_channels, two_stage_segment, CascadeConfig,
    Stage2Input, TwoStageResult,
};
pub use components::{label_components, largest_component, Connectivity};
pub use window::{argmax_labels, sliding_window_predict, Blend, SlidingWindowConfig};
