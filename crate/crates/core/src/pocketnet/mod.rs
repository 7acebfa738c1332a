//! Encoder-decoder segmentation network with hand-written backpropagation.

pub mod checkpoint;
pub mod layers;
pub mod network;
pub mod tensor;

pub use checkpoint::{load_checkpoint, load_checkpoint_as, read_checkpoint_header, save_checkpoint};
pub use layers::{Buffer, Param, ParamKind};
pub use network::{count_parameters, ArchSpec, NetOutput, Network, Tape, Widening};
pub use tensor::{Real, Tensor};
