pub mod diffusion;
pub mod experiments;
pub mod federation;
pub mod nn;
pub mod phantom;
pub mod segmentation;
