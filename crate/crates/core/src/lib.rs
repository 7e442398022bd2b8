//! Cycle-consistent adversarial synthesis of nanoparticle micrographs.
//!
//! A style-conditioned U-Net generator turns binary particle masks into
//! realistic grayscale micrographs; an attention-gated U-Net segments images
//! back into masks; two PatchGAN discriminators drive the adversarial game.
//! Training, evaluation (FID/SSIM), and inference-time services live here;
//! the companion CLI crate wires them to files and flags.

pub mod tensor;
pub mod tape;
pub mod gradcheck;
pub mod data;
pub mod clahe;
pub mod networks;
pub mod losses;
pub mod training;
pub mod checkpoint;
pub mod evaluation;
pub mod generation;
pub mod toy;

pub use tensor::Tensor;
