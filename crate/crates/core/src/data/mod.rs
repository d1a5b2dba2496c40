//! Synthetic two-phase-motion videos, corruptions, batching and storage.

mod corrupt;
mod loader;
mod store;
mod synthetic;

pub use corrupt::{
    brightness, corrupt, defocus_blur, gaussian_blur, gaussian_noise, impulse_noise, snow, speckle_noise,
    zoom_blur, CorruptionKind, CorruptionSpec,
};
pub use loader::{batch_indices, batches, Batch};
pub use store::{load_dataset, save_dataset};
pub use synthetic::{generate_dataset, Dataset, Motion, SyntheticSpec, VideoClip};
