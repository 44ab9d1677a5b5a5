//! File formats: PNG images, scene manifests, OCR results and checkpoints.

pub mod checkpoint;
pub mod image;
pub mod manifest;
pub mod ocr;

pub use self::image::{load_image, save_image, BitDepth};
pub use manifest::{ManifestEntry, SceneManifest};
pub use checkpoint::{load_checkpoint, load_checkpoint_header, save_checkpoint, Checkpoint};
pub use ocr::{load_ocr_results, save_ocr_results};
