//! Spatially consistent short-axis cardiac MRI segmentation.
//!
//! The pipeline locates a region of interest with a heart-segmentation
//! network, then segments each slice of the cropped stack from base to apex
//! while feeding the previous slice and its predicted mask back in as
//! context. Everything needed to train and evaluate that pipeline on
//! synthetic phantoms lives here: a small tensor engine with reverse-mode
//! gradients, preprocessing, ground-truth adaptation, Dice losses, the
//! evaluation metrics and the on-disk formats.

pub mod error;
pub mod gradcheck;
pub mod gtadapt;
pub mod io;
pub mod metrics;
pub mod netbuilder;
pub mod phantom;
pub mod nn;
pub mod preprocess;
pub mod propagate;
pub mod roi;
pub mod stacklab;
pub mod train;

pub use error::{Error, Result};
