//! Synthetic forgery datasets at desk scale.
//!
//! Authentic images are procedural (gradients, soft shapes, value noise);
//! manipulations are splice, copy-move, and an inpaint proxy, each with an
//! exact binary ground-truth mask and a 2-pixel feathered blend applied to
//! the image only. Everything is a pure function of a 64-bit seed through
//! the SplitMix64 stream documented in `iml_tensor::rng`.

mod dataset;
mod distort;
mod error;
mod gen;
pub mod pnm;

pub use dataset::{
    load_row, load_samples, read_dataset, read_index, write_dataset, DatasetIndex, IndexRow, Split,
};
pub use distort::{distort, gauss_blur, gauss_noise, Distortion};
pub use error::{DataError, Result};
pub use gen::{
    apply_flip, augment_flip, gen_authentic, gen_dataset, gen_manipulated, grain_amplitude,
    Manipulation, Sample,
};
