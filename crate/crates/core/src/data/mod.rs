//! Data ingestion: sketch synthesis, component extraction, splits.

pub mod io;
pub mod layout;
pub mod sketch;
pub mod split;
pub mod synthetic;

use s2i_tensor::Tensor;

use crate::error::{Error, Result};

pub use layout::{
    extract_components, reassemble, ComponentLayout, ComponentSet, NamedRect, Rect, RegionLayout,
};
pub use sketch::{synthesize_sketch, SketchParams};
pub use split::{split_dataset, DatasetManifest, ManifestEntry};

/// An aligned sketch (`[1, H, W]`) and photo (`[3, H, W]`) of one identity.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub sketch: Tensor,
    pub photo: Tensor,
    pub identity_id: String,
}

impl ImagePair {
    pub fn new(sketch: Tensor, photo: Tensor, identity_id: &str) -> Result<Self> {
        if sketch.rank() != 3 || photo.rank() != 3 {
            return Err(Error::Shape("sketch and photo must be [C,H,W]".into()));
        }
        if sketch.shape()[1..] != photo.shape()[1..] {
            return Err(Error::Shape(format!(
                "sketch {:?} and photo {:?} differ in size",
                sketch.shape(),
                photo.shape()
            )));
        }
        let in_range = |t: &Tensor| t.data().iter().all(|v| (0.0..=1.0).contains(v));
        if !in_range(&sketch) || !in_range(&photo) {
            return Err(Error::Validation("pixel values outside [0, 1]".into()));
        }
        if identity_id.is_empty() {
            return Err(Error::Validation("empty identity id".into()));
        }
        Ok(Self {
            sketch,
            photo,
            identity_id: identity_id.to_string(),
        })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.sketch.dim(1), self.sketch.dim(2))
    }
}

/// Stacks pairs into `([N,1,H,W] sketches, [N,3,H,W] photos)`.
pub fn batch(pairs: &[ImagePair]) -> (Tensor, Tensor) {
    let sketches: Vec<Tensor> = pairs.iter().map(|p| p.sketch.clone()).collect();
    let photos: Vec<Tensor> = pairs.iter().map(|p| p.photo.clone()).collect();
    (Tensor::stack(&sketches), Tensor::stack(&photos))
}
