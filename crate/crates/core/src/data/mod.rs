//! Data plumbing: procedural generation of registered pairs, PNM file
//! ingestion, the nested split protocol, and online augmentation.

pub mod augment;
pub mod dataset;
pub mod pnm;
pub mod synth;

pub use augment::{augment, augment_with, draw, AugmentDraw, AugmentParams};
pub use dataset::{load_dataset, load_pair, nested_splits, save_pair, write_manifest, Split};
pub use pnm::DataError;
pub use synth::synth_generate;

use crate::loss::RoiMask;
use crate::tensor::Tensor;

/// A pixel-registered record: retinography, angiography, the two modality
/// ROIs, and an optional ground-truth vessel mask.
#[derive(Clone, Debug)]
pub struct SamplePair {
    pub id: String,
    /// (1,3,H,W) in [0,1].
    pub retinography: Tensor<f32>,
    /// (1,1,H,W) in [0,1].
    pub angiography: Tensor<f32>,
    pub roi_retinography: RoiMask<f32>,
    pub roi_angiography: RoiMask<f32>,
    /// (1,1,H,W), binary, contained in `roi_retinography`.
    pub vessel_mask: Option<Tensor<f32>>,
}

impl SamplePair {
    pub fn height(&self) -> usize {
        self.retinography.shape().h
    }

    pub fn width(&self) -> usize {
        self.retinography.shape().w
    }

    /// Check the registration invariants; returns a description of the
    /// first violation.
    pub fn validate(&self) -> Result<(), String> {
        let dims = self.retinography.shape();
        let all = [
            ("angiography", self.angiography.shape()),
            ("roi_retinography", self.roi_retinography.shape()),
            ("roi_angiography", self.roi_angiography.shape()),
        ];
        for (name, s) in all {
            if s.h != dims.h || s.w != dims.w {
                return Err(format!(
                    "{name} is {}x{} but retinography is {}x{}",
                    s.w, s.h, dims.w, dims.h
                ));
            }
        }
        if let Some(mask) = &self.vessel_mask {
            let s = mask.shape();
            if s.h != dims.h || s.w != dims.w {
                return Err(format!(
                    "vessel_mask is {}x{} but retinography is {}x{}",
                    s.w, s.h, dims.w, dims.h
                ));
            }
            for (i, (&m, &r)) in mask
                .data()
                .iter()
                .zip(self.roi_retinography.tensor().data())
                .enumerate()
            {
                if m != 0.0 && m != 1.0 {
                    return Err(format!("vessel_mask is not binary at pixel {i}"));
                }
                if m == 1.0 && r != 1.0 {
                    return Err(format!(
                        "vessel_mask pixel {i} lies outside roi_retinography"
                    ));
                }
            }
        }
        Ok(())
    }
}
