//! Paired clean/degraded image synthesis.
//!
//! Every generator is a pure function of its inputs and a `u64` seed, so a
//! sample can be regenerated bit-for-bit from its record.

mod dataset;
mod io;
mod procedural;
mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use dataset::{collate, DatasetSpec, DegradationSettings, SyntheticDataset};
pub use io::{load_paired_folder, read_png, write_gray_png, write_paired_folder, write_png};
pub use procedural::procedural_image;
pub use synth::{
    add_gaussian_noise, blur_kernel, synth_blur, synth_haze, synth_lowlight, synth_rain, BlurKind, HazeParams,
    LowLightParams, RainParams,
};

/// Canonical noise levels in 8-bit units.
pub const NOISE_LEVELS: [f64; 3] = [15.0, 25.0, 50.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Degradation {
    Noise,
    Haze,
    Rain,
    Blur,
    #[serde(rename = "lowlight")]
    LowLight,
}

impl Degradation {
    pub const ALL: [Degradation; 5] = [
        Degradation::Noise,
        Degradation::Haze,
        Degradation::Rain,
        Degradation::Blur,
        Degradation::LowLight,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Degradation::Noise => "noise",
            Degradation::Haze => "haze",
            Degradation::Rain => "rain",
            Degradation::Blur => "blur",
            Degradation::LowLight => "lowlight",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&d| d == self).expect("listed")
    }
}

impl fmt::Display for Degradation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Degradation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "noise" | "denoise" => Ok(Degradation::Noise),
            "haze" | "dehaze" => Ok(Degradation::Haze),
            "rain" | "derain" => Ok(Degradation::Rain),
            "blur" | "deblur" => Ok(Degradation::Blur),
            "lowlight" | "low-light" | "low_light" => Ok(Degradation::LowLight),
            other => Err(Error::param(format!("unknown degradation label '{other}'"))),
        }
    }
}

/// An RGB image with values in [0, 1], stored as a `(3, H, W)` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Tensor,
    pub source_id: String,
}

impl Image {
    pub fn new(pixels: Tensor, source_id: impl Into<String>) -> Result<Self> {
        match pixels.shape() {
            [3, h, w] if *h > 0 && *w > 0 => {}
            s => return Err(Error::shape(format!("an image must be (3, H, W), got {s:?}"))),
        }
        if let Some(v) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::param(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            pixels,
            source_id: source_id.into(),
        })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor {
        self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    /// Checks the size constraints of the restoration network (four halvings).
    pub fn check_model_size(&self) -> Result<()> {
        check_model_size(self.height(), self.width())
    }
}

pub fn check_model_size(h: usize, w: usize) -> Result<()> {
    if h < 32 || w < 32 || h % 16 != 0 || w % 16 != 0 {
        return Err(Error::shape(format!(
            "image size {h}x{w} must be at least 32 and divisible by 16"
        )));
    }
    Ok(())
}

/// A clean/degraded pair together with the generator record that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationSample {
    pub degraded: Tensor,
    pub clean: Tensor,
    pub label: Degradation,
    pub params: BTreeMap<String, f64>,
    pub rng_seed: u64,
    pub sample_id: String,
}

impl DegradationSample {
    pub(crate) fn new(
        clean: &Image,
        degraded: Tensor,
        label: Degradation,
        params: BTreeMap<String, f64>,
        rng_seed: u64,
    ) -> Self {
        debug_assert_eq!(degraded.shape(), clean.pixels().shape());
        Self {
            degraded,
            clean: clean.pixels().clone(),
            label,
            params,
            rng_seed,
            sample_id: format!("{}-{}", clean.source_id, label),
        }
    }
}

/// SplitMix64 finalizer; used to derive independent child seeds.
pub fn mix_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_roundtrip_through_strings() {
        for d in Degradation::ALL {
            assert_eq!(d.as_str().parse::<Degradation>().unwrap(), d);
        }
        assert!(matches!("fog".parse::<Degradation>(), Err(Error::Param(_))));
    }

    #[test]
    fn image_rejects_out_of_range_pixels() {
        assert!(Image::new(Tensor::full(&[3, 2, 2], 1.5), "x").is_err());
        assert!(Image::new(Tensor::full(&[1, 2, 2], 0.5), "x").is_err());
        assert!(Image::new(Tensor::full(&[3, 2, 2], 0.5), "x").is_ok());
    }

    #[test]
    fn model_size_rule() {
        assert!(check_model_size(64, 48).is_ok());
        assert!(check_model_size(16, 64).is_err());
        assert!(check_model_size(40, 64).is_err());
    }
}
