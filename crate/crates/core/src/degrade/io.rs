//! 8-bit PNG I/O and the paired-folder layout
//! `<root>/<task>/{degraded,clean}/<name>.png`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};

use super::{Degradation, DegradationSample, Image};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads an image as RGB with values mapped linearly to [0, 1].
pub fn read_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = p[c] as f64 / 255.0;
        }
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Image::new(Tensor::new(&[3, h, w], data)?, id)
}

/// Writes a `(3, H, W)` tensor as an 8-bit RGB PNG, clipping to [0, 1].
pub fn write_png(path: impl AsRef<Path>, pixels: &Tensor) -> Result<()> {
    let [3, h, w] = pixels.shape() else {
        return Err(Error::shape(format!("expected (3, H, W), got {:?}", pixels.shape())));
    };
    let (h, w) = (*h, *w);
    let d = pixels.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let o = y as usize * w + x as usize;
        image::Rgb([to_u8(d[o]), to_u8(d[h * w + o]), to_u8(d[2 * h * w + o])])
    });
    img.save(path)?;
    Ok(())
}

/// Writes an `(H, W)` map as a grayscale PNG, clipping to [0, 1].
pub fn write_gray_png(path: impl AsRef<Path>, map: &Tensor) -> Result<()> {
    let [h, w] = map.shape() else {
        return Err(Error::shape(format!("expected (H, W), got {:?}", map.shape())));
    };
    let w = *w;
    let d = map.data();
    let img = GrayImage::from_fn(w as u32, *h as u32, |x, y| {
        image::Luma([to_u8(d[y as usize * w + x as usize])])
    });
    img.save(path)?;
    Ok(())
}

/// Loads every `<task>/{degraded,clean}/<name>.png` pair under `root`.
///
/// Task directories must carry a known degradation label; files present on
/// only one side of a pair are an error.
pub fn load_paired_folder(root: impl AsRef<Path>) -> Result<Vec<DegradationSample>> {
    let root = root.as_ref();
    let mut out = Vec::new();
    let mut tasks: Vec<_> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .collect();
    tasks.sort_by_key(|e| e.file_name());
    for task_dir in tasks {
        let name = task_dir.file_name().to_string_lossy().into_owned();
        let label: Degradation = name.parse()?;
        let deg_dir = task_dir.path().join("degraded");
        let clean_dir = task_dir.path().join("clean");
        let mut names: Vec<_> = fs::read_dir(&deg_dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name())
            .filter(|n| n.to_string_lossy().to_ascii_lowercase().ends_with(".png"))
            .collect();
        names.sort();
        let clean_count = fs::read_dir(&clean_dir)?.count();
        if clean_count != names.len() {
            return Err(Error::param(format!(
                "{name}: {} degraded files but {clean_count} clean files",
                names.len()
            )));
        }
        for file in names {
            let deg = read_png(deg_dir.join(&file))?;
            let clean = read_png(clean_dir.join(&file))?;
            if deg.pixels().shape() != clean.pixels().shape() {
                return Err(Error::shape(format!(
                    "{name}/{}: degraded and clean sizes differ",
                    file.to_string_lossy()
                )));
            }
            let stem = clean.source_id.clone();
            out.push(DegradationSample {
                degraded: deg.into_pixels(),
                clean: clean.into_pixels(),
                label,
                params: BTreeMap::new(),
                rng_seed: 0,
                sample_id: format!("{stem}-{label}"),
            });
        }
    }
    Ok(out)
}

/// Writes samples in the paired-folder layout; file names are the sample ids.
pub fn write_paired_folder(root: impl AsRef<Path>, samples: &[DegradationSample]) -> Result<()> {
    let root = root.as_ref();
    for (i, s) in samples.iter().enumerate() {
        let dir = root.join(s.label.as_str());
        fs::create_dir_all(dir.join("degraded"))?;
        fs::create_dir_all(dir.join("clean"))?;
        let file = format!("{i:05}_{}.png", s.sample_id);
        write_png(dir.join("degraded").join(&file), &s.degraded)?;
        write_png(dir.join("clean").join(&file), &s.clean)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{procedural_image, DegradationSettings};

    #[test]
    fn png_roundtrip_is_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = procedural_image(16, 24, 2, "p");
        let path = dir.path().join("x.png");
        write_png(&path, img.pixels()).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!(back.pixels().shape(), &[3, 16, 24]);
        assert!(back.pixels().max_abs_diff(img.pixels()) <= 0.5 / 255.0 + 1e-12);
        assert_eq!(back.source_id, "x");
    }

    #[test]
    fn paired_folder_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img = procedural_image(32, 32, 4, "s");
        let st = DegradationSettings::default();
        let samples = vec![
            st.apply(&img, Degradation::Rain, 1).unwrap(),
            st.apply(&img, Degradation::Haze, 2).unwrap(),
        ];
        write_paired_folder(dir.path(), &samples).unwrap();
        let loaded = load_paired_folder(dir.path()).unwrap();
        assert_eq!(loaded.len(), 2);
        // directories are visited alphabetically: haze before rain
        assert_eq!(loaded[0].label, Degradation::Haze);
        assert!(loaded[1].degraded.max_abs_diff(&samples[0].degraded) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn unknown_task_directory_is_a_param_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("snow/degraded")).unwrap();
        assert!(matches!(load_paired_folder(dir.path()), Err(Error::Param(_))));
    }

    #[test]
    fn gray_png_checks_rank() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_gray_png(dir.path().join("g.png"), &Tensor::zeros(&[3, 4, 4])).is_err());
        write_gray_png(dir.path().join("g.png"), &Tensor::full(&[4, 4], 0.5)).unwrap();
    }
}
