use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    add_gaussian_noise, check_model_size, mix_seed, procedural_image, synth_blur, synth_haze, synth_lowlight,
    synth_rain, BlurKind, Degradation, DegradationSample, HazeParams, Image, LowLightParams, RainParams,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ranges the per-sample degradation parameters are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradationSettings {
    /// Noise levels in 8-bit units; one is picked uniformly per sample.
    pub noise_sigmas: Vec<f64>,
    pub rain_count: (usize, usize),
    pub rain_intensity: (f64, f64),
    pub rain_angle_deg: (f64, f64),
    pub haze_transmission: (f64, f64),
    pub haze_airlight: (f64, f64),
    pub haze_spatially_varying: bool,
    /// Odd kernel sizes; one is picked uniformly per sample.
    pub blur_kernel_sizes: Vec<usize>,
    pub blur_motion_fraction: f64,
    pub lowlight_gamma: (f64, f64),
    pub lowlight_scale: (f64, f64),
    pub lowlight_shot_noise: f64,
}

impl Default for DegradationSettings {
    fn default() -> Self {
        Self {
            noise_sigmas: vec![25.0],
            rain_count: (20, 60),
            rain_intensity: (0.3, 0.6),
            rain_angle_deg: (-20.0, 20.0),
            haze_transmission: (0.45, 0.8),
            haze_airlight: (0.75, 0.95),
            haze_spatially_varying: false,
            blur_kernel_sizes: vec![5, 7, 9],
            blur_motion_fraction: 0.5,
            lowlight_gamma: (1.5, 2.5),
            lowlight_scale: (0.3, 0.6),
            lowlight_shot_noise: 0.01,
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

impl DegradationSettings {
    /// Applies `label` to `clean` with parameters drawn from these ranges.
    pub fn apply(&self, clean: &Image, label: Degradation, seed: u64) -> Result<DegradationSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5e77, label.index() as u64));
        let child = rng.random::<u64>();
        match label {
            Degradation::Noise => {
                let sigma = *self
                    .noise_sigmas
                    .get(rng.random_range(0..self.noise_sigmas.len().max(1)))
                    .ok_or_else(|| Error::param("noise_sigmas is empty"))?;
                add_gaussian_noise(clean, sigma, child)
            }
            Degradation::Rain => {
                let (lo, hi) = self.rain_count;
                let p = RainParams {
                    streak_count: if hi > lo { rng.random_range(lo..=hi) } else { lo },
                    intensity: draw(&mut rng, self.rain_intensity),
                    angle_deg: draw(&mut rng, self.rain_angle_deg),
                    ..RainParams::default()
                };
                synth_rain(clean, p, child)
            }
            Degradation::Haze => {
                let p = HazeParams {
                    transmission: draw(&mut rng, self.haze_transmission),
                    airlight: draw(&mut rng, self.haze_airlight),
                    spatially_varying: self.haze_spatially_varying,
                };
                synth_haze(clean, p, child)
            }
            Degradation::Blur => {
                let k = *self
                    .blur_kernel_sizes
                    .get(rng.random_range(0..self.blur_kernel_sizes.len().max(1)))
                    .ok_or_else(|| Error::param("blur_kernel_sizes is empty"))?;
                let kind = if rng.random_bool(self.blur_motion_fraction.clamp(0.0, 1.0)) {
                    BlurKind::LinearMotion
                } else {
                    BlurKind::Gaussian
                };
                synth_blur(clean, k, kind, child)
            }
            Degradation::LowLight => {
                let p = LowLightParams {
                    gamma: draw(&mut rng, self.lowlight_gamma),
                    scale: draw(&mut rng, self.lowlight_scale),
                    shot_noise: self.lowlight_shot_noise,
                };
                synth_lowlight(clean, p, child)
            }
        }
    }
}

/// Describes a synthetic training or evaluation stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// Number of distinct clean source images per task.
    pub task_mix: BTreeMap<Degradation, usize>,
    /// How many times each source image is repeated per epoch, per task.
    /// Tasks missing from the map use 1.
    #[serde(default)]
    pub expansion: BTreeMap<Degradation, usize>,
    /// Side of the square training crop; divisible by 16.
    pub patch: usize,
    /// Side of the procedurally generated source images (>= `patch`).
    pub source_size: usize,
    /// Apply random horizontal and vertical flips (p = 0.5 each).
    #[serde(default = "yes")]
    pub flip: bool,
    pub seed: u64,
    #[serde(default)]
    pub settings: DegradationSettings,
}

fn yes() -> bool {
    true
}

impl DatasetSpec {
    /// Expansion ratios used for the five-task setting; dehazing is not expanded.
    pub fn five_task_expansion() -> BTreeMap<Degradation, usize> {
        BTreeMap::from([
            (Degradation::Noise, 3),
            (Degradation::Rain, 120),
            (Degradation::Blur, 5),
            (Degradation::LowLight, 200),
            (Degradation::Haze, 1),
        ])
    }

    /// Builds a spec from string-keyed maps, rejecting unknown labels.
    pub fn from_labels(
        task_mix: &BTreeMap<String, usize>,
        expansion: &BTreeMap<String, usize>,
        patch: usize,
        seed: u64,
    ) -> Result<Self> {
        let parse = |m: &BTreeMap<String, usize>| -> Result<BTreeMap<Degradation, usize>> {
            m.iter().map(|(k, &v)| Ok((k.parse()?, v))).collect()
        };
        let spec = Self {
            task_mix: parse(task_mix)?,
            expansion: parse(expansion)?,
            patch,
            source_size: patch,
            flip: true,
            seed,
            settings: DegradationSettings::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.patch % 16 != 0 {
            return Err(Error::param(format!(
                "patch size {} must be a positive multiple of 16",
                self.patch
            )));
        }
        if self.source_size < self.patch {
            return Err(Error::param(format!(
                "source size {} is smaller than the patch {}",
                self.source_size, self.patch
            )));
        }
        Ok(())
    }

    fn expansion_of(&self, d: Degradation) -> usize {
        self.expansion.get(&d).copied().unwrap_or(1)
    }
}

/// A deterministic, epoch-indexed stream of degraded/clean pairs.
///
/// Sample `i` of epoch `e` depends only on `(seed, e, i)`, so samples can be
/// generated lazily, in any order, or by concurrent workers.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    spec: DatasetSpec,
    /// `(task, source index)` per base slot, in task order.
    slots: Vec<(Degradation, usize)>,
    sources: Option<Vec<Image>>,
}

impl SyntheticDataset {
    pub fn new(spec: DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let mut slots = Vec::new();
        for (&task, &count) in &spec.task_mix {
            for i in 0..count {
                for _ in 0..spec.expansion_of(task) {
                    slots.push((task, i));
                }
            }
        }
        Ok(Self {
            spec,
            slots,
            sources: None,
        })
    }

    /// Uses caller-provided clean images instead of procedural ones. Source
    /// index `i` of every task maps to `images[i % images.len()]`.
    pub fn with_sources(spec: DatasetSpec, images: Vec<Image>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::param("no source images"));
        }
        for img in &images {
            if img.height() < spec.patch || img.width() < spec.patch {
                return Err(Error::param(format!(
                    "source image {} is smaller than the patch",
                    img.source_id
                )));
            }
        }
        let mut ds = Self::new(spec)?;
        ds.sources = Some(images);
        Ok(ds)
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn epoch_len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    fn source(&self, i: usize) -> Image {
        match &self.sources {
            Some(imgs) => imgs[i % imgs.len()].clone(),
            None => {
                let s = self.spec.source_size;
                // the same clean scene is shared across tasks
                let seed = mix_seed(self.spec.seed, 0xc1ea, i as u64);
                procedural_image(s, s, seed, &format!("src{i:05}"))
            }
        }
    }

    /// Order in which epoch `epoch` visits the base slots.
    pub fn order(&self, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.slots.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.spec.seed, epoch, u64::MAX));
        idx.shuffle(&mut rng);
        idx
    }

    /// Generates slot `index` for epoch `epoch` (slot order, not shuffled).
    pub fn sample(&self, epoch: u64, index: usize) -> Result<DegradationSample> {
        let (task, src) = *self
            .slots
            .get(index)
            .ok_or_else(|| Error::param(format!("sample index {index} out of range {}", self.slots.len())))?;
        let seed = mix_seed(self.spec.seed, epoch, index as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let full = self.source(src);
        let p = self.spec.patch;
        let top = rng.random_range(0..=full.height() - p);
        let left = rng.random_range(0..=full.width() - p);
        let mut crop = full.pixels().narrow(1, top, p).narrow(2, left, p);
        if self.spec.flip {
            if rng.random_bool(0.5) {
                crop = flip(&crop, false);
            }
            if rng.random_bool(0.5) {
                crop = flip(&crop, true);
            }
        }
        let id = format!("{}-e{epoch}-{index}", full.source_id);
        let clean = Image::new(crop, id)?;
        self.spec.settings.apply(&clean, task, rng.random())
    }

    /// All samples of an epoch in shuffled order.
    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = Result<DegradationSample>> + '_ {
        self.order(epoch).into_iter().map(move |i| self.sample(epoch, i))
    }

    /// A fixed evaluation set: every slot of epoch 0 without shuffling.
    pub fn materialize(&self) -> Result<Vec<DegradationSample>> {
        (0..self.epoch_len()).map(|i| self.sample(0, i)).collect()
    }
}

/// Mirrors a `(C, H, W)` tensor horizontally (`vertical = false`) or vertically.
fn flip(t: &Tensor, vertical: bool) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = if vertical { (h - 1 - y, x) } else { (y, w - 1 - x) };
                out[ci * h * w + y * w + x] = src[ci * h * w + sy * w + sx];
            }
        }
    }
    Tensor::from_parts(vec![c, h, w], out)
}

/// Stacks samples into `(B, 3, H, W)` degraded and clean batches.
pub fn collate(samples: &[DegradationSample]) -> Result<(Tensor, Tensor)> {
    let first = samples.first().ok_or_else(|| Error::param("empty batch"))?;
    let shape = first.clean.shape().to_vec();
    check_model_size(shape[1], shape[2])?;
    let mut deg = Vec::with_capacity(samples.len() * first.clean.len());
    let mut cln = Vec::with_capacity(samples.len() * first.clean.len());
    for s in samples {
        if s.clean.shape() != shape.as_slice() {
            return Err(Error::shape("samples in a batch must share a shape"));
        }
        deg.extend_from_slice(s.degraded.data());
        cln.extend_from_slice(s.clean.data());
    }
    let bshape = vec![samples.len(), shape[0], shape[1], shape[2]];
    Ok((Tensor::from_parts(bshape.clone(), deg), Tensor::from_parts(bshape, cln)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(mix: &[(Degradation, usize)], exp: &[(Degradation, usize)]) -> DatasetSpec {
        DatasetSpec {
            task_mix: mix.iter().copied().collect(),
            expansion: exp.iter().copied().collect(),
            patch: 32,
            source_size: 48,
            flip: true,
            seed: 11,
            settings: DegradationSettings::default(),
        }
    }

    #[test]
    fn stream_length_follows_expansion() {
        let ds = SyntheticDataset::new(spec(&[(Degradation::Noise, 10)], &[(Degradation::Noise, 3)])).unwrap();
        assert_eq!(ds.epoch_len(), 30);
        let samples: Vec<_> = ds.epoch(0).collect::<Result<_>>().unwrap();
        assert_eq!(samples.len(), 30);
        assert!(samples.iter().all(|s| s.label == Degradation::Noise));
    }

    #[test]
    fn zero_counts_give_an_empty_stream() {
        let s = spec(
            &[(Degradation::Noise, 0), (Degradation::Rain, 0)],
            &DatasetSpec::five_task_expansion().into_iter().collect::<Vec<_>>(),
        );
        let ds = SyntheticDataset::new(s).unwrap();
        assert_eq!(ds.epoch(3).count(), 0);
    }

    #[test]
    fn five_task_expansion_values() {
        let e = DatasetSpec::five_task_expansion();
        assert_eq!(e[&Degradation::Noise], 3);
        assert_eq!(e[&Degradation::Rain], 120);
        assert_eq!(e[&Degradation::Blur], 5);
        assert_eq!(e[&Degradation::LowLight], 200);
        assert_eq!(e[&Degradation::Haze], 1);
    }

    #[test]
    fn unknown_label_and_bad_patch_are_rejected() {
        let mix = BTreeMap::from([("snow".to_string(), 1)]);
        assert!(matches!(
            DatasetSpec::from_labels(&mix, &BTreeMap::new(), 32, 0),
            Err(Error::Param(_))
        ));
        let mix = BTreeMap::from([("rain".to_string(), 1)]);
        assert!(DatasetSpec::from_labels(&mix, &BTreeMap::new(), 40, 0).is_err());
        assert!(DatasetSpec::from_labels(&mix, &BTreeMap::new(), 32, 0).is_ok());
    }

    #[test]
    fn samples_are_reproducible_and_epoch_dependent() {
        let s = spec(&[(Degradation::Rain, 2), (Degradation::Haze, 2)], &[]);
        let a = SyntheticDataset::new(s.clone()).unwrap();
        let b = SyntheticDataset::new(s).unwrap();
        for i in 0..a.epoch_len() {
            assert_eq!(a.sample(1, i).unwrap(), b.sample(1, i).unwrap());
            let x = a.sample(1, i).unwrap();
            assert_eq!(x.clean.shape(), &[3, 32, 32]);
            assert!(x.degraded.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_ne!(a.sample(1, 0).unwrap().degraded, a.sample(2, 0).unwrap().degraded);
    }

    #[test]
    fn flip_is_an_involution() {
        let t = Tensor::from_fn(&[3, 4, 5], |i| i as f64);
        assert_eq!(flip(&flip(&t, true), true), t);
        assert_eq!(flip(&flip(&t, false), false), t);
        assert_eq!(flip(&t, false).get(&[0, 0, 0]), 4.0);
    }

    #[test]
    fn every_task_applies() {
        let img = procedural_image(32, 32, 3, "x");
        let st = DegradationSettings::default();
        for d in Degradation::ALL {
            let s = st.apply(&img, d, 9).unwrap();
            assert_eq!(s.label, d);
            assert_ne!(s.degraded, s.clean, "{d}");
        }
    }

    #[test]
    fn collate_stacks() {
        let ds = SyntheticDataset::new(spec(&[(Degradation::Noise, 2)], &[])).unwrap();
        let v = ds.materialize().unwrap();
        let (d, c) = collate(&v).unwrap();
        assert_eq!(d.shape(), &[2, 3, 32, 32]);
        assert_eq!(&c.data()[3 * 32 * 32..], v[1].clean.data());
    }
}
