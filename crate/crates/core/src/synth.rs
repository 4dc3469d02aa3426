//! Synthetic object-based SITS generator with ground-truth marking of which
//! pixels carry the class signal.
//!
//! Each class owns a smooth temporal prototype per band (seasonal sinusoid
//! with class-specific phase, offset and trend). Discriminative pixels are
//! that prototype plus Gaussian noise. Distractor pixels are drawn from a
//! small pool of class-independent prototypes (flat "bare soil" levels and
//! step-like "built-up" transitions) shared by every class, so they carry
//! no label information by construction. Labels exist only at object level.
//!
//! Objects are laid out as small rectangles with the distractor pixels in a
//! contiguous block at the bottom, which makes attention maps visually
//! checkable.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ObjectSits, PixelTs};
use crate::error::{Error, Result};
use crate::rng;

/// Generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub t: usize,
    pub b: usize,
    pub classes: usize,
    pub objects_per_class: usize,
    pub pixels_min: usize,
    pub pixels_max: usize,
    pub distractor_fraction: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            t: 24,
            b: 4,
            classes: 4,
            objects_per_class: 60,
            pixels_min: 16,
            pixels_max: 48,
            distractor_fraction: 0.5,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t < 4 || self.b == 0 || self.classes < 2 || self.objects_per_class == 0 {
            return Err(Error::Config(
                "generator needs t >= 4, b >= 1, classes >= 2, objects_per_class >= 1".into(),
            ));
        }
        if self.pixels_min == 0 || self.pixels_min > self.pixels_max {
            return Err(Error::Config(format!(
                "bad pixel range {}..{}",
                self.pixels_min, self.pixels_max
            )));
        }
        if !(0.0..1.0).contains(&self.distractor_fraction) {
            return Err(Error::Config(format!(
                "distractor_fraction {} outside [0,1)",
                self.distractor_fraction
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Which pixels of each object carry the class signal and which are
/// distractors (a partition of the pixel indices).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub objects: BTreeMap<String, ObjectTruth>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectTruth {
    pub discriminative: Vec<usize>,
    pub distractor: Vec<usize>,
    /// Index into the distractor pool used for this object's noise block.
    pub distractor_prototype: usize,
}

/// Size of the class-independent distractor pool (one entry per class
/// contrast, at least two).
pub fn distractor_pool(config: &SynthConfig) -> usize {
    config.classes.max(2)
}

/// Class prototype value at (class, band, timestep).
pub fn class_prototype(config: &SynthConfig, class: usize, band: usize, step: usize) -> f32 {
    let c = class as f64;
    let tt = step as f64 / config.t as f64;
    let phase = std::f64::consts::TAU * c / config.classes as f64;
    let cycles = 1.0 + (band % 3) as f64;
    let amp = 0.5 - 0.05 * (band % 3) as f64;
    let offset = 0.3 * (c - (config.classes as f64 - 1.0) / 2.0);
    let trend = 0.3 * ((class % 3) as f64 - 1.0);
    (0.5 + offset + amp * (std::f64::consts::TAU * cycles * tt + phase).sin() + trend * (tt - 0.5))
        as f32
}

/// Distractor prototype value at (pool index, band, timestep). The pool is
/// fixed and shared by every class, so distractor pixels carry no label
/// information.
///
/// Each entry is a bright "bare soil / built-up" base shape plus the
/// deviation of one class prototype from the prototype mean. At the default
/// 50% mixing this makes the object MEAN ambiguous between class pairs
/// (class c with distractor j averages to the same point as class j with
/// distractor c), while the component signals themselves stay cleanly
/// separable: aggregate statistics lose exactly the information that
/// per-component processing keeps.
pub fn distractor_prototype(config: &SynthConfig, proto: usize, band: usize, step: usize) -> f32 {
    let pool = distractor_pool(config);
    let j = proto % pool;
    let tt = step as f64 / config.t as f64;
    // Bright base well above the class-prototype range, with a mild
    // built-up-like step at mid-series.
    let base = 1.8 + 0.05 * band as f64 - if step * 2 < config.t { 0.0 } else { 0.1 };
    let mean_proto: f64 = (0..config.classes)
        .map(|c| f64::from(class_prototype(config, c, band, step)))
        .sum::<f64>()
        / config.classes as f64;
    let contrast = if j < config.classes {
        f64::from(class_prototype(config, j, band, step)) - mean_proto
    } else {
        // Pool entries beyond the class count (classes < 2 never happens):
        // plain base with a band-dependent tilt.
        0.2 * (tt - 0.5)
    };
    (base + contrast) as f32
}

fn series(config: &SynthConfig, value_at: impl Fn(usize, usize) -> f32) -> Vec<f32> {
    let mut out = Vec::with_capacity(config.t * config.b);
    for step in 0..config.t {
        for band in 0..config.b {
            out.push(value_at(band, step));
        }
    }
    out
}

/// Minimum pairwise L2 distance between class prototypes (over the full
/// `t x b` series). The default configuration keeps this far above the noise
/// floor `noise_sigma * sqrt(t*b)`.
pub fn min_prototype_distance(config: &SynthConfig) -> f64 {
    let mut min = f64::INFINITY;
    for a in 0..config.classes {
        for b in (a + 1)..config.classes {
            let pa = series(config, |band, step| class_prototype(config, a, band, step));
            let pb = series(config, |band, step| class_prototype(config, b, band, step));
            let d2: f64 = pa
                .iter()
                .zip(&pb)
                .map(|(x, y)| {
                    let d = f64::from(x - y);
                    d * d
                })
                .sum();
            min = min.min(d2.sqrt());
        }
    }
    min
}

/// Generates a labeled dataset plus its pixel-level ground truth. Fully
/// deterministic under `config.seed`: each object draws from its own stream.
pub fn generate(config: &SynthConfig) -> Result<(Dataset, SynthTruth)> {
    config.validate()?;
    let n_objects = config.classes * config.objects_per_class;
    let mut objects = Vec::with_capacity(n_objects);
    let mut truth = BTreeMap::new();

    for index in 0..n_objects {
        let class = index / config.objects_per_class;
        let id = format!("o{index:04}");
        let mut obj_rng = rng::stream(config.seed, "synth", index as u64);

        let n_pix = obj_rng.gen_range(config.pixels_min..=config.pixels_max);
        let n_dis = (config.distractor_fraction * n_pix as f64).round() as usize;
        let n_disc = n_pix - n_dis;
        let proto = obj_rng.gen_range(0..distractor_pool(config));

        let noise = Normal::new(0.0f64, config.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();

        // Row-major rectangle; discriminative pixels first, the distractor
        // block contiguous at the bottom.
        let width = (n_pix as f64).sqrt().ceil() as u32;
        let mut pixels = Vec::with_capacity(n_pix);
        for p in 0..n_pix {
            let coord = (p as u32 / width, p as u32 % width);
            let mut values = if p < n_disc {
                series(config, |band, step| class_prototype(config, class, band, step))
            } else {
                series(config, |band, step| {
                    distractor_prototype(config, proto, band, step)
                })
            };
            if config.noise_sigma > 0.0 {
                for v in &mut values {
                    *v += noise.sample(&mut obj_rng) as f32;
                }
            }
            pixels.push(PixelTs {
                values,
                coord: Some(coord),
            });
        }

        truth.insert(
            id.clone(),
            ObjectTruth {
                discriminative: (0..n_disc).collect(),
                distractor: (n_disc..n_pix).collect(),
                distractor_prototype: proto,
            },
        );
        objects.push(ObjectSits {
            id,
            label: Some(class),
            pixels,
        });
    }

    let ds = Dataset {
        objects,
        class_names: (0..config.classes).map(|c| format!("class_{c}")).collect(),
        t: config.t,
        b: config.b,
    };
    ds.validate()?;
    Ok((ds, SynthTruth { objects: truth }))
}

/// Sidecar path convention: `<dataset stem>.truth.json`.
pub fn save_truth(truth: &SynthTruth, path: impl AsRef<Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(truth)?;
    std::fs::write(path.as_ref(), json)?;
    Ok(())
}

pub fn load_truth(path: impl AsRef<Path>) -> Result<SynthTruth> {
    let text = std::fs::read_to_string(path.as_ref())?;
    Ok(serde_json::from_str(&text)?)
}
