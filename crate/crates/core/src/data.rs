//! Object-based SITS dataset model, NDJSON on-disk format, per-band
//! normalization, and stratified train/validation/test splitting.
//!
//! On disk a dataset is newline-delimited JSON (UTF-8, LF). The first line is
//! a header record:
//!
//! ```text
//! {"type":"header","T":24,"B":4,"class_names":["a","b"]}
//! ```
//!
//! followed by one object per line:
//!
//! ```text
//! {"type":"object","id":"o1","label":0,"pixels":[[[..B vals..] x T] x P],"coords":[[row,col] x P]}
//! ```
//!
//! `label` and `coords` may be null. Files ending in `.gz` are
//! gzip-compressed with the same content.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;

/// One pixel's multivariate time series: `T x B` values stored row-major
/// (time-major), plus an optional grid position inside the object.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelTs {
    pub values: Vec<f32>,
    pub coord: Option<(u32, u32)>,
}

impl PixelTs {
    pub fn value(&self, t: usize, b: usize, n_bands: usize) -> f32 {
        self.values[t * n_bands + b]
    }
}

/// One analysis unit: a bag of pixel time series sharing a single coarse
/// label.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSits {
    pub id: String,
    pub label: Option<usize>,
    pub pixels: Vec<PixelTs>,
}

/// A homogeneous collection of objects: every pixel series has the same
/// number of timestamps `t` and bands `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub objects: Vec<ObjectSits>,
    pub class_names: Vec<String>,
    pub t: usize,
    pub b: usize,
}

/// Per-band minima and maxima over all training pixels and timestamps;
/// defines the affine map onto `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: Vec<f32>,
    pub max: Vec<f32>,
}

// ── wire format ─────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Record {
    Header {
        #[serde(rename = "T")]
        t: usize,
        #[serde(rename = "B")]
        b: usize,
        class_names: Vec<String>,
    },
    Object {
        id: String,
        label: Option<usize>,
        pixels: Vec<Vec<Vec<f32>>>,
        coords: Option<Vec<[u32; 2]>>,
    },
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Structural validation: homogeneous T/B, labels in range, coords
    /// all-or-none and unique per object.
    pub fn validate(&self) -> Result<()> {
        for obj in &self.objects {
            if obj.pixels.is_empty() {
                return Err(Error::Schema(format!("object {} has no pixels", obj.id)));
            }
            if let Some(y) = obj.label {
                if y >= self.class_names.len() {
                    return Err(Error::Schema(format!(
                        "object {}: label {y} out of range for {} classes",
                        obj.id,
                        self.class_names.len()
                    )));
                }
            }
            let with_coords = obj.pixels.iter().filter(|p| p.coord.is_some()).count();
            if with_coords != 0 && with_coords != obj.pixels.len() {
                return Err(Error::Schema(format!(
                    "object {}: coords present for {with_coords} of {} pixels",
                    obj.id,
                    obj.pixels.len()
                )));
            }
            if with_coords > 0 {
                let mut seen: Vec<(u32, u32)> =
                    obj.pixels.iter().map(|p| p.coord.unwrap()).collect();
                seen.sort_unstable();
                if seen.windows(2).any(|w| w[0] == w[1]) {
                    return Err(Error::Schema(format!(
                        "object {}: duplicate pixel coordinates",
                        obj.id
                    )));
                }
            }
            for p in &obj.pixels {
                if p.values.len() != self.t * self.b {
                    return Err(Error::Schema(format!(
                        "object {}: pixel has {} values, dataset wants T={} B={}",
                        obj.id,
                        p.values.len(),
                        self.t,
                        self.b
                    )));
                }
                if p.values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Schema(format!(
                        "object {}: non-finite pixel value",
                        obj.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Objects that carry a label, as `(object index, label)`.
    pub fn labeled(&self) -> Vec<(usize, usize)> {
        self.objects
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.label.map(|y| (i, y)))
            .collect()
    }
}

fn open_reader(path: &Path) -> Result<Box<dyn BufRead>> {
    let file = File::open(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(BufReader::new(flate2::read::GzDecoder::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

fn open_writer(path: &Path) -> Result<Box<dyn Write>> {
    let file = File::create(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(BufWriter::new(flate2::write::GzEncoder::new(
            file,
            flate2::Compression::default(),
        ))))
    } else {
        Ok(Box::new(BufWriter::new(file)))
    }
}

/// Loads a dataset from an NDJSON (optionally gzipped) file.
pub fn load_ndjson(path: impl AsRef<Path>) -> Result<Dataset> {
    let reader = open_reader(path.as_ref())?;
    load_ndjson_reader(reader)
}

fn load_ndjson_reader(reader: impl BufRead) -> Result<Dataset> {
    let mut ds: Option<Dataset> = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        match record {
            Record::Header { t, b, class_names } => {
                if ds.is_some() {
                    return Err(Error::Schema(format!(
                        "duplicate header record at line {}",
                        lineno + 1
                    )));
                }
                if t == 0 || b == 0 {
                    return Err(Error::Schema("header must declare T >= 1 and B >= 1".into()));
                }
                ds = Some(Dataset {
                    objects: Vec::new(),
                    class_names,
                    t,
                    b,
                });
            }
            Record::Object {
                id,
                label,
                pixels,
                coords,
            } => {
                let ds = ds
                    .as_mut()
                    .ok_or_else(|| Error::Schema("object record before header record".into()))?;
                if pixels.is_empty() {
                    return Err(Error::Schema(format!("object {id} has no pixels")));
                }
                if let Some(ref cs) = coords {
                    if cs.len() != pixels.len() {
                        return Err(Error::Schema(format!(
                            "object {id}: {} coords for {} pixels",
                            cs.len(),
                            pixels.len()
                        )));
                    }
                }
                let mut parsed = Vec::with_capacity(pixels.len());
                for (pi, steps) in pixels.into_iter().enumerate() {
                    if steps.len() != ds.t {
                        return Err(Error::Schema(format!(
                            "object {id}: pixel {pi} has {} timestamps, header says {}",
                            steps.len(),
                            ds.t
                        )));
                    }
                    let mut values = Vec::with_capacity(ds.t * ds.b);
                    for bands in &steps {
                        if bands.len() != ds.b {
                            return Err(Error::Schema(format!(
                                "object {id}: pixel {pi} has {} bands, header says {}",
                                bands.len(),
                                ds.b
                            )));
                        }
                        values.extend_from_slice(bands);
                    }
                    let coord = coords.as_ref().map(|cs| (cs[pi][0], cs[pi][1]));
                    parsed.push(PixelTs { values, coord });
                }
                ds.objects.push(ObjectSits {
                    id,
                    label,
                    pixels: parsed,
                });
            }
        }
    }
    let ds = ds.ok_or_else(|| Error::Schema("missing header record".into()))?;
    ds.validate()?;
    Ok(ds)
}

/// Writes a dataset in the NDJSON format (gzipped when the filename ends in
/// `.gz`). Output is byte-deterministic for a given dataset.
pub fn save_ndjson(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = open_writer(path.as_ref())?;
    write_ndjson(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

fn write_ndjson(ds: &Dataset, w: &mut impl Write) -> Result<()> {
    let header = Record::Header {
        t: ds.t,
        b: ds.b,
        class_names: ds.class_names.clone(),
    };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    for obj in &ds.objects {
        let pixels = obj
            .pixels
            .iter()
            .map(|p| {
                (0..ds.t)
                    .map(|t| p.values[t * ds.b..(t + 1) * ds.b].to_vec())
                    .collect()
            })
            .collect();
        let coords = obj.pixels.first().and_then(|p| p.coord).map(|_| {
            obj.pixels
                .iter()
                .map(|p| {
                    let (r, c) = p.coord.unwrap();
                    [r, c]
                })
                .collect()
        });
        let record = Record::Object {
            id: obj.id.clone(),
            label: obj.label,
            pixels,
            coords,
        };
        serde_json::to_writer(&mut *w, &record)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

// ── normalization ───────────────────────────────────────────────────────

/// Computes per-band min/max over all pixels and timestamps of the training
/// split.
pub fn fit_normalizer(train: &Dataset) -> Result<NormStats> {
    if train.objects.is_empty() {
        return Err(Error::Contract("fit_normalizer on an empty dataset".into()));
    }
    let b = train.b;
    let mut min = vec![f32::INFINITY; b];
    let mut max = vec![f32::NEG_INFINITY; b];
    for obj in &train.objects {
        for p in &obj.pixels {
            for (i, &v) in p.values.iter().enumerate() {
                let band = i % b;
                min[band] = min[band].min(v);
                max[band] = max[band].max(v);
            }
        }
    }
    for band in 0..b {
        if min[band] == max[band] {
            log::warn!(
                "band {band} is constant ({}); it will normalize to 0 everywhere",
                min[band]
            );
        }
    }
    Ok(NormStats { min, max })
}

/// Maps each band affinely so the training min goes to 0 and the training
/// max to 1, clamping to `[0, 1]` (validation/test values outside the
/// training range saturate). Degenerate bands (min == max) map to 0.
pub fn apply_normalizer(ds: &Dataset, stats: &NormStats) -> Result<Dataset> {
    if stats.min.len() != ds.b || stats.max.len() != ds.b {
        return Err(Error::Contract(format!(
            "normalizer has {} bands, dataset has {}",
            stats.min.len(),
            ds.b
        )));
    }
    let mut out = ds.clone();
    for obj in &mut out.objects {
        for p in &mut obj.pixels {
            for (i, v) in p.values.iter_mut().enumerate() {
                let band = i % ds.b;
                let range = stats.max[band] - stats.min[band];
                *v = if range == 0.0 {
                    0.0
                } else {
                    ((*v - stats.min[band]) / range).clamp(0.0, 1.0)
                };
            }
        }
    }
    Ok(out)
}

// ── splitting ───────────────────────────────────────────────────────────

/// Stratified object-level split into (train, validation, test).
///
/// Within each class the objects are shuffled with a stream derived from
/// `seed` and apportioned by the largest-remainder rule, so counts match the
/// fractions to within one object per class per split. Classes with fewer
/// than 3 objects go entirely to train (with a warning), as do unlabeled
/// objects.
pub fn split(
    ds: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (ft, fv, fe) = fractions;
    if ft < 0.0 || fv < 0.0 || fe < 0.0 || (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be non-negative and sum to 1, got {fractions:?}"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_names.len()];
    for (i, obj) in ds.objects.iter().enumerate() {
        if let Some(y) = obj.label {
            by_class[y].push(i);
        }
    }

    let mut assignment = vec![0usize; ds.objects.len()]; // 0 train, 1 val, 2 test
    for (class, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 3 {
            log::warn!(
                "class {class} has only {} objects; all of them go to the training split",
                members.len()
            );
            continue; // already assigned to train
        }
        let mut order = members.clone();
        let mut rng = stream(seed, "split", class as u64);
        shuffle(&mut order, &mut rng);
        let counts = largest_remainder(order.len(), &[ft, fv, fe]);
        let mut cursor = 0;
        for (slot, &count) in counts.iter().enumerate() {
            for &obj in &order[cursor..cursor + count] {
                assignment[obj] = slot;
            }
            cursor += count;
        }
    }

    let mut parts: Vec<Dataset> = (0..3)
        .map(|_| Dataset {
            objects: Vec::new(),
            class_names: ds.class_names.clone(),
            t: ds.t,
            b: ds.b,
        })
        .collect();
    for (i, obj) in ds.objects.iter().enumerate() {
        parts[assignment[i]].objects.push(obj.clone());
    }
    let test = parts.pop().unwrap();
    let val = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    Ok((train, val, test))
}

/// Fisher-Yates driven by a seeded stream.
pub(crate) fn shuffle<T>(items: &mut [T], rng: &mut rand_chacha::ChaCha8Rng) {
    use rand::Rng;
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Apportions `n` into integer counts summing to `n`, assigning remainders
/// to the largest fractional parts (ties favor earlier slots).
fn largest_remainder(n: usize, fractions: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in 0..(n - assigned) {
        counts[order[i % fractions.len()]] += 1;
    }
    counts
}
