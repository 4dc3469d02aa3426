//! Partition each object's pixels into radiometric components.
//!
//! Pixels are flattened to `T*B`-dimensional vectors and clustered with
//! restarted k-means++ / Lloyd iterations under Euclidean distance. Cluster
//! centroids become the component signals fed to the encoder; the pixel ->
//! component assignment is kept so attention weights can be mapped back onto
//! pixels. Clustering is meant to run on normalized data so no band
//! dominates the distance.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ObjectSits};
use crate::error::{Error, Result};
use crate::rng::stream_for;

/// Number of k-means++ restarts; the lowest-inertia run wins.
pub const DEFAULT_RESTARTS: usize = 10;
pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

/// The components of one object: exactly `l` centroid time series (padded by
/// cyclic repetition when the object has fewer than `l` distinct pixels)
/// plus the pixel -> component assignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentSet {
    pub object_id: String,
    /// `l` centroids, each `T*B` values (time-major like pixel series).
    pub centroids: Vec<Vec<f32>>,
    /// For every pixel, the index of its component (always `< effective_k`).
    pub assignment: Vec<u32>,
    /// Number of genuine clusters; centroids at index `>= effective_k` are
    /// cyclic duplicates kept so every object exposes exactly `l` components.
    pub effective_k: usize,
    /// Within-cluster sum of squares of the final partition, computed in f64
    /// around exact cluster means.
    pub inertia: f64,
}

impl ComponentSet {
    pub fn l(&self) -> usize {
        self.centroids.len()
    }

    /// Maps a (possibly duplicate-padded) component index onto the genuine
    /// component it repeats.
    pub fn canonical_component(&self, index: usize) -> usize {
        index % self.effective_k
    }

    /// Pixel indices belonging to each genuine component.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.effective_k];
        for (pixel, &comp) in self.assignment.iter().enumerate() {
            groups[comp as usize].push(pixel);
        }
        groups
    }
}

/// Settings for component extraction.
#[derive(Clone, Copy, Debug)]
pub struct KmeansConfig {
    pub restarts: usize,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        KmeansConfig {
            restarts: DEFAULT_RESTARTS,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
        }
    }
}

/// Clusters one object's pixels into `l` components.
///
/// Runs `cfg.restarts` k-means++ seeded Lloyd iterations on a stream derived
/// from `(seed, object id)` and keeps the lowest-inertia result. When an
/// object has fewer than `l` distinct pixel vectors, each distinct vector
/// becomes its own component (`effective_k` = distinct count) and the
/// centroid list is padded cyclically up to `l`.
pub fn extract_components(
    obj: &ObjectSits,
    l: usize,
    seed: u64,
    cfg: &KmeansConfig,
) -> Result<ComponentSet> {
    if l < 1 {
        return Err(Error::Config("number of components must be >= 1".into()));
    }
    if obj.pixels.is_empty() {
        return Err(Error::Contract(format!("object {} has no pixels", obj.id)));
    }
    let points: Vec<Vec<f64>> = obj
        .pixels
        .iter()
        .map(|p| p.values.iter().map(|&v| f64::from(v)).collect())
        .collect();

    // Distinct vectors in first-occurrence order.
    let mut distinct: Vec<usize> = Vec::new();
    let mut membership: Vec<usize> = Vec::with_capacity(points.len());
    for p in &points {
        match distinct.iter().position(|&d| points[d] == *p) {
            Some(idx) => membership.push(idx),
            None => {
                distinct.push(membership.len());
                membership.push(distinct.len() - 1);
            }
        }
    }

    let (mut centroids, assignment, effective_k, inertia) = if distinct.len() <= l {
        // Each distinct vector is its own component; inertia is zero.
        let centroids: Vec<Vec<f64>> = distinct.iter().map(|&i| points[i].clone()).collect();
        let assignment: Vec<u32> = membership.iter().map(|&m| m as u32).collect();
        let k = distinct.len();
        (centroids, assignment, k, 0.0)
    } else if l == 1 {
        // Single component: the per-feature mean; restarts are pointless.
        let mean = mean_point(&points, &(0..points.len()).collect::<Vec<_>>());
        let assignment = vec![0u32; points.len()];
        let inertia = partition_inertia(&points, &assignment, 1);
        (vec![mean], assignment, 1, inertia)
    } else {
        let mut rng = stream_for(seed, "kmeans", &obj.id);
        let mut best: Option<(Vec<Vec<f64>>, Vec<u32>, f64)> = None;
        for _ in 0..cfg.restarts.max(1) {
            let (cents, assign) = lloyd(&points, l, cfg, &mut rng);
            let inertia = partition_inertia(&points, &assign, l);
            if best.as_ref().is_none_or(|(_, _, bi)| inertia < *bi) {
                best = Some((cents, assign, inertia));
            }
        }
        let (cents, assign, inertia) = best.unwrap();
        (cents, assign, l, inertia)
    };

    // Pad to exactly l centroids by cyclic repetition.
    let k = centroids.len();
    for i in k..l {
        let copy = centroids[i % k].clone();
        centroids.push(copy);
    }

    Ok(ComponentSet {
        object_id: obj.id.clone(),
        centroids: centroids
            .into_iter()
            .map(|c| c.into_iter().map(|v| v as f32).collect())
            .collect(),
        assignment,
        effective_k,
        inertia,
    })
}

/// Component extraction for every object of a dataset, in input order.
/// Per-object seeds derive from `(seed, object id)`, so the result is
/// identical whether objects are processed sequentially or in parallel.
pub fn extract_all(
    ds: &Dataset,
    l: usize,
    seed: u64,
    cfg: &KmeansConfig,
) -> Result<Vec<ComponentSet>> {
    ds.objects
        .par_iter()
        .map(|obj| {
            extract_components(obj, l, seed, cfg)
                .map_err(|e| Error::Internal(format!("object {}: {e}", obj.id)))
        })
        .collect()
}

/// k-means++ seeding followed by Lloyd iterations. Returns centroids and the
/// final assignment. Points must outnumber `k` distinct vectors (checked by
/// the caller).
fn lloyd(
    points: &[Vec<f64>],
    k: usize,
    cfg: &KmeansConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> (Vec<Vec<f64>>, Vec<u32>) {
    use rand::Rng;
    let n = points.len();

    // k-means++: first centroid uniform, the rest sampled proportionally to
    // the squared distance to the nearest chosen centroid.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..n)].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All mass on chosen points already; fall back to uniform.
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(dist2(p, centroids.last().unwrap()));
        }
    }

    let mut assignment = vec![0u32; n];
    let mut prev_inertia = f64::INFINITY;
    for _ in 0..cfg.max_iters {
        // Assignment step; ties go to the lowest centroid index.
        for (i, p) in points.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = dist2(p, &centroids[0]);
            for (j, c) in centroids.iter().enumerate().skip(1) {
                let d = dist2(p, c);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            assignment[i] = best as u32;
        }

        // Empty clusters steal the point farthest from its centroid.
        loop {
            let mut counts = vec![0usize; k];
            for &a in &assignment {
                counts[a as usize] += 1;
            }
            let Some(empty) = counts.iter().position(|&c| c == 0) else {
                break;
            };
            let farthest = (0..n)
                .filter(|&i| counts[assignment[i] as usize] > 1)
                .max_by(|&a, &b| {
                    let da = dist2(&points[a], &centroids[assignment[a] as usize]);
                    let db = dist2(&points[b], &centroids[assignment[b] as usize]);
                    da.partial_cmp(&db).unwrap().then(b.cmp(&a))
                })
                .expect("no point available to reseed an empty cluster");
            assignment[farthest] = empty as u32;
        }

        // Update step.
        let mut shift: f64 = 0.0;
        for j in 0..k {
            let members: Vec<usize> = (0..n).filter(|&i| assignment[i] == j as u32).collect();
            let new_c = mean_point(points, &members);
            shift = shift.max(dist2(&new_c, &centroids[j]).sqrt());
            centroids[j] = new_c;
        }

        let inertia = partition_inertia(points, &assignment, k);
        debug_assert!(
            inertia <= prev_inertia + 1e-9,
            "lloyd inertia increased: {prev_inertia} -> {inertia}"
        );
        prev_inertia = inertia;

        if shift < cfg.tol {
            break;
        }
    }
    (centroids, assignment)
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

fn mean_point(points: &[Vec<f64>], members: &[usize]) -> Vec<f64> {
    let dim = points[0].len();
    let mut m = vec![0.0; dim];
    for &i in members {
        for (acc, v) in m.iter_mut().zip(&points[i]) {
            *acc += v;
        }
    }
    let inv = 1.0 / members.len() as f64;
    for v in &mut m {
        *v *= inv;
    }
    m
}

/// Within-cluster sum of squares of a partition around exact (f64) cluster
/// means. This is the objective k-means minimizes, independent of how the
/// centroids were produced.
pub fn partition_inertia(points: &[Vec<f64>], assignment: &[u32], k: usize) -> f64 {
    let mut total = 0.0;
    for j in 0..k {
        let members: Vec<usize> = (0..points.len())
            .filter(|&i| assignment[i] == j as u32)
            .collect();
        if members.is_empty() {
            continue;
        }
        let mean = mean_point(points, &members);
        for &i in &members {
            total += dist2(&points[i], &mean);
        }
    }
    total
}

// ── component cache ─────────────────────────────────────────────────────

/// Conventional cache path: `<dataset>.components.L<k>.ndjson`.
pub fn cache_path(dataset_path: &Path, l: usize) -> PathBuf {
    let mut name = dataset_path.as_os_str().to_os_string();
    name.push(format!(".components.L{l}.ndjson"));
    PathBuf::from(name)
}

/// Writes one ComponentSet per line.
pub fn save_components(sets: &[ComponentSet], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    for set in sets {
        serde_json::to_writer(&mut w, set)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a component cache and checks it covers the dataset one-to-one, in
/// order.
pub fn load_components(path: impl AsRef<Path>, ds: &Dataset) -> Result<Vec<ComponentSet>> {
    let reader = BufReader::new(File::open(path.as_ref())?);
    let mut sets = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let set: ComponentSet = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        sets.push(set);
    }
    if sets.len() != ds.objects.len() {
        return Err(Error::Schema(format!(
            "component cache has {} entries for {} objects",
            sets.len(),
            ds.objects.len()
        )));
    }
    for (set, obj) in sets.iter().zip(&ds.objects) {
        if set.object_id != obj.id {
            return Err(Error::Schema(format!(
                "component cache order mismatch: {} vs {}",
                set.object_id, obj.id
            )));
        }
        if set.assignment.len() != obj.pixels.len() {
            return Err(Error::Schema(format!(
                "object {}: cache assigns {} pixels, object has {}",
                obj.id,
                set.assignment.len(),
                obj.pixels.len()
            )));
        }
    }
    Ok(sets)
}
