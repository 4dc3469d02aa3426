//! Spatial attention maps from the alpha side-information.
//!
//! Every pixel inherits the (duplicate-merged) attention weight of its
//! component, giving a per-pixel saliency value. For display the values are
//! discretized into quantile bins of the object's own alpha distribution and
//! rendered as an ASCII portable graymap; a CSV export carries the exact
//! values.

use serde::{Deserialize, Serialize};

use crate::components::ComponentSet;
use crate::data::ObjectSits;
use crate::error::{Error, Result};
use crate::model::PredictionRecord;

/// Per-pixel attention for one object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub object_id: String,
    /// One alpha per pixel; pixels of the same component share a value, so
    /// there are at most `effective_k` distinct values.
    pub pixel_alpha: Vec<f32>,
    /// Grid positions when the source object carries coordinates.
    pub coords: Option<Vec<(u32, u32)>>,
}

/// Assigns each pixel the merged alpha of its component.
pub fn build_map(
    pred: &PredictionRecord,
    comps: &ComponentSet,
    obj: &ObjectSits,
) -> Result<AttentionMap> {
    if pred.object_id != comps.object_id || obj.id != comps.object_id {
        return Err(Error::Contract(format!(
            "mismatched object ids: prediction {}, components {}, object {}",
            pred.object_id, comps.object_id, obj.id
        )));
    }
    if pred.alpha.len() != comps.effective_k {
        return Err(Error::Contract(format!(
            "object {}: prediction carries {} merged weights, components have effective_k {}",
            pred.object_id,
            pred.alpha.len(),
            comps.effective_k
        )));
    }
    if comps.assignment.len() != obj.pixels.len() {
        return Err(Error::Contract(format!(
            "object {}: {} assignments for {} pixels",
            obj.id,
            comps.assignment.len(),
            obj.pixels.len()
        )));
    }
    let pixel_alpha = comps
        .assignment
        .iter()
        .map(|&comp| pred.alpha[comps.canonical_component(comp as usize)])
        .collect();
    let coords = obj
        .pixels
        .first()
        .and_then(|p| p.coord)
        .map(|_| obj.pixels.iter().map(|p| p.coord.unwrap()).collect());
    Ok(AttentionMap {
        object_id: obj.id.clone(),
        pixel_alpha,
        coords,
    })
}

/// Quantile bin of each value among its peers: `ceil(cdf * bins) - 1` with
/// `cdf` the fraction of values `<=` the value. Integer arithmetic only, so
/// the discretization is bit-exact; ties at a bin edge resolve to the lower
/// bin, and a constant map lands entirely in the top bin.
pub fn quantile_bins(values: &[f32], bins: usize) -> Vec<usize> {
    let n = values.len();
    values
        .iter()
        .map(|&v| {
            let le = values.iter().filter(|&&w| w <= v).count();
            (le * bins).div_ceil(n) - 1
        })
        .collect()
}

/// Sidecar metadata describing one rendered graymap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderInfo {
    pub object_id: String,
    pub bins: usize,
    pub maxval: usize,
    /// Gray level written to raster cells not covered by the object
    /// (aliases the top bin; the CSV carries the exact per-pixel values).
    pub outside_value: usize,
    pub width: u32,
    pub height: u32,
    pub row_origin: u32,
    pub col_origin: u32,
}

/// Renders the map as an ASCII portable graymap (P2) with `maxval =
/// bins - 1`, pixel gray level = quantile bin of its alpha. Pure function of
/// (alphas, coords, bins): identical inputs give identical bytes.
pub fn render_pgm(map: &AttentionMap, bins: usize) -> Result<(String, RenderInfo)> {
    if bins < 2 {
        return Err(Error::Config("rendering needs at least 2 bins".into()));
    }
    let Some(coords) = &map.coords else {
        return Err(Error::Contract(format!(
            "object {} has no pixel coordinates; export the CSV instead",
            map.object_id
        )));
    };
    let row_origin = coords.iter().map(|c| c.0).min().unwrap();
    let col_origin = coords.iter().map(|c| c.1).min().unwrap();
    let height = coords.iter().map(|c| c.0).max().unwrap() - row_origin + 1;
    let width = coords.iter().map(|c| c.1).max().unwrap() - col_origin + 1;

    let levels = quantile_bins(&map.pixel_alpha, bins);
    let outside = bins - 1;
    let mut grid = vec![outside; (width * height) as usize];
    for (pixel, &(r, c)) in coords.iter().enumerate() {
        let idx = ((r - row_origin) * width + (c - col_origin)) as usize;
        grid[idx] = levels[pixel];
    }

    let mut pgm = format!("P2\n{width} {height}\n{}\n", bins - 1);
    for r in 0..height {
        let row: Vec<String> = (0..width)
            .map(|c| grid[(r * width + c) as usize].to_string())
            .collect();
        pgm.push_str(&row.join(" "));
        pgm.push('\n');
    }
    Ok((
        pgm,
        RenderInfo {
            object_id: map.object_id.clone(),
            bins,
            maxval: bins - 1,
            outside_value: outside,
            width,
            height,
            row_origin,
            col_origin,
        },
    ))
}

pub const CSV_HEADER: &str = "object_id,pixel_index,row,col,alpha,bin";

/// Exact per-pixel export, one row per pixel in pixel-index order. Rows and
/// columns are blank when the object has no coordinates.
pub fn export_csv(map: &AttentionMap, bins: usize) -> String {
    let levels = quantile_bins(&map.pixel_alpha, bins);
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (pixel, &alpha) in map.pixel_alpha.iter().enumerate() {
        let (row, col) = match &map.coords {
            Some(cs) => (cs[pixel].0.to_string(), cs[pixel].1.to_string()),
            None => (String::new(), String::new()),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            map.object_id, pixel, row, col, alpha, levels[pixel]
        ));
    }
    out
}
