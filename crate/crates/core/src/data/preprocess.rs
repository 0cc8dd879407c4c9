use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{SlideDataset, Stage};
use crate::error::{CoreError, Result};

/// Grid cells counted as adjacent when smoothing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Neighborhood {
    /// Edge-sharing cells only.
    #[serde(rename = "4")]
    Four,
    /// Edge- and corner-sharing cells.
    #[default]
    #[serde(rename = "8")]
    Eight,
}

impl Neighborhood {
    fn offsets(self) -> &'static [(i64, i64)] {
        match self {
            Self::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Self::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

fn expect_stage(ds: &SlideDataset, want: Stage, step: &'static str) -> Result<()> {
    if ds.stage != want {
        return Err(CoreError::Stage {
            stage: step,
            current: ds.stage.name(),
        });
    }
    Ok(())
}

/// Indices of the `m_keep` genes with the highest mean `ln(1 + count)` over
/// every spot of every dataset, best first; ties go to the lexically
/// smaller gene name.
pub fn select_genes(datasets: &[SlideDataset], m_keep: usize) -> Result<Vec<usize>> {
    let first = datasets
        .first()
        .ok_or_else(|| CoreError::invalid("select_genes needs at least one dataset"))?;
    let names = &first.gene_names;
    if let Some(d) = datasets.iter().find(|d| &d.gene_names != names) {
        return Err(CoreError::invalid(format!(
            "slide {} has a different gene list",
            d.slide_id
        )));
    }
    for d in datasets {
        expect_stage(d, Stage::Raw, "gene selection")?;
    }
    if m_keep == 0 || m_keep > names.len() {
        return Err(CoreError::Config(format!(
            "m_keep={m_keep} must lie in 1..={}",
            names.len()
        )));
    }
    let m = names.len();
    let mut sums = vec![0.0f64; m];
    let mut count = 0usize;
    for d in datasets {
        for s in &d.spots {
            for (acc, &c) in sums.iter_mut().zip(&s.expression) {
                *acc += c.ln_1p();
            }
            count += 1;
        }
    }
    let means: Vec<f64> = sums.iter().map(|s| s / count.max(1) as f64).collect();
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| {
        means[b]
            .total_cmp(&means[a])
            .then_with(|| names[a].cmp(&names[b]))
    });
    idx.truncate(m_keep);
    Ok(idx)
}

/// Keeps only the genes in `index`, in that order.
pub fn apply_gene_selection(ds: &SlideDataset, index: &[usize]) -> Result<SlideDataset> {
    expect_stage(ds, Stage::Raw, "gene selection")?;
    if let Some(&bad) = index.iter().find(|&&i| i >= ds.m()) {
        return Err(CoreError::invalid(format!("gene index {bad} out of range")));
    }
    let mut out = ds.clone();
    out.gene_names = index.iter().map(|&i| ds.gene_names[i].clone()).collect();
    for s in &mut out.spots {
        s.expression = index.iter().map(|&i| s.expression[i]).collect();
    }
    Ok(out)
}

/// `y = ln(1 + c / T)` with `T` the spot's total count. Spots with `T = 0`
/// carry no signal and are dropped; their ids are returned.
pub fn normalize_expression(ds: &SlideDataset) -> Result<(SlideDataset, Vec<String>)> {
    expect_stage(ds, Stage::Raw, "normalization")?;
    let mut out = ds.clone();
    let mut dropped = Vec::new();
    out.spots.retain_mut(|s| {
        let total: f64 = s.expression.iter().sum();
        if total <= 0.0 {
            dropped.push(s.spot_id.clone());
            return false;
        }
        for v in &mut s.expression {
            *v = (*v / total).ln_1p();
        }
        true
    });
    if !dropped.is_empty() {
        log::warn!(
            "slide {}: dropped {} spot(s) with zero total count: {}",
            ds.slide_id,
            dropped.len(),
            dropped.join(", ")
        );
    }
    if out.spots.is_empty() {
        return Err(CoreError::invalid(format!(
            "slide {} has no spot with a non-zero count",
            ds.slide_id
        )));
    }
    out.stage = Stage::Normalized;
    Ok((out, dropped))
}

/// Replaces each spot's values with the mean over itself and its occupied
/// grid neighbours.
pub fn smooth_expression(ds: &SlideDataset, neighborhood: Neighborhood) -> Result<SlideDataset> {
    expect_stage(ds, Stage::Normalized, "smoothing")?;
    let cell: HashMap<(i64, i64), usize> = ds
        .spots
        .iter()
        .enumerate()
        .map(|(i, s)| ((s.grid_x as i64, s.grid_y as i64), i))
        .collect();
    let mut out = ds.clone();
    for (i, s) in ds.spots.iter().enumerate() {
        let (x, y) = (s.grid_x as i64, s.grid_y as i64);
        let mut acc = s.expression.clone();
        let mut k = 1usize;
        for (dx, dy) in neighborhood.offsets() {
            if let Some(&j) = cell.get(&(x + dx, y + dy)) {
                for (a, v) in acc.iter_mut().zip(&ds.spots[j].expression) {
                    *a += v;
                }
                k += 1;
            }
        }
        for a in &mut acc {
            *a /= k as f64;
        }
        out.spots[i].expression = acc;
    }
    out.stage = Stage::Smoothed;
    Ok(out)
}
