//! Slide datasets: CSV ingestion, preprocessing, patch geometry and
//! feature extraction.

mod features;
mod load;
mod patches;
mod preprocess;

pub use features::{
    extract_features, read_feature_file, write_feature_file, ExtractorOutput, FeatureExtractor,
    FeatureSet, ToyExtractor,
};
pub use load::{
    load_dataset, load_processed_dataset, read_counts_csv, read_spots_csv, CountsTable, SpotRow,
};
pub use patches::{extract_neighbor_view, extract_target_patch, image_to_tensor, NEIGHBOR_VIEW};
pub use preprocess::{
    apply_gene_selection, normalize_expression, select_genes, smooth_expression, Neighborhood,
};

use crate::encoders::GridCoordinates;
use crate::error::Result;

/// Default patch side length in pixels.
pub const DEFAULT_PATCH: usize = 224;

/// How far a dataset has been through preprocessing. Each step runs once.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Raw,
    Normalized,
    Smoothed,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Self::Raw => "raw",
            Self::Normalized => "normalized",
            Self::Smoothed => "smoothed",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpotRecord {
    pub spot_id: String,
    pub grid_x: usize,
    pub grid_y: usize,
    pub pixel_x: i64,
    pub pixel_y: i64,
    /// Raw counts, or processed values once the stage has advanced.
    pub expression: Vec<f64>,
}

/// All spots of one slide.
#[derive(Clone, Debug, PartialEq)]
pub struct SlideDataset {
    pub slide_id: String,
    pub patient_id: String,
    pub spots: Vec<SpotRecord>,
    pub gene_names: Vec<String>,
    /// Patch height and width in pixels.
    pub patch_h: usize,
    pub patch_w: usize,
    pub stage: Stage,
}

impl SlideDataset {
    pub fn n(&self) -> usize {
        self.spots.len()
    }

    pub fn m(&self) -> usize {
        self.gene_names.len()
    }

    pub fn coordinates(&self) -> Result<GridCoordinates> {
        GridCoordinates::new(self.spots.iter().map(|s| (s.grid_x, s.grid_y)).collect())
    }

    /// Expression as a row-major `n x m` matrix.
    pub fn expression_matrix(&self) -> ndarray::Array2<f64> {
        let (n, m) = (self.n(), self.m());
        ndarray::Array2::from_shape_fn((n, m), |(i, j)| self.spots[i].expression[j])
    }

    pub fn spot_index(&self, spot_id: &str) -> Option<usize> {
        self.spots.iter().position(|s| s.spot_id == spot_id)
    }
}
