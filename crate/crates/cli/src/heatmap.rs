//! Spatial heatmaps of one gene as a CSV grid and an 8-bit graymap.

use std::fmt::Write as _;

use image::{GrayImage, Luma};

use crate::error::InputError;

/// Marks grid cells without a spot in the CSV output.
pub const VOID: &str = "NA";

/// A `height x width` grid indexed by `(grid_y, grid_x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    /// Row-major cells; `None` where no spot sits.
    pub cells: Vec<Option<f64>>,
}

impl Heatmap {
    /// Places `values[i]` at the cell of `coords[i] = (grid_x, grid_y)`.
    pub fn from_spots(coords: &[(usize, usize)], values: &[f64]) -> Self {
        assert_eq!(coords.len(), values.len(), "one value per spot");
        let width = coords.iter().map(|c| c.0 + 1).max().unwrap_or(0);
        let height = coords.iter().map(|c| c.1 + 1).max().unwrap_or(0);
        let mut cells = vec![None; width * height];
        for (&(x, y), &v) in coords.iter().zip(values) {
            cells[y * width + x] = Some(v);
        }
        Self {
            width,
            height,
            cells,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        self.cells[y * self.width + x]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.cells.chunks(self.width.max(1)) {
            let line: Vec<String> = row
                .iter()
                .map(|c| c.map_or_else(|| VOID.to_string(), |v| v.to_string()))
                .collect();
            let _ = writeln!(s, "{}", line.join(","));
        }
        s
    }

    /// Min-max scaled gray levels: voids are 0 and occupied cells span
    /// 1..=255. A constant image is uniform mid-gray (128).
    pub fn to_gray(&self) -> GrayImage {
        let occupied = self.cells.iter().flatten();
        let lo = occupied.clone().copied().fold(f64::INFINITY, f64::min);
        let hi = occupied.copied().fold(f64::NEG_INFINITY, f64::max);
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let level = match self.get(x as usize, y as usize) {
                None => 0,
                Some(_) if hi <= lo => 128,
                Some(v) => 1 + (254.0 * (v - lo) / (hi - lo)).round() as u8,
            };
            Luma([level])
        })
    }

    /// The graymap as binary PGM bytes.
    pub fn to_pgm(&self) -> Vec<u8> {
        use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
        let mut bytes = Vec::new();
        let img = self.to_gray();
        PnmEncoder::new(&mut bytes)
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .encode(
                img.as_raw().as_slice(),
                img.width(),
                img.height(),
                image::ExtendedColorType::L8,
            )
            .expect("encoding to memory cannot fail");
        bytes
    }
}

/// Column of `gene` in `names`, or an error listing the closest names.
pub fn gene_index(names: &[String], gene: &str) -> Result<usize, InputError> {
    if let Some(j) = names.iter().position(|g| g == gene) {
        return Ok(j);
    }
    let mut scored: Vec<(usize, &String)> = names
        .iter()
        .map(|g| (strsim::levenshtein(gene, g), g))
        .collect();
    scored.sort();
    let near: Vec<&str> = scored.iter().take(5).map(|(_, g)| g.as_str()).collect();
    Err(InputError(format!(
        "unknown gene {gene:?}; nearest names: {}",
        near.join(", ")
    )))
}

/// Prediction and truth heatmaps of `gene`. `pred` and `truth` are
/// `n x m` row-major matrices over the spots at `coords`.
pub fn export_heatmap(
    pred: &[Vec<f64>],
    truth: &[Vec<f64>],
    gene_names: &[String],
    gene: &str,
    coords: &[(usize, usize)],
) -> Result<(Heatmap, Heatmap), InputError> {
    let j = gene_index(gene_names, gene)?;
    if pred.len() != coords.len() || truth.len() != coords.len() {
        return Err(InputError(format!(
            "{} predictions and {} truth rows for {} spots",
            pred.len(),
            truth.len(),
            coords.len()
        )));
    }
    let column = |rows: &[Vec<f64>]| -> Vec<f64> { rows.iter().map(|r| r[j]).collect() };
    Ok((
        Heatmap::from_spots(coords, &column(pred)),
        Heatmap::from_spots(coords, &column(truth)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn constant_gene_is_uniform_gray() {
        let coords = [(0, 0), (1, 0), (0, 1), (1, 1)];
        let h = Heatmap::from_spots(&coords, &[3.0; 4]);
        assert!(h.to_gray().pixels().all(|p| p.0[0] == 128));
    }

    #[test]
    fn single_spot_gives_a_one_by_one_grid() {
        let h = Heatmap::from_spots(&[(0, 0)], &[0.25]);
        assert_eq!((h.width, h.height), (1, 1));
        assert_eq!(h.to_csv(), "0.25\n");
    }

    #[test]
    fn voids_are_black_and_extremes_span_the_range() {
        let h = Heatmap::from_spots(&[(0, 0), (2, 1)], &[-1.0, 3.0]);
        let img = h.to_gray();
        assert_eq!(img.get_pixel(0, 0).0[0], 1);
        assert_eq!(img.get_pixel(2, 1).0[0], 255);
        assert_eq!(img.get_pixel(1, 0).0[0], 0);
        assert_eq!(h.to_csv(), "-1,NA,NA\nNA,NA,3\n");
        let pgm = h.to_pgm();
        assert!(pgm.starts_with(b"P5"));
    }

    #[test]
    fn unknown_gene_lists_near_names() {
        let err = gene_index(&names(&["GNAS", "ERBB2", "ACTB"]), "GNAZ").unwrap_err();
        assert!(err.0.contains("GNAS"), "{err}");
    }
}
