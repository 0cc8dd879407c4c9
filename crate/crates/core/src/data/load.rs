use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use super::{SlideDataset, SpotRecord, Stage, DEFAULT_PATCH};
use crate::error::{CoreError, Result};

const SPOTS_HEADER: [&str; 7] = [
    "slide_id",
    "patient_id",
    "spot_id",
    "grid_x",
    "grid_y",
    "pixel_x",
    "pixel_y",
];

/// One row of the spots table, before grid shifting.
#[derive(Clone, Debug, PartialEq)]
pub struct SpotRow {
    pub slide_id: String,
    pub patient_id: String,
    pub spot_id: String,
    pub grid_x: i64,
    pub grid_y: i64,
    pub pixel_x: i64,
    pub pixel_y: i64,
}

/// Genes in column order and one value row per spot id.
#[derive(Clone, Debug, PartialEq)]
pub struct CountsTable {
    pub gene_names: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
    Ok(csv::ReaderBuilder::new().flexible(true).from_reader(file))
}

fn parse_error(path: &Path, line: u64, reason: impl Into<String>) -> CoreError {
    CoreError::Parse {
        path: PathBuf::from(path),
        line,
        reason: reason.into(),
    }
}

fn csv_error(path: &Path, e: csv::Error) -> CoreError {
    let line = e.position().map_or(0, |p| p.line());
    parse_error(path, line, e.to_string())
}

pub fn read_spots_csv(path: &Path) -> Result<Vec<SpotRow>> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != SPOTS_HEADER {
        return Err(parse_error(
            path,
            1,
            format!("expected header {}", SPOTS_HEADER.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != SPOTS_HEADER.len() {
            return Err(parse_error(
                path,
                line,
                format!(
                    "expected {} fields, found {}",
                    SPOTS_HEADER.len(),
                    rec.len()
                ),
            ));
        }
        let int = |i: usize| -> Result<i64> {
            rec[i].trim().parse::<i64>().map_err(|_| {
                parse_error(
                    path,
                    line,
                    format!("{} is not an integer: {:?}", SPOTS_HEADER[i], &rec[i]),
                )
            })
        };
        rows.push(SpotRow {
            slide_id: rec[0].trim().to_string(),
            patient_id: rec[1].trim().to_string(),
            spot_id: rec[2].trim().to_string(),
            grid_x: int(3)?,
            grid_y: int(4)?,
            pixel_x: int(5)?,
            pixel_y: int(6)?,
        });
    }
    Ok(rows)
}

/// Reads a `spot_id,<gene>...` table. With `integers` set every value must
/// be a non-negative integer count; otherwise any finite number is accepted.
pub fn read_counts_csv(path: &Path, integers: bool) -> Result<CountsTable> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.is_empty() || header[0].trim() != "spot_id" {
        return Err(parse_error(path, 1, "first column must be spot_id"));
    }
    let gene_names: Vec<String> = header
        .iter()
        .skip(1)
        .map(|g| g.trim().to_string())
        .collect();
    if gene_names.is_empty() {
        return Err(parse_error(path, 1, "no gene columns"));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = gene_names.iter().find(|g| !seen.insert(g.as_str())) {
        return Err(parse_error(path, 1, format!("duplicate gene {dup}")));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != gene_names.len() + 1 {
            return Err(parse_error(
                path,
                line,
                format!(
                    "expected {} values, found {}",
                    gene_names.len(),
                    rec.len().saturating_sub(1)
                ),
            ));
        }
        let mut values = Vec::with_capacity(gene_names.len());
        for (j, field) in rec.iter().skip(1).enumerate() {
            let field = field.trim();
            let v = if integers {
                field.parse::<u64>().map(|c| c as f64).map_err(|_| {
                    parse_error(
                        path,
                        line,
                        format!(
                            "count for {} is not a non-negative integer: {field:?}",
                            gene_names[j]
                        ),
                    )
                })?
            } else {
                match field.parse::<f64>() {
                    Ok(v) if v.is_finite() => v,
                    _ => {
                        return Err(parse_error(
                            path,
                            line,
                            format!(
                                "value for {} is not a finite number: {field:?}",
                                gene_names[j]
                            ),
                        ))
                    }
                }
            };
            values.push(v);
        }
        rows.push((rec[0].trim().to_string(), values));
    }
    Ok(CountsTable { gene_names, rows })
}

/// Joins the spots table to the counts table and groups spots by slide, in
/// order of first appearance. Grid coordinates are shifted so each slide's
/// minimum is 0.
pub fn load_dataset(spots_csv: &Path, counts_csv: &Path) -> Result<Vec<SlideDataset>> {
    let spots = read_spots_csv(spots_csv)?;
    let counts = read_counts_csv(counts_csv, true)?;
    assemble(spots, counts, Stage::Raw)
}

/// Like [`load_dataset`] but for an already normalized label table: values
/// may be any finite number and the datasets start at the normalized stage.
pub fn load_processed_dataset(spots_csv: &Path, labels_csv: &Path) -> Result<Vec<SlideDataset>> {
    let spots = read_spots_csv(spots_csv)?;
    let labels = read_counts_csv(labels_csv, false)?;
    assemble(spots, labels, Stage::Normalized)
}

pub(crate) fn assemble(
    spots: Vec<SpotRow>,
    counts: CountsTable,
    stage: Stage,
) -> Result<Vec<SlideDataset>> {
    let mut by_id: HashMap<&str, &Vec<f64>> = HashMap::with_capacity(counts.rows.len());
    for (id, v) in &counts.rows {
        if by_id.insert(id.as_str(), v).is_some() {
            return Err(CoreError::invalid(format!(
                "spot {id} appears twice in the counts table"
            )));
        }
    }
    let spot_ids: HashSet<&str> = spots.iter().map(|s| s.spot_id.as_str()).collect();
    if spot_ids.len() != spots.len() {
        let mut seen = HashSet::new();
        let dup = spots
            .iter()
            .find(|s| !seen.insert(s.spot_id.as_str()))
            .expect("duplicate exists");
        return Err(CoreError::invalid(format!(
            "spot {} appears twice in the spots table",
            dup.spot_id
        )));
    }
    let mut missing_in_counts: Vec<String> = spots
        .iter()
        .filter(|s| !by_id.contains_key(s.spot_id.as_str()))
        .map(|s| s.spot_id.clone())
        .collect();
    let mut missing_in_spots: Vec<String> = counts
        .rows
        .iter()
        .filter(|(id, _)| !spot_ids.contains(id.as_str()))
        .map(|(id, _)| id.clone())
        .collect();
    if !missing_in_counts.is_empty() || !missing_in_spots.is_empty() {
        missing_in_counts.sort();
        missing_in_spots.sort();
        return Err(CoreError::MissingSpots {
            missing_in_counts,
            missing_in_spots,
        });
    }

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<&SpotRow>> = HashMap::new();
    for s in &spots {
        if !groups.contains_key(&s.slide_id) {
            order.push(s.slide_id.clone());
        }
        groups.entry(s.slide_id.clone()).or_default().push(s);
    }

    let mut out = Vec::with_capacity(order.len());
    for slide_id in order {
        let rows = &groups[&slide_id];
        let patient_id = rows[0].patient_id.clone();
        if let Some(other) = rows.iter().find(|r| r.patient_id != patient_id) {
            return Err(CoreError::invalid(format!(
                "slide {slide_id} is assigned to patients {patient_id} and {}",
                other.patient_id
            )));
        }
        let min_x = rows
            .iter()
            .map(|r| r.grid_x)
            .min()
            .expect("non-empty slide");
        let min_y = rows
            .iter()
            .map(|r| r.grid_y)
            .min()
            .expect("non-empty slide");
        let mut cells = HashSet::new();
        let mut records = Vec::with_capacity(rows.len());
        for r in rows {
            if !cells.insert((r.grid_x, r.grid_y)) {
                return Err(CoreError::DuplicateGridCell {
                    slide_id: slide_id.clone(),
                    grid_x: r.grid_x,
                    grid_y: r.grid_y,
                });
            }
            records.push(SpotRecord {
                spot_id: r.spot_id.clone(),
                grid_x: (r.grid_x - min_x) as usize,
                grid_y: (r.grid_y - min_y) as usize,
                pixel_x: r.pixel_x,
                pixel_y: r.pixel_y,
                expression: by_id[r.spot_id.as_str()].clone(),
            });
        }
        out.push(SlideDataset {
            slide_id,
            patient_id,
            spots: records,
            gene_names: counts.gene_names.clone(),
            patch_h: DEFAULT_PATCH,
            patch_w: DEFAULT_PATCH,
            stage,
        });
    }
    Ok(out)
}
