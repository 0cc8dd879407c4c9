//! Synthetic slides whose expression is a fixed linear map of each spot's
//! pooled feature plus Gaussian noise. The map is shared by all patients,
//! so a model trained on some patients can predict the others.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use triplex_tensor::{Real, Tensor};

use crate::data::{FeatureSet, SlideDataset, SpotRecord, Stage, DEFAULT_PATCH};
use crate::encoders::{NEIGHBOR_GRID, NEIGHBOR_TOKENS, TARGET_TOKENS};
use crate::error::{CoreError, Result};
use crate::io::atomic_write;
use crate::model::SlideInputs;
use crate::train::TrainSet;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub patients: usize,
    pub slides_per_patient: usize,
    /// Spots lie on a full `grid x grid` lattice.
    pub grid: usize,
    pub genes: usize,
    pub feature_dim: usize,
    /// Features lie in a random subspace of this dimension, as extracted
    /// histology features are strongly low-rank.
    pub latent_dim: usize,
    /// Latent vectors are box sums of white noise over a `(2r + 1)^2`
    /// window of grid cells, making neighbouring spots alike.
    pub smoothing_radius: usize,
    /// Standard deviation of the label noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            patients: 4,
            slides_per_patient: 2,
            grid: 8,
            genes: 16,
            feature_dim: 512,
            latent_dim: 8,
            smoothing_radius: 3,
            noise: 0.05,
            seed: 2021,
        }
    }
}

/// One synthetic slide: labels are stored as already-normalized expression.
#[derive(Clone, Debug)]
pub struct SynthSlide {
    pub dataset: SlideDataset,
    pub features: FeatureSet,
}

/// Spacing of spot centres in pixels; neighbouring spots' patches tile.
pub const SPOT_PITCH: i64 = DEFAULT_PATCH as i64;

/// Builds the slides. Each spot's pooled feature is `f = U z`, where `z`
/// is a unit-variance spatially smoothed Gaussian field of size
/// `latent_dim` and `U` a fixed random map giving every coordinate of `f`
/// unit variance;
/// its 49 target tokens scatter around `f` with zero mean offset, its 25
/// neighbor tokens are the pooled features of the spots under each tile
/// (zero off the grid), and its expression is `A f + noise` with `A` drawn
/// once with entries of variance `1 / feature_dim`.
pub fn planted_linear(cfg: &SynthConfig) -> Result<Vec<SynthSlide>> {
    if cfg.patients == 0
        || cfg.slides_per_patient == 0
        || cfg.grid == 0
        || cfg.genes == 0
        || cfg.feature_dim == 0
        || cfg.latent_dim == 0
    {
        return Err(CoreError::Config(
            "synthetic dataset dimensions must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let f = cfg.feature_dim;
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let map_scale = 1.0 / (f as f64).sqrt();
    let map: Vec<f64> = (0..cfg.genes * f)
        .map(|_| std_normal.sample(&mut rng) * map_scale)
        .collect();
    let k = cfg.latent_dim;
    let basis_scale = 1.0 / (k as f64).sqrt();
    let basis: Vec<f64> = (0..f * k)
        .map(|_| std_normal.sample(&mut rng) * basis_scale)
        .collect();
    let gene_names: Vec<String> = (0..cfg.genes).map(|j| format!("gene{j:03}")).collect();

    let n = cfg.grid * cfg.grid;
    let mut slides = Vec::with_capacity(cfg.patients * cfg.slides_per_patient);
    for p in 0..cfg.patients {
        for s in 0..cfg.slides_per_patient {
            let slide_id = format!("P{p}S{s}");
            let latent = smooth_field(cfg.grid, k, cfg.smoothing_radius, &std_normal, &mut rng);
            let mut pooled = Vec::with_capacity(n * f);
            for z in &latent {
                pooled.extend((0..f).map(|r| {
                    basis[r * k..(r + 1) * k]
                        .iter()
                        .zip(z)
                        .map(|(u, v)| u * v)
                        .sum::<f64>() as f32
                }));
            }
            let mut target = Vec::with_capacity(n * TARGET_TOKENS * f);
            for i in 0..n {
                let row = &pooled[i * f..(i + 1) * f];
                let mut offsets: Vec<f32> = (0..TARGET_TOKENS * f)
                    .map(|_| 0.5 * std_normal.sample(&mut rng) as f32)
                    .collect();
                for k in 0..f {
                    let mean = (0..TARGET_TOKENS).map(|t| offsets[t * f + k]).sum::<f32>()
                        / TARGET_TOKENS as f32;
                    for t in 0..TARGET_TOKENS {
                        offsets[t * f + k] += row[k] - mean;
                    }
                }
                target.extend(offsets);
            }
            let mut neighbor = Vec::with_capacity(n * NEIGHBOR_TOKENS * f);
            let half = (NEIGHBOR_GRID / 2) as i64;
            for i in 0..n {
                let (x, y) = ((i / cfg.grid) as i64, (i % cfg.grid) as i64);
                for r in 0..NEIGHBOR_GRID as i64 {
                    for c in 0..NEIGHBOR_GRID as i64 {
                        // Tile rows run along pixel y, i.e. along grid_y.
                        let (nx, ny) = (x + c - half, y + r - half);
                        if (0..cfg.grid as i64).contains(&nx) && (0..cfg.grid as i64).contains(&ny)
                        {
                            let j = nx as usize * cfg.grid + ny as usize;
                            neighbor.extend_from_slice(&pooled[j * f..(j + 1) * f]);
                        } else {
                            neighbor.extend(std::iter::repeat_n(0.0f32, f));
                        }
                    }
                }
            }
            let noise =
                Normal::new(0.0, cfg.noise).map_err(|e| CoreError::Config(e.to_string()))?;
            let spots = (0..n)
                .map(|i| {
                    let row = &pooled[i * f..(i + 1) * f];
                    let expression = (0..cfg.genes)
                        .map(|j| {
                            let a = &map[j * f..(j + 1) * f];
                            a.iter().zip(row).map(|(w, &v)| w * v as f64).sum::<f64>()
                                + noise.sample(&mut rng)
                        })
                        .collect();
                    let (gx, gy) = (i / cfg.grid, i % cfg.grid);
                    SpotRecord {
                        spot_id: format!("{slide_id}_{gx}x{gy}"),
                        grid_x: gx,
                        grid_y: gy,
                        pixel_x: SPOT_PITCH * (gx as i64 + 1),
                        pixel_y: SPOT_PITCH * (gy as i64 + 1),
                        expression,
                    }
                })
                .collect();
            let dataset = SlideDataset {
                slide_id,
                patient_id: format!("P{p}"),
                spots,
                gene_names: gene_names.clone(),
                patch_h: DEFAULT_PATCH,
                patch_w: DEFAULT_PATCH,
                stage: Stage::Normalized,
            };
            let features = FeatureSet::new(
                Tensor::new([n, TARGET_TOKENS, f], target)?,
                Tensor::new([n, NEIGHBOR_TOKENS, f], neighbor)?,
                Tensor::new([n, f], pooled)?,
            )?;
            slides.push(SynthSlide { dataset, features });
        }
    }
    Ok(slides)
}

/// `grid^2` latent vectors: sums of white noise over the window of radius
/// `r` around each cell (noise drawn on a margin so edge cells see full
/// windows), divided by the window size's square root.
fn smooth_field(
    grid: usize,
    k: usize,
    r: usize,
    std_normal: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let side = grid + 2 * r;
    let noise: Vec<f64> = (0..side * side * k)
        .map(|_| std_normal.sample(rng))
        .collect();
    let norm = 1.0 / ((2 * r + 1) as f64);
    (0..grid * grid)
        .map(|i| {
            let (x, y) = (i / grid, i % grid);
            let mut z = vec![0.0; k];
            for wx in x..=x + 2 * r {
                for wy in y..=y + 2 * r {
                    let cell = &noise[(wx * side + wy) * k..(wx * side + wy + 1) * k];
                    z.iter_mut().zip(cell).for_each(|(a, b)| *a += b * norm);
                }
            }
            z
        })
        .collect()
}

/// Model inputs and labels for the given slides.
pub fn to_train_set<T: Real>(slides: &[&SynthSlide]) -> Result<TrainSet<T>> {
    let mut inputs = Vec::with_capacity(slides.len());
    let mut labels = Vec::with_capacity(slides.len());
    for s in slides {
        inputs.push(slide_inputs(&s.dataset, &s.features)?);
        labels.push(labels_of(&s.dataset));
    }
    TrainSet::new(inputs, labels)
}

/// Model inputs of a slide from its features.
pub fn slide_inputs<T: Real>(ds: &SlideDataset, fs: &FeatureSet) -> Result<SlideInputs<T>> {
    if fs.n() != ds.n() {
        return Err(CoreError::invalid(format!(
            "slide {}: {} feature rows for {} spots",
            ds.slide_id,
            fs.n(),
            ds.n()
        )));
    }
    Ok(SlideInputs {
        slide_id: ds.slide_id.clone(),
        target: fs.target.cast(),
        neighbor: fs.neighbor.cast(),
        global: fs.global.cast(),
        coords: ds.coordinates()?,
    })
}

/// The `[n, m]` expression matrix of a slide.
pub fn labels_of<T: Real>(ds: &SlideDataset) -> Tensor<T> {
    Tensor::from_fn([ds.n(), ds.m()], |k| {
        T::from_f64_lossy(ds.spots[k / ds.m()].expression[k % ds.m()])
    })
}

/// Writes a toy dataset in the on-disk formats: `spots.csv`, `counts.csv`
/// with integer counts derived from the planted expression, `features/`
/// with the feature files of every slide, and (optionally) one PPM image
/// per slide under `images/`. `extra_genes` uninformative low-count genes
/// are appended so that gene selection has something to discard.
pub fn write_toy_dataset(
    dir: &Path,
    cfg: &SynthConfig,
    extra_genes: usize,
    images: bool,
) -> Result<()> {
    let slides = planted_linear(cfg)?;
    std::fs::create_dir_all(dir.join("features")).map_err(|e| CoreError::io(dir, e))?;
    let mut spots = String::from("slide_id,patient_id,spot_id,grid_x,grid_y,pixel_x,pixel_y\n");
    let mut counts = String::from("spot_id");
    for g in &slides[0].dataset.gene_names {
        let _ = write!(counts, ",{g}");
    }
    for e in 0..extra_genes {
        let _ = write!(counts, ",rare{e:03}");
    }
    counts.push('\n');
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    for s in &slides {
        let ds = &s.dataset;
        for spot in &ds.spots {
            let _ = writeln!(
                spots,
                "{},{},{},{},{},{},{}",
                ds.slide_id,
                ds.patient_id,
                spot.spot_id,
                spot.grid_x,
                spot.grid_y,
                spot.pixel_x,
                spot.pixel_y
            );
            let _ = write!(counts, "{}", spot.spot_id);
            for &y in &spot.expression {
                let _ = write!(counts, ",{}", (40.0 * (0.5 * y).exp()).round() as u64);
            }
            for _ in 0..extra_genes {
                let _ = write!(counts, ",{}", rng.random_range(0..2u32));
            }
            counts.push('\n');
        }
        s.features.save(&dir.join("features"), &ds.slide_id)?;
        if images {
            std::fs::create_dir_all(dir.join("images")).map_err(|e| CoreError::io(dir, e))?;
            let img = toy_image(ds, &mut rng);
            let path = dir.join("images").join(format!("{}.ppm", ds.slide_id));
            let mut bytes = Vec::new();
            img.write_to(
                &mut std::io::Cursor::new(&mut bytes),
                image::ImageFormat::Pnm,
            )
            .map_err(|e| CoreError::invalid(format!("encoding {}: {e}", path.display())))?;
            atomic_write(&path, &bytes)?;
        }
    }
    atomic_write(&dir.join("spots.csv"), spots.as_bytes())?;
    atomic_write(&dir.join("counts.csv"), counts.as_bytes())?;
    Ok(())
}

/// A slide image with one tinted square per spot over a noisy background.
fn toy_image(ds: &SlideDataset, rng: &mut ChaCha8Rng) -> RgbImage {
    let gx = ds.spots.iter().map(|s| s.grid_x).max().unwrap_or(0) as u32 + 2;
    let gy = ds.spots.iter().map(|s| s.grid_y).max().unwrap_or(0) as u32 + 2;
    let pitch = SPOT_PITCH as u32;
    let mut img = RgbImage::from_fn(gx * pitch, gy * pitch, |_, _| Rgb([230, 220, 225]));
    for spot in &ds.spots {
        let tint = [
            (120.0 + 60.0 * spot.expression[0].tanh()) as u8,
            (90.0 + 60.0 * spot.expression[1 % spot.expression.len()].tanh()) as u8,
            (150.0 + 60.0 * spot.expression[2 % spot.expression.len()].tanh()) as u8,
        ];
        let (cx, cy) = (spot.pixel_x as u32, spot.pixel_y as u32);
        for y in cy - pitch / 2..cy + pitch / 2 {
            for x in cx - pitch / 2..cx + pitch / 2 {
                let jitter: i16 = rng.random_range(-12..=12);
                let px = tint.map(|c| (c as i16 + jitter).clamp(0, 255) as u8);
                img.put_pixel(x, y, Rgb(px));
            }
        }
    }
    img
}
