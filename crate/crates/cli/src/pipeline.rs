//! The commands behind the `triplex` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use triplex_core::data::{
    apply_gene_selection, extract_features, load_dataset, load_processed_dataset,
    normalize_expression, read_counts_csv, select_genes, smooth_expression, FeatureSet,
    SlideDataset, ToyExtractor,
};
use triplex_core::eval::{
    aggregate_metrics, make_grouped_kfold, make_lopcv_folds, rank_genes, slide_metrics, to_array,
    FoldPcc, FoldSpec, MetricsReport, SlideMetrics,
};
use triplex_core::io::atomic_write;
use triplex_core::model::Triplex;
use triplex_core::synth::{labels_of, slide_inputs};
use triplex_core::train::{fit, validation_split, TrainSet};
use triplex_core::CoreError;
use triplex_tensor::Tensor;

use crate::config::{CvMode, RunConfig};
use crate::error::InputError;
use crate::heatmap::export_heatmap;

const SPOTS_FILE: &str = "spots.csv";
const LABELS_FILE: &str = "labels.csv";
const FEATURES_DIR: &str = "features";
const CHECKPOINT_FILE: &str = "model.ckpt";
const LOG_FILE: &str = "train_log.csv";

fn input(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

fn require_path<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    let p = p
        .as_deref()
        .ok_or_else(|| input(format!("paths.{key} is not set")))?;
    if !p.exists() {
        return Err(input(format!(
            "paths.{key}: {} does not exist",
            p.display()
        )));
    }
    Ok(p)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| {
        anyhow::Error::new(InputError(format!("cannot create {}: {e}", dir.display())))
    })
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    Ok(atomic_write(path, bytes.as_ref())?)
}

/// Normalised slides with their features, as written by [`prepare`].
#[derive(Clone, Debug)]
pub struct Prepared {
    pub slides: Vec<SlideDataset>,
    pub features: Vec<FeatureSet>,
}

impl Prepared {
    pub fn gene_names(&self) -> &[String] {
        &self.slides[0].gene_names
    }

    pub fn feature_dim(&self) -> usize {
        self.features[0].dim()
    }

    pub fn slide_index(&self, slide_id: &str) -> Result<usize> {
        self.slides
            .iter()
            .position(|s| s.slide_id == slide_id)
            .ok_or_else(|| {
                let known: Vec<&str> = self.slides.iter().map(|s| s.slide_id.as_str()).collect();
                input(format!(
                    "unknown slide {slide_id:?}; prepared slides: {}",
                    known.join(", ")
                ))
            })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        for f in [SPOTS_FILE, LABELS_FILE, FEATURES_DIR] {
            if !dir.join(f).exists() {
                return Err(input(format!(
                    "{} is missing; run `triplex prepare` first",
                    dir.join(f).display()
                )));
            }
        }
        let slides = load_processed_dataset(&dir.join(SPOTS_FILE), &dir.join(LABELS_FILE))?;
        let mut features = Vec::with_capacity(slides.len());
        for s in &slides {
            let fs = FeatureSet::load(&dir.join(FEATURES_DIR), &s.slide_id)?;
            if fs.n() != s.n() {
                return Err(input(format!(
                    "slide {}: {} feature rows for {} spots",
                    s.slide_id,
                    fs.n(),
                    s.n()
                )));
            }
            features.push(fs);
        }
        let dim = features[0].dim();
        if let Some((s, f)) = slides.iter().zip(&features).find(|(_, f)| f.dim() != dim) {
            return Err(input(format!(
                "slide {} has feature width {}, expected {dim}",
                s.slide_id,
                f.dim()
            )));
        }
        Ok(Self { slides, features })
    }
}

/// Selects genes, normalises counts and extracts (or copies) features into
/// the prepared directory.
pub fn prepare(cfg: &RunConfig) -> Result<PathBuf> {
    let spots = require_path(&cfg.paths.spots, "spots")?;
    let counts = require_path(&cfg.paths.counts, "counts")?;
    let raw = load_dataset(spots, counts).context("loading the dataset")?;
    let keep = select_genes(&raw, cfg.preprocess.m_keep)?;
    let dir = cfg.prepared_dir();
    create_dir(&dir.join(FEATURES_DIR))?;

    let extractor = ToyExtractor::new(cfg.preprocess.extractor_dim, cfg.preprocess.extractor_seed);
    let mut spots_csv = String::from("slide_id,patient_id,spot_id,grid_x,grid_y,pixel_x,pixel_y\n");
    let mut labels_csv = String::from("spot_id");
    for j in &keep {
        let _ = write!(labels_csv, ",{}", raw[0].gene_names[*j]);
    }
    labels_csv.push('\n');

    for slide in &raw {
        let (ds, dropped) = normalize_expression(&apply_gene_selection(slide, &keep)?)?;
        let kept: Vec<usize> = slide
            .spots
            .iter()
            .enumerate()
            .filter(|(_, s)| !dropped.contains(&s.spot_id))
            .map(|(i, _)| i)
            .collect();
        let features = if let Some(dir) = &cfg.paths.features {
            let fs = FeatureSet::load(dir, &slide.slide_id)
                .with_context(|| format!("features of slide {}", slide.slide_id))?;
            if fs.n() != slide.n() {
                return Err(input(format!(
                    "slide {}: {} feature rows for {} spots",
                    slide.slide_id,
                    fs.n(),
                    slide.n()
                )));
            }
            fs.select(&kept)
        } else if let Some(images) = &cfg.paths.images {
            let path = images.join(format!("{}.ppm", slide.slide_id));
            let img = image::open(&path)
                .map_err(|e| input(format!("{}: {e}", path.display())))?
                .to_rgb8();
            log::info!("extracting features of slide {}", slide.slide_id);
            extract_features(&extractor, &img, &ds)?
        } else {
            return Err(input("set paths.features or paths.images"));
        };
        features.save(&dir.join(FEATURES_DIR), &ds.slide_id)?;
        for s in &ds.spots {
            let _ = writeln!(
                spots_csv,
                "{},{},{},{},{},{},{}",
                ds.slide_id, ds.patient_id, s.spot_id, s.grid_x, s.grid_y, s.pixel_x, s.pixel_y
            );
            let _ = write!(labels_csv, "{}", s.spot_id);
            for v in &s.expression {
                let _ = write!(labels_csv, ",{v}");
            }
            labels_csv.push('\n');
        }
    }
    write(&dir.join(SPOTS_FILE), spots_csv)?;
    write(&dir.join(LABELS_FILE), labels_csv)?;
    log::info!("prepared {} slides into {}", raw.len(), dir.display());
    Ok(dir)
}

fn smoothed(cfg: &RunConfig, ds: &SlideDataset, on: bool) -> Result<SlideDataset> {
    Ok(if on {
        smooth_expression(ds, cfg.preprocess.neighborhood)?
    } else {
        ds.clone()
    })
}

/// Ground truth for evaluation.
pub fn eval_labels(cfg: &RunConfig, ds: &SlideDataset) -> Result<SlideDataset> {
    smoothed(cfg, ds, cfg.preprocess.smooth_eval_labels)
}

fn train_set(
    cfg: &RunConfig,
    data: &Prepared,
    slides: &[usize],
    training: bool,
) -> Result<TrainSet<f32>> {
    let mut inputs = Vec::with_capacity(slides.len());
    let mut labels = Vec::with_capacity(slides.len());
    for &i in slides {
        let ds = &data.slides[i];
        let ds = if training {
            smoothed(cfg, ds, cfg.preprocess.smooth)?
        } else {
            eval_labels(cfg, ds)?
        };
        inputs.push(slide_inputs(&ds, &data.features[i])?);
        labels.push(labels_of(&ds));
    }
    Ok(TrainSet::new(inputs, labels)?)
}

/// Trains on `slides` (holding out a patient-grouped validation split for
/// early stopping) and returns the best model and the training log.
pub fn train_on(
    cfg: &RunConfig,
    data: &Prepared,
    slides: &[usize],
) -> Result<(Triplex<f32>, String)> {
    let patients: Vec<String> = slides
        .iter()
        .map(|&i| data.slides[i].patient_id.clone())
        .collect();
    let (tr, va) = validation_split(&patients, cfg.train.val_fraction, cfg.seed());
    let pick = |idx: &[usize]| -> Vec<usize> { idx.iter().map(|&k| slides[k]).collect() };
    let train = train_set(cfg, data, &pick(&tr), true)?;
    let val = train_set(cfg, data, &pick(&va), false)?;
    let mut model =
        Triplex::<f32>::new(cfg.model_config(data.feature_dim(), data.gene_names().len()))?;
    let mut log = Vec::new();
    let res = fit(&mut model, &train, &val, &cfg.train, Some(&mut log))?;
    log::info!(
        "best epoch {} with validation PCC(M) {}",
        res.best_epoch,
        res.best_pcc_m.map_or("NA".into(), |v| format!("{v:.4}"))
    );
    model.store = res.best;
    Ok((model, String::from_utf8(log).expect("log is UTF-8")))
}

/// Trains on every prepared slide and writes the checkpoint and log.
pub fn train(cfg: &RunConfig) -> Result<PathBuf> {
    let data = Prepared::load(&cfg.prepared_dir())?;
    let out = &cfg.paths.out;
    create_dir(out)?;
    let all: Vec<usize> = (0..data.slides.len()).collect();
    let (model, log) = train_on(cfg, &data, &all)?;
    write(&out.join(LOG_FILE), log)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    model.save_checkpoint(&ckpt)?;
    Ok(ckpt)
}

fn predictions_csv(ds: &SlideDataset, pred: &Tensor<f32>) -> String {
    let m = ds.m();
    let mut s = String::from("spot_id");
    for g in &ds.gene_names {
        let _ = write!(s, ",{g}");
    }
    s.push('\n');
    for (i, spot) in ds.spots.iter().enumerate() {
        s.push_str(&spot.spot_id);
        for v in &pred.data()[i * m..(i + 1) * m] {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

fn evaluate_slide(
    cfg: &RunConfig,
    data: &Prepared,
    i: usize,
    pred: &Tensor<f32>,
) -> Result<SlideMetrics> {
    let truth = eval_labels(cfg, &data.slides[i])?;
    Ok(slide_metrics(
        &truth.slide_id,
        &to_array(pred),
        &truth.expression_matrix(),
    )?)
}

fn folds_csv(folds: &[FoldSpec]) -> String {
    let mut s = String::from("fold,slide_id,patient_id,role\n");
    for f in folds {
        for (role, slides) in [("train", &f.train), ("test", &f.test)] {
            for slide in slides {
                let _ = writeln!(s, "{},{slide},{},{role}", f.fold_id, f.patients[slide]);
            }
        }
    }
    s
}

/// Summary of a finished cross-validation run.
#[derive(Clone, Debug)]
pub struct CvOutcome {
    pub dir: PathBuf,
    pub folds: Vec<FoldSpec>,
    pub report: MetricsReport,
}

/// Trains and evaluates one model per fold, then writes per-fold and
/// aggregate reports and the cross-fold gene ranking under `<out>/cv`.
pub fn cv(cfg: &RunConfig) -> Result<CvOutcome> {
    let data = Prepared::load(&cfg.prepared_dir())?;
    let pairs: Vec<(String, String)> = data
        .slides
        .iter()
        .map(|s| (s.slide_id.clone(), s.patient_id.clone()))
        .collect();
    let folds = match cfg.cv.mode {
        CvMode::Lopcv => make_lopcv_folds(&pairs)?,
        CvMode::KFold(k) => make_grouped_kfold(&pairs, k, cfg.seed())?,
    };
    let dir = cfg.paths.out.join("cv");
    create_dir(&dir)?;
    write(&dir.join("folds.csv"), folds_csv(&folds))?;

    let mut fold_metrics: Vec<Vec<SlideMetrics>> = Vec::with_capacity(folds.len());
    for fold in &folds {
        log::info!(
            "fold {}: training on {} slides, testing on {}",
            fold.fold_id,
            fold.train.len(),
            fold.test.join(", ")
        );
        let fold_dir = dir.join(format!("fold_{}", fold.fold_id));
        create_dir(&fold_dir)?;
        let index = |ids: &[String]| -> Result<Vec<usize>> {
            ids.iter().map(|s| data.slide_index(s)).collect()
        };
        let (model, log) = train_on(cfg, &data, &index(&fold.train)?)?;
        write(&fold_dir.join(LOG_FILE), log)?;
        model.save_checkpoint(&fold_dir.join(CHECKPOINT_FILE))?;
        let mut metrics = Vec::with_capacity(fold.test.len());
        for i in index(&fold.test)? {
            let ds = &data.slides[i];
            let inputs = slide_inputs::<f32>(ds, &data.features[i])?;
            let pred = model.predict_slide(&inputs)?;
            write(
                &fold_dir.join(format!("predictions_{}.csv", ds.slide_id)),
                predictions_csv(ds, &pred),
            )?;
            metrics.push(evaluate_slide(cfg, &data, i, &pred)?);
        }
        fold_metrics.push(metrics);
    }

    let names = data.gene_names();
    let per_fold: Vec<FoldPcc> = fold_metrics
        .iter()
        .map(|m| FoldPcc::from_slides(names, m))
        .collect();
    let ranking = rank_genes(&per_fold)?;
    for (fold, metrics) in folds.iter().zip(&fold_metrics) {
        let fold_dir = dir.join(format!("fold_{}", fold.fold_id));
        let report = aggregate_metrics(metrics, &ranking.top)?;
        write(&fold_dir.join("metrics.csv"), report.to_csv())?;
        write(&fold_dir.join("summary.txt"), report.summary())?;
    }
    let all: Vec<SlideMetrics> = fold_metrics.into_iter().flatten().collect();
    let report = aggregate_metrics(&all, &ranking.top)?;
    write(&dir.join("metrics.csv"), report.to_csv())?;
    write(&dir.join("summary.txt"), report.summary())?;
    write(&dir.join("genes.csv"), report.gene_csv(names))?;
    write(&dir.join("gene_ranking.csv"), ranking.to_csv())?;
    Ok(CvOutcome { dir, folds, report })
}

fn load_model(cfg: &RunConfig, data: &Prepared, checkpoint: &Path) -> Result<Triplex<f32>> {
    let mut model =
        Triplex::<f32>::new(cfg.model_config(data.feature_dim(), data.gene_names().len()))?;
    model
        .load_checkpoint(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    Ok(model)
}

/// Writes `<out>/predictions/<slide>.csv` for the given slides (all when
/// empty) and returns the written paths.
pub fn predict(cfg: &RunConfig, checkpoint: &Path, slides: &[String]) -> Result<Vec<PathBuf>> {
    if !checkpoint.exists() {
        return Err(input(format!(
            "checkpoint {} does not exist",
            checkpoint.display()
        )));
    }
    let data = Prepared::load(&cfg.prepared_dir())?;
    let model = load_model(cfg, &data, checkpoint)?;
    let index: Vec<usize> = if slides.is_empty() {
        (0..data.slides.len()).collect()
    } else {
        slides
            .iter()
            .map(|s| data.slide_index(s))
            .collect::<Result<_>>()?
    };
    let dir = cfg.paths.out.join("predictions");
    create_dir(&dir)?;
    let mut written = Vec::with_capacity(index.len());
    for i in index {
        let ds = &data.slides[i];
        let pred = model.predict_slide(&slide_inputs::<f32>(ds, &data.features[i])?)?;
        let path = dir.join(format!("{}.csv", ds.slide_id));
        write(&path, predictions_csv(ds, &pred))?;
        written.push(path);
    }
    Ok(written)
}

/// Reads a predictions CSV and orders its rows like the slide's spots.
pub fn read_predictions(path: &Path, ds: &SlideDataset) -> Result<Vec<Vec<f64>>> {
    let table = read_counts_csv(path, false)?;
    if table.gene_names.len() != ds.m() {
        return Err(CoreError::GeneCountMismatch {
            model: table.gene_names.len(),
            data: ds.m(),
        }
        .into());
    }
    if table.gene_names != ds.gene_names {
        return Err(input(format!(
            "{}: gene columns differ from the prepared genes",
            path.display()
        )));
    }
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; ds.n()];
    for (id, values) in table.rows {
        let i = ds.spot_index(&id).ok_or_else(|| {
            input(format!(
                "{}: spot {id} is not on slide {}",
                path.display(),
                ds.slide_id
            ))
        })?;
        rows[i] = Some(values);
    }
    let missing: Vec<&str> = ds
        .spots
        .iter()
        .zip(&rows)
        .filter(|(_, r)| r.is_none())
        .map(|(s, _)| s.spot_id.as_str())
        .collect();
    if !missing.is_empty() {
        bail!(InputError(format!(
            "{}: no predictions for spots {}",
            path.display(),
            missing.join(", ")
        )));
    }
    Ok(rows.into_iter().flatten().collect())
}

fn slide_of(predictions: &Path, slide: Option<&str>) -> Result<String> {
    match slide {
        Some(s) => Ok(s.to_string()),
        None => predictions
            .file_stem()
            .and_then(|s| s.to_str())
            .map(str::to_string)
            .ok_or_else(|| input("pass --slide")),
    }
}

/// Scores a predictions CSV against the slide's prepared labels; writes
/// `<out>/eval/<slide>/{metrics.csv,summary.txt,genes.csv}`.
pub fn eval(cfg: &RunConfig, predictions: &Path, slide: Option<&str>) -> Result<MetricsReport> {
    let slide = slide_of(predictions, slide)?;
    let data = Prepared::load(&cfg.prepared_dir())?;
    let i = data.slide_index(&slide)?;
    let ds = &data.slides[i];
    let pred = read_predictions(predictions, ds)?;
    let pred = ndarray::Array2::from_shape_fn((ds.n(), ds.m()), |(r, c)| pred[r][c]);
    let truth = eval_labels(cfg, ds)?;
    let metrics = slide_metrics(&slide, &pred, &truth.expression_matrix())?;
    let ranking = rank_genes(&[FoldPcc::from_slides(
        data.gene_names(),
        std::slice::from_ref(&metrics),
    )])?;
    let report = aggregate_metrics(&[metrics], &ranking.top)?;
    let dir = cfg.paths.out.join("eval").join(&slide);
    create_dir(&dir)?;
    write(&dir.join("metrics.csv"), report.to_csv())?;
    write(&dir.join("summary.txt"), report.summary())?;
    write(&dir.join("genes.csv"), report.gene_csv(data.gene_names()))?;
    Ok(report)
}

/// Writes prediction and truth heatmaps of one gene under
/// `<out>/heatmaps/<slide>/` and returns the written paths.
pub fn heatmap(
    cfg: &RunConfig,
    predictions: &Path,
    slide: Option<&str>,
    gene: &str,
) -> Result<Vec<PathBuf>> {
    let slide = slide_of(predictions, slide)?;
    let data = Prepared::load(&cfg.prepared_dir())?;
    let ds = &data.slides[data.slide_index(&slide)?];
    let pred = read_predictions(predictions, ds)?;
    let truth = eval_labels(cfg, ds)?;
    let truth: Vec<Vec<f64>> = truth.spots.iter().map(|s| s.expression.clone()).collect();
    let coords: Vec<(usize, usize)> = ds.spots.iter().map(|s| (s.grid_x, s.grid_y)).collect();
    let (p, t) = export_heatmap(&pred, &truth, &ds.gene_names, gene, &coords)?;
    let dir = cfg.paths.out.join("heatmaps").join(&slide);
    create_dir(&dir)?;
    let mut written = Vec::new();
    for (kind, h) in [("pred", &p), ("truth", &t)] {
        let csv = dir.join(format!("{gene}.{kind}.csv"));
        let pgm = dir.join(format!("{gene}.{kind}.pgm"));
        write(&csv, h.to_csv())?;
        write(&pgm, h.to_pgm())?;
        written.extend([csv, pgm]);
    }
    Ok(written)
}
