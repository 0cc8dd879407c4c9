use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use triplex_core::data::{
    apply_gene_selection, extract_features, load_dataset, normalize_expression, select_genes,
    FeatureSet, SlideDataset, SpotRecord, Stage, ToyExtractor,
};
use triplex_core::encoders::EncoderConfig;
use triplex_core::model::{ModelConfig, Triplex};
use triplex_core::synth::{planted_linear, write_toy_dataset, SynthConfig};
use triplex_core::CoreError;

fn dataset(spots: &[(usize, usize, i64, i64)]) -> SlideDataset {
    SlideDataset {
        slide_id: "s".into(),
        patient_id: "p".into(),
        spots: spots
            .iter()
            .enumerate()
            .map(|(i, &(gx, gy, px, py))| SpotRecord {
                spot_id: format!("spot{i}"),
                grid_x: gx,
                grid_y: gy,
                pixel_x: px,
                pixel_y: py,
                expression: vec![1.0],
            })
            .collect(),
        gene_names: vec!["g".into()],
        patch_h: 224,
        patch_w: 224,
        stage: Stage::Raw,
    }
}

#[test]
fn constant_image_gives_identical_target_tokens() {
    let img = RgbImage::from_pixel(700, 700, Rgb([90, 140, 200]));
    // Far enough from the border that the target patch is fully inside.
    let ds = dataset(&[(0, 0, 350, 350)]);
    let fs = extract_features(&ToyExtractor::new(8, 1), &img, &ds).unwrap();
    let t = fs.target.data();
    for r in 1..49 {
        assert_eq!(&t[r * 8..r * 8 + 8], &t[0..8]);
    }
    // The pooled global feature of a constant map equals any of its rows.
    for (p, v) in fs.global.data()[..8].iter().zip(&t[0..8]) {
        assert!((p - v).abs() <= 1e-6 * v.abs().max(1.0));
    }
}

#[test]
fn permuting_spots_permutes_feature_rows() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let img = RgbImage::from_fn(900, 700, |_, _| Rgb([r.random(), r.random(), r.random()]));
    let spots = [(0, 0, 224, 224), (0, 1, 448, 224), (1, 0, 224, 448)];
    let ex = ToyExtractor::new(4, 3);
    let base = extract_features(&ex, &img, &dataset(&spots)).unwrap();
    let order = [2, 0, 1];
    let permuted: Vec<_> = order.iter().map(|&i| spots[i]).collect();
    let out = extract_features(&ex, &img, &dataset(&permuted)).unwrap();
    assert_eq!(out, base.select(&order));
    assert_eq!(out.target.shape(), &[3, 49, 4]);
    assert_eq!(out.neighbor.shape(), &[3, 25, 4]);
    assert_eq!(out.global.shape(), &[3, 4]);
}

fn toy_model(f: usize, m: usize, seed: u64) -> Triplex<f32> {
    Triplex::new(ModelConfig {
        encoder: EncoderConfig {
            d: 8,
            depth1: 1,
            depth2: 1,
            depth3: 1,
            num_heads1: 2,
            num_heads2: 2,
            num_heads3: 2,
            ..EncoderConfig::default()
        },
        feature_dim: f,
        n_genes: m,
        seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let a = toy_model(5, 3, 1);
    a.save_checkpoint(&path).unwrap();
    let mut b = toy_model(5, 3, 2);
    assert_ne!(a.store.tensors(), b.store.tensors());
    b.load_checkpoint(&path).unwrap();
    assert_eq!(a.store.tensors(), b.store.tensors());
}

#[test]
fn checkpoint_for_another_gene_count_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    toy_model(5, 3, 1).save_checkpoint(&path).unwrap();
    let err = toy_model(5, 4, 1).load_checkpoint(&path).unwrap_err();
    assert!(
        matches!(err, CoreError::GeneCountMismatch { model: 3, data: 4 }),
        "{err}"
    );
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    toy_model(5, 3, 1).save_checkpoint(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let mut model = toy_model(5, 3, 1);
    for broken in [
        bytes[..bytes.len() - 3].to_vec(),
        [b"XXXXXXXX".as_slice(), &bytes[8..]].concat(),
        [bytes.as_slice(), &[0]].concat(),
    ] {
        std::fs::write(&path, broken).unwrap();
        assert!(matches!(
            model.load_checkpoint(&path),
            Err(CoreError::Checkpoint(_))
        ));
    }
}

#[test]
fn toy_dataset_loads_through_the_file_formats() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        patients: 2,
        slides_per_patient: 2,
        grid: 3,
        genes: 5,
        feature_dim: 8,
        ..SynthConfig::default()
    };
    write_toy_dataset(dir.path(), &cfg, 3, false).unwrap();
    let slides = load_dataset(
        &dir.path().join("spots.csv"),
        &dir.path().join("counts.csv"),
    )
    .unwrap();
    assert_eq!(slides.len(), 4);
    assert!(slides.iter().all(|s| s.n() == 9 && s.m() == 8));

    // The informative genes carry far more counts than the rare ones.
    let keep = select_genes(&slides, 5).unwrap();
    let names: Vec<&str> = keep
        .iter()
        .map(|&j| slides[0].gene_names[j].as_str())
        .collect();
    assert!(names.iter().all(|n| n.starts_with("gene")), "{names:?}");
    let (norm, dropped) =
        normalize_expression(&apply_gene_selection(&slides[0], &keep).unwrap()).unwrap();
    assert!(dropped.is_empty());
    assert_eq!(norm.stage, Stage::Normalized);

    let planted = planted_linear(&cfg).unwrap();
    for s in &planted {
        let fs = FeatureSet::load(&dir.path().join("features"), &s.dataset.slide_id).unwrap();
        assert_eq!(fs, s.features);
    }
}
