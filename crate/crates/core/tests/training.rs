use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use triplex_core::encoders::{EncoderConfig, GridCoordinates, NEIGHBOR_TOKENS, TARGET_TOKENS};
use triplex_core::model::{ModelConfig, SlideInputs, Triplex};
use triplex_core::nn::ParamStore;
use triplex_core::train::{fit, Adam, TrainConfig, TrainSet, Trainer};
use triplex_core::CoreError;
use triplex_tensor::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn toy_model(m: usize, dropout: f64) -> Triplex<f64> {
    Triplex::new(ModelConfig {
        encoder: EncoderConfig {
            d: 8,
            depth1: 1,
            depth2: 1,
            depth3: 1,
            num_heads1: 2,
            num_heads2: 2,
            num_heads3: 2,
            dropout1: dropout,
            dropout2: dropout,
            dropout3: dropout,
            ..EncoderConfig::default()
        },
        feature_dim: 6,
        n_genes: m,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn toy_data(slides: usize, n: usize, m: usize, seed: u64) -> TrainSet<f64> {
    let mut r = rng(seed);
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for s in 0..slides {
        inputs.push(SlideInputs {
            slide_id: format!("s{s}"),
            target: Tensor::randn([n, TARGET_TOKENS, 6], 1.0, &mut r),
            neighbor: Tensor::randn([n, NEIGHBOR_TOKENS, 6], 1.0, &mut r),
            global: Tensor::randn([n, 6], 1.0, &mut r),
            coords: GridCoordinates::new((0..n).map(|i| (i / 4, i % 4)).collect()).unwrap(),
        });
        labels.push(Tensor::randn([n, m], 1.0, &mut r));
    }
    TrainSet::new(inputs, labels).unwrap()
}

fn one_param(value: f64) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    store.add("w", Tensor::new([1], vec![value]).unwrap());
    store
}

#[test]
fn adam_zero_gradient_leaves_parameters_and_decays_moments() {
    let mut store = one_param(0.7);
    let mut adam = Adam::new(&store);
    adam.step(&mut store, &[Tensor::zeros([1])], 0.1).unwrap();
    assert_eq!(store.tensors()[0].data(), &[0.7]);

    adam.step(&mut store, &[Tensor::new([1], vec![2.0]).unwrap()], 0.1)
        .unwrap();
    let (m1, v1) = (adam.m[0].data()[0], adam.v[0].data()[0]);
    adam.step(&mut store, &[Tensor::zeros([1])], 0.1).unwrap();
    assert_eq!(adam.m[0].data()[0], 0.9 * m1);
    assert_eq!(adam.v[0].data()[0], 0.999 * v1);
}

#[test]
fn adam_first_step_is_lr_times_sign() {
    for g in [3.0, -0.25, 1e-3] {
        let mut store = one_param(1.0);
        let mut adam = Adam::new(&store);
        adam.step(&mut store, &[Tensor::new([1], vec![g]).unwrap()], 0.01)
            .unwrap();
        // After bias correction m_hat = g and v_hat = g^2.
        let want = 1.0 - 0.01 * g / (g.abs() + 1e-8);
        let got = store.tensors()[0].data()[0];
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        assert!(((1.0 - got) - 0.01 * g.signum()).abs() < 1e-7);
    }
}

#[test]
fn adam_descends_on_a_parabola() {
    let mut store = one_param(1.0);
    let mut adam = Adam::new(&store);
    let (mut m, mut v, mut w) = (0.0f64, 0.0f64, 1.0f64);
    let mut prev = 1.0;
    for t in 1..=2 {
        let g = 2.0 * w;
        adam.step(&mut store, &[Tensor::new([1], vec![g]).unwrap()], 0.1)
            .unwrap();
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let (mh, vh) = (m / (1.0 - 0.9f64.powi(t)), v / (1.0 - 0.999f64.powi(t)));
        w -= 0.1 * mh / (vh.sqrt() + 1e-8);
        let got = store.tensors()[0].data()[0];
        assert!((got - w).abs() < 1e-12);
        assert!(got < prev);
        prev = got;
    }
}

#[test]
fn adam_rejects_non_finite_gradients_by_name() {
    let mut store = one_param(1.0);
    let mut adam = Adam::new(&store);
    let err = adam
        .step(
            &mut store,
            &[Tensor::new([1], vec![f64::NAN]).unwrap()],
            0.1,
        )
        .unwrap_err();
    assert!(
        matches!(err, CoreError::NonFinite(ref s) if s.contains('w')),
        "{err}"
    );
    assert_eq!(store.tensors()[0].data(), &[1.0]);
}

fn config(batch: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: batch,
        max_epochs: 5,
        patience: 5,
        seed,
        lr0: 1e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn fixed_seed_gives_identical_trajectories() {
    let data = toy_data(2, 8, 3, 1);
    let run = || {
        let mut model = toy_model(3, 0.2);
        let mut trainer = Trainer::new(&model, config(5, 7)).unwrap();
        let losses: Vec<f64> = (0..3)
            .map(|e| {
                trainer
                    .train_epoch(&mut model, &data, e)
                    .unwrap()
                    .loss
                    .total
            })
            .collect();
        (losses, model.store)
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a, b);
    assert_eq!(sa.tensors(), sb.tensors());
}

#[test]
fn one_step_per_epoch_when_the_batch_covers_everything() {
    let data = toy_data(2, 8, 3, 2);
    let mut model = toy_model(3, 0.0);
    let mut trainer = Trainer::new(&model, config(128, 1)).unwrap();
    assert_eq!(trainer.train_epoch(&mut model, &data, 0).unwrap().steps, 1);
    let mut trainer = Trainer::new(&model, config(5, 1)).unwrap();
    assert_eq!(trainer.train_epoch(&mut model, &data, 0).unwrap().steps, 4);
}

#[test]
fn convex_heads_on_frozen_features_do_not_increase_the_loss() {
    let data = toy_data(1, 12, 3, 3);
    let mut model = toy_model(3, 0.0);
    let mut trainer = Trainer::new(&model, config(128, 2)).unwrap();
    trainer.set_trainable(&model, |name| name.starts_with("head."));
    let frozen: Vec<_> = model
        .store
        .iter()
        .filter(|(n, _)| !n.starts_with("head."))
        .map(|(_, t)| t.clone())
        .collect();
    let mut prev = f64::INFINITY;
    for epoch in 0..3 {
        let loss = trainer
            .train_epoch(&mut model, &data, epoch)
            .unwrap()
            .loss
            .total;
        assert!(loss <= prev, "epoch {epoch}: {loss} > {prev}");
        prev = loss;
    }
    let after: Vec<_> = model
        .store
        .iter()
        .filter(|(n, _)| !n.starts_with("head."))
        .map(|(_, t)| t.clone())
        .collect();
    assert_eq!(frozen, after);
}

#[test]
fn empty_training_set_is_an_error() {
    let mut model = toy_model(3, 0.0);
    let mut trainer = Trainer::new(&model, config(4, 1)).unwrap();
    let empty = TrainSet::new(Vec::new(), Vec::new()).unwrap();
    assert!(trainer.train_epoch(&mut model, &empty, 0).is_err());
}

#[test]
fn fit_writes_the_log_and_keeps_the_best_parameters() {
    let train = toy_data(2, 8, 3, 4);
    let val = toy_data(1, 8, 3, 5);
    let mut model = toy_model(3, 0.1);
    let mut log = Vec::new();
    let res = fit(&mut model, &train, &val, &config(6, 3), Some(&mut log)).unwrap();
    let text = String::from_utf8(log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,lr,L_Ta,L_Ne,L_Gl,L_F,total,val_pcc_m");
    assert_eq!(lines.len(), res.history.len() + 1);
    assert!(res.history.len() <= 5);
    let best = res.history[res.best_epoch].val_pcc_m;
    assert_eq!(best, res.best_pcc_m);
    for r in &res.history {
        let l = r.stats.loss;
        assert_eq!(l.total, l.l_ta + l.l_ne + l.l_gl + l.l_f);
    }
}
