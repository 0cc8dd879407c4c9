//! Optimisation: Adam, the step learning-rate schedule, early stopping and
//! the epoch loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use triplex_tensor::{Graph, Real, Tensor};

use crate::error::{CoreError, Result};
use crate::eval::{pcc_m_of_slides, to_array};
use crate::fusion::{check_alpha, fusion_loss_graph, LossBreakdown};
use crate::model::{gather_tensor_rows, SlideInputs, Triplex};
use crate::nn::{collect_grads, Bound, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Epochs between learning-rate decays.
    pub step_size: usize,
    pub gamma: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Weight of the distillation term in each branch loss.
    pub alpha: f64,
    /// Fraction of training slides held out (by patient) for early stopping.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            step_size: 50,
            gamma: 0.9,
            batch_size: 128,
            max_epochs: 200,
            patience: 20,
            seed: 2021,
            alpha: 0.5,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CoreError::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail(format!("lr0={} must be positive", self.lr0));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail(format!("gamma={} must lie in (0, 1]", self.gamma));
        }
        if self.step_size == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return fail("step_size, batch_size and max_epochs must be positive".into());
        }
        if self.patience > self.max_epochs {
            return fail(format!(
                "patience={} exceeds max_epochs={}",
                self.patience, self.max_epochs
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail(format!(
                "val_fraction={} must lie in [0, 1)",
                self.val_fraction
            ));
        }
        check_alpha(self.alpha)
    }
}

/// `lr0 * gamma^floor(epoch / step_size)`.
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> f64 {
    let k = (epoch / cfg.step_size) as i32;
    cfg.lr0 * cfg.gamma.powi(k)
}

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    /// Parameters with `false` are left untouched by [`Adam::step`].
    pub trainable: Vec<bool>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = |t: &Tensor<T>| Tensor::zeros(t.shape().to_vec());
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.tensors().iter().map(zeros).collect(),
            v: params.tensors().iter().map(zeros).collect(),
            step: 0,
            trainable: vec![true; params.len()],
        }
    }

    /// One update with learning rate `lr`. Rejects non-finite gradients
    /// before touching any state.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(CoreError::invalid("one gradient per parameter required"));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params.tensors()[i].shape() {
                return Err(CoreError::invalid(format!(
                    "gradient of {} has the wrong shape",
                    params.name(crate::nn::ParamId::from_index(i))
                )));
            }
            if !g.is_finite() {
                return Err(CoreError::NonFinite(format!(
                    "gradient of {}",
                    params.name(crate::nn::ParamId::from_index(i))
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let cast = T::from_f64_lossy;
        let (tb1, tb2, one) = (cast(b1), cast(b2), T::one());
        let step = cast(lr / c1);
        let c2_sqrt = cast(c2.sqrt());
        let eps = cast(self.eps);
        for (i, g) in grads.iter().enumerate() {
            if !self.trainable[i] {
                continue;
            }
            let p = params.tensors_mut()[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..g.numel() {
                let gk = g.data()[k];
                m[k] = tb1 * m[k] + (one - tb1) * gk;
                v[k] = tb2 * v[k] + (one - tb2) * gk * gk;
                p[k] -= step * m[k] / (v[k].sqrt() / c2_sqrt + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Tracks the best validation PCC(M) seen so far.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStop {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: Option<usize>,
    pub since_improvement: usize,
    epochs_seen: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: None,
            since_improvement: 0,
            epochs_seen: 0,
        }
    }

    /// Records one epoch's score; `None` (undefined) never counts as an
    /// improvement. Returns whether the score improved, and the decision.
    pub fn check(&mut self, pcc_m: Option<f64>) -> (bool, StopDecision) {
        let epoch = self.epochs_seen;
        self.epochs_seen += 1;
        let improved = match (pcc_m, self.best) {
            (Some(v), None) => v.is_finite(),
            (Some(v), Some(b)) => v > b,
            (None, _) => false,
        };
        if improved {
            self.best = pcc_m;
            self.best_epoch = Some(epoch);
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
        }
        let decision = if self.since_improvement >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        };
        (improved, decision)
    }
}

/// Training examples: model inputs and `[n, m]` labels per slide.
#[derive(Clone, Debug)]
pub struct TrainSet<T> {
    pub slides: Vec<SlideInputs<T>>,
    pub labels: Vec<Tensor<T>>,
}

impl<T: Real> TrainSet<T> {
    pub fn new(slides: Vec<SlideInputs<T>>, labels: Vec<Tensor<T>>) -> Result<Self> {
        if slides.len() != labels.len() {
            return Err(CoreError::invalid("one label matrix per slide required"));
        }
        for (s, y) in slides.iter().zip(&labels) {
            if y.ndim() != 2 || y.shape()[0] != s.len() {
                return Err(CoreError::invalid(format!(
                    "slide {}: labels {:?} do not match {} spots",
                    s.slide_id,
                    y.shape(),
                    s.len()
                )));
            }
        }
        Ok(Self { slides, labels })
    }

    pub fn spots(&self) -> usize {
        self.slides.iter().map(SlideInputs::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.spots() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Spot-weighted mean of the batch losses.
    pub loss: LossBreakdown,
    pub steps: usize,
}

/// Holds the optimiser state and random streams across epochs.
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub adam: Adam<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: &Triplex<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            adam: Adam::new(&model.store),
            config,
            rng,
        })
    }

    /// Restricts updates to the parameters whose names satisfy `keep`,
    /// e.g. to fine-tune the prediction heads on frozen encoders.
    pub fn set_trainable(&mut self, model: &Triplex<T>, keep: impl Fn(&str) -> bool) {
        self.adam.trainable = (0..model.store.len())
            .map(|i| keep(model.store.name(crate::nn::ParamId::from_index(i))))
            .collect();
    }

    /// One pass over shuffled spot batches, one optimiser step per batch.
    pub fn train_epoch(
        &mut self,
        model: &mut Triplex<T>,
        data: &TrainSet<T>,
        epoch: usize,
    ) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(CoreError::invalid("empty training set"));
        }
        let m = model.n_genes();
        if let Some(y) = data.labels.iter().find(|y| y.shape()[1] != m) {
            return Err(CoreError::GeneCountMismatch {
                model: m,
                data: y.shape()[1],
            });
        }
        let lr = lr_schedule(&self.config, epoch);
        let mut members: Vec<(usize, usize)> = data
            .slides
            .iter()
            .enumerate()
            .flat_map(|(s, sl)| (0..sl.len()).map(move |i| (s, i)))
            .collect();
        members.shuffle(&mut self.rng);
        let slides: Vec<&SlideInputs<T>> = data.slides.iter().collect();

        let mut acc = [0.0f64; 4];
        let mut steps = 0;
        for batch in members.chunks(self.config.batch_size) {
            let mut batch = batch.to_vec();
            batch.sort_unstable();
            let labels: Vec<T> = batch
                .iter()
                .flat_map(|&(s, i)| gather_tensor_rows(&data.labels[s], &[i]).into_data())
                .collect();
            let y = Tensor::new([batch.len(), m], labels)?;

            let mut g = Graph::new();
            let dropout_rng = ChaCha8Rng::seed_from_u64(self.rng.random());
            let mut p = Bound::new(&mut g, &model.store, true).with_dropout(dropout_rng);
            let out = model.forward_batch(&mut g, &mut p, &slides, &batch)?;
            let loss = fusion_loss_graph(&mut g, &out.heads, &y, self.config.alpha, true)?;
            let parts = loss.breakdown(&g, self.config.alpha)?;
            if !parts.total.is_finite() {
                return Err(CoreError::NonFinite(format!(
                    "training loss at epoch {epoch}"
                )));
            }
            let mut grads = g.backward(loss.total)?;
            let grads = collect_grads(&mut grads, &p);
            self.adam.step(&mut model.store, &grads, lr)?;

            let w = batch.len() as f64;
            for (a, v) in acc
                .iter_mut()
                .zip([parts.l_ta, parts.l_ne, parts.l_gl, parts.l_f])
            {
                *a += w * v;
            }
            steps += 1;
        }
        let n = members.len() as f64;
        Ok(EpochStats {
            epoch,
            lr,
            loss: LossBreakdown::from_terms(
                acc[0] / n,
                acc[1] / n,
                acc[2] / n,
                acc[3] / n,
                self.config.alpha,
            ),
            steps,
        })
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub stats: EpochStats,
    pub val_pcc_m: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FitResult<T> {
    /// Parameters from the epoch with the best monitored PCC(M) (the last
    /// epoch if it was never defined).
    pub best: ParamStore<T>,
    pub best_epoch: usize,
    pub best_pcc_m: Option<f64>,
    pub history: Vec<LogRecord>,
}

/// Mean per-gene PCC over slides of the fusion-head predictions.
pub fn monitor_pcc_m<T: Real>(model: &Triplex<T>, data: &TrainSet<T>) -> Result<Option<f64>> {
    let mut per_slide = Vec::with_capacity(data.slides.len());
    for (s, y) in data.slides.iter().zip(&data.labels) {
        let pred = model.predict_slide(s)?;
        per_slide.push((to_array(&pred), to_array(y)));
    }
    pcc_m_of_slides(&per_slide)
}

/// Trains until `max_epochs` or early stopping. PCC(M) is monitored on
/// `val`, or on `train` when `val` is empty.
pub fn fit<T: Real>(
    model: &mut Triplex<T>,
    train: &TrainSet<T>,
    val: &TrainSet<T>,
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<FitResult<T>> {
    let mut trainer = Trainer::new(model, config.clone())?;
    let monitor = if val.slides.is_empty() { train } else { val };
    let mut stop = EarlyStop::new(config.patience);
    let mut best = model.store.clone();
    let mut best_epoch = 0;
    let mut history = Vec::new();
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "epoch,lr,L_Ta,L_Ne,L_Gl,L_F,total,val_pcc_m")
            .map_err(|e| CoreError::io("training log", e))?;
    }
    for epoch in 0..config.max_epochs {
        let stats = trainer.train_epoch(model, train, epoch)?;
        let pcc = monitor_pcc_m(model, monitor)?;
        let (improved, decision) = stop.check(pcc);
        if improved || stop.best.is_none() {
            best = model.store.clone();
            best_epoch = epoch;
        }
        let rec = LogRecord {
            stats,
            val_pcc_m: pcc,
        };
        if let Some(w) = log.as_deref_mut() {
            write_log_record(w, &rec).map_err(|e| CoreError::io("training log", e))?;
        }
        log::info!(
            "epoch {epoch}: lr {:.3e} loss {:.5} pcc_m {}",
            stats.lr,
            stats.loss.total,
            pcc.map_or("NA".to_string(), |v| format!("{v:.4}"))
        );
        history.push(rec);
        if decision == StopDecision::Stop {
            break;
        }
    }
    Ok(FitResult {
        best,
        best_epoch,
        best_pcc_m: stop.best,
        history,
    })
}

pub fn write_log_record(w: &mut dyn Write, r: &LogRecord) -> std::io::Result<()> {
    let l = &r.stats.loss;
    writeln!(
        w,
        "{},{:e},{},{},{},{},{},{}",
        r.stats.epoch,
        r.stats.lr,
        l.l_ta,
        l.l_ne,
        l.l_gl,
        l.l_f,
        l.total,
        r.val_pcc_m.map_or("NA".to_string(), |v| v.to_string())
    )
}

/// Splits slide indices into `(train, validation)`: whole patients are
/// held out, in seeded random order, until at least
/// `ceil(fraction * slides)` slides are held out. At least one patient
/// always stays in training.
pub fn validation_split(patients: &[String], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let need = (fraction * patients.len() as f64).ceil() as usize;
    let mut ids: Vec<&String> = patients.iter().collect();
    ids.sort();
    ids.dedup();
    if need == 0 || ids.len() < 2 {
        return ((0..patients.len()).collect(), Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut held: Vec<&String> = Vec::new();
    let mut count = 0;
    for id in ids.iter().take(ids.len() - 1) {
        if count >= need {
            break;
        }
        held.push(id);
        count += patients.iter().filter(|p| p == id).count();
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, p) in patients.iter().enumerate() {
        if held.contains(&p) {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    (train, val)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(&cfg, 0), 1e-4);
        assert_eq!(lr_schedule(&cfg, 49), 1e-4);
        assert_eq!(lr_schedule(&cfg, 50), 9e-5);
        assert_eq!(lr_schedule(&cfg, 100), 8.1e-5);
    }

    #[test]
    fn flat_run_stops_at_the_21st_epoch() {
        let mut s = EarlyStop::new(20);
        let mut stopped_at = None;
        for epoch in 1..=40 {
            if s.check(Some(0.5)).1 == StopDecision::Stop {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(21));
    }

    #[test]
    fn improvement_resets_the_counter() {
        let mut s = EarlyStop::new(20);
        for _ in 0..18 {
            s.check(Some(0.1));
        }
        assert_eq!(s.since_improvement, 17);
        let (improved, d) = s.check(Some(0.2));
        assert!(improved);
        assert_eq!(d, StopDecision::Continue);
        assert_eq!(s.since_improvement, 0);
        assert_eq!(s.best_epoch, Some(18));
    }

    #[test]
    fn strictly_improving_never_stops() {
        let mut s = EarlyStop::new(3);
        for i in 0..200 {
            assert_eq!(s.check(Some(i as f64)).1, StopDecision::Continue);
        }
    }

    #[test]
    fn undefined_scores_do_not_improve() {
        let mut s = EarlyStop::new(2);
        assert!(!s.check(None).0);
        assert_eq!(s.check(None).1, StopDecision::Stop);
    }

    #[test]
    fn validation_split_holds_out_whole_patients() {
        let patients: Vec<String> = ["a", "a", "b", "b", "c", "c"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let (train, val) = validation_split(&patients, 0.1, 7);
        assert_eq!(val.len(), 2);
        assert_eq!(patients[val[0]], patients[val[1]]);
        assert_eq!(train.len() + val.len(), 6);
        let (train, val) = validation_split(&patients[..2], 0.5, 7);
        assert!(
            val.is_empty() && train.len() == 2,
            "a single patient is never held out"
        );
    }
}
