//! SGD with momentum and L2 weight decay, learning-rate schedules, the
//! epoch loop and accuracy evaluation.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, generate_transformed, DataError, Dataset, TransformRegime};
use crate::model::{argmax_rows, predict, InferenceMode, ModelError, ModelGraph};
use crate::tensor::{Tape, Tensor4, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("cannot evaluate on an empty dataset")]
    EmptySet,
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Divergence {
        epoch: usize,
        batch: usize,
        loss: f64,
        /// Epochs completed before the failure.
        record: Box<RunRecord>,
    },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Drops by equal factors at 50%, 75% and 90% of the epochs, reaching
    /// `lr_end` for the last segment.
    Step,
    Cosine,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::Step => "step",
            Schedule::Cosine => "cosine",
        })
    }
}

impl FromStr for Schedule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "step" => Ok(Schedule::Step),
            "cosine" => Ok(Schedule::Cosine),
            other => Err(format!(
                "unknown schedule '{other}' (expected step or cosine)"
            )),
        }
    }
}

const STEP_POINTS: [f64; 3] = [0.5, 0.75, 0.9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Seeds the per-epoch shuffle (and per-epoch resampling, if any).
    pub seed: u64,
    pub mode: InferenceMode,
    pub schedule: Schedule,
    /// Test accuracy is computed every `eval_every` epochs and always after
    /// the last one; 0 means only after the last.
    pub eval_every: usize,
    /// Images per forward pass during evaluation.
    pub eval_chunk: usize,
}

impl TrainConfig {
    /// Desk-scale defaults: 30 epochs, batch 128, momentum 0.9, weight decay
    /// 5e-4, step schedule from 0.02 down to 2e-5.
    pub fn desk(mode: InferenceMode, seed: u64) -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            lr_start: 0.02,
            lr_end: 2e-5,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed,
            mode,
            schedule: Schedule::Step,
            eval_every: 1,
            eval_chunk: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return bad(format!(
                "need lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if self.eval_chunk == 0 {
            return bad("eval_chunk must be at least 1".into());
        }
        Ok(())
    }

    /// Learning rate used throughout epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let e = epoch as f64;
        let total = self.epochs.max(1) as f64;
        match self.schedule {
            Schedule::Step => {
                let ratio = (self.lr_end / self.lr_start).powf(1.0 / STEP_POINTS.len() as f64);
                let drops = STEP_POINTS
                    .iter()
                    .filter(|&&p| e >= (p * total).round())
                    .count();
                if drops == STEP_POINTS.len() {
                    self.lr_end
                } else {
                    self.lr_start * ratio.powi(drops as i32)
                }
            }
            Schedule::Cosine => {
                let t = if self.epochs <= 1 {
                    0.0
                } else {
                    e / (total - 1.0)
                };
                self.lr_end
                    + 0.5 * (self.lr_start - self.lr_end) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct SgdState {
    velocity: Vec<Tensor4>,
}

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn velocity(&self) -> &[Tensor4] {
        &self.velocity
    }
}

/// `v ← momentum·v + g + weight_decay·p; p ← p − lr·v` for every pair.
/// Buffers are created as zeros on the first call.
pub fn sgd_step(
    params: &mut [&mut Tensor4],
    grads: &[&Tensor4],
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> std::result::Result<(), TensorError> {
    if params.len() != grads.len() {
        return Err(TensorError::InvalidShape {
            op: "sgd_step",
            detail: format!("{} parameters but {} gradients", params.len(), grads.len()),
        });
    }
    if state.velocity.is_empty() {
        state.velocity = params
            .iter()
            .map(|p| Tensor4::zeros(p.shape()))
            .collect::<std::result::Result<_, _>>()?;
    }
    if state.velocity.len() != params.len() {
        return Err(TensorError::InvalidShape {
            op: "sgd_step",
            detail: format!(
                "state holds {} buffers for {} parameters",
                state.velocity.len(),
                params.len()
            ),
        });
    }
    for ((p, g), v) in params.iter().zip(grads).zip(&state.velocity) {
        p.check_same_shape(g, "sgd_step")?;
        p.check_same_shape(v, "sgd_step")?;
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        let pd = p.data_mut();
        for ((pi, &gi), vi) in pd.iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi + gi + weight_decay * *pi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub initial_test_accuracy: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    pub final_test_accuracy: Option<f64>,
    /// Kept out of the summary file so reruns compare byte for byte.
    #[serde(skip)]
    pub wall_time_s: f64,
    pub checkpoint: Option<String>,
}

impl RunRecord {
    fn new(config: &TrainConfig) -> Self {
        Self {
            config: config.clone(),
            initial_test_accuracy: None,
            epochs: Vec::new(),
            final_test_accuracy: None,
            wall_time_s: 0.0,
            checkpoint: None,
        }
    }

    /// Writes `epochs.jsonl` (one line per epoch), `summary.json`, and the
    /// wall time to `timing.log`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| TrainError::Io { path, source }
        };
        let p = dir.join("epochs.jsonl");
        let mut lines = String::new();
        for e in &self.epochs {
            lines.push_str(&serde_json::to_string(e).expect("epoch record serializes"));
            lines.push('\n');
        }
        std::fs::write(&p, lines).map_err(io(&p))?;
        let p = dir.join("summary.json");
        let mut text = serde_json::to_string_pretty(self).expect("run record serializes");
        text.push('\n');
        std::fs::write(&p, text).map_err(io(&p))?;
        let p = dir.join("timing.log");
        let mut f = std::fs::File::create(&p).map_err(io(&p))?;
        writeln!(f, "wall_time_s {:.3}", self.wall_time_s).map_err(io(&p))?;
        Ok(())
    }
}

/// Training images for each epoch: one frozen set, or a fresh transformed
/// copy of `source` per epoch with the regime seed offset by the epoch.
#[derive(Debug, Clone, Copy)]
pub enum TrainSet<'a> {
    Fixed(&'a Dataset),
    Resampled {
        source: &'a Dataset,
        regime: TransformRegime,
    },
}

impl<'a> From<&'a Dataset> for TrainSet<'a> {
    fn from(d: &'a Dataset) -> Self {
        TrainSet::Fixed(d)
    }
}

impl TrainSet<'_> {
    fn base(&self) -> &Dataset {
        match self {
            TrainSet::Fixed(d) => d,
            TrainSet::Resampled { source, .. } => source,
        }
    }
}

/// Fraction of items whose top-scoring class (ties to the lowest index)
/// equals the label.
pub fn evaluate(model: &ModelGraph, set: &Dataset, mode: &InferenceMode) -> Result<f64> {
    evaluate_chunked(model, set, mode, 256)
}

pub fn evaluate_chunked(
    model: &ModelGraph,
    set: &Dataset,
    mode: &InferenceMode,
    chunk: usize,
) -> Result<f64> {
    if set.is_empty() {
        return Err(TrainError::EmptySet);
    }
    let pred = predict(model, set.images(), mode, chunk)?;
    let correct = pred
        .iter()
        .zip(set.labels())
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / set.len() as f64)
}

pub fn fit(
    model: &mut ModelGraph,
    train: TrainSet<'_>,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    fit_observed(model, train, test, cfg, |_| {})
}

/// [`fit`], calling `on_epoch` after each completed epoch.
pub fn fit_observed(
    model: &mut ModelGraph,
    train: TrainSet<'_>,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<RunRecord> {
    cfg.validate()?;
    let started = Instant::now();
    let base = train.base();
    if base.is_empty() {
        return Err(TrainError::EmptySet);
    }
    let classes = model.classes();
    for set in std::iter::once(base).chain(test) {
        if set.image_shape() != model.input_shape() {
            return Err(TrainError::Config(format!(
                "dataset images are {:?} but the model expects {:?}",
                set.image_shape(),
                model.input_shape()
            )));
        }
        if set.labels().iter().any(|&l| l >= classes) {
            return Err(TrainError::Config(format!(
                "dataset labels exceed the model's {classes} classes"
            )));
        }
    }
    let eval = |model: &ModelGraph| -> Result<Option<f64>> {
        test.map(|t| evaluate_chunked(model, t, &cfg.mode, cfg.eval_chunk))
            .transpose()
    };

    let mut record = RunRecord::new(cfg);
    record.initial_test_accuracy = eval(model)?;
    if cfg.epochs == 0 {
        record.final_test_accuracy = record.initial_test_accuracy;
    }
    let mut state = SgdState::new();
    let mut resampled;
    for epoch in 0..cfg.epochs {
        let set = match train {
            TrainSet::Fixed(d) => d,
            TrainSet::Resampled { source, regime } => {
                let r = TransformRegime {
                    seed: regime.seed.wrapping_add(epoch as u64),
                    ..regime
                };
                resampled = generate_transformed(source, &r)?;
                &resampled
            }
        };
        let lr = cfg.lr_at(epoch);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, batch) in data::batches(set, cfg.batch_size, cfg.seed, epoch as u64).enumerate() {
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape, true);
            let x = tape.constant(batch.images);
            let logits = model.training_logits(&mut tape, &binding, x, &cfg.mode)?;
            let preds = argmax_rows(tape.value(logits)?);
            correct += preds
                .iter()
                .zip(&batch.labels)
                .filter(|(p, l)| p == l)
                .count();
            let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
            let loss_value = tape.value(loss)?.data()[0];
            if !loss_value.is_finite() {
                record.wall_time_s = started.elapsed().as_secs_f64();
                return Err(TrainError::Divergence {
                    epoch,
                    batch: b,
                    loss: loss_value,
                    record: Box::new(record),
                });
            }
            loss_sum += loss_value * batch.labels.len() as f64;
            let vars: Vec<_> = binding.param_vars().flat_map(|(w, b)| [w, b]).collect();
            let grads = tape.backward(loss)?;
            let grads: Vec<&Tensor4> = vars
                .iter()
                .map(|&v| grads.get(v).ok_or(TensorError::UnknownVar(v.index())))
                .collect::<std::result::Result<_, TensorError>>()?;
            let mut params = model.params_mut();
            sgd_step(
                &mut params,
                &grads,
                &mut state,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            )?;
        }
        let last = epoch + 1 == cfg.epochs;
        let due = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
        let test_accuracy = if last || due { eval(model)? } else { None };
        if last {
            record.final_test_accuracy = test_accuracy;
        }
        let row = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / set.len() as f64,
            train_accuracy: correct as f64 / set.len() as f64,
            test_accuracy,
        };
        on_epoch(&row);
        record.epochs.push(row);
    }
    record.wall_time_s = started.elapsed().as_secs_f64();
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::QuarterTurn;
    use crate::model::{build_small_cnn, ModeKind};

    fn cfg(mode: InferenceMode) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 4,
            lr_start: 0.05,
            lr_end: 0.005,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 11,
            mode,
            schedule: Schedule::Step,
            eval_every: 1,
            eval_chunk: 8,
        }
    }

    fn toy(count: usize, seed: u64) -> Dataset {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let px = (0..count * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels = (0..count).map(|i| i % 3).collect();
        Dataset::new(
            Tensor4::from_vec([count, 1, 8, 8], px).unwrap(),
            labels,
            Some(3),
            "toy",
        )
        .unwrap()
    }

    fn tiny() -> ModelGraph {
        build_small_cnn(3, [1, 8, 8], [2, 3, 3, 4], 2).unwrap()
    }

    #[test]
    fn plain_sgd_and_fixed_point() {
        let mut p = Tensor4::vector(vec![1.0, -2.0]);
        let g = Tensor4::vector(vec![0.5, 0.25]);
        let mut s = SgdState::new();
        sgd_step(&mut [&mut p], &[&g], &mut s, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25]);

        let before = p.clone();
        let zero = Tensor4::vector(vec![0.0, 0.0]);
        sgd_step(&mut [&mut p], &[&zero], &mut SgdState::new(), 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_rejects_mismatched_shapes() {
        let mut p = Tensor4::vector(vec![1.0, 2.0]);
        let g = Tensor4::vector(vec![1.0]);
        assert!(sgd_step(&mut [&mut p], &[&g], &mut SgdState::new(), 0.1, 0.0, 0.0).is_err());
        assert!(sgd_step(&mut [&mut p], &[], &mut SgdState::new(), 0.1, 0.0, 0.0).is_err());
    }

    #[test]
    fn step_schedule_drops_by_decades() {
        let mut c = cfg(InferenceMode::plain());
        c.epochs = 20;
        c.lr_start = 0.1;
        c.lr_end = 1e-4;
        let lrs: Vec<f64> = (0..20).map(|e| c.lr_at(e)).collect();
        assert_eq!(lrs[0], 0.1);
        assert_eq!(lrs[9], 0.1);
        assert!((lrs[10] - 0.01).abs() < 1e-15);
        assert!((lrs[15] - 0.001).abs() < 1e-15);
        assert_eq!(lrs[18], 1e-4);
        assert_eq!(lrs[19], 1e-4);
    }

    #[test]
    fn cosine_schedule_hits_endpoints() {
        let mut c = cfg(InferenceMode::plain());
        c.schedule = Schedule::Cosine;
        c.epochs = 11;
        assert_eq!(c.lr_at(0), c.lr_start);
        assert!((c.lr_at(10) - c.lr_end).abs() < 1e-15);
        assert!(c.lr_at(3) > c.lr_at(4));
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(InferenceMode::plain());
        c.lr_end = 0.0;
        assert!(c.validate().is_err());
        let mut c = cfg(InferenceMode::plain());
        c.momentum = 1.0;
        assert!(c.validate().is_err());
        let mut c = cfg(InferenceMode::plain());
        c.lr_end = 0.1;
        assert!(c.validate().is_err());
        assert!(cfg(InferenceMode::plain()).validate().is_ok());
    }

    #[test]
    fn zero_epochs_reports_initial_accuracy() {
        let mut m = tiny();
        let before = m.clone();
        let (train, test) = (toy(8, 1), toy(6, 2));
        let mut c = cfg(InferenceMode::plain());
        c.epochs = 0;
        let r = fit(&mut m, (&train).into(), Some(&test), &c).unwrap();
        assert!(r.epochs.is_empty());
        assert_eq!(r.final_test_accuracy, r.initial_test_accuracy);
        assert_eq!(
            r.initial_test_accuracy,
            Some(evaluate(&before, &test, &c.mode).unwrap())
        );
        assert_eq!(m, before);
    }

    #[test]
    fn fit_is_deterministic_and_records_epochs() {
        let (train, test) = (toy(10, 3), toy(6, 4));
        let c = cfg(InferenceMode::c4(ModeKind::OursMean));
        let mut a = tiny();
        let mut b = tiny();
        let ra = fit(&mut a, (&train).into(), Some(&test), &c).unwrap();
        let rb = fit(&mut b, (&train).into(), Some(&test), &c).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            serde_json::to_string(&ra).unwrap(),
            serde_json::to_string(&rb).unwrap()
        );
        let idx: Vec<usize> = ra.epochs.iter().map(|e| e.epoch).collect();
        assert_eq!(idx, vec![0, 1, 2]);
        assert!(ra.epochs.iter().all(|e| e.test_accuracy.is_some()));
    }

    #[test]
    fn eval_every_zero_evaluates_only_at_the_end() {
        let (train, test) = (toy(6, 5), toy(6, 6));
        let mut c = cfg(InferenceMode::plain());
        c.eval_every = 0;
        let r = fit(&mut tiny(), (&train).into(), Some(&test), &c).unwrap();
        let evals: Vec<bool> = r.epochs.iter().map(|e| e.test_accuracy.is_some()).collect();
        assert_eq!(evals, vec![false, false, true]);
        assert_eq!(r.final_test_accuracy, r.epochs[2].test_accuracy);
    }

    #[test]
    fn single_identity_branch_matches_plain_training_bitwise() {
        let train = toy(10, 7);
        let mut plain = tiny();
        let mut ours = tiny();
        let rp = fit(
            &mut plain,
            (&train).into(),
            None,
            &cfg(InferenceMode::plain()),
        )
        .unwrap();
        let mode = InferenceMode::new(ModeKind::OursMax, vec![QuarterTurn::R0]).unwrap();
        let ro = fit(&mut ours, (&train).into(), None, &cfg(mode)).unwrap();
        assert_eq!(plain, ours);
        for (a, b) in rp.epochs.iter().zip(&ro.epochs) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
        }
    }

    #[test]
    fn zero_learning_rate_leaves_loss_constant() {
        let train = toy(6, 8);
        let mut m = tiny();
        let mode = InferenceMode::plain();
        let loss_of = |m: &ModelGraph| {
            let mut tape = Tape::new();
            let bind = m.bind(&mut tape, false);
            let x = tape.constant(train.images().clone());
            let logits = m.training_logits(&mut tape, &bind, x, &mode).unwrap();
            let loss = tape.softmax_cross_entropy(logits, train.labels()).unwrap();
            tape.value(loss).unwrap().data()[0]
        };
        let l0 = loss_of(&m);
        let g: Vec<Tensor4> = m
            .params()
            .iter()
            .map(|(_, t)| Tensor4::zeros(t.shape()).unwrap())
            .collect();
        let gr: Vec<&Tensor4> = g.iter().collect();
        let mut s = SgdState::new();
        for _ in 0..3 {
            sgd_step(&mut m.params_mut(), &gr, &mut s, 0.0, 0.9, 0.0).unwrap();
            assert_eq!(loss_of(&m).to_bits(), l0.to_bits());
        }
    }

    #[test]
    fn divergence_returns_partial_record() {
        let train = toy(8, 9);
        let mut c = cfg(InferenceMode::plain());
        c.lr_start = 1e200;
        c.lr_end = 1e200;
        c.momentum = 0.0;
        match fit(&mut tiny(), (&train).into(), None, &c) {
            Err(TrainError::Divergence { record, .. }) => assert!(record.epochs.len() < 3),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn empty_set_is_rejected() {
        let m = tiny();
        let empty =
            Dataset::new(Tensor4::zeros([0, 1, 8, 8]).unwrap(), vec![], Some(3), "e").unwrap();
        assert!(matches!(
            evaluate(&m, &empty, &InferenceMode::plain()),
            Err(TrainError::EmptySet)
        ));
    }

    #[test]
    fn record_files_exclude_wall_time_from_summary() {
        let dir = tempfile::tempdir().unwrap();
        let train = toy(6, 10);
        let mut r = fit(
            &mut tiny(),
            (&train).into(),
            Some(&train),
            &cfg(InferenceMode::plain()),
        )
        .unwrap();
        r.wall_time_s = 12.5;
        r.write_to(dir.path()).unwrap();
        let summary = std::fs::read_to_string(dir.path().join("summary.json")).unwrap();
        assert!(!summary.contains("wall_time"));
        let lines = std::fs::read_to_string(dir.path().join("epochs.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 3);
        let timing = std::fs::read_to_string(dir.path().join("timing.log")).unwrap();
        assert!(timing.contains("12.500"));
    }
}
