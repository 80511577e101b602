//! Mini-batch training with Adam and evaluation of OA / IoU.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mode, Tape};
use crate::config::{model_config_string, parse_model_config};
use crate::data::Dataset;
use crate::error::{contract, io_err, Error, Result};
use crate::graph::PointCloud;
use crate::metrics::{ConfusionMatrix, Metrics};
use crate::model::{argmax_rows, Model};
use crate::optim::AdamState;
use crate::params::ParamId;

/// Optimizer and loop settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Optimizer steps between learning-rate decays.
    pub decay_steps: u64,
    pub decay_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 4,
            lr: 0.001,
            decay_steps: 300_000,
            decay_factor: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        if self.decay_steps == 0 {
            return Err(Error::Config("decay_steps must be at least 1".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "decay_factor {} outside (0, 1]",
                self.decay_factor
            )));
        }
        Ok(())
    }
}

/// One line of the epoch log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Mean training loss over the epoch's blocks.
    pub loss: f64,
    pub train_oa: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,step,lr,loss,train_oa";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:.17e},{:.6}",
            self.epoch, self.step, self.lr, self.loss, self.train_oa
        )
    }
}

pub fn log_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from(EpochLog::CSV_HEADER);
    out.push('\n');
    for l in logs {
        out.push_str(&l.csv_row());
        out.push('\n');
    }
    out
}

/// Checks that a dataset can be fed to a model.
pub fn check_compatible(model: &Model, data: &Dataset) -> Result<()> {
    let cfg = &model.cfg;
    if data.num_classes != cfg.num_classes {
        return Err(contract(format!(
            "dataset has {} classes, model predicts {}",
            data.num_classes, cfg.num_classes
        )));
    }
    if data.aux_dim() != cfg.aux_dim {
        return Err(contract(format!(
            "dataset has {} auxiliary features, model expects {}",
            data.aux_dim(),
            cfg.aux_dim
        )));
    }
    if data.points_per_block() <= cfg.k {
        return Err(Error::InsufficientPoints {
            k: cfg.k,
            n: data.points_per_block(),
        });
    }
    Ok(())
}

fn diagnostics(tape: &Tape, out: &crate::model::ModelOutput) -> String {
    let mut s = String::new();
    for (l, &h) in out.trace.states.iter().enumerate() {
        writeln!(s, "layer {l}: |h| = {:e}", tape.value(h).norm()).unwrap();
    }
    writeln!(s, "fused: |h| = {:e}", tape.value(out.fused).norm()).unwrap();
    write!(s, "logits: |h| = {:e}", tape.value(out.logits).norm()).unwrap();
    s
}

/// Per-block forward + backward; returns `(loss, correct points)` and
/// leaves gradients on the tape.
fn block_step(
    model: &mut Model,
    tape: &mut Tape,
    cloud: &PointCloud,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize, Option<String>)> {
    let out = model.forward(tape, cloud, Mode::Train, rng)?;
    let loss = tape.softmax_cross_entropy(out.logits, &cloud.labels)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Ok((value, 0, Some(diagnostics(tape, &out))));
    }
    tape.backward(loss)?;
    let pred = argmax_rows(tape.value(out.logits));
    let correct = pred
        .iter()
        .zip(&cloud.labels)
        .filter(|(p, t)| p == t)
        .count();
    Ok((value, correct, None))
}

/// Trains `model` in place, calling `on_epoch` after every epoch.
pub fn train_model(
    model: &mut Model,
    data: &Dataset,
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &Model) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    tc.validate()?;
    check_compatible(model, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut adam = AdamState::new(tc.lr, tc.decay_steps, tc.decay_factor);
    let trainable: Vec<ParamId> = model.store.trainable_ids().collect();
    let mut logs = Vec::with_capacity(tc.epochs);
    let mut order: Vec<usize> = (0..data.blocks.len()).collect();
    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut points) = (0.0, 0usize, 0usize);
        let mut lr = adam.effective_lr();
        for batch in order.chunks(tc.batch_size) {
            let mut grads: Vec<Vec<f64>> = trainable
                .iter()
                .map(|&id| vec![0.0; model.store.value(id).len()])
                .collect();
            let scale = 1.0 / batch.len() as f64;
            for &b in batch {
                let cloud = &data.blocks[b];
                let mut tape = Tape::new();
                let (loss, ok, diag) = block_step(model, &mut tape, cloud, &mut rng)?;
                if let Some(diagnostics) = diag {
                    return Err(Error::NonFinite {
                        epoch,
                        step: adam.step as usize,
                        diagnostics,
                    });
                }
                loss_sum += loss;
                correct += ok;
                points += cloud.len();
                for (id, g) in tape.param_grads() {
                    let slot = trainable.binary_search(&id).expect("trainable parameter");
                    grads[slot]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, v)| *a += scale * v);
                }
            }
            lr = adam.effective_lr();
            let update: Vec<(ParamId, Vec<f64>)> = trainable.iter().copied().zip(grads).collect();
            adam.step(&mut model.store, &update)?;
        }
        let log = EpochLog {
            epoch,
            step: adam.step,
            lr,
            loss: loss_sum / data.blocks.len() as f64,
            train_oa: correct as f64 / points as f64,
        };
        on_epoch(&log, model)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Builds a model from `cfg` with `tc.seed` and trains it.
pub fn train(
    cfg: crate::model::ModelConfig,
    data: &Dataset,
    tc: &TrainConfig,
) -> Result<(Model, Vec<EpochLog>)> {
    let mut model = Model::new(cfg, tc.seed)?;
    let logs = train_model(&mut model, data, tc, |_, _| Ok(()))?;
    Ok((model, logs))
}

/// Eval-mode confusion matrix and metrics over every block.
pub fn evaluate(model: &mut Model, data: &Dataset) -> Result<(Metrics, ConfusionMatrix)> {
    if data.num_classes != model.cfg.num_classes {
        return Err(contract(format!(
            "dataset has {} classes, model predicts {}",
            data.num_classes, model.cfg.num_classes
        )));
    }
    check_compatible(model, data)?;
    let mut cm = ConfusionMatrix::new(data.num_classes);
    for cloud in &data.blocks {
        let pred = model.predict(cloud)?;
        cm.add(&cloud.labels, &pred)?;
    }
    Ok((cm.metrics(), cm))
}

/// CSV report: `metric,value` rows for OA, mIoU and every class IoU.
pub fn metrics_csv(m: &Metrics) -> String {
    let mut out = String::from("metric,value\n");
    writeln!(out, "oa,{:.6}", m.overall_accuracy).unwrap();
    writeln!(out, "miou,{:.6}", m.mean_iou).unwrap();
    for (c, v) in m.per_class_iou.iter().enumerate() {
        match v {
            Some(v) => writeln!(out, "iou_{c},{v:.6}").unwrap(),
            None => writeln!(out, "iou_{c},nan").unwrap(),
        }
    }
    out
}

pub fn write_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    fs::write(path, log_csv(logs)).map_err(io_err(path))
}

/// Architecture sidecar written next to a checkpoint: `<ckpt>.cfg`.
pub fn config_sidecar(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.as_os_str().to_owned();
    name.push(".cfg");
    PathBuf::from(name)
}

/// Writes parameters and running statistics to `path` and the
/// architecture to its sidecar.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    model.store.save(path)?;
    let sidecar = config_sidecar(path);
    fs::write(&sidecar, model_config_string(&model.cfg)).map_err(io_err(&sidecar))
}

/// Rebuilds the model described by the sidecar and fills in its tensors.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let sidecar = config_sidecar(path);
    let text = fs::read_to_string(&sidecar).map_err(io_err(&sidecar))?;
    let cfg = parse_model_config(&text)?;
    let mut model = Model::new(cfg, 0)?;
    model.store.load_into(path)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, Split, SynthSpec};
    use crate::layers::AggregatorKind;
    use crate::model::{Backbone, ModelConfig};

    fn tiny() -> (ModelConfig, Dataset) {
        let cfg = ModelConfig {
            backbone: Backbone::Residual,
            aggregator: AggregatorKind::EdgeConv,
            depth: 2,
            width: 8,
            k: 4,
            d_max: 2,
            num_classes: 4,
            fusion_width: 16,
            head_widths: [16, 8],
            ..ModelConfig::default()
        };
        let spec = SynthSpec {
            num_blocks: 2,
            points_per_block: 48,
            seed: 3,
            ..SynthSpec::default()
        };
        (cfg, synth_dataset(&spec, Split::Train).unwrap())
    }

    #[test]
    fn zero_lr_leaves_weights() {
        let (cfg, data) = tiny();
        let before = Model::new(cfg.clone(), 5).unwrap();
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 2,
            lr: 0.0,
            seed: 5,
            ..TrainConfig::default()
        };
        let (after, logs) = train(cfg, &data, &tc).unwrap();
        assert!(logs[0].loss.is_finite());
        for id in before.store.trainable_ids() {
            assert_eq!(before.store.value(id), after.store.value(id));
        }
    }

    #[test]
    fn fixed_seed_reproduces_log() {
        let (cfg, data) = tiny();
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 1,
            seed: 9,
            ..TrainConfig::default()
        };
        let (_, a) = train(cfg.clone(), &data, &tc).unwrap();
        let (_, b) = train(cfg, &data, &tc).unwrap();
        assert_eq!(log_csv(&a), log_csv(&b));
        assert_eq!(a[1].step, 4);
    }

    #[test]
    fn rejects_small_blocks() {
        let (mut cfg, data) = tiny();
        cfg.k = 48;
        let tc = TrainConfig::default();
        assert!(matches!(
            train(cfg, &data, &tc),
            Err(Error::InsufficientPoints { .. })
        ));
    }

    #[test]
    fn checkpoint_reproduces_metrics() {
        let (cfg, data) = tiny();
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 2,
            seed: 2,
            ..TrainConfig::default()
        };
        let (mut model, logs) = train(cfg, &data, &tc).unwrap();
        assert!(logs[0].loss.is_finite());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let mut back = load_checkpoint(&path).unwrap();
        assert_eq!(back.cfg, model.cfg);
        let (a, _) = evaluate(&mut model, &data).unwrap();
        let (b, _) = evaluate(&mut back, &data).unwrap();
        assert_eq!(a, b);
        assert_eq!(metrics_csv(&a), metrics_csv(&b));
    }

    #[test]
    fn checkpoint_rejects_other_architecture() {
        let (cfg, _) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&Model::new(cfg.clone(), 1).unwrap(), &path).unwrap();
        let wider = ModelConfig { width: 9, ..cfg };
        fs::write(config_sidecar(&path), model_config_string(&wider)).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn report_has_class_rows() {
        let mut cm = ConfusionMatrix::new(3);
        cm.add(&[0, 1, 2], &[0, 1, 1]).unwrap();
        let csv = metrics_csv(&cm.metrics());
        assert_eq!(csv.lines().count(), 1 + 3 + 2);
    }
}
