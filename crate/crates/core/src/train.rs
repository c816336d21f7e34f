//! Deterministic training loop: seeded shuffling, mini-batch SGD on the
//! combined objective, per-epoch validation, CSV metrics, per-epoch
//! checkpoints, optional excitation-gate dumps, and early stopping on the
//! validation loss. Given the same seed and data, two runs produce
//! bit-identical metrics and checkpoints.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::Network;
use crate::data::Sample;
use crate::error::{Result, SefcnError};
use crate::io::{write_checkpoint, write_pgm};
use crate::layers::Mode;
use crate::loss::{argmax_channels, combined_loss, median_frequency_weights, DiceAccum};
use crate::optim::{Sgd, TrainConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One metrics record: a split's mean loss and Dice scores for an epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub global_dice: f64,
    pub per_class: Vec<f64>,
    pub lr: f64,
}

impl MetricsRow {
    pub fn csv_header(num_classes: usize) -> String {
        let mut s = String::from("epoch,split,loss,global_dice");
        for c in 0..num_classes {
            s.push_str(&format!(",dice_class_{c}"));
        }
        s.push_str(",lr");
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "{},{},{},{}",
            self.epoch, self.split, self.loss, self.global_dice
        );
        for v in &self.per_class {
            s.push_str(&format!(",{v}"));
        }
        s.push_str(&format!(",{}", self.lr));
        s
    }
}

/// Optimizer and early-stop state carried between epochs; exporting and
/// re-importing it (together with the network state tensors) resumes a run
/// on an identical trajectory.
#[derive(Clone, Debug)]
pub struct TrainState<T: Scalar> {
    pub epoch_next: usize,
    pub velocities: Vec<Tensor<T>>,
    pub best_val: f64,
    pub since_best: usize,
}

impl<T: Scalar> Default for TrainState<T> {
    fn default() -> Self {
        Self {
            epoch_next: 0,
            velocities: Vec::new(),
            best_val: f64::INFINITY,
            since_best: 0,
        }
    }
}

/// Stacks selected samples into one batch: images as (N, 1, H, W) in the
/// network's precision, labels as (N, H, W) class ids.
fn stack_batch<T: Scalar>(
    samples: &[Sample],
    idxs: &[usize],
) -> Result<(Tensor<T>, Tensor<f32>)> {
    let (_, h, w) = samples[idxs[0]].image.dims3()?;
    let n = idxs.len();
    let mut images = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n * h * w);
    for &i in idxs {
        let s = &samples[i];
        if s.image.shape() != [1, h, w] {
            return Err(SefcnError::input(format!(
                "sample {i} has extents {:?}, expected {:?}",
                s.image.shape(),
                [1, h, w]
            )));
        }
        images.extend_from_slice(s.image.data());
        labels.extend_from_slice(s.label.data());
    }
    let images = Tensor::new(&[n, 1, h, w], images)?.cast::<T>();
    let labels = Tensor::new(&[n, h, w], labels)?;
    Ok((images, labels))
}

/// Mean loss and pooled Dice of a split under eval mode, batched in order.
pub struct SplitMetrics {
    pub loss: f64,
    pub global_dice: f64,
    pub per_class: Vec<f64>,
}

pub fn evaluate<T: Scalar>(
    net: &mut Network<T>,
    samples: &[Sample],
    weights: &[f64],
    lambda: f64,
    batch_size: usize,
) -> Result<SplitMetrics> {
    if samples.is_empty() {
        return Err(SefcnError::input("evaluate: no samples"));
    }
    let k = net.spec().num_classes;
    let idxs: Vec<usize> = (0..samples.len()).collect();
    let mut loss_sum = 0.0;
    let mut dice = DiceAccum::new(k);
    for chunk in idxs.chunks(batch_size) {
        let (images, labels) = stack_batch::<T>(samples, chunk)?;
        let probs = net.forward(&images, Mode::Eval)?;
        let (loss, _) = combined_loss(&probs, &labels, weights, lambda)?;
        loss_sum += loss * chunk.len() as f64;
        dice.add(&argmax_channels(&probs)?, &labels)?;
    }
    Ok(SplitMetrics {
        loss: loss_sum / samples.len() as f64,
        global_dice: dice.global(),
        per_class: dice.per_class(),
    })
}

/// Runs one forward pass on a sample and writes each requested site's
/// spatial gate as a PGM named `<site>_epoch_NNN.pgm` into `dir`.
pub fn dump_excitation<T: Scalar>(
    net: &mut Network<T>,
    sample: &Sample,
    sites: &[String],
    epoch: usize,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let (_, h, w) = sample.image.dims3()?;
    let image = sample.image.reshaped(&[1, 1, h, w])?.cast::<T>();
    net.forward(&image, Mode::Eval)?;
    let mut written = Vec::with_capacity(sites.len());
    for site in sites {
        let gate = net.spatial_gate(site)?;
        let (gh, gw) = (gate.shape()[2], gate.shape()[3]);
        let map = gate.cast::<f32>().reshaped(&[gh, gw])?;
        let path = dir.join(format!("{site}_epoch_{epoch:03}.pgm"));
        write_pgm(&map, &path)?;
        written.push(path);
    }
    Ok(written)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| SefcnError::io(path, e))
}

/// Trains until `max_epochs` or until the validation loss stops improving
/// for `patience` epochs. Writes `metrics.csv`, per-epoch checkpoints under
/// `checkpoints/`, and (when `excitation_sites` is non-empty) gate dumps of
/// the first validation sample under `excitation/`, all inside `run_dir`.
/// Passing a previous run's state resumes its trajectory exactly.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    run_dir: &Path,
    excitation_sites: &[String],
    resume: Option<TrainState<T>>,
) -> Result<(Vec<MetricsRow>, TrainState<T>)> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(SefcnError::input(
            "train: both the train and val splits must be non-empty",
        ));
    }
    let k = net.spec().num_classes;
    let train_labels: Vec<Tensor<f32>> =
        train_set.iter().map(|s| s.label.clone()).collect();
    let weights = median_frequency_weights(&train_labels, k)?;
    drop(train_labels);

    let mut state = resume.unwrap_or_default();
    let mut sgd = Sgd::<T>::new(cfg.momentum, cfg.weight_decay);
    sgd.set_velocities(std::mem::take(&mut state.velocities));

    create_dir(run_dir)?;
    let ckpt_dir = run_dir.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let exc_dir = run_dir.join("excitation");
    if !excitation_sites.is_empty() {
        create_dir(&exc_dir)?;
    }
    let csv_path = run_dir.join("metrics.csv");
    let mut csv = std::fs::File::create(&csv_path).map_err(|e| SefcnError::io(&csv_path, e))?;
    writeln!(csv, "{}", MetricsRow::csv_header(k)).map_err(|e| SefcnError::io(&csv_path, e))?;

    let mut rows = Vec::new();
    for epoch in state.epoch_next..cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut dice = DiceAccum::new(k);
        for chunk in order.chunks(cfg.batch_size) {
            let (images, labels) = stack_batch::<T>(train_set, chunk)?;
            net.zero_grads();
            let probs = net.forward(&images, Mode::Train)?;
            let (loss, mut dlogits) =
                combined_loss(&probs, &labels, &weights, cfg.loss_lambda)?;
            if cfg.inject_nan_epoch == Some(epoch) {
                dlogits.data_mut()[0] = T::from_f64(f64::NAN);
            }
            if !loss.is_finite() {
                return Err(SefcnError::Divergence(format!(
                    "loss became non-finite at epoch {epoch}"
                )));
            }
            net.backward(&dlogits)?;
            sgd.step(lr, &mut |f| net.visit_state(f))?;
            loss_sum += loss * chunk.len() as f64;
            dice.add(&argmax_channels(&probs)?, &labels)?;
        }
        rows.push(MetricsRow {
            epoch,
            split: "train".into(),
            loss: loss_sum / train_set.len() as f64,
            global_dice: dice.global(),
            per_class: dice.per_class(),
            lr,
        });

        let val = evaluate(net, val_set, &weights, cfg.loss_lambda, cfg.batch_size)?;
        rows.push(MetricsRow {
            epoch,
            split: "val".into(),
            loss: val.loss,
            global_dice: val.global_dice,
            per_class: val.per_class,
            lr,
        });
        for row in &rows[rows.len() - 2..] {
            writeln!(csv, "{}", row.to_csv()).map_err(|e| SefcnError::io(&csv_path, e))?;
        }
        csv.flush().map_err(|e| SefcnError::io(&csv_path, e))?;

        write_checkpoint(
            &net.state_tensors(),
            &ckpt_dir.join(format!("epoch_{epoch:03}.ckpt")),
        )?;
        if !excitation_sites.is_empty() {
            dump_excitation(net, &val_set[0], excitation_sites, epoch, &exc_dir)?;
        }

        state.epoch_next = epoch + 1;
        let val_loss = rows[rows.len() - 1].loss;
        if !val_loss.is_finite() {
            return Err(SefcnError::Divergence(format!(
                "validation loss became non-finite at epoch {epoch}"
            )));
        }
        if val_loss < state.best_val {
            state.best_val = val_loss;
            state.since_best = 0;
        } else {
            state.since_best += 1;
            if state.since_best >= cfg.patience {
                break;
            }
        }
    }
    state.velocities = sgd.velocities().to_vec();
    Ok((rows, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{Family, NetworkSpec, Position};
    use crate::data::{generate_dataset, load_split, GenerateConfig, Profile};
    use crate::se::{Aggregation, SeConfig, SeMode};

    fn tiny_spec(mode: SeMode) -> NetworkSpec {
        NetworkSpec {
            family: Family::Unet,
            depth: 1,
            channels: 4,
            num_classes: 2,
            in_channels: 1,
            se: SeConfig {
                mode,
                r: 2,
                aggregation: Aggregation::Maxout,
            },
            position: Position::P5,
            skip_config: 1,
        }
    }

    fn tiny_net(mode: SeMode, seed: u64) -> Network<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Network::assemble(&tiny_spec(mode), &mut rng).unwrap()
    }

    fn tiny_data(dir: &Path) -> (Vec<Sample>, Vec<Sample>) {
        let cfg = GenerateConfig {
            num_train: 4,
            num_val: 2,
            num_test: 0,
            height: 16,
            width: 16,
            num_classes: 2,
            profile: Profile::Balanced,
            seed: 9,
        };
        let path = dir.join("manifest.toml");
        let m = generate_dataset(&cfg, &path).unwrap();
        (
            load_split(&m, &path, "train").unwrap(),
            load_split(&m, &path, "val").unwrap(),
        )
    }

    fn quick_cfg(max_epochs: usize) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.max_epochs = max_epochs;
        cfg.batch_size = 2;
        cfg.seed = 1;
        cfg.patience = 1000;
        cfg
    }

    #[test]
    fn lr_column_follows_the_schedule() {
        let dir = tempfile::tempdir().unwrap();
        let (tr, va) = tiny_data(dir.path());
        let mut net = tiny_net(SeMode::None, 2);
        let mut cfg = quick_cfg(21);
        cfg.lr0 = 0.01;
        let (rows, _) = train(
            &mut net,
            &tr,
            &va,
            &cfg,
            &dir.path().join("run"),
            &[],
            None,
        )
        .unwrap();
        let lr_of = |epoch: usize| {
            rows.iter()
                .find(|r| r.epoch == epoch && r.split == "train")
                .unwrap()
                .lr
        };
        assert_eq!(lr_of(0), 0.01);
        assert_eq!(lr_of(10), 0.001);
        assert_eq!(lr_of(20), 0.0001);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (tr, va) = tiny_data(dir.path());
        let cfg = quick_cfg(3);
        let run = |out: &Path| {
            let mut net = tiny_net(SeMode::Scse, 5);
            train(&mut net, &tr, &va, &cfg, out, &[], None).unwrap().0
        };
        let rows_a = run(&dir.path().join("a"));
        let rows_b = run(&dir.path().join("b"));
        assert_eq!(rows_a, rows_b);
        let csv_a = std::fs::read(dir.path().join("a/metrics.csv")).unwrap();
        let csv_b = std::fs::read(dir.path().join("b/metrics.csv")).unwrap();
        assert_eq!(csv_a, csv_b);
    }

    #[test]
    fn resume_reproduces_the_full_trajectory() {
        let dir = tempfile::tempdir().unwrap();
        let (tr, va) = tiny_data(dir.path());
        let cfg = quick_cfg(4);

        let mut net = tiny_net(SeMode::Scse, 7);
        let (full_rows, _) = train(
            &mut net,
            &tr,
            &va,
            &cfg,
            &dir.path().join("full"),
            &[],
            None,
        )
        .unwrap();

        let mut cfg_half = cfg.clone();
        cfg_half.max_epochs = 2;
        let mut net = tiny_net(SeMode::Scse, 7);
        let (head_rows, state) = train(
            &mut net,
            &tr,
            &va,
            &cfg_half,
            &dir.path().join("head"),
            &[],
            None,
        )
        .unwrap();
        let saved = net.state_tensors();

        let mut resumed = tiny_net(SeMode::Scse, 7);
        resumed.load_state(&saved).unwrap();
        let (tail_rows, _) = train(
            &mut resumed,
            &tr,
            &va,
            &cfg,
            &dir.path().join("tail"),
            &[],
            Some(state),
        )
        .unwrap();

        let mut rejoined = head_rows;
        rejoined.extend(tail_rows);
        assert_eq!(rejoined, full_rows);
    }

    #[test]
    fn divergence_aborts_but_keeps_prior_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let (tr, va) = tiny_data(dir.path());
        let mut cfg = quick_cfg(5);
        cfg.inject_nan_epoch = Some(1);
        let mut net = tiny_net(SeMode::None, 3);
        let run = dir.path().join("run");
        let err = train(&mut net, &tr, &va, &cfg, &run, &[], None).unwrap_err();
        assert!(matches!(err, SefcnError::Divergence(_)), "{err}");
        assert!(run.join("checkpoints/epoch_000.ckpt").exists());
        assert!(!run.join("checkpoints/epoch_001.ckpt").exists());
        let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
        assert!(csv.contains("\n0,train,"));
        assert!(!csv.contains("\n1,train,"));
    }

    #[test]
    fn early_stop_respects_patience() {
        let dir = tempfile::tempdir().unwrap();
        let (tr, va) = tiny_data(dir.path());
        let mut cfg = quick_cfg(50);
        cfg.lr0 = 1e-12; // effectively frozen: val loss never improves
        cfg.patience = 2;
        let mut net = tiny_net(SeMode::None, 4);
        let (rows, state) = train(
            &mut net,
            &tr,
            &va,
            &cfg,
            &dir.path().join("run"),
            &[],
            None,
        )
        .unwrap();
        // epoch 0 sets the best; epochs 1 and 2 fail to improve, then stop
        assert_eq!(state.epoch_next, 3);
        assert_eq!(rows.len(), 6);
    }

    #[test]
    fn excitation_dumps_are_written_per_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let (tr, va) = tiny_data(dir.path());
        let cfg = quick_cfg(2);
        let mut net = tiny_net(SeMode::Scse, 5);
        let run = dir.path().join("run");
        let sites = vec!["sE-1".to_string(), "sD-1".to_string()];
        train(&mut net, &tr, &va, &cfg, &run, &sites, None).unwrap();
        for name in [
            "sE-1_epoch_000.pgm",
            "sE-1_epoch_001.pgm",
            "sD-1_epoch_000.pgm",
            "sD-1_epoch_001.pgm",
        ] {
            let bytes = std::fs::read(run.join("excitation").join(name)).unwrap();
            assert!(bytes.starts_with(b"P5\n16 16\n255\n"), "{name}");
            assert_eq!(bytes.len(), 13 + 256, "{name}");
        }
    }

    #[test]
    fn csv_row_layout() {
        let row = MetricsRow {
            epoch: 3,
            split: "val".into(),
            loss: 0.5,
            global_dice: 0.25,
            per_class: vec![1.0, 0.125],
            lr: 0.01,
        };
        assert_eq!(MetricsRow::csv_header(2), "epoch,split,loss,global_dice,dice_class_0,dice_class_1,lr");
        assert_eq!(row.to_csv(), "3,val,0.5,0.25,1,0.125,0.01");
    }
}
