//! The five subcommands. Each takes the already-parsed, seed-adjusted,
//! validated run configuration and returns the crate-wide `Result`; exit
//! code mapping lives in `main`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sefcn_core::arch::Network;
use sefcn_core::data::{generate_dataset, load_manifest, load_split, Sample};
use sefcn_core::io::{read_checkpoint, read_tensor};
use sefcn_core::loss::median_frequency_weights;
use sefcn_core::se::SeMode;
use sefcn_core::tensor::Tensor;
use sefcn_core::train::{dump_excitation, evaluate, train as run_training};
use sefcn_core::{Result, SefcnError};

use crate::config::RunConfig;

/// All runs use single precision; gradient checking lives in the library's
/// own 64-bit test suites, not behind the CLI.
type Net = Network<f32>;

fn assemble(cfg: &RunConfig) -> Result<Net> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    Network::assemble(&cfg.network, &mut rng)
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let gen = cfg.data.generate.as_ref().ok_or_else(|| {
        SefcnError::config("gen-data needs a [data.generate] section in the config")
    })?;
    let manifest = generate_dataset(gen, &cfg.data.manifest)?;
    println!(
        "wrote {} samples ({} train / {} val / {} test) and manifest {}",
        manifest.entries.len(),
        gen.num_train,
        gen.num_val,
        gen.num_test,
        cfg.data.manifest.display()
    );
    Ok(())
}

fn mode_name(mode: SeMode) -> &'static str {
    match mode {
        SeMode::None => "none",
        SeMode::Cse => "cse",
        SeMode::Sse => "sse",
        SeMode::Scse => "scse",
    }
}

/// Parameter audit: the configured network is re-assembled under each
/// excitation mode (keeping r, aggregation and position) and its counts
/// reported, with a per-block breakdown underneath.
pub fn count_params(cfg: &RunConfig) -> Result<()> {
    for mode in [SeMode::None, SeMode::Cse, SeMode::Sse, SeMode::Scse] {
        let mut spec = cfg.network.clone();
        spec.se.mode = mode;
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let mut net: Net = Network::assemble(&spec, &mut rng)?;
        let report = net.count_parameters();
        println!(
            "mode={} total={} se_params={} percentage={:.4}",
            mode_name(mode),
            report.total,
            report.se_total,
            report.percentage()
        );
        for b in &report.per_block {
            println!("  block={} params={} se={}", b.name, b.total, b.se);
        }
    }
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let manifest = load_manifest(&cfg.data.manifest)?;
    let train_set = load_split(&manifest, &cfg.data.manifest, "train")?;
    let val_set = load_split(&manifest, &cfg.data.manifest, "val")?;
    let mut net = assemble(cfg)?;

    let run_dir = cfg.output.dir.as_path();
    fs::create_dir_all(run_dir).map_err(|e| SefcnError::io(run_dir, e))?;
    let config_copy = run_dir.join("config.toml");
    fs::write(&config_copy, cfg.to_toml()?).map_err(|e| SefcnError::io(&config_copy, e))?;

    let sites: &[String] = if cfg.inspect.enabled {
        &cfg.inspect.blocks
    } else {
        &[]
    };
    let (rows, state) = run_training(&mut net, &train_set, &val_set, &cfg.train, run_dir, sites, None)?;
    let last_val = rows
        .iter()
        .rev()
        .find(|r| r.split == "val")
        .expect("every completed epoch logs a val row");
    println!(
        "finished after {} epochs: val loss {:.6}, val global dice {:.6}",
        state.epoch_next, last_val.loss, last_val.global_dice
    );
    println!("run directory: {}", run_dir.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let ckpt = checkpoint
        .ok_or_else(|| SefcnError::config("eval requires --checkpoint"))?;
    let manifest = load_manifest(&cfg.data.manifest)?;
    let split = cfg.data.eval_split.as_str();
    let samples = load_split(&manifest, &cfg.data.manifest, split)?;
    if samples.is_empty() {
        return Err(SefcnError::input(format!(
            "eval: split '{split}' has no samples in {}",
            cfg.data.manifest.display()
        )));
    }

    let mut net = assemble(cfg)?;
    net.load_state(&read_checkpoint(ckpt)?)?;

    let labels: Vec<Tensor<f32>> = samples.iter().map(|s| s.label.clone()).collect();
    let weights = median_frequency_weights(&labels, cfg.network.num_classes)?;
    let m = evaluate(
        &mut net,
        &samples,
        &weights,
        cfg.train.loss_lambda,
        cfg.train.batch_size,
    )?;

    println!("split={split} loss={:.6} global_dice={:.6}", m.loss, m.global_dice);
    for (c, d) in m.per_class.iter().enumerate() {
        println!("class {c} dice={d:.6}");
    }

    let mut header = String::from("split,loss,global_dice");
    let mut row = format!("{split},{},{}", m.loss, m.global_dice);
    for (c, d) in m.per_class.iter().enumerate() {
        header.push_str(&format!(",dice_class_{c}"));
        row.push_str(&format!(",{d}"));
    }
    fs::create_dir_all(&cfg.output.dir).map_err(|e| SefcnError::io(cfg.output.dir.as_path(), e))?;
    let csv_path = cfg.output.dir.join("eval.csv");
    fs::write(&csv_path, format!("{header}\n{row}\n")).map_err(|e| SefcnError::io(&csv_path, e))?;
    println!("wrote {}", csv_path.display());
    Ok(())
}

/// The epoch a checkpoint belongs to, taken as the last run of digits in its
/// file name (`epoch_012.ckpt` -> 12).
fn epoch_from_filename(path: &Path) -> Result<usize> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default();
    let mut runs = Vec::new();
    let mut start = None;
    for (i, c) in stem.char_indices() {
        match (c.is_ascii_digit(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push(&stem[s..i]);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push(&stem[s..]);
    }
    let digits = runs.last().ok_or_else(|| {
        SefcnError::config(format!(
            "cannot infer an epoch from checkpoint name '{}': no digits in the file name",
            path.display()
        ))
    })?;
    digits.parse().map_err(|_| {
        SefcnError::config(format!(
            "epoch number '{digits}' in '{}' is out of range",
            path.display()
        ))
    })
}

pub fn inspect_excitation(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    sample_path: Option<&Path>,
) -> Result<()> {
    let ckpt = checkpoint
        .ok_or_else(|| SefcnError::config("inspect-excitation requires --checkpoint"))?;
    let epoch = epoch_from_filename(ckpt)?;

    let mut net = assemble(cfg)?;
    net.load_state(&read_checkpoint(ckpt)?)?;

    let sample = match sample_path {
        Some(p) => {
            let raw = read_tensor(p)?;
            let image = match *raw.shape() {
                [1, _, _] => raw,
                [h, w] => raw.reshaped(&[1, h, w])?,
                ref other => {
                    return Err(SefcnError::shape(format!(
                        "sample {}: expected shape (1, H, W) or (H, W), got {other:?}",
                        p.display()
                    )))
                }
            };
            let (_, h, w) = image.dims3()?;
            Sample {
                image,
                label: Tensor::filled(&[h, w], 0.0)?,
            }
        }
        None => {
            let manifest = load_manifest(&cfg.data.manifest)?;
            let mut samples = load_split(&manifest, &cfg.data.manifest, &cfg.data.eval_split)?;
            if samples.is_empty() {
                return Err(SefcnError::input(format!(
                    "inspect-excitation: split '{}' has no samples; pass --sample",
                    cfg.data.eval_split
                )));
            }
            samples.swap_remove(0)
        }
    };

    let dir = cfg.output.dir.join("excitation");
    fs::create_dir_all(&dir).map_err(|e| SefcnError::io(dir.as_path(), e))?;
    let written = dump_excitation(&mut net, &sample, &cfg.inspect.blocks, epoch, &dir)?;
    for p in &written {
        println!("wrote {}", p.display());
    }
    Ok(())
}
