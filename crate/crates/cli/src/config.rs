//! Run configuration: one TOML file drives every subcommand. The `network`
//! section is required; everything else falls back to defaults so a minimal
//! config stays minimal. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sefcn_core::arch::NetworkSpec;
use sefcn_core::data::GenerateConfig;
use sefcn_core::optim::TrainConfig;
use sefcn_core::{Result, SefcnError};

fn default_manifest() -> PathBuf {
    PathBuf::from("data/manifest.toml")
}

fn default_eval_split() -> String {
    "test".to_string()
}

/// Where samples come from: a manifest on disk, plus (optionally) the
/// generator settings `gen-data` uses to produce that manifest.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_manifest")]
    pub manifest: PathBuf,
    /// Split evaluated by `eval` (and used for `inspect-excitation` samples).
    #[serde(default = "default_eval_split")]
    pub eval_split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<GenerateConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

fn default_run_dir() -> PathBuf {
    PathBuf::from("run")
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Run directory: receives config copy, metrics.csv, checkpoints/,
    /// eval.csv and excitation/.
    #[serde(default = "default_run_dir")]
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

fn default_blocks() -> Vec<String> {
    vec!["sE-1".to_string(), "sD-4".to_string()]
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InspectConfig {
    /// When set, `train` dumps the spatial gates of `blocks` after every
    /// epoch; `inspect-excitation` always uses `blocks`.
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_blocks")]
    pub blocks: Vec<String>,
}

impl Default for InspectConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub inspect: InspectConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SefcnError::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| SefcnError::config(format!("{}: {e}", path.display())))
    }

    /// Effective config as TOML; parsing the output reproduces `self`.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| SefcnError::config(format!("config serialization failed: {e}")))
    }

    /// Seed precedence: `--seed` flag, then the SEFCN_SEED environment
    /// variable, then whatever the file says. An override lands on both the
    /// training seed and the generator seed so one knob controls a whole run.
    pub fn apply_seed(&mut self, flag: Option<u64>, env: Option<&str>) -> Result<()> {
        let seed = match (flag, env) {
            (Some(s), _) => Some(s),
            (None, Some(v)) => Some(v.trim().parse::<u64>().map_err(|_| {
                SefcnError::config(format!(
                    "SEFCN_SEED must be an unsigned integer, got '{v}'"
                ))
            })?),
            (None, None) => None,
        };
        if let Some(s) = seed {
            self.train.seed = s;
            if let Some(g) = &mut self.data.generate {
                g.seed = s;
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        if let Some(g) = &self.data.generate {
            g.validate()?;
        }
        if self.data.eval_split.is_empty() {
            return Err(SefcnError::config("data: eval_split must be non-empty"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sefcn_core::arch::{Family, Position};
    use sefcn_core::se::SeMode;

    const MINIMAL: &str = "[network]\nfamily = \"unet\"\nnum_classes = 3\n";

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg: RunConfig = toml::from_str(MINIMAL).unwrap();
        assert_eq!(cfg.network.family, Family::Unet);
        assert_eq!(cfg.network.depth, 4);
        assert_eq!(cfg.network.channels, 64);
        assert_eq!(cfg.network.se.mode, SeMode::None);
        assert_eq!(cfg.network.position, Position::P5);
        assert_eq!(cfg.train.lr0, 0.01);
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.data.manifest, PathBuf::from("data/manifest.toml"));
        assert_eq!(cfg.data.eval_split, "test");
        assert!(cfg.data.generate.is_none());
        assert_eq!(cfg.output.dir, PathBuf::from("run"));
        assert!(!cfg.inspect.enabled);
        assert_eq!(cfg.inspect.blocks, ["sE-1", "sD-4"]);
    }

    #[test]
    fn unknown_keys_are_rejected_in_every_section() {
        for text in [
            "[network]\nfamily = \"unet\"\nnum_classes = 3\nwhat = 1\n",
            &format!("{MINIMAL}[train]\nwhat = 1\n"),
            &format!("{MINIMAL}[data]\nwhat = 1\n"),
            &format!("{MINIMAL}[output]\nwhat = 1\n"),
            &format!("{MINIMAL}[inspect]\nwhat = 1\n"),
            &format!("{MINIMAL}[what]\nx = 1\n"),
        ] {
            assert!(
                toml::from_str::<RunConfig>(text).is_err(),
                "accepted unknown key in: {text}"
            );
        }
    }

    #[test]
    fn print_round_trip_is_identity() {
        let text = format!(
            "{MINIMAL}\
             [network.se]\nmode = \"scse\"\nr = 4\naggregation = \"addition\"\n\
             [train]\nseed = 7\nmax_epochs = 3\n\
             [data]\nmanifest = \"d/m.toml\"\n\
             [data.generate]\nnum_train = 5\nnum_val = 2\nnum_test = 2\nnum_classes = 3\n\
             [inspect]\nenabled = true\nblocks = [\"sB\"]\n"
        );
        let cfg: RunConfig = toml::from_str(&text).unwrap();
        let printed = cfg.to_toml().unwrap();
        let reparsed: RunConfig = toml::from_str(&printed).unwrap();
        assert_eq!(cfg, reparsed);
        // and a second print is byte-identical
        assert_eq!(printed, reparsed.to_toml().unwrap());
    }

    #[test]
    fn seed_precedence_is_flag_env_file() {
        let text = format!(
            "{MINIMAL}[train]\nseed = 1\n\
             [data.generate]\nnum_train = 1\nnum_val = 1\nnum_test = 1\nnum_classes = 2\nseed = 1\n"
        );
        let mut cfg: RunConfig = toml::from_str(&text).unwrap();
        cfg.apply_seed(None, None).unwrap();
        assert_eq!(cfg.train.seed, 1);

        let mut cfg: RunConfig = toml::from_str(&text).unwrap();
        cfg.apply_seed(None, Some("9")).unwrap();
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.data.generate.as_ref().unwrap().seed, 9);

        let mut cfg: RunConfig = toml::from_str(&text).unwrap();
        cfg.apply_seed(Some(5), Some("9")).unwrap();
        assert_eq!(cfg.train.seed, 5);
        assert_eq!(cfg.data.generate.as_ref().unwrap().seed, 5);
    }

    #[test]
    fn bad_env_seed_is_a_config_error() {
        let mut cfg: RunConfig = toml::from_str(MINIMAL).unwrap();
        let err = cfg.apply_seed(None, Some("banana")).err().unwrap();
        assert!(matches!(err, SefcnError::Config(_)));
        assert!(err.to_string().contains("SEFCN_SEED"));
    }
}
