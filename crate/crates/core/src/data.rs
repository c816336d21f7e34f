//! Seeded synthetic segmentation corpus: images composed of noisy geometric
//! regions with class-dependent intensities. The imbalanced profile paints a
//! large body ellipse containing small satellite structures (ellipses,
//! rectangles, 3-pixel-thin bands) so rare classes stay rare; the balanced
//! profile splits the image into jittered horizontal bands. Every sample is
//! generated from its own RNG stream, so the corpus is reproducible
//! per-sample and insensitive to generation order.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SefcnError};
use crate::io::{read_tensor, write_tensor};
use crate::tensor::Tensor;

const MANIFEST_VERSION: u32 = 1;
const PLACEMENT_ATTEMPTS: usize = 100;
const INTENSITY_SIGMA: f64 = 0.08;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Imbalanced,
    Balanced,
}

fn default_extent() -> usize {
    64
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub num_train: usize,
    pub num_val: usize,
    pub num_test: usize,
    #[serde(default = "default_extent")]
    pub height: usize,
    #[serde(default = "default_extent")]
    pub width: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub profile: Profile,
    #[serde(default)]
    pub seed: u64,
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height % 16 != 0 || self.width % 16 != 0 {
            return Err(SefcnError::config(format!(
                "generate: extents must be divisible by 16, got {}x{}",
                self.height, self.width
            )));
        }
        if self.num_classes < 2 {
            return Err(SefcnError::config(
                "generate: need at least 2 classes (0 is background)",
            ));
        }
        if self.num_train + self.num_val + self.num_test == 0 {
            return Err(SefcnError::config("generate: no samples requested"));
        }
        Ok(())
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub label: String,
    pub split: String,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub num_classes: usize,
    pub entries: Vec<ManifestEntry>,
}

pub struct Sample {
    pub image: Tensor<f32>,
    pub label: Tensor<f32>,
}

/// Paints `class` over the label map wherever the predicate holds; later
/// paints overwrite earlier ones, keeping the ground truth unambiguous.
fn paint(labels: &mut [f32], h: usize, w: usize, class: f32, inside: impl Fn(f64, f64) -> bool) {
    for y in 0..h {
        for x in 0..w {
            if inside(y as f64, x as f64) {
                labels[y * w + x] = class;
            }
        }
    }
}

fn paint_imbalanced(labels: &mut [f32], h: usize, w: usize, k: usize, rng: &mut ChaCha8Rng) {
    let (hf, wf) = (h as f64, w as f64);
    let cy = hf * 0.5 + rng.random_range(-hf / 16.0..hf / 16.0);
    let cx = wf * 0.5 + rng.random_range(-wf / 16.0..wf / 16.0);
    let ry = hf * 0.34 * rng.random_range(0.9..1.1);
    let rx = wf * 0.34 * rng.random_range(0.9..1.1);
    paint(labels, h, w, 1.0, |y, x| {
        let dy = (y - cy) / ry;
        let dx = (x - cx) / rx;
        dy * dy + dx * dx <= 1.0
    });
    for c in 2..k {
        let sector = (c - 2) as f64 / (k - 2) as f64;
        let theta = std::f64::consts::TAU * sector + rng.random_range(-0.15..0.15);
        let d = rng.random_range(0.45..0.65);
        let sy = cy + d * ry * theta.sin();
        let sx = cx + d * rx * theta.cos();
        match (c - 2) % 3 {
            0 => {
                let (ey, ex) = (
                    hf * rng.random_range(0.08..0.12),
                    wf * rng.random_range(0.08..0.12),
                );
                paint(labels, h, w, c as f32, |y, x| {
                    let dy = (y - sy) / ey;
                    let dx = (x - sx) / ex;
                    dy * dy + dx * dx <= 1.0
                });
            }
            1 => {
                let (ey, ex) = (
                    hf * rng.random_range(0.07..0.11),
                    wf * rng.random_range(0.07..0.11),
                );
                paint(labels, h, w, c as f32, |y, x| {
                    (y - sy).abs() <= ey && (x - sx).abs() <= ex
                });
            }
            _ => {
                // 3-pixel-thin horizontal band through the anchor
                let half_len = wf * rng.random_range(0.15..0.2);
                let y0 = sy.round();
                paint(labels, h, w, c as f32, |y, x| {
                    y >= y0 && y < y0 + 3.0 && (x - sx).abs() <= half_len
                });
            }
        }
    }
}

fn paint_balanced(labels: &mut [f32], h: usize, w: usize, k: usize, rng: &mut ChaCha8Rng) {
    let band = h as f64 / k as f64;
    let jitter = band / 4.0;
    // k+1 boundaries, first and last pinned to the image edges
    let mut bounds = vec![0.0f64; k + 1];
    bounds[k] = h as f64;
    for (i, b) in bounds.iter_mut().enumerate().take(k).skip(1) {
        *b = band * i as f64 + rng.random_range(-jitter..jitter);
    }
    for y in 0..h {
        let yf = y as f64;
        let mut class = k - 1;
        for c in 0..k {
            if yf >= bounds[c] && yf < bounds[c + 1] {
                class = c;
                break;
            }
        }
        for x in 0..w {
            labels[y * w + x] = class as f32;
        }
    }
}

/// Generates one sample on the per-sample RNG stream, re-drawing the layout
/// until every class is present (bounded attempts).
fn generate_sample(cfg: &GenerateConfig, idx: usize) -> Result<Sample> {
    let (h, w, k) = (cfg.height, cfg.width, cfg.num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(idx as u64 + 1);

    let mut labels = vec![0.0f32; h * w];
    let mut placed = false;
    for _ in 0..PLACEMENT_ATTEMPTS {
        labels.fill(0.0);
        match cfg.profile {
            Profile::Imbalanced => paint_imbalanced(&mut labels, h, w, k, &mut rng),
            Profile::Balanced => paint_balanced(&mut labels, h, w, k, &mut rng),
        }
        let mut present = vec![false; k];
        for &v in &labels {
            present[v as usize] = true;
        }
        if present.iter().all(|p| *p) {
            placed = true;
            break;
        }
    }
    if !placed {
        return Err(SefcnError::config(format!(
            "generate: could not place all {k} classes in a {h}x{w} sample after \
             {PLACEMENT_ATTEMPTS} attempts"
        )));
    }

    let noise = Normal::new(0.0, INTENSITY_SIGMA).expect("valid sigma");
    let image: Vec<f32> = labels
        .iter()
        .map(|&c| {
            let mean = (c as f64 + 0.5) / k as f64;
            (mean + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32
        })
        .collect();
    Ok(Sample {
        image: Tensor::new(&[1, h, w], image)?,
        label: Tensor::new(&[h, w], labels)?,
    })
}

/// Generates the full corpus next to `manifest_path` and writes the manifest
/// there. Samples are numbered across all splits in train, val, test order.
pub fn generate_dataset(cfg: &GenerateConfig, manifest_path: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| SefcnError::io(dir, e))?;

    let split_of = |idx: usize| {
        if idx < cfg.num_train {
            "train"
        } else if idx < cfg.num_train + cfg.num_val {
            "val"
        } else {
            "test"
        }
    };
    let total = cfg.num_train + cfg.num_val + cfg.num_test;
    let mut entries = Vec::with_capacity(total);
    for idx in 0..total {
        let sample = generate_sample(cfg, idx)?;
        let image = format!("image_{idx:05}.tns");
        let label = format!("label_{idx:05}.tns");
        write_tensor(&sample.image, &dir.join(&image))?;
        write_tensor(&sample.label, &dir.join(&label))?;
        entries.push(ManifestEntry {
            image,
            label,
            split: split_of(idx).to_string(),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: cfg.seed,
        num_classes: cfg.num_classes,
        entries,
    };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| SefcnError::config(format!("manifest serialization failed: {e}")))?;
    std::fs::write(manifest_path, text).map_err(|e| SefcnError::io(manifest_path, e))?;
    Ok(manifest)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| SefcnError::io(path, e))?;
    let manifest: Manifest = toml::from_str(&text)
        .map_err(|e| SefcnError::config(format!("{}: {e}", path.display())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(SefcnError::config(format!(
            "{}: manifest version {} is not supported (expected {MANIFEST_VERSION})",
            path.display(),
            manifest.version
        )));
    }
    Ok(manifest)
}

/// Loads every sample of a split, in manifest order, validating shapes and
/// label ranges. Entry paths are taken relative to the manifest location.
pub fn load_split(manifest: &Manifest, manifest_path: &Path, split: &str) -> Result<Vec<Sample>> {
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = Vec::new();
    for entry in manifest.entries.iter().filter(|e| e.split == split) {
        let image_path: PathBuf = dir.join(&entry.image);
        let label_path: PathBuf = dir.join(&entry.label);
        let image = read_tensor(&image_path)?;
        let label = read_tensor(&label_path)?;
        let (ci, hi, wi) = image.dims3().map_err(|_| {
            SefcnError::shape(format!(
                "{}: image must have shape (1, H, W), got {:?}",
                image_path.display(),
                image.shape()
            ))
        })?;
        let (hl, wl) = label.dims2().map_err(|_| {
            SefcnError::shape(format!(
                "{}: label must have shape (H, W), got {:?}",
                label_path.display(),
                label.shape()
            ))
        })?;
        if ci != 1 || hi != hl || wi != wl {
            return Err(SefcnError::shape(format!(
                "{}: image shape {:?} does not pair with label shape {:?}",
                image_path.display(),
                image.shape(),
                label.shape()
            )));
        }
        for &v in label.data() {
            if v < 0.0 || v.fract() != 0.0 || v as usize >= manifest.num_classes {
                return Err(SefcnError::input(format!(
                    "{}: label value {v} outside [0, {})",
                    label_path.display(),
                    manifest.num_classes
                )));
            }
        }
        out.push(Sample { image, label });
    }
    Ok(out)
}

/// Per-class frequencies over a split (pixel count divided by the total
/// pixels of the images the class appears in) plus the raw pixel counts.
pub fn class_frequencies(
    manifest: &Manifest,
    manifest_path: &Path,
    split: &str,
) -> Result<(Vec<f64>, Vec<u64>)> {
    let samples = load_split(manifest, manifest_path, split)?;
    if samples.is_empty() {
        return Err(SefcnError::input(format!(
            "split '{split}' has no samples"
        )));
    }
    let k = manifest.num_classes;
    let mut counts = vec![0u64; k];
    let mut host_pixels = vec![0u64; k];
    for sample in &samples {
        let mut present = vec![false; k];
        for &v in sample.label.data() {
            counts[v as usize] += 1;
            present[v as usize] = true;
        }
        for (c, p) in present.iter().enumerate() {
            if *p {
                host_pixels[c] += sample.label.len() as u64;
            }
        }
    }
    let freqs = (0..k)
        .map(|c| {
            if counts[c] == 0 {
                0.0
            } else {
                counts[c] as f64 / host_pixels[c] as f64
            }
        })
        .collect();
    Ok((freqs, counts))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(profile: Profile, k: usize, n: usize) -> GenerateConfig {
        GenerateConfig {
            num_train: n,
            num_val: 0,
            num_test: 0,
            height: 64,
            width: 64,
            num_classes: k,
            profile,
            seed: 42,
        }
    }

    #[test]
    fn rejects_bad_extents_and_class_counts() {
        let mut c = cfg(Profile::Imbalanced, 9, 1);
        c.height = 60;
        assert!(c.validate().is_err());
        let mut c = cfg(Profile::Imbalanced, 1, 1);
        assert!(c.validate().is_err());
        c.num_classes = 2;
        c.num_train = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(Profile::Imbalanced, 9, 3);
        let m1 = generate_dataset(&c, &dir.path().join("a/manifest.toml")).unwrap();
        let m2 = generate_dataset(&c, &dir.path().join("b/manifest.toml")).unwrap();
        assert_eq!(m1, m2);
        for name in ["image_00000.tns", "label_00002.tns", "manifest.toml"] {
            let a = std::fs::read(dir.path().join("a").join(name)).unwrap();
            let b = std::fs::read(dir.path().join("b").join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
    }

    #[test]
    fn samples_are_valid_and_all_classes_present() {
        let c = cfg(Profile::Imbalanced, 9, 1);
        let s = generate_sample(&c, 0).unwrap();
        assert_eq!(s.image.shape(), &[1, 64, 64]);
        assert_eq!(s.label.shape(), &[64, 64]);
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let mut present = [false; 9];
        for &v in s.label.data() {
            present[v as usize] = true;
        }
        assert!(present.iter().all(|p| *p));
    }

    #[test]
    fn imbalanced_profile_hits_frequency_targets() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(Profile::Imbalanced, 9, 100);
        let path = dir.path().join("manifest.toml");
        let m = generate_dataset(&c, &path).unwrap();
        let (freqs, counts) = class_frequencies(&m, &path, "train").unwrap();
        assert!(freqs[0] > 0.5, "background frequency {}", freqs[0]);
        // thin-band classes are every third satellite class starting at 4
        for c in (4..9).step_by(3) {
            assert!(freqs[c] < 0.02, "class {c} frequency {}", freqs[c]);
        }
        assert!(counts.iter().all(|&n| n > 0));
        let total: f64 = freqs.iter().sum();
        assert!((total - 1.0).abs() < 1e-6, "frequencies sum to {total}");
    }

    #[test]
    fn balanced_two_class_is_roughly_even() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg(Profile::Balanced, 2, 20);
        c.height = 32;
        c.width = 32;
        let path = dir.path().join("manifest.toml");
        let m = generate_dataset(&c, &path).unwrap();
        let (freqs, _) = class_frequencies(&m, &path, "train").unwrap();
        for f in &freqs {
            assert!((0.35..=0.65).contains(f), "frequency {f}");
        }
    }

    #[test]
    fn split_assignment_and_filtering() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg(Profile::Balanced, 2, 2);
        c.num_val = 1;
        c.num_test = 3;
        c.height = 16;
        c.width = 16;
        let path = dir.path().join("manifest.toml");
        let m = generate_dataset(&c, &path).unwrap();
        assert_eq!(m.entries.len(), 6);
        assert_eq!(load_split(&m, &path, "train").unwrap().len(), 2);
        assert_eq!(load_split(&m, &path, "val").unwrap().len(), 1);
        assert_eq!(load_split(&m, &path, "test").unwrap().len(), 3);
        assert_eq!(load_split(&m, &path, "bogus").unwrap().len(), 0);
    }

    #[test]
    fn roundtrip_preserves_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg(Profile::Imbalanced, 3, 1);
        c.height = 32;
        c.width = 32;
        let path = dir.path().join("manifest.toml");
        generate_dataset(&c, &path).unwrap();
        let m = load_manifest(&path).unwrap();
        let loaded = load_split(&m, &path, "train").unwrap();
        let direct = generate_sample(&c, 0).unwrap();
        assert_eq!(loaded[0].image, direct.image);
        assert_eq!(loaded[0].label, direct.label);
    }

    #[test]
    fn missing_file_error_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg(Profile::Balanced, 2, 1);
        c.height = 16;
        c.width = 16;
        let path = dir.path().join("manifest.toml");
        let m = generate_dataset(&c, &path).unwrap();
        std::fs::remove_file(dir.path().join("image_00000.tns")).unwrap();
        let err = load_split(&m, &path, "train").err().unwrap();
        assert!(err.to_string().contains("image_00000.tns"), "{err}");
    }

    #[test]
    fn frequency_examples() {
        let dir = tempfile::tempdir().unwrap();
        // one all-background sample
        write_tensor(
            &Tensor::filled(&[1, 2, 2], 0.5).unwrap(),
            &dir.path().join("image_00000.tns"),
        )
        .unwrap();
        write_tensor(
            &Tensor::zeros(&[2, 2]).unwrap(),
            &dir.path().join("label_00000.tns"),
        )
        .unwrap();
        let manifest = Manifest {
            version: 1,
            seed: 0,
            num_classes: 3,
            entries: vec![ManifestEntry {
                image: "image_00000.tns".into(),
                label: "label_00000.tns".into(),
                split: "train".into(),
            }],
        };
        let path = dir.path().join("manifest.toml");
        std::fs::write(&path, toml::to_string(&manifest).unwrap()).unwrap();
        let (freqs, counts) = class_frequencies(&manifest, &path, "train").unwrap();
        assert_eq!(freqs, vec![1.0, 0.0, 0.0]);
        assert_eq!(counts, vec![4, 0, 0]);
        // empty split errors
        assert!(class_frequencies(&manifest, &path, "val").is_err());
    }
}
