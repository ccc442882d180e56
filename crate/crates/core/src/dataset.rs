//! Synthetic multi-coil datasets on disk.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! meta.json          noise level, acceleration, mask kind, seeds, case list
//! csm.lcmt           coil maps [Nc, 2, H, W]
//! images/<case>.lcmt reference image [2, H, W]
//! masks/<case>.lcmt  sampling mask [H, W]
//! kspace/<case>.lcmt measurement [Nc, 2, H, W]
//! ```
//!
//! Case names are `<split>_<index>` with a three-digit index.

use std::fs;
use std::path::{Path, PathBuf};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lcmt;
use crate::mri::{make_mask, make_phantom, simulate_measurement, synthetic_coil_maps, ForwardOperator, MaskKind};
use crate::rng::{seeded, stream_id};
use crate::scalar::Real;
use crate::tensor::Tensor;

const DATASET_FORMAT: &str = "lcmuse-dataset";

const PURPOSE_IMAGE: u32 = 20;
const PURPOSE_MASK: u32 = 21;
const PURPOSE_NOISE: u32 = 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One undersampling setting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Acceleration {
    pub factor: f64,
    pub mask: MaskKind,
}

impl Acceleration {
    /// Short label such as `2x-1d`.
    pub fn label(&self) -> String {
        format!("{}x-{}", self.factor, self.mask)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub coils: usize,
    pub eta: f64,
    pub center_fraction: f64,
    pub accelerations: Vec<Acceleration>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            size: 32,
            n_train: 64,
            n_val: 8,
            n_test: 16,
            coils: 4,
            eta: 0.01,
            center_fraction: 0.08,
            accelerations: vec![
                Acceleration {
                    factor: 2.0,
                    mask: MaskKind::OneD,
                },
                Acceleration {
                    factor: 4.0,
                    mask: MaskKind::TwoD,
                },
            ],
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::Config(format!("image size must be ≥ 16, got {}", self.size)));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("train and test splits must be nonempty".into()));
        }
        if self.coils == 0 {
            return Err(Error::Config("need at least one coil".into()));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("η must be finite and ≥ 0, got {}", self.eta)));
        }
        if !(0.0..=1.0).contains(&self.center_fraction) {
            return Err(Error::Config(format!(
                "center fraction must lie in [0, 1], got {}",
                self.center_fraction
            )));
        }
        if self.accelerations.is_empty() {
            return Err(Error::Config("at least one acceleration is required".into()));
        }
        for a in &self.accelerations {
            if !(a.factor >= 1.0) {
                return Err(Error::Config(format!("acceleration must be ≥ 1, got {}", a.factor)));
            }
        }
        Ok(())
    }

    pub fn split_len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMeta {
    pub name: String,
    pub split: Split,
    pub image_seed: u64,
    pub mask_seed: u64,
    pub noise_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format: String,
    pub size: usize,
    pub coils: usize,
    pub eta: f64,
    pub acceleration: Acceleration,
    pub center_fraction: f64,
    pub seed: u64,
    pub cases: Vec<CaseMeta>,
}

/// One case loaded into memory.
#[derive(Clone, Debug)]
pub struct Case<T: Real> {
    pub name: String,
    pub split: Split,
    pub image: Tensor<T>,
    pub op: ForwardOperator<T>,
    pub kspace: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Dataset<T: Real> {
    pub meta: DatasetMeta,
    pub cases: Vec<Case<T>>,
}

impl<T: Real> Dataset<T> {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Case<T>> {
        self.cases.iter().filter(move |c| c.split == split)
    }

    pub fn images(&self, split: Split) -> Vec<Tensor<T>> {
        self.split(split).map(|c| c.image.clone()).collect()
    }
}

fn derive_seed(seed: u64, purpose: u32, item: u64) -> u64 {
    seeded(seed, stream_id(purpose, item)).next_u64()
}

/// Case list for a configuration. Images depend only on the seed and the
/// case position, so every acceleration sees the same images.
fn case_list(cfg: &DataConfig, accel_index: usize, seed: u64) -> Vec<CaseMeta> {
    let mut out = Vec::new();
    let mut global = 0u64;
    for split in Split::ALL {
        for i in 0..cfg.split_len(split) {
            let item = ((accel_index as u64) << 32) | global;
            out.push(CaseMeta {
                name: format!("{}_{i:03}", split.name()),
                split,
                image_seed: derive_seed(seed, PURPOSE_IMAGE, global),
                mask_seed: derive_seed(seed, PURPOSE_MASK, item),
                noise_seed: derive_seed(seed, PURPOSE_NOISE, item),
            });
            global += 1;
        }
    }
    out
}

/// Generates the dataset for `cfg.accelerations[accel_index]` in memory.
pub fn generate<T: Real>(cfg: &DataConfig, accel_index: usize, seed: u64) -> Result<Dataset<T>> {
    cfg.validate()?;
    let acceleration = *cfg.accelerations.get(accel_index).ok_or_else(|| {
        Error::Config(format!(
            "acceleration index {accel_index} out of range ({} configured)",
            cfg.accelerations.len()
        ))
    })?;
    let n = cfg.size;
    let coils: Tensor<T> = synthetic_coil_maps(cfg.coils, n, n)?;
    let metas = case_list(cfg, accel_index, seed);
    let built = crate::par::map_slice(&metas, |_, m| -> Result<Case<T>> {
        let image = make_phantom(m.image_seed, n, n)?;
        let mask = make_mask(acceleration.mask, acceleration.factor, cfg.center_fraction, m.mask_seed, n, n)?;
        let op = ForwardOperator::new(mask, coils.clone())?;
        let kspace = simulate_measurement(&op, &image, cfg.eta, m.noise_seed)?;
        Ok(Case {
            name: m.name.clone(),
            split: m.split,
            image,
            op,
            kspace,
        })
    });
    let cases = built.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        meta: DatasetMeta {
            format: DATASET_FORMAT.into(),
            size: n,
            coils: cfg.coils,
            eta: cfg.eta,
            acceleration,
            center_fraction: cfg.center_fraction,
            seed,
            cases: metas,
        },
        cases,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes a dataset in the directory layout described above.
pub fn save<T: Real>(data: &Dataset<T>, dir: &Path) -> Result<()> {
    for sub in ["images", "masks", "kspace"] {
        create_dir(&dir.join(sub))?;
    }
    let first = data
        .cases
        .first()
        .ok_or_else(|| Error::InvalidArgument("dataset has no cases".into()))?;
    lcmt::save(&dir.join("csm.lcmt"), first.op.coils())?;
    for c in &data.cases {
        let file = format!("{}.lcmt", c.name);
        lcmt::save(&dir.join("images").join(&file), &c.image)?;
        lcmt::save(&dir.join("masks").join(&file), c.op.mask())?;
        lcmt::save(&dir.join("kspace").join(&file), &c.kspace)?;
    }
    let meta = serde_json::to_string_pretty(&data.meta)?;
    let path = dir.join("meta.json");
    fs::write(&path, meta + "\n").map_err(|e| Error::io(path, e))
}

/// Files a dataset directory must contain, given its case list.
pub fn expected_files(dir: &Path, meta: &DatasetMeta) -> Vec<PathBuf> {
    let mut files = vec![dir.join("csm.lcmt")];
    for c in &meta.cases {
        let file = format!("{}.lcmt", c.name);
        for sub in ["images", "masks", "kspace"] {
            files.push(dir.join(sub).join(&file));
        }
    }
    files
}

pub fn load<T: Real>(dir: &Path) -> Result<Dataset<T>> {
    let meta_path = dir.join("meta.json");
    if !meta_path.is_file() {
        return Err(Error::MissingArtifacts(vec![meta_path]));
    }
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&text)?;
    if meta.format != DATASET_FORMAT {
        return Err(Error::Format(format!("{} is not a dataset description", meta_path.display())));
    }
    let missing: Vec<PathBuf> = expected_files(dir, &meta).into_iter().filter(|p| !p.is_file()).collect();
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }
    let coils: Tensor<T> = lcmt::load(&dir.join("csm.lcmt"))?;
    let mut cases = Vec::with_capacity(meta.cases.len());
    for c in &meta.cases {
        let file = format!("{}.lcmt", c.name);
        let mask = lcmt::load(&dir.join("masks").join(&file))?;
        cases.push(Case {
            name: c.name.clone(),
            split: c.split,
            image: lcmt::load(&dir.join("images").join(&file))?,
            op: ForwardOperator::new(mask, coils.clone())?,
            kspace: lcmt::load(&dir.join("kspace").join(&file))?,
        });
    }
    Ok(Dataset { meta, cases })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig {
            size: 16,
            n_train: 3,
            n_val: 1,
            n_test: 2,
            ..DataConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic_and_shared_across_accelerations() {
        let cfg = small();
        let a: Dataset<f64> = generate(&cfg, 0, 7).unwrap();
        let b: Dataset<f64> = generate(&cfg, 0, 7).unwrap();
        let c: Dataset<f64> = generate(&cfg, 1, 7).unwrap();
        assert_eq!(a.cases.len(), 6);
        for ((x, y), z) in a.cases.iter().zip(&b.cases).zip(&c.cases) {
            assert_eq!(x.kspace, y.kspace);
            assert_eq!(x.image, z.image);
            assert_ne!(x.op.mask(), z.op.mask());
        }
        assert_eq!(a.images(Split::Train).len(), 3);
        assert_eq!(a.split(Split::Test).next().unwrap().name, "test_000");
    }

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let data: Dataset<f64> = generate(&small(), 0, 3).unwrap();
        save(&data, dir.path()).unwrap();
        let back: Dataset<f64> = load(dir.path()).unwrap();
        assert_eq!(back.meta, data.meta);
        for (x, y) in back.cases.iter().zip(&data.cases) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.kspace, y.kspace);
            assert_eq!(x.op.mask(), y.op.mask());
        }
    }

    #[test]
    fn missing_files_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let err = load::<f64>(dir.path()).unwrap_err();
        assert!(matches!(err, Error::MissingArtifacts(ref v) if v.len() == 1));

        let data: Dataset<f64> = generate(&small(), 0, 3).unwrap();
        save(&data, dir.path()).unwrap();
        fs::remove_file(dir.path().join("kspace/test_001.lcmt")).unwrap();
        fs::remove_file(dir.path().join("csm.lcmt")).unwrap();
        match load::<f64>(dir.path()).unwrap_err() {
            Error::MissingArtifacts(v) => assert_eq!(v.len(), 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(DataConfig::default().validate().is_ok());
        assert!(DataConfig { size: 8, ..small() }.validate().is_err());
        assert!(DataConfig { eta: -1.0, ..small() }.validate().is_err());
        assert!(DataConfig { accelerations: vec![], ..small() }.validate().is_err());
        let bad = r#"{"size": 32, "colis": 4}"#;
        assert!(serde_json::from_str::<DataConfig>(bad).is_err());
    }
}
