//! Synthetic shape datasets, the `cdpc` file format, resampling and
//! augmentation.

mod augment;
mod io;
mod shapes;

pub use augment::{augment, rotate, rotation_matrix, AugmentConfig, RotationAxis};
pub use io::{format_cloud, parse_cloud, read_cloud, read_labeled_cloud, write_cloud};
pub use shapes::{gen_shapes, sample_shape, ShapeFamily, SyntheticSpec, PART_NAMES};

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, PointCloud};
use crate::model::Task;

/// Independent ChaCha stream for `(seed, path...)`, e.g. `(seed, [epoch,
/// sample])`. Different paths give unrelated streams.
pub fn stream_rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &p in path {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(splitmix(h));
    rng
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Exactly `n` points: FPS subset when the cloud is large enough,
/// otherwise all points plus draws with replacement.
pub fn resample_to_n(cloud: &PointCloud, n: usize, rng: &mut impl Rng) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::contract("resample_to_n needs n >= 1"));
    }
    let len = cloud.len();
    let idx: Vec<usize> = if len >= n {
        farthest_point_sample(cloud.coords(), n)?
    } else {
        (0..len).chain((len..n).map(|_| rng.gen_range(0..len))).collect()
    };
    Ok(cloud.select(&idx))
}

/// One cloud with its shape class; per-point part labels live in the cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub cloud: PointCloud,
    pub class: usize,
}

impl Sample {
    /// Targets for `task`: the class once, or the per-point part labels.
    pub fn targets(&self, task: &Task) -> Result<Vec<usize>> {
        match task {
            Task::Classification { classes } => {
                if self.class >= *classes {
                    return Err(Error::Validation(format!("class {} out of range for {classes} classes", self.class)));
                }
                Ok(vec![self.class])
            }
            Task::Segmentation { classes } => {
                self.cloud.validate_labels(*classes)?;
                self.cloud
                    .labels()
                    .map(|l| l.to_vec())
                    .ok_or_else(|| Error::Config("segmentation needs per-point labels".into()))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub class_names: Vec<String>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Recipe for a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// Classification over `families`, or part segmentation of them.
    pub segmentation: bool,
    pub families: Vec<ShapeFamily>,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub points: usize,
    #[serde(default)]
    pub noise: f64,
    pub seed: u64,
}

impl DatasetSpec {
    /// The first `classes` families, `per_class` training clouds each.
    pub fn classification(classes: usize, train_per_class: usize, val_per_class: usize, points: usize, seed: u64) -> Self {
        DatasetSpec {
            segmentation: false,
            families: ShapeFamily::ALL[..classes.min(ShapeFamily::ALL.len())].to_vec(),
            train_per_class,
            val_per_class,
            points,
            noise: 0.01,
            seed,
        }
    }

    /// Part segmentation over all composite families.
    pub fn part_segmentation(train_per_class: usize, val_per_class: usize, points: usize, seed: u64) -> Self {
        DatasetSpec {
            segmentation: true,
            families: ShapeFamily::COMPOSITES.to_vec(),
            train_per_class,
            val_per_class,
            points,
            noise: 0.01,
            seed,
        }
    }

    pub fn task(&self) -> Task {
        if self.segmentation {
            Task::Segmentation { classes: PART_NAMES.len() }
        } else {
            Task::Classification { classes: self.families.len() }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return Err(Error::Config("dataset needs at least one shape family".into()));
        }
        if self.segmentation {
            if let Some(f) = self.families.iter().find(|f| !f.is_composite()) {
                return Err(Error::Config(format!("`{}` has no parts; segmentation needs composites", f.name())));
            }
        }
        SyntheticSpec {
            family: self.families[0],
            points: self.points,
            noise: self.noise,
            seed: self.seed,
        }
        .validate()
    }
}

/// Classes interleaved round-robin; every sample has its own rng stream.
fn gen_split(spec: &DatasetSpec, per_class: usize, split: u64) -> Result<Vec<Sample>> {
    let k = spec.families.len();
    (0..per_class * k)
        .map(|i| {
            let class = i % k;
            let mut rng = stream_rng(spec.seed, &[split, i as u64]);
            let cloud = sample_shape(spec.families[class], spec.points, spec.noise, &mut rng)?;
            Ok(Sample { cloud, class })
        })
        .collect()
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let class_names = if spec.segmentation {
        PART_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        spec.families.iter().map(|f| f.name().to_string()).collect()
    };
    Ok(Dataset {
        task: spec.task(),
        class_names,
        train: gen_split(spec, spec.train_per_class, 0)?,
        val: gen_split(spec, spec.val_per_class, 1)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative to the dataset directory.
    pub file: PathBuf,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub task: Task,
    pub class_names: Vec<String>,
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
}

pub const MANIFEST: &str = "manifest.json";

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let entries = |split: &str, samples: &[Sample]| -> Result<Vec<ManifestEntry>> {
        let sub = dir.join(split);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let file = PathBuf::from(split).join(format!("{i:05}.cdpc"));
                write_cloud(&s.cloud, &dir.join(&file))?;
                Ok(ManifestEntry { file, class: s.class })
            })
            .collect()
    };
    let manifest = Manifest {
        task: ds.task,
        class_names: ds.class_names.clone(),
        train: entries("train", &ds.train)?,
        val: entries("val", &ds.val)?,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.class_names.len() != manifest.task.classes() {
        return Err(Error::Validation(format!(
            "manifest lists {} class names for {} classes",
            manifest.class_names.len(),
            manifest.task.classes()
        )));
    }
    let load = |entries: &[ManifestEntry]| -> Result<Vec<Sample>> {
        entries
            .iter()
            .map(|e| {
                let p = dir.join(&e.file);
                let cloud = match manifest.task {
                    Task::Segmentation { classes } => read_labeled_cloud(&p, classes)?,
                    Task::Classification { classes } => {
                        if e.class >= classes {
                            return Err(Error::Validation(format!(
                                "{}: class {} out of range for {classes} classes",
                                p.display(),
                                e.class
                            )));
                        }
                        read_cloud(&p)?
                    }
                };
                Ok(Sample { cloud, class: e.class })
            })
            .collect()
    };
    Ok(Dataset {
        task: manifest.task,
        train: load(&manifest.train)?,
        val: load(&manifest.val)?,
        class_names: manifest.class_names,
    })
}
