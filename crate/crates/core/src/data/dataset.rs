//! Dataset directories: a JSON manifest next to tensor files.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synth::{self, SynthConfig};
use super::tensor_file::{read_tensor, write_tensor, DType};
use crate::bridge::PrototypeBank;
use crate::encoder::EegBatch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFiles {
    pub trials: String,
    pub labels: String,
    pub subjects: String,
    pub image_prototypes: String,
    pub text_prototypes: String,
}

impl Default for ManifestFiles {
    fn default() -> Self {
        Self {
            trials: "trials.eegt".into(),
            labels: "labels.eegt".into(),
            subjects: "subjects.eegt".into(),
            image_prototypes: "image_prototypes.eegt".into(),
            text_prototypes: "text_prototypes.eegt".into(),
        }
    }
}

/// Contents of `manifest.json`. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    /// All classes, training and held-out.
    pub n_classes: usize,
    pub test_classes: Vec<usize>,
    pub trials_per_class: usize,
    pub channels: usize,
    pub time: usize,
    pub n_subjects: usize,
    pub dim: usize,
    pub snr_db: f64,
    pub seed: u64,
    pub files: ManifestFiles,
}

impl DatasetManifest {
    pub fn n_trials(&self) -> usize {
        self.n_classes * self.trials_per_class
    }

    pub fn train_classes(&self) -> Vec<usize> {
        let test: BTreeSet<_> = self.test_classes.iter().collect();
        (0..self.n_classes).filter(|c| !test.contains(c)).collect()
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.clone(),
            source,
        })?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(Error::Format {
                path,
                reason: format!("unsupported schema version {}", m.schema_version),
            });
        }
        Ok(m)
    }
}

/// Generates a dataset and writes it to `out`.
pub fn synth_generate(cfg: &SynthConfig, out: &Path) -> Result<DatasetManifest> {
    let data = synth::generate(cfg)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        n_classes: cfg.n_classes(),
        test_classes: (cfg.train_classes..cfg.n_classes()).collect(),
        trials_per_class: cfg.trials_per_class,
        channels: cfg.channels,
        time: cfg.time,
        n_subjects: cfg.n_subjects,
        dim: cfg.dim,
        snr_db: cfg.snr_db,
        seed: cfg.seed,
        files: ManifestFiles::default(),
    };
    let n = cfg.n_trials();
    let f = &manifest.files;
    let trials = Tensor::new(
        &[n, cfg.channels, cfg.time],
        data.trials.iter().map(|&v| v as f64).collect(),
    )?;
    write_tensor(&out.join(&f.trials), &trials, DType::F32)?;
    let as_tensor = |v: &[usize]| Tensor::new(&[v.len()], v.iter().map(|&x| x as f64).collect());
    write_tensor(&out.join(&f.labels), &as_tensor(&data.labels)?, DType::F64)?;
    write_tensor(
        &out.join(&f.subjects),
        &as_tensor(&data.subjects)?,
        DType::F64,
    )?;
    write_tensor(
        &out.join(&f.image_prototypes),
        &data.image_prototypes,
        DType::F64,
    )?;
    write_tensor(
        &out.join(&f.text_prototypes),
        &data.text_prototypes,
        DType::F64,
    )?;
    let path = out.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// A loaded dataset. Trials are kept at single precision.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub dir: PathBuf,
    trials: Vec<f32>,
    labels: Vec<usize>,
    subjects: Vec<usize>,
    bank: PrototypeBank,
}

fn expect_shape(path: &Path, t: &Tensor, want: &[usize]) -> Result<()> {
    if t.shape() != want {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!(
                "header shape {:?} disagrees with manifest {:?}",
                t.shape(),
                want
            ),
        });
    }
    Ok(())
}

fn indices(path: &Path, t: &Tensor, bound: usize, what: &str) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < bound {
                Ok(v as usize)
            } else {
                Err(Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("{what} value {v} outside 0..{bound}"),
                })
            }
        })
        .collect()
}

impl Dataset {
    /// Loads `dir/manifest.json` and every file it names, checking each
    /// header against the manifest.
    pub fn load(dir: &Path) -> Result<Self> {
        let m = DatasetManifest::read(dir)?;
        if m.test_classes.iter().any(|&c| c >= m.n_classes) {
            return Err(Error::Format {
                path: dir.join(MANIFEST_FILE),
                reason: "held-out class index out of range".into(),
            });
        }
        let n = m.n_trials();
        let p = |f: &str| dir.join(f);

        let trials_path = p(&m.files.trials);
        let (trials, _) = read_tensor(&trials_path)?;
        expect_shape(&trials_path, &trials, &[n, m.channels, m.time])?;

        let labels_path = p(&m.files.labels);
        let (labels, _) = read_tensor(&labels_path)?;
        expect_shape(&labels_path, &labels, &[n])?;
        let labels = indices(&labels_path, &labels, m.n_classes, "label")?;

        let subjects_path = p(&m.files.subjects);
        let (subjects, _) = read_tensor(&subjects_path)?;
        expect_shape(&subjects_path, &subjects, &[n])?;
        let subjects = indices(&subjects_path, &subjects, m.n_subjects, "subject")?;

        let mut tables = Vec::new();
        for f in [&m.files.image_prototypes, &m.files.text_prototypes] {
            let path = p(f);
            let (t, _) = read_tensor(&path)?;
            expect_shape(&path, &t, &[m.n_classes, m.dim])?;
            tables.push(t);
        }
        let text = tables.pop().unwrap();
        let image = tables.pop().unwrap();
        let bank = PrototypeBank::new(image, text)?;

        Ok(Self {
            trials: trials.into_data().into_iter().map(|v| v as f32).collect(),
            labels,
            subjects,
            bank,
            dir: dir.to_path_buf(),
            manifest: m,
        })
    }

    /// Swaps in externally produced prototype tables (e.g. embeddings from
    /// a real vision-language model). Shapes must match the manifest.
    pub fn replace_prototypes(&mut self, image: Tensor, text: Tensor) -> Result<()> {
        let want = [self.manifest.n_classes, self.manifest.dim];
        expect_shape(Path::new("<image prototypes>"), &image, &want)?;
        expect_shape(Path::new("<text prototypes>"), &text, &want)?;
        self.bank = PrototypeBank::new(image, text)?;
        Ok(())
    }

    pub fn bank(&self) -> &PrototypeBank {
        &self.bank
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subjects(&self) -> &[usize] {
        &self.subjects
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Trial indices whose class belongs to `split`, in file order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        let test: BTreeSet<_> = self.manifest.test_classes.iter().copied().collect();
        (0..self.len())
            .filter(|&i| test.contains(&self.labels[i]) == (split == Split::Test))
            .collect()
    }

    /// Assembles the trials at `idx` into a batch.
    pub fn batch(&self, idx: &[usize]) -> Result<EegBatch> {
        let per = self.manifest.channels * self.manifest.time;
        let mut x = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Lookup(format!("trial {i} out of range")));
            }
            x.extend(
                self.trials[i * per..(i + 1) * per]
                    .iter()
                    .map(|&v| v as f64),
            );
        }
        Ok(EegBatch {
            x: Tensor::new(&[idx.len(), self.manifest.channels, self.manifest.time], x)?,
            subject_ids: idx.iter().map(|&i| self.subjects[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// Shuffled index batches covering `split` once.
    pub fn batches(
        &self,
        split: Split,
        batch_size: usize,
        seed: u64,
        epoch: u64,
    ) -> Result<BatchIter> {
        BatchIter::new(self.split_indices(split), batch_size, seed, epoch)
    }
}

/// One epoch of index batches. The order depends only on `(seed, epoch)`;
/// the last batch may be short.
#[derive(Debug, Clone)]
pub struct BatchIter {
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl BatchIter {
    pub fn new(mut order: Vec<usize>, batch_size: usize, seed: u64, epoch: u64) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::Config(format!(
                "contrastive batches need at least 2 trials, got batch size {batch_size}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        Ok(Self {
            order,
            batch_size,
            pos: 0,
        })
    }
}

impl Iterator for BatchIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(out)
    }
}
