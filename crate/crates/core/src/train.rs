//! Training loop and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Graph;
use crate::config::TrainConfig;
use crate::data::tensor_file::{decode_bundle, encode_bundle, FORMAT_VERSION};
use crate::data::{DType, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Ctx, Mode};
use crate::objectives::lambda2_schedule;
use crate::optim::AdamW;

pub const BUNDLE_FILE: &str = "model.eegc";
pub const CONFIG_FILE: &str = "config.txt";
pub const META_FILE: &str = "meta.json";
pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str = "epoch,step,l_main,l_bridge,l_distill,l_total,tau,lambda2";

/// Dataset-derived shapes and bookkeeping stored next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    /// Epochs completed.
    pub epoch: usize,
    pub precision: String,
    pub checkpoint_id: String,
    pub channels: usize,
    pub time: usize,
    pub n_subjects: usize,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub config: TrainConfig,
    pub meta: CheckpointMeta,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// First 16 hex digits of the SHA-256 of the weight bundle.
fn bundle_id(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl Checkpoint {
    /// Writes `model.eegc`, `config.txt` and `meta.json` into `dir` and
    /// returns the checkpoint id.
    pub fn save(dir: &Path, model: &Model, config: &TrainConfig, epoch: usize) -> Result<String> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bundle = encode_bundle(&model.named_tensors(), config.precision)?;
        let id = bundle_id(&bundle);
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            epoch,
            precision: config.precision.to_string(),
            checkpoint_id: id.clone(),
            channels: model.config.channels,
            time: model.config.time,
            n_subjects: model.config.n_subjects,
        };
        write_atomic(&dir.join(BUNDLE_FILE), &bundle)?;
        write_atomic(&dir.join(CONFIG_FILE), config.to_text().as_bytes())?;
        let meta_path = dir.join(META_FILE);
        let json = serde_json::to_string_pretty(&meta).map_err(|source| Error::Json {
            path: meta_path.clone(),
            source,
        })?;
        write_atomic(&meta_path, (json + "\n").as_bytes())?;
        Ok(id)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: meta_path.clone(),
            source,
        })?;
        let cfg_path = dir.join(CONFIG_FILE);
        let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let mut config = TrainConfig::default();
        config.apply_text(&text)?;

        let bundle_path = dir.join(BUNDLE_FILE);
        let bytes = fs::read(&bundle_path).map_err(|e| Error::io(&bundle_path, e))?;
        if bundle_id(&bytes) != meta.checkpoint_id {
            return Err(Error::Format {
                path: bundle_path,
                reason: "weights do not match the recorded checkpoint id".into(),
            });
        }
        let (entries, _) = decode_bundle(&bytes, &bundle_path)?;
        let mut model = Model::new(config.model(meta.channels, meta.time, meta.n_subjects), 0)?;
        model.store.load_named(entries)?;
        Ok(Self {
            model,
            config,
            meta,
        })
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub l_main: f64,
    pub l_bridge: f64,
    pub l_distill: f64,
    pub l_total: f64,
    pub tau: f64,
    pub lambda2: f64,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.l_main,
            self.l_bridge,
            self.l_distill,
            self.l_total,
            self.tau,
            self.lambda2
        )
    }
}

#[derive(Debug, Clone)]
pub struct FitSummary {
    pub rows: Vec<LogRow>,
    /// Mean `L_main` of each epoch.
    pub epoch_main: Vec<f64>,
    pub checkpoint_id: String,
    pub checkpoint_dir: PathBuf,
    pub model: Model,
}

fn round_params(model: &mut Model) {
    for p in model.store.params_mut() {
        p.value.round_to_f32();
    }
}

/// Trains on the training split of `data` and leaves the final checkpoint
/// and `train_log.csv` in `config.ckpt`.
pub fn fit(config: &TrainConfig, data: &Dataset) -> Result<FitSummary> {
    fit_with_progress(config, data, |_, _| {})
}

/// [`fit`] with a callback after every epoch receiving the epoch index and
/// its mean `L_main`.
pub fn fit_with_progress(
    config: &TrainConfig,
    data: &Dataset,
    mut progress: impl FnMut(usize, f64),
) -> Result<FitSummary> {
    config.validate()?;
    let m = &data.manifest;
    if config.embed_dim != m.dim {
        return Err(Error::Config(format!(
            "embed_dim {} does not match the prototype dimension {} of the dataset",
            config.embed_dim, m.dim
        )));
    }
    let mut model = Model::new(config.model(m.channels, m.time, m.n_subjects), config.seed)?;
    if config.precision == DType::F32 {
        round_params(&mut model);
    }
    let mut opt = AdamW::new(config.optimizer(), &model.store)?;
    let weights = config.loss_weights();
    let ckpt = config.ckpt.clone();

    let mut rows = Vec::new();
    let mut epoch_main = Vec::new();
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let lambda2 = lambda2_schedule(epoch, config.epochs, weights.lambda2_max)?;
        let mut main_sum = 0.0;
        let mut n_steps = 0usize;
        for idx in data.batches(Split::Train, config.batch_size, config.seed, epoch as u64)? {
            let batch = data.batch(&idx)?;
            let graph = Graph::new();
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_d20b);
            rng.set_stream(step as u64);
            let ctx = Ctx::new(&graph, &model.store, Mode::Train, rng);
            let fault = |e: Error| match e {
                Error::NumericFault { op } => Error::NumericFault {
                    op: format!("step {step} (epoch {epoch}): {op}"),
                },
                other => other,
            };
            let fwd = model
                .forward(&ctx, &batch, data.bank(), &weights, lambda2)
                .map_err(fault)?;
            let l = &fwd.losses;
            let row = LogRow {
                epoch,
                step,
                l_main: l.main.value().item(),
                l_bridge: l.bridge.value().item(),
                l_distill: l.distill.value().item(),
                l_total: l.total.value().item(),
                tau: model.temperature.tau(&model.store),
                lambda2,
            };
            let grads = graph.backward(l.total).map_err(fault)?;
            let grads = ctx.param_grads(&grads);
            drop(ctx);
            opt.step(&mut model.store, &grads)?;
            model.temperature.clamp(&mut model.store);
            if config.precision == DType::F32 {
                round_params(&mut model);
            }
            if model.store.iter().any(|(_, p)| !p.value.is_finite()) {
                return Err(Error::NumericFault {
                    op: format!("step {step} (epoch {epoch}): parameter update"),
                });
            }
            main_sum += row.l_main;
            n_steps += 1;
            rows.push(row);
            step += 1;
        }
        let mean = main_sum / n_steps.max(1) as f64;
        epoch_main.push(mean);
        progress(epoch, mean);
        if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
            Checkpoint::save(
                &ckpt.join(format!("epoch_{:03}", epoch + 1)),
                &model,
                config,
                epoch + 1,
            )?;
        }
    }

    let checkpoint_id = Checkpoint::save(&ckpt, &model, config, config.epochs)?;
    let mut log = String::from(LOG_HEADER);
    log.push('\n');
    for r in &rows {
        log.push_str(&r.to_csv());
        log.push('\n');
    }
    write_atomic(&ckpt.join(LOG_FILE), log.as_bytes())?;
    Ok(FitSummary {
        rows,
        epoch_main,
        checkpoint_id,
        checkpoint_dir: ckpt,
        model,
    })
}
