//! CSV dumps of embeddings, channel weights and prototypes for plotting.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Ctx, Mode};

const CHUNK: usize = 64;

fn header(prefix: &str, cols: &[&str], n: usize) -> String {
    let mut h = cols.join(",");
    for i in 0..n {
        let _ = write!(h, ",{prefix}{i}");
    }
    h.push('\n');
    h
}

fn push_row(out: &mut String, lead: &[String], values: &[f64]) {
    out.push_str(&lead.join(","));
    for v in values {
        let _ = write!(out, ",{v}");
    }
    out.push('\n');
}

/// Writes `embeddings.csv` (unit-norm `z_eeg` of every held-out trial),
/// `channel_weights.csv` (STAM `w_c` of the same trials) and
/// `prototypes.csv` (both prototype tables). Returns the written paths.
pub fn export_artifacts(model: &Model, data: &Dataset, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let idx = data.split_indices(Split::Test);
    let (d, c) = (model.config.embed_dim, model.config.channels);
    let mut emb = header("z", &["trial", "label", "subject"], d);
    let mut chw = header("w", &["trial", "label", "subject"], c);
    for chunk in idx.chunks(CHUNK) {
        let batch = data.batch(chunk)?;
        let graph = Graph::new();
        let ctx = Ctx::new(
            &graph,
            &model.store,
            Mode::Eval,
            ChaCha8Rng::seed_from_u64(0),
        );
        let (z, trace) = model.encoder.encode_traced(&ctx, &batch)?;
        let z = z.l2_normalize()?.value();
        let w = trace.stam.channel_weights.value();
        for (r, &i) in chunk.iter().enumerate() {
            let lead = [
                i.to_string(),
                batch.labels[r].to_string(),
                batch.subject_ids[r].to_string(),
            ];
            push_row(&mut emb, &lead, z.row(r));
            push_row(&mut chw, &lead, w.row(r));
        }
    }
    let bank = data.bank();
    let mut protos = header("p", &["class", "modality", "held_out"], bank.dim());
    for (name, table) in [("image", bank.image()), ("text", bank.text())] {
        for k in 0..bank.n_classes() {
            let held = data.manifest.test_classes.contains(&k);
            push_row(
                &mut protos,
                &[k.to_string(), name.to_string(), (held as u8).to_string()],
                table.row(k),
            );
        }
    }
    let mut written = Vec::new();
    for (file, text) in [
        ("embeddings.csv", emb),
        ("channel_weights.csv", chw),
        ("prototypes.csv", protos),
    ] {
        let path = out.join(file);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
