//! Synthetic EEG-like trials with class-locked transients.
//!
//! Each class owns a latent code `u ∈ R^k`. The EEG template of a class is
//! `Σ_j u_j·atom_j`, where every atom is a Gaussian-windowed oscillation
//! (own frequency, latency and width) over a smooth bump of "occipital"
//! channels at the end of the montage. Image prototypes are
//! `normalize(G·u)` for a fixed orthonormal `G: d×k`; text prototypes are
//! the image prototypes rotated by a fixed orthogonal map. Both tables
//! therefore share geometry with the EEG templates, which is what makes
//! retrieval on unseen classes possible at all.
//!
//! A trial is `gain·M_s·template + noise` with a per-subject channel mixing
//! `M_s = I + 0.1·N(0, 1/C)` and white noise sized so that total signal
//! power over total noise power equals `snr_db`. The whole set is then
//! rescaled to unit variance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::orthogonal_matrix;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Classes seen during training.
    pub train_classes: usize,
    /// Additional classes held out for zero-shot evaluation.
    pub test_classes: usize,
    pub trials_per_class: usize,
    pub n_subjects: usize,
    pub channels: usize,
    pub time: usize,
    pub dim: usize,
    pub snr_db: f64,
    pub seed: u64,
    /// Dimension of the latent code shared by templates and prototypes.
    pub latent_dim: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_classes: 20,
            test_classes: 20,
            trials_per_class: 50,
            n_subjects: 1,
            channels: 63,
            time: 250,
            dim: 64,
            snr_db: 0.0,
            seed: 7,
            latent_dim: 12,
        }
    }
}

impl SynthConfig {
    pub fn n_classes(&self) -> usize {
        self.train_classes + self.test_classes
    }

    pub fn n_trials(&self) -> usize {
        self.n_classes() * self.trials_per_class
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.train_classes < 2 {
            return fail(format!(
                "need at least 2 classes, got {}",
                self.train_classes
            ));
        }
        if self.test_classes < 2 {
            return fail(format!(
                "need at least 2 held-out classes, got {}",
                self.test_classes
            ));
        }
        if self.dim < 8 {
            return fail(format!("embedding dim must be >= 8, got {}", self.dim));
        }
        if self.trials_per_class == 0 || self.n_subjects == 0 {
            return fail("trials per class and subject count must be positive".into());
        }
        if self.channels < 2 || self.time < 16 {
            return fail(format!(
                "trial shape {}x{} is too small",
                self.channels, self.time
            ));
        }
        if self.latent_dim == 0 {
            return fail("latent dim must be positive".into());
        }
        if !self.snr_db.is_finite() {
            return fail(format!("snr_db must be finite, got {}", self.snr_db));
        }
        Ok(())
    }
}

/// Generated arrays, in memory.
#[derive(Debug, Clone)]
pub struct SynthData {
    /// `N×C×T`, stored at single precision.
    pub trials: Vec<f32>,
    pub labels: Vec<usize>,
    pub subjects: Vec<usize>,
    /// `K×d`, unit rows, `K` = train + test classes.
    pub image_prototypes: Tensor,
    pub text_prototypes: Tensor,
    /// `10·log10(Σ signal² / Σ noise²)` of what was actually drawn.
    pub empirical_snr_db: f64,
}

struct Atom {
    spatial: Vec<f64>,
    temporal: Vec<f64>,
}

fn draw_atoms(cfg: &SynthConfig, k: usize, rng: &mut ChaCha8Rng) -> Vec<Atom> {
    let (c, t) = (cfg.channels, cfg.time);
    let width = c.div_ceil(4).max(2).min(c);
    let first = c - width;
    (0..k)
        .map(|_| {
            let center = first as f64 + rng.random::<f64>() * (width - 1) as f64;
            let spread = (width as f64 / 4.0).max(1.0);
            let spatial = (0..c)
                .map(|ch| {
                    if ch < first {
                        0.0
                    } else {
                        let d = (ch as f64 - center) / spread;
                        (-0.5 * d * d).exp()
                    }
                })
                .collect();
            let freq = rng.random_range(4.0..30.0);
            let latency = rng.random_range(0.15..0.6) * t as f64;
            let sigma = rng.random_range(0.04..0.1) * t as f64;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let temporal = (0..t)
                .map(|s| {
                    let x = s as f64;
                    let env = (-0.5 * ((x - latency) / sigma).powi(2)).exp();
                    env * (std::f64::consts::TAU * freq * x / t as f64 + phase).cos()
                })
                .collect();
            Atom { spatial, temporal }
        })
        .collect()
}

fn normalize_rows(t: &mut Tensor) {
    let d = t.shape()[1];
    for row in t.data_mut().chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
}

/// Draws the full dataset. Deterministic given `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n_cls, c, t, d) = (cfg.n_classes(), cfg.channels, cfg.time, cfg.dim);
    let k = cfg.latent_dim.min(d);

    let latents = Tensor::from_fn(&[n_cls, k], |_| rng.sample::<f64, _>(StandardNormal));
    let basis = orthogonal_matrix(d, &mut rng);
    let mut image = Tensor::from_fn(&[n_cls, d], |i| {
        let (cls, row) = (i / d, i % d);
        (0..k)
            .map(|j| basis.data()[row * d + j] * latents.data()[cls * k + j])
            .sum()
    });
    normalize_rows(&mut image);
    let rotation = orthogonal_matrix(d, &mut rng);
    let mut text = Tensor::zeros(&[n_cls, d]);
    crate::tensor::gemm_a_bt_acc(image.data(), rotation.data(), text.data_mut(), n_cls, d, d);
    normalize_rows(&mut text);

    let atoms = draw_atoms(cfg, k, &mut rng);
    let templates: Vec<Vec<f64>> = (0..n_cls)
        .map(|cls| {
            let mut tpl = vec![0.0; c * t];
            for (j, atom) in atoms.iter().enumerate() {
                let u = latents.data()[cls * k + j];
                for (ch, &s) in atom.spatial.iter().enumerate() {
                    if s == 0.0 {
                        continue;
                    }
                    let row = &mut tpl[ch * t..(ch + 1) * t];
                    row.iter_mut()
                        .zip(&atom.temporal)
                        .for_each(|(o, &a)| *o += u * s * a);
                }
            }
            tpl
        })
        .collect();

    let mixing: Vec<Tensor> = (0..cfg.n_subjects)
        .map(|_| {
            let std = 0.1 / (c as f64).sqrt();
            let mut m = Tensor::eye(c);
            m.data_mut()
                .iter_mut()
                .for_each(|v| *v += std * rng.sample::<f64, _>(StandardNormal));
            m
        })
        .collect();

    let n = cfg.n_trials();
    let mut clean = vec![0.0f64; n * c * t];
    let mut labels = Vec::with_capacity(n);
    let mut subjects = Vec::with_capacity(n);
    for (cls, template) in templates.iter().enumerate().take(n_cls) {
        for r in 0..cfg.trials_per_class {
            let i = labels.len();
            let s = r % cfg.n_subjects;
            let gain = 1.0 + 0.1 * rng.sample::<f64, _>(StandardNormal);
            let out = &mut clean[i * c * t..(i + 1) * c * t];
            crate::tensor::gemm_acc(mixing[s].data(), template, out, c, c, t);
            out.iter_mut().for_each(|v| *v *= gain);
            labels.push(cls);
            subjects.push(s);
        }
    }

    let signal_power = clean.iter().map(|v| v * v).sum::<f64>() / clean.len() as f64;
    if signal_power <= 0.0 {
        return Err(Error::DegenerateInput {
            op: "synth_generate",
            reason: "templates have zero energy".into(),
        });
    }
    let noise_std = (signal_power / 10f64.powf(cfg.snr_db / 10.0)).sqrt();
    let scale = 1.0 / (signal_power + noise_std * noise_std).sqrt();
    let (mut sig_sum, mut noise_sum) = (0.0, 0.0);
    let trials = clean
        .iter()
        .map(|&s| {
            let e = noise_std * rng.sample::<f64, _>(StandardNormal);
            sig_sum += s * s;
            noise_sum += e * e;
            ((s + e) * scale) as f32
        })
        .collect();

    Ok(SynthData {
        trials,
        labels,
        subjects,
        image_prototypes: image,
        text_prototypes: text,
        empirical_snr_db: 10.0 * (sig_sum / noise_sum).log10(),
    })
}
