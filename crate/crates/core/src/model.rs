//! Model dimensions and the assembled encoder + bridge + temperature.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bridge::{BridgeParams, PrototypeBank};
use crate::encoder::{EegBatch, EncoderParams};
use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamId, ParamStore};
use crate::objectives::{self, LossTerms, LossWeights, Temperature};
use crate::tensor::Tensor;

/// Every size that shapes the parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub time: usize,
    pub n_subjects: usize,
    pub embed_dim: usize,
    pub blocks: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn: usize,
    pub patch_maps: usize,
    pub patch_kernel: usize,
    pub patch_pool: usize,
    pub head_dropout: f64,
    pub bridge_heads: usize,
    pub bridge_dropout: f64,
}

impl Default for ModelConfig {
    /// Full-size shapes: 63 channels, 250 samples, 1024-d embedding.
    fn default() -> Self {
        Self {
            channels: 63,
            time: 250,
            n_subjects: 1,
            embed_dim: 1024,
            blocks: 1,
            d_model: 128,
            heads: 4,
            ffn: 256,
            patch_maps: 8,
            patch_kernel: 25,
            patch_pool: 5,
            head_dropout: 0.25,
            bridge_heads: 4,
            bridge_dropout: 0.4,
        }
    }
}

impl ModelConfig {
    /// Laptop-scale model on the full trial shape.
    pub fn desk() -> Self {
        Self {
            embed_dim: 64,
            d_model: 32,
            ffn: 64,
            ..Self::default()
        }
    }

    /// Smallest shapes that exercise every layer; used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            channels: 8,
            time: 32,
            n_subjects: 2,
            embed_dim: 16,
            blocks: 1,
            d_model: 8,
            heads: 2,
            ffn: 16,
            patch_maps: 2,
            patch_kernel: 5,
            patch_pool: 2,
            head_dropout: 0.25,
            bridge_heads: 2,
            bridge_dropout: 0.4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.n_subjects == 0 || self.embed_dim == 0 {
            return fail("channels, subjects and embedding dim must be positive".into());
        }
        if self.time < 15 {
            return fail(format!(
                "time extent {} is below the largest kernel (15)",
                self.time
            ));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.bridge_heads == 0 || !self.embed_dim.is_multiple_of(self.bridge_heads) {
            return fail(format!(
                "embedding dim {} is not divisible by {} bridge heads",
                self.embed_dim, self.bridge_heads
            ));
        }
        if self.patch_kernel == 0 || self.patch_kernel > self.time {
            return fail(format!("patch kernel {} does not fit", self.patch_kernel));
        }
        if self.patch_pool == 0 || self.patch_pool > self.time - self.patch_kernel + 1 {
            return fail(format!("patch pool {} does not fit", self.patch_pool));
        }
        for (name, p) in [
            ("head_dropout", self.head_dropout),
            ("bridge_dropout", self.bridge_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return fail(format!("{name} must lie in [0, 1), got {p}"));
            }
        }
        Ok(())
    }
}

/// All trainable state: encoder, bridge, auxiliary head, temperature.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub bridge: BridgeParams,
    pub temperature: Temperature,
}

/// Forward results needed by the objective and by diagnostics.
pub struct Forward<'g> {
    pub z_eeg: crate::autodiff::Var<'g>,
    pub f_bridge: crate::autodiff::Var<'g>,
    pub losses: LossTerms<'g>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::new(&mut store, &config, &mut rng)?;
        let bridge = BridgeParams::new(&mut store, &config, &mut rng)?;
        let temperature = Temperature::new(&mut store);
        Ok(Self {
            config,
            store,
            encoder,
            bridge,
            temperature,
        })
    }

    /// Ids of the encoder's parameters, grouped by stage.
    pub fn encoder_groups(&self) -> Vec<(&'static str, Vec<ParamId>)> {
        let mut groups: Vec<(&'static str, Vec<ParamId>)> = vec![
            ("subject", vec![]),
            ("attention", vec![]),
            ("stam", vec![]),
            ("patch", vec![]),
            ("head", vec![]),
        ];
        for (id, p) in self.store.iter() {
            let slot = match p.name.split('.').nth(1) {
                Some("subject") => 0,
                Some(s) if s.starts_with("itx") => 1,
                Some("stam") => 2,
                Some("patch") => 3,
                Some("head") => 4,
                _ => continue,
            };
            if p.name.starts_with("encoder.") {
                groups[slot].1.push(id);
            }
        }
        groups
    }

    /// Encoder, bridge and all three contrastive terms for one batch.
    ///
    /// Keys and values of the routed attention are the prototypes of the
    /// distinct classes present in the batch.
    pub fn forward<'g>(
        &self,
        ctx: &Ctx<'g>,
        batch: &EegBatch,
        bank: &PrototypeBank,
        weights: &LossWeights,
        lambda2: f64,
    ) -> Result<Forward<'g>> {
        self.forward_with_target(ctx, batch, bank, weights, lambda2, None)
    }

    /// [`Model::forward`] with the distillation target pinned to `target`
    /// instead of the detached bridge output.
    pub fn forward_with_target<'g>(
        &self,
        ctx: &Ctx<'g>,
        batch: &EegBatch,
        bank: &PrototypeBank,
        weights: &LossWeights,
        lambda2: f64,
        target: Option<&Tensor>,
    ) -> Result<Forward<'g>> {
        let z = self.encoder.encode(ctx, batch)?;
        let mut classes = batch.labels.clone();
        classes.sort_unstable();
        classes.dedup();
        let (image_kv, text_kv) = bank.subset(&classes)?;
        let v = ctx.constant(bank.image().select_rows(&batch.labels)?);

        let h_attn = self.bridge.madr_attention(ctx, z, &image_kv, &text_kv)?;
        let f_bridge = self.bridge.bridge_fuse(ctx, h_attn, v)?;
        let proj = self.bridge.aux_projection(ctx, z)?;

        let losses = objectives::total_loss(
            ctx,
            &objectives::LossInputs {
                z_eeg: z.l2_normalize()?,
                f_bridge,
                v,
                proj: proj.l2_normalize()?,
                distill_target: target.map(|t| ctx.constant(t.clone())),
            },
            &self.temperature,
            weights,
            lambda2,
        )?;
        Ok(Forward {
            z_eeg: z,
            f_bridge,
            losses,
        })
    }

    /// Parameter tensors as `(name, tensor)` pairs, in registration order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect()
    }
}
