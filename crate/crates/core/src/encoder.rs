//! EEG encoder: subject-specific channel mixing, inverted-transformer
//! blocks over channel tokens, STAM, a shallow convolutional patch
//! embedding, and a projection head.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::{normal_tensor, Ctx, LayerNorm, Linear, ParamId, ParamStore};
use crate::stam::{StamOutput, StamParams};
use crate::tensor::Tensor;

/// A batch of trials with their subject and class indices.
#[derive(Debug, Clone)]
pub struct EegBatch {
    /// `B×C×T`
    pub x: Tensor,
    pub subject_ids: Vec<usize>,
    pub labels: Vec<usize>,
}

impl EegBatch {
    pub fn len(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subject_ids.is_empty()
    }
}

/// Channel-token transformer block. Each channel's series is embedded to
/// `d_model`, channels attend to one another (pre-norm attention and
/// feed-forward, both residual), and the result is projected back to `T`
/// and added to the input. The back projection starts at zero, so a fresh
/// block is the identity.
#[derive(Debug, Clone)]
pub struct ITransformerBlock {
    pub heads: usize,
    pub d_model: usize,
    pub embed: Linear,
    pub norm1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub attn_out: Linear,
    pub norm2: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub norm_out: LayerNorm,
    pub back: Linear,
}

impl ITransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        time: usize,
        d_model: usize,
        heads: usize,
        ffn: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        let p = |s: &str| format!("{prefix}.{s}");
        Ok(Self {
            heads,
            d_model,
            embed: Linear::new(store, &p("embed"), time, d_model, rng),
            norm1: LayerNorm::new(store, &p("norm1"), d_model),
            q: Linear::new(store, &p("q"), d_model, d_model, rng),
            k: Linear::new(store, &p("k"), d_model, d_model, rng),
            v: Linear::new(store, &p("v"), d_model, d_model, rng),
            attn_out: Linear::new(store, &p("attn_out"), d_model, d_model, rng),
            norm2: LayerNorm::new(store, &p("norm2"), d_model),
            ffn1: Linear::new(store, &p("ffn1"), d_model, ffn, rng),
            ffn2: Linear::new(store, &p("ffn2"), ffn, d_model, rng),
            norm_out: LayerNorm::new(store, &p("norm_out"), d_model),
            back: Linear::zeros(store, &p("back"), d_model, time),
        })
    }

    /// Returns the block output and the `B×heads×C×C` attention weights.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let s = x.shape();
        let (b, c) = (s[0], s[1]);
        let (h, dk) = (self.heads, self.d_model / self.heads);
        let tokens = self.embed.forward(ctx, x)?;

        let split = |t: Var<'g>| -> Result<Var<'g>> {
            t.reshape(&[b, c, h, dk])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[b * h, c, dk])
        };
        let normed = self.norm1.forward(ctx, tokens)?;
        let q = split(self.q.forward(ctx, normed)?)?;
        let k = split(self.k.forward(ctx, normed)?)?;
        let v = split(self.v.forward(ctx, normed)?)?;
        let scores = q.bmm(k.transpose()?)?.scale(1.0 / (dk as f64).sqrt())?;
        let attn = scores.softmax(2)?;
        let mixed = attn
            .bmm(v)?
            .reshape(&[b, h, c, dk])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, c, self.d_model])?;
        let tokens = tokens.add(self.attn_out.forward(ctx, mixed)?)?;

        let normed = self.norm2.forward(ctx, tokens)?;
        let ff = self
            .ffn2
            .forward(ctx, self.ffn1.forward(ctx, normed)?.gelu()?)?;
        let tokens = tokens.add(ff)?;

        let back = self
            .back
            .forward(ctx, self.norm_out.forward(ctx, tokens)?)?;
        Ok((x.add(back)?, attn.reshape(&[b, h, c, c])?))
    }
}

/// Pointwise lift to `F` maps, per-map temporal convolution, average pool.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub maps: usize,
    pub kernel: usize,
    pub pool: usize,
    pub point_w: ParamId,
    pub point_b: ParamId,
    pub depth_w: ParamId,
    pub depth_b: ParamId,
}

impl PatchEmbed {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        maps: usize,
        kernel: usize,
        pool: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            maps,
            kernel,
            pool,
            point_w: store.add(
                format!("{prefix}.point_w"),
                normal_tensor(&[maps], 1.0, rng),
                true,
            ),
            point_b: store.add(format!("{prefix}.point_b"), Tensor::zeros(&[maps]), false),
            depth_w: store.add(
                format!("{prefix}.depth_w"),
                normal_tensor(&[maps, kernel], 1.0 / (kernel as f64).sqrt(), rng),
                true,
            ),
            depth_b: store.add(format!("{prefix}.depth_b"), Tensor::zeros(&[maps]), false),
        }
    }

    pub fn out_len(&self, time: usize) -> usize {
        (time - self.kernel + 1) / self.pool
    }

    /// `B×C×T` to flattened `B×(F·C·L)`.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let b = x.shape()[0];
        let lifted = x.pointwise_maps(ctx.param(self.point_w), ctx.param(self.point_b))?;
        let conv =
            lifted.conv_grouped(ctx.param(self.depth_w), Some(ctx.param(self.depth_b)), 0)?;
        let pooled = conv.avg_pool(self.pool)?;
        let flat = pooled.shape().iter().skip(1).product();
        pooled.reshape(&[b, flat])
    }
}

/// `Linear → GELU → Dropout → Linear → LayerNorm`.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub norm: LayerNorm,
    pub dropout: f64,
}

impl ProjectionHead {
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let h = self.fc1.forward(ctx, x)?.gelu()?;
        let h = ctx.dropout(h, self.dropout)?;
        self.norm.forward(ctx, self.fc2.forward(ctx, h)?)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub channels: usize,
    pub time: usize,
    pub embed_dim: usize,
    /// `S×C×C`, identity at init.
    pub subject_mats: ParamId,
    pub n_subjects: usize,
    pub blocks: Vec<ITransformerBlock>,
    pub stam: StamParams,
    pub patch: PatchEmbed,
    pub head: ProjectionHead,
}

/// Named stages of one encoder pass, in execution order.
pub struct EncoderTrace<'g> {
    pub stages: Vec<(&'static str, Var<'g>)>,
    pub attention: Vec<Var<'g>>,
    pub stam: StamOutput<'g>,
}

impl EncoderParams {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (c, t) = (cfg.channels, cfg.time);
        let eye = Tensor::eye(c);
        let mut mats = Vec::with_capacity(cfg.n_subjects * c * c);
        for _ in 0..cfg.n_subjects {
            mats.extend_from_slice(eye.data());
        }
        let subject_mats = store.add(
            "encoder.subject",
            Tensor::new(&[cfg.n_subjects, c, c], mats)?,
            true,
        );
        let blocks = (0..cfg.blocks)
            .map(|i| {
                ITransformerBlock::new(
                    store,
                    &format!("encoder.itx{i}"),
                    t,
                    cfg.d_model,
                    cfg.heads,
                    cfg.ffn,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let stam = StamParams::new(store, "encoder.stam", c, t, rng)?;
        let patch = PatchEmbed::new(
            store,
            "encoder.patch",
            cfg.patch_maps,
            cfg.patch_kernel,
            cfg.patch_pool,
            rng,
        );
        let flat = cfg.patch_maps * c * patch.out_len(t);
        let head = ProjectionHead {
            fc1: Linear::new(store, "encoder.head.fc1", flat, cfg.embed_dim, rng),
            fc2: Linear::new(store, "encoder.head.fc2", cfg.embed_dim, cfg.embed_dim, rng),
            norm: LayerNorm::new(store, "encoder.head.norm", cfg.embed_dim),
            dropout: cfg.head_dropout,
        };
        Ok(Self {
            channels: c,
            time: t,
            embed_dim: cfg.embed_dim,
            subject_mats,
            n_subjects: cfg.n_subjects,
            blocks,
            stam,
            patch,
            head,
        })
    }

    fn check_batch(&self, batch: &EegBatch) -> Result<()> {
        let s = batch.x.shape();
        if s.len() != 3 || s[1] != self.channels || s[2] != self.time || s[0] != batch.len() {
            return Err(Error::Config(format!(
                "encoder expects B x {} x {} trials with B subject ids, got {s:?} and {} ids",
                self.channels,
                self.time,
                batch.len()
            )));
        }
        if let Some(&bad) = batch.subject_ids.iter().find(|&&s| s >= self.n_subjects) {
            return Err(Error::Lookup(format!(
                "subject id {bad} has no matrix ({} subjects)",
                self.n_subjects
            )));
        }
        Ok(())
    }

    /// `x'[b] = W_{s(b)} · x[b]` on the channel axis.
    pub fn subject_linear<'g>(&self, ctx: &Ctx<'g>, batch: &EegBatch) -> Result<Var<'g>> {
        self.check_batch(batch)?;
        let mats = ctx
            .param(self.subject_mats)
            .index_select(&batch.subject_ids)?;
        mats.bmm(ctx.constant(batch.x.clone()))
    }

    pub fn encode<'g>(&self, ctx: &Ctx<'g>, batch: &EegBatch) -> Result<Var<'g>> {
        Ok(self.encode_traced(ctx, batch)?.0)
    }

    /// Full pass returning `z_eeg: B×d` and the intermediate stages.
    pub fn encode_traced<'g>(
        &self,
        ctx: &Ctx<'g>,
        batch: &EegBatch,
    ) -> Result<(Var<'g>, EncoderTrace<'g>)> {
        let mut stages = Vec::new();
        let mut attention = Vec::new();
        let mut x = self.subject_linear(ctx, batch)?;
        stages.push(("subject_linear", x));
        for block in &self.blocks {
            let (y, attn) = block.forward(ctx, x)?;
            x = y;
            attention.push(attn);
            stages.push(("itransformer", x));
        }
        let stam = self.stam.forward(ctx, x)?;
        stages.push(("stam", stam.fused));
        let patches = self.patch.forward(ctx, stam.fused)?;
        stages.push(("patch_embed", patches));
        let z = self.head.forward(ctx, patches)?;
        stages.push(("head", z));
        Ok((
            z,
            EncoderTrace {
                stages,
                attention,
                stam,
            },
        ))
    }
}
