//! Mid-feature bridge: per-head routed cross-attention from the EEG
//! embedding onto frozen image and text prototypes, a dropout-regularized
//! fusion that yields the unit-norm bridge target, and the auxiliary
//! residual projection used for distillation.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::{orthogonal_matrix, Ctx, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const MODALITIES: usize = 2;
pub const ROUTE_HIDDEN: usize = 128;

/// Frozen per-class embedding tables. Rows are unit-norm.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    image: Tensor,
    text: Tensor,
}

impl PrototypeBank {
    pub fn new(image: Tensor, text: Tensor) -> Result<Self> {
        if image.ndim() != 2 || image.shape() != text.shape() {
            return Err(Error::ShapeMismatch {
                op: "prototype_bank",
                lhs: image.shape().to_vec(),
                rhs: text.shape().to_vec(),
            });
        }
        for (name, t) in [("image", &image), ("text", &text)] {
            let d = t.shape()[1];
            for (i, row) in t.data().chunks(d).enumerate() {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if (n - 1.0).abs() > 1e-6 {
                    return Err(Error::Contract(format!(
                        "{name} prototype {i} has norm {n}, expected 1"
                    )));
                }
            }
        }
        Ok(Self { image, text })
    }

    pub fn image(&self) -> &Tensor {
        &self.image
    }

    pub fn text(&self) -> &Tensor {
        &self.text
    }

    pub fn n_classes(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.image.shape()[1]
    }

    /// Image and text rows for `classes`, in that order.
    pub fn subset(&self, classes: &[usize]) -> Result<(Tensor, Tensor)> {
        Ok((
            self.image.select_rows(classes)?,
            self.text.select_rows(classes)?,
        ))
    }
}

#[derive(Debug, Clone)]
pub struct BridgeParams {
    pub dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub route1: Linear,
    pub route2: Linear,
    pub query: Linear,
    /// Key projection per modality (image, text).
    pub keys: [Linear; MODALITIES],
    pub values: [Linear; MODALITIES],
    pub out: Linear,
    pub fuse_norm: LayerNorm,
    pub fuse1: Linear,
    pub fuse2: Linear,
    pub aux_w1: ParamId,
    pub aux_w2: ParamId,
    pub aux_scale: ParamId,
}

impl BridgeParams {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let (d, h) = (cfg.embed_dim, cfg.bridge_heads);
        if h == 0 || d % h != 0 {
            return Err(Error::Config(format!(
                "embedding dim {d} is not divisible by {h} bridge heads"
            )));
        }
        Ok(Self {
            dim: d,
            heads: h,
            dropout: cfg.bridge_dropout,
            route1: Linear::new(store, "bridge.route1", d, ROUTE_HIDDEN, rng),
            route2: Linear::zeros(store, "bridge.route2", ROUTE_HIDDEN, h * MODALITIES),
            query: Linear::new(store, "bridge.query", d, d, rng),
            keys: [
                Linear::new(store, "bridge.key_image", d, d, rng),
                Linear::new(store, "bridge.key_text", d, d, rng),
            ],
            values: [
                Linear::new(store, "bridge.value_image", d, d, rng),
                Linear::new(store, "bridge.value_text", d, d, rng),
            ],
            out: Linear::new(store, "bridge.out", d, d, rng),
            fuse_norm: LayerNorm::new(store, "bridge.fuse_norm", 2 * d),
            fuse1: Linear::new(store, "bridge.fuse1", 2 * d, d, rng),
            fuse2: Linear::new(store, "bridge.fuse2", d, d, rng),
            aux_w1: store.add("aux.w1", orthogonal_matrix(d, rng), true),
            aux_w2: store.add("aux.w2", orthogonal_matrix(d, rng), true),
            aux_scale: store.add("aux.scale", Tensor::scalar(0.0), false),
        })
    }

    /// Parameters that belong to the bridge proper (excluding the auxiliary
    /// projection head).
    pub fn bridge_param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        let mut lin = |l: &Linear| ids.extend([l.weight, l.bias]);
        lin(&self.route1);
        lin(&self.route2);
        lin(&self.query);
        self.keys.iter().for_each(&mut lin);
        self.values.iter().for_each(&mut lin);
        lin(&self.out);
        lin(&self.fuse1);
        lin(&self.fuse2);
        ids.extend([self.fuse_norm.gain, self.fuse_norm.bias]);
        ids
    }

    pub fn aux_param_ids(&self) -> Vec<ParamId> {
        vec![self.aux_w1, self.aux_w2, self.aux_scale]
    }

    fn check_query(&self, z: &Var<'_>) -> Result<usize> {
        let s = z.shape();
        if s.len() != 2 || s[1] != self.dim {
            return Err(Error::ShapeMismatch {
                op: "bridge",
                lhs: s,
                rhs: vec![self.dim],
            });
        }
        Ok(s[0])
    }

    /// `B×H×M` routing probabilities. The query is a single token per
    /// trial, so pooling over tokens is the identity.
    pub fn routing_weights<'g>(&self, ctx: &Ctx<'g>, z: Var<'g>) -> Result<Var<'g>> {
        let b = self.check_query(&z)?;
        let hidden = self.route1.forward(ctx, z)?.relu()?;
        self.route2
            .forward(ctx, hidden)?
            .reshape(&[b, self.heads, MODALITIES])?
            .softmax(2)
    }

    /// Per-head scaled dot-product attention of `z` onto one prototype
    /// table, before the output projection: `H×B×d_k`.
    fn head_attention<'g>(
        &self,
        ctx: &Ctx<'g>,
        z: Var<'g>,
        protos: &Tensor,
        modality: usize,
    ) -> Result<Var<'g>> {
        let b = self.check_query(&z)?;
        let n = protos.shape()[0];
        let (h, dk) = (self.heads, self.dim / self.heads);
        let kv = ctx.constant(protos.clone());
        let q = self
            .query
            .forward(ctx, z)?
            .reshape(&[b, h, dk])?
            .permute(&[1, 0, 2])?;
        let k = self.keys[modality]
            .forward(ctx, kv)?
            .reshape(&[n, h, dk])?
            .permute(&[1, 2, 0])?;
        let v = self.values[modality]
            .forward(ctx, kv)?
            .reshape(&[n, h, dk])?
            .permute(&[1, 0, 2])?;
        let attn = q.bmm(k)?.scale(1.0 / (dk as f64).sqrt())?.softmax(2)?;
        attn.bmm(v)
    }

    fn merge_heads<'g>(&self, ctx: &Ctx<'g>, heads: Var<'g>) -> Result<Var<'g>> {
        let b = heads.shape()[1];
        let merged = heads.permute(&[1, 0, 2])?.reshape(&[b, self.dim])?;
        self.out.forward(ctx, merged)
    }

    /// Plain multi-head cross-attention onto a single table.
    pub fn cross_attention<'g>(
        &self,
        ctx: &Ctx<'g>,
        z: Var<'g>,
        protos: &Tensor,
        modality: usize,
    ) -> Result<Var<'g>> {
        let heads = self.head_attention(ctx, z, protos, modality)?;
        self.merge_heads(ctx, heads)
    }

    /// Routed attention with explicit `B×H×M` routing weights. Each head's
    /// per-modality output is scaled by its own routing weight before the
    /// modalities are summed and the heads are merged.
    pub fn madr_attention_with_routing<'g>(
        &self,
        ctx: &Ctx<'g>,
        z: Var<'g>,
        image: &Tensor,
        text: &Tensor,
        routing: Var<'g>,
    ) -> Result<Var<'g>> {
        let b = self.check_query(&z)?;
        if routing.shape() != [b, self.heads, MODALITIES] {
            return Err(Error::ShapeMismatch {
                op: "madr_attention",
                lhs: routing.shape(),
                rhs: vec![b, self.heads, MODALITIES],
            });
        }
        // [B,H,M] -> [M,H,B]
        let by_modality = routing.permute(&[2, 1, 0])?;
        let mut total: Option<Var<'g>> = None;
        for (m, table) in [image, text].into_iter().enumerate() {
            let w = by_modality
                .index_select(&[m])?
                .reshape(&[self.heads, b, 1])?;
            let routed = self.head_attention(ctx, z, table, m)?.mul_broadcast(w)?;
            total = Some(match total {
                Some(acc) => acc.add(routed)?,
                None => routed,
            });
        }
        self.merge_heads(ctx, total.expect("two modalities"))
    }

    /// Routed attention with routing computed from `z`.
    pub fn madr_attention<'g>(
        &self,
        ctx: &Ctx<'g>,
        z: Var<'g>,
        image: &Tensor,
        text: &Tensor,
    ) -> Result<Var<'g>> {
        let routing = self.routing_weights(ctx, z)?;
        self.madr_attention_with_routing(ctx, z, image, text, routing)
    }

    /// `l2(MLP_fuse([h_attn ‖ dropout(v, p)]))`.
    pub fn bridge_fuse<'g>(&self, ctx: &Ctx<'g>, h_attn: Var<'g>, v: Var<'g>) -> Result<Var<'g>> {
        if h_attn.shape() != v.shape() {
            return Err(Error::ShapeMismatch {
                op: "bridge_fuse",
                lhs: h_attn.shape(),
                rhs: v.shape(),
            });
        }
        let dropped = ctx.dropout(v, self.dropout)?;
        let joined = self.fuse_norm.forward(ctx, h_attn.concat(dropped)?)?;
        let hidden = self.fuse1.forward(ctx, joined)?.gelu()?;
        self.fuse2.forward(ctx, hidden)?.l2_normalize()
    }

    /// `z + s·GELU(z·W1)·W2`; the identity while `s = 0`.
    pub fn aux_projection<'g>(&self, ctx: &Ctx<'g>, z: Var<'g>) -> Result<Var<'g>> {
        self.check_query(&z)?;
        let inner = z
            .matmul(ctx.param(self.aux_w1))?
            .gelu()?
            .matmul(ctx.param(self.aux_w2))?;
        z.add(inner.scale_by(ctx.param(self.aux_scale))?)
    }
}
