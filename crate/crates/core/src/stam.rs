//! Spectral-temporal amplitude-aware modulation.
//!
//! Two branches run on the same `B×C×T` input:
//!
//! * spectral: the mean rFFT amplitude of every channel feeds a bottleneck
//!   MLP whose sigmoid output scales each channel as a whole;
//! * temporal: two zero-padded convolutions (k = 7, 15) are GELU-activated,
//!   averaged, and scaled per time step by a second sigmoid MLP driven by
//!   the channel-mean feature trace.
//!
//! The two results are mixed with `softmax(alpha)` weights. Nothing here
//! masks the spectrum, so the spectral branch never moves energy in time.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, Ctx, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const REDUCTION: usize = 8;
pub const KERNEL_SIZES: [usize; 2] = [7, 15];
const CONV_INIT_STD: f64 = 0.02;
const GATE_OUT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct StamParams {
    pub channels: usize,
    pub time: usize,
    pub spec_fc1: Linear,
    pub spec_fc2: Linear,
    /// `(kernel length, kernel parameter)` for each temporal scale.
    pub temp_convs: Vec<(usize, ParamId)>,
    pub temp_fc1: Linear,
    pub temp_fc2: Linear,
    /// Fusion logits; the fusion weights are `softmax(alpha)`.
    pub alpha: ParamId,
}

/// Intermediate and final STAM tensors for one batch.
pub struct StamOutput<'g> {
    pub x_spec: Var<'g>,
    pub channel_weights: Var<'g>,
    pub x_temp: Var<'g>,
    pub temporal_weights: Var<'g>,
    pub fusion_weights: Var<'g>,
    pub fused: Var<'g>,
}

pub(crate) fn hidden_width(n: usize) -> usize {
    n.div_ceil(REDUCTION).max(1)
}

impl StamParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        time: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let largest = *KERNEL_SIZES.iter().max().unwrap();
        if time < largest {
            return Err(Error::Config(format!(
                "temporal branch needs at least {largest} time steps, got {time}"
            )));
        }
        let hc = hidden_width(channels);
        let ht = hidden_width(time);
        let spec_fc1 = Linear::new(store, &format!("{prefix}.spec_fc1"), channels, hc, rng);
        let spec_fc2 = Linear::with_weight(
            store,
            &format!("{prefix}.spec_fc2"),
            normal_tensor(&[hc, channels], GATE_OUT_INIT_STD, rng),
            channels,
        );
        let temp_convs = KERNEL_SIZES
            .iter()
            .map(|&k| {
                let id = store.add(
                    format!("{prefix}.conv{k}"),
                    normal_tensor(&[k], CONV_INIT_STD, rng),
                    true,
                );
                (k, id)
            })
            .collect();
        let temp_fc1 = Linear::new(store, &format!("{prefix}.temp_fc1"), time, ht, rng);
        let temp_fc2 = Linear::with_weight(
            store,
            &format!("{prefix}.temp_fc2"),
            normal_tensor(&[ht, time], GATE_OUT_INIT_STD, rng),
            time,
        );
        let alpha = store.add(format!("{prefix}.alpha"), Tensor::zeros(&[2]), false);
        Ok(Self {
            channels,
            time,
            spec_fc1,
            spec_fc2,
            temp_convs,
            temp_fc1,
            temp_fc2,
            alpha,
        })
    }

    fn check_input(&self, x: &Var<'_>) -> Result<(usize, usize, usize)> {
        let s = x.shape();
        if s.len() != 3 || s[1] != self.channels || s[2] != self.time {
            return Err(Error::Config(format!(
                "STAM configured for {}x{} inputs, got {s:?}",
                self.channels, self.time
            )));
        }
        Ok((s[0], s[1], s[2]))
    }

    /// Returns `(x_spec, w_c)` with `w_c: B×C` in `(0, 1)`.
    pub fn spectral_branch<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let (b, c, _) = self.check_input(&x)?;
        let descriptor = x.rfft_amplitude()?.mean_axis(2)?;
        let hidden = self.spec_fc1.forward(ctx, descriptor)?.gelu()?;
        let w_c = self.spec_fc2.forward(ctx, hidden)?.sigmoid()?;
        let x_spec = x.mul_broadcast(w_c.reshape(&[b, c, 1])?)?;
        Ok((x_spec, w_c))
    }

    /// Returns `(x_temp, w_t)` with `w_t: B×T` in `(0, 1)`.
    pub fn temporal_branch<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let (b, _, t) = self.check_input(&x)?;
        let mut features: Option<Var<'g>> = None;
        for &(_, kernel) in &self.temp_convs {
            let f = x.conv1d_same(ctx.param(kernel))?.gelu()?;
            features = Some(match features {
                Some(acc) => acc.add(f)?,
                None => f,
            });
        }
        let features = features
            .expect("at least one temporal kernel")
            .scale(1.0 / self.temp_convs.len() as f64)?;
        let descriptor = features.mean_axis(1)?;
        let hidden = self.temp_fc1.forward(ctx, descriptor)?.gelu()?;
        let w_t = self.temp_fc2.forward(ctx, hidden)?.sigmoid()?;
        let x_temp = features.mul_broadcast(w_t.reshape(&[b, 1, t])?)?;
        Ok((x_temp, w_t))
    }

    /// `softmax(alpha)[0]·x_spec + softmax(alpha)[1]·x_temp`; also returns
    /// the fusion weights.
    pub fn fuse<'g>(
        &self,
        ctx: &Ctx<'g>,
        x_spec: Var<'g>,
        x_temp: Var<'g>,
    ) -> Result<(Var<'g>, Var<'g>)> {
        if x_spec.shape() != x_temp.shape() {
            return Err(Error::ShapeMismatch {
                op: "stam_fuse",
                lhs: x_spec.shape(),
                rhs: x_temp.shape(),
            });
        }
        let lambda = ctx.param(self.alpha).softmax(0)?;
        let fused = x_spec
            .scale_by(lambda.index_select(&[0])?)?
            .add(x_temp.scale_by(lambda.index_select(&[1])?)?)?;
        Ok((fused, lambda))
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Result<StamOutput<'g>> {
        let (x_spec, channel_weights) = self.spectral_branch(ctx, x)?;
        let (x_temp, temporal_weights) = self.temporal_branch(ctx, x)?;
        let (fused, fusion_weights) = self.fuse(ctx, x_spec, x_temp)?;
        Ok(StamOutput {
            x_spec,
            channel_weights,
            x_temp,
            temporal_weights,
            fusion_weights,
            fused,
        })
    }
}
