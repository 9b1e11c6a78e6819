//! Symmetric InfoNCE with a learnable temperature, and the three-term
//! training objective with a linearly warmed-up distillation weight.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const TAU_INIT: f64 = 0.07;
/// Upper bound on the logit scale `1/τ`.
pub const MAX_LOGIT_SCALE: f64 = 100.0;
const NORM_TOL: f64 = 1e-4;

/// Weights of the main, bridge and distillation terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2_max: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda0: 0.99,
            lambda1: 0.5,
            lambda2_max: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda0, self.lambda1, self.lambda2_max]
            .iter()
            .any(|w| !w.is_finite() || *w < 0.0)
        {
            return Err(Error::Config(format!(
                "loss weights must be >= 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Distillation weight at `epoch`: a straight line from 0 at the first
/// epoch to `max` at the last. A single-epoch run stays at 0.
pub fn lambda2_schedule(epoch: usize, total_epochs: usize, max: f64) -> Result<f64> {
    if total_epochs == 0 {
        return Err(Error::Config("epoch count must be positive".into()));
    }
    if epoch >= total_epochs {
        return Err(Error::Config(format!(
            "epoch {epoch} outside 0..{total_epochs}"
        )));
    }
    if total_epochs == 1 {
        return Ok(0.0);
    }
    // the ratio is exactly 1 at the last epoch, so the endpoint is exact
    Ok(max * (epoch as f64 / (total_epochs - 1) as f64))
}

/// Learnable temperature stored as `log τ`.
#[derive(Debug, Clone, Copy)]
pub struct Temperature {
    pub log_tau: ParamId,
}

impl Temperature {
    pub fn new(store: &mut ParamStore) -> Self {
        Self {
            log_tau: store.add("temperature.log_tau", Tensor::scalar(TAU_INIT.ln()), false),
        }
    }

    pub fn tau(&self, store: &ParamStore) -> f64 {
        store.get(self.log_tau).item().exp()
    }

    /// Logit scale `1/τ` as a graph value.
    pub fn logit_scale<'g>(&self, ctx: &Ctx<'g>) -> Result<Var<'g>> {
        ctx.param(self.log_tau).scale(-1.0)?.exp()
    }

    /// Raises `τ` back to `1/MAX_LOGIT_SCALE` if an update pushed it lower.
    pub fn clamp(&self, store: &mut ParamStore) {
        let floor = (1.0 / MAX_LOGIT_SCALE).ln();
        let v = store.get_mut(self.log_tau);
        if v.data()[0] < floor {
            v.data_mut()[0] = floor;
        }
    }
}

fn check_unit_rows(name: &str, t: &Tensor) -> Result<()> {
    let d = *t.shape().last().unwrap();
    for (i, row) in t.data().chunks(d).enumerate() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > NORM_TOL {
            return Err(Error::Contract(format!(
                "{name} row {i} has norm {n}; InfoNCE inputs must be unit-norm"
            )));
        }
    }
    Ok(())
}

/// `½·(CE over rows + CE over columns)` of `Z·Vᵀ·scale` with matched pairs
/// on the diagonal. Repeated classes inside a batch count as negatives.
pub fn info_nce_symmetric<'g>(z: Var<'g>, v: Var<'g>, logit_scale: Var<'g>) -> Result<Var<'g>> {
    let (zs, vs) = (z.shape(), v.shape());
    if zs.len() != 2 || zs != vs {
        return Err(Error::ShapeMismatch {
            op: "info_nce",
            lhs: zs,
            rhs: vs,
        });
    }
    check_unit_rows("Z", &z.value())?;
    check_unit_rows("V", &v.value())?;
    let logits = z.matmul(v.transpose()?)?.scale_by(logit_scale)?;
    let rows = logits.log_softmax(1)?.diag()?.mean()?;
    let cols = logits.log_softmax(0)?.diag()?.mean()?;
    rows.add(cols)?.scale(-0.5)
}

/// Unit-norm embeddings entering the objective.
pub struct LossInputs<'g> {
    pub z_eeg: Var<'g>,
    pub f_bridge: Var<'g>,
    pub v: Var<'g>,
    pub proj: Var<'g>,
    /// Fixed distillation target replacing `stopgrad(f_bridge)`. Only the
    /// gradient checker sets this, to hold the target still while it
    /// perturbs parameters.
    pub distill_target: Option<Var<'g>>,
}

pub struct LossTerms<'g> {
    pub main: Var<'g>,
    pub bridge: Var<'g>,
    pub distill: Var<'g>,
    pub total: Var<'g>,
}

/// `λ0·L(z, v) + λ1·L(f, v) + λ2·L(Proj(z), stopgrad(f))`, one shared
/// temperature.
pub fn total_loss<'g>(
    ctx: &Ctx<'g>,
    inputs: &LossInputs<'g>,
    temperature: &Temperature,
    weights: &LossWeights,
    lambda2: f64,
) -> Result<LossTerms<'g>> {
    let scale = temperature.logit_scale(ctx)?;
    let main = info_nce_symmetric(inputs.z_eeg, inputs.v, scale)?;
    let bridge = info_nce_symmetric(inputs.f_bridge, inputs.v, scale)?;
    let target = inputs
        .distill_target
        .unwrap_or_else(|| inputs.f_bridge.detach());
    let distill = info_nce_symmetric(inputs.proj, target, scale)?;
    let total = main
        .scale(weights.lambda0)?
        .add(bridge.scale(weights.lambda1)?)?
        .add(distill.scale(lambda2)?)?;
    Ok(LossTerms {
        main,
        bridge,
        distill,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    fn unit(rows: Vec<Vec<f64>>) -> Tensor {
        let d = rows[0].len();
        let n = rows.len();
        let flat = rows
            .into_iter()
            .flat_map(|r| {
                let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.into_iter().map(move |v| v / norm)
            })
            .collect();
        Tensor::new(&[n, d], flat).unwrap()
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let g = Graph::new();
        for tau in [0.01, 0.07, 1.0] {
            let z = g.constant(unit(vec![vec![0.3, -0.2, 0.9]]));
            let v = g.constant(unit(vec![vec![-0.5, 0.1, 0.2]]));
            let s = g.constant(Tensor::scalar(1.0 / tau));
            let l = info_nce_symmetric(z, v, s).unwrap().value().item();
            assert_eq!(l, 0.0);
        }
    }

    #[test]
    fn identity_pairs_closed_form() {
        let g = Graph::new();
        let e = g.constant(Tensor::eye(2));
        let l = info_nce_symmetric(e, e, g.constant(Tensor::scalar(1.0)))
            .unwrap()
            .value()
            .item();
        let want = (1.0 + (-1.0f64).exp()).ln();
        assert!((l - want).abs() < 1e-12, "{l} vs {want}");
        assert!((want - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn rejects_unnormalized_rows() {
        let g = Graph::new();
        let z = g.constant(Tensor::full(&[2, 2], 1.0));
        let s = g.constant(Tensor::scalar(1.0));
        assert!(matches!(
            info_nce_symmetric(z, z, s),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        assert_eq!(lambda2_schedule(0, 40, 0.2).unwrap(), 0.0);
        assert_eq!(lambda2_schedule(39, 40, 0.2).unwrap(), 0.2);
        let mid = lambda2_schedule(20, 40, 0.2).unwrap();
        assert!((mid - 0.2 * 20.0 / 39.0).abs() < 1e-15);
        assert!((mid - 0.10256).abs() < 1e-5);
        assert!(lambda2_schedule(40, 40, 0.2).is_err());
        assert_eq!(lambda2_schedule(0, 1, 0.2).unwrap(), 0.0);
        assert!(lambda2_schedule(0, 0, 0.2).is_err());
    }

    #[test]
    fn temperature_starts_at_007_and_clamps() {
        let mut store = ParamStore::new();
        let t = Temperature::new(&mut store);
        assert!((t.tau(&store) - 0.07).abs() < 1e-15);
        *store.get_mut(t.log_tau) = Tensor::scalar(-10.0);
        t.clamp(&mut store);
        assert!((1.0 / t.tau(&store) - MAX_LOGIT_SCALE).abs() < 1e-9);
    }
}
