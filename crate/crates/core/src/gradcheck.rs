//! Finite-difference check of every parameter gradient of the full
//! objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::Graph;
use crate::bridge::PrototypeBank;
use crate::encoder::EegBatch;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{normal_tensor, Ctx, Mode};
use crate::objectives::LossWeights;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub batch: usize,
    pub n_classes: usize,
    pub tolerance: f64,
    pub step: f64,
    pub seed: u64,
    pub lambda2: f64,
    /// Scales the backward rule of one op, for the negative control.
    pub fault: Option<(&'static str, f64)>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::tiny(),
            batch: 4,
            n_classes: 6,
            tolerance: 1e-4,
            step: 1e-5,
            seed: 11,
            lambda2: LossWeights::default().lambda2_max,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DetachCheck {
    /// Largest |∂L_distill/∂θ| over bridge parameters; must be exactly 0.
    pub bridge_max_abs: f64,
    /// Auxiliary-projection parameters whose L_distill gradient is all zero.
    pub dead_aux_params: Vec<String>,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub precision: &'static str,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
    pub offenders: Vec<String>,
    pub detach: DetachCheck,
    pub passed: bool,
}

/// Denominator floor of [`relative_error`]. Central differences at
/// `h = 1e-5` on a loss of order 1 carry about `1e-10` of rounding noise,
/// so gradients smaller than this are in effect compared in absolute terms
/// at `tolerance · 1e-5`.
pub const REL_ERR_FLOOR: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

struct Problem {
    batch: EegBatch,
    bank: PrototypeBank,
    weights: LossWeights,
    lambda2: f64,
    dropout_seed: u64,
    target: Option<Tensor>,
}

fn unit_rows(t: &mut Tensor) {
    let d = t.shape()[1];
    for row in t.data_mut().chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
}

impl Problem {
    fn new(cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let m = &cfg.model;
        if cfg.batch < 2 || cfg.n_classes < cfg.batch {
            return Err(Error::Config(format!(
                "gradcheck needs 2 <= batch <= classes, got batch {} with {} classes",
                cfg.batch, cfg.n_classes
            )));
        }
        let x = normal_tensor(&[cfg.batch, m.channels, m.time], 1.0, rng);
        let mut image = normal_tensor(&[cfg.n_classes, m.embed_dim], 1.0, rng);
        let mut text = normal_tensor(&[cfg.n_classes, m.embed_dim], 1.0, rng);
        unit_rows(&mut image);
        unit_rows(&mut text);
        Ok(Self {
            batch: EegBatch {
                x,
                subject_ids: (0..cfg.batch).map(|i| i % m.n_subjects).collect(),
                labels: (0..cfg.batch).collect(),
            },
            bank: PrototypeBank::new(image, text)?,
            weights: LossWeights::default(),
            lambda2: cfg.lambda2,
            dropout_seed: rng.random(),
            target: None,
        })
    }

    /// Total loss in train mode. The dropout stream is rebuilt from the same
    /// seed on every call, so masks are identical across evaluations.
    fn loss(
        &self,
        model: &Model,
        fault: Option<(&'static str, f64)>,
        grads: bool,
    ) -> Result<(f64, Vec<Tensor>)> {
        let graph = Graph::new();
        if let Some((op, factor)) = fault {
            graph.inject_backward_fault(op, factor);
        }
        let ctx = Ctx::new(
            &graph,
            &model.store,
            Mode::Train,
            ChaCha8Rng::seed_from_u64(self.dropout_seed),
        );
        let fwd = model.forward_with_target(
            &ctx,
            &self.batch,
            &self.bank,
            &self.weights,
            self.lambda2,
            self.target.as_ref(),
        )?;
        let value = fwd.losses.total.value().item();
        if !grads {
            return Ok((value, Vec::new()));
        }
        let g = graph.backward(fwd.losses.total)?;
        Ok((value, ctx.param_grads(&g)))
    }

    fn bridge_output(&self, model: &Model) -> Result<Tensor> {
        let graph = Graph::new();
        let ctx = Ctx::new(
            &graph,
            &model.store,
            Mode::Train,
            ChaCha8Rng::seed_from_u64(self.dropout_seed),
        );
        let fwd = model.forward(&ctx, &self.batch, &self.bank, &self.weights, self.lambda2)?;
        let out = fwd.f_bridge.value().as_ref().clone();
        Ok(out)
    }

    fn detach(&self, model: &Model) -> Result<DetachCheck> {
        let graph = Graph::new();
        let ctx = Ctx::new(
            &graph,
            &model.store,
            Mode::Train,
            ChaCha8Rng::seed_from_u64(self.dropout_seed),
        );
        let fwd = model.forward(&ctx, &self.batch, &self.bank, &self.weights, self.lambda2)?;
        let g = graph.backward(fwd.losses.distill)?;
        let grads = ctx.param_grads(&g);
        let bridge_max_abs = model
            .bridge
            .bridge_param_ids()
            .iter()
            .map(|id| grads[id.index()].max_abs())
            .fold(0.0, f64::max);
        let dead_aux_params: Vec<String> = model
            .bridge
            .aux_param_ids()
            .iter()
            .filter(|id| grads[id.index()].max_abs() == 0.0)
            .map(|&id| model.store.name(id).to_string())
            .collect();
        Ok(DetachCheck {
            passed: bridge_max_abs == 0.0 && dead_aux_params.is_empty(),
            bridge_max_abs,
            dead_aux_params,
        })
    }
}

/// Builds the model for `cfg.model`, moves every all-zero parameter off
/// zero (zero-initialized layers would otherwise hide whole branches), and
/// compares `backward()` with central differences on every scalar.
pub fn gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if !(cfg.step > 0.0 && cfg.tolerance > 0.0) {
        return Err(Error::Config(
            "gradcheck step and tolerance must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    for p in model.store.params_mut() {
        if p.value.data().iter().all(|&v| v == 0.0) {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.1 * rng.sample::<f64, _>(StandardNormal));
        }
    }
    let mut problem = Problem::new(cfg, &mut rng)?;
    let (_, analytic) = problem.loss(&model, cfg.fault, true)?;
    // Central differences would see parameters move the detached target;
    // freeze it at the base point so both sides differentiate the same
    // function.
    problem.target = Some(problem.bridge_output(&model)?);

    let mut params = Vec::with_capacity(analytic.len());
    let ids: Vec<_> = model.store.ids().collect();
    for (id, grad) in ids.into_iter().zip(&analytic) {
        let mut worst: f64 = 0.0;
        let mut worst_abs: f64 = 0.0;
        for j in 0..grad.len() {
            let orig = model.store.get(id).data()[j];
            model.store.get_mut(id).data_mut()[j] = orig + cfg.step;
            let (plus, _) = problem.loss(&model, None, false)?;
            model.store.get_mut(id).data_mut()[j] = orig - cfg.step;
            let (minus, _) = problem.loss(&model, None, false)?;
            model.store.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            worst = worst.max(relative_error(grad.data()[j], numeric));
            worst_abs = worst_abs.max((grad.data()[j] - numeric).abs());
        }
        params.push(ParamCheck {
            name: model.store.name(id).to_string(),
            numel: grad.len(),
            max_rel_err: worst,
            max_abs_err: worst_abs,
            passed: worst <= cfg.tolerance,
        });
    }
    let offenders: Vec<String> = params
        .iter()
        .filter(|p| !p.passed)
        .map(|p| p.name.clone())
        .collect();
    let detach = problem.detach(&model)?;
    Ok(GradCheckReport {
        precision: "f64",
        tolerance: cfg.tolerance,
        passed: offenders.is_empty() && detach.passed,
        params,
        offenders,
        detach,
    })
}
