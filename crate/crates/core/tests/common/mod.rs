#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stambridge::autodiff::Graph;
use stambridge::encoder::EegBatch;
use stambridge::model::{Model, ModelConfig};
use stambridge::nn::{normal_tensor, Ctx, Mode};
use stambridge::Tensor;

pub struct Check {
    pub name: &'static str,
    pub err: f64,
    pub tol: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.err <= self.tol
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn row_sum_err(t: &Tensor, width: usize) -> f64 {
    t.data()
        .chunks(width)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn norm_err(t: &Tensor) -> f64 {
    let d = *t.shape().last().unwrap();
    t.data()
        .chunks(d)
        .map(|r| (r.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs())
        .fold(0.0, f64::max)
}

pub fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = normal_tensor(&[n, d], 1.0, rng);
    for row in t.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    t
}

/// Small trial shapes with the embedding width under test.
pub fn config_with_dim(dim: usize) -> ModelConfig {
    ModelConfig {
        embed_dim: dim,
        ..ModelConfig::tiny()
    }
}

/// The algebraic invariants of the model for one configuration and seed.
pub fn invariant_suite(dim: usize, seed: u64) -> Vec<Check> {
    let cfg = config_with_dim(dim);
    let mut model = Model::new(cfg.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let b = 3;
    let batch = EegBatch {
        x: normal_tensor(&[b, cfg.channels, cfg.time], 1.0, &mut rng),
        subject_ids: vec![0, 1, 0],
        labels: vec![0, 1, 2],
    };
    let mut checks = Vec::new();

    // Fresh model: routing is exactly uniform and Proj is the identity.
    {
        let g = Graph::new();
        let ctx = Ctx::new(&g, &model.store, Mode::Eval, ChaCha8Rng::seed_from_u64(0));
        let z = model.encoder.encode(&ctx, &batch).unwrap();
        let routing = model.bridge.routing_weights(&ctx, z).unwrap().value();
        checks.push(Check {
            name: "routing is exactly 1/2 at zero init",
            err: routing
                .data()
                .iter()
                .map(|v| (v - 0.5).abs())
                .fold(0.0, f64::max),
            tol: 0.0,
        });
        let proj = model.bridge.aux_projection(&ctx, z).unwrap().value();
        checks.push(Check {
            name: "Proj is the identity at init",
            err: max_abs_diff(proj.data(), z.value().data()),
            tol: 0.0,
        });
    }

    // Move every zero-initialized tensor so the remaining checks see a
    // generic model.
    for p in model.store.params_mut() {
        if p.value.data().iter().all(|&v| v == 0.0) {
            let shape = p.value.shape().to_vec();
            p.value = normal_tensor(&shape, 0.3, &mut rng);
        }
    }
    let image = unit_rows(5, dim, &mut rng);
    let text = unit_rows(5, dim, &mut rng);
    let g = Graph::new();
    let ctx = Ctx::new(
        &g,
        &model.store,
        Mode::Train,
        ChaCha8Rng::seed_from_u64(seed),
    );

    let logits = g.constant(normal_tensor(&[4, 7], 3.0, &mut rng));
    let sm = logits.softmax(1).unwrap().value();
    let outside = sm.data().iter().any(|&v| !(v > 0.0 && v < 1.0));
    checks.push(Check {
        name: "softmax rows lie on the simplex",
        err: if outside {
            f64::INFINITY
        } else {
            row_sum_err(&sm, 7)
        },
        tol: 1e-12,
    });

    let x = model.encoder.subject_linear(&ctx, &batch).unwrap();
    let stam = model.encoder.stam.forward(&ctx, x).unwrap();
    checks.push(Check {
        name: "STAM fusion weights sum to 1",
        err: row_sum_err(&stam.fusion_weights.value(), 2),
        tol: 1e-12,
    });
    checks.push(Check {
        name: "STAM preserves shape",
        err: if stam.fused.shape() == x.shape() {
            0.0
        } else {
            1.0
        },
        tol: 0.0,
    });

    let z = model.encoder.encode(&ctx, &batch).unwrap();
    let routing = model.bridge.routing_weights(&ctx, z).unwrap().value();
    checks.push(Check {
        name: "routing rows sum to 1",
        err: row_sum_err(&routing, 2),
        tol: 1e-12,
    });
    let h = model.bridge.madr_attention(&ctx, z, &image, &text).unwrap();
    let v = ctx.constant(image.select_rows(&[0, 1, 2]).unwrap());
    let f = model.bridge.bridge_fuse(&ctx, h, v).unwrap().value();
    checks.push(Check {
        name: "f_bridge has unit norm",
        err: norm_err(&f),
        tol: 1e-12,
    });

    // Channel permutation commutes with the inverted-transformer block.
    let block = &model.encoder.blocks[0];
    let perm: Vec<usize> = (0..cfg.channels).rev().collect();
    let permute_channels = |t: &Tensor| -> Tensor {
        let (c, tt) = (cfg.channels, cfg.time);
        Tensor::from_fn(t.shape(), |i| {
            let (bi, rest) = (i / (c * tt), i % (c * tt));
            let (ch, ti) = (rest / tt, rest % tt);
            t.data()[bi * c * tt + perm[ch] * tt + ti]
        })
    };
    let (y, _) = block.forward(&ctx, ctx.constant(batch.x.clone())).unwrap();
    let (yp, _) = block
        .forward(&ctx, ctx.constant(permute_channels(&batch.x)))
        .unwrap();
    checks.push(Check {
        name: "iTransformer is channel-permutation equivariant",
        err: max_abs_diff(permute_channels(&y.value()).data(), yp.value().data()),
        tol: 1e-10,
    });

    let ln_in = g.constant(normal_tensor(&[6, 33], 4.0, &mut rng));
    let ones = g.constant(Tensor::full(&[33], 1.0));
    let zeros = g.constant(Tensor::zeros(&[33]));
    let ln = ln_in.layer_norm(ones, zeros).unwrap().value();
    let mut ln_err: f64 = 0.0;
    for row in ln.data().chunks(33) {
        let mean = row.iter().sum::<f64>() / 33.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 33.0;
        ln_err = ln_err.max(mean.abs()).max((var - 1.0).abs());
    }
    checks.push(Check {
        name: "layer norm has mean 0 and variance 1",
        err: ln_err,
        tol: 1e-6,
    });
    checks
}
