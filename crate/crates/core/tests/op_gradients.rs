//! Central-difference checks of every backward rule at 64-bit precision.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stambridge::autodiff::{Graph, Var};
use stambridge::Tensor;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    // keep values away from 0 so relu and amplitude kinks are never straddled
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.2..1.5);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

/// `f` maps the inputs to some tensor; the checked scalar is its dot product
/// with a fixed random projection, so every output element contributes.
fn check<F>(inputs: Vec<Tensor>, seed: u64, f: F)
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let shape = f(&g, &vars).shape();
        random(&shape, &mut rng)
    };
    let scalar = |vals: &[Tensor]| -> f64 {
        let g = Graph::new();
        let vars: Vec<_> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars).value();
        out.data()
            .iter()
            .zip(probe.data())
            .map(|(a, b)| a * b)
            .sum()
    };

    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&g, &vars);
    let loss = out.mul(g.constant(probe.clone())).unwrap().sum().unwrap();
    let grads = g.backward(loss).unwrap();

    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[which]);
        for i in 0..input.len() {
            let mut plus = inputs.clone();
            plus[which].data_mut()[i] += STEP;
            let mut minus = inputs.clone();
            minus[which].data_mut()[i] -= STEP;
            let numeric = (scalar(&plus) - scalar(&minus)) / (2.0 * STEP);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                rel <= TOL,
                "input {which} element {i}: analytic {a} numeric {numeric} (rel {rel:e})"
            );
        }
    }
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[3, 4], &mut rng);
    check(vec![a.clone(), b.clone()], 2, |_, v| {
        v[0].add(v[1]).unwrap()
    });
    check(vec![a.clone(), b.clone()], 3, |_, v| {
        v[0].sub(v[1]).unwrap()
    });
    check(vec![a.clone(), b.clone()], 4, |_, v| {
        v[0].mul(v[1]).unwrap()
    });
    check(vec![a.clone()], 5, |_, v| v[0].scale(-1.7).unwrap());
    check(vec![a.clone()], 6, |_, v| v[0].gelu().unwrap());
    check(vec![a.clone()], 7, |_, v| v[0].sigmoid().unwrap());
    check(vec![a.clone()], 8, |_, v| v[0].relu().unwrap());
    check(vec![a.clone()], 9, |_, v| v[0].exp().unwrap());
    check(vec![a, Tensor::scalar(0.7)], 10, |_, v| {
        v[0].scale_by(v[1]).unwrap()
    });
}

#[test]
fn linear_algebra_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    check(
        vec![random(&[3, 4], &mut rng), random(&[4, 2], &mut rng)],
        12,
        |_, v| v[0].matmul(v[1]).unwrap(),
    );
    check(
        vec![random(&[2, 3, 4], &mut rng), random(&[2, 4, 5], &mut rng)],
        13,
        |_, v| v[0].bmm(v[1]).unwrap(),
    );
    check(vec![random(&[2, 3, 4], &mut rng)], 14, |_, v| {
        v[0].permute(&[2, 0, 1]).unwrap()
    });
    check(vec![random(&[2, 3, 4], &mut rng)], 15, |_, v| {
        v[0].reshape(&[6, 4]).unwrap().transpose().unwrap()
    });
    check(vec![random(&[3, 3], &mut rng)], 16, |_, v| {
        v[0].diag().unwrap()
    });
    check(vec![random(&[5, 3], &mut rng)], 17, |_, v| {
        v[0].index_select(&[4, 0, 4, 2]).unwrap()
    });
}

#[test]
fn reductions_and_broadcasts() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random(&[2, 3, 5], &mut rng);
    for axis in 0..3 {
        check(vec![x.clone()], 22 + axis as u64, move |_, v| {
            v[0].mean_axis(axis).unwrap()
        });
    }
    check(vec![x.clone()], 25, |_, v| v[0].sum().unwrap());
    check(vec![x.clone()], 26, |_, v| v[0].mean().unwrap());
    check(vec![x.clone(), random(&[5], &mut rng)], 27, |_, v| {
        v[0].add_bias(v[1]).unwrap()
    });
    check(vec![x.clone(), random(&[2, 3, 1], &mut rng)], 28, |_, v| {
        v[0].mul_broadcast(v[1]).unwrap()
    });
    check(vec![x.clone(), random(&[2, 1, 5], &mut rng)], 29, |_, v| {
        v[0].mul_broadcast(v[1]).unwrap()
    });
    check(vec![x, random(&[2, 3, 2], &mut rng)], 30, |_, v| {
        v[0].concat(v[1]).unwrap()
    });
}

#[test]
fn normalizations() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = random(&[3, 6], &mut rng);
    for axis in 0..2 {
        check(vec![x.clone()], 32 + axis as u64, move |_, v| {
            v[0].softmax(axis).unwrap()
        });
        check(vec![x.clone()], 34 + axis as u64, move |_, v| {
            v[0].log_softmax(axis).unwrap()
        });
    }
    check(
        vec![x.clone(), random(&[6], &mut rng), random(&[6], &mut rng)],
        36,
        |_, v| v[0].layer_norm(v[1], v[2]).unwrap(),
    );
    check(vec![x], 37, |_, v| v[0].l2_normalize().unwrap());
}

#[test]
fn signal_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    check(vec![random(&[2, 3, 16], &mut rng)], 42, |_, v| {
        v[0].rfft_amplitude().unwrap()
    });
    check(vec![random(&[1, 2, 15], &mut rng)], 43, |_, v| {
        v[0].rfft_amplitude().unwrap()
    });
    check(
        vec![random(&[2, 3, 12], &mut rng), random(&[5], &mut rng)],
        44,
        |_, v| v[0].conv1d_same(v[1]).unwrap(),
    );
    check(
        vec![
            random(&[2, 3, 2, 10], &mut rng),
            random(&[3, 4], &mut rng),
            random(&[3], &mut rng),
        ],
        45,
        |_, v| v[0].conv_grouped(v[1], Some(v[2]), 0).unwrap(),
    );
    check(
        vec![
            random(&[2, 3, 7], &mut rng),
            random(&[4], &mut rng),
            random(&[4], &mut rng),
        ],
        46,
        |_, v| v[0].pointwise_maps(v[1], v[2]).unwrap(),
    );
    check(vec![random(&[2, 3, 11], &mut rng)], 47, |_, v| {
        v[0].avg_pool(3).unwrap()
    });
}

#[test]
fn dropout_mask_is_differentiated_as_a_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let x = random(&[4, 8], &mut rng);
    check(vec![x], 52, |_, v| {
        let mut r = ChaCha8Rng::seed_from_u64(99);
        v[0].dropout(0.4, true, &mut r).unwrap()
    });
}

#[test]
fn square_gradient() {
    let g = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0));
    let y = x.mul(x).unwrap();
    assert_eq!(g.backward(y).unwrap().get(x).unwrap().item(), 6.0);
}

#[test]
fn detach_absorbs_gradient() {
    let g = Graph::new();
    let w = g.leaf(Tensor::new(&[2], vec![1.5, -0.5]).unwrap());
    let u = g.leaf(Tensor::new(&[2], vec![0.3, 0.2]).unwrap());
    let h = w.gelu().unwrap();
    let y = h
        .detach()
        .mul(u)
        .unwrap()
        .add(h.scale(0.0).unwrap())
        .unwrap();
    let grads = g.backward(y.sum().unwrap()).unwrap();
    assert!(grads.get_or_zeros(w).data().iter().all(|&v| v == 0.0));
    assert!(grads.get(u).is_some());
}

#[test]
fn backward_contracts() {
    let g = Graph::new();
    let x = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
    let y = x.scale(2.0).unwrap();
    assert!(matches!(g.backward(y), Err(stambridge::Error::Contract(_))));
    let s = y.sum().unwrap();
    g.backward(s).unwrap();
    assert!(matches!(
        g.backward(s),
        Err(stambridge::Error::GraphState(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_lies_on_simplex(v in prop::collection::vec(-30.0f64..30.0, 1..12), c in -50.0f64..50.0) {
        let g = Graph::new();
        let n = v.len();
        let x = g.constant(Tensor::new(&[n], v.clone()).unwrap());
        let s = x.softmax(0).unwrap().value();
        prop_assert!(s.data().iter().all(|&p| p > 0.0));
        prop_assert!((s.sum() - 1.0).abs() < 1e-6);
        let shifted = g.constant(Tensor::new(&[n], v.iter().map(|a| a + c).collect()).unwrap());
        let s2 = shifted.softmax(0).unwrap().value();
        for (a, b) in s.data().iter().zip(s2.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_and_rfft_keep_batch_and_channels(b in 1usize..4, c in 1usize..5, t in 7usize..40) {
        let g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[b, c, t], |i| (i as f64 * 0.37).sin()));
        let k = g.constant(Tensor::full(&[7], 0.1));
        prop_assert_eq!(x.conv1d_same(k).unwrap().shape(), vec![b, c, t]);
        prop_assert_eq!(x.rfft_amplitude().unwrap().shape(), vec![b, c, t / 2 + 1]);
    }
}
