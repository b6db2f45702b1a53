//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 1 6`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use num_complex::Complex64;
use optikonv::dad::{decode, encode, plan_layout, DEFAULT_GUARD};
use optikonv::harness::*;
use optikonv::optical_layer::{forward_train, OpticalLayer, OpticalLayerSpec};
use optikonv::optics::propagate::{transfer_function, Fft2};
use optikonv::optics::retrieval::{psf_loss, random_phase};
use optikonv::optics::*;
use optikonv::tensor::gradcheck::differentiable_op_suite;
use optikonv::tensor::ops::conv2d;
use optikonv::tensor::{ParamStore, RunningStats, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = std::result::Result<String, String>;

fn check(pass: bool, detail: String) -> Outcome {
    if pass {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn optics_config(distance: f64, aperture: f64) -> OpticsConfig {
    OpticsConfig {
        mask_pixels: 64,
        pitch: 8e-6,
        distance,
        aperture,
        ..OpticsConfig::default()
    }
}

fn single_thread<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

fn dad_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut worst = 0.0f32;
    let cases = 120;
    for case in 0..cases {
        let kc = rng.random_range(1..=12);
        let k = [3, 5, 13][rng.random_range(0..3)];
        let c = rng.random_range(1..=3);
        let (h, w) = (rng.random_range(4..=32), rng.random_range(4..=32));
        let img = random(&[c, h, w], -1.0, 1.0, &mut rng);
        let kern = random(&[kc, k, k], -1.0, 1.0, &mut rng);
        let layout = plan_layout(kc, k, h, w, DEFAULT_GUARD).unwrap();
        let (psf, layout) = encode(&kern, &layout).unwrap();
        let got = decode(&optical_convolve(&img, &psf).unwrap(), &layout).unwrap();
        let x = img.clone().reshape(&[c, 1, h, w]).unwrap();
        let want = conv2d(&x, &kern.clone().reshape(&[kc, 1, k, k]).unwrap(), None, 1, k - 1)
            .unwrap()
            .reshape(&[c * kc, h + k - 1, w + k - 1])
            .unwrap();
        let err = got.max_abs_diff(&want).unwrap();
        if err >= 1e-4 {
            return Err(format!("case {case} (C={c}, K={kc}, k={k}, {h}x{w}): max error {err:.2e}"));
        }
        worst = worst.max(err);
    }
    Ok(format!("{cases} cases, max abs error {worst:.2e} < 1e-4"))
}

fn reparameterization() -> Outcome {
    let spec = OpticalLayerSpec {
        expand_to: 16,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let mut store = ParamStore::new();
    let layer = OpticalLayer::new(spec.clone(), &mut store, "optical", &mut rng).unwrap();
    let mut p = layer.params(&store);
    p.expand_bias = random(&[16], -0.1, 0.1, &mut rng);
    if let Some(bn) = &mut p.bn {
        bn.gamma = random(&[16], 0.5, 1.5, &mut rng);
        bn.beta = random(&[16], -0.2, 0.2, &mut rng);
        bn.stats = RunningStats {
            mean: (0..16).map(|_| rng.random_range(-0.3..0.3)).collect(),
            var: (0..16).map(|_| rng.random_range(0.5..2.0)).collect(),
        };
    }
    let merged = p.merged(spec.kernel).unwrap();
    let x = random(&[1000, 3, 13, 13], -1.0, 1.0, &mut rng);
    let err = forward_train(&x, &p, &spec)
        .unwrap()
        .max_abs_diff(&forward_train(&x, &merged, &spec).unwrap())
        .unwrap();
    check(err < 1e-5, format!("1000 inputs, max abs diff {err:.2e} (limit 1e-5)"))
}

fn gradient_suite() -> Outcome {
    let mut worst = ("", 0usize, 0.0f64);
    let mut checks = 0;
    for seed in 0..20 {
        for c in differentiable_op_suite(seed).unwrap() {
            checks += 1;
            if c.error > worst.2 {
                worst = (c.op, c.input, c.error);
            }
        }
    }
    check(
        worst.2 < 1e-3,
        format!("{checks} checks over 20 seeds, worst {}[{}] rel err {:.2e} (limit 1e-3)", worst.0, worst.1, worst.2),
    )
}

fn optics_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let mut fft = Fft2::new(64);
    let (mut worst_energy, mut worst_sum) = (0.0f64, 0.0f64);
    let mut negative = 0usize;
    for seed in 0..100u64 {
        let distance = rng.random_range(1e-3..12e-3);
        let cfg = optics_config(distance, rng.random_range(20.0..32.0));
        let h = transfer_function(&cfg, distance);
        let mut spec: Vec<Complex64> = (0..64 * 64)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        fft.forward(&mut spec);
        for (s, t) in spec.iter_mut().zip(&h) {
            if t.norm() == 0.0 {
                *s = Complex64::default();
            }
        }
        fft.inverse(&mut spec);
        let field = ComplexField::from_complex(64, 64, cfg.pitch, &spec);
        let out = propagate(&field, &cfg).unwrap();
        worst_energy = worst_energy.max((out.energy() - field.energy()).abs() / field.energy());

        let mask = PhaseMask::from_unwrapped(&random_phase(64, seed), cfg).unwrap();
        let psf = psf_from_phase(&mask).unwrap();
        worst_sum = worst_sum.max((psf.sum() - 1.0).abs());
        negative += psf.intensity().iter().filter(|&&v| v < 0.0).count();
    }
    check(
        worst_energy < 1e-6 && worst_sum <= 1e-6 && negative == 0,
        format!(
            "100 fields/masks: passband energy rel change {worst_energy:.2e}, |sum-1| {worst_sum:.2e}, negative pixels {negative}"
        ),
    )
}

fn phase_retrieval() -> Outcome {
    let cfg = optics_config(12e-3, 32.0);
    let target = sparse_spot_target(64, 8, 1.5, 16, 3).unwrap();
    let gs = psf_loss(&psf_from_phase(&gerchberg_saxton(&target, &cfg, 200).unwrap()).unwrap(), &target);
    let r = retrieve_phase_sgd(&target, &cfg, 500, 0.1, None).unwrap();
    let psf = psf_from_phase(&r.mask).unwrap();
    let loss = psf_loss(&psf, &target);
    let ncc = normalized_cross_correlation(psf.intensity(), target.intensity());
    let ratio = loss / gs;
    check(
        ncc >= 0.95 && ratio < 0.2,
        format!("NCC {ncc:.4} (>= 0.95), loss {loss:.3e} vs 200-iteration GS {gs:.3e}, ratio {ratio:.3} (< 0.2)"),
    )
}

fn mac_accounting() -> Outcome {
    let input = [1, 3, 32, 32];
    let mut lines = Vec::new();
    let mut ok = true;
    for (arch, target) in [(Architecture::Vgg13, 229.0), (Architecture::ResNet18, 488.0)] {
        let base = count_macs(&build_model(&ModelSpec::new(arch, Variant::Electronic), 0).unwrap(), input).unwrap();
        let co = count_macs(&build_model(&ModelSpec::reference_codesign(arch), 0).unwrap(), input).unwrap();
        let within = (base.mflops() - target).abs() <= 0.05 * target;
        let reduction = 100.0 * co.reduction_vs(&base);
        ok &= within && reduction >= 30.0;
        lines.push(format!(
            "{arch} {:.1} MFLOPs ({} {target} ±5%), codesign {:.1} MFLOPs, reduction {reduction:.1}% ({})",
            base.mflops(),
            if within { "within" } else { "OUTSIDE" },
            co.mflops(),
            if reduction >= 30.0 { ">= 30%" } else { "BELOW 30%" },
        ));
    }
    check(ok, lines.join("; "))
}

fn data_source() -> &'static str {
    if std::env::var_os("OPTIKONV_DATA").is_some() {
        "CIFAR-10"
    } else {
        "synthetic CIFAR-format data"
    }
}

/// First `n` images of the training (or test) split.
fn desk_split(n: usize, test: bool) -> Cifar10Set {
    match std::env::var_os("OPTIKONV_DATA") {
        Some(dir) => {
            let (train, test_set) = load_cifar10(dir).unwrap();
            if test { test_set } else { train }.subset(n).unwrap()
        }
        None => synthetic_cifar10(n, if test { 71 } else { 70 }).unwrap(),
    }
}

fn desk_training() -> Outcome {
    let source = data_source();
    let train_set = desk_split(200, false);
    let mut small = ModelSpec::new(Architecture::Vgg13, Variant::Codesign).with_width_div(8);
    small.optical.channels = 4;
    let mut model = build_model(&small, 1).unwrap();
    let overfit = TrainConfig {
        batch_size: 20,
        epochs: 30,
        lr0: 0.005,
        augment: false,
        seed: 1,
        ..Default::default()
    };
    let history = train(&mut model, &train_set, None, &overfit, None).unwrap();
    let final_loss = history.last().unwrap().loss;

    let (train_set, test_set) = (desk_split(5000, false), desk_split(1000, true));
    let budget = TrainConfig {
        batch_size: 128,
        epochs: 10,
        lr0: 0.01,
        seed: 2,
        ..Default::default()
    };
    let mut acc = Vec::new();
    for variant in [Variant::Electronic, Variant::Codesign] {
        let mut m = build_model(&ModelSpec::new(Architecture::Vgg13, variant).with_width_div(4), 2).unwrap();
        train(&mut m, &train_set, None, &budget, None).unwrap();
        acc.push(evaluate(&mut m, &test_set, &budget).unwrap());
    }
    let gap = (acc[0] - acc[1]).abs();
    check(
        final_loss < 0.1 && gap <= 5.0,
        format!(
            "{source}: overfit loss {final_loss:.4} after 30 epochs (< 0.1); 5k/10 epochs top-1 electronic {:.2}% vs codesign {:.2}%, gap {gap:.2} (<= 5)",
            acc[0], acc[1]
        ),
    )
}

fn determinism() -> Outcome {
    let data = synthetic_cifar10(256, 80).unwrap();
    let mut spec = ModelSpec::new(Architecture::Vgg13, Variant::Codesign).with_width_div(8);
    spec.optical.channels = 4;
    let config = TrainConfig {
        batch_size: 32,
        epochs: 2,
        lr0: 0.05,
        seed: 8,
        ..Default::default()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let runs: Vec<Vec<u64>> = dirs
        .iter()
        .map(|d| {
            single_thread(|| {
                let mut m = build_model(&spec, 8).unwrap();
                train(&mut m, &data, None, &config, Some(d.path()))
                    .unwrap()
                    .iter()
                    .map(|e| e.loss.to_bits())
                    .collect()
            })
        })
        .collect();
    let same_ckpt = (0..config.epochs).all(|e| {
        let name = format!("epoch_{e}.tnsr");
        std::fs::read(dirs[0].path().join(&name)).unwrap() == std::fs::read(dirs[1].path().join(&name)).unwrap()
    });
    check(
        runs[0] == runs[1] && same_ckpt,
        format!(
            "loss curves {}, checkpoints {}",
            if runs[0] == runs[1] { "bit-identical" } else { "DIFFER" },
            if same_ckpt { "byte-identical" } else { "DIFFER" }
        ),
    )
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 8] = [
        (1, "DAD central equivalence", dad_equivalence),
        (2, "re-parameterization equivalence", reparameterization),
        (3, "gradient suite", gradient_suite),
        (4, "optics invariants", optics_invariants),
        (5, "phase retrieval", phase_retrieval),
        (6, "MAC accounting", mac_accounting),
        (7, "desk-scale training", desk_training),
        (8, "determinism", determinism),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (n, name, f) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n} ({name}): PASS [{secs:.1}s] {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1}s] {d}");
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
