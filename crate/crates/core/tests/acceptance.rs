//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use ndarray::{s, Array3, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use tumorseg::ensemble::{argmax_labels, average_probabilities};
use tumorseg::inference::{coverage_count, plan_windows, predict_volume};
use tumorseg::metrics::{dice, hausdorff95, region_mask, Region};
use tumorseg::phantom::{generate, generate_phantoms, PhantomSpec};
use tumorseg::pipeline::{run_pipeline, PipelineConfig, Stage};
use tumorseg::radiomics::{
    fit_survival, predict_survival, roi_surface_area, roi_volume, survival_metrics, RadiomicRecord, Resection,
    SurvivalBuckets, NUM_FEATURES,
};
use tumorseg::sampler::{compute_sampling_weights, estimate_channel_stats, sample_patch, ChannelStats, SamplingSubject};
use tumorseg::unet::{cross_entropy_loss, train, LossType, ModelConfig, TrainSchedule, UNet3d};
use tumorseg::volume::{LabelMap, MultiModalVolume, ProbabilityMap};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn sampler_distribution() -> Outcome {
    let start = Instant::now();
    let (volume, labels, n) = common::sampler_fixture();
    let w = compute_sampling_weights(&volume, &labels, n).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let draws = 100_000;
    let mut counts = [0u64; 100];
    for _ in 0..draws {
        counts[sample_patch(&mut rng, &w, &volume, &labels).unwrap().center[2] - 2] += 1;
    }
    let stat: f64 = (0..100)
        .map(|k| {
            let e = draws as f64 * common::fixture_weight(k) / 290.0;
            (counts[k] as f64 - e).powi(2) / e
        })
        .sum();
    let p = 1.0 - ChiSquared::new(99.0).unwrap().cdf(stat);
    let fg = counts[..10].iter().sum::<u64>() as f64 / draws as f64;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        p > 0.01 && secs < 30.0,
        format!("chi2={stat:.1} (99 dof) p={p:.3} > 0.01; foreground share {fg:.4} vs 60/290={:.4}; {secs:.2}s < 30s", 60.0 / 290.0),
    )
}

fn coverage_law() -> Outcome {
    let (dim, n) = (128, 64);
    let plan = plan_windows([dim; 3], n).unwrap();
    let counts = coverage_count(&plan, true);
    let interior = counts.slice(s![n / 2..dim - n / 2, n / 2..dim - n / 2, n / 2..dim - n / 2]);
    let all16 = interior.iter().all(|&c| c == 16);
    let corners = [counts[[0, 0, 0]], counts[[dim - 1, dim - 1, dim - 1]], counts[[0, dim - 1, 0]]];
    let no_tta = coverage_count(&plan, false);
    let doubled = counts.iter().zip(no_tta.iter()).all(|(&a, &b)| a == 2 * b);
    outcome(
        all16 && corners.iter().all(|&c| c == 2) && doubled && no_tta[[0, 0, 0]] == 1,
        format!(
            "{dim}^3, window {n}: interior counts all 16 = {all16}; corners {corners:?} == 2; flip doubles = {doubled}"
        ),
    )
}

fn inference_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let stats = ChannelStats {
        mean: [0.45, 0.5, 0.4, 0.55],
        std: [0.3, 0.2, 0.25, 0.35],
    };
    let mut worst = 0.0f64;
    for (shape, window) in [([8, 8, 8], 4), ([11, 9, 10], 4), ([12, 7, 13], 6)] {
        let data = common::textured_volume(&mut rng, shape);
        let volume = MultiModalVolume::new(data.clone()).unwrap();
        let stub = common::FnPredictor {
            window,
            f: common::position_stub_probs,
        };
        let input = common::standardized(&data, stats.mean, stats.std);
        for flip in [false, true] {
            let got = predict_volume(&stub, &volume, &stats, flip).unwrap();
            let want = common::sliding_window_oracle(&input, window, flip, &common::position_stub_probs);
            for (a, b) in got.data.iter().zip(want.iter()) {
                worst = worst.max((*a as f64 - b).abs());
            }
        }
    }
    let constant = common::FnPredictor {
        window: 4,
        f: |p: &Array4<f64>| {
            let (a, b, c, _) = p.dim();
            Array4::from_shape_fn((a, b, c, 4), |(_, _, _, k)| [0.7, 0.1, 0.1, 0.1][k])
        },
    };
    let volume = MultiModalVolume::new(common::textured_volume(&mut rng, [10, 9, 11])).unwrap();
    let out = predict_volume(&constant, &volume, &ChannelStats::identity(), true).unwrap();
    let exact = out
        .data
        .lanes(ndarray::Axis(3))
        .into_iter()
        .all(|l| l.to_vec() == [0.7f32, 0.1, 0.1, 0.1]);
    outcome(
        worst < 1e-6 && exact,
        format!("max |stub - brute force| = {worst:.2e} < 1e-6; constant model reproduced exactly = {exact}"),
    )
}

fn gradient_rel_error() -> f64 {
    let mut cfg = ModelConfig::new(1, 8, 2, LossType::Weighted);
    cfg.prelu_init = 0.3;
    let mut model = UNet3d::build(&cfg, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for t in model.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let x = common::to_tensor(&Array4::from_shape_fn((8, 8, 8, 4), |_| rng.random_range(-1.0..1.0)));
    let labels: Vec<u8> = (0..512).map(|_| rng.random_range(0..4)).collect();
    let loss = |m: &UNet3d| cross_entropy_loss(&m.forward(&x), &labels, &cfg.class_weights).unwrap().0;
    let (logits, cache) = model.forward_train(&x, None);
    let (_, dlogits) = cross_entropy_loss(&logits, &labels, &cfg.class_weights).unwrap();
    let mut grad = model.zeros_like();
    model.backward(&cache, &dlogits, &mut grad);
    let analytic: Vec<Vec<f64>> = grad.tensors().into_iter().cloned().collect();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (ti, ga) in analytic.iter().enumerate() {
        for i in 0..ga.len() {
            let orig = model.tensors()[ti][i];
            model.tensors_mut()[ti][i] = orig + h;
            let up = loss(&model);
            model.tensors_mut()[ti][i] = orig - h;
            let down = loss(&model);
            model.tensors_mut()[ti][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let scale = ga[i].abs().max(numeric.abs());
            if scale > 1e-7 {
                worst = worst.max((ga[i] - numeric).abs() / scale);
            }
        }
    }
    worst
}

fn network_shapes_and_gradients() -> Outcome {
    let start = Instant::now();
    let mut shapes_ok = true;
    let mut notes = Vec::new();
    for cfg in ModelConfig::ensemble_configs() {
        let n = cfg.patch_size;
        let net = UNet3d::build(&cfg, 0).unwrap();
        let trace = net.infer_shapes([n; 3], 4).unwrap();
        shapes_ok &= trace.output == [n; 3] && trace.output_channels == 4;
        let params = net.num_parameters();
        drop(net);

        let mut small = cfg.clone();
        small.base_features = 2;
        let net = UNet3d::build(&small, 0).unwrap();
        let x = common::to_tensor(&Array4::from_elem((n, n, n, 4), 0.5));
        let y = net.forward(&x);
        let ok = y.dims == [n; 3] && y.channels == 4 && y.data.iter().all(|v| v.is_finite());
        shapes_ok &= ok;
        notes.push(format!("M{}N{}f{} {:.1}M params", cfg.num_blocks, n, cfg.base_features, params as f64 / 1e6));
    }
    let grad = gradient_rel_error();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        shapes_ok && grad < 1e-3 && secs < 120.0,
        format!(
            "six configs map (N,N,N,4)->(N,N,N,4) = {shapes_ok} [{}]; gradient rel err {grad:.2e} < 1e-3; {secs:.1}s < 120s",
            notes.join(", ")
        ),
    )
}

fn toy_training() -> Outcome {
    let start = Instant::now();
    let phantoms = generate(&PhantomSpec::default(), 10, 2024);
    let (train_set, held_out) = phantoms.split_at(8);
    let cfg = ModelConfig::new(2, 32, 8, LossType::Weighted);
    let subjects: Vec<SamplingSubject> = train_set
        .iter()
        .map(|p| SamplingSubject::new(p.id.clone(), p.fused().unwrap(), p.labels.clone(), cfg.patch_size).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let stats = estimate_channel_stats(&subjects, 400, &mut rng).unwrap();
    let mut model = UNet3d::build(&cfg, 6).unwrap();
    let sched = TrainSchedule {
        epochs: 100,
        ..TrainSchedule::default()
    };
    let report = train(&mut model, &subjects, &stats, &sched, &mut rng).unwrap();
    let mut scores = Vec::new();
    for p in held_out {
        let probs = predict_volume(&model, &p.fused().unwrap(), &stats, true).unwrap();
        let pred = argmax_labels(&probs);
        scores.push(dice(&region_mask(&pred, Region::Wt), &region_mask(&p.labels, Region::Wt)).unwrap());
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let secs = start.elapsed().as_secs_f64();
    let first = report.loss_history.iter().take(8).sum::<f64>() / 8.0;
    let last = report.loss_history.iter().rev().take(8).sum::<f64>() / 8.0;
    outcome(
        mean >= 0.8 && secs < 600.0,
        format!(
            "M2 N32 f8, 100 epochs on 8 phantoms: held-out WT Dice {scores:.3?} mean {mean:.3} >= 0.8; loss {first:.3} -> {last:.3}; {secs:.0}s < 600s"
        ),
    )
}

fn radiomics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    for _ in 0..100 {
        let shape = common::random_shape(&mut rng, 32);
        let mut raw = Array3::<u8>::zeros(shape);
        for cls in 1..=3u8 {
            let density = rng.random_range(0.0..0.2);
            let m = common::random_mask(&mut rng, shape, density);
            ndarray::Zip::from(&mut raw).and(&m).for_each(|l, &on| {
                if on {
                    *l = cls;
                }
            });
        }
        let labels = LabelMap::new(raw.clone()).unwrap();
        for cls in 1..=3u8 {
            if roi_volume(&labels, cls) != common::volume_oracle(&raw, cls)
                || roi_surface_area(&labels, cls) != common::surface_oracle(&raw, cls)
            {
                mismatches += 1;
            }
        }
    }
    let mut cube = Array3::<u8>::zeros((12, 12, 12));
    cube.slice_mut(s![5..7, 5..7, 5..7]).fill(1);
    let area = roi_surface_area(&LabelMap::new(cube).unwrap(), 1);
    outcome(
        mismatches == 0 && (area - 6.9282).abs() < 1e-4,
        format!("100 random maps <= 32^3: {mismatches} mismatches (exact equality); 2x2x2 cube surface {area:.6} ~ 6.9282"),
    )
}

fn survival() -> Outcome {
    let spec = PhantomSpec {
        shape: [24, 24, 24],
        ..Default::default()
    };
    let phantom_records: Vec<_> = generate(&spec, 20, 7)
        .iter()
        .map(|p| RadiomicRecord {
            subject_id: p.id.clone(),
            image_features: tumorseg::radiomics::extract_features(&p.labels),
            age: p.age,
            resection: p.resection,
            survival_days: Some(p.survival_days),
        })
        .collect();
    let phantom_r2 = fit_survival(&phantom_records).unwrap().training_r2;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = [-0.004, -0.02, 0.003, 0.01, -0.008, 0.015, -6.0, 120.0, 45.0];
    let mut xs = Vec::new();
    let mut records = Vec::new();
    for i in 0..163 {
        let status = rng.random_range(0..3);
        let x = [
            rng.random_range(0.0..5e4),
            rng.random_range(0.0..8e3),
            rng.random_range(0.0..9e4),
            rng.random_range(0.0..1e4),
            rng.random_range(0.0..3e4),
            rng.random_range(0.0..6e3),
            rng.random_range(20.0..85.0),
            (status == 0) as u8 as f64,
            (status == 1) as u8 as f64,
        ];
        let y = 650.0 + (0..NUM_FEATURES).map(|j| w[j] * x[j]).sum::<f64>();
        records.push(RadiomicRecord {
            subject_id: format!("s{i}"),
            image_features: [x[0], x[1], x[2], x[3], x[4], x[5]],
            age: x[6],
            resection: [Resection::Gtr, Resection::Str, Resection::Na][status],
            survival_days: Some(y),
        });
        xs.push(x);
    }
    let start = Instant::now();
    let model = fit_survival(&records).unwrap();
    let fit_secs = start.elapsed().as_secs_f64();

    let rows: Vec<Vec<f64>> = xs.iter().map(|x| std::iter::once(1.0).chain(x.iter().copied()).collect()).collect();
    let y: Vec<f64> = records.iter().map(|r| r.survival_days.unwrap()).collect();
    let beta = common::normal_equations(&rows, &y);
    let mut coef_err = 0.0f64;
    for j in 0..NUM_FEATURES {
        let want = beta[j + 1] * model.feature_stds[j];
        coef_err = coef_err.max((model.coefficients[j] - want).abs() / want.abs().max(1.0));
    }
    let pred_err = records
        .iter()
        .zip(&y)
        .map(|(r, t)| (predict_survival(&model, r) - t).abs())
        .fold(0.0, f64::max);

    let truth = [100.0, 250.0, 350.0, 500.0, 700.0];
    let pred = [150.0, 320.0, 300.0, 460.0, 400.0];
    let m = survival_metrics(&pred, &truth, SurvivalBuckets::default()).unwrap();
    let metrics_ok = m.accuracy == 0.6
        && m.mse == 20300.0
        && m.median_se == 2500.0
        && (m.std_se - 1_215_724_000.0f64.sqrt()).abs() < 1e-9
        && (m.spearman - 0.8).abs() < 1e-12;

    let r2_ok = (model.training_r2 - 1.0).abs() < 1e-8 && (phantom_r2 - 1.0).abs() < 1e-8;
    outcome(
        r2_ok && coef_err < 1e-6 && pred_err < 1e-6 && fit_secs < 1.0 && metrics_ok,
        format!(
            "R2 phantom {phantom_r2:.10} / synthetic {:.10} (|1-R2| < 1e-8); coef rel err vs normal equations {coef_err:.1e} < 1e-6; n=163 p=9 fit {:.1}ms < 1s; 5-case metrics match = {metrics_ok}",
            model.training_r2,
            fit_secs * 1e3
        ),
    )
}

fn ensemble_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let maps: Vec<ProbabilityMap> = (0..6)
        .map(|_| {
            let mut data = Array4::from_shape_fn((3, 4, 5, 4), |_| rng.random_range(0.01f32..1.0));
            for mut lane in data.lanes_mut(ndarray::Axis(3)) {
                let s: f32 = lane.sum();
                lane.mapv_inplace(|v| v / s);
            }
            ProbabilityMap::new(data).unwrap()
        })
        .collect();
    let reference = average_probabilities(&maps).unwrap();
    let mut perm: Vec<usize> = (0..maps.len()).collect();
    let mut permutation_ok = true;
    for _ in 0..200 {
        perm.shuffle(&mut rng);
        let shuffled: Vec<_> = perm.iter().map(|&i| maps[i].clone()).collect();
        permutation_ok &= average_probabilities(&shuffled).unwrap() == reference;
    }
    let identity_ok = average_probabilities(&maps[..1]).unwrap() == maps[0];
    let ties = ProbabilityMap::new(
        Array4::from_shape_vec(
            (1, 1, 4, 4),
            vec![0.25, 0.25, 0.25, 0.25, 0.1, 0.2, 0.4, 0.3, 0.0, 0.4, 0.2, 0.4, 0.0, 0.0, 0.5, 0.5],
        )
        .unwrap(),
    )
    .unwrap();
    let labels = argmax_labels(&ties);
    let tie_ok = labels.data.as_slice().unwrap() == [0, 2, 1, 2] && argmax_labels(&ties) == labels;
    outcome(
        permutation_ok && identity_ok && tie_ok,
        format!("200 permutations of 6 maps identical = {permutation_ok}; single-map identity = {identity_ok}; tie-break to lowest class = {tie_ok}"),
    )
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut worst_dice, mut worst_hd) = (0.0f64, 0.0f64);
    let mut pairs = 0;
    while pairs < 50 {
        let shape = common::random_shape(&mut rng, 16);
        let (da, db) = (rng.random_range(0.0..0.1), rng.random_range(0.0..0.1));
        let a = common::random_mask(&mut rng, shape, da);
        let b = common::random_mask(&mut rng, shape, db);
        if !a.iter().any(|&v| v) || !b.iter().any(|&v| v) {
            continue;
        }
        worst_dice = worst_dice.max((dice(&a, &b).unwrap() - common::dice_oracle(&a, &b)).abs());
        worst_hd = worst_hd.max((hausdorff95(&a, &b).unwrap() - common::hd95_oracle(&a, &b)).abs());
        pairs += 1;
    }
    outcome(
        worst_dice < 1e-9 && worst_hd < 1e-9,
        format!("50 random pairs <= 16^3: max dice err {worst_dice:.1e}, max hd95 err {worst_hd:.1e} (< 1e-9)"),
    )
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn end_to_end_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let spec = PhantomSpec {
        shape: [24, 24, 24],
        ..Default::default()
    };
    generate_phantoms(&spec, 14, 11, &data).unwrap();
    let mut snaps = Vec::new();
    for run in 0..2 {
        let mut config = PipelineConfig::new(&data, dir.path().join(format!("run{run}")));
        config.holdout_fraction = 0.25;
        config.stat_draws = 40;
        config.schedule.epochs = 3;
        config.models = vec![
            ModelConfig::new(1, 8, 2, LossType::Uniform),
            ModelConfig::new(2, 8, 2, LossType::Weighted),
            ModelConfig::new(1, 12, 2, LossType::Weighted),
        ];
        run_pipeline(&config, &Stage::ALL).unwrap();
        snaps.push(snapshot(&config.output_root));
    }
    let differing: Vec<_> = snaps[0]
        .iter()
        .filter(|(k, v)| snaps[1].get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let same_keys = snaps[0].len() == snaps[1].len();
    outcome(
        differing.is_empty() && same_keys && !snaps[0].is_empty(),
        format!(
            "{} artifacts across all {} stages, {} differ between two seeded runs",
            snaps[0].len(),
            Stage::ALL.len(),
            differing.len()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("sampler distribution", sampler_distribution),
        ("coverage law", coverage_law),
        ("inference oracle", inference_oracle),
        ("network shape + gradients", network_shapes_and_gradients),
        ("toy training", toy_training),
        ("radiomics oracle", radiomics_oracle),
        ("survival", survival),
        ("ensemble algebra", ensemble_algebra),
        ("metric oracles", metric_oracles),
        ("end-to-end determinism", end_to_end_determinism),
    ];
    let only: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let o = run();
        println!("[{}] {id:>2}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += !o.pass as usize;
    }
    println!("acceptance: {} failed", failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
