//! Acceptance suite: every criterion runs in order and prints one PASS/FAIL
//! line; the test fails if any criterion does. Tolerances and thresholds are
//! pinned in code below.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fanin_cli::bench::{run_bench, BenchConfig};
use fanin_cli::{default_variance_grid, run_variance, write_bench_outputs, crossover_report};
use fanin_core::condensed::{CondensedMatrix, DenseMaskedMatrix};
use fanin_core::dense::DenseMatrix;
use fanin_core::flops::{self, ArchitectureSpec, TrainingCostModel};
use fanin_core::topology::{
    erk_sparsities, AblationPolicy, LayerTopology, SaliencySnapshot, SparsityMode,
};
use fanin_core::train::data::{BlobTask, DataSource};
use fanin_core::train::{
    backward, forward, softmax_cross_entropy, sparse_init, train_from_config, DataConfig,
    ForwardKernel, MlpModel, TrainConfig, TrainMode,
};
use fanin_core::variance::{variance_closed_form, SparsityKind, VarianceParams};

type CriterionResult = Result<String, String>;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn check(cond: bool, msg: impl Fn() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// -- 1 -----------------------------------------------------------------

/// Monte Carlo agreement with the closed forms over the full grid at
/// 50,000 trials, plus the mean-one property, inside the runtime budget.
fn criterion_1_variance_theory() -> CriterionResult {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().join("variance.csv");
    let trials = 50_000;
    let summary = run_variance(&default_variance_grid(), trials, 0.10, 42, &out)
        .map_err(|e| e.to_string())?;
    for row in &summary.rows {
        let rel = (row.mc_variance - row.closed_form).abs() / row.closed_form;
        check(rel < 0.10, || {
            format!(
                "{} n={} k={}: variance mismatch {:.4}",
                row.kind, row.n, row.k, rel
            )
        })?;
        let se = (row.mc_variance / trials as f64).sqrt();
        check((row.mc_mean - 1.0).abs() <= 3.0 * se, || {
            format!(
                "{} n={} k={}: mean {} is {:.2} standard errors from 1",
                row.kind,
                row.n,
                row.k,
                row.mc_mean,
                (row.mc_mean - 1.0).abs() / se
            )
        })?;
    }
    let elapsed = start.elapsed().as_secs_f64();
    check(elapsed < 120.0, || {
        format!("runtime {elapsed:.1}s exceeds 2 min budget")
    })?;
    Ok(format!(
        "36 grid points, worst rel {:.4}, {:.1}s",
        summary.worst_rel, elapsed
    ))
}

// -- 2 -----------------------------------------------------------------

/// Var(constant fan-in) <= Var(Bernoulli) exhaustively for k <= n <= 1000.
fn criterion_2_dominance() -> CriterionResult {
    let mut pairs = 0u64;
    for n in 1..=1000usize {
        for k in 1..=n {
            let p = VarianceParams::new(n, k).map_err(|e| e.to_string())?;
            let bern = variance_closed_form::<f64>(SparsityKind::Bernoulli, p)
                .map_err(|e| e.to_string())?;
            let cfi = variance_closed_form::<f64>(SparsityKind::ConstantFanIn, p)
                .map_err(|e| e.to_string())?;
            check(cfi <= bern, || format!("n={n} k={k}: {cfi} > {bern}"))?;
            check(cfi > 0.0, || format!("n={n} k={k}: non-positive {cfi}"))?;
            pairs += 1;
        }
    }
    Ok(format!("{pairs} (n, k) pairs"))
}

// -- 3 -----------------------------------------------------------------

/// All closed forms equal 5/n at k = n, to 1e-12.
fn criterion_3_coincidence() -> CriterionResult {
    for n in 1..=1000usize {
        let p = VarianceParams::new(n, n).map_err(|e| e.to_string())?;
        let expected = 5.0 / n as f64;
        for kind in SparsityKind::ALL {
            if kind == SparsityKind::ConstantPerLayer && n == 1 {
                continue; // C_{n,k} needs n >= 2
            }
            let v = variance_closed_form::<f64>(kind, p).map_err(|e| e.to_string())?;
            check((v - expected).abs() <= 1e-12, || {
                format!("{kind} at n={n}: {v} vs {expected}")
            })?;
        }
    }
    Ok("n = 1..=1000, all three forms".into())
}

// -- 4 -----------------------------------------------------------------

/// 1000 randomized condensed-vs-dense oracle cases and bit-exact
/// serialization round-trips.
fn criterion_4_kernel_oracle() -> CriterionResult {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut matmul_checked = 0;
    for case in 0..1000 {
        let n = rng.gen_range(1..=64);
        let d = rng.gen_range(1..=256);
        let k = rng.gen_range(0..=d);

        let mut mask = vec![false; n * d];
        let mut cols: Vec<usize> = (0..d).collect();
        for row in 0..n {
            if n > 1 && rng.gen_bool(0.2) {
                continue;
            }
            for t in 0..k {
                let r = rng.gen_range(t..d);
                cols.swap(t, r);
                mask[row * d + cols[t]] = true;
            }
        }
        let weights = DenseMatrix::from_fn(n, d, |_, _| rng.gen_range(-2.0..2.0f64));
        let masked = DenseMaskedMatrix::new(weights, mask.clone()).map_err(|e| e.to_string())?;
        let condensed = CondensedMatrix::from_dense(&masked).map_err(|e| e.to_string())?;

        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let oracle = masked.matvec(&v).map_err(|e| e.to_string())?;
        let got = condensed.matvec(&v).map_err(|e| e.to_string())?;
        for i in 0..n {
            let rel = (got[i] - oracle[i]).abs() / oracle[i].abs().max(1.0);
            check(rel < 1e-6, || {
                format!("case {case} row {i}: {} vs {}", got[i], oracle[i])
            })?;
        }

        if case % 10 == 0 {
            let b = rng.gen_range(1..=4);
            let vm = DenseMatrix::from_fn(d, b, |_, _| rng.gen_range(-2.0..2.0f64));
            let oracle_m = masked.matmul(&vm).map_err(|e| e.to_string())?;
            let got_m = condensed.matmul(&vm).map_err(|e| e.to_string())?;
            for i in 0..n {
                for c in 0..b {
                    let rel = (got_m.at(i, c) - oracle_m.at(i, c)).abs()
                        / oracle_m.at(i, c).abs().max(1.0);
                    check(rel < 1e-6, || {
                        format!("case {case} matmul ({i},{c}) mismatch")
                    })?;
                }
            }
            matmul_checked += 1;
        }

        // f32 storage round-trip, bit for bit
        let weights32 =
            DenseMatrix::from_fn(n, d, |i, j| masked.weights().at(i, j) as f32);
        let masked32 = DenseMaskedMatrix::new(weights32, mask).map_err(|e| e.to_string())?;
        let c32 = CondensedMatrix::from_dense(&masked32).map_err(|e| e.to_string())?;
        let mut bytes = Vec::new();
        c32.write_to(&mut bytes).map_err(|e| e.to_string())?;
        let back = CondensedMatrix::read_from(&mut bytes.as_slice()).map_err(|e| e.to_string())?;
        check(back == c32, || format!("case {case}: serialization round-trip"))?;
    }
    Ok(format!("1000 matvec cases, {matmul_checked} matmul cases"))
}

// -- 5 -----------------------------------------------------------------

/// Constant fan-in and conservation invariants over 200 randomized updates
/// per ablation threshold, plus the hand-derived golden fixture.
fn criterion_5_topology_invariants() -> CriterionResult {
    // golden fixture: 3 neurons, d = 4, k = 2; gamma_sal = 0.5, K = 2
    let mut mask = vec![false; 12];
    let mut w = DenseMatrix::zeros(3, 4);
    for (i, j, v) in [
        (0, 0, 0.9),
        (0, 1, 0.8),
        (1, 1, 0.01),
        (1, 3, 0.02),
        (2, 0, 0.7),
        (2, 3, 0.03),
    ] {
        mask[i * 4 + j] = true;
        w.set(i, j, v);
    }
    let mut layer = LayerTopology::from_mask(SparsityMode::ConstantFanIn, 3, 4, mask)
        .map_err(|e| e.to_string())?;
    let mut g = DenseMatrix::zeros(3, 4);
    for (i, j, v) in [
        (0, 0, 0.01),
        (0, 1, 0.02),
        (0, 2, 0.5),
        (0, 3, 0.05),
        (1, 0, 0.001),
        (1, 1, 0.002),
        (1, 2, 0.003),
        (1, 3, 0.004),
        (2, 0, 0.4),
        (2, 1, 0.6),
        (2, 2, 0.3),
        (2, 3, 0.1),
    ] {
        g.set(i, j, v);
    }
    let sal = SaliencySnapshot::from_raw(&w, &g, 2);
    check(layer.count_salient(&sal) == vec![3, 0, 1], || {
        "golden fixture salient counts".into()
    })?;
    let out = layer
        .srigl_update(0, &sal, &AblationPolicy::new(0.5).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let row_cols = |layer: &LayerTopology, i: usize| -> Vec<usize> {
        (0..4).filter(|&j| layer.mask_at(i, j)).collect()
    };
    check(
        out.ablated == vec![1]
            && out.k_prime == 3
            && row_cols(&layer, 0) == vec![0, 1, 2]
            && row_cols(&layer, 1).is_empty()
            && row_cols(&layer, 2) == vec![0, 1, 2]
            && layer.nnz() == 6,
        || "golden fixture end state".into(),
    )?;

    // randomized invariant sweeps
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for gamma in [0.0, 0.3, 0.5, 0.95] {
        let policy = AblationPolicy::new(gamma).map_err(|e| e.to_string())?;
        let mut layer =
            LayerTopology::constant_fan_in(12, 24, 6, &mut rng).map_err(|e| e.to_string())?;
        for step in 0..200 {
            let nnz_before = layer.nnz();
            let w = DenseMatrix::from_fn(12, 24, |i, j| {
                if layer.mask_at(i, j) {
                    rng.gen_range(0.01..1.0)
                } else {
                    0.0
                }
            });
            let g = DenseMatrix::from_fn(12, 24, |_, _| rng.gen_range(-1.0..1.0));
            let k_update = (0.3 * nnz_before as f64).floor() as usize;
            let sal = SaliencySnapshot::from_raw(&w, &g, k_update);
            let out = layer
                .srigl_update(step, &sal, &policy)
                .map_err(|e| format!("gamma {gamma} step {step}: {e}"))?;
            layer
                .check_constant_fan_in()
                .map_err(|e| format!("gamma {gamma} step {step}: {e}"))?;
            let n_active = layer.n_active();
            check(
                n_active >= 1
                    && n_active * out.k_prime <= nnz_before
                    && nnz_before < n_active * (out.k_prime + 1),
                || format!("gamma {gamma} step {step}: conservation bounds"),
            )?;
        }
    }
    Ok("4 thresholds x 200 steps + golden fixture".into())
}

// -- 6 -----------------------------------------------------------------

/// Desk-scale training comparison on the bundled blob task at 90% sparsity
/// over three seeds, plus the finite-difference gradient check.
fn criterion_6_desk_training() -> CriterionResult {
    let start = Instant::now();
    let base = std::fs::read_to_string(fixtures().join("blob_task.json"))
        .map_err(|e| e.to_string())?;
    let base = TrainConfig::from_json(&base).map_err(|e| e.to_string())?;
    check(base.sparsity == 0.9, || "bundled task is 90% sparse".into())?;

    let mut means = std::collections::BTreeMap::new();
    for mode in [TrainMode::Dense, TrainMode::Rigl, TrainMode::Srigl] {
        let mut acc_sum = 0.0;
        for seed in [1, 2, 3] {
            let mut config = base.clone();
            config.mode = mode;
            config.seed = seed;
            let outcome = train_from_config(&config).map_err(|e| format!("{mode:?}: {e}"))?;
            acc_sum += outcome.report.final_eval_accuracy;
        }
        means.insert(format!("{mode:?}"), acc_sum / 3.0);
    }
    let dense = means["Dense"];
    let rigl = means["Rigl"];
    let srigl = means["Srigl"];
    check(srigl >= rigl - 0.020, || {
        format!("srigl {srigl:.4} < rigl {rigl:.4} - 2 points")
    })?;
    check(srigl >= dense - 0.030, || {
        format!("srigl {srigl:.4} < dense {dense:.4} - 3 points")
    })?;
    check(rigl >= dense - 0.030, || {
        format!("rigl {rigl:.4} < dense {dense:.4} - 3 points")
    })?;
    check(srigl >= 0.9 * dense, || {
        format!("srigl {srigl:.4} below 90% of dense {dense:.4}")
    })?;

    gradient_check()?;

    let elapsed = start.elapsed().as_secs_f64();
    check(elapsed < 600.0, || {
        format!("runtime {elapsed:.0}s exceeds 10 min budget")
    })?;
    Ok(format!(
        "dense {dense:.4}, rigl {rigl:.4}, srigl {srigl:.4}; grad check ok; {elapsed:.0}s"
    ))
}

/// Central-difference check on a 6-4-3 network, 20 coordinates, h = 1e-5.
fn gradient_check() -> Result<(), String> {
    let blob = fanin_core::train::data::BlobConfig {
        dim: 6,
        classes: 3,
        center_scale: 1.0,
        noise: 0.7,
        eval_size: 32,
        task_seed: 7,
    };
    let config = TrainConfig {
        seed: 17,
        mode: TrainMode::Srigl,
        batch_size: 16,
        total_steps: 10,
        lr: fanin_core::train::LrSchedule::Constant(0.05),
        momentum: 0.9,
        weight_decay: 0.0,
        label_smoothing: 0.0,
        hidden: vec![4],
        sparsity: 0.5,
        distribution: fanin_core::train::SparsityDistribution::Uniform,
        dense_first_layer: false,
        update: Default::default(),
        ablation: Default::default(),
        grad_accum: 1,
        eval_every: 10,
        kernel: ForwardKernel::DenseMasked,
        data: DataConfig::Blobs(blob.clone()),
    };
    let data = BlobTask::new(&blob, 17).map_err(|e| e.to_string())?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(17);
    let mut model = MlpModel::build(&config, data.input_dim(), data.num_classes(), &mut init_rng)
        .map_err(|e| e.to_string())?;
    sparse_init(&mut model, &mut init_rng);
    let mut source = BlobTask::new(&blob, 18).map_err(|e| e.to_string())?;
    let (x, y) = source.next_train_batch(16);

    let loss_of = |model: &MlpModel| -> Result<f64, String> {
        let (logits, _) = forward(model, &x, ForwardKernel::DenseMasked).map_err(|e| e.to_string())?;
        Ok(softmax_cross_entropy(&logits, &y, 0.0).0)
    };
    let (logits, cache) = forward(&model, &x, ForwardKernel::DenseMasked).map_err(|e| e.to_string())?;
    let (_, dlogits) = softmax_cross_entropy(&logits, &y, 0.0);
    let (_, dense) = backward(&model, &cache, &dlogits, true);
    let dense = dense.expect("dense gradients requested");

    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let h = 1e-5;
    let mut checked = 0;
    while checked < 20 {
        let l = rng.gen_range(0..model.layers.len());
        let i = rng.gen_range(0..model.layers[l].n_out());
        let j = rng.gen_range(0..model.layers[l].n_in());
        let analytic = dense[l].at(i, j);
        let orig = model.layers[l].weights.at(i, j);
        model.layers[l].weights.set(i, j, orig + h);
        let plus = loss_of(&model)?;
        model.layers[l].weights.set(i, j, orig - h);
        let minus = loss_of(&model)?;
        model.layers[l].weights.set(i, j, orig);
        let fd = (plus - minus) / (2.0 * h);
        if analytic.abs() < 1e-9 && fd.abs() < 1e-9 {
            continue;
        }
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs());
        check(rel < 1e-4, || {
            format!("layer {l} ({i},{j}): analytic {analytic} vs fd {fd}")
        })?;
        checked += 1;
    }
    Ok(())
}

// -- 7 -----------------------------------------------------------------

/// Table-style FLOPs reproduction on the bundled ResNet-50 description.
fn criterion_7_flops() -> CriterionResult {
    let text = std::fs::read_to_string(fixtures().join("resnet50.json"))
        .map_err(|e| e.to_string())?;
    let spec = ArchitectureSpec::from_json(&text).map_err(|e| e.to_string())?;

    let dense_inference = flops::model_inference_flops(&spec);
    let rel = (dense_inference / 8.20e9 - 1.0).abs();
    check(rel <= 0.10, || {
        format!("dense inference {dense_inference:.4e} vs 8.20e9 ({rel:.3})")
    })?;

    let cost = TrainingCostModel::new(256_000, 512, 800).map_err(|e| e.to_string())?;
    let dense_training = flops::training_flops(&spec, &cost);
    let rel_t = (dense_training / 3.15e18 - 1.0).abs();
    check(rel_t <= 0.15, || {
        format!("dense training {dense_training:.4e} vs 3.15e18 ({rel_t:.3})")
    })?;

    let erk = erk_sparsities(&spec.layer_shapes(), 0.9).map_err(|e| e.to_string())?;
    let sparse_spec = spec.with_sparsities(&erk).map_err(|e| e.to_string())?;
    let sparse_inference = flops::model_inference_flops(&sparse_spec);
    let rel_s = (sparse_inference / 1.99e9 - 1.0).abs();
    check(rel_s <= 0.15, || {
        format!("90% ERK inference {sparse_inference:.4e} vs 1.99e9 ({rel_s:.3})")
    })?;

    Ok(format!(
        "dense {dense_inference:.3e} (|rel| {rel:.3}), training {dense_training:.3e} (|rel| {rel_t:.3}), 90% ERK {sparse_inference:.3e} (|rel| {rel_s:.3})"
    ))
}

// -- 8 -----------------------------------------------------------------

/// Benchmark sanity on the 10 x 65,536 geometry: condensed runtime
/// non-increasing in sparsity at every batch size; >= 5 repeats with mean
/// and std in the CSV. The dense-vs-condensed crossover is reported only.
fn criterion_8_bench_sanity() -> CriterionResult {
    let config = BenchConfig {
        n: 10,
        d: 65_536,
        sparsities: vec![0.50, 0.90, 0.95, 0.99],
        batch_sizes: vec![1, 4, 16, 64, 256],
        repeats: 7,
        warmup: 2,
        seed: 42,
        target_block_s: 4e-3,
    };
    let rows = run_bench(&config).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().join("bench.csv");
    write_bench_outputs(&rows, &config, 0, &out).map_err(|e| e.to_string())?;
    let csv = std::fs::read_to_string(&out).map_err(|e| e.to_string())?;
    check(
        csv.starts_with("impl,sparsity,batch,mean_s,std_s\n"),
        || "CSV header".into(),
    )?;
    check(config.repeats >= 5, || "at least five repeats".into())?;

    for &batch in &config.batch_sizes {
        let mut last = f64::INFINITY;
        for &s in &[0.90, 0.95, 0.99] {
            let row = rows
                .iter()
                .find(|r| r.impl_name == "condensed" && r.batch == batch && r.sparsity == s)
                .ok_or_else(|| format!("missing row s={s} batch={batch}"))?;
            check(row.mean_s <= last, || {
                format!(
                    "batch {batch}: mean at s={s} ({:.3e}) above previous ({last:.3e})",
                    row.mean_s
                )
            })?;
            last = row.mean_s;
        }
        // sanity against the half-sparse point: ~50x less work at 0.99
        let half = rows
            .iter()
            .find(|r| r.impl_name == "condensed" && r.batch == batch && r.sparsity == 0.50)
            .ok_or_else(|| format!("missing row s=0.5 batch={batch}"))?;
        check(last < half.mean_s, || {
            format!("batch {batch}: s=0.99 not faster than s=0.50")
        })?;
    }
    println!("-- dense vs condensed crossover (informational) --");
    print!("{}", crossover_report(&rows));
    Ok(format!("{} timing rows, monotone in sparsity", rows.len()))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> CriterionResult); 8] = [
        ("1 variance theory", criterion_1_variance_theory),
        ("2 dominance property", criterion_2_dominance),
        ("3 coincidence at k=n", criterion_3_coincidence),
        ("4 kernel oracle equivalence", criterion_4_kernel_oracle),
        ("5 topology invariants", criterion_5_topology_invariants),
        ("6 desk-scale training", criterion_6_desk_training),
        ("7 FLOPs reproduction", criterion_7_flops),
        ("8 benchmark sanity", criterion_8_bench_sanity),
    ];
    let mut failures = Vec::new();
    for (name, run) in criteria {
        match run() {
            Ok(detail) => println!("criterion {name}: PASS ({detail})"),
            Err(msg) => {
                println!("criterion {name}: FAIL ({msg})");
                failures.push(name);
            }
        }
    }
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
