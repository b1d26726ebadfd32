//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line per
//! criterion (sub-checks get their own line) before asserting. A global lock
//! runs them one at a time so runtimes are not inflated by each other.

use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use tc2_core::calibration::{
    batch_stats, calibrate, extract_factors, factor_weights, fit_factors, fit_weights, loss_tc2, loss_tc2_on_tape,
    loss_v, loss_v_on_tape, loss_w_from_weights, mean_support, planted_basis, random_orthonormal, FactorBasis,
    FvParams, FwParams, GdOptions,
};
use tc2_core::databatch::{build_tasks, split_batch, RawBatch};
use tc2_core::diagnostics::{probe, Labeled, ProbeResult};
use tc2_core::encoder::{encode_matrix, loss_infonce, loss_recon, loss_sse_pairs};
use tc2_core::nn::Params;
use tc2_core::numcore::{check_gradient, GradCheckReport};
use tc2_core::rng::LabRng;
use tc2_core::scm::{ConflictBenchmark, DomainShift};
use tc2_core::trainer::{
    batch_seed, epoch_batches, resolve, train, Grouping, TrainConfig, TrainData, TrainRun, TrainState,
};
use tc2_core::{Matrix, Tape, Var};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Prints the line and returns the verdict.
fn line(id: &str, pass: bool, detail: String) -> bool {
    println!("[{id}] {} {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

/// Largest principal angle (degrees) between the column spans, from the
/// singular values of `Q_aᵀ Q_b`.
fn max_principal_angle(a: &Matrix, b: &Matrix) -> f64 {
    let qa = na(a).qr().q();
    let qb = na(b).qr().q();
    let s = (qa.transpose() * qb).svd(false, false).singular_values;
    let smallest = s.iter().copied().fold(f64::INFINITY, f64::min).clamp(-1.0, 1.0);
    smallest.acos().to_degrees()
}

fn at_most(t: Instant, limit: Duration) -> (bool, String) {
    let e = t.elapsed();
    (e < limit, format!("{:.1}s < {}s", e.as_secs_f64(), limit.as_secs()))
}

// 1. theorem check through the command line

#[test]
fn cross_task_weight_tracks_label_correlation() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("t.json");
    std::fs::write(&cfg, r#"{"seed": 0, "data": {"source": "scm"}}"#).unwrap();
    let out = dir.path().join("out");
    let t = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_tc2"))
        .args([
            "theorem1",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    let (fast, time) = at_most(t, Duration::from_secs(120));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("theorem1.json")).unwrap()).unwrap();
    let grid = r["grid"].as_array().unwrap();
    let norm = |c: f64| {
        grid.iter()
            .find(|row| (row["c_ij"].as_f64().unwrap() - c).abs() < 1e-12)
            .map(|row| row["weight_norm_j"].as_f64().unwrap())
            .unwrap()
    };
    let null = r["null"]["weight_norm_j"].as_f64().unwrap();
    let mut ok = Vec::new();
    ok.push(line(
        "1a",
        null < 0.02,
        format!("weight_norm_j at c=0.5, n=1e6: {null:.5} < 0.02"),
    ));
    ok.push(line(
        "1b",
        norm(0.9) > 0.1,
        format!("weight_norm_j at c=0.9, n=1e5: {:.4} > 0.1", norm(0.9)),
    ));
    let norms: Vec<f64> = [0.5, 0.6, 0.7, 0.8, 0.9].iter().map(|&c| norm(c)).collect();
    let mono = norms.windows(2).all(|w| w[1] >= w[0]);
    ok.push(line(
        "1c",
        mono,
        format!("monotone in |c-0.5| (5-seed means): {norms:.4?}"),
    ));
    let mae: Vec<f64> = grid
        .iter()
        .map(|row| row["bayes_agreement"].as_f64().unwrap())
        .collect();
    let worst = mae.iter().copied().fold(0.0, f64::max);
    ok.push(line(
        "1d",
        worst < 0.01,
        format!("|fitted - Bayes| mean abs error per grid point: {mae:.4?}, worst {worst:.4} < 0.01"),
    ));
    ok.push(line("1e", fast, format!("runtime {time}")));
    ok.push(line(
        "1f",
        status.code() == Some(0),
        format!("theorem1 exit code {:?}", status.code()),
    ));
    assert!(ok.iter().all(|p| *p), "checks [1*] failed");
}

// 2. finite-difference gradient checks

fn random(rng: &mut LabRng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.normal())
}

/// Runs `points` independent checks; points too close to an l1 kink are redrawn.
fn gradcheck_points<F>(name: &str, points: usize, seed: u64, mut make: F) -> (bool, String)
where
    F: FnMut(&mut LabRng) -> Option<GradCheckReport>,
{
    let mut rng = LabRng::new(seed);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    let mut draws = 0;
    while done < points {
        draws += 1;
        assert!(draws < 20 * points, "{name}: too many redraws");
        let Some(report) = make(&mut rng) else { continue };
        worst = worst.max(report.max_rel_error);
        done += 1;
    }
    (
        worst < 1e-4,
        format!("{name}: worst relative error {worst:.2e} over {points} points"),
    )
}

const STEP: f64 = 1e-5;

fn check(
    build: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> tc2_core::Result<Var<'t>>,
    params: &[Matrix],
) -> GradCheckReport {
    check_gradient(build, params, STEP, 1e-4).unwrap()
}

#[test]
fn losses_match_finite_differences() {
    let _g = serial();
    let t = Instant::now();
    let sources = [0usize, 0, 1, 1, 2, 2];
    let mut ok = Vec::new();

    let (p, d) = gradcheck_points("loss_v", 100, 1, |rng| {
        let v = random(rng, 4, 3);
        let z = random(rng, 6, 4);
        Some(check(|_, p| loss_v_on_tape(p[0], p[1]), &[v, z]))
    });
    ok.push(line("2a", p, d));

    let (p, d) = gradcheck_points("loss_w (l1 weight 0.5)", 100, 2, |rng| {
        let v = random(rng, 4, 3);
        let w = random(rng, 6, 3);
        let z = random(rng, 6, 4);
        let r = check(|_, p| loss_w_from_weights(p[0], p[1], &v, 0.5), &[w, z]);
        (r.kink_margin > 1e3 * STEP).then_some(r)
    });
    ok.push(line("2b", p, d));

    let (p, d) = gradcheck_points("loss_tc2 (lambda_s 0.1)", 100, 3, |rng| {
        let v = random(rng, 4, 3);
        let w = random(rng, 6, 3);
        let z = random(rng, 6, 4);
        let frozen = v.clone();
        let r = check(
            |_, p| {
                let lv = loss_v_on_tape(p[0], p[2])?;
                let lw = loss_w_from_weights(p[1], p[2], &frozen, 1.0)?;
                loss_tc2_on_tape(lv, lw, 0.1)
            },
            &[v, w, z],
        );
        (r.kink_margin > 1e3 * STEP).then_some(r)
    });
    ok.push(line("2c", p, d));

    let (p, d) = gradcheck_points("infonce", 100, 4, |rng| {
        let e = random(rng, 6, 3);
        Some(check(|_, p| loss_infonce(p[0], &sources, 0.5), &[e]))
    });
    ok.push(line("2d", p, d));

    let (p, d) = gradcheck_points("masked reconstruction", 100, 5, |rng| {
        let dec = random(rng, 4, 5);
        let target = random(rng, 4, 5);
        let masks: Vec<Vec<bool>> = (0..4)
            .map(|i| (0..5).map(|j| j == i || rng.bernoulli(0.5)).collect())
            .collect();
        Some(check(|_, p| loss_recon(p[0], &target, &masks), &[dec]))
    });
    ok.push(line("2e", p, d));

    let (p, d) = gradcheck_points("query sse", 100, 6, |rng| {
        let reps = random(rng, 6, 3);
        Some(check(|_, p| loss_sse_pairs(p[0], &sources), &[reps]))
    });
    ok.push(line("2f", p, d));

    let (fast, time) = at_most(t, Duration::from_secs(60));
    ok.push(line("2g", fast, format!("runtime {time}")));
    assert!(ok.iter().all(|p| *p), "checks [2*] failed");
}

// 3. and 4. planted-basis recovery

#[test]
fn factor_fit_recovers_planted_basis() {
    let _g = serial();
    let t = Instant::now();
    let (mut angles, mut defects) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        let planted = planted_basis(16, 8, 256, 2, 0.01, seed).unwrap();
        let mut fv = FvParams::init(16, 8, 64, &mut LabRng::derived(seed, 7));
        fit_factors(&mut fv, &planted.z, &GdOptions::constant(2000, 1e-3)).unwrap();
        let basis = extract_factors(&fv, &batch_stats(&planted.z).unwrap()).unwrap();
        let v = na(&basis.v);
        defects.push((v.transpose() * &v - DMatrix::identity(8, 8)).norm());
        angles.push(max_principal_angle(&basis.v, &planted.basis));
    }
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let mut ok = Vec::new();
    ok.push(line(
        "3a",
        mean(&defects) < 1e-2,
        format!(
            "mean ||V^T V - I||_F = {:.2e} < 1e-2, max {:.2e}",
            mean(&defects),
            defects.iter().copied().fold(0.0, f64::max)
        ),
    ));
    ok.push(line(
        "3b",
        mean(&angles) < 5.0,
        format!(
            "mean largest principal angle {:.3} deg < 5 (per seed {angles:.3?})",
            mean(&angles)
        ),
    ));
    let (fast, time) = at_most(t, Duration::from_secs(120));
    ok.push(line("3c", fast, format!("runtime {time}")));
    assert!(ok.iter().all(|p| *p), "checks [3*] failed");
}

#[test]
fn weight_support_shrinks_with_l1() {
    let _g = serial();
    let weights = [0.01, 0.1, 1.0];
    let mut support = Vec::new();
    for &l1 in &weights {
        let mut total = 0.0;
        for seed in 0..3 {
            let planted = planted_basis(16, 8, 256, 2, 0.01, seed).unwrap();
            let mut fw = FwParams::init(16, 8, 64, &mut LabRng::derived(seed, 8));
            let opts = GdOptions {
                steps: 2000,
                lr: 0.002,
                final_ratio: 0.01,
            };
            fit_weights(&mut fw, &planted.basis, &planted.z, l1, &opts).unwrap();
            total += mean_support(&factor_weights(&fw, &planted.z).unwrap(), 1e-3);
        }
        support.push(total / 3.0);
    }
    let pass = support.windows(2).all(|w| w[1] <= w[0]);
    assert!(
        line(
            "4",
            pass,
            format!("mean support for l1 {weights:?}: {support:.3?}, non-increasing")
        ),
        "checks [4*] failed"
    );
}

// 5. and 6. conflict benchmark

fn benchmark_run(seed: u64, tc2: bool) -> TrainRun {
    let d = ConflictBenchmark::new(0.8).two_task(64, seed).unwrap();
    let data = TrainData {
        batch: RawBatch::new(d.samples).unwrap(),
        domains: Some(d.domains),
    };
    let mut cfg = TrainConfig::new(seed, 0);
    cfg.model.hidden = 32;
    cfg.model.dim = 8;
    cfg.model.proj_dim = 8;
    cfg.tasks.k = 2;
    cfg.train.batch_size = 32;
    cfg.train.epochs = 200;
    cfg.train.grouping = Grouping::Domain;
    cfg.tc2.enabled = tc2;
    let run = train(&cfg, &data).unwrap();
    assert!(run.aborted.is_none(), "seed {seed}: {:?}", run.aborted);
    run
}

/// Mean cosine and conflict rate over the last 20% of epochs.
fn tail_conflict(run: &TrainRun) -> (f64, f64) {
    let c = &run.state.history.conflicts;
    let tail = &c[c.len() - c.len() / 5..];
    let n = tail.len() as f64;
    (
        tail.iter().map(|r| r.mean_cos).sum::<f64>() / n,
        tail.iter().map(|r| r.conflict_rate).sum::<f64>() / n,
    )
}

fn transfer_probe(run: &TrainRun, seed: u64) -> ProbeResult {
    let shift = DomainShift {
        rotation_deg: 30.0,
        sigma_scale: 1.5,
    };
    let d = ConflictBenchmark::new(0.8).shifted(600, 1000 + seed, &shift).unwrap();
    let z = encode_matrix(&run.state.encoder, &Matrix::from_rows(&d.samples).unwrap()).unwrap();
    let ztr = z.select_rows(&(0..300).collect::<Vec<_>>());
    let zte = z.select_rows(&(300..600).collect::<Vec<_>>());
    probe(
        Labeled {
            features: &ztr,
            labels: &d.labels[..300],
        },
        Labeled {
            features: &zte,
            labels: &d.labels[300..],
        },
    )
    .unwrap()
}

#[test]
fn calibration_reduces_conflict_and_transfers() {
    let _g = serial();
    let t = Instant::now();
    let (mut cos_wins, mut rate_wins, mut top1_wins, mut knn_wins) = (0, 0, 0, 0);
    for seed in 0..5 {
        let off = benchmark_run(seed, false);
        let on = benchmark_run(seed, true);
        let (cos_off, rate_off) = tail_conflict(&off);
        let (cos_on, rate_on) = tail_conflict(&on);
        let (p_off, p_on) = (transfer_probe(&off, seed), transfer_probe(&on, seed));
        println!(
            "  seed {seed}: mean_cos {cos_off:.3} -> {cos_on:.3}, conflict_rate {rate_off:.3} -> {rate_on:.3}, \
             top1 {:.3} -> {:.3}, knn5 {:.3} -> {:.3}",
            p_off.top1, p_on.top1, p_off.knn5, p_on.knn5
        );
        cos_wins += usize::from(cos_on > cos_off);
        rate_wins += usize::from(rate_on < rate_off);
        top1_wins += usize::from(p_on.top1 >= p_off.top1);
        knn_wins += usize::from(p_on.knn5 >= p_off.knn5);
    }
    let mut ok = Vec::new();
    ok.push(line(
        "5a",
        cos_wins >= 4,
        format!("tail mean cosine higher with calibration in {cos_wins}/5 seeds (need 4)"),
    ));
    ok.push(line(
        "5b",
        rate_wins >= 4,
        format!("tail conflict rate lower with calibration in {rate_wins}/5 seeds (need 4)"),
    ));
    ok.push(line(
        "6a",
        top1_wins >= 4,
        format!("shifted-domain top1 >= baseline in {top1_wins}/5 seeds (need 4)"),
    ));
    ok.push(line(
        "6b",
        knn_wins >= 4,
        format!("shifted-domain knn5 >= baseline in {knn_wins}/5 seeds (need 4)"),
    ));
    let (fast, time) = at_most(t, Duration::from_secs(600));
    ok.push(line("5c/6c", fast, format!("runtime {time}")));
    assert!(ok.iter().all(|p| *p), "checks [5/6*] failed");
}

// 7. determinism

/// Gradient descent on the squared-error query loss of a single task,
/// written against the tape.
fn plain_trajectory(cfg: &TrainConfig, data: &TrainData) -> Vec<Vec<f64>> {
    let mut enc = TrainState::init(cfg).unwrap().encoder;
    let mut out = Vec::new();
    for epoch in 0..cfg.train.epochs {
        for (b, (idx, _)) in epoch_batches(data, cfg, epoch).unwrap().into_iter().enumerate() {
            let raw = data.batch.subset(&idx);
            let seed = batch_seed(cfg.seed, epoch, b);
            let groups = split_batch(&raw, 1, seed).unwrap();
            let task = build_tasks(&raw, &groups, &cfg.tasks, seed.rotate_left(17))
                .unwrap()
                .remove(0);
            let x = Matrix::from_rows(&task.query.iter().map(|v| v.payload.clone()).collect::<Vec<_>>()).unwrap();
            let src: Vec<usize> = task.query.iter().map(|v| v.source).collect();
            let tape = Tape::new();
            let params: Vec<Var> = enc.tensors().into_iter().map(|m| tape.var(m.clone())).collect();
            let layers = enc.encoder.layers.len();
            let mut h = tape.constant(x);
            for l in 0..layers {
                h = h.matmul(params[2 * l]).unwrap().add(params[2 * l + 1]).unwrap();
                if l + 1 < layers {
                    h = h.relu().unwrap();
                }
            }
            let mut loss = tape.constant(Matrix::scalar(0.0));
            for a in 0..src.len() {
                for c in a + 1..src.len() {
                    if src[a] == src[c] {
                        let diff = h.select_rows(&[a]).unwrap().sub(h.select_rows(&[c]).unwrap()).unwrap();
                        loss = loss.add(diff.sq_norm().unwrap()).unwrap();
                    }
                }
            }
            let grads = tape.gradient(loss, &params).unwrap();
            for (p, g) in enc.tensors_mut().into_iter().zip(&grads) {
                p.axpy(-cfg.train.beta2, g).unwrap();
            }
        }
        out.push(enc.flatten());
    }
    out
}

#[test]
fn training_is_deterministic() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("b.json");
    std::fs::write(
        &cfg_path,
        r#"{"seed": 7, "data": {"source": "benchmark", "n_per_domain": 64},
            "tasks": {"k": 2}, "model": {"hidden": 32, "dim": 8, "proj_dim": 8},
            "train": {"epochs": 10, "batch_size": 32, "grouping": "domain"}}"#,
    )
    .unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_tc2"))
            .args([
                "train",
                "--config",
                cfg_path.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ])
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read(Path::new(&out).join("metrics.csv")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    let mut ok = Vec::new();
    ok.push(line(
        "7a",
        a == b && !a.is_empty(),
        format!("metrics.csv identical across two runs ({} bytes)", a.len()),
    ));

    let mut rng = LabRng::new(70);
    let samples: Vec<Vec<f64>> = (0..40).map(|_| (0..5).map(|_| rng.normal()).collect()).collect();
    let data = TrainData::new(RawBatch::new(samples).unwrap());
    let mut cfg = TrainConfig::new(71, 0);
    cfg.model.hidden = 16;
    cfg.model.dim = 6;
    cfg.model.proj_dim = 4;
    cfg.tasks.k = 1;
    cfg.train.batch_size = 8;
    cfg.train.beta1 = 0.0;
    cfg.train.epochs = 4;
    cfg.tc2.enabled = false;
    let cfg = resolve(&cfg, &data).unwrap();
    let expected = plain_trajectory(&cfg, &data);
    let mut dev: f64 = 0.0;
    for (e, want) in expected.iter().enumerate() {
        let mut c = cfg.clone();
        c.train.epochs = e + 1;
        let got = train(&c, &data).unwrap().state.encoder.flatten();
        dev = dev.max(got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    ok.push(line(
        "7b",
        dev < 1e-10,
        format!("single-task trainer vs plain descent: max deviation {dev:.2e} < 1e-10"),
    ));
    assert!(ok.iter().all(|p| *p), "checks [7*] failed");
}

// 8. algebraic invariants

#[test]
fn projection_and_collapse_invariants() {
    let _g = serial();
    let mut rng = LabRng::new(80);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let v = random_orthonormal(&mut rng, 12, 5).unwrap();
        let basis = FactorBasis { v: v.clone() };
        let w = random(&mut rng, 30, 5);
        let zhat = calibrate(&w, &basis).unwrap();
        let back = zhat.matmul(&v).unwrap().matmul_t(&v).unwrap();
        worst = worst.max(back.sub(&zhat).unwrap().frobenius());
    }
    let mut ok = Vec::new();
    ok.push(line(
        "8a",
        worst <= 1e-8,
        format!("||zhat V V^T - zhat|| worst {worst:.2e} <= 1e-8"),
    ));

    let z = random(&mut rng, 24, 6);
    let fv = FvParams::init(6, 3, 8, &mut rng);
    let fw = FwParams::init(6, 3, 8, &mut rng);
    let tasks = [
        z.select_rows(&(0..12).collect::<Vec<_>>()),
        z.select_rows(&(12..24).collect::<Vec<_>>()),
    ];
    let collapsed = loss_tc2(&fv, &fw, &z, &tasks, 0.0, 1.0).unwrap();
    let plain = loss_v(&extract_factors(&fv, &batch_stats(&z).unwrap()).unwrap(), &z).unwrap();
    ok.push(line(
        "8b",
        collapsed.to_bits() == plain.to_bits(),
        format!("lambda_s = 0: L_tc2 {collapsed} vs L_v {plain}, bitwise equal"),
    ));

    let d = ConflictBenchmark::new(0.8).two_task(32, 8).unwrap();
    let data = TrainData {
        batch: RawBatch::new(d.samples).unwrap(),
        domains: Some(d.domains),
    };
    let mut cfg = TrainConfig::new(8, 0);
    cfg.model.hidden = 16;
    cfg.model.dim = 6;
    cfg.tasks.k = 2;
    cfg.train.batch_size = 16;
    cfg.train.epochs = 3;
    cfg.train.grouping = Grouping::Domain;
    (cfg.tc2.alpha1, cfg.tc2.alpha2, cfg.tc2.alpha3, cfg.tc2.alpha4) = (0.0, 0.0, 0.0, 0.0);
    (cfg.train.beta1, cfg.train.beta2) = (0.0, 0.0);
    let cfg = resolve(&cfg, &data).unwrap();
    let init = TrainState::init(&cfg).unwrap();
    let run = train(&cfg, &data).unwrap();
    let bits = |p: &dyn Fn() -> Vec<f64>| p().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let same = bits(&|| run.state.encoder.flatten()) == bits(&|| init.encoder.flatten())
        && bits(&|| run.state.fv.flatten()) == bits(&|| init.fv.flatten())
        && bits(&|| run.state.fw.flatten()) == bits(&|| init.fw.flatten());
    ok.push(line(
        "8c",
        same && !run.state.history.losses.is_empty(),
        format!(
            "zero learning rates, {} metric rows: parameters bitwise unchanged",
            run.state.history.losses.len()
        ),
    ));
    assert!(ok.iter().all(|p| *p), "checks [8*] failed");
}
