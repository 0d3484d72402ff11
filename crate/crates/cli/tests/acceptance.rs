//! Acceptance suite: one pass/fail line per criterion.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use avseg_cli::run;
use avseg_core::checks::{self, NETWORK_TOLERANCE, OP_TOLERANCE};
use avseg_core::evaluation::{av_metrics, roc_auc, seg_metrics, AvMode, Confusion};
use avseg_core::inference::{decide_av, predict_tiles, DecisionMode, InferenceConfig, TileGrid, TriProbMap};
use avseg_core::io::{LabelTriMap, Raster};
use avseg_core::network::{spatial_activation, spatial_activation_value};
use avseg_core::preprocess::InputStack;
use avseg_core::training::{compose_loss, decay_term, lr_at, weighted_bce, LossWeights};
use avseg_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn activation_exactness() -> Check {
    let mut worst_grid = 0.0f64;
    for sigma in [0.25, 0.5, 1.0, 2.0] {
        for x in [0.0, 1.0] {
            let m = spatial_activation_value(x, sigma);
            ensure((m - 1.0).abs() <= 1e-12, || format!("m({x}) = {m} for sigma {sigma}"))?;
        }
        let peak = 1.0 + sigma * (1.0 - (-0.25f64).exp());
        let grid: Vec<f64> = (0..=1000).map(|i| i as f64 / 1000.0).collect();
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(Tensor::new(vec![grid.len()], grid.clone()).map_err(|e| e.to_string())?);
        let mv = spatial_activation(&mut tape, xv, sigma);
        let m = tape.value(mv).data().to_vec();
        let (arg, &max) = m.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).expect("grid");
        ensure(arg == 500, || format!("grid maximum at x = {}", grid[arg]))?;
        ensure((max - peak).abs() <= 1e-9, || format!("grid maximum {max}, expected {peak}"))?;
        worst_grid = worst_grid.max((max - peak).abs());
        for i in 0..=500 {
            ensure((m[i] - m[1000 - i]).abs() <= 1e-14, || format!("asymmetric at x = {}", grid[i]))?;
            ensure((m[i] - spatial_activation_value(grid[i], sigma)).abs() <= 1e-15, || "tape and scalar forms differ".into())?;
            if i > 0 {
                ensure(m[i] > m[i - 1], || format!("not increasing at x = {}", grid[i]))?;
            }
        }
        ensure(m.iter().all(|&v| (1.0..=peak).contains(&v)), || "value outside [1, peak]".into())?;
    }
    Ok(format!("4 sigmas, max |grid max - closed form| = {worst_grid:.1e}"))
}

fn gradient_integrity() -> Check {
    let seeds: Vec<u64> = (0..20).collect();
    let results = checks::suite(&seeds, 2).map_err(|e| e.to_string())?;
    let (mut op_max, mut net_max, mut net_probes) = (0.0f64, 0.0f64, 0);
    for r in &results {
        if r.name.starts_with("network") {
            ensure(r.tolerance == NETWORK_TOLERANCE, || format!("{} tolerance {}", r.name, r.tolerance))?;
            net_max = net_max.max(r.max_error);
            net_probes += r.probes;
        } else {
            ensure(r.tolerance == OP_TOLERANCE, || format!("{} tolerance {}", r.name, r.tolerance))?;
            op_max = op_max.max(r.max_error);
        }
        ensure(r.passed(), || format!("{}: max error {:.3e} >= {:.0e}", r.name, r.max_error, r.tolerance))?;
    }
    ensure(net_probes > 0, || "network check probed nothing".into())?;
    Ok(format!(
        "{} checks x 20 seeds; ops max {op_max:.2e} (< 1e-6); network max {net_max:.2e} (< 1e-4, {net_probes} probes)",
        results.len()
    ))
}

fn loss_identities() -> Check {
    let w = LossWeights::default();
    let ok = [[true; 3]; 64];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let target: Vec<[bool; 3]> = (0..64).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let half = weighted_bce(&vec![[0.5; 3]; 64], &target, &ok, &w, false).map_err(|e| e.to_string())?.loss;
    ensure((half - std::f64::consts::LN_2).abs() <= 1e-6, || format!("uniform 0.5 gives {half}"))?;
    let perfect: Vec<[f64; 3]> = target.iter().map(|t| t.map(|b| if b { 1.0 } else { 0.0 })).collect();
    let p = weighted_bce(&perfect, &target, &ok, &w, false).map_err(|e| e.to_string())?.loss;
    ensure(p <= 1e-6, || format!("perfect prediction gives {p}"))?;

    let mut tape = Tape::<f64>::new();
    let out = tape.constant(Tensor::scalar(0.4));
    let sides: Vec<_> = [0.3, 0.6, 1.2].iter().map(|&v| tape.constant(Tensor::scalar(v))).collect();
    let a = tape.param(Tensor::scalar(1.0));
    let b = tape.param(Tensor::scalar(2.0));
    let decay = decay_term(&mut tape, &[a, b], 0.1);
    let decay_v = decay.map(|d| tape.value(d).data()[0]).unwrap_or(f64::NAN);
    ensure((decay_v - 0.25).abs() <= 1e-12, || format!("decay term {decay_v}"))?;
    let total = compose_loss(&mut tape, out, &sides, decay).map_err(|e| e.to_string())?;
    let got = tape.value(total).data()[0];
    let want = 0.4 + (0.3 + 0.6 + 1.2) / 3.0 + 0.25;
    ensure((got - want).abs() <= 1e-12, || format!("composed loss {got}, expected {want}"))?;
    Ok(format!("ln2 gap {:.1e}, perfect {p:.1e}, composed {got}", (half - std::f64::consts::LN_2).abs()))
}

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / pairs
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for k in 0..100 {
        let levels = [5u32, 50, 1000, u32::MAX][k % 4];
        let scores: Vec<f64> = (0..1000).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let p_pos = rng.random_range(0.05..0.95);
        let mut labels: Vec<bool> = (0..1000).map(|_| rng.random_bool(p_pos)).collect();
        labels[0] = true;
        labels[1] = false;
        let got = roc_auc(&scores, &labels).map_err(|e| e.to_string())?;
        let want = pairwise_auc(&scores, &labels);
        worst = worst.max((got - want).abs());
        ensure((got - want).abs() <= 1e-12, || format!("instance {k}: auc {got} vs pairwise {want}"))?;
    }

    // Vessel: positives scored {0.9, 0.6, 0.4}, negatives {0.2, 0.7, 0.1};
    // at 0.5 that is tp 2, fp 1, tn 2, fn 1 and 7 of 9 pairs ordered.
    let mut gt = LabelTriMap::empty(1, 6);
    gt.vessel = vec![true, true, true, false, false, false];
    let prob = Raster::new(1, 6, vec![0.9, 0.6, 0.4, 0.2, 0.7, 0.1]).map_err(|e| e.to_string())?;
    let seg = seg_metrics(&prob, &gt, &[true; 6], 0.5).map_err(|e| e.to_string())?;
    ensure(seg.counts == Confusion { tp: 2, fp: 1, tn: 2, fn_: 1 }, || format!("seg counts {:?}", seg.counts))?;
    ensure((seg.auc - 7.0 / 9.0).abs() <= 1e-15, || format!("seg auc {}", seg.auc))?;

    // A/V: arteries at 0..3, veins at 3..5, pixel 5 uncertain.
    // gt_pixels: A->A, A->V, A->A (tie), V->A, V->V: tp 2, fn 1, fp 1, tn 1.
    // detected drops pixel 2 (p_vessel 0.3): tp 1, fn 1, fp 1, tn 1.
    let mut gt = LabelTriMap::empty(1, 6);
    gt.vessel = vec![true; 6];
    gt.artery = vec![true, true, true, false, false, false];
    gt.vein = vec![false, false, false, true, true, false];
    gt.uncertain = vec![false, false, false, false, false, true];
    let r = |v: Vec<f64>| Raster::new(1, 6, v).expect("1x6");
    let tri = TriProbMap {
        height: 1,
        width: 6,
        vessel: r(vec![0.9, 0.9, 0.3, 0.8, 0.9, 0.9]),
        artery: r(vec![0.8, 0.3, 0.6, 0.7, 0.2, 0.9]),
        vein: r(vec![0.1, 0.6, 0.6, 0.2, 0.5, 0.1]),
        activation: None,
        coverage: vec![1; 6],
    };
    let all = decide_av(&tri, 0.5, DecisionMode::GtPixels).map_err(|e| e.to_string())?;
    let det = decide_av(&tri, 0.5, DecisionMode::Detected).map_err(|e| e.to_string())?;
    let g = av_metrics(&all, &tri, &gt, AvMode::GtPixels).map_err(|e| e.to_string())?;
    let d = av_metrics(&det, &tri, &gt, AvMode::Detected).map_err(|e| e.to_string())?;
    ensure(g.counts == Confusion { tp: 2, fp: 1, tn: 1, fn_: 1 }, || format!("gt_pixels counts {:?}", g.counts))?;
    ensure(d.counts == Confusion { tp: 1, fp: 1, tn: 1, fn_: 1 }, || format!("detected counts {:?}", d.counts))?;
    Ok(format!("100 AUC instances, max gap {worst:.1e}; hand confusion matrices exact"))
}

fn tiling() -> Check {
    let patch = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for k in 0..500 {
        let h = rng.random_range(patch..=patch + 250);
        let w = rng.random_range(patch..=patch + 250);
        let stride = rng.random_range(1..=patch);
        let grid = TileGrid::new(h, w, patch, stride).map_err(|e| e.to_string())?;
        let axis = |origins: &[usize], len: usize| -> Result<Vec<u32>, String> {
            let mut cov = vec![0u32; len];
            for &o in origins {
                ensure(o + patch <= len, || format!("tile at {o} leaves a {len}-pixel axis"))?;
                for c in &mut cov[o..o + patch] {
                    *c += 1;
                }
            }
            Ok(cov)
        };
        let (rows, cols) = (axis(&grid.rows, h)?, axis(&grid.cols, w)?);
        ensure(rows.iter().chain(&cols).all(|&c| c > 0), || format!("triple {k} ({h}, {w}, {stride}) leaves a gap"))?;
        let cov = grid.coverage(h, w, patch);
        for y in 0..h {
            for x in 0..w {
                ensure(cov[y * w + x] == rows[y] * cols[x], || format!("triple {k}: coverage differs at ({y}, {x})"))?;
            }
        }
    }
    let drive = TileGrid::new(584, 565, 64, 10).map_err(|e| e.to_string())?;
    ensure((drive.rows.len(), drive.cols.len()) == (53, 52), || {
        format!("DRIVE grid {}x{}", drive.rows.len(), drive.cols.len())
    })?;

    let (h, w) = (100, 90);
    let stack = InputStack {
        height: h,
        width: w,
        channels: (0..3).map(|c| Raster::filled(h, w, c as f64)).collect(),
        stats: vec![(0.0, 1.0); 3],
    };
    let cfg = InferenceConfig { stride: 7, tile_batch: 5, threshold: 0.5 };
    let map = predict_tiles(&stack, 32, 3, &cfg, |chunk, _| {
        Ok(chunk.iter().map(|_| vec![vec![0.37; 32 * 32], vec![0.61; 32 * 32], vec![0.13; 32 * 32]]).collect())
    })
    .map_err(|e| e.to_string())?;
    let dev = [(&map.vessel, 0.37), (&map.artery, 0.61), (&map.vein, 0.13)]
        .iter()
        .flat_map(|(r, c)| r.data.iter().map(move |v| (v - c).abs()))
        .fold(0.0f64, f64::max);
    ensure(dev <= 1e-12, || format!("constant stub deviates by {dev}"))?;
    Ok(format!("500 random grids covered; DRIVE grid 53x52; constant stub max deviation {dev:.1e}"))
}

fn schedule() -> Check {
    let cases = [(0, 0.05), (7499, 0.05), (7500, 0.025), (14999, 0.025), (15000, 0.0125)];
    for (it, want) in cases {
        let got = lr_at(it, 0.05, 7500);
        ensure(got == want, || format!("lr_at({it}) = {got}, expected {want}"))?;
    }
    Ok("0.05 -> 0.025 @ 7500 -> 0.0125 @ 15000".into())
}

// End-to-end criteria run the CLI itself with the desk configuration.

const DATA_SEED: &str = "1";

fn desk_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.cfg")
}

fn cli(argv: &[&str]) -> Result<(), String> {
    let cfg = desk_config();
    let mut full = vec!["avseg", "--config", cfg.to_str().expect("utf-8 path")];
    full.extend_from_slice(argv);
    match run(full.iter().copied()) {
        0 => Ok(()),
        code => Err(format!("`avseg {}` exited with {code}", argv.join(" "))),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// `(acc from counts, auc)` of one metrics.tsv row.
fn metric_row(path: &Path, kind: &str, mode: &str) -> Result<(f64, f64), String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let line = text
        .lines()
        .map(|l| l.split('\t').collect::<Vec<_>>())
        .find(|f| f.len() == 11 && f[0] == kind && f[1] == mode)
        .ok_or_else(|| format!("{}: no {kind}/{mode} row", path.display()))?;
    let n = |i: usize| line[i].parse::<f64>().map_err(|e| format!("{}: {e}", line[i]));
    let (tp, fp, tn, fn_) = (n(7)?, n(8)?, n(9)?, n(10)?);
    Ok(((tp + tn) / (tp + fp + tn + fn_), n(6)?))
}

fn end_to_end(root: &Path, run_dir: &Path, threads: &str) -> Result<(f64, f64), String> {
    let data = root.join("data");
    let pred = run_dir.join("pred");
    let ckpt = run_dir.join("checkpoint.ckpt");
    let t = ["--threads", threads];
    if !data.join("manifest.txt").exists() {
        cli(&["synth", "--seed", DATA_SEED, "--train", "30", "--test", "10", "--size", "128", "--out", s(&data), t[0], t[1]])?;
    }
    cli(&["train", "--data", s(&data), "--out", s(run_dir), t[0], t[1]])?;
    cli(&["infer", "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&pred), t[0], t[1]])?;
    cli(&["eval", "--data", s(&data), "--pred", s(&pred), t[0], t[1]])?;
    let metrics = pred.join("metrics.tsv");
    let (_, auc) = metric_row(&metrics, "vessel", "all")?;
    let (av_acc, _) = metric_row(&metrics, "av", "gt_pixels")?;
    Ok((auc, av_acc))
}

fn desk_end_to_end(root: &Path) -> Check {
    let (auc, av) = end_to_end(root, &root.join("e2e"), "1")?;
    ensure(auc >= 0.95 && av >= 0.85, || format!("vessel AUC {auc:.4} (>= 0.95), gt_pixels A/V acc {av:.4} (>= 0.85)"))?;
    Ok(format!("vessel AUC {auc:.4} (>= 0.95), gt_pixels A/V acc {av:.4} (>= 0.85)"))
}

fn ablation(root: &Path, out: &Path, threads: &str) -> Result<(f64, f64), String> {
    let data = root.join("data");
    cli(&["ablate", "--data", s(&data), "--out", s(out), "--threads", threads])?;
    let rows = fs::read_to_string(out.join("ablation.tsv")).map_err(|e| e.to_string())?;
    ensure(rows.lines().count() == 5, || format!("ablation.tsv has {} lines", rows.lines().count()))?;
    let (base, _) = metric_row(&out.join("baseline/metrics.tsv"), "av", "gt_pixels")?;
    let (full, _) = metric_row(&out.join("mt_mi_ac/metrics.tsv"), "av", "gt_pixels")?;
    Ok((base, full))
}

fn ablation_harness(root: &Path) -> Check {
    let (base, full) = ablation(root, &root.join("ablate"), "1")?;
    ensure(full >= base, || format!("full-model A/V acc {full:.4} < baseline {base:.4}"))?;
    Ok(format!("full-model A/V acc {full:.4} >= baseline {base:.4}"))
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if let Ok(bytes) = fs::read(&p) {
                out.insert(p.strip_prefix(root).expect("inside root").to_path_buf(), bytes);
            }
        }
    }
    out
}

fn compare_trees(a: &Path, b: &Path) -> Result<usize, String> {
    let (ta, tb) = (tree(a), tree(b));
    ensure(!ta.is_empty(), || format!("{} is empty", a.display()))?;
    let keys_a: Vec<_> = ta.keys().collect();
    let keys_b: Vec<_> = tb.keys().collect();
    ensure(keys_a == keys_b, || format!("{} and {} hold different files", a.display(), b.display()))?;
    for (k, v) in &ta {
        ensure(tb[k] == *v, || format!("{} differs between runs", k.display()))?;
    }
    Ok(ta.len())
}

fn determinism(root: &Path) -> Check {
    // Reruns use 4 threads: identical bytes then show both run-to-run and
    // thread-count invariance.
    let rerun = root.join("e2e_rerun");
    end_to_end(root, &rerun, "4")?;
    let n_e2e = compare_trees(&root.join("e2e"), &rerun)?;
    ablation(root, &root.join("ablate_rerun"), "4")?;
    let n_abl = compare_trees(&root.join("ablate"), &root.join("ablate_rerun"))?;
    Ok(format!("end-to-end ({n_e2e} files) and ablation ({n_abl} files) byte-identical with --threads 4 vs 1"))
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let work = tempfile::tempdir().expect("temp dir");
    let root = work.path();
    let limits: [(u32, &str, Option<Duration>, Box<dyn Fn() -> Check + '_>); 9] = [
        (1, "spatial activation exactness", Some(Duration::from_secs(1)), Box::new(activation_exactness)),
        (2, "gradient integrity", Some(Duration::from_secs(120)), Box::new(gradient_integrity)),
        (3, "loss identities", Some(Duration::from_secs(1)), Box::new(loss_identities)),
        (4, "metric oracle equivalence", Some(Duration::from_secs(30)), Box::new(metric_oracles)),
        (5, "tiling and stitching", Some(Duration::from_secs(30)), Box::new(tiling)),
        (6, "schedule fidelity", Some(Duration::from_secs(1)), Box::new(schedule)),
        (7, "desk-scale end-to-end", Some(Duration::from_secs(20 * 60)), Box::new(|| desk_end_to_end(root))),
        (8, "ablation harness", None, Box::new(|| ablation_harness(root))),
        (9, "determinism", None, Box::new(|| determinism(root))),
    ];
    let mut failed = 0;
    for (n, name, limit, check) in limits {
        let start = Instant::now();
        let mut outcome = check();
        let took = start.elapsed();
        if let (Ok(_), Some(l)) = (&outcome, limit) {
            if took > l {
                outcome = Err(format!("took {:.1} s, limit {} s", took.as_secs_f64(), l.as_secs()));
            }
        }
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d.as_str()),
            Err(d) => ("FAIL", d.as_str()),
        };
        if outcome.is_err() {
            failed += 1;
        }
        println!("[{tag}] criterion {n}: {name} ({:.2} s): {detail}", took.as_secs_f64());
    }
    println!("acceptance: {} of 9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
