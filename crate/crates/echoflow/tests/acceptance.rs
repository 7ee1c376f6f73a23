//! Acceptance suite: one pass/fail line per criterion, each with its
//! pinned tolerance. Long fits (1000 steps at 64x64) are cached under
//! target/phantom-cache/ keyed by the fit configuration, so reruns render
//! from checkpoints in seconds; a cold cache recomputes everything (hours
//! on one core).

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use echoflow::autodiff::kernels::jacdet_fwd;
use echoflow::autodiff::check_all_ops;
use echoflow::field::LabelMask;
use echoflow::fit::{
    fit_sequence, inverse_fields, propagate, FitConfig, FittedParams,
};
use echoflow::io;
use echoflow::metrics::{
    dice, ef_from_masks, hausdorff, sequence_report, temporal_hd, LV_ENDO,
};
use echoflow::model::{full_network_gradcheck, init_params, ModelParams};
use echoflow::phantom::{generate_phantom, PhantomConfig, PhantomTruth};

fn fnv64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn cache_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/phantom-cache")
}

struct CachedFit {
    params: ModelParams,
    wall_secs: f64,
    final_jdet: f64,
    history: Vec<u8>,
}

/// Load a long fit from the cache, or run and cache it.
fn ensure_fit(truth: &PhantomTruth, config: &FitConfig, suffix: &str) -> CachedFit {
    let key = format!("{:016x}{suffix}", fnv64(&serde_json::to_vec(config).unwrap()));
    let dir = cache_root().join(&key);
    if !dir.join("params.eodm").exists() {
        eprintln!("[acceptance] cache miss, fitting {key} ({} steps)", config.steps);
        let result = fit_sequence(
            &truth.seq,
            &truth.masks[0],
            truth.masks.last().unwrap(),
            config,
        )
        .expect("fit runs");
        fs::create_dir_all(&dir).unwrap();
        let params = match &result.params {
            FittedParams::Cnn(p) => p.clone(),
            FittedParams::Dense(_) => unreachable!("default provider is the network"),
        };
        params.save(&dir.join("params.eodm")).unwrap();
        io::write_loss_csv(&dir.join("history.csv"), &result.history).unwrap();
        let meta = serde_json::json!({
            "wall_secs": result.wall.as_secs_f64(),
            "config": config,
        });
        fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta).unwrap()).unwrap();
    }
    let params = ModelParams::load(&dir.join("params.eodm"), &config.model).unwrap();
    let meta: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.join("meta.json")).unwrap()).unwrap();
    let history = fs::read(dir.join("history.csv")).unwrap();
    let last = std::str::from_utf8(&history)
        .unwrap()
        .lines()
        .last()
        .unwrap()
        .split(',')
        .nth(5)
        .unwrap()
        .parse::<f64>()
        .unwrap();
    CachedFit {
        params,
        wall_secs: meta["wall_secs"].as_f64().unwrap(),
        final_jdet: last,
        history,
    }
}

struct Criteria {
    lines: Vec<String>,
    failures: Vec<String>,
}

impl Criteria {
    fn record(&mut self, name: &str, pass: bool, detail: String) {
        let line = format!(
            "criterion {name}: {} ({detail})",
            if pass { "PASS" } else { "FAIL" }
        );
        println!("{line}");
        if !pass {
            self.failures.push(line.clone());
        }
        self.lines.push(line);
    }
}

fn mean_lv_dice(pred: &[LabelMask], truth: &[LabelMask]) -> f64 {
    let mut m = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        m += dice(p, t, LV_ENDO).unwrap() / pred.len() as f64;
    }
    m
}

/// Brute-force float Hausdorff over 4-neighbor boundary pixels,
/// independent of the production integer-arithmetic implementation.
fn oracle_hausdorff(a: &LabelMask, b: &LabelMask, class: u8, spacing: f64) -> Option<f64> {
    let boundary = |m: &LabelMask| -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for y in 0..m.h {
            for x in 0..m.w {
                if m.labels[y * m.w + x] != class {
                    continue;
                }
                let mut edge = x == 0 || y == 0 || x + 1 == m.w || y + 1 == m.h;
                if !edge {
                    edge = m.labels[y * m.w + x - 1] != class
                        || m.labels[y * m.w + x + 1] != class
                        || m.labels[(y - 1) * m.w + x] != class
                        || m.labels[(y + 1) * m.w + x] != class;
                }
                if edge {
                    out.push((x as f64, y as f64));
                }
            }
        }
        out
    };
    let pa = boundary(a);
    let pb = boundary(b);
    if pa.is_empty() || pb.is_empty() {
        return None;
    }
    let directed = |from: &[(f64, f64)], to: &[(f64, f64)]| -> f64 {
        from.iter()
            .map(|&(x, y)| {
                to.iter()
                    .map(|&(u, v)| ((x - u).powi(2) + (y - v).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    };
    Some(directed(&pa, &pb).max(directed(&pb, &pa)) * spacing)
}

fn random_blob(rng: &mut ChaCha8Rng, h: usize, w: usize) -> LabelMask {
    let mut labels = vec![0u8; h * w];
    let x0 = rng.gen_range(0..w - 2);
    let x1 = rng.gen_range(x0 + 1..w);
    let y0 = rng.gen_range(0..h - 2);
    let y1 = rng.gen_range(y0 + 1..h);
    for y in y0..=y1 {
        for x in x0..=x1 {
            labels[y * w + x] = 1;
        }
    }
    for _ in 0..rng.gen_range(0..20) {
        let y = rng.gen_range(0..h);
        let x = rng.gen_range(0..w);
        labels[y * w + x] = u8::from(rng.gen::<bool>());
    }
    LabelMask::new(labels, h, w)
}

#[test]
fn acceptance() {
    let mut c = Criteria { lines: Vec::new(), failures: Vec::new() };
    let truth = generate_phantom(&PhantomConfig::default()).unwrap();
    let base = FitConfig::default();
    let m0 = &truth.masks[0];

    // 1. every op and the composed network match finite differences
    {
        let start = Instant::now();
        let mut max = 0.0f64;
        for op in check_all_ops(0).unwrap() {
            max = max.max(op.report.max_rel_err);
        }
        max = max.max(full_network_gradcheck(0).unwrap().max_rel_err);
        let secs = start.elapsed().as_secs_f64();
        c.record(
            "1 gradcheck (max rel err < 1e-4, < 120 s)",
            max < 1e-4 && secs < 120.0,
            format!("max rel err {max:.3e}, {secs:.1} s"),
        );
    }

    // 2. fresh parameters give the identity: masks stay m0, penalties 0
    {
        let mut masks_ok = true;
        for seed in [0u64, 3, 11] {
            let fresh = FittedParams::Cnn(init_params(seed, &base.model));
            let (_, masks) = propagate(&fresh, &truth.seq, m0, &base).unwrap();
            masks_ok &= masks.iter().all(|m| m.labels == m0.labels);
        }
        let one_step = FitConfig { steps: 1, ..base.clone() };
        let result =
            fit_sequence(&truth.seq, m0, truth.masks.last().unwrap(), &one_step).unwrap();
        let first = result.history[0];
        c.record(
            "2 identity init (step-0 masks == m0 bitwise, jdet/smt exactly 0)",
            masks_ok && first.jdet == 0.0 && first.smt == 0.0,
            format!("masks equal: {masks_ok}, jdet {}, smt {}", first.jdet, first.smt),
        );
    }

    // Long fits, seeds 0..4 at the default config.
    let seeds: Vec<(CachedFit, Vec<echoflow::field::DeformationField>, Vec<LabelMask>)> = (0..5)
        .map(|seed| {
            let config = FitConfig { seed, ..base.clone() };
            let fit = ensure_fit(&truth, &config, "");
            let (fields, masks) =
                propagate(&FittedParams::Cnn(fit.params.clone()), &truth.seq, m0, &config)
                    .unwrap();
            (fit, fields, masks)
        })
        .collect();

    // 3. segmentation recovery and per-fit runtime
    {
        let mut worst_dice = f64::INFINITY;
        let mut worst_wall = 0.0f64;
        let mut detail = String::new();
        for (seed, (fit, _, masks)) in seeds.iter().enumerate() {
            let d = mean_lv_dice(masks, &truth.masks);
            worst_dice = worst_dice.min(d);
            worst_wall = worst_wall.max(fit.wall_secs);
            write!(detail, "seed {seed}: {d:.4}, {:.0} s; ", fit.wall_secs).unwrap();
        }
        c.record(
            "3a LV dice >= 0.95 for seeds 0..4",
            worst_dice >= 0.95,
            format!("worst {worst_dice:.4}; {}", detail.trim_end_matches("; ")),
        );
        c.record(
            "3b fit wall time <= 900 s",
            worst_wall <= 900.0,
            format!("worst {worst_wall:.0} s on one core"),
        );
    }

    // 4. ejection fraction within +-0.05 of the analytic 0.36
    {
        let mut worst = 0.0f64;
        for (_, _, masks) in &seeds {
            let ef = ef_from_masks(&masks[0], masks.last().unwrap()).unwrap();
            worst = worst.max((ef - 0.36).abs());
        }
        c.record(
            "4 EF within +-0.05 of 0.36",
            worst <= 0.05,
            format!("worst |err| {worst:.4} over seeds 0..4"),
        );
    }

    // 5. topology: positive determinants and a vanished fold penalty
    {
        let (h, w) = (truth.seq.h, truth.seq.w);
        let mut pos = 0usize;
        let mut tot = 0usize;
        let mut worst_jdet = 0.0f64;
        for (fit, fields, _) in &seeds {
            for f in fields {
                let mut det = vec![0.0; (h - 1) * (w - 1)];
                jacdet_fwd(&f.phi, h, w, &mut det);
                pos += det.iter().filter(|&&d| d > 0.0).count();
                tot += det.len();
            }
            worst_jdet = worst_jdet.max(fit.final_jdet);
        }
        let frac = pos as f64 / tot as f64;
        c.record(
            "5 topology (det > 0 for >= 99.5% of interior px, final fold penalty < 1e-6)",
            frac >= 0.995 && worst_jdet < 1e-6,
            format!("det>0 {:.4}%, worst final penalty {worst_jdet:.3e}", 100.0 * frac),
        );
    }

    // 6. inverse consistency on the seed-0 fit
    {
        let config = FitConfig { seed: 0, ..base.clone() };
        let fitted = FittedParams::Cnn(seeds[0].0.params.clone());
        let invs = inverse_fields(&fitted, &truth.seq, m0, &config).unwrap();
        let (h, w) = (truth.seq.h, truth.seq.w);
        let mut sum = 0.0;
        let mut n = 0usize;
        for (fwd, inv) in seeds[0].1.iter().zip(&invs) {
            for y in 0..h {
                for x in 0..w {
                    let j = (y * w + x) * 2;
                    let (u, v) = (inv.phi[j], inv.phi[j + 1]);
                    let x0 = (u.floor().max(0.0) as usize).min(w - 2);
                    let y0 = (v.floor().max(0.0) as usize).min(h - 2);
                    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
                    let mut px = 0.0;
                    let mut py = 0.0;
                    for (dy, wy) in [(0usize, 1.0 - fy), (1, fy)] {
                        for (dx, wx) in [(0usize, 1.0 - fx), (1, fx)] {
                            let k = ((y0 + dy) * w + x0 + dx) * 2;
                            px += wy * wx * fwd.phi[k];
                            py += wy * wx * fwd.phi[k + 1];
                        }
                    }
                    sum += ((px - x as f64).powi(2) + (py - y as f64).powi(2)).sqrt();
                    n += 1;
                }
            }
        }
        let mean = sum / n as f64;
        c.record(
            "6 inverse consistency (mean ||phi(phi^-1(p)) - p|| < 0.5 px)",
            mean < 0.5,
            format!("mean {mean:.4} px over all frames, seed 0"),
        );
    }

    // 7. temporal smoothness of the propagated masks
    {
        let mut worst_hd = 0.0f64;
        let mut flagged = 0usize;
        let mut names = std::collections::BTreeSet::new();
        for (_, _, masks) in &seeds {
            worst_hd = worst_hd.max(temporal_hd(masks, LV_ENDO, 1.0).unwrap());
            let report = sequence_report(masks, &truth.masks, None, 0.15).unwrap();
            if report.temporal_error {
                flagged += 1;
                for (name, flags) in &report.attribute_flags {
                    if flags.iter().any(|&f| f) {
                        names.insert(name.clone());
                    }
                }
            }
        }
        c.record(
            "7a temporal HD <= 2.0 px",
            worst_hd <= 2.0,
            format!("worst {worst_hd:.4} px over seeds 0..4"),
        );
        c.record(
            "7b temporal consistency flags 0 of 5 sequences at tau=0.15",
            flagged == 0,
            format!("{flagged} of 5 flagged; attributes: {names:?}"),
        );
    }

    // 8. halving the solver step barely moves the final field
    {
        let fine_config = FitConfig { h: 0.05, ..base.clone() };
        let fine = ensure_fit(&truth, &fine_config, "");
        let (fine_fields, _) =
            propagate(&FittedParams::Cnn(fine.params), &truth.seq, m0, &fine_config).unwrap();
        let coarse = &seeds[0].1;
        let a = &coarse.last().unwrap().phi;
        let b = &fine_fields.last().unwrap().phi;
        let mut sum = 0.0;
        for i in (0..a.len()).step_by(2) {
            sum += ((a[i] - b[i]).powi(2) + (a[i + 1] - b[i + 1]).powi(2)).sqrt();
        }
        let mean = sum / (a.len() / 2) as f64;
        c.record(
            "8 step-size refit (mean |phi_1(h=0.05) - phi_1(h=0.1)| < 0.25 px)",
            mean < 0.25,
            format!("mean {mean:.4} px"),
        );
    }

    // 9. production distance metrics agree with independent oracles
    {
        let mut rng = ChaCha8Rng::seed_from_u64(777);
        let mut checked = 0;
        let mut agree = true;
        while checked < 100 {
            let h = rng.gen_range(4..=32);
            let w = rng.gen_range(4..=32);
            let a = random_blob(&mut rng, h, w);
            let b = random_blob(&mut rng, h, w);
            let Some(want) = oracle_hausdorff(&a, &b, 1, 0.7) else { continue };
            let got = hausdorff(&a, &b, 1, 0.7).unwrap();
            agree &= (got - want).abs() < 1e-12;
            checked += 1;
        }
        // dice on hand-counted overlap: 2x2 blocks sharing two pixels
        let a = LabelMask::new(vec![1, 1, 1, 1, 0, 0], 3, 2);
        let b = LabelMask::new(vec![0, 0, 1, 1, 1, 1], 3, 2);
        let d = dice(&a, &b, 1).unwrap();
        c.record(
            "9 metric oracles (hausdorff == brute force on 100 pairs, dice hand count)",
            agree && d == 0.5,
            format!("all pairs agree: {agree}, dice {d}"),
        );
    }

    // 10. two independent full fits are bitwise identical end to end
    {
        let config = FitConfig { seed: 0, ..base.clone() };
        let b = ensure_fit(&truth, &config, "-b");
        let a = &seeds[0].0;
        let params_equal = {
            let dir = tempfile::tempdir().unwrap();
            let (pa, pb) = (dir.path().join("a.eodm"), dir.path().join("b.eodm"));
            a.params.save(&pa).unwrap();
            b.params.save(&pb).unwrap();
            fs::read(pa).unwrap() == fs::read(pb).unwrap()
        };
        let history_equal = a.history == b.history;

        let (fields_b, masks_b) =
            propagate(&FittedParams::Cnn(b.params.clone()), &truth.seq, m0, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (da, db) = (dir.path().join("a"), dir.path().join("b"));
        for (d, fields, masks) in
            [(&da, &seeds[0].1, &seeds[0].2), (&db, &fields_b, &masks_b)]
        {
            fs::create_dir_all(d).unwrap();
            io::save_masks(d, masks).unwrap();
            io::write_field_dump(&d.join("fields.eodf"), fields).unwrap();
            let report = sequence_report(masks, &truth.masks, Some(0.3), 0.15).unwrap();
            fs::write(d.join("report.json"), serde_json::to_vec_pretty(&report).unwrap())
                .unwrap();
        }
        let mut files_equal = true;
        for name in (0..truth.seq.num_frames())
            .map(io::mask_name)
            .chain(["fields.eodf".into(), "report.json".into()])
        {
            files_equal &=
                fs::read(da.join(&name)).unwrap() == fs::read(db.join(&name)).unwrap();
        }
        c.record(
            "10 determinism (independent identical-seed runs match bitwise)",
            params_equal && history_equal && files_equal,
            format!(
                "checkpoints: {params_equal}, histories: {history_equal}, masks/fields/reports: {files_equal}"
            ),
        );
    }

    println!("\n{}", c.lines.join("\n"));
    assert!(
        c.failures.is_empty(),
        "{} criterion(s) failed:\n{}",
        c.failures.len(),
        c.failures.join("\n")
    );
}
