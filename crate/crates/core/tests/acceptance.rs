// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Each test prints one `PASS`/`FAIL` line and then
//! asserts. Run with `--nocapture` (and `--release` for representative
//! timings).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use factum::classify::{loss_and_gradient, make_folds};
use factum::features::{aggregate_heads, prune, rank_components, retained_count, Component};
use factum::ftrc::{decode, encode, FtrcErrorKind};
use factum::oracle::{
    naive_scores, random_trace, residual_reconstruction_error, toy_forward_trace, ToyConfig, ToyTransformerWeights,
};
use factum::scores::{score_citation, CitationKey, ScoreKind, ScoreSet};
use factum::stats::{auc, bh_correct, mann_whitney_u_with, Alternative, MwuMethod};
use factum::trace::{ModelGeometry, ReportTrace};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(name: &str, pass: bool, detail: impl AsRef<str>, elapsed: Duration) -> bool {
    println!("{} {name}: {} [{:.2?}]", if pass { "PASS" } else { "FAIL" }, detail.as_ref(), elapsed);
    pass
}

/// 100 toy traces over varied weights, prompt lengths and citation positions.
fn toy_traces(n: u64) -> Vec<ReportTrace<f64>> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
            let w = ToyTransformerWeights::<f64>::random(&ToyConfig::default(), i);
            let prompt = rng.random_range(6..40);
            let mut positions: Vec<usize> = (0..rng.random_range(1..5)).map(|_| prompt + rng.random_range(0..12)).collect();
            positions.sort_unstable();
            positions.dedup();
            toy_forward_trace(&w, prompt, &positions, i).unwrap().trace
        })
        .collect()
}

#[test]
fn residual_additivity() {
    let t0 = Instant::now();
    let traces = toy_traces(100);
    let worst = traces
        .iter()
        .flat_map(|t| &t.citations)
        .map(residual_reconstruction_error)
        .fold(0.0f64, f64::max);
    let el = t0.elapsed();
    let pass = worst <= 1e-5 && el < Duration::from_secs(5);
    assert!(verdict(
        "residual additivity",
        pass,
        format!("100 toy traces, worst relative reconstruction error {worst:.2e} (limit 1e-5, < 5 s)"),
        el
    ));
}

fn bounds_violation(s: &ScoreSet<f64>) -> Option<String> {
    let in_unit = |v: f64| (-1.0..=1.0).contains(&v);
    let checks: [(&str, bool); 6] = [
        ("cas", s.cas.iter().all(|&v| in_unit(v))),
        ("pas", s.pas.iter().all(|&v| in_unit(v))),
        ("ecs", s.ecs.iter().all(|&v| in_unit(v))),
        ("bas", s.bas.iter().all(|&v| (0.0..=1.0).contains(&v))),
        ("pfs", s.pfs.iter().all(|&v| v >= 0.0)),
        ("pks", s.pks.as_ref().is_none_or(|p| p.iter().all(|&v| v >= 0.0))),
    ];
    checks.iter().find(|c| !c.1).map(|c| c.0.to_string())
}

#[test]
fn score_bounds() {
    let t0 = Instant::now();
    let mut records = 0usize;
    let mut failures = Vec::new();
    for seed in 0..1100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = ModelGeometry::new(rng.random_range(1..7), rng.random_range(1..5), rng.random_range(2..12), "random");
        let t = random_trace(&g, rng.random_range(1..20), 10, seed);
        for c in &t.citations {
            let s = score_citation(c, &t).unwrap();
            records += 1;
            if let Some(bad) = bounds_violation(&s) {
                failures.push(format!("random-{seed}: {bad}"));
            }
        }
    }
    for t in toy_traces(100) {
        for c in &t.citations {
            let s = score_citation(c, &t).unwrap();
            records += 1;
            if let Some(bad) = bounds_violation(&s) {
                failures.push(format!("{}: {bad}", t.report_id));
            }
        }
    }
    let el = t0.elapsed();
    let pass = records >= 10_000 && failures.is_empty() && el < Duration::from_secs(30);
    assert!(
        verdict(
            "score bounds",
            pass,
            format!("{records} records, {} out of range or NaN (first: {:?}) (< 30 s)", failures.len(), failures.first()),
            el
        ),
        "{failures:?}"
    );
}

fn max_abs_diff(a: &ScoreSet<f64>, b: &ScoreSet<f64>) -> f64 {
    let m2 = |x: &Array2<f64>, y: &Array2<f64>| x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    let m1 = |x: &Array1<f64>, y: &Array1<f64>| x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    let mut d = m2(&a.cas, &b.cas).max(m2(&a.bas, &b.bas)).max(m2(&a.ecs, &b.ecs));
    d = d.max(m1(&a.pfs, &b.pfs)).max(m1(&a.pas, &b.pas));
    d = match (&a.pks, &b.pks) {
        (Some(x), Some(y)) => d.max(m1(x, y)),
        (None, None) => d,
        _ => f64::INFINITY,
    };
    let (ca, cb) = (&a.confidence, &b.confidence);
    let rel = |x: f64, y: f64| (x - y).abs() / x.abs().max(1.0);
    d = d.max(rel(ca.perplexity, cb.perplexity)).max(rel(ca.ln_entropy, cb.ln_entropy)).max(rel(ca.energy, cb.energy));
    match (ca.p_true, cb.p_true) {
        (Some(x), Some(y)) => d.max((x - y).abs()),
        (None, None) => d,
        _ => f64::INFINITY,
    }
}

#[test]
fn oracle_equivalence() {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut flag_mismatch = 0;
    let mut n = 0;
    for t in toy_traces(100) {
        for c in &t.citations {
            let fast = score_citation(c, &t).unwrap();
            let slow = naive_scores(c, &t);
            worst = worst.max(max_abs_diff(&fast, &slow));
            flag_mismatch += usize::from(fast.degenerate != slow.degenerate);
            n += 1;
        }
    }
    let el = t0.elapsed();
    let pass = worst <= 1e-6 && flag_mismatch == 0;
    assert!(verdict(
        "oracle equivalence",
        pass,
        format!("{n} citations from 100 toy traces, max |kernel - naive| {worst:.2e} (limit 1e-6), flag mismatches {flag_mismatch}"),
        el
    ));
}

#[test]
fn pruning_arithmetic() {
    let t0 = Instant::now();
    let g = ModelGeometry::new(32, 32, 4, "wide");
    let traces: Vec<ReportTrace<f64>> = (0..3).map(|s| random_trace(&g, 6, 4, s)).collect();
    let mut sets = Vec::new();
    let mut keys = Vec::new();
    for t in &traces {
        for (i, c) in t.citations.iter().enumerate() {
            sets.push(score_citation(c, t).unwrap());
            keys.push(CitationKey { report_id: t.report_id.clone(), ordinal: i });
        }
    }
    let refs: Vec<&ScoreSet<f64>> = sets.iter().collect();
    let labels: Vec<bool> = (0..refs.len()).map(|i| i % 2 == 0).collect();
    let kinds = [ScoreKind::Cas, ScoreKind::Bas, ScoreKind::Ecs];
    let ranking = rank_components(&refs, &labels, &kinds, &keys).unwrap();
    let totals: Vec<usize> = kinds.iter().map(|k| ranking.scores[k].len()).collect();
    let kept25: Vec<usize> = kinds.iter().map(|k| prune(&ranking, 25.0).unwrap().scores[k].len()).collect();
    let full = prune(&ranking, 100.0).unwrap();
    let all: BTreeSet<Component> =
        (0..32).flat_map(|l| (0..32).map(move |h| Component { layer: l, head: Some(h) })).collect();
    let identity_mask = kinds.iter().all(|k| full.scores[k] == all);
    let identity_features = sets.iter().all(|s| {
        kinds.iter().all(|&k| {
            let m = s.head(k).unwrap().view();
            aggregate_heads(m, Some(&full.scores[&k])) == aggregate_heads(m, None)
        })
    });
    let pass = totals.iter().all(|&t| t == 1024)
        && kept25.iter().all(|&k| k == 256)
        && retained_count(1024, 25.0) == 256
        && identity_mask
        && identity_features;
    assert!(verdict(
        "pruning arithmetic",
        pass,
        format!("32x32 components {totals:?}, k=25 keeps {kept25:?}, k=100 identity {}", identity_mask && identity_features),
        t0.elapsed()
    ));
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_factum")
}

fn factum(args: &[&str]) -> String {
    let out = Command::new(bin()).args(args).env("FACTUM_THREADS", "4").output().expect("spawn factum");
    assert!(out.status.success(), "factum {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn table1_auc(path: &Path, variant: &str) -> f64 {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let cols: Vec<&str> = lines.next().unwrap().split(',').collect();
    let (vi, ai) = (cols.iter().position(|&c| c == "variant").unwrap(), cols.iter().position(|&c| c == "auc").unwrap());
    let row = lines.map(|l| l.split(',').collect::<Vec<_>>()).find(|r| r[vi] == variant).unwrap();
    row[ai].parse().unwrap()
}

#[test]
fn planted_signal_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).display().to_string();
    let t0 = Instant::now();
    factum(&["gen-synthetic", "--seed", "0", "--out", &p("planted")]);
    factum(&[
        "run", "--manifest", &p("planted/manifest.json"), "--labels", &p("planted/labels.json"),
        "--variant", "factum", "--seed", "0", "--out", &p("run"),
    ]);
    factum(&["gen-synthetic", "--seed", "0", "--permute-labels", "100", "--out", &p("null")]);
    factum(&[
        "run", "--manifest", &p("null/manifest.json"), "--labels", &p("null/labels.json"),
        "--variant", "factum", "--seed", "0", "--out", &p("null_run"),
    ]);
    let el = t0.elapsed();
    let planted = table1_auc(&dir.path().join("run/table1.csv"), "factum");
    let permuted = table1_auc(&dir.path().join("null_run/table1.csv"), "factum");
    let pass = planted >= 0.90 && (0.40..=0.60).contains(&permuted) && el < Duration::from_secs(60);
    assert!(verdict(
        "planted signal end-to-end",
        pass,
        format!("mean CV AUC {planted:.4} (>= 0.90), label-permuted {permuted:.4} (in [0.40, 0.60]) (< 60 s)"),
        el
    ));
}

/// `(score, arrow, tier)` rows of a table2.csv.
fn table2(path: &Path) -> Vec<(String, String, String)> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            (c[0].to_string(), c[3].to_string(), c[4].to_string())
        })
        .collect()
}

#[test]
fn signature_recovery() {
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let mut planted_ok = 0;
    let mut null_ok = 0;
    let mut misses = Vec::new();
    for seed in 0..10u64 {
        let s = seed.to_string();
        for (kind, permute) in [("planted", None), ("null", Some((seed + 100).to_string()))] {
            let data = dir.path().join(format!("{kind}{seed}"));
            let out = dir.path().join(format!("{kind}{seed}_sig"));
            let data_s = data.display().to_string();
            let mut gen = vec!["gen-synthetic", "--seed", &s, "--out", &data_s];
            if let Some(p) = &permute {
                gen.extend(["--permute-labels", p.as_str()]);
            }
            factum(&gen);
            let manifest = data.join("manifest.json").display().to_string();
            let labels = data.join("labels.json").display().to_string();
            let out_s = out.display().to_string();
            factum(&["signatures", "--manifest", &manifest, "--labels", &labels, "--seed", &s, "--out", &out_s]);
            let rows = table2(&out.join("table2.csv"));
            let ok = rows.iter().all(|(score, arrow, tier)| match (kind, score.as_str()) {
                ("planted", "bas" | "pfs") => arrow == "↑" && tier == "p<0.001",
                _ => arrow == "—" && tier == "n.s.",
            });
            if ok {
                if permute.is_none() {
                    planted_ok += 1
                } else {
                    null_ok += 1
                }
            } else {
                misses.push(format!("{kind} seed {seed}: {rows:?}"));
            }
        }
    }
    let el = t0.elapsed();
    for m in &misses {
        println!("  miss {m}");
    }
    let pass = planted_ok >= 8 && null_ok >= 8;
    assert!(verdict(
        "signature recovery",
        pass,
        format!("planted: {planted_ok}/10 seeds with BAS/PFS up at p<0.001 and CAS/PAS n.s.; label-permuted: {null_ok}/10 all n.s. (need >= 8)"),
        el
    ));
}

#[test]
fn statistics_fixtures() {
    let t0 = Instant::now();
    let a = auc(&[0.9, 0.8, 0.7, 0.1], &[true, false, true, false]);
    let bh = bh_correct(&[0.01, 0.02, 0.03, 0.04], 0.05).unwrap();
    let mwu = mann_whitney_u_with(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], Alternative::Less, MwuMethod::Exact).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (n, p) = (60, 5);
    let x = Array2::from_shape_fn((n, p), |_| rng.random_range(-2.0..2.0));
    let y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    let w = Array1::from_shape_fn(p, |_| rng.random_range(-1.0..1.0));
    let b = 0.3;
    let lambda = 0.05;
    let pinned = vec![false; p];
    let (_, grad, grad_b) = loss_and_gradient(x.view(), &y, w.view(), b, lambda, &pinned);
    let h = 1e-6;
    let loss_at = |w: &Array1<f64>, b: f64| loss_and_gradient(x.view(), &y, w.view(), b, lambda, &pinned).0;
    let mut worst = 0.0f64;
    for j in 0..=p {
        let (analytic, fd) = if j < p {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[j] += h;
            wm[j] -= h;
            (grad[j], (loss_at(&wp, b) - loss_at(&wm, b)) / (2.0 * h))
        } else {
            (grad_b, (loss_at(&w, b + h) - loss_at(&w, b - h)) / (2.0 * h))
        };
        worst = worst.max((analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8));
    }

    let auc_ok = a == Some(0.75);
    let bh_ok = bh.adjusted.iter().all(|&q| (q - 0.04).abs() < 1e-12);
    let mwu_ok = mwu.exact && (mwu.p - 0.05).abs() < 1e-12;
    let grad_ok = worst <= 1e-4;
    assert!(verdict(
        "statistics fixtures",
        auc_ok && bh_ok && mwu_ok && grad_ok,
        format!(
            "AUC {a:?} (0.75), BH {:?} (all 0.04), exact MWU p {} (0.05), gradient rel. error {worst:.1e} (<= 1e-4)",
            bh.adjusted, mwu.p
        ),
        t0.elapsed()
    ));
}

#[test]
fn fold_integrity() {
    let t0 = Instant::now();
    let mut failures = Vec::new();
    let mut exact_cases = 0;
    for config in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + config);
        let n_reports = rng.random_range(10..80);
        let n_folds = rng.random_range(2..=10.min(n_reports));
        let rate = rng.random_range(0.1..0.9);
        let max_cites = rng.random_range(1..16);
        let mut groups = Vec::new();
        let mut labels = Vec::new();
        for r in 0..n_reports {
            for _ in 0..rng.random_range(1..=max_cites) {
                groups.push(format!("g{r}"));
                labels.push(rng.random_bool(rate));
            }
        }
        if !labels.iter().any(|&y| y) {
            labels[0] = true;
        }
        if labels.iter().all(|&y| y) {
            labels[0] = false;
        }
        let plan = make_folds(&groups, &labels, n_folds, config).unwrap();

        // no report spans folds, every report placed exactly once
        let mut fold_of: BTreeMap<&str, usize> = BTreeMap::new();
        for (f, reports) in plan.folds.iter().enumerate() {
            for r in reports {
                if fold_of.insert(r.as_str(), f).is_some() {
                    failures.push(format!("config {config}: {r} listed twice"));
                }
            }
        }
        for (i, g) in groups.iter().enumerate() {
            if fold_of.get(g.as_str()) != Some(&plan.row_fold[i]) {
                failures.push(format!("config {config}: row {i} of {g} outside its report's fold"));
            }
        }
        if fold_of.len() != n_reports {
            failures.push(format!("config {config}: {} of {n_reports} reports placed", fold_of.len()));
        }

        // positive balance: within 2 of each other whenever no single report
        // carries more than 2 positives; otherwise within the largest report
        let mut per_report: BTreeMap<&str, usize> = BTreeMap::new();
        for (g, &y) in groups.iter().zip(&labels) {
            *per_report.entry(g.as_str()).or_default() += usize::from(y);
        }
        let largest = per_report.values().copied().max().unwrap_or(0);
        let counts = plan.positives_per_fold(&labels);
        let spread = counts.iter().max().unwrap() - counts.iter().min().unwrap();
        let limit = largest.max(2);
        exact_cases += usize::from(largest <= 2);
        if spread > limit {
            failures.push(format!("config {config}: positives per fold {counts:?}, spread {spread} > {limit}"));
        }
    }
    let el = t0.elapsed();
    assert!(
        verdict(
            "fold integrity",
            failures.is_empty(),
            format!("50 group configurations ({exact_cases} with the strict +-2 bound), {} violations", failures.len()),
            el
        ),
        "{failures:#?}"
    );
}

fn reseal(mut bytes: Vec<u8>) -> Vec<u8> {
    let n = bytes.len() - 4;
    let crc = crc32fast::hash(&bytes[..n]);
    bytes[n..].copy_from_slice(&crc.to_le_bytes());
    bytes
}

/// Rewrites the JSON header through `edit` and recomputes lengths and CRC.
fn edit_header(bytes: &[u8], edit: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
    let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[10..10 + header_len]).unwrap();
    edit(&mut header);
    let text = serde_json::to_vec(&header).unwrap();
    let mut out = bytes[..6].to_vec();
    out.extend((text.len() as u32).to_le_bytes());
    out.extend(&text);
    out.extend(&bytes[10 + header_len..]);
    reseal(out)
}

fn block_offset(bytes: &[u8], name: &str) -> usize {
    let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[10..10 + header_len]).unwrap();
    let b = header["blocks"].as_array().unwrap().iter().find(|b| b["name"] == name).unwrap();
    10 + header_len + b["offset"].as_u64().unwrap() as usize
}

#[test]
fn ftrc_round_trip_and_corruption() {
    let t0 = Instant::now();
    let mut round_trip_failures = Vec::new();
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = ModelGeometry::new(rng.random_range(1..6), rng.random_range(1..5), rng.random_range(2..10), "rt");
        let t = random_trace(&g, rng.random_range(1..16), rng.random_range(0..6), seed).cast::<f32>();
        match encode(&t).and_then(|b| decode(&b)) {
            Ok(back) if back == t => {}
            other => round_trip_failures.push(format!("seed {seed}: {:?}", other.map(|_| "differs"))),
        }
    }

    let w = ToyTransformerWeights::<f32>::random(&ToyConfig::default(), 3);
    let base = encode(&toy_forward_trace(&w, 24, &[26, 30], 9).unwrap().trace).unwrap();
    let n = base.len();
    let mut cases: Vec<(&str, Vec<u8>, FtrcErrorKind)> = Vec::new();
    for i in 0..4 {
        let mut b = base.clone();
        b[i] ^= 0x20;
        cases.push(("magic byte flipped", b, FtrcErrorKind::BadMagic));
    }
    for v in [0u16, 2] {
        let mut b = base.clone();
        b[4..6].copy_from_slice(&v.to_le_bytes());
        cases.push(("version changed", b, FtrcErrorKind::UnsupportedVersion));
    }
    for cut in [n - 1, n / 2, 8] {
        cases.push(("truncated", base[..cut].to_vec(), FtrcErrorKind::Truncated));
    }
    for pos in [20, n / 2, n - 2] {
        let mut b = base.clone();
        b[pos] ^= 0x01;
        cases.push(("bit flip", b, FtrcErrorKind::CrcMismatch));
    }
    for i in [0usize, 3] {
        cases.push((
            "block offset shifted",
            edit_header(&base, |h| {
                let o = h["blocks"][i]["offset"].as_u64().unwrap();
                h["blocks"][i]["offset"] = (o + 4).into();
            }),
            FtrcErrorKind::OffsetMismatch,
        ));
    }
    for i in [1usize, 4] {
        cases.push((
            "payload length changed",
            edit_header(&base, |h| {
                let l = h["blocks"][i]["payload_len"].as_u64().unwrap();
                h["blocks"][i]["payload_len"] = (l + 4).into();
            }),
            FtrcErrorKind::DimsMismatch,
        ));
    }
    let mut padded = base[..n - 4].to_vec();
    padded.extend([0u8; 8]);
    padded.extend([0u8; 4]);
    cases.push(("trailing bytes", reseal(padded), FtrcErrorKind::Layout));
    cases.push((
        "citation count changed",
        edit_header(&base, |h| h["citation_count"] = 5.into()),
        FtrcErrorKind::Header,
    ));
    let mut garbled = base.clone();
    garbled[10] = b'!';
    cases.push(("header not JSON", reseal(garbled), FtrcErrorKind::Header));
    let mut invalid = base.clone();
    let at = block_offset(&base, "attn_sink[citation 0]");
    let rank = invalid[at + 4] as usize;
    invalid[at + 5 + 4 * rank..at + 9 + 4 * rank].copy_from_slice(&2.0f32.to_le_bytes());
    cases.push(("sink weight above 1", reseal(invalid), FtrcErrorKind::Invalid));

    let mut corruption_failures = Vec::new();
    for (what, bytes, expected) in &cases {
        match decode(bytes) {
            Err(e) if e.kind() == *expected => {}
            other => corruption_failures.push(format!("{what}: expected {expected:?}, got {:?}", other.map(|_| "Ok"))),
        }
    }
    let el = t0.elapsed();
    let pass = round_trip_failures.is_empty() && corruption_failures.is_empty() && cases.len() == 20;
    assert!(
        verdict(
            "FTRC round-trip",
            pass,
            format!(
                "100 random traces, {} not bit-exact; {} mutations, {} with the wrong error kind",
                round_trip_failures.len(),
                cases.len(),
                corruption_failures.len()
            ),
            el
        ),
        "{round_trip_failures:?} {corruption_failures:?}"
    );
}
