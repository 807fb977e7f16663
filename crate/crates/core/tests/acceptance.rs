//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use teachcut::changepoint::detect_downward_change_with_eps;
use teachcut::diagnostics::{
    binned_advantage_stats, binned_margin_curve, snr_release_check, spearman_rank_correlation,
};
use teachcut::pipeline::analyze_rollout;
use teachcut::reweight::{permute_release_points, rescale_advantages, ReleaseSlot};
use teachcut::synthetic::{
    generate_indexed, generate_piecewise_rollout, generate_profile_rollout, oracle_change_point,
    SyntheticConfig,
};
use teachcut::{parse_rollout_record, teacher_top2_margin, PipelineConfig, BIC_EPS, RESCALE_EPS};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn within_budget(elapsed: Duration, budget: Duration) -> bool {
    elapsed < budget
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn hand_worked_change_point() -> Outcome {
    let s = [2.0, 2.0, 2.0, 0.0, 0.0, 0.0];
    let start = Instant::now();
    let d = detect_downward_change_with_eps(&s, BIC_EPS);
    let elapsed = start.elapsed();
    let bic0 = d.bic_null().unwrap_or(f64::NAN);
    let bic1 = d.bic_drop().unwrap_or(f64::NAN);
    let ok = d.accepted()
        && d.release_segment() == 3
        && (bic0 - 1.79176).abs() <= 1e-4
        && (bic1 + 171.16).abs() <= 1e-2
        && (d.bic_gain() - 172.95).abs() <= 1e-2
        && within_budget(elapsed, Duration::from_millis(1));
    outcome(
        ok,
        format!(
            "tau*={} accepted={} BIC0={bic0:.5} BIC1={bic1:.3} gain={:.3} in {elapsed:?}",
            d.release_segment(),
            d.accepted(),
            d.bic_gain()
        ),
    )
}

fn random_score_sequence(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rng.gen_range(1..=200);
    let noise = [0.0, 0.01, 0.1, 0.5][rng.gen_range(0..4)];
    if rng.gen_bool(0.5) && n >= 2 {
        let tau = rng.gen_range(1..n);
        let pre: f64 = rng.gen_range(0.0..3.0);
        let post: f64 = rng.gen_range(0.0..pre.max(1e-3));
        (0..n)
            .map(|i| if i < tau { pre } else { post } + noise * normal(rng))
            .collect()
    } else {
        let level: f64 = rng.gen_range(0.0..3.0);
        (0..n).map(|_| level + noise * normal(rng)).collect()
    }
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sequences: Vec<Vec<f64>> = (0..10_000).map(|_| random_score_sequence(&mut rng)).collect();
    let start = Instant::now();
    let mut mismatches = 0;
    let mut max_gain_diff = 0.0f64;
    for s in &sequences {
        let d = detect_downward_change_with_eps(s, BIC_EPS);
        let (tau, accepted, gain) = oracle_change_point(s);
        let diff = (d.bic_gain() - gain).abs();
        max_gain_diff = max_gain_diff.max(diff);
        if d.release_segment() != tau || d.accepted() != accepted || diff > 1e-9 {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && within_budget(elapsed, Duration::from_secs(10)),
        format!("{mismatches} mismatches / 10000, max |gain diff| {max_gain_diff:.2e}, in {elapsed:?}"),
    )
}

fn planted_recovery() -> Outcome {
    let config = PipelineConfig::default();
    let start = Instant::now();
    let (mut exact, mut near, mut oracle_agree) = (0, 0, 0);
    for seed in 0..1000u64 {
        let cfg = SyntheticConfig {
            num_segments: 20,
            true_tau: Some(10),
            pre_margin_mean: 1.0,
            post_margin_mean: 0.2,
            noise_std: 0.1,
            seed,
            ..SyntheticConfig::default()
        };
        let (record, _) = generate_piecewise_rollout(&cfg).expect("valid synthetic config");
        let analysis = analyze_rollout(&record, &config).expect("synthetic record analyzes");
        let tau = analysis.decision.release_segment();
        if analysis.decision.accepted() && tau == 10 {
            exact += 1;
        }
        if analysis.decision.accepted() && tau.abs_diff(10) <= 1 {
            near += 1;
        }
        let (oracle_tau, oracle_accepted, _) = oracle_change_point(analysis.scores.scores());
        if oracle_tau == tau && oracle_accepted == analysis.decision.accepted() {
            oracle_agree += 1;
        }
    }
    // the same test with the noise placed directly on segment scores
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut score_exact = 0;
    for _ in 0..1000 {
        let s: Vec<f64> = (0..20)
            .map(|i| if i < 10 { 1.0 } else { 0.2 } + 0.1 * normal(&mut rng))
            .collect();
        let d = detect_downward_change_with_eps(&s, BIC_EPS);
        if d.accepted() && d.release_segment() == 10 {
            score_exact += 1;
        }
    }
    let elapsed = start.elapsed();
    let ok = exact >= 950
        && near >= 990
        && oracle_agree == 1000
        && score_exact >= 950
        && within_budget(elapsed, Duration::from_secs(10));
    outcome(
        ok,
        format!(
            "token noise: exact {exact}/1000, +-1 {near}/1000, oracle agrees {oracle_agree}/1000; \
             score noise: exact {score_exact}/1000; in {elapsed:?}"
        ),
    )
}

fn no_change_control() -> Outcome {
    let config = PipelineConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut clean_accepted = 0;
    let mut noisy_accepted = 0;
    let mut bad_direction = 0;
    for seed in 0..1000u64 {
        let level = rng.gen_range(0.0..3.0);
        for (noise_std, num_segments) in [(0.0, rng.gen_range(2..=40)), (0.1, 20)] {
            let cfg = SyntheticConfig {
                num_segments,
                true_tau: None,
                pre_margin_mean: level,
                post_margin_mean: level,
                noise_std,
                seed,
                ..SyntheticConfig::default()
            };
            let (record, _) = generate_piecewise_rollout(&cfg).expect("valid synthetic config");
            let d = analyze_rollout(&record, &config).expect("synthetic record analyzes").decision;
            if !d.accepted() {
                continue;
            }
            if noise_std == 0.0 {
                clean_accepted += 1;
            } else {
                noisy_accepted += 1;
                if d.mu_post().zip(d.mu_pre()).is_none_or(|(post, pre)| post >= pre) {
                    bad_direction += 1;
                }
            }
        }
    }
    outcome(
        clean_accepted == 0 && bad_direction == 0,
        format!(
            "noise 0: {clean_accepted}/1000 accepted; noise 0.1: acceptance rate {:.3} \
             ({noisy_accepted}/1000), {bad_direction} accepted without a drop",
            noisy_accepted as f64 / 1000.0
        ),
    )
}

fn loss_mass_conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    let mut worst = 0.0f64;
    let mut identity_failures = 0;
    while checked < 10_000 {
        let t = rng.gen_range(1..=300);
        let a: Vec<f64> = (0..t).map(|_| 3.0 * normal(&mut rng)).collect();
        let l: Vec<f64> = (0..t)
            .map(|_| match rng.gen_range(0..4) {
                0 => 0.0,
                1 => 1.0,
                _ => rng.gen_range(0.0..1.0),
            })
            .collect();
        let q: Vec<f64> = (0..t).map(|_| f64::from(u8::from(rng.gen_bool(0.6)))).collect();
        let kept: f64 = l.iter().zip(&q).map(|(l, q)| l * q).sum();
        let total: f64 = l.iter().sum();
        if kept <= 1e-8 {
            continue;
        }
        checked += 1;
        let r = rescale_advantages(&a, &l, &q, RESCALE_EPS).expect("lengths agree");
        let mass: f64 = l.iter().zip(&q).map(|(l, q)| l * q * r.scale).sum();
        worst = worst.max((mass - total).abs() / total);

        let full = vec![1.0; t];
        let r = rescale_advantages(&a, &l, &full, RESCALE_EPS).expect("lengths agree");
        if r.advantages.iter().zip(&a).any(|(x, y)| x.to_bits() != y.to_bits()) {
            identity_failures += 1;
        }
    }
    outcome(
        worst <= 1e-9 && identity_failures == 0,
        format!("max relative mass error {worst:.2e} over 10000 triples; full-mask identity failures {identity_failures}"),
    )
}

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_teachcut")
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(binary())
        .args(args)
        .output()
        .map_err(|e| format!("cannot run teachcut: {e}"))?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "teachcut {} exited {}: {}",
            args.first().unwrap_or(&""),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn zero_noise_chain() -> Result<Outcome, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let rollouts = dir.path().join("rollouts.jsonl");
    let released = dir.path().join("released.jsonl");
    let (rollouts_s, released_s) = (rollouts.to_str().unwrap(), released.to_str().unwrap());
    let count = 200;
    run_cli(&[
        "simulate", "--n", "6", "--tau", "3", "--noise", "0", "--count", "200", "--seed", "6", "--out", rollouts_s,
    ])?;
    run_cli(&["release", "--in", rollouts_s, "--out", released_s])?;

    let cfg = SyntheticConfig {
        num_segments: 6,
        true_tau: Some(3),
        noise_std: 0.0,
        seed: 6,
        ..SyntheticConfig::default()
    };
    let mut worst = 0.0f64;
    let inputs = BufReader::new(File::open(&rollouts).map_err(|e| e.to_string())?);
    let mut records = 0;
    for (i, line) in inputs.lines().enumerate() {
        let record = parse_rollout_record(&line.map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let (_, truth) = generate_indexed(&cfg, i).map_err(|e| e.to_string())?;
        let margins = teacher_top2_margin(&record, 4).map_err(|e| e.to_string())?;
        for (m, p) in margins.values().iter().zip(&truth.planted_margins) {
            worst = worst.max((m - p).abs());
        }
        records += 1;
    }

    let mut released_at_3 = 0;
    let mut lines = 0;
    for line in BufReader::new(File::open(&released).map_err(|e| e.to_string())?).lines() {
        let value: serde_json::Value = serde_json::from_str(&line.map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let release = &value["release"];
        if release["accepted"] == true && release["release_segment"] == 3 {
            released_at_3 += 1;
        }
        lines += 1;
    }
    Ok(outcome(
        records == count && lines == count && released_at_3 == count && worst <= 1e-9,
        format!("{released_at_3}/{lines} released at segment 3; max margin error {worst:.2e}"),
    ))
}

fn random_release_control() -> Outcome {
    let config = PipelineConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    // mixed lengths and segmentations
    let mut records = Vec::new();
    for i in 0..1000u64 {
        let n = rng.gen_range(2..=30);
        let drop_at = rng.gen_range(1..n);
        let means: Vec<f64> = (0..n).map(|s| if s < drop_at { 1.5 } else { 0.1 }).collect();
        let tokens = rng.gen_range(1..=12);
        let noise = if rng.gen_bool(0.3) { 1.0 } else { 0.05 };
        let (record, _) = generate_profile_rollout(format!("r{i}"), &means, tokens, noise, 4, i).expect("valid profile");
        records.push(record);
    }
    let analyses: Vec<_> = records
        .iter()
        .map(|r| analyze_rollout(r, &config).expect("synthetic record analyzes"))
        .collect();
    let slots: Vec<ReleaseSlot<'_>> = records
        .iter()
        .zip(&analyses)
        .map(|(r, a)| ReleaseSlot {
            response_len: r.len(),
            segments: &a.segments,
            retained_tokens: a.retained_tokens(),
            accepted: a.decision.accepted(),
        })
        .collect();
    let sorted_bits = |mut v: Vec<(u64, bool)>| {
        v.sort_unstable();
        v
    };
    let before = sorted_bits(slots.iter().map(|s| (s.relative_position().to_bits(), s.accepted)).collect());
    let first = permute_release_points(&slots, 11);
    let second = permute_release_points(&slots, 11);
    let after = sorted_bits(first.iter().map(|a| (a.relative_position.to_bits(), a.accepted)).collect());
    let moved = first.iter().enumerate().filter(|(i, a)| a.source != *i).count();

    // identical shapes: realized positions after snapping are also preserved
    let mut shaped = Vec::new();
    for i in 0..1000u64 {
        let drop_at = rng.gen_range(1..10);
        let means: Vec<f64> = (0..10).map(|s| if s < drop_at { 1.5 } else { 0.1 }).collect();
        let (record, _) = generate_profile_rollout(format!("s{i}"), &means, 8, 0.05, 4, 1000 + i).expect("valid profile");
        shaped.push(record);
    }
    let shaped_analyses: Vec<_> = shaped
        .iter()
        .map(|r| analyze_rollout(r, &config).expect("synthetic record analyzes"))
        .collect();
    let shaped_slots: Vec<ReleaseSlot<'_>> = shaped
        .iter()
        .zip(&shaped_analyses)
        .map(|(r, a)| ReleaseSlot {
            response_len: r.len(),
            segments: &a.segments,
            retained_tokens: a.retained_tokens(),
            accepted: a.decision.accepted(),
        })
        .collect();
    let realized_before = sorted_bits(shaped_slots.iter().map(|s| (s.relative_position().to_bits(), s.accepted)).collect());
    let realized_after = sorted_bits(
        permute_release_points(&shaped_slots, 12)
            .iter()
            .zip(&shaped_slots)
            .map(|(a, s)| ((a.retained_tokens as f64 / s.response_len as f64).to_bits(), a.accepted))
            .collect(),
    );

    let ok = before == after && first == second && realized_before == realized_after;
    outcome(
        ok,
        format!(
            "multiset preserved: {}; realized positions preserved (uniform shapes): {}; \
             reproducible: {}; {moved}/1000 rollouts reassigned",
            before == after,
            realized_before == realized_after,
            first == second
        ),
    )
}

fn snr_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut disagreements = 0;
    let mut released = 0;
    for _ in 0..10_000 {
        let m_p = loop {
            let m: f64 = 2.0 * normal(&mut rng);
            if m != 0.0 {
                break m;
            }
        };
        let v_p = rng.gen_range(1e-3..5.0);
        let m_r = if rng.gen_bool(0.1) { 0.0 } else { 2.0 * normal(&mut rng) };
        let v_r = if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.0..5.0) };
        let report = snr_release_check(m_p, v_p, m_r, v_r).expect("valid moments");
        if report.inequality_form != Some(report.release_improves) {
            disagreements += 1;
        }
        released += usize::from(report.release_improves);
    }
    outcome(
        disagreements == 0,
        format!("{disagreements} disagreements / 10000 ({released} favour release)"),
    )
}

fn diagnostics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    let mut partition_failures = 0;
    let mut empty_marker_failures = 0;
    for _ in 0..200 {
        let bins = rng.gen_range(1..=40);
        let batch: Vec<Vec<f64>> = (0..rng.gen_range(1..=60))
            .map(|_| {
                let t = rng.gen_range(1..=150);
                (0..t).map(|_| 5.0 * normal(&mut rng) + 1.0).collect()
            })
            .collect();
        let stats = binned_advantage_stats(&batch, bins).expect("non-empty batch");

        let mut collected: Vec<Vec<f64>> = vec![Vec::new(); bins];
        for series in &batch {
            let t = series.len();
            for (i, &v) in series.iter().enumerate() {
                let b = ((bins * i) / t).min(bins - 1);
                collected[b].push(v);
            }
        }
        let total: usize = batch.iter().map(Vec::len).sum();
        if stats.bin_count.iter().sum::<u64>() as usize != total
            || collected.iter().zip(&stats.bin_count).any(|(c, &n)| c.len() as u64 != n)
        {
            partition_failures += 1;
        }
        for (b, values) in collected.iter().enumerate() {
            if values.is_empty() {
                if stats.bin_mean[b].is_some() || stats.bin_std[b].is_some() {
                    empty_marker_failures += 1;
                }
                continue;
            }
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            worst = worst
                .max((stats.bin_mean[b].unwrap_or(f64::NAN) - mean).abs())
                .max((stats.bin_std[b].unwrap_or(f64::NAN) - std).abs());
        }
    }
    outcome(
        worst <= 1e-9 && partition_failures == 0 && empty_marker_failures == 0,
        format!(
            "max |stat diff| {worst:.2e} over 200 batches; partition failures {partition_failures}; \
             empty-bin marker failures {empty_marker_failures}"
        ),
    )
}

fn collapse_signature() -> Outcome {
    let n = 20;
    let means: Vec<f64> = (0..n).map(|i| 1.0 - 0.9 * i as f64 / (n - 1) as f64).collect();
    let margins: Vec<Vec<f64>> = (0..500u64)
        .map(|i| {
            let (record, _) = generate_profile_rollout(format!("c{i}"), &means, 10, 0.3, 4, i).expect("valid profile");
            teacher_top2_margin(&record, 4).expect("record carries candidates").values().to_vec()
        })
        .collect();
    let curve = binned_margin_curve(&margins, 20, true).expect("non-empty batch");
    let (idx, vals): (Vec<f64>, Vec<f64>) = curve
        .bin_mean
        .iter()
        .enumerate()
        .filter_map(|(b, m)| m.map(|m| (b as f64, m)))
        .unzip();
    let rho = spearman_rank_correlation(&idx, &vals).unwrap_or(f64::NAN);
    outcome(
        rho <= -0.8,
        format!(
            "Spearman rho {rho:.4}; normalized curve {:.3} -> {:.3}",
            vals.first().copied().unwrap_or(f64::NAN),
            vals.last().copied().unwrap_or(f64::NAN)
        ),
    )
}

fn throughput() -> Result<Outcome, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let rollouts = dir.path().join("rollouts.jsonl");
    let released = dir.path().join("released.jsonl");
    let (rollouts_s, released_s) = (rollouts.to_str().unwrap(), released.to_str().unwrap());
    run_cli(&[
        "simulate", "--n", "100", "--tau", "50", "--pre", "1.0", "--post", "0.2", "--noise", "0.1",
        "--tokens-per-segment", "10", "--top-k", "4", "--count", "10000", "--seed", "11", "--out", rollouts_s,
    ])?;
    let start = Instant::now();
    run_cli(&["release", "--in", rollouts_s, "--out", released_s, "--top-k", "4"])?;
    let elapsed = start.elapsed();
    let lines = BufReader::new(File::open(&released).map_err(|e| e.to_string())?).lines().count();
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let input_mb = std::fs::metadata(&rollouts).map_err(|e| e.to_string())?.len() as f64 / 1e6;
    Ok(outcome(
        lines == 10_000 && within_budget(elapsed, Duration::from_secs(10)),
        format!(
            "10000 x 1000 tokens ({input_mb:.0} MB) in {:.2} s on {cores} core(s), {:.0} MB/s",
            elapsed.as_secs_f64(),
            input_mb / elapsed.as_secs_f64()
        ),
    ))
}

fn main() {
    type Check = fn() -> Outcome;
    let criteria: Vec<(&str, Check)> = vec![
        ("hand-worked change point", hand_worked_change_point),
        ("oracle equivalence", oracle_equivalence),
        ("planted-change recovery", planted_recovery),
        ("no-change control", no_change_control),
        ("loss-mass conservation", loss_mass_conservation),
        ("zero-noise simulate -> release chain", || {
            zero_noise_chain().unwrap_or_else(|e| outcome(false, e))
        }),
        ("random-release control", random_release_control),
        ("SNR form equivalence", snr_equivalence),
        ("diagnostics oracle", diagnostics_oracle),
        ("synthetic collapse signature", collapse_signature),
        ("release throughput", || throughput().unwrap_or_else(|e| outcome(false, e))),
    ];

    let stdout = std::io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let status = if result.passed { "PASS" } else { "FAIL" };
        failed += usize::from(!result.passed);
        writeln!(
            out,
            "{status} [{:>2}] {name}: {} ({:.2} s)",
            i + 1,
            result.detail,
            start.elapsed().as_secs_f64()
        )
        .ok();
        out.flush().ok();
    }
    writeln!(out, "acceptance: {} passed, {failed} failed", criteria.len() - failed).ok();
    out.flush().ok();
    drop(out);
    if failed > 0 {
        std::process::exit(1);
    }
}
