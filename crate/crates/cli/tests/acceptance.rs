//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cag_core::backends::{Backends, MockFixtures};
use cag_core::calibration::{
    adversarial_regret_sweep, auc, bucket, bucket_trace, derive_seed, expected_utility,
    flip_labels, grid_search_threshold, simulate_regret, BucketScheme, CalibrationError,
    DecisionConfig, FlipDirection, InterventionConfig,
};
use cag_core::curation::projection::{project_answer, project_trace, render_projection_prompt};
use cag_core::curation::templates::{
    render_fact_check, render_knowledge_requirement, ANSWER_PROJECTION, FACT_CHECK,
    KNOWLEDGE_REQUIREMENT,
};
use cag_core::curation::{emit_cass_dataset, read_cass_dataset};
use cag_core::metrics::{estimate_k, veriscore};
use cag_core::rewards::{capd_kl, group_advantages, kl_penalty};
use cag_core::text::whitespace_tokens;
use cag_core::verification::{mock_clause_claims, score_trace};
use cag_core::{
    parse_trace, serialize_trace, AnnotatedTrace, Exec, Query, ReasoningStep, ReliabilityLabel,
    TrainingTuple, Verdict,
};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        match $cond {
            true => {}
            false => return Err(format!($($msg)+)),
        }
    };
}

const UTILITIES: [f64; 3] = [1.0, 2.0, 4.0];
const TAU_GRID: [f64; 5] = [0.2, 0.3, 0.4, 0.5, 0.6];
const TOP_K: usize = 3;

fn utility_pairs() -> impl Iterator<Item = (f64, f64)> {
    UTILITIES
        .iter()
        .flat_map(|&u1| UTILITIES.iter().map(move |&u2| (u1, u2)))
}

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

// 1. Regret bound.

fn oracle_regret(p: f64, s: f64, u1: f64, u2: f64) -> f64 {
    let commit = u1 * p - u2 * (1.0 - p);
    let best = commit.max(0.0);
    let chosen = if s * (u1 + u2) >= u2 { commit } else { 0.0 };
    best - chosen
}

fn regret_bound() -> Outcome {
    let start = Instant::now();
    let mut runs = 0;
    let mut worst_ratio: f64 = 0.0;
    for (u1, u2) in utility_pairs() {
        for eps in [0.0, 0.05, 0.1, 0.2] {
            let cfg = DecisionConfig::new(u1, u2, eps).map_err(|e| e.to_string())?;
            let bound = (u1 + u2) * eps;
            let sim =
                simulate_regret(&cfg, 100_000, 2024, Exec::default()).map_err(|e| e.to_string())?;
            ensure!(sim.trials == 100_000, "trial count {}", sim.trials);
            ensure!(
                sim.violations == 0,
                "(u1, u2, eps) = ({u1}, {u2}, {eps}): {} violations, max regret {}",
                sim.violations,
                sim.max_regret
            );
            let sweep = adversarial_regret_sweep(&cfg, 10_000).map_err(|e| e.to_string())?;
            ensure!(
                sweep.violations == 0,
                "sweep ({u1}, {u2}, {eps}): {} violations",
                sweep.violations
            );
            for i in 0..10_000 {
                let p = i as f64 / 9_999.0;
                for s in [(p + eps).min(1.0), (p - eps).max(0.0)] {
                    let r = oracle_regret(p, s, u1, u2);
                    ensure!(
                        r <= bound + 1e-12,
                        "oracle regret {r} > {bound} at p={p}, s={s}"
                    );
                }
            }
            if bound > 0.0 {
                worst_ratio = worst_ratio.max(sim.max_regret.max(sweep.max_regret) / bound);
            }
            runs += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure!(
        elapsed < Duration::from_secs(5),
        "runtime {:.2}s exceeds 5s",
        elapsed.as_secs_f64()
    );
    Ok(format!(
        "{runs} configurations x 1e5 trials + 1e4-point sweeps, 0 violations, max regret/bound {worst_ratio:.3}, {:.2}s",
        elapsed.as_secs_f64()
    ))
}

// 2. Bayes-threshold optimality.

fn bayes_optimality() -> Outcome {
    let mut checked = 0;
    let mut worst_gap: f64 = 0.0;
    for (u1, u2) in utility_pairs() {
        let cfg = DecisionConfig::new(u1, u2, 0.0).map_err(|e| e.to_string())?;
        for i in 0..=1000 {
            let p = i as f64 / 1000.0;
            let chosen = cfg.decide(p);
            let eu_chosen = expected_utility(p, chosen, &cfg);
            let eu_other = expected_utility(p, !chosen, &cfg);
            ensure!(
                eu_chosen >= eu_other,
                "({u1}, {u2}) p={p}: chosen {eu_chosen} < alternative {eu_other}"
            );
            let oracle_commit = u1 * p - u2 * (1.0 - p);
            let eu_commit = expected_utility(p, true, &cfg);
            ensure!(
                (eu_commit - oracle_commit).abs() <= 1e-12,
                "commit utility {eu_commit} vs {oracle_commit}"
            );
            ensure!(
                expected_utility(p, false, &cfg) == 0.0,
                "discard utility nonzero"
            );
            checked += 1;
        }
        let tau = cfg.tau_star();
        ensure!(
            (tau - u2 / (u1 + u2)).abs() <= 1e-15,
            "tau* {tau} for ({u1}, {u2})"
        );
        let gap = (expected_utility(tau, true, &cfg) - expected_utility(tau, false, &cfg)).abs();
        ensure!(gap <= 1e-12, "indifference gap {gap} at tau*={tau}");
        worst_gap = worst_gap.max(gap);
    }
    Ok(format!(
        "{checked} (pair, p) points optimal, max indifference gap {worst_gap:.1e}"
    ))
}

// 3. VeriScore oracle.

type Q = Ratio<i64>;

fn oracle_median(counts: &[u64]) -> Q {
    let mut sorted: Vec<i64> = counts.iter().map(|&c| c as i64).collect();
    sorted.sort_unstable();
    let n = sorted.len();
    if n % 2 == 1 {
        Q::from_integer(sorted[n / 2])
    } else {
        Q::new(sorted[n / 2 - 1] + sorted[n / 2], 2)
    }
}

fn oracle_f1(s: u64, a: u64, k: Q) -> Q {
    let zero = Q::from_integer(0);
    if s == 0 {
        return zero;
    }
    let s = Q::from_integer(s as i64);
    let p = s / Q::from_integer(a as i64);
    let r = (s / k).min(Q::from_integer(1));
    Q::from_integer(2) * p * r / (p + r)
}

fn to_f64(q: Q) -> f64 {
    *q.numer() as f64 / *q.denom() as f64
}

fn veriscore_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let domains = ["bio", "qa", "science"];
    let mut responses: Vec<(usize, u64, u64)> = Vec::new();
    for i in 0..50 {
        let domain = i % domains.len();
        let total = rng.random_range(1..=40u64);
        // One response in five supports nothing.
        let supported = if i % 5 == 4 {
            0
        } else {
            rng.random_range(1..=total)
        };
        responses.push((domain, supported, total));
    }
    let mut zeros = 0;
    let mut worst: f64 = 0.0;
    for (d, name) in domains.iter().enumerate() {
        let counts: Vec<u64> = responses.iter().filter(|r| r.0 == d).map(|r| r.1).collect();
        let k = estimate_k(&counts).map_err(|e| e.to_string())?;
        let k_oracle = oracle_median(&counts);
        ensure!(k == to_f64(k_oracle), "{name}: K {k} vs oracle {k_oracle}");
        for &(_, s, a) in responses.iter().filter(|r| r.0 == d) {
            let got = veriscore(s, a, k).map_err(|e| e.to_string())?;
            let want = to_f64(oracle_f1(s, a, k_oracle));
            let err = (got.f1 - want).abs();
            ensure!(
                err <= 1e-12,
                "{name} S={s} |A|={a}: f1 {} vs {want}",
                got.f1
            );
            worst = worst.max(err);
            if s == 0 {
                ensure!(got.f1 == 0.0, "S=0 gave f1 {}", got.f1);
                zeros += 1;
            }
        }
    }
    Ok(format!(
        "50 responses within {worst:.1e} of rational oracle, {zeros} S=0 cases exactly 0"
    ))
}

// 4. GRPO and distillation math.

fn random_distribution(rng: &mut ChaCha8Rng, dim: usize, zeros: bool) -> Vec<f64> {
    let raw: Vec<f64> = (0..dim)
        .map(|_| {
            if zeros && rng.random_bool(0.2) {
                0.0
            } else {
                rng.random_range(0.01..1.0)
            }
        })
        .collect();
    let raw = if raw.iter().all(|v| *v == 0.0) {
        vec![1.0; dim]
    } else {
        raw
    };
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|v| v / sum).collect()
}

fn grpo_math() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for g in 0..1000 {
        let n = rng.random_range(2..=16);
        let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let adv = group_advantages(&rewards).map_err(|e| e.to_string())?;
        let mean = adv.iter().sum::<f64>() / n as f64;
        let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        ensure!(mean.abs() <= 1e-9, "group {g}: mean {mean}");
        ensure!((std - 1.0).abs() <= 1e-9, "group {g}: std {std}");
        let shift = rng.random_range(-100.0..100.0);
        let scale = rng.random_range(0.01..100.0);
        let moved: Vec<f64> = rewards.iter().map(|r| scale * r + shift).collect();
        let adv2 = group_advantages(&moved).map_err(|e| e.to_string())?;
        for (a, b) in adv.iter().zip(&adv2) {
            ensure!(
                (a - b).abs() <= 1e-9,
                "group {g}: not affine invariant ({a} vs {b})"
            );
        }
    }

    let mut zero_at = Vec::new();
    for i in 1..=10_000 {
        let ratio = i as f64 / 1000.0;
        let kl = kl_penalty(ratio).map_err(|e| e.to_string())?;
        ensure!(kl >= 0.0, "kl_penalty({ratio}) = {kl}");
        if kl == 0.0 {
            zero_at.push(ratio);
        }
    }
    ensure!(zero_at == [1.0], "kl_penalty zero at {zero_at:?}");

    let mut worst: f64 = 0.0;
    for pair in 0..1000 {
        let dim = rng.random_range(1..=32);
        let teacher = random_distribution(&mut rng, dim, false);
        let student = random_distribution(&mut rng, dim, pair % 3 == 0);
        let got = capd_kl(&student, &teacher).map_err(|e| e.to_string())?;
        let mut brute = 0.0;
        for i in 0..dim {
            if student[i] > 0.0 {
                brute += student[i] * (student[i].ln() - teacher[i].ln());
            }
        }
        let err = (got - brute.max(0.0)).abs();
        ensure!(
            err <= 1e-12,
            "pair {pair}: capd_kl {got} vs brute force {brute}"
        );
        worst = worst.max(err);
    }
    Ok(format!(
        "1000 groups normalized and affine invariant, kl_penalty zero only at 1 on 1e4 grid, capd_kl within {worst:.1e} on 1000 pairs"
    ))
}

// 5. Bucketing semantics.

fn bucketing() -> Outcome {
    let mut checked = 0;
    for (t, tau) in TAU_GRID.iter().enumerate() {
        let tau_milli = 200 + 100 * t as u32;
        let scheme = BucketScheme::binary(*tau).map_err(|e| e.to_string())?;
        for i in 0..=1000u32 {
            let s = i as f64 / 1000.0;
            let want = if i >= tau_milli {
                ReliabilityLabel::Reliable
            } else {
                ReliabilityLabel::Unreliable
            };
            let got = bucket(Some(s), &scheme).map_err(|e| e.to_string())?;
            ensure!(got == want, "s={s} tau={tau}: {got:?}, expected {want:?}");
            checked += 1;
        }
        ensure!(
            bucket(None, &scheme) == Ok(ReliabilityLabel::Nonverifiable),
            "absent score not nonverifiable"
        );
    }
    let table: HashMap<u64, f64> = [
        (0.2, 61.2),
        (0.3, 63.0),
        (0.4, 64.8),
        (0.5, 64.5),
        (0.6, 62.1),
    ]
    .into_iter()
    .map(|(t, v): (f64, f64)| (t.to_bits(), v))
    .collect();
    let result = grid_search_threshold(&TAU_GRID, |tau| {
        table
            .get(&tau.to_bits())
            .copied()
            .ok_or(CalibrationError::NoCandidates)
    })
    .map_err(|e| e.to_string())?;
    ensure!(
        result.best_tau == 0.4,
        "grid search picked {}",
        result.best_tau
    );
    ensure!(
        result.best_score == 64.8,
        "best score {}",
        result.best_score
    );
    Ok(format!(
        "{checked} (s, tau) pairs match the integer oracle, grid search argmax tau=0.4"
    ))
}

// Generated fixture suite shared by criteria 6, 7 and 9.

struct Suite {
    raw: Vec<AnnotatedTrace>,
    labeled: Vec<AnnotatedTrace>,
    backends: Backends,
}

const RELATIONS: [&str; 4] = ["borders", "precedes", "funds", "hosts"];

fn fact(t: usize, k: usize, j: usize, rng: &mut ChaCha8Rng) -> String {
    let rel = RELATIONS[rng.random_range(0..RELATIONS.len())];
    format!("Kel{t}a{k}x{j} {rel} Mor{t}b{k}x{j}")
}

fn build_suite() -> Result<Suite, String> {
    let mut verdicts: HashMap<String, Verdict> = HashMap::new();
    let mut raw = Vec::new();
    for t in 0..30 {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + t as u64);
        let n = rng.random_range(2..=5);
        // Every fifth trace is entirely true, the rest include false facts.
        let mut truth: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        truth[0] = true;
        if t % 5 != 0 {
            truth[n - 1] = false;
        } else {
            truth.iter_mut().for_each(|v| *v = true);
        }
        let mut steps = Vec::new();
        let mut answer = Vec::new();
        for (k, &ok) in truth.iter().enumerate() {
            let text = if rng.random_bool(0.3) {
                format!("{}; {}.", fact(t, k, 0, &mut rng), fact(t, k, 1, &mut rng))
            } else {
                format!("{}.", fact(t, k, 0, &mut rng))
            };
            let verdict = if ok {
                Verdict::Supported
            } else {
                Verdict::Unsupported
            };
            for claim in mock_clause_claims(&text) {
                verdicts.insert(claim, verdict);
            }
            if k == 0 || rng.random_bool(0.7) {
                answer.push(text.clone());
            }
            steps.push(text);
        }
        let filler = rng.random_range(0..=steps.len());
        steps.insert(filler, "Let me think.".to_string());
        if rng.random_bool(0.3) {
            answer.push("In summary, that is all.".to_string());
        }
        let steps = steps
            .into_iter()
            .enumerate()
            .map(|(i, s)| ReasoningStep::new(i + 1, s))
            .collect();
        let query = Query::new(format!("s{t}"), format!("Describe item {t}."))
            .map_err(|e| e.to_string())?;
        raw.push(AnnotatedTrace::new(query, steps, answer.join(" ")));
    }
    let backends = Backends::mock(MockFixtures {
        verdicts,
        ..MockFixtures::default()
    });
    let scheme = BucketScheme::binary(0.4).map_err(|e| e.to_string())?;
    let mut labeled = Vec::new();
    for trace in &raw {
        let scored = score_trace(trace, &backends, TOP_K).map_err(|e| e.to_string())?;
        labeled.push(bucket_trace(&scored, &scheme).map_err(|e| e.to_string())?);
    }
    Ok(Suite {
        raw,
        labeled,
        backends,
    })
}

// 6. Selective commitment.

fn selective_commitment(suite: &Suite) -> Outcome {
    let mut with_unreliable = 0;
    let mut improved = 0;
    for trace in &suite.labeled {
        let projected = project_trace(trace, &suite.backends, TOP_K).map_err(|e| e.to_string())?;
        let id = &trace.query.id;
        let report = projected
            .report
            .ok_or_else(|| format!("{id}: projection came back empty"))?;
        ensure!(
            report.unreliable_leakage == 0,
            "{id}: {} leaked claims",
            report.unreliable_leakage
        );
        ensure!(
            report.fully_supported,
            "{id}: projection adds unsupported content"
        );
        let has_unreliable = trace.steps.iter().any(|s| {
            s.label == Some(ReliabilityLabel::Unreliable)
                && s.claims.iter().any(|c| c.verdict != Verdict::Supported)
        });
        if has_unreliable {
            with_unreliable += 1;
            ensure!(
                report.post_factuality >= report.pre_factuality,
                "{id}: post {} < pre {}",
                report.post_factuality,
                report.pre_factuality
            );
            if report.post_factuality > report.pre_factuality {
                improved += 1;
            }
        }
    }
    ensure!(
        with_unreliable >= 20,
        "only {with_unreliable} traces exercise unreliable steps"
    );
    Ok(format!(
        "30 traces, zero leakage, post >= pre on all {with_unreliable} with unreliable claims ({improved} strictly improved)"
    ))
}

// 7. Intervention monotonicity.

fn intervention(suite: &Suite) -> Outcome {
    let lambdas = [0.0, 0.25, 0.5, 0.75, 1.0];
    let chat = suite.backends.chat.as_ref();
    let model = &suite.backends.models.projector;
    let baseline: Vec<String> = suite
        .labeled
        .iter()
        .map(|t| project_answer(t, chat, model))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    for direction in [FlipDirection::UnrelToRel, FlipDirection::RelToUnrel] {
        let per_seed: Vec<Result<Vec<f64>, String>> = Exec::default().map_range(200, |seed| {
            let mut totals = vec![0.0; lambdas.len()];
            for (idx, trace) in suite.labeled.iter().enumerate() {
                let trace_seed = derive_seed(seed as u64, idx as u64);
                for (li, &lambda) in lambdas.iter().enumerate() {
                    let cfg = InterventionConfig::new(lambda, direction, trace_seed)
                        .map_err(|e| e.to_string())?;
                    let flipped = flip_labels(trace, &cfg).map_err(|e| e.to_string())?;
                    let projected =
                        project_answer(&flipped, chat, model).map_err(|e| e.to_string())?;
                    if lambda == 0.0 && projected != baseline[idx] {
                        return Err(format!(
                            "seed {seed}, {}: lambda 0 changed the output",
                            trace.query.id
                        ));
                    }
                    totals[li] += whitespace_tokens(&projected) as f64;
                }
            }
            Ok(totals)
        });
        let mut means = vec![0.0; lambdas.len()];
        for totals in per_seed {
            for (m, v) in means.iter_mut().zip(totals?) {
                *m += v;
            }
        }
        let count = 200.0 * suite.labeled.len() as f64;
        means.iter_mut().for_each(|m| *m /= count);
        let monotone = means.windows(2).all(|w| match direction {
            FlipDirection::UnrelToRel => w[0] <= w[1],
            FlipDirection::RelToUnrel => w[0] >= w[1],
        });
        ensure!(monotone, "{direction:?} means not monotone: {means:?}");
        ensure!(
            means[0] != means[lambdas.len() - 1],
            "{direction:?} intervention had no effect: {means:?}"
        );
        lines.push(format!(
            "{direction:?} {}",
            means
                .iter()
                .map(|m| format!("{m:.2}"))
                .collect::<Vec<_>>()
                .join(" ")
        ));
    }
    Ok(format!(
        "200 seeds, lambda 0 byte-exact, mean words by lambda: {}",
        lines.join("; ")
    ))
}

// 8. AUC.

fn brute_auc(pairs: &[(f64, bool)]) -> Option<f64> {
    let (mut wins, mut total) = (0.0, 0.0);
    for &(sp, cp) in pairs {
        for &(sn, cn) in pairs {
            if cp && !cn {
                total += 1.0;
                if sp > sn {
                    wins += 1.0;
                } else if sp == sn {
                    wins += 0.5;
                }
            }
        }
    }
    (total > 0.0).then(|| wins / total)
}

fn auc_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut compared = 0;
    let mut degenerate = 0;
    for case in 0..500 {
        let n = rng.random_range(1..=12);
        // Scores from a coarse grid so ties are common.
        let levels = rng.random_range(1..=6);
        let pairs: Vec<(f64, bool)> = (0..n)
            .map(|_| {
                (
                    rng.random_range(0..levels) as f64 / 5.0,
                    rng.random_bool(0.5),
                )
            })
            .collect();
        match (auc(&pairs), brute_auc(&pairs)) {
            (Ok(got), Some(want)) => {
                ensure!(
                    (got - want).abs() <= 1e-12,
                    "case {case}: auc {got} vs brute {want}"
                );
                compared += 1;
            }
            (Err(CalibrationError::DegenerateLabels), None) => degenerate += 1,
            (got, want) => return Err(format!("case {case}: {got:?} vs {want:?}")),
        }
    }
    for n in 2..=12 {
        let tied: Vec<(f64, bool)> = (0..n).map(|i| (0.7, i % 2 == 0)).collect();
        let got = auc(&tied).map_err(|e| e.to_string())?;
        ensure!(got == 0.5, "all-tied size {n}: {got}");
    }
    Ok(format!(
        "{compared} configurations match pair enumeration, {degenerate} single-class rejected, all-tied = 0.5"
    ))
}

// 9. Determinism and round trips.

fn cag(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cag"))
        .args(args)
        .env("RUST_LOG", "error")
        .env_remove("CAG_API_BASE")
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.success(),
        "cag {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(())
}

const ARTIFACTS: [&str; 9] = [
    "curated.jsonl",
    "kept.jsonl",
    "scored.jsonl",
    "labeled.jsonl",
    "projected.jsonl",
    "projection_reports.jsonl",
    "dataset.jsonl",
    "eval.json",
    "eval.csv",
];

fn pipeline(global: &[&str], out: &Path, fixtures: &Path) -> Result<(), String> {
    let prompts = fixtures.join("prompts.jsonl");
    let traces = fixtures.join("traces.jsonl");
    let out = out.to_str().unwrap();
    let stages: [Vec<&str>; 6] = [
        vec!["curate", "--prompts", prompts.to_str().unwrap()],
        vec!["score", "--traces", traces.to_str().unwrap()],
        vec!["bucket"],
        vec!["project"],
        vec!["dataset"],
        vec!["eval"],
    ];
    for stage in stages {
        let mut args: Vec<&str> = global.to_vec();
        args.extend(["--seed", "17", "--out-dir", out]);
        args.extend(stage);
        cag(&args)?;
    }
    Ok(())
}

fn determinism(suite: &Suite) -> Outcome {
    let fixtures = crate_dir().join("fixtures/demo");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cassette = tmp.path().join("cassette.json");
    let fx = fixtures.to_str().unwrap();
    let cas = cassette.to_str().unwrap();
    pipeline(
        &["--mock", "--fixtures", fx, "--record", cas],
        &tmp.path().join("live"),
        &fixtures,
    )?;
    let runs = [tmp.path().join("replay1"), tmp.path().join("replay2")];
    for dir in &runs {
        pipeline(&["--replay", cas], dir, &fixtures)?;
    }
    for name in ARTIFACTS {
        let a = std::fs::read(runs[0].join(name)).map_err(|e| format!("{name}: {e}"))?;
        let b = std::fs::read(runs[1].join(name)).map_err(|e| format!("{name}: {e}"))?;
        let live = std::fs::read(tmp.path().join("live").join(name))
            .map_err(|e| format!("{name}: {e}"))?;
        ensure!(a == b, "{name} differs between replays");
        ensure!(a == live, "{name} differs between replay and recorded run");
    }

    // Trace format: parse(serialize(t)) recovers steps, labels and answer.
    let demo_labeled: Vec<AnnotatedTrace> =
        cag_core::io::read_jsonl(&runs[0].join("labeled.jsonl")).map_err(|e| e.to_string())?;
    let mut traces = 0;
    for trace in suite.raw.iter().chain(&suite.labeled).chain(&demo_labeled) {
        let body = parse_trace(&serialize_trace(trace)).map_err(|e| e.to_string())?;
        let got: Vec<(&str, Option<ReliabilityLabel>)> = body
            .steps
            .iter()
            .map(|s| (s.text.as_str(), s.label))
            .collect();
        let want: Vec<(&str, Option<ReliabilityLabel>)> = trace
            .steps
            .iter()
            .map(|s| (s.text.as_str(), s.label))
            .collect();
        ensure!(
            got == want,
            "{}: steps changed in round trip",
            trace.query.id
        );
        ensure!(
            body.answer == trace.original_answer,
            "{}: answer changed",
            trace.query.id
        );
        traces += 1;
    }

    // Dataset: read(emit(x)) = x, and re-emitting is byte-identical.
    let emitted = runs[0].join("dataset.jsonl");
    let tuples = read_cass_dataset(&emitted).map_err(|e| e.to_string())?;
    ensure!(!tuples.is_empty(), "demo dataset is empty");
    let again = tmp.path().join("again.jsonl");
    emit_cass_dataset(&tuples, &again).map_err(|e| e.to_string())?;
    ensure!(
        std::fs::read(&emitted).ok() == std::fs::read(&again).ok(),
        "re-emitted dataset differs"
    );
    let mut suite_tuples = Vec::new();
    for trace in &suite.labeled {
        let projected = project_trace(trace, &suite.backends, TOP_K).map_err(|e| e.to_string())?;
        suite_tuples.push(TrainingTuple::from_trace(&projected.trace).map_err(|e| e.to_string())?);
    }
    let suite_path = tmp.path().join("suite.jsonl");
    emit_cass_dataset(&suite_tuples, &suite_path).map_err(|e| e.to_string())?;
    ensure!(
        read_cass_dataset(&suite_path).map_err(|e| e.to_string())? == suite_tuples,
        "suite dataset round trip failed"
    );
    Ok(format!(
        "{} artifacts byte-identical across replays, {traces} trace and {} tuple round trips",
        ARTIFACTS.len(),
        tuples.len() + suite_tuples.len()
    ))
}

// 10. Template fidelity.

fn templates() -> Outcome {
    let golden = crate_dir().join("../core/tests/golden");
    let read =
        |name: &str| std::fs::read_to_string(golden.join(name)).map_err(|e| format!("{name}: {e}"));
    let prompt = "What year did the Berlin Wall fall?";
    ensure!(
        render_fact_check(prompt) == read("fact_check.txt")?,
        "fact-check render differs"
    );
    ensure!(
        render_knowledge_requirement(prompt) == read("knowledge_requirement.txt")?,
        "knowledge-requirement render differs"
    );
    use ReliabilityLabel::*;
    let trace = AnnotatedTrace::new(
        Query::new("g1", prompt).map_err(|e| e.to_string())?,
        vec![
            ReasoningStep::labeled(0, "The Berlin Wall fell in 1989.", Reliable),
            ReasoningStep::labeled(1, "It fell in 1991.", Unreliable),
            ReasoningStep::labeled(2, "Let me check.", Nonverifiable),
        ],
        "The Berlin Wall fell in 1989.",
    );
    let rendered = render_projection_prompt(&trace).map_err(|e| e.to_string())?;
    ensure!(
        rendered == read("answer_projection.txt")?,
        "projection render differs"
    );
    for (template, anchor) in [
        (FACT_CHECK, "You are a strict fact-checker."),
        (
            KNOWLEDGE_REQUIREMENT,
            "requires both long-form generation and factual knowledge",
        ),
        (ANSWER_PROJECTION, "Output only the revised final answer"),
    ] {
        ensure!(template.contains(anchor), "anchor missing: {anchor}");
    }
    Ok("3 templates golden-equal, anchors present".to_string())
}

fn main() {
    // `cargo test` passes harness flags such as --nocapture; a filter that
    // does not mention this suite skips it.
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    let suite = build_suite();
    let with_suite = |f: fn(&Suite) -> Outcome| -> Outcome {
        match &suite {
            Ok(s) => f(s),
            Err(e) => Err(format!("fixture suite: {e}")),
        }
    };
    let results: Vec<(&str, Outcome)> = vec![
        ("regret bound", regret_bound()),
        ("bayes-threshold optimality", bayes_optimality()),
        ("veriscore oracle", veriscore_oracle()),
        ("grpo math", grpo_math()),
        ("bucketing semantics", bucketing()),
        ("selective commitment", with_suite(selective_commitment)),
        ("intervention monotonicity", with_suite(intervention)),
        ("auc", auc_check()),
        ("end-to-end determinism", with_suite(determinism)),
        ("template fidelity", templates()),
    ];
    let mut failed = 0;
    for (i, (name, outcome)) in results.iter().enumerate() {
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
