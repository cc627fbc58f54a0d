//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::process::Command;
use std::time::{Duration, Instant};

use dark_distill::corpus::gen_synthetic;
use dark_distill::dark::{self, CandidateKind, DEFAULT_MASK_RATIOS};
use dark_distill::distill::plan::{plan_epoch, plan_size, ConfidenceRecord};
use dark_distill::distill::{NegativesMode, Toggles};
use dark_distill::eval::{self, ndcg, recall, reciprocal_rank, retrieve, Histogram, PassageIndex};
use dark_distill::model::{kl_divergence, softmax_over_candidates};
use dark_distill::pipeline::{build_dataset, Experiment, RunConfig};
use dark_distill::seed;
use dark_distill::text::{MASK, SEP};
use rand::seq::SliceRandom;
use rand::Rng;

const GRAD_CASES: u64 = 100;
const GRAD_TOL: f64 = 1e-4;
const KL_PAIRS: u64 = 1000;
const KL_ZERO_TOL: f64 = 1e-12;
const SOFTMAX_SUM_TOL: f64 = 1e-9;
const SHIFT_TOL: f64 = 1e-12;
const RETRIEVAL_CORPORA: u64 = 50;
const METRIC_TOL: f64 = 1e-9;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const HIST_GROUPS: [CandidateKind; 3] = [CandidateKind::Positive, CandidateKind::HardNegative, CandidateKind::Mix];

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

fn report(id: u32, name: &str, elapsed: Duration, o: &Outcome) {
    println!(
        "criterion {id:2} {} {name} ({:.1}s): {}",
        if o.pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        o.detail
    );
}

fn gradients() -> Outcome {
    let sup = common::sup_worst(GRAD_CASES);
    let kd = common::kd_worst(GRAD_CASES);
    let joint = common::joint_worst(GRAD_CASES);
    outcome(
        sup < GRAD_TOL && kd < GRAD_TOL && joint < GRAD_TOL,
        format!("max rel error sup {sup:.2e} kd {kd:.2e} joint {joint:.2e} over {GRAD_CASES} cases each"),
    )
}

fn kl_properties() -> Outcome {
    let mut min_kl = f64::INFINITY;
    let mut max_self = 0.0f64;
    let mut max_sum_err = 0.0f64;
    let mut max_shift = 0.0f64;
    for i in 0..KL_PAIRS {
        let mut rng = seed::derived_rng(21, "kl", i);
        let n = rng.gen_range(1..=25);
        let scale = rng.gen_range(0.1..20.0);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        let (pa, pb) = (softmax_over_candidates(&a).unwrap(), softmax_over_candidates(&b).unwrap());
        min_kl = min_kl.min(kl_divergence(&pa, &pb).unwrap());
        max_self = max_self.max(kl_divergence(&pa, &pa).unwrap().abs());
        max_sum_err = max_sum_err.max((pa.0.iter().sum::<f64>() - 1.0).abs());
        let c = rng.gen_range(-100.0..100.0);
        let shifted: Vec<f64> = a.iter().map(|x| x + c).collect();
        let ps = softmax_over_candidates(&shifted).unwrap();
        for (x, y) in pa.0.iter().zip(&ps.0) {
            max_shift = max_shift.max((x - y).abs());
        }
    }
    outcome(
        min_kl >= 0.0 && max_self <= KL_ZERO_TOL && max_sum_err <= SOFTMAX_SUM_TOL && max_shift <= SHIFT_TOL,
        format!("min KL {min_kl:.3e}, |KL(p,p)| <= {max_self:.1e}, |sum-1| <= {max_sum_err:.1e}, shift diff <= {max_shift:.1e}"),
    )
}

fn schedule() -> Outcome {
    let mut failures = Vec::new();
    for n in 1..=50usize {
        let recs: Vec<ConfidenceRecord> = (0..n)
            .map(|i| ConfidenceRecord {
                index: i,
                query_id: i as u64,
                confidence: -(((i * 37) % 11) as f64) / 3.0,
            })
            .collect();
        for total in 1..=10usize {
            let mut prev: Option<Vec<usize>> = None;
            for t in 1..=total {
                let p = plan_epoch(&recs, t, total).unwrap();
                let expected = ((1.0 - t as f64 / (2.0 * total as f64)) * n as f64 - 1e-9).ceil() as usize;
                if p.len() != expected || plan_size(n, t, total) != expected {
                    failures.push(format!("size n={n} T={total} t={t}"));
                }
                if let Some(prev) = &prev {
                    if prev[..p.len()] != p.selected[..] {
                        failures.push(format!("nesting n={n} T={total} t={t}"));
                    }
                }
                if t == total && p.len() != n.div_ceil(2) {
                    failures.push(format!("final n={n} T={total}"));
                }
                prev = Some(p.selected);
            }
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "all (n, T, t) in 1..=50 x 1..=10 x 1..=T".to_string()
        } else {
            format!("{} mismatches, first {}", failures.len(), failures[0])
        },
    )
}

fn dark_construction() -> Outcome {
    let cfg = RunConfig {
        synth: dark_distill::corpus::SynthConfig {
            n_queries: 300,
            n_dev_queries: 10,
            ..Default::default()
        },
        ..RunConfig::default()
    };
    let corpus = gen_synthetic(&cfg.resolved_synth()).unwrap();
    let data = build_dataset(&cfg, &corpus, None).unwrap();
    let mut problems = Vec::new();
    for (i, inst) in data.instances.iter().enumerate() {
        let pos = data.passage(inst.positive_pid).unwrap();
        let mut rng = seed::derived_rng(5, "dark", i as u64);
        let ds = dark::build_dark_set(inst, &data, &DEFAULT_MASK_RATIOS, true, &mut rng).unwrap();
        for (pid, mix) in inst.negative_pids.iter().zip(&ds.mix) {
            let mut expected: Vec<u32> = pos.0.clone();
            expected.push(SEP);
            expected.extend(&data.passage(*pid).unwrap().0);
            expected.truncate(data.passage_max_len);
            if mix.0 != expected {
                problems.push(format!("mix instance {i}"));
            }
        }
        for (r, masked) in &ds.mask {
            let changed = pos.iter().zip(masked.iter()).filter(|(a, b)| a != b).count();
            let all_mask = pos.iter().zip(masked.iter()).all(|(a, b)| a == b || *b == MASK);
            let expected = ((r * pos.len() as f64) + 0.5 + 1e-9).floor() as usize;
            // a position already holding MASK cannot change; the synthetic text never contains it
            if changed != expected.min(pos.len()) || !all_mask || masked.len() != pos.len() {
                problems.push(format!("mask instance {i} ratio {r}"));
            }
        }
        let set = dark::assemble_candidates(inst, &ds, &data).unwrap();
        if set.len() != 2 * inst.m() + DEFAULT_MASK_RATIOS.len() || set.len() != 25 {
            problems.push(format!("size instance {i}"));
        }
        if set.seqs().any(|s| s == pos) {
            problems.push(format!("positive present instance {i}"));
        }
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!("{} instances, 25 candidates each", data.instances.len())
        } else {
            format!("{} problems, first {}", problems.len(), problems[0])
        },
    )
}

fn retrieval_oracle() -> Outcome {
    let mut mismatches = 0;
    let mut queries = 0;
    for c in 0..RETRIEVAL_CORPORA {
        let mut rng = seed::derived_rng(31, "acceptance-retrieval", c);
        let n = rng.gen_range(1..=200);
        let dim = rng.gen_range(1..=16);
        let mut pids: Vec<u64> = (0..4 * n as u64).collect();
        pids.shuffle(&mut rng);
        pids.truncate(n);
        let coarse = c % 2 == 0;
        let val = |rng: &mut seed::Rng| {
            if coarse {
                rng.gen_range(-2i32..=2) as f64 * 0.5
            } else {
                rng.gen_range(-1.0..1.0)
            }
        };
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| val(&mut rng)).collect()).collect();
        let index = PassageIndex {
            pids: pids.clone(),
            dim,
            vectors: rows.concat(),
        };
        for _ in 0..10 {
            let q: Vec<f64> = (0..dim).map(|_| val(&mut rng)).collect();
            let k = rng.gen_range(1..=n + 10);
            queries += 1;
            if retrieve(&q, &index, k).unwrap() != common::naive_retrieve(&q, &pids, &rows, k) {
                mismatches += 1;
            }
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches} mismatches over {queries} queries on {RETRIEVAL_CORPORA} corpora"),
    )
}

fn metric_closed_forms() -> Outcome {
    let rel = |p: &[u64]| p.iter().copied().collect::<BTreeSet<u64>>();
    let cases = [
        ("mrr rank1", reciprocal_rank(&[9, 1], &rel(&[9]), 10), 1.0),
        ("mrr rank3", reciprocal_rank(&[1, 2, 9], &rel(&[9]), 10), 1.0 / 3.0),
        ("mrr rank11", reciprocal_rank(&(0..11).collect::<Vec<_>>(), &rel(&[10]), 10), 0.0),
        ("recall 1/1", recall(&[1, 9], &rel(&[9]), 10), 1.0),
        ("recall 1/2", recall(&[1, 9], &rel(&[9, 5]), 10), 0.5),
        ("recall 0", recall(&[1, 2], &rel(&[9]), 10), 0.0),
        ("ndcg rank1", ndcg(&[9, 1], &rel(&[9]), 10), 1.0),
        ("ndcg rank2", ndcg(&[1, 9], &rel(&[9]), 10), 0.630_929_753_571_457_4),
        ("ndcg none", ndcg(&[1, 2], &rel(&[9]), 10), 0.0),
    ];
    let bad: Vec<&str> = cases
        .iter()
        .filter(|(_, got, want)| (got - want).abs() > METRIC_TOL)
        .map(|c| c.0)
        .collect();
    outcome(bad.is_empty(), format!("{} cases, failing: {bad:?}", cases.len()))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

struct SeedResults {
    rand: f64,
    hard: f64,
    dark: f64,
    ablations: Vec<f64>,
}

const ABLATIONS: [(&str, Toggles); 5] = [
    ("-MixNeg", Toggles { mix: false, mask: true, adaptive: true, supervised: true }),
    ("-MixMask", Toggles { mix: true, mask: false, adaptive: true, supervised: true }),
    ("-MixNeg&MixMask", Toggles { mix: false, mask: false, adaptive: true, supervised: true }),
    ("-MixNeg&MixMask&Ada", Toggles { mix: false, mask: false, adaptive: false, supervised: true }),
    ("-MixNeg&MixMask&Ada&Sup", Toggles { mix: false, mask: false, adaptive: false, supervised: false }),
];

fn main() {
    let mut all_pass = true;
    let run = |id: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        report(id, name, t.elapsed(), &o);
        o.pass
    };
    all_pass &= run(1, "gradient correctness", &mut gradients);
    all_pass &= run(2, "KL and softmax properties", &mut kl_properties);
    all_pass &= run(3, "schedule exactness", &mut schedule);
    all_pass &= run(4, "dark-construction exactness", &mut dark_construction);
    all_pass &= run(5, "retrieval oracle", &mut retrieval_oracle);
    all_pass &= run(6, "metric closed forms", &mut metric_closed_forms);

    let cfg = RunConfig::default();
    let mut per_seed = Vec::new();
    let mut fig1: Option<Outcome> = None;
    let mut fig1_time = Duration::ZERO;
    let mut table1_time = Duration::ZERO;
    let mut table2_time = Duration::ZERO;
    for &s in &SEEDS {
        let cfg = RunConfig { seed: s, ..cfg.clone() };
        let t = Instant::now();
        let ex = Experiment::new(&cfg).unwrap();
        let teacher_time = t.elapsed();
        if fig1.is_none() {
            let scores = eval::teacher_group_scores(&ex.teacher, &ex.data, &cfg.distill.mask_ratios, cfg.seeds().masks)
                .unwrap();
            let h = Histogram::from_scores(&scores, &HIST_GROUPS, cfg.histogram).unwrap();
            let m = |k| eval::mean(&scores[&k]);
            let (mp, mm, mh) = (m(CandidateKind::Positive), m(CandidateKind::Mix), m(CandidateKind::HardNegative));
            let pos = h.counts(CandidateKind::Positive).unwrap();
            let ov_mix = eval::overlap_coefficient(pos, h.counts(CandidateKind::Mix).unwrap());
            let ov_hard = eval::overlap_coefficient(pos, h.counts(CandidateKind::HardNegative).unwrap());
            fig1 = Some(outcome(
                mp > mm && mm > mh && ov_mix > ov_hard,
                format!("mean score positive {mp:.3} > mix {mm:.3} > hard {mh:.3}; overlap with positive: mix {ov_mix:.3} vs hard {ov_hard:.3}"),
            ));
            fig1_time = t.elapsed();
        }
        let t = Instant::now();
        let score = |mode, toggles| ex.evaluate(&ex.student(&cfg, mode, toggles).unwrap()).unwrap().mrr_at_10;
        let rand = score(NegativesMode::Rand, Toggles::default());
        let hard = score(NegativesMode::Hard, Toggles::default());
        let dark = score(NegativesMode::Dark, Toggles::default());
        table1_time += t.elapsed() + teacher_time;
        let t = Instant::now();
        let ablations = ABLATIONS.iter().map(|(_, tg)| score(NegativesMode::Dark, *tg)).collect();
        table2_time += t.elapsed();
        let r = SeedResults { rand, hard, dark, ablations };
        println!(
            "  seed {s}: MRR@10 rand {:.4} hard {:.4} dark {:.4} | ablations {}",
            r.rand,
            r.hard,
            r.dark,
            r.ablations.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>().join(" ")
        );
        per_seed.push(r);
    }
    let fig1 = fig1.unwrap();
    report(7, "teacher score smoothing", fig1_time, &fig1);
    all_pass &= fig1.pass;

    let col = |f: &dyn Fn(&SeedResults) -> f64| mean(&per_seed.iter().map(f).collect::<Vec<_>>());
    let (r, h, d) = (col(&|x| x.rand), col(&|x| x.hard), col(&|x| x.dark));
    let t1 = outcome(
        d > h && h > r,
        format!("mean MRR@10 over {} seeds: dark {d:.4} > hard {h:.4} > rand {r:.4}", SEEDS.len()),
    );
    report(8, "negatives-mode ordering", table1_time, &t1);
    all_pass &= t1.pass;

    let rows: Vec<(&str, f64)> = ABLATIONS
        .iter()
        .enumerate()
        .map(|(i, (name, _))| (*name, col(&|x| x.ablations[i])))
        .collect();
    let worse: Vec<String> = rows.iter().filter(|(_, m)| *m > d).map(|(n, m)| format!("{n} {m:.4}")).collect();
    let t2 = outcome(
        worse.is_empty(),
        format!(
            "full {d:.4}; {}{}",
            rows.iter().map(|(n, m)| format!("{n} {m:.4}")).collect::<Vec<_>>().join(", "),
            if worse.is_empty() { String::new() } else { format!("; above full: {}", worse.join(", ")) }
        ),
    );
    report(9, "ablations", table2_time, &t2);
    all_pass &= t2.pass;

    all_pass &= run(10, "pipeline determinism", &mut determinism);

    if !all_pass {
        std::process::exit(1);
    }
}

fn determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_dark-distill");
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for (d, threads) in dirs.iter().zip(["1", "2"]) {
        let o = Command::new(bin)
            .args(["--seed", "7", "--threads", threads, "--out-dir"])
            .arg(d.path())
            .arg("pipeline")
            .output()
            .unwrap();
        if !o.status.success() {
            return outcome(false, format!("pipeline failed: {}", String::from_utf8_lossy(&o.stderr)));
        }
    }
    let files = ["metrics.json", "teacher.json", "student.json"];
    let differing: Vec<&str> = files
        .iter()
        .filter(|f| fs::read(dirs[0].path().join(f)).unwrap() != fs::read(dirs[1].path().join(f)).unwrap())
        .copied()
        .collect();
    outcome(
        differing.is_empty(),
        format!("default config run twice (1 and 2 threads); differing files: {differing:?}"),
    )
}
