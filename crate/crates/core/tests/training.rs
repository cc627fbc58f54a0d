use dark_distill::corpus::{gen_synthetic, SynthConfig};
use dark_distill::dark::{self, CandidateKind};
use dark_distill::dataset::Dataset;
use dark_distill::distill::plan::{confidence_from_scores, plan_epoch, ConfidenceRecord};
use dark_distill::distill::train::{
    kd_candidates, train_student, train_teacher, DistillConfig, NegativesMode, StudentOptions, TeacherConfig, Toggles,
};
use dark_distill::distill::score_confidences;
use dark_distill::model::CrossEncoderParams;
use dark_distill::seed;
use dark_distill::text::Vocab;

fn data(n_queries: usize) -> Dataset {
    let cfg = SynthConfig {
        vocab_size: 405,
        n_topics: 30,
        topic_token_count: 12,
        n_queries,
        n_dev_queries: 10,
        seed: 2,
        ..SynthConfig::default()
    };
    let c = gen_synthetic(&cfg).unwrap();
    let vocab = Vocab::build(&c.passages, &c.queries, 10_000).unwrap();
    Dataset::new(&c, vocab, 32, 128).unwrap()
}

fn teacher_cfg(epochs: usize) -> TeacherConfig {
    TeacherConfig {
        dim: 8,
        hidden: 8,
        epochs,
        warmup_steps: 5,
        ..TeacherConfig::default()
    }
}

fn student_cfg(epochs: usize) -> DistillConfig {
    DistillConfig {
        dim: 8,
        epochs,
        warmup_steps: 5,
        ..DistillConfig::default()
    }
}

#[test]
fn teacher_zero_epochs_returns_init() {
    let d = data(20);
    let run = train_teacher(&teacher_cfg(0), &d, 5).unwrap();
    assert_eq!(run.params, CrossEncoderParams::init(d.vocab.len(), 8, 8, seed::derive(5, "init", 0)));
    assert!(run.log.is_empty());
}

#[test]
fn teacher_and_student_are_deterministic() {
    let d = data(24);
    let a = train_teacher(&teacher_cfg(2), &d, 5).unwrap();
    let b = train_teacher(&teacher_cfg(2), &d, 5).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, train_teacher(&teacher_cfg(0), &d, 5).unwrap().params);
    let conf = score_confidences(&a.params, &d).unwrap();
    for mode in [NegativesMode::Rand, NegativesMode::Hard, NegativesMode::Dark] {
        let opts = StudentOptions::new(mode, 9);
        let s1 = train_student(&student_cfg(2), &d, &a.params, &conf, &opts).unwrap();
        let s2 = train_student(&student_cfg(2), &d, &a.params, &conf, &opts).unwrap();
        assert_eq!(s1.params, s2.params);
        assert_eq!(s1.log, s2.log);
        assert!(s1.log.iter().all(|l| l.loss.is_finite()));
    }
}

#[test]
fn student_plans_shrink_and_nest() {
    let d = data(30);
    let t = train_teacher(&teacher_cfg(1), &d, 1).unwrap().params;
    let conf = score_confidences(&t, &d).unwrap();
    let run = train_student(&student_cfg(4), &d, &t, &conf, &StudentOptions::new(NegativesMode::Dark, 3)).unwrap();
    let sizes: Vec<usize> = run.plans.iter().map(|p| p.len()).collect();
    assert_eq!(sizes, vec![27, 23, 19, 15]);
    for w in run.plans.windows(2) {
        assert_eq!(&w[0].selected[..w[1].len()], &w[1].selected[..]);
    }
    let kd_per_epoch: Vec<usize> = (1..=4)
        .map(|e| run.log.iter().filter(|l| l.epoch == e).map(|l| l.n_kd).sum())
        .collect();
    assert_eq!(kd_per_epoch, sizes);
}

#[test]
fn no_terms_means_no_step() {
    let d = data(16);
    let t = train_teacher(&teacher_cfg(0), &d, 1).unwrap().params;
    let conf = score_confidences(&t, &d).unwrap();
    let cfg = DistillConfig {
        lambda: 0.0,
        ..student_cfg(2)
    };
    let opts = StudentOptions {
        toggles: Toggles {
            supervised: false,
            ..Toggles::default()
        },
        ..StudentOptions::new(NegativesMode::Dark, 4)
    };
    // with λ = 0, only plan members change anything
    let run = train_student(&cfg, &d, &t, &conf, &opts).unwrap();
    assert!(run.log.iter().all(|l| l.applied == (l.n_kd > 0)));
    let fresh = dark_distill::model::DualEncoderParams::init(d.vocab.len(), 8, seed::derive(4, "init", 0));
    let cfg0 = DistillConfig {
        lambda: 0.0,
        ..student_cfg(0)
    };
    let run0 = train_student(&cfg0, &d, &t, &conf, &opts).unwrap();
    assert_eq!(run0.params, fresh);
}

#[test]
fn dark_candidates_have_expected_layout() {
    let d = data(12);
    let cfg = student_cfg(1);
    for (i, inst) in d.instances.iter().enumerate() {
        let set = kd_candidates(inst, i, &d, &cfg, Toggles::default(), NegativesMode::Dark, 77, 1).unwrap();
        assert_eq!(set.len(), 25);
        let pos = d.passage(inst.positive_pid).unwrap();
        assert!(set.seqs().all(|s| s != pos));
        let kinds: Vec<CandidateKind> = set.kinds().collect();
        assert_eq!(kinds.iter().filter(|k| **k == CandidateKind::Mix).count(), 10);
        assert_eq!(kinds.iter().filter(|k| **k == CandidateKind::Mask).count(), 5);
        // masks are redrawn per epoch
        let again = kd_candidates(inst, i, &d, &cfg, Toggles::default(), NegativesMode::Dark, 77, 2).unwrap();
        assert_eq!(set.candidates[..20], again.candidates[..20]);
        let hard = kd_candidates(inst, i, &d, &cfg, Toggles::default(), NegativesMode::Hard, 77, 1).unwrap();
        assert_eq!(hard, dark::standard_candidates(inst, &d).unwrap());
    }
}

#[test]
fn confidence_is_shift_invariant_and_plan_obeys_formula() {
    for (pos, negs) in [(1.0, vec![0.0, 0.0]), (-3.0, vec![2.0, 0.5, -1.0]), (0.2, vec![0.2])] {
        let base = confidence_from_scores(pos, &negs);
        for shift in [-50.0, -1.5, 7.25, 300.0] {
            let shifted: Vec<f64> = negs.iter().map(|n| n + shift).collect();
            assert!((confidence_from_scores(pos + shift, &shifted) - base).abs() < 1e-12);
        }
    }
    let recs: Vec<ConfidenceRecord> = (0..9)
        .map(|i| ConfidenceRecord {
            index: i,
            query_id: i as u64,
            confidence: -((i * 7 % 9) as f64),
        })
        .collect();
    let p = plan_epoch(&recs, 3, 3).unwrap();
    assert_eq!(p.len(), 5);
    let mut expected: Vec<usize> = (0..9).collect();
    expected.sort_by(|&a, &b| recs[b].confidence.total_cmp(&recs[a].confidence).then(a.cmp(&b)));
    assert_eq!(p.selected, expected[..5]);
}
