//! Oracles shared by the integration tests.

#![allow(dead_code)]

use dark_distill::distill::loss::{instance_loss_var, joint_loss, kd_loss, sup_loss_resolved, InstanceTerms, KdTarget};
use dark_distill::dataset::Resolved;
use dark_distill::model::{softmax_over_candidates, CrossEncoderParams, DualEncoderParams, Distribution};
use dark_distill::optim::{finite_diff_grad, Gradients, Graph};
use dark_distill::seed;
use dark_distill::text::TokenSeq;
use rand::Rng;

pub const STEP: f64 = 1e-5;
pub const FLOOR: f64 = 1e-5;

fn random_seq(rng: &mut seed::Rng, vocab: usize, max_len: usize) -> TokenSeq {
    let len = rng.gen_range(1..=max_len);
    TokenSeq((0..len).map(|_| rng.gen_range(5..vocab as u32)).collect())
}

fn student(rng: &mut seed::Rng, vocab: usize, dim: usize) -> DualEncoderParams {
    let mut p = DualEncoderParams::init(vocab, dim, rng.gen());
    for v in p.embedding.data.iter_mut().chain(p.proj_w.data.iter_mut()).chain(p.proj_b.iter_mut()) {
        *v = rng.gen_range(-0.5..0.5);
    }
    p
}

fn random_distribution(rng: &mut seed::Rng, n: usize) -> Distribution {
    let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
    softmax_over_candidates(&scores).unwrap()
}

struct Case {
    de: DualEncoderParams,
    query: TokenSeq,
    positive: TokenSeq,
    negatives: Vec<TokenSeq>,
    candidates: Vec<TokenSeq>,
    teacher: Distribution,
}

fn case(i: u64) -> Case {
    let mut rng = seed::derived_rng(7, "grad-case", i);
    let vocab = rng.gen_range(8..24);
    let dim = rng.gen_range(1..=16);
    let m = rng.gen_range(1..=8);
    let n_cands = rng.gen_range(1..=25);
    let de = student(&mut rng, vocab, dim);
    Case {
        query: random_seq(&mut rng, vocab, 6),
        positive: random_seq(&mut rng, vocab, 10),
        negatives: (0..m).map(|_| random_seq(&mut rng, vocab, 10)).collect(),
        candidates: (0..n_cands).map(|_| random_seq(&mut rng, vocab, 10)).collect(),
        teacher: random_distribution(&mut rng, n_cands),
        de,
    }
}

impl Case {
    fn terms(&self, kd: bool) -> InstanceTerms<'_> {
        InstanceTerms::new(
            Resolved {
                query: &self.query,
                positive: &self.positive,
                negatives: self.negatives.iter().collect(),
            },
            kd.then(|| KdTarget {
                candidates: self.candidates.clone(),
                teacher: self.teacher.clone(),
            }),
        )
    }
}

fn analytic(de: &DualEncoderParams, items: &[InstanceTerms<'_>], lambda: f64) -> Gradients {
    let mut total = Gradients::zeros_like(de);
    for item in items {
        let mut g = Graph::new();
        let vars = de.leaves(&mut g);
        let tv = instance_loss_var(&mut g, de, &vars, item, lambda).unwrap().unwrap();
        let mut grads = g.backward(tv.total).unwrap();
        total.add_assign(&DualEncoderParams::gradients(&mut grads, &vars));
    }
    total
}


/// Double loop with its own inner product and a plain insertion of every
/// passage into a sorted output.
pub fn naive_retrieve(q: &[f64], pids: &[u64], rows: &[Vec<f64>], k: usize) -> Vec<(u64, f64)> {
    let mut out: Vec<(u64, f64)> = Vec::new();
    for (pid, row) in pids.iter().zip(rows) {
        let mut s = 0.0;
        for j in 0..q.len() {
            s += q[j] * row[j];
        }
        let pos = out
            .iter()
            .position(|&(p, v)| s > v || (s == v && *pid < p))
            .unwrap_or(out.len());
        out.insert(pos, (*pid, s));
    }
    out.truncate(k);
    out
}


pub fn sup_worst(cases: u64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..cases {
        let c = case(i);
        let r = Resolved {
            query: &c.query,
            positive: &c.positive,
            negatives: c.negatives.iter().collect(),
        };
        let fd = finite_diff_grad(|p: &DualEncoderParams| sup_loss_resolved(p, &r).unwrap(), &c.de, STEP);
        let an = analytic(&c.de, &[c.terms(false)], 1.0);
        worst = worst.max(an.max_rel_error(&fd, FLOOR));
    }
    worst
}

pub fn kd_worst(cases: u64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..cases {
        let c = case(1000 + i);
        let cands: Vec<&TokenSeq> = c.candidates.iter().collect();
        let fd = finite_diff_grad(
            |p: &DualEncoderParams| kd_loss(p, &c.teacher, &cands, &c.query).unwrap(),
            &c.de,
            STEP,
        );
        let an = analytic(&c.de, &[c.terms(true)], 0.0);
        worst = worst.max(an.max_rel_error(&fd, FLOOR));
    }
    worst
}

pub fn joint_worst(cases: u64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..cases {
        let a = case(2000 + 2 * i);
        let mut b = case(2001 + 2 * i);
        // both instances must share the student and its vocabulary
        let v = a.de.vocab_size() as u32;
        let remap = |s: &mut TokenSeq| s.0.iter_mut().for_each(|t| *t = 5 + (*t - 5) % (v - 5));
        remap(&mut b.query);
        remap(&mut b.positive);
        b.negatives.iter_mut().chain(b.candidates.iter_mut()).for_each(remap);
        b.de = a.de.clone();
        let in_plan = i % 3 != 0;
        let batch = [a.terms(true), b.terms(in_plan)];
        let fd = finite_diff_grad(|p: &DualEncoderParams| joint_loss(p, &batch, 0.01).unwrap(), &a.de, STEP);
        let an = analytic(&a.de, &batch, 0.01);
        worst = worst.max(an.max_rel_error(&fd, FLOOR));
    }
    worst
}

pub fn cross_encoder_worst(cases: u64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..cases {
        let mut rng = seed::derived_rng(11, "ce-case", i);
        let vocab = rng.gen_range(8..20);
        let dim = rng.gen_range(1..=8);
        let hidden = rng.gen_range(1..=8);
        let mut ce = CrossEncoderParams::init(vocab, dim, hidden, rng.gen());
        for v in ce
            .embedding
            .data
            .iter_mut()
            .chain(ce.w1.data.iter_mut())
            .chain(ce.b1.iter_mut())
            .chain(ce.w2.iter_mut())
        {
            *v = rng.gen_range(-0.5..0.5);
        }
        let q = random_seq(&mut rng, vocab, 5);
        let cands: Vec<TokenSeq> = (0..rng.gen_range(2..=6)).map(|_| random_seq(&mut rng, vocab, 8)).collect();
        let loss = |p: &CrossEncoderParams| {
            let s: Vec<f64> = cands.iter().map(|c| p.score(&q, c).unwrap()).collect();
            dark_distill::distill::loss::sup_loss_from_scores(s[0], &s[1..])
        };
        let fd = finite_diff_grad(loss, &ce, STEP);
        let mut g = Graph::new();
        let vars = ce.leaves(&mut g);
        let scores: Vec<_> = cands.iter().map(|c| ce.score_var(&mut g, &vars, &q, c).unwrap()).collect();
        let s = g.stack(&scores);
        let lsm = g.log_softmax(s);
        let first = g.index(lsm, 0);
        let l = g.affine(first, -1.0, 0.0);
        let mut grads = g.backward(l).unwrap();
        let an = CrossEncoderParams::gradients(&mut grads, &vars);
        worst = worst.max(an.max_rel_error(&fd, FLOOR));
    }
    worst
}
