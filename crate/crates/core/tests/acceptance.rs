//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the verdict lines always reach the
//! terminal; exits non-zero when any criterion fails. The desk-scale victim
//! is pretrained once and shared by the attack, defense and transfer checks.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use cosped_core::autodiff::{Tape, Tensor};
use cosped_core::corpus::{generate_corpus, split, Dataset, SequencePair};
use cosped_core::decoding::{
    decode, select_consistent, stream_rng, Candidate, DecodeConfig, Strategy,
};
use cosped_core::defense::{apply_edit, evaluate_defense, fit_rank_one_edit};
use cosped_core::harness::{self, ExperimentConfig, Plan};
use cosped_core::linalg::singular_values;
use cosped_core::losses::{
    dynamic_k, dynamic_loss, focal_loss, mle_loss, smooth_loss, BaseLoss, CommonSet, Component,
    ErrorProneSet, LossStack, TokenLossVector,
};
use cosped_core::metrics::{self, ExtractionReport, ER_KS};
use cosped_core::model::{pretrain_victim, ModelConfig, VictimModel};
use cosped_core::transfer::{
    evaluate_transfer, fit_projection, project_to_hard_tokens, ProjectionMap,
};
use cosped_core::tuner::{init_soft_prompt, train_soft_prompt, SoftPrompt, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    id: usize,
    pass: bool,
    detail: String,
}

fn verdict(id: usize, pass: bool, detail: String) -> Verdict {
    println!(
        "{} criterion {id:>2}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    Verdict { id, pass, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tokens(r: &mut ChaCha8Rng, n: usize, v: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(0..v)).collect()
}

// ---------------------------------------------------------------- gradients

fn small_victim(d: usize, layers: usize, v: usize, seed: u64) -> VictimModel {
    VictimModel::init(ModelConfig {
        vocab_size: v,
        model_dim: d,
        layers,
        heads: 2,
        ff_dim: 2 * d,
        max_context: 64,
        seed,
    })
    .unwrap()
    .freeze()
}

struct LossFixture {
    model: VictimModel,
    pairs: Vec<SequencePair>,
    eps: ErrorProneSet,
    common: CommonSet,
}

impl LossFixture {
    fn new() -> Self {
        let v = 32;
        let model = small_victim(16, 1, v, 11);
        let mut r = rng(12);
        let pairs: Vec<SequencePair> = (0..2)
            .map(|id| SequencePair {
                id,
                prefix: random_tokens(&mut r, 6, v),
                suffix: random_tokens(&mut r, 10, v),
            })
            .collect();
        let mut eps = ErrorProneSet::new(v, 1);
        for p in &pairs {
            eps.observe(&p.suffix, &random_tokens(&mut r, p.suffix.len(), v));
        }
        eps.refresh();
        let common = CommonSet::from_counts(
            &Dataset {
                pairs: pairs.clone(),
            }
            .token_counts(v),
        );
        LossFixture {
            model,
            pairs,
            eps,
            common,
        }
    }

    /// Batch-mean combined loss at `z`, with its gradient when asked.
    fn eval(&self, stack: &LossStack, z: &Tensor, grad: bool) -> (f64, Option<Tensor>) {
        let mut tape = Tape::new();
        let w = self.model.bind(&mut tape, false);
        let zv = tape.leaf(z.clone(), true);
        let mut losses = Vec::new();
        for p in &self.pairs {
            let s = self
                .model
                .suffix_scores(&mut tape, &w, Some(zv), &p.prefix, &p.suffix)
                .unwrap();
            let tlv =
                TokenLossVector::new(&mut tape, s.gold_log_probs, p.suffix.clone(), s.predicted)
                    .unwrap();
            losses.push(
                stack
                    .combine(&mut tape, &tlv, &self.eps, &self.common)
                    .unwrap()
                    .total,
            );
        }
        let stacked = tape.stack(&losses).unwrap();
        let loss = tape.mean(stacked).unwrap();
        let value = tape.value(loss).item().unwrap();
        let g = grad.then(|| tape.backward(loss).unwrap().take(zv).unwrap());
        (value, g)
    }
}

fn criterion_1() -> Verdict {
    let t = Instant::now();
    let fx = LossFixture::new();
    let z = init_soft_prompt(&fx.model, 4, 3).unwrap().z;
    let h = 1e-5;
    let mut worst = (0.0f64, String::new());
    let stacks = LossStack::combinations();
    for stack in &stacks {
        let (_, g) = fx.eval(stack, &z, true);
        let g = g.unwrap();
        let mut fd = vec![0.0; z.len()];
        for (i, slot) in fd.iter_mut().enumerate() {
            let mut plus = z.clone();
            plus.data_mut()[i] += h;
            let mut minus = z.clone();
            minus.data_mut()[i] -= h;
            *slot = (fx.eval(stack, &plus, false).0 - fx.eval(stack, &minus, false).0) / (2.0 * h);
        }
        let diff: f64 = g
            .data()
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rel = diff / norm(g.data()).max(norm(&fd)).max(1e-12);
        if rel >= worst.0 {
            worst = (rel, stack.to_string());
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        1,
        stacks.len() == 16 && worst.0 <= 1e-4 && secs <= 60.0,
        format!(
            "FD gradients, {} stacks, worst rel err {:.2e} ({}), {secs:.1}s",
            stacks.len(),
            worst.0,
            worst.1
        ),
    )
}

// ---------------------------------------------------------------- identities

fn scalar_and_grad(
    lp: &[f64],
    f: impl FnOnce(&mut Tape, &TokenLossVector) -> cosped_core::Result<cosped_core::autodiff::Var>,
) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let leaf = tape.leaf(Tensor::vector(lp.to_vec()), true);
    let tlv = TokenLossVector::new(&mut tape, leaf, vec![0; lp.len()], vec![0; lp.len()]).unwrap();
    let out = f(&mut tape, &tlv).unwrap();
    let value = tape.value(out).item().unwrap();
    let g = tape.backward(out).unwrap().take(leaf).unwrap();
    (value, g.data().to_vec())
}

fn max_gap(a: &(f64, Vec<f64>), b: &(f64, Vec<f64>)) -> f64 {
    a.1.iter()
        .zip(&b.1)
        .map(|(x, y)| (x - y).abs())
        .fold((a.0 - b.0).abs(), f64::max)
}

fn criterion_2() -> Verdict {
    let mut r = rng(21);
    let (mut focal, mut smooth, mut dynamic) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = r.random_range(1..=50);
        let lp: Vec<f64> = (0..n).map(|_| -r.random_range(0.0..6.0)).collect();
        let mle = scalar_and_grad(&lp, |t, v| mle_loss(t, v));
        focal = focal.max(max_gap(
            &mle,
            &scalar_and_grad(&lp, |t, v| focal_loss(t, v, 1.0, 0.0)),
        ));
        smooth = smooth.max(max_gap(
            &mle,
            &scalar_and_grad(&lp, |t, v| smooth_loss(t, v, n)),
        ));

        // Confident vectors keep L_MLE under the threshold.
        let confident: Vec<f64> = (0..n).map(|_| -r.random_range(0.0..0.1)).collect();
        let k = r.random_range(1..=n);
        let dy = scalar_and_grad(&confident, |t, v| {
            dynamic_loss(t, v, k, 0.1, 5.0).map(|(x, _)| x)
        });
        let sm = scalar_and_grad(&confident, |t, v| smooth_loss(t, v, k));
        dynamic = dynamic.max(max_gap(&dy, &sm));
    }
    let worst = focal.max(smooth).max(dynamic);
    verdict(
        2,
        worst <= 1e-12,
        format!("loss identities on 100 vectors, max gap focal {focal:.1e}, smooth {smooth:.1e}, dynamic {dynamic:.1e}"),
    )
}

// ---------------------------------------------------------------- k_dy

fn criterion_3() -> Verdict {
    // L = i/8 and T_D = 1/10 with alpha = 5, N = 5 and k_S = 30. In units of
    // 1/40 everything is an integer, so the floor is exact.
    let (n, alpha, len) = (5i64, 5i64, 30i64);
    let mut mismatches = Vec::new();
    for i in 0..50i64 {
        let mle = i as f64 / 8.0;
        let expected = if 10 * i <= 8 {
            n
        } else {
            (40 * n + alpha * (5 * i - 4)).div_euclid(40)
        }
        .clamp(1, len) as usize;
        let got = dynamic_k(mle, n as usize, 0.1, alpha as f64, len as usize);
        if got != expected {
            mismatches.push((i, got, expected));
        }
    }
    verdict(
        3,
        mismatches.is_empty(),
        format!(
            "k_dy on 50 grid points, {} mismatches {:?}",
            mismatches.len(),
            mismatches
        ),
    )
}

// ---------------------------------------------------------------- SCD

fn criterion_4() -> Verdict {
    let mut r = rng(41);
    let d_optimal = 0.7;
    let mut agree = 0;
    for _ in 0..200 {
        let eos = r.random_bool(0.5).then_some(0);
        let cands: Vec<Candidate> = (0..r.random_range(1..=6))
            .map(|_| {
                let len = r.random_range(1..=10);
                let tokens = random_tokens(&mut r, len, 5);
                // Coarse log-probabilities so that ties actually happen.
                let log_prob = -(r.random_range(0..4) as f64);
                let trunc = match eos.and_then(|e| tokens.iter().position(|&t| t == e)) {
                    Some(i) => tokens[..i].to_vec(),
                    None => tokens.clone(),
                };
                let mut uniq = trunc.clone();
                uniq.sort_unstable();
                uniq.dedup();
                let diversity = if trunc.is_empty() {
                    0.0
                } else {
                    uniq.len() as f64 / trunc.len() as f64
                };
                Candidate {
                    tokens,
                    log_prob,
                    diversity,
                }
            })
            .collect();
        // Smallest deviation, then higher log-probability, then lower index.
        let mut best = 0;
        for i in 1..cands.len() {
            let (di, db) = (
                (cands[i].diversity - d_optimal).abs(),
                (cands[best].diversity - d_optimal).abs(),
            );
            if di < db || (di == db && cands[i].log_prob > cands[best].log_prob) {
                best = i;
            }
        }
        if select_consistent(&cands, eos, d_optimal) == Some(best) {
            agree += 1;
        }
    }
    verdict(
        4,
        agree == 200,
        format!("self-consistency vs brute force, {agree}/200 agree"),
    )
}

// ---------------------------------------------------------------- decoders

fn criterion_5() -> Verdict {
    let m = small_victim(16, 2, 16, 51);
    let mut r = rng(52);
    let greedy = DecodeConfig {
        max_new_tokens: 8,
        ..DecodeConfig::for_strategy(Strategy::Greedy)
    };
    let beam1 = DecodeConfig {
        beam_size: 1,
        ..DecodeConfig {
            strategy: Strategy::Beam,
            ..greedy.clone()
        }
    };
    let mut same = 0;
    for i in 0..50 {
        let len = r.random_range(1..=8);
        let prefix = random_tokens(&mut r, len, 16);
        let g = decode(&m, None, &prefix, &greedy, &mut stream_rng(0, i)).unwrap();
        let b = decode(&m, None, &prefix, &beam1, &mut stream_rng(0, i)).unwrap();
        if g.tokens == b.tokens {
            same += 1;
        }
    }

    let beam3 = DecodeConfig {
        strategy: Strategy::Beam,
        beam_size: 3,
        max_new_tokens: 2,
        ..Default::default()
    };
    let mut exhaustive = 0;
    let cases = 20;
    for seed in 0..cases {
        let toy = small_victim(8, 1, 3, 100 + seed);
        let prefix = random_tokens(&mut r, 3, 3);
        let st = toy.start(None, &prefix).unwrap();
        let lp0 = st.log_probs();
        let mut best = (f64::NEG_INFINITY, vec![]);
        for a in 0..3 {
            let mut s = st.clone();
            toy.step(&mut s, a).unwrap();
            let lp1 = s.log_probs();
            for b in 0..3 {
                if lp0[a] + lp1[b] > best.0 {
                    best = (lp0[a] + lp1[b], vec![a, b]);
                }
            }
        }
        let got = decode(&toy, None, &prefix, &beam3, &mut stream_rng(0, 0)).unwrap();
        if got.tokens == best.1 {
            exhaustive += 1;
        }
    }
    verdict(
        5,
        same == 50 && exhaustive == cases,
        format!("beam(1) = greedy on {same}/50 prefixes; 2-step beam = exhaustive on {exhaustive}/{cases} V=3 models"),
    )
}

// ---------------------------------------------------------------- desk run

struct Desk {
    cfg: ExperimentConfig,
    model: VictimModel,
    corpus: Dataset,
    eval: Dataset,
    header: Tensor,
    baseline: ExtractionReport,
    attacks: Vec<(u64, SoftPrompt, ExtractionReport)>,
}

fn best_stack() -> LossStack {
    LossStack::new(BaseLoss::Focal, &[Component::Smooth, Component::Additive])
}

fn criteria_6_to_8(reports: &mut Vec<ExtractionReport>) -> (Desk, Vec<Verdict>) {
    let cfg = ExperimentConfig::with_seed(1);
    let t = Instant::now();
    let corpus = generate_corpus(&cfg.corpus).unwrap();
    let (model, trace) = pretrain_victim(cfg.model.clone(), &corpus, &cfg.pretrain).unwrap();
    println!(
        "     desk victim pretrained in {:.0}s",
        t.elapsed().as_secs_f64()
    );
    let splits = split(&corpus, cfg.split.ratio, cfg.split.seed).unwrap();
    let header = model.embed(&trace.preamble).unwrap();
    let digest = model.digest();
    let greedy = cfg.decode.clone();
    let baseline = ExtractionReport::new(
        harness::BASELINE_METHOD,
        "acceptance",
        metrics::run_extraction(&model, None, &splits.eval, &greedy).unwrap(),
    )
    .unwrap();
    reports.push(baseline.clone());

    let mut attacks = Vec::new();
    let mut digests_ok = model.digest() == digest;
    let mut worst_secs = 0.0f64;
    for seed in [1u64, 2, 3] {
        let t = Instant::now();
        let c = ExperimentConfig {
            seed,
            ..cfg.clone()
        }
        .resolved();
        let train = TrainConfig {
            loss: best_stack(),
            ..c.train.clone()
        };
        let init = init_soft_prompt(&model, train.prompt_len, seed).unwrap();
        let (prompt, _) = train_soft_prompt(&model, init, &splits.attack, &train).unwrap();
        digests_ok &= model.digest() == digest;
        let report = ExtractionReport::new(
            harness::ATTACK_METHOD,
            "acceptance",
            metrics::run_extraction(&model, Some(&prompt.z), &splits.eval, &c.decode).unwrap(),
        )
        .unwrap();
        digests_ok &= model.digest() == digest;
        worst_secs = worst_secs.max(t.elapsed().as_secs_f64());
        reports.push(report.clone());
        attacks.push((seed, prompt, report));
    }

    let base = baseline.rate(50);
    let gains: Vec<String> = attacks
        .iter()
        .map(|(s, _, r)| format!("seed {s}: {:.1}", r.rate(50)))
        .collect();
    let all_up = attacks.iter().all(|(_, _, r)| r.rate(50) >= base + 10.0);
    let v6 = verdict(
        6,
        all_up && worst_secs <= 600.0,
        format!(
            "ER_50 on D_p, baseline {base:.1} vs {} (need +10), slowest seed {worst_secs:.0}s",
            gains.join(", ")
        ),
    );
    let v8 = verdict(
        8,
        digests_ok,
        format!(
            "victim digest {} across 3 tunings and 4 extractions",
            if digests_ok { "unchanged" } else { "CHANGED" }
        ),
    );
    (
        Desk {
            cfg,
            model,
            corpus,
            eval: splits.eval,
            header,
            baseline,
            attacks,
        },
        vec![v6, v8],
    )
}

fn criterion_9(desk: &Desk, reports: &mut Vec<ExtractionReport>) -> Verdict {
    let t = Instant::now();
    let cfg = &desk.cfg.defense;
    let n = cfg.n_targets.min(desk.eval.len());
    let targets = Dataset {
        pairs: desk.eval.pairs[..n].to_vec(),
    };
    let heldout = Dataset {
        pairs: desk
            .corpus
            .pairs
            .iter()
            .filter(|p| !targets.pairs.iter().any(|t| t.id == p.id))
            .cloned()
            .collect(),
    };
    let (edit, _) = fit_rank_one_edit(
        &desk.model,
        Some(&desk.header),
        &targets,
        &desk.corpus,
        cfg,
        "acceptance",
    )
    .unwrap();
    let edited = apply_edit(&desk.model, &edit).unwrap();
    let prompt = &desk.attacks[0].1.z;
    let report = evaluate_defense(
        &desk.model,
        &edited,
        Some(prompt),
        &desk.cfg.decode,
        &targets,
        &heldout,
        Some(&desk.header),
        "acceptance",
    )
    .unwrap();
    let secs = t.elapsed().as_secs_f64();
    let sv = singular_values(&edit.delta()).unwrap();
    let sigma2 = sv.get(1).copied().unwrap_or(0.0);
    let (pre5, post5, post50) = (
        report.pre.rate(5),
        report.post.rate(5),
        report.post.rate(50),
    );
    reports.push(report.pre.clone());
    reports.push(report.post.clone());
    verdict(
        9,
        post50 == 0.0 && post5 <= 0.2 * pre5 && report.ppl_ratio <= 1.15 && sigma2 < 1e-10 && secs <= 300.0,
        format!(
            "defense on {n} targets: ER_50 {:.1} -> {post50:.1}, ER_5 {pre5:.1} -> {post5:.1}, PPL ratio {:.3}, sigma_2 {sigma2:.1e}, {secs:.0}s",
            report.pre.rate(50),
            report.ppl_ratio
        ),
    )
}

fn criterion_10(desk: &Desk, reports: &mut Vec<ExtractionReport>) -> Verdict {
    let mut r = rng(101);
    let table = &desk.model.weights.token_embedding;
    let d = table.cols();
    let z = Tensor::matrix(
        64,
        d,
        (0..64 * d).map(|_| r.random_range(-0.5..0.5)).collect(),
    )
    .unwrap();
    let got = project_to_hard_tokens(&z, table).unwrap();
    let scan: Vec<usize> = (0..z.rows())
        .map(|i| {
            let mut dist: Vec<(f64, usize)> = (0..table.rows())
                .map(|t| {
                    let d2 = z
                        .row(i)
                        .iter()
                        .zip(table.row(t))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (d2, t)
                })
                .collect();
            dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            dist[0].1
        })
        .collect();
    let nn_ok = got == scan;

    let (rows, d_src, d_tgt) = (80, 12, 20);
    let a = Tensor::matrix(
        rows,
        d_src,
        (0..rows * d_src)
            .map(|_| r.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap();
    let planted = Tensor::matrix(
        d_tgt,
        d_src,
        (0..d_tgt * d_src)
            .map(|_| r.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap();
    let b = a.matmul(&planted.transpose()).unwrap();
    let fit = fit_projection(&a, &b, &(0..rows).collect::<Vec<_>>()).unwrap();
    let map_err = fit.matrix.max_abs_diff(&planted);

    let (_, prompt, source) = &desk.attacks[0];
    let same = evaluate_transfer(
        &desk.model,
        &prompt.z,
        &desk.model,
        &desk.eval,
        &desk.cfg.decode,
        Some(&ProjectionMap::identity(d)),
        "acceptance",
    )
    .unwrap();
    let identity_ok = same.scaled.er == source.er && same.baseline.er == desk.baseline.er;
    reports.extend(same.rows().map(Clone::clone));
    verdict(
        10,
        nn_ok && map_err <= 1e-8 && identity_ok,
        format!(
            "projection {} exhaustive scan on 64 rows; planted map err {map_err:.1e}; identity transfer ER_50 {:.1} vs source {:.1}",
            if nn_ok { "matches" } else { "DIFFERS FROM" },
            same.scaled.rate(50),
            source.rate(50)
        ),
    )
}

// ---------------------------------------------------------------- determinism

fn read_reports(path: &Path) -> Vec<ExtractionReport> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn criterion_11(reports: &mut Vec<ExtractionReport>) -> Verdict {
    let smoke = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    let base = ExperimentConfig::from_path(&smoke).unwrap();
    let run = |out: &Path| -> (Vec<u8>, Vec<u8>) {
        let cfg = ExperimentConfig {
            out_dir: out.to_path_buf(),
            ..base.clone()
        };
        for step in [
            harness::cmd_pretrain,
            harness::cmd_tune,
            harness::cmd_extract,
            harness::cmd_defend,
        ] {
            step(&cfg).unwrap();
        }
        let plan = Plan::new(&cfg).unwrap();
        (
            std::fs::read(plan.extract().unwrap().path("reports.jsonl")).unwrap(),
            std::fs::read(plan.defend().unwrap().path("defense.json")).unwrap(),
        )
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run(a.path());
    let rerun = run(a.path());
    let fresh = run(b.path());
    let plan = Plan::new(&ExperimentConfig {
        out_dir: a.path().to_path_buf(),
        ..base.clone()
    })
    .unwrap();
    reports.extend(read_reports(&plan.extract().unwrap().path("reports.jsonl")));
    let same = first == rerun && first == fresh;
    verdict(
        11,
        same,
        format!(
            "report JSON {} on rerun in place and in a fresh directory",
            if same { "byte-identical" } else { "DIFFERS" }
        ),
    )
}

fn criterion_7(reports: &[ExtractionReport]) -> Verdict {
    let bad: Vec<&str> = reports
        .iter()
        .filter(|r| !(r.is_monotone() && ER_KS.iter().all(|k| r.er.contains_key(k))))
        .map(|r| r.method.as_str())
        .collect();
    verdict(
        7,
        bad.is_empty(),
        format!(
            "{} reports monotone in k, violations {:?}",
            reports.len(),
            bad
        ),
    )
}

fn main() -> ExitCode {
    // `cargo test -- <filter>` and `--list` should not trigger the full run.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    if args
        .iter()
        .any(|a| !a.starts_with('-') && !"acceptance".contains(a.as_str()))
    {
        return ExitCode::SUCCESS;
    }

    let t = Instant::now();
    let mut verdicts = vec![
        criterion_1(),
        criterion_2(),
        criterion_3(),
        criterion_4(),
        criterion_5(),
    ];
    let mut reports = Vec::new();
    let (desk, v) = criteria_6_to_8(&mut reports);
    verdicts.extend(v);
    verdicts.push(criterion_9(&desk, &mut reports));
    verdicts.push(criterion_10(&desk, &mut reports));
    verdicts.push(criterion_11(&mut reports));
    verdicts.push(criterion_7(&reports));

    verdicts.sort_by_key(|v| v.id);
    println!("\nacceptance summary ({:.0}s)", t.elapsed().as_secs_f64());
    for v in &verdicts {
        println!(
            "{} {:>2} {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.id,
            v.detail
        );
    }
    let failed = verdicts.iter().filter(|v| !v.pass).count();
    println!("{} passed, {failed} failed", verdicts.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
