//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Tolerances are fixed here.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use personalink::corpus::{build_pkb, enumerate_pairs, load_chat_dataset, MatchMode, Side, Split};
use personalink::encoder::{build_vocab, grad_score, score_matrix, BiEncoderParams, Role, Vocab};
use personalink::linalg::Matrix;
use personalink::linkdata::{build_seed_linkset, expand_linkset, ExpansionPolicy};
use personalink::metrics::{bucketed_recall, jaccard, mrr, recall_at_k, recall_from_ranks, Buckets};
use personalink::oracles::{content_words, expand, nli_classify, Expander, NliClass, Relation, StubExpander, StubNli};
use personalink::pipeline::eval::ReportSet;
use personalink::pipeline::{analyze_bias, gen_synthetic_corpus, run_pipeline, write_synthetic, SyntheticSpec};
use personalink::retrieval::{pkb_violations, Bm25Stats, Linker, PkbIndex, RankedList};
use personalink::service::{CreateRequest, Engine, EngineSettings};
use personalink::training::{distill_loss, fit, inbatch_ce_loss, inbatch_ce_loss_with_extra, train_link_student, train_link_teacher, train_link_teacher_from, TrainConfig, TrainData};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(name: &'static str, pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { name, pass, detail: detail.into() }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// gradients
// ---------------------------------------------------------------------------

const H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
/// Denominator floor: components below this are compared in absolute terms.
const GRAD_FLOOR: f64 = 1e-6;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR)
}

fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    m.data.iter_mut().for_each(|x| *x = r.gen_range(-scale..scale));
    m
}

fn random_params(r: &mut ChaCha8Rng, vocab: Arc<Vocab>, dim: usize) -> BiEncoderParams {
    let mut p = BiEncoderParams::zeros(Role::Link, vocab, dim);
    for buf in p.buffers_mut() {
        buf.iter_mut().for_each(|x| *x = r.gen_range(-1.0..1.0));
    }
    p
}

fn random_ids(r: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<Vec<u32>> {
    (0..n).map(|_| (0..r.gen_range(1..5)).map(|_| r.gen_range(0..vocab as u32)).collect()).collect()
}

/// Central differences of `f` over every parameter, compared with `grads`.
fn check_params(p: &BiEncoderParams, analytic: &[&Vec<f64>; 6], f: &dyn Fn(&BiEncoderParams) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..6 {
        for i in 0..analytic[k].len() {
            let mut plus = p.clone();
            plus.buffers_mut()[k][i] += H;
            let mut minus = p.clone();
            minus.buffers_mut()[k][i] -= H;
            let num = (f(&plus) - f(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(analytic[k][i], num));
        }
    }
    worst
}

fn check_matrix(s: &Matrix, analytic: &Matrix, f: &dyn Fn(&Matrix) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..s.data.len() {
        let mut plus = s.clone();
        plus.data[i] += H;
        let mut minus = s.clone();
        minus.data[i] -= H;
        worst = worst.max(rel_err(analytic.data[i], (f(&plus) - f(&minus)) / (2.0 * H)));
    }
    worst
}

fn gradient_check() -> Outcome {
    let t = Instant::now();
    let n = 100;
    let vocab = Arc::new(build_vocab(["a b c d e f g h"], 1));
    let v = vocab.len();
    let mut r = rng(11);
    let (mut w_score, mut w_ce, mut w_kl, mut w_chain) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..n {
        // score matrix under a random linear read-out
        let p = random_params(&mut r, vocab.clone(), 3);
        let (b, extra) = (r.gen_range(1..4), r.gen_range(0..3));
        let ctx = random_ids(&mut r, b, v);
        let cand = random_ids(&mut r, b + extra, v);
        let up = random_matrix(&mut r, b, b + extra, 1.0);
        let g = grad_score(&p, &ctx, &cand, &up).unwrap();
        let obj = |q: &BiEncoderParams| -> f64 {
            let s = score_matrix(q, &ctx, &cand).unwrap();
            s.data.iter().zip(&up.data).map(|(a, b)| a * b).sum()
        };
        w_score = w_score.max(check_params(&p, &g.buffers.each_ref(), &obj));

        // cross-entropy with extra columns
        let s = random_matrix(&mut r, b, b + extra, 3.0);
        let (_, gs) = inbatch_ce_loss_with_extra(&s).unwrap();
        w_ce = w_ce.max(check_matrix(&s, &gs, &|m| inbatch_ce_loss_with_extra(m).unwrap().0));

        // distillation at a random temperature
        let tch = random_matrix(&mut r, b, b + extra, 3.0);
        let tau = r.gen_range(0.5..2.0);
        let (_, gk) = distill_loss(&s, &tch, tau).unwrap();
        w_kl = w_kl.max(check_matrix(&s, &gk, &|m| distill_loss(m, &tch, tau).unwrap().0));

        // full training objective through the encoder
        let lambda = r.gen_range(0.0..2.0);
        let teacher = random_matrix(&mut r, b, b + extra, 2.0);
        let loss = |q: &BiEncoderParams| -> f64 {
            let s = score_matrix(q, &ctx, &cand).unwrap();
            inbatch_ce_loss_with_extra(&s).unwrap().0 + lambda * distill_loss(&s, &teacher, 1.0).unwrap().0
        };
        let s = score_matrix(&p, &ctx, &cand).unwrap();
        let mut upstream = inbatch_ce_loss_with_extra(&s).unwrap().1;
        let gk = distill_loss(&s, &teacher, 1.0).unwrap().1;
        upstream.data.iter_mut().zip(&gk.data).for_each(|(u, k)| *u += lambda * k);
        let g = grad_score(&p, &ctx, &cand, &upstream).unwrap();
        w_chain = w_chain.max(check_params(&p, &g.buffers.each_ref(), &loss));
    }
    let secs = t.elapsed().as_secs_f64();
    let worst = w_score.max(w_ce).max(w_kl).max(w_chain);
    outcome(
        "gradient-check",
        worst < GRAD_TOL && secs < 10.0,
        format!("{n} instances x 4 families, max rel err {worst:.2e} (score {w_score:.1e}, ce {w_ce:.1e}, kl {w_kl:.1e}, chained {w_chain:.1e}) < {GRAD_TOL:.0e}, {secs:.2}s < 10s"),
    )
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

fn brute_ce(s: &Matrix) -> f64 {
    let mut total = 0.0;
    for i in 0..s.rows {
        let z: f64 = s.row(i).iter().map(|x| x.exp()).sum();
        total += -(s.get(i, i).exp() / z).ln();
    }
    total / s.rows as f64
}

fn loss_oracles() -> Outcome {
    let mut r = rng(12);
    let mut ce_err: f64 = 0.0;
    for _ in 0..500 {
        let b = r.gen_range(1..6);
        let s = random_matrix(&mut r, b, b, 4.0);
        ce_err = ce_err.max((inbatch_ce_loss(&s).unwrap().0 - brute_ce(&s)).abs());
        let extra = r.gen_range(0..4);
        let s = random_matrix(&mut r, b, b + extra, 4.0);
        ce_err = ce_err.max((inbatch_ce_loss_with_extra(&s).unwrap().0 - brute_ce(&s)).abs());
    }
    let mut kl_ok = true;
    for _ in 0..500 {
        let b = r.gen_range(1..5);
        let c = b + r.gen_range(0..3);
        let s = random_matrix(&mut r, b, c, 3.0);
        // equal distributions, also after a per-row shift
        let mut shifted = s.clone();
        for i in 0..b {
            let k = r.gen_range(-5.0..5.0);
            shifted.row_mut(i).iter_mut().for_each(|x| *x += k);
        }
        let same = distill_loss(&s, &s, 1.0).unwrap().0;
        let shift = distill_loss(&s, &shifted, 1.0).unwrap().0;
        kl_ok &= same == 0.0 && shift.abs() < 1e-12;
        if c > 1 {
            let mut other = s.clone();
            other.set(0, 0, s.get(0, 0) + 1.0);
            kl_ok &= distill_loss(&s, &other, 1.0).unwrap().0 > 0.0;
        }
    }
    let uniform = inbatch_ce_loss(&Matrix::zeros(2, 2)).unwrap().0;
    let ln2_err = (uniform - std::f64::consts::LN_2).abs();
    outcome(
        "loss-oracles",
        ce_err < 1e-10 && kl_ok && ln2_err < 1e-15,
        format!("ce vs brute force max err {ce_err:.1e} < 1e-10; kl zero iff equal: {kl_ok}; uniform 2x2 ce - ln2 = {ln2_err:.1e}"),
    )
}

// ---------------------------------------------------------------------------
// training identities
// ---------------------------------------------------------------------------

fn small_linksets() -> (personalink::linkdata::LinkDataset, personalink::linkdata::LinkDataset, Arc<Vocab>) {
    let corpus = gen_synthetic_corpus(&SyntheticSpec { train_episodes: 40, dev_episodes: 4, test_episodes: 10, seed: 5, ..Default::default() }).unwrap();
    let pkb = build_pkb(&corpus.train).unwrap();
    let nli = StubNli::new(&corpus.lexicon);
    let ex = StubExpander::new(&corpus.lexicon);
    let seed = build_seed_linkset(&corpus.train, &pkb, &nli, MatchMode::OutDialogue, Side::AgentOnly, 1.0, 5).unwrap();
    let expanded = expand_linkset(&seed, &ex, &ExpansionPolicy::default()).unwrap();
    let texts: Vec<&str> = seed.examples.iter().chain(&expanded.examples).flat_map(|e| [e.context_text(), e.candidate_text()]).collect();
    let vocab = Arc::new(build_vocab(texts, 1));
    (seed, expanded, vocab)
}

fn zero_lambda_reduction() -> Outcome {
    let (seed, expanded, vocab) = small_linksets();
    let base = TrainConfig { learning_rate: 0.01, batch_size: 16, epochs: 2, dim: 16, seed: 3, ..TrainConfig::default() };
    let (teacher, _) = train_link_teacher(&seed, vocab, &base, None).unwrap();
    let cfg = TrainConfig { lambda: 0.0, trace_steps: true, epochs: 3, ..base };
    let (student, rs) = train_link_student(&expanded, &teacher, &cfg, None).unwrap();
    let (plain, rt) = train_link_teacher_from(teacher.clone(), &expanded, &cfg, None).unwrap();
    let same_steps = rs.step_digests == rt.step_digests;
    let bitwise = student.buffers().iter().zip(plain.buffers().iter()).all(|(a, b)| a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    outcome(
        "zero-lambda-reduction",
        same_steps && bitwise && !rs.step_digests.is_empty(),
        format!("{} optimizer steps, per-step digests equal: {same_steps}, final parameters bitwise equal: {bitwise}", rs.step_digests.len()),
    )
}

fn tv_distance(s: &Matrix, t: &Matrix) -> f64 {
    let soft = |row: &[f64]| {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect::<Vec<_>>()
    };
    (0..s.rows)
        .map(|i| 0.5 * soft(s.row(i)).iter().zip(soft(t.row(i))).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn distillation_pull() -> Outcome {
    let vocab = Arc::new(build_vocab(["a b c d e f g h i j k l"], 1));
    let v = vocab.len();
    let mut r = rng(13);
    let teacher = {
        let mut p = random_params(&mut r, vocab.clone(), 8);
        p.buffers_mut().iter_mut().for_each(|b| b.iter_mut().for_each(|x| *x *= 1.5));
        p
    };
    let student = BiEncoderParams::init(Role::Link, vocab, 8, 4).unwrap();
    let b = 8;
    let ctx = random_ids(&mut r, b, v);
    let cand = random_ids(&mut r, b, v);
    let data = TrainData { pairs: ctx.iter().cloned().zip(cand.iter().cloned()).collect(), negatives: vec![] };
    // fixed-step Adam overshoots and rings at larger rates
    let cfg = TrainConfig { lambda: 1e6, learning_rate: 0.005, batch_size: b, epochs: 200, dim: 8, ..TrainConfig::default() };
    let st = score_matrix(&teacher, &ctx, &cand).unwrap();
    let start = tv_distance(&score_matrix(&student, &ctx, &cand).unwrap(), &st);
    let mut first_below: Option<usize> = None;
    let mut step = 0usize;
    let mut last = start;
    let mut monitor = |p: &BiEncoderParams| -> personalink::Result<f64> {
        step += 1;
        last = tv_distance(&score_matrix(p, &ctx, &cand)?, &st);
        if last < 0.01 && first_below.is_none() {
            first_below = Some(step);
        }
        Ok(0.0)
    };
    fit(student, &data, Some(&teacher), &cfg, Some(&mut monitor)).unwrap();
    outcome(
        "distillation-pull",
        first_below.is_some_and(|s| s <= 200),
        format!("max row TV {start:.3} -> {last:.5}; below 0.01 at step {first_below:?} (limit 200), one fixed batch of {b}"),
    )
}

// ---------------------------------------------------------------------------
// metrics and lexical baselines
// ---------------------------------------------------------------------------

fn metric_oracles() -> Outcome {
    let mut r = rng(14);
    let mut instances = Vec::new();
    let mut ref_ranks = Vec::new();
    for _ in 0..1000 {
        let n = r.gen_range(1..25);
        let ids: Vec<String> = (0..n).map(|i| format!("p{i:02}")).collect();
        // coarse scores so ties occur
        let scores: Vec<f64> = (0..n).map(|_| r.gen_range(0..6) as f64 * 0.5).collect();
        let g = r.gen_range(0..n);
        // rank = 1 + entries strictly ahead (higher score, or equal score and smaller id)
        let ahead = (0..n).filter(|&j| scores[j] > scores[g] || (scores[j] == scores[g] && ids[j] < ids[g])).count();
        ref_ranks.push(ahead + 1);
        instances.push((ids[g].clone(), RankedList::from_scores(ids.clone(), scores)));
    }
    let mut ok = true;
    for k in [1, 5, 10, 20] {
        let brute = ref_ranks.iter().filter(|&&x| x <= k).count() as f64 / 1000.0;
        ok &= recall_at_k(&instances, k).unwrap() == brute;
    }
    let brute_mrr = ref_ranks.iter().map(|&x| 1.0 / x as f64).sum::<f64>() / 1000.0;
    ok &= mrr(&instances).unwrap() == brute_mrr;

    let counts: HashMap<String, usize> = (0..25).map(|i| (format!("p{i:02}"), r.gen_range(0..15))).collect();
    let buckets = Buckets::default();
    let inst: Vec<(String, usize)> = instances.iter().map(|(g, _)| g.clone()).zip(ref_ranks.iter().copied()).collect();
    let mut recomb_err: f64 = 0.0;
    for k in [1, 10] {
        let per = bucketed_recall(&inst, &counts, k, &buckets).unwrap();
        // reference bucket recall by direct filtering
        for (label, stat) in &per {
            let members: Vec<usize> = inst.iter().filter(|(id, _)| &buckets.label_of(counts[id]) == label).map(|(_, rk)| *rk).collect();
            ok &= stat.count == members.len();
            ok &= stat.recall == members.iter().filter(|&&x| x <= k).count() as f64 / members.len() as f64;
        }
        let total: usize = per.values().map(|s| s.count).sum();
        let recombined = per.values().map(|s| s.recall * s.count as f64).sum::<f64>() / total as f64;
        recomb_err = recomb_err.max((recombined - recall_from_ranks(&ref_ranks, k).unwrap()).abs());
    }
    outcome(
        "metric-oracles",
        ok && recomb_err <= 1e-12,
        format!("1000 random rankings with ties: recall@{{1,5,10,20}}, mrr and bucket recall exact: {ok}; recombination err {recomb_err:.1e} <= 1e-12"),
    )
}

fn bm25_and_jaccard() -> Outcome {
    let doc = "i walk my dog and my cat";
    let (k1, b) = (1.2, 0.75);
    let stats = Bm25Stats::build([doc]);
    let got = stats.scores(doc, k1, b)[0];
    // single document: idf = ln(1 + 0.5 / 1.5), |d| = avgdl; terms i walk my(x2) dog and cat
    let idf = (1.0f64 + 0.5 / 1.5).ln();
    let term = |f: f64| idf * f * (k1 + 1.0) / (f + k1);
    let hand = 5.0 * term(1.0) + term(2.0);
    let j = jaccard("a b c d e", "a b c f");
    let bm_err = (got - hand).abs();
    outcome(
        "bm25-jaccard-hand-cases",
        bm_err < 1e-9 && j == 0.5,
        format!("bm25 single doc {got:.12} vs hand {hand:.12} (err {bm_err:.1e} < 1e-9); jaccard 3/6 = {j}"),
    )
}

fn entailment_equivalence() -> Outcome {
    let corpus = gen_synthetic_corpus(&SyntheticSpec { train_episodes: 6, dev_episodes: 2, test_episodes: 4, seed: 9, ..Default::default() }).unwrap();
    let pkb = build_pkb(&corpus.train).unwrap();
    let nli = StubNli::new(&corpus.lexicon);
    let mut ok = true;
    let mut sizes = Vec::new();
    for mode in [MatchMode::InDialogue, MatchMode::OutDialogue] {
        let pairs: Vec<_> = enumerate_pairs(&corpus.train, &pkb, mode, Side::AgentOnly).collect();
        sizes.push(pairs.len());
        ok &= pairs.len() <= 500;
        let brute: BTreeSet<(String, String)> = pairs
            .iter()
            .filter(|p| nli_classify(&p.utterance.text, &p.persona.text, &nli).unwrap().class == NliClass::Entailment)
            .map(|p| (p.utterance.text.clone(), p.persona.id.clone()))
            .collect();
        let ls = build_seed_linkset(&corpus.train, &pkb, &nli, mode, Side::AgentOnly, 1.0, 0).unwrap();
        let got: BTreeSet<(String, String)> = ls.examples.iter().filter(|e| e.label == 1).map(|e| (e.utterance.clone(), e.persona_id.clone())).collect();
        ok &= got == brute && !brute.is_empty();
    }
    outcome("entailment-positives-equivalence", ok, format!("in/out-dialogue pair counts {sizes:?} (<= 500); positives equal the brute-force entailment set: {ok}"))
}

// ---------------------------------------------------------------------------
// directional claims on synthetic corpora
// ---------------------------------------------------------------------------

fn bias_direction() -> Outcome {
    let t = Instant::now();
    let mut rows = Vec::new();
    let mut all = true;
    for seed in SEEDS {
        let spec = SyntheticSpec { beta: 0.8, train_episodes: 300, seed, ..Default::default() };
        let corpus = gen_synthetic_corpus(&spec).unwrap();
        let pkb = build_pkb(&corpus.train).unwrap();
        let b = analyze_bias(&corpus.train, &pkb, &StubNli::new(&corpus.lexicon), Side::AgentOnly).unwrap();
        all &= b.out_dialogue.mean_jaccard < b.in_dialogue.mean_jaccard;
        rows.push(format!("{:.3}>{:.3}", b.in_dialogue.mean_jaccard, b.out_dialogue.mean_jaccard));
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        "out-dialogue-overlap-drop",
        all && secs < 120.0,
        format!("beta 0.8, 300 train episodes, in>out mean jaccard per seed [{}], {secs:.1}s < 120s", rows.join(" ")),
    )
}

struct SeedRun {
    reports: ReportSet,
    artifacts: std::collections::BTreeMap<String, String>,
}

fn run_seed(seed: u64, root: &Path) -> SeedRun {
    let corpus = gen_synthetic_corpus(&SyntheticSpec { seed, ..Default::default() }).unwrap();
    let mut cfg = write_synthetic(&corpus, &root.join(format!("seed{seed}"))).unwrap();
    cfg.set_seed(seed);
    let out = run_pipeline(&cfg).unwrap();
    SeedRun { reports: out.reports, artifacts: out.manifest.artifacts }
}

fn r1(r: &ReportSet, k: &str) -> f64 {
    r[k].r_at_1.unwrap()
}

fn count_wins(runs: &[SeedRun], f: impl Fn(&ReportSet) -> (f64, f64)) -> (usize, String) {
    let mut wins = 0;
    let mut rows = Vec::new();
    for run in runs {
        let (a, b) = f(&run.reports);
        if a > b {
            wins += 1;
        }
        rows.push(format!("{a:.3}/{b:.3}"));
    }
    (wins, rows.join(" "))
}

fn unseen_family_is_lexicon_only() -> bool {
    let corpus = gen_synthetic_corpus(&SyntheticSpec { beta: 0.0, train_episodes: 40, seed: 1, ..Default::default() }).unwrap();
    let ex = StubExpander::new(&corpus.lexicon);
    let attrs = |t: &str| -> HashSet<String> {
        expand(t, &Relation::PERSONAL, &ex as &dyn Expander, 8).unwrap().into_iter().flat_map(|e| e.attributes).collect()
    };
    let text_of: HashMap<&str, &str> = corpus.test.episodes.iter().flat_map(|e| e.personas.iter()).map(|p| (p.id.as_str(), p.text.as_str())).collect();
    corpus.gold_links.iter().all(|g| {
        let uw: HashSet<String> = content_words(&g.u).into_iter().collect();
        g.gold_p_ids.iter().all(|id| {
            let p = text_of[id.as_str()];
            content_words(p).iter().all(|w| !uw.contains(w)) && !attrs(&g.u).is_disjoint(&attrs(p))
        })
    })
}

fn pkb_constraint(root: &Path) -> Outcome {
    let mut violations = 0usize;
    let mut checked = 0usize;
    for seed in SEEDS {
        let dir = root.join(format!("seed{seed}"));
        let run = dir.join("run");
        let pkb = personalink::corpus::Pkb::load(&run.join("pkb.json")).unwrap();
        let aug = load_chat_dataset(&run.join("d_chat_augmented.jsonl"), Split::Train).unwrap();
        checked += aug.episodes.iter().map(|e| e.augmented_personas.len()).sum::<usize>();
        violations += pkb_violations(&aug.episodes, &pkb).len();

        // live sessions over the same run
        let lex = personalink::oracles::Lexicon::load(&dir.join("lexicon.json")).unwrap();
        let link = Arc::new(personalink::encoder::load_checkpoint(&run.join("student.ckpt"), Some(Role::Link)).unwrap());
        let chat = Arc::new(personalink::encoder::load_checkpoint(&run.join("chat_debiased.ckpt"), Some(Role::Chat)).unwrap());
        let index = Arc::new(PkbIndex::load(&run.join("pkb_index.json")).unwrap());
        let linker = Linker::new(link, index, Default::default(), Some((Arc::new(StubExpander::new(&lex)), ExpansionPolicy::default()))).unwrap();
        let test = load_chat_dataset(&dir.join("test.jsonl"), Split::Test).unwrap();
        let bank: Vec<String> = aug.agent_utterances().map(|(_, u)| u.text.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        let engine = Engine::new(chat, linker, bank, Some(&pkb), EngineSettings { context_tokens: 128, ..Default::default() }).unwrap();
        for ep in test.episodes.iter().take(20) {
            let req = CreateRequest { persona_texts: ep.personas.iter().map(|p| p.text.clone()).collect(), keep_fraction: 0.5, seed, ..Default::default() };
            let mut s = engine.create(ep.id.clone(), &req, chrono::DateTime::from_timestamp(0, 0).unwrap()).unwrap();
            for u in ep.utterances.iter().filter(|u| u.speaker == personalink::corpus::Speaker::User) {
                engine.post_user_turn(&mut s, &u.text).unwrap();
            }
            checked += s.profile.iter().filter(|p| p.kind == personalink::service::EntryKind::Augmented).count();
            violations += Engine::violations(&s, &pkb).len();
        }
    }
    outcome(
        "augmentations-inside-train-pkb",
        violations == 0 && checked > 0,
        format!("{checked} augmented entries over 5 pipeline runs and 100 live sessions, {violations} outside the training PKB"),
    )
}

fn main() {
    let started = Instant::now();
    let mut results = vec![
        gradient_check(),
        loss_oracles(),
        zero_lambda_reduction(),
        distillation_pull(),
        metric_oracles(),
        bm25_and_jaccard(),
        entailment_equivalence(),
        bias_direction(),
    ];

    let tmp = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| run_seed(s, tmp.path())).collect();
    let pipeline_secs = t.elapsed().as_secs_f64();

    let (w, rows) = count_wins(&runs, |r| (r1(r, "chat_debiased"), r1(r, "chat_raw")));
    results.push(outcome(
        "debiased-chat-beats-raw",
        w >= 4 && pipeline_secs < 600.0,
        format!("R@1/20 debiased/raw per seed [{rows}], wins {w}/5 (need 4), 5 full runs in {pipeline_secs:.0}s < 600s"),
    ));
    let (w, rows) = count_wins(&runs, |r| (r1(r, "blackbox_keep000_on"), r1(r, "blackbox_keep000_off")));
    results.push(outcome("linking-helps-without-personas", w >= 4, format!("no-persona R@1/20 linked/unlinked per seed [{rows}], wins {w}/5 (need 4)")));
    let lexicon_only = unseen_family_is_lexicon_only();
    let (w, rows) = count_wins(&runs, |r| (r["link_student"].buckets["0"], r["link_teacher"].buckets["0"]));
    results.push(outcome(
        "student-beats-teacher-on-unseen",
        w >= 4 && lexicon_only,
        format!("unseen-persona R@10 student/teacher per seed [{rows}], wins {w}/5 (need 4); copy-free positives lexicon-only: {lexicon_only}"),
    ));
    results.push(pkb_constraint(tmp.path()));

    let again = run_seed(0, &tmp.path().join("again"));
    let same = again.artifacts == runs[0].artifacts;
    results.push(outcome("pipeline-determinism", same, format!("{} artifacts, digests identical across two runs: {same}", again.artifacts.len())));

    let mut failed = 0;
    for r in &results {
        println!("{} {}: {}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.detail);
        failed += usize::from(!r.pass);
    }
    println!("acceptance: {}/{} passed in {:.0?}", results.len() - failed, results.len(), Duration::from_secs(started.elapsed().as_secs()));
    if failed > 0 {
        std::process::exit(1);
    }
}
