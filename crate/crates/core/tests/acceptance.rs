//! One pass/fail line per acceptance criterion. Runs as a plain binary so
//! the lines are always printed; exits non-zero if any criterion fails.

use std::time::{Duration, Instant};

use emin::backbone::{gradient_check, EvidenceWeights, ModelConfig, Parameters, TrainExample};
use emin::corpus::{build_vocabulary, generate_synthetic, QaeInstance, SynthConfig, Vocabulary};
use emin::costmodel::{bench_wallclock, count_attention_ops, time_ratios, BenchConfig, CostInputs, Mode};
use emin::em::{self, e_step_infer, e_step_train, temperature, EMConfig, EMReport, EvidenceScorer, Strategy, Termination};
use emin::metrics::{bleu4, lcs_len, rouge_l, rouge_n, MetricReport};
use emin::retrieval::{dice_similarity, preprocess, select_evidence, EvidenceSelector, Stopwords};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;

struct Line {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(lines: &mut Vec<Line>, id: usize, name: &'static str, pass: bool, detail: String) {
    println!("criterion {id} {name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    lines.push(Line { id, name, pass, detail });
}

fn gradient_oracle() -> (bool, String) {
    let config = ModelConfig {
        vocab_size: 14,
        d_model: 8,
        num_layers: 1,
        num_heads: 2,
        ff_dim: 16,
        max_input_len: 8,
        max_evidence_len: 8,
        max_output_len: 6,
        dropout: 0.0,
    };
    let mut params = Parameters::init(&config, 11).unwrap();
    params.as_mut_slice().iter_mut().for_each(|v| *v *= 10.0);
    let ex = TrainExample {
        qa: vec![4, 5, 6],
        evidence: vec![vec![7, 8, 9, 5], vec![10, 11, 4]],
        target: vec![8, 9, 12],
    };
    let z = EvidenceWeights::new(vec![0.3, 0.7]).unwrap();
    let start = Instant::now();
    let r = gradient_check(&params, &[(&ex, &z)], 1e-4, 1).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = r.max_relative_error < 1e-4 && r.checked == params.len() && secs < 60.0;
    (
        pass,
        format!("max rel err {:.2e} over {} coords in {secs:.1}s", r.max_relative_error, r.checked),
    )
}

struct Rigged {
    planted: usize,
}

impl EvidenceScorer for Rigged {
    fn single_evidence_probs(&self, ex: &TrainExample, reference: &[u32]) -> emin::Result<Vec<Vec<f64>>> {
        Ok((0..ex.evidence.len())
            .map(|j| vec![if j == self.planted { 1.0 } else { 1.0 / 30.0 }; reference.len()])
            .collect())
    }
}

fn e_step_oracle() -> (bool, String) {
    let mut hits = 0;
    for i in 0..100 {
        let k = 2 + i % 9;
        let planted = (i * 7 + 3) % k;
        let ex = TrainExample {
            qa: vec![4, 5],
            evidence: (0..k).map(|j| vec![6 + j as u32]).collect(),
            target: (0..3 + i % 5).map(|m| 4 + m as u32).collect(),
        };
        let (z, _) = e_step_train(&Rigged { planted }, &ex, 1.0, 1e-6).unwrap();
        hits += (z.argmax() == planted) as usize;
    }
    // an imperfect but still favoured planted paragraph, sharpened by λ
    let soft = Rigged2;
    let ex = TrainExample {
        qa: vec![4],
        evidence: vec![vec![5]; 4],
        target: vec![6; 5],
    };
    let (z, _) = e_step_train(&soft, &ex, temperature(1500), 1e-6).unwrap();
    let pass = hits == 100 && z.max() > 1.0 - 1e-3;
    (pass, format!("{hits}/100 argmax on planted; max z {:.6} at λ={:.2e}", z.max(), temperature(1500)))
}

struct Rigged2;

impl EvidenceScorer for Rigged2 {
    fn single_evidence_probs(&self, ex: &TrainExample, reference: &[u32]) -> emin::Result<Vec<Vec<f64>>> {
        Ok((0..ex.evidence.len())
            .map(|j| vec![if j == 1 { 0.8 } else { 0.125 }; reference.len()])
            .collect())
    }
}

struct Corpus {
    vocab: Vocabulary,
    train: Vec<TrainExample>,
    test: Vec<(QaeInstance, TrainExample)>,
    model: ModelConfig,
}

fn corpus() -> Corpus {
    let synth = generate_synthetic(&SynthConfig::default()).unwrap();
    let vocab = build_vocabulary(&synth.train, &synth.documents, 1).unwrap();
    let train: Vec<TrainExample> = synth.train.iter().map(|i| TrainExample::from_instance(i, &vocab)).collect();
    let test = synth
        .test
        .iter()
        .map(|i| (i.clone(), TrainExample::from_instance(i, &vocab)))
        .collect();
    let mut model = ModelConfig::desk(vocab.len());
    model.fit_lengths(&train);
    Corpus {
        vocab,
        train,
        test,
        model,
    }
}

struct Outcome {
    report: EMReport,
    params: Parameters,
    recovered: usize,
    rouge1: f64,
    elapsed: Duration,
}

fn run(c: &Corpus, strategy: Strategy, seed: u64) -> Outcome {
    let start = Instant::now();
    let config = EMConfig {
        strategy,
        ..EMConfig::default()
    };
    let (trainer, report) = em::train(&c.train, &c.model, &config, seed).unwrap();
    let mut recovered = 0;
    let mut items = Vec::new();
    for (inst, ex) in &c.test {
        let r = em::infer_with_strategy(&trainer.params, ex, &config).unwrap();
        recovered += (Some(r.z.argmax()) == inst.planted_index) as usize;
        items.push((inst.id.clone(), c.vocab.decode(r.generation.content()), inst.explanation.clone()));
    }
    let rouge1 = MetricReport::compute(&items, true).unwrap().rouge1.mean;
    let out = Outcome {
        report,
        params: trainer.params,
        recovered,
        rouge1,
        elapsed: start.elapsed(),
    };
    println!(
        "  {strategy} seed {seed}: {} iterations ({:?}), planted argmax {}/100, R1 {:.4}, {:.0}s",
        out.report.iterations(),
        out.report.termination,
        out.recovered,
        out.rouge1,
        out.elapsed.as_secs_f64()
    );
    out
}

fn median3(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Two-paragraph check of the inference E-step: the paragraph holding the
/// generation's content words should outweigh unrelated text.
fn content_words_check(c: &Corpus, params: &Parameters) -> (usize, usize) {
    let config = EMConfig::default();
    let mut favoured = 0;
    let n = 20;
    for (inst, ex) in c.test.iter().take(n) {
        let planted = ex.evidence[inst.planted_index.unwrap()].clone();
        let unrelated: Vec<u32> = planted.iter().map(|&t| 4 + (t * 7 + 3) % 40).collect();
        let two = TrainExample {
            qa: ex.qa.clone(),
            evidence: vec![planted, unrelated],
            target: vec![],
        };
        let prev = em::generate_with(params, &two, &EvidenceWeights::uniform(2), &config).unwrap();
        let (z, _) = e_step_infer(params, &two, &prev, 1.0, config.ce_floor, false).unwrap();
        favoured += (z.as_slice()[0] > z.as_slice()[1]) as usize;
    }
    (favoured, n)
}

fn degeneracy() -> (bool, String) {
    let config = ModelConfig {
        vocab_size: 16,
        d_model: 8,
        num_layers: 1,
        num_heads: 2,
        ff_dim: 16,
        max_input_len: 8,
        max_evidence_len: 8,
        max_output_len: 8,
        dropout: 0.1,
    };
    let data: Vec<TrainExample> = (0..12u32)
        .map(|i| TrainExample {
            qa: vec![4 + i % 3, 7 + i % 4],
            evidence: vec![vec![4 + i % 3, 11 + i % 5], vec![5 + i % 7, 6]],
            target: vec![11 + i % 5, 4 + i % 3],
        })
        .collect();
    let base = EMConfig {
        k: 2,
        t_max: 5,
        min_iterations: 0,
        batch_size: 4,
        max_generation_len: 6,
        ..EMConfig::default()
    };
    let mean = EMConfig {
        strategy: Strategy::Mean,
        ..base.clone()
    };
    let emin = EMConfig {
        strategy: Strategy::Emin,
        warmup_iterations: base.t_max,
        ..base.clone()
    };
    let (a, ra) = em::train(&data, &config, &mean, 5).unwrap();
    let (b, rb) = em::train(&data, &config, &emin, 5).unwrap();
    let same_params = a.params == b.params;
    let same_outputs = data.iter().all(|ex| {
        em::infer_with_strategy(&a.params, ex, &mean).unwrap().generation
            == em::infer_with_strategy(&b.params, ex, &mean).unwrap().generation
    });
    let same_trace = ra.records.iter().zip(&rb.records).all(|(x, y)| x.loss == y.loss && x.z == y.z);

    let single = TrainExample {
        qa: vec![4, 5],
        evidence: vec![vec![6, 7, 8]],
        target: vec![],
    };
    let r = em::infer(&a.params, &single, &EMConfig { k: 1, ..base }).unwrap();
    let k1 = r.iterations() == 1 && r.z.as_slice() == [1.0];
    (
        same_params && same_outputs && same_trace && k1,
        format!(
            "params identical {same_params}, generations identical {same_outputs}, k=1 iterations {} z {:?}",
            r.iterations(),
            r.z.as_slice()
        ),
    )
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn metric_oracles() -> (bool, String) {
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    let r = rouge_n(&toks("the cat"), &toks("the cat sat"), 1);
    let mut hand = r.precision == 1.0 && (r.recall - 2.0 / 3.0).abs() < 1e-15 && close(r.f1, 0.8);
    hand &= rouge_n(&toks("a b c"), &toks("a b c"), 1).f1 == 1.0;
    hand &= rouge_n(&toks("a b"), &toks("c d"), 1).f1 == 0.0;
    let l = rouge_l(&toks("a b c d"), &toks("a c b d"));
    hand &= lcs_len(&toks("a b c d"), &toks("a c b d")) == 3 && (l.precision, l.recall, l.f1) == (0.75, 0.75, 0.75);
    hand &= rouge_l(&toks("a b"), &toks("a b")).f1 == 1.0 && rouge_l(&toks("a b"), &[]).f1 == 0.0;
    let same = vec![toks("x y z w v")];
    hand &= bleu4(&same, &same, false).unwrap() == 1.0;
    hand &= bleu4(&[toks("the the the the")], &[toks("the cat")], false).unwrap() == 0.0;
    let bp = bleu4(&[toks("a b c d")], &[toks("a b c d e")], true).unwrap();
    hand &= close(bp, (1.0f64 - 5.0 / 4.0).exp());

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut agree = 0;
    let (mut cands, mut refs) = (Vec::new(), Vec::new());
    for _ in 0..100 {
        let (c, r) = (common::random_seq(&mut rng), common::random_seq(&mut rng));
        let mut ok = lcs_len(&c, &r) == common::brute_lcs(&c, &r);
        for n in 1..=4 {
            let got = rouge_n(&c, &r, n);
            let cn = common::grams(&c, n).len();
            let m = common::brute_matches(&c, &r, n);
            ok &= cn == 0 || got.precision == m as f64 / cn as f64;
        }
        agree += ok as usize;
        cands.push(c);
        refs.push(r);
    }
    let corpus = (bleu4(&cands, &refs, true).unwrap() - common::brute_bleu(&cands, &refs, true)).abs() < 1e-12;
    (
        hand && agree == 100 && corpus,
        format!("hand examples exact {hand}; {agree}/100 random fixtures agree; corpus BLEU agrees {corpus}"),
    )
}

fn retrieval_oracle() -> (bool, String) {
    let none = Stopwords::none();
    let d = |a: &str, b: &str| dice_similarity(&preprocess(a, &none), &preprocess(b, &none));
    let hand = d("a b c", "b c d") == 4.0 / 6.0 && d("a b", "a b") == 1.0 && d("a b", "c d") == 0.0;
    let synth = generate_synthetic(&SynthConfig::default()).unwrap();
    let exact = &synth.documents.documents[0].paragraphs[0];
    let top = select_evidence(exact, &synth.documents, 1, 5, &none).unwrap();
    let hand = hand && top.paragraphs[0].score == 1.0 && &top.paragraphs[0].text == exact;

    let selector = EvidenceSelector::new(&synth.documents, Stopwords::english());
    let k = SynthConfig::default().paragraphs_per_instance;
    let mut hits = 0;
    let sample: Vec<&QaeInstance> = synth.train.iter().take(200).collect();
    for inst in &sample {
        let entity = inst.question.last().unwrap();
        // locate the planted paragraph without trusting planted_index
        let planted = inst.evidence.iter().find(|p| p.contains(entity)).unwrap().join(" ");
        let query = format!("{} {entity}", inst.answer.join(" "));
        let ranked = selector.select(&query, k).unwrap();
        hits += ranked.paragraphs.iter().any(|p| p.text == planted) as usize;
    }
    (
        hand && hits * 100 >= 95 * sample.len(),
        format!("DICE hand examples exact {hand}; planted in top-{k} for {hits}/{}", sample.len()),
    )
}

fn cost_oracle() -> (bool, String) {
    let mut exact = true;
    for m in 1..=6u64 {
        for n in [4u64, 16, 64] {
            let i = CostInputs {
                m,
                n,
                lx: 8,
                ld: 16,
                layers: 2,
                iterations: 3,
                passes_per_iteration: None,
            };
            let concat = count_attention_ops(i, Mode::Concatenated).unwrap();
            let sep = count_attention_ops(i, Mode::Separated).unwrap();
            let t = i.lx + m * n;
            exact &= concat.encoder == t * t * 2 && concat.decoder == 16 * t * 2;
            exact &= sep.encoder == (64 + m * n * n) * 2;
            exact &= sep.decoder == (16 * 8 + m * 16 * n) * 2 * 3 * (m + 1);
        }
    }
    let i = CostInputs {
        m: 4,
        n: 32,
        lx: 8,
        ld: 16,
        layers: 1,
        iterations: 1,
        passes_per_iteration: Some(1),
    };
    exact &= count_attention_ops(i, Mode::Concatenated).unwrap().encoder == 18496;
    exact &= count_attention_ops(i, Mode::Separated).unwrap().encoder == 4160;

    let grid: Vec<(usize, usize)> = [2, 4, 8, 16].iter().map(|&m| (m, 64)).collect();
    let rows = bench_wallclock(&BenchConfig::default(), &grid, 3).unwrap();
    let ratios: Vec<f64> = time_ratios(&rows).into_iter().map(|(_, _, r)| r).collect();
    let monotone = ratios.windows(2).all(|w| w[1] >= w[0]);
    let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.2}")).collect();
    (
        exact && monotone,
        format!("analytic counts exact {exact}; measured ratios over m=2,4,8,16: [{}]", shown.join(", ")),
    )
}

fn main() {
    let mut lines = Vec::new();

    let (pass, detail) = gradient_oracle();
    report(&mut lines, 1, "gradient oracle", pass, detail);

    let (pass, detail) = e_step_oracle();
    report(&mut lines, 2, "E-step recovery oracle", pass, detail);

    let c = corpus();
    println!(
        "  corpus: {} train, {} test, vocabulary {}, lengths {}/{}/{}",
        c.train.len(),
        c.test.len(),
        c.vocab.len(),
        c.model.max_input_len,
        c.model.max_evidence_len,
        c.model.max_output_len
    );
    let seeds = [7u64, 8, 9];
    let r1 = |s: Strategy| -> (Vec<Outcome>, f64) {
        let runs: Vec<Outcome> = seeds.iter().map(|&seed| run(&c, s, seed)).collect();
        let med = median3(runs.iter().map(|o| o.rouge1).collect());
        (runs, med)
    };
    let (emin_runs, emin_r1) = r1(Strategy::Emin);
    let seed7 = &emin_runs[0];
    let (favoured, n) = content_words_check(&c, &seed7.params);
    println!("  inference E-step favours the paragraph holding the generated content in {favoured}/{n} two-paragraph cases");
    let minutes = seed7.elapsed.as_secs_f64() / 60.0;
    report(
        &mut lines,
        3,
        "planted-evidence recovery",
        seed7.recovered >= 80 && minutes <= 30.0,
        format!("{}/100 held-out argmax on planted, {minutes:.1} min", seed7.recovered),
    );

    let (_, mean_r1) = r1(Strategy::Mean);
    let (_, simi_r1) = r1(Strategy::Simi);
    let gap = 100.0 * (emin_r1 - mean_r1);
    report(
        &mut lines,
        4,
        "directional ordering",
        emin_r1 > mean_r1 && emin_r1 > simi_r1 && gap >= 2.0,
        format!("median R1 EMIN {emin_r1:.4}, MEAN {mean_r1:.4}, SIMI {simi_r1:.4}; EMIN - MEAN = {gap:.2} points"),
    );

    let rep = &seed7.report;
    let lambda_exact = rep
        .records
        .iter()
        .all(|r| r.lambda == (-0.01 * r.iteration as f64).exp());
    let converged = rep.termination == Termination::Converged && rep.iterations() < EMConfig::default().t_max;
    report(
        &mut lines,
        5,
        "convergence",
        converged && lambda_exact,
        format!(
            "{:?} after {} iterations, final mean KL {:.2e}; λ trace exact {lambda_exact}",
            rep.termination,
            rep.iterations(),
            rep.final_mean_kl().unwrap_or(f64::NAN)
        ),
    );

    let (pass, detail) = degeneracy();
    report(&mut lines, 6, "baseline degeneracy", pass, detail);

    let (pass, detail) = metric_oracles();
    report(&mut lines, 7, "metric oracles", pass, detail);

    let (pass, detail) = retrieval_oracle();
    report(&mut lines, 8, "retrieval oracle", pass, detail);

    let (pass, detail) = cost_oracle();
    report(&mut lines, 9, "cost model", pass, detail);

    let failed: Vec<&Line> = lines.iter().filter(|l| !l.pass).collect();
    println!("{}/{} criteria pass", lines.len() - failed.len(), lines.len());
    for l in &failed {
        eprintln!("failed: criterion {} {} ({})", l.id, l.name, l.detail);
    }
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
