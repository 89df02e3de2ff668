use emin::backbone::{
    decode_teacher_forced, encode, gradient_check, Branch, EncodedInstance, EvidenceWeights,
    ModelConfig, Parameters, TrainExample,
};

fn tiny(d: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 14,
        d_model: d,
        num_layers: 1,
        num_heads: heads,
        ff_dim: 2 * d,
        max_input_len: 8,
        max_evidence_len: 8,
        max_output_len: 6,
        dropout: 0.0,
    }
}

fn example() -> TrainExample {
    TrainExample {
        qa: vec![4, 5, 6],
        evidence: vec![vec![7, 8, 9, 5], vec![10, 11, 4]],
        target: vec![8, 9, 12],
    }
}

/// Scale weights up so gradients are well above rounding noise.
fn spread(params: &mut Parameters, factor: f64) {
    for v in params.as_mut_slice() {
        *v *= factor;
    }
}

#[test]
fn gradients_match_central_differences_for_every_group() {
    let mut params = Parameters::init(&tiny(8, 2), 11).unwrap();
    spread(&mut params, 10.0);
    let ex = example();
    let z = EvidenceWeights::new(vec![0.3, 0.7]).unwrap();
    let report = gradient_check(&params, &[(&ex, &z)], 1e-4, 1).unwrap();
    for (group, err) in &report.per_group {
        assert!(*err < 1e-4, "{group}: {err}");
    }
    assert_eq!(report.checked, params.len());
}

#[test]
fn one_hot_weight_equals_single_paragraph() {
    let params = Parameters::init(&tiny(8, 2), 3).unwrap();
    let ex = example();
    let enc = EncodedInstance::new(&params, &ex).unwrap();
    let both = decode_teacher_forced(&params, &enc.qa, &enc.evidence, &EvidenceWeights::one_hot(2, 1), &ex.target).unwrap();
    let single = decode_teacher_forced(
        &params,
        &enc.qa,
        &enc.evidence[1..],
        &EvidenceWeights::one_hot(1, 0),
        &ex.target,
    )
    .unwrap();
    assert_eq!(both.distributions, single.distributions);
}

#[test]
fn duplicate_paragraphs_collapse() {
    let params = Parameters::init(&tiny(8, 2), 3).unwrap();
    let ex = example();
    let enc = EncodedInstance::new(&params, &ex).unwrap();
    let dup = vec![enc.evidence[0].clone(), enc.evidence[0].clone()];
    let a = decode_teacher_forced(&params, &enc.qa, &dup, &EvidenceWeights::new(vec![0.3, 0.7]).unwrap(), &ex.target).unwrap();
    let b = decode_teacher_forced(&params, &enc.qa, &dup[..1], &EvidenceWeights::uniform(1), &ex.target).unwrap();
    for (x, y) in a.distributions.iter().zip(&b.distributions) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn permuting_evidence_with_weights_is_equivariant() {
    let params = Parameters::init(&tiny(8, 2), 5).unwrap();
    let ex = example();
    let enc = EncodedInstance::new(&params, &ex).unwrap();
    let a = decode_teacher_forced(&params, &enc.qa, &enc.evidence, &EvidenceWeights::new(vec![0.2, 0.8]).unwrap(), &ex.target).unwrap();
    let swapped = vec![enc.evidence[1].clone(), enc.evidence[0].clone()];
    let b = decode_teacher_forced(&params, &enc.qa, &swapped, &EvidenceWeights::new(vec![0.8, 0.2]).unwrap(), &ex.target).unwrap();
    for (x, y) in a.distributions.iter().zip(&b.distributions) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn decoder_is_causal() {
    let params = Parameters::init(&tiny(8, 2), 5).unwrap();
    let ex = example();
    let enc = EncodedInstance::new(&params, &ex).unwrap();
    let z = EvidenceWeights::uniform(2);
    let a = decode_teacher_forced(&params, &enc.qa, &enc.evidence, &z, &[8, 9, 12]).unwrap();
    let b = decode_teacher_forced(&params, &enc.qa, &enc.evidence, &z, &[8, 13, 12]).unwrap();
    // target position 1 feeds decoder input 2, so rows 0 and 1 are untouched
    assert_eq!(a.distribution(0), b.distribution(0));
    assert_eq!(a.distribution(1), b.distribution(1));
    assert_ne!(a.distribution(2), b.distribution(2));
}

#[test]
fn permuting_tokens_without_positions_permutes_outputs() {
    let mut params = Parameters::init(&tiny(8, 2), 5).unwrap();
    let g = params.group("evidence_positions").unwrap().clone();
    params.as_mut_slice()[g.offset..g.offset + g.len].fill(0.0);
    let a = encode(&params, &[4, 9], Branch::Evidence).unwrap();
    let b = encode(&params, &[9, 4], Branch::Evidence).unwrap();
    assert_eq!(&a.layers[0][..8], &b.layers[0][8..]);
    assert_eq!(&a.layers[0][8..], &b.layers[0][..8]);
}

// Straight-line reference implementation, written with plain loops and
// reading weights by group name.
fn w<'a>(p: &'a Parameters, name: &str) -> &'a [f64] {
    let g = p.group(name).unwrap_or_else(|| panic!("{name}"));
    &p.as_slice()[g.offset..g.offset + g.len]
}

fn affine(x: &[f64], wt: &[f64], b: &[f64]) -> Vec<f64> {
    let d_out = b.len();
    (0..d_out)
        .map(|o| b[o] + x.iter().enumerate().map(|(i, xi)| xi * wt[i * d_out + o]).sum::<f64>())
        .collect()
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| g[i] * (v - mean) / (var + 1e-5).sqrt() + b[i])
        .collect()
}

#[test]
fn tiny_encoder_matches_hand_computation() {
    let cfg = ModelConfig { ff_dim: 6, ..tiny(4, 1) };
    let mut params = Parameters::init(&cfg, 21).unwrap();
    // make biases and gains non-trivial so they are exercised
    let mut k = 0.0;
    for g in params.layout.groups.clone() {
        if g.name.ends_with("bias") || g.name.ends_with("gain") {
            for v in &mut params.as_mut_slice()[g.offset..g.offset + g.len] {
                k += 1.0;
                *v += 0.01 * (k % 7.0 - 3.0);
            }
        }
    }
    spread(&mut params, 20.0);
    let ids = [5u32, 9];
    let p = &params;
    let x: Vec<Vec<f64>> = ids
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let e = &w(p, "token_embedding")[t as usize * 4..t as usize * 4 + 4];
            let q = &w(p, "qa_positions")[i * 4..i * 4 + 4];
            e.iter().zip(q).map(|(a, b)| a + b).collect()
        })
        .collect();
    let pre = "qa_encoder.0.";
    let lin = |x: &[f64], n: &str| affine(x, w(p, &format!("{pre}{n}.weight")), w(p, &format!("{pre}{n}.bias")));
    let q: Vec<_> = x.iter().map(|r| lin(r, "self_attn.q")).collect();
    let kk: Vec<_> = x.iter().map(|r| lin(r, "self_attn.k")).collect();
    let v: Vec<_> = x.iter().map(|r| lin(r, "self_attn.v")).collect();
    let mut out = Vec::new();
    for i in 0..2 {
        let s: Vec<f64> = (0..2)
            .map(|j| (0..4).map(|c| q[i][c] * kk[j][c]).sum::<f64>() / 2.0)
            .collect();
        let e0 = (s[0] - s[0].max(s[1])).exp();
        let e1 = (s[1] - s[0].max(s[1])).exp();
        let (a0, a1) = (e0 / (e0 + e1), e1 / (e0 + e1));
        let ctx: Vec<f64> = (0..4).map(|c| a0 * v[0][c] + a1 * v[1][c]).collect();
        let sa = lin(&ctx, "self_attn.o");
        let r1: Vec<f64> = x[i].iter().zip(&sa).map(|(a, b)| a + b).collect();
        let h = layer_norm(&r1, w(p, &format!("{pre}norm1.gain")), w(p, &format!("{pre}norm1.bias")));
        let up: Vec<f64> = lin(&h, "ff.up").into_iter().map(|u| u.max(0.0)).collect();
        let f = lin(&up, "ff.down");
        let r2: Vec<f64> = h.iter().zip(&f).map(|(a, b)| a + b).collect();
        out.extend(layer_norm(&r2, w(p, &format!("{pre}norm2.gain")), w(p, &format!("{pre}norm2.bias"))));
    }
    let got = encode(&params, &ids, Branch::QuestionAnswer).unwrap();
    for (a, b) in got.layers[0].iter().zip(&out) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn fused_feature_is_convex_combination_of_single_features() {
    use emin::backbone::nn::fused_cross_attention;
    let params = Parameters::init(&tiny(4, 1), 8).unwrap();
    let p = params.as_slice();
    let a = params.layout.decoder[0].evidence_attn;
    let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
    let m1: Vec<f64> = (0..8).map(|i| (i as f64 * 0.11).cos()).collect();
    let m2: Vec<f64> = (0..12).map(|i| (i as f64 * 0.53).sin() * 2.0).collect();
    let kv1 = a.project_kv(p, &m1, 2);
    let kv2 = a.project_kv(p, &m2, 3);
    let (fused, _) = fused_cross_attention(&a, p, &x, 3, &[&kv1, &kv2], &[0.5, 0.5], 1, 0.0, None);
    let (one, _) = fused_cross_attention(&a, p, &x, 3, &[&kv1], &[1.0], 1, 0.0, None);
    let (two, _) = fused_cross_attention(&a, p, &x, 3, &[&kv2], &[1.0], 1, 0.0, None);
    for i in 0..fused.len() {
        assert!((fused[i] - 0.5 * (one[i] + two[i])).abs() < 1e-12);
    }
}

#[test]
fn adam_first_step_matches_hand_trace() {
    use emin::backbone::optim::{optimizer_step, AdamState, AdamWConfig};
    let mut params = Parameters::zeros(&tiny(4, 1)).unwrap();
    let n = params.len();
    let grads = vec![1.0; n];
    let mut st = AdamState::new(n);
    let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
    optimizer_step(&mut params, &grads, &mut st, &cfg, 0.1).unwrap();
    // m = 0.1, v = 0.001; bias-corrected both give 1, so the step is
    // -0.1 * 1 / (1 + 1e-8)
    let expect = -0.1 / (1.0 + 1e-8);
    assert!(params.as_slice().iter().all(|&v| (v - expect).abs() < 1e-15));

    let before = params.clone();
    optimizer_step(&mut params, &vec![0.0; n], &mut AdamState::new(n), &cfg, 0.1).unwrap();
    assert_eq!(params, before);
}
