#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// All n-grams of `s` in order, duplicates kept.
pub fn grams(s: &[u8], n: usize) -> Vec<&[u8]> {
    if s.len() < n {
        return Vec::new();
    }
    (0..=s.len() - n).map(|i| &s[i..i + n]).collect()
}

/// Clipped matches by pairing each candidate n-gram with an unused
/// reference occurrence.
pub fn brute_matches(c: &[u8], r: &[u8], n: usize) -> usize {
    let mut used = vec![false; grams(r, n).len()];
    let rg = grams(r, n);
    let mut matched = 0;
    for g in grams(c, n) {
        if let Some(i) = (0..rg.len()).find(|&i| !used[i] && rg[i] == g) {
            used[i] = true;
            matched += 1;
        }
    }
    matched
}

/// Longest common subsequence by trying every subsequence of `a`.
pub fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
    fn is_subsequence(x: &[u8], y: &[u8]) -> bool {
        let mut it = y.iter();
        x.iter().all(|t| it.any(|u| u == t))
    }
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<u8> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
        if sub.len() > best && is_subsequence(&sub, b) {
            best = sub.len();
        }
    }
    best
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn brute_bleu(cands: &[Vec<u8>], refs: &[Vec<u8>], smoothing: bool) -> f64 {
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let matched: usize = cands.iter().zip(refs).map(|(c, r)| brute_matches(c, r, n)).sum();
        let total: usize = cands.iter().map(|c| grams(c, n).len()).sum();
        if total == 0 {
            return 0.0;
        }
        let p = match (matched, smoothing) {
            (0, true) => 0.5 / total as f64,
            (0, false) => return 0.0,
            _ => matched as f64 / total as f64,
        };
        log_sum += p.ln();
    }
    let c: usize = cands.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    bp * (log_sum / 4.0).exp()
}

pub fn random_seq(rng: &mut ChaCha8Rng) -> Vec<u8> {
    let len = rng.random_range(0..=11);
    let alphabet = rng.random_range(2..=6);
    (0..len).map(|_| rng.random_range(0..alphabet)).collect()
}

