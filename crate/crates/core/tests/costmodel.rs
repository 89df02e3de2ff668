use emin::costmodel::{count_attention_ops, median, rows_to_csv, time_ratios, BenchRow, CostInputs, Mode};

/// Query-key pairs counted one attention call at a time.
fn pairs(queries: u64, keys: u64) -> u64 {
    let mut n = 0;
    for _ in 0..queries {
        for _ in 0..keys {
            n += 1;
        }
    }
    n
}

fn oracle(i: CostInputs, mode: Mode) -> (u64, u64) {
    let (mut enc, mut dec) = (0, 0);
    for _ in 0..i.layers {
        match mode {
            Mode::Concatenated => {
                let total = i.lx + i.m * i.n;
                enc += pairs(total, total);
                dec += pairs(i.ld, total);
            }
            Mode::Separated => {
                enc += pairs(i.lx, i.lx);
                for _ in 0..i.m {
                    enc += pairs(i.n, i.n);
                }
                for _ in 0..i.iterations * i.passes() {
                    dec += pairs(i.ld, i.lx);
                    for _ in 0..i.m {
                        dec += pairs(i.ld, i.n);
                    }
                }
            }
        }
    }
    (enc, dec)
}

#[test]
fn counts_match_per_call_enumeration() {
    for m in [1, 2, 4, 8] {
        for n in [3, 8, 16] {
            for passes in [None, Some(1), Some(3)] {
                let inputs = CostInputs {
                    m,
                    n,
                    lx: 5,
                    ld: 7,
                    layers: 2,
                    iterations: 3,
                    passes_per_iteration: passes,
                };
                for mode in [Mode::Concatenated, Mode::Separated] {
                    let got = count_attention_ops(inputs, mode).unwrap();
                    assert_eq!((got.encoder, got.decoder), oracle(inputs, mode), "{inputs:?} {mode:?}");
                    assert_eq!(got.total(), got.encoder + got.decoder);
                }
            }
        }
    }
}

#[test]
fn default_passes_are_one_per_paragraph_plus_generation() {
    let inputs = CostInputs {
        m: 6,
        n: 4,
        lx: 2,
        ld: 3,
        layers: 1,
        iterations: 1,
        passes_per_iteration: None,
    };
    assert_eq!(inputs.passes(), 7);
}

#[test]
fn concatenated_encoder_grows_quadratically_in_paragraphs() {
    let at = |m| {
        let inputs = CostInputs {
            m,
            n: 64,
            lx: 16,
            ld: 32,
            layers: 1,
            iterations: 1,
            passes_per_iteration: Some(1),
        };
        let c = count_attention_ops(inputs, Mode::Concatenated).unwrap().encoder as f64;
        let s = count_attention_ops(inputs, Mode::Separated).unwrap().encoder as f64;
        c / s
    };
    let ratios: Vec<f64> = [2, 4, 8, 16].into_iter().map(at).collect();
    assert!(ratios.windows(2).all(|w| w[1] > w[0]), "{ratios:?}");
}

#[test]
fn medians_csv_and_ratios() {
    assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    assert_eq!(median(&mut []), 0.0);
    let rows = vec![
        BenchRow {
            mode: Mode::Concatenated,
            m: 2,
            n: 8,
            analytic_ops: 10,
            median_ms: 3.0,
        },
        BenchRow {
            mode: Mode::Separated,
            m: 2,
            n: 8,
            analytic_ops: 4,
            median_ms: 1.5,
        },
    ];
    let csv = rows_to_csv(&rows);
    assert_eq!(csv.lines().next(), Some("mode,m,n,analytic_ops,median_ms"));
    assert_eq!(csv.lines().nth(1), Some("concatenated,2,8,10,3.0000"));
    assert_eq!(time_ratios(&rows), vec![(2, 8, 2.0)]);
}
