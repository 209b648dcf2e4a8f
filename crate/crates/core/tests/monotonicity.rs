//! Trial accuracy against separation. Fifteen full cross-validation runs, so
//! it is ignored by default: `cargo test --test monotonicity -- --ignored`.

mod common;

use common::*;
use dpdkit::evalharness::{cross_validate, Method, ProtocolConfig};
use dpdkit::synthgen::SynthConfig;

/// Slack for fold-to-fold noise: one misclassified trial in every fold.
const SLACK: f64 = 1.0 / 12.0;

#[test]
#[ignore]
fn accuracy_grows_with_separation() {
    let multiples = [0.0, 1.0, 2.0, 4.0, 6.0];
    let seeds = [0u64, 1, 2];
    let mut acc = vec![vec![0.0; multiples.len()]; seeds.len()];
    for (si, &seed) in seeds.iter().enumerate() {
        for (mi, &m) in multiples.iter().enumerate() {
            let cfg = SynthConfig {
                seed,
                separation: m * 0.1,
                noise_sd: 0.1,
                ..SynthConfig::default()
            };
            let (_, data) = synth(&cfg);
            let rep = cross_validate(
                &data,
                &ProtocolConfig {
                    seed,
                    ..ProtocolConfig::default()
                },
                &[Method::Dpd],
            )
            .unwrap();
            acc[si][mi] = rep.mean_accuracy(Method::Dpd).unwrap();
        }
        report(&format!("seed {seed}: {:?}", acc[si]));
    }
    for mi in 1..multiples.len() {
        let up = acc.iter().filter(|a| a[mi] >= a[mi - 1] - SLACK).count();
        assert!(
            up * 2 > seeds.len(),
            "accuracy dropped from {}x to {}x noise_sd on most seeds: {acc:?}",
            multiples[mi - 1],
            multiples[mi]
        );
    }
}
