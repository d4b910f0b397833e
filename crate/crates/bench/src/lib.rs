//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tradeflow_core::ensemble::{Binning, EnsembleConfig, LineSampler, Sampler, TypeSampler, ValueSampler};
use tradeflow_core::espace::{Agent, ExpectationPair, TransactionPair};
use tradeflow_core::pricing::{self, PartialSeries, Weights};
use tradeflow_core::{closed_form_disturbance, DisturbanceParams, TypeParams};

pub fn agents(n: usize, bounds: &[f64], types: usize, seed: u64) -> Vec<Agent> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n as u64)
        .map(|id| Agent {
            id,
            x: bounds.iter().map(|&b| r.random_range(0.0..=b)).collect(),
            v: bounds.iter().map(|_| r.random_range(-1.0..1.0)).collect(),
            trades: (0..types)
                .map(|_| TransactionPair::new(r.random_range(0.0..10.0), r.random_range(0.0..50.0)))
                .collect(),
            expectations: vec![ExpectationPair::default(); types],
        })
        .collect()
}

pub fn oscillators(types: usize) -> DisturbanceParams {
    let types = (0..types)
        .map(|k| {
            let w = 0.5 + 0.25 * k as f64;
            TypeParams {
                q0: 10.0 + k as f64,
                sv0: 30.0 + 2.0 * k as f64,
                et0_q: 10.0,
                et0_sv: 30.0,
                a_q: w,
                be_q: -w,
                a_sv: 1.1 * w,
                be_sv: -1.1 * w,
                c_q: 0.01,
                d_q: 0.0,
                c_sv: 0.0,
                d_sv: 0.02,
            }
        })
        .collect();
    DisturbanceParams::new(types).expect("valid oscillators")
}

pub fn series(params: &DisturbanceParams, step: f64, n: usize) -> (PartialSeries, Weights) {
    let k = params.types.len();
    let states: Vec<_> = (0..n)
        .map(|i| closed_form_disturbance(params, i as f64 * step).expect("oscillatory"))
        .collect();
    let q = (0..k).map(|j| states.iter().map(|s| s.types[j].q).collect()).collect();
    let sv: Vec<Vec<f64>> = (0..k).map(|j| states.iter().map(|s| s.types[j].sv).collect()).collect();
    let q0: Vec<f64> = params.types.iter().map(|t| t.q0).collect();
    let sv0: Vec<f64> = params.types.iter().map(|t| t.sv0).collect();
    (
        PartialSeries::from_disturbances(0.0, step, q, &sv),
        pricing::weights(&q0, &sv0).expect("positive means"),
    )
}

pub fn ensemble(runs: usize) -> EnsembleConfig {
    let line = LineSampler {
        omega: Sampler::Uniform { low: 0.5, high: 2.0 },
        amplitude: Sampler::Uniform { low: 0.0, high: 0.05 },
        phase: Sampler::Uniform { low: 0.0, high: 6.0 },
    };
    let ty = TypeSampler {
        q0: Sampler::Uniform { low: 10.0, high: 100.0 },
        value: ValueSampler::Price(Sampler::Uniform { low: 1.0, high: 3.0 }),
        volume: line,
        value_line: line,
    };
    EnsembleConfig {
        runs,
        seed: 1,
        sample_step: 0.1,
        duration: 20.0,
        horizons: vec![0.1, 1.0],
        types: vec![ty; 3],
        shared_price: None,
        allow_large_amplitudes: false,
        binning: Binning::FreedmanDiaconis,
    }
}
