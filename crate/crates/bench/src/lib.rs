//! Fixtures shared by the benchmark targets: the standard acquisition
//! protocol and ready-made networks, batches and ensembles sized like the
//! real experiment.

use std::sync::Arc;

use ivimuq_core::ndarray::Array2;
use ivimuq_core::{
    sample_training_set, BValueSchedule, DeepEnsemble, DenseNetwork, HeadSpec, PriorRanges,
};

/// The 14-point protocol every benchmark runs against.
pub const B_VALUES: [f64; 14] = [
    0.0, 15.0, 60.0, 100.0, 150.0, 170.0, 190.0, 220.0, 280.0, 440.0, 560.0, 700.0, 850.0, 1000.0,
];

pub fn standard_schedule() -> Arc<BValueSchedule> {
    Arc::new(BValueSchedule::new(B_VALUES.to_vec()).expect("protocol is valid"))
}

/// A simulated minibatch: noisy normalized signals and unit-space labels.
pub fn training_batch(n: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let set = sample_training_set(
        n,
        &PriorRanges::default(),
        &standard_schedule(),
        (1.0, 200.0),
        seed,
    )
    .expect("simulation succeeds");
    set.to_matrices()
}

/// An experiment-sized network for the given head: 14 -> 64 -> 64 -> out.
pub fn standard_network(spec: &HeadSpec, seed: u64) -> DenseNetwork {
    DenseNetwork::with_two_hidden(B_VALUES.len(), 64, spec.output_width(), seed)
        .expect("valid layer sizes")
}

/// A freshly initialized ensemble. Member weights are untrained; prediction
/// throughput does not depend on what the weights converged to.
pub fn untrained_ensemble(spec: HeadSpec, members: usize) -> DeepEnsemble {
    let member_seeds: Vec<u64> = (0..members as u64).collect();
    let members = member_seeds
        .iter()
        .map(|&seed| standard_network(&spec, seed))
        .collect();
    DeepEnsemble {
        spec,
        ranges: PriorRanges::default(),
        schedule: standard_schedule(),
        members,
        member_seeds,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_well_formed() {
        let (x, y) = training_batch(8, 3);
        assert_eq!(x.nrows(), 8);
        assert_eq!(x.ncols(), B_VALUES.len());
        assert_eq!(y.ncols(), 3);
        let ens = untrained_ensemble(HeadSpec::mdn(10), 5);
        ens.validate().expect("ensemble is consistent");
        assert_eq!(ens.m(), 5);
    }
}
