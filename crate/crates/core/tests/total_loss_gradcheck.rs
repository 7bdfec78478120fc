use std::time::Instant;

use refgaze_core::autodiff::Probe;
use refgaze_core::data::{synthesize_corpus, Corpus, SynthConfig};
use refgaze_core::engine::{grad_check_total_loss, TrainConfig};
use refgaze_core::model::{GazeModel, ModelConfig, Vocab};

fn one_record(seed: u64) -> Corpus {
    let mut c = synthesize_corpus(&SynthConfig { n_records: 1, seed, ..Default::default() }).unwrap();
    c.records.truncate(1);
    c
}

#[test]
fn full_training_loss_matches_finite_differences() {
    let corpus = one_record(5);
    let model = GazeModel::new(ModelConfig::toy(), Vocab::of(&corpus), 11).unwrap();
    let cfg = TrainConfig { seed: 3, ..TrainConfig::train() };
    let started = Instant::now();
    let report =
        grad_check_total_loss(&model, &corpus, &cfg, 1e-3, &Probe::Sample { per_tensor: 1, seed: 1 }).unwrap();
    let secs = started.elapsed().as_secs_f64();
    println!("probes {} max rel error {:.3e} worst {:?} in {secs:.1}s", report.probes, report.max_rel_error, report.worst);
    assert!(report.max_rel_error < 1e-3);
}
