//! A short desk-scale run: train, checkpoint, resume and evaluate, with the
//! artifacts the CLI writes. Pass an output directory to keep them.

use centerpoint::data::{generate_synthetic_set, SyntheticSpec};
use centerpoint::harness::{lr_schedule, run_table, train, DetectorKind, RunOptions, TrainConfig};

fn main() -> centerpoint::Result<()> {
    let out = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("centerpoint_demo_run"));
    let spec = SyntheticSpec::default();
    let train_set = generate_synthetic_set(&spec, 50, 0, "train")?;
    let test_set = generate_synthetic_set(&spec, 10, 1, "test")?;

    let cfg = TrainConfig {
        detector: DetectorKind::CenterpointRetinanet,
        iterations: 300,
        batch_size: 4,
        lr_drop_iters: vec![200, 267],
        checkpoint_every: 100,
        ..Default::default()
    };
    for step in [0, 10, 33, 250, 280] {
        println!("lr at {step:>3}: {:.2e}", lr_schedule(step, &cfg));
    }

    // stop early as if interrupted, then pick up from the last checkpoint
    let interrupted = train(&cfg, &train_set, &test_set, &RunOptions { out_dir: Some(out.clone()), stop_after: Some(150), log_every: Some(50), ..Default::default() })?;
    let resume = interrupted.checkpoints.last().cloned();
    println!("interrupted after {} iterations, resuming from {resume:?}", interrupted.iterations_completed);
    let record = train(&cfg, &train_set, &test_set, &RunOptions { out_dir: Some(out.clone()), resume, log_every: Some(50), ..Default::default() })?;

    print!("{}", run_table(&record).render());
    println!("artifacts in {}", out.display());
    Ok(())
}
