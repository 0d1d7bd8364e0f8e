use aussm_core::tasks::{make_splits, SplitSpec, TaskId, TaskSpec};
use aussm_core::train::{train_task, TrainConfig};
use std::time::Instant;

#[test]
#[ignore]
fn measure_step_time() {
    let spec = TaskSpec::new(TaskId::Parity);
    let t0 = Instant::now();
    let splits = make_splits(&spec, &SplitSpec::new(1)).unwrap();
    println!("split gen: {:.1}s", t0.elapsed().as_secs_f64());
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 256,
        max_steps: 20,
        eval_every: 10,
        early_stop_scaled: 2.0,
        seed: 0,
        ..Default::default()
    };
    let t1 = Instant::now();
    let report = train_task(&spec, "ma", 16, 8, &cfg, &splits).unwrap();
    println!(
        "20 steps + 2 evals + test eval: {:.1}s; records: {:?}",
        t1.elapsed().as_secs_f64(),
        report
            .records
            .iter()
            .map(|r| (r.step, r.val_scaled))
            .collect::<Vec<_>>()
    );
}
