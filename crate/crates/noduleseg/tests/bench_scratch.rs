use std::time::Instant;
use noduleseg::io::RunConfig;
use noduleseg::phantom::{generate_phantom_dataset, PhantomConfig};
use noduleseg::train::train;

#[test]
fn bench_step() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate_phantom_dataset(&data, 4, &PhantomConfig { candidates_per_patient: (1, 1), non_nodule_fraction: 0.0, ..Default::default() }, 1).unwrap();
    let mut cfg = RunConfig::default();
    cfg.max_steps = 3;
    cfg.eval_every = 1000;
    let t = Instant::now();
    train(&data, &dir.path().join("run"), &cfg).unwrap();
    eprintln!("3 steps: {:?} => {:?}/step", t.elapsed(), t.elapsed() / 3);
}
