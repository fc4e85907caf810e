//! Trains the reduced 8-node model and reports held-out exact match.
//!
//! Usage: `cargo run --release --example train_reduced -- <out-dir> [seed] [cosine-floor] [epochs]`
//!
//! With a cosine floor the learning rate decays from 1e-3 to that fraction
//! of it over the planned epochs (default 50); otherwise it stays constant.

use std::collections::HashSet;
use std::path::PathBuf;

use backchain::model::{evaluate_exact_match, train, LrSchedule, ModelConfig, Parameters, TrainConfig};
use backchain::task::{build_dataset, DatasetConfig, EdgeOrder, TreeKey};

fn main() -> backchain::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/reduced".into()));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed must be an integer"));
    let schedule = args.next().map_or(LrSchedule::Constant, |f| LrSchedule::Cosine {
        min_factor: f.parse().expect("cosine floor must be a number"),
    });
    let max_epochs: usize = args.next().map_or(50, |s| s.parse().expect("epochs must be an integer"));
    let data = |s: u64, count: usize, exclude: Option<&HashSet<TreeKey>>| {
        build_dataset(&DatasetConfig { seed: s, count, n_nodes: 8, order: EdgeOrder::Shuffled }, exclude)
    };
    let train_set = data(seed, 30_000, None)?;
    let seen: HashSet<TreeKey> = train_set.iter().map(|i| TreeKey::of(&i.tree)).collect();
    let val = data(seed + 1, 1_000, Some(&seen))?;
    let test = data(seed + 2, 3_000, Some(&seen))?;

    let params = Parameters::<f32>::init(&ModelConfig { seed, ..ModelConfig::reduced() })?;
    let config = TrainConfig { seed, patience: 10, schedule, max_epochs, checkpoint_dir: Some(out.clone()), ..Default::default() };
    let outcome = train(params, &train_set, &val, &config, |m| {
        println!(
            "epoch {:>3} step {:>6} loss {:.5} val {:?} ({:.0}s)",
            m.epoch, m.step, m.train_loss, m.val_accuracy, m.seconds
        );
    })?;
    let report = evaluate_exact_match(&outcome.params, &test, 256)?;
    println!("test exact match {:.4} ({}/{})", report.accuracy, report.correct, report.n);
    println!("checkpoint digest {}", outcome.params.digest());
    Ok(())
}
