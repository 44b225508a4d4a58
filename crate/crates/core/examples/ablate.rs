//! Runs the mutual-learning scheme ablation on the tiny world.

mod common;

use hft::harness::{ablate, AblationAxis};

fn main() -> hft::Result<()> {
    let dir = common::workdir("ablate");
    let data = common::tiny_dataset(&dir, 16, 8)?;
    let mut base = common::tiny_run(&data, &dir.join("runs"));
    base.epochs = 3;
    base.optimizer.decay_epochs = vec![2];
    let table = ablate(&base, AblationAxis::Scheme, &dir.join("ablation"))?;
    print!("{}", table.to_text());
    Ok(())
}
