//! Stops a run halfway, resumes it from the checkpoint, and checks that the
//! result matches an uninterrupted run.

mod common;

use hft::harness::{resume, train, AnyCheckpoint};

fn main() -> hft::Result<()> {
    let dir = common::workdir("resume");
    let data = common::tiny_dataset(&dir, 16, 4)?;
    let mut full = common::tiny_run(&data, &dir.join("full"));
    full.optimizer.decay_epochs = vec![2];
    let mut half = full.clone();
    half.epochs = 3;
    half.output = dir.join("half");

    train(&full)?;
    train(&half)?;
    let resumed = resume(&half.output.join("last.ckpt"), Some(full.epochs))?;
    println!("resumed to step {}", resumed.steps);

    let a = AnyCheckpoint::load(&full.output.join("last.ckpt"))?;
    let b = AnyCheckpoint::load(&half.output.join("last.ckpt"))?;
    let same = match (a, b) {
        (AnyCheckpoint::F32(a), AnyCheckpoint::F32(b)) => a.params == b.params && a.optimizer == b.optimizer,
        _ => false,
    };
    println!("parameters identical to the uninterrupted run: {same}");
    let log = |p: &std::path::Path| std::fs::read(p.join("loss_log.jsonl")).unwrap_or_default();
    println!("loss logs identical: {}", log(&full.output) == log(&half.output));
    Ok(())
}
