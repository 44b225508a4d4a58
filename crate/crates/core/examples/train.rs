//! Trains a small hybrid model and prints the epoch log.
//!
//! `cargo run --release --example train -- <work-dir>`

mod common;

use hft::harness::train;

fn main() -> hft::Result<()> {
    env_logger::init();
    let dir = common::workdir("train");
    let data = common::tiny_dataset(&dir, 32, 8)?;
    let cfg = common::tiny_run(&data, &dir.join("run"));
    let summary = train(&cfg)?;
    for e in &summary.epochs {
        println!("epoch {} lr {:.1e} loss {:.4} val mIoU {:?}", e.epoch, e.lr, e.mean_loss, e.val_miou);
    }
    println!("{} steps, {} parameters", summary.steps, summary.param_count.total);
    println!("checkpoints and loss log in {}", cfg.output.display());
    Ok(())
}
