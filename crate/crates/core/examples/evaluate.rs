//! Evaluates a checkpoint on a dataset split.
//!
//! `cargo run --release --example evaluate -- <work-dir>` trains a short run
//! first when the work directory has no checkpoint yet.

mod common;

use hft::harness::{evaluate, train, AnyCheckpoint};
use hft::synthworld::Dataset;

fn main() -> hft::Result<()> {
    let dir = common::workdir("evaluate");
    let ckpt = dir.join("run").join("last.ckpt");
    let data = dir.join("data");
    if !ckpt.exists() {
        let data = common::tiny_dataset(&dir, 32, 8)?;
        train(&common::tiny_run(&data, &dir.join("run")))?;
    }
    let ck = AnyCheckpoint::load(&ckpt)?;
    let ds = Dataset::open(&data)?;
    let report = evaluate(&ck, &ds, "val")?;
    for (name, iou) in ds.manifest.class_names.iter().zip(&report.per_class_iou) {
        println!("{name:<12} IoU {iou:?}");
    }
    println!("mIoU {:?} mAP {:?} BamIoU {:.3}", report.miou, report.map, report.bamiou);
    Ok(())
}
