//! Renders predicted and ground-truth BEV maps as PNG files.

mod common;

use hft::harness::{train, visualize, AnyCheckpoint};
use hft::synthworld::Dataset;

fn main() -> hft::Result<()> {
    let dir = common::workdir("visualize");
    let data = common::tiny_dataset(&dir, 16, 4)?;
    let cfg = common::tiny_run(&data, &dir.join("run"));
    train(&cfg)?;
    let ck = AnyCheckpoint::load(&cfg.output.join("last.ckpt"))?;
    let ds = Dataset::open(&data)?;
    let ids: Vec<String> = ds.manifest.samples.iter().rev().take(2).map(|s| s.id.clone()).collect();
    for f in visualize(&ck, &ds, &ids, &dir.join("viz"))? {
        println!("{f}");
    }
    Ok(())
}
