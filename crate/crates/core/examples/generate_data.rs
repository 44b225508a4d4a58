//! Writes a small synthetic dataset and prints what one scene contains.
//!
//! `cargo run --example generate_data -- <out-dir>`

use std::path::PathBuf;

use hft::synthworld::{generate_dataset, Dataset, DatasetConfig, SceneConfig};

fn main() -> hft::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("hft-example-data"));
    let cfg = DatasetConfig {
        scene: SceneConfig {
            elevated_probability: 0.3,
            ..SceneConfig::default()
        },
        train: 16,
        val: 4,
    };
    let manifest = generate_dataset(&cfg, 7, &out)?;
    println!("{} samples ({}) in {}", manifest.samples.len(), manifest.splits, out.display());

    let ds = Dataset::open(&out)?;
    let rec = ds.load(0)?;
    let plane = rec.validity.len();
    for (c, name) in ds.manifest.class_names.iter().enumerate() {
        let cells = rec.bev_labels[c * plane..(c + 1) * plane].iter().filter(|&&l| l).count();
        println!("{name:<12} {cells:5} occupied cells");
    }
    for b in &rec.scene.boxes {
        println!(
            "box class {} at ({:.1}, {:.1}) {:.1}x{:.1} m, elevation {:.2}",
            b.class, b.x, b.z, b.width, b.length, b.elevation
        );
    }
    Ok(())
}
