//! Scores a random prediction against random ground truth.

use hft::metrics::{bamiou, MetricAccumulator};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> hft::Result<()> {
    let (classes, cells) = (4, 256);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let validity: Vec<bool> = (0..cells).map(|_| rng.random_bool(0.8)).collect();
    let gt: Vec<bool> = (0..classes * cells).map(|_| rng.random_bool(0.25)).collect();
    let scores: Vec<f64> = gt
        .iter()
        .map(|&g| (if g { 0.65 } else { 0.35 }) + rng.random_range(-0.3..0.3))
        .collect();

    let mut acc = MetricAccumulator::new(classes);
    acc.add(&scores, &gt, &validity)?;
    let report = acc.finish(&[0, 1], &[2, 3])?;
    println!("{}", report.to_json()?);

    let b = bamiou(&[Some(0.6), Some(0.4), Some(0.2), Some(0.4)], &[0, 1], &[2, 3], None)?;
    println!("static {:.2} + dynamic {:.2} = {:.2}", b.iou_st, b.iou_dy, b.bamiou);
    Ok(())
}
