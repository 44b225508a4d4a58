//! Scalar-loop reference implementations and fixtures shared by the
//! integration tests.
#![allow(dead_code)]

use std::path::Path;

use hft::geometry::{BevGridSpec, CameraIntrinsics};
use hft::net::{Mode, ModelConfig};
use hft::synthworld::{self, DatasetConfig, SceneConfig};
use hft::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

pub fn random_bools(n: usize, p: f64, seed: u64) -> Vec<bool> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_bool(p)).collect()
}

// ---- metrics ----

pub fn iou_oracle(pred: &[bool], gt: &[bool], valid: &[bool], classes: usize) -> Vec<Option<f64>> {
    let plane = valid.len();
    let mut out = Vec::new();
    for c in 0..classes {
        let (mut inter, mut uni) = (0u64, 0u64);
        for k in 0..plane {
            if valid[k] {
                let (p, g) = (pred[c * plane + k], gt[c * plane + k]);
                if p && g {
                    inter += 1;
                }
                if p || g {
                    uni += 1;
                }
            }
        }
        out.push(if uni == 0 { None } else { Some(inter as f64 / uni as f64) });
    }
    out
}

/// Threshold sweep from the highest score down, one full scan per threshold.
pub fn ap_oracle(scores: &[f64], gt: &[bool], valid: &[bool], classes: usize) -> Vec<Option<f64>> {
    let plane = valid.len();
    let mut out = Vec::new();
    for c in 0..classes {
        let cells: Vec<usize> = (0..plane).filter(|&k| valid[k]).collect();
        let npos = cells.iter().filter(|&&k| gt[c * plane + k]).count();
        if npos == 0 {
            out.push(None);
            continue;
        }
        let mut thresholds: Vec<f64> = cells.iter().map(|&k| scores[c * plane + k]).collect();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let mut curve = Vec::new();
        for &t in &thresholds {
            let (mut tp, mut fp) = (0usize, 0usize);
            for &k in &cells {
                if scores[c * plane + k] >= t {
                    if gt[c * plane + k] {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            curve.push((tp as f64 / npos as f64, tp as f64 / (tp + fp) as f64));
        }
        let mut ap = 0.0;
        let mut prev = 0.0;
        for i in 0..curve.len() {
            let best = curve[i..].iter().map(|p| p.1).fold(f64::MIN, f64::max);
            ap += (curve[i].0 - prev) * best;
            prev = curve[i].0;
        }
        out.push(Some(ap));
    }
    out
}

pub fn mean_defined_oracle(v: &[Option<f64>]) -> Option<f64> {
    let d: Vec<f64> = v.iter().flatten().copied().collect();
    if d.is_empty() {
        None
    } else {
        Some(d.iter().sum::<f64>() / d.len() as f64)
    }
}

/// Uniform group weights, renormalised over classes with a defined IoU.
pub fn bamiou_oracle(ious: &[Option<f64>], st: &[usize], dy: &[usize]) -> (f64, f64, f64) {
    let group = |ids: &[usize]| {
        let w = 1.0 / ids.len() as f64;
        let (mut num, mut den) = (0.0, 0.0);
        for &i in ids {
            if let Some(v) = ious[i] {
                num += w * v;
                den += w;
            }
        }
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    };
    let (a, b) = (group(st), group(dy));
    (a, b, a + b)
}

// ---- losses ----

const EPS: f64 = 1e-7;

fn clamp(c: f64) -> f64 {
    c.clamp(EPS, 1.0 - EPS)
}

pub fn semantic_oracle(scores: &[f64], labels: &[f64], valid: &[bool], weights: &[f64]) -> f64 {
    let plane = valid.len();
    let mut pos = 0.0;
    let mut npos = 0usize;
    let mut negs: Vec<(f64, usize)> = Vec::new();
    for i in 0..scores.len() {
        if !valid[i % plane] {
            continue;
        }
        let w = weights[i / plane];
        let c = clamp(scores[i]);
        if labels[i] > 0.5 {
            npos += 1;
            pos += -w * c.ln();
        } else {
            negs.push((-(1.0 - w.min(0.99)) * (1.0 - c).ln(), i));
        }
    }
    negs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let keep = (3 * npos.max(1)).min(negs.len());
    let neg: f64 = negs[..keep].iter().map(|n| n.0).sum();
    (pos + neg) / npos.max(1) as f64
}

pub fn uncertainty_oracle(scores: &[f64]) -> f64 {
    let mut s = 0.0;
    for &c in scores {
        let c = c.max(EPS);
        s += 1.0 - c * c.ln();
    }
    s / scores.len() as f64
}

pub fn l2_oracle(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).powi(2);
    }
    (s / a.len() as f64).sqrt()
}

pub fn l1_oracle(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).abs();
    }
    s / a.len() as f64
}

/// `(KL(p||q) + KL(q||p)) / 2` per cell, channel-wise softmax, cell mean.
pub fn kl_oracle(a: &[f64], b: &[f64], channels: usize) -> f64 {
    let cells = a.len() / channels;
    let softmax = |x: &[f64], cell: usize| -> Vec<f64> {
        let v: Vec<f64> = (0..channels).map(|c| x[c * cells + cell]).collect();
        let m = v.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    };
    let mut total = 0.0;
    for cell in 0..cells {
        let (p, q) = (softmax(a, cell), softmax(b, cell));
        let mut kpq = 0.0;
        let mut kqp = 0.0;
        for c in 0..channels {
            kpq += p[c] * (p[c] / q[c]).ln();
            kqp += q[c] * (q[c] / p[c]).ln();
        }
        total += 0.5 * (kpq + kqp);
    }
    total / cells as f64
}

// ---- fixtures ----

pub fn small_intr() -> CameraIntrinsics {
    CameraIntrinsics::new(16.0, 16.0, 16.0, 10.0, 1.6, 32, 32).unwrap()
}

pub fn small_grid() -> BevGridSpec {
    BevGridSpec::with_extent_cells(8, 1.0, 1.0, &[2, 2, 4]).unwrap()
}

pub fn small_model_config(mode: Mode, classes: usize) -> ModelConfig {
    ModelConfig {
        mode,
        num_classes: classes,
        encoder_channels: vec![4, 4, 4],
        strides: vec![8, 16, 32],
        bev_channels: 4,
        fused_channels: 4,
        decoder_channels: 4,
        ..ModelConfig::default()
    }
}

/// 32x32 images over an 8x8 grid of 1 m cells.
pub fn tiny_scene_config() -> SceneConfig {
    let intr = small_intr();
    SceneConfig {
        grid: small_grid(),
        intrinsics: intr,
        ..SceneConfig::default()
    }
}

pub fn write_tiny_dataset(dir: &Path, train: usize, val: usize, seed: u64) -> hft::synthworld::Manifest {
    let cfg = DatasetConfig {
        scene: tiny_scene_config(),
        train,
        val,
    };
    synthworld::generate_dataset(&cfg, seed, dir).unwrap()
}

/// Small model settings for training runs on the tiny dataset.
pub fn tiny_run_config(data: &Path, out: &Path) -> hft::harness::RunConfig {
    let mut c = hft::harness::RunConfig {
        dataset: data.to_path_buf(),
        output: out.to_path_buf(),
        model: small_model_config(Mode::Hybrid, 4),
        epochs: 3,
        batch_size: 2,
        ..Default::default()
    };
    c.optimizer.decay_epochs = vec![1];
    c
}
