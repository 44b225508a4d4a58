mod common;

use std::fs;
use std::path::Path;

use common::*;
use hft::geometry::BevGridSpec;
use hft::synthworld::*;
use hft::Error;

fn vehicle(x: f64, z: f64, width: f64, length: f64, elevation: f64) -> BoxObject {
    BoxObject {
        class: 2,
        x,
        z,
        width,
        length,
        height: 1.6,
        elevation,
        brightness: 1.0,
    }
}

fn scene_with(boxes: Vec<BoxObject>, polygons: Vec<GroundPolygon>) -> Scene {
    Scene {
        seed: 0,
        polygons,
        boxes,
    }
}

fn pixels_of(img: &RgbImage, color: [u8; 3]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for r in 0..img.height {
        for c in 0..img.width {
            if img.pixel(r, c) == color {
                out.push((r, c));
            }
        }
    }
    out
}

#[test]
fn scenes_are_deterministic() {
    let cfg = SceneConfig::default();
    for seed in 0..20 {
        assert_eq!(sample_scene(seed, &cfg).unwrap(), sample_scene(seed, &cfg).unwrap());
    }
    assert_ne!(sample_scene(1, &cfg).unwrap(), sample_scene(2, &cfg).unwrap());
}

#[test]
fn empty_class_set_is_a_config_error() {
    let cfg = SceneConfig {
        classes: Vec::new(),
        ..SceneConfig::default()
    };
    assert!(matches!(sample_scene(0, &cfg), Err(Error::Config(_))));
}

#[test]
fn counts_stay_inside_their_ranges() {
    let mut cfg = SceneConfig::default();
    for c in &mut cfg.classes {
        c.count = (1, 5);
    }
    for seed in 0..1000 {
        let s = sample_scene(seed, &cfg).unwrap();
        for (c, n) in s.class_counts(cfg.classes.len()).into_iter().enumerate() {
            assert!((1..=5).contains(&n), "seed {seed} class {c}: {n}");
        }
    }
}

#[test]
fn scene_objects_are_non_degenerate_and_inside_the_grid() {
    let cfg = SceneConfig {
        elevated_probability: 0.5,
        ..SceneConfig::default()
    };
    let hw = cfg.grid.lateral_half_width();
    for seed in 0..200 {
        let s = sample_scene(seed, &cfg).unwrap();
        for b in &s.boxes {
            assert!(b.width > 0.0 && b.length > 0.0 && b.height > 0.0 && b.elevation >= 0.0);
            assert!(b.z - b.length / 2.0 >= cfg.grid.z_min - 1e-9 && b.z + b.length / 2.0 <= cfg.grid.z_max + 1e-9);
            assert!(b.x.abs() + b.width / 2.0 <= hw + 1e-9);
        }
        for p in &s.polygons {
            assert!(p.vertices.len() >= 3);
            assert!(polygon_area(&p.vertices) > 0.1, "seed {seed}: {:?}", p.vertices);
        }
    }
}

#[test]
fn elevation_follows_the_configured_probability() {
    let mut cfg = SceneConfig::default();
    for seed in 0..200 {
        assert!(sample_scene(seed, &cfg).unwrap().boxes.iter().all(|b| b.elevation == 0.0));
    }
    cfg.elevated_probability = 1.0;
    for seed in 0..200 {
        for b in sample_scene(seed, &cfg).unwrap().boxes {
            assert!((0.4..=1.2).contains(&b.elevation), "{}", b.elevation);
        }
    }
}

#[test]
fn empty_scene_renders_background_and_empty_labels() {
    let cfg = SceneConfig::default();
    let intr = cfg.intrinsics;
    let img = render_fv(&Scene::empty(0), &cfg.classes, &intr, 128, 128).unwrap();
    assert_eq!(pixels_of(&img, BACKGROUND).len(), 128 * 128);
    let (labels, validity) = render_bev_gt(&Scene::empty(0), 4, &cfg.grid, &intr).unwrap();
    assert!(labels.iter().all(|&l| !l));
    assert_eq!(validity, cfg.grid.frustum_mask(&intr));
}

#[test]
fn ground_band_rows_match_projection() {
    let cfg = SceneConfig::default();
    let intr = cfg.intrinsics;
    let hw = cfg.grid.lateral_half_width();
    let band = GroundPolygon {
        class: 0,
        vertices: vec![(-hw, 5.0), (hw, 5.0), (hw, 10.0), (-hw, 10.0)],
        brightness: 1.0,
    };
    let img = render_fv(&scene_with(vec![], vec![band]), &cfg.classes, &intr, 128, 128).unwrap();
    let px = pixels_of(&img, cfg.classes[0].color);
    let top = px.iter().map(|p| p.0).min().unwrap() as f64;
    let bottom = px.iter().map(|p| p.0).max().unwrap() as f64 + 1.0;
    let (_, v_far) = intr.ground_to_pixel(0.0, 10.0).unwrap();
    let (_, v_near) = intr.ground_to_pixel(0.0, 5.0).unwrap();
    assert!((top - v_far).abs() <= 1.0, "{top} vs {v_far}");
    assert!((bottom - v_near).abs() <= 1.0, "{bottom} vs {v_near}");
}

#[test]
fn near_box_wins_on_overlap() {
    let cfg = SceneConfig::default();
    let intr = cfg.intrinsics;
    let near = vehicle(0.0, 8.0, 2.0, 4.0, 0.0);
    let far = BoxObject {
        class: 3,
        width: 4.0,
        height: 3.0,
        ..vehicle(0.0, 14.0, 2.0, 4.0, 0.0)
    };
    let far_only = render_fv(&scene_with(vec![far], vec![]), &cfg.classes, &intr, 128, 128).unwrap();
    let near_only = render_fv(&scene_with(vec![near], vec![]), &cfg.classes, &intr, 128, 128).unwrap();
    let both = render_fv(&scene_with(vec![near, far], vec![]), &cfg.classes, &intr, 128, 128).unwrap();
    let both_rev = render_fv(&scene_with(vec![far, near], vec![]), &cfg.classes, &intr, 128, 128).unwrap();
    assert_eq!(both, both_rev);
    let far_px: std::collections::HashSet<_> = pixels_of(&far_only, cfg.classes[3].color).into_iter().collect();
    let overlap: Vec<_> = pixels_of(&near_only, cfg.classes[2].color)
        .into_iter()
        .filter(|p| far_px.contains(p))
        .collect();
    assert!(!overlap.is_empty());
    for (r, c) in overlap {
        assert_eq!(both.pixel(r, c), cfg.classes[2].color);
    }
}

#[test]
fn box_footprint_rasterizes_by_cell_centres() {
    let grid = BevGridSpec::with_extent_cells(64, 0.25, 1.0, &[16, 16, 32]).unwrap();
    let intr = default_intrinsics();
    let (labels, _) = render_bev_gt(&scene_with(vec![vehicle(0.0, 10.0, 2.0, 4.0, 0.0)], vec![]), 4, &grid, &intr).unwrap();
    let plane = grid.num_cells();
    let occupied: Vec<(usize, usize)> = (0..plane)
        .filter(|&k| labels[2 * plane + k])
        .map(|k| (k / 64, k % 64))
        .collect();
    assert_eq!(occupied.len(), 8 * 16);
    let rows: Vec<usize> = occupied.iter().map(|p| p.0).collect();
    let cols: Vec<usize> = occupied.iter().map(|p| p.1).collect();
    assert_eq!((*rows.iter().min().unwrap(), *rows.iter().max().unwrap()), (28, 43));
    assert_eq!((*cols.iter().min().unwrap(), *cols.iter().max().unwrap()), (28, 35));
    // centred on the cell containing (0, 10)
    let (cx, cz) = grid.cell_center(36, 32);
    assert!((cx - 0.125).abs() < 1e-12 && (cz - 10.125).abs() < 1e-12);
    assert!(labels[..2 * plane].iter().all(|&l| !l));
}

#[test]
fn objects_behind_the_camera_leave_no_trace() {
    let cfg = SceneConfig::default();
    let behind = vehicle(0.0, -5.0, 2.0, 4.0, 0.0);
    let (labels, _) = render_bev_gt(&scene_with(vec![behind], vec![]), 4, &cfg.grid, &cfg.intrinsics).unwrap();
    assert!(labels.iter().all(|&l| !l));
    let img = render_fv(&scene_with(vec![behind], vec![]), &cfg.classes, &cfg.intrinsics, 128, 128).unwrap();
    assert_eq!(pixels_of(&img, BACKGROUND).len(), 128 * 128);
}

#[test]
fn labels_are_confined_to_validity() {
    let cfg = SceneConfig::default();
    for seed in 0..50 {
        let r = SampleRecord::generate(format!("{seed}"), seed, &cfg).unwrap();
        let plane = r.validity.len();
        for (i, &l) in r.bev_labels.iter().enumerate() {
            assert!(!l || r.validity[i % plane]);
        }
        assert_eq!(r.validity, cfg.grid.frustum_mask(&cfg.intrinsics));
    }
}

#[test]
fn occupied_vehicle_cells_show_the_vehicle_colour() {
    let cfg = SceneConfig::default();
    let intr = cfg.intrinsics;
    let color = cfg.classes[2].color;
    for (x, z) in [(0.0, 6.0), (-3.0, 12.0), (4.0, 20.0), (1.5, 28.0)] {
        let scene = scene_with(vec![vehicle(x, z, 2.0, 4.0, 0.0)], vec![]);
        let img = render_fv(&scene, &cfg.classes, &intr, 128, 128).unwrap();
        let (labels, validity) = render_bev_gt(&scene, 4, &cfg.grid, &intr).unwrap();
        let plane = cfg.grid.num_cells();
        let mut checked = 0;
        for k in (0..plane).filter(|&k| labels[2 * plane + k] && validity[k]) {
            let (cx, cz) = cfg.grid.cell_center(k / cfg.grid.lateral_cells, k % cfg.grid.lateral_cells);
            let (u, v) = intr.ground_to_pixel(cx, cz).unwrap();
            let (r0, c0) = (v.floor() as i64, u.floor() as i64);
            let hit = (-1..=1).any(|dr| {
                (-1..=1).any(|dc| {
                    let (r, c) = (r0 + dr, c0 + dc);
                    r >= 0 && c >= 0 && (r as usize) < 128 && (c as usize) < 128 && img.pixel(r as usize, c as usize) == color
                })
            });
            assert!(hit, "cell ({cx}, {cz}) of box at ({x}, {z})");
            checked += 1;
        }
        assert!(checked > 0);
    }
}

#[test]
fn elevated_box_back_projects_beyond_its_true_depth() {
    let cfg = SceneConfig::default();
    let intr = cfg.intrinsics;
    let color = cfg.classes[2].color;
    let lowest_ground_z = |elevation: f64| {
        let b = vehicle(0.0, 10.0, 2.0, 4.0, elevation);
        let img = render_fv(&scene_with(vec![b], vec![]), &cfg.classes, &intr, 128, 128).unwrap();
        let px = pixels_of(&img, color);
        let bottom = px.iter().map(|p| p.0).max().unwrap() as f64 + 1.0;
        intr.pixel_to_ground(intr.cx, bottom).unwrap().1
    };
    let near_face = 8.0;
    let flat = lowest_ground_z(0.0);
    assert!((flat - near_face).abs() < 0.5, "{flat}");
    let raised = lowest_ground_z(1.0);
    assert!(raised > near_face + 5.0, "{raised}");
}

#[test]
fn flip_is_an_involution() {
    let cfg = SceneConfig::default();
    let r = SampleRecord::generate("a".into(), 3, &cfg).unwrap();
    let f = flip_sample(&r, 4, cfg.grid.lateral_cells);
    assert_ne!(f.fv_image, r.fv_image);
    let back = flip_sample(&f, 4, cfg.grid.lateral_cells);
    assert_eq!(back.fv_image, r.fv_image);
    assert_eq!(back.bev_labels, r.bev_labels);
    assert_eq!(back.validity, r.validity);
}

#[test]
fn label_packing_round_trips() {
    let labels = random_bools(4 * 50, 0.4, 1);
    let words = pack_labels(&labels, 4);
    assert_eq!(unpack_labels(&words, 4).unwrap(), labels);
    assert!(unpack_labels(&[0b10000], 4).is_err());
}

// ---- serialization ----

fn tiny_samples(n: usize, seed: u64) -> Vec<SampleRecord> {
    let cfg = DatasetConfig {
        scene: tiny_scene_config(),
        train: n,
        val: 0,
    };
    generate_samples(&cfg, seed).unwrap()
}

#[test]
fn write_then_read_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let samples = tiny_samples(10, 4);
    let m = write_dataset(&samples, &tiny_scene_config(), "train:8,val:2", dir.path()).unwrap();
    assert_eq!(m.class_names, vec!["drivable", "walkway", "vehicle", "pedestrian"]);
    let ds = Dataset::open(dir.path()).unwrap();
    assert_eq!(ds.manifest, m);
    assert_eq!(ds.manifest.grid, small_grid());
    for (i, s) in samples.iter().enumerate() {
        assert_eq!(&ds.load(i).unwrap(), s);
    }
    assert_eq!(ds.load_split("val").unwrap(), samples[8..].to_vec());
}

#[test]
fn split_sizes_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_dataset(dir.path(), 200, 50, 0);
    let ds = Dataset::open(dir.path()).unwrap();
    assert_eq!(ds.manifest.splits, "train:200,val:50");
    assert_eq!(ds.len(), 250);
    assert_eq!(ds.split_len("train"), Some(200));
    assert_eq!(ds.split_len("val"), Some(50));
    assert!(matches!(ds.split("test"), Err(Error::Data(_))));
}

#[test]
fn bad_split_specs_are_rejected() {
    assert!(parse_splits("train:5,val:4", 10).is_err());
    assert!(parse_splits("train:5,train:5", 10).is_err());
    assert!(parse_splits("train:x", 10).is_err());
    assert_eq!(parse_splits("a:3,b:7", 10).unwrap()[1].1, 3..10);
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn regenerating_gives_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_tiny_dataset(a.path(), 6, 2, 9);
    write_tiny_dataset(b.path(), 6, 2, 9);
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
    let c = tempfile::tempdir().unwrap();
    write_tiny_dataset(c.path(), 6, 2, 10);
    assert_ne!(dir_bytes(a.path()), dir_bytes(c.path()));
}

fn edit_manifest(dir: &Path, f: impl FnOnce(&mut serde_json::Value)) {
    let p = dir.join(MANIFEST);
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
    f(&mut v);
    fs::write(&p, serde_json::to_string(&v).unwrap()).unwrap();
}

#[test]
fn class_count_mismatch_fails_to_load() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_tiny_dataset(dir.path(), 6, 0, 2);
    let idx = m
        .samples
        .iter()
        .position(|s| s.scene.boxes.iter().any(|b| b.class == 2))
        .unwrap();
    edit_manifest(dir.path(), |v| {
        v["class_names"] = serde_json::json!(["drivable", "walkway"]);
    });
    let ds = Dataset::open(dir.path()).unwrap();
    assert!(matches!(ds.load(idx), Err(Error::Data(_))));
}

#[test]
fn corrupted_payload_fails_checksum() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_dataset(dir.path(), 2, 0, 2);
    let victim = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "png"))
        .unwrap();
    let mut bytes = fs::read(&victim).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 0xff;
    fs::write(&victim, bytes).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let errs = (0..2).filter(|&i| matches!(ds.load(i), Err(Error::Data(_)))).count();
    assert_eq!(errs, 1);
}

#[test]
fn unknown_version_and_missing_manifest_fail() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_dataset(dir.path(), 2, 0, 2);
    edit_manifest(dir.path(), |v| v["format_version"] = serde_json::json!(FORMAT_VERSION + 1));
    assert!(matches!(Dataset::open(dir.path()), Err(Error::Data(_))));
    fs::remove_file(dir.path().join(MANIFEST)).unwrap();
    assert!(matches!(Dataset::open(dir.path()), Err(Error::Data(_))));
    edit_manifest_raw(dir.path(), "{not json");
    assert!(matches!(Dataset::open(dir.path()), Err(Error::Data(_))));
}

fn edit_manifest_raw(dir: &Path, text: &str) {
    fs::write(dir.join(MANIFEST), text).unwrap();
}
