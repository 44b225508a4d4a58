//! Shows how a raised box lands too far away when its pixels are pushed back
//! onto the ground plane.

use hft::synthworld::{default_classes, default_intrinsics, render_fv, BoxObject, Scene};

fn main() -> hft::Result<()> {
    let intr = default_intrinsics();
    let classes = default_classes();
    for elevation in [0.0, 0.4, 0.8, 1.2] {
        let b = BoxObject {
            class: 2,
            x: 0.0,
            z: 10.0,
            width: 2.0,
            length: 4.0,
            height: 1.6,
            elevation,
            brightness: 1.0,
        };
        let scene = Scene {
            seed: 0,
            polygons: Vec::new(),
            boxes: vec![b],
        };
        let img = render_fv(&scene, &classes, &intr, intr.image_height, intr.image_width)?;
        let lowest = (0..img.height)
            .rev()
            .find(|&r| (0..img.width).any(|c| img.pixel(r, c) == classes[2].color))
            .expect("box is visible");
        let (_, z) = intr.pixel_to_ground(intr.cx, lowest as f64 + 1.0)?;
        println!("elevation {elevation:.1} m: near face at 8.0 m, flat-world estimate {z:.2} m");
    }
    Ok(())
}
