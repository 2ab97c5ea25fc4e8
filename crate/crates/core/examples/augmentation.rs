//! Seeded flip / rotation / zoom augmentation of one image, written as a
//! strip of PNGs.
//!
//! cargo run -p gunsight --example augmentation -- aug_out

use std::path::PathBuf;

use gunsight::augment::{augment_image, AugmentPolicy, FillMode};
use gunsight::dataset::Label;
use gunsight::gradcam::write_png;
use gunsight::synth::bright_square_image;

fn main() -> gunsight::Result<()> {
    let dir = std::env::args_os().nth(1).map(PathBuf::from).unwrap_or_else(|| "aug_out".into());
    std::fs::create_dir_all(&dir).map_err(|e| gunsight::Error::io(&dir, e))?;
    let (frame, _) = bright_square_image(64, Label::Gun, 3);
    write_png(&frame, &dir.join("original.png"))?;
    for (name, fill) in [("reflect", FillMode::Reflect), ("zero", FillMode::ConstantZero)] {
        let policy = AugmentPolicy {
            rotation_max_degrees: 30.0,
            fill_mode: fill,
            ..AugmentPolicy::default()
        };
        for seed in 0..4 {
            let path = dir.join(format!("{name}_{seed}.png"));
            write_png(&augment_image(&frame, &policy, seed), &path)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
