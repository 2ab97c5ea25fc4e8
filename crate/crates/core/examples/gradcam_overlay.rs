//! Grad-CAM heatmaps of a freshly fine-tuned backbone for a Gun frame, one
//! per conv block, blended over the frame.
//!
//! cargo run --release -p gunsight --example gradcam_overlay -- gradcam_out

use std::path::PathBuf;

use gunsight::augment::AugmentPolicy;
use gunsight::backbone::{finetune_backbone, BackboneState};
use gunsight::dataset::Label;
use gunsight::gradcam::{capture_activations, gradcam_map, overlay, write_png};
use gunsight::synth::{bright_square_image, image_set};
use gunsight::train::TrainConfig;

fn main() -> gunsight::Result<()> {
    let dir = std::env::args_os().nth(1).map(PathBuf::from).unwrap_or_else(|| "gradcam_out".into());
    std::fs::create_dir_all(&dir).map_err(|e| gunsight::Error::io(&dir, e))?;
    let data: Vec<_> = image_set(120, 32, 6).into_iter().map(|(f, l, _)| (f, l)).collect();
    let cfg = TrainConfig { epochs: 10, learning_rate: 3e-3, ..TrainConfig::default() };
    let init = BackboneState::small_conv(3, &[8, 16, 16], 2)?;
    let model = finetune_backbone(&init, &data[..100], &data[100..], &AugmentPolicy::default(), &cfg)?.state;

    let (frame, _) = bright_square_image(32, Label::Gun, 77);
    write_png(&frame, &dir.join("frame.png"))?;
    for layer in 0..model.layers().len() {
        let cap = capture_activations(&model, &frame, Label::Gun.index(), Some(layer))?;
        let hm = gradcam_map(&cap)?;
        let path = dir.join(format!("layer{layer}.png"));
        write_png(&overlay(&hm, &frame, 0.5), &path)?;
        let peak = hm.values.iter().cloned().fold(0.0, f64::max);
        println!("layer {layer}: {}x{} map, peak {peak:.4}, wrote {}", hm.height, hm.width, path.display());
    }
    Ok(())
}
