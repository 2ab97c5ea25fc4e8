//! Fine-tune the built-in conv backbone on augmented still images, then
//! check it on held-out images.
//!
//! cargo run --release -p gunsight --example train_backbone

use gunsight::augment::AugmentPolicy;
use gunsight::backbone::{finetune_backbone, BackboneState};
use gunsight::dataset::Label;
use gunsight::synth::image_set;
use gunsight::train::TrainConfig;

fn main() -> gunsight::Result<()> {
    let data: Vec<_> = image_set(240, 32, 5).into_iter().map(|(f, l, _)| (f, l)).collect();
    let (train, rest) = data.split_at(180);
    let (val, test) = rest.split_at(30);

    let init = BackboneState::small_conv(3, &[8, 16, 16], 1)?;
    let cfg = TrainConfig { epochs: 15, learning_rate: 3e-3, ..TrainConfig::default() };
    let fit = finetune_backbone(&init, train, val, &AugmentPolicy::default(), &cfg)?;
    for e in &fit.history.epochs {
        println!("epoch {:>2} train {:.4} val {:.4} val acc {:?}", e.epoch, e.train_loss, e.val_loss, e.val_accuracy);
    }

    let frames: Vec<_> = test.iter().map(|(f, _)| f.clone()).collect();
    let logits = fit.state.image_logits(&frames)?;
    let correct = test
        .iter()
        .enumerate()
        .filter(|(i, (_, l))| {
            let row = &logits.data()[2 * i..2 * i + 2];
            let predicted = if row[l.index()] >= row[1 - l.index()] { *l } else { other(*l) };
            predicted == *l
        })
        .count();
    println!("held-out accuracy {}/{}", correct, test.len());
    Ok(())
}

fn other(l: Label) -> Label {
    if l.is_gun() {
        Label::NoGun
    } else {
        Label::Gun
    }
}
