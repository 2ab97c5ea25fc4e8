//! Classification metrics, ROC curve and AUC for a batch of video scores,
//! with the curve rendered to a PNG.
//!
//! cargo run -p gunsight --example roc_auc -- roc.png

use std::path::PathBuf;

use gunsight::dataset::Label;
use gunsight::metrics::{classification_metrics, confusion_counts, roc_auc};
use gunsight::render::{rgb_bytes, roc_plot};

fn main() -> gunsight::Result<()> {
    let out = std::env::args_os().nth(1).map(PathBuf::from).unwrap_or_else(|| "roc.png".into());
    let scores = [0.95, 0.9, 0.8, 0.7, 0.65, 0.6, 0.4, 0.3, 0.2, 0.1];
    let truth = [1, 1, 0, 1, 1, 0, 1, 0, 0, 0].map(|g| if g == 1 { Label::Gun } else { Label::NoGun });
    let predicted: Vec<Label> = scores.iter().map(|&s| if s >= 0.5 { Label::Gun } else { Label::NoGun }).collect();

    let c = confusion_counts(&predicted, &truth)?;
    let m = classification_metrics(&c)?;
    println!("TP {} FP {} FN {} TN {}", c.tp, c.fp, c.fn_, c.tn);
    println!("accuracy {:.2} precision {:?} recall {:?} f1 {:?}", m.accuracy, m.precision, m.recall, m.f1);

    let curve = roc_auc(&scores, &truth)?;
    print!("{}", curve.to_csv());
    println!("AUC {:.3}", curve.auc);

    let img = roc_plot(&curve, 200);
    image::save_buffer(&out, &rgb_bytes(&img), 200, 200, image::ColorType::Rgb8)
        .map_err(|e| gunsight::Error::io(&out, std::io::Error::other(e)))?;
    println!("wrote {}", out.display());
    Ok(())
}
