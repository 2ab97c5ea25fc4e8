//! Train each temporal head (LSTM, GRU, transformer) over one frozen
//! backbone and score held-out videos.
//!
//! cargo run --release -p gunsight --example video_classifier

use gunsight::augment::AugmentPolicy;
use gunsight::backbone::{finetune_backbone, BackboneState};
use gunsight::classifier::{build_head, train_classifier, ClassifierModel, HeadConfig, HeadKind};
use gunsight::metrics::{classification_metrics, confusion_counts};
use gunsight::synth::{image_set, video_set};
use gunsight::train::TrainConfig;

fn main() -> gunsight::Result<()> {
    let images: Vec<_> = image_set(160, 32, 2).into_iter().map(|(f, l, _)| (f, l)).collect();
    let (img_train, img_val) = images.split_at(130);
    let cfg = TrainConfig { epochs: 12, learning_rate: 3e-3, ..TrainConfig::default() };
    let backbone = finetune_backbone(
        &BackboneState::small_conv(3, &[8, 16, 16], 1)?,
        img_train,
        img_val,
        &AugmentPolicy::default(),
        &cfg,
    )?
    .state;

    let videos = video_set(60, 8, 32, 9);
    let (train, rest) = videos.split_at(40);
    let (val, test) = rest.split_at(8);
    for kind in HeadKind::ALL {
        let head_cfg = HeadConfig {
            lstm_units: 32,
            gru_units: 32,
            tf_model_dim: 32,
            tf_ffn_dim: 64,
            ..HeadConfig::with_kind(kind)
        };
        let head = build_head(&head_cfg, backbone.feature_dim(), 4)?;
        let model = ClassifierModel::new(backbone.clone(), head, 0.5, 8)?;
        let (trained, history) = train_classifier(&model, train, val, &TrainConfig { epochs: 20, ..cfg.clone() })?;
        let predicted = test
            .iter()
            .map(|v| trained.classify_video(v).map(|p| p.label))
            .collect::<gunsight::Result<Vec<_>>>()?;
        let truth: Vec<_> = test.iter().map(|v| v.label).collect();
        let m = classification_metrics(&confusion_counts(&predicted, &truth)?)?;
        println!("{kind:<12} best epoch {:>2}  test accuracy {:.3}", history.best_epoch, m.accuracy);
    }
    Ok(())
}
