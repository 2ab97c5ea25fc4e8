//! Index a class-folder corpus, split it reproducibly and sample fixed-length
//! frame sequences from its videos.
//!
//! cargo run -p gunsight --example dataset_discovery

use gunsight::dataset::{discover_dataset, load_videos, split_dataset, MediaKind, SplitRatios};
use gunsight::synth::{write_corpus, SynthCorpus};

fn main() -> gunsight::Result<()> {
    let tmp = tempfile_dir();
    let paths = write_corpus(&tmp, &SynthCorpus { images: 40, videos: 20, ..SynthCorpus::default() })?;

    let images = discover_dataset(&paths.images, MediaKind::Image)?;
    let videos = discover_dataset(&paths.videos, MediaKind::Video)?;
    println!("images per class {:?}", images.class_counts);
    println!("videos per class {:?}", videos.class_counts);

    let split = split_dataset(&videos, SplitRatios::new(0.7, 0.15, 0.15), 11)?;
    println!("video split train/val/test = {}/{}/{}", split.train.len(), split.val.len(), split.test.len());

    let test: Vec<_> = split.test.iter().map(|&i| videos.entries[i].clone()).collect();
    for v in load_videos(&test, 8, (32, 32))? {
        let boxes = v.boxes.as_ref().map_or(0, |b| b.iter().map(Vec::len).sum());
        println!("{:?} {} frames, {boxes} boxes  {}", v.label, v.frames.len(), v.id);
    }
    let _ = std::fs::remove_dir_all(&tmp);
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    std::env::temp_dir().join(format!("gunsight_discovery_{}", std::process::id()))
}
