//! Write the bright-square corpus (images, frame-directory videos with box
//! labels, detection set) to disk.
//!
//! cargo run --release -p gunsight --example synthetic_corpus -- /tmp/corpus

use std::path::PathBuf;

use gunsight::synth::{write_corpus, SynthCorpus};

fn main() -> gunsight::Result<()> {
    let root = std::env::args_os()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("corpus"));
    let spec = SynthCorpus {
        videos: 80,
        ..SynthCorpus::default()
    };
    let paths = write_corpus(&root, &spec)?;
    println!("images    {}", paths.images.display());
    println!("videos    {}", paths.videos.display());
    println!("detection {}", paths.detection.display());
    Ok(())
}
