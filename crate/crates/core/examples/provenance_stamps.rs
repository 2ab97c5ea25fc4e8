//! Stamp outputs with the config hash, seeds and artifact version, then read
//! the stamps back.
//!
//! cargo run -p gunsight --example provenance_stamps -- stamped

use std::path::PathBuf;

use gunsight::config::ExperimentConfig;
use gunsight::provenance::{read_stamp, write_csv, write_json, Provenance};

fn main() -> gunsight::Result<()> {
    let dir = std::env::args_os().nth(1).map(PathBuf::from).unwrap_or_else(|| "stamped".into());
    let cfg = ExperimentConfig::from_toml("seed = 3\n[data]\nframes_per_video = 8\n")?;
    let prov = Provenance::new(&cfg)?;
    println!("config hash {}", prov.config_hash);
    println!("seeds {:?}", prov.seeds);

    let json = dir.join("result.json");
    write_json(&json, &serde_json::json!({ "accuracy": 0.95 }), &prov)?;
    let csv = dir.join("table.csv");
    write_csv(&csv, "name,value\naccuracy,0.95\n", &prov)?;
    for path in [json, csv] {
        let back = read_stamp(&path)?.expect("stamped file");
        println!("{}: version {} hash matches {}", path.display(), back.artifact_version, back == prov);
    }
    Ok(())
}
