//! Stamping outputs with the config hash, seeds and artifact version that
//! produced them.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_params, save_params_with_metadata};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const JSON_KEY: &str = "provenance";
const CSV_PREFIX: &str = "# provenance ";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// sha256 of the canonical TOML of the effective config; the output
    /// directory is blanked first so moving a run does not change it.
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub artifact_version: String,
}

impl Provenance {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let mut canonical = config.clone();
        canonical.out_dir = PathBuf::new();
        let digest = Sha256::digest(canonical.to_toml()?.as_bytes());
        Ok(Self {
            config_hash: digest.iter().map(|b| format!("{b:02x}")).collect(),
            seeds: config.seeds(),
            artifact_version: ARTIFACT_VERSION.to_string(),
        })
    }

    fn compact(&self) -> String {
        serde_json::to_string(self).expect("provenance serializes")
    }

    fn metadata(&self) -> HashMap<String, String> {
        HashMap::from([(JSON_KEY.to_string(), self.compact())])
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

fn with_key(value: serde_json::Value, prov: &Provenance) -> serde_json::Value {
    let stamp = serde_json::to_value(prov).expect("provenance serializes");
    match value {
        serde_json::Value::Object(mut map) => {
            map.insert(JSON_KEY.into(), stamp);
            serde_json::Value::Object(map)
        }
        other => serde_json::json!({ JSON_KEY: stamp, "data": other }),
    }
}

/// Pretty JSON with a top-level `provenance` object. Non-object values are
/// wrapped under `data`.
pub fn write_json(path: &Path, value: &impl Serialize, prov: &Provenance) -> Result<()> {
    let value = serde_json::to_value(value).map_err(|e| Error::validation(e.to_string()))?;
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(&with_key(value, prov)).expect("json value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// CSV text behind a single `# provenance {...}` comment line.
pub fn write_csv(path: &Path, body: &str, prov: &Provenance) -> Result<()> {
    write_commented(path, body, prov)
}

/// TOML text behind the same comment line as [`write_csv`].
pub fn write_toml(path: &Path, body: &str, prov: &Provenance) -> Result<()> {
    write_commented(path, body, prov)
}

fn write_commented(path: &Path, body: &str, prov: &Provenance) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, format!("{CSV_PREFIX}{}\n{body}", prov.compact())).map_err(|e| Error::io(path, e))
}

/// 8-bit RGB PNG carrying the provenance as a tEXt chunk.
pub fn write_png(path: &Path, width: u32, height: u32, rgb: &[u8], prov: &Provenance) -> Result<()> {
    encode_png(path, width, height, png::ColorType::Rgb, png::BitDepth::Eight, rgb, prov)
}

fn encode_png(
    path: &Path,
    width: u32,
    height: u32,
    color: png::ColorType,
    depth: png::BitDepth,
    data: &[u8],
    prov: &Provenance,
) -> Result<()> {
    ensure_parent(path)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width, height);
    enc.set_color(color);
    enc.set_depth(depth);
    let bad = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    enc.add_text_chunk(JSON_KEY.into(), prov.compact()).map_err(bad)?;
    let mut writer = enc.write_header().map_err(bad)?;
    writer.write_image_data(data).map_err(bad)?;
    writer.finish().map_err(bad)
}

fn restamp_png(path: &Path, prov: &Provenance) -> Result<()> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: png::DecodingError| Error::Ingest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut reader = png::Decoder::new(file).read_info().map_err(bad)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    buf.truncate(info.buffer_size());
    encode_png(path, info.width, info.height, info.color_type, info.bit_depth, &buf, prov)
}

fn restamp_json(path: &Path, prov: &Provenance) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })?;
    write_json(path, &value, prov)
}

fn restamp_commented(path: &Path, prov: &Provenance) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let body = match text.strip_prefix(CSV_PREFIX) {
        Some(rest) => rest.split_once('\n').map_or("", |(_, b)| b),
        None => &text,
    };
    write_commented(path, body, prov)
}

/// Embed `prov` in an existing output file, replacing any earlier stamp.
/// Directories are walked recursively; unknown extensions are left alone.
pub fn stamp(path: &Path, prov: &Provenance) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        return entries.iter().try_for_each(|p| stamp(p, prov));
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => restamp_json(path, prov),
        Some("csv" | "toml") => restamp_commented(path, prov),
        Some("png") => restamp_png(path, prov),
        Some("safetensors") => {
            let params = load_params(path)?;
            save_params_with_metadata(path, &params, Some(prov.metadata()))
        }
        _ => Ok(()),
    }
}

/// Provenance recovered from a stamped file, if any.
pub fn read_stamp(path: &Path) -> Result<Option<Provenance>> {
    let parse = |s: &str| serde_json::from_str(s).ok();
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let v: serde_json::Value = serde_json::from_str(&text).unwrap_or_default();
            Ok(v.get(JSON_KEY).and_then(|p| serde_json::from_value(p.clone()).ok()))
        }
        Some("csv" | "toml") => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Ok(text
                .strip_prefix(CSV_PREFIX)
                .and_then(|r| r.lines().next())
                .and_then(parse))
        }
        Some("png") => {
            let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
            let reader = png::Decoder::new(file).read_info().map_err(|e| Error::Ingest {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
            Ok(reader
                .info()
                .uncompressed_latin1_text
                .iter()
                .find(|t| t.keyword == JSON_KEY)
                .and_then(|t| parse(&t.text)))
        }
        Some("safetensors") => Ok(crate::checkpoint::read_metadata(path)?
            .get(JSON_KEY)
            .and_then(|s| parse(s))),
        _ => Ok(None),
    }
}

/// Drop the top-level `provenance` key from a JSON document.
pub fn strip_json(text: &str) -> Option<serde_json::Value> {
    let mut v: serde_json::Value = serde_json::from_str(text).ok()?;
    v.as_object_mut()?.remove(JSON_KEY);
    Some(v)
}
