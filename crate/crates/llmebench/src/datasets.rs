//! Dataset descriptions, loading, validation, and auto-download.
//!
//! A [`DatasetSpec`] names where a dataset lives (local path or URL), its
//! serialization format, and how its columns map onto the canonical
//! `input` / `label` / `id` fields. [`load_dataset`] turns a local file
//! into `DataSample`s; [`fetch_and_cache`] materializes remote datasets
//! into a content-checked local cache, extracting archives as needed.

use std::collections::HashSet;
use std::io::Read;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::types::DataSample;

pub const DATASET_META_SCHEMA_VERSION: u32 = 1;

/// Serialization format of a dataset file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Tsv,
    Json,
    Jsonl,
}

impl DataFormat {
    pub fn as_str(&self) -> &'static str {
        match self {
            DataFormat::Csv => "csv",
            DataFormat::Tsv => "tsv",
            DataFormat::Json => "json",
            DataFormat::Jsonl => "jsonl",
        }
    }
}

/// Descriptive metadata carried alongside a dataset for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    #[serde(default)]
    pub citation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub homepage: Option<String>,
    #[serde(default = "default_languages")]
    pub languages: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub license: Option<String>,
}

fn default_languages() -> Vec<String> {
    vec!["en".to_string()]
}

impl Default for DatasetMetadata {
    fn default() -> Self {
        Self {
            citation: String::new(),
            homepage: None,
            languages: default_languages(),
            license: None,
        }
    }
}

/// Where a dataset lives and how to interpret it.
///
/// `field_map` maps the canonical keys `input`, `label`, and `id` to the
/// dataset's own column names. Unmapped columns are preserved as sample
/// extras. `location` is either a local path (absolute, or relative to the
/// recipe file) or a URL; a URL location implies `download_url`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(default)]
    pub name: String,
    pub format: DataFormat,
    pub location: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub download_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checksum: Option<String>,
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    pub field_map: IndexMap<String, String>,
    #[serde(default, skip_serializing_if = "is_default_metadata")]
    pub metadata: DatasetMetadata,
}

fn is_default_metadata(metadata: &DatasetMetadata) -> bool {
    *metadata == DatasetMetadata::default()
}

const CANONICAL_FIELDS: [&str; 3] = ["input", "label", "id"];

impl DatasetSpec {
    pub fn local(name: &str, format: DataFormat, location: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            format,
            location: location.into(),
            download_url: None,
            checksum: None,
            field_map: IndexMap::new(),
            metadata: DatasetMetadata::default(),
        }
    }

    /// The dataset name, defaulting to the file stem of `location`.
    pub fn effective_name(&self) -> String {
        if !self.name.is_empty() {
            return self.name.clone();
        }
        location_file_name(&self.location)
            .map(|f| {
                f.split('.')
                    .next()
                    .filter(|s| !s.is_empty())
                    .unwrap_or(f)
                    .to_string()
            })
            .unwrap_or_else(|| "dataset".to_string())
    }

    /// Whether the dataset must be downloaded before it can be read.
    pub fn is_remote(&self) -> bool {
        self.download_url.is_some() || is_url(&self.location)
    }

    /// The URL to download, whether given explicitly or as the location.
    pub fn effective_download_url(&self) -> Option<&str> {
        if let Some(url) = &self.download_url {
            Some(url.as_str())
        } else if is_url(&self.location) {
            Some(self.location.as_str())
        } else {
            None
        }
    }

    /// Identity tuple used to tell datasets apart (e.g. train vs test).
    pub fn identity(&self) -> (String, &'static str, &str) {
        (self.effective_name(), self.format.as_str(), &self.location)
    }

    /// Source column name for a canonical field, after mapping.
    fn source_field<'a>(&'a self, canonical: &'a str) -> &'a str {
        self.field_map
            .get(canonical)
            .map(String::as_str)
            .unwrap_or(canonical)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        for key in self.field_map.keys() {
            if !CANONICAL_FIELDS.contains(&key.as_str()) {
                return Err(DatasetError::Schema {
                    path: self.location.clone(),
                    line: 0,
                    message: format!("field_map key {key:?} is not one of {CANONICAL_FIELDS:?}"),
                });
            }
        }
        if let Some(checksum) = &self.checksum {
            let ok = checksum.len() == 64 && checksum.chars().all(|c| c.is_ascii_hexdigit());
            if !ok {
                return Err(DatasetError::Schema {
                    path: self.location.clone(),
                    line: 0,
                    message: "checksum must be a 64-character sha256 hex string".to_string(),
                });
            }
        }
        Ok(())
    }
}

pub fn is_url(location: &str) -> bool {
    location.starts_with("http://") || location.starts_with("https://")
}

fn location_file_name(location: &str) -> Option<&str> {
    let trimmed = location.split(['?', '#']).next().unwrap_or(location);
    trimmed
        .rsplit('/')
        .next()
        .filter(|s| !s.is_empty())
        .or(Some(trimmed))
        .filter(|s| !s.is_empty())
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: parse error at line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: schema error at line {line}: {message}")]
    Schema {
        path: String,
        line: usize,
        message: String,
    },
    #[error("dataset {name} produced no samples")]
    Empty { name: String },
    #[error("download failed for {url}: {message}")]
    Network { url: String, message: String },
    #[error("checksum mismatch for {url}: expected {expected}, got {actual}")]
    ChecksumMismatch {
        url: String,
        expected: String,
        actual: String,
    },
    #[error("archive extraction failed for {path}: {message}")]
    Extraction { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Load and validate a local dataset file, keeping at most `limit` samples.
///
/// `spec.location` must already point at a readable file; remote datasets
/// go through [`fetch_and_cache`] first.
pub fn load_dataset(
    spec: &DatasetSpec,
    limit: Option<usize>,
) -> Result<Vec<DataSample>, DatasetError> {
    spec.validate()?;
    let path = Path::new(&spec.location);
    let contents = std::fs::read_to_string(path).map_err(|e| DatasetError::Network {
        url: spec.location.clone(),
        message: format!("cannot read dataset file: {e}"),
    })?;

    let records = match spec.format {
        DataFormat::Csv => parse_delimited(&spec.location, &contents, b',', true)?,
        DataFormat::Tsv => parse_delimited(&spec.location, &contents, b'\t', false)?,
        DataFormat::Json => parse_json_array(&spec.location, &contents)?,
        DataFormat::Jsonl => parse_jsonl(&spec.location, &contents)?,
    };

    let mut samples = Vec::new();
    let mut seen_ids = HashSet::new();
    for (row_index, (line, record)) in records.into_iter().enumerate() {
        if let Some(limit) = limit {
            if samples.len() >= limit {
                break;
            }
        }
        let sample = record_to_sample(spec, line, row_index, record)?;
        if !seen_ids.insert(sample.sample_id.clone()) {
            return Err(DatasetError::Schema {
                path: spec.location.clone(),
                line,
                message: format!("duplicate sample id {:?}", sample.sample_id),
            });
        }
        samples.push(sample);
    }

    if samples.is_empty() {
        return Err(DatasetError::Empty {
            name: spec.effective_name(),
        });
    }
    Ok(samples)
}

type RawRecord = IndexMap<String, String>;

fn parse_delimited(
    path: &str,
    contents: &str,
    delimiter: u8,
    quoting: bool,
) -> Result<Vec<(usize, RawRecord)>, DatasetError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .quoting(quoting)
        .flexible(false)
        .from_reader(contents.as_bytes());

    let headers = reader
        .headers()
        .map_err(|e| DatasetError::Parse {
            path: path.to_string(),
            line: 1,
            message: e.to_string(),
        })?
        .clone();

    let mut records = Vec::new();
    for result in reader.records() {
        let record = result.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            DatasetError::Parse {
                path: path.to_string(),
                line,
                message: e.to_string(),
            }
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let mut map = IndexMap::new();
        for (header, value) in headers.iter().zip(record.iter()) {
            map.insert(header.to_string(), value.to_string());
        }
        records.push((line, map));
    }
    Ok(records)
}

fn parse_json_array(path: &str, contents: &str) -> Result<Vec<(usize, RawRecord)>, DatasetError> {
    let values: Vec<IndexMap<String, serde_json::Value>> =
        serde_json::from_str(contents).map_err(|e| DatasetError::Parse {
            path: path.to_string(),
            line: e.line(),
            message: format!("expected a top-level array of objects: {e}"),
        })?;
    let mut records = Vec::new();
    for (i, object) in values.into_iter().enumerate() {
        records.push((i + 1, json_object_to_record(path, i + 1, object)?));
    }
    Ok(records)
}

fn parse_jsonl(path: &str, contents: &str) -> Result<Vec<(usize, RawRecord)>, DatasetError> {
    let mut records = Vec::new();
    for (i, raw_line) in contents.lines().enumerate() {
        let line = i + 1;
        if raw_line.trim().is_empty() {
            continue;
        }
        let object: IndexMap<String, serde_json::Value> =
            serde_json::from_str(raw_line).map_err(|e| DatasetError::Parse {
                path: path.to_string(),
                line,
                message: e.to_string(),
            })?;
        records.push((line, json_object_to_record(path, line, object)?));
    }
    Ok(records)
}

fn json_object_to_record(
    path: &str,
    line: usize,
    object: IndexMap<String, serde_json::Value>,
) -> Result<RawRecord, DatasetError> {
    let mut record = IndexMap::new();
    for (key, value) in object {
        let text = match value {
            serde_json::Value::String(s) => s,
            serde_json::Value::Number(n) => n.to_string(),
            serde_json::Value::Bool(b) => b.to_string(),
            serde_json::Value::Null => continue,
            other => {
                return Err(DatasetError::Schema {
                    path: path.to_string(),
                    line,
                    message: format!("field {key:?} has unsupported non-scalar value {other}"),
                })
            }
        };
        record.insert(key, text);
    }
    Ok(record)
}

fn record_to_sample(
    spec: &DatasetSpec,
    line: usize,
    row_index: usize,
    mut record: RawRecord,
) -> Result<DataSample, DatasetError> {
    let schema_err = |message: String| DatasetError::Schema {
        path: spec.location.clone(),
        line,
        message,
    };

    let input_field = spec.source_field("input");
    let input = record
        .shift_remove(input_field)
        .ok_or_else(|| schema_err(format!("missing input field {input_field:?}")))?;
    if input.is_empty() {
        return Err(schema_err(format!("empty input field {input_field:?}")));
    }

    let label_field = spec.source_field("label");
    let label = record
        .shift_remove(label_field)
        .ok_or_else(|| schema_err(format!("missing label field {label_field:?}")))?;
    if label.is_empty() {
        return Err(schema_err(format!("empty label field {label_field:?}")));
    }

    let sample_id = if let Some(id_field) = spec.field_map.get("id") {
        record
            .shift_remove(id_field.as_str())
            .filter(|id| !id.is_empty())
            .ok_or_else(|| schema_err(format!("missing id field {id_field:?}")))?
    } else if let Some(id) = record.shift_remove("id").filter(|id| !id.is_empty()) {
        id
    } else {
        format!("{row_index:06}")
    };

    let mut input_map = IndexMap::new();
    input_map.insert("input".to_string(), input);

    Ok(DataSample {
        sample_id,
        input: input_map,
        label,
        extras: record,
    })
}

/// Serialize samples to JSON Lines with canonical field names, one object
/// per line. Round-trips through [`load_dataset`] with an identity mapping.
pub fn samples_to_jsonl(samples: &[DataSample]) -> String {
    let mut out = String::new();
    for sample in samples {
        let mut object = serde_json::Map::new();
        object.insert(
            "id".to_string(),
            serde_json::Value::String(sample.sample_id.clone()),
        );
        for (key, value) in &sample.input {
            object.insert(key.clone(), serde_json::Value::String(value.clone()));
        }
        object.insert(
            "label".to_string(),
            serde_json::Value::String(sample.label.clone()),
        );
        for (key, value) in &sample.extras {
            object.insert(key.clone(), serde_json::Value::String(value.clone()));
        }
        out.push_str(&serde_json::Value::Object(object).to_string());
        out.push('\n');
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct FetchMeta {
    schema_version: u32,
    source_url: String,
    checksum: String,
    fetched_at: u64,
    /// Path of the primary file, relative to the dataset directory.
    resolved: String,
}

/// Resolve a possibly-remote dataset into a local file path.
///
/// Local locations are resolved against `base_dir` and returned as-is;
/// remote ones are downloaded into `cache_root` via [`fetch_and_cache`].
pub fn resolve_dataset(
    spec: &DatasetSpec,
    base_dir: &Path,
    cache_root: &Path,
) -> Result<PathBuf, DatasetError> {
    if spec.is_remote() {
        return fetch_and_cache(spec, cache_root);
    }
    let location = Path::new(&spec.location);
    if location.is_absolute() {
        return Ok(location.to_path_buf());
    }
    Ok(base_dir.join(location))
}

/// Download a remote dataset into `cache_root` and return the path of its
/// primary file. Subsequent calls reuse the cached copy without touching
/// the network. Archives (`.zip`, `.tar.gz`, `.tgz`) are extracted; the
/// spec's `location` then names the file inside the archive.
///
/// Installation is atomic: payloads are staged in a temp directory and
/// renamed into place, so concurrent fetchers and crashes never leave a
/// half-written dataset behind.
pub fn fetch_and_cache(spec: &DatasetSpec, cache_root: &Path) -> Result<PathBuf, DatasetError> {
    let url = spec
        .effective_download_url()
        .ok_or_else(|| DatasetError::Network {
            url: spec.location.clone(),
            message: "dataset has no download URL".to_string(),
        })?
        .to_string();

    let name = spec.effective_name();
    let dataset_dir = cache_root.join(&name);
    let meta_path = cache_root.join(format!("{name}.meta.json"));

    if let Some(existing) = cached_file(&dataset_dir, &meta_path) {
        return Ok(existing);
    }

    std::fs::create_dir_all(cache_root)?;

    let bytes = download(&url)?;
    let actual_checksum = sha256_hex(&bytes);
    if let Some(expected) = &spec.checksum {
        if !expected.eq_ignore_ascii_case(&actual_checksum) {
            // Never install a corrupt copy; drop any stale cache as well.
            let _ = std::fs::remove_dir_all(&dataset_dir);
            let _ = std::fs::remove_file(&meta_path);
            return Err(DatasetError::ChecksumMismatch {
                url,
                expected: expected.clone(),
                actual: actual_checksum,
            });
        }
    }

    let staging = tempfile::tempdir_in(cache_root)?;
    let payload_dir = staging.path().join("payload");
    std::fs::create_dir(&payload_dir)?;

    let file_name = location_file_name(&url).unwrap_or("download").to_string();
    let resolved = if is_archive(&file_name) {
        extract_archive(&file_name, &bytes, &payload_dir)?;
        resolve_inside(spec, &url, &payload_dir)?
    } else {
        std::fs::write(payload_dir.join(&file_name), &bytes)?;
        if is_url(&spec.location) {
            file_name
        } else {
            resolve_inside(spec, &url, &payload_dir)?
        }
    };

    match std::fs::rename(&payload_dir, &dataset_dir) {
        Ok(()) => {}
        // Another fetcher may have installed the dataset concurrently.
        Err(e) if dataset_dir.is_dir() => {
            log::debug!("dataset {name} already installed ({e}); reusing it");
        }
        Err(e) => return Err(e.into()),
    }

    let meta = FetchMeta {
        schema_version: DATASET_META_SCHEMA_VERSION,
        source_url: url,
        checksum: actual_checksum,
        fetched_at: crate::types::unix_timestamp(),
        resolved: resolved.clone(),
    };
    let tmp = tempfile::NamedTempFile::new_in(cache_root)?;
    serde_json::to_writer_pretty(&tmp, &meta).map_err(std::io::Error::other)?;
    tmp.persist(&meta_path).map_err(|e| e.error)?;

    Ok(dataset_dir.join(resolved))
}

fn cached_file(dataset_dir: &Path, meta_path: &Path) -> Option<PathBuf> {
    let meta_raw = std::fs::read_to_string(meta_path).ok()?;
    let meta: FetchMeta = serde_json::from_str(&meta_raw).ok()?;
    let file = dataset_dir.join(meta.resolved);
    file.is_file().then_some(file)
}

fn download(url: &str) -> Result<Vec<u8>, DatasetError> {
    let network_err = |message: String| DatasetError::Network {
        url: url.to_string(),
        message,
    };
    let client = reqwest::blocking::Client::builder()
        .timeout(std::time::Duration::from_secs(120))
        .build()
        .map_err(|e| network_err(e.to_string()))?;
    let response = client
        .get(url)
        .send()
        .map_err(|e| network_err(e.to_string()))?;
    if !response.status().is_success() {
        return Err(network_err(format!("HTTP {}", response.status().as_u16())));
    }
    let bytes = response.bytes().map_err(|e| network_err(e.to_string()))?;
    Ok(bytes.to_vec())
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

fn is_archive(file_name: &str) -> bool {
    file_name.ends_with(".zip") || file_name.ends_with(".tar.gz") || file_name.ends_with(".tgz")
}

fn extract_archive(file_name: &str, bytes: &[u8], target: &Path) -> Result<(), DatasetError> {
    let extraction_err = |message: String| DatasetError::Extraction {
        path: file_name.to_string(),
        message,
    };

    if file_name.ends_with(".zip") {
        let reader = std::io::Cursor::new(bytes);
        let mut archive =
            zip::ZipArchive::new(reader).map_err(|e| extraction_err(e.to_string()))?;
        for i in 0..archive.len() {
            let mut entry = archive
                .by_index(i)
                .map_err(|e| extraction_err(e.to_string()))?;
            let Some(rel) = entry.enclosed_name() else {
                return Err(extraction_err(format!(
                    "entry {:?} escapes the extraction directory",
                    entry.name()
                )));
            };
            let out_path = target.join(rel);
            if entry.is_dir() {
                std::fs::create_dir_all(&out_path)?;
                continue;
            }
            if let Some(parent) = out_path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            let mut contents = Vec::new();
            entry.read_to_end(&mut contents)?;
            std::fs::write(&out_path, contents)?;
        }
        return Ok(());
    }

    let gz = flate2::read::GzDecoder::new(bytes);
    let mut archive = tar::Archive::new(gz);
    archive
        .unpack(target)
        .map_err(|e| extraction_err(e.to_string()))?;
    Ok(())
}

fn resolve_inside(
    spec: &DatasetSpec,
    url: &str,
    payload_dir: &Path,
) -> Result<String, DatasetError> {
    if !is_url(&spec.location) {
        let rel = spec.location.clone();
        if payload_dir.join(&rel).is_file() {
            return Ok(rel);
        }
        return Err(DatasetError::Extraction {
            path: url.to_string(),
            message: format!("archive does not contain {rel:?}"),
        });
    }
    // Location is the archive URL itself: unambiguous only for a
    // single-file payload.
    let files = list_files(payload_dir)?;
    match files.as_slice() {
        [single] => Ok(single.clone()),
        _ => Err(DatasetError::Extraction {
            path: url.to_string(),
            message: format!(
                "archive contains {} files; set location to the file path inside the archive",
                files.len()
            ),
        }),
    }
}

fn list_files(dir: &Path) -> Result<Vec<String>, DatasetError> {
    fn walk(dir: &Path, base: &Path, out: &mut Vec<String>) -> std::io::Result<()> {
        let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let path = entry.path();
            if path.is_dir() {
                walk(&path, base, out)?;
            } else {
                let rel = path.strip_prefix(base).unwrap_or(&path);
                out.push(rel.to_string_lossy().replace('\\', "/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}
