//! Artifact buffers, CSV/JSON encoding and the manifest.

use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::Path;

/// Shortest decimal that parses back to the same `f64`.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub struct CsvTable {
    writer: csv::Writer<Vec<u8>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(header).expect("in-memory write");
        CsvTable { writer }
    }

    pub fn row(&mut self, fields: Vec<String>) {
        self.writer.write_record(&fields).expect("in-memory write");
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.writer.into_inner().expect("in-memory flush")
    }
}

pub fn vec3_fields(v: &graze::Vec3) -> [String; 3] {
    [num(v.x), num(v.y), num(v.z)]
}

pub fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("serializable report");
    out.push(b'\n');
    out
}

/// Files produced by one run, written in order after the run finishes.
#[derive(Default)]
pub struct Artifacts {
    pub files: Vec<(String, Vec<u8>)>,
}

impl Artifacts {
    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }
}

#[derive(Serialize)]
pub struct ManifestEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub experiment: &'static str,
    pub status: &'static str,
    pub config_sha256: String,
    pub constants_sha256: Option<String>,
    pub files: Vec<ManifestEntry>,
}

pub fn write_all(dir: &Path, artifacts: &Artifacts, manifest: &Manifest) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, bytes) in &artifacts.files {
        std::fs::write(dir.join(name), bytes)?;
    }
    std::fs::write(dir.join("manifest.json"), json_bytes(manifest))
}
