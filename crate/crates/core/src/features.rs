//! On-disk feature store: one SERT file per manifest entry plus an index.
//!
//! Files are named by a hash of the entry's file name, label, actor and
//! corpus. The split column and the directory part of the path are left out,
//! so re-splitting or relocating a manifest does not invalidate features.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::audio;
use crate::dataset::{resolve_path, EmotionLabel, Manifest, ManifestEntry, Split};
use crate::dsp::FeatureConfig;
use crate::error::{Error, Result};
use crate::tensor::{Dtype, Tensor};

pub const INDEX_FILE: &str = "index.csv";
pub const CONFIG_FILE: &str = "features.txt";

/// Stable file stem for an entry: the first 16 bytes of SHA-256 in hex.
pub fn entry_key(e: &ManifestEntry) -> String {
    let name = Path::new(&e.path).file_name().map_or(e.path.as_str(), |n| n.to_str().unwrap_or(&e.path));
    let row = format!("{},{},{},{}", name, e.label.name(), e.actor_id, e.corpus);
    let digest = Sha256::digest(row.as_bytes());
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Default)]
pub struct ExtractionReport {
    pub written: usize,
    /// Entry path and the error that stopped it.
    pub failures: Vec<(String, Error)>,
}

/// Extracts features for every entry into `out_dir`.
///
/// Per-file failures are collected rather than aborting the run; the index
/// lists only files that were written. `jobs = 0` uses the global pool.
pub fn extract_all(
    manifest: &Manifest,
    manifest_dir: &Path,
    out_dir: &Path,
    cfg: &FeatureConfig,
    jobs: usize,
) -> Result<ExtractionReport> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let work = |entry: &ManifestEntry| -> Result<String> {
        let clip = audio::decode_wav(&resolve_path(manifest_dir, &entry.path))?;
        let features = cfg.extract(&clip)?;
        let file = format!("{}.sert", entry_key(entry));
        let path = out_dir.join(&file);
        fs::write(&path, features.to_sert_bytes(Dtype::F32)).map_err(|e| Error::io(&path, e))?;
        Ok(file)
    };
    let run = || manifest.entries.par_iter().map(work).collect::<Vec<_>>();
    let results = if jobs == 0 {
        run()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?
            .install(run)
    };

    let mut report = ExtractionReport::default();
    let mut index = csv::Writer::from_writer(Vec::new());
    index.write_record(["key", "path", "file"])?;
    for (entry, result) in manifest.entries.iter().zip(results) {
        match result {
            Ok(file) => {
                index.write_record([entry_key(entry).as_str(), entry.path.as_str(), file.as_str()])?;
                report.written += 1;
            }
            Err(e) => {
                log::warn!("{}: {e}", entry.path);
                report.failures.push((entry.path.clone(), e));
            }
        }
    }
    let index_bytes = index
        .into_inner()
        .map_err(|e| Error::InvalidConfig(format!("index buffer: {e}")))?;
    let index_path = out_dir.join(INDEX_FILE);
    fs::write(&index_path, index_bytes).map_err(|e| Error::io(&index_path, e))?;
    let config: String = cfg.describe().iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    let config_path = out_dir.join(CONFIG_FILE);
    fs::write(&config_path, config).map_err(|e| Error::io(&config_path, e))?;
    Ok(report)
}

/// Read side of a features directory.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    pub dir: PathBuf,
    /// Entry key to file name.
    index: HashMap<String, String>,
    /// Contents of `features.txt`.
    pub config: BTreeMap<String, String>,
}

impl FeatureStore {
    pub fn open(dir: &Path) -> Result<Self> {
        let index_path = dir.join(INDEX_FILE);
        let mut reader = csv::Reader::from_path(&index_path)?;
        let mut index = HashMap::new();
        for row in reader.records() {
            let row = row?;
            match (row.get(0), row.get(2)) {
                (Some(k), Some(f)) => {
                    index.insert(k.to_string(), f.to_string());
                }
                _ => return Err(Error::MalformedContainer(format!("{}: short row", index_path.display()))),
            }
        }
        let config_path = dir.join(CONFIG_FILE);
        let text = fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
        let config = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Ok(FeatureStore {
            dir: dir.to_path_buf(),
            index,
            config,
        })
    }

    pub fn kind(&self) -> Option<&str> {
        self.config.get("kind").map(String::as_str)
    }

    pub fn load(&self, entry: &ManifestEntry) -> Result<Tensor> {
        let file = self
            .index
            .get(&entry_key(entry))
            .ok_or_else(|| Error::MissingTensor(format!("features for {}", entry.path)))?;
        Tensor::read_sert(&self.dir.join(file))
    }

    /// Features and labels of one split, in manifest order.
    pub fn load_split(&self, manifest: &Manifest, split: Split) -> Result<Vec<(Tensor, EmotionLabel)>> {
        manifest
            .in_split(split)
            .map(|e| Ok((self.load(e)?, e.label)))
            .collect()
    }
}
