// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run directories: provenance stamping, atomic writes and cached artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::Stage;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

/// Run manifest written first into every run directory.
pub const RUN_FILE: &str = "run.json";

/// Provenance carried by every JSON, JSON-lines and CSV output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
}

/// A JSON document with its provenance stamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    #[serde(flatten)]
    pub stamp: Stamp,
    #[serde(flatten)]
    pub body: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunManifest {
    run_id: String,
    config: serde_json::Value,
}

/// An output directory bound to one configuration hash.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
    stamp: Stamp,
}

impl RunDir {
    /// Open or create `root` for `config`.
    ///
    /// An existing directory is reused when it was created for the same
    /// config hash. A directory holding another run, or unrelated files, is
    /// only replaced when `force` is set.
    pub fn open(config: &ExperimentConfig, root: &Path, force: bool) -> Result<Self> {
        let stamp = Stamp {
            config_hash: config.hash()?,
            seeds: config.seeds(),
        };
        let dir = Self {
            root: root.to_path_buf(),
            stamp,
        };
        let manifest = root.join(RUN_FILE);
        let occupied = root.exists() && fs::read_dir(root)?.next().is_some();
        if occupied {
            let same = match fs::read_to_string(&manifest) {
                Ok(text) => serde_json::from_str::<Stamped<RunManifest>>(&text)
                    .map(|m| m.stamp.config_hash == dir.stamp.config_hash)
                    .unwrap_or(false),
                Err(_) => false,
            };
            if same {
                return Ok(dir);
            }
            if !force {
                return Err(Error::RunDirConflict(root.display().to_string()));
            }
            fs::remove_dir_all(root)?;
        }
        fs::create_dir_all(root)?;
        let body = RunManifest {
            run_id: config.run_id.clone(),
            config: serde_json::from_str(&config.canonical_json()?)?,
        };
        dir.write_json(RUN_FILE, &body)?;
        Ok(dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn stamp(&self) -> &Stamp {
        &self.stamp
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn exists(&self, name: &str) -> bool {
        self.path(name).exists()
    }

    /// Fail with the stage that should have produced `name` when it is missing.
    pub fn require(&self, name: &str, producer: Stage) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::stage(producer.name(), format!("missing artifact {name}")))
        }
    }

    /// Write through a temporary file so a crash never leaves a partial artifact.
    fn write_atomic(&self, name: &str, fill: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>) -> Result<()> {
        let tmp = self.path(&format!("{name}.tmp"));
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            fill(&mut w)?;
            w.flush()?;
        }
        fs::rename(&tmp, self.path(name))?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, name: &str, body: &T) -> Result<()> {
        let doc = Stamped {
            stamp: self.stamp.clone(),
            body,
        };
        self.write_atomic(name, |w| {
            serde_json::to_writer_pretty(&mut *w, &doc)?;
            w.write_all(b"\n")?;
            Ok(())
        })
    }

    pub fn read_json<T: DeserializeOwned>(&self, name: &str, producer: Stage) -> Result<T> {
        let text = fs::read_to_string(self.require(name, producer)?)?;
        let doc: Stamped<T> = serde_json::from_str(&text)?;
        self.check_stamp(name, &doc.stamp)?;
        Ok(doc.body)
    }

    fn check_stamp(&self, name: &str, stamp: &Stamp) -> Result<()> {
        if stamp.config_hash != self.stamp.config_hash {
            return Err(Error::CorruptFile(format!("{name} was produced by another config")));
        }
        Ok(())
    }

    /// JSON lines: a stamp header, then one record per line.
    pub fn write_jsonl<T: Serialize>(&self, name: &str, records: &[T]) -> Result<()> {
        self.write_atomic(name, |w| {
            serde_json::to_writer(&mut *w, &self.stamp)?;
            w.write_all(b"\n")?;
            for r in records {
                serde_json::to_writer(&mut *w, r)?;
                w.write_all(b"\n")?;
            }
            Ok(())
        })
    }

    pub fn read_jsonl<T: DeserializeOwned>(&self, name: &str, producer: Stage) -> Result<Vec<T>> {
        read_jsonl_file(&self.require(name, producer)?).and_then(|(stamp, rows)| {
            self.check_stamp(name, &stamp)?;
            Ok(rows)
        })
    }

    /// CSV with a leading `# config_hash=… seeds=…` comment line.
    pub fn write_csv(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let seeds: Vec<String> = self.stamp.seeds.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let comment = format!("# config_hash={} seeds={}\n", self.stamp.config_hash, seeds.join(","));
        self.write_atomic(name, |w| {
            w.write_all(comment.as_bytes())?;
            let mut csv = csv::Writer::from_writer(&mut *w);
            csv.write_record(header).map_err(csv_err)?;
            for r in rows {
                csv.write_record(r).map_err(csv_err)?;
            }
            csv.flush()?;
            Ok(())
        })
    }

    pub fn write_checkpoint(&self, name: &str, ckpt: &Checkpoint) -> Result<()> {
        let bytes = ckpt.to_bytes()?;
        self.write_atomic(name, |w| Ok(w.write_all(&bytes)?))
    }

    pub fn read_checkpoint(&self, name: &str, producer: Stage) -> Result<Checkpoint> {
        Checkpoint::load(&self.require(name, producer)?)
    }

    pub fn write_with(&self, name: &str, fill: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
        self.write_atomic(name, |w| fill(w))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Parse a stamped JSON-lines file.
pub fn read_jsonl_file<T: DeserializeOwned>(path: &Path) -> Result<(Stamp, Vec<T>)> {
    let mut lines = BufReader::new(fs::File::open(path)?).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::CorruptFile(format!("{} is empty", path.display())))??;
    let stamp: Stamp = serde_json::from_str(&header)?;
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if !line.trim().is_empty() {
            rows.push(serde_json::from_str(&line)?);
        }
    }
    Ok((stamp, rows))
}
