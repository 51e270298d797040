//! JSONL and small file helpers shared by the pipeline stages.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{Error, Result};

pub(crate) fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::File {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(file_err(path))?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path).map_err(file_err(path))?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::InvalidArgument(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(file_err(path))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let r = BufReader::new(File::open(path).map_err(file_err(path))?);
    Ok(serde_json::from_reader(r)?)
}

/// Appends JSON lines to a log file.
pub struct JsonlLog {
    w: BufWriter<File>,
}

impl JsonlLog {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            w: BufWriter::new(File::create(path).map_err(file_err(path))?),
        })
    }

    pub fn append<T: Serialize>(&mut self, item: &T) -> Result<()> {
        serde_json::to_writer(&mut self.w, item)?;
        self.w.write_all(b"\n")?;
        self.w.flush()?;
        Ok(())
    }
}
