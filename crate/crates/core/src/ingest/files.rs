//! Catalog and Eset file formats.
//!
//! `<dir>/<unit>/<t>.cat`: one comma-separated row per object,
//! `oid,x,y,t,d1..dm`, no header.
//! `<dir>/<unit>/<t>.eset`: a `t=<t>` header line, then one oid per line.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::domain::{CatalogTuple, Cycle, Eset};
use crate::error::IngestError;

use super::CycleBatch;

pub fn catalog_path(dir: &Path, unit: u32, t: Cycle) -> PathBuf {
    dir.join(unit.to_string()).join(format!("{t}.cat"))
}

pub fn eset_path(dir: &Path, unit: u32, t: Cycle) -> PathBuf {
    dir.join(unit.to_string()).join(format!("{t}.eset"))
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn bad(path: &Path, why: impl Into<String>) -> IngestError {
    IngestError::BadFile {
        path: path.display().to_string(),
        why: why.into(),
    }
}

pub fn write_catalog(path: &Path, rows: &[CatalogTuple]) -> Result<(), IngestError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(io(path))?);
    for row in rows {
        writeln!(w, "{}", row.to_row()).map_err(io(path))?;
    }
    w.flush().map_err(io(path))
}

pub fn read_catalog(path: &Path) -> Result<Vec<CatalogTuple>, IngestError> {
    let reader = BufReader::new(File::open(path).map_err(io(path))?);
    let mut rows = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = CatalogTuple::parse_row(&line)
            .map_err(|e| bad(path, format!("line {}: {e}", n + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_eset(path: &Path, eset: &Eset) -> Result<(), IngestError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(io(path))?);
    writeln!(w, "t={}", eset.t).map_err(io(path))?;
    for oid in &eset.oids {
        writeln!(w, "{oid}").map_err(io(path))?;
    }
    w.flush().map_err(io(path))
}

pub fn read_eset(path: &Path) -> Result<Eset, IngestError> {
    let reader = BufReader::new(File::open(path).map_err(io(path))?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| bad(path, "missing t= header"))?
        .map_err(io(path))?;
    let t = header
        .trim()
        .strip_prefix("t=")
        .and_then(|v| v.trim().parse::<Cycle>().ok())
        .ok_or_else(|| bad(path, format!("bad header {header:?}")))?;
    let mut oids = Vec::new();
    for line in lines {
        let line = line.map_err(io(path))?;
        let oid = line.trim();
        if !oid.is_empty() {
            oids.push(oid.to_string());
        }
    }
    Ok(Eset { t, oids })
}

pub fn write_cycle(dir: &Path, batch: &CycleBatch) -> Result<(PathBuf, PathBuf), IngestError> {
    let cat = catalog_path(dir, batch.unit, batch.t);
    let es = eset_path(dir, batch.unit, batch.t);
    write_catalog(&cat, &batch.catalog)?;
    write_eset(&es, &batch.eset)?;
    Ok((cat, es))
}

pub fn load_cycle(dir: &Path, unit: u32, t: Cycle) -> Result<CycleBatch, IngestError> {
    let catalog = read_catalog(&catalog_path(dir, unit, t))?;
    let eset_file = eset_path(dir, unit, t);
    let eset = read_eset(&eset_file)?;
    if eset.t != t {
        return Err(bad(&eset_file, format!("header says t={}, file name says {t}", eset.t)));
    }
    Ok(CycleBatch {
        unit,
        t,
        catalog,
        eset,
    })
}

/// Cycles present per unit directory, in ascending order.
pub fn discover(dir: &Path) -> Result<BTreeMap<u32, Vec<Cycle>>, IngestError> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(io(dir))? {
        let entry = entry.map_err(io(dir))?;
        let Some(unit) = entry.file_name().to_str().and_then(|s| s.parse::<u32>().ok()) else {
            continue;
        };
        if !entry.path().is_dir() {
            continue;
        }
        let unit_dir = entry.path();
        let mut cycles = Vec::new();
        for f in fs::read_dir(&unit_dir).map_err(io(&unit_dir))? {
            let name = f.map_err(io(&unit_dir))?.file_name();
            if let Some(t) = name
                .to_str()
                .and_then(|n| n.strip_suffix(".cat"))
                .and_then(|n| n.parse::<Cycle>().ok())
            {
                cycles.push(t);
            }
        }
        cycles.sort_unstable();
        out.insert(unit, cycles);
    }
    Ok(out)
}
