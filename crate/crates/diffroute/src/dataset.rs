//! JSON-lines datasets of instances with optional reference routes.
//!
//! One record per line keeps datasets streamable and diffable.  Files are
//! written atomically (temp file + rename) so a crashed run never leaves a
//! half-written dataset behind, and floats round-trip losslessly through
//! serde_json's shortest-representation printing.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::{CvrpInstance, CvrpSolution};

/// One dataset entry: an instance, optionally labelled with routes.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub instance: CvrpInstance,
    pub solution: Option<CvrpSolution>,
}

#[derive(Serialize, Deserialize)]
struct RecordWire {
    depot: [f64; 2],
    coords: Vec<[f64; 2]>,
    demands: Vec<u32>,
    capacity: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    routes: Option<Vec<Vec<usize>>>,
}

/// Read every record, validating instance invariants and, when routes are
/// present, their feasibility; errors carry the 1-based line number.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            file: path.display().to_string(),
            line: idx + 1,
            message,
        };
        let wire: RecordWire =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let instance = CvrpInstance::new(wire.depot, wire.coords, wire.demands, wire.capacity)
            .map_err(|e| parse_err(e.to_string()))?;
        let solution = match wire.routes {
            Some(routes) => {
                let sol = CvrpSolution { routes };
                instance
                    .check_feasible(&sol)
                    .map_err(|e| parse_err(e.to_string()))?;
                Some(sol)
            }
            None => None,
        };
        records.push(DatasetRecord { instance, solution });
    }
    Ok(records)
}

/// Serialise records to JSON lines, atomically replacing `path`.
pub fn write_dataset(path: impl AsRef<Path>, records: &[DatasetRecord]) -> Result<()> {
    let mut body = String::new();
    for rec in records {
        let wire = RecordWire {
            depot: rec.instance.depot,
            coords: rec.instance.coords.clone(),
            demands: rec.instance.demands.clone(),
            capacity: rec.instance.capacity,
            routes: rec.solution.as_ref().map(|s| s.routes.clone()),
        };
        body.push_str(&serde_json::to_string(&wire)?);
        body.push('\n');
    }
    write_atomic(path.as_ref(), body.as_bytes())
}

/// Write bytes to `path` via a sibling temp file and rename, so readers never
/// observe partial content.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    {
        let mut f =
            fs::File::create(&tmp).map_err(|e| Error::io(tmp.display().to_string(), e))?;
        f.write_all(bytes)
            .map_err(|e| Error::io(tmp.display().to_string(), e))?;
        f.sync_all()
            .map_err(|e| Error::io(tmp.display().to_string(), e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}
