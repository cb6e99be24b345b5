//! Reader for CVRP benchmark files in the classic TSPLIB layout.
//!
//! Benchmarks use arbitrary coordinate ranges, so parsed instances are
//! rescaled into the unit square with a single uniform scale factor (the
//! larger coordinate span); the original geometry and the transform are kept
//! so objective values can be mapped back to benchmark units.  Node 1 of the
//! file is required to be the depot.  When a sibling `.sol` file with a
//! `Cost` line exists, its value is reported as the known optimum.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::instance::CvrpInstance;

/// A parsed benchmark instance together with its original geometry.
#[derive(Debug, Clone)]
pub struct BenchmarkInstance {
    /// Instance name from the NAME field (file stem if absent).
    pub name: String,
    /// DIMENSION field: node count including the depot.
    pub dimension: usize,
    /// Instance rescaled into the unit square.
    pub instance: CvrpInstance,
    /// Depot coordinates exactly as given in the file.
    pub original_depot: [f64; 2],
    /// Customer coordinates exactly as given in the file.
    pub original_coords: Vec<[f64; 2]>,
    /// Uniform scale applied to map originals into the unit square.
    pub scale: f64,
    /// Coordinate offset subtracted before scaling.
    pub offset: [f64; 2],
    /// Best known objective from a sidecar solution file, in original units.
    pub optimum: Option<f64>,
}

impl BenchmarkInstance {
    /// Convert a unit-square tour length back into original benchmark units.
    pub fn to_original_units(&self, unit_length: f64) -> f64 {
        unit_length * self.scale
    }
}

/// Parse a TSPLIB-format CVRP file; looks for `<path with .sol extension>`
/// to pick up the best known cost.
pub fn parse_cvrplib(path: impl AsRef<Path>) -> Result<BenchmarkInstance> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let file_name = path.display().to_string();
    let mut parsed = parse_text(&text, &file_name)?;
    let sol_path = path.with_extension("sol");
    if sol_path.exists() {
        parsed.optimum = parse_sidecar_cost(&sol_path)?;
    }
    Ok(parsed)
}

fn parse_text(text: &str, file: &str) -> Result<BenchmarkInstance> {
    let err = |line: usize, message: String| Error::Parse {
        file: file.to_string(),
        line,
        message,
    };

    let mut name = None;
    let mut dimension = None;
    let mut capacity = None;
    let mut edge_weight_type = None;
    let mut coords: Vec<Option<[f64; 2]>> = Vec::new();
    let mut demands: Vec<Option<u64>> = Vec::new();
    let mut depot_nodes: Vec<i64> = Vec::new();

    #[derive(PartialEq)]
    enum Section {
        Header,
        Coords,
        Demands,
        Depot,
        Done,
    }
    let mut section = Section::Header;

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let keyword = line.split([':', ' ', '\t']).next().unwrap_or("");
        match keyword {
            "NAME" => name = Some(header_value(line).to_string()),
            "TYPE" | "COMMENT" | "EDGE_WEIGHT_FORMAT" | "DISPLAY_DATA_TYPE" => {}
            "DIMENSION" => {
                dimension = Some(header_value(line).parse::<usize>().map_err(|_| {
                    err(lineno, format!("DIMENSION is not an integer: {line}"))
                })?);
            }
            "CAPACITY" => {
                capacity = Some(header_value(line).parse::<u64>().map_err(|_| {
                    err(lineno, format!("CAPACITY is not an integer: {line}"))
                })?);
            }
            "EDGE_WEIGHT_TYPE" => {
                edge_weight_type = Some(header_value(line).to_string());
            }
            "NODE_COORD_SECTION" => {
                let dim = dimension
                    .ok_or_else(|| err(lineno, "NODE_COORD_SECTION before DIMENSION".into()))?;
                coords = vec![None; dim];
                section = Section::Coords;
            }
            "DEMAND_SECTION" => {
                let dim = dimension
                    .ok_or_else(|| err(lineno, "DEMAND_SECTION before DIMENSION".into()))?;
                demands = vec![None; dim];
                section = Section::Demands;
            }
            "DEPOT_SECTION" => section = Section::Depot,
            "EOF" => section = Section::Done,
            _ => match section {
                Section::Coords => {
                    let fields: Vec<&str> = line.split_whitespace().collect();
                    if fields.len() != 3 {
                        return Err(err(lineno, format!("expected `id x y`, got: {line}")));
                    }
                    let id: usize = fields[0]
                        .parse()
                        .map_err(|_| err(lineno, format!("bad node id: {}", fields[0])))?;
                    let x: f64 = fields[1]
                        .parse()
                        .map_err(|_| err(lineno, format!("bad x coordinate: {}", fields[1])))?;
                    let y: f64 = fields[2]
                        .parse()
                        .map_err(|_| err(lineno, format!("bad y coordinate: {}", fields[2])))?;
                    if id == 0 || id > coords.len() {
                        return Err(err(lineno, format!("node id {id} out of range")));
                    }
                    if coords[id - 1].replace([x, y]).is_some() {
                        return Err(err(lineno, format!("duplicate coordinates for node {id}")));
                    }
                }
                Section::Demands => {
                    let fields: Vec<&str> = line.split_whitespace().collect();
                    if fields.len() != 2 {
                        return Err(err(lineno, format!("expected `id demand`, got: {line}")));
                    }
                    let id: usize = fields[0]
                        .parse()
                        .map_err(|_| err(lineno, format!("bad node id: {}", fields[0])))?;
                    let d: u64 = fields[1]
                        .parse()
                        .map_err(|_| err(lineno, format!("bad demand: {}", fields[1])))?;
                    if id == 0 || id > demands.len() {
                        return Err(err(lineno, format!("node id {id} out of range")));
                    }
                    if demands[id - 1].replace(d).is_some() {
                        return Err(err(lineno, format!("duplicate demand for node {id}")));
                    }
                }
                Section::Depot => {
                    let v: i64 = line
                        .parse()
                        .map_err(|_| err(lineno, format!("bad depot entry: {line}")))?;
                    if v != -1 {
                        depot_nodes.push(v);
                    }
                }
                Section::Header | Section::Done => {
                    return Err(err(lineno, format!("unexpected line: {line}")));
                }
            },
        }
    }

    let dimension = dimension.ok_or_else(|| err(0, "missing DIMENSION".into()))?;
    let capacity = capacity.ok_or_else(|| err(0, "missing CAPACITY".into()))?;
    if dimension < 2 {
        return Err(err(0, format!("DIMENSION {dimension} leaves no customers")));
    }
    match edge_weight_type.as_deref() {
        Some("EUC_2D") => {}
        Some(other) => return Err(err(0, format!("unsupported EDGE_WEIGHT_TYPE {other}"))),
        None => return Err(err(0, "missing EDGE_WEIGHT_TYPE".into())),
    }
    if capacity == 0 || capacity > u32::MAX as u64 {
        return Err(err(0, format!("CAPACITY {capacity} out of range")));
    }
    if coords.len() != dimension || coords.iter().any(|c| c.is_none()) {
        return Err(err(0, "NODE_COORD_SECTION does not cover every node".into()));
    }
    if demands.len() != dimension || demands.iter().any(|d| d.is_none()) {
        return Err(err(0, "DEMAND_SECTION does not cover every node".into()));
    }
    if !depot_nodes.is_empty() && depot_nodes != [1] {
        return Err(err(
            0,
            format!("DEPOT_SECTION must declare node 1, got {depot_nodes:?}"),
        ));
    }
    let coords: Vec<[f64; 2]> = coords.into_iter().map(|c| c.unwrap()).collect();
    let demands: Vec<u64> = demands.into_iter().map(|d| d.unwrap()).collect();
    if demands[0] != 0 {
        return Err(err(0, format!("depot demand must be 0, got {}", demands[0])));
    }

    // Uniform min-max rescale: one scale for both axes keeps the geometry
    // similar, so route lengths convert back by a single multiplication.
    let xs: Vec<f64> = coords.iter().map(|c| c[0]).collect();
    let ys: Vec<f64> = coords.iter().map(|c| c[1]).collect();
    let (xmin, xmax) = min_max(&xs);
    let (ymin, ymax) = min_max(&ys);
    let span = (xmax - xmin).max(ymax - ymin);
    let (scale, offset) = if span > 0.0 {
        (span, [xmin, ymin])
    } else {
        // All nodes coincide; park them at the centre of the unit square.
        (1.0, [xs[0] - 0.5, ys[0] - 0.5])
    };
    let rescale = |p: &[f64; 2]| [(p[0] - offset[0]) / scale, (p[1] - offset[1]) / scale];

    let depot = rescale(&coords[0]);
    let customer_coords: Vec<[f64; 2]> = coords[1..].iter().map(rescale).collect();
    let customer_demands: Vec<u32> = demands[1..].iter().map(|&d| d as u32).collect();
    let instance = CvrpInstance::new(depot, customer_coords, customer_demands, capacity as u32)
        .map_err(|e| err(0, e.to_string()))?;

    Ok(BenchmarkInstance {
        name: name.unwrap_or_else(|| "unnamed".to_string()),
        dimension,
        instance,
        original_depot: coords[0],
        original_coords: coords[1..].to_vec(),
        scale,
        offset,
        optimum: None,
    })
}

fn header_value(line: &str) -> &str {
    match line.split_once(':') {
        Some((_, v)) => v.trim(),
        None => line.split_whitespace().nth(1).unwrap_or(""),
    }
}

fn min_max(values: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

fn parse_sidecar_cost(path: &Path) -> Result<Option<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        let lower = line.to_ascii_lowercase();
        if let Some(rest) = lower.strip_prefix("cost") {
            let value = rest.trim_start_matches([':', ' ']).trim();
            let cost: f64 = value.parse().map_err(|_| Error::Parse {
                file: path.display().to_string(),
                line: idx + 1,
                message: format!("bad cost value: {line}"),
            })?;
            return Ok(Some(cost));
        }
    }
    Ok(None)
}
