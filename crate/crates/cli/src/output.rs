//! Sparse power-map files.
//!
//! ```text
//! # key=value            metadata, one per line
//! # grid_origin=x y z
//! # grid_extents=ex ey ez
//! # grid_step=s
//! # grid_dims=nx ny nz
//! index,x,y,z,power      header
//! 1234,3.1,0.2,0,0.25    one row per strictly positive entry, by index
//! ```

use std::io::{BufRead, Write};

use cmfuot_core::cmf::PowerMap;
use cmfuot_core::scene::Grid;

use crate::CliError;

pub const POWER_MAP_HEADER: &str = "index,x,y,z,power";

pub fn write_power_map<W: Write>(
    mut out: W,
    meta: &[(String, String)],
    grid: &Grid,
    power: &PowerMap,
) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Runtime(e.to_string());
    for (k, v) in meta {
        writeln!(out, "# {k}={v}").map_err(io)?;
    }
    let o = grid.origin();
    let e = grid.extents();
    let d = grid.dims();
    writeln!(out, "# grid_origin={} {} {}", o.x, o.y, o.z).map_err(io)?;
    writeln!(out, "# grid_extents={} {} {}", e[0], e[1], e[2]).map_err(io)?;
    writeln!(out, "# grid_step={}", grid.step()).map_err(io)?;
    writeln!(out, "# grid_dims={} {} {}", d[0], d[1], d[2]).map_err(io)?;
    writeln!(out, "# grid_points={}", grid.len()).map_err(io)?;
    writeln!(out, "{POWER_MAP_HEADER}").map_err(io)?;
    for (m, v) in power.nonzero() {
        let p = grid.point(m);
        writeln!(out, "{m},{},{},{},{v}", p.x, p.y, p.z).map_err(io)?;
    }
    Ok(())
}

/// Sparse power map as read back: metadata pairs and `(index, power)` rows.
#[derive(Debug, Clone, Default)]
pub struct SparsePowerMap {
    pub meta: Vec<(String, String)>,
    pub entries: Vec<(usize, f64)>,
}

impl SparsePowerMap {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_dense(&self, len: usize) -> Vec<f64> {
        let mut b = vec![0.0; len];
        for &(m, v) in &self.entries {
            b[m] = v;
        }
        b
    }
}

pub fn read_power_map<R: BufRead>(input: R) -> Result<SparsePowerMap, CliError> {
    let bad = |line: &str| CliError::Config(format!("malformed power map line: {line}"));
    let mut map = SparsePowerMap::default();
    for line in input.lines() {
        let line = line.map_err(|e| CliError::Runtime(e.to_string()))?;
        if let Some(kv) = line.strip_prefix("# ") {
            if let Some((k, v)) = kv.split_once('=') {
                map.meta.push((k.to_string(), v.to_string()));
            }
            continue;
        }
        if line.is_empty() || line == POWER_MAP_HEADER {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(bad(&line));
        }
        let m = fields[0].parse().map_err(|_| bad(&line))?;
        let v = fields[4].parse().map_err(|_| bad(&line))?;
        map.entries.push((m, v));
    }
    Ok(map)
}
