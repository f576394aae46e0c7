use std::io::Write;

use serde::Serialize;

use crate::error::Result;

/// One coordinate update of a greedy solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub m: usize,
    pub n: usize,
    pub delta: f64,
    pub objective: f64,
    pub fit: f64,
    pub transport: f64,
    pub mass: f64,
}

/// Per-iteration history of a solve. Row 0 is the starting point.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveTrace {
    pub records: Vec<TraceRecord>,
}

impl SolveTrace {
    pub fn objectives(&self) -> impl Iterator<Item = f64> + '_ {
        self.records.iter().map(|r| r.objective)
    }

    pub fn is_non_increasing(&self) -> bool {
        self.records.windows(2).all(|w| w[1].objective <= w[0].objective)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        for r in &self.records {
            wtr.serialize(r).map_err(|e| crate::Error::Parse(e.to_string()))?;
        }
        wtr.flush()?;
        Ok(())
    }
}
