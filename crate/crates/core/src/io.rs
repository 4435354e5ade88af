//! Field dump: one JSON header line, then little-endian `f64` cell values in
//! row-major order, then one block of face values per axis.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{HomlabError, Result};
use crate::field::{CovarianceKind, ParameterField};
use crate::grid::GridSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldHeader {
    pub d: usize,
    pub n: usize,
    #[serde(rename = "L")]
    pub length: f64,
    pub kind: Option<CovarianceKind>,
    pub epsilon: Option<f64>,
    pub seed: u64,
    pub clipped_mass: f64,
}

pub fn write_field(out: &mut impl Write, header: &FieldHeader, field: &ParameterField) -> Result<()> {
    serde_json::to_writer(&mut *out, header)?;
    out.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(8 * field.cell.len() * (1 + field.faces.len()));
    for v in field.cell.iter().chain(field.faces.iter().flatten()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_field(input: &mut impl BufRead) -> Result<(FieldHeader, ParameterField)> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    let header: FieldHeader = serde_json::from_str(line.trim_end())?;
    let grid = GridSpec::new(header.d, header.n, header.length)?;
    let cells = grid.cells();
    let mut bytes = vec![0u8; 8 * cells * (1 + header.d)];
    input.read_exact(&mut bytes)?;
    let mut values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let cell: Vec<f64> = values.by_ref().take(cells).collect();
    let faces: Vec<Vec<f64>> = (0..header.d).map(|_| values.by_ref().take(cells).collect()).collect();
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(HomlabError::invalid(format!("{} trailing bytes after field dump", rest.len())));
    }
    let seed = header.seed;
    Ok((header, ParameterField { grid, cell, faces, seed }))
}
