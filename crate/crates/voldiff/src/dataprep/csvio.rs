//! CSV formats and atomic file writing.
//!
//! Three formats are defined here:
//!
//! - Quote CSV (long): `date,moneyness,tenor_years,implied_vol,vega`.
//! - Surface CSV (wide): `date` followed by 81 cells in row-major
//!   order, rows = moneyness ascending, columns = tenor ascending. The
//!   cell ordering is the bit-level contract for every surface file.
//! - Market CSV: `date,underlying_return,vix_return`.

use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::grid::{SurfaceGrid, GRID_CELLS, GRID_DIM};
use super::QuoteRecord;
use crate::error::{Error, Result};

/// Write `bytes` to `path` via a temp file in the same directory plus a
/// rename, so readers never observe partial output.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Validation(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!("{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn open_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path)
        .map_err(|source| Error::ReadInput { path: path.to_path_buf(), source })?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn parse_date(raw: &str, path: &Path) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(raw, "%Y-%m-%d").map_err(|e| {
        Error::Validation(format!("bad date {raw:?} in {}: {e}", path.display()))
    })
}

fn parse_f64(raw: &str, column: &str, path: &Path) -> Result<f64> {
    raw.trim().parse::<f64>().map_err(|e| {
        Error::Validation(format!("bad {column} value {raw:?} in {}: {e}", path.display()))
    })
}

/// Surface CSV header: `date,m1_t1,...,m9_t9` with tenor fastest.
fn surface_header() -> Vec<String> {
    let mut cols = Vec::with_capacity(GRID_CELLS + 1);
    cols.push("date".to_string());
    for i in 1..=GRID_DIM {
        for j in 1..=GRID_DIM {
            cols.push(format!("m{i}_t{j}"));
        }
    }
    cols
}

pub fn read_quotes_csv(path: &Path) -> Result<Vec<QuoteRecord>> {
    let mut reader = open_reader(path)?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != 5 {
            return Err(Error::Validation(format!(
                "quote rows need 5 columns, got {} in {}",
                record.len(),
                path.display()
            )));
        }
        out.push(QuoteRecord {
            date: parse_date(&record[0], path)?,
            moneyness: parse_f64(&record[1], "moneyness", path)?,
            tenor_years: parse_f64(&record[2], "tenor_years", path)?,
            implied_vol: parse_f64(&record[3], "implied_vol", path)?,
            vega: parse_f64(&record[4], "vega", path)?,
        });
    }
    if out.is_empty() {
        return Err(Error::Validation(format!("no quotes in {}", path.display())));
    }
    Ok(out)
}

pub fn write_quotes_csv(path: &Path, quotes: &[QuoteRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["date", "moneyness", "tenor_years", "implied_vol", "vega"])?;
    for q in quotes {
        writer.write_record([
            q.date.format("%Y-%m-%d").to_string(),
            q.moneyness.to_string(),
            q.tenor_years.to_string(),
            q.implied_vol.to_string(),
            q.vega.to_string(),
        ])?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
    atomic_write(path, &bytes)
}

pub fn read_surfaces_csv(path: &Path) -> Result<Vec<(NaiveDate, SurfaceGrid)>> {
    let mut reader = open_reader(path)?;
    let header = reader.headers()?.clone();
    if header.len() != GRID_CELLS + 1 || &header[0] != "date" {
        return Err(Error::Validation(format!(
            "surface CSV needs a 'date' column plus {GRID_CELLS} cells, got {} columns in {}",
            header.len(),
            path.display()
        )));
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let date = parse_date(&record[0], path)?;
        let mut cells = Vec::with_capacity(GRID_CELLS);
        for k in 1..record.len() {
            cells.push(parse_f64(&record[k], &header[k], path)?);
        }
        out.push((date, SurfaceGrid::from_vec(cells)?));
    }
    if out.is_empty() {
        return Err(Error::Validation(format!("no surfaces in {}", path.display())));
    }
    Ok(out)
}

pub fn write_surfaces_csv(path: &Path, rows: &[(NaiveDate, SurfaceGrid)]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(surface_header())?;
    for (date, surface) in rows {
        let mut record = Vec::with_capacity(GRID_CELLS + 1);
        record.push(date.format("%Y-%m-%d").to_string());
        record.extend(surface.data().iter().map(|v| v.to_string()));
        writer.write_record(record)?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
    atomic_write(path, &bytes)
}

/// One market-data day.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketRow {
    pub date: NaiveDate,
    pub underlying_return: f64,
    pub vix_return: f64,
}

pub fn read_market_csv(path: &Path) -> Result<Vec<MarketRow>> {
    let mut reader = open_reader(path)?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != 3 {
            return Err(Error::Validation(format!(
                "market rows need 3 columns, got {} in {}",
                record.len(),
                path.display()
            )));
        }
        out.push(MarketRow {
            date: parse_date(&record[0], path)?,
            underlying_return: parse_f64(&record[1], "underlying_return", path)?,
            vix_return: parse_f64(&record[2], "vix_return", path)?,
        });
    }
    if out.is_empty() {
        return Err(Error::Validation(format!("no market rows in {}", path.display())));
    }
    Ok(out)
}

pub fn write_market_csv(path: &Path, rows: &[MarketRow]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["date", "underlying_return", "vix_return"])?;
    for r in rows {
        writer.write_record([
            r.date.format("%Y-%m-%d").to_string(),
            r.underlying_return.to_string(),
            r.vix_return.to_string(),
        ])?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
    atomic_write(path, &bytes)
}
