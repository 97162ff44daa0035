//! The per-image score/metric CSV table.

use std::path::Path;

use crate::error::{Error, Result};

pub const SCORE_TABLE_COLUMNS: [&str; 7] = ["id", "score", "ratio", "mse_f1", "mse_f2", "mse_f3", "dct_complexity"];

/// One row; absent or empty cells are `None` and listed in `missing`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreRow {
    pub id: String,
    pub score: Option<i64>,
    pub ratio: Option<u32>,
    pub mse: [Option<f64>; 3],
    pub dct_complexity: Option<u64>,
    pub missing: Vec<&'static str>,
}

impl ScoreRow {
    pub fn new(id: impl Into<String>) -> Self {
        ScoreRow {
            id: id.into(),
            ..Default::default()
        }
    }

    /// Recomputes `missing` from the current cells.
    pub fn flag_missing(&mut self) {
        let present = [
            self.score.is_some(),
            self.ratio.is_some(),
            self.mse[0].is_some(),
            self.mse[1].is_some(),
            self.mse[2].is_some(),
            self.dct_complexity.is_some(),
        ];
        self.missing = SCORE_TABLE_COLUMNS[1..]
            .iter()
            .zip(present)
            .filter(|(_, p)| !p)
            .map(|(c, _)| *c)
            .collect();
    }
}

fn cell<T: std::str::FromStr>(raw: Option<&str>, col: &str, line: usize) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match raw.map(str::trim) {
        None | Some("") => Ok(None),
        Some(s) => s
            .parse()
            .map(Some)
            .map_err(|e| Error::Parse(format!("line {line}, column {col}: {s:?}: {e}"))),
    }
}

/// Reads a table; any column except `id` may be absent.
pub fn read_score_table(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
        .clone();
    let pos = |name: &str| headers.iter().position(|h| h.trim() == name);
    let id_col = pos("id").ok_or_else(|| Error::Parse(format!("{}: missing id column", path.display())))?;
    let cols: Vec<Option<usize>> = SCORE_TABLE_COLUMNS[1..].iter().map(|c| pos(c)).collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let get = |k: usize| cols[k].and_then(|c| rec.get(c));
        let mut row = ScoreRow {
            id: rec.get(id_col).unwrap_or("").to_string(),
            score: cell(get(0), "score", line)?,
            ratio: cell(get(1), "ratio", line)?,
            mse: [
                cell(get(2), "mse_f1", line)?,
                cell(get(3), "mse_f2", line)?,
                cell(get(4), "mse_f3", line)?,
            ],
            dct_complexity: cell(get(5), "dct_complexity", line)?,
            missing: Vec::new(),
        };
        row.flag_missing();
        rows.push(row);
    }
    Ok(rows)
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes all seven columns; absent values become empty cells.
pub fn write_score_table(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| Error::Parse(format!("{}: {e}", path.display()));
    w.write_record(SCORE_TABLE_COLUMNS).map_err(err)?;
    for r in rows {
        w.write_record([
            r.id.clone(),
            opt(r.score),
            opt(r.ratio),
            opt(r.mse[0]),
            opt(r.mse[1]),
            opt(r.mse[2]),
            opt(r.dct_complexity),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
