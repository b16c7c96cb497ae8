//! Dataset CSV: header `sample_id,region_id,label,day,b0,...,b{D-1}`, one row
//! per observation, rows of a sample contiguous and ordered by day.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{DataError, TimeSeriesSample};
use crate::diffcore::Array;

const FIXED_COLUMNS: [&str; 4] = ["sample_id", "region_id", "label", "day"];

fn header(bands: usize) -> String {
    let mut h = FIXED_COLUMNS.join(",");
    for b in 0..bands {
        let _ = write!(h, ",b{b}");
    }
    h
}

/// Renders samples as CSV text. Floats use the shortest representation that
/// parses back to the same value.
pub fn render_dataset(samples: &[TimeSeriesSample], bands: usize) -> String {
    let mut out = header(bands);
    out.push('\n');
    for s in samples {
        for (t, day) in s.days.iter().enumerate() {
            let _ = write!(out, "{},{},{},{}", s.id, s.region_id, s.label, day);
            for v in s.observations.row_slice(t) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    out
}

pub fn save_dataset(path: &Path, samples: &[TimeSeriesSample], bands: usize) -> Result<(), DataError> {
    if let Some(s) = samples.iter().find(|s| s.bands() != bands) {
        return Err(DataError::InvalidConfig(format!(
            "sample {} has {} bands, expected {bands}",
            s.id,
            s.bands()
        )));
    }
    fs::write(path, render_dataset(samples, bands)).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_dataset(path: &Path, expected_bands: Option<usize>) -> Result<Vec<TimeSeriesSample>, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text, expected_bands)
}

fn field<T: std::str::FromStr>(raw: &str, name: &str, line: usize) -> Result<T, DataError> {
    raw.parse().map_err(|_| DataError::Parse {
        line,
        message: format!("cannot parse {name} from {raw:?}"),
    })
}

/// Parses dataset CSV text. When `expected_bands` is given, a header with a
/// different band count is rejected.
pub fn parse_dataset(text: &str, expected_bands: Option<usize>) -> Result<Vec<TimeSeriesSample>, DataError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let Some((_, head)) = lines.next() else {
        return Err(DataError::Parse {
            line: 1,
            message: "missing header".into(),
        });
    };
    let columns: Vec<&str> = head.trim_end_matches('\r').split(',').collect();
    if columns.len() < FIXED_COLUMNS.len() + 1 || columns[..4] != FIXED_COLUMNS {
        return Err(DataError::Parse {
            line: 1,
            message: format!("header must start with {} followed by band columns", FIXED_COLUMNS.join(",")),
        });
    }
    let bands = columns.len() - FIXED_COLUMNS.len();
    for (b, name) in columns[4..].iter().enumerate() {
        if *name != format!("b{b}") {
            return Err(DataError::Parse {
                line: 1,
                message: format!("band column {b} is named {name:?}, expected \"b{b}\""),
            });
        }
    }
    if let Some(expected) = expected_bands {
        if expected != bands {
            return Err(DataError::Parse {
                line: 1,
                message: format!("file has {bands} band columns, configuration expects {expected}"),
            });
        }
    }

    let mut samples: Vec<TimeSeriesSample> = Vec::new();
    let mut data: Vec<f64> = Vec::new();
    let flush = |samples: &mut Vec<TimeSeriesSample>, data: &mut Vec<f64>| {
        if let Some(last) = samples.last_mut() {
            let rows = last.days.len();
            last.observations = Array::new(rows, bands, std::mem::take(data)).expect("rows checked");
        }
    };
    for (line, raw) in lines {
        let raw = raw.trim_end_matches('\r');
        if raw.is_empty() {
            continue;
        }
        let cells: Vec<&str> = raw.split(',').collect();
        if cells.len() != columns.len() {
            return Err(DataError::Parse {
                line,
                message: format!("expected {} fields, found {}", columns.len(), cells.len()),
            });
        }
        let id: u64 = field(cells[0], "sample_id", line)?;
        let region: u32 = field(cells[1], "region_id", line)?;
        let label: usize = field(cells[2], "label", line)?;
        let day: f64 = field(cells[3], "day", line)?;
        if !day.is_finite() {
            return Err(DataError::Parse {
                line,
                message: format!("day {day} is not finite"),
            });
        }
        let same_sample = samples.last().is_some_and(|s| s.id == id);
        if same_sample {
            let s = samples.last().expect("checked");
            if s.region_id != region || s.label != label {
                return Err(DataError::Parse {
                    line,
                    message: format!("sample {id} changes region or label mid-sequence"),
                });
            }
            if day <= *s.days.last().expect("nonempty") {
                return Err(DataError::Parse {
                    line,
                    message: format!("sample {id}: days must be strictly increasing"),
                });
            }
        } else {
            if samples.iter().any(|s| s.id == id) {
                return Err(DataError::Parse {
                    line,
                    message: format!("sample {id} rows are not contiguous"),
                });
            }
            flush(&mut samples, &mut data);
            samples.push(TimeSeriesSample {
                id,
                region_id: region,
                label,
                days: Vec::new(),
                observations: Array::zeros(0, bands),
            });
        }
        for (b, cell) in cells[4..].iter().enumerate() {
            let v: f64 = field(cell, &format!("b{b}"), line)?;
            data.push(v);
        }
        samples.last_mut().expect("pushed").days.push(day);
    }
    flush(&mut samples, &mut data);
    Ok(samples)
}
