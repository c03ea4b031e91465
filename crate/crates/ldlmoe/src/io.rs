//! CSV and JSON files.
//!
//! Input series are CSV with a header row. The target column is `y`;
//! `series_id` and `t` are optional, and columns named `f_<anything>` are
//! input features in header order. Without feature columns the target is
//! its own single input. Other columns are ignored, which lets the output of
//! `ldlmoe synth` be read back directly.

use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ldlmoe_core::series::TimeSeries;
use ldlmoe_core::train::{Checkpoint, DecompRow, EnhancedSeries, Forecast, TrainConfig};
use ldlmoe_core::pattern::ComponentKind;
use ldlmoe_core::synth::SynthSeries;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{AppError, AppResult};

/// Environment variable naming the config file used when `--config` is absent.
pub const CONFIG_ENV: &str = "LDLMOE_CONFIG";

fn open(path: &Path) -> AppResult<File> {
    File::open(path).map_err(|source| AppError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads one series from a CSV file. With several `series_id` values,
/// `series` picks one; otherwise the first in file order is used.
pub fn read_series(path: &Path, series: Option<&str>) -> AppResult<TimeSeries> {
    parse_series(open(path)?, path, series)
}

struct Columns {
    y: usize,
    id: Option<usize>,
    t: Option<usize>,
    features: Vec<usize>,
}

fn columns(header: &csv::StringRecord, path: &Path) -> AppResult<Columns> {
    let find = |name: &str| header.iter().position(|h| h.trim() == name);
    let y = find("y").ok_or_else(|| AppError::parse(path, "missing required column `y`"))?;
    let features = header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.trim().starts_with("f_"))
        .map(|(i, _)| i)
        .collect();
    Ok(Columns {
        y,
        id: find("series_id"),
        t: find("t"),
        features,
    })
}

fn number(rec: &csv::StringRecord, col: usize, line: u64, path: &Path) -> AppResult<f64> {
    let raw = rec.get(col).unwrap_or("").trim();
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(AppError::parse(path, format!("line {line}: `{raw}` is not a finite number"))),
    }
}

/// [`read_series`] over any reader; `path` is only used in messages.
pub fn parse_series(reader: impl Read, path: &Path, series: Option<&str>) -> AppResult<TimeSeries> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| AppError::parse(path, e))?.clone();
    let cols = columns(&header, path)?;
    let mut chosen: Option<String> = series.map(str::to_owned);
    let mut y = Vec::new();
    let mut feats = Vec::new();
    let mut ts = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| AppError::parse(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if let Some(c) = cols.id {
            let id = rec.get(c).unwrap_or("").trim();
            match &chosen {
                Some(want) if want != id => continue,
                Some(_) => {}
                None => chosen = Some(id.to_owned()),
            }
        }
        y.push(number(&rec, cols.y, line, path)?);
        for &c in &cols.features {
            feats.push(number(&rec, c, line, path)?);
        }
        if let Some(c) = cols.t {
            let raw = rec.get(c).unwrap_or("").trim();
            let t = raw
                .parse::<i64>()
                .map_err(|_| AppError::parse(path, format!("line {line}: `{raw}` is not an integer time index")))?;
            ts.push(t);
        }
    }
    if y.is_empty() {
        let what = match (series, cols.id) {
            (Some(id), Some(_)) => format!("no rows for series `{id}`"),
            _ => "no data rows".to_owned(),
        };
        return Err(AppError::parse(path, what));
    }
    let id = chosen.unwrap_or_else(|| stem(path));
    let timestamps = cols.t.map(|_| ts);
    let built = if cols.features.is_empty() {
        TimeSeries::new(id, 1, y.clone(), y, timestamps)
    } else {
        TimeSeries::new(id, cols.features.len(), feats, y, timestamps)
    };
    built.map_err(|e| AppError::parse(path, e))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "series".to_owned())
}

/// Destination for an output: a file, or standard output when `None`.
pub fn sink(path: Option<&Path>) -> AppResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|source| AppError::Io {
            path: p.to_path_buf(),
            source,
        })?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn out_name(path: Option<&Path>) -> PathBuf {
    path.map_or_else(|| PathBuf::from("<stdout>"), Path::to_path_buf)
}

fn write_rows(path: Option<&Path>, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> AppResult<()> {
    let name = out_name(path);
    let io_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(source) => AppError::Io {
            path: name.clone(),
            source,
        },
        other => AppError::parse(name.clone(), format!("{other:?}")),
    };
    let mut w = csv::Writer::from_writer(sink(path)?);
    w.write_record(header).map_err(io_err)?;
    for r in rows {
        w.write_record(&r).map_err(io_err)?;
    }
    w.flush().map_err(|source| AppError::Io {
        path: name.clone(),
        source,
    })
}

fn f(v: f64) -> String {
    format!("{v}")
}

fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

pub fn write_synth(path: Option<&Path>, s: &SynthSeries) -> AppResult<()> {
    let rows = (0..s.len()).map(|t| {
        vec![
            t.to_string(),
            f(s.y[t]),
            f(s.trend[t]),
            f(s.seasonal[t]),
            f(s.changepoint[t]),
            f(s.noise_sd[t]),
        ]
    });
    write_rows(
        path,
        &header(&["t", "y", "trend_true", "seasonal_true", "cp_true", "noise_sd_true"]),
        rows,
    )
}

/// One row per enhanced step: `t, y, mean, variance` and, in discrete mode,
/// one `p_<k>` column per bin.
pub fn write_enhanced(path: Option<&Path>, e: &EnhancedSeries) -> AppResult<()> {
    let mut head = header(&["t", "y", "mean", "variance"]);
    if let Some(b) = &e.bins {
        head.extend((0..b.count).map(|k| format!("p_{k}")));
    }
    let rows = (0..e.y.len()).map(|i| {
        let mut r = vec![e.t[i].to_string(), f(e.y[i]), f(e.y[i]), f(e.variance[i])];
        if let Some(p) = &e.probs {
            r.extend(p[i].iter().map(|v| f(*v)));
        }
        r
    });
    write_rows(path, &head, rows)
}

/// Decomposition table: `t, y_true, y_hat`, the four component values, then
/// the four component variances.
pub fn write_decomposition(path: Option<&Path>, rows: &[DecompRow]) -> AppResult<()> {
    let mut head = header(&["t", "y_true", "y_hat"]);
    head.extend(ComponentKind::ALL.iter().map(|k| k.name().to_owned()));
    head.extend(ComponentKind::ALL.iter().map(|k| format!("{}_uncertainty", k.name())));
    let out = rows.iter().map(|r| {
        let mut v = vec![r.t.to_string(), f(r.y_true), f(r.y_hat)];
        v.extend(r.values.iter().map(|x| f(*x)));
        v.extend(r.uncertainties.iter().map(|x| f(*x)));
        v
    });
    write_rows(path, &head, out)
}

/// Per-step forecasts: `t` of the target step, its horizon index (1-based),
/// truth, point forecast and interval bounds.
pub fn write_forecasts(
    path: Option<&Path>,
    times: &[Vec<i64>],
    truth: &[Vec<f64>],
    fc: &[Vec<Forecast>],
) -> AppResult<()> {
    let head = header(&["t", "step", "y_true", "y_hat", "lower", "upper"]);
    let rows = fc.iter().enumerate().flat_map(|(k, row)| {
        row.iter().enumerate().map(move |(h, x)| {
            vec![
                times[k][h].to_string(),
                (h + 1).to_string(),
                f(truth[k][h]),
                f(x.point),
                f(x.lower),
                f(x.upper),
            ]
        })
    });
    write_rows(path, &head, rows)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> AppResult<T> {
    let mut s = String::new();
    open(path)?
        .read_to_string(&mut s)
        .map_err(|source| AppError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    serde_json::from_str(&s).map_err(|e| AppError::parse(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> AppResult<()> {
    let name = out_name(path);
    let mut w = sink(path)?;
    let io_err = |source| AppError::Io {
        path: name.clone(),
        source,
    };
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| AppError::parse(name.clone(), e))?;
    w.write_all(b"\n").map_err(io_err)?;
    w.flush().map_err(io_err)
}

/// Training configuration. A file that fails to parse is a usage error.
pub fn read_config(path: &Path) -> AppResult<TrainConfig> {
    match read_json::<TrainConfig>(path) {
        Err(AppError::Parse { path, message }) => Err(AppError::Usage(format!(
            "invalid config {}: {message}",
            path.display()
        ))),
        other => other,
    }
}

pub fn read_checkpoint(path: &Path) -> AppResult<Checkpoint> {
    let c: Checkpoint = read_json(path)?;
    c.check_version()?;
    Ok(c)
}

pub fn write_checkpoint(path: &Path, c: &Checkpoint) -> AppResult<()> {
    write_json(Some(path), c)
}
