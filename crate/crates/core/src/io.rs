//! On-disk formats: record CSV and binary, trajectory CSV, ensemble means,
//! occupancy grids and JSON reports.
//!
//! Values are written with Rust's shortest round-trip formatting, so
//! parsing a written file returns bit-identical numbers. Times are written
//! in microseconds with 9 significant digits and, for records, regenerated
//! from `dt` on reading.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::analytics::{alpha_of, xi_of};
use crate::error::{QsdError, Result};
use crate::sde::{HeterodyneRecord, RecordProvenance, Trajectory};
use crate::state::{linear_entropy, QubitState};
use crate::validation::{CellCount, OccupancyGrid, OccupancySlice};

pub const RECORD_MAGIC: &[u8; 4] = b"QSDR";
pub const RECORD_BINARY_VERSION: u16 = 1;
pub const RECORD_COLUMNS: &str = "t_us,dI,dQ";
pub const TRAJECTORY_COLUMNS: &str = "t_us,x,y,z,S_L,alpha,xi_x,xi_y";
pub const GRID_COLUMNS: &str = "t_us,ix,iy,iz,count";
pub const MEAN_COLUMNS: &str = "t_us,mean_I,mean_Q,stderr_I,stderr_Q,count";

/// `t` with 9 significant digits, trailing zeros trimmed.
pub fn format_time(t: f64) -> String {
    if t == 0.0 || !t.is_finite() {
        return format!("{t}");
    }
    let mag = t.abs().log10().floor() as i32;
    let decimals = (8 - mag).max(0) as usize;
    let s = format!("{t:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Shortest string that parses back to the same `f64`.
pub fn format_value(v: f64) -> String {
    format!("{v:?}")
}

fn parse_err(file: &Path, line: usize, msg: impl Into<String>) -> QsdError {
    QsdError::Parse {
        file: file.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_f64(file: &Path, line: usize, field: &str, name: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| parse_err(file, line, format!("{name}: '{field}' is not a number")))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(QsdError::Io)
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".part");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = BufWriter::new(fs::File::create(&tmp)?);
        f.write_all(bytes)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

// ---- records ----

fn provenance_of(rec: &HeterodyneRecord) -> Result<RecordProvenance> {
    rec.provenance.ok_or_else(|| {
        QsdError::Config("record has no provenance; cannot write a record header".into())
    })
}

pub fn record_header(rec: &HeterodyneRecord) -> Result<String> {
    let p = provenance_of(rec)?;
    Ok(format!(
        "# qsd-record v1, dt_us={}, gamma1_us={}, gamma_phi_us={}, eta={}, seed={}, index={}",
        format_value(rec.dt),
        format_value(p.gamma1),
        format_value(p.gamma_phi),
        format_value(p.eta),
        p.seed,
        p.index
    ))
}

pub fn record_to_csv(rec: &HeterodyneRecord) -> Result<String> {
    let mut out = record_header(rec)?;
    out.push('\n');
    out.push_str(RECORD_COLUMNS);
    out.push('\n');
    for (k, (di, dq)) in rec.increments.iter().enumerate() {
        writeln!(out, "{},{},{}", format_time(rec.time(k)), format_value(*di), format_value(*dq))
            .expect("writing to a String");
    }
    Ok(out)
}

pub fn write_record_csv(path: &Path, rec: &HeterodyneRecord) -> Result<()> {
    write_atomic(path, record_to_csv(rec)?.as_bytes())
}

fn parse_record_header(file: &Path, line: &str) -> Result<(f64, RecordProvenance)> {
    let body = line
        .strip_prefix("# qsd-record v1")
        .ok_or_else(|| parse_err(file, 1, "missing '# qsd-record v1' header"))?;
    let mut dt = None;
    let mut prov = RecordProvenance {
        gamma1: f64::NAN,
        gamma_phi: f64::NAN,
        eta: f64::NAN,
        seed: 0,
        index: 0,
    };
    let mut seen = [false; 6];
    for item in body.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| parse_err(file, 1, format!("header item '{item}' is not key=value")))?;
        let int = |v: &str| {
            v.parse::<u64>()
                .map_err(|_| parse_err(file, 1, format!("{key}: '{v}' is not an unsigned integer")))
        };
        let slot = match key {
            "dt_us" => {
                dt = Some(parse_f64(file, 1, value, key)?);
                0
            }
            "gamma1_us" => {
                prov.gamma1 = parse_f64(file, 1, value, key)?;
                1
            }
            "gamma_phi_us" => {
                prov.gamma_phi = parse_f64(file, 1, value, key)?;
                2
            }
            "eta" => {
                prov.eta = parse_f64(file, 1, value, key)?;
                3
            }
            "seed" => {
                prov.seed = int(value)?;
                4
            }
            "index" => {
                prov.index = int(value)?;
                5
            }
            _ => return Err(parse_err(file, 1, format!("unknown header key '{key}'"))),
        };
        seen[slot] = true;
    }
    const NAMES: [&str; 6] = ["dt_us", "gamma1_us", "gamma_phi_us", "eta", "seed", "index"];
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(parse_err(file, 1, format!("header lacks {}", NAMES[i])));
    }
    let dt = dt.expect("checked above");
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(parse_err(file, 1, format!("dt_us must be positive, got {dt}")));
    }
    Ok((dt, prov))
}

/// Parses record CSV text; `file` only labels errors.
pub fn parse_record_csv(text: &str, file: &Path) -> Result<HeterodyneRecord> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| parse_err(file, 1, "empty file"))?;
    let (dt, prov) = parse_record_header(file, header.trim_end())?;
    let mut increments = Vec::new();
    for (no, raw) in lines {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line == RECORD_COLUMNS && increments.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(parse_err(file, no, format!("expected 3 fields, found {}", fields.len())));
        }
        let t = parse_f64(file, no, fields[0], "t_us")?;
        let expect = increments.len() as f64 * dt;
        if (t - expect).abs() > 1e-8 * expect.abs().max(dt) {
            return Err(parse_err(file, no, format!("t_us {t} does not match step time {expect}")));
        }
        let di = parse_f64(file, no, fields[1], "dI")?;
        let dq = parse_f64(file, no, fields[2], "dQ")?;
        if !(di.is_finite() && dq.is_finite()) {
            return Err(parse_err(file, no, "non-finite increment"));
        }
        increments.push((di, dq));
    }
    if increments.is_empty() {
        return Err(parse_err(file, 1, "record has no increments"));
    }
    Ok(HeterodyneRecord {
        dt,
        increments,
        provenance: Some(prov),
    })
}

pub fn read_record_csv(path: &Path) -> Result<HeterodyneRecord> {
    parse_record_csv(&read_text(path)?, path)
}

/// Binary layout, all little endian: magic `QSDR`, `u16` version, `f64`
/// dt, gamma1, gamma_phi, eta, `u64` seed, index, count, then `count`
/// pairs of `f64` (dI, dQ).
pub fn record_to_binary(rec: &HeterodyneRecord) -> Result<Vec<u8>> {
    let p = provenance_of(rec)?;
    let mut out = Vec::with_capacity(4 + 2 + 7 * 8 + 16 * rec.len());
    out.extend_from_slice(RECORD_MAGIC);
    out.extend_from_slice(&RECORD_BINARY_VERSION.to_le_bytes());
    for v in [rec.dt, p.gamma1, p.gamma_phi, p.eta] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in [p.seed, p.index, rec.len() as u64] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (di, dq) in &rec.increments {
        out.extend_from_slice(&di.to_le_bytes());
        out.extend_from_slice(&dq.to_le_bytes());
    }
    Ok(out)
}

pub fn record_from_binary(bytes: &[u8], file: &Path) -> Result<HeterodyneRecord> {
    // binary files have no lines; the reported "line" is the byte offset
    let err = |off: usize, msg: &str| parse_err(file, off, msg);
    let mut off = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(off..off + n).ok_or_else(|| err(off, "truncated binary record"))?;
        off += n;
        Ok(s)
    };
    if take(4)? != RECORD_MAGIC {
        return Err(err(0, "bad magic, expected QSDR"));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes"));
    if version != RECORD_BINARY_VERSION {
        return Err(err(4, &format!("unsupported version {version}")));
    }
    let mut f = || -> Result<f64> { Ok(f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"))) };
    let (dt, gamma1, gamma_phi, eta) = (f()?, f()?, f()?, f()?);
    let mut u = || -> Result<u64> { Ok(u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"))) };
    let (seed, index, count) = (u()?, u()?, u()?);
    let header = 4 + 2 + 7 * 8;
    let count = usize::try_from(count).map_err(|_| err(header - 8, "count overflows"))?;
    if bytes.len() != header + 16 * count {
        return Err(err(header, &format!("expected {count} pairs, file holds {} bytes of data", bytes.len() - header)));
    }
    if count == 0 {
        return Err(err(header, "record has no increments"));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(err(6, "dt must be positive"));
    }
    let increments = bytes[header..]
        .chunks_exact(16)
        .map(|c| {
            (
                f64::from_le_bytes(c[..8].try_into().expect("8 bytes")),
                f64::from_le_bytes(c[8..].try_into().expect("8 bytes")),
            )
        })
        .collect();
    Ok(HeterodyneRecord {
        dt,
        increments,
        provenance: Some(RecordProvenance { gamma1, gamma_phi, eta, seed, index }),
    })
}

/// Reads either format, choosing by the leading magic bytes.
pub fn read_record(path: &Path) -> Result<HeterodyneRecord> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(RECORD_MAGIC) {
        record_from_binary(&bytes, path)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| parse_err(path, 1, "not UTF-8 text"))?;
        parse_record_csv(&text, path)
    }
}

// ---- trajectories ----

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub t: f64,
    pub bloch: [f64; 3],
    pub linear_entropy: f64,
    /// `None` at the south pole.
    pub alpha: Option<f64>,
    pub xi: Option<(f64, f64)>,
}

impl TrajectoryRow {
    pub fn from_state(t: f64, s: &QubitState) -> Self {
        Self {
            t,
            bloch: s.bloch(),
            linear_entropy: linear_entropy(s),
            alpha: alpha_of(s).ok(),
            xi: xi_of(s).ok(),
        }
    }
}

pub fn trajectory_rows(traj: &Trajectory) -> Vec<TrajectoryRow> {
    traj.times
        .iter()
        .zip(&traj.states)
        .map(|(t, s)| TrajectoryRow::from_state(*t, s))
        .collect()
}

pub fn trajectory_to_csv(rows: &[TrajectoryRow]) -> String {
    let opt = |v: Option<f64>| v.map(format_value).unwrap_or_default();
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(TRAJECTORY_COLUMNS);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            format_time(r.t),
            format_value(r.bloch[0]),
            format_value(r.bloch[1]),
            format_value(r.bloch[2]),
            format_value(r.linear_entropy),
            opt(r.alpha),
            opt(r.xi.map(|x| x.0)),
            opt(r.xi.map(|x| x.1)),
        )
        .expect("writing to a String");
    }
    out
}

pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    write_atomic(path, trajectory_to_csv(&trajectory_rows(traj)).as_bytes())
}

pub fn parse_trajectory_csv(text: &str, file: &Path) -> Result<Vec<TrajectoryRow>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, h)) if h.trim() == TRAJECTORY_COLUMNS => {}
        _ => return Err(parse_err(file, 1, format!("expected header '{TRAJECTORY_COLUMNS}'"))),
    }
    let mut rows = Vec::new();
    for (no, raw) in lines {
        if raw.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = raw.trim().split(',').collect();
        if f.len() != 8 {
            return Err(parse_err(file, no, format!("expected 8 fields, found {}", f.len())));
        }
        let num = |i: usize, name: &str| parse_f64(file, no, f[i], name);
        let opt = |i: usize, name: &str| -> Result<Option<f64>> {
            if f[i].trim().is_empty() {
                Ok(None)
            } else {
                num(i, name).map(Some)
            }
        };
        let xi = match (opt(6, "xi_x")?, opt(7, "xi_y")?) {
            (Some(a), Some(b)) => Some((a, b)),
            (None, None) => None,
            _ => return Err(parse_err(file, no, "xi_x and xi_y must both be present or both empty")),
        };
        rows.push(TrajectoryRow {
            t: num(0, "t_us")?,
            bloch: [num(1, "x")?, num(2, "y")?, num(3, "z")?],
            linear_entropy: num(4, "S_L")?,
            alpha: opt(5, "alpha")?,
            xi,
        });
    }
    if rows.is_empty() {
        return Err(parse_err(file, 1, "trajectory has no rows"));
    }
    Ok(rows)
}

pub fn read_trajectory_csv(path: &Path) -> Result<Vec<TrajectoryRow>> {
    parse_trajectory_csv(&read_text(path)?, path)
}

// ---- ensemble mean of records ----

/// Per-step ensemble mean of `dI/dt` and `dQ/dt` with standard errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanRow {
    pub t: f64,
    pub mean_i: f64,
    pub mean_q: f64,
    pub stderr_i: f64,
    pub stderr_q: f64,
    pub count: u64,
}

/// Streaming form of [`record_means`]; records must be added in a fixed
/// order for bit-reproducible output.
#[derive(Debug, Clone)]
pub struct RecordMeanAccumulator {
    dt: f64,
    sums: Vec<[f64; 4]>,
    count: u64,
}

impl RecordMeanAccumulator {
    pub fn new(dt: f64, len: usize) -> Self {
        Self { dt, sums: vec![[0.0; 4]; len], count: 0 }
    }

    pub fn add(&mut self, rec: &HeterodyneRecord) -> Result<()> {
        if rec.len() != self.sums.len() || (rec.dt - self.dt).abs() > 1e-12 * self.dt {
            return Err(QsdError::Config("records differ in length or dt".into()));
        }
        for (acc, (di, dq)) in self.sums.iter_mut().zip(&rec.increments) {
            let (i, q) = (di / self.dt, dq / self.dt);
            acc[0] += i;
            acc[1] += i * i;
            acc[2] += q;
            acc[3] += q * q;
        }
        self.count += 1;
        Ok(())
    }

    pub fn finish(&self) -> Result<Vec<MeanRow>> {
        if self.count == 0 {
            return Err(QsdError::EmptyEnsemble);
        }
        let m = self.count as f64;
        let stat = |s: f64, s2: f64| {
            let mean = s / m;
            let var = if self.count > 1 { ((s2 - m * mean * mean) / (m - 1.0)).max(0.0) } else { 0.0 };
            (mean, (var / m).sqrt())
        };
        Ok(self
            .sums
            .iter()
            .enumerate()
            .map(|(k, a)| {
                let (mean_i, stderr_i) = stat(a[0], a[1]);
                let (mean_q, stderr_q) = stat(a[2], a[3]);
                MeanRow { t: k as f64 * self.dt, mean_i, mean_q, stderr_i, stderr_q, count: self.count }
            })
            .collect())
    }
}

pub fn record_means(recs: &[HeterodyneRecord]) -> Result<Vec<MeanRow>> {
    let first = recs.first().ok_or(QsdError::EmptyEnsemble)?;
    let mut acc = RecordMeanAccumulator::new(first.dt, first.len());
    for r in recs {
        acc.add(r)?;
    }
    acc.finish()
}

pub fn means_to_csv(rows: &[MeanRow]) -> String {
    let mut out = String::from(MEAN_COLUMNS);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            format_time(r.t),
            format_value(r.mean_i),
            format_value(r.mean_q),
            format_value(r.stderr_i),
            format_value(r.stderr_q),
            r.count
        )
        .expect("writing to a String");
    }
    out
}

pub fn parse_means_csv(text: &str, file: &Path) -> Result<Vec<MeanRow>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, h)) if h.trim() == MEAN_COLUMNS => {}
        _ => return Err(parse_err(file, 1, format!("expected header '{MEAN_COLUMNS}'"))),
    }
    let mut rows = Vec::new();
    for (no, raw) in lines.filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = raw.trim().split(',').collect();
        if f.len() != 6 {
            return Err(parse_err(file, no, format!("expected 6 fields, found {}", f.len())));
        }
        let num = |i: usize, name: &str| parse_f64(file, no, f[i], name);
        rows.push(MeanRow {
            t: num(0, "t_us")?,
            mean_i: num(1, "mean_I")?,
            mean_q: num(2, "mean_Q")?,
            stderr_i: num(3, "stderr_I")?,
            stderr_q: num(4, "stderr_Q")?,
            count: f[5]
                .trim()
                .parse()
                .map_err(|_| parse_err(file, no, format!("count: '{}' is not an integer", f[5])))?,
        });
    }
    Ok(rows)
}

// ---- occupancy grid ----

pub fn grid_to_csv(grid: &OccupancyGrid) -> String {
    let mut out = String::from(GRID_COLUMNS);
    out.push('\n');
    for s in &grid.slices {
        let t = format_time(s.time);
        for c in &s.cells {
            writeln!(out, "{t},{},{},{},{}", c.ix, c.iy, c.iz, c.count).expect("writing to a String");
        }
    }
    out
}

/// Cell counts per time, in file order. Slices without occupied cells do not
/// appear in the CSV; use the JSON form for the full grid.
pub fn parse_grid_csv(text: &str, file: &Path) -> Result<Vec<(f64, Vec<CellCount>)>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, h)) if h.trim() == GRID_COLUMNS => {}
        _ => return Err(parse_err(file, 1, format!("expected header '{GRID_COLUMNS}'"))),
    }
    let mut out: Vec<(f64, Vec<CellCount>)> = Vec::new();
    for (no, raw) in lines.filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = raw.trim().split(',').collect();
        if f.len() != 5 {
            return Err(parse_err(file, no, format!("expected 5 fields, found {}", f.len())));
        }
        let t = parse_f64(file, no, f[0], "t_us")?;
        let int = |i: usize, name: &str| -> Result<u64> {
            f[i].trim()
                .parse()
                .map_err(|_| parse_err(file, no, format!("{name}: '{}' is not an integer", f[i])))
        };
        let small = |i: usize, name: &str| -> Result<u32> {
            u32::try_from(int(i, name)?).map_err(|_| parse_err(file, no, format!("{name} out of range")))
        };
        let cell = CellCount {
            ix: small(1, "ix")?,
            iy: small(2, "iy")?,
            iz: small(3, "iz")?,
            count: int(4, "count")?,
        };
        match out.last_mut() {
            Some((last, cells)) if *last == t => cells.push(cell),
            _ => out.push((t, vec![cell])),
        }
    }
    Ok(out)
}

/// Total count of a slice, for consistency checks against the JSON form.
pub fn slice_total(s: &OccupancySlice) -> u64 {
    s.cells.iter().map(|c| c.count).sum()
}

// ---- JSON ----

pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_json_string(value)?.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e.line(), e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::{filter, synthesize, Scheme};
    use crate::state::{InitialState, SimParams};
    use crate::validation::occupancy;
    use proptest::prelude::*;

    fn here() -> &'static Path {
        Path::new("mem.csv")
    }

    fn sample_record() -> HeterodyneRecord {
        synthesize(InitialState::PlusX, &SimParams::reference().with_horizon(2.0), 5).unwrap().0
    }

    #[test]
    fn time_format_examples() {
        assert_eq!(format_time(0.0), "0");
        assert_eq!(format_time(0.2), "0.2");
        assert_eq!(format_time(10.0), "10");
        assert_eq!(format_time(3.0 * 0.001), "0.003");
        assert_eq!(format_time(9999.0 * 0.001), "9.999");
        assert_eq!(format_time(123.456789012), "123.456789");
        assert_eq!(format_time(1.0 / 3.0), "0.333333333");
    }

    #[test]
    fn record_csv_layout() {
        let mut rec = HeterodyneRecord::new(0.2, vec![(0.1, -0.25), (1e-20, 3.0)]);
        rec.provenance = Some(RecordProvenance { gamma1: 0.25, gamma_phi: 0.0, eta: 0.24, seed: 7, index: 3 });
        let csv = record_to_csv(&rec).unwrap();
        assert_eq!(
            csv,
            "# qsd-record v1, dt_us=0.2, gamma1_us=0.25, gamma_phi_us=0.0, eta=0.24, seed=7, index=3\n\
             t_us,dI,dQ\n0,0.1,-0.25\n0.2,1e-20,3.0\n"
        );
        assert_eq!(parse_record_csv(&csv, here()).unwrap(), rec);
    }

    #[test]
    fn record_csv_round_trip_is_exact() {
        let rec = sample_record();
        let back = parse_record_csv(&record_to_csv(&rec).unwrap(), here()).unwrap();
        assert_eq!(back, rec);
        let bin = record_from_binary(&record_to_binary(&rec).unwrap(), here()).unwrap();
        assert_eq!(bin, rec);
    }

    #[test]
    fn column_header_is_optional() {
        let text = "# qsd-record v1, dt_us=0.5, gamma1_us=0.25, gamma_phi_us=0.0, eta=1.0, seed=1, index=0\n0,1.5,2.5\n0.5,-1.0,0.0\n";
        let rec = parse_record_csv(text, here()).unwrap();
        assert_eq!(rec.increments, vec![(1.5, 2.5), (-1.0, 0.0)]);
    }

    fn parse_error_line(text: &str) -> usize {
        match parse_record_csv(text, Path::new("r.csv")) {
            Err(QsdError::Parse { file, line, .. }) => {
                assert_eq!(file, Path::new("r.csv"));
                line
            }
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_records_name_the_line() {
        let head = "# qsd-record v1, dt_us=0.5, gamma1_us=0.25, gamma_phi_us=0.0, eta=1.0, seed=1, index=0\nt_us,dI,dQ\n";
        assert_eq!(parse_error_line(""), 1);
        assert_eq!(parse_error_line("t_us,dI,dQ\n0,1,2\n"), 1);
        assert_eq!(parse_error_line(head), 1);
        assert_eq!(parse_error_line(&format!("{head}0,1,2\n0.5,abc,2\n")), 4);
        assert_eq!(parse_error_line(&format!("{head}0,1\n")), 3);
        assert_eq!(parse_error_line(&format!("{head}0,1,2\n0.7,1,2\n")), 4);
        assert_eq!(parse_error_line(&format!("{head}0,NaN,2\n")), 3);
        assert_eq!(
            parse_error_line("# qsd-record v1, dt_us=0.5, gamma1_us=0.25, eta=1.0, seed=1, index=0\n0,1,2\n"),
            1
        );
        assert_eq!(
            parse_error_line("# qsd-record v1, dt_us=-0.5, gamma1_us=0.25, gamma_phi_us=0, eta=1.0, seed=1, index=0\n0,1,2\n"),
            1
        );
    }

    #[test]
    fn binary_layout_and_errors() {
        let mut rec = HeterodyneRecord::new(0.25, vec![(1.0, -2.0)]);
        rec.provenance = Some(RecordProvenance { gamma1: 0.5, gamma_phi: 0.125, eta: 1.0, seed: 9, index: 2 });
        let b = record_to_binary(&rec).unwrap();
        assert_eq!(b.len(), 4 + 2 + 56 + 16);
        assert_eq!(&b[..6], b"QSDR\x01\x00");
        assert_eq!(&b[6..14], &0.25f64.to_le_bytes());
        assert_eq!(&b[62..70], &1.0f64.to_le_bytes());
        assert!(record_from_binary(&b[..b.len() - 1], here()).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(record_from_binary(&bad, here()).is_err());
        let mut v2 = b.clone();
        v2[4] = 2;
        assert!(record_from_binary(&v2, here()).is_err());
        assert!(record_to_binary(&HeterodyneRecord::new(0.1, vec![(0.0, 0.0)])).is_err());
    }

    #[test]
    fn trajectory_csv_round_trip_and_south_pole() {
        let p = SimParams::reference().with_horizon(2.0);
        let (rec, _) = synthesize(InitialState::PlusX, &p, 1).unwrap();
        let traj = filter(InitialState::PlusX, &rec, &p, Scheme::Kraus).unwrap();
        let rows = trajectory_rows(&traj);
        let csv = trajectory_to_csv(&rows);
        let back = parse_trajectory_csv(&csv, here()).unwrap();
        assert_eq!(back.len(), rows.len());
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(format_time(a.t), format_time(b.t));
            assert_eq!((a.bloch, a.linear_entropy, a.alpha, a.xi), (b.bloch, b.linear_entropy, b.alpha, b.xi));
        }
        let ground = trajectory_to_csv(&[TrajectoryRow::from_state(0.0, &QubitState::ground())]);
        assert_eq!(ground, format!("{TRAJECTORY_COLUMNS}\n0,0.0,0.0,-1.0,0.0,,,\n"));
        let g = parse_trajectory_csv(&ground, here()).unwrap();
        assert_eq!(g[0].alpha, None);
        assert_eq!(g[0].xi, None);
        assert!(parse_trajectory_csv(&format!("{TRAJECTORY_COLUMNS}\n0,0,0,-1,0,,1,\n"), here()).is_err());
    }

    #[test]
    fn means_round_trip() {
        let p = SimParams::reference().with_horizon(1.0);
        let recs: Vec<_> = (0..5).map(|k| synthesize(InitialState::PlusX, &p, k).unwrap().0).collect();
        let rows = record_means(&recs).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[0].count, 5);
        let expect = recs.iter().map(|r| r.increments[2].0).sum::<f64>() / 5.0 / p.dt;
        assert!((rows[2].mean_i - expect).abs() < 1e-12);
        let back = parse_means_csv(&means_to_csv(&rows), here()).unwrap();
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!((a.mean_i, a.mean_q, a.stderr_i, a.stderr_q, a.count), (b.mean_i, b.mean_q, b.stderr_i, b.stderr_q, b.count));
        }
        assert!(record_means(&[]).is_err());
    }

    #[test]
    fn grid_csv_and_json_round_trip() {
        let p = SimParams::reference().with_horizon(2.0);
        let trajs: Vec<_> = (0..30).map(|k| synthesize(InitialState::PlusX, &p, k).unwrap().1).collect();
        let grid = occupancy(&trajs, &[0.0, 1.0, 2.0], 0.04).unwrap();
        let parsed = parse_grid_csv(&grid_to_csv(&grid), here()).unwrap();
        assert_eq!(parsed.len(), 3);
        for ((t, cells), s) in parsed.iter().zip(&grid.slices) {
            assert_eq!(*t, s.time);
            assert_eq!(cells, &s.cells);
            assert_eq!(slice_total(s), 30);
        }
        let json = to_json_string(&grid).unwrap();
        let back: OccupancyGrid = serde_json::from_str(&json).unwrap();
        assert_eq!(back, grid);
    }

    proptest! {
        #[test]
        fn values_round_trip(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            prop_assert_eq!(format_value(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }

        #[test]
        fn time_format_is_idempotent(k in 0u64..10_000_000, dt in prop::sample::select(vec![0.001, 0.01, 0.2, 0.005])) {
            let t = k as f64 * dt;
            let s = format_time(t);
            prop_assert_eq!(format_time(s.parse::<f64>().unwrap()), s.clone());
            prop_assert!((s.parse::<f64>().unwrap() - t).abs() <= 1e-8 * t.max(dt));
        }
    }
}
