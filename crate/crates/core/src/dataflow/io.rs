//! Binary panel files and returns CSV.
//!
//! Panel layout: `b"GLPN"`, version (u16 LE), dims T, N, W, F (u32 LE each),
//! T·N·W·F values as f32 LE in row-major order, then the (T × N) tradable
//! mask packed 8 per byte, least significant bit first. Day ids are not
//! stored; a panel read back is numbered `0..T`.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{DataError, FeaturePanel, ReturnPanel};

pub const GLPN_MAGIC: [u8; 4] = *b"GLPN";
pub const GLPN_VERSION: u16 = 1;
pub const GLPN_HEADER_LEN: usize = 4 + 2 + 4 * 4;

fn payload_len(dims: [usize; 4]) -> (usize, usize) {
    let values = dims.iter().product::<usize>() * 4;
    let mask = (dims[0] * dims[1]).div_ceil(8);
    (values, mask)
}

pub fn encode_panel(panel: &FeaturePanel) -> Vec<u8> {
    let dims = panel.dims();
    let (values, mask) = payload_len(dims);
    let mut buf = Vec::with_capacity(GLPN_HEADER_LEN + values + mask);
    buf.extend_from_slice(&GLPN_MAGIC);
    buf.extend_from_slice(&GLPN_VERSION.to_le_bytes());
    for d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in panel.data() {
        // f64 NaN payloads do not survive narrowing; write the canonical quiet NaN
        let x = if v.is_nan() { f32::NAN } else { v as f32 };
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let mut bits = vec![0u8; mask];
    for (k, &t) in panel.tradable().iter().enumerate() {
        if t {
            bits[k / 8] |= 1 << (k % 8);
        }
    }
    buf.extend_from_slice(&bits);
    buf
}

pub fn decode_panel(bytes: &[u8]) -> Result<FeaturePanel, DataError> {
    let truncated = |expected: usize| DataError::Truncated {
        expected: expected as u64,
        actual: bytes.len() as u64,
    };
    if bytes.len() < 4 {
        return Err(truncated(GLPN_HEADER_LEN));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != GLPN_MAGIC {
        return Err(DataError::BadMagic(magic));
    }
    if bytes.len() < GLPN_HEADER_LEN {
        return Err(truncated(GLPN_HEADER_LEN));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != GLPN_VERSION {
        return Err(DataError::BadVersion(version));
    }
    let mut dims = [0usize; 4];
    for (k, d) in dims.iter_mut().enumerate() {
        let o = 6 + 4 * k;
        *d = u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    }
    let (values, mask) = payload_len(dims);
    let expected = GLPN_HEADER_LEN + values + mask;
    if bytes.len() != expected {
        return Err(truncated(expected));
    }
    let body = &bytes[GLPN_HEADER_LEN..GLPN_HEADER_LEN + values];
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let bits = &bytes[GLPN_HEADER_LEN + values..];
    let tradable = (0..dims[0] * dims[1]).map(|k| bits[k / 8] >> (k % 8) & 1 == 1).collect();
    FeaturePanel::new(dims, data, (0..dims[0] as i64).collect(), tradable)
}

pub fn write_panel(panel: &FeaturePanel, path: &Path) -> Result<(), DataError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_panel(panel))?;
    Ok(())
}

pub fn read_panel(path: &Path) -> Result<FeaturePanel, DataError> {
    decode_panel(&fs::read(path)?)
}

/// Columns `day_id, benchmark, r_0, …, r_{N-1}`; floats use the shortest
/// representation that parses back to the same bits.
pub fn write_returns_csv(returns: &ReturnPanel, path: &Path) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    let n = returns.n_instruments();
    let mut header = vec!["day_id".to_string(), "benchmark".to_string()];
    header.extend((0..n).map(|i| format!("r_{i}")));
    w.write_record(&header)?;
    for d in 0..returns.n_days() {
        let mut row = vec![returns.day_ids()[d].to_string(), returns.benchmark()[d].to_string()];
        row.extend(returns.day(d).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_returns_csv(path: &Path) -> Result<ReturnPanel, DataError> {
    let mut rd = csv::Reader::from_path(path)?;
    let n = rd
        .headers()?
        .len()
        .checked_sub(2)
        .filter(|&n| n > 0)
        .ok_or_else(|| DataError::Returns("expected day_id, benchmark and at least one return column".into()))?;
    let mut day_ids = Vec::new();
    let mut benchmark = Vec::new();
    let mut returns = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| DataError::Returns(format!("row {}: {what}", line + 1));
        day_ids.push(rec[0].parse::<i64>().map_err(|_| bad("day_id is not an integer"))?);
        benchmark.push(rec[1].parse::<f64>().map_err(|_| bad("benchmark is not a number"))?);
        for field in rec.iter().skip(2) {
            returns.push(field.parse::<f64>().map_err(|_| bad("return is not a number"))?);
        }
    }
    ReturnPanel::new(n, returns, benchmark, day_ids)
}
