//! CSV curves (`t,value`), JSON documents and JSON-lines traces.

use std::path::Path;

use aifopt_core::{TimeAxis, TimeSeries};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, FormatError};
use crate::format::{read_bytes, write_bytes};

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    t: f64,
    value: f64,
}

pub fn encode_curve(c: &TimeSeries) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (j, &value) in c.values().iter().enumerate() {
        w.serialize(Row {
            t: c.axis().time(j),
            value,
        })
        .expect("in-memory CSV write");
    }
    w.into_inner().expect("in-memory CSV flush")
}

pub fn decode_curve(bytes: &[u8]) -> Result<TimeSeries, CliError> {
    let mut r = csv::Reader::from_reader(bytes);
    let headers = r.headers().map_err(table_error)?.clone();
    if headers.iter().collect::<Vec<_>>() != ["t", "value"] {
        return Err(FormatError::Table {
            line: 1,
            message: format!("expected header t,value, found {}", headers.iter().collect::<Vec<_>>().join(",")),
        }
        .into());
    }
    let mut values = Vec::new();
    for row in r.deserialize::<Row>() {
        let row = row.map_err(table_error)?;
        let j = values.len();
        let line = j as u64 + 2;
        if row.t != j as f64 {
            return Err(FormatError::Table {
                line,
                message: format!("time {} where {} was expected (unit sampling)", row.t, j),
            }
            .into());
        }
        if !row.value.is_finite() {
            return Err(FormatError::Table {
                line,
                message: "non-finite value".into(),
            }
            .into());
        }
        values.push(row.value);
    }
    let axis = TimeAxis::new(values.len()).map_err(|_| FormatError::Table {
        line: values.len() as u64 + 1,
        message: format!("a curve needs at least 2 samples, found {}", values.len()),
    })?;
    Ok(TimeSeries::on_axis(axis, values)?)
}

fn table_error(e: csv::Error) -> CliError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    FormatError::Table {
        line,
        message: e.to_string(),
    }
    .into()
}

pub fn read_curve(path: &Path) -> Result<TimeSeries, CliError> {
    decode_curve(&read_bytes(path)?).map_err(|e| e.at(path))
}

pub fn write_curve(c: &TimeSeries, path: &Path) -> Result<(), CliError> {
    write_bytes(path, &encode_curve(c))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_slice(&read_bytes(path)?).map_err(|source| CliError::Json {
        path: path.to_owned(),
        source,
    })
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("serializable value");
    out.push(b'\n');
    out
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    write_bytes(path, &to_json_pretty(value))
}

pub fn encode_jsonl<T: Serialize>(records: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("serializable record");
        out.push(b'\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_roundtrip_is_exact() {
        let c = TimeSeries::new(vec![0.0, 0.1, 1.0 / 3.0, 2.5e-17]).unwrap();
        let bytes = encode_curve(&c);
        assert!(bytes.starts_with(b"t,value\n0.0,0.0\n"));
        assert_eq!(decode_curve(&bytes).unwrap(), c);
    }

    #[test]
    fn bad_curves_rejected() {
        assert!(decode_curve(b"time,value\n0,1\n1,2\n").is_err());
        let e = decode_curve(b"t,value\n0,1\n2,2\n").unwrap_err();
        assert!(e.to_string().contains("line 3"), "{e}");
        assert!(decode_curve(b"t,value\n0,1\n").is_err());
        assert!(decode_curve(b"t,value\n0,1\n1,abc\n").is_err());
    }
}
