//! Line-delimited dataset interchange format.
//!
//! One JSON object per line with a `type` discriminator. Timestamps are
//! written as decimal seconds with nine fractional digits; producers
//! quantize times to integer nanoseconds so that writing and re-reading a
//! dataset is lossless and byte-identical.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde_json::Value;
use thiserror::Error;

use crate::ekf::{ImuSample, OdomSample};
use crate::geom::Timestamp;
use crate::preprocess::{AnchorMap, UwbRangeMeasurement};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown record type {kind:?}")]
    UnknownType { line: usize, kind: String },
    #[error("{stream} stream is non-monotone at line {line}")]
    NonMonotone { stream: &'static str, line: usize },
}

/// One timestamped sensor record (or stream metadata).
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetRecord {
    /// Anchor survey entry; emitted at the head of the stream.
    Anchor { id: String, position: Vector3<f64> },
    /// Initial pose of the platform in the survey frame.
    Init {
        t: Timestamp,
        position: Vector3<f64>,
        yaw: f64,
    },
    Uwb(UwbRangeMeasurement),
    Imu(ImuSample),
    Odom(OdomSample),
}

/// Round to integer nanoseconds so `{:.9}` prints exactly.
pub fn quantize_time(t: f64) -> f64 {
    (t * 1e9).round() / 1e9
}

fn fmt_t(t: Timestamp) -> String {
    format!("{:.9}", t.seconds())
}

impl DatasetRecord {
    /// Serialize as one JSON line.
    pub fn to_line(&self) -> String {
        let mut s = String::new();
        match self {
            DatasetRecord::Anchor { id, position } => {
                write!(
                    s,
                    r#"{{"type":"anchor","id":"{}","pos":[{},{},{}]}}"#,
                    id, position.x, position.y, position.z
                )
                .unwrap();
            }
            DatasetRecord::Init { t, position, yaw } => {
                write!(
                    s,
                    r#"{{"type":"init","t":{},"pos":[{},{},{}],"yaw":{}}}"#,
                    fmt_t(*t),
                    position.x,
                    position.y,
                    position.z,
                    yaw
                )
                .unwrap();
            }
            DatasetRecord::Uwb(m) => {
                write!(
                    s,
                    r#"{{"type":"uwb","t":{},"anchor":"{}","range":{},"sigma":{}}}"#,
                    fmt_t(m.t),
                    m.anchor_id,
                    m.range,
                    m.sigma
                )
                .unwrap();
            }
            DatasetRecord::Imu(m) => {
                write!(
                    s,
                    r#"{{"type":"imu","t":{},"gyro":[{},{},{}],"accel":[{},{},{}]}}"#,
                    fmt_t(m.t),
                    m.gyro.x,
                    m.gyro.y,
                    m.gyro.z,
                    m.accel.x,
                    m.accel.y,
                    m.accel.z
                )
                .unwrap();
            }
            DatasetRecord::Odom(m) => {
                write!(
                    s,
                    r#"{{"type":"odom","t":{},"v":{},"omega":{}}}"#,
                    fmt_t(m.t),
                    m.linear_velocity,
                    m.angular_velocity
                )
                .unwrap();
            }
        }
        s
    }

    pub fn t(&self) -> Option<Timestamp> {
        match self {
            DatasetRecord::Anchor { .. } => None,
            DatasetRecord::Init { t, .. } => Some(*t),
            DatasetRecord::Uwb(m) => Some(m.t),
            DatasetRecord::Imu(m) => Some(m.t),
            DatasetRecord::Odom(m) => Some(m.t),
        }
    }
}

fn field<'v>(v: &'v Value, key: &str, line: usize) -> Result<&'v Value, DatasetError> {
    v.get(key).ok_or_else(|| DatasetError::Parse {
        line,
        message: format!("missing field {key:?}"),
    })
}

fn as_f64(v: &Value, key: &str, line: usize) -> Result<f64, DatasetError> {
    field(v, key, line)?
        .as_f64()
        .ok_or_else(|| DatasetError::Parse {
            line,
            message: format!("field {key:?} is not a number"),
        })
}

fn as_vec3(v: &Value, key: &str, line: usize) -> Result<Vector3<f64>, DatasetError> {
    let arr = field(v, key, line)?
        .as_array()
        .filter(|a| a.len() == 3)
        .ok_or_else(|| DatasetError::Parse {
            line,
            message: format!("field {key:?} is not a 3-array"),
        })?;
    let mut out = Vector3::zeros();
    for (i, x) in arr.iter().enumerate() {
        out[i] = x.as_f64().ok_or_else(|| DatasetError::Parse {
            line,
            message: format!("field {key:?}[{i}] is not a number"),
        })?;
    }
    Ok(out)
}

/// Parse one line.
pub fn parse_line(text: &str, line: usize) -> Result<DatasetRecord, DatasetError> {
    let v: Value = serde_json::from_str(text).map_err(|e| DatasetError::Parse {
        line,
        message: e.to_string(),
    })?;
    let kind = field(&v, "type", line)?
        .as_str()
        .ok_or_else(|| DatasetError::Parse {
            line,
            message: "field \"type\" is not a string".into(),
        })?
        .to_string();
    match kind.as_str() {
        "anchor" => Ok(DatasetRecord::Anchor {
            id: field(&v, "id", line)?
                .as_str()
                .ok_or_else(|| DatasetError::Parse {
                    line,
                    message: "field \"id\" is not a string".into(),
                })?
                .to_string(),
            position: as_vec3(&v, "pos", line)?,
        }),
        "init" => Ok(DatasetRecord::Init {
            t: Timestamp::new(as_f64(&v, "t", line)?),
            position: as_vec3(&v, "pos", line)?,
            yaw: as_f64(&v, "yaw", line)?,
        }),
        "uwb" => Ok(DatasetRecord::Uwb(UwbRangeMeasurement {
            t: Timestamp::new(as_f64(&v, "t", line)?),
            anchor_id: field(&v, "anchor", line)?
                .as_str()
                .ok_or_else(|| DatasetError::Parse {
                    line,
                    message: "field \"anchor\" is not a string".into(),
                })?
                .to_string(),
            range: as_f64(&v, "range", line)?,
            sigma: as_f64(&v, "sigma", line)?,
        })),
        "imu" => Ok(DatasetRecord::Imu(ImuSample {
            t: Timestamp::new(as_f64(&v, "t", line)?),
            gyro: as_vec3(&v, "gyro", line)?,
            accel: as_vec3(&v, "accel", line)?,
        })),
        "odom" => Ok(DatasetRecord::Odom(OdomSample {
            t: Timestamp::new(as_f64(&v, "t", line)?),
            linear_velocity: as_f64(&v, "v", line)?,
            angular_velocity: as_f64(&v, "omega", line)?,
        })),
        other => Err(DatasetError::UnknownType {
            line,
            kind: other.to_string(),
        }),
    }
}

/// Write records as one JSON object per line.
pub fn write_records<W: Write>(mut w: W, records: &[DatasetRecord]) -> Result<(), DatasetError> {
    for r in records {
        writeln!(w, "{}", r.to_line())?;
    }
    Ok(())
}

pub fn save_records(path: &Path, records: &[DatasetRecord]) -> Result<(), DatasetError> {
    let f = std::fs::File::create(path)?;
    write_records(std::io::BufWriter::new(f), records)
}

/// A dataset split back into validated per-sensor streams.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub anchors: AnchorMap,
    pub initial: Option<(Timestamp, Vector3<f64>, f64)>,
    pub uwb: Vec<UwbRangeMeasurement>,
    pub imu: Vec<ImuSample>,
    pub odom: Vec<OdomSample>,
}

impl Dataset {
    pub fn from_records(records: Vec<DatasetRecord>) -> Self {
        let mut out = Dataset::default();
        for r in records {
            match r {
                DatasetRecord::Anchor { id, position } => {
                    out.anchors.insert(id, position);
                }
                DatasetRecord::Init { t, position, yaw } => {
                    out.initial = Some((t, position, yaw));
                }
                DatasetRecord::Uwb(m) => out.uwb.push(m),
                DatasetRecord::Imu(m) => out.imu.push(m),
                DatasetRecord::Odom(m) => out.odom.push(m),
            }
        }
        out
    }

    pub fn duration(&self) -> f64 {
        let lo = self
            .imu
            .first()
            .map(|s| s.t.seconds())
            .unwrap_or(f64::INFINITY);
        let hi = self.imu.last().map(|s| s.t.seconds()).unwrap_or(0.0);
        (hi - lo).max(0.0)
    }
}

/// Read records from a reader, rejecting malformed lines with their line
/// number and validating per-stream monotonicity.
pub fn read_records<R: BufRead>(r: R) -> Result<Vec<DatasetRecord>, DatasetError> {
    let mut records = Vec::new();
    let mut last: std::collections::HashMap<&'static str, (f64, usize)> = Default::default();
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let rec = parse_line(&text, line_no)?;
        let stream = match &rec {
            DatasetRecord::Uwb(_) => Some("uwb"),
            DatasetRecord::Imu(_) => Some("imu"),
            DatasetRecord::Odom(_) => Some("odom"),
            _ => None,
        };
        if let (Some(stream), Some(t)) = (stream, rec.t()) {
            if let Some(&(prev, _)) = last.get(stream) {
                if t.seconds() < prev {
                    return Err(DatasetError::NonMonotone {
                        stream,
                        line: line_no,
                    });
                }
            }
            last.insert(stream, (t.seconds(), line_no));
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn load_records(path: &Path) -> Result<Vec<DatasetRecord>, DatasetError> {
    let f = std::fs::File::open(path)?;
    read_records(std::io::BufReader::new(f))
}

/// Load and split a dataset file.
pub fn load_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    Ok(Dataset::from_records(load_records(path)?))
}
