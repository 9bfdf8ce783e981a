//! Station observation CSV: `station_id,lat,lon,day,value`, UTF-8, one
//! record per row.

use super::IoError;
use crate::grid::StationRecord;
use std::fs;
use std::io::Write;
use std::path::Path;

const HEADER: &str = "station_id,lat,lon,day,value";

pub fn write_station_csv(records: &[StationRecord], path: &Path) -> Result<(), IoError> {
    let mut out = String::with_capacity(records.len() * 32 + 32);
    out.push_str(HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.station_id, r.lat, r.lon, r.day, r.value
        ));
    }
    let mut file = fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

fn parse_finite(s: &str, line: usize, what: &str) -> Result<f64, IoError> {
    let v: f64 = s.trim().parse().map_err(|_| IoError::Parse {
        line,
        msg: format!("cannot parse {what} from {s:?}"),
    })?;
    if !v.is_finite() {
        return Err(IoError::Parse {
            line,
            msg: format!("{what} must be finite, found {s:?}"),
        });
    }
    Ok(v)
}

pub fn read_station_csv(path: &Path) -> Result<Vec<StationRecord>, IoError> {
    let text = fs::read(path)?;
    let text = String::from_utf8(text).map_err(|e| IoError::Parse {
        line: 0,
        msg: format!("file is not valid UTF-8: {e}"),
    })?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == HEADER => {}
        Some((_, h)) => {
            return Err(IoError::Parse {
                line: 1,
                msg: format!("expected header {HEADER:?}, found {h:?}"),
            })
        }
        None => {
            return Err(IoError::Parse {
                line: 1,
                msg: "empty file".into(),
            })
        }
    }

    let mut records = Vec::new();
    for (i, raw) in lines {
        let line_no = i + 1;
        let row = raw.trim_end();
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 5 {
            return Err(IoError::Parse {
                line: line_no,
                msg: format!("expected 5 comma-separated fields, found {}", fields.len()),
            });
        }
        let station_id = fields[0].trim().to_string();
        if station_id.is_empty() {
            return Err(IoError::Parse {
                line: line_no,
                msg: "empty station_id".into(),
            });
        }
        let lat = parse_finite(fields[1], line_no, "lat")?;
        let lon = parse_finite(fields[2], line_no, "lon")?;
        let day: i64 = fields[3].trim().parse().map_err(|_| IoError::Parse {
            line: line_no,
            msg: format!("cannot parse day from {:?}", fields[3]),
        })?;
        let value = parse_finite(fields[4], line_no, "value")?;
        if value < 0.0 {
            return Err(IoError::Parse {
                line: line_no,
                msg: format!("value must be >= 0, found {value}"),
            });
        }
        records.push(StationRecord {
            station_id,
            lat,
            lon,
            day,
            value,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn tmpdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("csv_test_{}", rand::random::<u64>()));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn round_trip_preserves_records() {
        let dir = tmpdir();
        let path = dir.join("s.csv");
        let records = vec![
            StationRecord {
                station_id: "s0".into(),
                lat: 52.123456,
                lon: -7.6543,
                day: 0,
                value: 14.25,
            },
            StationRecord {
                station_id: "s1".into(),
                lat: 53.0,
                lon: -8.0,
                day: 484,
                value: 0.0,
            },
        ];
        write_station_csv(&records, &path).unwrap();
        let back = read_station_csv(&path).unwrap();
        assert_eq!(back, records);
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn malformed_rows_name_their_line() {
        let dir = tmpdir();
        let path = dir.join("bad.csv");
        for (content, needle) in [
            ("nope\ns0,1,2,0,3\n", "header"),
            ("station_id,lat,lon,day,value\ns0,1,2,0\n", "5 comma-separated"),
            ("station_id,lat,lon,day,value\ns0,abc,2,0,3\n", "lat"),
            ("station_id,lat,lon,day,value\ns0,NaN,2,0,3\n", "finite"),
            ("station_id,lat,lon,day,value\ns0,1,2,0,-3\n", ">= 0"),
            ("station_id,lat,lon,day,value\ns0,1,2,1.5,3\n", "day"),
        ] {
            fs::write(&path, content).unwrap();
            let err = read_station_csv(&path).unwrap_err().to_string();
            assert!(err.contains("line"), "diagnostic has a line number: {err}");
            assert!(err.contains(needle), "{err} should mention {needle}");
        }
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn header_only_file_yields_zero_records() {
        let dir = tmpdir();
        let path = dir.join("empty.csv");
        fs::write(&path, "station_id,lat,lon,day,value\n").unwrap();
        assert!(read_station_csv(&path).unwrap().is_empty());
        fs::remove_dir_all(dir).unwrap();
    }
}
