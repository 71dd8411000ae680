//! `.vol` / `.lbl` files: raw little-endian f32 payload plus a JSON header
//! stored beside it as `<path>.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CoreError, Result};
use crate::volume::{LabelMask, Volume};

pub const DTYPE: &str = "f32le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: String,
    pub channels: usize,
    pub class_names: Vec<String>,
}

pub fn header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn field<T: DeserializeOwned>(obj: &Map<String, Value>, name: &str) -> Result<T> {
    let v = obj
        .get(name)
        .ok_or_else(|| CoreError::format(name, "missing"))?;
    serde_json::from_value(v.clone()).map_err(|e| CoreError::format(name, e.to_string()))
}

fn parse_header(text: &str) -> Result<Header> {
    let v: Value =
        serde_json::from_str(text).map_err(|e| CoreError::format("header", e.to_string()))?;
    let obj = v
        .as_object()
        .ok_or_else(|| CoreError::format("header", "not a JSON object"))?;
    let h = Header {
        dims: field(obj, "dims")?,
        spacing: field(obj, "spacing")?,
        dtype: field(obj, "dtype")?,
        channels: field(obj, "channels")?,
        class_names: field(obj, "class_names")?,
    };
    if h.dtype != DTYPE {
        return Err(CoreError::format(
            "dtype",
            format!("unsupported {:?}, expected {DTYPE:?}", h.dtype),
        ));
    }
    if h.dims.contains(&0) {
        return Err(CoreError::format(
            "dims",
            format!("zero extent in {:?}", h.dims),
        ));
    }
    if h.channels == 0 {
        return Err(CoreError::format("channels", "must be at least 1"));
    }
    if !h.spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        return Err(CoreError::format("spacing", format!("{:?}", h.spacing)));
    }
    Ok(h)
}

fn write_raw(path: &Path, header: &Header, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| CoreError::io(path, e))?;
    let hp = header_path(path);
    let text = serde_json::to_string_pretty(header).expect("header serializes");
    fs::write(&hp, text).map_err(|e| CoreError::io(hp, e))
}

fn read_raw(path: &Path) -> Result<(Header, Vec<f32>)> {
    let hp = header_path(path);
    let text = fs::read_to_string(&hp).map_err(|e| CoreError::io(&hp, e))?;
    let header = parse_header(&text)?;
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let expected = header.channels * header.dims.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(CoreError::format(
            "payload",
            format!("{} bytes, header implies {expected}", bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((header, data))
}

pub fn save_volume(path: &Path, v: &Volume) -> Result<()> {
    let header = Header {
        dims: v.dims(),
        spacing: v.spacing,
        dtype: DTYPE.into(),
        channels: 1,
        class_names: Vec::new(),
    };
    write_raw(path, &header, v.values())
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let (h, data) = read_raw(path)?;
    if h.channels != 1 {
        return Err(CoreError::format(
            "channels",
            format!("a volume has 1 channel, header says {}", h.channels),
        ));
    }
    let mut v = Volume::new(h.dims, data)?;
    v.spacing = h.spacing;
    Ok(v)
}

pub fn save_labels(path: &Path, l: &LabelMask) -> Result<()> {
    let header = Header {
        dims: l.dims(),
        spacing: [1.0; 3],
        dtype: DTYPE.into(),
        channels: l.classes(),
        class_names: l.class_names.clone(),
    };
    write_raw(path, &header, l.data.data())
}

pub fn load_labels(path: &Path) -> Result<LabelMask> {
    let (h, data) = read_raw(path)?;
    if h.class_names.len() != h.channels {
        return Err(CoreError::format(
            "class_names",
            format!("{} names for {} channels", h.class_names.len(), h.channels),
        ));
    }
    LabelMask::new(h.class_names, h.dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::default_class_names;

    #[test]
    fn volume_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.vol");
        let data: Vec<f32> = (0..60)
            .map(|i| (i as f32 * 0.37).sin() * 1e-3 + f32::MIN_POSITIVE)
            .collect();
        let mut v = Volume::new([3, 4, 5], data).unwrap();
        v.spacing = [1.0, 1.5, 2.0];
        save_volume(&p, &v).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back.dims(), [3, 4, 5]);
        assert_eq!(back.spacing, v.spacing);
        let bits = |v: &Volume| v.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&v));
    }

    #[test]
    fn labels_round_trip_keeps_names() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.lbl");
        let l =
            LabelMask::from_indices(default_class_names(3), [2, 2, 2], &[0, 1, 2, 0, 1, 2, 0, 1])
                .unwrap();
        save_labels(&p, &l).unwrap();
        let back = load_labels(&p).unwrap();
        assert_eq!(back.class_names, l.class_names);
        assert_eq!(back.data.data(), l.data.data());
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.vol");
        save_volume(&p, &Volume::zeros([32, 32, 32])).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 32768 * 4);
        load_volume(&p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        match load_volume(&p) {
            Err(CoreError::Format { field, .. }) => assert_eq!(field, "payload"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn header_errors_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.vol");
        save_volume(&p, &Volume::zeros([2, 2, 2])).unwrap();
        let hp = header_path(&p);
        let cases = [
            (
                r#"{"dims":[2,2,2],"spacing":[1,1,1],"dtype":"f64le","channels":1,"class_names":[]}"#,
                "dtype",
            ),
            (
                r#"{"dims":[2,2],"spacing":[1,1,1],"dtype":"f32le","channels":1,"class_names":[]}"#,
                "dims",
            ),
            (
                r#"{"dims":[2,2,2],"dtype":"f32le","channels":1,"class_names":[]}"#,
                "spacing",
            ),
            (
                r#"{"dims":[2,2,2],"spacing":[1,1,1],"dtype":"f32le","channels":"one","class_names":[]}"#,
                "channels",
            ),
            ("not json", "header"),
        ];
        for (text, want) in cases {
            fs::write(&hp, text).unwrap();
            match load_volume(&p) {
                Err(CoreError::Format { field, .. }) => assert_eq!(field, want, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }
}
