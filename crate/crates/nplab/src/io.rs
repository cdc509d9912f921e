// SPDX-License-Identifier: Apache-2.0

//! Net JSON, dataset CSV and config files. Every write goes to a temporary
//! sibling first and is renamed into place.

use std::fs;
use std::path::{Path, PathBuf};

use npcore::{Activation, Dataset, Mat, Net};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetFile {
    activation: Activation,
    /// Row-major entries of each weight matrix.
    layers: Vec<Vec<f64>>,
    shapes: Vec<[usize; 2]>,
}

pub fn net_to_json(net: &Net) -> String {
    let f = NetFile {
        activation: net.act,
        layers: net.layers.iter().map(|w| w.as_slice().to_vec()).collect(),
        shapes: net.layers.iter().map(|w| [w.rows(), w.cols()]).collect(),
    };
    serde_json::to_string_pretty(&f).expect("net serializes")
}

pub fn net_from_json(s: &str) -> Result<Net, CliError> {
    let f: NetFile = parse_json(s, "net")?;
    if f.layers.len() != f.shapes.len() {
        return Err(CliError::Config("net: `layers` and `shapes` differ in length".into()));
    }
    let mut layers = Vec::with_capacity(f.layers.len());
    for (i, (v, [r, c])) in f.layers.into_iter().zip(f.shapes).enumerate() {
        if v.len() != r * c {
            return Err(CliError::Config(format!("net: layers[{i}] has {} entries, shape needs {}", v.len(), r * c)));
        }
        layers.push(Mat::from_vec(r, c, v));
    }
    Ok(Net::new(layers, f.activation)?)
}

pub fn read_net(path: &Path) -> Result<Net, CliError> {
    net_from_json(&read(path)?)
}

/// Header `x0..x{d-1},y0..y{m-1}`, one sample per row.
pub fn dataset_to_csv(data: &Dataset) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let head: Vec<String> =
        (0..data.d()).map(|i| format!("x{i}")).chain((0..data.m()).map(|i| format!("y{i}"))).collect();
    w.write_record(&head).expect("in-memory write");
    for j in 0..data.n() {
        let row: Vec<String> = (0..data.d())
            .map(|i| data.x[(i, j)])
            .chain((0..data.m()).map(|i| data.y[(i, j)]))
            .map(|v| format!("{v:?}"))
            .collect();
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

pub fn dataset_from_csv(s: &str) -> Result<Dataset, CliError> {
    let mut r = csv::Reader::from_reader(s.as_bytes());
    let head = r.headers().map_err(|e| CliError::Config(format!("dataset: {e}")))?.clone();
    let d = head.iter().filter(|h| h.starts_with('x')).count();
    let m = head.iter().filter(|h| h.starts_with('y')).count();
    if d == 0 || m == 0 || d + m != head.len() {
        return Err(CliError::Config("dataset: header must be x0..,y0..".into()));
    }
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Config(format!("dataset: {e}")))?;
        let row = rec
            .iter()
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Config(format!("dataset: row {}: {e}", k + 1)))?;
        cols.push(row);
    }
    let n = cols.len();
    let x = Mat::from_fn(d, n, |i, j| cols[j][i]);
    let y = Mat::from_fn(m, n, |i, j| cols[j][d + i]);
    Ok(Dataset::new(x, y)?)
}

pub fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    dataset_from_csv(&read(path)?)
}

pub fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Deserialize `s`, naming the offending field on failure.
pub fn parse_json<T: DeserializeOwned>(s: &str, what: &str) -> Result<T, CliError> {
    let de = &mut serde_json::Deserializer::from_str(s);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("{what}: field `{path}`: {}", e.inner()))
    })
}

/// Load a config file, or the defaults when none is given. Returns the
/// parsed value and the raw text to echo.
pub fn load_config<T: DeserializeOwned + Default + Serialize>(path: Option<&Path>) -> Result<(T, String), CliError> {
    match path {
        Some(p) => {
            let raw = read(p)?;
            Ok((parse_json(&raw, &p.display().to_string())?, raw))
        }
        None => {
            let v = T::default();
            let raw = serde_json::to_string_pretty(&v).expect("config serializes");
            Ok((v, raw))
        }
    }
}

pub fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut tmp = PathBuf::from(path);
    let name = format!(".{}.tmp", path.file_name().and_then(|n| n.to_str()).unwrap_or("out"));
    tmp.set_file_name(name);
    fs::write(&tmp, contents).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(v).expect("summary serializes");
    s.push('\n');
    write_atomic(path, &s)
}

/// Write rows of numbers (or strings) under `header`.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    let s = String::from_utf8(w.into_inner().expect("flush")).expect("utf8");
    write_atomic(path, &s)
}

/// Shortest round-trip decimal form; `NaN` and infinities pass through.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn net_roundtrip() {
        let net = Net::new(
            vec![Mat::from_rows(&[&[1.0, -2.5], &[0.1, 3.0]]), Mat::from_rows(&[&[0.25, 1e-17]])],
            Activation::leaky(0.5),
        )
        .unwrap();
        assert_eq!(net_from_json(&net_to_json(&net)).unwrap(), net);
    }

    #[test]
    fn dataset_roundtrip() {
        let d = Dataset::new(Mat::from_rows(&[&[1.0, 2.0, 3.0], &[0.1, 0.2, 1.0 / 3.0]]), Mat::from_rows(&[&[-1.0, 0.0, 1.0]])).unwrap();
        assert_eq!(dataset_from_csv(&dataset_to_csv(&d)).unwrap(), d);
    }

    #[test]
    fn bad_shape_names_layer() {
        let s = r#"{"activation":{"p":1,"alpha":0.0},"layers":[[1,2,3]],"shapes":[[2,2]]}"#;
        let e = net_from_json(s).unwrap_err().to_string();
        assert!(e.contains("layers[0]"), "{e}");
    }

    #[test]
    fn config_error_points_at_field() {
        #[derive(Deserialize, Debug)]
        #[allow(dead_code)]
        struct C {
            a: u32,
        }
        let e = parse_json::<C>(r#"{"a": "x"}"#, "cfg").unwrap_err().to_string();
        assert!(e.contains("`a`"), "{e}");
    }
}
