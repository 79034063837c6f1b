//! The `cdpc` text format: a header line `cdpc <N> <C> <has_labels>`, then
//! one line `x y z f1 … fC [label]` per point. Values are stored at
//! float32 precision.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

pub fn format_cloud(cloud: &PointCloud) -> String {
    let labels = cloud.labels();
    let mut out = format!("cdpc {} {} {}\n", cloud.len(), cloud.channels(), labels.is_some() as u8);
    for (i, p) in cloud.coords().iter().enumerate() {
        let mut first = true;
        for v in p.iter().chain(cloud.feat_row(i)) {
            if !first {
                out.push(' ');
            }
            first = false;
            write!(out, "{}", *v as f32).expect("write to string");
        }
        if let Some(l) = labels {
            write!(out, " {}", l[i]).expect("write to string");
        }
        out.push('\n');
    }
    out
}

pub fn write_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    fs::write(path, format_cloud(cloud)).map_err(|e| Error::io(path, e))
}

/// Parses `cdpc` text. `path` is only used in error messages.
pub fn parse_cloud(text: &str, path: &Path) -> Result<PointCloud> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hl, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != "cdpc" {
        return Err(err(hl + 1, format!("expected header `cdpc <N> <C> <0|1>`, got `{header}`")));
    }
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| err(hl + 1, format!("invalid {what} `{s}` in header")))
    };
    let n = num(fields[1], "point count")?;
    let c = num(fields[2], "channel count")?;
    let has_labels = match fields[3] {
        "0" => false,
        "1" => true,
        other => return Err(err(hl + 1, format!("has_labels must be 0 or 1, got `{other}`"))),
    };
    if n == 0 {
        return Err(Error::Validation(format!("{}: header declares zero points", path.display())));
    }
    let width = 3 + c + has_labels as usize;
    let mut coords = Vec::with_capacity(n);
    let mut feats = Vec::with_capacity(n * c);
    let mut labels = Vec::with_capacity(if has_labels { n } else { 0 });
    for (li, line) in lines {
        if coords.len() == n {
            return Err(err(li + 1, format!("more than the {n} declared points")));
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != width {
            return Err(err(
                li + 1,
                format!("expected {width} values (3 coords, {c} features{}), got {}", if has_labels { ", label" } else { "" }, toks.len()),
            ));
        }
        let mut vals = Vec::with_capacity(3 + c);
        for t in &toks[..3 + c] {
            let v = t.parse::<f32>().map_err(|_| err(li + 1, format!("invalid number `{t}`")))? as f64;
            if !v.is_finite() {
                return Err(err(li + 1, format!("non-finite value `{t}`")));
            }
            vals.push(v);
        }
        coords.push([vals[0], vals[1], vals[2]]);
        feats.extend_from_slice(&vals[3..]);
        if has_labels {
            let t = toks[3 + c];
            labels.push(t.parse().map_err(|_| err(li + 1, format!("invalid label `{t}`")))?);
        }
    }
    if coords.len() != n {
        return Err(Error::Validation(format!(
            "{}: header declares {n} points, found {}",
            path.display(),
            coords.len()
        )));
    }
    PointCloud::new(coords, feats, c, has_labels.then_some(labels))
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cloud(&text, path)
}

/// Reads a cloud that must carry per-point labels below `classes`.
pub fn read_labeled_cloud(path: &Path, classes: usize) -> Result<PointCloud> {
    let cloud = read_cloud(path)?;
    if cloud.labels().is_none() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: "labels requested but the file has no label column".into(),
        });
    }
    cloud.validate_labels(classes)?;
    Ok(cloud)
}
