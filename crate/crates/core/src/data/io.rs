//! `manifest.json` plus `flow.csv` (day,node,c0..), `poi.csv` (month,node,k0..)
//! and `adj.csv` (src,dst,weight).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DatasetBundle, Splits};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFiles {
    pub flow: String,
    pub poi: String,
    pub adjacency: String,
}

impl Default for ManifestFiles {
    fn default() -> Self {
        Self {
            flow: "flow.csv".into(),
            poi: "poi.csv".into(),
            adjacency: "adj.csv".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub nodes: usize,
    pub channels: usize,
    pub categories: usize,
    pub days: usize,
    pub months: usize,
    pub node_ids: Vec<String>,
    pub category_names: Vec<String>,
    /// Month index of every day.
    pub day_to_month: Vec<usize>,
    pub splits: Splits,
    #[serde(default)]
    pub files: ManifestFiles,
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

/// Reads a `(time, node, v0..v{width-1})` table into `steps × nodes × width`.
fn read_series(path: &Path, time_col: &str, steps: usize, nodes: usize, width: usize) -> Result<Tensor> {
    let mut rdr = csv_reader(path)?;
    let headers = rdr.headers().map_err(|e| Error::data(path, e.to_string()))?.clone();
    if headers.len() != width + 2 {
        return Err(Error::data(
            path,
            format!("header has {} value columns, manifest declares {width}", headers.len().saturating_sub(2)),
        ));
    }
    if &headers[0] != time_col || &headers[1] != "node" {
        return Err(Error::data(path, format!("header must start with `{time_col},node`")));
    }
    let mut data = vec![f64::NAN; steps * nodes * width];
    let mut seen = vec![false; steps * nodes];
    let mut seen_nodes = vec![false; nodes];
    let mut max_node = 0usize;
    let mut prev_time = 0usize;
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::data(path, format!("row {row}: {e}")))?;
        let err = |m: String| Error::data(path, format!("row {row}: {m}"));
        if rec.len() != width + 2 {
            return Err(err(format!("{} columns, expected {}", rec.len(), width + 2)));
        }
        let index = |j: usize| {
            rec[j]
                .parse::<usize>()
                .map_err(|_| err(format!("`{}` is not a non-negative integer", &rec[j])))
        };
        let (t, node) = (index(0)?, index(1)?);
        if t < prev_time {
            return Err(err(format!("{time_col} {t} follows {prev_time}; rows must be in time order")));
        }
        prev_time = t;
        max_node = max_node.max(node);
        if t >= steps {
            return Err(err(format!("{time_col} {t} beyond the declared {steps}")));
        }
        if node >= nodes {
            return Err(err(format!("node {node} but the manifest declares {nodes} nodes")));
        }
        if std::mem::replace(&mut seen[t * nodes + node], true) {
            return Err(err(format!("duplicate entry for {time_col} {t}, node {node}")));
        }
        seen_nodes[node] = true;
        for j in 0..width {
            let v: f64 = rec[j + 2]
                .parse()
                .map_err(|_| err(format!("`{}` is not a number", &rec[j + 2])))?;
            if !v.is_finite() {
                return Err(err(format!("non-finite value `{}`", &rec[j + 2])));
            }
            data[(t * nodes + node) * width + j] = v;
        }
    }
    let covered = seen_nodes.iter().filter(|s| **s).count();
    if covered != nodes {
        return Err(Error::data(
            path,
            format!("manifest declares {nodes} nodes but the file covers {covered}"),
        ));
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::data(
            path,
            format!("missing entry for {time_col} {}, node {}", i / nodes, i % nodes),
        ));
    }
    Tensor::new(&[steps, nodes, width], data)
}

fn read_adjacency(path: &Path, nodes: usize) -> Result<Tensor> {
    let mut rdr = csv_reader(path)?;
    let mut a = vec![0.0; nodes * nodes];
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::data(path, format!("row {row}: {e}")))?;
        let err = |m: String| Error::data(path, format!("row {row}: {m}"));
        if rec.len() != 3 {
            return Err(err("expected src,dst,weight".into()));
        }
        let idx = |j: usize| -> Result<usize> {
            let v: usize = rec[j].parse().map_err(|_| err(format!("bad node `{}`", &rec[j])))?;
            if v >= nodes {
                return Err(err(format!("node {v} but the manifest declares {nodes} nodes")));
            }
            Ok(v)
        };
        let (s, d) = (idx(0)?, idx(1)?);
        let w: f64 = rec[2].parse().map_err(|_| err(format!("bad weight `{}`", &rec[2])))?;
        if !(w.is_finite() && w >= 0.0) {
            return Err(err(format!("weight {w} must be finite and non-negative")));
        }
        a[s * nodes + d] = w;
    }
    Tensor::new(&[nodes, nodes], a)
}

pub fn load(manifest_path: &Path) -> Result<DatasetBundle> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::data(manifest_path, e.to_string()))?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let flow = read_series(&dir.join(&m.files.flow), "day", m.days, m.nodes, m.channels)?;
    let poi = read_series(&dir.join(&m.files.poi), "month", m.months, m.nodes, m.categories)?;
    let adjacency = read_adjacency(&dir.join(&m.files.adjacency), m.nodes)?;
    let bundle = DatasetBundle {
        name: m.name,
        flow,
        poi,
        adjacency,
        node_ids: m.node_ids,
        category_names: m.category_names,
        day_to_month: m.day_to_month,
        splits: m.splits,
        norm_stats: None,
    };
    bundle
        .validate()
        .map_err(|e| Error::data(manifest_path, e.to_string()))?;
    Ok(bundle)
}

fn write_series(path: &Path, time_col: &str, prefix: &str, t: &Tensor) -> Result<()> {
    let (steps, nodes, width) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(path, e.to_string()))?;
    let io = |e: csv::Error| Error::data(path, e.to_string());
    let mut header = vec![time_col.to_string(), "node".to_string()];
    header.extend((0..width).map(|j| format!("{prefix}{j}")));
    w.write_record(&header).map_err(io)?;
    for s in 0..steps {
        for n in 0..nodes {
            let mut rec = vec![s.to_string(), n.to_string()];
            let base = (s * nodes + n) * width;
            rec.extend(t.data()[base..base + width].iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the bundle's raw tensors in the format [`load`] reads. Returns the
/// manifest path.
pub fn save(bundle: &DatasetBundle, dir: &Path) -> Result<PathBuf> {
    if bundle.norm_stats.is_some() {
        return Err(Error::invalid("refusing to save a normalized bundle"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ManifestFiles::default();
    write_series(&dir.join(&files.flow), "day", "c", &bundle.flow)?;
    write_series(&dir.join(&files.poi), "month", "k", &bundle.poi)?;
    let adj_path = dir.join(&files.adjacency);
    let mut w = csv::Writer::from_path(&adj_path).map_err(|e| Error::data(&adj_path, e.to_string()))?;
    let io = |e: csv::Error| Error::data(&adj_path, e.to_string());
    w.write_record(["src", "dst", "weight"]).map_err(io)?;
    let n = bundle.n();
    for (i, v) in bundle.adjacency.data().iter().enumerate() {
        if *v != 0.0 {
            w.write_record(&[(i / n).to_string(), (i % n).to_string(), v.to_string()])
                .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(&adj_path, e))?;
    let manifest = Manifest {
        name: bundle.name.clone(),
        nodes: n,
        channels: bundle.c(),
        categories: bundle.k(),
        days: bundle.days(),
        months: bundle.months(),
        node_ids: bundle.node_ids.clone(),
        category_names: bundle.category_names.clone(),
        day_to_month: bundle.day_to_month.clone(),
        splits: bundle.splits,
        files,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
