//! Dataset ingest: the canonical CSV layout, Abilene-style flat files,
//! GEANT-style XML, gap imputation and the train/test split.
//!
//! Every on-disk format is 1-based (nodes, links, OD columns). Values are kbps.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::netmodel::{link_counts, od_col, LinkSeries, RoutingMatrix, Topology, TrafficSeries};

/// A topology, its routing and a traffic series that all agree on `n` and `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub topology: Topology,
    pub routing: RoutingMatrix,
    pub traffic: TrafficSeries,
    pub provenance: String,
}

impl DatasetBundle {
    pub fn new(topology: Topology, routing: RoutingMatrix, traffic: TrafficSeries, provenance: impl Into<String>) -> Result<Self> {
        if topology.node_count() != routing.node_count() || routing.node_count() != traffic.node_count {
            return Err(Error::arg(format!(
                "node counts disagree: topology {}, routing {}, traffic {}",
                topology.node_count(),
                routing.node_count(),
                traffic.node_count
            )));
        }
        if topology.link_count() != routing.link_count() {
            return Err(Error::arg(format!(
                "link counts disagree: topology {}, routing {}",
                topology.link_count(),
                routing.link_count()
            )));
        }
        Ok(DatasetBundle {
            topology,
            routing,
            traffic,
            provenance: provenance.into(),
        })
    }

    pub fn node_count(&self) -> usize {
        self.routing.node_count()
    }

    pub fn link_count(&self) -> usize {
        self.routing.link_count()
    }

    pub fn len(&self) -> usize {
        self.traffic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traffic.is_empty()
    }

    /// Link loads implied by the routing, `Y = A X`.
    pub fn link_series(&self) -> LinkSeries {
        link_counts(&self.routing, &self.traffic).expect("bundle dimensions were validated")
    }

    fn with_traffic(&self, traffic: TrafficSeries) -> DatasetBundle {
        DatasetBundle {
            topology: self.topology.clone(),
            routing: self.routing.clone(),
            traffic,
            provenance: self.provenance.clone(),
        }
    }
}

/// Training and test window lengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub train_len: usize,
    pub test_len: usize,
}

impl SplitSpec {
    pub const ABILENE: SplitSpec = SplitSpec {
        train_len: 500,
        test_len: 1500,
    };
    pub const GEANT: SplitSpec = SplitSpec {
        train_len: 1500,
        test_len: 500,
    };

    pub fn new(train_len: usize, test_len: usize) -> Result<Self> {
        if train_len == 0 || test_len == 0 {
            return Err(Error::arg("train and test lengths must be at least 1"));
        }
        Ok(SplitSpec { train_len, test_len })
    }
}

/// Contiguous prefix (training) and the block right after it (test).
pub fn split(bundle: &DatasetBundle, spec: SplitSpec) -> Result<(DatasetBundle, DatasetBundle)> {
    if spec.train_len == 0 || spec.test_len == 0 {
        return Err(Error::arg("train and test lengths must be at least 1"));
    }
    if spec.train_len + spec.test_len > bundle.len() {
        return Err(Error::arg(format!(
            "split {}+{} exceeds the {} available samples",
            spec.train_len,
            spec.test_len,
            bundle.len()
        )));
    }
    let train = bundle.with_traffic(bundle.traffic.slice(0, spec.train_len));
    let test = bundle.with_traffic(bundle.traffic.slice(spec.train_len, spec.test_len));
    Ok((train, test))
}

/// Traffic rows before imputation; `None` marks a missing measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    node_count: usize,
    rows: Vec<Vec<Option<f64>>>,
    pub timestep_seconds: f64,
    pub start_index: usize,
}

impl RawSeries {
    pub fn new(node_count: usize, rows: Vec<Vec<Option<f64>>>, timestep_seconds: f64, start_index: usize) -> Result<Self> {
        let width = node_count * node_count;
        for (t, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(Error::arg(format!("row {t} has {} values, expected {width}", row.len())));
            }
            if let Some(v) = row.iter().flatten().find(|v| !v.is_finite() || **v < 0.0) {
                return Err(Error::arg(format!("row {t} holds invalid value {v}")));
            }
        }
        if !(timestep_seconds > 0.0) {
            return Err(Error::arg("timestep must be positive"));
        }
        Ok(RawSeries {
            node_count,
            rows,
            timestep_seconds,
            start_index,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn rows(&self) -> &[Vec<Option<f64>>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn gap_count(&self) -> usize {
        self.rows.iter().flatten().filter(|v| v.is_none()).count()
    }

    /// 0-based OD columns with no observation at all.
    pub fn all_gap_columns(&self) -> Vec<usize> {
        if self.rows.is_empty() {
            return Vec::new();
        }
        (0..self.node_count * self.node_count)
            .filter(|&c| self.rows.iter().all(|r| r[c].is_none()))
            .collect()
    }
}

impl From<&TrafficSeries> for RawSeries {
    fn from(x: &TrafficSeries) -> Self {
        RawSeries {
            node_count: x.node_count,
            rows: (0..x.len()).map(|t| x.values.row(t).iter().map(|&v| Some(v)).collect()).collect(),
            timestep_seconds: x.timestep_seconds,
            start_index: x.start_index,
        }
    }
}

/// Fills gaps column by column: linear interpolation between observations,
/// back-fill before the first and forward-fill after the last. A column with
/// no observation at all becomes zeros and is logged.
pub fn impute_gaps(raw: &RawSeries) -> TrafficSeries {
    let width = raw.node_count * raw.node_count;
    let len = raw.rows.len();
    let mut values = DMatrix::zeros(len, width);
    for c in 0..width {
        let known: Vec<(usize, f64)> = raw.rows.iter().enumerate().filter_map(|(t, r)| r[c].map(|v| (t, v))).collect();
        if known.is_empty() {
            if len > 0 {
                warn!("OD column {} has no observations; filled with zeros", c + 1);
            }
            continue;
        }
        let (first_t, first_v) = known[0];
        let (last_t, last_v) = known[known.len() - 1];
        for t in 0..first_t {
            values[(t, c)] = first_v;
        }
        for t in last_t..len {
            values[(t, c)] = last_v;
        }
        for pair in known.windows(2) {
            let (t0, v0) = pair[0];
            let (t1, v1) = pair[1];
            values[(t0, c)] = v0;
            let span = (t1 - t0) as f64;
            for t in (t0 + 1)..t1 {
                let w = (t - t0) as f64 / span;
                values[(t, c)] = v0 + w * (v1 - v0);
            }
        }
    }
    TrafficSeries::new(raw.node_count, values, raw.timestep_seconds, raw.start_index).expect("imputed values are nonnegative")
}

/// Decimal text with at most 12 significant digits, shortest form.
pub fn format_value(v: f64) -> String {
    let rounded: f64 = format!("{v:.11e}").parse().expect("formatted float parses");
    if rounded == 0.0 {
        "0".to_string()
    } else {
        format!("{rounded}")
    }
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for line in lines {
        out.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn join_values<'a>(values: impl Iterator<Item = &'a f64>) -> String {
    values.map(|&v| format_value(v)).collect::<Vec<_>>().join(",")
}

/// Writes a table with a `t` column followed by `prefix_1..prefix_k`.
/// `t` is the 1-based absolute sample index.
pub fn write_time_table(path: &Path, prefix: &str, start_index: usize, values: &DMatrix<f64>) -> Result<()> {
    let header = std::iter::once("t".to_string())
        .chain((1..=values.ncols()).map(|i| format!("{prefix}_{i}")))
        .collect::<Vec<_>>()
        .join(",");
    let rows = (0..values.nrows()).map(|t| format!("{},{}", start_index + t + 1, join_values(values.row(t).iter())));
    write_lines(path, std::iter::once(header).chain(rows))
}

pub fn write_tm(path: &Path, x: &TrafficSeries) -> Result<()> {
    write_time_table(path, "od", x.start_index, &x.values)
}

pub fn write_links(path: &Path, y: &LinkSeries) -> Result<()> {
    write_time_table(path, "link", y.start_index, &y.values)
}

pub fn write_routing(path: &Path, a: &RoutingMatrix) -> Result<()> {
    let m = a.matrix();
    write_lines(path, (0..m.nrows()).map(|l| join_values(m.row(l).iter())))
}

/// Contents of `meta.csv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanonicalMeta {
    pub node_count: usize,
    pub link_count: usize,
    pub timestep_seconds: f64,
}

pub fn write_meta(path: &Path, meta: &CanonicalMeta) -> Result<()> {
    write_lines(
        path,
        std::iter::once(format!(
            "{},{},{}",
            meta.node_count,
            meta.link_count,
            format_value(meta.timestep_seconds)
        )),
    )
}

/// Writes `tm.csv`, `links.csv`, `routing.csv`, `meta.csv` and, when link
/// endpoints are known, `topology.csv` (`link,src,dst`) into `dir`.
pub fn write_canonical(dir: &Path, bundle: &DatasetBundle) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_tm(&dir.join("tm.csv"), &bundle.traffic)?;
    write_links(&dir.join("links.csv"), &bundle.link_series())?;
    write_routing(&dir.join("routing.csv"), &bundle.routing)?;
    write_meta(
        &dir.join("meta.csv"),
        &CanonicalMeta {
            node_count: bundle.node_count(),
            link_count: bundle.link_count(),
            timestep_seconds: bundle.traffic.timestep_seconds,
        },
    )?;
    let topo_path = dir.join("topology.csv");
    match bundle.topology.edges() {
        Some(edges) => {
            let header = std::iter::once("link,src,dst".to_string());
            let rows = edges.iter().enumerate().map(|(l, &(a, b))| format!("{},{},{}", l + 1, a + 1, b + 1));
            write_lines(&topo_path, header.chain(rows))?;
        }
        None => {
            if topo_path.exists() {
                fs::remove_file(&topo_path).map_err(|e| Error::io(&topo_path, e))?;
            }
        }
    }
    Ok(())
}

/// `(line number, fields)` for every non-blank CSV record.
fn read_csv(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        out.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, line, format!("{other:?}")),
    }
}

fn parse_f64(path: &Path, line: usize, field: &str) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| Error::parse(path, line, format!("'{field}' is not a number")))?;
    if !v.is_finite() {
        return Err(Error::parse(path, line, format!("'{field}' is not finite")));
    }
    Ok(v)
}

fn parse_flow(path: &Path, line: usize, field: &str) -> Result<f64> {
    let v = parse_f64(path, line, field)?;
    if v < 0.0 {
        return Err(Error::parse(path, line, format!("negative value {field}")));
    }
    Ok(v)
}

fn parse_usize(path: &Path, line: usize, field: &str) -> Result<usize> {
    field
        .parse()
        .map_err(|_| Error::parse(path, line, format!("'{field}' is not a nonnegative integer")))
}

pub fn read_meta(path: &Path) -> Result<CanonicalMeta> {
    let rows = read_csv(path)?;
    let data: Vec<&(usize, Vec<String>)> = rows.iter().filter(|(_, f)| f.first().map(String::as_str) != Some("n")).collect();
    let [(line, fields)] = data.as_slice() else {
        return Err(Error::parse(path, 1, "expected a single row n,m,timestep_seconds"));
    };
    if fields.len() != 3 {
        return Err(Error::parse(path, *line, "expected n,m,timestep_seconds"));
    }
    let meta = CanonicalMeta {
        node_count: parse_usize(path, *line, &fields[0])?,
        link_count: parse_usize(path, *line, &fields[1])?,
        timestep_seconds: parse_f64(path, *line, &fields[2])?,
    };
    if meta.node_count < 2 || meta.link_count == 0 || !(meta.timestep_seconds > 0.0) {
        return Err(Error::parse(path, *line, "need n >= 2, m >= 1 and a positive timestep"));
    }
    Ok(meta)
}

/// Reads `routing.csv`: `m` rows of `n^2` zeros and ones.
pub fn read_routing(path: &Path, node_count: usize, link_count: Option<usize>) -> Result<RoutingMatrix> {
    let rows = read_csv(path)?;
    routing_from_rows(path, rows, node_count, link_count)
}

fn routing_from_rows(path: &Path, rows: Vec<(usize, Vec<String>)>, n: usize, m: Option<usize>) -> Result<RoutingMatrix> {
    let width = n * n;
    if let Some(m) = m {
        if rows.len() != m {
            let line = rows.last().map(|r| r.0).unwrap_or(0);
            return Err(Error::parse(path, line, format!("{} routing rows, expected {m}", rows.len())));
        }
    }
    if rows.is_empty() {
        return Err(Error::parse(path, 0, "routing file is empty"));
    }
    let mut matrix = DMatrix::zeros(rows.len(), width);
    for (l, (line, fields)) in rows.iter().enumerate() {
        if fields.len() != width {
            return Err(Error::parse(path, *line, format!("{} routing entries, expected {width}", fields.len())));
        }
        for (c, f) in fields.iter().enumerate() {
            matrix[(l, c)] = match f.as_str() {
                "0" => 0.0,
                "1" => 1.0,
                other => return Err(Error::parse(path, *line, format!("routing entry '{other}' is not 0 or 1"))),
            };
        }
    }
    RoutingMatrix::new(n, matrix)
}

/// Reads `tm.csv` keeping empty fields as gaps.
pub fn read_raw_tm(path: &Path, node_count: usize, timestep_seconds: f64) -> Result<RawSeries> {
    let rows = read_csv(path)?;
    let width = node_count * node_count;
    let mut iter = rows.into_iter();
    let (hline, header) = iter.next().ok_or_else(|| Error::parse(path, 1, "missing header"))?;
    let expected: Vec<String> = std::iter::once("t".to_string()).chain((1..=width).map(|i| format!("od_{i}"))).collect();
    if header != expected {
        return Err(Error::parse(path, hline, format!("header must be t,od_1..od_{width}")));
    }
    let mut start = None;
    let mut out = Vec::new();
    for (line, fields) in iter {
        if fields.len() != width + 1 {
            return Err(Error::parse(path, line, format!("{} fields, expected {}", fields.len(), width + 1)));
        }
        let t = parse_usize(path, line, &fields[0])?;
        let first = *start.get_or_insert(t);
        if t == 0 || t != first + out.len() {
            return Err(Error::parse(path, line, format!("timestamp {t} breaks the consecutive 1-based sequence")));
        }
        let row = fields[1..]
            .iter()
            .map(|f| if f.is_empty() { Ok(None) } else { parse_flow(path, line, f).map(Some) })
            .collect::<Result<Vec<_>>>()?;
        out.push(row);
    }
    RawSeries::new(node_count, out, timestep_seconds, start.map(|s| s - 1).unwrap_or(0))
}

fn read_topology_csv(path: &Path, node_count: usize) -> Result<Vec<(usize, usize)>> {
    let rows = read_csv(path)?;
    let mut edges = Vec::new();
    for (line, fields) in rows {
        if fields.first().map(String::as_str) == Some("link") {
            continue;
        }
        if fields.len() != 3 {
            return Err(Error::parse(path, line, "expected link,src,dst"));
        }
        let l = parse_usize(path, line, &fields[0])?;
        if l != edges.len() + 1 {
            return Err(Error::parse(path, line, format!("link id {l} out of sequence")));
        }
        let a = parse_usize(path, line, &fields[1])?;
        let b = parse_usize(path, line, &fields[2])?;
        if a == 0 || b == 0 || a > node_count || b > node_count {
            return Err(Error::parse(path, line, format!("node id out of range 1..{node_count}")));
        }
        edges.push((a - 1, b - 1));
    }
    Ok(edges)
}

/// Parses canonical `tm.csv` and `routing.csv` given the metadata. Gaps in
/// the traffic file are imputed.
pub fn parse_canonical(tm_path: &Path, routing_path: &Path, meta: &CanonicalMeta) -> Result<DatasetBundle> {
    let routing = read_routing(routing_path, meta.node_count, Some(meta.link_count))?;
    let raw = read_raw_tm(tm_path, meta.node_count, meta.timestep_seconds)?;
    let traffic = impute_gaps(&raw);
    let topology = Topology::opaque(meta.node_count, meta.link_count)?;
    DatasetBundle::new(topology, routing, traffic, format!("canonical:{}", tm_path.display()))
}

/// Loads a directory written by [`write_canonical`].
pub fn load_canonical(dir: &Path) -> Result<DatasetBundle> {
    let meta_path = dir.join("meta.csv");
    if !meta_path.exists() {
        return Err(Error::Config(format!("{} not found", meta_path.display())));
    }
    let meta = read_meta(&meta_path)?;
    let mut bundle = parse_canonical(&dir.join("tm.csv"), &dir.join("routing.csv"), &meta)?;
    let topo_path = dir.join("topology.csv");
    if topo_path.exists() {
        let edges = read_topology_csv(&topo_path, meta.node_count)?;
        let topology = Topology::new(meta.node_count, edges)?;
        bundle = DatasetBundle::new(topology, bundle.routing, bundle.traffic, bundle.provenance)?;
    }
    Ok(bundle)
}

fn list_files(dir: &Path, extension: &str, skip: &[&str]) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("");
        if path.is_file() && path.extension().and_then(|e| e.to_str()) == Some(extension) && !skip.contains(&name) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Non-comment, non-blank lines split on whitespace.
fn whitespace_rows(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    Ok(read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with('#')
        })
        .map(|(i, l)| (i + 1, l.split_whitespace().map(str::to_string).collect()))
        .collect())
}

fn required(dir: &Path, name: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    if p.is_file() {
        Ok(p)
    } else {
        Err(Error::Config(format!("{} not found", p.display())))
    }
}

/// Shape and unit conventions for [`parse_abilene_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct AbileneLayout {
    pub node_count: usize,
    pub link_count: usize,
    pub timestep_seconds: f64,
    /// Values are bytes per interval (converted to kbps); otherwise already kbps.
    pub byte_counts: bool,
}

impl Default for AbileneLayout {
    fn default() -> Self {
        AbileneLayout {
            node_count: 11,
            link_count: 41,
            timestep_seconds: 300.0,
            byte_counts: true,
        }
    }
}

/// Abilene-style directory with the default 11-node, 41-link layout.
pub fn parse_abilene(dir: &Path) -> Result<DatasetBundle> {
    parse_abilene_with(dir, &AbileneLayout::default())
}

/// Reads an Abilene-style directory:
///
/// * `*.tm`: one whitespace-separated row of `n^2` OD values per interval,
///   files concatenated in file-name order. `NaN` or `-` marks a gap.
/// * `routing.txt`: `m` whitespace-separated rows of `n^2` zeros and ones.
/// * `links.txt` (optional): `m` rows `src dst`, 1-based.
///
/// Lines starting with `#` are ignored everywhere.
pub fn parse_abilene_with(dir: &Path, layout: &AbileneLayout) -> Result<DatasetBundle> {
    let n = layout.node_count;
    let width = n * n;
    let routing_path = required(dir, "routing.txt")?;
    let routing = routing_from_rows(&routing_path, whitespace_rows(&routing_path)?, n, Some(layout.link_count))?;
    let files = list_files(dir, "tm", &[])?;
    if files.is_empty() {
        return Err(Error::Config(format!("no .tm files in {}", dir.display())));
    }
    let scale = if layout.byte_counts {
        8.0 / layout.timestep_seconds / 1000.0
    } else {
        1.0
    };
    let chunks = files
        .par_iter()
        .map(|path| {
            whitespace_rows(path)?
                .into_iter()
                .map(|(line, fields)| {
                    if fields.len() != width {
                        return Err(Error::parse(path, line, format!("{} fields, expected {width}", fields.len())));
                    }
                    fields
                        .iter()
                        .map(|f| match f.as_str() {
                            "-" | "NaN" | "nan" => Ok(None),
                            _ => parse_flow(path, line, f).map(|v| Some(v * scale)),
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let raw = RawSeries::new(n, chunks.into_iter().flatten().collect(), layout.timestep_seconds, 0)?;

    let links_path = dir.join("links.txt");
    let topology = if links_path.is_file() {
        Topology::new(n, endpoint_rows(&links_path, n)?)?
    } else {
        Topology::opaque(n, layout.link_count)?
    };
    DatasetBundle::new(topology, routing, impute_gaps(&raw), format!("abilene:{}", dir.display()))
}

fn endpoint_rows(path: &Path, n: usize) -> Result<Vec<(usize, usize)>> {
    whitespace_rows(path)?
        .into_iter()
        .map(|(line, f)| {
            if f.len() != 2 {
                return Err(Error::parse(path, line, "expected 'src dst'"));
            }
            let a = parse_usize(path, line, &f[0])?;
            let b = parse_usize(path, line, &f[1])?;
            if a == 0 || b == 0 || a > n || b > n {
                return Err(Error::parse(path, line, format!("node id out of range 1..{n}")));
            }
            Ok((a - 1, b - 1))
        })
        .collect()
}

/// Shape conventions for [`parse_geant_xml_with`]. `None` skips the check.
#[derive(Debug, Clone, PartialEq)]
pub struct GeantLayout {
    pub node_count: Option<usize>,
    pub link_count: Option<usize>,
    pub timestep_seconds: f64,
}

impl Default for GeantLayout {
    fn default() -> Self {
        GeantLayout {
            node_count: Some(23),
            link_count: Some(74),
            timestep_seconds: 900.0,
        }
    }
}

/// GEANT-style directory with the default 23-node, 74-link layout.
pub fn parse_geant_xml(dir: &Path) -> Result<DatasetBundle> {
    parse_geant_xml_with(dir, &GeantLayout::default())
}

/// Reads a GEANT-style directory:
///
/// * `topology.xml`: `<node id="..."/>` elements in node order and optional
///   `<link from="..." to="..."/>` elements in link order.
/// * `routing.txt`: as for Abilene.
/// * every other `*.xml`: one timestamp, in file-name order, holding
///   `<src id="a"><dst id="b">value</dst>...</src>` demands in kbps.
///
/// Absent self flows are zero; any other absent demand is a gap.
pub fn parse_geant_xml_with(dir: &Path, layout: &GeantLayout) -> Result<DatasetBundle> {
    let topo_path = required(dir, "topology.xml")?;
    let topo_text = read_text(&topo_path)?;
    let doc = roxmltree::Document::parse(&topo_text).map_err(|e| Error::parse(&topo_path, e.pos().row as usize, e.to_string()))?;
    let labels: Vec<String> = doc
        .descendants()
        .filter(|e| e.has_tag_name("node"))
        .map(|e| {
            e.attribute("id")
                .map(str::to_string)
                .ok_or_else(|| Error::parse(&topo_path, line_of(&doc, e), "node without id"))
        })
        .collect::<Result<_>>()?;
    let n = labels.len();
    if let Some(expected) = layout.node_count {
        if n != expected {
            return Err(Error::parse(&topo_path, 0, format!("{n} nodes, expected {expected}")));
        }
    }
    let index = |label: &str| labels.iter().position(|l| l == label);
    let mut edges = Vec::new();
    for e in doc.descendants().filter(|e| e.has_tag_name("link")) {
        let line = line_of(&doc, e);
        let (Some(a), Some(b)) = (e.attribute("from"), e.attribute("to")) else {
            return Err(Error::parse(&topo_path, line, "link needs from and to"));
        };
        let (Some(a), Some(b)) = (index(a), index(b)) else {
            return Err(Error::parse(&topo_path, line, "link references an unknown node"));
        };
        edges.push((a, b));
    }

    let routing_path = required(dir, "routing.txt")?;
    let routing = routing_from_rows(&routing_path, whitespace_rows(&routing_path)?, n, layout.link_count)?;
    let topology = if edges.is_empty() {
        Topology::opaque(n, routing.link_count())?
    } else {
        Topology::new(n, edges)?
    }
    .with_labels(labels.clone())?;

    let files = list_files(dir, "xml", &["topology.xml"])?;
    if files.is_empty() {
        return Err(Error::Config(format!("no traffic XML files in {}", dir.display())));
    }
    let rows = files
        .par_iter()
        .map(|path| parse_demand_xml(path, &labels))
        .collect::<Result<Vec<_>>>()?;
    let raw = RawSeries::new(n, rows, layout.timestep_seconds, 0)?;
    DatasetBundle::new(topology, routing, impute_gaps(&raw), format!("geant:{}", dir.display()))
}

fn line_of(doc: &roxmltree::Document, node: roxmltree::Node) -> usize {
    doc.text_pos_at(node.range().start).row as usize
}

fn parse_demand_xml(path: &Path, labels: &[String]) -> Result<Vec<Option<f64>>> {
    let text = read_text(path)?;
    let doc = roxmltree::Document::parse(&text).map_err(|e| Error::parse(path, e.pos().row as usize, e.to_string()))?;
    let n = labels.len();
    let lookup = |node: roxmltree::Node| -> Result<usize> {
        let line = line_of(&doc, node);
        let id = node.attribute("id").ok_or_else(|| Error::parse(path, line, "element without id"))?;
        labels
            .iter()
            .position(|l| l == id)
            .ok_or_else(|| Error::parse(path, line, format!("unknown node '{id}'")))
    };
    let mut row: Vec<Option<f64>> = (0..n * n).map(|c| if c / n == c % n { Some(0.0) } else { None }).collect();
    let mut seen = vec![false; n * n];
    for src in doc.descendants().filter(|e| e.has_tag_name("src")) {
        let j = lookup(src)?;
        for dst in src.children().filter(|e| e.has_tag_name("dst")) {
            let d = lookup(dst)?;
            let line = line_of(&doc, dst);
            let col = od_col(j, d, n);
            if seen[col] {
                return Err(Error::parse(path, line, "duplicate demand element"));
            }
            seen[col] = true;
            row[col] = Some(parse_flow(path, line, dst.text().unwrap_or("").trim())?);
        }
    }
    Ok(row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{gen_topology, toy_network};

    fn toy_bundle() -> DatasetBundle {
        let (topo, a) = toy_network();
        let x = TrafficSeries::new(
            3,
            DMatrix::from_row_slice(2, 9, &[0., 6., 4., 5., 0., 5., 7., 3., 0., 0.125, 1.5, 2., 3., 0., 1e-3, 7.25, 3., 0.]),
            300.0,
            0,
        )
        .unwrap();
        DatasetBundle::new(topo, a, x, "toy").unwrap()
    }

    #[test]
    fn format_keeps_twelve_digits() {
        assert_eq!(format_value(10.0), "10");
        assert_eq!(format_value(0.6), "0.6");
        assert_eq!(format_value(1.0 / 3.0), "0.333333333333");
        assert_eq!(format_value(-0.0), "0");
    }

    #[test]
    fn canonical_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = toy_bundle();
        write_canonical(dir.path(), &b).unwrap();
        let back = load_canonical(dir.path()).unwrap();
        assert_eq!(back.traffic.values, b.traffic.values);
        assert_eq!(back.routing, b.routing);
        assert_eq!(back.topology, b.topology);
        assert_eq!((back.node_count(), back.link_count()), (3, 4));
        let links = fs::read_to_string(dir.path().join("links.csv")).unwrap();
        assert!(links.starts_with("t,link_1,link_2,link_3,link_4\n1,10,12,9,10\n"));
    }

    #[test]
    fn routing_entry_two_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("routing.csv");
        fs::write(&p, "0,1,0,0\n1,2,0,0\n").unwrap();
        match read_routing(&p, 2, None).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn tm_row_length_and_sign_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tm.csv");
        fs::write(&p, "t,od_1,od_2,od_3,od_4\n1,0,1,2,0\n2,0,1,2\n").unwrap();
        assert!(matches!(read_raw_tm(&p, 2, 300.0), Err(Error::Parse { line: 3, .. })));
        fs::write(&p, "t,od_1,od_2,od_3,od_4\n1,0,-1,2,0\n").unwrap();
        assert!(matches!(read_raw_tm(&p, 2, 300.0), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn empty_field_is_gap() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tm.csv");
        fs::write(&p, "t,od_1,od_2,od_3,od_4\n1,0,4,2,0\n2,0,,2,0\n3,0,8,,0\n").unwrap();
        let raw = read_raw_tm(&p, 2, 300.0).unwrap();
        assert_eq!(raw.gap_count(), 2);
        let x = impute_gaps(&raw);
        assert_eq!(x.values.column(1).as_slice(), &[4.0, 6.0, 8.0]);
        assert_eq!(x.values.column(2).as_slice(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn imputation_rules() {
        let raw = RawSeries::new(
            2,
            vec![
                vec![None, Some(4.0), None, None],
                vec![None, None, Some(3.0), None],
                vec![Some(1.0), Some(8.0), None, None],
            ],
            300.0,
            0,
        )
        .unwrap();
        assert_eq!(raw.all_gap_columns(), vec![3]);
        let x = impute_gaps(&raw);
        assert_eq!(x.values.column(0).as_slice(), &[1.0, 1.0, 1.0]);
        assert_eq!(x.values.column(1).as_slice(), &[4.0, 6.0, 8.0]);
        assert_eq!(x.values.column(2).as_slice(), &[3.0, 3.0, 3.0]);
        assert_eq!(x.values.column(3).as_slice(), &[0.0, 0.0, 0.0]);
        let again = impute_gaps(&RawSeries::from(&x));
        assert_eq!(again, x);
    }

    #[test]
    fn split_defaults() {
        let (topo, a) = gen_topology(1, 3, 1.5).unwrap();
        let x = TrafficSeries::new(3, DMatrix::from_fn(2000, 9, |t, _| t as f64), 300.0, 0).unwrap();
        let b = DatasetBundle::new(topo, a, x, "synthetic").unwrap();
        let (train, test) = split(&b, SplitSpec::ABILENE).unwrap();
        assert_eq!((train.len(), test.len()), (500, 1500));
        assert_eq!(test.traffic.values[(0, 0)], 500.0);
        assert_eq!(test.traffic.start_index, 500);
        let (train, test) = split(&b, SplitSpec::GEANT).unwrap();
        assert_eq!((train.len(), test.len()), (1500, 500));
        assert_eq!(train.traffic.values[(1499, 0)], 1499.0);
        assert!(split(&b, SplitSpec::new(1500, 501).unwrap()).is_err());
        assert!(SplitSpec::new(0, 1).is_err());
    }

    #[test]
    fn bundle_rejects_mismatch() {
        let (topo, a) = toy_network();
        let x = TrafficSeries::new(2, DMatrix::zeros(1, 4), 300.0, 0).unwrap();
        assert!(DatasetBundle::new(topo, a, x, "bad").is_err());
    }

    fn write_routing_txt(dir: &Path, a: &RoutingMatrix) {
        let text: String = a
            .matrix()
            .row_iter()
            .map(|r| r.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(" ") + "\n")
            .collect();
        fs::write(dir.join("routing.txt"), text).unwrap();
    }

    #[test]
    fn abilene_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (topo, a) = gen_topology(3, 11, 41.0 / 11.0).unwrap();
        write_routing_txt(dir.path(), &a);
        // one week of 5-minute samples split over two files
        let row = |t: usize| (0..121).map(|c| format!("{}", (t * 121 + c) % 997)).collect::<Vec<_>>().join(" ");
        let first: String = (0..1000).map(|t| row(t) + "\n").collect();
        let second: String = std::iter::once("# tail\n".to_string()).chain((1000..2016).map(|t| row(t) + "\n")).collect();
        fs::write(dir.path().join("week-a.tm"), first).unwrap();
        fs::write(dir.path().join("week-b.tm"), second).unwrap();
        let links: String = topo.edges().unwrap().iter().map(|&(s, d)| format!("{} {}\n", s + 1, d + 1)).collect();
        fs::write(dir.path().join("links.txt"), links).unwrap();

        let b = parse_abilene(dir.path()).unwrap();
        assert_eq!((b.node_count(), b.link_count(), b.len()), (11, 41, 2016));
        assert_eq!(b.traffic.timestep_seconds, 300.0);
        assert_eq!(b.topology, topo);
        let expected = ((1500 * 121 + 7) % 997) as f64 * 8.0 / 300.0 / 1000.0;
        assert!((b.traffic.values[(1500, 7)] - expected).abs() < 1e-15);
    }

    #[test]
    fn abilene_short_row_and_missing_routing() {
        let dir = tempfile::tempdir().unwrap();
        let (_, a) = gen_topology(3, 11, 41.0 / 11.0).unwrap();
        fs::write(dir.path().join("x.tm"), vec!["1"; 120].join(" ") + "\n").unwrap();
        assert!(matches!(parse_abilene(dir.path()), Err(Error::Config(_))));
        write_routing_txt(dir.path(), &a);
        assert!(matches!(parse_abilene(dir.path()), Err(Error::Parse { line: 1, .. })));
    }

    fn geant_two_node(dir: &Path, demands: &str) {
        fs::write(
            dir.join("topology.xml"),
            r#"<topology><nodes><node id="a"/><node id="b"/></nodes>
<links><link from="a" to="b"/><link from="b" to="a"/></links></topology>"#,
        )
        .unwrap();
        fs::write(dir.join("routing.txt"), "0 1 0 0\n0 0 1 0\n").unwrap();
        fs::write(dir.join("tm-0001.xml"), demands).unwrap();
    }

    fn two_node_layout() -> GeantLayout {
        GeantLayout {
            node_count: Some(2),
            link_count: Some(2),
            ..GeantLayout::default()
        }
    }

    #[test]
    fn geant_two_node_row() {
        let dir = tempfile::tempdir().unwrap();
        geant_two_node(
            dir.path(),
            r#"<TrafficMatrix><IntraTM><src id="a"><dst id="b">5.0</dst></src><src id="b"><dst id="a">7.0</dst></src></IntraTM></TrafficMatrix>"#,
        );
        let b = parse_geant_xml_with(dir.path(), &two_node_layout()).unwrap();
        assert_eq!(b.traffic.values.row(0).iter().cloned().collect::<Vec<_>>(), vec![0.0, 5.0, 7.0, 0.0]);
        assert_eq!(b.traffic.timestep_seconds, 900.0);
        assert_eq!(b.topology.labels().unwrap(), &["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn geant_missing_demand_is_gap() {
        let dir = tempfile::tempdir().unwrap();
        geant_two_node(dir.path(), r#"<tm><src id="a"><dst id="b">5.0</dst></src></tm>"#);
        fs::write(
            dir.path().join("tm-0002.xml"),
            r#"<tm><src id="a"><dst id="b">1</dst></src><src id="b"><dst id="a">4</dst></src></tm>"#,
        )
        .unwrap();
        let b = parse_geant_xml_with(dir.path(), &two_node_layout()).unwrap();
        // the gap at t=0 is back-filled from t=1
        assert_eq!(b.traffic.values[(0, 2)], 4.0);
        assert_eq!(b.traffic.values[(0, 1)], 5.0);
    }

    #[test]
    fn geant_unknown_label_and_bad_xml() {
        let dir = tempfile::tempdir().unwrap();
        geant_two_node(dir.path(), "<tm>\n<src id=\"a\"><dst id=\"zz\">5</dst></src></tm>");
        match parse_geant_xml_with(dir.path(), &two_node_layout()).unwrap_err() {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 2);
                assert!(msg.contains("zz"));
            }
            other => panic!("unexpected {other}"),
        }
        geant_two_node(dir.path(), "<tm><src id=\"a\">");
        assert!(matches!(parse_geant_xml_with(dir.path(), &two_node_layout()), Err(Error::Parse { .. })));
    }

    #[test]
    fn geant_default_layout_is_strict() {
        let dir = tempfile::tempdir().unwrap();
        geant_two_node(dir.path(), "<tm/>");
        assert!(matches!(parse_geant_xml(dir.path()), Err(Error::Parse { .. })));
    }
}
