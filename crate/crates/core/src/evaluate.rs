//! Error metrics, empirical CDFs, the singular-spectrum report and the
//! per-flow mean/variance table.
//!
//! A relative error whose reference norm is zero is 0 when the estimate is
//! also zero and `+inf` otherwise; infinite values are left out of CDFs and
//! counted instead.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::ingest::format_value;
use crate::netmodel::{RoutingMatrix, TrafficSeries};
use crate::numerics::svd;

fn check_shapes(x_hat: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<()> {
    if x_hat.shape() != x.shape() {
        return Err(Error::arg(format!("estimate is {:?}, reference is {:?}", x_hat.shape(), x.shape())));
    }
    Ok(())
}

fn relative(err: f64, reference: f64) -> f64 {
    if reference > 0.0 {
        err / reference
    } else if err == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Spatial relative error: per flow, over time. Inputs are `T x n^2`.
pub fn sre(x_hat: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_shapes(x_hat, x)?;
    Ok(DVector::from_fn(x.ncols(), |i, _| {
        relative((x_hat.column(i) - x.column(i)).norm(), x.column(i).norm())
    }))
}

/// Temporal relative error: per timestamp, over flows.
pub fn tre(x_hat: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_shapes(x_hat, x)?;
    Ok(DVector::from_fn(x.nrows(), |t, _| relative((x_hat.row(t) - x.row(t)).norm(), x.row(t).norm())))
}

/// Per-flow mean error and the sample standard deviation (divisor `T - 1`)
/// of the errors around it. The deviation is `None` when `T < 2`.
pub fn bias_and_stddev(x_hat: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<(DVector<f64>, Option<DVector<f64>>)> {
    check_shapes(x_hat, x)?;
    let t_len = x.nrows();
    if t_len == 0 {
        return Err(Error::arg("no timestamps"));
    }
    let err = x_hat - x;
    let bias = err.row_mean().transpose();
    if t_len < 2 {
        return Ok((bias, None));
    }
    let sd = DVector::from_fn(x.ncols(), |i, _| {
        let ss: f64 = err.column(i).iter().map(|e| (e - bias[i]).powi(2)).sum();
        (ss / (t_len - 1) as f64).sqrt()
    });
    Ok((bias, Some(sd)))
}

/// Empirical step CDF of the finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct Cdf {
    /// Distinct values in increasing order with the fraction `<=` each.
    pub points: Vec<(f64, f64)>,
    /// Infinite (or NaN) inputs left out.
    pub excluded: usize,
}

impl Cdf {
    pub fn from_values(values: &[f64]) -> Cdf {
        let mut finite: Vec<f64> = values.iter().cloned().filter(|v| v.is_finite()).collect();
        let excluded = values.len() - finite.len();
        finite.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
        let total = finite.len() as f64;
        let mut points: Vec<(f64, f64)> = Vec::new();
        for (k, &v) in finite.iter().enumerate() {
            let frac = (k + 1) as f64 / total;
            match points.last_mut() {
                Some(last) if last.0 == v => last.1 = frac,
                _ => points.push((v, frac)),
            }
        }
        Cdf { points, excluded }
    }

    /// Fraction of finite values `<= v`.
    pub fn fraction_at_or_below(&self, v: f64) -> f64 {
        self.points.iter().take_while(|p| p.0 <= v).last().map(|p| p.1).unwrap_or(0.0)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::from("value,fraction\n");
        for (v, f) in &self.points {
            text.push_str(&format!("{},{}\n", format_value(*v), format_value(*f)));
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// All four metrics plus their CDFs.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub sre: DVector<f64>,
    pub tre: DVector<f64>,
    pub bias: DVector<f64>,
    pub stddev: Option<DVector<f64>>,
    pub cdf_sre: Cdf,
    pub cdf_tre: Cdf,
    pub od_means: DVector<f64>,
    /// Absolute 0-based index of the first row.
    pub start_index: usize,
}

pub fn metric_report(x_hat: &DMatrix<f64>, x: &DMatrix<f64>, start_index: usize) -> Result<MetricReport> {
    let sre = sre(x_hat, x)?;
    let tre = tre(x_hat, x)?;
    let (bias, stddev) = bias_and_stddev(x_hat, x)?;
    Ok(MetricReport {
        cdf_sre: Cdf::from_values(sre.as_slice()),
        cdf_tre: Cdf::from_values(tre.as_slice()),
        od_means: x.row_mean().transpose(),
        sre,
        tre,
        bias,
        stddev,
        start_index,
    })
}

impl MetricReport {
    /// Writes `metrics.csv`, `tre.csv`, `cdf_sre.csv` and `cdf_tre.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut metrics = String::from("od,mean,sre,bias,stddev\n");
        for i in 0..self.sre.len() {
            let sd = self.stddev.as_ref().map(|s| format_value(s[i])).unwrap_or_default();
            metrics.push_str(&format!(
                "{},{},{},{},{}\n",
                i + 1,
                format_value(self.od_means[i]),
                format_value(self.sre[i]),
                format_value(self.bias[i]),
                sd
            ));
        }
        let p = dir.join("metrics.csv");
        fs::write(&p, metrics).map_err(|e| Error::io(&p, e))?;
        let mut tre = String::from("t,tre\n");
        for (k, v) in self.tre.iter().enumerate() {
            tre.push_str(&format!("{},{}\n", self.start_index + k + 1, format_value(*v)));
        }
        let p = dir.join("tre.csv");
        fs::write(&p, tre).map_err(|e| Error::io(&p, e))?;
        self.cdf_sre.write(&dir.join("cdf_sre.csv"))?;
        self.cdf_tre.write(&dir.join("cdf_tre.csv"))
    }
}

/// Normalised singular values and ranks of `A` and `Phi`, plus the entries of `Phi`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    pub routing_spectrum: Vec<f64>,
    pub routing_rank: usize,
    pub phi_spectrum: Vec<f64>,
    pub phi_rank: usize,
    pub phi_shape: (usize, usize),
    /// `(link, source, value)`, 1-based.
    pub phi_surface: Vec<(usize, usize, f64)>,
}

pub const RANK_RTOL: f64 = 1e-10;

pub fn spectrum_report(a: &RoutingMatrix, phi: &DMatrix<f64>) -> Result<SpectrumReport> {
    if phi.nrows() != a.link_count() {
        return Err(Error::arg("compressed matrix and routing disagree on the link count"));
    }
    let sa = svd(a.matrix())?;
    let sp = svd(phi)?;
    let phi_surface = (0..phi.nrows())
        .flat_map(|l| (0..phi.ncols()).map(move |j| (l, j)))
        .map(|(l, j)| (l + 1, j + 1, phi[(l, j)]))
        .collect();
    Ok(SpectrumReport {
        routing_spectrum: sa.normalized_spectrum(),
        routing_rank: sa.rank(RANK_RTOL),
        phi_spectrum: sp.normalized_spectrum(),
        phi_rank: sp.rank(RANK_RTOL),
        phi_shape: phi.shape(),
        phi_surface,
    })
}

impl SpectrumReport {
    /// Writes `spectrum.csv` (`matrix,index,value,rank`) and `phi_surface.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut text = String::from("matrix,index,value,rank\n");
        for (name, values, rank) in [
            ("A", &self.routing_spectrum, self.routing_rank),
            ("Phi", &self.phi_spectrum, self.phi_rank),
        ] {
            for (k, v) in values.iter().enumerate() {
                text.push_str(&format!("{name},{},{},{rank}\n", k + 1, format_value(*v)));
            }
        }
        let p = dir.join("spectrum.csv");
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        let mut surf = String::from("link,source,value\n");
        for (l, j, v) in &self.phi_surface {
            surf.push_str(&format!("{l},{j},{}\n", format_value(*v)));
        }
        let p = dir.join("phi_surface.csv");
        fs::write(&p, surf).map_err(|e| Error::io(&p, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanVarRow {
    /// 1-based OD index.
    pub od: usize,
    pub mean: f64,
    pub variance: f64,
}

/// Per-flow sample mean and variance, largest mean first (ties by OD index).
pub fn mean_variance_table(x: &TrafficSeries) -> Result<Vec<MeanVarRow>> {
    let t_len = x.len();
    if t_len < 2 {
        return Err(Error::arg("mean/variance table needs at least two samples"));
    }
    let mut rows: Vec<MeanVarRow> = (0..x.values.ncols())
        .map(|i| {
            let col = x.values.column(i);
            let mean = col.mean();
            let variance = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (t_len - 1) as f64;
            MeanVarRow { od: i + 1, mean, variance }
        })
        .collect();
    rows.sort_by(|a, b| b.mean.partial_cmp(&a.mean).expect("finite means").then(a.od.cmp(&b.od)));
    Ok(rows)
}

pub fn write_mean_variance(path: &Path, rows: &[MeanVarRow]) -> Result<()> {
    let mut text = String::from("od,mean,variance\n");
    for r in rows {
        text.push_str(&format!("{},{},{}\n", r.od, format_value(r.mean), format_value(r.variance)));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
