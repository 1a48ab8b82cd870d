//! Result persistence: CSV tables with 17 significant digits, whitespace
//! column files for plotting, nodal grid dumps and the run manifest. Every
//! file is written through a temporary file in the target directory and
//! renamed into place.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::analysis::{Check, StudyReport};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::galerkin::DiscreteSystem;
use crate::selftest::SuiteRow;
use crate::timestepper::RunOutput;

pub const TIMESERIES_HEADER: [&str; 9] = [
    "t",
    "norm_theta",
    "graphnorm_theta",
    "norm_phi",
    "graphnorm_phi",
    "dtphi_norm",
    "energy_lhs",
    "energy_rhs",
    "energy_residual",
];

pub const SNAPSHOTS_HEADER: [&str; 4] = ["t", "field", "mode_index", "coefficient"];

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

/// Output directory plus the inventory of files written into it.
#[derive(Debug)]
pub struct FileSet {
    dir: PathBuf,
    files: Vec<String>,
}

impl FileSet {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(FileSet {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    pub fn write_atomic(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let target = self.dir.join(name);
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(|e| io_err(&self.dir, e))?;
        tmp.write_all(bytes).map_err(|e| io_err(&target, e))?;
        tmp.as_file().sync_all().map_err(|e| io_err(&target, e))?;
        tmp.persist(&target).map_err(|e| io_err(&target, e.error))?;
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        Ok(())
    }

    pub fn write_csv<I>(&mut self, name: &str, header: &[&str], rows: I) -> Result<()>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).map_err(|e| io_err(Path::new(name), e))?;
        for row in rows {
            w.write_record(&row).map_err(|e| io_err(Path::new(name), e))?;
        }
        let bytes = w.into_inner().map_err(|e| io_err(Path::new(name), e))?;
        self.write_atomic(name, &bytes)
    }

    /// Whitespace-separated columns with a `#` header line.
    pub fn write_columns(&mut self, name: &str, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
        let mut s = format!("# {}\n", header.join(" "));
        for r in rows {
            let cells: Vec<String> = r.iter().map(|v| fmt_f64(*v)).collect();
            s.push_str(&cells.join(" "));
            s.push('\n');
        }
        self.write_atomic(name, s.as_bytes())
    }
}

pub fn timeseries_rows(run: &RunOutput) -> Vec<Vec<f64>> {
    run.series
        .iter()
        .map(|r| {
            vec![
                r.t,
                r.norm_theta,
                r.graphnorm_theta,
                r.norm_phi,
                r.graphnorm_phi,
                r.dtphi_norm,
                r.energy.lhs,
                r.energy.rhs,
                r.energy.residual,
            ]
        })
        .collect()
}

fn numeric_rows(rows: &[Vec<f64>]) -> impl Iterator<Item = Vec<String>> + '_ {
    rows.iter().map(|r| r.iter().map(|v| fmt_f64(*v)).collect())
}

/// `grid_<t>.csv` name with trailing zeros trimmed.
pub fn grid_file_name(t: f64) -> String {
    let s = format!("{t:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    format!("grid_{s}.csv")
}

/// Writes `timeseries.csv`, `timeseries.dat`, `snapshots.csv` and, when
/// `grids` is set, one `grid_<t>.csv` per snapshot.
pub fn write_run(files: &mut FileSet, sys: &DiscreteSystem, run: &RunOutput, grids: bool) -> Result<()> {
    let ts = timeseries_rows(run);
    files.write_csv("timeseries.csv", &TIMESERIES_HEADER, numeric_rows(&ts))?;
    files.write_columns("timeseries.dat", &TIMESERIES_HEADER, &ts)?;

    let mut snaps = Vec::new();
    for s in &run.snapshots {
        for (field, coeffs) in [("theta", &s.theta), ("phi", &s.phi)] {
            for (j, c) in coeffs.iter().enumerate() {
                snaps.push(vec![fmt_f64(s.t), field.to_string(), j.to_string(), fmt_f64(*c)]);
            }
        }
    }
    files.write_csv("snapshots.csv", &SNAPSHOTS_HEADER, snaps)?;

    if grids {
        let basis = sys.basis_a();
        let two_d = basis.kind().dim() == 2;
        let header: &[&str] = if two_d { &["x", "y", "theta", "phi"] } else { &["x", "theta", "phi"] };
        for s in &run.snapshots {
            let theta = sys.theta_grid(&s.theta)?;
            let phi = match &s.phi_nodes {
                Some(p) => p.clone(),
                None => sys.phi_grid(&s.phi)?,
            };
            let rows: Vec<Vec<f64>> = basis
                .points()
                .iter()
                .zip(theta.iter().zip(&phi))
                .map(|(p, (th, ph))| {
                    if two_d {
                        vec![p[0], p[1], *th, *ph]
                    } else {
                        vec![p[0], *th, *ph]
                    }
                })
                .collect();
            files.write_csv(&grid_file_name(s.t), header, numeric_rows(&rows))?;
        }
    }
    Ok(())
}

/// `<study>.csv` with one row per parameter value.
pub fn write_study(files: &mut FileSet, report: &StudyReport) -> Result<()> {
    let header: Vec<&str> = report.columns.iter().map(String::as_str).collect();
    files.write_csv(&format!("{}.csv", report.study), &header, numeric_rows(&report.rows))?;
    files.write_columns(&format!("{}.dat", report.study), &header, &report.rows)
}

pub fn write_checks(files: &mut FileSet, name: &str, checks: &[Check]) -> Result<()> {
    let rows = checks
        .iter()
        .map(|c| vec![c.name.clone(), c.passed.to_string(), c.detail.clone()]);
    files.write_csv(name, &["check", "passed", "detail"], rows)
}

pub fn write_suite(files: &mut FileSet, name: &str, rows: &[SuiteRow]) -> Result<()> {
    let out = rows.iter().map(|r| {
        vec![
            r.suite.clone(),
            r.property.clone(),
            r.samples.to_string(),
            r.violations.to_string(),
            fmt_f64(r.max_error),
            r.passed.to_string(),
        ]
    });
    files.write_csv(name, &["suite", "property", "samples", "violations", "max_error", "passed"], out)
}

/// Header and rows of a CSV file.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let header = r.headers().map_err(|e| io_err(path, e))?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(String::from).collect()))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| io_err(path, e))?;
    Ok((header, rows))
}

/// Numeric rows of `timeseries.csv`, after checking its header.
pub fn read_timeseries(path: &Path) -> Result<Vec<Vec<f64>>> {
    let (header, rows) = read_csv(path)?;
    if header != TIMESERIES_HEADER {
        return Err(io_err(path, format!("unexpected header {header:?}")));
    }
    rows.iter()
        .map(|r| {
            r.iter()
                .map(|c| c.parse::<f64>().map_err(|e| io_err(path, format!("{c}: {e}"))))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    ConfigError,
    SolverError,
    CheckFailed,
    IoError,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Ok => 0,
            Status::ConfigError => 2,
            Status::SolverError => 3,
            Status::CheckFailed => 4,
            Status::IoError => 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub status: Status,
    pub exit_code: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<RunConfig>,
    pub warnings: Vec<String>,
    pub tolerances: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    pub files: Vec<String>,
    pub wall_clock_seconds: f64,
}

impl Manifest {
    pub fn new(subcommand: &str) -> Self {
        Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            status: Status::Ok,
            exit_code: 0,
            error: None,
            config_hash: None,
            config: None,
            warnings: Vec::new(),
            tolerances: BTreeMap::new(),
            checks: Vec::new(),
            files: Vec::new(),
            wall_clock_seconds: 0.0,
        }
    }

    pub fn set_status(&mut self, status: Status) {
        self.status = status;
        self.exit_code = status.exit_code();
    }

    /// Writes `manifest.json` last, listing every other file of the set.
    pub fn write(&mut self, files: &mut FileSet) -> Result<()> {
        self.files = files.files().to_vec();
        self.files.push("manifest.json".into());
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))?;
        files.write_atomic("manifest.json", text.as_bytes())
    }
}
