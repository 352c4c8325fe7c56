//! Observed semi-competing-risks records, covariate standardization and CSV I/O.
//!
//! Times are held on the log scale. CSV files carry days unless the caller
//! declares [`TimeScale::Log`].

use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default log-scale offset that separates a progression recorded on the day of death.
pub const DEFAULT_TIE_JITTER: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum Arm {
    Control,
    Treated,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Control, Arm::Treated];

    pub fn index(self) -> usize {
        match self {
            Arm::Control => 0,
            Arm::Treated => 1,
        }
    }

    pub fn from_index(z: usize) -> Option<Self> {
        match z {
            0 => Some(Arm::Control),
            1 => Some(Arm::Treated),
            _ => None,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Arm::Control => Arm::Treated,
            Arm::Treated => Arm::Control,
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

/// One subject's coarsened data on the log-time scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedRecord {
    pub t1: f64,
    pub t2: f64,
    /// Progression observed before death and censoring.
    pub delta: bool,
    /// Death observed before censoring.
    pub xi: bool,
    pub z: Arm,
    pub x: Vec<f64>,
}

impl ObservedRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !self.t1.is_finite() || !self.t2.is_finite() {
            return Err("non-finite time".into());
        }
        if self.t1 > self.t2 {
            return Err(format!("t1 ({}) exceeds t2 ({})", self.t1, self.t2));
        }
        if !self.delta && self.t1 != self.t2 {
            return Err(format!("delta = 0 requires t1 = t2, got {} and {}", self.t1, self.t2));
        }
        if let Some(j) = self.x.iter().position(|v| !v.is_finite()) {
            return Err(format!("covariate {j} is not finite"));
        }
        Ok(())
    }

    /// Times used for fitting: a progression tied with death is moved `jitter`
    /// earlier on the log scale.
    pub fn fit_times(&self, jitter: f64) -> (f64, f64) {
        if self.delta && self.t1 >= self.t2 {
            (self.t2 - jitter, self.t2)
        } else {
            (self.t1, self.t2)
        }
    }

    pub fn censoring_case(&self) -> CensoringCase {
        match (self.delta, self.xi) {
            (true, true) => CensoringCase::Both,
            (true, false) => CensoringCase::ProgressionOnly,
            (false, true) => CensoringCase::DeathOnly,
            (false, false) => CensoringCase::Neither,
        }
    }
}

/// The four observed-data patterns of (delta, xi).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CensoringCase {
    /// delta = 1, xi = 1: (Y_P, Y_D) = (t1, t2).
    Both,
    /// delta = 1, xi = 0: Y_P = t1, Y_D > t2.
    ProgressionOnly,
    /// delta = 0, xi = 1: Y_D = t2, Y_P > t1.
    DeathOnly,
    /// delta = 0, xi = 0: both exceed t2.
    Neither,
}

/// Latent potential outcomes for a simulated subject, log scale, indexed by arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotentialRecord {
    pub yp: [f64; 2],
    pub yd: [f64; 2],
    pub c: [f64; 2],
}

/// Observe a potential-outcome record under assignment `z`.
pub fn coarsen(p: &PotentialRecord, z: Arm, x: Vec<f64>) -> ObservedRecord {
    let k = z.index();
    let (yp, yd, c) = (p.yp[k], p.yd[k], p.c[k]);
    let t2 = yd.min(c);
    let delta = yp < t2;
    ObservedRecord {
        t1: if delta { yp } else { t2 },
        t2,
        delta,
        xi: yd < c,
        z,
        x,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ColumnScale {
    /// Values in {0, 1}, never rescaled.
    Binary,
    /// stored = (original - mean) / sd.
    Continuous { mean: f64, sd: f64 },
}

impl ColumnScale {
    pub fn to_original(&self, v: f64) -> f64 {
        match *self {
            ColumnScale::Binary => v,
            ColumnScale::Continuous { mean, sd } => mean + sd * v,
        }
    }

    pub fn to_stored(&self, v: f64) -> f64 {
        match *self {
            ColumnScale::Binary => v,
            ColumnScale::Continuous { mean, sd } => (v - mean) / sd,
        }
    }
}

/// Immutable collection of observed records sharing covariate dimension `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    records: Vec<ObservedRecord>,
    d: usize,
    names: Vec<String>,
    scales: Vec<ColumnScale>,
}

impl Dataset {
    /// Validates every record; covariates are taken as given (no scaling yet).
    pub fn new(records: Vec<ObservedRecord>, names: Vec<String>) -> Result<Self> {
        let d = names.len();
        let mut bad = Vec::new();
        for (i, r) in records.iter().enumerate() {
            if r.x.len() != d {
                bad.push(format!("record {i}: {} covariates, expected {d}", r.x.len()));
            } else if let Err(msg) = r.validate() {
                bad.push(format!("record {i}: {msg}"));
            }
        }
        if !bad.is_empty() {
            return Err(Error::Validation(bad));
        }
        let scales = (0..d)
            .map(|j| {
                if records.iter().all(|r| r.x[j] == 0.0 || r.x[j] == 1.0) {
                    ColumnScale::Binary
                } else {
                    ColumnScale::Continuous { mean: 0.0, sd: 1.0 }
                }
            })
            .collect();
        Ok(Self { records, d, names, scales })
    }

    pub fn records(&self) -> &[ObservedRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.names
    }

    pub fn scales(&self) -> &[ColumnScale] {
        &self.scales
    }

    /// Rescales continuous columns to sample mean 0 and variance 1 (n − 1
    /// denominator). The recorded scales compose, so originals stay recoverable.
    pub fn standardize(&self) -> Result<Self> {
        let n = self.records.len() as f64;
        let mut out = self.clone();
        for j in 0..self.d {
            let ColumnScale::Continuous { mean: m0, sd: s0 } = self.scales[j] else {
                continue;
            };
            let mean = self.records.iter().map(|r| r.x[j]).sum::<f64>() / n;
            let var = self.records.iter().map(|r| (r.x[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let sd = var.sqrt();
            if !(sd > 0.0) || !sd.is_finite() {
                return Err(Error::Validation(vec![format!(
                    "covariate '{}' is continuous but has zero variance",
                    self.names[j]
                )]));
            }
            for r in &mut out.records {
                r.x[j] = (r.x[j] - mean) / sd;
            }
            out.scales[j] = ColumnScale::Continuous { mean: m0 + s0 * mean, sd: s0 * sd };
        }
        Ok(out)
    }

    /// Covariates mapped back to the original scale.
    pub fn original_covariates(&self, i: usize) -> Vec<f64> {
        self.records[i]
            .x
            .iter()
            .zip(&self.scales)
            .map(|(&v, s)| s.to_original(v))
            .collect()
    }

    /// Maps an original-scale covariate profile onto the stored scale.
    pub fn standardize_profile(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d {
            return Err(Error::Domain(format!("profile has {} covariates, expected {}", x.len(), self.d)));
        }
        Ok(x.iter().zip(&self.scales).map(|(&v, s)| s.to_stored(v)).collect())
    }

    /// n × D matrix of stored covariates.
    pub fn covariate_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.d, |i, j| self.records[i].x[j])
    }

    /// n × (D + 1) mean-function design: intercept then covariates.
    pub fn design_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.d + 1, |i, j| if j == 0 { 1.0 } else { self.records[i].x[j - 1] })
    }

    pub fn arm_indices(&self, arm: Arm) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.records[i].z == arm).collect()
    }

    /// Writes a CSV in the ingest layout, times in days, covariates on the original scale.
    pub fn export_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t1".to_string(), "t2".into(), "delta".into(), "xi".into(), "z".into()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let r = &self.records[i];
            let mut row = vec![
                fmt_f64(r.t1.exp()),
                fmt_f64(r.t2.exp()),
                (r.delta as u8).to_string(),
                (r.xi as u8).to_string(),
                r.z.to_string(),
            ];
            row.extend(self.original_covariates(i).into_iter().map(fmt_f64));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn fmt_f64(v: f64) -> String {
    // Shortest representation that round-trips.
    format!("{v:?}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum TimeScale {
    #[default]
    Days,
    Log,
}

impl std::str::FromStr for TimeScale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "days" => Ok(TimeScale::Days),
            "log" => Ok(TimeScale::Log),
            other => Err(Error::Config(format!("time scale must be 'days' or 'log', got '{other}'"))),
        }
    }
}

/// Column mapping for [`ingest_csv`]. Columns not named here are covariates.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub t1: String,
    pub t2: String,
    pub delta: String,
    pub xi: String,
    pub z: String,
    pub time_scale: TimeScale,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            t1: "t1".into(),
            t2: "t2".into(),
            delta: "delta".into(),
            xi: "xi".into(),
            z: "z".into(),
            time_scale: TimeScale::Days,
        }
    }
}

/// Reads, validates and standardizes a dataset.
pub fn ingest_csv<P: AsRef<Path>>(path: P, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("missing required column '{name}'")))
    };
    let cols = [
        find(&schema.t1)?,
        find(&schema.t2)?,
        find(&schema.delta)?,
        find(&schema.xi)?,
        find(&schema.z)?,
    ];
    let cov_cols: Vec<usize> = (0..headers.len()).filter(|c| !cols.contains(c)).collect();
    let names: Vec<String> = cov_cols.iter().map(|&c| headers[c].to_string()).collect();

    let mut records = Vec::new();
    let mut bad = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let row = row + 1;
        let rec = rec.map_err(|e| Error::MalformedRow { row, msg: e.to_string() })?;
        let num = |c: usize, what: &str| -> Result<f64> {
            let s = rec.get(c).unwrap_or("");
            if s.is_empty() {
                return Err(Error::MalformedRow { row, msg: format!("missing value for '{what}'") });
            }
            s.parse::<f64>()
                .map_err(|_| Error::MalformedRow { row, msg: format!("'{what}' is not a number: '{s}'") })
        };
        let flag = |c: usize, what: &str| -> Result<bool> {
            match num(c, what)? {
                v if v == 0.0 => Ok(false),
                v if v == 1.0 => Ok(true),
                v => Err(Error::MalformedRow { row, msg: format!("'{what}' must be 0 or 1, got {v}") }),
            }
        };
        let raw1 = num(cols[0], &schema.t1)?;
        let raw2 = num(cols[1], &schema.t2)?;
        let delta = flag(cols[2], &schema.delta)?;
        let xi = flag(cols[3], &schema.xi)?;
        let z = if flag(cols[4], &schema.z)? { Arm::Treated } else { Arm::Control };
        let x = cov_cols
            .iter()
            .zip(&names)
            .map(|(&c, name)| num(c, name))
            .collect::<Result<Vec<_>>>()?;
        let (t1, t2) = match schema.time_scale {
            TimeScale::Days => {
                if !(raw1 > 0.0 && raw2 > 0.0) {
                    bad.push(format!("row {row}: times must be strictly positive in days"));
                    continue;
                }
                (raw1.ln(), raw2.ln())
            }
            TimeScale::Log => (raw1, raw2),
        };
        let r = ObservedRecord { t1, t2, delta, xi, z, x };
        match r.validate() {
            Ok(()) => records.push(r),
            Err(msg) => bad.push(format!("row {row}: {msg}")),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Validation(bad));
    }
    if records.is_empty() {
        return Err(Error::Validation(vec!["no data rows".into()]));
    }
    Dataset::new(records, names)?.standardize()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn ingest_examples() {
        let f = write_csv("t1,t2,delta,xi,z,x1,x2\n100,100,0,1,1,4.5,0\n50,100,1,1,0,3.0,1\n");
        let ds = ingest_csv(f.path(), &CsvSchema::default()).unwrap();
        let r0 = &ds.records()[0];
        assert_eq!(r0.t1, 100f64.ln());
        assert_eq!(r0.t2, 100f64.ln());
        let r1 = &ds.records()[1];
        assert!(r1.t1 < r1.t2);
        assert_eq!(r1.t1, 50f64.ln());
    }

    #[test]
    fn ingest_rejects_inconsistent_coarsening() {
        let f = write_csv("t1,t2,delta,xi,z,x1\n50,100,0,1,1,1.0\n60,50,1,1,1,2.0\n");
        match ingest_csv(f.path(), &CsvSchema::default()) {
            Err(Error::Validation(v)) => {
                assert_eq!(v.len(), 2);
                assert!(v[0].starts_with("row 1"));
                assert!(v[1].starts_with("row 2"));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn ingest_reports_malformed_row_index() {
        let f = write_csv("t1,t2,delta,xi,z,x1\n50,100,1,1,1,1.0\n50,100,1,1,1,abc\n");
        match ingest_csv(f.path(), &CsvSchema::default()) {
            Err(Error::MalformedRow { row, .. }) => assert_eq!(row, 2),
            other => panic!("{other:?}"),
        }
        let f = write_csv("t1,t2,delta,xi,z,x1\n50,100,1,1,1,\n");
        assert!(matches!(ingest_csv(f.path(), &CsvSchema::default()), Err(Error::MalformedRow { row: 1, .. })));
        let f = write_csv("t1,t2,delta,xi,z,x1\n50,100,2,1,1,1\n");
        assert!(matches!(ingest_csv(f.path(), &CsvSchema::default()), Err(Error::MalformedRow { .. })));
    }

    #[test]
    fn ingest_log_scale() {
        let f = write_csv("t1,t2,delta,xi,z,x1\n1.5,2.0,1,0,0,1.0\n-0.5,-0.5,0,1,1,2.0\n");
        let schema = CsvSchema { time_scale: TimeScale::Log, ..Default::default() };
        let ds = ingest_csv(f.path(), &schema).unwrap();
        assert_eq!(ds.records()[1].t1, -0.5);
    }

    #[test]
    fn standardize_examples() {
        let recs = [2.0, 4.0, 6.0]
            .iter()
            .zip([0.0, 1.0, 1.0])
            .map(|(&a, b)| ObservedRecord { t1: 0.0, t2: 0.0, delta: false, xi: true, z: Arm::Control, x: vec![a, b] })
            .collect();
        let ds = Dataset::new(recs, vec!["a".into(), "b".into()]).unwrap().standardize().unwrap();
        let col: Vec<f64> = ds.records().iter().map(|r| r.x[0]).collect();
        assert_eq!(col, vec![-1.0, 0.0, 1.0]);
        assert_eq!(ds.scales()[0], ColumnScale::Continuous { mean: 4.0, sd: 2.0 });
        let bin: Vec<f64> = ds.records().iter().map(|r| r.x[1]).collect();
        assert_eq!(bin, vec![0.0, 1.0, 1.0]);
        assert_eq!(ds.scales()[1], ColumnScale::Binary);

        let again = ds.standardize().unwrap();
        for (a, b) in again.records().iter().zip(ds.records()) {
            assert!((a.x[0] - b.x[0]).abs() < 1e-12);
        }
        for i in 0..3 {
            assert!((again.original_covariates(i)[0] - [2.0, 4.0, 6.0][i]).abs() < 1e-12);
        }
    }

    #[test]
    fn standardize_rejects_constant_column() {
        let recs = (0..3)
            .map(|_| ObservedRecord { t1: 0.0, t2: 0.0, delta: false, xi: true, z: Arm::Control, x: vec![2.5] })
            .collect();
        let ds = Dataset::new(recs, vec!["a".into()]).unwrap();
        assert!(ds.standardize().is_err());
    }

    #[test]
    fn coarsen_examples() {
        let mk = |yp, yd, c| PotentialRecord { yp: [yp, yp], yd: [yd, yd], c: [c, c] };
        let r = coarsen(&mk(1.0, 2.0, 3.0), Arm::Treated, vec![]);
        assert_eq!((r.t1, r.t2, r.delta, r.xi), (1.0, 2.0, true, true));
        let r = coarsen(&mk(5.0, 2.0, 3.0), Arm::Treated, vec![]);
        assert_eq!((r.t1, r.t2, r.delta, r.xi), (2.0, 2.0, false, true));
        let r = coarsen(&mk(5.0, 4.0, 3.0), Arm::Treated, vec![]);
        assert_eq!((r.t1, r.t2, r.delta, r.xi), (3.0, 3.0, false, false));
    }

    #[test]
    fn tie_jitter() {
        let r = ObservedRecord { t1: 2.0, t2: 2.0, delta: true, xi: true, z: Arm::Control, x: vec![] };
        assert!(r.validate().is_ok());
        let (a, b) = r.fit_times(DEFAULT_TIE_JITTER);
        assert_eq!(b, 2.0);
        assert!((a - (2.0 - 1e-6)).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn coarsened_records_are_valid(yp in -5.0..15.0f64, yd in -5.0..15.0f64, c in -5.0..15.0f64, treated: bool) {
                let p = PotentialRecord { yp: [yp, yp], yd: [yd, yd], c: [c, c] };
                let z = if treated { Arm::Treated } else { Arm::Control };
                let r = coarsen(&p, z, vec![0.0]);
                prop_assert!(r.validate().is_ok());
                prop_assert_eq!(r.delta && r.xi, yp < yd && yd < c);
                if r.delta && r.xi { prop_assert!(r.t1 < r.t2); }
            }

            #[test]
            fn csv_round_trip(rows in prop::collection::vec((0.01..5000.0f64, 0.0..3.0f64, any::<bool>(), any::<bool>(), any::<bool>(), -50.0..50.0f64, any::<bool>()), 3..30)) {
                let mut recs = Vec::new();
                for (i, (t1d, gap, delta, xi, z, x1, x2)) in rows.into_iter().enumerate() {
                    let t1 = t1d.ln();
                    let t2 = if delta { t1 + gap } else { t1 };
                    let z = if z { Arm::Treated } else { Arm::Control };
                    recs.push(ObservedRecord { t1, t2, delta, xi, z, x: vec![x1 + i as f64, x2 as u8 as f64] });
                }
                let ds = Dataset::new(recs, vec!["x1".into(), "x2".into()]).unwrap().standardize().unwrap();
                let f = tempfile::NamedTempFile::new().unwrap();
                ds.export_csv(f.path()).unwrap();
                let back = ingest_csv(f.path(), &CsvSchema::default()).unwrap();
                prop_assert_eq!(back.len(), ds.len());
                for (a, b) in back.records().iter().zip(ds.records()) {
                    prop_assert_eq!((a.delta, a.xi, a.z), (b.delta, b.xi, b.z));
                    prop_assert!((a.t1 - b.t1).abs() < 1e-9 && (a.t2 - b.t2).abs() < 1e-9);
                }
                for i in 0..ds.len() {
                    for (u, v) in back.original_covariates(i).iter().zip(ds.original_covariates(i)) {
                        prop_assert!((u - v).abs() < 1e-9 * (1.0 + v.abs()));
                    }
                }
            }
        }
    }
}
