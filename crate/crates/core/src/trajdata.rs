//! Demonstration trajectories, stacked state windows, dataset I/O and
//! trajectory-level train/test splitting.
//!
//! Timestamps are hours. The canonical on-disk format is JSONL with one
//! `{"traj": .., "t": .., "x": [..], "a": ..}` record per timestep; CSV with a
//! `traj,t,x0..x{m-1},a` header is accepted for ingestion.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::seeding::{derive_seed, rng_from_seed, streams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Trajectory<T = f64> {
    pub id: String,
    pub states: Vec<Vec<T>>,
    pub actions: Vec<usize>,
    pub timestamps: Vec<T>,
}

impl<T: Real> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    /// Gap to the previous timestamp; `None` at the first step.
    pub fn delta_t(&self, t: usize) -> Option<T> {
        (t > 0).then(|| self.timestamps[t] - self.timestamps[t - 1])
    }

    /// Gaps aligned with timesteps; entry 0 is zero and never read.
    pub fn delta_ts(&self) -> Vec<T> {
        (0..self.len())
            .map(|t| self.delta_t(t).unwrap_or_else(T::zero))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.states.len();
        if n == 0 {
            return Err(Error::Validation(format!("trajectory '{}' is empty", self.id)));
        }
        if self.actions.len() != n || self.timestamps.len() != n {
            return Err(Error::Validation(format!(
                "trajectory '{}': states, actions and timestamps differ in length",
                self.id
            )));
        }
        let m = self.state_dim();
        if self.states.iter().any(|s| s.len() != m) {
            return Err(Error::Validation(format!(
                "trajectory '{}': ragged state dimension",
                self.id
            )));
        }
        if self.states.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Validation(format!(
                "trajectory '{}': non-finite state value",
                self.id
            )));
        }
        if self.timestamps.iter().any(|t| !t.is_finite() || *t < T::zero()) {
            return Err(Error::Validation(format!(
                "trajectory '{}': timestamps must be finite and non-negative",
                self.id
            )));
        }
        if self.timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation(format!(
                "trajectory '{}': non-increasing timestamps",
                self.id
            )));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Trajectory<U> {
        let c = |x: T| U::lit(x.as_f64());
        Trajectory {
            id: self.id.clone(),
            states: self
                .states
                .iter()
                .map(|s| s.iter().map(|&x| c(x)).collect())
                .collect(),
            actions: self.actions.clone(),
            timestamps: self.timestamps.iter().map(|&x| c(x)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Dataset<T = f64> {
    pub trajectories: Vec<Trajectory<T>>,
    pub feature_names: Vec<String>,
    pub action_count: usize,
}

impl<T: Real> Dataset<T> {
    /// Validates every invariant and builds the dataset.
    pub fn new(
        trajectories: Vec<Trajectory<T>>,
        feature_names: Vec<String>,
        action_count: usize,
    ) -> Result<Self> {
        let d = Dataset {
            trajectories,
            feature_names,
            action_count,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .trajectories
            .first()
            .ok_or_else(|| Error::Validation("dataset has no trajectories".into()))?;
        let m = first.state_dim();
        for tr in &self.trajectories {
            tr.validate()?;
            if tr.state_dim() != m {
                return Err(Error::Validation(format!(
                    "trajectory '{}': ragged state dimension ({} vs {})",
                    tr.id,
                    tr.state_dim(),
                    m
                )));
            }
            if let Some(&a) = tr.actions.iter().find(|&&a| a >= self.action_count) {
                return Err(Error::Validation(format!(
                    "trajectory '{}': action {a} outside 0..{}",
                    tr.id, self.action_count
                )));
            }
        }
        if self.feature_names.len() != m {
            return Err(Error::Validation(format!(
                "{} feature names for state dimension {m}",
                self.feature_names.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for tr in &self.trajectories {
            if !seen.insert(tr.id.as_str()) {
                return Err(Error::Validation(format!("duplicate trajectory id '{}'", tr.id)));
            }
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.trajectories.first().map_or(0, Trajectory::state_dim)
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn ids(&self) -> Vec<String> {
        self.trajectories.iter().map(|t| t.id.clone()).collect()
    }

    pub fn cast<U: Real>(&self) -> Dataset<U> {
        Dataset {
            trajectories: self.trajectories.iter().map(Trajectory::cast).collect(),
            feature_names: self.feature_names.clone(),
            action_count: self.action_count,
        }
    }

    /// Keeps only the listed trajectories, in dataset order.
    pub fn subset(&self, indices: &[usize]) -> Dataset<T> {
        let mut idx = indices.to_vec();
        idx.sort_unstable();
        idx.dedup();
        Dataset {
            trajectories: idx.iter().map(|&i| self.trajectories[i].clone()).collect(),
            feature_names: self.feature_names.clone(),
            action_count: self.action_count,
        }
    }
}

/// `window` consecutive states ending at `end_index`, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedWindow<T = f64> {
    pub vector: Vec<T>,
    pub trajectory_id: String,
    pub end_index: usize,
    /// True when the window reaches before the first state and was left-padded.
    pub padded: bool,
}

impl<T> AsRef<[T]> for StackedWindow<T> {
    fn as_ref(&self) -> &[T] {
        &self.vector
    }
}

/// One window per timestep. Windows ending before `window - 1` repeat the
/// first state on the left.
pub fn stack_windows<T: Real>(traj: &Trajectory<T>, window: usize) -> Result<Vec<StackedWindow<T>>> {
    if window < 1 {
        return Err(Error::arg("window size must be at least 1"));
    }
    let m = traj.state_dim();
    Ok((0..traj.len())
        .map(|t| {
            let mut vector = Vec::with_capacity(m * window);
            for lag in (0..window).rev() {
                let src = t.saturating_sub(lag);
                vector.extend_from_slice(&traj.states[src]);
            }
            StackedWindow {
                vector,
                trajectory_id: traj.id.clone(),
                end_index: t,
                padded: t + 1 < window,
            }
        })
        .collect())
}

/// Splits by whole trajectory. The test side gets `round(N * fraction)`
/// trajectories, clamped so neither side is empty.
pub fn split_dataset<T: Real>(
    d: &Dataset<T>,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset<T>, Dataset<T>)> {
    let n = d.len();
    if n < 2 {
        return Err(Error::arg("splitting needs at least 2 trajectories"));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::arg(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from_seed(derive_seed(seed, streams::SPLIT, 0));
    order.shuffle(&mut rng);
    let (test_idx, train_idx) = order.split_at(n_test);
    Ok((d.subset(train_idx), d.subset(test_idx)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    Jsonl,
    Csv,
}

impl DataFormat {
    /// Guesses from the file extension, defaulting to JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => DataFormat::Csv,
            _ => DataFormat::Jsonl,
        }
    }
}

impl std::str::FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(DataFormat::Jsonl),
            "csv" => Ok(DataFormat::Csv),
            other => Err(Error::arg(format!("unknown data format '{other}'"))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
struct Record<T> {
    traj: String,
    t: T,
    x: Vec<T>,
    a: usize,
}

struct Row<T> {
    line: usize,
    traj: String,
    t: T,
    x: Vec<T>,
    a: usize,
}

pub fn load_dataset<T: Real>(path: &Path, format: DataFormat) -> Result<Dataset<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let (rows, names) = match format {
        DataFormat::Jsonl => (read_jsonl_rows(path, BufReader::new(file))?, None),
        DataFormat::Csv => {
            let (rows, names) = read_csv_rows(path, file)?;
            (rows, Some(names))
        }
    };
    assemble(path, rows, names)
}

fn read_jsonl_rows<T: Real>(path: &Path, reader: impl BufRead) -> Result<Vec<Row<T>>> {
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record<T> = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        rows.push(Row {
            line: i + 1,
            traj: rec.traj,
            t: rec.t,
            x: rec.x,
            a: rec.a,
        });
    }
    Ok(rows)
}

fn read_csv_rows<T: Real>(path: &Path, file: File) -> Result<(Vec<Row<T>>, Vec<String>)> {
    let fmt_err = |line: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header = reader.headers().map_err(|e| fmt_err(1, e.to_string()))?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 4 || cols[0] != "traj" || cols[1] != "t" || cols[cols.len() - 1] != "a" {
        return Err(fmt_err(1, "expected header 'traj,t,x0..x{m-1},a'".into()));
    }
    let names: Vec<String> = cols[2..cols.len() - 1].iter().map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| fmt_err(line, e.to_string()))?;
        if rec.len() != cols.len() {
            return Err(fmt_err(line, format!("expected {} fields, found {}", cols.len(), rec.len())));
        }
        let num = |s: &str| -> Result<T> {
            s.parse::<f64>()
                .map(T::lit)
                .map_err(|_| fmt_err(line, format!("'{s}' is not a number")))
        };
        let t = num(&rec[1])?;
        let x = (2..rec.len() - 1).map(|j| num(&rec[j])).collect::<Result<Vec<T>>>()?;
        let a = rec[rec.len() - 1]
            .parse::<usize>()
            .map_err(|_| fmt_err(line, format!("'{}' is not an action id", &rec[rec.len() - 1])))?;
        rows.push(Row {
            line,
            traj: rec[0].to_string(),
            t,
            x,
            a,
        });
    }
    Ok((rows, names))
}

fn assemble<T: Real>(path: &Path, rows: Vec<Row<T>>, names: Option<Vec<String>>) -> Result<Dataset<T>> {
    if rows.is_empty() {
        return Err(Error::Validation(format!("{}: no records", path.display())));
    }
    let m = rows[0].x.len();
    if let Some(bad) = rows.iter().find(|r| r.x.len() != m) {
        return Err(Error::Validation(format!(
            "{}:{}: ragged state dimension ({} vs {m})",
            path.display(),
            bad.line,
            bad.x.len()
        )));
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Row<T>>> = HashMap::new();
    for r in rows {
        if !groups.contains_key(&r.traj) {
            order.push(r.traj.clone());
        }
        groups.entry(r.traj.clone()).or_default().push(r);
    }
    let mut action_count = 0;
    let mut trajectories = Vec::with_capacity(order.len());
    for id in order {
        let mut g = groups.remove(&id).unwrap_or_default();
        g.sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap_or(std::cmp::Ordering::Equal));
        for r in &g {
            action_count = action_count.max(r.a + 1);
        }
        trajectories.push(Trajectory {
            id,
            timestamps: g.iter().map(|r| r.t).collect(),
            actions: g.iter().map(|r| r.a).collect(),
            states: g.into_iter().map(|r| r.x).collect(),
        });
    }
    let names = names.unwrap_or_else(|| default_feature_names(m));
    Dataset::new(trajectories, names, action_count)
}

pub fn default_feature_names(m: usize) -> Vec<String> {
    (0..m).map(|i| format!("x{i}")).collect()
}

/// Writes the canonical JSONL form; `f64` values use shortest round-trip
/// formatting so reloading is bit-exact.
pub fn save_jsonl<T: Real>(d: &Dataset<T>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_jsonl(d, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_jsonl<T: Real>(d: &Dataset<T>, w: &mut impl Write) -> std::io::Result<()> {
    for tr in &d.trajectories {
        for t in 0..tr.len() {
            let rec = Record {
                traj: tr.id.clone(),
                t: tr.timestamps[t],
                x: tr.states[t].clone(),
                a: tr.actions[t],
            };
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}
