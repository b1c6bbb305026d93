//! Result files. Everything is rendered in memory first and then written
//! with write-temp-then-rename, so a failed run leaves no partial output.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use paretokf::model::MultiObjectiveProblem;
use paretokf::sampler::{LexPath, ParetoApproximation};
use serde::Serialize;

/// Bumped whenever a column layout changes.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize)]
pub struct FileInfo {
    pub name: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub columns: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Artifact {
    pub name: String,
    pub columns: Vec<String>,
    pub bytes: Vec<u8>,
}

impl Artifact {
    pub fn info(&self) -> FileInfo {
        FileInfo { name: self.name.clone(), columns: self.columns.clone() }
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).with_context(|| format!("writing into {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn write_artifacts(dir: &Path, artifacts: &[Artifact]) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::with_capacity(artifacts.len());
    for a in artifacts {
        let p = dir.join(&a.name);
        write_atomic(&p, &a.bytes)?;
        paths.push(p);
    }
    Ok(paths)
}

pub fn csv_bytes(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

fn indexed(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}_{i}")).collect()
}

fn num(x: f64) -> String {
    // shortest representation that round-trips
    format!("{x}")
}

/// Columns `lambda_i`, `u_i`, `G_i` (objective values) and `f_i` (front point).
pub fn front_columns(l: usize, d: usize) -> Vec<String> {
    let mut c = indexed("lambda", l);
    c.extend(indexed("u", d));
    c.extend(indexed("G", l));
    c.extend(indexed("f", l));
    c
}

pub fn front_csv(approx: &ParetoApproximation, problem: &MultiObjectiveProblem) -> Result<Artifact> {
    let columns = front_columns(problem.num_objectives(), problem.dim_u());
    let rows = approx.entries.iter().map(|e| {
        e.lambda
            .as_slice()
            .iter()
            .chain(&e.u_star)
            .chain(&e.objective_values)
            .chain(&e.front_point)
            .map(|&x| num(x))
            .collect()
    });
    let bytes = csv_bytes(&columns, rows)?;
    Ok(Artifact { name: format!("{}_front.csv", approx.strategy), columns, bytes })
}

/// One row per weight: path position, the weights, and for adaptive runs
/// the step taken from it.
pub fn lambda_csv(approx: &ParetoApproximation) -> Result<Artifact> {
    let l = approx.entries.first().map_or(2, |e| e.lambda.len());
    let path = LexPath::new(l);
    let mut columns = vec!["index".to_string(), "s".to_string()];
    columns.extend(indexed("lambda", l));
    columns.extend(["step", "grad_norm", "clamped"].map(String::from));
    let rows = approx.entries.iter().enumerate().map(|(k, e)| {
        let mut r = vec![k.to_string(), num(path.position(&e.lambda))];
        r.extend(e.lambda.as_slice().iter().map(|&x| num(x)));
        match approx.steps.get(k) {
            Some(st) => r.extend([num(st.step), num(st.grad_norm), st.clamped.to_string()]),
            None => r.extend([String::new(), String::new(), String::new()]),
        }
        r
    });
    let bytes = csv_bytes(&columns, rows)?;
    Ok(Artifact { name: format!("{}_lambdas.csv", approx.strategy), columns, bytes })
}

pub fn json_artifact<T: Serialize>(name: &str, value: &T) -> Result<Artifact> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(Artifact { name: name.to_string(), columns: Vec::new(), bytes })
}

/// A front CSV read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct FrontTable {
    pub lambda: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub objectives: Vec<Vec<f64>>,
    pub front: Vec<Vec<f64>>,
}

pub fn read_front_csv(path: &Path) -> Result<FrontTable> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    let count = |p: &str| header.iter().filter(|h| h.starts_with(&format!("{p}_"))).count();
    let (l, d) = (count("lambda"), count("u"));
    if l < 2 || header != front_columns(l, d) {
        bail!("{} is not a front CSV (header {:?})", path.display(), header);
    }
    let mut t = FrontTable { lambda: vec![], u: vec![], objectives: vec![], front: vec![] };
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("{} row {}", path.display(), i + 1))?;
        t.lambda.push(vals[..l].to_vec());
        t.u.push(vals[l..l + d].to_vec());
        t.objectives.push(vals[l + d..2 * l + d].to_vec());
        t.front.push(vals[2 * l + d..].to_vec());
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn numbers_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 12345.678901234567] {
            assert_eq!(num(x).parse::<f64>().unwrap(), x);
        }
    }
}
