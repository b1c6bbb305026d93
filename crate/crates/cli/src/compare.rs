//! The `compare` command: metrics of two front CSVs against a reference.

use std::path::Path;

use anyhow::{bail, Result};
use paretokf::metrics::{coverage_points, front_distance_points, FrontParametrization};
use serde::Serialize;

use crate::output::{csv_bytes, read_front_csv};

#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub label: String,
    pub n_lambda: usize,
    pub front_distance: f64,
    pub coverage_span: f64,
}

pub fn compare(front: &FrontParametrization, a: &Path, b: &Path) -> Result<Vec<CompareRow>> {
    let radius = 2.0 * front.mean_spacing();
    let mut rows = Vec::new();
    for p in [a, b] {
        let t = read_front_csv(p)?;
        if t.front.is_empty() {
            bail!("{} has no rows", p.display());
        }
        if t.front[0].len() != front.points[0].len() {
            bail!("{} does not match the reference front's objective count", p.display());
        }
        rows.push(CompareRow {
            label: p.display().to_string(),
            n_lambda: t.front.len(),
            front_distance: front_distance_points(&front.points, &t.front)?,
            coverage_span: coverage_points(&front.points, &t.front, radius),
        });
    }
    let (x, y) = (&rows[0], &rows[1]);
    let delta = CompareRow {
        label: "delta (second − first)".into(),
        n_lambda: 0,
        front_distance: y.front_distance - x.front_distance,
        coverage_span: y.coverage_span - x.coverage_span,
    };
    rows.push(delta);
    Ok(rows)
}

pub fn render(rows: &[CompareRow]) -> Result<Vec<u8>> {
    let header = ["file", "n_lambda", "front_distance", "coverage_span"].map(String::from);
    csv_bytes(
        &header,
        rows.iter().map(|r| {
            vec![r.label.clone(), r.n_lambda.to_string(), format!("{}", r.front_distance), format!("{}", r.coverage_span)]
        }),
    )
}
