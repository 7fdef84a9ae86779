//! Dataset directory format.
//!
//! A dataset is a directory holding `features.csv` (n rows of comma-separated
//! 0/1), `edges.csv` (rows `u,v`, 0-based), plus optional `labels.csv` (one
//! class id per row) and `splits.json` (train/val/test id arrays). Loading
//! always runs [`preprocess`], so files produced by other tools with raw
//! features or directed edge lists ingest cleanly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{preprocess, Graph, RawGraph, Splits};

pub fn load_dir(dir: &Path) -> Result<Graph> {
    let features = read_feature_rows(&dir.join("features.csv"))?;
    let num_nodes = features.len();
    let edges = read_edge_rows(&dir.join("edges.csv"))?;

    let labels_path = dir.join("labels.csv");
    let labels = if labels_path.exists() {
        Some(read_label_rows(&labels_path)?)
    } else {
        None
    };

    let splits_path = dir.join("splits.json");
    let splits = if splits_path.exists() {
        let text = fs::read_to_string(&splits_path)?;
        Some(serde_json::from_str::<Splits>(&text)?)
    } else {
        None
    };

    preprocess(RawGraph {
        num_nodes,
        features,
        edges,
        labels,
        splits,
    })
}

/// Writes the graph in the directory format. Only unit-weight graphs are
/// storable; weighted views are audit-log material, not datasets.
pub fn save_dir(g: &Graph, dir: &Path) -> Result<()> {
    if let Some(bad) = g.edges().iter().find(|e| e.w != 1.0) {
        return Err(Error::Data(format!(
            "cannot store weighted edge ({},{},{})",
            bad.u, bad.v, bad.w
        )));
    }
    fs::create_dir_all(dir)?;

    let mut features = String::new();
    for i in 0..g.num_nodes() {
        let row: Vec<String> = g
            .features()
            .row(i)
            .iter()
            .map(|&x| if x > 0.0 { "1".into() } else { "0".into() })
            .collect();
        features.push_str(&row.join(","));
        features.push('\n');
    }
    fs::write(dir.join("features.csv"), features)?;

    let mut edges = String::new();
    for e in g.edges() {
        edges.push_str(&format!("{},{}\n", e.u, e.v));
    }
    fs::write(dir.join("edges.csv"), edges)?;

    if let Some(labels) = g.labels() {
        let mut text = String::new();
        for l in labels {
            text.push_str(&format!("{l}\n"));
        }
        fs::write(dir.join("labels.csv"), text)?;
    }
    if let Some(splits) = g.splits() {
        fs::write(dir.join("splits.json"), serde_json::to_string_pretty(splits)?)?;
    }
    Ok(())
}

fn read_feature_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Result<Vec<f64>> = line
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Data(format!("features.csv line {}: bad value {tok:?}", lineno + 1)))
            })
            .collect();
        rows.push(row?);
    }
    if rows.is_empty() {
        return Err(Error::Data("features.csv has no rows".into()));
    }
    Ok(rows)
}

fn read_edge_rows(path: &Path) -> Result<Vec<(usize, usize, f64)>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut edges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let parse = |tok: Option<&str>| -> Result<usize> {
            tok.and_then(|t| t.trim().parse::<usize>().ok())
                .ok_or_else(|| Error::Data(format!("edges.csv line {}: expected `u,v`", lineno + 1)))
        };
        let u = parse(parts.next())?;
        let v = parse(parts.next())?;
        edges.push((u, v, 1.0));
    }
    Ok(edges)
}

fn read_label_rows(path: &Path) -> Result<Vec<u32>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let id = line
            .trim()
            .parse::<u32>()
            .map_err(|_| Error::Data(format!("labels.csv line {}: bad class id", lineno + 1)))?;
        labels.push(id);
    }
    Ok(labels)
}
