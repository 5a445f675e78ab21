use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{layout, read_json, write_json, IterationRecord, LabelKind, PipelineConfig, ResilienceSettings, RetainedDesign};
use crate::error::{Error, Result};
use crate::flow::{evaluate, LabelWeights, Metrics};
use crate::resilience::edns;

/// Version of the record CSV and of the JSON reports.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Flat CSV row; id lists are `;`-separated.
#[derive(Serialize, Deserialize)]
struct RecordRow {
    iteration: usize,
    q_target: f64,
    best_estimated_q: f64,
    best_true_q: f64,
    mean_topc_estimated_q: f64,
    mean_topc_q: f64,
    blended_ids: String,
    resamples: usize,
    estimator_train_mse: Option<f64>,
    estimator_val_mse: Option<f64>,
    generator_kl: Option<f64>,
    generator_dec: Option<f64>,
    generator_perf: Option<f64>,
    mean_topc_edns: Option<f64>,
    best_edns: Option<f64>,
}

pub fn write_records_csv<W: Write>(mut out: W, records: &[IterationRecord]) -> Result<()> {
    writeln!(out, "# schema={REPORT_SCHEMA_VERSION}")?;
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(RecordRow {
            iteration: r.iteration,
            q_target: r.q_target,
            best_estimated_q: r.best_estimated_q,
            best_true_q: r.best_true_q,
            mean_topc_estimated_q: r.mean_topc_estimated_q,
            mean_topc_q: r.mean_topc_q,
            blended_ids: r.blended_ids.join(";"),
            resamples: r.resamples,
            estimator_train_mse: r.estimator_train_mse,
            estimator_val_mse: r.estimator_val_mse,
            generator_kl: r.generator_kl,
            generator_dec: r.generator_dec,
            generator_perf: r.generator_perf,
            mean_topc_edns: r.mean_topc_edns,
            best_edns: r.best_edns,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv<R: Read>(input: R) -> Result<Vec<IterationRecord>> {
    let mut input = BufReader::new(input);
    let mut first = String::new();
    input.read_line(&mut first)?;
    let version = first
        .trim()
        .strip_prefix("# schema=")
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: "missing schema line".into(),
        })?;
    if version != REPORT_SCHEMA_VERSION {
        return Err(Error::Parse {
            line: 1,
            message: format!("unsupported schema {version}"),
        });
    }
    let mut rows = Vec::new();
    for row in csv::Reader::from_reader(input).deserialize::<RecordRow>() {
        let r = row?;
        rows.push(IterationRecord {
            iteration: r.iteration,
            q_target: r.q_target,
            best_estimated_q: r.best_estimated_q,
            best_true_q: r.best_true_q,
            mean_topc_estimated_q: r.mean_topc_estimated_q,
            mean_topc_q: r.mean_topc_q,
            blended_ids: if r.blended_ids.is_empty() {
                Vec::new()
            } else {
                r.blended_ids.split(';').map(str::to_string).collect()
            },
            resamples: r.resamples,
            estimator_train_mse: r.estimator_train_mse,
            estimator_val_mse: r.estimator_val_mse,
            generator_kl: r.generator_kl,
            generator_dec: r.generator_dec,
            generator_perf: r.generator_perf,
            mean_topc_edns: r.mean_topc_edns,
            best_edns: r.best_edns,
        });
    }
    Ok(rows)
}

pub(crate) fn write_retained<W: Write>(mut out: W, designs: &[RetainedDesign]) -> Result<()> {
    for d in designs {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Every selected design in the run, first occurrence of each id, in
/// iteration then rank order.
pub fn read_retained(dir: &Path) -> Result<Vec<RetainedDesign>> {
    let designs = dir.join(layout::DESIGNS_DIR);
    let mut files: Vec<_> = match fs::read_dir(&designs) {
        Ok(entries) => entries
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    files.sort();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for path in files {
        for (i, line) in BufReader::new(fs::File::open(&path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let d: RetainedDesign = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: format!("{}: {e}", path.display()),
            })?;
            if seen.insert(d.id.clone()) {
                out.push(d);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignReport {
    pub id: String,
    pub iteration: usize,
    pub rank: usize,
    pub estimated_q: f64,
    pub true_q: f64,
    pub nodes: usize,
    pub edges: usize,
    pub metrics: Option<Metrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub iterations: usize,
    pub records: Vec<IterationRecord>,
    pub designs: Vec<DesignReport>,
}

/// Rewrites `records.csv` and writes `report.json` from a run directory.
pub fn emit_report(dir: &Path) -> Result<RunReport> {
    let config: PipelineConfig = read_json(&dir.join(layout::CONFIG))?;
    let records: Vec<IterationRecord> = read_json(&dir.join(layout::RECORDS_JSON))?;
    let weights = match config.label {
        LabelKind::Combined(w) => w,
        LabelKind::MaxFlow => LabelWeights::default(),
    };
    let designs = read_retained(dir)?
        .into_iter()
        .map(|d| DesignReport {
            metrics: evaluate(&d.graph, weights).ok(),
            nodes: d.graph.node_count(),
            edges: d.graph.edge_count(),
            id: d.id,
            iteration: d.iteration,
            rank: d.rank,
            estimated_q: d.estimated_q,
            true_q: d.true_q,
        })
        .collect();
    write_records_csv(BufWriter::new(fs::File::create(dir.join(layout::RECORDS_CSV))?), &records)?;
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        iterations: records.len(),
        records,
        designs,
    };
    write_json(&dir.join(layout::REPORT), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostProcessRow {
    pub id: String,
    pub iteration: usize,
    pub true_q: f64,
    pub edns: Option<f64>,
    pub stderr: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostProcessReport {
    pub schema_version: u32,
    /// Design with the smallest expected demand not supplied.
    pub optimal: Option<String>,
    /// Sorted by EDNS, failed designs last.
    pub rows: Vec<PostProcessRow>,
}

/// Scores designs with matched event seeds and ranks them by EDNS. A design
/// whose simulation fails keeps a row with the error.
pub fn rank_by_edns(designs: &[RetainedDesign], settings: &ResilienceSettings) -> PostProcessReport {
    let mut rows: Vec<PostProcessRow> = designs
        .par_iter()
        .map(|d| {
            let (edns_v, stderr, error) = match edns(&d.graph, &settings.model, settings.samples, settings.seed) {
                Ok(e) => (Some(e.edns), Some(e.stderr), None),
                Err(e) => (None, None, Some(e.to_string())),
            };
            PostProcessRow {
                id: d.id.clone(),
                iteration: d.iteration,
                true_q: d.true_q,
                edns: edns_v,
                stderr,
                error,
            }
        })
        .collect();
    rows.sort_by(|a, b| match (a.edns, b.edns) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    PostProcessReport {
        schema_version: REPORT_SCHEMA_VERSION,
        optimal: rows.first().filter(|r| r.edns.is_some()).map(|r| r.id.clone()),
        rows,
    }
}

/// Ranks every retained design of a run and writes `postprocess.json` and
/// `postprocess.csv`.
pub fn post_process(dir: &Path, settings: &ResilienceSettings) -> Result<PostProcessReport> {
    settings.model.validate()?;
    let report = rank_by_edns(&read_retained(dir)?, settings);
    write_json(&dir.join("postprocess.json"), &report)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(fs::File::create(dir.join("postprocess.csv"))?));
    for r in &report.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{DesignGraph, NodeClass, SYNTHETIC_PROFILE};

    fn record(i: usize) -> IterationRecord {
        IterationRecord {
            iteration: i,
            q_target: 1.1 * i as f64,
            best_estimated_q: 0.1 + i as f64,
            best_true_q: 1.0 / 3.0,
            mean_topc_estimated_q: 2.5e-17,
            mean_topc_q: -4.0,
            blended_ids: if i % 2 == 0 { vec![] } else { vec!["i1-c0".into(), "i1-c7".into()] },
            resamples: i,
            estimator_train_mse: Some(0.25),
            estimator_val_mse: None,
            generator_kl: Some(f64::MIN_POSITIVE),
            generator_dec: None,
            generator_perf: Some(1e300),
            mean_topc_edns: None,
            best_edns: Some(0.7),
        }
    }

    #[test]
    fn records_csv_round_trip() {
        let records: Vec<_> = (1..5).map(record).collect();
        let mut buf = Vec::new();
        write_records_csv(&mut buf, &records).unwrap();
        assert_eq!(read_records_csv(buf.as_slice()).unwrap(), records);
    }

    #[test]
    fn empty_candidate_set_gives_empty_report() {
        let r = rank_by_edns(&[], &ResilienceSettings::default());
        assert!(r.rows.is_empty());
        assert!(r.optimal.is_none());
    }

    fn chain(extra_link: bool) -> DesignGraph {
        // Supply 0 feeds demands 1 and 2; the extra edge removes the bridge.
        let mut g = DesignGraph::new(SYNTHETIC_PROFILE);
        g.add_node(NodeClass::SUPPLY, 10.0, [0.1, 0.1]);
        g.add_node(NodeClass::DEMAND, 2.0, [0.5, 0.5]);
        g.add_node(NodeClass::DEMAND, 3.0, [0.9, 0.9]);
        g.add_edge(0, 1, 0, 10.0, 1.0);
        g.add_edge(1, 2, 0, 10.0, 1.0);
        if extra_link {
            g.add_edge(0, 2, 0, 10.0, 1.0);
        }
        g
    }

    #[test]
    fn dominated_design_ranks_lower() {
        let designs: Vec<RetainedDesign> = [false, true]
            .iter()
            .enumerate()
            .map(|(i, &link)| RetainedDesign {
                id: format!("x{i}"),
                iteration: 1,
                rank: i,
                estimated_q: 5.0,
                true_q: 5.0,
                graph: chain(link),
            })
            .collect();
        let settings = ResilienceSettings {
            samples: 400,
            ..ResilienceSettings::default()
        };
        let r = rank_by_edns(&designs, &settings);
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.optimal.as_deref(), Some("x1"));
        assert!(r.rows[0].edns.unwrap() <= r.rows[1].edns.unwrap());
    }
}
