//! Long-format CSV ingestion.
//!
//! Expected columns (header required, any order): `group_id`, `subject_id`,
//! `t`, `y`. Rows are grouped by (group, subject) and sorted by time; groups
//! and subjects are ordered lexicographically by their identifiers so the
//! result does not depend on row order.

use std::collections::BTreeMap;
use std::path::Path;
use warpanova::model::{GroupData, ObservationSet};
use warpanova::{Error, Result};

/// Optional transforms applied before fitting, mirroring the usual
/// preprocessing of growth-curve data.
#[derive(Debug, Clone, Copy, Default)]
pub struct IngestOptions {
    /// Replace y by ln(y) (requires positive values).
    pub log_y: bool,
    /// Linearly rescale each subject's grid about the global start so all
    /// trajectories end at the median endpoint.
    pub rescale_endpoints: bool,
}

#[derive(Debug)]
pub struct Ingested {
    pub data: ObservationSet,
    /// Group identifiers in output order.
    pub group_ids: Vec<String>,
    /// Subject identifiers per group, in output order.
    pub subject_ids: Vec<Vec<String>>,
}

pub fn ingest_csv(path: &Path, options: IngestOptions) -> Result<Ingested> {
    let raw = std::fs::read_to_string(path).map_err(|e| {
        Error::Parse { line: 0, message: format!("cannot read {}: {e}", path.display()) }
    })?;
    ingest_str(&raw, options)
}

pub fn ingest_str(raw: &str, options: IngestOptions) -> Result<Ingested> {
    let mut lines = raw.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or(Error::Parse { line: 1, message: "empty file".into() })?;
    let columns: Vec<&str> = header.split(',').map(|c| c.trim()).collect();
    let find = |name: &str| -> Result<usize> {
        columns.iter().position(|c| *c == name).ok_or(Error::Parse {
            line: 1,
            message: format!("missing required column '{name}' in header '{header}'"),
        })
    };
    let col_group = find("group_id")?;
    let col_subject = find("subject_id")?;
    let col_t = find("t")?;
    let col_y = find("y")?;

    // (group, subject) -> observations as (t, y, line number).
    type SubjectRows = BTreeMap<String, Vec<(f64, f64, usize)>>;
    let mut table: BTreeMap<String, SubjectRows> = BTreeMap::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(|c| c.trim()).collect();
        if fields.len() != columns.len() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {} fields, found {}", columns.len(), fields.len()),
            });
        }
        let parse_num = |raw: &str, what: &str| -> Result<f64> {
            raw.parse::<f64>().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("non-numeric {what} value '{raw}'"),
            })
        };
        let t = parse_num(fields[col_t], "t")?;
        let y = parse_num(fields[col_y], "y")?;
        if !t.is_finite() || !y.is_finite() {
            return Err(Error::Parse { line: line_no, message: "non-finite value".into() });
        }
        table
            .entry(fields[col_group].to_string())
            .or_default()
            .entry(fields[col_subject].to_string())
            .or_default()
            .push((t, y, line_no));
    }
    if table.is_empty() {
        return Err(Error::Parse { line: 1, message: "no data rows".into() });
    }

    let mut group_ids = Vec::new();
    let mut subject_ids = Vec::new();
    let mut groups: Vec<Vec<(Vec<f64>, Vec<f64>)>> = Vec::new();
    for (gid, subjects) in table {
        let mut per_group = Vec::new();
        let mut ids = Vec::new();
        for (sid, mut obs) in subjects {
            obs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            for w in obs.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(Error::Parse {
                        line: w[1].2,
                        message: format!(
                            "duplicate time {} for subject '{sid}' in group '{gid}'",
                            w[1].0
                        ),
                    });
                }
            }
            let mut y: Vec<f64> = obs.iter().map(|o| o.1).collect();
            if options.log_y {
                for (v, o) in y.iter_mut().zip(&obs) {
                    if *v <= 0.0 {
                        return Err(Error::Parse {
                            line: o.2,
                            message: format!("log transform requires positive y, found {v}"),
                        });
                    }
                    *v = v.ln();
                }
            }
            let t: Vec<f64> = obs.iter().map(|o| o.0).collect();
            per_group.push((t, y));
            ids.push(sid);
        }
        groups.push(per_group);
        subject_ids.push(ids);
        group_ids.push(gid);
    }

    if options.rescale_endpoints {
        let start = groups
            .iter()
            .flatten()
            .map(|(t, _)| t[0])
            .fold(f64::INFINITY, f64::min);
        let mut endpoints: Vec<f64> =
            groups.iter().flatten().map(|(t, _)| *t.last().unwrap()).collect();
        endpoints.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = endpoints[endpoints.len() / 2];
        for per_group in &mut groups {
            for (t, _) in per_group.iter_mut() {
                let end = *t.last().unwrap();
                if end <= start {
                    return Err(Error::Parse {
                        line: 0,
                        message: "cannot rescale a subject with a degenerate time span".into(),
                    });
                }
                let scale = (median - start) / (end - start);
                for v in t.iter_mut() {
                    *v = start + (*v - start) * scale;
                }
            }
        }
    }

    let group_data: Result<Vec<GroupData>> =
        groups.iter().map(|g| GroupData::from_subjects(g)).collect();
    let group_data = group_data?;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for g in &group_data {
        for &t in g.times() {
            lo = lo.min(t);
            hi = hi.max(t);
        }
    }
    let data = ObservationSet::new(group_data, (lo, hi))?;
    Ok(Ingested { data, group_ids, subject_ids })
}
