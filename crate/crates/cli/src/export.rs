//! Flat CSV tables plus full JSON for every experiment report.

use anyhow::Result;
use backchain::interp::knockout::KnockoutSummary;
use backchain::interp::registers::SubgoalStats;
use backchain::interp::labels::LabelKind;
use backchain::interp::{ProbeReport, RegisterPatchReport, ScrubReport};
use backchain::model::EvalReport;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::manifest::RunRecorder;

/// A report with a flat, table-shaped view.
pub trait Tabular: Serialize + DeserializeOwned {
    type Row: Serialize;
    fn rows(&self) -> Vec<Self::Row>;
}

pub fn to_csv<R: Serialize>(rows: &[R]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

/// Writes `<stem>.csv` (the flat table) and `<stem>.json` (the full report).
pub fn export_results<T: Tabular>(rec: &mut RunRecorder, stem: &str, report: &T) -> Result<()> {
    rec.write_bytes(&format!("{stem}.csv"), &to_csv(&report.rows())?)?;
    rec.write_json(&format!("{stem}.json"), report)
}

/// Probe F1 by kind and stream, one row per probe. Probes whose labels are
/// constant on the sampled instances are listed in `omitted` instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTable {
    pub probes: Vec<ProbeReport>,
    pub omitted: Vec<OmittedProbe>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmittedProbe {
    pub kind: LabelKind,
    pub layer: usize,
    pub reason: String,
}

#[derive(Debug, Serialize)]
pub struct ProbeRow {
    pub probe: String,
    pub layer: usize,
    pub f1: f64,
}

impl Tabular for ProbeTable {
    type Row = ProbeRow;
    fn rows(&self) -> Vec<ProbeRow> {
        self.probes.iter().map(|r| ProbeRow { probe: r.kind.to_string(), layer: r.layer, f1: r.f1 }).collect()
    }
}

#[derive(Debug, Serialize)]
pub struct ScrubRow {
    pub path_len: usize,
    pub n: usize,
    pub loss_model: f64,
    pub loss_scrubbed: f64,
    pub l_random: f64,
    pub l_cs: f64,
}

impl Tabular for ScrubReport {
    type Row = ScrubRow;
    fn rows(&self) -> Vec<ScrubRow> {
        self.rows
            .iter()
            .map(|r| ScrubRow {
                path_len: r.path_len,
                n: r.n,
                loss_model: r.loss_model,
                loss_scrubbed: r.loss_scrubbed,
                l_random: self.l_random,
                l_cs: r.l_cs,
            })
            .collect()
    }
}

#[derive(Debug, Serialize)]
pub struct PatchRow {
    pub depth: usize,
    pub runs: usize,
    pub samples_per_run: usize,
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl Tabular for RegisterPatchReport {
    type Row = PatchRow;
    fn rows(&self) -> Vec<PatchRow> {
        self.depths
            .iter()
            .map(|d| PatchRow {
                depth: d.depth,
                runs: d.run_means.len(),
                samples_per_run: d.samples_per_run,
                mean: d.ci.mean,
                ci_lo: d.ci.lo,
                ci_hi: d.ci.hi,
            })
            .collect()
    }
}

#[derive(Debug, Serialize)]
pub struct EvalRow {
    pub path_len: usize,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

impl Tabular for EvalReport {
    type Row = EvalRow;
    fn rows(&self) -> Vec<EvalRow> {
        self.by_path_len
            .iter()
            .map(|&(path_len, n, correct)| EvalRow { path_len, n, correct, accuracy: correct as f64 / n.max(1) as f64 })
            .collect()
    }
}

impl Tabular for KnockoutSummary {
    type Row = KnockoutSummary;
    fn rows(&self) -> Vec<KnockoutSummary> {
        vec![self.clone()]
    }
}

#[derive(Debug, Serialize)]
pub struct SubgoalRow {
    pub filtered: bool,
    pub position: usize,
    pub n_trees: usize,
    pub preferred: Option<usize>,
    pub concentration: f64,
}

impl Tabular for SubgoalStats {
    type Row = SubgoalRow;
    fn rows(&self) -> Vec<SubgoalRow> {
        let row = |filtered: bool| {
            move |p: &backchain::interp::registers::PositionStats| SubgoalRow {
                filtered,
                position: p.position,
                n_trees: p.n_trees,
                preferred: p.preferred(),
                concentration: p.concentration(),
            }
        };
        self.positions.iter().map(row(false)).chain(self.filtered.iter().map(row(true))).collect()
    }
}

/// Skip-lens loss per number of skipped blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensRow {
    pub skipped: usize,
    pub stream: usize,
    pub loss: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensTable(pub Vec<LensRow>);

impl Tabular for LensTable {
    type Row = LensRow;
    fn rows(&self) -> Vec<LensRow> {
        self.0.clone()
    }
}

/// A dense matrix as CSV: one header row of column indices, then the rows.
pub fn matrix_csv(m: &ndarray::Array2<f64>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = std::iter::once("row".to_string()).chain((0..m.ncols()).map(|j| j.to_string())).collect();
    w.write_record(&header)?;
    for (i, row) in m.outer_iter().enumerate() {
        let rec: Vec<String> = std::iter::once(i.to_string()).chain(row.iter().map(|v| v.to_string())).collect();
        w.write_record(&rec)?;
    }
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use backchain::interp::scrub::ScrubRow as CoreScrubRow;

    fn probe(kind: LabelKind, layer: usize, f1: f64) -> ProbeReport {
        ProbeReport {
            kind,
            layer,
            f1,
            per_label: vec![],
            baseline_f1: 0.1,
            n_train: 10,
            n_test: 10,
            converged: true,
            warning: None,
        }
    }

    #[test]
    fn probe_table_has_the_table_one_columns() {
        let t = ProbeTable {
            probes: vec![probe(LabelKind::EdgeAtTarget, 0, 0.11), probe(LabelKind::EdgeAtTarget, 1, 1.0)],
            omitted: Vec::new(),
        };
        let csv = String::from_utf8(to_csv(&t.rows()).unwrap()).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("probe,layer,f1"));
        assert_eq!(lines.count(), t.probes.len());
    }

    #[test]
    fn json_round_trips_and_rows_match_entries() {
        let r = ScrubReport {
            l_random: 35f64.ln(),
            rows: (1..=3)
                .map(|k| CoreScrubRow { path_len: k, n: 7, loss_model: 0.1 / k as f64, loss_scrubbed: 0.3, l_cs: 0.9 - 0.1 * k as f64 })
                .collect(),
            skipped: 2,
            lookahead_constraints: true,
        };
        let back: ScrubReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
        let csv = String::from_utf8(to_csv(&r.rows()).unwrap()).unwrap();
        assert_eq!(csv.lines().count(), 1 + r.rows.len());
    }

    #[test]
    fn matrix_csv_shape() {
        let m = ndarray::Array2::from_shape_fn((3, 2), |(i, j)| (i * 2 + j) as f64);
        let csv = String::from_utf8(matrix_csv(&m).unwrap()).unwrap();
        assert_eq!(csv.lines().collect::<Vec<_>>(), ["row,0,1", "0,0,1", "1,2,3", "2,4,5"]);
    }
}
