use std::fmt::Write as _;

use serde::Serialize;

use super::study::{ModelRole, StudyResult};
use crate::error::{Error, Result};
use crate::estimators::{Estimand, Method};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub method: Method,
    pub outcome: ModelRole,
    pub ps: ModelRole,
    /// `(bias×100, Var, MSE)` for each sample size, in column order.
    pub values: Vec<[f64; 3]>,
}

/// Bias / variance / MSE table with one column block per sample size.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyTable {
    pub estimand: Estimand,
    pub sample_sizes: Vec<usize>,
    pub rows: Vec<TableRow>,
}

/// Lays out studies of the same suite at several sample sizes side by side.
pub fn render_table(results: &[StudyResult], estimand: Estimand) -> StudyTable {
    let sample_sizes = results.iter().map(|r| r.n).collect();
    let mut rows = Vec::new();
    if let Some(first) = results.first() {
        for cell in first.cells.iter().filter(|c| c.estimand == estimand) {
            let values = results
                .iter()
                .map(|r| {
                    r.cell(cell.method, cell.outcome, cell.ps, estimand)
                        .map_or([f64::NAN; 3], |c| [c.bias_x100, c.var, c.mse])
                })
                .collect();
            rows.push(TableRow { method: cell.method, outcome: cell.outcome, ps: cell.ps, values });
        }
    }
    StudyTable { estimand, sample_sizes, rows }
}

const LABELS: [&str; 3] = ["bias_x100", "var", "mse"];

impl StudyTable {
    fn header(&self) -> Vec<String> {
        let mut h = vec!["estimator".to_string(), "outcome_model".into(), "ps_model".into()];
        for n in &self.sample_sizes {
            h.extend(LABELS.iter().map(|l| format!("{l}_n{n}")));
        }
        h
    }

    fn label(&self, row: &TableRow) -> String {
        format!("{}_{}", row.method, self.estimand)
    }

    /// Comma-separated rendering with full round-trip precision.
    pub fn to_csv(&self) -> String {
        let mut out = self.header().join(",");
        out.push('\n');
        for row in &self.rows {
            let mut fields = vec![self.label(row), row.outcome.to_string(), row.ps.to_string()];
            for v in &row.values {
                fields.extend(v.iter().map(|x| format!("{x}")));
            }
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    /// Inverse of [`StudyTable::to_csv`].
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or_else(|| Error::InvalidArgument("empty table".into()))?.split(',').collect();
        if header.len() < 3 || (header.len() - 3) % 3 != 0 {
            return Err(Error::InvalidArgument("malformed table header".into()));
        }
        let sample_sizes = header[3..]
            .chunks(3)
            .map(|c| {
                c[0].strip_prefix("bias_x100_n")
                    .and_then(|n| n.parse().ok())
                    .ok_or_else(|| Error::InvalidArgument(format!("bad column `{}`", c[0])))
            })
            .collect::<Result<Vec<usize>>>()?;
        let mut rows = Vec::new();
        let mut estimand = Estimand::Ate;
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != header.len() {
                return Err(Error::InvalidArgument(format!("row has {} fields, expected {}", f.len(), header.len())));
            }
            let (m, e) = f[0].rsplit_once('_').ok_or_else(|| Error::InvalidArgument(format!("bad label `{}`", f[0])))?;
            estimand = e.parse()?;
            let mut values = Vec::with_capacity(sample_sizes.len());
            for c in f[3..].chunks(3) {
                let mut v = [0.0; 3];
                for (slot, s) in v.iter_mut().zip(c) {
                    *slot = s.parse().map_err(|_| Error::InvalidArgument(format!("bad number `{s}`")))?;
                }
                values.push(v);
            }
            rows.push(TableRow { method: m.parse()?, outcome: f[1].parse()?, ps: f[2].parse()?, values });
        }
        Ok(Self { estimand, sample_sizes, rows })
    }

    /// Aligned text with three decimals.
    pub fn to_text(&self) -> String {
        let header = self.header();
        let mut body: Vec<Vec<String>> = Vec::new();
        for row in &self.rows {
            let mut fields = vec![self.label(row), row.outcome.to_string(), row.ps.to_string()];
            for v in &row.values {
                fields.extend(v.iter().map(|x| format!("{x:.3}")));
            }
            body.push(fields);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|j| body.iter().map(|r| r[j].len()).chain([header[j].len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let line = |fields: &[String], out: &mut String| {
            for (j, f) in fields.iter().enumerate() {
                if j > 0 {
                    out.push_str("  ");
                }
                if j < 3 {
                    let _ = write!(out, "{f:<w$}", w = widths[j]);
                } else {
                    let _ = write!(out, "{f:>w$}", w = widths[j]);
                }
            }
            let trimmed = out.trim_end().len();
            out.truncate(trimmed);
            out.push('\n');
        };
        line(&header, &mut out);
        for r in &body {
            line(r, &mut out);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> StudyTable {
        StudyTable {
            estimand: Estimand::Att,
            sample_sizes: vec![250, 500],
            rows: vec![
                TableRow {
                    method: Method::Glmm,
                    outcome: ModelRole::Correct,
                    ps: ModelRole::NotUsed,
                    values: vec![[0.301, 0.549, 0.549_009], [0.1 + 0.2, 1e-17, 2.0 / 3.0]],
                },
                TableRow {
                    method: Method::IpwDid,
                    outcome: ModelRole::NotUsed,
                    ps: ModelRole::Incorrect,
                    values: vec![[-74.214, 0.523, 1.074], [f64::NAN, 0.0, -0.0]],
                },
            ],
        }
    }

    #[test]
    fn csv_round_trip() {
        let t = sample();
        let back = StudyTable::parse_csv(&t.to_csv()).unwrap();
        assert_eq!(back.to_csv(), t.to_csv());
        assert_eq!(back.rows[0].values[1][0], 0.1 + 0.2);
        assert_eq!(back.rows[0].values[1][2], 2.0 / 3.0);
    }

    #[test]
    fn empty_table_is_header_only() {
        let t = render_table(&[], Estimand::Ate);
        assert_eq!(t.to_csv(), "estimator,outcome_model,ps_model\n");
        assert_eq!(t.to_text().lines().count(), 1);
    }

    #[test]
    fn text_uses_three_decimals() {
        let text = sample().to_text();
        assert!(text.contains("0.549"));
        assert!(text.contains("GLMM_ATT"));
        assert!(!text.contains("0.549009"));
    }
}
