//! Two-period panel data: records, CSV ingestion, model terms and design matrices.
//!
//! Every unit contributes two rows, a pre-intervention row (t=0) and a
//! post-intervention row (t=1). Treatment is zero for everybody at t=0 and
//! binary at t=1.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Warning};

/// One unit observed in both periods.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnitRecord {
    pub unit_id: String,
    pub y0: f64,
    pub y1: f64,
    /// Treatment status in the post period.
    pub treated: bool,
    /// Covariates at t=0, aligned with the dataset's covariate names.
    pub x0: Vec<f64>,
    /// Covariates at t=1.
    pub x1: Vec<f64>,
}

impl UnitRecord {
    pub fn d1(&self) -> f64 {
        if self.treated {
            1.0
        } else {
            0.0
        }
    }

    pub fn response(&self, period: u8) -> f64 {
        if period == 0 {
            self.y0
        } else {
            self.y1
        }
    }

    pub fn covariates(&self, period: u8) -> &[f64] {
        if period == 0 {
            &self.x0
        } else {
            &self.x1
        }
    }
}

/// Validated two-period panel. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    units: Vec<UnitRecord>,
    covariate_names: Vec<String>,
    time_varying: Vec<bool>,
}

impl PanelDataset {
    /// Validates the records and sorts them by unit id.
    pub fn new(covariate_names: Vec<String>, units: Vec<UnitRecord>) -> Result<Self> {
        Self::with_declared_invariant(covariate_names, units, &[]).map(|(data, _)| data)
    }

    /// Like [`PanelDataset::new`], additionally warning about covariates that were
    /// declared time-invariant but differ between the two periods.
    pub fn with_declared_invariant(
        covariate_names: Vec<String>,
        mut units: Vec<UnitRecord>,
        declared_invariant: &[String],
    ) -> Result<(Self, Vec<Warning>)> {
        let p = covariate_names.len();
        let mut seen = HashSet::new();
        for name in &covariate_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate covariate name `{name}`")));
            }
        }
        for name in declared_invariant {
            if !covariate_names.contains(name) {
                return Err(Error::UnknownCovariate(name.clone()));
            }
        }
        let mut ids = HashSet::new();
        for (i, u) in units.iter().enumerate() {
            if !ids.insert(u.unit_id.as_str()) {
                return Err(Error::DuplicateUnit(u.unit_id.clone()));
            }
            for xs in [&u.x0, &u.x1] {
                if xs.len() != p {
                    return Err(Error::CovariateLength { unit: u.unit_id.clone(), got: xs.len(), expected: p });
                }
            }
            if !u.y0.is_finite() || !u.y1.is_finite() {
                return Err(Error::MissingValue { line: i + 1, column: "y".into() });
            }
            for (j, name) in covariate_names.iter().enumerate() {
                if !u.x0[j].is_finite() || !u.x1[j].is_finite() {
                    return Err(Error::MissingValue { line: i + 1, column: name.clone() });
                }
            }
        }
        let treated = units.iter().filter(|u| u.treated).count();
        let control = units.len() - treated;
        if treated == 0 || control == 0 {
            return Err(Error::NoOverlap { treated, control });
        }
        units.sort_by(|a, b| a.unit_id.cmp(&b.unit_id));

        let time_varying: Vec<bool> =
            (0..p).map(|j| units.iter().any(|u| u.x0[j] != u.x1[j])).collect();
        let warnings = declared_invariant
            .iter()
            .filter(|name| {
                let j = covariate_names.iter().position(|c| c == *name).unwrap();
                time_varying[j]
            })
            .map(|name| Warning::TimeVaryingCovariate(name.clone()))
            .collect::<Vec<_>>();
        for w in &warnings {
            log::warn!("{w}");
        }
        Ok((Self { units, covariate_names, time_varying }, warnings))
    }

    pub fn units(&self) -> &[UnitRecord] {
        &self.units
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Per covariate: true when some unit has different t=0 and t=1 values.
    pub fn time_varying_flags(&self) -> &[bool] {
        &self.time_varying
    }

    pub fn covariate_index(&self, name: &str) -> Result<usize> {
        self.covariate_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownCovariate(name.to_string()))
    }

    pub fn n_treated(&self) -> usize {
        self.units.iter().filter(|u| u.treated).count()
    }

    pub fn treatment(&self) -> Vec<f64> {
        self.units.iter().map(UnitRecord::d1).collect()
    }

    /// Mean response in the pre-intervention period.
    pub fn pre_period_mean(&self) -> f64 {
        self.units.iter().map(|u| u.y0).sum::<f64>() / self.units.len() as f64
    }

    /// Dataset built from the units at `indices` (with repetition). Each draw
    /// becomes a distinct cluster.
    pub fn resample(&self, indices: &[usize]) -> Result<Self> {
        let width = indices.len().to_string().len();
        let units = indices
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let mut u = self.units[i].clone();
                u.unit_id = format!("{k:0width$}");
                u
            })
            .collect::<Vec<_>>();
        let treated = units.iter().filter(|u| u.treated).count();
        let control = units.len() - treated;
        if treated == 0 || control == 0 {
            return Err(Error::NoOverlap { treated, control });
        }
        Ok(Self { units, covariate_names: self.covariate_names.clone(), time_varying: self.time_varying.clone() })
    }

    /// Copy of the dataset with every response transformed by `f(period, y)`.
    pub fn map_responses(&self, f: impl Fn(u8, f64) -> f64) -> Self {
        let units = self
            .units
            .iter()
            .map(|u| UnitRecord { y0: f(0, u.y0), y1: f(1, u.y1), ..u.clone() })
            .collect();
        Self { units, covariate_names: self.covariate_names.clone(), time_varying: self.time_varying.clone() }
    }
}

/// Column names of the long-format CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub unit: String,
    pub time: String,
    pub treat: String,
    pub response: String,
    /// Covariate columns in order; `None` takes every remaining column.
    pub covariates: Option<Vec<String>>,
    /// Covariates expected to be constant across periods.
    pub time_invariant: Vec<String>,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            unit: "unit_id".into(),
            time: "time".into(),
            treat: "treat".into(),
            response: "y".into(),
            covariates: None,
            time_invariant: Vec::new(),
        }
    }
}

struct Row {
    treat: f64,
    treat_raw: String,
    y: f64,
    x: Vec<f64>,
}

fn parse_number(raw: &str, line: usize, column: &str) -> Result<f64> {
    let trimmed = raw.trim();
    match trimmed.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::MissingValue { line, column: column.to_string() }),
    }
}

/// Reads a long-format panel (one row per unit and period).
pub fn load_csv(path: impl AsRef<Path>, mapping: &ColumnMapping) -> Result<(PanelDataset, Vec<Warning>)> {
    let file = std::fs::File::open(path)?;
    read_csv(file, mapping)
}

pub fn read_csv<R: Read>(reader: R, mapping: &ColumnMapping) -> Result<(PanelDataset, Vec<Warning>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let unit_col = find(&mapping.unit)?;
    let time_col = find(&mapping.time)?;
    let treat_col = find(&mapping.treat)?;
    let y_col = find(&mapping.response)?;
    let fixed = [unit_col, time_col, treat_col, y_col];
    let covariate_names: Vec<String> = match &mapping.covariates {
        Some(names) => names.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| !fixed.contains(i))
            .map(|(_, h)| h.clone())
            .collect(),
    };
    let cov_cols = covariate_names.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;

    let mut rows: BTreeMap<String, [Option<Row>; 2]> = BTreeMap::new();
    for (k, record) in rdr.records().enumerate() {
        let record = record?;
        let line = k + 2;
        let field = |i: usize| record.get(i).unwrap_or("");
        let unit = field(unit_col).to_string();
        if unit.is_empty() {
            return Err(Error::MissingValue { line, column: mapping.unit.clone() });
        }
        let time_raw = field(time_col);
        let time = match time_raw.parse::<f64>() {
            Ok(t) if t == 0.0 => 0u8,
            Ok(t) if t == 1.0 => 1u8,
            _ => return Err(Error::InvalidTime { line, value: time_raw.to_string() }),
        };
        let treat_raw = field(treat_col).to_string();
        let treat = match treat_raw.parse::<f64>() {
            Ok(d) if d == 0.0 || d == 1.0 => d,
            Ok(_) => return Err(Error::NonBinaryTreatment { unit, value: treat_raw }),
            Err(_) => return Err(Error::MissingValue { line, column: mapping.treat.clone() }),
        };
        let y = parse_number(field(y_col), line, &mapping.response)?;
        let x = cov_cols
            .iter()
            .zip(&covariate_names)
            .map(|(&c, name)| parse_number(field(c), line, name))
            .collect::<Result<Vec<_>>>()?;
        let slot = &mut rows.entry(unit.clone()).or_insert([None, None])[time as usize];
        if slot.is_some() {
            return Err(Error::DuplicateRow { unit, time });
        }
        *slot = Some(Row { treat, treat_raw, y, x });
    }

    let mut units = Vec::with_capacity(rows.len());
    for (unit, [pre, post]) in rows {
        let pre = pre.ok_or_else(|| Error::MissingRow { unit: unit.clone(), time: 0 })?;
        let post = post.ok_or_else(|| Error::MissingRow { unit: unit.clone(), time: 1 })?;
        if pre.treat != 0.0 {
            return Err(Error::TreatedAtBaseline { unit });
        }
        if post.treat != 0.0 && post.treat != 1.0 {
            return Err(Error::NonBinaryTreatment { unit, value: post.treat_raw });
        }
        units.push(UnitRecord {
            unit_id: unit,
            y0: pre.y,
            y1: post.y,
            treated: post.treat == 1.0,
            x0: pre.x,
            x1: post.x,
        });
    }
    PanelDataset::with_declared_invariant(covariate_names, units, &mapping.time_invariant)
}

/// Writes the panel in the long format read by [`read_csv`], rows ordered by
/// unit then period.
pub fn write_csv<W: Write>(data: &PanelDataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["unit_id".to_string(), "time".into(), "treat".into(), "y".into()];
    header.extend(data.covariate_names().iter().cloned());
    wtr.write_record(&header)?;
    for u in data.units() {
        for period in 0..2u8 {
            let treat = if period == 1 && u.treated { "1" } else { "0" };
            let mut rec = vec![u.unit_id.clone(), period.to_string(), treat.to_string(), u.response(period).to_string()];
            rec.extend(u.covariates(period).iter().map(f64::to_string));
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_csv_path(data: &PanelDataset, path: impl AsRef<Path>) -> Result<()> {
    write_csv(data, std::fs::File::create(path)?)
}

/// One column of a linear predictor.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Term {
    Intercept,
    Time,
    Treatment,
    Covariate(String),
    CovariateTime(String),
    CovariateTreatment(String),
    Log(String),
    /// Integer power of a covariate, for polynomial propensity models.
    Power(String, u32),
}

impl Term {
    pub fn covariate(&self) -> Option<&str> {
        match self {
            Term::Intercept | Term::Time | Term::Treatment => None,
            Term::Covariate(c)
            | Term::CovariateTime(c)
            | Term::CovariateTreatment(c)
            | Term::Log(c)
            | Term::Power(c, _) => Some(c),
        }
    }

    pub fn involves_treatment(&self) -> bool {
        matches!(self, Term::Treatment | Term::CovariateTreatment(_))
    }

    fn involves_time(&self) -> bool {
        matches!(self, Term::Time | Term::CovariateTime(_))
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Intercept => write!(f, "intercept"),
            Term::Time => write!(f, "time"),
            Term::Treatment => write!(f, "treat"),
            Term::Covariate(c) => write!(f, "{c}"),
            Term::CovariateTime(c) => write!(f, "{c}:time"),
            Term::CovariateTreatment(c) => write!(f, "{c}:treat"),
            Term::Log(c) => write!(f, "log({c})"),
            Term::Power(c, k) => write!(f, "{c}^{k}"),
        }
    }
}

fn is_identifier(s: &str) -> bool {
    !s.is_empty()
        && s.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '.')
        && !matches!(s, "time" | "t" | "treat" | "treatment" | "intercept" | "1")
}

impl FromStr for Term {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidTerm(s.to_string());
        match s {
            "intercept" | "1" => return Ok(Term::Intercept),
            "time" | "t" => return Ok(Term::Time),
            "treat" | "treatment" | "D" => return Ok(Term::Treatment),
            _ => {}
        }
        if let Some(inner) = s.strip_prefix("log(").and_then(|r| r.strip_suffix(')')) {
            let inner = inner.trim();
            return if is_identifier(inner) { Ok(Term::Log(inner.to_string())) } else { Err(bad()) };
        }
        if let Some((base, exp)) = s.split_once('^') {
            let k: u32 = exp.trim().parse().map_err(|_| bad())?;
            let base = base.trim();
            if !is_identifier(base) || !(2..=3).contains(&k) {
                return Err(bad());
            }
            return Ok(Term::Power(base.to_string(), k));
        }
        if let Some((a, b)) = s.split_once(':') {
            let (a, b) = (a.trim(), b.trim());
            let (other, cov) = if is_identifier(a) { (b, a) } else { (a, b) };
            if !is_identifier(cov) {
                return Err(bad());
            }
            return match other {
                "time" | "t" => Ok(Term::CovariateTime(cov.to_string())),
                "treat" | "treatment" | "D" => Ok(Term::CovariateTreatment(cov.to_string())),
                _ => Err(bad()),
            };
        }
        if is_identifier(s) {
            Ok(Term::Covariate(s.to_string()))
        } else {
            Err(bad())
        }
    }
}

impl Serialize for Term {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Term {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RandomEffect {
    None,
    #[default]
    UnitIntercept,
}

/// Declarative outcome and propensity model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(rename = "outcome")]
    pub outcome_terms: Vec<Term>,
    #[serde(default)]
    pub random_effect: RandomEffect,
    /// Propensity terms, evaluated on pre-intervention covariates.
    #[serde(rename = "ps", default)]
    pub ps_terms: Vec<Term>,
}

impl ModelSpec {
    /// Intercept, time, treatment and covariate main effects; propensity model
    /// with intercept and `ps_covariates`.
    pub fn main_effects<S: AsRef<str>>(covariates: &[S], ps_covariates: &[S]) -> Self {
        let mut outcome_terms = vec![Term::Intercept, Term::Time, Term::Treatment];
        outcome_terms.extend(covariates.iter().map(|c| Term::Covariate(c.as_ref().to_string())));
        let mut ps_terms = vec![Term::Intercept];
        ps_terms.extend(ps_covariates.iter().map(|c| Term::Covariate(c.as_ref().to_string())));
        Self { outcome_terms, random_effect: RandomEffect::UnitIntercept, ps_terms }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Checks covariate references and that propensity terms use neither time
    /// nor treatment.
    pub fn validate(&self, data: &PanelDataset) -> Result<()> {
        for term in self.outcome_terms.iter().chain(&self.ps_terms) {
            if let Some(c) = term.covariate() {
                data.covariate_index(c)?;
            }
        }
        for term in &self.ps_terms {
            if term.involves_time() || term.involves_treatment() {
                return Err(Error::InvalidPsTerm(term.to_string()));
            }
        }
        Ok(())
    }
}

/// Post-period version of an outcome term list: the time column is constant
/// at t=1, so it is dropped and covariate×time collapses to the covariate.
pub fn post_period_terms(terms: &[Term]) -> Vec<Term> {
    let mut out: Vec<Term> = Vec::with_capacity(terms.len());
    for term in terms {
        let mapped = match term {
            Term::Time => continue,
            Term::CovariateTime(c) => Term::Covariate(c.clone()),
            other => other.clone(),
        };
        if !out.contains(&mapped) {
            out.push(mapped);
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Intercept,
    Time,
    Treatment,
    Covariate,
    CovariateTime,
    CovariateTreatment,
    Log,
    Power(i32),
}

#[derive(Debug, Clone)]
struct Resolved {
    kind: Kind,
    cov: usize,
    name: String,
}

fn resolve(data: &PanelDataset, terms: &[Term]) -> Result<Vec<Resolved>> {
    if terms.is_empty() {
        return Err(Error::EmptySpec);
    }
    terms
        .iter()
        .map(|t| {
            let cov = match t.covariate() {
                Some(c) => data.covariate_index(c)?,
                None => 0,
            };
            let kind = match t {
                Term::Intercept => Kind::Intercept,
                Term::Time => Kind::Time,
                Term::Treatment => Kind::Treatment,
                Term::Covariate(_) => Kind::Covariate,
                Term::CovariateTime(_) => Kind::CovariateTime,
                Term::CovariateTreatment(_) => Kind::CovariateTreatment,
                Term::Log(_) => Kind::Log,
                Term::Power(_, k) => Kind::Power(*k as i32),
            };
            Ok(Resolved { kind, cov, name: t.covariate().unwrap_or_default().to_string() })
        })
        .collect()
}

fn fill_row(
    terms: &[Resolved],
    unit: &UnitRecord,
    x: &[f64],
    t: f64,
    d: f64,
    mut put: impl FnMut(usize, f64),
) -> Result<()> {
    for (j, term) in terms.iter().enumerate() {
        let v = match term.kind {
            Kind::Intercept => 1.0,
            Kind::Time => t,
            Kind::Treatment => d,
            Kind::Covariate => x[term.cov],
            Kind::CovariateTime => x[term.cov] * t,
            Kind::CovariateTreatment => x[term.cov] * d,
            Kind::Log => {
                let v = x[term.cov];
                if !(v > 0.0) {
                    return Err(Error::NonPositiveLog { covariate: term.name.clone(), unit: unit.unit_id.clone() });
                }
                v.ln()
            }
            Kind::Power(k) => x[term.cov].powi(k),
        };
        put(j, v);
    }
    Ok(())
}

/// Design matrices for one term list.
#[derive(Debug, Clone)]
pub struct DesignMatrices {
    pub columns: Vec<String>,
    /// Fitting design: 2n rows (unit-major, t=0 then t=1) when stacked,
    /// otherwise the n post-period rows.
    pub fit: DMatrix<f64>,
    /// Response aligned with `fit`.
    pub response: Vec<f64>,
    /// Unit index of each row of `fit`.
    pub cluster: Vec<usize>,
    /// Post-period rows with treatment forced to 1.
    pub treated: DMatrix<f64>,
    /// Post-period rows with treatment forced to 0.
    pub control: DMatrix<f64>,
    pub stacked: bool,
}

/// Outcome design for `spec.outcome_terms`.
pub fn build_design(data: &PanelDataset, spec: &ModelSpec, stacked: bool) -> Result<DesignMatrices> {
    build_terms_design(data, &spec.outcome_terms, stacked)
}

pub fn build_terms_design(data: &PanelDataset, terms: &[Term], stacked: bool) -> Result<DesignMatrices> {
    let resolved = resolve(data, terms)?;
    let n = data.n_units();
    let p = resolved.len();
    let rows = if stacked { 2 * n } else { n };
    let mut fit = DMatrix::zeros(rows, p);
    let mut treated = DMatrix::zeros(n, p);
    let mut control = DMatrix::zeros(n, p);
    let mut response = Vec::with_capacity(rows);
    let mut cluster = Vec::with_capacity(rows);
    for (i, u) in data.units().iter().enumerate() {
        if stacked {
            fill_row(&resolved, u, &u.x0, 0.0, 0.0, |j, v| fit[(2 * i, j)] = v)?;
            fill_row(&resolved, u, &u.x1, 1.0, u.d1(), |j, v| fit[(2 * i + 1, j)] = v)?;
            response.extend([u.y0, u.y1]);
            cluster.extend([i, i]);
        } else {
            fill_row(&resolved, u, &u.x1, 1.0, u.d1(), |j, v| fit[(i, j)] = v)?;
            response.push(u.y1);
            cluster.push(i);
        }
        fill_row(&resolved, u, &u.x1, 1.0, 1.0, |j, v| treated[(i, j)] = v)?;
        fill_row(&resolved, u, &u.x1, 1.0, 0.0, |j, v| control[(i, j)] = v)?;
    }
    Ok(DesignMatrices {
        columns: terms.iter().map(Term::to_string).collect(),
        fit,
        response,
        cluster,
        treated,
        control,
        stacked,
    })
}

/// Propensity design on pre-intervention covariates, one row per unit.
pub fn ps_design(data: &PanelDataset, terms: &[Term]) -> Result<DMatrix<f64>> {
    if let Some(t) = terms.iter().find(|t| t.involves_time() || t.involves_treatment()) {
        return Err(Error::InvalidPsTerm(t.to_string()));
    }
    let resolved = resolve(data, terms)?;
    let mut m = DMatrix::zeros(data.n_units(), resolved.len());
    for (i, u) in data.units().iter().enumerate() {
        fill_row(&resolved, u, &u.x0, 0.0, 0.0, |j, v| m[(i, j)] = v)?;
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = "unit_id,time,treat,y,x1,x2\n\
A,0,0,1,1.5,2\nA,1,1,6,1.7,2\n\
B,0,0,3,0.5,1\nB,1,1,8,0.9,1\n\
C,0,0,2,2.5,3\nC,1,0,3,2.4,3\n\
D,0,0,4,1.0,4\nD,1,0,5,1.1,4\n";

    fn toy() -> PanelDataset {
        read_csv(TOY.as_bytes(), &ColumnMapping::default()).unwrap().0
    }

    #[test]
    fn loads_well_formed_file() {
        let data = toy();
        assert_eq!(data.n_units(), 4);
        assert_eq!(data.covariate_names(), ["x1", "x2"]);
        assert_eq!(data.time_varying_flags(), [true, false]);
        assert_eq!(data.n_treated(), 2);
        let a = &data.units()[0];
        assert_eq!((a.y0, a.y1, a.treated), (1.0, 6.0, true));
    }

    #[test]
    fn row_order_is_normalized() {
        let mut lines: Vec<&str> = TOY.lines().collect();
        let header = lines.remove(0);
        lines.reverse();
        let shuffled = format!("{header}\n{}\n", lines.join("\n"));
        let data = read_csv(shuffled.as_bytes(), &ColumnMapping::default()).unwrap().0;
        assert_eq!(data, toy());
    }

    #[test]
    fn treated_at_baseline_is_rejected() {
        let bad = TOY.replace("C,0,0,2", "C,0,1,2");
        let err = read_csv(bad.as_bytes(), &ColumnMapping::default()).unwrap_err();
        assert!(matches!(err, Error::TreatedAtBaseline { ref unit } if unit == "C"), "{err}");
    }

    #[test]
    fn load_errors() {
        let m = ColumnMapping::default();
        let missing_row = TOY.replace("D,1,0,5,1.1,4\n", "");
        assert!(matches!(read_csv(missing_row.as_bytes(), &m), Err(Error::MissingRow { time: 1, .. })));
        let nonbinary = TOY.replace("B,1,1,8", "B,1,2,8");
        assert!(matches!(read_csv(nonbinary.as_bytes(), &m), Err(Error::NonBinaryTreatment { .. })));
        let missing = TOY.replace("C,1,0,3,2.4", "C,1,0,,2.4");
        assert!(matches!(read_csv(missing.as_bytes(), &m), Err(Error::MissingValue { line: 7, .. })));
        let na = TOY.replace("C,1,0,3,2.4", "C,1,0,3,NA");
        assert!(matches!(read_csv(na.as_bytes(), &m), Err(Error::MissingValue { .. })));
        let all_control = TOY.replace("A,1,1", "A,1,0").replace("B,1,1", "B,1,0");
        assert!(matches!(
            read_csv(all_control.as_bytes(), &m),
            Err(Error::NoOverlap { treated: 0, control: 4 })
        ));
        let bad_time = TOY.replace("D,1,0,5", "D,2,0,5");
        assert!(matches!(read_csv(bad_time.as_bytes(), &m), Err(Error::InvalidTime { .. })));
        let dup = format!("{TOY}D,1,0,5,1.1,4\n");
        assert!(matches!(read_csv(dup.as_bytes(), &m), Err(Error::DuplicateRow { .. })));
        let no_y = TOY.replace("unit_id,time,treat,y,", "unit_id,time,treat,resp,");
        assert!(matches!(read_csv(no_y.as_bytes(), &m), Err(Error::MissingColumn(_))));
    }

    #[test]
    fn declared_invariant_covariate_that_varies_warns() {
        let m = ColumnMapping { time_invariant: vec!["x1".into(), "x2".into()], ..Default::default() };
        let (data, warnings) = read_csv(TOY.as_bytes(), &m).unwrap();
        assert_eq!(data.time_varying_flags(), [true, false]);
        assert_eq!(warnings, vec![Warning::TimeVaryingCovariate("x1".into())]);
    }

    #[test]
    fn csv_round_trip() {
        let data = toy();
        let mut buf = Vec::new();
        write_csv(&data, &mut buf).unwrap();
        let again = read_csv(buf.as_slice(), &ColumnMapping::default()).unwrap().0;
        assert_eq!(again, data);
    }

    #[test]
    fn term_parsing() {
        let cases = [
            ("intercept", Term::Intercept),
            ("1", Term::Intercept),
            ("time", Term::Time),
            ("treat", Term::Treatment),
            ("x1", Term::Covariate("x1".into())),
            ("x1:time", Term::CovariateTime("x1".into())),
            ("time:x1", Term::CovariateTime("x1".into())),
            ("x1:treat", Term::CovariateTreatment("x1".into())),
            ("log(x2)", Term::Log("x2".into())),
            ("x1^2", Term::Power("x1".into(), 2)),
        ];
        for (s, t) in cases {
            assert_eq!(s.parse::<Term>().unwrap(), t, "{s}");
            assert_eq!(t.to_string().parse::<Term>().unwrap(), t);
        }
        for bad in ["", "log(x", "x1:y", "x^9", "a b"] {
            assert!(bad.parse::<Term>().is_err(), "{bad}");
        }
    }

    #[test]
    fn spec_json() {
        let spec = ModelSpec::from_json(
            r#"{"outcome": ["intercept", "time", "treat", "x1", "x1:treat", "log(x2)"],
                "random_effect": "unit_intercept", "ps": ["1", "x1", "x2"]}"#,
        )
        .unwrap();
        assert_eq!(spec.outcome_terms.len(), 6);
        assert_eq!(spec.random_effect, RandomEffect::UnitIntercept);
        assert_eq!(spec.ps_terms[0], Term::Intercept);
        let round: ModelSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(round, spec);
    }

    #[test]
    fn stacked_design_layout() {
        let data = toy();
        let spec = ModelSpec {
            outcome_terms: vec![Term::Intercept, Term::Time, Term::Treatment],
            random_effect: RandomEffect::UnitIntercept,
            ps_terms: vec![],
        };
        let d = build_design(&data, &spec, true).unwrap();
        assert_eq!(d.fit.shape(), (8, 3));
        let time: Vec<f64> = d.fit.column(1).iter().copied().collect();
        assert_eq!(time, [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let treat: Vec<f64> = d.fit.column(2).iter().copied().collect();
        assert_eq!(treat, [0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(d.response, [1.0, 6.0, 3.0, 8.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(d.cluster, [0, 0, 1, 1, 2, 2, 3, 3]);

        let post = build_design(&data, &spec, false).unwrap();
        assert_eq!(post.fit.shape(), (4, 3));
        assert_eq!(post.response, [6.0, 8.0, 3.0, 5.0]);
    }

    #[test]
    fn counterfactual_rows_differ_only_in_treatment_columns() {
        let data = toy();
        let terms: Vec<Term> = ["intercept", "time", "treat", "x1", "x1:treat", "x1:time", "log(x2)"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect();
        let d = build_terms_design(&data, &terms, true).unwrap();
        for (j, term) in terms.iter().enumerate() {
            for i in 0..data.n_units() {
                let (a, b) = (d.treated[(i, j)], d.control[(i, j)]);
                if term.involves_treatment() {
                    let x1 = data.units()[i].x1[0];
                    let want = if matches!(term, Term::Treatment) { (1.0, 0.0) } else { (x1, 0.0) };
                    assert_eq!((a, b), want);
                } else {
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn design_errors() {
        let data = toy();
        let unknown = vec![Term::Intercept, Term::Covariate("z".into())];
        assert!(matches!(build_terms_design(&data, &unknown, true), Err(Error::UnknownCovariate(_))));
        let shifted = toy().map_responses(|_, y| y);
        let mut units = shifted.units().to_vec();
        units[2].x0[1] = 0.0;
        units[2].x1[1] = 0.0;
        let data = PanelDataset::new(vec!["x1".into(), "x2".into()], units).unwrap();
        let logged = vec![Term::Intercept, Term::Log("x2".into())];
        assert!(matches!(build_terms_design(&data, &logged, true), Err(Error::NonPositiveLog { .. })));
        assert!(matches!(ps_design(&data, &[Term::Intercept, Term::Time]), Err(Error::InvalidPsTerm(_))));
    }

    #[test]
    fn ps_design_uses_baseline_covariates() {
        let data = toy();
        let m = ps_design(&data, &[Term::Intercept, Term::Covariate("x1".into()), Term::Power("x1".into(), 2)]).unwrap();
        assert_eq!(m[(0, 1)], 1.5);
        assert!((m[(0, 2)] - 2.25).abs() < 1e-15);
    }

    #[test]
    fn post_period_term_mapping() {
        let terms: Vec<Term> = ["intercept", "time", "treat", "x1", "x2:time", "x1:time"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect();
        let post = post_period_terms(&terms);
        let names: Vec<String> = post.iter().map(Term::to_string).collect();
        assert_eq!(names, ["intercept", "treat", "x1", "x2"]);
    }
}
