//! CSV and JSON file formats.
//!
//! Observation files use the header `id,period,treated,outcome,x1,...,xk`
//! (period 0 = before, 1 = after; treated 0/1). Matched files append
//! `pair_id,group,round`. Floats are written in shortest round-trip form, so
//! re-reading a written file reproduces every value bit for bit.

use std::collections::HashMap;
use std::io::{Read, Write};

use crate::balance::BalanceReport;
use crate::error::{Error, Result};
use crate::model::{GroupTag, Observation, Period, Quad};
use crate::simulator::PerformanceRecord;

const FIXED_COLUMNS: [&str; 4] = ["id", "period", "treated", "outcome"];
const MATCH_COLUMNS: [&str; 3] = ["pair_id", "group", "round"];

pub const RESULTS_COLUMNS: [&str; 9] = [
    "scheme",
    "scenario",
    "matched_size",
    "mean_estimate",
    "sd",
    "bias_ratio",
    "rmse",
    "coverage",
    "completed",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairAnnotation {
    pub pair_id: u64,
    pub group: GroupTag,
    pub round: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTable {
    pub covariate_count: usize,
    pub observations: Vec<Observation>,
    /// Present when the file carries the matched-output columns.
    pub annotations: Option<Vec<PairAnnotation>>,
}

fn schema(line: u64, column: &str, message: impl Into<String>) -> Error {
    Error::Schema { line, column: column.to_string(), message: message.into() }
}

fn parse_binary(raw: &str, line: u64, column: &str) -> Result<bool> {
    match raw {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(schema(line, column, format!("expected 0 or 1, found {raw:?}"))),
    }
}

fn parse_finite(raw: &str, line: u64, column: &str) -> Result<f64> {
    let v: f64 = raw
        .parse()
        .map_err(|_| schema(line, column, format!("expected a number, found {raw:?}")))?;
    if !v.is_finite() {
        return Err(schema(line, column, format!("non-finite value {raw:?}")));
    }
    Ok(v)
}

/// Reads an observation file (raw or matched).
pub fn read_observations_csv<R: Read>(reader: R) -> Result<ObservationTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let names: Vec<&str> = headers.iter().collect();
    for (i, want) in FIXED_COLUMNS.iter().enumerate() {
        match names.get(i) {
            Some(got) if got == want => {}
            Some(got) => {
                return Err(schema(1, got, format!("expected column {want:?} at position {}", i + 1)))
            }
            None => return Err(schema(1, want, "missing column")),
        }
    }
    let mut k = 0;
    while names.get(4 + k).is_some_and(|n| *n == format!("x{}", k + 1)) {
        k += 1;
    }
    let rest = &names[4 + k..];
    let annotated = match rest {
        [] => false,
        r if r == MATCH_COLUMNS => true,
        [first, ..] => return Err(schema(1, first, "unexpected column")),
    };

    let mut observations = Vec::new();
    let mut annotations = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or("");
        let id: u64 = field(0)
            .parse()
            .map_err(|_| schema(line, "id", format!("expected a non-negative integer, found {:?}", field(0))))?;
        let period = if parse_binary(field(1), line, "period")? { Period::After } else { Period::Before };
        let treated = parse_binary(field(2), line, "treated")?;
        let outcome = parse_finite(field(3), line, "outcome")?;
        let covariates = (0..k)
            .map(|j| parse_finite(field(4 + j), line, &format!("x{}", j + 1)))
            .collect::<Result<Vec<_>>>()?;
        let obs = Observation::new(id, covariates, treated, period, outcome);
        if annotated {
            let base = 4 + k;
            let pair_id: u64 = field(base)
                .parse()
                .map_err(|_| schema(line, "pair_id", format!("expected an integer, found {:?}", field(base))))?;
            let group: GroupTag =
                field(base + 1).parse().map_err(|_| schema(line, "group", format!("unknown group {:?}", field(base + 1))))?;
            if group != obs.group() {
                return Err(schema(line, "group", format!("group {group} contradicts period/treated")));
            }
            let round: usize = field(base + 2)
                .parse()
                .ok()
                .filter(|r| *r >= 1)
                .ok_or_else(|| schema(line, "round", format!("expected a positive integer, found {:?}", field(base + 2))))?;
            annotations.push(PairAnnotation { pair_id, group, round });
        }
        observations.push(obs);
    }
    Ok(ObservationTable {
        covariate_count: k,
        observations,
        annotations: annotated.then_some(annotations),
    })
}

fn observation_header(k: usize) -> Vec<String> {
    FIXED_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain((1..=k).map(|j| format!("x{j}")))
        .collect()
}

fn observation_fields(o: &Observation) -> Vec<String> {
    let mut row = vec![
        o.id.to_string(),
        o.period.code().to_string(),
        (o.treated as u8).to_string(),
        o.outcome.to_string(),
    ];
    row.extend(o.covariates.iter().map(|x| x.to_string()));
    row
}

pub fn write_observations_csv<W: Write>(writer: W, observations: &[Observation]) -> Result<()> {
    let k = observations.first().map_or(0, |o| o.covariates.len());
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(observation_header(k))?;
    for o in observations {
        wtr.write_record(observation_fields(o))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Writes surviving rows in BT, BC, AT, AC order with their pair labels.
pub fn write_matched_csv<W: Write>(
    writer: W,
    groups: &Quad,
    labels: &HashMap<u64, (u64, usize)>,
) -> Result<()> {
    let k = groups.dimension().unwrap_or(0);
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = observation_header(k);
    header.extend(MATCH_COLUMNS.iter().map(|s| s.to_string()));
    wtr.write_record(&header)?;
    for o in groups.iter() {
        let (pair_id, round) = labels.get(&o.id).copied().unwrap_or((0, 1));
        let mut row = observation_fields(o);
        row.extend([pair_id.to_string(), o.group().to_string(), round.to_string()]);
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_balance_csv<W: Write>(writer: W, report: &BalanceReport) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["comparison", "covariate", "delta", "balanced"])?;
    for e in &report.entries {
        wtr.write_record([
            e.comparison.to_string(),
            format!("x{}", e.covariate + 1),
            e.delta.to_string(),
            e.balanced.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_results_csv<W: Write>(writer: W, records: &[PerformanceRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(RESULTS_COLUMNS)?;
    for r in records {
        wtr.write_record([
            r.scheme.to_string(),
            r.scenario.to_string(),
            r.matched_size.to_string(),
            r.mean_estimate.to_string(),
            r.sd.to_string(),
            r.bias_ratio.to_string(),
            r.rmse.to_string(),
            r.coverage.to_string(),
            r.completed.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_results_csv<R: Read>(reader: R) -> Result<Vec<PerformanceRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(RESULTS_COLUMNS) {
        let got = headers.iter().collect::<Vec<_>>().join(",");
        return Err(schema(1, "", format!("expected header {}, found {got:?}", RESULTS_COLUMNS.join(","))));
    }
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let num = |i: usize| -> Result<f64> {
            let raw = row.get(i).unwrap_or("");
            raw.parse::<f64>()
                .map_err(|_| schema(line, RESULTS_COLUMNS[i], format!("expected a number, found {raw:?}")))
        };
        let scheme = row[0].parse().map_err(|e: Error| schema(line, "scheme", e.to_string()))?;
        let scenario = row[1].parse().map_err(|e: Error| schema(line, "scenario", e.to_string()))?;
        let completed = match &row[8] {
            "true" => true,
            "false" => false,
            other => return Err(schema(line, "completed", format!("expected true/false, found {other:?}"))),
        };
        let matched_size = num(2)?;
        records.push(PerformanceRecord {
            scheme,
            scenario,
            matched_size,
            mean_estimate: num(3)?,
            sd: num(4)?,
            bias_ratio: num(5)?,
            rmse: num(6)?,
            coverage: num(7)?,
            completed,
            replications: 0,
            successes: 0,
            group_emptied: 0,
            median_matched_size: f64::NAN,
        });
    }
    Ok(records)
}
