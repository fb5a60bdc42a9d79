//! Cohort files and line-delimited JSON logs.
//!
//! A cohort file is CSV with the header
//! `site_id,split,label,sex,age,synthetic,f0,f1,...`, one example per
//! line. Sites appear in file order; within a site the train split is
//! written before the holdout. Floats use the shortest representation
//! that reads back to the same value, so a write/read cycle is exact.

use std::io::{BufRead, Write};

use serde::Serialize;

use crate::cohort::{Example, Sex, SiteDataset};
use crate::error::{Error, Result};
use crate::evaluation::csv_err;

const FIXED_COLUMNS: [&str; 6] = ["site_id", "split", "label", "sex", "age", "synthetic"];

pub fn write_cohort<W: Write>(sites: &[SiteDataset], out: W) -> Result<()> {
    let dim = sites
        .iter()
        .flat_map(|s| s.train.iter().chain(&s.holdout))
        .next()
        .map_or(0, |e| e.features.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|c| c.to_string()).collect();
    header.extend((0..dim).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(csv_err)?;
    for site in sites {
        for (split, examples) in [("train", &site.train), ("holdout", &site.holdout)] {
            for e in examples.iter() {
                if e.features.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        actual: e.features.len(),
                    });
                }
                let mut rec = vec![
                    site.site_id.clone(),
                    split.to_string(),
                    e.label.to_string(),
                    e.sex.as_str().to_string(),
                    e.age.to_string(),
                    u8::from(e.synthetic).to_string(),
                ];
                rec.extend(e.features.iter().map(|v| v.to_string()));
                w.write_record(&rec).map_err(csv_err)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_cohort<R: std::io::Read>(input: R) -> Result<Vec<SiteDataset>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let fixed: Vec<&str> = header.iter().take(FIXED_COLUMNS.len()).collect();
    if fixed != FIXED_COLUMNS {
        return Err(parse_err(1, format!("header must start with {}", FIXED_COLUMNS.join(","))));
    }
    for (j, name) in header.iter().skip(FIXED_COLUMNS.len()).enumerate() {
        if name != format!("f{j}") {
            return Err(parse_err(1, format!("expected feature column `f{j}`, found `{name}`")));
        }
    }
    let dim = header.len() - FIXED_COLUMNS.len();
    let mut sites: Vec<SiteDataset> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| record.get(i).unwrap_or_default();
        let number = |i: usize| -> Result<f64> {
            field(i)
                .parse::<f64>()
                .map_err(|_| parse_err(line, format!("`{}` is not a number in column {}", field(i), &header[i])))
        };
        let site_id = field(0).to_string();
        if site_id.is_empty() {
            return Err(parse_err(line, "empty site_id".into()));
        }
        let label = field(2)
            .parse::<usize>()
            .map_err(|_| parse_err(line, format!("bad label `{}`", field(2))))?;
        let sex = match field(3) {
            "F" => Sex::F,
            "M" => Sex::M,
            other => return Err(parse_err(line, format!("sex must be F or M, found `{other}`"))),
        };
        let age = field(4)
            .parse::<u32>()
            .map_err(|_| parse_err(line, format!("bad age `{}`", field(4))))?;
        let synthetic = match field(5) {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(line, format!("synthetic must be 0 or 1, found `{other}`"))),
        };
        let features = (FIXED_COLUMNS.len()..FIXED_COLUMNS.len() + dim)
            .map(number)
            .collect::<Result<Vec<f64>>>()?;
        let example = Example {
            features,
            label,
            sex,
            age,
            site_id: site_id.clone(),
            synthetic,
        };
        let site = match sites.iter().position(|s| s.site_id == site_id) {
            Some(i) => &mut sites[i],
            None => {
                sites.push(SiteDataset {
                    site_id,
                    train: Vec::new(),
                    holdout: Vec::new(),
                });
                sites.last_mut().expect("just pushed")
            }
        };
        match field(1) {
            "train" => site.train.push(example),
            "holdout" => site.holdout.push(example),
            other => return Err(parse_err(line, format!("split must be train or holdout, found `{other}`"))),
        }
    }
    Ok(sites)
}

fn parse_err(line: usize, message: String) -> Error {
    Error::Parse { line, message }
}

/// Writes each item as one compact JSON object per line.
pub fn write_jsonl<W: Write, T: Serialize>(items: &[T], mut out: W) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<serde_json::Value>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?);
    }
    Ok(out)
}
