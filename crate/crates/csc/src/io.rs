//! Long-format panel CSV: one row per unit and period.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use csc_core::panel::{PanelMatrix, PanelRecord, RecordOptions, TreatmentOverride};

use crate::error::{Error, Result};

/// Column names of the long-format file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub unit_id: String,
    pub time: String,
    pub outcome: String,
    pub treated: String,
    pub city: String,
    /// Columns starting with this prefix are covariates; the prefix is stripped.
    pub covariate_prefix: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            unit_id: "unit_id".into(),
            time: "time".into(),
            outcome: "outcome".into(),
            treated: "treated".into(),
            city: "city".into(),
            covariate_prefix: "x_".into(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub schema: CsvSchema,
    /// Required when the file has no treated column.
    pub treatment_override: Option<TreatmentOverride>,
    /// Explicit category groups; dummies sharing a `stem_` prefix are grouped anyway.
    pub groups: Vec<(String, Vec<String>)>,
    /// Replace outcomes by `ln(1 + y)`.
    pub log1p: bool,
}

pub fn load_csv(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<PanelMatrix> {
    let path = path.as_ref();
    let file = File::open(path).map_err(Error::io(path))?;
    read_panel(file, path, opts)
}

/// Reads a panel from any reader; `label` only appears in error messages.
pub fn read_panel<R: Read>(reader: R, label: &Path, opts: &LoadOptions) -> Result<PanelMatrix> {
    let csv_err = |source| Error::Csv {
        path: label.to_path_buf(),
        source,
    };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(csv_err)?.clone();
    let s = &opts.schema;
    let find = |name: &str| header.iter().position(|h| h == name);
    let required = |name: &str| {
        find(name).ok_or_else(|| Error::Parse {
            path: label.to_path_buf(),
            line: 1,
            msg: format!("missing column `{name}`"),
        })
    };
    let (c_unit, c_time, c_out) = (required(&s.unit_id)?, required(&s.time)?, required(&s.outcome)?);
    let c_treated = find(&s.treated);
    if c_treated.is_none() && opts.treatment_override.is_none() {
        return Err(Error::Parse {
            path: label.to_path_buf(),
            line: 1,
            msg: format!("missing column `{}` and no treated units given", s.treated),
        });
    }
    let c_city = find(&s.city);
    let cov_cols: Vec<(usize, String)> = header
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix(s.covariate_prefix.as_str()).map(|n| (i, n.to_string())))
        .collect();

    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(csv_err)?;
        let line = row.position().map_or(0, |p| p.line());
        let bad = |msg: String| Error::Parse {
            path: label.to_path_buf(),
            line,
            msg,
        };
        let field = |i: usize| row.get(i).unwrap_or("");
        let number = |i: usize| -> Result<Option<f64>> {
            match field(i) {
                "" | "NA" | "NaN" => Ok(None),
                v => v
                    .parse::<f64>()
                    .map(Some)
                    .map_err(|_| bad(format!("`{}` is not a number: `{v}`", &header[i]))),
            }
        };
        let time = field(c_time)
            .parse::<i64>()
            .map_err(|_| bad(format!("`{}` is not an integer period", field(c_time))))?;
        let treated = match c_treated.map(field) {
            None | Some("") => None,
            Some("1" | "true" | "TRUE") => Some(true),
            Some("0" | "false" | "FALSE") => Some(false),
            Some(v) => return Err(bad(format!("treated flag must be 0 or 1, got `{v}`"))),
        };
        records.push(PanelRecord {
            unit_id: field(c_unit).to_string(),
            time,
            outcome: number(c_out)?,
            treated,
            city: c_city.map(field).filter(|c| !c.is_empty()).map(str::to_string),
            covariates: cov_cols.iter().map(|&(i, _)| number(i)).collect::<Result<_>>()?,
        });
    }

    let panel = PanelMatrix::from_records(
        &records,
        &RecordOptions {
            covariate_names: cov_cols.into_iter().map(|(_, n)| n).collect(),
            groups: opts.groups.clone(),
            treatment_override: opts.treatment_override.clone(),
        },
    )?;
    Ok(if opts.log1p { panel.log1p_outcomes()? } else { panel })
}

pub fn save_csv(path: impl AsRef<Path>, p: &PanelMatrix) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(Error::io(path))?;
    write_panel(file, p).map_err(|source| Error::Csv {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes the default schema. Doubles print in shortest round-trip form.
pub fn write_panel<W: Write>(writer: W, p: &PanelMatrix) -> csv::Result<()> {
    let s = CsvSchema::default();
    let mut w = csv::Writer::from_writer(writer);
    let with_city = p.city_of().is_some();
    let mut header = vec![s.unit_id, s.time, s.outcome, s.treated];
    if with_city {
        header.push(s.city);
    }
    header.extend(p.covariates().names().iter().map(|n| format!("{}{n}", s.covariate_prefix)));
    w.write_record(&header)?;
    for r in p.to_records() {
        let mut row = vec![
            r.unit_id,
            r.time.to_string(),
            r.outcome.map(|v| v.to_string()).unwrap_or_default(),
            r.treated.map(|d| u8::from(d).to_string()).unwrap_or_default(),
        ];
        if with_city {
            row.push(r.city.unwrap_or_default());
        }
        row.extend(r.covariates.iter().map(|v| v.map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
