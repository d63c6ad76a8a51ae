//! CSV reading and writing.

use std::io::{Read, Write};

use mesurv_core::data::{declare_survival, DataError};
use mesurv_core::estimation::sig;
use mesurv_core::{Dataset, Frame, OutcomeRoles};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Read a CSV stream with a header row into a text frame.
pub fn read_frame<R: Read>(source: R) -> Result<Frame, IoError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).trim(csv::Trim::All).from_reader(source);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok(Frame::new(header, rows)?)
}

/// Read and declare a survival dataset in one step.
pub fn load_csv<R: Read>(source: R, roles: &OutcomeRoles) -> Result<Dataset, IoError> {
    Ok(declare_survival(&read_frame(source)?, roles)?)
}

/// Seventeen significant digits (exact round trip); integers print bare.
pub fn fmt17(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{v:.0}")
    } else {
        sig(v, 17)
    }
}

/// Write `data` with columns: levels, covariates, entry (if delayed), expected
/// rate (if any), time, event.
pub fn write_dataset<W: Write>(out: W, data: &Dataset) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    let delayed = data.has_delayed_entry();
    let rates = data.has_expected_rates();
    let mut header: Vec<&str> = data.level_names().iter().map(String::as_str).collect();
    header.extend(data.covariate_names().iter().map(String::as_str));
    if delayed {
        header.push("entry");
    }
    if rates {
        header.push("rate");
    }
    header.extend(["time", "event"]);
    w.write_record(&header)?;
    for r in data.records() {
        let mut row: Vec<String> = r.cluster_path.clone();
        row.extend(r.covariates.iter().map(|v| fmt17(*v)));
        if delayed {
            row.push(fmt17(r.entry));
        }
        if rates {
            row.push(fmt17(r.expected_rate.unwrap_or(0.0)));
        }
        row.push(fmt17(r.exit));
        row.push(if r.event { "1".into() } else { "0".into() });
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Roles matching the columns produced by [`write_dataset`].
pub fn roles_for(data: &Dataset) -> OutcomeRoles {
    OutcomeRoles {
        time: "time".into(),
        event: "event".into(),
        entry: data.has_delayed_entry().then(|| "entry".into()),
        expected_rate: data.has_expected_rates().then(|| "rate".into()),
        covariates: data.covariate_names().to_vec(),
        levels: data.level_names().to_vec(),
    }
}
