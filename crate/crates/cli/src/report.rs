use std::io::Write;

use serde_json::Value;

use crate::config::Format;

/// One command's output in every supported format.
pub struct Report {
    pub json: Value,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub pretty: String,
}

impl Report {
    pub fn new(json: Value, header: &[&str], rows: Vec<Vec<String>>, pretty: String) -> Self {
        Report { json, header: header.iter().map(|s| s.to_string()).collect(), rows, pretty }
    }

    pub fn emit(&self, format: Format, out: &mut impl Write) -> anyhow::Result<()> {
        match format {
            Format::Json => {
                serde_json::to_writer_pretty(&mut *out, &self.json)?;
                writeln!(out)?;
            }
            Format::Csv => {
                let mut w = csv::Writer::from_writer(&mut *out);
                w.write_record(&self.header)?;
                for row in &self.rows {
                    w.write_record(row)?;
                }
                w.flush()?;
            }
            Format::Pretty => {
                write!(out, "{}", self.pretty)?;
                if !self.pretty.ends_with('\n') {
                    writeln!(out)?;
                }
            }
        }
        Ok(())
    }
}

/// Left-aligned columns separated by two spaces.
pub fn table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let mut s = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ");
        s.truncate(s.trim_end().len());
        s.push('\n');
        s
    };
    let mut out = line(header);
    for row in rows {
        out.push_str(&line(row));
    }
    out
}
