//! Tabular output: CSV (default) or JSON mirroring the same fields.

use anyhow::Result;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => anyhow::bail!("unknown format {other:?} (csv|json)"),
        }
    }
}

/// One named table with a stable header row.
#[derive(Debug, Clone)]
pub struct Table {
    pub name: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, headers: &[&str]) -> Self {
        Self {
            name: name.into(),
            headers: headers.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row(&mut self, values: Vec<String>) {
        assert_eq!(values.len(), self.headers.len(), "ragged table row");
        self.rows.push(values);
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Csv => {
                let mut out = String::new();
                let _ = writeln!(out, "{}", self.headers.join(","));
                for row in &self.rows {
                    let _ = writeln!(out, "{}", row.join(","));
                }
                out
            }
            Format::Json => {
                let objects: Vec<serde_json::Value> = self
                    .rows
                    .iter()
                    .map(|row| {
                        let map: serde_json::Map<String, serde_json::Value> = self
                            .headers
                            .iter()
                            .zip(row)
                            .map(|(h, v)| (h.clone(), parse_json_scalar(v)))
                            .collect();
                        serde_json::Value::Object(map)
                    })
                    .collect();
                serde_json::to_string_pretty(&serde_json::json!({ self.name.clone(): objects }))
                    .expect("json render")
                    + "\n"
            }
        }
    }
}

fn parse_json_scalar(v: &str) -> serde_json::Value {
    if let Ok(b) = v.parse::<bool>() {
        return serde_json::Value::Bool(b);
    }
    if let Ok(i) = v.parse::<i64>() {
        return serde_json::Value::Number(i.into());
    }
    if let Ok(f) = v.parse::<f64>() {
        if let Some(n) = serde_json::Number::from_f64(f) {
            return serde_json::Value::Number(n);
        }
    }
    serde_json::Value::String(v.into())
}

/// Write to stdout, treating a closed pipe (e.g. `| head`) as success.
pub fn out_line(text: &str) {
    use std::io::Write;
    let mut stdout = std::io::stdout();
    if let Err(e) = stdout.write_all(text.as_bytes()) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
    }
}

/// Print tables to stdout and, when an output directory is set, also write
/// one file per table.
pub fn emit(tables: &[Table], format: Format, out_dir: Option<&Path>) -> Result<()> {
    for (i, table) in tables.iter().enumerate() {
        if i > 0 {
            out_line("\n");
        }
        out_line(&table.render(format));
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
            let ext = match format {
                Format::Csv => "csv",
                Format::Json => "json",
            };
            std::fs::write(
                dir.join(format!("{}.{ext}", table.name)),
                table.render(format),
            )?;
        }
    }
    Ok(())
}

pub fn f(v: f64) -> String {
    // Plain decimal for readable magnitudes, scientific elsewhere.
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e-4 && v.abs() < 1e15 {
        let s = format!("{v}");
        s
    } else {
        format!("{v:e}")
    }
}
