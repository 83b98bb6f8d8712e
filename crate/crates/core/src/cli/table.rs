//! Tabular results and their CSV serialization.
//!
//! Every output file starts with a `#`-prefixed metadata header carrying
//! the tool version, the normalized command line, a hash of the resolved
//! configuration, the seed where one applies, and the full resolved
//! configuration itself, so a result file is reproducible from its own
//! header. Headers contain no wall-clock information: rerunning the same
//! command with the same seed produces a byte-identical file.

use std::io::{self, Write};

/// Method that produced a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Lyapunov,
    Analytic,
    Baseline,
    MonteCarlo,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Lyapunov => "lyapunov",
            Method::Analytic => "analytic",
            Method::Baseline => "baseline",
            Method::MonteCarlo => "montecarlo",
        }
    }
}

/// File-level metadata rendered as `#` comment lines above the CSV body.
#[derive(Debug, Clone, Default)]
pub struct Metadata {
    /// Normalized command line (program name plus arguments).
    pub command: String,
    /// Short hash of the resolved configuration.
    pub config_hash: String,
    /// Ensemble seed, for stochastic commands.
    pub seed: Option<u64>,
    /// Resolved configuration, one line per entry.
    pub resolved_config: String,
    /// Additional key/value lines (e.g. derived rates).
    pub extra: Vec<(String, String)>,
}

/// A rectangular table: fixed column names, rows of preformatted cells.
#[derive(Debug, Clone)]
pub struct ResultTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Shortest round-trip decimal form of a float (empty cells use
/// [`ResultTable::EMPTY`]).
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

impl ResultTable {
    /// Placeholder for cells that have no value (e.g. stderr of an exact
    /// method, or occupancy of an unstable sweep cell).
    pub const EMPTY: &'static str = "";

    pub fn new<S: Into<String>>(columns: Vec<S>) -> Self {
        ResultTable { columns: columns.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push_row(&mut self, cells: Vec<String>) {
        assert_eq!(
            cells.len(),
            self.columns.len(),
            "row width {} does not match {} columns",
            cells.len(),
            self.columns.len()
        );
        self.rows.push(cells);
    }

    /// Serialize as CSV with the metadata header.
    pub fn write_csv(&self, meta: &Metadata, w: &mut impl Write) -> io::Result<()> {
        writeln!(w, "# colddamp v{}", env!("CARGO_PKG_VERSION"))?;
        writeln!(w, "# command: {}", meta.command)?;
        if !meta.config_hash.is_empty() {
            writeln!(w, "# config-sha256: {}", meta.config_hash)?;
        }
        if let Some(seed) = meta.seed {
            writeln!(w, "# seed: {seed}")?;
        }
        for (k, v) in &meta.extra {
            writeln!(w, "# {k}: {v}")?;
        }
        if !meta.resolved_config.is_empty() {
            writeln!(w, "# config:")?;
            for line in meta.resolved_config.lines() {
                if line.is_empty() {
                    writeln!(w, "#")?;
                } else {
                    writeln!(w, "#   {line}")?;
                }
            }
        }
        writeln!(w, "{}", self.columns.join(","))?;
        for row in &self.rows {
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Render to a string (convenience for tests and stdout output).
    pub fn to_csv_string(&self, meta: &Metadata) -> String {
        let mut buf = Vec::new();
        self.write_csv(meta, &mut buf).expect("write to Vec cannot fail");
        String::from_utf8(buf).expect("CSV output is UTF-8")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout_and_header() {
        let mut t = ResultTable::new(vec!["mode", "method", "occupancy"]);
        t.push_row(vec!["0".into(), Method::Lyapunov.tag().into(), fmt_f64(0.25)]);
        t.push_row(vec!["1".into(), Method::MonteCarlo.tag().into(), fmt_f64(0.5)]);
        let meta = Metadata {
            command: "colddamp steady --config c.toml".into(),
            config_hash: "deadbeef".into(),
            seed: Some(7),
            resolved_config: "[cavity]\nkappa = 3.0".into(),
            extra: vec![("note".into(), "x".into())],
        };
        let s = t.to_csv_string(&meta);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], format!("# colddamp v{}", env!("CARGO_PKG_VERSION")));
        assert_eq!(lines[1], "# command: colddamp steady --config c.toml");
        assert_eq!(lines[2], "# config-sha256: deadbeef");
        assert_eq!(lines[3], "# seed: 7");
        assert_eq!(lines[4], "# note: x");
        assert_eq!(lines[5], "# config:");
        assert_eq!(lines[6], "#   [cavity]");
        assert_eq!(lines[7], "#   kappa = 3.0");
        assert_eq!(lines[8], "mode,method,occupancy");
        assert_eq!(lines[9], "0,lyapunov,0.25");
        assert_eq!(lines[10], "1,montecarlo,0.5");
        assert_eq!(lines.len(), 11);
    }

    #[test]
    fn float_formatting_round_trips() {
        for v in [4e-5, 0.1, 1.0 / 3.0, 100.5, 3.5e-12, f64::MIN_POSITIVE] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
    }

    #[test]
    #[should_panic(expected = "row width")]
    fn mismatched_row_width_panics() {
        let mut t = ResultTable::new(vec!["a", "b"]);
        t.push_row(vec!["1".into()]);
    }
}
