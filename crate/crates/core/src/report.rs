//! Tabular experiment output with CSV and simple SVG rendering.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Str(String),
    Int(i64),
    Real(f64),
    Bool(bool),
    /// Missing value, written as an empty field.
    Empty,
}

impl Cell {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Real(v) => Some(*v),
            Cell::Int(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn render(&self) -> String {
        match self {
            Cell::Str(s) => s.clone(),
            Cell::Int(v) => v.to_string(),
            // shortest round-trip representation, stable across platforms
            Cell::Real(v) => format!("{v:?}"),
            Cell::Bool(b) => b.to_string(),
            Cell::Empty => String::new(),
        }
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Str(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Str(s)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Real(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Empty, Cell::Real)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub schema: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    /// Ordered key/value pairs; enough to reproduce the run.
    pub metadata: Vec<(String, String)>,
}

impl ExperimentReport {
    pub fn new(schema: &[&str]) -> Self {
        Self {
            schema: schema.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
            metadata: vec![("artifact_version".into(), ARTIFACT_VERSION.into())],
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) -> Result<()> {
        if row.len() != self.schema.len() {
            return Err(Error::invalid(format!(
                "row has {} fields, schema has {}",
                row.len(),
                self.schema.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn meta(&mut self, key: &str, value: impl ToString) {
        self.metadata.push((key.to_string(), value.to_string()));
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.schema.iter().position(|c| c == name)
    }

    /// Numeric values of one column, `None` for non-numeric cells.
    pub fn numbers(&self, name: &str) -> Vec<Option<f64>> {
        match self.column(name) {
            Some(i) => self.rows.iter().map(|r| r[i].as_f64()).collect(),
            None => Vec::new(),
        }
    }

    pub fn strings(&self, name: &str) -> Vec<String> {
        match self.column(name) {
            Some(i) => self.rows.iter().map(|r| r[i].render()).collect(),
            None => Vec::new(),
        }
    }

    /// Appends another report with the same schema.
    pub fn extend(&mut self, other: ExperimentReport) -> Result<()> {
        if other.schema != self.schema {
            return Err(Error::invalid("cannot merge reports with different schemas"));
        }
        self.rows.extend(other.rows);
        Ok(())
    }

    /// CSV with a header row. Metadata goes in leading `# key=value` lines.
    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::new();
        for (k, v) in &self.metadata {
            let _ = writeln!(out, "# {k}={v}");
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(&self.schema).map_err(csv_err)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render)).map_err(csv_err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        out.push_str(&String::from_utf8(bytes).expect("csv output is utf-8"));
        Ok(out)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}

/// One named line with an optional min/max band.
#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub color: String,
    pub dashed: bool,
    pub points: Vec<(f64, f64)>,
    pub band: Option<Vec<(f64, f64, f64)>>,
}

/// Minimal line chart: optional log-scale y, shaded bands, legend.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series], log_y: bool) -> String {
    let (w, h, ml, mr, mt, mb) = (720.0, 440.0, 70.0, 170.0, 40.0, 50.0);
    let ty = |v: f64| if log_y { v.max(1e-300).log10() } else { v };

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in series {
        for &(x, y) in &s.points {
            xs.push(x);
            ys.push(ty(y));
        }
        for &(x, lo, hi) in s.band.iter().flatten() {
            xs.push(x);
            ys.push(ty(lo));
            ys.push(ty(hi));
        }
    }
    let fold = |v: &[f64]| {
        v.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)))
    };
    let (mut x0, mut x1) = fold(&xs);
    let (mut y0, mut y1) = fold(&ys);
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if !log_y {
        y0 = y0.min(0.0);
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let pw = w - ml - mr;
    let ph = h - mt - mb;
    let px = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| mt + ph - (ty(y) - y0) / (y1 - y0) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        ml + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let yv = y0 + f * (y1 - y0);
        let label = if log_y {
            format!("1e{yv:.1}")
        } else {
            format!("{yv:.3}")
        };
        let yp = mt + ph - f * ph;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{label}</text>"#,
            ml - 6.0,
            yp + 4.0
        );
        let xv = x0 + f * (x1 - x0);
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{xv:.3}</text>"#,
            ml + f * pw,
            mt + ph + 16.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        ml + pw / 2.0,
        h - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        mt + ph / 2.0,
        mt + ph / 2.0,
        escape(y_label)
    );

    for (k, s) in series.iter().enumerate() {
        if let Some(band) = &s.band {
            let mut pts: Vec<String> = band
                .iter()
                .map(|&(x, _, hi)| format!("{:.2},{:.2}", px(x), py(hi)))
                .collect();
            pts.extend(
                band.iter()
                    .rev()
                    .map(|&(x, lo, _)| format!("{:.2},{:.2}", px(x), py(lo))),
            );
            let _ = writeln!(
                svg,
                r#"<polygon points="{}" fill="{}" fill-opacity="0.2" stroke="none"/>"#,
                pts.join(" "),
                s.color
            );
        }
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let dash = if s.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"{dash}/>"#,
            pts.join(" "),
            s.color
        );
        let ly = mt + 14.0 + 18.0 * k as f64;
        let lx = ml + pw + 12.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{}" stroke-width="2"{dash}/>"#,
            lx + 24.0,
            s.color
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}">{}</text>"#,
            lx + 30.0,
            ly + 4.0,
            escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_quoting_and_order() {
        let mut r = ExperimentReport::new(&["name", "value", "flag"]);
        r.push(vec!["a,b".into(), 0.1.into(), true.into()]).unwrap();
        r.push(vec!["plain".into(), Cell::Empty, false.into()]).unwrap();
        assert!(r.push(vec!["short".into()]).is_err());
        let csv = r.to_csv().unwrap();
        let body: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(body, vec!["name,value,flag", "\"a,b\",0.1,true", "plain,,false"]);
        assert!(csv.starts_with("# artifact_version="));
    }

    #[test]
    fn reals_round_trip() {
        let v = 0.1 + 0.2;
        assert_eq!(Cell::Real(v).render().parse::<f64>().unwrap(), v);
        assert_eq!(Cell::Real(3.0).render(), "3.0");
    }

    #[test]
    fn svg_is_well_formed() {
        let s = Series {
            name: "x<y".into(),
            color: "#c00".into(),
            dashed: true,
            points: vec![(1.0, 2.0), (2.0, 4.0)],
            band: Some(vec![(1.0, 1.5, 2.5), (2.0, 3.0, 5.0)]),
        };
        let svg = line_chart_svg("t", "x", "y", &[s], true);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("x&lt;y"));
        assert!(svg.contains("<polygon"));
    }
}
