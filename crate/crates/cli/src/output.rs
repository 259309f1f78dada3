//! Result rows, CSV files and the SVG convergence plot.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use diffbench_core::SchemeKind;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

mod scheme_name {
    use super::*;

    pub fn serialize<S: Serializer>(
        s: &SchemeKind,
        ser: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        ser.serialize_str(s.as_str())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        de: D,
    ) -> std::result::Result<SchemeKind, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One (experiment, scheme, λ, h) cell. Missing values serialize as blanks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    #[serde(with = "scheme_name")]
    pub scheme: SchemeKind,
    pub lambda: Option<f64>,
    pub h: f64,
    #[serde(rename = "N")]
    pub steps: usize,
    pub n_traj: usize,
    pub seed: u64,
    pub w2_dim1: Option<f64>,
    pub w2_sliced: Option<f64>,
    pub w2_gauss: Option<f64>,
    pub wall_ms: Option<f64>,
    pub oracle_calls: u64,
}

/// Fitted log-log slope of error against `h` for one scheme (and λ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeRow {
    pub experiment: String,
    #[serde(with = "scheme_name")]
    pub scheme: SchemeKind,
    pub lambda: Option<f64>,
    pub metric: String,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub points_used: usize,
    pub floor: f64,
}

/// Failed cells and other per-cell remarks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub experiment: String,
    #[serde(with = "scheme_name")]
    pub scheme: SchemeKind,
    pub lambda: Option<f64>,
    pub h: Option<f64>,
    pub kind: String,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutput {
    pub rows: Vec<ResultRow>,
    pub slopes: Vec<SlopeRow>,
    pub diagnostics: Vec<Diagnostic>,
}

impl RunOutput {
    pub fn find(&self, scheme: SchemeKind, lambda: Option<f64>, h: f64) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.scheme == scheme && r.lambda == lambda && r.h == h)
    }

    pub fn slope(&self, scheme: SchemeKind, lambda: Option<f64>) -> Option<&SlopeRow> {
        self.slopes
            .iter()
            .find(|s| s.scheme == scheme && s.lambda == lambda)
    }
}

fn scheme_rank(s: SchemeKind) -> usize {
    SchemeKind::ALL
        .iter()
        .position(|k| *k == s)
        .unwrap_or(usize::MAX)
}

/// Orders rows by (λ, scheme, h), with `h` ascending.
pub fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| {
        a.lambda
            .unwrap_or(f64::NEG_INFINITY)
            .total_cmp(&b.lambda.unwrap_or(f64::NEG_INFINITY))
            .then(scheme_rank(a.scheme).cmp(&scheme_rank(b.scheme)))
            .then(a.h.total_cmp(&b.h))
    });
}

pub fn to_csv<T: Serialize>(items: &[T], header_only: &[&str]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(!items.is_empty())
        .from_writer(Vec::new());
    if items.is_empty() {
        w.write_record(header_only)?;
    }
    for it in items {
        w.serialize(it)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| anyhow::anyhow!("flushing CSV: {e}"))?;
    Ok(String::from_utf8(bytes)?)
}

pub fn parse_csv<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| Ok(row?)).collect()
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_csv(&text).with_context(|| format!("parsing {}", path.display()))
}

const DIAGNOSTIC_HEADER: [&str; 6] = ["experiment", "scheme", "lambda", "h", "kind", "detail"];
const SLOPE_HEADER: [&str; 9] = [
    "experiment",
    "scheme",
    "lambda",
    "metric",
    "slope",
    "intercept",
    "r2",
    "points_used",
    "floor",
];

/// Writes results.csv, slopes.csv, diagnostics.csv and figure1.svg into
/// `dir`. Everything is rendered before the first file is touched.
pub fn emit_outputs(out: &RunOutput, dir: &Path) -> Result<()> {
    if out.rows.is_empty() {
        bail!("no result rows to write");
    }
    let files = [
        ("results.csv", to_csv(&out.rows, &[])?),
        ("slopes.csv", to_csv(&out.slopes, &SLOPE_HEADER)?),
        (
            "diagnostics.csv",
            to_csv(&out.diagnostics, &DIAGNOSTIC_HEADER)?,
        ),
        ("figure1.svg", render_svg(&out.rows)),
    ];
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

const COLORS: [&str; 5] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd"];
const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 300.0;
const MARGIN_L: f64 = 62.0;
const MARGIN_R: f64 = 14.0;
const MARGIN_T: f64 = 34.0;
const MARGIN_B: f64 = 46.0;

fn plotted_error(r: &ResultRow) -> Option<f64> {
    r.w2_dim1
        .or(r.w2_gauss)
        .filter(|v| *v > 0.0 && v.is_finite())
}

/// Log-log error-versus-step panels, one per λ (a single panel when rows carry no λ).
pub fn render_svg(rows: &[ResultRow]) -> String {
    let mut panels: Vec<Option<f64>> = Vec::new();
    for r in rows {
        if !panels.contains(&r.lambda) {
            panels.push(r.lambda);
        }
    }
    let mut schemes: Vec<SchemeKind> = Vec::new();
    for r in rows {
        if !schemes.contains(&r.scheme) {
            schemes.push(r.scheme);
        }
    }
    schemes.sort_by_key(|s| scheme_rank(*s));

    let legend_h = 22.0;
    let width = PANEL_W * panels.len().max(1) as f64;
    let height = PANEL_H + legend_h;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect width="{width}" height="{height}" fill="white"/>"#
    );

    for (pi, lambda) in panels.iter().enumerate() {
        let x0 = pi as f64 * PANEL_W;
        let cells: Vec<&ResultRow> = rows.iter().filter(|r| r.lambda == *lambda).collect();
        let hs: Vec<f64> = cells.iter().map(|r| r.h).collect();
        let ys: Vec<f64> = cells.iter().filter_map(|r| plotted_error(r)).collect();
        let title = match lambda {
            Some(l) => format!("λ = {l}"),
            None => "Gaussian target".to_string(),
        };
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{title}</text>"#,
            x0 + PANEL_W / 2.0
        );
        let (px0, px1) = (x0 + MARGIN_L, x0 + PANEL_W - MARGIN_R);
        let (py0, py1) = (MARGIN_T, PANEL_H - MARGIN_B);
        let _ = writeln!(
            svg,
            r##"<rect x="{px0}" y="{py0}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
            px1 - px0,
            py1 - py0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">step size h</text>"#,
            (px0 + px1) / 2.0,
            PANEL_H - 8.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle" transform="rotate(-90 {} {})">W2 error</text>"#,
            x0 + 14.0,
            (py0 + py1) / 2.0,
            x0 + 14.0,
            (py0 + py1) / 2.0
        );
        if hs.is_empty() || ys.is_empty() {
            continue;
        }
        let bounds = |v: &[f64]| {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min).log10();
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max).log10();
            let pad = ((hi - lo) * 0.08).max(0.05);
            (lo - pad, hi + pad)
        };
        let (hx_lo, hx_hi) = bounds(&hs);
        let (ey_lo, ey_hi) = bounds(&ys);
        let sx = |h: f64| px0 + (h.log10() - hx_lo) / (hx_hi - hx_lo) * (px1 - px0);
        let sy = |e: f64| py1 - (e.log10() - ey_lo) / (ey_hi - ey_lo) * (py1 - py0);

        let mut ticks = hs.clone();
        ticks.sort_by(f64::total_cmp);
        ticks.dedup();
        for h in ticks {
            let x = sx(h);
            let _ = writeln!(
                svg,
                r##"<line x1="{x:.2}" y1="{py1}" x2="{x:.2}" y2="{}" stroke="#444"/><text x="{x:.2}" y="{}" text-anchor="middle">{h}</text>"##,
                py1 + 4.0,
                py1 + 16.0
            );
        }
        let mut decade = ey_lo.ceil() as i32;
        let mut y_ticks = Vec::new();
        while (decade as f64) <= ey_hi {
            y_ticks.push(10f64.powi(decade));
            decade += 1;
        }
        if y_ticks.len() < 2 {
            y_ticks = vec![
                10f64.powf(ey_lo + 0.1 * (ey_hi - ey_lo)),
                10f64.powf(ey_hi - 0.1 * (ey_hi - ey_lo)),
            ];
        }
        for e in y_ticks {
            let y = sy(e);
            let _ = writeln!(
                svg,
                r##"<line x1="{}" y1="{y:.2}" x2="{px0}" y2="{y:.2}" stroke="#444"/><line x1="{px0}" y1="{y:.2}" x2="{px1}" y2="{y:.2}" stroke="#ddd"/><text x="{}" y="{:.2}" text-anchor="end">{e:.2e}</text>"##,
                px0 - 4.0,
                px0 - 6.0,
                y + 4.0
            );
        }

        for (si, scheme) in schemes.iter().enumerate() {
            let color = COLORS[si % COLORS.len()];
            let mut pts: Vec<(f64, f64)> = cells
                .iter()
                .filter(|r| r.scheme == *scheme)
                .filter_map(|r| plotted_error(r).map(|e| (r.h, e)))
                .collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            if pts.is_empty() {
                continue;
            }
            let path: Vec<String> = pts
                .iter()
                .map(|(h, e)| format!("{:.2},{:.2}", sx(*h), sy(*e)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.8"/>"#,
                path.join(" ")
            );
            for (h, e) in pts {
                let _ = writeln!(
                    svg,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="2.8" fill="{color}"/>"#,
                    sx(h),
                    sy(e)
                );
            }
        }
    }

    for (si, scheme) in schemes.iter().enumerate() {
        let color = COLORS[si % COLORS.len()];
        let x = 20.0 + si as f64 * 80.0;
        let y = PANEL_H + 8.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2.5"/><text x="{}" y="{}">{scheme}</text>"#,
            x + 22.0,
            x + 27.0,
            y + 4.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(scheme: SchemeKind, lambda: Option<f64>, h: f64, err: Option<f64>) -> ResultRow {
        ResultRow {
            experiment: "figure1".into(),
            scheme,
            lambda,
            h,
            steps: (10.0 / h).floor() as usize,
            n_traj: 2000,
            seed: 7,
            w2_dim1: err,
            w2_sliced: err.map(|e| e * 0.9),
            w2_gauss: None,
            wall_ms: None,
            oracle_calls: 12345,
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let rows = vec![
            row(SchemeKind::Em, Some(10.0), 0.4, Some(0.1 + 0.2)),
            row(
                SchemeKind::So,
                Some(50.0),
                0.025,
                Some(1.234_567_890_123_456_7e-5),
            ),
            row(SchemeKind::Rei, None, 0.05, None),
        ];
        let text = to_csv(&rows, &[]).unwrap();
        assert!(text.starts_with(
            "experiment,scheme,lambda,h,N,n_traj,seed,w2_dim1,w2_sliced,w2_gauss,wall_ms,oracle_calls\n"
        ));
        assert_eq!(text.lines().count(), 4);
        let back: Vec<ResultRow> = parse_csv(&text).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn sort_is_by_lambda_scheme_then_h() {
        let mut rows = vec![
            row(SchemeKind::So, Some(10.0), 0.1, None),
            row(SchemeKind::Em, Some(50.0), 0.1, None),
            row(SchemeKind::Em, Some(10.0), 0.4, None),
            row(SchemeKind::Em, Some(10.0), 0.1, None),
        ];
        sort_rows(&mut rows);
        let keys: Vec<(f64, SchemeKind, f64)> = rows
            .iter()
            .map(|r| (r.lambda.unwrap(), r.scheme, r.h))
            .collect();
        assert_eq!(
            keys,
            vec![
                (10.0, SchemeKind::Em, 0.1),
                (10.0, SchemeKind::Em, 0.4),
                (10.0, SchemeKind::So, 0.1),
                (50.0, SchemeKind::Em, 0.1),
            ]
        );
    }

    #[test]
    fn empty_rows_write_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("out");
        assert!(emit_outputs(&RunOutput::default(), &target).is_err());
        assert!(!target.exists());
    }

    #[test]
    fn emits_all_files() {
        let dir = tempfile::tempdir().unwrap();
        let out = RunOutput {
            rows: vec![
                row(SchemeKind::Em, Some(10.0), 0.4, Some(0.3)),
                row(SchemeKind::Em, Some(10.0), 0.2, Some(0.15)),
                row(SchemeKind::So, Some(10.0), 0.4, Some(0.1)),
            ],
            ..RunOutput::default()
        };
        emit_outputs(&out, dir.path()).unwrap();
        let results = fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert_eq!(results.lines().count(), 4);
        assert_eq!(
            read_results(&dir.path().join("results.csv")).unwrap(),
            out.rows
        );
        let slopes = fs::read_to_string(dir.path().join("slopes.csv")).unwrap();
        assert_eq!(slopes.trim(), SLOPE_HEADER.join(","));
        let svg = fs::read_to_string(dir.path().join("figure1.svg")).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(!svg.contains("href"));
    }

    #[test]
    fn svg_has_a_panel_per_lambda_and_a_line_per_scheme() {
        let mut rows = Vec::new();
        for l in [10.0, 50.0] {
            for s in [SchemeKind::Em, SchemeKind::So] {
                for h in [0.4, 0.2, 0.1] {
                    rows.push(row(s, Some(l), h, Some(h)));
                }
            }
        }
        rows.push(row(SchemeKind::Rem, Some(10.0), 0.4, None));
        let svg = render_svg(&rows);
        assert_eq!(svg.matches("λ = ").count(), 2);
        assert_eq!(svg.matches("<polyline").count(), 4);
        assert!(svg.contains(">REM</text>"));
    }
}
