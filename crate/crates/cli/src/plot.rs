//! Deterministic log-log SVG plots.

use std::fmt::Write as _;
use std::path::Path;

use btw_core::stats::{loglog_fit, SurvivalPoint};

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// ln y = intercept + slope · ln x, drawn over `x_range`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitLine {
    pub slope: f64,
    pub intercept: f64,
    pub x_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    pub fit: Option<FitLine>,
}

impl Plot {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Self { title: title.into(), x_label: x_label.into(), y_label: y_label.into(), ..Self::default() }
    }

    pub fn with_series(mut self, name: &str, points: impl IntoIterator<Item = (f64, f64)>) -> Self {
        self.series.push(Series { name: name.into(), points: points.into_iter().collect() });
        self
    }
}

const W: f64 = 720.0;
const H: f64 = 480.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Whole decades covering the positive values, at least one wide.
fn decades(values: impl Iterator<Item = f64>, empty: (i32, i32)) -> (i32, i32) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| *v > 0.0 && v.is_finite()) {
        lo = lo.min(v.log10());
        hi = hi.max(v.log10());
    }
    if !lo.is_finite() {
        return empty;
    }
    let (a, mut b) = (lo.floor() as i32, hi.ceil() as i32);
    if b <= a {
        b = a + 1;
    }
    (a, b)
}

fn positive(p: &(f64, f64)) -> bool {
    p.0 > 0.0 && p.1 > 0.0 && p.0.is_finite() && p.1.is_finite()
}

pub fn render_svg(plot: &Plot) -> String {
    let pts = || plot.series.iter().flat_map(|s| s.points.iter()).filter(|p| positive(p));
    let (x0, x1) = decades(pts().map(|p| p.0), (0, 1));
    let (y0, y1) = decades(pts().map(|p| p.1), (-1, 0));
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x.log10() - x0 as f64) / (x1 - x0) as f64 * pw;
    let sy = |y: f64| TOP + ph - (y.log10() - y0 as f64) / (y1 - y0) as f64 * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="14">{}</text>"#, LEFT + pw / 2.0, escape(&plot.title));
    let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    let step = |a: i32, b: i32| ((b - a) as usize).div_ceil(10).max(1);
    for k in (x0..=x1).step_by(step(x0, x1)) {
        let x = sx(10f64.powi(k));
        let _ = writeln!(s, r##"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.2}" stroke="#dddddd"/>"##, TOP + ph);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">1e{k}</text>"#, TOP + ph + 18.0);
    }
    for k in (y0..=y1).step_by(step(y0, y1)) {
        let y = sy(10f64.powi(k));
        let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/>"##, LEFT + pw);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">1e{k}</text>"#, LEFT - 6.0, y + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, H - 16.0, escape(&plot.x_label));
    let _ = writeln!(
        s,
        r#"<text x="20" y="{:.2}" text-anchor="middle" transform="rotate(-90 20 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(&plot.y_label)
    );

    for (i, series) in plot.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, r#"<g fill="{color}" stroke="none">"#);
        for &(x, y) in series.points.iter().filter(|p| positive(p)) {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5"/>"#, sx(x), sy(y));
        }
        let _ = writeln!(s, "</g>");
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 14.0;
        let _ = writeln!(s, r#"<circle cx="{lx:.2}" cy="{ly:.2}" r="4" fill="{color}"/>"#);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, lx + 10.0, ly + 4.0, escape(&series.name));
    }

    if let Some(fit) = &plot.fit {
        let (a, b) = fit.x_range;
        if a > 0.0 && b > a {
            let y = |x: f64| (fit.intercept + fit.slope * x.ln()).exp();
            let _ = writeln!(
                s,
                r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black" stroke-width="1.5" stroke-dasharray="6 4"/>"#,
                sx(a),
                sy(y(a)),
                sx(b),
                sy(y(b))
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">slope {:.4}</text>"#,
            LEFT + pw - 8.0,
            TOP + 18.0,
            fit.slope
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_svg(plot: &Plot, path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, render_svg(plot)).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Least-squares log-log line through a survival series, as fitted by
/// [`loglog_fit`] over the full x range.
pub fn survival_fit(points: &[SurvivalPoint]) -> Option<FitLine> {
    let xs = points.iter().map(|p| p.x).filter(|x| *x > 0.0);
    let lo = xs.clone().fold(f64::INFINITY, f64::min);
    let hi = xs.fold(f64::NEG_INFINITY, f64::max);
    let fit = loglog_fit(points, (lo, hi)).ok()?;
    Some(FitLine { slope: fit.slope, intercept: fit.intercept, x_range: (lo, hi) })
}

/// Reads a survival CSV (`#` comment lines; columns `x`, `survival`, and
/// optionally `series` and `exceedances`) into a plot with the fitted line of
/// its first series.
pub fn plot_from_survival_csv(text: &str, title: &str) -> Result<Plot, CliError> {
    let malformed = |m: String| CliError::MalformedCsv(m);
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| malformed(e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(ix), Some(is)) = (col("x"), col("survival")) else {
        return Err(malformed(format!("need columns `x` and `survival`, found {:?}", headers.iter().collect::<Vec<_>>())));
    };
    let iseries = col("series");
    let iexc = col("exceedances");
    let mut names: Vec<String> = Vec::new();
    let mut data: Vec<Vec<SurvivalPoint>> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| malformed(e.to_string()))?;
        let field = |i: usize, what: &str| -> Result<f64, CliError> {
            rec.get(i)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| malformed(format!("record {}: column `{what}` is not a number", line + 1)))
        };
        let x = field(ix, "x")?;
        let surv = field(is, "survival")?;
        let exceedances = match iexc {
            Some(i) => field(i, "exceedances")? as usize,
            None => usize::MAX,
        };
        let name = iseries.and_then(|i| rec.get(i)).unwrap_or("survival").to_string();
        let k = match names.iter().position(|n| *n == name) {
            Some(k) => k,
            None => {
                names.push(name);
                data.push(Vec::new());
                names.len() - 1
            }
        };
        data[k].push(SurvivalPoint { x, s: surv, exceedances });
    }
    let mut plot = Plot::new(title, "x", "P(X >= x)");
    plot.fit = data.first().and_then(|d| survival_fit(d));
    for (name, pts) in names.iter().zip(&data) {
        plot = plot.with_series(name, pts.iter().map(|p| (p.x, p.s)));
    }
    Ok(plot)
}

/// Renders a survival CSV file as an SVG log-log plot.
pub fn emit_plot(csv_path: &Path, svg_path: &Path) -> Result<Plot, CliError> {
    let text = std::fs::read_to_string(csv_path).map_err(|e| CliError::Io(format!("{}: {e}", csv_path.display())))?;
    let title = csv_path.file_stem().and_then(|s| s.to_str()).unwrap_or("survival");
    let plot = plot_from_survival_csv(&text, title)?;
    write_svg(&plot, svg_path)?;
    Ok(plot)
}
