use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::cev::ModelTag;
use crate::error::Result;
use crate::market_model::Group;
use crate::quarter::Quarter;

use super::study::{usable_distance, ExclusionReason, StudyBundle};

pub const BUNDLE_FILE: &str = "bundle.json";
pub const TABLE_HEADER: [&str; 8] = [
    "Quarter", "Group", "Mean", "Std.", "Alpha", "Beta", "Scale", "N",
];
pub const TEST_HEADER: [&str; 7] = ["Quarter", "Z1", "p1", "Z2", "p2", "M", "N"];

pub fn model_slug(model: ModelTag) -> &'static str {
    match model {
        ModelTag::ClassicalKMV => "classical",
        ModelTag::CevKmvFE => "cev_fe",
        ModelTag::CevKmvEV => "cev_ev",
    }
}

fn num(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        v.to_string()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn save_bundle(bundle: &StudyBundle, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(BUNDLE_FILE);
    let mut text = serde_json::to_string_pretty(bundle)?;
    text.push('\n');
    fs::write(&path, text)?;
    Ok(path)
}

pub fn load_bundle(path: &Path) -> Result<StudyBundle> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Saves the bundle and emits every report file into `dir`.
pub fn write_study(bundle: &StudyBundle, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = vec![save_bundle(bundle, dir)?];
    files.extend(emit_reports(bundle, dir)?);
    Ok(files)
}

/// Writes tables, the manifest and plots. Depends only on `bundle`.
pub fn emit_reports(bundle: &StudyBundle, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    let mut put = |name: String, content: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, content)?;
        out.push(path);
        Ok(())
    };
    put("manifest.json".into(), manifest(bundle)?)?;
    put("observations.csv".into(), observations_csv(bundle)?)?;
    put("records.csv".into(), records_csv(bundle)?)?;
    for &model in &bundle.models {
        let slug = model_slug(model);
        put(format!("table_{slug}.csv"), summary_table(bundle, model)?)?;
        put(format!("tests_{slug}.csv"), test_table(bundle, model)?)?;
        let fig1 = fig1_data(bundle, model);
        put(format!("fig1_{slug}.csv"), fig1.csv()?)?;
        put(format!("fig1_{slug}.svg"), fig1.svg(model))?;
    }
    let fig2 = fig2_data(bundle);
    put("fig2.csv".into(), fig2_csv(&fig2)?)?;
    put("fig2.svg".into(), fig2_svg(&fig2))?;
    let fig3 = fig3_data(bundle);
    put("fig3.csv".into(), fig3_csv(&fig3)?)?;
    put("fig3.svg".into(), fig3_svg(bundle, &fig3))?;
    Ok(out)
}

fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[derive(Serialize)]
struct ExclusionCount {
    model: Option<ModelTag>,
    group: Group,
    reason: ExclusionReason,
    count: usize,
}

#[derive(Serialize)]
struct FitSummary<'a> {
    model: ModelTag,
    group: Group,
    for_quarter: Option<Quarter>,
    first: Quarter,
    last: Quarter,
    beta: f64,
    n_obs: usize,
    sse: f64,
    deltas: &'a BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_text: String,
    config: &'a super::config::RunConfig,
    quarters: &'a [Quarter],
    models: &'a [ModelTag],
    input_firm_quarters: &'a BTreeMap<Group, usize>,
    records_per_model: BTreeMap<&'static str, usize>,
    filled_values: usize,
    exclusion_counts: Vec<ExclusionCount>,
    exclusions: &'a [super::study::Exclusion],
    fits: Vec<FitSummary<'a>>,
}

fn manifest(bundle: &StudyBundle) -> Result<String> {
    let mut counts: BTreeMap<(Option<ModelTag>, Group, ExclusionReason), usize> = BTreeMap::new();
    for e in &bundle.exclusions {
        *counts.entry((e.model, e.group, e.reason)).or_insert(0) += 1;
    }
    let manifest = Manifest {
        config_text: bundle.config.to_text(),
        config: &bundle.config,
        quarters: &bundle.quarters,
        models: &bundle.models,
        input_firm_quarters: &bundle.input_counts,
        records_per_model: bundle
            .models
            .iter()
            .map(|&m| (m.label(), bundle.records_for(m).count()))
            .collect(),
        filled_values: bundle.fills.len(),
        exclusion_counts: counts
            .into_iter()
            .map(|((model, group, reason), count)| ExclusionCount {
                model,
                group,
                reason,
                count,
            })
            .collect(),
        exclusions: &bundle.exclusions,
        fits: bundle
            .fits
            .iter()
            .map(|f| FitSummary {
                model: f.fit.method.model_tag(),
                group: f.fit.group,
                for_quarter: f.for_quarter,
                first: f.first,
                last: f.last,
                beta: f.fit.beta,
                n_obs: f.fit.n_obs,
                sse: f.fit.sse,
                deltas: &f.fit.deltas,
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    Ok(text)
}

fn observations_csv(bundle: &StudyBundle) -> Result<String> {
    let header = [
        "firm_id",
        "quarter",
        "group",
        "as_of",
        "equity_value",
        "equity_vol",
        "default_point",
        "rate",
        "asset_value",
        "asset_vol",
    ];
    csv_text(
        &header,
        bundle.observations.iter().map(|r| {
            let o = &r.observation;
            vec![
                o.firm_id.clone(),
                o.quarter.to_string(),
                o.group.to_string(),
                r.as_of.to_string(),
                num(o.equity_value),
                num(o.equity_vol),
                num(o.default_point),
                num(o.rate),
                num(r.solution.asset_value),
                num(r.solution.asset_vol),
            ]
        }),
    )
}

fn records_csv(bundle: &StudyBundle) -> Result<String> {
    csv_text(
        &[
            "model",
            "firm_id",
            "quarter",
            "group",
            "probability",
            "distance",
        ],
        bundle.records.iter().map(|r| {
            vec![
                r.model.label().to_string(),
                r.firm_id.clone(),
                r.quarter.to_string(),
                r.group.to_string(),
                num(r.probability),
                num(r.distance),
            ]
        }),
    )
}

/// Per quarter and group: mean, standard deviation and gamma fit of the
/// distances. `Beta` is the gamma rate, `Scale` its reciprocal.
fn summary_table(bundle: &StudyBundle, model: ModelTag) -> Result<String> {
    csv_text(
        &TABLE_HEADER,
        bundle
            .summaries
            .iter()
            .filter(|s| s.model == model)
            .map(|s| {
                vec![
                    s.quarter.to_string(),
                    s.group.to_string(),
                    opt(s.mean),
                    opt(s.std),
                    opt(s.gamma.map(|g| g.alpha)),
                    opt(s.gamma.map(|g| g.beta)),
                    opt(s.gamma.map(|g| g.scale())),
                    s.n.to_string(),
                ]
            }),
    )
}

fn test_table(bundle: &StudyBundle, model: ModelTag) -> Result<String> {
    csv_text(
        &TEST_HEADER,
        bundle.reports.iter().filter(|r| r.model == model).map(|r| {
            let t = &r.report;
            vec![
                t.quarter.to_string(),
                num(t.z1),
                num(t.p1),
                num(t.z2),
                num(t.p2),
                t.m.to_string(),
                t.n.to_string(),
            ]
        }),
    )
}

// ---- figure data ----

/// Histogram and fitted gamma density of one model's distances in the last
/// quarter, per group.
#[derive(Debug, Clone, PartialEq)]
pub struct Fig1 {
    pub quarter: Option<Quarter>,
    /// (group, lower edge, upper edge, density)
    pub bins: Vec<(Group, f64, f64, f64)>,
    /// (group, x, fitted density)
    pub curve: Vec<(Group, f64, f64)>,
}

const FIG1_BINS: usize = 20;
const CURVE_POINTS: usize = 100;

pub fn fig1_data(bundle: &StudyBundle, model: ModelTag) -> Fig1 {
    let quarter = bundle.quarters.last().copied();
    let mut fig = Fig1 {
        quarter,
        bins: Vec::new(),
        curve: Vec::new(),
    };
    let Some(quarter) = quarter else { return fig };
    for &group in &Group::ALL {
        let sample: Vec<f64> = bundle
            .records_for(model)
            .filter(|r| r.quarter == quarter && r.group == group && usable_distance(r.distance))
            .map(|r| r.distance)
            .collect();
        if sample.is_empty() {
            continue;
        }
        let hi = sample.iter().copied().fold(f64::MIN, f64::max);
        let width = hi / FIG1_BINS as f64;
        let mut counts = [0usize; FIG1_BINS];
        for x in &sample {
            counts[((x / width) as usize).min(FIG1_BINS - 1)] += 1;
        }
        let n = sample.len() as f64;
        for (i, c) in counts.iter().enumerate() {
            fig.bins.push((
                group,
                i as f64 * width,
                (i + 1) as f64 * width,
                *c as f64 / (n * width),
            ));
        }
        if let Some(g) = bundle.summary(model, quarter, group).and_then(|s| s.gamma) {
            for i in 1..=CURVE_POINTS {
                let x = hi * i as f64 / CURVE_POINTS as f64;
                fig.curve.push((group, x, g.density(x)));
            }
        }
    }
    fig
}

impl Fig1 {
    pub fn csv(&self) -> Result<String> {
        let bins = self.bins.iter().map(|(g, lo, hi, d)| {
            vec![
                "histogram".into(),
                g.to_string(),
                num(*lo),
                num(*hi),
                num(*d),
            ]
        });
        let curve = self
            .curve
            .iter()
            .map(|(g, x, d)| vec!["gamma".into(), g.to_string(), num(*x), num(*x), num(*d)]);
        csv_text(
            &["series", "group", "x_lower", "x_upper", "density"],
            bins.chain(curve),
        )
    }

    fn svg(&self, model: ModelTag) -> String {
        let quarter = self.quarter.map(|q| q.to_string()).unwrap_or_default();
        let mut doc = Svg::new(2);
        for (panel, &group) in Group::ALL.iter().enumerate() {
            let bins: Vec<_> = self.bins.iter().filter(|b| b.0 == group).collect();
            let curve: Vec<(f64, f64)> = self
                .curve
                .iter()
                .filter(|c| c.0 == group)
                .map(|c| (c.1, c.2))
                .collect();
            let x_max = bins.last().map(|b| b.2).unwrap_or(1.0);
            let y_max = bins
                .iter()
                .map(|b| b.3)
                .chain(curve.iter().map(|c| c.1))
                .fold(0.0, f64::max)
                .max(1e-12)
                * 1.05;
            let frame = doc.panel(
                panel,
                &format!("{} {group} {quarter}", model.label()),
                "distance to default",
                "density",
                (0.0, x_max),
                (0.0, y_max),
            );
            for b in bins {
                doc.rect(&frame, b.1, b.2, b.3);
            }
            doc.polyline(&frame, &curve, "#c0392b");
        }
        doc.finish()
    }
}

/// (group, firm, quarter, ln V_A, ln σ_A) for every inverted firm-quarter.
pub fn fig2_data(bundle: &StudyBundle) -> Vec<(Group, String, Quarter, f64, f64)> {
    bundle
        .observations
        .iter()
        .filter(|r| !r.solution.degenerate)
        .map(|r| {
            (
                r.observation.group,
                r.observation.firm_id.clone(),
                r.observation.quarter,
                r.solution.asset_value.ln(),
                r.solution.asset_vol.ln(),
            )
        })
        .collect()
}

fn fig2_csv(points: &[(Group, String, Quarter, f64, f64)]) -> Result<String> {
    csv_text(
        &[
            "group",
            "firm_id",
            "quarter",
            "ln_asset_value",
            "ln_asset_vol",
        ],
        points
            .iter()
            .map(|(g, f, q, x, y)| vec![g.to_string(), f.clone(), q.to_string(), num(*x), num(*y)]),
    )
}

fn fig2_svg(points: &[(Group, String, Quarter, f64, f64)]) -> String {
    let mut doc = Svg::new(2);
    for (panel, &group) in Group::ALL.iter().enumerate() {
        let pts: Vec<(f64, f64)> = points
            .iter()
            .filter(|p| p.0 == group)
            .map(|p| (p.3, p.4))
            .collect();
        let frame = doc.panel(
            panel,
            &format!("{group}: ln asset volatility against ln asset value"),
            "ln V_A",
            "ln sigma_A",
            padded(pts.iter().map(|p| p.0)),
            padded(pts.iter().map(|p| p.1)),
        );
        for (x, y) in pts {
            doc.circle(&frame, x, y);
        }
    }
    doc.finish()
}

/// (quarter, model, mean NonST distance − mean ST distance).
pub fn fig3_data(bundle: &StudyBundle) -> Vec<(Quarter, ModelTag, f64)> {
    let mut out = Vec::new();
    for &model in &bundle.models {
        for &q in &bundle.quarters {
            let mean = |g| bundle.summary(model, q, g).and_then(|s| s.mean);
            if let (Some(st), Some(nst)) = (mean(Group::St), mean(Group::NonSt)) {
                out.push((q, model, nst - st));
            }
        }
    }
    out
}

fn fig3_csv(points: &[(Quarter, ModelTag, f64)]) -> Result<String> {
    csv_text(
        &["quarter", "model", "difference"],
        points
            .iter()
            .map(|(q, m, d)| vec![q.to_string(), m.label().to_string(), num(*d)]),
    )
}

fn fig3_svg(bundle: &StudyBundle, points: &[(Quarter, ModelTag, f64)]) -> String {
    let mut doc = Svg::new(1);
    let n = bundle.quarters.len().max(2);
    let frame = doc.panel(
        0,
        "mean distance to default, NonST minus ST",
        "quarter",
        "difference",
        (0.0, (n - 1) as f64),
        padded(points.iter().map(|p| p.2).chain([0.0])),
    );
    let colors = ["#2c3e50", "#2980b9", "#c0392b"];
    for (i, &model) in bundle.models.iter().enumerate() {
        let line: Vec<(f64, f64)> = points
            .iter()
            .filter(|p| p.1 == model)
            .map(|p| {
                (
                    bundle.quarters.iter().position(|q| *q == p.0).unwrap_or(0) as f64,
                    p.2,
                )
            })
            .collect();
        doc.polyline(&frame, &line, colors[i % colors.len()]);
        doc.legend(&frame, i, model.label(), colors[i % colors.len()]);
    }
    for (i, q) in bundle.quarters.iter().enumerate() {
        doc.x_tick(&frame, i as f64, &q.to_string());
    }
    doc.finish()
}

fn padded(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

// ---- minimal SVG writer ----

const PANEL_W: f64 = 480.0;
const PANEL_H: f64 = 360.0;
const MARGIN: f64 = 50.0;

struct Frame {
    left: f64,
    top: f64,
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        self.left + (x - self.x.0) / (self.x.1 - self.x.0) * (PANEL_W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        self.top + PANEL_H
            - MARGIN
            - (y - self.y.0) / (self.y.1 - self.y.0) * (PANEL_H - 2.0 * MARGIN)
    }
}

struct Svg {
    body: String,
    panels: usize,
}

impl Svg {
    fn new(panels: usize) -> Self {
        Self {
            body: String::new(),
            panels,
        }
    }

    fn panel(
        &mut self,
        index: usize,
        title: &str,
        x_label: &str,
        y_label: &str,
        x: (f64, f64),
        y: (f64, f64),
    ) -> Frame {
        let frame = Frame {
            left: index as f64 * PANEL_W + MARGIN,
            top: 0.0,
            x,
            y,
        };
        let (x0, x1) = (frame.px(x.0), frame.px(x.1));
        let (y0, y1) = (frame.py(y.0), frame.py(y.1));
        let _ = writeln!(
            self.body,
            r##"<rect x="{x0:.2}" y="{y1:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#000"/>"##,
            x1 - x0,
            y0 - y1
        );
        let _ = writeln!(
            self.body,
            r#"<text x="{:.2}" y="20" text-anchor="middle">{}</text>"#,
            (x0 + x1) / 2.0,
            escape(title)
        );
        let _ = writeln!(
            self.body,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            (x0 + x1) / 2.0,
            y0 + 35.0,
            escape(x_label)
        );
        let _ = writeln!(
            self.body,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" transform="rotate(-90 {:.2} {:.2})">{}</text>"#,
            x0 - 35.0,
            (y0 + y1) / 2.0,
            x0 - 35.0,
            (y0 + y1) / 2.0,
            escape(y_label)
        );
        for (v, py) in [(y.0, y0), (y.1, y1)] {
            let _ = writeln!(
                self.body,
                r#"<text x="{:.2}" y="{py:.2}" text-anchor="end" font-size="10">{v:.3}</text>"#,
                x0 - 4.0
            );
        }
        for (v, px) in [(x.0, x0), (x.1, x1)] {
            let _ = writeln!(
                self.body,
                r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle" font-size="10">{v:.3}</text>"#,
                y0 + 14.0
            );
        }
        frame
    }

    fn rect(&mut self, f: &Frame, x0: f64, x1: f64, height: f64) {
        let (a, b, top, base) = (f.px(x0), f.px(x1), f.py(height), f.py(f.y.0));
        let _ = writeln!(
            self.body,
            r##"<rect x="{a:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="#95a5a6" stroke="#7f8c8d"/>"##,
            b - a,
            base - top
        );
    }

    fn polyline(&mut self, f: &Frame, points: &[(f64, f64)], color: &str) {
        if points.is_empty() {
            return;
        }
        let coords: Vec<String> = points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
            .collect();
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            coords.join(" ")
        );
    }

    fn circle(&mut self, f: &Frame, x: f64, y: f64) {
        let _ = writeln!(
            self.body,
            r##"<circle cx="{:.2}" cy="{:.2}" r="1.5" fill="#2980b9" fill-opacity="0.5"/>"##,
            f.px(x),
            f.py(y)
        );
    }

    fn legend(&mut self, f: &Frame, row: usize, label: &str, color: &str) {
        let (x, y) = (f.left + 10.0, MARGIN + 15.0 + 15.0 * row as f64);
        let _ = writeln!(
            self.body,
            r#"<line x1="{x:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}" font-size="11">{}</text>"#,
            x + 20.0,
            x + 25.0,
            y + 4.0,
            escape(label)
        );
    }

    fn x_tick(&mut self, f: &Frame, x: f64, label: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="9">{}</text>"#,
            f.px(x),
            f.py(f.y.0) + 24.0,
            escape(label)
        );
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"#fff\"/>\n{}</svg>\n",
            self.body,
            w = PANEL_W * self.panels as f64 + MARGIN,
            h = PANEL_H,
        )
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip_through_text() {
        for v in [0.1 + 0.2, 4.498, 1e-300, -2.5e12] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(num(f64::INFINITY), "inf");
        assert_eq!(opt(None), "");
    }

    #[test]
    fn table_header_carries_the_reported_columns() {
        assert_eq!(
            &TABLE_HEADER[..6],
            &["Quarter", "Group", "Mean", "Std.", "Alpha", "Beta"]
        );
    }

    #[test]
    fn padding() {
        assert_eq!(padded([].into_iter()), (0.0, 1.0));
        let (lo, hi) = padded([1.0, 3.0, f64::INFINITY].into_iter());
        assert!((lo - 0.9).abs() < 1e-12 && (hi - 3.1).abs() < 1e-12);
    }

    #[test]
    fn svg_is_escaped_and_closed() {
        let mut doc = Svg::new(1);
        let f = doc.panel(0, "a<b & c", "x", "y", (0.0, 1.0), (0.0, 1.0));
        doc.polyline(&f, &[(0.0, 0.0), (1.0, 1.0)], "#000");
        let s = doc.finish();
        assert!(s.contains("a&lt;b &amp; c"));
        assert!(s.trim_end().ends_with("</svg>"));
    }
}
