//! Minimal SVG rendering for training curves, embeddings and affinities.

use std::fmt::Write;

use acl_core::affinity::AffinityModel;
use acl_core::trainer::EpochMetrics;
use acl_core::AclError;
use nalgebra::{DMatrix, SymmetricEigen};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;

const PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
    "#393b79", "#ad494a",
];

fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#,
        WIDTH / 2.0
    );
}

/// Data range padded so flat series still get a visible span.
fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

struct Axes {
    x: (f64, f64),
    y: (f64, f64),
}

impl Axes {
    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - 2.0 * MARGIN)
    }

    fn draw(&self, out: &mut String, x_label: &str, y_label: &str) {
        let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
        let _ = writeln!(
            out,
            r#"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            r - l,
            b - t
        );
        for k in 0..=4 {
            let fx = self.x.0 + (self.x.1 - self.x.0) * k as f64 / 4.0;
            let fy = self.y.0 + (self.y.1 - self.y.0) * k as f64 / 4.0;
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{fx:.3}</text>"#,
                self.px(fx),
                b + 15.0
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{fy:.3}</text>"#,
                l - 4.0,
                self.py(fy) + 4.0
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{x_label}</text>"#,
            WIDTH / 2.0,
            HEIGHT - 12.0
        );
        let _ = writeln!(
            out,
            r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{y_label}</text>"#,
            HEIGHT / 2.0,
            HEIGHT / 2.0
        );
    }
}

fn line_chart(title: &str, y_label: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    let axes = Axes {
        x: span(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0))),
        y: span(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1))),
    };
    let mut out = String::new();
    header(&mut out, title);
    axes.draw(&mut out, "epoch", y_label);
    for (i, (name, points)) in series.iter().enumerate() {
        let path: Vec<String> = points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", axes.px(x), axes.py(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            color(i),
            path.join(" ")
        );
        let ly = MARGIN + 14.0 * i as f64 + 12.0;
        let lx = WIDTH - MARGIN - 110.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{}" stroke-width="2"/><text x="{}" y="{}">{name}</text>"#,
            lx + 18.0,
            color(i),
            lx + 22.0,
            ly + 4.0
        );
    }
    out.push_str("</svg>\n");
    out
}

pub fn loss_curves(history: &[EpochMetrics]) -> String {
    let pick =
        |f: fn(&EpochMetrics) -> f64| -> Vec<(f64, f64)> { history.iter().map(|m| (m.epoch as f64, f(m))).collect() };
    line_chart(
        "Loss components",
        "loss",
        &[
            ("total", pick(|m| m.total)),
            ("cross-entropy", pick(|m| m.ce)),
            ("inter", pick(|m| m.inter)),
            ("intra", pick(|m| m.intra)),
        ],
    )
}

pub fn accuracy_curves(history: &[EpochMetrics]) -> String {
    let train = history.iter().map(|m| (m.epoch as f64, m.train_accuracy)).collect();
    let eval = history
        .iter()
        .filter_map(|m| m.eval_accuracy.map(|a| (m.epoch as f64, a)))
        .collect();
    let mut series = vec![("train", train), ("eval", eval)];
    let recovery: Vec<(f64, f64)> = history
        .iter()
        .filter_map(|m| m.family_recovery.map(|f| (m.epoch as f64, f)))
        .collect();
    if !recovery.is_empty() {
        series.push(("family F1", recovery));
    }
    line_chart("Accuracy", "fraction", &series)
}

/// Rows projected onto the two leading principal axes.
pub fn pca_2d(rows: &[Vec<f64>]) -> Result<Vec<(f64, f64)>, AclError> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.len() < 2 || d < 2 || rows.iter().any(|r| r.len() != d) {
        return Err(AclError::Invalid(
            "PCA needs at least two rows of equal length ≥ 2".into(),
        ));
    }
    let n = rows.len();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axis = |k: usize| {
        let mut v = eig.eigenvectors.column(order[k]).into_owned();
        // Fix the sign so the largest component is positive.
        let big = v
            .iter()
            .copied()
            .fold(0.0f64, |acc, e| if e.abs() > acc.abs() { e } else { acc });
        if big < 0.0 {
            v.neg_mut();
        }
        v
    };
    let (a, b) = (axis(0), axis(1));
    let pa = &centered * a;
    let pb = &centered * b;
    Ok((0..n).map(|i| (pa[i], pb[i])).collect())
}

pub fn pca_scatter(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<String, AclError> {
    if embeddings.len() != labels.len() {
        return Err(AclError::Shape("embeddings and labels differ in length".into()));
    }
    let pts = pca_2d(embeddings)?;
    let axes = Axes {
        x: span(pts.iter().map(|p| p.0)),
        y: span(pts.iter().map(|p| p.1)),
    };
    let mut out = String::new();
    header(&mut out, "Eval embeddings (PCA)");
    axes.draw(&mut out, "PC 1", "PC 2");
    for (&(x, y), &label) in pts.iter().zip(labels) {
        let _ = writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}" fill-opacity="0.8"><title>class {label}</title></circle>"#,
            axes.px(x),
            axes.py(y),
            color(label)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Heatmap of `w`; cells of family members are outlined.
pub fn affinity_heatmap(model: &AffinityModel) -> String {
    let c = model.class_count();
    let w = model.affinity().to_dense();
    let max = w.iter().copied().fold(0.0f64, f64::max).max(1e-12);
    let cell = ((HEIGHT - 2.0 * MARGIN) / c as f64).min(40.0);
    let x0 = (WIDTH - cell * c as f64) / 2.0;
    let y0 = MARGIN;
    let mut out = String::new();
    header(&mut out, "Affinity similarity w (outlined: family members)");
    for i in 0..c {
        for j in 0..c {
            let v = w[i * c + j] / max;
            let shade = (255.0 * (1.0 - v)).round() as u8;
            let member = model.families().of(i).contains(&j);
            let _ = writeln!(
                out,
                r#"<rect x="{:.1}" y="{:.1}" width="{cell:.1}" height="{cell:.1}" fill="rgb(255,{shade},{shade})" stroke="{}" stroke-width="{}"><title>w[{i}][{j}] = {:.4}</title></rect>"#,
                x0 + j as f64 * cell,
                y0 + i as f64 * cell,
                if member { "black" } else { "#dddddd" },
                if member { 2 } else { 1 },
                w[i * c + j]
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{i}</text>"#,
            x0 - 4.0,
            y0 + (i as f64 + 0.65) * cell
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{i}</text>"#,
            x0 + (i as f64 + 0.5) * cell,
            y0 + c as f64 * cell + 14.0
        );
    }
    out.push_str("</svg>\n");
    out
}
