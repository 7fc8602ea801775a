//! Metrics, correlation, OLS inference, judge-score calibration and report
//! tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch { expected: a, got: b });
    }
    if a == 0 {
        return Err(Error::Precondition("empty input".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub mse: f64,
    pub mae: f64,
}

pub fn regression_metrics(preds: &[f64], labels: &[f64]) -> Result<RegressionMetrics> {
    check_lengths(preds.len(), labels.len())?;
    let n = preds.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, l) in preds.iter().zip(labels) {
        se += (p - l) * (p - l);
        ae += (p - l).abs();
    }
    Ok(RegressionMetrics { mse: se / n, mae: ae / n })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when a ratio had a zero denominator and was reported as 0.
    pub zero_division: bool,
}

pub fn classification_metrics(probs: &[f64], labels: &[bool], threshold: f64) -> Result<ClassificationMetrics> {
    check_lengths(probs.len(), labels.len())?;
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::Range(format!("threshold {threshold} outside [0,1)")));
    }
    let preds: Vec<bool> = probs.iter().map(|&p| p >= threshold).collect();
    Ok(confusion_metrics(&preds, labels))
}

/// Metrics from hard predictions.
pub fn confusion_metrics(preds: &[bool], labels: &[bool]) -> ClassificationMetrics {
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &l) in preds.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let mut zero_division = false;
    let mut ratio = |num: usize, den: usize| {
        if den == 0 {
            zero_division = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        zero_division = true;
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassificationMetrics {
        accuracy: (tp + tn) as f64 / preds.len().max(1) as f64,
        precision,
        recall,
        f1,
        zero_division,
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn population_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(x.len(), y.len())?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance("series".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrMatrix {
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

/// Pearson correlation between every pair of named series.
pub fn pearson_corr_matrix(series: &[(String, Vec<f64>)]) -> Result<CorrMatrix> {
    let n = series.first().map(|s| s.1.len()).unwrap_or(0);
    if series.is_empty() {
        return Err(Error::Precondition("no series".into()));
    }
    if n < 3 {
        return Err(Error::Precondition(format!("series need at least 3 points, got {n}")));
    }
    for (name, s) in series {
        if s.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: s.len() });
        }
        if population_std(s) == 0.0 {
            return Err(Error::ZeroVariance(name.clone()));
        }
    }
    let k = series.len();
    let mut values = vec![vec![0.0; k]; k];
    for i in 0..k {
        values[i][i] = 1.0;
        for j in i + 1..k {
            let r = pearson(&series[i].1, &series[j].1)?;
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    Ok(CorrMatrix {
        names: series.iter().map(|s| s.0.clone()).collect(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsReport {
    pub names: Vec<String>,
    pub coefficients: BTreeMap<String, f64>,
    pub std_errors: BTreeMap<String, f64>,
    pub t_values: BTreeMap<String, f64>,
    pub p_values: BTreeMap<String, f64>,
    pub stars: BTreeMap<String, String>,
    pub r_squared: f64,
    pub n: usize,
}

impl OlsReport {
    pub fn coefficient_vec(&self) -> Vec<f64> {
        self.names.iter().map(|n| self.coefficients[n]).collect()
    }
}

pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

/// Householder QR of an `n x p` matrix (`n >= p`). Returns the packed
/// reflectors and `R` (`p x p`, upper triangular); `qty` is `Qᵀy`.
fn householder_qr(x: &Tensor, y: &[f64]) -> (Tensor, Vec<f64>) {
    let (n, p) = x.shape();
    let mut a = x.clone();
    let mut qty = y.to_vec();
    for k in 0..p {
        let norm = (k..n).map(|i| a.get(i, k).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if a.get(k, k) > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..n).map(|i| a.get(i, k)).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for j in k..p {
            let dot: f64 = (k..n).map(|i| v[i - k] * a.get(i, j)).sum();
            let f = 2.0 * dot / vnorm2;
            for i in k..n {
                let val = a.get(i, j) - f * v[i - k];
                a.set(i, j, val);
            }
        }
        let dot: f64 = (k..n).map(|i| v[i - k] * qty[i]).sum();
        let f = 2.0 * dot / vnorm2;
        for i in k..n {
            qty[i] -= f * v[i - k];
        }
    }
    let mut r = Tensor::zeros(p, p);
    for i in 0..p {
        for j in i..p {
            r.set(i, j, a.get(i, j));
        }
    }
    (r, qty)
}

/// Inverse of an upper-triangular matrix.
fn invert_upper(r: &Tensor) -> Tensor {
    let p = r.rows();
    let mut inv = Tensor::zeros(p, p);
    for col in 0..p {
        for i in (0..=col).rev() {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in i + 1..=col {
                s -= r.get(i, k) * inv.get(k, col);
            }
            inv.set(i, col, s / r.get(i, i));
        }
    }
    inv
}

/// Least squares `y ~ X` with classical standard errors. `x` must already
/// contain the intercept column if one is wanted.
pub fn ols_fit(names: &[String], x: &Tensor, y: &[f64]) -> Result<OlsReport> {
    let (n, p) = x.shape();
    if names.len() != p {
        return Err(Error::DimensionMismatch { expected: p, got: names.len() });
    }
    check_lengths(n, y.len())?;
    if n <= p {
        return Err(Error::Precondition(format!("{n} rows cannot identify {p} coefficients")));
    }
    let (r, qty) = householder_qr(x, y);
    let max_diag = (0..p).map(|i| r.get(i, i).abs()).fold(0.0, f64::max);
    if max_diag == 0.0 || (0..p).any(|i| r.get(i, i).abs() <= 1e-10 * max_diag) {
        return Err(Error::RankDeficient);
    }
    let mut beta = vec![0.0; p];
    for i in (0..p).rev() {
        let mut s = qty[i];
        for k in i + 1..p {
            s -= r.get(i, k) * beta[k];
        }
        beta[i] = s / r.get(i, i);
    }
    let rss: f64 = (0..n)
        .map(|i| {
            let fit: f64 = (0..p).map(|j| x.get(i, j) * beta[j]).sum();
            (y[i] - fit).powi(2)
        })
        .sum();
    let my = mean(y);
    let tss: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let r_squared = if tss == 0.0 { 1.0 } else { (1.0 - rss / tss).clamp(0.0, 1.0) };
    let df = (n - p) as f64;
    let sigma2 = rss / df;
    // (XᵀX)⁻¹ = R⁻¹ R⁻ᵀ
    let rinv = invert_upper(&r);
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Precondition(e.to_string()))?;
    let mut report = OlsReport {
        names: names.to_vec(),
        coefficients: BTreeMap::new(),
        std_errors: BTreeMap::new(),
        t_values: BTreeMap::new(),
        p_values: BTreeMap::new(),
        stars: BTreeMap::new(),
        r_squared,
        n,
    };
    for (j, name) in names.iter().enumerate() {
        let var: f64 = (0..p).map(|k| rinv.get(j, k).powi(2)).sum::<f64>() * sigma2;
        let se = var.sqrt();
        let t = if se == 0.0 { f64::INFINITY * beta[j].signum() } else { beta[j] / se };
        let pval = if t.is_finite() { (2.0 * dist.sf(t.abs())).min(1.0) } else { 0.0 };
        report.coefficients.insert(name.clone(), beta[j]);
        report.std_errors.insert(name.clone(), se);
        report.t_values.insert(name.clone(), t);
        report.p_values.insert(name.clone(), pval);
        report.stars.insert(name.clone(), significance_stars(pval).to_string());
    }
    Ok(report)
}

/// Prepends an intercept column named `const` to the given regressors.
pub fn ols_with_intercept(columns: &[(String, Vec<f64>)], y: &[f64]) -> Result<OlsReport> {
    let n = y.len();
    let mut names = vec!["const".to_string()];
    let mut data = Vec::with_capacity(n * (columns.len() + 1));
    for (name, c) in columns {
        if c.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: c.len() });
        }
        names.push(name.clone());
    }
    for i in 0..n {
        data.push(1.0);
        data.extend(columns.iter().map(|(_, c)| c[i]));
    }
    ols_fit(&names, &Tensor::new(n, names.len(), data), y)
}

/// Affine map onto the target mean and (population) standard deviation.
pub fn calibrate_linear(scores: &[f64], target_mean: f64, target_std: f64) -> Result<Vec<f64>> {
    if scores.len() < 2 {
        return Err(Error::Precondition("calibration needs at least two scores".into()));
    }
    if target_std <= 0.0 {
        return Err(Error::Range(format!("target std {target_std} must be positive")));
    }
    let m = mean(scores);
    let s = population_std(scores);
    if s == 0.0 {
        return Err(Error::ZeroVariance("scores".into()));
    }
    Ok(scores.iter().map(|z| (z - m) * target_std / s + target_mean).collect())
}

/// Marks the `round(rate·N)` highest probabilities positive; among equal
/// probabilities earlier items win.
pub fn threshold_by_rate(probs: &[f64], rate: f64) -> Result<Vec<bool>> {
    if probs.is_empty() {
        return Err(Error::Precondition("no probabilities to threshold".into()));
    }
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::Range(format!("rate {rate} outside (0,1)")));
    }
    let n = probs.len();
    let k = ((rate * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let mut out = vec![false; n];
    for &i in &order[..k] {
        out[i] = true;
    }
    Ok(out)
}

/// A report table with a label column and numeric or text cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<String>)>,
}

impl Table {
    pub fn new(title: impl Into<String>, columns: &[&str]) -> Self {
        Self {
            title: title.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, label: impl Into<String>, cells: Vec<String>) {
        self.rows.push((label.into(), cells));
    }

    pub fn push_numbers(&mut self, label: impl Into<String>, values: &[f64], decimals: usize) {
        self.push(label, values.iter().map(|v| format!("{v:.decimals$}")).collect());
    }

    /// Fixed-width text with a rule under the header.
    pub fn render_text(&self) -> String {
        let label_w = self.rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(5);
        let widths: Vec<usize> = self
            .columns
            .iter()
            .enumerate()
            .map(|(j, c)| {
                self.rows
                    .iter()
                    .filter_map(|r| r.1.get(j).map(String::len))
                    .max()
                    .unwrap_or(0)
                    .max(c.len())
            })
            .collect();
        let mut out = String::new();
        if !self.title.is_empty() {
            let _ = writeln!(out, "{}", self.title);
        }
        let _ = write!(out, "{:<label_w$}", "");
        for (c, w) in self.columns.iter().zip(&widths) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
        let total = label_w + widths.iter().map(|w| w + 2).sum::<usize>();
        out.push_str(&"-".repeat(total));
        out.push('\n');
        for (label, cells) in &self.rows {
            let _ = write!(out, "{label:<label_w$}");
            for (j, w) in widths.iter().enumerate() {
                let cell = cells.get(j).map(String::as_str).unwrap_or("");
                let _ = write!(out, "  {cell:>w$}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        fn esc(s: &str) -> String {
            if s.contains([',', '"', '\n']) {
                format!("\"{}\"", s.replace('"', "\"\""))
            } else {
                s.to_string()
            }
        }
        let mut out = String::from("label");
        for c in &self.columns {
            out.push(',');
            out.push_str(&esc(c));
        }
        out.push('\n');
        for (label, cells) in &self.rows {
            out.push_str(&esc(label));
            for c in cells {
                out.push(',');
                out.push_str(&esc(c));
            }
            out.push('\n');
        }
        out
    }
}

/// Coefficient table in the usual `coef (se) stars` layout, one column per
/// fitted model.
pub fn ols_table(title: &str, models: &[(&str, &OlsReport)]) -> Table {
    let mut table = Table::new(title, &models.iter().map(|m| m.0).collect::<Vec<_>>());
    let mut names: Vec<String> = Vec::new();
    for (_, r) in models {
        for n in &r.names {
            if !names.contains(n) {
                names.push(n.clone());
            }
        }
    }
    for name in &names {
        let coef = models
            .iter()
            .map(|(_, r)| {
                r.coefficients
                    .get(name)
                    .map(|c| format!("{c:.3}{}", r.stars[name]))
                    .unwrap_or_default()
            })
            .collect();
        table.push(name.clone(), coef);
        let se = models
            .iter()
            .map(|(_, r)| r.std_errors.get(name).map(|s| format!("({s:.3})")).unwrap_or_default())
            .collect();
        table.push("", se);
    }
    table.push_numbers("R2", &models.iter().map(|(_, r)| r.r_squared).collect::<Vec<_>>(), 3);
    table.push(
        "N",
        models.iter().map(|(_, r)| r.n.to_string()).collect(),
    );
    table
}

pub fn corr_table(title: &str, m: &CorrMatrix) -> Table {
    let cols: Vec<&str> = m.names.iter().map(String::as_str).collect();
    let mut t = Table::new(title, &cols);
    for (name, row) in m.names.iter().zip(&m.values) {
        t.push_numbers(name.clone(), row, 3);
    }
    t
}

/// Static SVG figures.
pub mod plot {
    use super::CorrMatrix;
    use std::fmt::Write as _;

    fn escape(s: &str) -> String {
        s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
    }

    /// Diverging blue/white/red for values in [-1, 1].
    fn colour(v: f64) -> String {
        let v = v.clamp(-1.0, 1.0);
        let (r, g, b) = if v >= 0.0 {
            (255.0, 255.0 * (1.0 - v), 255.0 * (1.0 - v))
        } else {
            (255.0 * (1.0 + v), 255.0 * (1.0 + v), 255.0)
        };
        format!("rgb({},{},{})", r as u8, g as u8, b as u8)
    }

    pub fn correlation_heatmap(m: &CorrMatrix, title: &str) -> String {
        let k = m.names.len();
        let cell = 56.0;
        let margin = 120.0;
        let size = margin + cell * k as f64 + 20.0;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{}" font-family="sans-serif" font-size="11">"#,
            size + 30.0
        );
        let _ = writeln!(s, r#"<text x="10" y="18" font-size="14">{}</text>"#, escape(title));
        for (i, name) in m.names.iter().enumerate() {
            let y = 30.0 + margin + cell * i as f64 + cell / 2.0;
            let _ = writeln!(s, r#"<text x="{}" y="{y}" text-anchor="end">{}</text>"#, margin - 6.0, escape(name));
            let x = margin + cell * i as f64 + cell / 2.0;
            let _ = writeln!(
                s,
                r#"<text x="{x}" y="{}" text-anchor="start" transform="rotate(-45 {x} {})">{}</text>"#,
                30.0 + margin - 6.0,
                30.0 + margin - 6.0,
                escape(name)
            );
            for (j, v) in m.values[i].iter().enumerate() {
                let x = margin + cell * j as f64;
                let y = 30.0 + margin + cell * i as f64;
                let _ = writeln!(
                    s,
                    r#"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{}" stroke="white"/><text x="{}" y="{}" text-anchor="middle">{v:.2}</text>"#,
                    colour(*v),
                    x + cell / 2.0,
                    y + cell / 2.0 + 4.0
                );
            }
        }
        s.push_str("</svg>\n");
        s
    }

    /// Scatter of raw against calibrated scores with the identity line.
    pub fn calibration_scatter(raw: &[f64], calibrated: &[f64], labels: Option<&[f64]>, title: &str) -> String {
        let (w, h, pad) = (480.0, 400.0, 50.0);
        let ys: Vec<f64> = labels.unwrap_or(calibrated).to_vec();
        let lo = raw.iter().chain(&ys).chain(calibrated).cloned().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().chain(&ys).chain(calibrated).cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let sx = |v: f64| pad + (v - lo) / span * (w - 2.0 * pad);
        let sy = |v: f64| h - pad - (v - lo) / span * (h - 2.0 * pad);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<text x="10" y="18" font-size="14">{}</text>"#, escape(title));
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#999" stroke-dasharray="4 3"/>"##,
            sx(lo),
            sy(lo),
            sx(hi),
            sy(hi)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="#333"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}" stroke="#333"/>"##,
            h - pad,
            w - pad,
            h - pad,
            h - pad
        );
        for (i, &r) in raw.iter().enumerate() {
            let _ = writeln!(
                s,
                r##"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="#d62728" fill-opacity="0.5"/>"##,
                sx(r),
                sy(ys[i])
            );
            if labels.is_some() {
                let _ = writeln!(
                    s,
                    r##"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="#1f77b4" fill-opacity="0.5"/>"##,
                    sx(calibrated[i]),
                    sy(ys[i])
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">score</text><text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{}</text>"#,
            w / 2.0,
            h - 12.0,
            h / 2.0,
            h / 2.0,
            if labels.is_some() { "label" } else { "calibrated" }
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}">{lo:.2}</text>"#, pad, h - pad + 14.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{hi:.2}</text>"#, w - pad, h - pad + 14.0);
        s.push_str("</svg>\n");
        s
    }
}
