//! MSE-versus-training-size tables, a bare SVG line chart and path CSVs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use hybrid_inference::{Error, Result};

use crate::config::Mode;
use crate::report::Metrics;

/// Median test MSE per (train size, mode); columns follow `Mode::ALL`.
#[derive(Debug, Clone, PartialEq)]
pub struct MseTable {
    pub modes: Vec<Mode>,
    pub rows: Vec<(usize, Vec<Option<f64>>)>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl MseTable {
    /// Seeds of the same (mode, size) are reduced to their median. The same
    /// (mode, size, seed) reported twice with different values is an error.
    pub fn from_metrics(metrics: &[Metrics]) -> Result<Self> {
        let mut cells: BTreeMap<(usize, Mode), BTreeMap<u64, f64>> = BTreeMap::new();
        for m in metrics {
            if !m.test_mse.is_finite() || m.test_mse < 0.0 {
                return Err(Error::Data(format!("{} reports test_mse {}", m.mode, m.test_mse)));
            }
            let seeds = cells.entry((m.train_size, m.mode)).or_default();
            if let Some(&prev) = seeds.get(&m.seed) {
                if prev != m.test_mse {
                    return Err(Error::Data(format!(
                        "conflicting {} results for train size {} seed {}",
                        m.mode, m.train_size, m.seed
                    )));
                }
            }
            seeds.insert(m.seed, m.test_mse);
        }
        let present: BTreeSet<Mode> = cells.keys().map(|&(_, m)| m).collect();
        let modes: Vec<Mode> = Mode::ALL.into_iter().filter(|m| present.contains(m)).collect();
        let sizes: BTreeSet<usize> = cells.keys().map(|&(s, _)| s).collect();
        let rows = sizes
            .into_iter()
            .map(|size| {
                let vals = modes
                    .iter()
                    .map(|&mode| {
                        cells
                            .get(&(size, mode))
                            .map(|seeds| median(seeds.values().copied().collect()))
                    })
                    .collect();
                (size, vals)
            })
            .collect();
        Ok(MseTable { modes, rows })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("train_size");
        for m in &self.modes {
            s.push(',');
            s.push_str(m.name());
        }
        s.push('\n');
        for (size, vals) in &self.rows {
            s.push_str(&size.to_string());
            for v in vals {
                s.push(',');
                if let Some(v) = v {
                    let _ = write!(s, "{v:.10e}");
                }
            }
            s.push('\n');
        }
        s
    }

    /// Line chart with a log-scaled x axis (training size, floored at 1).
    pub fn to_svg(&self) -> String {
        const W: f64 = 640.0;
        const H: f64 = 400.0;
        const M: f64 = 60.0;
        const COLORS: [&str; 5] = ["#1f77b4", "#9467bd", "#2ca02c", "#d62728", "#ff7f0e"];
        let lx = |size: usize| (size.max(1) as f64).log10();
        let xs: Vec<f64> = self.rows.iter().map(|(s, _)| lx(*s)).collect();
        let (x_lo, x_hi) = xs
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let (x_lo, x_hi) = if x_hi > x_lo { (x_lo, x_hi) } else { (x_lo - 0.5, x_lo + 0.5) };
        let y_hi = self
            .rows
            .iter()
            .flat_map(|(_, v)| v.iter().flatten().copied())
            .fold(0.0f64, f64::max);
        let y_hi = if y_hi > 0.0 { y_hi * 1.1 } else { 1.0 };
        let px = |x: f64| M + (x - x_lo) / (x_hi - x_lo) * (W - 2.0 * M);
        let py = |y: f64| H - M - y / y_hi * (H - 2.0 * M);

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<path d="M{M} {top} V{bot} H{right}" stroke="black" fill="none"/>"#,
            top = M,
            bot = H - M,
            right = W - M
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">training samples (log scale)</text>"#,
            W / 2.0,
            H - 20.0
        );
        let _ = writeln!(
            s,
            r#"<text x="15" y="{}" font-size="12" transform="rotate(-90 15 {})">test MSE</text>"#,
            H / 2.0,
            H / 2.0
        );
        for (size, x) in self.rows.iter().map(|(s, _)| s).zip(&xs) {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{}" text-anchor="middle" font-size="10">{size}</text>"#,
                px(*x),
                H - M + 15.0
            );
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end" font-size="10">{y_hi:.3e}</text>"#, M - 4.0, M);
        for (j, mode) in self.modes.iter().enumerate() {
            let color = COLORS[Mode::ALL.iter().position(|m| m == mode).unwrap_or(0)];
            let pts: Vec<String> = self
                .rows
                .iter()
                .zip(&xs)
                .filter_map(|((_, v), &x)| v[j].map(|y| format!("{:.2},{:.2}", px(x), py(y))))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="2"/>"#,
                pts.join(" ")
            );
            for p in &pts {
                let (cx, cy) = p.split_once(',').unwrap_or(("0", "0"));
                let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#);
            }
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" font-size="12" fill="{color}">{mode}</text>"#,
                W - M + 5.0,
                M + 15.0 * j as f64
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Parse an estimates CSV: a header of `x1..xd`, then rows of reals.
pub fn read_estimates(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Data("empty estimates file".into()))?;
    let width = header.split(',').count();
    let expected: Vec<String> = (1..=width).map(|i| format!("x{i}")).collect();
    if header.split(',').map(str::trim).ne(expected.iter().map(String::as_str)) {
        return Err(Error::Data(format!("unexpected estimates header `{header}`")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let row = line
                .split(',')
                .map(|f| f.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| Error::Data(format!("estimates row {}: bad number", i + 1)))?;
            if row.len() != width {
                return Err(Error::Data(format!("estimates row {} has {} fields", i + 1, row.len())));
            }
            Ok(row)
        })
        .collect()
}

/// Path CSV with `x,y` or `x,y,z` columns.
pub fn path_csv(rows: &[Vec<f64>]) -> Result<String> {
    let width = rows.first().map_or(2, Vec::len);
    let header = match width {
        2 => "x,y",
        3 => "x,y,z",
        w => return Err(Error::Data(format!("paths need 2 or 3 coordinates, got {w}"))),
    };
    let mut s = format!("{header}\n");
    for r in rows {
        let fields: Vec<String> = r.iter().map(|v| format!("{v:.10e}")).collect();
        s.push_str(&fields.join(","));
        s.push('\n');
    }
    Ok(s)
}
