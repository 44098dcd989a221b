//! Config fingerprints, results-directory resolution, and small file
//! emitters (CSV, markdown, SVG).

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Stable hex SHA-256 of a value's canonical JSON serialization. Struct
/// field order is fixed by declaration, so equal configs hash equally.
pub fn fingerprint_of<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    to_hex(&hasher.finalize())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    to_hex(&hasher.finalize())
}

fn to_hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Results root: explicit flag wins, then ATFLREC_RESULTS_DIR, then
/// ./results.
pub fn results_root(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Ok(env) = std::env::var("ATFLREC_RESULTS_DIR") {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    PathBuf::from("results")
}

/// Render float columns with shortest-roundtrip formatting so identical
/// runs emit byte-identical files.
pub fn fmt_f64(v: f64) -> String {
    let mut buf = ryu_format(v);
    if buf.ends_with(".0") {
        buf.truncate(buf.len() - 2);
    }
    buf
}

fn ryu_format(v: f64) -> String {
    // {:?} on f64 is the shortest representation that round-trips.
    format!("{v:?}")
}

/// A minimal SVG polyline chart; one series per (label, points) pair.
pub fn svg_line_chart(
    title: &str,
    series: &[(String, Vec<(f64, f64)>)],
    x_label: &str,
    y_label: &str,
) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    let all: Vec<(f64, f64)> = series.iter().flat_map(|(_, pts)| pts.iter().cloned()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if all.is_empty() {
        x0 = 0.0;
        x1 = 1.0;
        y0 = 0.0;
        y1 = 1.0;
    }
    if (x1 - x0).abs() < 1e-12 {
        x1 = x0 + 1.0;
    }
    if (y1 - y0).abs() < 1e-12 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n\
         <line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n\
         <text x=\"12\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" transform=\"rotate(-90 12 {})\">{}</text>\n",
        W / 2.0,
        xml_escape(title),
        H - M,
        W - M,
        H - M,
        H - M,
        W / 2.0,
        H - 12.0,
        xml_escape(x_label),
        H / 2.0,
        H / 2.0,
        xml_escape(y_label),
    );
    // axis extent labels
    svg.push_str(&format!(
        "<text x=\"{M}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\">{}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{}</text>\n",
        H - M + 14.0,
        fmt_f64(x0),
        W - M,
        H - M + 14.0,
        fmt_f64(x1),
        M - 4.0,
        M + 4.0,
        fmt_f64(y1),
    ));
    for (i, (label, pts)) in series.iter().enumerate() {
        if pts.is_empty() {
            continue;
        }
        let color = colors[i % colors.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{color}\">{}</text>\n",
            W - M + 4.0 - 120.0,
            M + 14.0 * (i as f64 + 1.0),
            xml_escape(label)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Markdown table from a header row and string cells.
pub fn markdown_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    out.push_str(&format!("| {} |\n", headers.join(" | ")));
    out.push_str(&format!("|{}\n", " --- |".repeat(headers.len())));
    for row in rows {
        out.push_str(&format!("| {} |\n", row.join(" | ")));
    }
    out
}

pub fn csv_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    out.push_str(&headers.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Cfg {
        a: u32,
        b: String,
    }

    #[test]
    fn equal_configs_hash_equal() {
        let x = Cfg { a: 1, b: "hi".into() };
        let y = Cfg { a: 1, b: "hi".into() };
        let z = Cfg { a: 2, b: "hi".into() };
        assert_eq!(fingerprint_of(&x), fingerprint_of(&y));
        assert_ne!(fingerprint_of(&x), fingerprint_of(&z));
        assert_eq!(fingerprint_of(&x).len(), 64);
    }

    #[test]
    fn results_root_precedence() {
        assert_eq!(results_root(Some(Path::new("/tmp/x"))), PathBuf::from("/tmp/x"));
    }

    #[test]
    fn float_formatting_roundtrips() {
        for &v in &[0.1, 1e-9, 123456.789, -0.25, 1.0] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
        assert_eq!(fmt_f64(1.0), "1");
    }

    #[test]
    fn svg_is_wellformed_enough() {
        let svg = svg_line_chart(
            "loss",
            &[("train".into(), vec![(0.0, 1.0), (1.0, 0.5)])],
            "iter",
            "loss",
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }
}
