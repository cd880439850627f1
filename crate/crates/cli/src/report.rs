//! Report rendering: an aligned text table and JSON lines.

use std::io::Write;
use std::path::Path;

use crate::harness::{Report, RunRow};

const HEADERS: [&str; 11] =
    ["Benchmark", "Order", "Backend", "T_s", "F<Ip,Fp>", "K", "k_bar", "Time (s)", "Outcome", "Oracle", "Cross-check"];

fn cells(r: &RunRow) -> [String; 11] {
    let gains = r.controller.as_ref().map_or_else(|| "-".to_string(), |k| {
        let parts: Vec<String> = k.iter().map(|g| g.to_string()).collect();
        format!("[{}]", parts.join(", "))
    });
    let outcome = match (&r.diagnosis, r.succeeded()) {
        (_, true) => "success".to_string(),
        (Some(d), false) => format!("FAILURE: {d}"),
        (None, false) => "FAILURE".to_string(),
    };
    let oracle = r.oracle.as_ref().map_or_else(
        || "-".to_string(),
        |o| if o.violations == 0 { format!("SAFE ({} runs)", o.runs) } else { format!("{} violations", o.violations) },
    );
    [
        r.benchmark.clone(),
        r.order.to_string(),
        r.backend.to_string(),
        r.sample_time.to_string(),
        r.precision.clone().unwrap_or_else(|| "-".into()),
        gains,
        r.k_bar.map_or_else(|| "-".into(), |k| k.to_string()),
        format!("{:.3}", r.wall_time_s),
        outcome,
        oracle,
        r.cross_check.clone().unwrap_or_else(|| "-".into()),
    ]
}

/// Plain-text table with one line per attempted combination.
pub fn render_table(report: &Report) -> String {
    let rows: Vec<[String; 11]> = report.rows.iter().map(cells).collect();
    let mut widths: Vec<usize> = HEADERS.iter().map(|h| h.chars().count()).collect();
    for row in &rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |items: Vec<&str>| {
        let padded: Vec<String> = items.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        padded.join("  ").trim_end().to_string()
    };
    let mut out = String::new();
    out.push_str(&line(HEADERS.to_vec()));
    out.push('\n');
    out.push_str(&line(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect()));
    out.push('\n');
    for row in &rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

pub fn render_json_lines(report: &Report) -> String {
    report.rows.iter().map(|r| serde_json::to_string(r).expect("row serializes") + "\n").collect()
}

/// Writes through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &str) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}
