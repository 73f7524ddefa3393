//! Tab-separated loss log: a header, then `step coh div fea b c s total`.

use std::io::Write;

use rspu_core::losses::LossReport;

pub const HEADER: &str = "step\tcoh\tdiv\tfea\tb\tc\ts\ttotal";

pub fn line(step: u64, r: &LossReport) -> String {
    format!("{step}\t{}\t{}\t{}\t{}\t{}\t{}\t{}", r.coh, r.div, r.fea, r.b, r.c, r.s, r.total)
}

pub fn write_all(out: &mut impl Write, rows: &[(u64, LossReport)]) -> std::io::Result<()> {
    writeln!(out, "{HEADER}")?;
    for (step, r) in rows {
        writeln!(out, "{}", line(*step, r))?;
    }
    Ok(())
}

/// Parses a log written by [`write_all`].
pub fn parse(text: &str) -> Result<Vec<(u64, LossReport)>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err("missing history header".into());
    }
    lines
        .enumerate()
        .map(|(n, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            let num = |i: usize| -> Result<f64, String> {
                f.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| format!("line {}: bad column {}", n + 2, i + 1))
            };
            if f.len() != 8 {
                return Err(format!("line {}: expected 8 columns", n + 2));
            }
            let step = f[0].parse().map_err(|_| format!("line {}: bad step", n + 2))?;
            Ok((
                step,
                LossReport {
                    coh: num(1)?,
                    div: num(2)?,
                    fea: num(3)?,
                    b: num(4)?,
                    c: num(5)?,
                    s: num(6)?,
                    total: num(7)?,
                },
            ))
        })
        .collect()
}
