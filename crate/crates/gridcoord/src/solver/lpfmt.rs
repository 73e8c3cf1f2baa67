//! Debug dump of problem instances in LP text format, for eyeballing and
//! for cross-checks against external tools. Range rows (distinct finite
//! lower and upper) are emitted as two constraints since the base format
//! has no range syntax.

use std::fmt::Write;

use super::{LinearProgram, QuadraticProgram};

/// Render `lp` (optionally with a binary mask) as LP-format text.
pub fn write_lp_text(lp: &LinearProgram, integral: Option<&[bool]>) -> String {
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); lp.n_rows()];
    for &(r, c, v) in &lp.entries {
        rows[r].push((c, v));
    }
    for terms in &mut rows {
        terms.sort_by_key(|&(c, _)| c);
        // Merge duplicate columns so the dump is canonical.
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(terms.len());
        for &(c, v) in terms.iter() {
            match merged.last_mut() {
                Some((lc, lv)) if *lc == c => *lv += v,
                _ => merged.push((c, v)),
            }
        }
        *terms = merged;
    }

    let mut out = String::new();
    out.push_str("\\ gridcoord problem dump\n");
    out.push_str("Minimize\n obj:");
    let mut first = true;
    for (j, &c) in lp.cost.iter().enumerate() {
        if c != 0.0 {
            push_term(&mut out, &mut first, c, &lp.var_names[j]);
        }
    }
    if first {
        out.push_str(" 0");
    }
    out.push_str("\nSubject To\n");
    for (r, terms) in rows.iter().enumerate() {
        let b = lp.row_bounds[r];
        let expr = render_expr(terms, &lp.var_names);
        if b.lower == b.upper {
            let _ = writeln!(out, " r{r}: {expr} = {}", fmt_num(b.lower));
        } else {
            if b.lower.is_finite() {
                let _ = writeln!(out, " r{r}_lo: {expr} >= {}", fmt_num(b.lower));
            }
            if b.upper.is_finite() {
                let _ = writeln!(out, " r{r}_hi: {expr} <= {}", fmt_num(b.upper));
            }
            if !b.lower.is_finite() && !b.upper.is_finite() {
                let _ = writeln!(out, "\\ r{r}: {expr} free");
            }
        }
    }
    out.push_str("Bounds\n");
    for (j, b) in lp.var_bounds.iter().enumerate() {
        let name = &lp.var_names[j];
        let line = match (b.lower.is_finite(), b.upper.is_finite()) {
            (true, true) if b.lower == b.upper => format!(" {name} = {}", fmt_num(b.lower)),
            (true, true) => {
                format!(" {} <= {name} <= {}", fmt_num(b.lower), fmt_num(b.upper))
            }
            (true, false) => format!(" {name} >= {}", fmt_num(b.lower)),
            (false, true) => format!(" {name} <= {}", fmt_num(b.upper)),
            (false, false) => format!(" {name} free"),
        };
        out.push_str(&line);
        out.push('\n');
    }
    if let Some(mask) = integral {
        let binaries: Vec<&str> = mask
            .iter()
            .zip(&lp.var_names)
            .filter(|(&b, _)| b)
            .map(|(_, n)| n.as_str())
            .collect();
        if !binaries.is_empty() {
            out.push_str("Binaries\n ");
            out.push_str(&binaries.join(" "));
            out.push('\n');
        }
    }
    out.push_str("End\n");
    out
}

/// Render a QP instance: the linear part in LP format plus the quadratic
/// term as a comment block (the base format has no quadratic section).
pub fn write_qp_text(qp: &QuadraticProgram) -> String {
    let mut out = write_lp_text(&qp.lp, None);
    if !qp.q_entries.is_empty() {
        let mut q: Vec<(usize, usize, f64)> = Vec::new();
        for &(r, c, v) in &qp.q_entries {
            match q.iter_mut().find(|(qr, qc, _)| *qr == r && *qc == c) {
                Some((_, _, qv)) => *qv += v,
                None => q.push((r, c, v)),
            }
        }
        q.sort_by_key(|&(r, c, _)| (r, c));
        out.push_str("\\ Quadratic term (1/2 x'Qx), entries of Q:\n");
        for (r, c, v) in q {
            if v != 0.0 {
                let _ = writeln!(
                    out,
                    "\\  Q[{}, {}] = {}",
                    qp.lp.var_names[r],
                    qp.lp.var_names[c],
                    fmt_num(v)
                );
            }
        }
    }
    out
}

fn render_expr(terms: &[(usize, f64)], names: &[String]) -> String {
    if terms.is_empty() {
        return "0".into();
    }
    let mut s = String::new();
    let mut first = true;
    for &(c, v) in terms {
        push_term(&mut s, &mut first, v, &names[c]);
    }
    s.trim_start().to_string()
}

fn push_term(out: &mut String, first: &mut bool, coeff: f64, name: &str) {
    if coeff == 0.0 {
        return;
    }
    let sign = if coeff < 0.0 {
        " - "
    } else if *first {
        " "
    } else {
        " + "
    };
    out.push_str(sign);
    let mag = coeff.abs();
    if mag == 1.0 {
        out.push_str(name);
    } else {
        let _ = write!(out, "{} {name}", fmt_num(mag));
    }
    *first = false;
}

fn fmt_num(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}
