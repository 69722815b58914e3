//! Per-token delta log-likelihood as a self-contained HTML page.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaToken {
    pub text: String,
    pub delta: f64,
    pub in_input: bool,
    pub in_context: bool,
}

const STYLE: &str = "body{font-family:monospace;line-height:2}\
span.tok{padding:1px 2px;margin:1px}\
.pos{background:rgba(0,160,0,var(--a))}\
.neg{background:rgba(200,0,0,var(--a))}\
.zero{background:none}\
.box{border:1px solid #000}\
.strike{text-decoration:line-through}";

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

/// One paragraph per sequence. Color intensity is |delta| relative to the
/// largest |delta| on the page.
pub fn render_delta_html(sequences: &[Vec<DeltaToken>]) -> String {
    let max = sequences.iter().flatten().map(|t| t.delta.abs()).filter(|d| d.is_finite()).fold(0.0, f64::max);
    let mut out = format!("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><style>{STYLE}</style></head><body>\n");
    for seq in sequences {
        out.push_str("<p>");
        for t in seq {
            let sign = if t.delta > 0.0 {
                "pos"
            } else if t.delta < 0.0 {
                "neg"
            } else {
                "zero"
            };
            let mut class = format!("tok {sign}");
            if t.in_context && !t.in_input {
                class.push_str(" box");
            }
            if t.in_input {
                class.push_str(" strike");
            }
            let alpha = if max > 0.0 { (t.delta.abs() / max).min(1.0) } else { 0.0 };
            let _ = write!(
                out,
                "<span class=\"{class}\" style=\"--a:{alpha:.3}\" title=\"{:+.4}\">{}</span> ",
                t.delta,
                escape(&t.text)
            );
        }
        out.push_str("</p>\n");
    }
    out.push_str("</body></html>\n");
    out
}

pub fn emit_delta_html(sequences: &[Vec<DeltaToken>], path: &Path) -> Result<()> {
    std::fs::write(path, render_delta_html(sequences))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(text: &str, delta: f64, in_input: bool, in_context: bool) -> DeltaToken {
        DeltaToken { text: text.into(), delta, in_input, in_context }
    }

    #[test]
    fn classes_follow_sign_and_membership() {
        let html = render_delta_html(&[vec![
            tok("up", 2.0, false, true),
            tok("down", -1.0, true, true),
            tok("flat", 0.0, false, false),
        ]]);
        assert!(html.contains("<span class=\"tok pos box\" style=\"--a:1.000\" title=\"+2.0000\">up</span>"));
        assert!(html.contains("class=\"tok neg strike\" style=\"--a:0.500\""));
        assert!(html.contains("class=\"tok zero\" style=\"--a:0.000\" title=\"+0.0000\">flat"));
    }

    #[test]
    fn text_is_escaped() {
        let html = render_delta_html(&[vec![tok("<b>&", 1.0, false, false)]]);
        assert!(html.contains("&lt;b&gt;&amp;"));
        assert!(!html.contains("<b>&"));
    }

    #[test]
    fn writes_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.html");
        emit_delta_html(&[vec![tok("a", 0.1, false, false)]], &p).unwrap();
        assert!(std::fs::read_to_string(p).unwrap().starts_with("<!DOCTYPE html>"));
    }
}
