// SPDX-License-Identifier: MIT OR Apache-2.0

//! Plain-text report encodings: `%g`-style numbers and CSV tables.
//!
//! Numbers carry 6 significant digits with a `.` separator; non-finite
//! values print as `nan`, `inf` and `-inf`. Lines end in `\n`.

use crate::diagnostics::{GainTable, LayerTokenTable};
use crate::error::{Error, Result};
use crate::sink::SinkReport;
use crate::transformer::{ActivationTrace, TapPoint};

/// Formats like C's `%g` with precision 6.
pub fn fmt_g(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return if v.is_sign_negative() {
            "-0".into()
        } else {
            "0".into()
        };
    }
    // The exponent after rounding to 6 significant digits decides the style.
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (5 - exp) as usize;
        strip_zeros(&format!("{v:.decimals$}")).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_g).unwrap_or_default()
}

/// Long-format `layer,token,value` table.
pub fn layer_token_csv(table: &LayerTokenTable) -> String {
    let mut out = format!("layer,token,{}\n", table.metric);
    for (l, row) in table.values.iter().enumerate() {
        for (t, &v) in row.iter().enumerate() {
            out.push_str(&format!("{l},{t},{}\n", fmt_g(v)));
        }
    }
    out
}

/// Like [`layer_token_csv`]; undefined entries are left empty.
pub fn gain_csv(table: &GainTable) -> String {
    let mut out = format!("layer,token,{}\n", table.metric);
    for (l, row) in table.values.iter().enumerate() {
        for (t, &v) in row.iter().enumerate() {
            out.push_str(&format!("{l},{t},{}\n", opt(v)));
        }
    }
    out
}

/// One value per layer under the given column name.
pub fn layer_csv(name: &str, values: &[f64]) -> String {
    let mut out = format!("layer,{name}\n");
    for (l, &v) in values.iter().enumerate() {
        out.push_str(&format!("{l},{}\n", fmt_g(v)));
    }
    out
}

/// `layer,head,score` rows of a sink report.
pub fn sink_csv(report: &SinkReport) -> String {
    let mut out = String::from("layer,head,sink_score\n");
    for (l, heads) in report.scores.iter().enumerate() {
        for (h, &v) in heads.iter().enumerate() {
            out.push_str(&format!("{l},{h},{}\n", fmt_g(v)));
        }
    }
    out
}

/// Query-by-key matrix of one head: a header of key indices, then one row
/// per query. `tap` must be `attn_scores` or `attn_probs`.
pub fn heatmap_csv(
    trace: &ActivationTrace,
    layer: usize,
    head: usize,
    tap: TapPoint,
) -> Result<String> {
    if !matches!(tap, TapPoint::AttnScores | TapPoint::AttnProbs) {
        return Err(Error::InvalidArgument(format!(
            "{tap} is not an attention tap"
        )));
    }
    if head >= trace.n_heads {
        return Err(Error::Range {
            what: "head",
            value: head,
            limit: trace.n_heads,
        });
    }
    let t = trace.tensor(layer, tap)?;
    let s = trace.seq_len();
    let mut out = String::from("query");
    for k in 0..s {
        out.push_str(&format!(",k{k}"));
    }
    out.push('\n');
    let block = &t.data()[head * s * s..(head + 1) * s * s];
    for q in 0..s {
        out.push_str(&q.to_string());
        for &v in &block[q * s..(q + 1) * s] {
            out.push(',');
            out.push_str(&fmt_g(f64::from(v)));
        }
        out.push('\n');
    }
    Ok(out)
}
