// SPDX-License-Identifier: MIT OR Apache-2.0

//! Emergence-layer detection from residual-stream norm profiles.
//!
//! For every token the detector forms the layer-to-layer norm ratio
//! `‖h_l‖ / ‖h_{l-1}‖` and reports the earliest layer whose largest ratio
//! reaches the threshold.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diagnostics::LayerTokenTable;
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 100.0;
pub const DEFAULT_EXCLUDE_TAIL: usize = 2;

/// A detected emergence layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MEDetection {
    pub layer: usize,
    pub token: usize,
    pub jump_ratio: f64,
    pub threshold_used: f64,
}

/// Ratio `cur / prev`, `+inf` for a jump off zero and `None` for `0 / 0`.
pub fn norm_ratio(prev: f64, cur: f64) -> Option<f64> {
    if prev == 0.0 {
        (cur != 0.0).then_some(f64::INFINITY)
    } else {
        Some(cur / prev)
    }
}

/// Last layer the detector inspects: `n_layers − exclude_tail`, capped at
/// the final layer.
pub fn last_scanned_layer(n_layers: usize, exclude_tail: usize) -> usize {
    (n_layers - exclude_tail).min(n_layers - 1)
}

/// Scans layers `1..=n_layers − exclude_tail` (capped at the last layer) of
/// a `block_output` norm profile. Ties at a layer go to the larger ratio,
/// then the lower token index.
pub fn detect_me_layer(
    profile: &LayerTokenTable,
    threshold: f64,
    exclude_tail: usize,
) -> Result<Option<MEDetection>> {
    let n = profile.n_layers();
    if threshold.is_nan() || threshold <= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "detection threshold must exceed 1, got {threshold}"
        )));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "detection needs at least 2 layers, got {n}"
        )));
    }
    if exclude_tail >= n {
        return Err(Error::Range {
            what: "exclude_tail",
            value: exclude_tail,
            limit: n,
        });
    }
    for l in 1..=last_scanned_layer(n, exclude_tail) {
        let mut best: Option<(usize, f64)> = None;
        for (t, (&prev, &cur)) in profile.values[l - 1]
            .iter()
            .zip(&profile.values[l])
            .enumerate()
        {
            if let Some(r) = norm_ratio(prev, cur) {
                if best.is_none_or(|(_, b)| r > b) {
                    best = Some((t, r));
                }
            }
        }
        if let Some((token, ratio)) = best {
            if ratio >= threshold {
                return Ok(Some(MEDetection {
                    layer: l,
                    token,
                    jump_ratio: ratio,
                    threshold_used: threshold,
                }));
            }
        }
    }
    Ok(None)
}

/// Per layer `l ≥ 1`, the largest token ratio and its token.
pub fn max_jump_per_layer(profile: &LayerTokenTable) -> Vec<Option<(usize, f64)>> {
    (1..profile.n_layers())
        .map(|l| {
            let mut best: Option<(usize, f64)> = None;
            for (t, (&p, &c)) in profile.values[l - 1]
                .iter()
                .zip(&profile.values[l])
                .enumerate()
            {
                if let Some(r) = norm_ratio(p, c) {
                    if best.is_none_or(|(_, b)| r > b) {
                        best = Some((t, r));
                    }
                }
            }
            best
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Published emergence layers
// ---------------------------------------------------------------------------

const REFERENCE_JSON: &str = include_str!("../data/me_layers.json");

/// Emergence layers reported for public checkpoints, keyed by model name.
pub fn reference_me_table() -> BTreeMap<String, usize> {
    serde_json::from_str(REFERENCE_JSON).expect("embedded reference table is valid JSON")
}

/// The embedded table as shipped.
pub fn reference_me_table_json() -> &'static str {
    REFERENCE_JSON
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::TapPoint;
    use proptest::prelude::*;

    fn table(values: Vec<Vec<f64>>) -> LayerTokenTable {
        LayerTokenTable {
            metric: "l2_norm".into(),
            tap: TapPoint::BlockOutput,
            values,
        }
    }

    fn flat(n_layers: usize, seq: usize) -> Vec<Vec<f64>> {
        vec![vec![5.0; seq]; n_layers]
    }

    #[test]
    fn constant_profile_not_found() {
        assert_eq!(
            detect_me_layer(&table(flat(12, 4)), 100.0, 2).unwrap(),
            None
        );
    }

    #[test]
    fn single_jump_found() {
        let mut v = flat(12, 4);
        for row in v.iter_mut().skip(7) {
            row[0] = 1500.0;
        }
        let d = detect_me_layer(&table(v), 100.0, 2).unwrap().unwrap();
        assert_eq!((d.layer, d.token), (7, 0));
        assert!((d.jump_ratio - 300.0).abs() < 1e-9);
        assert_eq!(d.threshold_used, 100.0);
    }

    #[test]
    fn earliest_jump_wins() {
        let mut v = flat(12, 3);
        for row in v.iter_mut().skip(4) {
            row[1] = 1000.0;
        }
        for row in v.iter_mut().skip(9) {
            row[2] = 5000.0;
        }
        let d = detect_me_layer(&table(v), 100.0, 2).unwrap().unwrap();
        assert_eq!((d.layer, d.token), (4, 1));
    }

    #[test]
    fn ties_prefer_larger_ratio_then_lower_token() {
        let mut v = flat(6, 3);
        v[2] = vec![600.0, 1000.0, 1000.0];
        let d = detect_me_layer(&table(v), 100.0, 1).unwrap().unwrap();
        assert_eq!((d.layer, d.token), (2, 1));
    }

    #[test]
    fn tail_is_excluded_inclusively() {
        let mut v = flat(12, 2);
        v[10][0] = 5000.0;
        assert_eq!(
            detect_me_layer(&table(v.clone()), 100.0, 2)
                .unwrap()
                .unwrap()
                .layer,
            10
        );
        assert_eq!(detect_me_layer(&table(v), 100.0, 3).unwrap(), None);
        let mut w = flat(12, 2);
        w[11][0] = 5000.0;
        assert_eq!(detect_me_layer(&table(w.clone()), 100.0, 2).unwrap(), None);
        assert_eq!(
            detect_me_layer(&table(w), 100.0, 0).unwrap().unwrap().layer,
            11
        );
    }

    #[test]
    fn zero_previous_norm() {
        let mut v = flat(4, 2);
        v[0] = vec![0.0, 0.0];
        v[1] = vec![0.0, 3.0];
        let d = detect_me_layer(&table(v), 100.0, 0).unwrap().unwrap();
        assert_eq!((d.layer, d.token), (1, 1));
        assert!(d.jump_ratio.is_infinite());
        assert_eq!(norm_ratio(0.0, 0.0), None);
    }

    #[test]
    fn bad_parameters() {
        let t = table(flat(4, 2));
        assert!(detect_me_layer(&t, 1.0, 0).is_err());
        assert!(detect_me_layer(&t, f64::NAN, 0).is_err());
        assert!(detect_me_layer(&t, 100.0, 4).is_err());
    }

    #[test]
    fn reference_lookups() {
        let t = reference_me_table();
        assert_eq!(t["Qwen3-8B"], 7);
        assert_eq!(t["Qwen2.5-7B"], 4);
        assert_eq!(t["Phi-3-mini-4k-instruct"], 2);
        assert_eq!(t.len(), 10);
    }

    proptest! {
        #[test]
        fn scale_invariant(
            rows in prop::collection::vec(prop::collection::vec(0.5f64..2000.0, 3), 4..10),
            alpha in 1e-3f64..1e3,
        ) {
            let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * alpha).collect()).collect();
            let a = detect_me_layer(&table(rows), 50.0, 1).unwrap();
            let b = detect_me_layer(&table(scaled), 50.0, 1).unwrap();
            prop_assert_eq!(a.map(|d| (d.layer, d.token)), b.map(|d| (d.layer, d.token)));
            if let (Some(a), Some(b)) = (a, b) {
                prop_assert!((a.jump_ratio / b.jump_ratio - 1.0).abs() < 1e-9);
            }
        }
    }
}
