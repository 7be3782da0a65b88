// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shared helpers: conversion to the reference oracle and tensor comparison.

#![allow(dead_code)]

use melab::model::ModelBundle;
use melab::tensor::Tensor;
use melab_reference::{matrix_from_f32, Matrix, RefConfig, RefLayer, RefModel};

fn mat(t: &Tensor) -> Matrix {
    matrix_from_f32(t.data(), t.rows(), t.cols())
}

fn vec64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

pub fn to_reference(m: &ModelBundle) -> RefModel {
    let c = &m.config;
    RefModel {
        config: RefConfig {
            n_heads: c.n_heads,
            n_kv_heads: c.n_kv_heads,
            d_head: c.d_head,
            rope_theta: c.rope_enabled.then_some(c.rope_theta),
            eps: c.norm_eps,
        },
        embedding: mat(&m.embedding),
        layers: m
            .layers
            .iter()
            .map(|l| RefLayer {
                attn_norm: vec64(&l.attn_norm_w),
                wq: mat(&l.w_q),
                wk: mat(&l.w_k),
                wv: mat(&l.w_v),
                wo: mat(&l.w_o),
                ffn_norm: vec64(&l.ffn_norm_w),
                wgate: mat(&l.w_gate),
                wup: mat(&l.w_up),
                wdown: mat(&l.w_down),
            })
            .collect(),
    }
}

/// Largest `|a − b|` over the largest `|b|`; infinite entries must agree
/// exactly.
pub fn rel_err(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    let mut scale: f64 = 0.0;
    let mut worst: f64 = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        if y.is_infinite() || x.is_infinite() {
            if f64::from(x) != y {
                return f64::INFINITY;
            }
            continue;
        }
        scale = scale.max(y.abs());
        worst = worst.max((f64::from(x) - y).abs());
    }
    if scale == 0.0 {
        worst
    } else {
        worst / scale
    }
}

pub fn flatten(m: &Matrix) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn flatten3(m: &[Matrix]) -> Vec<f64> {
    m.iter().flat_map(|x| x.iter().flatten().copied()).collect()
}
