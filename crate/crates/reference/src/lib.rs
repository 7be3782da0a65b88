// SPDX-License-Identifier: MIT OR Apache-2.0

//! Naive double-precision decoder forward pass.
//!
//! Written independently of `melab-core` as a test oracle: nested `Vec`s,
//! explicit loops, no shared kernels. Weight matrices are `[in][out]`.

pub type Matrix = Vec<Vec<f64>>;

#[derive(Debug, Clone)]
pub struct RefConfig {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    /// `Some(theta)` enables rotary embeddings.
    pub rope_theta: Option<f64>,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct RefLayer {
    pub attn_norm: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Vec<f64>,
    pub wgate: Matrix,
    pub wup: Matrix,
    pub wdown: Matrix,
}

#[derive(Debug, Clone)]
pub struct RefModel {
    pub config: RefConfig,
    pub embedding: Matrix,
    pub layers: Vec<RefLayer>,
}

/// Every intermediate of one layer.
#[derive(Debug, Clone, Default)]
pub struct RefTaps {
    pub block_input: Matrix,
    pub attn_norm_out: Matrix,
    /// `[head][query][key]`, `-inf` above the diagonal.
    pub attn_scores: Vec<Matrix>,
    pub attn_probs: Vec<Matrix>,
    pub attn_out: Matrix,
    pub post_attn_residual: Matrix,
    pub ffn_norm_out: Matrix,
    pub ffn_gate_out: Matrix,
    pub ffn_up_out: Matrix,
    pub ffn_down_out: Matrix,
    pub block_output: Matrix,
}

fn project(x: &Matrix, w: &Matrix) -> Matrix {
    let out_dim = w[0].len();
    x.iter()
        .map(|row| {
            let mut y = vec![0.0; out_dim];
            for (i, xi) in row.iter().enumerate() {
                for j in 0..out_dim {
                    y[j] += xi * w[i][j];
                }
            }
            y
        })
        .collect()
}

fn norm(x: &Matrix, w: &[f64], eps: f64) -> Matrix {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean_sq = row.iter().map(|v| v * v).sum::<f64>() / n;
            let r = (mean_sq + eps).sqrt();
            row.iter().zip(w).map(|(v, g)| v / r * g).collect()
        })
        .collect()
}

fn rotate(x: &mut Matrix, heads: usize, d_head: usize, theta: f64) {
    let half = d_head / 2;
    for (pos, row) in x.iter_mut().enumerate() {
        for h in 0..heads {
            let base = h * d_head;
            for i in 0..half {
                let angle = pos as f64 / theta.powf((2 * i) as f64 / d_head as f64);
                let (re, im) = (row[base + i], row[base + i + half]);
                row[base + i] = re * angle.cos() - im * angle.sin();
                row[base + i + half] = im * angle.cos() + re * angle.sin();
            }
        }
    }
}

fn add(a: &Matrix, b: &Matrix) -> Matrix {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// Runs the model over `tokens` and returns the taps of every layer.
pub fn reference_forward(model: &RefModel, tokens: &[usize]) -> Vec<RefTaps> {
    let cfg = &model.config;
    let s = tokens.len();
    let dh = cfg.d_head;
    let per_kv = cfg.n_heads / cfg.n_kv_heads;
    let mut x: Matrix = tokens.iter().map(|&t| model.embedding[t].clone()).collect();
    let mut out = Vec::new();

    for layer in &model.layers {
        let mut taps = RefTaps {
            block_input: x.clone(),
            ..Default::default()
        };
        let a = norm(&x, &layer.attn_norm, cfg.eps);
        let mut q = project(&a, &layer.wq);
        let mut k = project(&a, &layer.wk);
        let v = project(&a, &layer.wv);
        if let Some(theta) = cfg.rope_theta {
            rotate(&mut q, cfg.n_heads, dh, theta);
            rotate(&mut k, cfg.n_kv_heads, dh, theta);
        }
        let mut heads_out = vec![vec![0.0; cfg.n_heads * dh]; s];
        for h in 0..cfg.n_heads {
            let g = h / per_kv;
            let mut scores = vec![vec![f64::NEG_INFINITY; s]; s];
            let mut probs = vec![vec![0.0; s]; s];
            for i in 0..s {
                for j in 0..=i {
                    let mut acc = 0.0;
                    for c in 0..dh {
                        acc += q[i][h * dh + c] * k[j][g * dh + c];
                    }
                    scores[i][j] = acc / (dh as f64).sqrt();
                }
                let m = scores[i][..=i].iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores[i][..=i].iter().map(|v| (v - m).exp()).sum();
                for j in 0..=i {
                    probs[i][j] = (scores[i][j] - m).exp() / z;
                    for c in 0..dh {
                        heads_out[i][h * dh + c] += probs[i][j] * v[j][g * dh + c];
                    }
                }
            }
            taps.attn_scores.push(scores);
            taps.attn_probs.push(probs);
        }
        let attn_out = project(&heads_out, &layer.wo);
        let r = add(&x, &attn_out);
        let y = norm(&r, &layer.ffn_norm, cfg.eps);
        let gate = project(&y, &layer.wgate);
        let up = project(&y, &layer.wup);
        let act: Matrix = gate
            .iter()
            .zip(&up)
            .map(|(gr, ur)| {
                gr.iter()
                    .zip(ur)
                    .map(|(g, u)| g / (1.0 + (-g).exp()) * u)
                    .collect()
            })
            .collect();
        let down = project(&act, &layer.wdown);
        let block_out = add(&r, &down);

        taps.attn_norm_out = a;
        taps.attn_out = attn_out;
        taps.post_attn_residual = r;
        taps.ffn_norm_out = y;
        taps.ffn_gate_out = gate;
        taps.ffn_up_out = up;
        taps.ffn_down_out = down;
        taps.block_output = block_out.clone();
        out.push(taps);
        x = block_out;
    }
    out
}

/// Builds a `[rows][cols]` matrix from row-major `f32` data.
pub fn matrix_from_f32(data: &[f32], rows: usize, cols: usize) -> Matrix {
    assert_eq!(data.len(), rows * cols, "matrix data length");
    data.chunks(cols)
        .map(|r| r.iter().map(|&v| f64::from(v)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye(n: usize) -> Matrix {
        (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect()
    }

    #[test]
    fn single_token_attends_to_itself() {
        let d = 4;
        let layer = RefLayer {
            attn_norm: vec![1.0; d],
            wq: eye(d),
            wk: eye(d),
            wv: eye(d),
            wo: eye(d),
            ffn_norm: vec![1.0; d],
            wgate: vec![vec![0.0; 2]; d],
            wup: vec![vec![0.0; 2]; d],
            wdown: vec![vec![0.0; d]; 2],
        };
        let model = RefModel {
            config: RefConfig {
                n_heads: 2,
                n_kv_heads: 2,
                d_head: 2,
                rope_theta: Some(10_000.0),
                eps: 0.0,
            },
            embedding: vec![vec![1.0, -1.0, 2.0, 0.0]],
            layers: vec![layer],
        };
        let taps = reference_forward(&model, &[0]);
        assert_eq!(taps[0].attn_probs[0][0][0], 1.0);
        // x + rmsnorm(x) routed through identity projections
        let rms = (6.0f64 / 4.0).sqrt();
        for c in 0..d {
            let x = model.embedding[0][c];
            assert!((taps[0].post_attn_residual[0][c] - (x + x / rms)).abs() < 1e-12);
        }
        assert_eq!(taps[0].block_output, taps[0].post_attn_residual);
    }
}
