//! Dense reference implementations written against plain `Vec<f64>` rows so
//! they share no code path with the sparse kernels under test.

#![allow(dead_code)]

use sbmt_core::encoder::{EncoderModel, ModelConfig, Pooling};
use sbmt_core::Matrix;

pub type Rows = Vec<Vec<f64>>;

pub fn rows(m: &Matrix) -> Rows {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn mm(a: &Rows, b: &Matrix) -> Rows {
    a.iter()
        .map(|row| (0..b.cols()).map(|c| row.iter().enumerate().map(|(i, x)| x * b[(i, c)]).sum()).collect())
        .collect()
}

fn add_bias(a: &mut Rows, b: &Matrix) {
    for row in a {
        for (c, x) in row.iter_mut().enumerate() {
            *x += b[(0, c)];
        }
    }
}

/// Softmax attention of `q` over the keys with `key_ok[j]`; rows with
/// `!query_ok[i]` are zero.
pub fn dense_attention(q: &Rows, k: &Rows, v: &Rows, query_ok: &[bool], key_ok: &[bool]) -> Rows {
    let scale = 1.0 / (q[0].len() as f64).sqrt();
    q.iter()
        .enumerate()
        .map(|(i, qi)| {
            let mut out = vec![0.0; v[0].len()];
            if !query_ok[i] || !key_ok.iter().any(|&b| b) {
                return out;
            }
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let max = logits.iter().zip(key_ok).filter(|(_, &ok)| ok).map(|(l, _)| *l).fold(f64::MIN, f64::max);
            let w: Vec<f64> =
                logits.iter().zip(key_ok).map(|(l, &ok)| if ok { (l - max).exp() } else { 0.0 }).collect();
            let z: f64 = w.iter().sum();
            for (wj, vj) in w.iter().zip(v) {
                for (o, x) in out.iter_mut().zip(vj) {
                    *o += wj / z * x;
                }
            }
            out
        })
        .collect()
}

fn layer_norm(x: &Rows, gain: &Matrix, bias: &Matrix) -> Rows {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let sd = (var + 1e-5).sqrt();
            row.iter().enumerate().map(|(c, v)| gain[(0, c)] * (v - mean) / sd + bias[(0, c)]).collect()
        })
        .collect()
}

fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// Logits of a full-attention encoder with the same weights, no dropout.
pub fn dense_model_logits(model: &EncoderModel, tokens: &[u32]) -> Vec<f64> {
    let cfg = &model.config;
    let valid: Vec<bool> = tokens.iter().map(|&t| t != 0).collect();
    let mut h: Rows = tokens
        .iter()
        .enumerate()
        .map(|(t, &tok)| {
            (0..cfg.d_model).map(|c| model.token_embedding[(tok as usize, c)] + model.position_embedding[(t, c)]).collect()
        })
        .collect();
    for layer in &model.layers {
        let mut concat: Rows = vec![Vec::new(); tokens.len()];
        for head in &layer.heads {
            let q = mm(&h, &head.w_q);
            let k = mm(&h, &head.w_k);
            let v = mm(&h, &head.w_v);
            for (row, out) in concat.iter_mut().zip(dense_attention(&q, &k, &v, &valid, &valid)) {
                row.extend(out);
            }
        }
        let mut proj = mm(&concat, &layer.w_o);
        add_bias(&mut proj, &layer.b_o);
        let a = layer_norm(&add(&h, &proj), &layer.ln1_gain, &layer.ln1_bias);
        let mut hidden = mm(&a, &layer.ffn_w1);
        add_bias(&mut hidden, &layer.ffn_b1);
        for x in hidden.iter_mut().flatten() {
            *x = x.max(0.0);
        }
        let mut ffn = mm(&hidden, &layer.ffn_w2);
        add_bias(&mut ffn, &layer.ffn_b2);
        h = layer_norm(&add(&a, &ffn), &layer.ln2_gain, &layer.ln2_bias);
    }
    let b = model.classifier_b[(0, 0)];
    match cfg.pooling {
        Pooling::None => mm(&h, &model.classifier_w).into_iter().map(|r| r[0] + b).collect(),
        Pooling::Mean => {
            let count = valid.iter().filter(|&&v| v).count().max(1) as f64;
            let pooled: Vec<f64> = (0..cfg.d_model)
                .map(|c| h.iter().zip(&valid).filter(|(_, &ok)| ok).map(|(r, _)| r[c]).sum::<f64>() / count)
                .collect();
            vec![mm(&vec![pooled], &model.classifier_w)[0][0] + b]
        }
    }
}

pub fn tiny_config(seq_len: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        d_ff: 8,
        clusters: 4,
        vocab_size: seq_len + 1,
        max_seq_len: seq_len,
        ..ModelConfig::default()
    }
}

/// Counts directed Hamiltonian cycles by trying every node order that
/// starts at 0 (no shared code with the library's DFS).
pub fn brute_force_cycles(n: usize, has_edge: impl Fn(usize, usize) -> bool) -> u64 {
    fn permute(rest: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
        if k == rest.len() {
            out.push(rest.clone());
            return;
        }
        for i in k..rest.len() {
            rest.swap(k, i);
            permute(rest, k + 1, out);
            rest.swap(k, i);
        }
    }
    let mut orders = Vec::new();
    permute(&mut (1..n).collect(), 0, &mut orders);
    orders
        .into_iter()
        .filter(|o| {
            let cycle: Vec<usize> = std::iter::once(0).chain(o.iter().copied()).collect();
            (0..n).all(|t| has_edge(cycle[t], cycle[(t + 1) % n]))
        })
        .count() as u64
}

/// `E[#Hamiltonian cycles]` of a directed G(n, p) by summing over all
/// `2^{n(n−1)}` graphs.
pub fn exhaustive_cycle_expectation(n: usize, p: f64) -> f64 {
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (0..n).filter(move |&b| b != a).map(move |b| (a, b))).collect();
    let mut expected = 0.0;
    for graph in 0u32..1 << pairs.len() {
        let present = |a: usize, b: usize| {
            let idx = pairs.iter().position(|&e| e == (a, b)).unwrap();
            graph >> idx & 1 == 1
        };
        let edges = graph.count_ones() as i32;
        let weight = p.powi(edges) * (1.0 - p).powi(pairs.len() as i32 - edges);
        expected += weight * brute_force_cycles(n, present) as f64;
    }
    expected
}
