//! Exact inference in a single Markov chain with per-position unary
//! log-potentials.

use ndarray::{Array2, Array3, ArrayView2};

use crate::math::{argmax, log_sum_exp};
use crate::model::FhmmParams;

/// Log initial and transition tables of every layer, computed once per parameter set.
#[derive(Debug, Clone)]
pub(crate) struct ChainTables {
    pub log_init: Array2<f64>,
    pub log_trans: Array3<f64>,
}

impl ChainTables {
    pub fn new(params: &FhmmParams) -> Self {
        let (m, k) = (params.layers(), params.states());
        let mut log_init = Array2::zeros((m, k));
        let mut log_trans = Array3::zeros((m, k, k));
        for layer in 0..m {
            for (dst, src) in log_init.row_mut(layer).iter_mut().zip(params.initial_log_dist(layer)) {
                *dst = src;
            }
            log_trans
                .index_axis_mut(ndarray::Axis(0), layer)
                .assign(&params.transition_log_matrix(layer));
        }
        ChainTables { log_init, log_trans }
    }
}

/// Marginals and log-normalizer of one chain.
#[derive(Debug, Clone)]
pub struct ChainPosterior {
    /// `[T][K]`
    pub unary: Array2<f64>,
    /// `[T-1][K][K]`, indexed by (position of the earlier state, previous state, current state).
    pub pairwise: Array3<f64>,
    pub log_partition: f64,
}

/// Forward-backward with per-step rescaling in probability space. Falls
/// back to log space if a scale factor underflows.
pub(crate) fn forward_backward(
    log_init: &[f64],
    log_trans: ArrayView2<f64>,
    potentials: ArrayView2<f64>,
) -> ChainPosterior {
    scaled_forward_backward(log_init, log_trans, potentials)
        .unwrap_or_else(|| log_forward_backward(log_init, log_trans, potentials))
}

fn scaled_forward_backward(
    log_init: &[f64],
    log_trans: ArrayView2<f64>,
    potentials: ArrayView2<f64>,
) -> Option<ChainPosterior> {
    let (t_len, k) = potentials.dim();
    let trans: Vec<f64> = log_trans.iter().map(|x| x.exp()).collect();
    // Emission factors shifted so each position's largest is 1.
    let mut emit: Vec<f64> = potentials.iter().copied().collect();
    let mut log_z = 0.0;
    for row in emit.chunks_exact_mut(k) {
        let shift = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        log_z += shift;
        row.iter_mut().for_each(|e| *e = (*e - shift).exp());
    }

    let mut alpha = vec![0.0; t_len * k];
    let mut norm = vec![0.0; t_len];
    for t in 0..t_len {
        let (done, rest) = alpha.split_at_mut(t * k);
        let cur = &mut rest[..k];
        let e = &emit[t * k..(t + 1) * k];
        if t == 0 {
            for ((a, &li), &ei) in cur.iter_mut().zip(log_init).zip(e) {
                *a = li.exp() * ei;
            }
        } else {
            let prev = &done[(t - 1) * k..];
            cur.fill(0.0);
            for (&p, row) in prev.iter().zip(trans.chunks_exact(k)) {
                for (a, &tr) in cur.iter_mut().zip(row) {
                    *a += p * tr;
                }
            }
            cur.iter_mut().zip(e).for_each(|(a, &ei)| *a *= ei);
        }
        let n: f64 = cur.iter().sum();
        if !(n > 0.0 && n.is_finite()) {
            return None;
        }
        norm[t] = n;
        cur.iter_mut().for_each(|a| *a /= n);
        log_z += n.ln();
    }

    let mut beta = vec![1.0; t_len * k];
    let mut weighted = vec![0.0; k];
    for t in (0..t_len.saturating_sub(1)).rev() {
        let (head, tail) = beta.split_at_mut((t + 1) * k);
        let next = &tail[..k];
        let e = &emit[(t + 1) * k..(t + 2) * k];
        for ((w, &ei), &b) in weighted.iter_mut().zip(e).zip(next) {
            *w = ei * b / norm[t + 1];
        }
        for (b, row) in head[t * k..].iter_mut().zip(trans.chunks_exact(k)) {
            *b = row.iter().zip(&weighted).map(|(a, w)| a * w).sum();
        }
    }

    let mut unary: Vec<f64> = alpha.iter().zip(&beta).map(|(a, b)| a * b).collect();
    for row in unary.chunks_exact_mut(k) {
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= total);
    }
    let mut pairwise = vec![0.0; t_len.saturating_sub(1) * k * k];
    for (t, block) in pairwise.chunks_exact_mut(k * k).enumerate() {
        let prev = &alpha[t * k..(t + 1) * k];
        let e = &emit[(t + 1) * k..(t + 2) * k];
        let b = &beta[(t + 1) * k..(t + 2) * k];
        for (w, (&ei, &bi)) in weighted.iter_mut().zip(e.iter().zip(b)) {
            *w = ei * bi;
        }
        let mut total = 0.0;
        for ((out, row), &a) in block.chunks_exact_mut(k).zip(trans.chunks_exact(k)).zip(prev) {
            for ((o, &tr), &w) in out.iter_mut().zip(row).zip(&weighted) {
                *o = a * tr * w;
                total += *o;
            }
        }
        block.iter_mut().for_each(|p| *p /= total);
    }
    if !log_z.is_finite() || unary.iter().chain(&pairwise).any(|p| !p.is_finite()) {
        return None;
    }
    Some(ChainPosterior {
        unary: Array2::from_shape_vec((t_len, k), unary).unwrap(),
        pairwise: Array3::from_shape_vec((t_len.saturating_sub(1), k, k), pairwise).unwrap(),
        log_partition: log_z,
    })
}

fn log_forward_backward(log_init: &[f64], log_trans: ArrayView2<f64>, potentials: ArrayView2<f64>) -> ChainPosterior {
    let (t_len, k) = potentials.dim();
    let mut alpha = Array2::<f64>::zeros((t_len, k));
    let mut beta = Array2::<f64>::zeros((t_len, k));
    let mut scratch = vec![0.0; k];

    for s in 0..k {
        alpha[[0, s]] = log_init[s] + potentials[[0, s]];
    }
    for t in 1..t_len {
        for s in 0..k {
            for (j, slot) in scratch.iter_mut().enumerate() {
                *slot = alpha[[t - 1, j]] + log_trans[[j, s]];
            }
            alpha[[t, s]] = log_sum_exp(&scratch) + potentials[[t, s]];
        }
    }
    for t in (0..t_len.saturating_sub(1)).rev() {
        for j in 0..k {
            for (s, slot) in scratch.iter_mut().enumerate() {
                *slot = log_trans[[j, s]] + potentials[[t + 1, s]] + beta[[t + 1, s]];
            }
            beta[[t, j]] = log_sum_exp(&scratch);
        }
    }
    let log_partition = log_sum_exp(alpha.row(t_len - 1).as_slice().unwrap());

    let mut unary = Array2::zeros((t_len, k));
    for t in 0..t_len {
        let mut total = 0.0;
        for s in 0..k {
            let p = (alpha[[t, s]] + beta[[t, s]] - log_partition).exp();
            unary[[t, s]] = p;
            total += p;
        }
        unary.row_mut(t).mapv_inplace(|p| p / total);
    }

    let mut pairwise = Array3::zeros((t_len.saturating_sub(1), k, k));
    for t in 1..t_len {
        let mut total = 0.0;
        for j in 0..k {
            for s in 0..k {
                let p =
                    (alpha[[t - 1, j]] + log_trans[[j, s]] + potentials[[t, s]] + beta[[t, s]] - log_partition).exp();
                pairwise[[t - 1, j, s]] = p;
                total += p;
            }
        }
        pairwise
            .index_axis_mut(ndarray::Axis(0), t - 1)
            .mapv_inplace(|p| p / total);
    }

    ChainPosterior {
        unary,
        pairwise,
        log_partition,
    }
}

/// Max-product path. Ties go to the lowest state index, both in the
/// back-pointers and in the final state.
pub(crate) fn viterbi(log_init: &[f64], log_trans: ArrayView2<f64>, potentials: ArrayView2<f64>) -> Vec<usize> {
    let (t_len, k) = potentials.dim();
    let mut delta = vec![0.0; k];
    let mut next = vec![0.0; k];
    let mut back = vec![0usize; t_len * k];
    let mut scratch = vec![0.0; k];
    for s in 0..k {
        delta[s] = log_init[s] + potentials[[0, s]];
    }
    for t in 1..t_len {
        for s in 0..k {
            for (j, slot) in scratch.iter_mut().enumerate() {
                *slot = delta[j] + log_trans[[j, s]];
            }
            let best = argmax(&scratch);
            back[t * k + s] = best;
            next[s] = scratch[best] + potentials[[t, s]];
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let mut path = vec![0; t_len];
    path[t_len - 1] = argmax(&delta);
    for t in (1..t_len).rev() {
        path[t - 1] = back[t * k + path[t]];
    }
    path
}

/// Forward-backward in layer `layer` of `params`, with the model's own
/// initial and transition distributions and the given `[T][K]` log-potentials.
pub fn forward_backward_layer(params: &FhmmParams, layer: usize, potentials: ArrayView2<f64>) -> ChainPosterior {
    let log_init = params.initial_log_dist(layer);
    let log_trans = params.transition_log_matrix(layer);
    forward_backward(&log_init, log_trans.view(), potentials)
}

pub fn viterbi_layer(params: &FhmmParams, layer: usize, potentials: ArrayView2<f64>) -> Vec<usize> {
    let log_init = params.initial_log_dist(layer);
    let log_trans = params.transition_log_matrix(layer);
    viterbi(&log_init, log_trans.view(), potentials)
}
