//! Linear-chain CRF over emission scores.
//!
//! For `K` tags the transition matrix is `(K+2)×(K+2)`; state `K` is START
//! and `K+1` is STOP. A path `y₁..y_T` scores
//! `trans[START][y₁] + Σ trans[yₜ][yₜ₊₁] + trans[y_T][STOP] + Σ em[t][yₜ]`.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Graph, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Value of the transitions into START and out of STOP. They never lie on
/// a scored path, so they receive no gradient and stay fixed.
pub const BOUNDARY_SCORE: f64 = -1e4;

pub fn start_state(num_tags: usize) -> usize {
    num_tags
}

pub fn stop_state(num_tags: usize) -> usize {
    num_tags + 1
}

fn check(em: &Tensor, trans: &Tensor) -> Result<(usize, usize)> {
    if em.shape().len() != 2 || em.shape()[0] == 0 {
        return Err(Error::contract(format!(
            "emissions must be a non-empty [T×K] matrix, got {:?}",
            em.shape()
        )));
    }
    let (t, k) = (em.shape()[0], em.shape()[1]);
    if trans.shape() != [k + 2, k + 2] {
        return Err(Error::shape("crf", em.shape(), trans.shape()));
    }
    Ok((t, k))
}

fn lse(xs: impl Iterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.collect();
    crate::tensor::log_sum_exp(&xs)
}

pub fn sequence_score(em: &Tensor, trans: &Tensor, y: &[usize]) -> Result<f64> {
    let (t_len, k) = check(em, trans)?;
    if y.len() != t_len {
        return Err(Error::contract(format!("tag sequence has length {}, emissions {}", y.len(), t_len)));
    }
    if let Some(&bad) = y.iter().find(|&&v| v >= k) {
        return Err(Error::contract(format!("tag {bad} out of range for {k} tags")));
    }
    let mut score = trans.get(start_state(k), y[0]);
    for t in 0..t_len {
        score += em.get(t, y[t]);
        if t + 1 < t_len {
            score += trans.get(y[t], y[t + 1]);
        }
    }
    score += trans.get(y[t_len - 1], stop_state(k));
    Ok(score)
}

fn forward_table(em: &Tensor, trans: &Tensor, t_len: usize, k: usize) -> Vec<f64> {
    let mut alpha = vec![0.0; t_len * k];
    for j in 0..k {
        alpha[j] = trans.get(start_state(k), j) + em.get(0, j);
    }
    for t in 1..t_len {
        for j in 0..k {
            let prev = &alpha[(t - 1) * k..t * k];
            alpha[t * k + j] = lse((0..k).map(|i| prev[i] + trans.get(i, j))) + em.get(t, j);
        }
    }
    alpha
}

fn backward_table(em: &Tensor, trans: &Tensor, t_len: usize, k: usize) -> Vec<f64> {
    let mut beta = vec![0.0; t_len * k];
    for i in 0..k {
        beta[(t_len - 1) * k + i] = trans.get(i, stop_state(k));
    }
    for t in (0..t_len - 1).rev() {
        for i in 0..k {
            let next = &beta[(t + 1) * k..(t + 2) * k];
            beta[t * k + i] = lse((0..k).map(|j| trans.get(i, j) + em.get(t + 1, j) + next[j]));
        }
    }
    beta
}

/// Log of the sum of `exp(score)` over all `K^T` tag sequences, computed
/// with the forward recurrence in log space.
pub fn log_partition(em: &Tensor, trans: &Tensor) -> Result<f64> {
    let (t_len, k) = check(em, trans)?;
    let alpha = forward_table(em, trans, t_len, k);
    let last = &alpha[(t_len - 1) * k..];
    Ok(lse((0..k).map(|j| last[j] + trans.get(j, stop_state(k)))))
}

/// Negative log-likelihood of `gold` with its gradients with respect to the
/// emissions and the transition matrix (expected minus observed counts).
pub fn nll_with_grads(em: &Tensor, trans: &Tensor, gold: &[usize]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (t_len, k) = check(em, trans)?;
    let gold_score = sequence_score(em, trans, gold)?;
    let alpha = forward_table(em, trans, t_len, k);
    let beta = backward_table(em, trans, t_len, k);
    let (start, stop) = (start_state(k), stop_state(k));
    let n = k + 2;
    let last = &alpha[(t_len - 1) * k..];
    let log_z = lse((0..k).map(|j| last[j] + trans.get(j, stop)));

    let mut d_em = vec![0.0; t_len * k];
    let mut d_trans = vec![0.0; n * n];
    for t in 0..t_len {
        for j in 0..k {
            d_em[t * k + j] = (alpha[t * k + j] + beta[t * k + j] - log_z).exp();
        }
    }
    for j in 0..k {
        d_trans[start * n + j] += d_em[j];
        d_trans[j * n + stop] += d_em[(t_len - 1) * k + j];
    }
    for t in 0..t_len - 1 {
        for i in 0..k {
            for j in 0..k {
                let lp = alpha[t * k + i] + trans.get(i, j) + em.get(t + 1, j) + beta[(t + 1) * k + j] - log_z;
                d_trans[i * n + j] += lp.exp();
            }
        }
    }
    d_trans[start * n + gold[0]] -= 1.0;
    d_trans[gold[t_len - 1] * n + stop] -= 1.0;
    for t in 0..t_len {
        d_em[t * k + gold[t]] -= 1.0;
        if t + 1 < t_len {
            d_trans[gold[t] * n + gold[t + 1]] -= 1.0;
        }
    }
    Ok((log_z - gold_score, d_em, d_trans))
}

/// Records `log_partition − sequence_score(gold)` on the tape.
pub fn crf_nll(tape: &mut Tape, em: Var, trans: Var, gold: &[usize]) -> Result<Var> {
    let (nll, d_em, d_trans) = nll_with_grads(tape.value(em), tape.value(trans), gold)?;
    tape.scalar_fn(nll, vec![(em, d_em), (trans, d_trans)])
}

/// Highest-scoring tag sequence. Ties go to the lowest tag index at every
/// backtracking step. With `allowed`, disallowed transitions are excluded.
pub fn viterbi_constrained(em: &Tensor, trans: &Tensor, allowed: Option<&[Vec<bool>]>) -> Result<Vec<usize>> {
    let (t_len, k) = check(em, trans)?;
    let (start, stop) = (start_state(k), stop_state(k));
    let score = |i: usize, j: usize| match allowed {
        Some(a) if !a[i][j] => f64::NEG_INFINITY,
        _ => trans.get(i, j),
    };
    let mut delta: Vec<f64> = (0..k).map(|j| score(start, j) + em.get(0, j)).collect();
    let mut back = vec![0usize; t_len * k];
    for t in 1..t_len {
        let mut next = vec![0.0; k];
        for j in 0..k {
            let mut best = 0;
            let mut best_score = delta[0] + score(0, j);
            for i in 1..k {
                let s = delta[i] + score(i, j);
                if s > best_score {
                    best = i;
                    best_score = s;
                }
            }
            back[t * k + j] = best;
            next[j] = best_score + em.get(t, j);
        }
        delta = next;
    }
    let mut last = 0;
    let mut last_score = delta[0] + score(0, stop);
    for j in 1..k {
        let s = delta[j] + score(j, stop);
        if s > last_score {
            last = j;
            last_score = s;
        }
    }
    let mut path = vec![0; t_len];
    path[t_len - 1] = last;
    for t in (1..t_len).rev() {
        path[t - 1] = back[t * k + path[t]];
    }
    Ok(path)
}

pub fn viterbi(em: &Tensor, trans: &Tensor) -> Result<Vec<usize>> {
    viterbi_constrained(em, trans, None)
}

/// Emission projection plus transition matrix.
#[derive(Clone, Debug)]
pub struct CrfHead {
    pub w_e: ParamId,
    pub b_e: ParamId,
    pub transitions: ParamId,
    pub num_tags: usize,
}

impl CrfHead {
    pub fn new(store: &mut ParamStore, prefix: &str, dim_h: usize, num_tags: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let w_e = store.add_normal(format!("{prefix}.w_e"), &[dim_h, num_tags], std, rng);
        let b_e = store.add(format!("{prefix}.b_e"), Tensor::zeros(&[num_tags]));
        let transitions = store.add_normal(format!("{prefix}.transitions"), &[num_tags + 2, num_tags + 2], std, rng);
        let n = num_tags + 2;
        let m = store.value_mut(transitions);
        for i in 0..n {
            m.set(i, start_state(num_tags), BOUNDARY_SCORE);
            m.set(stop_state(num_tags), i, BOUNDARY_SCORE);
        }
        CrfHead {
            w_e,
            b_e,
            transitions,
            num_tags,
        }
    }

    /// `M_P = H · W_e + b_e`.
    pub fn emissions(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let w = g.param(self.w_e);
        let b = g.param(self.b_e);
        let proj = g.tape.matmul(h, w)?;
        g.tape.add_bias(proj, b)
    }

    pub fn nll(&self, g: &mut Graph, emissions: Var, gold: &[usize]) -> Result<Var> {
        let trans = g.param(self.transitions);
        crf_nll(&mut g.tape, emissions, trans, gold)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random(rng: &mut ChaCha8Rng, t: usize, k: usize, scale: f64) -> (Tensor, Tensor) {
        let em = Tensor::matrix(t, k, (0..t * k).map(|_| rng.random_range(-scale..scale)).collect()).unwrap();
        let n = k + 2;
        let trans = Tensor::matrix(n, n, (0..n * n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap();
        (em, trans)
    }

    fn all_paths(t: usize, k: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..t {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..k).map(move |j| {
                        let mut q = p.clone();
                        q.push(j);
                        q
                    })
                })
                .collect();
        }
        out
    }

    #[test]
    fn single_step_partition() {
        let (a, b) = (0.3, -1.2);
        let em = Tensor::from_rows(&[[a, b]]).unwrap();
        let trans = Tensor::zeros(&[4, 4]);
        let z = log_partition(&em, &trans).unwrap();
        assert!((z - (a.exp() + b.exp()).ln()).abs() < 1e-15);
        assert_eq!(sequence_score(&em, &trans, &[1]).unwrap(), b);
    }

    #[test]
    fn hand_filled_two_step_score() {
        // 2 tags; START = 2, STOP = 3.
        let trans = Tensor::from_rows(&[
            [0.5, -1.0, 0.0, 0.25],
            [2.0, 0.1, 0.0, -0.5],
            [1.5, -2.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0],
        ])
        .unwrap();
        let em = Tensor::from_rows(&[[0.2, 0.7], [-0.3, 1.1]]).unwrap();
        // START→1 (-2.0) + 1→0 (2.0) + 0→STOP (0.25) + em[0][1] (0.7) + em[1][0] (-0.3)
        let s = sequence_score(&em, &trans, &[1, 0]).unwrap();
        assert!((s - (-2.0 + 2.0 + 0.25 + 0.7 - 0.3)).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_tag_is_rejected() {
        let em = Tensor::zeros(&[2, 3]);
        let trans = Tensor::zeros(&[5, 5]);
        assert!(matches!(sequence_score(&em, &trans, &[0, 3]), Err(Error::Contract(_))));
        assert!(matches!(log_partition(&em, &Tensor::zeros(&[3, 3])), Err(Error::Shape { .. })));
    }

    #[test]
    fn emission_shift_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (em, trans) = random(&mut rng, 4, 3, 2.0);
        let c = 0.75;
        let shifted = Tensor::matrix(4, 3, em.data().iter().map(|v| v + c).collect()).unwrap();
        let z0 = log_partition(&em, &trans).unwrap();
        let z1 = log_partition(&shifted, &trans).unwrap();
        assert!((z1 - z0 - 4.0 * c).abs() < 1e-12);
        let y = [0, 2, 1, 1];
        let s0 = sequence_score(&em, &trans, &y).unwrap();
        let s1 = sequence_score(&shifted, &trans, &y).unwrap();
        assert!((s1 - s0 - 4.0 * c).abs() < 1e-12);
        assert_eq!(viterbi(&em, &trans).unwrap(), viterbi(&shifted, &trans).unwrap());
    }

    #[test]
    fn partition_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (em, trans) = random(&mut rng, 3, 3, 3.0);
        let scores: Vec<f64> = all_paths(3, 3)
            .iter()
            .map(|p| sequence_score(&em, &trans, p).unwrap())
            .collect();
        assert_eq!(scores.len(), 27);
        let brute = crate::tensor::log_sum_exp(&scores);
        assert!((log_partition(&em, &trans).unwrap() - brute).abs() < 1e-10);
        for s in scores {
            assert!(log_partition(&em, &trans).unwrap() >= s);
        }
    }

    #[test]
    fn degenerate_alphabet_has_zero_nll() {
        let em = Tensor::from_rows(&[[0.4], [-2.0], [1.0]]).unwrap();
        let trans = Tensor::matrix(3, 3, vec![0.3, 0.0, -0.2, 0.9, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let (nll, _, _) = nll_with_grads(&em, &trans, &[0, 0, 0]).unwrap();
        assert!(nll.abs() < 1e-12);
    }

    #[test]
    fn viterbi_decoupled_and_dominant() {
        let em = Tensor::from_rows(&[[0.1, 0.9, 0.9], [2.0, -1.0, 0.0], [0.0, 0.0, 0.0]]).unwrap();
        let trans = Tensor::zeros(&[5, 5]);
        // ties resolve to the lowest index
        assert_eq!(viterbi(&em, &trans).unwrap(), vec![1, 0, 0]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut em, trans) = random(&mut rng, 5, 4, 1.0);
        for t in 0..5 {
            em.set(t, 2, em.get(t, 2) + 1e6);
        }
        assert_eq!(viterbi(&em, &trans).unwrap(), vec![2; 5]);
    }

    #[test]
    fn long_sequences_stay_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (em, trans) = random(&mut rng, 128, 13, 50.0);
        let z = log_partition(&em, &trans).unwrap();
        assert!(z.is_finite());
        let (nll, d_em, d_trans) = nll_with_grads(&em, &trans, &[0; 128]).unwrap();
        assert!(nll.is_finite() && nll >= 0.0);
        assert!(d_em.iter().chain(&d_trans).all(|v| v.is_finite()));
    }

    #[test]
    fn boundary_transitions_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (em, trans) = random(&mut rng, 4, 3, 1.0);
        let (_, _, d_trans) = nll_with_grads(&em, &trans, &[0, 1, 2, 0]).unwrap();
        let n = 5;
        for i in 0..n {
            assert_eq!(d_trans[i * n + start_state(3)], 0.0);
            assert_eq!(d_trans[stop_state(3) * n + i], 0.0);
        }
    }

    #[test]
    fn constrained_decoding_yields_valid_bioes() {
        use crate::tagging::{allowed_transitions, is_valid, tags_from_indices, NUM_TAGS};
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let allowed = allowed_transitions();
        for _ in 0..50 {
            let (em, trans) = random(&mut rng, 6, NUM_TAGS, 3.0);
            let path = viterbi_constrained(&em, &trans, Some(&allowed)).unwrap();
            assert!(is_valid(&tags_from_indices(&path).unwrap()));
        }
    }
}
