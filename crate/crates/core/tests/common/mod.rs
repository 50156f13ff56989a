#![allow(dead_code)]

use tas_core::rng::SplitMix64;
use tas_core::{Tape, Tensor, Var};

pub fn random_tensor(shape: &[usize], rng: &mut SplitMix64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Norm-wise relative error `‖a − b‖ / (‖a‖ + ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na + nb == 0.0 {
        0.0
    } else {
        diff / (na + nb)
    }
}

/// Central finite-difference check of the vector-Jacobian product of `f`
/// against the tape's analytic backward pass. Returns the worst relative
/// error over all differentiable inputs.
pub fn gradcheck<G>(inputs: &[Tensor<f64>], rng: &mut SplitMix64, f: G) -> f64
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    gradcheck_on(Tape::new, inputs, rng, f)
}

/// [`gradcheck`] with every evaluation on a tape from `make_tape`, so
/// stochastic ops can be checked under a fixed draw.
pub fn gradcheck_on<M, G>(make_tape: M, inputs: &[Tensor<f64>], rng: &mut SplitMix64, f: G) -> f64
where
    M: Fn() -> Tape<f64>,
    G: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    const H: f64 = 1e-5;
    let eval = |xs: &[Tensor<f64>]| -> Tensor<f64> {
        let mut tape = make_tape();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).clone()
    };
    let probe = eval(inputs);
    let seed: Vec<f64> = (0..probe.len()).map(|_| rng.normal()).collect();
    let weighted = |t: &Tensor<f64>| t.data().iter().zip(&seed).map(|(a, b)| a * b).sum::<f64>();

    let mut tape = make_tape();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| tape.leaf(x.clone().with_grad()))
        .collect();
    let out = f(&mut tape, &vars);
    tape.backward_seeded(out, &seed).unwrap();

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[i])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let mut numeric = vec![0.0; input.len()];
        for j in 0..input.len() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += H;
            let plus = weighted(&eval(&xs));
            xs[i].data_mut()[j] -= 2.0 * H;
            let minus = weighted(&eval(&xs));
            numeric[j] = (plus - minus) / (2.0 * H);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

// ---- plain-loop attention oracles ----

/// Row-major matrix as nested vectors.
pub type Mat = Vec<Vec<f64>>;

pub fn to_mat<F: tas_core::tensor::Scalar>(t: &Tensor<F>) -> Mat {
    (0..t.rows())
        .map(|r| {
            t.row(r)
                .iter()
                .map(|&v| tas_core::tensor::Scalar::to_f64(v))
                .collect()
        })
        .collect()
}

pub fn dense_linear(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|o| {
                    b[o] + row
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v * w[i][o])
                        .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

pub fn cols(m: &Mat, start: usize, len: usize) -> Mat {
    m.iter().map(|r| r[start..start + len].to_vec()).collect()
}

/// Dense attention of every query over every key, skipping pairs where
/// `allowed(query, key)` is false. Scores scaled by 1/√d.
pub fn dense_masked_attention(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    allowed: impl Fn(usize, usize) -> bool,
) -> Mat {
    let d = q[0].len() as f64;
    q.iter()
        .enumerate()
        .map(|(i, qi)| {
            let scores: Vec<Option<f64>> = k
                .iter()
                .enumerate()
                .map(|(j, kj)| {
                    allowed(i, j)
                        .then(|| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                })
                .collect();
            let max = scores
                .iter()
                .flatten()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores
                .iter()
                .map(|s| s.map_or(0.0, |s| (s - max).exp()))
                .collect();
            let z: f64 = exps.iter().sum();
            (0..v[0].len())
                .map(|c| exps.iter().zip(v).map(|(e, vj)| e / z * vj[c]).sum())
                .collect()
        })
        .collect()
}

pub fn avg_pool_rows(x: &Mat, rate: usize) -> Mat {
    x.chunks(rate)
        .map(|chunk| {
            (0..chunk[0].len())
                .map(|c| chunk.iter().map(|r| r[c]).sum::<f64>() / chunk.len() as f64)
                .collect()
        })
        .collect()
}

pub fn hcat(parts: &[Mat]) -> Mat {
    (0..parts[0].len())
        .map(|r| parts.iter().flat_map(|p| p[r].iter().cloned()).collect())
        .collect()
}

pub fn max_abs(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

// ---- segmentation oracles ----

use tas_core::alignment::Segment;

/// Every composition of `total` into `parts` positive integers.
pub fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
    if parts == 1 {
        return vec![vec![total]];
    }
    let mut out = Vec::new();
    for first in 1..=total - (parts - 1) {
        for mut rest in compositions(total - first, parts - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// Best alignment score by enumerating every duration assignment, summing
/// frames in temporal order.
pub fn brute_force_alignment(log_probs: &[Vec<f64>], transcript: &[usize]) -> f64 {
    compositions(log_probs.len(), transcript.len())
        .into_iter()
        .map(|durs| {
            let mut t = 0;
            let mut score = 0.0;
            for (n, d) in durs.iter().enumerate() {
                for _ in 0..*d {
                    score += log_probs[t][transcript[n]];
                    t += 1;
                }
            }
            score
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Edit distance by memoized recursion over suffixes.
pub fn levenshtein_recursive(a: &[usize], b: &[usize]) -> usize {
    fn go(
        a: &[usize],
        b: &[usize],
        i: usize,
        j: usize,
        memo: &mut Vec<Vec<Option<usize>>>,
    ) -> usize {
        if let Some(v) = memo[i][j] {
            return v;
        }
        let v = if i == a.len() {
            b.len() - j
        } else if j == b.len() {
            a.len() - i
        } else if a[i] == b[j] {
            go(a, b, i + 1, j + 1, memo)
        } else {
            1 + go(a, b, i + 1, j, memo)
                .min(go(a, b, i, j + 1, memo))
                .min(go(a, b, i + 1, j + 1, memo))
        };
        memo[i][j] = Some(v);
        v
    }
    let mut memo = vec![vec![None; b.len() + 1]; a.len() + 1];
    go(a, b, 0, 0, &mut memo)
}

/// Maximum number of (pred, gt) pairs with equal class and IoU ≥ τ, over all matchings.
pub fn optimal_true_positives(pred: &[Segment], gt: &[Segment], tau: f64) -> usize {
    fn iou(a: &Segment, b: &Segment) -> f64 {
        let inter = a.end.min(b.end) as f64 - a.start.max(b.start) as f64;
        let union = a.end.max(b.end) as f64 - a.start.min(b.start) as f64;
        inter.max(0.0) / union
    }
    fn go(i: usize, pred: &[Segment], gt: &[Segment], used: &mut Vec<bool>, tau: f64) -> usize {
        if i == pred.len() {
            return 0;
        }
        let mut best = go(i + 1, pred, gt, used, tau);
        for j in 0..gt.len() {
            if !used[j] && gt[j].class == pred[i].class && iou(&pred[i], &gt[j]) >= tau {
                used[j] = true;
                best = best.max(1 + go(i + 1, pred, gt, used, tau));
                used[j] = false;
            }
        }
        best
    }
    go(0, pred, gt, &mut vec![false; gt.len()], tau)
}

pub fn random_labels(len: usize, classes: usize, rng: &mut SplitMix64) -> Vec<usize> {
    (0..len).map(|_| rng.below(classes)).collect()
}

/// Labels made of runs with lengths in `run_len`.
pub fn random_runs(
    len: usize,
    classes: usize,
    run_len: (usize, usize),
    rng: &mut SplitMix64,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(len);
    let mut c = rng.below(classes);
    while out.len() < len {
        let n = rng.range_inclusive(run_len.0, run_len.1);
        out.extend(std::iter::repeat_n(c, n));
        let next = rng.below(classes - 1);
        c = if next >= c { next + 1 } else { next };
    }
    out.truncate(len);
    out
}
