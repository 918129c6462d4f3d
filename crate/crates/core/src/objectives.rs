//! Training losses: symmetric InfoNCE over view/map embedding pairs,
//! plus mean-squared-error heads for angular offset and explorable
//! distance.
//!
//! The contrastive term treats each record's image-pair embedding and
//! map embedding as positives and every other record in the batch as
//! negatives, scored by cosine similarity over a learned temperature.
//! Both retrieval directions (images-to-maps and maps-to-images)
//! contribute, and the batch reduction is a mean so magnitudes do not
//! scale with batch size. The angular residual is a plain difference by
//! default — no circular wrapping — with an opt-in wrapped variant.
//!
//! Everything here builds [`Tape`] graphs; values are read eagerly
//! (the tape computes forward at build time) and gradients flow through
//! `Tape::backward` from the returned root node.

use crate::autodiff::{NodeId, Tape};
use crate::dataset::TrainingRecord;
use crate::error::{Error, Result};
use crate::geom::wrap_angle;
use crate::model::{
    self, Bound, ModelConfig, ParamSet, encode_map_batch, encode_rgbd_batch, map_embed_batch,
    pair_embed_batch, predict_angle_batch, predict_distance_batch,
};
use crate::render::RgbdImage;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Embedding norms below this are considered degenerate.
pub const COSINE_NORM_EPS: f64 = 1e-12;

/// Which loss terms participate in the total (the ablation switches).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossSwitches {
    pub contrastive: bool,
    pub angular: bool,
    pub distance: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        LossSwitches { contrastive: true, angular: true, distance: true }
    }
}

impl LossSwitches {
    pub fn any(self) -> bool {
        self.contrastive || self.angular || self.distance
    }
}

/// Batch-level loss composition settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossOptions {
    pub switches: LossSwitches,
    /// Zero out the target-view feature in the pair embedding.
    pub no_target: bool,
    /// Wrap the angular residual into (-pi, pi] before squaring.
    pub circular_angle: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions { switches: LossSwitches::default(), no_target: false, circular_angle: false }
    }
}

/// Loss values for one batch. `l_total` is the sum of the enabled
/// terms; disabled terms report as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLosses {
    pub l_c: f64,
    pub l_theta: f64,
    pub l_d: f64,
    pub l_total: f64,
    /// Per-record contrastive terms (empty when disabled).
    pub per_sample: Vec<f64>,
    pub n: usize,
}

/// Graph handles from [`total_loss`]: backpropagate from `root`.
pub struct TotalLoss {
    pub root: NodeId,
    pub losses: BatchLosses,
}

/// Cosine similarity of two embedding vectors.
pub fn cosine_score<S: Scalar>(a: &[S], b: &[S]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "embedding lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < COSINE_NORM_EPS || nb < COSINE_NORM_EPS {
        return Err(Error::InvalidArgument(format!(
            "degenerate embedding: norms {na:.3e} / {nb:.3e}"
        )));
    }
    Ok(dot / (na * nb))
}

/// Symmetric InfoNCE over a precomputed score matrix (`N x N`, entry
/// `(j, k)` scoring image embedding j against map embedding k). Returns
/// the scalar loss node and the per-sample (`N x 1`) term node.
fn infonce_from_scores<S: Scalar>(
    tape: &mut Tape<S>,
    scores: NodeId,
    tau: NodeId,
) -> (NodeId, NodeId) {
    let inv_tau = tape.recip(tau);
    let logits = tape.mul_scalar(scores, inv_tau);
    let rows = tape.log_softmax_rows(logits);
    let i_to_m = tape.gather_diag(rows); // log p(map j | image j)
    let logits_t = tape.transpose(logits);
    let cols = tape.log_softmax_rows(logits_t);
    let m_to_i = tape.gather_diag(cols);
    let sum = tape.add(i_to_m, m_to_i);
    let per_sample = tape.scale(sum, -1.0);
    let mean = tape.mean_all(sum);
    let loss = tape.scale(mean, -1.0);
    (loss, per_sample)
}

/// Symmetric InfoNCE from raw embedding batches. Rows are
/// L2-normalized on the graph, so the score matrix holds cosines.
pub fn infonce_loss<S: Scalar>(
    tape: &mut Tape<S>,
    c_i: NodeId,
    c_m: NodeId,
    tau: NodeId,
) -> Result<(NodeId, NodeId)> {
    let (n, e) = tape.value(c_i).shape();
    if tape.value(c_m).shape() != (n, e) {
        return Err(Error::InvalidArgument(format!(
            "embedding batches differ: {:?} vs {:?}",
            (n, e),
            tape.value(c_m).shape()
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty embedding batch".into()));
    }
    let u = tape.l2_normalize_rows(c_i);
    let v = tape.l2_normalize_rows(c_m);
    let scores = tape.matmul_t(u, v);
    if tape.value(scores).iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(
            "non-finite cosine scores (degenerate embeddings?)".into(),
        ));
    }
    Ok(infonce_from_scores(tape, scores, tau))
}

/// Mean squared error between a column of predictions and targets.
fn mse_graph<S: Scalar>(tape: &mut Tape<S>, pred: NodeId, targets: &[f64]) -> NodeId {
    let n = targets.len();
    let t = Tensor::from_vec(n, 1, targets.iter().map(|&v| S::of_f64(v)).collect());
    let t_in = tape.input(t);
    let diff = tape.sub(pred, t_in);
    let sq = tape.mul_elem(diff, diff);
    tape.mean_all(sq)
}

/// Angular MSE. With `circular` set, each target is shifted by the
/// multiple of 2*pi that brings the current residual into (-pi, pi]
/// before squaring (the gradient is unchanged almost everywhere, since
/// the shift is constant within a wrap cell).
pub fn angular_loss<S: Scalar>(
    tape: &mut Tape<S>,
    pred: NodeId,
    theta_star: &[f64],
    circular: bool,
) -> Result<NodeId> {
    let (rows, cols) = tape.value(pred).shape();
    if rows != theta_star.len() || cols != 1 {
        return Err(Error::InvalidArgument(format!(
            "angle predictions {rows}x{cols} vs {} targets",
            theta_star.len()
        )));
    }
    if circular {
        let adjusted: Vec<f64> = theta_star
            .iter()
            .enumerate()
            .map(|(j, &t)| {
                let p = tape.value(pred).get(j, 0).as_f64();
                p - wrap_angle(p - t)
            })
            .collect();
        Ok(mse_graph(tape, pred, &adjusted))
    } else {
        Ok(mse_graph(tape, pred, theta_star))
    }
}

/// Explorable-distance MSE.
pub fn distance_loss<S: Scalar>(
    tape: &mut Tape<S>,
    pred: NodeId,
    d_star: &[f64],
) -> Result<NodeId> {
    let (rows, cols) = tape.value(pred).shape();
    if rows != d_star.len() || cols != 1 {
        return Err(Error::InvalidArgument(format!(
            "distance predictions {rows}x{cols} vs {} targets",
            d_star.len()
        )));
    }
    Ok(mse_graph(tape, pred, d_star))
}

/// Full batch loss: encodes every image role the enabled losses need in
/// one batched pass, runs the heads, and sums the enabled terms. Image
/// features stack role-major: the record pair first and second views,
/// then source views, then target views.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamSet<S>,
    bound: &Bound,
    cfg: &ModelConfig,
    batch: &[TrainingRecord],
    opts: &LossOptions,
) -> Result<TotalLoss> {
    if !opts.switches.any() {
        return Err(Error::InvalidConfig("every loss term is disabled".into()));
    }
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let n = batch.len();
    let need_pair = opts.switches.angular || opts.switches.distance;
    let need_st = opts.switches.contrastive || opts.switches.distance;

    let mut imgs: Vec<&RgbdImage> = Vec::new();
    let mut offsets = [usize::MAX; 4]; // pair0, pair1, source, target
    if need_pair {
        offsets[0] = imgs.len();
        imgs.extend(batch.iter().map(|r| &r.pair[0]));
        offsets[1] = imgs.len();
        imgs.extend(batch.iter().map(|r| &r.pair[1]));
    }
    if need_st {
        offsets[2] = imgs.len();
        imgs.extend(batch.iter().map(|r| &r.source));
        offsets[3] = imgs.len();
        imgs.extend(batch.iter().map(|r| &r.target));
    }
    let f_all = encode_rgbd_batch(tape, params, bound, cfg, &imgs)?;
    let role = |tape: &mut Tape<S>, r: usize| {
        let idx: Vec<usize> = (0..n).map(|i| offsets[r] + i).collect();
        tape.gather_rows(f_all, &idx)
    };

    let mut parts: Vec<NodeId> = Vec::new();
    let mut l_c = 0.0;
    let mut per_sample = Vec::new();
    if opts.switches.contrastive {
        let f_s = role(tape, 2);
        let f_t = role(tape, 3);
        let c_i = pair_embed_batch(tape, params, bound, f_s, f_t, &vec![opts.no_target; n]);
        let maps: Vec<_> = batch.iter().map(|r| &r.map).collect();
        let f_m = encode_map_batch(tape, params, bound, cfg, &maps)?;
        let c_m = map_embed_batch(tape, params, bound, f_m);
        let log_tau = bound.get(params, "log_tau");
        let tau = tape.exp(log_tau);
        let (loss, per) = infonce_loss(tape, c_i, c_m, tau)?;
        l_c = tape.value(loss).item().as_f64();
        per_sample = tape.value(per).iter().map(|v| v.as_f64()).collect();
        parts.push(loss);
    }

    let mut l_theta = 0.0;
    if opts.switches.angular {
        let f0 = role(tape, 0);
        let f1 = role(tape, 1);
        let pred = predict_angle_batch(tape, params, bound, f0, f1);
        let targets: Vec<f64> = batch.iter().map(|r| r.theta_star).collect();
        let loss = angular_loss(tape, pred, &targets, opts.circular_angle)?;
        l_theta = tape.value(loss).item().as_f64();
        parts.push(loss);
    }

    let mut l_d = 0.0;
    if opts.switches.distance {
        let stacked = {
            let rs: Vec<NodeId> = (0..4).map(|r| role(tape, r)).collect();
            tape.stack_rows(&rs)
        };
        let pred = predict_distance_batch(tape, params, bound, stacked);
        let mut targets = Vec::with_capacity(4 * n);
        for slot in 0..4 {
            targets.extend(batch.iter().map(|r| r.d_stars[slot] as f64));
        }
        let loss = distance_loss(tape, pred, &targets)?;
        l_d = tape.value(loss).item().as_f64();
        parts.push(loss);
    }

    let root = parts[1..]
        .iter()
        .fold(parts[0], |acc, &p| tape.add(acc, p));
    let l_total = tape.value(root).item().as_f64();
    Ok(TotalLoss {
        root,
        losses: BatchLosses { l_c, l_theta, l_d, l_total, per_sample, n },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::PathMeta;
    use crate::geom::Point;
    use crate::mapper::SemanticMap;
    use crate::model::bind;
    use crate::sampler::ViewId;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn embed_node(tape: &mut Tape<f64>, rows: &[Vec<f64>]) -> NodeId {
        let cols = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        tape.input(Tensor::from_vec(rows.len(), cols, data))
    }

    fn tau_node(tape: &mut Tape<f64>, tau: f64) -> NodeId {
        tape.input(Tensor::scalar(tau))
    }

    /// Independent direct evaluation: normalize, cosine matrix,
    /// unstabilized softmax in both directions, mean of per-sample sums.
    fn infonce_direct(ci: &[Vec<f64>], cm: &[Vec<f64>], tau: f64) -> (f64, Vec<f64>) {
        let n = ci.len();
        let norm = |v: &[f64]| {
            let s: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let u: Vec<_> = ci.iter().map(|v| norm(v)).collect();
        let w: Vec<_> = cm.iter().map(|v| norm(v)).collect();
        let score = |j: usize, k: usize| -> f64 {
            u[j].iter().zip(&w[k]).map(|(a, b)| a * b).sum::<f64>() / tau
        };
        let mut per = Vec::with_capacity(n);
        for j in 0..n {
            let row_denom: f64 = (0..n).map(|k| score(j, k).exp()).sum();
            let col_denom: f64 = (0..n).map(|k| score(k, j).exp()).sum();
            let i_to_m = -(score(j, j).exp() / row_denom).ln();
            let m_to_i = -(score(j, j).exp() / col_denom).ln();
            per.push(i_to_m + m_to_i);
        }
        let mean = per.iter().sum::<f64>() / n as f64;
        (mean, per)
    }

    fn random_embeds(rng: &mut ChaCha8Rng, n: usize, e: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..e).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    fn synth_record(seed: u32, cfg: &ModelConfig) -> TrainingRecord {
        let mut x = (seed as u64) << 17 | 1;
        let mut next = move || {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            x
        };
        let mut floats = |n: usize, lo: f32, hi: f32| -> Vec<f32> {
            (0..n).map(|_| lo + (next() % 10_000) as f32 / 10_000.0 * (hi - lo)).collect()
        };
        let s = cfg.image_size;
        let mut img = || RgbdImage {
            width: s,
            height: s,
            rgb: floats(s * s * 3, 0.0, 1.0),
            depth: floats(s * s, 0.5, 5.0),
        };
        let pair = [img(), img()];
        let source = img();
        let target = img();
        let g = cfg.map_size;
        let map = SemanticMap {
            size: g,
            half_extent_m: 6.0,
            origin: Point::new(0.0, 0.0),
            rgb: floats(g * g * 3, 0.0, 1.0),
            kind: vec![1; g * g],
        };
        TrainingRecord {
            world_id: 0,
            record_id: seed,
            pair_ids: [ViewId(seed * 4), ViewId(seed * 4 + 1)],
            theta_star: ((seed as f64).sin() * 3.0).clamp(-3.1, 3.1),
            pair,
            source_id: ViewId(seed * 4 + 2),
            target_id: ViewId(seed * 4 + 3),
            source,
            target,
            map,
            d_stars: [0.6, 1.25, 2.5, 4.9],
            meta: Some(PathMeta { actions: 10, traveled_m: 2.0 }),
        }
    }

    #[test]
    fn cosine_scores_match_the_textbook_cases() {
        assert!((cosine_score(&[0.3f64, -0.7, 2.0], &[0.3, -0.7, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_score(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let x = [0.4f64, -1.3, 0.9];
        let y = [2.2f64, 0.5, -0.1];
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        assert!((cosine_score(&x, &y).unwrap() - cosine_score(&x2, &y).unwrap()).abs() < 1e-12);
        assert!(cosine_score(&[0.0f64, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine_score(&[1.0f64], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn infonce_matches_a_direct_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for n in [1usize, 2, 3, 7, 13] {
            let ci = random_embeds(&mut rng, n, 5);
            let cm = random_embeds(&mut rng, n, 5);
            let tau = rng.gen_range(0.05..0.5);
            let (want, want_per) = infonce_direct(&ci, &cm, tau);
            let mut tape = Tape::new();
            let a = embed_node(&mut tape, &ci);
            let b = embed_node(&mut tape, &cm);
            let t = tau_node(&mut tape, tau);
            let (loss, per) = infonce_loss(&mut tape, a, b, t).unwrap();
            let got = tape.value(loss).item();
            let rel = (got - want).abs() / want.abs().max(1e-30);
            assert!(rel < 1e-9 || (got - want).abs() < 1e-12, "n={n}: {got} vs {want}");
            for (g, w) in tape.value(per).iter().zip(&want_per) {
                assert!((g - w).abs() < 1e-9, "per-sample {g} vs {w}");
            }
            let mean_per: f64 = tape.value(per).iter().sum::<f64>() / n as f64;
            assert!((mean_per - got).abs() < 1e-12);
            assert!(got >= -1e-12, "contrastive loss must be nonnegative");
        }
    }

    #[test]
    fn single_sample_batch_has_exactly_zero_loss() {
        let mut tape = Tape::new();
        let a = embed_node(&mut tape, &[vec![0.3, -0.9, 0.5]]);
        let b = embed_node(&mut tape, &[vec![-1.0, 0.2, 0.8]]);
        let t = tau_node(&mut tape, 0.07);
        let (loss, _) = infonce_loss(&mut tape, a, b, t).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn ideal_score_matrix_hits_the_closed_form() {
        // Diagonal cosine 1, off-diagonal -1, over the usual temperature.
        let (n, tau) = (8usize, 0.07f64);
        let mut scores = Tensor::filled(n, n, -1.0f64);
        for j in 0..n {
            scores.set(j, j, 1.0);
        }
        let mut tape = Tape::new();
        let s = tape.input(scores);
        let t = tau_node(&mut tape, tau);
        let (loss, _) = infonce_from_scores(&mut tape, s, t);
        let got = tape.value(loss).item();
        let p = (1.0 / tau).exp() / ((1.0 / tau).exp() + (n - 1) as f64 * (-1.0 / tau).exp());
        let want = 2.0 * (-p.ln());
        assert!((got - want).abs() < 1e-12, "{got} vs closed form {want}");
        assert!(got.abs() < 1e-6, "near-perfect alignment should give near-zero loss");

        // The same matrix is realizable with N = 2 one-dimensional
        // embeddings; the public entry point must agree.
        let mut tape2 = Tape::new();
        let a = embed_node(&mut tape2, &[vec![2.0], vec![-0.5]]);
        let b = embed_node(&mut tape2, &[vec![0.25], vec![-3.0]]);
        let t2 = tau_node(&mut tape2, tau);
        let (loss2, _) = infonce_loss(&mut tape2, a, b, t2).unwrap();
        let p2 = (1.0 / tau).exp() / ((1.0 / tau).exp() + (-1.0 / tau).exp());
        let want2 = 2.0 * (-p2.ln());
        assert!((tape2.value(loss2).item() - want2).abs() < 1e-12);
    }

    #[test]
    fn permuting_the_batch_permutes_per_sample_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let n = 6;
        let ci = random_embeds(&mut rng, n, 4);
        let cm = random_embeds(&mut rng, n, 4);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let eval = |ci: &[Vec<f64>], cm: &[Vec<f64>]| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let a = embed_node(&mut tape, ci);
            let b = embed_node(&mut tape, cm);
            let t = tau_node(&mut tape, 0.11);
            let (loss, per) = infonce_loss(&mut tape, a, b, t).unwrap();
            (tape.value(loss).item(), tape.value(per).iter().copied().collect())
        };
        let (base, base_per) = eval(&ci, &cm);
        let cip: Vec<_> = perm.iter().map(|&j| ci[j].clone()).collect();
        let cmp: Vec<_> = perm.iter().map(|&j| cm[j].clone()).collect();
        let (permuted, permuted_per) = eval(&cip, &cmp);
        assert!((base - permuted).abs() < 1e-12);
        for (i, &j) in perm.iter().enumerate() {
            assert!((permuted_per[i] - base_per[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn raising_a_diagonal_score_never_raises_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let n = 5;
        for _ in 0..10 {
            let base: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let eval = |data: Vec<f64>| -> f64 {
                let mut tape = Tape::new();
                let s = tape.input(Tensor::from_vec(n, n, data));
                let t = tau_node(&mut tape, 0.2);
                let (loss, _) = infonce_from_scores(&mut tape, s, t);
                tape.value(loss).item()
            };
            let before = eval(base.clone());
            for j in 0..n {
                let mut bumped = base.clone();
                bumped[j * n + j] += 0.1;
                assert!(eval(bumped) <= before + 1e-12, "diagonal bump at {j} raised the loss");
            }
        }
    }

    #[test]
    fn squared_error_losses_match_hand_arithmetic() {
        let mut tape = Tape::new();
        let pred = tape.input(Tensor::from_vec(2, 1, vec![0.0f64, 1.0]));
        let l = angular_loss(&mut tape, pred, &[std::f64::consts::PI, 1.0], false).unwrap();
        let want = std::f64::consts::PI * std::f64::consts::PI / 2.0;
        assert!((tape.value(l).item() - want).abs() < 1e-12);

        let exact = tape.input(Tensor::from_vec(3, 1, vec![0.3f64, -1.0, 2.5]));
        let l0 = angular_loss(&mut tape, exact, &[0.3, -1.0, 2.5], false).unwrap();
        assert_eq!(tape.value(l0).item(), 0.0);

        let dp = tape.input(Tensor::from_vec(1, 1, vec![2.0f64]));
        let ld = distance_loss(&mut tape, dp, &[2.5]).unwrap();
        assert!((tape.value(ld).item() - 0.25).abs() < 1e-12);

        assert!(distance_loss(&mut tape, dp, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn circular_wrapping_shrinks_cross_boundary_residuals() {
        let mut tape = Tape::new();
        let pred = tape.input(Tensor::from_vec(1, 1, vec![3.0f64]));
        let plain = angular_loss(&mut tape, pred, &[-3.0], false).unwrap();
        assert!((tape.value(plain).item() - 36.0).abs() < 1e-12);
        let circular = angular_loss(&mut tape, pred, &[-3.0], true).unwrap();
        let wrapped = 6.0 - 2.0 * std::f64::consts::PI;
        assert!((tape.value(circular).item() - wrapped * wrapped).abs() < 1e-12);
    }

    #[test]
    fn total_loss_is_the_exact_sum_of_its_parts() {
        let cfg = ModelConfig::mini();
        let params = ParamSet::<f64>::init(&cfg, 21).unwrap();
        let batch: Vec<_> = (0..3).map(|i| synth_record(i, &cfg)).collect();
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params);
        let out =
            total_loss(&mut tape, &params, &bound, &cfg, &batch, &LossOptions::default()).unwrap();
        let l = &out.losses;
        assert_eq!(l.l_total, l.l_c + l.l_theta + l.l_d);
        assert!(l.l_total.is_finite() && l.l_c >= 0.0 && l.l_theta >= 0.0 && l.l_d >= 0.0);
        assert_eq!(l.per_sample.len(), 3);
        assert_eq!(l.n, 3);
    }

    #[test]
    fn disabling_every_loss_is_rejected() {
        let cfg = ModelConfig::mini();
        let params = ParamSet::<f64>::init(&cfg, 22).unwrap();
        let batch = vec![synth_record(0, &cfg)];
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params);
        let opts = LossOptions {
            switches: LossSwitches { contrastive: false, angular: false, distance: false },
            ..LossOptions::default()
        };
        assert!(total_loss(&mut tape, &params, &bound, &cfg, &batch, &opts).is_err());
    }

    #[test]
    fn contrastive_only_single_record_batch_totals_zero() {
        let cfg = ModelConfig::mini();
        let params = ParamSet::<f64>::init(&cfg, 23).unwrap();
        let batch = vec![synth_record(5, &cfg)];
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params);
        let opts = LossOptions {
            switches: LossSwitches { contrastive: true, angular: false, distance: false },
            ..LossOptions::default()
        };
        let out = total_loss(&mut tape, &params, &bound, &cfg, &batch, &opts).unwrap();
        assert_eq!(out.losses.l_total, 0.0);
        assert_eq!(out.losses.l_theta, 0.0);
        assert_eq!(out.losses.l_d, 0.0);
    }

    #[test]
    fn disabled_contrastive_loss_leaves_map_parameters_without_gradient() {
        let cfg = ModelConfig::mini();
        let params = ParamSet::<f64>::init(&cfg, 24).unwrap();
        let batch: Vec<_> = (0..2).map(|i| synth_record(i + 30, &cfg)).collect();
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params);
        let opts = LossOptions {
            switches: LossSwitches { contrastive: false, angular: true, distance: true },
            ..LossOptions::default()
        };
        let out = total_loss(&mut tape, &params, &bound, &cfg, &batch, &opts).unwrap();
        let mut grads = params.grads_like();
        tape.backward(out.root, &mut grads);
        let mut img_sq = 0.0;
        for i in 0..params.len() {
            let name = params.name(i);
            let sq = grads[i].sq_norm_f64();
            if name.starts_with("map.") || name.starts_with("head_m.") || name == "log_tau" {
                assert_eq!(sq, 0.0, "{name} received gradient without the contrastive loss");
            } else if name.starts_with("img.") {
                img_sq += sq;
            }
        }
        assert!(img_sq > 0.0, "image encoder should still receive gradient");
    }

    #[test]
    fn loss_gradients_match_finite_differences_through_the_heads() {
        let cfg = ModelConfig::mini();
        let mut params = ParamSet::<f64>::init(&cfg, 25).unwrap();
        let batch: Vec<_> = (0..2).map(|i| synth_record(i + 60, &cfg)).collect();
        let eval = |p: &ParamSet<f64>| -> f64 {
            let mut tape = Tape::new();
            let bound = bind(&mut tape, p);
            total_loss(&mut tape, p, &bound, &cfg, &batch, &LossOptions::default())
                .unwrap()
                .losses
                .l_total
        };
        let mut grads = params.grads_like();
        {
            let mut tape = Tape::new();
            let bound = bind(&mut tape, &params);
            let out = total_loss(&mut tape, &params, &bound, &cfg, &batch, &LossOptions::default())
                .unwrap();
            tape.backward(out.root, &mut grads);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut checked = 0;
        for name in
            ["log_tau", "head_i.w1", "head_m.w2", "head_th.w2", "head_d.w1", "head_th.b2"]
        {
            let idx = params.index(name);
            let len = params.tensor(idx).len();
            for _ in 0..5.min(len) {
                let k = rng.gen_range(0..len);
                let eps = 1e-5;
                let orig = params.tensor(idx).data()[k];
                params.tensor_mut(idx).data_mut()[k] = orig + eps;
                let up = eval(&params);
                params.tensor_mut(idx).data_mut()[k] = orig - eps;
                let down = eval(&params);
                params.tensor_mut(idx).data_mut()[k] = orig;
                let fd = (up - down) / (2.0 * eps);
                let an = grads[idx].data()[k];
                let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-12);
                assert!(
                    (fd - an).abs() < 1e-8 || rel < 1e-5,
                    "{name}[{k}]: fd {fd} vs analytic {an}"
                );
                checked += 1;
            }
        }
        assert!(checked >= 20);
    }
}
