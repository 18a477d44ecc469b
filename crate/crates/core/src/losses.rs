//! Training objectives and the evaluation metric.
//!
//! Every objective here consumes per-point class distributions.  The image
//! branch reaches point resolution through patch pooling: classifying the
//! max-, min- and avg-pooled patch features of each point yields the three
//! prediction maps of a [`PooledTriple`].  The point branch contributes one
//! map directly.  The mimicry losses ([`loss_cml`], [`loss_dscml`],
//! [`loss_std_avg`]) tie the two branches together row by row with KL
//! divergence; [`loss_seg`] supervises both branches on labeled source
//! points; [`loss_adv`] scores the domain discriminators.
//!
//! Numeric conventions: every logarithm is the clamped log of the tensor
//! module (arguments floored at 1e-8), which also realizes `0 ln 0 = 0`
//! because the zero probability multiplies the clamped logarithm.  KL inputs
//! must be probability rows; a row sum off by more than [`SIMPLEX_TOL`] is a
//! caller bug and panics.
//!
//! Gradient sidedness: [`Sidedness`] selects which branch a mimicry loss
//! trains.  `Mutual` evaluates once with both rows attached — by linearity
//! its gradient equals the sum of the two one-sided evaluations at unit
//! weights.  The one-sided modes detach the other branch's rows, so e.g.
//! under `ImageOnly` the point network's parameters receive exactly zero
//! gradient from the loss.

use std::rc::Rc;

pub use crate::geometry::Domain;
use crate::tensor::Tensor;

/// Maximum tolerated deviation of a probability row's sum from one.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// Which branch produced a prediction map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    /// Image branch (patch-pooled or pixel-sampled rows).
    Image,
    /// Point branch.
    Points,
}

/// Which branch a mimicry loss trains: `Mutual` updates both, the one-sided
/// modes detach the other branch so its parameters receive zero gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sidedness {
    Mutual,
    /// Gradient flows into the image branch only; point rows are detached.
    ImageOnly,
    /// Gradient flows into the point branch only; image rows are detached.
    PointsOnly,
}

/// Per-point class distributions of one branch on one sample: `[n, classes]`
/// probability rows plus the point indices each row describes and the tags
/// needed to catch mispaired inputs.
#[derive(Clone)]
pub struct PredictionMap {
    pub probs: Tensor,
    /// Scene point index described by each row.
    pub alignment: Rc<[u32]>,
    pub domain: Domain,
    pub modality: Modality,
}

impl PredictionMap {
    /// Wraps probability rows, checking shape, alignment length and that
    /// every row lies on the simplex (sums to one within 1e-9, entries
    /// nonnegative).
    pub fn new(probs: Tensor, alignment: Rc<[u32]>, domain: Domain, modality: Modality) -> Self {
        assert_eq!(probs.rank(), 2, "prediction map must be [n, classes]");
        assert_eq!(
            probs.shape()[0],
            alignment.len(),
            "alignment length must match the row count"
        );
        let c = probs.shape()[1];
        for (i, row) in probs.data().chunks_exact(c).enumerate() {
            let s: f64 = row.iter().sum();
            assert!(
                (s - 1.0).abs() <= 1e-9 && row.iter().all(|&v| v >= 0.0),
                "row {i} is not a probability distribution (sum {s})"
            );
        }
        PredictionMap { probs, alignment, domain, modality }
    }

    pub fn n(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.probs.shape()[1]
    }

    /// Same values, gradients stopped.
    pub fn detached(&self) -> PredictionMap {
        PredictionMap {
            probs: self.probs.detach(),
            alignment: Rc::clone(&self.alignment),
            domain: self.domain,
            modality: self.modality,
        }
    }
}

/// The three image-branch prediction maps obtained by classifying the max-,
/// min- and avg-pooled patch features of one pooling pass.  All three share
/// that pass's alignment.
pub struct PooledTriple {
    pub max_scores: PredictionMap,
    pub min_scores: PredictionMap,
    pub avg_scores: PredictionMap,
}

impl PooledTriple {
    pub fn new(max_scores: PredictionMap, min_scores: PredictionMap, avg_scores: PredictionMap) -> Self {
        for m in [&min_scores, &avg_scores] {
            assert_eq!(m.probs.shape(), max_scores.probs.shape(), "triple shape mismatch");
            assert_eq!(m.alignment, max_scores.alignment, "triple alignment mismatch");
            assert_eq!(m.domain, max_scores.domain, "triple domain mismatch");
        }
        for m in [&max_scores, &min_scores, &avg_scores] {
            assert_eq!(m.modality, Modality::Image, "pooled scores come from the image branch");
        }
        PooledTriple { max_scores, min_scores, avg_scores }
    }

    pub fn n(&self) -> usize {
        self.avg_scores.n()
    }
}

fn assert_simplex_rows(t: &Tensor, what: &str) {
    assert_eq!(t.rank(), 2, "{what} must be [n, classes]");
    let c = t.shape()[1];
    for (i, row) in t.data().chunks_exact(c).enumerate() {
        let s: f64 = row.iter().sum();
        assert!(
            (s - 1.0).abs() <= SIMPLEX_TOL && row.iter().all(|&v| v >= 0.0),
            "{what} row {i} is off the probability simplex (sum {s})"
        );
    }
}

/// Mean over rows of `sum_i p_i (ln p_i - ln q_i)` with clamped logs.
fn mean_row_kl(p: &Tensor, q: &Tensor) -> Tensor {
    assert_eq!(p.shape(), q.shape(), "KL arguments must agree in shape");
    let n = p.shape()[0];
    assert!(n >= 1, "KL of an empty prediction map");
    assert_simplex_rows(p, "KL left argument");
    assert_simplex_rows(q, "KL right argument");
    p.mul(&p.log_clamped().sub(&q.log_clamped())).sum().scale(1.0 / n as f64)
}

/// KL divergence `sum_i p_i ln(p_i / q_i)` between two single distributions
/// (`[classes]` or `[1, classes]`), returned as a scalar tensor.  Zero
/// probabilities contribute zero; both arguments must lie on the simplex.
pub fn kl_distance(p: &Tensor, q: &Tensor) -> Tensor {
    let (p, q) = match p.rank() {
        1 => (p.reshape(&[1, p.len()]), q.reshape(&[1, q.len()])),
        _ => (p.clone(), q.clone()),
    };
    assert_eq!(p.shape()[0], 1, "kl_distance compares two single distributions");
    mean_row_kl(&p, &q)
}

/// Applies the sidedness by detaching the branch that must not learn.
fn sided(image_rows: &Tensor, point_rows: &Tensor, side: Sidedness) -> (Tensor, Tensor) {
    match side {
        Sidedness::Mutual => (image_rows.clone(), point_rows.clone()),
        Sidedness::ImageOnly => (image_rows.clone(), point_rows.detach()),
        Sidedness::PointsOnly => (image_rows.detach(), point_rows.clone()),
    }
}

fn assert_paired(image: &PredictionMap, points: &PredictionMap) {
    assert_eq!(image.modality, Modality::Image, "left operand must be image-branch rows");
    assert_eq!(points.modality, Modality::Points, "right operand must be point-branch rows");
    assert_eq!(image.domain, points.domain, "mimicry pairs predictions of one domain");
    assert_eq!(image.alignment, points.alignment, "mimicry pairs rows of the same points");
    assert!(image.n() >= 1, "mimicry over an empty prediction map");
}

/// Single-position mimicry: mean KL from the pixel-sampled image rows to the
/// point rows, `(1/N) sum_n KL(image_n, points_n)`.
pub fn loss_cml(image_sampled: &PredictionMap, points: &PredictionMap, side: Sidedness) -> Tensor {
    assert_paired(image_sampled, points);
    let (a, b) = sided(&image_sampled.probs, &points.probs, side);
    mean_row_kl(&a, &b)
}

/// Patch mimicry: mean KL of the max- and min-pooled image rows against the
/// point rows, `(1/N) sum_n [KL(max_n, points_n) + KL(min_n, points_n)]`.
/// With all patch offsets zero this is the fixed-grid variant of the same
/// objective.
pub fn loss_dscml(triple: &PooledTriple, points: &PredictionMap, side: Sidedness) -> Tensor {
    assert_paired(&triple.max_scores, points);
    let p3 = match side {
        Sidedness::ImageOnly => points.probs.detach(),
        _ => points.probs.clone(),
    };
    let mx = match side {
        Sidedness::PointsOnly => triple.max_scores.probs.detach(),
        _ => triple.max_scores.probs.clone(),
    };
    let mn = match side {
        Sidedness::PointsOnly => triple.min_scores.probs.detach(),
        _ => triple.min_scores.probs.clone(),
    };
    mean_row_kl(&mx, &p3).add(&mean_row_kl(&mn, &p3))
}

/// Average-pool variant of the patch mimicry:
/// `(1/N) sum_n KL(avg_n, points_n)`.
pub fn loss_std_avg(triple: &PooledTriple, points: &PredictionMap, side: Sidedness) -> Tensor {
    assert_paired(&triple.avg_scores, points);
    let (a, b) = sided(&triple.avg_scores.probs, &points.probs, side);
    mean_row_kl(&a, &b)
}

/// Supervised segmentation loss on labeled source points: negative mean log
/// likelihood of the true class under both branches,
/// `-(1/N) sum_n [ln avg_n[y_n] + ln points_n[y_n]]`.
pub fn loss_seg(triple: &PooledTriple, points: &PredictionMap, labels: &[u16]) -> Tensor {
    assert_paired(&triple.avg_scores, points);
    assert_eq!(triple.avg_scores.domain, Domain::Source, "segmentation labels exist on source only");
    let n = triple.n();
    let c = triple.avg_scores.classes();
    assert_eq!(labels.len(), n, "one label per prediction row");
    let mut mask = vec![0.0; n * c];
    for (i, &y) in labels.iter().enumerate() {
        assert!((y as usize) < c, "label {y} out of range for {c} classes");
        mask[i * c + y as usize] = 1.0;
    }
    let mask = Tensor::constant(&[n, c], mask);
    let log_joint = triple.avg_scores.probs.log_clamped().add(&points.probs.log_clamped());
    mask.mul(&log_joint).sum().scale(-1.0 / n as f64)
}

/// Adversarial objectives from one pairing's discriminator scores on
/// source-side and target-side rows (each `[m, 1]`, in (0, 1)).
///
/// Returns `(d_loss, g_loss)`:
/// `d_loss = -mean ln(s_src) - mean ln(1 - s_trg)` trains the discriminator
/// to score source rows 1 and target rows 0; the non-saturating
/// `g_loss = -mean ln(s_trg)` trains the generator to make target rows score
/// high.  `saturating` selects the zero-sum form `g_loss = mean ln(1 -
/// s_trg)` instead.
pub fn loss_adv(scores_src: &Tensor, scores_trg: &Tensor, saturating: bool) -> (Tensor, Tensor) {
    for (s, what) in [(scores_src, "source"), (scores_trg, "target")] {
        assert!(s.len() >= 1, "no {what} scores");
        assert!(
            s.data().iter().all(|&v| (0.0..=1.0).contains(&v)),
            "{what} scores must lie in [0, 1]"
        );
    }
    let one_minus_trg = scores_trg.neg().add_scalar(1.0);
    let d_loss = scores_src
        .log_clamped()
        .mean()
        .neg()
        .sub(&one_minus_trg.log_clamped().mean());
    let g_loss = if saturating {
        one_minus_trg.log_clamped().mean()
    } else {
        scores_trg.log_clamped().mean().neg()
    };
    (d_loss, g_loss)
}

/// Index of each row's largest entry; ties resolve to the first index.
pub fn argmax_rows(probs: &Tensor) -> Vec<u16> {
    assert_eq!(probs.rank(), 2);
    let c = probs.shape()[1];
    probs
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as u16
        })
        .collect()
}

/// Segmentation quality of one prediction against ground truth.
#[derive(Clone, Debug)]
pub struct MiouReport {
    pub classes: usize,
    /// Row-major `[classes, classes]` counts, row = true class, column =
    /// predicted class.
    pub confusion: Vec<u64>,
    /// Intersection over union per class; `None` when the class appears in
    /// neither prediction nor truth.
    pub per_class: Vec<Option<f64>>,
    /// Mean IoU over the classes present in prediction or truth.
    pub miou: f64,
}

/// Computes per-class IoU `TP / (TP + FP + FN)`, their mean over the classes
/// present in prediction or truth, and the confusion matrix.
pub fn miou(pred: &[u16], truth: &[u16], classes: usize) -> MiouReport {
    assert_eq!(pred.len(), truth.len(), "prediction/truth length mismatch");
    assert!(!pred.is_empty(), "mIoU of an empty labeling");
    assert!(classes >= 1);
    let mut confusion = vec![0u64; classes * classes];
    for (&p, &t) in pred.iter().zip(truth) {
        assert!((p as usize) < classes && (t as usize) < classes, "label out of range");
        confusion[t as usize * classes + p as usize] += 1;
    }
    let mut per_class = Vec::with_capacity(classes);
    let (mut total, mut present) = (0.0, 0usize);
    for c in 0..classes {
        let tp = confusion[c * classes + c];
        let mut fp = 0u64;
        let mut fnn = 0u64;
        for o in 0..classes {
            if o != c {
                fp += confusion[o * classes + c];
                fnn += confusion[c * classes + o];
            }
        }
        let union = tp + fp + fnn;
        if union == 0 {
            per_class.push(None);
        } else {
            let iou = tp as f64 / union as f64;
            per_class.push(Some(iou));
            total += iou;
            present += 1;
        }
    }
    assert!(present >= 1, "no class present in prediction or truth");
    MiouReport { classes, confusion, per_class, miou: total / present as f64 }
}

impl MiouReport {
    /// Per-class IoU as CSV: a `class,iou` header, one row per class (empty
    /// IoU cell for absent classes), and a final mean row.
    pub fn per_class_csv(&self, class_names: &[String]) -> String {
        assert_eq!(class_names.len(), self.classes);
        let mut out = String::from("class,iou\n");
        for (name, iou) in class_names.iter().zip(&self.per_class) {
            match iou {
                Some(v) => out.push_str(&format!("{name},{v:.16e}\n")),
                None => out.push_str(&format!("{name},\n")),
            }
        }
        out.push_str(&format!("mean,{:.16e}\n", self.miou));
        out
    }

    /// Confusion matrix as CSV: header row of predicted class names, one row
    /// per true class.
    pub fn confusion_csv(&self, class_names: &[String]) -> String {
        assert_eq!(class_names.len(), self.classes);
        let mut out = String::from("true_class");
        for name in class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (t, name) in class_names.iter().enumerate() {
            out.push_str(name);
            for p in 0..self.classes {
                out.push_str(&format!(",{}", self.confusion[t * self.classes + p]));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tensor::{grad_check_default, Tape};
    use rand::Rng;

    fn align(n: usize) -> Rc<[u32]> {
        (0..n as u32).collect::<Vec<_>>().into()
    }

    /// Random interior simplex rows (entries bounded away from the log
    /// clamp).
    fn simplex_rows(rng: &mut impl Rng, n: usize, c: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n * c);
        for _ in 0..n {
            let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = raw.iter().sum();
            out.extend(raw.iter().map(|v| v / s));
        }
        out
    }

    fn map(probs: Tensor, domain: Domain, modality: Modality) -> PredictionMap {
        let n = probs.shape()[0];
        PredictionMap::new(probs, align(n), domain, modality)
    }

    fn triple_from(max: Tensor, min: Tensor, avg: Tensor, domain: Domain) -> PooledTriple {
        PooledTriple::new(
            map(max, domain, Modality::Image),
            map(min, domain, Modality::Image),
            map(avg, domain, Modality::Image),
        )
    }

    #[test]
    fn kl_of_identical_distributions_is_exactly_zero() {
        let mut rng = stream(1, "kl-self");
        for _ in 0..50 {
            let c = rng.random_range(2..8);
            let p = Tensor::constant(&[1, c], simplex_rows(&mut rng, 1, c));
            assert_eq!(kl_distance(&p, &p).data()[0], 0.0);
        }
    }

    #[test]
    fn kl_one_hot_against_uniform_is_ln_two() {
        let p = Tensor::constant(&[2], vec![1.0, 0.0]);
        let q = Tensor::constant(&[2], vec![0.5, 0.5]);
        let v = kl_distance(&p, &q).data()[0];
        assert!((v - std::f64::consts::LN_2).abs() < 1e-9, "{v}");
    }

    #[test]
    fn kl_is_nonnegative_on_random_simplex_pairs() {
        let mut rng = stream(2, "kl-nonneg");
        for _ in 0..10_000 {
            let c = rng.random_range(2..9);
            let p = Tensor::constant(&[1, c], simplex_rows(&mut rng, 1, c));
            let q = Tensor::constant(&[1, c], simplex_rows(&mut rng, 1, c));
            let v = kl_distance(&p, &q).data()[0];
            assert!(v >= -1e-9, "negative KL {v}");
        }
    }

    #[test]
    #[should_panic(expected = "simplex")]
    fn kl_rejects_rows_off_the_simplex() {
        let p = Tensor::constant(&[1, 2], vec![0.7, 0.7]);
        let q = Tensor::constant(&[1, 2], vec![0.5, 0.5]);
        kl_distance(&p, &q);
    }

    #[test]
    fn single_point_mimicry_reduces_to_kl_distance() {
        let mut rng = stream(3, "cml-single");
        let p = simplex_rows(&mut rng, 1, 5);
        let q = simplex_rows(&mut rng, 1, 5);
        let pm = map(Tensor::constant(&[1, 5], p.clone()), Domain::Target, Modality::Image);
        let qm = map(Tensor::constant(&[1, 5], q.clone()), Domain::Target, Modality::Points);
        let a = loss_cml(&pm, &qm, Sidedness::Mutual).data()[0];
        let b = kl_distance(&Tensor::constant(&[5], p), &Tensor::constant(&[5], q)).data()[0];
        assert_eq!(a, b);
    }

    #[test]
    fn two_point_mimicry_matches_hand_computation() {
        // Rows ([0.8, 0.2], [0.4, 0.6]) against ([0.5, 0.5], [0.3, 0.7]).
        let p = Tensor::constant(&[2, 2], vec![0.8, 0.2, 0.4, 0.6]);
        let q = Tensor::constant(&[2, 2], vec![0.5, 0.5, 0.3, 0.7]);
        let want = 0.5
            * ((0.8 * (0.8f64 / 0.5).ln() + 0.2 * (0.2f64 / 0.5).ln())
                + (0.4 * (0.4f64 / 0.3).ln() + 0.6 * (0.6f64 / 0.7).ln()));
        let pm = map(p, Domain::Source, Modality::Image);
        let qm = map(q, Domain::Source, Modality::Points);
        let got = loss_cml(&pm, &qm, Sidedness::Mutual).data()[0];
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn patch_mimicry_sums_max_and_min_terms() {
        let mut rng = stream(4, "dscml-sum");
        let (n, c) = (6, 4);
        let mx = Tensor::constant(&[n, c], simplex_rows(&mut rng, n, c));
        let mn = Tensor::constant(&[n, c], simplex_rows(&mut rng, n, c));
        let av = Tensor::constant(&[n, c], simplex_rows(&mut rng, n, c));
        let p3 = map(
            Tensor::constant(&[n, c], simplex_rows(&mut rng, n, c)),
            Domain::Target,
            Modality::Points,
        );
        let t = triple_from(mx.clone(), mn.clone(), av, Domain::Target);
        let whole = loss_dscml(&t, &p3, Sidedness::Mutual).data()[0];
        let parts = mean_row_kl(&mx, &p3.probs).data()[0] + mean_row_kl(&mn, &p3.probs).data()[0];
        assert!((whole - parts).abs() < 1e-15);
    }

    #[test]
    fn constant_patch_makes_avg_variant_half_the_maxmin_variant() {
        // A constant patch pools to identical max/min/avg rows.
        let mut rng = stream(5, "dscml-const");
        let (n, c) = (5, 3);
        let rows = simplex_rows(&mut rng, n, c);
        let t = triple_from(
            Tensor::constant(&[n, c], rows.clone()),
            Tensor::constant(&[n, c], rows.clone()),
            Tensor::constant(&[n, c], rows),
            Domain::Target,
        );
        let p3 = map(
            Tensor::constant(&[n, c], simplex_rows(&mut rng, n, c)),
            Domain::Target,
            Modality::Points,
        );
        let full = loss_dscml(&t, &p3, Sidedness::Mutual).data()[0];
        let avg = loss_std_avg(&t, &p3, Sidedness::Mutual).data()[0];
        assert!((avg - full / 2.0).abs() < 1e-12, "{avg} vs {}", full / 2.0);
    }

    #[test]
    fn mimicry_of_matching_predictions_is_zero() {
        let mut rng = stream(6, "dscml-zero");
        let (n, c) = (4, 6);
        let rows = simplex_rows(&mut rng, n, c);
        let t = triple_from(
            Tensor::constant(&[n, c], rows.clone()),
            Tensor::constant(&[n, c], rows.clone()),
            Tensor::constant(&[n, c], rows.clone()),
            Domain::Source,
        );
        let p3 = map(Tensor::constant(&[n, c], rows), Domain::Source, Modality::Points);
        assert_eq!(loss_dscml(&t, &p3, Sidedness::Mutual).data()[0], 0.0);
        assert_eq!(loss_std_avg(&t, &p3, Sidedness::Mutual).data()[0], 0.0);
    }

    #[test]
    fn uniform_segmentation_loss_is_twice_ln_classes() {
        let (n, c) = (7, 6);
        let uni = Tensor::constant(&[n, c], vec![1.0 / c as f64; n * c]);
        let t = triple_from(uni.clone(), uni.clone(), uni.clone(), Domain::Source);
        let p3 = map(uni, Domain::Source, Modality::Points);
        let labels: Vec<u16> = (0..n as u16).map(|i| i % c as u16).collect();
        let v = loss_seg(&t, &p3, &labels).data()[0];
        assert!((v - 2.0 * (c as f64).ln()).abs() < 1e-9, "{v}");
    }

    #[test]
    fn one_hot_image_and_uniform_points_give_ln_classes() {
        let (n, c) = (4, 5);
        let labels: Vec<u16> = vec![2, 0, 4, 1];
        let mut hot = vec![0.0; n * c];
        for (i, &y) in labels.iter().enumerate() {
            hot[i * c + y as usize] = 1.0;
        }
        let hot = Tensor::constant(&[n, c], hot);
        let uni = Tensor::constant(&[n, c], vec![1.0 / c as f64; n * c]);
        let t = triple_from(hot.clone(), hot.clone(), hot, Domain::Source);
        let p3 = map(uni, Domain::Source, Modality::Points);
        let v = loss_seg(&t, &p3, &labels).data()[0];
        assert!((v - (c as f64).ln()).abs() < 1e-9, "{v}");
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn segmentation_rejects_labels_beyond_the_class_count() {
        let (n, c) = (2, 3);
        let uni = Tensor::constant(&[n, c], vec![1.0 / c as f64; n * c]);
        let t = triple_from(uni.clone(), uni.clone(), uni.clone(), Domain::Source);
        let p3 = map(uni, Domain::Source, Modality::Points);
        loss_seg(&t, &p3, &[0, 3]);
    }

    #[test]
    fn fresh_discriminator_scores_give_two_ln_two() {
        let s = Tensor::constant(&[8, 1], vec![0.5; 8]);
        let t = Tensor::constant(&[6, 1], vec![0.5; 6]);
        let (d, g) = loss_adv(&s, &t, false);
        assert!((d.data()[0] - 2.0 * std::f64::consts::LN_2).abs() < 1e-9);
        assert!((g.data()[0] - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn generator_loss_falls_as_target_scores_rise() {
        let s = Tensor::constant(&[2, 1], vec![0.5, 0.5]);
        let lo = Tensor::constant(&[2, 1], vec![0.2, 0.3]);
        let hi = Tensor::constant(&[2, 1], vec![0.8, 0.9]);
        let (_, g_lo) = loss_adv(&s, &lo, false);
        let (_, g_hi) = loss_adv(&s, &hi, false);
        assert!(g_hi.data()[0] < g_lo.data()[0]);
        // The saturating form moves the same direction (more negative).
        let (_, g_lo) = loss_adv(&s, &lo, true);
        let (_, g_hi) = loss_adv(&s, &hi, true);
        assert!(g_hi.data()[0] < g_lo.data()[0]);
    }

    #[test]
    fn sidedness_detaches_exactly_the_untrained_branch() {
        let mut rng = stream(7, "sided");
        let (n, c) = (3, 4);
        let raw2: Vec<f64> = (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let raw3: Vec<f64> = (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect();

        let run = |side: Sidedness| {
            let tape = Tape::new();
            let l2 = tape.leaf(&[n, c], raw2.clone());
            let l3 = tape.leaf(&[n, c], raw3.clone());
            let probs2 = l2.softmax(1);
            let probs3 = l3.softmax(1);
            let t = PooledTriple::new(
                map(probs2.clone(), Domain::Target, Modality::Image),
                map(probs2.clone(), Domain::Target, Modality::Image),
                map(probs2, Domain::Target, Modality::Image),
            );
            let p3 = map(probs3, Domain::Target, Modality::Points);
            let loss = loss_dscml(&t, &p3, side);
            let grads = tape.backward(&loss).unwrap();
            (grads.wrt(&l2).map(<[f64]>::to_vec), grads.wrt(&l3).map(<[f64]>::to_vec))
        };

        let (m2, m3) = run(Sidedness::Mutual);
        let (i2, i3) = run(Sidedness::ImageOnly);
        let (p2, p3) = run(Sidedness::PointsOnly);
        assert!(i3.is_none(), "points branch must get no gradient under ImageOnly");
        assert!(p2.is_none(), "image branch must get no gradient under PointsOnly");
        // One-sided gradients agree exactly with the mutual evaluation's
        // per-branch gradients (linearity).
        assert_eq!(m2.as_deref(), i2.as_deref());
        assert_eq!(m3.as_deref(), p3.as_deref());
    }

    #[test]
    fn mimicry_losses_pass_finite_difference_checks() {
        let mut rng = stream(8, "loss-fd");
        let (n, c) = (3, 4);
        let fixed3: Vec<f64> = (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x0: Vec<f64> = (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect();

        // Through the image rows of the patch mimicry (max = min = avg here;
        // the reduction structure is exercised by the pooling tests).
        let f3 = fixed3.clone();
        let report = grad_check_default(
            &move |x: &Tensor| {
                let probs2 = x.softmax(1);
                let t = PooledTriple::new(
                    map(probs2.clone(), Domain::Target, Modality::Image),
                    map(probs2.clone(), Domain::Target, Modality::Image),
                    map(probs2, Domain::Target, Modality::Image),
                );
                let p3 =
                    map(Tensor::constant(&[n, c], f3.clone()).softmax(1), Domain::Target, Modality::Points);
                loss_dscml(&t, &p3, Sidedness::Mutual)
            },
            &[n, c],
            &x0,
        );
        assert!(report.pass(), "dscml image side: {report}");

        // Through the point rows.
        let f2 = x0.clone();
        let report = grad_check_default(
            &move |x: &Tensor| {
                let probs2 = Tensor::constant(&[n, c], f2.clone()).softmax(1);
                let t = PooledTriple::new(
                    map(probs2.clone(), Domain::Target, Modality::Image),
                    map(probs2.clone(), Domain::Target, Modality::Image),
                    map(probs2, Domain::Target, Modality::Image),
                );
                let p3 = map(x.softmax(1), Domain::Target, Modality::Points);
                loss_dscml(&t, &p3, Sidedness::Mutual)
            },
            &[n, c],
            &fixed3,
        );
        assert!(report.pass(), "dscml point side: {report}");

        // Segmentation loss through both branches at once (shared leaf).
        let labels: Vec<u16> = (0..n as u16).map(|i| i % c as u16).collect();
        let report = grad_check_default(
            &move |x: &Tensor| {
                let probs = x.softmax(1);
                let t = PooledTriple::new(
                    map(probs.clone(), Domain::Source, Modality::Image),
                    map(probs.clone(), Domain::Source, Modality::Image),
                    map(probs.clone(), Domain::Source, Modality::Image),
                );
                let p3 = map(probs, Domain::Source, Modality::Points);
                loss_seg(&t, &p3, &labels)
            },
            &[n, c],
            &x0,
        );
        assert!(report.pass(), "seg: {report}");

        // Adversarial pair through the target scores.
        let report = grad_check_default(
            &move |x: &Tensor| {
                let s = Tensor::constant(&[2, 1], vec![0.6, 0.7]);
                let trg = x.sigmoid();
                let (d, g) = loss_adv(&s, &trg, false);
                d.add(&g.scale(0.5))
            },
            &[3, 1],
            &[0.2, -0.4, 0.9],
        );
        assert!(report.pass(), "adv: {report}");
    }

    #[test]
    fn miou_matches_hand_counts() {
        // pred [0,0,1,1,2], truth [0,1,1,1,2]:
        // class 0: TP 1, FP 1, FN 0 -> 1/2; class 1: TP 2, FP 0, FN 1 -> 2/3;
        // class 2: TP 1 -> 1.
        let r = miou(&[0, 0, 1, 1, 2], &[0, 1, 1, 1, 2], 3);
        assert_eq!(r.per_class[0], Some(0.5));
        assert_eq!(r.per_class[1], Some(2.0 / 3.0));
        assert_eq!(r.per_class[2], Some(1.0));
        assert!((r.miou - (0.5 + 2.0 / 3.0 + 1.0) / 3.0).abs() < 1e-15);
        assert_eq!(r.confusion[0 * 3 + 0], 1);
        assert_eq!(r.confusion[1 * 3 + 0], 1);
        assert_eq!(r.confusion[1 * 3 + 1], 2);

        let perfect = miou(&[1, 2, 0], &[1, 2, 0], 4);
        assert_eq!(perfect.miou, 1.0);
        assert_eq!(perfect.per_class[3], None, "absent class is excluded, not zero");

        let disjoint = miou(&[0, 0], &[1, 1], 2);
        assert_eq!(disjoint.miou, 0.0);

        // Half right on one class, absent elsewhere: TP 5, FP 5 -> 0.5.
        let half = miou(&[0, 0, 0, 0, 0, 0, 0, 0, 0, 0], &[0, 0, 0, 0, 0, 1, 1, 1, 1, 1], 2);
        assert_eq!(half.per_class[0], Some(0.5));
    }

    #[test]
    fn miou_is_invariant_to_order_and_consistent_relabeling() {
        let mut rng = stream(9, "miou-perm");
        for _ in 0..50 {
            let n = rng.random_range(5..40);
            let c = rng.random_range(2..6) as u16;
            let pred: Vec<u16> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let truth: Vec<u16> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let base = miou(&pred, &truth, c as usize);

            // Shuffle the point order.
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let sp: Vec<u16> = order.iter().map(|&i| pred[i]).collect();
            let st: Vec<u16> = order.iter().map(|&i| truth[i]).collect();
            assert_eq!(miou(&sp, &st, c as usize).miou, base.miou);

            // Relabel classes by a permutation applied to both sides.
            let mut perm: Vec<u16> = (0..c).collect();
            for i in (1..c as usize).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let rp: Vec<u16> = pred.iter().map(|&v| perm[v as usize]).collect();
            let rt: Vec<u16> = truth.iter().map(|&v| perm[v as usize]).collect();
            let relabeled = miou(&rp, &rt, c as usize);
            assert!((relabeled.miou - base.miou).abs() < 1e-12);
            for k in 0..c as usize {
                assert_eq!(relabeled.per_class[perm[k] as usize], base.per_class[k]);
            }
        }
    }

    #[test]
    fn csv_reports_carry_full_precision_and_names() {
        let r = miou(&[0, 0, 1], &[0, 1, 1], 2);
        let names = vec!["background".to_string(), "box".to_string()];
        let per = r.per_class_csv(&names);
        assert!(per.starts_with("class,iou\n"));
        assert!(per.contains("background,5.0000000000000000e-1\n"), "{per}");
        assert!(per.lines().last().unwrap().starts_with("mean,"));
        let conf = r.confusion_csv(&names);
        assert_eq!(conf.lines().next().unwrap(), "true_class,background,box");
        assert!(conf.contains("background,1,1\n") || conf.contains("background,1,0\n"), "{conf}");
    }
}
