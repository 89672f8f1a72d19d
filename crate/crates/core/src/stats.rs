//! Length model `p(len | class)`, class prior `p(class)` and the hybrid
//! posterior-over-prior visual score.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::decoder::{DurationModel, Segmentation};
use crate::error::{invalid, Error, Result};
use crate::ClassId;

/// `ln Poisson(len; lambda)`, defined for every `len >= 0`.
pub fn poisson_log_pmf(len: usize, lambda: f64) -> f64 {
    let l = len as f64;
    l * lambda.ln() - lambda - ln_gamma(l + 1.0)
}

/// How a class that shows up for the first time gets its initial mean length.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnseenLengthInit {
    /// `lambda = N / T` (segments per frame).
    #[default]
    SegmentsPerFrame,
    /// `lambda = T / N` (mean frames per segment).
    FramesPerSegment,
}

/// Class-dependent Poisson length model with running-mean updates.
#[derive(Clone, Debug, PartialEq)]
pub struct LengthModel {
    lambda: Vec<Option<f64>>,
    seg_count: Vec<u64>,
    seg_len_sum: Vec<u64>,
}

impl LengthModel {
    pub fn new(num_classes: usize) -> Self {
        LengthModel {
            lambda: vec![None; num_classes],
            seg_count: vec![0; num_classes],
            seg_len_sum: vec![0; num_classes],
        }
    }

    pub(crate) fn from_parts(
        lambda: Vec<Option<f64>>,
        seg_count: Vec<u64>,
        seg_len_sum: Vec<u64>,
    ) -> Self {
        LengthModel { lambda, seg_count, seg_len_sum }
    }

    pub fn num_classes(&self) -> usize {
        self.lambda.len()
    }

    pub fn lambda(&self, class: ClassId) -> Option<f64> {
        self.lambda.get(class).copied().flatten()
    }

    pub fn seg_count(&self, class: ClassId) -> u64 {
        self.seg_count[class]
    }

    pub fn seg_len_sum(&self, class: ClassId) -> u64 {
        self.seg_len_sum[class]
    }

    pub fn set_lambda(&mut self, class: ClassId, lambda: f64) -> Result<()> {
        if class >= self.lambda.len() {
            return invalid(format!("class {class} out of range"));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return invalid(format!("mean length must be positive, got {lambda}"));
        }
        self.lambda[class] = Some(lambda);
        Ok(())
    }

    pub fn poisson_log_pmf(&self, len: usize, class: ClassId) -> Result<f64> {
        if len < 1 {
            return invalid("segment length must be at least 1");
        }
        let lambda = self.lambda(class).ok_or(Error::UninitializedClass(class))?;
        Ok(poisson_log_pmf(len, lambda))
    }

    /// Adds the segments of a decoded segmentation to the running means.
    pub fn update(&mut self, seg: &Segmentation) {
        for (&c, &len) in seg.labels.iter().zip(&seg.lengths) {
            self.seg_count[c] += 1;
            self.seg_len_sum[c] += len as u64;
            self.lambda[c] = Some(self.seg_len_sum[c] as f64 / self.seg_count[c] as f64);
        }
    }

    /// Initializes every transcript class that has not been decoded yet from
    /// the sample's frame count `frames` and segment count `segments`.
    pub fn init_unseen(
        &mut self,
        transcript: &[ClassId],
        frames: usize,
        mode: UnseenLengthInit,
    ) -> Result<()> {
        if frames == 0 || transcript.is_empty() {
            return invalid("cannot initialize lengths from an empty sample");
        }
        let (t, n) = (frames as f64, transcript.len() as f64);
        let value = match mode {
            UnseenLengthInit::SegmentsPerFrame => n / t,
            UnseenLengthInit::FramesPerSegment => t / n,
        };
        for &c in transcript {
            if c >= self.lambda.len() {
                return invalid(format!("class {c} out of range"));
            }
            if self.seg_count[c] == 0 {
                self.lambda[c] = Some(value);
            }
        }
        Ok(())
    }
}

impl DurationModel for LengthModel {
    fn log_prob(&self, len: usize, class: ClassId) -> Result<f64> {
        self.poisson_log_pmf(len, class)
    }

    fn class_table(&self, class: ClassId, max_len: usize) -> Result<Vec<f64>> {
        let lambda = self.lambda(class).ok_or(Error::UninitializedClass(class))?;
        let ln_lambda = lambda.ln();
        Ok((0..=max_len)
            .map(|l| {
                let l = l as f64;
                l * ln_lambda - lambda - ln_gamma(l + 1.0)
            })
            .collect())
    }
}

/// Frame-count class prior. Classes with no counted frames evaluate to
/// `1 / num_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrior {
    counts: Vec<u64>,
}

impl ClassPrior {
    pub fn new(num_classes: usize) -> Self {
        ClassPrior { counts: vec![0; num_classes] }
    }

    pub(crate) fn from_counts(counts: Vec<u64>) -> Self {
        ClassPrior { counts }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn update(&mut self, frame_labels: &[ClassId]) -> Result<()> {
        let c = self.counts.len();
        if let Some(&bad) = frame_labels.iter().find(|&&l| l >= c) {
            return invalid(format!("frame label {bad} out of range for {c} classes"));
        }
        for &l in frame_labels {
            self.counts[l] += 1;
        }
        Ok(())
    }

    /// Normalized frame counts; uniform when nothing has been counted.
    pub fn distribution(&self) -> Vec<f64> {
        let total = self.total();
        let c = self.counts.len();
        if total == 0 {
            return vec![1.0 / c as f64; c];
        }
        self.counts.iter().map(|&n| n as f64 / total as f64).collect()
    }

    /// Prior used for scoring: normalized count, or `1 / num_classes` for a
    /// class that has not been counted yet.
    pub fn prob(&self, class: ClassId) -> f64 {
        let n = self.counts[class];
        if n == 0 {
            1.0 / self.counts.len() as f64
        } else {
            n as f64 / self.total() as f64
        }
    }
}

/// Hybrid visual score `log p(c|x) - log p(c)`; the dropped constant does not
/// change any argmax.
pub fn log_visual_score(log_posterior: f64, prior: &ClassPrior, class: ClassId) -> f64 {
    log_posterior - prior.prob(class).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seg(labels: Vec<usize>, lengths: Vec<usize>) -> Segmentation {
        Segmentation { labels, lengths, score: 0.0 }
    }

    #[test]
    fn pmf_closed_forms() {
        let mut m = LengthModel::new(2);
        m.set_lambda(0, 1.0).unwrap();
        m.set_lambda(1, 2.0).unwrap();
        assert!((m.poisson_log_pmf(1, 0).unwrap() + 1.0).abs() < 1e-12);
        let want = (2.0 * (-2.0f64).exp()).ln();
        assert!((m.poisson_log_pmf(2, 1).unwrap() - want).abs() < 1e-12);
        assert!((want + 1.306_852_819_440_054_7).abs() < 1e-12);
    }

    #[test]
    fn pmf_errors() {
        let m = LengthModel::new(2);
        assert!(matches!(m.poisson_log_pmf(3, 0), Err(Error::UninitializedClass(0))));
        let mut m = m;
        m.set_lambda(0, 3.0).unwrap();
        assert!(matches!(m.poisson_log_pmf(0, 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn pmf_sums_to_one_by_direct_summation() {
        // oracle: iterative pmf recurrence p(l) = p(l-1) * lambda / l
        let lambda = 5.0f64;
        let mut p = (-lambda).exp();
        let mut direct = p;
        for l in 1..=200 {
            p *= lambda / l as f64;
            direct += p;
            assert!((poisson_log_pmf(l, lambda).exp() - p).abs() < 1e-14);
        }
        let total: f64 = (0..=200).map(|l| poisson_log_pmf(l, lambda).exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!((direct - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pmf_normalized_over_wide_support() {
        for &lambda in &[0.05, 0.5, 1.0, 7.3, 42.0, 350.0, 1999.0, 3000.0] {
            let upper = (lambda + 40.0 * f64::sqrt(lambda)).ceil() as usize;
            let total: f64 = (0..=upper).map(|l| poisson_log_pmf(l, lambda).exp()).sum();
            assert!((total - 1.0).abs() < 1e-9, "lambda={lambda} total={total}");
        }
    }

    #[test]
    fn class_table_matches_pointwise() {
        let mut m = LengthModel::new(1);
        m.set_lambda(0, 12.5).unwrap();
        let table = m.class_table(0, 50).unwrap();
        for (l, &v) in table.iter().enumerate().skip(1) {
            assert!((v - m.poisson_log_pmf(l, 0).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn running_mean_updates() {
        let mut m = LengthModel::new(2);
        m.update(&seg(vec![0], vec![10]));
        assert_eq!(m.lambda(0), Some(10.0));
        m.update(&seg(vec![0], vec![20]));
        assert_eq!(m.lambda(0), Some(15.0));
        assert_eq!(m.lambda(1), None);
    }

    #[test]
    fn running_mean_matches_independent_accumulator() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = 4;
        let mut m = LengthModel::new(c);
        let mut all: Vec<Vec<usize>> = vec![Vec::new(); c];
        for _ in 0..1000 {
            let n = rng.random_range(1..6);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let lengths: Vec<usize> = (0..n).map(|_| rng.random_range(1..40)).collect();
            for (&l, &len) in labels.iter().zip(&lengths) {
                all[l].push(len);
            }
            m.update(&seg(labels, lengths));
        }
        for (cls, lens) in all.iter().enumerate() {
            let mean = lens.iter().sum::<usize>() as f64 / lens.len() as f64;
            assert!((m.lambda(cls).unwrap() - mean).abs() < 1e-9);
        }
    }

    #[test]
    fn unseen_class_init() {
        let mut m = LengthModel::new(3);
        m.init_unseen(&[0, 1, 0, 1, 0], 100, UnseenLengthInit::SegmentsPerFrame).unwrap();
        assert_eq!(m.lambda(0), Some(0.05));
        assert_eq!(m.lambda(1), Some(0.05));
        assert_eq!(m.lambda(2), None);

        m.update(&seg(vec![0], vec![7]));
        m.init_unseen(&[0, 2], 40, UnseenLengthInit::FramesPerSegment).unwrap();
        assert_eq!(m.lambda(0), Some(7.0));
        assert_eq!(m.lambda(2), Some(20.0));
    }

    #[test]
    fn prior_normalization_and_fallback() {
        let mut p = ClassPrior::new(4);
        assert_eq!(p.prob(2), 0.25);
        p.update(&[0, 0, 0, 1]).unwrap();
        assert_eq!(p.prob(0), 0.75);
        assert_eq!(p.prob(1), 0.25);
        assert_eq!(p.prob(2), 0.25);
        let d = p.distribution();
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.update(&[4]).is_err());
        assert_eq!(p.total(), 4);
    }

    #[test]
    fn prior_matches_histogram() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = 5;
        let mut p = ClassPrior::new(c);
        let mut hist = vec![0u64; c];
        for _ in 0..50 {
            let t = rng.random_range(1..200);
            let labels: Vec<usize> = (0..t).map(|_| rng.random_range(0..c)).collect();
            for &l in &labels {
                hist[l] += 1;
            }
            p.update(&labels).unwrap();
        }
        assert_eq!(p.counts(), hist.as_slice());
    }

    #[test]
    fn hybrid_scores() {
        let mut p = ClassPrior::new(4);
        p.update(&[0, 1, 2, 3]).unwrap();
        assert!((log_visual_score(0.5f64.ln(), &p, 0) - 2f64.ln()).abs() < 1e-12);
        assert!(log_visual_score(0.25f64.ln(), &p, 3).abs() < 1e-12);

        // posterior {0.5, 0.5}, prior {0.9, 0.1}: the rarer class wins
        let mut skewed = ClassPrior::new(2);
        skewed.update(&[vec![0; 9], vec![1]].concat()).unwrap();
        let s0 = log_visual_score(0.5f64.ln(), &skewed, 0);
        let s1 = log_visual_score(0.5f64.ln(), &skewed, 1);
        assert!(s1 > s0);
    }

    proptest! {
        #[test]
        fn lambda_is_order_invariant(segs in prop::collection::vec((0usize..3, 1usize..50), 1..40)) {
            let mut fwd = LengthModel::new(3);
            let mut rev = LengthModel::new(3);
            for &(c, l) in &segs {
                fwd.update(&seg(vec![c], vec![l]));
            }
            for &(c, l) in segs.iter().rev() {
                rev.update(&seg(vec![c], vec![l]));
            }
            prop_assert_eq!(fwd, rev);
        }

        #[test]
        fn prior_updates_commute(a in prop::collection::vec(0usize..4, 0..30),
                                 b in prop::collection::vec(0usize..4, 0..30)) {
            let mut ab = ClassPrior::new(4);
            ab.update(&a).unwrap();
            ab.update(&b).unwrap();
            let mut ba = ClassPrior::new(4);
            ba.update(&b).unwrap();
            ba.update(&a).unwrap();
            prop_assert_eq!(&ab, &ba);
            let s: f64 = ab.distribution().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }

        #[test]
        fn uniform_prior_keeps_posterior_argmax(post in prop::collection::vec(0.01f64..1.0, 2..6)) {
            let total: f64 = post.iter().sum();
            let c = post.len();
            let prior = ClassPrior::new(c);
            let argmax = |v: &[f64]| v.iter().enumerate()
                .fold(0, |best, (i, &x)| if x > v[best] { i } else { best });
            let logs: Vec<f64> = post.iter().map(|p| (p / total).ln()).collect();
            let hybrid: Vec<f64> = (0..c).map(|k| log_visual_score(logs[k], &prior, k)).collect();
            prop_assert_eq!(argmax(&logs), argmax(&hybrid));
        }
    }
}
