//! Higher-order-statistics features of the weight distribution and the
//! convolution-layer structure descriptor.

use rayon::prelude::*;

use crate::config::HashConfig;
use crate::error::{Error, Result};
use crate::tensor_store::{ModelWeights, TensorFilter};

/// Segments shorter than this give meaningless fourth moments.
pub const MIN_SEGMENT_LEN: usize = 5;

/// Fraction of largest-magnitude weights kept before feature extraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionConfig {
    retain: f64,
}

impl SelectionConfig {
    pub fn new(retain: f64) -> Result<Self> {
        if !(retain > 0.0 && retain <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "retain ratio must lie in (0, 1], got {retain}"
            )));
        }
        Ok(SelectionConfig { retain })
    }

    pub fn retain(&self) -> f64 {
        self.retain
    }

    /// The quantile level below which magnitudes are dropped, `1 - c`.
    pub fn drop_quantile(&self) -> f64 {
        1.0 - self.retain
    }
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig { retain: 1.0 / 16.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HosSequence {
    pub skews: Vec<f64>,
    pub kurts: Vec<f64>,
}

impl HosSequence {
    pub fn segments(&self) -> usize {
        self.skews.len()
    }

    /// `[s_1..s_N, k_1..k_N]`, the layout the encoder consumes.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.skews.len() * 2);
        out.extend_from_slice(&self.skews);
        out.extend_from_slice(&self.kurts);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructureSequence {
    /// `1 + K` entries: normalized layer count, then per-layer proportions.
    pub values: Vec<f64>,
    /// Number of convolution layers actually present.
    pub conv_layers: usize,
}

impl StructureSequence {
    pub fn capacity(&self) -> usize {
        self.values.len() - 1
    }
}

/// Linear-interpolation quantile over the sorted values: with
/// `r = q (n - 1)`, `k = floor(r)`, `d = r - k`, returns
/// `(1 - d) v[k] + d v[k + 1]`.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    let mut scratch = values.to_vec();
    quantile_in_place(&mut scratch, q)
}

/// As [`quantile`], reordering `values` instead of copying. Uses selection
/// rather than a full sort.
pub fn quantile_in_place(values: &mut [f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("quantile of an empty sequence".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidArgument(format!(
            "quantile level must lie in [0, 1], got {q}"
        )));
    }
    let n = values.len();
    let r = q * (n - 1) as f64;
    let k = (r.floor() as usize).min(n - 1);
    let d = r - k as f64;
    let (_, kth, upper) = values.select_nth_unstable_by(k, f64::total_cmp);
    let lo = *kth;
    if d == 0.0 || upper.is_empty() {
        return Ok(lo);
    }
    let hi = upper
        .iter()
        .copied()
        .min_by(f64::total_cmp)
        .expect("upper partition is non-empty");
    Ok((1.0 - d) * lo + d * hi)
}

/// Threshold on magnitude below which weights are dropped.
pub fn selection_threshold(weights: &[f64], cfg: &SelectionConfig) -> Result<f64> {
    let mut magnitudes: Vec<f64> = weights.iter().map(|w| w.abs()).collect();
    quantile_in_place(&mut magnitudes, cfg.drop_quantile())
}

/// Keeps the weights whose magnitude reaches the `1 - c` quantile of all
/// magnitudes, in their original order.
pub fn select_weights(weights: &[f64], cfg: &SelectionConfig) -> Result<Vec<f64>> {
    if weights.is_empty() {
        return Err(Error::EmptyWeights);
    }
    let th = selection_threshold(weights, cfg)?;
    let kept: Vec<f64> = weights.iter().copied().filter(|w| w.abs() >= th).collect();
    if kept.is_empty() {
        return Err(Error::EmptyWeights);
    }
    Ok(kept)
}

/// Contiguous index ranges splitting `total` items into `parts` pieces; the
/// first `total % parts` pieces get one extra item.
pub fn partition_ranges(total: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    assert!(parts > 0, "partition into zero parts");
    let base = total / parts;
    let extra = total % parts;
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

pub fn segment(values: &[f64], segments: usize) -> Result<Vec<&[f64]>> {
    segment_with_min(values, segments, MIN_SEGMENT_LEN)
}

pub fn segment_with_min(values: &[f64], segments: usize, min_len: usize) -> Result<Vec<&[f64]>> {
    if segments == 0 {
        return Err(Error::InvalidArgument("segment count must be positive".into()));
    }
    let need = segments.saturating_mul(min_len);
    if values.len() < need {
        return Err(Error::InsufficientWeights {
            segments,
            have: values.len(),
            need,
        });
    }
    Ok(partition_ranges(values.len(), segments)
        .into_iter()
        .map(|r| &values[r])
        .collect())
}

/// Population mean, standard deviation and the sums of cubed and fourth-power
/// standardized deviations. Accumulates strictly left to right.
fn standardized_sums(x: &[f64]) -> Result<(f64, f64)> {
    if x.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "moments need at least 2 values, got {}",
            x.len()
        )));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    // A constant segment can still leave rounding residue in `var`.
    if sd == 0.0 || sd <= f64::EPSILON * mean.abs() {
        return Err(Error::DegenerateSegment);
    }
    let (mut m3, mut m4) = (0.0, 0.0);
    for v in x {
        let z = (v - mean) / sd;
        let z2 = z * z;
        m3 += z2 * z;
        m4 += z2 * z2;
    }
    Ok((m3 / n, m4 / n))
}

/// Population skewness `(1/n) Σ ((x - μ)/σ)^3`.
pub fn skewness(x: &[f64]) -> Result<f64> {
    standardized_sums(x).map(|(s, _)| s)
}

/// Raw (non-excess) population kurtosis `(1/n) Σ ((x - μ)/σ)^4`.
pub fn kurtosis(x: &[f64]) -> Result<f64> {
    standardized_sums(x).map(|(_, k)| k)
}

/// Skewness and kurtosis in one pass over the deviations.
pub fn skewness_kurtosis(x: &[f64]) -> Result<(f64, f64)> {
    standardized_sums(x)
}

pub fn hos_sequence(model: &ModelWeights, cfg: &HashConfig) -> Result<HosSequence> {
    let flat = model.flatten(TensorFilter::KernelsOnly)?;
    let selected = select_weights(&flat, &cfg.selection()?)?;
    hos_of_selected(&selected, cfg.segments)
}

/// Segments an already selected weight sequence and computes per-segment
/// statistics.
pub fn hos_of_selected(selected: &[f64], segments: usize) -> Result<HosSequence> {
    let parts = segment(selected, segments)?;
    let stats: Vec<(f64, f64)> = parts
        .par_iter()
        .enumerate()
        .map(|(index, s)| {
            skewness_kurtosis(s).map_err(|e| match e {
                Error::DegenerateSegment => Error::DegenerateSegmentAt { index },
                other => other,
            })
        })
        .collect::<Result<_>>()?;
    let (skews, kurts) = stats.into_iter().unzip();
    Ok(HosSequence { skews, kurts })
}

pub fn structure_sequence(model: &ModelWeights, capacity: usize) -> Result<StructureSequence> {
    if capacity == 0 {
        return Err(Error::InvalidArgument("structure capacity K must be positive".into()));
    }
    let counts: Vec<usize> = model
        .tensors()
        .iter()
        .zip(model.conv_mask())
        .filter(|(_, is_conv)| *is_conv)
        .map(|(t, _)| t.meta().numel())
        .collect();
    structure_from_counts(&counts, capacity)
}

/// Structure features from per-layer parameter counts, in layer order.
pub fn structure_from_counts(counts: &[usize], capacity: usize) -> Result<StructureSequence> {
    let total: usize = counts.iter().sum();
    if counts.is_empty() || total == 0 {
        return Err(Error::NoConvLayers);
    }
    let p = counts.len();
    let mut values = Vec::with_capacity(capacity + 1);
    values.push((p as f64 / capacity as f64).min(1.0));
    values.extend(
        counts
            .iter()
            .take(capacity)
            .map(|&c| c as f64 / total as f64),
    );
    values.resize(capacity + 1, 0.0);
    Ok(StructureSequence {
        values,
        conv_layers: p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Three-pass reference: mean, then variance, then each standardized
    /// power via `powi`.
    fn naive_moments(x: &[f64]) -> (f64, f64) {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let s = x.iter().map(|v| ((v - mean) / sd).powi(3)).sum::<f64>() / n;
        let k = x.iter().map(|v| ((v - mean) / sd).powi(4)).sum::<f64>() / n;
        (s, k)
    }

    /// Quantile by full sort, straight from the interpolation formula.
    fn sorted_quantile(v: &[f64], q: f64) -> f64 {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        let r = q * (s.len() - 1) as f64;
        let k = r.floor() as usize;
        let d = r - k as f64;
        if k + 1 >= s.len() {
            s[k]
        } else {
            (1.0 - d) * s[k] + d * s[k + 1]
        }
    }

    #[test]
    fn quantile_hand_cases() {
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.5).unwrap(), 2.5);
        assert_eq!(quantile(&[4.0, 1.0, 3.0, 2.0], 0.5).unwrap(), 2.5);
        assert_eq!(quantile(&[5.0], 0.7).unwrap(), 5.0);
        assert_eq!(quantile(&[3.0, -1.0, 2.0], 0.0).unwrap(), -1.0);
        assert_eq!(quantile(&[3.0, -1.0, 2.0], 1.0).unwrap(), 3.0);
        assert!(quantile(&[], 0.5).is_err());
        assert!(quantile(&[1.0], 1.5).is_err());
        assert!(quantile(&[1.0], -0.1).is_err());
    }

    #[test]
    fn selection_examples() {
        let cfg = SelectionConfig::new(0.5).unwrap();
        assert_eq!(
            selection_threshold(&[-4.0, 1.0, -2.0, 3.0], &cfg).unwrap(),
            2.5
        );
        assert_eq!(
            select_weights(&[-4.0, 1.0, -2.0, 3.0], &cfg).unwrap(),
            vec![-4.0, 3.0]
        );
        let all = SelectionConfig::new(1.0).unwrap();
        let r = [0.3, -0.1, 2.0, -5.0];
        assert_eq!(select_weights(&r, &all).unwrap(), r.to_vec());
        let ties = [1.5, -1.5, 1.5, -1.5, 1.5];
        for c in [0.01, 1.0 / 16.0, 0.5, 1.0] {
            let cfg = SelectionConfig::new(c).unwrap();
            assert_eq!(select_weights(&ties, &cfg).unwrap(), ties.to_vec());
        }
        assert!(SelectionConfig::new(0.0).is_err());
        assert!(SelectionConfig::new(1.5).is_err());
        assert!(matches!(
            select_weights(&[], &cfg),
            Err(Error::EmptyWeights)
        ));
    }

    #[test]
    fn segmentation() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        let parts = segment(&v, 2).unwrap();
        assert_eq!(parts[0], &v[..5]);
        assert_eq!(parts[1], &v[5..]);

        let v: Vec<f64> = (1..=7).map(f64::from).collect();
        let parts = segment_with_min(&v, 2, 1).unwrap();
        assert_eq!(parts[0], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(parts[1], &[5.0, 6.0, 7.0]);

        assert!(matches!(
            segment(&v, 2),
            Err(Error::InsufficientWeights { need: 10, have: 7, .. })
        ));
        assert!(segment(&v, 0).is_err());
    }

    #[test]
    fn partition_sizes() {
        let sizes: Vec<usize> = partition_ranges(7, 3).iter().map(|r| r.len()).collect();
        assert_eq!(sizes, vec![3, 2, 2]);
        assert_eq!(partition_ranges(10, 2), vec![0..5, 5..10]);
    }

    #[test]
    fn moments_hand_case() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let (s, k) = skewness_kurtosis(&x).unwrap();
        assert!(s.abs() < 1e-15);
        assert!((k - 1.7).abs() < 1e-12, "{k}");
        assert!(matches!(
            skewness(&[2.0, 2.0, 2.0]),
            Err(Error::DegenerateSegment)
        ));
        assert!(kurtosis(&[1.0]).is_err());
        // Symmetric about 10.
        let sym = [7.0, 9.5, 10.0, 10.5, 13.0, 8.0, 12.0];
        assert!(skewness(&sym).unwrap().abs() < 1e-14);
    }

    #[test]
    fn normal_samples_have_kurtosis_three() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let x: Vec<f64> = (0..1_000_000)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let k = kurtosis(&x).unwrap();
        assert!((k - 3.0).abs() < 0.05, "{k}");
    }

    #[test]
    fn structure_examples() {
        let s = structure_from_counts(&[30, 70], 20).unwrap();
        let mut expect = vec![0.1, 0.3, 0.7];
        expect.resize(21, 0.0);
        assert_eq!(s.values.len(), 21);
        for (a, b) in s.values.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }

        let s = structure_from_counts(&[9; 20], 20).unwrap();
        assert_eq!(s.values[0], 1.0);
        assert!(s.values[1..].iter().all(|&v| (v - 0.05).abs() < 1e-15));

        let counts: Vec<usize> = (1..=25).collect();
        let s = structure_from_counts(&counts, 20).unwrap();
        assert_eq!(s.values.len(), 21);
        assert_eq!(s.values[0], 1.0);
        let total: usize = counts.iter().sum();
        assert_eq!(s.values[20], 20.0 / total as f64);
        assert!(s.values[1..].iter().all(|&v| v > 0.0));

        assert!(matches!(
            structure_from_counts(&[], 20),
            Err(Error::NoConvLayers)
        ));
    }

    proptest! {
        #[test]
        fn quantile_matches_sort(v in prop::collection::vec(-1e3f64..1e3, 1..200), q in 0.0f64..=1.0) {
            prop_assert_eq!(quantile(&v, q).unwrap(), sorted_quantile(&v, q));
        }

        #[test]
        fn quantile_monotone(v in prop::collection::vec(-1e3f64..1e3, 1..100), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantile(&v, lo).unwrap() <= quantile(&v, hi).unwrap());
        }

        #[test]
        fn segments_concatenate_to_input(v in prop::collection::vec(-1.0f64..1.0, 5..300), n in 1usize..20) {
            prop_assume!(v.len() >= 5 * n);
            let parts = segment(&v, n).unwrap();
            prop_assert_eq!(parts.len(), n);
            let joined: Vec<f64> = parts.iter().flat_map(|p| p.iter().copied()).collect();
            prop_assert_eq!(&joined, &v);
            let max = parts.iter().map(|p| p.len()).max().unwrap();
            let min = parts.iter().map(|p| p.len()).min().unwrap();
            prop_assert!(max - min <= 1);
        }

        #[test]
        fn moments_match_naive(v in prop::collection::vec(-10.0f64..10.0, 5..200)) {
            let (s, k) = skewness_kurtosis(&v).unwrap();
            let (ns, nk) = naive_moments(&v);
            prop_assert!((s - ns).abs() <= 1e-12 * ns.abs().max(1.0));
            prop_assert!((k - nk).abs() <= 1e-12 * nk.abs());
        }

        #[test]
        fn sign_flip(v in prop::collection::vec(-10.0f64..10.0, 5..100)) {
            let neg: Vec<f64> = v.iter().map(|x| -x).collect();
            let (s, k) = skewness_kurtosis(&v).unwrap();
            let (sn, kn) = skewness_kurtosis(&neg).unwrap();
            prop_assert!((s + sn).abs() <= 1e-12 * s.abs().max(1.0));
            prop_assert!((k - kn).abs() <= 1e-12 * k);
        }

        #[test]
        fn affine_invariance(v in prop::collection::vec(-10.0f64..10.0, 5..100), a in 0.01f64..100.0, b in -50.0f64..50.0) {
            let t: Vec<f64> = v.iter().map(|x| a * x + b).collect();
            let (s, k) = skewness_kurtosis(&v).unwrap();
            let (st, kt) = skewness_kurtosis(&t).unwrap();
            prop_assert!((s - st).abs() <= 1e-9 * s.abs().max(1.0));
            prop_assert!((k - kt).abs() <= 1e-9 * k);
        }

        #[test]
        fn permutation_invariance(mut v in prop::collection::vec(-10.0f64..10.0, 5..100), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let (s, k) = skewness_kurtosis(&v).unwrap();
            v.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (sp, kp) = skewness_kurtosis(&v).unwrap();
            prop_assert!((s - sp).abs() <= 1e-10 * s.abs().max(1.0));
            prop_assert!((k - kp).abs() <= 1e-10 * k);
        }

        #[test]
        fn selection_cardinality(v in prop::collection::vec(-1.0f64..1.0, 20..500), c in 0.01f64..=1.0) {
            let cfg = SelectionConfig::new(c).unwrap();
            let kept = select_weights(&v, &cfg).unwrap().len() as i64;
            let target = (c * v.len() as f64).ceil() as i64;
            prop_assert!((kept - target).abs() <= 1, "kept {} target {}", kept, target);
        }

        #[test]
        fn structure_proportions_sum_to_one(counts in prop::collection::vec(1usize..10_000, 1..=20)) {
            let s = structure_from_counts(&counts, 20).unwrap();
            let tail: f64 = s.values[1..=counts.len()].iter().sum();
            prop_assert!((tail - 1.0).abs() <= 1e-12);
            prop_assert!(s.values[counts.len() + 1..].iter().all(|&v| v == 0.0));
            prop_assert!(s.values[0] > 0.0 && s.values[0] <= 1.0);
        }
    }
}
