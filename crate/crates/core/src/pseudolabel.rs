//! Maximum-probability-threshold pseudo labels for target images.

use serde::{Deserialize, Serialize};

use crate::datamodel::{argmax_class, LabelMap, ProbabilityMap, IGNORE_LABEL};

/// Upper bound on any class threshold.
pub const MAX_THRESHOLD: f64 = 0.9;

/// Per-class confidence thresholds for one probability map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdVector(Vec<f64>);

impl ThresholdVector {
    /// Wraps explicit thresholds, clamping each into `[0, 0.9]`.
    pub fn new(values: Vec<f64>) -> Self {
        Self(
            values
                .into_iter()
                .map(|v| v.clamp(0.0, MAX_THRESHOLD))
                .collect(),
        )
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, k: usize) -> f64 {
        self.0[k]
    }
}

/// For each class, the confidence at rank `floor(N/2)` (descending) among the
/// `N` pixels whose argmax is that class, capped at 0.9. Classes that win no
/// pixel get 0.9.
pub fn compute_thresholds(p: &ProbabilityMap) -> ThresholdVector {
    let winners = argmax_class(p);
    let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); p.num_classes()];
    for (pix, &k) in winners.data.iter().enumerate() {
        per_class[k as usize].push(p.prob(pix, k as usize));
    }
    let values = per_class
        .into_iter()
        .map(|mut conf| {
            if conf.is_empty() {
                return MAX_THRESHOLD;
            }
            conf.sort_by(|a, b| b.total_cmp(a));
            conf[conf.len() / 2].min(MAX_THRESHOLD)
        })
        .collect();
    ThresholdVector(values)
}

/// Keeps the argmax class of a pixel only if its confidence strictly exceeds
/// that class's threshold.
pub fn pseudo_label_with(p: &ProbabilityMap, thresholds: &ThresholdVector) -> LabelMap {
    let winners = argmax_class(p);
    let labels = winners
        .data
        .iter()
        .enumerate()
        .map(|(pix, &k)| {
            if p.prob(pix, k as usize) > thresholds.get(k as usize) {
                k
            } else {
                IGNORE_LABEL
            }
        })
        .collect();
    LabelMap::from_indices_unchecked(p.height(), p.width(), p.num_classes(), labels)
}

/// Pseudo label with thresholds recomputed from `p` itself.
pub fn generate_pseudo_label(p: &ProbabilityMap) -> LabelMap {
    pseudo_label_with(p, &compute_thresholds(p))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn column(conf: &[f64]) -> ProbabilityMap {
        let pixels: Vec<Vec<f64>> = conf.iter().map(|&c| vec![c, 1.0 - c]).collect();
        let refs: Vec<&[f64]> = pixels.iter().map(Vec::as_slice).collect();
        ProbabilityMap::from_pixels(1, conf.len(), &refs).unwrap()
    }

    #[test]
    fn threshold_examples() {
        let t = compute_thresholds(&column(&[0.95, 0.8, 0.6]));
        assert_eq!(t.get(0), 0.8);
        assert_eq!(t.get(1), MAX_THRESHOLD);
        let t = compute_thresholds(&column(&[0.95, 0.92]));
        assert_eq!(t.get(0), 0.9);
    }

    #[test]
    fn pseudo_label_examples() {
        let th = ThresholdVector::new(vec![0.6, 0.9]);
        let p = ProbabilityMap::from_pixels(1, 2, &[&[0.7, 0.3], &[0.5, 0.5]]).unwrap();
        let y = pseudo_label_with(&p, &th);
        assert_eq!(y.indices(), &[0, IGNORE_LABEL]);
        let all_high = ThresholdVector::new(vec![0.9, 0.9]);
        let p = ProbabilityMap::from_pixels(1, 2, &[&[0.9, 0.1], &[0.2, 0.8]]).unwrap();
        assert_eq!(pseudo_label_with(&p, &all_high).labeled_count(), 0);
    }

    fn random_map(rng: &mut ChaCha8Rng, k: usize) -> ProbabilityMap {
        let mut data = vec![0.0; k * 64];
        for pix in 0..64 {
            // Quantized so that ties and repeated confidences actually occur.
            let raw: Vec<f64> = (0..k).map(|_| f64::from(rng.gen_range(1u8..6))).collect();
            let s: f64 = raw.iter().sum();
            for c in 0..k {
                data[c * 64 + pix] = raw[c] / s;
            }
        }
        ProbabilityMap::new(8, 8, k, data).unwrap()
    }

    /// Straightforward per-pixel reference.
    fn brute_force(p: &ProbabilityMap) -> Vec<u8> {
        let k = p.num_classes();
        let n = p.num_pixels();
        let arg = |pix: usize| {
            let mut best = 0;
            for c in 1..k {
                if p.prob(pix, c) > p.prob(pix, best) {
                    best = c;
                }
            }
            best
        };
        let mut thresholds = vec![0.9; k];
        for (c, t) in thresholds.iter_mut().enumerate() {
            let mut conf: Vec<f64> = (0..n)
                .filter(|&i| arg(i) == c)
                .map(|i| p.prob(i, c))
                .collect();
            if conf.is_empty() {
                continue;
            }
            // Descending insertion sort.
            for i in 1..conf.len() {
                let mut j = i;
                while j > 0 && conf[j - 1] < conf[j] {
                    conf.swap(j - 1, j);
                    j -= 1;
                }
            }
            let v = conf[(0.5 * conf.len() as f64).floor() as usize];
            *t = if v > 0.9 { 0.9 } else { v };
        }
        (0..n)
            .map(|i| {
                let c = arg(i);
                if p.prob(i, c) > thresholds[c] {
                    c as u8
                } else {
                    255
                }
            })
            .collect()
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..1000 {
            let k = 2 + trial % 7;
            let p = random_map(&mut rng, k);
            assert_eq!(
                generate_pseudo_label(&p).indices(),
                brute_force(&p).as_slice(),
                "trial {trial}"
            );
        }
    }

    #[test]
    fn accepted_pixels_replay() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let p = random_map(&mut rng, 5);
            let t = compute_thresholds(&p);
            assert!(t.values().iter().all(|&v| (0.0..=0.9).contains(&v)));
            let y = generate_pseudo_label(&p);
            for pix in 0..p.num_pixels() {
                if let Some(k) = y.class_of(pix) {
                    assert!(p.prob(pix, k) > t.get(k));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn raising_a_threshold_never_adds_labels(
            seed in any::<u64>(),
            class in 0usize..4,
            bump in 0.0f64..0.5,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_map(&mut rng, 4);
            let base = compute_thresholds(&p);
            let mut raised = base.values().to_vec();
            raised[class] += bump;
            let before = pseudo_label_with(&p, &base).labeled_count();
            let after = pseudo_label_with(&p, &ThresholdVector::new(raised)).labeled_count();
            prop_assert!(after <= before);
        }
    }
}
