//! Even frame sampling.

/// Indices of `k` frames sampled evenly from a video of `n_frames`.
///
/// With enough frames the indices are `round(j * (n-1) / (k-1))` for
/// `j = 0..k`, hitting both endpoints; shorter videos yield every frame once,
/// without repetition.
pub fn sample_frame_indices(n_frames: usize, k: usize) -> Vec<usize> {
    assert!(n_frames >= 1 && k >= 1);
    if n_frames <= k {
        return (0..n_frames).collect();
    }
    if k == 1 {
        return vec![0];
    }
    (0..k)
        .map(|j| {
            let pos = j as f64 * (n_frames as f64 - 1.0) / (k as f64 - 1.0);
            pos.round() as usize
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sixty_three_frames_thirty_two_samples() {
        let idx = sample_frame_indices(63, 32);
        assert_eq!(idx.len(), 32);
        assert_eq!(idx[0], 0);
        assert_eq!(*idx.last().unwrap(), 62);
        let mut seen = std::collections::BTreeSet::new();
        for w in idx.windows(2) {
            assert!(w[1] > w[0], "sorted and distinct");
            let delta = w[1] - w[0];
            assert!((delta as i64 - 2).abs() <= 1, "spacing {delta}");
        }
        for i in idx {
            assert!(seen.insert(i));
        }
    }

    #[test]
    fn exact_fit_takes_all_in_order() {
        assert_eq!(sample_frame_indices(32, 32), (0..32).collect::<Vec<_>>());
    }

    #[test]
    fn short_video_rule() {
        assert_eq!(sample_frame_indices(5, 32), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn single_sample_takes_first() {
        assert_eq!(sample_frame_indices(10, 1), vec![0]);
    }

    #[test]
    fn indices_always_distinct_and_sorted() {
        for n in 1..200 {
            for k in [1, 2, 7, 32] {
                let idx = sample_frame_indices(n, k);
                assert_eq!(idx.len(), n.min(k), "n={n} k={k}");
                for w in idx.windows(2) {
                    assert!(w[1] > w[0], "n={n} k={k}");
                }
                assert!(*idx.last().unwrap() < n);
            }
        }
    }
}
