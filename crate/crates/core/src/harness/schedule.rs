/// Cosine annealing from `lr_init` to `lr_min`; `t = t_max` lands on `lr_min`
/// and `t_max + 1` restarts the cycle.
pub fn cosine_lr(t: usize, t_max: usize, lr_init: f64, lr_min: f64) -> f64 {
    if t == 0 || t_max == 0 {
        return lr_init;
    }
    let phase = ((t - 1) % t_max + 1) as f64 / t_max as f64;
    lr_min + 0.5 * (lr_init - lr_min) * (1.0 + (std::f64::consts::PI * phase).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn endpoints() {
        assert_eq!(cosine_lr(0, 50, 1e-3, 1e-5), 1e-3);
        assert!((cosine_lr(25, 50, 1e-3, 1e-5) - (1e-3 + 1e-5) / 2.0).abs() < 1e-18);
        assert!((cosine_lr(50, 50, 1e-3, 1e-5) - 1e-5).abs() < 1e-18);
        assert!(cosine_lr(51, 50, 1e-3, 1e-5) > 9.9e-4);
        assert!((cosine_lr(100, 50, 1e-3, 1e-5) - 1e-5).abs() < 1e-18);
    }

    proptest! {
        #[test]
        fn periodic_and_bounded(t in 1usize..10_000, t_max in 1usize..200) {
            let lr = cosine_lr(t, t_max, 1e-3, 1e-5);
            prop_assert!((1e-5..=1e-3).contains(&lr));
            prop_assert_eq!(lr, cosine_lr(t + t_max, t_max, 1e-3, 1e-5));
        }

        #[test]
        fn non_increasing_within_period(t in 0usize..100) {
            prop_assert!(cosine_lr(t + 1, 100, 1e-3, 1e-5) <= cosine_lr(t, 100, 1e-3, 1e-5));
        }
    }
}
