/// Linear warmup followed by cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    /// Learning rate for optimizer step `step` (0-based); steps past the end return 0.
    pub fn lr_at(&self, step: u64) -> f64 {
        lr_at(step, self)
    }
}

pub fn lr_at(step: u64, s: &Schedule) -> f64 {
    if step < s.warmup_steps {
        return s.base_lr * step as f64 / s.warmup_steps as f64;
    }
    if step >= s.total_steps {
        return 0.0;
    }
    let span = (s.total_steps - s.warmup_steps) as f64;
    let progress = (step - s.warmup_steps) as f64 / span;
    s.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    const S: Schedule = Schedule { base_lr: 1.5e-4, warmup_steps: 100, total_steps: 1100 };

    #[test]
    fn anchors() {
        assert_eq!(S.lr_at(0), 0.0);
        assert_eq!(S.lr_at(100), 1.5e-4);
        assert!((S.lr_at(600) - 0.75e-4).abs() <= 1e-9);
        assert!(S.lr_at(1100).abs() < 1e-20);
        assert!((S.lr_at(50) - 0.75e-4).abs() < 1e-12);
    }

    #[test]
    fn monotone_in_both_phases() {
        for t in 0..100 {
            assert!(S.lr_at(t + 1) > S.lr_at(t));
        }
        for t in 100..1100 {
            assert!(S.lr_at(t + 1) <= S.lr_at(t));
        }
    }

    #[test]
    fn zero_warmup_starts_at_base() {
        let s = Schedule { warmup_steps: 0, ..S };
        assert_eq!(s.lr_at(0), 1.5e-4);
    }
}
