//! Cycle-count policies: the robust schedule (warm-up, incremental range,
//! uniform sampling) and its ablation variants.

use crate::rng::PortableRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Warm-up at one cycle, then the sampling range [1, current_max]
    /// widens by one every `increment_interval` epochs; the cycle count
    /// is drawn uniformly from the active range per minibatch.
    Robust,
    /// A fixed cycle count throughout training.
    Static,
    /// The incremental range without sampling: always trains at the
    /// current maximum.
    IncrementalNoSampling,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SchedulePolicy {
    pub kind: ScheduleKind,
    pub warmup_epochs: usize,
    pub increment_interval: usize,
    pub max_cycles_cap: usize,
    pub static_cycles: usize,
}

impl SchedulePolicy {
    /// The paper-scale robust schedule: 200-epoch warm-up, +1 cycle every
    /// 200 epochs, capped at 3.
    pub fn robust_paper_scale() -> Self {
        SchedulePolicy {
            kind: ScheduleKind::Robust,
            warmup_epochs: 200,
            increment_interval: 200,
            max_cycles_cap: 3,
            static_cycles: 1,
        }
    }

    pub fn robust(warmup_epochs: usize, increment_interval: usize, cap: usize) -> Self {
        SchedulePolicy {
            kind: ScheduleKind::Robust,
            warmup_epochs,
            increment_interval,
            max_cycles_cap: cap,
            static_cycles: 1,
        }
    }

    pub fn fixed(cycles: usize) -> Self {
        SchedulePolicy {
            kind: ScheduleKind::Static,
            warmup_epochs: 0,
            increment_interval: 1,
            max_cycles_cap: cycles,
            static_cycles: cycles,
        }
    }

    pub fn incremental_no_sampling(
        warmup_epochs: usize,
        increment_interval: usize,
        cap: usize,
    ) -> Self {
        SchedulePolicy {
            kind: ScheduleKind::IncrementalNoSampling,
            warmup_epochs,
            increment_interval,
            max_cycles_cap: cap,
            static_cycles: 1,
        }
    }

    /// Compact single-token description, recorded in checkpoints and
    /// manifests.
    pub fn describe(&self) -> String {
        match self.kind {
            ScheduleKind::Robust => format!(
                "robust(warmup={},interval={},cap={})",
                self.warmup_epochs, self.increment_interval, self.max_cycles_cap
            ),
            ScheduleKind::Static => format!("static({})", self.static_cycles),
            ScheduleKind::IncrementalNoSampling => format!(
                "incremental(warmup={},interval={},cap={})",
                self.warmup_epochs, self.increment_interval, self.max_cycles_cap
            ),
        }
    }
}

/// Upper end of the sampling range at `epoch`: 1 throughout warm-up, then
/// growing by one at `warmup`, `warmup + interval`, ..., capped.
pub fn current_max_cycles(epoch: usize, policy: &SchedulePolicy) -> usize {
    if policy.kind == ScheduleKind::Static {
        return policy.static_cycles;
    }
    if epoch < policy.warmup_epochs {
        return 1;
    }
    let growths = 1 + (epoch - policy.warmup_epochs) / policy.increment_interval.max(1);
    (1 + growths).min(policy.max_cycles_cap)
}

/// Draws the cycle count for one minibatch. Only the robust policy with a
/// non-degenerate range consumes randomness (one `range_usize` draw), so
/// a warm-up-phase robust run and a static(1) run share identical RNG
/// streams.
pub fn sample_cycles(epoch: usize, policy: &SchedulePolicy, rng: &mut PortableRng) -> usize {
    match policy.kind {
        ScheduleKind::Static => policy.static_cycles,
        ScheduleKind::IncrementalNoSampling => current_max_cycles(epoch, policy),
        ScheduleKind::Robust => {
            let hi = current_max_cycles(epoch, policy);
            if hi == 1 {
                1
            } else {
                rng.range_usize(1, hi)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_yields_one_cycle() {
        let p = SchedulePolicy::robust_paper_scale();
        assert_eq!(current_max_cycles(0, &p), 1);
        assert_eq!(current_max_cycles(199, &p), 1);
        let mut rng = PortableRng::seed_from_u64(1);
        for epoch in [0, 57, 199] {
            for _ in 0..100 {
                assert_eq!(sample_cycles(epoch, &p, &mut rng), 1);
            }
        }
    }

    #[test]
    fn range_grows_at_warmup_and_each_interval() {
        let p = SchedulePolicy::robust_paper_scale();
        assert_eq!(current_max_cycles(200, &p), 2);
        assert_eq!(current_max_cycles(399, &p), 2);
        assert_eq!(current_max_cycles(400, &p), 3);
        assert_eq!(current_max_cycles(450, &p), 3);
        assert_eq!(current_max_cycles(1_000_000, &p), 3);
    }

    #[test]
    fn monotone_and_capped() {
        let p = SchedulePolicy::robust(13, 7, 5);
        let mut prev = 0;
        for epoch in 0..200 {
            let m = current_max_cycles(epoch, &p);
            assert!(m >= prev, "non-decreasing");
            assert!((1..=5).contains(&m));
            prev = m;
        }
        // Cap first active after warmup + (cap - 2) full intervals, and
        // certainly by warmup + (cap - 1) intervals.
        assert_eq!(current_max_cycles(13 + 3 * 7 - 1, &p), 4);
        assert_eq!(current_max_cycles(13 + 3 * 7, &p), 5);
        assert_eq!(current_max_cycles(13 + 4 * 7, &p), 5);
    }

    #[test]
    fn static_policy_is_constant() {
        let p = SchedulePolicy::fixed(2);
        let mut rng = PortableRng::seed_from_u64(2);
        for epoch in [0, 10, 500] {
            assert_eq!(sample_cycles(epoch, &p, &mut rng), 2);
            assert_eq!(current_max_cycles(epoch, &p), 2);
        }
    }

    #[test]
    fn incremental_always_uses_current_max() {
        let p = SchedulePolicy::incremental_no_sampling(10, 10, 3);
        let mut rng = PortableRng::seed_from_u64(3);
        assert_eq!(sample_cycles(0, &p, &mut rng), 1);
        assert_eq!(sample_cycles(10, &p, &mut rng), 2);
        assert_eq!(sample_cycles(20, &p, &mut rng), 3);
        assert_eq!(sample_cycles(99, &p, &mut rng), 3);
    }

    #[test]
    fn robust_sampling_is_uniform_over_active_range() {
        let p = SchedulePolicy::robust(10, 10, 3);
        let mut rng = PortableRng::seed_from_u64(4);
        let draws = 30_000;
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            counts[sample_cycles(25, &p, &mut rng)] += 1;
        }
        assert_eq!(counts[0], 0);
        for n in 1..=3 {
            let freq = counts[n] as f64 / draws as f64;
            assert!(
                (freq - 1.0 / 3.0).abs() < 0.02,
                "frequency of {n} was {freq}"
            );
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let p = SchedulePolicy::robust(0, 5, 4);
        let seq = |seed| {
            let mut rng = PortableRng::seed_from_u64(seed);
            (0..100)
                .map(|e| sample_cycles(e, &p, &mut rng))
                .collect::<Vec<_>>()
        };
        assert_eq!(seq(9), seq(9));
        assert_ne!(seq(9), seq(10));
    }

    #[test]
    fn describe_is_compact() {
        assert_eq!(
            SchedulePolicy::robust(40, 40, 3).describe(),
            "robust(warmup=40,interval=40,cap=3)"
        );
        assert_eq!(SchedulePolicy::fixed(2).describe(), "static(2)");
    }
}
