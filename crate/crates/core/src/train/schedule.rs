//! Step learning-rate schedule.

use super::TrainConfig;

/// Milestones in effect for `cfg.epochs`: the configured ones when the run is
/// at least as long as the reference schedule, otherwise scaled by
/// `epochs / reference_epochs` (rounded).
pub fn effective_milestones(cfg: &TrainConfig) -> Vec<usize> {
    if cfg.epochs >= cfg.reference_epochs || cfg.reference_epochs == 0 {
        return cfg.milestones.clone();
    }
    cfg.milestones
        .iter()
        .map(|&m| ((m * cfg.epochs) as f64 / cfg.reference_epochs as f64).round() as usize)
        .collect()
}

/// `lr0 · gamma^k` where `k` counts milestones at or before `epoch`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let k = effective_milestones(cfg).iter().filter(|&&m| m <= epoch).count() as i32;
    // Dividing by the reciprocal keeps decimal factors exact: 1e-4 / 10 is
    // exactly 1e-5, whereas 1e-4 * 0.1 is not.
    cfg.lr0 / cfg.gamma.recip().powi(k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_schedule_values() {
        let cfg = TrainConfig { epochs: 300, ..TrainConfig::default() };
        assert_eq!(lr_at(0, &cfg), 1e-4);
        assert_eq!(lr_at(79, &cfg), 1e-4);
        assert_eq!(lr_at(80, &cfg), 1e-5);
        assert_eq!(lr_at(199, &cfg), 1e-5);
        assert_eq!(lr_at(200, &cfg), 1e-6);
        assert_eq!(lr_at(299, &cfg), 1e-6);
    }

    #[test]
    fn short_runs_scale_milestones() {
        let cfg = TrainConfig { epochs: 30, ..TrainConfig::default() };
        assert_eq!(effective_milestones(&cfg), vec![8, 20]);
        let cfg = TrainConfig { epochs: 600, ..TrainConfig::default() };
        assert_eq!(effective_milestones(&cfg), vec![80, 200]);
    }

    #[test]
    fn empty_milestones_keep_lr_constant() {
        let cfg = TrainConfig { milestones: vec![], ..TrainConfig::default() };
        assert_eq!(lr_at(10_000, &cfg), cfg.lr0);
    }
}
