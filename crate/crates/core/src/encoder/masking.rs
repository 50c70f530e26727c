use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{CLS, MASK, NUM_SPECIALS, PAD, SEP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskAction {
    Mask,
    Random,
    Keep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskingConfig {
    pub rate: f64,
    pub mask_frac: f64,
    pub random_frac: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            rate: 0.15,
            mask_frac: 0.8,
            random_frac: 0.1,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.rate) || !unit.contains(&self.mask_frac) || !unit.contains(&self.random_frac) {
            return Err(Error::Config("masking rates must lie in [0, 1]".into()));
        }
        if self.mask_frac + self.random_frac > 1.0 + 1e-12 {
            return Err(Error::Config("mask_frac + random_frac must not exceed 1".into()));
        }
        Ok(())
    }
}

/// Positions chosen for prediction, in ascending order, with their actions
/// and original ids.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskingPlan {
    pub positions: Vec<usize>,
    pub actions: Vec<MaskAction>,
    pub original: Vec<u32>,
}

impl MaskingPlan {
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

fn maskable(id: u32) -> bool {
    !matches!(id, CLS | SEP | PAD | MASK)
}

/// Selects `ceil(rate * n_maskable)` positions uniformly without replacement
/// and corrupts them: `[MASK]` with probability `mask_frac`, a random
/// non-special id with probability `random_frac`, unchanged otherwise.
pub fn make_masking_plan<R: Rng + ?Sized>(
    ids: &[u32],
    cfg: &MaskingConfig,
    vocab_size: usize,
    rng: &mut R,
) -> Result<(MaskingPlan, Vec<u32>)> {
    cfg.validate()?;
    let candidates: Vec<usize> = (0..ids.len()).filter(|&i| maskable(ids[i])).collect();
    // The small offset keeps products such as 0.15 * 100 from rounding up.
    let count = ((cfg.rate * candidates.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    let count = count.min(candidates.len());
    let mut positions: Vec<usize> = index::sample(rng, candidates.len(), count)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    positions.sort_unstable();

    let mut corrupted = ids.to_vec();
    let mut actions = Vec::with_capacity(count);
    let mut original = Vec::with_capacity(count);
    for &p in &positions {
        let u: f64 = rng.random();
        let action = if u < cfg.mask_frac {
            MaskAction::Mask
        } else if u < cfg.mask_frac + cfg.random_frac && vocab_size > NUM_SPECIALS {
            MaskAction::Random
        } else {
            MaskAction::Keep
        };
        match action {
            MaskAction::Mask => corrupted[p] = MASK,
            MaskAction::Random => corrupted[p] = rng.random_range(NUM_SPECIALS as u32..vocab_size as u32),
            MaskAction::Keep => {}
        }
        actions.push(action);
        original.push(ids[p]);
    }
    Ok((
        MaskingPlan {
            positions,
            actions,
            original,
        },
        corrupted,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::UNK;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(n: usize) -> Vec<u32> {
        let mut v = vec![CLS];
        v.extend((0..n).map(|i| 5 + (i % 50) as u32));
        v.push(SEP);
        v
    }

    #[test]
    fn hundred_positions_select_fifteen() {
        let ids = seq(100);
        let (plan, _) = make_masking_plan(&ids, &MaskingConfig::default(), 60, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(plan.positions.len(), 15);
    }

    #[test]
    fn zero_rate_is_identity() {
        let ids = seq(40);
        let cfg = MaskingConfig {
            rate: 0.0,
            ..Default::default()
        };
        let (plan, corrupted) = make_masking_plan(&ids, &cfg, 60, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(plan.is_empty());
        assert_eq!(corrupted, ids);
    }

    #[test]
    fn nothing_maskable_gives_empty_plan() {
        let ids = [CLS, SEP, PAD, PAD];
        let (plan, corrupted) = make_masking_plan(&ids, &MaskingConfig::default(), 60, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(plan.is_empty());
        assert_eq!(corrupted, ids);
    }

    #[test]
    fn corrupted_ids_follow_actions() {
        let ids = seq(300);
        let (plan, corrupted) = make_masking_plan(&ids, &MaskingConfig::default(), 60, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for ((&p, a), &o) in plan.positions.iter().zip(&plan.actions).zip(&plan.original) {
            assert_eq!(ids[p], o);
            match a {
                MaskAction::Mask => assert_eq!(corrupted[p], MASK),
                MaskAction::Random => assert!(corrupted[p] >= NUM_SPECIALS as u32 && corrupted[p] < 60),
                MaskAction::Keep => assert_eq!(corrupted[p], o),
            }
        }
        for i in 0..ids.len() {
            if !plan.positions.contains(&i) {
                assert_eq!(corrupted[i], ids[i]);
            }
        }
    }

    #[test]
    fn unknown_tokens_are_maskable() {
        let ids = [CLS, UNK, SEP];
        let cfg = MaskingConfig { rate: 1.0, ..Default::default() };
        let (plan, _) = make_masking_plan(&ids, &cfg, 60, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(plan.positions, [1]);
    }

    #[test]
    fn action_histogram_matches_fractions() {
        let ids: Vec<u32> = (0..10_000).map(|i| 5 + (i % 90) as u32).collect();
        let cfg = MaskingConfig { rate: 1.0, ..Default::default() };
        let (plan, _) = make_masking_plan(&ids, &cfg, 100, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let frac = |a: MaskAction| plan.actions.iter().filter(|&&x| x == a).count() as f64 / plan.actions.len() as f64;
        assert!((frac(MaskAction::Mask) - 0.8).abs() < 0.02);
        assert!((frac(MaskAction::Random) - 0.1).abs() < 0.02);
        assert!((frac(MaskAction::Keep) - 0.1).abs() < 0.02);
    }

    #[test]
    fn invalid_rates_rejected() {
        let cfg = MaskingConfig {
            rate: 0.15,
            mask_frac: 0.8,
            random_frac: 0.3,
        };
        assert!(make_masking_plan(&seq(5), &cfg, 60, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    proptest::proptest! {
        #[test]
        fn specials_never_selected(ids in proptest::collection::vec(0u32..12, 0..60), seed in 0u64..500) {
            let (plan, _) = make_masking_plan(&ids, &MaskingConfig { rate: 0.5, ..Default::default() }, 12, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for &p in &plan.positions {
                proptest::prop_assert!(!matches!(ids[p], CLS | SEP | PAD));
            }
            let n = ids.iter().filter(|&&i| maskable(i)).count();
            proptest::prop_assert_eq!(plan.positions.len(), (n as f64 * 0.5).ceil() as usize);
        }
    }
}
