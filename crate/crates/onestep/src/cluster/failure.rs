//! Failure injection: which machines' replies reach the coordinator.

use onestep_core::wire::Round;
use onestep_core::MachineId;
use rand::Rng;

use crate::rng;

/// Drop probability per machine and round, drawn up front from `seed`.
///
/// By default one draw per machine decides both rounds, so a failed machine
/// loses its local estimate and its gradient/Hessian alike. With
/// `per_round_independent` each round gets its own draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FailurePolicy {
    pub rate: f64,
    pub per_round_independent: bool,
    pub seed: u64,
}

impl FailurePolicy {
    pub fn none() -> Self {
        Self {
            rate: 0.0,
            per_round_independent: false,
            seed: 0,
        }
    }

    pub fn new(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            per_round_independent: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if (0.0..1.0).contains(&self.rate) {
            Ok(())
        } else {
            Err(format!("failure rate must lie in [0, 1), got {}", self.rate))
        }
    }

    /// Pre-commits the delivery decisions for machines `1..=k`.
    pub fn schedule(&self, k: usize) -> DeliverySchedule {
        let draw = |machine: usize, round: u64| {
            let u: f64 = rng::stream(self.seed, "failure", &[machine as u64, round]).random();
            u >= self.rate
        };
        let round1: Vec<bool> = (1..=k).map(|i| draw(i, 1)).collect();
        let round2 = if self.per_round_independent {
            (1..=k).map(|i| draw(i, 2)).collect()
        } else {
            round1.clone()
        };
        DeliverySchedule { round1, round2 }
    }
}

/// Per-(machine, round) delivery decisions; `true` means delivered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliverySchedule {
    round1: Vec<bool>,
    round2: Vec<bool>,
}

impl DeliverySchedule {
    pub fn all_delivered(k: usize) -> Self {
        Self {
            round1: vec![true; k],
            round2: vec![true; k],
        }
    }

    /// Explicit masks, indexed by machine id − 1.
    pub fn from_masks(round1: Vec<bool>, round2: Vec<bool>) -> Result<Self, String> {
        if round1.len() != round2.len() {
            return Err("round masks differ in length".into());
        }
        Ok(Self { round1, round2 })
    }

    /// This schedule with `machine`'s reply in `round` dropped.
    pub fn with_drop(mut self, machine: MachineId, round: Round) -> Self {
        let i = machine.0 as usize - 1;
        match round {
            Round::One => self.round1[i] = false,
            Round::Two => self.round2[i] = false,
        }
        self
    }

    pub fn machines(&self) -> usize {
        self.round1.len()
    }

    pub fn delivers(&self, machine: MachineId, round: Round) -> bool {
        let i = machine.0 as usize - 1;
        match round {
            Round::One => self.round1[i],
            Round::Two => self.round2[i],
        }
    }

    pub fn mask(&self, round: Round) -> &[bool] {
        match round {
            Round::One => &self.round1,
            Round::Two => &self.round2,
        }
    }

    /// Number of dropped (machine, round) slots.
    pub fn drops(&self) -> usize {
        self.round1.iter().chain(&self.round2).filter(|d| !**d).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_delivers_everything() {
        let s = FailurePolicy::new(0.0, 3).schedule(16);
        assert_eq!(s, DeliverySchedule::all_delivered(16));
    }

    #[test]
    fn tied_rounds_share_the_draw() {
        let s = FailurePolicy::new(0.5, 9).schedule(64);
        assert_eq!(s.mask(Round::One), s.mask(Round::Two));
        let p = FailurePolicy {
            per_round_independent: true,
            ..FailurePolicy::new(0.5, 9)
        };
        let s2 = p.schedule(64);
        assert_eq!(s.mask(Round::One), s2.mask(Round::One));
        assert_ne!(s2.mask(Round::One), s2.mask(Round::Two));
    }

    #[test]
    fn explicit_drop() {
        let s = DeliverySchedule::all_delivered(4).with_drop(MachineId(2), Round::One);
        assert_eq!(s.mask(Round::One), &[true, false, true, true]);
        assert!(s.delivers(MachineId(2), Round::Two));
        assert_eq!(s.drops(), 1);
    }

    #[test]
    fn rates_outside_unit_interval_are_invalid() {
        assert!(FailurePolicy::new(1.0, 0).validate().is_err());
        assert!(FailurePolicy::new(-0.1, 0).validate().is_err());
    }
}
