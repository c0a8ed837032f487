//! Parameter sets of the five reference experiments. All use `sigma = 1/pi`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::model::{CouplingSpec, HamiltonianSpec, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Experiment {
    /// Aggregation with `a = 2`: one mode in the band, `T*_n = n - 1/4`.
    Aggregation,
    /// Aggregation with `a = 5`: modes `k = 1, 2` both bifurcate.
    StrongAggregation,
    /// `a = 2` with `H(p) = |p|^gamma / 2`, `gamma = 2.1`.
    SuperQuadratic,
    /// `a = 2` with `gamma = 1.9`. No acceptance bound; exploration only.
    SubQuadratic,
    /// Schelling, `K = (5, 3)`, `alpha = (0.7, 0.55)`: both populations intolerant.
    SchellingIntolerant,
    /// Schelling, `K = (8, 8)`, `alpha = (0.8, 0.4)`: the second population
    /// only reacts once the first has moved far from the constant state.
    SchellingTolerant,
}

pub const SIGMA: f64 = 1.0 / PI;

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::Aggregation,
        Experiment::StrongAggregation,
        Experiment::SuperQuadratic,
        Experiment::SubQuadratic,
        Experiment::SchellingIntolerant,
        Experiment::SchellingTolerant,
    ];

    /// The five numbered experiments; `3` is the super-quadratic one.
    pub fn from_id(id: u32) -> Option<Self> {
        Some(match id {
            1 => Experiment::Aggregation,
            2 => Experiment::StrongAggregation,
            3 => Experiment::SuperQuadratic,
            4 => Experiment::SchellingIntolerant,
            5 => Experiment::SchellingTolerant,
            _ => return None,
        })
    }

    pub fn id(self) -> u32 {
        match self {
            Experiment::Aggregation => 1,
            Experiment::StrongAggregation => 2,
            Experiment::SuperQuadratic | Experiment::SubQuadratic => 3,
            Experiment::SchellingIntolerant => 4,
            Experiment::SchellingTolerant => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Aggregation => "aggregation",
            Experiment::StrongAggregation => "strong-aggregation",
            Experiment::SuperQuadratic => "super-quadratic",
            Experiment::SubQuadratic => "sub-quadratic",
            Experiment::SchellingIntolerant => "schelling-intolerant",
            Experiment::SchellingTolerant => "schelling-tolerant",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.name() == s)
    }

    pub fn model(self) -> ModelSpec {
        let quadratic = HamiltonianSpec::default();
        match self {
            Experiment::Aggregation => ModelSpec::new(CouplingSpec::aggregation(2.0), quadratic, SIGMA),
            Experiment::StrongAggregation => {
                ModelSpec::new(CouplingSpec::aggregation(5.0), quadratic, SIGMA)
            }
            Experiment::SuperQuadratic => ModelSpec::new(
                CouplingSpec::aggregation(2.0),
                HamiltonianSpec::PowerLaw { gamma: 2.1 },
                SIGMA,
            ),
            Experiment::SubQuadratic => ModelSpec::new(
                CouplingSpec::aggregation(2.0),
                HamiltonianSpec::PowerLaw { gamma: 1.9 },
                SIGMA,
            ),
            Experiment::SchellingIntolerant => {
                ModelSpec::new(CouplingSpec::schelling([5.0, 3.0], [0.7, 0.55]), quadratic, SIGMA)
            }
            Experiment::SchellingTolerant => {
                ModelSpec::new(CouplingSpec::schelling([8.0, 8.0], [0.8, 0.4]), quadratic, SIGMA)
            }
        }
    }

    /// Model whose bifurcation points seed the branches: the quadratic
    /// companion for the power-law experiments, the model itself otherwise.
    pub fn seed_model(self) -> ModelSpec {
        let mut m = self.model();
        if !m.hamiltonian.is_quadratic() {
            m.hamiltonian = HamiltonianSpec::default();
        }
        m
    }

    /// Branches `(n, k)` traced by default.
    pub fn default_branches(self) -> Vec<(usize, usize)> {
        match self {
            Experiment::StrongAggregation => vec![(1, 2), (2, 2), (3, 2), (1, 1)],
            Experiment::SuperQuadratic | Experiment::SubQuadratic | Experiment::SchellingTolerant => {
                vec![(1, 1)]
            }
            _ => vec![(1, 1), (2, 1), (3, 1)],
        }
    }

    /// Horizon at which increasing runs stop for branch `(n, k)` born at `t_star`.
    pub fn t_limit(self, t_star: f64) -> f64 {
        match self {
            Experiment::SuperQuadratic | Experiment::SubQuadratic => 3.0,
            Experiment::SchellingTolerant => t_star + 3.0,
            _ => t_star + 2.0,
        }
    }
}
