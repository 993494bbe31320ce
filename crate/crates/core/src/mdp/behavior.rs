//! Behavior policies used to generate offline datasets.
//!
//! Grammar: components joined by `+`, each `[weight*]kind[:epsilon]` with
//! kind one of `uniform`, `optimal`, `decoy`. A mixture draws one component
//! per episode. `optimal` is the DP-greedy policy on tabular envs and a
//! straight-line controller toward the goal on point-mass; `decoy` does the
//! same for a different target, which produces confidently wrong data.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use super::spec::MdpKind;
use super::{ActionSpace, Environment, MdpError, TabularModel};
use crate::oracle::{value_iteration, VI_MAX_ITERS, VI_TOL};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BehaviorKind {
    Uniform,
    Optimal,
    Decoy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BehaviorComponent {
    pub weight: f64,
    pub kind: BehaviorKind,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BehaviorSpec {
    pub components: Vec<BehaviorComponent>,
}

impl BehaviorSpec {
    pub fn uniform() -> Self {
        Self {
            components: vec![BehaviorComponent {
                weight: 1.0,
                kind: BehaviorKind::Uniform,
                epsilon: 1.0,
            }],
        }
    }

    pub fn epsilon_optimal(epsilon: f64) -> Self {
        Self {
            components: vec![BehaviorComponent {
                weight: 1.0,
                kind: BehaviorKind::Optimal,
                epsilon,
            }],
        }
    }
}

impl FromStr for BehaviorSpec {
    type Err = MdpError;

    fn from_str(text: &str) -> Result<Self, MdpError> {
        let err = || MdpError::Behavior(text.to_string());
        let mut components = Vec::new();
        for part in text.split('+').map(str::trim) {
            let (weight, rest) = match part.split_once('*') {
                Some((w, rest)) => (w.trim().parse::<f64>().map_err(|_| err())?, rest.trim()),
                None => (1.0, part),
            };
            let (kind, eps) = match rest.split_once(':') {
                Some((k, e)) => (k.trim(), Some(e.trim().parse::<f64>().map_err(|_| err())?)),
                None => (rest, None),
            };
            let kind = match kind {
                "uniform" => BehaviorKind::Uniform,
                "optimal" => BehaviorKind::Optimal,
                "decoy" => BehaviorKind::Decoy,
                _ => return Err(err()),
            };
            let epsilon = match kind {
                BehaviorKind::Uniform => 1.0,
                _ => eps.unwrap_or(0.0),
            };
            if !(weight > 0.0) || !(0.0..=1.0).contains(&epsilon) {
                return Err(err());
            }
            components.push(BehaviorComponent { weight, kind, epsilon });
        }
        if components.is_empty() {
            return Err(err());
        }
        Ok(Self { components })
    }
}

impl fmt::Display for BehaviorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.components.iter().enumerate() {
            if i > 0 {
                f.write_str("+")?;
            }
            let kind = match c.kind {
                BehaviorKind::Uniform => "uniform",
                BehaviorKind::Optimal => "optimal",
                BehaviorKind::Decoy => "decoy",
            };
            write!(f, "{}*{kind}", c.weight)?;
            if c.kind != BehaviorKind::Uniform {
                write!(f, ":{}", c.epsilon)?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Base {
    Uniform,
    Table {
        model: Arc<TabularModel>,
        actions: Arc<Vec<usize>>,
    },
    Toward([f64; 2]),
}

#[derive(Clone, Debug)]
pub struct BehaviorPolicy {
    spec: BehaviorSpec,
    space: ActionSpace,
    bases: Vec<Base>,
    cumulative: Vec<f64>,
}

impl BehaviorPolicy {
    pub fn build(spec: &BehaviorSpec, env: &Environment) -> Result<Self, MdpError> {
        let mut bases = Vec::new();
        let mut optimal_table: Option<Base> = None;
        for c in &spec.components {
            let base = match (c.kind, &env.spec().kind) {
                (BehaviorKind::Uniform, _) => Base::Uniform,
                (BehaviorKind::Optimal, MdpKind::PointMass(p)) => Base::Toward(p.goal),
                (BehaviorKind::Decoy, MdpKind::PointMass(p)) => Base::Toward(p.decoy),
                (BehaviorKind::Optimal, _) => {
                    if optimal_table.is_none() {
                        let model = env.tabular().expect("tabular env").clone();
                        optimal_table = Some(greedy_base(model, None)?);
                    }
                    optimal_table.clone().expect("just built")
                }
                (BehaviorKind::Decoy, _) => {
                    let model = env.tabular().expect("tabular env").clone();
                    let decoy = TabularModel::build_decoy(env.spec())?;
                    greedy_base(model, Some(decoy))?
                }
            };
            bases.push(base);
        }
        let total: f64 = spec.components.iter().map(|c| c.weight).sum();
        let mut acc = 0.0;
        let cumulative = spec
            .components
            .iter()
            .map(|c| {
                acc += c.weight / total;
                acc
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            space: env.action_space(),
            bases,
            cumulative,
        })
    }

    pub fn spec(&self) -> &BehaviorSpec {
        &self.spec
    }

    pub fn choose_component<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if self.bases.len() == 1 {
            return 0;
        }
        let u: f64 = rng.random();
        self.cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.bases.len() - 1)
    }

    pub fn act<R: Rng + ?Sized>(&self, component: usize, state: &[f64], rng: &mut R) -> Vec<f64> {
        let eps = self.spec.components[component].epsilon;
        let explore = match self.bases[component] {
            Base::Uniform => true,
            _ => eps > 0.0 && rng.random::<f64>() < eps,
        };
        if explore {
            return self.space.sample_uniform(rng);
        }
        match &self.bases[component] {
            Base::Uniform => unreachable!("uniform always explores"),
            Base::Table { model, actions } => {
                let s = model.decode(state).expect("state from this env");
                vec![actions[s] as f64]
            }
            Base::Toward(target) => {
                let dx = target[0] - state[0];
                let dy = target[1] - state[1];
                let norm = (dx * dx + dy * dy).sqrt();
                if norm == 0.0 {
                    vec![0.0, 0.0]
                } else {
                    vec![dx / norm, dy / norm]
                }
            }
        }
    }
}

/// Greedy DP policy; with a `planning` model, actions are planned there but
/// executed on `model`'s state indexing (the two share a layout).
fn greedy_base(model: TabularModel, planning: Option<TabularModel>) -> Result<Base, MdpError> {
    let plan = planning.as_ref().unwrap_or(&model);
    let q = value_iteration(plan, VI_TOL, VI_MAX_ITERS).map_err(|e| MdpError::Oracle(e.to_string()))?;
    Ok(Base::Table {
        actions: Arc::new(q.greedy_actions()),
        model: Arc::new(model),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grammar_round_trips() {
        let s: BehaviorSpec = "0.3*optimal:0.1 + 0.7*decoy:0.2".parse().unwrap();
        assert_eq!(s.components.len(), 2);
        assert_eq!(s.components[1].kind, BehaviorKind::Decoy);
        assert_eq!(s.to_string().parse::<BehaviorSpec>().unwrap(), s);
        assert_eq!(
            "uniform".parse::<BehaviorSpec>().unwrap(),
            BehaviorSpec::uniform()
        );
        for bad in ["", "greedy", "optimal:2", "-1*uniform", "x*uniform"] {
            assert!(bad.parse::<BehaviorSpec>().is_err(), "{bad}");
        }
    }
}
