//! MDP specifications and their flat-config serialization.

use sha2::{Digest, Sha256};

use super::MdpError;
use crate::kv::{FlatConfig, KvReader};

/// The 13×13 four-rooms layout; `#` is wall.
pub const FOUR_ROOMS_LAYOUT: [&str; 13] = [
    "#############",
    "#     #     #",
    "#     #     #",
    "#           #",
    "#     #     #",
    "#     #     #",
    "## ####     #",
    "#     ### ###",
    "#     #     #",
    "#     #     #",
    "#           #",
    "#     #     #",
    "#############",
];

#[derive(Clone, Debug, PartialEq)]
pub struct MdpSpec {
    pub gamma: f64,
    pub seed: u64,
    /// Episode cap used for rollouts and dataset generation.
    pub horizon: usize,
    pub kind: MdpKind,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MdpKind {
    Chain(ChainParams),
    FourRooms(FourRoomsParams),
    Explicit(ExplicitTable),
    PointMass(PointMassParams),
}

/// Linear chain: action 0 moves left, action 1 moves right; the last state is
/// a terminal goal.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainParams {
    pub n_states: usize,
    pub goal_reward: f64,
    pub step_reward: f64,
    pub slip: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FourRoomsParams {
    pub goal: (usize, usize),
    pub goal_reward: f64,
    /// Reward for acting inside each room: top-left, top-right, bottom-left,
    /// bottom-right.
    pub room_rewards: [f64; 4],
    /// Probability that the chosen action is replaced by a uniform one.
    pub slip: f64,
    /// Target of the `decoy` behavior policy.
    pub decoy: (usize, usize),
}

/// A fully explicit table. Reward is `action_reward[s][a] + arrival_reward[s']`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplicitTable {
    pub n_states: usize,
    pub n_actions: usize,
    pub transitions: Vec<Vec<Vec<(usize, f64)>>>,
    pub action_reward: Vec<Vec<f64>>,
    pub arrival_reward: Vec<f64>,
    pub terminal: Vec<bool>,
    pub start: Vec<usize>,
}

/// Point mass on the unit square with a quadrant reward field and a goal disk.
#[derive(Clone, Debug, PartialEq)]
pub struct PointMassParams {
    pub step_size: f64,
    pub drift: [f64; 2],
    pub noise_std: f64,
    pub goal: [f64; 2],
    pub goal_radius: f64,
    pub goal_reward: f64,
    /// Reward for acting in each quadrant, indexed by `(x ≥ ½) + 2·(y ≥ ½)`.
    pub region_rewards: [f64; 4],
    pub decoy: [f64; 2],
}

impl Default for FourRoomsParams {
    fn default() -> Self {
        Self {
            goal: (11, 11),
            goal_reward: 1.0,
            room_rewards: [-0.04, -0.02, -0.06, -0.01],
            slip: 0.0,
            decoy: (1, 1),
        }
    }
}

impl Default for PointMassParams {
    fn default() -> Self {
        Self {
            step_size: 0.05,
            drift: [0.0, 0.0],
            noise_std: 0.01,
            goal: [0.85, 0.85],
            goal_radius: 0.1,
            goal_reward: 1.0,
            region_rewards: [-0.02, -0.01, -0.03, -0.005],
            decoy: [0.1, 0.9],
        }
    }
}

impl MdpSpec {
    pub fn chain(n_states: usize, gamma: f64) -> Self {
        Self {
            gamma,
            seed: 0,
            horizon: 50,
            kind: MdpKind::Chain(ChainParams {
                n_states,
                goal_reward: 1.0,
                step_reward: 0.0,
                slip: 0.0,
            }),
        }
    }

    pub fn four_rooms() -> Self {
        Self {
            gamma: 0.99,
            seed: 0,
            horizon: 100,
            kind: MdpKind::FourRooms(FourRoomsParams::default()),
        }
    }

    pub fn point_mass() -> Self {
        Self {
            gamma: 0.99,
            seed: 0,
            horizon: 100,
            kind: MdpKind::PointMass(PointMassParams::default()),
        }
    }

    pub fn family(&self) -> &'static str {
        match self.kind {
            MdpKind::Chain(_) => "chain",
            MdpKind::FourRooms(_) => "four-rooms",
            MdpKind::Explicit(_) => "explicit",
            MdpKind::PointMass(_) => "point-mass",
        }
    }

    pub fn is_tabular(&self) -> bool {
        !matches!(self.kind, MdpKind::PointMass(_))
    }

    pub fn validate(&self) -> Result<(), MdpError> {
        let bad = |m: String| Err(MdpError::InvalidSpec(m));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1)", self.gamma));
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        match &self.kind {
            MdpKind::Chain(c) => {
                if c.n_states < 2 {
                    return bad("chain needs at least 2 states".into());
                }
                check_prob("slip", c.slip)?;
            }
            MdpKind::FourRooms(f) => {
                check_prob("slip", f.slip)?;
                for (name, cell) in [("goal", f.goal), ("decoy", f.decoy)] {
                    if !is_free_cell(cell) {
                        return bad(format!("{name} cell {cell:?} is not a free cell"));
                    }
                }
            }
            MdpKind::Explicit(t) => t.validate()?,
            MdpKind::PointMass(p) => {
                if !(p.step_size > 0.0) || p.noise_std < 0.0 || !(p.goal_radius > 0.0) {
                    return bad("point-mass needs step_size > 0, noise_std ≥ 0, goal_radius > 0".into());
                }
                let vals = [p.drift[0], p.drift[1], p.goal[0], p.goal[1], p.goal_reward]
                    .into_iter()
                    .chain(p.region_rewards);
                if vals.into_iter().any(|v| !v.is_finite()) {
                    return bad("point-mass parameters must be finite".into());
                }
            }
        }
        Ok(())
    }

    /// Declared reward bound B_r: every realizable reward satisfies |r| ≤ B_r.
    pub fn reward_bound(&self) -> f64 {
        match &self.kind {
            MdpKind::PointMass(p) => {
                p.region_rewards.iter().fold(0.0f64, |m, r| m.max(r.abs())) + p.goal_reward.abs()
            }
            _ => match super::TabularModel::build(self) {
                Ok(m) => m.reward_bound(),
                Err(_) => f64::INFINITY,
            },
        }
    }

    pub fn to_config(&self) -> FlatConfig {
        let mut c = FlatConfig::new();
        c.set("family", self.family());
        c.set("gamma", self.gamma);
        c.set("seed", self.seed);
        c.set("horizon", self.horizon);
        match &self.kind {
            MdpKind::Chain(p) => {
                c.set("n_states", p.n_states);
                c.set("goal_reward", p.goal_reward);
                c.set("step_reward", p.step_reward);
                c.set("slip", p.slip);
            }
            MdpKind::FourRooms(p) => {
                c.set("goal", format!("{},{}", p.goal.0, p.goal.1));
                c.set("decoy", format!("{},{}", p.decoy.0, p.decoy.1));
                c.set("goal_reward", p.goal_reward);
                c.set("room_rewards", join(&p.room_rewards));
                c.set("slip", p.slip);
            }
            MdpKind::Explicit(t) => {
                c.set("n_states", t.n_states);
                c.set("n_actions", t.n_actions);
                for s in 0..t.n_states {
                    for a in 0..t.n_actions {
                        let row: Vec<String> = t.transitions[s][a]
                            .iter()
                            .map(|(n, p)| format!("{n}:{p}"))
                            .collect();
                        c.set(&format!("p.{s}.{a}"), row.join(" "));
                        if t.action_reward[s][a] != 0.0 {
                            c.set(&format!("r.{s}.{a}"), t.action_reward[s][a]);
                        }
                    }
                    if t.arrival_reward[s] != 0.0 {
                        c.set(&format!("arrive.{s}"), t.arrival_reward[s]);
                    }
                }
                let term: Vec<usize> = (0..t.n_states).filter(|&s| t.terminal[s]).collect();
                c.set("terminal", join(&term));
                c.set("start", join(&t.start));
            }
            MdpKind::PointMass(p) => {
                c.set("step_size", p.step_size);
                c.set("drift", join(&p.drift));
                c.set("noise_std", p.noise_std);
                c.set("goal", join(&p.goal));
                c.set("decoy", join(&p.decoy));
                c.set("goal_radius", p.goal_radius);
                c.set("goal_reward", p.goal_reward);
                c.set("region_rewards", join(&p.region_rewards));
            }
        }
        c
    }

    pub fn to_config_text(&self) -> String {
        self.to_config().to_text()
    }

    /// SHA-256 of the canonical config text, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_config_text().as_bytes()))
    }

    pub fn from_config_text(text: &str) -> Result<Self, MdpError> {
        Self::from_config(&FlatConfig::parse(text)?)
    }

    /// Parses a spec; family defaults fill absent keys, unknown keys are
    /// rejected.
    pub fn from_config(cfg: &FlatConfig) -> Result<Self, MdpError> {
        let mut r = cfg.reader();
        let family: String = r.get_or("family", "four-rooms".to_string());
        let base = match family.as_str() {
            "chain" => Self::chain(4, 0.9),
            "four-rooms" => Self::four_rooms(),
            "point-mass" => Self::point_mass(),
            "explicit" => Self {
                gamma: 0.9,
                seed: 0,
                horizon: 50,
                kind: MdpKind::Explicit(ExplicitTable::empty()),
            },
            other => {
                r.error(format!("unknown env family `{other}`"));
                Self::four_rooms()
            }
        };
        let mut spec = Self {
            gamma: r.get_or("gamma", base.gamma),
            seed: r.get_or("seed", base.seed),
            horizon: r.get_or("horizon", base.horizon),
            kind: base.kind,
        };
        match &mut spec.kind {
            MdpKind::Chain(p) => {
                p.n_states = r.get_or("n_states", p.n_states);
                p.goal_reward = r.get_or("goal_reward", p.goal_reward);
                p.step_reward = r.get_or("step_reward", p.step_reward);
                p.slip = r.get_or("slip", p.slip);
            }
            MdpKind::FourRooms(p) => {
                p.goal = cell(&mut r, "goal", p.goal);
                p.decoy = cell(&mut r, "decoy", p.decoy);
                p.goal_reward = r.get_or("goal_reward", p.goal_reward);
                p.room_rewards = array(&mut r, "room_rewards", p.room_rewards);
                p.slip = r.get_or("slip", p.slip);
            }
            MdpKind::PointMass(p) => {
                p.step_size = r.get_or("step_size", p.step_size);
                p.drift = array(&mut r, "drift", p.drift);
                p.noise_std = r.get_or("noise_std", p.noise_std);
                p.goal = array(&mut r, "goal", p.goal);
                p.decoy = array(&mut r, "decoy", p.decoy);
                p.goal_radius = r.get_or("goal_radius", p.goal_radius);
                p.goal_reward = r.get_or("goal_reward", p.goal_reward);
                p.region_rewards = array(&mut r, "region_rewards", p.region_rewards);
            }
            MdpKind::Explicit(t) => *t = ExplicitTable::parse(&mut r),
        }
        r.finish()?;
        spec.validate()?;
        Ok(spec)
    }
}

impl ExplicitTable {
    fn empty() -> Self {
        Self {
            n_states: 0,
            n_actions: 0,
            transitions: vec![],
            action_reward: vec![],
            arrival_reward: vec![],
            terminal: vec![],
            start: vec![],
        }
    }

    fn parse(r: &mut KvReader<'_>) -> Self {
        let n_states: usize = r.required("n_states").unwrap_or(0);
        let n_actions: usize = r.required("n_actions").unwrap_or(0);
        let mut t = Self {
            n_states,
            n_actions,
            transitions: vec![vec![vec![]; n_actions]; n_states],
            action_reward: vec![vec![0.0; n_actions]; n_states],
            arrival_reward: vec![0.0; n_states],
            terminal: vec![false; n_states],
            start: vec![],
        };
        for (key, value) in r.with_prefix("p.") {
            match parse_sa(&key, "p.", n_states, n_actions) {
                Some((s, a)) => match parse_row(&value) {
                    Some(row) => t.transitions[s][a] = row,
                    None => r.error(format!("`{key}`: expected `state:prob` pairs, got `{value}`")),
                },
                None => r.error(format!("`{key}`: bad state/action index")),
            }
        }
        for (key, value) in r.with_prefix("r.") {
            match (parse_sa(&key, "r.", n_states, n_actions), value.parse::<f64>()) {
                (Some((s, a)), Ok(v)) => t.action_reward[s][a] = v,
                _ => r.error(format!("`{key}` = `{value}` is not a valid reward entry")),
            }
        }
        for (key, value) in r.with_prefix("arrive.") {
            match (
                key["arrive.".len()..].parse::<usize>().ok().filter(|&s| s < n_states),
                value.parse::<f64>(),
            ) {
                (Some(s), Ok(v)) => t.arrival_reward[s] = v,
                _ => r.error(format!("`{key}` = `{value}` is not a valid arrival reward")),
            }
        }
        for s in r.list_or::<usize>("terminal", vec![]) {
            if s < n_states {
                t.terminal[s] = true;
            } else {
                r.error(format!("terminal state {s} out of range"));
            }
        }
        t.start = r.list_or("start", vec![0]);
        t
    }

    pub fn validate(&self) -> Result<(), MdpError> {
        let bad = |m: String| Err(MdpError::InvalidSpec(m));
        if self.n_states == 0 || self.n_actions == 0 {
            return bad("explicit table needs n_states ≥ 1 and n_actions ≥ 1".into());
        }
        if self.transitions.len() != self.n_states
            || self.action_reward.len() != self.n_states
            || self.arrival_reward.len() != self.n_states
            || self.terminal.len() != self.n_states
        {
            return bad("explicit table arrays disagree with n_states".into());
        }
        for s in 0..self.n_states {
            if self.terminal[s] {
                continue;
            }
            if self.transitions[s].len() != self.n_actions || self.action_reward[s].len() != self.n_actions {
                return bad(format!("state {s}: expected {} actions", self.n_actions));
            }
            for a in 0..self.n_actions {
                let row = &self.transitions[s][a];
                if row.is_empty() {
                    return bad(format!("missing transition row p.{s}.{a}"));
                }
                let mut total = 0.0;
                for &(n, p) in row {
                    if n >= self.n_states || !(0.0..=1.0).contains(&p) {
                        return bad(format!("p.{s}.{a}: entry {n}:{p} out of range"));
                    }
                    total += p;
                }
                if (total - 1.0).abs() > 1e-12 {
                    return bad(format!("p.{s}.{a} sums to {total}, not 1"));
                }
            }
        }
        if self.start.is_empty() {
            return bad("no start states".into());
        }
        for &s in &self.start {
            if s >= self.n_states || self.terminal[s] {
                return bad(format!("start state {s} is out of range or terminal"));
            }
        }
        Ok(())
    }
}

pub fn is_free_cell((r, c): (usize, usize)) -> bool {
    r < 13 && c < 13 && FOUR_ROOMS_LAYOUT[r].as_bytes()[c] == b' '
}

fn check_prob(name: &str, p: f64) -> Result<(), MdpError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(MdpError::InvalidSpec(format!("{name} {p} outside [0, 1]")))
    }
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn cell(r: &mut KvReader<'_>, key: &str, default: (usize, usize)) -> (usize, usize) {
    let v: Vec<usize> = r.list_or(key, vec![default.0, default.1]);
    if v.len() == 2 {
        (v[0], v[1])
    } else {
        r.error(format!("`{key}` needs `row,col`"));
        default
    }
}

fn array<const K: usize>(r: &mut KvReader<'_>, key: &str, default: [f64; K]) -> [f64; K] {
    let v: Vec<f64> = r.list_or(key, default.to_vec());
    match v.try_into() {
        Ok(a) => a,
        Err(_) => {
            r.error(format!("`{key}` needs {K} comma-separated numbers"));
            default
        }
    }
}

fn parse_sa(key: &str, prefix: &str, n_states: usize, n_actions: usize) -> Option<(usize, usize)> {
    let (s, a) = key[prefix.len()..].split_once('.')?;
    let (s, a) = (s.parse::<usize>().ok()?, a.parse::<usize>().ok()?);
    (s < n_states && a < n_actions).then_some((s, a))
}

fn parse_row(value: &str) -> Option<Vec<(usize, f64)>> {
    value
        .split_whitespace()
        .map(|pair| {
            let (n, p) = pair.split_once(':')?;
            Some((n.parse().ok()?, p.parse().ok()?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_rooms_has_104_free_cells() {
        let free = (0..13)
            .flat_map(|r| (0..13).map(move |c| (r, c)))
            .filter(|&rc| is_free_cell(rc))
            .count();
        assert_eq!(free, 104);
    }

    #[test]
    fn config_round_trip_for_every_family() {
        let explicit = "family = explicit\nn_states = 2\nn_actions = 1\np.0.0 = 0:0.2 1:0.8\np.1.0 = 1:1\nr.0.0 = 0.5\n";
        for spec in [
            MdpSpec::chain(4, 0.9),
            MdpSpec::four_rooms(),
            MdpSpec::point_mass(),
            MdpSpec::from_config_text(explicit).unwrap(),
        ] {
            let text = spec.to_config_text();
            let back = MdpSpec::from_config_text(&text).unwrap();
            assert_eq!(back, spec, "{text}");
            assert_eq!(back.hash(), spec.hash());
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = MdpSpec::chain(4, 0.9);
        s.gamma = 1.0;
        assert!(s.validate().is_err());
        let bad_row = "family = explicit\nn_states = 2\nn_actions = 1\np.0.0 = 0:0.2 1:0.7\np.1.0 = 1:1\n";
        assert!(matches!(
            MdpSpec::from_config_text(bad_row),
            Err(MdpError::InvalidSpec(_))
        ));
        assert!(MdpSpec::from_config_text("family = chain\nn_state = 3\n").is_err());
        assert!(MdpSpec::from_config_text("family = four-rooms\ngoal = 0,0\n").is_err());
    }
}
