//! Offline transition datasets and their JSONL format.

use std::io::{BufRead, Write};
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BehaviorPolicy, Environment, MdpError};
use crate::rng::{substream, streams};

/// Returns-to-go are undiscounted.
pub const RTG_GAMMA: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub episode: usize,
    pub step: usize,
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    /// Action taken at `s_next`; `None` at the end of an episode.
    pub a_next: Option<Vec<f64>>,
    pub terminal: bool,
    pub rtg: f64,
    pub rtg_next: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub env_spec_hash: String,
    pub gamma: f64,
    pub seed: u64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionDataset {
    pub header: DatasetHeader,
    pub transitions: Vec<Transition>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// `(s, a, r)` triples.
    pub steps: Vec<(Vec<f64>, Vec<f64>, f64)>,
    pub terminal: bool,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrajectoryBatch {
    pub episodes: Vec<Episode>,
}

/// rtg_t = Σ_{i≥t} γ^{i−t} r_i, accumulated backwards so that
/// rtg_t = r_t + γ·rtg_{t+1} holds exactly.
pub fn compute_rtg(rewards: &[f64], gamma_rtg: f64) -> Result<Vec<f64>, MdpError> {
    if rewards.is_empty() {
        return Err(MdpError::EmptyEpisode);
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma_rtg * acc;
        out[t] = acc;
    }
    Ok(out)
}

impl TransitionDataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Index ranges of consecutive transitions sharing an episode id.
    pub fn episode_ranges(&self) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.transitions.len() {
            if i == self.transitions.len() || self.transitions[i].episode != self.transitions[start].episode {
                out.push(start..i);
                start = i;
            }
        }
        if self.transitions.is_empty() {
            out.clear();
        }
        out
    }

    pub fn trajectories(&self) -> TrajectoryBatch {
        TrajectoryBatch {
            episodes: self
                .episode_ranges()
                .into_iter()
                .map(|r| Episode {
                    terminal: self.transitions[r.end - 1].terminal,
                    steps: self.transitions[r]
                        .iter()
                        .map(|t| (t.s.clone(), t.a.clone(), t.r))
                        .collect(),
                })
                .collect(),
        }
    }

    /// Checks continuity, RTG recursion and a_next bookkeeping.
    pub fn validate(&self) -> Result<(), MdpError> {
        let bad = |m: String| Err(MdpError::Format(m));
        if self.header.count != self.transitions.len() {
            return bad(format!(
                "header count {} but {} transitions",
                self.header.count,
                self.transitions.len()
            ));
        }
        for range in self.episode_ranges() {
            let ep = &self.transitions[range];
            for (k, t) in ep.iter().enumerate() {
                if t.step != k {
                    return bad(format!("episode {} step {} out of order", t.episode, t.step));
                }
                if t.rtg != t.r + RTG_GAMMA * t.rtg_next {
                    return bad(format!("episode {} step {}: RTG recursion broken", t.episode, t.step));
                }
                if let Some(next) = ep.get(k + 1) {
                    if t.s_next != next.s || t.a_next.as_ref() != Some(&next.a) || t.terminal {
                        return bad(format!("episode {} step {}: discontinuity", t.episode, t.step));
                    }
                    if t.rtg_next != next.rtg {
                        return bad(format!("episode {} step {}: rtg_next mismatch", t.episode, t.step));
                    }
                } else if t.a_next.is_some() || t.rtg_next != 0.0 {
                    return bad(format!("episode {}: final step must have no a_next", t.episode));
                }
            }
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), MdpError> {
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for t in &self.transitions {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, MdpError> {
        let mut lines = r.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| MdpError::Format("empty dataset file".into()))??;
        let header: DatasetHeader = serde_json::from_str(&header_line)?;
        let mut transitions = Vec::with_capacity(header.count);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            transitions.push(serde_json::from_str(&line)?);
        }
        let ds = Self { header, transitions };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<(), MdpError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MdpError> {
        let f = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }

    /// SHA-256 of the JSONL serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl()))
    }
}

/// Rolls out `n_episodes` of `behavior`, each on its own seeded stream.
pub fn generate_dataset(
    env: &Environment,
    behavior: &BehaviorPolicy,
    n_episodes: usize,
    max_steps: usize,
    seed: u64,
) -> Result<TransitionDataset, MdpError> {
    if n_episodes == 0 {
        return Err(MdpError::InvalidSpec("n_episodes must be at least 1".into()));
    }
    if max_steps == 0 {
        return Err(MdpError::InvalidSpec("max_steps must be at least 1".into()));
    }
    let episodes: Vec<Vec<Transition>> = (0..n_episodes)
        .into_par_iter()
        .map(|ep| rollout(env, behavior, ep, max_steps, seed))
        .collect::<Result<_, _>>()?;
    let transitions: Vec<Transition> = episodes.into_iter().flatten().collect();
    Ok(TransitionDataset {
        header: DatasetHeader {
            env_spec_hash: env.spec().hash(),
            gamma: env.gamma(),
            seed,
            count: transitions.len(),
        },
        transitions,
    })
}

fn rollout(
    env: &Environment,
    behavior: &BehaviorPolicy,
    episode: usize,
    max_steps: usize,
    seed: u64,
) -> Result<Vec<Transition>, MdpError> {
    let mut rng = substream(seed, streams::DATA, episode as u64);
    let component = behavior.choose_component(&mut rng);
    let mut s = env.reset_with(&mut rng);
    let mut steps = Vec::new();
    for _ in 0..max_steps {
        let a = behavior.act(component, &s, &mut rng);
        let out = env.step_with(&s, &a, &mut rng)?;
        steps.push((s, a, out.reward, out.next_state.clone(), out.terminal));
        if out.terminal {
            break;
        }
        s = out.next_state;
    }
    let rewards: Vec<f64> = steps.iter().map(|x| x.2).collect();
    let rtg = compute_rtg(&rewards, RTG_GAMMA)?;
    let n = steps.len();
    let actions: Vec<Vec<f64>> = steps.iter().map(|x| x.1.clone()).collect();
    Ok(steps
        .into_iter()
        .enumerate()
        .map(|(t, (s, a, r, s_next, terminal))| Transition {
            episode,
            step: t,
            s,
            a,
            r,
            s_next,
            a_next: actions.get(t + 1).cloned(),
            terminal,
            rtg: rtg[t],
            rtg_next: if t + 1 < n { rtg[t + 1] } else { 0.0 },
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{make_env, BehaviorSpec, MdpSpec};

    #[test]
    fn rtg_examples() {
        assert_eq!(compute_rtg(&[1.0, 2.0, 3.0], 1.0).unwrap(), vec![6.0, 5.0, 3.0]);
        assert_eq!(compute_rtg(&[0.0; 3], 1.0).unwrap(), vec![0.0; 3]);
        assert_eq!(compute_rtg(&[1.0, 1.0], 0.5).unwrap(), vec![1.5, 1.0]);
        assert!(matches!(compute_rtg(&[], 1.0), Err(MdpError::EmptyEpisode)));
    }

    #[test]
    fn chain_episode_has_terminal_marker() {
        let env = make_env(&MdpSpec::chain(4, 0.9)).unwrap();
        // Deterministic right-moves reach the goal in exactly 3 steps.
        let b = BehaviorPolicy::build(&BehaviorSpec::epsilon_optimal(0.0), &env).unwrap();
        let ds = generate_dataset(&env, &b, 1, 10, 0).unwrap();
        assert_eq!(ds.len(), 3);
        let last = ds.transitions.last().unwrap();
        assert!(last.terminal && last.a_next.is_none() && last.rtg_next == 0.0);
        ds.validate().unwrap();
    }

    #[test]
    fn jsonl_round_trip_is_lossless() {
        let env = make_env(&MdpSpec::point_mass()).unwrap();
        let b = BehaviorPolicy::build(&"0.5*optimal:0.3+0.5*uniform".parse().unwrap(), &env).unwrap();
        let ds = generate_dataset(&env, &b, 5, 30, 9).unwrap();
        let bytes = ds.to_jsonl();
        let back = TransitionDataset::read_jsonl(&bytes[..]).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_jsonl(), bytes);
    }
}
