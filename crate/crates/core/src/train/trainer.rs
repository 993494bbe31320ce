use std::collections::HashMap;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::rows::{GlobalContext, LocalRows, RowCatalog};
use super::{PolicyKind, PolicyParams, TrainConfig, TrainError, Variant};
use crate::critic::{stack_forward, CriticParams, CriticSpec, RowRef, StackPlan};
use crate::eval::{normalized_score, references, rollout_returns, References};
use crate::features::FeatureSpec;
use crate::mdp::{make_env, ActionSpace, Environment, TransitionDataset};
use crate::nn::gradcheck::{check_gradients, GradCheckReport};
use crate::nn::{clip_gradients, global_norm, Checkpoint, Matrix, OptimizerState, Parameterized, Tape};
use crate::retrieval::{precompute_neighbors, RetrievalIndex, Strategy};
use crate::rng::{stream, streams, substream, StreamRng};

/// Parameters and optimizer moments: everything needed to resume.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub critics: Vec<CriticParams>,
    pub target_critics: Vec<CriticParams>,
    pub policy: PolicyParams,
    pub target_policy: Option<PolicyParams>,
    pub critic_opts: Vec<OptimizerState>,
    pub policy_opt: OptimizerState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub variant: String,
    pub critic_loss: f64,
    pub policy_loss: f64,
    pub mean_q: f64,
    pub grad_norm: f64,
    pub eval_return: f64,
    pub eval_return_normalized: f64,
    pub wall_ms: u64,
}

pub const METRICS_COLUMNS: &str =
    "step,variant,critic_loss,policy_loss,mean_q,grad_norm,eval_return,eval_return_normalized,wall_ms";

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.variant,
            self.critic_loss,
            self.policy_loss,
            self.mean_q,
            self.grad_norm,
            self.eval_return,
            self.eval_return_normalized,
            self.wall_ms
        )
    }

    pub fn parse_csv_line(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return None;
        }
        Some(Self {
            step: f[0].parse().ok()?,
            variant: f[1].to_string(),
            critic_loss: f[2].parse().ok()?,
            policy_loss: f[3].parse().ok()?,
            mean_q: f[4].parse().ok()?,
            grad_norm: f[5].parse().ok()?,
            eval_return: f[6].parse().ok()?,
            eval_return_normalized: f[7].parse().ok()?,
            wall_ms: f[8].parse().ok()?,
        })
    }
}

/// One sampled minibatch with its contexts.
#[derive(Clone, Debug)]
pub struct StepBatch {
    pub idx: Vec<usize>,
    pub contexts: Vec<GlobalContext>,
    pub s_ctx: Vec<usize>,
    /// None for terminal transitions.
    pub next_ctx: Vec<Option<usize>>,
}

/// Detached quantities for one IQL step.
#[derive(Clone, Debug, PartialEq)]
pub struct IqlTargets {
    pub q: Vec<f64>,
    pub v_s: Vec<f64>,
    pub y: Vec<f64>,
}

/// Loss values and gradients (ordered like `tensors()`).
#[derive(Clone, Debug)]
pub struct LossEval {
    pub critic_loss: f64,
    pub policy_loss: f64,
    pub mean_q: f64,
    pub critic_grads: Vec<Vec<Matrix>>,
    pub policy_grads: Vec<Matrix>,
}

#[derive(Clone, Debug)]
enum Query {
    Global(usize),
    StateAction(usize, Vec<f64>),
}

struct ContextCache {
    contexts: Vec<GlobalContext>,
    s_ctx: Vec<usize>,
    next_ctx: Vec<usize>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub dataset: TransitionDataset,
    pub env: Environment,
    pub catalog: RowCatalog,
    pub index: RetrievalIndex,
    pub references: References,
    pub state: TrainState,
    cache: Option<ContextCache>,
    rows: LocalRows,
    width: usize,
}

impl TrainConfig {
    pub fn critic_spec(&self, env: &Environment) -> CriticSpec {
        CriticSpec {
            features: FeatureSpec {
                state_dim: env.state_dim(),
                action_space: env.action_space(),
                hidden: vec![self.hidden; self.feature_hidden_layers],
                d: self.feature_dim,
                layer_norm: self.layer_norm,
                dropout: self.dropout,
            },
            layers: self.layers,
            n_context: self.context,
            gamma: self.gamma,
            beta_rtg: self.beta_rtg,
        }
    }
}

impl TrainState {
    /// Fresh parameters from the INIT stream.
    pub fn init(config: &TrainConfig, env: &Environment) -> Result<Self, TrainError> {
        let mut rng = stream(config.seed, streams::INIT);
        let spec = config.critic_spec(env);
        let n_critics = match config.variant {
            Variant::Iql => 1,
            Variant::Td3Bc => 2,
        };
        let critics = (0..n_critics)
            .map(|_| CriticParams::init(&spec, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let (kind, dropout) = match config.variant {
            Variant::Iql => (PolicyKind::Stochastic, config.policy_dropout),
            Variant::Td3Bc => (PolicyKind::Deterministic, 0.0),
        };
        let policy = PolicyParams::init(env.state_dim(), env.action_space(), config.policy_hidden, dropout, kind, &mut rng)?;
        let critic_opts = critics.iter().map(|c| OptimizerState::new(c, config.critic_lr)).collect();
        let policy_opt = OptimizerState::new(&policy, config.policy_lr);
        let (target_critics, target_policy) = match config.variant {
            Variant::Iql => (Vec::new(), None),
            Variant::Td3Bc => (critics.clone(), Some(policy.clone())),
        };
        Ok(Self {
            step: 0,
            critics,
            target_critics,
            policy,
            target_policy,
            critic_opts,
            policy_opt,
        })
    }

    pub fn to_checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        let mut tensors = Vec::new();
        let mut put = |prefix: String, named: Vec<(String, Matrix)>| {
            for (n, t) in named {
                tensors.push((format!("{prefix}.{n}"), t));
            }
        };
        for (k, c) in self.critics.iter().enumerate() {
            put(format!("critic{k}"), c.named_tensors());
        }
        for (k, c) in self.target_critics.iter().enumerate() {
            put(format!("target{k}"), c.named_tensors());
        }
        put("policy".into(), self.policy.named_tensors());
        if let Some(p) = &self.target_policy {
            put("target_policy".into(), p.named_tensors());
        }
        let mut opt_steps = Vec::new();
        let opts = self
            .critic_opts
            .iter()
            .enumerate()
            .map(|(k, o)| (format!("opt.critic{k}"), o))
            .chain(std::iter::once(("opt.policy".to_string(), &self.policy_opt)));
        for (name, o) in opts {
            for (i, m) in o.first_moment.iter().enumerate() {
                tensors.push((format!("{name}.m.{i}"), m.clone()));
            }
            for (i, v) in o.second_moment.iter().enumerate() {
                tensors.push((format!("{name}.v.{i}"), v.clone()));
            }
            opt_steps.push(json!({"name": name, "step": o.step}));
        }
        Checkpoint {
            meta: json!({
                "kind": "icql-train-state",
                "step": self.step,
                "variant": config.variant.to_string(),
                "config": config.to_text(),
                "optimizers": opt_steps,
            }),
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, config: &TrainConfig, env: &Environment) -> Result<Self, TrainError> {
        let mut s = Self::init(config, env)?;
        let bad = |m: &str| TrainError::Checkpoint(m.to_string());
        s.step = ckpt.meta["step"].as_u64().ok_or_else(|| bad("missing step"))? as usize;
        let strip = |prefix: &str| -> Vec<(String, Matrix)> {
            let p = format!("{prefix}.");
            ckpt.tensors
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(&p).map(|rest| (rest.to_string(), t.clone())))
                .collect()
        };
        for (k, c) in s.critics.iter_mut().enumerate() {
            c.load_named(&strip(&format!("critic{k}")))?;
        }
        for (k, c) in s.target_critics.iter_mut().enumerate() {
            c.load_named(&strip(&format!("target{k}")))?;
        }
        s.policy.load_named(&strip("policy"))?;
        if let Some(p) = &mut s.target_policy {
            p.load_named(&strip("target_policy"))?;
        }
        let steps: HashMap<String, u64> = ckpt.meta["optimizers"]
            .as_array()
            .ok_or_else(|| bad("missing optimizer metadata"))?
            .iter()
            .filter_map(|o| Some((o["name"].as_str()?.to_string(), o["step"].as_u64()?)))
            .collect();
        let load_opt = |name: String, o: &mut OptimizerState| -> Result<(), TrainError> {
            for (i, m) in o.first_moment.iter_mut().enumerate() {
                *m = ckpt.get(&format!("{name}.m.{i}")).ok_or_else(|| bad(&format!("{name}.m.{i}")))?.clone();
            }
            for (i, v) in o.second_moment.iter_mut().enumerate() {
                *v = ckpt.get(&format!("{name}.v.{i}")).ok_or_else(|| bad(&format!("{name}.v.{i}")))?.clone();
            }
            o.step = *steps.get(&name).ok_or_else(|| bad(&name))?;
            Ok(())
        };
        for (k, o) in s.critic_opts.iter_mut().enumerate() {
            load_opt(format!("opt.critic{k}"), o)?;
        }
        load_opt("opt.policy".into(), &mut s.policy_opt)?;
        Ok(s)
    }
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset: TransitionDataset, state: Option<TrainState>) -> Result<Self, TrainError> {
        config.validate()?;
        let env = make_env(&config.env)?;
        if dataset.is_empty() {
            return Err(TrainError::Dataset("dataset is empty".into()));
        }
        if dataset.header.env_spec_hash != config.env.hash() {
            return Err(TrainError::Dataset(format!(
                "dataset was generated for env {} but the config describes {}",
                dataset.header.env_spec_hash,
                config.env.hash()
            )));
        }
        let space = env.action_space();
        for (i, t) in dataset.transitions.iter().enumerate() {
            if t.s.len() != env.state_dim() || t.a.len() != space.dim() {
                return Err(TrainError::Dataset(format!("transition {i} does not match the env shapes")));
            }
        }
        let index = RetrievalIndex::build(&dataset, config.metric);
        if index.len() < config.context {
            return Err(TrainError::Dataset(format!(
                "only {} retrievable transitions for context length {}",
                index.len(),
                config.context
            )));
        }
        let catalog = RowCatalog::build(&dataset, space);
        let cache = match config.retrieval {
            Strategy::Random => None,
            strategy => {
                let mut queries: Vec<Vec<f64>> = (0..catalog.n_states()).map(|u| catalog.state(u).to_vec()).collect();
                queries.dedup();
                let table = precompute_neighbors(&index, &queries, config.context, strategy)?;
                let contexts = table
                    .contexts
                    .iter()
                    .map(|c| {
                        GlobalContext::build(&catalog, &dataset, &c.transitions, config.gamma, config.beta_rtg)
                            .ok_or_else(|| TrainError::Dataset("retrieved a transition without a next action".into()))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let id = |s: &[f64]| table.context_id(s).expect("every dataset state was queried");
                ContextCache {
                    contexts,
                    s_ctx: dataset.transitions.iter().map(|t| id(&t.s)).collect(),
                    next_ctx: dataset.transitions.iter().map(|t| id(&t.s_next)).collect(),
                }
                .into()
            }
        };
        let references = references(&env, config.seed, 100)?;
        let state = match state {
            Some(s) => s,
            None => TrainState::init(&config, &env)?,
        };
        let width = env.state_dim() + space.encoded_dim();
        let rows = LocalRows::new(&catalog, width);
        Ok(Self {
            config,
            dataset,
            env,
            catalog,
            index,
            references,
            state,
            cache,
            rows,
            width,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Uniform minibatch with replacement, plus the contexts of s and s'.
    pub fn make_batch(&self, step: usize) -> Result<StepBatch, TrainError> {
        let mut rng = substream(self.config.seed, streams::BATCH, step as u64);
        let n = self.dataset.len();
        let idx: Vec<usize> = (0..self.config.batch).map(|_| rng.random_range(0..n)).collect();
        self.batch_for(&idx, step)
    }

    pub fn batch_for(&self, idx: &[usize], step: usize) -> Result<StepBatch, TrainError> {
        let mut contexts = Vec::new();
        let mut s_ctx = Vec::with_capacity(idx.len());
        let mut next_ctx = Vec::with_capacity(idx.len());
        match &self.cache {
            Some(cache) => {
                let mut local: HashMap<usize, usize> = HashMap::new();
                let mut get = |c: usize, contexts: &mut Vec<GlobalContext>| {
                    *local.entry(c).or_insert_with(|| {
                        contexts.push(cache.contexts[c].clone());
                        contexts.len() - 1
                    })
                };
                for &i in idx {
                    s_ctx.push(get(cache.s_ctx[i], &mut contexts));
                    next_ctx.push(if self.dataset.transitions[i].terminal {
                        None
                    } else {
                        Some(get(cache.next_ctx[i], &mut contexts))
                    });
                }
            }
            None => {
                let mut rng = substream(self.config.seed, streams::RETRIEVAL, step as u64);
                let mut draw = |contexts: &mut Vec<GlobalContext>, q: &[f64]| -> Result<usize, TrainError> {
                    let ctx = self.index.retrieve_random(q, self.config.context, &mut rng)?;
                    contexts.push(
                        GlobalContext::build(&self.catalog, &self.dataset, &ctx.transitions, self.config.gamma, self.config.beta_rtg)
                            .ok_or_else(|| TrainError::Dataset("retrieved a transition without a next action".into()))?,
                    );
                    Ok(contexts.len() - 1)
                };
                for &i in idx {
                    let t = &self.dataset.transitions[i];
                    s_ctx.push(draw(&mut contexts, &t.s)?);
                    next_ctx.push(if t.terminal { None } else { Some(draw(&mut contexts, &t.s_next)?) });
                }
            }
        }
        Ok(StepBatch {
            idx: idx.to_vec(),
            contexts,
            s_ctx,
            next_ctx,
        })
    }

    /// Evaluation-mode estimates for (context, query) pairs.
    fn plain_values(
        &mut self,
        critic: &CriticParams,
        contexts: &[GlobalContext],
        queries: &[(usize, Query)],
    ) -> Result<Vec<f64>, TrainError> {
        self.rows.reset();
        let mut used: Vec<Option<usize>> = vec![None; contexts.len()];
        let mut plan = StackPlan {
            contexts: Vec::new(),
            queries: Vec::with_capacity(queries.len()),
            xi_scale: critic.xi_scale(),
            readout: critic.readout,
        };
        for (c, q) in queries {
            let local = match used[*c] {
                Some(l) => l,
                None => {
                    plan.contexts.push(self.rows.context(&self.catalog, &contexts[*c], 0));
                    used[*c] = Some(plan.contexts.len() - 1);
                    plan.contexts.len() - 1
                }
            };
            let r = match q {
                Query::Global(id) => self.rows.global(&self.catalog, *id),
                Query::StateAction(uid, a) => self.rows.state_action(&self.catalog, *uid, a),
            };
            plan.queries.push((local, RowRef::new(0, r)));
        }
        let phi = critic.features.featurize_encoded(&self.rows.matrix())?;
        Ok(stack_forward(&[&phi], &critic.c_refs(), &plan)?.q)
    }

    fn states_matrix(&self, uids: impl Iterator<Item = usize>) -> Result<Matrix, TrainError> {
        let rows: Vec<Vec<f64>> = uids.map(|u| self.catalog.state(u).to_vec()).collect();
        Ok(Matrix::from_rows(&rows)?)
    }

    /// Q̂(s,a), V(s) and y = r + γV(s') from `target` in evaluation mode,
    /// with V a mean over policy samples.
    pub fn iql_targets(
        &mut self,
        target: &CriticParams,
        policy: &PolicyParams,
        batch: &StepBatch,
        rng: &mut StreamRng,
    ) -> Result<IqlTargets, TrainError> {
        let n = self.config.value_samples;
        let b = batch.idx.len();
        let s_uids: Vec<usize> = batch.idx.iter().map(|&i| self.catalog.s_uid[i]).collect();
        let n_uids: Vec<usize> = batch.idx.iter().map(|&i| self.catalog.next_uid[i]).collect();
        let s_samples = policy.sample(&self.states_matrix(s_uids.iter().copied())?, n, rng)?;
        let n_samples = policy.sample(&self.states_matrix(n_uids.iter().copied())?, n, rng)?;
        let mut queries = Vec::with_capacity(b * (1 + 2 * n));
        for i in 0..b {
            queries.push((batch.s_ctx[i], Query::Global(self.catalog.sa_id[batch.idx[i]])));
        }
        for i in 0..b {
            for a in &s_samples[i] {
                queries.push((batch.s_ctx[i], Query::StateAction(s_uids[i], a.clone())));
            }
        }
        for i in 0..b {
            if let Some(c) = batch.next_ctx[i] {
                for a in &n_samples[i] {
                    queries.push((c, Query::StateAction(n_uids[i], a.clone())));
                }
            }
        }
        let vals = self.plain_values(target, &batch.contexts, &queries)?;
        let q = vals[..b].to_vec();
        let v_s: Vec<f64> = (0..b)
            .map(|i| vals[b + i * n..b + (i + 1) * n].iter().sum::<f64>() / n as f64)
            .collect();
        let mut k = b + b * n;
        let mut y = Vec::with_capacity(b);
        for i in 0..b {
            let t = &self.dataset.transitions[batch.idx[i]];
            let v_next = if batch.next_ctx[i].is_some() {
                let v = vals[k..k + n].iter().sum::<f64>() / n as f64;
                k += n;
                v
            } else {
                0.0
            };
            y.push(super::bellman_target(t.r, v_next, t.terminal, self.config.gamma));
        }
        Ok(IqlTargets { q, v_s, y })
    }

    /// Rows and plan for the Q̂(s_i, a_i | Ω_{s_i}) queries of a batch.
    fn query_plan(&mut self, critic: &CriticParams, batch: &StepBatch) -> StackPlan {
        self.rows.reset();
        let mut used: Vec<Option<usize>> = vec![None; batch.contexts.len()];
        let mut plan = StackPlan {
            contexts: Vec::new(),
            queries: Vec::with_capacity(batch.idx.len()),
            xi_scale: critic.xi_scale(),
            readout: critic.readout,
        };
        for (i, &ti) in batch.idx.iter().enumerate() {
            let c = batch.s_ctx[i];
            let local = match used[c] {
                Some(l) => l,
                None => {
                    plan.contexts.push(self.rows.context(&self.catalog, &batch.contexts[c], 0));
                    used[c] = Some(plan.contexts.len() - 1);
                    plan.contexts.len() - 1
                }
            };
            let r = self.rows.global(&self.catalog, self.catalog.sa_id[ti]);
            plan.queries.push((local, RowRef::new(0, r)));
        }
        plan
    }

    /// Expectile critic loss and AWR policy loss with their gradients.
    pub fn iql_losses(
        &mut self,
        critic: &CriticParams,
        policy: &PolicyParams,
        batch: &StepBatch,
        targets: &IqlTargets,
        mut dropout: Option<(&mut StreamRng, &mut StreamRng)>,
    ) -> Result<LossEval, TrainError> {
        let cfg = self.config.clone();
        let b = batch.idx.len();
        let mut tape = Tape::new();
        let cv = critic.register(&mut tape);
        let plan = self.query_plan(critic, batch);
        let x = tape.constant(self.rows.matrix());
        let phi = critic
            .features
            .mlp
            .forward_tape(&mut tape, &cv.features, x, dropout.as_mut().map(|d| &mut *d.0))?;
        let q = critic.stack_tape(&mut tape, &cv, &[phi], plan)?;
        let y = tape.constant(Matrix::column_vector(&targets.y));
        let u = tape.sub(q, y)?;
        let critic_loss = tape.expectile(u, cfg.tau)?;

        let pv = policy.register(&mut tape);
        let states = self.states_matrix(batch.idx.iter().map(|&i| self.catalog.s_uid[i]))?;
        let actions: Vec<Vec<f64>> = batch.idx.iter().map(|&i| self.dataset.transitions[i].a.clone()).collect();
        let logp = policy.log_prob_tape(&mut tape, &pv, &states, &actions, dropout.as_mut().map(|d| &mut *d.1))?;
        let weights: Vec<f64> = (0..b)
            .map(|i| super::awr_weight(targets.q[i] - targets.v_s[i], cfg.beta_awr, cfg.awr_clip))
            .collect();
        let wm = tape.weighted_mean(logp, weights)?;
        let policy_loss = tape.scale(wm, -1.0)?;
        let total = tape.add(critic_loss, policy_loss)?;
        let g = tape.backward(total)?;
        let mean_q = tape.value(q).sum() / b as f64;
        Ok(LossEval {
            critic_loss: tape.value(critic_loss).item(),
            policy_loss: tape.value(policy_loss).item(),
            mean_q,
            critic_grads: vec![cv.grads(&g, critic)],
            policy_grads: pv.grads(&g, policy),
        })
    }

    /// y = r + γ·min_k Q̂'_k(s', π'(s')) from the target networks.
    pub fn td3bc_targets(&mut self, batch: &StepBatch, rng: &mut StreamRng) -> Result<Vec<f64>, TrainError> {
        let cfg = self.config.clone();
        let b = batch.idx.len();
        let n_uids: Vec<usize> = batch.idx.iter().map(|&i| self.catalog.next_uid[i]).collect();
        let tp = self.state.target_policy.clone().expect("td3bc keeps a target policy");
        let mut next_actions = tp.greedy(&self.states_matrix(n_uids.iter().copied())?)?;
        if cfg.target_noise > 0.0 {
            if let ActionSpace::Box { low, high, .. } = self.env.action_space() {
                for a in &mut next_actions {
                    for x in a.iter_mut() {
                        let z: f64 = Distribution::<f64>::sample(&StandardNormal, rng);
                        *x = (*x + (cfg.target_noise * z).clamp(-cfg.noise_clip, cfg.noise_clip)).clamp(low, high);
                    }
                }
            }
        }
        let queries: Vec<(usize, Query)> = (0..b)
            .filter_map(|i| batch.next_ctx[i].map(|c| (c, Query::StateAction(n_uids[i], next_actions[i].clone()))))
            .collect();
        let targets = self.state.target_critics.clone();
        let q1 = self.plain_values(&targets[0], &batch.contexts, &queries)?;
        let q2 = self.plain_values(&targets[1], &batch.contexts, &queries)?;
        let mut k = 0;
        Ok((0..b)
            .map(|i| {
                let t = &self.dataset.transitions[batch.idx[i]];
                if batch.next_ctx[i].is_some() {
                    k += 1;
                    super::td3bc_target(t.r, q1[k - 1], q2[k - 1], t.terminal, cfg.gamma)
                } else {
                    t.r
                }
            })
            .collect())
    }

    /// Σ_k mean (Q̂_k − y)² and its gradients for both critics.
    pub fn td3bc_critic_losses(
        &mut self,
        critics: &[CriticParams],
        batch: &StepBatch,
        targets: &[f64],
        mut dropout: Option<&mut StreamRng>,
    ) -> Result<LossEval, TrainError> {
        let mut tape = Tape::new();
        let plan = self.query_plan(&critics[0], batch);
        let x = tape.constant(self.rows.matrix());
        let y = tape.constant(Matrix::column_vector(targets));
        let mut loss = None;
        let mut vars = Vec::new();
        let mut q_first = None;
        for c in critics {
            let cv = c.register(&mut tape);
            let phi = c.features.mlp.forward_tape(&mut tape, &cv.features, x, dropout.as_deref_mut())?;
            let q = c.stack_tape(&mut tape, &cv, &[phi], plan.clone())?;
            q_first.get_or_insert(q);
            let u = tape.sub(q, y)?;
            let sq = tape.square(u)?;
            let l = tape.mean_all(sq)?;
            loss = Some(match loss {
                None => l,
                Some(prev) => tape.add(prev, l)?,
            });
            vars.push(cv);
        }
        let loss = loss.expect("two critics");
        let g = tape.backward(loss)?;
        let q = q_first.expect("two critics");
        Ok(LossEval {
            critic_loss: tape.value(loss).item(),
            policy_loss: 0.0,
            mean_q: tape.value(q).sum() / batch.idx.len() as f64,
            critic_grads: vars.iter().zip(critics).map(|(v, c)| v.grads(&g, c)).collect(),
            policy_grads: Vec::new(),
        })
    }

    /// −mean Q̂_1(s, π(s)) + α·mean ‖π(s) − a‖² and its policy gradient.
    pub fn td3bc_actor_loss(&mut self, critic: &CriticParams, policy: &PolicyParams, batch: &StepBatch) -> Result<LossEval, TrainError> {
        Ok(self.td3bc_actor_loss_scaled(critic, policy, batch, None)?.0)
    }

    /// The actor loss and the Q normalizer it used. The normalizer is a
    /// constant of the graph; `fixed_scale` pins it for finite differences.
    fn td3bc_actor_loss_scaled(
        &mut self,
        critic: &CriticParams,
        policy: &PolicyParams,
        batch: &StepBatch,
        fixed_scale: Option<f64>,
    ) -> Result<(LossEval, f64), TrainError> {
        let cfg = self.config.clone();
        let b = batch.idx.len();
        let mut tape = Tape::new();
        let cv = critic.register(&mut tape);
        self.rows.reset();
        let mut used: Vec<Option<usize>> = vec![None; batch.contexts.len()];
        let mut plan = StackPlan {
            contexts: Vec::new(),
            queries: Vec::with_capacity(b),
            xi_scale: critic.xi_scale(),
            readout: critic.readout,
        };
        for i in 0..b {
            let c = batch.s_ctx[i];
            let local = match used[c] {
                Some(l) => l,
                None => {
                    plan.contexts.push(self.rows.context(&self.catalog, &batch.contexts[c], 0));
                    used[c] = Some(plan.contexts.len() - 1);
                    plan.contexts.len() - 1
                }
            };
            plan.queries.push((local, RowRef::new(1, i)));
        }
        let x0 = tape.constant(self.rows.matrix());
        let phi0 = critic.features.mlp.forward_tape::<StreamRng>(&mut tape, &cv.features, x0, None)?;
        let pv = policy.register(&mut tape);
        let states = self.states_matrix(batch.idx.iter().map(|&i| self.catalog.s_uid[i]))?;
        let pi = policy.action_tape::<StreamRng>(&mut tape, &pv, &states, None)?;
        let s_var = tape.constant(states);
        let x1 = tape.concat_cols(s_var, pi)?;
        let phi1 = critic.features.mlp.forward_tape::<StreamRng>(&mut tape, &cv.features, x1, None)?;
        let q = critic.stack_tape(&mut tape, &cv, &[phi0, phi1], plan)?;
        let actions: Vec<Vec<f64>> = batch.idx.iter().map(|&i| self.dataset.transitions[i].a.clone()).collect();
        let a = tape.constant(Matrix::from_rows(&actions)?);
        let diff = tape.sub(pi, a)?;
        let sq = tape.square(diff)?;
        let bc_sum = tape.sum_all(sq)?;
        let bc = tape.scale(bc_sum, 1.0 / b as f64)?;
        let mean_q = tape.mean_all(q)?;
        let qv = tape.value(q).clone();
        let scale = fixed_scale.unwrap_or_else(|| {
            if cfg.normalize_q {
                let mean_abs = qv.as_slice().iter().map(|x| x.abs()).sum::<f64>() / b as f64;
                cfg.alpha_bc / mean_abs.max(1e-12)
            } else {
                1.0
            }
        });
        let loss = if cfg.normalize_q {
            let lq = tape.scale(mean_q, -scale)?;
            tape.add(lq, bc)?
        } else {
            let lq = tape.scale(mean_q, -1.0)?;
            let lb = tape.scale(bc, cfg.alpha_bc)?;
            tape.add(lq, lb)?
        };
        let g = tape.backward(loss)?;
        let eval = LossEval {
            critic_loss: 0.0,
            policy_loss: tape.value(loss).item(),
            mean_q: tape.value(mean_q).item(),
            critic_grads: Vec::new(),
            policy_grads: pv.grads(&g, policy),
        };
        Ok((eval, scale))
    }

    fn non_finite(&self, step: usize, what: &str, eval: &LossEval, batch: &StepBatch) -> TrainError {
        let norms: Vec<f64> = self
            .state
            .critics
            .iter()
            .map(|c| c.tensors().iter().map(|t| t.frobenius_norm_sq()).sum::<f64>().sqrt())
            .collect();
        TrainError::NonFinite {
            step,
            dump: Box::new(json!({
                "step": step,
                "quantity": what,
                "critic_loss": eval.critic_loss.to_string(),
                "policy_loss": eval.policy_loss.to_string(),
                "mean_q": eval.mean_q.to_string(),
                "batch": batch.idx,
                "critic_param_norms": norms.iter().map(|x| x.to_string()).collect::<Vec<_>>(),
                "config": self.config.to_text(),
            })),
        }
    }

    /// One optimizer step; returns (critic loss, policy loss or None, mean Q̂,
    /// critic gradient norm before clipping).
    pub fn step(&mut self) -> Result<(f64, Option<f64>, f64, f64), TrainError> {
        let step = self.state.step;
        let seed = self.config.seed;
        let batch = self.make_batch(step)?;
        let mut sample_rng = substream(seed, streams::POLICY_SAMPLING, step as u64);
        let mut d_critic = substream(seed, streams::DROPOUT, 2 * step as u64);
        let mut d_policy = substream(seed, streams::DROPOUT, 2 * step as u64 + 1);
        let clip = self.config.clip_norm;
        let out = match self.config.variant {
            Variant::Iql => {
                let critic = self.state.critics[0].clone();
                let policy = self.state.policy.clone();
                let targets = self.iql_targets(&critic, &policy, &batch, &mut sample_rng)?;
                let mut ev = self.iql_losses(&critic, &policy, &batch, &targets, Some((&mut d_critic, &mut d_policy)))?;
                if !ev.critic_loss.is_finite() {
                    return Err(self.non_finite(step, "critic_loss", &ev, &batch));
                }
                if !ev.policy_loss.is_finite() {
                    return Err(self.non_finite(step, "policy_loss", &ev, &batch));
                }
                let norm = clip_gradients(&mut ev.critic_grads[0], clip);
                clip_gradients(&mut ev.policy_grads, clip);
                self.state.critic_opts[0].step(&mut self.state.critics[0], &ev.critic_grads[0])?;
                self.state.policy_opt.step(&mut self.state.policy, &ev.policy_grads)?;
                (ev.critic_loss, Some(ev.policy_loss), ev.mean_q, norm)
            }
            Variant::Td3Bc => {
                let targets = self.td3bc_targets(&batch, &mut sample_rng)?;
                let critics = self.state.critics.clone();
                let mut ev = self.td3bc_critic_losses(&critics, &batch, &targets, Some(&mut d_critic))?;
                if !ev.critic_loss.is_finite() {
                    return Err(self.non_finite(step, "critic_loss", &ev, &batch));
                }
                let mut norm = 0.0f64;
                for k in 0..critics.len() {
                    norm = norm.max(clip_gradients(&mut ev.critic_grads[k], clip));
                    self.state.critic_opts[k].step(&mut self.state.critics[k], &ev.critic_grads[k])?;
                }
                let mut policy_loss = None;
                if step % self.config.policy_delay == 0 {
                    let critic = self.state.critics[0].clone();
                    let policy = self.state.policy.clone();
                    let mut ae = self.td3bc_actor_loss(&critic, &policy, &batch)?;
                    if !ae.policy_loss.is_finite() {
                        return Err(self.non_finite(step, "policy_loss", &ae, &batch));
                    }
                    clip_gradients(&mut ae.policy_grads, clip);
                    self.state.policy_opt.step(&mut self.state.policy, &ae.policy_grads)?;
                    policy_loss = Some(ae.policy_loss);
                    let rate = self.config.polyak;
                    for k in 0..self.state.critics.len() {
                        let online = self.state.critics[k].clone();
                        self.state.target_critics[k].polyak_from(&online, rate);
                    }
                    let online = self.state.policy.clone();
                    if let Some(tp) = &mut self.state.target_policy {
                        tp.polyak_from(&online, rate);
                    }
                }
                (ev.critic_loss, policy_loss, ev.mean_q, norm)
            }
        };
        self.state.step += 1;
        Ok(out)
    }

    /// Mean rollout return of the current policy and its normalized score.
    pub fn evaluate(&self, step: usize) -> Result<(f64, f64), TrainError> {
        if self.config.eval_episodes == 0 {
            return Ok((f64::NAN, f64::NAN));
        }
        let seed = crate::rng::derive_seed(self.config.seed, streams::EVAL, step as u64);
        let eps = rollout_returns(&self.env, &self.state.policy, self.config.eval_episodes, seed)?;
        let mean = eps.iter().map(|e| e.ret).sum::<f64>() / eps.len() as f64;
        Ok((mean, normalized_score(mean, &self.references)))
    }

    /// Trains until `config.steps`, emitting one metrics row per interval
    /// together with the state it was measured on.
    pub fn run(&mut self, mut on_row: impl FnMut(&MetricsRow, &TrainState) -> Result<(), TrainError>) -> Result<Vec<MetricsRow>, TrainError> {
        let start = Instant::now();
        let mut rows = Vec::new();
        let (mut cl, mut pl, mut mq, mut gn) = (0.0, 0.0, 0.0, 0.0);
        let (mut n, mut np) = (0usize, 0usize);
        while self.state.step < self.config.steps {
            let (c, p, q, g) = self.step()?;
            cl += c;
            mq += q;
            gn += g;
            n += 1;
            if let Some(p) = p {
                pl += p;
                np += 1;
            }
            let step = self.state.step;
            if step % self.config.eval_interval == 0 || step == self.config.steps {
                let (ret, norm) = self.evaluate(step)?;
                let row = MetricsRow {
                    step,
                    variant: self.config.variant.to_string(),
                    critic_loss: cl / n as f64,
                    policy_loss: if np > 0 { pl / np as f64 } else { 0.0 },
                    mean_q: mq / n as f64,
                    grad_norm: gn / n as f64,
                    eval_return: ret,
                    eval_return_normalized: norm,
                    wall_ms: if self.config.wall_clock {
                        start.elapsed().as_millis() as u64
                    } else {
                        0
                    },
                };
                on_row(&row, &self.state)?;
                rows.push(row);
                (cl, pl, mq, gn, n, np) = (0.0, 0.0, 0.0, 0.0, 0, 0);
            }
        }
        Ok(rows)
    }
}

/// Finite-difference checks of one step's losses.
#[derive(Clone, Debug, PartialEq)]
pub struct StepGradCheck {
    pub critic: GradCheckReport,
    pub policy: GradCheckReport,
    pub critic_grad_norm: f64,
    pub policy_grad_norm: f64,
}

impl StepGradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.critic.passes(tol) && self.policy.passes(tol)
    }

    /// False when the critic loss is flat at this batch, which makes the
    /// critic comparison vacuous.
    pub fn is_informative(&self) -> bool {
        self.critic_grad_norm > 0.0 && self.policy_grad_norm > 0.0
    }
}

impl Trainer {
    /// Checks the step-`step` loss gradients against central differences
    /// with targets held fixed and the same dropout masks on every call.
    pub fn gradcheck_step(&mut self, step: usize, stride: usize) -> Result<StepGradCheck, TrainError> {
        let seed = self.config.seed;
        let batch = self.make_batch(step)?;
        let mut sample_rng = substream(seed, streams::POLICY_SAMPLING, step as u64);
        let d_critic = substream(seed, streams::DROPOUT, 2 * step as u64);
        let d_policy = substream(seed, streams::DROPOUT, 2 * step as u64 + 1);
        let policy = self.state.policy.clone();
        match self.config.variant {
            Variant::Iql => {
                let critic = self.state.critics[0].clone();
                let targets = self.iql_targets(&critic, &policy, &batch, &mut sample_rng)?;
                let run = |t: &mut Self, c: &CriticParams, p: &PolicyParams| {
                    let (mut a, mut b) = (d_critic.clone(), d_policy.clone());
                    t.iql_losses(c, p, &batch, &targets, Some((&mut a, &mut b)))
                };
                let ev = run(self, &critic, &policy)?;
                let critic_report = check_gradients(&critic, &ev.critic_grads[0], stride, |c| {
                    run(self, c, &policy).map_or(f64::NAN, |e| e.critic_loss + e.policy_loss)
                });
                let policy_report = check_gradients(&policy, &ev.policy_grads, stride, |p| {
                    run(self, &critic, p).map_or(f64::NAN, |e| e.critic_loss + e.policy_loss)
                });
                Ok(StepGradCheck {
                    critic: critic_report,
                    policy: policy_report,
                    critic_grad_norm: global_norm(&ev.critic_grads[0]),
                    policy_grad_norm: global_norm(&ev.policy_grads),
                })
            }
            Variant::Td3Bc => {
                let targets = self.td3bc_targets(&batch, &mut sample_rng)?;
                let critics = self.state.critics.clone();
                let run = |t: &mut Self, cs: &[CriticParams]| {
                    let mut d = d_critic.clone();
                    t.td3bc_critic_losses(cs, &batch, &targets, Some(&mut d))
                };
                let ev = run(self, &critics)?;
                let mut critic_report: Option<GradCheckReport> = None;
                for k in 0..critics.len() {
                    let r = check_gradients(&critics[k], &ev.critic_grads[k], stride, |c| {
                        let mut cs = critics.clone();
                        cs[k] = c.clone();
                        run(self, &cs).map_or(f64::NAN, |e| e.critic_loss)
                    });
                    critic_report = Some(match critic_report {
                        None => r,
                        Some(prev) => prev.merge(r),
                    });
                }
                let (ae, scale) = self.td3bc_actor_loss_scaled(&critics[0], &policy, &batch, None)?;
                let policy_report = check_gradients(&policy, &ae.policy_grads, stride, |p| {
                    self.td3bc_actor_loss_scaled(&critics[0], p, &batch, Some(scale))
                        .map_or(f64::NAN, |(e, _)| e.policy_loss)
                });
                Ok(StepGradCheck {
                    critic: critic_report.expect("two critics"),
                    policy: policy_report,
                    critic_grad_norm: ev.critic_grads.iter().map(|g| global_norm(g)).fold(f64::INFINITY, f64::min),
                    policy_grad_norm: global_norm(&ae.policy_grads),
                })
            }
        }
    }
}

/// Everything a finished run produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<MetricsRow>,
}

/// Trains from scratch (or from `resume`) on `dataset`.
pub fn train(config: &TrainConfig, dataset: &TransitionDataset, resume: Option<TrainState>) -> Result<TrainOutcome, TrainError> {
    let mut t = Trainer::new(config.clone(), dataset.clone(), resume)?;
    let metrics = t.run(|_, _| Ok(()))?;
    Ok(TrainOutcome { state: t.state, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{generate_dataset, BehaviorPolicy, BehaviorSpec, MdpSpec};
    use crate::nn::gradcheck::GRAD_REL_TOL;

    fn small(variant: Variant, env: MdpSpec, episodes: usize) -> (TrainConfig, TransitionDataset) {
        let e = make_env(&env).unwrap();
        let b = BehaviorPolicy::build(&BehaviorSpec::epsilon_optimal(0.3), &e).unwrap();
        let data = generate_dataset(&e, &b, episodes, 30, 5).unwrap();
        let cfg = TrainConfig {
            variant,
            env,
            steps: 6,
            batch: 4,
            eval_interval: 3,
            eval_episodes: 2,
            context: 5,
            layers: 2,
            feature_dim: 4,
            hidden: 8,
            policy_hidden: 8,
            value_samples: 2,
            policy_delay: 2,
            ..TrainConfig::default()
        };
        (cfg, data)
    }

    fn chain() -> MdpSpec {
        let mut s = MdpSpec::chain(6, 0.9);
        s.horizon = 30;
        s
    }

    #[test]
    fn zero_steps_returns_initial_parameters() {
        let (mut cfg, data) = small(Variant::Iql, chain(), 10);
        cfg.steps = 0;
        let out = train(&cfg, &data, None).unwrap();
        let env = make_env(&cfg.env).unwrap();
        assert_eq!(out.state, TrainState::init(&cfg, &env).unwrap());
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn runs_are_deterministic_and_resumable() {
        for (variant, env) in [(Variant::Iql, chain()), (Variant::Td3Bc, MdpSpec::point_mass())] {
            let (cfg, data) = small(variant, env, 6);
            let a = train(&cfg, &data, None).unwrap();
            let b = train(&cfg, &data, None).unwrap();
            assert_eq!(a.metrics, b.metrics);
            assert_eq!(a.state, b.state);
            assert_eq!(a.metrics.iter().map(|r| r.step).collect::<Vec<_>>(), vec![3, 6]);

            let mut half = cfg.clone();
            half.steps = 3;
            let first = train(&half, &data, None).unwrap();
            let env = make_env(&cfg.env).unwrap();
            let ckpt = first.state.to_checkpoint(&half);
            let mut bytes = Vec::new();
            ckpt.write_to(&mut bytes).unwrap();
            let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
            let restored = TrainState::from_checkpoint(&back, &cfg, &env).unwrap();
            assert_eq!(restored, first.state);
            let rest = train(&cfg, &data, Some(restored)).unwrap();
            assert_eq!(rest.state, a.state);
            assert_eq!(rest.metrics, a.metrics[1..].to_vec());
        }
    }

    #[test]
    fn step_gradients_match_finite_differences() {
        for (variant, env) in [(Variant::Iql, MdpSpec::four_rooms()), (Variant::Td3Bc, MdpSpec::point_mass())] {
            let (cfg, data) = small(variant, env, 6);
            let mut t = Trainer::new(cfg, data, None).unwrap();
            for step in 0..2 {
                let r = t.gradcheck_step(step, 1).unwrap();
                assert!(r.passes(GRAD_REL_TOL), "{variant}: {r:?}");
                assert!(r.is_informative(), "{variant}: {r:?}");
            }
        }
    }

    #[test]
    fn random_retrieval_trains_without_cache() {
        let (mut cfg, data) = small(Variant::Iql, chain(), 10);
        cfg.retrieval = Strategy::Random;
        let a = train(&cfg, &data, None).unwrap();
        assert_eq!(a.metrics.len(), 2);
        assert!(a.metrics.iter().all(|r| r.critic_loss.is_finite()));
    }

    #[test]
    fn polyak_rate_one_copies() {
        let (cfg, _) = small(Variant::Td3Bc, MdpSpec::point_mass(), 2);
        let env = make_env(&cfg.env).unwrap();
        let mut s = TrainState::init(&cfg, &env).unwrap();
        let other = TrainState::init(&TrainConfig { seed: 9, ..cfg }, &env).unwrap();
        s.target_critics[0].polyak_from(&other.critics[0], 1.0);
        assert_eq!(s.target_critics[0], other.critics[0]);
    }

    #[test]
    fn metrics_rows_round_trip() {
        let r = MetricsRow {
            step: 3,
            variant: "icql-iql".into(),
            critic_loss: 0.1,
            policy_loss: -2.5e-7,
            mean_q: 1.0 / 3.0,
            grad_norm: 4.0,
            eval_return: f64::NAN,
            eval_return_normalized: 12.5,
            wall_ms: 0,
        };
        let back = MetricsRow::parse_csv_line(&r.to_csv_line()).unwrap();
        assert_eq!(back.to_csv_line(), r.to_csv_line());
    }
}
