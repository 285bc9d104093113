//! Variable-scale cooperative skirmish environment.
//!
//! A deterministic, seedable Dec-POMDP with entity-structured
//! observations: each agent sees its own features plus one fixed-schema
//! feature vector per other unit, and has one attack action per enemy.
//! The schema (`F_OWN`, `F_ENT`) is identical across all task scales so
//! one parameter set can drive any task.
//!
//! Dynamics are fully deterministic given the reset seed: randomness is
//! only used for spawn jitter. Enemies run a fixed script (attack the
//! nearest ally in range, otherwise advance toward it) and never
//! retreat.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Result, SdcqlError};
use crate::rng;

/// Own-feature vector length: health, x, y, previous-own-action one-hot
/// (6), previous-action-was-attack flag.
pub const F_OWN: usize = 10;
/// Entity-feature vector length: visible, dist, rel_x, rel_y, health,
/// is_enemy.
pub const F_ENT: usize = 6;
/// Number of own (non-attack) actions: no-op, stop, N, S, E, W.
pub const N_OWN_ACTIONS: usize = 6;
/// Own-feature fields that are reconstruction targets (health, x, y);
/// the previous-action fields are excluded.
pub const F_OWN_TARGET: usize = 3;

pub const ACT_NOOP: usize = 0;
pub const ACT_STOP: usize = 1;
pub const ACT_NORTH: usize = 2;
pub const ACT_SOUTH: usize = 3;
pub const ACT_EAST: usize = 4;
pub const ACT_WEST: usize = 5;

/// One symmetric skirmish task.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TaskSpec {
    pub task_id: String,
    pub n_allies: usize,
    pub n_enemies: usize,
    #[serde(default = "default_arena")]
    pub arena_w: f64,
    #[serde(default = "default_arena")]
    pub arena_h: f64,
    #[serde(default = "default_episode_limit")]
    pub episode_limit: usize,
    #[serde(default = "default_sight_range")]
    pub sight_range: f64,
    #[serde(default = "default_attack_range")]
    pub attack_range: f64,
    #[serde(default = "default_unit_health")]
    pub unit_health: f64,
    #[serde(default = "default_move_speed")]
    pub move_speed: f64,
    #[serde(default = "default_damage")]
    pub damage: f64,
}

fn default_arena() -> f64 {
    16.0
}
fn default_episode_limit() -> usize {
    60
}
fn default_sight_range() -> f64 {
    6.0
}
fn default_attack_range() -> f64 {
    3.0
}
fn default_unit_health() -> f64 {
    10.0
}
fn default_move_speed() -> f64 {
    1.0
}
fn default_damage() -> f64 {
    1.0
}

impl TaskSpec {
    /// Symmetric task with default physics, named `t{A}v{E}`.
    pub fn symmetric(n_allies: usize, n_enemies: usize) -> Self {
        TaskSpec {
            task_id: format!("t{n_allies}v{n_enemies}"),
            n_allies,
            n_enemies,
            arena_w: default_arena(),
            arena_h: default_arena(),
            episode_limit: default_episode_limit(),
            sight_range: default_sight_range(),
            attack_range: default_attack_range(),
            unit_health: default_unit_health(),
            move_speed: default_move_speed(),
            damage: default_damage(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_allies < 1 || self.n_enemies < 1 {
            return Err(SdcqlError::InvalidTaskSpec(format!(
                "{}: need at least one unit per side",
                self.task_id
            )));
        }
        if self.episode_limit < 1 {
            return Err(SdcqlError::InvalidTaskSpec(format!(
                "{}: episode_limit must be >= 1",
                self.task_id
            )));
        }
        let min_arena = self.arena_w.min(self.arena_h);
        if !(self.attack_range < self.sight_range && self.sight_range < min_arena) {
            return Err(SdcqlError::InvalidTaskSpec(format!(
                "{}: need attack_range < sight_range < min(arena_w, arena_h)",
                self.task_id
            )));
        }
        Ok(())
    }

    /// Entity slots per agent observation.
    pub fn k_entities(&self) -> usize {
        self.n_allies - 1 + self.n_enemies
    }

    /// Interactable (attackable) entities per agent.
    pub fn k_interactable(&self) -> usize {
        self.n_enemies
    }

    /// Total actions per agent: own actions plus one attack per enemy.
    pub fn n_actions(&self) -> usize {
        N_OWN_ACTIONS + self.n_enemies
    }

    /// Flat observation length.
    pub fn obs_len(&self) -> usize {
        F_OWN + self.k_entities() * F_ENT
    }

    /// Shared team reward scale: a flawless episode returns 20.
    pub fn reward_scale(&self) -> f64 {
        20.0 / (20.0 * self.unit_health / 10.0 * self.n_enemies as f64 + 200.0)
    }

    /// Maximum undiscounted episode return.
    pub fn max_return(&self) -> f64 {
        20.0
    }
}

/// Registry of known tasks. Ids of the form `t{A}v{E}` resolve
/// implicitly; a JSON file can add or override custom tasks.
#[derive(Debug, Clone, Default)]
pub struct TaskRegistry {
    custom: BTreeMap<String, TaskSpec>,
}

impl TaskRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Load custom tasks from a JSON file holding a list of [`TaskSpec`].
    pub fn with_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SdcqlError::io(format!("reading task registry {}", path.display()), e))?;
        let specs: Vec<TaskSpec> = serde_json::from_str(&text)
            .map_err(|e| SdcqlError::FormatError(format!("task registry: {e}")))?;
        let mut reg = Self::new();
        for spec in specs {
            spec.validate()?;
            reg.custom.insert(spec.task_id.clone(), spec);
        }
        Ok(reg)
    }

    pub fn insert(&mut self, spec: TaskSpec) -> Result<()> {
        spec.validate()?;
        self.custom.insert(spec.task_id.clone(), spec);
        Ok(())
    }

    pub fn get(&self, task_id: &str) -> Result<TaskSpec> {
        if let Some(spec) = self.custom.get(task_id) {
            return Ok(spec.clone());
        }
        parse_symmetric_id(task_id)
            .map(|(a, e)| TaskSpec::symmetric(a, e))
            .ok_or_else(|| SdcqlError::UnknownTask(task_id.to_string()))
    }
}

fn parse_symmetric_id(id: &str) -> Option<(usize, usize)> {
    let rest = id.strip_prefix('t')?;
    let (a, e) = rest.split_once('v')?;
    let a: usize = a.parse().ok()?;
    let e: usize = e.parse().ok()?;
    if a >= 1 && e >= 1 {
        Some((a, e))
    } else {
        None
    }
}

/// State of one unit.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitState {
    pub x: f64,
    pub y: f64,
    pub health: f64,
    pub alive: bool,
    pub last_action: Option<usize>,
}

/// Full world state; `rng` only feeds spawn jitter.
#[derive(Debug, Clone)]
pub struct WorldState {
    pub time: usize,
    pub allies: Vec<UnitState>,
    pub enemies: Vec<UnitState>,
    pub rng: ChaCha8Rng,
}

/// Per-agent observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// `F_OWN` own features.
    pub own: Vec<f32>,
    /// `K_i` entity feature vectors of length `F_ENT`, other allies
    /// first (in index order, skipping self), then enemies.
    pub entities: Vec<[f32; F_ENT]>,
    /// Availability over `6 + n_enemies` actions.
    pub avail: Vec<bool>,
}

/// Result of one environment step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub terminated: bool,
    pub won: bool,
}

/// A running environment instance. Single-threaded; independent
/// instances may run in parallel.
#[derive(Debug, Clone)]
pub struct SkirmishEnv {
    pub spec: TaskSpec,
    pub state: WorldState,
}

impl SkirmishEnv {
    /// Spawn a fresh episode: allies in the left third, enemies in the
    /// right third, positions jittered by the seeded RNG.
    pub fn reset(spec: &TaskSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut r = rng::stream(seed, "env.reset", 0);
        let spawn = |n: usize, cx: f64, spec: &TaskSpec, r: &mut ChaCha8Rng| -> Vec<UnitState> {
            (0..n)
                .map(|i| {
                    let base_y = spec.arena_h * (i + 1) as f64 / (n + 1) as f64;
                    let jx: f64 = r.random_range(-0.5..0.5);
                    let jy: f64 = r.random_range(-0.5..0.5);
                    UnitState {
                        x: (cx + jx).clamp(0.5, spec.arena_w - 0.5),
                        y: (base_y + jy).clamp(0.5, spec.arena_h - 0.5),
                        health: spec.unit_health,
                        alive: true,
                        last_action: None,
                    }
                })
                .collect()
        };
        let allies = spawn(spec.n_allies, spec.arena_w / 6.0, spec, &mut r);
        let enemies = spawn(spec.n_enemies, spec.arena_w * 5.0 / 6.0, spec, &mut r);
        Ok(SkirmishEnv {
            spec: spec.clone(),
            state: WorldState {
                time: 0,
                allies,
                enemies,
                rng: r,
            },
        })
    }

    pub fn done(&self) -> bool {
        self.state.time >= self.spec.episode_limit
            || self.state.allies.iter().all(|u| !u.alive)
            || self.state.enemies.iter().all(|u| !u.alive)
    }

    /// Availability mask for one agent.
    pub fn available_actions(&self, agent: usize) -> Vec<bool> {
        let me = &self.state.allies[agent];
        let mut avail = vec![false; self.spec.n_actions()];
        if !me.alive {
            avail[ACT_NOOP] = true;
            return avail;
        }
        for a in avail.iter_mut().take(N_OWN_ACTIONS).skip(1) {
            *a = true;
        }
        for (k, enemy) in self.state.enemies.iter().enumerate() {
            if enemy.alive {
                let d = dist(me, enemy);
                avail[N_OWN_ACTIONS + k] = d <= self.spec.attack_range;
            }
        }
        avail
    }

    /// Observation for one agent.
    pub fn observe(&self, agent: usize) -> Observation {
        let spec = &self.spec;
        let me = &self.state.allies[agent];
        let avail = self.available_actions(agent);
        if !me.alive {
            return Observation {
                own: vec![0.0; F_OWN],
                entities: vec![[0.0; F_ENT]; spec.k_entities()],
                avail,
            };
        }
        let mut own = vec![0.0f32; F_OWN];
        own[0] = (me.health / spec.unit_health) as f32;
        own[1] = (me.x / spec.arena_w) as f32;
        own[2] = (me.y / spec.arena_h) as f32;
        match me.last_action {
            Some(a) if a < N_OWN_ACTIONS => own[3 + a] = 1.0,
            Some(_) => own[9] = 1.0,
            None => {}
        }
        let mut entities = Vec::with_capacity(spec.k_entities());
        for (j, unit) in self.state.allies.iter().enumerate() {
            if j == agent {
                continue;
            }
            entities.push(entity_features(spec, me, unit, false));
        }
        for unit in &self.state.enemies {
            entities.push(entity_features(spec, me, unit, true));
        }
        Observation {
            own,
            entities,
            avail,
        }
    }

    pub fn observations(&self) -> Vec<Observation> {
        (0..self.spec.n_allies).map(|i| self.observe(i)).collect()
    }

    /// One absolute-feature token per unit (allies first), for the
    /// mixing network.
    pub fn state_tokens(&self) -> Vec<[f32; F_ENT]> {
        let spec = &self.spec;
        let token = |u: &UnitState, is_enemy: bool| -> [f32; F_ENT] {
            if !u.alive {
                return [0.0; F_ENT];
            }
            [
                1.0,
                (u.x / spec.arena_w) as f32,
                (u.y / spec.arena_h) as f32,
                (u.health / spec.unit_health) as f32,
                if is_enemy { 1.0 } else { 0.0 },
                0.0,
            ]
        };
        self.state
            .allies
            .iter()
            .map(|u| token(u, false))
            .chain(self.state.enemies.iter().map(|u| token(u, true)))
            .collect()
    }

    /// Advance the world by one joint action.
    pub fn step(&mut self, joint_action: &[usize]) -> Result<StepOutcome> {
        assert_eq!(joint_action.len(), self.spec.n_allies);
        for (agent, &action) in joint_action.iter().enumerate() {
            let avail = self.available_actions(agent);
            if action >= avail.len() || !avail[action] {
                return Err(SdcqlError::UnavailableAction { agent, action });
            }
        }

        // Enemy script decides from the pre-step state.
        let enemy_actions: Vec<EnemyAction> = (0..self.spec.n_enemies)
            .map(|k| self.enemy_decision(k))
            .collect();

        let spec = self.spec.clone();
        // Movement phase (simultaneous, no collision).
        for (i, &action) in joint_action.iter().enumerate() {
            let u = &mut self.state.allies[i];
            if u.alive {
                apply_move(u, action, &spec);
            }
        }
        for (k, act) in enemy_actions.iter().enumerate() {
            if let EnemyAction::Move(dir) = act {
                let u = &mut self.state.enemies[k];
                if u.alive {
                    apply_move(u, *dir, &spec);
                }
            }
        }

        // Attack phase: both sides' attacks land simultaneously (a unit
        // killed this step still deals its damage). Damage is capped at
        // the target's remaining health so dealt == health lost.
        let mut dealt = 0.0f64;
        let mut pending_enemy_health: Vec<f64> =
            self.state.enemies.iter().map(|u| u.health).collect();
        for (i, &action) in joint_action.iter().enumerate() {
            if !self.state.allies[i].alive || action < N_OWN_ACTIONS {
                continue;
            }
            let k = action - N_OWN_ACTIONS;
            let hit = spec.damage.min(pending_enemy_health[k]);
            pending_enemy_health[k] -= hit;
            dealt += hit;
        }
        let mut pending_ally_health: Vec<f64> =
            self.state.allies.iter().map(|u| u.health).collect();
        for (k, act) in enemy_actions.iter().enumerate() {
            if !self.state.enemies[k].alive {
                continue;
            }
            if let EnemyAction::Attack(target) = act {
                let hit = spec.damage.min(pending_ally_health[*target]);
                pending_ally_health[*target] -= hit;
            }
        }

        let mut kills = 0usize;
        for (k, u) in self.state.enemies.iter_mut().enumerate() {
            if u.alive && pending_enemy_health[k] <= 0.0 {
                kills += 1;
            }
            u.health = pending_enemy_health[k];
            u.alive = u.health > 0.0;
        }
        for (i, u) in self.state.allies.iter_mut().enumerate() {
            u.health = pending_ally_health[i];
            u.alive = u.health > 0.0;
        }

        for (i, &action) in joint_action.iter().enumerate() {
            self.state.allies[i].last_action = Some(action);
        }
        for (k, act) in enemy_actions.iter().enumerate() {
            self.state.enemies[k].last_action = Some(match act {
                EnemyAction::Idle => ACT_NOOP,
                EnemyAction::Move(d) => *d,
                EnemyAction::Attack(_) => N_OWN_ACTIONS,
            });
        }

        self.state.time += 1;
        let won = self.state.enemies.iter().all(|u| !u.alive);
        let lost = self.state.allies.iter().all(|u| !u.alive);
        let terminated = won || lost || self.state.time >= spec.episode_limit;
        let reward = spec.reward_scale()
            * (dealt + 10.0 * spec.unit_health / 10.0 * kills as f64 + if won { 200.0 } else { 0.0 });
        Ok(StepOutcome {
            reward,
            terminated,
            won,
        })
    }

    fn enemy_decision(&self, k: usize) -> EnemyAction {
        let me = &self.state.enemies[k];
        if !me.alive {
            return EnemyAction::Idle;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, ally) in self.state.allies.iter().enumerate() {
            if !ally.alive {
                continue;
            }
            let d = dist(me, ally);
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        let Some((target, d)) = best else {
            return EnemyAction::Idle;
        };
        if d <= self.spec.attack_range {
            return EnemyAction::Attack(target);
        }
        let ally = &self.state.allies[target];
        let dx = ally.x - me.x;
        let dy = ally.y - me.y;
        let dir = if dx.abs() >= dy.abs() {
            if dx >= 0.0 {
                ACT_EAST
            } else {
                ACT_WEST
            }
        } else if dy >= 0.0 {
            ACT_NORTH
        } else {
            ACT_SOUTH
        };
        EnemyAction::Move(dir)
    }
}

#[derive(Debug, Clone, Copy)]
enum EnemyAction {
    Idle,
    Move(usize),
    Attack(usize),
}

fn dist(a: &UnitState, b: &UnitState) -> f64 {
    ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt()
}

fn entity_features(spec: &TaskSpec, me: &UnitState, other: &UnitState, is_enemy: bool) -> [f32; F_ENT] {
    if !other.alive {
        return [0.0; F_ENT];
    }
    let d = dist(me, other);
    if d > spec.sight_range {
        return [0.0; F_ENT];
    }
    [
        1.0,
        (d / spec.sight_range) as f32,
        ((other.x - me.x) / spec.sight_range) as f32,
        ((other.y - me.y) / spec.sight_range) as f32,
        (other.health / spec.unit_health) as f32,
        if is_enemy { 1.0 } else { 0.0 },
    ]
}

fn apply_move(u: &mut UnitState, action: usize, spec: &TaskSpec) {
    match action {
        ACT_NORTH => u.y += spec.move_speed,
        ACT_SOUTH => u.y -= spec.move_speed,
        ACT_EAST => u.x += spec.move_speed,
        ACT_WEST => u.x -= spec.move_speed,
        _ => {}
    }
    u.x = u.x.clamp(0.0, spec.arena_w);
    u.y = u.y.clamp(0.0, spec.arena_h);
}

/// Behavior policy tiers for dataset generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyKind {
    /// Focus-fire with retreat at low health.
    Expert,
    /// Expert with probability `1 - eps`, uniform-available otherwise.
    Medium { eps: f64 },
    /// Uniform over available actions.
    Random,
}

/// Fraction of full health below which the expert retreats.
const RETREAT_HEALTH_FRAC: f32 = 0.3;

/// Scripted behavior policy over one agent's observation.
pub fn scripted_policy(
    obs: &Observation,
    spec: &TaskSpec,
    kind: PolicyKind,
    rng: &mut ChaCha8Rng,
) -> usize {
    match kind {
        PolicyKind::Expert => expert_action(obs, spec),
        PolicyKind::Medium { eps } => {
            if rng.random::<f64>() < eps {
                uniform_available(obs, rng)
            } else {
                expert_action(obs, spec)
            }
        }
        PolicyKind::Random => uniform_available(obs, rng),
    }
}

fn uniform_available(obs: &Observation, rng: &mut ChaCha8Rng) -> usize {
    let options: Vec<usize> = obs
        .avail
        .iter()
        .enumerate()
        .filter_map(|(i, &a)| a.then_some(i))
        .collect();
    options[rng.random_range(0..options.len())]
}

fn expert_action(obs: &Observation, spec: &TaskSpec) -> usize {
    if !obs.avail[ACT_STOP] {
        return ACT_NOOP; // dead
    }
    let k_allies = spec.n_allies - 1;
    // Nearest visible enemy by entity features.
    let mut nearest: Option<(usize, f32)> = None;
    for (e, ent) in obs.entities.iter().enumerate().skip(k_allies) {
        if ent[0] > 0.0 {
            let d = ent[1];
            if nearest.map_or(true, |(_, bd)| d < bd) {
                nearest = Some((e, d));
            }
        }
    }

    // Retreat when hurt and an enemy is close.
    if obs.own[0] < RETREAT_HEALTH_FRAC {
        if let Some((e, d)) = nearest {
            let abs_dist = f64::from(d) * spec.sight_range;
            if abs_dist <= spec.attack_range + 1.0 {
                let ent = &obs.entities[e];
                return away_direction(ent[2], ent[3]);
            }
        }
    }

    // Focus fire: attack the lowest-health enemy in range.
    let mut best_attack: Option<(usize, f32)> = None;
    for k in 0..spec.n_enemies {
        if obs.avail[N_OWN_ACTIONS + k] {
            let health = obs.entities[k_allies + k][4];
            if best_attack.map_or(true, |(_, bh)| health < bh) {
                best_attack = Some((k, health));
            }
        }
    }
    if let Some((k, _)) = best_attack {
        return N_OWN_ACTIONS + k;
    }

    // Advance toward the nearest visible enemy, else push east toward
    // the enemy side of the arena.
    if let Some((e, _)) = nearest {
        let ent = &obs.entities[e];
        return toward_direction(ent[2], ent[3]);
    }
    if obs.own[1] < 0.95 {
        ACT_EAST
    } else {
        ACT_STOP
    }
}

fn toward_direction(rel_x: f32, rel_y: f32) -> usize {
    if rel_x.abs() >= rel_y.abs() {
        if rel_x >= 0.0 {
            ACT_EAST
        } else {
            ACT_WEST
        }
    } else if rel_y >= 0.0 {
        ACT_NORTH
    } else {
        ACT_SOUTH
    }
}

fn away_direction(rel_x: f32, rel_y: f32) -> usize {
    match toward_direction(rel_x, rel_y) {
        ACT_EAST => ACT_WEST,
        ACT_WEST => ACT_EAST,
        ACT_NORTH => ACT_SOUTH,
        _ => ACT_NORTH,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t3v3() -> TaskSpec {
        TaskSpec::symmetric(3, 3)
    }

    #[test]
    fn reset_layout_counts() {
        let env = SkirmishEnv::reset(&t3v3(), 0).unwrap();
        let obs = env.observations();
        assert_eq!(obs.len(), 3);
        for o in &obs {
            assert_eq!(o.entities.len(), 5);
            assert_eq!(o.avail.len(), 9);
            assert_eq!(o.own.len(), F_OWN);
        }
        let t8 = TaskSpec::symmetric(8, 8);
        let env8 = SkirmishEnv::reset(&t8, 1).unwrap();
        assert_eq!(env8.observe(0).avail.len(), 14);
        assert_eq!(env8.state_tokens().len(), 16);
    }

    #[test]
    fn reset_is_deterministic() {
        let a = SkirmishEnv::reset(&t3v3(), 0).unwrap();
        let b = SkirmishEnv::reset(&t3v3(), 0).unwrap();
        assert_eq!(a.observations(), b.observations());
        let c = SkirmishEnv::reset(&t3v3(), 1).unwrap();
        assert_ne!(a.observations(), c.observations());
    }

    #[test]
    fn step_is_deterministic() {
        let mut a = SkirmishEnv::reset(&t3v3(), 7).unwrap();
        let mut b = SkirmishEnv::reset(&t3v3(), 7).unwrap();
        let joint = vec![ACT_EAST; 3];
        let oa = a.step(&joint).unwrap();
        let ob = b.step(&joint).unwrap();
        assert_eq!(oa, ob);
        assert_eq!(a.observations(), b.observations());
    }

    #[test]
    fn noop_far_apart_gives_zero_reward() {
        let mut env = SkirmishEnv::reset(&t3v3(), 0).unwrap();
        let out = env.step(&vec![ACT_STOP; 3]).unwrap();
        assert_eq!(out.reward, 0.0);
        assert!(!out.terminated);
    }

    #[test]
    fn masks_follow_invariants() {
        let spec = t3v3();
        let mut env = SkirmishEnv::reset(&spec, 0).unwrap();
        // Alive, no enemy in range: moves available, attacks not.
        let avail = env.available_actions(0);
        assert!(!avail[ACT_NOOP]);
        assert!(avail[1..6].iter().all(|&a| a));
        assert!(avail[6..].iter().all(|&a| !a));
        // Dead agent: only no-op.
        env.state.allies[0].health = 0.0;
        env.state.allies[0].alive = false;
        let avail = env.available_actions(0);
        assert!(avail[ACT_NOOP]);
        assert!(avail[1..].iter().all(|&a| !a));
        assert_eq!(env.observe(0).own, vec![0.0; F_OWN]);
    }

    #[test]
    fn attack_range_rule() {
        let spec = t3v3();
        let mut env = SkirmishEnv::reset(&spec, 0).unwrap();
        // Put enemy 2 at distance 2.5 from agent 0.
        let (x, y) = (env.state.allies[0].x, env.state.allies[0].y);
        env.state.enemies[2].x = x + 2.5;
        env.state.enemies[2].y = y;
        let avail = env.available_actions(0);
        assert!(avail[8]);
        assert!(!avail[6] && !avail[7]);
    }

    #[test]
    fn stepping_unavailable_action_errors() {
        let mut env = SkirmishEnv::reset(&t3v3(), 0).unwrap();
        let err = env.step(&[6, ACT_STOP, ACT_STOP]).unwrap_err();
        assert!(matches!(err, SdcqlError::UnavailableAction { agent: 0, action: 6 }));
    }

    #[test]
    fn damage_conservation() {
        let spec = t3v3();
        let mut env = SkirmishEnv::reset(&spec, 3).unwrap();
        // Move everyone adjacent to enemy 0 and focus it down to check
        // capping: 3 attackers, enemy at 2 health loses exactly 2.
        for i in 0..3 {
            env.state.allies[i].x = env.state.enemies[0].x - 1.0 - 0.1 * i as f64;
            env.state.allies[i].y = env.state.enemies[0].y;
        }
        env.state.enemies[0].health = 2.0;
        // Keep other enemies far away so they cannot interfere.
        for k in 1..3 {
            env.state.enemies[k].x = spec.arena_w;
            env.state.enemies[k].y = spec.arena_h;
        }
        let before: f64 = env.state.enemies.iter().map(|u| u.health).sum();
        let out = env.step(&[6, 6, 6]).unwrap();
        let after: f64 = env.state.enemies.iter().map(|u| u.health).sum();
        assert!((before - after - 2.0).abs() < 1e-12);
        // Reward covers 2 damage + one kill, no win yet.
        let expect = spec.reward_scale() * (2.0 + 10.0);
        assert!((out.reward - expect).abs() < 1e-12);
        assert!(!out.won);
    }

    #[test]
    fn win_reward_and_termination() {
        let spec = t3v3();
        let mut env = SkirmishEnv::reset(&spec, 3).unwrap();
        for k in 0..3 {
            env.state.enemies[k].health = 1.0;
            env.state.enemies[k].x = env.state.allies[k].x + 1.0;
            env.state.enemies[k].y = env.state.allies[k].y;
        }
        let out = env.step(&[6, 7, 8]).unwrap();
        assert!(out.won && out.terminated);
        let expect = spec.reward_scale() * (3.0 + 30.0 + 200.0);
        assert!((out.reward - expect).abs() < 1e-12);
    }

    #[test]
    fn expert_retreats_when_hurt() {
        let spec = t3v3();
        let mut env = SkirmishEnv::reset(&spec, 0).unwrap();
        env.state.allies[0].health = 2.0;
        env.state.enemies[0].x = env.state.allies[0].x + 1.0;
        env.state.enemies[0].y = env.state.allies[0].y;
        let obs = env.observe(0);
        let mut r = rng::stream(0, "test", 0);
        let action = scripted_policy(&obs, &spec, PolicyKind::Expert, &mut r);
        // Enemy is east; expert should move west (away).
        assert_eq!(action, ACT_WEST);
    }

    #[test]
    fn expert_focus_fires_lowest_health() {
        let spec = t3v3();
        let mut env = SkirmishEnv::reset(&spec, 0).unwrap();
        let me = env.state.allies[0].clone();
        env.state.enemies[0].x = me.x + 2.0;
        env.state.enemies[0].y = me.y;
        env.state.enemies[0].health = 7.0;
        env.state.enemies[1].x = me.x;
        env.state.enemies[1].y = me.y + 2.0;
        env.state.enemies[1].health = 4.0;
        let obs = env.observe(0);
        let mut r = rng::stream(0, "test", 0);
        let action = scripted_policy(&obs, &spec, PolicyKind::Expert, &mut r);
        assert_eq!(action, N_OWN_ACTIONS + 1);
    }

    /// Run one scripted episode; returns (return, won, length).
    pub(crate) fn run_episode(spec: &TaskSpec, seed: u64, kind: PolicyKind) -> (f64, bool, usize) {
        let mut env = SkirmishEnv::reset(spec, seed).unwrap();
        let mut policy_rng = rng::stream(seed, "episode.policy", 0);
        let mut total = 0.0;
        let mut won = false;
        let mut len = 0;
        loop {
            let joint: Vec<usize> = env
                .observations()
                .iter()
                .map(|o| scripted_policy(o, spec, kind, &mut policy_rng))
                .collect();
            let out = env.step(&joint).unwrap();
            total += out.reward;
            len += 1;
            if out.terminated {
                won = out.won;
                break;
            }
        }
        (total, won, len)
    }

    #[test]
    fn expert_win_rate_oracle() {
        // Monte-Carlo oracle over 256 seeded episodes.
        let spec = t3v3();
        let results = crate::exec::map_indexed(256, |i| {
            run_episode(&spec, i as u64, PolicyKind::Expert)
        });
        let wins = results.iter().filter(|r| r.1).count();
        let avg_return: f64 = results.iter().map(|r| r.0).sum::<f64>() / 256.0;
        assert!(
            wins as f64 / 256.0 >= 0.9,
            "expert win rate {} too low",
            wins as f64 / 256.0
        );
        assert!(avg_return >= 18.0 && avg_return <= 20.0 + 1e-9);
    }

    #[test]
    fn return_bound_holds_across_tiers() {
        let spec = t3v3();
        for (i, kind) in [
            PolicyKind::Expert,
            PolicyKind::Medium { eps: 0.5 },
            PolicyKind::Random,
        ]
        .iter()
        .enumerate()
        {
            for s in 0..20 {
                let (ret, _, len) = run_episode(&spec, (i * 100 + s) as u64, *kind);
                assert!(ret <= spec.max_return() + 1e-9, "return {ret} exceeds bound");
                assert!(len <= spec.episode_limit);
            }
        }
    }

    #[test]
    fn registry_parses_and_validates() {
        let reg = TaskRegistry::new();
        assert_eq!(reg.get("t3v3").unwrap().n_allies, 3);
        assert_eq!(reg.get("t12v7").unwrap().n_enemies, 7);
        assert!(reg.get("3v3").is_err());
        assert!(reg.get("t0v3").is_err());
        let bad = TaskSpec {
            sight_range: 3.0,
            attack_range: 6.0,
            ..TaskSpec::symmetric(2, 2)
        };
        assert!(bad.validate().is_err());
    }
}
