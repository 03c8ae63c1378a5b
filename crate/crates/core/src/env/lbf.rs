//! Level-Based Foraging.
//!
//! Agents and foods sit on distinct grid cells. A food is collected when the
//! agents that choose `Load` while orthogonally adjacent to it have a level
//! sum at least the food's level. Reward is normalized so a fully collected
//! episode returns exactly 1.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MultiAgentEnv;
use crate::error::{Error, Result};

pub const N_ACTIONS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    Noop = 0,
    Up = 1,
    Down = 2,
    Left = 3,
    Right = 4,
    Load = 5,
}

impl Action {
    pub const ALL: [Action; N_ACTIONS] = [
        Action::Noop,
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::Load,
    ];

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
            Action::Noop | Action::Load => (0, 0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub grid_height: usize,
    pub grid_width: usize,
    pub n_agents: usize,
    pub n_foods: usize,
    pub max_agent_level: usize,
    pub visibility_radius: usize,
    pub episode_limit: usize,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            grid_height: 8,
            grid_width: 8,
            n_agents: 2,
            n_foods: 1,
            max_agent_level: 3,
            visibility_radius: 2,
            episode_limit: 50,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_height < 3 || self.grid_width < 3 {
            return Err(Error::config("grid must be at least 3x3"));
        }
        if self.n_agents == 0 || self.n_foods == 0 {
            return Err(Error::config("need at least one agent and one food"));
        }
        if self.max_agent_level == 0 {
            return Err(Error::config("max_agent_level must be at least 1"));
        }
        if self.episode_limit == 0 {
            return Err(Error::config("episode_limit must be at least 1"));
        }
        if self.n_agents + self.n_foods > self.grid_height * self.grid_width {
            return Err(Error::config(format!(
                "{}x{} grid cannot hold {} agents and {} foods",
                self.grid_height, self.grid_width, self.n_agents, self.n_foods
            )));
        }
        Ok(())
    }

    pub fn window_side(&self) -> usize {
        2 * self.visibility_radius + 1
    }

    /// `(2r+1)²·3 + 3`.
    pub fn obs_dim(&self) -> usize {
        let s = self.window_side();
        s * s * 3 + 3
    }

    /// Three entries per agent, four per food.
    pub fn state_dim(&self) -> usize {
        3 * self.n_agents + 4 * self.n_foods
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentState {
    pub row: usize,
    pub col: usize,
    pub level: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoodState {
    pub row: usize,
    pub col: usize,
    pub level: usize,
    pub collected: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldState {
    pub agents: Vec<AgentState>,
    pub foods: Vec<FoodState>,
    pub step: usize,
    pub terminated: bool,
}

impl WorldState {
    pub fn total_food_level(&self) -> usize {
        self.foods.iter().map(|f| f.level).sum()
    }

    fn occupied(&self, row: usize, col: usize) -> bool {
        self.agents.iter().any(|a| a.row == row && a.col == col)
            || self
                .foods
                .iter()
                .any(|f| !f.collected && f.row == row && f.col == col)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    /// Episode is over, either because every food was collected or because
    /// the step limit was hit.
    pub terminated: bool,
    /// Every food was collected; a true terminal state with no bootstrap.
    pub all_collected: bool,
}

pub struct LbfEnv {
    config: EnvConfig,
    world: WorldState,
    rng: ChaCha8Rng,
}

impl LbfEnv {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let world = WorldState {
            agents: Vec::new(),
            foods: Vec::new(),
            step: 0,
            terminated: true,
        };
        let mut env = LbfEnv { config, world, rng };
        env.reset();
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    /// Replaces the world state, e.g. to set up a hand-built scenario.
    pub fn set_world(&mut self, world: WorldState) {
        self.world = world;
    }

    /// Samples a fresh initial world from the environment's RNG stream.
    pub fn sample_world(config: &EnvConfig, rng: &mut impl Rng) -> WorldState {
        let cells = config.grid_height * config.grid_width;
        let picks = index::sample(rng, cells, config.n_agents + config.n_foods).into_vec();
        let agents: Vec<AgentState> = picks[..config.n_agents]
            .iter()
            .map(|&c| AgentState {
                row: c / config.grid_width,
                col: c % config.grid_width,
                level: rng.random_range(1..=config.max_agent_level),
            })
            .collect();
        let level_sum: usize = agents.iter().map(|a| a.level).sum();
        let foods = picks[config.n_agents..]
            .iter()
            .map(|&c| FoodState {
                row: c / config.grid_width,
                col: c % config.grid_width,
                level: rng.random_range(1..=level_sum),
                collected: false,
            })
            .collect();
        WorldState {
            agents,
            foods,
            step: 0,
            terminated: false,
        }
    }

    /// Pure transition on an explicit world state.
    pub fn transition(config: &EnvConfig, world: &WorldState, actions: &[usize]) -> Result<(WorldState, StepOutcome)> {
        if world.terminated {
            return Err(Error::contract("step called on a terminated episode"));
        }
        if actions.len() != world.agents.len() {
            return Err(Error::contract(format!(
                "expected {} actions, got {}",
                world.agents.len(),
                actions.len()
            )));
        }
        let actions: Vec<Action> = actions
            .iter()
            .map(|&a| {
                Action::from_index(a).ok_or_else(|| Error::contract(format!("action index {a} out of range")))
            })
            .collect::<Result<_>>()?;

        // Candidate moves are judged against positions at the start of the step.
        let mut targets: Vec<Option<(usize, usize)>> = vec![None; actions.len()];
        for (i, (agent, act)) in world.agents.iter().zip(&actions).enumerate() {
            let (dr, dc) = act.delta();
            if (dr, dc) == (0, 0) {
                continue;
            }
            let r = agent.row as isize + dr;
            let c = agent.col as isize + dc;
            if r < 0 || c < 0 || r >= config.grid_height as isize || c >= config.grid_width as isize {
                continue;
            }
            let (r, c) = (r as usize, c as usize);
            if world.occupied(r, c) {
                continue;
            }
            targets[i] = Some((r, c));
        }
        let mut next = world.clone();
        for i in 0..targets.len() {
            if let Some(t) = targets[i] {
                let contested = targets
                    .iter()
                    .enumerate()
                    .any(|(j, other)| j != i && *other == Some(t));
                if !contested {
                    next.agents[i].row = t.0;
                    next.agents[i].col = t.1;
                }
            }
        }

        let mut collected_level = 0;
        for food in next.foods.iter_mut().filter(|f| !f.collected) {
            let loaders: usize = next
                .agents
                .iter()
                .zip(&actions)
                .filter(|(a, act)| **act == Action::Load && a.row.abs_diff(food.row) + a.col.abs_diff(food.col) == 1)
                .map(|(a, _)| a.level)
                .sum();
            if loaders > 0 && loaders >= food.level {
                food.collected = true;
                collected_level += food.level;
            }
        }

        next.step += 1;
        let all_collected = next.foods.iter().all(|f| f.collected);
        next.terminated = all_collected || next.step >= config.episode_limit;
        let reward = collected_level as f64 / world.total_food_level() as f64;
        Ok((
            next.clone(),
            StepOutcome {
                reward,
                terminated: next.terminated,
                all_collected,
            },
        ))
    }
}

fn norm_coord(x: usize, extent: usize) -> f64 {
    x as f64 / (extent - 1) as f64
}

/// Agent `agent`'s local observation: three `(2r+1)²` planes (teammate level,
/// food level, self marker) in channel-major, row-major order, then own level
/// and own normalized `(row, col)`.
pub fn observe(config: &EnvConfig, world: &WorldState, agent: usize) -> Vec<f64> {
    let side = config.window_side();
    let plane = side * side;
    let radius = config.visibility_radius as isize;
    let me = world.agents[agent];
    let mut obs = vec![0.0; config.obs_dim()];

    let window_index = |row: usize, col: usize| -> Option<usize> {
        let dr = row as isize - me.row as isize;
        let dc = col as isize - me.col as isize;
        (dr.abs() <= radius && dc.abs() <= radius)
            .then(|| ((dr + radius) as usize) * side + (dc + radius) as usize)
    };

    for (j, other) in world.agents.iter().enumerate() {
        if j == agent {
            continue;
        }
        if let Some(k) = window_index(other.row, other.col) {
            obs[k] = other.level as f64;
        }
    }
    for food in world.foods.iter().filter(|f| !f.collected) {
        if let Some(k) = window_index(food.row, food.col) {
            obs[plane + k] = food.level as f64;
        }
    }
    obs[2 * plane + plane / 2] = 1.0;
    obs[3 * plane] = me.level as f64;
    obs[3 * plane + 1] = norm_coord(me.row, config.grid_height);
    obs[3 * plane + 2] = norm_coord(me.col, config.grid_width);
    obs
}

/// Agents' normalized `(row, col, level)` followed by foods' normalized
/// `(row, col, level, collected)`. Collected foods keep their last position.
pub fn global_state(config: &EnvConfig, world: &WorldState) -> Vec<f64> {
    let mut s = Vec::with_capacity(config.state_dim());
    for a in &world.agents {
        s.push(norm_coord(a.row, config.grid_height));
        s.push(norm_coord(a.col, config.grid_width));
        s.push(a.level as f64 / config.max_agent_level as f64);
    }
    let max_food = (config.n_agents * config.max_agent_level) as f64;
    for f in &world.foods {
        s.push(norm_coord(f.row, config.grid_height));
        s.push(norm_coord(f.col, config.grid_width));
        s.push(f.level as f64 / max_food);
        s.push(if f.collected { 1.0 } else { 0.0 });
    }
    s
}

impl MultiAgentEnv for LbfEnv {
    fn n_agents(&self) -> usize {
        self.config.n_agents
    }

    fn n_actions(&self) -> usize {
        N_ACTIONS
    }

    fn obs_dim(&self) -> usize {
        self.config.obs_dim()
    }

    fn state_dim(&self) -> usize {
        self.config.state_dim()
    }

    fn episode_limit(&self) -> usize {
        self.config.episode_limit
    }

    fn reset(&mut self) -> Vec<Vec<f64>> {
        self.world = LbfEnv::sample_world(&self.config, &mut self.rng);
        (0..self.config.n_agents).map(|i| self.observation(i)).collect()
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepOutcome> {
        let (next, outcome) = LbfEnv::transition(&self.config, &self.world, actions)?;
        self.world = next;
        Ok(outcome)
    }

    fn observation(&self, agent: usize) -> Vec<f64> {
        observe(&self.config, &self.world, agent)
    }

    fn global_state(&self) -> Vec<f64> {
        global_state(&self.config, &self.world)
    }

    fn avail_actions(&self, _agent: usize) -> Vec<bool> {
        vec![true; N_ACTIONS]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EnvConfig {
        EnvConfig::default()
    }

    fn world(agents: &[(usize, usize, usize)], foods: &[(usize, usize, usize)]) -> WorldState {
        WorldState {
            agents: agents
                .iter()
                .map(|&(row, col, level)| AgentState { row, col, level })
                .collect(),
            foods: foods
                .iter()
                .map(|&(row, col, level)| FoodState {
                    row,
                    col,
                    level,
                    collected: false,
                })
                .collect(),
            step: 0,
            terminated: false,
        }
    }

    #[test]
    fn same_seed_same_world() {
        let a = LbfEnv::new(cfg()).unwrap();
        let b = LbfEnv::new(cfg()).unwrap();
        assert_eq!(a.world(), b.world());
    }

    #[test]
    fn reset_places_distinct_entities_with_solvable_levels() {
        let mut env = LbfEnv::new(cfg()).unwrap();
        for _ in 0..200 {
            env.reset();
            let w = env.world();
            let mut cells: Vec<_> = w.agents.iter().map(|a| (a.row, a.col)).collect();
            cells.extend(w.foods.iter().map(|f| (f.row, f.col)));
            cells.sort();
            cells.dedup();
            assert_eq!(cells.len(), 3);
            let lvl: usize = w.agents.iter().map(|a| a.level).sum();
            assert!(w.agents.iter().all(|a| (1..=3).contains(&a.level)));
            assert!(w.foods.iter().all(|f| f.level >= 1 && f.level <= lvl));
            assert_eq!(w.step, 0);
        }
    }

    #[test]
    fn observation_length_for_radius_two() {
        assert_eq!(cfg().obs_dim(), 78);
        let env = LbfEnv::new(cfg()).unwrap();
        assert_eq!(env.observation(0).len(), 78);
    }

    #[test]
    fn too_small_grid_is_rejected() {
        let c = EnvConfig {
            grid_height: 3,
            grid_width: 3,
            n_agents: 5,
            n_foods: 5,
            ..cfg()
        };
        assert!(matches!(LbfEnv::new(c), Err(Error::Config(_))));
        let c = EnvConfig {
            grid_height: 2,
            ..cfg()
        };
        assert!(LbfEnv::new(c).is_err());
    }

    #[test]
    fn lone_weak_agent_cannot_collect() {
        let w = world(&[(2, 2, 1), (6, 6, 1)], &[(2, 3, 3)]);
        let (next, out) = LbfEnv::transition(&cfg(), &w, &[5, 0]).unwrap();
        assert_eq!(out.reward, 0.0);
        assert!(!next.foods[0].collected);
        assert!(!out.terminated);
    }

    #[test]
    fn joint_load_collects_and_terminates() {
        let w = world(&[(2, 2, 1), (3, 3, 2)], &[(2, 3, 3)]);
        let (next, out) = LbfEnv::transition(&cfg(), &w, &[5, 5]).unwrap();
        assert_eq!(out.reward, 1.0);
        assert!(out.terminated && out.all_collected);
        assert!(next.foods[0].collected);
    }

    #[test]
    fn non_loading_neighbour_does_not_count() {
        let w = world(&[(2, 2, 1), (3, 3, 2)], &[(2, 3, 3)]);
        let (_, out) = LbfEnv::transition(&cfg(), &w, &[5, 0]).unwrap();
        assert_eq!(out.reward, 0.0);
    }

    #[test]
    fn walls_and_occupied_cells_block_moves() {
        let w = world(&[(0, 4, 1), (5, 5, 1)], &[(5, 4, 1)]);
        let (next, _) = LbfEnv::transition(&cfg(), &w, &[1, 3]).unwrap();
        assert_eq!((next.agents[0].row, next.agents[0].col), (0, 4));
        // Left of (5,5) is the food.
        assert_eq!((next.agents[1].row, next.agents[1].col), (5, 5));
    }

    #[test]
    fn contested_cell_cancels_all_movers() {
        let w = world(&[(2, 2, 1), (2, 4, 1)], &[(7, 7, 1)]);
        let (next, _) = LbfEnv::transition(&cfg(), &w, &[4, 3]).unwrap();
        assert_eq!(next.agents, w.agents);
    }

    #[test]
    fn cannot_move_into_cell_being_vacated() {
        let w = world(&[(2, 2, 1), (2, 3, 1)], &[(7, 7, 1)]);
        let (next, _) = LbfEnv::transition(&cfg(), &w, &[4, 4]).unwrap();
        assert_eq!((next.agents[0].row, next.agents[0].col), (2, 2));
        assert_eq!((next.agents[1].row, next.agents[1].col), (2, 4));
    }

    #[test]
    fn step_limit_terminates_and_rejects_further_steps() {
        let c = EnvConfig {
            episode_limit: 2,
            ..cfg()
        };
        let w = world(&[(2, 2, 1), (5, 5, 1)], &[(7, 7, 3)]);
        let (w, out) = LbfEnv::transition(&c, &w, &[0, 0]).unwrap();
        assert!(!out.terminated);
        let (w, out) = LbfEnv::transition(&c, &w, &[0, 0]).unwrap();
        assert!(out.terminated && !out.all_collected);
        assert!(matches!(LbfEnv::transition(&c, &w, &[0, 0]), Err(Error::Contract(_))));
    }

    #[test]
    fn out_of_range_action_is_contract_violation() {
        let w = world(&[(2, 2, 1), (5, 5, 1)], &[(7, 7, 3)]);
        assert!(matches!(LbfEnv::transition(&cfg(), &w, &[6, 0]), Err(Error::Contract(_))));
        assert!(LbfEnv::transition(&cfg(), &w, &[0]).is_err());
    }

    #[test]
    fn observation_window_contents() {
        let c = cfg();
        let w = world(&[(4, 4, 2), (5, 6, 3)], &[(4, 7, 2)]);
        let o = observe(&c, &w, 0);
        let plane = 25;
        // Teammate at (+1, +2): window row 3, col 4.
        assert_eq!(o[3 * 5 + 4], 3.0);
        // Food three cells right is invisible.
        assert!(o[plane..2 * plane].iter().all(|&v| v == 0.0));
        let marks: Vec<_> = o[2 * plane..3 * plane]
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .collect();
        assert_eq!(marks, vec![(12, &1.0)]);
        assert_eq!(&o[75..], &[2.0, 4.0 / 7.0, 4.0 / 7.0]);
        assert_eq!(o, observe(&c, &w, 0));
    }

    #[test]
    fn global_state_layout() {
        let c = cfg();
        let mut w = world(&[(0, 7, 3), (7, 0, 1)], &[(3, 4, 2)]);
        let s = global_state(&c, &w);
        assert_eq!(s.len(), 10);
        assert_eq!(&s[..3], &[0.0, 1.0, 1.0]);
        assert_eq!(s[9], 0.0);
        w.foods[0].collected = true;
        let s2 = global_state(&c, &w);
        assert_eq!(s2[9], 1.0);
        assert_eq!(&s2[6..9], &s[6..9]);

        let swapped = WorldState {
            agents: vec![w.agents[1], w.agents[0]],
            ..w.clone()
        };
        let s3 = global_state(&c, &swapped);
        assert_eq!(&s3[..3], &s2[3..6]);
        assert_eq!(&s3[3..6], &s2[..3]);
    }
}
