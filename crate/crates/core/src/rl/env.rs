use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::group::{ActionKind, GroupAction};
use crate::rng::StreamRng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Step {
    pub reward: f64,
    pub done: bool,
}

/// An episodic environment with a finite action set and a symmetry group
/// acting on observations and actions.
pub trait Env: Clone + Send + Sync {
    fn num_actions(&self) -> usize;
    fn observe(&self) -> Tensor;
    fn step(&mut self, action: usize) -> Step;
    /// Starts a new episode from the environment's start distribution.
    fn reset(&mut self, rng: &mut StreamRng);
    /// Action of the symmetry group on observations.
    fn state_action(&self) -> GroupAction;
    /// Action of the same group on the action index set.
    fn action_action(&self) -> GroupAction;
    /// The same environment with its current state moved by `g`.
    fn transformed(&self, g: usize) -> Self;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Gridworld,
    Balance,
}

/// Which cells episodes may start from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartSet {
    /// One rotation-quadrant of the grid.
    Quadrant,
    All,
}

/// Square grid with the goal at the centre and four obstacles placed
/// symmetrically under quarter turns. Actions: up, right, down, left.
#[derive(Clone, Debug, PartialEq)]
pub struct Gridworld {
    n: usize,
    agent: (usize, usize),
    steps: usize,
    starts: StartSet,
}

pub const STEP_PENALTY: f64 = -0.01;
pub const GOAL_REWARD: f64 = 1.0;

impl Gridworld {
    pub fn new(n: usize, starts: StartSet) -> Self {
        assert!(n >= 5 && n % 2 == 1, "side must be odd and at least 5");
        Self {
            n,
            agent: (0, 0),
            steps: 0,
            starts,
        }
    }

    pub fn side(&self) -> usize {
        self.n
    }

    pub fn goal(&self) -> (usize, usize) {
        (self.n / 2, self.n / 2)
    }

    pub fn agent(&self) -> (usize, usize) {
        self.agent
    }

    pub fn max_steps(&self) -> usize {
        4 * self.n
    }

    pub fn is_obstacle(&self, (r, c): (usize, usize)) -> bool {
        let m = self.n as isize / 2;
        let (dr, dc) = (r as isize - m, c as isize - m);
        // (−1, −2) and its quarter turns
        matches!((dr, dc), (-1, -2) | (2, -1) | (1, 2) | (-2, 1))
    }

    fn in_quadrant(&self, (r, c): (usize, usize)) -> bool {
        let m = self.n as isize / 2;
        (r as isize) < m && (c as isize) <= m
    }

    /// Free cells other than the goal, restricted to `set`.
    pub fn start_cells(&self, set: StartSet) -> Vec<(usize, usize)> {
        (0..self.n)
            .flat_map(|r| (0..self.n).map(move |c| (r, c)))
            .filter(|&p| p != self.goal() && !self.is_obstacle(p))
            .filter(|&p| set == StartSet::All || self.in_quadrant(p))
            .collect()
    }

    pub fn place(&mut self, cell: (usize, usize)) {
        assert!(cell.0 < self.n && cell.1 < self.n && !self.is_obstacle(cell));
        self.agent = cell;
        self.steps = 0;
    }

    /// Shortest path length (moves) from `cell` to the goal.
    pub fn shortest_path(&self, cell: (usize, usize)) -> Option<usize> {
        let mut dist = vec![usize::MAX; self.n * self.n];
        let mut queue = std::collections::VecDeque::new();
        dist[cell.0 * self.n + cell.1] = 0;
        queue.push_back(cell);
        while let Some(p) = queue.pop_front() {
            if p == self.goal() {
                return Some(dist[p.0 * self.n + p.1]);
            }
            for a in 0..4 {
                let q = self.next(p, a);
                if dist[q.0 * self.n + q.1] == usize::MAX {
                    dist[q.0 * self.n + q.1] = dist[p.0 * self.n + p.1] + 1;
                    queue.push_back(q);
                }
            }
        }
        None
    }

    fn next(&self, (r, c): (usize, usize), action: usize) -> (usize, usize) {
        let (r, c) = (r as isize, c as isize);
        let (nr, nc) = match action {
            0 => (r - 1, c),
            1 => (r, c + 1),
            2 => (r + 1, c),
            3 => (r, c - 1),
            _ => panic!("action {action} out of range"),
        };
        let n = self.n as isize;
        if nr < 0 || nc < 0 || nr >= n || nc >= n || self.is_obstacle((nr as usize, nc as usize)) {
            (r as usize, c as usize)
        } else {
            (nr as usize, nc as usize)
        }
    }
}

impl Env for Gridworld {
    fn num_actions(&self) -> usize {
        4
    }

    /// `[3, n, n]`: agent, goal and obstacle planes.
    fn observe(&self) -> Tensor {
        let n = self.n;
        let mut data = vec![0.0; 3 * n * n];
        data[self.agent.0 * n + self.agent.1] = 1.0;
        let g = self.goal();
        data[n * n + g.0 * n + g.1] = 1.0;
        for r in 0..n {
            for c in 0..n {
                if self.is_obstacle((r, c)) {
                    data[2 * n * n + r * n + c] = 1.0;
                }
            }
        }
        Tensor::new(vec![3, n, n], data).expect("observation shape")
    }

    fn step(&mut self, action: usize) -> Step {
        self.agent = self.next(self.agent, action);
        self.steps += 1;
        let at_goal = self.agent == self.goal();
        Step {
            reward: STEP_PENALTY + if at_goal { GOAL_REWARD } else { 0.0 },
            done: at_goal || self.steps >= self.max_steps(),
        }
    }

    fn reset(&mut self, rng: &mut StreamRng) {
        let cells = self.start_cells(self.starts);
        self.place(cells[rng.gen_range(0..cells.len())]);
    }

    fn state_action(&self) -> GroupAction {
        GroupAction::cyclic(4, ActionKind::Rot90Image).expect("c4")
    }

    /// A quarter turn counter-clockwise sends up to left, right to up, and so on.
    fn action_action(&self) -> GroupAction {
        GroupAction::cyclic(4, ActionKind::ActionPerm { generator: vec![3, 0, 1, 2] }).expect("c4")
    }

    fn transformed(&self, g: usize) -> Self {
        let mut out = self.clone();
        let (mut r, mut c) = self.agent;
        for _ in 0..g % 4 {
            (r, c) = (self.n - 1 - c, r);
        }
        out.agent = (r, c);
        out
    }
}

/// Linearized cart-pole: state `(x, ẋ, θ, θ̇)`, push left or right. The
/// dynamics are odd in the state and the push, so mirroring the state and
/// swapping the actions is an exact symmetry.
#[derive(Clone, Debug, PartialEq)]
pub struct BalanceEnv {
    state: [f64; 4],
    steps: usize,
    pub max_steps: usize,
}

const DT: f64 = 0.02;
const FORCE: f64 = 10.0;
const X_LIMIT: f64 = 2.4;
const THETA_LIMIT: f64 = 0.21;

impl Default for BalanceEnv {
    fn default() -> Self {
        Self {
            state: [0.0; 4],
            steps: 0,
            max_steps: 200,
        }
    }
}

impl BalanceEnv {
    pub fn state(&self) -> [f64; 4] {
        self.state
    }

    pub fn set_state(&mut self, state: [f64; 4]) {
        self.state = state;
        self.steps = 0;
    }

    fn failed(&self) -> bool {
        self.state[0].abs() > X_LIMIT || self.state[2].abs() > THETA_LIMIT
    }
}

impl Env for BalanceEnv {
    fn num_actions(&self) -> usize {
        2
    }

    fn observe(&self) -> Tensor {
        Tensor::vector(self.state.to_vec())
    }

    fn step(&mut self, action: usize) -> Step {
        let u = match action {
            0 => -FORCE,
            1 => FORCE,
            _ => panic!("action {action} out of range"),
        };
        let [x, v, th, w] = self.state;
        // small-angle cart-pole with unit cart, 0.1 pole mass, 0.5 half-length
        let acc = 0.0976 * u - 0.7171 * th;
        let ang = -0.1463 * u + 15.7805 * th;
        self.state = [x + DT * v, v + DT * acc, th + DT * w, w + DT * ang];
        self.steps += 1;
        let failed = self.failed();
        Step {
            reward: 1.0,
            done: failed || self.steps >= self.max_steps,
        }
    }

    fn reset(&mut self, rng: &mut StreamRng) {
        let s = [0; 4].map(|_| rng.gen_range(-0.05..0.05));
        self.set_state(s);
    }

    fn state_action(&self) -> GroupAction {
        GroupAction::cyclic(2, ActionKind::Negate).expect("z2")
    }

    fn action_action(&self) -> GroupAction {
        GroupAction::cyclic(2, ActionKind::ActionPerm { generator: vec![1, 0] }).expect("z2")
    }

    fn transformed(&self, g: usize) -> Self {
        let mut out = self.clone();
        if g % 2 == 1 {
            out.state = self.state.map(|v| -v);
        }
        out
    }
}
