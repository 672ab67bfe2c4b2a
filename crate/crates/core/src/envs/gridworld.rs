//! Slip-gridworld construction.
//!
//! Cells index as s = y*width + x. Actions: 0 = north (y+1), 1 = east
//! (x+1), 2 = south (y−1), 3 = west (x−1). A move that would leave the grid
//! keeps the position. With slip probability q the agent moves in the
//! intended direction with probability 1−q and in each perpendicular
//! direction with probability q/2. Arrival at the goal pays +1, at a trap
//! −1; both are absorbing. The reward table stores the expected arrival
//! bonus of each (s,a), which is also what rollouts emit.

use super::{EnvError, TabularMDP};

const DIRS: [(i64, i64); 4] = [(0, 1), (1, 0), (0, -1), (-1, 0)];

pub fn make_gridworld(
    width: usize,
    height: usize,
    goal: (usize, usize),
    traps: &[(usize, usize)],
    slip_prob: f64,
    gamma: f64,
) -> Result<TabularMDP, EnvError> {
    if width == 0 || height == 0 || width * height < 2 {
        return Err(EnvError::Argument(format!("grid {width}x{height} too small")));
    }
    if !(0.0..1.0).contains(&slip_prob) {
        return Err(EnvError::Argument(format!("slip_prob {slip_prob} outside [0,1)")));
    }
    let inside = |(x, y): (usize, usize)| x < width && y < height;
    if !inside(goal) {
        return Err(EnvError::Argument(format!("goal {goal:?} outside grid")));
    }
    for t in traps {
        if !inside(*t) {
            return Err(EnvError::Argument(format!("trap {t:?} outside grid")));
        }
        if *t == goal {
            return Err(EnvError::Argument(format!("trap {t:?} coincides with goal")));
        }
    }

    let n_states = width * height;
    let idx = |x: usize, y: usize| y * width + x;
    let goal_s = idx(goal.0, goal.1);
    let mut terminal = vec![false; n_states];
    terminal[goal_s] = true;
    for t in traps {
        terminal[idx(t.0, t.1)] = true;
    }
    let bonus = |s: usize| -> f64 {
        if s == goal_s {
            1.0
        } else if terminal[s] {
            -1.0
        } else {
            0.0
        }
    };

    let mut transition = vec![vec![vec![0.0; n_states]; 4]; n_states];
    let mut reward = vec![vec![0.0; 4]; n_states];
    for y in 0..height {
        for x in 0..width {
            let s = idx(x, y);
            if terminal[s] {
                for a in 0..4 {
                    transition[s][a][s] = 1.0;
                }
                continue;
            }
            for a in 0..4 {
                // Destination for a move in direction d, walls blocking.
                let dest = |d: usize| -> usize {
                    let (dx, dy) = DIRS[d];
                    let nx = x as i64 + dx;
                    let ny = y as i64 + dy;
                    if nx < 0 || ny < 0 || nx >= width as i64 || ny >= height as i64 {
                        s
                    } else {
                        idx(nx as usize, ny as usize)
                    }
                };
                transition[s][a][dest(a)] += 1.0 - slip_prob;
                for perp in [(a + 1) % 4, (a + 3) % 4] {
                    transition[s][a][dest(perp)] += slip_prob / 2.0;
                }
                reward[s][a] = transition[s][a]
                    .iter()
                    .enumerate()
                    .map(|(s2, p)| p * bonus(s2))
                    .sum();
            }
        }
    }

    let n_live = terminal.iter().filter(|t| !**t).count();
    let initial_dist: Vec<f64> = terminal
        .iter()
        .map(|t| if *t { 0.0 } else { 1.0 / n_live as f64 })
        .collect();

    let mdp = TabularMDP {
        name: format!("gridworld-{width}x{height}"),
        n_states,
        n_actions: 4,
        transition,
        reward,
        gamma,
        initial_dist,
        terminal,
        max_steps: width * height,
    };
    mdp.validate()?;
    Ok(mdp)
}
