//! Benchmark games: vehicle platooning and unsignalized intersection crossing.
//!
//! Both scenarios use error coordinates relative to a predecessor (or to the
//! reference speed for leaders). [`Fleet`] converts between those and
//! physical positions/velocities, and every velocity/gap constraint is an
//! affine row in the error state generated from it.
//!
//! The numeric defaults (reference speed, bounds, spacing, initial
//! conditions) are implementation defaults, not calibrated values.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{prestabilize, ConstraintSpec, GameError, LqGame, RowClass, RowTag};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario parameters: {0}")]
    InvalidParams(String),
    #[error("precedence is cyclic: {0}")]
    CyclicPrecedence(String),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error("malformed scenario JSON: {0}")]
    Json(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ScenarioError> {
    Err(ScenarioError::InvalidParams(msg.into()))
}

/// How one vehicle's physical state is recovered from the error state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Link {
    /// `v = v_ref − x[vel]`.
    Leader { vel: usize },
    /// `p = p_pred − x[gap] − spacing − headway·v`, `v = v_pred − x[vel]`.
    Follower { pred: usize, gap: usize, vel: usize, spacing: f64, headway: f64 },
}

/// Physical interpretation of a scenario's state vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fleet {
    pub v_ref: f64,
    pub tau_s: f64,
    pub d_min: f64,
    pub links: Vec<Link>,
    pub state_dim: usize,
}

impl Fleet {
    pub fn vehicles(&self) -> usize {
        self.links.len()
    }

    pub fn predecessor(&self, i: usize) -> Option<usize> {
        match self.links[i] {
            Link::Leader { .. } => None,
            Link::Follower { pred, .. } => Some(pred),
        }
    }

    /// `(c, w)` with `vᵢ = c + w·x`.
    pub fn velocity_row(&self, i: usize) -> (DVector<f64>, f64) {
        match self.links[i] {
            Link::Leader { vel } => {
                let mut w = DVector::zeros(self.state_dim);
                w[vel] = -1.0;
                (w, self.v_ref)
            }
            Link::Follower { pred, vel, .. } => {
                let (mut w, c) = self.velocity_row(pred);
                w[vel] -= 1.0;
                (w, c)
            }
        }
    }

    /// `(c, w)` with `p_pred − pᵢ = c + w·x`; `None` for leaders.
    pub fn gap_row(&self, i: usize) -> Option<(DVector<f64>, f64)> {
        match self.links[i] {
            Link::Leader { .. } => None,
            Link::Follower { gap, spacing, headway, .. } => {
                let (v, c) = self.velocity_row(i);
                let mut w = v * headway;
                w[gap] += 1.0;
                Some((w, spacing + headway * c))
            }
        }
    }

    pub fn velocities(&self, x: &DVector<f64>) -> Vec<f64> {
        (0..self.vehicles())
            .map(|i| {
                let (w, c) = self.velocity_row(i);
                c + w.dot(x)
            })
            .collect()
    }

    /// `p_pred − pᵢ` for followers.
    pub fn gaps(&self, x: &DVector<f64>) -> Vec<Option<f64>> {
        (0..self.vehicles()).map(|i| self.gap_row(i).map(|(w, c)| c + w.dot(x))).collect()
    }

    /// Positions given the leaders' positions (follower entries of
    /// `leader_positions` are ignored).
    pub fn positions(&self, x: &DVector<f64>, leader_positions: &[f64]) -> Vec<f64> {
        let gaps = self.gaps(x);
        let mut p: Vec<Option<f64>> = vec![None; self.vehicles()];
        fn resolve(f: &Fleet, i: usize, gaps: &[Option<f64>], lp: &[f64], p: &mut [Option<f64>]) -> f64 {
            if let Some(v) = p[i] {
                return v;
            }
            let v = match f.predecessor(i) {
                None => lp[i],
                Some(j) => resolve(f, j, gaps, lp, p) - gaps[i].expect("follower has a gap"),
            };
            p[i] = Some(v);
            v
        }
        (0..self.vehicles()).map(|i| resolve(self, i, &gaps, leader_positions, &mut p)).collect()
    }

    /// Error state of physical positions and velocities.
    pub fn state_from_physical(&self, p: &[f64], v: &[f64]) -> DVector<f64> {
        let mut x = DVector::zeros(self.state_dim);
        for (i, link) in self.links.iter().enumerate() {
            match *link {
                Link::Leader { vel } => x[vel] = self.v_ref - v[i],
                Link::Follower { pred, gap, vel, spacing, headway } => {
                    x[gap] = p[pred] - p[i] - spacing - headway * v[i];
                    x[vel] = v[pred] - v[i];
                }
            }
        }
        x
    }

    /// Sampled double integrator for the leaders' positions.
    pub fn advance_leaders(&self, leader_positions: &mut [f64], x: &DVector<f64>, accelerations: &[f64]) {
        let v = self.velocities(x);
        for (i, link) in self.links.iter().enumerate() {
            if matches!(link, Link::Leader { .. }) {
                leader_positions[i] += self.tau_s * v[i] + 0.5 * self.tau_s * self.tau_s * accelerations[i];
            }
        }
    }

    /// Gap rows (`d_min − gap ≤ 0`) and velocity bounds as state rows, and
    /// acceleration bounds as stage rows.
    fn constraints(&self, v_bounds: [f64; 2], u_bounds: [f64; 2]) -> ConstraintSpec {
        let n = self.state_dim;
        let mut spec = ConstraintSpec::empty(n, &vec![1; self.vehicles()]);
        for i in 0..self.vehicles() {
            if let Some((w, c)) = self.gap_row(i) {
                spec.push_state_row((-w).as_slice(), self.d_min - c, RowTag::new(RowClass::Distance, i));
            }
            let (w, c) = self.velocity_row(i);
            let tag = RowTag::new(RowClass::Velocity, i);
            spec.push_state_row(w.as_slice(), c - v_bounds[1], tag);
            spec.push_state_row((-&w).as_slice(), v_bounds[0] - c, tag);
        }
        for i in 0..self.vehicles() {
            spec.push_input_bounds(i, u_bounds[0], u_bounds[1]);
        }
        spec
    }
}

/// Initial physical state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicalState {
    pub positions: Vec<f64>,
    pub velocities: Vec<f64>,
}

fn check_common(tau_s: f64, d_min: f64, v_ref: f64, v: [f64; 2], u: [f64; 2]) -> Result<(), ScenarioError> {
    if !(tau_s > 0.0) {
        return invalid("tau_s must be positive");
    }
    if !(d_min > 0.0) {
        return invalid("d_min must be positive");
    }
    if !(v[0] < v_ref && v_ref < v[1]) {
        return invalid(format!("need v_min < v_ref < v_max, got {v:?} and v_ref = {v_ref}"));
    }
    if !(u[0] < 0.0 && 0.0 < u[1]) {
        return invalid(format!("need u_min < 0 < u_max, got {u:?}"));
    }
    Ok(())
}

fn default_sim_steps() -> usize {
    300
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlatooningParams {
    #[serde(rename = "N")]
    pub agents: usize,
    pub tau_s: f64,
    /// Headway times, one per vehicle (the leader's entry is unused).
    pub h: Vec<f64>,
    /// Fixed gaps, one per vehicle (the leader's entry is unused).
    pub d_gap: Vec<f64>,
    pub d_min: f64,
    pub v_ref: f64,
    pub v_bounds: [f64; 2],
    pub u_bounds: [f64; 2],
    pub x0: PhysicalState,
    #[serde(default = "default_sim_steps")]
    pub sim_steps: usize,
}

impl Default for PlatooningParams {
    fn default() -> Self {
        Self {
            agents: 5,
            tau_s: 0.1,
            h: vec![0.5; 5],
            d_gap: vec![5.0; 5],
            d_min: 2.0,
            v_ref: 10.0,
            v_bounds: [0.0, 15.0],
            u_bounds: [-3.0, 3.0],
            x0: PhysicalState {
                positions: vec![0.0, -8.0, -20.0, -26.0, -37.0],
                velocities: vec![8.0, 9.0, 11.0, 7.0, 10.0],
            },
            sim_steps: 300,
        }
    }
}

impl PlatooningParams {
    /// Default parameters for `n` vehicles spaced 10 m apart at 9 m/s.
    pub fn with_agents(n: usize) -> Self {
        let base = Self::default();
        if n == base.agents {
            return base;
        }
        Self {
            agents: n,
            h: vec![0.5; n],
            d_gap: vec![5.0; n],
            x0: PhysicalState {
                positions: (0..n).map(|i| -10.0 * i as f64).collect(),
                velocities: vec![9.0; n],
            },
            ..base
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let n = self.agents;
        if n < 2 {
            return invalid("platooning needs at least two vehicles");
        }
        check_common(self.tau_s, self.d_min, self.v_ref, self.v_bounds, self.u_bounds)?;
        for (name, len) in [
            ("h", self.h.len()),
            ("d_gap", self.d_gap.len()),
            ("x0.positions", self.x0.positions.len()),
            ("x0.velocities", self.x0.velocities.len()),
        ] {
            if len != n {
                return invalid(format!("{name} has {len} entries, expected {n}"));
            }
        }
        if self.h.iter().chain(&self.d_gap).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return invalid("headways and gaps must be nonnegative");
        }
        Ok(())
    }

    pub fn fleet(&self) -> Fleet {
        let links = (0..self.agents)
            .map(|i| match i {
                0 => Link::Leader { vel: 1 },
                _ => Link::Follower { pred: i - 1, gap: 2 * i, vel: 2 * i + 1, spacing: self.d_gap[i], headway: self.h[i] },
            })
            .collect();
        Fleet { v_ref: self.v_ref, tau_s: self.tau_s, d_min: self.d_min, links, state_dim: 2 * self.agents }
    }
}

/// Pre-stabilized platooning game and its initial error state.
pub fn build_platooning(params: &PlatooningParams) -> Result<(LqGame, DVector<f64>), ScenarioError> {
    params.validate()?;
    let n_agents = params.agents;
    let n = 2 * n_agents;
    let tau = params.tau_s;
    let mut a = DMatrix::zeros(n, n);
    a[(1, 1)] = 1.0;
    for i in 1..n_agents {
        let o = 2 * i;
        a[(o, o)] = 1.0;
        a[(o, o + 1)] = tau;
        a[(o + 1, o + 1)] = 1.0;
    }
    let b: Vec<DMatrix<f64>> = (0..n_agents)
        .map(|i| {
            let mut bi = DMatrix::zeros(n, 1);
            if i == 0 {
                bi[(1, 0)] = -tau;
            } else {
                bi[(2 * i, 0)] = -(params.h[i] * tau + tau * tau / 2.0);
                bi[(2 * i + 1, 0)] = -tau;
            }
            if i + 1 < n_agents {
                bi[(2 * i + 2, 0)] = tau * tau / 2.0;
                bi[(2 * i + 3, 0)] = tau;
            }
            bi
        })
        .collect();
    let fleet = params.fleet();
    let spec = fleet.constraints(params.v_bounds, params.u_bounds);
    let game = LqGame::new(a, b, vec![DMatrix::identity(n, n); n_agents], vec![DMatrix::identity(1, 1); n_agents], spec)?;
    // uᵢ = xᵢ[0] + xᵢ[1] on the agent's own block
    let gains: Vec<DMatrix<f64>> = (0..n_agents)
        .map(|i| {
            let mut k = DMatrix::zeros(1, n);
            k[(0, 2 * i)] = 1.0;
            k[(0, 2 * i + 1)] = 1.0;
            k
        })
        .collect();
    let game = prestabilize(&game, &gains)?;
    let x0 = fleet.state_from_physical(&params.x0.positions, &params.x0.velocities);
    Ok((game, x0))
}

/// Approach direction or exit side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Heading {
    N,
    E,
    S,
    W,
}

impl Heading {
    fn index(self) -> usize {
        match self {
            Heading::N => 0,
            Heading::E => 1,
            Heading::S => 2,
            Heading::W => 3,
        }
    }

    fn letter(self) -> char {
        ['N', 'E', 'S', 'W'][self.index()]
    }

    fn from_letter(c: char) -> Option<Self> {
        match c {
            'N' => Some(Heading::N),
            'E' => Some(Heading::E),
            'S' => Some(Heading::S),
            'W' => Some(Heading::W),
            _ => None,
        }
    }
}

/// Entry and exit side, written as two letters (`"NS"` enters from the north
/// and leaves to the south).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Maneuver {
    pub from: Heading,
    pub to: Heading,
}

impl Maneuver {
    /// Entry and exit points on the boundary circle, clockwise:
    /// N_in, N_out, E_in, E_out, S_in, S_out, W_in, W_out.
    fn endpoints(self) -> (usize, usize) {
        (2 * self.from.index(), 2 * self.to.index() + 1)
    }

    /// Paths conflict when they share an entry or exit, or their chords cross.
    pub fn conflicts_with(self, other: Maneuver) -> bool {
        let (a0, a1) = self.endpoints();
        let (b0, b1) = other.endpoints();
        if a0 == b0 || a1 == b1 {
            return true;
        }
        let (lo, hi) = (a0.min(a1), a0.max(a1));
        let inside = |p: usize| lo < p && p < hi;
        inside(b0) != inside(b1)
    }
}

impl fmt::Display for Maneuver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.from.letter(), self.to.letter())
    }
}

impl FromStr for Maneuver {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let chars: Vec<char> = s.chars().collect();
        let parsed = match chars.as_slice() {
            [a, b] => Heading::from_letter(*a).zip(Heading::from_letter(*b)),
            _ => None,
        };
        match parsed {
            Some((from, to)) if from != to => Ok(Maneuver { from, to }),
            _ => Err(format!("invalid maneuver '{s}' (two distinct letters from N, E, S, W)")),
        }
    }
}

impl TryFrom<String> for Maneuver {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Maneuver> for String {
    fn from(m: Maneuver) -> String {
        m.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arrival {
    /// Time the vehicle reaches the intersection, seconds.
    pub time: f64,
    pub maneuver: Maneuver,
    /// Initial longitudinal progress along the vehicle's path (negative
    /// before the intersection), meters.
    pub position: f64,
    pub velocity: f64,
}

/// `χ(i)` for every vehicle (`None` for leaders).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Precedence {
    pub chi: Vec<Option<usize>>,
}

impl Precedence {
    pub fn leaders(&self) -> Vec<usize> {
        (0..self.chi.len()).filter(|&i| self.chi[i].is_none()).collect()
    }

    pub fn is_leader(&self, i: usize) -> bool {
        self.chi[i].is_none()
    }

    /// Every chain must end at a leader.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let n = self.chi.len();
        for start in 0..n {
            let mut i = start;
            for _ in 0..=n {
                match self.chi[i] {
                    None => break,
                    Some(j) if j >= n => {
                        return invalid(format!("vehicle {i} follows nonexistent vehicle {j}"));
                    }
                    Some(j) => i = j,
                }
            }
            if self.chi[i].is_some() {
                return Err(ScenarioError::CyclicPrecedence(format!("vehicle {start} never reaches a leader")));
            }
        }
        Ok(())
    }
}

/// First-come, first-served: `χ(i)` is the latest-arriving vehicle among
/// those that arrive before `i` on a conflicting path. Equal arrival times
/// are ordered by index.
pub fn assign_precedence(arrivals: &[Arrival]) -> Precedence {
    let earlier = |j: usize, i: usize| {
        let (tj, ti) = (arrivals[j].time, arrivals[i].time);
        tj < ti || (tj == ti && j < i)
    };
    let chi = (0..arrivals.len())
        .map(|i| {
            (0..arrivals.len())
                .filter(|&j| j != i && earlier(j, i) && arrivals[i].maneuver.conflicts_with(arrivals[j].maneuver))
                .max_by(|&a, &b| if earlier(a, b) { std::cmp::Ordering::Less } else { std::cmp::Ordering::Greater })
        })
        .collect();
    Precedence { chi }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntersectionParams {
    pub tau_s: f64,
    /// Explicit `χ`; computed from the arrivals when absent.
    pub precedence: Option<Precedence>,
    /// Desired spacing `dᵢ` to the predecessor, one per vehicle.
    pub d_safe: Vec<f64>,
    pub d_min: f64,
    pub v_ref: f64,
    pub v_bounds: [f64; 2],
    pub u_bounds: [f64; 2],
    pub arrivals: Vec<Arrival>,
    #[serde(default = "default_sim_steps")]
    pub sim_steps: usize,
}

const DEFAULT_MANEUVERS: [&str; 15] =
    ["NS", "SN", "EW", "WE", "NW", "SE", "WS", "EN", "NS", "SW", "EW", "WN", "SN", "NE", "WE"];

impl Default for IntersectionParams {
    fn default() -> Self {
        let arrivals = DEFAULT_MANEUVERS
            .iter()
            .enumerate()
            .map(|(k, m)| Arrival {
                time: 0.8 * k as f64,
                maneuver: m.parse().expect("valid default maneuver"),
                position: -(15.0 + 7.0 * k as f64),
                velocity: 10.0 + [0.0, -0.5, 0.5][k % 3],
            })
            .collect();
        Self {
            tau_s: 0.1,
            precedence: None,
            d_safe: vec![5.0; DEFAULT_MANEUVERS.len()],
            d_min: 2.0,
            v_ref: 10.0,
            v_bounds: [0.0, 15.0],
            u_bounds: [-3.0, 3.0],
            arrivals,
            sim_steps: 300,
        }
    }
}

impl IntersectionParams {
    pub fn agents(&self) -> usize {
        self.arrivals.len()
    }

    pub fn precedence(&self) -> Precedence {
        self.precedence.clone().unwrap_or_else(|| assign_precedence(&self.arrivals))
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let n = self.agents();
        if n == 0 {
            return invalid("at least one vehicle is required");
        }
        check_common(self.tau_s, self.d_min, self.v_ref, self.v_bounds, self.u_bounds)?;
        if self.d_safe.len() != n {
            return invalid(format!("d_safe has {} entries, expected {n}", self.d_safe.len()));
        }
        let prec = self.precedence();
        if prec.chi.len() != n {
            return invalid(format!("precedence has {} entries, expected {n}", prec.chi.len()));
        }
        prec.validate()
    }

    /// State offsets: one slot per leader, two per follower, in index order.
    fn offsets(prec: &Precedence) -> (Vec<usize>, usize) {
        let mut acc = 0;
        let offs = (0..prec.chi.len())
            .map(|i| {
                let o = acc;
                acc += if prec.is_leader(i) { 1 } else { 2 };
                o
            })
            .collect();
        (offs, acc)
    }

    pub fn fleet(&self) -> Fleet {
        let prec = self.precedence();
        let (offs, n) = Self::offsets(&prec);
        let links = (0..self.agents())
            .map(|i| match prec.chi[i] {
                None => Link::Leader { vel: offs[i] },
                Some(pred) => Link::Follower { pred, gap: offs[i], vel: offs[i] + 1, spacing: self.d_safe[i], headway: 0.0 },
            })
            .collect();
        Fleet { v_ref: self.v_ref, tau_s: self.tau_s, d_min: self.d_min, links, state_dim: n }
    }
}

/// Pre-stabilized intersection game and its initial error state.
pub fn build_intersection(params: &IntersectionParams) -> Result<(LqGame, DVector<f64>), ScenarioError> {
    params.validate()?;
    let prec = params.precedence();
    let (offs, n) = IntersectionParams::offsets(&prec);
    let tau = params.tau_s;
    let agents = params.agents();
    let mut a = DMatrix::zeros(n, n);
    for i in 0..agents {
        let o = offs[i];
        a[(o, o)] = 1.0;
        if !prec.is_leader(i) {
            a[(o, o + 1)] = tau;
            a[(o + 1, o + 1)] = 1.0;
        }
    }
    let b: Vec<DMatrix<f64>> = (0..agents)
        .map(|i| {
            let mut bi = DMatrix::zeros(n, 1);
            if prec.is_leader(i) {
                bi[(offs[i], 0)] = -tau;
            } else {
                bi[(offs[i], 0)] = -tau * tau / 2.0;
                bi[(offs[i] + 1, 0)] = -tau;
            }
            for j in (0..agents).filter(|&j| prec.chi[j] == Some(i)) {
                bi[(offs[j], 0)] = tau * tau / 2.0;
                bi[(offs[j] + 1, 0)] = tau;
            }
            bi
        })
        .collect();
    let fleet = params.fleet();
    let spec = fleet.constraints(params.v_bounds, params.u_bounds);
    let game = LqGame::new(a, b, vec![DMatrix::identity(n, n); agents], vec![DMatrix::identity(1, 1); agents], spec)?;
    // uᵢ = 0.1·𝟙ᵀxᵢ
    let gains: Vec<DMatrix<f64>> = (0..agents)
        .map(|i| {
            let mut k = DMatrix::zeros(1, n);
            let width = if prec.is_leader(i) { 1 } else { 2 };
            for c in 0..width {
                k[(0, offs[i] + c)] = 0.1;
            }
            k
        })
        .collect();
    let game = prestabilize(&game, &gains)?;
    let p: Vec<f64> = params.arrivals.iter().map(|a| a.position).collect();
    let v: Vec<f64> = params.arrivals.iter().map(|a| a.velocity).collect();
    Ok((game, fleet.state_from_physical(&p, &v)))
}

/// A fully specified game given directly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameParams {
    pub game: LqGame,
    pub x0: Vec<f64>,
    #[serde(default = "default_sim_steps")]
    pub sim_steps: usize,
}

/// Scenario file: `{"type": "platooning" | "intersection" | "game", "params": {...}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "params", rename_all = "snake_case")]
pub enum ScenarioSpec {
    Platooning(PlatooningParams),
    Intersection(IntersectionParams),
    Game(GameParams),
}

/// A built scenario, ready for compilation and simulation.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: &'static str,
    pub game: LqGame,
    pub x0: DVector<f64>,
    pub fleet: Option<Fleet>,
    /// Leaders' initial positions, indexed by vehicle.
    pub leader_positions: Vec<f64>,
    pub sim_steps: usize,
}

impl ScenarioSpec {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        serde_json::from_str(text).map_err(|e| ScenarioError::Json(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn build(&self) -> Result<Scenario, ScenarioError> {
        match self {
            ScenarioSpec::Platooning(p) => {
                let (game, x0) = build_platooning(p)?;
                Ok(Scenario {
                    name: "platooning",
                    game,
                    x0,
                    fleet: Some(p.fleet()),
                    leader_positions: p.x0.positions.clone(),
                    sim_steps: p.sim_steps,
                })
            }
            ScenarioSpec::Intersection(p) => {
                let (game, x0) = build_intersection(p)?;
                Ok(Scenario {
                    name: "intersection",
                    game,
                    x0,
                    fleet: Some(p.fleet()),
                    leader_positions: p.arrivals.iter().map(|a| a.position).collect(),
                    sim_steps: p.sim_steps,
                })
            }
            ScenarioSpec::Game(g) => {
                let mut game = g.game.clone();
                game.validate()?;
                if g.x0.len() != game.state_dim() {
                    return invalid(format!("x0 has {} entries, expected {}", g.x0.len(), game.state_dim()));
                }
                Ok(Scenario {
                    name: "game",
                    game,
                    x0: DVector::from_vec(g.x0.clone()),
                    fleet: None,
                    leader_positions: Vec::new(),
                    sim_steps: g.sim_steps,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::spectral_radius;

    fn m(s: &str) -> Maneuver {
        s.parse().unwrap()
    }

    fn arrival(t: f64, s: &str) -> Arrival {
        Arrival { time: t, maneuver: m(s), position: -10.0 * t, velocity: 10.0 }
    }

    #[test]
    fn conflict_table() {
        assert!(m("NS").conflicts_with(m("EW")));
        assert!(m("NS").conflicts_with(m("WS")));
        assert!(!m("NS").conflicts_with(m("SN")));
        assert!(!m("NS").conflicts_with(m("SE")));
        assert!(m("NW").conflicts_with(m("NS")));
        for a in ["NS", "EW", "NW", "SE", "WN"] {
            for b in ["SN", "WE", "EN", "NE", "SW"] {
                assert_eq!(m(a).conflicts_with(m(b)), m(b).conflicts_with(m(a)), "{a} {b}");
            }
        }
        assert!("NN".parse::<Maneuver>().is_err());
        assert!("NX".parse::<Maneuver>().is_err());
    }

    #[test]
    fn precedence_examples() {
        assert_eq!(assign_precedence(&[arrival(0.0, "NS")]).chi, vec![None]);
        assert_eq!(assign_precedence(&[arrival(1.0, "NS"), arrival(2.0, "EW")]).chi, vec![None, Some(0)]);
        let p = assign_precedence(&[arrival(1.0, "NS"), arrival(2.0, "EW"), arrival(3.0, "SE")]);
        assert_eq!(p.chi, vec![None, Some(0), None]);
        assert_eq!(p.leaders(), vec![0, 2]);
        // later arrival listed first
        assert_eq!(assign_precedence(&[arrival(2.0, "EW"), arrival(1.0, "NS")]).chi, vec![Some(1), None]);
        // ties by index
        assert_eq!(assign_precedence(&[arrival(1.0, "EW"), arrival(1.0, "NS")]).chi, vec![None, Some(0)]);
    }

    #[test]
    fn cyclic_precedence_rejected() {
        let p = Precedence { chi: vec![Some(1), Some(0)] };
        assert!(matches!(p.validate(), Err(ScenarioError::CyclicPrecedence(_))));
    }

    #[test]
    fn platooning_two_agent_blocks() {
        let p = PlatooningParams::with_agents(2);
        let (g, _) = build_platooning(&p).unwrap();
        let tau = 0.1;
        let b2 = &g.b[1];
        assert!((b2[(2, 0)] + (0.5 * tau + tau * tau / 2.0)).abs() < 1e-15);
        assert!((b2[(3, 0)] + tau).abs() < 1e-15);
        assert_eq!(b2[(0, 0)], 0.0);
        assert_eq!(b2[(1, 0)], 0.0);
        let b1 = &g.b[0];
        assert_eq!(b1.column(0).as_slice(), &[0.0, -tau, tau * tau / 2.0, tau]);
        let a = g.physical_a();
        assert_eq!(a.view((0, 0), (2, 2)), DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]));
    }

    #[test]
    fn platooning_equilibrium() {
        let (g, _) = build_platooning(&PlatooningParams::default()).unwrap();
        let x = DVector::zeros(10);
        let zero = vec![DVector::zeros(1); 5];
        assert_eq!(g.step(&x, &zero), x);
        assert_eq!(g.step_physical(&x, &zero), x);
    }

    #[test]
    fn prestabilized_spectral_radius() {
        for n in [2, 3, 5] {
            let (g, _) = build_platooning(&PlatooningParams::with_agents(n)).unwrap();
            let rho = spectral_radius(&g.a);
            assert!(rho < 1.0, "N={n}: {rho}");
        }
        let (g, _) = build_intersection(&IntersectionParams::default()).unwrap();
        assert!(spectral_radius(&g.a) < 1.0);
    }

    #[test]
    fn platooning_physical_round_trip() {
        let p = PlatooningParams::default();
        let fleet = p.fleet();
        let (_, x0) = build_platooning(&p).unwrap();
        let v = fleet.velocities(&x0);
        let pos = fleet.positions(&x0, &p.x0.positions);
        for i in 0..5 {
            assert!((v[i] - p.x0.velocities[i]).abs() < 1e-12);
            assert!((pos[i] - p.x0.positions[i]).abs() < 1e-12);
        }
        let gaps = fleet.gaps(&x0);
        assert_eq!(gaps[0], None);
        assert!((gaps[1].unwrap() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn platooning_physical_simulation_matches_error_coordinates() {
        let p = PlatooningParams::default();
        let fleet = p.fleet();
        let (g, mut x) = build_platooning(&p).unwrap();
        let mut pos = p.x0.positions.clone();
        let mut vel = p.x0.velocities.clone();
        let tau = p.tau_s;
        for t in 0..50 {
            let acc: Vec<f64> = (0..5).map(|i| (0.3 * (t as f64 + i as f64)).sin()).collect();
            let applied: Vec<DVector<f64>> = acc.iter().map(|&a| DVector::from_element(1, a)).collect();
            x = g.step_physical(&x, &applied);
            for i in 0..5 {
                pos[i] += tau * vel[i] + 0.5 * tau * tau * acc[i];
                vel[i] += tau * acc[i];
            }
            let expected = fleet.state_from_physical(&pos, &vel);
            assert!((&x - &expected).amax() < 1e-10, "step {t}");
        }
    }

    #[test]
    fn two_vehicle_chain_by_hand() {
        let params = IntersectionParams {
            arrivals: vec![arrival(1.0, "NS"), arrival(2.0, "EW")],
            d_safe: vec![5.0, 5.0],
            ..Default::default()
        };
        let (g, _) = build_intersection(&params).unwrap();
        let tau = 0.1;
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, tau, 0.0, 0.0, 1.0]);
        assert_eq!(g.physical_a(), &a);
        assert_eq!(g.b[0].column(0).as_slice(), &[-tau, tau * tau / 2.0, tau]);
        assert_eq!(g.b[1].column(0).as_slice(), &[0.0, -tau * tau / 2.0, -tau]);
    }

    #[test]
    fn intersection_coupling_columns() {
        let params = IntersectionParams::default();
        let prec = params.precedence();
        let fleet = params.fleet();
        let (g, _) = build_intersection(&params).unwrap();
        for j in 0..params.agents() {
            let Some(i) = prec.chi[j] else { continue };
            let Link::Follower { gap, vel, .. } = fleet.links[j] else { unreachable!() };
            let col = g.b[i].column(0);
            assert!((col[gap] - 0.005).abs() < 1e-15);
            assert!((col[vel] - 0.1).abs() < 1e-15);
        }
        // B_ij = 0 when j is neither i nor a follower of i
        for i in 0..params.agents() {
            for j in 0..params.agents() {
                if j == i || prec.chi[j] == Some(i) {
                    continue;
                }
                let (o, w) = match fleet.links[j] {
                    Link::Leader { vel } => (vel, 1),
                    Link::Follower { gap, .. } => (gap, 2),
                };
                assert!(g.b[i].rows(o, w).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn default_intersection_is_feasible_at_start() {
        let params = IntersectionParams::default();
        let (g, x0) = build_intersection(&params).unwrap();
        let prec = params.precedence();
        assert_eq!(g.state_dim(), prec.leaders().len() + 2 * (15 - prec.leaders().len()));
        assert!(g.constraints.state_values(&x0).max() <= 0.0);
    }

    #[test]
    fn scenario_json_round_trip() {
        for spec in [
            ScenarioSpec::Platooning(PlatooningParams::default()),
            ScenarioSpec::Intersection(IntersectionParams::default()),
        ] {
            let text = spec.to_json();
            assert_eq!(ScenarioSpec::from_json(&text).unwrap(), spec);
        }
        let s = ScenarioSpec::from_json(r#"{"type":"platooning","params":{"N":5}}"#).unwrap();
        assert!(s.build().is_ok());
        assert!(ScenarioSpec::from_json(r#"{"type":"boats","params":{}}"#).is_err());
        let bad = ScenarioSpec::from_json(r#"{"type":"platooning","params":{"N":5,"tau_s":-1}}"#).unwrap();
        assert!(matches!(bad.build(), Err(ScenarioError::InvalidParams(_))));
    }
}
