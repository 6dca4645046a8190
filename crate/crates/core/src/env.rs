//! Labelled, fully observed discrete environments.
//!
//! Observations are the states themselves. Each state carries a set of
//! atomic propositions (its labels), which is the only safety information
//! an agent gets.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;

pub type StateId = usize;
pub type ActionId = usize;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnvError {
    #[error("cannot step from terminal state {0}")]
    TerminalState(StateId),
    #[error("state {0} out of range")]
    InvalidState(StateId),
    #[error("action {0} out of range")]
    InvalidAction(ActionId),
    #[error("invalid atomic proposition {0:?}")]
    InvalidProposition(String),
    #[error("invalid environment spec: {0}")]
    InvalidSpec(String),
}

/// Whether `name` is a legal atomic proposition: a lowercase letter followed
/// by lowercase letters, digits or hyphens. `true` and `false` are reserved.
pub fn is_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_lowercase() => {}
        _ => return false,
    }
    if name == "true" || name == "false" {
        return false;
    }
    chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-')
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AtomicProposition(String);

impl AtomicProposition {
    pub fn new(name: &str) -> Result<Self, EnvError> {
        if is_identifier(name) {
            Ok(Self(name.to_string()))
        } else {
            Err(EnvError::InvalidProposition(name.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AtomicProposition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// The labels `L(s)` of a single state.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LabelSet(BTreeSet<AtomicProposition>);

impl LabelSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names<I, S>(names: I) -> Result<Self, EnvError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set = BTreeSet::new();
        for name in names {
            set.insert(AtomicProposition::new(name.as_ref())?);
        }
        Ok(Self(set))
    }

    pub fn insert(&mut self, ap: AtomicProposition) -> bool {
        self.0.insert(ap)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.iter().any(|ap| ap.as_str() == name)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &AtomicProposition> {
        self.0.iter()
    }
}

/// What the agent sees after `reset` or `step`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledStep {
    pub state: StateId,
    pub labels: LabelSet,
    pub reward: f64,
    pub terminal: bool,
}

/// One outcome of a state-action pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub next: StateId,
    pub prob: f64,
    pub reward: f64,
}

/// Explicit `p(s' | s, a)` for every state-action pair. Terminal states are
/// listed as absorbing self-loops so every row is a distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionTable {
    pub num_states: usize,
    pub num_actions: usize,
    rows: Vec<Vec<Transition>>,
}

impl TransitionTable {
    pub fn row(&self, state: StateId, action: ActionId) -> &[Transition] {
        &self.rows[state * self.num_actions + action]
    }

    pub fn prob(&self, state: StateId, action: ActionId, next: StateId) -> f64 {
        self.row(state, action)
            .iter()
            .filter(|t| t.next == next)
            .map(|t| t.prob)
            .sum()
    }

    /// Largest deviation of any row sum from one.
    pub fn max_row_error(&self) -> f64 {
        self.rows
            .iter()
            .map(|row| libm::fabs(row.iter().map(|t| t.prob).sum::<f64>() - 1.0))
            .fold(0.0, f64::max)
    }
}

fn sample_index<R: Rng + ?Sized>(probs: impl Iterator<Item = f64>, rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// A finite, labelled MDP with a fully observed state.
pub trait Environment {
    fn num_states(&self) -> usize;
    fn num_actions(&self) -> usize;
    /// The atomic propositions this environment can emit.
    fn propositions(&self) -> &[AtomicProposition];
    fn labels(&self, state: StateId) -> &LabelSet;
    fn is_terminal(&self, state: StateId) -> bool;
    fn initial_distribution(&self) -> Vec<(StateId, f64)>;
    /// Outcomes of `action` in a non-terminal `state`.
    fn transitions(&self, state: StateId, action: ActionId) -> Vec<Transition>;

    fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> LabeledStep
    where
        Self: Sized,
    {
        let init = self.initial_distribution();
        let state = init[sample_index(init.iter().map(|(_, p)| *p), rng)].0;
        LabeledStep {
            state,
            labels: self.labels(state).clone(),
            reward: 0.0,
            terminal: false,
        }
    }

    fn step<R: Rng + ?Sized>(
        &self,
        state: StateId,
        action: ActionId,
        rng: &mut R,
    ) -> Result<LabeledStep, EnvError>
    where
        Self: Sized,
    {
        if state >= self.num_states() {
            return Err(EnvError::InvalidState(state));
        }
        if action >= self.num_actions() {
            return Err(EnvError::InvalidAction(action));
        }
        if self.is_terminal(state) {
            return Err(EnvError::TerminalState(state));
        }
        let outcomes = self.transitions(state, action);
        let t = outcomes[sample_index(outcomes.iter().map(|t| t.prob), rng)];
        Ok(LabeledStep {
            state: t.next,
            labels: self.labels(t.next).clone(),
            reward: t.reward,
            terminal: self.is_terminal(t.next),
        })
    }
}

pub fn enumerate_transitions<E: Environment>(env: &E) -> TransitionTable {
    let (ns, na) = (env.num_states(), env.num_actions());
    let mut rows = Vec::with_capacity(ns * na);
    for s in 0..ns {
        for a in 0..na {
            if env.is_terminal(s) {
                rows.push(vec![Transition {
                    next: s,
                    prob: 1.0,
                    reward: 0.0,
                }]);
            } else {
                rows.push(env.transitions(s, a));
            }
        }
    }
    TransitionTable {
        num_states: ns,
        num_actions: na,
        rows,
    }
}

/// Rolls the environment forward from `start` for up to `horizon` steps,
/// returning the labels of `τ[0..=horizon]` (shorter if a terminal state is
/// reached).
pub fn simulate_labels<E, F, R>(
    env: &E,
    start: StateId,
    horizon: usize,
    mut choose: F,
    rng: &mut R,
) -> Result<Vec<LabelSet>, EnvError>
where
    E: Environment,
    F: FnMut(StateId, &mut R) -> ActionId,
    R: Rng + ?Sized,
{
    let mut trace = Vec::with_capacity(horizon + 1);
    trace.push(env.labels(start).clone());
    let mut state = start;
    for _ in 0..horizon {
        if env.is_terminal(state) {
            break;
        }
        let action = choose(state, rng);
        let next = env.step(state, action, rng)?;
        state = next.state;
        trace.push(next.labels);
    }
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Conveyor-belt gridworld

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub const fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    fn is_adjacent(self, other: Cell) -> bool {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y) == 1
    }
}

/// Moves in the gridworld. `Up` increases `y`; the goal sits at the top.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridAction {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl GridAction {
    pub const ALL: [GridAction; 5] = [
        GridAction::Up,
        GridAction::Down,
        GridAction::Left,
        GridAction::Right,
        GridAction::Stay,
    ];

    pub fn index(self) -> ActionId {
        self as ActionId
    }

    pub fn from_index(index: ActionId) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    fn lateral(self) -> Option<[GridAction; 2]> {
        match self {
            GridAction::Up | GridAction::Down => Some([GridAction::Left, GridAction::Right]),
            GridAction::Left | GridAction::Right => Some([GridAction::Up, GridAction::Down]),
            GridAction::Stay => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConveyorSpec {
    pub width: usize,
    pub height: usize,
    pub start: Cell,
    pub goal: Cell,
    /// Belt cells in the order the belt carries the agent; the last one
    /// feeds into the acid.
    pub belt: Vec<Cell>,
    pub acid: Cell,
    pub slip_prob: f64,
}

impl Default for ConveyorSpec {
    /// 7×7 grid, start bottom-left, goal top-right, a five-cell belt along
    /// the bottom row running right into acid in the bottom-right corner.
    fn default() -> Self {
        Self {
            width: 7,
            height: 7,
            start: Cell::new(0, 0),
            goal: Cell::new(6, 6),
            belt: (1..=5).map(|x| Cell::new(x, 0)).collect(),
            acid: Cell::new(6, 0),
            slip_prob: 0.0,
        }
    }
}

impl ConveyorSpec {
    pub fn with_slip(mut self, slip_prob: f64) -> Self {
        self.slip_prob = slip_prob;
        self
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |msg: String| Err(EnvError::InvalidSpec(msg));
        if self.width == 0 || self.height == 0 {
            return bad("grid must be non-empty".into());
        }
        let in_grid = |c: Cell| c.x < self.width && c.y < self.height;
        for (name, cell) in [("start", self.start), ("goal", self.goal), ("acid", self.acid)] {
            if !in_grid(cell) {
                return bad(format!("{name} cell {cell:?} outside the grid"));
            }
        }
        if !(0.0..1.0).contains(&self.slip_prob) {
            return bad(format!("slip_prob {} not in [0, 1)", self.slip_prob));
        }
        if self.goal == self.acid {
            return bad("goal and acid coincide".into());
        }
        if self.start == self.acid || self.start == self.goal {
            return bad("start must differ from goal and acid".into());
        }
        let mut seen = BTreeSet::new();
        for (i, &cell) in self.belt.iter().enumerate() {
            if !in_grid(cell) {
                return bad(format!("belt cell {cell:?} outside the grid"));
            }
            if !seen.insert(cell) {
                return bad(format!("belt cell {cell:?} repeated"));
            }
            if cell == self.goal || cell == self.acid {
                return bad(format!("belt cell {cell:?} overlaps goal or acid"));
            }
            if i > 0 && !self.belt[i - 1].is_adjacent(cell) {
                return bad(format!("belt cells {:?} and {cell:?} not adjacent", self.belt[i - 1]));
            }
        }
        if let Some(&last) = self.belt.last() {
            if !last.is_adjacent(self.acid) {
                return bad("last belt cell must be adjacent to the acid".into());
            }
        }
        Ok(())
    }
}

/// Gridworld with a conveyor belt that carries the agent into acid.
///
/// Off-grid moves leave the agent in place. With probability `slip_prob`
/// a move goes sideways instead (half to each side); `Stay` never slips.
/// On a belt cell every action is ignored and the belt advances the agent
/// one cell. Reaching the goal pays +1; goal and acid are terminal.
#[derive(Debug, Clone)]
pub struct ConveyorWorld {
    spec: ConveyorSpec,
    props: Vec<AtomicProposition>,
    labels: Vec<LabelSet>,
    belt_next: Vec<Option<StateId>>,
}

impl ConveyorWorld {
    pub fn new(spec: ConveyorSpec) -> Result<Self, EnvError> {
        spec.validate()?;
        let acid_ap = AtomicProposition::new("acid")?;
        let goal_ap = AtomicProposition::new("goal")?;
        let n = spec.width * spec.height;
        let mut labels = vec![LabelSet::new(); n];
        let idx = |c: Cell| c.y * spec.width + c.x;
        labels[idx(spec.acid)].insert(acid_ap.clone());
        labels[idx(spec.goal)].insert(goal_ap.clone());
        let mut belt_next = vec![None; n];
        for (i, &cell) in spec.belt.iter().enumerate() {
            let next = spec.belt.get(i + 1).copied().unwrap_or(spec.acid);
            belt_next[idx(cell)] = Some(idx(next));
        }
        Ok(Self {
            spec,
            props: vec![acid_ap, goal_ap],
            labels,
            belt_next,
        })
    }

    pub fn spec(&self) -> &ConveyorSpec {
        &self.spec
    }

    pub fn state_of(&self, cell: Cell) -> StateId {
        cell.y * self.spec.width + cell.x
    }

    pub fn cell_of(&self, state: StateId) -> Cell {
        Cell::new(state % self.spec.width, state / self.spec.width)
    }

    pub fn is_belt(&self, state: StateId) -> bool {
        self.belt_next[state].is_some()
    }

    fn moved(&self, cell: Cell, action: GridAction) -> Cell {
        let Cell { x, y } = cell;
        match action {
            GridAction::Up if y + 1 < self.spec.height => Cell::new(x, y + 1),
            GridAction::Down if y > 0 => Cell::new(x, y - 1),
            GridAction::Left if x > 0 => Cell::new(x - 1, y),
            GridAction::Right if x + 1 < self.spec.width => Cell::new(x + 1, y),
            _ => cell,
        }
    }

    fn outcome(&self, next: StateId, prob: f64) -> Transition {
        let reward = if next == self.state_of(self.spec.goal) { 1.0 } else { 0.0 };
        Transition { next, prob, reward }
    }
}

impl Environment for ConveyorWorld {
    fn num_states(&self) -> usize {
        self.spec.width * self.spec.height
    }

    fn num_actions(&self) -> usize {
        GridAction::ALL.len()
    }

    fn propositions(&self) -> &[AtomicProposition] {
        &self.props
    }

    fn labels(&self, state: StateId) -> &LabelSet {
        &self.labels[state]
    }

    fn is_terminal(&self, state: StateId) -> bool {
        state == self.state_of(self.spec.goal) || state == self.state_of(self.spec.acid)
    }

    fn initial_distribution(&self) -> Vec<(StateId, f64)> {
        vec![(self.state_of(self.spec.start), 1.0)]
    }

    fn transitions(&self, state: StateId, action: ActionId) -> Vec<Transition> {
        if let Some(next) = self.belt_next[state] {
            return vec![self.outcome(next, 1.0)];
        }
        let action = GridAction::from_index(action).unwrap_or(GridAction::Stay);
        let cell = self.cell_of(state);
        let slip = self.spec.slip_prob;
        let mut out: Vec<Transition> = Vec::with_capacity(3);
        let mut add = |next: StateId, prob: f64| {
            if prob <= 0.0 {
                return;
            }
            match out.iter_mut().find(|t| t.next == next) {
                Some(t) => t.prob += prob,
                None => out.push(self.outcome(next, prob)),
            }
        };
        match action.lateral() {
            None => add(state, 1.0),
            Some(sides) => {
                add(self.state_of(self.moved(cell, action)), 1.0 - slip);
                for side in sides {
                    add(self.state_of(self.moved(cell, side)), slip / 2.0);
                }
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Chain MDP

#[derive(Debug, Clone, PartialEq)]
pub struct ChainSpec {
    pub num_states: usize,
    /// `stay_safe[i]` is the probability of remaining in state `i`; the rest
    /// of the mass advances to `i + 1`. One entry per state except the last,
    /// which is absorbing.
    pub stay_safe: Vec<f64>,
    pub labels: BTreeMap<StateId, Vec<String>>,
    pub start: StateId,
    pub terminal: Vec<StateId>,
}

impl ChainSpec {
    /// States `0..n`, the last one labelled `unsafe`.
    pub fn new(stay_safe: Vec<f64>) -> Self {
        let num_states = stay_safe.len() + 1;
        let mut labels = BTreeMap::new();
        labels.insert(num_states - 1, vec!["unsafe".to_string()]);
        Self {
            num_states,
            stay_safe,
            labels,
            start: 0,
            terminal: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |msg: String| Err(EnvError::InvalidSpec(msg));
        if self.num_states < 2 {
            return bad("chain needs at least two states".into());
        }
        if self.stay_safe.len() + 1 != self.num_states {
            return bad(format!(
                "expected {} stay probabilities, got {}",
                self.num_states - 1,
                self.stay_safe.len()
            ));
        }
        if let Some(p) = self.stay_safe.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return bad(format!("stay probability {p} not in [0, 1]"));
        }
        if self.start >= self.num_states {
            return bad(format!("start state {} out of range", self.start));
        }
        if let Some(s) = self
            .labels
            .keys()
            .chain(self.terminal.iter())
            .find(|s| **s >= self.num_states)
        {
            return bad(format!("state {s} out of range"));
        }
        if !self.labels.values().flatten().any(|l| l == "unsafe") {
            return bad("at least one state must be labelled unsafe".into());
        }
        Ok(())
    }
}

/// A single-action Markov chain `0 → 1 → … → n-1` used as an oracle
/// substrate: every quantity of interest has a closed form.
#[derive(Debug, Clone)]
pub struct ChainMdp {
    spec: ChainSpec,
    props: Vec<AtomicProposition>,
    labels: Vec<LabelSet>,
}

impl ChainMdp {
    pub fn new(spec: ChainSpec) -> Result<Self, EnvError> {
        spec.validate()?;
        let mut labels = vec![LabelSet::new(); spec.num_states];
        let mut props = BTreeSet::new();
        for (&s, names) in &spec.labels {
            for name in names {
                let ap = AtomicProposition::new(name)?;
                props.insert(ap.clone());
                labels[s].insert(ap);
            }
        }
        Ok(Self {
            spec,
            props: props.into_iter().collect(),
            labels,
        })
    }

    pub fn spec(&self) -> &ChainSpec {
        &self.spec
    }
}

impl Environment for ChainMdp {
    fn num_states(&self) -> usize {
        self.spec.num_states
    }

    fn num_actions(&self) -> usize {
        1
    }

    fn propositions(&self) -> &[AtomicProposition] {
        &self.props
    }

    fn labels(&self, state: StateId) -> &LabelSet {
        &self.labels[state]
    }

    fn is_terminal(&self, state: StateId) -> bool {
        self.spec.terminal.contains(&state)
    }

    fn initial_distribution(&self) -> Vec<(StateId, f64)> {
        vec![(self.spec.start, 1.0)]
    }

    fn transitions(&self, state: StateId, _action: ActionId) -> Vec<Transition> {
        let stay = self.spec.stay_safe.get(state).copied().unwrap_or(1.0);
        let mut out = Vec::with_capacity(2);
        if stay > 0.0 {
            out.push(Transition {
                next: state,
                prob: stay,
                reward: 0.0,
            });
        }
        if stay < 1.0 {
            out.push(Transition {
                next: state + 1,
                prob: 1.0 - stay,
                reward: 0.0,
            });
        }
        out
    }
}

// ---------------------------------------------------------------------------

/// Any of the shipped environments.
#[derive(Debug, Clone)]
pub enum World {
    Conveyor(ConveyorWorld),
    Chain(ChainMdp),
}

macro_rules! delegate {
    ($self:ident, $env:ident => $body:expr) => {
        match $self {
            World::Conveyor($env) => $body,
            World::Chain($env) => $body,
        }
    };
}

impl Environment for World {
    fn num_states(&self) -> usize {
        delegate!(self, e => e.num_states())
    }

    fn num_actions(&self) -> usize {
        delegate!(self, e => e.num_actions())
    }

    fn propositions(&self) -> &[AtomicProposition] {
        delegate!(self, e => e.propositions())
    }

    fn labels(&self, state: StateId) -> &LabelSet {
        delegate!(self, e => e.labels(state))
    }

    fn is_terminal(&self, state: StateId) -> bool {
        delegate!(self, e => e.is_terminal(state))
    }

    fn initial_distribution(&self) -> Vec<(StateId, f64)> {
        delegate!(self, e => e.initial_distribution())
    }

    fn transitions(&self, state: StateId, action: ActionId) -> Vec<Transition> {
        delegate!(self, e => e.transitions(state, action))
    }
}
