//! Perfect ν-ary computation trees, Boolean gates and the looped tape machine.
//!
//! Tree nodes are indexed base level first, then level by level up to the
//! root, so the root is always the last tree index. Internal (computation)
//! nodes occupy the contiguous range `num_base()..num_nodes()`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a perfect rooted ν-ary tree with edges oriented toward the root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeTopology {
    arity: usize,
    height: usize,
}

/// Builds the perfect tree of branching `arity` and height `height`.
pub fn build_tree(arity: usize, height: usize) -> Result<TreeTopology> {
    TreeTopology::new(arity, height)
}

impl TreeTopology {
    pub fn new(arity: usize, height: usize) -> Result<Self> {
        if arity < 2 {
            return Err(Error::InvalidParameter(format!("arity must be >= 2, got {arity}")));
        }
        if height < 1 {
            return Err(Error::InvalidParameter(format!("height must be >= 1, got {height}")));
        }
        // keep index arithmetic well inside usize
        let base = (arity as u128).checked_pow(height as u32 + 1);
        match base {
            Some(b) if b < (1u128 << 40) => {}
            _ => {
                return Err(Error::InvalidParameter(format!(
                    "tree with arity {arity} and height {height} is too large"
                )))
            }
        }
        Ok(Self { arity, height })
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Number of base (input) nodes, ν^h. Also the tape window width.
    pub fn num_base(&self) -> usize {
        self.arity.pow(self.height as u32)
    }

    /// Number of internal computation nodes, (ν^h − 1)/(ν − 1).
    pub fn num_internal(&self) -> usize {
        (self.num_base() - 1) / (self.arity - 1)
    }

    /// Total tree nodes, (ν^{h+1} − 1)/(ν − 1).
    pub fn num_nodes(&self) -> usize {
        self.num_base() + self.num_internal()
    }

    pub fn root(&self) -> usize {
        self.num_nodes() - 1
    }

    /// Index range of the internal nodes, in layout order (root last).
    pub fn internal_nodes(&self) -> std::ops::Range<usize> {
        self.num_base()..self.num_nodes()
    }

    pub fn is_internal(&self, node: usize) -> bool {
        self.internal_nodes().contains(&node)
    }

    /// Number of nodes on `level` (0 = base, h = root).
    pub fn level_size(&self, level: usize) -> usize {
        self.arity.pow((self.height - level) as u32)
    }

    /// First index of `level`.
    pub fn level_offset(&self, level: usize) -> usize {
        (0..level).map(|l| self.level_size(l)).sum()
    }

    /// Level of a tree node (0 = base).
    pub fn level_of(&self, node: usize) -> usize {
        assert!(node < self.num_nodes(), "node {node} out of range");
        let mut offset = 0;
        for level in 0..=self.height {
            let size = self.level_size(level);
            if node < offset + size {
                return level;
            }
            offset += size;
        }
        unreachable!()
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        if node >= self.root() {
            return None;
        }
        let level = self.level_of(node);
        let pos = node - self.level_offset(level);
        Some(self.level_offset(level + 1) + pos / self.arity)
    }

    /// Children of an internal node, in input order; empty for base nodes.
    pub fn children(&self, node: usize) -> std::ops::Range<usize> {
        if !self.is_internal(node) {
            return 0..0;
        }
        let level = self.level_of(node);
        let pos = node - self.level_offset(level);
        let start = self.level_offset(level - 1) + pos * self.arity;
        start..start + self.arity
    }

    /// Tree edges (child, parent), oriented toward the root.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.root()).map(|v| (v, self.parent(v).unwrap())).collect()
    }
}

/// A ν-ary Boolean gate given by its truth table.
///
/// Table entry `idx` is the output on inputs `(x_1, …, x_ν)` where `x_c` is
/// bit `c − 1` of `idx` (first child in the least significant bit).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gate {
    name: String,
    arity: usize,
    table: Vec<bool>,
}

impl Gate {
    pub fn new(name: impl Into<String>, arity: usize, table: Vec<bool>) -> Result<Self> {
        if arity == 0 || arity > 16 {
            return Err(Error::InvalidParameter(format!("gate arity {arity} out of range")));
        }
        if table.len() != 1 << arity {
            return Err(Error::DimensionMismatch { expected: 1 << arity, actual: table.len() });
        }
        Ok(Self { name: name.into(), arity, table })
    }

    pub fn from_fn(name: impl Into<String>, arity: usize, f: impl Fn(&[bool]) -> bool) -> Self {
        let table = (0..1usize << arity)
            .map(|idx| {
                let bits: Vec<bool> = (0..arity).map(|c| idx >> c & 1 == 1).collect();
                f(&bits)
            })
            .collect();
        Self { name: name.into(), arity, table }
    }

    /// Parses a table written as a string of `0`/`1` characters.
    pub fn from_table_str(name: impl Into<String>, arity: usize, table: &str) -> Result<Self> {
        let bits = table
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::InvalidParameter(format!("truth table character `{other}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(name, arity, bits)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn table(&self) -> &[bool] {
        &self.table
    }

    pub fn table_string(&self) -> String {
        self.table.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn eval(&self, inputs: &[bool]) -> bool {
        debug_assert_eq!(inputs.len(), self.arity);
        let idx = inputs.iter().enumerate().fold(0usize, |acc, (c, &b)| acc | (b as usize) << c);
        self.table[idx]
    }
}

#[derive(Serialize, Deserialize)]
struct GateRecord {
    name: String,
    arity: usize,
    table: String,
}

impl Serialize for Gate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        GateRecord { name: self.name.clone(), arity: self.arity, table: self.table_string() }
            .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Gate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = GateRecord::deserialize(d)?;
        Gate::from_table_str(rec.name, rec.arity, &rec.table).map_err(serde::de::Error::custom)
    }
}

/// Built-in gate families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GatePreset {
    AndOrProj,
    AndOrParity,
    MajorityFamily,
}

impl FromStr for GatePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "and-or-proj" => Ok(Self::AndOrProj),
            "and-or-parity" => Ok(Self::AndOrParity),
            "majority-family" => Ok(Self::MajorityFamily),
            other => Err(Error::Unknown { kind: "gate preset", name: other.to_string() }),
        }
    }
}

impl fmt::Display for GatePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AndOrProj => "and-or-proj",
            Self::AndOrParity => "and-or-parity",
            Self::MajorityFamily => "majority-family",
        })
    }
}

/// Gate list for a preset at the given arity.
pub fn default_gate_set(arity: usize, preset: GatePreset) -> Result<Vec<Gate>> {
    if arity < 2 {
        return Err(Error::InvalidParameter(format!("gate arity must be >= 2, got {arity}")));
    }
    let suffix = if arity == 2 { String::new() } else { arity.to_string() };
    let and = Gate::from_fn(format!("AND{suffix}"), arity, |b| b.iter().all(|&x| x));
    let or = Gate::from_fn(format!("OR{suffix}"), arity, |b| b.iter().any(|&x| x));
    let third = match preset {
        GatePreset::AndOrProj => Gate::from_fn("PROJ1", arity, |b| b[0]),
        GatePreset::AndOrParity => Gate::from_fn(
            if arity == 2 { "XOR".to_string() } else { format!("XOR{arity}") },
            arity,
            |b| b.iter().filter(|&&x| x).count() % 2 == 1,
        ),
        GatePreset::MajorityFamily => Gate::from_fn(format!("MAJ{arity}"), arity, |b| {
            2 * b.iter().filter(|&&x| x).count() > b.len()
        }),
    };
    Ok(vec![and, or, third])
}

/// Gate index (into a gate set) for every internal node, in topology order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GateConfiguration(Vec<usize>);

impl GateConfiguration {
    pub fn new(topology: &TreeTopology, gates: &[Gate], assignment: Vec<usize>) -> Result<Self> {
        if assignment.len() != topology.num_internal() {
            return Err(Error::DimensionMismatch {
                expected: topology.num_internal(),
                actual: assignment.len(),
            });
        }
        if let Some(&bad) = assignment.iter().find(|&&g| g >= gates.len()) {
            return Err(Error::InvalidParameter(format!(
                "gate index {bad} out of range for a set of {}",
                gates.len()
            )));
        }
        if let Some(g) = gates.iter().find(|g| g.arity() != topology.arity()) {
            return Err(Error::InvalidParameter(format!(
                "gate {} has arity {}, tree has arity {}",
                g.name(),
                g.arity(),
                topology.arity()
            )));
        }
        Ok(Self(assignment))
    }

    /// Every internal node gets the same gate.
    pub fn uniform(topology: &TreeTopology, gates: &[Gate], gate: usize) -> Result<Self> {
        Self::new(topology, gates, vec![gate; topology.num_internal()])
    }

    pub fn random<R: Rng + ?Sized>(topology: &TreeTopology, m: usize, rng: &mut R) -> Self {
        Self((0..topology.num_internal()).map(|_| rng.gen_range(0..m)).collect())
    }

    /// Gate index at the internal node with position `pos` in Γ.
    pub fn gate_at(&self, pos: usize) -> usize {
        self.0[pos]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// Output of one feedforward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeEvaluation {
    /// One bit per internal node, in topology order.
    pub internal: Vec<bool>,
    pub root: bool,
}

/// Evaluates the circuit bottom-up on `input` (one bit per base node).
pub fn evaluate_tree(
    topology: &TreeTopology,
    gates: &[Gate],
    config: &GateConfiguration,
    input: &[bool],
) -> Result<TreeEvaluation> {
    if input.len() != topology.num_base() {
        return Err(Error::DimensionMismatch { expected: topology.num_base(), actual: input.len() });
    }
    if config.as_slice().len() != topology.num_internal() {
        return Err(Error::DimensionMismatch {
            expected: topology.num_internal(),
            actual: config.as_slice().len(),
        });
    }
    let nb = topology.num_base();
    let mut values = Vec::with_capacity(topology.num_nodes());
    values.extend_from_slice(input);
    let mut scratch = vec![false; topology.arity()];
    // children always precede their parent in the layout
    for node in topology.internal_nodes() {
        for (slot, child) in scratch.iter_mut().zip(topology.children(node)) {
            *slot = values[child];
        }
        let gate = &gates[config.gate_at(node - nb)];
        values.push(gate.eval(&scratch));
    }
    let internal = values.split_off(nb);
    let root = *internal.last().unwrap();
    Ok(TreeEvaluation { internal, root })
}

/// Tape window plus the bits that have been shifted past it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineState {
    /// Cells T_0..T_{ν^h−1}.
    pub window: Vec<bool>,
    pub time: u64,
    /// Bits pushed out of T_{ν^h−1}, oldest first.
    pub overflow: Vec<bool>,
}

impl MachineState {
    pub fn new(window: Vec<bool>) -> Self {
        Self { window, time: 0, overflow: Vec::new() }
    }

    /// Prompt of `width` uniformly random bits.
    pub fn random<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        Self::new((0..width).map(|_| rng.gen::<bool>()).collect())
    }

    /// Every bit ever on the tape, oldest first.
    pub fn history(&self) -> Vec<bool> {
        let mut out = self.overflow.clone();
        out.extend(self.window.iter().rev());
        out
    }
}

/// A configured circuit driving the read → shift → write loop.
#[derive(Debug, Clone)]
pub struct LoopMachine {
    pub topology: TreeTopology,
    pub gates: Vec<Gate>,
    pub config: GateConfiguration,
}

impl LoopMachine {
    pub fn new(topology: TreeTopology, gates: Vec<Gate>, config: GateConfiguration) -> Result<Self> {
        // re-validate against this gate set
        let config = GateConfiguration::new(&topology, &gates, config.0)?;
        Ok(Self { topology, gates, config })
    }

    pub fn evaluate(&self, input: &[bool]) -> Result<TreeEvaluation> {
        evaluate_tree(&self.topology, &self.gates, &self.config, input)
    }

    pub fn step(&self, state: &MachineState) -> Result<MachineState> {
        step(state, &self.topology, &self.gates, &self.config)
    }

    pub fn run(&self, state: &MachineState, steps: usize) -> Result<Vec<MachineState>> {
        run(state, &self.topology, &self.gates, &self.config, steps)
    }
}

/// One causal step: read the window into the tree, shift the tape, write the root to T_0.
pub fn step(
    state: &MachineState,
    topology: &TreeTopology,
    gates: &[Gate],
    config: &GateConfiguration,
) -> Result<MachineState> {
    let eval = evaluate_tree(topology, gates, config, &state.window)?;
    let mut overflow = state.overflow.clone();
    overflow.push(*state.window.last().unwrap());
    let mut window = Vec::with_capacity(state.window.len());
    window.push(eval.root);
    window.extend_from_slice(&state.window[..state.window.len() - 1]);
    Ok(MachineState { window, time: state.time + 1, overflow })
}

/// Iterates [`step`]; the trace has `steps + 1` states starting with `state`.
pub fn run(
    state: &MachineState,
    topology: &TreeTopology,
    gates: &[Gate],
    config: &GateConfiguration,
    steps: usize,
) -> Result<Vec<MachineState>> {
    let mut trace = Vec::with_capacity(steps + 1);
    trace.push(state.clone());
    for _ in 0..steps {
        let next = step(trace.last().unwrap(), topology, gates, config)?;
        trace.push(next);
    }
    Ok(trace)
}
