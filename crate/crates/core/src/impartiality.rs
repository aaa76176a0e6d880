//! Impartiality blocks: split-and-merge sub-graphs whose backward pass
//! rescales each head's gradient by `β_d` and resolves the per-head gradient
//! stack of every shared input before it flows upstream.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{JunctionId, JunctionInfo, JunctionResolver, Tape, Var};
use crate::error::{Error, Result};
use crate::gradconflict::{ChainResolver, GradientStack, ResolverChain};

/// What a block keeps impartial.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Goal {
    /// Likelihood impartiality: no modality dominates the shared decoder.
    Li,
    /// Encoder expert impartiality: every expert density scores every sample.
    Eei,
    /// Decoder expert impartiality: every decoder serves every expert.
    Dei,
}

impl Goal {
    pub const ALL: [Goal; 3] = [Goal::Li, Goal::Eei, Goal::Dei];

    pub fn name(self) -> &'static str {
        match self {
            Goal::Li => "li",
            Goal::Eei => "eei",
            Goal::Dei => "dei",
        }
    }
}

impl fmt::Display for Goal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Subset of goals whose blocks are active, parsed from `li,eei,dei`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSet {
    pub li: bool,
    pub eei: bool,
    pub dei: bool,
}

impl BlockSet {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Self {
            li: true,
            eei: true,
            dei: true,
        }
    }

    pub fn contains(&self, goal: Goal) -> bool {
        match goal {
            Goal::Li => self.li,
            Goal::Eei => self.eei,
            Goal::Dei => self.dei,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.li || self.eei || self.dei)
    }
}

impl FromStr for BlockSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut set = BlockSet::none();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "li" => set.li = true,
                "eei" => set.eei = true,
                "dei" => set.dei = true,
                "all" => set = BlockSet::all(),
                "none" => {}
                other => return Err(Error::invalid(format!("unknown block kind `{other}` (expected li, eei, dei)"))),
            }
        }
        Ok(set)
    }
}

impl fmt::Display for BlockSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = Goal::ALL.iter().filter(|g| self.contains(**g)).map(|g| g.name()).collect();
        f.write_str(&names.join(","))
    }
}

/// How LI head weights are derived from modality sizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum BetaRule {
    /// `β_d = 1 / dim(x_d)`.
    #[default]
    InverseDim,
    /// `β_d = dim(x_d)`.
    Dim,
    /// `β_d = 1`.
    Unit,
    /// The same constant for every head.
    Constant(f64),
}

impl BetaRule {
    pub fn beta(self, dim: usize) -> f64 {
        match self {
            BetaRule::InverseDim => 1.0 / dim.max(1) as f64,
            BetaRule::Dim => dim.max(1) as f64,
            BetaRule::Unit => 1.0,
            BetaRule::Constant(b) => b,
        }
    }
}

impl FromStr for BetaRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inverse_dim" | "1/dim" => Ok(BetaRule::InverseDim),
            "dim" => Ok(BetaRule::Dim),
            "unit" | "1" => Ok(BetaRule::Unit),
            other => {
                let b: f64 = other
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad beta rule `{other}`")))?;
                if !(b > 0.0 && b.is_finite()) {
                    return Err(Error::invalid(format!("beta must be > 0, got {b}")));
                }
                Ok(BetaRule::Constant(b))
            }
        }
    }
}

/// Which blocks are active, their resolvers and the LI weighting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpartialityConfig {
    pub blocks: BlockSet,
    pub li: ResolverChain,
    pub eei: ResolverChain,
    pub dei: ResolverChain,
    pub beta: BetaRule,
}

impl Default for ImpartialityConfig {
    fn default() -> Self {
        Self::vanilla()
    }
}

impl ImpartialityConfig {
    /// No blocks: the plain chain rule.
    pub fn vanilla() -> Self {
        Self {
            blocks: BlockSet::none(),
            li: ResolverChain::identity(),
            eei: ResolverChain::identity(),
            dei: ResolverChain::identity(),
            beta: BetaRule::InverseDim,
        }
    }

    /// The given blocks with one resolver chain for all of them.
    pub fn uniform(blocks: BlockSet, chain: ResolverChain) -> Self {
        Self {
            blocks,
            li: chain.clone(),
            eei: chain.clone(),
            dei: chain,
            beta: BetaRule::InverseDim,
        }
    }

    /// All blocks active, identity resolvers and unit weights.
    pub fn neutral(blocks: BlockSet) -> Self {
        Self {
            beta: BetaRule::Unit,
            ..Self::uniform(blocks, ResolverChain::identity())
        }
    }

    pub fn chain(&self, goal: Goal) -> &ResolverChain {
        match goal {
            Goal::Li => &self.li,
            Goal::Eei => &self.eei,
            Goal::Dei => &self.dei,
        }
    }

    pub fn is_active(&self, goal: Goal) -> bool {
        self.blocks.contains(goal)
    }

    /// Head weight for a head of the given goal over a modality of `dim` entries.
    pub fn beta(&self, goal: Goal, dim: usize) -> f64 {
        match goal {
            Goal::Li => self.beta.beta(dim),
            Goal::Eei | Goal::Dei => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub label: String,
    pub beta: f64,
}

/// Declaration of one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpartialityBlock {
    pub block_id: String,
    pub goal: Goal,
    pub inputs: Vec<String>,
    pub heads: Vec<HeadSpec>,
    /// One resolver chain per shared input.
    pub resolvers: Vec<ResolverChain>,
}

impl ImpartialityBlock {
    pub fn new(
        block_id: impl Into<String>,
        goal: Goal,
        inputs: Vec<String>,
        heads: Vec<HeadSpec>,
        resolvers: Vec<ResolverChain>,
    ) -> Result<Self> {
        let block_id = block_id.into();
        let fail = |detail: String| Error::Block {
            block: block_id.clone(),
            detail,
        };
        if heads.is_empty() {
            return Err(fail("no heads".into()));
        }
        if inputs.is_empty() {
            return Err(fail("no shared inputs".into()));
        }
        if resolvers.len() != inputs.len() {
            return Err(fail(format!(
                "{} resolver bindings for {} shared inputs",
                resolvers.len(),
                inputs.len()
            )));
        }
        if let Some(h) = heads.iter().find(|h| !(h.beta > 0.0 && h.beta.is_finite())) {
            return Err(fail(format!("head `{}` has non-positive weight {}", h.label, h.beta)));
        }
        Ok(Self {
            block_id,
            goal,
            inputs,
            heads,
            resolvers,
        })
    }

    /// Block whose inputs all share the resolver configured for its goal.
    pub fn from_config(
        config: &ImpartialityConfig,
        block_id: impl Into<String>,
        goal: Goal,
        inputs: Vec<String>,
        heads: Vec<HeadSpec>,
    ) -> Result<Self> {
        let resolvers = vec![config.chain(goal).clone(); inputs.len()];
        Self::new(block_id, goal, inputs, heads, resolvers)
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }
}

/// All blocks a model registers, in declaration order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockInventory {
    blocks: Vec<ImpartialityBlock>,
}

impl BlockInventory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, block: ImpartialityBlock) -> Result<()> {
        if self.get(&block.block_id).is_some() {
            return Err(Error::Block {
                block: block.block_id,
                detail: "duplicate block id".into(),
            });
        }
        self.blocks.push(block);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&ImpartialityBlock> {
        self.blocks.iter().find(|b| b.block_id == id)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn count(&self, goal: Goal) -> usize {
        self.blocks.iter().filter(|b| b.goal == goal).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ImpartialityBlock> {
        self.blocks.iter()
    }

    /// One line such as `9 blocks (li 3, eei 3, dei 3)`.
    pub fn summary(&self) -> String {
        format!(
            "{} blocks (li {}, eei {}, dei {})",
            self.len(),
            self.count(Goal::Li),
            self.count(Goal::Eei),
            self.count(Goal::Dei)
        )
    }
}

/// A block marked on a tape. Inactive handles hand out the raw inputs so a
/// model can be written once for both the blocked and the plain graph.
#[derive(Clone, Debug)]
pub enum BlockHandle {
    Active { junction: JunctionId, heads: usize },
    Inactive { inputs: Vec<Vec<Var>>, heads: usize },
}

/// Opens a junction for `block` over the given input groups (one group of
/// member nodes per shared input).
pub fn mark_block(tape: &mut Tape, block: &ImpartialityBlock, inputs: Vec<Vec<Var>>) -> Result<BlockHandle> {
    if inputs.len() != block.inputs.len() {
        return Err(Error::Block {
            block: block.block_id.clone(),
            detail: format!("{} input groups for {} declared inputs", inputs.len(), block.inputs.len()),
        });
    }
    let junction = tape.open_junction(
        block.block_id.clone(),
        inputs,
        block.heads.iter().map(|h| h.label.clone()).collect(),
        block.heads.iter().map(|h| h.beta).collect(),
    )?;
    Ok(BlockHandle::Active {
        junction,
        heads: block.heads.len(),
    })
}

impl BlockHandle {
    /// Marks `block` when present, otherwise returns a pass-through handle.
    pub fn open(
        tape: &mut Tape,
        block: Option<&ImpartialityBlock>,
        inputs: Vec<Vec<Var>>,
        heads: usize,
    ) -> Result<Self> {
        match block {
            Some(b) => mark_block(tape, b, inputs),
            None => Ok(BlockHandle::Inactive { inputs, heads }),
        }
    }

    pub fn is_active(&self) -> bool {
        matches!(self, BlockHandle::Active { .. })
    }

    pub fn heads(&self) -> usize {
        match self {
            BlockHandle::Active { heads, .. } | BlockHandle::Inactive { heads, .. } => *heads,
        }
    }

    /// Head-private view of every member of shared input `input`.
    pub fn input(&self, tape: &mut Tape, input: usize, head: usize) -> Result<Vec<Var>> {
        match self {
            BlockHandle::Active { junction, .. } => tape.junction_input(*junction, input, head),
            BlockHandle::Inactive { inputs, .. } => inputs
                .get(input)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("no shared input {input}"))),
        }
    }

    /// Single-member shorthand for [`BlockHandle::input`].
    pub fn input1(&self, tape: &mut Tape, input: usize, head: usize) -> Result<Var> {
        let members = self.input(tape, input, head)?;
        match members.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::invalid(format!("shared input {input} has {} members", members.len()))),
        }
    }

    pub fn output(&self, tape: &mut Tape, head: usize, x: Var) -> Result<Var> {
        match self {
            BlockHandle::Active { junction, .. } => tape.junction_output(*junction, head, x),
            BlockHandle::Inactive { .. } => Ok(x),
        }
    }

    pub fn close(&self, tape: &mut Tape) -> Result<()> {
        match self {
            BlockHandle::Active { junction, .. } => tape.close_junction(*junction),
            BlockHandle::Inactive { .. } => Ok(()),
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Stateful resolvers for every (block, input) pair of an inventory.
#[derive(Clone, Debug)]
pub struct ResolverBank {
    resolvers: HashMap<(String, usize), ChainResolver>,
    calls: u64,
}

impl ResolverBank {
    pub fn new(inventory: &BlockInventory, seed: u64) -> Self {
        let mut resolvers = HashMap::new();
        for block in inventory.iter() {
            for (m, chain) in block.resolvers.iter().enumerate() {
                let s = seed ^ fnv1a(&block.block_id).wrapping_add(m as u64);
                resolvers.insert((block.block_id.clone(), m), ChainResolver::new(chain, s));
            }
        }
        Self { resolvers, calls: 0 }
    }

    /// Number of resolver invocations so far.
    pub fn calls(&self) -> u64 {
        self.calls
    }

    pub fn get(&self, block: &str, input: usize) -> Option<&ChainResolver> {
        self.resolvers.get(&(block.to_string(), input))
    }
}

impl JunctionResolver for ResolverBank {
    fn resolve(&mut self, junction: &JunctionInfo, input: usize, rows: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
        let resolver = self
            .resolvers
            .get_mut(&(junction.label.clone(), input))
            .ok_or_else(|| Error::Block {
                block: junction.label.clone(),
                detail: format!("no resolver bound to input {input}"),
            })?;
        self.calls += 1;
        if resolver.stages().iter().all(|s| s.config().kind == crate::gradconflict::ResolverKind::Identity) {
            return Ok(rows);
        }
        let stack = GradientStack::new(rows, junction.head_labels.clone())?;
        Ok(resolver.resolve(&stack)?.into_rows())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{PassThrough, Tensor};
    use crate::gradconflict::{ResolverConfig, ResolverKind};

    fn two_head_block(chain: ResolverChain, betas: [f64; 2]) -> ImpartialityBlock {
        ImpartialityBlock::new(
            "toy",
            Goal::Li,
            vec!["y".into()],
            vec![
                HeadSpec {
                    label: "a".into(),
                    beta: betas[0],
                },
                HeadSpec {
                    label: "b".into(),
                    beta: betas[1],
                },
            ],
            vec![chain],
        )
        .unwrap()
    }

    /// y = w·x, heads (+c·y, −c·y) summed: the vanilla gradient at w cancels.
    fn run(block: Option<&ImpartialityBlock>, bank: &mut dyn JunctionResolver) -> (f64, f64) {
        let mut tape = Tape::new(0);
        let w = tape.leaf(Tensor::vector(vec![0.7, -0.3]), true);
        let x = tape.constant(Tensor::vector(vec![1.5, 2.0]));
        let y = tape.mul(w, x).unwrap();
        let h = BlockHandle::open(&mut tape, block, vec![vec![y]], 2).unwrap();
        let mut outs = Vec::new();
        for (head, c) in [(0, Tensor::vector(vec![1.0, 2.0])), (1, Tensor::vector(vec![-1.0, -2.0]))] {
            let yi = h.input1(&mut tape, 0, head).unwrap();
            let c = tape.constant(c);
            let t = tape.mul(yi, c).unwrap();
            let s = tape.sum(t);
            outs.push(h.output(&mut tape, head, s).unwrap());
        }
        h.close(&mut tape).unwrap();
        let loss = tape.add(outs[0], outs[1]).unwrap();
        let value = tape.value(loss).item();
        let g = tape.backward_with(loss, bank).unwrap();
        (value, g.wrt(w).unwrap().data().iter().map(|v| v.abs()).sum())
    }

    #[test]
    fn block_set_parsing() {
        assert_eq!("".parse::<BlockSet>().unwrap(), BlockSet::none());
        assert_eq!("li, dei".parse::<BlockSet>().unwrap().to_string(), "li,dei");
        assert_eq!("li,eei,dei".parse::<BlockSet>().unwrap(), BlockSet::all());
        assert!("lx".parse::<BlockSet>().is_err());
    }

    #[test]
    fn beta_rules() {
        assert_eq!(BetaRule::InverseDim.beta(4), 0.25);
        assert_eq!(BetaRule::Dim.beta(4), 4.0);
        assert_eq!("2.5".parse::<BetaRule>().unwrap(), BetaRule::Constant(2.5));
        assert!("-1".parse::<BetaRule>().is_err());
        let cfg = ImpartialityConfig::uniform(BlockSet::all(), ResolverChain::identity());
        assert_eq!(cfg.beta(Goal::Li, 8), 0.125);
        assert_eq!(cfg.beta(Goal::Eei, 8), 1.0);
    }

    #[test]
    fn block_declaration_is_validated() {
        let chain = ResolverChain::identity();
        let head = |b: f64| HeadSpec {
            label: "h".into(),
            beta: b,
        };
        assert!(ImpartialityBlock::new("b", Goal::Li, vec!["y".into()], vec![head(0.0)], vec![chain.clone()]).is_err());
        assert!(ImpartialityBlock::new("b", Goal::Li, vec!["y".into()], vec![head(1.0)], vec![]).is_err());
        assert!(ImpartialityBlock::new("b", Goal::Li, vec!["y".into()], vec![], vec![chain.clone()]).is_err());
        let mut inv = BlockInventory::new();
        let b = ImpartialityBlock::new("b", Goal::Li, vec!["y".into()], vec![head(1.0)], vec![chain]).unwrap();
        inv.push(b.clone()).unwrap();
        assert!(inv.push(b).is_err());
        assert_eq!(inv.summary(), "1 blocks (li 1, eei 0, dei 0)");
    }

    #[test]
    fn opposite_heads_cancel_under_identity_but_not_pcgrad() {
        let (v0, g0) = run(None, &mut PassThrough);
        assert!(g0 < 1e-15);

        let block = two_head_block(ResolverChain::identity(), [1.0, 1.0]);
        let mut inv = BlockInventory::new();
        inv.push(block.clone()).unwrap();
        let mut bank = ResolverBank::new(&inv, 0);
        let (v1, g1) = run(Some(&block), &mut bank);
        assert_eq!(v0, v1);
        assert!(g1 < 1e-15);
        assert_eq!(bank.calls(), 1);

        // sign purity keeps one side of every coordinate
        let block = two_head_block(ResolverChain::single(ResolverConfig::of(ResolverKind::GradDrop)), [1.0, 1.0]);
        let mut inv = BlockInventory::new();
        inv.push(block.clone()).unwrap();
        let mut bank = ResolverBank::new(&inv, 0);
        let (_, g2) = run(Some(&block), &mut bank);
        assert!(g2 > 0.1, "{g2}");

        // exactly antiparallel rows project to zero
        let block = two_head_block(ResolverChain::single(ResolverConfig::of(ResolverKind::PcGrad)), [1.0, 1.0]);
        let mut inv = BlockInventory::new();
        inv.push(block.clone()).unwrap();
        let mut bank = ResolverBank::new(&inv, 0);
        let (_, g3) = run(Some(&block), &mut bank);
        assert!(g3 < 1e-15, "{g3}");

        // unequal weights break the cancellation even under identity
        let block = two_head_block(ResolverChain::identity(), [2.0, 1.0]);
        let mut inv = BlockInventory::new();
        inv.push(block.clone()).unwrap();
        let mut bank = ResolverBank::new(&inv, 0);
        let (_, g4) = run(Some(&block), &mut bank);
        // w-gradient = (c_a·x)·(β_a − β_b) summed in absolute value
        assert!((g4 - (1.5 + 4.0)).abs() < 1e-12, "{g4}");
    }

    #[test]
    fn unknown_block_is_reported() {
        let block = two_head_block(ResolverChain::identity(), [1.0, 1.0]);
        let mut bank = ResolverBank::new(&BlockInventory::new(), 0);
        let mut tape = Tape::new(0);
        let y = tape.leaf(Tensor::vector(vec![1.0]), true);
        let h = mark_block(&mut tape, &block, vec![vec![y]]).unwrap();
        let mut outs = Vec::new();
        for head in 0..2 {
            let yi = h.input1(&mut tape, 0, head).unwrap();
            let s = tape.sum(yi);
            outs.push(h.output(&mut tape, head, s).unwrap());
        }
        h.close(&mut tape).unwrap();
        let loss = tape.add(outs[0], outs[1]).unwrap();
        let err = tape.backward_with(loss, &mut bank).unwrap_err();
        assert!(err.to_string().contains("toy"), "{err}");
    }

    #[test]
    fn input_group_count_must_match_declaration() {
        let block = two_head_block(ResolverChain::identity(), [1.0, 1.0]);
        let mut tape = Tape::new(0);
        let y = tape.leaf(Tensor::vector(vec![1.0]), true);
        assert!(mark_block(&mut tape, &block, vec![vec![y], vec![y]]).is_err());
    }
}
