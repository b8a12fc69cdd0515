//! Tree-based exploration of the factorization solution set.
//!
//! Starting from solver restarts, a rapidly-exploring random tree grows over
//! the oblique manifold of basis changes: each iteration samples a random
//! target point, finds the nearest tree node (Frobenius distance), and steps
//! from it toward the target with geometrically growing step sizes
//! `s₀, s₀·g, s₀·g², …` until a step becomes infeasible or the per-extension
//! step cap is hit. Sampling targets uniformly biases growth toward the
//! largest unexplored Voronoi cells, so the tree spreads over the feasible
//! set instead of random-walking.
//!
//! Feasibility depends on the likelihood. Under the Gaussian model a stepped
//! candidate (scale-optimized) must score a log joint at least as high as an
//! adaptive quality threshold: initially the poorest solver restart, and once
//! the node budget saturates, the best node in the tree — from then on new
//! nodes displace the current worst. Under the interval (uniform-noise) model
//! the log joint must be finite (every residual strictly inside the noise
//! band) *and* the candidate must lie at least a minimum weighted angular
//! distance from every existing node; whenever the temporary-node budget
//! fills, the temporaries are discarded, the angle bar is raised, and growth
//! restarts from the persistent base nodes.
//!
//! Every node added by an extension is offered to a [`ProposalSink`]
//! (typically the online mixture builder). The run stops after a fixed
//! number of sink offers or a fixed number of consecutive trapped
//! extensions.

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::manifold::{self, ObliquePoint};
use crate::metrics::{wad, ColumnScale};
use crate::model::{log_joint, optimize_scale, Factorization, ModelSpec, ScaleObjective};
use crate::nmf::{lin_restarts, truncated_svd, LinOptions, SvdPair};
use crate::vi::OnviState;

/// Steps that move a point by less than this are degenerate (zero tangent
/// direction) and end the extension.
const ZERO_MOTION_TOL: f64 = 1e-9;

/// Solver settings for the seed restarts. These run much tighter than the
/// noise-calibration restarts: a loosely converged fit sits far enough from
/// the data's rank-R subspace that its basis-change embedding floors away
/// half the weight matrix, leaving the tree stuck at nodes whose projected
/// candidates are nowhere near the data. Tight convergence keeps the
/// embedded seeds inside the feasible band.
const SEED_LIN_OPTIONS: LinOptions = LinOptions { tol: 1e-6, max_outer: 2000, max_inner: 1000 };

/// Whether a node survives budget resets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    /// Persists across temporary-node resets (interval mode only).
    Base,
    /// Discarded when the temporary budget fills.
    Temporary,
}

/// One explored point: its manifold coordinates, the factorization it maps
/// to, and that factorization's log joint.
#[derive(Debug, Clone)]
pub struct RrtNode {
    pub q: ObliquePoint,
    /// Scale-optimized under the Gaussian likelihood, raw otherwise.
    pub factorization: Factorization,
    /// `log_joint` of `factorization` (recomputable to 1e-9).
    pub quality: f64,
    pub kind: NodeKind,
}

/// Which quality the Gaussian threshold tracks after the node budget
/// saturates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ThresholdReferent {
    /// Quality of the best tree node.
    #[default]
    BestNode,
    /// Best quality reported by the proposal sink, falling back to the best
    /// node when the sink does not track one.
    SinkBest,
}

/// Exploration parameters. Defaults differ per likelihood; see
/// [`RrtConfig::gaussian_defaults`] and [`RrtConfig::uniform_defaults`].
#[derive(Debug, Clone)]
pub struct RrtConfig {
    /// Initial step size on the manifold.
    pub s0: f64,
    /// Multiplicative step growth within one extension.
    pub growth: f64,
    /// Steps attempted per extension.
    pub max_extend_steps: usize,
    /// Node budget: total nodes (Gaussian) or temporary nodes (interval).
    pub max_temp_nodes: usize,
    /// Interval mode: minimum angular separation (degrees) from every tree
    /// node for a candidate to count as new.
    pub min_angle_deg: f64,
    /// Interval mode: how much the angle bar rises at each budget reset.
    pub min_angle_increment_deg: f64,
    /// Stop after the sink has processed this many offers.
    pub max_proposals: usize,
    /// Stop after this many consecutive trapped extensions.
    pub max_failed_attempts: usize,
    /// Solver restarts used to seed the tree.
    pub n_init_restarts: usize,
    /// Scale objective applied to Gaussian-mode nodes.
    pub scale_objective: ScaleObjective,
    /// Gaussian threshold referent after saturation.
    pub threshold_referent: ThresholdReferent,
    pub seed: u64,
}

impl RrtConfig {
    /// Gaussian-mode defaults: 50 seeding restarts, 100-node budget.
    pub fn gaussian_defaults(seed: u64) -> Self {
        Self {
            s0: 0.01,
            growth: 1.10,
            max_extend_steps: 50,
            max_temp_nodes: 100,
            min_angle_deg: 0.01,
            min_angle_increment_deg: 0.5,
            max_proposals: 5000,
            max_failed_attempts: 10_000,
            n_init_restarts: 50,
            scale_objective: ScaleObjective::default(),
            threshold_referent: ThresholdReferent::default(),
            seed,
        }
    }

    /// Interval-mode defaults: 10 base restarts, 90 temporary nodes,
    /// 0.01° angle bar rising by 0.5° per reset.
    pub fn uniform_defaults(seed: u64) -> Self {
        Self { max_temp_nodes: 90, n_init_restarts: 10, ..Self::gaussian_defaults(seed) }
    }

    /// Defaults matching the likelihood of `spec`.
    pub fn for_spec(spec: &ModelSpec, seed: u64) -> Self {
        if spec.likelihood.is_gaussian() {
            Self::gaussian_defaults(seed)
        } else {
            Self::uniform_defaults(seed)
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("s0", self.s0),
            ("min_angle_deg", self.min_angle_deg),
            ("min_angle_increment_deg", self.min_angle_increment_deg),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.growth > 1.0 && self.growth.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "growth must exceed 1, got {}",
                self.growth
            )));
        }
        for (name, v) in [
            ("max_extend_steps", self.max_extend_steps),
            ("max_temp_nodes", self.max_temp_nodes),
            ("max_proposals", self.max_proposals),
            ("max_failed_attempts", self.max_failed_attempts),
            ("n_init_restarts", self.n_init_restarts),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Step sizes tried within one extension: `s0·growth^k`.
pub fn step_schedule(config: &RrtConfig) -> impl Iterator<Item = f64> + '_ {
    (0..config.max_extend_steps).map(move |k| config.s0 * config.growth.powi(k as i32))
}

/// Consumer of explored candidates.
pub trait ProposalSink {
    /// Processes one candidate; returns whether the consumer retained it.
    fn offer(&mut self, candidate: &Factorization) -> Result<bool>;
    /// How many candidates have been processed (retained or not).
    fn offers(&self) -> usize;
    /// Quality of the consumer's best retained item, if tracked.
    fn best_quality(&self) -> Option<f64> {
        None
    }
}

impl ProposalSink for OnviState<'_> {
    fn offer(&mut self, candidate: &Factorization) -> Result<bool> {
        Ok(self.propose(candidate)?.accepted)
    }

    fn offers(&self) -> usize {
        self.proposals_seen()
    }

    fn best_quality(&self) -> Option<f64> {
        self.best_reported()
    }
}

/// Sink that records every candidate; useful for inspection and tests.
#[derive(Debug, Clone, Default)]
pub struct CollectSink {
    pub accept_all: bool,
    pub candidates: Vec<Factorization>,
}

impl CollectSink {
    pub fn new(accept_all: bool) -> Self {
        Self { accept_all, candidates: Vec::new() }
    }
}

impl ProposalSink for CollectSink {
    fn offer(&mut self, candidate: &Factorization) -> Result<bool> {
        self.candidates.push(candidate.clone());
        Ok(self.accept_all)
    }

    fn offers(&self) -> usize {
        self.candidates.len()
    }
}

/// The search tree. Nodes are appended by [`extend`]; the only other
/// mutations are worst-node replacement (Gaussian, at budget) and temporary
/// clearing (interval resets).
#[derive(Debug, Clone, Default)]
pub struct Tree {
    nodes: Vec<RrtNode>,
}

impl Tree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[RrtNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn push(&mut self, node: RrtNode) {
        self.nodes.push(node);
    }

    fn temp_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Temporary).count()
    }

    /// Index of the node nearest to `q` (linear scan; ties take the lowest
    /// index). Node counts stay small enough that nothing cleverer pays off.
    pub fn nearest(&self, q: &ObliquePoint) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, node) in self.nodes.iter().enumerate() {
            let d = manifold::distance(&node.q, q);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best.map(|(i, _)| i)
    }

    fn worst_quality_index(&self) -> Option<usize> {
        (0..self.nodes.len()).min_by(|&a, &b| {
            self.nodes[a].quality.total_cmp(&self.nodes[b].quality)
        })
    }

    fn best_quality(&self) -> f64 {
        self.nodes.iter().map(|n| n.quality).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Smallest weighted angular distance from `candidate` to any node.
    fn min_wad_deg(&self, candidate: &Factorization) -> Result<Option<f64>> {
        let mut min: Option<f64> = None;
        for node in &self.nodes {
            let d = wad(candidate, &node.factorization, ColumnScale::L1)?;
            min = Some(min.map_or(d, |m: f64| m.min(d)));
        }
        Ok(min)
    }
}

/// Mode-specific feasibility state, mutated as the run adapts.
#[derive(Debug, Clone)]
pub enum ModeState {
    Gaussian { quality_threshold: f64, saturated: bool },
    Uniform { min_angle_deg: f64 },
}

/// Feasibility of a candidate with precomputed `quality` (its log joint) and
/// `min_wad_deg` (smallest angular distance to the tree, `None` for an empty
/// tree).
pub fn feasible(quality: f64, min_wad_deg: Option<f64>, state: &ModeState) -> bool {
    match state {
        ModeState::Gaussian { quality_threshold, .. } => quality >= *quality_threshold,
        ModeState::Uniform { min_angle_deg } => {
            quality > f64::NEG_INFINITY
                && min_wad_deg.is_none_or(|d| d >= *min_angle_deg)
        }
    }
}

/// Everything an extension needs besides the tree itself.
pub struct ExtendContext<'a> {
    pub x: &'a DMatrix<f64>,
    pub spec: &'a ModelSpec,
    pub svd: &'a SvdPair,
    pub config: &'a RrtConfig,
}

/// A node added during one extension, snapshotted at insertion time (under
/// Gaussian replacement the index may later point elsewhere).
#[derive(Debug, Clone)]
pub struct AddedNode {
    pub index: usize,
    pub factorization: Factorization,
    pub quality: f64,
    /// Angular distance to the nearest tree node at insertion time.
    pub wad_to_nearest_deg: Option<f64>,
}

/// Outcome of one extension.
#[derive(Debug, Clone)]
pub enum ExtendOutcome {
    /// At least one feasible step was taken.
    Advanced(Vec<AddedNode>),
    /// The very first step was infeasible (or degenerate): no new nodes.
    Trapped,
}

/// Grows the tree from the node nearest `target` toward `target`, taking
/// geometrically growing steps until one is infeasible, degenerate, over the
/// step cap, or (interval mode) over the temporary budget. Every feasible
/// stepped point becomes a node.
pub fn extend(
    tree: &mut Tree,
    target: &ObliquePoint,
    ctx: &ExtendContext<'_>,
    state: &mut ModeState,
) -> Result<ExtendOutcome> {
    let nearest = tree
        .nearest(target)
        .ok_or_else(|| Error::InvalidArgument("cannot extend an empty tree".into()))?;
    let mut current = tree.nodes[nearest].q.clone();
    let mut added = Vec::new();

    for s in step_schedule(ctx.config) {
        if matches!(state, ModeState::Uniform { .. })
            && tree.temp_count() >= ctx.config.max_temp_nodes
        {
            break; // budget full; the caller resets and restarts
        }
        // Manifold singularities along the way are infeasible, not errors.
        let next = match manifold::step(&current, target, s) {
            Ok(q) => q,
            Err(_) => break,
        };
        if manifold::distance(&next, &current) <= ZERO_MOTION_TOL {
            break; // degenerate direction: no motion left
        }
        let fac = match q_to_candidate(&next, ctx) {
            Ok(f) => f,
            Err(_) => break,
        };
        let quality = match log_joint(ctx.x, &fac, ctx.spec) {
            Ok(v) => v,
            Err(_) => break,
        };
        let min_wad = tree.min_wad_deg(&fac)?;
        if !feasible(quality, min_wad, state) {
            break;
        }
        let index = insert(tree, RrtNode {
            q: next.clone(),
            factorization: fac.clone(),
            quality,
            kind: NodeKind::Temporary,
        }, ctx.config, state);
        added.push(AddedNode {
            index,
            factorization: fac,
            quality,
            wad_to_nearest_deg: min_wad,
        });
        current = next;
    }

    if added.is_empty() {
        Ok(ExtendOutcome::Trapped)
    } else {
        Ok(ExtendOutcome::Advanced(added))
    }
}

/// Maps a manifold point to its candidate factorization (scale-optimized
/// under the Gaussian likelihood). A factorization whose floor projection
/// zeroed out a whole column cannot be rescaled; it is kept as-is and left
/// for the quality threshold to judge.
fn q_to_candidate(q: &ObliquePoint, ctx: &ExtendContext<'_>) -> Result<Factorization> {
    let fac = manifold::q_to_factorization(q, ctx.svd)?;
    if ctx.spec.likelihood.is_gaussian() {
        match optimize_scale(&fac, ctx.config.scale_objective) {
            Ok(s) => Ok(s.factorization),
            Err(_) => Ok(fac),
        }
    } else {
        Ok(fac)
    }
}

/// Inserts a node; at the Gaussian budget it replaces the worst node and
/// keeps the quality threshold pinned to the referent.
fn insert(tree: &mut Tree, node: RrtNode, config: &RrtConfig, state: &mut ModeState) -> usize {
    let index = match state {
        ModeState::Gaussian { .. } if tree.len() >= config.max_temp_nodes => {
            let worst = tree.worst_quality_index().expect("non-empty tree");
            tree.nodes[worst] = node;
            worst
        }
        _ => {
            tree.push(node);
            tree.len() - 1
        }
    };
    if let ModeState::Gaussian { quality_threshold, saturated } = state {
        if tree.len() >= config.max_temp_nodes {
            *saturated = true;
            *quality_threshold = tree.best_quality();
        }
    }
    index
}

/// Why an exploration run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// The sink processed the full proposal budget.
    ProposalBudget,
    /// Too many consecutive trapped extensions.
    FailedAttempts,
}

/// One sink offer, as logged by [`explore`].
#[derive(Debug, Clone)]
pub struct ProposalRecord {
    pub quality: f64,
    pub wad_to_nearest_deg: Option<f64>,
    pub accepted: bool,
}

/// Summary of an exploration run.
#[derive(Debug, Clone)]
pub struct ExploreReport {
    pub termination: Termination,
    pub extends: usize,
    pub trapped_extends: usize,
    pub nodes_final: usize,
    pub base_nodes_final: usize,
    pub proposals: Vec<ProposalRecord>,
    pub accepted: usize,
    /// Interval mode: how many times the temporary budget was cleared.
    pub resets: usize,
    /// Interval mode: the angle bar when the run ended.
    pub min_angle_final_deg: f64,
    /// Gaussian mode: the quality threshold when the run ended.
    pub quality_threshold_final: Option<f64>,
}

/// Runs the full exploration loop, offering every new node's factorization
/// to `sink`. See the module docs for the per-likelihood behavior.
pub fn explore<S: ProposalSink>(
    x: &DMatrix<f64>,
    spec: &ModelSpec,
    config: &RrtConfig,
    sink: &mut S,
) -> Result<ExploreReport> {
    let seeded = seed(x, spec, config)?;
    explore_seeded(x, spec, config, seeded, sink)
}

/// A tree ready to grow: the data's rank-R basis, the seed nodes, and the
/// initial feasibility state. Produced by [`seed`]; lets callers inspect the
/// seed nodes (e.g. to pick the starting mixture component) before running
/// [`explore_seeded`].
#[derive(Debug, Clone)]
pub struct Seeded {
    pub svd: SvdPair,
    pub tree: Tree,
    pub state: ModeState,
}

/// Validates the configuration and seeds the tree from solver restarts.
pub fn seed(x: &DMatrix<f64>, spec: &ModelSpec, config: &RrtConfig) -> Result<Seeded> {
    config.validate()?;
    if x.shape() != (spec.d, spec.n) {
        return Err(Error::DimensionMismatch(format!(
            "data must be {}x{}, got {:?}",
            spec.d,
            spec.n,
            x.shape()
        )));
    }
    let svd = truncated_svd(x, spec.r)?;
    let mut tree = Tree::new();
    let state = init_tree(x, spec, &svd, config, &mut tree)?;
    Ok(Seeded { svd, tree, state })
}

/// Runs the exploration loop on an already-seeded tree.
pub fn explore_seeded<S: ProposalSink>(
    x: &DMatrix<f64>,
    spec: &ModelSpec,
    config: &RrtConfig,
    seeded: Seeded,
    sink: &mut S,
) -> Result<ExploreReport> {
    let Seeded { svd, mut tree, mut state } = seeded;
    let gaussian = spec.likelihood.is_gaussian();
    let ctx = ExtendContext { x, spec, svd: &svd, config };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = ExploreReport {
        termination: Termination::ProposalBudget,
        extends: 0,
        trapped_extends: 0,
        nodes_final: 0,
        base_nodes_final: 0,
        proposals: Vec::new(),
        accepted: 0,
        resets: 0,
        min_angle_final_deg: config.min_angle_deg,
        quality_threshold_final: None,
    };
    let mut consecutive_trapped = 0usize;

    loop {
        if sink.offers() >= config.max_proposals {
            report.termination = Termination::ProposalBudget;
            break;
        }
        if consecutive_trapped >= config.max_failed_attempts {
            report.termination = Termination::FailedAttempts;
            break;
        }
        let target = manifold::sample_uniform(spec.r, &mut rng)?;
        report.extends += 1;
        match extend(&mut tree, &target, &ctx, &mut state)? {
            ExtendOutcome::Trapped => {
                consecutive_trapped += 1;
                report.trapped_extends += 1;
            }
            ExtendOutcome::Advanced(added) => {
                consecutive_trapped = 0;
                for node in &added {
                    if sink.offers() >= config.max_proposals {
                        break;
                    }
                    let accepted = sink.offer(&node.factorization)?;
                    if accepted {
                        report.accepted += 1;
                        if !gaussian {
                            tree.nodes[node.index].kind = NodeKind::Base;
                        }
                    }
                    report.proposals.push(ProposalRecord {
                        quality: node.quality,
                        wad_to_nearest_deg: node.wad_to_nearest_deg,
                        accepted,
                    });
                }
                // Gaussian threshold may track the sink's best component.
                if let (
                    ThresholdReferent::SinkBest,
                    ModeState::Gaussian { quality_threshold, saturated: true },
                ) = (config.threshold_referent, &mut state)
                {
                    if let Some(q) = sink.best_quality() {
                        *quality_threshold = q;
                    }
                }
                if let ModeState::Uniform { min_angle_deg } = &mut state {
                    if tree.temp_count() >= config.max_temp_nodes {
                        tree.nodes.retain(|n| n.kind == NodeKind::Base);
                        *min_angle_deg += config.min_angle_increment_deg;
                        report.resets += 1;
                    }
                }
            }
        }
    }

    report.nodes_final = tree.len();
    report.base_nodes_final =
        tree.nodes.iter().filter(|n| n.kind == NodeKind::Base).count();
    match &state {
        ModeState::Gaussian { quality_threshold, .. } => {
            report.quality_threshold_final = Some(*quality_threshold);
        }
        ModeState::Uniform { min_angle_deg } => {
            report.min_angle_final_deg = *min_angle_deg;
        }
    }
    Ok(report)
}

/// Seeds the tree from solver restarts and builds the initial mode state.
///
/// Every restart is embedded as a basis change against the data's rank-R
/// subspace and the node keeps the *projected* candidate at that embedding —
/// the same mapping every later stepped node goes through — so node
/// qualities are comparable across the whole tree. Gaussian: every embedded
/// restart becomes a node and the quality threshold starts at the poorest
/// one. Interval: projected seeds pass the same feasibility gate as explored
/// nodes, dropping out-of-band projections and angular near-duplicates;
/// survivors become base nodes.
fn init_tree(
    x: &DMatrix<f64>,
    spec: &ModelSpec,
    svd: &SvdPair,
    config: &RrtConfig,
    tree: &mut Tree,
) -> Result<ModeState> {
    let fits = lin_restarts(x, spec.r, config.n_init_restarts, config.seed, &SEED_LIN_OPTIONS)?;
    let gaussian = spec.likelihood.is_gaussian();
    let mut state = if gaussian {
        ModeState::Gaussian { quality_threshold: f64::NEG_INFINITY, saturated: false }
    } else {
        ModeState::Uniform { min_angle_deg: config.min_angle_deg }
    };
    let ctx = ExtendContext { x, spec, svd, config };

    for fit in &fits {
        let q = match manifold::factorization_to_q(&fit.factorization, svd) {
            Ok(q) => q,
            Err(_) => continue, // degenerate restart (zero or collinear columns)
        };
        let fac = match q_to_candidate(&q, &ctx) {
            Ok(f) => f,
            Err(_) => continue, // embedding too ill-conditioned to project
        };
        let quality = log_joint(x, &fac, spec)?;
        if !gaussian {
            let min_wad = tree.min_wad_deg(&fac)?;
            if !feasible(quality, min_wad, &state) {
                continue;
            }
        }
        tree.push(RrtNode {
            q,
            factorization: fac,
            quality,
            kind: if gaussian { NodeKind::Temporary } else { NodeKind::Base },
        });
    }

    if tree.is_empty() {
        return Err(Error::Infeasible(
            "no usable seed nodes; for interval noise, widen the band".into(),
        ));
    }
    if let ModeState::Gaussian { quality_threshold, .. } = &mut state {
        *quality_threshold =
            tree.nodes.iter().map(|n| n.quality).fold(f64::INFINITY, f64::min);
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_two_truth_toy, ToyOptions};
    use crate::model::Likelihood;
    use crate::nmf::Init;
    use approx::assert_relative_eq;

    fn small_gaussian_setup(
        seed: u64,
    ) -> (DMatrix<f64>, ModelSpec, SvdPair) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(8, 2, |_, _| rng.gen_range(0.1..1.0));
        let w = DMatrix::from_fn(2, 7, |_, _| rng.gen_range(0.1..1.0));
        let x = (&a * &w).map(|v| v + rng.gen_range(-0.01..0.01)).map(|v: f64| v.max(0.0));
        let spec = ModelSpec::new(8, 7, 2, Likelihood::Gaussian { sigma2: 0.01 }).unwrap();
        let svd = truncated_svd(&x, 2).unwrap();
        (x, spec, svd)
    }

    fn node_from_q(
        q: ObliquePoint,
        x: &DMatrix<f64>,
        spec: &ModelSpec,
        svd: &SvdPair,
        kind: NodeKind,
    ) -> RrtNode {
        let fac = manifold::q_to_factorization(&q, svd).unwrap();
        let quality = log_joint(x, &fac, spec).unwrap();
        RrtNode { q, factorization: fac, quality, kind }
    }

    #[test]
    fn step_schedule_grows_ten_percent_for_fifty_steps() {
        let cfg = RrtConfig::gaussian_defaults(0);
        let s: Vec<f64> = step_schedule(&cfg).collect();
        assert_eq!(s.len(), 50);
        assert_relative_eq!(s[0], 0.01, epsilon = 1e-15);
        assert_relative_eq!(s[1], 0.011, epsilon = 1e-15);
        assert_relative_eq!(s[2], 0.0121, epsilon = 1e-15);
        assert_relative_eq!(s[49], 0.01 * 1.1f64.powi(49), epsilon = 1e-15);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut sink = CollectSink::new(false);
        let (x, spec, _) = small_gaussian_setup(1);
        for bad in [
            RrtConfig { s0: 0.0, ..RrtConfig::gaussian_defaults(0) },
            RrtConfig { growth: 1.0, ..RrtConfig::gaussian_defaults(0) },
            RrtConfig { max_extend_steps: 0, ..RrtConfig::gaussian_defaults(0) },
            RrtConfig { n_init_restarts: 0, ..RrtConfig::gaussian_defaults(0) },
        ] {
            assert!(explore(&x, &spec, &bad, &mut sink).is_err());
        }
    }

    #[test]
    fn extend_trapped_when_target_equals_nearest() {
        let (x, spec, svd) = small_gaussian_setup(2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = manifold::sample_uniform(2, &mut rng).unwrap();
        let mut tree = Tree::new();
        tree.push(node_from_q(q.clone(), &x, &spec, &svd, NodeKind::Temporary));
        let cfg = RrtConfig::gaussian_defaults(0);
        let ctx = ExtendContext { x: &x, spec: &spec, svd: &svd, config: &cfg };
        let mut state =
            ModeState::Gaussian { quality_threshold: f64::NEG_INFINITY, saturated: false };
        let out = extend(&mut tree, &q, &ctx, &mut state).unwrap();
        assert!(matches!(out, ExtendOutcome::Trapped));
        assert_eq!(tree.len(), 1);
    }

    #[test]
    fn extend_moves_toward_target_in_free_space() {
        let (x, spec, svd) = small_gaussian_setup(3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let start = manifold::sample_uniform(2, &mut rng).unwrap();
        let target = manifold::sample_uniform(2, &mut rng).unwrap();
        let mut tree = Tree::new();
        tree.push(node_from_q(start.clone(), &x, &spec, &svd, NodeKind::Temporary));
        // Threshold -inf: everything feasible, pure geometry.
        let cfg = RrtConfig { max_temp_nodes: 10_000, ..RrtConfig::gaussian_defaults(0) };
        let ctx = ExtendContext { x: &x, spec: &spec, svd: &svd, config: &cfg };
        let mut state =
            ModeState::Gaussian { quality_threshold: f64::NEG_INFINITY, saturated: false };
        match extend(&mut tree, &target, &ctx, &mut state).unwrap() {
            ExtendOutcome::Advanced(added) => {
                assert!(!added.is_empty());
                let last = &tree.nodes()[added.last().unwrap().index];
                assert!(
                    manifold::distance(&last.q, &target)
                        < manifold::distance(&start, &target)
                );
            }
            ExtendOutcome::Trapped => panic!("free space must advance"),
        }
    }

    #[test]
    fn dispersion_decreases_across_node_checkpoints() {
        // Feasibility-free growth on the 2x2 manifold: the max distance from
        // 1000 probe points to the tree shrinks at every 50-node checkpoint.
        let (x, spec, svd) = small_gaussian_setup(4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let probes: Vec<ObliquePoint> =
            (0..1000).map(|_| manifold::sample_uniform(2, &mut rng).unwrap()).collect();
        let dispersion = |tree: &Tree| -> f64 {
            probes
                .iter()
                .map(|p| {
                    tree.nodes()
                        .iter()
                        .map(|n| manifold::distance(&n.q, p))
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(0.0, f64::max)
        };

        let mut tree = Tree::new();
        tree.push(node_from_q(
            manifold::sample_uniform(2, &mut rng).unwrap(),
            &x,
            &spec,
            &svd,
            NodeKind::Temporary,
        ));
        let cfg = RrtConfig {
            max_temp_nodes: usize::MAX / 2,
            max_extend_steps: 10,
            ..RrtConfig::gaussian_defaults(0)
        };
        let ctx = ExtendContext { x: &x, spec: &spec, svd: &svd, config: &cfg };
        let mut state =
            ModeState::Gaussian { quality_threshold: f64::NEG_INFINITY, saturated: false };

        let mut checkpoints = Vec::new();
        let mut next_checkpoint = 50;
        for _ in 0..500 {
            let target = manifold::sample_uniform(2, &mut rng).unwrap();
            let _ = extend(&mut tree, &target, &ctx, &mut state).unwrap();
            if tree.len() >= next_checkpoint {
                checkpoints.push(dispersion(&tree));
                next_checkpoint += 50;
            }
            if checkpoints.len() >= 8 {
                break;
            }
        }
        assert!(checkpoints.len() >= 4, "not enough checkpoints: {checkpoints:?}");
        for pair in checkpoints.windows(2) {
            assert!(pair[1] < pair[0], "dispersion must shrink: {checkpoints:?}");
        }
    }

    #[test]
    fn feasibility_rules_per_mode() {
        // Gaussian: pure quality threshold.
        let g = ModeState::Gaussian { quality_threshold: -5.0, saturated: false };
        assert!(feasible(-4.9, None, &g));
        assert!(!feasible(-5.1, None, &g));
        // Interval: finite joint AND angular novelty.
        let u = ModeState::Uniform { min_angle_deg: 0.01 };
        assert!(feasible(-3.0, Some(0.02), &u));
        assert!(!feasible(f64::NEG_INFINITY, Some(50.0), &u));
        assert!(!feasible(-3.0, Some(0.0), &u)); // duplicate of a node
        assert!(feasible(-3.0, None, &u)); // empty tree
    }

    #[test]
    fn explore_uniform_toy_spreads_separated_nodes() {
        let opts = ToyOptions { d: 20, n: 20, ..Default::default() };
        let ds = gen_two_truth_toy(&opts, 13).unwrap();
        let eps = crate::nmf::empirical_noise(&ds.x, 3, 10, 99, crate::nmf::SigmaSource::FirstFit)
            .unwrap()
            .eps;
        let spec = ModelSpec::new(20, 20, 3, Likelihood::Uniform { eps }).unwrap();
        let cfg = RrtConfig {
            max_proposals: 250,
            max_failed_attempts: 400,
            ..RrtConfig::uniform_defaults(13)
        };
        let mut sink = CollectSink::new(false);
        let report = explore(&ds.x, &spec, &cfg, &mut sink).unwrap();

        assert!(report.nodes_final >= 2, "tree stayed degenerate: {report:?}");
        assert!(report.nodes_final <= cfg.max_temp_nodes + cfg.n_init_restarts);
        assert_eq!(report.proposals.len(), sink.candidates.len());
        assert!(matches!(
            report.termination,
            Termination::ProposalBudget | Termination::FailedAttempts
        ));
        // Every proposal was feasible, hence finite-quality.
        assert!(report.proposals.iter().all(|p| p.quality > f64::NEG_INFINITY));
        // All surviving proposals clear the angle bar pairwise... the tree
        // itself must: rebuild pairwise distances over proposed candidates
        // that were inserted under the initial bar.
        for (i, a) in sink.candidates.iter().enumerate() {
            for b in sink.candidates.iter().skip(i + 1) {
                let d = wad(a, b, ColumnScale::L1).unwrap();
                assert!(d.is_finite());
            }
        }
    }

    #[test]
    fn explore_uniform_with_huge_angle_bar_fails_out() {
        // With an unreachable novelty bar every extension is trapped and the
        // run ends by the failure cap, keeping only the seed nodes.
        let opts = ToyOptions { d: 12, n: 12, ..Default::default() };
        let ds = gen_two_truth_toy(&opts, 29).unwrap();
        let eps = crate::nmf::empirical_noise(&ds.x, 3, 10, 7, crate::nmf::SigmaSource::FirstFit)
            .unwrap()
            .eps;
        let spec = ModelSpec::new(12, 12, 3, Likelihood::Uniform { eps }).unwrap();
        let cfg = RrtConfig {
            min_angle_deg: 89.0,
            max_failed_attempts: 40,
            max_proposals: 500,
            ..RrtConfig::uniform_defaults(29)
        };
        let mut sink = CollectSink::new(false);
        let report = explore(&ds.x, &spec, &cfg, &mut sink).unwrap();
        assert_eq!(report.termination, Termination::FailedAttempts);
        assert!(report.proposals.is_empty());
        assert_eq!(report.nodes_final, report.base_nodes_final);
        assert!(report.base_nodes_final >= 1);
    }

    #[test]
    fn explore_gaussian_respects_budget_and_thresholds() {
        let (x, spec, _) = small_gaussian_setup(6);
        let cfg = RrtConfig {
            max_temp_nodes: 20,
            n_init_restarts: 8,
            max_proposals: 120,
            max_failed_attempts: 300,
            ..RrtConfig::gaussian_defaults(6)
        };
        let mut sink = CollectSink::new(false);
        let report = explore(&x, &spec, &cfg, &mut sink).unwrap();
        assert!(report.nodes_final <= cfg.max_temp_nodes);
        assert!(report.quality_threshold_final.is_some());
        assert_eq!(report.base_nodes_final, 0); // no persistent nodes in this mode
        assert_eq!(report.proposals.len(), sink.offers());
    }

    #[test]
    fn explore_report_is_deterministic_per_seed() {
        let opts = ToyOptions { d: 14, n: 14, ..Default::default() };
        let ds = gen_two_truth_toy(&opts, 41).unwrap();
        let spec = ModelSpec::new(14, 14, 3, Likelihood::Uniform { eps: 0.02 }).unwrap();
        let cfg = RrtConfig {
            max_proposals: 120,
            max_failed_attempts: 200,
            ..RrtConfig::uniform_defaults(17)
        };
        let run = || {
            let mut sink = CollectSink::new(false);
            let report = explore(&ds.x, &spec, &cfg, &mut sink).unwrap();
            (report, sink.candidates)
        };
        let (r1, c1) = run();
        let (r2, c2) = run();
        assert_eq!(r1.extends, r2.extends);
        assert_eq!(r1.nodes_final, r2.nodes_final);
        assert_eq!(r1.proposals.len(), r2.proposals.len());
        assert_eq!(c1.len(), c2.len());
        for (a, b) in c1.iter().zip(c2.iter()) {
            assert!(a.a.iter().zip(b.a.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(a.w.iter().zip(b.w.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        for (p, q) in r1.proposals.iter().zip(r2.proposals.iter()) {
            assert_eq!(p.quality.to_bits(), q.quality.to_bits());
            assert_eq!(p.accepted, q.accepted);
        }
    }

    #[test]
    fn node_quality_is_recomputable() {
        let opts = ToyOptions { d: 14, n: 14, ..Default::default() };
        let ds = gen_two_truth_toy(&opts, 55).unwrap();
        // Calibrate the noise band off the seed fit itself so it is strictly
        // feasible.
        let fit = crate::nmf::lin_pg_nmf(&ds.x, 3, Init::Random { seed: 3 }, &LinOptions::default())
            .unwrap();
        let worst = (&ds.x - fit.factorization.product())
            .iter()
            .fold(0.0f64, |m, &v| m.max(v.abs()));
        let spec = ModelSpec::new(14, 14, 3, Likelihood::Uniform { eps: 1.5 * worst }).unwrap();
        let svd = truncated_svd(&ds.x, 3).unwrap();
        let cfg = RrtConfig {
            max_proposals: 60,
            max_failed_attempts: 100,
            ..RrtConfig::uniform_defaults(3)
        };
        // Drive extend directly so the tree stays accessible.
        let mut tree = Tree::new();
        let q = manifold::factorization_to_q(&fit.factorization, &svd).unwrap();
        let quality = log_joint(&ds.x, &fit.factorization, &spec).unwrap();
        assert!(quality > f64::NEG_INFINITY, "seed fit infeasible for this band");
        tree.push(RrtNode {
            q,
            factorization: fit.factorization.clone(),
            quality,
            kind: NodeKind::Base,
        });
        let ctx = ExtendContext { x: &ds.x, spec: &spec, svd: &svd, config: &cfg };
        let mut state = ModeState::Uniform { min_angle_deg: cfg.min_angle_deg };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..40 {
            let target = manifold::sample_uniform(3, &mut rng).unwrap();
            let _ = extend(&mut tree, &target, &ctx, &mut state).unwrap();
        }
        for node in tree.nodes() {
            let recomputed = log_joint(&ds.x, &node.factorization, &spec).unwrap();
            assert!(
                (node.quality - recomputed).abs() <= 1e-9,
                "stored {} vs recomputed {recomputed}",
                node.quality
            );
        }
    }
}
