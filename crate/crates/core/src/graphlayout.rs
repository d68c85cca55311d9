//! Seeded force-directed layout in which every entity's text label is itself a
//! simulation node: a label is pulled towards its own entity and repelled by
//! every other node, so text settles next to its node without overlapping
//! others.
//!
//! Simulation node `i < n` is entity `i`; node `n + i` is the label of entity `i`.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: String,
    pub label: String,
    #[serde(default)]
    pub kind: String,
    /// Code snippet or description shown when the node is opened.
    #[serde(default)]
    pub payload: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

impl GraphSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let g: GraphSpec =
            serde_json::from_str(text).map_err(|e| Error::Graph(format!("bad graph JSON: {e}")))?;
        g.validate()?;
        Ok(g)
    }

    /// Entities with `id`s and no edges.
    pub fn isolated(ids: &[&str]) -> Self {
        Self {
            nodes: ids
                .iter()
                .map(|&id| GraphNode {
                    id: id.into(),
                    label: id.into(),
                    kind: String::new(),
                    payload: String::new(),
                })
                .collect(),
            edges: Vec::new(),
        }
    }

    pub fn with_edge(mut self, source: &str, target: &str) -> Self {
        self.edges.push(GraphEdge {
            source: source.into(),
            target: target.into(),
        });
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.edge_indices().map(|_| ())
    }

    /// Edges as entity index pairs.
    pub fn edge_indices(&self) -> Result<Vec<(usize, usize)>> {
        let mut index = HashMap::with_capacity(self.nodes.len());
        for (i, n) in self.nodes.iter().enumerate() {
            if index.insert(n.id.as_str(), i).is_some() {
                return Err(Error::Graph(format!("duplicate node id `{}`", n.id)));
            }
        }
        let lookup = |id: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| Error::Graph(format!("edge endpoint `{id}` is not a node")))
        };
        self.edges
            .iter()
            .map(|e| {
                let (s, t) = (lookup(&e.source)?, lookup(&e.target)?);
                if s == t {
                    return Err(Error::Graph(format!("self-loop on `{}`", e.source)));
                }
                Ok((s, t))
            })
            .collect()
    }
}

/// The shipped graph of ViT implementation classes and their call relationships.
pub fn knowledge_graph() -> GraphSpec {
    GraphSpec::from_json(include_str!("../assets/knowledge_graph.json"))
        .expect("shipped knowledge graph is valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayoutParams {
    /// Many-body repulsion constant `k` in `k / d²`.
    pub repulsion: f64,
    /// Distances below this are clamped when computing repulsion.
    pub min_distance: f64,
    pub link_distance: f64,
    pub link_stiffness: f64,
    /// Spring constant pulling each label onto its entity.
    pub label_strength: f64,
    /// Fraction of the entity centroid's offset from `center` removed per step.
    pub center_strength: f64,
    pub center: Vec2,
    /// Velocity retained per step is `1 - velocity_decay`.
    pub velocity_decay: f64,
    pub alpha_start: f64,
    pub alpha_decay: f64,
    pub alpha_floor: f64,
    /// Initial displacement of each label from its entity.
    pub label_offset: Vec2,
}

impl Default for LayoutParams {
    fn default() -> Self {
        Self {
            repulsion: 0.02,
            min_distance: 0.05,
            link_distance: 0.5,
            link_stiffness: 0.3,
            label_strength: 0.8,
            center_strength: 0.1,
            center: [0.0, 0.0],
            velocity_decay: 0.4,
            alpha_start: 1.0,
            alpha_decay: 0.0228,
            alpha_floor: 0.001,
            label_offset: [0.02, 0.02],
        }
    }
}

pub const DEFAULT_ITERATIONS: usize = 300;

impl LayoutParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("repulsion", self.repulsion),
            ("min_distance", self.min_distance),
            ("link_distance", self.link_distance),
            ("link_stiffness", self.link_stiffness),
            ("label_strength", self.label_strength),
            ("center_strength", self.center_strength),
            ("alpha_start", self.alpha_start),
        ];
        for (name, v) in positive {
            // Repulsion may be switched off entirely.
            let ok = v.is_finite() && (v > 0.0 || (name == "repulsion" && v == 0.0));
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "layout parameter {name} must be positive, got {v}"
                )));
            }
        }
        let unit = [
            ("velocity_decay", self.velocity_decay),
            ("alpha_decay", self.alpha_decay),
            ("alpha_floor", self.alpha_floor),
        ];
        for (name, v) in unit {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!(
                    "layout parameter {name} must lie in [0, 1), got {v}"
                )));
            }
        }
        if self.alpha_start > 1.0 || self.center_strength > 1.0 {
            return Err(Error::InvalidArgument(
                "alpha_start and center_strength must not exceed 1".into(),
            ));
        }
        if !self.center.iter().chain(&self.label_offset).all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite layout vector".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutState {
    /// Entities first, then one label per entity.
    pub positions: Vec<Vec2>,
    pub velocities: Vec<Vec2>,
    pub alpha: f64,
    pub iteration: usize,
}

impl LayoutState {
    /// State at rest from explicit entity and label positions.
    pub fn new(entities: &[Vec2], labels: &[Vec2], alpha: f64) -> Result<Self> {
        if entities.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} entities but {} labels",
                entities.len(),
                labels.len()
            )));
        }
        let positions: Vec<Vec2> = entities.iter().chain(labels).copied().collect();
        Ok(Self {
            velocities: vec![[0.0; 2]; positions.len()],
            positions,
            alpha,
            iteration: 0,
        })
    }

    pub fn n_entities(&self) -> usize {
        self.positions.len() / 2
    }

    pub fn entities(&self) -> &[Vec2] {
        &self.positions[..self.n_entities()]
    }

    pub fn labels(&self) -> &[Vec2] {
        &self.positions[self.n_entities()..]
    }

    pub fn max_speed(&self) -> f64 {
        self.velocities
            .iter()
            .map(|v| v[0].hypot(v[1]))
            .fold(0.0, f64::max)
    }

    /// Entities whose label is strictly closer to them than any other label.
    pub fn label_proximity(&self) -> f64 {
        let n = self.n_entities();
        if n == 0 {
            return 1.0;
        }
        let (ents, labels) = (self.entities(), self.labels());
        let hits = (0..n)
            .filter(|&i| {
                let own = dist(ents[i], labels[i]);
                (0..n).all(|j| j == i || own < dist(ents[i], labels[j]))
            })
            .count();
        hits as f64 / n as f64
    }
}

fn dist(a: Vec2, b: Vec2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Entities uniformly in the unit disk; each label at its entity plus
/// `params.label_offset`.
pub fn seed_positions(graph: &GraphSpec, seed: u64, params: &LayoutParams) -> LayoutState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entities: Vec<Vec2> = (0..graph.len())
        .map(|_| {
            let r = rng.random::<f64>().sqrt();
            let theta = rng.random::<f64>() * std::f64::consts::TAU;
            [r * theta.cos(), r * theta.sin()]
        })
        .collect();
    let labels: Vec<Vec2> = entities
        .iter()
        .map(|p| [p[0] + params.label_offset[0], p[1] + params.label_offset[1]])
        .collect();
    LayoutState::new(&entities, &labels, params.alpha_start).expect("equal lengths")
}

pub fn layout(
    graph: &GraphSpec,
    seed: u64,
    iterations: usize,
    params: &LayoutParams,
) -> Result<LayoutState> {
    layout_from(graph, seed_positions(graph, seed, params), iterations, params)
}

/// Runs `iterations` further steps from an explicit state.
pub fn layout_from(
    graph: &GraphSpec,
    mut state: LayoutState,
    iterations: usize,
    params: &LayoutParams,
) -> Result<LayoutState> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be at least 1".into()));
    }
    params.validate()?;
    let edges = graph.edge_indices()?;
    if state.positions.len() != 2 * graph.len() || state.velocities.len() != state.positions.len()
    {
        return Err(Error::InvalidArgument(format!(
            "state holds {} nodes, graph needs {}",
            state.positions.len(),
            2 * graph.len()
        )));
    }
    let mut forces = vec![[0.0; 2]; state.positions.len()];
    for _ in 0..iterations {
        step(&mut state, &edges, params, &mut forces)?;
    }
    Ok(state)
}

fn step(
    state: &mut LayoutState,
    edges: &[(usize, usize)],
    params: &LayoutParams,
    forces: &mut [Vec2],
) -> Result<()> {
    let n = state.n_entities();
    let pos = &state.positions;
    forces.iter_mut().for_each(|f| *f = [0.0; 2]);

    if params.repulsion > 0.0 {
        for i in 0..pos.len() {
            for j in i + 1..pos.len() {
                // An entity and its own label only attract.
                if j == i + n {
                    continue;
                }
                let (dx, dy) = (pos[i][0] - pos[j][0], pos[i][1] - pos[j][1]);
                let d = dx.hypot(dy);
                // Coincident nodes have no defined direction.
                if d == 0.0 {
                    continue;
                }
                let m = params.repulsion / d.max(params.min_distance).powi(2) / d;
                forces[i][0] += m * dx;
                forces[i][1] += m * dy;
                forces[j][0] -= m * dx;
                forces[j][1] -= m * dy;
            }
        }
    }

    let mut spring = |a: usize, b: usize, rest: f64, k: f64| {
        let (dx, dy) = (pos[b][0] - pos[a][0], pos[b][1] - pos[a][1]);
        let d = dx.hypot(dy);
        if d == 0.0 {
            return;
        }
        let m = k * (d - rest) / d;
        forces[a][0] += m * dx;
        forces[a][1] += m * dy;
        forces[b][0] -= m * dx;
        forces[b][1] -= m * dy;
    };
    for &(a, b) in edges {
        spring(a, b, params.link_distance, params.link_stiffness);
    }
    for i in 0..n {
        spring(i, n + i, 0.0, params.label_strength);
    }

    let alpha = state.alpha;
    let keep = 1.0 - params.velocity_decay;
    for ((p, v), f) in state.positions.iter_mut().zip(&mut state.velocities).zip(forces.iter()) {
        for k in 0..2 {
            v[k] = (v[k] + alpha * f[k]) * keep;
            p[k] += v[k];
        }
    }

    if n > 0 {
        let mut centroid = [0.0; 2];
        for p in &state.positions[..n] {
            centroid[0] += p[0];
            centroid[1] += p[1];
        }
        let shift = [
            params.center_strength * (params.center[0] - centroid[0] / n as f64),
            params.center_strength * (params.center[1] - centroid[1] / n as f64),
        ];
        for p in &mut state.positions {
            p[0] += shift[0];
            p[1] += shift[1];
        }
    }

    if !state.positions.iter().flatten().all(|v| v.is_finite()) {
        return Err(Error::LayoutDiverged {
            step: state.iteration,
        });
    }
    state.iteration += 1;
    state.alpha = params.alpha_floor + (state.alpha - params.alpha_floor) * (1.0 - params.alpha_decay);
    Ok(())
}

/// Final positions keyed by node id, rounded to 9 significant digits.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayoutReport {
    pub seed: u64,
    pub iterations: usize,
    pub alpha: f64,
    pub max_speed: f64,
    pub nodes: Vec<PositionedNode>,
    pub edges: Vec<GraphEdge>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositionedNode {
    pub id: String,
    pub label: String,
    pub x: f64,
    pub y: f64,
    pub label_x: f64,
    pub label_y: f64,
}

impl LayoutReport {
    pub fn new(graph: &GraphSpec, seed: u64, state: &LayoutState) -> Self {
        let r = crate::interpret::round_sig9;
        let nodes = graph
            .nodes
            .iter()
            .zip(state.entities().iter().zip(state.labels()))
            .map(|(n, (e, l))| PositionedNode {
                id: n.id.clone(),
                label: n.label.clone(),
                x: r(e[0]),
                y: r(e[1]),
                label_x: r(l[0]),
                label_y: r(l[1]),
            })
            .collect();
        Self {
            seed,
            iterations: state.iteration,
            alpha: r(state.alpha),
            max_speed: r(state.max_speed()),
            nodes,
            edges: graph.edges.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn star() -> GraphSpec {
        GraphSpec::isolated(&["hub", "a", "b", "c"])
            .with_edge("hub", "a")
            .with_edge("hub", "b")
            .with_edge("hub", "c")
    }

    #[test]
    fn graph_validation() {
        assert!(GraphSpec::isolated(&["a", "a"]).validate().is_err());
        assert!(GraphSpec::isolated(&["a"]).with_edge("a", "b").validate().is_err());
        assert!(GraphSpec::isolated(&["a"]).with_edge("a", "a").validate().is_err());
        assert_eq!(star().edge_indices().unwrap(), vec![(0, 1), (0, 2), (0, 3)]);
        assert!(GraphSpec::from_json("{\"nodes\": [").is_err());
    }

    #[test]
    fn shipped_graph_loads() {
        let g = knowledge_graph();
        assert!(g.len() >= 10);
        assert!(g.nodes.iter().all(|n| !n.payload.is_empty()));
        assert!(g.nodes.iter().any(|n| n.id == "ViTLayer"));
    }

    #[test]
    fn seeding() {
        let g = star();
        let p = LayoutParams::default();
        let a = seed_positions(&g, 7, &p);
        assert_eq!(a, seed_positions(&g, 7, &p));
        assert_ne!(a.positions, seed_positions(&g, 8, &p).positions);
        assert!(a.entities().iter().all(|e| e[0].hypot(e[1]) <= 1.0));
        for (e, l) in a.entities().iter().zip(a.labels()) {
            assert!((l[0] - e[0] - p.label_offset[0]).abs() < 1e-12);
            assert!((l[1] - e[1] - p.label_offset[1]).abs() < 1e-12);
        }
        let empty = seed_positions(&GraphSpec::isolated(&[]), 7, &p);
        assert!(empty.positions.is_empty());
    }

    #[test]
    fn single_node_goes_to_center() {
        let p = LayoutParams {
            center: [3.0, -2.0],
            ..LayoutParams::default()
        };
        let s = layout(&GraphSpec::isolated(&["x"]), 1, DEFAULT_ITERATIONS, &p).unwrap();
        assert!(dist(s.entities()[0], p.center) < 1e-3);
    }

    #[test]
    fn two_nodes_settle_at_rest_length() {
        let p = LayoutParams {
            repulsion: 0.0,
            ..LayoutParams::default()
        };
        let g = GraphSpec::isolated(&["a", "b"]).with_edge("a", "b");
        for seed in 0..20 {
            let s = layout(&g, seed, DEFAULT_ITERATIONS, &p).unwrap();
            let d = dist(s.entities()[0], s.entities()[1]);
            assert!((d - p.link_distance).abs() <= 0.05 * p.link_distance, "seed {seed}: {d}");
        }
    }

    #[test]
    fn symmetric_star_stays_symmetric() {
        let p = LayoutParams::default();
        let mut ents = vec![[0.0, 0.0]];
        let mut labels = vec![[0.0, 0.0]];
        for k in 0..3 {
            let t = k as f64 * std::f64::consts::TAU / 3.0;
            ents.push([0.3 * t.cos(), 0.3 * t.sin()]);
            labels.push([0.35 * t.cos(), 0.35 * t.sin()]);
        }
        let s = LayoutState::new(&ents, &labels, 1.0).unwrap();
        let s = layout_from(&star(), s, DEFAULT_ITERATIONS, &p).unwrap();
        let e = s.entities();
        let d: Vec<f64> = (1..4).map(|i| dist(e[0], e[i])).collect();
        assert!((d[0] - d[1]).abs() < 1e-6 && (d[1] - d[2]).abs() < 1e-6, "{d:?}");
    }

    #[test]
    fn deterministic_and_converged_on_shipped_graph() {
        let g = knowledge_graph();
        let p = LayoutParams::default();
        let a = layout(&g, 42, DEFAULT_ITERATIONS, &p).unwrap();
        let b = layout(&g, 42, DEFAULT_ITERATIONS, &p).unwrap();
        assert_eq!(a, b);
        assert!(a.max_speed() < 1e-2);
        assert_eq!(a.label_proximity(), 1.0);
        assert_eq!(a.iteration, DEFAULT_ITERATIONS);
    }

    #[test]
    fn report_pairs_ids_with_positions() {
        let g = star();
        let s = layout(&g, 4, 20, &LayoutParams::default()).unwrap();
        let r = LayoutReport::new(&g, 4, &s);
        assert_eq!(r.nodes.len(), 4);
        assert_eq!(r.nodes[2].id, "b");
        assert_eq!(r.nodes[2].x, crate::interpret::round_sig9(s.entities()[2][0]));
        assert_eq!(r.nodes[2].label_y, crate::interpret::round_sig9(s.labels()[2][1]));
        assert_eq!(r.iterations, 20);
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["edges"][0]["source"], "hub");
    }

    #[test]
    fn rejects_bad_input() {
        let g = star();
        let p = LayoutParams::default();
        assert!(layout(&g, 0, 0, &p).is_err());
        let bad = LayoutParams {
            link_stiffness: -1.0,
            ..LayoutParams::default()
        };
        assert!(layout(&g, 0, 10, &bad).is_err());
        let s = seed_positions(&GraphSpec::isolated(&["a"]), 0, &p);
        assert!(layout_from(&g, s, 10, &p).is_err());
    }

    #[test]
    fn blowup_is_reported_with_step() {
        let p = LayoutParams {
            repulsion: 1e308,
            min_distance: 1e-300,
            ..LayoutParams::default()
        };
        let g = GraphSpec::isolated(&["a", "b"]);
        let s = LayoutState::new(&[[0.0, 0.0], [1e-200, 0.0]], &[[5.0, 5.0], [-5.0, 5.0]], 1.0).unwrap();
        assert!(matches!(
            layout_from(&g, s, 10, &p),
            Err(Error::LayoutDiverged { step: 0 })
        ));
    }
}
