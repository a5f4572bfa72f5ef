//! Weighted acyclic finite-state acceptors produced by the decoder.
//!
//! Nodes mark label emissions; blank steps never appear as arcs — their
//! log-probabilities are folded into the weight of the next label arc (or
//! into the final arc for trailing blanks), so every complete
//! start-to-end path sums to the log-probability of one specific alignment.
//! Merged hypotheses contribute parallel in-arcs to a shared target node,
//! each retaining its own accumulated weight.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::model::{LabelId, Vocabulary, BLANK};
use crate::numerics::{log_add, log_sum_exp};

pub type NodeId = u32;

/// One lattice arc. `label == None` marks a final arc into the end node,
/// carrying the trailing blank mass of a finished hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeArc {
    pub src: NodeId,
    pub dst: NodeId,
    pub label: Option<LabelId>,
    /// Log-probability increment along this arc (label log-prob plus the
    /// blank log-probs accumulated since the previous emission).
    pub weight: f64,
    /// Frame index at which the label was emitted; bookkeeping only, not
    /// serialized.
    pub emit_time: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    num_nodes: u32,
    start: NodeId,
    end: NodeId,
    frames: usize,
    arcs: Vec<LatticeArc>,
}

/// Arc awaiting materialization: recorded while a hypothesis survives the
/// beam, applied by `update_lattice` after pruning.
#[derive(Debug, Clone, PartialEq)]
pub struct ArcRecord {
    pub src: NodeId,
    pub label: LabelId,
    pub weight: f64,
    pub emit_time: u32,
}

/// Per-survivor lattice update for one decoding step.
#[derive(Debug, Clone, PartialEq)]
pub enum HypUpdate {
    /// The hypothesis only absorbed blanks; its node is unchanged.
    BlankOnly,
    /// The hypothesis emitted (possibly merged with others). All member arcs
    /// share one target node: the adopted node when a merge member already
    /// owned a node at this position, a fresh node otherwise.
    Emission {
        adopted: Option<NodeId>,
        arcs: Vec<ArcRecord>,
    },
}

/// A hypothesis that consumed the last frame; connects its node to the end.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalRecord {
    pub node: NodeId,
    pub weight: f64,
}

/// Everything the decoder hands over after pruning one alignment step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepResults {
    pub updates: Vec<HypUpdate>,
    pub finals: Vec<FinalRecord>,
}

/// A complete start-to-end path.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticePath {
    pub labels: Vec<LabelId>,
    pub weight: f64,
    pub arc_indices: Vec<usize>,
}

/// Ranked n-best entry with optional language-model scores filled in by
/// rescoring. The acoustic score of a sequence is the log-sum of all its
/// path weights.
#[derive(Debug, Clone, PartialEq)]
pub struct NBestEntry {
    pub labels: Vec<LabelId>,
    pub acoustic: f64,
    pub lm: Option<f64>,
    pub combined: f64,
}

impl Lattice {
    /// Fresh acceptor with designated start and end nodes.
    pub fn new(frames: usize) -> Self {
        Lattice { num_nodes: 2, start: 0, end: 1, frames, arcs: Vec::new() }
    }

    pub fn start(&self) -> NodeId {
        self.start
    }

    pub fn end(&self) -> NodeId {
        self.end
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes as usize
    }

    pub fn arcs(&self) -> &[LatticeArc] {
        &self.arcs
    }

    pub fn add_node(&mut self) -> NodeId {
        let id = self.num_nodes;
        self.num_nodes += 1;
        id
    }

    fn check_node(&self, node: NodeId) -> Result<()> {
        if node >= self.num_nodes {
            return Err(Error::InvalidLattice(format!(
                "arc references unknown node {node} (have {})",
                self.num_nodes
            )));
        }
        Ok(())
    }

    pub fn add_arc(
        &mut self,
        src: NodeId,
        dst: NodeId,
        label: Option<LabelId>,
        weight: f64,
        emit_time: Option<u32>,
    ) -> Result<()> {
        self.check_node(src)?;
        self.check_node(dst)?;
        if label == Some(BLANK) {
            return Err(Error::InvalidLattice("blank must not appear as an arc label".into()));
        }
        if label.is_none() && dst != self.end {
            return Err(Error::InvalidLattice("unlabeled arcs may only enter the end node".into()));
        }
        self.arcs.push(LatticeArc { src, dst, label, weight, emit_time });
        Ok(())
    }

    pub fn out_degree(&self, node: NodeId) -> usize {
        self.arcs.iter().filter(|a| a.src == node).count()
    }

    /// Duplicate every in-arc of `from` onto `to` (weights and emit times
    /// preserved); used when splitting a merge target off a node that
    /// already has expansions.
    pub fn copy_in_arcs(&mut self, from: NodeId, to: NodeId) -> Result<()> {
        self.check_node(from)?;
        self.check_node(to)?;
        let copies: Vec<LatticeArc> = self
            .arcs
            .iter()
            .filter(|a| a.dst == from)
            .map(|a| LatticeArc { dst: to, ..a.clone() })
            .collect();
        self.arcs.extend(copies);
        Ok(())
    }

    /// Arcs per frame, counting label arcs only.
    pub fn density(&self) -> f64 {
        debug_assert!(self.frames >= 1);
        self.arcs.iter().filter(|a| a.label.is_some()).count() as f64 / self.frames as f64
    }

    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes as usize];
        for (i, arc) in self.arcs.iter().enumerate() {
            adj[arc.src as usize].push(i);
        }
        adj
    }

    /// Topological order over all nodes (ties by node id). Errors on cycles.
    pub fn topological_order(&self) -> Result<Vec<NodeId>> {
        let n = self.num_nodes as usize;
        let mut indegree = vec![0usize; n];
        for arc in &self.arcs {
            indegree[arc.dst as usize] += 1;
        }
        let adj = self.adjacency();
        let mut ready: std::collections::BTreeSet<NodeId> = (0..self.num_nodes)
            .filter(|&v| indegree[v as usize] == 0)
            .collect();
        let mut order = Vec::with_capacity(n);
        while let Some(&node) = ready.iter().next() {
            ready.remove(&node);
            order.push(node);
            for &ai in &adj[node as usize] {
                let dst = self.arcs[ai].dst as usize;
                indegree[dst] -= 1;
                if indegree[dst] == 0 {
                    ready.insert(dst as NodeId);
                }
            }
        }
        if order.len() != n {
            return Err(Error::InvalidLattice("cycle detected".into()));
        }
        Ok(order)
    }

    fn reachable_from_start(&self) -> Vec<bool> {
        let adj = self.adjacency();
        let mut seen = vec![false; self.num_nodes as usize];
        let mut stack = vec![self.start];
        seen[self.start as usize] = true;
        while let Some(node) = stack.pop() {
            for &ai in &adj[node as usize] {
                let dst = self.arcs[ai].dst as usize;
                if !seen[dst] {
                    seen[dst] = true;
                    stack.push(dst as NodeId);
                }
            }
        }
        seen
    }

    fn coreachable_to_end(&self) -> Vec<bool> {
        let mut radj = vec![Vec::new(); self.num_nodes as usize];
        for arc in &self.arcs {
            radj[arc.dst as usize].push(arc.src);
        }
        let mut seen = vec![false; self.num_nodes as usize];
        let mut stack = vec![self.end];
        seen[self.end as usize] = true;
        while let Some(node) = stack.pop() {
            for &src in &radj[node as usize] {
                if !seen[src as usize] {
                    seen[src as usize] = true;
                    stack.push(src);
                }
            }
        }
        seen
    }

    /// Drop nodes that are unreachable or cannot reach the end, then
    /// renumber nodes in topological order (start first, end last) and sort
    /// arcs canonically. Decoding calls this once after the main loop.
    pub fn trim(&mut self) -> Result<()> {
        let reach = self.reachable_from_start();
        let coreach = self.coreachable_to_end();
        let keep: Vec<bool> = reach
            .iter()
            .zip(&coreach)
            .map(|(&a, &b)| a && b)
            .collect();
        if !keep[self.start as usize] || !keep[self.end as usize] {
            return Err(Error::InvalidLattice("no complete path between start and end".into()));
        }
        self.arcs.retain(|a| keep[a.src as usize] && keep[a.dst as usize]);
        // Renumber along a topological order of the kept subgraph.
        let order = self.topological_order()?;
        let mut mapping = vec![u32::MAX; self.num_nodes as usize];
        let mut next = 0u32;
        for node in order {
            if keep[node as usize] && node != self.end {
                mapping[node as usize] = next;
                next += 1;
            }
        }
        mapping[self.end as usize] = next;
        next += 1;
        for arc in &mut self.arcs {
            arc.src = mapping[arc.src as usize];
            arc.dst = mapping[arc.dst as usize];
        }
        self.start = mapping[self.start as usize];
        self.end = mapping[self.end as usize];
        self.num_nodes = next;
        self.sort_arcs();
        Ok(())
    }

    fn sort_arcs(&mut self) {
        self.arcs.sort_by(|a, b| {
            (a.src, a.dst, a.label)
                .cmp(&(b.src, b.dst, b.label))
                .then(b.weight.total_cmp(&a.weight))
        });
    }

    /// Structured consistency report.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        match self.topological_order() {
            Ok(_) => report.acyclic = true,
            Err(_) => report.messages.push("cycle detected".into()),
        }
        let reach = self.reachable_from_start();
        report.reachable = reach.iter().all(|&r| r);
        if !report.reachable {
            report
                .messages
                .push(format!("{} nodes unreachable from start", reach.iter().filter(|&&r| !r).count()));
        }
        let coreach = self.coreachable_to_end();
        report.coreachable = coreach.iter().all(|&r| r);
        if !report.coreachable {
            report
                .messages
                .push(format!("{} nodes cannot reach end", coreach.iter().filter(|&&r| !r).count()));
        }
        report.finite_weights = self.arcs.iter().all(|a| a.weight.is_finite());
        if !report.finite_weights {
            report.messages.push("non-finite arc weight".into());
        }
        report.structure = self.arcs.iter().all(|a| {
            a.label != Some(BLANK)
                && (a.label.is_some() || a.dst == self.end)
                && (a.label.is_none() || a.dst != self.end)
        });
        if !report.structure {
            report.messages.push("mislabeled arc (blank label or misplaced final arc)".into());
        }
        report
    }

    /// Number of complete paths, saturating at `u64::MAX`.
    pub fn count_paths(&self) -> Result<u64> {
        let order = self.topological_order()?;
        let adj = self.adjacency();
        let mut counts = vec![0u64; self.num_nodes as usize];
        counts[self.start as usize] = 1;
        for node in order {
            let c = counts[node as usize];
            if c == 0 {
                continue;
            }
            for &ai in &adj[node as usize] {
                let dst = self.arcs[ai].dst as usize;
                counts[dst] = counts[dst].saturating_add(c);
            }
        }
        Ok(counts[self.end as usize])
    }

    /// Enumerate every complete path (guarded by `max_paths`).
    pub fn enumerate_paths(&self, max_paths: usize) -> Result<Vec<LatticePath>> {
        let total = self.count_paths()?;
        if total > max_paths as u64 {
            return Err(Error::SizeGuard(format!(
                "lattice has {total} paths, enumeration capped at {max_paths}"
            )));
        }
        let adj = self.adjacency();
        let mut out = Vec::with_capacity(total as usize);
        let mut labels = Vec::new();
        let mut arcs = Vec::new();
        self.dfs_paths(self.start, 0.0, &adj, &mut labels, &mut arcs, &mut out);
        Ok(out)
    }

    fn dfs_paths(
        &self,
        node: NodeId,
        weight: f64,
        adj: &[Vec<usize>],
        labels: &mut Vec<LabelId>,
        arc_indices: &mut Vec<usize>,
        out: &mut Vec<LatticePath>,
    ) {
        if node == self.end {
            out.push(LatticePath { labels: labels.clone(), weight, arc_indices: arc_indices.clone() });
            return;
        }
        for &ai in &adj[node as usize] {
            let arc = &self.arcs[ai];
            if let Some(l) = arc.label {
                labels.push(l);
            }
            arc_indices.push(ai);
            self.dfs_paths(arc.dst, weight + arc.weight, adj, labels, arc_indices, out);
            arc_indices.pop();
            if arc.label.is_some() {
                labels.pop();
            }
        }
    }

    /// Highest-weight complete path by dynamic programming in topological order.
    pub fn best_path(&self) -> Result<LatticePath> {
        let order = self.topological_order()?;
        let n = self.num_nodes as usize;
        let adj = self.adjacency();
        let mut score = vec![f64::NEG_INFINITY; n];
        let mut back: Vec<Option<usize>> = vec![None; n];
        score[self.start as usize] = 0.0;
        for node in order {
            let s = score[node as usize];
            if s == f64::NEG_INFINITY {
                continue;
            }
            for &ai in &adj[node as usize] {
                let arc = &self.arcs[ai];
                let cand = s + arc.weight;
                let dst = arc.dst as usize;
                if cand > score[dst] {
                    score[dst] = cand;
                    back[dst] = Some(ai);
                }
            }
        }
        if score[self.end as usize] == f64::NEG_INFINITY {
            return Err(Error::InvalidLattice("no complete path".into()));
        }
        let mut arc_indices = Vec::new();
        let mut node = self.end;
        while node != self.start {
            let ai = back[node as usize].expect("backpointer chain reaches start");
            arc_indices.push(ai);
            node = self.arcs[ai].src;
        }
        arc_indices.reverse();
        let labels = arc_indices
            .iter()
            .filter_map(|&ai| self.arcs[ai].label)
            .collect();
        Ok(LatticePath { labels, weight: score[self.end as usize], arc_indices })
    }

    /// Minimum error rate over all complete paths against `reference`, with
    /// the achieving path. DP over (node in topological order × reference
    /// position) with unit substitution/insertion/deletion costs.
    pub fn oracle_wer(&self, reference: &[LabelId]) -> Result<(f64, LatticePath)> {
        if reference.is_empty() {
            return Err(Error::EmptyInput("oracle error rate needs a nonempty reference".into()));
        }
        let order = self.topological_order()?;
        let n = self.num_nodes as usize;
        let r = reference.len();
        let adj = self.adjacency();
        const INF: usize = usize::MAX / 2;
        // cost[node][j]: cheapest way to reach `node` having consumed j
        // reference tokens. Backpointers record (prev node, prev j, arc).
        let mut cost = vec![vec![INF; r + 1]; n];
        let mut back: Vec<Vec<Option<(NodeId, usize, Option<usize>)>>> = vec![vec![None; r + 1]; n];
        cost[self.start as usize][0] = 0;
        for node in order {
            let ni = node as usize;
            // Deletions consume reference tokens without moving in the lattice.
            for j in 0..r {
                if cost[ni][j] < INF && cost[ni][j] + 1 < cost[ni][j + 1] {
                    cost[ni][j + 1] = cost[ni][j] + 1;
                    back[ni][j + 1] = Some((node, j, None));
                }
            }
            for &ai in &adj[ni] {
                let arc = &self.arcs[ai];
                let di = arc.dst as usize;
                match arc.label {
                    Some(l) => {
                        for j in 0..=r {
                            let base = cost[ni][j];
                            if base >= INF {
                                continue;
                            }
                            // Substitution / match.
                            if j < r {
                                let step = base + usize::from(l != reference[j]);
                                if step < cost[di][j + 1] {
                                    cost[di][j + 1] = step;
                                    back[di][j + 1] = Some((node, j, Some(ai)));
                                }
                            }
                            // Insertion: hypothesis label with no reference token.
                            let step = base + 1;
                            if step < cost[di][j] {
                                cost[di][j] = step;
                                back[di][j] = Some((node, j, Some(ai)));
                            }
                        }
                    }
                    None => {
                        for j in 0..=r {
                            if cost[ni][j] < cost[di][j] {
                                cost[di][j] = cost[ni][j];
                                back[di][j] = Some((node, j, Some(ai)));
                            }
                        }
                    }
                }
            }
        }
        let ei = self.end as usize;
        let best = cost[ei][r];
        if best >= INF {
            return Err(Error::InvalidLattice("no complete path".into()));
        }
        // Recover the achieving path.
        let mut arc_indices = Vec::new();
        let (mut node, mut j) = (self.end, r);
        while !(node == self.start && j == 0) {
            let (pn, pj, arc) = back[node as usize][j].expect("backpointer chain reaches origin");
            if let Some(ai) = arc {
                arc_indices.push(ai);
            }
            node = pn;
            j = pj;
        }
        arc_indices.reverse();
        let labels: Vec<LabelId> = arc_indices
            .iter()
            .filter_map(|&ai| self.arcs[ai].label)
            .collect();
        let weight = arc_indices.iter().map(|&ai| self.arcs[ai].weight).sum();
        Ok((
            best as f64 / r as f64,
            LatticePath { labels, weight, arc_indices },
        ))
    }

    /// Margin pruning over parallel-arc groups (same source and target):
    /// keep arcs within `margin * |weakest log-prob in group|` of the group
    /// maximum. The heaviest arc always survives; dead nodes are trimmed.
    pub fn prune(&mut self, relative_margin: f64) -> Result<()> {
        if relative_margin < 0.0 {
            return Err(Error::Contract("pruning margin must be nonnegative".into()));
        }
        let mut groups: BTreeMap<(NodeId, NodeId), Vec<usize>> = BTreeMap::new();
        for (i, arc) in self.arcs.iter().enumerate() {
            groups.entry((arc.src, arc.dst)).or_default().push(i);
        }
        let mut keep = vec![true; self.arcs.len()];
        for indices in groups.values() {
            let w_max = indices.iter().map(|&i| self.arcs[i].weight).fold(f64::NEG_INFINITY, f64::max);
            let w_min = indices.iter().map(|&i| self.arcs[i].weight).fold(f64::INFINITY, f64::min);
            let threshold = w_max - relative_margin * w_min.abs();
            for &i in indices {
                keep[i] = self.arcs[i].weight >= threshold;
            }
        }
        let mut idx = 0;
        self.arcs.retain(|_| {
            let k = keep[idx];
            idx += 1;
            k
        });
        self.trim()
    }

    /// Log-probability mass flowing from each node to the end node.
    fn backward_mass(&self) -> Result<Vec<f64>> {
        let order = self.topological_order()?;
        let adj = self.adjacency();
        let mut mass = vec![f64::NEG_INFINITY; self.num_nodes as usize];
        mass[self.end as usize] = 0.0;
        for &node in order.iter().rev() {
            if node == self.end {
                continue;
            }
            let mut acc = f64::NEG_INFINITY;
            for &ai in &adj[node as usize] {
                let arc = &self.arcs[ai];
                acc = log_add(acc, arc.weight + mass[arc.dst as usize]);
            }
            mass[node as usize] = acc;
        }
        Ok(mass)
    }

    /// Top-N distinct label sequences, ranked by total acoustic mass
    /// (log-sum over all paths spelling the sequence).
    ///
    /// Best-first search over spelling-prefix classes: a class carries the
    /// set of lattice nodes reachable by its spelling with their prefix
    /// masses, prioritized by the total mass of all completions, which upper
    /// bounds every descendant. A popped complete sequence therefore
    /// dominates everything still queued, making the enumeration exact.
    pub fn extract_nbest(&self, n: usize) -> Result<Vec<NBestEntry>> {
        if n == 0 {
            return Err(Error::Contract("n-best size must be >= 1".into()));
        }
        let beta = self.backward_mass()?;
        let adj = self.adjacency();
        let mut heap: std::collections::BinaryHeap<SearchItem> = std::collections::BinaryHeap::new();
        let root_priority = beta[self.start as usize];
        if root_priority == f64::NEG_INFINITY {
            return Err(Error::InvalidLattice("no complete path".into()));
        }
        heap.push(SearchItem {
            priority: root_priority,
            spelling: Vec::new(),
            frontier: Some(vec![(self.start, 0.0)]),
        });
        let mut out = Vec::with_capacity(n);
        let mut pops = 0usize;
        while let Some(item) = heap.pop() {
            pops += 1;
            if pops > 2_000_000 {
                break; // runaway guard; toy lattices never get near this
            }
            match item.frontier {
                None => {
                    out.push(NBestEntry {
                        labels: item.spelling,
                        acoustic: item.priority,
                        lm: None,
                        combined: item.priority,
                    });
                    if out.len() == n {
                        break;
                    }
                }
                Some(frontier) => {
                    // Terminal mass of this exact spelling.
                    let mut terminal = f64::NEG_INFINITY;
                    let mut children: BTreeMap<LabelId, BTreeMap<NodeId, f64>> = BTreeMap::new();
                    for &(node, mass) in &frontier {
                        for &ai in &adj[node as usize] {
                            let arc = &self.arcs[ai];
                            match arc.label {
                                None => terminal = log_add(terminal, mass + arc.weight),
                                Some(l) => {
                                    let slot = children.entry(l).or_default().entry(arc.dst).or_insert(f64::NEG_INFINITY);
                                    *slot = log_add(*slot, mass + arc.weight);
                                }
                            }
                        }
                    }
                    if terminal > f64::NEG_INFINITY {
                        heap.push(SearchItem {
                            priority: terminal,
                            spelling: item.spelling.clone(),
                            frontier: None,
                        });
                    }
                    for (label, nodes) in children {
                        let mut spelling = item.spelling.clone();
                        spelling.push(label);
                        let frontier: Vec<(NodeId, f64)> = nodes.into_iter().collect();
                        let priority = log_sum_exp(
                            &frontier
                                .iter()
                                .map(|&(node, m)| m + beta[node as usize])
                                .collect::<Vec<_>>(),
                        )?;
                        if priority > f64::NEG_INFINITY {
                            heap.push(SearchItem { priority, spelling, frontier: Some(frontier) });
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Write the line-oriented text format. Weights are printed as negative
    /// natural-log probabilities with nine significant digits; the header
    /// carries the frame count and a vocabulary checksum.
    pub fn write_text(&self, vocab: &Vocabulary) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "vqlattice-lattice v1 T={} vocab={:016x} nodes={} start={} end={}\n",
            self.frames,
            vocab.checksum(),
            self.num_nodes,
            self.start,
            self.end
        ));
        out.push_str(&format!("node {}\n", self.end));
        for arc in &self.arcs {
            let sym = match arc.label {
                Some(l) => vocab.symbol(l).unwrap_or("?"),
                None => "<eps>",
            };
            out.push_str(&format!("arc {} {} {} {:.8e}\n", arc.src, arc.dst, sym, -arc.weight));
        }
        out
    }

    pub fn read_text(text: &str, vocab: &Vocabulary) -> Result<Lattice> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty lattice file".into()))?;
        let mut frames = None;
        let mut nodes = None;
        let mut start = None;
        let mut end = None;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("vqlattice-lattice") || fields.next() != Some("v1") {
            return Err(Error::Format("missing lattice header tag".into()));
        }
        for field in fields {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header field {field:?}")))?;
            match key {
                "T" => frames = Some(parse_num::<usize>(value)?),
                "vocab" => {
                    let sum = u64::from_str_radix(value, 16)
                        .map_err(|_| Error::Format("bad vocab checksum".into()))?;
                    if sum != vocab.checksum() {
                        return Err(Error::Format("lattice vocabulary checksum mismatch".into()));
                    }
                }
                "nodes" => nodes = Some(parse_num::<u32>(value)?),
                "start" => start = Some(parse_num::<NodeId>(value)?),
                "end" => end = Some(parse_num::<NodeId>(value)?),
                _ => return Err(Error::Format(format!("unknown header field {key:?}"))),
            }
        }
        let mut lattice = Lattice {
            num_nodes: nodes.ok_or_else(|| Error::Format("header missing nodes".into()))?,
            start: start.ok_or_else(|| Error::Format("header missing start".into()))?,
            end: end.ok_or_else(|| Error::Format("header missing end".into()))?,
            frames: frames.ok_or_else(|| Error::Format("header missing T".into()))?,
            arcs: Vec::new(),
        };
        let mut saw_end_marker = false;
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("node") => {
                    let id: NodeId = parse_num(parts.next().unwrap_or(""))?;
                    if id != lattice.end {
                        return Err(Error::Format("node line disagrees with header end".into()));
                    }
                    saw_end_marker = true;
                }
                Some("arc") => {
                    let src: NodeId = parse_num(parts.next().unwrap_or(""))?;
                    let dst: NodeId = parse_num(parts.next().unwrap_or(""))?;
                    let sym = parts.next().ok_or_else(|| Error::Format("arc missing symbol".into()))?;
                    let w: f64 = parse_num(parts.next().unwrap_or(""))?;
                    let label = if sym == "<eps>" {
                        None
                    } else {
                        Some(vocab.id(sym).ok_or_else(|| Error::UnknownSymbol(sym.to_string()))?)
                    };
                    lattice.add_arc(src, dst, label, -w, None)?;
                }
                Some(other) => return Err(Error::Format(format!("unknown line kind {other:?}"))),
                None => {}
            }
        }
        if !saw_end_marker {
            return Err(Error::Format("missing end-node marker line".into()));
        }
        Ok(lattice)
    }
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Format(format!("bad numeric field {s:?}")))
}

#[derive(Debug)]
struct SearchItem {
    priority: f64,
    spelling: Vec<LabelId>,
    /// `None` marks a completed sequence (priority = exact mass).
    frontier: Option<Vec<(NodeId, f64)>>,
}

impl PartialEq for SearchItem {
    fn eq(&self, other: &Self) -> bool {
        self.priority == other.priority && self.spelling == other.spelling
    }
}
impl Eq for SearchItem {}
impl Ord for SearchItem {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Max-heap on priority; deterministic tie-breaks: completed entries
        // first, then shorter and lexicographically smaller spellings.
        self.priority
            .total_cmp(&other.priority)
            .then_with(|| other.frontier.is_some().cmp(&self.frontier.is_some()))
            .then_with(|| other.spelling.len().cmp(&self.spelling.len()))
            .then_with(|| other.spelling.cmp(&self.spelling))
    }
}
impl PartialOrd for SearchItem {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Apply one decoding step's merge records: assign target nodes (adopted or
/// fresh), materialize member arcs, and connect finished hypotheses to the
/// end node. Returns the node assigned to each update (`None` for
/// blank-only survivors).
///
/// Adopting a node that already has outgoing arcs would let new in-paths
/// reach expansions recorded before the merge, producing paths that do not
/// correspond to any alignment. Such nodes are split instead: the merge
/// target becomes a fresh node carrying copies of the old node's in-arcs,
/// so old and new path families stay separated and every path sum remains
/// an exact alignment log-probability.
pub fn update_lattice(lattice: &mut Lattice, step: &StepResults) -> Result<Vec<Option<NodeId>>> {
    // Sources gaining out-arcs in this very step count as "has expansions"
    // regardless of processing order within the batch.
    let mut batch_sources: std::collections::BTreeSet<NodeId> = std::collections::BTreeSet::new();
    for update in &step.updates {
        if let HypUpdate::Emission { arcs, .. } = update {
            batch_sources.extend(arcs.iter().map(|a| a.src));
        }
    }
    let mut assigned = Vec::with_capacity(step.updates.len());
    for update in &step.updates {
        match update {
            HypUpdate::BlankOnly => assigned.push(None),
            HypUpdate::Emission { adopted, arcs } => {
                let target = match adopted {
                    Some(node) => {
                        lattice.check_node(*node)?;
                        if lattice.out_degree(*node) > 0 || batch_sources.contains(node) {
                            let split = lattice.add_node();
                            lattice.copy_in_arcs(*node, split)?;
                            split
                        } else {
                            *node
                        }
                    }
                    None => lattice.add_node(),
                };
                for arc in arcs {
                    lattice.add_arc(arc.src, target, Some(arc.label), arc.weight, Some(arc.emit_time))?;
                }
                assigned.push(Some(target));
            }
        }
    }
    for f in &step.finals {
        let end = lattice.end();
        lattice.add_arc(f.node, end, None, f.weight, None)?;
    }
    Ok(assigned)
}

#[derive(Debug, Default, Clone)]
pub struct ValidationReport {
    pub acyclic: bool,
    pub reachable: bool,
    pub coreachable: bool,
    pub finite_weights: bool,
    pub structure: bool,
    pub messages: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.acyclic && self.reachable && self.coreachable && self.finite_weights && self.structure
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flag = |ok: bool| if ok { "pass" } else { "FAIL" };
        writeln!(f, "acyclic: {}", flag(self.acyclic))?;
        writeln!(f, "reachable: {}", flag(self.reachable))?;
        writeln!(f, "coreachable: {}", flag(self.coreachable))?;
        writeln!(f, "finite_weights: {}", flag(self.finite_weights))?;
        writeln!(f, "structure: {}", flag(self.structure))?;
        for msg in &self.messages {
            writeln!(f, "  - {msg}")?;
        }
        Ok(())
    }
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: Eq>(hyp: &[T], reference: &[T]) -> usize {
    let r = reference.len();
    let mut prev: Vec<usize> = (0..=r).collect();
    let mut cur = vec![0usize; r + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for j in 0..r {
            let sub = prev[j] + usize::from(*h != reference[j]);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[r]
}
