//! Dependency-based hybrid trees.
//!
//! Every MR node is attached to an anchor word through a labeled arc from the
//! anchor of its parent (token 0 for the root). A node also owns a contiguous
//! region of the sentence; the region of the root is the whole sentence and
//! each child region lies directly beside the parent's anchor. The pattern of
//! a node says how its region is split:
//!
//! | pattern | words owned by the node | child regions            |
//! |---------|-------------------------|--------------------------|
//! | `WW`    | `[lo..=hi]`             | none                     |
//! | `WX`    | `[lo..=a]`              | child 0 on `[a+1..=hi]`  |
//! | `XW`    | `[a..=hi]`              | child 0 on `[lo..=a-1]`  |
//! | `X`     | none                    | child 0 is a self-loop on `a` with the same region |
//! | `XY`    | `a`                     | child 0 left, child 1 right |
//! | `YX`    | `a`                     | child 1 left, child 0 right |
//!
//! Self-loop arcs `a -> a` carry a chain position (`loop_depth` 1, 2, ...),
//! real arcs have `loop_depth` 0.

use std::collections::HashSet;
use std::fmt;

use thiserror::Error;

use crate::funql::{IndexedMr, SemanticGrammar, UnitId};

pub const ROOT_TOKEN: &str = "<root>";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HybridTreeError {
    #[error("sentence has no tokens")]
    EmptySentence,

    #[error("enumeration bound exceeded: {0}")]
    BoundExceeded(String),

    #[error("inconsistent tree: {0}")]
    InconsistentTree(String),

    #[error("unknown pattern `{0}`")]
    UnknownPattern(String),
}

/// Whitespace-tokenized sentence `w1..wN`; token 0 is the implicit root.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Sentence {
    tokens: Vec<String>,
}

impl Sentence {
    pub fn new(tokens: Vec<String>) -> Result<Self, HybridTreeError> {
        if tokens.is_empty() {
            return Err(HybridTreeError::EmptySentence);
        }
        Ok(Sentence { tokens })
    }

    pub fn from_text(text: &str) -> Result<Self, HybridTreeError> {
        Self::new(text.split_whitespace().map(str::to_string).collect())
    }

    /// Number of real words N.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Token `i`, with `0` being the root.
    pub fn token(&self, i: usize) -> &str {
        if i == 0 {
            ROOT_TOKEN
        } else {
            &self.tokens[i - 1]
        }
    }

    pub fn words(&self) -> &[String] {
        &self.tokens
    }
}

impl fmt::Display for Sentence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tokens.join(" "))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pattern {
    WW,
    X,
    WX,
    XW,
    XY,
    YX,
}

impl Pattern {
    /// Fixed iteration order; decoding ties go to the earlier pattern.
    pub const ALL: [Pattern; 6] = [Pattern::WW, Pattern::X, Pattern::WX, Pattern::XW, Pattern::XY, Pattern::YX];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn arity(self) -> usize {
        match self {
            Pattern::WW => 0,
            Pattern::X | Pattern::WX | Pattern::XW => 1,
            Pattern::XY | Pattern::YX => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Pattern::WW => "WW",
            Pattern::X => "X",
            Pattern::WX => "WX",
            Pattern::XW => "XW",
            Pattern::XY => "XY",
            Pattern::YX => "YX",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, HybridTreeError> {
        Pattern::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| HybridTreeError::UnknownPattern(name.to_string()))
    }

    /// Words owned by a node with this pattern, anchor `a` and region
    /// `[lo, hi]`.
    pub fn owned(self, lo: usize, a: usize, hi: usize) -> Option<(usize, usize)> {
        match self {
            Pattern::WW => Some((lo, hi)),
            Pattern::WX => Some((lo, a)),
            Pattern::XW => Some((a, hi)),
            Pattern::XY | Pattern::YX => Some((a, a)),
            Pattern::X => None,
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn patterns_for(arity: usize) -> &'static [Pattern] {
    match arity {
        0 => &[Pattern::WW],
        1 => &[Pattern::X, Pattern::WX, Pattern::XW],
        2 => &[Pattern::XY, Pattern::YX],
        _ => &[],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Arc {
    pub parent: usize,
    pub child: usize,
    pub unit: UnitId,
    pub pattern: Pattern,
    pub loop_depth: usize,
}

impl Arc {
    pub fn is_self_loop(&self) -> bool {
        self.loop_depth > 0
    }
}

/// A set of labeled arcs; equality is equality of the arc sets.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct HybridTree {
    arcs: Vec<Arc>,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("root: {0}")]
    Root(String),
    #[error("token {0} is out of range")]
    TokenRange(usize),
    #[error("token {0} has more than one head")]
    MultipleHeads(usize),
    #[error("self-loop chain on token {0} is malformed")]
    SelfLoop(usize),
    #[error("token {0} is not reachable from the root")]
    Detached(usize),
    #[error("arcs {0:?} and {1:?} cross")]
    NonProjective((usize, usize), (usize, usize)),
    #[error("depth {depth} exceeds the cap {cap}")]
    Depth { depth: usize, cap: usize },
    #[error("unit {child} cannot hang below {parent:?}")]
    Adjacency { parent: Option<UnitId>, child: UnitId },
    #[error("unit {unit} has {found} child arcs, arity is {expected}")]
    Arity { unit: UnitId, expected: usize, found: usize },
    #[error("pattern {pattern} is not valid for unit {unit}")]
    Pattern { unit: UnitId, pattern: Pattern },
    #[error("child anchored at token {token} lies outside its region")]
    Placement { token: usize },
    #[error("children of unit {unit} are in the wrong order")]
    ChildOrder { unit: UnitId },
}

/// One node of a laid-out hybrid tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeNode {
    pub unit: UnitId,
    pub pattern: Pattern,
    /// Token the incoming arc starts from.
    pub head: usize,
    pub anchor: usize,
    pub loop_depth: usize,
    pub lo: usize,
    pub hi: usize,
    /// 1 for the root.
    pub depth: usize,
    /// Children in argument order.
    pub children: Vec<usize>,
}

impl TreeNode {
    pub fn owned(&self) -> Option<(usize, usize)> {
        self.pattern.owned(self.lo, self.anchor, self.hi)
    }
}

/// Arcs arranged as a tree, children in positional order.
struct Graph {
    arcs: Vec<Arc>,
    children: Vec<Vec<usize>>,
    depth: Vec<usize>,
}

impl HybridTree {
    pub fn new(mut arcs: Vec<Arc>) -> Self {
        arcs.sort();
        HybridTree { arcs }
    }

    pub fn arcs(&self) -> &[Arc] {
        &self.arcs
    }

    /// Structural checks: root arc, token range, single head, self-loop
    /// chains, reachability, projectivity and (optionally) the depth cap.
    fn graph(&self, n_words: usize, cap: Option<usize>) -> Result<Graph, Violation> {
        let arcs = self.arcs.clone();
        let roots: Vec<usize> = (0..arcs.len()).filter(|&i| arcs[i].parent == 0).collect();
        if roots.len() != 1 {
            return Err(Violation::Root(format!("{} arcs leave the root", roots.len())));
        }
        for arc in &arcs {
            for t in [arc.parent, arc.child] {
                if t > n_words {
                    return Err(Violation::TokenRange(t));
                }
            }
            if arc.child == 0 {
                return Err(Violation::Root("an arc enters the root".into()));
            }
            if arc.is_self_loop() != (arc.parent == arc.child) {
                return Err(Violation::SelfLoop(arc.child));
            }
        }
        let mut head_arc = vec![None; n_words + 1];
        let mut loops: Vec<Vec<usize>> = vec![Vec::new(); n_words + 1];
        for (i, arc) in arcs.iter().enumerate() {
            if arc.is_self_loop() {
                loops[arc.child].push(i);
            } else if head_arc[arc.child].replace(i).is_some() {
                return Err(Violation::MultipleHeads(arc.child));
            }
        }
        for (t, chain) in loops.iter_mut().enumerate() {
            chain.sort_by_key(|&i| arcs[i].loop_depth);
            let contiguous = chain.iter().enumerate().all(|(k, &i)| arcs[i].loop_depth == k + 1);
            if !contiguous || (!chain.is_empty() && head_arc[t].is_none()) {
                return Err(Violation::SelfLoop(t));
            }
        }

        // Last node of each token's chain; real out-arcs hang below it.
        let last = |t: usize| -> Option<usize> { loops[t].last().copied().or(head_arc[t]) };
        let mut children = vec![Vec::new(); arcs.len()];
        for (t, &head) in head_arc.iter().enumerate() {
            let Some(head) = head else { continue };
            let mut prev = head;
            for &l in &loops[t] {
                children[prev].push(l);
                prev = l;
            }
        }
        let mut real: Vec<usize> = (0..arcs.len()).filter(|&i| !arcs[i].is_self_loop()).collect();
        real.sort_by_key(|&i| arcs[i].child);
        for &i in &real {
            let p = arcs[i].parent;
            if p == 0 {
                continue;
            }
            match last(p) {
                Some(owner) => children[owner].push(i),
                None => return Err(Violation::Detached(arcs[i].child)),
            }
        }

        let mut depth = vec![0usize; arcs.len()];
        let mut stack = vec![(roots[0], 1usize)];
        let mut seen = 0;
        while let Some((i, d)) = stack.pop() {
            if depth[i] != 0 {
                return Err(Violation::Detached(arcs[i].child));
            }
            depth[i] = d;
            seen += 1;
            for &c in &children[i] {
                stack.push((c, d + 1));
            }
        }
        if seen != arcs.len() {
            let lost = (0..arcs.len()).find(|&i| depth[i] == 0).unwrap();
            return Err(Violation::Detached(arcs[lost].child));
        }

        for (x, &i) in real.iter().enumerate() {
            for &j in &real[x + 1..] {
                let a = span(&arcs[i]);
                let b = span(&arcs[j]);
                if crosses(a, b) {
                    return Err(Violation::NonProjective(a, b));
                }
            }
        }
        if let Some(cap) = cap {
            let deepest = depth.iter().copied().max().unwrap_or(0);
            if deepest > cap {
                return Err(Violation::Depth { depth: deepest, cap });
            }
        }
        Ok(Graph { arcs, children, depth })
    }

    /// Checks every validity constraint and that the tree encodes `mr`.
    pub fn validate(&self, sentence: &Sentence, mr: &IndexedMr, cap: usize) -> Result<(), Violation> {
        let graph = self.graph(sentence.len(), Some(cap))?;
        let root = self.root_index(&graph);
        if graph.arcs[root].unit != mr.node(0).unit {
            return Err(Violation::Adjacency {
                parent: None,
                child: graph.arcs[root].unit,
            });
        }
        let mut stack = vec![(root, 0usize, 1usize, sentence.len())];
        while let Some((g, v, lo, hi)) = stack.pop() {
            let arc = graph.arcs[g];
            let mr_node = mr.node(v);
            for &c in &graph.children[g] {
                let unit = graph.arcs[c].unit;
                if !mr_node.children.iter().any(|&k| mr.node(k).unit == unit) {
                    return Err(Violation::Adjacency {
                        parent: Some(arc.unit),
                        child: unit,
                    });
                }
            }
            let ordered = place(&graph, g, lo, hi, mr_node.children.len())?;
            for (k, (c, clo, chi)) in ordered.into_iter().enumerate() {
                let want = mr_node.children[k];
                if graph.arcs[c].unit != mr.node(want).unit {
                    return Err(Violation::ChildOrder { unit: arc.unit });
                }
                stack.push((c, want, clo, chi));
            }
        }
        Ok(())
    }

    fn root_index(&self, graph: &Graph) -> usize {
        graph.arcs.iter().position(|a| a.parent == 0).unwrap()
    }

    /// Lays the tree out with regions and argument-ordered children. Nodes
    /// are in preorder with the root first.
    pub fn layout(&self, n_words: usize, arity: impl Fn(UnitId) -> usize) -> Result<Vec<TreeNode>, Violation> {
        let graph = self.graph(n_words, None)?;
        let root = self.root_index(&graph);
        let mut nodes = Vec::with_capacity(graph.arcs.len());
        fn walk(
            graph: &Graph,
            g: usize,
            lo: usize,
            hi: usize,
            arity: &dyn Fn(UnitId) -> usize,
            nodes: &mut Vec<TreeNode>,
        ) -> Result<usize, Violation> {
            let arc = graph.arcs[g];
            let ordered = place(graph, g, lo, hi, arity(arc.unit))?;
            let idx = nodes.len();
            nodes.push(TreeNode {
                unit: arc.unit,
                pattern: arc.pattern,
                head: arc.parent,
                anchor: arc.child,
                loop_depth: arc.loop_depth,
                lo,
                hi,
                depth: graph.depth[g],
                children: Vec::new(),
            });
            for (c, clo, chi) in ordered {
                let k = walk(graph, c, clo, chi, arity, nodes)?;
                nodes[idx].children.push(k);
            }
            Ok(idx)
        }
        walk(&graph, root, 1, n_words, &arity, &mut nodes)?;
        Ok(nodes)
    }

    /// One line per arc: `parent -> child : unit : pattern`.
    pub fn to_lines(&self, grammar: &SemanticGrammar) -> String {
        let mut out = String::new();
        for arc in &self.arcs {
            out.push_str(&format!(
                "{} -> {} : {} : {}\n",
                arc.parent,
                arc.child,
                grammar.unit(arc.unit),
                arc.pattern
            ));
        }
        out
    }

    /// Text drawing of the arcs above the sentence, one row per arc.
    pub fn diagram(&self, sentence: &Sentence, grammar: &SemanticGrammar) -> String {
        let mut cols = Vec::with_capacity(sentence.len() + 1);
        let mut header = String::new();
        for t in 0..=sentence.len() {
            cols.push(header.chars().count());
            header.push_str(sentence.token(t));
            header.push(' ');
        }
        let width = header.chars().count();
        let mut rows = Vec::new();
        let mut ordered: Vec<&Arc> = self.arcs.iter().collect();
        ordered.sort_by_key(|a| (a.parent.abs_diff(a.child), a.child, a.loop_depth));
        for arc in ordered.into_iter().rev() {
            let mut row: Vec<char> = vec![' '; width];
            let (p, c) = (cols[arc.parent], cols[arc.child]);
            if arc.is_self_loop() {
                row[c] = '@';
            } else {
                for cell in row.iter_mut().take(p.max(c)).skip(p.min(c)) {
                    *cell = '-';
                }
                row[p] = '+';
                row[c] = 'v';
            }
            let line: String = row.into_iter().collect();
            rows.push(format!(
                "{}  {} {}",
                line.trim_end(),
                grammar.unit(arc.unit),
                arc.pattern
            ));
        }
        rows.push(header.trim_end().to_string());
        rows.join("\n") + "\n"
    }
}

/// Checks pattern validity and placement of the children of graph node `g`
/// with region `[lo, hi]`, returning them in argument order with their
/// regions.
fn place(
    graph: &Graph,
    g: usize,
    lo: usize,
    hi: usize,
    arity: usize,
) -> Result<Vec<(usize, usize, usize)>, Violation> {
    let arc = graph.arcs[g];
    let kids = &graph.children[g];
    if kids.len() != arity {
        return Err(Violation::Arity {
            unit: arc.unit,
            expected: arity,
            found: kids.len(),
        });
    }
    if arc.pattern.arity() != arity {
        return Err(Violation::Pattern {
            unit: arc.unit,
            pattern: arc.pattern,
        });
    }
    let a = arc.child;
    if a < lo || a > hi {
        return Err(Violation::Placement { token: a });
    }
    let inside = |c: usize, l: usize, h: usize| -> Result<(usize, usize, usize), Violation> {
        let child = graph.arcs[c];
        if child.is_self_loop() || l > h || child.child < l || child.child > h {
            Err(Violation::Placement { token: child.child })
        } else {
            Ok((c, l, h))
        }
    };
    match arc.pattern {
        Pattern::WW => Ok(Vec::new()),
        Pattern::X => {
            let c = kids[0];
            if graph.arcs[c].is_self_loop() {
                Ok(vec![(c, lo, hi)])
            } else {
                Err(Violation::Placement { token: graph.arcs[c].child })
            }
        }
        Pattern::WX => Ok(vec![inside(kids[0], a + 1, hi)?]),
        Pattern::XW => Ok(vec![inside(kids[0], lo, a - 1)?]),
        Pattern::XY | Pattern::YX => {
            let left = inside(kids[0], lo, a - 1)?;
            let right = inside(kids[1], a + 1, hi)?;
            Ok(if arc.pattern == Pattern::XY {
                vec![left, right]
            } else {
                vec![right, left]
            })
        }
    }
}

fn span(arc: &Arc) -> (usize, usize) {
    (arc.parent.min(arc.child), arc.parent.max(arc.child))
}

fn crosses(a: (usize, usize), b: (usize, usize)) -> bool {
    (a.0 < b.0 && b.0 < a.1 && a.1 < b.1) || (b.0 < a.0 && a.0 < b.1 && b.1 < a.1)
}

/// Rebuilds the meaning representation encoded by the arc labels.
pub fn recover_mr(tree: &HybridTree, grammar: &SemanticGrammar) -> Result<IndexedMr, HybridTreeError> {
    let n_words = tree.arcs.iter().map(|a| a.parent.max(a.child)).max().unwrap_or(0);
    let inconsistent = |v: Violation| HybridTreeError::InconsistentTree(v.to_string());
    let graph = tree.graph(n_words, None).map_err(inconsistent)?;
    let mut parts = Vec::with_capacity(graph.arcs.len());
    for (g, arc) in graph.arcs.iter().enumerate() {
        if arc.unit >= grammar.len() {
            return Err(HybridTreeError::InconsistentTree(format!("unknown unit id {}", arc.unit)));
        }
        let mut kids = graph.children[g].clone();
        let unit = grammar.unit(arc.unit);
        if kids.len() != unit.arity() || arc.pattern.arity() != unit.arity() {
            return Err(HybridTreeError::InconsistentTree(format!(
                "unit {unit} has {} child arcs and pattern {}",
                kids.len(),
                arc.pattern
            )));
        }
        if arc.pattern == Pattern::YX {
            kids.reverse();
        }
        for (k, &c) in kids.iter().enumerate() {
            let child = grammar.unit(graph.arcs[c].unit);
            if child.return_type() != &unit.arg_types()[k] {
                return Err(HybridTreeError::InconsistentTree(format!(
                    "{child} cannot fill argument {k} of {unit}"
                )));
            }
        }
        parts.push((arc.unit, kids));
    }
    Ok(IndexedMr::from_parts(tree.root_index(&graph), &parts))
}

/// Every hybrid tree for `(sentence, mr)` under depth cap `cap`, generated
/// top-down. Fails once `limit` trees are exceeded or the sentence is longer
/// than `max_words`.
pub fn enumerate_trees(
    sentence: &Sentence,
    mr: &IndexedMr,
    arity: impl Fn(UnitId) -> usize,
    cap: usize,
    max_words: usize,
    limit: usize,
) -> Result<Vec<HybridTree>, HybridTreeError> {
    if sentence.len() > max_words {
        return Err(HybridTreeError::BoundExceeded(format!(
            "{} words, oracle limit is {max_words}",
            sentence.len()
        )));
    }
    let gen = Generator {
        mr,
        arity: &arity,
        cap,
        limit,
    };
    let sets = gen.node(0, 0, 1, sentence.len(), None, 0, 1)?;
    Ok(sets.into_iter().map(HybridTree::new).collect())
}

struct Generator<'a> {
    mr: &'a IndexedMr,
    arity: &'a dyn Fn(UnitId) -> usize,
    cap: usize,
    limit: usize,
}

impl Generator<'_> {
    #[allow(clippy::too_many_arguments)]
    fn node(
        &self,
        v: usize,
        head: usize,
        lo: usize,
        hi: usize,
        anchor: Option<usize>,
        loop_depth: usize,
        depth: usize,
    ) -> Result<Vec<Vec<Arc>>, HybridTreeError> {
        if depth > self.cap || lo > hi {
            return Ok(Vec::new());
        }
        let node = self.mr.node(v);
        let anchors: Vec<usize> = match anchor {
            Some(a) => vec![a],
            None => (lo..=hi).collect(),
        };
        let mut out = Vec::new();
        for a in anchors {
            for &pattern in patterns_for((self.arity)(node.unit)) {
                let arc = Arc {
                    parent: head,
                    child: a,
                    unit: node.unit,
                    pattern,
                    loop_depth,
                };
                let below: Vec<Vec<Arc>> = match pattern {
                    Pattern::WW => vec![Vec::new()],
                    Pattern::X => self.node(node.children[0], a, lo, hi, Some(a), loop_depth + 1, depth + 1)?,
                    Pattern::WX if a < hi => self.node(node.children[0], a, a + 1, hi, None, 0, depth + 1)?,
                    Pattern::XW if lo < a => self.node(node.children[0], a, lo, a - 1, None, 0, depth + 1)?,
                    Pattern::XY | Pattern::YX if lo < a && a < hi => {
                        let (left, right) = if pattern == Pattern::XY {
                            (node.children[0], node.children[1])
                        } else {
                            (node.children[1], node.children[0])
                        };
                        let ls = self.node(left, a, lo, a - 1, None, 0, depth + 1)?;
                        let rs = self.node(right, a, a + 1, hi, None, 0, depth + 1)?;
                        let mut both = Vec::new();
                        for l in &ls {
                            for r in &rs {
                                let mut arcs = l.clone();
                                arcs.extend_from_slice(r);
                                both.push(arcs);
                            }
                        }
                        both
                    }
                    _ => Vec::new(),
                };
                for mut arcs in below {
                    arcs.push(arc);
                    out.push(arcs);
                    if out.len() > self.limit {
                        return Err(HybridTreeError::BoundExceeded(format!("more than {} trees", self.limit)));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Tries every anchor and pattern for every MR node and keeps what
/// `validate` accepts. Exponential in the MR size; for tiny cross-checks.
pub fn enumerate_blind(sentence: &Sentence, mr: &IndexedMr, arity: impl Fn(UnitId) -> usize, cap: usize) -> Vec<HybridTree> {
    let n = sentence.len();
    let choices: Vec<Vec<(usize, Pattern)>> = mr
        .nodes()
        .iter()
        .map(|node| {
            (1..=n)
                .flat_map(|a| patterns_for(arity(node.unit)).iter().map(move |&p| (a, p)))
                .collect()
        })
        .collect();
    let mut parent = vec![None; mr.len()];
    for (i, node) in mr.nodes().iter().enumerate() {
        for &c in &node.children {
            parent[c] = Some(i);
        }
    }
    let mut found = HashSet::new();
    let mut pick = vec![0usize; mr.len()];
    'outer: loop {
        let mut arcs = Vec::with_capacity(mr.len());
        let mut loop_depth = vec![0usize; mr.len()];
        for i in 0..mr.len() {
            let (a, pattern) = choices[i][pick[i]];
            let head = match parent[i] {
                None => 0,
                Some(p) => {
                    let (pa, pp) = choices[p][pick[p]];
                    if pp == Pattern::X {
                        loop_depth[i] = loop_depth[p] + 1;
                    }
                    pa
                }
            };
            arcs.push(Arc {
                parent: head,
                child: a,
                unit: mr.node(i).unit,
                pattern,
                loop_depth: loop_depth[i],
            });
        }
        let tree = HybridTree::new(arcs);
        if tree.validate(sentence, mr, cap).is_ok() {
            found.insert(tree);
        }
        for i in 0..mr.len() {
            pick[i] += 1;
            if pick[i] < choices[i].len() {
                continue 'outer;
            }
            pick[i] = 0;
        }
        break;
    }
    let mut out: Vec<HybridTree> = found.into_iter().collect();
    out.sort_by(|a, b| a.arcs.cmp(&b.arcs));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funql::{build_grammar, parse_mr, SemanticType, SignatureTable};

    const SIGS: &str = "\
answer\tQUERY\tRIVER
exclude\tRIVER\tRIVER,RIVER
river(all)\tRIVER\t
traverse\tRIVER\tSTATE
stateid\tSTATE\tSTATENAME
";

    fn river_example() -> (Sentence, SemanticGrammar, IndexedMr) {
        let table = SignatureTable::parse(SIGS).unwrap();
        let mr = parse_mr("answer(exclude(river(all), traverse(stateid('tennessee'))))", &table).unwrap();
        let grammar = build_grammar(std::slice::from_ref(&mr), SemanticType::new("QUERY").unwrap()).unwrap();
        let indexed = IndexedMr::new(&mr, &grammar).unwrap();
        let sentence = Sentence::from_text("What rivers do not run through Tennessee ?").unwrap();
        (sentence, grammar, indexed)
    }

    fn arc(parent: usize, child: usize, unit: UnitId, pattern: Pattern, loop_depth: usize) -> Arc {
        Arc {
            parent,
            child,
            unit,
            pattern,
            loop_depth,
        }
    }

    // Units are numbered m1..m6 -> 0..5 in preorder.
    fn river_tree() -> HybridTree {
        HybridTree::new(vec![
            arc(0, 1, 0, Pattern::WX, 0),
            arc(1, 4, 1, Pattern::XY, 0),
            arc(4, 2, 2, Pattern::WW, 0),
            arc(4, 6, 3, Pattern::WX, 0),
            arc(6, 7, 4, Pattern::X, 0),
            arc(7, 7, 5, Pattern::WW, 1),
        ])
    }

    #[test]
    fn pattern_table() {
        assert_eq!(patterns_for(0), &[Pattern::WW]);
        assert_eq!(patterns_for(1), &[Pattern::X, Pattern::WX, Pattern::XW]);
        assert_eq!(patterns_for(2), &[Pattern::XY, Pattern::YX]);
        for p in Pattern::ALL {
            assert!(patterns_for(p.arity()).contains(&p));
            assert_eq!(Pattern::from_name(p.name()).unwrap(), p);
        }
    }

    #[test]
    fn river_tree_is_valid() {
        let (sentence, grammar, mr) = river_example();
        let tree = river_tree();
        assert_eq!(tree.validate(&sentence, &mr, 20), Ok(()));
        assert_eq!(recover_mr(&tree, &grammar).unwrap(), mr);
        let layout = tree.layout(sentence.len(), |u| grammar.unit(u).arity()).unwrap();
        let owned: Vec<Option<(usize, usize)>> = layout.iter().map(TreeNode::owned).collect();
        // answer owns What; exclude owns not; river(all) owns rivers do;
        // traverse owns run through; stateid owns nothing; 'tennessee' owns
        // Tennessee ?
        assert_eq!(
            owned,
            vec![Some((1, 1)), Some((4, 4)), Some((2, 3)), Some((5, 6)), None, Some((7, 8))]
        );
    }

    #[test]
    fn swapped_units_break_adjacency() {
        let (sentence, _, mr) = river_example();
        let tree = HybridTree::new(vec![
            arc(0, 1, 0, Pattern::WX, 0),
            arc(1, 4, 1, Pattern::XY, 0),
            arc(4, 2, 2, Pattern::WW, 0),
            arc(4, 6, 3, Pattern::WX, 0),
            arc(6, 7, 5, Pattern::X, 0),
            arc(7, 7, 4, Pattern::WW, 1),
        ]);
        assert!(matches!(
            tree.validate(&sentence, &mr, 20),
            Err(Violation::Adjacency { child: 5, .. })
        ));
    }

    #[test]
    fn other_violations() {
        let (sentence, _, mr) = river_example();
        let mut arcs = river_tree().arcs().to_vec();
        // rivers -> through would cross not -> ... arcs
        arcs[3] = arc(2, 6, 3, Pattern::WX, 0);
        let err = HybridTree::new(arcs).validate(&sentence, &mr, 20).unwrap_err();
        assert!(matches!(err, Violation::NonProjective(..)), "{err:?}");

        assert!(matches!(
            river_tree().validate(&sentence, &mr, 4),
            Err(Violation::Depth { depth: 5, cap: 4 })
        ));

        let mut arcs = river_tree().arcs().to_vec();
        let i = arcs.iter().position(|a| a.unit == 1).unwrap();
        arcs[i].pattern = Pattern::YX;
        assert!(matches!(
            HybridTree::new(arcs).validate(&sentence, &mr, 20),
            Err(Violation::ChildOrder { unit: 1 })
        ));

        let mut arcs = river_tree().arcs().to_vec();
        let i = arcs.iter().position(|a| a.unit == 3).unwrap();
        arcs[i].pattern = Pattern::XW;
        assert!(matches!(
            HybridTree::new(arcs).validate(&sentence, &mr, 20),
            Err(Violation::Placement { token: 7 })
        ));

        let mut arcs = river_tree().arcs().to_vec();
        arcs.retain(|a| a.unit != 2);
        assert!(matches!(
            HybridTree::new(arcs).validate(&sentence, &mr, 20),
            Err(Violation::Arity { unit: 1, expected: 2, found: 1 })
        ));
    }

    #[test]
    fn single_word_leaf() {
        let table = SignatureTable::parse("river(all)\tRIVER\n").unwrap();
        let mr = parse_mr("river(all)", &table).unwrap();
        let g = build_grammar(std::slice::from_ref(&mr), SemanticType::new("RIVER").unwrap()).unwrap();
        let mr = IndexedMr::new(&mr, &g).unwrap();
        let s = Sentence::from_text("a").unwrap();
        let tree = HybridTree::new(vec![arc(0, 1, 0, Pattern::WW, 0)]);
        assert_eq!(tree.validate(&s, &mr, 1), Ok(()));
        let all = enumerate_trees(&s, &mr, |u| g.unit(u).arity(), 1, 8, 100).unwrap();
        assert_eq!(all, vec![tree]);
    }

    #[test]
    fn two_words_chain_count() {
        let table = SignatureTable::parse("answer\tQUERY\tRIVER\nriver(all)\tRIVER\n").unwrap();
        let mr = parse_mr("answer(river(all))", &table).unwrap();
        let g = build_grammar(std::slice::from_ref(&mr), SemanticType::new("QUERY").unwrap()).unwrap();
        let mr = IndexedMr::new(&mr, &g).unwrap();
        let s = Sentence::from_text("a b").unwrap();
        let arity = |u: UnitId| g.unit(u).arity();
        // anchor 1: WX or X; anchor 2: XW or X.
        assert_eq!(enumerate_trees(&s, &mr, arity, 2, 8, 100).unwrap().len(), 4);
        assert_eq!(enumerate_trees(&s, &mr, arity, 1, 8, 100).unwrap().len(), 0);

        let chain = HybridTree::new(vec![arc(0, 1, 0, Pattern::X, 0), arc(1, 1, 1, Pattern::WW, 1)]);
        assert_eq!(recover_mr(&chain, &g).unwrap(), mr);
        assert!(enumerate_trees(&s, &mr, arity, 2, 8, 100).unwrap().contains(&chain));
    }

    #[test]
    fn river_tree_is_enumerated() {
        let (sentence, grammar, mr) = river_example();
        let all = enumerate_trees(&sentence, &mr, |u| grammar.unit(u).arity(), 20, 10, 1_000_000).unwrap();
        assert!(all.contains(&river_tree()));
        let distinct: HashSet<_> = all.iter().collect();
        assert_eq!(distinct.len(), all.len());
        for tree in all.iter().step_by(97) {
            assert_eq!(tree.validate(&sentence, &mr, 20), Ok(()));
        }
    }

    #[test]
    fn enumeration_bounds() {
        let (sentence, grammar, mr) = river_example();
        assert!(matches!(
            enumerate_trees(&sentence, &mr, |u| grammar.unit(u).arity(), 20, 4, 100),
            Err(HybridTreeError::BoundExceeded(_))
        ));
        assert!(matches!(
            enumerate_trees(&sentence, &mr, |u| grammar.unit(u).arity(), 20, 10, 3),
            Err(HybridTreeError::BoundExceeded(_))
        ));
    }

    #[test]
    fn lines_and_diagram() {
        let (sentence, grammar, _) = river_example();
        let tree = river_tree();
        let lines = tree.to_lines(&grammar);
        assert!(lines.starts_with("0 -> 1 : QUERY:answer(RIVER) : WX\n"));
        assert!(lines.contains("7 -> 7 : STATENAME:'tennessee' : WW\n"));
        let diagram = tree.diagram(&sentence, &grammar);
        assert!(diagram.ends_with("<root> What rivers do not run through Tennessee ?\n"));
        assert_eq!(diagram.lines().count(), 7);
        assert!(diagram.contains('@'));
    }
}
