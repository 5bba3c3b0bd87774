//! Inside, outside and Viterbi over hybrid-tree spans.
//!
//! `D(dir, p, e, lab, h)` scores every subtree whose arc leaves head `p` and
//! whose region runs from `p` towards endpoint `e` (`[p+1..=e]` to the right,
//! `[e..=p-1]` to the left), labeled `lab`, of height at most `h`.
//! `C(dir, p, e, lab, k, h)` is the same region filled by argument `k` of
//! `lab`, including the transition score. Arc spans (the part below a fixed
//! modifier `a`) are recomputed per cell instead of being stored.
//!
//! Labels come from a [`LabelSpace`]: MR nodes when the meaning
//! representation is fixed, grammar units when it is free.

const NEG_INFINITY: f64 = f64::NEG_INFINITY;

use thiserror::Error;

use crate::funql::{IndexedMr, SemanticGrammar, UnitId};
use crate::hybridtree::{patterns_for, Arc, HybridTree, Pattern, TreeNode};

const NPAT: usize = 6;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChartError {
    #[error("no derivation covers the sentence")]
    NoDerivation,
}

/// Log-potentials of every chart-local event, indexed by unit.
#[derive(Clone, Debug, PartialEq)]
pub struct Potentials {
    n: usize,
    m: usize,
    arc: Vec<f64>,
    trans: Vec<f64>,
    pattern: Vec<f64>,
    word: Vec<f64>,
    prefix: Vec<f64>,
}

impl Potentials {
    /// All-zero potentials for `n` words and `m` units.
    pub fn zeros(n: usize, m: usize) -> Self {
        Potentials {
            n,
            m,
            arc: vec![0.0; (n + 1) * (n + 1) * m],
            trans: vec![0.0; m * m],
            pattern: vec![0.0; m * NPAT],
            word: vec![0.0; m * (n + 1)],
            prefix: vec![0.0; m * (n + 2)],
        }
    }

    pub fn words(&self) -> usize {
        self.n
    }

    pub fn units(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn arc_index(&self, p: usize, a: usize, u: UnitId) -> usize {
        (p * (self.n + 1) + a) * self.m + u
    }

    #[inline]
    pub fn arc(&self, p: usize, a: usize, u: UnitId) -> f64 {
        self.arc[self.arc_index(p, a, u)]
    }

    #[inline]
    pub fn trans(&self, u: UnitId, v: UnitId) -> f64 {
        self.trans[u * self.m + v]
    }

    #[inline]
    pub fn pattern(&self, u: UnitId, p: Pattern) -> f64 {
        self.pattern[u * NPAT + p.index()]
    }

    #[inline]
    pub fn word(&self, u: UnitId, t: usize) -> f64 {
        self.word[u * (self.n + 1) + t]
    }

    /// Sum of word potentials of `u` over tokens `l..=r`.
    #[inline]
    pub fn wsum(&self, u: UnitId, l: usize, r: usize) -> f64 {
        let base = u * (self.n + 2);
        self.prefix[base + r + 1] - self.prefix[base + l]
    }

    pub fn arc_mut(&mut self) -> &mut [f64] {
        &mut self.arc
    }

    pub fn trans_mut(&mut self) -> &mut [f64] {
        &mut self.trans
    }

    pub fn pattern_mut(&mut self) -> &mut [f64] {
        &mut self.pattern
    }

    /// Replaces the word potentials, laid out `[u * (n + 1) + t]`.
    pub fn set_words(&mut self, word: Vec<f64>) {
        assert_eq!(word.len(), self.word.len());
        self.word = word;
        for u in 0..self.m {
            let base = u * (self.n + 2);
            self.prefix[base] = 0.0;
            for t in 0..=self.n {
                self.prefix[base + t + 1] = self.prefix[base + t] + self.word[u * (self.n + 1) + t];
            }
        }
    }

    /// Sum of the potentials of every part of a laid-out tree, added up
    /// directly without the chart.
    pub fn tree_score(&self, nodes: &[TreeNode]) -> f64 {
        let mut total = 0.0;
        for node in nodes {
            total += self.arc(node.head, node.anchor, node.unit);
            total += self.pattern(node.unit, node.pattern);
            if let Some((l, r)) = node.owned() {
                for t in l..=r {
                    total += self.word(node.unit, t);
                }
            }
            for &c in &node.children {
                total += self.trans(node.unit, nodes[c].unit);
            }
        }
        total
    }

    /// Tree score accumulated in exactly the order the chart uses, so that a
    /// Viterbi derivation rescores to its chart value bit for bit.
    pub fn rescore(&self, nodes: &[TreeNode]) -> f64 {
        self.rescore_d(nodes, 0)
    }

    fn rescore_d(&self, nodes: &[TreeNode], i: usize) -> f64 {
        let node = &nodes[i];
        self.arc(node.head, node.anchor, node.unit) + self.rescore_u(nodes, i)
    }

    fn rescore_u(&self, nodes: &[TreeNode], i: usize) -> f64 {
        let node = &nodes[i];
        if node.pattern == Pattern::X {
            let c = &nodes[node.children[0]];
            return self.pattern(node.unit, Pattern::X)
                + self.trans(node.unit, c.unit)
                + self.arc(node.anchor, node.anchor, c.unit)
                + self.rescore_u(nodes, node.children[0]);
        }
        let (l, r) = node.owned().unwrap();
        let mut v = self.pattern(node.unit, node.pattern) + self.wsum(node.unit, l, r);
        let mut kids = node.children.clone();
        kids.sort_by_key(|&c| nodes[c].anchor);
        for c in kids {
            v += self.trans(node.unit, nodes[c].unit) + self.rescore_d(nodes, c);
        }
        v
    }
}

/// Chart labels with their units and admissible children.
#[derive(Clone, Debug)]
pub struct LabelSpace {
    unit: Vec<UnitId>,
    arity: Vec<usize>,
    allowed: Vec<Vec<Vec<usize>>>,
    roots: Vec<usize>,
}

impl LabelSpace {
    /// Labels are the nodes of `mr`; each argument admits exactly its child.
    pub fn clamped(mr: &IndexedMr, grammar: &SemanticGrammar) -> Self {
        let nodes = mr.nodes();
        LabelSpace {
            unit: nodes.iter().map(|n| n.unit).collect(),
            arity: nodes.iter().map(|n| grammar.unit(n.unit).arity()).collect(),
            allowed: nodes.iter().map(|n| n.children.iter().map(|&c| vec![c]).collect()).collect(),
            roots: vec![0],
        }
    }

    /// Labels are grammar units; arguments admit every type-compatible unit.
    pub fn unclamped(grammar: &SemanticGrammar) -> Self {
        let m = grammar.len();
        LabelSpace {
            unit: (0..m).collect(),
            arity: (0..m).map(|u| grammar.unit(u).arity()).collect(),
            allowed: (0..m)
                .map(|u| (0..grammar.unit(u).arity()).map(|k| grammar.allowed_children(u, k).to_vec()).collect())
                .collect(),
            roots: grammar.roots().to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.unit.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unit.is_empty()
    }

    pub fn unit(&self, lab: usize) -> UnitId {
        self.unit[lab]
    }
}

trait Semiring {
    fn plus(a: f64, b: f64) -> f64;
}

struct LogSum;
struct Max;

impl Semiring for LogSum {
    #[inline]
    fn plus(a: f64, b: f64) -> f64 {
        log_add(a, b)
    }
}

impl Semiring for Max {
    // Ties keep the earlier candidate.
    #[inline]
    fn plus(a: f64, b: f64) -> f64 {
        if b > a {
            b
        } else {
            a
        }
    }
}

#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == NEG_INFINITY {
        return b;
    }
    if b == NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Right,
    Left,
}

impl Direction {
    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Right => "right",
            Direction::Left => "left",
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Slot {
    dir: Direction,
    end: usize,
    arg: usize,
}

type Split = ((usize, usize), [Option<Slot>; 2]);

/// Owned words and child slots (left to right) of a non-self-loop pattern,
/// or `None` when the pattern does not fit.
#[inline]
fn split(pattern: Pattern, lo: usize, a: usize, hi: usize) -> Option<Split> {
    let left = |arg| Slot {
        dir: Direction::Left,
        end: lo,
        arg,
    };
    let right = |arg| Slot {
        dir: Direction::Right,
        end: hi,
        arg,
    };
    match pattern {
        Pattern::WW => Some(((lo, hi), [None, None])),
        Pattern::WX if a < hi => Some(((lo, a), [Some(right(0)), None])),
        Pattern::XW if lo < a => Some(((a, hi), [Some(left(0)), None])),
        Pattern::XY if lo < a && a < hi => Some(((a, a), [Some(left(0)), Some(right(1))])),
        Pattern::YX if lo < a && a < hi => Some(((a, a), [Some(left(1)), Some(right(0))])),
        _ => None,
    }
}

/// A labeled region cell: head, direction and the region it covers.
#[derive(Clone, Copy, Debug)]
struct Cell {
    dir: Direction,
    p: usize,
    lo: usize,
    hi: usize,
}

impl Cell {
    fn end(&self) -> usize {
        match self.dir {
            Direction::Right => self.hi,
            Direction::Left => self.lo,
        }
    }

    fn len(&self) -> usize {
        self.hi - self.lo + 1
    }
}

/// Log-marginal of one (cell, modifier, pattern, unit) choice.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanMarginal {
    pub head: usize,
    pub end: usize,
    pub modifier: usize,
    pub direction: Direction,
    pub pattern: Pattern,
    pub unit: UnitId,
    pub log_marginal: f64,
}

/// Expected counts of every chart-local event, laid out like
/// [`Potentials`].
#[derive(Clone, Debug, PartialEq)]
pub struct Marginals {
    pub log_z: f64,
    n: usize,
    m: usize,
    pub arc: Vec<f64>,
    pub trans: Vec<f64>,
    pub pattern: Vec<f64>,
    /// Expected ownership of token `t` by unit `u`, `[u * (n + 1) + t]`.
    pub word: Vec<f64>,
}

impl Marginals {
    pub fn zeros(n: usize, m: usize) -> Self {
        Marginals {
            log_z: NEG_INFINITY,
            n,
            m,
            arc: vec![0.0; (n + 1) * (n + 1) * m],
            trans: vec![0.0; m * m],
            pattern: vec![0.0; m * NPAT],
            word: vec![0.0; m * (n + 1)],
        }
    }

    pub fn words(&self) -> usize {
        self.n
    }

    pub fn units(&self) -> usize {
        self.m
    }

    pub fn arc(&self, p: usize, a: usize, u: UnitId) -> f64 {
        self.arc[(p * (self.n + 1) + a) * self.m + u]
    }

    pub fn trans(&self, u: UnitId, v: UnitId) -> f64 {
        self.trans[u * self.m + v]
    }

    pub fn pattern(&self, u: UnitId, p: Pattern) -> f64 {
        self.pattern[u * NPAT + p.index()]
    }

    pub fn word(&self, u: UnitId, t: usize) -> f64 {
        self.word[u * (self.n + 1) + t]
    }

    /// `self - other`, elementwise over the count tables.
    pub fn minus(&self, other: &Marginals) -> Marginals {
        let sub = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect();
        Marginals {
            log_z: self.log_z - other.log_z,
            n: self.n,
            m: self.m,
            arc: sub(&self.arc, &other.arc),
            trans: sub(&self.trans, &other.trans),
            pattern: sub(&self.pattern, &other.pattern),
            word: sub(&self.word, &other.word),
        }
    }

    /// Exact counts of a single laid-out tree.
    pub fn of_tree(nodes: &[TreeNode], n: usize, m: usize) -> Marginals {
        let mut out = Marginals::zeros(n, m);
        out.log_z = 0.0;
        for node in nodes {
            out.arc[(node.head * (n + 1) + node.anchor) * m + node.unit] += 1.0;
            out.pattern[node.unit * NPAT + node.pattern.index()] += 1.0;
            if let Some((l, r)) = node.owned() {
                for t in l..=r {
                    out.word[node.unit * (n + 1) + t] += 1.0;
                }
            }
            for &c in &node.children {
                out.trans[node.unit * m + nodes[c].unit] += 1.0;
            }
        }
        out
    }
}

/// Best derivation found by [`viterbi`].
#[derive(Clone, Debug, PartialEq)]
pub struct Derivation {
    pub tree: HybridTree,
    pub mr: IndexedMr,
    pub score: f64,
}

struct Tables {
    d: Vec<f64>,
    c: Vec<f64>,
}

/// Inside chart of one sentence under one label space.
pub struct Chart<'a> {
    pot: &'a Potentials,
    space: &'a LabelSpace,
    cap: usize,
    n: usize,
    l: usize,
    inside: Tables,
    log_z: f64,
}

impl<'a> Chart<'a> {
    /// Runs the inside pass with depth cap `cap`.
    pub fn inside(pot: &'a Potentials, space: &'a LabelSpace, cap: usize) -> Self {
        let mut chart = Chart {
            pot,
            space,
            cap,
            n: pot.words(),
            l: space.len(),
            inside: Tables { d: Vec::new(), c: Vec::new() },
            log_z: NEG_INFINITY,
        };
        chart.inside = chart.fill::<LogSum>();
        chart.log_z = chart.goal::<LogSum>(&chart.inside);
        chart
    }

    /// `log Z`, or `-inf` when nothing derives the sentence.
    pub fn log_z(&self) -> f64 {
        self.log_z
    }

    pub fn partition(&self) -> Result<f64, ChartError> {
        if self.log_z == NEG_INFINITY {
            Err(ChartError::NoDerivation)
        } else {
            Ok(self.log_z)
        }
    }

    /// Number of stored complete-span cells.
    pub fn cell_count(&self) -> usize {
        self.inside.d.len() + self.inside.c.len()
    }

    #[inline]
    fn d_idx(&self, dir: Direction, p: usize, e: usize, lab: usize, h: usize) -> usize {
        let n1 = self.n + 1;
        (((dir.index() * n1 + p) * n1 + e) * self.l + lab) * (self.cap + 1) + h
    }

    #[inline]
    fn c_idx(&self, dir: Direction, p: usize, e: usize, lab: usize, k: usize, h: usize) -> usize {
        let n1 = self.n + 1;
        ((((dir.index() * n1 + p) * n1 + e) * self.l + lab) * 2 + k) * (self.cap + 1) + h
    }

    #[inline]
    fn u_idx(&self, cell: &Cell, h: usize, a: usize, lab: usize) -> usize {
        (h * cell.len() + (a - cell.lo)) * self.l + lab
    }

    /// Cells in bottom-up order: by region length, then direction, then
    /// head. The root cell comes last.
    fn cells(&self) -> Vec<Cell> {
        let n = self.n;
        let mut out = Vec::new();
        for len in 1..=n {
            for dir in [Direction::Right, Direction::Left] {
                for p in 1..=n {
                    match dir {
                        Direction::Right if p + len <= n => out.push(Cell {
                            dir,
                            p,
                            lo: p + 1,
                            hi: p + len,
                        }),
                        Direction::Left if p > len => out.push(Cell {
                            dir,
                            p,
                            lo: p - len,
                            hi: p - 1,
                        }),
                        _ => {}
                    }
                }
            }
        }
        out.push(self.root_cell());
        out
    }

    fn root_cell(&self) -> Cell {
        Cell {
            dir: Direction::Right,
            p: 0,
            lo: 1,
            hi: self.n,
        }
    }

    fn fill<S: Semiring>(&self) -> Tables {
        let n1 = self.n + 1;
        let size = 2 * n1 * n1 * self.l * (self.cap + 1);
        let mut t = Tables {
            d: vec![NEG_INFINITY; size],
            c: vec![NEG_INFINITY; size * 2],
        };
        for cell in self.cells() {
            let u = self.arc_spans::<S>(&t, &cell, self.cap);
            self.close_cell::<S>(&mut t, &cell, &u);
        }
        t
    }

    fn goal<S: Semiring>(&self, t: &Tables) -> f64 {
        let mut z = NEG_INFINITY;
        for &lab in &self.space.roots {
            z = S::plus(z, t.d[self.d_idx(Direction::Right, 0, self.n, lab, self.cap)]);
        }
        z
    }

    /// Value of a non-self-loop pattern for modifier `a` whose children have
    /// height at most `h`.
    #[inline]
    fn pattern_value(&self, t: &Tables, cell: &Cell, a: usize, lab: usize, pattern: Pattern, h: usize) -> f64 {
        let Some(((l, r), slots)) = split(pattern, cell.lo, a, cell.hi) else {
            return NEG_INFINITY;
        };
        let u = self.space.unit[lab];
        let mut v = self.pot.pattern(u, pattern) + self.pot.wsum(u, l, r);
        for slot in slots.iter().flatten() {
            v += t.c[self.c_idx(slot.dir, a, slot.end, lab, slot.arg, h)];
        }
        v
    }

    #[inline]
    fn self_loop_value(&self, u: UnitId, child: usize, a: usize, below: f64) -> f64 {
        let v = self.space.unit[child];
        self.pot.pattern(u, Pattern::X) + self.pot.trans(u, v) + self.pot.arc(a, a, v) + below
    }

    /// Arc-span values `U[h][a][lab]` of one cell for heights `1..=hmax`.
    fn arc_spans<S: Semiring>(&self, t: &Tables, cell: &Cell, hmax: usize) -> Vec<f64> {
        let mut u = vec![NEG_INFINITY; (hmax + 1) * cell.len() * self.l];
        for h in 1..=hmax {
            for a in cell.lo..=cell.hi {
                for lab in 0..self.l {
                    let unit = self.space.unit[lab];
                    let mut acc = NEG_INFINITY;
                    for &pattern in patterns_for(self.space.arity[lab]) {
                        let v = if pattern == Pattern::X {
                            let mut x = NEG_INFINITY;
                            for &child in &self.space.allowed[lab][0] {
                                let below = u[self.u_idx(cell, h - 1, a, child)];
                                if below > NEG_INFINITY {
                                    x = S::plus(x, self.self_loop_value(unit, child, a, below));
                                }
                            }
                            x
                        } else {
                            self.pattern_value(t, cell, a, lab, pattern, h - 1)
                        };
                        acc = S::plus(acc, v);
                    }
                    let i = self.u_idx(cell, h, a, lab);
                    u[i] = acc;
                }
            }
        }
        u
    }

    fn close_cell<S: Semiring>(&self, t: &mut Tables, cell: &Cell, u: &[f64]) {
        let e = cell.end();
        for h in 1..=self.cap {
            for lab in 0..self.l {
                let unit = self.space.unit[lab];
                let mut acc = NEG_INFINITY;
                for a in cell.lo..=cell.hi {
                    let below = u[self.u_idx(cell, h, a, lab)];
                    if below > NEG_INFINITY {
                        acc = S::plus(acc, self.pot.arc(cell.p, a, unit) + below);
                    }
                }
                let i = self.d_idx(cell.dir, cell.p, e, lab, h);
                t.d[i] = acc;
            }
            if cell.p == 0 {
                continue;
            }
            for lab in 0..self.l {
                let unit = self.space.unit[lab];
                for k in 0..self.space.arity[lab] {
                    let mut acc = NEG_INFINITY;
                    for &child in &self.space.allowed[lab][k] {
                        let d = t.d[self.d_idx(cell.dir, cell.p, e, child, h)];
                        if d > NEG_INFINITY {
                            acc = S::plus(acc, self.pot.trans(unit, self.space.unit[child]) + d);
                        }
                    }
                    let i = self.c_idx(cell.dir, cell.p, e, lab, k, h);
                    t.c[i] = acc;
                }
            }
        }
    }

    /// Outside pass: expected counts of every local event.
    pub fn marginals(&self) -> Marginals {
        self.outside(None)
    }

    /// Marginals plus the log-marginal of every (cell, modifier, pattern,
    /// unit) choice with non-zero mass.
    pub fn marginals_with_spans(&self) -> (Marginals, Vec<SpanMarginal>) {
        let mut spans = Vec::new();
        let marginals = self.outside(Some(&mut spans));
        (marginals, spans)
    }

    fn outside(&self, mut spans: Option<&mut Vec<SpanMarginal>>) -> Marginals {
        let (n, m) = (self.n, self.pot.units());
        let mut out = Marginals::zeros(n, m);
        out.log_z = self.log_z;
        if self.log_z == NEG_INFINITY {
            return out;
        }
        let z = self.log_z;
        let t = &self.inside;
        let mut dout = vec![NEG_INFINITY; t.d.len()];
        let mut cout = vec![NEG_INFINITY; t.c.len()];
        // Word ownership is accumulated as interval differences.
        let mut word_diff = vec![0.0; m * (n + 2)];
        for &lab in &self.space.roots {
            dout[self.d_idx(Direction::Right, 0, n, lab, self.cap)] = 0.0;
        }

        for cell in self.cells().into_iter().rev() {
            let e = cell.end();
            if cell.p != 0 {
                for h in 1..=self.cap {
                    for lab in 0..self.l {
                        let unit = self.space.unit[lab];
                        for k in 0..self.space.arity[lab] {
                            let co = cout[self.c_idx(cell.dir, cell.p, e, lab, k, h)];
                            if co == NEG_INFINITY {
                                continue;
                            }
                            for &child in &self.space.allowed[lab][k] {
                                let di = self.d_idx(cell.dir, cell.p, e, child, h);
                                let v = self.space.unit[child];
                                let tr = self.pot.trans(unit, v);
                                dout[di] = log_add(dout[di], co + tr);
                                out.trans[unit * m + v] += (co + tr + t.d[di] - z).exp();
                            }
                        }
                    }
                }
            }

            let len = cell.len();
            let uin = self.arc_spans::<LogSum>(t, &cell, self.cap);
            let mut uout = vec![NEG_INFINITY; uin.len()];
            let mut local = spans.as_ref().map(|_| vec![NEG_INFINITY; len * self.l * NPAT]);
            for h in 1..=self.cap {
                for lab in 0..self.l {
                    let unit = self.space.unit[lab];
                    let d_out = dout[self.d_idx(cell.dir, cell.p, e, lab, h)];
                    if d_out == NEG_INFINITY {
                        continue;
                    }
                    for a in cell.lo..=cell.hi {
                        let ui = self.u_idx(&cell, h, a, lab);
                        if uin[ui] == NEG_INFINITY {
                            continue;
                        }
                        let arc = self.pot.arc(cell.p, a, unit);
                        uout[ui] = d_out + arc;
                        out.arc[self.pot.arc_index(cell.p, a, unit)] += (d_out + arc + uin[ui] - z).exp();
                    }
                }
            }

            for h in (1..=self.cap).rev() {
                for a in cell.lo..=cell.hi {
                    for lab in 0..self.l {
                        let uo = uout[self.u_idx(&cell, h, a, lab)];
                        if uo == NEG_INFINITY {
                            continue;
                        }
                        let unit = self.space.unit[lab];
                        for &pattern in patterns_for(self.space.arity[lab]) {
                            if pattern == Pattern::X {
                                let px = self.pot.pattern(unit, Pattern::X);
                                for &child in &self.space.allowed[lab][0] {
                                    let bi = self.u_idx(&cell, h - 1, a, child);
                                    if uin[bi] == NEG_INFINITY {
                                        continue;
                                    }
                                    let v = self.space.unit[child];
                                    let step = px + self.pot.trans(unit, v) + self.pot.arc(a, a, v);
                                    uout[bi] = log_add(uout[bi], uo + step);
                                    let lm = uo + step + uin[bi] - z;
                                    let mu = lm.exp();
                                    out.pattern[unit * NPAT + Pattern::X.index()] += mu;
                                    out.trans[unit * m + v] += mu;
                                    out.arc[self.pot.arc_index(a, a, v)] += mu;
                                    if let Some(local) = local.as_mut() {
                                        let li = ((a - cell.lo) * self.l + lab) * NPAT + Pattern::X.index();
                                        local[li] = log_add(local[li], lm);
                                    }
                                }
                                continue;
                            }
                            let Some(((l, r), slots)) = split(pattern, cell.lo, a, cell.hi) else {
                                continue;
                            };
                            let base = self.pot.pattern(unit, pattern) + self.pot.wsum(unit, l, r);
                            let cin: Vec<(usize, f64)> = slots
                                .iter()
                                .flatten()
                                .map(|s| {
                                    let ci = self.c_idx(s.dir, a, s.end, lab, s.arg, h - 1);
                                    (ci, t.c[ci])
                                })
                                .collect();
                            let mut total = base;
                            for &(_, v) in &cin {
                                total += v;
                            }
                            if total == NEG_INFINITY {
                                continue;
                            }
                            let lm = uo + total - z;
                            let mu = lm.exp();
                            out.pattern[unit * NPAT + pattern.index()] += mu;
                            word_diff[unit * (n + 2) + l] += mu;
                            word_diff[unit * (n + 2) + r + 1] -= mu;
                            for (x, &(ci, _)) in cin.iter().enumerate() {
                                let mut rest = uo + base;
                                for (y, &(_, v)) in cin.iter().enumerate() {
                                    if y != x {
                                        rest += v;
                                    }
                                }
                                cout[ci] = log_add(cout[ci], rest);
                            }
                            if let Some(local) = local.as_mut() {
                                let li = ((a - cell.lo) * self.l + lab) * NPAT + pattern.index();
                                local[li] = log_add(local[li], lm);
                            }
                        }
                    }
                }
            }

            if let (Some(spans), Some(local)) = (spans.as_deref_mut(), local) {
                for a in cell.lo..=cell.hi {
                    for lab in 0..self.l {
                        for pattern in Pattern::ALL {
                            let lm = local[((a - cell.lo) * self.l + lab) * NPAT + pattern.index()];
                            if lm > NEG_INFINITY {
                                spans.push(SpanMarginal {
                                    head: cell.p,
                                    end: e,
                                    modifier: a,
                                    direction: cell.dir,
                                    pattern,
                                    unit: self.space.unit[lab],
                                    log_marginal: lm,
                                });
                            }
                        }
                    }
                }
            }
        }

        for u in 0..m {
            let mut run = 0.0;
            for tkn in 0..=n {
                run += word_diff[u * (n + 2) + tkn];
                out.word[u * (n + 1) + tkn] = run;
            }
        }
        out
    }
}

/// Highest-scoring derivation under `space`. Ties go to the smaller label,
/// then the smaller modifier position, then the earlier pattern.
pub fn viterbi(pot: &Potentials, space: &LabelSpace, cap: usize) -> Result<Derivation, ChartError> {
    let mut chart = Chart {
        pot,
        space,
        cap,
        n: pot.words(),
        l: space.len(),
        inside: Tables { d: Vec::new(), c: Vec::new() },
        log_z: NEG_INFINITY,
    };
    chart.inside = chart.fill::<Max>();
    let t = &chart.inside;
    let mut best: Option<(usize, f64)> = None;
    for &lab in &space.roots {
        let v = t.d[chart.d_idx(Direction::Right, 0, chart.n, lab, cap)];
        if v > NEG_INFINITY && best.is_none_or(|(_, b)| v > b) {
            best = Some((lab, v));
        }
    }
    let (lab, score) = best.ok_or(ChartError::NoDerivation)?;
    let mut trace = Trace {
        chart: &chart,
        arcs: Vec::new(),
        parts: Vec::new(),
    };
    let root_cell = chart.root_cell();
    trace.d(&root_cell, lab, cap);
    let tree = HybridTree::new(trace.arcs);
    let mr = IndexedMr::from_parts(0, &trace.parts);
    Ok(Derivation { tree, mr, score })
}

struct Trace<'c, 'a> {
    chart: &'c Chart<'a>,
    arcs: Vec<Arc>,
    parts: Vec<(UnitId, Vec<usize>)>,
}

impl Trace<'_, '_> {
    /// Follows `D(cell, lab, h)`; returns the MR node index it produced.
    fn d(&mut self, cell: &Cell, lab: usize, h: usize) -> usize {
        let ch = self.chart;
        let u = ch.arc_spans::<Max>(&ch.inside, cell, h);
        let unit = ch.space.unit[lab];
        let mut best: Option<(usize, f64)> = None;
        for a in cell.lo..=cell.hi {
            let below = u[ch.u_idx(cell, h, a, lab)];
            if below == NEG_INFINITY {
                continue;
            }
            let v = ch.pot.arc(cell.p, a, unit) + below;
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((a, v));
            }
        }
        let (a, _) = best.expect("backtrace reached an empty cell");
        self.u(cell, &u, a, lab, h, cell.p, 0)
    }

    #[allow(clippy::too_many_arguments)]
    fn u(&mut self, cell: &Cell, u: &[f64], a: usize, lab: usize, h: usize, head: usize, loop_depth: usize) -> usize {
        let ch = self.chart;
        let unit = ch.space.unit[lab];
        let mut best: Option<(Pattern, usize, f64)> = None;
        for &pattern in patterns_for(ch.space.arity[lab]) {
            if pattern == Pattern::X {
                for &child in &ch.space.allowed[lab][0] {
                    let below = u[ch.u_idx(cell, h - 1, a, child)];
                    if below == NEG_INFINITY {
                        continue;
                    }
                    let v = ch.self_loop_value(unit, child, a, below);
                    if best.is_none_or(|(_, _, b)| v > b) {
                        best = Some((pattern, child, v));
                    }
                }
            } else {
                let v = ch.pattern_value(&ch.inside, cell, a, lab, pattern, h - 1);
                if v > NEG_INFINITY && best.is_none_or(|(_, _, b)| v > b) {
                    best = Some((pattern, 0, v));
                }
            }
        }
        let (pattern, loop_child, _) = best.expect("backtrace reached an empty arc span");
        self.arcs.push(Arc {
            parent: head,
            child: a,
            unit,
            pattern,
            loop_depth,
        });
        let me = self.parts.len();
        self.parts.push((unit, vec![usize::MAX; ch.space.arity[lab]]));
        if pattern == Pattern::X {
            let c = self.u(cell, u, a, loop_child, h - 1, a, loop_depth + 1);
            self.parts[me].1[0] = c;
            return me;
        }
        let (_, slots) = split(pattern, cell.lo, a, cell.hi).unwrap();
        for slot in slots.iter().flatten() {
            let child_cell = match slot.dir {
                Direction::Right => Cell {
                    dir: slot.dir,
                    p: a,
                    lo: a + 1,
                    hi: slot.end,
                },
                Direction::Left => Cell {
                    dir: slot.dir,
                    p: a,
                    lo: slot.end,
                    hi: a - 1,
                },
            };
            let e = child_cell.end();
            let mut pick: Option<(usize, f64)> = None;
            for &child in &ch.space.allowed[lab][slot.arg] {
                let d = ch.inside.d[ch.d_idx(slot.dir, a, e, child, h - 1)];
                if d == NEG_INFINITY {
                    continue;
                }
                let v = ch.pot.trans(unit, ch.space.unit[child]) + d;
                if pick.is_none_or(|(_, b)| v > b) {
                    pick = Some((child, v));
                }
            }
            let (child, _) = pick.expect("backtrace reached an empty argument");
            let c = self.d(&child_cell, child, h - 1);
            self.parts[me].1[slot.arg] = c;
        }
        me
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funql::{build_grammar, parse_mr, SemanticType, SignatureTable};
    use crate::hybridtree::{enumerate_trees, Sentence};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randomize(pot: &mut Potentials, rng: &mut ChaCha8Rng) {
        for x in pot.arc_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
        for x in pot.trans_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
        for x in pot.pattern_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
        let words = (0..pot.units() * (pot.words() + 1)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        pot.set_words(words);
    }

    fn setup(text: &str, sigs: &str, root: &str) -> (SemanticGrammar, IndexedMr) {
        let table = SignatureTable::parse(sigs).unwrap();
        let mr = parse_mr(text, &table).unwrap();
        let g = build_grammar(std::slice::from_ref(&mr), SemanticType::new(root).unwrap()).unwrap();
        let indexed = IndexedMr::new(&mr, &g).unwrap();
        (g, indexed)
    }

    #[test]
    fn single_leaf_has_zero_log_z() {
        let (g, mr) = setup("river(all)", "river(all)\tRIVER\n", "RIVER");
        let pot = Potentials::zeros(1, g.len());
        let space = LabelSpace::clamped(&mr, &g);
        let chart = Chart::inside(&pot, &space, 1);
        assert_eq!(chart.log_z(), 0.0);
        let space = LabelSpace::unclamped(&g);
        assert_eq!(Chart::inside(&pot, &space, 1).log_z(), 0.0);
        let best = viterbi(&pot, &space, 1).unwrap();
        assert_eq!(best.score, 0.0);
        assert_eq!(best.mr, mr);
    }

    #[test]
    fn unreachable_is_no_derivation() {
        let (g, mr) = setup("answer(river(all))", "answer\tQUERY\tRIVER\nriver(all)\tRIVER\n", "QUERY");
        let pot = Potentials::zeros(2, g.len());
        let space = LabelSpace::clamped(&mr, &g);
        let chart = Chart::inside(&pot, &space, 1);
        assert_eq!(chart.partition(), Err(ChartError::NoDerivation));
        assert_eq!(viterbi(&pot, &space, 1), Err(ChartError::NoDerivation));
        let marg = chart.marginals();
        assert!(marg.arc.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn two_words_count_four_trees() {
        let (g, mr) = setup("answer(river(all))", "answer\tQUERY\tRIVER\nriver(all)\tRIVER\n", "QUERY");
        let pot = Potentials::zeros(2, g.len());
        let space = LabelSpace::clamped(&mr, &g);
        let z = Chart::inside(&pot, &space, 2).log_z();
        assert!((z - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn clamped_matches_enumeration_on_river_example() {
        let sigs = "answer\tQUERY\tRIVER\nexclude\tRIVER\tRIVER,RIVER\nriver(all)\tRIVER\n\
                    traverse\tRIVER\tSTATE\nstateid\tSTATE\tSTATENAME\n";
        let (g, mr) = setup("answer(exclude(river(all), traverse(stateid('tn'))))", sigs, "QUERY");
        let s = Sentence::from_text("what rivers do not run through tn ?").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pot = Potentials::zeros(s.len(), g.len());
        randomize(&mut pot, &mut rng);
        let arity = |u: UnitId| g.unit(u).arity();
        let trees = enumerate_trees(&s, &mr, arity, 6, 10, 10_000_000).unwrap();
        let mut z = NEG_INFINITY;
        for tree in &trees {
            let nodes = tree.layout(s.len(), arity).unwrap();
            z = log_add(z, pot.tree_score(&nodes));
        }
        let space = LabelSpace::clamped(&mr, &g);
        let chart = Chart::inside(&pot, &space, 6);
        assert!((chart.log_z() - z).abs() < 1e-8, "{} vs {z}", chart.log_z());

        let best = viterbi(&pot, &space, 6).unwrap();
        let nodes = best.tree.layout(s.len(), arity).unwrap();
        assert_eq!(pot.rescore(&nodes), best.score);
        assert!((pot.tree_score(&nodes) - best.score).abs() < 1e-9);
        assert_eq!(best.mr, mr);
        assert!(best.score <= chart.log_z());
    }

    #[test]
    fn marginal_bookkeeping() {
        let sigs = "answer\tQUERY\tRIVER\nexclude\tRIVER\tRIVER,RIVER\nriver(all)\tRIVER\n";
        let (g, _) = setup("answer(exclude(river(all), river(all)))", sigs, "QUERY");
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut pot = Potentials::zeros(4, g.len());
        randomize(&mut pot, &mut rng);
        let space = LabelSpace::unclamped(&g);
        let chart = Chart::inside(&pot, &space, 3);
        let (marg, spans) = chart.marginals_with_spans();
        let root_mass: f64 = (1..=4).flat_map(|a| (0..g.len()).map(move |u| (a, u))).map(|(a, u)| marg.arc(0, a, u)).sum();
        assert!((root_mass - 1.0).abs() < 1e-10);
        for u in 0..g.len() {
            let arcs: f64 = (0..=4).flat_map(|p| (1..=4).map(move |a| (p, a))).map(|(p, a)| marg.arc(p, a, u)).sum();
            let pats: f64 = Pattern::ALL.iter().map(|&p| marg.pattern(u, p)).sum();
            assert!((arcs - pats).abs() < 1e-10);
        }
        // every word is owned exactly once
        for t in 1..=4 {
            let owned: f64 = (0..g.len()).map(|u| marg.word(u, t)).sum();
            assert!((owned - 1.0).abs() < 1e-10);
        }
        assert!(!spans.is_empty());
        for s in &spans {
            assert!(s.log_marginal <= 1e-12);
        }
        let root_spans: f64 = spans.iter().filter(|s| s.head == 0).map(|s| s.log_marginal.exp()).sum();
        assert!(root_spans >= 1.0 - 1e-10);
    }

    #[test]
    fn log_z_grows_with_cap() {
        let sigs = "answer\tQUERY\tRIVER\nexclude\tRIVER\tRIVER,RIVER\nriver(all)\tRIVER\ntraverse\tRIVER\tRIVER\n";
        let (g, _) = setup("answer(exclude(river(all), traverse(river(all))))", sigs, "QUERY");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pot = Potentials::zeros(3, g.len());
        randomize(&mut pot, &mut rng);
        let space = LabelSpace::unclamped(&g);
        let mut prev = NEG_INFINITY;
        for cap in 1..6 {
            let z = Chart::inside(&pot, &space, cap).log_z();
            assert!(z >= prev);
            prev = z;
        }
    }
}
