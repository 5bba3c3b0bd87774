//! Variable-free FunQL meaning representations.
//!
//! A meaning representation is a tree of typed semantic units
//! `RET : function(ARG*)` with at most two arguments. Quoted literals such as
//! `'tn'` become arity-0 constant units whose return type is taken from the
//! argument slot they fill. Bare atoms inside an argument list (`all`, `_`)
//! are folded into the function symbol, so `river(all)` is a single arity-0
//! unit with symbol `river(all)`.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

/// Dense index of a unit inside a [`SemanticGrammar`].
pub type UnitId = usize;

/// Longest argument list a semantic unit may carry.
pub const MAX_ARITY: usize = 2;

#[derive(Debug, Error)]
pub enum FunqlError {
    #[error("syntax error at byte {position}: {message}")]
    Syntax { position: usize, message: String },

    #[error("type error: {0}")]
    Type(String),

    #[error("ambiguous symbol `{0}`: several signatures match")]
    Ambiguous(String),

    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("invalid signature on line {line}: {message}")]
    InvalidSignature { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Symbolic semantic type such as `RIVER` or `STATENAME`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SemanticType(String);

impl SemanticType {
    pub fn new(name: impl Into<String>) -> Result<Self, FunqlError> {
        let name = name.into();
        if name.is_empty() || name.contains(|c: char| c.is_whitespace() || c == '|' || c == ',') {
            return Err(FunqlError::Type(format!("invalid type name `{name}`")));
        }
        Ok(SemanticType(name))
    }

    pub fn name(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SemanticType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One typed function node `return_type : function(arg_types*)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SemanticUnit {
    return_type: SemanticType,
    function: String,
    arg_types: Vec<SemanticType>,
}

impl SemanticUnit {
    pub fn new(
        return_type: SemanticType,
        function: impl Into<String>,
        arg_types: Vec<SemanticType>,
    ) -> Result<Self, FunqlError> {
        let function = function.into();
        if arg_types.len() > MAX_ARITY {
            return Err(FunqlError::Type(format!(
                "`{function}` has arity {}, at most {MAX_ARITY} is supported",
                arg_types.len()
            )));
        }
        if function.is_empty() || function.contains(['|', '\t', '\n']) {
            return Err(FunqlError::Type(format!("invalid function symbol `{function}`")));
        }
        Ok(SemanticUnit {
            return_type,
            function,
            arg_types,
        })
    }

    pub fn return_type(&self) -> &SemanticType {
        &self.return_type
    }

    pub fn function(&self) -> &str {
        &self.function
    }

    pub fn arg_types(&self) -> &[SemanticType] {
        &self.arg_types
    }

    pub fn arity(&self) -> usize {
        self.arg_types.len()
    }

    /// True for units created from a quoted literal.
    pub fn is_constant(&self) -> bool {
        self.function.starts_with('\'')
    }
}

impl fmt::Display for SemanticUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.return_type, self.function)?;
        if !self.arg_types.is_empty() {
            let args: Vec<&str> = self.arg_types.iter().map(|t| t.name()).collect();
            write!(f, "({})", args.join(","))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MrNode {
    pub unit: SemanticUnit,
    pub children: Vec<MrNode>,
}

impl MrNode {
    pub fn leaf(unit: SemanticUnit) -> Self {
        MrNode {
            unit,
            children: Vec::new(),
        }
    }

    fn check(&self) -> Result<(), FunqlError> {
        if self.children.len() != self.unit.arity() {
            return Err(FunqlError::Type(format!(
                "`{}` expects {} arguments, found {}",
                self.unit,
                self.unit.arity(),
                self.children.len()
            )));
        }
        for (child, expected) in self.children.iter().zip(self.unit.arg_types()) {
            if child.unit.return_type() != expected {
                return Err(FunqlError::Type(format!(
                    "argument of `{}` must be {expected}, found {}",
                    self.unit,
                    child.unit.return_type()
                )));
            }
            child.check()?;
        }
        Ok(())
    }

    fn depth(&self) -> usize {
        1 + self.children.iter().map(MrNode::depth).max().unwrap_or(0)
    }

    fn visit<'a>(&'a self, out: &mut Vec<&'a MrNode>) {
        out.push(self);
        for child in &self.children {
            child.visit(out);
        }
    }
}

/// A type-correct tree of semantic units.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MeaningRepresentation {
    root: MrNode,
}

impl MeaningRepresentation {
    pub fn new(root: MrNode) -> Result<Self, FunqlError> {
        root.check()?;
        Ok(MeaningRepresentation { root })
    }

    pub fn root(&self) -> &MrNode {
        &self.root
    }

    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    /// Nodes in preorder.
    pub fn nodes(&self) -> Vec<&MrNode> {
        let mut out = Vec::new();
        self.root.visit(&mut out);
        out
    }

    pub fn node_count(&self) -> usize {
        self.nodes().len()
    }
}

impl fmt::Display for MeaningRepresentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_mr(self))
    }
}

/// Return and argument types declared for one function symbol.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Signature {
    pub return_type: SemanticType,
    pub arg_types: Vec<SemanticType>,
}

/// Function symbol → candidate signatures.
///
/// A symbol may carry several signatures (`answer` over rivers or over
/// states); the argument types found bottom-up pick the right one.
#[derive(Clone, Debug, Default)]
pub struct SignatureTable {
    entries: HashMap<String, Vec<Signature>>,
}

impl SignatureTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses `function<TAB>return_type<TAB>arg_type[,arg_type]` lines.
    /// Blank lines and `#` comments are skipped; the argument column may be
    /// empty or absent for arity-0 symbols.
    pub fn parse(text: &str) -> Result<Self, FunqlError> {
        let mut table = SignatureTable::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let invalid = |message: String| FunqlError::InvalidSignature {
                line: lineno + 1,
                message,
            };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 2 || cols.len() > 3 {
                return Err(invalid(format!("expected 2 or 3 tab-separated columns, found {}", cols.len())));
            }
            let return_type = SemanticType::new(cols[1].trim()).map_err(|e| invalid(e.to_string()))?;
            let arg_types = match cols.get(2).map(|s| s.trim()) {
                None | Some("") => Vec::new(),
                Some(args) => args
                    .split(',')
                    .map(|a| SemanticType::new(a.trim()))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| invalid(e.to_string()))?,
            };
            table
                .insert(cols[0].trim(), return_type, arg_types)
                .map_err(|e| invalid(e.to_string()))?;
        }
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FunqlError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn insert(
        &mut self,
        symbol: &str,
        return_type: SemanticType,
        arg_types: Vec<SemanticType>,
    ) -> Result<(), FunqlError> {
        let key = normalize_key(symbol);
        let slots = template_slots(&key);
        if let Some(slots) = slots {
            if slots != arg_types.len() {
                return Err(FunqlError::Type(format!(
                    "template `{key}` has {slots} slots but {} argument types",
                    arg_types.len()
                )));
            }
        }
        // Validates the symbol and the arity bound.
        SemanticUnit::new(return_type.clone(), key.clone(), arg_types.clone())?;
        let sig = Signature {
            return_type,
            arg_types,
        };
        let entry = self.entries.entry(key).or_default();
        if !entry.contains(&sig) {
            entry.push(sig);
        }
        Ok(())
    }

    pub fn candidates(&self, symbol: &str) -> Option<&[Signature]> {
        self.entries.get(symbol).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn normalize_key(symbol: &str) -> String {
    symbol.chars().filter(|c| !c.is_whitespace()).collect()
}

/// Number of `*` slots in a template key such as `cityid(*,_)`, or `None`
/// for a plain symbol.
fn template_slots(key: &str) -> Option<usize> {
    let open = key.find('(')?;
    let inner = key[open + 1..].strip_suffix(')')?;
    Some(inner.split(',').filter(|p| *p == "*").count())
}

#[derive(Debug)]
enum Raw {
    Call { name: String, args: Vec<Raw> },
    Atom { name: String },
    Literal { text: String },
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T, FunqlError> {
        Err(FunqlError::Syntax {
            position: self.pos,
            message: message.into(),
        })
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if !c.is_whitespace() {
                break;
            }
            self.pos += c.len_utf8();
        }
    }

    fn expr(&mut self) -> Result<Raw, FunqlError> {
        self.skip_ws();
        let start = self.pos;
        match self.peek() {
            None => self.err("unexpected end of input"),
            Some('\'') => {
                self.pos += 1;
                let Some(len) = self.src[self.pos..].find('\'') else {
                    self.pos = start;
                    return self.err("unterminated literal");
                };
                let body = &self.src[self.pos..self.pos + len];
                if body.is_empty() || body.contains(['|', '\t', '\n']) {
                    self.pos = start;
                    return self.err("empty literal or literal with reserved character");
                }
                self.pos += len + 1;
                Ok(Raw::Literal {
                    text: format!("'{body}'"),
                })
            }
            Some(c) if c == '(' || c == ')' || c == ',' => self.err(format!("unexpected `{c}`")),
            Some(_) => {
                while let Some(c) = self.peek() {
                    if c.is_whitespace() || matches!(c, '(' | ')' | ',' | '\'' | '|') {
                        break;
                    }
                    self.pos += c.len_utf8();
                }
                if self.pos == start {
                    return self.err("expected a symbol");
                }
                let name = self.src[start..self.pos].to_string();
                self.skip_ws();
                if self.peek() != Some('(') {
                    return Ok(Raw::Atom { name });
                }
                self.pos += 1;
                let mut args = vec![self.expr()?];
                loop {
                    self.skip_ws();
                    match self.peek() {
                        Some(',') => {
                            self.pos += 1;
                            args.push(self.expr()?);
                        }
                        Some(')') => {
                            self.pos += 1;
                            break;
                        }
                        Some(c) => return self.err(format!("expected `,` or `)`, found `{c}`")),
                        None => return self.err("unbalanced parentheses"),
                    }
                }
                Ok(Raw::Call { name, args })
            }
        }
    }
}

/// Parses FunQL text into a type-correct meaning representation.
pub fn parse_mr(text: &str, table: &SignatureTable) -> Result<MeaningRepresentation, FunqlError> {
    let mut lexer = Lexer { src: text, pos: 0 };
    let raw = lexer.expr()?;
    lexer.skip_ws();
    if lexer.pos != text.len() {
        return lexer.err("trailing input");
    }
    let root = type_raw(&raw, table, None)?;
    MeaningRepresentation::new(root)
}

fn type_raw(raw: &Raw, table: &SignatureTable, expected: Option<&SemanticType>) -> Result<MrNode, FunqlError> {
    match raw {
        Raw::Literal { text, .. } => match expected {
            Some(ty) => Ok(MrNode::leaf(SemanticUnit::new(ty.clone(), text.clone(), Vec::new())?)),
            None => Err(FunqlError::Type(format!("literal {text} has no argument slot to take its type from"))),
        },
        Raw::Atom { name, .. } => {
            let sig = pick_signature(name, table, 0, &[], expected)?;
            Ok(MrNode::leaf(SemanticUnit::new(sig.return_type.clone(), name.clone(), Vec::new())?))
        }
        Raw::Call { name, args, .. } => {
            let has_atoms = args.iter().any(|a| matches!(a, Raw::Atom { .. }));
            let key = if has_atoms {
                let parts: Vec<&str> = args
                    .iter()
                    .map(|a| match a {
                        Raw::Atom { name, .. } => name.as_str(),
                        _ => "*",
                    })
                    .collect();
                format!("{name}({})", parts.join(","))
            } else {
                name.clone()
            };
            let slots: Vec<&Raw> = args.iter().filter(|a| !matches!(a, Raw::Atom { .. })).collect();

            // Type call arguments bottom-up; ambiguous ones wait for the
            // parent's signature to disambiguate them.
            let mut typed: Vec<Option<MrNode>> = Vec::with_capacity(slots.len());
            for slot in &slots {
                match slot {
                    Raw::Call { .. } => match type_raw(slot, table, None) {
                        Ok(node) => typed.push(Some(node)),
                        Err(FunqlError::Ambiguous(_)) => typed.push(None),
                        Err(e) => return Err(e),
                    },
                    _ => typed.push(None),
                }
            }
            let known: Vec<Option<&SemanticType>> =
                typed.iter().map(|t| t.as_ref().map(|n| n.unit.return_type())).collect();
            let sig = pick_signature(&key, table, slots.len(), &known, expected)?.clone();

            let mut children = Vec::with_capacity(slots.len());
            for ((slot, typed), arg_type) in slots.iter().zip(typed).zip(&sig.arg_types) {
                children.push(match typed {
                    Some(node) => node,
                    None => type_raw(slot, table, Some(arg_type))?,
                });
            }
            let unit = SemanticUnit::new(sig.return_type, key, sig.arg_types)?;
            Ok(MrNode { unit, children })
        }
    }
}

fn pick_signature<'t>(
    key: &str,
    table: &'t SignatureTable,
    arity: usize,
    known: &[Option<&SemanticType>],
    expected: Option<&SemanticType>,
) -> Result<&'t Signature, FunqlError> {
    let all = table
        .candidates(key)
        .ok_or_else(|| FunqlError::UnknownSymbol(key.to_string()))?;
    let by_args: Vec<&Signature> = all
        .iter()
        .filter(|s| s.arg_types.len() == arity)
        .filter(|s| known.iter().zip(&s.arg_types).all(|(k, a)| k.is_none_or(|k| k == a)))
        .collect();
    if by_args.is_empty() {
        let found: Vec<String> = known
            .iter()
            .map(|k| k.map_or_else(|| "?".to_string(), |t| t.to_string()))
            .collect();
        return Err(FunqlError::Type(format!(
            "no signature of `{key}` accepts ({})",
            found.join(", ")
        )));
    }
    let matching: Vec<&Signature> = match expected {
        Some(ty) => by_args.into_iter().filter(|s| &s.return_type == ty).collect(),
        None => by_args,
    };
    match matching.as_slice() {
        [one] => Ok(one),
        [] => Err(FunqlError::Type(format!(
            "`{key}` cannot return {}",
            expected.map(|t| t.name()).unwrap_or("?")
        ))),
        _ => Err(FunqlError::Ambiguous(key.to_string())),
    }
}

/// Renders a meaning representation back to FunQL text.
pub fn serialize_mr(mr: &MeaningRepresentation) -> String {
    let mut out = String::new();
    write_node(mr.root(), &mut out);
    out
}

fn write_node(node: &MrNode, out: &mut String) {
    let function = node.unit.function();
    if let Some(open) = function.find('(').filter(|_| !node.unit.is_constant()) {
        let inner = &function[open + 1..function.len() - 1];
        out.push_str(&function[..open]);
        out.push('(');
        let mut children = node.children.iter();
        for (i, part) in inner.split(',').enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            if part == "*" {
                if let Some(child) = children.next() {
                    write_node(child, out);
                }
            } else {
                out.push_str(part);
            }
        }
        out.push(')');
    } else {
        out.push_str(function);
        if !node.children.is_empty() {
            out.push('(');
            for (i, child) in node.children.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                write_node(child, out);
            }
            out.push(')');
        }
    }
}

/// Unit inventory plus type-compatible transitions.
#[derive(Clone, Debug)]
pub struct SemanticGrammar {
    units: Vec<SemanticUnit>,
    ids: HashMap<SemanticUnit, UnitId>,
    by_display: HashMap<String, UnitId>,
    by_type: HashMap<SemanticType, Vec<UnitId>>,
    allowed: Vec<Vec<Vec<UnitId>>>,
    root_type: SemanticType,
    roots: Vec<UnitId>,
}

impl SemanticGrammar {
    /// Builds a grammar over `units` (deduplicated, first occurrence keeps its
    /// position).
    pub fn from_units(units: impl IntoIterator<Item = SemanticUnit>, root_type: SemanticType) -> Self {
        let mut inventory = Vec::new();
        let mut ids = HashMap::new();
        for unit in units {
            if !ids.contains_key(&unit) {
                ids.insert(unit.clone(), inventory.len());
                inventory.push(unit);
            }
        }
        let mut by_type: HashMap<SemanticType, Vec<UnitId>> = HashMap::new();
        for (id, unit) in inventory.iter().enumerate() {
            by_type.entry(unit.return_type().clone()).or_default().push(id);
        }
        let allowed = inventory
            .iter()
            .map(|u| {
                u.arg_types()
                    .iter()
                    .map(|t| by_type.get(t).cloned().unwrap_or_default())
                    .collect()
            })
            .collect();
        let by_display = inventory.iter().enumerate().map(|(id, u)| (u.to_string(), id)).collect();
        let roots = by_type.get(&root_type).cloned().unwrap_or_default();
        SemanticGrammar {
            units: inventory,
            ids,
            by_display,
            by_type,
            allowed,
            root_type,
            roots,
        }
    }

    pub fn units(&self) -> &[SemanticUnit] {
        &self.units
    }

    pub fn unit(&self, id: UnitId) -> &SemanticUnit {
        &self.units[id]
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn id_of(&self, unit: &SemanticUnit) -> Option<UnitId> {
        self.ids.get(unit).copied()
    }

    /// Looks a unit up by its `Display` rendering.
    pub fn id_by_display(&self, display: &str) -> Option<UnitId> {
        self.by_display.get(display).copied()
    }

    pub fn root_type(&self) -> &SemanticType {
        &self.root_type
    }

    /// Units that may label the arc leaving the root token.
    pub fn roots(&self) -> &[UnitId] {
        &self.roots
    }

    pub fn units_of_type(&self, ty: &SemanticType) -> &[UnitId] {
        self.by_type.get(ty).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Units whose return type fills argument `position` of `unit`.
    pub fn allowed_children(&self, unit: UnitId, position: usize) -> &[UnitId] {
        &self.allowed[unit][position]
    }

    /// Draws a random type-correct MR of depth at most `max_depth`, or `None`
    /// when the root type cannot be completed within that depth.
    pub fn sample_mr<R: Rng>(&self, rng: &mut R, max_depth: usize) -> Option<MeaningRepresentation> {
        let heights = self.min_heights();
        let root = self.sample_node(&self.root_type, max_depth, &heights, rng)?;
        MeaningRepresentation::new(root).ok()
    }

    fn sample_node<R: Rng>(
        &self,
        ty: &SemanticType,
        budget: usize,
        heights: &[usize],
        rng: &mut R,
    ) -> Option<MrNode> {
        let options: Vec<UnitId> = self
            .units_of_type(ty)
            .iter()
            .copied()
            .filter(|&u| heights[u] <= budget)
            .collect();
        if options.is_empty() {
            return None;
        }
        let unit = options[rng.gen_range(0..options.len())];
        let children = self.units[unit]
            .arg_types()
            .iter()
            .map(|t| self.sample_node(t, budget - 1, heights, rng))
            .collect::<Option<Vec<_>>>()?;
        Some(MrNode {
            unit: self.units[unit].clone(),
            children,
        })
    }

    /// Smallest MR height rooted at each unit (`usize::MAX` when none is
    /// finite).
    fn min_heights(&self) -> Vec<usize> {
        let mut height = vec![usize::MAX; self.units.len()];
        loop {
            let mut changed = false;
            for (id, unit) in self.units.iter().enumerate() {
                let mut h = 1usize;
                for ty in unit.arg_types() {
                    let best = self
                        .units_of_type(ty)
                        .iter()
                        .map(|&c| height[c])
                        .min()
                        .unwrap_or(usize::MAX);
                    h = h.max(best.saturating_add(1));
                }
                if h < height[id] {
                    height[id] = h;
                    changed = true;
                }
            }
            if !changed {
                return height;
            }
        }
    }

    /// Every type-correct MR rooted at the root type with depth at most
    /// `max_depth`. Returns `None` once more than `limit` trees would be
    /// produced.
    pub fn enumerate_mrs(&self, max_depth: usize, limit: usize) -> Option<Vec<IndexedMr>> {
        let mut out = Vec::new();
        for &root in &self.roots {
            for tree in self.expand(root, max_depth, limit)? {
                out.push(IndexedMr::from_unit_tree(&tree));
                if out.len() > limit {
                    return None;
                }
            }
        }
        Some(out)
    }

    fn expand(&self, unit: UnitId, budget: usize, limit: usize) -> Option<Vec<UnitTree>> {
        if budget == 0 {
            return Some(Vec::new());
        }
        let mut combos: Vec<Vec<UnitTree>> = vec![Vec::new()];
        for position in 0..self.units[unit].arity() {
            let mut options = Vec::new();
            for &child in self.allowed_children(unit, position) {
                options.extend(self.expand(child, budget - 1, limit)?);
            }
            let mut next = Vec::new();
            for combo in &combos {
                for option in &options {
                    let mut c = combo.clone();
                    c.push(option.clone());
                    next.push(c);
                    if next.len() > limit {
                        return None;
                    }
                }
            }
            combos = next;
        }
        Some(
            combos
                .into_iter()
                .map(|children| UnitTree { unit, children })
                .collect(),
        )
    }
}

#[derive(Clone, Debug)]
struct UnitTree {
    unit: UnitId,
    children: Vec<UnitTree>,
}

/// Collects every unit of the corpus into a grammar whose transitions are
/// all type-compatible pairs over the full inventory.
pub fn build_grammar(
    corpus: &[MeaningRepresentation],
    root_type: SemanticType,
) -> Result<SemanticGrammar, FunqlError> {
    if corpus.is_empty() {
        return Err(FunqlError::EmptyCorpus);
    }
    let units = corpus
        .iter()
        .flat_map(|mr| mr.nodes().into_iter().map(|n| n.unit.clone()).collect::<Vec<_>>());
    Ok(SemanticGrammar::from_units(units, root_type))
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct IndexedNode {
    pub unit: UnitId,
    pub children: Vec<usize>,
    /// 1 for the root.
    pub depth: usize,
}

/// A meaning representation over grammar unit ids, nodes in preorder with
/// the root at index 0.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct IndexedMr {
    nodes: Vec<IndexedNode>,
}

impl IndexedMr {
    pub fn new(mr: &MeaningRepresentation, grammar: &SemanticGrammar) -> Result<Self, FunqlError> {
        let mut nodes = Vec::new();
        Self::push(mr.root(), grammar, 1, &mut nodes)?;
        Ok(IndexedMr { nodes })
    }

    fn push(
        node: &MrNode,
        grammar: &SemanticGrammar,
        depth: usize,
        nodes: &mut Vec<IndexedNode>,
    ) -> Result<usize, FunqlError> {
        let unit = grammar
            .id_of(&node.unit)
            .ok_or_else(|| FunqlError::UnknownSymbol(node.unit.to_string()))?;
        let idx = nodes.len();
        nodes.push(IndexedNode {
            unit,
            children: Vec::new(),
            depth,
        });
        for child in &node.children {
            let c = Self::push(child, grammar, depth + 1, nodes)?;
            nodes[idx].children.push(c);
        }
        Ok(idx)
    }

    fn from_unit_tree(tree: &UnitTree) -> Self {
        fn push(tree: &UnitTree, depth: usize, nodes: &mut Vec<IndexedNode>) -> usize {
            let idx = nodes.len();
            nodes.push(IndexedNode {
                unit: tree.unit,
                children: Vec::new(),
                depth,
            });
            for child in &tree.children {
                let c = push(child, depth + 1, nodes);
                nodes[idx].children.push(c);
            }
            idx
        }
        let mut nodes = Vec::new();
        push(tree, 1, &mut nodes);
        IndexedMr { nodes }
    }

    /// Builds an indexed MR from `(unit, children)` pairs given in any order
    /// with `root` naming the root entry. Used when recovering trees.
    pub fn from_parts(root: usize, parts: &[(UnitId, Vec<usize>)]) -> Self {
        fn push(at: usize, parts: &[(UnitId, Vec<usize>)], depth: usize, nodes: &mut Vec<IndexedNode>) -> usize {
            let idx = nodes.len();
            nodes.push(IndexedNode {
                unit: parts[at].0,
                children: Vec::new(),
                depth,
            });
            for &child in &parts[at].1 {
                let c = push(child, parts, depth + 1, nodes);
                nodes[idx].children.push(c);
            }
            idx
        }
        let mut nodes = Vec::new();
        push(root, parts, 1, &mut nodes);
        IndexedMr { nodes }
    }

    pub fn nodes(&self) -> &[IndexedNode] {
        &self.nodes
    }

    pub fn node(&self, idx: usize) -> &IndexedNode {
        &self.nodes[idx]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Checks arity and argument types against the grammar.
    pub fn is_type_correct(&self, grammar: &SemanticGrammar) -> bool {
        self.nodes.iter().all(|n| {
            let unit = grammar.unit(n.unit);
            n.children.len() == unit.arity()
                && n
                    .children
                    .iter()
                    .zip(unit.arg_types())
                    .all(|(&c, t)| grammar.unit(self.nodes[c].unit).return_type() == t)
        })
    }

    pub fn to_mr(&self, grammar: &SemanticGrammar) -> Result<MeaningRepresentation, FunqlError> {
        fn build(mr: &IndexedMr, idx: usize, grammar: &SemanticGrammar) -> MrNode {
            let node = &mr.nodes[idx];
            MrNode {
                unit: grammar.unit(node.unit).clone(),
                children: node.children.iter().map(|&c| build(mr, c, grammar)).collect(),
            }
        }
        MeaningRepresentation::new(build(self, 0, grammar))
    }
}
