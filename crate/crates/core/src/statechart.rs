//! Motion statechart engine.
//!
//! Every node runs two automata: a ternary observation state and a life-cycle
//! state. A tick executes, in order: observation updates of effectively
//! active nodes, a simultaneous life-cycle update of all nodes, the terminal
//! check, and collection of the motion nodes whose tasks apply this cycle.
//!
//! Parent linkage reads the parent's life cycle from before the update, so a
//! template's pause or completion reaches its children one tick later (and
//! grandchildren two ticks later).

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ternary {
    True,
    False,
    Unknown,
}

impl Ternary {
    pub fn from_bool(b: bool) -> Self {
        if b {
            Ternary::True
        } else {
            Ternary::False
        }
    }

    pub fn is_true(self) -> bool {
        self == Ternary::True
    }

    pub fn not(self) -> Self {
        match self {
            Ternary::True => Ternary::False,
            Ternary::False => Ternary::True,
            Ternary::Unknown => Ternary::Unknown,
        }
    }

    pub fn and(self, o: Self) -> Self {
        match (self, o) {
            (Ternary::False, _) | (_, Ternary::False) => Ternary::False,
            (Ternary::True, Ternary::True) => Ternary::True,
            _ => Ternary::Unknown,
        }
    }

    pub fn or(self, o: Self) -> Self {
        match (self, o) {
            (Ternary::True, _) | (_, Ternary::True) => Ternary::True,
            (Ternary::False, Ternary::False) => Ternary::False,
            _ => Ternary::Unknown,
        }
    }
}

impl fmt::Display for Ternary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Ternary::True => "True",
            Ternary::False => "False",
            Ternary::Unknown => "Unknown",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LifeCycle {
    Inactive,
    Active,
    OnHold,
    Done,
}

impl fmt::Display for LifeCycle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LifeCycle::Inactive => "Inactive",
            LifeCycle::Active => "Active",
            LifeCycle::OnHold => "OnHold",
            LifeCycle::Done => "Done",
        };
        f.write_str(s)
    }
}

// --- conditions -----------------------------------------------------------------------

/// Ternary expression over same-level node observations.
#[derive(Clone, Debug, PartialEq)]
pub enum Condition {
    Literal(Ternary),
    Ref(String),
    Not(Box<Condition>),
    And(Box<Condition>, Box<Condition>),
    Or(Box<Condition>, Box<Condition>),
}

impl Condition {
    pub fn truth() -> Self {
        Condition::Literal(Ternary::True)
    }

    pub fn falsity() -> Self {
        Condition::Literal(Ternary::False)
    }

    pub fn node(name: &str) -> Self {
        Condition::Ref(name.to_string())
    }

    pub fn and(self, o: Condition) -> Self {
        Condition::And(Box::new(self), Box::new(o))
    }

    pub fn or(self, o: Condition) -> Self {
        Condition::Or(Box::new(self), Box::new(o))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(self) -> Self {
        Condition::Not(Box::new(self))
    }

    pub fn references(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_refs(&mut out);
        out
    }

    fn collect_refs<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Condition::Literal(_) => {}
            Condition::Ref(n) => out.push(n),
            Condition::Not(a) => a.collect_refs(out),
            Condition::And(a, b) | Condition::Or(a, b) => {
                a.collect_refs(out);
                b.collect_refs(out);
            }
        }
    }

    /// Strong Kleene evaluation. `lookup` returns `None` for unresolved names.
    pub fn eval<F>(&self, lookup: &F) -> Result<Ternary, ChartError>
    where
        F: Fn(&str) -> Option<Ternary>,
    {
        Ok(match self {
            Condition::Literal(t) => *t,
            Condition::Ref(n) => lookup(n).ok_or_else(|| ChartError::UnresolvedReference(n.clone()))?,
            Condition::Not(a) => a.eval(lookup)?.not(),
            Condition::And(a, b) => a.eval(lookup)?.and(b.eval(lookup)?),
            Condition::Or(a, b) => a.eval(lookup)?.or(b.eval(lookup)?),
        })
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Literal(t) => write!(f, "{t}"),
            Condition::Ref(n) => write!(f, "'{n}'"),
            Condition::Not(a) => write!(f, "not {}", Paren(a)),
            Condition::And(a, b) => write!(f, "{} and {}", Paren(a), Paren(b)),
            Condition::Or(a, b) => write!(f, "{} or {}", Paren(a), Paren(b)),
        }
    }
}

struct Paren<'a>(&'a Condition);

impl fmt::Display for Paren<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Condition::Literal(_) | Condition::Ref(_) => write!(f, "{}", self.0),
            c => write!(f, "({c})"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{message} at column {column}")]
pub struct ParseError {
    pub message: String,
    pub column: usize,
}

#[derive(Clone, Debug, PartialEq)]
enum Token {
    And,
    Or,
    Not,
    LParen,
    RParen,
    Literal(Ternary),
    Name(String),
}

fn tokenize(src: &str) -> Result<Vec<(Token, usize)>, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out: Vec<(Token, usize)> = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '(' {
            out.push((Token::LParen, i));
            i += 1;
        } else if c == ')' {
            out.push((Token::RParen, i));
            i += 1;
        } else if c == '\'' || c == '"' {
            let start = i;
            i += 1;
            let mut name = String::new();
            while i < chars.len() && chars[i] != c {
                name.push(chars[i]);
                i += 1;
            }
            if i == chars.len() {
                return Err(ParseError {
                    message: "unterminated quoted name".into(),
                    column: start,
                });
            }
            i += 1;
            out.push((Token::Name(name), start));
        } else {
            let start = i;
            let mut word = String::new();
            while i < chars.len() && !chars[i].is_whitespace() && !matches!(chars[i], '(' | ')' | '\'' | '"') {
                word.push(chars[i]);
                i += 1;
            }
            let tok = match word.as_str() {
                "and" => Token::And,
                "or" => Token::Or,
                "not" => Token::Not,
                "True" => Token::Literal(Ternary::True),
                "False" => Token::Literal(Ternary::False),
                "Unknown" => Token::Literal(Ternary::Unknown),
                _ => {
                    // Consecutive bare words form one multi-word name.
                    if let Some((Token::Name(prev), _)) = out.last_mut() {
                        if !src[..byte_offset(src, start)].trim_end().ends_with(['\'', '"']) {
                            prev.push(' ');
                            prev.push_str(&word);
                            continue;
                        }
                    }
                    Token::Name(word)
                }
            };
            out.push((tok, start));
        }
    }
    Ok(out)
}

fn byte_offset(s: &str, char_index: usize) -> usize {
    s.char_indices().nth(char_index).map(|(b, _)| b).unwrap_or(s.len())
}

struct Parser {
    tokens: Vec<(Token, usize)>,
    pos: usize,
    len: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(t, _)| t)
    }

    fn column(&self) -> usize {
        self.tokens.get(self.pos).map(|(_, c)| *c).unwrap_or(self.len)
    }

    fn err<T>(&self, message: &str) -> Result<T, ParseError> {
        Err(ParseError {
            message: message.to_string(),
            column: self.column(),
        })
    }

    fn or_expr(&mut self) -> Result<Condition, ParseError> {
        let mut lhs = self.and_expr()?;
        while self.peek() == Some(&Token::Or) {
            self.pos += 1;
            lhs = lhs.or(self.and_expr()?);
        }
        Ok(lhs)
    }

    fn and_expr(&mut self) -> Result<Condition, ParseError> {
        let mut lhs = self.not_expr()?;
        while self.peek() == Some(&Token::And) {
            self.pos += 1;
            lhs = lhs.and(self.not_expr()?);
        }
        Ok(lhs)
    }

    fn not_expr(&mut self) -> Result<Condition, ParseError> {
        if self.peek() == Some(&Token::Not) {
            self.pos += 1;
            return Ok(self.not_expr()?.not());
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Condition, ParseError> {
        match self.peek().cloned() {
            Some(Token::LParen) => {
                self.pos += 1;
                let inner = self.or_expr()?;
                if self.peek() != Some(&Token::RParen) {
                    return self.err("expected `)`");
                }
                self.pos += 1;
                Ok(inner)
            }
            Some(Token::Literal(t)) => {
                self.pos += 1;
                Ok(Condition::Literal(t))
            }
            Some(Token::Name(n)) => {
                self.pos += 1;
                Ok(Condition::Ref(n))
            }
            Some(_) => self.err("expected a node name, literal or `(`"),
            None => self.err("unexpected end of condition"),
        }
    }
}

/// Parses `and`/`or`/`not` conditions (precedence not > and > or) over node names.
///
/// Names are bare words (consecutive words join into one name) or quoted with `'`/`"`.
pub fn parse_condition(src: &str) -> Result<Condition, ParseError> {
    let tokens = tokenize(src)?;
    let mut p = Parser {
        tokens,
        pos: 0,
        len: src.chars().count(),
    };
    if p.tokens.is_empty() {
        return p.err("empty condition");
    }
    let c = p.or_expr()?;
    if p.pos != p.tokens.len() {
        return p.err("unexpected token");
    }
    Ok(c)
}

// --- chart structure ------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SuccessPolicy {
    /// True when the last child is True.
    Sequential,
    /// True when at least this many children are True.
    Parallel(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Terminal {
    End,
    Cancel,
}

/// Node kind. Motion and monitor payloads are opaque indices owned by the caller.
#[derive(Clone, Debug, PartialEq)]
pub enum NodeKind {
    Motion { payload: usize },
    Monitor { payload: usize },
    Template { policy: SuccessPolicy },
    Terminal(Terminal),
}

impl NodeKind {
    pub fn label(&self) -> &'static str {
        match self {
            NodeKind::Motion { .. } => "motion",
            NodeKind::Monitor { .. } => "monitor",
            NodeKind::Template {
                policy: SuccessPolicy::Sequential,
            } => "sequential",
            NodeKind::Template {
                policy: SuccessPolicy::Parallel(_),
            } => "parallel",
            NodeKind::Terminal(Terminal::End) => "end",
            NodeKind::Terminal(Terminal::Cancel) => "cancel",
        }
    }
}

/// Declarative node description. Unset conditions take their defaults.
#[derive(Clone, Debug)]
pub struct NodeSpec {
    pub name: String,
    pub kind: NodeKind,
    pub start: Option<Condition>,
    pub pause: Option<Condition>,
    pub end: Option<Condition>,
    pub reset: Option<Condition>,
    pub children: Vec<NodeSpec>,
}

impl NodeSpec {
    pub fn new(name: &str, kind: NodeKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
            start: None,
            pause: None,
            end: None,
            reset: None,
            children: Vec::new(),
        }
    }

    pub fn motion(name: &str, payload: usize) -> Self {
        Self::new(name, NodeKind::Motion { payload })
    }

    pub fn monitor(name: &str, payload: usize) -> Self {
        Self::new(name, NodeKind::Monitor { payload })
    }

    pub fn end(name: &str) -> Self {
        Self::new(name, NodeKind::Terminal(Terminal::End))
    }

    pub fn cancel(name: &str) -> Self {
        Self::new(name, NodeKind::Terminal(Terminal::Cancel))
    }

    /// Children activate in order, each once its predecessor is True.
    pub fn sequential(name: &str, children: Vec<NodeSpec>) -> Self {
        let mut s = Self::new(
            name,
            NodeKind::Template {
                policy: SuccessPolicy::Sequential,
            },
        );
        s.children = children;
        s
    }

    /// Children start together; True once `n_success` of them are True.
    pub fn parallel(name: &str, children: Vec<NodeSpec>, n_success: usize) -> Self {
        let mut s = Self::new(
            name,
            NodeKind::Template {
                policy: SuccessPolicy::Parallel(n_success),
            },
        );
        s.children = children;
        s
    }

    pub fn start(mut self, c: Condition) -> Self {
        self.start = Some(c);
        self
    }

    pub fn pause(mut self, c: Condition) -> Self {
        self.pause = Some(c);
        self
    }

    pub fn end_when(mut self, c: Condition) -> Self {
        self.end = Some(c);
        self
    }

    pub fn reset(mut self, c: Condition) -> Self {
        self.reset = Some(c);
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChartError {
    #[error("duplicate node name `{0}` on one level")]
    DuplicateName(String),
    #[error("node `{node}`: condition references `{name}`, which is not on the same level")]
    UnknownReference { node: String, name: String },
    #[error("unresolved node reference `{0}`")]
    UnresolvedReference(String),
    #[error("terminal node `{0}` must be on the top level")]
    NestedTerminal(String),
    #[error("terminal node `{0}` only takes a start condition")]
    TerminalConditions(String),
    #[error("template `{0}` has no children")]
    EmptyTemplate(String),
    #[error("template `{name}`: success count {n} must be in 1..={m}")]
    InvalidSuccessCount { name: String, n: usize, m: usize },
    #[error("node `{0}`: only templates have children")]
    UnexpectedChildren(String),
}

#[derive(Clone, Debug)]
enum Cond {
    Literal(Ternary),
    Ref(usize),
    Not(Box<Cond>),
    And(Box<Cond>, Box<Cond>),
    Or(Box<Cond>, Box<Cond>),
}

impl Cond {
    fn eval(&self, obs: &[Ternary]) -> Ternary {
        match self {
            Cond::Literal(t) => *t,
            Cond::Ref(i) => obs[*i],
            Cond::Not(a) => a.eval(obs).not(),
            Cond::And(a, b) => a.eval(obs).and(b.eval(obs)),
            Cond::Or(a, b) => a.eval(obs).or(b.eval(obs)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub id: NodeId,
    pub name: String,
    pub kind: NodeKind,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub depth: usize,
    start: Cond,
    pause: Cond,
    end: Cond,
    reset: Cond,
}

/// Snapshot of every node after a tick.
#[derive(Clone, Debug, PartialEq)]
pub struct ChartState {
    pub lifecycle: Vec<LifeCycle>,
    pub observation: Vec<Ternary>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub node: NodeId,
    pub from: LifeCycle,
    pub to: LifeCycle,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TickOutput {
    pub terminal: Option<(Terminal, NodeId)>,
    /// Motion nodes whose tasks apply this cycle (empty once terminal).
    pub active_motions: Vec<NodeId>,
    pub transitions: Vec<Transition>,
}

/// Caller-side behaviour invoked during a tick.
pub trait TickHooks {
    /// Observation of an effectively active motion or monitor node.
    fn observe(&mut self, node: &Node) -> Ternary;

    /// Runs after the life-cycle update and before the terminal check.
    fn on_transition(&mut self, _node: &Node, _from: LifeCycle, _to: LifeCycle) {}
}

#[derive(Clone, Debug)]
pub struct Statechart {
    nodes: Vec<Node>,
    by_path: HashMap<String, NodeId>,
    lifecycle: Vec<LifeCycle>,
    observation: Vec<Ternary>,
    finished: bool,
}

fn resolve(c: &Condition, level: &HashMap<String, usize>, node: &str) -> Result<Cond, ChartError> {
    Ok(match c {
        Condition::Literal(t) => Cond::Literal(*t),
        Condition::Ref(n) => Cond::Ref(*level.get(n).ok_or_else(|| ChartError::UnknownReference {
            node: node.to_string(),
            name: n.clone(),
        })?),
        Condition::Not(a) => Cond::Not(Box::new(resolve(a, level, node)?)),
        Condition::And(a, b) => Cond::And(Box::new(resolve(a, level, node)?), Box::new(resolve(b, level, node)?)),
        Condition::Or(a, b) => Cond::Or(Box::new(resolve(a, level, node)?), Box::new(resolve(b, level, node)?)),
    })
}

impl Statechart {
    pub fn new(top: Vec<NodeSpec>) -> Result<Self, ChartError> {
        let mut chart = Statechart {
            nodes: Vec::new(),
            by_path: HashMap::new(),
            lifecycle: Vec::new(),
            observation: Vec::new(),
            finished: false,
        };
        chart.add_level(&top, None, 0, "")?;
        chart.lifecycle = vec![LifeCycle::Inactive; chart.nodes.len()];
        chart.observation = vec![Ternary::Unknown; chart.nodes.len()];
        Ok(chart)
    }

    fn add_level(&mut self, specs: &[NodeSpec], parent: Option<NodeId>, depth: usize, prefix: &str) -> Result<Vec<NodeId>, ChartError> {
        let mut level: HashMap<String, usize> = HashMap::new();
        let base = self.nodes.len();
        for (i, s) in specs.iter().enumerate() {
            if level.insert(s.name.clone(), base + i).is_some() {
                return Err(ChartError::DuplicateName(s.name.clone()));
            }
        }
        let sequential = parent
            .map(|p| {
                matches!(
                    self.nodes[p.0].kind,
                    NodeKind::Template {
                        policy: SuccessPolicy::Sequential
                    }
                )
            })
            .unwrap_or(false);
        // Reserve ids for this level first so ids are contiguous per level.
        for (i, s) in specs.iter().enumerate() {
            let node = s.name.as_str();
            let is_terminal = matches!(s.kind, NodeKind::Terminal(_));
            if is_terminal && parent.is_some() {
                return Err(ChartError::NestedTerminal(s.name.clone()));
            }
            if is_terminal && (s.pause.is_some() || s.end.is_some() || s.reset.is_some()) {
                return Err(ChartError::TerminalConditions(s.name.clone()));
            }
            match s.kind {
                NodeKind::Template { policy } => {
                    if s.children.is_empty() {
                        return Err(ChartError::EmptyTemplate(s.name.clone()));
                    }
                    if let SuccessPolicy::Parallel(n) = policy {
                        if n < 1 || n > s.children.len() {
                            return Err(ChartError::InvalidSuccessCount {
                                name: s.name.clone(),
                                n,
                                m: s.children.len(),
                            });
                        }
                    }
                }
                _ if !s.children.is_empty() => return Err(ChartError::UnexpectedChildren(s.name.clone())),
                _ => {}
            }
            let mut start = s.start.clone().unwrap_or_else(Condition::truth);
            if sequential && i > 0 {
                let prev = Condition::node(&specs[i - 1].name);
                start = match &s.start {
                    Some(c) => prev.and(c.clone()),
                    None => prev,
                };
            }
            let default_end = match s.kind {
                NodeKind::Motion { .. } | NodeKind::Template { .. } => Condition::node(&s.name),
                _ => Condition::falsity(),
            };
            let id = NodeId(base + i);
            self.nodes.push(Node {
                id,
                name: s.name.clone(),
                kind: s.kind.clone(),
                parent,
                children: Vec::new(),
                depth,
                start: resolve(&start, &level, node)?,
                pause: resolve(s.pause.as_ref().unwrap_or(&Condition::falsity()), &level, node)?,
                end: resolve(s.end.as_ref().unwrap_or(&default_end), &level, node)?,
                reset: resolve(s.reset.as_ref().unwrap_or(&Condition::falsity()), &level, node)?,
            });
            let path = if prefix.is_empty() {
                s.name.clone()
            } else {
                format!("{prefix}/{}", s.name)
            };
            self.by_path.insert(path, id);
        }
        for (i, s) in specs.iter().enumerate() {
            if !s.children.is_empty() {
                let id = NodeId(base + i);
                let path = self.path(id);
                let kids = self.add_level(&s.children, Some(id), depth + 1, &path)?;
                self.nodes[id.0].children = kids;
            }
        }
        Ok((base..base + specs.len()).map(NodeId).collect())
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    /// Slash-separated path from the top level, e.g. `Cut/Down`.
    pub fn path(&self, id: NodeId) -> String {
        let n = &self.nodes[id.0];
        match n.parent {
            Some(p) => format!("{}/{}", self.path(p), n.name),
            None => n.name.clone(),
        }
    }

    /// Looks a node up by path, or by bare name when unique.
    pub fn find(&self, name: &str) -> Option<NodeId> {
        if let Some(id) = self.by_path.get(name) {
            return Some(*id);
        }
        let mut hits = self.nodes.iter().filter(|n| n.name == name);
        match (hits.next(), hits.next()) {
            (Some(n), None) => Some(n.id),
            _ => None,
        }
    }

    pub fn lifecycle(&self, id: NodeId) -> LifeCycle {
        self.lifecycle[id.0]
    }

    pub fn observation(&self, id: NodeId) -> Ternary {
        self.observation[id.0]
    }

    pub fn state(&self) -> ChartState {
        ChartState {
            lifecycle: self.lifecycle.clone(),
            observation: self.observation.clone(),
        }
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    fn effectively_active(&self, lifecycle: &[LifeCycle], id: NodeId) -> bool {
        let mut cur = Some(id);
        while let Some(c) = cur {
            if lifecycle[c.0] != LifeCycle::Active {
                return false;
            }
            cur = self.nodes[c.0].parent;
        }
        true
    }

    fn own_transition(&self, n: &Node, current: LifeCycle, obs: &[Ternary]) -> LifeCycle {
        let end = n.end.eval(obs).is_true();
        let paused = n.pause.eval(obs).is_true();
        match current {
            LifeCycle::Inactive if end => LifeCycle::Done,
            LifeCycle::Inactive if n.start.eval(obs).is_true() && !paused => LifeCycle::Active,
            LifeCycle::Active | LifeCycle::OnHold if end => LifeCycle::Done,
            LifeCycle::Active if paused => LifeCycle::OnHold,
            LifeCycle::OnHold if !paused => LifeCycle::Active,
            LifeCycle::Done if n.reset.eval(obs).is_true() => LifeCycle::Inactive,
            s => s,
        }
    }

    /// One step toward a non-active parent's state, along an existing edge only.
    fn linked_transition(current: LifeCycle, parent: LifeCycle) -> LifeCycle {
        use LifeCycle::*;
        match (current, parent) {
            (Active, OnHold) => OnHold,
            (Inactive | Active | OnHold, Done) => Done,
            (Done, Inactive) => Inactive,
            (s, _) => s,
        }
    }

    fn reset_subtree(&mut self, id: NodeId) {
        let kids = self.nodes[id.0].children.clone();
        for k in kids {
            self.lifecycle[k.0] = LifeCycle::Inactive;
            self.observation[k.0] = Ternary::Unknown;
            self.reset_subtree(k);
        }
    }

    pub fn tick<H: TickHooks>(&mut self, hooks: &mut H) -> TickOutput {
        if self.finished {
            return TickOutput::default();
        }
        let n = self.nodes.len();
        let lc_before = self.lifecycle.clone();

        // (1) observation updates of effectively active nodes.
        let obs_before = self.observation.clone();
        for i in 0..n {
            let id = NodeId(i);
            if !self.effectively_active(&lc_before, id) {
                continue;
            }
            let node = &self.nodes[i];
            self.observation[i] = match &node.kind {
                NodeKind::Motion { .. } | NodeKind::Monitor { .. } => hooks.observe(node),
                NodeKind::Template { policy } => {
                    let kids: Vec<Ternary> = node.children.iter().map(|c| obs_before[c.0]).collect();
                    match policy {
                        SuccessPolicy::Sequential => Ternary::from_bool(kids.last().is_some_and(|t| t.is_true())),
                        SuccessPolicy::Parallel(k) => Ternary::from_bool(kids.iter().filter(|t| t.is_true()).count() >= *k),
                    }
                }
                NodeKind::Terminal(_) => Ternary::True,
            };
        }

        // (2) simultaneous life-cycle update.
        let obs = self.observation.clone();
        let mut next = lc_before.clone();
        for (i, node) in self.nodes.iter().enumerate() {
            let current = lc_before[i];
            let parent_state = node.parent.map(|p| lc_before[p.0]);
            next[i] = match parent_state {
                None | Some(LifeCycle::Active) => self.own_transition(node, current, &obs),
                Some(p) => Self::linked_transition(current, p),
            };
        }
        let mut transitions = Vec::new();
        for i in 0..n {
            if next[i] != lc_before[i] {
                transitions.push(Transition {
                    node: NodeId(i),
                    from: lc_before[i],
                    to: next[i],
                });
            }
        }
        self.lifecycle = next;
        for t in &transitions {
            if t.from == LifeCycle::Done && t.to == LifeCycle::Inactive {
                self.observation[t.node.0] = Ternary::Unknown;
                self.reset_subtree(t.node);
            }
            if t.to == LifeCycle::Active && matches!(self.nodes[t.node.0].kind, NodeKind::Terminal(_)) {
                self.observation[t.node.0] = Ternary::True;
            }
        }
        for t in &transitions {
            hooks.on_transition(&self.nodes[t.node.0], t.from, t.to);
        }

        // (3) terminal check.
        for node in &self.nodes {
            if let NodeKind::Terminal(kind) = node.kind {
                if self.observation[node.id.0].is_true() {
                    self.finished = true;
                    return TickOutput {
                        terminal: Some((kind, node.id)),
                        active_motions: Vec::new(),
                        transitions,
                    };
                }
            }
        }

        // (4) collect motion nodes.
        let active_motions = (0..n)
            .map(NodeId)
            .filter(|&id| matches!(self.nodes[id.0].kind, NodeKind::Motion { .. }) && self.effectively_active(&self.lifecycle, id))
            .collect();
        TickOutput {
            terminal: None,
            active_motions,
            transitions,
        }
    }
}

// --- gantt annotation -----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanttRecord {
    pub node: String,
    pub t0: f64,
    pub t1: f64,
    pub lifecycle: LifeCycle,
    pub observation: Ternary,
}

/// A maximal run of one state on one bar.
#[derive(Clone, Debug, PartialEq)]
pub struct Interval<S> {
    pub t0: f64,
    pub t1: f64,
    pub state: S,
}

/// Per-cycle state history collapsed into contiguous per-node intervals.
#[derive(Clone, Debug, Default)]
pub struct GanttRecorder {
    names: Vec<String>,
    open: Vec<Option<GanttRecord>>,
    closed: Vec<GanttRecord>,
}

impl GanttRecorder {
    pub fn new(chart: &Statechart) -> Self {
        let names: Vec<String> = chart.nodes().iter().map(|n| chart.path(n.id)).collect();
        Self {
            open: vec![None; names.len()],
            names,
            closed: Vec::new(),
        }
    }

    /// Records the post-tick state for the cycle interval `[t0, t1)`.
    pub fn record(&mut self, chart: &Statechart, t0: f64, t1: f64) {
        if t1 <= t0 {
            return;
        }
        for i in 0..self.names.len() {
            let (lc, ob) = (chart.lifecycle[i], chart.observation[i]);
            match &mut self.open[i] {
                Some(r) if r.lifecycle == lc && r.observation == ob => r.t1 = t1,
                slot => {
                    if let Some(r) = slot.take() {
                        self.closed.push(r);
                    }
                    *slot = Some(GanttRecord {
                        node: self.names[i].clone(),
                        t0,
                        t1,
                        lifecycle: lc,
                        observation: ob,
                    });
                }
            }
        }
    }

    /// Records ordered by node declaration, then time.
    pub fn records(&self) -> Vec<GanttRecord> {
        let mut all: Vec<GanttRecord> = self.closed.clone();
        all.extend(self.open.iter().flatten().cloned());
        let order: HashMap<&str, usize> = self.names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        all.sort_by(|a, b| {
            order[a.node.as_str()]
                .cmp(&order[b.node.as_str()])
                .then(a.t0.partial_cmp(&b.t0).unwrap())
        });
        all
    }
}

/// Merged life-cycle intervals of one node.
pub fn lifecycle_intervals(records: &[GanttRecord], node: &str) -> Vec<Interval<LifeCycle>> {
    merge(records, node, |r| r.lifecycle)
}

/// Merged observation intervals of one node.
pub fn observation_intervals(records: &[GanttRecord], node: &str) -> Vec<Interval<Ternary>> {
    merge(records, node, |r| r.observation)
}

fn merge<S: PartialEq + Copy>(records: &[GanttRecord], node: &str, f: impl Fn(&GanttRecord) -> S) -> Vec<Interval<S>> {
    let mut out: Vec<Interval<S>> = Vec::new();
    for r in records.iter().filter(|r| r.node == node) {
        let s = f(r);
        match out.last_mut() {
            Some(last) if last.state == s && (last.t1 - r.t0).abs() < 1e-9 => last.t1 = r.t1,
            _ => out.push(Interval { t0: r.t0, t1: r.t1, state: s }),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Script<F: FnMut(&Node) -> Ternary>(F);

    impl<F: FnMut(&Node) -> Ternary> TickHooks for Script<F> {
        fn observe(&mut self, node: &Node) -> Ternary {
            (self.0)(node)
        }
    }

    #[test]
    fn kleene_tables() {
        use Ternary::*;
        assert_eq!(True.and(Unknown), Unknown);
        assert_eq!(True.or(Unknown), True);
        assert_eq!(Unknown.not(), Unknown);
        assert_eq!(False.and(Unknown), False);
        assert_eq!(False.or(Unknown), Unknown);
    }

    #[test]
    fn parser_precedence_and_names() {
        let c = parse_condition("not A and B or C").unwrap();
        assert_eq!(c, Condition::node("A").not().and(Condition::node("B")).or(Condition::node("C")));
        let c = parse_condition("Made Contact? and not ('Human Close?' or False)").unwrap();
        assert_eq!(
            c,
            Condition::node("Made Contact?").and(Condition::node("Human Close?").or(Condition::falsity()).not())
        );
        assert!(parse_condition("A and").is_err());
        assert!(parse_condition("(A").is_err());
        assert!(parse_condition("").is_err());
        let round = parse_condition(&c.to_string()).unwrap();
        assert_eq!(round, c);
    }

    #[test]
    fn single_motion_activates_on_first_tick() {
        let mut chart = Statechart::new(vec![NodeSpec::motion("Reach", 0)]).unwrap();
        let out = chart.tick(&mut Script(|_| Ternary::False));
        assert_eq!(out.active_motions, vec![NodeId(0)]);
        assert_eq!(chart.observation(NodeId(0)), Ternary::Unknown);
    }

    #[test]
    fn end_motion_terminates_immediately() {
        let mut chart = Statechart::new(vec![NodeSpec::motion("Reach", 0), NodeSpec::end("End")]).unwrap();
        let out = chart.tick(&mut Script(|_| Ternary::False));
        assert_eq!(out.terminal, Some((Terminal::End, NodeId(1))));
        assert!(out.active_motions.is_empty());
        assert_eq!(chart.tick(&mut Script(|_| Ternary::False)), TickOutput::default());
    }

    #[test]
    fn pause_and_parent_linkage() {
        let specs = vec![
            NodeSpec::monitor("Hold", 0),
            NodeSpec::sequential("Seq", vec![NodeSpec::motion("A", 1), NodeSpec::motion("B", 2), NodeSpec::motion("C", 3)])
                .pause(Condition::node("Hold")),
        ];
        let mut chart = Statechart::new(specs).unwrap();
        let hold = std::cell::Cell::new(false);
        let a_done = std::cell::Cell::new(false);
        let mut hooks = Script(|n: &Node| match n.name.as_str() {
            "Hold" => Ternary::from_bool(hold.get()),
            "A" => Ternary::from_bool(a_done.get()),
            _ => Ternary::False,
        });
        let id = |c: &Statechart, n: &str| c.find(n).unwrap();
        chart.tick(&mut hooks); // Seq active
        chart.tick(&mut hooks); // A active
        a_done.set(true);
        chart.tick(&mut hooks); // A observes True
        chart.tick(&mut hooks); // A done; B?
        assert_eq!(chart.lifecycle(id(&chart, "Seq/A")), LifeCycle::Done);
        assert_eq!(chart.lifecycle(id(&chart, "Seq/B")), LifeCycle::Active);
        hold.set(true);
        chart.tick(&mut hooks);
        assert_eq!(chart.lifecycle(id(&chart, "Seq")), LifeCycle::OnHold);
        assert_eq!(chart.lifecycle(id(&chart, "Seq/B")), LifeCycle::Active);
        let out = chart.tick(&mut hooks);
        assert_eq!(chart.lifecycle(id(&chart, "Seq/B")), LifeCycle::OnHold);
        assert_eq!(chart.lifecycle(id(&chart, "Seq/A")), LifeCycle::Done);
        assert_eq!(chart.lifecycle(id(&chart, "Seq/C")), LifeCycle::Inactive);
        assert!(out.active_motions.is_empty());
        hold.set(false);
        chart.tick(&mut hooks);
        chart.tick(&mut hooks);
        assert_eq!(chart.lifecycle(id(&chart, "Seq/B")), LifeCycle::Active);
    }

    #[test]
    fn template_reset_restores_fresh_state() {
        let specs = vec![
            NodeSpec::sequential("Seq", vec![NodeSpec::motion("A", 0), NodeSpec::motion("B", 1)])
                .reset(Condition::node("Seq")),
        ];
        let mut chart = Statechart::new(specs).unwrap();
        let fresh = chart.state();
        let mut hooks = Script(|_| Ternary::True);
        let mut saw_reset = false;
        for _ in 0..20 {
            let out = chart.tick(&mut hooks);
            if out
                .transitions
                .iter()
                .any(|t| t.node == NodeId(0) && t.from == LifeCycle::Done && t.to == LifeCycle::Inactive)
            {
                assert_eq!(chart.state(), fresh);
                saw_reset = true;
                break;
            }
        }
        assert!(saw_reset);
    }

    #[test]
    fn validation_errors() {
        assert!(matches!(
            Statechart::new(vec![NodeSpec::motion("A", 0), NodeSpec::motion("A", 1)]),
            Err(ChartError::DuplicateName(_))
        ));
        assert!(matches!(
            Statechart::new(vec![NodeSpec::motion("A", 0).start(Condition::node("Ghost"))]),
            Err(ChartError::UnknownReference { .. })
        ));
        assert!(matches!(
            Statechart::new(vec![NodeSpec::sequential("S", vec![NodeSpec::end("E")])]),
            Err(ChartError::NestedTerminal(_))
        ));
        assert!(matches!(
            Statechart::new(vec![NodeSpec::parallel("P", vec![NodeSpec::motion("A", 0)], 2)]),
            Err(ChartError::InvalidSuccessCount { .. })
        ));
    }

    #[test]
    fn gantt_intervals_merge() {
        let mut chart = Statechart::new(vec![NodeSpec::monitor("M", 0)]).unwrap();
        let mut rec = GanttRecorder::new(&chart);
        let mut k = 0usize;
        for step in 0..10 {
            let t = step as f64 * 0.5;
            chart.tick(&mut Script(|_| Ternary::from_bool((3..6).contains(&k))));
            rec.record(&chart, t, t + 0.5);
            k += 1;
        }
        let records = rec.records();
        let obs = observation_intervals(&records, "M");
        let trues: Vec<_> = obs.iter().filter(|i| i.state == Ternary::True).collect();
        assert_eq!(trues.len(), 1);
        assert_eq!((trues[0].t0, trues[0].t1), (1.5, 3.0));
        let lc = lifecycle_intervals(&records, "M");
        assert_eq!(lc.len(), 1);
        assert_eq!((lc[0].t0, lc[0].t1), (0.0, 5.0));
    }
}
