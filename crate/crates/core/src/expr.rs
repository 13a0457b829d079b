//! Tensor expressions in einsum-style notation and permutation-invariance
//! analysis of their axes.
//!
//! The concrete syntax is
//!
//! ```text
//! OUT[axes] (+= | =) IN1[axes] (* | +)? IN2[axes]?
//! ```
//!
//! where `axes` is a comma separated list of symbols or `sym+sym` compound
//! terms (e.g. `A[n,m,x+i,y+j]`). Whitespace is ignored. Extents are not part
//! of the expression; they are bound later with [`TensorExpr::bind`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{PitError, Result};

/// One index position of an operand.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum AxisTerm {
    Symbol(String),
    /// `a+b`: the operand is indexed by the sum of two loop variables.
    Compound(String, String),
}

impl AxisTerm {
    pub fn symbols(&self) -> impl Iterator<Item = &str> {
        let (a, b) = match self {
            AxisTerm::Symbol(s) => (s.as_str(), None),
            AxisTerm::Compound(a, b) => (a.as_str(), Some(b.as_str())),
        };
        std::iter::once(a).chain(b)
    }

    pub fn as_symbol(&self) -> Option<&str> {
        match self {
            AxisTerm::Symbol(s) => Some(s),
            AxisTerm::Compound(..) => None,
        }
    }
}

impl fmt::Display for AxisTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AxisTerm::Symbol(s) => f.write_str(s),
            AxisTerm::Compound(a, b) => write!(f, "{a}+{b}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Operand {
    pub name: String,
    pub axes: Vec<AxisTerm>,
}

impl Operand {
    pub fn rank(&self) -> usize {
        self.axes.len()
    }

    /// True if `symbol` indexes this operand as a plain (non-compound) axis.
    pub fn has_plain(&self, symbol: &str) -> bool {
        self.axes.iter().any(|a| a.as_symbol() == Some(symbol))
    }

    pub fn mentions(&self, symbol: &str) -> bool {
        self.axes.iter().any(|a| a.symbols().any(|s| s == symbol))
    }

    pub fn position_of(&self, symbol: &str) -> Option<usize> {
        self.axes.iter().position(|a| a.as_symbol() == Some(symbol))
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[", self.name)?;
        for (i, axis) in self.axes.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{axis}")?;
        }
        f.write_str("]")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReductionOp {
    /// `+=`
    Sum,
    /// `=`: no reduction, every axis must be spatial.
    Assign,
}

impl ReductionOp {
    /// Whether the reduction is commutative and associative, which is what
    /// makes a reduction axis permutation invariant.
    pub fn is_commutative_associative(self) -> bool {
        match self {
            ReductionOp::Sum => true,
            ReductionOp::Assign => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ElementwiseOp {
    Multiply,
    Add,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TensorExpr {
    pub output: Operand,
    pub inputs: Vec<Operand>,
    pub reduction_op: ReductionOp,
    pub elementwise_op: ElementwiseOp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AxisKind {
    Spatial,
    Reduction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AxisCategory {
    /// Present in only some operands.
    Sporadic,
    /// Present as a plain axis in every operand, the output included.
    Prevalent,
    /// Participates in a compound index term.
    CompoundMember,
}

impl fmt::Display for AxisKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AxisKind::Spatial => "spatial",
            AxisKind::Reduction => "reduction",
        })
    }
}

impl fmt::Display for AxisCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AxisCategory::Sporadic => "sporadic",
            AxisCategory::Prevalent => "prevalent",
            AxisCategory::CompoundMember => "compound-member",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AxisInfo {
    pub name: String,
    pub kind: AxisKind,
    pub category: AxisCategory,
    pub is_pit: bool,
    /// Only known once the expression is bound to concrete extents.
    pub extent: Option<usize>,
}

/// Freedom granted to an axis dropped by [`TensorExpr::simplify`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemovedAxisFreedom {
    /// Every slice along the removed axis may use its own permutation.
    IndependentPerSlice,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Simplified {
    pub expr: TensorExpr,
    pub removed: BTreeMap<String, RemovedAxisFreedom>,
}

/// Extents for plain axis symbols.
pub type Extents = BTreeMap<String, usize>;

/// Parses `m=..,k=..,n=..` into an extent map.
pub fn parse_extents(text: &str) -> Result<Extents> {
    let mut out = Extents::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, value) = part.split_once('=').ok_or_else(|| {
            PitError::InvalidArgument(format!("expected sym=extent, got `{part}`"))
        })?;
        let value: usize = value
            .trim()
            .parse()
            .map_err(|_| PitError::InvalidArgument(format!("bad extent in `{part}`")))?;
        if value == 0 {
            return Err(PitError::InvalidArgument(format!(
                "extent of `{}` must be positive",
                name.trim()
            )));
        }
        out.insert(name.trim().to_string(), value);
    }
    Ok(out)
}

impl TensorExpr {
    pub fn operands(&self) -> impl Iterator<Item = &Operand> {
        std::iter::once(&self.output).chain(self.inputs.iter())
    }

    /// All axis symbols in order of first appearance (output first).
    pub fn symbols(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for op in self.operands() {
            for axis in &op.axes {
                for s in axis.symbols() {
                    if seen.insert(s.to_string()) {
                        out.push(s.to_string());
                    }
                }
            }
        }
        out
    }

    pub fn classify_axes(&self) -> Vec<AxisInfo> {
        self.symbols()
            .into_iter()
            .map(|name| {
                let compound = self.operands().any(|op| {
                    op.axes
                        .iter()
                        .any(|a| matches!(a, AxisTerm::Compound(x, y) if *x == name || *y == name))
                });
                let kind = if self.output.mentions(&name) {
                    AxisKind::Spatial
                } else {
                    AxisKind::Reduction
                };
                let category = if compound {
                    AxisCategory::CompoundMember
                } else if self.operands().all(|op| op.has_plain(&name)) {
                    AxisCategory::Prevalent
                } else {
                    AxisCategory::Sporadic
                };
                let is_pit = category != AxisCategory::CompoundMember
                    && match kind {
                        AxisKind::Spatial => true,
                        AxisKind::Reduction => self.reduction_op.is_commutative_associative(),
                    };
                AxisInfo {
                    name,
                    kind,
                    category,
                    is_pit,
                    extent: None,
                }
            })
            .collect()
    }

    pub fn pit_axes(&self) -> BTreeSet<String> {
        self.classify_axes()
            .into_iter()
            .filter(|a| a.is_pit)
            .map(|a| a.name)
            .collect()
    }

    /// Drops the prevalent axes from every operand.
    pub fn simplify(&self) -> Simplified {
        let removed: BTreeMap<String, RemovedAxisFreedom> = self
            .classify_axes()
            .into_iter()
            .filter(|a| a.category == AxisCategory::Prevalent)
            .map(|a| (a.name, RemovedAxisFreedom::IndependentPerSlice))
            .collect();
        let strip = |op: &Operand| Operand {
            name: op.name.clone(),
            axes: op
                .axes
                .iter()
                .filter(|a| a.as_symbol().is_none_or(|s| !removed.contains_key(s)))
                .cloned()
                .collect(),
        };
        Simplified {
            expr: TensorExpr {
                output: strip(&self.output),
                inputs: self.inputs.iter().map(strip).collect(),
                reduction_op: self.reduction_op,
                elementwise_op: self.elementwise_op,
            },
            removed,
        }
    }

    /// Binds plain symbols to extents and returns each operand's shape.
    ///
    /// A compound term `a+b` gets extent `ext(a) + ext(b) - 1`.
    pub fn bind(&self, extents: &Extents) -> Result<BoundExpr> {
        let mut axes = self.classify_axes();
        for info in &mut axes {
            let ext = *extents.get(&info.name).ok_or_else(|| {
                PitError::InvalidArgument(format!("no extent bound for axis `{}`", info.name))
            })?;
            if ext == 0 {
                return Err(PitError::InvalidArgument(format!(
                    "extent of `{}` must be positive",
                    info.name
                )));
            }
            info.extent = Some(ext);
        }
        let shape_of = |op: &Operand| -> Vec<usize> {
            op.axes
                .iter()
                .map(|a| match a {
                    AxisTerm::Symbol(s) => extents[s],
                    AxisTerm::Compound(x, y) => extents[x] + extents[y] - 1,
                })
                .collect()
        };
        Ok(BoundExpr {
            output_shape: shape_of(&self.output),
            input_shapes: self.inputs.iter().map(shape_of).collect(),
            axes,
            expr: self.clone(),
        })
    }
}

impl fmt::Display for TensorExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let assign = match self.reduction_op {
            ReductionOp::Sum => "+=",
            ReductionOp::Assign => "=",
        };
        write!(f, "{} {assign} ", self.output)?;
        let sep = match self.elementwise_op {
            ElementwiseOp::Multiply => " * ",
            ElementwiseOp::Add => " + ",
            ElementwiseOp::Identity => " ",
        };
        for (i, input) in self.inputs.iter().enumerate() {
            if i > 0 {
                f.write_str(sep)?;
            }
            write!(f, "{input}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for TensorExpr {
    type Err = PitError;

    fn from_str(s: &str) -> Result<Self> {
        parse_expr(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundExpr {
    pub expr: TensorExpr,
    pub axes: Vec<AxisInfo>,
    pub output_shape: Vec<usize>,
    pub input_shapes: Vec<Vec<usize>>,
}

impl BoundExpr {
    pub fn extent(&self, symbol: &str) -> Option<usize> {
        self.axes
            .iter()
            .find(|a| a.name == symbol)
            .and_then(|a| a.extent)
    }
}

pub fn parse_expr(text: &str) -> Result<TensorExpr> {
    let mut p = Parser::new(text)?;
    let output = p.operand()?;
    let reduction_op = if p.eat("+=") {
        ReductionOp::Sum
    } else if p.eat("=") {
        ReductionOp::Assign
    } else {
        return Err(p.error("expected `+=` or `=`"));
    };
    let mut inputs = vec![p.operand()?];
    let elementwise_op = if p.eat("*") {
        inputs.push(p.operand()?);
        ElementwiseOp::Multiply
    } else if p.eat("+") {
        inputs.push(p.operand()?);
        ElementwiseOp::Add
    } else {
        ElementwiseOp::Identity
    };
    if !p.at_end() {
        return Err(p.error("unexpected trailing input"));
    }
    let expr = TensorExpr {
        output,
        inputs,
        reduction_op,
        elementwise_op,
    };
    validate(&expr)?;
    Ok(expr)
}

fn validate(expr: &TensorExpr) -> Result<()> {
    if expr
        .output
        .axes
        .iter()
        .any(|a| matches!(a, AxisTerm::Compound(..)))
    {
        return Err(PitError::InvalidExpr(format!(
            "compound term in output operand `{}`",
            expr.output.name
        )));
    }
    let mut by_name: BTreeMap<&str, &Operand> = BTreeMap::new();
    for op in expr.operands() {
        if let Some(prev) = by_name.insert(&op.name, op) {
            if prev.axes != op.axes {
                return Err(PitError::InvalidExpr(format!(
                    "operand `{}` used with inconsistent axes",
                    op.name
                )));
            }
        }
        let mut seen = BTreeSet::new();
        for axis in &op.axes {
            if let Some(s) = axis.as_symbol() {
                if !seen.insert(s) {
                    return Err(PitError::InvalidExpr(format!(
                        "axis `{s}` repeated in operand `{}`",
                        op.name
                    )));
                }
            }
        }
    }
    for axis in &expr.output.axes {
        for s in axis.symbols() {
            if !expr.inputs.iter().any(|i| i.mentions(s)) {
                return Err(PitError::InvalidExpr(format!(
                    "output axis `{s}` does not appear in any input"
                )));
            }
        }
    }
    if expr.reduction_op == ReductionOp::Assign {
        if let Some(a) = expr
            .symbols()
            .into_iter()
            .find(|s| !expr.output.mentions(s))
        {
            return Err(PitError::InvalidExpr(format!(
                "axis `{a}` is reduced but the expression uses `=`; use `+=`"
            )));
        }
    }
    Ok(())
}

struct Parser<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Result<Self> {
        if let Some(i) = text.find(|c: char| !c.is_ascii()) {
            return Err(PitError::Syntax {
                position: i,
                message: "non-ASCII character".into(),
            });
        }
        Ok(Parser { text, pos: 0 })
    }

    fn error(&self, message: &str) -> PitError {
        PitError::Syntax {
            position: self.pos,
            message: message.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.text[self.pos..].starts_with(|c: char| c.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn at_end(&mut self) -> bool {
        self.skip_ws();
        self.pos == self.text.len()
    }

    fn eat(&mut self, tok: &str) -> bool {
        self.skip_ws();
        if self.text[self.pos..].starts_with(tok) {
            self.pos += tok.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, tok: &str) -> Result<()> {
        if self.eat(tok) {
            Ok(())
        } else {
            Err(self.error(&format!("expected `{tok}`")))
        }
    }

    fn ident(&mut self) -> Result<String> {
        self.skip_ws();
        let rest = &self.text[self.pos..];
        let len = rest
            .char_indices()
            .find(|&(i, c)| !(c == '_' || c.is_ascii_alphabetic() || (i > 0 && c.is_ascii_digit())))
            .map_or(rest.len(), |(i, _)| i);
        if len == 0 {
            return Err(self.error("expected identifier"));
        }
        self.pos += len;
        Ok(rest[..len].to_string())
    }

    fn operand(&mut self) -> Result<Operand> {
        let name = self.ident()?;
        self.expect("[")?;
        let mut axes = Vec::new();
        if !self.eat("]") {
            loop {
                let start = self.pos;
                let first = self.ident()?;
                if self.eat("+") {
                    let second = self.ident()?;
                    if second == first {
                        return Err(PitError::Syntax {
                            position: start,
                            message: format!("compound term `{first}+{second}` repeats a symbol"),
                        });
                    }
                    axes.push(AxisTerm::Compound(first, second));
                } else {
                    axes.push(AxisTerm::Symbol(first));
                }
                if self.eat("]") {
                    break;
                }
                self.expect(",")?;
            }
        }
        Ok(Operand { name, axes })
    }
}
