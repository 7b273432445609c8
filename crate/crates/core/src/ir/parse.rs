//! Text format reader.
//!
//! The format is line-oriented by convention but newlines carry no meaning to
//! the parser, so `fn main { entry: ret }` is accepted. `;` starts a comment
//! running to end of line.

use std::collections::HashMap;

use thiserror::Error;

use super::{
    AccessSize, BasicBlock, BinOp, BlockId, Builtin, Callee, CmpOp, FuncId, Function, GepIndex,
    GlobalDef, GlobalId, Inst, Module, Reg, Value,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{line}:{col}: {kind}")]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("duplicate register definition %{0}")]
    DuplicateRegister(String),
    #[error("undefined register %{0}")]
    UndefinedRegister(String),
    #[error("duplicate label {0}")]
    DuplicateLabel(String),
    #[error("undefined label {0}")]
    UndefinedLabel(String),
    #[error("duplicate function {0}")]
    DuplicateFunction(String),
    #[error("undefined function {0}")]
    UndefinedFunction(String),
    #[error("duplicate global @{0}")]
    DuplicateGlobal(String),
    #[error("undefined global @{0}")]
    UndefinedGlobal(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Reg(String),
    Global(String),
    Int(u64),
    LBrace,
    RBrace,
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Colon,
    Equals,
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Reg(s) => format!("`%{s}`"),
            Tok::Global(s) => format!("`@{s}`"),
            Tok::Int(v) => format!("`{v}`"),
            Tok::LBrace => "`{`".into(),
            Tok::RBrace => "`}`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::LBracket => "`[`".into(),
            Tok::RBracket => "`]`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Colon => "`:`".into(),
            Tok::Equals => "`=`".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '.'
}

fn lex(src: &str) -> Result<Vec<Token>, ParseError> {
    let mut out = Vec::new();
    let chars: Vec<char> = src.chars().collect();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    let err = |line, col, msg: String| ParseError {
        line,
        col,
        kind: ParseErrorKind::Syntax(msg),
    };
    while i < chars.len() {
        let c = chars[i];
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if c == ';' {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        let (start_line, start_col) = (line, col);
        let single = match c {
            '{' => Some(Tok::LBrace),
            '}' => Some(Tok::RBrace),
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            '[' => Some(Tok::LBracket),
            ']' => Some(Tok::RBracket),
            ',' => Some(Tok::Comma),
            ':' => Some(Tok::Colon),
            '=' => Some(Tok::Equals),
            _ => None,
        };
        if let Some(tok) = single {
            out.push(Token {
                tok,
                line: start_line,
                col: start_col,
            });
            i += 1;
            col += 1;
            continue;
        }
        if c == '%' || c == '@' {
            let mut j = i + 1;
            while j < chars.len() && is_ident_char(chars[j]) {
                j += 1;
            }
            if j == i + 1 {
                return Err(err(line, col, format!("expected a name after `{c}`")));
            }
            let name: String = chars[i + 1..j].iter().collect();
            let tok = if c == '%' {
                Tok::Reg(name)
            } else {
                Tok::Global(name)
            };
            out.push(Token {
                tok,
                line: start_line,
                col: start_col,
            });
            col += j - i;
            i = j;
            continue;
        }
        if c.is_ascii_digit() || (c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit()))
        {
            let neg = c == '-';
            let mut j = if neg { i + 1 } else { i };
            while j < chars.len() && is_ident_char(chars[j]) {
                j += 1;
            }
            let text: String = chars[if neg { i + 1 } else { i }..j].iter().collect();
            let parsed = if let Some(hex) = text.strip_prefix("0x") {
                u64::from_str_radix(hex, 16)
            } else {
                text.parse::<u64>()
            };
            let v = parsed.map_err(|_| err(line, col, format!("invalid integer `{text}`")))?;
            out.push(Token {
                tok: Tok::Int(if neg { v.wrapping_neg() } else { v }),
                line: start_line,
                col: start_col,
            });
            col += j - i;
            i = j;
            continue;
        }
        if is_ident_char(c) {
            let mut j = i;
            while j < chars.len() && is_ident_char(chars[j]) {
                j += 1;
            }
            out.push(Token {
                tok: Tok::Ident(chars[i..j].iter().collect()),
                line: start_line,
                col: start_col,
            });
            col += j - i;
            i = j;
            continue;
        }
        return Err(err(line, col, format!("unexpected character `{c}`")));
    }
    out.push(Token {
        tok: Tok::Eof,
        line,
        col,
    });
    Ok(out)
}

/// Names of the functions and globals, assigned ids in textual order before
/// bodies are parsed so that forward references resolve.
struct Symbols {
    funcs: HashMap<String, FuncId>,
    globals: HashMap<String, GlobalId>,
}

/// Per-function interning state.
#[derive(Default)]
struct FnScope {
    regs: HashMap<String, Reg>,
    reg_names: Vec<String>,
    defined: Vec<bool>,
    first_use: Vec<(usize, usize)>,
    labels: HashMap<String, BlockId>,
}

impl FnScope {
    fn intern(&mut self, name: &str, line: usize, col: usize) -> Reg {
        if let Some(r) = self.regs.get(name) {
            return *r;
        }
        let r = Reg(self.reg_names.len() as u32);
        self.regs.insert(name.to_string(), r);
        self.reg_names.push(name.to_string());
        self.defined.push(false);
        self.first_use.push((line, col));
        r
    }
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn peek_at(&self, n: usize) -> &Tok {
        &self.toks[(self.pos + n).min(self.toks.len() - 1)].tok
    }

    fn here(&self) -> (usize, usize) {
        let t = &self.toks[self.pos];
        (t.line, t.col)
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, kind: ParseErrorKind) -> ParseError {
        let (line, col) = self.here();
        ParseError { line, col, kind }
    }

    fn syntax<T>(&self, expected: &str) -> Result<T, ParseError> {
        Err(self.error(ParseErrorKind::Syntax(format!(
            "expected {expected}, found {}",
            self.peek().describe()
        ))))
    }

    fn expect(&mut self, tok: Tok) -> Result<(), ParseError> {
        if *self.peek() == tok {
            self.bump();
            Ok(())
        } else {
            self.syntax(&tok.describe())
        }
    }

    fn expect_ident(&mut self) -> Result<String, ParseError> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.bump();
                Ok(s)
            }
            _ => self.syntax("an identifier"),
        }
    }

    fn expect_int(&mut self) -> Result<u64, ParseError> {
        match *self.peek() {
            Tok::Int(v) => {
                self.bump();
                Ok(v)
            }
            _ => self.syntax("an integer"),
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<(), ParseError> {
        match self.peek() {
            Tok::Ident(s) if s == kw => {
                self.bump();
                Ok(())
            }
            _ => self.syntax(&format!("`{kw}`")),
        }
    }

    fn starts_value(&self) -> bool {
        matches!(self.peek(), Tok::Reg(_) | Tok::Int(_) | Tok::Global(_))
    }

    fn value(&mut self, scope: &mut FnScope, syms: &Symbols) -> Result<Value, ParseError> {
        let (line, col) = self.here();
        match self.peek().clone() {
            Tok::Reg(name) => {
                self.bump();
                Ok(Value::Reg(scope.intern(&name, line, col)))
            }
            Tok::Int(v) => {
                self.bump();
                Ok(Value::Const(v))
            }
            Tok::Global(name) => match syms.globals.get(&name) {
                Some(g) => {
                    self.bump();
                    Ok(Value::Global(*g))
                }
                None => Err(self.error(ParseErrorKind::UndefinedGlobal(name))),
            },
            _ => self.syntax("a value"),
        }
    }

    fn label(&mut self, scope: &FnScope) -> Result<BlockId, ParseError> {
        let (line, col) = self.here();
        let name = self.expect_ident()?;
        scope.labels.get(&name).copied().ok_or(ParseError {
            line,
            col,
            kind: ParseErrorKind::UndefinedLabel(name),
        })
    }

    fn define(&mut self, scope: &mut FnScope, name: &str, at: (usize, usize)) -> Result<Reg, ParseError> {
        let r = scope.intern(name, at.0, at.1);
        if scope.defined[r.0 as usize] {
            return Err(ParseError {
                line: at.0,
                col: at.1,
                kind: ParseErrorKind::DuplicateRegister(name.to_string()),
            });
        }
        scope.defined[r.0 as usize] = true;
        Ok(r)
    }

    fn call(
        &mut self,
        dst: Option<Reg>,
        scope: &mut FnScope,
        syms: &Symbols,
    ) -> Result<Inst, ParseError> {
        let (line, col) = self.here();
        let name = self.expect_ident()?;
        let callee = match Builtin::from_name(&name) {
            Some(b) => Callee::Builtin(b),
            None => match syms.funcs.get(&name) {
                Some(f) => Callee::Func(*f),
                None => {
                    return Err(ParseError {
                        line,
                        col,
                        kind: ParseErrorKind::UndefinedFunction(name),
                    })
                }
            },
        };
        self.expect(Tok::LParen)?;
        let mut args = Vec::new();
        if *self.peek() != Tok::RParen {
            loop {
                args.push(self.value(scope, syms)?);
                if *self.peek() == Tok::Comma {
                    self.bump();
                } else {
                    break;
                }
            }
        }
        self.expect(Tok::RParen)?;
        Ok(Inst::Call { dst, callee, args })
    }

    fn access_size(&mut self) -> Result<AccessSize, ParseError> {
        match self.peek().clone() {
            Tok::Ident(s) => match AccessSize::from_type_name(&s) {
                Some(sz) => {
                    self.bump();
                    Ok(sz)
                }
                None => self.syntax("an access type (i8, i16, i32, i64)"),
            },
            _ => self.syntax("an access type (i8, i16, i32, i64)"),
        }
    }

    fn inst(&mut self, scope: &mut FnScope, syms: &Symbols) -> Result<Inst, ParseError> {
        if let Tok::Reg(name) = self.peek().clone() {
            let at = self.here();
            self.bump();
            self.expect(Tok::Equals)?;
            let dst = self.define(scope, &name, at)?;
            let op = self.expect_ident()?;
            return Ok(match op.as_str() {
                "alloca" => Inst::Alloca {
                    dst,
                    size: self.expect_int()?,
                },
                "gep" => {
                    let base = self.value(scope, syms)?;
                    let mut indexes = Vec::new();
                    while *self.peek() == Tok::Comma {
                        self.bump();
                        self.expect(Tok::LBracket)?;
                        let idx = self.value(scope, syms)?;
                        self.keyword("x")?;
                        let scale = self.expect_int()?;
                        self.expect(Tok::RBracket)?;
                        indexes.push(GepIndex { idx, scale });
                    }
                    Inst::Gep { dst, base, indexes }
                }
                "load" => {
                    let size = self.access_size()?;
                    self.expect(Tok::Comma)?;
                    let ptr = self.value(scope, syms)?;
                    Inst::Load { dst, ptr, size }
                }
                "phi" => {
                    let mut incomings = Vec::new();
                    loop {
                        self.expect(Tok::LBracket)?;
                        let v = self.value(scope, syms)?;
                        self.expect(Tok::Comma)?;
                        let b = self.label(scope)?;
                        self.expect(Tok::RBracket)?;
                        incomings.push((v, b));
                        if *self.peek() == Tok::Comma {
                            self.bump();
                        } else {
                            break;
                        }
                    }
                    Inst::Phi { dst, incomings }
                }
                "cmp" => {
                    let m = self.expect_ident()?;
                    let Some(op) = CmpOp::from_mnemonic(&m) else {
                        return Err(self.error(ParseErrorKind::Syntax(format!(
                            "unknown comparison `{m}`"
                        ))));
                    };
                    let lhs = self.value(scope, syms)?;
                    self.expect(Tok::Comma)?;
                    let rhs = self.value(scope, syms)?;
                    Inst::Cmp { dst, op, lhs, rhs }
                }
                "call" => self.call(Some(dst), scope, syms)?,
                other => match BinOp::from_mnemonic(other) {
                    Some(op) => {
                        let lhs = self.value(scope, syms)?;
                        self.expect(Tok::Comma)?;
                        let rhs = self.value(scope, syms)?;
                        Inst::Bin { dst, op, lhs, rhs }
                    }
                    None => {
                        return Err(self.error(ParseErrorKind::Syntax(format!(
                            "unknown instruction `{other}`"
                        ))))
                    }
                },
            });
        }
        let op = self.expect_ident()?;
        Ok(match op.as_str() {
            "store" => {
                let size = self.access_size()?;
                let val = self.value(scope, syms)?;
                self.expect(Tok::Comma)?;
                let ptr = self.value(scope, syms)?;
                Inst::Store { ptr, val, size }
            }
            "br" => {
                let cond = self.value(scope, syms)?;
                self.expect(Tok::Comma)?;
                let then_bb = self.label(scope)?;
                self.expect(Tok::Comma)?;
                let else_bb = self.label(scope)?;
                Inst::Br {
                    cond,
                    then_bb,
                    else_bb,
                }
            }
            "jmp" => Inst::Jmp {
                target: self.label(scope)?,
            },
            "call" => self.call(None, scope, syms)?,
            "ret" => {
                // `ret %x = ...` would be a return followed by a definition.
                let has_val = self.starts_value()
                    && !(matches!(self.peek(), Tok::Reg(_)) && *self.peek_at(1) == Tok::Equals);
                let val = if has_val {
                    Some(self.value(scope, syms)?)
                } else {
                    None
                };
                Inst::Ret { val }
            }
            other => {
                return Err(self.error(ParseErrorKind::Syntax(format!(
                    "unknown instruction `{other}`"
                ))))
            }
        })
    }

    fn function(&mut self, syms: &Symbols) -> Result<Function, ParseError> {
        self.keyword("fn")?;
        let name = self.expect_ident()?;
        let mut scope = FnScope::default();
        let mut params = Vec::new();
        if *self.peek() == Tok::LParen {
            self.bump();
            if *self.peek() != Tok::RParen {
                loop {
                    let at = self.here();
                    match self.peek().clone() {
                        Tok::Reg(p) => {
                            self.bump();
                            params.push(self.define(&mut scope, &p, at)?);
                        }
                        _ => return self.syntax("a parameter register"),
                    }
                    if *self.peek() == Tok::Comma {
                        self.bump();
                    } else {
                        break;
                    }
                }
            }
            self.expect(Tok::RParen)?;
        }
        self.expect(Tok::LBrace)?;

        // Pre-scan labels so forward branches resolve to textual block order.
        let mut depth = 0usize;
        let mut k = self.pos;
        let mut labels = Vec::new();
        while k < self.toks.len() {
            match &self.toks[k].tok {
                Tok::LBrace => depth += 1,
                Tok::RBrace if depth == 0 => break,
                Tok::RBrace => depth -= 1,
                Tok::Ident(s) if self.toks.get(k + 1).map(|t| &t.tok) == Some(&Tok::Colon) => {
                    labels.push((s.clone(), self.toks[k].line, self.toks[k].col));
                }
                Tok::Eof => break,
                _ => {}
            }
            k += 1;
        }
        for (i, (l, line, col)) in labels.iter().enumerate() {
            if scope.labels.insert(l.clone(), BlockId(i)).is_some() {
                return Err(ParseError {
                    line: *line,
                    col: *col,
                    kind: ParseErrorKind::DuplicateLabel(l.clone()),
                });
            }
        }

        let mut blocks: Vec<BasicBlock> = Vec::new();
        loop {
            match (self.peek().clone(), self.peek_at(1).clone()) {
                (Tok::RBrace, _) => {
                    self.bump();
                    break;
                }
                (Tok::Ident(label), Tok::Colon) => {
                    self.bump();
                    self.bump();
                    blocks.push(BasicBlock {
                        label,
                        insts: Vec::new(),
                    });
                }
                (Tok::Eof, _) => return self.syntax("`}`"),
                _ => {
                    if blocks.is_empty() {
                        return self.syntax("a block label");
                    }
                    let inst = self.inst(&mut scope, syms)?;
                    blocks.last_mut().unwrap().insts.push(inst);
                }
            }
        }
        if blocks.is_empty() {
            return Err(self.error(ParseErrorKind::Syntax(format!(
                "function `{name}` has no blocks"
            ))));
        }
        if let Some(i) = scope.defined.iter().position(|d| !d) {
            let (line, col) = scope.first_use[i];
            return Err(ParseError {
                line,
                col,
                kind: ParseErrorKind::UndefinedRegister(scope.reg_names[i].clone()),
            });
        }
        Ok(Function {
            name,
            params,
            reg_names: scope.reg_names,
            blocks,
        })
    }
}

/// Parse a module from its text form. Registers and labels are resolved;
/// structural invariants (terminators, phi placement, dominance) are left
/// to [`super::validate`].
pub fn parse_module(src: &str) -> Result<Module, ParseError> {
    let toks = lex(src)?;

    let mut syms = Symbols {
        funcs: HashMap::new(),
        globals: HashMap::new(),
    };
    let mut global_order = 0;
    let mut func_order = 0;
    let mut depth = 0usize;
    for w in toks.windows(2) {
        match (&w[0].tok, &w[1].tok) {
            (Tok::LBrace, _) => depth += 1,
            (Tok::RBrace, _) => depth = depth.saturating_sub(1),
            (Tok::Ident(kw), Tok::Ident(name)) if depth == 0 && kw == "fn" => {
                if syms.funcs.insert(name.clone(), FuncId(func_order)).is_some() {
                    return Err(ParseError {
                        line: w[1].line,
                        col: w[1].col,
                        kind: ParseErrorKind::DuplicateFunction(name.clone()),
                    });
                }
                func_order += 1;
            }
            (Tok::Ident(kw), Tok::Global(name)) if depth == 0 && kw == "global" => {
                if syms
                    .globals
                    .insert(name.clone(), GlobalId(global_order))
                    .is_some()
                {
                    return Err(ParseError {
                        line: w[1].line,
                        col: w[1].col,
                        kind: ParseErrorKind::DuplicateGlobal(name.clone()),
                    });
                }
                global_order += 1;
            }
            _ => {}
        }
    }

    let mut p = Parser { toks, pos: 0 };
    let mut module = Module::default();
    loop {
        match p.peek().clone() {
            Tok::Eof => break,
            Tok::Ident(kw) if kw == "global" => {
                p.bump();
                let name = match p.peek().clone() {
                    Tok::Global(n) => {
                        p.bump();
                        n
                    }
                    _ => return p.syntax("a global name"),
                };
                let size = p.expect_int()?;
                module.globals.push(GlobalDef { name, size });
            }
            Tok::Ident(kw) if kw == "fn" => {
                let f = p.function(&syms)?;
                module.functions.push(f);
            }
            _ => return p.syntax("`fn` or `global`"),
        }
    }
    Ok(module)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_program() {
        let m = parse_module("fn main { entry: ret }").unwrap();
        assert_eq!(m.functions.len(), 1);
        let f = &m.functions[0];
        assert_eq!(f.blocks.len(), 1);
        assert_eq!(f.blocks[0].insts, vec![Inst::Ret { val: None }]);
    }

    #[test]
    fn undefined_register() {
        let err = parse_module("fn main {\nentry:\n  %y = add %x, 1\n  ret\n}").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::UndefinedRegister("x".into()));
        assert_eq!((err.line, err.col), (3, 12));
        assert!(err.to_string().contains("undefined register"));
    }

    #[test]
    fn duplicate_definition() {
        let err = parse_module("fn main { entry: %a = add 1, 2\n %a = add 1, 2\n ret }").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::DuplicateRegister("a".into()));
        assert_eq!(err.line, 2);
    }

    #[test]
    fn undefined_label() {
        let err = parse_module("fn main { entry: jmp nowhere }").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::UndefinedLabel("nowhere".into()));
    }

    #[test]
    fn syntax_error_position() {
        let err = parse_module("fn main {\nentry:\n  %a = alloca\n}").unwrap_err();
        assert!(matches!(err.kind, ParseErrorKind::Syntax(_)));
        assert_eq!(err.line, 4);
    }

    #[test]
    fn ret_followed_by_definition() {
        // `ret` then a new instruction: the register is not a return value.
        let m = parse_module("fn main { entry: ret %a = add 1, 2 ret }").unwrap();
        assert_eq!(m.functions[0].blocks[0].insts.len(), 3);
    }

    #[test]
    fn negative_and_hex_literals() {
        let m = parse_module("fn main { entry: %a = add -4, 0x10 ret }").unwrap();
        match &m.functions[0].blocks[0].insts[0] {
            Inst::Bin { lhs, rhs, .. } => {
                assert_eq!(*lhs, Value::Const(u64::MAX - 3));
                assert_eq!(*rhs, Value::Const(16));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn forward_function_and_global_refs() {
        let src = "fn main { entry: %r = call helper(@g) ret }\n\
                   fn helper(%p) { entry: ret %p }\n\
                   global @g 16";
        let m = parse_module(src).unwrap();
        assert_eq!(m.globals.len(), 1);
        match &m.functions[0].blocks[0].insts[0] {
            Inst::Call { callee, args, .. } => {
                assert_eq!(*callee, Callee::Func(FuncId(1)));
                assert_eq!(args, &vec![Value::Global(GlobalId(0))]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
