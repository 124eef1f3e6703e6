//! Arithmetic expressions over `t` and `x_1..x_n`.
//!
//! Grammar: numbers, `t`, `x_i`, `+ - * / ^`, unary minus and the functions
//! `exp`, `tanh`, `arctan` (one argument) and `min`, `max` (two arguments).
//! `^` is right-associative and binds tighter than unary minus, so `-x_1^2`
//! is `-(x_1^2)`. Columns in errors are one-based.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Tok {
    Num(f64),
    Ident,
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
    End,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    text: String,
    column: usize,
}

fn err(column: usize, message: impl Into<String>) -> Error {
    Error::Expr {
        column,
        message: message.into(),
    }
}

fn tokenize(src: &str) -> Result<Vec<Token>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let column = i + 1;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let single = match c {
            '+' => Some(Tok::Plus),
            '-' => Some(Tok::Minus),
            '*' => Some(Tok::Star),
            '/' => Some(Tok::Slash),
            '^' => Some(Tok::Caret),
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            ',' => Some(Tok::Comma),
            _ => None,
        };
        if let Some(tok) = single {
            out.push(Token {
                tok,
                text: c.to_string(),
                column,
            });
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v: f64 = text.parse().map_err(|_| err(column, format!("malformed number '{text}'")))?;
            out.push(Token {
                tok: Tok::Num(v),
                text,
                column,
            });
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Token {
                tok: Tok::Ident,
                text: chars[start..i].iter().collect(),
                column,
            });
        } else {
            return Err(err(column, format!("unexpected character '{c}'")));
        }
    }
    out.push(Token {
        tok: Tok::End,
        text: String::new(),
        column: chars.len() + 1,
    });
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Func {
    Exp,
    Tanh,
    Arctan,
    Min,
    Max,
}

impl Func {
    fn lookup(name: &str) -> Option<Func> {
        Some(match name {
            "exp" => Func::Exp,
            "tanh" => Func::Tanh,
            "arctan" => Func::Arctan,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }

    fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Time,
    Var(usize),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

const UNARY_BP: u8 = 25;

fn infix_bp(tok: Tok) -> Option<(BinOp, u8, u8)> {
    Some(match tok {
        Tok::Plus => (BinOp::Add, 10, 11),
        Tok::Minus => (BinOp::Sub, 10, 11),
        Tok::Star => (BinOp::Mul, 20, 21),
        Tok::Slash => (BinOp::Div, 20, 21),
        Tok::Caret => (BinOp::Pow, 31, 30),
        _ => return None,
    })
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    n_vars: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn next(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if t.tok != Tok::End {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<Token> {
        let t = self.next();
        if t.tok == tok {
            Ok(t)
        } else {
            Err(err(t.column, format!("expected {what}, found {}", describe(&t))))
        }
    }

    fn expr(&mut self, min_bp: u8) -> Result<Node> {
        let t = self.next();
        let mut lhs = match t.tok {
            Tok::Num(v) => Node::Num(v),
            Tok::Minus => Node::Neg(Box::new(self.expr(UNARY_BP)?)),
            Tok::LParen => {
                let inner = self.expr(0)?;
                self.expect(Tok::RParen, "')'")?;
                inner
            }
            Tok::Ident => self.ident(&t)?,
            _ => return Err(err(t.column, format!("expected a value, found {}", describe(&t)))),
        };
        loop {
            let op = self.peek().clone();
            let Some((bin, lbp, rbp)) = infix_bp(op.tok) else {
                match op.tok {
                    Tok::End | Tok::RParen | Tok::Comma => break,
                    _ => return Err(err(op.column, format!("expected an operator, found {}", describe(&op)))),
                }
            };
            if lbp < min_bp {
                break;
            }
            self.next();
            let rhs = self.expr(rbp)?;
            lhs = Node::Bin(bin, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn ident(&mut self, t: &Token) -> Result<Node> {
        if t.text == "t" {
            return Ok(Node::Time);
        }
        if let Some(idx) = t.text.strip_prefix("x_") {
            let i: usize = idx
                .parse()
                .map_err(|_| err(t.column, format!("bad variable '{}'", t.text)))?;
            if i == 0 || i > self.n_vars {
                return Err(err(
                    t.column,
                    format!("variable '{}' out of range: expected x_1..x_{}", t.text, self.n_vars),
                ));
            }
            return Ok(Node::Var(i - 1));
        }
        let Some(func) = Func::lookup(&t.text) else {
            return Err(err(t.column, format!("unknown name '{}'", t.text)));
        };
        self.expect(Tok::LParen, &format!("'(' after '{}'", t.text))?;
        let mut args = vec![self.expr(0)?];
        while self.peek().tok == Tok::Comma {
            self.next();
            args.push(self.expr(0)?);
        }
        self.expect(Tok::RParen, "')'")?;
        if args.len() != func.arity() {
            return Err(err(
                t.column,
                format!("'{}' takes {} argument(s), got {}", t.text, func.arity(), args.len()),
            ));
        }
        Ok(Node::Call(func, args))
    }
}

fn describe(t: &Token) -> String {
    if t.tok == Tok::End {
        "end of input".into()
    } else {
        format!("'{}'", t.text)
    }
}

/// A parsed expression with a fixed number of state variables.
#[derive(Clone, PartialEq)]
pub struct Expr {
    source: String,
    n_vars: usize,
    root: Node,
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({:?})", self.source)
    }
}

impl Expr {
    pub fn parse(source: &str, n_vars: usize) -> Result<Expr> {
        let mut p = Parser {
            tokens: tokenize(source)?,
            pos: 0,
            n_vars,
        };
        let root = p.expr(0)?;
        let end = p.next();
        if end.tok != Tok::End {
            return Err(err(end.column, format!("unexpected {}", describe(&end))));
        }
        Ok(Expr {
            source: source.to_string(),
            n_vars,
            root,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    /// Whether the expression mentions `t`.
    pub fn uses_time(&self) -> bool {
        fn walk(n: &Node) -> bool {
            match n {
                Node::Time => true,
                Node::Num(_) | Node::Var(_) => false,
                Node::Neg(a) => walk(a),
                Node::Bin(_, a, b) => walk(a) || walk(b),
                Node::Call(_, args) => args.iter().any(walk),
            }
        }
        walk(&self.root)
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        eval(&self.root, t, x)
    }
}

fn eval(n: &Node, t: f64, x: &[f64]) -> f64 {
    match n {
        Node::Num(v) => *v,
        Node::Time => t,
        Node::Var(i) => x[*i],
        Node::Neg(a) => -eval(a, t, x),
        Node::Bin(op, a, b) => {
            let (a, b) = (eval(a, t, x), eval(b, t, x));
            match op {
                BinOp::Add => a + b,
                BinOp::Sub => a - b,
                BinOp::Mul => a * b,
                BinOp::Div => a / b,
                BinOp::Pow => a.powf(b),
            }
        }
        Node::Call(f, args) => {
            let a = eval(&args[0], t, x);
            match f {
                Func::Exp => a.exp(),
                Func::Tanh => a.tanh(),
                Func::Arctan => a.atan(),
                Func::Min => a.min(eval(&args[1], t, x)),
                Func::Max => a.max(eval(&args[1], t, x)),
            }
        }
    }
}
