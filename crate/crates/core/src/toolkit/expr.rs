//! Arithmetic expression evaluator backing `eval_expression` and the
//! desk-scale `code_agent`.
//!
//! Grammar (lowest to highest precedence):
//!
//! ```text
//! expr    := term (("+" | "-") term)*
//! term    := unary (("*" | "×" | "/" | "÷") unary)*
//! unary   := ("-" | "+") unary | power
//! power   := primary ("^" unary)?          right-associative
//! primary := number | "pi" | "π" | func "(" expr ("," expr)* ")" | "(" expr ")"
//! func    := sqrt | abs | sin | cos | min | max
//! ```
//!
//! `-2^2` is `-4`, and `2^-1` is `0.5`.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("parse error at byte {pos}: {message}")]
    ParseError { pos: usize, message: String },
    #[error("division by zero")]
    DivisionByZero,
    #[error("domain error: {0}")]
    DomainError(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Token {
    Num(f64),
    Ident(usize, usize),
    Op(char),
    LParen,
    RParen,
    Comma,
}

fn tokenize(src: &str) -> Result<Vec<(usize, Token)>, ExprError> {
    let mut out = Vec::new();
    let mut chars = src.char_indices().peekable();
    while let Some(&(pos, ch)) = chars.peek() {
        match ch {
            c if c.is_whitespace() => {
                chars.next();
            }
            '0'..='9' | '.' => {
                let start = pos;
                let mut end = pos;
                let mut seen_exp = false;
                while let Some(&(p, c)) = chars.peek() {
                    let accept = c.is_ascii_digit()
                        || c == '.'
                        || (!seen_exp && (c == 'e' || c == 'E') && {
                            // exponent only when followed by a digit or signed digit
                            let rest = &src[p + 1..];
                            rest.starts_with(|d: char| d.is_ascii_digit())
                                || ((rest.starts_with('+') || rest.starts_with('-'))
                                    && rest[1..].starts_with(|d: char| d.is_ascii_digit()))
                        });
                    if !accept {
                        break;
                    }
                    if c == 'e' || c == 'E' {
                        seen_exp = true;
                        chars.next();
                        if let Some(&(sp, s)) = chars.peek() {
                            if s == '+' || s == '-' {
                                chars.next();
                                end = sp + 1;
                                continue;
                            }
                        }
                        end = p + 1;
                        continue;
                    }
                    chars.next();
                    end = p + c.len_utf8();
                }
                let text = &src[start..end];
                let value: f64 = text.parse().map_err(|_| ExprError::ParseError {
                    pos: start,
                    message: format!("bad number {text:?}"),
                })?;
                out.push((start, Token::Num(value)));
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = pos;
                let mut end = pos;
                while let Some(&(p, c)) = chars.peek() {
                    if c.is_alphanumeric() || c == '_' {
                        chars.next();
                        end = p + c.len_utf8();
                    } else {
                        break;
                    }
                }
                out.push((start, Token::Ident(start, end)));
            }
            '+' | '-' | '*' | '/' | '^' | '×' | '÷' | '−' => {
                chars.next();
                let op = match ch {
                    '×' => '*',
                    '÷' => '/',
                    '−' => '-',
                    other => other,
                };
                out.push((pos, Token::Op(op)));
            }
            '(' => {
                chars.next();
                out.push((pos, Token::LParen));
            }
            ')' => {
                chars.next();
                out.push((pos, Token::RParen));
            }
            ',' => {
                chars.next();
                out.push((pos, Token::Comma));
            }
            other => {
                return Err(ExprError::ParseError {
                    pos,
                    message: format!("unexpected character {other:?}"),
                })
            }
        }
    }
    Ok(out)
}

struct Parser<'a> {
    src: &'a str,
    tokens: Vec<(usize, Token)>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<Token> {
        self.tokens.get(self.pos).map(|&(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.tokens
            .get(self.pos)
            .map(|&(p, _)| p)
            .unwrap_or(self.src.len())
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, ExprError> {
        Err(ExprError::ParseError {
            pos: self.offset(),
            message: message.into(),
        })
    }

    fn expect(&mut self, want: Token, what: &str) -> Result<(), ExprError> {
        if self.peek() == Some(want) {
            self.pos += 1;
            Ok(())
        } else {
            self.err(format!("expected {what}"))
        }
    }

    fn expr(&mut self) -> Result<f64, ExprError> {
        let mut acc = self.term()?;
        while let Some(Token::Op(op @ ('+' | '-'))) = self.peek() {
            self.pos += 1;
            let rhs = self.term()?;
            acc = if op == '+' { acc + rhs } else { acc - rhs };
        }
        Ok(acc)
    }

    fn term(&mut self) -> Result<f64, ExprError> {
        let mut acc = self.unary()?;
        while let Some(Token::Op(op @ ('*' | '/'))) = self.peek() {
            self.pos += 1;
            let rhs = self.unary()?;
            if op == '*' {
                acc *= rhs;
            } else {
                if rhs == 0.0 {
                    return Err(ExprError::DivisionByZero);
                }
                acc /= rhs;
            }
        }
        Ok(acc)
    }

    fn unary(&mut self) -> Result<f64, ExprError> {
        match self.peek() {
            Some(Token::Op('-')) => {
                self.pos += 1;
                Ok(-self.unary()?)
            }
            Some(Token::Op('+')) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<f64, ExprError> {
        let base = self.primary()?;
        if let Some(Token::Op('^')) = self.peek() {
            self.pos += 1;
            let exp = self.unary()?;
            if base == 0.0 && exp < 0.0 {
                return Err(ExprError::DivisionByZero);
            }
            let value = base.powf(exp);
            if value.is_nan() {
                return Err(ExprError::DomainError(format!("{base}^{exp} is not real")));
            }
            return Ok(value);
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<f64, ExprError> {
        match self.peek() {
            Some(Token::Num(v)) => {
                self.pos += 1;
                Ok(v)
            }
            Some(Token::LParen) => {
                self.pos += 1;
                let v = self.expr()?;
                self.expect(Token::RParen, "')'")?;
                Ok(v)
            }
            Some(Token::Ident(s, e)) => {
                let name = &self.src[s..e];
                self.pos += 1;
                if name == "pi" || name == "π" {
                    return Ok(std::f64::consts::PI);
                }
                if !matches!(name, "sqrt" | "abs" | "sin" | "cos" | "min" | "max") {
                    self.pos -= 1;
                    return self.err(format!("unknown identifier {name:?}"));
                }
                self.expect(Token::LParen, "'(' after function name")?;
                let mut args = vec![self.expr()?];
                while self.peek() == Some(Token::Comma) {
                    self.pos += 1;
                    args.push(self.expr()?);
                }
                self.expect(Token::RParen, "')'")?;
                apply(name, &args).or_else(|e| match e {
                    ArityError => self.err(format!("wrong number of arguments to {name}")),
                })?
            }
            Some(_) => self.err("expected a number, function or '('"),
            None => self.err("unexpected end of expression"),
        }
    }
}

struct ArityError;

fn apply(name: &str, args: &[f64]) -> Result<Result<f64, ExprError>, ArityError> {
    let one = || if args.len() == 1 { Ok(args[0]) } else { Err(ArityError) };
    Ok(match name {
        "sqrt" => {
            let x = one()?;
            if x < 0.0 {
                Err(ExprError::DomainError(format!("sqrt of negative number {x}")))
            } else {
                Ok(x.sqrt())
            }
        }
        "abs" => Ok(one()?.abs()),
        "sin" => Ok(one()?.sin()),
        "cos" => Ok(one()?.cos()),
        "min" => Ok(args.iter().copied().fold(f64::INFINITY, f64::min)),
        "max" => Ok(args.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
        _ => unreachable!("checked by caller"),
    })
}

pub fn eval_expression(src: &str) -> Result<f64, ExprError> {
    let tokens = tokenize(src)?;
    let mut parser = Parser { src, tokens, pos: 0 };
    let value = parser.expr()?;
    if parser.pos != parser.tokens.len() {
        return parser.err("trailing input");
    }
    if !value.is_finite() {
        return Err(ExprError::DomainError("result is not finite".into()));
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(eval_expression("2*(3+4)"), Ok(14.0));
        assert_eq!(eval_expression("sqrt(16)+1"), Ok(5.0));
        assert_eq!(eval_expression("1/0"), Err(ExprError::DivisionByZero));
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(eval_expression("1+2*3"), Ok(7.0));
        assert_eq!(eval_expression("2^3^2"), Ok(512.0));
        assert_eq!(eval_expression("-2^2"), Ok(-4.0));
        assert_eq!(eval_expression("2^-1"), Ok(0.5));
        assert_eq!(eval_expression("8/4/2"), Ok(1.0));
        assert_eq!(eval_expression("10-4-3"), Ok(3.0));
        assert_eq!(eval_expression("--3"), Ok(3.0));
        assert_eq!(eval_expression("6 × 7 ÷ 2 − 1"), Ok(20.0));
    }

    #[test]
    fn functions_and_constants() {
        assert_eq!(eval_expression("max(1, 5, 3) - min(4, 2)"), Ok(3.0));
        assert_eq!(eval_expression("abs(-2.5)"), Ok(2.5));
        assert!((eval_expression("cos(pi)").unwrap() + 1.0).abs() < 1e-15);
        assert!(eval_expression("sin(0)").unwrap().abs() < 1e-15);
        assert_eq!(eval_expression("1.5e2 + 2E-1"), Ok(150.2));
    }

    #[test]
    fn errors() {
        assert!(matches!(eval_expression("sqrt(-1)"), Err(ExprError::DomainError(_))));
        assert!(matches!(eval_expression("(-8)^0.5"), Err(ExprError::DomainError(_))));
        assert!(matches!(eval_expression("0^-1"), Err(ExprError::DivisionByZero)));
        for bad in ["", "1+", "(1", "1)", "foo(1)", "sqrt(1,2)", "2 $ 3", "1 2", "min()", "sqrt 4"] {
            assert!(
                matches!(eval_expression(bad), Err(ExprError::ParseError { .. })),
                "{bad:?} -> {:?}",
                eval_expression(bad)
            );
        }
        assert!(matches!(eval_expression("10^400"), Err(ExprError::DomainError(_))));
    }
}
