//! Text form for kernel expressions: `SE(sf,l) * PER(s2,p,l2) + WN(s)`.
//! `*` binds tighter than `+`; parentheses group.

use super::{BaseKernelKind, KernelExpr};
use crate::error::{Error, Result};

pub fn format_kernel(expr: &KernelExpr) -> String {
    fn go(expr: &KernelExpr, parent_is_product: bool, out: &mut String) {
        match expr {
            KernelExpr::Base { kind, params } => {
                out.push_str(kind.symbol());
                out.push('(');
                out.push_str(&params.join(","));
                out.push(')');
            }
            KernelExpr::Sum(a, b) => {
                if parent_is_product {
                    out.push('(');
                }
                go(a, false, out);
                out.push_str(" + ");
                go(b, false, out);
                if parent_is_product {
                    out.push(')');
                }
            }
            KernelExpr::Product(a, b) => {
                go(a, true, out);
                out.push_str(" * ");
                go(b, true, out);
            }
        }
    }
    let mut s = String::new();
    go(expr, false, &mut s);
    s
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            position: self.pos,
            message: message.into(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(format!("expected `{}`", c as char)))
        }
    }

    fn ident(&mut self) -> Result<String> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
        {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected identifier"));
        }
        Ok(std::str::from_utf8(&self.src[start..self.pos])
            .expect("ascii")
            .to_string())
    }

    fn sum(&mut self) -> Result<KernelExpr> {
        let mut left = self.product()?;
        while self.peek() == Some(b'+') {
            self.pos += 1;
            let right = self.product()?;
            left = KernelExpr::Sum(Box::new(left), Box::new(right));
        }
        Ok(left)
    }

    fn product(&mut self) -> Result<KernelExpr> {
        let mut left = self.atom()?;
        while self.peek() == Some(b'*') {
            self.pos += 1;
            let right = self.atom()?;
            left = KernelExpr::Product(Box::new(left), Box::new(right));
        }
        Ok(left)
    }

    fn atom(&mut self) -> Result<KernelExpr> {
        if self.peek() == Some(b'(') {
            self.pos += 1;
            let inner = self.sum()?;
            self.expect(b')')?;
            return Ok(inner);
        }
        let name = self.ident()?;
        let kind = match name.to_ascii_uppercase().as_str() {
            "SE" => BaseKernelKind::Se,
            "LIN" => BaseKernelKind::Lin,
            "PER" => BaseKernelKind::Per,
            "WN" => BaseKernelKind::Wn,
            "CONST" | "C" => BaseKernelKind::Const,
            "RQ" => BaseKernelKind::Rq,
            other => return Err(self.err(format!("unknown kernel symbol `{other}`"))),
        };
        self.expect(b'(')?;
        let mut params = Vec::new();
        if self.peek() != Some(b')') {
            loop {
                params.push(self.ident()?);
                if self.peek() == Some(b',') {
                    self.pos += 1;
                } else {
                    break;
                }
            }
        }
        self.expect(b')')?;
        if params.len() != kind.arity() {
            return Err(self.err(format!(
                "{} expects {} parameters, got {}",
                kind.symbol(),
                kind.arity(),
                params.len()
            )));
        }
        Ok(KernelExpr::Base { kind, params })
    }
}

pub fn parse_kernel(text: &str) -> Result<KernelExpr> {
    let mut p = Parser {
        src: text.as_bytes(),
        pos: 0,
    };
    let expr = p.sum()?;
    if p.peek().is_some() {
        return Err(p.err("trailing input"));
    }
    Ok(expr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{add_funcs, mult_funcs};

    #[test]
    fn round_trip() {
        let expr = add_funcs(
            mult_funcs(
                KernelExpr::base(BaseKernelKind::Se, &["sf", "l"]),
                KernelExpr::base(BaseKernelKind::Per, &["s2", "p", "l2"]),
            ),
            KernelExpr::base(BaseKernelKind::Wn, &["s"]),
        );
        let text = format_kernel(&expr);
        assert_eq!(text, "SE(sf,l) * PER(s2,p,l2) + WN(s)");
        assert_eq!(parse_kernel(&text).unwrap(), expr);
    }

    #[test]
    fn parenthesized_sum_inside_product() {
        let expr = mult_funcs(
            add_funcs(
                KernelExpr::base(BaseKernelKind::Lin, &["a"]),
                KernelExpr::base(BaseKernelKind::Per, &["b", "c", "d"]),
            ),
            KernelExpr::base(BaseKernelKind::Wn, &["e"]),
        );
        let text = format_kernel(&expr);
        assert_eq!(text, "(LIN(a) + PER(b,c,d)) * WN(e)");
        assert_eq!(parse_kernel(&text).unwrap(), expr);
    }

    #[test]
    fn errors_carry_position() {
        match parse_kernel("SE(sf,l) + ZZ(a)") {
            Err(Error::Parse { position, .. }) => assert!(position > 8),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(parse_kernel("SE(sf)").is_err()); // wrong arity
        assert!(parse_kernel("SE(sf,l) +").is_err());
    }
}
