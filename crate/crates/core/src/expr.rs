//! Arithmetic expressions over named numeric variables, backed by evalexpr.
//!
//! Integer literals are promoted to floats before parsing, so `1/2` is `0.5`.
//! Functions use evalexpr's builtin names (`math::exp`, `math::cos`, `min`, ...);
//! `pi` is predefined.

use evalexpr::error::EvalexprResultValue;
use evalexpr::{
    build_operator_tree, Context, DefaultNumericTypes, EvalexprError, EvalexprResult, Node, Value,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Expr {
    source: String,
    node: Node<DefaultNumericTypes>,
    variables: Vec<String>,
}

impl Expr {
    pub fn parse(source: &str) -> Result<Self> {
        let node = build_operator_tree::<DefaultNumericTypes>(&promote_int_literals(source))
            .map_err(|e| Error::invalid(format!("cannot parse expression `{source}`: {e}")))?;
        let mut variables: Vec<String> = Vec::new();
        for v in node.iter_read_variable_identifiers() {
            if v != "pi" && !variables.iter().any(|x| x == v) {
                variables.push(v.to_string());
            }
        }
        Ok(Self {
            source: source.to_string(),
            node,
            variables,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Variables read by the expression, in first-use order.
    pub fn variables(&self) -> &[String] {
        &self.variables
    }

    /// Evaluate with `values[i]` bound to `variables()[i]`.
    pub fn eval(&self, values: &[f64]) -> Result<f64> {
        debug_assert_eq!(values.len(), self.variables.len());
        let ctx = SliceContext {
            names: &self.variables,
            values: values.iter().map(|&v| Value::Float(v)).collect(),
            pi: Value::Float(std::f64::consts::PI),
        };
        self.node
            .eval_number_with_context(&ctx)
            .map_err(|e| Error::invalid(format!("evaluating `{}`: {e}", self.source)))
    }
}

struct SliceContext<'a> {
    names: &'a [String],
    values: Vec<Value<DefaultNumericTypes>>,
    pi: Value<DefaultNumericTypes>,
}

impl Context for SliceContext<'_> {
    type NumericTypes = DefaultNumericTypes;

    fn get_value(&self, identifier: &str) -> Option<&Value<DefaultNumericTypes>> {
        if identifier == "pi" {
            return Some(&self.pi);
        }
        self.names
            .iter()
            .position(|n| n == identifier)
            .map(|i| &self.values[i])
    }

    fn call_function(
        &self,
        identifier: &str,
        _argument: &Value<DefaultNumericTypes>,
    ) -> EvalexprResultValue<DefaultNumericTypes> {
        Err(EvalexprError::FunctionIdentifierNotFound(identifier.to_string()))
    }

    fn are_builtin_functions_disabled(&self) -> bool {
        false
    }

    fn set_builtin_functions_disabled(
        &mut self,
        _disabled: bool,
    ) -> EvalexprResult<(), DefaultNumericTypes> {
        Err(EvalexprError::ContextNotMutable)
    }
}

fn promote_int_literals(src: &str) -> String {
    let chars: Vec<char> = src.chars().collect();
    let mut out = String::with_capacity(src.len() + 8);
    let mut i = 0;
    let mut in_string = false;
    while i < chars.len() {
        let c = chars[i];
        if c == '"' {
            in_string = !in_string;
        }
        let prev = if i > 0 { Some(chars[i - 1]) } else { None };
        let starts_number = !in_string
            && c.is_ascii_digit()
            && !prev.is_some_and(|p| p.is_alphanumeric() || p == '_' || p == '.' || p == ':');
        if !starts_number {
            out.push(c);
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && chars[i].is_ascii_digit() {
            i += 1;
        }
        out.extend(&chars[start..i]);
        let next = chars.get(i).copied();
        if !next.is_some_and(|n| n == '.' || n.is_alphanumeric() || n == '_') {
            out.push_str(".0");
        }
    }
    out
}
