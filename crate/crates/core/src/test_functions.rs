//! Scalar test functions of the covariates, declared as short strings:
//!
//! - `column:<name>`
//! - `indicator:<col>=<value>`
//! - `product:<a>*<b>` or `product:<a>*<b>:standardized`
//! - `expr:<arithmetic over column names>`
//! - `auto_indicators:<col>` expands to one indicator per observed category
//!
//! Standardization constants and auto-expanded categories are computed from
//! the pooled source tables.

use std::collections::BTreeSet;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{Column, DatasetCollection, Table};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::stats;

type NativeFn = Arc<dyn Fn(&Table) -> Result<Vec<f64>> + Send + Sync>;

#[derive(Clone)]
enum Kind {
    Column(String),
    Indicator { column: String, value: String },
    Product {
        a: String,
        b: String,
        /// `(mean_a, sd_a, mean_b, sd_b)` from pooled source data.
        scale: Option<(f64, f64, f64, f64)>,
    },
    Expr(Expr),
    Native(NativeFn),
}

#[derive(Clone)]
pub struct TestFunction {
    pub name: String,
    kind: Kind,
}

impl std::fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "TestFunction({})", self.name)
    }
}

impl TestFunction {
    pub fn column(name: &str) -> Self {
        Self {
            name: format!("column:{name}"),
            kind: Kind::Column(name.into()),
        }
    }

    pub fn indicator(column: &str, value: &str) -> Self {
        Self {
            name: format!("indicator:{column}={value}"),
            kind: Kind::Indicator {
                column: column.into(),
                value: value.into(),
            },
        }
    }

    /// A function given directly as code, evaluated on a whole table.
    pub fn native(
        name: impl Into<String>,
        f: impl Fn(&Table) -> Result<Vec<f64>> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            kind: Kind::Native(Arc::new(f)),
        }
    }

    /// Columns the function reads, when known statically.
    pub fn columns(&self) -> Vec<String> {
        match &self.kind {
            Kind::Column(c) => vec![c.clone()],
            Kind::Indicator { column, .. } => vec![column.clone()],
            Kind::Product { a, b, .. } => vec![a.clone(), b.clone()],
            Kind::Expr(e) => e.variables().to_vec(),
            Kind::Native(_) => Vec::new(),
        }
    }

    fn column_ref<'t>(&self, table: &'t Table, col: &str) -> Result<&'t Column> {
        table.column(col).ok_or_else(|| Error::UnknownColumn {
            column: col.into(),
            context: format!("test function `{}` on dataset `{}`", self.name, table.name),
        })
    }

    fn numeric<'t>(&self, table: &'t Table, col: &str) -> Result<&'t [f64]> {
        match self.column_ref(table, col)? {
            Column::Numeric(v) => Ok(v),
            Column::Categorical(_) => Err(Error::TestFunction {
                name: self.name.clone(),
                reason: format!("column `{col}` is categorical"),
            }),
        }
    }

    /// Values on every row of a table; non-finite values are an error.
    pub fn evaluate(&self, table: &Table) -> Result<Vec<f64>> {
        let values = match &self.kind {
            Kind::Column(c) => self.numeric(table, c)?.to_vec(),
            Kind::Indicator { column, value } => match self.column_ref(table, column)? {
                Column::Categorical(v) => v.iter().map(|s| f64::from(u8::from(s == value))).collect(),
                Column::Numeric(v) => {
                    let target: f64 = value.parse().map_err(|_| Error::TestFunction {
                        name: self.name.clone(),
                        reason: format!("`{value}` is not a number but `{column}` is numeric"),
                    })?;
                    v.iter().map(|&x| f64::from(u8::from(x == target))).collect()
                }
            },
            Kind::Product { a, b, scale } => {
                let (xa, xb) = (self.numeric(table, a)?, self.numeric(table, b)?);
                let (ma, sa, mb, sb) = scale.unwrap_or((0.0, 1.0, 0.0, 1.0));
                xa.iter()
                    .zip(xb)
                    .map(|(x, y)| (x - ma) / sa * (y - mb) / sb)
                    .collect()
            }
            Kind::Expr(e) => {
                let cols: Vec<&[f64]> = e
                    .variables()
                    .iter()
                    .map(|c| self.numeric(table, c))
                    .collect::<Result<_>>()?;
                let mut buf = vec![0.0; cols.len()];
                let mut out = Vec::with_capacity(table.nrows());
                for row in 0..table.nrows() {
                    for (b, c) in buf.iter_mut().zip(&cols) {
                        *b = c[row];
                    }
                    out.push(e.eval(&buf).map_err(|err| Error::TestFunction {
                        name: self.name.clone(),
                        reason: format!("row {}: {err}", row + 1),
                    })?);
                }
                out
            }
            Kind::Native(f) => {
                let v = f(table)?;
                if v.len() != table.nrows() {
                    return Err(Error::TestFunction {
                        name: self.name.clone(),
                        reason: format!("returned {} values for {} rows", v.len(), table.nrows()),
                    });
                }
                v
            }
        };
        if let Some(row) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                dataset: table.name.clone(),
                row: row + 1,
                function: self.name.clone(),
            });
        }
        Ok(values)
    }
}

/// How the raw test functions are linearly transformed before use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "provenance", rename_all = "snake_case")]
pub enum Whitening {
    Identity,
    /// Inverse square root of the pooled covariance plus `ridge * I`.
    Empirical {
        transform: DMatrix<f64>,
        ridge: f64,
    },
    UserSupplied { transform: DMatrix<f64> },
}

impl Whitening {
    pub fn transform(&self) -> Option<&DMatrix<f64>> {
        match self {
            Whitening::Identity => None,
            Whitening::Empirical { transform, .. } | Whitening::UserSupplied { transform } => {
                Some(transform)
            }
        }
    }

    pub fn provenance(&self) -> &'static str {
        match self {
            Whitening::Identity => "identity",
            Whitening::Empirical { .. } => "empirical",
            Whitening::UserSupplied { .. } => "user_supplied",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TestFunctionSet {
    pub functions: Vec<TestFunction>,
    pub whitening: Whitening,
}

impl TestFunctionSet {
    pub fn new(functions: Vec<TestFunction>) -> Self {
        Self {
            functions,
            whitening: Whitening::Identity,
        }
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.functions.iter().map(|f| f.name.clone()).collect()
    }

    pub fn with_whitening(mut self, whitening: Whitening) -> Result<Self> {
        if let Some(t) = whitening.transform() {
            if t.nrows() != self.len() || t.ncols() != self.len() {
                return Err(Error::invalid(format!(
                    "whitening transform is {}x{} but there are {} test functions",
                    t.nrows(),
                    t.ncols(),
                    self.len()
                )));
            }
        }
        self.whitening = whitening;
        Ok(self)
    }

    /// Parse declarations against a dataset collection.
    pub fn parse(specs: &[String], data: &DatasetCollection) -> Result<Self> {
        let pooled = pooled_sources(data)?;
        let mut functions = Vec::new();
        for spec in specs {
            functions.extend(parse_one(spec, &pooled, data)?);
        }
        let mut seen = BTreeSet::new();
        for f in &functions {
            if !seen.insert(f.name.clone()) {
                return Err(Error::TestFunction {
                    name: f.name.clone(),
                    reason: "declared more than once".into(),
                });
            }
        }
        if functions.is_empty() {
            return Err(Error::config("no test functions declared"));
        }
        Ok(Self::new(functions))
    }
}

fn pooled_sources(data: &DatasetCollection) -> Result<Table> {
    let refs: Vec<&Table> = data.sources.iter().collect();
    Table::concat("pooled sources", &refs)
}

fn bad(spec: &str, reason: impl Into<String>) -> Error {
    Error::TestFunction {
        name: spec.into(),
        reason: reason.into(),
    }
}

fn parse_one(spec: &str, pooled: &Table, data: &DatasetCollection) -> Result<Vec<TestFunction>> {
    let (kind, rest) = spec
        .split_once(':')
        .ok_or_else(|| bad(spec, "expected `<kind>:<argument>`"))?;
    let rest = rest.trim();
    let require = |col: &str| -> Result<()> {
        if data.target.column(col).is_none() {
            return Err(Error::UnknownColumn {
                column: col.into(),
                context: format!("test function `{spec}` (target covariates)"),
            });
        }
        Ok(())
    };
    let f = match kind.trim() {
        "column" => {
            require(rest)?;
            TestFunction {
                name: spec.into(),
                kind: Kind::Column(rest.into()),
            }
        }
        "indicator" => {
            let (col, value) = rest
                .split_once('=')
                .ok_or_else(|| bad(spec, "expected `indicator:<column>=<value>`"))?;
            require(col.trim())?;
            TestFunction {
                name: spec.into(),
                kind: Kind::Indicator {
                    column: col.trim().into(),
                    value: value.trim().into(),
                },
            }
        }
        "product" => {
            let (pair, standardized) = match rest.rsplit_once(':') {
                Some((p, "standardized")) => (p, true),
                Some((_, other)) => return Err(bad(spec, format!("unknown product option `{other}`"))),
                None => (rest, false),
            };
            let (a, b) = pair
                .split_once('*')
                .ok_or_else(|| bad(spec, "expected `product:<a>*<b>`"))?;
            let (a, b) = (a.trim().to_string(), b.trim().to_string());
            require(&a)?;
            require(&b)?;
            let scale = if standardized {
                let xa = pooled.numeric(&a)?;
                let xb = pooled.numeric(&b)?;
                let (sa, sb) = (stats::pop_variance(xa).sqrt(), stats::pop_variance(xb).sqrt());
                if !(sa > 0.0 && sb > 0.0) {
                    return Err(bad(spec, "cannot standardize a constant column"));
                }
                Some((stats::mean(xa), sa, stats::mean(xb), sb))
            } else {
                None
            };
            TestFunction {
                name: spec.into(),
                kind: Kind::Product { a, b, scale },
            }
        }
        "expr" => {
            let e = Expr::parse(rest)?;
            for v in e.variables() {
                require(v)?;
            }
            TestFunction {
                name: spec.into(),
                kind: Kind::Expr(e),
            }
        }
        "auto_indicators" => {
            require(rest)?;
            let col = pooled.column(rest).expect("schema validated");
            let mut cats: BTreeSet<String> = BTreeSet::new();
            for i in 0..col.len() {
                cats.insert(col.cell_string(i));
            }
            return Ok(cats.iter().map(|c| TestFunction::indicator(rest, c)).collect());
        }
        other => return Err(bad(spec, format!("unknown test function kind `{other}`"))),
    };
    Ok(vec![f])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn collection() -> DatasetCollection {
        let s1 = Table::new("s1")
            .with_column("x", Column::Numeric(vec![1.0, 2.0, 3.0]))
            .unwrap()
            .with_column("occ", Column::Categorical(vec!["a".into(), "b".into(), "a".into()]))
            .unwrap()
            .with_column("y", Column::Numeric(vec![0.0, 1.0, 0.0]))
            .unwrap();
        let s2 = Table::new("s2")
            .with_column("x", Column::Numeric(vec![4.0, 5.0]))
            .unwrap()
            .with_column("occ", Column::Categorical(vec!["c".into(), "b".into()]))
            .unwrap()
            .with_column("y", Column::Numeric(vec![1.0, 1.0]))
            .unwrap();
        let t = Table::new("t")
            .with_column("x", Column::Numeric(vec![1.0]))
            .unwrap()
            .with_column("occ", Column::Categorical(vec!["a".into()]))
            .unwrap();
        DatasetCollection::new(vec![s1, s2], t, Some("y".into())).unwrap()
    }

    #[test]
    fn parse_all_kinds() {
        let d = collection();
        let specs: Vec<String> = [
            "column:x",
            "indicator:occ=a",
            "product:x*x:standardized",
            "expr:x*x + 1",
            "auto_indicators:occ",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let err = TestFunctionSet::parse(&specs, &d).unwrap_err();
        // `indicator:occ=a` is produced twice.
        assert!(err.to_string().contains("more than once"));
        let set = TestFunctionSet::parse(&specs[2..], &d).unwrap();
        assert_eq!(set.len(), 5);
        let v = set.functions[1].evaluate(&d.sources[0]).unwrap();
        assert_eq!(v, vec![2.0, 5.0, 10.0]);
        let ind = set.functions[3].evaluate(&d.sources[0]).unwrap();
        assert_eq!(ind, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn standardized_product_has_unit_scale_on_pooled_data() {
        let d = collection();
        let set = TestFunctionSet::parse(&["product:x*x:standardized".into()], &d).unwrap();
        let pooled = pooled_sources(&d).unwrap();
        let v = set.functions[0].evaluate(&pooled).unwrap();
        assert!((stats::mean(&v) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn outcome_is_not_a_covariate() {
        let d = collection();
        let err = TestFunctionSet::parse(&["column:y".into()], &d).unwrap_err();
        assert!(matches!(err, Error::UnknownColumn { .. }));
    }

    #[test]
    fn non_finite_values_name_the_row() {
        let d = collection();
        let set = TestFunctionSet::parse(&["expr:1/(x - 2)".into()], &d).unwrap();
        match set.functions[0].evaluate(&d.sources[0]).unwrap_err() {
            Error::NonFinite { dataset, row, function } => {
                assert_eq!((dataset.as_str(), row, function.as_str()), ("s1", 2, "expr:1/(x - 2)"));
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn unknown_kind_is_rejected() {
        let d = collection();
        assert!(TestFunctionSet::parse(&["square:x".into()], &d).is_err());
    }
}
