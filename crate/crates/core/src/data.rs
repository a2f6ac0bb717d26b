//! Column-typed tables and the source/target dataset collection.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "values", rename_all = "snake_case")]
pub enum Column {
    Numeric(Vec<f64>),
    Categorical(Vec<String>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Column::Numeric(_) => "numeric",
            Column::Categorical(_) => "categorical",
        }
    }

    /// String form of a cell, used for category matching on either type.
    pub fn cell_string(&self, row: usize) -> String {
        match self {
            Column::Numeric(v) => format_number_cell(v[row]),
            Column::Categorical(v) => v[row].clone(),
        }
    }
}

fn format_number_cell(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

/// A named table of equally long columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    columns: Vec<(String, Column)>,
}

impl Table {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            columns: Vec::new(),
        }
    }

    pub fn with_column(mut self, name: impl Into<String>, column: Column) -> Result<Self> {
        self.push(name, column)?;
        Ok(self)
    }

    pub fn push(&mut self, name: impl Into<String>, column: Column) -> Result<()> {
        let name = name.into();
        if self.columns.iter().any(|(n, _)| *n == name) {
            return Err(Error::invalid(format!(
                "table `{}` already has a column `{name}`",
                self.name
            )));
        }
        if let Some((_, first)) = self.columns.first() {
            if first.len() != column.len() {
                return Err(Error::invalid(format!(
                    "column `{name}` of table `{}` has {} rows, expected {}",
                    self.name,
                    column.len(),
                    first.len()
                )));
            }
        }
        self.columns.push((name, column));
        Ok(())
    }

    pub fn nrows(&self) -> usize {
        self.columns.first().map_or(0, |(_, c)| c.len())
    }

    pub fn ncols(&self) -> usize {
        self.columns.len()
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|(n, _)| n.as_str())
    }

    pub fn columns(&self) -> &[(String, Column)] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, c)| c)
    }

    pub fn numeric(&self, name: &str) -> Result<&[f64]> {
        match self.column(name) {
            Some(Column::Numeric(v)) => Ok(v),
            Some(Column::Categorical(_)) => Err(Error::invalid(format!(
                "column `{name}` of table `{}` is categorical, a numeric column is required",
                self.name
            ))),
            None => Err(Error::UnknownColumn {
                column: name.into(),
                context: format!("table `{}`", self.name),
            }),
        }
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Table {
        let columns = self
            .columns
            .iter()
            .map(|(n, c)| {
                let c = match c {
                    Column::Numeric(v) => Column::Numeric(rows.iter().map(|&i| v[i]).collect()),
                    Column::Categorical(v) => {
                        Column::Categorical(rows.iter().map(|&i| v[i].clone()).collect())
                    }
                };
                (n.clone(), c)
            })
            .collect();
        Table {
            name: self.name.clone(),
            columns,
        }
    }

    /// Row-wise concatenation; schemas must match exactly.
    pub fn concat(name: impl Into<String>, tables: &[&Table]) -> Result<Table> {
        let name = name.into();
        let Some(first) = tables.first() else {
            return Ok(Table::new(name));
        };
        let mut out = Table::new(name);
        for (col, c0) in &first.columns {
            let merged = match c0 {
                Column::Numeric(_) => {
                    let mut v = Vec::new();
                    for t in tables {
                        v.extend_from_slice(t.numeric(col)?);
                    }
                    Column::Numeric(v)
                }
                Column::Categorical(_) => {
                    let mut v = Vec::new();
                    for t in tables {
                        match t.column(col) {
                            Some(Column::Categorical(c)) => v.extend(c.iter().cloned()),
                            _ => {
                                return Err(Error::invalid(format!(
                                    "column `{col}` is not categorical in table `{}`",
                                    t.name
                                )))
                            }
                        }
                    }
                    Column::Categorical(v)
                }
            };
            out.push(col.clone(), merged)?;
        }
        Ok(out)
    }
}

/// K labelled source tables and one target table with covariates only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetCollection {
    pub sources: Vec<Table>,
    pub target: Table,
    pub outcome: Option<String>,
}

impl DatasetCollection {
    pub fn new(sources: Vec<Table>, target: Table, outcome: Option<String>) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::invalid("at least one source dataset is required"));
        }
        let covariates: BTreeSet<&str> = target
            .column_names()
            .filter(|c| Some(*c) != outcome.as_deref())
            .collect();
        for s in &sources {
            if s.nrows() < 2 {
                return Err(Error::invalid(format!(
                    "source dataset `{}` has {} rows; at least 2 are required",
                    s.name,
                    s.nrows()
                )));
            }
            if let Some(y) = &outcome {
                if s.column(y).is_none() {
                    return Err(Error::invalid(format!(
                        "source dataset `{}` lacks the outcome column `{y}`",
                        s.name
                    )));
                }
            }
            let cols: BTreeSet<&str> = s
                .column_names()
                .filter(|c| Some(*c) != outcome.as_deref())
                .collect();
            if cols != covariates {
                let diff: Vec<&str> = cols.symmetric_difference(&covariates).copied().collect();
                return Err(Error::invalid(format!(
                    "covariate schema of `{}` differs from target `{}`; mismatched columns: {}",
                    s.name,
                    target.name,
                    diff.join(", ")
                )));
            }
            for c in &covariates {
                let (a, b) = (s.column(c).unwrap(), target.column(c).unwrap());
                if a.kind() != b.kind() {
                    return Err(Error::invalid(format!(
                        "column `{c}` is {} in `{}` but {} in target `{}`",
                        a.kind(),
                        s.name,
                        b.kind(),
                        target.name
                    )));
                }
            }
        }
        if target.nrows() == 0 {
            return Err(Error::invalid(format!("target dataset `{}` is empty", target.name)));
        }
        Ok(Self {
            sources,
            target,
            outcome,
        })
    }

    pub fn k(&self) -> usize {
        self.sources.len()
    }

    pub fn source_sizes(&self) -> Vec<usize> {
        self.sources.iter().map(Table::nrows).collect()
    }

    pub fn source_names(&self) -> Vec<String> {
        self.sources.iter().map(|t| t.name.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(name: &str, cols: &[&str]) -> Table {
        let mut t = Table::new(name);
        for c in cols {
            t.push(*c, Column::Numeric(vec![1.0, 2.0, 3.0])).unwrap();
        }
        t
    }

    #[test]
    fn covariate_only_target_is_accepted() {
        let s = vec![table("a", &["x", "y"]), table("b", &["x", "y"])];
        let d = DatasetCollection::new(s, table("t", &["x"]), Some("y".into())).unwrap();
        assert_eq!(d.k(), 2);
    }

    #[test]
    fn schema_mismatch_lists_symmetric_difference() {
        let s = vec![table("a", &["x", "z", "y"])];
        let err = DatasetCollection::new(s, table("t", &["x", "w"]), Some("y".into()))
            .unwrap_err()
            .to_string();
        assert!(err.contains("w, z"), "{err}");
    }

    #[test]
    fn ragged_columns_are_rejected() {
        let mut t = table("a", &["x"]);
        assert!(t.push("y", Column::Numeric(vec![1.0])).is_err());
    }

    #[test]
    fn concat_stacks_rows() {
        let a = table("a", &["x"]);
        let c = Table::concat("p", &[&a, &a]).unwrap();
        assert_eq!(c.nrows(), 6);
    }
}
