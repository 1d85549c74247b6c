//! Complete-data datasets of integer states, read and written as CSV with a
//! header row of variable names. Missing values are rejected.

use crate::error::{Error, Result};
use crate::vars::{Assignment, VarId, VariableSpace};
use std::sync::Arc;

#[derive(Debug, Clone)]
pub struct Dataset {
    space: Arc<VariableSpace>,
    vars: Vec<VarId>,
    rows: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn new(space: Arc<VariableSpace>, vars: Vec<VarId>, rows: Vec<Vec<usize>>) -> Result<Dataset> {
        for (ri, row) in rows.iter().enumerate() {
            if row.len() != vars.len() {
                return Err(Error::Parse(format!("row {ri} has {} fields", row.len())));
            }
            for (ci, &s) in row.iter().enumerate() {
                if s >= space.card(vars[ci]) {
                    return Err(Error::StateOutOfRange {
                        var: space.name(vars[ci]).to_string(),
                        state: s,
                        card: space.card(vars[ci]),
                    });
                }
            }
        }
        Ok(Dataset { space, vars, rows })
    }

    pub fn space(&self) -> &Arc<VariableSpace> {
        &self.space
    }

    pub fn vars(&self) -> &[VarId] {
        &self.vars
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    pub fn assignment(&self, row: usize) -> Assignment {
        let mut a = Assignment::new();
        for (ci, &v) in self.vars.iter().enumerate() {
            a.set(v, self.rows[row][ci]);
        }
        a
    }

    /// Empirical count of rows matching a partial assignment.
    pub fn count_matching(&self, partial: &Assignment) -> usize {
        self.rows
            .iter()
            .filter(|row| {
                partial.iter().all(|(v, s)| {
                    self.vars
                        .iter()
                        .position(|&dv| dv == v)
                        .map(|ci| row[ci] == s)
                        .unwrap_or(false)
                })
            })
            .count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let names: Vec<&str> = self.vars.iter().map(|&v| self.space.name(v)).collect();
        out.push_str(&names.join(","));
        out.push('\n');
        for row in &self.rows {
            let fields: Vec<String> = row.iter().map(|s| s.to_string()).collect();
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(space: Arc<VariableSpace>, text: &str) -> Result<Dataset> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty dataset".into()))?;
        let vars: Vec<VarId> = header
            .split(',')
            .map(|name| space.lookup(name.trim()))
            .collect::<Result<_>>()?;
        let mut rows = Vec::new();
        for (li, line) in lines.enumerate() {
            let row: Vec<usize> = line
                .split(',')
                .map(|f| {
                    let f = f.trim();
                    if f.is_empty() {
                        return Err(Error::Parse(format!("missing value on data row {}", li + 1)));
                    }
                    f.parse::<usize>()
                        .map_err(|_| Error::Parse(format!("bad state `{f}` on data row {}", li + 1)))
                })
                .collect::<Result<_>>()?;
            rows.push(row);
        }
        Dataset::new(space, vars, rows)
    }
}
