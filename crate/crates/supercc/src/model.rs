//! Proportional-hazards model specification and design-matrix assembly.
//!
//! A model is an ordered list of terms over expanded covariate column names.
//! Main-effect terms copy a column; interaction terms (`a:b`) multiply two
//! distinct columns elementwise.  Terms map one-to-one onto design columns,
//! so coefficient vectors are always reported in term order.

use thiserror::Error;

use crate::numeric::RowMat;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Term {
    Main(String),
    Interaction(String, String),
}

impl Term {
    /// Parses `"name"` or `"a:b"`.
    pub fn parse(s: &str) -> Result<Term, ModelError> {
        match s.split(':').collect::<Vec<_>>()[..] {
            [one] if !one.is_empty() => Ok(Term::Main(one.to_string())),
            [a, b] if !a.is_empty() && !b.is_empty() => {
                Ok(Term::Interaction(a.to_string(), b.to_string()))
            }
            _ => Err(ModelError::BadTerm(s.to_string())),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Term::Main(a) => a.clone(),
            Term::Interaction(a, b) => format!("{a}:{b}"),
        }
    }

    fn references(&self) -> Vec<&str> {
        match self {
            Term::Main(a) => vec![a],
            Term::Interaction(a, b) => vec![a, b],
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot parse model term `{0}`; expected `name` or `a:b`")]
    BadTerm(String),
    #[error("model term `{0}` references an undeclared covariate column")]
    UnknownColumn(String),
    #[error("duplicate model term `{0}`")]
    DuplicateTerm(String),
    #[error("interaction `{0}` multiplies a column with itself; not supported")]
    SelfInteraction(String),
    #[error("model has no terms")]
    Empty,
    #[error("design column `{column}` is missing a value for unit `{id}`")]
    MissingValue { column: String, id: String },
}

/// Ordered collection of model terms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoxModelSpec {
    terms: Vec<Term>,
}

impl CoxModelSpec {
    pub fn new(terms: Vec<Term>) -> Result<Self, ModelError> {
        if terms.is_empty() {
            return Err(ModelError::Empty);
        }
        for (i, t) in terms.iter().enumerate() {
            if let Term::Interaction(a, b) = t {
                if a == b {
                    return Err(ModelError::SelfInteraction(t.label()));
                }
            }
            if terms[..i].contains(t) {
                return Err(ModelError::DuplicateTerm(t.label()));
            }
        }
        Ok(CoxModelSpec { terms })
    }

    /// Parses a list of `name` / `a:b` strings.
    pub fn parse(labels: &[&str]) -> Result<Self, ModelError> {
        let terms = labels.iter().map(|s| Term::parse(s)).collect::<Result<Vec<_>, _>>()?;
        CoxModelSpec::new(terms)
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Design/coefficient column labels, in term order.
    pub fn labels(&self) -> Vec<String> {
        self.terms.iter().map(Term::label).collect()
    }

    /// Checks that every referenced column exists among `available`.
    pub fn validate_against(&self, available: &[String]) -> Result<(), ModelError> {
        for t in &self.terms {
            for name in t.references() {
                if !available.iter().any(|c| c == name) {
                    return Err(ModelError::UnknownColumn(name.to_string()));
                }
            }
        }
        Ok(())
    }

    /// The sub-specification containing only terms fully expressible with
    /// the given columns (used to restrict an analysis model to its
    /// fully observed block).
    pub fn restricted_to(&self, available: &[String]) -> Result<Self, ModelError> {
        let terms: Vec<Term> = self
            .terms
            .iter()
            .filter(|t| t.references().iter().all(|n| available.iter().any(|c| c == *n)))
            .cloned()
            .collect();
        CoxModelSpec::new(terms)
    }
}

/// Named column bundle that designs are assembled from.  Rows must already
/// be restricted to the units being modeled.
pub struct ColumnSet<'a> {
    names: Vec<&'a str>,
    cols: Vec<&'a [f64]>,
    /// Unit labels for error messages; may be empty.
    ids: &'a [String],
}

impl<'a> ColumnSet<'a> {
    pub fn new(names: Vec<&'a str>, cols: Vec<&'a [f64]>, ids: &'a [String]) -> Self {
        assert_eq!(names.len(), cols.len());
        ColumnSet { names, cols, ids }
    }

    fn column(&self, name: &str) -> Option<&'a [f64]> {
        self.names.iter().position(|c| *c == name).map(|j| self.cols[j])
    }

    fn n(&self) -> usize {
        self.cols.first().map_or(0, |c| c.len())
    }
}

/// Builds the design matrix (one row per unit, one column per term).
///
/// Every design cell must be present and finite; a `NaN` (missing expensive
/// value) is reported with the offending column and unit id.
pub fn build_design(spec: &CoxModelSpec, columns: &ColumnSet) -> Result<RowMat, ModelError> {
    let n = columns.n();
    let k = spec.len();
    let mut design = RowMat::zeros(n, k);
    for (j, term) in spec.terms().iter().enumerate() {
        let filled: Vec<f64> = match term {
            Term::Main(a) => {
                let col = columns.column(a).ok_or_else(|| ModelError::UnknownColumn(a.clone()))?;
                col.to_vec()
            }
            Term::Interaction(a, b) => {
                let ca = columns.column(a).ok_or_else(|| ModelError::UnknownColumn(a.clone()))?;
                let cb = columns.column(b).ok_or_else(|| ModelError::UnknownColumn(b.clone()))?;
                ca.iter().zip(cb).map(|(x, y)| x * y).collect()
            }
        };
        for (i, v) in filled.iter().enumerate() {
            if v.is_nan() {
                let id = columns.ids.get(i).cloned().unwrap_or_else(|| format!("row {i}"));
                return Err(ModelError::MissingValue { column: term.label(), id });
            }
            design.set(i, j, *v);
        }
    }
    Ok(design)
}
