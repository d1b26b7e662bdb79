//! JSON structure definitions with per-component coordinate expressions.
//!
//! ```json
//! {
//!   "name": "heisenberg-file",
//!   "n": 3, "m": 2, "regularity": "C11",
//!   "domain": { "min": [-1, -1, -1], "max": [1, 1, 1] },
//!   "fields": [["1", "0", "-x2/2"], ["0", "1", "x1/2"]]
//! }
//! ```
//!
//! Jacobians are obtained by symbolic differentiation of the expressions.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{DomainBox, Regularity, SRStructure, StructureSource, VectorField};
use crate::error::{Error, Result};
use crate::expr::Expr;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainDef {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureDef {
    pub name: String,
    pub n: usize,
    pub m: usize,
    pub regularity: Regularity,
    pub domain: DomainDef,
    /// `m` lists of `n` component expressions in `x1..xn`.
    pub fields: Vec<Vec<String>>,
}

struct ExprField {
    components: Vec<Expr>,
    /// Row-major partial derivatives.
    partials: Vec<Expr>,
}

impl VectorField for ExprField {
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(&self.components) {
            *o = e.eval(x);
        }
    }

    fn jacobian(&self, x: &[f64], out: &mut [f64]) -> bool {
        for (o, e) in out.iter_mut().zip(&self.partials) {
            *o = e.eval(x);
        }
        true
    }
}

impl StructureDef {
    pub fn from_json(text: &str) -> Result<Self> {
        let def: StructureDef = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        Ok(def)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn build(&self) -> Result<SRStructure> {
        if self.fields.len() != self.m {
            return Err(Error::Schema(format!(
                "expected {} fields, found {}",
                self.m,
                self.fields.len()
            )));
        }
        if self.domain.min.len() != self.n || self.domain.max.len() != self.n {
            return Err(Error::Schema(format!("domain bounds must have length n = {}", self.n)));
        }
        let domain = DomainBox::new(self.domain.min.clone(), self.domain.max.clone())?;
        let mut fields: Vec<Arc<dyn VectorField>> = Vec::with_capacity(self.m);
        for (i, comps) in self.fields.iter().enumerate() {
            if comps.len() != self.n {
                return Err(Error::Schema(format!(
                    "field {} has {} components, expected {}",
                    i + 1,
                    comps.len(),
                    self.n
                )));
            }
            let components = comps
                .iter()
                .enumerate()
                .map(|(k, src)| {
                    Expr::parse(src, self.n).map_err(|e| match e {
                        Error::Parse { line, column, message } => Error::Parse {
                            line,
                            column,
                            message: format!("field {} component {}: {message}", i + 1, k + 1),
                        },
                        other => other,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let partials = components
                .iter()
                .flat_map(|e| (0..self.n).map(move |c| e.diff(c)))
                .collect();
            fields.push(Arc::new(ExprField { components, partials }));
        }
        let mut s = SRStructure::new(self.name.clone(), fields, domain, self.regularity)?;
        s.source = StructureSource::Definition {
            definition: self.clone(),
        };
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structures::{builtin, evaluate_frame, field_jacobian};

    const HEIS: &str = r#"{
        "name": "heisenberg-file",
        "n": 3, "m": 2, "regularity": "C11",
        "domain": { "min": [-3, -3, -3], "max": [3, 3, 3] },
        "fields": [["1", "0", "-x2/2"], ["0", "1", "x1/2"]]
    }"#;

    #[test]
    fn file_structure_matches_builtin() {
        let s = StructureDef::from_json(HEIS).unwrap().build().unwrap();
        let h = builtin("heisenberg").unwrap();
        let p = [0.3, -1.1, 0.7];
        assert!((evaluate_frame(&s, &p).unwrap() - evaluate_frame(&h, &p).unwrap()).amax() < 1e-15);
        for i in 0..2 {
            let a = field_jacobian(&s, i, &p).unwrap();
            let b = field_jacobian(&h, i, &p).unwrap();
            assert!((a - b).amax() < 1e-15);
        }
    }

    #[test]
    fn expression_errors_are_located() {
        let bad = HEIS.replace("\"x1/2\"", "\"x1 /* 2\"");
        match StructureDef::from_json(&bad).unwrap().build() {
            Err(Error::Parse { line, column, message }) => {
                assert_eq!((line, column), (1, 5));
                assert!(message.contains("field 2 component 3"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn json_errors_are_located() {
        match StructureDef::from_json("{\n  \"name\": 3\n}") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schema_mismatch_rejected() {
        let bad = HEIS.replace("\"m\": 2", "\"m\": 3");
        assert!(matches!(
            StructureDef::from_json(&bad).unwrap().build(),
            Err(Error::Schema(_))
        ));
    }
}
