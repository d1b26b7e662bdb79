use std::sync::Arc;

use super::{fn_field, DomainBox, Regularity, SRStructure, StructureSource, VectorField};
use crate::error::{Error, Result};

pub const BUILTIN_NAMES: [&str; 7] = [
    "euclidean2",
    "euclidean3",
    "heisenberg",
    "martinet",
    "grushin",
    "flat_nonbracket",
    "duplicated_line",
];

type Jac = fn(&[f64], &mut [f64]);

fn constant(v: Vec<f64>) -> Arc<dyn VectorField> {
    let n = v.len();
    fn_field(
        move |_x: &[f64], out: &mut [f64]| out.copy_from_slice(&v),
        Some(move |_x: &[f64], out: &mut [f64]| out[..n * n].fill(0.0)),
    )
}

fn axis(n: usize, k: usize) -> Arc<dyn VectorField> {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    constant(v)
}

fn finish(
    name: &str,
    fields: Vec<Arc<dyn VectorField>>,
    domain: DomainBox,
    regularity: Regularity,
) -> Result<SRStructure> {
    let mut s = SRStructure::new(name, fields, domain, regularity)?;
    s.source = StructureSource::Builtin { name: name.to_string() };
    Ok(s)
}

/// The registry of example structures. Domains are `[-3, 3]^n` unless noted,
/// `[-1, 1]^n` for the two C0 examples.
///
/// * `euclidean2`, `euclidean3`: coordinate frames on `[-5, 5]^n`.
/// * `heisenberg`: `X1 = d_x - (y/2) d_z`, `X2 = d_y + (x/2) d_z`.
/// * `martinet`: `X1 = d_x`, `X2 = d_y + x^2 d_z`.
/// * `grushin`: `X1 = d_x`, `X2 = x d_y`, rank drops on `x = 0` (C0).
/// * `flat_nonbracket`: `d_x`, `d_y` in R^3, never bracket generating.
/// * `duplicated_line`: `X1 = X2 = d_x` on R (C0, dependent fields).
pub fn builtin(name: &str) -> Result<SRStructure> {
    match name {
        "euclidean2" => finish(
            name,
            (0..2).map(|k| axis(2, k)).collect(),
            DomainBox::cube(2, 5.0),
            Regularity::C11,
        ),
        "euclidean3" => finish(
            name,
            (0..3).map(|k| axis(3, k)).collect(),
            DomainBox::cube(3, 5.0),
            Regularity::C11,
        ),
        "heisenberg" => {
            let x1 = fn_field(
                |x: &[f64], out: &mut [f64]| {
                    out[0] = 1.0;
                    out[1] = 0.0;
                    out[2] = -0.5 * x[1];
                },
                Some(
                    (|_x: &[f64], out: &mut [f64]| {
                        out[..9].fill(0.0);
                        out[2 * 3 + 1] = -0.5;
                    }) as Jac,
                ),
            );
            let x2 = fn_field(
                |x: &[f64], out: &mut [f64]| {
                    out[0] = 0.0;
                    out[1] = 1.0;
                    out[2] = 0.5 * x[0];
                },
                Some(
                    (|_x: &[f64], out: &mut [f64]| {
                        out[..9].fill(0.0);
                        out[2 * 3] = 0.5;
                    }) as Jac,
                ),
            );
            finish(name, vec![x1, x2], DomainBox::cube(3, 3.0), Regularity::C11)
        }
        "martinet" => {
            let x2 = fn_field(
                |x: &[f64], out: &mut [f64]| {
                    out[0] = 0.0;
                    out[1] = 1.0;
                    out[2] = x[0] * x[0];
                },
                Some(
                    (|x: &[f64], out: &mut [f64]| {
                        out[..9].fill(0.0);
                        out[2 * 3] = 2.0 * x[0];
                    }) as Jac,
                ),
            );
            finish(name, vec![axis(3, 0), x2], DomainBox::cube(3, 3.0), Regularity::C11)
        }
        "grushin" => {
            let x2 = fn_field(
                |x: &[f64], out: &mut [f64]| {
                    out[0] = 0.0;
                    out[1] = x[0];
                },
                Some(
                    (|_x: &[f64], out: &mut [f64]| {
                        out[..4].fill(0.0);
                        out[2] = 1.0;
                    }) as Jac,
                ),
            );
            finish(name, vec![axis(2, 0), x2], DomainBox::cube(2, 1.0), Regularity::C0)
        }
        "flat_nonbracket" => finish(
            name,
            vec![axis(3, 0), axis(3, 1)],
            DomainBox::cube(3, 3.0),
            Regularity::C11,
        ),
        "duplicated_line" => finish(
            name,
            vec![axis(1, 0), axis(1, 0)],
            DomainBox::cube(1, 1.0),
            Regularity::C0,
        ),
        other => Err(Error::UnknownStructure(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_shapes() {
        let h = builtin("heisenberg").unwrap();
        assert_eq!((h.n, h.m, h.regularity), (3, 2, Regularity::C11));
        let g = builtin("grushin").unwrap();
        assert_eq!((g.n, g.m, g.regularity), (2, 2, Regularity::C0));
        let d = builtin("duplicated_line").unwrap();
        assert_eq!((d.n, d.m, d.regularity), (1, 2, Regularity::C0));
        assert!(matches!(builtin("nosuch"), Err(Error::UnknownStructure(_))));
        for name in BUILTIN_NAMES {
            assert_eq!(builtin(name).unwrap().name, name);
        }
    }
}
