//! Line-oriented alignment trace: `key=value` header, one CSV row per inner
//! iteration, then the selected atoms of each outer iteration.
//!
//! ```text
//! converged=true
//! tau_final=1,0,3.0000002,-1.9999998
//! iterations=2
//! outer,inner,delta_norm,residual,objective
//! 0,0,3.6,0.41,0.17
//! 0,1,0.00002,0.40,0.16
//! selected=1
//! outer,atoms
//! 0,3 4 7
//! ```

use std::fmt::Write as _;

use crate::align::{AlignResult, IterationRecord};
use crate::error::{MrlrError, Result};
use crate::transform::SimilarityParams;

pub const RECORD_HEADER: &str = "outer,inner,delta_norm,residual,objective";
pub const SELECTED_HEADER: &str = "outer,atoms";

#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub converged: bool,
    pub tau_final: SimilarityParams,
    pub records: Vec<IterationRecord>,
    pub selected: Vec<Vec<usize>>,
}

impl From<&AlignResult> for Trace {
    fn from(r: &AlignResult) -> Self {
        Trace {
            converged: r.converged,
            tau_final: r.tau_final,
            records: r.trace.clone(),
            selected: r.selected_atoms.clone(),
        }
    }
}

impl Trace {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let t = &self.tau_final;
        let _ = writeln!(s, "converged={}", self.converged);
        let _ = writeln!(s, "tau_final={},{},{},{}", t.a, t.b, t.tx, t.ty);
        let _ = writeln!(s, "iterations={}", self.records.len());
        let _ = writeln!(s, "{RECORD_HEADER}");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{},{}", r.outer, r.inner, r.delta_norm, r.residual_norm, r.objective);
        }
        let _ = writeln!(s, "selected={}", self.selected.len());
        let _ = writeln!(s, "{SELECTED_HEADER}");
        for (outer, atoms) in self.selected.iter().enumerate() {
            let list: Vec<String> = atoms.iter().map(|j| j.to_string()).collect();
            let _ = writeln!(s, "{outer},{}", list.join(" "));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Trace> {
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| {
            lines
                .next()
                .map(|(i, l)| (i + 1, l))
                .ok_or_else(|| bad(0, &format!("missing {what}")))
        };
        let converged = match key_value(next("converged")?, "converged")? {
            "true" => true,
            "false" => false,
            other => return Err(bad(1, &format!("invalid flag {other:?}"))),
        };
        let (n, line) = next("tau_final")?;
        let tau: Vec<f64> = key_value((n, line), "tau_final")?
            .split(',')
            .map(|v| parse_num(n, v))
            .collect::<Result<_>>()?;
        if tau.len() != 4 {
            return Err(bad(n, "tau_final needs four values"));
        }
        let tau_final = SimilarityParams::new(tau[0], tau[1], tau[2], tau[3])?;
        let (n, line) = next("iterations")?;
        let count: usize = parse_num(n, key_value((n, line), "iterations")?)?;
        expect(next("record header")?, RECORD_HEADER)?;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let (n, line) = next("iteration record")?;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(n, "iteration record needs five fields"));
            }
            records.push(IterationRecord {
                outer: parse_num(n, f[0])?,
                inner: parse_num(n, f[1])?,
                delta_norm: parse_num(n, f[2])?,
                residual_norm: parse_num(n, f[3])?,
                objective: parse_num(n, f[4])?,
            });
        }
        let (n, line) = next("selected")?;
        let count: usize = parse_num(n, key_value((n, line), "selected")?)?;
        expect(next("selection header")?, SELECTED_HEADER)?;
        let mut selected = Vec::with_capacity(count);
        for outer in 0..count {
            let (n, line) = next("selection")?;
            let (idx, atoms) = line.split_once(',').ok_or_else(|| bad(n, "selection needs two fields"))?;
            if parse_num::<usize>(n, idx)? != outer {
                return Err(bad(n, "selections out of order"));
            }
            selected.push(
                atoms
                    .split_whitespace()
                    .map(|v| parse_num(n, v))
                    .collect::<Result<_>>()?,
            );
        }
        if let Some((i, _)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(bad(i + 1, "trailing content"));
        }
        Ok(Trace {
            converged,
            tau_final,
            records,
            selected,
        })
    }
}

fn bad(line: usize, msg: &str) -> MrlrError {
    MrlrError::Format(format!("trace line {line}: {msg}"))
}

fn key_value<'a>((n, line): (usize, &'a str), key: &str) -> Result<&'a str> {
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix('='))
        .ok_or_else(|| bad(n, &format!("expected {key}=")))
}

fn expect((n, line): (usize, &str), header: &str) -> Result<()> {
    if line == header {
        Ok(())
    } else {
        Err(bad(n, &format!("expected header {header:?}")))
    }
}

fn parse_num<T: std::str::FromStr>(n: usize, s: &str) -> Result<T> {
    s.trim().parse().map_err(|_| bad(n, &format!("invalid number {s:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Trace {
        Trace {
            converged: true,
            tau_final: SimilarityParams::new(1.0000000000000002, -1e-17, 3.25, -2.0).unwrap(),
            records: vec![
                IterationRecord { outer: 0, inner: 0, delta_norm: 3.6, residual_norm: 0.41, objective: 0.1681 },
                IterationRecord { outer: 0, inner: 1, delta_norm: 2e-5, residual_norm: 0.1 / 3.0, objective: f64::MIN_POSITIVE },
            ],
            selected: vec![vec![3, 4, 7], vec![]],
        }
    }

    #[test]
    fn text_layout() {
        let text = sample().to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "converged=true");
        assert_eq!(lines[3], RECORD_HEADER);
        assert_eq!(lines[4], "0,0,3.6,0.41,0.1681");
        assert_eq!(lines[8], "0,3 4 7");
        assert_eq!(lines[9], "1,");
    }

    #[test]
    fn parses_back_exactly() {
        let t = sample();
        assert_eq!(Trace::parse(&t.to_text()).unwrap(), t);
    }

    #[test]
    fn rejects_malformed() {
        let text = sample().to_text();
        for broken in [
            text.replace("converged=true", "converged=yes"),
            text.replace("iterations=2", "iterations=3"),
            text.replace("0,0,3.6", "0,0,x"),
            format!("{text}junk\n"),
            text.replace(RECORD_HEADER, "outer,inner"),
        ] {
            assert!(matches!(Trace::parse(&broken), Err(MrlrError::Format(_))), "{broken}");
        }
    }

    proptest! {
        #[test]
        fn roundtrip_is_lossless(vals in prop::collection::vec((any::<f64>(), 0.0f64..1e3, -1e3f64..1e3), 0..12), a in 0.1f64..3.0, tx in -1e3f64..1e3) {
            let records: Vec<IterationRecord> = vals.iter().enumerate().map(|(i, &(d, r, o))| IterationRecord {
                outer: i / 4,
                inner: i % 4,
                delta_norm: if d.is_nan() { 0.0 } else { d },
                residual_norm: r,
                objective: o,
            }).collect();
            let t = Trace {
                converged: vals.len() % 2 == 0,
                tau_final: SimilarityParams::new(a, a / 7.0, tx, -tx / 3.0).unwrap(),
                records,
                selected: vec![vec![0, 5], vec![9]],
            };
            prop_assert_eq!(Trace::parse(&t.to_text()).unwrap(), t);
        }
    }
}
