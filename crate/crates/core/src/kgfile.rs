//! Line-oriented text serialization of a [`CwkgStore`].
//!
//! ```text
//! R <side> <kind> <name> [min max] [units]
//! E <kind> <id> <numeric|-> [label]
//! T <subgraph> <head> <relation> <tail>
//! ```
//!
//! Records must appear in `R*`, `E*`, `T*` order. Row indices follow the
//! order of `R` lines per side. Blank lines and lines starting with `#` are
//! ignored.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::store::{CwkgStore, Entity, EntityKind, RelationDef, RelationKind, Side, StoreError, Subgraph, Triple};

pub fn to_string(store: &CwkgStore) -> String {
    let mut out = String::new();
    for side in [Side::Waveform, Side::Environment] {
        for r in store.side_schema(side) {
            let _ = write!(out, "R {} {} {}", side.as_str(), r.kind.as_str(), r.name);
            if let Some((lo, hi)) = r.value_range {
                let _ = write!(out, " {} {}", lo, hi);
            }
            if let Some(u) = &r.units {
                let _ = write!(out, " {}", u);
            }
            out.push('\n');
        }
    }
    for e in store.entities() {
        let num = e.numeric_value.map_or_else(|| "-".to_string(), |v| v.to_string());
        let _ = write!(out, "E {} {} {}", e.kind.as_str(), e.id, num);
        if !e.text_label.is_empty() {
            let _ = write!(out, " {}", e.text_label);
        }
        out.push('\n');
    }
    for t in store.triples() {
        let _ = writeln!(out, "T {} {} {} {}", t.subgraph.as_str(), t.head, t.relation, t.tail);
    }
    out
}

fn parse_f64(tok: &str, line: usize, what: &str) -> Result<f64, StoreError> {
    tok.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| StoreError::ParseError {
            line,
            message: format!("invalid {} {:?}", what, tok),
        })
}

fn parse_relation(toks: &[&str], line: usize, next_row: &mut [usize; 2]) -> Result<RelationDef, StoreError> {
    let err = |message: String| StoreError::ParseError { line, message };
    if toks.len() < 3 {
        return Err(err("relation record needs side, kind and name".into()));
    }
    let side = Side::parse(toks[0]).ok_or_else(|| err(format!("unknown side {:?}", toks[0])))?;
    let kind = RelationKind::parse(toks[1]).ok_or_else(|| err(format!("unknown relation kind {:?}", toks[1])))?;
    let name = toks[2].to_string();
    let mut rest = &toks[3..];
    let value_range = if kind == RelationKind::Numeric {
        if rest.len() < 2 {
            return Err(err(format!("numeric relation {} needs min and max", name)));
        }
        let r = (parse_f64(rest[0], line, "min")?, parse_f64(rest[1], line, "max")?);
        rest = &rest[2..];
        Some(r)
    } else {
        None
    };
    let units = match rest {
        [] => None,
        [u] => Some(u.to_string()),
        _ => return Err(err(format!("trailing tokens after relation {}", name))),
    };
    let slot = &mut next_row[side as usize];
    let row_index = *slot;
    *slot += 1;
    Ok(RelationDef {
        name,
        kind,
        side,
        units,
        value_range,
        row_index,
    })
}

pub fn parse(text: &str) -> Result<CwkgStore, StoreError> {
    #[derive(PartialEq, PartialOrd)]
    enum Stage {
        Schema,
        Entities,
        Triples,
    }
    let mut schema = Vec::new();
    let mut next_row = [0usize; 2];
    let mut store: Option<CwkgStore> = None;
    let mut stage = Stage::Schema;

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.trim_end_matches('\r');
        if body.trim().is_empty() || body.trim_start().starts_with('#') {
            continue;
        }
        let err = |message: String| StoreError::ParseError { line, message };
        let (tag, rest) = body.split_once(' ').unwrap_or((body, ""));
        let record_stage = match tag {
            "R" => Stage::Schema,
            "E" => Stage::Entities,
            "T" => Stage::Triples,
            _ => return Err(err(format!("unknown record type {:?}", tag))),
        };
        if record_stage < stage {
            return Err(err(format!("{} record after a later block", tag)));
        }
        if record_stage > Stage::Schema && store.is_none() {
            if schema.is_empty() {
                return Err(StoreError::SchemaViolation("schema block required".into()));
            }
            store = Some(CwkgStore::new(std::mem::take(&mut schema))?);
        }
        stage = record_stage;
        let toks: Vec<&str> = rest.split_whitespace().collect();
        match stage {
            Stage::Schema => schema.push(parse_relation(&toks, line, &mut next_row)?),
            Stage::Entities => {
                if toks.len() < 3 {
                    return Err(err("entity record needs kind, id and a numeric value or -".into()));
                }
                let kind = EntityKind::parse(toks[0]).ok_or_else(|| err(format!("unknown entity kind {:?}", toks[0])))?;
                let numeric_value = match toks[2] {
                    "-" => None,
                    v => Some(parse_f64(v, line, "numeric value")?),
                };
                let entity = Entity {
                    id: toks[1].to_string(),
                    kind,
                    numeric_value,
                    text_label: toks[3..].join(" "),
                };
                store
                    .as_mut()
                    .expect("store built before entities")
                    .add_entity(entity)
                    .map_err(|e| err(e.to_string()))?;
            }
            Stage::Triples => {
                if toks.len() != 4 {
                    return Err(err("triple record needs subgraph, head, relation and tail".into()));
                }
                let sub = Subgraph::parse(toks[0]).ok_or_else(|| err(format!("unknown subgraph {:?}", toks[0])))?;
                store
                    .as_mut()
                    .expect("store built before triples")
                    .add_triple(Triple::new(toks[1], toks[2], toks[3], sub))
                    .map_err(|e| err(e.to_string()))?;
            }
        }
    }
    match store {
        Some(s) => Ok(s),
        None if schema.is_empty() => Err(StoreError::SchemaViolation("schema block required".into())),
        None => CwkgStore::new(schema),
    }
}

pub fn save(store: &CwkgStore, path: &Path) -> Result<(), StoreError> {
    fs::write(path, to_string(store)).map_err(|e| StoreError::IoFailure(format!("{}: {}", path.display(), e)))
}

pub fn load(path: &Path) -> Result<CwkgStore, StoreError> {
    let text = fs::read_to_string(path).map_err(|e| StoreError::IoFailure(format!("{}: {}", path.display(), e)))?;
    parse(&text)
}
