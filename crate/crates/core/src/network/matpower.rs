//! Importer for the bus/gen/branch matrix layout of MATPOWER case files.
//!
//! Only the subset needed for an all-PQ load flow is accepted: bus demand,
//! generator Pg/Qg and series branch data with line charging. Generator buses
//! other than the reference become PQ buses with their scheduled Pg/Qg.

use std::collections::HashMap;

use num_complex::Complex64;

use super::{
    BranchRecord, BusKindTag, BusRecord, CaseDocument, CaseError, ExternalId, GridCase,
};

// Column indices (zero-based) of the MATPOWER tables.
const BUS_I: usize = 0;
const BUS_TYPE: usize = 1;
const PD: usize = 2;
const QD: usize = 3;
const GS: usize = 4;
const BS: usize = 5;
const VM: usize = 7;
const VA: usize = 8;

const GEN_BUS: usize = 0;
const PG: usize = 1;
const QG: usize = 2;
const VG: usize = 5;
const GEN_STATUS: usize = 7;

const F_BUS: usize = 0;
const T_BUS: usize = 1;
const BR_R: usize = 2;
const BR_X: usize = 3;
const BR_B: usize = 4;
const TAP: usize = 8;
const SHIFT: usize = 9;
const BR_STATUS: usize = 10;

const REF: i64 = 3;
const ISOLATED: i64 = 4;

/// Imports a MATPOWER-style case and converts it to per unit on `baseMVA`.
pub fn import_matpower(text: &str) -> Result<GridCase, CaseError> {
    let tables = MatpowerTables::parse(text)?;
    let doc = tables.to_document()?;
    GridCase::from_document(&doc)
}

#[derive(Debug, Default)]
struct MatpowerTables {
    base_mva: Option<f64>,
    bus: Option<Vec<Vec<f64>>>,
    gen: Option<Vec<Vec<f64>>>,
    branch: Option<Vec<Vec<f64>>>,
}

fn strip_comments(text: &str) -> String {
    text.lines()
        .map(|l| l.split('%').next().unwrap_or(""))
        .collect::<Vec<_>>()
        .join("\n")
}

fn parse_matrix(name: &str, body: &str) -> Result<Vec<Vec<f64>>, CaseError> {
    let mut rows = Vec::new();
    for (r, row) in body.split(|c| c == ';' || c == '\n').enumerate() {
        let cells: Vec<&str> = row
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .collect();
        if cells.is_empty() {
            continue;
        }
        let values = cells
            .iter()
            .map(|s| {
                s.parse::<f64>().map_err(|_| {
                    CaseError::MalformedDocument(format!(
                        "mpc.{name}: cannot parse value {s:?} in row {r}"
                    ))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(values);
    }
    Ok(rows)
}

impl MatpowerTables {
    fn parse(text: &str) -> Result<Self, CaseError> {
        let text = strip_comments(text);
        let mut out = MatpowerTables::default();
        let mut rest = text.as_str();
        while let Some(pos) = rest.find("mpc.") {
            rest = &rest[pos + 4..];
            let eq = match rest.find('=') {
                Some(eq) => eq,
                None => break,
            };
            let name = rest[..eq].trim().to_string();
            let after = rest[eq + 1..].trim_start();
            if let Some(body) = after.strip_prefix('[') {
                let end = body.find(']').ok_or_else(|| {
                    CaseError::MalformedDocument(format!("mpc.{name}: unterminated matrix"))
                })?;
                let matrix = parse_matrix(&name, &body[..end])?;
                match name.as_str() {
                    "bus" => out.bus = Some(matrix),
                    "gen" => out.gen = Some(matrix),
                    "branch" => out.branch = Some(matrix),
                    _ => {}
                }
                rest = &body[end + 1..];
            } else {
                let end = after.find([';', '\n']).unwrap_or(after.len());
                if name == "baseMVA" {
                    let v = after[..end].trim().parse::<f64>().map_err(|_| {
                        CaseError::MalformedDocument("mpc.baseMVA: not a number".into())
                    })?;
                    out.base_mva = Some(v);
                }
                rest = &after[end..];
            }
        }
        Ok(out)
    }

    fn to_document(&self) -> Result<CaseDocument, CaseError> {
        let missing = |f: &str| CaseError::MalformedDocument(format!("missing mpc.{f}"));
        let base = self.base_mva.ok_or_else(|| missing("baseMVA"))?;
        if !(base > 0.0 && base.is_finite()) {
            return Err(CaseError::MalformedDocument(
                "mpc.baseMVA must be positive".into(),
            ));
        }
        let bus = self.bus.as_ref().ok_or_else(|| missing("bus"))?;
        let branch = self.branch.as_ref().ok_or_else(|| missing("branch"))?;
        let empty = Vec::new();
        let gen = self.gen.as_ref().unwrap_or(&empty);

        let width = |table: &str, row: &[f64], need: usize, i: usize| {
            if row.len() < need {
                Err(CaseError::MalformedDocument(format!(
                    "mpc.{table} row {i}: expected at least {need} columns, found {}",
                    row.len()
                )))
            } else {
                Ok(())
            }
        };

        // Scheduled generation and voltage setpoint per bus.
        let mut pg: HashMap<ExternalId, (f64, f64)> = HashMap::new();
        let mut vg: HashMap<ExternalId, f64> = HashMap::new();
        for (i, row) in gen.iter().enumerate() {
            width("gen", row, GEN_STATUS + 1, i)?;
            if row[GEN_STATUS] <= 0.0 {
                continue;
            }
            let id = row[GEN_BUS] as ExternalId;
            let e = pg.entry(id).or_insert((0.0, 0.0));
            e.0 += row[PG];
            e.1 += row[QG];
            vg.entry(id).or_insert(row[VG]);
        }

        let refs: Vec<ExternalId> = bus
            .iter()
            .filter(|r| r.len() > BUS_TYPE && r[BUS_TYPE] as i64 == REF)
            .map(|r| r[BUS_I] as ExternalId)
            .collect();
        if refs.len() > 1 {
            return Err(CaseError::UnsupportedFeature(format!(
                "multiple reference buses {refs:?}"
            )));
        }

        let mut buses = Vec::with_capacity(bus.len());
        for (i, row) in bus.iter().enumerate() {
            width("bus", row, VA + 1, i)?;
            let id = row[BUS_I] as ExternalId;
            let kind = row[BUS_TYPE] as i64;
            if kind == ISOLATED {
                return Err(CaseError::UnsupportedFeature(format!(
                    "isolated bus type at bus {id}"
                )));
            }
            if row[GS] != 0.0 || row[BS] != 0.0 {
                return Err(CaseError::UnsupportedFeature(format!(
                    "bus shunt (Gs/Bs) at bus {id}"
                )));
            }
            if kind == REF {
                let vm = vg.get(&id).copied().unwrap_or(row[VM]);
                let v = Complex64::from_polar(vm, row[VA].to_radians());
                buses.push(BusRecord {
                    id,
                    kind: BusKindTag::Swing,
                    p: None,
                    q: None,
                    v_re: Some(v.re),
                    v_im: Some(v.im),
                });
            } else {
                let (g_p, g_q) = pg.get(&id).copied().unwrap_or((0.0, 0.0));
                buses.push(BusRecord {
                    id,
                    kind: BusKindTag::Pq,
                    p: Some((g_p - row[PD]) / base),
                    q: Some((g_q - row[QD]) / base),
                    v_re: None,
                    v_im: None,
                });
            }
        }

        let mut branches = Vec::with_capacity(branch.len());
        for (i, row) in branch.iter().enumerate() {
            width("branch", row, BR_B + 1, i)?;
            let (from, to) = (row[F_BUS] as ExternalId, row[T_BUS] as ExternalId);
            if row.get(BR_STATUS).is_some_and(|&s| s <= 0.0) {
                continue;
            }
            if row.get(TAP).is_some_and(|&t| t != 0.0) {
                return Err(CaseError::UnsupportedFeature(format!(
                    "transformer tap on branch {from}-{to}"
                )));
            }
            if row.get(SHIFT).is_some_and(|&s| s != 0.0) {
                return Err(CaseError::UnsupportedFeature(format!(
                    "phase shifter on branch {from}-{to}"
                )));
            }
            branches.push(BranchRecord {
                from,
                to,
                r: row[BR_R],
                x: row[BR_X],
                b: row[BR_B],
            });
        }

        Ok(CaseDocument { buses, branches })
    }
}
