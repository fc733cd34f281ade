//! Grid data model, case-document parsing and nodal admittance construction.
//!
//! Buses are renumbered internally so that the swing bus is always index 0 and
//! the PQ buses follow in document order. Every bus keeps its external id for
//! reporting.

use std::collections::{HashMap, VecDeque};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod matpower;

pub use matpower::import_matpower;

/// Operator-facing bus identifier as it appears in the input document.
pub type ExternalId = i64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CaseError {
    #[error("malformed case document: {0}")]
    MalformedDocument(String),
    #[error("duplicate bus id {0}")]
    DuplicateBusId(ExternalId),
    #[error("no swing bus in case")]
    NoSwingBus,
    #[error("multiple swing buses: {0:?}")]
    MultipleSwingBuses(Vec<ExternalId>),
    #[error("disconnected network: bus {0} is not reachable from the swing bus")]
    DisconnectedGraph(ExternalId),
    #[error("invalid impedance on branch {from}-{to}: {reason}")]
    InvalidImpedance {
        from: ExternalId,
        to: ExternalId,
        reason: String,
    },
    #[error("unsupported feature: {0}")]
    UnsupportedFeature(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BusKind {
    /// Reference bus with a fixed complex voltage.
    Swing { voltage: Complex64 },
    /// Bus with specified net active and reactive injection (generation positive).
    Pq { p: f64, q: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    /// Internal index; 0 is the swing bus.
    pub id: usize,
    pub external_id: ExternalId,
    pub kind: BusKind,
}

impl Bus {
    pub fn is_swing(&self) -> bool {
        matches!(self.kind, BusKind::Swing { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    /// Internal index of the from terminal.
    pub from: usize,
    /// Internal index of the to terminal.
    pub to: usize,
    pub r: f64,
    pub x: f64,
    /// Total line-charging susceptance, split half per terminal.
    pub b_charging: f64,
    /// Position among parallel branches joining the same pair of buses.
    pub ordinal: usize,
}

impl Branch {
    pub fn series_admittance(&self) -> Complex64 {
        Complex64::new(self.r, self.x).inv()
    }

    /// Series conductance `r / (r² + x²)`, the weight of this branch in the loss sum.
    pub fn loss_weight(&self) -> f64 {
        self.r / (self.r * self.r + self.x * self.x)
    }
}

/// Nodal admittance matrix over all buses, swing included.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceMatrix {
    pub y: DMatrix<Complex64>,
}

impl AdmittanceMatrix {
    pub fn dim(&self) -> usize {
        self.y.nrows()
    }

    pub fn conductance(&self) -> DMatrix<f64> {
        self.y.map(|c| c.re)
    }

    pub fn susceptance(&self) -> DMatrix<f64> {
        self.y.map(|c| c.im)
    }
}

/// Immutable, validated network description.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCase {
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    admittance: AdmittanceMatrix,
}

impl GridCase {
    /// Buses in internal order (swing first).
    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    /// Number of non-swing buses.
    pub fn n(&self) -> usize {
        self.buses.len() - 1
    }

    pub fn swing(&self) -> &Bus {
        &self.buses[0]
    }

    pub fn v_swing(&self) -> Complex64 {
        match self.buses[0].kind {
            BusKind::Swing { voltage } => voltage,
            BusKind::Pq { .. } => unreachable!("bus 0 is always the swing bus"),
        }
    }

    pub fn admittance(&self) -> &AdmittanceMatrix {
        &self.admittance
    }

    pub fn external_id(&self, internal: usize) -> ExternalId {
        self.buses[internal].external_id
    }

    /// External id of the bus owning state coordinate `k` in the `(u, v)` or
    /// `(P, Q)` ordering.
    pub fn external_id_of_coordinate(&self, k: usize) -> ExternalId {
        self.external_id(k % self.n() + 1)
    }

    pub fn internal_id(&self, external: ExternalId) -> Option<usize> {
        self.buses.iter().position(|b| b.external_id == external)
    }

    /// Specified net injections of the PQ buses, generation positive.
    pub fn injections(&self) -> (Vec<f64>, Vec<f64>) {
        self.buses[1..]
            .iter()
            .map(|b| match b.kind {
                BusKind::Pq { p, q } => (p, q),
                BusKind::Swing { .. } => unreachable!("only bus 0 is swing"),
            })
            .unzip()
    }

    pub fn has_line_charging(&self) -> bool {
        self.branches.iter().any(|b| b.b_charging != 0.0)
    }

    /// Builds and validates a case from its document form.
    pub fn from_document(doc: &CaseDocument) -> Result<Self, CaseError> {
        let mut swing: Option<Bus> = None;
        let mut swings = Vec::new();
        let mut pq = Vec::new();
        let mut seen: HashMap<ExternalId, ()> = HashMap::new();

        for (i, raw) in doc.buses.iter().enumerate() {
            if seen.insert(raw.id, ()).is_some() {
                return Err(CaseError::DuplicateBusId(raw.id));
            }
            let kind = raw.validated_kind(i)?;
            let bus = Bus {
                id: 0,
                external_id: raw.id,
                kind,
            };
            if bus.is_swing() {
                swings.push(raw.id);
                swing.get_or_insert(bus);
            } else {
                pq.push(bus);
            }
        }
        match swings.len() {
            0 => return Err(CaseError::NoSwingBus),
            1 => {}
            _ => return Err(CaseError::MultipleSwingBuses(swings)),
        }

        let mut buses = Vec::with_capacity(pq.len() + 1);
        buses.push(swing.expect("exactly one swing bus"));
        buses.extend(pq);
        for (i, bus) in buses.iter_mut().enumerate() {
            bus.id = i;
        }
        let index: HashMap<ExternalId, usize> =
            buses.iter().map(|b| (b.external_id, b.id)).collect();

        let mut branches = Vec::with_capacity(doc.branches.len());
        let mut parallel: HashMap<(usize, usize), usize> = HashMap::new();
        for (i, raw) in doc.branches.iter().enumerate() {
            let lookup = |ext: ExternalId, field: &str| {
                index.get(&ext).copied().ok_or_else(|| {
                    CaseError::MalformedDocument(format!(
                        "branches[{i}]: field \"{field}\" references unknown bus {ext}"
                    ))
                })
            };
            let from = lookup(raw.from, "from")?;
            let to = lookup(raw.to, "to")?;
            if from == to {
                return Err(CaseError::InvalidImpedance {
                    from: raw.from,
                    to: raw.to,
                    reason: "branch connects a bus to itself".into(),
                });
            }
            for (name, value) in [("r", raw.r), ("x", raw.x), ("b", raw.b)] {
                if !value.is_finite() {
                    return Err(CaseError::MalformedDocument(format!(
                        "branches[{i}]: field \"{name}\" is not finite"
                    )));
                }
            }
            if raw.r < 0.0 {
                return Err(CaseError::InvalidImpedance {
                    from: raw.from,
                    to: raw.to,
                    reason: format!("negative resistance r = {}", raw.r),
                });
            }
            if raw.r == 0.0 && raw.x == 0.0 {
                return Err(CaseError::InvalidImpedance {
                    from: raw.from,
                    to: raw.to,
                    reason: "zero impedance (r = x = 0)".into(),
                });
            }
            let key = (from.min(to), from.max(to));
            let ordinal = parallel.entry(key).or_insert(0);
            branches.push(Branch {
                from,
                to,
                r: raw.r,
                x: raw.x,
                b_charging: raw.b,
                ordinal: *ordinal,
            });
            *ordinal += 1;
        }

        if let Some(isolated) = unreachable_bus(buses.len(), &branches) {
            return Err(CaseError::DisconnectedGraph(buses[isolated].external_id));
        }

        let admittance = assemble_admittance(buses.len(), &branches);
        Ok(GridCase {
            buses,
            branches,
            admittance,
        })
    }

    pub fn to_document(&self) -> CaseDocument {
        let buses = self
            .buses
            .iter()
            .map(|b| match b.kind {
                BusKind::Swing { voltage } => BusRecord {
                    id: b.external_id,
                    kind: BusKindTag::Swing,
                    p: None,
                    q: None,
                    v_re: Some(voltage.re),
                    v_im: Some(voltage.im),
                },
                BusKind::Pq { p, q } => BusRecord {
                    id: b.external_id,
                    kind: BusKindTag::Pq,
                    p: Some(p),
                    q: Some(q),
                    v_re: None,
                    v_im: None,
                },
            })
            .collect();
        let branches = self
            .branches
            .iter()
            .map(|br| BranchRecord {
                from: self.external_id(br.from),
                to: self.external_id(br.to),
                r: br.r,
                x: br.x,
                b: br.b_charging,
            })
            .collect();
        CaseDocument { buses, branches }
    }

    /// Returns a copy with the PQ injections replaced.
    pub fn with_injections(&self, p: &[f64], q: &[f64]) -> Self {
        assert_eq!(p.len(), self.n());
        assert_eq!(q.len(), self.n());
        let mut out = self.clone();
        for (i, bus) in out.buses[1..].iter_mut().enumerate() {
            bus.kind = BusKind::Pq { p: p[i], q: q[i] };
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("case document serializes")
    }
}

/// Parses and validates a JSON case document.
pub fn parse_case(text: &str) -> Result<GridCase, CaseError> {
    let doc: CaseDocument =
        serde_json::from_str(text).map_err(|e| CaseError::MalformedDocument(e.to_string()))?;
    GridCase::from_document(&doc)
}

/// Builds the nodal admittance matrix of a validated case.
pub fn build_admittance(case: &GridCase) -> AdmittanceMatrix {
    assemble_admittance(case.buses.len(), &case.branches)
}

fn assemble_admittance(nbus: usize, branches: &[Branch]) -> AdmittanceMatrix {
    let mut y = DMatrix::from_element(nbus, nbus, Complex64::new(0.0, 0.0));
    for br in branches {
        let ys = br.series_admittance();
        let shunt = Complex64::new(0.0, br.b_charging / 2.0);
        y[(br.from, br.from)] += ys + shunt;
        y[(br.to, br.to)] += ys + shunt;
        y[(br.from, br.to)] -= ys;
        y[(br.to, br.from)] -= ys;
    }
    AdmittanceMatrix { y }
}

/// First bus (in internal order) not reachable from bus 0, if any.
fn unreachable_bus(nbus: usize, branches: &[Branch]) -> Option<usize> {
    let mut adj = vec![Vec::new(); nbus];
    for br in branches {
        adj[br.from].push(br.to);
        adj[br.to].push(br.from);
    }
    let mut seen = vec![false; nbus];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    while let Some(b) = queue.pop_front() {
        for &nb in &adj[b] {
            if !seen[nb] {
                seen[nb] = true;
                queue.push_back(nb);
            }
        }
    }
    seen.iter().position(|s| !s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKindTag {
    Swing,
    Pq,
}

/// Bus entry of the JSON case document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusRecord {
    pub id: ExternalId,
    pub kind: BusKindTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_re: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_im: Option<f64>,
}

impl BusRecord {
    fn validated_kind(&self, i: usize) -> Result<BusKind, CaseError> {
        let bad = |msg: String| CaseError::MalformedDocument(format!("buses[{i}] (id {}): {msg}", self.id));
        let finite = |name: &str, v: f64| {
            if v.is_finite() {
                Ok(v)
            } else {
                Err(bad(format!("field \"{name}\" is not finite")))
            }
        };
        match self.kind {
            BusKindTag::Swing => {
                if self.p.is_some() {
                    return Err(bad("field \"p\" is not allowed on the swing bus".into()));
                }
                if self.q.is_some() {
                    return Err(bad("field \"q\" is not allowed on the swing bus".into()));
                }
                let re = finite("v_re", self.v_re.unwrap_or(1.0))?;
                let im = finite("v_im", self.v_im.unwrap_or(0.0))?;
                Ok(BusKind::Swing {
                    voltage: Complex64::new(re, im),
                })
            }
            BusKindTag::Pq => {
                if self.v_re.is_some() {
                    return Err(bad("field \"v_re\" is only allowed on the swing bus".into()));
                }
                if self.v_im.is_some() {
                    return Err(bad("field \"v_im\" is only allowed on the swing bus".into()));
                }
                let p = self
                    .p
                    .ok_or_else(|| bad("field \"p\" is required for pq buses".into()))?;
                let q = self
                    .q
                    .ok_or_else(|| bad("field \"q\" is required for pq buses".into()))?;
                Ok(BusKind::Pq {
                    p: finite("p", p)?,
                    q: finite("q", q)?,
                })
            }
        }
    }
}

/// Branch entry of the JSON case document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchRecord {
    pub from: ExternalId,
    pub to: ExternalId,
    pub r: f64,
    pub x: f64,
    #[serde(default)]
    pub b: f64,
}

/// Serialized form of a [`GridCase`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseDocument {
    pub buses: Vec<BusRecord>,
    pub branches: Vec<BranchRecord>,
}
