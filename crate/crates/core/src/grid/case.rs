//! JSON case files.
//!
//! Complex numbers are `[re, im]` pairs and matrices are row-major nested
//! arrays of them. Line admittances are in siemens, loads and inverter
//! ratings in per-unit of `base_mva`. See `docs/case-format.md`.

use std::collections::{HashMap, HashSet, VecDeque};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{Bus, BusKind, CMatrix, GridCase, InverterSite, LineBranch, NodeIndex, Phase};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseFile {
    #[serde(default)]
    pub name: String,
    pub base_kv: f64,
    pub base_mva: f64,
    #[serde(default = "unit")]
    pub slack_voltage: f64,
    pub buses: Vec<BusRecord>,
    pub lines: Vec<LineRecord>,
    #[serde(default)]
    pub inverters: Vec<InverterRecord>,
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusRecord {
    pub id: String,
    pub phases: Vec<Phase>,
    pub kind: BusKind,
    #[serde(default)]
    pub load: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineRecord {
    pub from: String,
    pub to: String,
    pub phases: Vec<Phase>,
    pub series: Vec<Vec<[f64; 2]>>,
    #[serde(default)]
    pub shunt: Option<Vec<Vec<[f64; 2]>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InverterRecord {
    pub bus: String,
    pub phase: Phase,
    pub s_rating: f64,
    #[serde(default)]
    pub pv_peak: f64,
}

pub fn load_case(path: impl AsRef<Path>) -> Result<GridCase> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_case(&text, &path.display().to_string())
}

/// Parses and validates case text; `context` names the source in errors.
pub fn parse_case(text: &str, context: &str) -> Result<GridCase> {
    let file: CaseFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        context: context.to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    file.into_case()
}

fn complex_matrix(rows: &[Vec<[f64; 2]>], dim: usize, what: &str) -> Result<CMatrix> {
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Validation(format!(
            "{what} must be a {dim}x{dim} matrix"
        )));
    }
    Ok(CMatrix::from_fn(dim, dim, |i, j| {
        Complex64::new(rows[i][j][0], rows[i][j][1])
    }))
}

fn sorted_phases(phases: &[Phase], what: &str) -> Result<Vec<Phase>> {
    if phases.is_empty() {
        return Err(Error::Validation(format!("{what} has an empty phase set")));
    }
    let mut sorted = phases.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != phases.len() {
        return Err(Error::Validation(format!("{what} lists a phase twice")));
    }
    Ok(sorted)
}

/// Reorders a matrix given in `listed` phase order into sorted phase order.
fn reorder(m: CMatrix, listed: &[Phase], sorted: &[Phase]) -> CMatrix {
    let perm: Vec<usize> = sorted
        .iter()
        .map(|p| listed.iter().position(|q| q == p).unwrap())
        .collect();
    CMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(perm[i], perm[j])])
}

impl CaseFile {
    pub fn into_case(self) -> Result<GridCase> {
        let mut index = HashMap::new();
        let mut buses = Vec::with_capacity(self.buses.len());
        for rec in &self.buses {
            if index.insert(rec.id.clone(), buses.len()).is_some() {
                return Err(Error::Validation(format!("duplicate bus id `{}`", rec.id)));
            }
            let what = format!("bus `{}`", rec.id);
            let phases = sorted_phases(&rec.phases, &what)?;
            let load = if rec.load.is_empty() {
                vec![Complex64::new(0.0, 0.0); phases.len()]
            } else if rec.load.len() == phases.len() {
                phases
                    .iter()
                    .map(|p| {
                        let k = rec.phases.iter().position(|q| q == p).unwrap();
                        Complex64::new(rec.load[k][0], rec.load[k][1])
                    })
                    .collect()
            } else {
                return Err(Error::Validation(format!(
                    "{what} lists {} loads for {} phases",
                    rec.load.len(),
                    phases.len()
                )));
            };
            buses.push(Bus {
                id: rec.id.clone(),
                phases,
                kind: rec.kind,
                load,
            });
        }
        let lookup = |id: &str, what: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| Error::Validation(format!("{what} references unknown bus `{id}`")))
        };

        let mut lines = Vec::with_capacity(self.lines.len());
        for (k, rec) in self.lines.into_iter().enumerate() {
            let what = format!("line {k} ({} -> {})", rec.from, rec.to);
            let from = lookup(&rec.from, &what)?;
            let to = lookup(&rec.to, &what)?;
            let phases = sorted_phases(&rec.phases, &what)?;
            let dim = phases.len();
            let series = complex_matrix(&rec.series, dim, &format!("{what} series block"))?;
            let shunt = match &rec.shunt {
                Some(rows) => complex_matrix(rows, dim, &format!("{what} shunt block"))?,
                None => CMatrix::zeros(dim, dim),
            };
            lines.push(LineBranch {
                from,
                to,
                series_from: reorder(series, &rec.phases, &phases),
                shunt: reorder(shunt, &rec.phases, &phases),
                phases,
            });
        }

        let mut inverters = Vec::with_capacity(self.inverters.len());
        for rec in &self.inverters {
            let bus = lookup(&rec.bus, "inverter")?;
            inverters.push(InverterSite {
                node: NodeIndex {
                    bus,
                    phase: rec.phase,
                },
                s_rating: rec.s_rating,
                pv_peak: rec.pv_peak,
            });
        }

        GridCase::new(
            self.name,
            buses,
            lines,
            inverters,
            self.base_kv,
            self.base_mva,
            self.slack_voltage,
        )
    }
}

fn max_asymmetry(m: &CMatrix) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).norm());
        }
    }
    worst
}

pub(super) fn validate(
    buses: &[Bus],
    lines: &[LineBranch],
    inverters: &[InverterSite],
    base_kv: f64,
    base_mva: f64,
    slack_voltage: f64,
) -> Result<()> {
    let invalid = |msg: String| Err(Error::Validation(msg));
    if !(base_kv > 0.0 && base_mva > 0.0) {
        return invalid("base_kv and base_mva must be positive".into());
    }
    if !(slack_voltage > 0.0 && slack_voltage.is_finite()) {
        return invalid("slack_voltage must be positive".into());
    }
    if buses.is_empty() {
        return invalid("case has no buses".into());
    }
    let mut ids = HashSet::new();
    for bus in buses {
        if !ids.insert(bus.id.as_str()) {
            return invalid(format!("duplicate bus id `{}`", bus.id));
        }
        if bus.phases.is_empty() {
            return invalid(format!("bus `{}` has an empty phase set", bus.id));
        }
        if bus.phases.windows(2).any(|w| w[0] >= w[1]) {
            return invalid(format!("bus `{}` phases must be sorted and distinct", bus.id));
        }
        if bus.load.len() != bus.phases.len() {
            return invalid(format!("bus `{}` load does not match its phases", bus.id));
        }
    }
    let slack = buses.iter().filter(|b| b.kind == BusKind::Slack).count();
    if slack != 1 {
        return invalid(format!("case must have exactly one slack bus, found {slack}"));
    }

    for (k, line) in lines.iter().enumerate() {
        if line.from >= buses.len() || line.to >= buses.len() {
            return invalid(format!("line {k} references a missing bus"));
        }
        if line.from == line.to {
            return invalid(format!("line {k} connects bus `{}` to itself", buses[line.from].id));
        }
        let dim = line.phases.len();
        if dim == 0 {
            return invalid(format!("line {k} has an empty phase set"));
        }
        for end in [line.from, line.to] {
            if !line.phases.iter().all(|p| buses[end].phases.contains(p)) {
                return invalid(format!(
                    "line {k} phases are not a subset of bus `{}` phases",
                    buses[end].id
                ));
            }
        }
        for (block, name) in [(&line.series_from, "series"), (&line.shunt, "shunt")] {
            if block.nrows() != dim || block.ncols() != dim {
                return invalid(format!("line {k} {name} block must be {dim}x{dim}"));
            }
            if block.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                return invalid(format!("line {k} {name} block has non-finite entries"));
            }
            let scale = block.iter().map(|z| z.norm()).fold(0.0, f64::max);
            if max_asymmetry(block) > 1e-12 * scale.max(1.0) {
                return invalid(format!("line {k} {name} block is not symmetric"));
            }
        }
    }

    // Bus graph connectivity.
    let mut adjacency = vec![Vec::new(); buses.len()];
    for line in lines {
        adjacency[line.from].push(line.to);
        adjacency[line.to].push(line.from);
    }
    let mut seen = vec![false; buses.len()];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(b) = queue.pop_front() {
        for &n in &adjacency[b] {
            if !seen[n] {
                seen[n] = true;
                queue.push_back(n);
            }
        }
    }
    if let Some(b) = seen.iter().position(|s| !s) {
        return invalid(format!("bus `{}` is not connected to the network", buses[b].id));
    }

    for inv in inverters {
        let bus = &buses[inv.node.bus];
        if !bus.phases.contains(&inv.node.phase) {
            return invalid(format!(
                "inverter at `{}` uses phase {} which the bus does not have",
                bus.id, inv.node.phase
            ));
        }
        if bus.kind == BusKind::Slack {
            return invalid(format!("inverter placed on slack bus `{}`", bus.id));
        }
        if !(inv.s_rating > 0.0) || !(0.0..=inv.s_rating).contains(&inv.pv_peak) {
            return invalid(format!(
                "inverter at `{}` needs 0 <= pv_peak <= s_rating and s_rating > 0",
                bus.id
            ));
        }
    }
    Ok(())
}
