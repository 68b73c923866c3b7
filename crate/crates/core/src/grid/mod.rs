//! Multi-phase network description, admittance assembly and an exact AC
//! power-flow solver.
//!
//! Nodes are `(bus, phase)` pairs ordered bus-major, phase-minor. Every
//! quantity returned by this module is in per-unit on the case bases.

mod admittance;
mod case;
pub mod fixtures;
mod powerflow;

use std::fmt;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

pub use admittance::{assemble_admittance, AdmittanceMatrix};
pub use case::{load_case, parse_case, CaseFile};
pub use powerflow::{
    compute_injections, solve_power_flow, OperatingPoint, PowerFlow, PowerFlowOptions,
};

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = nalgebra::DVector<Complex64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn index(self) -> usize {
        match self {
            Phase::A => 0,
            Phase::B => 1,
            Phase::C => 2,
        }
    }

    /// Nominal angle of a balanced positive-sequence system.
    pub fn nominal_angle(self) -> f64 {
        use std::f64::consts::PI;
        match self {
            Phase::A => 0.0,
            Phase::B => -2.0 * PI / 3.0,
            Phase::C => 2.0 * PI / 3.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::A => "a",
            Phase::B => "b",
            Phase::C => "c",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeIndex {
    /// Position of the bus in [`GridCase::buses`].
    pub bus: usize,
    pub phase: Phase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Load,
}

#[derive(Debug, Clone)]
pub struct Bus {
    pub id: String,
    /// Sorted, duplicate free.
    pub phases: Vec<Phase>,
    pub kind: BusKind,
    /// Nominal consumption per phase (per-unit), aligned with `phases`.
    pub load: Vec<Complex64>,
}

#[derive(Debug, Clone)]
pub struct LineBranch {
    pub from: usize,
    pub to: usize,
    pub phases: Vec<Phase>,
    /// Series block seen from the `from` end, in siemens.
    pub series_from: CMatrix,
    /// Total shunt (line charging) block in siemens; half is attached at each end.
    pub shunt: CMatrix,
}

impl LineBranch {
    /// Series block seen from the `to` end. Lines without phase shifting
    /// elements satisfy `series_to = -series_from`.
    pub fn series_to(&self) -> CMatrix {
        -self.series_from.clone()
    }
}

#[derive(Debug, Clone)]
pub struct InverterSite {
    pub node: NodeIndex,
    /// Apparent power capacity (per-unit).
    pub s_rating: f64,
    /// Peak active output of the attached PV array (per-unit).
    pub pv_peak: f64,
}

#[derive(Debug, Clone)]
pub struct GridCase {
    pub name: String,
    pub buses: Vec<Bus>,
    pub lines: Vec<LineBranch>,
    pub inverters: Vec<InverterSite>,
    pub base_kv: f64,
    pub base_mva: f64,
    /// Slack voltage magnitude (per-unit).
    pub slack_voltage: f64,
    nodes: Vec<NodeIndex>,
    bus_offsets: Vec<usize>,
    slack_bus: usize,
}

impl GridCase {
    /// Builds a case and checks every invariant.
    pub fn new(
        name: impl Into<String>,
        buses: Vec<Bus>,
        lines: Vec<LineBranch>,
        inverters: Vec<InverterSite>,
        base_kv: f64,
        base_mva: f64,
        slack_voltage: f64,
    ) -> crate::Result<Self> {
        case::validate(&buses, &lines, &inverters, base_kv, base_mva, slack_voltage)?;
        let mut nodes = Vec::new();
        let mut bus_offsets = Vec::with_capacity(buses.len());
        for (b, bus) in buses.iter().enumerate() {
            bus_offsets.push(nodes.len());
            nodes.extend(bus.phases.iter().map(|&phase| NodeIndex { bus: b, phase }));
        }
        let slack_bus = buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .expect("validated");
        Ok(Self {
            name: name.into(),
            buses,
            lines,
            inverters,
            base_kv,
            base_mva,
            slack_voltage,
            nodes,
            bus_offsets,
            slack_bus,
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[NodeIndex] {
        &self.nodes
    }

    pub fn slack_bus(&self) -> usize {
        self.slack_bus
    }

    /// Global position of a node in the bus-major, phase-minor ordering.
    pub fn node_position(&self, node: NodeIndex) -> Option<usize> {
        let bus = self.buses.get(node.bus)?;
        let k = bus.phases.iter().position(|&p| p == node.phase)?;
        Some(self.bus_offsets[node.bus] + k)
    }

    /// Global positions of the given phases of a bus.
    pub fn positions(&self, bus: usize, phases: &[Phase]) -> Vec<usize> {
        phases
            .iter()
            .map(|&phase| {
                self.node_position(NodeIndex { bus, phase })
                    .expect("phase belongs to bus")
            })
            .collect()
    }

    pub fn bus_position(&self, id: &str) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    /// Resolves a `bus.phase` label such as `632.b`.
    pub fn node_by_label(&self, label: &str) -> Option<usize> {
        let (bus, phase) = label.rsplit_once('.')?;
        let phase = match phase {
            "a" => Phase::A,
            "b" => Phase::B,
            "c" => Phase::C,
            _ => return None,
        };
        self.node_position(NodeIndex {
            bus: self.bus_position(bus)?,
            phase,
        })
    }

    pub fn node_label(&self, position: usize) -> String {
        let n = self.nodes[position];
        format!("{}.{}", self.buses[n.bus].id, n.phase)
    }

    pub fn slack_positions(&self) -> Vec<usize> {
        let bus = &self.buses[self.slack_bus];
        self.positions(self.slack_bus, &bus.phases)
    }

    pub fn is_slack_position(&self, position: usize) -> bool {
        self.nodes[position].bus == self.slack_bus
    }

    /// Balanced nominal slack voltages, one per slack phase.
    pub fn nominal_slack_voltage(&self) -> Vec<Complex64> {
        self.buses[self.slack_bus]
            .phases
            .iter()
            .map(|p| Complex64::from_polar(self.slack_voltage, p.nominal_angle()))
            .collect()
    }

    /// Nominal injection per node (negative consumption); zero at the slack bus.
    pub fn nominal_injections(&self) -> Vec<Complex64> {
        let mut s = vec![Complex64::new(0.0, 0.0); self.node_count()];
        for (b, bus) in self.buses.iter().enumerate() {
            if bus.kind == BusKind::Slack {
                continue;
            }
            for (k, load) in bus.load.iter().enumerate() {
                s[self.bus_offsets[b] + k] = -load;
            }
        }
        s
    }

    /// Impedance base in ohms.
    pub fn z_base(&self) -> f64 {
        self.base_kv * self.base_kv / self.base_mva
    }

    pub fn inverter_positions(&self) -> Vec<usize> {
        self.inverters
            .iter()
            .map(|inv| self.node_position(inv.node).expect("validated"))
            .collect()
    }
}
