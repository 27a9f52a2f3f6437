use std::collections::BTreeMap;

use serde::ser::SerializeMap;
use serde::{Serialize, Serializer};

use crate::machine::{EnergyTable, EventKind};

/// Accumulated energy and raw event counts per [`EventKind`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnergyLedger {
    energy: [f64; 6],
    counts: [u64; 6],
}

/// Charges `quantity` events of `kind` at the configured per-event energy.
pub fn account(ledger: &mut EnergyLedger, kind: EventKind, quantity: u64, table: &EnergyTable) {
    if quantity == 0 {
        return;
    }
    let i = kind.index();
    ledger.counts[i] += quantity;
    ledger.energy[i] += quantity as f64 * table.get(kind);
}

impl EnergyLedger {
    pub fn get(&self, kind: EventKind) -> f64 {
        self.energy[kind.index()]
    }

    pub fn count(&self, kind: EventKind) -> u64 {
        self.counts[kind.index()]
    }

    pub fn total(&self) -> f64 {
        self.energy.iter().sum()
    }

    pub fn data_movement_total(&self) -> f64 {
        EventKind::ALL
            .into_iter()
            .filter(|k| k.is_data_movement())
            .map(|k| self.get(k))
            .sum()
    }

    /// Share of total energy spent moving data; 0 for an empty ledger.
    pub fn data_movement_fraction(&self) -> f64 {
        let total = self.total();
        if total > 0.0 {
            self.data_movement_total() / total
        } else {
            0.0
        }
    }

    pub fn counts(&self) -> BTreeMap<&'static str, u64> {
        EventKind::ALL
            .into_iter()
            .map(|k| (k.name(), self.count(k)))
            .collect()
    }

    pub fn merge(&mut self, other: &EnergyLedger) {
        for i in 0..self.energy.len() {
            self.energy[i] += other.energy[i];
            self.counts[i] += other.counts[i];
        }
    }
}

impl Serialize for EnergyLedger {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(EventKind::ALL.len() + 3))?;
        for k in EventKind::ALL {
            m.serialize_entry(k.name(), &self.get(k))?;
        }
        m.serialize_entry("total", &self.total())?;
        m.serialize_entry("data_movement", &self.data_movement_total())?;
        m.serialize_entry("data_movement_fraction", &self.data_movement_fraction())?;
        m.end()
    }
}
