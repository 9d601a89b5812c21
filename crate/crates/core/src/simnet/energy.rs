//! Sensor battery accounting.

use crate::config::EnergyConfig;

/// Remaining energy per sensor. A sensor at zero is silent.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyLedger {
    budget_j: f64,
    tx_per_byte: f64,
    rx_per_byte: f64,
    remaining: Vec<f64>,
}

impl EnergyLedger {
    pub fn new(cfg: &EnergyConfig, sensors: usize) -> Self {
        Self {
            budget_j: cfg.budget_j,
            tx_per_byte: cfg.tx_j_per_byte,
            rx_per_byte: cfg.rx_j_per_byte,
            remaining: vec![cfg.budget_j; sensors],
        }
    }

    pub fn is_alive(&self, sensor: usize) -> bool {
        self.remaining[sensor] > 0.0
    }

    fn debit(&mut self, sensor: usize, joules: f64) -> bool {
        let r = &mut self.remaining[sensor];
        if *r <= 0.0 {
            return false;
        }
        *r = (*r - joules).max(0.0);
        true
    }

    /// Charges a transmission; `false` if the sensor was already silent.
    pub fn debit_tx(&mut self, sensor: usize, bytes: u64) -> bool {
        self.debit(sensor, bytes as f64 * self.tx_per_byte)
    }

    pub fn debit_rx(&mut self, sensor: usize, bytes: u64) -> bool {
        self.debit(sensor, bytes as f64 * self.rx_per_byte)
    }

    pub fn remaining(&self, sensor: usize) -> f64 {
        self.remaining[sensor]
    }

    pub fn used(&self) -> Vec<f64> {
        self.remaining.iter().map(|r| self.budget_j - r).collect()
    }
}
