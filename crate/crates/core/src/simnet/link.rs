//! Per-hop delay: propagation, MTU-segmented serialisation and jitter.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::NetworkConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LinkClass {
    Sensor,
    GatewayUplink,
    /// Station to its ground gateways; one transmission reaches all of them.
    StationAccess,
    /// Station to station and to the administrator.
    StationPeer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkModel {
    /// km per ms.
    pub propagation_speed: f64,
    pub mtu: u64,
    /// bits per ms.
    pub sensor_bandwidth: f64,
    pub gateway_bandwidth: f64,
    pub station_bandwidth: f64,
    /// Standard deviation of the jitter as a fraction of the delay.
    pub jitter: f64,
}

impl From<&NetworkConfig> for LinkModel {
    fn from(n: &NetworkConfig) -> Self {
        Self {
            propagation_speed: n.propagation_speed,
            mtu: n.mtu as u64,
            sensor_bandwidth: n.sensor_bandwidth,
            gateway_bandwidth: n.gateway_bandwidth,
            station_bandwidth: n.station_bandwidth,
            jitter: n.jitter,
        }
    }
}

impl LinkModel {
    pub fn bandwidth(&self, class: LinkClass) -> f64 {
        match class {
            LinkClass::Sensor => self.sensor_bandwidth,
            LinkClass::GatewayUplink => self.gateway_bandwidth,
            LinkClass::StationAccess | LinkClass::StationPeer => self.station_bandwidth,
        }
    }

    /// Serialisation time in µs: every segment occupies a full MTU.
    pub fn serialization_us(&self, size_bytes: u64, class: LinkClass) -> u64 {
        let segments = size_bytes.div_ceil(self.mtu).max(1);
        let bits = (segments * self.mtu * 8) as f64;
        (bits / self.bandwidth(class) * 1000.0).ceil() as u64
    }

    pub fn propagation_us(&self, distance_km: f64) -> u64 {
        (distance_km / self.propagation_speed * 1000.0).ceil() as u64
    }

    /// Delay without jitter, in µs.
    pub fn base_delay_us(&self, distance_km: f64, size_bytes: u64, class: LinkClass) -> u64 {
        self.propagation_us(distance_km) + self.serialization_us(size_bytes, class)
    }

    /// Normal jitter with σ = `jitter · base`, truncated at two σ, so the
    /// result is never negative.
    pub fn jittered<R: Rng>(&self, base_us: u64, rng: &mut R) -> u64 {
        if self.jitter <= 0.0 || base_us == 0 {
            return base_us;
        }
        let z: f64 = loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z;
            }
        };
        let delay = base_us as f64 * (1.0 + self.jitter * z);
        delay.round().max(0.0) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn model() -> LinkModel {
        LinkModel::from(&NetworkConfig::default())
    }

    #[test]
    fn segmentation_rounds_up_to_whole_mtus() {
        let m = model();
        // 1 byte and 1500 bytes both take one 12000-bit segment.
        assert_eq!(m.serialization_us(1, LinkClass::Sensor), 48_000);
        assert_eq!(m.serialization_us(1500, LinkClass::Sensor), 48_000);
        assert_eq!(m.serialization_us(1501, LinkClass::Sensor), 96_000);
        assert_eq!(m.serialization_us(1500, LinkClass::GatewayUplink), 1_200);
    }

    #[test]
    fn propagation_from_twenty_km() {
        // 20 km at 299.792458 km/ms is 66.7 µs.
        assert_eq!(model().propagation_us(20.0), 67);
    }

    proptest! {
        #[test]
        fn jitter_stays_within_two_sigma(base in 0u64..10_000_000, seed in any::<u64>()) {
            let m = model();
            let d = m.jittered(base, &mut ChaCha20Rng::seed_from_u64(seed));
            let lo = (base as f64 * (1.0 - 2.0 * m.jitter)).floor() as u64;
            let hi = (base as f64 * (1.0 + 2.0 * m.jitter)).ceil() as u64;
            prop_assert!(d >= lo && d <= hi);
        }
    }
}
