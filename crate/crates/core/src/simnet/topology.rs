//! Node placement, clustering and static routes.

use rand::Rng;

use crate::config::ScenarioConfig;
use crate::primitives::{NodeId, Role};
use crate::wsn::{build_cluster_topology, Cluster, SensorSite};

use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Site {
    pub node: NodeId,
    pub x_km: f64,
    pub y_km: f64,
    pub altitude_km: f64,
}

impl Site {
    pub fn distance_km(&self, other: &Site) -> f64 {
        let dx = self.x_km - other.x_km;
        let dy = self.y_km - other.y_km;
        let dz = self.altitude_km - other.altitude_km;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub map_size_km: f64,
    pub stations: Vec<Site>,
    pub gateways: Vec<Site>,
    pub sensors: Vec<SensorSite>,
    /// Cluster ids are unique across gateways.
    pub clusters: Vec<Cluster>,
    /// Index of the gateway serving each sensor.
    pub sensor_gateway: Vec<u32>,
    /// Hops from each sensor to its gateway, excluding the sensor and
    /// ending with the gateway.
    pub sensor_routes: Vec<Vec<NodeId>>,
    /// Index of the station each gateway is attached to.
    pub home_station: Vec<u32>,
}

impl Topology {
    pub fn site(&self, node: NodeId) -> Option<Site> {
        match node.role {
            Role::Sensor | Role::ClusterHead => self.sensors.get(node.index as usize).map(|s| Site {
                node,
                x_km: s.x_km,
                y_km: s.y_km,
                altitude_km: 0.0,
            }),
            Role::Gateway => self.gateways.get(node.index as usize).copied(),
            Role::HapsStation => self.stations.get(node.index as usize).copied(),
            Role::Admin => self.stations.first().map(|s| Site { node, ..*s }),
            Role::CloudUser => None,
        }
    }

    pub fn home_of(&self, gateway: NodeId) -> NodeId {
        NodeId::station(self.home_station[gateway.index as usize])
    }

    /// Hops after `from` up to and including `to`.
    pub fn route(&self, from: NodeId, to: NodeId) -> Result<Vec<NodeId>, SimError> {
        let unroutable = || SimError::Unroutable { from, to };
        self.site(from).ok_or_else(unroutable)?;
        self.site(to).ok_or_else(unroutable)?;
        if from == to {
            return Ok(Vec::new());
        }
        let station0 = NodeId::station(0);
        let path = match (from.role, to.role) {
            (Role::Sensor, Role::Gateway) => {
                let i = from.index as usize;
                if self.sensor_gateway[i] != to.index {
                    return Err(unroutable());
                }
                self.sensor_routes[i].clone()
            }
            (Role::Sensor, _) => {
                let i = from.index as usize;
                let gw = NodeId::gateway(self.sensor_gateway[i]);
                let mut path = self.sensor_routes[i].clone();
                path.extend(self.route(gw, to)?);
                path
            }
            (Role::Gateway, Role::HapsStation) => {
                let home = self.home_of(from);
                if home == to {
                    vec![to]
                } else {
                    vec![home, to]
                }
            }
            (Role::Gateway, Role::Gateway) => {
                let mut path = vec![self.home_of(from)];
                let far = self.home_of(to);
                if far != path[0] {
                    path.push(far);
                }
                path.push(to);
                path
            }
            (Role::Gateway, Role::Admin) => {
                let mut path = self.route(from, station0)?;
                path.push(to);
                path
            }
            (Role::HapsStation, Role::Gateway) => {
                let home = self.home_of(to);
                if home == from {
                    vec![to]
                } else {
                    vec![home, to]
                }
            }
            (Role::HapsStation, Role::HapsStation) | (Role::HapsStation, Role::Admin) => vec![to],
            (Role::Admin, Role::HapsStation) => vec![to],
            (Role::Admin, Role::Gateway) => self.route(station0, to)?,
            _ => return Err(unroutable()),
        };
        Ok(path)
    }

    /// Every sensor, gateway and station.
    pub fn network_nodes(&self) -> usize {
        self.sensors.len() + self.gateways.len() + self.stations.len()
    }
}

/// Splits `items` into `parts` contiguous chunks whose sizes differ by at most one.
fn split_even<T: Clone>(items: &[T], parts: usize) -> Vec<Vec<T>> {
    let base = items.len() / parts;
    let extra = items.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        out.push(items[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Places sensors, gateways and stations and derives clusters and routes.
///
/// Sensors sit on a jittered square grid. Gateways are laid out in rows:
/// sensors are cut into horizontal bands, one per gateway row, and each band
/// into equal vertical strips, one per gateway, which sits at the strip's
/// centroid. Each gateway attaches to its nearest station.
pub fn build_topology<R: Rng>(cfg: &ScenarioConfig, rng: &mut R) -> Result<Topology, SimError> {
    let t = &cfg.topology;
    let n_sensors = t.sensors as usize;
    let n_gateways = cfg.gateway_count() as usize;
    if n_gateways == 0 || n_gateways > n_sensors {
        return Err(SimError::InfeasibleTopology(format!(
            "{n_gateways} gateways for {n_sensors} sensors"
        )));
    }
    if (n_gateways as u64) * (t.sensors_per_gateway as u64) < n_sensors as u64 {
        return Err(SimError::InfeasibleTopology(format!(
            "{n_gateways} gateways cannot serve {n_sensors} sensors at {} each",
            t.sensors_per_gateway
        )));
    }

    let size = t.map_size_km;
    let cols = (n_sensors as f64).sqrt().ceil() as usize;
    let rows = n_sensors.div_ceil(cols);
    let (dx, dy) = (size / cols as f64, size / rows as f64);
    let sensors: Vec<SensorSite> = (0..n_sensors)
        .map(|i| {
            let (c, r) = (i % cols, i / cols);
            let jx = rng.gen_range(-t.grid_jitter..=t.grid_jitter) * dx;
            let jy = rng.gen_range(-t.grid_jitter..=t.grid_jitter) * dy;
            SensorSite {
                node: NodeId::sensor(i as u32),
                x_km: ((c as f64 + 0.5) * dx + jx).clamp(0.0, size),
                y_km: ((r as f64 + 0.5) * dy + jy).clamp(0.0, size),
            }
        })
        .collect();

    let gateway_rows = ((n_gateways as f64).sqrt().round() as usize).clamp(1, n_gateways);
    let per_row: Vec<usize> = (0..gateway_rows)
        .map(|r| n_gateways / gateway_rows + usize::from(r < n_gateways % gateway_rows))
        .collect();
    let mut by_y: Vec<usize> = (0..n_sensors).collect();
    by_y.sort_by(|&a, &b| sensors[a].y_km.total_cmp(&sensors[b].y_km).then(a.cmp(&b)));

    let mut sensor_gateway = vec![0u32; n_sensors];
    let mut gateways = Vec::with_capacity(n_gateways);
    let mut members_of: Vec<Vec<usize>> = Vec::with_capacity(n_gateways);
    let mut start = 0;
    for (r, &count) in per_row.iter().enumerate() {
        let before: usize = per_row[..r].iter().sum();
        let end = ((before + count) * n_sensors) / n_gateways;
        let mut band = by_y[start..end].to_vec();
        start = end;
        band.sort_by(|&a, &b| sensors[a].x_km.total_cmp(&sensors[b].x_km).then(a.cmp(&b)));
        for strip in split_even(&band, count) {
            let g = gateways.len() as u32;
            let n = strip.len().max(1) as f64;
            let cx = strip.iter().map(|&i| sensors[i].x_km).sum::<f64>() / n;
            let cy = strip.iter().map(|&i| sensors[i].y_km).sum::<f64>() / n;
            for &i in &strip {
                sensor_gateway[i] = g;
            }
            gateways.push(Site {
                node: NodeId::gateway(g),
                x_km: cx,
                y_km: cy,
                altitude_km: 0.0,
            });
            members_of.push(strip);
        }
    }

    let n_stations = t.stations as usize;
    let scols = (n_stations as f64).sqrt().ceil() as usize;
    let srows = n_stations.div_ceil(scols);
    let stations: Vec<Site> = (0..n_stations)
        .map(|i| Site {
            node: NodeId::station(i as u32),
            x_km: ((i % scols) as f64 + 0.5) * size / scols as f64,
            y_km: ((i / scols) as f64 + 0.5) * size / srows as f64,
            altitude_km: t.station_altitude_km,
        })
        .collect();
    let home_station: Vec<u32> = gateways
        .iter()
        .map(|g| {
            (0..n_stations)
                .min_by(|&a, &b| g.distance_km(&stations[a]).total_cmp(&g.distance_km(&stations[b])))
                .expect("at least one station") as u32
        })
        .collect();

    let mut clusters = Vec::new();
    let mut sensor_routes = vec![Vec::new(); n_sensors];
    for (g, members) in members_of.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let sites: Vec<SensorSite> = members.iter().map(|&i| sensors[i]).collect();
        let local = build_cluster_topology(&sites, t.cluster_radius_km, t.sensor_range_km)
            .map_err(|e| SimError::InfeasibleTopology(e.to_string()))?;
        for mut c in local {
            c.id = clusters.len() as u32;
            c.uplink = Some(NodeId::gateway(g as u32));
            for (sensor, path) in &c.intra_routes {
                let mut full = path.clone();
                full.push(NodeId::gateway(g as u32));
                sensor_routes[sensor.index as usize] = full;
            }
            clusters.push(c);
        }
    }

    Ok(Topology {
        map_size_km: size,
        stations,
        gateways,
        sensors,
        clusters,
        sensor_gateway,
        sensor_routes,
        home_station,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn cfg(sensors: u32, stations: u32) -> ScenarioConfig {
        let mut c = ScenarioConfig::default();
        c.topology.sensors = sensors;
        c.topology.stations = stations;
        c
    }

    fn build(c: &ScenarioConfig, seed: u64) -> Topology {
        build_topology(c, &mut ChaCha20Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn two_hundred_sensors_two_gateways() {
        let t = build(&cfg(200, 1), 1);
        assert_eq!(t.gateways.len(), 2);
        let served = t.sensor_gateway.iter().filter(|g| **g == 0).count();
        assert_eq!(served, 100);
    }

    #[test]
    fn single_station_sits_at_the_center() {
        let t = build(&cfg(200, 1), 1);
        let s = t.stations[0];
        assert!((s.x_km - 0.332).abs() < 1e-12 && (s.y_km - 0.332).abs() < 1e-12);
        assert_eq!(s.altitude_km, 20.0);
    }

    #[test]
    fn default_scenario_partitions_evenly() {
        let t = build(&cfg(900, 3), 7);
        assert_eq!(t.gateways.len(), 9);
        for g in 0..9 {
            assert_eq!(t.sensor_gateway.iter().filter(|x| **x == g).count(), 100);
        }
        for (i, route) in t.sensor_routes.iter().enumerate() {
            assert_eq!(route.last(), Some(&NodeId::gateway(t.sensor_gateway[i])));
        }
    }

    #[test]
    fn same_seed_same_topology() {
        let c = cfg(400, 2);
        assert_eq!(build(&c, 3), build(&c, 3));
    }

    #[test]
    fn too_few_gateways_is_infeasible() {
        let mut c = cfg(300, 1);
        c.topology.gateways = Some(2);
        assert!(matches!(
            build_topology(&c, &mut ChaCha20Rng::seed_from_u64(1)),
            Err(SimError::InfeasibleTopology(_))
        ));
    }

    #[test]
    fn routes_between_roles() {
        let t = build(&cfg(900, 3), 2);
        for g in 0..9u32 {
            let gw = NodeId::gateway(g);
            let home = t.home_of(gw);
            assert_eq!(t.route(home, gw).unwrap(), vec![gw]);
            let other = NodeId::station((home.index + 1) % 3);
            assert_eq!(t.route(gw, other).unwrap(), vec![home, other]);
        }
        assert!(matches!(
            t.route(NodeId::sensor(0), NodeId::sensor(1)),
            Err(SimError::Unroutable { .. })
        ));
    }
}
