//! Engine fuel-rate models: a synthetic Willans line and CSV-tabulated maps.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FuelMapError {
    #[error("failed to read fuel map {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("fuel map {path}: {0}", path = .1)]
    Parse(String, String),
    #[error("fuel map is not a rectangular grid: {points} points for {speeds} speeds x {torques} torques")]
    NotRectangular {
        points: usize,
        speeds: usize,
        torques: usize,
    },
    #[error("fuel map grid must have at least 2 speed and 2 torque breakpoints")]
    TooSmall,
    #[error("fuel rate decreases with torque at {speed_rpm} rpm (torque {torque_nm} N*m); map must be monotone in positive power")]
    NonMonotone { speed_rpm: f64, torque_nm: f64 },
    #[error("negative fuel rate {rate} at ({speed_rpm} rpm, {torque_nm} N*m)")]
    NegativeRate {
        rate: f64,
        speed_rpm: f64,
        torque_nm: f64,
    },
}

/// Rectangular (engine speed, engine torque) -> fuel rate grid with bilinear
/// interpolation. Queries outside the grid clamp to the nearest edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuelGrid {
    speeds_rpm: Vec<f64>,
    torques_nm: Vec<f64>,
    /// Row-major: `rates[i_speed * torques.len() + i_torque]`.
    rates_g_s: Vec<f64>,
}

impl FuelGrid {
    pub fn new(
        speeds_rpm: Vec<f64>,
        torques_nm: Vec<f64>,
        rates_g_s: Vec<f64>,
    ) -> Result<Self, FuelMapError> {
        if speeds_rpm.len() < 2 || torques_nm.len() < 2 {
            return Err(FuelMapError::TooSmall);
        }
        if rates_g_s.len() != speeds_rpm.len() * torques_nm.len() {
            return Err(FuelMapError::NotRectangular {
                points: rates_g_s.len(),
                speeds: speeds_rpm.len(),
                torques: torques_nm.len(),
            });
        }
        let grid = Self {
            speeds_rpm,
            torques_nm,
            rates_g_s,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Parse the CSV interface format: header
    /// `engine_speed_rpm,engine_torque_nm,fuel_rate_g_s`, rectangular grid.
    pub fn from_csv(path: &Path) -> Result<Self, FuelMapError> {
        let pstr = path.display().to_string();
        let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => FuelMapError::Io {
                path: pstr.clone(),
                source: std::io::Error::other(e.to_string()),
            },
            _ => FuelMapError::Parse(pstr.clone(), e.to_string()),
        })?;
        let headers = reader
            .headers()
            .map_err(|e| FuelMapError::Parse(pstr.clone(), e.to_string()))?
            .clone();
        let expect = ["engine_speed_rpm", "engine_torque_nm", "fuel_rate_g_s"];
        let got: Vec<&str> = headers.iter().map(|h| h.trim()).collect();
        if got != expect {
            return Err(FuelMapError::Parse(
                pstr,
                format!("expected header {expect:?}, got {got:?}"),
            ));
        }
        let mut triples = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| FuelMapError::Parse(pstr.clone(), e.to_string()))?;
            let mut row = [0.0f64; 3];
            for (j, field) in record.iter().enumerate().take(3) {
                row[j] = field.trim().parse().map_err(|_| {
                    FuelMapError::Parse(pstr.clone(), format!("row {}: bad number {field:?}", i + 2))
                })?;
            }
            triples.push((row[0], row[1], row[2]));
        }

        let mut speeds: Vec<f64> = triples.iter().map(|t| t.0).collect();
        speeds.sort_by(|a, b| a.total_cmp(b));
        speeds.dedup();
        let mut torques: Vec<f64> = triples.iter().map(|t| t.1).collect();
        torques.sort_by(|a, b| a.total_cmp(b));
        torques.dedup();

        if triples.len() != speeds.len() * torques.len() {
            return Err(FuelMapError::NotRectangular {
                points: triples.len(),
                speeds: speeds.len(),
                torques: torques.len(),
            });
        }
        let nt = torques.len();
        let mut rates = vec![f64::NAN; speeds.len() * nt];
        for (s, t, r) in triples {
            let i = speeds.partition_point(|x| *x < s);
            let j = torques.partition_point(|x| *x < t);
            rates[i * nt + j] = r;
        }
        if rates.iter().any(|r| r.is_nan()) {
            return Err(FuelMapError::NotRectangular {
                points: 0,
                speeds: speeds.len(),
                torques: nt,
            });
        }
        Self::new(speeds, torques, rates)
    }

    fn validate(&self) -> Result<(), FuelMapError> {
        let nt = self.torques_nm.len();
        for (i, &s) in self.speeds_rpm.iter().enumerate() {
            for (j, &t) in self.torques_nm.iter().enumerate() {
                let r = self.rates_g_s[i * nt + j];
                if r < 0.0 {
                    return Err(FuelMapError::NegativeRate {
                        rate: r,
                        speed_rpm: s,
                        torque_nm: t,
                    });
                }
                // Monotone non-decreasing in torque (i.e. in positive power at
                // fixed speed), with a little slack for table round-off.
                if j > 0 && t > 0.0 && r < self.rates_g_s[i * nt + j - 1] - 1e-9 {
                    return Err(FuelMapError::NonMonotone {
                        speed_rpm: s,
                        torque_nm: t,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn interpolate(&self, speed_rpm: f64, torque_nm: f64) -> f64 {
        let (i0, i1, fs) = bracket(&self.speeds_rpm, speed_rpm);
        let (j0, j1, ft) = bracket(&self.torques_nm, torque_nm);
        let nt = self.torques_nm.len();
        let at = |i: usize, j: usize| self.rates_g_s[i * nt + j];
        let lo = at(i0, j0) * (1.0 - ft) + at(i0, j1) * ft;
        let hi = at(i1, j0) * (1.0 - ft) + at(i1, j1) * ft;
        lo * (1.0 - fs) + hi * fs
    }
}

/// Clamped bracketing: returns (lower index, upper index, fraction).
fn bracket(breaks: &[f64], x: f64) -> (usize, usize, f64) {
    let n = breaks.len();
    if x <= breaks[0] {
        return (0, 0, 0.0);
    }
    if x >= breaks[n - 1] {
        return (n - 1, n - 1, 0.0);
    }
    let hi = breaks.partition_point(|b| *b <= x);
    let lo = hi - 1;
    let f = (x - breaks[lo]) / (breaks[hi] - breaks[lo]);
    (lo, hi, f)
}

/// Fuel consumption model for the engine.
///
/// The synthetic Willans line is `idle + c_p * P_e+ + c_w * omega_e` for
/// positive engine power and exactly the idle rate otherwise. A tabulated map
/// (loaded from CSV) overrides it when provided.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FuelModel {
    SyntheticWillans {
        idle_rate_g_s: f64,
        power_coeff_g_per_kj: f64,
        speed_coeff_g_per_krev: f64,
    },
    Tabulated {
        idle_rate_g_s: f64,
        table: FuelGrid,
    },
}

impl Default for FuelModel {
    fn default() -> Self {
        FuelModel::SyntheticWillans {
            idle_rate_g_s: 0.4,
            power_coeff_g_per_kj: 0.05,
            speed_coeff_g_per_krev: 6.0,
        }
    }
}

impl FuelModel {
    pub fn idle_rate_g_s(&self) -> f64 {
        match self {
            FuelModel::SyntheticWillans { idle_rate_g_s, .. } => *idle_rate_g_s,
            FuelModel::Tabulated { idle_rate_g_s, .. } => *idle_rate_g_s,
        }
    }

    /// Fuel rate in g/s at an engine operating point.
    ///
    /// Non-positive engine power clamps to the idle rate; the rate never
    /// falls below idle anywhere on the map.
    pub fn rate_g_s(&self, engine_speed_rpm: f64, engine_torque_nm: f64) -> f64 {
        let omega_rad_s = engine_speed_rpm * std::f64::consts::TAU / 60.0;
        let power_w = engine_torque_nm * omega_rad_s;
        if power_w <= 0.0 {
            return self.idle_rate_g_s();
        }
        match self {
            FuelModel::SyntheticWillans {
                idle_rate_g_s,
                power_coeff_g_per_kj,
                speed_coeff_g_per_krev,
            } => {
                let krev_per_s = engine_speed_rpm / 60_000.0;
                idle_rate_g_s + power_coeff_g_per_kj * power_w / 1000.0
                    + speed_coeff_g_per_krev * krev_per_s
            }
            FuelModel::Tabulated {
                idle_rate_g_s,
                table,
            } => table
                .interpolate(engine_speed_rpm, engine_torque_nm)
                .max(*idle_rate_g_s),
        }
    }

    /// Upper bound of the map over an engine envelope, used as the reward
    /// normalizer for the fuel term.
    pub fn max_rate_g_s(&self, max_speed_rpm: f64, max_torque_nm: f64) -> f64 {
        self.rate_g_s(max_speed_rpm, max_torque_nm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid() -> FuelGrid {
        // speeds 600/1800/3000, torques 0/600/1200
        FuelGrid::new(
            vec![600.0, 1800.0, 3000.0],
            vec![0.0, 600.0, 1200.0],
            vec![
                0.5, 2.5, 5.0, //
                0.8, 7.0, 14.0, //
                1.2, 12.0, 24.0,
            ],
        )
        .unwrap()
    }

    #[test]
    fn bilinear_is_exact_at_nodes_and_linear_between() {
        let g = grid();
        assert_relative_eq!(g.interpolate(1800.0, 600.0), 7.0);
        // midpoint of the four central nodes
        let mid = g.interpolate(1200.0, 300.0);
        assert_relative_eq!(mid, (0.5 + 2.5 + 0.8 + 7.0) / 4.0);
    }

    #[test]
    fn interpolation_clamps_outside_grid() {
        let g = grid();
        assert_relative_eq!(g.interpolate(100.0, -50.0), 0.5);
        assert_relative_eq!(g.interpolate(9000.0, 9000.0), 24.0);
    }

    #[test]
    fn willans_clamps_to_idle_at_non_positive_power() {
        let m = FuelModel::default();
        assert_relative_eq!(m.rate_g_s(1500.0, 0.0), 0.4);
        assert_relative_eq!(m.rate_g_s(1500.0, -300.0), 0.4);
        assert!(m.rate_g_s(1500.0, 300.0) > 0.4);
    }

    #[test]
    fn willans_monotone_in_power_at_fixed_speed() {
        let m = FuelModel::default();
        let mut last = 0.0;
        for t in 0..20 {
            let r = m.rate_g_s(1500.0, 60.0 * t as f64);
            assert!(r >= last);
            last = r;
        }
    }

    #[test]
    fn rejects_non_monotone_table() {
        let err = FuelGrid::new(
            vec![600.0, 1200.0],
            vec![100.0, 200.0],
            vec![1.0, 0.5, 1.0, 2.0],
        )
        .unwrap_err();
        assert!(matches!(err, FuelMapError::NonMonotone { .. }));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.csv");
        let mut s = String::from("engine_speed_rpm,engine_torque_nm,fuel_rate_g_s\n");
        let g = grid();
        for (i, sp) in [600.0, 1800.0, 3000.0].iter().enumerate() {
            for (j, tq) in [0.0, 600.0, 1200.0].iter().enumerate() {
                s.push_str(&format!("{sp},{tq},{}\n", g.rates_g_s[i * 3 + j]));
            }
        }
        std::fs::write(&path, s).unwrap();
        let loaded = FuelGrid::from_csv(&path).unwrap();
        assert_eq!(loaded, g);
    }

    #[test]
    fn csv_rejects_ragged_grid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.csv");
        std::fs::write(
            &path,
            "engine_speed_rpm,engine_torque_nm,fuel_rate_g_s\n600,0,0.5\n600,100,1.0\n1200,0,0.8\n",
        )
        .unwrap();
        assert!(matches!(
            FuelGrid::from_csv(&path),
            Err(FuelMapError::NotRectangular { .. })
        ));
    }
}
