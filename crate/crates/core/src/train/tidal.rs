//! Synthetic grid city with commuting tides.
//!
//! POIs sit on a `grid x grid` lattice with 1 km spacing. Even columns are
//! residential, odd columns commercial, and the residential POI at column
//! `x` is paired with the commercial POI at `x + 1`. Background movement is
//! a symmetric random walk over the 8-neighbourhood whose kernel is balanced
//! to be doubly stochastic, so `P(j|i) = P(i|j)` on every edge. With
//! probability `strength`, mornings send residents to their partner while
//! commercial POIs avoid theirs, and evenings do the reverse.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geo::EARTH_RADIUS_KM;
use crate::ingest::{CheckIn, CSV_HEADER};

/// Monday 2024-01-01 00:00:00 UTC.
pub const EPOCH_MONDAY: i64 = 1_704_067_200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TidalConfig {
    pub grid: usize,
    pub n_users: usize,
    pub trajectories_per_user: usize,
    pub len: usize,
    pub strength: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TidalCity {
    pub grid: usize,
    pub coords: Vec<(f64, f64)>,
    /// `(neighbour, probability)` per POI; rows sum to one and the kernel is
    /// symmetric.
    pub kernel: Vec<Vec<(usize, f64)>>,
}

impl TidalCity {
    pub fn new(grid: usize) -> Result<Self> {
        if grid < 2 || !grid.is_multiple_of(2) {
            return Err(Error::invalid(format!("grid side must be even and >= 2, got {grid}")));
        }
        let n = grid * grid;
        let deg = 1.0f64.to_degrees() / EARTH_RADIUS_KM;
        let lat0: f64 = 40.0;
        let coords = (0..n)
            .map(|p| {
                let (x, y) = ((p % grid) as f64, (p / grid) as f64);
                (lat0 + y * deg, -74.0 + x * deg / lat0.to_radians().cos())
            })
            .collect();
        let mut nbrs: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (p, list) in nbrs.iter_mut().enumerate() {
            let (x, y) = ((p % grid) as i64, (p / grid) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if (dx, dy) != (0, 0) && (0..grid as i64).contains(&nx) && (0..grid as i64).contains(&ny) {
                        list.push((ny * grid as i64 + nx) as usize);
                    }
                }
            }
        }
        // symmetric Sinkhorn: find s with s_i * sum_j s_j = 1 over neighbours
        let mut s = vec![1.0 / 8.0f64.sqrt(); n];
        for _ in 0..10_000 {
            let next: Vec<f64> = (0..n)
                .map(|i| (s[i] / nbrs[i].iter().map(|&j| s[j]).sum::<f64>()).sqrt())
                .collect();
            s = next;
            let err = (0..n)
                .map(|i| (s[i] * nbrs[i].iter().map(|&j| s[j]).sum::<f64>() - 1.0).abs())
                .fold(0.0, f64::max);
            if err < 1e-13 {
                break;
            }
        }
        let kernel = (0..n)
            .map(|i| {
                let row: Vec<(usize, f64)> = nbrs[i].iter().map(|&j| (j, s[i] * s[j])).collect();
                let tot: f64 = row.iter().map(|x| x.1).sum();
                row.into_iter().map(|(j, w)| (j, w / tot)).collect()
            })
            .collect();
        Ok(TidalCity { grid, coords, kernel })
    }

    pub fn n_pois(&self) -> usize {
        self.grid * self.grid
    }

    pub fn is_residential(&self, p: usize) -> bool {
        (p % self.grid).is_multiple_of(2)
    }

    pub fn partner(&self, p: usize) -> usize {
        if self.is_residential(p) {
            p + 1
        } else {
            p - 1
        }
    }

    /// Pairs `(residential, commercial)` joined by a commute.
    pub fn commuter_edges(&self) -> Vec<(usize, usize)> {
        (0..self.n_pois())
            .filter(|&p| self.is_residential(p))
            .map(|p| (p, p + 1))
            .collect()
    }

    fn step(&self, rng: &mut ChaCha8Rng, p: usize, hour: usize, strength: f64) -> usize {
        let morning = hour < 12;
        let heads_out = self.is_residential(p) == morning;
        if rng.gen::<f64>() < strength {
            if heads_out {
                return self.partner(p);
            }
            let others: Vec<usize> = self.kernel[p]
                .iter()
                .map(|x| x.0)
                .filter(|&j| j != self.partner(p))
                .collect();
            return others[rng.gen_range(0..others.len())];
        }
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for &(j, w) in &self.kernel[p] {
            acc += w;
            if u < acc {
                return j;
            }
        }
        self.kernel[p].last().expect("every POI has neighbours").0
    }
}

/// Check-ins of the synthetic corpus, ordered by user then time. POI,
/// user and category ids equal their indices.
pub fn generate_tidal(cfg: &TidalConfig) -> Result<(TidalCity, Vec<CheckIn>)> {
    if !(0.0..=1.0).contains(&cfg.strength) {
        return Err(Error::invalid(format!("asymmetry strength must be in [0, 1], got {}", cfg.strength)));
    }
    if cfg.len < 2 {
        return Err(Error::invalid("trajectory length must be >= 2"));
    }
    let city = TidalCity::new(cfg.grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = city.n_pois();
    let mut out = Vec::with_capacity(cfg.n_users * cfg.trajectories_per_user * cfg.len);
    for user in 0..cfg.n_users {
        let home = 2 * rng.gen_range(0..n / 2);
        for tr in 0..cfg.trajectories_per_user {
            let mut ts = EPOCH_MONDAY + (tr as i64) * 604_800 + rng.gen_range(0..604_800 - 86_400 * 2);
            let mut p = home;
            for step in 0..cfg.len {
                if step > 0 {
                    ts += rng.gen_range(3_600..=10_800);
                    let hour = ((ts % 86_400) / 3_600) as usize;
                    p = city.step(&mut rng, p, hour, cfg.strength);
                }
                let (lat, lon) = city.coords[p];
                out.push(CheckIn {
                    user_id: user,
                    poi_id: p,
                    timestamp: ts,
                    lat,
                    lon,
                    category_id: usize::from(!city.is_residential(p)),
                });
            }
        }
    }
    Ok((city, out))
}

pub fn write_checkins_csv(checkins: &[CheckIn], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(CSV_HEADER).map_err(|e| csv_err(path, e))?;
    for c in checkins {
        let cat = if c.category_id == 0 { "residential" } else { "commercial" };
        w.write_record([
            format!("u{}", c.user_id),
            format!("p{}", c.poi_id),
            c.timestamp.to_string(),
            format!("{:.7}", c.lat),
            format!("{:.7}", c.lon),
            cat.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::invalid(format!("writing {}: {other:?}", path.display())),
    }
}
