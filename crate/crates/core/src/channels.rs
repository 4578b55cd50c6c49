//! Scenario geometry and Rician channel synthesis.
//!
//! All devices sit in one horizontal plane. Users are dropped uniformly in a
//! disc on their side of the surface; path loss follows
//! `PL(d) = a + b·log10(d)` dB and scales amplitudes by `10^{-PL/20}`.

use std::f64::consts::{FRAC_1_SQRT_2, PI, TAU};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{CMatrix, C64};
use crate::model::{ChannelSet, Side, SystemConfig};

/// Structure of the line-of-sight component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LosModel {
    /// Half-wavelength uniform linear arrays with random angles per draw.
    Ula,
    /// Every LoS entry equal to one.
    AllOnes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelConfig {
    /// Linear Rician factor of the BS→RIS link.
    pub rician_k_g: f64,
    /// Linear Rician factor of the RIS→user links.
    pub rician_k_h: f64,
    /// BS position, meters.
    pub bs_pos: [f64; 2],
    /// STAR-RIS position, meters.
    pub ris_pos: [f64; 2],
    /// Center of the transmission-side user disc, meters.
    pub transmission_center: [f64; 2],
    /// Center of the reflection-side user disc, meters.
    pub reflection_center: [f64; 2],
    /// User disc radius, meters.
    pub user_area_radius: f64,
    /// Path-loss offset, dB.
    pub pathloss_a: f64,
    /// Path-loss slope, dB per decade.
    pub pathloss_b: f64,
    pub los: LosModel,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            rician_k_g: 10.0,
            rician_k_h: 10.0,
            bs_pos: [0.0, 0.0],
            ris_pos: [100.0, 0.0],
            transmission_center: [100.0, -15.0],
            reflection_center: [100.0, 15.0],
            user_area_radius: 5.0,
            pathloss_a: 35.6,
            pathloss_b: 22.0,
            los: LosModel::Ula,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rician_k_g >= 0.0 && self.rician_k_h >= 0.0) {
            return Err(Error::Config("Rician factors must be non-negative".into()));
        }
        if !(self.user_area_radius >= 0.0) {
            return Err(Error::Config("user area radius must be non-negative".into()));
        }
        Ok(())
    }

    fn center(&self, side: Side) -> [f64; 2] {
        match side {
            Side::Transmission => self.transmission_center,
            Side::Reflection => self.reflection_center,
        }
    }
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(watts: f64) -> f64 {
    10.0 * watts.log10() + 30.0
}

/// Path loss in dB at distance `d` meters.
pub fn path_loss_db(d: f64, cfg: &ChannelConfig) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::Domain(format!("distance must be positive, got {d}")));
    }
    Ok(cfg.pathloss_a + cfg.pathloss_b * d.log10())
}

/// Amplitude gain `10^{-PL(d)/20}`.
pub fn path_loss_linear(d: f64, cfg: &ChannelConfig) -> Result<f64> {
    Ok(10f64.powf(-path_loss_db(d, cfg)? / 20.0))
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn cn01<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(re, im) * FRAC_1_SQRT_2
}

fn steering(len: usize, angle: f64) -> Vec<C64> {
    (0..len)
        .map(|i| C64::from_polar(1.0, PI * i as f64 * angle.sin()))
        .collect()
}

/// One channel draw together with the quantities it was built from.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    pub channels: ChannelSet,
    pub user_positions: Vec<[f64; 2]>,
    /// Unit-modulus LoS part of `G`.
    pub g_los: CMatrix,
    /// Amplitude path loss of the BS→RIS link.
    pub path_loss_g: f64,
    /// Amplitude path loss of each RIS→user link.
    pub path_loss_h: Vec<f64>,
}

/// Uniform point in a disc.
pub fn sample_in_disc<R: Rng + ?Sized>(center: [f64; 2], radius: f64, rng: &mut R) -> [f64; 2] {
    let r = radius * rng.random::<f64>().sqrt();
    let phi = rng.random_range(0.0..TAU);
    [center[0] + r * phi.cos(), center[1] + r * phi.sin()]
}

fn rician(k: f64) -> (f64, f64) {
    ((k / (1.0 + k)).sqrt(), (1.0 / (1.0 + k)).sqrt())
}

pub fn generate_realization<R: Rng + ?Sized>(sys: &SystemConfig, cfg: &ChannelConfig, rng: &mut R) -> Result<ChannelRealization> {
    sys.validate()?;
    cfg.validate()?;
    let (m, n) = (sys.antennas, sys.elements);

    let user_positions: Vec<[f64; 2]> = sys
        .user_sides
        .iter()
        .map(|side| sample_in_disc(cfg.center(*side), cfg.user_area_radius, rng))
        .collect();

    let g_los = match cfg.los {
        LosModel::AllOnes => CMatrix::from_fn(n, m, |_, _| C64::new(1.0, 0.0)),
        LosModel::Ula => {
            let arrival = steering(n, rng.random_range(-PI / 2.0..PI / 2.0));
            let departure = steering(m, rng.random_range(-PI / 2.0..PI / 2.0));
            CMatrix::from_fn(n, m, |r, c| arrival[r] * departure[c].conj())
        }
    };
    let path_loss_g = path_loss_linear(distance(cfg.bs_pos, cfg.ris_pos), cfg)?;
    let (los_w, nlos_w) = rician(cfg.rician_k_g);
    let g = CMatrix::from_fn(n, m, |r, c| path_loss_g * (los_w * g_los.get(r, c) + nlos_w * cn01(rng)));

    let (los_w, nlos_w) = rician(cfg.rician_k_h);
    let mut path_loss_h = Vec::with_capacity(sys.users);
    let mut h = Vec::with_capacity(sys.users);
    for pos in &user_positions {
        let pl = path_loss_linear(distance(cfg.ris_pos, *pos), cfg)?;
        let los = match cfg.los {
            LosModel::AllOnes => vec![C64::new(1.0, 0.0); n],
            LosModel::Ula => steering(n, rng.random_range(-PI / 2.0..PI / 2.0)),
        };
        h.push(los.iter().map(|l| pl * (los_w * l + nlos_w * cn01(rng))).collect());
        path_loss_h.push(pl);
    }

    Ok(ChannelRealization {
        channels: ChannelSet::new(g, h)?,
        user_positions,
        g_los,
        path_loss_g,
        path_loss_h,
    })
}

/// Draws one Rician channel set for the scenario.
pub fn generate_channels<R: Rng + ?Sized>(sys: &SystemConfig, cfg: &ChannelConfig, rng: &mut R) -> Result<ChannelSet> {
    Ok(generate_realization(sys, cfg, rng)?.channels)
}

/// Full-size scenario: M = 64, N = 100, K = 4, 10 dBm budget, −80 dBm noise.
pub fn default_scenario() -> (SystemConfig, ChannelConfig) {
    (
        SystemConfig::new(64, 100, 4, dbm_to_watts(10.0), dbm_to_watts(-80.0)),
        ChannelConfig::default(),
    )
}

/// Transmit budget of the reduced scenario. The smaller arrays lose about
/// 25 dB of coherent gain (M·N²) against the full-size one; this budget puts
/// the received SNR back in the same regime.
pub const DESK_POWER_DBM: f64 = 35.0;

/// Reduced scenario used for quick experiments: M = 8, N = 16, K = 2, same
/// geometry and noise, [`DESK_POWER_DBM`] budget.
pub fn desk_scenario() -> (SystemConfig, ChannelConfig) {
    (
        SystemConfig::new(8, 16, 2, dbm_to_watts(DESK_POWER_DBM), dbm_to_watts(-80.0)),
        ChannelConfig::default(),
    )
}

const CHANNEL_MAGIC: &str = "stargml-channels 1";

/// Text form of a channel set:
///
/// ```text
/// stargml-channels 1
/// M N K
/// G                    N lines, each: re im re im ... (M pairs)
/// H                    K lines, line k is h_k: re im ... (N pairs)
/// ```
pub fn channels_to_string(ch: &ChannelSet) -> String {
    let mut out = String::new();
    writeln!(out, "{CHANNEL_MAGIC}").unwrap();
    writeln!(out, "{} {} {}", ch.antennas(), ch.elements(), ch.users()).unwrap();
    let row = |out: &mut String, values: &mut dyn Iterator<Item = C64>| {
        let line: Vec<String> = values.flat_map(|z| [format!("{:?}", z.re), format!("{:?}", z.im)]).collect();
        writeln!(out, "{}", line.join(" ")).unwrap();
    };
    writeln!(out, "G").unwrap();
    for r in 0..ch.elements() {
        row(&mut out, &mut (0..ch.antennas()).map(|c| ch.g().get(r, c)));
    }
    writeln!(out, "H").unwrap();
    for k in 0..ch.users() {
        row(&mut out, &mut ch.h(k).iter().copied());
    }
    out
}

pub fn channels_from_str(text: &str) -> Result<ChannelSet> {
    let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let mut cursor = lines.iter().copied();
    let mut next = |what: &str| cursor.next().ok_or_else(|| Error::Parse(format!("unexpected end of input, wanted {what}")));

    if next("header")? != CHANNEL_MAGIC {
        return Err(Error::Parse("missing channel header".into()));
    }
    let dims: Vec<usize> = next("dimensions")?
        .split_whitespace()
        .map(|s| s.parse().map_err(|e| Error::Parse(format!("dimension {s}: {e}"))))
        .collect::<Result<_>>()?;
    let [m, n, k] = dims[..] else {
        return Err(Error::Parse("dimension line must be 'M N K'".into()));
    };

    let mut section = |tag: &str, rows: usize, len: usize| -> Result<Vec<Vec<C64>>> {
        if next(tag)? != tag {
            return Err(Error::Parse(format!("expected section '{tag}'")));
        }
        (0..rows)
            .map(|r| {
                let vals: Vec<f64> = next(tag)?
                    .split_whitespace()
                    .map(|s| s.parse().map_err(|e| Error::Parse(format!("{tag} row {r}: {s}: {e}"))))
                    .collect::<Result<_>>()?;
                if vals.len() != 2 * len {
                    return Err(Error::Parse(format!(
                        "{tag} row {r}: expected {} values, got {}",
                        2 * len,
                        vals.len()
                    )));
                }
                Ok(vals.chunks(2).map(|p| C64::new(p[0], p[1])).collect())
            })
            .collect()
    };
    let g_rows = section("G", n, m)?;
    let h = section("H", k, n)?;
    let g = CMatrix::from_fn(n, m, |r, c| g_rows[r][c]);
    ChannelSet::new(g, h)
}

pub fn save_channels(path: &Path, ch: &ChannelSet) -> Result<()> {
    std::fs::write(path, channels_to_string(ch)).map_err(|e| Error::io(path, e))
}

pub fn load_channels(path: &Path) -> Result<ChannelSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    channels_from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn path_loss_values() {
        let cfg = ChannelConfig::default();
        assert!((path_loss_db(1.0, &cfg).unwrap() - 35.6).abs() < 1e-12);
        assert!((path_loss_db(100.0, &cfg).unwrap() - 79.6).abs() < 1e-12);
        assert!((path_loss_db(10.0, &cfg).unwrap() - 57.6).abs() < 1e-12);
        let lin = path_loss_linear(10.0, &cfg).unwrap();
        assert!((lin - 10f64.powf(-57.6 / 20.0)).abs() < 1e-18);
        assert!(matches!(path_loss_db(0.0, &cfg), Err(Error::Domain(_))));
        assert!(path_loss_linear(-3.0, &cfg).is_err());
    }

    #[test]
    fn scenario_constants() {
        let (sys, ch) = default_scenario();
        assert_eq!((sys.antennas, sys.elements, sys.users), (64, 100, 4));
        assert!((sys.p_max - 0.01).abs() < 1e-15);
        assert!((sys.noise_power - 1e-11).abs() < 1e-24);
        assert_eq!((ch.rician_k_g, ch.rician_k_h), (10.0, 10.0));
        assert!((watts_to_dbm(0.01) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn same_seed_same_channels() {
        let (sys, cfg) = desk_scenario();
        let a = generate_channels(&sys, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = generate_channels(&sys, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let c = generate_channels(&sys, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn pure_los_limit() {
        let (sys, mut cfg) = desk_scenario();
        cfg.rician_k_g = 1e12;
        let r = generate_realization(&sys, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let g = r.channels.g();
        let diff: f64 = g
            .as_slice()
            .iter()
            .zip(r.g_los.as_slice())
            .map(|(a, b)| (a - b * r.path_loss_g).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(diff / g.frobenius_sqr().sqrt() < 1e-5);
        assert!(r.g_los.as_slice().iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn pure_scattering_variance() {
        let mut sys = SystemConfig::new(10, 10, 1, 1.0, 1.0);
        sys.user_sides = vec![Side::Reflection];
        let cfg = ChannelConfig {
            rician_k_g: 0.0,
            ..ChannelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut acc = 0.0;
        let mut count = 0usize;
        let mut pl = 0.0;
        while count < 10_000 {
            let r = generate_realization(&sys, &cfg, &mut rng).unwrap();
            pl = r.path_loss_g;
            acc += r.channels.g().frobenius_sqr();
            count += 100;
        }
        let var = acc / count as f64;
        assert!((var / (pl * pl) - 1.0).abs() < 0.05, "{}", var / (pl * pl));
    }

    #[test]
    fn users_inside_their_discs() {
        let (mut sys, cfg) = default_scenario();
        sys.elements = 4;
        sys.antennas = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let r = generate_realization(&sys, &cfg, &mut rng).unwrap();
            for (pos, side) in r.user_positions.iter().zip(&sys.user_sides) {
                assert!(distance(*pos, cfg.center(*side)) <= cfg.user_area_radius + 1e-12);
            }
        }
    }

    #[test]
    fn text_round_trip() {
        let (sys, cfg) = desk_scenario();
        let ch = generate_channels(&sys, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let text = channels_to_string(&ch);
        assert_eq!(channels_from_str(&text).unwrap(), ch);
        assert!(channels_from_str("stargml-channels 1\n1 1 1\nG\n1 2 3\nH\n0 0\n").is_err());
        assert!(channels_from_str("").is_err());
    }
}
