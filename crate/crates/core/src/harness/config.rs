//! TOML configuration files.
//!
//! Every key is optional and overrides the chosen scale preset. Keys carry
//! their unit in the name where one applies.
//!
//! ```toml
//! scale = "desk"                  # or "paper"
//!
//! [system]
//! antennas = 8
//! elements = 16
//! users = 2
//! p_max_watts = 3.1622776601683795
//! noise_watts = 1e-11
//! weights = [1.0, 1.0]
//! user_sides = ["transmission", "reflection"]
//!
//! [train]
//! epochs = 300
//! outer = 1
//! inner = 1
//! lr_w = 1e-3
//! lr_a = 5e-3
//! lr_theta = 5e-3
//! n1 = 5
//! n2 = 5
//! mode = "independent"            # or "coupled"
//! rho_min = 1e-2
//! rho_max = 1e2
//! lambda_radians = 6.283185307179586
//! seed = 0
//!
//! [channel]
//! rician_k_g = 10.0
//! rician_k_h = 10.0
//! bs_position_m = [0.0, 0.0]
//! ris_position_m = [100.0, 0.0]
//! transmission_center_m = [100.0, -15.0]
//! reflection_center_m = [100.0, 15.0]
//! user_radius_m = 5.0
//! pathloss_offset_db = 35.6
//! pathloss_slope_db = 22.0
//! los = "ula"                     # or "all_ones"
//! seed = 0
//!
//! [pga]
//! steps = 1000
//! step_w = 1.0
//! step_beta = 1.0
//! step_theta = 1.0
//! max_halvings = 40
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::baselines::PgaConfig;
use crate::channels::{default_scenario, desk_scenario, generate_channels, ChannelConfig, LosModel};
use crate::error::{Error, Result};
use crate::gml::{PhaseMode, TrainConfig};
use crate::model::{ChannelSet, Side, SystemConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// M = 8, N = 16, K = 2, 300 epochs.
    #[default]
    Desk,
    /// M = 64, N = 100, K = 4, 500 epochs.
    Paper,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemSection {
    pub antennas: Option<usize>,
    pub elements: Option<usize>,
    pub users: Option<usize>,
    pub p_max_watts: Option<f64>,
    pub noise_watts: Option<f64>,
    pub weights: Option<Vec<f64>>,
    pub user_sides: Option<Vec<Side>>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub outer: Option<usize>,
    pub inner: Option<usize>,
    pub lr_w: Option<f64>,
    pub lr_a: Option<f64>,
    pub lr_theta: Option<f64>,
    pub n1: Option<usize>,
    pub n2: Option<usize>,
    pub mode: Option<PhaseMode>,
    pub rho_min: Option<f64>,
    pub rho_max: Option<f64>,
    pub lambda_radians: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelSection {
    pub rician_k_g: Option<f64>,
    pub rician_k_h: Option<f64>,
    pub bs_position_m: Option<[f64; 2]>,
    pub ris_position_m: Option<[f64; 2]>,
    pub transmission_center_m: Option<[f64; 2]>,
    pub reflection_center_m: Option<[f64; 2]>,
    pub user_radius_m: Option<f64>,
    pub pathloss_offset_db: Option<f64>,
    pub pathloss_slope_db: Option<f64>,
    pub los: Option<LosModel>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgaSection {
    pub steps: Option<usize>,
    pub step_w: Option<f64>,
    pub step_beta: Option<f64>,
    pub step_theta: Option<f64>,
    pub max_halvings: Option<usize>,
}

/// Contents of a configuration file.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub scale: Option<Scale>,
    pub system: SystemSection,
    pub train: TrainSection,
    pub channel: ChannelSection,
    pub pga: PgaSection,
}

/// Everything needed to run one solve.
#[derive(Debug, Clone, PartialEq)]
pub struct Setup {
    pub system: SystemConfig,
    pub train: TrainConfig,
    pub channel: ChannelConfig,
    pub channel_seed: u64,
    pub pga: PgaConfig,
}

impl Setup {
    pub fn preset(scale: Scale) -> Self {
        let ((system, channel), train) = match scale {
            Scale::Desk => (desk_scenario(), TrainConfig::desk()),
            Scale::Paper => (default_scenario(), TrainConfig::default()),
        };
        Self {
            system,
            train,
            channel,
            channel_seed: 0,
            pga: PgaConfig::default(),
        }
    }

    /// Channel realization drawn from `channel_seed`.
    pub fn channels(&self) -> Result<ChannelSet> {
        generate_channels(&self.system, &self.channel, &mut ChaCha8Rng::seed_from_u64(self.channel_seed))
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.train.validate()?;
        self.channel.validate()?;
        self.pga.validate()
    }
}

macro_rules! set {
    ($target:expr, $value:expr) => {
        if let Some(v) = $value.clone() {
            $target = v;
        }
    };
}

impl ConfigFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Applies the file on top of a preset. `scale` overrides the file's own
    /// `scale` key when given.
    pub fn resolve(&self, scale: Option<Scale>) -> Result<Setup> {
        let scale = scale.or(self.scale).unwrap_or_default();
        let mut setup = Setup::preset(scale);
        self.apply(&mut setup);
        setup.validate()?;
        Ok(setup)
    }

    fn apply(&self, setup: &mut Setup) {
        let s = &self.system;
        let sys = &mut setup.system;
        set!(sys.antennas, s.antennas);
        set!(sys.elements, s.elements);
        set!(sys.p_max, s.p_max_watts);
        set!(sys.noise_power, s.noise_watts);
        if let Some(k) = s.users {
            let fresh = SystemConfig::new(sys.antennas, sys.elements, k, sys.p_max, sys.noise_power);
            sys.users = k;
            sys.weights = fresh.weights;
            sys.user_sides = fresh.user_sides;
        }
        set!(sys.weights, s.weights);
        set!(sys.user_sides, s.user_sides);

        let t = &self.train;
        let train = &mut setup.train;
        set!(train.epochs, t.epochs);
        set!(train.outer, t.outer);
        set!(train.inner, t.inner);
        set!(train.lr_w, t.lr_w);
        set!(train.lr_a, t.lr_a);
        set!(train.lr_theta, t.lr_theta);
        set!(train.n1, t.n1);
        set!(train.n2, t.n2);
        set!(train.mode, t.mode);
        set!(train.seed, t.seed);
        set!(train.penalty.rho_min, t.rho_min);
        set!(train.penalty.rho_max, t.rho_max);
        set!(train.regulator.lambda, t.lambda_radians);

        let c = &self.channel;
        let ch = &mut setup.channel;
        set!(ch.rician_k_g, c.rician_k_g);
        set!(ch.rician_k_h, c.rician_k_h);
        set!(ch.bs_pos, c.bs_position_m);
        set!(ch.ris_pos, c.ris_position_m);
        set!(ch.transmission_center, c.transmission_center_m);
        set!(ch.reflection_center, c.reflection_center_m);
        set!(ch.user_area_radius, c.user_radius_m);
        set!(ch.pathloss_a, c.pathloss_offset_db);
        set!(ch.pathloss_b, c.pathloss_slope_db);
        set!(ch.los, c.los);
        set!(setup.channel_seed, c.seed);

        let p = &self.pga;
        let pga = &mut setup.pga;
        set!(pga.steps, p.steps);
        set!(pga.step_w, p.step_w);
        set!(pga.step_beta, p.step_beta);
        set!(pga.step_theta, p.step_theta);
        set!(pga.max_halvings, p.max_halvings);
        pga.seed = setup.train.seed;
    }
}
