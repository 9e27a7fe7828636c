//! Link budgets: log-distance path loss, received power, SINR, and the
//! SINR-to-rate lookup.
//!
//! Transmit power is spread over the bond: doubling the width costs
//! 10*log10(2) ~ 3.01 dB of per-20 MHz received power, which is what makes
//! wide bonds fragile at long range. Everything here is a pure function of
//! the configuration; the default has no fading, so link budgets are exact
//! and repeatable.

use crate::channels::VALID_WIDTHS;
use crate::deployment::Deployment;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RfError {
    #[error("bond width {0} is not one of 1, 2, 4, 8")]
    InvalidWidth(u8),
    #[error("invalid rf configuration: {0}")]
    InvalidConfig(String),
}

/// One row of the rate table: the minimum SINR needed to decode and the
/// data rate per 20 MHz channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McsEntry {
    pub min_sinr_db: f64,
    pub rate_mbps_per_20mhz: f64,
}

/// Propagation and PHY abstraction parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RfConfig {
    /// Path loss at 1 m, dB.
    pub pl0_db: f64,
    /// Path-loss exponent.
    pub gamma: f64,
    /// Noise floor per 20 MHz, dBm.
    pub noise_floor_dbm: f64,
    /// Decode thresholds, strictly increasing in both fields.
    pub mcs_table: Vec<McsEntry>,
    /// Log-normal shadowing sigma, dB. Reserved hook; 0 disables it and is
    /// the default so outputs stay exactly reproducible run to run.
    pub shadowing_sigma_db: f64,
}

impl RfConfig {
    /// The default, hand-checkable four-step table.
    pub fn desk() -> Self {
        Self::with_table(vec![
            McsEntry { min_sinr_db: 2.0, rate_mbps_per_20mhz: 8.6 },
            McsEntry { min_sinr_db: 9.0, rate_mbps_per_20mhz: 17.2 },
            McsEntry { min_sinr_db: 18.0, rate_mbps_per_20mhz: 28.7 },
            McsEntry { min_sinr_db: 30.0, rate_mbps_per_20mhz: 57.5 },
        ])
        .expect("desk table is valid")
    }

    /// Optional 12-step preset modeled on 11ax single-stream 20 MHz rates,
    /// topping out at 143.4 Mbps per 20 MHz at 34 dB and above.
    pub fn full() -> Self {
        let rates = [
            8.6, 17.2, 25.8, 34.4, 51.6, 68.8, 77.4, 86.0, 103.2, 114.7, 129.0, 143.4,
        ];
        let thresholds = [
            2.0, 5.0, 9.0, 11.0, 15.0, 18.0, 20.0, 25.0, 29.0, 31.0, 33.0, 34.0,
        ];
        Self::with_table(
            thresholds
                .iter()
                .zip(rates.iter())
                .map(|(&t, &r)| McsEntry { min_sinr_db: t, rate_mbps_per_20mhz: r })
                .collect(),
        )
        .expect("full table is valid")
    }

    pub fn with_table(mcs_table: Vec<McsEntry>) -> Result<Self, RfError> {
        let cfg = Self {
            pl0_db: 40.0,
            gamma: 4.0,
            noise_floor_dbm: -95.0,
            mcs_table,
            shadowing_sigma_db: 0.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), RfError> {
        if self.noise_floor_dbm >= 0.0 {
            return Err(RfError::InvalidConfig(format!(
                "noise floor {} dBm must be negative",
                self.noise_floor_dbm
            )));
        }
        if self.mcs_table.is_empty() {
            return Err(RfError::InvalidConfig("empty MCS table".into()));
        }
        for w in self.mcs_table.windows(2) {
            if w[1].min_sinr_db <= w[0].min_sinr_db
                || w[1].rate_mbps_per_20mhz <= w[0].rate_mbps_per_20mhz
            {
                return Err(RfError::InvalidConfig(
                    "MCS table must be strictly increasing in threshold and rate".into(),
                ));
            }
        }
        if self.shadowing_sigma_db < 0.0 {
            return Err(RfError::InvalidConfig("negative shadowing sigma".into()));
        }
        Ok(())
    }

    /// Log-distance path loss in dB; distances are clamped below at 0.1 m.
    pub fn path_loss_db(&self, distance_m: f64) -> f64 {
        let d = distance_m.max(0.1);
        self.pl0_db + 10.0 * self.gamma * d.log10()
    }

    /// Per-20 MHz received power when `tx_power_dbm` is spread over a bond
    /// of `bond_width` channels.
    pub fn rssi_dbm(&self, tx_power_dbm: f64, bond_width: u8, distance_m: f64) -> Result<f64, RfError> {
        if !VALID_WIDTHS.contains(&bond_width) {
            return Err(RfError::InvalidWidth(bond_width));
        }
        Ok(self.received_power_dbm(tx_power_dbm, bond_width, distance_m))
    }

    /// Same computation without the power-of-two width check; the
    /// interference map spreads power over the raw range width, which a
    /// hand-written deployment may make non-bondable.
    pub fn received_power_dbm(&self, tx_power_dbm: f64, width: u8, distance_m: f64) -> f64 {
        tx_power_dbm - 10.0 * (width.max(1) as f64).log10() - self.path_loss_db(distance_m)
    }

    /// The MCS entry selected at `sinr_db`, if any rate is decodable.
    pub fn mcs_for(&self, sinr_db: f64) -> Option<McsEntry> {
        self.mcs_table
            .iter()
            .rev()
            .find(|e| e.min_sinr_db <= sinr_db)
            .copied()
    }

    /// Transmission rate over a bond: width times the per-channel rate, or
    /// 0 below the lowest decode threshold.
    pub fn rate_mbps(&self, sinr_db: f64, bond_width: u8) -> Result<f64, RfError> {
        if !VALID_WIDTHS.contains(&bond_width) {
            return Err(RfError::InvalidWidth(bond_width));
        }
        Ok(self
            .mcs_for(sinr_db)
            .map(|e| bond_width as f64 * e.rate_mbps_per_20mhz)
            .unwrap_or(0.0))
    }
}

pub fn mw_from_dbm(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

pub fn dbm_from_mw(mw: f64) -> f64 {
    10.0 * mw.log10()
}

/// SINR in dB from a received power, a list of interferer powers, and the
/// noise floor (all dBm). The interferer list may be empty.
pub fn sinr_db(rssi_dbm: f64, interference_dbm: &[f64], noise_floor_dbm: f64) -> f64 {
    let denom: f64 =
        interference_dbm.iter().map(|&i| mw_from_dbm(i)).sum::<f64>() + mw_from_dbm(noise_floor_dbm);
    dbm_from_mw(mw_from_dbm(rssi_dbm) / denom)
}

/// A single link measurement: received power, aggregate interference, and
/// the SINR they imply. Constructed rather than assembled by hand so the
/// three fields always satisfy the SINR identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkObservables {
    pub rssi_dbm: f64,
    pub interference_dbm: f64,
    pub sinr_db: f64,
}

impl LinkObservables {
    pub fn new(rssi_dbm: f64, interference_dbm: f64, noise_floor_dbm: f64) -> Self {
        Self {
            rssi_dbm,
            interference_dbm,
            sinr_db: sinr_db(rssi_dbm, &[interference_dbm], noise_floor_dbm),
        }
    }
}

/// Sentinel for the interference map diagonal.
pub const NO_LINK_DBM: f64 = f64::NEG_INFINITY;

/// AP-to-AP static interference map: entry `(i, j)` is the power AP `i`
/// receives from AP `j` transmitting over its full allowed range
/// (worst-case occupancy); the diagonal is [`NO_LINK_DBM`].
pub fn interference_map(d: &Deployment, cfg: &RfConfig) -> Vec<Vec<f64>> {
    let aps: Vec<_> = d.bsss.iter().map(|b| &b.ap).collect();
    let n = aps.len();
    let mut map = vec![vec![NO_LINK_DBM; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let dist = aps[i].position.distance_to(&aps[j].position);
            map[i][j] =
                cfg.received_power_dbm(aps[j].tx_power_dbm, aps[j].range.width(), dist);
        }
    }
    map
}
