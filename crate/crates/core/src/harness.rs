//! Config-driven Monte Carlo experiments.
//!
//! A TOML config names one experiment plus optional overrides for every
//! sub-config (dotted keys such as `attacker.power_floor_db = 8` work as
//! well as tables). Trials run in parallel; trial `t` draws all randomness
//! from a stream seeded by `(seed, t, condition)`, so output depends only on
//! the config.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::{steering_vector, Angle, ArrayConfig, BandConfig, SPEED_OF_LIGHT};
use crate::attacker::{
    aoa_tof_profile, average_channels, coarse_ftm, estimate_channel, extract_paths_detailed,
    path_gains, phase_slope_tof, transmit_preamble, AoAToFProfile, EstimatedPath, ExtractConfig,
    Preamble, ProfileConfig, DEFAULT_FTM_SIGMA, DEFAULT_POWER_FLOOR_DB,
};
use crate::channel::{
    add_awgn, random_scenario, scene_to_paths, synthesize_channel, Channel, GeometricScene,
    PathSet, ScenarioSpec, SpreadClass,
};
use crate::error::{Error, Result};
use crate::linalg::{cis, CVector};
use crate::locator::{locate_single_ap, rssi_drop, triangulate, ApPose};
use crate::precoder::{
    apply_precoder, dolos_precoder, draw_delay, identity_precoder, naive_delay_precoder,
    naive_mp_injection_precoder, nulling_precoder, selective_delay_only_precoder, DelayMode,
    DelayPolicy, Precoder, VariantTag,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Experiment {
    E2eSingleAp,
    E2eMultiAp,
    AoaDegradation,
    TofDegradation,
    RssiComparison,
    DelayRandomization,
    MpInjectionAblation,
    SpreadSweep,
    AntennaSweep,
    StalePrecoder,
    ClusteringScatter,
    PrecodingAblationProfiles,
}

impl Experiment {
    pub const ALL: [Experiment; 12] = [
        Experiment::E2eSingleAp,
        Experiment::E2eMultiAp,
        Experiment::AoaDegradation,
        Experiment::TofDegradation,
        Experiment::RssiComparison,
        Experiment::DelayRandomization,
        Experiment::MpInjectionAblation,
        Experiment::SpreadSweep,
        Experiment::AntennaSweep,
        Experiment::StalePrecoder,
        Experiment::ClusteringScatter,
        Experiment::PrecodingAblationProfiles,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Experiment::E2eSingleAp => "e2e_single_ap",
            Experiment::E2eMultiAp => "e2e_multi_ap",
            Experiment::AoaDegradation => "aoa_degradation",
            Experiment::TofDegradation => "tof_degradation",
            Experiment::RssiComparison => "rssi_comparison",
            Experiment::DelayRandomization => "delay_randomization",
            Experiment::MpInjectionAblation => "mp_injection_ablation",
            Experiment::SpreadSweep => "spread_sweep",
            Experiment::AntennaSweep => "antenna_sweep",
            Experiment::StalePrecoder => "stale_precoder",
            Experiment::ClusteringScatter => "clustering_scatter",
            Experiment::PrecodingAblationProfiles => "precoding_ablation_profiles",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Experiment::E2eSingleAp => "single-AP AoA + phase-slope ranging fix, with and without obfuscation",
            Experiment::E2eMultiAp => "three-AP bearing triangulation of one shared obfuscated transmission",
            Experiment::AoaDegradation => "attacker AoA error, clean vs obfuscated",
            Experiment::TofDegradation => "phase-slope ranging error, clean vs obfuscated",
            Experiment::RssiComparison => "received power drop of nulling, selective delay and obfuscation",
            Experiment::DelayRandomization => "constant vs random delay under the packet-averaging attack",
            Experiment::MpInjectionAblation => "naive identity re-injection vs direct-path-nulled supplement",
            Experiment::SpreadSweep => "obfuscation vs multipath angular spread (low/medium/high)",
            Experiment::AntennaSweep => "obfuscation vs number of user transmit antennas",
            Experiment::StalePrecoder => "precoder built before a small user motion, applied after it",
            Experiment::ClusteringScatter => "per-packet path scatter for clean, constant and random delay",
            Experiment::PrecodingAblationProfiles => "AoA-ToF profiles for each precoder variant",
        }
    }

    fn default_variants(self) -> Vec<VariantTag> {
        use VariantTag::*;
        match self {
            Experiment::E2eSingleAp
            | Experiment::E2eMultiAp
            | Experiment::AoaDegradation
            | Experiment::TofDegradation => vec![Identity, Dolos],
            Experiment::RssiComparison => {
                vec![Identity, NullDirect, NaiveDelay, SelectiveDelayOnly, NaiveMpInjection, Dolos]
            }
            Experiment::MpInjectionAblation => vec![NaiveMpInjection, Dolos],
            Experiment::PrecodingAblationProfiles => {
                vec![Identity, NaiveDelay, SelectiveDelayOnly, NaiveMpInjection, Dolos]
            }
            Experiment::DelayRandomization
            | Experiment::SpreadSweep
            | Experiment::AntennaSweep
            | Experiment::StalePrecoder
            | Experiment::ClusteringScatter => vec![Dolos],
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Experiment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL.into_iter().find(|e| e.tag() == s).ok_or_else(|| {
            let tags: Vec<&str> = Experiment::ALL.iter().map(|e| e.tag()).collect();
            Error::Config(format!("unknown experiment {s:?}; valid tags: {}", tags.join(", ")))
        })
    }
}

impl TryFrom<String> for Experiment {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Experiment> for String {
    fn from(e: Experiment) -> String {
        e.tag().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArraysConfig {
    pub ap_antennas: usize,
    pub user_antennas: usize,
    /// Element spacing in centre wavelengths.
    pub spacing_wavelengths: f64,
}

impl Default for ArraysConfig {
    fn default() -> Self {
        ArraysConfig {
            ap_antennas: 4,
            user_antennas: 4,
            spacing_wavelengths: 0.5,
        }
    }
}

/// What the user knows when building its precoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Knowledge {
    /// True departure angles and delays.
    Oracle,
    /// Paths extracted from averaged downlink beacons (reciprocal channel).
    Estimated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrecoderConfig {
    /// Overrides the experiment's default variant list.
    pub variants: Option<Vec<VariantTag>>,
    pub knowledge: Knowledge,
    pub beacon_packets: usize,
    /// Estimated reflections weaker than this many dB below the strongest
    /// path are ignored by the user.
    pub reflection_floor_db: f64,
}

impl Default for PrecoderConfig {
    fn default() -> Self {
        PrecoderConfig {
            variants: None,
            knowledge: Knowledge::Estimated,
            beacon_packets: 20,
            reflection_floor_db: 15.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ranging {
    PhaseSlope,
    Ftm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackerConfig {
    pub extract: ExtractConfig,
    pub power_floor_db: f64,
    /// Packets averaged by the counterattack.
    pub packets: usize,
    pub profile: ProfileConfig,
    pub ranging: Ranging,
    pub ftm_sigma: f64,
}

impl Default for AttackerConfig {
    fn default() -> Self {
        AttackerConfig {
            extract: ExtractConfig::default(),
            power_floor_db: DEFAULT_POWER_FLOOR_DB,
            packets: 20,
            profile: ProfileConfig::default(),
            ranging: Ranging::PhaseSlope,
            ftm_sigma: DEFAULT_FTM_SIGMA,
        }
    }
}

/// Floor plan for geometric experiments. The first AP is the one the user
/// targets with its precoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub aps: Vec<ApPose>,
    pub user_x: [f64; 2],
    pub user_y: [f64; 2],
    pub user_boresight: f64,
    pub scatterer_x: [f64; 2],
    pub scatterer_y: [f64; 2],
    pub num_scatterers: usize,
    pub reflection_loss_db: f64,
    /// Minimum distance between a scatterer and the user or any AP.
    pub clearance: f64,
    pub max_attempts: usize,
    /// User displacement for the stale-precoder experiment, metres.
    pub motion: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            aps: vec![
                ApPose { position: [0.0, 0.0], boresight: 0.0 },
                ApPose { position: [0.0, 5.0], boresight: -30.0 },
                ApPose { position: [0.0, -5.0], boresight: 30.0 },
            ],
            user_x: [2.0, 6.0],
            user_y: [-2.0, 2.0],
            user_boresight: 180.0,
            scatterer_x: [0.5, 7.5],
            scatterer_y: [-5.0, 5.0],
            num_scatterers: 2,
            reflection_loss_db: -3.0,
            clearance: 0.5,
            max_attempts: 1000,
            motion: 0.07,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub spreads: Vec<SpreadClass>,
    pub user_antennas: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            spreads: vec![SpreadClass::Low, SpreadClass::Medium, SpreadClass::High],
            user_antennas: vec![2, 4, 8],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Json,
}

impl FromStr for OutputFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            _ => Err(Error::Config(format!("unknown format {s:?}; use csv or json"))),
        }
    }
}

fn default_trials() -> usize {
    500
}
fn default_seed() -> u64 {
    1
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}
fn default_snr() -> f64 {
    10.0
}
fn default_format() -> OutputFormat {
    OutputFormat::Csv
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_format")]
    pub format: OutputFormat,
    /// Uplink SNR in dB; `inf` for noiseless.
    #[serde(default = "default_snr")]
    pub snr_db: f64,
    #[serde(default)]
    pub arrays: ArraysConfig,
    #[serde(default)]
    pub band: BandConfig,
    #[serde(default)]
    pub scenario: ScenarioSpec,
    #[serde(default)]
    pub geometry: GeometryConfig,
    #[serde(default)]
    pub precoder: PrecoderConfig,
    #[serde(default)]
    pub attacker: AttackerConfig,
    #[serde(default)]
    pub delay: DelayPolicy,
    #[serde(default)]
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    /// Built-in defaults for `experiment`.
    pub fn demo(experiment: Experiment) -> Self {
        let mut cfg: ExperimentConfig = toml::from_str(&format!("experiment = \"{experiment}\"")).expect("defaults parse");
        if experiment == Experiment::ClusteringScatter || experiment == Experiment::PrecodingAblationProfiles {
            cfg.trials = 20;
        }
        cfg
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be >= 1".into()));
        }
        if self.snr_db.is_nan() {
            return Err(Error::Config("snr_db must be a number".into()));
        }
        self.ap_array()?;
        self.user_array(self.arrays.user_antennas)?;
        crate::array::subcarrier_frequencies(&self.band)?;
        self.scenario.validate()?;
        self.delay.validate()?;
        self.attacker.extract.validate()?;
        self.attacker.profile.grid.validate()?;
        if self.attacker.packets == 0 || self.precoder.beacon_packets == 0 {
            return Err(Error::Config("packet counts must be >= 1".into()));
        }
        if !(self.attacker.ftm_sigma > 0.0) {
            return Err(Error::Config("ftm_sigma must be > 0".into()));
        }
        let g = &self.geometry;
        if g.aps.is_empty() {
            return Err(Error::Config("geometry needs at least one AP".into()));
        }
        if self.experiment == Experiment::E2eMultiAp && g.aps.len() < 2 {
            return Err(Error::Config("triangulation needs at least two APs".into()));
        }
        for r in [g.user_x, g.user_y, g.scatterer_x, g.scatterer_y] {
            if !(r[0] <= r[1]) {
                return Err(Error::Config("geometry ranges must be ordered".into()));
            }
        }
        if self.sweep.spreads.is_empty() || self.sweep.user_antennas.is_empty() {
            return Err(Error::Config("sweep lists must be nonempty".into()));
        }
        if self.sweep.user_antennas.contains(&0) {
            return Err(Error::Config("user antenna counts must be >= 1".into()));
        }
        if let Some(v) = &self.precoder.variants {
            if v.is_empty() {
                return Err(Error::Config("precoder.variants must be nonempty".into()));
            }
        }
        Ok(())
    }

    pub fn variants(&self) -> Vec<VariantTag> {
        self.precoder
            .variants
            .clone()
            .unwrap_or_else(|| self.experiment.default_variants())
    }

    fn spacing(&self) -> f64 {
        self.arrays.spacing_wavelengths * self.band.center_wavelength()
    }

    fn ap_array(&self) -> Result<ArrayConfig> {
        ArrayConfig::new(self.arrays.ap_antennas, self.spacing())
    }

    fn user_array(&self, n: usize) -> Result<ArrayConfig> {
        ArrayConfig::new(n, self.spacing())
    }
}

/// One row of experiment output. Times are in nanoseconds, distances in
/// metres, angles in degrees; fields that do not apply are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub scenario: String,
    pub variant: VariantTag,
    pub aoa_true_deg: Option<f64>,
    pub aoa_est_deg: Option<f64>,
    pub aoa_err_deg: Option<f64>,
    pub tof_true_ns: Option<f64>,
    pub tof_est_ns: Option<f64>,
    pub range_err_m: Option<f64>,
    pub loc_err_m: Option<f64>,
    pub rssi_drop_db: Option<f64>,
    pub delay_ns: Option<f64>,
    pub error: Option<String>,
}

impl TrialRecord {
    fn new(trial: usize, scenario: &str, variant: VariantTag) -> Self {
        TrialRecord {
            trial,
            scenario: scenario.to_string(),
            variant,
            aoa_true_deg: None,
            aoa_est_deg: None,
            aoa_err_deg: None,
            tof_true_ns: None,
            tof_est_ns: None,
            range_err_m: None,
            loc_err_m: None,
            rssi_drop_db: None,
            delay_ns: None,
            error: None,
        }
    }

    fn failed(trial: usize, scenario: &str, variant: VariantTag, e: &Error) -> Self {
        TrialRecord {
            error: Some(e.tag().to_string()),
            ..TrialRecord::new(trial, scenario, variant)
        }
    }
}

pub const CSV_HEADER: &str = "trial,scenario,variant,aoa_true_deg,aoa_est_deg,aoa_err_deg,tof_true_ns,tof_est_ns,range_err_m,loc_err_m,rssi_drop_db,delay_ns,error";

/// One extracted path of one packet, for clustering plots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub trial: usize,
    pub scenario: String,
    pub packet: usize,
    pub aoa_deg: f64,
    pub tof_ns: f64,
    pub power: f64,
    /// Whether the truth-nearest path is the direct one.
    pub is_direct: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentOutput {
    pub records: Vec<TrialRecord>,
    /// `(label, profile)` pairs, one per precoder variant.
    pub profiles: Vec<(String, AoAToFProfile)>,
    pub scatter: Vec<ScatterPoint>,
}

/// Seed for the random stream of `(trial, condition)`.
pub fn trial_seed(seed: u64, trial: usize, condition: usize) -> u64 {
    // splitmix64 finaliser over a combined key
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((trial as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add((condition as u64).wrapping_mul(0x8CB9_2BA7_2F3D_8DD7))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn trial_rng(cfg: &ExperimentConfig, trial: usize, condition: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(trial_seed(cfg.seed, trial, condition))
}

/// What the user believes about its own uplink.
#[derive(Debug, Clone)]
struct UserView {
    v_d: CVector,
    reflection_aods: Vec<Angle>,
    excess: Vec<f64>,
}

fn oracle_view(truth: &PathSet, user: &ArrayConfig, band: &BandConfig) -> Result<UserView> {
    Ok(UserView {
        v_d: steering_vector(user, truth.direct.aod, band.center_wavelength())?,
        reflection_aods: truth.reflection_aods(),
        excess: crate::channel::excess_delays(truth),
    })
}

/// Extract the user's paths from averaged downlink beacons. The downlink is
/// the transpose of the uplink, whose angles appear negated at the user.
/// Fraction of a reflection's transmit steering energy that must lie outside
/// the span of the direct path and already selected reflections.
const RESOLVABLE_FRACTION: f64 = 0.1;

fn estimated_view<R: Rng + ?Sized>(
    cfg: &ExperimentConfig,
    uplink: &Channel,
    rng: &mut R,
) -> Result<UserView> {
    let down = uplink.transpose();
    let beacons: Vec<Channel> = (0..cfg.precoder.beacon_packets)
        .map(|_| add_awgn(&down, cfg.snr_db, rng))
        .collect();
    let avg = average_channels(&beacons)?;
    let ex = extract_paths_detailed(&avg, &cfg.attacker.extract)?;
    let direct = crate::attacker::direct_path_estimate(&ex.paths, cfg.attacker.power_floor_db)?;
    let strongest = ex.paths.iter().map(|p| p.power).fold(0.0, f64::max);
    let floor = strongest * 10f64.powf(-cfg.precoder.reflection_floor_db / 10.0);
    let mut refl: Vec<&EstimatedPath> = ex
        .paths
        .iter()
        .filter(|p| **p != direct && p.power >= floor && p.tof > direct.tof)
        .collect();
    refl.sort_by(|a, b| b.power.total_cmp(&a.power));
    let user = uplink.tx_array;
    let wl = uplink.band.center_wavelength();
    let v_d = steering_vector(&user, direct.aoa.negate(), wl)?;
    // Keep, strongest first, reflections the array can tell apart from the
    // direct path and from those already kept; nulling a direction that is
    // nearly inside that span would also null the direct path.
    let mut basis = vec![v_d.normalize()];
    let mut kept: Vec<&EstimatedPath> = Vec::new();
    for p in refl {
        if kept.len() + 1 >= uplink.num_tx() {
            break;
        }
        let s = steering_vector(&user, p.aoa.negate(), wl)?;
        let mut r = s.clone();
        for q in &basis {
            let c = q.dotc(&r);
            r -= q * c;
        }
        if r.norm_squared() >= RESOLVABLE_FRACTION * s.norm_squared() {
            basis.push(r.normalize());
            kept.push(p);
        }
    }
    Ok(UserView {
        v_d,
        reflection_aods: kept.iter().map(|p| p.aoa.negate()).collect(),
        excess: kept.iter().map(|p| p.tof - direct.tof).collect(),
    })
}

fn user_view<R: Rng + ?Sized>(
    cfg: &ExperimentConfig,
    truth: &PathSet,
    uplink: &Channel,
    rng: &mut R,
) -> Result<UserView> {
    match cfg.precoder.knowledge {
        Knowledge::Oracle => oracle_view(truth, &uplink.tx_array, &uplink.band),
        Knowledge::Estimated => estimated_view(cfg, uplink, rng),
    }
}

fn needs_delay(v: VariantTag) -> bool {
    !matches!(v, VariantTag::Identity | VariantTag::NullDirect)
}

fn build_precoder(
    variant: VariantTag,
    view: &UserView,
    tau: f64,
    user: &ArrayConfig,
    band: &BandConfig,
) -> Result<Precoder> {
    let n_sub = band.num_subcarriers;
    let aods = &view.reflection_aods;
    match variant {
        VariantTag::Identity => identity_precoder(user.num_antennas, n_sub),
        VariantTag::NullDirect => nulling_precoder(&view.v_d, n_sub),
        VariantTag::NaiveDelay => naive_delay_precoder(&view.v_d, tau, band),
        VariantTag::SelectiveDelayOnly => selective_delay_only_precoder(&view.v_d, aods, tau, user, band),
        VariantTag::NaiveMpInjection => naive_mp_injection_precoder(&view.v_d, aods, tau, user, band),
        VariantTag::Dolos => dolos_precoder(&view.v_d, aods, tau, user, band),
    }
}

/// Precoder for `variant`, drawing its delay from the policy.
fn precoder_for<R: Rng + ?Sized>(
    cfg: &ExperimentConfig,
    variant: VariantTag,
    view: &Result<UserView>,
    user: &ArrayConfig,
    rng: &mut R,
) -> Result<Precoder> {
    if variant == VariantTag::Identity {
        return identity_precoder(user.num_antennas, cfg.band.num_subcarriers);
    }
    let view = view.as_ref().map_err(Clone::clone)?;
    let tau = if needs_delay(variant) {
        draw_delay(&cfg.delay, &view.excess, rng)?
    } else {
        0.0
    };
    build_precoder(variant, view, tau, user, &cfg.band)
}

/// Attacker view of one packet: noisy estimate of the effective channel.
fn observe<R: Rng + ?Sized>(cfg: &ExperimentConfig, effective: &Channel, rng: &mut R) -> Result<Channel> {
    let l = Preamble::all_ones(effective.num_subcarriers());
    estimate_channel(&transmit_preamble(effective, &l, cfg.snr_db, rng)?, &l)
}

struct Verdict {
    direct: EstimatedPath,
    tof: f64,
}

fn attack(cfg: &ExperimentConfig, estimate: &Channel) -> Result<Verdict> {
    let ex = extract_paths_detailed(estimate, &cfg.attacker.extract)?;
    let direct = crate::attacker::direct_path_estimate(&ex.paths, cfg.attacker.power_floor_db)?;
    let k = ex.paths.iter().position(|p| *p == direct).expect("selected from list");
    let gains = path_gains(estimate, &ex)?;
    let tof = phase_slope_tof(&gains[k], &estimate.band)?;
    Ok(Verdict { direct, tof })
}

fn fill(rec: &mut TrialRecord, truth: &PathSet, v: &Verdict) {
    let a = truth.direct.aoa.degrees();
    rec.aoa_true_deg = Some(a);
    rec.aoa_est_deg = Some(v.direct.aoa.degrees());
    rec.aoa_err_deg = Some((v.direct.aoa.degrees() - a).abs());
    rec.tof_true_ns = Some(truth.direct.tof * 1e9);
    rec.tof_est_ns = Some(v.tof * 1e9);
    rec.range_err_m = Some((v.tof - truth.direct.tof).abs() * SPEED_OF_LIGHT);
}

fn record_or_error(
    trial: usize,
    label: &str,
    variant: VariantTag,
    f: impl FnOnce(&mut TrialRecord) -> Result<()>,
) -> TrialRecord {
    let mut rec = TrialRecord::new(trial, label, variant);
    match f(&mut rec) {
        Ok(()) => rec,
        Err(e) => TrialRecord::failed(trial, label, variant, &e),
    }
}

struct Condition {
    label: String,
    spec: ScenarioSpec,
    user_antennas: usize,
}

fn parametric_conditions(cfg: &ExperimentConfig) -> Vec<Condition> {
    let base = |label: &str| Condition {
        label: label.to_string(),
        spec: cfg.scenario.clone(),
        user_antennas: cfg.arrays.user_antennas,
    };
    match cfg.experiment {
        Experiment::SpreadSweep => cfg
            .sweep
            .spreads
            .iter()
            .map(|s| Condition {
                spec: ScenarioSpec {
                    spread: *s,
                    ..cfg.scenario.clone()
                },
                ..base(s.label())
            })
            .collect(),
        // a user with N antennas can hide behind at most N - 1 reflections
        Experiment::AntennaSweep => cfg
            .sweep
            .user_antennas
            .iter()
            .map(|&n| Condition {
                label: format!("tx{n}"),
                spec: ScenarioSpec {
                    num_reflections: cfg.scenario.num_reflections.min(n.saturating_sub(1)),
                    ..cfg.scenario.clone()
                },
                user_antennas: n,
            })
            .collect(),
        _ => vec![base(cfg.scenario.spread.label())],
    }
}

/// Random parametric scenario, every configured variant on the same channel.
fn parametric_trial(cfg: &ExperimentConfig, trial: usize, out: &mut ExperimentOutput) {
    let variants = cfg.variants();
    for (ci, cond) in parametric_conditions(cfg).iter().enumerate() {
        let mut rng = trial_rng(cfg, trial, ci);
        let setup = (|| {
            let user = cfg.user_array(cond.user_antennas)?;
            let ap = cfg.ap_array()?;
            let truth = random_scenario(&cond.spec, &mut rng)?;
            let h = synthesize_channel(&truth, &user, &ap, &cfg.band)?;
            Ok::<_, Error>((user, truth, h))
        })();
        let (user, truth, h) = match setup {
            Ok(s) => s,
            Err(e) => {
                out.records
                    .extend(variants.iter().map(|v| TrialRecord::failed(trial, &cond.label, *v, &e)));
                continue;
            }
        };
        let view = user_view(cfg, &truth, &h, &mut rng);
        for &variant in &variants {
            let rec = record_or_error(trial, &cond.label, variant, |rec| {
                let p = precoder_for(cfg, variant, &view, &user, &mut rng)?;
                let eff = apply_precoder(&h, &p)?;
                rec.delay_ns = Some(p.delay_used * 1e9);
                rec.rssi_drop_db = Some(rssi_drop(&h, &eff)?);
                let est = observe(cfg, &eff, &mut rng)?;
                if cfg.experiment == Experiment::PrecodingAblationProfiles && trial == 0 {
                    out.profiles
                        .push((variant.to_string(), aoa_tof_profile(&est, &cfg.attacker.profile)?));
                }
                fill(rec, &truth, &attack(cfg, &est)?);
                Ok(())
            });
            out.records.push(rec);
        }
    }
}

fn random_scene<R: Rng + ?Sized>(cfg: &ExperimentConfig, rng: &mut R) -> Result<GeometricScene> {
    let g = &cfg.geometry;
    let sep = cfg.scenario.spread.min_separation_deg();
    let draw = |rng: &mut R, r: [f64; 2]| if r[0] == r[1] { r[0] } else { rng.random_range(r[0]..r[1]) };
    for _ in 0..g.max_attempts {
        let user = [draw(rng, g.user_x), draw(rng, g.user_y)];
        let scatterers: Vec<[f64; 2]> = (0..g.num_scatterers)
            .map(|_| [draw(rng, g.scatterer_x), draw(rng, g.scatterer_y)])
            .collect();
        let near = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).hypot(a[1] - b[1]) < g.clearance;
        if scatterers
            .iter()
            .any(|s| near(*s, user) || g.aps.iter().any(|ap| near(*s, ap.position)))
        {
            continue;
        }
        let scene = GeometricScene {
            user_position: user,
            user_boresight: g.user_boresight,
            aps: g.aps.clone(),
            scatterers,
            reflection_loss_db: g.reflection_loss_db,
        };
        let Ok(paths) = scene_to_paths(&scene, 0) else {
            continue;
        };
        let separated = paths.reflections.iter().all(|r| {
            (r.aoa.degrees() - paths.direct.aoa.degrees()).abs() >= sep
                && (r.aod.degrees() - paths.direct.aod.degrees()).abs() >= sep
        });
        let all_visible = (0..scene.aps.len()).all(|k| scene_to_paths(&scene, k).is_ok());
        if paths.reflections.len() == g.num_scatterers && separated && all_visible {
            return Ok(scene);
        }
    }
    Err(Error::ScenarioInfeasible(g.max_attempts))
}

fn moved<R: Rng + ?Sized>(scene: &GeometricScene, dist: f64, rng: &mut R) -> GeometricScene {
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut s = scene.clone();
    s.user_position[0] += dist * phi.cos();
    s.user_position[1] += dist * phi.sin();
    s
}

fn range_estimate<R: Rng + ?Sized>(cfg: &ExperimentConfig, v: &Verdict, truth: &PathSet, rng: &mut R) -> Result<f64> {
    match cfg.attacker.ranging {
        Ranging::PhaseSlope => Ok((v.tof * SPEED_OF_LIGHT).max(0.0)),
        Ranging::Ftm => coarse_ftm(truth.direct.tof * SPEED_OF_LIGHT, cfg.attacker.ftm_sigma, rng),
    }
}

/// Geometric scene; the user's precoder targets AP 0.
fn geometric_trial(cfg: &ExperimentConfig, trial: usize, out: &mut ExperimentOutput) {
    let variants = cfg.variants();
    let label = "geometric";
    let mut rng = trial_rng(cfg, trial, 0);
    let setup = (|| {
        let user = cfg.user_array(cfg.arrays.user_antennas)?;
        let ap = cfg.ap_array()?;
        let scene = random_scene(cfg, &mut rng)?;
        let truth = scene_to_paths(&scene, 0)?;
        let h = synthesize_channel(&truth, &user, &ap, &cfg.band)?;
        Ok::<_, Error>((user, ap, scene, truth, h))
    })();
    let (user, ap, scene, truth, h) = match setup {
        Ok(s) => s,
        Err(e) => {
            out.records
                .extend(variants.iter().map(|v| TrialRecord::failed(trial, label, *v, &e)));
            return;
        }
    };
    let view = user_view(cfg, &truth, &h, &mut rng);
    for &variant in &variants {
        let rec = record_or_error(trial, label, variant, |rec| {
            let p = precoder_for(cfg, variant, &view, &user, &mut rng)?;
            let eff = apply_precoder(&h, &p)?;
            rec.delay_ns = Some(p.delay_used * 1e9);
            rec.rssi_drop_db = Some(rssi_drop(&h, &eff)?);
            let v = attack(cfg, &observe(cfg, &eff, &mut rng)?)?;
            fill(rec, &truth, &v);
            match cfg.experiment {
                Experiment::E2eSingleAp => {
                    let range = range_estimate(cfg, &v, &truth, &mut rng)?;
                    let fix = locate_single_ap(&scene.aps[0], v.direct.aoa, range)?;
                    rec.loc_err_m = Some(fix.distance_to(scene.user_position));
                }
                Experiment::E2eMultiAp => {
                    let mut bearings = vec![v.direct.aoa];
                    for k in 1..scene.aps.len() {
                        let hk = synthesize_channel(&scene_to_paths(&scene, k)?, &user, &ap, &cfg.band)?;
                        let effk = apply_precoder(&hk, &p)?;
                        bearings.push(attack(cfg, &observe(cfg, &effk, &mut rng)?)?.direct.aoa);
                    }
                    let fix = triangulate(&scene.aps, &bearings)?;
                    rec.loc_err_m = Some(fix.distance_to(scene.user_position));
                }
                _ => {}
            }
            Ok(())
        });
        out.records.push(rec);
    }
}

/// Precoder built for the scene, then the user moves before transmitting.
fn stale_trial(cfg: &ExperimentConfig, trial: usize, out: &mut ExperimentOutput) {
    let variants = cfg.variants();
    let mut rng = trial_rng(cfg, trial, 0);
    let setup = (|| {
        let user = cfg.user_array(cfg.arrays.user_antennas)?;
        let ap = cfg.ap_array()?;
        let before = random_scene(cfg, &mut rng)?;
        let after = moved(&before, cfg.geometry.motion, &mut rng);
        let t0 = scene_to_paths(&before, 0)?;
        let t1 = scene_to_paths(&after, 0)?;
        let h0 = synthesize_channel(&t0, &user, &ap, &cfg.band)?;
        let h1 = synthesize_channel(&t1, &user, &ap, &cfg.band)?;
        Ok::<_, Error>((user, t0, t1, h0, h1))
    })();
    let (user, t0, t1, h0, h1) = match setup {
        Ok(s) => s,
        Err(e) => {
            for label in ["fresh", "stale"] {
                out.records
                    .extend(variants.iter().map(|v| TrialRecord::failed(trial, label, *v, &e)));
            }
            return;
        }
    };
    let views = [
        ("fresh", user_view(cfg, &t1, &h1, &mut rng)),
        ("stale", user_view(cfg, &t0, &h0, &mut rng)),
    ];
    for (label, view) in &views {
        for &variant in &variants {
            let rec = record_or_error(trial, label, variant, |rec| {
                let p = precoder_for(cfg, variant, view, &user, &mut rng)?;
                let eff = apply_precoder(&h1, &p)?;
                rec.delay_ns = Some(p.delay_used * 1e9);
                rec.rssi_drop_db = Some(rssi_drop(&h1, &eff)?);
                fill(rec, &t1, &attack(cfg, &observe(cfg, &eff, &mut rng)?)?);
                Ok(())
            });
            out.records.push(rec);
        }
    }
}

/// Packet-averaging counterattack. Reflection phases are redrawn for every
/// packet; the user's delay is either held or redrawn per packet.
fn averaging_trial(cfg: &ExperimentConfig, trial: usize, out: &mut ExperimentOutput) {
    let conditions: &[&str] = if cfg.experiment == Experiment::ClusteringScatter {
        &["unobfuscated", "constant", "random"]
    } else {
        &["constant", "random"]
    };
    let variant = cfg.variants()[0];
    let mut rng = trial_rng(cfg, trial, 0);
    let setup = (|| {
        let user = cfg.user_array(cfg.arrays.user_antennas)?;
        let ap = cfg.ap_array()?;
        let truth = random_scenario(&cfg.scenario, &mut rng)?;
        let h = synthesize_channel(&truth, &user, &ap, &cfg.band)?;
        let view = user_view(cfg, &truth, &h, &mut rng)?;
        Ok::<_, Error>((user, ap, truth, view))
    })();
    let (user, ap, truth, view) = match setup {
        Ok(s) => s,
        Err(e) => {
            for label in conditions {
                let v = if *label == "unobfuscated" { VariantTag::Identity } else { variant };
                out.records.push(TrialRecord::failed(trial, label, v, &e));
            }
            return;
        }
    };
    for (ci, label) in conditions.iter().enumerate() {
        let mut rng = trial_rng(cfg, trial, ci + 1);
        let v_tag = if *label == "unobfuscated" { VariantTag::Identity } else { variant };
        let rec = record_or_error(trial, label, v_tag, |rec| {
            let random = DelayPolicy {
                mode: DelayMode::UniformRandom,
                ..cfg.delay
            };
            let held = draw_delay(&random, &view.excess, &mut rng)?;
            let mut estimates = Vec::with_capacity(cfg.attacker.packets);
            let mut delays = 0.0;
            for _ in 0..cfg.attacker.packets {
                let mut packet = truth.clone();
                for r in packet.reflections.iter_mut() {
                    r.amplitude *= cis(rng.random_range(0.0..std::f64::consts::TAU));
                }
                let h = synthesize_channel(&packet, &user, &ap, &cfg.band)?;
                let tau = match *label {
                    "unobfuscated" => 0.0,
                    "constant" => held,
                    _ => draw_delay(&random, &view.excess, &mut rng)?,
                };
                delays += tau;
                let p = if v_tag == VariantTag::Identity {
                    identity_precoder(user.num_antennas, cfg.band.num_subcarriers)?
                } else {
                    build_precoder(v_tag, &view, tau, &user, &cfg.band)?
                };
                estimates.push(observe(cfg, &apply_precoder(&h, &p)?, &mut rng)?);
            }
            if cfg.experiment == Experiment::ClusteringScatter {
                for (k, est) in estimates.iter().enumerate() {
                    for p in extract_paths_detailed(est, &cfg.attacker.extract)?.paths {
                        out.scatter.push(ScatterPoint {
                            trial,
                            scenario: label.to_string(),
                            packet: k,
                            aoa_deg: p.aoa.degrees(),
                            tof_ns: p.tof * 1e9,
                            power: p.power,
                            is_direct: nearest_is_direct(&truth, p.aoa.degrees()),
                        });
                    }
                }
            }
            rec.delay_ns = Some(delays / cfg.attacker.packets as f64 * 1e9);
            fill(rec, &truth, &attack(cfg, &average_channels(&estimates)?)?);
            Ok(())
        });
        out.records.push(rec);
    }
}

fn nearest_is_direct(truth: &PathSet, aoa: f64) -> bool {
    let d0 = (truth.direct.aoa.degrees() - aoa).abs();
    truth
        .reflections
        .iter()
        .all(|r| (r.aoa.degrees() - aoa).abs() >= d0)
}

fn run_trial(cfg: &ExperimentConfig, trial: usize) -> ExperimentOutput {
    let mut out = ExperimentOutput::default();
    match cfg.experiment {
        Experiment::E2eSingleAp | Experiment::E2eMultiAp | Experiment::TofDegradation => {
            geometric_trial(cfg, trial, &mut out)
        }
        Experiment::StalePrecoder => stale_trial(cfg, trial, &mut out),
        Experiment::DelayRandomization | Experiment::ClusteringScatter => averaging_trial(cfg, trial, &mut out),
        Experiment::AoaDegradation
        | Experiment::RssiComparison
        | Experiment::MpInjectionAblation
        | Experiment::SpreadSweep
        | Experiment::AntennaSweep
        | Experiment::PrecodingAblationProfiles => parametric_trial(cfg, trial, &mut out),
    }
    out
}

/// Run every trial of `config`, in parallel, returning records ordered by
/// trial id.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let parts: Vec<ExperimentOutput> = (0..config.trials)
        .into_par_iter()
        .map(|t| run_trial(config, t))
        .collect();
    let mut out = ExperimentOutput::default();
    for p in parts {
        out.records.extend(p.records);
        out.profiles.extend(p.profiles);
        out.scatter.extend(p.scatter);
    }
    Ok(out)
}

fn io_err(path: &Path, e: impl fmt::Display) -> Error {
    Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn records_to_csv(records: &[TrialRecord]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in records {
        w.serialize(r).map_err(|e| Error::Config(e.to_string()))?;
    }
    let body = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    s.push_str(std::str::from_utf8(&body).expect("csv writes utf-8"));
    Ok(s)
}

pub fn records_from_csv(text: &str) -> Result<Vec<TrialRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Config(e.to_string())))
        .collect()
}

/// Write `records` to `path` as CSV or JSON.
pub fn emit_results(records: &[TrialRecord], format: OutputFormat, path: &Path) -> Result<()> {
    let text = match format {
        OutputFormat::Csv => records_to_csv(records)?,
        OutputFormat::Json => serde_json::to_string_pretty(records).map_err(|e| io_err(path, e))? + "\n",
    };
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Write all artifacts of `output` under `dir`; returns the paths written.
pub fn write_output(
    config: &ExperimentConfig,
    output: &ExperimentOutput,
    dir: &Path,
    format: OutputFormat,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let tag = config.experiment.tag();
    let ext = match format {
        OutputFormat::Csv => "csv",
        OutputFormat::Json => "json",
    };
    let mut written = Vec::new();
    let main = dir.join(format!("{tag}.{ext}"));
    emit_results(&output.records, format, &main)?;
    written.push(main);
    for (label, prof) in &output.profiles {
        let p = dir.join(format!("{tag}_profile_{label}.csv"));
        prof.write_csv(&p)?;
        written.push(p);
    }
    if !output.scatter.is_empty() {
        let p = dir.join(format!("{tag}_scatter.csv"));
        let mut w = csv::Writer::from_path(&p).map_err(|e| io_err(&p, e))?;
        for s in &output.scatter {
            w.serialize(s).map_err(|e| io_err(&p, e))?;
        }
        w.flush().map_err(|e| io_err(&p, e))?;
        written.push(p);
    }
    Ok(written)
}

/// Medians per `(scenario, variant)` group, in first-appearance order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub variant: VariantTag,
    pub trials: usize,
    pub errors: usize,
    pub median_aoa_err_deg: Option<f64>,
    pub median_range_err_m: Option<f64>,
    pub median_loc_err_m: Option<f64>,
    pub mean_rssi_drop_db: Option<f64>,
}

fn median_of(v: &[f64]) -> Option<f64> {
    crate::locator::error_stats(v, crate::locator::Units::M)
        .ok()
        .map(|s| s.median())
}

pub fn summarize(records: &[TrialRecord]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, VariantTag)> = Vec::new();
    for r in records {
        let k = (r.scenario.clone(), r.variant);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(scenario, variant)| {
            let group: Vec<&TrialRecord> = records
                .iter()
                .filter(|r| r.scenario == scenario && r.variant == variant)
                .collect();
            let col = |f: fn(&TrialRecord) -> Option<f64>| -> Vec<f64> { group.iter().filter_map(|r| f(r)).collect() };
            let drops = col(|r| r.rssi_drop_db);
            SummaryRow {
                trials: group.len(),
                errors: group.iter().filter(|r| r.error.is_some()).count(),
                median_aoa_err_deg: median_of(&col(|r| r.aoa_err_deg)),
                median_range_err_m: median_of(&col(|r| r.range_err_m)),
                median_loc_err_m: median_of(&col(|r| r.loc_err_m)),
                mean_rssi_drop_db: (!drops.is_empty()).then(|| drops.iter().sum::<f64>() / drops.len() as f64),
                scenario,
                variant,
            }
        })
        .collect()
}
