//! Shared fixtures for the benchmarks.

use obfsim::{
    draw_delay, excess_delays, random_scenario, steering_vector, synthesize_channel, ArrayConfig, BandConfig,
    Channel, DelayPolicy, PathSet, ScenarioSpec,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One medium-spread 4x4 scenario with everything a precoder needs.
pub struct Fixture {
    pub band: BandConfig,
    pub array: ArrayConfig,
    pub paths: PathSet,
    pub channel: Channel,
    pub v_d: obfsim::linalg::CVector,
    pub tau: f64,
}

pub fn fixture(seed: u64) -> Fixture {
    let band = BandConfig::wifi_ch36_40mhz();
    let array = ArrayConfig::half_wavelength(4, &band).expect("valid array");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let paths = random_scenario(&ScenarioSpec::default(), &mut rng).expect("scenario");
    let channel = synthesize_channel(&paths, &array, &array, &band).expect("channel");
    let v_d = steering_vector(&array, paths.direct.aod, band.center_wavelength()).expect("steering");
    let tau = draw_delay(&DelayPolicy::default(), &excess_delays(&paths), &mut rng).expect("delay");
    Fixture {
        band,
        array,
        paths,
        channel,
        v_d,
        tau,
    }
}
