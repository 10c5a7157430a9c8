//! A synthetic stand-in for the hydraulic test-rig dataset: same file
//! layout, signal set, sampling rates and condition profile columns, with
//! sensor responses driven by the simulated component conditions.

use std::f64::consts::TAU;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

pub const COOLER_LEVELS: [f64; 3] = [100.0, 20.0, 3.0];
pub const VALVE_LEVELS: [f64; 4] = [100.0, 90.0, 80.0, 73.0];
pub const PUMP_LEVELS: [f64; 3] = [0.0, 1.0, 2.0];
pub const ACCUMULATOR_LEVELS: [f64; 4] = [130.0, 115.0, 100.0, 90.0];

const DURATION_S: f64 = 60.0;
/// Relative load in each 10 s block of a cycle.
const LOAD_STEPS: [f64; 6] = [0.4, 1.0, 0.6, 0.9, 0.5, 0.7];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub cycles: usize,
    pub seed: u64,
    /// Chance that a block of cycles runs with every component nominal.
    pub healthy_block_prob: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            cycles: 720,
            seed: 7,
            healthy_block_prob: 0.35,
        }
    }
}

/// Operating state of one simulated cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleState {
    pub cooler: f64,
    pub valve: f64,
    pub pump: f64,
    pub accumulator: f64,
    pub stable: bool,
    pub ambient: f64,
    pub load_gain: f64,
}

impl CycleState {
    fn oil_temperature(&self) -> f64 {
        self.ambient + 18.0 + 0.02 * (100.0 - self.cooler)
    }

    /// Temperature drift over the cycle while the rig is still settling.
    fn drift(&self, t: f64) -> f64 {
        if self.stable {
            0.0
        } else {
            0.08 * t
        }
    }
}

fn pick(rng: &mut ChaCha8Rng, levels: &[f64]) -> f64 {
    levels[rng.random_range(1..levels.len())]
}

/// Condition schedule: blocks of 1 to 10 cycles with constant conditions.
/// The first cycle after a change is often flagged unstable.
pub fn schedule(config: &SimConfig) -> Vec<CycleState> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut ambient: f64 = 22.0;
    let mut out = Vec::with_capacity(config.cycles);
    while out.len() < config.cycles {
        let len = rng.random_range(1..=10);
        let (mut cooler, mut valve, mut pump, mut accumulator) = (100.0, 100.0, 0.0, 130.0);
        if !rng.random_bool(config.healthy_block_prob) {
            loop {
                if rng.random_bool(0.4) {
                    cooler = pick(&mut rng, &COOLER_LEVELS);
                }
                if rng.random_bool(0.4) {
                    valve = pick(&mut rng, &VALVE_LEVELS);
                }
                if rng.random_bool(0.4) {
                    pump = pick(&mut rng, &PUMP_LEVELS);
                }
                if rng.random_bool(0.4) {
                    accumulator = pick(&mut rng, &ACCUMULATOR_LEVELS);
                }
                if (cooler, valve, pump, accumulator) != (100.0, 100.0, 0.0, 130.0) {
                    break;
                }
            }
        }
        let unsettled = rng.random_bool(0.6);
        for i in 0..len {
            if out.len() == config.cycles {
                break;
            }
            ambient = (ambient + rng.random_range(-0.3..0.3)).clamp(18.0, 28.0);
            out.push(CycleState {
                cooler,
                valve,
                pump,
                accumulator,
                stable: !(i == 0 && unsettled),
                ambient,
                load_gain: 1.0 + 0.01 * rng.random_range(-1.0..1.0),
            });
        }
    }
    out
}

/// Valve-filtered load at 100 Hz; slower valves lag the load steps.
fn load_response(state: &CycleState) -> Vec<f64> {
    let n = (DURATION_S * 100.0) as usize;
    let tau = 0.05 + 0.04 * (100.0 - state.valve);
    let alpha = 1.0 - (-0.01 / tau).exp();
    let mut r = LOAD_STEPS[0];
    (0..n)
        .map(|i| {
            let target = LOAD_STEPS[(i / 1000).min(5)] * state.load_gain;
            r += alpha * (target - r);
            r
        })
        .collect()
}

struct SignalModel {
    id: &'static str,
    rate: f64,
    decimals: i32,
    /// Spread of the per-cycle sensor offset.
    offset_sd: f64,
    noise_sd: f64,
    value: fn(&CycleState, f64, f64) -> f64,
}

fn ripple(s: &CycleState, t: f64) -> f64 {
    (0.3 + 0.08 * (130.0 - s.accumulator)) * (TAU * 1.5 * t).sin()
}

fn cooler_delta(s: &CycleState) -> f64 {
    8.0 * s.cooler / 100.0
}

fn ts1(s: &CycleState, t: f64) -> f64 {
    s.oil_temperature() - 3.0 + s.drift(t)
}

fn ts3(s: &CycleState, t: f64) -> f64 {
    s.oil_temperature() + 1.0 + s.drift(t)
}

const SIGNALS: [SignalModel; 17] = [
    SignalModel {
        id: "PS1",
        rate: 100.0,
        decimals: 2,
        offset_sd: 1.0,
        noise_sd: 0.8,
        value: |s, t, r| 160.0 * r * (1.0 - 0.015 * s.pump) * (0.9 + 0.1 * s.valve / 100.0) + ripple(s, t),
    },
    SignalModel {
        id: "PS2",
        rate: 100.0,
        decimals: 2,
        offset_sd: 1.0,
        noise_sd: 0.8,
        value: |s, t, r| 150.0 * r * (1.0 - 0.03 * s.pump) + 0.5 * ripple(s, t),
    },
    SignalModel {
        id: "PS3",
        rate: 100.0,
        decimals: 3,
        offset_sd: 0.02,
        noise_sd: 0.05,
        value: |_, _, r| 2.0 + 1.5 * r,
    },
    SignalModel {
        id: "PS4",
        rate: 100.0,
        decimals: 2,
        offset_sd: 0.2,
        noise_sd: 0.3,
        value: |s, t, _| 8.0 + 0.06 * s.accumulator + 0.5 * ripple(s, t),
    },
    SignalModel {
        id: "PS5",
        rate: 100.0,
        decimals: 3,
        offset_sd: 0.02,
        noise_sd: 0.02,
        value: |s, t, _| 9.2 - 0.01 * (s.oil_temperature() + s.drift(t) - 40.0),
    },
    SignalModel {
        id: "PS6",
        rate: 100.0,
        decimals: 3,
        offset_sd: 0.02,
        noise_sd: 0.02,
        value: |s, t, _| 8.8 - 0.01 * (s.oil_temperature() + s.drift(t) - 40.0),
    },
    SignalModel {
        id: "EPS1",
        rate: 100.0,
        decimals: 1,
        offset_sd: 10.0,
        noise_sd: 15.0,
        value: |s, _, r| 2400.0 + 800.0 * r + 40.0 * s.pump,
    },
    SignalModel {
        id: "FS1",
        rate: 10.0,
        decimals: 3,
        offset_sd: 0.06,
        noise_sd: 0.05,
        value: |s, _, r| 7.0 * (1.0 - 0.05 * s.pump) - 0.6 * r,
    },
    SignalModel {
        id: "FS2",
        rate: 10.0,
        decimals: 3,
        offset_sd: 0.05,
        noise_sd: 0.05,
        value: |s, _, _| 8.5 * (0.7 + 0.3 * s.cooler / 100.0),
    },
    SignalModel {
        id: "TS1",
        rate: 1.0,
        decimals: 3,
        offset_sd: 0.1,
        noise_sd: 0.05,
        value: |s, t, _| ts1(s, t),
    },
    SignalModel {
        id: "TS2",
        rate: 1.0,
        decimals: 3,
        offset_sd: 0.1,
        noise_sd: 0.05,
        value: |s, t, _| s.oil_temperature() + 2.0 + s.drift(t),
    },
    SignalModel {
        id: "TS3",
        rate: 1.0,
        decimals: 3,
        offset_sd: 0.1,
        noise_sd: 0.05,
        value: |s, t, _| ts3(s, t),
    },
    SignalModel {
        id: "TS4",
        rate: 1.0,
        decimals: 3,
        offset_sd: 0.1,
        noise_sd: 0.05,
        value: |s, t, _| ts3(s, t) - cooler_delta(s),
    },
    SignalModel {
        id: "VS1",
        rate: 1.0,
        decimals: 3,
        offset_sd: 0.008,
        noise_sd: 0.005,
        value: |s, _, _| 0.55 + 0.03 * s.pump,
    },
    SignalModel {
        id: "CE",
        rate: 1.0,
        decimals: 3,
        offset_sd: 0.5,
        noise_sd: 0.3,
        value: |s, t, _| 100.0 * cooler_delta(s) / (ts3(s, t) - s.ambient),
    },
    SignalModel {
        id: "CP",
        rate: 1.0,
        decimals: 3,
        offset_sd: 0.03,
        noise_sd: 0.02,
        value: |s, _, _| 2.2 * s.cooler / 100.0,
    },
    SignalModel {
        id: "SE",
        rate: 1.0,
        decimals: 3,
        offset_sd: 0.6,
        noise_sd: 0.5,
        value: |s, _, r| 60.0 - 5.0 * s.pump - 2.0 * (1.0 - r),
    },
];

pub fn signal_ids() -> Vec<&'static str> {
    SIGNALS.iter().map(|s| s.id).collect()
}

fn round_to(x: f64, decimals: i32) -> f64 {
    let f = 10f64.powi(decimals);
    (x * f).round() / f
}

fn simulate_row(model: &SignalModel, state: &CycleState, load: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = (model.rate * DURATION_S).round() as usize;
    let offset = Normal::new(0.0, model.offset_sd).expect("sd > 0").sample(rng);
    let noise = Normal::new(0.0, model.noise_sd).expect("sd > 0");
    let step = (100.0 / model.rate) as usize;
    (0..n)
        .map(|i| {
            let t = i as f64 / model.rate;
            let v = (model.value)(state, t, load[i * step]) + offset + noise.sample(rng);
            round_to(v, model.decimals)
        })
        .collect()
}

fn profile_line(s: &CycleState) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}",
        s.cooler,
        s.valve,
        s.pump,
        s.accumulator,
        if s.stable { 0 } else { 1 }
    )
}

/// Writes `<signal>.txt` for every simulated signal plus `profile.txt`.
pub fn write_dataset(dir: &Path, config: &SimConfig) -> std::io::Result<Vec<CycleState>> {
    fs::create_dir_all(dir)?;
    let states = schedule(config);
    let loads: Vec<Vec<f64>> = states.par_iter().map(load_response).collect();
    SIGNALS
        .par_iter()
        .enumerate()
        .try_for_each(|(k, model)| -> std::io::Result<()> {
            let mut out = BufWriter::new(fs::File::create(dir.join(format!("{}.txt", model.id)))?);
            for (c, (state, load)) in states.iter().zip(&loads).enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(((k as u64) << 32) | c as u64);
                let row = simulate_row(model, state, load, &mut rng);
                let mut first = true;
                for v in row {
                    if !first {
                        out.write_all(b"\t")?;
                    }
                    first = false;
                    write!(out, "{v}")?;
                }
                out.write_all(b"\n")?;
            }
            out.flush()
        })?;
    let mut profile = BufWriter::new(fs::File::create(dir.join("profile.txt"))?);
    for s in &states {
        writeln!(profile, "{}", profile_line(s))?;
    }
    profile.flush()?;
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_seeded() {
        let c = SimConfig {
            cycles: 50,
            ..SimConfig::default()
        };
        assert_eq!(schedule(&c), schedule(&c));
        assert_ne!(schedule(&c), schedule(&SimConfig { seed: 8, ..c }));
        assert_eq!(schedule(&c).len(), 50);
    }

    #[test]
    fn files_have_rig_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let c = SimConfig {
            cycles: 3,
            ..SimConfig::default()
        };
        write_dataset(dir.path(), &c).unwrap();
        let row_len = |id: &str| {
            let text = fs::read_to_string(dir.path().join(format!("{id}.txt"))).unwrap();
            assert_eq!(text.lines().count(), 3);
            text.lines().next().unwrap().split('\t').count()
        };
        assert_eq!(row_len("PS1"), 6000);
        assert_eq!(row_len("FS1"), 600);
        assert_eq!(row_len("TS3"), 60);
        let profile = fs::read_to_string(dir.path().join("profile.txt")).unwrap();
        assert_eq!(profile.lines().next().unwrap().split('\t').count(), 5);
    }

    #[test]
    fn cooler_degradation_narrows_temperature_drop() {
        let mut s = schedule(&SimConfig::default())[0];
        s.cooler = 100.0;
        let healthy = cooler_delta(&s);
        s.cooler = 3.0;
        assert!(cooler_delta(&s) < healthy / 10.0);
    }
}
