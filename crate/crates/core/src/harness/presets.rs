use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ExperimentConfig, OptimizerConfig, TaskSpec};
use crate::error::{QocError, Result};
use crate::sade_adam::HybridConfig;

/// Gate strings drawn for random tasks.
pub const GATE_POOL: [&str; 24] = [
    "I", "X", "Y", "Z", "H", "S", "T", "SH", "HS", "ZH", "YH", "XH", "XS", "YS", "ZS", "SZ", "HX",
    "SY", "HSX", "HSY", "HSZ", "XHS", "YHS", "ZHS",
];

pub const PRESET_NAMES: [&str; 5] = [
    "easy_x1",
    "intermediate_ng2",
    "hard_ng3",
    "pitch_sweep",
    "dynamic_imperfections",
];

pub const PITCHES: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// `n_gates` atoms, picked at random, get a non-identity string from the
/// pool; every other atom gets `"I"`.
pub fn random_gate_set(n_gates: usize, n_atoms: usize, seed: u64) -> Result<Vec<String>> {
    if n_gates > n_atoms {
        return Err(QocError::InvalidParameter(format!(
            "{n_gates} gates do not fit on {n_atoms} atoms"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gates = vec!["I".to_string(); n_atoms];
    let mut sites = sample(&mut rng, n_atoms, n_gates).into_vec();
    sites.sort_unstable();
    let non_identity = &GATE_POOL[1..];
    for site in sites {
        gates[site] = non_identity[rng.random_range(0..non_identity.len())].to_string();
    }
    Ok(gates)
}

fn random_task(name: &str, n_gates: usize, gate_seed: u64) -> ExperimentConfig {
    ExperimentConfig::new(
        name,
        TaskSpec::random(n_gates, 3, gate_seed),
        OptimizerConfig::E2e(Default::default()),
    )
}

/// Named experiment configurations. `pitch_sweep` expands to one config per pitch.
pub fn preset(name: &str) -> Result<Vec<ExperimentConfig>> {
    let mut configs = match name {
        "easy_x1" => vec![ExperimentConfig::new(
            name,
            TaskSpec::fixed(&["X", "I", "I"]),
            OptimizerConfig::SadeAdam(HybridConfig::default()),
        )],
        "intermediate_ng2" => vec![random_task(name, 2, 2000)],
        "hard_ng3" => vec![random_task(name, 3, 3000)],
        "pitch_sweep" => PITCHES
            .iter()
            .map(|&d0| {
                let mut c = random_task(&format!("pitch_sweep_d0_{d0}"), 3, 4000);
                c.hardware.geometry.d0 = d0;
                c
            })
            .collect(),
        "dynamic_imperfections" => {
            let mut c = random_task(name, 3, 5000);
            let imp = &mut c.hardware.imperfections;
            imp.dynamic = true;
            imp.delta_kappa = 0.5;
            imp.delta_alpha = 0.2;
            imp.delta_w = 0.1;
            imp.seed = 5000;
            vec![c]
        }
        other => return Err(QocError::UnknownPreset(other.into())),
    };
    for c in &mut configs {
        c.resolve()?;
    }
    Ok(configs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{dump, parse_config};
    use crate::qsim::parse_gate_string;

    #[test]
    fn gate_sets() {
        assert_eq!(random_gate_set(0, 3, 9).unwrap(), vec!["I", "I", "I"]);
        assert_eq!(
            random_gate_set(3, 3, 1).unwrap(),
            random_gate_set(3, 3, 1).unwrap()
        );
        for seed in 0..200 {
            let g = random_gate_set(2, 4, seed).unwrap();
            assert_eq!(g.iter().filter(|s| *s != "I").count(), 2);
            for s in &g {
                assert!(GATE_POOL.contains(&s.as_str()));
                parse_gate_string(s).unwrap();
            }
        }
        assert!(random_gate_set(4, 3, 0).is_err());
    }

    #[test]
    fn presets_validate_and_round_trip() {
        for name in PRESET_NAMES {
            for cfg in preset(name).unwrap() {
                let again = parse_config(&dump(&cfg).unwrap()).unwrap();
                assert_eq!(cfg, again, "{name}");
            }
        }
        assert_eq!(preset("pitch_sweep").unwrap().len(), 5);
        assert!(matches!(preset("nope"), Err(QocError::UnknownPreset(_))));
    }

    #[test]
    fn hard_task_has_three_non_identity_strings() {
        let cfg = &preset("hard_ng3").unwrap()[0];
        for seed in &cfg.seeds {
            let task = cfg.quantum.task.resolve(*seed).unwrap();
            assert!(task.gate_strings.iter().all(|s| s != "I"));
            assert_eq!(task.gate_strings.len(), 3);
        }
    }
}
