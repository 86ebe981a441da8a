//! Self-adaptive differential evolution for the coarse search, followed by
//! gradient refinement with a threshold-decayed Adam step size.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffengine::{adam_step, value_and_grad, AdamState};
use crate::error::{QocError, Result};
use crate::hwmodel::{V_MAX, V_MIN};
use crate::qsim::Simulator;
use crate::report::{
    Budget, OptimizerReport, PhaseSummary, Termination, TracePoint, GRADIENT_EVALUATIONS,
};
use crate::schedule::ControlSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SadeConfig {
    pub popsize: usize,
    pub max_generations: usize,
    /// Hand over to Adam once the best fidelity reaches this value.
    pub switch_fidelity: f64,
    pub mutation_range: [f64; 2],
    pub crossover_range: [f64; 2],
    /// Generations of successful (mu, CR) values kept for adaptation.
    pub adaptation_window: usize,
    /// Spread of the (mu, CR) sampling distributions.
    pub adaptation_sigma: f64,
    /// Half-width (V) of the uniform perturbation around `x0`.
    pub init_spread: f64,
    pub seed: u64,
}

impl Default for SadeConfig {
    fn default() -> Self {
        Self {
            popsize: 32,
            max_generations: 500,
            switch_fidelity: 0.95,
            mutation_range: [0.1, 0.9],
            crossover_range: [0.1, 0.9],
            adaptation_window: 20,
            adaptation_sigma: 0.1,
            init_spread: 1.0,
            seed: 0,
        }
    }
}

impl SadeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(QocError::Schema {
                field: format!("optimizer.sade.{field}"),
                reason: reason.into(),
            })
        };
        if self.popsize < 4 {
            return bad("popsize", "must be >= 4");
        }
        for (name, [lo, hi]) in [
            ("mutation_range", self.mutation_range),
            ("crossover_range", self.crossover_range),
        ] {
            if !(lo > 0.0 && lo <= hi && hi < 1.0) {
                return bad(name, "must satisfy 0 < lo <= hi < 1");
            }
        }
        if self.adaptation_window == 0 {
            return bad("adaptation_window", "must be >= 1");
        }
        if !(self.init_spread >= 0.0) {
            return bad("init_spread", "must be >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamRefineConfig {
    pub lr: f64,
    pub decay_thresholds: Vec<f64>,
    pub decay_factors: Vec<f64>,
    pub stop_fidelity: f64,
    pub stagnation_window: usize,
    pub stagnation_eps: f64,
    pub max_steps: usize,
    /// Global-norm gradient clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamRefineConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            decay_thresholds: vec![0.98, 0.99, 0.995, 0.997],
            decay_factors: vec![0.5, 0.2, 0.5, 0.2],
            stop_fidelity: 0.999,
            stagnation_window: 500,
            stagnation_eps: 1e-6,
            max_steps: 400_000,
            grad_clip: None,
        }
    }
}

impl AdamRefineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(QocError::Schema {
                field: format!("optimizer.adam.{field}"),
                reason: reason.into(),
            })
        };
        if self.decay_thresholds.len() != self.decay_factors.len() {
            return bad("decay_factors", "needs one factor per threshold");
        }
        if self.decay_thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return bad("decay_thresholds", "must be strictly increasing");
        }
        if self.decay_factors.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return bad("decay_factors", "must lie in (0, 1)");
        }
        if !(self.lr >= 0.0) {
            return bad("lr", "must be >= 0");
        }
        if self.stagnation_window == 0 {
            return bad("stagnation_window", "must be >= 1");
        }
        Ok(())
    }

    /// Step size once `best_fidelity` has crossed every threshold at or below it.
    pub fn lr_at(&self, best_fidelity: f64) -> f64 {
        self.decay_thresholds
            .iter()
            .zip(&self.decay_factors)
            .filter(|(t, _)| best_fidelity >= **t)
            .fold(self.lr, |lr, (_, f)| lr * f)
    }
}

/// `x_a + mu (x_b - x_c)`, clamped to the voltage range.
pub fn mutate(x_a: &[f64], x_b: &[f64], x_c: &[f64], mu: f64) -> Vec<f64> {
    x_a.iter()
        .zip(x_b)
        .zip(x_c)
        .map(|((a, b), c)| (a + mu * (b - c)).clamp(V_MIN, V_MAX))
        .collect()
}

/// Binomial crossover with one forced mutant component.
pub fn crossover(parent: &[f64], mutant: &[f64], cr: f64, rng: &mut impl Rng) -> Vec<f64> {
    let forced = rng.random_range(0..parent.len());
    parent
        .iter()
        .zip(mutant)
        .enumerate()
        .map(|(j, (p, m))| {
            let take = rng.random::<f64>() < cr;
            if take || j == forced {
                *m
            } else {
                *p
            }
        })
        .collect()
}

fn individual_rng(seed: u64, generation: usize, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((generation as u64) << 32) | i as u64);
    rng
}

/// Three distinct indices, all different from `i`.
fn pick_three(n: usize, i: usize, rng: &mut impl Rng) -> [usize; 3] {
    let mut out = [usize::MAX; 3];
    let mut k = 0;
    while k < 3 {
        let c = rng.random_range(0..n);
        if c != i && !out[..k].contains(&c) {
            out[k] = c;
            k += 1;
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct SadeOutcome {
    pub best: Vec<f64>,
    pub best_cost: f64,
    /// Best cost after each generation, generation 0 being the initial population.
    pub trace: Vec<f64>,
    pub generations: usize,
    pub termination: Termination,
}

/// Minimize `cost` over the box `[V_MIN, V_MAX]^n` starting from a cloud around `x0`.
///
/// Stops when the best cost reaches `1 - switch_fidelity`, after
/// `max_generations`, or when `budget` cannot cover another generation.
pub fn sade_run<F>(cost: F, cfg: &SadeConfig, x0: &[f64], budget: &Budget) -> Result<SadeOutcome>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    cfg.validate()?;
    let target = 1.0 - cfg.switch_fidelity;
    let p = cfg.popsize;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(u64::MAX);
    let mut pop: Vec<Vec<f64>> = (0..p)
        .map(|i| {
            x0.iter()
                .map(|x| {
                    let d = if i == 0 || cfg.init_spread == 0.0 {
                        0.0
                    } else {
                        init_rng.random_range(-cfg.init_spread..=cfg.init_spread)
                    };
                    (x + d).clamp(V_MIN, V_MAX)
                })
                .collect()
        })
        .collect();
    let mut costs: Vec<f64> = pop.par_iter().map(|x| cost(x)).collect();
    budget.charge(p as u64);
    let argmin = |c: &[f64]| {
        c.iter().enumerate().fold(
            (0, f64::INFINITY),
            |(bi, bc), (i, v)| if *v < bc { (i, *v) } else { (bi, bc) },
        )
    };
    let (mut best_i, mut best_cost) = argmin(&costs);
    let mut trace = vec![best_cost];
    let mut history: VecDeque<Vec<(f64, f64)>> = VecDeque::with_capacity(cfg.adaptation_window);
    let (mut mu_mean, mut cr_mean) = (0.5, 0.5);
    let mut generation = 0;

    let termination = loop {
        if best_cost <= target {
            break Termination::TargetReached;
        }
        if generation >= cfg.max_generations {
            break Termination::MaxIterations;
        }
        if !budget.allows(p as u64) {
            break Termination::BudgetExhausted;
        }
        generation += 1;
        let mu_dist = Normal::new(mu_mean, cfg.adaptation_sigma).expect("sigma validated");
        let cr_dist = Normal::new(cr_mean, cfg.adaptation_sigma).expect("sigma validated");
        let trials: Vec<(Vec<f64>, f64, f64, f64)> = (0..p)
            .into_par_iter()
            .map(|i| {
                let mut rng = individual_rng(cfg.seed, generation, i);
                let mu = mu_dist
                    .sample(&mut rng)
                    .clamp(cfg.mutation_range[0], cfg.mutation_range[1]);
                let cr = cr_dist
                    .sample(&mut rng)
                    .clamp(cfg.crossover_range[0], cfg.crossover_range[1]);
                let [a, b, c] = pick_three(p, i, &mut rng);
                let mutant = mutate(&pop[a], &pop[b], &pop[c], mu);
                let trial = crossover(&pop[i], &mutant, cr, &mut rng);
                let tc = cost(&trial);
                (trial, tc, mu, cr)
            })
            .collect();
        budget.charge(p as u64);
        let mut successes = Vec::new();
        for (i, (trial, tc, mu, cr)) in trials.into_iter().enumerate() {
            if tc < costs[i] {
                pop[i] = trial;
                costs[i] = tc;
                successes.push((mu, cr));
            }
        }
        if history.len() == cfg.adaptation_window {
            history.pop_front();
        }
        history.push_back(successes);
        let all: Vec<&(f64, f64)> = history.iter().flatten().collect();
        if !all.is_empty() {
            mu_mean = all.iter().map(|s| s.0).sum::<f64>() / all.len() as f64;
            cr_mean = all.iter().map(|s| s.1).sum::<f64>() / all.len() as f64;
        }
        (best_i, best_cost) = argmin(&costs);
        trace.push(best_cost);
        log::debug!(
            "sade gen {generation}: best cost {best_cost:.6e} mu {mu_mean:.3} cr {cr_mean:.3}"
        );
    };
    Ok(SadeOutcome {
        best: pop[best_i].clone(),
        best_cost,
        trace,
        generations: generation,
        termination,
    })
}

#[derive(Clone, Debug)]
pub struct AdamOutcome {
    pub best: ControlSchedule,
    pub best_cost: f64,
    /// `(best cost so far, current fidelity)` per step, step 0 being the start point.
    pub trace: Vec<(f64, f64)>,
    pub termination: Termination,
}

/// Gradient refinement from `start`, reporting the best iterate.
pub fn adam_refine(
    sim: &Simulator,
    start: &ControlSchedule,
    cfg: &AdamRefineConfig,
    budget: &Budget,
) -> Result<AdamOutcome> {
    cfg.validate()?;
    let target = 1.0 - cfg.stop_fidelity;
    let mut x = start.clone();
    x.clamp_to_bounds();
    let mut state = AdamState::new(x.len());
    let (c0, mut grad) = value_and_grad(sim, &x)?;
    budget.charge(GRADIENT_EVALUATIONS);
    let mut best = x.clone();
    let mut best_cost = c0;
    let mut trace = vec![(c0, 1.0 - c0)];
    let mut last_improvement_cost = c0;
    let mut since_improvement = 0;
    let mut step = 0;
    let termination = loop {
        if best_cost <= target {
            break Termination::TargetReached;
        }
        if step >= cfg.max_steps {
            break Termination::MaxIterations;
        }
        if since_improvement >= cfg.stagnation_window {
            break Termination::Stagnation;
        }
        if !budget.allows(GRADIENT_EVALUATIONS) {
            break Termination::BudgetExhausted;
        }
        step += 1;
        let lr = cfg.lr_at(1.0 - best_cost);
        adam_step(
            x.as_mut_slice(),
            grad.as_slice(),
            &mut state,
            lr,
            cfg.grad_clip,
        )?;
        x.clamp_to_bounds();
        let (c, g) = value_and_grad(sim, &x)?;
        budget.charge(GRADIENT_EVALUATIONS);
        grad = g;
        if c < best_cost {
            best_cost = c;
            best = x.clone();
        }
        if last_improvement_cost - best_cost > cfg.stagnation_eps {
            last_improvement_cost = best_cost;
            since_improvement = 0;
        } else {
            since_improvement += 1;
        }
        trace.push((best_cost, 1.0 - c));
    };
    Ok(AdamOutcome {
        best,
        best_cost,
        trace,
        termination,
    })
}

/// How the SADE starting point `x0` is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitialGuess {
    /// Uniform draw over the voltage range from the run seed.
    #[default]
    Random,
    Zeros,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HybridConfig {
    /// Piecewise-constant segments per channel and ring.
    pub n_segments: usize,
    pub initial_guess: InitialGuess,
    /// Simulator passes allowed across both phases (gradients count twice).
    pub eval_budget: Option<u64>,
    pub sade: SadeConfig,
    pub adam: AdamRefineConfig,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self {
            n_segments: 20,
            initial_guess: InitialGuess::default(),
            eval_budget: None,
            sade: SadeConfig::default(),
            adam: AdamRefineConfig::default(),
        }
    }
}

pub fn hybrid_run(sim: &Simulator, cfg: &HybridConfig, seed: u64) -> Result<OptimizerReport> {
    let n_ch = sim.n_channels();
    let n_seg = cfg.n_segments;
    ControlSchedule::zeros(n_ch, n_seg).validate(n_ch, sim.t_steps())?;
    let budget = Budget::new(cfg.eval_budget);
    let sade_cfg = SadeConfig {
        seed,
        ..cfg.sade.clone()
    };
    let x0 = match cfg.initial_guess {
        InitialGuess::Zeros => ControlSchedule::zeros(n_ch, n_seg),
        InitialGuess::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(0x5EED);
            ControlSchedule::random(n_ch, n_seg, &mut rng)
        }
    };
    let cost = |v: &[f64]| {
        let s = ControlSchedule::from_vec(n_ch, n_seg, v.to_vec()).expect("length fixed");
        sim.cost(&s).unwrap_or(1.0)
    };
    let sade = sade_run(cost, &sade_cfg, x0.as_slice(), &budget)?;
    let sade_ms = budget.elapsed_ms();
    let mut trace: Vec<TracePoint> = sade
        .trace
        .iter()
        .enumerate()
        .map(|(g, c)| TracePoint {
            iteration: g as u64,
            best_cost: *c,
            fidelity: 1.0 - c,
            wall_ms: sade_ms * g as f64 / sade.trace.len().max(1) as f64,
        })
        .collect();
    let mut phases = vec![PhaseSummary {
        name: "sade".into(),
        trace_start: 0,
        trace_end: trace.len(),
        termination: sade.termination,
        best_cost: sade.best_cost,
    }];
    let sade_best = ControlSchedule::from_vec(n_ch, n_seg, sade.best)?;
    let switch = sade.generations as u64;

    let (best, termination) = if sade.termination == Termination::BudgetExhausted {
        (sade_best, Termination::BudgetExhausted)
    } else {
        let start_ms = budget.elapsed_ms();
        let adam = adam_refine(sim, &sade_best, &cfg.adam, &budget)?;
        let adam_ms = budget.elapsed_ms() - start_ms;
        let offset = trace.len();
        let best_before = sade.best_cost;
        for (k, (c, f)) in adam.trace.iter().enumerate().skip(1) {
            trace.push(TracePoint {
                iteration: switch + k as u64,
                best_cost: c.min(best_before),
                fidelity: *f,
                wall_ms: start_ms + adam_ms * k as f64 / adam.trace.len() as f64,
            });
        }
        phases.push(PhaseSummary {
            name: "adam".into(),
            trace_start: offset,
            trace_end: trace.len(),
            termination: adam.termination,
            best_cost: adam.best_cost,
        });
        if adam.best_cost <= best_before {
            (adam.best, adam.termination)
        } else {
            (sade_best, adam.termination)
        }
    };
    let final_fidelity = sim.fidelity(&best)?;
    Ok(OptimizerReport {
        method: "sade_adam".into(),
        seed,
        trace,
        phases,
        best_schedule: best,
        final_fidelity,
        final_error: 1.0 - final_fidelity,
        termination,
        evaluations: budget.used(),
        switch_generation: Some(switch),
        wall_ms: budget.elapsed_ms(),
        config_hash: String::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mutation_examples() {
        let a = [1.0, -2.0, 15.0];
        let b = [3.0, 3.0, 5.0];
        assert_eq!(mutate(&a, &b, &b, 0.7), a.to_vec());
        let m = mutate(&a, &[2.0, 0.0, 10.0], &[0.0, 0.0, 0.0], 0.1);
        assert_eq!(m, vec![1.2, -2.0, 15.0]);
    }

    #[test]
    fn crossover_extremes() {
        let p = [0.0; 8];
        let m = [1.0; 8];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(crossover(&p, &m, 1.0, &mut rng), m.to_vec());
        for _ in 0..20 {
            let t = crossover(&p, &m, 0.0, &mut rng);
            assert_eq!(t.iter().filter(|v| **v == 1.0).count(), 1);
        }
        let a = crossover(&p, &m, 0.5, &mut ChaCha8Rng::seed_from_u64(3));
        let b = crossover(&p, &m, 0.5, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn sphere_in_twelve_dimensions() {
        let cfg = SadeConfig {
            popsize: 24,
            max_generations: 200,
            switch_fidelity: 1.0,
            init_spread: 10.0,
            seed: 11,
            ..SadeConfig::default()
        };
        let x0 = vec![3.0; 12];
        let out = sade_run(
            |x| x.iter().map(|v| v * v).sum(),
            &cfg,
            &x0,
            &Budget::new(None),
        )
        .unwrap();
        assert!(out.best_cost <= 1e-2, "{}", out.best_cost);
        assert!(out.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn lr_schedule_arithmetic() {
        let cfg = AdamRefineConfig::default();
        assert_eq!(cfg.lr_at(0.5), 1e-4);
        assert!((cfg.lr_at(0.99) - 1e-5).abs() < 1e-20);
        assert!((cfg.lr_at(0.998) - 1e-4 * 0.5 * 0.2 * 0.5 * 0.2).abs() < 1e-20);
    }

    #[test]
    fn invalid_configs() {
        assert!(SadeConfig {
            popsize: 3,
            ..SadeConfig::default()
        }
        .validate()
        .is_err());
        assert!(AdamRefineConfig {
            decay_thresholds: vec![0.99, 0.98],
            decay_factors: vec![0.5, 0.5],
            ..AdamRefineConfig::default()
        }
        .validate()
        .is_err());
    }
}
