//! Genetic search over the contrastive/margin loss weights.

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::trainer::Checkpoint;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

fn default_population() -> usize {
    12
}
fn default_generations() -> usize {
    8
}
fn default_mutation_std() -> f64 {
    0.8
}
fn default_crossover_rate() -> f64 {
    0.7
}
fn default_elitism() -> usize {
    2
}
fn default_eval_epochs() -> usize {
    5
}
fn default_bounds() -> (f64, f64) {
    (0.0, 10.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaConfig {
    #[serde(default = "default_population")]
    pub population_size: usize,
    #[serde(default = "default_generations")]
    pub generations: usize,
    /// Gene range for both weights.
    #[serde(default = "default_bounds")]
    pub bounds: (f64, f64),
    #[serde(default = "default_mutation_std")]
    pub mutation_std: f64,
    #[serde(default = "default_crossover_rate")]
    pub crossover_rate: f64,
    #[serde(default = "default_elitism")]
    pub elitism_count: usize,
    /// Fine-tune length per candidate.
    #[serde(default = "default_eval_epochs")]
    pub eval_epochs: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig {
            population_size: default_population(),
            generations: default_generations(),
            bounds: default_bounds(),
            mutation_std: default_mutation_std(),
            crossover_rate: default_crossover_rate(),
            elitism_count: default_elitism(),
            eval_epochs: default_eval_epochs(),
            seed: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population_size < 2 {
            return Err(Error::Config("ga population_size must be at least 2".into()));
        }
        if self.elitism_count == 0 || self.elitism_count >= self.population_size {
            return Err(Error::Config(
                "ga elitism_count must be in [1, population_size)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.crossover_rate) {
            return Err(Error::Config("ga crossover_rate must be in [0, 1]".into()));
        }
        if self.mutation_std < 0.0 {
            return Err(Error::Config("ga mutation_std must be non-negative".into()));
        }
        if self.bounds.0 >= self.bounds.1 {
            return Err(Error::Config("ga bounds must satisfy low < high".into()));
        }
        Ok(())
    }
}

/// One candidate weight pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub alpha: f64,
    pub lambda: f64,
    pub fitness: Option<f64>,
}

impl Individual {
    fn clip(mut self, bounds: (f64, f64)) -> Self {
        self.alpha = self.alpha.clamp(bounds.0, bounds.1);
        self.lambda = self.lambda.clamp(bounds.0, bounds.1);
        self
    }
}

/// Fitness backend; higher is better.
pub trait Fitness {
    fn evaluate(&mut self, alpha: f64, lambda: f64) -> Result<f64>;
}

/// Planted quadratic objective with a known optimum; no training involved.
pub struct QuadraticSurrogate {
    pub optimum: (f64, f64),
}

impl Default for QuadraticSurrogate {
    fn default() -> Self {
        QuadraticSurrogate { optimum: (3.0, 1.0) }
    }
}

impl Fitness for QuadraticSurrogate {
    fn evaluate(&mut self, alpha: f64, lambda: f64) -> Result<f64> {
        let (a, l) = self.optimum;
        Ok(-(alpha - a).powi(2) - (lambda - l).powi(2))
    }
}

/// The search protocol: reload a pretrained checkpoint, fine-tune for a few
/// epochs under the candidate weights, score by validation accuracy.
pub struct FineTuneFitness {
    cfg: ExperimentConfig,
    checkpoint: Checkpoint,
    eval_epochs: usize,
}

impl FineTuneFitness {
    pub fn new(cfg: ExperimentConfig, checkpoint: Checkpoint, eval_epochs: usize) -> Self {
        FineTuneFitness {
            cfg,
            checkpoint,
            eval_epochs,
        }
    }
}

impl Fitness for FineTuneFitness {
    fn evaluate(&mut self, alpha: f64, lambda: f64) -> Result<f64> {
        let mut trainer = self.cfg.build_trainer()?;
        trainer.restore(&self.checkpoint)?;
        trainer.cfg.loss_weights.alpha = alpha;
        trainer.cfg.loss_weights.lambda = lambda;
        trainer.cfg.epochs = trainer.next_epoch() + self.eval_epochs;
        trainer.cfg.checkpoint_every = 0;
        let report = trainer.fit(None)?;
        Ok(report.overall_top1)
    }
}

/// One fitness evaluation in the log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub generation: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub fitness: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchResult {
    /// Every evaluation, in execution order.
    pub records: Vec<EvalRecord>,
    /// All evaluations sorted by fitness, best first.
    pub ranked: Vec<EvalRecord>,
    /// Best fitness seen in each generation (index 0 = initial population).
    pub best_per_generation: Vec<f64>,
}

impl SearchResult {
    pub fn best(&self) -> Option<&EvalRecord> {
        self.ranked.first()
    }

    pub fn top_k(&self, k: usize) -> &[EvalRecord] {
        &self.ranked[..self.ranked.len().min(k)]
    }
}

/// Produce the next generation: elites survive verbatim, the rest come from
/// size-2 tournaments, uniform crossover, and Gaussian mutation, with genes
/// clipped to the bounds.
pub fn evolve(
    population: &[Individual],
    cfg: &GaConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Individual>> {
    cfg.validate()?;
    if population.iter().any(|i| i.fitness.is_none()) {
        return Err(Error::InvalidArgument {
            arg: "population",
            reason: "every individual needs a fitness before evolving".into(),
        });
    }
    let mut ordered: Vec<Individual> = population.to_vec();
    ordered.sort_by(|a, b| b.fitness.unwrap().total_cmp(&a.fitness.unwrap()));

    let mut next: Vec<Individual> = ordered[..cfg.elitism_count].to_vec();
    let tournament = |rng: &mut ChaCha8Rng| -> Individual {
        let a = population[rng.random_range(0..population.len())];
        let b = population[rng.random_range(0..population.len())];
        if a.fitness.unwrap() >= b.fitness.unwrap() {
            a
        } else {
            b
        }
    };
    while next.len() < cfg.population_size {
        let pa = tournament(rng);
        let pb = tournament(rng);
        let mut child = pa;
        if rng.random_range(0.0..1.0) < cfg.crossover_rate {
            if rng.random_range(0.0..1.0) < 0.5 {
                child.alpha = pb.alpha;
            }
            if rng.random_range(0.0..1.0) < 0.5 {
                child.lambda = pb.lambda;
            }
        }
        if cfg.mutation_std > 0.0 {
            child.alpha += cfg.mutation_std * standard_normal(rng);
            child.lambda += cfg.mutation_std * standard_normal(rng);
        }
        child.fitness = None;
        next.push(child.clip(cfg.bounds));
    }
    Ok(next)
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
}

/// Run the full search. Evaluations are sequential and the whole run is a
/// deterministic function of `cfg.seed` (given a deterministic fitness).
pub fn search(cfg: &GaConfig, fitness: &mut dyn Fitness) -> Result<SearchResult> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut population: Vec<Individual> = (0..cfg.population_size)
        .map(|_| Individual {
            alpha: rng.random_range(cfg.bounds.0..cfg.bounds.1),
            lambda: rng.random_range(cfg.bounds.0..cfg.bounds.1),
            fitness: None,
        })
        .collect();

    let mut records = Vec::new();
    let mut best_per_generation = Vec::new();
    for generation in 0..=cfg.generations {
        for ind in &mut population {
            if ind.fitness.is_none() {
                let f = fitness.evaluate(ind.alpha, ind.lambda)?;
                ind.fitness = Some(f);
                records.push(EvalRecord {
                    generation,
                    alpha: ind.alpha,
                    lambda: ind.lambda,
                    fitness: f,
                });
            }
        }
        let best = population
            .iter()
            .map(|i| i.fitness.unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        best_per_generation.push(best);
        if generation < cfg.generations {
            population = evolve(&population, cfg, &mut rng)?;
        }
    }

    let mut ranked = records.clone();
    ranked.sort_by(|a, b| b.fitness.total_cmp(&a.fitness));
    Ok(SearchResult {
        records,
        ranked,
        best_per_generation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_cfg() -> GaConfig {
        GaConfig {
            population_size: 20,
            generations: 20,
            seed: 5,
            ..GaConfig::default()
        }
    }

    #[test]
    fn surrogate_search_recovers_planted_optimum() {
        let mut fitness = QuadraticSurrogate::default();
        let result = search(&test_cfg(), &mut fitness).unwrap();
        let best = result.best().unwrap();
        assert!((best.alpha - 3.0).abs() <= 0.5, "alpha = {}", best.alpha);
        assert!((best.lambda - 1.0).abs() <= 0.5, "lambda = {}", best.lambda);
    }

    #[test]
    fn best_fitness_never_decreases_under_elitism() {
        let mut fitness = QuadraticSurrogate::default();
        let result = search(&test_cfg(), &mut fitness).unwrap();
        for w in result.best_per_generation.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn genes_stay_in_bounds() {
        let mut fitness = QuadraticSurrogate { optimum: (20.0, -5.0) }; // pull outward
        let result = search(&test_cfg(), &mut fitness).unwrap();
        for r in &result.records {
            assert!((0.0..=10.0).contains(&r.alpha));
            assert!((0.0..=10.0).contains(&r.lambda));
        }
    }

    #[test]
    fn zero_mutation_keeps_identical_population_fixed() {
        let cfg = GaConfig {
            population_size: 6,
            mutation_std: 0.0,
            seed: 1,
            ..GaConfig::default()
        };
        let pop: Vec<Individual> = (0..6)
            .map(|_| Individual {
                alpha: 4.0,
                lambda: 2.0,
                fitness: Some(1.0),
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let next = evolve(&pop, &cfg, &mut rng).unwrap();
        assert!(next.iter().all(|i| i.alpha == 4.0 && i.lambda == 2.0));
    }

    #[test]
    fn best_genome_survives_verbatim() {
        let cfg = GaConfig {
            population_size: 5,
            seed: 2,
            ..GaConfig::default()
        };
        let mut pop: Vec<Individual> = (0..5)
            .map(|i| Individual {
                alpha: f64::from(i),
                lambda: 10.0 - f64::from(i),
                fitness: Some(f64::from(i)),
            })
            .collect();
        pop.reverse();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let next = evolve(&pop, &cfg, &mut rng).unwrap();
        assert!(next
            .iter()
            .any(|i| i.alpha == 4.0 && i.lambda == 6.0 && i.fitness == Some(4.0)));
    }

    #[test]
    fn zero_generations_ranks_initial_population_only() {
        let cfg = GaConfig {
            population_size: 7,
            generations: 0,
            seed: 9,
            ..GaConfig::default()
        };
        let mut fitness = QuadraticSurrogate::default();
        let result = search(&cfg, &mut fitness).unwrap();
        assert_eq!(result.records.len(), 7);
        assert_eq!(result.best_per_generation.len(), 1);
    }

    #[test]
    fn determinism_under_fixed_seed() {
        let mut f1 = QuadraticSurrogate::default();
        let mut f2 = QuadraticSurrogate::default();
        let a = search(&test_cfg(), &mut f1).unwrap();
        let b = search(&test_cfg(), &mut f2).unwrap();
        assert_eq!(
            serde_json::to_string(&a.records).unwrap(),
            serde_json::to_string(&b.records).unwrap()
        );
    }

    #[test]
    fn config_validation() {
        let mut cfg = GaConfig::default();
        cfg.population_size = 1;
        assert!(cfg.validate().is_err());
        cfg = GaConfig::default();
        cfg.elitism_count = cfg.population_size;
        assert!(cfg.validate().is_err());
        cfg = GaConfig::default();
        cfg.crossover_rate = 1.5;
        assert!(cfg.validate().is_err());
    }
}
