use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use prgp_core::physics::PhysicsModel;

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "prgp", version, about = "Physics-regularized Gaussian process traffic state estimation")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the Godunov corridor simulation and write virtual-sensor readings.
    Simulate(#[command(flatten)] Overrides),
    /// Split, optionally corrupt and standardize a sensor CSV.
    Prepare(#[command(flatten)] Overrides),
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        overrides: Overrides,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Posterior field estimates on a regular grid.
    Estimate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Grid points along the corridor.
        #[arg(long, default_value_t = 60)]
        nx: usize,
        /// Grid points in time.
        #[arg(long, default_value_t = 48)]
        nt: usize,
    },
    /// Test-split metrics of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Every model over seeds and clean/noisy data, plus the baselines.
    Matrix {
        #[command(flatten)]
        overrides: Overrides,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Comma-separated physics models.
        #[arg(long, value_delimiter = ',', value_parser = parse_physics)]
        models: Option<Vec<PhysicsModel>>,
    },
}

/// Flags that override the run configuration.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Sensor CSV (or prepared dataset) to read.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// none, lwr, pw, arz or heat.
    #[arg(long, value_parser = parse_physics)]
    pub physics: Option<PhysicsModel>,
    /// Regularization weight; comma-separated for one per equation.
    #[arg(long, value_delimiter = ',')]
    pub gamma: Option<Vec<f64>>,
    /// Pseudo-points per iteration.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub train_frac: Option<f64>,
    /// Corrupt training flows (for `matrix`: run only the noisy datasets).
    #[arg(long)]
    pub noise: bool,
    /// veh/5min
    #[arg(long)]
    pub noise_amplitude: Option<f64>,
}

fn parse_physics(s: &str) -> Result<PhysicsModel, String> {
    PhysicsModel::parse(s).ok_or_else(|| format!("unknown physics model `{s}` (expected none, lwr, pw, arz or heat)"))
}

impl Overrides {
    pub fn apply(&self, config: &mut RunConfig) {
        if let Some(d) = &self.data {
            config.data = Some(d.clone());
        }
        if let Some(o) = &self.out {
            config.out = Some(o.clone());
        }
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if let Some(p) = self.physics {
            config.physics.model = p;
        }
        if let Some(g) = &self.gamma {
            config.physics.gamma = g.clone();
        }
        if let Some(m) = self.m {
            config.train.m = m;
        }
        if let Some(i) = self.iters {
            config.train.iterations = i;
        }
        if let Some(lr) = self.lr {
            config.train.learning_rate = lr;
        }
        if let Some(f) = self.train_frac {
            config.split.train_fraction = f;
        }
        if self.noise {
            config.noise.enabled = true;
        }
        if let Some(a) = self.noise_amplitude {
            config.noise.amplitude = a;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn overrides_reach_config() {
        let cli = Cli::try_parse_from(["prgp", "train", "--physics", "arz", "--gamma", "1,10", "--iters", "5", "--noise"]).unwrap();
        let Command::Train { overrides, resume } = cli.command else { panic!("wrong subcommand") };
        assert!(resume.is_none());
        let mut c = RunConfig::default();
        overrides.apply(&mut c);
        assert_eq!(c.physics.model, PhysicsModel::Arz);
        assert_eq!(c.physics.gamma, vec![1.0, 10.0]);
        assert_eq!(c.train.iterations, 5);
        assert!(c.noise.enabled);
    }

    #[test]
    fn unknown_flag_and_model_are_rejected() {
        assert!(Cli::try_parse_from(["prgp", "train", "--bogus"]).is_err());
        assert!(Cli::try_parse_from(["prgp", "train", "--physics", "nope"]).is_err());
    }
}
