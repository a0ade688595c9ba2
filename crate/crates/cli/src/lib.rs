//! Command-line front end: a TOML run configuration, flag overrides, and one
//! function per subcommand. `run` is what the `layerprobe` binary calls.

pub mod args;
pub mod commands;
pub mod config;

use layerprobe::{Error, Result};
use serde_json::Value;

use crate::args::{Cli, Command};
use crate::commands::Ctx;
use crate::config::{LambdaSetting, RunConfig};

/// Loads the configuration, applies every flag, and runs the subcommand.
pub fn run(cli: &Cli) -> Result<Value> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    if let Some(root) = &cli.root {
        config.dataset_root = root.clone();
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    match &cli.command {
        Command::Synth(a) => {
            if a.phoneme_layer.is_some() {
                config.synth.phoneme_layer = a.phoneme_layer;
            }
            if a.prosody_layer.is_some() {
                config.synth.prosody_layer = a.prosody_layer;
            }
            if let Some(t) = &a.model_tag {
                config.synth.model_tag = t.clone();
            }
        }
        Command::Cca(a) => {
            config.cca.folds = a.folds.unwrap_or(config.cca.folds);
            config.cca.eval_folds = a.eval_folds.unwrap_or(config.cca.eval_folds);
            config.cca.stratify |= a.stratify;
        }
        Command::Probe(a) => {
            if let Some(l) = &a.lambda {
                config.probe.lambda = match l.parse::<f64>() {
                    Ok(v) => LambdaSetting::Value(v),
                    Err(_) => LambdaSetting::Named(l.clone()),
                };
            }
        }
        Command::Perturb(a) => {
            let p = &mut config.perturb;
            p.beta_low = a.beta_low.unwrap_or(p.beta_low);
            p.beta_high = a.beta_high.unwrap_or(p.beta_high);
            p.flip_prob = a.flip_prob.unwrap_or(p.flip_prob);
            p.apply_threshold = a.apply_threshold.unwrap_or(p.apply_threshold);
            p.eq_bands = a.eq_bands.unwrap_or(p.eq_bands);
            p.eq_gain_db = a.eq_gain_db.unwrap_or(p.eq_gain_db);
        }
        _ => {}
    }
    let ctx = Ctx::new(config.finalize()?, cli.no_overwrite);
    match &cli.command {
        Command::Synth(_) => commands::synth(&ctx),
        Command::Pool => commands::pool(&ctx),
        Command::Cca(_) => commands::cca(&ctx),
        Command::Probe(_) => commands::probe(&ctx),
        Command::ProsodyLabel(a) => commands::prosody_label(&ctx, a.import.as_deref()),
        Command::Perturb(a) => commands::perturb(&ctx, &a.input, &a.output),
        Command::Embed(a) => commands::embed(&ctx, &a.phoneme, a.layer, a.model_tag.as_deref()),
        Command::Report(a) => commands::report(&ctx, &a.roots, &a.out),
    }
}

/// Caps the global worker pool. Only the first call has an effect.
pub fn set_jobs(jobs: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()
        .map_err(|e| Error::invalid(format!("--jobs: {e}")))
}
