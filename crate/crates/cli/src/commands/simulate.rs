use driftlab_core::data::{Column, Table};
use driftlab_core::expr::Expr;
use driftlab_core::perturb_sim::{self, PerturbationScheme, PerturbedWorld, Population, TargetDistribution};
use driftlab_core::rng;
use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::{load_config, matrix_rows, write_table_csv};
use crate::config::{OutcomeConfig, SimulateConfig};
use crate::error::{CliError, Result};
use crate::output::{write_json, Provenance};
use crate::{Cli, SimulateArgs};

#[derive(Serialize)]
struct WorldReport {
    provenance: Provenance,
    seed: u64,
    m: usize,
    k: usize,
    sizes: Vec<usize>,
    target_size: usize,
    perturb_target: bool,
    /// Relative weight covariance implied by the scheme.
    sigma_w: Vec<Vec<f64>>,
    /// The same quantity computed from the realized bin weights.
    sigma_w_realized: Vec<Vec<f64>>,
    copula_error: Option<f64>,
    /// Random streams as `(seed, purpose, index)`.
    streams: Vec<Stream>,
    files: Vec<String>,
}

#[derive(Serialize)]
struct Stream {
    purpose: &'static str,
    index: u64,
    used_for: String,
}

pub fn run(cli: &Cli, args: &SimulateArgs) -> Result<()> {
    let mut cfg = load_config(cli, Some(&args.config))?;
    let sim = cfg
        .simulate
        .clone()
        .ok_or_else(|| CliError::config("the config has no `simulate` section"))?;
    let seed = cfg.seed_or_default();
    cfg.seed = Some(seed);
    let provenance = Provenance::new(&cfg);
    let out_dir = cfg.resolve_output(&args.out);
    let digits = cfg.precision();

    let scheme = PerturbationScheme::new(sim.m, sim.weights.clone(), seed);
    let mut world = perturb_sim::realize_world(&scheme)?;
    if sim.perturb_target {
        world = perturb_sim::shift_target(&world)?;
    }
    let k = world.k();
    let sizes = expand_sizes(&sim, k)?;
    if sim.target_size == 0 {
        return Err(CliError::config("target_size must be at least 1"));
    }
    let dist = TargetDistribution::from_spec(&sim.transform, sim.columns.clone())?;
    let outcome = match &sim.outcome {
        Some(o) => Some(OutcomeMap::new(o, dist.columns())?),
        None => None,
    };

    let mut files = Vec::new();
    let mut streams = vec![Stream { purpose: "world", index: 0, used_for: "bin weights".into() }];
    for (i, &n) in sizes.iter().enumerate() {
        let mut table = perturb_sim::sample_dataset(&world, i, n, &dist)?;
        streams.push(Stream { purpose: "dataset", index: i as u64, used_for: table.name.clone() });
        if let Some(o) = &outcome {
            o.append(&mut table, seed, i as u64)?;
            streams.push(Stream { purpose: "outcome", index: i as u64, used_for: format!("{} outcome noise", table.name) });
        }
        let name = format!("{}.csv", table.name);
        write_table_csv(&out_dir.join(&name), &table, &provenance, digits)?;
        files.push(name);
    }
    let mut r = rng::stream(seed, "target", 0);
    let mut target = perturb_sim::sample_target(&world, sim.target_size, &dist, &mut r)?;
    streams.push(Stream { purpose: "target", index: 0, used_for: "target".into() });
    if let Some(o) = outcome.as_ref().filter(|o| o.in_target) {
        o.append(&mut target, seed, k as u64)?;
        streams.push(Stream { purpose: "outcome", index: k as u64, used_for: "target outcome noise".into() });
    }
    write_table_csv(&out_dir.join("target.csv"), &target, &provenance, digits)?;
    files.push("target.csv".into());

    let report = WorldReport {
        provenance,
        seed,
        m: world.m(),
        k,
        sizes,
        target_size: sim.target_size,
        perturb_target: sim.perturb_target,
        sigma_w: matrix_rows(&world.sigma_w),
        sigma_w_realized: matrix_rows(&realized_relative_covariance(&world)),
        copula_error: world.copula_error,
        streams,
        files,
    };
    write_json(&out_dir.join("world.json"), &report)
}

fn expand_sizes(sim: &SimulateConfig, k: usize) -> Result<Vec<usize>> {
    let sizes = match sim.sizes.len() {
        1 => vec![sim.sizes[0]; k],
        n if n == k => sim.sizes.clone(),
        n => {
            return Err(CliError::config(format!(
                "sizes has {n} entries but the world has {k} source datasets"
            )))
        }
    };
    if sizes.iter().any(|&n| n < 2) {
        return Err(CliError::config("every source needs at least 2 rows"));
    }
    Ok(sizes)
}

/// Per-bin relative deviations `W_k / mean(W_k) − W_0 / mean(W_0)` (with
/// `W_0 = 1` for an unperturbed target) and their covariance over bins.
fn realized_relative_covariance(world: &PerturbedWorld) -> DMatrix<f64> {
    let m = world.m();
    let target = world.bin_probabilities(Population::Target);
    let rel: Vec<Vec<f64>> = (0..world.k())
        .map(|i| {
            let p = world.bin_probabilities(Population::Source(i));
            p.iter().zip(&target).map(|(a, b)| (a - b) * m as f64).collect()
        })
        .collect();
    let means: Vec<f64> = rel.iter().map(|r| r.iter().sum::<f64>() / m as f64).collect();
    DMatrix::from_fn(world.k(), world.k(), |i, j| {
        rel[i].iter().zip(&rel[j]).map(|(a, b)| (a - means[i]) * (b - means[j])).sum::<f64>() / m as f64
    })
}

struct OutcomeMap {
    name: String,
    expr: Expr,
    inputs: Vec<String>,
    noise_sd: f64,
    in_target: bool,
}

impl OutcomeMap {
    fn new(o: &OutcomeConfig, columns: &[String]) -> Result<Self> {
        let expr = Expr::parse(&o.expr)?;
        for v in expr.variables() {
            if !columns.contains(v) {
                return Err(CliError::config(format!(
                    "outcome expression reads `{v}`, which is not a generated column ({})",
                    columns.join(", ")
                )));
            }
        }
        if columns.contains(&o.name) {
            return Err(CliError::config(format!("outcome name `{}` clashes with a generated column", o.name)));
        }
        if !(o.noise_sd >= 0.0 && o.noise_sd.is_finite()) {
            return Err(CliError::config("outcome noise_sd must be finite and nonnegative"));
        }
        Ok(Self {
            name: o.name.clone(),
            inputs: expr.variables().to_vec(),
            expr,
            noise_sd: o.noise_sd,
            in_target: o.in_target,
        })
    }

    fn append(&self, table: &mut Table, seed: u64, index: u64) -> Result<()> {
        let cols: Vec<&[f64]> = self.inputs.iter().map(|c| table.numeric(c)).collect::<std::result::Result<_, _>>()?;
        let mut r = rng::stream(seed, "outcome", index);
        let mut vals = vec![0.0; cols.len()];
        let mut y = Vec::with_capacity(table.nrows());
        for i in 0..table.nrows() {
            for (v, c) in vals.iter_mut().zip(&cols) {
                *v = c[i];
            }
            y.push(self.expr.eval(&vals)? + self.noise_sd * Distribution::<f64>::sample(&StandardNormal, &mut r));
        }
        table.push(self.name.clone(), Column::Numeric(y))?;
        Ok(())
    }
}
