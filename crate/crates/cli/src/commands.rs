use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use cfdiff_core::augmentation::{
    retrain_with_augmentation, save_accuracy_table, synthesize_augmentation_set, AugmentationConfig, AugmentedManifest,
    AUGMENTED_MANIFEST_FILE,
};
use cfdiff_core::dataset::{generate_dataset, DatasetManifest, Split, Subgroup};
use cfdiff_core::ddpm::{train_denoiser, DenoiserCheckpoint};
use cfdiff_core::guidance::{generate_counterfactuals, load_run, save_run, select_factuals, GuidanceMode};
use cfdiff_core::imageio;
use cfdiff_core::metrics::{metrics_report, roc_auc, save_comparison_csv};
use cfdiff_core::predictors::{train, Objective, PredictorCheckpoint, Role};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{Cli, Command, ModelArgs, UsageError};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(UsageError(msg.into()))
}

fn parse<T: std::str::FromStr>(what: &str, s: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| usage(format!("bad {what}: {e}")))
}

fn require(path: &Path, marker: &str, what: &str) -> Result<()> {
    if path.join(marker).is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} not found at {}", path.display())))
    }
}

fn load_dataset(dir: &Path) -> Result<DatasetManifest> {
    require(dir, "manifest.json", "dataset manifest")?;
    Ok(DatasetManifest::load(dir)?)
}

fn load_predictor(dir: &Path, role: Role) -> Result<PredictorCheckpoint> {
    require(dir, "checkpoint.json", &format!("{} checkpoint", role.as_str()))?;
    let p = PredictorCheckpoint::load(dir)?;
    if p.role() != role {
        return Err(usage(format!(
            "{} holds a {} checkpoint, expected {}",
            dir.display(),
            p.role().as_str(),
            role.as_str()
        )));
    }
    Ok(p)
}

fn load_models(m: &ModelArgs) -> Result<(PredictorCheckpoint, PredictorCheckpoint)> {
    Ok((
        load_predictor(&m.classifier, Role::Classifier)?,
        load_predictor(&m.detector, Role::Detector)?,
    ))
}

fn load_denoiser(dir: &Path) -> Result<DenoiserCheckpoint> {
    require(dir, "denoiser.json", "denoiser checkpoint")?;
    Ok(DenoiserCheckpoint::load(dir)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    if let Some(p) = &g.config {
        if !p.is_file() {
            return Err(usage(format!("config file {} not found", p.display())));
        }
    }
    let config =
        RunConfig::materialize(g.config.as_deref(), g.seed, &g.overrides).map_err(|e| usage(format!("{e:#}")))?;
    match cli.command {
        Command::Dataset { out } => cmd_dataset(&config, &out),
        Command::Train {
            role,
            objective,
            data,
            out,
        } => {
            let objective = objective.map(|o| parse::<Objective>("objective", &o)).transpose()?;
            cmd_train(&config, &role, objective, &data, &out)
        }
        Command::Counterfactual {
            mode,
            n,
            split,
            subgroups,
            models,
            ddpm,
            data,
            out,
        } => {
            let mode = parse::<GuidanceMode>("mode", &mode)?;
            let split = parse::<Split>("split", &split)?;
            let groups = match subgroups {
                Some(s) => s
                    .split(',')
                    .map(|g| parse::<Subgroup>("subgroup", g.trim()))
                    .collect::<Result<Vec<_>>>()?,
                None => Subgroup::ALL.to_vec(),
            };
            cmd_counterfactual(&config, mode, n, split, &groups, &models, &ddpm, &data, &out)
        }
        Command::Metrics {
            runs,
            models,
            probe,
            out,
        } => cmd_metrics(&config, &runs, &models, probe.as_deref(), &out),
        Command::Augment {
            mode,
            n,
            models,
            ddpm,
            data,
            out,
        } => {
            let mode = parse::<GuidanceMode>("mode", &mode)?;
            cmd_augment(&config, mode, n, &models, &ddpm, &data, &out)
        }
        Command::Retrain {
            augmented,
            before,
            objective,
            out,
        } => {
            let objective = objective.map(|o| parse::<Objective>("objective", &o)).transpose()?;
            cmd_retrain(&config, &augmented, &before, objective, &out)
        }
    }
}

fn cmd_dataset(config: &RunConfig, out: &Path) -> Result<()> {
    let m = generate_dataset(&config.dataset, out)?;
    config.echo(out)?;
    println!("dataset written to {}", out.display());
    println!(
        "{:<6} {:>7} {:>7} {:>7} {:>7}",
        "split", "maj_S", "min_S", "min_H", "maj_H"
    );
    for (split, groups) in &m.counts {
        let c = |g: Subgroup| groups.get(&g).copied().unwrap_or(0);
        println!(
            "{:<6} {:>7} {:>7} {:>7} {:>7}",
            split.as_str(),
            c(Subgroup::MajS),
            c(Subgroup::MinS),
            c(Subgroup::MinH),
            c(Subgroup::MajH)
        );
    }
    println!("checksum {}", m.checksum);
    Ok(())
}

#[derive(Serialize)]
struct PredictorSummary {
    role: Role,
    split: Split,
    report: cfdiff_core::predictors::SubgroupAccuracyReport,
    auc: f64,
}

fn cmd_train(config: &RunConfig, role: &str, objective: Option<Objective>, data: &Path, out: &Path) -> Result<()> {
    let parsed = if role == "denoiser" {
        None
    } else {
        Some(parse::<Role>("role", role)?)
    };
    let manifest = load_dataset(data)?;
    let dataset = manifest.load_all()?;
    let Some(role) = parsed else {
        if objective.is_some() {
            return Err(usage("--objective does not apply to the denoiser"));
        }
        let ck = train_denoiser(&config.ddpm, &dataset)?;
        ck.save(out)?;
        config.echo(out)?;
        write_json(&out.join("denoiser_metrics.json"), ck.metrics())?;
        println!("denoiser saved to {}", out.display());
        return Ok(());
    };
    let section = match role {
        Role::Classifier => "classifier",
        Role::Detector => "detector",
        Role::AttributeProbe => "probe",
    };
    let tc = config.train_config(section, objective);
    let ck = train(&tc, &dataset.train, &dataset.val, role)?;
    ck.save(out)?;
    config.echo(out)?;
    let report = ck.evaluate_subgroups(&dataset.test)?;
    let probs = ck.predict_prob(&cfdiff_core::dataset::stack_pixels(&dataset.test)?)?;
    let labels: Vec<u8> = dataset.test.iter().map(|s| role.label(s)).collect();
    let auc = roc_auc(&probs, &labels)?;
    write_json(
        &out.join("test_report.json"),
        &PredictorSummary {
            role,
            split: Split::Test,
            report: report.clone(),
            auc,
        },
    )?;
    save_accuracy_table(&out.join("test_accuracy.csv"), &[(role.as_str(), &report)])?;
    println!("{} saved to {}", role.as_str(), out.display());
    for g in Subgroup::ALL {
        if let Some(a) = report.accuracy(g) {
            println!("  {:<6} {:.3}", g.as_str(), a);
        }
    }
    println!("  overall {:.3}  auc {:.3}", report.overall, auc);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_counterfactual(
    config: &RunConfig,
    mode: GuidanceMode,
    n: usize,
    split: Split,
    groups: &[Subgroup],
    models: &ModelArgs,
    ddpm: &Path,
    data: &Path,
    out: &Path,
) -> Result<()> {
    if n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let manifest = load_dataset(data)?;
    let (c, d) = load_models(models)?;
    let ddpm = load_denoiser(ddpm)?;
    let pool = manifest.load_samples(split)?;
    let factuals = select_factuals(&pool, n, groups);
    if factuals.len() < n {
        log::warn!("only {} factuals available", factuals.len());
    }
    if factuals.is_empty() {
        return Err(usage("no factuals match the requested split and subgroups"));
    }
    let records = generate_counterfactuals(&factuals, &config.guidance, mode, &ddpm, &c, &d)?;
    save_run(out, mode, &config.guidance, &records)?;
    config.echo(out)?;
    if config.output.figures {
        let fig = out.join("figures");
        std::fs::create_dir_all(&fig).with_context(|| format!("creating {}", fig.display()))?;
        for r in &records {
            imageio::write_triptych(
                &fig.join(format!("{}.png", r.factual_id)),
                r.side,
                &r.factual,
                &r.counterfactual,
                config.output.figure_zoom,
            )?;
        }
    }
    let flips = records.iter().filter(|r| r.classifier_flipped()).count();
    let kept = records.iter().filter(|r| !r.detector_flipped()).count();
    println!(
        "{} counterfactuals ({}) in {}: classifier flipped {flips}, detector unchanged {kept}",
        records.len(),
        mode.as_str(),
        out.display()
    );
    Ok(())
}

fn cmd_metrics(
    config: &RunConfig,
    runs: &[PathBuf],
    models: &ModelArgs,
    probe: Option<&Path>,
    out: &Path,
) -> Result<()> {
    if runs.len() > 2 {
        return Err(usage("metrics takes one or two --run directories"));
    }
    let (c, d) = load_models(models)?;
    let g = probe.map(|p| load_predictor(p, Role::AttributeProbe)).transpose()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut reports = Vec::new();
    for run in runs {
        require(run, "run.json", "run manifest")?;
        let (manifest, records) = load_run(run)?;
        let report = metrics_report(&c, &d, g.as_ref(), &records)?;
        let name = manifest.mode.as_str();
        let stem = if runs.len() == 1 {
            "metrics".to_string()
        } else {
            format!("metrics_{name}")
        };
        report.save_json(&out.join(format!("{stem}.json")))?;
        report.save_csv(&out.join(format!("{stem}.csv")))?;
        println!(
            "{name:<16} n {:>4}  CFR {:.3}  DRR {:.3}  L1 {:.4}  CPG {:.3}  SCLS {:.3}{}",
            report.n,
            report.cfr,
            report.drr,
            report.l1_mean,
            report.cpg_mean,
            report.scls_mean,
            report
                .attr_pres_mean
                .map(|v| format!("  attr {v:.3}"))
                .unwrap_or_default()
        );
        reports.push((name, report));
    }
    if reports.len() == 2 {
        if reports[0].0 == reports[1].0 {
            return Err(usage("the two runs use the same mode"));
        }
        let rows: Vec<(&str, &_)> = reports.iter().map(|(n, r)| (*n, r)).collect();
        save_comparison_csv(&out.join("comparison.csv"), &rows)?;
    }
    config.echo(out)
}

fn cmd_augment(
    config: &RunConfig,
    mode: GuidanceMode,
    n: Option<usize>,
    models: &ModelArgs,
    ddpm: &Path,
    data: &Path,
    out: &Path,
) -> Result<()> {
    let aug = AugmentationConfig {
        n: n.unwrap_or(config.augmentation.n),
        ..config.augmentation.clone()
    };
    if aug.n == 0 {
        return Err(usage("augmentation count must be at least 1"));
    }
    if mode == GuidanceMode::ExplainDetector {
        return Err(usage("augment needs decodex or baseline mode"));
    }
    let manifest = load_dataset(data)?;
    let (c, d) = load_models(models)?;
    let ddpm = load_denoiser(ddpm)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let m = synthesize_augmentation_set(&aug, &config.guidance, mode, &manifest, &ddpm, &c, &d, out)?;
    config.echo(out)?;
    println!(
        "{} augmented samples written to {}",
        m.augmented.samples.len(),
        out.display()
    );
    for (g, n) in &m.augmented.counts {
        println!("  {:<6} {n}", g.as_str());
    }
    Ok(())
}

fn cmd_retrain(
    config: &RunConfig,
    augmented: &Path,
    before: &Path,
    objective: Option<Objective>,
    out: &Path,
) -> Result<()> {
    require(augmented, AUGMENTED_MANIFEST_FILE, "augmented manifest")?;
    let m = AugmentedManifest::load(augmented)?;
    m.verify()
        .context("augmented manifest does not match the files on disk")?;
    let before = load_predictor(before, Role::Classifier)?;
    let tc = config.train_config("classifier", objective);
    let (after, cmp) = retrain_with_augmentation(&tc, &m, &before)?;
    after.save(out)?;
    config.echo(out)?;
    write_json(&out.join("comparison.json"), &cmp)?;
    save_accuracy_table(
        &out.join("accuracy_table.csv"),
        &[("before", &cmp.before), ("after", &cmp.after)],
    )?;
    println!(
        "{:<7} {:>6} {:>6} {:>6} {:>6} {:>6}",
        "", "maj_S", "min_S", "min_H", "maj_H", "worst"
    );
    for (name, r) in [("before", &cmp.before), ("after", &cmp.after)] {
        let a = |g| r.accuracy(g).map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
        println!(
            "{name:<7} {:>6} {:>6} {:>6} {:>6} {:>6}",
            a(Subgroup::MajS),
            a(Subgroup::MinS),
            a(Subgroup::MinH),
            a(Subgroup::MajH),
            r.worst_group.map(|v| format!("{v:.3}")).unwrap_or_default()
        );
    }
    Ok(())
}
