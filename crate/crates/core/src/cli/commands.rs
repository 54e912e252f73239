use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::artifacts::*;
use super::config::{self, RunConfig};
use super::{Cli, CliError, Command, LevelArg, EXIT_ABSTAINED, EXIT_OK};
use crate::attribution::{
    explain_examples, explain_steps, AttributionError, AttributionReport, Level,
};
use crate::calibration::{calibrate, evaluate_test};
use crate::data::{load_dataset_file, overlapping_ids, Dataset, Example, Role};
use crate::evaluators::{planted_universe, Memoized, ToyRetrainEvaluator, ToyScorer};
use crate::float_serde::display;
use crate::generation::{SimProfile, SimulatedBackend};
use crate::prediction_set::construct_set;
use crate::quality::{answer_quality, sequence_quality};
use crate::seed::SeedTree;

pub(super) fn dispatch(cli: &Cli) -> Result<i32, CliError> {
    let g = &cli.global;
    match &cli.command {
        Command::Calibrate { cal, test } => {
            let mut cfg = g.resolve(None)?;
            set_path(&mut cfg.calibration_data, cal);
            set_path(&mut cfg.test_data, test);
            cmd_calibrate(&cfg, &g.out)
        }
        Command::Predict { calibration, input } => {
            let mut cfg = g.resolve(Some(calibration))?;
            set_path(&mut cfg.input_data, input);
            cmd_predict(&cfg, calibration, &g.out)
        }
        Command::Simulate {
            cal,
            test,
            trials,
            n_cal,
            n_test,
        } => {
            let mut cfg = g.resolve(None)?;
            set_path(&mut cfg.calibration_data, cal);
            set_path(&mut cfg.test_data, test);
            if let Some(v) = trials {
                cfg.trials = *v;
            }
            if let Some(v) = n_cal {
                cfg.n_cal = *v;
            }
            if let Some(v) = n_test {
                cfg.n_test = *v;
            }
            cmd_simulate(&cfg, &g.out)
        }
        Command::Explain {
            level,
            training,
            cal,
            target,
            target_id,
            calibration,
            examples_report,
            scorer,
        } => {
            let mut cfg = g.resolve(calibration.as_deref())?;
            set_path(&mut cfg.training_data, training);
            set_path(&mut cfg.calibration_data, cal);
            set_path(&mut cfg.target_data, target);
            if let Some(id) = target_id {
                cfg.target_id = Some(id.clone());
            }
            if let Some(path) = scorer {
                cfg.scorer = Some(config::load_scorer(path)?);
            }
            if *level == LevelArg::Steps && examples_report.is_none() {
                return Err(CliError::Usage(
                    "--level steps requires --examples-report from a prior examples run".into(),
                ));
            }
            cmd_explain(
                &cfg,
                *level,
                calibration.as_deref(),
                examples_report.as_deref(),
                &g.out,
            )
        }
        Command::Report { artifacts } => cmd_report(artifacts, &g.out),
        Command::Planted {
            examples,
            steps,
            pivotal_example,
            pivotal_step,
            n_cal,
        } => cmd_planted(
            *examples,
            *steps,
            *pivotal_example,
            *pivotal_step,
            *n_cal,
            &g.out,
        ),
    }
}

fn set_path(slot: &mut Option<String>, flag: &Option<PathBuf>) {
    if let Some(p) = flag {
        *slot = Some(p.display().to_string());
    }
}

fn load(path: &Path, role: Role) -> Result<Dataset, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "dataset {} does not exist",
            path.display()
        )));
    }
    Ok(load_dataset_file(path, role)?)
}

fn opt_f64(x: Option<f64>) -> String {
    x.map(display).unwrap_or_default()
}

pub(super) fn cmd_calibrate(cfg: &RunConfig, out: &Path) -> Result<i32, CliError> {
    let cal_path = config::required_path(&cfg.calibration_data, "--cal")?;
    let cal = load(&cal_path, Role::Calibration)?;
    let test = match &cfg.test_data {
        Some(p) => Some((PathBuf::from(p), load(Path::new(p), Role::Test)?)),
        None => None,
    };
    if let Some((_, t)) = &test {
        let shared = overlapping_ids(&cal, t);
        if !shared.is_empty() {
            log::warn!(
                "{} ids appear in both calibration and test data",
                shared.len()
            );
        }
    }
    let backend = cfg.backend()?;
    let cal_cfg = cfg.calibration();
    let root = SeedTree::new(cfg.seed);
    let stream = root.derive("calibrate", 0);
    let outcome = calibrate(backend.as_ref(), &cal, &cal_cfg, &stream)?;
    let test_eval = match (&test, outcome.chosen) {
        (Some((_, t)), Some(lambda)) => Some(evaluate_test(
            backend.as_ref(),
            t,
            &lambda,
            &cal_cfg,
            &root.derive("test", 0),
        )?),
        _ => None,
    };

    let artifact = CalibrationArtifact {
        schema: CALIBRATION_SCHEMA.into(),
        config: cfg.clone(),
        model_tag: backend.model_tag().to_owned(),
        calibration_data: InputRef::of(&cal_path)?,
        test_data: test.as_ref().map(|(p, _)| InputRef::of(p)).transpose()?,
        abstained: outcome.abstained,
        chosen: outcome.chosen,
        valid_set: outcome.valid_set.clone(),
        evaluations: outcome.evaluations.clone(),
        test: test_eval,
        stream: stream.describe(),
    };
    let hash = write_json(&out.join("calibration.json"), &artifact)?;
    let rows: Vec<Vec<String>> = outcome
        .evaluations
        .rows
        .iter()
        .map(|r| {
            vec![
                display(r.lambda.lambda1),
                display(r.lambda.lambda2),
                display(r.lambda.lambda3),
                r.failures.to_string(),
                display(r.empirical_risk),
                display(r.mean_set_size),
                display(r.p_value),
                outcome.valid_set.contains(&r.lambda).to_string(),
                (outcome.chosen == Some(r.lambda)).to_string(),
            ]
        })
        .collect();
    write_csv(
        &out.join("calibration_grid.csv"),
        &[
            "lambda1",
            "lambda2",
            "lambda3",
            "failures",
            "empirical_risk",
            "mean_set_size",
            "p_value",
            "valid",
            "chosen",
        ],
        &rows,
    )?;
    match outcome.chosen {
        Some(l) => {
            println!("calibrated lambda = {l} (artifact sha256 {hash})");
            Ok(EXIT_OK)
        }
        None => {
            println!(
                "calibration abstained: no threshold tuple certified (artifact sha256 {hash})"
            );
            Ok(EXIT_ABSTAINED)
        }
    }
}

pub(super) fn cmd_predict(
    cfg: &RunConfig,
    calibration: &Path,
    out: &Path,
) -> Result<i32, CliError> {
    let (artifact, cal_hash): (CalibrationArtifact, String) =
        read_artifact(calibration, CALIBRATION_SCHEMA)?;
    let Some(lambda) = artifact.chosen else {
        return Err(CliError::Abstained(format!(
            "{} holds no deployable threshold tuple",
            calibration.display()
        )));
    };
    let input_path = config::required_path(&cfg.input_data, "--input")?;
    let inputs = load(&input_path, Role::Test)?;
    let backend = cfg.backend()?;
    let cal_cfg = cfg.calibration();
    let stream = SeedTree::new(cfg.seed).derive("predict", 0);
    let records = inputs
        .examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let set = construct_set(
                backend.as_ref(),
                ex,
                &lambda,
                &cal_cfg.sampler,
                &stream.derive("input", i as u64),
                cal_cfg.answer_quality,
            )
            .map_err(|e| CliError::Other(format!("input `{}`: {e}", ex.id)))?;
            Ok(PredictionRecord {
                id: ex.id.clone(),
                members: set
                    .members
                    .iter()
                    .map(|m| MemberRecord {
                        sample_index: m.sample_index(),
                        steps: m.steps().to_vec(),
                        answer: m.answer().to_owned(),
                        sequence_quality: sequence_quality(m),
                        answer_quality: answer_quality(m, cal_cfg.answer_quality),
                    })
                    .collect(),
                stopped_at: set.stopped_at,
                stop_reason: set.stop_reason,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let n = records.len();
    let artifact = PredictionsArtifact {
        schema: PREDICTIONS_SCHEMA.into(),
        config: cfg.clone(),
        calibration_sha256: cal_hash,
        lambda,
        input_data: InputRef::of(&input_path)?,
        records,
    };
    let hash = write_json(&out.join("predictions.json"), &artifact)?;
    println!("{n} prediction records (artifact sha256 {hash})");
    Ok(EXIT_OK)
}

/// Synthetic examples `{prefix}1..={prefix}n` for simulation studies.
pub fn synthetic_dataset(prefix: &str, n: usize, role: Role) -> Dataset {
    let examples = (1..=n)
        .map(|i| {
            Example::new(
                format!("{prefix}{i}"),
                format!("synthetic question {i}"),
                vec![
                    format!("start from quantity {i}"),
                    format!("double it to reach {}", 2 * i),
                ],
                (2 * i).to_string(),
            )
        })
        .collect();
    Dataset::new(role, examples).expect("generated ids are unique")
}

fn sim_profile(spec: &str) -> Result<SimProfile, CliError> {
    match spec.strip_prefix("sim:") {
        Some("perfect") => Ok(SimProfile::perfect()),
        Some("hopeless") => Ok(SimProfile::hopeless()),
        Some(path) => config::load_profile(Path::new(path)),
        None => Err(CliError::Config(format!(
            "simulate needs a sim:<profile> backend, got `{spec}`"
        ))),
    }
}

pub(super) fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<i32, CliError> {
    if cfg.trials == 0 || cfg.n_cal == 0 {
        return Err(CliError::Usage("trials and n_cal must be positive".into()));
    }
    let profile = sim_profile(&cfg.backend)?;
    let backend =
        SimulatedBackend::new(profile.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    let cal_cfg = cfg.calibration();
    cal_cfg.validate()?;
    let pool = match &cfg.calibration_data {
        Some(path) => {
            let pool = load(Path::new(path), Role::Calibration)?;
            if pool.len() < cfg.n_cal {
                return Err(CliError::Usage(format!(
                    "n_cal = {} exceeds the {} examples in {path}",
                    cfg.n_cal,
                    pool.len()
                )));
            }
            Some(pool)
        }
        None => None,
    };
    let synthetic_cal = synthetic_dataset("c", cfg.n_cal, Role::Calibration);
    let test = match &cfg.test_data {
        Some(path) => load(Path::new(path), Role::Test)?,
        None => synthetic_dataset("t", cfg.n_test, Role::Test),
    };
    let population = match (&pool, test.is_empty()) {
        (_, false) => &test.examples,
        (Some(p), true) => &p.examples,
        (None, true) => &synthetic_cal.examples,
    };
    let root = SeedTree::new(cfg.seed);

    let trials = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let stream = root.derive("trial", t as u64);
            // each trial calibrates on a random subset of the pool, drawn without replacement
            let subset;
            let cal = match &pool {
                Some(p) => {
                    let mut idx = rand::seq::index::sample(
                        &mut stream.derive("subset", 0).rng(),
                        p.len(),
                        cfg.n_cal,
                    )
                    .into_vec();
                    idx.sort_unstable();
                    subset = Dataset::new(
                        Role::Calibration,
                        idx.iter().map(|&i| p.examples[i].clone()).collect(),
                    )?;
                    &subset
                }
                None => &synthetic_cal,
            };
            let outcome = calibrate(&backend, cal, &cal_cfg, &stream.derive("calibrate", 0))?;
            let Some(lambda) = outcome.chosen else {
                return Ok(TrialRow {
                    trial: t,
                    seed: stream.seed_u64(),
                    abstained: true,
                    lambda: None,
                    failures: None,
                    true_risk: None,
                    test_loss: None,
                    test_mean_set_size: None,
                    valid: true,
                });
            };
            let true_risk = profile.population_risk(
                population,
                &lambda,
                cal_cfg.sampler.k_max,
                &cal_cfg.admission,
                cal_cfg.answer_quality,
            );
            let test_eval = if test.is_empty() {
                None
            } else {
                Some(evaluate_test(
                    &backend,
                    &test,
                    &lambda,
                    &cal_cfg,
                    &stream.derive("test", 0),
                )?)
            };
            Ok(TrialRow {
                trial: t,
                seed: stream.seed_u64(),
                abstained: false,
                lambda: Some(lambda),
                failures: outcome.chosen_row().map(|r| r.failures),
                true_risk: Some(true_risk),
                test_loss: test_eval.as_ref().map(|e| e.empirical_loss),
                test_mean_set_size: test_eval.as_ref().map(|e| e.mean_set_size),
                valid: true_risk <= cfg.alpha,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    let n = trials.len() as f64;
    let valid_fraction = trials.iter().filter(|r| r.valid).count() as f64 / n;
    let abstention_fraction = trials.iter().filter(|r| r.abstained).count() as f64 / n;
    let mut rows: Vec<Vec<String>> = trials
        .iter()
        .map(|r| {
            vec![
                r.trial.to_string(),
                r.seed.to_string(),
                r.abstained.to_string(),
                opt_f64(r.lambda.map(|l| l.lambda1)),
                opt_f64(r.lambda.map(|l| l.lambda2)),
                opt_f64(r.lambda.map(|l| l.lambda3)),
                r.failures.map(|f| f.to_string()).unwrap_or_default(),
                opt_f64(r.true_risk),
                opt_f64(r.test_loss),
                opt_f64(r.test_mean_set_size),
                r.valid.to_string(),
            ]
        })
        .collect();
    let mut aggregate = vec![String::new(); 11];
    aggregate[0] = "aggregate".into();
    aggregate[2] = display(abstention_fraction);
    aggregate[10] = display(valid_fraction);
    rows.push(aggregate);
    write_csv(
        &out.join("coverage.csv"),
        &[
            "trial",
            "seed",
            "abstained",
            "lambda1",
            "lambda2",
            "lambda3",
            "failures",
            "true_risk",
            "test_loss",
            "test_mean_set_size",
            "valid",
        ],
        &rows,
    )?;
    let artifact = SimulationArtifact {
        schema: SIMULATION_SCHEMA.into(),
        config: cfg.clone(),
        model_tag: profile.model_tag.clone(),
        trials,
        valid_fraction,
        abstention_fraction,
    };
    write_json(&out.join("simulation.json"), &artifact)?;
    println!(
        "{} trials: fraction with true risk <= {} is {valid_fraction}",
        cfg.trials, cfg.alpha
    );
    Ok(EXIT_OK)
}

fn ranking_rows(report: &AttributionReport) -> Vec<Vec<String>> {
    report
        .order
        .iter()
        .enumerate()
        .map(|(rank, p)| {
            let e = report
                .estimate
                .players
                .iter()
                .find(|e| &e.player == p)
                .expect("ordered players come from the estimate");
            vec![
                (rank + 1).to_string(),
                p.to_string(),
                p.example.clone(),
                p.step.map(|s| s.to_string()).unwrap_or_default(),
                display(e.phat),
                display(report.estimate.radius),
                display(e.lcb),
                report.selected.contains(p).to_string(),
            ]
        })
        .collect()
}

const RANKING_HEADER: [&str; 8] = [
    "rank", "player", "example", "step", "phat", "radius", "lcb", "selected",
];

pub(super) fn cmd_explain(
    cfg: &RunConfig,
    level: LevelArg,
    calibration: Option<&Path>,
    examples_report: Option<&Path>,
    out: &Path,
) -> Result<i32, CliError> {
    let training_path = config::required_path(&cfg.training_data, "--training")?;
    let cal_path = config::required_path(&cfg.calibration_data, "--cal")?;
    let target_path = config::required_path(&cfg.target_data, "--target")?;
    let training = load(&training_path, Role::Training)?;
    let cal = load(&cal_path, Role::Calibration)?;
    let targets = load(&target_path, Role::Test)?;
    let target = match &cfg.target_id {
        Some(id) => targets.get(id).cloned().ok_or_else(|| {
            CliError::Usage(format!("target `{id}` not in {}", target_path.display()))
        })?,
        None => targets
            .examples
            .first()
            .cloned()
            .ok_or_else(|| CliError::Usage(format!("{} is empty", target_path.display())))?,
    };
    let shared = overlapping_ids(&training, &cal);
    if !shared.is_empty() {
        log::warn!(
            "{} ids appear in both training and calibration data",
            shared.len()
        );
    }
    let calibration_sha256 = calibration
        .map(|p| read_artifact::<CalibrationArtifact>(p, CALIBRATION_SCHEMA).map(|(_, h)| h))
        .transpose()?;

    let mut cfg = cfg.clone();
    let scorer = cfg.scorer.get_or_insert_with(ToyScorer::default).clone();
    let root = SeedTree::new(cfg.seed).derive("explain", 0);
    let evaluator = Memoized::new(ToyRetrainEvaluator::new(
        training.clone(),
        cal,
        target.clone(),
        cfg.calibration(),
        scorer,
        root.derive("evaluator", 0),
    )?);
    let attr_cfg = cfg.attribution();
    let attr_stream = root.derive("attribution", 0);

    let (report, examples_hash, name) = match level {
        LevelArg::Examples => (
            explain_examples(&evaluator, &training, &attr_cfg, &attr_stream),
            None,
            "examples",
        ),
        LevelArg::Steps => {
            let path = examples_report
                .ok_or_else(|| CliError::Usage("--examples-report is required".into()))?;
            let (prior, hash): (AttributionArtifact, String) =
                read_artifact(path, ATTRIBUTION_SCHEMA)?;
            if prior.report.level != Level::Example {
                return Err(CliError::Usage(format!(
                    "{} is not an example-level report",
                    path.display()
                )));
            }
            if prior.target_id != target.id {
                return Err(CliError::Usage(format!(
                    "{} explains target `{}`, not `{}`",
                    path.display(),
                    prior.target_id,
                    target.id
                )));
            }
            let selected = prior.report.selected_examples();
            (
                explain_steps(&evaluator, &training, &selected, &attr_cfg, &attr_stream),
                Some(hash),
                "steps",
            )
        }
    };
    let report = report.map_err(|e| match e {
        AttributionError::BaseModelCovers { .. } => {
            eprintln!(
                "refusing to explain `{}`: base model does not fail on this target",
                target.id
            );
            CliError::Attribution(e)
        }
        other => CliError::Attribution(other),
    })?;

    write_csv(
        &out.join(format!("ranking_{name}.csv")),
        &RANKING_HEADER,
        &ranking_rows(&report),
    )?;
    let feasible = report.feasible;
    let selected: Vec<String> = report.selected.iter().map(|p| p.to_string()).collect();
    let artifact = AttributionArtifact {
        schema: ATTRIBUTION_SCHEMA.into(),
        config: cfg,
        target_id: target.id.clone(),
        training_data: InputRef::of(&training_path)?,
        calibration_data: InputRef::of(&cal_path)?,
        calibration_sha256,
        examples_report_sha256: examples_hash,
        report,
    };
    let hash = write_json(&out.join(format!("attribution_{name}.json")), &artifact)?;
    println!(
        "{name}: selected [{}], feasible = {feasible} (artifact sha256 {hash})",
        selected.join(", ")
    );
    Ok(EXIT_OK)
}

pub(super) fn cmd_report(paths: &[PathBuf], out: &Path) -> Result<i32, CliError> {
    if paths.is_empty() {
        return Err(CliError::Usage("report needs at least one artifact".into()));
    }
    let mut inputs = Vec::new();
    let mut loss_rows: Vec<(f64, Vec<String>)> = Vec::new();
    let mut outputs = Vec::new();
    let mut rankings = 0usize;
    for path in paths {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        let value: serde_json::Value = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))?;
        let schema = value
            .get("schema")
            .and_then(|s| s.as_str())
            .unwrap_or("<none>")
            .to_owned();
        let sha = sha256_hex(&bytes);
        match schema.as_str() {
            CALIBRATION_SCHEMA => {
                let (a, _): (CalibrationArtifact, _) = read_artifact(path, CALIBRATION_SCHEMA)?;
                let row = a.chosen.and_then(|l| a.evaluations.row(&l));
                loss_rows.push((
                    a.config.alpha,
                    vec![
                        display(a.config.alpha),
                        a.abstained.to_string(),
                        opt_f64(a.chosen.map(|l| l.lambda1)),
                        opt_f64(a.chosen.map(|l| l.lambda2)),
                        opt_f64(a.chosen.map(|l| l.lambda3)),
                        opt_f64(row.map(|r| r.empirical_risk)),
                        opt_f64(row.map(|r| r.mean_set_size)),
                        opt_f64(a.test.as_ref().map(|t| t.empirical_loss)),
                        opt_f64(a.test.as_ref().map(|t| t.mean_set_size)),
                        sha.clone(),
                    ],
                ));
            }
            ATTRIBUTION_SCHEMA => {
                let (a, _): (AttributionArtifact, _) = read_artifact(path, ATTRIBUTION_SCHEMA)?;
                rankings += 1;
                let name = format!("ranking_{}_{rankings}.csv", a.report.level);
                write_csv(&out.join(&name), &RANKING_HEADER, &ranking_rows(&a.report))?;
                outputs.push(name);
            }
            PREDICTIONS_SCHEMA | SIMULATION_SCHEMA => {}
            other => {
                return Err(CliError::Artifact(format!(
                    "{}: unsupported schema `{other}`",
                    path.display()
                )))
            }
        }
        inputs.push(ReportInput {
            path: path.display().to_string(),
            schema,
            sha256: sha,
        });
    }
    if !loss_rows.is_empty() {
        loss_rows.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        let rows: Vec<Vec<String>> = loss_rows.into_iter().map(|(_, r)| r).collect();
        write_csv(
            &out.join("loss_size_by_alpha.csv"),
            &[
                "alpha",
                "abstained",
                "lambda1",
                "lambda2",
                "lambda3",
                "cal_risk",
                "cal_mean_set_size",
                "test_loss",
                "test_mean_set_size",
                "sha256",
            ],
            &rows,
        )?;
        outputs.insert(0, "loss_size_by_alpha.csv".into());
    }
    let bundle = ReportBundle {
        schema: REPORT_SCHEMA.into(),
        inputs,
        outputs,
    };
    write_json(&out.join("report.json"), &bundle)?;
    println!("report written to {}", out.display());
    Ok(EXIT_OK)
}

pub(super) fn cmd_planted(
    examples: usize,
    steps: usize,
    pivotal_example: usize,
    pivotal_step: usize,
    n_cal: usize,
    out: &Path,
) -> Result<i32, CliError> {
    if !(1..=examples).contains(&pivotal_example)
        || !(1..=steps).contains(&pivotal_step)
        || n_cal == 0
    {
        return Err(CliError::Usage(
            "pivotal indices must lie within the universe; n_cal >= 1".into(),
        ));
    }
    let u = planted_universe(examples, steps, pivotal_example, pivotal_step, n_cal);
    let target = Dataset::new(Role::Test, vec![u.target]).expect("single example");
    for (name, ds) in [
        ("training.jsonl", &u.training),
        ("calibration.jsonl", &u.calibration),
        ("target.jsonl", &target),
    ] {
        let mut buf = Vec::new();
        ds.write_jsonl(&mut buf)?;
        write_atomic(&out.join(name), &buf)?;
    }
    println!(
        "planted universe: pivotal example {} step {} in {}",
        u.pivotal_example,
        u.pivotal_step,
        out.display()
    );
    Ok(EXIT_OK)
}
