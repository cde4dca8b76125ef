//! Command implementations. Every command that writes files also writes a
//! [`RunManifest`] next to them and holds a lock on the output directory.

use std::path::{Path, PathBuf};

use mrpo::data::{
    generate_synthetic, load_preference_file, score_references, write_preference_file, PlantedReward, RefLogProbCache,
    SyntheticSpec,
};
use mrpo::oracle::{verify_jensen, verify_prop1, verify_prop2, SuiteReport};
use mrpo::policy::{make_reference_family, ToyPolicy, Vocab};
use mrpo::trainer::{evaluate, prepare_split, run_experiment, train, verify_gradients, write_metrics, ExperimentSpec};
use serde_json::json;

use crate::args::{
    Cli, Command, EvalArgs, ExperimentArgs, MakeRefArgs, RerunArgs, ScoreRefsArgs, Suite, SynthArgs, TrainArgs,
    VerifyArgs,
};
use crate::manifest::{parent_dir, sidecar, write_file, DirLock, RunManifest};
use crate::CliError;

const GRADCHECK_COORDS: usize = 64;
const GRADCHECK_STEP: f64 = 1e-5;

pub fn run(command: Command, argv: &[String]) -> Result<(), CliError> {
    match command {
        Command::Synth(a) => synth(a, argv),
        Command::MakeRef(a) => make_ref(a, argv),
        Command::ScoreRefs(a) => score_refs(a, argv),
        Command::Train(a) => train_cmd(a, argv),
        Command::Eval(a) => eval(a, argv),
        Command::Verify(a) => verify(a),
        Command::Experiment(a) => experiment(a, argv),
        Command::Rerun(a) => rerun(a),
    }
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn synth(a: SynthArgs, argv: &[String]) -> Result<(), CliError> {
    let spec = SyntheticSpec {
        seed: a.seed,
        reward: PlantedReward::toy(a.seed),
        pairs: a.pairs,
        noise: a.noise,
        train_fraction: a.train_fraction,
    };
    let data = generate_synthetic(&spec)?;
    let _lock = DirLock::acquire(&a.out)?;
    let config = json!({
        "task": "toy",
        "seed": a.seed,
        "pairs": a.pairs,
        "noise": a.noise,
        "train_fraction": a.train_fraction,
    });
    let mut manifest = RunManifest::new("synth", argv, config, vec![a.seed]);
    let (train_path, test_path, reward_path) = (
        a.out.join("train.jsonl"),
        a.out.join("test.jsonl"),
        a.out.join("reward.json"),
    );
    write_preference_file(&train_path, &data.train)?;
    write_preference_file(&test_path, &data.test)?;
    let mut reward = serde_json::to_string_pretty(&spec.reward).expect("reward serializes");
    reward.push('\n');
    write_file(&reward_path, reward.as_bytes())?;
    for p in [&train_path, &test_path, &reward_path] {
        manifest.output(p)?;
    }
    manifest.write(&a.out.join("manifest.json"))?;
    println!(
        "wrote {} train and {} test pairs to {}",
        data.train.len(),
        data.test.len(),
        a.out.display()
    );
    Ok(())
}

fn read_reward(path: &Path) -> Result<PlantedReward, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Integrity(format!("{}: not a planted reward: {e}", path.display())))
}

fn make_ref(a: MakeRefArgs, argv: &[String]) -> Result<(), CliError> {
    let reward = read_reward(&a.reward)?;
    let dims = a.dims.dims();
    let policy = make_reference_family(a.seed, a.quality, &reward, Vocab::printable(), dims)?;
    let _lock = DirLock::acquire(&parent_dir(&a.out))?;
    let config = json!({ "quality": a.quality, "seed": a.seed, "dims": dims });
    let mut manifest = RunManifest::new("make-ref", argv, config, vec![a.seed]);
    manifest.input(&a.reward)?;
    policy.write_checkpoint(&a.out)?;
    manifest.output(&a.out)?;
    manifest.write(&sidecar(&a.out))?;
    println!(
        "wrote reference (quality {}, {} parameters) to {}",
        a.quality,
        policy.param_count(),
        a.out.display()
    );
    Ok(())
}

fn score_refs(a: ScoreRefsArgs, argv: &[String]) -> Result<(), CliError> {
    let data = load_preference_file(&a.data)?;
    let policies = a
        .refs
        .iter()
        .map(|p| ToyPolicy::read_checkpoint(p))
        .collect::<Result<Vec<_>, _>>()?;
    let ids: Vec<String> = a.refs.iter().map(|p| file_name(p)).collect();
    let named: Vec<(String, &ToyPolicy)> = ids.iter().cloned().zip(&policies).collect();
    let cache = score_references(&data, &named)?;
    let _lock = DirLock::acquire(&parent_dir(&a.out))?;
    let mut manifest = RunManifest::new("score-refs", argv, json!({ "reference_ids": ids }), vec![]);
    manifest.input(&a.data)?;
    for r in &a.refs {
        manifest.input(r)?;
    }
    cache.write(&a.out)?;
    manifest.output(&a.out)?;
    manifest.write(&sidecar(&a.out))?;
    let n = cache.len().max(1) as f64;
    for (k, id) in ids.iter().enumerate() {
        let (c, r) = (0..cache.len())
            .map(|i| cache.get(i, k))
            .fold((0.0, 0.0), |acc, (c, r)| (acc.0 + c, acc.1 + r));
        println!("ref {k} {id}: mean logprob chosen {:.4} rejected {:.4}", c / n, r / n);
    }
    println!(
        "wrote cache for {} pairs x {} references to {}",
        cache.len(),
        cache.k(),
        a.out.display()
    );
    Ok(())
}

/// Load a preference file and its cache, failing with an integrity error if
/// the cache was built from different data.
fn load_split(data: &Path, cache: &Path) -> Result<(Vec<mrpo::data::PreferenceExample>, RefLogProbCache), CliError> {
    let examples = load_preference_file(data)?;
    let cache_data = RefLogProbCache::read(cache)?;
    cache_data.check_dataset(&examples)?;
    Ok((examples, cache_data))
}

fn train_cmd(a: TrainArgs, argv: &[String]) -> Result<(), CliError> {
    let config = a.config()?;
    let init = ToyPolicy::read_checkpoint(&a.init)?;
    let (train_examples, train_cache) = load_split(&a.train, &a.cache)?;
    let train_pairs = prepare_split(init.vocab(), &train_examples, &train_cache)?;
    if let Some(first) = train_pairs.first() {
        let own = init.logprob(&first.prompt, &first.chosen)?;
        if (own - first.refs.chosen()[0]).abs() > 1e-9 {
            eprintln!(
                "mrpo: warning: {} does not reproduce reference 0 ({}) of the cache",
                a.init.display(),
                train_cache.reference_ids()[0]
            );
        }
    }
    let test_pairs = match (&a.test, &a.test_cache) {
        (Some(t), Some(c)) => {
            let (examples, cache) = load_split(t, c)?;
            if cache.reference_ids() != train_cache.reference_ids() {
                return Err(CliError::Integrity(
                    "train and test caches were scored with different references".into(),
                ));
            }
            Some(prepare_split(init.vocab(), &examples, &cache)?)
        }
        _ => None,
    };

    let _lock = DirLock::acquire(&a.out)?;
    let mut manifest = RunManifest::new(
        "train",
        argv,
        serde_json::to_value(&config).expect("config serializes"),
        vec![config.seed],
    );
    for p in [
        Some(&a.train),
        Some(&a.cache),
        Some(&a.init),
        a.test.as_ref(),
        a.test_cache.as_ref(),
    ]
    .into_iter()
    .flatten()
    {
        manifest.input(p)?;
    }
    let outcome = train(&init, &train_pairs, test_pairs.as_deref(), &config)?;
    let metrics_path = a.out.join("metrics.jsonl");
    write_metrics(&metrics_path, &outcome.history)?;
    manifest.output(&metrics_path)?;
    if let Some(d) = &outcome.diverged {
        manifest.write(&a.out.join("manifest.json"))?;
        return Err(CliError::Divergence(d.to_string()));
    }
    let policy_path = a.out.join("policy.ckpt");
    outcome.policy.write_checkpoint(&policy_path)?;
    manifest.output(&policy_path)?;
    manifest.write(&a.out.join("manifest.json"))?;
    if let Some(last) = outcome.history.last() {
        match last.test_accuracy {
            Some(acc) => println!(
                "trained {} steps: train loss {:.6}, test accuracy {:.4}, margin {:.4}",
                last.step,
                last.train_loss,
                acc,
                last.test_margin.unwrap_or(f64::NAN)
            ),
            None => println!("trained {} steps: train loss {:.6}", last.step, last.train_loss),
        }
    }
    Ok(())
}

fn eval(a: EvalArgs, argv: &[String]) -> Result<(), CliError> {
    let loss = a.loss.config()?;
    let policy = ToyPolicy::read_checkpoint(&a.policy)?;
    let (examples, cache) = load_split(&a.data, &a.cache)?;
    let pairs = prepare_split(policy.vocab(), &examples, &cache)?;
    let result = evaluate(&policy, &pairs, &loss)?;
    println!(
        "accuracy {:.6} margin {:.6} tie_rate {:.6} pairs {}",
        result.accuracy,
        result.mean_margin,
        result.tie_rate,
        pairs.len()
    );
    if let Some(out) = &a.out {
        let _lock = DirLock::acquire(&parent_dir(out))?;
        let mut manifest = RunManifest::new(
            "eval",
            argv,
            serde_json::to_value(&loss).expect("config serializes"),
            vec![],
        );
        for p in [&a.data, &a.cache, &a.policy] {
            manifest.input(p)?;
        }
        let mut text = serde_json::to_string_pretty(&result).expect("result serializes");
        text.push('\n');
        write_file(out, text.as_bytes())?;
        manifest.output(out)?;
        manifest.write(&sidecar(out))?;
    }
    Ok(())
}

fn verify(a: VerifyArgs) -> Result<(), CliError> {
    if a.trials == 0 {
        return Err(CliError::Usage("--trials must be at least 1".into()));
    }
    let suites = match a.suite {
        Suite::All => vec![Suite::Prop1, Suite::Jensen, Suite::Prop2, Suite::Gradcheck],
        one => vec![one],
    };
    let mut failed = Vec::new();
    for suite in suites {
        let report: SuiteReport = match suite {
            Suite::Prop1 => verify_prop1(a.seed, a.trials)?.summary(),
            Suite::Jensen => verify_jensen(a.seed, a.trials)?.summary(),
            Suite::Prop2 => verify_prop2(a.seed, a.trials)?.summary(),
            Suite::Gradcheck => verify_gradients(a.seed, GRADCHECK_COORDS, GRADCHECK_STEP)?,
            Suite::All => unreachable!("expanded above"),
        };
        println!("{report}");
        if !report.passed() {
            failed.push(report.suite);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::VerifyFailed(format!("failed suites: {}", failed.join(", "))))
    }
}

fn experiment(a: ExperimentArgs, argv: &[String]) -> Result<(), CliError> {
    let mut spec = match &a.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<ExperimentSpec>(&text)
                .map_err(|e| CliError::Usage(format!("{}: bad experiment spec: {e}", path.display())))?
        }
        None => ExperimentSpec::weak_base_strong_reference(vec![1, 2, 3, 4, 5]),
    };
    if let Some(seeds) = &a.seeds {
        spec.seeds = seeds.clone();
    }
    let _lock = DirLock::acquire(&a.out)?;
    let mut manifest = RunManifest::new(
        "experiment",
        argv,
        serde_json::to_value(&spec).expect("spec serializes"),
        spec.seeds.clone(),
    );
    if let Some(path) = &a.spec {
        manifest.input(path)?;
    }
    let report = run_experiment(&spec)?;
    let text = report.to_text();
    let (txt, csv, js) = (
        a.out.join("report.txt"),
        a.out.join("report.csv"),
        a.out.join("report.json"),
    );
    write_file(&txt, text.as_bytes())?;
    report.write_csv(&csv)?;
    let mut json_text = serde_json::to_string_pretty(&report).expect("report serializes");
    json_text.push('\n');
    write_file(&js, json_text.as_bytes())?;
    for p in [&txt, &csv, &js] {
        manifest.output(p)?;
    }
    manifest.write(&a.out.join("manifest.json"))?;
    print!("{text}");
    Ok(())
}

/// Re-execute the command recorded in a manifest from its original working
/// directory, then check that every recorded output came out byte-identical.
fn rerun(a: RerunArgs) -> Result<(), CliError> {
    let manifest = RunManifest::read(&a.manifest)?;
    std::env::set_current_dir(&manifest.cwd).map_err(|e| CliError::Io(format!("{}: {e}", manifest.cwd)))?;
    manifest.check_inputs()?;
    let cli = <Cli as clap::Parser>::try_parse_from(&manifest.argv)
        .map_err(|e| CliError::Usage(format!("manifest command line does not parse: {e}")))?;
    if matches!(cli.command, Command::Rerun(_)) {
        return Err(CliError::Usage("a manifest cannot record a rerun".into()));
    }
    run(cli.command, &manifest.argv)?;
    let mut mismatched = Vec::new();
    for (path, hash) in &manifest.outputs {
        if &crate::manifest::hash_file(&PathBuf::from(path))? != hash {
            mismatched.push(path.clone());
        }
    }
    if !mismatched.is_empty() {
        return Err(CliError::Integrity(format!(
            "outputs differ from the manifest: {}",
            mismatched.join(", ")
        )));
    }
    println!("reproduced {} outputs byte-identically", manifest.outputs.len());
    Ok(())
}
