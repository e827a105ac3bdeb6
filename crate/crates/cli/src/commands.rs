use std::collections::HashMap;
use std::fs::{self, File};
use std::path::Path;
use std::sync::Arc;

use survclust::clustering::{self, ClusterConfig, ClusterModel, MclParams};
use survclust::dataset::{validate_dataset, FeatureSchema, SurvivalDataset};
use survclust::evaluation::{self, render_table, EvalConfig};
use survclust::ingest::{build_dataset, ActivityFeatures, ActivityLog};
use survclust::io::{self, FeatureRows, UnknownCategory};
use survclust::synth::{generate, SynthConfig};
use survclust::tree::{NodeKind, Routing, SplitTest, TreeConfig};

use crate::{DataArgs, EvaluateArgs, Failure, FitArgs, PredictArgs, SimulateArgs};

type Outcome<T = ()> = Result<T, Failure>;

pub fn simulate(args: &SimulateArgs) -> Outcome {
    let g = args.groups;
    if g == 0 {
        return Err(Failure::usage("--groups: must be at least 1"));
    }
    let weights = args.weights.clone().unwrap_or_else(|| vec![1.0 / g as f64; g]);
    if weights.len() != g {
        return Err(Failure::usage(format!("--weights: expected {g} values, got {}", weights.len())));
    }
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Failure::usage(format!(
            "--weights: values must be nonnegative and sum to 1 (sum = {sum})"
        )));
    }
    let rates = args
        .rates
        .clone()
        .unwrap_or_else(|| (0..g).map(|i| 0.4f64.powi(i as i32)).collect());
    if rates.len() != g {
        return Err(Failure::usage(format!("--rates: expected {g} values, got {}", rates.len())));
    }
    if let Some(r) = rates.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
        return Err(Failure::usage(format!("--rates: {r} is not a positive rate")));
    }
    if args.n == 0 {
        return Err(Failure::usage("--n: must be at least 1"));
    }

    let groups: Vec<(f64, f64)> = weights.into_iter().zip(rates).collect();
    let config = SynthConfig {
        entry_window: args.entry_window,
        study_duration: args.study_duration,
        ..SynthConfig::planted(&groups, args.n, args.noise, args.seed)
    };
    let synthetic = generate(&config)?;
    let data = &synthetic.dataset;

    fs::create_dir_all(&args.out).map_err(|e| Failure {
        code: 1,
        message: format!("{}: {e}", args.out.display()),
    })?;
    io::write_atomic(&args.out.join("subjects.csv"), |w| io::write_subjects(w, data))?;
    io::write_json(&args.out.join("schema.json"), &*data.schema)?;
    let truth = data.subjects.iter().map(|s| s.id.clone()).zip(synthetic.truth.iter().copied());
    io::write_atomic(&args.out.join("truth.csv"), |w| io::write_labels(w, "group", truth))?;

    let events = data.n_events();
    println!(
        "wrote {} subjects ({} events, {} censored) to {}",
        data.len(),
        events,
        data.len() - events,
        args.out.display()
    );
    Ok(())
}

fn open(path: &Path) -> Outcome<File> {
    File::open(path).map_err(|e| Failure {
        code: 1,
        message: format!("{}: {e}", path.display()),
    })
}

fn read_schema_flag(path: &Path) -> Outcome<FeatureSchema> {
    io::read_schema(path).map_err(|e| {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    })
}

/// Loads subjects from `--data` or from `--activity`/`--profiles`. With a
/// model, its schema is the reference the data must match.
fn load_data(args: &DataArgs, model_schema: Option<&FeatureSchema>) -> Outcome<SurvivalDataset> {
    let given = args.schema.as_deref().map(read_schema_flag).transpose()?;
    let data = if let Some(path) = &args.data {
        let schema = match (given, model_schema) {
            (Some(s), Some(m)) if &s != m => {
                return Err(Failure::usage("--schema does not match the model's schema"));
            }
            (Some(s), _) => s,
            (None, Some(m)) => m.clone(),
            (None, None) => return Err(Failure::usage("--schema is required with --data")),
        };
        io::read_subjects(open(path)?, Arc::new(schema))?
    } else if let Some(activity_path) = &args.activity {
        let profile_schema = match (given, model_schema) {
            (Some(s), _) => s,
            (None, Some(m)) => FeatureSchema {
                features: m
                    .features
                    .iter()
                    .filter(|f| !ActivityFeatures::NAMES.contains(&f.name.as_str()))
                    .cloned()
                    .collect(),
            },
            (None, None) => FeatureSchema { features: vec![] },
        };
        let profiles_path = args.profiles.as_deref().expect("clap requires --profiles");
        let cutoff = args.cutoff.expect("clap requires --cutoff");
        let window = args.window.expect("clap requires --window");

        let rows = io::read_profiles(open(profiles_path)?, &profile_schema)?;
        let activity = io::read_activity(open(activity_path)?)?;
        let study_end = args.study_end.unwrap_or_else(|| {
            rows.iter()
                .map(|r| r.join_time)
                .chain(activity.iter().map(|(_, a)| a.timestamp))
                .fold(f64::NEG_INFINITY, f64::max)
        });
        let joins: Vec<(String, f64)> = rows.iter().map(|r| (r.user_id.clone(), r.join_time)).collect();
        let profiles: HashMap<String, _> = rows.into_iter().map(|r| (r.user_id, r.values)).collect();
        let log = ActivityLog::assemble(joins, activity, study_end)?;
        let (data, discards) = build_dataset(&log, cutoff, window, &profile_schema, &profiles)?;
        if let Some(m) = model_schema {
            if *data.schema != *m {
                return Err(Failure::usage("profile and activity features do not match the model's schema"));
            }
        }
        println!("users: {}  kept: {}  discarded: {}", log.users.len(), data.len(), discards.len());
        data
    } else {
        return Err(Failure::usage("one of --data or --activity is required"));
    };
    validate_dataset(&data).into_result()?;
    Ok(data)
}

fn describe_test(schema: &FeatureSchema, feature: usize, test: &SplitTest) -> String {
    let f = &schema.features[feature];
    match *test {
        SplitTest::LessThan { threshold } => format!("{} < {threshold}", f.name),
        SplitTest::Equals { category } => {
            let level = f.categories().and_then(|c| c.get(category)).map_or("?", String::as_str);
            format!("{} = {level}", f.name)
        }
    }
}

fn print_fit_summary(data: &SurvivalDataset, out: &clustering::FitOutput) {
    let model = &out.model;
    let tree = &model.tree;
    println!("subjects: {}  events: {}", data.len(), data.n_events());
    println!("leaves: {}  depth: {}", tree.n_leaves(), tree.depth());
    println!(
        "mcl groups: {}  clusters: {}  inflation: {}",
        out.mcl_partition.len(),
        model.k,
        model.inflation
    );
    let sizes: Vec<String> = model.cluster_sizes().iter().map(usize::to_string).collect();
    println!("cluster sizes: {}", sizes.join(" "));
    if tree.n_internal() > 0 {
        println!("splits:");
    }
    for node in &tree.nodes {
        if let NodeKind::Internal {
            feature_index,
            test,
            p_value,
            ln_p_value,
            n_candidates,
            corrected_alpha,
            ..
        } = &node.kind
        {
            let p = if *p_value > 0.0 {
                format!("{p_value:.3e}")
            } else {
                format!("e^{ln_p_value:.1}")
            };
            println!(
                "  node {:>3}  depth {:>2}  n {:>7}  {}  p = {p}  (alpha/m = {corrected_alpha:.3e}, m = {n_candidates})",
                node.id,
                node.depth,
                node.n_subjects,
                describe_test(&tree.schema, *feature_index, test),
            );
        }
    }
}

pub fn fit(args: &FitArgs) -> Outcome {
    if !(args.inflation > 1.0 && args.inflation <= clustering::MAX_INFLATION) {
        return Err(Failure::usage(format!(
            "--inflation: must be in (1, {}], got {}",
            clustering::MAX_INFLATION,
            args.inflation
        )));
    }
    if args.k == Some(0) {
        return Err(Failure::usage("--k: must be at least 1"));
    }
    let tree_config = TreeConfig {
        alpha: args.alpha,
        min_leaf_subjects: args.min_leaf_subjects,
        min_leaf_events: args.min_leaf_events,
        max_depth: args.max_depth,
        max_numeric_thresholds: args.max_thresholds,
    };
    tree_config.validate()?;
    let cluster_config = ClusterConfig {
        mcl: MclParams {
            inflation: args.inflation,
            ..MclParams::default()
        },
        k: args.k,
        ..ClusterConfig::default()
    };

    let data = load_data(&args.data, None)?;
    let out = clustering::fit(&data, &tree_config, &cluster_config)?;
    io::write_json(&args.out, &out.model)?;
    print_fit_summary(&data, &out);
    Ok(())
}

fn read_model(path: &Path) -> Outcome<ClusterModel> {
    let model: ClusterModel = io::read_json(path).map_err(|e| {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    })?;
    model.tree.schema.check()?;
    Ok(model)
}

pub fn evaluate(args: &EvaluateArgs) -> Outcome {
    let model = read_model(&args.model)?;
    let data = load_data(&args.data, Some(&model.tree.schema))?;
    let config = EvalConfig {
        t0: args.t0,
        t1: args.t1,
        split: args.split,
        seed: args.seed,
        ..EvalConfig::default()
    };
    let report = evaluation::evaluate(&model, &data, &config)?;
    if let Some(out) = &args.out {
        io::write_json(out, &report)?;
    }
    print!("{}", render_table(&report));
    Ok(())
}

pub fn predict(args: &PredictArgs) -> Outcome {
    let model = read_model(&args.model)?;
    let (unknown, routing) = if args.unknown_as_majority_child {
        (UnknownCategory::AsMissing, Routing::MajorityChild)
    } else {
        (UnknownCategory::Reject, Routing::Strict)
    };
    let rows = FeatureRows::new(open(&args.data)?, Arc::new(model.tree.schema.clone()), unknown)?;
    let mut count = 0usize;
    io::write_atomic(&args.out, |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["id", "cluster"])?;
        for row in rows {
            let (id, values) = row?;
            let cluster = model.cluster_assign_with(&values, routing)?;
            out.write_record([id, cluster.to_string()])?;
            count += 1;
        }
        out.flush()?;
        Ok(())
    })?;
    println!("labeled {count} subjects");
    Ok(())
}
