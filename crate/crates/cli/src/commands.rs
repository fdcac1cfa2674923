use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use log::info;
use p2p_core::base_lm::BaseWeights;
use p2p_core::baselines::{mtlora_train, BaselineKind};
use p2p_core::bench::{bench_generation, p2p_adapter_for};
use p2p_core::corpus::{synth_population, to_jsonl, SynthConfig, TaskKind};
use p2p_core::embedder::{ExternalEmbeddings, ProfileEncoder};
use p2p_core::experiments::{build_base, evaluate, fit_encoder, train_p2p_with, Ablation, Method};
use p2p_core::metrics::MetricReport;
use p2p_core::profile::ProfileConfig;
use p2p_core::splits::{ood_split, random_split, SplitMode};
use p2p_core::sweep::{sweep, to_csv, SweepAxis};
use p2p_core::trainer::{ProfileCache, ProfileMode, TaskPopulation};
use serde::Serialize;

use crate::cli::{Cli, Command, DataArgs, ModelArgs};
use crate::data::*;
use crate::manifest::Outputs;
use crate::settings::{load_config, parse_set, Settings};

/// Runs one command; `args` are the arguments after the program name.
pub fn run(cli: Cli, args: Vec<String>) -> Result<()> {
    let g = &cli.global;
    if g.jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    // A second call in the same process (tests) finds the pool already set.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(g.jobs).build_global();
    let mut pairs = match &g.config {
        Some(p) => load_config(p)?,
        None => Vec::new(),
    };
    for s in &g.set {
        pairs.push(parse_set(s)?);
    }
    pairs.extend(flag_pairs(&cli.command));
    let env_seed = std::env::var("P2P_SEED").ok();
    let settings = Settings::resolve(&pairs, g.seed, env_seed.as_deref())?;
    let mut out = Outputs::new(&g.out, g.force, !g.no_timing)?;
    let name = manifest_tag(&cli.command);
    out.claim(&[format!("manifest.{name}.json")])?;
    match &cli.command {
        Command::Datagen { .. } => datagen(&settings, &mut out)?,
        Command::Split { data, embeddings, .. } => split(&settings, &mut out, data, embeddings.as_deref())?,
        Command::Train {
            data, base, embeddings, ..
        } => train(&settings, &mut out, data, base.as_deref(), embeddings.as_deref())?,
        Command::Generate { data, model, users } => generate(&settings, &mut out, data, model, users)?,
        Command::Eval {
            data,
            model,
            baseline,
            per_user,
        } => eval(&settings, &mut out, data, model, baseline, *per_user)?,
        Command::Ablate { data, model, mode } => ablate(&settings, &mut out, data, model, mode)?,
        Command::Sweep { axis, grid, base } => run_sweep(&settings, &mut out, axis, grid, base.as_deref())?,
        Command::Bench { data, model, .. } => bench(&settings, &mut out, data, model)?,
    }
    let manifest = out.finish(cli.command.name(), &name, args, &settings)?;
    for f in &manifest.outputs {
        info!("wrote {} ({} bytes, crc32 {})", f.path, f.bytes, f.crc32);
    }
    Ok(())
}

/// Distinguishes manifests of runs that share an output directory.
fn manifest_tag(cmd: &Command) -> String {
    match cmd {
        Command::Eval { baseline, .. } => format!("eval.{baseline}"),
        Command::Ablate { mode, .. } => format!("ablate.{mode}"),
        Command::Sweep { axis, .. } => format!("sweep.{axis}"),
        other => other.name().to_string(),
    }
}

/// Command-specific flags expressed as settings keys.
fn flag_pairs(cmd: &Command) -> Vec<(String, String)> {
    let mut v: Vec<(&str, Option<String>)> = Vec::new();
    match cmd {
        Command::Datagen {
            kind,
            clusters,
            users_per_cluster,
            history,
            style,
        } => {
            v.push(("kind", kind.clone()));
            v.push(("clusters", clusters.map(|x| x.to_string())));
            v.push(("users_per_cluster", users_per_cluster.map(|x| x.to_string())));
            v.push(("history_len", history.map(|x| x.to_string())));
            v.push(("profile_style", style.clone()));
        }
        Command::Split { mode, n_test, .. } => {
            v.push(("split_mode", mode.clone()));
            v.push(("n_test", n_test.map(|x| x.to_string())));
        }
        Command::Train { steps, .. } => v.push(("steps", steps.map(|x| x.to_string()))),
        Command::Bench { users, .. } => v.push(("bench_users", users.map(|x| x.to_string()))),
        _ => {}
    }
    v.into_iter()
        .filter_map(|(k, x)| x.map(|x| (k.to_string(), x)))
        .collect()
}

fn model_dir<'a>(out: &'a Outputs, m: &'a ModelArgs) -> &'a Path {
    m.model.as_deref().unwrap_or(out.dir())
}

fn populations(out: &mut Outputs, data: &DataArgs) -> Result<Vec<TaskPopulation>> {
    out.input(&data.data)?;
    if let Some(t) = &data.tasks {
        out.input(t)?;
    }
    load_populations(&data.data, data.tasks.as_deref())
}

/// `(train, test)` populations; without a split everyone is in both.
fn split_populations(out: &mut Outputs, data: &DataArgs) -> Result<(Vec<TaskPopulation>, Vec<TaskPopulation>)> {
    let pops = populations(out, data)?;
    match &data.split {
        Some(p) => {
            out.input(p)?;
            let s = load_split(p)?;
            Ok((restrict(&pops, &s.train_ids), restrict(&pops, &s.test_ids)))
        }
        None => Ok((pops.clone(), pops)),
    }
}

fn datagen(s: &Settings, out: &mut Outputs) -> Result<()> {
    out.claim(&[USERS_FILE.into(), TASKS_FILE.into(), "clusters.json".into()])?;
    out.phase("generate");
    let sy = &s.synth;
    let mut cfg = SynthConfig::new(sy.clusters, sy.users_per_cluster, sy.history_len, sy.kind, s.seed)
        .with_style(sy.style);
    cfg.distractor_rate = sy.distractor_rate;
    let pop = synth_population(&cfg)?;
    out.write(USERS_FILE, to_jsonl(&pop.users).as_bytes())?;
    out.write_json(TASKS_FILE, &[&pop.task])?;
    #[derive(Serialize)]
    struct Clusters<'a> {
        rules: &'a [p2p_core::corpus::ClusterRule],
        assignment: BTreeMap<&'a str, usize>,
    }
    let assignment = pop.users.iter().map(|u| u.user_id.as_str()).zip(pop.clusters.iter().copied()).collect();
    out.write_json(
        "clusters.json",
        &Clusters {
            rules: &pop.rules,
            assignment,
        },
    )?;
    Ok(())
}

fn profile_config(s: &Settings, kind: TaskKind) -> ProfileConfig {
    s.p2p.profile_config(kind)
}

/// Query-independent profile of every user, in population order.
fn user_profiles(s: &Settings, pops: &[TaskPopulation]) -> Result<Vec<(String, String)>> {
    let mut v = Vec::new();
    for t in pops {
        let cache = ProfileCache::new(&t.users, profile_config(s, t.spec.kind), ProfileMode::PerUser);
        for (i, u) in t.users.iter().enumerate() {
            let p = cache
                .profile(i, "")
                .with_context(|| format!("user {} has nothing to build a profile from", u.user_id))?;
            v.push((u.user_id.clone(), p.rendered));
        }
    }
    Ok(v)
}

fn split(s: &Settings, out: &mut Outputs, data: &DataArgs, embeddings: Option<&Path>) -> Result<()> {
    out.claim(&["split.json".into()])?;
    let pops = populations(out, data)?;
    out.phase("embed");
    let profiles = user_profiles(s, &pops)?;
    let texts: Vec<&str> = profiles.iter().map(|(_, p)| p.as_str()).collect();
    let encoder: Box<dyn ProfileEncoder> = match embeddings {
        Some(p) => {
            out.input(p)?;
            Box::new(ExternalEmbeddings::load(p)?)
        }
        None => Box::new(fit_encoder(&pops, &s.p2p)?),
    };
    let points = texts
        .iter()
        .map(|t| encoder.encode(t).map(|e| e.vector))
        .collect::<p2p_core::Result<Vec<_>>>()?;
    let ids: Vec<String> = profiles.into_iter().map(|(id, _)| id).collect();
    let n_test = s.split.n_test.unwrap_or_else(|| (ids.len() / 5).max(1));
    out.phase("split");
    let result = match s.split.mode {
        SplitMode::Ood => {
            let range = s.split.k_max.map(|hi| s.split.k_min..=hi);
            ood_split(&ids, &points, n_test, range, s.seed, s.split.permissive)?
        }
        SplitMode::Random => random_split(&ids, &points, n_test, s.seed)?,
    };
    info!(
        "{} train, {} test, {} quarantined (K = {})",
        result.train_ids.len(),
        result.test_ids.len(),
        result.quarantined_ids.len(),
        result.k
    );
    out.write_json("split.json", &result)?;
    Ok(())
}

fn train(
    s: &Settings,
    out: &mut Outputs,
    data: &DataArgs,
    base: Option<&Path>,
    embeddings: Option<&Path>,
) -> Result<()> {
    let mut names = vec![THETA_FILE.to_string(), "train_report.json".into()];
    names.push(if embeddings.is_some() { EXTERNAL_FILE } else { EMBEDDER_FILE }.into());
    if base.is_none() {
        names.push(BASE_FILE.into());
    }
    out.claim(&names)?;
    let (train_pops, _) = split_populations(out, data)?;
    if train_pops.is_empty() {
        bail!("no training users");
    }
    let base = obtain_base(s, out, base, &train_pops)?;
    out.phase("fit_embedder");
    let encoder = match embeddings {
        Some(p) => {
            out.input(p)?;
            let bytes = std::fs::read(p)?;
            out.write(EXTERNAL_FILE, &bytes)?;
            Encoder::External(ExternalEmbeddings::load(p)?)
        }
        None => {
            let e = fit_encoder(&train_pops, &s.p2p)?;
            e.save(&out.path(EMBEDDER_FILE))?;
            out.record(EMBEDDER_FILE)?;
            Encoder::Hashed(e)
        }
    };
    out.phase("train");
    let (hyper, mut report) = train_p2p_with(&base, &train_pops, &s.p2p, encoder.as_dyn())?;
    if !out.timing() {
        report.wall_time_s = 0.0;
    }
    out.write(THETA_FILE, &hyper.to_bytes())?;
    out.write_json("train_report.json", &report)?;
    Ok(())
}

/// Loads `explicit`, or pretrains a base on the task kinds present and
/// writes it to the output directory.
fn obtain_base(s: &Settings, out: &mut Outputs, explicit: Option<&Path>, pops: &[TaskPopulation]) -> Result<BaseWeights> {
    if let Some(p) = explicit {
        out.input(p)?;
        return load_base(p);
    }
    out.phase("pretrain_base");
    let mut kinds: Vec<TaskKind> = pops.iter().map(|t| t.spec.kind).collect();
    kinds.sort_by_key(|k| k.as_str());
    kinds.dedup();
    let (base, losses) = build_base(&kinds, &s.base)?;
    info!(
        "base pretrained: loss {:.3} -> {:.3}",
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    out.write(BASE_FILE, &base.to_bytes())?;
    Ok(base)
}

fn generate(s: &Settings, out: &mut Outputs, data: &DataArgs, m: &ModelArgs, users: &[String]) -> Result<()> {
    let dir = model_dir(out, m).to_path_buf();
    let pops = populations(out, data)?;
    let ids: Vec<String> = if !users.is_empty() {
        users.to_vec()
    } else if let Some(p) = &data.split {
        out.input(p)?;
        load_split(p)?.test_ids
    } else {
        pops.iter().flat_map(|t| t.users.iter().map(|u| u.user_id.clone())).collect()
    };
    let selected = restrict(&pops, &ids);
    let found = count_users(&selected);
    if found != ids.len() {
        let known: std::collections::BTreeSet<&str> = selected
            .iter()
            .flat_map(|t| t.users.iter().map(|u| u.user_id.as_str()))
            .collect();
        let missing: Vec<&str> = ids.iter().map(String::as_str).filter(|i| !known.contains(i)).collect();
        bail!("unknown user(s): {}", missing.join(", "));
    }
    let names: Vec<String> = ids.iter().map(|id| adapter_name(id)).collect();
    out.claim(&names)?;
    out.phase("load");
    let model = load_model(&dir, m.base.as_deref())?;
    out.phase("generate");
    for t in &selected {
        let pc = profile_config(s, t.spec.kind);
        for u in &t.users {
            let name = adapter_name(&u.user_id);
            let path = out.path(&name);
            std::fs::create_dir_all(path.parent().expect("adapters/ parent"))?;
            p2p_adapter_for(&model.hyper, model.encoder.as_dyn(), u, &pc, &path)?;
            out.record(&name)?;
        }
    }
    Ok(())
}

fn adapter_name(user_id: &str) -> String {
    let safe: String = user_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("adapters/{safe}.p2pad")
}

fn eval(s: &Settings, out: &mut Outputs, data: &DataArgs, m: &ModelArgs, baseline: &str, per_user: bool) -> Result<()> {
    let kind: BaselineKind = baseline.parse()?;
    let name = format!("eval.{}.json", kind.as_str());
    let mut names = vec![name.clone()];
    if kind == BaselineKind::MtLora {
        names.push("mt_lora.p2pad".into());
    }
    out.claim(&names)?;
    let (train_pops, test) = split_populations(out, data)?;
    if count_users(&test) == 0 {
        bail!("the test split is empty");
    }
    let dir = model_dir(out, m).to_path_buf();
    let mut settings = s.eval;
    settings.per_user = per_user;
    out.phase("load");
    let report = if kind == BaselineKind::P2p {
        let model = load_model(&dir, m.base.as_deref())?;
        out.phase("evaluate");
        let none = Ablation::None;
        let method = Method::P2p {
            hyper: &model.hyper,
            encoder: model.encoder.as_dyn(),
            ablation: &none,
        };
        evaluate(&model.base, &test, method, &settings)?
    } else {
        let base = load_base(&base_path(&dir, m.base.as_deref()))?;
        match kind {
            BaselineKind::MtLora => {
                out.phase("train_mt_lora");
                let users: Vec<_> = train_pops.iter().flat_map(|t| t.users.iter().cloned()).collect();
                let set = mtlora_train(&base, &users, &s.mt_lora)?;
                out.write("mt_lora.p2pad", &set.to_bytes())?;
                out.phase("evaluate");
                evaluate(&base, &test, Method::MtLora(&set), &settings)?
            }
            other => {
                out.phase("evaluate");
                let method = match other {
                    BaselineKind::Base => Method::Base,
                    BaselineKind::Rag => Method::Rag,
                    BaselineKind::Pag => Method::Pag,
                    BaselineKind::FullHistory => Method::FullHistory,
                    BaselineKind::Oppu => Method::Oppu(&s.oppu),
                    _ => unreachable!("handled above"),
                };
                evaluate(&base, &test, method, &settings)?
            }
        }
    };
    info!("{}: {:?}", report.method, report.metrics);
    out.write_json(&name, &report)?;
    Ok(())
}

#[derive(Serialize)]
struct AblationReport {
    mode: String,
    full: MetricReport,
    ablated: MetricReport,
    delta: f64,
}

fn ablate(s: &Settings, out: &mut Outputs, data: &DataArgs, m: &ModelArgs, mode: &str) -> Result<()> {
    let ablation = Ablation::from_mode(mode, s.seed)?;
    let name = format!("ablate.{mode}.json");
    out.claim(std::slice::from_ref(&name))?;
    let (_, test) = split_populations(out, data)?;
    if count_users(&test) == 0 {
        bail!("the test split is empty");
    }
    out.phase("load");
    let model = load_model(model_dir(out, m), m.base.as_deref())?;
    out.phase("evaluate");
    let run = |ab: &Ablation| {
        let method = Method::P2p {
            hyper: &model.hyper,
            encoder: model.encoder.as_dyn(),
            ablation: ab,
        };
        evaluate(&model.base, &test, method, &s.eval)
    };
    let full = run(&Ablation::None)?;
    let ablated = run(&ablation)?;
    let delta = ablated.primary() - full.primary();
    info!("{mode}: {:.3} -> {:.3}", full.primary(), ablated.primary());
    out.write_json(
        &name,
        &AblationReport {
            mode: mode.to_string(),
            full,
            ablated,
            delta,
        },
    )?;
    Ok(())
}

fn run_sweep(s: &Settings, out: &mut Outputs, axis: &str, grid: &[usize], base: Option<&Path>) -> Result<()> {
    let axis: SweepAxis = axis.parse()?;
    let grid = if grid.is_empty() { axis.default_grid() } else { grid.to_vec() };
    let stem = format!("sweep.{}", axis.as_str());
    let mut names = vec![format!("{stem}.csv"), format!("{stem}.json")];
    if base.is_none() {
        names.push(BASE_FILE.into());
    }
    out.claim(&names)?;
    let probe = [TaskPopulation {
        spec: p2p_core::corpus::TaskSpec {
            task_id: "sweep".into(),
            kind: TaskKind::Classification,
            label_set: None,
        },
        users: Vec::new(),
    }];
    let base = obtain_base(s, out, base, &probe)?;
    out.phase("sweep");
    let points = sweep(&base, axis, &grid, &s.sweep)?;
    out.write(&format!("{stem}.csv"), to_csv(&points).as_bytes())?;
    out.write_json(&format!("{stem}.json"), &points)?;
    Ok(())
}

fn bench(s: &Settings, out: &mut Outputs, data: &DataArgs, m: &ModelArgs) -> Result<()> {
    out.claim(&["bench.json".into(), "bench.csv".into()])?;
    let (_, test) = split_populations(out, data)?;
    let dir: PathBuf = model_dir(out, m).to_path_buf();
    out.phase("load");
    let model = load_model(&dir, m.base.as_deref())?;
    let mut users = Vec::new();
    let mut kind = None;
    for t in &test {
        for u in &t.users {
            if users.len() < s.bench_users && kind.map_or(true, |k| k == t.spec.kind) {
                kind = Some(t.spec.kind);
                users.push(u.clone());
            }
        }
    }
    let kind = kind.context("no users to benchmark")?;
    if users.len() < s.bench_users {
        log::warn!("benchmarking {} users, fewer than the {} requested", users.len(), s.bench_users);
    }
    out.phase("bench");
    let scratch = tempfile::tempdir()?;
    let t = Instant::now();
    let mut report = bench_generation(
        &model.base,
        &model.hyper,
        model.encoder.as_dyn(),
        &users,
        &profile_config(s, kind),
        &s.oppu,
        &s.bench,
        scratch.path(),
    )?;
    info!("benchmark took {:.1}s", t.elapsed().as_secs_f64());
    let report_path = dir.join("train_report.json");
    if report_path.exists() {
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report_path)?)?;
        if let Some(w) = v.get("wall_time_s").and_then(|w| w.as_f64()).filter(|w| *w > 0.0) {
            report = report.with_training_cost(w);
        }
    }
    info!(
        "p2p median {:.4}s, oppu median {:.4}s, speedup {:.1}x",
        report.p2p_median_s, report.oppu_median_s, report.speedup
    );
    out.write_json("bench.json", &report)?;
    out.write("bench.csv", report.to_csv().as_bytes())?;
    Ok(())
}
