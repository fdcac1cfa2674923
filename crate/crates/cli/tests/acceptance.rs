//! Acceptance run. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any failed.
//!
//! Criteria can be picked by number:
//! `cargo test -p p2p-cli --test acceptance -- 1 2 3`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use p2p_core::base_lm::{BaseWeights, SftExample};
use p2p_core::baselines::{mtlora_train, LoraTrainConfig};
use p2p_core::bench::{bench_generation, BenchConfig};
use p2p_core::corpus::{synth_population, ProfileStyle, SynthConfig, TaskKind, UserRecord};
use p2p_core::embedder::{HashedTfidf, ProfileEncoder};
use p2p_core::experiments::{
    build_base, evaluate, fit_encoder, reference_population, synth_task, Ablation, BaseConfig, EvalSettings,
    Method, P2pConfig,
};
use p2p_core::hypernet::HyperNet;
use p2p_core::lora::{delta_apply, merge, AdapterSet, LoraFactors};
use p2p_core::metrics::{lcs_len, rouge_l, rouge_tokens};
use p2p_core::profile::{build_profile, item_text, output_term_scores, Bm25Index, ProfileConfig, BM25_B, BM25_K1};
use p2p_core::splits::{nearest_train_distance, ood_split, random_split, silhouette, SplitResult};
use p2p_core::sweep::{range_of, sweep, unseen_user_split, SweepAxis, SweepConfig};
use p2p_core::tensor::{finite_difference_check, Graph, Tensor};
use p2p_core::trainer::{batch_loss, TaskPopulation};
use p2p_oracles as oracle;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<(bool, String), String>;

const SEEDS: [u64; 3] = [0, 1, 2];
const STEPS: usize = 2000;
const BATCH: usize = 8;

fn p2p_config(seed: u64) -> P2pConfig {
    let mut cfg = P2pConfig::default().seeded(seed);
    cfg.train.steps = STEPS;
    cfg.train.batch_users = BATCH;
    cfg
}

/// One criterion-4 model with the users it was trained and tested on.
struct Run {
    seed: u64,
    hyper: HyperNet,
    encoder: HashedTfidf,
    train: Vec<TaskPopulation>,
    test: Vec<TaskPopulation>,
    full: f64,
    secs: f64,
}

#[derive(Default)]
struct Shared {
    base: Option<BaseWeights>,
    runs: Option<Vec<Run>>,
}

impl Shared {
    fn base(&mut self) -> Result<&BaseWeights, String> {
        if self.base.is_none() {
            let t = Instant::now();
            let (b, _) = build_base(&[TaskKind::Classification], &BaseConfig::default()).map_err(err)?;
            println!("  (base pretrained in {:.1}s)", t.elapsed().as_secs_f64());
            self.base = Some(b);
        }
        Ok(self.base.as_ref().expect("just built"))
    }

    fn runs(&mut self) -> Result<&[Run], String> {
        if self.runs.is_none() {
            let base = self.base()?.clone();
            let mut runs = Vec::new();
            for seed in SEEDS {
                let t = Instant::now();
                let (task, clusters) = synth_task(&reference_population(seed, ProfileStyle::None)).map_err(err)?;
                let (test, train) = unseen_user_split(task, &clusters, 5);
                let (hyper, encoder, _) = p2p_core::experiments::train_p2p(&base, &train, &p2p_config(seed)).map_err(err)?;
                let full = p2p_accuracy(&base, &test, &hyper, &encoder, &Ablation::None)?;
                runs.push(Run {
                    seed,
                    hyper,
                    encoder,
                    train,
                    test,
                    full,
                    secs: t.elapsed().as_secs_f64(),
                });
            }
            self.runs = Some(runs);
        }
        Ok(self.runs.as_deref().expect("just built"))
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn p2p_accuracy(
    base: &BaseWeights,
    test: &[TaskPopulation],
    hyper: &HyperNet,
    encoder: &HashedTfidf,
    ablation: &Ablation,
) -> Result<f64, String> {
    let m = Method::P2p {
        hyper,
        encoder,
        ablation,
    };
    Ok(evaluate(base, test, m, &EvalSettings::default()).map_err(err)?.primary())
}

fn accuracy(base: &BaseWeights, test: &[TaskPopulation], method: Method) -> Result<f64, String> {
    Ok(evaluate(base, test, method, &EvalSettings::default()).map_err(err)?.primary())
}

/// (embedding, example) pairs built the way training builds them.
fn training_items(base: &BaseWeights, n: usize, seed: u64) -> Result<Vec<(Vec<f64>, SftExample)>, String> {
    let (task, _) = synth_task(&reference_population(seed, ProfileStyle::None)).map_err(err)?;
    let cfg = P2pConfig::default().seeded(seed);
    let encoder = fit_encoder(std::slice::from_ref(&task), &cfg).map_err(err)?;
    let pc = cfg.profile_config(task.spec.kind);
    let mut items = Vec::new();
    for u in task.users.iter().take(n) {
        let target = &u.targets()[0];
        let profile = build_profile(&target.input, u, &pc).map_err(err)?;
        let e = encoder.encode(&profile.rendered).map_err(err)?;
        items.push((e.vector, SftExample::from_text(base.vocab(), &target.input, &target.output)));
    }
    Ok(items)
}

fn random_prompt(base: &BaseWeights, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = rng.random_range(2..40);
    (0..n).map(|_| rng.random_range(0..base.vocab().len())).collect()
}

fn c1_gradients(sh: &mut Shared) -> Check {
    let base = sh.base()?.clone();
    let t = Instant::now();
    let cfg = P2pConfig::default();
    let items = training_items(&base, 3, 11)?;
    let refs: Vec<(&[f64], &SftExample)> = items.iter().map(|(e, x)| (e.as_slice(), x)).collect();
    let mut hyper = HyperNet::init(cfg.hyper_config(base.config()), base.checksum(), 3).map_err(err)?;
    // Away from the zero-B start so every array carries gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let theta: Vec<f64> = hyper.flat().iter().map(|x| x + rng.random_range(-0.05..0.05)).collect();
    hyper.set_flat(&theta).map_err(err)?;
    let (_, grads) = batch_loss(&base, &hyper, &refs).map_err(err)?;
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().iter().copied()).collect();

    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut off = 0;
    for (name, a) in hyper.array_names().iter().zip(hyper.arrays()) {
        let group = match name.as_str() {
            "e_mod" => "E_mod",
            "e_dep" => "E_dep",
            _ => "MLP",
        };
        groups.entry(group).or_default().extend(off..off + a.len());
        off += a.len();
    }
    let quota = [("E_dep", 60), ("E_mod", 60), ("MLP", 120)];
    let mut coords = Vec::new();
    for (g, n) in quota {
        let pool = &groups[g];
        coords.extend(pool.choose_multiple(&mut rng, n.min(pool.len())).copied());
    }
    let loss_at = |v: &[f64]| {
        let mut h = hyper.clone();
        h.set_flat(v).expect("same length");
        batch_loss(&base, &h, &refs).expect("finite loss").0
    };
    let numeric = oracle::central_difference_oracle(loss_at, &theta, &coords, 1e-5);
    let mut worst = 0.0f64;
    let mut negligible = 0;
    for (c, n) in coords.iter().zip(&numeric) {
        let a = analytic[*c];
        let scale = a.abs().max(n.abs());
        // Both sides below the float noise of a central difference.
        if scale < 1e-8 {
            negligible += 1;
            continue;
        }
        worst = worst.max((a - n).abs() / scale);
    }
    let secs = t.elapsed().as_secs_f64();
    Ok((
        worst < 1e-4 && secs < 60.0 && coords.len() >= 200,
        format!(
            "{} coords ({negligible} with |grad| < 1e-8), max rel error {worst:.2e}, {secs:.1}s",
            coords.len()
        ),
    ))
}

fn c2_zero_init(sh: &mut Shared) -> Check {
    let base = sh.base()?.clone();
    let cfg = P2pConfig::default();
    let hyper = HyperNet::init(cfg.hyper_config(base.config()), base.checksum(), 17).map_err(err)?;
    let items = training_items(&base, 100, 21)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatched = 0;
    for (e, _) in &items {
        let set = hyper.generate(e).map_err(err)?;
        let prompt = random_prompt(&base, &mut rng);
        let plain = base.forward(&prompt, None).map_err(err)?;
        let adapted = base.forward(&prompt, Some(&set)).map_err(err)?;
        if plain.data().iter().zip(adapted.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            mismatched += 1;
        }
    }
    let refs: Vec<(&[f64], &SftExample)> = items.iter().take(BATCH).map(|(e, x)| (e.as_slice(), x)).collect();
    let (step0, _) = batch_loss(&base, &hyper, &refs).map_err(err)?;
    let examples: Vec<SftExample> = items.iter().take(BATCH).map(|(_, x)| x.clone()).collect();
    let plain = base.sft_loss(&examples, None).map_err(err)?;
    let gap = (step0 - plain).abs();
    Ok((
        mismatched == 0 && gap <= 1e-9,
        format!("{mismatched}/100 prompts differ, step-0 loss gap {gap:.1e}"),
    ))
}

fn random_adapters(base: &BaseWeights, rank: usize, rng: &mut ChaCha8Rng) -> Result<AdapterSet, String> {
    let mut entries = BTreeMap::new();
    for p in base.config().positions() {
        let (d_in, d_out) = p.module.dims(base.config());
        let a = Tensor::from_fn(&[rank, d_in], |_| rng.random_range(-0.1..0.1));
        let b = Tensor::from_fn(&[d_out, rank], |_| rng.random_range(-0.1..0.1));
        entries.insert(p, LoraFactors::new(a, b, 16.0).map_err(err)?);
    }
    AdapterSet::new(entries, base.checksum()).map_err(err)
}

fn c3_merge(sh: &mut Shared) -> Check {
    let base = sh.base()?.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let prompts: Vec<Vec<usize>> = (0..100).map(|_| random_prompt(&base, &mut rng)).collect();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let set = random_adapters(&base, 8, &mut rng)?;
        let merged = base.merged(&set).map_err(err)?;
        for p in &prompts {
            let a = base.forward(p, Some(&set)).map_err(err)?;
            let m = merged.forward(p, None).map_err(err)?;
            worst = worst.max(a.max_abs_diff(&m));
        }
    }
    Ok((worst < 1e-9, format!("max |unmerged - merged| {worst:.2e} over 2000 pairs")))
}

fn c4_personalization(sh: &mut Shared) -> Check {
    let base = sh.base()?.clone();
    let runs = sh.runs()?;
    let mut ok = true;
    let mut parts = Vec::new();
    for r in runs {
        let t = Instant::now();
        let plain = accuracy(&base, &r.test, Method::Base)?;
        let mt = mtlora_train(&base, &r.train[0].users, &LoraTrainConfig::mt_lora()).map_err(err)?;
        let mt_acc = accuracy(&base, &r.test, Method::MtLora(&mt))?;
        let secs = r.secs + t.elapsed().as_secs_f64();
        ok &= r.full >= 0.85 && plain <= 0.35 && mt_acc <= 0.45 && secs < 600.0;
        parts.push(format!(
            "seed {}: p2p {:.3} base {:.3} mt-lora {:.3} ({secs:.0}s)",
            r.seed, r.full, plain, mt_acc
        ));
    }
    Ok((ok, parts.join("; ")))
}

fn ood_run(base: &BaseWeights, seed: u64, style: ProfileStyle) -> Result<(f64, f64, usize), String> {
    let (task, _) = synth_task(&reference_population(seed, style)).map_err(err)?;
    let cfg = p2p_config(seed);
    let encoder = fit_encoder(std::slice::from_ref(&task), &cfg).map_err(err)?;
    let pc = cfg.profile_config(task.spec.kind);
    let ids: Vec<String> = task.users.iter().map(|u| u.user_id.clone()).collect();
    let points = task
        .users
        .iter()
        .map(|u| {
            let text = build_profile("", u, &pc)?.rendered;
            Ok(encoder.encode(&text)?.vector)
        })
        .collect::<p2p_core::Result<Vec<_>>>()
        .map_err(err)?;
    let split = ood_split(&ids, &points, 25, None, seed, false).map_err(err)?;
    let pick = |set: &[String]| -> Vec<TaskPopulation> {
        let keep: BTreeSet<&str> = set.iter().map(String::as_str).collect();
        vec![TaskPopulation {
            spec: task.spec.clone(),
            users: task.users.iter().filter(|u| keep.contains(u.user_id.as_str())).cloned().collect(),
        }]
    };
    let (train, test) = (pick(&split.train_ids), pick(&split.test_ids));
    let (hyper, enc, _) = p2p_core::experiments::train_p2p(base, &train, &cfg).map_err(err)?;
    let p2p = p2p_accuracy(base, &test, &hyper, &enc, &Ablation::None)?;
    let plain = accuracy(base, &test, Method::Base)?;
    Ok((p2p, plain, split.quarantined_ids.len()))
}

fn c5_ood(sh: &mut Shared) -> Check {
    let base = sh.base()?.clone();
    let (p2p, plain, q) = ood_run(&base, 0, ProfileStyle::Traits)?;
    let (op, ob, _) = ood_run(&base, 0, ProfileStyle::Opaque)?;
    Ok((
        p2p >= plain + 0.10,
        format!("traits: p2p {p2p:.3} vs base {plain:.3} ({q} quarantined); opaque, report only: p2p {op:.3} vs base {ob:.3}"),
    ))
}

fn c6_efficiency(sh: &mut Shared) -> Check {
    let base = sh.base()?.clone();
    let runs = sh.runs()?;
    let run = &runs[0];
    let (task, _) = synth_task(&reference_population(run.seed, ProfileStyle::None)).map_err(err)?;
    let users: Vec<UserRecord> = task.users.into_iter().take(50).collect();
    let pc = p2p_config(run.seed).profile_config(TaskKind::Classification);
    let scratch = tempfile::tempdir().map_err(err)?;
    let report = bench_generation(
        &base,
        &run.hyper,
        &run.encoder,
        &users,
        &pc,
        &LoraTrainConfig::oppu(),
        &BenchConfig::default(),
        scratch.path(),
    )
    .map_err(err)?;
    let x: Vec<f64> = (1..=report.rows.len()).map(|i| i as f64).collect();
    let y: Vec<f64> = report.rows.iter().map(|r| r.oppu_cumulative_s).collect();
    let r2 = oracle::linear_r2_oracle(&x, &y);
    let ok = report.p2p_median_s * 10.0 <= report.oppu_median_s
        && report.p2p_max_s <= 2.0 * report.p2p_median_s
        && report.oppu_fit.slope > 0.0
        && report.oppu_fit.r2 > 0.99
        && (r2 - report.oppu_fit.r2).abs() < 1e-9;
    Ok((
        ok,
        format!(
            "p2p median {:.2}ms max {:.2}ms, oppu median {:.0}ms ({:.0}x), oppu R2 {:.4} (oracle {r2:.4})",
            report.p2p_median_s * 1e3,
            report.p2p_max_s * 1e3,
            report.oppu_median_s * 1e3,
            report.speedup,
            report.oppu_fit.r2
        ),
    ))
}

fn c7_ablations(sh: &mut Shared) -> Check {
    let base = sh.base()?.clone();
    let runs = sh.runs()?;
    let mut ok = true;
    let mut parts = Vec::new();
    for r in runs {
        let acc = |mode: &str| -> Result<f64, String> {
            let ab = Ablation::from_mode(mode, r.seed).map_err(err)?;
            p2p_accuracy(&base, &r.test, &r.hyper, &r.encoder, &ab)
        };
        let shuffle = acc("shuffle_profile")?;
        let summary = acc("summary_only")?;
        let retrieved = acc("retrieved_only")?;
        ok &= r.full - shuffle >= 0.10 && (summary - r.full).abs() <= 0.05 && retrieved < summary;
        parts.push(format!(
            "seed {}: full {:.3} shuffle {shuffle:.3} summary {summary:.3} retrieved {retrieved:.3}",
            r.seed, r.full
        ));
    }
    Ok((ok, parts.join("; ")))
}

fn sweep_config() -> SweepConfig {
    SweepConfig {
        p2p: p2p_config(0),
        ..SweepConfig::default()
    }
}

fn c8_diversity(sh: &mut Shared) -> Check {
    let base = sh.base()?.clone();
    let cfg = sweep_config();
    // Two clusters at the 100-user budget is also the 100-user point of
    // the users axis.
    let clusters = sweep(&base, SweepAxis::Clusters, &[2, 8], &cfg).map_err(err)?;
    let users = sweep(&base, SweepAxis::Users, &[200], &cfg).map_err(err)?;
    let at = |pts: &[p2p_core::sweep::SweepPoint], x: usize| pts.iter().find(|p| p.x == x).map(|p| p.value).unwrap_or(f64::NAN);
    let (two, eight, doubled) = (at(&clusters, 2), at(&clusters, 8), at(&users, 200));
    Ok((
        eight - two >= 0.05 && (doubled - two).abs() < 0.05,
        format!("OOD accuracy: 2 clusters {two:.3}, 8 clusters {eight:.3}, 2 clusters x 200 users {doubled:.3}"),
    ))
}

fn c9_retrieval_k(sh: &mut Shared) -> Check {
    let base = sh.base()?.clone();
    let pts = sweep(&base, SweepAxis::RetrievalK, &[0, 2, 8], &sweep_config()).map_err(err)?;
    let (p, r) = (range_of(&pts, "p2p"), range_of(&pts, "rag"));
    let show = |m: &str| {
        pts.iter()
            .filter(|x| x.method == m)
            .map(|x| format!("k={}:{:.3}", x.x, x.value))
            .collect::<Vec<_>>()
            .join(" ")
    };
    Ok((p < r, format!("p2p range {p:.3} [{}], rag range {r:.3} [{}]", show("p2p"), show("rag"))))
}

fn c10_oracles(_sh: &mut Shared) -> Check {
    let t = Instant::now();
    let mut reports: Vec<(oracle::OracleReport, f64)> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(10);

    for case in 0..50 {
        let (d_in, d_out, r) = (rng.random_range(2..20), rng.random_range(2..20), rng.random_range(1..3));
        let mut m = |rows: usize, cols: usize| -> Vec<Vec<f64>> {
            (0..rows).map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
        };
        let (w0, a, b) = (m(d_out, d_in), m(r, d_in), m(d_out, r));
        let x: Vec<f64> = m(1, d_in).remove(0);
        let t = |v: &Vec<Vec<f64>>| Tensor::new(&[v.len(), v[0].len()], v.concat()).expect("rectangular");
        let f = LoraFactors::new(t(&a), t(&b), 4.0).map_err(err)?;
        let w = t(&w0);
        let delta = delta_apply(&x, &f).map_err(err)?;
        let unmerged: Vec<f64> = (0..d_out)
            .map(|o| w.row(o).iter().zip(&x).map(|(p, q)| p * q).sum::<f64>() + delta[o])
            .collect();
        let mw = merge(&w, &f).map_err(err)?;
        let merged: Vec<f64> = (0..d_out).map(|o| mw.row(o).iter().zip(&x).map(|(p, q)| p * q).sum()).collect();
        let want = oracle::dense_lora_oracle(&w0, &a, &b, 4.0, &x).map_err(|e| format!("{e:?}"))?;
        reports.push((oracle::OracleReport::worst(format!("lora unmerged {case}"), &unmerged, &want), 1e-12));
        reports.push((oracle::OracleReport::worst(format!("lora merged {case}"), &merged, &want), 1e-12));
    }

    let pop = synth_population(&SynthConfig::new(3, 4, 10, TaskKind::Generation, 4)).map_err(err)?;
    for (i, u) in pop.users.iter().enumerate() {
        let docs: Vec<String> = u.history.iter().map(item_text).collect();
        let refs: Vec<&str> = docs.iter().map(String::as_str).collect();
        let query = &pop.users[(i + 1) % pop.users.len()].history[0].input;
        let main = Bm25Index::new(&docs, BM25_K1, BM25_B).scores(query);
        let want = oracle::bm25_oracle(query, &refs, BM25_K1, BM25_B);
        reports.push((oracle::OracleReport::worst(format!("bm25 user {i}"), &main, &want), 1e-12));
        let outs: Vec<&str> = u.history.iter().map(|h| h.output.as_str()).collect();
        let main = output_term_scores(&outs);
        let want = oracle::tfidf_oracle(&outs);
        let same_terms = main.iter().map(|(t, _)| t).eq(want.iter().map(|(t, _)| t));
        let ms: Vec<f64> = main.iter().map(|(_, s)| *s).collect();
        let ws: Vec<f64> = want.iter().map(|(_, s)| *s).collect();
        let rep = if same_terms {
            oracle::OracleReport::worst(format!("tfidf user {i}"), &ms, &ws)
        } else {
            oracle::OracleReport::new(format!("tfidf user {i} term order"), 0.0, 1.0)
        };
        reports.push((rep, 1e-12));
        let (c, r) = (&u.history[0].output, &u.history[1].output);
        let (ct, rt) = (rouge_tokens(c), rouge_tokens(r));
        reports.push((
            oracle::OracleReport::new(format!("lcs user {i}"), lcs_len(&ct, &rt) as f64, oracle::lcs_oracle(&ct, &rt) as f64),
            0.0,
        ));
        reports.push((
            oracle::OracleReport::new(format!("rouge-l user {i}"), rouge_l(c, r), oracle::rouge_l_oracle(&ct, &rt)),
            1e-12,
        ));
    }
    for case in 0..30 {
        let a: Vec<u8> = (0..rng.random_range(0..30)).map(|_| rng.random_range(0..4)).collect();
        let b: Vec<u8> = (0..rng.random_range(0..30)).map(|_| rng.random_range(0..4)).collect();
        reports.push((
            oracle::OracleReport::new(format!("lcs random {case}"), lcs_len(&a, &b) as f64, oracle::lcs_oracle(&a, &b) as f64),
            0.0,
        ));
    }

    for case in 0..20 {
        let n = rng.random_range(4..40);
        let k = rng.random_range(2..5);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        labels.shuffle(&mut rng);
        let main = silhouette(&pts, &labels).map_err(err)?;
        let want = oracle::silhouette_oracle(&pts, &labels).map_err(|e| format!("{e:?}"))?;
        reports.push((oracle::OracleReport::new(format!("silhouette {case}"), main, want), 1e-12));
    }

    // Gradient of a small graph: softmax cross-entropy over gelu(W x).
    let (rows, cols) = (5, 4);
    let x = Tensor::from_fn(&[1, cols], |_| rng.random_range(-1.0..1.0));
    let w0: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss_grad = |w: &[f64]| -> p2p_core::tensor::Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let wv = g.param(Tensor::new(&[rows, cols], w.to_vec())?);
        let xv = g.constant(x.clone());
        let h = g.matmul_t(xv, wv)?;
        let a = g.gelu(h)?;
        let l = g.cross_entropy(a, &[Some(2)])?;
        let v = g.value(l).item();
        let mut grads = g.backward(l)?;
        Ok((v, grads.take(wv).expect("param gradient").into_data()))
    };
    let (_, analytic) = loss_grad(&w0).map_err(err)?;
    let coords: Vec<usize> = (0..w0.len()).collect();
    let numeric = oracle::central_difference_oracle(|w| loss_grad(w).expect("finite").0, &w0, &coords, 1e-5);
    reports.push((oracle::OracleReport::worst("fd graph", &analytic, &numeric), 1e-8));
    let main_fd = finite_difference_check(loss_grad, &w0, 1e-5, None).map_err(err)?;
    reports.push((oracle::OracleReport::new("fd helper rel error", main_fd.max_rel_error, 0.0), 1e-6));

    let failed: Vec<String> = reports
        .iter()
        .filter(|(r, tol)| !r.within(*tol))
        .map(|(r, _)| r.to_json())
        .collect();
    let secs = t.elapsed().as_secs_f64();
    let worst = reports.iter().map(|(r, _)| r.abs_diff).fold(0.0, f64::max);
    Ok((
        failed.is_empty() && secs < 300.0,
        if failed.is_empty() {
            format!("{} comparisons, worst abs diff {worst:.1e}, {secs:.1}s", reports.len())
        } else {
            format!("{} of {} off: {}", failed.len(), reports.len(), failed.join(" "))
        },
    ))
}

fn p2p(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_p2p"))
        .current_dir(dir)
        .args(["--config", "tiny.cfg", "--seed", "7", "--jobs", "1", "--no-timing"])
        .args(args)
        .env_remove("P2P_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .map_err(err)?;
    if !out.status.success() {
        return Err(format!("p2p {} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

fn files_under(root: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).map_err(err)? {
            let p = e.map_err(err)?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).map_err(err)?.display().to_string();
                out.insert(rel, std::fs::read(&p).map_err(err)?);
            }
        }
    }
    Ok(out)
}

fn c11_determinism(_sh: &mut Shared) -> Check {
    const CONFIG: &str = "clusters = 2\nusers_per_cluster = 6\nhistory_len = 6\nbase_steps = 20\nsteps = 20\n";
    let mut trees = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(err)?;
        std::fs::write(dir.path().join("tiny.cfg"), CONFIG).map_err(err)?;
        let d = dir.path();
        let data = ["--data", "out/users.jsonl"];
        let split = ["--split", "out/split.json"];
        p2p(d, &["datagen"])?;
        p2p(d, &[&["split"][..], &data].concat())?;
        p2p(d, &[&["train"][..], &data, &split].concat())?;
        p2p(d, &[&["generate"][..], &data, &split, &["--model", "out"]].concat())?;
        p2p(d, &[&["eval"][..], &data, &split, &["--model", "out", "--per-user"]].concat())?;
        trees.push(files_under(&d.join("out"))?);
    }
    let (a, b) = (&trees[0], &trees[1]);
    let differing: Vec<&String> = a
        .keys()
        .chain(b.keys())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|k| a.get(*k) != b.get(*k))
        .collect();
    Ok((
        differing.is_empty() && !a.is_empty(),
        if differing.is_empty() {
            format!("{} files byte-identical across two runs", a.len())
        } else {
            format!("differing: {differing:?}")
        },
    ))
}

fn partition_ok(split: &SplitResult, ids: &[String]) -> bool {
    let mut seen = BTreeSet::new();
    let all = split.train_ids.iter().chain(&split.test_ids).chain(&split.quarantined_ids);
    for id in all {
        if !seen.insert(id.as_str()) {
            return false;
        }
    }
    seen.len() == ids.len() && ids.iter().all(|i| seen.contains(i.as_str()))
}

fn c12_splits(_sh: &mut Shared) -> Check {
    let mut wins = 0;
    let mut contract = true;
    for seed in 0..20u64 {
        let pop = synth_population(
            &SynthConfig::new(3, 20, 8, TaskKind::Classification, seed).with_style(ProfileStyle::Traits),
        )
        .map_err(err)?;
        let task = TaskPopulation {
            spec: pop.task.clone(),
            users: pop.users.clone(),
        };
        let cfg = P2pConfig::default().seeded(seed);
        let encoder = fit_encoder(std::slice::from_ref(&task), &cfg).map_err(err)?;
        let pc = ProfileConfig::new(task.spec.kind);
        let ids: Vec<String> = task.users.iter().map(|u| u.user_id.clone()).collect();
        let points = task
            .users
            .iter()
            .map(|u| Ok(encoder.encode(&build_profile("", u, &pc)?.rendered)?.vector))
            .collect::<p2p_core::Result<Vec<_>>>()
            .map_err(err)?;
        let n_test = ids.len() / 5;
        let ood = ood_split(&ids, &points, n_test, None, seed, false).map_err(err)?;
        let rnd = random_split(&ids, &points, n_test, seed).map_err(err)?;
        contract &= partition_ok(&ood, &ids) && partition_ok(&rnd, &ids) && rnd.quarantined_ids.is_empty();
        contract &= ood.test_ids.len() == n_test && rnd.test_ids.len() == n_test;
        if nearest_train_distance(&ood, &ids, &points) > nearest_train_distance(&rnd, &ids, &points) {
            wins += 1;
        }
    }
    Ok((
        contract && wins >= 16,
        format!("partitions {}, OOD distance above random on {wins}/20 seeds", if contract { "ok" } else { "BROKEN" }),
    ))
}

type Criterion = (u32, &'static str, fn(&mut Shared) -> Check);

fn main() {
    let criteria: [Criterion; 12] = [
        (1, "gradient check", c1_gradients),
        (2, "zero-init identity", c2_zero_init),
        (3, "merged LoRA equivalence", c3_merge),
        (4, "personalization gain", c4_personalization),
        (5, "OOD generalization", c5_ood),
        (6, "generation efficiency", c6_efficiency),
        (7, "ablation ordering", c7_ablations),
        (8, "diversity over quantity", c8_diversity),
        (9, "retrieval-k stability", c9_retrieval_k),
        (10, "oracle suite", c10_oracles),
        (11, "pipeline determinism", c11_determinism),
        (12, "split contracts", c12_splits),
    ];
    let wanted: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut shared = Shared::default();
    let mut failed = Vec::new();
    for (n, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let (pass, detail) = match f(&mut shared) {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {n:>2} {name}: {detail} ({:.1}s)", t.elapsed().as_secs_f64());
        if !pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
