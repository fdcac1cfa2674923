//! Prints `hash<TAB>text` for every profile the pipeline will ask an
//! external encoder about, so embeddings can be computed offline.

use std::collections::BTreeSet;
use std::path::PathBuf;

use anyhow::Result;
use clap::Parser;
use p2p_cli::data::load_populations;
use p2p_core::embedder::{hash_profiles, source_hash};
use p2p_core::profile::{DEFAULT_K, MAX_PROFILE_CHARS};
use p2p_core::trainer::{ProfileCache, ProfileMode};

#[derive(Parser)]
#[command(name = "p2p-hash-profiles", version)]
struct Args {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    tasks: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = MAX_PROFILE_CHARS)]
    max_chars: usize,
    /// per_query also lists the profile built for every target query.
    #[arg(long, default_value = "per_query")]
    mode: String,
}

fn main() -> Result<()> {
    p2p_cli::init_logging();
    let args = Args::parse();
    let mode: ProfileMode = args.mode.parse()?;
    let pops = load_populations(&args.data, args.tasks.as_deref())?;
    let mut seen = BTreeSet::new();
    let mut texts = Vec::new();
    for t in &pops {
        let pc = p2p_core::profile::ProfileConfig {
            k: args.k,
            max_chars: args.max_chars,
            kind: t.spec.kind,
        };
        let cache = ProfileCache::new(&t.users, pc, mode);
        for (i, u) in t.users.iter().enumerate() {
            let mut queries = vec![""];
            if mode == ProfileMode::PerQuery {
                queries.extend(u.targets().iter().map(|x| x.input.as_str()));
            }
            for q in queries {
                let Ok(p) = cache.profile(i, q) else {
                    log::warn!("skipping user {}: nothing to profile", u.user_id);
                    break;
                };
                if seen.insert(source_hash(&p.rendered, args.max_chars)) {
                    texts.push(p.rendered);
                }
            }
        }
    }
    print!("{}", hash_profiles(&texts, args.max_chars));
    Ok(())
}
