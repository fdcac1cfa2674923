//! Deployment cost: producing an adapter for a new user with the trained
//! hypernetwork versus fine-tuning one per user.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::base_lm::BaseWeights;
use crate::baselines::{oppu_train, LoraTrainConfig};
use crate::corpus::UserRecord;
use crate::embedder::ProfileEncoder;
use crate::error::{Error, Result};
use crate::hypernet::HyperNet;
use crate::lora::AdapterSet;
use crate::profile::{build_profile, ProfileConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Each measurement is taken this many times; the median is kept.
    pub repeats: usize,
    /// Untimed users processed first by each method.
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { repeats: 3, warmup: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub user_id: String,
    pub p2p_s: f64,
    pub oppu_s: f64,
    pub p2p_cumulative_s: f64,
    pub oppu_cumulative_s: f64,
}

/// Slope and coefficient of determination of a least-squares line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> Result<LineFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Invalid("a line fit needs at least two paired points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("all x values are equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(LineFit { slope, intercept, r2 })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
    pub p2p_median_s: f64,
    pub p2p_max_s: f64,
    pub oppu_median_s: f64,
    /// Median OPPU time over median P2P time.
    pub speedup: f64,
    pub oppu_fit: LineFit,
    pub p2p_fit: LineFit,
    /// One-time hypernetwork training cost, when known.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub p2p_train_s: Option<f64>,
    /// Users after which the training cost is paid back.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub break_even_users: Option<f64>,
}

fn timed_median<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<f64> {
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    Ok(median(&times))
}

/// Profile, embed, generate and save the adapter of one user.
pub fn p2p_adapter_for(
    hyper: &HyperNet,
    encoder: &dyn ProfileEncoder,
    user: &UserRecord,
    profile: &ProfileConfig,
    out: &Path,
) -> Result<AdapterSet> {
    let text = build_profile("", user, profile)?.rendered;
    let e = encoder.encode(&text)?;
    let set = hyper.generate(&e.vector)?;
    set.save(out)?;
    Ok(set)
}

/// Times both ways of obtaining an adapter for every user in `users`.
/// Adapter files are written to `scratch` and overwritten per user.
#[allow(clippy::too_many_arguments)]
pub fn bench_generation(
    base: &BaseWeights,
    hyper: &HyperNet,
    encoder: &dyn ProfileEncoder,
    users: &[UserRecord],
    profile: &ProfileConfig,
    oppu: &LoraTrainConfig,
    config: &BenchConfig,
    scratch: &Path,
) -> Result<BenchReport> {
    if users.is_empty() {
        return Err(Error::EmptyInput);
    }
    if config.repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    let p2p_path = scratch.join("bench_p2p.p2pad");
    let oppu_path = scratch.join("bench_oppu.p2pad");
    let p2p_once = |u: &UserRecord| p2p_adapter_for(hyper, encoder, u, profile, &p2p_path);
    let oppu_once = |u: &UserRecord| oppu_train(base, u, oppu).and_then(|s| s.save(&oppu_path));
    for u in users.iter().cycle().take(config.warmup) {
        p2p_once(u)?;
        oppu_once(u)?;
    }
    let mut rows: Vec<BenchRow> = Vec::with_capacity(users.len());
    let (mut pc, mut oc) = (0.0, 0.0);
    for u in users {
        let p = timed_median(config.repeats, || p2p_once(u))?;
        let o = timed_median(config.repeats, || oppu_once(u))?;
        pc += p;
        oc += o;
        rows.push(BenchRow {
            user_id: u.user_id.clone(),
            p2p_s: p,
            oppu_s: o,
            p2p_cumulative_s: pc,
            oppu_cumulative_s: oc,
        });
    }
    let p: Vec<f64> = rows.iter().map(|r| r.p2p_s).collect();
    let o: Vec<f64> = rows.iter().map(|r| r.oppu_s).collect();
    let x: Vec<f64> = (1..=rows.len()).map(|i| i as f64).collect();
    let pcum: Vec<f64> = rows.iter().map(|r| r.p2p_cumulative_s).collect();
    let ocum: Vec<f64> = rows.iter().map(|r| r.oppu_cumulative_s).collect();
    let (oppu_fit, p2p_fit) = if rows.len() >= 2 {
        (fit_line(&x, &ocum)?, fit_line(&x, &pcum)?)
    } else {
        let one = |y: f64| LineFit {
            slope: y,
            intercept: 0.0,
            r2: 1.0,
        };
        (one(o[0]), one(p[0]))
    };
    let p2p_median_s = median(&p);
    let oppu_median_s = median(&o);
    Ok(BenchReport {
        config: *config,
        p2p_median_s,
        p2p_max_s: p.iter().copied().fold(0.0, f64::max),
        oppu_median_s,
        speedup: oppu_median_s / p2p_median_s,
        oppu_fit,
        p2p_fit,
        rows,
        p2p_train_s: None,
        break_even_users: None,
    })
}

impl BenchReport {
    /// Records the one-time training cost and the number of users after
    /// which it is amortized.
    pub fn with_training_cost(mut self, train_s: f64) -> Self {
        let saving = self.oppu_median_s - self.p2p_median_s;
        self.p2p_train_s = Some(train_s);
        self.break_even_users = (saving > 0.0).then(|| train_s / saving);
        self
    }

    /// `user_id,p2p_s,oppu_s,p2p_cumulative_s,oppu_cumulative_s` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("user_id,p2p_s,oppu_s,p2p_cumulative_s,oppu_cumulative_s\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.user_id, r.p2p_s, r.oppu_s, r.p2p_cumulative_s, r.oppu_cumulative_s
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line() {
        let f = fit_line(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        assert!(fit_line(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
