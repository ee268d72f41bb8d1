//! Time and memory benchmark of the curvature modes on a family of
//! size-preserving convolutional networks.

use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::arch::bench_conv_net;
use crate::curvature::{estimate_floats, ggn_backprop_with, CurvatureOptions, HessianMode};
use crate::error::{Error, Result};
use crate::loss::LossModel;
use crate::net::{Batch, Network};
use crate::posterior::{init_params, InitScheme};
use crate::rng;

pub const BENCH_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRecord {
    pub mode: String,
    pub side: usize,
    pub pixels: usize,
    /// `max_l |x_l|`.
    pub r_m: usize,
    /// `sum_l |x_l|`.
    pub r_s: usize,
    pub w_s: usize,
    /// Median wall time of one curvature pass; `None` when skipped.
    pub seconds: Option<f64>,
    /// Analytic peak float count of one pass.
    pub floats: u64,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeFit {
    pub mode: String,
    /// Least-squares slope of `log floats` against `log pixels`.
    pub memory_exponent: Option<f64>,
    pub time_exponent: Option<f64>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One record per `(mode, side)`; runs exceeding the memory guard are
/// recorded as skipped.
pub fn bench_hessian(
    modes: &[HessianMode],
    sides: &[usize],
    repeats: usize,
    seed: u64,
    guard_floats: u64,
) -> Result<Vec<BenchRecord>> {
    if sides.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("sizes must be strictly ascending".into()));
    }
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be at least 1".into()));
    }
    let loss = LossModel::GaussianMse { sigma_d: 1.0 };
    let opts = CurvatureOptions { guard_floats };
    let mut out = Vec::new();
    for mode in modes {
        for &side in sides {
            let net = Network::new(bench_conv_net(BENCH_CHANNELS, side))?;
            let theta = init_params(&net, InitScheme::FanInUniform { seed });
            let mut r = rng::stream(seed, side as u64);
            let x: Vec<f64> = (0..net.input_dim()).map(|_| r.random_range(0.0..1.0)).collect();
            let floats = estimate_floats(&net, *mode);
            let mut rec = BenchRecord {
                mode: mode.name().into(),
                side,
                pixels: side * side,
                r_m: net.max_feature_size(),
                r_s: net.total_feature_size(),
                w_s: net.num_params(),
                seconds: None,
                floats,
                skipped: floats > guard_floats,
            };
            if !rec.skipped {
                let mut times = Vec::with_capacity(repeats);
                for _ in 0..repeats {
                    let t = Instant::now();
                    ggn_backprop_with(&net, &theta, &Batch::autoencoding(vec![&x]), *mode, &loss, &opts)?;
                    times.push(t.elapsed().as_secs_f64().max(1e-9));
                }
                rec.seconds = Some(median(times));
            }
            out.push(rec);
        }
    }
    Ok(out)
}

fn slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Log-log slopes per mode over the non-skipped records, in first-seen mode
/// order.
pub fn fit_slopes(records: &[BenchRecord]) -> Vec<SlopeFit> {
    let mut modes: Vec<&str> = Vec::new();
    for r in records {
        if !modes.contains(&r.mode.as_str()) {
            modes.push(&r.mode);
        }
    }
    modes
        .into_iter()
        .map(|m| {
            let rows: Vec<&BenchRecord> = records.iter().filter(|r| r.mode == m && !r.skipped).collect();
            let mem: Vec<(f64, f64)> = rows.iter().map(|r| ((r.pixels as f64).ln(), (r.floats as f64).ln())).collect();
            let time: Vec<(f64, f64)> = rows
                .iter()
                .filter_map(|r| r.seconds.map(|s| ((r.pixels as f64).ln(), s.ln())))
                .collect();
            SlopeFit {
                mode: m.into(),
                memory_exponent: slope(&mem),
                time_exponent: slope(&time),
            }
        })
        .collect()
}

/// Deterministic part of the records: everything except wall time.
pub fn records_to_csv(records: &[BenchRecord]) -> String {
    let mut s = String::from("mode,side,pixels,r_m,r_s,w_s,peak_floats,status\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.mode,
            r.side,
            r.pixels,
            r.r_m,
            r.r_s,
            r.w_s,
            r.floats,
            if r.skipped { "skipped" } else { "ok" }
        ));
    }
    s
}

/// Wall-time medians, kept apart from [`records_to_csv`] because they vary
/// between runs.
pub fn timings_to_csv(records: &[BenchRecord]) -> String {
    let mut s = String::from("mode,side,median_seconds\n");
    for r in records {
        let t = r.seconds.map(|t| format!("{t:.6e}")).unwrap_or_default();
        s.push_str(&format!("{},{},{t}\n", r.mode, r.side));
    }
    s
}

/// Memory exponents per mode.
pub fn slopes_to_csv(fits: &[SlopeFit]) -> String {
    let mut s = String::from("mode,memory_exponent\n");
    for fit in fits {
        let m = fit.memory_exponent.map(|x| format!("{x:.4}")).unwrap_or_default();
        s.push_str(&format!("{},{m}\n", fit.mode));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn approx_floats_quadruple_with_side() {
        let a = estimate_floats(&Network::new(bench_conv_net(3, 64)).unwrap(), HessianMode::ApproxDiagonal);
        let b = estimate_floats(&Network::new(bench_conv_net(3, 128)).unwrap(), HessianMode::ApproxDiagonal);
        let r = b as f64 / a as f64;
        assert!((r - 4.0).abs() < 0.2, "ratio {r}");
    }

    #[test]
    fn exact_floats_grow_sixteenfold() {
        let a = estimate_floats(&Network::new(bench_conv_net(3, 16)).unwrap(), HessianMode::ExactDiagonal);
        let b = estimate_floats(&Network::new(bench_conv_net(3, 32)).unwrap(), HessianMode::ExactDiagonal);
        let r = b as f64 / a as f64;
        assert!((r - 16.0).abs() < 1.0, "ratio {r}");
    }

    #[test]
    fn skipped_rows_and_slopes() {
        let recs = bench_hessian(&[HessianMode::ApproxDiagonal, HessianMode::ExactDiagonal], &[4, 8], 1, 0, 20_000).unwrap();
        assert_eq!(recs.len(), 4);
        assert!(recs.iter().any(|r| r.skipped && r.mode == "exact"));
        assert!(recs.iter().all(|r| r.floats > 0));
        let fits = fit_slopes(&recs);
        assert!(fits[0].memory_exponent.unwrap() < 1.2);
        assert!(bench_hessian(&[HessianMode::ApproxDiagonal], &[8, 4], 1, 0, 1 << 30).is_err());
    }
}
