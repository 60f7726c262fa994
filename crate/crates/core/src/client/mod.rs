//! Training driver: minibatches in, dotprod and adjust broadcasts out.

mod objective;
mod shards;
mod train;

use std::fs;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shard::PartialDotResult;

pub use objective::{batch_objective, objective};
pub use shards::ShardSet;
pub use train::{epoch_spec, step_seed, train, train_step, LearningRate, StepStats, TrainStats};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub shards: usize,
    /// Maximum window `B`; contexts hold at most `2B` words.
    pub window: u32,
    pub negatives: u32,
    pub batch_size: usize,
    pub epochs: u32,
    pub alpha: f64,
    /// Floor of the learning rate; `alpha * 1e-4` when unset.
    pub alpha_min: Option<f64>,
    pub subsample: f64,
    pub min_count: u64,
    pub seed: u64,
    pub interleaved: bool,
    /// Draw `b` uniformly from `1..=B` per position; otherwise always `B`.
    pub dynamic_window: bool,
    /// Client threads, each training on its own corpus partition.
    pub threads: usize,
    pub timeout_ms: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 100,
            shards: 1,
            window: 5,
            negatives: 5,
            batch_size: 50,
            epochs: 5,
            alpha: 0.025,
            alpha_min: None,
            subsample: 1e-3,
            min_count: 5,
            seed: 1,
            interleaved: true,
            dynamic_window: true,
            threads: 1,
            timeout_ms: 60_000,
        }
    }
}

impl TrainConfig {
    pub fn alpha_min(&self) -> f64 {
        self.alpha_min.unwrap_or(self.alpha * 1e-4)
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.shards == 0 || self.shards > self.dim {
            return fail(format!(
                "need 1 <= shards <= dim, got shards={} dim={}",
                self.shards, self.dim
            ));
        }
        if self.window == 0 {
            return fail("window must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        if self.threads == 0 {
            return fail("threads must be at least 1".into());
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return fail(format!("alpha must be positive, got {}", self.alpha));
        }
        let floor = self.alpha_min();
        if !(floor.is_finite() && floor >= 0.0 && floor <= self.alpha) {
            return fail(format!("alpha_min must lie in [0, alpha], got {floor}"));
        }
        if !(self.subsample.is_finite() && self.subsample >= 0.0) {
            return fail(format!(
                "subsample threshold must be non-negative, got {}",
                self.subsample
            ));
        }
        if self.min_count == 0 {
            return fail("min_count must be at least 1".into());
        }
        Ok(())
    }
}

/// Logistic function evaluated in f64, stable for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise sum of per-shard partial dot products, accumulated in f64 in
/// shard order and rounded once to f32.
pub fn aggregate_partials(results: &[PartialDotResult]) -> Result<PartialDotResult> {
    let (first, rest) = results
        .split_first()
        .ok_or_else(|| Error::Protocol("no shard responses to aggregate".into()))?;
    let mut plus: Vec<f64> = first.f_plus.iter().map(|&x| x as f64).collect();
    let mut minus: Vec<f64> = first.f_minus.iter().map(|&x| x as f64).collect();
    for (s, r) in rest.iter().enumerate() {
        if r.f_plus.len() != plus.len() || r.f_minus.len() != minus.len() {
            return Err(Error::Protocol(format!(
                "shard {} returned {}+{} partials, shard 0 returned {}+{}",
                s + 1,
                r.f_plus.len(),
                r.f_minus.len(),
                plus.len(),
                minus.len()
            )));
        }
        for (a, &b) in plus.iter_mut().zip(&r.f_plus) {
            *a += b as f64;
        }
        for (a, &b) in minus.iter_mut().zip(&r.f_minus) {
            *a += b as f64;
        }
    }
    Ok(PartialDotResult {
        f_plus: plus.into_iter().map(|x| x as f32).collect(),
        f_minus: minus.into_iter().map(|x| x as f32).collect(),
    })
}

/// Per-pair and per-negative weights, learning rate included.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientCoefficients {
    pub g_plus: Vec<f32>,
    pub g_minus: Vec<f32>,
}

/// `G+ = alpha (1 - sigma(F+))`, `G- = -alpha sigma(F-)`.
pub fn coefficients(f: &PartialDotResult, alpha: f64) -> GradientCoefficients {
    GradientCoefficients {
        g_plus: f
            .f_plus
            .iter()
            .map(|&x| (alpha * (1.0 - sigmoid(x as f64))) as f32)
            .collect(),
        g_minus: f
            .f_minus
            .iter()
            .map(|&x| (-alpha * sigmoid(x as f64)) as f32)
            .collect(),
    }
}

/// Parses a shard endpoint list: one `host:port` per line, in shard order.
/// Blank lines and `#` comments are ignored.
pub fn parse_endpoints(text: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line
            .rsplit_once(':')
            .is_none_or(|(host, port)| host.is_empty() || port.parse::<u16>().is_err())
        {
            return Err(Error::parse(
                i + 1,
                format!("expected host:port, got {line:?}"),
            ));
        }
        out.push(line.to_string());
    }
    if out.is_empty() {
        return Err(Error::Config("endpoint list is empty".into()));
    }
    Ok(out)
}

pub fn read_endpoints(path: impl AsRef<Path>) -> Result<Vec<String>> {
    parse_endpoints(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Reference values computed with 50-digit arithmetic.
    const SIGMOID_REFERENCE: [(f64, f64); 9] = [
        (-30.0, 9.357622968839299e-14),
        (-10.0, 4.5397868702434395e-05),
        (-2.5, 0.07585818002124355),
        (-0.1, 0.47502081252106),
        (0.0, 0.5),
        (0.3, 0.574442516811659),
        (1.0, 0.7310585786300049),
        (7.0, 0.9990889488055994),
        (30.0, 0.9999999999999064),
    ];

    #[test]
    fn sigmoid_matches_reference() {
        for (x, want) in SIGMOID_REFERENCE {
            assert!((sigmoid(x) - want).abs() <= 1e-12, "sigma({x})");
        }
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
    }

    #[test]
    fn aggregation() {
        let a = PartialDotResult {
            f_plus: vec![1.0, 2.0],
            f_minus: vec![],
        };
        let b = PartialDotResult {
            f_plus: vec![3.0, 4.0],
            f_minus: vec![],
        };
        assert_eq!(aggregate_partials(std::slice::from_ref(&a)).unwrap(), a);
        assert_eq!(
            aggregate_partials(&[a.clone(), b]).unwrap().f_plus,
            vec![4.0, 6.0]
        );
        let short = PartialDotResult {
            f_plus: vec![1.0],
            f_minus: vec![],
        };
        assert!(matches!(
            aggregate_partials(&[a, short]),
            Err(Error::Protocol(_))
        ));
        assert!(aggregate_partials(&[]).is_err());
    }

    #[test]
    fn coefficients_at_zero_and_saturation() {
        let g = coefficients(
            &PartialDotResult {
                f_plus: vec![0.0, 1e30],
                f_minus: vec![0.0, -1e30],
            },
            0.025,
        );
        assert_eq!(g.g_plus, vec![0.0125, 0.0]);
        assert_eq!(g.g_minus[0], -0.0125);
        assert_eq!(g.g_minus[1], 0.0);
    }

    #[test]
    fn endpoints() {
        let eps = parse_endpoints("# shards\n127.0.0.1:7000\n\nhost-b:7001 # second\n").unwrap();
        assert_eq!(eps, vec!["127.0.0.1:7000", "host-b:7001"]);
        assert!(parse_endpoints("localhost").is_err());
        assert!(parse_endpoints("a:99999").is_err());
        assert!(parse_endpoints("\n# nothing\n").is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig {
                shards: 0,
                ..Default::default()
            },
            TrainConfig {
                shards: 101,
                ..Default::default()
            },
            TrainConfig {
                alpha: 0.0,
                ..Default::default()
            },
            TrainConfig {
                alpha_min: Some(1.0),
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainConfig {
                subsample: -1.0,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        assert!((TrainConfig::default().alpha_min() - 2.5e-6).abs() < 1e-18);
    }

    proptest! {
        #[test]
        fn sigmoid_symmetry_and_monotone(x in -50.0f64..50.0, dx in 1e-6f64..1.0) {
            prop_assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
            prop_assert!(sigmoid(x + dx) >= sigmoid(x));
        }

        #[test]
        fn coefficients_bounded(fp in proptest::collection::vec(-1e3f32..1e3, 0..20),
                                fm in proptest::collection::vec(-1e3f32..1e3, 0..20),
                                alpha in 1e-6f64..1.0) {
            let g = coefficients(&PartialDotResult { f_plus: fp, f_minus: fm }, alpha);
            for &x in &g.g_plus {
                prop_assert!(x.is_finite() && x >= 0.0 && x as f64 <= alpha * (1.0 + 1e-7));
            }
            for &x in &g.g_minus {
                prop_assert!(x.is_finite() && x <= 0.0 && -(x as f64) <= alpha * (1.0 + 1e-7));
            }
        }
    }
}
