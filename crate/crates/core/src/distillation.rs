//! Assistant scoring of student training pairs and the score-distribution
//! diagnostic.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{forward_cross, CrossEncoderParams, TokenizedWorld};
use crate::error::{Error, Result};
use crate::synthworld::{LabeledPair, Source};
use crate::trainer::TrainHistory;

/// A fine-tuned cross-encoder together with the history that trained it.
#[derive(Debug, Clone)]
pub struct Assistant {
    pub params: CrossEncoderParams,
    pub history: TrainHistory,
}

impl Assistant {
    pub fn is_trained(&self) -> bool {
        !self.history.is_empty()
    }
}

/// Scores every distinct pair with the assistant, keeping first-occurrence
/// order. Refuses an assistant with an empty history unless
/// `allow_untrained`.
pub fn kd_score(
    assistant: &Assistant,
    tw: &TokenizedWorld,
    pairs: &[(usize, usize)],
    allow_untrained: bool,
) -> Result<Vec<LabeledPair>> {
    if !assistant.is_trained() && !allow_untrained {
        return Err(Error::UntrainedAssistant(
            "no training history; pass allow_untrained to score anyway".into(),
        ));
    }
    let mut seen = HashSet::with_capacity(pairs.len());
    let unique: Vec<(usize, usize)> = pairs.iter().copied().filter(|p| seen.insert(*p)).collect();
    unique
        .par_iter()
        .map(|&(item, kp)| {
            let input = tw.cross_input(item, kp)?;
            let score = forward_cross(&assistant.params, &input)?.score;
            Ok(LabeledPair {
                item,
                kp,
                source: Source::Kd,
                value: score,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spread {
    /// At least half the mass sits in the two extreme bins.
    Peaked,
    Even,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    /// `n_bins + 1` uniform edges over `[0, 1]`.
    pub edges: Vec<f64>,
    pub mass_a: Vec<f64>,
    pub mass_b: Vec<f64>,
    pub abs_diff: Vec<f64>,
    /// Mass in the first and last bin.
    pub extreme_ratio_a: f64,
    pub extreme_ratio_b: f64,
    pub spread_a: Spread,
    pub spread_b: Spread,
}

fn histogram(scores: &[f64], n_bins: usize, name: &'static str) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptyInput(name));
    }
    let mut counts = vec![0usize; n_bins];
    for &s in scores {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::config(name, format!("score {s} outside [0, 1]")));
        }
        counts[((s * n_bins as f64) as usize).min(n_bins - 1)] += 1;
    }
    let n = scores.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

fn extremes(mass: &[f64]) -> f64 {
    if mass.len() == 1 {
        mass[0]
    } else {
        mass[0] + mass[mass.len() - 1]
    }
}

fn spread(ratio: f64) -> Spread {
    if ratio >= 0.5 {
        Spread::Peaked
    } else {
        Spread::Even
    }
}

/// Normalized histograms of two score sets with an evenness summary.
pub fn score_distribution_report(
    scores_a: &[f64],
    scores_b: &[f64],
    n_bins: usize,
) -> Result<DistributionReport> {
    if n_bins == 0 {
        return Err(Error::config("n_bins", "must be >= 1"));
    }
    let mass_a = histogram(scores_a, n_bins, "scores_a")?;
    let mass_b = histogram(scores_b, n_bins, "scores_b")?;
    let abs_diff = mass_a
        .iter()
        .zip(&mass_b)
        .map(|(a, b)| (a - b).abs())
        .collect();
    let (ea, eb) = (extremes(&mass_a), extremes(&mass_b));
    Ok(DistributionReport {
        edges: (0..=n_bins).map(|i| i as f64 / n_bins as f64).collect(),
        mass_a,
        mass_b,
        abs_diff,
        extreme_ratio_a: ea,
        extreme_ratio_b: eb,
        spread_a: spread(ea),
        spread_b: spread(eb),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_inputs_have_no_difference() {
        let s = [0.1, 0.2, 0.2, 0.75, 1.0];
        let r = score_distribution_report(&s, &s, 20).unwrap();
        assert!(r.abs_diff.iter().all(|&d| d == 0.0));
        assert!((r.mass_a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(r.edges.len(), 21);
    }

    #[test]
    fn peaked_versus_uniform() {
        let peaked = vec![0.99; 100];
        let uniform: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        let r = score_distribution_report(&peaked, &uniform, 20).unwrap();
        assert_eq!(r.extreme_ratio_a, 1.0);
        assert!((r.extreme_ratio_b - 0.1).abs() < 1e-12);
        assert_eq!((r.spread_a, r.spread_b), (Spread::Peaked, Spread::Even));
    }

    #[test]
    fn empty_and_out_of_range() {
        assert!(matches!(
            score_distribution_report(&[], &[0.5], 20),
            Err(Error::EmptyInput("scores_a"))
        ));
        assert!(score_distribution_report(&[0.5], &[1.5], 20).is_err());
    }

    #[test]
    fn untrained_assistant_is_refused() {
        let world = crate::synthworld::generate_world(&crate::synthworld::WorldConfig {
            n_items: 3,
            n_keyphrases: 3,
            ..Default::default()
        })
        .unwrap();
        let tw = TokenizedWorld::new(&world, 128).unwrap();
        let a = Assistant {
            params: CrossEncoderParams::new_random(128, 4, 1).unwrap(),
            history: TrainHistory::default(),
        };
        let pairs = [(0, 1), (2, 2), (0, 1)];
        assert!(matches!(
            kd_score(&a, &tw, &pairs, false),
            Err(Error::UntrainedAssistant(_))
        ));
        let kd = kd_score(&a, &tw, &pairs, true).unwrap();
        assert_eq!(
            kd.iter().map(LabeledPair::pair).collect::<Vec<_>>(),
            vec![(0, 1), (2, 2)]
        );
        assert!(kd
            .iter()
            .all(|p| (0.0..=1.0).contains(&p.value) && p.source == Source::Kd));
    }
}
