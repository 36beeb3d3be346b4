//! Verification metrics over genuine/impostor score sets: ROC, equal error
//! rate, area under the curve, and the seeded gallery/probe protocol that
//! produces the score sets from enrolled templates.
//!
//! Scores follow one convention throughout: higher means more genuine.
//! Hamming distances are negated on the way in so both metrics share the
//! same sweep. Acceptance at threshold t means score >= t, so a score tied
//! with the threshold counts on the accept side.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{Gallery, IrisTemplate, Metric, Payload};
use crate::error::{Error, Result};

/// Genuine and impostor comparison scores (higher = more genuine).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

/// One ROC sweep point: rates of the accept-iff-score>=threshold rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

fn count_ge(sorted: &[f64], t: f64) -> usize {
    sorted.len() - sorted.partition_point(|v| *v < t)
}

impl ScoreSet {
    pub fn new(genuine: Vec<f64>, impostor: Vec<f64>) -> ScoreSet {
        ScoreSet { genuine, impostor }
    }

    fn checked_sorted(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        for (side, list) in [("genuine", &self.genuine), ("impostor", &self.impostor)] {
            if list.is_empty() {
                return Err(Error::Uninitialized(format!("score set has no {side} scores")));
            }
            if let Some(i) = list.iter().position(|v| !v.is_finite()) {
                return Err(Error::arg(
                    "score_set",
                    format!("{side} score {i} is {}", list[i]),
                ));
            }
        }
        let mut g = self.genuine.clone();
        let mut i = self.impostor.clone();
        g.sort_by(|a, b| a.partial_cmp(b).unwrap());
        i.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok((g, i))
    }

    /// Sorted union of every score observed on either side.
    fn thresholds(g: &[f64], i: &[f64]) -> Vec<f64> {
        let mut t: Vec<f64> = g.iter().chain(i).copied().collect();
        t.sort_by(|a, b| a.partial_cmp(b).unwrap());
        t.dedup();
        t
    }

    /// (FAR, FRR) at every distinct observed threshold, ascending.
    pub fn roc(&self) -> Result<Vec<RocPoint>> {
        let (g, i) = self.checked_sorted()?;
        let (ng, ni) = (g.len() as f64, i.len() as f64);
        Ok(Self::thresholds(&g, &i)
            .into_iter()
            .map(|t| RocPoint {
                threshold: t,
                far: count_ge(&i, t) as f64 / ni,
                frr: (g.len() - count_ge(&g, t)) as f64 / ng,
            })
            .collect())
    }

    /// Equal error rate: the sweep walks every observed threshold; where FAR
    /// and FRR cross between two of them, the rate pairs are interpolated
    /// linearly. FAR - FRR is non-increasing in the threshold, so the first
    /// sign change is the only one.
    pub fn eer(&self) -> Result<f64> {
        let (g, i) = self.checked_sorted()?;
        let (ng, ni) = (g.len() as f64, i.len() as f64);
        let mut pts: Vec<(f64, f64)> = Self::thresholds(&g, &i)
            .into_iter()
            .map(|t| {
                (
                    count_ge(&i, t) as f64 / ni,
                    (g.len() - count_ge(&g, t)) as f64 / ng,
                )
            })
            .collect();
        pts.push((0.0, 1.0)); // rates just above the largest observed score
        for w in pts.windows(2) {
            let (f1, r1) = w[0];
            let (f2, r2) = w[1];
            let d1 = f1 - r1;
            let d2 = f2 - r2;
            if d1 == 0.0 {
                return Ok(f1);
            }
            if d1 > 0.0 && d2 <= 0.0 {
                let alpha = d1 / (d1 - d2);
                return Ok(f1 + alpha * (f2 - f1));
            }
        }
        // the first sweep point sits at the global minimum (FAR 1, FRR 0)
        // and the virtual last point at (0, 1), so a crossing always exists
        unreachable!("FAR-FRR sweep had no sign change");
    }

    /// Twice the Mann-Whitney hit count and the pair count: each
    /// genuine/impostor pair contributes 2 when genuine wins, 1 on a tie.
    /// Both AUC estimators reduce to this integer, which is why they agree.
    fn auc_counts(g: &[f64], i: &[f64]) -> (u128, u128) {
        let mut twice_hits: u128 = 0;
        for x in g {
            let less = i.partition_point(|v| *v < *x);
            let le = i.partition_point(|v| *v <= *x);
            twice_hits += 2 * less as u128 + (le - less) as u128;
        }
        (twice_hits, (g.len() * i.len()) as u128)
    }

    /// AUC as the probability a genuine score beats an impostor score
    /// (ties count half).
    pub fn auc_pairwise(&self) -> Result<f64> {
        let (g, i) = self.checked_sorted()?;
        let (twice_hits, pairs) = Self::auc_counts(&g, &i);
        Ok(twice_hits as f64 / (2 * pairs) as f64)
    }

    /// AUC as the trapezoid area under the (FAR, 1-FRR) curve swept over
    /// every distinct threshold. Accumulates integer accept counts so the
    /// result matches `auc_pairwise` exactly.
    pub fn auc_trapezoid(&self) -> Result<f64> {
        let (g, i) = self.checked_sorted()?;
        let mut num: u128 = 0;
        let (mut fp_prev, mut tp_prev) = (0usize, 0usize);
        let mut thresholds = Self::thresholds(&g, &i);
        thresholds.reverse();
        for t in thresholds {
            let fp = count_ge(&i, t);
            let tp = count_ge(&g, t);
            num += (fp - fp_prev) as u128 * (tp + tp_prev) as u128;
            fp_prev = fp;
            tp_prev = tp;
        }
        Ok(num as f64 / (2 * g.len() as u128 * i.len() as u128) as f64)
    }

    /// Two-column text: `genuine,<score>` / `impostor,<score>` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.genuine {
            out.push_str(&format!("genuine,{s}\n"));
        }
        for s in &self.impostor {
            out.push_str(&format!("impostor,{s}\n"));
        }
        out
    }

    pub fn from_text(text: &str, path: &Path) -> Result<ScoreSet> {
        let mut set = ScoreSet::new(Vec::new(), Vec::new());
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fail = |detail: String| Error::parse(path, ln + 1, detail);
            let (label, score) = line
                .split_once(',')
                .ok_or_else(|| fail("expected label,score".into()))?;
            let score: f64 = score
                .trim()
                .parse()
                .map_err(|e| fail(format!("bad score {score:?}: {e}")))?;
            match label.trim() {
                "genuine" => set.genuine.push(score),
                "impostor" => set.impostor.push(score),
                other => return Err(fail(format!("unknown label {other:?}"))),
            }
        }
        Ok(set)
    }
}

/// Key-value report; extras (rank-1 rate, code density, ...) append as
/// further labeled lines.
pub fn write_report(scores: &ScoreSet, extras: &[(String, f64)]) -> Result<String> {
    let eer = scores.eer()?;
    let auc = scores.auc_trapezoid()?;
    let mut out = String::new();
    out.push_str(&format!("EER {eer:.6}\n"));
    out.push_str(&format!("AUC {auc:.6}\n"));
    out.push_str(&format!("genuine_count {}\n", scores.genuine.len()));
    out.push_str(&format!("impostor_count {}\n", scores.impostor.len()));
    for (key, value) in extras {
        out.push_str(&format!("{key} {value:.6}\n"));
    }
    Ok(out)
}

/// ROC sweep as CSV: far,frr,threshold.
pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("far,frr,threshold\n");
    for p in points {
        out.push_str(&format!("{:.6},{:.6},{}\n", p.far, p.frr, p.threshold));
    }
    out
}

/// Gallery/probe split rule for [`run_protocol`].
#[derive(Debug, Clone, Copy)]
pub struct ProtocolSpec {
    /// Fraction of each identity's samples enrolled in the gallery.
    pub gallery_ratio: f64,
    pub seed: u64,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        ProtocolSpec {
            gallery_ratio: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProtocolOutcome {
    pub scores: ScoreSet,
    /// Fraction of probes whose best-ranked gallery entry shares their
    /// identity.
    pub rank1: f64,
    pub gallery_size: usize,
    pub probe_count: usize,
}

/// Splits templates into gallery and probes per identity (subject + eye),
/// scores every probe against every gallery entry, and labels each score
/// genuine or impostor by identity equality.
///
/// Each identity with n samples enrolls clamp(round(n * ratio), 1, n-1) of
/// them; a singleton goes entirely to the gallery. The shuffle is seeded and
/// identities are visited in sorted order, so the split is a pure function of
/// (templates, spec) regardless of input order.
pub fn run_protocol(
    templates: &[IrisTemplate],
    spec: &ProtocolSpec,
    metric: Metric,
) -> Result<ProtocolOutcome> {
    if !(0.0..=1.0).contains(&spec.gallery_ratio) {
        return Err(Error::arg(
            "run_protocol",
            format!("gallery ratio {} outside [0, 1]", spec.gallery_ratio),
        ));
    }
    if templates.is_empty() {
        return Err(Error::Uninitialized("protocol run with no templates".into()));
    }
    let prepared: Vec<IrisTemplate> = match metric {
        // distances need binary codes; real templates are binarized here
        Metric::Hamming => templates
            .iter()
            .map(|t| t.binarized())
            .collect::<Result<_>>()?,
        Metric::Cosine => {
            if let Some(t) = templates.iter().find(|t| matches!(t.payload, Payload::Binary(_))) {
                return Err(Error::arg(
                    "run_protocol",
                    format!("cosine scoring needs real-valued templates, {} is binary", t.key()),
                ));
            }
            templates.to_vec()
        }
    };

    let mut by_identity: BTreeMap<String, Vec<&IrisTemplate>> = BTreeMap::new();
    for t in &prepared {
        by_identity.entry(t.identity()).or_default().push(t);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut gallery = Vec::new();
    let mut probes = Vec::new();
    for group in by_identity.values_mut() {
        group.sort_by_key(|t| t.key());
        group.shuffle(&mut rng);
        let n = group.len();
        let keep = if n == 1 {
            1 // a lone sample can only be enrolled
        } else {
            ((n as f64 * spec.gallery_ratio).round() as usize).clamp(1, n - 1)
        };
        for (i, t) in group.iter().enumerate() {
            if i < keep {
                gallery.push((*t).clone());
            } else {
                probes.push((*t).clone());
            }
        }
    }
    if probes.is_empty() {
        return Err(Error::arg(
            "run_protocol",
            "no identity has more than one sample, so no genuine pairs exist",
        ));
    }
    let gallery = Gallery::new(gallery)?;

    let mut scores = ScoreSet::new(Vec::new(), Vec::new());
    let mut rank1_hits = 0usize;
    for probe in &probes {
        let ranked = gallery.match_probe(probe)?;
        if ranked[0].identity == probe.identity() {
            rank1_hits += 1;
        }
        for entry in ranked {
            let score = match metric {
                Metric::Cosine => entry.score,
                Metric::Hamming => -entry.score, // distance -> similarity
            };
            if entry.identity == probe.identity() {
                scores.genuine.push(score);
            } else {
                scores.impostor.push(score);
            }
        }
    }
    if scores.impostor.is_empty() {
        return Err(Error::arg(
            "run_protocol",
            "only one identity present, so no impostor pairs exist",
        ));
    }
    Ok(ProtocolOutcome {
        rank1: rank1_hits as f64 / probes.len() as f64,
        gallery_size: gallery.len(),
        probe_count: probes.len(),
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{Eye, Spectrum};
    use proptest::prelude::*;

    fn set(genuine: &[f64], impostor: &[f64]) -> ScoreSet {
        ScoreSet::new(genuine.to_vec(), impostor.to_vec())
    }

    #[test]
    fn eer_and_auc_hand_oracle() {
        // at threshold 0.5 (ties accept) FAR = FRR = 1/4 exactly
        let s = set(&[0.9, 0.8, 0.7, 0.4], &[0.5, 0.3, 0.2, 0.1]);
        assert_eq!(s.eer().unwrap(), 0.25);
        // 15 of 16 pairs rank correctly, no ties
        assert_eq!(s.auc_pairwise().unwrap(), 15.0 / 16.0);
        assert_eq!(s.auc_trapezoid().unwrap(), 15.0 / 16.0);
    }

    #[test]
    fn perfect_separation_reports_zero_eer() {
        let s = set(&[0.8, 0.9], &[0.1, 0.2]);
        assert_eq!(s.eer().unwrap(), 0.0);
        assert_eq!(s.auc_trapezoid().unwrap(), 1.0);
        let report = write_report(&s, &[("rank1".into(), 1.0)]).unwrap();
        assert!(report.contains("EER 0.000000"), "{report}");
        assert!(report.contains("AUC 1.000000"));
        assert!(report.contains("rank1 1.000000"));
    }

    #[test]
    fn heavy_ties_cross_away_from_half() {
        // 30% of genuine above every impostor, the rest below the impostor
        // mode: the rate curves cross at 0.7 while AUC stays above chance.
        let mut genuine = vec![0.5; 7];
        genuine.extend([0.9, 0.9, 0.9]);
        let mut impostor = vec![0.4; 3];
        impostor.extend(vec![0.6; 7]);
        let s = ScoreSet::new(genuine, impostor);
        assert!((s.eer().unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(s.auc_pairwise().unwrap(), 0.51);
        assert_eq!(s.auc_trapezoid().unwrap(), 0.51);
    }

    #[test]
    fn interpolates_between_observed_thresholds() {
        // no threshold makes the rates equal: FAR-FRR goes 3/4 at t=0.5 to
        // -1/4 at t=0.7, so the crossing interpolates to 1/4
        let s = set(&[0.3, 0.7, 0.8, 0.9], &[0.5]);
        assert_eq!(s.eer().unwrap(), 0.25);
    }

    #[test]
    fn roc_sweeps_every_distinct_threshold() {
        let s = set(&[0.9, 0.4], &[0.4, 0.1]);
        let roc = s.roc().unwrap();
        let ts: Vec<f64> = roc.iter().map(|p| p.threshold).collect();
        assert_eq!(ts, vec![0.1, 0.4, 0.9]);
        assert_eq!((roc[0].far, roc[0].frr), (1.0, 0.0));
        // at 0.4 the tied scores on both sides count as accepts
        assert_eq!((roc[1].far, roc[1].frr), (0.5, 0.0));
        assert_eq!((roc[2].far, roc[2].frr), (0.0, 0.5));
        let csv = roc_csv(&roc);
        assert!(csv.starts_with("far,frr,threshold\n"));
        assert!(csv.contains("0.500000,0.000000,0.4"));
    }

    #[test]
    fn empty_or_non_finite_scores_are_rejected() {
        assert!(set(&[], &[0.1]).eer().is_err());
        assert!(set(&[0.5], &[]).roc().is_err());
        assert!(set(&[f64::NAN], &[0.1]).auc_pairwise().is_err());
        assert!(set(&[0.5], &[f64::INFINITY]).eer().is_err());
    }

    #[test]
    fn score_text_round_trip_is_exact() {
        let s = set(&[0.123456789012345, 0.9], &[-0.25, 1.0 / 3.0]);
        let text = s.to_text();
        let back = ScoreSet::from_text(&text, Path::new("scores.txt")).unwrap();
        assert_eq!(back, s);
        assert!(ScoreSet::from_text("mystery,0.5\n", Path::new("s")).is_err());
        assert!(ScoreSet::from_text("genuine,abc\n", Path::new("s")).is_err());
        assert!(ScoreSet::from_text("genuine\n", Path::new("s")).is_err());
    }

    fn template(subject: &str, eye: Eye, sample: u32, v: Vec<f32>) -> IrisTemplate {
        IrisTemplate {
            subject: subject.into(),
            eye,
            spectrum: Spectrum::Nir,
            sample,
            payload: Payload::Real(v),
        }
    }

    fn two_by_two() -> Vec<IrisTemplate> {
        // identities cluster by sign pattern so cosine and binarized Hamming
        // agree on who matches whom
        vec![
            template("s1", Eye::Left, 0, vec![1.0, 0.8, -0.5, -0.9]),
            template("s1", Eye::Left, 1, vec![0.9, 0.7, -0.6, -0.8]),
            template("s2", Eye::Left, 0, vec![-0.7, -0.5, 0.8, 0.6]),
            template("s2", Eye::Left, 1, vec![-0.6, -0.4, 0.9, 0.5]),
        ]
    }

    #[test]
    fn two_identities_two_samples_yield_two_genuine_two_impostor() {
        let out = run_protocol(&two_by_two(), &ProtocolSpec::default(), Metric::Cosine).unwrap();
        assert_eq!(out.scores.genuine.len(), 2);
        assert_eq!(out.scores.impostor.len(), 2);
        assert_eq!(out.gallery_size, 2);
        assert_eq!(out.probe_count, 2);
        assert_eq!(out.rank1, 1.0);
        assert_eq!(out.scores.eer().unwrap(), 0.0);
    }

    #[test]
    fn protocol_split_ignores_input_order() {
        let spec = ProtocolSpec { gallery_ratio: 0.5, seed: 42 };
        let mut shuffled = two_by_two();
        shuffled.reverse();
        let a = run_protocol(&two_by_two(), &spec, Metric::Cosine).unwrap();
        let b = run_protocol(&shuffled, &spec, Metric::Cosine).unwrap();
        assert_eq!(a.scores, b.scores);
        assert_eq!(a.rank1, b.rank1);
    }

    #[test]
    fn singleton_identities_enroll_without_probing() {
        let mut templates = two_by_two();
        templates.push(template("s3", Eye::Right, 0, vec![0.5, 0.5, 0.5, 0.5]));
        let out = run_protocol(&templates, &ProtocolSpec::default(), Metric::Cosine).unwrap();
        assert_eq!(out.gallery_size, 3);
        assert_eq!(out.probe_count, 2);
        // each probe now also faces the singleton: 2 genuine, 4 impostor
        assert_eq!(out.scores.genuine.len(), 2);
        assert_eq!(out.scores.impostor.len(), 4);
    }

    #[test]
    fn all_singletons_is_an_error() {
        let templates = vec![
            template("s1", Eye::Left, 0, vec![1.0, 0.0]),
            template("s2", Eye::Left, 0, vec![0.0, 1.0]),
        ];
        assert!(run_protocol(&templates, &ProtocolSpec::default(), Metric::Cosine).is_err());
    }

    #[test]
    fn one_identity_is_an_error() {
        let templates = vec![
            template("s1", Eye::Left, 0, vec![1.0, 0.0]),
            template("s1", Eye::Left, 1, vec![0.9, 0.1]),
        ];
        assert!(run_protocol(&templates, &ProtocolSpec::default(), Metric::Cosine).is_err());
    }

    #[test]
    fn hamming_protocol_negates_distances() {
        // same-identity codes are close, so the negated genuine scores must
        // all exceed the negated impostor scores
        let out = run_protocol(&two_by_two(), &ProtocolSpec::default(), Metric::Hamming).unwrap();
        let min_gen = out.scores.genuine.iter().cloned().fold(f64::MAX, f64::min);
        let max_imp = out.scores.impostor.iter().cloned().fold(f64::MIN, f64::max);
        assert!(min_gen > max_imp, "{min_gen} vs {max_imp}");
        assert!(out.scores.genuine.iter().all(|s| *s <= 0.0));
        assert_eq!(out.scores.eer().unwrap(), 0.0);
    }

    #[test]
    fn left_and_right_eyes_are_distinct_identities() {
        let templates = vec![
            template("s1", Eye::Left, 0, vec![1.0, 0.0]),
            template("s1", Eye::Left, 1, vec![0.9, 0.1]),
            template("s1", Eye::Right, 0, vec![0.0, 1.0]),
            template("s1", Eye::Right, 1, vec![0.1, 0.9]),
        ];
        let out = run_protocol(&templates, &ProtocolSpec::default(), Metric::Cosine).unwrap();
        // probes of s1_L vs gallery s1_R count as impostor comparisons
        assert_eq!(out.scores.genuine.len(), 2);
        assert_eq!(out.scores.impostor.len(), 2);
    }

    /// Replaces every score by its rank in the sorted union: an
    /// order-isomorphic (strictly increasing) remap of the observed values.
    fn rank_mapped(s: &ScoreSet) -> ScoreSet {
        let mut union: Vec<f64> = s.genuine.iter().chain(&s.impostor).copied().collect();
        union.sort_by(|a, b| a.partial_cmp(b).unwrap());
        union.dedup();
        let rank = |v: f64| union.partition_point(|u| *u < v) as f64;
        ScoreSet::new(
            s.genuine.iter().map(|v| rank(*v)).collect(),
            s.impostor.iter().map(|v| rank(*v)).collect(),
        )
    }

    fn lattice_scores() -> impl Strategy<Value = Vec<f64>> {
        // scores on a coarse lattice so ties actually occur
        proptest::collection::vec((-32i32..32).prop_map(|i| i as f64 / 16.0), 1..40)
    }

    proptest! {
        #[test]
        fn eer_is_invariant_under_increasing_transforms(
            g in lattice_scores(),
            i in lattice_scores(),
        ) {
            let s = ScoreSet::new(g, i);
            let base = s.eer().unwrap();
            prop_assert_eq!(rank_mapped(&s).eer().unwrap(), base);
            let affine = ScoreSet::new(
                s.genuine.iter().map(|v| v * 2.0 - 5.0).collect(),
                s.impostor.iter().map(|v| v * 2.0 - 5.0).collect(),
            );
            prop_assert_eq!(affine.eer().unwrap(), base);
        }

        #[test]
        fn auc_estimators_agree_and_swap_sums_to_one(
            g in lattice_scores(),
            i in lattice_scores(),
        ) {
            let s = ScoreSet::new(g.clone(), i.clone());
            prop_assert_eq!(s.auc_trapezoid().unwrap(), s.auc_pairwise().unwrap());
            let swapped = ScoreSet::new(i, g);
            // each pair hands out 2 points total, so the integer numerators
            // complement exactly
            let (mut gs, mut is) = (s.genuine.clone(), s.impostor.clone());
            gs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            is.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let (fwd, pairs) = ScoreSet::auc_counts(&gs, &is);
            let (rev, _) = ScoreSet::auc_counts(&is, &gs);
            prop_assert_eq!(fwd + rev, 2 * pairs);
            let sum = s.auc_pairwise().unwrap() + swapped.auc_pairwise().unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12, "swap sum {}", sum);
        }

        #[test]
        fn eer_bounds_follow_auc(g in lattice_scores(), i in lattice_scores()) {
            let s = ScoreSet::new(g, i);
            let eer = s.eer().unwrap();
            let auc = s.auc_pairwise().unwrap();
            prop_assert!((0.0..=1.0).contains(&eer), "EER {}", eer);
            // the ROC passes through (EER, 1-EER), capping the area at 1-EER^2
            prop_assert!(eer * eer <= 1.0 - auc + 1e-12, "EER {} AUC {}", eer, auc);
        }

        #[test]
        fn dominant_genuine_scores_keep_eer_at_or_below_half(
            base in proptest::collection::vec((-32i32..32).prop_map(|i| i as f64 / 16.0), 1..30),
            lift in proptest::collection::vec((0i32..32).prop_map(|i| i as f64 / 16.0), 30),
        ) {
            // genuine[k] = impostor[k] + lift[k] >= impostor[k]: the genuine
            // side stochastically dominates, so AUC >= 1/2 and EER <= 1/2
            let genuine: Vec<f64> = base.iter().zip(&lift).map(|(b, l)| b + l).collect();
            let s = ScoreSet::new(genuine, base);
            prop_assert!(s.auc_pairwise().unwrap() >= 0.5);
            let eer = s.eer().unwrap();
            prop_assert!((0.0..=0.5 + 1e-12).contains(&eer), "EER {}", eer);
        }
    }
}
