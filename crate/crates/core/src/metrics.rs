//! Speaker-verification scoring: equal error rate and minimum detection cost.
//!
//! A trial is accepted when `score >= threshold`. Operating points are taken
//! at every distinct score plus one threshold above all scores, giving the
//! false-reject rate (targets rejected) and false-accept rate (non-targets
//! accepted) at each point.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Target,
    Nontarget,
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "target" => Ok(Label::Target),
            "nontarget" => Ok(Label::Nontarget),
            other => Err(format!(
                "unknown label {other:?} (expected target or nontarget)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialScore {
    pub label: Label,
    pub score: f64,
}

impl TrialScore {
    pub fn target(score: f64) -> Self {
        Self {
            label: Label::Target,
            score,
        }
    }

    pub fn nontarget(score: f64) -> Self {
        Self {
            label: Label::Nontarget,
            score,
        }
    }
}

/// Error counts at one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OperatingPoint {
    pub misses: usize,
    pub false_alarms: usize,
}

/// Operating points from the lowest threshold (accept everything) to above
/// the highest score (reject everything).
pub fn operating_points(scores: &[TrialScore]) -> Result<(Vec<OperatingPoint>, usize, usize)> {
    if scores.iter().any(|s| !s.score.is_finite()) {
        return Err(Error::InvalidArgument("scores must be finite".into()));
    }
    let n_target = scores.iter().filter(|s| s.label == Label::Target).count();
    let n_non = scores.len() - n_target;
    if n_target == 0 || n_non == 0 {
        return Err(Error::SingleClass);
    }
    let mut sorted: Vec<TrialScore> = scores.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));

    let mut points = Vec::with_capacity(sorted.len() + 1);
    let (mut misses, mut false_alarms) = (0, n_non);
    let mut i = 0;
    while i < sorted.len() {
        points.push(OperatingPoint {
            misses,
            false_alarms,
        });
        let s = sorted[i].score;
        while i < sorted.len() && sorted[i].score == s {
            match sorted[i].label {
                Label::Target => misses += 1,
                Label::Nontarget => false_alarms -= 1,
            }
            i += 1;
        }
    }
    points.push(OperatingPoint {
        misses,
        false_alarms,
    });
    Ok((points, n_target, n_non))
}

/// Intersection of the piecewise-linear ROC with the line FAR = FRR.
///
/// Rates are compared on the common denominator `n_target · n_non`, so the
/// crossing is an exact rational rounded once to f64.
pub(crate) fn eer_from_points(points: &[OperatingPoint], n_target: usize, n_non: usize) -> f64 {
    let (nt, nn) = (n_target as i128, n_non as i128);
    // (FRR - FAR) scaled by nt·nn
    let gap = |p: &OperatingPoint| p.misses as i128 * nn - p.false_alarms as i128 * nt;
    for w in points.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let (da, db) = (gap(a), gap(b));
        if da == 0 {
            return a.false_alarms as f64 / n_non as f64;
        }
        if da < 0 && db >= 0 {
            // FAR_a + t·(FAR_b - FAR_a) with t = da / (da - db)
            let num = da * b.false_alarms as i128 - db * a.false_alarms as i128;
            let den = nn * (da - db);
            return num as f64 / den as f64;
        }
    }
    // the last point has FRR = 1, FAR = 0, so the sign change is always found
    unreachable!("ROC must cross FAR = FRR")
}

/// Equal error rate in `[0, 1]`, linearly interpolated between adjacent
/// operating points.
pub fn compute_eer(scores: &[TrialScore]) -> Result<f64> {
    let (points, nt, nn) = operating_points(scores)?;
    Ok(eer_from_points(&points, nt, nn))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    /// NIST SRE10 primary operating point.
    fn default() -> Self {
        Self {
            p_target: 0.001,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "p_target must lie in (0, 1), got {}",
                self.p_target
            )));
        }
        if !(self.c_miss > 0.0 && self.c_fa > 0.0) {
            return Err(Error::InvalidArgument(
                "detection costs must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Cost of the best trivial system (always accept or always reject).
    pub fn default_cost(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }

    pub(crate) fn normalized_cost(&self, p: &OperatingPoint, n_target: usize, n_non: usize) -> f64 {
        let p_miss = p.misses as f64 / n_target as f64;
        let p_fa = p.false_alarms as f64 / n_non as f64;
        (self.c_miss * p_miss * self.p_target + self.c_fa * p_fa * (1.0 - self.p_target))
            / self.default_cost()
    }
}

/// Minimum normalized detection cost over all thresholds.
pub fn compute_min_dcf(scores: &[TrialScore], params: &DcfParams) -> Result<f64> {
    params.validate()?;
    let (points, nt, nn) = operating_points(scores)?;
    Ok(points
        .iter()
        .map(|p| params.normalized_cost(p, nt, nn))
        .fold(f64::INFINITY, f64::min))
}

/// Parses `target|nontarget <whitespace> score` lines. Blank lines and lines
/// starting with `#` are skipped; anything else malformed is an error naming
/// the 1-based line.
pub fn parse_scores(text: &str) -> Result<Vec<TrialScore>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::ScoreParse {
            line: idx + 1,
            message,
        };
        let mut fields = line.split_whitespace();
        let (Some(label), Some(score), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(err(format!("expected `<label> <score>`, got {line:?}")));
        };
        let label = label.parse::<Label>().map_err(err)?;
        let score: f64 = score
            .parse()
            .map_err(|e| err(format!("bad score {score:?}: {e}")))?;
        if !score.is_finite() {
            return Err(err(format!("score {score} is not finite")));
        }
        out.push(TrialScore { label, score });
    }
    Ok(out)
}

pub fn load_scores(path: impl AsRef<Path>) -> Result<Vec<TrialScore>> {
    parse_scores(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trials(targets: &[f64], nontargets: &[f64]) -> Vec<TrialScore> {
        targets
            .iter()
            .map(|&s| TrialScore::target(s))
            .chain(nontargets.iter().map(|&s| TrialScore::nontarget(s)))
            .collect()
    }

    #[test]
    fn separated_scores() {
        let s = trials(&[0.9, 0.8], &[0.1, 0.2]);
        assert_eq!(compute_eer(&s).unwrap(), 0.0);
        assert_eq!(compute_min_dcf(&s, &DcfParams::default()).unwrap(), 0.0);
    }

    #[test]
    fn overlapping_scores() {
        let s = trials(&[0.9, 0.8, 0.3], &[0.6, 0.2, 0.1]);
        assert!((compute_eer(&s).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn identical_scores_cost_one() {
        let s = trials(&[0.5, 0.5], &[0.5, 0.5, 0.5]);
        assert_eq!(compute_min_dcf(&s, &DcfParams::default()).unwrap(), 1.0);
        assert_eq!(compute_eer(&s).unwrap(), 0.5);
    }

    #[test]
    fn label_swap_symmetry() {
        let s = trials(&[0.9, 0.4, 0.3, 0.7], &[0.6, 0.2, 0.35]);
        let flipped: Vec<_> = s
            .iter()
            .map(|t| TrialScore {
                label: match t.label {
                    Label::Target => Label::Nontarget,
                    Label::Nontarget => Label::Target,
                },
                score: -t.score,
            })
            .collect();
        let (a, b) = (compute_eer(&s).unwrap(), compute_eer(&flipped).unwrap());
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(matches!(
            compute_eer(&trials(&[0.1], &[])),
            Err(Error::SingleClass)
        ));
        assert!(matches!(
            compute_min_dcf(&trials(&[], &[0.1]), &DcfParams::default()),
            Err(Error::SingleClass)
        ));
    }

    #[test]
    fn dcf_params_are_checked() {
        let s = trials(&[1.0], &[0.0]);
        let bad = DcfParams {
            p_target: 1.0,
            ..DcfParams::default()
        };
        assert!(compute_min_dcf(&s, &bad).is_err());
    }

    #[test]
    fn score_file_parsing() {
        let text = "# header\ntarget 0.5\n\nnontarget -1.25\n";
        let s = parse_scores(text).unwrap();
        assert_eq!(
            s,
            vec![TrialScore::target(0.5), TrialScore::nontarget(-1.25)]
        );
        for (bad, line) in [
            ("target 0.5\nimpostor 1\n", 2),
            ("target\n", 1),
            ("target x\n", 1),
            ("target 1 2\n", 1),
        ] {
            match parse_scores(bad) {
                Err(Error::ScoreParse { line: l, .. }) => assert_eq!(l, line, "{bad:?}"),
                other => panic!("{bad:?}: {other:?}"),
            }
        }
    }
}
