//! Top-5 mean average precision under four matching criteria.
//!
//! Matching is greedy in score order: each prediction takes the unmatched
//! ground truth of the same noun with the highest box IoU at or above the
//! threshold, and that ground truth is consumed. A criterion then accepts the
//! pair when the extra components (verb, ttc) also agree. Because the pairing
//! is shared by all criteria, adding a component can only turn a true
//! positive into a false positive.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::TOP_K;
use crate::error::{Error, Result};
use crate::types::{box_iou, StaAnnotation, StaPrediction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub iou_threshold: f64,
    pub ttc_tolerance_seconds: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            ttc_tolerance_seconds: 0.25,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::Config(format!(
                "iou_threshold {} must be in (0, 1)",
                self.iou_threshold
            )));
        }
        if self.ttc_tolerance_seconds <= 0.0 {
            return Err(Error::Config("ttc tolerance must be positive".into()));
        }
        Ok(())
    }

    pub fn criteria(&self) -> [MatchCriteria; 4] {
        [(false, false), (true, false), (false, true), (true, true)].map(|(verb, ttc)| MatchCriteria {
            iou_threshold: self.iou_threshold,
            ttc_tolerance_seconds: self.ttc_tolerance_seconds,
            verb,
            ttc,
        })
    }
}

/// One column of the report. The noun and box are always required.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchCriteria {
    pub iou_threshold: f64,
    pub ttc_tolerance_seconds: f64,
    pub verb: bool,
    pub ttc: bool,
}

impl MatchCriteria {
    pub fn noun() -> Self {
        MetricConfig::default().criteria()[0]
    }

    pub fn noun_verb() -> Self {
        MetricConfig::default().criteria()[1]
    }

    pub fn noun_ttc() -> Self {
        MetricConfig::default().criteria()[2]
    }

    pub fn overall() -> Self {
        MetricConfig::default().criteria()[3]
    }

    /// Box and noun agreement, the basis of the pairing.
    pub fn pairs(&self, p: &StaPrediction, g: &StaAnnotation) -> bool {
        p.noun_id == g.noun_id && box_iou(&p.bbox, &g.bbox) >= self.iou_threshold
    }

    /// Extra components required by this criterion.
    pub fn accepts(&self, p: &StaPrediction, g: &StaAnnotation) -> bool {
        (!self.verb || p.verb_id == g.verb_id)
            && (!self.ttc || (p.ttc_seconds - g.ttc_seconds).abs() <= self.ttc_tolerance_seconds)
    }
}

/// Mean AP per column, as fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub noun_map: f64,
    pub noun_verb_map: f64,
    pub noun_ttc_map: f64,
    pub overall_map: f64,
}

impl MetricReport {
    pub fn as_array(&self) -> [f64; 4] {
        [self.noun_map, self.noun_verb_map, self.noun_ttc_map, self.overall_map]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self {
            noun_map: v[0],
            noun_verb_map: v[1],
            noun_ttc_map: v[2],
            overall_map: v[3],
        }
    }

    pub fn from_percentages(v: [f64; 4]) -> Self {
        Self::from_array(v.map(|x| x / 100.0))
    }

    pub fn percentages(&self) -> [f64; 4] {
        self.as_array().map(|x| x * 100.0)
    }

    /// `key=value` lines with percentages to two decimals.
    pub fn key_values(&self) -> String {
        let p = self.percentages();
        format!(
            "noun_map={:.2}\nnoun_verb_map={:.2}\nnoun_ttc_map={:.2}\noverall_map={:.2}\n",
            p[0], p[1], p[2], p[3]
        )
    }
}

pub const TABLE_HEADER: &str = "| Model                | Noun  | N+V   | N+TTC | Overall |";
pub const TABLE_RULE: &str = "|----------------------|-------|-------|-------|---------|";

/// One table row, percentages to two decimals.
pub fn table_row(label: &str, r: &MetricReport) -> String {
    let p = r.percentages();
    format!(
        "| {label:<20} | {:<5.2} | {:<5.2} | {:<5.2} | {:<7.2} |",
        p[0], p[1], p[2], p[3]
    )
}

/// Header, rule and one row per labelled report.
pub fn format_table(rows: &[(String, MetricReport)]) -> String {
    let mut out = format!("{TABLE_HEADER}\n{TABLE_RULE}\n");
    for (label, r) in rows {
        out.push_str(&table_row(label, r));
        out.push('\n');
    }
    out
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.percentages();
        write!(
            f,
            "Noun {:.2} | N+V {:.2} | N+TTC {:.2} | Overall {:.2}",
            p[0], p[1], p[2], p[3]
        )
    }
}

/// Indices of `preds` in descending score order, ties by input order.
fn rank(preds: &[StaPrediction]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    order
}

/// Greedy pairing: for each prediction (in score order) the ground-truth index it consumed.
pub fn pair_clip(preds: &[StaPrediction], gts: &[StaAnnotation], crit: &MatchCriteria) -> Result<Vec<Option<usize>>> {
    if preds.len() > TOP_K {
        return Err(Error::Protocol(format!(
            "{} predictions for one clip; at most {TOP_K} allowed",
            preds.len()
        )));
    }
    let mut used = vec![false; gts.len()];
    let mut out = vec![None; preds.len()];
    for i in rank(preds) {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if used[j] || !crit.pairs(&preds[i], g) {
                continue;
            }
            let iou = box_iou(&preds[i].bbox, &g.bbox);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
            out[i] = Some(j);
        }
    }
    Ok(out)
}

/// TP/FP flags aligned with `preds`.
pub fn match_clip(preds: &[StaPrediction], gts: &[StaAnnotation], crit: &MatchCriteria) -> Result<Vec<bool>> {
    let pairs = pair_clip(preds, gts, crit)?;
    Ok(pairs
        .iter()
        .zip(preds)
        .map(|(m, p)| m.is_some_and(|j| crit.accepts(p, &gts[j])))
        .collect())
}

/// All-point interpolated AP from flags already in rank order.
pub fn average_precision_ranked(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let precision: Vec<f64> = flags
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            tp += usize::from(f);
            tp as f64 / (i + 1) as f64
        })
        .collect();
    let mut envelope = 0.0f64;
    let mut sum = 0.0;
    for (i, &f) in flags.iter().enumerate().rev() {
        envelope = envelope.max(precision[i]);
        if f {
            sum += envelope;
        }
    }
    sum / n_gt as f64
}

/// AP of `(score, is_tp)` entries: ranked by descending score, ties by input order.
pub fn average_precision(entries: &[(f64, bool)], n_gt: usize) -> f64 {
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&a, &b| entries[b].0.total_cmp(&entries[a].0));
    let flags: Vec<bool> = order.iter().map(|&i| entries[i].1).collect();
    average_precision_ranked(&flags, n_gt)
}

/// Mean over nouns with ground truth of the per-noun pooled AP.
fn pooled_map(per_clip: &[(&[StaPrediction], &[StaAnnotation], Vec<bool>)]) -> f64 {
    let mut n_gt: BTreeMap<usize, usize> = BTreeMap::new();
    let mut pooled: BTreeMap<usize, Vec<(f64, bool)>> = BTreeMap::new();
    for (preds, gts, flags) in per_clip {
        for g in gts.iter() {
            *n_gt.entry(g.noun_id).or_default() += 1;
        }
        for i in rank(preds) {
            pooled.entry(preds[i].noun_id).or_default().push((preds[i].score, flags[i]));
        }
    }
    if n_gt.is_empty() {
        return 0.0;
    }
    let total: f64 = n_gt
        .iter()
        .map(|(noun, &n)| average_precision(pooled.get(noun).map_or(&[][..], Vec::as_slice), n))
        .sum();
    total / n_gt.len() as f64
}

/// The four-column report over every annotated clip.
pub fn top5_map(
    preds: &BTreeMap<String, Vec<StaPrediction>>,
    gts: &BTreeMap<String, Vec<StaAnnotation>>,
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    if let Some(id) = preds.keys().find(|id| !gts.contains_key(*id)) {
        return Err(Error::Protocol(format!(
            "predictions for clip `{id}` which has no annotations"
        )));
    }
    let empty: Vec<StaPrediction> = Vec::new();
    let mut out = [0.0; 4];
    for (slot, crit) in out.iter_mut().zip(cfg.criteria()) {
        let mut per_clip = Vec::with_capacity(gts.len());
        for (id, g) in gts {
            let p = preds.get(id).unwrap_or(&empty);
            let flags = match_clip(p, g, &crit)?;
            per_clip.push((p.as_slice(), g.as_slice(), flags));
        }
        *slot = pooled_map(&per_clip);
    }
    Ok(MetricReport::from_array(out))
}

/// Largest instance the oracle will enumerate.
pub const ORACLE_LIMIT: usize = 8;

/// Result of exhaustive matching on a set of clips.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    /// Most true positives any injective assignment achieves.
    pub best_tp: usize,
    /// TP flags of the greedy-by-score assignment, per clip, aligned with the input.
    pub flags: Vec<Vec<bool>>,
    pub map: f64,
}

fn enumerate(
    pred: usize,
    order: &[usize],
    options: &[Vec<usize>],
    used: &mut Vec<bool>,
    current: &mut Vec<Option<usize>>,
    visit: &mut dyn FnMut(&[Option<usize>]),
) {
    if pred == order.len() {
        visit(current);
        return;
    }
    let i = order[pred];
    current[i] = None;
    enumerate(pred + 1, order, options, used, current, visit);
    for &j in &options[i] {
        if !used[j] {
            used[j] = true;
            current[i] = Some(j);
            enumerate(pred + 1, order, options, used, current, visit);
            used[j] = false;
        }
    }
    current[i] = None;
}

type AssignmentKey = Vec<(f64, i64)>;

/// Exhaustive enumeration of injective prediction-to-GT assignments per clip.
///
/// Among all assignments the one chosen greedily by score is the
/// lexicographic maximum (in score order) of `(iou, -gt_index)` per
/// prediction, with "unassigned" lowest. Its flags give the AP.
pub fn brute_force_oracle(clips: &[(Vec<StaPrediction>, Vec<StaAnnotation>)], crit: &MatchCriteria) -> Result<OracleResult> {
    let mut best_tp = 0;
    let mut all_flags = Vec::with_capacity(clips.len());
    for (preds, gts) in clips {
        if preds.len() > ORACLE_LIMIT || gts.len() > ORACLE_LIMIT {
            return Err(Error::Protocol(format!(
                "oracle instance too large: {} predictions, {} ground truths (limit {ORACLE_LIMIT})",
                preds.len(),
                gts.len()
            )));
        }
        let order = rank(preds);
        let options: Vec<Vec<usize>> = preds
            .iter()
            .map(|p| (0..gts.len()).filter(|&j| crit.pairs(p, &gts[j])).collect())
            .collect();
        let key = |a: &[Option<usize>]| -> Vec<(f64, i64)> {
            order
                .iter()
                .map(|&i| match a[i] {
                    Some(j) => (box_iou(&preds[i].bbox, &gts[j].bbox), -(j as i64)),
                    None => (-1.0, 0),
                })
                .collect()
        };
        let tp_of = |a: &[Option<usize>]| -> Vec<bool> {
            a.iter()
                .zip(preds)
                .map(|(m, p)| m.is_some_and(|j| crit.accepts(p, &gts[j])))
                .collect()
        };
        let mut chosen: Option<(AssignmentKey, Vec<Option<usize>>)> = None;
        let mut clip_best = 0;
        let mut used = vec![false; gts.len()];
        let mut current = vec![None; preds.len()];
        enumerate(0, &order, &options, &mut used, &mut current, &mut |a| {
            clip_best = clip_best.max(tp_of(a).iter().filter(|&&t| t).count());
            let k = key(a);
            let better = match &chosen {
                None => true,
                Some((best, _)) => k.partial_cmp(best) == Some(std::cmp::Ordering::Greater),
            };
            if better {
                chosen = Some((k, a.to_vec()));
            }
        });
        best_tp += clip_best;
        all_flags.push(tp_of(&chosen.map(|c| c.1).unwrap_or_default()));
    }
    // Pool per noun and rank, computed independently of the fast path.
    let nouns: BTreeSet<usize> = clips.iter().flat_map(|(_, g)| g.iter().map(|a| a.noun_id)).collect();
    let mut total = 0.0;
    for &noun in &nouns {
        let n_gt = clips
            .iter()
            .map(|(_, g)| g.iter().filter(|a| a.noun_id == noun).count())
            .sum::<usize>();
        let mut entries: Vec<(f64, usize, bool)> = Vec::new();
        for ((preds, _), flags) in clips.iter().zip(&all_flags) {
            for i in rank(preds) {
                if preds[i].noun_id == noun {
                    entries.push((preds[i].score, entries.len(), flags[i]));
                }
            }
        }
        entries.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut prec = Vec::with_capacity(entries.len());
        let mut tp = 0;
        for (k, e) in entries.iter().enumerate() {
            tp += usize::from(e.2);
            prec.push(tp as f64 / (k + 1) as f64);
        }
        let mut ap = 0.0;
        let mut env = 0.0f64;
        for k in (0..entries.len()).rev() {
            env = env.max(prec[k]);
            if entries[k].2 {
                ap += env;
            }
        }
        total += ap / n_gt as f64;
    }
    let map = if nouns.is_empty() { 0.0 } else { total / nouns.len() as f64 };
    Ok(OracleResult {
        best_tp,
        flags: all_flags,
        map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::BoundingBox;

    fn gt(x: f64, noun: usize, verb: usize, ttc: f64) -> StaAnnotation {
        StaAnnotation {
            bbox: BoundingBox::new(x, 0.0, x + 10.0, 10.0),
            noun_id: noun,
            verb_id: verb,
            ttc_seconds: ttc,
        }
    }

    fn pred(a: &StaAnnotation, score: f64) -> StaPrediction {
        StaPrediction {
            bbox: a.bbox,
            noun_id: a.noun_id,
            verb_id: a.verb_id,
            ttc_seconds: a.ttc_seconds,
            score,
        }
    }

    #[test]
    fn exact_prediction_is_tp_everywhere() {
        let g = gt(0.0, 1, 2, 1.0);
        for c in MetricConfig::default().criteria() {
            assert_eq!(
                match_clip(&[pred(&g, 0.9)], std::slice::from_ref(&g), &c).unwrap(),
                vec![true]
            );
        }
    }

    #[test]
    fn gt_is_consumed_once() {
        let g = gt(0.0, 1, 2, 1.0);
        let mut p2 = pred(&g, 0.8);
        p2.bbox = p2.bbox.translate(1.0, 0.0);
        let flags = match_clip(&[pred(&g, 0.9), p2], &[g], &MatchCriteria::noun()).unwrap();
        assert_eq!(flags, vec![true, false]);
    }

    #[test]
    fn ttc_outside_tolerance_is_fp() {
        let g = gt(0.0, 1, 2, 1.0);
        let mut p = pred(&g, 0.9);
        p.ttc_seconds = 1.3;
        assert_eq!(
            match_clip(&[p.clone()], std::slice::from_ref(&g), &MatchCriteria::noun_ttc()).unwrap(),
            vec![false]
        );
        assert_eq!(match_clip(&[p], &[g], &MatchCriteria::noun()).unwrap(), vec![true]);
    }

    #[test]
    fn more_than_five_is_a_protocol_error() {
        let g = gt(0.0, 1, 2, 1.0);
        let preds = vec![pred(&g, 0.5); 6];
        assert!(matches!(
            match_clip(&preds, &[g], &MatchCriteria::noun()),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[(0.9, true), (0.8, true)], 2), 1.0);
        assert_eq!(average_precision(&[], 3), 0.0);
        let ap = average_precision(&[(0.9, true), (0.8, false), (0.7, true)], 2);
        // by hand: 0.5 * 1.0 + 0.5 * (2/3)
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
        assert!((ap - 0.8333).abs() < 1e-4);
    }

    #[test]
    fn verbatim_predictions_score_one() {
        let mut gts = BTreeMap::new();
        let mut preds = BTreeMap::new();
        for c in 0..4 {
            let g = vec![gt(0.0, c % 3, c % 2, 0.5 + c as f64), gt(20.0, 5, 1, 2.0)];
            preds.insert(format!("c{c}"), g.iter().map(|a| pred(a, 1.0)).collect());
            gts.insert(format!("c{c}"), g);
        }
        let r = top5_map(&preds, &gts, &MetricConfig::default()).unwrap();
        assert_eq!(r.as_array(), [1.0; 4]);
        let r = top5_map(&BTreeMap::new(), &gts, &MetricConfig::default()).unwrap();
        assert_eq!(r.as_array(), [0.0; 4]);
    }

    #[test]
    fn unknown_clip_is_an_error() {
        let mut preds = BTreeMap::new();
        preds.insert("ghost".to_string(), Vec::new());
        assert!(top5_map(&preds, &BTreeMap::new(), &MetricConfig::default()).is_err());
    }

    #[test]
    fn table_row_fixture() {
        let r = MetricReport::from_percentages([20.52, 10.42, 7.28, 3.99]);
        assert_eq!(
            table_row("guided attention", &r),
            "| guided attention     | 20.52 | 10.42 | 7.28  | 3.99    |"
        );
        assert_eq!(table_row("x", &r).len(), TABLE_HEADER.len());
        assert!(r.key_values().contains("noun_ttc_map=7.28\n"));
    }

    #[test]
    fn oracle_agrees_on_simple_cases() {
        let g = gt(0.0, 1, 2, 1.0);
        let clips = vec![(vec![pred(&g, 0.9)], vec![g.clone()])];
        let o = brute_force_oracle(&clips, &MatchCriteria::overall()).unwrap();
        assert_eq!(
            o.flags[0],
            match_clip(&clips[0].0, &clips[0].1, &MatchCriteria::overall()).unwrap()
        );
        assert_eq!(o.map, 1.0);
        let none = vec![(vec![pred(&g, 0.9), pred(&gt(30.0, 2, 0, 1.0), 0.4)], vec![])];
        let o = brute_force_oracle(&none, &MatchCriteria::noun()).unwrap();
        assert_eq!(o.flags[0], vec![false, false]);
        assert_eq!(o.map, 0.0);
        let big = vec![(vec![pred(&g, 0.1); 9], vec![g])];
        assert!(brute_force_oracle(&big, &MatchCriteria::noun()).is_err());
    }
}
