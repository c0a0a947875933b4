//! CSV renderings of evaluation results.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{CodeMatch, PriorReport, RocCurve, SetSizeCurve};

pub fn consistency_csv(m: &CodeMatch, identity_ids: &[usize]) -> String {
    let mut s = String::from("set,identity,code_match_rate\n");
    for (i, (r, id)) in m.per_set.iter().zip(identity_ids).enumerate() {
        let _ = writeln!(s, "{i},{id},{r}");
    }
    let _ = writeln!(s, "mean,,{}", m.mean);
    s
}

pub fn setsize_csv(c: &SetSizeCurve) -> String {
    let mut s = String::from("k,mean_hamming,mean_consistency\n");
    for p in &c.points {
        let _ = writeln!(s, "{},{},{}", p.k, p.mean_hamming, p.mean_consistency);
    }
    s
}

pub fn roc_csv(curves: &BTreeMap<String, RocCurve>) -> String {
    let mut s = String::from("condition,fpr,tpr\n");
    for (name, c) in curves {
        for (f, t) in &c.points {
            let _ = writeln!(s, "{name},{f},{t}");
        }
    }
    s
}

pub fn auc_csv(curves: &BTreeMap<String, RocCurve>) -> String {
    let mut s = String::from("condition,auc\n");
    for (name, c) in curves {
        let _ = writeln!(s, "{name},{}", c.auc);
    }
    s
}

pub fn prior_csv(r: &PriorReport) -> String {
    format!(
        "d_z,total_mass,support_codes,support_mass,renormalization_dominates\n{},{},{},{},{}\n",
        r.d_z,
        r.total_mass,
        r.support.len(),
        r.support_mass,
        r.renormalization_dominates()
    )
}
