//! JSON and CSV emitters for reports, histograms, logs and sweeps.

use std::fmt::Write as _;

use serde_json::{json, Map, Value};
use sgt_core::baseline::SweepRow;
use sgt_core::eval::UtilityMetrics;
use sgt_core::privacy::{AttackResult, PrivacyReport, RankHistogram};
use sgt_core::train::{ProbeLog, StepLog};

pub const REPORT_SCHEMA_VERSION: u64 = 1;

fn pairs(v: &[(usize, f64)]) -> Value {
    let mut m = Map::new();
    for (k, x) in v {
        m.insert(k.to_string(), json!(x));
    }
    Value::Object(m)
}

pub fn utility_json(u: &UtilityMetrics) -> Value {
    json!({
        "top1_agreement": u.top1_agreement,
        "ce_gap": u.ce_gap,
        "positions": u.positions,
    })
}

pub fn report_json(r: &PrivacyReport, u: &UtilityMetrics) -> Value {
    json!({
        "schema_version": REPORT_SCHEMA_VERSION,
        "mechanism": r.mechanism,
        "nn_fr": r.nn_fr,
        "mrp_fr": r.mrp_fr,
        "mrp_r": r.mrp_r,
        "ttr": pairs(&r.ttr),
        "sym_ttr": pairs(&r.sym_ttr),
        "hist_entropy": r.hist_entropy,
        "mi_per_feature": r.mi_per_feature,
        "mi_feature_sum": r.mi_feature_sum,
        "pac_adv": r.pac_adv,
        "pac_n": r.pac_n,
        "tokens": r.tokens,
        "calibration_tokens": r.calibration_tokens,
        "mi_samples": r.mi_samples,
        "mi_components": r.mi_components,
        "utility": utility_json(u),
    })
}

/// Structural check of an emitted report: every field present with the
/// right type and every percentage within [0, 100].
pub fn validate_report_json(v: &Value) -> Result<(), String> {
    let obj = v.as_object().ok_or("report is not an object")?;
    let num = |k: &str| obj.get(k).and_then(Value::as_f64).ok_or(format!("missing number {k}"));
    let opt_num = |k: &str| match obj.get(k) {
        Some(Value::Null) => Ok(None),
        Some(x) => x.as_f64().map(Some).ok_or(format!("{k} is not a number")),
        None => Err(format!("missing {k}")),
    };
    let pct = |k: &str, x: f64| {
        if (0.0..=100.0).contains(&x) {
            Ok(())
        } else {
            Err(format!("{k} = {x} outside [0, 100]"))
        }
    };
    if obj.get("schema_version").and_then(Value::as_u64) != Some(REPORT_SCHEMA_VERSION) {
        return Err("bad schema_version".into());
    }
    obj.get("mechanism").and_then(Value::as_str).ok_or("missing mechanism")?;
    for k in ["nn_fr", "mrp_fr", "hist_entropy"] {
        pct(k, num(k)?)?;
    }
    for k in ["mrp_r", "pac_n", "tokens", "calibration_tokens", "mi_samples", "mi_components"] {
        obj.get(k).and_then(Value::as_u64).ok_or(format!("missing integer {k}"))?;
    }
    if let Some(p) = opt_num("pac_adv")? {
        pct("pac_adv", p)?;
    }
    opt_num("mi_per_feature")?;
    opt_num("mi_feature_sum")?;
    for k in ["ttr", "sym_ttr"] {
        let m = obj.get(k).and_then(Value::as_object).ok_or(format!("missing map {k}"))?;
        for (kk, x) in m {
            kk.parse::<usize>().map_err(|_| format!("{k} key {kk} is not an integer"))?;
            pct(k, x.as_f64().ok_or(format!("{k}.{kk} is not a number"))?)?;
        }
    }
    let u = obj.get("utility").and_then(Value::as_object).ok_or("missing utility")?;
    let agree = u.get("top1_agreement").and_then(Value::as_f64).ok_or("missing top1_agreement")?;
    pct("top1_agreement", agree)?;
    u.get("ce_gap").and_then(Value::as_f64).ok_or("missing ce_gap")?;
    Ok(())
}

pub fn histogram_csv(h: &RankHistogram) -> String {
    let mut s = String::from("rank,count\n");
    for (i, c) in h.counts().iter().enumerate() {
        let _ = writeln!(s, "{},{}", i + 1, c);
    }
    s
}

pub const LOSS_HEADER: &str = "step,lr,alpha_mi,grad_norm,total,utility,mi,abscos,norm,demonstrative\n";

pub fn loss_row(l: &StepLog) -> String {
    let b = &l.loss;
    format!(
        "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}\n",
        l.step, l.lr, l.alpha_mi, l.grad_norm, b.total, b.utility, b.mi, b.abscos, b.norm_penalty, b.demonstrative
    )
}

pub const PROBE_HEADER: &str = "step,nn_fr,top1_agreement,ce_gap\n";

pub fn probe_row(p: &ProbeLog) -> String {
    format!(
        "{},{},{},{}\n",
        p.step, p.nn_fr, p.utility.top1_agreement, p.utility.ce_gap
    )
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("sigma,epsilon,utility_agreement,utility_ce_gap,nn_fr\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.sigma, r.epsilon, r.utility.top1_agreement, r.utility.ce_gap, r.nn_fr
        );
    }
    s
}

pub fn attack_csv(r: &AttackResult) -> String {
    let mut s = String::from("position,truth,predicted,failure\n");
    for (i, ((t, p), f)) in r.truth.iter().zip(&r.predicted).zip(&r.failures).enumerate() {
        let _ = writeln!(s, "{i},{t},{p},{}", u8::from(*f));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> PrivacyReport {
        PrivacyReport {
            mechanism: "gaussian".into(),
            nn_fr: 12.5,
            mrp_fr: 40.0,
            mrp_r: 200,
            ttr: vec![(1, 12.5), (5, 3.0)],
            sym_ttr: vec![(1, 12.5), (5, 1.0)],
            hist_entropy: 20.0,
            mi_per_feature: Some(0.5),
            mi_feature_sum: Some(16.0),
            pac_adv: Some(3.1),
            pac_n: 256,
            tokens: 100,
            calibration_tokens: 20,
            mi_samples: 1000,
            mi_components: 64,
        }
    }

    #[test]
    fn report_json_passes_schema() {
        let u = UtilityMetrics {
            top1_agreement: 97.0,
            ce_gap: 0.01,
            positions: 100,
        };
        let v = report_json(&report(), &u);
        validate_report_json(&v).unwrap();
        let mut bad = v.clone();
        bad["nn_fr"] = json!(120.0);
        assert!(validate_report_json(&bad).is_err());
        let mut bad = v.clone();
        bad.as_object_mut().unwrap().remove("ttr");
        assert!(validate_report_json(&bad).is_err());
        let mut skipped = report();
        skipped.mi_per_feature = None;
        skipped.pac_adv = None;
        validate_report_json(&report_json(&skipped, &u)).unwrap();
    }

    #[test]
    fn histogram_csv_lists_every_rank() {
        let h = RankHistogram::from_ranks(&[1, 1, 4], 4).unwrap();
        assert_eq!(histogram_csv(&h), "rank,count\n1,2\n2,0\n3,0\n4,1\n");
    }
}
