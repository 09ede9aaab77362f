//! Accuracy and group-fairness metrics. Groups are indexed by the minority
//! flag: group 0 is `s = 0`, group 1 is `s = 1`. With more than two classes
//! the rate-based metrics treat `positive_class` one-vs-rest.

use serde::{Deserialize, Serialize};

use crate::error::{dim, FairNetError, Result};

/// Confusion counts of one group for the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub correct: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn tpr(&self) -> Option<f64> {
        let p = self.tp + self.fn_;
        (p > 0).then(|| self.tp as f64 / p as f64)
    }

    pub fn fpr(&self) -> Option<f64> {
        let n = self.fp + self.tn;
        (n > 0).then(|| self.fp as f64 / n as f64)
    }

    pub fn positive_rate(&self) -> Option<f64> {
        let t = self.total();
        (t > 0).then(|| (self.tp + self.fp) as f64 / t as f64)
    }

    pub fn accuracy(&self) -> Option<f64> {
        let t = self.total();
        (t > 0).then(|| self.correct as f64 / t as f64)
    }
}

pub fn group_confusion(
    preds: &[usize],
    y: &[usize],
    minority: &[bool],
    positive_class: usize,
) -> Result<[Confusion; 2]> {
    if preds.len() != y.len() || y.len() != minority.len() {
        return Err(dim("predictions, labels and groups differ in length"));
    }
    let mut out = [Confusion::default(); 2];
    for ((&p, &t), &m) in preds.iter().zip(y).zip(minority) {
        let c = &mut out[usize::from(m)];
        let (pp, tp) = (p == positive_class, t == positive_class);
        match (pp, tp) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
        c.correct += usize::from(p == t);
    }
    Ok(out)
}

fn require_groups(conf: &[Confusion; 2]) -> Result<()> {
    for (g, c) in conf.iter().enumerate() {
        if c.total() == 0 {
            return Err(FairNetError::InsufficientData(format!(
                "group s={g} is empty"
            )));
        }
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], y: &[usize]) -> Result<f64> {
    if preds.len() != y.len() {
        return Err(dim("predictions and labels differ in length"));
    }
    if preds.is_empty() {
        return Err(FairNetError::InsufficientData(
            "accuracy of an empty set".into(),
        ));
    }
    Ok(preds.iter().zip(y).filter(|(p, t)| p == t).count() as f64 / preds.len() as f64)
}

pub fn group_accuracy(preds: &[usize], y: &[usize], minority: &[bool]) -> Result<[f64; 2]> {
    let conf = group_confusion(preds, y, minority, 1)?;
    require_groups(&conf)?;
    Ok([
        conf[0].accuracy().expect("non-empty"),
        conf[1].accuracy().expect("non-empty"),
    ])
}

pub fn wga(preds: &[usize], y: &[usize], minority: &[bool]) -> Result<f64> {
    let g = group_accuracy(preds, y, minority)?;
    Ok(g[0].min(g[1]))
}

fn abs_gap(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some((a? - b?).abs())
}

/// `½(|ΔTPR| + |ΔFPR|)`; `None` when a group lacks positives or negatives.
pub fn eod(
    preds: &[usize],
    y: &[usize],
    minority: &[bool],
    positive_class: usize,
) -> Result<Option<f64>> {
    let c = group_confusion(preds, y, minority, positive_class)?;
    require_groups(&c)?;
    let dt = abs_gap(c[0].tpr(), c[1].tpr());
    let df = abs_gap(c[0].fpr(), c[1].fpr());
    Ok(dt.zip(df).map(|(a, b)| 0.5 * (a + b)))
}

/// `|P(Ŷ=1|S=0) − P(Ŷ=1|S=1)|`.
pub fn dp(preds: &[usize], minority: &[bool], positive_class: usize) -> Result<f64> {
    let y = vec![0; preds.len()];
    let c = group_confusion(preds, &y, minority, positive_class)?;
    require_groups(&c)?;
    Ok(abs_gap(c[0].positive_rate(), c[1].positive_rate()).expect("non-empty groups"))
}

/// `|TPR₀ − TPR₁|`; `None` when a group has no positives.
pub fn eop(
    preds: &[usize],
    y: &[usize],
    minority: &[bool],
    positive_class: usize,
) -> Result<Option<f64>> {
    let c = group_confusion(preds, y, minority, positive_class)?;
    require_groups(&c)?;
    Ok(abs_gap(c[0].tpr(), c[1].tpr()))
}

/// Metrics block; fractions in `[0, 1]`, `None` serialises as `null`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub acc: f64,
    pub group_acc: [f64; 2],
    pub wga: f64,
    pub eod: Option<f64>,
    pub dp: f64,
    pub eop: Option<f64>,
}

pub fn fairness_report(
    preds: &[usize],
    y: &[usize],
    minority: &[bool],
    positive_class: usize,
) -> Result<FairnessReport> {
    let c = group_confusion(preds, y, minority, positive_class)?;
    require_groups(&c)?;
    let group_acc = [
        c[0].accuracy().expect("non-empty"),
        c[1].accuracy().expect("non-empty"),
    ];
    let dt = abs_gap(c[0].tpr(), c[1].tpr());
    let df = abs_gap(c[0].fpr(), c[1].fpr());
    Ok(FairnessReport {
        acc: accuracy(preds, y)?,
        group_acc,
        wga: group_acc[0].min(group_acc[1]),
        eod: dt.zip(df).map(|(a, b)| 0.5 * (a + b)),
        dp: abs_gap(c[0].positive_rate(), c[1].positive_rate()).expect("non-empty groups"),
        eop: dt,
    })
}

/// One decimal place in percent, `n/a` for undefined values.
pub fn percent(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.1}", 100.0 * x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_examples() {
        // Group accuracies 0.9 / 0.7.
        let mut preds = vec![1; 20];
        let y = vec![1; 20];
        let m: Vec<bool> = (0..20).map(|i| i >= 10).collect();
        preds[0] = 0;
        preds[10] = 0;
        preds[11] = 0;
        preds[12] = 0;
        assert_eq!(group_accuracy(&preds, &y, &m).unwrap(), [0.9, 0.7]);
        assert_eq!(wga(&preds, &y, &m).unwrap(), 0.7);
        assert_eq!(wga(&y, &y, &m).unwrap(), 1.0);
        assert_eq!(eod(&y, &y, &m, 1).unwrap(), None);

        // TPRs 0.9 / 0.7 and FPRs 0.2 / 0.1 over 10 positives and 10 negatives per group.
        let mut preds = Vec::new();
        let mut y = Vec::new();
        let mut m = Vec::new();
        for (g, tp, fp) in [(false, 9, 2), (true, 7, 1)] {
            for i in 0..10 {
                y.push(1);
                preds.push(usize::from(i < tp));
                m.push(g);
            }
            for i in 0..10 {
                y.push(0);
                preds.push(usize::from(i < fp));
                m.push(g);
            }
        }
        let e = eod(&preds, &y, &m, 1).unwrap().unwrap();
        assert!((e - 0.15).abs() < 1e-15);
        assert_eq!(eod(&y, &y, &m, 1).unwrap(), Some(0.0));
        let all_pos = vec![1; y.len()];
        assert_eq!(dp(&all_pos, &m, 1).unwrap(), 0.0);
        assert_eq!(eop(&all_pos, &y, &m, 1).unwrap(), Some(0.0));
    }

    #[test]
    fn empty_group_is_an_error() {
        assert!(wga(&[1, 0], &[1, 1], &[false, false]).is_err());
        assert!(dp(&[1, 0], &[true, true], 1).is_err());
    }

    #[test]
    fn wga_below_acc_below_max() {
        let mut rng = crate::rng::SplitMix64::new(8);
        for _ in 0..1000 {
            let n = 2 + rng.below(30);
            let preds: Vec<usize> = (0..n).map(|_| rng.below(2)).collect();
            let y: Vec<usize> = (0..n).map(|_| rng.below(2)).collect();
            let mut m: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.3)).collect();
            m[0] = false;
            m[1] = true;
            let r = fairness_report(&preds, &y, &m, 1).unwrap();
            assert!(r.wga <= r.acc + 1e-15);
            assert!(r.acc <= r.group_acc[0].max(r.group_acc[1]) + 1e-15);
        }
    }

    #[test]
    fn undefined_serialises_as_null() {
        let r = FairnessReport {
            acc: 1.0,
            group_acc: [1.0, 1.0],
            wga: 1.0,
            eod: None,
            dp: 0.0,
            eop: None,
        };
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"eod\":null"));
        assert_eq!(percent(Some(0.8825)), "88.2");
        assert_eq!(percent(None), "n/a");
    }
}
