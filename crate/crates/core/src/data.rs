//! Biased synthetic datasets, CSV ingestion, sensitive-label masking, label
//! noise and stratified splitting.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, FairNetError, Result};
use crate::numerics::Matrix;
use crate::rng::SplitMix64;

/// Sensitive attribute value; `Unlabeled` is an explicit third state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sensitive {
    Zero,
    One,
    Unlabeled,
}

impl Sensitive {
    pub fn from_bit(minority: bool) -> Self {
        if minority {
            Sensitive::One
        } else {
            Sensitive::Zero
        }
    }

    /// `Some(true)` for the minority group, `None` when unlabeled.
    pub fn label(self) -> Option<bool> {
        match self {
            Sensitive::Zero => Some(false),
            Sensitive::One => Some(true),
            Sensitive::Unlabeled => None,
        }
    }

    pub fn is_labeled(self) -> bool {
        self != Sensitive::Unlabeled
    }

    fn flipped(self) -> Self {
        match self {
            Sensitive::Zero => Sensitive::One,
            Sensitive::One => Sensitive::Zero,
            Sensitive::Unlabeled => Sensitive::Unlabeled,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(tag: &str) -> Option<Self> {
        match tag {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    y: Vec<usize>,
    s: Vec<Sensitive>,
    split: Vec<Split>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        y: Vec<usize>,
        s: Vec<Sensitive>,
        split: Vec<Split>,
    ) -> Result<Self> {
        let n = features.rows();
        if y.len() != n || s.len() != n || split.len() != n {
            return Err(invalid(format!(
                "dataset columns disagree: {n} rows, {} labels, {} sensitive, {} split tags",
                y.len(),
                s.len(),
                split.len()
            )));
        }
        if features.cols() == 0 {
            return Err(invalid("dataset needs at least one feature"));
        }
        let num_classes = y.iter().copied().max().map_or(2, |m| (m + 1).max(2));
        Ok(Self {
            features,
            y,
            s,
            split,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn x(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn y(&self) -> &[usize] {
        &self.y
    }

    pub fn s(&self) -> &[Sensitive] {
        &self.s
    }

    pub fn split(&self) -> &[Split] {
        &self.split
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.split[i] == split)
            .collect()
    }

    pub fn set_sensitive(&mut self, s: Vec<Sensitive>) -> Result<()> {
        if s.len() != self.len() {
            return Err(invalid("sensitive column length"));
        }
        self.s = s;
        Ok(())
    }

    /// Every sample of `split` loses its sensitive label.
    pub fn unlabel_split(&self, split: Split) -> Dataset {
        let mut out = self.clone();
        for (s, &tag) in out.s.iter_mut().zip(&self.split) {
            if tag == split {
                *s = Sensitive::Unlabeled;
            }
        }
        out
    }
}

/// Parameters of the spurious-correlation generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n: usize,
    pub d: usize,
    /// Minority fraction `P(S = 1)`.
    pub p: f64,
    /// Probability that the spurious feature agrees with `y` in the majority.
    pub align: f64,
    /// Class separation of the core feature.
    pub signal_snr: f64,
    /// Class separation of the spurious feature.
    pub spurious_snr: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 10_000,
            d: 10,
            p: 0.1,
            align: 0.95,
            // Φ(1.2816) ≈ 0.90: the Bayes classifier on the core feature alone.
            signal_snr: 1.2816,
            spurious_snr: 3.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(invalid(format!(
                "minority fraction p = {} outside (0, 1)",
                self.p
            )));
        }
        if !(0.5..=1.0).contains(&self.align) {
            return Err(invalid(format!("align = {} outside [0.5, 1]", self.align)));
        }
        if self.d < 2 {
            return Err(invalid("synthetic data needs d >= 2"));
        }
        if self.n == 0 {
            return Err(invalid("synthetic data needs n >= 1"));
        }
        if !self.signal_snr.is_finite() || !self.spurious_snr.is_finite() {
            return Err(invalid("non-finite signal strength"));
        }
        Ok(())
    }
}

/// Binary task with one core feature, one spurious feature and `d − 2`
/// noise features. The spurious feature agrees with `y` with probability
/// `align` in the majority and `1 − align` in the minority. Every sample is
/// tagged `train`; call [`stratified_split`] afterwards.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = SplitMix64::new(cfg.seed);
    let mut values = Vec::with_capacity(cfg.n * cfg.d);
    let mut y = Vec::with_capacity(cfg.n);
    let mut s = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let label = usize::from(rng.bernoulli(0.5));
        let minority = rng.bernoulli(cfg.p);
        let agree_prob = if minority { 1.0 - cfg.align } else { cfg.align };
        let spurious_label = if rng.bernoulli(agree_prob) {
            label
        } else {
            1 - label
        };
        let sign = |c: usize| if c == 1 { 1.0 } else { -1.0 };
        values.push(cfg.signal_snr * sign(label) + rng.normal());
        values.push(cfg.spurious_snr * sign(spurious_label) + rng.normal());
        for _ in 2..cfg.d {
            values.push(rng.normal());
        }
        y.push(label);
        s.push(Sensitive::from_bit(minority));
    }
    let features = Matrix::from_vec(cfg.n, cfg.d, values)?;
    Dataset::new(features, y, s, vec![Split::Train; cfg.n])
}

fn parse_err(line: u64, msg: impl Into<String>) -> FairNetError {
    FairNetError::Parse {
        line,
        msg: msg.into(),
    }
}

/// Reads the `f0,…,f{d−1},label,sensitive,split` format. A blank
/// `sensitive` field means unlabeled.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::None)
        .from_path(path.as_ref())
        .map_err(|e| parse_err(1, e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 4 {
        return Err(parse_err(
            1,
            "header needs at least one feature plus label,sensitive,split",
        ));
    }
    let d = cols.len() - 3;
    for (i, name) in cols[..d].iter().enumerate() {
        if *name != format!("f{i}") {
            return Err(parse_err(
                1,
                format!("expected column f{i}, found {name:?}"),
            ));
        }
    }
    if cols[d..] != ["label", "sensitive", "split"] {
        return Err(parse_err(
            1,
            "last three columns must be label,sensitive,split",
        ));
    }

    let mut values = Vec::new();
    let mut y = Vec::new();
    let mut s = Vec::new();
    let mut split = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != d + 3 {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", d + 3, record.len()),
            ));
        }
        for (i, field) in record.iter().take(d).enumerate() {
            if field.is_empty() {
                return Err(parse_err(line, format!("empty feature f{i}")));
            }
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line, format!("non-numeric feature f{i}: {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite feature f{i}")));
            }
            values.push(v);
        }
        let label: usize = record[d]
            .parse()
            .map_err(|_| parse_err(line, format!("bad label {:?}", &record[d])))?;
        let sens = match &record[d + 1] {
            "" => Sensitive::Unlabeled,
            "0" => Sensitive::Zero,
            "1" => Sensitive::One,
            other => return Err(parse_err(line, format!("bad sensitive value {other:?}"))),
        };
        let tag = Split::parse(&record[d + 2])
            .ok_or_else(|| parse_err(line, format!("unknown split tag {:?}", &record[d + 2])))?;
        y.push(label);
        s.push(sens);
        split.push(tag);
    }
    let n = y.len();
    Dataset::new(Matrix::from_vec(n, d, values)?, y, s, split)
}

pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let d = dataset.dim();
    let header: Vec<String> = (0..d).map(|i| format!("f{i}")).collect();
    writeln!(out, "{},label,sensitive,split", header.join(","))?;
    for i in 0..dataset.len() {
        let mut line = String::new();
        for v in dataset.x(i) {
            line.push_str(&format!("{v:.16e},"));
        }
        let sens = match dataset.s[i] {
            Sensitive::Zero => "0",
            Sensitive::One => "1",
            Sensitive::Unlabeled => "",
        };
        line.push_str(&format!(
            "{},{},{}",
            dataset.y[i],
            sens,
            dataset.split[i].as_str()
        ));
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(invalid(format!("{name} = {v} outside [0, 1]")));
    }
    Ok(())
}

/// Keeps the sensitive label on exactly `round(k · n_train)` training
/// samples chosen uniformly without replacement. Other splits are untouched.
pub fn mask_sensitive(dataset: &Dataset, keep_fraction: f64, seed: u64) -> Result<Dataset> {
    check_fraction("keep fraction", keep_fraction)?;
    let train = dataset.indices(Split::Train);
    if train.iter().any(|&i| !dataset.s[i].is_labeled()) {
        return Err(invalid("mask_sensitive needs fully labeled training data"));
    }
    let keep = (keep_fraction * train.len() as f64).round() as usize;
    let mut order = train.clone();
    SplitMix64::new(seed).shuffle(&mut order);
    let mut out = dataset.clone();
    for &i in &order[keep.min(order.len())..] {
        out.s[i] = Sensitive::Unlabeled;
    }
    Ok(out)
}

/// Flips each labeled training-split sensitive value independently with
/// probability `rate`.
pub fn inject_label_noise(dataset: &Dataset, rate: f64, seed: u64) -> Result<Dataset> {
    check_fraction("noise rate", rate)?;
    let mut rng = SplitMix64::new(seed);
    let mut out = dataset.clone();
    for i in dataset.indices(Split::Train) {
        // One draw per training sample keeps the stream aligned across rates.
        let hit = rng.next_f64() < rate;
        if hit {
            out.s[i] = out.s[i].flipped();
        }
    }
    Ok(out)
}

/// Replaces each labeled training-split sensitive value, with probability
/// `rate`, by a fair coin. At `rate = 1` the labels carry no information.
pub fn randomize_labels(dataset: &Dataset, rate: f64, seed: u64) -> Result<Dataset> {
    check_fraction("noise rate", rate)?;
    let mut rng = SplitMix64::new(seed);
    let mut out = dataset.clone();
    for i in dataset.indices(Split::Train) {
        let hit = rng.next_f64() < rate;
        let coin = rng.bernoulli(0.5);
        if hit && out.s[i].is_labeled() {
            out.s[i] = Sensitive::from_bit(coin);
        }
    }
    Ok(out)
}

/// Splits every `(y, s)` cell proportionally to `ratios` (train, val,
/// test) using largest-remainder rounding.
pub fn stratified_split(dataset: &Dataset, ratios: [f64; 3], seed: u64) -> Result<Dataset> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r))
        || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(invalid(format!(
            "split ratios {ratios:?} must be in [0,1] and sum to 1"
        )));
    }
    let parts = ratios.iter().filter(|&&r| r > 0.0).count();
    let mut cells: BTreeMap<(usize, Sensitive), Vec<usize>> = BTreeMap::new();
    for i in 0..dataset.len() {
        cells
            .entry((dataset.y[i], dataset.s[i]))
            .or_default()
            .push(i);
    }
    let mut rng = SplitMix64::new(seed);
    let mut out = dataset.clone();
    for ((label, sens), mut members) in cells {
        let m = members.len();
        if m < parts {
            return Err(FairNetError::InsufficientData(format!(
                "cell (y={label}, s={sens:?}) has {m} samples for {parts} splits"
            )));
        }
        rng.shuffle(&mut members);
        let counts = apportion(m, &ratios);
        let mut cursor = 0;
        for (split, count) in Split::ALL.iter().zip(counts) {
            for &i in &members[cursor..cursor + count] {
                out.split[i] = *split;
            }
            cursor += count;
        }
    }
    Ok(out)
}

fn apportion(m: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let ideal: Vec<f64> = ratios.iter().map(|r| r * m as f64).collect();
    let mut counts = [0usize; 3];
    for (c, v) in counts.iter_mut().zip(&ideal) {
        *c = v.floor() as usize;
    }
    let mut remaining = m - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).filter(|&k| ratios[k] > 0.0).collect();
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - ideal[a].floor();
        let fb = ideal[b] - ideal[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        counts[k] += 1;
        remaining -= 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, seed: u64) -> Dataset {
        generate_synthetic(&SynthConfig {
            n,
            seed,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn synthetic_is_reproducible_and_validated() {
        assert_eq!(small(300, 4), small(300, 4));
        assert_ne!(small(300, 4), small(300, 5));
        for bad in [
            SynthConfig {
                p: 0.0,
                ..SynthConfig::default()
            },
            SynthConfig {
                p: 1.0,
                ..SynthConfig::default()
            },
            SynthConfig {
                align: 0.4,
                ..SynthConfig::default()
            },
            SynthConfig {
                align: 1.1,
                ..SynthConfig::default()
            },
        ] {
            assert!(generate_synthetic(&bad).is_err());
        }
    }

    #[test]
    fn minority_fraction_within_three_sigma() {
        let ds = generate_synthetic(&SynthConfig {
            n: 10_000,
            p: 0.1,
            align: 0.95,
            ..SynthConfig::default()
        })
        .unwrap();
        let ones = ds.s().iter().filter(|s| **s == Sensitive::One).count() as f64;
        let sigma = (10_000.0f64 * 0.1 * 0.9).sqrt();
        assert!((ones - 1000.0).abs() <= 3.0 * sigma, "{ones}");
    }

    #[test]
    fn spurious_probe_accuracy_by_group() {
        let ds = generate_synthetic(&SynthConfig {
            n: 20_000,
            p: 0.1,
            align: 0.95,
            ..SynthConfig::default()
        })
        .unwrap();
        let mut hits = [0usize; 2];
        let mut tot = [0usize; 2];
        for i in 0..ds.len() {
            let g = usize::from(ds.s()[i] == Sensitive::One);
            let pred = usize::from(ds.x(i)[1] > 0.0);
            tot[g] += 1;
            hits[g] += usize::from(pred == ds.y()[i]);
        }
        let maj = hits[0] as f64 / tot[0] as f64;
        let min = hits[1] as f64 / tot[1] as f64;
        assert!((maj - 0.95).abs() < 0.01, "majority probe {maj}");
        assert!((min - 0.05).abs() < 0.03, "minority probe {min}");
    }

    #[test]
    fn no_alignment_gives_symmetric_groups() {
        let ds = generate_synthetic(&SynthConfig {
            n: 20_000,
            p: 0.5,
            align: 0.5,
            ..SynthConfig::default()
        })
        .unwrap();
        let mut hits = [0f64; 2];
        let mut tot = [0f64; 2];
        for i in 0..ds.len() {
            let g = usize::from(ds.s()[i] == Sensitive::One);
            tot[g] += 1.0;
            hits[g] += f64::from(u8::from((ds.x(i)[1] > 0.0) == (ds.y()[i] == 1)));
        }
        assert!((hits[0] / tot[0] - hits[1] / tot[1]).abs() < 0.03);
    }

    #[test]
    fn mask_keeps_exact_count() {
        let ds = small(1000, 1);
        assert_eq!(mask_sensitive(&ds, 1.0, 9).unwrap(), ds);
        let none = mask_sensitive(&ds, 0.0, 9).unwrap();
        assert!(none.s().iter().all(|s| !s.is_labeled()));
        let part = mask_sensitive(&ds, 0.25, 9).unwrap();
        assert_eq!(part.s().iter().filter(|s| s.is_labeled()).count(), 250);
        assert_eq!(part.features(), ds.features());
        assert_eq!(part.y(), ds.y());
        assert_eq!(part.split(), ds.split());
        assert!(mask_sensitive(&ds, 1.5, 9).is_err());
        assert!(mask_sensitive(&none, 0.5, 9).is_err());
    }

    #[test]
    fn mask_count_matches_label_fraction_table() {
        // 0.1% of 162 688 training samples keeps 163 labels.
        assert_eq!((0.001f64 * 162_688.0).round() as usize, 163);
        let n = 162_688;
        let features = Matrix::zeros(n, 1);
        let ds = Dataset::new(
            features,
            vec![0; n],
            vec![Sensitive::Zero; n],
            vec![Split::Train; n],
        )
        .unwrap();
        let masked = mask_sensitive(&ds, 0.001, 3).unwrap();
        assert_eq!(masked.s().iter().filter(|s| s.is_labeled()).count(), 163);
    }

    #[test]
    fn label_noise_rates() {
        let ds = small(10_000, 2);
        assert_eq!(inject_label_noise(&ds, 0.0, 1).unwrap(), ds);
        let all = inject_label_noise(&ds, 1.0, 1).unwrap();
        assert!(all.s().iter().zip(ds.s()).all(|(a, b)| a != b));
        assert_eq!(inject_label_noise(&all, 1.0, 77).unwrap(), ds);
        let half = inject_label_noise(&ds, 0.5, 3).unwrap();
        let flipped = half.s().iter().zip(ds.s()).filter(|(a, b)| a != b).count() as f64;
        assert!((flipped - 5000.0).abs() <= 3.0 * 50.0, "{flipped}");
        assert!(inject_label_noise(&ds, -0.1, 1).is_err());
    }

    #[test]
    fn randomized_labels_are_uninformative_at_full_rate() {
        let ds = small(10_000, 2);
        assert_eq!(randomize_labels(&ds, 0.0, 1).unwrap(), ds);
        let r = randomize_labels(&ds, 1.0, 1).unwrap();
        let ones = r.s().iter().filter(|s| **s == Sensitive::One).count() as f64;
        assert!((ones - 5000.0).abs() <= 150.0);
    }

    #[test]
    fn stratified_split_proportions() {
        let ds = generate_synthetic(&SynthConfig {
            n: 1000,
            p: 0.5,
            align: 0.5,
            ..SynthConfig::default()
        })
        .unwrap();
        let all_train = stratified_split(&ds, [1.0, 0.0, 0.0], 3).unwrap();
        assert!(all_train.split().iter().all(|&t| t == Split::Train));

        let split = stratified_split(&ds, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!(split, stratified_split(&ds, [0.8, 0.1, 0.1], 3).unwrap());
        let mut cells: BTreeMap<(usize, Sensitive), [usize; 3]> = BTreeMap::new();
        for i in 0..split.len() {
            let e = cells.entry((split.y()[i], split.s()[i])).or_default();
            e[split.split()[i] as usize] += 1;
        }
        for counts in cells.values() {
            let m: usize = counts.iter().sum();
            for (c, r) in counts.iter().zip([0.8, 0.1, 0.1]) {
                assert!((*c as f64 - r * m as f64).abs() <= 1.0);
            }
        }
        assert!(stratified_split(&ds, [0.5, 0.2, 0.2], 3).is_err());
    }

    #[test]
    fn tiny_cell_is_rejected() {
        let features = Matrix::zeros(4, 1);
        let ds = Dataset::new(
            features,
            vec![0, 0, 0, 1],
            vec![Sensitive::Zero; 4],
            vec![Split::Train; 4],
        )
        .unwrap();
        assert!(matches!(
            stratified_split(&ds, [0.8, 0.1, 0.1], 0),
            Err(FairNetError::InsufficientData(_))
        ));
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let mut ds = stratified_split(&small(100, 8), [0.8, 0.1, 0.1], 1).unwrap();
        let mut s = ds.s().to_vec();
        s[3] = Sensitive::Unlabeled;
        ds.set_sensitive(s).unwrap();
        save_csv(&ds, &path).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back, ds);
        assert!(back
            .features()
            .values()
            .iter()
            .zip(ds.features().values())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        let cases = [
            (
                "f0,f1,label,sensitive,split\n1,2,0,1,train\n,2,1,0,test\n",
                3,
            ),
            ("f0,f1,label,sensitive,split\n1,abc,0,1,train\n", 2),
            (
                "f0,f1,label,sensitive,split\n1,2,0,1,train\n1,2,0,1,train\n1,2,0,1,holdout\n",
                4,
            ),
            ("f0,f1,label,sensitive,split\n1,2,0,1\n", 2),
        ];
        for (text, line) in cases {
            std::fs::write(&path, text).unwrap();
            match load_csv(&path) {
                Err(FairNetError::Parse { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("expected parse error, got {other:?}"),
            }
        }
        std::fs::write(&path, "f0,f1,label,sensitive,split\n1,2,0,,val\n").unwrap();
        let ds = load_csv(&path).unwrap();
        assert_eq!(ds.s()[0], Sensitive::Unlabeled);
        assert_eq!(ds.split()[0], Split::Val);
    }
}
