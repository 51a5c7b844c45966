//! Five-subset benchmark construction: a source subset A, a new-spoof-type
//! subset B, and attribute-shifted subsets C/D/E selected subject by subject
//! to hit requested marginals. Illumination annotations come from K-means
//! on simple luminance features with an elbow-selected K.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_manifest, DatasetManifest, Image, ImageSample, Label, SampleStore, Split};
use crate::error::{Error, Result};

pub const HISTOGRAM_BINS: usize = 8;
pub const FEATURE_LEN: usize = 2 + HISTOGRAM_BINS;

/// `(mean Y, std Y, 8-bin histogram of Y as fractions)` with
/// `Y = 0.299 R + 0.587 G + 0.114 B`.
pub fn illumination_features(image: &Image) -> Array1<f64> {
    let d = &image.data;
    let y = &d.index_axis(Axis(0), 0) * 0.299 + &d.index_axis(Axis(0), 1) * 0.587 + &d.index_axis(Axis(0), 2) * 0.114;
    let n = y.len().max(1) as f64;
    let mean = y.sum() / n;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let mut out = Array1::zeros(FEATURE_LEN);
    out[0] = mean;
    out[1] = var.sqrt();
    for &v in y.iter() {
        // Nudged so values on a bin edge are not pushed down by rounding.
        let bin = ((v * HISTOGRAM_BINS as f64 + 1e-9).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1);
        out[2 + bin] += 1.0 / n;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Array2<f64>,
    pub labels: Vec<usize>,
    pub sse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IlluminationClustering {
    pub k: usize,
    pub centroids: Array2<f64>,
    pub labels: Vec<usize>,
    /// `sse_curve[i]` is the best SSE for `K = i + 1`.
    pub sse_curve: Vec<f64>,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn assign(x: &Array2<f64>, c: &Array2<f64>) -> (Vec<usize>, f64) {
    let mut labels = Vec::with_capacity(x.nrows());
    let mut sse = 0.0;
    for row in x.outer_iter() {
        let (best, d) = c
            .outer_iter()
            .enumerate()
            .map(|(j, cj)| (j, sq_dist(row, cj)))
            .fold((0, f64::INFINITY), |acc, v| if v.1 < acc.1 { v } else { acc });
        labels.push(best);
        sse += d;
    }
    (labels, sse)
}

fn lloyd(x: &Array2<f64>, mut c: Array2<f64>, max_iter: usize) -> KMeansFit {
    let (mut labels, mut sse) = assign(x, &c);
    for _ in 0..max_iter {
        let k = c.nrows();
        // Means are accumulated as offsets from the first member, which is
        // exact for clusters of identical points.
        let mut anchors: Vec<Option<usize>> = vec![None; k];
        let mut sums = Array2::<f64>::zeros(c.dim());
        let mut counts = vec![0usize; k];
        for (i, (row, &l)) in x.outer_iter().zip(&labels).enumerate() {
            let a = *anchors[l].get_or_insert(i);
            sums.row_mut(l).scaled_add(1.0, &(&row - &x.row(a)));
            counts[l] += 1;
        }
        for j in 0..k {
            // Empty clusters keep their centroid.
            if let Some(a) = anchors[j] {
                c.row_mut(j).assign(&(&x.row(a) + &(&sums.row(j) / counts[j] as f64)));
            }
        }
        let (new_labels, new_sse) = assign(x, &c);
        let done = new_labels == labels;
        labels = new_labels;
        sse = new_sse;
        if done {
            break;
        }
    }
    KMeansFit { centroids: c, labels, sse }
}

fn kmeans_pp_init(x: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut c = Array2::zeros((k, x.ncols()));
    c.row_mut(0).assign(&x.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = x.outer_iter().map(|r| sq_dist(r, c.row(0))).collect();
    for j in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        };
        c.row_mut(j).assign(&x.row(pick));
        for (i, r) in x.outer_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, c.row(j)));
        }
    }
    c
}

/// Best of `restarts` k-means++ runs, plus one run seeded from `warm`
/// (a `K − 1` solution) extended by the point farthest from it.
pub fn kmeans(x: &Array2<f64>, k: usize, restarts: usize, seed: u64, warm: Option<&Array2<f64>>) -> Result<KMeansFit> {
    let n = x.nrows();
    if k == 0 || k > n {
        return Err(Error::Data(format!("cannot form {k} clusters from {n} samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    let mut best: Option<KMeansFit> = None;
    let mut consider = |fit: KMeansFit| {
        if best.as_ref().is_none_or(|b| fit.sse < b.sse) {
            best = Some(fit);
        }
    };
    for _ in 0..restarts.max(1) {
        consider(lloyd(x, kmeans_pp_init(x, k, &mut rng), 100));
    }
    if let Some(w) = warm.filter(|w| w.nrows() + 1 == k) {
        let far = x
            .outer_iter()
            .enumerate()
            .map(|(i, r)| (i, w.outer_iter().map(|c| sq_dist(r, c)).fold(f64::INFINITY, f64::min)))
            .fold((0, -1.0), |acc, v| if v.1 > acc.1 { v } else { acc })
            .0;
        let mut c = Array2::zeros((k, x.ncols()));
        c.slice_mut(ndarray::s![..k - 1, ..]).assign(w);
        c.row_mut(k - 1).assign(&x.row(far));
        consider(lloyd(x, c, 100));
    }
    Ok(best.unwrap())
}

/// Knee of the SSE curve: the `K` farthest below the chord joining
/// `(1, S_1)` and `(K_max, S_Kmax)`, after normalising both axes.
pub fn elbow(sse: &[f64]) -> usize {
    let kmax = sse.len();
    if kmax == 0 {
        return 1;
    }
    let s1 = sse[0];
    if s1 <= 0.0 {
        return 1;
    }
    if kmax < 3 {
        return if sse[kmax - 1] < 0.5 * s1 { kmax } else { 1 };
    }
    let last = sse[kmax - 1];
    let mut best = (1, 0.0);
    for (i, &s) in sse.iter().enumerate() {
        let t = i as f64 / (kmax - 1) as f64;
        let chord = 1.0 + t * (last - s1) / s1;
        let gap = chord - s / s1;
        if gap > best.1 + 1e-12 {
            best = (i + 1, gap);
        }
    }
    best.0
}

pub fn cluster_features(x: &Array2<f64>, kmax: usize, restarts: usize, seed: u64) -> Result<IlluminationClustering> {
    if kmax == 0 {
        return Err(Error::Config("kmax must be at least 1".into()));
    }
    if x.nrows() < kmax {
        return Err(Error::Data(format!("{} samples is fewer than kmax = {kmax}", x.nrows())));
    }
    let mut fits: Vec<KMeansFit> = Vec::with_capacity(kmax);
    for k in 1..=kmax {
        let fit = kmeans(x, k, restarts, seed, fits.last().map(|f| &f.centroids))?;
        fits.push(fit);
    }
    let sse_curve: Vec<f64> = fits.iter().map(|f| f.sse).collect();
    let k = elbow(&sse_curve);
    let chosen = fits.swap_remove(k - 1);
    Ok(IlluminationClustering {
        k,
        centroids: chosen.centroids,
        labels: chosen.labels,
        sse_curve,
    })
}

/// Clusters every sample's illumination features and writes the cluster id
/// into `illum_cluster`.
pub fn assign_illumination_clusters(
    manifest: &mut DatasetManifest,
    store: &dyn SampleStore,
    kmax: usize,
    restarts: usize,
    seed: u64,
) -> Result<IlluminationClustering> {
    let mut x = Array2::zeros((manifest.len(), FEATURE_LEN));
    for (i, s) in manifest.samples.iter().enumerate() {
        x.row_mut(i).assign(&illumination_features(&store.image(s)?));
    }
    let clustering = cluster_features(&x, kmax, restarts, seed)?;
    for (s, &l) in manifest.samples.iter_mut().zip(&clustering.labels) {
        s.illum_cluster = Some(l as u32);
    }
    Ok(clustering)
}

pub fn sse_curve_csv(sse: &[f64]) -> String {
    let mut out = String::from("k,sse\n");
    for (i, s) in sse.iter().enumerate() {
        writeln!(out, "{},{s}", i + 1).unwrap();
    }
    out
}

/// Sample-level attribute a shifted subset is selected on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Ethnicity(String),
    AgeAtLeast(u32),
    IllumCluster(u32),
}

impl Attribute {
    pub fn holds(&self, s: &ImageSample) -> Result<bool> {
        Ok(match self {
            Attribute::Ethnicity(e) => &s.ethnicity == e,
            Attribute::AgeAtLeast(a) => s.age >= *a,
            Attribute::IllumCluster(c) => {
                s.illum_cluster.ok_or_else(|| {
                    Error::Data(format!("`{}` has no illumination cluster", s.sample_id))
                })? == *c
            }
        })
    }

    pub fn name(&self) -> String {
        match self {
            Attribute::Ethnicity(e) => format!("ethnicity={e}"),
            Attribute::AgeAtLeast(a) => format!("age>={a}"),
            Attribute::IllumCluster(c) => format!("illum={c}"),
        }
    }
}

impl FromStr for Attribute {
    type Err = Error;
    /// `ethnicity=<label>`, `age>=<years>` or `illum=<cluster>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad attribute `{s}`"));
        if let Some(v) = s.strip_prefix("ethnicity=") {
            Ok(Attribute::Ethnicity(v.to_string()))
        } else if let Some(v) = s.strip_prefix("age>=") {
            Ok(Attribute::AgeAtLeast(v.parse().map_err(|_| bad())?))
        } else if let Some(v) = s.strip_prefix("illum=") {
            Ok(Attribute::IllumCluster(v.parse().map_err(|_| bad())?))
        } else {
            Err(bad())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeTarget {
    /// One of `C`, `D`, `E`.
    pub subset: String,
    pub attribute: Attribute,
    /// Requested fraction of the subset's samples having `attribute`.
    pub fraction: f64,
    /// Subjects are added until the subset holds at least this many samples.
    pub n_samples: usize,
}

impl FromStr for AttributeTarget {
    type Err = Error;
    /// `C:ethnicity=eth_x:0.52:120`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::Config(format!("bad target `{s}`, expected SUBSET:ATTRIBUTE:FRACTION:N_SAMPLES"));
        if parts.len() != 4 {
            return Err(bad());
        }
        Ok(Self {
            subset: parts[0].to_string(),
            attribute: parts[1].parse()?,
            fraction: parts[2].parse().map_err(|_| bad())?,
            n_samples: parts[3].parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub holdout_micro_types: Vec<String>,
    pub targets: Vec<AttributeTarget>,
    /// Allowed deviation of each achieved marginal, in percentage points.
    pub tolerance_pp: f64,
    /// Fraction of each subset's subjects assigned to its test split.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            holdout_micro_types: Vec::new(),
            targets: Vec::new(),
            tolerance_pp: 2.0,
            test_fraction: 0.3,
            seed: 0,
        }
    }
}

pub const SUBSETS: [&str; 5] = ["A", "B", "C", "D", "E"];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SubsetDistribution {
    pub n_samples: usize,
    pub n_subjects: usize,
    pub n_live: usize,
    pub n_spoof: usize,
    pub ethnicity: BTreeMap<String, f64>,
    /// Decade buckets such as `"20-29"`.
    pub age: BTreeMap<String, f64>,
    pub illum_cluster: BTreeMap<String, f64>,
    pub spoof_micro: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetOutcome {
    pub subset: String,
    pub attribute: String,
    pub requested: f64,
    pub achieved: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub subsets: BTreeMap<String, SubsetDistribution>,
    pub targets: Vec<TargetOutcome>,
    pub holdout_micro_types: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolSpec {
    pub subsets: BTreeMap<String, (DatasetManifest, DatasetManifest)>,
    pub report: DistributionReport,
}

impl ProtocolSpec {
    pub fn all(&self, subset: &str) -> Vec<&ImageSample> {
        self.subsets
            .get(subset)
            .map(|(tr, te)| tr.samples.iter().chain(&te.samples).collect())
            .unwrap_or_default()
    }

    /// Micro spoof types occurring in a subset.
    pub fn micro_types(&self, subset: &str) -> BTreeSet<String> {
        self.all(subset)
            .into_iter()
            .filter(|s| s.label == Label::Spoof)
            .map(|s| s.spoof_micro.clone())
            .collect()
    }
}

fn fraction_map<'a>(keys: impl Iterator<Item = String> + 'a, n: usize) -> BTreeMap<String, f64> {
    let mut m: BTreeMap<String, f64> = BTreeMap::new();
    for k in keys {
        *m.entry(k).or_default() += 1.0;
    }
    for v in m.values_mut() {
        *v /= n.max(1) as f64;
    }
    m
}

pub fn distribution_of(samples: &[&ImageSample]) -> SubsetDistribution {
    let n = samples.len();
    let mut spoof_micro = BTreeMap::new();
    for s in samples.iter().filter(|s| s.label == Label::Spoof) {
        *spoof_micro.entry(s.spoof_micro.clone()).or_default() += 1;
    }
    SubsetDistribution {
        n_samples: n,
        n_subjects: samples.iter().map(|s| s.subject()).collect::<BTreeSet<_>>().len(),
        n_live: samples.iter().filter(|s| s.label == Label::Live).count(),
        n_spoof: samples.iter().filter(|s| s.label == Label::Spoof).count(),
        ethnicity: fraction_map(samples.iter().map(|s| s.ethnicity.clone()), n),
        age: fraction_map(
            samples.iter().map(|s| {
                let d = s.age / 10 * 10;
                format!("{d}-{}", d + 9)
            }),
            n,
        ),
        illum_cluster: fraction_map(
            samples
                .iter()
                .map(|s| s.illum_cluster.map_or_else(|| "none".to_string(), |c| c.to_string())),
            n,
        ),
        spoof_micro,
    }
}

/// Samples of one subject with the count holding the attribute.
struct SubjectGroup {
    name: String,
    samples: Vec<ImageSample>,
}

fn group_by_subject(samples: Vec<ImageSample>) -> Vec<SubjectGroup> {
    let mut map: BTreeMap<String, Vec<ImageSample>> = BTreeMap::new();
    for s in samples {
        map.entry(s.subject().to_string()).or_default().push(s);
    }
    map.into_iter().map(|(name, samples)| SubjectGroup { name, samples }).collect()
}

/// Greedy subject selection: each step adds the subject that moves the
/// running attribute fraction closest to the request.
fn select_subjects(
    pool: &mut Vec<SubjectGroup>,
    target: &AttributeTarget,
    tolerance_pp: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<SubjectGroup>, f64)> {
    let mut counts = Vec::with_capacity(pool.len());
    for g in pool.iter() {
        let hits = g.samples.iter().map(|s| target.attribute.holds(s)).collect::<Result<Vec<_>>>()?;
        counts.push((hits.iter().filter(|&&h| h).count(), g.samples.len()));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(rng);
    let (mut hit, mut total) = (0usize, 0usize);
    let mut chosen: Vec<usize> = Vec::new();
    while total < target.n_samples {
        let best = order
            .iter()
            .enumerate()
            .map(|(pos, &i)| {
                let (h, t) = counts[i];
                let f = (hit + h) as f64 / (total + t) as f64;
                (pos, (f - target.fraction).abs())
            })
            .fold(None, |acc: Option<(usize, f64)>, v| match acc {
                Some(a) if a.1 <= v.1 => Some(a),
                _ => Some(v),
            });
        let Some((pos, _)) = best else {
            return Err(Error::Infeasible {
                attribute: target.attribute.name(),
                message: format!(
                    "subset {} needs {} samples but only {total} remain",
                    target.subset, target.n_samples
                ),
            });
        };
        let i = order.remove(pos);
        hit += counts[i].0;
        total += counts[i].1;
        chosen.push(i);
    }
    let achieved = hit as f64 / total as f64;
    if (achieved - target.fraction).abs() * 100.0 > tolerance_pp + 1e-9 {
        return Err(Error::Infeasible {
            attribute: target.attribute.name(),
            message: format!(
                "subset {} reaches {:.2}% against a requested {:.2}%",
                target.subset,
                100.0 * achieved,
                100.0 * target.fraction
            ),
        });
    }
    chosen.sort_unstable();
    let mut picked = Vec::with_capacity(chosen.len());
    for &i in chosen.iter().rev() {
        picked.push(pool.remove(i));
    }
    picked.reverse();
    Ok((picked, achieved))
}

/// Subject-disjoint train/test split of one subset.
fn split_subjects(
    subset: &str,
    mut groups: Vec<SubjectGroup>,
    test_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(DatasetManifest, DatasetManifest)> {
    groups.shuffle(rng);
    let n = groups.len();
    let mut n_test = (n as f64 * test_fraction).round() as usize;
    if n >= 2 {
        n_test = n_test.clamp(1, n - 1);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, g) in groups.into_iter().enumerate() {
        if i < n_test {
            test.extend(g.samples);
        } else {
            train.extend(g.samples);
        }
    }
    let by_id = |a: &ImageSample, b: &ImageSample| a.sample_id.cmp(&b.sample_id);
    train.sort_by(by_id);
    test.sort_by(by_id);
    Ok((
        DatasetManifest::new(subset, Split::Train, train)?,
        DatasetManifest::new(subset, Split::Test, test)?,
    ))
}

/// Partitions `manifest` into subsets A–E. B receives every spoof of a
/// held-out micro type plus the live samples of the subjects presenting
/// them; C/D/E are selected from the remaining subjects; A is the rest.
pub fn build_protocol_splits(manifest: &DatasetManifest, config: &ProtocolConfig) -> Result<ProtocolSpec> {
    manifest.validate()?;
    if !(0.0..1.0).contains(&config.test_fraction) {
        return Err(Error::Config(format!("test_fraction {} outside [0, 1)", config.test_fraction)));
    }
    let mut seen_targets = BTreeSet::new();
    for t in &config.targets {
        if !["C", "D", "E"].contains(&t.subset.as_str()) || !seen_targets.insert(t.subset.as_str()) {
            return Err(Error::Config(format!("target subset `{}` must be a distinct one of C, D, E", t.subset)));
        }
        if !(0.0..=1.0).contains(&t.fraction) {
            return Err(Error::Config(format!("target fraction {} outside [0, 1]", t.fraction)));
        }
    }
    let holdout: BTreeSet<&str> = config.holdout_micro_types.iter().map(String::as_str).collect();
    let is_holdout = |s: &ImageSample| s.label == Label::Spoof && holdout.contains(s.spoof_micro.as_str());
    let b_subjects: BTreeSet<String> = manifest
        .samples
        .iter()
        .filter(|s| is_holdout(s))
        .map(|s| s.subject().to_string())
        .collect();
    let (b_samples, rest): (Vec<ImageSample>, Vec<ImageSample>) = manifest
        .samples
        .iter()
        .cloned()
        .partition(|s| is_holdout(s) || (s.label == Label::Live && b_subjects.contains(s.subject())));

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut pool = group_by_subject(rest);
    // B subjects may still own non-holdout spoofs; those stay in A so that
    // no subject is split across the shifted subsets.
    let (b_leftover, mut pool_rest): (Vec<SubjectGroup>, Vec<SubjectGroup>) =
        pool.drain(..).partition(|g| b_subjects.contains(&g.name));
    let mut groups: BTreeMap<String, Vec<SubjectGroup>> = BTreeMap::new();
    groups.insert("B".into(), group_by_subject(b_samples));
    let mut outcomes = Vec::new();
    let mut targets = config.targets.clone();
    targets.sort_by(|a, b| a.subset.cmp(&b.subset));
    for t in &targets {
        let (picked, achieved) = select_subjects(&mut pool_rest, t, config.tolerance_pp, &mut rng)?;
        outcomes.push(TargetOutcome {
            subset: t.subset.clone(),
            attribute: t.attribute.name(),
            requested: t.fraction,
            achieved,
        });
        groups.insert(t.subset.clone(), picked);
    }
    pool_rest.extend(b_leftover);
    groups.insert("A".into(), pool_rest);

    let mut subsets = BTreeMap::new();
    let mut report = DistributionReport {
        holdout_micro_types: config.holdout_micro_types.clone(),
        targets: outcomes,
        ..Default::default()
    };
    for name in SUBSETS {
        let g = groups.remove(name).unwrap_or_default();
        let (train, test) = split_subjects(name, g, config.test_fraction, &mut rng)?;
        let all: Vec<&ImageSample> = train.samples.iter().chain(&test.samples).collect();
        report.subsets.insert(name.to_string(), distribution_of(&all));
        subsets.insert(name.to_string(), (train, test));
    }
    let spec = ProtocolSpec { subsets, report };
    check_protocol(&spec, manifest.len())?;
    Ok(spec)
}

/// Asserts A/B spoof-type disjointness, subject-disjoint splits and that
/// every input sample lands in exactly one subset.
pub fn check_protocol(spec: &ProtocolSpec, n_input: usize) -> Result<()> {
    let a = spec.micro_types("A");
    let b = spec.micro_types("B");
    if let Some(t) = a.intersection(&b).next() {
        return Err(Error::ProtocolViolation(format!("spoof type `{t}` occurs in both A and B")));
    }
    let mut ids = BTreeSet::new();
    for (name, (train, test)) in &spec.subsets {
        let tr = train.subjects();
        if let Some(s) = test.subjects().intersection(&tr).next() {
            return Err(Error::ProtocolViolation(format!("subject `{s}` is in both splits of {name}")));
        }
        for s in train.samples.iter().chain(&test.samples) {
            if !ids.insert(s.sample_id.as_str()) {
                return Err(Error::ProtocolViolation(format!("`{}` is in more than one subset", s.sample_id)));
            }
        }
    }
    if ids.len() != n_input {
        return Err(Error::ProtocolViolation(format!(
            "{} of {n_input} samples were assigned to a subset",
            ids.len()
        )));
    }
    Ok(())
}

/// Writes `{S}_train.csv`, `{S}_test.csv` and `distribution_report.json`.
pub fn write_protocol(spec: &ProtocolSpec, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, (train, test)) in &spec.subsets {
        write_manifest(train, &dir.join(format!("{name}_train.csv")))?;
        write_manifest(test, &dir.join(format!("{name}_test.csv")))?;
    }
    let path = dir.join("distribution_report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&spec.report)?).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SpoofMacro;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn sample(subject: usize, k: usize, label: Label, micro: &str, eth: &str, age: u32) -> ImageSample {
        ImageSample {
            sample_id: format!("P-s{subject:04}_{k:03}"),
            path: format!("{subject}_{k}.png").into(),
            label,
            spoof_macro: if label == Label::Live { SpoofMacro::None } else { SpoofMacro::Print },
            spoof_micro: if label == Label::Live { "none".into() } else { micro.into() },
            ethnicity: eth.into(),
            age,
            illum_cluster: Some((subject % 3) as u32),
            domain_id: "P".into(),
            gt_mask_path: None,
        }
    }

    /// 100 subjects, 4 samples each; every tenth subject is `eth_x`.
    fn pool() -> DatasetManifest {
        let mut v = Vec::new();
        for s in 0..100 {
            let eth = if s % 10 == 0 { "eth_x" } else { "eth_y" };
            let age = 20 + (s as u32 * 7) % 50;
            v.push(sample(s, 0, Label::Live, "", eth, age));
            v.push(sample(s, 1, Label::Live, "", eth, age));
            let micro = if s % 7 == 0 { "funny_eyes" } else { "photo" };
            v.push(sample(s, 2, Label::Spoof, micro, eth, age));
            v.push(sample(s, 3, Label::Spoof, "replay_screen", eth, age));
        }
        DatasetManifest::new("P", Split::Train, v).unwrap()
    }

    #[test]
    fn features_of_constant_images() {
        let black = illumination_features(&Image { data: Array3::zeros((3, 4, 4)) });
        assert_eq!(black[0], 0.0);
        assert_eq!(black[1], 0.0);
        assert_eq!(black[2], 1.0);
        let grey = illumination_features(&Image { data: Array3::from_elem((3, 4, 4), 0.5) });
        assert!((grey[0] - 0.5).abs() < 1e-15 && grey[1].abs() < 1e-15);
        assert_eq!(grey[2 + 4], 1.0);
    }

    #[test]
    fn identical_samples_give_one_cluster() {
        let x = Array2::from_elem((10, 3), 0.2);
        let c = cluster_features(&x, 5, 3, 0).unwrap();
        assert_eq!(c.k, 1);
        assert!(c.sse_curve.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn elbow_finds_group_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for groups in [vec![0.1, 0.9], vec![0.1, 0.5, 0.9]] {
            let n = 30 * groups.len();
            let x = Array2::from_shape_fn((n, 1), |(i, _)| {
                let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                groups[i % groups.len()] + 0.02 * z
            });
            assert_eq!(cluster_features(&x, 8, 10, 1).unwrap().k, groups.len());
        }
    }

    #[test]
    fn too_few_samples_for_kmax() {
        let x = Array2::zeros((3, 2));
        assert!(matches!(cluster_features(&x, 4, 2, 0), Err(Error::Data(_))));
    }

    #[test]
    fn holdout_and_marginal_targets() {
        let cfg = ProtocolConfig {
            holdout_micro_types: vec!["funny_eyes".into()],
            targets: vec![AttributeTarget {
                subset: "C".into(),
                attribute: "ethnicity=eth_x".parse().unwrap(),
                fraction: 0.52,
                n_samples: 24,
            }],
            ..Default::default()
        };
        let spec = build_protocol_splits(&pool(), &cfg).unwrap();
        assert!(spec.micro_types("B").iter().all(|t| t == "funny_eyes"));
        assert!(!spec.micro_types("A").contains("funny_eyes"));
        let c = spec.all("C");
        let frac = c.iter().filter(|s| s.ethnicity == "eth_x").count() as f64 / c.len() as f64;
        assert!((0.50..=0.54).contains(&frac), "{frac}");
        assert_eq!(spec.report.subsets["C"].ethnicity["eth_x"], frac);
        assert_eq!(spec.report.targets[0].achieved, frac);
        assert_eq!(build_protocol_splits(&pool(), &cfg).unwrap(), spec);
    }

    #[test]
    fn empty_holdout_keeps_spoofs_in_a() {
        let spec = build_protocol_splits(&pool(), &ProtocolConfig::default()).unwrap();
        assert_eq!(spec.all("B").len(), 0);
        assert_eq!(spec.all("A").len(), 400);
    }

    #[test]
    fn unreachable_marginal_names_attribute() {
        let cfg = ProtocolConfig {
            targets: vec![AttributeTarget {
                subset: "D".into(),
                attribute: Attribute::AgeAtLeast(200),
                fraction: 0.5,
                n_samples: 20,
            }],
            ..Default::default()
        };
        match build_protocol_splits(&pool(), &cfg) {
            Err(Error::Infeasible { attribute, .. }) => assert_eq!(attribute, "age>=200"),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn target_parsing() {
        let t: AttributeTarget = "E:illum=2:0.6:50".parse().unwrap();
        assert_eq!(t.attribute, Attribute::IllumCluster(2));
        assert!("E:light=2:0.6:50".parse::<AttributeTarget>().is_err());
        assert!("E:illum=2:0.6".parse::<AttributeTarget>().is_err());
    }

    proptest! {
        #[test]
        fn sse_curve_is_non_increasing(values in prop::collection::vec(0.0f64..1.0, 8..40), seed in 0u64..50) {
            let x = Array2::from_shape_vec((values.len() / 2, 2), values[..values.len() / 2 * 2].to_vec()).unwrap();
            let c = cluster_features(&x, 4, 3, seed).unwrap();
            for w in c.sse_curve.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
            prop_assert!(c.labels.iter().all(|&l| l < c.k));
        }
    }
}
