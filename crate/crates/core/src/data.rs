//! Multi-domain datasets and leave-one-domain-out splits.
//!
//! The trainer never sees a [`DomainDataset`] directly. [`views`] turns a
//! dataset and a [`SplitPlan`] into [`SourceData`] (train/validation tensors of
//! the source domains) and a [`TargetEvaluator`] that only reports metrics.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::nn::ModelState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub name: String,
    /// `[n × input_dim]`
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl Domain {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: String,
    pub seed: Option<u64>,
    pub params: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub domains: Vec<Domain>,
    pub num_classes: usize,
    pub input_dim: usize,
    /// Original label values, indexed by class id.
    pub class_names: Vec<String>,
    pub meta: DatasetMeta,
}

impl DomainDataset {
    pub fn new(domains: Vec<Domain>, class_names: Vec<String>, meta: DatasetMeta) -> Result<Self> {
        let first = domains.first().ok_or_else(|| contract("dataset has no domains"))?;
        let (_, input_dim) = first.features.dims2()?;
        let num_classes = class_names.len();
        for d in &domains {
            let (n, w) = d.features.dims2()?;
            if w != input_dim {
                return Err(contract(format!(
                    "domain {} has width {w}, expected {input_dim}",
                    d.name
                )));
            }
            if n != d.labels.len() || n == 0 {
                return Err(contract(format!("domain {} is empty or mislabelled", d.name)));
            }
            if let Some(l) = d.labels.iter().find(|&&l| l >= num_classes) {
                return Err(contract(format!("domain {} has label {l} ≥ {num_classes}", d.name)));
            }
        }
        Ok(Self {
            domains,
            num_classes,
            input_dim,
            class_names,
            meta,
        })
    }

    pub fn domain_index(&self, name: &str) -> Result<usize> {
        self.domains
            .iter()
            .position(|d| d.name == name)
            .ok_or_else(|| contract(format!("unknown domain '{name}'")))
    }

    pub fn domain(&self, name: &str) -> Result<&Domain> {
        Ok(&self.domains[self.domain_index(name)?])
    }

    pub fn domain_names(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.name.clone()).collect()
    }
}

fn domain_rng(seed: u64, domain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(domain as u64 + 1);
    rng
}

fn binary_classes() -> Vec<String> {
    vec!["0".into(), "1".into()]
}

/// Two interleaved half-moons, one domain per rotation angle (degrees).
///
/// Every domain rotates the same base point cloud about the moons' center, so
/// domains differ only by their angle. Class 0 gets `n - n/2` points, class 1
/// gets `n/2`.
pub fn gen_rotated_moons(n_per_domain: usize, angles: &[f64], noise_sd: f64, seed: u64) -> Result<DomainDataset> {
    if angles.len() < 3 {
        return Err(contract(format!(
            "rotated moons needs at least 3 domains, got {}",
            angles.len()
        )));
    }
    if !(noise_sd >= 0.0) || n_per_domain < 2 {
        return Err(contract("noise_sd must be ≥ 0 and n_per_domain ≥ 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n1 = n_per_domain / 2;
    let n0 = n_per_domain - n1;
    let mut base = Vec::with_capacity(n_per_domain);
    let mut labels = Vec::with_capacity(n_per_domain);
    for (label, count) in [(0usize, n0), (1, n1)] {
        for _ in 0..count {
            let t: f64 = rng.random_range(0.0..PI);
            let (x, y) = if label == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            let ex: f64 = rng.sample(StandardNormal);
            let ey: f64 = rng.sample(StandardNormal);
            base.push((x + noise_sd * ex - 0.5, y + noise_sd * ey - 0.25));
            labels.push(label);
        }
    }
    let domains = angles
        .iter()
        .enumerate()
        .map(|(i, &deg)| {
            let (s, c) = deg.to_radians().sin_cos();
            let data = base
                .iter()
                .flat_map(|&(x, y)| [c * x - s * y, s * x + c * y])
                .collect();
            Ok(Domain {
                name: format!("rot{i}"),
                features: Tensor::matrix(n_per_domain, 2, data)?,
                labels: labels.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let mut params = BTreeMap::new();
    params.insert("angles".into(), format!("{angles:?}"));
    params.insert("noise_sd".into(), noise_sd.to_string());
    params.insert("n_per_domain".into(), n_per_domain.to_string());
    DomainDataset::new(
        domains,
        binary_classes(),
        DatasetMeta {
            generator: "rotated_moons".into(),
            seed: Some(seed),
            params,
        },
    )
}

/// Parameters of the spurious-correlation benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpuriousBlobs {
    pub n_per_domain: usize,
    /// Label agreement of the spurious feature per domain, in `[-1, 1]`. The
    /// last entry is the designated target domain.
    pub correlations: Vec<f64>,
    /// Distance between the two class means in the causal subspace.
    pub signal_sep: f64,
    #[serde(default = "default_causal_dims")]
    pub causal_dims: usize,
    pub seed: u64,
}

fn default_causal_dims() -> usize {
    8
}

impl SpuriousBlobs {
    /// Three sources at +0.9/+0.8/+0.7 and a target at −0.9, 500 samples each.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            n_per_domain: 500,
            correlations: vec![0.9, 0.8, 0.7, -0.9],
            signal_sep: DEFAULT_SIGNAL_SEP,
            causal_dims: 8,
            seed,
        }
    }
}

/// Causal class separation of the default benchmark.
pub const DEFAULT_SIGNAL_SEP: f64 = 3.0;

/// Gaussian class blobs in `causal_dims` dimensions plus one binary feature
/// that equals the label with probability `(1 + corr) / 2` in each domain.
pub fn gen_spurious_blobs(cfg: &SpuriousBlobs) -> Result<DomainDataset> {
    let k = cfg.correlations.len();
    if k < 2 {
        return Err(contract("spurious blobs needs at least one source and one target"));
    }
    if let Some(c) = cfg.correlations.iter().find(|c| !(-1.0..=1.0).contains(*c)) {
        return Err(contract(format!("correlation {c} outside [-1, 1]")));
    }
    let target = cfg.correlations[k - 1];
    if cfg.correlations[..k - 1].contains(&target) {
        return Err(contract(format!(
            "target correlation {target} must differ from every source correlation"
        )));
    }
    if cfg.causal_dims == 0 || cfg.n_per_domain < 2 || !(cfg.signal_sep >= 0.0) {
        return Err(contract("need causal_dims ≥ 1, n_per_domain ≥ 2, signal_sep ≥ 0"));
    }
    let dims = cfg.causal_dims + 1;
    let shift = cfg.signal_sep / (2.0 * (cfg.causal_dims as f64).sqrt());
    let n1 = cfg.n_per_domain / 2;
    let n0 = cfg.n_per_domain - n1;
    let domains = cfg
        .correlations
        .iter()
        .enumerate()
        .map(|(d, &corr)| {
            let mut rng = domain_rng(cfg.seed, d);
            let agree = (1.0 + corr) / 2.0;
            let mut data = Vec::with_capacity(cfg.n_per_domain * dims);
            let mut labels = Vec::with_capacity(cfg.n_per_domain);
            for (label, count) in [(0usize, n0), (1, n1)] {
                let sign = if label == 1 { 1.0 } else { -1.0 };
                for _ in 0..count {
                    for _ in 0..cfg.causal_dims {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        data.push(sign * shift + e);
                    }
                    let u: f64 = rng.random();
                    let spur = if u < agree { label } else { 1 - label };
                    data.push(spur as f64);
                    labels.push(label);
                }
            }
            Ok(Domain {
                name: format!("d{d}"),
                features: Tensor::matrix(cfg.n_per_domain, dims, data)?,
                labels,
            })
        })
        .collect::<Result<_>>()?;
    let mut params = BTreeMap::new();
    params.insert("correlations".into(), format!("{:?}", cfg.correlations));
    params.insert("signal_sep".into(), cfg.signal_sep.to_string());
    params.insert("causal_dims".into(), cfg.causal_dims.to_string());
    params.insert("n_per_domain".into(), cfg.n_per_domain.to_string());
    DomainDataset::new(
        domains,
        binary_classes(),
        DatasetMeta {
            generator: "spurious_blobs".into(),
            seed: Some(cfg.seed),
            params,
        },
    )
}

/// Writes `domain,label,f0,f1,...`, labels as class names.
pub fn export_csv(ds: &DomainDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    let mut header = vec!["domain".to_string(), "label".to_string()];
    header.extend((0..ds.input_dim).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(csv_io)?;
    for d in &ds.domains {
        for i in 0..d.len() {
            let mut rec = vec![d.name.clone(), ds.class_names[d.labels[i]].clone()];
            rec.extend(d.features.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::IngestFile(e.to_string())
}

/// Reads a CSV with a header row. Every column other than the domain and
/// label columns is a numeric feature. Domains are ordered by name and class
/// ids follow the sorted unique label values (numerically when every label
/// parses as a number). Row numbers in errors are file line numbers, the
/// header being row 1.
pub fn ingest_csv(path: &Path, domain_column: &str, label_column: &str) -> Result<DomainDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(csv_io)?;
    let headers = rdr.headers().map_err(csv_io)?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::IngestFile(format!("missing column '{name}'")))
    };
    let dcol = find(domain_column)?;
    let lcol = find(label_column)?;
    let fcols: Vec<usize> = (0..headers.len()).filter(|&c| c != dcol && c != lcol).collect();
    if fcols.is_empty() {
        return Err(Error::IngestFile("no feature columns".into()));
    }

    let mut rows: Vec<(String, String, Vec<f64>)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| match e.position() {
            Some(p) => Error::Ingest {
                row: p.line(),
                detail: e.to_string(),
            },
            None => csv_io(e),
        })?;
        let row = rec.position().map_or(0, |p| p.line());
        if rec.len() != headers.len() {
            return Err(Error::Ingest {
                row,
                detail: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        let domain = rec[dcol].to_string();
        if domain.is_empty() {
            return Err(Error::Ingest {
                row,
                detail: format!("empty value in column '{domain_column}'"),
            });
        }
        let label = rec[lcol].to_string();
        if label.is_empty() {
            return Err(Error::Ingest {
                row,
                detail: format!("empty value in column '{label_column}'"),
            });
        }
        let feats = fcols
            .iter()
            .map(|&c| match rec[c].parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Ingest {
                    row,
                    detail: format!("column '{}': '{}' is not a finite number", &headers[c], &rec[c]),
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((domain, label, feats));
    }
    if rows.is_empty() {
        return Err(Error::IngestFile("no data rows".into()));
    }

    let mut class_names: Vec<String> = rows.iter().map(|r| r.1.clone()).collect();
    class_names.sort();
    class_names.dedup();
    if class_names.iter().all(|l| l.parse::<f64>().is_ok()) {
        class_names.sort_by(|a, b| {
            a.parse::<f64>()
                .unwrap()
                .partial_cmp(&b.parse::<f64>().unwrap())
                .unwrap()
        });
    }
    let class_of: BTreeMap<&str, usize> = class_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();

    let mut grouped: BTreeMap<String, (Vec<f64>, Vec<usize>)> = BTreeMap::new();
    for (domain, label, feats) in &rows {
        let e = grouped.entry(domain.clone()).or_default();
        e.0.extend_from_slice(feats);
        e.1.push(class_of[label.as_str()]);
    }
    let width = fcols.len();
    let domains = grouped
        .into_iter()
        .map(|(name, (data, labels))| {
            Ok(Domain {
                name,
                features: Tensor::matrix(labels.len(), width, data)?,
                labels,
            })
        })
        .collect::<Result<_>>()?;
    let mut params = BTreeMap::new();
    params.insert("path".into(), path.display().to_string());
    DomainDataset::new(
        domains,
        class_names.clone(),
        DatasetMeta {
            generator: "csv".into(),
            seed: None,
            params,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSplit {
    pub domain: String,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Target domain plus a stratified train/validation split of every source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub target_domain: String,
    pub sources: Vec<SourceSplit>,
    pub val_fraction: f64,
    pub seed: u64,
}

/// Fraction of each source domain held out for in-domain validation.
pub const VAL_FRACTION: f64 = 0.2;

/// Holds out `target_domain` and splits each source domain per class into
/// `round(n_c · val_fraction)` validation samples and the rest for training.
pub fn split_leave_one_out(ds: &DomainDataset, target_domain: &str, val_fraction: f64, seed: u64) -> Result<SplitPlan> {
    let t = ds.domain_index(target_domain)?;
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(contract(format!("validation fraction {val_fraction} outside (0, 1)")));
    }
    if ds.domains.len() < 2 {
        return Err(contract("leave-one-out needs at least one source domain"));
    }
    let mut sources = Vec::new();
    for (i, d) in ds.domains.iter().enumerate() {
        if i == t {
            continue;
        }
        if d.len() < 5 {
            return Err(contract(format!(
                "source domain {} has {} samples, need at least 5",
                d.name,
                d.len()
            )));
        }
        let mut rng = domain_rng(seed, i);
        let mut train = Vec::new();
        let mut val = Vec::new();
        for c in 0..ds.num_classes {
            let mut idx: Vec<usize> = (0..d.len()).filter(|&j| d.labels[j] == c).collect();
            idx.shuffle(&mut rng);
            let n_val = (idx.len() as f64 * val_fraction).round() as usize;
            val.extend_from_slice(&idx[..n_val]);
            train.extend_from_slice(&idx[n_val..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        sources.push(SourceSplit {
            domain: d.name.clone(),
            train,
            val,
        });
    }
    Ok(SplitPlan {
        target_domain: target_domain.to_string(),
        sources,
        val_fraction,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceDomain {
    pub name: String,
    pub train_x: Tensor,
    pub train_y: Vec<usize>,
    pub val_x: Tensor,
    pub val_y: Vec<usize>,
}

/// Everything the trainer is allowed to look at.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceData {
    pub domains: Vec<SourceDomain>,
    pub input_dim: usize,
    pub num_classes: usize,
}

fn stack(parts: &[(&Tensor, &[usize])]) -> Result<(Tensor, Vec<usize>)> {
    let (_, w) = parts[0].0.dims2()?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (x, y) in parts {
        data.extend_from_slice(x.data());
        labels.extend_from_slice(y);
    }
    Ok((Tensor::matrix(labels.len(), w, data)?, labels))
}

impl SourceData {
    /// Validation samples of all source domains, concatenated in domain order.
    pub fn val_pooled(&self) -> Result<(Tensor, Vec<usize>)> {
        let parts: Vec<_> = self.domains.iter().map(|d| (&d.val_x, d.val_y.as_slice())).collect();
        stack(&parts)
    }

    pub fn train_pooled(&self) -> Result<(Tensor, Vec<usize>)> {
        let parts: Vec<_> = self
            .domains
            .iter()
            .map(|d| (&d.train_x, d.train_y.as_slice()))
            .collect();
        stack(&parts)
    }
}

/// Metric-only access to the held-out domain.
#[derive(Debug, Clone)]
pub struct TargetEvaluator {
    name: String,
    x: Tensor,
    y: Vec<usize>,
}

impl TargetEvaluator {
    pub fn new(name: impl Into<String>, x: Tensor, y: Vec<usize>) -> Result<Self> {
        let (n, _) = x.dims2()?;
        if n != y.len() || n == 0 {
            return Err(contract("target set is empty or mislabelled"));
        }
        Ok(Self {
            name: name.into(),
            x,
            y,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn accuracy(&self, model: &ModelState) -> Result<f64> {
        model.accuracy(&self.x, &self.y)
    }

    pub fn mean_loss(&self, model: &ModelState) -> Result<f64> {
        model.mean_loss(&self.x, &self.y)
    }
}

/// Materializes the split into trainer-side data and a sealed target.
pub fn views(ds: &DomainDataset, plan: &SplitPlan) -> Result<(SourceData, TargetEvaluator)> {
    let mut domains = Vec::new();
    for s in &plan.sources {
        if s.domain == plan.target_domain {
            return Err(contract("target domain listed as a source"));
        }
        let d = ds.domain(&s.domain)?;
        let labels = |idx: &[usize]| idx.iter().map(|&i| d.labels[i]).collect::<Vec<_>>();
        domains.push(SourceDomain {
            name: s.domain.clone(),
            train_x: d.features.select_rows(&s.train)?,
            train_y: labels(&s.train),
            val_x: d.features.select_rows(&s.val)?,
            val_y: labels(&s.val),
        });
    }
    let t = ds.domain(&plan.target_domain)?;
    Ok((
        SourceData {
            domains,
            input_dim: ds.input_dim,
            num_classes: ds.num_classes,
        },
        TargetEvaluator::new(plan.target_domain.clone(), t.features.clone(), t.labels.clone())?,
    ))
}
